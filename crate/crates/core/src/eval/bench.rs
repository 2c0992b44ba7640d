use std::fmt::Write as _;
use std::time::Instant;

use super::dynamic::SimulationSchedule;
use crate::data::BehaviorSequence;
use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::state_store::{
    decode_state, encode_state, init_user, update_pool, update_recent_only, update_recompute_all, update_stateful,
    PoolWeighting, RecomputeBudget, UpdateStrategy, UserState,
};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub repetitions: usize,
    /// Untimed runs of the first period of each strategy.
    pub warmup: usize,
    /// Round-trip stateful records through their binary encoding each period.
    pub persist_states: bool,
    pub recompute_budget: RecomputeBudget,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: 5,
            warmup: 1,
            persist_states: true,
            recompute_budget: RecomputeBudget {
                parallel_max_len: 1 << 16,
                chunkwise_fallback: true,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub strategy: UpdateStrategy,
    pub period: usize,
    pub period_seconds: f64,
    pub cumulative_seconds: f64,
}

pub const BENCH_HEADER: &str = "strategy,period,period_seconds,cumulative_seconds";

pub fn bench_to_csv(rows: &[BenchRow], provenance: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(p) = provenance {
        let _ = writeln!(out, "# {p}");
    }
    let _ = writeln!(out, "{BENCH_HEADER}");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6}",
            r.strategy, r.period, r.period_seconds, r.cumulative_seconds
        );
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One user's update for period `p`, starting from `state`.
fn run_user(
    strategy: UpdateStrategy,
    stream: &[u32],
    state: &UserState,
    sched: &SimulationSchedule,
    p: usize,
    params: &Parameters<f32>,
    cfg: &BenchConfig,
) -> Result<UserState> {
    let range = sched.period(p);
    let period = &stream[range.clone()];
    let persist = cfg.persist_states && matches!(strategy, UpdateStrategy::Stateful | UpdateStrategy::PoolEmbeddings);
    let decoded;
    let state = if persist {
        decoded = decode_state(&encode_state(state))?;
        &decoded
    } else {
        state
    };
    let (s, e) = match strategy {
        UpdateStrategy::Stateful => update_stateful(state, period, params)?,
        UpdateStrategy::PoolEmbeddings => update_pool(state, period, params, PoolWeighting::Equal)?,
        UpdateStrategy::RecentOnly => (state.clone(), update_recent_only(period, params)?),
        UpdateStrategy::RecomputeAll => (
            state.clone(),
            update_recompute_all(&stream[..range.end], params, &cfg.recompute_budget)?,
        ),
    };
    if persist {
        std::hint::black_box(encode_state(&s));
    }
    std::hint::black_box(e);
    Ok(s)
}

/// Per-period and cumulative update time of each strategy over the
/// schedule for all `users` (each needs `schedule.seen_after(P-1)`
/// behaviors). Runs on the calling thread only.
///
/// The states every period starts from are computed once, untimed, which
/// also warms the caches. Each repetition then walks the users and, per
/// user, times every strategy and period back to back, so all of them see
/// the same stretches of machine load; a period's time is the median over
/// repetitions of its per-user sum.
pub fn bench_strategies(
    users: &[BehaviorSequence],
    params: &Parameters<f32>,
    schedule: &SimulationSchedule,
    strategies: &[UpdateStrategy],
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    schedule.validate()?;
    if cfg.repetitions == 0 {
        return Err(Error::config("repetitions", "must be at least 1"));
    }
    let needed = schedule.seen_after(schedule.periods - 1);
    if let Some(u) = users.iter().find(|u| u.ids.len() < needed) {
        return Err(Error::DataExhausted {
            user: u.user_id,
            available: u.ids.len(),
            needed,
        });
    }
    // starts[s][u][p]: state of user u before period p under strategy s
    let mut starts = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let mut per_user = Vec::with_capacity(users.len());
        for u in users {
            let mut state = init_user(u.user_id, params);
            let mut chain = Vec::with_capacity(schedule.periods);
            for p in 0..schedule.periods {
                let next = run_user(strategy, &u.ids, &state, schedule, p, params, cfg)?;
                chain.push(std::mem::replace(&mut state, next));
            }
            per_user.push(chain);
        }
        starts.push(per_user);
    }
    for _ in 0..cfg.warmup {
        for (si, &strategy) in strategies.iter().enumerate() {
            for (ui, u) in users.iter().enumerate() {
                run_user(strategy, &u.ids, &starts[si][ui][0], schedule, 0, params, cfg)?;
            }
        }
    }
    // samples[s][p] holds one per-period total per repetition
    let mut samples = vec![vec![Vec::with_capacity(cfg.repetitions); schedule.periods]; strategies.len()];
    for _ in 0..cfg.repetitions {
        let mut totals = vec![vec![0.0; schedule.periods]; strategies.len()];
        for (ui, u) in users.iter().enumerate() {
            for (si, &strategy) in strategies.iter().enumerate() {
                for (p, total) in totals[si].iter_mut().enumerate() {
                    let start = Instant::now();
                    run_user(strategy, &u.ids, &starts[si][ui][p], schedule, p, params, cfg)?;
                    *total += start.elapsed().as_secs_f64();
                }
            }
        }
        for (si, row) in totals.into_iter().enumerate() {
            for (p, t) in row.into_iter().enumerate() {
                samples[si][p].push(t);
            }
        }
    }
    let mut rows = Vec::new();
    for (si, &strategy) in strategies.iter().enumerate() {
        let mut cumulative = 0.0;
        for (p, times) in samples[si].iter_mut().enumerate() {
            let seconds = median(std::mem::take(times));
            cumulative += seconds;
            rows.push(BenchRow {
                strategy,
                period: p,
                period_seconds: seconds,
                cumulative_seconds: cumulative,
            });
        }
        log::info!("bench: {strategy} total {cumulative:.3}s");
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
