use std::fmt::Write as _;
use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{macro_auc, mrr, rank_of};
use super::par_map;
use super::probe::{presence, Probe, ProbeConfig};
use crate::data::{cosine, BehaviorSequence, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::objectives::InterestMap;
use crate::state_store::{
    init_user, update_pool, update_recent_only, update_recompute_all, update_stateful, PoolWeighting, RecomputeBudget,
    UpdateStrategy, UserState,
};

/// `initial` behaviors in period 0, `increment` in each later period, for
/// `periods` periods.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimulationSchedule {
    pub initial: usize,
    pub increment: usize,
    pub periods: usize,
}

impl Default for SimulationSchedule {
    fn default() -> Self {
        Self {
            initial: 64,
            increment: 64,
            periods: 8,
        }
    }
}

impl SimulationSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.initial == 0 {
            return Err(Error::config("initial", "must be at least 1"));
        }
        if self.increment == 0 {
            return Err(Error::config("increment", "must be at least 1"));
        }
        if self.periods == 0 {
            return Err(Error::config("periods", "must be at least 1"));
        }
        Ok(())
    }

    /// Offsets of period `p` within the simulated stream (period `periods`
    /// is the label period following the last one).
    pub fn period(&self, p: usize) -> Range<usize> {
        if p == 0 {
            0..self.initial
        } else {
            let start = self.initial + (p - 1) * self.increment;
            start..start + self.increment
        }
    }

    /// Behaviors consumed after period `p`.
    pub fn seen_after(&self, p: usize) -> usize {
        self.period(p).end
    }

    /// Length of the separate history used for re-identification.
    pub fn history_len(&self) -> usize {
        self.initial * self.periods
    }

    /// Stream length covering every period plus the final label period.
    pub fn stream_len(&self) -> usize {
        self.period(self.periods).end
    }

    pub fn required_len(&self) -> usize {
        self.history_len() + self.stream_len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationConfig {
    pub schedule: SimulationSchedule,
    pub strategies: Vec<UpdateStrategy>,
    pub probe: ProbeConfig,
    /// Share of users set aside to train the next-period probe.
    pub probe_fraction: f64,
    /// Train a probe per strategy and period on that strategy's embeddings of
    /// the probe users; otherwise one probe trained on period-0 embeddings
    /// scores every strategy.
    pub retrain_per_period: bool,
    pub pool_weighting: PoolWeighting,
    pub recompute_budget: RecomputeBudget,
    pub seed: u64,
    pub workers: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            schedule: SimulationSchedule::default(),
            strategies: UpdateStrategy::ALL.to_vec(),
            probe: ProbeConfig::default(),
            probe_fraction: 0.5,
            retrain_per_period: true,
            pool_weighting: PoolWeighting::Equal,
            recompute_budget: RecomputeBudget {
                parallel_max_len: 4096,
                chunkwise_fallback: true,
            },
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationRow {
    pub metric: &'static str,
    pub strategy: UpdateStrategy,
    pub period: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationReport {
    pub seed: u64,
    pub rows: Vec<SimulationRow>,
    /// Final embeddings per strategy and period, in evaluation-user order.
    pub embeddings: Vec<(UpdateStrategy, Vec<Vec<Vec<f64>>>)>,
}

pub const SIMULATION_HEADER: &str = "metric,strategy,period,seed,value";

impl SimulationReport {
    pub fn value(&self, metric: &str, strategy: UpdateStrategy, period: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.strategy == strategy && r.period == period)
            .map(|r| r.value)
    }

    /// Values of `metric` for `strategy`, ordered by period.
    pub fn series(&self, metric: &str, strategy: UpdateStrategy) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric && r.strategy == strategy)
            .map(|r| r.value)
            .collect()
    }

    pub fn embeddings_of(&self, strategy: UpdateStrategy) -> Option<&Vec<Vec<Vec<f64>>>> {
        self.embeddings.iter().find(|(s, _)| *s == strategy).map(|(_, e)| e)
    }

    pub fn to_csv(&self, provenance: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(p) = provenance {
            let _ = writeln!(out, "# {p}");
        }
        let _ = writeln!(out, "{SIMULATION_HEADER}");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6}",
                r.metric, r.strategy, r.period, self.seed, r.value
            );
        }
        out
    }

    /// One block per metric: strategies as rows, periods as columns.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let mut metrics: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !metrics.contains(&r.metric) {
                metrics.push(r.metric);
            }
        }
        for m in metrics {
            let _ = writeln!(out, "{m}");
            let mut strategies: Vec<UpdateStrategy> = Vec::new();
            for r in self.rows.iter().filter(|r| r.metric == m) {
                if !strategies.contains(&r.strategy) {
                    strategies.push(r.strategy);
                }
            }
            for s in strategies {
                let _ = write!(out, "  {:<14}", s.name());
                for v in self.series(m, s) {
                    let _ = write!(out, " {v:>8.4}");
                }
                out.push('\n');
            }
        }
        out
    }
}

struct StrategyRun {
    states: Vec<UserState>,
}

fn advance(
    strategy: UpdateStrategy,
    users: &[&BehaviorSequence],
    run: &mut StrategyRun,
    p: usize,
    params: &Parameters<f32>,
    cfg: &SimulationConfig,
) -> Result<Vec<Vec<f64>>> {
    let offset = cfg.schedule.history_len();
    let range = cfg.schedule.period(p);
    let jobs: Vec<(usize, &BehaviorSequence)> = users.iter().copied().enumerate().collect();
    let results = par_map(&jobs, cfg.workers, |&(i, u)| -> Result<(Option<UserState>, Vec<f64>)> {
        let period = &u.ids[offset + range.start..offset + range.end];
        match strategy {
            UpdateStrategy::Stateful => {
                let (s, e) = update_stateful(&run.states[i], period, params)?;
                Ok((Some(s), e))
            }
            UpdateStrategy::RecentOnly => Ok((None, update_recent_only(period, params)?)),
            UpdateStrategy::PoolEmbeddings => {
                let (s, e) = update_pool(&run.states[i], period, params, cfg.pool_weighting)?;
                Ok((Some(s), e))
            }
            UpdateStrategy::RecomputeAll => Ok((
                None,
                update_recompute_all(&u.ids[offset..offset + range.end], params, &cfg.recompute_budget)?,
            )),
        }
    });
    let mut embeddings = Vec::with_capacity(users.len());
    for (i, r) in results.into_iter().enumerate() {
        let (state, e) = r?;
        if let Some(s) = state {
            run.states[i] = s;
        }
        embeddings.push(e);
    }
    Ok(embeddings)
}

fn next_period_labels(
    users: &[&BehaviorSequence],
    p: usize,
    cfg: &SimulationConfig,
    interest: &InterestMap,
) -> Vec<Vec<bool>> {
    let offset = cfg.schedule.history_len();
    let next = cfg.schedule.period(p + 1);
    users
        .iter()
        .map(|u| presence(&u.ids[offset + next.start..offset + next.end], interest))
        .collect()
}

fn train_probe(x: &[Vec<f64>], y: &[Vec<bool>], cfg: &ProbeConfig) -> Result<Probe> {
    // 4:1 train/validation split for early stopping
    let n_val = (x.len() / 5).max(1);
    let n_train = x.len() - n_val;
    Probe::train(&x[..n_train], &y[..n_train], &x[n_train..], &y[n_train..], cfg)
}

fn reid_mrr(current: &[Vec<f64>], historical: &[Vec<f64>]) -> Result<f64> {
    let ranks: Vec<usize> = current
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let scores: Vec<f64> = historical.iter().map(|h| cosine(e, h)).collect();
            rank_of(&scores, i)
        })
        .collect();
    mrr(&ranks)
}

/// Runs every strategy over the schedule on the evaluation users and
/// reports, per period, next-period behavior prediction AUC, user
/// re-identification MRR against embeddings of a separate earlier history,
/// and update wall-clock time.
///
/// Each user's log is laid out as `[history | period 0 | period 1 | … |
/// label period]`.
pub fn simulate_dynamic(
    users: &[BehaviorSequence],
    params: &Parameters<f32>,
    cfg: &SimulationConfig,
) -> Result<SimulationReport> {
    let sched = cfg.schedule;
    sched.validate()?;
    if cfg.strategies.is_empty() {
        return Err(Error::config("strategies", "no strategy selected"));
    }
    if !(cfg.probe_fraction > 0.0 && cfg.probe_fraction < 1.0) {
        return Err(Error::config("probe_fraction", "must lie strictly between 0 and 1"));
    }
    let needed = sched.required_len();
    if let Some(u) = users.iter().find(|u| u.ids.len() < needed) {
        return Err(Error::DataExhausted {
            user: u.user_id,
            available: u.ids.len(),
            needed,
        });
    }
    let mut order: Vec<&BehaviorSequence> = users.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_probe = (users.len() as f64 * cfg.probe_fraction).round() as usize;
    let (probe_users, eval_users) = order.split_at(n_probe);
    if probe_users.len() < 5 || eval_users.len() < 2 {
        return Err(Error::Task(format!(
            "{} users cannot fill both the probe set and the evaluation set",
            users.len()
        )));
    }
    let interest = InterestMap::new(&(NUM_SPECIALS as u32..params.config().vocab_size as u32).collect::<Vec<_>>());
    let h = sched.history_len();

    let historical = par_map(eval_users, cfg.workers, |u| {
        update_recompute_all(&u.ids[..h], params, &cfg.recompute_budget)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let probe_cfg = ProbeConfig {
        seed: cfg.probe.seed ^ cfg.seed,
        ..cfg.probe.clone()
    };
    let shared_probe = if cfg.retrain_per_period {
        None
    } else {
        let period0 = sched.period(0);
        let x = par_map(probe_users, cfg.workers, |u| {
            update_recent_only(&u.ids[h + period0.start..h + period0.end], params)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let y = next_period_labels(probe_users, 0, cfg, &interest);
        Some(train_probe(&x, &y, &probe_cfg)?)
    };

    let mut rows = Vec::new();
    let mut all_embeddings = Vec::new();
    for &strategy in &cfg.strategies {
        let mut run = StrategyRun {
            states: eval_users.iter().map(|u| init_user(u.user_id, params)).collect(),
        };
        let mut probe_run = StrategyRun {
            states: probe_users.iter().map(|u| init_user(u.user_id, params)).collect(),
        };
        let mut cumulative = 0.0;
        let mut per_period = Vec::with_capacity(sched.periods);
        for p in 0..sched.periods {
            let start = Instant::now();
            let emb = advance(strategy, eval_users, &mut run, p, params, cfg)?;
            let seconds = start.elapsed().as_secs_f64();
            cumulative += seconds;

            let probe = match &shared_probe {
                Some(pr) => pr.clone(),
                None => {
                    let x = advance(strategy, probe_users, &mut probe_run, p, params, cfg)?;
                    let y = next_period_labels(probe_users, p, cfg, &interest);
                    train_probe(&x, &y, &probe_cfg)?
                }
            };
            let labels = next_period_labels(eval_users, p, cfg, &interest);
            let (auc, _) = macro_auc(&probe.predict(&emb)?, &labels)?;
            let reid = reid_mrr(&emb, &historical)?;
            for (metric, value) in [
                ("next_period_auc", auc),
                ("reid_mrr", reid),
                ("period_seconds", seconds),
                ("cumulative_seconds", cumulative),
            ] {
                rows.push(SimulationRow {
                    metric,
                    strategy,
                    period: p,
                    value,
                });
            }
            per_period.push(emb);
        }
        log::info!("simulate: {strategy} done in {cumulative:.3}s");
        all_embeddings.push((strategy, per_period));
    }
    Ok(SimulationReport {
        seed: cfg.seed,
        rows,
        embeddings: all_embeddings,
    })
}
