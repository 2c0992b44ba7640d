//! Acceptance run: one PASS/FAIL line per criterion, then a non-zero exit
//! if any failed. Runs without the libtest harness so the lines always
//! show up in `cargo test` output.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use usekit::data::{generate_dataset, PersonaSpec};
use usekit::eval::{
    auc, bench_strategies, build_retrieval_task, harmonic, mrr, random_mrr, rank_of, run_retrieval, simulate_dynamic,
    BenchConfig, Embedder, ModelEmbedder, RandomEmbedder, RetrievalConfig, SimulationConfig, SimulationSchedule,
    TfEmbedder,
};
use usekit::model::{
    forward_chunkwise, forward_graph, forward_stream, load_params, save_params, ModelConfig, ModelState, Parameters,
};
use usekit::objectives::{
    build_fbp_labels, clm_loss, combined_loss, fbp_loss, sup_loss, ContrastiveBatch, InterestMap, NegativePool,
    ObjectiveConfig, ObjectiveSet,
};
use usekit::retention::{default_decay, retention_chunkwise, retention_parallel, retention_recurrent, HeadState};
use usekit::state_store::{
    decode_state, encode_state, init_user, load_state, read_state, save_state, update_recompute_all, update_stateful,
    RecomputeBudget, StateStore, UpdateStrategy,
};
use usekit::tensor::{grad_check, Graph, Scalar, Tensor};
use usekit::trainer::{train, TrainConfig};

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: &'static str, pass: bool, detail: String, started: Instant) -> Outcome {
    let detail = format!("{detail} [{:.1}s]", started.elapsed().as_secs_f64());
    println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, pass, detail }
}

/// Random split of `0..len` into consecutive non-empty chunks.
fn partition(len: usize, rng: &mut impl Rng) -> Vec<std::ops::Range<usize>> {
    let mut cuts = vec![0];
    let mut at = 0;
    while at < len {
        let step = rng.gen_range(1..=len.min(48));
        at = (at + step).min(len);
        cuts.push(at);
    }
    cuts.windows(2).map(|w| w[0]..w[1]).collect()
}

fn rows<T: Scalar>(t: &Tensor<T>, range: std::ops::Range<usize>) -> Tensor<T> {
    t.slice_rows(range.start, range.len()).unwrap()
}

/// Worst relative disagreement between the three retention forms on one
/// random head.
fn kernel_case<T: Scalar>(rng: &mut ChaCha8Rng) -> f64 {
    let t = rng.gen_range(1..=256);
    let dk = rng.gen_range(1..=16);
    let dv = rng.gen_range(1..=16);
    let decay = default_decay(rng.gen_range(0..4));
    let scale = 1.0 / (dk as f64).sqrt();
    let q: Tensor<T> = Tensor::<f64>::randn(&[t, dk], 1.0, rng).cast();
    let k: Tensor<T> = Tensor::<f64>::randn(&[t, dk], scale, rng).cast();
    let v: Tensor<T> = Tensor::<f64>::randn(&[t, dv], 1.0, rng).cast();
    let parallel = retention_parallel(&q, &k, &v, decay).unwrap();
    let (recurrent, s_rec) = retention_recurrent(&q, &k, &v, &HeadState::zeros(dk, dv), decay).unwrap();
    let mut state = HeadState::zeros(dk, dv);
    let mut parts = Vec::new();
    for r in partition(t, rng) {
        let (o, s) =
            retention_chunkwise(&rows(&q, r.clone()), &rows(&k, r.clone()), &rows(&v, r), &state, decay).unwrap();
        parts.push(o);
        state = s;
    }
    let chunked = Tensor::concat_rows(&parts).unwrap();
    recurrent
        .max_rel_diff(&parallel)
        .max(chunked.max_rel_diff(&parallel))
        .max(state.s.max_rel_diff(&s_rec.s))
}

fn random_model(rng: &mut ChaCha8Rng) -> ModelConfig {
    let num_heads = *[1, 2, 4].choose(rng).unwrap();
    let hidden_size = num_heads * rng.gen_range(1..=32 / num_heads);
    ModelConfig {
        vocab_size: 20,
        num_layers: rng.gen_range(1..=2),
        num_heads,
        hidden_size,
        ffn_size: 2 * hidden_size,
        num_predicted: 18,
        future_window: 4,
        max_seq_len: 256,
        chunk_len: 64,
        normalized_retention: false,
        clm_head: false,
    }
}

/// Parallel (training graph) vs token-by-token vs random chunks, whole model.
fn model_case<T: Scalar>(params: &Parameters<T>, ids: &[u32], rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let vars = params.to_graph(&mut g);
    let h = forward_graph(&mut g, params, &vars, ids).unwrap();
    let parallel = g.value(h).clone();
    let fresh = ModelState::fresh(params.config());
    let (recurrent, _) = forward_stream(params, ids, &fresh, 1).unwrap();
    let mut state = fresh;
    let mut parts = Vec::new();
    for r in partition(ids.len(), rng) {
        let (o, s) = forward_chunkwise(params, &ids[r], &state).unwrap();
        parts.push(o);
        state = s;
    }
    let chunked = Tensor::concat_rows(&parts).unwrap();
    recurrent.max_rel_diff(&parallel).max(chunked.max_rel_diff(&parallel))
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut k32, mut k64, mut m32, mut m64) = (0f64, 0f64, 0f64, 0f64);
    for _ in 0..50 {
        k32 = k32.max(kernel_case::<f32>(&mut rng));
        k64 = k64.max(kernel_case::<f64>(&mut rng));
        let cfg = random_model(&mut rng);
        let params = Parameters::<f32>::init(&cfg, &mut rng).unwrap();
        let t = rng.gen_range(1..=256);
        let ids: Vec<u32> = (0..t).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
        m32 = m32.max(model_case(&params, &ids, &mut rng));
        m64 = m64.max(model_case(&params.cast::<f64>(), &ids, &mut rng));
    }
    let elapsed = started.elapsed();
    let pass = k32 < 1e-4 && m32 < 1e-4 && k64 < 1e-8 && m64 < 1e-8 && elapsed < Duration::from_secs(120);
    report(
        "1 retention forms agree",
        pass,
        format!("50 configs; kernel f32 {k32:.2e} f64 {k64:.2e}; model f32 {m32:.2e} f64 {m64:.2e} (limits 1e-4 / 1e-8, < 120 s)"),
        started,
    )
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let ds = generate_dataset(&PersonaSpec::default(), 100, 8 * 64, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = Parameters::<f32>::init(&ModelConfig::default(), &mut rng).unwrap();
    let budget = RecomputeBudget::default();
    let mut worst = 0f64;
    for u in &ds.users {
        let mut state = init_user(u.user_id, &params);
        for p in 0..8 {
            let (next, e) = update_stateful(&state, &u.ids[p * 64..(p + 1) * 64], &params).unwrap();
            let full = update_recompute_all(&u.ids[..(p + 1) * 64], &params, &budget).unwrap();
            for (a, b) in e.iter().zip(&full) {
                worst = worst.max((a - b).abs());
            }
            state = next;
        }
    }
    let elapsed = started.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(180);
    report(
        "2 stateful equals recompute",
        pass,
        format!("100 users x 8 periods x 64; max |diff| {worst:.2e} (limit 1e-4, < 180 s)"),
        started,
    )
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        num_layers: 1,
        num_heads: 1,
        hidden_size: 8,
        ffn_size: 16,
        num_predicted: 6,
        future_window: 4,
        max_seq_len: 16,
        chunk_len: 16,
        normalized_retention: false,
        clm_head: true,
    }
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = Parameters::<f64>::init(&micro_config(), &mut rng).unwrap();
    // move off the initialization so no gradient sits at an exact zero
    for (_, t) in params.tensors_mut() {
        *t = t.add(&Tensor::randn(t.shape(), 0.4, &mut rng)).unwrap();
    }
    let cfg = ObjectiveConfig {
        objectives: ObjectiveSet::USE,
        temperature: 0.5,
        future_window: 4,
        interest: (2..8).collect(),
        negatives: NegativePool::AllOthers,
    };
    let pairs: [(&[u32], &[u32]); 2] = [
        (&[1, 2, 3, 2, 4, 5, 1, 6], &[1, 3, 3, 7, 2, 4, 2]),
        (&[1, 7, 6, 5, 4, 3], &[1, 5, 7, 7, 2, 6, 3, 4]),
    ];
    let point: Vec<Tensor<f64>> = params.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let result = grad_check(
        |g, v| {
            let vars = params.bind_vars(g, v)?;
            Ok(combined_loss(g, &params, &vars, &pairs, &cfg)?.0)
        },
        &point,
        1e-5,
    );
    let elapsed = started.elapsed();
    match result {
        Ok(r) => report(
            "3 gradient check",
            r.max_rel_error < 1e-3 && elapsed < Duration::from_secs(120),
            format!(
                "{} coordinates, max relative error {:.2e} (limit 1e-3, < 120 s)",
                r.checked, r.max_rel_error
            ),
            started,
        ),
        Err(e) => report("3 gradient check", false, format!("error: {e}"), started),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn brute_sup(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64, pool: NegativePool) -> f64 {
    let m = anchors.len();
    let a: Vec<Vec<f64>> = anchors.iter().map(|x| unit(x)).collect();
    let p: Vec<Vec<f64>> = positives.iter().map(|x| unit(x)).collect();
    match pool {
        NegativePool::AllOthers => {
            let all: Vec<&Vec<f64>> = a.iter().chain(&p).collect();
            let mut total = 0.0;
            for i in 0..2 * m {
                let target = if i < m { i + m } else { i - m };
                let logits = (0..2 * m).filter(|&j| j != i).map(|j| dot(all[i], all[j]) / tau);
                total += log_sum_exp(logits) - dot(all[i], all[target]) / tau;
            }
            total / (2 * m) as f64
        }
        NegativePool::CrossView => {
            let mut total = 0.0;
            for k in 0..m {
                total += log_sum_exp((0..m).map(|j| dot(&a[k], &p[j]) / tau)) - dot(&a[k], &p[k]) / tau;
                total += log_sum_exp((0..m).map(|j| dot(&p[k], &a[j]) / tau)) - dot(&p[k], &a[k]) / tau;
            }
            total / (2 * m) as f64
        }
    }
}

fn matrix(rows: &[Vec<f64>]) -> Tensor<f64> {
    let cols = rows[0].len();
    Tensor::new(&[rows.len(), cols], rows.concat()).unwrap()
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let normal =
        |rng: &mut ChaCha8Rng, n: usize, s: f64| -> Vec<f64> { Tensor::<f64>::randn(&[n], s, rng).into_data() };
    let (mut fbp_err, mut sup_err, mut clm_err) = (0f64, 0f64, 0f64);
    for _ in 0..100 {
        // FBP: labels from a random sequence, random logits
        let w = rng.gen_range(1..=6);
        let t = rng.gen_range(w + 1..=40);
        let seq: Vec<u32> = (0..t).map(|_| rng.gen_range(0..10)).collect();
        let interest = InterestMap::new(&(2..10).collect::<Vec<u32>>());
        let labels = build_fbp_labels(&seq, w, &interest).unwrap();
        let logits = normal(&mut rng, labels.rows() * labels.cols(), 2.0);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[labels.rows(), labels.cols()], logits.clone()).unwrap());
        let l = fbp_loss(&mut g, x, &labels).unwrap();
        let got = g.value(l).item();
        let mut want = 0.0;
        for r in 0..labels.rows() {
            for c in 0..labels.cols() {
                let p = sigmoid(logits[r * labels.cols() + c]);
                want -= if labels.get(r, c) == 1 { p.ln() } else { (1.0 - p).ln() };
            }
        }
        want /= (labels.rows() * labels.cols()) as f64;
        fbp_err = fbp_err.max((got - want).abs());

        // SUP: random embeddings, both negative pools
        let m = rng.gen_range(2..=8);
        let d = rng.gen_range(2..=16);
        let tau = rng.gen_range(0.05..1.0);
        let anchors: Vec<Vec<f64>> = (0..m).map(|_| normal(&mut rng, d, 1.0)).collect();
        let positives: Vec<Vec<f64>> = (0..m).map(|_| normal(&mut rng, d, 1.0)).collect();
        let batch = ContrastiveBatch {
            anchors: matrix(&anchors),
            positives: matrix(&positives),
            temperature: tau,
        };
        for pool in [NegativePool::AllOthers, NegativePool::CrossView] {
            let got = sup_loss(&batch, pool).unwrap();
            sup_err = sup_err.max((got - brute_sup(&anchors, &positives, tau, pool)).abs());
        }

        // CLM: random logits over the vocabulary
        let n = rng.gen_range(1..=20);
        let v = rng.gen_range(2..=30);
        let logits: Vec<Vec<f64>> = (0..n).map(|_| normal(&mut rng, v, 3.0)).collect();
        let next: Vec<u32> = (0..n).map(|_| rng.gen_range(0..v as u32)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(matrix(&logits));
        let l = clm_loss(&mut g, x, &next).unwrap();
        let got = g.value(l).item();
        let want = logits
            .iter()
            .zip(&next)
            .map(|(row, &y)| log_sum_exp(row.iter().copied()) - row[y as usize])
            .sum::<f64>()
            / n as f64;
        clm_err = clm_err.max((got - want).abs());
    }

    let mut label_mismatches = 0;
    for _ in 0..1000 {
        let w = rng.gen_range(1..=10);
        let t = rng.gen_range(w + 1..=80);
        let seq: Vec<u32> = (0..t).map(|_| rng.gen_range(0..14)).collect();
        let mut ids: Vec<u32> = (0..14).collect();
        ids.shuffle(&mut rng);
        ids.truncate(rng.gen_range(1..=14));
        let labels = build_fbp_labels(&seq, w, &InterestMap::new(&ids)).unwrap();
        if labels.rows() != t - w || labels.cols() != ids.len() {
            label_mismatches += 1;
            continue;
        }
        for i in 0..t - w {
            for (c, id) in ids.iter().enumerate() {
                let inside = seq[i + 1..=i + w].contains(id);
                if (labels.get(i, c) == 1) != inside {
                    label_mismatches += 1;
                }
            }
        }
    }
    let pass = fbp_err < 1e-6 && sup_err < 1e-6 && clm_err < 1e-6 && label_mismatches == 0;
    report(
        "4 loss oracles",
        pass,
        format!(
            "100 batches; max |diff| fbp {fbp_err:.2e} sup {sup_err:.2e} clm {clm_err:.2e} (limit 1e-6); label mismatches {label_mismatches}/1000 sequences"
        ),
        started,
    )
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut auc_mismatches = 0;
    for _ in 0..500 {
        let n = rng.gen_range(2..=200);
        // few distinct values, so ties are common
        let levels = rng.gen_range(1..=8);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 * 0.25).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let (mut twice_wins, mut pairs) = (0u64, 0u64);
        for i in (0..n).filter(|&i| labels[i]) {
            for j in (0..n).filter(|&j| !labels[j]) {
                pairs += 1;
                twice_wins += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
        let want = twice_wins as f64 / (2 * pairs) as f64;
        if auc(&scores, &labels).unwrap() != want {
            auc_mismatches += 1;
        }
    }

    let mut mrr_err = 0f64;
    for _ in 0..200 {
        let n = rng.gen_range(1..=50);
        let cands = rng.gen_range(2..=30);
        let mut ranks = Vec::with_capacity(n);
        for _ in 0..n {
            let scores: Vec<f64> = (0..cands).map(|_| rng.gen_range(0..5) as f64).collect();
            let target = rng.gen_range(0..cands);
            let better = (0..cands)
                .filter(|&j| scores[j] > scores[target] || (scores[j] == scores[target] && j < target))
                .count();
            let r = rank_of(&scores, target);
            if r != better + 1 {
                mrr_err = f64::INFINITY;
            }
            ranks.push(r);
        }
        let want = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n as f64;
        mrr_err = mrr_err.max((mrr(&ranks).unwrap() - want).abs());
    }

    let ds = generate_dataset(&PersonaSpec::default(), 600, 160, 5).unwrap();
    let cfg = RetrievalConfig {
        max_instances: Some(500),
        seed: 5,
        ..RetrievalConfig::default()
    };
    let instances = build_retrieval_task(&ds.users, 66, &cfg).unwrap();
    let r = run_retrieval(&instances, &RandomEmbedder { dim: 32, seed: 5 }, 1).unwrap();
    let n = cfg.n_candidates;
    let expected = harmonic(n) / n as f64;
    let second: f64 = (1..=n).map(|k| 1.0 / (k * k) as f64).sum::<f64>() / n as f64;
    let sigma = ((second - expected * expected) / instances.len() as f64).sqrt();
    let z = (r.mrr - expected) / sigma;
    let pass = auc_mismatches == 0 && mrr_err < 1e-12 && instances.len() == 500 && z.abs() < 3.0;
    report(
        "5 metric oracles",
        pass,
        format!(
            "auc mismatches {auc_mismatches}/500; mrr |diff| {mrr_err:.1e}; random retrieval {:.4} vs H(n)/n {expected:.4} over {} instances, z = {z:.2} (limit 3)",
            r.mrr,
            instances.len()
        ),
        started,
    )
}

fn r_squared(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

fn criterion_6() -> Outcome {
    let started = Instant::now();
    let schedule = SimulationSchedule {
        initial: 64,
        increment: 64,
        periods: 16,
    };
    let ds = generate_dataset(&PersonaSpec::default(), 64, schedule.seen_after(15), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = Parameters::<f32>::init(&ModelConfig::default(), &mut rng).unwrap();
    // median of five repetitions per period
    let cfg = BenchConfig::default();
    let strategies = [UpdateStrategy::Stateful, UpdateStrategy::RecomputeAll];
    let rows = match bench_strategies(&ds.users, &params, &schedule, &strategies, &cfg) {
        Ok(r) => r,
        Err(e) => return report("6 efficiency trend", false, format!("error: {e}"), started),
    };
    let series = |s: UpdateStrategy, f: fn(&usekit::eval::BenchRow) -> f64| -> Vec<f64> {
        rows.iter().filter(|r| r.strategy == s).map(f).collect()
    };
    let st_cum = series(UpdateStrategy::Stateful, |r| r.cumulative_seconds);
    let st = series(UpdateStrategy::Stateful, |r| r.period_seconds);
    let rc = series(UpdateStrategy::RecomputeAll, |r| r.period_seconds);
    let r2 = r_squared(&st_cum);
    let st_ratio = st[15] / st[0];
    let rc_ratio = rc[15] / rc[0];
    let increasing = rc.windows(2).all(|w| w[1] > w[0]);
    let elapsed = started.elapsed();
    let pass = r2 > 0.99 && st_ratio < 1.5 && increasing && rc_ratio > 4.0 && elapsed < Duration::from_secs(600);
    report(
        "6 efficiency trend",
        pass,
        format!(
            "stateful R^2 {r2:.4} (> 0.99), last/first {st_ratio:.2} (< 1.5); recompute strictly increasing {increasing}, last/first {rc_ratio:.2} (> 4); < 600 s; recompute per period {}",
            rc.iter().map(|t| format!("{t:.3}")).collect::<Vec<_>>().join(" ")
        ),
        started,
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_7() -> Vec<Outcome> {
    let started = Instant::now();
    let spec = PersonaSpec::default();
    let (mut a_ok, mut b_ok, mut c_ok) = (true, true, true);
    let (mut a_notes, mut b_notes, mut c_notes) = (Vec::new(), Vec::new(), Vec::new());
    let baseline = random_mrr(RetrievalConfig::default().n_candidates);
    for seed in 0..3u64 {
        let ds = generate_dataset(&spec, 800, 1088, 100 + seed).unwrap();
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let trained = train(&ds, &ModelConfig::default(), &cfg, None).unwrap();
        // held-out users, never seen in training
        let test = spec
            .build()
            .unwrap()
            .generate(10_000..10_400, 1088, 900 + seed)
            .unwrap();

        let retrieval = RetrievalConfig {
            seed,
            ..RetrievalConfig::default()
        };
        let instances = build_retrieval_task(&test.users, 66, &retrieval).unwrap();
        let model = ModelEmbedder::new(&trained.params);
        let tf = TfEmbedder { vocab_size: 66 };
        let use_mrr = run_retrieval(&instances, &model as &dyn Embedder, 1).unwrap().mrr;
        let tf_mrr = run_retrieval(&instances, &tf, 1).unwrap().mrr;
        a_ok &= use_mrr >= 2.0 * baseline && use_mrr >= tf_mrr;
        a_notes.push(format!("seed {seed}: use {use_mrr:.4} tf {tf_mrr:.4}"));

        let sim = simulate_dynamic(
            &test.users,
            &trained.params,
            &SimulationConfig {
                seed,
                ..SimulationConfig::default()
            },
        )
        .unwrap();
        let auc_of = |s| sim.series("next_period_auc", s);
        let (st, pool, recent) = (
            auc_of(UpdateStrategy::Stateful),
            auc_of(UpdateStrategy::PoolEmbeddings),
            auc_of(UpdateStrategy::RecentOnly),
        );
        let late_gap = mean(&st[4..]) - mean(&recent[4..]);
        b_ok &= mean(&st) >= mean(&pool) && mean(&pool) >= mean(&recent) && late_gap >= 0.01;
        b_notes.push(format!(
            "seed {seed}: stateful {:.4} pool {:.4} recent {:.4}, late gap {late_gap:.4}",
            mean(&st),
            mean(&pool),
            mean(&recent)
        ));

        let p0: Vec<f64> = UpdateStrategy::ALL
            .iter()
            .map(|&s| sim.value("next_period_auc", s, 0).unwrap())
            .collect();
        let spread = p0.iter().copied().fold(f64::MIN, f64::max) - p0.iter().copied().fold(f64::MAX, f64::min);
        c_ok &= spread <= 1e-3;
        c_notes.push(format!("seed {seed}: spread {spread:.1e}"));
    }
    vec![
        report(
            "7a retrieval beats baselines",
            a_ok,
            format!(
                "need >= {:.4} (2x random) and >= tf; {}",
                2.0 * baseline,
                a_notes.join("; ")
            ),
            started,
        ),
        report(
            "7b strategy ordering",
            b_ok,
            format!(
                "mean next-period AUC, stateful >= pool >= recent, late gap >= 0.01; {}",
                b_notes.join("; ")
            ),
            started,
        ),
        report(
            "7c period-0 tie",
            c_ok,
            format!("limit 1e-3; {}", c_notes.join("; ")),
            started,
        ),
    ]
}

fn criterion_8() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = Parameters::<f32>::init(&ModelConfig::default(), &mut rng).unwrap();

    let path = dir.path().join("model.usew");
    save_params(&params, &path).unwrap();
    let loaded = load_params(&path).unwrap();
    let bits = |p: &Parameters<f32>| -> Vec<u32> {
        p.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    let again = dir.path().join("again.usew");
    save_params(&loaded, &again).unwrap();
    let params_ok = bits(&params) == bits(&loaded)
        && loaded.config() == params.config()
        && std::fs::read(&path).unwrap() == std::fs::read(&again).unwrap();

    let ds = generate_dataset(&PersonaSpec::default(), 20, 6 * 64, 8).unwrap();
    let mut store = StateStore::open(&dir.path().join("store")).unwrap();
    let mut states_ok = true;
    let mut drift = 0f64;
    for u in &ds.users {
        let mut memory = init_user(u.user_id, &params);
        let mut persisted = init_user(u.user_id, &loaded);
        for (p, period) in u.ids.chunks(64).enumerate() {
            let (m, e_mem) = update_stateful(&memory, period, &params).unwrap();
            memory = m;
            let (s, e_disk) = update_stateful(&persisted, period, &loaded).unwrap();
            // alternate between single files and the store
            persisted = if p % 2 == 0 {
                let file = dir.path().join(format!("{}.uses", u.user_id));
                save_state(&s, &file).unwrap();
                let raw = read_state(&file).unwrap();
                states_ok &= raw == s && encode_state(&raw) == encode_state(&s);
                load_state(&file, &loaded).unwrap()
            } else {
                store.save(&s).unwrap();
                store.load(u.user_id, &loaded).unwrap().unwrap()
            };
            states_ok &= persisted == s && decode_state(&encode_state(&s)).unwrap() == s;
            for (a, b) in e_mem.iter().zip(&e_disk) {
                drift = drift.max((a - b).abs());
            }
        }
        for (a, b) in memory.embedding.iter().zip(&persisted.embedding) {
            drift = drift.max((a - b).abs());
        }
    }
    let pass = params_ok && states_ok && drift <= 1e-6;
    report(
        "8 persistence",
        pass,
        format!(
            "parameters bitwise {params_ok}; states bitwise {states_ok}; max embedding drift {drift:.1e} (limit 1e-6)"
        ),
        started,
    )
}

fn main() {
    // `cargo test -- --list` and filters from other targets should not run the suite
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    // ACCEPTANCE_ONLY=6,8 runs a subset while iterating
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let wanted = |n: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == n));
    let mut outcomes = Vec::new();
    let criteria: [(&str, fn() -> Vec<Outcome>); 8] = [
        ("1", || vec![criterion_1()]),
        ("2", || vec![criterion_2()]),
        ("3", || vec![criterion_3()]),
        ("4", || vec![criterion_4()]),
        ("5", || vec![criterion_5()]),
        ("6", || vec![criterion_6()]),
        ("7", criterion_7),
        ("8", || vec![criterion_8()]),
    ];
    for (n, run) in criteria {
        if wanted(n) {
            outcomes.extend(run());
        }
    }
    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!(
        "acceptance: {}/{} passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    if !failed.is_empty() {
        for o in &failed {
            eprintln!("failed {}: {}", o.id, o.detail);
        }
        std::process::exit(1);
    }
}
