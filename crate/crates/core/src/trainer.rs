//! Pair sampling, learning-rate schedule and the optimization loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BehaviorSequence, Dataset};
use crate::error::{Error, Result};
use crate::model::{save_params, ModelConfig, Parameters};
use crate::objectives::{combined_loss, LossParts, NegativePool, ObjectiveConfig, ObjectiveSet};
use crate::optim::{AdamHyper, AdamW};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub pair_gap: usize,
    pub future_window: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub seed: u64,
    pub objectives: ObjectiveSet,
    pub negatives: NegativePool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// One user in `validation_every` goes to the held-out split.
    pub validation_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seq_len: 64,
            pair_gap: 16,
            future_window: 16,
            batch_size: 32,
            epochs: 10,
            peak_lr: 4e-4,
            warmup_fraction: 0.06,
            weight_decay: 0.01,
            temperature: 0.1,
            seed: 0,
            objectives: ObjectiveSet::USE,
            negatives: NegativePool::AllOthers,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            validation_every: 20,
        }
    }
}

impl TrainConfig {
    /// Shortest sequence that can host a pair.
    pub fn admission_length(&self) -> usize {
        2 * self.seq_len + 2 * self.pair_gap
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("future_window", self.future_window),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::config("warmup_fraction", "must lie strictly between 0 and 1"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("peak_lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1", "Adam betas must lie in [0, 1)"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if self.objectives.is_empty() {
            return Err(Error::config("objective", "no objective selected"));
        }
        if self.objectives.sup && self.batch_size < 2 {
            return Err(Error::config("batch_size", "contrastive loss needs at least two pairs"));
        }
        if self.objectives.fbp && self.future_window >= self.seq_len {
            return Err(Error::config("future_window", "must be shorter than seq_len"));
        }
        if self.validation_every == 1 {
            return Err(Error::config("validation_every", "would leave no training users"));
        }
        Ok(())
    }
}

/// Two windows `[anchor, anchor+len)` and `[positive, positive+len)` of one
/// user, with `positive >= anchor + len + gap`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub user_index: usize,
    pub user_id: u64,
    pub anchor_start: usize,
    pub positive_start: usize,
    pub len: usize,
}

impl TrainingPair {
    pub fn windows<'a>(&self, seq: &'a [u32]) -> (&'a [u32], &'a [u32]) {
        (
            &seq[self.anchor_start..self.anchor_start + self.len],
            &seq[self.positive_start..self.positive_start + self.len],
        )
    }

    /// Distance between the end of the first window and the start of the second.
    pub fn gap(&self) -> usize {
        self.positive_start - (self.anchor_start + self.len)
    }
}

/// Samples a valid window placement uniformly over all `(a, b)` with
/// `b >= a + len + gap` by rejection from independent uniform starts.
fn sample_placement(total: usize, len: usize, gap: usize, rng: &mut impl Rng) -> (usize, usize) {
    let last = total - len;
    loop {
        let a = rng.gen_range(0..=last);
        let b = rng.gen_range(0..=last);
        if b >= a + len + gap {
            return (a, b);
        }
    }
}

/// One pair per admitted user, in user order. Users shorter than
/// [`TrainConfig::admission_length`] are skipped.
pub fn sample_pairs(users: &[BehaviorSequence], config: &TrainConfig, rng: &mut impl Rng) -> Result<Vec<TrainingPair>> {
    let threshold = config.admission_length();
    let pairs: Vec<TrainingPair> = users
        .iter()
        .enumerate()
        .filter(|(_, u)| u.ids.len() >= threshold)
        .map(|(i, u)| {
            let (a, b) = sample_placement(u.ids.len(), config.seq_len, config.pair_gap, rng);
            TrainingPair {
                user_index: i,
                user_id: u.user_id,
                anchor_start: a,
                positive_start: b,
                len: config.seq_len,
            }
        })
        .collect();
    if pairs.len() < config.batch_size {
        return Err(Error::Dataset(format!(
            "{} users reach the admission length {threshold} (2·seq_len + 2·pair_gap); a batch needs {}",
            pairs.len(),
            config.batch_size
        )));
    }
    Ok(pairs)
}

/// `⌈warmup_fraction·total⌉`, ignoring rounding noise in the product
/// (0.06·100 is 6.000000000000001 in binary).
fn warmup_steps(total: usize, config: &TrainConfig) -> usize {
    let x = config.warmup_fraction * total as f64;
    if (x - x.round()).abs() < 1e-9 {
        x.round() as usize
    } else {
        x.ceil() as usize
    }
}

/// Linear warmup to `peak_lr` over `⌈warmup_fraction·total⌉` steps, then
/// linear decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, config: &TrainConfig) -> Result<f64> {
    if step > total {
        return Err(Error::Schedule { step, total });
    }
    let warmup = warmup_steps(total, config);
    if step == 0 {
        return Ok(0.0);
    }
    if step <= warmup {
        return Ok(config.peak_lr * step as f64 / warmup as f64);
    }
    Ok(config.peak_lr * (total - step) as f64 / (total - warmup) as f64)
}

/// One row of the metrics log. `val_loss` is set on the last step of each
/// epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub sup: Option<f64>,
    pub fbp: Option<f64>,
    pub clm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Parameters<f32>,
    pub metrics: Vec<MetricsRow>,
    pub epochs: Vec<EpochSummary>,
    pub total_steps: usize,
}

pub const METRICS_HEADER: &str = "step,epoch,lr,train_loss,val_loss,sup_loss,fbp_loss,clm_loss";

pub fn write_metrics_csv(rows: &[MetricsRow], provenance: Option<&str>) -> String {
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    let mut out = String::new();
    if let Some(p) = provenance {
        let _ = writeln!(out, "# {p}");
    }
    let _ = writeln!(out, "{METRICS_HEADER}");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6e},{:.6},{},{},{},{}",
            r.step,
            r.epoch,
            r.lr,
            r.train_loss,
            opt(r.val_loss),
            opt(r.sup),
            opt(r.fbp),
            opt(r.clm)
        );
    }
    out
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for t in grads.iter_mut() {
            for g in t.data_mut() {
                *g *= s;
            }
        }
    }
    norm
}

fn objective_config(model: &ModelConfig, cfg: &TrainConfig) -> ObjectiveConfig {
    ObjectiveConfig {
        objectives: cfg.objectives,
        temperature: cfg.temperature,
        future_window: cfg.future_window,
        interest: (crate::data::NUM_SPECIALS as u32..model.vocab_size as u32).collect(),
        negatives: cfg.negatives,
    }
}

fn batch_windows<'a>(users: &'a [BehaviorSequence], batch: &[TrainingPair]) -> Vec<(&'a [u32], &'a [u32])> {
    batch.iter().map(|p| p.windows(&users[p.user_index].ids)).collect()
}

fn describe_batch(users: &[BehaviorSequence], batch: &[TrainingPair], parts: &LossParts) -> String {
    let mut s = format!(
        "components: sup={:?} fbp={:?} clm={:?}\n",
        parts.sup, parts.fbp, parts.clm
    );
    for p in batch {
        let (a, b) = p.windows(&users[p.user_index].ids);
        let _ = writeln!(
            s,
            "user {} anchor@{} {:?} positive@{} {:?}",
            p.user_id, p.anchor_start, a, p.positive_start, b
        );
    }
    s
}

/// Mean loss over full validation batches (a trailing partial batch is
/// kept when it still has two pairs).
fn validation_loss(
    params: &Parameters<f32>,
    users: &[BehaviorSequence],
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    obj: &ObjectiveConfig,
) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut weight = 0usize;
    for batch in pairs.chunks(cfg.batch_size) {
        if batch.len() < 2 && cfg.objectives.sup {
            continue;
        }
        let mut g = Graph::new();
        let vars = params.to_graph(&mut g);
        let (_, parts) = combined_loss(&mut g, params, &vars, &batch_windows(users, batch), obj)?;
        total += parts.total * batch.len() as f64;
        weight += batch.len();
    }
    Ok((weight > 0).then(|| total / weight as f64))
}

/// Deterministic user split: after a seeded shuffle, every
/// `validation_every`-th user is held out.
pub fn split_users(num_users: usize, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..num_users).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    order.shuffle(&mut rng);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, u) in order.into_iter().enumerate() {
        if cfg.validation_every > 0 && i % cfg.validation_every == cfg.validation_every - 1 {
            val.push(u);
        } else {
            train.push(u);
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Trains from a seeded initialization. When `checkpoint_dir` is given the
/// parameters are written there as `epoch-<k>.usew` after every epoch.
pub fn train(
    dataset: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let params = Parameters::<f32>::init(model, &mut rng)?;
    train_from(params, dataset, cfg, checkpoint_dir)
}

/// Continues optimization of `params` (fresh optimizer state).
pub fn train_from(
    mut params: Parameters<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = params.config().clone();
    if cfg.seq_len > model.max_seq_len {
        return Err(Error::config(
            "seq_len",
            format!("exceeds max_seq_len {}", model.max_seq_len),
        ));
    }
    if cfg.objectives.fbp && model.num_predicted != model.vocab_size - crate::data::NUM_SPECIALS {
        return Err(Error::config(
            "num_predicted",
            "must equal the number of non-special behaviors",
        ));
    }
    if cfg.objectives.clm && !model.clm_head {
        return Err(Error::config(
            "clm_head",
            "the CLM objective needs a model with a next-behavior head",
        ));
    }
    let obj = objective_config(&model, cfg);

    let (train_idx, val_idx) = split_users(dataset.users.len(), cfg);
    let train_users: Vec<BehaviorSequence> = train_idx.iter().map(|&i| dataset.users[i].clone()).collect();
    let val_users: Vec<BehaviorSequence> = val_idx.iter().map(|&i| dataset.users[i].clone()).collect();

    let mut pair_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pair_rng.set_stream(2);
    // fixed validation pairs so epoch losses are comparable
    let val_pairs: Vec<TrainingPair> = {
        let threshold = cfg.admission_length();
        val_users
            .iter()
            .enumerate()
            .filter(|(_, u)| u.ids.len() >= threshold)
            .map(|(i, u)| {
                let (a, b) = sample_placement(u.ids.len(), cfg.seq_len, cfg.pair_gap, &mut pair_rng);
                TrainingPair {
                    user_index: i,
                    user_id: u.user_id,
                    anchor_start: a,
                    positive_start: b,
                    len: cfg.seq_len,
                }
            })
            .collect()
    };

    let admitted = train_users
        .iter()
        .filter(|u| u.ids.len() >= cfg.admission_length())
        .count();
    let steps_per_epoch = admitted / cfg.batch_size;
    let total_steps = steps_per_epoch * cfg.epochs;
    if steps_per_epoch == 0 {
        return Err(Error::Dataset(format!(
            "{admitted} training users reach the admission length {} (2·seq_len + 2·pair_gap); a batch needs {}",
            cfg.admission_length(),
            cfg.batch_size
        )));
    }

    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let hyper = AdamHyper {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    // vectors (norm gains, biases) are not decayed
    let mut opt = {
        let tensors = params.tensors();
        let shapes: Vec<&[usize]> = tensors.iter().map(|(_, t)| t.shape()).collect();
        AdamW::new(&shapes, tensors.iter().map(|(_, t)| t.rows() > 1).collect())
    };
    let mut metrics = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut pairs = sample_pairs(&train_users, cfg, &mut pair_rng)?;
        pairs.shuffle(&mut pair_rng);
        let mut epoch_loss = 0.0;
        for batch in pairs.chunks_exact(cfg.batch_size) {
            let windows = batch_windows(&train_users, batch);
            let mut g = Graph::new();
            let vars = params.to_graph(&mut g);
            let (loss, parts) = combined_loss(&mut g, &params, &vars, &windows, &obj)?;
            if !parts.total.is_finite() {
                let diagnostic = describe_batch(&train_users, batch, &parts);
                if let Some(dir) = checkpoint_dir {
                    let path = dir.join(format!("nonfinite-step-{step}.txt"));
                    fs::write(&path, &diagnostic).map_err(|e| Error::io(&path, e))?;
                }
                return Err(Error::NonFiniteLoss { step, diagnostic });
            }
            g.backward(loss)?;
            let mut grads: Vec<Tensor<f32>> = vars
                .all
                .iter()
                .map(|&v| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
                .collect();
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = lr_at(step + 1, total_steps, cfg)?;
            opt.step(params.tensors_mut().into_iter().map(|(_, t)| t), &grads, lr, &hyper);
            step += 1;
            epoch_loss += parts.total;
            metrics.push(MetricsRow {
                step,
                epoch,
                lr,
                train_loss: parts.total,
                val_loss: None,
                sup: parts.sup,
                fbp: parts.fbp,
                clm: parts.clm,
            });
        }
        let val_loss = validation_loss(&params, &val_users, &val_pairs, cfg, &obj)?;
        if let Some(last) = metrics.last_mut() {
            last.val_loss = val_loss;
        }
        let checkpoint = match checkpoint_dir {
            Some(dir) => {
                let path = dir.join(format!("epoch-{epoch}.usew"));
                save_params(&params, &path)?;
                Some(path)
            }
            None => None,
        };
        let summary = EpochSummary {
            epoch,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_loss,
            checkpoint,
        };
        log::info!(
            "epoch {epoch}/{}: train {:.4} val {}",
            cfg.epochs,
            summary.train_loss,
            val_loss.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        epochs.push(summary);
    }
    Ok(TrainOutcome {
        params,
        metrics,
        epochs,
        total_steps,
    })
}
