use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::embedders::{embed_all, Embedder};
use super::metrics::macro_auc;
use crate::data::BehaviorSequence;
use crate::error::{Error, Result};
use crate::objectives::InterestMap;
use crate::optim::{AdamHyper, AdamW};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 200,
            lr: 1e-3,
            batch_size: 32,
            patience: 20,
            seed: 0,
        }
    }
}

/// One-hidden-layer multi-label classifier on standardized embeddings.
#[derive(Clone, Debug)]
pub struct Probe {
    weights: [Tensor<f32>; 4],
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Validation macro AUC of the kept weights (`None` when undefined).
    pub val_auc: Option<f64>,
    pub epochs_run: usize,
}

fn to_matrix(x: &[Vec<f64>], mean: &[f64], scale: &[f64]) -> Tensor<f32> {
    let d = mean.len();
    let mut data = Vec::with_capacity(x.len() * d);
    for row in x {
        data.extend(row.iter().zip(mean).zip(scale).map(|((v, m), s)| ((v - m) / s) as f32));
    }
    Tensor::new(&[x.len(), d], data).expect("rows of equal width")
}

impl Probe {
    pub fn train(
        train_x: &[Vec<f64>],
        train_y: &[Vec<bool>],
        val_x: &[Vec<f64>],
        val_y: &[Vec<bool>],
        cfg: &ProbeConfig,
    ) -> Result<Self> {
        if train_x.is_empty() || train_x.len() != train_y.len() || val_x.len() != val_y.len() {
            return Err(Error::Task("probe needs matching, non-empty inputs and labels".into()));
        }
        let d = train_x[0].len();
        let n_out = train_y[0].len();
        let n = train_x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| train_x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = train_x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut weights = [
            Tensor::randn(&[d, cfg.hidden], 1.0 / (d as f64).sqrt(), &mut rng),
            Tensor::zeros(&[1, cfg.hidden]),
            Tensor::randn(&[cfg.hidden, n_out], 1.0 / (cfg.hidden as f64).sqrt(), &mut rng),
            Tensor::zeros(&[1, n_out]),
        ];
        let shapes: Vec<&[usize]> = weights.iter().map(|w| w.shape()).collect();
        let mut opt = AdamW::new(&shapes, vec![false; 4]);
        let hyper = AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let x_all = to_matrix(train_x, &mean, &scale);
        let y_all = Tensor::new(
            &[train_y.len(), n_out],
            train_y.iter().flatten().map(|&b| b as u8 as f32).collect(),
        )?;
        let mut probe = Probe {
            weights: weights.clone(),
            mean,
            scale,
            val_auc: None,
            epochs_run: 0,
        };
        let mut best: Option<f64> = None;
        let mut stale = 0;
        let mut order: Vec<usize> = (0..train_x.len()).collect();
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let xb = Tensor::new(
                    &[batch.len(), d],
                    batch.iter().flat_map(|&i| x_all.row_slice(i).to_vec()).collect(),
                )?;
                let yb = Tensor::new(
                    &[batch.len(), n_out],
                    batch.iter().flat_map(|&i| y_all.row_slice(i).to_vec()).collect(),
                )?;
                let mut g = Graph::new();
                let vars: Vec<_> = weights.iter().map(|w| g.param(w.clone())).collect();
                let x = g.constant(xb);
                let h = g.matmul(x, vars[0])?;
                let h = g.add_row(h, vars[1])?;
                let h = g.gelu(h);
                let o = g.matmul(h, vars[2])?;
                let o = g.add_row(o, vars[3])?;
                let loss = g.bce_with_logits(o, yb)?;
                g.backward(loss)?;
                let grads: Vec<Tensor<f32>> = vars.iter().map(|&v| g.take_grad(v).expect("parameter grad")).collect();
                opt.step(weights.iter_mut(), &grads, cfg.lr, &hyper);
            }
            probe.epochs_run = epoch;
            let candidate = Probe {
                weights: weights.clone(),
                ..probe.clone()
            };
            let val = if val_x.is_empty() {
                None
            } else {
                macro_auc(&candidate.predict(val_x)?, val_y).ok().map(|(a, _)| a)
            };
            match val {
                Some(a) if best.is_none_or(|b| a > b) => {
                    best = Some(a);
                    stale = 0;
                    probe.weights = weights.clone();
                    probe.val_auc = Some(a);
                }
                Some(_) => {
                    stale += 1;
                    if stale >= cfg.patience {
                        break;
                    }
                }
                None => probe.weights = weights.clone(),
            }
        }
        Ok(probe)
    }

    /// Logits, one row per input.
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let [w1, b1, w2, b2] = &self.weights;
        let h = to_matrix(x, &self.mean, &self.scale).matmul(w1)?.add_row(b1)?.gelu();
        let o = h.matmul(w2)?.add_row(b2)?;
        Ok((0..o.rows())
            .map(|r| o.row_slice(r).iter().map(|&v| v as f64).collect())
            .collect())
    }
}

/// Seeded 3:1:1 partition of `0..n` into train, validation and test.
pub fn split_3_1_1(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * 0.6).round() as usize;
    let n_val = (n as f64 * 0.2).round() as usize;
    let test = idx.split_off((n_train + n_val).min(n));
    let val = idx.split_off(n_train.min(idx.len()));
    (idx, val, test)
}

/// Presence of each behavior of interest in `window`.
pub fn presence(window: &[u32], interest: &InterestMap) -> Vec<bool> {
    let mut out = vec![false; interest.width()];
    for &id in window {
        if let Some(c) = interest.column(id) {
            out[c] = true;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FbpTaskConfig {
    /// Behaviors fed to the embedder.
    pub input_len: usize,
    /// Behaviors after the input whose presence is predicted.
    pub horizon: usize,
    pub interest: Vec<u32>,
    pub probe: ProbeConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FbpTaskReport {
    pub embedder: String,
    pub auc: f64,
    pub behaviors_scored: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// Embeds each user's first `input_len` behaviors, trains a probe to
/// predict which behaviors occur in the next `horizon`, and reports macro
/// AUC on the test split.
pub fn future_behavior_task(
    users: &[BehaviorSequence],
    embedder: &dyn Embedder,
    cfg: &FbpTaskConfig,
    workers: usize,
) -> Result<FbpTaskReport> {
    let need = cfg.input_len + cfg.horizon;
    let eligible: Vec<&BehaviorSequence> = users.iter().filter(|u| u.ids.len() >= need).collect();
    if eligible.len() < 5 {
        return Err(Error::Task(format!(
            "{} users have at least {need} behaviors; the 3:1:1 split needs five",
            eligible.len()
        )));
    }
    let interest = InterestMap::new(&cfg.interest);
    let inputs: Vec<&[u32]> = eligible.iter().map(|u| &u.ids[..cfg.input_len]).collect();
    let x = embed_all(embedder, &inputs, workers)?;
    let y: Vec<Vec<bool>> = eligible
        .iter()
        .map(|u| presence(&u.ids[cfg.input_len..need], &interest))
        .collect();
    let (tr, va, te) = split_3_1_1(eligible.len(), cfg.seed);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
        (
            idx.iter().map(|&i| x[i].clone()).collect(),
            idx.iter().map(|&i| y[i].clone()).collect(),
        )
    };
    let (xtr, ytr) = pick(&tr);
    let (xva, yva) = pick(&va);
    let (xte, yte) = pick(&te);
    let probe = Probe::train(&xtr, &ytr, &xva, &yva, &cfg.probe)?;
    let (auc, used) = macro_auc(&probe.predict(&xte)?, &yte)?;
    Ok(FbpTaskReport {
        embedder: embedder.name(),
        auc,
        behaviors_scored: used.len(),
        n_train: tr.len(),
        n_val: va.len(),
        n_test: te.len(),
    })
}
