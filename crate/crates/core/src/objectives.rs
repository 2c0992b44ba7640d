//! Training losses: future-window behavior prediction (multi-label BCE over
//! the next `W` behaviors), same-user contrastive prediction with in-batch
//! negatives, their equally weighted combination, and the next-behavior
//! (CLM) ablation loss.

use crate::error::{Error, Result};
use crate::model::{clm_logits_graph, fbp_logits_graph, forward_graph, ParamVars, Parameters};
use crate::tensor::{Axis, Graph, Scalar, Tensor, Var};

/// Binary presence targets: row `i` (0-based) marks which behaviors of
/// interest occur at positions `i+1 ..= i+W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FbpLabelMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl FbpLabelMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.cols + col]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::new(&[self.rows, self.cols], data).expect("consistent label shape")
    }
}

/// Maps behavior ids to label columns; ids outside the list are ignored.
#[derive(Clone, Debug)]
pub struct InterestMap {
    column: Vec<Option<usize>>,
    width: usize,
}

impl InterestMap {
    pub fn new(interest: &[u32]) -> Self {
        let max = interest.iter().copied().max().map_or(0, |m| m as usize + 1);
        let mut column = vec![None; max];
        for (c, &id) in interest.iter().enumerate() {
            column[id as usize] = Some(c);
        }
        Self {
            column,
            width: interest.len(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn column(&self, id: u32) -> Option<usize> {
        self.column.get(id as usize).copied().flatten()
    }
}

/// Labels for prediction positions `1..=T-W` of `seq`.
pub fn build_fbp_labels(seq: &[u32], window: usize, interest: &InterestMap) -> Result<FbpLabelMatrix> {
    let t = seq.len();
    if window == 0 {
        return Err(Error::config("future_window", "must be at least 1"));
    }
    if t <= window {
        return Err(Error::InsufficientLength { len: t, window });
    }
    let rows = t - window;
    let cols = interest.width();
    let mut data = vec![0u8; rows * cols];
    // sliding counts over the window seq[i+1 ..= i+W]
    let mut counts = vec![0u32; cols];
    for &id in &seq[1..=window] {
        if let Some(c) = interest.column(id) {
            counts[c] += 1;
        }
    }
    for i in 0..rows {
        if i > 0 {
            if let Some(c) = interest.column(seq[i]) {
                counts[c] -= 1;
            }
            if let Some(c) = interest.column(seq[i + window]) {
                counts[c] += 1;
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            data[i * cols + c] = (n > 0) as u8;
        }
    }
    Ok(FbpLabelMatrix { rows, cols, data })
}

/// Mean BCE over every (position, behavior) cell.
pub fn fbp_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &FbpLabelMatrix) -> Result<Var> {
    g.bce_with_logits(logits, labels.to_tensor())
}

/// Which embeddings form the softmax denominator of the contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NegativePool {
    /// Every other in-batch embedding (`2M - 1` terms, positive included).
    #[default]
    AllOthers,
    /// Only the opposite view: an anchor is scored against all `M`
    /// positives, and each positive against all `M` anchors.
    CrossView,
}

/// `M` anchor embeddings and their `M` positives, aligned by row.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch<T: Scalar = f32> {
    pub anchors: Tensor<T>,
    pub positives: Tensor<T>,
    pub temperature: f64,
}

impl<T: Scalar> ContrastiveBatch<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be positive"));
        }
        if self.anchors.shape() != self.positives.shape() {
            return Err(Error::shape(
                "contrastive batch",
                self.anchors.shape(),
                self.positives.shape(),
            ));
        }
        if self.anchors.rows() < 2 {
            return Err(Error::config("batch_size", "contrastive loss needs at least two pairs"));
        }
        Ok(())
    }
}

/// Symmetric InfoNCE over cosine similarities:
/// `(1/M) Σ_k ½(ℓ(k, k⁺) + ℓ(k⁺, k))`.
pub fn sup_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    anchors: Var,
    positives: Var,
    temperature: f64,
    pool: NegativePool,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::config("temperature", "must be positive"));
    }
    let m = g.shape(anchors)[0];
    if m < 2 {
        return Err(Error::config("batch_size", "contrastive loss needs at least two pairs"));
    }
    let inv_tau = T::lit(1.0 / temperature);
    match pool {
        NegativePool::AllOthers => {
            let all = g.concat_rows(&[anchors, positives])?;
            let unit = g.l2_normalize_rows(all)?;
            let unit_t = g.transpose(unit)?;
            let sims = g.matmul(unit, unit_t)?;
            let logits = g.scale(sims, inv_tau);
            let targets: Vec<usize> = (0..2 * m).map(|i| if i < m { i + m } else { i - m }).collect();
            g.cross_entropy(logits, &targets, true)
        }
        NegativePool::CrossView => {
            let a = g.l2_normalize_rows(anchors)?;
            // row indices past the anchors belong to the positives
            let p = g.l2_normalize_rows(positives).map_err(|e| match e {
                Error::DegenerateEmbedding { index } => Error::DegenerateEmbedding { index: index + m },
                e => e,
            })?;
            let pt = g.transpose(p)?;
            let at = g.transpose(a)?;
            let ap = g.matmul(a, pt)?;
            let pa = g.matmul(p, at)?;
            let ap = g.scale(ap, inv_tau);
            let pa = g.scale(pa, inv_tau);
            let diag: Vec<usize> = (0..m).collect();
            let l1 = g.cross_entropy(ap, &diag, false)?;
            let l2 = g.cross_entropy(pa, &diag, false)?;
            let s = g.add(l1, l2)?;
            Ok(g.scale(s, T::lit(0.5)))
        }
    }
}

/// Value of the contrastive loss on fixed embeddings.
pub fn sup_loss<T: Scalar>(batch: &ContrastiveBatch<T>, pool: NegativePool) -> Result<T> {
    batch.validate()?;
    let mut g = Graph::new();
    let a = g.constant(batch.anchors.clone());
    let p = g.constant(batch.positives.clone());
    let l = sup_loss_graph(&mut g, a, p, batch.temperature, pool)?;
    Ok(g.value(l).item())
}

/// Mean next-behavior cross-entropy; row `i` of `logits` predicts
/// `next_ids[i]`.
pub fn clm_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, next_ids: &[u32]) -> Result<Var> {
    let targets: Vec<usize> = next_ids.iter().map(|&i| i as usize).collect();
    g.cross_entropy(logits, &targets, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectiveSet {
    pub fbp: bool,
    pub sup: bool,
    pub clm: bool,
}

impl ObjectiveSet {
    pub const USE: Self = Self {
        fbp: true,
        sup: true,
        clm: false,
    };
    pub const FBP_ONLY: Self = Self {
        fbp: true,
        sup: false,
        clm: false,
    };
    pub const SUP_ONLY: Self = Self {
        fbp: false,
        sup: true,
        clm: false,
    };
    pub const CLM_ONLY: Self = Self {
        fbp: false,
        sup: false,
        clm: true,
    };

    /// `use`, `use-fbp`, `use-sup` or `use-clm`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "use" => Ok(Self::USE),
            "use-fbp" => Ok(Self::FBP_ONLY),
            "use-sup" => Ok(Self::SUP_ONLY),
            "use-clm" => Ok(Self::CLM_ONLY),
            other => Err(Error::config(
                "objective",
                format!("`{other}` is not one of use, use-fbp, use-sup, use-clm"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.fbp, self.sup, self.clm) {
            (true, true, false) => "use",
            (true, false, false) => "use-fbp",
            (false, true, false) => "use-sup",
            (false, false, true) => "use-clm",
            _ => "custom",
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.fbp || self.sup || self.clm)
    }
}

#[derive(Clone, Debug)]
pub struct ObjectiveConfig {
    pub objectives: ObjectiveSet,
    pub temperature: f64,
    pub future_window: usize,
    pub interest: Vec<u32>,
    pub negatives: NegativePool,
}

/// Scalar summaries of one batch's loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub sup: Option<f64>,
    pub fbp: Option<f64>,
    pub clm: Option<f64>,
}

/// `(1/M) Σ_k [ ½(ℓ_S(k,k⁺) + ℓ_S(k⁺,k)) + ℓ_F(k) + ℓ_F(k⁺) ]`, with the
/// CLM term taking the FBP slot when selected. Returns the loss node.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &Parameters<T>,
    vars: &ParamVars,
    pairs: &[(&[u32], &[u32])],
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossParts)> {
    let m = pairs.len();
    if cfg.objectives.is_empty() {
        return Err(Error::config("objective", "no objective selected"));
    }
    if m == 0 {
        return Err(Error::config("batch_size", "empty batch"));
    }
    if cfg.objectives.sup && m < 2 {
        return Err(Error::config("batch_size", "contrastive loss needs at least two pairs"));
    }
    let interest = InterestMap::new(&cfg.interest);
    let inv_m = T::lit(1.0 / m as f64);

    let mut anchors = Vec::with_capacity(m);
    let mut positives = Vec::with_capacity(m);
    let mut fbp_terms = Vec::new();
    let mut clm_terms = Vec::new();
    for &(x, xp) in pairs {
        for (seq, pooled) in [(x, &mut anchors), (xp, &mut positives)] {
            let hidden = forward_graph(g, params, vars, seq)?;
            if cfg.objectives.sup {
                pooled.push(g.mean(hidden, Axis::Rows)?);
            }
            if cfg.objectives.fbp {
                let labels = build_fbp_labels(seq, cfg.future_window, &interest)?;
                let rows = g.slice_rows(hidden, 0, labels.rows())?;
                let logits = fbp_logits_graph(g, vars, rows)?;
                fbp_terms.push(fbp_loss(g, logits, &labels)?);
            }
            if cfg.objectives.clm {
                if seq.len() < 2 {
                    return Err(Error::InsufficientLength {
                        len: seq.len(),
                        window: 1,
                    });
                }
                let rows = g.slice_rows(hidden, 0, seq.len() - 1)?;
                let logits = clm_logits_graph(g, vars, rows)?;
                clm_terms.push(clm_loss(g, logits, &seq[1..])?);
            }
        }
    }

    let mut parts = LossParts::default();
    let mut total: Option<Var> = None;
    let mut add = |g: &mut Graph<T>, v: Var| -> Result<()> {
        total = Some(match total {
            None => v,
            Some(t) => g.add(t, v)?,
        });
        Ok(())
    };
    if cfg.objectives.sup {
        let a = g.concat_rows(&anchors)?;
        let p = g.concat_rows(&positives)?;
        let s = sup_loss_graph(g, a, p, cfg.temperature, cfg.negatives)?;
        parts.sup = Some(g.value(s).item().as_f64());
        add(g, s)?;
    }
    for (terms, slot) in [(&fbp_terms, &mut parts.fbp), (&clm_terms, &mut parts.clm)] {
        if terms.is_empty() {
            continue;
        }
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = g.add(sum, t)?;
        }
        let scaled = g.scale(sum, inv_m);
        *slot = Some(g.value(scaled).item().as_f64());
        add(g, scaled)?;
    }
    let total = total.expect("at least one objective");
    parts.total = g.value(total).item().as_f64();
    Ok((total, parts))
}
