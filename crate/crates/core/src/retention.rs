//! Retention in three interchangeable execution forms.
//!
//! For one head with decay `γ`, the output at position `n` is
//! `o_n = Σ_{m≤n} γ^{n-m} (q_n·k_m) v_m`. The parallel form materializes the
//! decay-masked score matrix; the recurrent form threads the state
//! `S_n = γ S_{n-1} + k_nᵀ v_n` and reads `o_n = q_n S_n`; the chunk-wise form
//! runs a chunk in parallel and carries `S` across chunk boundaries. All three
//! produce the same outputs up to floating-point reordering.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Decay for head `h`: `1 - 2^-(5+h)`.
pub fn default_decay(head: usize) -> f64 {
    1.0 - 2f64.powi(-(5 + head as i32))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetentionHeadConfig {
    pub head_index: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub decay: f64,
}

impl RetentionHeadConfig {
    pub fn new(head_index: usize, key_dim: usize, value_dim: usize, decay: f64) -> Result<Self> {
        check_decay(decay)?;
        Ok(Self {
            head_index,
            key_dim,
            value_dim,
            decay,
        })
    }

    /// Heads `0..num_heads` with [`default_decay`] and equal widths.
    pub fn standard(num_heads: usize, head_dim: usize) -> Vec<Self> {
        (0..num_heads)
            .map(|h| Self {
                head_index: h,
                key_dim: head_dim,
                value_dim: head_dim,
                decay: default_decay(h),
            })
            .collect()
    }
}

fn check_decay(decay: f64) -> Result<()> {
    if decay > 0.0 && decay < 1.0 {
        Ok(())
    } else {
        Err(Error::config(
            "decay",
            format!("must lie strictly inside (0, 1), got {decay}"),
        ))
    }
}

/// The per-head memory `S`, a `key_dim × value_dim` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadState<T: Scalar = f32> {
    pub s: Tensor<T>,
}

impl<T: Scalar> HeadState<T> {
    pub fn zeros(key_dim: usize, value_dim: usize) -> Self {
        Self {
            s: Tensor::zeros(&[key_dim, value_dim]),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.s.data().iter().all(|v| *v == T::zero())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T: Scalar = f32> {
    pub layer: usize,
    pub heads: Vec<HeadState<T>>,
}

impl<T: Scalar> LayerState<T> {
    pub fn zeros(layer: usize, heads: &[RetentionHeadConfig]) -> Self {
        Self {
            layer,
            heads: heads.iter().map(|h| HeadState::zeros(h.key_dim, h.value_dim)).collect(),
        }
    }
}

/// `D[n,m] = γ^{n-m}` for `n ≥ m`, zero above the diagonal.
pub fn decay_mask<T: Scalar>(len: usize, decay: f64) -> Tensor<T> {
    let mut d = Tensor::zeros(&[len, len]);
    let powers: Vec<T> = (0..len).map(|p| T::lit(decay.powi(p as i32))).collect();
    let data = d.data_mut();
    for n in 0..len {
        for m in 0..=n {
            data[n * len + m] = powers[n - m];
        }
    }
    d
}

fn check_qkv<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
    if q.shape() != k.shape() {
        return Err(Error::shape("retention q/k", q.shape(), k.shape()));
    }
    if v.rows() != q.rows() {
        return Err(Error::shape("retention q/v", q.shape(), v.shape()));
    }
    Ok(())
}

/// Parallel form `(Q Kᵀ ⊙ D) V`. `Q` and `K` arrive already scaled.
pub fn retention_parallel<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, decay: f64) -> Result<Tensor<T>> {
    check_decay(decay)?;
    check_qkv(q, k, v)?;
    if q.rows() == 0 {
        return Err(Error::EmptyChunk);
    }
    let scores = q.matmul_t(k)?.mul(&decay_mask(q.rows(), decay))?;
    scores.matmul(v)
}

/// One token of the recurrent form: `S' = γ S + kᵀv`, `o = q S'`.
pub fn retention_recurrent_step<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    state: &HeadState<T>,
    decay: f64,
) -> Result<(Vec<T>, HeadState<T>)> {
    check_decay(decay)?;
    let (dk, dv) = (state.s.rows(), state.s.cols());
    if q.len() != dk || k.len() != dk || v.len() != dv {
        return Err(Error::shape(
            "retention_recurrent_step",
            &[dk, dv],
            &[q.len(), k.len(), v.len()],
        ));
    }
    let gamma = T::lit(decay);
    let mut s = state.s.scale(gamma);
    let data = s.data_mut();
    for (i, &ki) in k.iter().enumerate() {
        for (j, &vj) in v.iter().enumerate() {
            data[i * dv + j] += ki * vj;
        }
    }
    let mut o = vec![T::zero(); dv];
    for (i, &qi) in q.iter().enumerate() {
        for (oj, &sij) in o.iter_mut().zip(&data[i * dv..(i + 1) * dv]) {
            *oj += qi * sij;
        }
    }
    Ok((o, HeadState { s }))
}

/// Token-by-token recurrence over a whole sequence from `state`.
pub fn retention_recurrent<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    state: &HeadState<T>,
    decay: f64,
) -> Result<(Tensor<T>, HeadState<T>)> {
    check_qkv(q, k, v)?;
    let mut state = state.clone();
    let mut out = Vec::with_capacity(q.rows() * v.cols());
    for n in 0..q.rows() {
        let (o, next) = retention_recurrent_step(q.row_slice(n), k.row_slice(n), v.row_slice(n), &state, decay)?;
        out.extend(o);
        state = next;
    }
    Ok((Tensor::new(&[q.rows(), v.cols()], out)?, state))
}

/// Chunk-wise form. With 1-based in-chunk index `i`:
/// `O[i] = q_i (γ^i S_in + Σ_{m≤i} γ^{i-m} k_mᵀ v_m)` and
/// `S_out = γ^C S_in + Σ_m γ^{C-m} k_mᵀ v_m`.
pub fn retention_chunkwise<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    state_in: &HeadState<T>,
    decay: f64,
) -> Result<(Tensor<T>, HeadState<T>)> {
    check_decay(decay)?;
    check_qkv(q, k, v)?;
    let c = q.rows();
    if c == 0 {
        return Err(Error::EmptyChunk);
    }
    if state_in.s.shape() != [q.cols(), v.cols()] {
        return Err(Error::shape(
            "retention_chunkwise state",
            state_in.s.shape(),
            &[q.cols(), v.cols()],
        ));
    }
    let mut out = retention_parallel(q, k, v, decay)?;

    let dv = v.cols();
    let carried = !state_in.is_zero();
    if carried {
        let cross = q.matmul(&state_in.s)?;
        let od = out.data_mut();
        for i in 0..c {
            let w = T::lit(decay.powi(i as i32 + 1));
            for (o, &x) in od[i * dv..(i + 1) * dv].iter_mut().zip(cross.row_slice(i)) {
                *o += w * x;
            }
        }
    }

    // Σ_m γ^{C-m} k_mᵀ v_m with 1-based m
    let mut k_decayed = k.clone();
    let dk = k.cols();
    for m in 0..c {
        let w = T::lit(decay.powi((c - 1 - m) as i32));
        for x in &mut k_decayed.data_mut()[m * dk..(m + 1) * dk] {
            *x *= w;
        }
    }
    let mut s = k_decayed.t_matmul(v)?;
    if carried {
        s.add_assign(&state_in.s.scale(T::lit(decay.powi(c as i32))))?;
    }
    Ok((out, HeadState { s }))
}

/// Projection weights of one multi-head retention block, each `d × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionWeights<T: Scalar = f32> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

fn check_heads(d: usize, heads: &[RetentionHeadConfig]) -> Result<()> {
    if heads.is_empty() {
        return Err(Error::config("num_heads", "at least one head is required"));
    }
    let total: usize = heads.iter().map(|h| h.value_dim).sum();
    let key_total: usize = heads.iter().map(|h| h.key_dim).sum();
    if total != d || key_total != d {
        return Err(Error::config(
            "num_heads",
            format!("hidden size {d} is not split evenly across {} heads", heads.len()),
        ));
    }
    for h in heads {
        check_decay(h.decay)?;
    }
    Ok(())
}

/// Multi-head retention over `x` (`T × d`). Without an incoming state the
/// chunk is processed from the zero state, which equals the parallel form;
/// the resulting state is returned either way.
pub fn multi_head_retention<T: Scalar>(
    x: &Tensor<T>,
    state: Option<&LayerState<T>>,
    weights: &RetentionWeights<T>,
    heads: &[RetentionHeadConfig],
    layer: usize,
) -> Result<(Tensor<T>, LayerState<T>)> {
    let d = x.cols();
    check_heads(d, heads)?;
    if let Some(st) = state {
        if st.heads.len() != heads.len() {
            return Err(Error::config(
                "num_heads",
                format!("state has {} heads, config has {}", st.heads.len(), heads.len()),
            ));
        }
    }
    let q = x.matmul(&weights.wq)?;
    let k = x.matmul(&weights.wk)?;
    let v = x.matmul(&weights.wv)?;

    let mut outputs = Vec::with_capacity(heads.len());
    let mut next = Vec::with_capacity(heads.len());
    let (mut koff, mut voff) = (0, 0);
    for (h, cfg) in heads.iter().enumerate() {
        let qh = q.slice_cols(koff, cfg.key_dim)?;
        let kh = k
            .slice_cols(koff, cfg.key_dim)?
            .scale(T::lit(1.0 / (cfg.key_dim as f64).sqrt()));
        let vh = v.slice_cols(voff, cfg.value_dim)?;
        let zero;
        let s_in = match state {
            Some(st) => &st.heads[h],
            None => {
                zero = HeadState::zeros(cfg.key_dim, cfg.value_dim);
                &zero
            }
        };
        let (o, s) = retention_chunkwise(&qh, &kh, &vh, s_in, cfg.decay)?;
        outputs.push(o);
        next.push(s);
        koff += cfg.key_dim;
        voff += cfg.value_dim;
    }
    let out = Tensor::concat_cols(&outputs)?.matmul(&weights.wo)?;
    Ok((out, LayerState { layer, heads: next }))
}

/// Graph handles for [`RetentionWeights`].
#[derive(Clone, Copy, Debug)]
pub struct RetentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Differentiable parallel form for one head.
pub fn retention_parallel_graph<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, decay: f64) -> Result<Var> {
    check_decay(decay)?;
    let len = g.shape(q)[0];
    if len == 0 {
        return Err(Error::EmptyChunk);
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mask = g.constant(decay_mask(len, decay));
    let masked = g.mul(scores, mask)?;
    g.matmul(masked, v)
}

/// Differentiable multi-head retention in parallel form, used for training.
pub fn multi_head_retention_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: &RetentionVars,
    heads: &[RetentionHeadConfig],
) -> Result<Var> {
    let d = g.shape(x)[1];
    check_heads(d, heads)?;
    let q = g.matmul(x, w.wq)?;
    let k = g.matmul(x, w.wk)?;
    let v = g.matmul(x, w.wv)?;
    let mut outputs = Vec::with_capacity(heads.len());
    let (mut koff, mut voff) = (0, 0);
    for cfg in heads {
        let qh = g.slice_cols(q, koff, cfg.key_dim)?;
        let kh = g.slice_cols(k, koff, cfg.key_dim)?;
        let kh = g.scale(kh, T::lit(1.0 / (cfg.key_dim as f64).sqrt()));
        let vh = g.slice_cols(v, voff, cfg.value_dim)?;
        outputs.push(retention_parallel_graph(g, qh, kh, vh, cfg.decay)?);
        koff += cfg.key_dim;
        voff += cfg.value_dim;
    }
    let cat = if outputs.len() == 1 {
        outputs[0]
    } else {
        g.concat_cols(&outputs)?
    };
    g.matmul(cat, w.wo)
}
