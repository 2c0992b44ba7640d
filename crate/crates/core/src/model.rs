//! The embedding network: behavior embedding table, a stack of pre-norm
//! retention blocks, and linear heads for future-behavior and next-behavior
//! prediction. Sequence embeddings are mean-pooled final hidden states.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::retention::{
    multi_head_retention, multi_head_retention_graph, LayerState, RetentionHeadConfig, RetentionVars, RetentionWeights,
};
use crate::tensor::{Graph, Scalar, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

pub const PARAMS_MAGIC: &[u8; 4] = b"USEW";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Behaviors plus the special tokens.
    pub vocab_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    /// Width of the future-behavior head (behaviors of interest).
    pub num_predicted: usize,
    pub future_window: usize,
    pub max_seq_len: usize,
    /// Default chunk length for stateful inference.
    pub chunk_len: usize,
    /// Reserved for a normalized retention variant; must be false.
    pub normalized_retention: bool,
    pub clm_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 66,
            num_layers: 2,
            num_heads: 2,
            hidden_size: 32,
            ffn_size: 128,
            num_predicted: 64,
            future_window: 16,
            max_seq_len: 256,
            chunk_len: 64,
            normalized_retention: false,
            clm_head: false,
        }
    }
}

impl ModelConfig {
    /// Full-size architecture (12 layers, 8 heads, width 768).
    pub fn full_scale(vocab_size: usize, num_predicted: usize) -> Self {
        Self {
            vocab_size,
            num_layers: 12,
            num_heads: 8,
            hidden_size: 768,
            ffn_size: 3072,
            num_predicted,
            future_window: 100,
            max_seq_len: 512,
            chunk_len: 250,
            normalized_retention: false,
            clm_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_size", self.hidden_size),
            ("ffn_size", self.ffn_size),
            ("num_predicted", self.num_predicted),
            ("future_window", self.future_window),
            ("max_seq_len", self.max_seq_len),
            ("chunk_len", self.chunk_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::config(
                "num_heads",
                format!(
                    "hidden_size {} is not divisible by {}",
                    self.hidden_size, self.num_heads
                ),
            ));
        }
        if self.num_predicted > self.vocab_size {
            return Err(Error::config("num_predicted", "exceeds vocab_size"));
        }
        if self.normalized_retention {
            return Err(Error::config(
                "normalized_retention",
                "the normalized variant is not implemented",
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn heads(&self) -> Vec<RetentionHeadConfig> {
        RetentionHeadConfig::standard(self.num_heads, self.head_dim())
    }

    /// `key=value` lines, in a fixed order.
    pub fn to_block(&self) -> String {
        format!(
            "vocab_size={}\nnum_layers={}\nnum_heads={}\nhidden_size={}\nffn_size={}\nnum_predicted={}\n\
             future_window={}\nmax_seq_len={}\nchunk_len={}\nnormalized_retention={}\nclm_head={}\n",
            self.vocab_size,
            self.num_layers,
            self.num_heads,
            self.hidden_size,
            self.ffn_size,
            self.num_predicted,
            self.future_window,
            self.max_seq_len,
            self.chunk_len,
            self.normalized_retention,
            self.clm_head
        )
    }

    pub fn from_block(block: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = 0;
        for line in block.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed config line `{line}`")))?;
            let bad = || Error::Format(format!("bad value for `{key}`: `{value}`"));
            let num = || value.parse::<usize>().map_err(|_| bad());
            let flag = || value.parse::<bool>().map_err(|_| bad());
            match key {
                "vocab_size" => cfg.vocab_size = num()?,
                "num_layers" => cfg.num_layers = num()?,
                "num_heads" => cfg.num_heads = num()?,
                "hidden_size" => cfg.hidden_size = num()?,
                "ffn_size" => cfg.ffn_size = num()?,
                "num_predicted" => cfg.num_predicted = num()?,
                "future_window" => cfg.future_window = num()?,
                "max_seq_len" => cfg.max_seq_len = num()?,
                "chunk_len" => cfg.chunk_len = num()?,
                "normalized_retention" => cfg.normalized_retention = flag()?,
                "clm_head" => cfg.clm_head = flag()?,
                other => return Err(Error::Format(format!("unknown config key `{other}`"))),
            }
            seen += 1;
        }
        if seen != 11 {
            return Err(Error::Format(format!("config block has {seen} keys, expected 11")));
        }
        Ok(cfg)
    }
}

/// SHA-256 over the configuration and every weight.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Format(format!("bad fingerprint `{s}`: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Format(format!("fingerprint `{s}` is not 32 bytes")))?;
        Ok(Self(arr))
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(&self.0[..8]))
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({self})")
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams<T: Scalar> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub retention: RetentionWeights<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub ffn_in: Tensor<T>,
    pub ffn_in_bias: Tensor<T>,
    pub ffn_out: Tensor<T>,
    pub ffn_out_bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ClmHead<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Learnable weights. Mutation goes through [`Parameters::tensors_mut`],
/// which invalidates the cached fingerprint.
#[derive(Clone, Debug)]
pub struct Parameters<T: Scalar = f32> {
    config: ModelConfig,
    embedding: Tensor<T>,
    blocks: Vec<BlockParams<T>>,
    final_gain: Tensor<T>,
    final_bias: Tensor<T>,
    fbp_head: Tensor<T>,
    fbp_bias: Tensor<T>,
    clm: Option<ClmHead<T>>,
    fingerprint: OnceLock<Fingerprint>,
}

impl<T: Scalar> Parameters<T> {
    /// Normal(0, 0.02) weights, unit layer-norm gains, zero biases.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(config, |shape| Tensor::randn(shape, INIT_STD, rng))
    }

    /// All projection weights zero (norm gains still one).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::build(config, Tensor::zeros)
    }

    fn build(config: &ModelConfig, mut weight: impl FnMut(&[usize]) -> Tensor<T>) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        let f = config.ffn_size;
        let ones = |n| Tensor::full(&[1, n], T::one());
        let zeros = |n| Tensor::zeros(&[1, n]);
        let embedding = weight(&[config.vocab_size, d]);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            blocks.push(BlockParams {
                ln1_gain: ones(d),
                ln1_bias: zeros(d),
                retention: RetentionWeights {
                    wq: weight(&[d, d]),
                    wk: weight(&[d, d]),
                    wv: weight(&[d, d]),
                    wo: weight(&[d, d]),
                },
                ln2_gain: ones(d),
                ln2_bias: zeros(d),
                ffn_in: weight(&[d, f]),
                ffn_in_bias: zeros(f),
                ffn_out: weight(&[f, d]),
                ffn_out_bias: zeros(d),
            });
        }
        let fbp_head = weight(&[d, config.num_predicted]);
        let clm = if config.clm_head {
            Some(ClmHead {
                weight: weight(&[d, config.vocab_size]),
                bias: zeros(config.vocab_size),
            })
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            embedding,
            blocks,
            final_gain: ones(d),
            final_bias: zeros(d),
            fbp_head,
            fbp_bias: zeros(config.num_predicted),
            clm,
            fingerprint: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding_table(&self) -> &Tensor<T> {
        &self.embedding
    }

    pub fn blocks(&self) -> &[BlockParams<T>] {
        &self.blocks
    }

    /// Every tensor with its name, in the declared (serialization) order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend([
                (format!("block{i}.ln1_gain"), &b.ln1_gain),
                (format!("block{i}.ln1_bias"), &b.ln1_bias),
                (format!("block{i}.wq"), &b.retention.wq),
                (format!("block{i}.wk"), &b.retention.wk),
                (format!("block{i}.wv"), &b.retention.wv),
                (format!("block{i}.wo"), &b.retention.wo),
                (format!("block{i}.ln2_gain"), &b.ln2_gain),
                (format!("block{i}.ln2_bias"), &b.ln2_bias),
                (format!("block{i}.ffn_in"), &b.ffn_in),
                (format!("block{i}.ffn_in_bias"), &b.ffn_in_bias),
                (format!("block{i}.ffn_out"), &b.ffn_out),
                (format!("block{i}.ffn_out_bias"), &b.ffn_out_bias),
            ]);
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        out.push(("fbp_head".into(), &self.fbp_head));
        out.push(("fbp_bias".into(), &self.fbp_bias));
        if let Some(c) = &self.clm {
            out.push(("clm_head".into(), &c.weight));
            out.push(("clm_bias".into(), &c.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.fingerprint = OnceLock::new();
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend([
                (format!("block{i}.ln1_gain"), &mut b.ln1_gain),
                (format!("block{i}.ln1_bias"), &mut b.ln1_bias),
                (format!("block{i}.wq"), &mut b.retention.wq),
                (format!("block{i}.wk"), &mut b.retention.wk),
                (format!("block{i}.wv"), &mut b.retention.wv),
                (format!("block{i}.wo"), &mut b.retention.wo),
                (format!("block{i}.ln2_gain"), &mut b.ln2_gain),
                (format!("block{i}.ln2_bias"), &mut b.ln2_bias),
                (format!("block{i}.ffn_in"), &mut b.ffn_in),
                (format!("block{i}.ffn_in_bias"), &mut b.ffn_in_bias),
                (format!("block{i}.ffn_out"), &mut b.ffn_out),
                (format!("block{i}.ffn_out_bias"), &mut b.ffn_out_bias),
            ]);
        }
        out.push(("final_gain".into(), &mut self.final_gain));
        out.push(("final_bias".into(), &mut self.final_bias));
        out.push(("fbp_head".into(), &mut self.fbp_head));
        out.push(("fbp_bias".into(), &mut self.fbp_bias));
        if let Some(c) = &mut self.clm {
            out.push(("clm_head".into(), &mut c.weight));
            out.push(("clm_bias".into(), &mut c.bias));
        }
        out
    }

    pub fn num_weights(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn fingerprint(&self) -> Fingerprint {
        *self.fingerprint.get_or_init(|| {
            let mut h = Sha256::new();
            h.update(self.config.to_block().as_bytes());
            for (name, t) in self.tensors() {
                h.update(name.as_bytes());
                for v in t.data() {
                    h.update(v.as_f64().to_le_bytes());
                }
            }
            Fingerprint(h.finalize().into())
        })
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let c = |t: &Tensor<T>| t.cast::<U>();
        Parameters {
            config: self.config.clone(),
            embedding: c(&self.embedding),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_gain: c(&b.ln1_gain),
                    ln1_bias: c(&b.ln1_bias),
                    retention: RetentionWeights {
                        wq: c(&b.retention.wq),
                        wk: c(&b.retention.wk),
                        wv: c(&b.retention.wv),
                        wo: c(&b.retention.wo),
                    },
                    ln2_gain: c(&b.ln2_gain),
                    ln2_bias: c(&b.ln2_bias),
                    ffn_in: c(&b.ffn_in),
                    ffn_in_bias: c(&b.ffn_in_bias),
                    ffn_out: c(&b.ffn_out),
                    ffn_out_bias: c(&b.ffn_out_bias),
                })
                .collect(),
            final_gain: c(&self.final_gain),
            final_bias: c(&self.final_bias),
            fbp_head: c(&self.fbp_head),
            fbp_bias: c(&self.fbp_bias),
            clm: self.clm.as_ref().map(|h| ClmHead {
                weight: c(&h.weight),
                bias: c(&h.bias),
            }),
            fingerprint: OnceLock::new(),
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| {
                let id = id as usize;
                if id >= self.config.vocab_size {
                    Err(Error::Index {
                        index: id,
                        len: self.config.vocab_size,
                    })
                } else {
                    Ok(id)
                }
            })
            .collect()
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn to_graph(&self, g: &mut Graph<T>) -> ParamVars {
        self.bind(g, |g, t| g.param(t.clone()))
    }

    /// Binds existing graph nodes (one per tensor, in declared order).
    pub fn bind_vars(&self, g: &mut Graph<T>, vars: &[Var]) -> Result<ParamVars> {
        let expected = self.tensors().len();
        if vars.len() != expected {
            return Err(Error::shape("bind_vars", &[expected], &[vars.len()]));
        }
        let mut it = vars.iter().copied();
        Ok(self.bind(g, |_, _| it.next().expect("length checked")))
    }

    fn bind(&self, g: &mut Graph<T>, mut make: impl FnMut(&mut Graph<T>, &Tensor<T>) -> Var) -> ParamVars {
        let mut all = Vec::new();
        let mut leaf = |g: &mut Graph<T>, t: &Tensor<T>| {
            let v = make(g, t);
            all.push(v);
            v
        };
        let embedding = leaf(g, &self.embedding);
        let mut blocks = Vec::new();
        for b in &self.blocks {
            let ln1_gain = leaf(g, &b.ln1_gain);
            let ln1_bias = leaf(g, &b.ln1_bias);
            let retention = RetentionVars {
                wq: leaf(g, &b.retention.wq),
                wk: leaf(g, &b.retention.wk),
                wv: leaf(g, &b.retention.wv),
                wo: leaf(g, &b.retention.wo),
            };
            blocks.push(BlockVars {
                ln1_gain,
                ln1_bias,
                retention,
                ln2_gain: leaf(g, &b.ln2_gain),
                ln2_bias: leaf(g, &b.ln2_bias),
                ffn_in: leaf(g, &b.ffn_in),
                ffn_in_bias: leaf(g, &b.ffn_in_bias),
                ffn_out: leaf(g, &b.ffn_out),
                ffn_out_bias: leaf(g, &b.ffn_out_bias),
            });
        }
        let final_gain = leaf(g, &self.final_gain);
        let final_bias = leaf(g, &self.final_bias);
        let fbp_head = leaf(g, &self.fbp_head);
        let fbp_bias = leaf(g, &self.fbp_bias);
        let clm = self.clm.as_ref().map(|h| (leaf(g, &h.weight), leaf(g, &h.bias)));
        ParamVars {
            embedding,
            blocks,
            final_gain,
            final_bias,
            fbp_head,
            fbp_bias,
            clm,
            all,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub retention: RetentionVars,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ffn_in: Var,
    pub ffn_in_bias: Var,
    pub ffn_out: Var,
    pub ffn_out_bias: Var,
}

/// Graph handles for every parameter; `all` follows [`Parameters::tensors`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub embedding: Var,
    pub blocks: Vec<BlockVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub fbp_head: Var,
    pub fbp_bias: Var,
    pub clm: Option<(Var, Var)>,
    pub all: Vec<Var>,
}

/// Differentiable parallel forward of one sequence; returns `T × d` hidden
/// states.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    params: &Parameters<T>,
    vars: &ParamVars,
    ids: &[u32],
) -> Result<Var> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(Error::EmptyChunk);
    }
    if ids.len() > cfg.max_seq_len {
        return Err(Error::Length {
            len: ids.len(),
            max: cfg.max_seq_len,
        });
    }
    let ids = params.check_ids(ids)?;
    let heads = cfg.heads();
    let eps = T::lit(LN_EPS);
    let mut x = g.gather_rows(vars.embedding, &ids)?;
    for b in &vars.blocks {
        let h = g.layer_norm(x, b.ln1_gain, b.ln1_bias, eps)?;
        let r = multi_head_retention_graph(g, h, &b.retention, &heads)?;
        x = g.add(x, r)?;
        let h = g.layer_norm(x, b.ln2_gain, b.ln2_bias, eps)?;
        let f = g.matmul(h, b.ffn_in)?;
        let f = g.add_row(f, b.ffn_in_bias)?;
        let f = g.gelu(f);
        let f = g.matmul(f, b.ffn_out)?;
        let f = g.add_row(f, b.ffn_out_bias)?;
        x = g.add(x, f)?;
    }
    g.layer_norm(x, vars.final_gain, vars.final_bias, eps)
}

pub fn fbp_logits_graph<T: Scalar>(g: &mut Graph<T>, vars: &ParamVars, hidden: Var) -> Result<Var> {
    let z = g.matmul(hidden, vars.fbp_head)?;
    g.add_row(z, vars.fbp_bias)
}

pub fn clm_logits_graph<T: Scalar>(g: &mut Graph<T>, vars: &ParamVars, hidden: Var) -> Result<Var> {
    let (w, b) = vars
        .clm
        .ok_or_else(|| Error::config("clm_head", "model was built without a next-behavior head"))?;
    let z = g.matmul(hidden, w)?;
    g.add_row(z, b)
}

/// Per-layer retention states plus the number of behaviors consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Scalar = f32> {
    pub layers: Vec<LayerState<T>>,
    pub tokens_processed: u64,
    /// Parameters that produced this state; `None` for a fresh zero state.
    pub fingerprint: Option<Fingerprint>,
}

impl<T: Scalar> ModelState<T> {
    pub fn fresh(config: &ModelConfig) -> Self {
        let heads = config.heads();
        Self {
            layers: (0..config.num_layers).map(|l| LayerState::zeros(l, &heads)).collect(),
            tokens_processed: 0,
            fingerprint: None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.heads.iter().all(|h| h.is_zero()))
    }
}

fn block_forward<T: Scalar>(
    b: &BlockParams<T>,
    x: &Tensor<T>,
    state: Option<&LayerState<T>>,
    heads: &[RetentionHeadConfig],
    layer: usize,
) -> Result<(Tensor<T>, LayerState<T>)> {
    let eps = T::lit(LN_EPS);
    let h = x.layer_norm(&b.ln1_gain, &b.ln1_bias, eps)?;
    let (r, next) = multi_head_retention(&h, state, &b.retention, heads, layer)?;
    let x = x.add(&r)?;
    let h = x.layer_norm(&b.ln2_gain, &b.ln2_bias, eps)?;
    let f = h.matmul(&b.ffn_in)?.add_row(&b.ffn_in_bias)?.gelu();
    let f = f.matmul(&b.ffn_out)?.add_row(&b.ffn_out_bias)?;
    Ok((x.add(&f)?, next))
}

/// Runs `ids` as one chunk from `state`, returning `C × d` hidden states and
/// the advanced state.
pub fn forward_chunkwise<T: Scalar>(
    params: &Parameters<T>,
    ids: &[u32],
    state: &ModelState<T>,
) -> Result<(Tensor<T>, ModelState<T>)> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(Error::EmptyChunk);
    }
    let fp = params.fingerprint();
    if let Some(sfp) = state.fingerprint {
        if sfp != fp {
            return Err(Error::StaleState {
                state: sfp.to_string(),
                params: fp.to_string(),
            });
        }
    }
    if state.layers.len() != cfg.num_layers {
        return Err(Error::config(
            "num_layers",
            format!("state has {} layers, model has {}", state.layers.len(), cfg.num_layers),
        ));
    }
    let ids = params.check_ids(ids)?;
    let heads = cfg.heads();
    let mut x = params.embedding.gather_rows(&ids)?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (l, b) in params.blocks.iter().enumerate() {
        let (nx, ls) = block_forward(b, &x, Some(&state.layers[l]), &heads, l)?;
        x = nx;
        layers.push(ls);
    }
    let hidden = x.layer_norm(&params.final_gain, &params.final_bias, T::lit(LN_EPS))?;
    Ok((
        hidden,
        ModelState {
            layers,
            tokens_processed: state.tokens_processed + ids.len() as u64,
            fingerprint: Some(fp),
        },
    ))
}

/// Processes an arbitrarily long history in chunks of `chunk_len` from
/// `state`; returns all hidden states.
pub fn forward_stream<T: Scalar>(
    params: &Parameters<T>,
    ids: &[u32],
    state: &ModelState<T>,
    chunk_len: usize,
) -> Result<(Tensor<T>, ModelState<T>)> {
    if ids.is_empty() {
        return Err(Error::EmptyChunk);
    }
    let chunk_len = chunk_len.max(1);
    let mut state = state.clone();
    let mut parts = Vec::with_capacity(ids.len().div_ceil(chunk_len));
    for chunk in ids.chunks(chunk_len) {
        let (h, s) = forward_chunkwise(params, chunk, &state)?;
        parts.push(h);
        state = s;
    }
    Ok((Tensor::concat_rows(&parts)?, state))
}

/// Hidden states of a whole sequence in parallel form (no length limit;
/// the caller bounds memory). Used for full recomputation.
pub fn forward_full<T: Scalar>(params: &Parameters<T>, ids: &[u32]) -> Result<Tensor<T>> {
    let (h, _) = forward_chunkwise(params, ids, &ModelState::fresh(&params.config))?;
    Ok(h)
}

/// Padded batch of hidden states `[batch × T × d]`.
#[derive(Clone, Debug)]
pub struct BatchHidden<T: Scalar = f32> {
    pub hidden: Tensor<T>,
    /// `padded[b][t]` is true where position `t` of sequence `b` is padding.
    pub padded: Vec<Vec<bool>>,
}

impl<T: Scalar> BatchHidden<T> {
    pub fn len(&self) -> usize {
        self.padded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.padded.is_empty()
    }

    /// Hidden states of sequence `b` as a `T × d` matrix (padding included).
    pub fn sequence(&self, b: usize) -> Tensor<T> {
        let (t, d) = (self.hidden.shape()[1], self.hidden.shape()[2]);
        let data = self.hidden.data()[b * t * d..(b + 1) * t * d].to_vec();
        Tensor::new(&[t, d], data).expect("consistent batch shape")
    }

    pub fn embeddings(&self) -> Result<Vec<Tensor<T>>> {
        (0..self.len())
            .map(|b| embed(&self.sequence(b), Some(&self.padded[b])))
            .collect()
    }
}

/// Parallel forward over a batch; sequences are right-padded to the longest.
pub fn forward_parallel<T: Scalar>(params: &Parameters<T>, batch: &[&[u32]]) -> Result<BatchHidden<T>> {
    let cfg = &params.config;
    let longest = batch.iter().map(|s| s.len()).max().unwrap_or(0);
    if longest > cfg.max_seq_len {
        return Err(Error::Length {
            len: longest,
            max: cfg.max_seq_len,
        });
    }
    let d = cfg.hidden_size;
    let mut data = vec![T::zero(); batch.len() * longest * d];
    let mut padded = Vec::with_capacity(batch.len());
    for (b, ids) in batch.iter().enumerate() {
        let h = forward_full(params, ids)?;
        data[b * longest * d..b * longest * d + h.numel()].copy_from_slice(h.data());
        padded.push((0..longest).map(|t| t >= ids.len()).collect());
    }
    Ok(BatchHidden {
        hidden: Tensor::new(&[batch.len(), longest, d], data)?,
        padded,
    })
}

/// Mean of the hidden rows not marked as padding; `[1 × d]`.
pub fn embed<T: Scalar>(hidden: &Tensor<T>, padded: Option<&[bool]>) -> Result<Tensor<T>> {
    let (t, d) = (hidden.rows(), hidden.cols());
    let mut sum = vec![T::zero(); d];
    let mut count = 0usize;
    for r in 0..t {
        if padded.is_some_and(|p| p[r]) {
            continue;
        }
        for (s, &v) in sum.iter_mut().zip(hidden.row_slice(r)) {
            *s += v;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyPool);
    }
    let inv = T::one() / T::lit(count as f64);
    Ok(Tensor::row(sum.into_iter().map(|s| s * inv).collect()))
}

/// Sum of hidden rows in 64-bit, for running means.
pub fn hidden_sum_f64<T: Scalar>(hidden: &Tensor<T>) -> Vec<f64> {
    let mut sum = vec![0.0; hidden.cols()];
    for r in 0..hidden.rows() {
        for (s, v) in sum.iter_mut().zip(hidden.row_slice(r)) {
            *s += v.as_f64();
        }
    }
    sum
}

pub fn fbp_logits<T: Scalar>(params: &Parameters<T>, hidden: &Tensor<T>) -> Result<Tensor<T>> {
    hidden.matmul(&params.fbp_head)?.add_row(&params.fbp_bias)
}

pub fn clm_logits<T: Scalar>(params: &Parameters<T>, hidden: &Tensor<T>) -> Result<Tensor<T>> {
    let head = params
        .clm
        .as_ref()
        .ok_or_else(|| Error::config("clm_head", "model was built without a next-behavior head"))?;
    hidden.matmul(&head.weight)?.add_row(&head.bias)
}

/// Writes `USEW | version | config block | fingerprint | f32 payloads`.
pub fn save_params(params: &Parameters<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + params.num_weights() * 4);
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    let block = params.config.to_block();
    buf.extend_from_slice(&(block.len() as u32).to_le_bytes());
    buf.extend_from_slice(block.as_bytes());
    buf.extend_from_slice(&params.fingerprint().0);
    for (_, t) in params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<Parameters<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}

/// Like [`load_params`] but rejects files whose config differs from `expected`.
pub fn load_params_expecting(path: &Path, expected: &ModelConfig) -> Result<Parameters<f32>> {
    let params = load_params(path)?;
    if params.config() != expected {
        let diff = first_config_difference(params.config(), expected);
        return Err(Error::config(diff, "file declares a different model configuration"));
    }
    Ok(params)
}

fn first_config_difference(a: &ModelConfig, b: &ModelConfig) -> String {
    a.to_block()
        .lines()
        .zip(b.to_block().lines())
        .find(|(x, y)| x != y)
        .and_then(|(x, _)| x.split_once('=').map(|(k, _)| k.to_string()))
        .unwrap_or_else(|| "config".into())
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_params(bytes: &[u8]) -> Result<Parameters<f32>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != PARAMS_MAGIC {
        return Err(Error::Format("not a parameter file (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != PARAMS_VERSION {
        return Err(Error::Version {
            found: version,
            expected: PARAMS_VERSION,
        });
    }
    let block_len = cur.u32()? as usize;
    let block =
        std::str::from_utf8(cur.take(block_len)?).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let config = ModelConfig::from_block(block)?;
    config
        .validate()
        .map_err(|e| Error::Format(format!("invalid declared config: {e}")))?;
    let declared = Fingerprint(cur.take(32)?.try_into().expect("32 bytes"));
    let mut params = Parameters::<f32>::zeros(&config)?;
    for (_, t) in params.tensors_mut() {
        let values = cur.f32s(t.numel())?;
        t.data_mut().copy_from_slice(&values);
    }
    if !cur.finished() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    if params.fingerprint() != declared {
        return Err(Error::Format(format!(
            "fingerprint mismatch: header {declared}, payload {}",
            params.fingerprint()
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            num_layers: 2,
            num_heads: 2,
            hidden_size: 8,
            ffn_size: 16,
            num_predicted: 8,
            future_window: 2,
            max_seq_len: 64,
            chunk_len: 4,
            normalized_retention: false,
            clm_head: true,
        }
    }

    fn model(seed: u64) -> Parameters<f32> {
        let mut p = Parameters::<f32>::init(&small(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        // larger weights so the blocks are far from identity
        for (_, t) in p.tensors_mut() {
            for v in t.data_mut() {
                *v *= 10.0;
            }
        }
        p
    }

    #[test]
    fn config_rejects_uneven_heads() {
        let cfg = ModelConfig {
            num_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        let cfg = ModelConfig {
            normalized_retention: true,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_block_round_trip() {
        let cfg = small();
        assert_eq!(ModelConfig::from_block(&cfg.to_block()).unwrap(), cfg);
    }

    #[test]
    fn zero_blocks_reduce_to_final_norm_of_embeddings() {
        let mut p = model(1);
        let emb = p.embedding_table().clone();
        for (name, t) in p.tensors_mut() {
            if name.contains("gain") {
                t.data_mut().fill(1.0);
            } else if name != "embedding" {
                t.data_mut().fill(0.0);
            }
        }
        let ids = [1u32, 4, 2, 9];
        let h = forward_full(&p, &ids).unwrap();
        let rows = emb.gather_rows(&[1, 4, 2, 9]).unwrap();
        let d = 8;
        let expect = rows
            .layer_norm(&Tensor::full(&[1, d], 1.0), &Tensor::zeros(&[1, d]), LN_EPS as f32)
            .unwrap();
        assert!(h.max_abs_diff(&expect) < 1e-5);
    }

    #[test]
    fn batch_of_one_equals_unbatched() {
        let p = model(2);
        let ids = [1u32, 3, 3, 7, 2];
        let batch = forward_parallel(&p, &[&ids]).unwrap();
        assert_eq!(batch.sequence(0), forward_full(&p, &ids).unwrap());
    }

    #[test]
    fn batch_pads_and_masks() {
        let p = model(3);
        let a = [1u32, 3, 3, 7, 2];
        let b = [1u32, 5];
        let batch = forward_parallel(&p, &[&a, &b]).unwrap();
        assert_eq!(batch.hidden.shape(), &[2, 5, 8]);
        let embs = batch.embeddings().unwrap();
        let direct = embed(&forward_full(&p, &b).unwrap(), None).unwrap();
        assert!(embs[1].max_abs_diff(&direct) < 1e-6);
    }

    #[test]
    fn graph_forward_matches_eager() {
        let p = model(4);
        let ids: Vec<u32> = (0..20).map(|i| (i * 7 % 10) as u32).collect();
        let mut g = Graph::new();
        let vars = p.to_graph(&mut g);
        let h = forward_graph(&mut g, &p, &vars, &ids).unwrap();
        let eager = forward_full(&p, &ids).unwrap();
        assert!(g.value(h).max_rel_diff(&eager) < 1e-4);
    }

    #[test]
    fn chunks_three_plus_five_equal_eight() {
        let p = model(5);
        let ids = [1u32, 2, 3, 4, 5, 6, 7, 8];
        let fresh = ModelState::fresh(p.config());
        let (whole, _) = forward_chunkwise(&p, &ids, &fresh).unwrap();
        let (h1, s1) = forward_chunkwise(&p, &ids[..3], &fresh).unwrap();
        let (h2, s2) = forward_chunkwise(&p, &ids[3..], &s1).unwrap();
        let joined = Tensor::concat_rows(&[h1, h2]).unwrap();
        assert!(joined.max_rel_diff(&whole) < 1e-4);
        assert_eq!(s2.tokens_processed, 8);
    }

    #[test]
    fn empty_chunk_and_stale_state_rejected() {
        let p = model(6);
        let fresh = ModelState::fresh(p.config());
        assert!(matches!(forward_chunkwise(&p, &[], &fresh), Err(Error::EmptyChunk)));
        let (_, s) = forward_chunkwise(&p, &[1, 2], &fresh).unwrap();
        let other = model(7);
        let err = forward_chunkwise(&other, &[3], &s).unwrap_err();
        match err {
            Error::StaleState { state, params } => {
                assert_eq!(state, p.fingerprint().to_string());
                assert_eq!(params, other.fingerprint().to_string());
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn overlong_and_out_of_vocab_rejected() {
        let p = model(8);
        let long = vec![1u32; 65];
        assert!(matches!(
            forward_parallel(&p, &[&long]),
            Err(Error::Length { len: 65, max: 64 })
        ));
        assert!(matches!(
            forward_full(&p, &[1, 10]),
            Err(Error::Index { index: 10, .. })
        ));
    }

    #[test]
    fn embed_examples() {
        let h = Tensor::<f32>::from_rows(&[&[1.0, 1.0], &[3.0, 3.0]]).unwrap();
        assert_eq!(embed(&h, None).unwrap().data(), &[2.0, 2.0]);
        let one = Tensor::<f32>::from_rows(&[&[4.0, -1.0]]).unwrap();
        assert_eq!(embed(&one, None).unwrap().data(), &[4.0, -1.0]);
        let h = Tensor::<f32>::from_rows(&[&[1.0, 1.0], &[9.0, 9.0], &[3.0, 3.0]]).unwrap();
        assert_eq!(embed(&h, Some(&[false, true, false])).unwrap().data(), &[2.0, 2.0]);
        assert!(matches!(embed(&h, Some(&[true, true, true])), Err(Error::EmptyPool)));
    }

    #[test]
    fn zero_heads_give_half_probability() {
        let mut p = model(9);
        for (name, t) in p.tensors_mut() {
            if name.starts_with("fbp") {
                t.data_mut().fill(0.0);
            }
        }
        let h = forward_full(&p, &[1, 2, 3]).unwrap();
        let probs = fbp_logits(&p, &h).unwrap().sigmoid();
        assert!(probs.data().iter().all(|v| *v == 0.5));
        let cfg = ModelConfig {
            num_predicted: 1,
            ..small()
        };
        let p1 = Parameters::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let h = forward_full(&p1, &[1, 2, 3]).unwrap();
        assert_eq!(fbp_logits(&p1, &h).unwrap().shape(), &[3, 1]);
    }

    #[test]
    fn fbp_head_gradient() {
        let p = model(10).cast::<f64>();
        let hidden = forward_full(&p, &[1, 2, 3, 4]).unwrap();
        let head = p
            .tensors()
            .into_iter()
            .find(|(n, _)| n == "fbp_head")
            .unwrap()
            .1
            .clone();
        let bias = p
            .tensors()
            .into_iter()
            .find(|(n, _)| n == "fbp_bias")
            .unwrap()
            .1
            .clone();
        let targets = Tensor::new(&[4, 8], (0..32).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
        let r = crate::tensor::grad_check(
            |g, v| {
                let h = g.constant(hidden.clone());
                let z = g.matmul(h, v[0])?;
                let z = g.add_row(z, v[1])?;
                g.bce_with_logits(z, targets.clone())
            },
            &[head, bias],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn fingerprint_tracks_weights() {
        let mut p = model(11);
        let before = p.fingerprint();
        assert_eq!(before, p.clone().fingerprint());
        p.tensors_mut()[3].1.data_mut()[0] += 1.0;
        assert_ne!(p.fingerprint(), before);
    }

    #[test]
    fn params_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.usew");
        let p = model(12);
        save_params(&p, &path).unwrap();
        let q = load_params(&path).unwrap();
        assert_eq!(q.fingerprint(), p.fingerprint());
        for ((_, a), (_, b)) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(a.data(), b.data());
        }
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_params(&path), Err(Error::Format(_))));

        let mut skewed = bytes.clone();
        skewed[4] = 9;
        std::fs::write(&path, &skewed).unwrap();
        assert!(matches!(load_params(&path), Err(Error::Version { found: 9, .. })));

        std::fs::write(&path, &bytes).unwrap();
        let other = ModelConfig {
            hidden_size: 16,
            ..small()
        };
        match load_params_expecting(&path, &other) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "hidden_size"),
            r => panic!("unexpected {r:?}"),
        }

        std::fs::write(&path, b"GARBAGE!").unwrap();
        assert!(matches!(load_params(&path), Err(Error::Format(_))));
    }
}
