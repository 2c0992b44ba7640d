//! Per-user model states, the four embedding update strategies, and the
//! on-disk state store.
//!
//! A stateful update threads the retention state through each new period
//! and folds the period's mean hidden state into a running mean, so its cost
//! depends only on the period length. The stateless strategies either look
//! at the latest period alone, average per-period embeddings, or recompute
//! over the whole history.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{forward_chunkwise, forward_stream, hidden_sum_f64, Cursor, Fingerprint, ModelState, Parameters};
use crate::retention::{HeadState, LayerState};
use crate::tensor::Tensor;

pub const STATE_MAGIC: &[u8; 4] = b"USES";
pub const STATE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UpdateStrategy {
    Stateful,
    RecentOnly,
    PoolEmbeddings,
    RecomputeAll,
}

impl UpdateStrategy {
    pub const ALL: [UpdateStrategy; 4] = [
        Self::Stateful,
        Self::RecentOnly,
        Self::PoolEmbeddings,
        Self::RecomputeAll,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Stateful => "stateful",
            Self::RecentOnly => "recent_only",
            Self::PoolEmbeddings => "pool",
            Self::RecomputeAll => "recompute_all",
        }
    }

    pub fn needs_history(&self) -> bool {
        matches!(self, Self::RecomputeAll)
    }
}

impl fmt::Display for UpdateStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UpdateStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stateful" => Ok(Self::Stateful),
            "recent_only" | "recent-only" => Ok(Self::RecentOnly),
            "pool" | "pool_embeddings" | "pool-embeddings" => Ok(Self::PoolEmbeddings),
            "recompute_all" | "recompute-all" => Ok(Self::RecomputeAll),
            other => Err(Error::config(
                "strategy",
                format!("`{other}` is not one of stateful, recent_only, pool, recompute_all"),
            )),
        }
    }
}

/// How per-period embeddings are combined under the pool strategy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoolWeighting {
    #[default]
    Equal,
    /// Weight each period by its number of behaviors.
    ByCount,
}

/// Everything the store keeps for one user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserState {
    pub user_id: u64,
    pub fingerprint: Fingerprint,
    pub model: ModelState<f32>,
    pub behaviors_seen: u64,
    /// Running mean of every hidden state seen, accumulated in 64-bit.
    pub embedding: Vec<f64>,
    pub periods_seen: u32,
    /// `(embedding, behavior count)` per period; filled only by the pool strategy.
    pub period_embeddings: Vec<(Vec<f64>, u64)>,
    pub version: u32,
}

pub fn init_user(user_id: u64, params: &Parameters<f32>) -> UserState {
    let fingerprint = params.fingerprint();
    let mut model = ModelState::fresh(params.config());
    model.fingerprint = Some(fingerprint);
    UserState {
        user_id,
        fingerprint,
        model,
        behaviors_seen: 0,
        embedding: vec![0.0; params.config().hidden_size],
        periods_seen: 0,
        period_embeddings: Vec::new(),
        version: STATE_VERSION,
    }
}

fn check_fingerprint(state: &UserState, params: &Parameters<f32>) -> Result<()> {
    let fp = params.fingerprint();
    if state.fingerprint != fp {
        return Err(Error::StaleState {
            state: state.fingerprint.to_string(),
            params: fp.to_string(),
        });
    }
    Ok(())
}

fn mean_f64(sum: Vec<f64>, count: usize) -> Vec<f64> {
    let inv = 1.0 / count as f64;
    sum.into_iter().map(|s| s * inv).collect()
}

/// Advances the user's state over `new_behaviors` and folds their hidden
/// states into the running mean: `e ← (n/n')·e + (Δ/n')·mean(new)`.
pub fn update_stateful(
    state: &UserState,
    new_behaviors: &[u32],
    params: &Parameters<f32>,
) -> Result<(UserState, Vec<f64>)> {
    check_fingerprint(state, params)?;
    if new_behaviors.is_empty() {
        return Err(Error::EmptyUpdate);
    }
    let (hidden, model) = forward_stream(params, new_behaviors, &state.model, params.config().chunk_len)?;
    let delta = new_behaviors.len() as u64;
    let n_new = state.behaviors_seen + delta;
    let old_w = state.behaviors_seen as f64 / n_new as f64;
    let new_w = delta as f64 / n_new as f64;
    let chunk_mean = mean_f64(hidden_sum_f64(&hidden), new_behaviors.len());
    let embedding: Vec<f64> = state
        .embedding
        .iter()
        .zip(&chunk_mean)
        .map(|(&e, &m)| old_w * e + new_w * m)
        .collect();
    let next = UserState {
        model,
        behaviors_seen: n_new,
        embedding: embedding.clone(),
        periods_seen: state.periods_seen + 1,
        ..state.clone()
    };
    Ok((next, embedding))
}

/// Mean hidden state of this period alone, from a zero state.
pub fn update_recent_only(new_behaviors: &[u32], params: &Parameters<f32>) -> Result<Vec<f64>> {
    if new_behaviors.is_empty() {
        return Err(Error::EmptyUpdate);
    }
    let fresh = ModelState::fresh(params.config());
    let (hidden, _) = forward_stream(params, new_behaviors, &fresh, params.config().chunk_len)?;
    Ok(mean_f64(hidden_sum_f64(&hidden), new_behaviors.len()))
}

/// Appends this period's recent-only embedding and returns the mean over
/// all periods so far.
pub fn update_pool(
    state: &UserState,
    new_behaviors: &[u32],
    params: &Parameters<f32>,
    weighting: PoolWeighting,
) -> Result<(UserState, Vec<f64>)> {
    check_fingerprint(state, params)?;
    let recent = update_recent_only(new_behaviors, params)?;
    let mut next = state.clone();
    next.period_embeddings.push((recent, new_behaviors.len() as u64));
    next.behaviors_seen += new_behaviors.len() as u64;
    next.periods_seen += 1;
    let d = params.config().hidden_size;
    let mut pooled = vec![0.0; d];
    let total: f64 = match weighting {
        PoolWeighting::Equal => next.period_embeddings.len() as f64,
        PoolWeighting::ByCount => next.period_embeddings.iter().map(|(_, c)| *c as f64).sum(),
    };
    for (e, count) in &next.period_embeddings {
        let w = match weighting {
            PoolWeighting::Equal => 1.0,
            PoolWeighting::ByCount => *count as f64,
        } / total;
        for (p, &v) in pooled.iter_mut().zip(e) {
            *p += w * v;
        }
    }
    next.embedding = pooled.clone();
    Ok((next, pooled))
}

/// Limits for full recomputation. The parallel form materializes a
/// `T × T` decay mask per head, so long histories either switch to
/// chunk-wise processing from a zero state or are refused.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecomputeBudget {
    /// Longest history processed in one parallel pass.
    pub parallel_max_len: usize,
    /// Fall back to chunk-wise processing beyond `parallel_max_len`.
    pub chunkwise_fallback: bool,
}

impl Default for RecomputeBudget {
    fn default() -> Self {
        Self {
            parallel_max_len: 4096,
            chunkwise_fallback: false,
        }
    }
}

/// Mean hidden state over the entire history, recomputed from scratch.
pub fn update_recompute_all(history: &[u32], params: &Parameters<f32>, budget: &RecomputeBudget) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::EmptyUpdate);
    }
    let fresh = ModelState::fresh(params.config());
    let hidden = if history.len() <= budget.parallel_max_len {
        forward_chunkwise(params, history, &fresh)?.0
    } else if budget.chunkwise_fallback {
        forward_stream(params, history, &fresh, params.config().chunk_len)?.0
    } else {
        return Err(Error::Budget {
            len: history.len(),
            budget: budget.parallel_max_len,
        });
    };
    Ok(mean_f64(hidden_sum_f64(&hidden), history.len()))
}

/// Encodes a state record:
/// `USES | version | fingerprint | user_id | n | tokens | periods | d | e (f64)
/// | layers, heads, d_k, d_v | S (f32) | pool count | (count, e (f64))*`.
pub fn encode_state(state: &UserState) -> Vec<u8> {
    let d = state.embedding.len();
    let mut buf = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    buf.extend_from_slice(&state.version.to_le_bytes());
    buf.extend_from_slice(&state.fingerprint.0);
    buf.extend_from_slice(&state.user_id.to_le_bytes());
    buf.extend_from_slice(&state.behaviors_seen.to_le_bytes());
    buf.extend_from_slice(&state.model.tokens_processed.to_le_bytes());
    buf.extend_from_slice(&state.periods_seen.to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in &state.embedding {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let layers = &state.model.layers;
    let heads = layers.first().map_or(0, |l| l.heads.len());
    let (dk, dv) = layers
        .first()
        .and_then(|l| l.heads.first())
        .map_or((0, 0), |h| (h.s.rows(), h.s.cols()));
    for v in [layers.len(), heads, dk, dv] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for l in layers {
        for h in &l.heads {
            for v in h.s.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    buf.extend_from_slice(&(state.period_embeddings.len() as u32).to_le_bytes());
    for (e, count) in &state.period_embeddings {
        buf.extend_from_slice(&count.to_le_bytes());
        for v in e {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_state(bytes: &[u8]) -> Result<UserState> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != STATE_MAGIC {
        return Err(Error::Format("not a user-state record (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != STATE_VERSION {
        return Err(Error::Migration {
            found: version,
            expected: STATE_VERSION,
        });
    }
    let fingerprint = Fingerprint(cur.take(32)?.try_into().expect("32 bytes"));
    let user_id = cur.u64()?;
    let behaviors_seen = cur.u64()?;
    let tokens_processed = cur.u64()?;
    let periods_seen = cur.u32()?;
    let d = cur.u32()? as usize;
    let embedding = cur.f64s(d)?;
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!("user {user_id}: non-finite embedding")));
    }
    let (num_layers, heads, dk, dv) = (
        cur.u32()? as usize,
        cur.u32()? as usize,
        cur.u32()? as usize,
        cur.u32()? as usize,
    );
    let mut layers = Vec::with_capacity(num_layers);
    for layer in 0..num_layers {
        let mut hs = Vec::with_capacity(heads);
        for _ in 0..heads {
            hs.push(HeadState {
                s: Tensor::new(&[dk, dv], cur.f32s(dk * dv)?)?,
            });
        }
        layers.push(LayerState { layer, heads: hs });
    }
    let pool_len = cur.u32()? as usize;
    let mut period_embeddings = Vec::with_capacity(pool_len);
    for _ in 0..pool_len {
        let count = cur.u64()?;
        period_embeddings.push((cur.f64s(d)?, count));
    }
    if !cur.finished() {
        return Err(Error::Format(format!("user {user_id}: trailing bytes after record")));
    }
    Ok(UserState {
        user_id,
        fingerprint,
        model: ModelState {
            layers,
            tokens_processed,
            fingerprint: Some(fingerprint),
        },
        behaviors_seen,
        embedding,
        periods_seen,
        period_embeddings,
        version,
    })
}

/// Writes `bytes` to a temporary sibling and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_state(state: &UserState, path: &Path) -> Result<()> {
    write_atomic(path, &encode_state(state))
}

/// Reads a record without checking which model produced it.
pub fn read_state(path: &Path) -> Result<UserState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_state(&bytes)
}

/// Reads a record and checks it belongs to `params`.
pub fn load_state(path: &Path, params: &Parameters<f32>) -> Result<UserState> {
    let state = read_state(path)?;
    check_fingerprint(&state, params)?;
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub user_id: u64,
    pub record: PathBuf,
    pub behaviors_seen: u64,
    pub periods_seen: u32,
    pub fingerprint: String,
}

const MANIFEST: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "# usekit-state-manifest v1\tuser_id\trecord\tn\tperiods_seen\tfingerprint";

/// A directory of `users/<id>.uses` records indexed by `manifest.tsv`.
/// Optionally archives raw behavior histories under `history/` for full
/// recomputation.
#[derive(Debug)]
pub struct StateStore {
    root: PathBuf,
    entries: BTreeMap<u64, ManifestEntry>,
}

impl StateStore {
    /// Opens `root`, creating an empty store when it does not exist.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("users")).map_err(|e| Error::io(root, e))?;
        let manifest = root.join(MANIFEST);
        let mut entries = BTreeMap::new();
        if manifest.exists() {
            let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
                let f: Vec<&str> = line.split('\t').collect();
                let bad = || Error::Format(format!("malformed manifest line `{line}`"));
                if f.len() != 5 {
                    return Err(bad());
                }
                let entry = ManifestEntry {
                    user_id: f[0].parse().map_err(|_| bad())?,
                    record: PathBuf::from(f[1]),
                    behaviors_seen: f[2].parse().map_err(|_| bad())?,
                    periods_seen: f[3].parse().map_err(|_| bad())?,
                    fingerprint: f[4].to_string(),
                };
                entries.insert(entry.user_id, entry);
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn user_ids(&self) -> Vec<u64> {
        self.entries.keys().copied().collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.values()
    }

    pub fn contains(&self, user_id: u64) -> bool {
        self.entries.contains_key(&user_id)
    }

    fn record_path(user_id: u64) -> PathBuf {
        PathBuf::from("users").join(format!("{user_id}.uses"))
    }

    fn write_manifest(&self) -> Result<()> {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in self.entries.values() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.user_id,
                e.record.display(),
                e.behaviors_seen,
                e.periods_seen,
                e.fingerprint
            ));
        }
        write_atomic(&self.root.join(MANIFEST), out.as_bytes())
    }

    fn put(&mut self, state: &UserState) -> Result<()> {
        let record = Self::record_path(state.user_id);
        save_state(state, &self.root.join(&record))?;
        self.entries.insert(
            state.user_id,
            ManifestEntry {
                user_id: state.user_id,
                record,
                behaviors_seen: state.behaviors_seen,
                periods_seen: state.periods_seen,
                fingerprint: state.fingerprint.to_hex(),
            },
        );
        Ok(())
    }

    pub fn save(&mut self, state: &UserState) -> Result<()> {
        self.put(state)?;
        self.write_manifest()
    }

    /// Saves several records and rewrites the manifest once.
    pub fn save_many<'a>(&mut self, states: impl IntoIterator<Item = &'a UserState>) -> Result<()> {
        for s in states {
            self.put(s)?;
        }
        self.write_manifest()
    }

    /// Loads a user's record, checking it against `params`. `None` when the
    /// user has never been stored.
    pub fn load(&self, user_id: u64, params: &Parameters<f32>) -> Result<Option<UserState>> {
        match self.entries.get(&user_id) {
            Some(e) => load_state(&self.root.join(&e.record), params).map(Some),
            None => Ok(None),
        }
    }

    /// Loads a record, or a fresh state for unknown users.
    pub fn load_or_init(&self, user_id: u64, params: &Parameters<f32>) -> Result<UserState> {
        Ok(self
            .load(user_id, params)?
            .unwrap_or_else(|| init_user(user_id, params)))
    }

    fn history_path(&self, user_id: u64) -> PathBuf {
        self.root.join("history").join(format!("{user_id}.txt"))
    }

    /// Appends raw behaviors to the user's archived history.
    pub fn archive(&self, user_id: u64, behaviors: &[u32]) -> Result<()> {
        let mut all = self.history(user_id)?;
        all.extend_from_slice(behaviors);
        let dir = self.root.join("history");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let text: Vec<String> = all.iter().map(|v| v.to_string()).collect();
        write_atomic(&self.history_path(user_id), text.join(" ").as_bytes())
    }

    /// Archived history (empty when none was kept).
    pub fn history(&self, user_id: u64) -> Result<Vec<u32>> {
        let path = self.history_path(user_id);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Format(format!("{}: bad behavior `{t}`", path.display())))
            })
            .collect()
    }
}
