//! Behavior vocabulary, the synthetic persona generator, dataset files, and
//! term-frequency vectorizers.
//!
//! Each synthetic user follows a Markov chain over behaviors derived from
//! one of `K` archetypes. The archetype fixes the coarse structure (what
//! users of that kind tend to do next); a per-user perturbation of the
//! transition logits makes individual users distinguishable. Sessions have
//! geometric length and open with a `new_session` marker.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const NEW_SESSION: u32 = 1;
pub const NUM_SPECIALS: usize = 2;

const DESK_NAMES: [&str; 64] = [
    "open_app",
    "open_camera",
    "take_snap",
    "record_video",
    "apply_filter",
    "apply_lens",
    "add_caption",
    "add_sticker",
    "send_snap",
    "send_chat",
    "open_chat",
    "read_chat",
    "reply_chat",
    "send_voice_note",
    "start_call",
    "end_call",
    "start_video_call",
    "view_story",
    "post_story",
    "skip_story",
    "reply_story",
    "open_discover",
    "watch_show",
    "subscribe_channel",
    "open_map",
    "share_location",
    "view_friend_location",
    "open_profile",
    "edit_profile",
    "edit_avatar",
    "add_friend",
    "accept_friend",
    "remove_friend",
    "search_user",
    "search_content",
    "open_memories",
    "save_memory",
    "export_memory",
    "open_spotlight",
    "like_spotlight",
    "share_spotlight",
    "comment_spotlight",
    "open_settings",
    "change_privacy",
    "block_user",
    "report_content",
    "open_notifications",
    "clear_notifications",
    "view_ad",
    "click_ad",
    "skip_ad",
    "open_shop",
    "view_product",
    "purchase_item",
    "play_game",
    "invite_to_game",
    "create_group",
    "send_group_chat",
    "mute_group",
    "take_screenshot",
    "use_scan",
    "open_music",
    "add_music",
    "close_app",
];

/// Ordered behavior names; ids are dense from zero with the specials first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BehaviorVocab {
    names: Vec<String>,
}

impl BehaviorVocab {
    /// `pad`, `new_session`, then `num_behaviors` named behaviors. The first
    /// 64 carry app-interaction names; beyond that names are numbered.
    pub fn desk(num_behaviors: usize) -> Self {
        let mut names = vec!["pad".to_string(), "new_session".to_string()];
        for i in 0..num_behaviors {
            names.push(match DESK_NAMES.get(i) {
                Some(n) => n.to_string(),
                None => format!("behavior_{i}"),
            });
        }
        Self { names }
    }

    pub fn from_names(names: Vec<String>) -> Result<Self> {
        if names.len() < NUM_SPECIALS || names[0] != "pad" || names[1] != "new_session" {
            return Err(Error::Vocab("ids 0 and 1 must be `pad` and `new_session`".into()));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_behaviors(&self) -> usize {
        self.names.len() - NUM_SPECIALS
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32)
    }

    /// Behaviors predicted by default: everything except the specials.
    pub fn behaviors_of_interest(&self) -> Vec<u32> {
        (NUM_SPECIALS as u32..self.names.len() as u32).collect()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.names {
            h.update(n.as_bytes());
            h.update(b"\n");
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = format!("# usekit-vocab {}\n", self.fingerprint());
        for (i, n) in self.names.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{n}");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut declared = None;
        let mut names = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# usekit-vocab ") {
                declared = Some(rest.trim().to_string());
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let (id, name) = line
                .split_once('\t')
                .ok_or_else(|| Error::Vocab(format!("malformed line `{line}`")))?;
            let id: usize = id.parse().map_err(|_| Error::Vocab(format!("bad id `{id}`")))?;
            if id != names.len() {
                return Err(Error::Vocab(format!(
                    "ids must be dense; expected {}, got {id}",
                    names.len()
                )));
            }
            names.push(name.to_string());
        }
        let vocab = Self::from_names(names)?;
        match declared {
            Some(fp) if fp != vocab.fingerprint() => Err(Error::Vocab(format!(
                "header fingerprint {fp} does not match contents {}",
                vocab.fingerprint()
            ))),
            _ => Ok(vocab),
        }
    }
}

/// One user's time-ordered behavior ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BehaviorSequence {
    pub user_id: u64,
    pub ids: Vec<u32>,
}

impl BehaviorSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Full logs start with `new_session`, contain no padding, and stay
    /// inside the vocabulary.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.ids.first() != Some(&NEW_SESSION) {
            return Err(Error::Dataset(format!(
                "user {} does not begin with new_session",
                self.user_id
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id == PAD || id as usize >= vocab_size) {
            return Err(Error::Vocab(format!("user {} has invalid id {bad}", self.user_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub vocab_fingerprint: String,
    pub users: Vec<BehaviorSequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn to_text(&self, provenance: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(p) = provenance {
            let _ = writeln!(out, "# {p}");
        }
        let _ = writeln!(out, "# usekit-dataset v1 vocab={}", self.vocab_fingerprint);
        for u in &self.users {
            let _ = write!(out, "{}\t", u.user_id);
            for (i, id) in u.ids.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{id}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, vocab: &BehaviorVocab) -> Result<Self> {
        let mut ds = Dataset {
            vocab_fingerprint: vocab.fingerprint(),
            users: Vec::new(),
        };
        let mut header_seen = false;
        for (lineno, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(fp) = rest.split_whitespace().find_map(|w| w.strip_prefix("vocab=")) {
                    if fp != ds.vocab_fingerprint {
                        return Err(Error::Vocab(format!(
                            "dataset built for vocabulary {fp}, loaded with {}",
                            ds.vocab_fingerprint
                        )));
                    }
                    header_seen = true;
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !header_seen {
                return Err(Error::Dataset("missing `# usekit-dataset` header".into()));
            }
            let (uid, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::Dataset(format!("line {}: expected `user_id<TAB>ids`", lineno + 1)))?;
            let user_id = uid
                .parse()
                .map_err(|_| Error::Dataset(format!("line {}: bad user id `{uid}`", lineno + 1)))?;
            let ids = rest
                .split_whitespace()
                .map(|tok| {
                    let id: u32 = tok
                        .parse()
                        .map_err(|_| Error::Dataset(format!("line {}: bad behavior `{tok}`", lineno + 1)))?;
                    if id as usize >= vocab.len() {
                        return Err(Error::Vocab(format!("line {}: unknown behavior id {id}", lineno + 1)));
                    }
                    Ok(id)
                })
                .collect::<Result<Vec<u32>>>()?;
            ds.users.push(BehaviorSequence { user_id, ids });
        }
        Ok(ds)
    }
}

pub fn write_dataset(path: &Path, dataset: &Dataset, provenance: Option<&str>) -> Result<()> {
    fs::write(path, dataset.to_text(provenance)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path, vocab: &BehaviorVocab) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_text(&text, vocab)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonaSpec {
    pub num_behaviors: usize,
    pub num_archetypes: usize,
    pub archetype_seed: u64,
    /// Std of archetype transition logits; larger means more predictable.
    pub archetype_sharpness: f64,
    /// Std of the per-user logit noise on top of the archetype.
    pub perturbation_scale: f64,
    /// Mean behaviors per session (geometric).
    pub mean_session_len: f64,
    /// Fraction of the way each user moves toward a second archetype per
    /// drift step; zero keeps users stationary.
    pub drift_rate: f64,
    /// Behaviors between drift steps.
    pub drift_interval: usize,
}

impl Default for PersonaSpec {
    fn default() -> Self {
        Self {
            num_behaviors: 64,
            num_archetypes: 8,
            archetype_seed: 0x5eed,
            archetype_sharpness: 2.0,
            perturbation_scale: 0.3,
            mean_session_len: 12.0,
            drift_rate: 0.0,
            drift_interval: 64,
        }
    }
}

/// Row-stochastic matrices for one user (or archetype), as logits and
/// sampling tables.
#[derive(Clone, Debug)]
struct ChainLogits {
    start: Vec<f64>,
    transition: Vec<Vec<f64>>,
}

impl ChainLogits {
    fn blend(&self, other: &Self, rate: f64) -> Self {
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (1.0 - rate) * x + rate * y).collect();
        Self {
            start: mix(&self.start, &other.start),
            transition: self
                .transition
                .iter()
                .zip(&other.transition)
                .map(|(a, b)| mix(a, b))
                .collect(),
        }
    }

    fn sampler(&self) -> Result<ChainSampler> {
        Ok(ChainSampler {
            start: weighted(&self.start)?,
            transition: self.transition.iter().map(|r| weighted(r)).collect::<Result<_>>()?,
        })
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn weighted(logits: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(softmax(logits)).map_err(|e| Error::Spec(format!("invalid transition row: {e}")))
}

struct ChainSampler {
    start: WeightedIndex<f64>,
    transition: Vec<WeightedIndex<f64>>,
}

/// Archetype structure derived from a [`PersonaSpec`].
#[derive(Clone, Debug)]
pub struct PersonaModel {
    spec: PersonaSpec,
    archetypes: Vec<ChainLogits>,
}

impl PersonaSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_behaviors < 2 {
            return Err(Error::Spec("need at least two behaviors".into()));
        }
        if self.num_archetypes == 0 {
            return Err(Error::Spec("need at least one archetype".into()));
        }
        if !(self.mean_session_len > 1.0) {
            return Err(Error::Spec(format!(
                "mean session length {} must exceed 1",
                self.mean_session_len
            )));
        }
        if !(self.perturbation_scale >= 0.0) || !(self.archetype_sharpness >= 0.0) {
            return Err(Error::Spec("scales must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.drift_rate) {
            return Err(Error::Spec(format!("drift rate {} outside [0, 1)", self.drift_rate)));
        }
        if self.drift_interval == 0 {
            return Err(Error::Spec("drift interval must be positive".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<PersonaModel> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.archetype_seed);
        let normal = Normal::new(0.0, self.archetype_sharpness).map_err(|e| Error::Spec(e.to_string()))?;
        let b = self.num_behaviors;
        let archetypes = (0..self.num_archetypes)
            .map(|_| ChainLogits {
                start: (0..b).map(|_| normal.sample(&mut rng)).collect(),
                transition: (0..b)
                    .map(|_| (0..b).map(|_| normal.sample(&mut rng)).collect())
                    .collect(),
            })
            .collect::<Vec<_>>();
        for (a, arch) in archetypes.iter().enumerate() {
            for (i, row) in arch.transition.iter().enumerate() {
                let p = softmax(row);
                if p[i] > 1.0 - 1e-9 {
                    return Err(Error::Spec(format!("archetype {a} has absorbing behavior {i}")));
                }
            }
        }
        Ok(PersonaModel {
            spec: self.clone(),
            archetypes,
        })
    }
}

/// Generation-time facts about a user, for tests and diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct UserProfile {
    pub user_id: u64,
    pub archetype: usize,
    pub drift_target: usize,
}

fn user_rng(seed: u64, user_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user_id);
    rng
}

impl PersonaModel {
    pub fn spec(&self) -> &PersonaSpec {
        &self.spec
    }

    pub fn profile(&self, user_id: u64, seed: u64) -> UserProfile {
        let mut rng = user_rng(seed, user_id);
        let archetype = rng.gen_range(0..self.archetypes.len());
        let drift_target = rng.gen_range(0..self.archetypes.len());
        UserProfile {
            user_id,
            archetype,
            drift_target,
        }
    }

    /// Deterministic in `(seed, user_id)` and independent of other users.
    pub fn generate_user(&self, user_id: u64, length: usize, seed: u64) -> Result<BehaviorSequence> {
        let mut rng = user_rng(seed, user_id);
        let archetype = rng.gen_range(0..self.archetypes.len());
        let drift_target = rng.gen_range(0..self.archetypes.len());
        let noise = Normal::new(0.0, self.spec.perturbation_scale).map_err(|e| Error::Spec(e.to_string()))?;
        let base = &self.archetypes[archetype];
        let perturb = |row: &[f64], rng: &mut ChaCha8Rng| row.iter().map(|l| l + noise.sample(rng)).collect();
        let mut logits = ChainLogits {
            start: perturb(&base.start, &mut rng),
            transition: base.transition.iter().map(|r| perturb(r, &mut rng)).collect(),
        };
        let mut sampler = logits.sampler()?;
        let end_prob = 1.0 / self.spec.mean_session_len;

        let mut ids = Vec::with_capacity(length);
        let mut prev: Option<usize> = None;
        while ids.len() < length {
            if self.spec.drift_rate > 0.0 && !ids.is_empty() && ids.len() % self.spec.drift_interval == 0 {
                logits = logits.blend(&self.archetypes[drift_target], self.spec.drift_rate);
                sampler = logits.sampler()?;
            }
            match prev {
                None => {
                    ids.push(NEW_SESSION);
                    prev = Some(usize::MAX);
                }
                Some(p) => {
                    let next = if p == usize::MAX {
                        sampler.start.sample(&mut rng)
                    } else {
                        sampler.transition[p].sample(&mut rng)
                    };
                    ids.push((next + NUM_SPECIALS) as u32);
                    prev = if rng.gen_bool(end_prob) { None } else { Some(next) };
                }
            }
        }
        Ok(BehaviorSequence { user_id, ids })
    }

    pub fn generate(&self, user_ids: impl IntoIterator<Item = u64>, length: usize, seed: u64) -> Result<Dataset> {
        let vocab = BehaviorVocab::desk(self.spec.num_behaviors);
        let users = user_ids
            .into_iter()
            .map(|u| self.generate_user(u, length, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            vocab_fingerprint: vocab.fingerprint(),
            users,
        })
    }
}

/// `num_users` users with ids `0..num_users`.
pub fn generate_dataset(spec: &PersonaSpec, num_users: usize, length: usize, seed: u64) -> Result<Dataset> {
    spec.build()?.generate(0..num_users as u64, length, seed)
}

/// Behavior-count vector normalized to sum one; padding is ignored.
pub fn tf_vector(seq: &[u32], vocab_size: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; vocab_size];
    let mut total = 0.0;
    for &id in seq {
        if id == PAD {
            continue;
        }
        let slot = counts
            .get_mut(id as usize)
            .ok_or_else(|| Error::Vocab(format!("unknown behavior id {id}")))?;
        *slot += 1.0;
        total += 1.0;
    }
    if total == 0.0 {
        return Err(Error::Dataset("term frequency of an empty sequence".into()));
    }
    counts.iter_mut().for_each(|c| *c /= total);
    Ok(counts)
}

/// Inverse document frequencies `ln((1 + D) / (1 + df)) + 1`, so a behavior
/// present in every document keeps weight exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TfIdf {
    pub idf: Vec<f64>,
}

impl TfIdf {
    pub fn fit<'a>(docs: impl IntoIterator<Item = &'a [u32]>, vocab_size: usize) -> Self {
        let mut df = vec![0usize; vocab_size];
        let mut n_docs = 0usize;
        let mut seen = vec![false; vocab_size];
        for doc in docs {
            n_docs += 1;
            seen.iter_mut().for_each(|s| *s = false);
            for &id in doc {
                if id != PAD && (id as usize) < vocab_size {
                    seen[id as usize] = true;
                }
            }
            for (d, s) in df.iter_mut().zip(&seen) {
                *d += *s as usize;
            }
        }
        let idf = df
            .iter()
            .map(|&d| ((1.0 + n_docs as f64) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        Self { idf }
    }

    pub fn transform(&self, seq: &[u32]) -> Result<Vec<f64>> {
        let mut tf = tf_vector(seq, self.idf.len())?;
        tf.iter_mut().zip(&self.idf).for_each(|(t, w)| *t *= w);
        Ok(tf)
    }
}

/// TF-IDF vectors of every sequence in a corpus, with the IDF fitted on it.
pub fn tfidf_vectors(dataset: &Dataset, vocab_size: usize) -> Result<Vec<Vec<f64>>> {
    let model = TfIdf::fit(dataset.users.iter().map(|u| u.ids.as_slice()), vocab_size);
    dataset.users.iter().map(|u| model.transform(&u.ids)).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
