//! Flat `key = value` run configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};
use usekit::data::{PersonaSpec, NUM_SPECIALS};
use usekit::eval::{BenchConfig, FbpTaskConfig, ProbeConfig, RetrievalConfig, SimulationConfig, SimulationSchedule};
use usekit::model::ModelConfig;
use usekit::objectives::{NegativePool, ObjectiveSet};
use usekit::state_store::{PoolWeighting, UpdateStrategy};
use usekit::trainer::TrainConfig;

/// A rejected setting, reported with exit code 1.
#[derive(Debug)]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration `{}`: {}", self.key, self.reason)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub users: usize,
    pub length: usize,
    pub persona: PersonaSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
    /// Future-behavior task: embedder input length and prediction horizon.
    pub fbp_input_len: usize,
    pub fbp_horizon: usize,
    pub probe: ProbeConfig,
    pub schedule: SimulationSchedule,
    pub strategies: Vec<UpdateStrategy>,
    pub probe_fraction: f64,
    pub probe_per_period: bool,
    pub pool_weighting: PoolWeighting,
    pub bench: BenchConfig,
    pub sweep_w: Vec<usize>,
    pub sweep_lengths: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            users: 800,
            length: 1088,
            persona: PersonaSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            retrieval: RetrievalConfig::default(),
            fbp_input_len: 64,
            fbp_horizon: 64,
            probe: ProbeConfig::default(),
            schedule: SimulationSchedule::default(),
            strategies: UpdateStrategy::ALL.to_vec(),
            probe_fraction: 0.5,
            probe_per_period: true,
            pool_weighting: PoolWeighting::Equal,
            bench: BenchConfig::default(),
            sweep_w: vec![16, 32, 64],
            sweep_lengths: vec![16, 32, 64],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError::new(key, format!("cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one setting. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "users" => self.users = parse(key, v)?,
            "length" => self.length = parse(key, v)?,

            "num_behaviors" => self.persona.num_behaviors = parse(key, v)?,
            "num_archetypes" => self.persona.num_archetypes = parse(key, v)?,
            "archetype_seed" => self.persona.archetype_seed = parse(key, v)?,
            "archetype_sharpness" => self.persona.archetype_sharpness = parse(key, v)?,
            "perturbation_scale" => self.persona.perturbation_scale = parse(key, v)?,
            "mean_session_len" => self.persona.mean_session_len = parse(key, v)?,
            "drift_rate" => self.persona.drift_rate = parse(key, v)?,
            "drift_interval" => self.persona.drift_interval = parse(key, v)?,

            "num_layers" => self.model.num_layers = parse(key, v)?,
            "num_heads" => self.model.num_heads = parse(key, v)?,
            "hidden_size" => self.model.hidden_size = parse(key, v)?,
            "ffn_size" => self.model.ffn_size = parse(key, v)?,
            "max_seq_len" => self.model.max_seq_len = parse(key, v)?,
            "chunk_len" => self.model.chunk_len = parse(key, v)?,
            "normalized_retention" => self.model.normalized_retention = parse(key, v)?,
            "future_window" | "w" => {
                self.train.future_window = parse("future_window", v)?;
                self.model.future_window = self.train.future_window;
            }

            "seq_len" => self.train.seq_len = parse(key, v)?,
            "pair_gap" => self.train.pair_gap = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "peak_lr" => self.train.peak_lr = parse(key, v)?,
            "warmup_fraction" => self.train.warmup_fraction = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "temperature" => self.train.temperature = parse(key, v)?,
            "clip_norm" => self.train.clip_norm = parse(key, v)?,
            "validation_every" => self.train.validation_every = parse(key, v)?,
            "objective" => {
                self.train.objectives = ObjectiveSet::from_name(v).map_err(|_| {
                    ConfigError::new(key, format!("`{v}` is not one of use, use-fbp, use-sup, use-clm"))
                })?;
            }
            "negatives" => {
                self.train.negatives = match v {
                    "all" => NegativePool::AllOthers,
                    "cross" => NegativePool::CrossView,
                    _ => return Err(ConfigError::new(key, format!("`{v}` is not one of all, cross"))),
                }
            }

            "n_candidates" => self.retrieval.n_candidates = parse(key, v)?,
            "hard_threshold" => self.retrieval.hard_threshold = parse(key, v)?,
            "window_len" => self.retrieval.window_len = parse(key, v)?,
            "retrieval_gap" => self.retrieval.gap = parse(key, v)?,
            "max_instances" => self.retrieval.max_instances = if v == "all" { None } else { Some(parse(key, v)?) },
            "fbp_input_len" => self.fbp_input_len = parse(key, v)?,
            "fbp_horizon" => self.fbp_horizon = parse(key, v)?,

            "probe_hidden" => self.probe.hidden = parse(key, v)?,
            "probe_epochs" => self.probe.epochs = parse(key, v)?,
            "probe_lr" => self.probe.lr = parse(key, v)?,
            "probe_patience" => self.probe.patience = parse(key, v)?,

            "initial" => self.schedule.initial = parse(key, v)?,
            "increment" => self.schedule.increment = parse(key, v)?,
            "periods" => self.schedule.periods = parse(key, v)?,
            "strategies" => {
                self.strategies = v
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| ConfigError::new(key, format!("unknown strategy `{s}`")))
                    })
                    .collect::<Result<_, _>>()?
            }
            "probe_fraction" => self.probe_fraction = parse(key, v)?,
            "probe_per_period" => self.probe_per_period = parse(key, v)?,
            "pool_weighting" => {
                self.pool_weighting = match v.trim() {
                    "equal" => PoolWeighting::Equal,
                    "by_count" => PoolWeighting::ByCount,
                    _ => return Err(ConfigError::new(key, "expected `equal` or `by_count`")),
                }
            }

            "repetitions" => self.bench.repetitions = parse(key, v)?,

            "sweep_w" => self.sweep_w = parse_list(key, v)?,
            "sweep_lengths" => self.sweep_lengths = parse_list(key, v)?,
            _ => return Err(ConfigError::new(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies a `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::new(format!("line {}", n + 1), "expected `key = value`"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Every setting in canonical `key = value` form, sorted by key.
    pub fn resolved(&self) -> BTreeMap<&'static str, String> {
        let p = &self.persona;
        let m = &self.model;
        let t = &self.train;
        let r = &self.retrieval;
        let negatives = match t.negatives {
            NegativePool::AllOthers => "all",
            NegativePool::CrossView => "cross",
        };
        let strategies: Vec<&str> = self.strategies.iter().map(|s| s.name()).collect();
        BTreeMap::from([
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
            ("users", self.users.to_string()),
            ("length", self.length.to_string()),
            ("num_behaviors", p.num_behaviors.to_string()),
            ("num_archetypes", p.num_archetypes.to_string()),
            ("archetype_seed", p.archetype_seed.to_string()),
            ("archetype_sharpness", p.archetype_sharpness.to_string()),
            ("perturbation_scale", p.perturbation_scale.to_string()),
            ("mean_session_len", p.mean_session_len.to_string()),
            ("drift_rate", p.drift_rate.to_string()),
            ("drift_interval", p.drift_interval.to_string()),
            ("num_layers", m.num_layers.to_string()),
            ("num_heads", m.num_heads.to_string()),
            ("hidden_size", m.hidden_size.to_string()),
            ("ffn_size", m.ffn_size.to_string()),
            ("max_seq_len", m.max_seq_len.to_string()),
            ("chunk_len", m.chunk_len.to_string()),
            ("normalized_retention", m.normalized_retention.to_string()),
            ("future_window", t.future_window.to_string()),
            ("seq_len", t.seq_len.to_string()),
            ("pair_gap", t.pair_gap.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("peak_lr", t.peak_lr.to_string()),
            ("warmup_fraction", t.warmup_fraction.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("temperature", t.temperature.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("validation_every", t.validation_every.to_string()),
            ("objective", t.objectives.name().to_string()),
            ("negatives", negatives.to_string()),
            ("n_candidates", r.n_candidates.to_string()),
            ("hard_threshold", r.hard_threshold.to_string()),
            ("window_len", r.window_len.to_string()),
            ("retrieval_gap", r.gap.to_string()),
            ("max_instances", r.max_instances.map_or("all".into(), |n| n.to_string())),
            ("fbp_input_len", self.fbp_input_len.to_string()),
            ("fbp_horizon", self.fbp_horizon.to_string()),
            ("probe_hidden", self.probe.hidden.to_string()),
            ("probe_epochs", self.probe.epochs.to_string()),
            ("probe_lr", self.probe.lr.to_string()),
            ("probe_patience", self.probe.patience.to_string()),
            ("initial", self.schedule.initial.to_string()),
            ("increment", self.schedule.increment.to_string()),
            ("periods", self.schedule.periods.to_string()),
            ("strategies", strategies.join(",")),
            ("probe_fraction", self.probe_fraction.to_string()),
            ("probe_per_period", self.probe_per_period.to_string()),
            (
                "pool_weighting",
                match self.pool_weighting {
                    PoolWeighting::Equal => "equal",
                    PoolWeighting::ByCount => "by_count",
                }
                .to_string(),
            ),
            ("repetitions", self.bench.repetitions.to_string()),
            ("sweep_w", list(&self.sweep_w)),
            ("sweep_lengths", list(&self.sweep_lengths)),
        ])
    }

    pub fn to_text(&self) -> String {
        self.resolved().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 12 hex digits of the SHA-256 of the resolved config.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))[..12].to_string()
    }

    pub fn provenance(&self) -> String {
        format!(
            "usekit {} config={} seed={}",
            env!("CARGO_PKG_VERSION"),
            self.hash(),
            self.seed
        )
    }

    /// Model settings for a vocabulary of `vocab_size` ids (specials included).
    pub fn model_for(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            num_predicted: vocab_size - NUM_SPECIALS,
            clm_head: self.train.objectives.clm,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        RetrievalConfig {
            seed: self.seed,
            ..self.retrieval.clone()
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            seed: self.seed,
            ..self.probe.clone()
        }
    }

    pub fn fbp_config(&self, interest: Vec<u32>) -> FbpTaskConfig {
        FbpTaskConfig {
            input_len: self.fbp_input_len,
            horizon: self.fbp_horizon,
            interest,
            probe: self.probe_config(),
            seed: self.seed,
        }
    }

    pub fn simulation_config(&self) -> SimulationConfig {
        SimulationConfig {
            schedule: self.schedule,
            strategies: self.strategies.clone(),
            probe: self.probe_config(),
            probe_fraction: self.probe_fraction,
            retrain_per_period: self.probe_per_period,
            pool_weighting: self.pool_weighting,
            seed: self.seed,
            workers: self.workers,
            ..SimulationConfig::default()
        }
    }

    /// Checks every value before any work starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let core = |e: usekit::Error| match e {
            usekit::Error::Config { key, reason } => ConfigError::new(key, reason),
            other => ConfigError::new("persona", other.to_string()),
        };
        if self.workers == 0 {
            return Err(ConfigError::new("workers", "must be at least 1"));
        }
        if self.users == 0 {
            return Err(ConfigError::new("users", "must be at least 1"));
        }
        if self.length == 0 {
            return Err(ConfigError::new("length", "must be at least 1"));
        }
        self.persona.validate().map_err(core)?;
        self.model_for(self.persona.num_behaviors + NUM_SPECIALS)
            .validate()
            .map_err(core)?;
        self.train.validate().map_err(core)?;
        if self.train.seq_len > self.model.max_seq_len {
            return Err(ConfigError::new(
                "seq_len",
                format!("exceeds max_seq_len {}", self.model.max_seq_len),
            ));
        }
        if self.retrieval.n_candidates < 2 {
            return Err(ConfigError::new(
                "n_candidates",
                "need the positive and at least one negative",
            ));
        }
        if self.retrieval.window_len == 0 {
            return Err(ConfigError::new("window_len", "must be at least 1"));
        }
        if self.fbp_input_len == 0 || self.fbp_horizon == 0 {
            return Err(ConfigError::new(
                "fbp_horizon",
                "input length and horizon must be at least 1",
            ));
        }
        if self.probe.hidden == 0 || self.probe.epochs == 0 {
            return Err(ConfigError::new(
                "probe_hidden",
                "probe width and epochs must be at least 1",
            ));
        }
        self.schedule.validate().map_err(core)?;
        if self.strategies.is_empty() {
            return Err(ConfigError::new("strategies", "no strategy selected"));
        }
        if !(self.probe_fraction > 0.0 && self.probe_fraction < 1.0) {
            return Err(ConfigError::new("probe_fraction", "must lie strictly between 0 and 1"));
        }
        if self.bench.repetitions == 0 {
            return Err(ConfigError::new("repetitions", "must be at least 1"));
        }
        if self.sweep_w.iter().chain(&self.sweep_lengths).any(|&v| v == 0) {
            return Err(ConfigError::new(
                "sweep_w",
                "window sizes and lengths must be at least 1",
            ));
        }
        if let Some(&w) = self.sweep_w.iter().max() {
            if self.train.seq_len.max(2 * w) > self.model.max_seq_len {
                return Err(ConfigError::new(
                    "sweep_w",
                    format!("W={w} needs seq_len {} > max_seq_len", 2 * w),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_overrides_defaults() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nepochs = 3\nobjective = use-sup  # trailing\nw=8\n")
            .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.objectives, ObjectiveSet::SUP_ONLY);
        assert_eq!((c.train.future_window, c.model.future_window), (8, 8));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::default().apply_text("nope = 1").unwrap_err();
        assert_eq!(err.key, "nope");
    }

    #[test]
    fn hash_tracks_values() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.set("epochs", "11").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut a = RunConfig::default();
        a.set("strategies", "stateful,pool").unwrap();
        a.set("max_instances", "50").unwrap();
        let mut b = RunConfig::default();
        b.apply_text(&a.to_text()).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn validation_names_the_key() {
        let mut c = RunConfig::default();
        c.set("peak_lr", "-1").unwrap();
        assert_eq!(c.validate().unwrap_err().key, "peak_lr");
        let mut c = RunConfig::default();
        c.set("num_heads", "3").unwrap();
        assert_eq!(c.validate().unwrap_err().key, "num_heads");
    }
}
