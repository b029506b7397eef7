//! Run configuration: flat `key = value` text with optional `[section]`
//! headers. Sections only group keys; every key is global.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};
use tpgr::agent::Baseline;
use tpgr::cluster::ClusterMethod;
use tpgr::{Result, TpgrError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    RatingBased,
    MfBased,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    /// Frozen item factors from matrix factorization on the training split.
    Mf,
    /// Trainable random embeddings.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Planted,
    Momentum,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub separator: String,
    pub skip_header: bool,
    pub rating_min: f64,
    pub rating_max: f64,
    pub split_fraction: f64,
    pub validation_fraction: f64,
    pub representation: Representation,
    pub repr_path: Option<PathBuf>,
    pub mf_dim: usize,
    pub mf_epochs: usize,
    pub mf_learning_rate: f64,
    pub mf_regularization: f64,
    pub cluster_method: ClusterMethod,
    pub depth: usize,
    pub alpha: f64,
    pub episode_len: usize,
    pub k: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub baseline: Baseline,
    pub clip_norm: f64,
    pub episodes_per_step: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub embedding: EmbeddingMode,
    pub emb_dim: usize,
    pub sru_hidden: usize,
    pub onehot_len: usize,
    pub policy_hidden: Vec<usize>,
    pub mask_repeats: bool,
    pub eval_passes: usize,
    pub greedy_eval: bool,
    pub positive_threshold: Option<f64>,
    pub profile_bmax: usize,
    pub bench_depths: Vec<usize>,
    pub bench_decisions: usize,
    pub bench_episodes: usize,
    pub plot_data: bool,
    pub synth_kind: SynthKind,
    pub synth_users: usize,
    pub synth_items: usize,
    pub threads: Option<usize>,
    pub deterministic: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            separator: "::".into(),
            skip_header: false,
            rating_min: 1.0,
            rating_max: 5.0,
            split_fraction: 0.8,
            validation_fraction: 0.1,
            representation: Representation::RatingBased,
            repr_path: None,
            mf_dim: 16,
            mf_epochs: 20,
            mf_learning_rate: 0.01,
            mf_regularization: 0.01,
            cluster_method: ClusterMethod::Pca,
            depth: 2,
            alpha: 0.1,
            episode_len: 32,
            k: 32,
            gamma: 0.9,
            learning_rate: 0.05,
            baseline: Baseline::Zero,
            clip_norm: 10.0,
            episodes_per_step: 64,
            max_steps: 1000,
            eval_every: 20,
            patience: 10,
            min_delta: 1e-4,
            embedding: EmbeddingMode::Mf,
            emb_dim: 16,
            sru_hidden: 16,
            onehot_len: 10,
            policy_hidden: vec![32, 16],
            mask_repeats: true,
            eval_passes: 1,
            greedy_eval: false,
            positive_threshold: None,
            profile_bmax: 10,
            bench_depths: vec![1, 2, 3, 4],
            bench_decisions: 20_000,
            bench_episodes: 1000,
            plot_data: false,
            synth_kind: SynthKind::Planted,
            synth_users: 200,
            synth_items: 500,
            threads: None,
            deterministic: false,
            seed: 0,
            output_dir: "run".into(),
        }
    }
}

fn bad(key: &str, value: &str, why: impl Display) -> TpgrError {
    TpgrError::InvalidArgument(format!("{key} = {value:?}: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| bad(key, value, e))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|o| o.0 == value.trim())
        .map(|o| o.1)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|o| o.0).collect();
            bad(key, value, format!("expected one of {}", names.join(", ")))
        })
}

impl RunConfig {
    /// Sets one key; dashes and underscores are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        let v = value.trim();
        let v = v
            .strip_prefix('"')
            .and_then(|x| x.strip_suffix('"'))
            .unwrap_or(v);
        match k {
            "dataset" => self.dataset = Some(v.into()),
            "separator" => self.separator = v.replace("\\t", "\t"),
            "skip_header" => self.skip_header = flag(k, v)?,
            "rating_min" => self.rating_min = num(k, v)?,
            "rating_max" => self.rating_max = num(k, v)?,
            "split_fraction" => self.split_fraction = num(k, v)?,
            "validation_fraction" => self.validation_fraction = num(k, v)?,
            "representation" => {
                self.representation = choice(
                    k,
                    v,
                    &[
                        ("rating-based", Representation::RatingBased),
                        ("mf-based", Representation::MfBased),
                        ("external", Representation::External),
                    ],
                )?
            }
            "repr_path" => self.repr_path = Some(v.into()),
            "mf_dim" => self.mf_dim = num(k, v)?,
            "mf_epochs" => self.mf_epochs = num(k, v)?,
            "mf_learning_rate" => self.mf_learning_rate = num(k, v)?,
            "mf_regularization" => self.mf_regularization = num(k, v)?,
            "cluster_method" => self.cluster_method = v.parse()?,
            "depth" => self.depth = num(k, v)?,
            "alpha" => self.alpha = num(k, v)?,
            "episode_len" => self.episode_len = num(k, v)?,
            "k" => self.k = num(k, v)?,
            "gamma" => self.gamma = num(k, v)?,
            "learning_rate" => self.learning_rate = num(k, v)?,
            "baseline" => {
                self.baseline = choice(k, v, &[("zero", Baseline::Zero), ("batch-mean", Baseline::BatchMean)])?
            }
            "clip_norm" => self.clip_norm = num(k, v)?,
            "episodes_per_step" => self.episodes_per_step = num(k, v)?,
            "max_steps" => self.max_steps = num(k, v)?,
            "eval_every" => self.eval_every = num(k, v)?,
            "patience" => self.patience = num(k, v)?,
            "min_delta" => self.min_delta = num(k, v)?,
            "embedding" => {
                self.embedding = choice(k, v, &[("mf", EmbeddingMode::Mf), ("random", EmbeddingMode::Random)])?
            }
            "emb_dim" => self.emb_dim = num(k, v)?,
            "sru_hidden" => self.sru_hidden = num(k, v)?,
            "onehot_len" => self.onehot_len = num(k, v)?,
            "policy_hidden" => self.policy_hidden = list(k, v)?,
            "mask_repeats" => self.mask_repeats = flag(k, v)?,
            "eval_passes" => self.eval_passes = num(k, v)?,
            "greedy_eval" => self.greedy_eval = flag(k, v)?,
            "positive_threshold" => self.positive_threshold = Some(num(k, v)?),
            "profile_bmax" => self.profile_bmax = num(k, v)?,
            "bench_depths" => self.bench_depths = list(k, v)?,
            "bench_decisions" => self.bench_decisions = num(k, v)?,
            "bench_episodes" => self.bench_episodes = num(k, v)?,
            "plot_data" => self.plot_data = flag(k, v)?,
            "synth_kind" => {
                self.synth_kind = choice(k, v, &[("planted", SynthKind::Planted), ("momentum", SynthKind::Momentum)])?
            }
            "synth_users" => self.synth_users = num(k, v)?,
            "synth_items" => self.synth_items = num(k, v)?,
            "threads" => self.threads = Some(num(k, v)?),
            "deterministic" => self.deterministic = flag(k, v)?,
            "seed" => self.seed = num(k, v)?,
            "output_dir" => self.output_dir = v.into(),
            _ => return Err(TpgrError::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a config file's contents.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TpgrError::InvalidArgument(format!("config line {}: expected key = value", n + 1))
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Applies `--key value` pairs; a flag followed by another flag (or
    /// nothing) is read as `true`.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut i = 0;
        while i < args.len() {
            let key = args[i]
                .strip_prefix("--")
                .ok_or_else(|| TpgrError::InvalidArgument(format!("unexpected argument {:?}", args[i])))?;
            if let Some((k, v)) = key.split_once('=') {
                self.set(k, v)?;
                i += 1;
            } else if i + 1 < args.len() && !args[i + 1].starts_with("--") {
                self.set(key, &args[i + 1])?;
                i += 2;
            } else {
                self.set(key, "true")?;
                i += 1;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(TpgrError::InvalidArgument(msg.into()));
        if !(self.rating_min < self.rating_max) {
            return fail("rating_min must be below rating_max");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return fail("split_fraction must be in (0, 1)");
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return fail("validation_fraction must be in [0, 1)");
        }
        if self.depth < 1 {
            return fail("depth must be at least 1");
        }
        if self.k < 1 || self.k > self.episode_len {
            return fail("k must be in 1..=episode_len");
        }
        if self.policy_hidden.is_empty() && self.sru_hidden == 0 {
            return fail("network widths must be positive");
        }
        if self.bench_depths.iter().any(|&d| d < 1) {
            return fail("bench depths must be at least 1");
        }
        if self.threads == Some(0) {
            return fail("threads must be at least 1");
        }
        Ok(())
    }

    /// Sorted `key = value` lines of every effective setting.
    pub fn canonical(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn positive_threshold(&self) -> f64 {
        self.positive_threshold
            .unwrap_or((self.rating_min + self.rating_max) / 2.0)
    }
}
