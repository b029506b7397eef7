use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;
use sha2::{Digest, Sha256};
use tpgr::agent::{init_model, train, ModelDims, TpgrModel, TrainConfig, UpdateConfig};
use tpgr::cluster::ClusterTree;
use tpgr::data::{consecutive_profile, dataset_stats, load_ratings, split_users, RatingDataset, RatingRange};
use tpgr::evalbench::{bench, evaluate, popularity_policy, random_policy, BenchConfig, EvalReport, TpgrPolicy};
use tpgr::reprs::{mf_item_representation, mf_train, rating_based, ItemRepresentation, MfConfig};
use tpgr::simenv::{SimConfig, Simulator};
use tpgr::synth::{momentum_sessions, planted_world, PlantedConfig};
use tpgr::{Result, TpgrError};

use crate::config::{EmbeddingMode, Representation, RunConfig, SynthKind};

pub const DATASET: &str = "dataset.tsv";
pub const TREE: &str = "tree.bin";
pub const MODEL: &str = "model.bin";

/// Writes artifacts into the run directory and records them in the manifest.
pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub command: &'static str,
    artifacts: Vec<String>,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a RunConfig, command: &'static str) -> Result<Self> {
        fs::create_dir_all(&cfg.output_dir)?;
        Ok(Run { cfg, command, artifacts: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.artifacts.push(name.to_string());
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(|e| TpgrError::Format(e.to_string()))?;
            writeln!(w)?;
            Ok(())
        })
    }

    /// Opens an artifact produced by an earlier command.
    fn upstream(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.is_file() {
            return Err(TpgrError::Format(format!(
                "missing upstream artifact {} (run `tpgr {producer}` first)",
                p.display()
            )));
        }
        Ok(p)
    }

    /// Merges this command's entry into `manifest.json`.
    pub fn finish(self) -> Result<Vec<String>> {
        let path = self.path("manifest.json");
        let mut commands: BTreeMap<String, serde_json::Value> = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .and_then(|v| v.get("commands").cloned())
                .and_then(|c| serde_json::from_value(c).ok())
                .unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        commands.insert(
            self.command.to_string(),
            json!({
                "config_hash": self.cfg.hash(),
                "seed": self.cfg.seed,
                "artifacts": self.artifacts,
                "config": self.cfg,
            }),
        );
        let manifest = json!({ "version": env!("CARGO_PKG_VERSION"), "commands": commands });
        let mut w = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| TpgrError::Format(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(self.artifacts)
    }
}

fn range(cfg: &RunConfig) -> Result<RatingRange> {
    RatingRange::new(cfg.rating_min, cfg.rating_max)
}

fn load_cached(run: &Run) -> Result<RatingDataset> {
    let path = run.upstream(DATASET, "ingest")?;
    load_ratings(path, "\t", range(run.cfg)?, false)
}

pub struct Splits {
    pub train: RatingDataset,
    pub valid: Option<RatingDataset>,
    pub test: RatingDataset,
}

/// User-disjoint train / validation / test split, fixed by the seed.
pub fn splits(cfg: &RunConfig, ds: &RatingDataset) -> Result<Splits> {
    let (train_all, test) = split_users(ds, cfg.split_fraction, cfg.seed)?;
    if cfg.validation_fraction > 0.0 && train_all.n_users() >= 2 {
        let (train, valid) = split_users(&train_all, 1.0 - cfg.validation_fraction, cfg.seed.wrapping_add(1))?;
        Ok(Splits { train, valid: Some(valid), test })
    } else {
        Ok(Splits { train: train_all, valid: None, test })
    }
}

fn mf_config(cfg: &RunConfig) -> MfConfig {
    MfConfig {
        dim: cfg.mf_dim,
        epochs: cfg.mf_epochs,
        learning_rate: cfg.mf_learning_rate,
        regularization: cfg.mf_regularization,
        seed: cfg.seed,
    }
}

fn representation(cfg: &RunConfig, train: &RatingDataset) -> Result<ItemRepresentation> {
    let rep = match cfg.representation {
        Representation::RatingBased => rating_based(train),
        Representation::MfBased => mf_item_representation(&mf_train(train, &mf_config(cfg))?),
        Representation::External => {
            let path = cfg
                .repr_path
                .as_ref()
                .ok_or_else(|| TpgrError::InvalidArgument("representation = external needs repr_path".into()))?;
            ItemRepresentation::read_text(BufReader::new(File::open(path)?))?
        }
    };
    if tpgr::VectorSet::len(&rep) != train.n_items() {
        return Err(TpgrError::Shape(format!(
            "representation has {} rows for {} items",
            tpgr::VectorSet::len(&rep),
            train.n_items()
        )));
    }
    Ok(rep)
}

fn sim_config(cfg: &RunConfig, mask_repeats: bool) -> Result<SimConfig> {
    Ok(SimConfig {
        alpha: cfg.alpha,
        episode_len: cfg.episode_len,
        mask_repeats,
        range: range(cfg)?,
    })
}

fn model_dims(cfg: &RunConfig) -> ModelDims {
    let mut dims = ModelDims::for_rewards(cfg.alpha, cfg.episode_len, cfg.onehot_len);
    dims.emb_dim = cfg.emb_dim;
    dims.sru_hidden = cfg.sru_hidden;
    dims.policy_hidden = cfg.policy_hidden.clone();
    dims
}

fn update_config(cfg: &RunConfig) -> UpdateConfig {
    UpdateConfig {
        learning_rate: cfg.learning_rate,
        gamma: cfg.gamma,
        baseline: cfg.baseline,
        clip_norm: (cfg.clip_norm > 0.0).then_some(cfg.clip_norm),
    }
}

fn load_tree(run: &Run) -> Result<Arc<ClusterTree>> {
    let path = run.upstream(TREE, "cluster")?;
    Ok(Arc::new(ClusterTree::read_binary(BufReader::new(File::open(path)?))?))
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn ingest(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| TpgrError::InvalidArgument("no dataset given (set dataset = PATH)".into()))?;
    if !path.is_file() {
        return Err(TpgrError::Format(format!("dataset {} not found", path.display())));
    }
    let ds = load_ratings(path, &cfg.separator, range(cfg)?, cfg.skip_header)?;
    if ds.n_users() < 2 {
        return Err(TpgrError::Format("dataset needs at least two users".into()));
    }
    // the split must be valid for the downstream commands
    splits(cfg, &ds)?;
    run.write_with(DATASET, |w| ds.write_log(w, "\t"))?;
    run.write_with("stats.csv", |w| dataset_stats(&ds).write_csv(w))
}

pub fn analyze(run: &mut Run) -> Result<()> {
    let ds = load_cached(run)?;
    let profile = consecutive_profile(&ds, run.cfg.positive_threshold(), run.cfg.profile_bmax)?;
    run.write_with("profile.csv", |w| profile.write_csv(w))?;
    run.write_with("stats.csv", |w| dataset_stats(&ds).write_csv(w))?;
    let trend = |t: Option<f64>| t.map_or(serde_json::Value::Null, |v| json!(v));
    run.write_json(
        "profile.json",
        &json!({
            "positive_threshold": run.cfg.positive_threshold(),
            "positive_trend": trend(profile.positive_trend()),
            "negative_trend": trend(profile.negative_trend()),
        }),
    )?;
    if run.cfg.plot_data {
        run.write_with("plot_profile.csv", |w| profile.write_csv(w))?;
    }
    Ok(())
}

pub fn cluster(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let ds = load_cached(run)?;
    let sp = splits(cfg, &ds)?;
    let rep = representation(cfg, &sp.train)?;
    if cfg.representation == Representation::MfBased {
        run.write_with("repr.txt", |w| rep.write_text(w))?;
    }
    let tree = ClusterTree::build(&rep, cfg.depth, cfg.cluster_method, cfg.seed)?;
    run.write_with(TREE, |w| tree.write_binary(w))?;
    run.write_json("tree.json", &tree.to_json())
}

pub fn train_cmd(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let ds = load_cached(run)?;
    let tree = load_tree(run)?;
    if tree.n_items() != ds.n_items() {
        return Err(TpgrError::Shape(format!(
            "tree covers {} items, dataset has {}",
            tree.n_items(),
            ds.n_items()
        )));
    }
    let sp = splits(cfg, &ds)?;
    let embeddings = match cfg.embedding {
        EmbeddingMode::Mf => Some(mf_item_representation(&mf_train(&sp.train, &mf_config(cfg))?).to_embeddings()?),
        EmbeddingMode::Random => None,
    };
    let model = init_model(tree, &model_dims(cfg), embeddings, cfg.seed)?;
    let sim_cfg = sim_config(cfg, cfg.mask_repeats)?;
    let train_sim = Simulator::new(&sp.train, sim_cfg)?;
    let valid_sim = sp.valid.as_ref().map(|v| Simulator::new(v, sim_cfg)).transpose()?;
    let tc = TrainConfig {
        episodes_per_step: cfg.episodes_per_step,
        max_steps: cfg.max_steps,
        eval_every: cfg.eval_every,
        patience: cfg.patience,
        min_delta: cfg.min_delta,
        greedy_eval: cfg.greedy_eval,
        update: update_config(cfg),
        seed: cfg.seed,
    };
    let (model, log) = train(&tc, &train_sim, valid_sim.as_ref(), model)?;
    run.write_with(MODEL, |w| model.write_checkpoint(w))?;
    run.write_with("train_log.csv", |w| log.write_csv(w))?;
    if cfg.plot_data {
        run.write_with("plot_train_reward.csv", |w| {
            writeln!(w, "step,avg_reward,eval_reward")?;
            for r in &log.rows {
                let eval = r.eval_reward.map(|v| format!("{v:.6}")).unwrap_or_default();
                writeln!(w, "{},{:.6},{eval}", r.step, r.avg_reward)?;
            }
            Ok(())
        })?;
    }
    let summary = json!({
        "tree": TREE,
        "tree_sha256": file_sha256(&run.path(TREE))?,
        "policy_nets": model.n_policy_nets(),
        "trainable_parameters": model.params.n_trainable(),
        "steps_run": log.rows.len(),
        "best_step": log.best_step,
        "best_eval_reward": log.best_eval,
    });
    run.write_json("train.json", &summary)
}

fn load_model(run: &Run, tree: Arc<ClusterTree>) -> Result<TpgrModel> {
    let path = run.upstream(MODEL, "train")?;
    TpgrModel::read_checkpoint(BufReader::new(File::open(path)?), tree)
}

pub fn eval_cmd(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let ds = load_cached(run)?;
    let tree = load_tree(run)?;
    let model = load_model(run, tree)?;
    let sp = splits(cfg, &ds)?;
    let test_sim = Simulator::new(&sp.test, sim_config(cfg, cfg.mask_repeats)?)?;
    let seed = cfg.seed.wrapping_add(2);
    let reports: Vec<EvalReport> = vec![
        evaluate(&TpgrPolicy { model: &model, greedy: cfg.greedy_eval }, &test_sim, cfg.k, cfg.eval_passes, seed)?,
        evaluate(&popularity_policy(&sp.train), &test_sim, cfg.k, cfg.eval_passes, seed)?,
        evaluate(&random_policy(cfg.seed), &test_sim, cfg.k, cfg.eval_passes, seed)?,
    ];
    let value = serde_json::to_value(&reports).map_err(|e| TpgrError::Format(e.to_string()))?;
    run.write_json("eval.json", &json!({ "greedy": cfg.greedy_eval, "reports": value }))?;
    run.write_with("eval.csv", |w| {
        writeln!(w, "{}", EvalReport::csv_header())?;
        for r in &reports {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    })
}

pub fn bench_cmd(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let ds = load_cached(run)?;
    let sp = splits(cfg, &ds)?;
    let rep = representation(cfg, &sp.train)?;
    // repeated recommendations are allowed while timing
    let sim = Simulator::new(&sp.train, sim_config(cfg, false)?)?;
    let bc = BenchConfig {
        depths: cfg.bench_depths.clone(),
        decisions: cfg.bench_decisions,
        episodes_per_step: cfg.bench_episodes,
        dims: model_dims(cfg),
        method: cfg.cluster_method,
        update: update_config(cfg),
        seed: cfg.seed,
    };
    let report = bench(&rep, &sim, &bc)?;
    run.write_with("bench.json", |w| {
        report.write_json(&mut *w)?;
        writeln!(w)?;
        Ok(())
    })?;
    run.write_with("bench.csv", |w| report.write_csv(w))?;
    if cfg.plot_data {
        run.write_with("plot_depth_time.csv", |w| {
            writeln!(w, "depth,seconds_per_training_step,seconds_per_million_decisions")?;
            for r in &report.rows {
                writeln!(w, "{},{:.6},{:.6}", r.depth, r.seconds_per_training_step, r.seconds_per_million_decisions)?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

/// Writes a synthetic `user::item::rating::timestamp` log.
pub fn synth(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let ds = match cfg.synth_kind {
        SynthKind::Planted => planted_world(&PlantedConfig {
            users: cfg.synth_users,
            items: cfg.synth_items,
            seed: cfg.seed,
            ..PlantedConfig::default()
        })?,
        SynthKind::Momentum => momentum_sessions(cfg.synth_users, 60, cfg.synth_items, cfg.seed)?,
    };
    run.write_with("synthetic.dat", |w| ds.write_log(w, "::"))
}
