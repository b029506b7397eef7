//! Offline evaluation (average reward, precision/recall/F1 at k), baseline
//! policies and the decision-cost benchmark.

use std::collections::HashSet;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{
    init_model, reinforce_update, run_episode, sample_batch, sample_path, Availability, ModelDims,
    TpgrModel, UpdateConfig,
};
use crate::cluster::{ClusterMethod, ClusterTree};
use crate::data::RatingDataset;
use crate::error::{Result, TpgrError};
use crate::neural::{macs, StateEncoder};
use crate::reprs::VectorSet;
use crate::simenv::{seed_stream, Simulator};

/// Native ratings strictly above this are relevant.
pub const RELEVANCE_THRESHOLD: f64 = 3.0;

/// Anything that can act for a whole episode.
pub trait Policy: Sync {
    fn name(&self) -> &str;

    /// Plays one episode for `user`; returns `(item, reward)` per step.
    fn rollout(&self, sim: &Simulator, user: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, f64)>>;
}

pub struct TpgrPolicy<'a> {
    pub model: &'a TpgrModel,
    pub greedy: bool,
}

impl Policy for TpgrPolicy<'_> {
    fn name(&self) -> &str {
        "tpgr"
    }

    fn rollout(&self, sim: &Simulator, user: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, f64)>> {
        Ok(run_episode(self.model, sim, user, rng, self.greedy)?.history())
    }
}

/// Fixed ranking by mean training rating; each step takes the best-ranked
/// item still available.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityPolicy {
    pub ranking: Vec<usize>,
}

pub fn popularity_policy(train: &RatingDataset) -> PopularityPolicy {
    let n = train.n_items();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for r in train.sessions().iter().flatten() {
        sum[r.item] += r.rating;
        count[r.item] += 1;
    }
    // unrated items score 0 and so rank after every rated one
    let avg: Vec<f64> = (0..n)
        .map(|i| if count[i] > 0 { sum[i] / count[i] as f64 } else { 0.0 })
        .collect();
    let mut ranking: Vec<usize> = (0..n).collect();
    ranking.sort_by(|&a, &b| avg[b].total_cmp(&avg[a]).then(a.cmp(&b)));
    PopularityPolicy { ranking }
}

impl Policy for PopularityPolicy {
    fn name(&self) -> &str {
        "popularity"
    }

    fn rollout(&self, sim: &Simulator, user: usize, _rng: &mut ChaCha8Rng) -> Result<Vec<(usize, f64)>> {
        let mut state = sim.reset_user(user)?;
        let mut cursor = 0;
        while !sim.done(&state) {
            while cursor < self.ranking.len() && !state.is_available(self.ranking[cursor]) {
                cursor += 1;
            }
            let item = *self.ranking.get(cursor).ok_or(TpgrError::EmptyPool)?;
            sim.step(&mut state, item)?;
        }
        Ok(state.history)
    }
}

/// Uniform over the available items.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomPolicy {
    pub seed: u64,
}

pub fn random_policy(seed: u64) -> RandomPolicy {
    RandomPolicy { seed }
}

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn rollout(&self, sim: &Simulator, user: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, f64)>> {
        let mut own = seed_stream(self.seed, rng.gen());
        let mut state = sim.reset_user(user)?;
        while !sim.done(&state) {
            let open: Vec<usize> = (0..sim.n_items()).filter(|&i| state.is_available(i)).collect();
            if open.is_empty() {
                return Err(TpgrError::EmptyPool);
            }
            let item = open[own.gen_range(0..open.len())];
            sim.step(&mut state, item)?;
        }
        Ok(state.history)
    }
}

/// Precision, and recall and F1 when the user has relevant items.
pub fn precision_recall_f1(
    recommended: &[usize],
    relevant: &HashSet<usize>,
    k: usize,
) -> (f64, Option<f64>, Option<f64>) {
    let distinct: HashSet<usize> = recommended.iter().take(k).copied().collect();
    let hits = distinct.iter().filter(|i| relevant.contains(i)).count() as f64;
    let p = hits / k as f64;
    if relevant.is_empty() {
        return (p, None, None);
    }
    let r = hits / relevant.len() as f64;
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, Some(r), Some(f1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub k: usize,
    pub alpha: f64,
    pub episodes: usize,
    /// Mean reward per recommendation.
    pub avg_reward: f64,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub f1_at_k: f64,
    /// Episodes whose user has at least one relevant item.
    pub recall_episodes: usize,
    pub seconds: f64,
    /// Mean reward per recommendation for each test user, over all passes.
    pub user_rewards: Vec<f64>,
}

impl EvalReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| TpgrError::Format(e.to_string()))
    }

    pub fn csv_header() -> &'static str {
        "policy,k,alpha,episodes,avg_reward,precision_at_k,recall_at_k,f1_at_k,seconds"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.policy,
            self.k,
            self.alpha,
            self.episodes,
            self.avg_reward,
            self.precision_at_k,
            self.recall_at_k,
            self.f1_at_k,
            self.seconds
        )
    }
}

struct UserOutcome {
    reward_sum: f64,
    steps: usize,
    precision: f64,
    recall: Option<f64>,
    f1: Option<f64>,
}

/// One episode per test user per pass. Metrics use the first `k`
/// recommendations.
pub fn evaluate(policy: &dyn Policy, sim: &Simulator, k: usize, passes: usize, seed: u64) -> Result<EvalReport> {
    let n_users = sim.n_users();
    if n_users == 0 {
        return Err(TpgrError::EmptyPool);
    }
    if k < 1 || k > sim.config().episode_len {
        return Err(TpgrError::invalid(format!(
            "k = {k} must be in 1..={}",
            sim.config().episode_len
        )));
    }
    if passes < 1 {
        return Err(TpgrError::invalid("at least one evaluation pass"));
    }
    let start = Instant::now();
    let relevant: Vec<HashSet<usize>> = (0..n_users)
        .map(|u| {
            sim.user_ratings(u)
                .iter()
                .filter(|e| e.1 > RELEVANCE_THRESHOLD)
                .map(|e| e.0)
                .collect()
        })
        .collect();
    let outcomes: Vec<Result<UserOutcome>> = (0..passes * n_users)
        .into_par_iter()
        .map(|job| {
            let user = job % n_users;
            let mut rng = seed_stream(seed, job as u64);
            let steps = policy.rollout(sim, user, &mut rng)?;
            let items: Vec<usize> = steps.iter().map(|s| s.0).collect();
            let (precision, recall, f1) = precision_recall_f1(&items, &relevant[user], k);
            Ok(UserOutcome {
                reward_sum: steps.iter().map(|s| s.1).sum(),
                steps: steps.len(),
                precision,
                recall,
                f1,
            })
        })
        .collect();

    let mut user_sum = vec![0.0; n_users];
    let mut user_steps = vec![0usize; n_users];
    let (mut reward, mut steps, mut p, mut r, mut f, mut rn) = (0.0, 0usize, 0.0, 0.0, 0.0, 0usize);
    for (job, o) in outcomes.into_iter().enumerate() {
        let o = o?;
        user_sum[job % n_users] += o.reward_sum;
        user_steps[job % n_users] += o.steps;
        reward += o.reward_sum;
        steps += o.steps;
        p += o.precision;
        if let (Some(rv), Some(fv)) = (o.recall, o.f1) {
            r += rv;
            f += fv;
            rn += 1;
        }
    }
    let episodes = passes * n_users;
    let mean = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
    Ok(EvalReport {
        policy: policy.name().to_string(),
        k,
        alpha: sim.config().alpha,
        episodes,
        avg_reward: mean(reward, steps),
        precision_at_k: mean(p, episodes),
        recall_at_k: mean(r, rn),
        f1_at_k: mean(f, rn),
        recall_episodes: rn,
        seconds: start.elapsed().as_secs_f64(),
        user_rewards: user_sum.iter().zip(&user_steps).map(|(&s, &n)| mean(s, n)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub depths: Vec<usize>,
    /// Decisions actually timed; the per-million figure is extrapolated.
    pub decisions: usize,
    pub episodes_per_step: usize,
    pub dims: ModelDims,
    pub method: ClusterMethod,
    pub update: UpdateConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub depth: usize,
    pub branching: usize,
    pub policy_nets: usize,
    pub macs_per_decision: u64,
    pub decisions_timed: usize,
    pub seconds_per_million_decisions: f64,
    pub seconds_per_training_step: f64,
    pub episodes_per_step: usize,
    pub checkpoint_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_items: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| TpgrError::Format(e.to_string()))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "depth,branching,policy_nets,macs_per_decision,seconds_per_million_decisions,seconds_per_training_step,checkpoint_bytes"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{:.6},{:.6},{}",
                r.depth,
                r.branching,
                r.policy_nets,
                r.macs_per_decision,
                r.seconds_per_million_decisions,
                r.seconds_per_training_step,
                r.checkpoint_bytes
            )?;
        }
        Ok(())
    }
}

/// Multiply-accumulates spent by one `sample_path` call from the empty state.
pub fn decision_macs(model: &TpgrModel) -> Result<u64> {
    let s = StateEncoder::new(&model.params).state(&model.encoder);
    let avail = Availability::full(&model.tree);
    let mut rng = seed_stream(0, 0);
    macs::reset();
    sample_path(model, &s, &avail, &mut rng, false)?;
    Ok(macs::read())
}

/// Times decisions and training steps for each depth on the same items,
/// seeds and network widths. Runs on a single thread. The simulator should
/// have repeat masking disabled.
pub fn bench<V: VectorSet + ?Sized>(rep: &V, sim: &Simulator, cfg: &BenchConfig) -> Result<BenchReport> {
    if rep.len() != sim.n_items() {
        return Err(TpgrError::Shape(format!(
            "{} item vectors for {} simulator items",
            rep.len(),
            sim.n_items()
        )));
    }
    if cfg.decisions < 1 || cfg.episodes_per_step < 1 {
        return Err(TpgrError::invalid("bench needs at least one decision and one episode"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| TpgrError::invalid(e.to_string()))?;
    let mut rows = Vec::with_capacity(cfg.depths.len());
    for &depth in &cfg.depths {
        let tree = Arc::new(ClusterTree::build(rep, depth, cfg.method, cfg.seed)?);
        let mut model = init_model(tree.clone(), &cfg.dims, None, cfg.seed)?;
        let macs_per_decision = decision_macs(&model)?;
        let row = pool.install(|| -> Result<BenchRow> {
            let s = StateEncoder::new(&model.params).state(&model.encoder);
            let avail = Availability::full(&tree);
            let mut rng = seed_stream(cfg.seed, 1);
            let start = Instant::now();
            for _ in 0..cfg.decisions {
                std::hint::black_box(sample_path(&model, &s, &avail, &mut rng, false)?);
            }
            let decide = start.elapsed().as_secs_f64();

            let start = Instant::now();
            let episodes = sample_batch(&model, sim, cfg.episodes_per_step, cfg.seed, 1)?;
            reinforce_update(&mut model, &episodes, &cfg.update)?;
            let step = start.elapsed().as_secs_f64();

            let mut buf = Vec::new();
            model.write_checkpoint(&mut buf)?;
            Ok(BenchRow {
                depth,
                branching: tree.branching(),
                policy_nets: model.n_policy_nets(),
                macs_per_decision,
                decisions_timed: cfg.decisions,
                seconds_per_million_decisions: (decide / cfg.decisions as f64 * 1e6).max(f64::MIN_POSITIVE),
                seconds_per_training_step: step.max(f64::MIN_POSITIVE),
                episodes_per_step: cfg.episodes_per_step,
                checkpoint_bytes: buf.len(),
            })
        })?;
        rows.push(row);
    }
    Ok(BenchReport {
        n_items: sim.n_items(),
        rows,
    })
}
