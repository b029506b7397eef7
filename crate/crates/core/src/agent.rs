//! The tree-structured policy: top-down path sampling, hierarchical action
//! probabilities, REINFORCE updates and the training loop.

use std::io::{Read, Write};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterTree;
use crate::error::{Result, TpgrError};
use crate::neural::{
    accumulate_logprob_grad, masked_softmax, Activation, Decision, Dense, EmbeddingTable,
    EncoderConfig, Level, Params, PolicyNet, SruParams, StateEncoder, StateVec, STATUS_WIDTH,
};
use crate::simenv::{seed_stream, Simulator};

const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Only used when no pre-trained embeddings are supplied.
    pub emb_dim: usize,
    pub sru_hidden: usize,
    pub policy_hidden: Vec<usize>,
    pub encoder: EncoderConfig,
}

impl ModelDims {
    /// One-hot range `(-(1 + alpha (n - 1)), 1 + alpha (n - 1)]`.
    pub fn for_rewards(alpha: f64, episode_len: usize, onehot_len: usize) -> Self {
        let bound = 1.0 + alpha * (episode_len as f64 - 1.0);
        ModelDims {
            emb_dim: 16,
            sru_hidden: 16,
            policy_hidden: vec![32, 16],
            encoder: EncoderConfig {
                onehot_len,
                reward_range: (-bound, bound),
                episode_len,
            },
        }
    }
}

/// Tree plus one policy network per internal node, in node-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct TpgrModel {
    pub tree: Arc<ClusterTree>,
    pub params: Params,
    pub encoder: EncoderConfig,
}

pub fn init_model(
    tree: Arc<ClusterTree>,
    dims: &ModelDims,
    embeddings: Option<EmbeddingTable>,
    seed: u64,
) -> Result<TpgrModel> {
    if dims.encoder.onehot_len < 1 || dims.sru_hidden < 1 || dims.encoder.episode_len < 1 {
        return Err(TpgrError::invalid("model dimensions must be positive"));
    }
    let (a, b) = dims.encoder.reward_range;
    if !(a < b) {
        return Err(TpgrError::invalid(format!("empty reward range ({a}, {b}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embeddings = match embeddings {
        Some(e) => {
            if e.n_items() != tree.n_items() {
                return Err(TpgrError::Shape(format!(
                    "{} embeddings for {} items",
                    e.n_items(),
                    tree.n_items()
                )));
            }
            e
        }
        None => EmbeddingTable::random(tree.n_items(), dims.emb_dim, &mut rng, INIT_SCALE),
    };
    let input = embeddings.dim + dims.encoder.onehot_len;
    let sru = SruParams::random(input, dims.sru_hidden, &mut rng, INIT_SCALE);
    let state = dims.sru_hidden + STATUS_WIDTH;
    let nets = tree
        .internal_nodes()
        .map(|node| {
            PolicyNet::random(node, state, &dims.policy_hidden, tree.branching(), &mut rng, INIT_SCALE)
        })
        .collect();
    Ok(TpgrModel {
        tree,
        params: Params { embeddings, sru, nets },
        encoder: dims.encoder,
    })
}

/// Per-node count of still-available leaves; removing an item touches only
/// its root path.
#[derive(Debug, Clone, PartialEq)]
pub struct Availability {
    counts: Vec<u32>,
}

impl Availability {
    pub fn full(tree: &ClusterTree) -> Self {
        Availability {
            counts: tree.leaf_counts().to_vec(),
        }
    }

    pub fn from_mask(tree: &ClusterTree, available: &[bool]) -> Self {
        let mut a = Self::full(tree);
        for (item, &ok) in available.iter().enumerate() {
            if !ok {
                a.remove(tree, item);
            }
        }
        a
    }

    pub fn is_available(&self, tree: &ClusterTree, item: usize) -> bool {
        tree.item_leaf(item).is_some_and(|leaf| self.counts[leaf] > 0)
    }

    pub fn remaining(&self) -> usize {
        self.counts.get(1).copied().unwrap_or(0) as usize
    }

    /// Marks `item` unavailable; no-op if it already is.
    pub fn remove(&mut self, tree: &ClusterTree, item: usize) {
        if !self.is_available(tree, item) {
            return;
        }
        let mut node = tree.item_leaf(item).expect("checked above");
        loop {
            self.counts[node] -= 1;
            match tree.parent(node) {
                Some(p) => node = p,
                None => break,
            }
        }
    }

    /// Children of `node` with at least one available leaf. `None` when all
    /// `c` outputs are selectable.
    pub fn child_mask(&self, tree: &ClusterTree, node: usize) -> Option<Vec<bool>> {
        let c = tree.branching();
        let kids = tree.child_count(node);
        let mut mask = vec![false; c];
        let mut all = kids == c;
        for (j, m) in mask.iter_mut().enumerate().take(kids) {
            *m = self.counts[tree.child(node, j + 1)] > 0;
            all &= *m;
        }
        (!all).then_some(mask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    /// 1-based choices from the root.
    pub choices: Vec<usize>,
    pub item: usize,
    /// Probability of each choice under its (masked) node policy.
    pub probs: Vec<f64>,
}

impl SampledPath {
    pub fn log_prob(&self) -> f64 {
        self.probs.iter().map(|p| p.ln()).sum()
    }

    pub fn prob(&self) -> f64 {
        self.probs.iter().product()
    }
}

fn net_index(model: &TpgrModel, node: usize) -> usize {
    model
        .tree
        .internal_rank(node)
        .expect("walk stays on internal nodes")
}

/// Walks from the root, sampling each child from the node policy with empty
/// subtrees masked out. `greedy` takes the most probable child instead.
pub fn sample_path<R: Rng + ?Sized>(
    model: &TpgrModel,
    s: &StateVec,
    avail: &Availability,
    rng: &mut R,
    greedy: bool,
) -> Result<SampledPath> {
    let tree = &*model.tree;
    if avail.remaining() == 0 {
        return Err(TpgrError::invalid("no available items"));
    }
    let mut node = 1;
    let mut choices = Vec::with_capacity(tree.depth());
    let mut probs = Vec::with_capacity(tree.depth());
    while tree.leaf_item(node).is_none() {
        let net = &model.params.nets[net_index(model, node)];
        let mask = avail.child_mask(tree, node);
        let p = masked_softmax(&net.forward(&s.0)?.logits, mask.as_deref())?;
        let j = if greedy { argmax(&p) } else { draw(&p, rng) };
        choices.push(j + 1);
        probs.push(p[j]);
        node = tree.child(node, j + 1);
    }
    Ok(SampledPath {
        choices,
        item: tree.leaf_item(node).expect("loop ends on a leaf"),
        probs,
    })
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
        .0
}

fn draw<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let mut u = rng.gen::<f64>();
    let mut last = 0;
    for (j, &pj) in p.iter().enumerate() {
        if pj > 0.0 {
            if u < pj {
                return j;
            }
            u -= pj;
            last = j;
        }
    }
    // rounding left a sliver past the last positive entry
    last
}

/// The softmax decisions that lead to `item`, with the masks in force.
pub fn path_levels(model: &TpgrModel, item: usize, avail: &Availability) -> Result<Vec<Level>> {
    let tree = &*model.tree;
    if !avail.is_available(tree, item) {
        return Err(TpgrError::Unavailable(item));
    }
    let path = tree.item_to_path(item)?;
    Ok(path
        .nodes
        .iter()
        .zip(&path.choices)
        .map(|(&node, &choice)| Level {
            net: net_index(model, node),
            choice: choice - 1,
            mask: avail.child_mask(tree, node),
        })
        .collect())
}

/// Product of the per-level masked probabilities along the item's path.
pub fn action_prob(model: &TpgrModel, s: &StateVec, item: usize, avail: &Availability) -> Result<f64> {
    let mut p = 1.0;
    for level in path_levels(model, item, avail)? {
        let probs = masked_softmax(
            &model.params.nets[level.net].forward(&s.0)?.logits,
            level.mask.as_deref(),
        )?;
        p *= probs[level.choice];
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub choices: Vec<usize>,
    pub item: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub user: usize,
    /// Whether recommended items were removed from the available set.
    pub masked: bool,
    pub steps: Vec<EpisodeStep>,
}

impl Episode {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn history(&self) -> Vec<(usize, f64)> {
        self.steps.iter().map(|s| (s.item, s.reward)).collect()
    }
}

/// Rolls out one episode against a freshly sampled user.
pub fn sample_episode<R: Rng + ?Sized>(
    model: &TpgrModel,
    sim: &Simulator,
    rng: &mut R,
    greedy: bool,
) -> Result<Episode> {
    let state = sim.reset(rng)?;
    run_episode(model, sim, state.user, rng, greedy)
}

/// Rolls out one episode for a given user.
pub fn run_episode<R: Rng + ?Sized>(
    model: &TpgrModel,
    sim: &Simulator,
    user: usize,
    rng: &mut R,
    greedy: bool,
) -> Result<Episode> {
    let tree = &*model.tree;
    if sim.n_items() != tree.n_items() {
        return Err(TpgrError::Shape(format!(
            "simulator has {} items, tree {}",
            sim.n_items(),
            tree.n_items()
        )));
    }
    let mask = sim.config().mask_repeats;
    let mut state = sim.reset_user(user)?;
    let mut enc = StateEncoder::new(&model.params);
    let mut avail = Availability::full(tree);
    let n = sim.config().episode_len;
    let mut steps = Vec::with_capacity(n);
    while !sim.done(&state) {
        let s = enc.state(&model.encoder);
        let path = sample_path(model, &s, &avail, rng, greedy)?;
        let reward = sim.step(&mut state, path.item)?;
        if mask {
            avail.remove(tree, path.item);
        }
        if state.t <= n {
            enc.push(&model.params, &model.encoder, path.item, reward)?;
        }
        steps.push(EpisodeStep {
            choices: path.choices,
            item: path.item,
            reward,
        });
    }
    Ok(Episode {
        user,
        masked: mask,
        steps,
    })
}

/// `Q_t = r_t + gamma Q_{t+1}`, `Q_n = r_n`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (q, &r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *q = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Plain REINFORCE, `Q - 0`.
    Zero,
    /// Subtract the batch mean of the returns.
    BatchMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub baseline: Baseline,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        UpdateConfig {
            learning_rate: 1e-3,
            gamma: 0.9,
            baseline: Baseline::Zero,
            clip_norm: Some(10.0),
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(TpgrError::invalid(format!("gamma {} not in [0, 1]", self.gamma)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TpgrError::invalid("learning rate must be positive"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(TpgrError::invalid("clip norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Norm of the accumulated gradient before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    /// `sum log pi * (Q - baseline)` on the batch.
    pub objective: f64,
}

/// Number of fixed reduction chunks; independent of the thread count so the
/// summation order, and therefore the result, never changes.
const GRAD_CHUNKS: usize = 16;

/// Accumulated REINFORCE gradient `sum_t grad log pi(a_t|s_t) (Q_t - b)` for
/// a batch, without applying it.
pub fn policy_gradient(model: &TpgrModel, episodes: &[Episode], cfg: &UpdateConfig) -> Result<(Params, f64)> {
    if episodes.is_empty() {
        return Err(TpgrError::invalid("no episodes to learn from"));
    }
    let returns: Vec<Vec<f64>> = episodes
        .iter()
        .map(|e| discounted_returns(&e.rewards(), cfg.gamma))
        .collect();
    let baseline = match cfg.baseline {
        Baseline::Zero => 0.0,
        Baseline::BatchMean => {
            let (sum, n) = returns
                .iter()
                .flatten()
                .fold((0.0, 0usize), |(s, n), q| (s + q, n + 1));
            sum / n.max(1) as f64
        }
    };
    let chunk = episodes.len().div_ceil(GRAD_CHUNKS);
    let partials: Vec<Result<(Params, f64)>> = episodes
        .par_chunks(chunk)
        .zip(returns.par_chunks(chunk))
        .map(|(eps, qs)| {
            let mut grad = model.params.zeros_like();
            let mut obj = 0.0;
            for (ep, q) in eps.iter().zip(qs) {
                obj += episode_gradient(model, ep, q, baseline, &mut grad)?;
            }
            Ok((grad, obj))
        })
        .collect();
    let mut total = model.params.zeros_like();
    let mut objective = 0.0;
    for part in partials {
        let (g, o) = part?;
        total.add_scaled(1.0, &g);
        objective += o;
    }
    Ok((total, objective))
}

fn episode_gradient(
    model: &TpgrModel,
    ep: &Episode,
    returns: &[f64],
    baseline: f64,
    grad: &mut Params,
) -> Result<f64> {
    let tree = &*model.tree;
    let mut avail = Availability::full(tree);
    let mut levels = Vec::with_capacity(ep.steps.len());
    for step in &ep.steps {
        levels.push(path_levels(model, step.item, &avail)?);
        if ep.masked {
            avail.remove(tree, step.item);
        }
    }
    let decisions: Vec<Decision<'_>> = levels
        .iter()
        .zip(returns)
        .enumerate()
        .map(|(t, (lv, q))| Decision {
            prefix: t,
            levels: lv,
            weight: q - baseline,
        })
        .collect();
    accumulate_logprob_grad(&model.params, &model.encoder, &ep.history(), &decisions, grad)
}

/// One gradient-ascent step on the accumulated REINFORCE gradient.
pub fn reinforce_update(model: &mut TpgrModel, episodes: &[Episode], cfg: &UpdateConfig) -> Result<UpdateStats> {
    cfg.validate()?;
    let (mut grad, objective) = policy_gradient(model, episodes, cfg)?;
    let grad_norm = grad.norm();
    if !grad_norm.is_finite() {
        return Err(TpgrError::Numeric(format!(
            "non-finite policy gradient (objective {objective})"
        )));
    }
    let mut clipped = false;
    if let Some(max) = cfg.clip_norm {
        if grad_norm > max {
            grad.scale(max / grad_norm);
            clipped = true;
        }
    }
    model.params.add_scaled(cfg.learning_rate, &grad);
    if !model.params.is_finite() {
        return Err(TpgrError::Numeric("parameters became non-finite".into()));
    }
    Ok(UpdateStats {
        grad_norm,
        clipped,
        objective,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes_per_step: usize,
    pub max_steps: usize,
    /// Evaluate on held-out users every this many steps.
    pub eval_every: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub greedy_eval: bool,
    pub update: UpdateConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes_per_step: 64,
            max_steps: 200,
            eval_every: 10,
            patience: 5,
            min_delta: 1e-4,
            greedy_eval: false,
            update: UpdateConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub episodes: usize,
    /// Mean reward per recommendation over the step's training episodes.
    pub avg_reward: f64,
    pub grad_norm: f64,
    pub seconds: f64,
    pub eval_reward: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub best_step: usize,
    pub best_eval: Option<f64>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,episodes,avg_reward,grad_norm,seconds,eval_reward")?;
        for r in &self.rows {
            let eval = r.eval_reward.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(
                w,
                "{},{},{:.6},{:.6},{:.3},{eval}",
                r.step, r.episodes, r.avg_reward, r.grad_norm, r.seconds
            )?;
        }
        Ok(())
    }
}

/// Samples a batch of episodes in parallel; episode `k` of step `step` uses
/// its own seed stream, so results do not depend on scheduling.
pub fn sample_batch(
    model: &TpgrModel,
    sim: &Simulator,
    count: usize,
    seed: u64,
    step: usize,
) -> Result<Vec<Episode>> {
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = seed_stream(seed, (step * count + k) as u64);
            sample_episode(model, sim, &mut rng, false)
        })
        .collect()
}

/// Mean reward per recommendation with one episode per pool user.
pub fn average_reward(model: &TpgrModel, sim: &Simulator, greedy: bool, seed: u64) -> Result<f64> {
    let per_user: Vec<Result<(f64, usize)>> = (0..sim.n_users())
        .into_par_iter()
        .map(|u| {
            let mut rng = seed_stream(seed, u as u64);
            let ep = run_episode(model, sim, u, &mut rng, greedy)?;
            Ok((ep.rewards().iter().sum(), ep.steps.len()))
        })
        .collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for r in per_user {
        let (s, k) = r?;
        sum += s;
        n += k;
    }
    if n == 0 {
        return Err(TpgrError::EmptyPool);
    }
    Ok(sum / n as f64)
}

/// REINFORCE training with patience-based early stopping on held-out reward.
/// Returns the best evaluated model (the last one without an evaluation
/// pool) and the step log.
pub fn train(
    cfg: &TrainConfig,
    train_sim: &Simulator,
    eval_sim: Option<&Simulator>,
    mut model: TpgrModel,
) -> Result<(TpgrModel, TrainLog)> {
    cfg.update.validate()?;
    if cfg.episodes_per_step < 1 {
        return Err(TpgrError::invalid("episodes per step must be at least 1"));
    }
    let mut log = TrainLog::default();
    if cfg.max_steps == 0 {
        return Ok((model, log));
    }
    let eval_seed = cfg.seed ^ 0xe7a1;
    let mut best: Option<(f64, TpgrModel)> = None;
    if let Some(sim) = eval_sim {
        let r = average_reward(&model, sim, cfg.greedy_eval, eval_seed)?;
        log.best_eval = Some(r);
        best = Some((r, model.clone()));
    }
    let mut bad_evals = 0;
    let start = Instant::now();
    for step in 1..=cfg.max_steps {
        let episodes = sample_batch(&model, train_sim, cfg.episodes_per_step, cfg.seed, step)?;
        let (reward_sum, count) = episodes
            .iter()
            .flat_map(|e| e.steps.iter())
            .fold((0.0, 0usize), |(s, n), st| (s + st.reward, n + 1));
        let stats = reinforce_update(&mut model, &episodes, &cfg.update)?;
        let mut row = LogRow {
            step,
            episodes: episodes.len(),
            avg_reward: reward_sum / count.max(1) as f64,
            grad_norm: stats.grad_norm,
            seconds: 0.0,
            eval_reward: None,
        };
        let mut stop = false;
        if let (Some(sim), true) = (eval_sim, cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            let r = average_reward(&model, sim, cfg.greedy_eval, eval_seed)?;
            row.eval_reward = Some(r);
            let best_r = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0);
            if r > best_r + cfg.min_delta {
                best = Some((r, model.clone()));
                log.best_step = step;
                log.best_eval = Some(r);
                bad_evals = 0;
            } else {
                bad_evals += 1;
                stop = cfg.patience > 0 && bad_evals >= cfg.patience;
            }
        }
        row.seconds = start.elapsed().as_secs_f64();
        log.rows.push(row);
        if stop {
            break;
        }
    }
    if eval_sim.is_none() {
        log.best_step = log.rows.len();
    }
    let model = match best {
        Some((_, m)) => m,
        None => model,
    };
    Ok((model, log))
}

const MODEL_MAGIC: &[u8] = b"TPGRMODEL\x01";

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| TpgrError::Format(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_tensor<W: Write>(w: &mut W, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    debug_assert_eq!(rows * cols, data.len());
    put_u32(w, rows)?;
    put_u32(w, cols)?;
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<usize> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    }

    fn f32(&mut self) -> Result<f64> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b) as f64)
    }

    fn tag(&mut self, want: &[u8; 4]) -> Result<()> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        if &b != want {
            return Err(TpgrError::Format(format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(want),
                String::from_utf8_lossy(&b)
            )));
        }
        Ok(())
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Vec<f64>> {
        let (r, c) = (self.u32()?, self.u32()?);
        if (r, c) != (rows, cols) {
            return Err(TpgrError::Format(format!(
                "tensor shape {r}x{c}, expected {rows}x{cols}"
            )));
        }
        (0..r * c).map(|_| self.f32()).collect()
    }
}

impl TpgrModel {
    pub fn n_policy_nets(&self) -> usize {
        self.params.nets.len()
    }

    /// Checkpoint layout after the magic: sections `META`, `EMBD`, `SRU_`,
    /// `NETS`, each tagged with four ASCII bytes. Integers are u32 and values
    /// f32, little-endian; every tensor carries a `rows, cols` header.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let w = &mut w;
        w.write_all(MODEL_MAGIC)?;
        let enc = &self.encoder;
        w.write_all(b"META")?;
        put_u32(w, self.tree.n_items())?;
        put_u32(w, self.tree.depth())?;
        put_u32(w, self.tree.branching())?;
        put_u32(w, enc.onehot_len)?;
        put_u32(w, enc.episode_len)?;
        w.write_all(&(enc.reward_range.0 as f32).to_le_bytes())?;
        w.write_all(&(enc.reward_range.1 as f32).to_le_bytes())?;

        let e = &self.params.embeddings;
        w.write_all(b"EMBD")?;
        put_u32(w, e.trainable as usize)?;
        put_tensor(w, e.n_items(), e.dim, &e.data)?;

        let s = &self.params.sru;
        w.write_all(b"SRU_")?;
        put_tensor(w, s.hidden, s.input, &s.w)?;
        put_tensor(w, s.hidden, s.input, &s.w_f)?;
        put_tensor(w, s.hidden, 1, &s.b_f)?;
        put_tensor(w, s.hidden, s.input, &s.w_r)?;
        put_tensor(w, s.hidden, 1, &s.b_r)?;
        put_tensor(w, s.hidden, s.input, &s.w_h)?;

        w.write_all(b"NETS")?;
        put_u32(w, self.params.nets.len())?;
        for net in &self.params.nets {
            put_u32(w, net.node)?;
            put_u32(w, matches!(net.activation, Activation::Relu) as usize)?;
            put_u32(w, net.layers.len())?;
            for l in &net.layers {
                put_tensor(w, l.outputs, l.inputs, &l.w)?;
                put_tensor(w, l.outputs, 1, &l.b)?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R, tree: Arc<ClusterTree>) -> Result<Self> {
        let mut rd = Reader { inner: r };
        let mut magic = [0u8; 10];
        rd.inner.read_exact(&mut magic)?;
        if magic != MODEL_MAGIC {
            return Err(TpgrError::Format("not a model checkpoint (bad magic)".into()));
        }
        rd.tag(b"META")?;
        let (n_items, depth, branching) = (rd.u32()?, rd.u32()?, rd.u32()?);
        if (n_items, depth, branching) != (tree.n_items(), tree.depth(), tree.branching()) {
            return Err(TpgrError::Format(format!(
                "checkpoint built for a tree with {n_items} items, d={depth}, c={branching}"
            )));
        }
        let onehot_len = rd.u32()?;
        let episode_len = rd.u32()?;
        let reward_range = (rd.f32()?, rd.f32()?);
        let encoder = EncoderConfig {
            onehot_len,
            reward_range,
            episode_len,
        };

        rd.tag(b"EMBD")?;
        let trainable = rd.u32()? != 0;
        let (rows, dim) = (rd.u32()?, rd.u32()?);
        if rows != n_items {
            return Err(TpgrError::Format(format!("{rows} embeddings for {n_items} items")));
        }
        let data = (0..rows * dim).map(|_| rd.f32()).collect::<Result<Vec<_>>>()?;
        let embeddings = EmbeddingTable { dim, data, trainable };

        rd.tag(b"SRU_")?;
        let (hidden, input) = (rd.u32()?, rd.u32()?);
        if input != dim + onehot_len {
            return Err(TpgrError::Format(format!(
                "sru input {input} does not match embedding {dim} + one-hot {onehot_len}"
            )));
        }
        let w = (0..hidden * input).map(|_| rd.f32()).collect::<Result<Vec<_>>>()?;
        let w_f = rd.tensor(hidden, input)?;
        let b_f = rd.tensor(hidden, 1)?;
        let w_r = rd.tensor(hidden, input)?;
        let b_r = rd.tensor(hidden, 1)?;
        let w_h = rd.tensor(hidden, input)?;
        let sru = SruParams { input, hidden, w, w_f, b_f, w_r, b_r, w_h };

        rd.tag(b"NETS")?;
        let count = rd.u32()?;
        if count != tree.n_internal() {
            return Err(TpgrError::Format(format!(
                "{count} policy nets for {} internal nodes",
                tree.n_internal()
            )));
        }
        let mut nets = Vec::with_capacity(count);
        for expected in tree.internal_nodes().collect::<Vec<_>>() {
            let node = rd.u32()?;
            if node != expected {
                return Err(TpgrError::Format(format!("net for node {node}, expected {expected}")));
            }
            let activation = if rd.u32()? == 1 { Activation::Relu } else { Activation::Tanh };
            let n_layers = rd.u32()?;
            let mut layers = Vec::with_capacity(n_layers);
            let mut prev = hidden + STATUS_WIDTH;
            for _ in 0..n_layers {
                let (outputs, inputs) = (rd.u32()?, rd.u32()?);
                if inputs != prev {
                    return Err(TpgrError::Format(format!("layer input {inputs}, expected {prev}")));
                }
                let w = (0..outputs * inputs).map(|_| rd.f32()).collect::<Result<Vec<_>>>()?;
                let b = rd.tensor(outputs, 1)?;
                layers.push(Dense { inputs, outputs, w, b });
                prev = outputs;
            }
            if prev != branching {
                return Err(TpgrError::Format(format!("net output {prev}, expected {branching}")));
            }
            nets.push(PolicyNet { node, activation, layers });
        }
        Ok(TpgrModel {
            tree,
            params: Params { embeddings, sru, nets },
            encoder,
        })
    }
}
