//! Differentiable pieces of the policy: item embeddings, reward one-hot
//! coding, the SRU history encoder, user-status statistics and the per-node
//! softmax networks. Gradients are derived by hand for this fixed
//! architecture.
//!
//! SRU recurrence, per step with input `x`:
//!
//! ```text
//! x~ = W x
//! f  = sigmoid(W_f x + b_f)
//! r  = sigmoid(W_r x + b_r)
//! c  = f * c_prev + (1 - f) * x~
//! h  = r * tanh(c) + (1 - r) * (W_h x)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TpgrError};

/// Thread-local multiply-accumulate counter for dense products.
pub mod macs {
    use std::cell::Cell;

    thread_local! {
        static COUNT: Cell<u64> = const { Cell::new(0) };
    }

    pub fn reset() {
        COUNT.with(|c| c.set(0));
    }

    pub fn read() -> u64 {
        COUNT.with(Cell::get)
    }

    #[inline]
    pub(crate) fn add(n: usize) {
        COUNT.with(|c| c.set(c.get() + n as u64));
    }
}

/// Number of user-status statistics appended to the SRU state.
pub const STATUS_WIDTH: usize = 4;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn uniform_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..=scale)).collect()
}

/// `out = W x` for a row-major `rows x cols` matrix.
#[inline]
fn matvec(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    macs::add(w.len());
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `dx += W^T dy`
#[inline]
fn matvec_t_acc(w: &[f64], cols: usize, dy: &[f64], dx: &mut [f64]) {
    for (row, &g) in w.chunks_exact(cols).zip(dy) {
        if g != 0.0 {
            for (d, a) in dx.iter_mut().zip(row) {
                *d += a * g;
            }
        }
    }
}

/// `G += dy x^T`
#[inline]
fn outer_acc(g: &mut [f64], cols: usize, dy: &[f64], x: &[f64]) {
    for (row, &d) in g.chunks_exact_mut(cols).zip(dy) {
        if d != 0.0 {
            for (a, b) in row.iter_mut().zip(x) {
                *a += d * b;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub data: Vec<f64>,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn random<R: Rng + ?Sized>(n_items: usize, dim: usize, rng: &mut R, scale: f64) -> Self {
        EmbeddingTable {
            dim,
            data: uniform_vec(rng, n_items * dim, scale),
            trainable: true,
        }
    }

    /// Wraps pre-trained rows (e.g. item factors), frozen by default.
    pub fn pretrained(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(TpgrError::Shape(format!(
                "{} values do not form embeddings of width {dim}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TpgrError::Numeric("non-finite embedding".into()));
        }
        Ok(EmbeddingTable {
            dim,
            data,
            trainable: false,
        })
    }

    pub fn n_items(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn row(&self, item: usize) -> &[f64] {
        &self.data[item * self.dim..(item + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SruParams {
    pub input: usize,
    pub hidden: usize,
    pub w: Vec<f64>,
    pub w_f: Vec<f64>,
    pub b_f: Vec<f64>,
    pub w_r: Vec<f64>,
    pub b_r: Vec<f64>,
    pub w_h: Vec<f64>,
}

/// Intermediate values of one SRU step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SruCache {
    pub x: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub x_tilde: Vec<f64>,
    pub f: Vec<f64>,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl SruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let m = input * hidden;
        SruParams {
            input,
            hidden,
            w: vec![0.0; m],
            w_f: vec![0.0; m],
            b_f: vec![0.0; hidden],
            w_r: vec![0.0; m],
            b_r: vec![0.0; hidden],
            w_h: vec![0.0; m],
        }
    }

    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R, scale: f64) -> Self {
        let m = input * hidden;
        SruParams {
            input,
            hidden,
            w: uniform_vec(rng, m, scale),
            w_f: uniform_vec(rng, m, scale),
            b_f: uniform_vec(rng, hidden, scale),
            w_r: uniform_vec(rng, m, scale),
            b_r: uniform_vec(rng, hidden, scale),
            w_h: uniform_vec(rng, m, scale),
        }
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [&self.w, &self.w_f, &self.b_f, &self.w_r, &self.b_r, &self.w_h]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w,
            &mut self.w_f,
            &mut self.b_f,
            &mut self.w_r,
            &mut self.b_r,
            &mut self.w_h,
        ]
    }

    pub fn forward(&self, x: &[f64], c_prev: &[f64]) -> Result<SruCache> {
        if x.len() != self.input || c_prev.len() != self.hidden {
            return Err(TpgrError::Shape(format!(
                "sru expects input {} and cell {}, got {} and {}",
                self.input,
                self.hidden,
                x.len(),
                c_prev.len()
            )));
        }
        let (n, k) = (self.hidden, self.input);
        let mut x_tilde = vec![0.0; n];
        let mut f = vec![0.0; n];
        let mut r = vec![0.0; n];
        let mut g = vec![0.0; n];
        matvec(&self.w, k, x, &mut x_tilde);
        matvec(&self.w_f, k, x, &mut f);
        matvec(&self.w_r, k, x, &mut r);
        matvec(&self.w_h, k, x, &mut g);
        let mut c = vec![0.0; n];
        let mut tanh_c = vec![0.0; n];
        let mut h = vec![0.0; n];
        for j in 0..n {
            f[j] = sigmoid(f[j] + self.b_f[j]);
            r[j] = sigmoid(r[j] + self.b_r[j]);
            c[j] = f[j] * c_prev[j] + (1.0 - f[j]) * x_tilde[j];
            tanh_c[j] = c[j].tanh();
            h[j] = r[j] * tanh_c[j] + (1.0 - r[j]) * g[j];
        }
        Ok(SruCache {
            x: x.to_vec(),
            c_prev: c_prev.to_vec(),
            x_tilde,
            f,
            r,
            c,
            tanh_c,
            g,
            h,
        })
    }

    /// Backward through one step. `dh` and `dc` are the loss gradients with
    /// respect to this step's outputs; returns `(dx, dc_prev)` and adds the
    /// parameter gradients into `grad`.
    pub fn backward(
        &self,
        cache: &SruCache,
        dh: &[f64],
        dc: &[f64],
        grad: &mut SruParams,
    ) -> (Vec<f64>, Vec<f64>) {
        let (n, k) = (self.hidden, self.input);
        let mut dx_tilde = vec![0.0; n];
        let mut dzf = vec![0.0; n];
        let mut dzr = vec![0.0; n];
        let mut dg = vec![0.0; n];
        let mut dc_prev = vec![0.0; n];
        for j in 0..n {
            let (f, r, t) = (cache.f[j], cache.r[j], cache.tanh_c[j]);
            let dct = dc[j] + dh[j] * r * (1.0 - t * t);
            dzr[j] = dh[j] * (t - cache.g[j]) * r * (1.0 - r);
            dg[j] = dh[j] * (1.0 - r);
            dzf[j] = dct * (cache.c_prev[j] - cache.x_tilde[j]) * f * (1.0 - f);
            dx_tilde[j] = dct * (1.0 - f);
            dc_prev[j] = dct * f;
        }
        let x = &cache.x;
        outer_acc(&mut grad.w, k, &dx_tilde, x);
        outer_acc(&mut grad.w_f, k, &dzf, x);
        outer_acc(&mut grad.w_r, k, &dzr, x);
        outer_acc(&mut grad.w_h, k, &dg, x);
        for j in 0..n {
            grad.b_f[j] += dzf[j];
            grad.b_r[j] += dzr[j];
        }
        let mut dx = vec![0.0; k];
        matvec_t_acc(&self.w, k, &dx_tilde, &mut dx);
        matvec_t_acc(&self.w_f, k, &dzf, &mut dx);
        matvec_t_acc(&self.w_r, k, &dzr, &mut dx);
        matvec_t_acc(&self.w_h, k, &dg, &mut dx);
        (dx, dc_prev)
    }
}

pub fn sru_step(p: &SruParams, x: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let cache = p.forward(x, c_prev)?;
    Ok((cache.h, cache.c))
}

/// 1-based one-hot position of reward `r` over `(a, b]` with `l` slots:
/// `l - floor(l (b - r) / (b - a))`.
pub fn reward_index(r: f64, range: (f64, f64), l: usize) -> Result<usize> {
    let (a, b) = range;
    if l < 1 || !(a < b) {
        return Err(TpgrError::invalid(format!("bad reward coding ({a}, {b}] x {l}")));
    }
    if !(r > a && r <= b) {
        return Err(TpgrError::invalid(format!("reward {r} outside ({a}, {b}]")));
    }
    Ok(clamped_index(r, a, b, l))
}

fn clamped_index(r: f64, a: f64, b: f64, l: usize) -> usize {
    let k = (l as f64 * (b - r) / (b - a)).floor();
    let k = if k.is_nan() { 0.0 } else { k.clamp(0.0, l as f64 - 1.0) };
    l - k as usize
}

pub fn reward_to_onehot(r: f64, range: (f64, f64), l: usize) -> Result<Vec<f64>> {
    let idx = reward_index(r, range, l)?;
    let mut v = vec![0.0; l];
    v[idx - 1] = 1.0;
    Ok(v)
}

/// `(positives, non-positives, current positive run, current non-positive
/// run)`, each divided by the episode length.
pub fn user_status(rewards: &[f64], episode_len: usize) -> [f64; STATUS_WIDTH] {
    let raw = user_status_counts(rewards);
    let scale = 1.0 / episode_len.max(1) as f64;
    raw.map(|v| v as f64 * scale)
}

pub fn user_status_counts(rewards: &[f64]) -> [usize; STATUS_WIDTH] {
    let mut s = [0usize; STATUS_WIDTH];
    for &r in rewards {
        if r > 0.0 {
            s[0] += 1;
            s[2] += 1;
            s[3] = 0;
        } else {
            s[1] += 1;
            s[3] += 1;
            s[2] = 0;
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => (y > 0.0) as u8 as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.outputs];
        matvec(&self.w, self.inputs, x, &mut out);
        for (o, b) in out.iter_mut().zip(&self.b) {
            *o += b;
        }
        out
    }
}

/// Fully connected network ending in `c` logits, owned by one tree node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub node: usize,
    pub activation: Activation,
    pub layers: Vec<Dense>,
}

/// Layer inputs and activations of one forward pass.
#[derive(Debug, Clone)]
pub struct NetCache {
    /// `acts[0]` is the input; `acts[k]` the output of hidden layer `k`.
    acts: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl PolicyNet {
    pub fn zeros(node: usize, input: usize, hidden: &[usize], outputs: usize) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(outputs);
        PolicyNet {
            node,
            activation: Activation::Tanh,
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(
        node: usize,
        input: usize,
        hidden: &[usize],
        outputs: usize,
        rng: &mut R,
        scale: f64,
    ) -> Self {
        let mut net = Self::zeros(node, input, hidden, outputs);
        for l in &mut net.layers {
            l.w = uniform_vec(rng, l.w.len(), scale);
            l.b = uniform_vec(rng, l.b.len(), scale);
        }
        net
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn zeros_like(&self) -> Self {
        PolicyNet {
            node: self.node,
            activation: self.activation,
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn forward(&self, s: &[f64]) -> Result<NetCache> {
        if s.len() != self.input_width() {
            return Err(TpgrError::Shape(format!(
                "policy net expects state width {}, got {}",
                self.input_width(),
                s.len()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(s.to_vec());
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            let mut z = layer.forward(acts.last().expect("input pushed"));
            z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            acts.push(z);
        }
        let logits = self.layers[last].forward(acts.last().expect("input pushed"));
        Ok(NetCache { acts, logits })
    }

    /// Backpropagates `dlogits`; adds parameter gradients into `grad` and,
    /// when requested, the input gradient into `ds`.
    pub fn backward(&self, cache: &NetCache, dlogits: &[f64], grad: &mut PolicyNet, ds: Option<&mut [f64]>) {
        let mut dy = dlogits.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let x = &cache.acts[k];
            let gl = &mut grad.layers[k];
            outer_acc(&mut gl.w, layer.inputs, &dy, x);
            for (b, d) in gl.b.iter_mut().zip(&dy) {
                *b += d;
            }
            if k == 0 {
                if let Some(ds) = ds {
                    matvec_t_acc(&layer.w, layer.inputs, &dy, ds);
                }
                break;
            }
            let mut dx = vec![0.0; layer.inputs];
            matvec_t_acc(&layer.w, layer.inputs, &dy, &mut dx);
            for (d, &y) in dx.iter_mut().zip(x) {
                *d *= self.activation.grad_from_output(y);
            }
            dy = dx;
        }
    }
}

/// Softmax over unmasked logits; masked entries get exactly zero.
pub fn masked_softmax(logits: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let allowed = |j: usize| mask.is_none_or(|m| m.get(j).copied().unwrap_or(false));
    let mut live = logits.iter().enumerate().filter(|&(j, _)| allowed(j)).map(|(_, &z)| z).peekable();
    if live.peek().is_none() {
        return Err(TpgrError::invalid("every child of the node is masked"));
    }
    let mut max = f64::NEG_INFINITY;
    for z in live {
        if z.is_nan() {
            return Err(TpgrError::Numeric("non-finite policy logits".into()));
        }
        max = max.max(z);
    }
    if !max.is_finite() {
        return Err(TpgrError::Numeric("non-finite policy logits".into()));
    }
    let mut p: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, &z)| if allowed(j) { (z - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = p.iter().sum();
    if !sum.is_finite() {
        return Err(TpgrError::Numeric("non-finite policy logits".into()));
    }
    p.iter_mut().for_each(|v| *v /= sum);
    Ok(p)
}

pub fn policy_forward(net: &PolicyNet, s: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    masked_softmax(&net.forward(s)?.logits, mask)
}

/// Reward coding and status scaling shared by every state encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub onehot_len: usize,
    /// Half-open `(a, b]` reward interval for the one-hot coding.
    pub reward_range: (f64, f64),
    pub episode_len: usize,
}

impl EncoderConfig {
    /// Rewards at or below `a` fall into the lowest slot; with `alpha = 0`
    /// the minimum reward equals `a` exactly.
    pub fn onehot_index(&self, r: f64) -> usize {
        let (a, b) = self.reward_range;
        clamped_index(r.min(b), a, b, self.onehot_len)
    }
}

/// All trainable parameters: embeddings, SRU and one net per internal node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub embeddings: EmbeddingTable,
    pub sru: SruParams,
    pub nets: Vec<PolicyNet>,
}

impl Params {
    pub fn state_width(&self) -> usize {
        self.sru.hidden + STATUS_WIDTH
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            embeddings: EmbeddingTable {
                dim: self.embeddings.dim,
                data: if self.embeddings.trainable {
                    vec![0.0; self.embeddings.data.len()]
                } else {
                    Vec::new()
                },
                trainable: self.embeddings.trainable,
            },
            sru: SruParams::zeros(self.sru.input, self.sru.hidden),
            nets: self.nets.iter().map(PolicyNet::zeros_like).collect(),
        }
    }

    /// Every tensor in a fixed order; frozen embeddings are left out.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if self.embeddings.trainable {
            out.push(&self.embeddings.data);
        }
        out.extend(self.sru.tensors());
        for net in &self.nets {
            for l in &net.layers {
                out.push(&l.w);
                out.push(&l.b);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        if self.embeddings.trainable {
            out.push(&mut self.embeddings.data);
        }
        out.extend(self.sru.tensors_mut());
        for net in &mut self.nets {
            for l in &mut net.layers {
                out.push(&mut l.w);
                out.push(&mut l.b);
            }
        }
        out
    }

    pub fn n_trainable(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += alpha * other` over trainable tensors.
    pub fn add_scaled(&mut self, alpha: f64, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn sru_input(&self, cfg: &EncoderConfig, item: usize, reward: f64) -> Result<Vec<f64>> {
        if item >= self.embeddings.n_items() {
            return Err(TpgrError::UnknownItem(item));
        }
        let mut x = Vec::with_capacity(self.sru.input);
        x.extend_from_slice(self.embeddings.row(item));
        let mut onehot = vec![0.0; cfg.onehot_len];
        onehot[cfg.onehot_index(reward) - 1] = 1.0;
        x.extend(onehot);
        Ok(x)
    }
}

/// State vector: final SRU hidden state followed by the user status.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVec(pub Vec<f64>);

/// Incremental encoder used while acting: one SRU step per observed
/// `(item, reward)`.
#[derive(Debug, Clone)]
pub struct StateEncoder {
    cell: Vec<f64>,
    hidden: Vec<f64>,
    rewards: Vec<f64>,
}

impl StateEncoder {
    pub fn new(params: &Params) -> Self {
        StateEncoder {
            cell: vec![0.0; params.sru.hidden],
            hidden: vec![0.0; params.sru.hidden],
            rewards: Vec::new(),
        }
    }

    pub fn push(&mut self, params: &Params, cfg: &EncoderConfig, item: usize, reward: f64) -> Result<()> {
        let x = params.sru_input(cfg, item, reward)?;
        let cache = params.sru.forward(&x, &self.cell)?;
        self.cell = cache.c;
        self.hidden = cache.h;
        self.rewards.push(reward);
        Ok(())
    }

    pub fn state(&self, cfg: &EncoderConfig) -> StateVec {
        let mut s = self.hidden.clone();
        s.extend(user_status(&self.rewards, cfg.episode_len));
        StateVec(s)
    }
}

pub fn encode_state(params: &Params, cfg: &EncoderConfig, history: &[(usize, f64)]) -> Result<StateVec> {
    let mut enc = StateEncoder::new(params);
    for &(item, reward) in history {
        enc.push(params, cfg, item, reward)?;
    }
    Ok(enc.state(cfg))
}

/// One softmax choice on the way down the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    /// Index into `Params::nets`.
    pub net: usize,
    /// 0-based child choice.
    pub choice: usize,
    pub mask: Option<Vec<bool>>,
}

/// A weighted log-probability term: the decision taken in the state that
/// encodes `history[..prefix]`.
#[derive(Debug, Clone)]
pub struct Decision<'a> {
    pub prefix: usize,
    pub levels: &'a [Level],
    pub weight: f64,
}

/// Adds `sum_k weight_k * grad log pi(decision_k)` into `grad` and returns
/// `sum_k weight_k * log pi(decision_k)`. The history is encoded once and the
/// state gradients of all decisions flow back through a single BPTT pass.
pub fn accumulate_logprob_grad(
    params: &Params,
    cfg: &EncoderConfig,
    history: &[(usize, f64)],
    decisions: &[Decision<'_>],
    grad: &mut Params,
) -> Result<f64> {
    let steps = decisions.iter().map(|d| d.prefix).max().unwrap_or(0);
    if steps > history.len() {
        return Err(TpgrError::invalid("decision prefix beyond history"));
    }
    let h = params.sru.hidden;
    let mut caches: Vec<SruCache> = Vec::with_capacity(steps);
    let mut cell = vec![0.0; h];
    let mut items = Vec::with_capacity(steps);
    for &(item, reward) in &history[..steps] {
        let x = params.sru_input(cfg, item, reward)?;
        let cache = params.sru.forward(&x, &cell)?;
        cell = cache.c.clone();
        caches.push(cache);
        items.push(item);
    }
    let rewards: Vec<f64> = history.iter().map(|e| e.1).collect();

    // dh[k] collects the gradient at the hidden state after k steps
    let mut dh = vec![vec![0.0; h]; steps + 1];
    let mut objective = 0.0;
    for d in decisions {
        if d.weight == 0.0 {
            continue;
        }
        let mut s = if d.prefix == 0 {
            vec![0.0; h]
        } else {
            caches[d.prefix - 1].h.clone()
        };
        s.extend(user_status(&rewards[..d.prefix], cfg.episode_len));
        let mut ds = vec![0.0; s.len()];
        for level in d.levels {
            let net = &params.nets[level.net];
            let cache = net.forward(&s)?;
            let p = masked_softmax(&cache.logits, level.mask.as_deref())?;
            let pc = p[level.choice];
            if pc <= 0.0 {
                return Err(TpgrError::Numeric(format!(
                    "choice {} has zero probability",
                    level.choice
                )));
            }
            objective += d.weight * pc.ln();
            let dlogits: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(j, &pj)| d.weight * (((j == level.choice) as u8 as f64) - pj))
                .collect();
            net.backward(&cache, &dlogits, &mut grad.nets[level.net], Some(&mut ds));
        }
        for (a, b) in dh[d.prefix].iter_mut().zip(&ds[..h]) {
            *a += b;
        }
    }

    let mut dc = vec![0.0; h];
    let emb_dim = params.embeddings.dim;
    for k in (0..steps).rev() {
        let (dx, dc_prev) = params.sru.backward(&caches[k], &dh[k + 1], &dc, &mut grad.sru);
        if params.embeddings.trainable {
            let item = items[k];
            let row = &mut grad.embeddings.data[item * emb_dim..(item + 1) * emb_dim];
            for (g, v) in row.iter_mut().zip(&dx[..emb_dim]) {
                *g += v;
            }
        }
        dc = dc_prev;
    }
    Ok(objective)
}

/// Gradient of `log pi(path | s)` where `s` encodes the whole `history`.
pub fn backprop_logprob(
    params: &Params,
    cfg: &EncoderConfig,
    history: &[(usize, f64)],
    levels: &[Level],
) -> Result<(f64, Params)> {
    let mut grad = params.zeros_like();
    let logp = accumulate_logprob_grad(
        params,
        cfg,
        history,
        &[Decision {
            prefix: history.len(),
            levels,
            weight: 1.0,
        }],
        &mut grad,
    )?;
    Ok((logp, grad))
}

/// `sum_levels log p(choice)` without gradients.
pub fn path_logprob(params: &Params, s: &[f64], levels: &[Level]) -> Result<f64> {
    let mut total = 0.0;
    for level in levels {
        let p = policy_forward(&params.nets[level.net], s, level.mask.as_deref())?;
        total += p[level.choice].ln();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn onehot_by_hand() {
        assert_eq!(reward_index(1.0, (-1.0, 1.0), 8).unwrap(), 8);
        assert_eq!(reward_index(0.0, (-1.0, 1.0), 8).unwrap(), 4);
        assert_eq!(reward_index(0.1, (-1.0, 1.0), 8).unwrap(), 5);
        assert_eq!(reward_index(-0.999, (-1.0, 1.0), 8).unwrap(), 1);
        assert!(reward_index(-1.0, (-1.0, 1.0), 8).is_err());
        assert!(reward_index(1.01, (-1.0, 1.0), 8).is_err());
        let v = reward_to_onehot(0.1, (-1.0, 1.0), 8).unwrap();
        assert_eq!(v.iter().sum::<f64>(), 1.0);
        assert_eq!(v[4], 1.0);
        let cfg = EncoderConfig {
            onehot_len: 8,
            reward_range: (-1.0, 1.0),
            episode_len: 4,
        };
        assert_eq!(cfg.onehot_index(-1.0), 1);
        assert_eq!(cfg.onehot_index(-5.0), 1);
        assert_eq!(cfg.onehot_index(5.0), 8);
    }

    #[test]
    fn sru_hand_cases() {
        let p = SruParams::zeros(3, 2);
        let (h, c) = sru_step(&p, &[0.0; 3], &[0.0; 2]).unwrap();
        assert_eq!((h, c), (vec![0.0; 2], vec![0.0; 2]));
        let (_, c) = sru_step(&p, &[1.0, 2.0, 3.0], &[0.4, -2.0]).unwrap();
        assert_eq!(c, vec![0.2, -1.0]);
        assert!(sru_step(&p, &[1.0], &[0.0; 2]).is_err());
    }

    #[test]
    fn status_counts_by_hand() {
        assert_eq!(user_status(&[], 32), [0.0; 4]);
        assert_eq!(user_status_counts(&[1.0, 0.5, -0.5, 0.2]), [3, 1, 1, 0]);
        assert_eq!(user_status_counts(&[1.0; 5]), [5, 0, 5, 0]);
        assert_eq!(user_status_counts(&[0.0, -1.0]), [0, 2, 0, 2]);
        let s = user_status(&[1.0, 0.5, -0.5, 0.2], 32);
        assert_eq!(s, [3.0 / 32.0, 1.0 / 32.0, 1.0 / 32.0, 0.0]);
    }

    #[test]
    fn softmax_uniform_and_mask() {
        let net = PolicyNet::zeros(1, 5, &[4, 3], 4);
        let p = policy_forward(&net, &[0.3; 5], None).unwrap();
        assert_eq!(p, vec![0.25; 4]);
        let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let p = masked_softmax(&logits, Some(&[true, true, false])).unwrap();
        assert!((p[0] - 0.625).abs() < 1e-12 && (p[1] - 0.375).abs() < 1e-12);
        assert_eq!(p[2], 0.0);
        assert!(masked_softmax(&logits, Some(&[false; 3])).is_err());
        let bad = masked_softmax(&[f64::NAN, 1.0], None).unwrap_err();
        assert_eq!(bad.kind(), crate::ErrorKind::Numeric);
        assert!(masked_softmax(&[f64::NAN, 1.0], Some(&[false, true])).is_ok());
    }

    fn small_params(rng: &mut ChaCha8Rng, trainable: bool) -> (Params, EncoderConfig) {
        let (items, emb, l, h) = (6, 3, 4, 3);
        let mut embeddings = EmbeddingTable::random(items, emb, rng, 0.8);
        embeddings.trainable = trainable;
        let sru = SruParams::random(emb + l, h, rng, 0.8);
        let nets = (0..3)
            .map(|k| PolicyNet::random(k + 1, h + STATUS_WIDTH, &[5, 4], 3, rng, 0.8))
            .collect();
        let cfg = EncoderConfig {
            onehot_len: l,
            reward_range: (-2.0, 2.0),
            episode_len: 8,
        };
        (Params { embeddings, sru, nets }, cfg)
    }

    #[test]
    fn encoding_is_prefix_causal_and_matches_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (params, cfg) = small_params(&mut rng, true);
        assert_eq!(encode_state(&params, &cfg, &[]).unwrap().0, vec![0.0; 7]);

        let hist = [(1, 0.5), (4, -1.0), (2, 1.5)];
        let one = encode_state(&params, &cfg, &hist[..1]).unwrap();
        let mut x = params.embeddings.row(1).to_vec();
        x.extend(reward_to_onehot(0.5, (-2.0, 2.0), 4).unwrap());
        let (h, _) = sru_step(&params.sru, &x, &[0.0; 3]).unwrap();
        assert_eq!(&one.0[..3], h.as_slice());

        let base = encode_state(&params, &cfg, &hist[..2]).unwrap();
        let mutated = [(1, 0.5), (4, -1.0), (5, -0.3)];
        assert_eq!(encode_state(&params, &cfg, &mutated[..2]).unwrap(), base);
        assert!(encode_state(&params, &cfg, &[(9, 0.0)]).is_err());
    }

    #[test]
    fn off_path_nets_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (params, cfg) = small_params(&mut rng, true);
        let levels = [Level { net: 0, choice: 1, mask: None }, Level { net: 2, choice: 0, mask: None }];
        let (_, g) = backprop_logprob(&params, &cfg, &[(0, 1.0), (3, -0.5)], &levels).unwrap();
        let zero = |n: &PolicyNet| n.layers.iter().all(|l| l.w.iter().chain(&l.b).all(|&v| v == 0.0));
        assert!(zero(&g.nets[1]));
        assert!(!zero(&g.nets[0]) && !zero(&g.nets[2]));
        let untouched = (0..6).filter(|&i| i != 0 && i != 3);
        for i in untouched {
            assert!(g.embeddings.row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn weight_scales_gradient_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (params, cfg) = small_params(&mut rng, false);
        let levels = [Level { net: 1, choice: 2, mask: Some(vec![true, false, true]) }];
        let hist = [(2, 0.3)];
        let run = |w: f64| {
            let mut g = params.zeros_like();
            accumulate_logprob_grad(&params, &cfg, &hist, &[Decision { prefix: 1, levels: &levels, weight: w }], &mut g)
                .unwrap();
            g
        };
        let (g1, g2) = (run(1.5), run(3.0));
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn mac_counter_counts_dense_products() {
        let net = PolicyNet::zeros(1, 20, &[32, 16], 100);
        macs::reset();
        net.forward(&[0.0; 20]).unwrap();
        assert_eq!(macs::read(), (20 * 32 + 32 * 16 + 16 * 100) as u64);
    }
}
