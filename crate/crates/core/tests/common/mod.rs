#![allow(dead_code)]

use rand::Rng;
use tpgr::neural::{
    backprop_logprob, encode_state, path_logprob, EmbeddingTable, EncoderConfig, Level, Params,
    PolicyNet, SruParams, STATUS_WIDTH,
};

/// Small random parameter set with `nets` policy nets of `c` outputs.
pub fn random_params<R: Rng>(rng: &mut R, items: usize, nets: usize, c: usize, trainable: bool) -> (Params, EncoderConfig) {
    let emb_dim = rng.gen_range(1..=4);
    let hidden = rng.gen_range(1..=4);
    let onehot_len = rng.gen_range(1..=5);
    let episode_len = rng.gen_range(2..=8);
    let mut embeddings = EmbeddingTable::random(items, emb_dim, rng, 0.8);
    embeddings.trainable = trainable;
    let sru = SruParams::random(emb_dim + onehot_len, hidden, rng, 0.8);
    let widths: Vec<usize> = (0..rng.gen_range(0..=2)).map(|_| rng.gen_range(1..=5)).collect();
    let nets = (0..nets)
        .map(|k| PolicyNet::random(k + 1, hidden + STATUS_WIDTH, &widths, c, rng, 0.8))
        .collect();
    let bound = 1.5;
    let cfg = EncoderConfig {
        onehot_len,
        reward_range: (-bound, bound),
        episode_len,
    };
    (Params { embeddings, sru, nets }, cfg)
}

pub fn random_history<R: Rng>(rng: &mut R, items: usize, max_len: usize) -> Vec<(usize, f64)> {
    let len = rng.gen_range(0..=max_len);
    (0..len)
        .map(|_| (rng.gen_range(0..items), rng.gen_range(-1.5..1.5)))
        .collect()
}

/// Random chain of decisions with the chosen child always unmasked.
pub fn random_levels<R: Rng>(rng: &mut R, nets: usize, c: usize) -> Vec<Level> {
    (0..rng.gen_range(1..=3))
        .map(|_| {
            let choice = rng.gen_range(0..c);
            let mask = rng.gen_bool(0.5).then(|| {
                (0..c).map(|j| j == choice || rng.gen_bool(0.6)).collect()
            });
            Level {
                net: rng.gen_range(0..nets),
                choice,
                mask,
            }
        })
        .collect()
}

pub fn logprob(params: &Params, cfg: &EncoderConfig, history: &[(usize, f64)], levels: &[Level]) -> f64 {
    let s = encode_state(params, cfg, history).unwrap();
    path_logprob(params, &s.0, levels).unwrap()
}

/// Largest relative disagreement between the analytic gradient of
/// `log pi` and central differences, over every trainable parameter.
pub fn max_fd_error(params: &Params, cfg: &EncoderConfig, history: &[(usize, f64)], levels: &[Level]) -> (f64, usize) {
    let (_, grad) = backprop_logprob(params, cfg, history, levels).unwrap();
    let analytic: Vec<f64> = grad.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut k = 0;
    let mut p = params.clone();
    let n_tensors = p.tensors_mut().len();
    for t in 0..n_tensors {
        let len = p.tensors_mut()[t].len();
        for i in 0..len {
            let orig = p.tensors_mut()[t][i];
            p.tensors_mut()[t][i] = orig + h;
            let up = logprob(&p, cfg, history, levels);
            p.tensors_mut()[t][i] = orig - h;
            let down = logprob(&p, cfg, history, levels);
            p.tensors_mut()[t][i] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = analytic[k];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            k += 1;
        }
    }
    assert_eq!(k, analytic.len());
    (worst, k)
}
