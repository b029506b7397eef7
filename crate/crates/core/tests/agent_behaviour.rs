use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tpgr::agent::{
    action_prob, init_model, path_levels, policy_gradient, reinforce_update, sample_batch,
    sample_episode, sample_path, train, Availability, Baseline, Episode, EpisodeStep, ModelDims,
    TpgrModel, TrainConfig, UpdateConfig,
};
use tpgr::cluster::{ClusterMethod, ClusterTree};
use tpgr::data::{Rating, RatingDataset};
use tpgr::evalbench::{decision_macs, random_policy, Policy};
use tpgr::neural::{masked_softmax, path_logprob, StateVec};
use tpgr::simenv::{seed_stream, SimConfig, Simulator};
use tpgr::synth::{planted_world, PlantedConfig};

fn line_tree(n: usize, d: usize) -> Arc<ClusterTree> {
    let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
    Arc::new(ClusterTree::build(&pts, d, ClusterMethod::Pca, 0).unwrap())
}

fn dims(n: usize) -> ModelDims {
    let mut d = ModelDims::for_rewards(0.1, n, 6);
    d.emb_dim = 4;
    d.sru_hidden = 5;
    d.policy_hidden = vec![8, 6];
    d
}

fn perturb(model: &mut TpgrModel, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

fn planted_sim(n: usize, mask: bool) -> Simulator {
    let ds = planted_world(&PlantedConfig { users: 20, items: 40, blocks: 4, other_ratings: 5, ..PlantedConfig::default() })
        .unwrap();
    Simulator::new(&ds, SimConfig { episode_len: n, mask_repeats: mask, ..SimConfig::default() }).unwrap()
}

#[test]
fn zero_weight_model_samples_uniformly() {
    let mut model = init_model(line_tree(4, 2), &dims(4), None, 0).unwrap();
    for t in model.params.tensors_mut() {
        t.iter_mut().for_each(|v| *v = 0.0);
    }
    let s = StateVec(vec![0.0; model.params.state_width()]);
    let avail = Availability::full(&model.tree);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = [0usize; 4];
    let draws = 10_000;
    for _ in 0..draws {
        counts[sample_path(&model, &s, &avail, &mut rng, false).unwrap().item] += 1;
    }
    for c in counts {
        assert!((c as f64 / draws as f64 - 0.25).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn flat_tree_is_one_softmax() {
    let mut model = init_model(line_tree(30, 1), &dims(4), None, 2).unwrap();
    perturb(&mut model, 2, 1.0);
    let s = StateVec((0..model.params.state_width()).map(|k| (k as f64 * 0.37).sin()).collect());
    let avail = Availability::full(&model.tree);
    let probs = masked_softmax(&model.params.nets[0].forward(&s.0).unwrap().logits, None).unwrap();
    for item in 0..30 {
        let leaf_choice = model.tree.item_to_path(item).unwrap().choices[0] - 1;
        assert_eq!(action_prob(&model, &s, item, &avail).unwrap(), probs[leaf_choice]);
    }
}

#[test]
fn sampled_log_prob_is_the_sum_of_level_log_probs() {
    let mut model = init_model(line_tree(50, 3), &dims(4), None, 3).unwrap();
    perturb(&mut model, 3, 1.0);
    let s = StateVec(vec![0.2; model.params.state_width()]);
    let keep: Vec<bool> = (0..50).map(|i| i % 3 != 0).collect();
    let avail = Availability::from_mask(&model.tree, &keep);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let p = sample_path(&model, &s, &avail, &mut rng, false).unwrap();
        assert!(keep[p.item]);
        let levels = path_levels(&model, p.item, &avail).unwrap();
        let additive = path_logprob(&model.params, &s.0, &levels).unwrap();
        assert!((p.log_prob() - additive).abs() < 1e-12);
        let direct = action_prob(&model, &s, p.item, &avail).unwrap().ln();
        assert!((p.log_prob() - direct).abs() < 1e-12);
    }
}

#[test]
fn per_level_probabilities_multiply() {
    let model = init_model(line_tree(9, 2), &dims(4), None, 5).unwrap();
    let s = StateVec(vec![0.0; model.params.state_width()]);
    let avail = Availability::full(&model.tree);
    let p = sample_path(&model, &s, &avail, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
    assert_eq!(p.probs.len(), 2);
    let expect = p.probs[0] * p.probs[1];
    assert!((action_prob(&model, &s, p.item, &avail).unwrap() - expect).abs() < 1e-15);
}

#[test]
fn episodes_are_deterministic_and_distinct() {
    let sim = planted_sim(12, true);
    let model = init_model(line_tree(40, 2), &dims(12), None, 6).unwrap();
    let a = sample_episode(&model, &sim, &mut seed_stream(3, 0), false).unwrap();
    let b = sample_episode(&model, &sim, &mut seed_stream(3, 0), false).unwrap();
    assert_eq!(a, b);
    let mut items: Vec<usize> = a.steps.iter().map(|s| s.item).collect();
    items.sort_unstable();
    items.dedup();
    assert_eq!(items.len(), 12);

    let one = planted_sim(1, true);
    let model = init_model(line_tree(40, 2), &dims(1), None, 6).unwrap();
    assert_eq!(sample_episode(&model, &one, &mut seed_stream(3, 0), false).unwrap().steps.len(), 1);
}

#[test]
fn update_direction_matches_finite_differences() {
    let sim = planted_sim(6, true);
    let mut model = init_model(line_tree(40, 2), &dims(6), None, 7).unwrap();
    perturb(&mut model, 7, 0.5);
    let episodes = sample_batch(&model, &sim, 4, 1, 0).unwrap();
    let cfg = UpdateConfig { baseline: Baseline::BatchMean, ..UpdateConfig::default() };
    let (grad, _) = policy_gradient(&model, &episodes, &cfg).unwrap();
    let analytic: Vec<f64> = grad.tensors().iter().flat_map(|t| t.iter().copied()).collect();

    let h = 1e-5;
    let mut fd = Vec::with_capacity(analytic.len());
    let mut probe = model.clone();
    let n_tensors = probe.params.tensors_mut().len();
    for t in 0..n_tensors {
        for i in 0..probe.params.tensors_mut()[t].len() {
            let orig = probe.params.tensors_mut()[t][i];
            probe.params.tensors_mut()[t][i] = orig + h;
            let up = policy_gradient(&probe, &episodes, &cfg).unwrap().1;
            probe.params.tensors_mut()[t][i] = orig - h;
            let down = policy_gradient(&probe, &episodes, &cfg).unwrap().1;
            probe.params.tensors_mut()[t][i] = orig;
            fd.push((up - down) / (2.0 * h));
        }
    }
    let dot: f64 = analytic.iter().zip(&fd).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = dot / (norm(&analytic) * norm(&fd));
    assert!(cos > 0.99, "cosine {cos}");

    // applying the update raises the frozen-batch objective
    let before = policy_gradient(&model, &episodes, &cfg).unwrap().1;
    let small = UpdateConfig { learning_rate: 1e-4, ..cfg };
    reinforce_update(&mut model, &episodes, &small).unwrap();
    assert!(policy_gradient(&model, &episodes, &cfg).unwrap().1 > before);
}

#[test]
fn non_finite_rewards_abort_the_update() {
    let mut model = init_model(line_tree(8, 3), &dims(4), None, 8).unwrap();
    let ep = Episode {
        user: 0,
        masked: true,
        steps: vec![EpisodeStep { choices: vec![1, 1, 1], item: 0, reward: f64::NAN }],
    };
    let err = reinforce_update(&mut model, &[ep], &UpdateConfig::default()).unwrap_err();
    assert_eq!(err.kind(), tpgr::ErrorKind::Numeric);
}

#[test]
fn identical_config_and_seed_give_identical_logs() {
    let sim = planted_sim(8, true);
    let run = || {
        let model = init_model(line_tree(40, 2), &dims(8), None, 9).unwrap();
        let cfg = TrainConfig {
            episodes_per_step: 8,
            max_steps: 12,
            eval_every: 4,
            update: UpdateConfig { learning_rate: 0.05, ..UpdateConfig::default() },
            seed: 5,
            ..TrainConfig::default()
        };
        let (m, mut log) = train(&cfg, &sim, Some(&sim), model).unwrap();
        log.rows.iter_mut().for_each(|r| r.seconds = 0.0);
        (m, log)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(m1, m2);
    assert!(!l1.rows.is_empty());
}

#[test]
fn greedy_sampling_is_repeatable() {
    let sim = planted_sim(8, true);
    let model = init_model(line_tree(40, 2), &dims(8), None, 10).unwrap();
    let a = sample_episode(&model, &sim, &mut seed_stream(1, 0), true).unwrap();
    let mut b = sample_episode(&model, &sim, &mut seed_stream(1, 0), true).unwrap();
    b.user = a.user;
    assert_eq!(a.steps, b.steps);
}

#[test]
fn decision_cost_scales_with_branching_not_catalogue() {
    let dims = ModelDims::for_rewards(0.1, 32, 10);
    let mut macs = Vec::new();
    for n in [100, 1_000, 10_000] {
        let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![(i % 97) as f64, (i / 97) as f64]).collect();
        let flat = init_model(Arc::new(ClusterTree::build(&pts, 1, ClusterMethod::Pca, 0).unwrap()), &dims, None, 0).unwrap();
        let tree = init_model(Arc::new(ClusterTree::build(&pts, 2, ClusterMethod::Pca, 0).unwrap()), &dims, None, 0).unwrap();
        macs.push((decision_macs(&flat).unwrap(), decision_macs(&tree).unwrap()));
    }
    // flat cost grows with |A|; tree cost with sqrt(|A|)
    let (f100, t100) = macs[0];
    let (f10k, t10k) = macs[2];
    assert!(f10k > 50 * f100 / 2);
    assert!(t10k < 12 * t100);
    assert!(f10k > 10 * t10k, "{macs:?}");
}

#[test]
fn checkpoint_size_grows_at_most_linearly() {
    let mut dims = ModelDims::for_rewards(0.1, 32, 10);
    dims.emb_dim = 8;
    let mut sizes = Vec::new();
    for n in [100usize, 1_000, 10_000] {
        let model = init_model(line_tree(n, 2), &dims, None, 0).unwrap();
        let mut buf = Vec::new();
        model.write_checkpoint(&mut buf).unwrap();
        sizes.push((n, buf.len()));
    }
    for w in sizes.windows(2) {
        let (n0, s0) = w[0];
        let (n1, s1) = w[1];
        assert!((s1 as f64 / s0 as f64) <= (n1 as f64 / n0 as f64), "{sizes:?}");
    }
}

#[test]
fn random_policy_is_uniform() {
    let ds = RatingDataset::from_sessions(vec![vec![Rating { item: 0, rating: 3.0, timestamp: 0 }]], 5).unwrap();
    let sim = Simulator::new(&ds, SimConfig { episode_len: 1, ..SimConfig::default() }).unwrap();
    let pol = random_policy(11);
    let draws = 10_000;
    let mut counts = [0usize; 5];
    for k in 0..draws {
        counts[pol.rollout(&sim, 0, &mut seed_stream(2, k)).unwrap()[0].0] += 1;
    }
    let p = 0.2;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
    }
}
