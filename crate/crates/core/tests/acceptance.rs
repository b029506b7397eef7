//! End-to-end acceptance checks. Runs without the libtest harness so every
//! check prints exactly one PASS/FAIL line; the process fails if any check
//! fails.

mod common;

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use tpgr::agent::{
    action_prob, init_model, train, Availability, Baseline, ModelDims, TpgrModel, TrainConfig,
    UpdateConfig,
};
use tpgr::cluster::{
    branching_factor, internal_slots, kmeans_balanced, pca_balanced, pca_chunk_sizes,
    ClusterMethod, ClusterTree,
};
use tpgr::data::{
    consecutive_profile, dataset_stats, load_ratings, split_users, Rating, RatingDataset,
    RatingRange,
};
use tpgr::evalbench::{
    bench, evaluate, popularity_policy, random_policy, BenchConfig, TpgrPolicy,
};
use tpgr::neural::{reward_index, StateVec};
use tpgr::reprs::{mf_item_representation, mf_train, rating_based, MfConfig};
use tpgr::simenv::{SimConfig, Simulator};
use tpgr::synth::{planted_world, two_arm_bandit, PlantedConfig};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!("{what} took {:.2}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()),
    )
}

fn random_points(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn tiny_dims() -> ModelDims {
    let mut d = ModelDims::for_rewards(0.1, 8, 4);
    d.emb_dim = 2;
    d.sru_hidden = 3;
    d.policy_hidden = vec![4];
    d
}

fn branching_formula() -> Check {
    let pts: Vec<Vec<f64>> = (0..17_770).map(|i| vec![(i % 101) as f64, (i / 101) as f64]).collect();
    let tree = Arc::new(ClusterTree::build(&pts, 2, ClusterMethod::Pca, 0).map_err(|e| e.to_string())?);
    let start = Instant::now();
    let c = branching_factor(17_770, 2);
    let slots = internal_slots(c, 2);
    let model = init_model(tree.clone(), &tiny_dims(), None, 0).map_err(|e| e.to_string())?;
    within(start.elapsed(), Duration::from_secs(1), "formula and model init")?;
    ensure(c == 134 && tree.branching() == 134, format!("c = {c}, tree c = {}", tree.branching()))?;
    ensure(slots == 135, format!("internal slots {slots}"))?;
    ensure(model.n_policy_nets() == 135, format!("{} policy nets", model.n_policy_nets()))?;
    Ok("c=134, 135 policy nets".into())
}

fn figure_two() -> Check {
    let pts: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
    let tree = ClusterTree::build(&pts, 3, ClusterMethod::Pca, 0).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let item = tree.path_to_item(&[2, 2, 2]).map_err(|e| e.to_string())?;
    let path = tree.item_to_path(7).map_err(|e| e.to_string())?;
    within(start.elapsed(), Duration::from_millis(1), "path lookups")?;
    ensure(item == Some(7), format!("path (2,2,2) gave {item:?}"))?;
    ensure(path.nodes == vec![1, 3, 7] && path.leaf == 15, format!("nodes {:?} leaf {}", path.nodes, path.leaf))?;
    ensure(path.choices == vec![2, 2, 2], format!("inverse path {:?}", path.choices))?;
    Ok("1 -> 3 -> 7 -> 15 returns item 8".into())
}

fn check_partition(clusters: &[Vec<usize>], m: usize, c: usize, what: &str) -> Result<(), String> {
    let mut seen = vec![false; m];
    for &i in clusters.iter().flatten() {
        ensure(i < m && !seen[i], format!("{what} m={m} c={c}: item {i} repeated or unknown"))?;
        seen[i] = true;
    }
    ensure(seen.iter().all(|&s| s), format!("{what} m={m} c={c}: not covering"))?;
    let sizes: Vec<usize> = clusters.iter().map(Vec::len).collect();
    if m > c {
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        ensure(sizes.len() == c && hi - lo <= 1, format!("{what} m={m} c={c}: sizes {sizes:?}"))
    } else {
        ensure(sizes.len() == m && sizes.iter().all(|&s| s == 1), format!("{what} m={m} c={c}: {sizes:?}"))
    }
}

fn clustering_balance() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for m in 1..=200 {
        for c in 1..=13 {
            let pts = random_points(&mut rng, m, 4);
            let km = kmeans_balanced(&pts, c, rng.gen()).map_err(|e| e.to_string())?;
            check_partition(&km.clusters, m, c, "kmeans")?;
            let pca = pca_balanced(&pts, c).map_err(|e| format!("pca m={m} c={c}: {e}"))?;
            check_partition(&pca.clusters, m, c, "pca")?;
            if m > c {
                ensure(pca.sizes() == pca_chunk_sizes(m, c), format!("pca m={m} c={c}: {:?}", pca.sizes()))?;
            }
        }
    }
    ensure(pca_chunk_sizes(10, 3) == vec![4, 3, 3], "m=10, c=3 chunk sizes")?;
    within(start.elapsed(), Duration::from_secs(30), "balance suite")?;
    Ok(format!("2600 (m, c) pairs in {:.1}s", start.elapsed().as_secs_f64()))
}

fn perturbed_model(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<TpgrModel, String> {
    let pts = random_points(rng, n, 3);
    let method = if rng.gen_bool(0.5) { ClusterMethod::Pca } else { ClusterMethod::KMeans };
    let tree = Arc::new(ClusterTree::build(&pts, d, method, rng.gen()).map_err(|e| e.to_string())?);
    let mut model = init_model(tree, &tiny_dims(), None, rng.gen()).map_err(|e| e.to_string())?;
    for t in model.params.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.gen_range(-1.5..1.5));
    }
    Ok(model)
}

fn hierarchical_normalization() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let trials = 60;
    for trial in 0..trials {
        let d = 1 + trial % 3;
        let n = if trial % 5 == 0 { 512 } else { rng.gen_range(1..=512) };
        let model = perturbed_model(&mut rng, n, d)?;
        let s = StateVec((0..model.params.state_width()).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let full = Availability::full(&model.tree);
        let mask: Vec<bool> = (0..n).map(|i| i == n / 2 || rng.gen_bool(0.5)).collect();
        let partial = Availability::from_mask(&model.tree, &mask);
        for (avail, allowed) in [(&full, vec![true; n]), (&partial, mask)] {
            let mut total = 0.0;
            for item in (0..n).filter(|&i| allowed[i]) {
                total += action_prob(&model, &s, item, avail).map_err(|e| e.to_string())?;
            }
            worst = worst.max((total - 1.0).abs());
        }
    }
    ensure(worst <= 1e-6, format!("largest deviation {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(60), "normalization trials")?;
    Ok(format!("{trials} trials, max |sum - 1| = {worst:.1e}"))
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut params_checked = 0;
    let configs = 120;
    for k in 0..configs {
        let items = rng.gen_range(2..=6);
        let nets = rng.gen_range(1..=3);
        let c = rng.gen_range(2..=4);
        let (params, cfg) = common::random_params(&mut rng, items, nets, c, k % 4 != 0);
        let history = common::random_history(&mut rng, items, 5);
        let levels = common::random_levels(&mut rng, nets, c);
        let (err, n) = common::max_fd_error(&params, &cfg, &history, &levels);
        worst = worst.max(err);
        params_checked += n;
    }
    ensure(worst < 1e-4, format!("max relative error {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(300), "finite differences")?;
    Ok(format!("{configs} configurations, {params_checked} parameters, max rel err {worst:.1e}"))
}

fn reward_semantics() -> Check {
    let session = vec![Rating { item: 0, rating: 4.0, timestamp: 0 }];
    let ds = RatingDataset::from_sessions(vec![session], 2).map_err(|e| e.to_string())?;
    let sim = |alpha: f64| {
        Simulator::new(&ds, SimConfig { alpha, episode_len: 8, ..SimConfig::default() }).unwrap()
    };
    let s = sim(0.1);
    let mut st = s.reset_user(0).unwrap();
    st.c_p = 2;
    let r1 = s.step(&mut st, 0).unwrap();
    let s = sim(0.2);
    let mut st = s.reset_user(0).unwrap();
    st.c_n = 3;
    let r2 = s.step(&mut st, 1).unwrap();
    let s = sim(0.0);
    let mut st = s.reset_user(0).unwrap();
    st.c_p = 5;
    let r3 = s.step(&mut st, 0).unwrap();
    ensure((r1 - 0.7).abs() < 1e-12, format!("rated 4, c_p=2: {r1}"))?;
    ensure((r2 + 0.6).abs() < 1e-12, format!("unrated, c_n=3: {r2}"))?;
    ensure(Ok(r3) == RatingRange::default().normalize(4.0).map_err(|e| e.to_string()), format!("alpha=0: {r3}"))?;
    Ok("0.7, -0.6, alpha=0 gives normalized rating".into())
}

fn reward_mapping() -> Check {
    let (a, b, l) = (-1.0, 1.0, 8);
    ensure(reward_index(b, (a, b), l).ok() == Some(l), "r = b does not map to l")?;
    ensure(reward_index(a + 1e-9, (a, b), l).ok() == Some(1), "just above a does not map to 1")?;
    let mut prev = 0;
    for k in 1..=2000 {
        let r = a + k as f64 * 1e-3;
        let idx = reward_index(r.min(b), (a, b), l).map_err(|e| e.to_string())?;
        ensure((1..=l).contains(&idx) && idx >= prev, format!("index {idx} at r = {r}"))?;
        prev = idx;
    }
    Ok("endpoints exact, monotone on a 1e-3 grid".into())
}

fn bandit_sanity() -> Result<f64, String> {
    let ds = two_arm_bandit();
    let pts = vec![vec![0.0], vec![1.0]];
    let tree = Arc::new(ClusterTree::build(&pts, 1, ClusterMethod::Pca, 0).map_err(|e| e.to_string())?);
    let cfg = SimConfig { alpha: 0.0, episode_len: 1, ..SimConfig::default() };
    let sim = Simulator::new(&ds, cfg).map_err(|e| e.to_string())?;
    let model = init_model(tree, &ModelDims::for_rewards(0.0, 1, 4), None, 1).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        episodes_per_step: 16,
        max_steps: 200,
        update: UpdateConfig { learning_rate: 0.05, ..UpdateConfig::default() },
        seed: 7,
        ..TrainConfig::default()
    };
    let (model, _) = train(&tc, &sim, None, model).map_err(|e| e.to_string())?;
    let s = StateVec(vec![0.0; model.params.state_width()]);
    action_prob(&model, &s, 0, &Availability::full(&model.tree)).map_err(|e| e.to_string())
}

fn learning_sanity() -> Check {
    let start = Instant::now();
    let p_best = bandit_sanity()?;
    ensure(p_best > 0.9, format!("bandit P(+1 item) = {p_best:.3}"))?;

    let err = |e: tpgr::TpgrError| e.to_string();
    let ds = planted_world(&PlantedConfig::default()).map_err(err)?;
    let (train_all, test) = split_users(&ds, 0.8, 0).map_err(err)?;
    let (train_ds, valid) = split_users(&train_all, 0.8, 1).map_err(err)?;
    let tree = Arc::new(ClusterTree::build(&rating_based(&train_ds), 2, ClusterMethod::Pca, 0).map_err(err)?);
    let mf = mf_train(&train_ds, &MfConfig { epochs: 50, ..MfConfig::default() }).map_err(err)?;
    let emb = mf_item_representation(&mf).to_embeddings().map_err(err)?;
    let cfg = SimConfig::default();
    let sim = |d: &RatingDataset| Simulator::new(d, cfg).unwrap();
    let (train_sim, valid_sim, test_sim) = (sim(&train_ds), sim(&valid), sim(&test));
    let dims = ModelDims::for_rewards(cfg.alpha, cfg.episode_len, 10);
    let model = init_model(tree, &dims, Some(emb), 1).map_err(err)?;
    let tc = TrainConfig {
        episodes_per_step: 32,
        max_steps: 1000,
        eval_every: 20,
        patience: 25,
        min_delta: 0.0,
        greedy_eval: false,
        update: UpdateConfig {
            learning_rate: 0.05,
            baseline: Baseline::BatchMean,
            ..UpdateConfig::default()
        },
        seed: 2,
    };
    let (model, _) = train(&tc, &train_sim, Some(&valid_sim), model).map_err(err)?;
    let k = cfg.episode_len;
    let ours = evaluate(&TpgrPolicy { model: &model, greedy: false }, &test_sim, k, 1, 11).map_err(err)?;
    let rand = evaluate(&random_policy(5), &test_sim, k, 1, 11).map_err(err)?;
    let pop = evaluate(&popularity_policy(&train_ds), &test_sim, k, 1, 11).map_err(err)?;

    let diffs: Vec<f64> = ours.user_rewards.iter().zip(&rand.user_rewards).map(|(a, b)| a - b).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    let p = 1.0 - StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| e.to_string())?.cdf(t);

    ensure(diffs.len() >= 30, format!("only {} test users", diffs.len()))?;
    ensure(p < 0.01, format!("vs random: mean diff {mean:.3}, p = {p:.3e}"))?;
    ensure(
        ours.avg_reward >= pop.avg_reward,
        format!("tpgr {:.3} below popularity {:.3}", ours.avg_reward, pop.avg_reward),
    )?;
    within(start.elapsed(), Duration::from_secs(600), "learning checks")?;
    Ok(format!(
        "bandit P={p_best:.3}; planted world: tpgr {:.3}, random {:.3} (p={p:.1e}, {} users), popularity {:.3}",
        ours.avg_reward,
        rand.avg_reward,
        diffs.len(),
        pop.avg_reward
    ))
}

fn complexity() -> Check {
    let start = Instant::now();
    let n_items = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sessions: Vec<Vec<Rating>> = (0..50)
        .map(|_| {
            let picks: HashSet<usize> = (0..100).map(|_| rng.gen_range(0..n_items)).collect();
            let mut picks: Vec<usize> = picks.into_iter().collect();
            picks.sort_unstable();
            picks
                .into_iter()
                .map(|item| Rating { item, rating: rng.gen_range(1..=5) as f64, timestamp: 0 })
                .collect()
        })
        .collect();
    let ds = RatingDataset::from_sessions(sessions, n_items).map_err(|e| e.to_string())?;
    let sim = Simulator::new(&ds, SimConfig { mask_repeats: false, ..SimConfig::default() })
        .map_err(|e| e.to_string())?;
    let rep = random_points(&mut rng, n_items, 8);
    let cfg = BenchConfig {
        depths: vec![1, 2],
        decisions: 5000,
        episodes_per_step: 50,
        dims: ModelDims::for_rewards(0.1, 32, 10),
        method: ClusterMethod::Pca,
        update: UpdateConfig::default(),
        seed: 0,
    };
    let report = bench(&rep, &sim, &cfg).map_err(|e| e.to_string())?;
    let (flat, tree) = (&report.rows[0], &report.rows[1]);
    let mac_ratio = flat.macs_per_decision as f64 / tree.macs_per_decision as f64;
    let time_ratio = flat.seconds_per_million_decisions / tree.seconds_per_million_decisions;
    ensure(mac_ratio > 10.0, format!("MAC ratio {mac_ratio:.1}"))?;
    ensure(time_ratio >= 5.0, format!("time ratio {time_ratio:.1}"))?;
    ensure(
        report.rows.iter().all(|r| r.seconds_per_million_decisions > 0.0 && r.seconds_per_training_step > 0.0),
        "non-positive duration",
    )?;
    within(start.elapsed(), Duration::from_secs(900), "benchmark")?;
    Ok(format!(
        "MACs/decision {} vs {} ({mac_ratio:.1}x), s per 1e6 decisions {:.1} vs {:.1} ({time_ratio:.1}x)",
        flat.macs_per_decision, tree.macs_per_decision, flat.seconds_per_million_decisions, tree.seconds_per_million_decisions
    ))
}

/// Runs only when `TPGR_MOVIELENS` points at the MovieLens-10M `ratings.dat`.
fn movielens() -> Check {
    let Some(path) = std::env::var_os("TPGR_MOVIELENS").map(PathBuf::from) else {
        return Ok("conditional: TPGR_MOVIELENS not set, dataset checks not run".into());
    };
    let range = RatingRange::new(0.5, 5.0).map_err(|e| e.to_string())?;
    let ds = load_ratings(&path, "::", range, false).map_err(|e| e.to_string())?;
    let stats = dataset_stats(&ds);
    ensure(
        (stats.users, stats.items, stats.ratings) == (69_878, 10_677, 10_000_054),
        format!("stats {} / {} / {}", stats.users, stats.items, stats.ratings),
    )?;
    let profile = consecutive_profile(&ds, 3.0, 10).map_err(|e| e.to_string())?;
    let (pos, neg) = (profile.positive_trend(), profile.negative_trend());
    ensure(pos.is_some_and(|v| v > 0.0), format!("positive-count trend {pos:?}"))?;
    ensure(neg.is_some_and(|v| v < 0.0), format!("negative-count trend {neg:?}"))?;
    Ok(format!("table matches; trends {:.2} / {:.2}", pos.unwrap(), neg.unwrap()))
}

fn main() {
    let checks: [(&str, fn() -> Check); 10] = [
        ("branching factor", branching_formula),
        ("figure-2 tree", figure_two),
        ("clustering balance", clustering_balance),
        ("hierarchical normalization", hierarchical_normalization),
        ("gradient correctness", gradient_correctness),
        ("reward semantics", reward_semantics),
        ("reward mapping", reward_mapping),
        ("learning sanity", learning_sanity),
        ("decision cost", complexity),
        ("dataset statistics", movielens),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (k, (name, check)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}) [{secs:.1}s]", k + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why}) [{secs:.1}s]", k + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
