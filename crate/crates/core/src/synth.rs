//! Synthetic rating logs with known structure.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Rating, RatingDataset};
use crate::error::{Result, TpgrError};

/// Users and items split into `blocks` groups. A user rates a fraction of
/// its own group's items highly and a few other-group items poorly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub users: usize,
    pub items: usize,
    pub blocks: usize,
    /// Fraction of own-block items each user rates.
    pub own_fraction: f64,
    /// Number of other-block items each user rates.
    pub other_ratings: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            users: 200,
            items: 500,
            blocks: 5,
            own_fraction: 1.0,
            other_ratings: 30,
            seed: 0,
        }
    }
}

/// Block of user or item `i` when `n` entities are split into `blocks`.
pub fn block_of(i: usize, n: usize, blocks: usize) -> usize {
    i * blocks / n
}

/// Ratings are in `[1, 5]`: 4 or 5 in-block, 1 or 2 out of block.
pub fn planted_world(cfg: &PlantedConfig) -> Result<RatingDataset> {
    if cfg.blocks < 1 || cfg.blocks > cfg.items || cfg.users < 1 {
        return Err(TpgrError::invalid("planted world needs 1 <= blocks <= items and users >= 1"));
    }
    if !(0.0..=1.0).contains(&cfg.own_fraction) {
        return Err(TpgrError::invalid("own fraction must be in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sessions = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let g = block_of(u, cfg.users, cfg.blocks);
        let (own, other): (Vec<usize>, Vec<usize>) =
            (0..cfg.items).partition(|&i| block_of(i, cfg.items, cfg.blocks) == g);
        let n_own = (cfg.own_fraction * own.len() as f64).round() as usize;
        let mut picks: Vec<(usize, f64)> = own
            .choose_multiple(&mut rng, n_own)
            .map(|&i| (i, rng.gen_range(4..=5) as f64))
            .collect();
        picks.extend(
            other
                .choose_multiple(&mut rng, cfg.other_ratings.min(other.len()))
                .map(|&i| (i, rng.gen_range(1..=2) as f64)),
        );
        picks.shuffle(&mut rng);
        sessions.push(
            picks
                .into_iter()
                .enumerate()
                .map(|(t, (item, rating))| Rating { item, rating, timestamp: t as u64 })
                .collect(),
        );
    }
    RatingDataset::from_sessions(sessions, cfg.items)
}

/// One user, two items: item 0 rated 5 (reward +1), item 1 rated 1 (-1).
pub fn two_arm_bandit() -> RatingDataset {
    let session = vec![
        Rating { item: 0, rating: 5.0, timestamp: 0 },
        Rating { item: 1, rating: 1.0, timestamp: 1 },
    ];
    RatingDataset::from_sessions(vec![session], 2).expect("static dataset is valid")
}

/// Sessions with momentum: after `k` consecutive ratings above 3 the next
/// rating is more likely positive and higher, and symmetrically for runs of
/// low ratings.
pub fn momentum_sessions(users: usize, length: usize, items: usize, seed: u64) -> Result<RatingDataset> {
    if items < 1 {
        return Err(TpgrError::invalid("need at least one item"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sessions = Vec::with_capacity(users);
    for _ in 0..users {
        let (mut pos, mut neg) = (0usize, 0usize);
        let mut session = Vec::with_capacity(length);
        for t in 0..length {
            let p_up = (0.5 + 0.08 * pos as f64 - 0.08 * neg as f64).clamp(0.05, 0.95);
            let rating = if rng.gen::<f64>() < p_up {
                pos += 1;
                neg = 0;
                (3.5 + 0.25 * pos as f64).min(5.0)
            } else {
                neg += 1;
                pos = 0;
                (2.5 - 0.25 * neg as f64).max(1.0)
            };
            session.push(Rating {
                item: rng.gen_range(0..items),
                rating,
                timestamp: t as u64,
            });
        }
        sessions.push(session);
    }
    RatingDataset::from_sessions(sessions, items)
}
