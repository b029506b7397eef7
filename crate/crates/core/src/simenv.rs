//! Rating-log-driven user simulator.
//!
//! Each episode serves one sampled user. Recommending item `j` to user `i`
//! pays the normalized rating `r_ij` (0 when the user never rated `j`) plus
//! `alpha * (c_p - c_n)`, where the consecutive counts come from the feedback
//! preceding the recommendation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{RatingDataset, RatingRange};
use crate::error::{Result, TpgrError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub alpha: f64,
    pub episode_len: usize,
    pub mask_repeats: bool,
    pub range: RatingRange,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(TpgrError::invalid(format!("alpha {} must be >= 0", self.alpha)));
        }
        if self.episode_len < 1 {
            return Err(TpgrError::invalid("episode length must be at least 1"));
        }
        RatingRange::new(self.range.min, self.range.max)?;
        Ok(())
    }

    /// Largest reward magnitude reachable in an episode: `1 + alpha (n - 1)`.
    pub fn reward_bound(&self) -> f64 {
        1.0 + self.alpha * (self.episode_len as f64 - 1.0)
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            alpha: 0.1,
            episode_len: 32,
            mask_repeats: true,
            range: RatingRange::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub user: usize,
    /// `(item, reward)` for every step taken so far.
    pub history: Vec<(usize, f64)>,
    pub c_p: usize,
    pub c_n: usize,
    available: Vec<bool>,
    /// 1-based index of the next step.
    pub t: usize,
}

impl SimState {
    pub fn is_available(&self, item: usize) -> bool {
        self.available.get(item).copied().unwrap_or(false)
    }

    pub fn available(&self) -> &[bool] {
        &self.available
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.history.iter().map(|h| h.1)
    }

    pub fn write_trace<W: Write>(&self, mut w: W) -> Result<()> {
        let steps: Vec<_> = self
            .history
            .iter()
            .enumerate()
            .map(|(k, &(item, reward))| serde_json::json!({"t": k + 1, "item": item, "reward": reward}))
            .collect();
        let line = serde_json::json!({ "user": self.user, "steps": steps });
        writeln!(w, "{line}")?;
        Ok(())
    }
}

/// Read-only rating store plus reward rules. Cheap to share across workers.
#[derive(Debug, Clone)]
pub struct Simulator {
    /// Per user: `(item, native rating)` sorted by item.
    ratings: Vec<Vec<(usize, f64)>>,
    n_items: usize,
    cfg: SimConfig,
}

impl Simulator {
    pub fn new(ds: &RatingDataset, cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ratings = Vec::with_capacity(ds.n_users());
        for session in ds.sessions() {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(session.len());
            for r in session {
                if !cfg.range.contains(r.rating) {
                    return Err(TpgrError::invalid(format!(
                        "rating {} outside simulator range",
                        r.rating
                    )));
                }
                row.push((r.item, r.rating));
            }
            // latest rating wins for repeated (user, item)
            row.reverse();
            row.sort_by_key(|e| e.0);
            row.dedup_by_key(|e| e.0);
            ratings.push(row);
        }
        Ok(Simulator {
            ratings,
            n_items: ds.n_items(),
            cfg,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn with_config(&self, cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Simulator { cfg, ..self.clone() })
    }

    pub fn n_users(&self) -> usize {
        self.ratings.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Native rating of `item` by `user`, if any.
    pub fn rating(&self, user: usize, item: usize) -> Option<f64> {
        let row = &self.ratings[user];
        row.binary_search_by_key(&item, |e| e.0).ok().map(|k| row[k].1)
    }

    pub fn user_ratings(&self, user: usize) -> &[(usize, f64)] {
        &self.ratings[user]
    }

    /// Normalized rating, or 0 for unrated items.
    pub fn empirical_reward(&self, user: usize, item: usize) -> f64 {
        self.rating(user, item)
            .map(|r| 2.0 * (r - self.cfg.range.min) / (self.cfg.range.max - self.cfg.range.min) - 1.0)
            .unwrap_or(0.0)
    }

    /// Uniformly samples a user and starts an episode.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SimState> {
        if self.ratings.is_empty() {
            return Err(TpgrError::EmptyPool);
        }
        let user = rng.gen_range(0..self.ratings.len());
        self.reset_user(user)
    }

    pub fn reset_user(&self, user: usize) -> Result<SimState> {
        if user >= self.ratings.len() {
            return Err(TpgrError::invalid(format!("no user {user} in pool")));
        }
        Ok(SimState {
            user,
            history: Vec::with_capacity(self.cfg.episode_len),
            c_p: 0,
            c_n: 0,
            available: vec![true; self.n_items],
            t: 1,
        })
    }

    pub fn step(&self, state: &mut SimState, item: usize) -> Result<f64> {
        if self.done(state) {
            return Err(TpgrError::EpisodeFinished);
        }
        if item >= self.n_items {
            return Err(TpgrError::UnknownItem(item));
        }
        if !state.available[item] {
            return Err(TpgrError::Unavailable(item));
        }
        let r = self.empirical_reward(state.user, item);
        let reward = r + self.cfg.alpha * (state.c_p as f64 - state.c_n as f64);
        if r > 0.0 {
            state.c_p += 1;
            state.c_n = 0;
        } else {
            state.c_n += 1;
            state.c_p = 0;
        }
        if self.cfg.mask_repeats {
            state.available[item] = false;
        }
        state.history.push((item, reward));
        state.t += 1;
        Ok(reward)
    }

    pub fn done(&self, state: &SimState) -> bool {
        state.t > self.cfg.episode_len
    }
}

pub fn episode_done(state: &SimState, cfg: &SimConfig) -> bool {
    state.t > cfg.episode_len
}

/// Independent, reproducible random stream for worker `worker` of a run.
pub fn seed_stream(global_seed: u64, worker: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    rng.set_stream(worker);
    rng
}
