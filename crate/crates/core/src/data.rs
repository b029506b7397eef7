//! Rating-log ingestion, user splits and the consecutive-count rating profile.
//!
//! Raw user and item ids are re-indexed into contiguous ranges ordered by raw
//! id, so item indices can address arrays directly. Each user's ratings form a
//! session sorted by timestamp; ties keep file order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TpgrError};

/// Native rating scale of a dataset, e.g. `[1, 5]` for MovieLens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingRange {
    pub min: f64,
    pub max: f64,
}

impl RatingRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min >= max {
            return Err(TpgrError::invalid(format!(
                "degenerate rating range [{min}, {max}]"
            )));
        }
        Ok(RatingRange { min, max })
    }

    pub fn contains(&self, r: f64) -> bool {
        r >= self.min && r <= self.max
    }

    /// Affine map of the native range onto `[-1, 1]`.
    pub fn normalize(&self, r: f64) -> Result<f64> {
        if !self.contains(r) {
            return Err(TpgrError::invalid(format!(
                "rating {r} outside [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(2.0 * (r - self.min) / (self.max - self.min) - 1.0)
    }
}

impl Default for RatingRange {
    fn default() -> Self {
        RatingRange { min: 1.0, max: 5.0 }
    }
}

pub fn normalize_rating(r: f64, range: (f64, f64)) -> Result<f64> {
    RatingRange::new(range.0, range.1)?.normalize(r)
}

/// One line of a rating log, in raw ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub user_id: u64,
    pub item_id: u64,
    pub rating: f64,
    pub timestamp: u64,
}

/// A rating inside a user session, addressed by contiguous item index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub item: usize,
    pub rating: f64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatingDataset {
    sessions: Vec<Vec<Rating>>,
    user_ids: Vec<u64>,
    item_ids: Vec<u64>,
}

impl RatingDataset {
    /// Builds a dataset from raw records. Input order matters only for
    /// breaking timestamp ties inside a session.
    pub fn from_records(records: &[RatingRecord]) -> Self {
        let mut item_ids: Vec<u64> = records.iter().map(|r| r.item_id).collect();
        item_ids.sort_unstable();
        item_ids.dedup();

        let mut by_user: BTreeMap<u64, Vec<Rating>> = BTreeMap::new();
        for r in records {
            let item = item_ids.binary_search(&r.item_id).expect("item id collected above");
            by_user.entry(r.user_id).or_default().push(Rating {
                item,
                rating: r.rating,
                timestamp: r.timestamp,
            });
        }
        let mut user_ids = Vec::with_capacity(by_user.len());
        let mut sessions = Vec::with_capacity(by_user.len());
        for (uid, mut session) in by_user {
            // stable: equal timestamps keep file order
            session.sort_by_key(|r| r.timestamp);
            user_ids.push(uid);
            sessions.push(session);
        }
        RatingDataset {
            sessions,
            user_ids,
            item_ids,
        }
    }

    /// Builds a dataset whose raw ids equal the contiguous indices. Sessions
    /// are sorted by timestamp; `n_items` fixes the item index space.
    pub fn from_sessions(mut sessions: Vec<Vec<Rating>>, n_items: usize) -> Result<Self> {
        for s in sessions.iter_mut() {
            if let Some(r) = s.iter().find(|r| r.item >= n_items) {
                return Err(TpgrError::UnknownItem(r.item));
            }
            s.sort_by_key(|r| r.timestamp);
        }
        Ok(RatingDataset {
            user_ids: (0..sessions.len() as u64).collect(),
            item_ids: (0..n_items as u64).collect(),
            sessions,
        })
    }

    pub fn n_users(&self) -> usize {
        self.sessions.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_ratings(&self) -> usize {
        self.sessions.iter().map(Vec::len).sum()
    }

    pub fn sessions(&self) -> &[Vec<Rating>] {
        &self.sessions
    }

    pub fn session(&self, user: usize) -> &[Rating] {
        &self.sessions[user]
    }

    pub fn user_id(&self, user: usize) -> u64 {
        self.user_ids[user]
    }

    pub fn item_id(&self, item: usize) -> u64 {
        self.item_ids[item]
    }

    pub fn item_index(&self, raw: u64) -> Option<usize> {
        self.item_ids.binary_search(&raw).ok()
    }

    /// All ratings as raw records, grouped by user in session order.
    pub fn records(&self) -> impl Iterator<Item = RatingRecord> + '_ {
        self.sessions.iter().enumerate().flat_map(move |(u, s)| {
            s.iter().map(move |r| RatingRecord {
                user_id: self.user_ids[u],
                item_id: self.item_ids[r.item],
                rating: r.rating,
                timestamp: r.timestamp,
            })
        })
    }

    /// Keeps the listed users (in the given order) and the full item index space.
    pub fn select_users(&self, users: &[usize]) -> RatingDataset {
        RatingDataset {
            sessions: users.iter().map(|&u| self.sessions[u].clone()).collect(),
            user_ids: users.iter().map(|&u| self.user_ids[u]).collect(),
            item_ids: self.item_ids.clone(),
        }
    }

    /// Writes the dataset back out as a `sep`-delimited log in raw ids.
    pub fn write_log<W: Write>(&self, mut w: W, sep: &str) -> Result<()> {
        for r in self.records() {
            writeln!(
                w,
                "{}{sep}{}{sep}{}{sep}{}",
                r.user_id, r.item_id, r.rating, r.timestamp
            )?;
        }
        Ok(())
    }
}

/// Parses a delimited rating log: `user SEP item SEP rating SEP timestamp`.
pub fn parse_ratings<R: BufRead>(
    reader: R,
    separator: &str,
    range: RatingRange,
    skip_header: bool,
) -> Result<RatingDataset> {
    if separator.is_empty() {
        return Err(TpgrError::invalid("empty separator"));
    }
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if skip_header && idx == 0 {
            continue;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        records.push(parse_line(line, separator, range, lineno)?);
    }
    Ok(RatingDataset::from_records(&records))
}

fn parse_line(line: &str, sep: &str, range: RatingRange, lineno: usize) -> Result<RatingRecord> {
    let bad = |msg: String| TpgrError::Parse { line: lineno, msg };
    let fields: Vec<&str> = line.split(sep).map(str::trim).collect();
    if fields.len() != 4 {
        return Err(bad(format!("expected 4 fields, found {}", fields.len())));
    }
    let user_id = fields[0]
        .parse::<u64>()
        .map_err(|e| bad(format!("user id {:?}: {e}", fields[0])))?;
    let item_id = fields[1]
        .parse::<u64>()
        .map_err(|e| bad(format!("item id {:?}: {e}", fields[1])))?;
    let rating = fields[2]
        .parse::<f64>()
        .map_err(|e| bad(format!("rating {:?}: {e}", fields[2])))?;
    if !range.contains(rating) {
        return Err(bad(format!(
            "rating {rating} outside [{}, {}]",
            range.min, range.max
        )));
    }
    let timestamp = fields[3]
        .parse::<u64>()
        .map_err(|e| bad(format!("timestamp {:?}: {e}", fields[3])))?;
    Ok(RatingRecord {
        user_id,
        item_id,
        rating,
        timestamp,
    })
}

pub fn load_ratings(
    path: impl AsRef<Path>,
    separator: &str,
    range: RatingRange,
    skip_header: bool,
) -> Result<RatingDataset> {
    let file = File::open(path.as_ref())?;
    parse_ratings(BufReader::new(file), separator, range, skip_header)
}

/// Random user-disjoint split; the item index space is shared by both halves.
pub fn split_users(
    ds: &RatingDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(RatingDataset, RatingDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(TpgrError::invalid(format!(
            "train fraction {train_fraction} not in (0, 1)"
        )));
    }
    let n = ds.n_users();
    if n < 2 {
        return Err(TpgrError::invalid("need at least 2 users to split"));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut users: Vec<usize> = (0..n).collect();
    users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = users.split_at_mut(n_train);
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.select_users(train), ds.select_users(test)))
}

/// Per-record (positive, negative) run lengths immediately preceding each
/// rating, uncapped. Positive means strictly above `threshold`.
pub fn consecutive_counts(ratings: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(ratings.len());
    let (mut pos, mut neg) = (0usize, 0usize);
    for &r in ratings {
        out.push((pos, neg));
        if r > threshold {
            pos += 1;
            neg = 0;
        } else {
            neg += 1;
            pos = 0;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub count: usize,
    pub sum: f64,
}

impl Bucket {
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Mean raw rating per consecutive positive / negative count, `0..=b_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsecutiveProfile {
    pub b_max: usize,
    pub positive: Vec<Bucket>,
    pub negative: Vec<Bucket>,
}

impl ConsecutiveProfile {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "count,pos_mean,pos_n,neg_mean,neg_n")?;
        let fmt = |m: Option<f64>| m.map(|v| format!("{v:.6}")).unwrap_or_default();
        for b in 0..=self.b_max {
            let (p, n) = (self.positive[b], self.negative[b]);
            writeln!(
                w,
                "{b},{},{},{},{}",
                fmt(p.mean()),
                p.count,
                fmt(n.mean()),
                n.count
            )?;
        }
        Ok(())
    }

    /// Spearman correlation between count and bucket mean over non-empty
    /// buckets; `None` with fewer than two of them.
    pub fn positive_trend(&self) -> Option<f64> {
        trend(&self.positive)
    }

    pub fn negative_trend(&self) -> Option<f64> {
        trend(&self.negative)
    }
}

fn trend(buckets: &[Bucket]) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = buckets
        .iter()
        .enumerate()
        .filter_map(|(b, bucket)| bucket.mean().map(|m| (b as f64, m)))
        .unzip();
    spearman(&xs, &ys)
}

pub fn consecutive_profile(
    ds: &RatingDataset,
    positive_threshold: f64,
    b_max: usize,
) -> Result<ConsecutiveProfile> {
    if b_max < 1 {
        return Err(TpgrError::invalid("b_max must be at least 1"));
    }
    let mut positive = vec![Bucket::default(); b_max + 1];
    let mut negative = vec![Bucket::default(); b_max + 1];
    for session in ds.sessions() {
        let ratings: Vec<f64> = session.iter().map(|r| r.rating).collect();
        for (&r, (p, n)) in ratings
            .iter()
            .zip(consecutive_counts(&ratings, positive_threshold))
        {
            let pb = &mut positive[p.min(b_max)];
            pb.count += 1;
            pb.sum += r;
            let nb = &mut negative[n.min(b_max)];
            nb.count += 1;
            nb.sum += r;
        }
    }
    Ok(ConsecutiveProfile {
        b_max,
        positive,
        negative,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub ratings: usize,
    pub ratings_per_user: usize,
    pub ratings_per_item: usize,
}

impl DatasetStats {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "users,items,ratings,ratings_per_user,ratings_per_item")?;
        writeln!(
            w,
            "{},{},{},{},{}",
            self.users, self.items, self.ratings, self.ratings_per_user, self.ratings_per_item
        )?;
        Ok(())
    }
}

/// Counts plus per-user / per-item averages truncated toward zero, which is
/// how the published MovieLens and Netflix tables report them.
pub fn dataset_stats(ds: &RatingDataset) -> DatasetStats {
    stats_from_counts(ds.n_users(), ds.n_items(), ds.n_ratings())
}

pub fn stats_from_counts(users: usize, items: usize, ratings: usize) -> DatasetStats {
    DatasetStats {
        users,
        items,
        ratings,
        ratings_per_user: ratings.checked_div(users).unwrap_or(0),
        ratings_per_item: ratings.checked_div(items).unwrap_or(0),
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}
