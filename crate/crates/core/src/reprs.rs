//! Item representation vectors fed to the balanced clustering.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RatingDataset;
use crate::error::{Result, TpgrError};
use crate::neural::EmbeddingTable;

/// Read access to a collection of equal-width vectors, dense or sparse.
pub trait VectorSet: Sync {
    fn len(&self) -> usize;

    fn dim(&self) -> usize;

    fn dot(&self, i: usize, v: &[f64]) -> f64;

    /// `out += alpha * x_i`
    fn add_scaled_to(&self, i: usize, alpha: f64, out: &mut [f64]);

    fn sq_norm(&self, i: usize) -> f64;

    fn sq_dist(&self, i: usize, p: &[f64]) -> f64 {
        let p2: f64 = p.iter().map(|x| x * x).sum();
        (self.sq_norm(i) - 2.0 * self.dot(i, p) + p2).max(0.0)
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl VectorSet for [Vec<f64>] {
    fn len(&self) -> usize {
        <[Vec<f64>]>::len(self)
    }

    fn dim(&self) -> usize {
        self.first().map_or(0, Vec::len)
    }

    fn dot(&self, i: usize, v: &[f64]) -> f64 {
        self[i].iter().zip(v).map(|(a, b)| a * b).sum()
    }

    fn add_scaled_to(&self, i: usize, alpha: f64, out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(&self[i]) {
            *o += alpha * x;
        }
    }

    fn sq_norm(&self, i: usize) -> f64 {
        self[i].iter().map(|x| x * x).sum()
    }

    fn sq_dist(&self, i: usize, p: &[f64]) -> f64 {
        self[i].iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

impl VectorSet for Vec<Vec<f64>> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn dim(&self) -> usize {
        self.as_slice().dim()
    }
    fn dot(&self, i: usize, v: &[f64]) -> f64 {
        self.as_slice().dot(i, v)
    }
    fn add_scaled_to(&self, i: usize, alpha: f64, out: &mut [f64]) {
        self.as_slice().add_scaled_to(i, alpha, out)
    }
    fn sq_norm(&self, i: usize) -> f64 {
        self.as_slice().sq_norm(i)
    }
    fn sq_dist(&self, i: usize, p: &[f64]) -> f64 {
        self.as_slice().sq_dist(i, p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReprKind {
    RatingBased,
    MfBased,
    External,
}

#[derive(Debug, Clone, PartialEq)]
enum Rows {
    Dense { dim: usize, data: Vec<f64> },
    /// Each row holds `(column, value)` pairs sorted by column.
    Sparse { dim: usize, rows: Vec<Vec<(usize, f64)>> },
}

/// One row per contiguous item index.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemRepresentation {
    kind: ReprKind,
    rows: Rows,
}

impl ItemRepresentation {
    /// Frozen embedding table with one dense row per item.
    pub fn to_embeddings(&self) -> Result<EmbeddingTable> {
        let data = (0..self.len()).flat_map(|i| self.row_dense(i)).collect();
        EmbeddingTable::pretrained(self.dim(), data)
    }

    pub fn dense(kind: ReprKind, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(TpgrError::Shape(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TpgrError::Numeric("non-finite representation entry".into()));
        }
        Ok(ItemRepresentation {
            kind,
            rows: Rows::Dense { dim, data },
        })
    }

    pub fn kind(&self) -> ReprKind {
        self.kind
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.rows, Rows::Sparse { .. })
    }

    pub fn row_dense(&self, i: usize) -> Vec<f64> {
        match &self.rows {
            Rows::Dense { dim, data } => data[i * dim..(i + 1) * dim].to_vec(),
            Rows::Sparse { dim, rows } => {
                let mut out = vec![0.0; *dim];
                for &(j, v) in &rows[i] {
                    out[j] = v;
                }
                out
            }
        }
    }

    /// Whitespace-delimited text matrix, one item per line.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.len() {
            let row = self.row_dense(i);
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut data = Vec::new();
        let mut dim = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|e| TpgrError::Parse {
                        line: idx + 1,
                        msg: format!("{t:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(TpgrError::Parse {
                        line: idx + 1,
                        msg: format!("expected {d} values, found {}", row.len()),
                    })
                }
                _ => {}
            }
            data.extend(row);
        }
        let dim = dim.ok_or_else(|| TpgrError::Format("empty representation file".into()))?;
        ItemRepresentation::dense(ReprKind::External, dim, data)
    }
}

impl VectorSet for ItemRepresentation {
    fn len(&self) -> usize {
        match &self.rows {
            Rows::Dense { dim, data } => data.len() / dim,
            Rows::Sparse { rows, .. } => rows.len(),
        }
    }

    fn dim(&self) -> usize {
        match &self.rows {
            Rows::Dense { dim, .. } | Rows::Sparse { dim, .. } => *dim,
        }
    }

    fn dot(&self, i: usize, v: &[f64]) -> f64 {
        match &self.rows {
            Rows::Dense { dim, data } => data[i * dim..(i + 1) * dim]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum(),
            Rows::Sparse { rows, .. } => rows[i].iter().map(|&(j, x)| x * v[j]).sum(),
        }
    }

    fn add_scaled_to(&self, i: usize, alpha: f64, out: &mut [f64]) {
        match &self.rows {
            Rows::Dense { dim, data } => {
                for (o, x) in out.iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
                    *o += alpha * x;
                }
            }
            Rows::Sparse { rows, .. } => {
                for &(j, x) in &rows[i] {
                    out[j] += alpha * x;
                }
            }
        }
    }

    fn sq_norm(&self, i: usize) -> f64 {
        match &self.rows {
            Rows::Dense { dim, data } => data[i * dim..(i + 1) * dim].iter().map(|x| x * x).sum(),
            Rows::Sparse { rows, .. } => rows[i].iter().map(|&(_, x)| x * x).sum(),
        }
    }

    fn sq_dist(&self, i: usize, p: &[f64]) -> f64 {
        match &self.rows {
            Rows::Dense { dim, data } => data[i * dim..(i + 1) * dim]
                .iter()
                .zip(p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum(),
            Rows::Sparse { .. } => {
                let p2: f64 = p.iter().map(|x| x * x).sum();
                (self.sq_norm(i) - 2.0 * self.dot(i, p) + p2).max(0.0)
            }
        }
    }
}

/// Columns of the user-item rating matrix, held sparse. A user who rated an
/// item more than once contributes the latest rating.
pub fn rating_based(ds: &RatingDataset) -> ItemRepresentation {
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ds.n_items()];
    for (u, session) in ds.sessions().iter().enumerate() {
        for r in session {
            let row = &mut rows[r.item];
            match row.last_mut() {
                Some(last) if last.0 == u => last.1 = r.rating,
                _ => row.push((u, r.rating)),
            }
        }
    }
    ItemRepresentation {
        kind: ReprKind::RatingBased,
        rows: Rows::Sparse {
            dim: ds.n_users(),
            rows,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig {
            dim: 16,
            epochs: 20,
            learning_rate: 0.01,
            regularization: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfModel {
    pub dim: usize,
    pub user_factors: Vec<f64>,
    pub item_factors: Vec<f64>,
    pub global_bias: f64,
    /// Training RMSE after each epoch.
    pub epoch_rmse: Vec<f64>,
}

impl MfModel {
    pub fn predict(&self, user: usize, item: usize) -> f64 {
        let d = self.dim;
        self.global_bias
            + self.user_factors[user * d..(user + 1) * d]
                .iter()
                .zip(&self.item_factors[item * d..(item + 1) * d])
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    pub fn train_rmse(&self) -> f64 {
        self.epoch_rmse.last().copied().unwrap_or(f64::NAN)
    }
}

/// SGD matrix factorization on raw ratings, `r ≈ b + u·v`, with L2 penalty
/// on the factors.
pub fn mf_train(ds: &RatingDataset, cfg: &MfConfig) -> Result<MfModel> {
    if cfg.dim < 1 {
        return Err(TpgrError::invalid("mf dim must be at least 1"));
    }
    if cfg.epochs < 1 {
        return Err(TpgrError::invalid("mf epochs must be at least 1"));
    }
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut obs: Vec<(usize, usize, f64)> = ds
        .sessions()
        .iter()
        .enumerate()
        .flat_map(|(u, s)| s.iter().map(move |r| (u, r.item, r.rating)))
        .collect();
    let global_bias = if obs.is_empty() {
        0.0
    } else {
        obs.iter().map(|o| o.2).sum::<f64>() / obs.len() as f64
    };
    let mut init = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect() };
    let mut model = MfModel {
        dim: d,
        user_factors: init(ds.n_users() * d),
        item_factors: init(ds.n_items() * d),
        global_bias,
        epoch_rmse: Vec::with_capacity(cfg.epochs),
    };
    let (lr, reg) = (cfg.learning_rate, cfg.regularization);
    for epoch in 0..cfg.epochs {
        obs.shuffle(&mut rng);
        for &(u, i, r) in &obs {
            let err = r - model.predict(u, i);
            model.global_bias += lr * err;
            let (pu, qi) = (
                &mut model.user_factors[u * d..(u + 1) * d],
                &mut model.item_factors[i * d..(i + 1) * d],
            );
            for (x, y) in pu.iter_mut().zip(qi.iter_mut()) {
                let x0 = *x;
                *x += lr * (err * *y - reg * *x);
                *y += lr * (err * x0 - reg * *y);
            }
        }
        let sse: f64 = obs
            .iter()
            .map(|&(u, i, r)| (r - model.predict(u, i)).powi(2))
            .sum();
        let rmse = (sse / obs.len().max(1) as f64).sqrt();
        if !rmse.is_finite() {
            return Err(TpgrError::Numeric(format!(
                "matrix factorization diverged at epoch {} (lr {lr})",
                epoch + 1
            )));
        }
        model.epoch_rmse.push(rmse);
    }
    Ok(model)
}

pub fn mf_item_representation(m: &MfModel) -> ItemRepresentation {
    ItemRepresentation {
        kind: ReprKind::MfBased,
        rows: Rows::Dense {
            dim: m.dim,
            data: m.item_factors.clone(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rating;

    fn toy(matrix: &[Vec<f64>]) -> RatingDataset {
        let n_items = matrix[0].len();
        let sessions = matrix
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &r)| r != 0.0)
                    .map(|(j, &r)| Rating {
                        item: j,
                        rating: r,
                        timestamp: j as u64,
                    })
                    .collect()
            })
            .collect();
        RatingDataset::from_sessions(sessions, n_items).unwrap()
    }

    #[test]
    fn rating_columns() {
        let ds = toy(&[vec![5.0, 0.0], vec![0.0, 0.0]]);
        let rep = rating_based(&ds);
        assert_eq!(rep.kind(), ReprKind::RatingBased);
        assert_eq!(rep.row_dense(0), vec![5.0, 0.0]);
        assert_eq!(rep.row_dense(1), vec![0.0, 0.0]);
    }

    #[test]
    fn rating_columns_match_brute_force_inner_products() {
        let m = vec![
            vec![5.0, 0.0, 3.0, 1.0, 0.0],
            vec![4.0, 2.0, 0.0, 0.0, 1.0],
            vec![0.0, 5.0, 4.0, 0.0, 2.0],
            vec![1.0, 0.0, 0.0, 3.0, 0.0],
            vec![0.0, 4.0, 5.0, 2.0, 0.0],
        ];
        let rep = rating_based(&toy(&m));
        for i in 0..5 {
            let col_i: Vec<f64> = m.iter().map(|r| r[i]).collect();
            assert_eq!(rep.row_dense(i), col_i);
            for j in 0..5 {
                let brute: f64 = m.iter().map(|r| r[i] * r[j]).sum();
                let col_j: Vec<f64> = m.iter().map(|r| r[j]).collect();
                assert_eq!(rep.dot(i, &col_j), brute);
            }
        }
    }

    fn planted() -> (RatingDataset, Vec<f64>) {
        let u: Vec<f64> = (0..20).map(|i| 1.0 + 0.05 * i as f64).collect();
        let v: Vec<f64> = (0..20).map(|j| 1.0 + 0.1 * ((j * 7) % 20) as f64).collect();
        let m: Vec<Vec<f64>> = u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
        (toy(&m), v)
    }

    #[test]
    fn mf_recovers_planted_rank_one() {
        let (ds, v) = planted();
        let cfg = MfConfig {
            dim: 1,
            epochs: 300,
            learning_rate: 0.01,
            regularization: 0.0,
            seed: 3,
        };
        let m = mf_train(&ds, &cfg).unwrap();
        assert!(m.train_rmse() < 0.05, "rmse {}", m.train_rmse());

        let rep = mf_item_representation(&m);
        assert_eq!(rep.dim(), 1);
        let got: Vec<f64> = (0..20).map(|i| rep.row_dense(i)[0]).collect();
        assert!(got.iter().all(|x| x.is_finite()));
        // item factors absorb the bias, so compare centered vectors
        let center = |x: &[f64]| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|a| a - m).collect::<Vec<_>>()
        };
        let (a, b) = (center(&got), center(&v));
        let cos = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
            / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt());
        assert!(cos.abs() > 0.9, "cos {cos}");
    }

    #[test]
    fn mf_is_deterministic_and_validates() {
        let (ds, _) = planted();
        let cfg = MfConfig {
            dim: 8,
            epochs: 3,
            ..MfConfig::default()
        };
        let a = mf_train(&ds, &cfg).unwrap();
        let b = mf_train(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(mf_item_representation(&a).dim(), 8);
        assert!(mf_train(&ds, &MfConfig { epochs: 0, ..cfg }).is_err());
        assert!(mf_train(&ds, &MfConfig { dim: 0, ..cfg }).is_err());
        let diverge = MfConfig {
            learning_rate: 1e3,
            ..cfg
        };
        assert!(matches!(mf_train(&ds, &diverge), Err(TpgrError::Numeric(_))));
    }

    #[test]
    fn mf_loss_non_increasing_single_user() {
        let ds = toy(&[vec![4.0, 2.0, 5.0, 1.0, 3.0]]);
        let cfg = MfConfig {
            dim: 1,
            epochs: 50,
            learning_rate: 0.005,
            regularization: 0.0,
            seed: 11,
        };
        let m = mf_train(&ds, &cfg).unwrap();
        for w in m.epoch_rmse.windows(2) {
            assert!(w[1] <= w[0] + 1e-8, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn text_export_round_trip() {
        let rep = rating_based(&toy(&[vec![5.0, 0.0, 2.5], vec![1.0, 3.0, 0.0]]));
        let mut buf = Vec::new();
        rep.write_text(&mut buf).unwrap();
        let back = ItemRepresentation::read_text(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        for i in 0..3 {
            assert_eq!(back.row_dense(i), rep.row_dense(i));
        }
        assert!(ItemRepresentation::read_text("1 2\n3\n".as_bytes()).is_err());
    }
}
