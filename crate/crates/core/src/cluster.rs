//! Balanced clustering and the balanced item tree.
//!
//! The tree is stored in array form: node 1 is the root and the `j`-th child
//! (1-based) of node `i` is node `(i - 1) * c + j + 1`. Leaves carry items;
//! slots that no item reaches stay unpopulated.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TpgrError};
use crate::reprs::VectorSet;

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_REL_TOL: f64 = 1e-6;
const POWER_MAX_ITERS: usize = 500;
const POWER_COS_TOL: f64 = 1e-10;
/// Fixed seed for the power-iteration start vector, so the principal
/// component is a pure function of the data.
const POWER_INIT_SEED: u64 = 0x5eed_0f_9ca;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalancedClusters {
    pub clusters: Vec<Vec<usize>>,
}

impl BalancedClusters {
    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Vec::len).collect()
    }
}

fn check_input<V: VectorSet + ?Sized>(vs: &V, c: usize) -> Result<()> {
    if c < 1 {
        return Err(TpgrError::invalid("number of clusters must be at least 1"));
    }
    if vs.is_empty() {
        return Err(TpgrError::invalid("no vectors to cluster"));
    }
    Ok(())
}

fn check_dims(vs: &[Vec<f64>]) -> Result<()> {
    let d = vs.first().map_or(0, Vec::len);
    match vs.iter().position(|v| v.len() != d) {
        Some(i) => Err(TpgrError::Shape(format!(
            "vector {i} has dimension {}, expected {d}",
            vs[i].len()
        ))),
        None => Ok(()),
    }
}

/// K-means followed by round-robin nearest-unassigned assignment, which
/// forces cluster sizes to differ by at most one.
pub fn kmeans_balanced(vectors: &[Vec<f64>], c: usize, seed: u64) -> Result<BalancedClusters> {
    check_input(vectors, c)?;
    check_dims(vectors)?;
    let all: Vec<usize> = (0..vectors.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(BalancedClusters {
        clusters: kmeans_subset(vectors, &all, c, &mut rng),
    })
}

pub fn pca_balanced(vectors: &[Vec<f64>], c: usize) -> Result<BalancedClusters> {
    check_input(vectors, c)?;
    check_dims(vectors)?;
    let all: Vec<usize> = (0..vectors.len()).collect();
    Ok(BalancedClusters {
        clusters: pca_subset(vectors, &all, c, true)?,
    })
}

pub fn principal_component(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_dims(vectors)?;
    let all: Vec<usize> = (0..vectors.len()).collect();
    principal_component_subset(vectors, &all)?
        .ok_or_else(|| TpgrError::Numeric("zero-variance input has no principal component".into()))
}

fn singletons(subset: &[usize]) -> Vec<Vec<usize>> {
    subset.iter().map(|&i| vec![i]).collect()
}

fn kmeans_subset<V: VectorSet + ?Sized>(
    vs: &V,
    subset: &[usize],
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let m = subset.len();
    if m <= c {
        return singletons(subset);
    }
    let centroids = lloyd(vs, subset, c, rng);

    // Each centroid walks its own distance-sorted list; assigned entries are
    // skipped, so every turn costs amortized O(1) after the sort.
    let order: Vec<Vec<usize>> = centroids
        .par_iter()
        .map(|p| {
            let dist: Vec<f64> = subset.iter().map(|&i| vs.sq_dist(i, p)).collect();
            let mut pos: Vec<usize> = (0..m).collect();
            pos.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
            pos
        })
        .collect();
    let mut cursor = vec![0usize; c];
    let mut assigned = vec![false; m];
    let mut clusters = vec![Vec::with_capacity(m / c + 1); c];
    let mut i = 0;
    for _ in 0..m {
        while assigned[order[i][cursor[i]]] {
            cursor[i] += 1;
        }
        let pos = order[i][cursor[i]];
        assigned[pos] = true;
        clusters[i].push(subset[pos]);
        i = (i + 1) % c;
    }
    clusters
}

/// Lloyd iterations from a k-means++ seeding; returns `c` centroids.
fn lloyd<V: VectorSet + ?Sized>(
    vs: &V,
    subset: &[usize],
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let dim = vs.dim();
    let m = subset.len();
    let dense = |i: usize| {
        let mut p = vec![0.0; dim];
        vs.add_scaled_to(i, 1.0, &mut p);
        p
    };

    let mut centroids = vec![dense(subset[rng.gen_range(0..m)])];
    let mut d2: Vec<f64> = subset.iter().map(|&i| vs.sq_dist(i, &centroids[0])).collect();
    while centroids.len() < c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = m - 1;
            for (k, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = k;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..m)
        };
        let p = dense(subset[pick]);
        for (k, &i) in subset.iter().enumerate() {
            d2[k] = d2[k].min(vs.sq_dist(i, &p));
        }
        centroids.push(p);
    }

    let mut prev_inertia = f64::INFINITY;
    for _ in 0..KMEANS_MAX_ITERS {
        let nearest: Vec<(usize, f64)> = subset
            .par_iter()
            .map(|&i| {
                let mut best = (0, f64::INFINITY);
                for (k, p) in centroids.iter().enumerate() {
                    let d = vs.sq_dist(i, p);
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                best
            })
            .collect();
        let inertia: f64 = nearest.iter().map(|n| n.1).sum();

        let mut sums = vec![vec![0.0; dim]; c];
        let mut counts = vec![0usize; c];
        for (&i, &(k, _)) in subset.iter().zip(&nearest) {
            vs.add_scaled_to(i, 1.0, &mut sums[k]);
            counts[k] += 1;
        }
        for (k, sum) in sums.into_iter().enumerate() {
            // an empty cluster keeps its previous centroid
            if counts[k] > 0 {
                let inv = 1.0 / counts[k] as f64;
                centroids[k] = sum.into_iter().map(|x| x * inv).collect();
            }
        }
        if inertia == 0.0 || (prev_inertia - inertia).abs() <= KMEANS_REL_TOL * inertia {
            break;
        }
        prev_inertia = inertia;
    }
    centroids
}

/// `None` when the subset has no variance.
fn principal_component_subset<V: VectorSet + ?Sized>(vs: &V, subset: &[usize]) -> Result<Option<Vec<f64>>> {
    let m = subset.len();
    if m < 2 {
        return Err(TpgrError::invalid("principal component needs at least 2 vectors"));
    }
    let dim = vs.dim();
    let inv_m = 1.0 / m as f64;
    let mut mean = vec![0.0; dim];
    for &i in subset {
        vs.add_scaled_to(i, inv_m, &mut mean);
    }
    let spread: f64 = subset.iter().map(|&i| vs.sq_dist(i, &mean)).sum::<f64>() * inv_m;
    let scale: f64 = subset.iter().map(|&i| vs.sq_norm(i)).sum::<f64>() * inv_m;
    if spread <= 1e-12 * (1.0 + scale) {
        return Ok(None);
    }

    // covariance-vector product without forming the covariance:
    // C v = (1/m) sum_i x_i (x_i . v) - mean (mean . v)
    let cov_apply = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for &i in subset {
            let proj = vs.dot(i, v);
            if proj != 0.0 {
                vs.add_scaled_to(i, proj * inv_m, &mut out);
            }
        }
        let mv: f64 = mean.iter().zip(v).map(|(a, b)| a * b).sum();
        for (o, mu) in out.iter_mut().zip(&mean) {
            *o -= mu * mv;
        }
        out
    };

    let mut rng = ChaCha8Rng::seed_from_u64(POWER_INIT_SEED);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut v)?;
    for _ in 0..POWER_MAX_ITERS {
        let mut w = cov_apply(&v);
        normalize(&mut w)?;
        let cos: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        v = w;
        if 1.0 - cos.abs() < POWER_COS_TOL {
            break;
        }
    }
    let lead = v
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |best, (k, x)| if x.abs() > best.1 { (k, x.abs()) } else { best })
        .0;
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(Some(v))
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(TpgrError::Numeric("power iteration collapsed to zero".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Sizes of the chunks cut from `m` sorted vectors: the first
/// `((m - 1) mod c) + 1` chunks hold `ceil(m / c)`, the rest one fewer.
pub fn pca_chunk_sizes(m: usize, c: usize) -> Vec<usize> {
    let long = m.div_ceil(c);
    let threshold = (m - 1) % c + 1;
    (0..c).map(|j| if j < threshold { long } else { long - 1 }).collect()
}

/// With `strict`, zero variance is an error; otherwise identical vectors
/// are cut in index order.
fn pca_subset<V: VectorSet + ?Sized>(vs: &V, subset: &[usize], c: usize, strict: bool) -> Result<Vec<Vec<usize>>> {
    let m = subset.len();
    if m <= c {
        return Ok(singletons(subset));
    }
    let u = principal_component_subset(vs, subset)?;
    if strict && u.is_none() {
        return Err(TpgrError::Numeric("zero-variance input cannot be split by projection".into()));
    }
    let mut keyed: Vec<(f64, usize)> = subset
        .iter()
        .map(|&i| (u.as_ref().map_or(0.0, |u| vs.dot(i, u)), i))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = Vec::with_capacity(c);
    let mut start = 0;
    for len in pca_chunk_sizes(m, c) {
        out.push(keyed[start..start + len].iter().map(|k| k.1).collect());
        start += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    KMeans,
    Pca,
}

impl std::str::FromStr for ClusterMethod {
    type Err = TpgrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(ClusterMethod::KMeans),
            "pca" => Ok(ClusterMethod::Pca),
            other => Err(TpgrError::invalid(format!("unknown clustering method {other:?}"))),
        }
    }
}

/// Smallest `c` with `c^d >= n`, computed in integers.
pub fn branching_factor(n_items: usize, depth: usize) -> usize {
    assert!(depth >= 1 && n_items >= 1);
    let mut c = (n_items as f64).powf(1.0 / depth as f64).ceil().max(1.0) as usize;
    let covers = |c: usize| {
        let mut acc: u128 = 1;
        for _ in 0..depth {
            acc = acc.saturating_mul(c as u128);
            if acc >= n_items as u128 {
                return true;
            }
        }
        acc >= n_items as u128
    };
    while !covers(c) {
        c += 1;
    }
    while c > 1 && covers(c - 1) {
        c -= 1;
    }
    c
}

/// Internal node slots of a full `c`-ary tree of depth `d`: `(c^d - 1) / (c - 1)`.
pub fn internal_slots(c: usize, depth: usize) -> usize {
    if c == 1 {
        return depth;
    }
    (0..depth).map(|k| c.pow(k as u32)).sum()
}

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterTree {
    depth: usize,
    branching: usize,
    /// Indexed by node; slot 0 unused. Zero for leaves and empty slots.
    child_count: Vec<u32>,
    leaf_item: Vec<u32>,
    leaf_count: Vec<u32>,
    item_leaf: Vec<u32>,
    internal_rank: Vec<u32>,
    internal_nodes: Vec<u32>,
}

/// Root-to-leaf route of one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreePath {
    /// 1-based child choices.
    pub choices: Vec<usize>,
    /// Internal nodes visited, starting at the root.
    pub nodes: Vec<usize>,
    pub leaf: usize,
}

impl ClusterTree {
    pub fn build<V: VectorSet + ?Sized>(
        rep: &V,
        depth: usize,
        method: ClusterMethod,
        seed: u64,
    ) -> Result<Self> {
        if depth < 1 {
            return Err(TpgrError::invalid("tree depth must be at least 1"));
        }
        let n = rep.len();
        if n < 1 {
            return Err(TpgrError::invalid("cannot build a tree over zero items"));
        }
        let c = branching_factor(n, depth);
        let mut child_count: Vec<u32> = vec![0; 2];
        let mut leaf_item: Vec<u32> = vec![NONE; 2];

        // Level-synchronous division; siblings cluster independently and are
        // merged back in node order.
        let mut frontier: Vec<(usize, Vec<usize>)> = vec![(1, (0..n).collect())];
        while !frontier.is_empty() {
            let divided: Vec<Result<Vec<Vec<usize>>>> = frontier
                .par_iter()
                .map(|(node, items)| {
                    if items.len() == 1 {
                        return Ok(Vec::new());
                    }
                    match method {
                        ClusterMethod::KMeans => {
                            let mut rng = ChaCha8Rng::seed_from_u64(seed);
                            rng.set_stream(*node as u64);
                            Ok(kmeans_subset(rep, items, c, &mut rng))
                        }
                        ClusterMethod::Pca => pca_subset(rep, items, c, false),
                    }
                })
                .collect();
            let mut next = Vec::new();
            for ((node, items), parts) in frontier.into_iter().zip(divided) {
                let parts = parts?;
                if parts.is_empty() {
                    leaf_item[node] = items[0] as u32;
                    continue;
                }
                child_count[node] = parts.len() as u32;
                for (j, part) in parts.into_iter().enumerate() {
                    let child = (node - 1) * c + j + 2;
                    if child >= child_count.len() {
                        child_count.resize(child + 1, 0);
                        leaf_item.resize(child + 1, NONE);
                    }
                    next.push((child, part));
                }
            }
            frontier = next;
        }
        Self::assemble(depth, c, n, child_count, leaf_item)
    }

    /// Derives the lookup tables from child counts and leaf items, checking
    /// structural consistency.
    fn assemble(
        depth: usize,
        branching: usize,
        n_items: usize,
        child_count: Vec<u32>,
        leaf_item: Vec<u32>,
    ) -> Result<Self> {
        let slots = child_count.len();
        let bad = |msg: String| Err(TpgrError::Format(msg));
        let mut item_leaf = vec![NONE; n_items];
        let mut populated = vec![false; slots];
        if slots > 1 {
            populated[1] = true;
        }
        let mut internal_rank = vec![NONE; slots];
        let mut internal_nodes = Vec::new();
        for node in 1..slots {
            let kids = child_count[node] as usize;
            if !populated[node] {
                if kids > 0 || leaf_item[node] != NONE {
                    return bad(format!("node {node} is detached from the root"));
                }
                continue;
            }
            if kids > 0 {
                if leaf_item[node] != NONE {
                    return bad(format!("node {node} is both leaf and internal"));
                }
                if kids > branching {
                    return bad(format!("node {node} has {kids} > {branching} children"));
                }
                internal_rank[node] = internal_nodes.len() as u32;
                internal_nodes.push(node as u32);
                for j in 0..kids {
                    let child = (node - 1) * branching + j + 2;
                    if child >= slots {
                        return bad(format!("child {child} of node {node} out of range"));
                    }
                    populated[child] = true;
                }
            } else {
                let item = leaf_item[node];
                if item == NONE {
                    return bad(format!("node {node} has neither children nor item"));
                }
                let item = item as usize;
                if item >= n_items || item_leaf[item] != NONE {
                    return bad(format!("item {item} at node {node} is out of range or repeated"));
                }
                item_leaf[item] = node as u32;
            }
        }
        if let Some(item) = item_leaf.iter().position(|&l| l == NONE) {
            return bad(format!("item {item} has no leaf"));
        }
        let mut leaf_count = vec![0u32; slots];
        for &leaf in &item_leaf {
            let mut node = leaf as usize;
            loop {
                leaf_count[node] += 1;
                if node == 1 {
                    break;
                }
                node = (node - 2) / branching + 1;
            }
        }
        let tree = ClusterTree {
            depth,
            branching,
            child_count,
            leaf_item,
            leaf_count,
            item_leaf,
            internal_rank,
            internal_nodes,
        };
        if tree.max_depth() > depth {
            return bad(format!(
                "tree reaches depth {} beyond configured {depth}",
                tree.max_depth()
            ));
        }
        Ok(tree)
    }

    /// Configured depth `d`; the deepest leaf may sit above it.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn n_items(&self) -> usize {
        self.item_leaf.len()
    }

    /// Number of node slots including unpopulated ones (slot 0 excluded).
    pub fn n_slots(&self) -> usize {
        self.child_count.len() - 1
    }

    pub fn n_internal(&self) -> usize {
        self.internal_nodes.len()
    }

    pub fn internal_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.internal_nodes.iter().map(|&n| n as usize)
    }

    /// Single-item tree: the root is the only leaf.
    pub fn is_degenerate(&self) -> bool {
        self.internal_nodes.is_empty()
    }

    /// Ordinal of an internal node among internal nodes in node-index order.
    pub fn internal_rank(&self, node: usize) -> Option<usize> {
        match self.internal_rank.get(node) {
            Some(&r) if r != NONE => Some(r as usize),
            _ => None,
        }
    }

    pub fn child_count(&self, node: usize) -> usize {
        self.child_count.get(node).copied().unwrap_or(0) as usize
    }

    /// Node reached by 1-based choice `j` at `node`.
    pub fn child(&self, node: usize, choice: usize) -> usize {
        (node - 1) * self.branching + choice + 1
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        (node > 1).then(|| (node - 2) / self.branching + 1)
    }

    pub fn leaf_item(&self, node: usize) -> Option<usize> {
        match self.leaf_item.get(node) {
            Some(&i) if i != NONE => Some(i as usize),
            _ => None,
        }
    }

    pub fn item_leaf(&self, item: usize) -> Option<usize> {
        self.item_leaf.get(item).map(|&l| l as usize)
    }

    /// Items in the subtree rooted at `node`.
    pub fn leaf_count(&self, node: usize) -> usize {
        self.leaf_count.get(node).copied().unwrap_or(0) as usize
    }

    pub(crate) fn leaf_counts(&self) -> &[u32] {
        &self.leaf_count
    }

    pub fn node_depth(&self, mut node: usize) -> usize {
        let mut d = 0;
        while let Some(p) = self.parent(node) {
            node = p;
            d += 1;
        }
        d
    }

    pub fn max_depth(&self) -> usize {
        self.item_leaf
            .iter()
            .map(|&l| self.node_depth(l as usize))
            .max()
            .unwrap_or(0)
    }

    /// Height of the subtree at `node` (a leaf has height 0).
    pub fn height(&self, node: usize) -> usize {
        let kids = self.child_count(node);
        (1..=kids)
            .map(|j| 1 + self.height(self.child(node, j)))
            .max()
            .unwrap_or(0)
    }

    /// Follows the choices from the root. Returns `None` when the walk does
    /// not end exactly on a populated leaf.
    pub fn path_to_item(&self, path: &[usize]) -> Result<Option<usize>> {
        if path.len() > self.depth || (path.is_empty() && !self.is_degenerate()) {
            return Err(TpgrError::invalid(format!(
                "path of length {} for a tree of depth {}",
                path.len(),
                self.depth
            )));
        }
        let mut node = 1;
        for &choice in path {
            if choice < 1 || choice > self.branching {
                return Err(TpgrError::invalid(format!(
                    "choice {choice} outside 1..={}",
                    self.branching
                )));
            }
            if choice > self.child_count(node) {
                return Ok(None);
            }
            node = self.child(node, choice);
        }
        Ok(self.leaf_item(node))
    }

    pub fn item_to_path(&self, item: usize) -> Result<TreePath> {
        let leaf = self.item_leaf(item).ok_or(TpgrError::UnknownItem(item))?;
        let mut choices = Vec::with_capacity(self.depth);
        let mut nodes = Vec::with_capacity(self.depth);
        let mut node = leaf;
        while let Some(p) = self.parent(node) {
            choices.push((node - 2) % self.branching + 1);
            nodes.push(p);
            node = p;
        }
        choices.reverse();
        nodes.reverse();
        Ok(TreePath {
            choices,
            nodes,
            leaf,
        })
    }

    pub const MAGIC: &'static [u8] = b"TPGRTREE\x01";

    /// Binary layout, all integers u32 little-endian after the magic:
    /// `d, c, n_items, n_slots, child_count[1..=n_slots], n_leaves,
    /// (leaf node, item) * n_leaves` with leaves in node order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        let mut put = |v: usize| -> Result<()> {
            let v = u32::try_from(v).map_err(|_| TpgrError::Format(format!("{v} exceeds u32")))?;
            w.write_all(&v.to_le_bytes())?;
            Ok(())
        };
        put(self.depth)?;
        put(self.branching)?;
        put(self.n_items())?;
        put(self.n_slots())?;
        for node in 1..=self.n_slots() {
            put(self.child_count[node] as usize)?;
        }
        put(self.n_items())?;
        for node in 1..=self.n_slots() {
            if let Some(item) = self.leaf_item(node) {
                put(node)?;
                put(item)?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic)?;
        if magic != Self::MAGIC {
            return Err(TpgrError::Format("not a tree file (bad magic)".into()));
        }
        let mut get = || -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let depth = get()?;
        let branching = get()?;
        let n_items = get()?;
        let n_slots = get()?;
        if depth < 1 || branching < 1 || n_items < 1 || n_slots < 1 {
            return Err(TpgrError::Format("tree header out of range".into()));
        }
        let mut child_count = vec![0u32; n_slots + 1];
        for slot in child_count.iter_mut().skip(1) {
            *slot = get()? as u32;
        }
        let n_leaves = get()?;
        if n_leaves != n_items {
            return Err(TpgrError::Format(format!(
                "{n_leaves} leaves for {n_items} items"
            )));
        }
        let mut leaf_item = vec![NONE; n_slots + 1];
        for _ in 0..n_leaves {
            let node = get()?;
            let item = get()?;
            if node == 0 || node > n_slots {
                return Err(TpgrError::Format(format!("leaf node {node} out of range")));
            }
            leaf_item[node] = item as u32;
        }
        Self::assemble(depth, branching, n_items, child_count, leaf_item)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let nodes: Vec<serde_json::Value> = (1..=self.n_slots())
            .filter(|&n| self.child_count(n) > 0 || self.leaf_item(n).is_some())
            .map(|n| match self.leaf_item(n) {
                Some(item) => serde_json::json!({ "node": n, "item": item }),
                None => serde_json::json!({
                    "node": n,
                    "children": self.child_count(n),
                    "leaves": self.leaf_count(n),
                }),
            })
            .collect();
        serde_json::json!({
            "depth": self.depth,
            "branching": self.branching,
            "items": self.n_items(),
            "internal_nodes": self.n_internal(),
            "nodes": nodes,
        })
    }
}
