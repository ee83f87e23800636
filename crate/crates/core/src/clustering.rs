//! HDBSCAN over Hamming distances, parameter grid search and cluster ranking.
//!
//! Distances are small integers, so equal-weight edges are common. The
//! hierarchy is built level by level: every component that forms at a given
//! mutual-reachability distance is one node, however many edges of that
//! weight joined it. This makes the condensed tree independent of the order
//! in which tied edges are visited.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::ops::Add;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

pub const GRID_MIN_CLUSTER_SIZE: [usize; 7] = [2, 3, 4, 5, 6, 10, 15];
pub const GRID_MIN_SAMPLES: [usize; 5] = [1, 2, 3, 4, 5];

pub const NOISE: i32 = -1;

pub fn hamming(a: &[u8], b: &[u8]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count() as u32)
}

/// Symmetric matrix of pairwise Hamming distances.
pub fn distance_matrix(rows: &[Vec<u8>]) -> Result<Vec<Vec<u32>>> {
    let n = rows.len();
    let mut d = vec![vec![0u32; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let h = hamming(&rows[i], &rows[j])?;
            d[i][j] = h;
            d[j][i] = h;
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLabeling {
    pub labels: Vec<i32>,
    pub min_cluster_size: usize,
    pub min_samples: usize,
}

impl ClusterLabeling {
    fn all_noise(n: usize, min_cluster_size: usize, min_samples: usize) -> Self {
        ClusterLabeling {
            labels: vec![NOISE; n],
            min_cluster_size,
            min_samples,
        }
    }

    /// Size of every non-noise label, keyed by label.
    pub fn sizes(&self) -> BTreeMap<i32, usize> {
        let mut sizes = BTreeMap::new();
        for &l in self.labels.iter().filter(|&&l| l != NOISE) {
            *sizes.entry(l).or_default() += 1;
        }
        sizes
    }

    pub fn cluster_count(&self) -> usize {
        self.sizes().len()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    pub fn noise_ratio(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            self.noise_count() as f64 / self.labels.len() as f64
        }
    }

    pub fn members(&self, label: i32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Cluster stability with infinite terms counted separately: points that
/// never leave a cluster (distance 0) contribute an infinite lambda.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stability {
    pub infinite: usize,
    pub finite: BigRational,
}

impl Stability {
    pub fn zero() -> Self {
        Stability {
            infinite: 0,
            finite: BigRational::zero(),
        }
    }
}

impl Add for &Stability {
    type Output = Stability;

    fn add(self, rhs: &Stability) -> Stability {
        Stability {
            infinite: self.infinite + rhs.infinite,
            finite: &self.finite + &rhs.finite,
        }
    }
}

impl PartialOrd for Stability {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Stability {
    fn cmp(&self, other: &Self) -> Ordering {
        self.infinite.cmp(&other.infinite).then_with(|| self.finite.cmp(&other.finite))
    }
}

/// Lambda = 1 / distance; `None` stands for infinity (distance 0).
fn lambda(distance: u32) -> Option<BigRational> {
    if distance == 0 {
        None
    } else {
        Some(BigRational::new(BigInt::from(1), BigInt::from(distance)))
    }
}

/// Core distance of each point: distance to its `min_samples`-th nearest
/// other point.
pub fn core_distances(d: &[Vec<u32>], min_samples: usize) -> Vec<u32> {
    (0..d.len())
        .map(|i| {
            let mut others: Vec<u32> = (0..d.len()).filter(|&j| j != i).map(|j| d[i][j]).collect();
            others.sort_unstable();
            others[min_samples - 1]
        })
        .collect()
}

pub fn mutual_reachability(d: &[Vec<u32>], core: &[u32]) -> Vec<Vec<u32>> {
    let n = d.len();
    let mut m = vec![vec![0u32; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m[i][j] = d[i][j].max(core[i]).max(core[j]);
            }
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: u32,
}

/// Kruskal over all pairs, edges ordered by (mutual reachability, raw
/// distance, lower index, higher index).
pub fn minimum_spanning_tree(mr: &[Vec<u32>], d: &[Vec<u32>]) -> Vec<MstEdge> {
    let n = mr.len();
    let mut edges: Vec<(u32, u32, usize, usize)> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            edges.push((mr[i][j], d[i][j], i, j));
        }
    }
    edges.sort_unstable();
    let mut uf = UnionFind::new(n);
    let mut tree = Vec::with_capacity(n.saturating_sub(1));
    for (w, _, a, b) in edges {
        if uf.union(a, b) {
            tree.push(MstEdge { a, b, weight: w });
            if tree.len() + 1 == n {
                break;
            }
        }
    }
    tree
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        true
    }
}

/// A component of the single-linkage hierarchy. Leaves are single points.
#[derive(Debug, Clone)]
struct LevelNode {
    members: Vec<usize>,
    /// Distance at which this component formed; `None` for leaves.
    weight: Option<u32>,
    children: Vec<usize>,
}

/// Builds the level hierarchy from the MST; returns nodes and the root index.
fn level_hierarchy(n: usize, mst: &[MstEdge]) -> (Vec<LevelNode>, usize) {
    let mut nodes: Vec<LevelNode> = (0..n)
        .map(|i| LevelNode {
            members: vec![i],
            weight: None,
            children: Vec::new(),
        })
        .collect();
    // Node currently representing each union-find root.
    let mut current: Vec<usize> = (0..n).collect();
    let mut uf = UnionFind::new(n);
    let mut edges = mst.to_vec();
    edges.sort_by_key(|e| (e.weight, e.a.min(e.b), e.a.max(e.b)));
    let mut k = 0;
    while k < edges.len() {
        let w = edges[k].weight;
        let mut end = k;
        while end < edges.len() && edges[end].weight == w {
            end += 1;
        }
        // Components touched at this level, grouped by their final root.
        let mut before: Vec<(usize, usize)> = Vec::new();
        for e in &edges[k..end] {
            for p in [e.a, e.b] {
                let r = uf.find(p);
                before.push((p, current[r]));
            }
        }
        for e in &edges[k..end] {
            uf.union(e.a, e.b);
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (p, node) in before {
            let root = uf.find(p);
            let g = groups.entry(root).or_default();
            if !g.contains(&node) {
                g.push(node);
            }
        }
        for (root, mut children) in groups {
            children.sort_by_key(|&c| nodes[c].members[0]);
            let mut members: Vec<usize> = children.iter().flat_map(|&c| nodes[c].members.iter().copied()).collect();
            members.sort_unstable();
            nodes.push(LevelNode {
                members,
                weight: Some(w),
                children,
            });
            current[root] = nodes.len() - 1;
        }
        k = end;
    }
    let root = current[uf.find(0)];
    (nodes, root)
}

/// A cluster of the condensed tree.
#[derive(Debug, Clone)]
pub struct CondensedCluster {
    pub members: Vec<usize>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub stability: Stability,
}

/// Condenses the hierarchy: a component splits into new clusters only when at
/// least two of its parts have `min_cluster_size` points; smaller parts fall
/// out as points leaving the cluster.
fn condense(nodes: &[LevelNode], root: usize, min_cluster_size: usize) -> Vec<CondensedCluster> {
    let mut clusters = vec![CondensedCluster {
        members: nodes[root].members.clone(),
        parent: None,
        children: Vec::new(),
        stability: Stability::zero(),
    }];
    // (cluster id, hierarchy node, birth lambda)
    let mut stack = vec![(0usize, root, BigRational::zero())];
    while let Some((cid, start, birth)) = stack.pop() {
        let mut node = start;
        let mut stab = Stability::zero();
        loop {
            let w = nodes[node].weight.expect("cluster nodes have at least two points");
            let lam = lambda(w);
            let leave = |count: usize, stab: &mut Stability| match &lam {
                None => stab.infinite += count,
                Some(l) => stab.finite += (l - &birth) * BigInt::from(count),
            };
            let children = &nodes[node].children;
            let big: Vec<usize> = children.iter().copied().filter(|&c| nodes[c].members.len() >= min_cluster_size).collect();
            if big.len() == 1 {
                let small: usize = children.iter().filter(|&&c| c != big[0]).map(|&c| nodes[c].members.len()).sum();
                leave(small, &mut stab);
                node = big[0];
                continue;
            }
            leave(nodes[node].members.len(), &mut stab);
            if big.len() >= 2 {
                let child_birth = lam.expect("splits happen at positive distance");
                for c in big {
                    let id = clusters.len();
                    clusters.push(CondensedCluster {
                        members: nodes[c].members.clone(),
                        parent: Some(cid),
                        children: Vec::new(),
                        stability: Stability::zero(),
                    });
                    clusters[cid].children.push(id);
                    stack.push((id, c, child_birth.clone()));
                }
            }
            break;
        }
        clusters[cid].stability = stab;
    }
    // Depth-first numbering would depend on stack order; renumber by creation
    // order of (parent, first member) so ids are stable.
    clusters
}

/// Excess-of-mass selection. A parent is kept when its stability is at least
/// the best total of its descendants. The root counts only when no split
/// produced any other cluster.
fn select_eom(clusters: &[CondensedCluster]) -> Vec<usize> {
    fn best(c: usize, clusters: &[CondensedCluster]) -> (Stability, Vec<usize>) {
        let cl = &clusters[c];
        if cl.children.is_empty() {
            return (cl.stability.clone(), vec![c]);
        }
        let mut total = Stability::zero();
        let mut chosen = Vec::new();
        for &ch in &cl.children {
            let (s, sel) = best(ch, clusters);
            total = &total + &s;
            chosen.extend(sel);
        }
        if cl.parent.is_some() && cl.stability >= total {
            (cl.stability.clone(), vec![c])
        } else {
            (total, chosen)
        }
    }
    best(0, clusters).1
}

/// Condensed tree for given parameters; exposed for inspection and tests.
pub fn condensed_tree(d: &[Vec<u32>], min_cluster_size: usize, min_samples: usize) -> Option<Vec<CondensedCluster>> {
    let n = d.len();
    if n < min_samples + 1 || n < min_cluster_size || n < 2 {
        return None;
    }
    let core = core_distances(d, min_samples);
    let mr = mutual_reachability(d, &core);
    let mst = minimum_spanning_tree(&mr, d);
    let (nodes, root) = level_hierarchy(n, &mst);
    Some(condense(&nodes, root, min_cluster_size))
}

/// HDBSCAN labels over a precomputed distance matrix.
pub fn hdbscan_distances(d: &[Vec<u32>], min_cluster_size: usize, min_samples: usize) -> Result<ClusterLabeling> {
    if min_cluster_size < 2 || min_samples < 1 {
        return Err(Error::InvalidParameter(format!(
            "min_cluster_size={min_cluster_size} (>= 2), min_samples={min_samples} (>= 1)"
        )));
    }
    let n = d.len();
    let Some(clusters) = condensed_tree(d, min_cluster_size, min_samples) else {
        return Ok(ClusterLabeling::all_noise(n, min_cluster_size, min_samples));
    };
    let mut selected = select_eom(&clusters);
    selected.sort_by_key(|&c| clusters[c].members[0]);
    let mut labels = vec![NOISE; n];
    for (label, &c) in selected.iter().enumerate() {
        for &p in &clusters[c].members {
            labels[p] = label as i32;
        }
    }
    Ok(ClusterLabeling {
        labels,
        min_cluster_size,
        min_samples,
    })
}

pub fn hdbscan(matrix: &FeatureMatrix, min_cluster_size: usize, min_samples: usize) -> Result<ClusterLabeling> {
    let d = distance_matrix(&matrix.rows)?;
    hdbscan_distances(&d, min_cluster_size, min_samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchRow {
    pub min_cluster_size: usize,
    pub min_samples: usize,
    pub cluster_count: usize,
    pub noise_count: usize,
    pub noise_ratio: f64,
}

/// Every grid pair, sorted by noise ratio, then by the parameters.
pub fn grid_search_distances(d: &[Vec<u32>]) -> Result<Vec<GridSearchRow>> {
    let mut rows = Vec::with_capacity(GRID_MIN_CLUSTER_SIZE.len() * GRID_MIN_SAMPLES.len());
    for mcs in GRID_MIN_CLUSTER_SIZE {
        for ms in GRID_MIN_SAMPLES {
            let l = hdbscan_distances(d, mcs, ms)?;
            rows.push(GridSearchRow {
                min_cluster_size: mcs,
                min_samples: ms,
                cluster_count: l.cluster_count(),
                noise_count: l.noise_count(),
                noise_ratio: l.noise_ratio(),
            });
        }
    }
    rows.sort_by(|a, b| {
        a.noise_count
            .cmp(&b.noise_count)
            .then(a.min_cluster_size.cmp(&b.min_cluster_size))
            .then(a.min_samples.cmp(&b.min_samples))
    });
    Ok(rows)
}

pub fn grid_search(matrix: &FeatureMatrix) -> Result<Vec<GridSearchRow>> {
    grid_search_distances(&distance_matrix(&matrix.rows)?)
}

/// Picks the row whose cluster count is closest to a quarter of the error
/// count; ties go to lower noise, then smaller parameters.
pub fn select_params(rows: &[GridSearchRow], error_count: usize) -> Result<(usize, usize)> {
    let target = (error_count + 2) / 4;
    rows.iter()
        .min_by(|a, b| {
            let da = a.cluster_count.abs_diff(target);
            let db = b.cluster_count.abs_diff(target);
            da.cmp(&db)
                .then(a.noise_ratio.total_cmp(&b.noise_ratio))
                .then(a.min_cluster_size.cmp(&b.min_cluster_size))
                .then(a.min_samples.cmp(&b.min_samples))
        })
        .map(|r| (r.min_cluster_size, r.min_samples))
        .ok_or(Error::Empty("grid search rows"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedCluster {
    pub label: i32,
    pub size: usize,
}

/// Non-noise clusters by size descending, ties by ascending label.
pub fn rank_clusters(labeling: &ClusterLabeling) -> Vec<RankedCluster> {
    let mut ranked: Vec<RankedCluster> = labeling
        .sizes()
        .into_iter()
        .map(|(label, size)| RankedCluster { label, size })
        .collect();
    ranked.sort_by(|a, b| b.size.cmp(&a.size).then(a.label.cmp(&b.label)));
    ranked
}
