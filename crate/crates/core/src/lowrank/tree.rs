//! Geometric bisection of sources and the recursive global factorisation.

use std::sync::Mutex;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{aca_partial, agglomerate, randsvd, recompress, FlopCategory, FlopCounter, LowRankFactor, Method, RandSvdOptions, Truncation};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterNode {
    /// Source indices, ascending.
    pub indices: Vec<usize>,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub depth: usize,
    pub children: Vec<usize>,
}

/// Binary tree over source indices; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTree {
    pub nodes: Vec<ClusterNode>,
}

impl ClusterTree {
    pub fn root(&self) -> &ClusterNode {
        &self.nodes[0]
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].children.is_empty()
    }

    /// Leaf ids in depth-first, left-to-right order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(id) = stack.pop() {
            if self.is_leaf(id) {
                out.push(id);
            } else {
                stack.extend(self.nodes[id].children.iter().rev());
            }
        }
        out
    }

    /// Sources in leaf traversal order.
    pub fn source_order(&self) -> Vec<usize> {
        self.leaves().into_iter().flat_map(|l| self.nodes[l].indices.clone()).collect()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Number of agglomeration levels: a leaf holding two sources merges them one
    /// level below itself.
    pub fn num_levels(&self) -> usize {
        self.leaves().into_iter().map(|l| self.nodes[l].depth + usize::from(self.nodes[l].indices.len() > 1)).max().unwrap_or(0)
    }

    /// Nested-set rendering with 1-based source labels, e.g. `{{1,2},{3}}`.
    pub fn nested(&self) -> String {
        fn go(t: &ClusterTree, id: usize, out: &mut String) {
            let n = &t.nodes[id];
            out.push('{');
            if n.children.is_empty() {
                let labels: Vec<String> = n.indices.iter().map(|i| (i + 1).to_string()).collect();
                out.push_str(&labels.join(","));
            } else {
                for (c, &child) in n.children.iter().enumerate() {
                    if c > 0 {
                        out.push(',');
                    }
                    go(t, child, out);
                }
            }
            out.push('}');
        }
        let mut s = String::new();
        go(self, 0, &mut s);
        s
    }
}

/// Builds the tree by geometric bisection: a node with more than two sources is
/// split at the midpoint of its box's longest side, points on or below the
/// midpoint going left. A side that would be empty is dropped by shrinking the
/// box and retrying; coincident points that never separate are split by index.
pub fn build_cluster_tree(points: &[[f64; 2]], lo: [f64; 2], hi: [f64; 2]) -> Result<ClusterTree> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("cluster tree needs at least one source".into()));
    }
    for p in points {
        if (0..2).any(|d| !(lo[d]..=hi[d]).contains(&p[d])) {
            return Err(Error::InvalidArgument(format!("source ({}, {}) outside the bounding box", p[0], p[1])));
        }
    }
    let extent0 = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let mut tree = ClusterTree { nodes: Vec::new() };
    let mut stack = vec![(ClusterNode { indices: (0..points.len()).collect(), lo, hi, depth: 0, children: Vec::new() }, None::<usize>)];
    while let Some((mut node, parent)) = stack.pop() {
        let id = tree.nodes.len();
        if let Some(p) = parent {
            tree.nodes[p].children.push(id);
        }
        let split = if node.indices.len() > 2 { bisect(points, &mut node, extent0) } else { None };
        let depth = node.depth;
        tree.nodes.push(node);
        if let Some((left, right)) = split {
            // Pushed in reverse so the left child is created first.
            stack.push((ClusterNode { depth: depth + 1, ..right }, Some(id)));
            stack.push((ClusterNode { depth: depth + 1, ..left }, Some(id)));
        }
    }
    Ok(tree)
}

fn bisect(points: &[[f64; 2]], node: &mut ClusterNode, extent0: f64) -> Option<(ClusterNode, ClusterNode)> {
    loop {
        let ext = [node.hi[0] - node.lo[0], node.hi[1] - node.lo[1]];
        let j = if ext[1] > ext[0] { 1 } else { 0 };
        if ext[j] <= 1e-12 * extent0 {
            let half = node.indices.len() / 2;
            let mk = |idx: &[usize]| ClusterNode { indices: idx.to_vec(), lo: node.lo, hi: node.hi, depth: 0, children: Vec::new() };
            return Some((mk(&node.indices[..half]), mk(&node.indices[half..])));
        }
        let gamma = 0.5 * (node.lo[j] + node.hi[j]);
        let (left, right): (Vec<usize>, Vec<usize>) = node.indices.iter().partition(|&&i| points[i][j] <= gamma);
        let (mut lhi, mut rlo) = (node.hi, node.lo);
        lhi[j] = gamma;
        rlo[j] = gamma;
        if left.is_empty() {
            node.lo = rlo;
            continue;
        }
        if right.is_empty() {
            node.hi = lhi;
            continue;
        }
        return Some((
            ClusterNode { indices: left, lo: node.lo, hi: lhi, depth: 0, children: Vec::new() },
            ClusterNode { indices: right, lo: rlo, hi: node.hi, depth: 0, children: Vec::new() },
        ));
    }
}

/// Per-component tolerance `ε_d / (2^{L/2} (L+1) √N_r)` that keeps the global
/// relative error of an `L`-level compression below `ε_d`.
pub fn tolerance_schedule(eps_d: f64, levels: usize, n_r: usize) -> f64 {
    let l = levels as f64;
    eps_d / (2f64.powf(l / 2.0) * (l + 1.0) * (n_r.max(1) as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafMethod {
    RandSvd,
    AcaPartial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecursiveOptions {
    /// Target relative Frobenius error of the global factor.
    pub eps_d: f64,
    pub leaf_method: LeafMethod,
    pub oversample: usize,
    pub probes: usize,
    pub seed: u64,
    /// Truncate the root factor at `ε_d / 2` after assembly.
    pub final_recompress: bool,
    pub parallel: bool,
}

impl Default for RecursiveOptions {
    fn default() -> Self {
        Self { eps_d: 1e-6, leaf_method: LeafMethod::RandSvd, oversample: 20, probes: 10, seed: 0, final_recompress: true, parallel: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelInfo {
    /// 0 at the root.
    pub level: usize,
    pub max_rank: usize,
    pub blocks: usize,
}

#[derive(Debug)]
pub struct RecursiveResult {
    /// Rows in tree order.
    pub factor: LowRankFactor,
    /// `perm[i]` is the canonical row of tree-order row `i`.
    pub perm: Vec<usize>,
    pub levels: Vec<LevelInfo>,
    /// `δ_ℓ = r_ℓ / (2 r_{ℓ+1})` for consecutive levels.
    pub deltas: Vec<f64>,
    /// Scheduled tolerance used for every leaf and agglomeration.
    pub eps: f64,
    pub num_levels: usize,
    pub flops: FlopCounter,
    /// Rank before the final truncation.
    pub root_rank_untruncated: usize,
}

impl RecursiveResult {
    /// The factor with rows in canonical measurement order.
    pub fn canonical(&self) -> LowRankFactor {
        self.factor.permute_rows(&self.perm)
    }
}

struct Ctx<'a> {
    tree: &'a ClusterTree,
    provider: &'a (dyn Fn(usize) -> Result<DMatrix<f64>> + Sync),
    opts: &'a RecursiveOptions,
    rsvd: RandSvdOptions,
    flops: FlopCounter,
    ranks: Mutex<Vec<(usize, usize)>>,
    block_rows: Mutex<Option<usize>>,
}

impl Ctx<'_> {
    fn rng(&self, tag: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.opts.seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    fn record(&self, level: usize, rank: usize) {
        self.ranks.lock().unwrap().push((level, rank));
    }

    fn source(&self, s: usize, level: usize, path: &str) -> Result<LowRankFactor> {
        let wrap = |e: Error| Error::Compression { path: format!("{path}/source {s}"), source: Box::new(e) };
        let block = (self.provider)(s).map_err(wrap)?;
        {
            let mut rows = self.block_rows.lock().unwrap();
            match *rows {
                None => *rows = Some(block.nrows()),
                Some(r) if r != block.nrows() => return Err(wrap(Error::DimensionMismatch { expected: r, got: block.nrows() })),
                _ => {}
            }
        }
        let (f, flops) = match self.opts.leaf_method {
            LeafMethod::RandSvd => randsvd(&block, &self.rsvd, &mut self.rng(1 << 32 | s as u64)),
            LeafMethod::AcaPartial => {
                let res = aca_partial(&block, self.rsvd.tol);
                (res.factor, res.flops)
            }
        };
        self.flops.add(FlopCategory::Leaf, flops);
        self.record(level, f.rank());
        Ok(f)
    }

    fn merge(&self, a: LowRankFactor, b: LowRankFactor, tag: u64, level: usize, path: &str) -> Result<LowRankFactor> {
        let (f, flops) = agglomerate(&a, &b, &self.rsvd, &mut self.rng(tag))
            .map_err(|e| Error::Compression { path: path.to_string(), source: Box::new(e) })?;
        self.flops.add(FlopCategory::Agglomeration, flops);
        self.record(level, f.rank());
        Ok(f)
    }

    fn node(&self, id: usize, path: String) -> Result<LowRankFactor> {
        let node = &self.tree.nodes[id];
        if node.children.is_empty() {
            let sub = node.depth + 1;
            return match node.indices.as_slice() {
                [s] => self.source(*s, node.depth, &path),
                [a, b] => {
                    let (fa, fb) = self.join(|| self.source(*a, sub, &path), || self.source(*b, sub, &path));
                    self.merge(fa?, fb?, 2 * id as u64 + 1, node.depth, &path)
                }
                _ => Err(Error::InvalidArgument(format!("{path}: leaf with {} sources", node.indices.len()))),
            };
        }
        let (l, r) = (node.children[0], node.children[1]);
        let (fl, fr) = self.join(|| self.node(l, format!("{path}/{l}")), || self.node(r, format!("{path}/{r}")));
        self.merge(fl?, fr?, 2 * id as u64 + 1, node.depth, &path)
    }

    fn join<A: Send, B: Send>(&self, a: impl FnOnce() -> A + Send, b: impl FnOnce() -> B + Send) -> (A, B) {
        if self.opts.parallel {
            rayon::join(a, b)
        } else {
            (a(), b())
        }
    }
}

/// Compresses `H = [H_0; H_1; …]` (one block per source, all of the same height)
/// following the cluster tree: source blocks are compressed at the leaves and
/// merged pairwise up to the root, with the scheduled tolerance everywhere.
/// `provider(s)` supplies block `s` with `block_rows` rows; blocks are requested
/// once each and dropped after compression.
pub fn recursive_lowrank(
    tree: &ClusterTree,
    provider: &(dyn Fn(usize) -> Result<DMatrix<f64>> + Sync),
    block_rows: usize,
    num_cols: usize,
    opts: &RecursiveOptions,
) -> Result<RecursiveResult> {
    let num_sources = tree.root().indices.len();
    let num_levels = tree.num_levels();
    let n_r = (block_rows * num_sources).min(num_cols);
    let eps = tolerance_schedule(opts.eps_d, num_levels, n_r);
    let ctx = Ctx {
        tree,
        provider,
        opts,
        rsvd: RandSvdOptions { tol: eps, oversample: opts.oversample, probes: opts.probes, initial_rank: 1 },
        flops: FlopCounter::default(),
        ranks: Mutex::new(Vec::new()),
        block_rows: Mutex::new(Some(block_rows)),
    };
    let mut factor = ctx.node(0, "root".into())?;
    if factor.cols() != num_cols {
        return Err(Error::DimensionMismatch { expected: num_cols, got: factor.cols() });
    }
    let root_rank_untruncated = factor.rank();
    if opts.final_recompress {
        let (f, flops) = recompress(&factor, Truncation::Relative(0.5 * opts.eps_d));
        ctx.flops.add(FlopCategory::Recompression, flops);
        factor = f;
    }
    factor.method = Method::Recursive;
    factor.tol = opts.eps_d;

    let perm: Vec<usize> = tree.source_order().iter().flat_map(|&s| (s * block_rows)..((s + 1) * block_rows)).collect();
    let ranks = ctx.ranks.into_inner().unwrap();
    let mut levels: Vec<LevelInfo> = (0..=num_levels).map(|level| LevelInfo { level, max_rank: 0, blocks: 0 }).collect();
    for (level, rank) in ranks {
        levels[level].max_rank = levels[level].max_rank.max(rank);
        levels[level].blocks += 1;
    }
    let deltas = levels
        .windows(2)
        .map(|w| if w[1].max_rank == 0 { 0.0 } else { w[0].max_rank as f64 / (2.0 * w[1].max_rank as f64) })
        .collect();
    Ok(RecursiveResult { factor, perm, levels, deltas, eps, num_levels, flops: ctx.flops, root_rank_untruncated })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    fn paper_layout() -> Vec<[f64; 2]> {
        vec![[4.0, 3.0], [1.8, 6.5], [6.0, 2.0], [9.5, 4.0], [8.5, 8.5]]
    }

    #[test]
    fn five_source_layout() {
        let t = build_cluster_tree(&paper_layout(), [0.0, 0.0], [10.0, 10.0]).unwrap();
        assert_eq!(t.nested(), "{{1,2},{{3,4},{5}}}");
        assert_eq!(t.source_order(), vec![0, 1, 2, 3, 4]);
        assert_eq!(t.num_levels(), 3);
    }

    #[test]
    fn two_sources_single_leaf() {
        let t = build_cluster_tree(&[[1.0, 1.0], [2.0, 2.0]], [0.0, 0.0], [3.0, 3.0]).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.num_levels(), 1);
    }

    #[test]
    fn lattice_is_balanced() {
        let pts: Vec<[f64; 2]> = (0..8).map(|i| [1.0 + 2.0 * (i % 4) as f64, 1.0 + 2.0 * (i / 4) as f64]).collect();
        let t = build_cluster_tree(&pts, [0.0, 0.0], [8.0, 4.0]).unwrap();
        assert_eq!(t.depth(), 2);
        let leaves = t.leaves();
        assert_eq!(leaves.len(), 4);
        assert!(leaves.iter().all(|&l| t.nodes[l].indices.len() == 2 && t.nodes[l].depth == 2));
    }

    #[test]
    fn coincident_points_terminate() {
        let t = build_cluster_tree(&[[1.0, 1.0]; 5], [0.0, 0.0], [2.0, 2.0]).unwrap();
        assert!(t.leaves().iter().all(|&l| t.nodes[l].indices.len() <= 2));
        let mut all = t.source_order();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert!(build_cluster_tree(&[], [0.0, 0.0], [1.0, 1.0]).is_err());
        assert!(build_cluster_tree(&[[5.0, 0.0]], [0.0, 0.0], [1.0, 1.0]).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(tolerance_schedule(1e-6, 0, 1), 1e-6);
        assert!((tolerance_schedule(1e-6, 2, 100) - 1e-6 / 60.0).abs() <= 1e-20);
    }

    fn blocks(ns: usize, rows: usize, cols: usize, seed: u64) -> Vec<DMatrix<f64>> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = gaussian(6, cols, &mut rng);
        (0..ns)
            .map(|s| {
                let own = gaussian(2, cols, &mut rng) * 1e-3 * (s + 1) as f64;
                gaussian(rows, 6, &mut rng) * &shared + gaussian(rows, 2, &mut rng) * own
            })
            .collect()
    }

    fn stack(bs: &[DMatrix<f64>]) -> DMatrix<f64> {
        let rows: usize = bs.iter().map(|b| b.nrows()).sum();
        let mut h = DMatrix::zeros(rows, bs[0].ncols());
        let mut off = 0;
        for b in bs {
            h.rows_mut(off, b.nrows()).copy_from(b);
            off += b.nrows();
        }
        h
    }

    #[test]
    fn recursive_matches_dense_with_permutation() {
        let pts = vec![[9.0, 1.0], [1.0, 1.0], [8.0, 9.0], [2.0, 8.0], [5.0, 5.0]];
        let tree = build_cluster_tree(&pts, [0.0, 0.0], [10.0, 10.0]).unwrap();
        assert_ne!(tree.source_order(), vec![0, 1, 2, 3, 4]);
        let bs = blocks(5, 12, 90, 7);
        let h = stack(&bs);
        for method in [LeafMethod::RandSvd, LeafMethod::AcaPartial] {
            let opts = RecursiveOptions { eps_d: 1e-6, leaf_method: method, ..Default::default() };
            let res = recursive_lowrank(&tree, &|s| Ok(bs[s].clone()), 12, 90, &opts).unwrap();
            let err = (res.canonical().to_dense() - &h).norm() / h.norm();
            assert!(err <= 1e-6, "{method:?}: {err}");
            assert!(res.deltas.iter().all(|&d| d <= 1.0));
            assert_eq!(res.flops.total(), res.flops.leaf() + res.flops.agglomeration() + res.flops.recompression());
            assert!(res.flops.leaf() > 0 && res.flops.agglomeration() > 0);
        }
    }

    #[test]
    fn single_source_equals_leaf() {
        let tree = build_cluster_tree(&[[0.5, 0.5]], [0.0, 0.0], [1.0, 1.0]).unwrap();
        let bs = blocks(1, 15, 40, 8);
        let opts = RecursiveOptions { final_recompress: false, ..Default::default() };
        let res = recursive_lowrank(&tree, &|_| Ok(bs[0].clone()), 15, 40, &opts).unwrap();
        assert_eq!(res.factor.rank(), 8);
        assert_eq!(res.num_levels, 0);
        assert!((res.factor.to_dense() - &bs[0]).norm() <= tolerance_schedule(opts.eps_d, 0, 15) * bs[0].norm());
        assert_eq!(res.flops.agglomeration(), 0);
    }

    #[test]
    fn deterministic_across_threading_and_errors_carry_path() {
        let tree = build_cluster_tree(&paper_layout(), [0.0, 0.0], [10.0, 10.0]).unwrap();
        let bs = blocks(5, 9, 50, 9);
        let par = recursive_lowrank(&tree, &|s| Ok(bs[s].clone()), 9, 50, &RecursiveOptions::default()).unwrap();
        let ser = recursive_lowrank(&tree, &|s| Ok(bs[s].clone()), 9, 50, &RecursiveOptions { parallel: false, ..Default::default() }).unwrap();
        assert_eq!(par.factor, ser.factor);
        let failing = |s: usize| if s == 3 { Err(Error::InvalidArgument("boom".into())) } else { Ok(bs[s].clone()) };
        let err = recursive_lowrank(&tree, &failing, 9, 50, &RecursiveOptions::default()).unwrap_err();
        assert!(err.to_string().contains("source 3"), "{err}");
    }
}
