//! Randomized kd-tree forest used to find the two nearest words of a descriptor.
//!
//! Each tree splits on a dimension drawn uniformly from the five dimensions of
//! highest variance at that node and cuts at the median, so trees built from
//! the same points differ. Bounded searches descend every tree once and then
//! explore the remaining branches of all trees from a single priority queue,
//! closest bound first, until `checks` points have been examined.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Checks;
use crate::ids::WordId;

const TOP_VARIANCE_DIMS: usize = 5;
/// Largest number of points kept in one leaf.
const LEAF_SIZE: usize = 8;
const VARIANCE_SAMPLE: usize = 100;

/// A point found by a nearest-neighbor query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: WordId,
    /// Squared Euclidean distance.
    pub dist2: f32,
}

impl Neighbor {
    pub fn distance(&self) -> f64 {
        (self.dist2 as f64).sqrt()
    }

    /// Total order used everywhere neighbors are ranked: distance, then id.
    pub fn rank_cmp(&self, other: &Neighbor) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.id.cmp(&other.id))
    }
}

/// The two best neighbors seen so far, kept sorted.
#[derive(Debug, Clone, Copy, Default)]
pub struct BestTwo {
    pub first: Option<Neighbor>,
    pub second: Option<Neighbor>,
}

impl BestTwo {
    pub fn offer(&mut self, cand: Neighbor) {
        match self.first {
            None => self.first = Some(cand),
            Some(f) if cand.rank_cmp(&f) == Ordering::Less => {
                self.second = self.first;
                self.first = Some(cand);
            }
            Some(_) => match self.second {
                Some(s) if cand.rank_cmp(&s) != Ordering::Less => {}
                _ => self.second = Some(cand),
            },
        }
    }

    pub fn is_full(&self) -> bool {
        self.second.is_some()
    }

    /// Squared distance a candidate must not exceed to enter the set.
    fn bound(&self) -> f32 {
        self.second.map_or(f32::INFINITY, |n| n.dist2)
    }

    pub fn merge(mut self, other: BestTwo) -> BestTwo {
        if let Some(n) = other.first {
            self.offer(n);
        }
        if let Some(n) = other.second {
            self.offer(n);
        }
        self
    }
}

#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[derive(Debug, Clone)]
enum Node {
    Split {
        dim: u32,
        value: f32,
        left: u32,
        right: u32,
    },
    Leaf {
        start: u32,
        end: u32,
    },
}

#[derive(Debug, Clone)]
struct KdTree {
    nodes: Vec<Node>,
    /// Point indices; leaves reference contiguous ranges of it.
    order: Vec<u32>,
}

struct Scratch {
    keys: Vec<(f32, u32)>,
    sum: Vec<f32>,
    sq: Vec<f32>,
    dims: Vec<usize>,
}

impl Scratch {
    fn new(dim: usize) -> Self {
        Self {
            keys: Vec::new(),
            sum: vec![0.0; dim],
            sq: vec![0.0; dim],
            dims: Vec::with_capacity(dim),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Branch {
    bound: f32,
    tree: u32,
    node: u32,
}

impl PartialEq for Branch {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Branch {}

impl PartialOrd for Branch {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Branch {
    // Reversed so the max-heap pops the smallest bound first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then(other.tree.cmp(&self.tree))
            .then(other.node.cmp(&self.node))
    }
}

/// Nearest-neighbor index over a fixed set of word descriptors.
#[derive(Debug, Clone)]
pub struct NnForest {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<WordId>,
    trees: Vec<KdTree>,
    checks: Checks,
    /// Points dropped since the build, by index.
    removed: Vec<u64>,
    removed_count: usize,
    sorted: bool,
}

impl NnForest {
    pub fn empty(dim: usize, checks: Checks) -> Self {
        Self {
            dim,
            data: Vec::new(),
            ids: Vec::new(),
            trees: Vec::new(),
            checks,
            removed: Vec::new(),
            removed_count: 0,
            sorted: true,
        }
    }

    /// Builds `tree_count` trees over the given points. `data` holds one row
    /// of `dim` values per id.
    pub fn build(
        dim: usize,
        ids: Vec<WordId>,
        data: Vec<f32>,
        tree_count: usize,
        checks: Checks,
        seed: u64,
    ) -> Self {
        assert_eq!(ids.len() * dim, data.len(), "point matrix shape");
        let sorted = ids.windows(2).all(|w| w[0] < w[1]);
        let mut forest = Self {
            dim,
            data,
            removed: vec![0; ids.len().div_ceil(64)],
            removed_count: 0,
            ids,
            trees: Vec::with_capacity(tree_count),
            checks,
            sorted,
        };
        if forest.ids.is_empty() {
            return forest;
        }
        // Exact search only ever walks the first tree.
        let count = match checks {
            Checks::Exhaustive => 1,
            Checks::Limited(_) => tree_count.max(1),
        };
        for t in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let tree = forest.build_tree(&mut rng);
            forest.trees.push(tree);
        }
        forest
    }

    /// Number of live points.
    pub fn len(&self) -> usize {
        self.ids.len() - self.removed_count
    }

    /// Stops returning `id` from searches. Returns false if it is not indexed.
    pub fn remove(&mut self, id: WordId) -> bool {
        let idx = if self.sorted {
            self.ids.binary_search(&id).ok()
        } else {
            self.ids.iter().position(|x| *x == id)
        };
        let Some(idx) = idx else { return false };
        let (word, bit) = (idx / 64, 1u64 << (idx % 64));
        if self.removed[word] & bit != 0 {
            return false;
        }
        self.removed[word] |= bit;
        self.removed_count += 1;
        true
    }

    fn is_removed(&self, idx: u32) -> bool {
        self.removed_count > 0 && self.removed[idx as usize / 64] & (1u64 << (idx % 64)) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    pub fn checks(&self) -> Checks {
        self.checks
    }

    pub fn ids(&self) -> &[WordId] {
        &self.ids
    }

    fn point(&self, idx: u32) -> &[f32] {
        let start = idx as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    fn build_tree(&self, rng: &mut ChaCha8Rng) -> KdTree {
        let mut order: Vec<u32> = (0..self.ids.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * self.ids.len() / LEAF_SIZE + 1);
        let mut scratch = Scratch::new(self.dim);
        self.build_node(&mut order, 0, &mut nodes, &mut scratch, rng);
        KdTree { nodes, order }
    }

    fn build_node(
        &self,
        order: &mut [u32],
        offset: usize,
        nodes: &mut Vec<Node>,
        scratch: &mut Scratch,
        rng: &mut ChaCha8Rng,
    ) -> u32 {
        let slot = nodes.len() as u32;
        if order.len() <= LEAF_SIZE {
            nodes.push(Node::Leaf {
                start: offset as u32,
                end: (offset + order.len()) as u32,
            });
            return slot;
        }
        let dim = self.choose_split_dim(order, scratch, rng);
        let mid = order.len() / 2;
        let keys = &mut scratch.keys;
        keys.clear();
        keys.extend(order.iter().map(|&i| (self.data[i as usize * self.dim + dim], i)));
        keys.select_nth_unstable_by(mid, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (o, k) in order.iter_mut().zip(keys.iter()) {
            *o = k.1;
        }
        let value = keys[mid].0;
        nodes.push(Node::Leaf { start: 0, end: 0 });
        let (lo, hi) = order.split_at_mut(mid);
        let left = self.build_node(lo, offset, nodes, scratch, rng);
        let right = self.build_node(hi, offset + mid, nodes, scratch, rng);
        nodes[slot as usize] = Node::Split {
            dim: dim as u32,
            value,
            left,
            right,
        };
        slot
    }

    fn choose_split_dim(&self, order: &[u32], scratch: &mut Scratch, rng: &mut ChaCha8Rng) -> usize {
        let step = (order.len() / VARIANCE_SAMPLE).max(1);
        let Scratch { sum, sq, dims, .. } = scratch;
        sum.fill(0.0);
        sq.fill(0.0);
        let mut n = 0usize;
        for &i in order.iter().step_by(step).take(VARIANCE_SAMPLE) {
            n += 1;
            for ((s, q), &v) in sum.iter_mut().zip(sq.iter_mut()).zip(self.point(i)) {
                *s += v;
                *q += v * v;
            }
        }
        let n = n as f32;
        for (s, q) in sum.iter_mut().zip(sq.iter()) {
            *s = q - *s * *s / n;
        }
        let var = &*sum;
        dims.clear();
        dims.extend(0..self.dim);
        let by_variance = |a: &usize, b: &usize| var[*b].total_cmp(&var[*a]).then(a.cmp(b));
        let top = TOP_VARIANCE_DIMS.min(self.dim);
        if top < dims.len() {
            dims.select_nth_unstable_by(top - 1, by_variance);
        }
        dims[..top].sort_by(by_variance);
        dims[rng.random_range(0..top)]
    }

    /// The two nearest indexed points of `query`, ranked by distance then id.
    pub fn nearest_two(&self, query: &[f32]) -> BestTwo {
        debug_assert_eq!(query.len(), self.dim);
        let mut best = BestTwo::default();
        if self.trees.is_empty() {
            return best;
        }
        match self.checks {
            Checks::Exhaustive => self.search_exact(0, query, &mut best),
            Checks::Limited(max_checks) => self.search_bounded(query, max_checks, &mut best),
        }
        best
    }

    fn offer_leaf(&self, tree: &KdTree, start: u32, end: u32, query: &[f32], best: &mut BestTwo) {
        for &idx in &tree.order[start as usize..end as usize] {
            if self.is_removed(idx) {
                continue;
            }
            let dist2 = squared_distance(self.point(idx), query);
            best.offer(Neighbor {
                id: self.ids[idx as usize],
                dist2,
            });
        }
    }

    fn search_exact(&self, node: u32, query: &[f32], best: &mut BestTwo) {
        let tree = &self.trees[0];
        match tree.nodes[node as usize] {
            Node::Leaf { start, end } => self.offer_leaf(tree, start, end, query, best),
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim as usize] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_exact(near, query, best);
                // `<=` keeps equal-distance points so id tie-breaking stays exact.
                if diff * diff <= best.bound() {
                    self.search_exact(far, query, best);
                }
            }
        }
    }

    fn search_bounded(&self, query: &[f32], max_checks: usize, best: &mut BestTwo) {
        let mut heap = BinaryHeap::new();
        let mut seen = vec![0u64; self.ids.len().div_ceil(64)];
        let mut checked = 0usize;
        for t in 0..self.trees.len() {
            self.descend(t as u32, 0, 0.0, query, best, &mut heap, &mut seen, &mut checked);
        }
        while let Some(branch) = heap.pop() {
            if checked >= max_checks && best.is_full() {
                break;
            }
            if branch.bound > best.bound() {
                continue;
            }
            self.descend(
                branch.tree,
                branch.node,
                branch.bound,
                query,
                best,
                &mut heap,
                &mut seen,
                &mut checked,
            );
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn descend(
        &self,
        tree_idx: u32,
        mut node: u32,
        bound: f32,
        query: &[f32],
        best: &mut BestTwo,
        heap: &mut BinaryHeap<Branch>,
        seen: &mut [u64],
        checked: &mut usize,
    ) {
        let tree = &self.trees[tree_idx as usize];
        loop {
            match tree.nodes[node as usize] {
                Node::Leaf { start, end } => {
                    for &idx in &tree.order[start as usize..end as usize] {
                        let (word, bit) = (idx as usize / 64, 1u64 << (idx % 64));
                        if seen[word] & bit != 0 {
                            continue;
                        }
                        seen[word] |= bit;
                        if self.is_removed(idx) {
                            continue;
                        }
                        *checked += 1;
                        let dist2 = squared_distance(self.point(idx), query);
                        best.offer(Neighbor {
                            id: self.ids[idx as usize],
                            dist2,
                        });
                    }
                    return;
                }
                Node::Split {
                    dim,
                    value,
                    left,
                    right,
                } => {
                    let diff = query[dim as usize] - value;
                    let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                    let far_bound = bound + diff * diff;
                    if far_bound <= best.bound() {
                        heap.push(Branch {
                            bound: far_bound,
                            tree: tree_idx,
                            node: far,
                        });
                    }
                    node = near;
                }
            }
        }
    }
}
