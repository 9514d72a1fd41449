//! Randomized k-d forest with FLANN-style priority search.
//!
//! Each tree splits on a dimension drawn at random from the few highest
//! variance dimensions of a sample, at the sample mean. Search descends every
//! tree, queues the unexplored branches in one shared priority queue ordered
//! by their distance bound, and stops once `checks` distinct points have been
//! compared. Leaf buckets are kept sorted by slot so that the tree contents
//! depend only on the split planes and the indexed point set.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnnConfig, Metric, Scorer, TopK, VectorStore};

const SAMPLE_MEAN: usize = 100;
const RAND_DIM: usize = 5;
const NONE: u32 = u32::MAX;

#[derive(Debug, Clone)]
enum Node {
    Split {
        dim: u32,
        value: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        bucket: Vec<u32>,
    },
}

#[derive(Debug, Clone)]
struct KdTree {
    nodes: Vec<Node>,
    leaf_of: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct KdForest {
    trees: Vec<KdTree>,
    metric: Metric,
}

#[derive(Debug, PartialEq)]
struct Branch {
    bound: f64,
    tree: u32,
    node: u32,
}

impl Eq for Branch {}

impl Ord for Branch {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap pops the smallest bound first.
        other
            .bound
            .total_cmp(&self.bound)
            .then(other.tree.cmp(&self.tree))
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for Branch {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdForest {
    pub(super) fn build(config: &AnnConfig, store: &VectorStore, generation: u64) -> KdForest {
        let live: Vec<u32> = store.live_slots().map(|s| s as u32).collect();
        let trees = (0..config.kd_trees)
            .map(|t| {
                let seed = config
                    .seed
                    .wrapping_add(generation.wrapping_mul(0x9E37_79B9_7F4A_7C15))
                    .wrapping_add((t as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut slots = live.clone();
                slots.shuffle(&mut rng);
                build_tree(store, &mut slots, config.kd_leaf_size, &mut rng)
            })
            .collect();
        KdForest {
            trees,
            metric: config.metric,
        }
    }

    pub(super) fn insert(&mut self, slot: usize, v: &[f64]) {
        for tree in &mut self.trees {
            let mut id = 0usize;
            loop {
                match &mut tree.nodes[id] {
                    Node::Split {
                        dim,
                        value,
                        left,
                        right,
                    } => {
                        id = if v[*dim as usize] < *value {
                            *left as usize
                        } else {
                            *right as usize
                        };
                    }
                    Node::Leaf { bucket } => {
                        let pos = bucket.binary_search(&(slot as u32)).unwrap_or_else(|p| p);
                        bucket.insert(pos, slot as u32);
                        tree.leaf_of[slot] = id as u32;
                        break;
                    }
                }
            }
        }
    }

    pub(super) fn remove(&mut self, slot: usize) {
        for tree in &mut self.trees {
            let id = tree.leaf_of[slot];
            if id == NONE {
                continue;
            }
            if let Node::Leaf { bucket } = &mut tree.nodes[id as usize] {
                if let Ok(pos) = bucket.binary_search(&(slot as u32)) {
                    bucket.remove(pos);
                }
            }
            tree.leaf_of[slot] = NONE;
        }
    }

    pub(super) fn query(
        &self,
        scorer: &Scorer<'_>,
        q: &[f64],
        k: usize,
        checks: usize,
    ) -> Vec<(usize, f64)> {
        let mut search = Search {
            forest: self,
            scorer,
            q,
            checks,
            count: 0,
            checked: HashSet::with_capacity(checks * 2),
            heap: BinaryHeap::new(),
            top: TopK::new(k),
        };
        for t in 0..self.trees.len() {
            search.descend(t as u32, 0, 0.0);
        }
        while let Some(b) = search.heap.pop() {
            if search.exhausted() {
                break;
            }
            if search.top.is_full() && b.bound > search.worst_sq() {
                continue;
            }
            search.descend(b.tree, b.node, b.bound);
        }
        search.top.into_vec()
    }

    pub(super) fn hash_into<H: std::hash::Hasher>(&self, h: &mut H) {
        for t in &self.trees {
            for n in &t.nodes {
                match n {
                    Node::Split {
                        dim,
                        value,
                        left,
                        right,
                    } => {
                        h.write_u32(*dim);
                        h.write_u64(value.to_bits());
                        h.write_u32(*left);
                        h.write_u32(*right);
                    }
                    Node::Leaf { bucket } => {
                        h.write_usize(bucket.len());
                        bucket.iter().for_each(|&s| h.write_u32(s));
                    }
                }
            }
            t.leaf_of.iter().for_each(|&l| h.write_u32(l));
        }
    }

    pub(super) fn payload_bytes(&self) -> usize {
        self.trees
            .iter()
            .map(|t| {
                t.leaf_of.len() * 4
                    + t.nodes.len() * std::mem::size_of::<Node>()
                    + t.nodes
                        .iter()
                        .map(|n| match n {
                            Node::Leaf { bucket } => bucket.len() * 4,
                            Node::Split { .. } => 0,
                        })
                        .sum::<usize>()
            })
            .sum()
    }
}

struct Search<'a, 's> {
    forest: &'a KdForest,
    scorer: &'a Scorer<'s>,
    q: &'a [f64],
    checks: usize,
    count: usize,
    checked: HashSet<u32>,
    heap: BinaryHeap<Branch>,
    top: TopK,
}

impl Search<'_, '_> {
    #[inline]
    fn exhausted(&self) -> bool {
        self.count >= self.checks && self.top.is_full()
    }

    /// Squared distance corresponding to the worst retained score.
    fn worst_sq(&self) -> f64 {
        let w = self.top.worst();
        if w == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        match self.forest.metric {
            // unit vectors: |q - v|² = 2 - 2 q·v
            Metric::Cosine => 2.0 - 2.0 * w,
            Metric::Euclidean => w * w,
        }
    }

    fn descend(&mut self, tree: u32, mut node: u32, mindist: f64) {
        let nodes = &self.forest.trees[tree as usize].nodes;
        loop {
            match &nodes[node as usize] {
                Node::Split {
                    dim,
                    value,
                    left,
                    right,
                } => {
                    let diff = self.q[*dim as usize] - value;
                    let (near, far) = if diff < 0.0 {
                        (*left, *right)
                    } else {
                        (*right, *left)
                    };
                    let bound = mindist + diff * diff;
                    if !(self.top.is_full() && bound > self.worst_sq()) {
                        self.heap.push(Branch {
                            bound,
                            tree,
                            node: far,
                        });
                    }
                    node = near;
                }
                Node::Leaf { bucket } => {
                    for &s in bucket {
                        if self.exhausted() {
                            return;
                        }
                        if self.checked.insert(s) {
                            self.count += 1;
                            let score = self.scorer.score(self.q, s as usize);
                            self.top.push(s as usize, score);
                        }
                    }
                    return;
                }
            }
        }
    }
}

fn build_tree(store: &VectorStore, slots: &mut [u32], leaf_size: usize, rng: &mut ChaCha8Rng) -> KdTree {
    let mut nodes = vec![Node::Leaf { bucket: Vec::new() }];
    let mut leaf_of = vec![NONE; store.live.len()];
    let mut stack = vec![(0u32, 0usize, slots.len())];
    while let Some((id, lo, hi)) = stack.pop() {
        let part = &mut slots[lo..hi];
        let split = if part.len() > leaf_size {
            choose_split(store, part, rng)
        } else {
            None
        };
        let mid = split.map(|(dim, value)| {
            let mut i = 0;
            for j in 0..part.len() {
                if store.get(part[j] as usize)[dim] < value {
                    part.swap(i, j);
                    i += 1;
                }
            }
            i
        });
        match (split, mid) {
            (Some((dim, value)), Some(m)) if m > 0 && m < part.len() => {
                let left = nodes.len() as u32;
                nodes.push(Node::Leaf { bucket: Vec::new() });
                nodes.push(Node::Leaf { bucket: Vec::new() });
                nodes[id as usize] = Node::Split {
                    dim: dim as u32,
                    value,
                    left,
                    right: left + 1,
                };
                stack.push((left + 1, lo + m, hi));
                stack.push((left, lo, lo + m));
            }
            _ => {
                let mut bucket = part.to_vec();
                bucket.sort_unstable();
                for &s in &bucket {
                    leaf_of[s as usize] = id;
                }
                nodes[id as usize] = Node::Leaf { bucket };
            }
        }
    }
    KdTree { nodes, leaf_of }
}

fn choose_split(store: &VectorStore, part: &[u32], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
    let dim = store.dim;
    let sample = &part[..part.len().min(SAMPLE_MEAN)];
    let n = sample.len() as f64;
    let mut mean = vec![0.0; dim];
    for &s in sample {
        for (m, x) in mean.iter_mut().zip(store.get(s as usize)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for &s in sample {
        for ((v, x), m) in var.iter_mut().zip(store.get(s as usize)).zip(&mean) {
            let d = x - m;
            *v += d * d;
        }
    }
    let mut order: Vec<usize> = (0..dim).filter(|&d| var[d] > 0.0).collect();
    if order.is_empty() {
        return None;
    }
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    order.truncate(RAND_DIM);
    let d = order[rng.random_range(0..order.len())];
    Some((d, mean[d]))
}
