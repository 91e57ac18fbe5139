//! Seeded generators of random product spaces, gains and stopping times.
//! Parameters live in [`Manifest`] so a failing case is reproducible from
//! `(manifest version, seed)` alone.

use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{ratio, Rational};

use super::space::{
    FiniteFilteredSpace, GainTable, ProductStructure, RefinementTree, StoppingTimeTable,
};
use super::stopping::count_stopping_times;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Number of `G` blocks is drawn from `1..=g_atoms_max`.
    pub g_atoms_max: usize,
    /// Depth of the `H` tree is drawn from `1..=h_depth_max`.
    pub h_depth_max: usize,
    /// Children per `H` node are drawn from `1..=branching_max`.
    pub branching_max: usize,
    /// Probability weights are integers in `1..=weight_max`.
    pub weight_max: i64,
    /// Gain numerators in `gain_num`, denominators in `1..=gain_den_max`.
    pub gain_num: (i64, i64),
    pub gain_den_max: i64,
    /// Spaces with more `F`-stopping times are redrawn.
    pub max_stopping_times: u128,
}

impl Manifest {
    /// Spaces for the conditional-value and key-equality checks.
    pub const KEY_EQUALITY: Manifest = Manifest {
        version: 1,
        g_atoms_max: 3,
        h_depth_max: 3,
        branching_max: 3,
        weight_max: 4,
        gain_num: (-6, 12),
        gain_den_max: 4,
        max_stopping_times: 1_000_000,
    };

    /// Spaces for the decomposition check, which visits every stopping time.
    pub const APPROXIMATION: Manifest = Manifest {
        version: 1,
        g_atoms_max: 3,
        h_depth_max: 3,
        branching_max: 3,
        weight_max: 4,
        gain_num: (-6, 12),
        gain_den_max: 4,
        max_stopping_times: 5_000,
    };
}

fn weights_to_probs(rng: &mut ChaCha8Rng, n: usize, max: i64) -> Vec<Rational> {
    let w: Vec<i64> = (0..n).map(|_| rng.random_range(1..=max)).collect();
    let total: i64 = w.iter().sum();
    w.into_iter().map(|x| ratio(x, total)).collect()
}

/// One attempt: `G` blocks times a random `H` tree; atom `b * leaves + leaf`.
fn draw(m: &Manifest, rng: &mut ChaCha8Rng) -> FiniteFilteredSpace {
    let n_g = rng.random_range(1..=m.g_atoms_max);
    let depth = rng.random_range(1..=m.h_depth_max);
    // H tree: per level, parent of each node and conditional probability
    let mut levels: Vec<Vec<(usize, Rational)>> = vec![vec![(0, ratio(1, 1))]];
    for _ in 0..depth {
        let prev = levels.last().unwrap().len();
        let mut next = Vec::new();
        for parent in 0..prev {
            let kids = rng.random_range(1..=m.branching_max);
            for p in weights_to_probs(rng, kids, m.weight_max) {
                next.push((parent, p));
            }
        }
        levels.push(next);
    }
    // leaf probabilities and ancestors per level
    let leaves = levels[depth].len();
    let mut anc = vec![vec![0usize; leaves]; depth + 1];
    let mut p_leaf = vec![ratio(1, 1); leaves];
    for leaf in 0..leaves {
        let mut node = leaf;
        for k in (0..=depth).rev() {
            anc[k][leaf] = node;
            p_leaf[leaf] *= levels[k][node].1.clone();
            node = levels[k][node].0;
        }
    }
    let p_g = weights_to_probs(rng, n_g, m.weight_max);
    let n = n_g * leaves;
    let probs = (0..n)
        .map(|w| p_g[w / leaves].clone() * p_leaf[w % leaves].clone())
        .collect();
    let g: Vec<Vec<usize>> = (0..n_g)
        .map(|b| (b * leaves..(b + 1) * leaves).collect())
        .collect();
    let h: Vec<Vec<Vec<usize>>> = (0..=depth)
        .map(|k| {
            (0..levels[k].len())
                .map(|node| {
                    (0..n)
                        .filter(|w| anc[k][w % leaves] == node)
                        .collect::<Vec<_>>()
                })
                .filter(|b| !b.is_empty())
                .collect()
        })
        .collect();
    let filtration = (0..=depth)
        .map(|k| {
            let mut blocks = Vec::new();
            for gb in &g {
                for hb in &h[k] {
                    let meet: Vec<usize> = gb.iter().copied().filter(|w| hb.contains(w)).collect();
                    if !meet.is_empty() {
                        blocks.push(meet);
                    }
                }
            }
            blocks
        })
        .collect();
    let times = (0..=depth).map(|k| ratio(k as i64, depth as i64)).collect();
    FiniteFilteredSpace::new(probs, times, filtration, Some(ProductStructure { g, h }))
        .expect("generator builds valid product spaces")
}

/// Random product space within the manifest's stopping-time cap.
pub fn random_product_space(m: &Manifest, seed: u64) -> FiniteFilteredSpace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let s = draw(m, &mut rng);
        if count_stopping_times(&s) <= m.max_stopping_times {
            return s;
        }
    }
}

/// Random gains, constant on the blocks of each `F_k`.
pub fn random_gains(space: &FiniteFilteredSpace, m: &Manifest, seed: u64) -> GainTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = |rng: &mut ChaCha8Rng| -> Vec<Vec<Rational>> {
        space
            .filtration()
            .iter()
            .map(|part| {
                let mut row = vec![Rational::zero(); space.n_atoms()];
                for b in part {
                    let v = ratio(
                        rng.random_range(m.gain_num.0..=m.gain_num.1),
                        rng.random_range(1..=m.gain_den_max),
                    );
                    for &w in b {
                        row[w] = v.clone();
                    }
                }
                row
            })
            .collect()
    };
    let running = table(&mut rng);
    let terminal = table(&mut rng);
    GainTable { running, terminal }
}

/// Random `F`-stopping time: stop at each open block with probability
/// `stop_prob`, forced at the last time.
pub fn random_stopping_time(
    space: &FiniteFilteredSpace,
    stop_prob: f64,
    seed: u64,
) -> StoppingTimeTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = RefinementTree::new(space.n_atoms(), space.filtration());
    let last = tree.levels.len() - 1;
    let mut stop = vec![0; space.n_atoms()];
    let mut open: Vec<usize> = (0..tree.levels[0].len()).collect();
    for k in 0..=last {
        let mut next = Vec::new();
        for i in open {
            let node = &tree.levels[k][i];
            if k == last || rng.random_bool(stop_prob) {
                for &w in &node.atoms {
                    stop[w] = k;
                }
            } else {
                next.extend(node.children.iter().copied());
            }
        }
        open = next;
    }
    StoppingTimeTable { stop_time: stop }
}

/// Binary refinement trees of exactly `depth` levels below the root where
/// every node has one or two children, with random split probabilities.
pub fn binary_spaces(depth: usize, seed: u64) -> Vec<FiniteFilteredSpace> {
    fn shapes(depth: usize) -> Vec<Vec<Vec<usize>>> {
        // a shape is, per level, the number of children of each node
        if depth == 0 {
            return vec![Vec::new()];
        }
        let sub = shapes(depth - 1);
        let mut out = Vec::new();
        for &kids in &[1usize, 2] {
            let combos: Vec<Vec<&Vec<Vec<usize>>>> = if kids == 1 {
                sub.iter().map(|s| vec![s]).collect()
            } else {
                sub.iter()
                    .flat_map(|a| sub.iter().map(move |b| vec![a, b]))
                    .collect()
            };
            for combo in combos {
                let mut shape = vec![vec![kids]];
                for level in 0..depth - 1 {
                    shape.push(
                        combo
                            .iter()
                            .flat_map(|s| s[level].iter().copied())
                            .collect(),
                    );
                }
                out.push(shape);
            }
        }
        out
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes(depth)
        .into_iter()
        .map(|shape| {
            // leaves and per-level blocks by walking the shape
            let mut blocks: Vec<Vec<Vec<usize>>> = vec![vec![vec![0]]];
            let mut probs: Vec<Rational> = vec![ratio(1, 1)];
            for kids in &shape {
                let mut next_blocks = Vec::new();
                let mut next_probs = Vec::new();
                for (node, &c) in blocks.last().unwrap().iter().zip(kids) {
                    let split = weights_to_probs(&mut rng, c, 4);
                    for p in split {
                        next_blocks.push(vec![next_blocks.len()]);
                        next_probs.push(probs[node[0]].clone() * p);
                    }
                }
                // re-express earlier levels in terms of the new leaves
                let parent_of: Vec<usize> = blocks
                    .last()
                    .unwrap()
                    .iter()
                    .zip(kids)
                    .enumerate()
                    .flat_map(|(i, (_, &c))| std::iter::repeat_n(i, c))
                    .collect();
                for level in blocks.iter_mut() {
                    for b in level.iter_mut() {
                        let members: Vec<usize> = b.clone();
                        *b = (0..parent_of.len())
                            .filter(|leaf| members.contains(&parent_of[*leaf]))
                            .collect();
                    }
                }
                blocks.push(next_blocks);
                probs = next_probs;
            }
            let times = (0..blocks.len()).map(|k| ratio(k as i64, 1)).collect();
            FiniteFilteredSpace::new(probs, times, blocks, None).expect("valid binary space")
        })
        .collect()
}
