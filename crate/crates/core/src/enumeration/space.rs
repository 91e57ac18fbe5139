use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::lattice::{ChainApprox, PathTree, ValueSurface};
use crate::scalar::{serde_rational, Rational};

use super::EnumerationError;

/// `F_k = G v H_k` with `G` independent of `H_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductStructure {
    /// Blocks of `G`.
    pub g: Vec<Vec<usize>>,
    /// Blocks of `H_k`, one partition per time index.
    pub h: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SpaceRepr {
    #[serde(with = "serde_rational::vec")]
    probabilities: Vec<Rational>,
    #[serde(with = "serde_rational::vec")]
    times: Vec<Rational>,
    filtration: Vec<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    product: Option<ProductStructure>,
}

/// Finite probability space with a filtration given as refining partitions.
///
/// JSON layout: `{"probabilities": ["1/4", ...], "times": ["0", "1/2", ...],
/// "filtration": [[[0, 1], [2, 3]], ...], "product": {"g": [...], "h": [...]}}`
/// where every partition is a list of blocks of atom indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceRepr", into = "SpaceRepr")]
pub struct FiniteFilteredSpace {
    probs: Vec<Rational>,
    times: Vec<Rational>,
    filtration: Vec<Vec<Vec<usize>>>,
    product: Option<ProductStructure>,
    /// `labels[k][w]`: block of `F_k` containing `w`.
    labels: Vec<Vec<usize>>,
    g_labels: Vec<usize>,
    h_labels: Vec<Vec<usize>>,
}

impl TryFrom<SpaceRepr> for FiniteFilteredSpace {
    type Error = EnumerationError;
    fn try_from(r: SpaceRepr) -> Result<Self, Self::Error> {
        FiniteFilteredSpace::new(r.probabilities, r.times, r.filtration, r.product)
    }
}

impl From<FiniteFilteredSpace> for SpaceRepr {
    fn from(s: FiniteFilteredSpace) -> Self {
        SpaceRepr {
            probabilities: s.probs,
            times: s.times,
            filtration: s.filtration,
            product: s.product,
        }
    }
}

fn labels_of(n: usize, blocks: &[Vec<usize>], what: &str) -> Result<Vec<usize>, EnumerationError> {
    let mut lab = vec![usize::MAX; n];
    for (i, b) in blocks.iter().enumerate() {
        if b.is_empty() {
            return Err(EnumerationError::Invalid(format!(
                "{what}: block {i} is empty"
            )));
        }
        for &w in b {
            if w >= n {
                return Err(EnumerationError::Invalid(format!(
                    "{what}: atom {w} out of range"
                )));
            }
            if lab[w] != usize::MAX {
                return Err(EnumerationError::Invalid(format!(
                    "{what}: atom {w} in two blocks"
                )));
            }
            lab[w] = i;
        }
    }
    if let Some(w) = lab.iter().position(|l| *l == usize::MAX) {
        return Err(EnumerationError::Invalid(format!(
            "{what}: atom {w} in no block"
        )));
    }
    Ok(lab)
}

fn refines(fine: &[Vec<usize>], coarse_labels: &[usize]) -> bool {
    fine.iter()
        .all(|b| b.iter().all(|w| coarse_labels[*w] == coarse_labels[b[0]]))
}

impl FiniteFilteredSpace {
    pub fn new(
        probs: Vec<Rational>,
        times: Vec<Rational>,
        filtration: Vec<Vec<Vec<usize>>>,
        product: Option<ProductStructure>,
    ) -> Result<Self, EnumerationError> {
        let n = probs.len();
        if n == 0 {
            return Err(EnumerationError::Invalid("no atoms".into()));
        }
        if probs.iter().any(|p| *p <= Rational::zero()) {
            return Err(EnumerationError::Invalid(
                "atom probabilities must be positive".into(),
            ));
        }
        if probs.iter().fold(Rational::zero(), |a, p| a + p) != Rational::one() {
            return Err(EnumerationError::Invalid(
                "probabilities do not sum to 1".into(),
            ));
        }
        if times.is_empty() || times.len() != filtration.len() {
            return Err(EnumerationError::Invalid(format!(
                "{} times for {} partitions",
                times.len(),
                filtration.len()
            )));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EnumerationError::Invalid(
                "times must increase strictly".into(),
            ));
        }
        let mut labels: Vec<Vec<usize>> = Vec::with_capacity(filtration.len());
        for (k, part) in filtration.iter().enumerate() {
            let lab = labels_of(n, part, &format!("filtration[{k}]"))?;
            if k > 0 && !refines(part, &labels[k - 1]) {
                return Err(EnumerationError::Invalid(format!(
                    "filtration[{k}] does not refine filtration[{}]",
                    k - 1
                )));
            }
            labels.push(lab);
        }
        let (mut g_labels, mut h_labels): (Vec<usize>, Vec<Vec<usize>>) = (Vec::new(), Vec::new());
        if let Some(ps) = &product {
            g_labels = labels_of(n, &ps.g, "g")?;
            if ps.h.len() != filtration.len() {
                return Err(EnumerationError::Invalid(
                    "h needs one partition per time".into(),
                ));
            }
            for (k, part) in ps.h.iter().enumerate() {
                let lab = labels_of(n, part, &format!("h[{k}]"))?;
                if k > 0 && !refines(part, &h_labels[k - 1]) {
                    return Err(EnumerationError::Invalid(format!(
                        "h[{k}] does not refine h[{}]",
                        k - 1
                    )));
                }
                h_labels.push(lab);
            }
            // join: same F_k block iff same G block and same H_k block
            for k in 0..filtration.len() {
                for w in 0..n {
                    for u in w + 1..n {
                        let joint = g_labels[w] == g_labels[u] && h_labels[k][w] == h_labels[k][u];
                        if joint != (labels[k][w] == labels[k][u]) {
                            return Err(EnumerationError::Invalid(format!(
                                "filtration[{k}] is not the join of g and h[{k}] (atoms {w}, {u})"
                            )));
                        }
                    }
                }
            }
            let last = ps.h.len() - 1;
            let mass = |set: &mut dyn Iterator<Item = usize>| {
                set.fold(Rational::zero(), |a, w| a + &probs[w])
            };
            for b in &ps.g {
                let pb = mass(&mut b.iter().copied());
                for c in &ps.h[last] {
                    let pc = mass(&mut c.iter().copied());
                    let pbc = mass(
                        &mut b
                            .iter()
                            .copied()
                            .filter(|w| h_labels[last][*w] == h_labels[last][c[0]]),
                    );
                    if pbc != pb.clone() * pc {
                        return Err(EnumerationError::Independence(format!(
                            "P(B ^ C) != P(B) P(C) for g block containing {} and h block containing {}",
                            b[0], c[0]
                        )));
                    }
                }
            }
        }
        Ok(FiniteFilteredSpace {
            probs,
            times,
            filtration,
            product,
            labels,
            g_labels,
            h_labels,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.probs.len()
    }
    /// Index of the last time, `N`.
    pub fn horizon_index(&self) -> usize {
        self.times.len() - 1
    }
    pub fn probs(&self) -> &[Rational] {
        &self.probs
    }
    pub fn times(&self) -> &[Rational] {
        &self.times
    }
    pub fn filtration(&self) -> &[Vec<Vec<usize>>] {
        &self.filtration
    }
    pub fn product(&self) -> Option<&ProductStructure> {
        self.product.as_ref()
    }
    /// Block of `F_k` containing `w`.
    pub fn block_of(&self, k: usize, w: usize) -> usize {
        self.labels[k][w]
    }
    pub fn g_block_of(&self, w: usize) -> usize {
        self.g_labels[w]
    }
    pub fn h_block_of(&self, k: usize, w: usize) -> usize {
        self.h_labels[k][w]
    }

    pub fn prob_of(&self, set: impl IntoIterator<Item = usize>) -> Rational {
        set.into_iter()
            .fold(Rational::zero(), |a, w| a + &self.probs[w])
    }

    /// Whether `set` is a union of `F_k` blocks.
    pub fn is_measurable(&self, k: usize, set: &[bool]) -> bool {
        self.filtration[k]
            .iter()
            .all(|b| b.iter().all(|w| set[*w] == set[b[0]]))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("space serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, EnumerationError> {
        serde_json::from_str(s).map_err(|e| EnumerationError::Invalid(e.to_string()))
    }

    /// The space with product structure forgotten.
    pub fn without_product(&self) -> Self {
        let mut s = self.clone();
        s.product = None;
        s.g_labels.clear();
        s.h_labels.clear();
        s
    }
}

/// Stopping time as a time index per atom.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StoppingTimeTable {
    pub stop_time: Vec<usize>,
}

impl StoppingTimeTable {
    pub fn constant(space: &FiniteFilteredSpace, k: usize) -> Self {
        StoppingTimeTable {
            stop_time: vec![k; space.n_atoms()],
        }
    }

    pub fn check_adapted(&self, space: &FiniteFilteredSpace) -> Result<(), EnumerationError> {
        self.check_adapted_to(space, &space.filtration, "F")
    }

    /// Adaptedness to `H`; needs a product structure.
    pub fn check_h_adapted(&self, space: &FiniteFilteredSpace) -> Result<(), EnumerationError> {
        let ps = space
            .product
            .as_ref()
            .ok_or(EnumerationError::MissingProduct)?;
        self.check_adapted_to(space, &ps.h, "H")
    }

    fn check_adapted_to(
        &self,
        space: &FiniteFilteredSpace,
        parts: &[Vec<Vec<usize>>],
        name: &str,
    ) -> Result<(), EnumerationError> {
        if self.stop_time.len() != space.n_atoms() {
            return Err(EnumerationError::Invalid(format!(
                "table has {} entries for {} atoms",
                self.stop_time.len(),
                space.n_atoms()
            )));
        }
        let n = space.horizon_index();
        if let Some(w) = self.stop_time.iter().position(|t| *t > n) {
            return Err(EnumerationError::NotAdapted(format!(
                "atom {w} stops after the last time"
            )));
        }
        for (k, part) in parts.iter().enumerate() {
            for b in part {
                let first = self.stop_time[b[0]] <= k;
                if b.iter().any(|w| (self.stop_time[*w] <= k) != first) {
                    return Err(EnumerationError::NotAdapted(format!(
                        "{{tau <= {k}}} splits a block of {name}_{k} (atoms {:?})",
                        b
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Gains on a finite space: `running[k][w]` accrues when continuing past
/// time `k`, `terminal[k][w]` is paid on stopping at `k`. Realized gain of
/// stopping at `k` is `sum_{j<k} running[j] + terminal[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    #[serde(with = "serde_rational::vec2")]
    pub running: Vec<Vec<Rational>>,
    #[serde(with = "serde_rational::vec2")]
    pub terminal: Vec<Vec<Rational>>,
}

impl GainTable {
    /// Realized gain of stopping at `k`, per time and atom.
    pub fn realized(&self) -> Vec<Vec<Rational>> {
        let n = self.terminal.len();
        let atoms = self.terminal[0].len();
        let mut acc = vec![Rational::zero(); atoms];
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            out.push(
                (0..atoms)
                    .map(|w| acc[w].clone() + &self.terminal[k][w])
                    .collect(),
            );
            for (w, a) in acc.iter_mut().enumerate() {
                *a += &self.running[k][w];
            }
        }
        out
    }

    pub fn check(&self, space: &FiniteFilteredSpace) -> Result<(), EnumerationError> {
        let n = space.times.len();
        if self.running.len() != n || self.terminal.len() != n {
            return Err(EnumerationError::Invalid(
                "gain table needs one row per time".into(),
            ));
        }
        for k in 0..n {
            for (name, row) in [
                ("running", &self.running[k]),
                ("terminal", &self.terminal[k]),
            ] {
                if row.len() != space.n_atoms() {
                    return Err(EnumerationError::Invalid(format!(
                        "{name}[{k}] has the wrong length"
                    )));
                }
                for b in &space.filtration[k] {
                    if b.iter().any(|w| row[*w] != row[b[0]]) {
                        return Err(EnumerationError::Invalid(format!(
                            "{name}[{k}] is not constant on the block {b:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Levels of the partition-refinement tree: node `i` of level `k` is block
/// `i` of the `k`-th partition, children are the blocks it splits into.
#[derive(Debug, Clone)]
pub(crate) struct RefinementTree {
    pub levels: Vec<Vec<TreeNode>>,
}

#[derive(Debug, Clone)]
pub(crate) struct TreeNode {
    pub atoms: Vec<usize>,
    pub children: Vec<usize>,
}

impl RefinementTree {
    pub fn new(n_atoms: usize, parts: &[Vec<Vec<usize>>]) -> Self {
        let mut levels: Vec<Vec<TreeNode>> = parts
            .iter()
            .map(|p| {
                p.iter()
                    .map(|b| {
                        let mut atoms = b.clone();
                        atoms.sort_unstable();
                        TreeNode {
                            atoms,
                            children: Vec::new(),
                        }
                    })
                    .collect()
            })
            .collect();
        for k in 0..levels.len().saturating_sub(1) {
            let mut owner = vec![0; n_atoms];
            for (i, node) in levels[k].iter().enumerate() {
                for &w in &node.atoms {
                    owner[w] = i;
                }
            }
            for c in 0..levels[k + 1].len() {
                let parent = owner[levels[k + 1][c].atoms[0]];
                levels[k][parent].children.push(c);
            }
        }
        RefinementTree { levels }
    }
}

/// The chain's path tree as a filtered space: atoms are paths, `F_k` is
/// generated by the first `k + 1` nodes, gains come from the surface.
pub fn space_from_chain(
    chain: &ChainApprox<Rational>,
    surface: &ValueSurface<Rational>,
    max_paths: usize,
) -> Result<(FiniteFilteredSpace, GainTable, PathTree<Rational>), EnumerationError> {
    let tree = PathTree::from_chain(chain, max_paths)
        .map_err(|e| EnumerationError::Invalid(e.to_string()))?;
    let filtration = tree
        .prefixes
        .iter()
        .map(|layer| layer.iter().map(|p| (p.first..p.end).collect()).collect())
        .collect();
    let times = (0..chain.layers.len()).map(|k| chain.time(k)).collect();
    let space = FiniteFilteredSpace::new(tree.probs.clone(), times, filtration, None)?;
    let pick = |table: &Vec<Vec<Rational>>| -> Vec<Vec<Rational>> {
        (0..chain.layers.len())
            .map(|k| tree.paths.iter().map(|p| table[k][p[k]].clone()).collect())
            .collect()
    };
    let gains = GainTable {
        running: pick(&surface.running),
        terminal: pick(&surface.obstacle),
    };
    Ok((space, gains, tree))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{int, ratio};

    pub(crate) fn product_2x2() -> FiniteFilteredSpace {
        // G = {{0,1,2,3},{4,5,6,7}} x binary H of depth 2; atom = 4 g + leaf
        let pg = [ratio(1, 3), ratio(2, 3)];
        let ph = [ratio(1, 8), ratio(3, 8), ratio(1, 4), ratio(1, 4)];
        let probs = (0..8)
            .map(|w| pg[w / 4].clone() * ph[w % 4].clone())
            .collect();
        let h = vec![
            vec![(0..8).collect()],
            vec![vec![0, 1, 4, 5], vec![2, 3, 6, 7]],
            (0..4).map(|l| vec![l, l + 4]).collect(),
        ];
        let g = vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]];
        let filtration = vec![
            g.clone(),
            vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]],
            (0..8).map(|w| vec![w]).collect(),
        ];
        FiniteFilteredSpace::new(
            probs,
            vec![int(0), ratio(1, 2), int(1)],
            filtration,
            Some(ProductStructure { g, h }),
        )
        .unwrap()
    }

    #[test]
    fn json_round_trip() {
        let s = product_2x2();
        let text = s.to_json();
        assert!(text.contains("\"1/24\""));
        assert_eq!(FiniteFilteredSpace::from_json(&text).unwrap(), s);
    }

    #[test]
    fn rejects_broken_spaces() {
        let s = product_2x2();
        let mut r: SpaceRepr = s.clone().into();
        r.filtration[1] = vec![vec![0, 2], vec![1, 3], vec![4, 5], vec![6, 7]];
        assert!(FiniteFilteredSpace::try_from(r).is_err());
        // dependence between G and H
        let mut r: SpaceRepr = s.into();
        r.probabilities[0] = ratio(1, 24) + ratio(1, 48);
        r.probabilities[1] = ratio(3, 24) - ratio(1, 48);
        let err = FiniteFilteredSpace::try_from(r).unwrap_err();
        assert!(matches!(err, EnumerationError::Independence(_)), "{err}");
    }

    #[test]
    fn adaptedness() {
        let s = product_2x2();
        let ok = StoppingTimeTable {
            stop_time: vec![1, 1, 2, 2, 0, 0, 0, 0],
        };
        ok.check_adapted(&s).unwrap();
        assert!(ok.check_h_adapted(&s).is_err());
        let bad = StoppingTimeTable {
            stop_time: vec![1, 2, 2, 2, 0, 0, 0, 0],
        };
        assert!(matches!(
            bad.check_adapted(&s),
            Err(EnumerationError::NotAdapted(_))
        ));
    }
}
