use rand::Rng;

use crate::scalar::Scalar;

use super::chain::ChainApprox;
use super::snell::ValueSurface;
use super::LatticeError;

/// Default cap on the number of paths unrolled from a chain.
pub const MAX_PATHS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Prefix<S> {
    /// Chain node at this layer.
    pub node: usize,
    /// Prefix index on the previous layer (0 at the root).
    pub parent: usize,
    /// Transition probability from the parent.
    pub prob: S,
    pub children: Vec<usize>,
    /// Paths through this prefix are `paths[first..end]`.
    pub first: usize,
    pub end: usize,
}

/// The chain unrolled into its path tree; atoms of the natural filtration at
/// layer `k` are the prefixes of length `k + 1`. Zero-probability branches
/// are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTree<S> {
    pub prefixes: Vec<Vec<Prefix<S>>>,
    /// Chain node per layer, one row per path, in depth-first order.
    pub paths: Vec<Vec<usize>>,
    pub probs: Vec<S>,
}

impl<S: Scalar> PathTree<S> {
    pub fn from_chain(chain: &ChainApprox<S>, max_paths: usize) -> Result<Self, LatticeError> {
        let n = chain.n_steps();
        // count first so a huge tree fails fast
        let mut count = vec![1usize; chain.layers[n].len()];
        for k in (0..n).rev() {
            count = chain.layers[k]
                .iter()
                .map(|node| {
                    node.children
                        .iter()
                        .filter(|(_, p)| !p.is_zero())
                        .fold(0usize, |acc, (c, _)| acc.saturating_add(count[*c]))
                })
                .collect();
        }
        if count[0] > max_paths {
            return Err(LatticeError::Invalid(format!(
                "chain has {} paths, above the cap of {max_paths}",
                count[0]
            )));
        }
        let mut tree = PathTree {
            prefixes: vec![Vec::new(); n + 1],
            paths: Vec::with_capacity(count[0]),
            probs: Vec::with_capacity(count[0]),
        };
        let mut stack = vec![0usize];
        tree.grow(chain, 0, 0, 0, S::one(), S::one(), &mut stack);
        Ok(tree)
    }

    #[allow(clippy::too_many_arguments)]
    fn grow(
        &mut self,
        chain: &ChainApprox<S>,
        k: usize,
        node: usize,
        parent: usize,
        prob: S,
        path_prob: S,
        stack: &mut Vec<usize>,
    ) -> usize {
        let id = self.prefixes[k].len();
        let first = self.paths.len();
        self.prefixes[k].push(Prefix {
            node,
            parent,
            prob,
            children: Vec::new(),
            first,
            end: first,
        });
        if k == chain.n_steps() {
            self.paths.push(stack.clone());
            self.probs.push(path_prob);
        } else {
            let mut kids = Vec::new();
            for (c, p) in &chain.layers[k][node].children {
                if p.is_zero() {
                    continue;
                }
                stack.push(*c);
                kids.push(self.grow(
                    chain,
                    k + 1,
                    *c,
                    id,
                    p.clone(),
                    path_prob.clone() * p.clone(),
                    stack,
                ));
                stack.pop();
            }
            self.prefixes[k][id].children = kids;
        }
        self.prefixes[k][id].end = self.paths.len();
        id
    }

    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn n_layers(&self) -> usize {
        self.prefixes.len()
    }

    /// Checks `{tau <= k}` is a union of layer-`k` prefixes for every `k`.
    pub fn check_adapted(&self, tau: &[usize]) -> Result<(), LatticeError> {
        if tau.len() != self.n_paths() {
            return Err(LatticeError::Invalid(format!(
                "stopping time has {} entries for {} paths",
                tau.len(),
                self.n_paths()
            )));
        }
        let last = self.n_layers() - 1;
        if let Some(i) = tau.iter().position(|t| *t > last) {
            return Err(LatticeError::NotAdapted(format!(
                "path {i} stops after the last layer"
            )));
        }
        for (k, layer) in self.prefixes.iter().enumerate() {
            for (id, pre) in layer.iter().enumerate() {
                let stopped = tau[pre.first] <= k;
                if tau[pre.first..pre.end].iter().any(|t| (*t <= k) != stopped) {
                    return Err(LatticeError::NotAdapted(format!(
                        "{{tau <= {k}}} splits prefix {id} of layer {k}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Random adapted stopping time: at each unstopped prefix stop with
    /// probability `stop_prob`, forced at the last layer.
    pub fn random_stopping_time<R: Rng>(&self, rng: &mut R, stop_prob: f64) -> Vec<usize> {
        let mut tau = vec![0; self.n_paths()];
        let mut open = vec![0usize];
        let last = self.n_layers() - 1;
        for k in 0..=last {
            let mut next = Vec::new();
            for id in open {
                let pre = &self.prefixes[k][id];
                if k == last || rng.random_bool(stop_prob) {
                    tau[pre.first..pre.end].fill(k);
                } else {
                    next.extend(pre.children.iter().copied());
                }
            }
            open = next;
        }
        tau
    }

    /// Realized gain `sum_{j<k} f_j dt + g(X_k)` per path and layer.
    pub fn gain_table(&self, surface: &ValueSurface<S>) -> Vec<Vec<S>> {
        self.paths
            .iter()
            .map(|nodes| {
                let mut acc = S::zero();
                nodes
                    .iter()
                    .enumerate()
                    .map(|(k, &i)| {
                        let z = acc.clone() + surface.obstacle[k][i].clone();
                        acc = acc.clone() + surface.running[k][i].clone();
                        z
                    })
                    .collect()
            })
            .collect()
    }
}

/// `|v(0, x0) - sup_tau E[sum f dt up to tau ^ tau' + g(X_tau) 1{tau < tau'}
/// + v(tau', X_tau') 1{tau >= tau'}]|`, the supremum taken by backward
/// induction on the path tree with values frozen at `tau'`.
pub fn verify_dpp<S: Scalar>(
    chain: &ChainApprox<S>,
    surface: &ValueSurface<S>,
    tree: &PathTree<S>,
    tau_prime: &[usize],
) -> Result<S, LatticeError> {
    tree.check_adapted(tau_prime)?;
    if tree.n_layers() != chain.layers.len() {
        return Err(LatticeError::Invalid(
            "path tree and chain differ in depth".into(),
        ));
    }
    let last = tree.n_layers() - 1;
    let mut below: Vec<S> = Vec::new();
    for k in (0..=last).rev() {
        let layer = &tree.prefixes[k];
        let mut cur = Vec::with_capacity(layer.len());
        for pre in layer {
            let i = pre.node;
            let v = if tau_prime[pre.first] == k {
                surface.values[k][i].clone()
            } else if tau_prime[pre.first] < k {
                // already frozen upstream; never read
                S::zero()
            } else {
                let cont = pre
                    .children
                    .iter()
                    .fold(surface.running[k][i].clone(), |acc, c| {
                        acc + tree.prefixes[k + 1][*c].prob.clone() * below[*c].clone()
                    });
                surface.obstacle[k][i].clone().max_of(cont)
            };
            cur.push(v);
        }
        below = cur;
    }
    Ok((surface.root().clone() - below[0].clone()).abs_val())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{snell_envelope, FnGains};
    use crate::scalar::{int, ratio, Rational};
    use num_traits::{Signed, Zero};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (
        ChainApprox<Rational>,
        ValueSurface<Rational>,
        PathTree<Rational>,
    ) {
        let c = ChainApprox::walk(
            int(0),
            int(0),
            ratio(1, 4),
            4,
            &[(int(-1), ratio(1, 3)), (int(2), ratio(2, 3))],
        )
        .unwrap();
        let s = snell_envelope(
            &c,
            &FnGains {
                running: |_: &Rational, x: &[Rational]| -x[0].clone() / int(5),
                terminal: |x: &[Rational]| (x[0].clone() - int(1)).abs(),
            },
        );
        let tree = PathTree::from_chain(&c, MAX_PATHS).unwrap();
        (c, s, tree)
    }

    #[test]
    fn tree_shape_and_probabilities() {
        let (_, _, tree) = setup();
        assert_eq!(tree.n_paths(), 16);
        assert_eq!(
            tree.probs.iter().fold(Rational::zero(), |a, p| a + p),
            int(1)
        );
        assert_eq!(tree.prefixes[2].len(), 4);
    }

    #[test]
    fn constant_tau_prime_gives_zero_residual() {
        let (c, s, tree) = setup();
        for k in 0..=4 {
            let tau = vec![k; tree.n_paths()];
            assert!(
                verify_dpp(&c, &s, &tree, &tau).unwrap().is_zero(),
                "k = {k}"
            );
        }
    }

    #[test]
    fn random_adapted_tau_prime() {
        let (c, s, tree) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let tau = tree.random_stopping_time(&mut rng, 0.3);
            tree.check_adapted(&tau).unwrap();
            assert!(verify_dpp(&c, &s, &tree, &tau).unwrap().is_zero());
        }
    }

    #[test]
    fn anticipating_tau_prime_is_rejected() {
        let (c, s, tree) = setup();
        // stop at layer 1 only on paths whose last move is up
        let tau: Vec<usize> = tree
            .paths
            .iter()
            .map(|p| {
                if c.layers[4][p[4]].state[0] > c.layers[3][p[3]].state[0] {
                    1
                } else {
                    4
                }
            })
            .collect();
        assert!(matches!(
            verify_dpp(&c, &s, &tree, &tau),
            Err(LatticeError::NotAdapted(_))
        ));
    }

    #[test]
    fn path_cap() {
        let (c, _, _) = setup();
        assert!(PathTree::from_chain(&c, 15).is_err());
    }
}
