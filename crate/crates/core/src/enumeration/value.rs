use std::collections::HashMap;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::scalar::Rational;

use super::space::{FiniteFilteredSpace, GainTable, RefinementTree, StoppingTimeTable};
use super::stopping::{count_from, visit_from, DEFAULT_CAP};
use super::EnumerationError;

/// An atom of `F_theta`: a block of `F_k` inside `{theta = k}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThetaAtom {
    pub time: usize,
    pub atoms: Vec<usize>,
}

/// Atoms of `F_theta = {A : A ^ {theta <= k} in F_k for all k}`, built by
/// intersecting the level sets of `theta` with the blocks of `F_k`.
pub fn theta_atoms(
    space: &FiniteFilteredSpace,
    theta: &StoppingTimeTable,
) -> Result<Vec<ThetaAtom>, EnumerationError> {
    theta.check_adapted(space)?;
    let n = space.n_atoms();
    let mut out = Vec::new();
    for (k, part) in space.filtration().iter().enumerate() {
        for block in part {
            let atoms: Vec<usize> = block
                .iter()
                .copied()
                .filter(|w| theta.stop_time[*w] == k)
                .collect();
            if atoms.is_empty() {
                continue;
            }
            // the definition, checked literally
            let mut member = vec![false; n];
            for &w in &atoms {
                member[w] = true;
            }
            for j in 0..space.filtration().len() {
                let cut: Vec<bool> = (0..n)
                    .map(|w| member[w] && theta.stop_time[w] <= j)
                    .collect();
                if !space.is_measurable(j, &cut) {
                    return Err(EnumerationError::NotAdapted(format!(
                        "candidate atom {atoms:?} of F_theta fails at time {j}"
                    )));
                }
            }
            let mut atoms = atoms;
            atoms.sort_unstable();
            out.push(ThetaAtom { time: k, atoms });
        }
    }
    Ok(out)
}

/// `P(w) * Z_k(w)` scaled to integers when that fits comfortably in `i128`.
enum Weights {
    Int { w: Vec<Vec<i128>>, scale: BigInt },
    Big { w: Vec<Vec<Rational>> },
}

impl Weights {
    fn new(space: &FiniteFilteredSpace, realized: &[Vec<Rational>]) -> Self {
        let n = space.n_atoms();
        let raw: Vec<Vec<Rational>> = (0..n)
            .map(|w| {
                realized
                    .iter()
                    .map(|row| row[w].clone() * &space.probs()[w])
                    .collect()
            })
            .collect();
        let scale = raw
            .iter()
            .flatten()
            .fold(BigInt::one(), |l, r| l.lcm(r.denom()));
        let limit = BigInt::from(1u128 << 100) / BigInt::from(n.max(1));
        let ints: Option<Vec<Vec<i128>>> = raw
            .iter()
            .map(|row| {
                row.iter()
                    .map(|r| {
                        let v = r.numer() * (&scale / r.denom());
                        if v.abs() < limit {
                            v.to_i128()
                        } else {
                            None
                        }
                    })
                    .collect()
            })
            .collect();
        match ints {
            Some(w) => Weights::Int { w, scale },
            None => Weights::Big { w: raw },
        }
    }
}

/// Per `F_theta` atom, `max E[Z_tau | A]` over the stopping times offered by
/// `enumerate`, which calls back with `tau` for each candidate; candidates
/// only need to be set on the atom itself.
fn max_per_atom(
    space: &FiniteFilteredSpace,
    weights: &Weights,
    atoms: &[ThetaAtom],
    enumerate: &mut dyn FnMut(&mut dyn FnMut(&[usize])),
) -> Vec<Rational> {
    let mass: Vec<Rational> = atoms
        .iter()
        .map(|a| space.prob_of(a.atoms.iter().copied()))
        .collect();
    match weights {
        Weights::Int { w, scale } => {
            let mut best = vec![i128::MIN; atoms.len()];
            enumerate(&mut |tau| {
                for (a, b) in atoms.iter().zip(best.iter_mut()) {
                    let s: i128 = a.atoms.iter().map(|&x| w[x][tau[x]]).sum();
                    if s > *b {
                        *b = s;
                    }
                }
            });
            best.iter()
                .zip(mass)
                .map(|(b, m)| Rational::new(BigInt::from(*b), scale.clone()) / m)
                .collect()
        }
        Weights::Big { w } => {
            let mut best: Vec<Option<Rational>> = vec![None; atoms.len()];
            enumerate(&mut |tau| {
                for (a, b) in atoms.iter().zip(best.iter_mut()) {
                    let s = a
                        .atoms
                        .iter()
                        .fold(Rational::zero(), |acc, &x| acc + &w[x][tau[x]]);
                    if b.as_ref().is_none_or(|v| s > *v) {
                        *b = Some(s);
                    }
                }
            });
            best.into_iter()
                .zip(mass)
                .map(|(b, m)| b.expect("at least one candidate") / m)
                .collect()
        }
    }
}

/// Conditional value on each atom of `F_theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalValues {
    pub atoms: Vec<ThetaAtom>,
    pub values: Vec<Rational>,
}

impl ConditionalValues {
    /// Value as a random variable, per atom of the space.
    pub fn per_atom(&self, n_atoms: usize) -> Vec<Rational> {
        let mut out = vec![Rational::zero(); n_atoms];
        for (a, v) in self.atoms.iter().zip(&self.values) {
            for &w in &a.atoms {
                out[w] = v.clone();
            }
        }
        out
    }
}

/// For each atom `A` of `F_theta`, the maximum over enumerated stopping times
/// `tau >= theta` of `E[gain(tau) | A]`. With `restrict_to_h` the candidates
/// on `A = B ^ C` (with `theta = k` there) are the `H`-stopping times `>= k`.
pub fn value_brute_force(
    space: &FiniteFilteredSpace,
    gains: &GainTable,
    theta: &StoppingTimeTable,
    restrict_to_h: bool,
) -> Result<ConditionalValues, EnumerationError> {
    value_brute_force_capped(space, gains, theta, restrict_to_h, DEFAULT_CAP)
}

pub fn value_brute_force_capped(
    space: &FiniteFilteredSpace,
    gains: &GainTable,
    theta: &StoppingTimeTable,
    restrict_to_h: bool,
    cap: u128,
) -> Result<ConditionalValues, EnumerationError> {
    gains.check(space)?;
    let atoms = theta_atoms(space, theta)?;
    let weights = Weights::new(space, &gains.realized());
    let n = space.n_atoms();
    let values = if !restrict_to_h {
        let tree = RefinementTree::new(n, space.filtration());
        let can_stop = |k: usize, i: usize| theta.stop_time[tree.levels[k][i].atoms[0]] <= k;
        let roots: Vec<(usize, usize)> = (0..tree.levels[0].len()).map(|i| (0, i)).collect();
        let count = roots.iter().fold(1u128, |acc, (k, i)| {
            acc.saturating_mul(count_from(&tree, *k, *i, &can_stop))
        });
        if count > cap {
            return Err(EnumerationError::CapExceeded { count, cap });
        }
        let mut tau = vec![0; n];
        max_per_atom(space, &weights, &atoms, &mut |visit| {
            visit_from(&tree, &roots, &can_stop, &mut tau, visit)
        })
    } else {
        let ps = space.product().ok_or(EnumerationError::MissingProduct)?;
        let htree = RefinementTree::new(n, &ps.h);
        let mut values = Vec::with_capacity(atoms.len());
        for a in &atoms {
            let k = a.time;
            let c = space.h_block_of(k, a.atoms[0]);
            let can_stop = |level: usize, _: usize| level >= k;
            let count = count_from(&htree, k, c, &can_stop);
            if count > cap {
                return Err(EnumerationError::CapExceeded { count, cap });
            }
            let one = std::slice::from_ref(a);
            let mut tau = vec![0; n];
            values.push(
                max_per_atom(space, &weights, one, &mut |visit| {
                    visit_from(&htree, &[(k, c)], &can_stop, &mut tau, visit)
                })
                .remove(0),
            );
        }
        values
    };
    Ok(ConditionalValues { atoms, values })
}

/// Outcome of comparing the deterministic-map side with the conditional
/// supremum over all `F`-stopping times.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyEquality {
    /// `max_A |v_tilde side - esssup side|`.
    pub max_gap: Rational,
    pub tilde_side: Vec<Rational>,
    pub esssup: ConditionalValues,
}

/// `v~(k, b, c)`: best `H`-stopping time `>= k` on the `H_k` block `c`, for
/// the `G` block `b` frozen, valued with the `H`-marginal law `P(D)/P(c)`.
/// Depends only on `(k, b, c)`, never on the joint law.
struct TildeMap<'a> {
    space: &'a FiniteFilteredSpace,
    gains: &'a GainTable,
    htree: RefinementTree,
    memo: HashMap<(usize, usize, usize), Rational>,
}

impl TildeMap<'_> {
    fn value(&mut self, k: usize, b: usize, c: usize) -> Rational {
        if let Some(v) = self.memo.get(&(k, b, c)) {
            return v.clone();
        }
        let space = self.space;
        let ps = space.product().expect("checked by caller");
        let last = space.horizon_index();
        // one representative atom of b ^ D for every H_N block D inside c
        let node = &self.htree.levels[k][c];
        let mut reps: Vec<(usize, Rational)> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for &w in &node.atoms {
            let d = space.h_block_of(last, w);
            if seen.insert(d) {
                let rep = ps.h[last][d]
                    .iter()
                    .copied()
                    .find(|u| space.g_block_of(*u) == b)
                    .expect("independence puts mass on every rectangle");
                reps.push((rep, space.prob_of(ps.h[last][d].iter().copied())));
            }
        }
        let pc = space.prob_of(node.atoms.iter().copied());
        let gains = self.gains;
        let gain_from = |w: usize, t: usize| -> Rational {
            (k..t).fold(gains.terminal[t][w].clone(), |acc, j| {
                acc + &gains.running[j][w]
            })
        };
        let mut best: Option<Rational> = None;
        let mut tau = vec![0; space.n_atoms()];
        visit_from(
            &self.htree,
            &[(k, c)],
            &|level, _| level >= k,
            &mut tau,
            &mut |tau| {
                let e = reps.iter().fold(Rational::zero(), |acc, (w, pd)| {
                    acc + pd.clone() * gain_from(*w, tau[*w])
                });
                if best.as_ref().is_none_or(|v| e > *v) {
                    best = Some(e);
                }
            },
        );
        let v = best.expect("at least one stopping time") / pc;
        self.memo.insert((k, b, c), v.clone());
        v
    }
}

pub fn verify_key_equality(
    space: &FiniteFilteredSpace,
    theta: &StoppingTimeTable,
    gains: &GainTable,
) -> Result<KeyEquality, EnumerationError> {
    let ps = space.product().ok_or(EnumerationError::MissingProduct)?;
    let esssup = value_brute_force(space, gains, theta, false)?;
    let mut map = TildeMap {
        space,
        gains,
        htree: RefinementTree::new(space.n_atoms(), &ps.h),
        memo: HashMap::new(),
    };
    let mut tilde_side = Vec::with_capacity(esssup.atoms.len());
    let mut max_gap = Rational::zero();
    for (a, rhs) in esssup.atoms.iter().zip(&esssup.values) {
        let w = a.atoms[0];
        let k = a.time;
        let past = (0..k).fold(Rational::zero(), |acc, j| acc + &gains.running[j][w]);
        let lhs = past + map.value(k, space.g_block_of(w), space.h_block_of(k, w));
        let gap = (lhs.clone() - rhs).abs();
        if gap > max_gap {
            max_gap = gap;
        }
        tilde_side.push(lhs);
    }
    Ok(KeyEquality {
        max_gap,
        tilde_side,
        esssup,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallestOptimal {
    pub optimal_set: Vec<StoppingTimeTable>,
    pub tau_hat: StoppingTimeTable,
    pub max_value: Rational,
    pub tau_hat_value: Rational,
    pub is_smallest: bool,
}

/// Snell envelope by exact backward induction on the refinement tree.
pub fn snell_on_space(space: &FiniteFilteredSpace, gains: &GainTable) -> Vec<Vec<Rational>> {
    let tree = RefinementTree::new(space.n_atoms(), space.filtration());
    let last = tree.levels.len() - 1;
    let mut u: Vec<Vec<Rational>> = vec![Vec::new(); last + 1];
    for k in (0..=last).rev() {
        u[k] = tree.levels[k]
            .iter()
            .map(|node| {
                let w = node.atoms[0];
                let stop = gains.terminal[k][w].clone();
                if k == last {
                    return stop;
                }
                let p = space.prob_of(node.atoms.iter().copied());
                let cont = node
                    .children
                    .iter()
                    .fold(gains.running[k][w].clone(), |acc, c| {
                        let child = &tree.levels[k + 1][*c];
                        acc + space.prob_of(child.atoms.iter().copied()) / &p * &u[k + 1][*c]
                    });
                if cont > stop {
                    cont
                } else {
                    stop
                }
            })
            .collect();
    }
    u
}

/// Expected realized gain of `tau`.
pub fn expected_gain(space: &FiniteFilteredSpace, gains: &GainTable, tau: &[usize]) -> Rational {
    let z = gains.realized();
    (0..space.n_atoms()).fold(Rational::zero(), |acc, w| {
        acc + z[tau[w]][w].clone() * &space.probs()[w]
    })
}

pub fn verify_smallest_optimal(
    space: &FiniteFilteredSpace,
    gains: &GainTable,
) -> Result<SmallestOptimal, EnumerationError> {
    gains.check(space)?;
    let u = snell_on_space(space, gains);
    let n = space.n_atoms();
    let last = space.horizon_index();
    // first time the envelope meets the immediate gain
    let tau_hat = StoppingTimeTable {
        stop_time: (0..n)
            .map(|w| {
                (0..=last)
                    .find(|&k| u[k][space.block_of(k, w)] == gains.terminal[k][w])
                    .unwrap_or(last)
            })
            .collect(),
    };
    tau_hat.check_adapted(space)?;
    let weights = Weights::new(space, &gains.realized());
    let mut best_sum: Option<Rational> = None;
    let mut optimal: Vec<StoppingTimeTable> = Vec::new();
    let score = |tau: &[usize]| -> Rational {
        match &weights {
            Weights::Int { w, scale } => {
                let s: i128 = (0..n).map(|x| w[x][tau[x]]).sum();
                Rational::new(BigInt::from(s), scale.clone())
            }
            Weights::Big { w } => (0..n).fold(Rational::zero(), |acc, x| acc + &w[x][tau[x]]),
        }
    };
    super::stopping::for_each_stopping_time(space, None, DEFAULT_CAP, |tau| {
        let s = score(tau);
        match &best_sum {
            Some(b) if s < *b => {}
            Some(b) if s == *b => optimal.push(StoppingTimeTable {
                stop_time: tau.to_vec(),
            }),
            _ => {
                best_sum = Some(s);
                optimal.clear();
                optimal.push(StoppingTimeTable {
                    stop_time: tau.to_vec(),
                });
            }
        }
    })?;
    let max_value = best_sum.expect("at least one stopping time");
    let tau_hat_value = expected_gain(space, gains, &tau_hat.stop_time);
    let is_smallest = tau_hat_value == max_value
        && optimal.iter().all(|t| {
            tau_hat
                .stop_time
                .iter()
                .zip(&t.stop_time)
                .all(|(a, b)| a <= b)
        });
    debug_assert!(
        max_value
            == u[0]
                .iter()
                .zip(space.filtration()[0].iter())
                .fold(Rational::zero(), |acc, (v, b)| acc
                    + v.clone() * space.prob_of(b.iter().copied()))
    );
    Ok(SmallestOptimal {
        optimal_set: optimal,
        tau_hat,
        max_value,
        tau_hat_value,
        is_smallest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enumeration::space::ProductStructure;
    use crate::scalar::{int, ratio};

    fn product_2x2() -> FiniteFilteredSpace {
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

    fn gains(space: &FiniteFilteredSpace, seed: i64) -> GainTable {
        // deterministic pseudo-random rationals, constant on F_k blocks
        let mut x = seed;
        let mut next = || {
            x = (x * 1103515245 + 12345) % 2147483648;
            ratio(x % 11 - 3, 1 + x % 4)
        };
        let mut table = |_: usize| -> Vec<Vec<Rational>> {
            space
                .filtration()
                .iter()
                .map(|part| {
                    let mut row = vec![int(0); space.n_atoms()];
                    for b in part {
                        let v = next();
                        for &w in b {
                            row[w] = v.clone();
                        }
                    }
                    row
                })
                .collect()
        };
        GainTable {
            running: table(0),
            terminal: table(1),
        }
    }

    #[test]
    fn theta_atoms_follow_level_sets() {
        let s = product_2x2();
        let theta = StoppingTimeTable {
            stop_time: vec![1, 1, 2, 2, 0, 0, 0, 0],
        };
        let atoms = theta_atoms(&s, &theta).unwrap();
        let expect = vec![
            ThetaAtom {
                time: 0,
                atoms: vec![4, 5, 6, 7],
            },
            ThetaAtom {
                time: 1,
                atoms: vec![0, 1],
            },
            ThetaAtom {
                time: 2,
                atoms: vec![2],
            },
            ThetaAtom {
                time: 2,
                atoms: vec![3],
            },
        ];
        assert_eq!(atoms, expect);
    }

    #[test]
    fn trivial_value_cases() {
        let s = product_2x2();
        let c = GainTable {
            running: vec![vec![int(0); 8]; 3],
            terminal: vec![vec![ratio(7, 3); 8]; 3],
        };
        let v = value_brute_force(&s, &c, &StoppingTimeTable::constant(&s, 0), false).unwrap();
        assert!(v.values.iter().all(|x| *x == ratio(7, 3)));
        let g = gains(&s, 5);
        let v = value_brute_force(&s, &g, &StoppingTimeTable::constant(&s, 2), false).unwrap();
        let z = g.realized();
        for (a, x) in v.atoms.iter().zip(&v.values) {
            assert_eq!(*x, z[2][a.atoms[0]]);
        }
    }

    #[test]
    fn key_equality_on_product_space() {
        let s = product_2x2();
        for seed in 1..20 {
            let g = gains(&s, seed);
            for theta in [
                StoppingTimeTable::constant(&s, 0),
                StoppingTimeTable {
                    stop_time: vec![1, 1, 2, 2, 0, 0, 0, 0],
                },
                StoppingTimeTable {
                    stop_time: vec![2, 2, 1, 1, 1, 1, 2, 2],
                },
            ] {
                let r = verify_key_equality(&s, &theta, &g).unwrap();
                assert!(r.max_gap.is_zero(), "seed {seed}");
                let h = value_brute_force(&s, &g, &theta, true).unwrap();
                assert_eq!(h, r.esssup);
            }
        }
    }

    #[test]
    fn key_equality_needs_product() {
        let s = product_2x2().without_product();
        let g = gains(&s, 1);
        assert_eq!(
            verify_key_equality(&s, &StoppingTimeTable::constant(&s, 0), &g).unwrap_err(),
            EnumerationError::MissingProduct
        );
    }

    #[test]
    fn smallest_optimal_trivial_cases() {
        let s = product_2x2();
        let c = GainTable {
            running: vec![vec![int(0); 8]; 3],
            terminal: vec![vec![int(1); 8]; 3],
        };
        let r = verify_smallest_optimal(&s, &c).unwrap();
        assert!(r.is_smallest);
        assert_eq!(r.tau_hat, StoppingTimeTable::constant(&s, 0));
        assert_eq!(
            r.optimal_set.len() as u128,
            crate::enumeration::count_stopping_times(&s)
        );
        // running gain 1 per step, nothing at stopping: go to the end
        let inc = GainTable {
            running: vec![vec![int(1); 8]; 3],
            terminal: vec![vec![int(0); 8]; 3],
        };
        let r = verify_smallest_optimal(&s, &inc).unwrap();
        assert_eq!(r.optimal_set, vec![StoppingTimeTable::constant(&s, 2)]);
        assert_eq!(r.tau_hat, StoppingTimeTable::constant(&s, 2));
        for seed in 1..30 {
            assert!(
                verify_smallest_optimal(&s, &gains(&s, seed))
                    .unwrap()
                    .is_smallest
            );
        }
    }
}
