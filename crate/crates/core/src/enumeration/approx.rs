//! The constructive decomposition of an `F`-stopping time into `H`-stopping
//! times switched by a `G`-measurable partition. On a finite space the
//! approximating sequence is stationary, so one stage reproduces `tau`.

use fixedbitset::FixedBitSet;
use serde::Serialize;

use super::space::{FiniteFilteredSpace, StoppingTimeTable};
use super::EnumerationError;

/// Rectangle `B ^ C` with `B` in `sigma(G)` and `C` in `H_time`, stored as
/// atom sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rect {
    pub b: FixedBitSet,
    pub c: FixedBitSet,
}

impl Rect {
    pub fn set(&self) -> FixedBitSet {
        let mut s = self.b.clone();
        s.intersect_with(&self.c);
        s
    }
    pub fn is_empty(&self) -> bool {
        self.b.is_disjoint(&self.c)
    }
}

fn union_of(rects: &[Rect], n: usize) -> FixedBitSet {
    let mut u = FixedBitSet::with_capacity(n);
    for r in rects {
        u.union_with(&r.set());
    }
    u
}

fn minus(a: &FixedBitSet, b: &FixedBitSet) -> FixedBitSet {
    let mut s = a.clone();
    s.difference_with(b);
    s
}

fn inter(a: &FixedBitSet, b: &FixedBitSet) -> FixedBitSet {
    let mut s = a.clone();
    s.intersect_with(b);
    s
}

/// `(B ^ C) \ (B' ^ C') = ((B \ B') ^ C) u ((B ^ B') ^ (C \ C'))`.
fn rect_minus(r: &Rect, s: &Rect) -> Vec<Rect> {
    [
        Rect {
            b: minus(&r.b, &s.b),
            c: r.c.clone(),
        },
        Rect {
            b: inter(&r.b, &s.b),
            c: minus(&r.c, &s.c),
        },
    ]
    .into_iter()
    .filter(|x| !x.is_empty())
    .collect()
}

/// Unions rectangles sharing the same `C`.
fn merge(rects: Vec<Rect>) -> Vec<Rect> {
    let mut out: Vec<Rect> = Vec::new();
    for r in rects {
        match out.iter_mut().find(|o| o.c == r.c) {
            Some(o) => o.b.union_with(&r.b),
            None => out.push(r),
        }
    }
    out
}

fn set_minus_rects(a: &[Rect], sub: &[Rect]) -> Vec<Rect> {
    let mut cur = a.to_vec();
    for s in sub {
        cur = cur.iter().flat_map(|r| rect_minus(r, s)).collect();
    }
    merge(cur)
}

/// Rectangles of one time after the sign-pattern refinement: the `G` parts
/// are pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignRefinement {
    /// Realized patterns `sigma` (one bit per input rectangle, never all zero).
    pub patterns: Vec<Vec<bool>>,
    /// `B^sigma = intersection of B_i or its complement` and
    /// `C^sigma = union of C_i with sigma(i) = 1`.
    pub rects: Vec<Rect>,
}

/// Rewrites a union of rectangles as a union with pairwise-disjoint `G`
/// parts. Only patterns whose `B^sigma` is non-empty are listed; the others
/// contribute the empty set.
pub fn disjointify_rectangles(
    space: &FiniteFilteredSpace,
    rects: &[Rect],
) -> Result<SignRefinement, EnumerationError> {
    let ps = space.product().ok_or(EnumerationError::MissingProduct)?;
    let n = space.n_atoms();
    let mut patterns: Vec<Vec<bool>> = Vec::new();
    for block in &ps.g {
        let w = block[0];
        let sigma: Vec<bool> = rects.iter().map(|r| r.b.contains(w)).collect();
        if sigma.iter().any(|s| *s) && !patterns.contains(&sigma) {
            patterns.push(sigma);
        }
    }
    let mut full = FixedBitSet::with_capacity(n);
    full.insert_range(..);
    let out = patterns
        .iter()
        .map(|sigma| {
            let mut b = full.clone();
            let mut c = FixedBitSet::with_capacity(n);
            for (r, s) in rects.iter().zip(sigma) {
                if *s {
                    b.intersect_with(&r.b);
                    c.union_with(&r.c);
                } else {
                    b.difference_with(&r.b);
                }
            }
            Rect { b, c }
        })
        .collect();
    Ok(SignRefinement {
        patterns,
        rects: out,
    })
}

/// One `G` cell of the decomposition with its `H`-stopping time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    /// The pattern over the single rectangles of the split step.
    pub sigma: Vec<bool>,
    pub b_hat: FixedBitSet,
    /// `C^sigma_j`, one set per single rectangle `j`; they partition the space.
    pub c_hat: Vec<FixedBitSet>,
    pub tau: StoppingTimeTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproximationTrace {
    /// Distinct values of `tau`, increasing.
    pub times: Vec<usize>,
    /// Rectangles of each level set `{tau = t_j}`.
    pub step1: Vec<Vec<Rect>>,
    /// After removing earlier level sets; the last entry is the leftover
    /// complement, empty when the level sets cover the space.
    pub step2: Vec<Vec<Rect>>,
    /// Sign-pattern refinement of each disjointified level set.
    pub step3: Vec<SignRefinement>,
    /// Single rectangles `(time, rectangle)` with non-decreasing times.
    pub singles: Vec<(usize, Rect)>,
    /// Membership of each cell pattern in `Sigma_j`, i.e. `sigma(j) = 1`.
    pub cells: Vec<Cell>,
    /// `tau` rebuilt as `sum tau^sigma 1_{B^sigma}`.
    pub reconstructed: StoppingTimeTable,
}

impl ApproximationTrace {
    /// The stage's `G`-partition and components, `(G_i, tau_i)`.
    pub fn components(&self) -> impl Iterator<Item = (&FixedBitSet, &StoppingTimeTable)> {
        self.cells.iter().map(|c| (&c.b_hat, &c.tau))
    }
}

fn g_measurable(space: &FiniteFilteredSpace, s: &FixedBitSet) -> bool {
    let ps = space.product().expect("checked");
    ps.g.iter()
        .all(|b| b.iter().all(|w| s.contains(*w) == s.contains(b[0])))
}

fn h_measurable(space: &FiniteFilteredSpace, k: usize, s: &FixedBitSet) -> bool {
    let ps = space.product().expect("checked");
    ps.h[k]
        .iter()
        .all(|b| b.iter().all(|w| s.contains(*w) == s.contains(b[0])))
}

pub fn approximate_stopping_time(
    space: &FiniteFilteredSpace,
    tau: &StoppingTimeTable,
) -> Result<ApproximationTrace, EnumerationError> {
    let ps = space.product().ok_or(EnumerationError::MissingProduct)?;
    tau.check_adapted(space)?;
    let n = space.n_atoms();
    let mut times: Vec<usize> = tau.stop_time.clone();
    times.sort_unstable();
    times.dedup();

    // Step 1: each level set as a union of rectangles, one per H block
    let mut step1 = Vec::with_capacity(times.len());
    for &t in &times {
        let level: Vec<bool> = tau.stop_time.iter().map(|s| *s == t).collect();
        let mut rects = Vec::new();
        for c_block in &ps.h[t] {
            let mut c = FixedBitSet::with_capacity(n);
            c.extend(c_block.iter().copied());
            let mut b = FixedBitSet::with_capacity(n);
            for g_block in &ps.g {
                let meet: Vec<usize> = g_block.iter().copied().filter(|w| c.contains(*w)).collect();
                if !meet.is_empty() && meet.iter().all(|w| level[*w]) {
                    b.extend(g_block.iter().copied());
                }
            }
            if !b.is_clear() {
                rects.push(Rect { b, c });
            }
        }
        let mut cover = union_of(&rects, n);
        let mut want = FixedBitSet::with_capacity(n);
        want.extend((0..n).filter(|w| level[*w]));
        cover.symmetric_difference_with(&want);
        if !cover.is_clear() {
            return Err(EnumerationError::Invalid(format!(
                "level set {{tau = {t}}} is not a union of G x H_{t} rectangles"
            )));
        }
        step1.push(rects);
    }

    // Step 2: remove earlier level sets, then the leftover complement
    let mut step2: Vec<Vec<Rect>> = Vec::with_capacity(times.len() + 1);
    for j in 0..step1.len() {
        let earlier: Vec<Rect> = step1[..j].iter().flatten().cloned().collect();
        step2.push(set_minus_rects(&step1[j], &earlier));
    }
    let mut full = FixedBitSet::with_capacity(n);
    full.insert_range(..);
    let everything = vec![Rect {
        b: full.clone(),
        c: full.clone(),
    }];
    let all: Vec<Rect> = step1.iter().flatten().cloned().collect();
    let leftover = set_minus_rects(&everything, &all);
    if !union_of(&leftover, n).is_clear() {
        return Err(EnumerationError::Invalid(
            "level sets do not cover the space".into(),
        ));
    }
    step2.push(leftover);

    // Step 3: disjoint G parts within each level set
    let mut step3 = Vec::with_capacity(times.len());
    for rects in &step2[..times.len()] {
        step3.push(disjointify_rectangles(space, rects)?);
    }

    // Split into single rectangles with non-decreasing times
    let singles: Vec<(usize, Rect)> = times
        .iter()
        .zip(&step3)
        .flat_map(|(t, r)| {
            r.rects
                .iter()
                .filter(|x| !x.is_empty())
                .map(move |x| (*t, x.clone()))
        })
        .collect();
    let m = singles.len();

    // Step 4: patterns over the singles, realized ones only
    let mut cells: Vec<Cell> = Vec::new();
    for g_block in &ps.g {
        let w = g_block[0];
        let sigma: Vec<bool> = singles.iter().map(|(_, r)| r.b.contains(w)).collect();
        if cells.iter().any(|c| c.sigma == sigma) {
            continue;
        }
        let mut b_hat = full.clone();
        for ((_, r), s) in singles.iter().zip(&sigma) {
            if *s {
                b_hat.intersect_with(&r.b);
            } else {
                b_hat.difference_with(&r.b);
            }
        }
        let mut c_hat = Vec::with_capacity(m);
        let mut taken = FixedBitSet::with_capacity(n);
        for (j, ((_, r), s)) in singles.iter().zip(&sigma).enumerate() {
            let cj = if j + 1 == m {
                minus(&full, &taken)
            } else if *s {
                minus(&r.c, &taken)
            } else {
                FixedBitSet::with_capacity(n)
            };
            if *s {
                taken.union_with(&r.c);
            }
            c_hat.push(cj);
        }
        let mut stop = vec![usize::MAX; n];
        for ((t, _), cj) in singles.iter().zip(&c_hat) {
            for x in cj.ones() {
                stop[x] = *t;
            }
        }
        cells.push(Cell {
            sigma,
            b_hat,
            c_hat,
            tau: StoppingTimeTable { stop_time: stop },
        });
    }

    // checks: C^sigma partitions, tau^sigma is H-adapted, B^sigma partition
    let mut cover = FixedBitSet::with_capacity(n);
    for cell in &cells {
        let mut seen = FixedBitSet::with_capacity(n);
        for (j, cj) in cell.c_hat.iter().enumerate() {
            if !seen.is_disjoint(cj) {
                return Err(EnumerationError::Construction(
                    "C^sigma sets overlap".into(),
                ));
            }
            if !h_measurable(space, singles[j].0, cj) {
                return Err(EnumerationError::Construction(format!(
                    "C^sigma_{j} is not H-measurable"
                )));
            }
            seen.union_with(cj);
        }
        if seen != full {
            return Err(EnumerationError::Construction(
                "C^sigma sets do not cover the space".into(),
            ));
        }
        cell.tau
            .check_h_adapted(space)
            .map_err(|e| EnumerationError::Construction(format!("component not H-adapted: {e}")))?;
        if !cover.is_disjoint(&cell.b_hat) || !g_measurable(space, &cell.b_hat) {
            return Err(EnumerationError::Construction(
                "B^sigma cells are not a G partition".into(),
            ));
        }
        cover.union_with(&cell.b_hat);
    }
    if cover != full {
        return Err(EnumerationError::Construction(
            "B^sigma cells do not cover the space".into(),
        ));
    }
    let mut rebuilt = vec![0; n];
    for cell in &cells {
        for w in cell.b_hat.ones() {
            rebuilt[w] = cell.tau.stop_time[w];
        }
    }
    let reconstructed = StoppingTimeTable { stop_time: rebuilt };
    if reconstructed != *tau {
        return Err(EnumerationError::Construction(
            "reconstruction differs from tau".into(),
        ));
    }
    Ok(ApproximationTrace {
        times,
        step1,
        step2,
        step3,
        singles,
        cells,
        reconstructed,
    })
}

/// JSON view of a trace: sets as sorted atom lists.
#[derive(Debug, Serialize)]
pub struct TraceSummary {
    pub times: Vec<usize>,
    pub cells: Vec<CellSummary>,
    pub reconstructed: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct CellSummary {
    pub sigma: Vec<u8>,
    pub g_cell: Vec<usize>,
    pub stop_time: Vec<usize>,
}

impl From<&ApproximationTrace> for TraceSummary {
    fn from(t: &ApproximationTrace) -> Self {
        TraceSummary {
            times: t.times.clone(),
            cells: t
                .cells
                .iter()
                .map(|c| CellSummary {
                    sigma: c.sigma.iter().map(|s| *s as u8).collect(),
                    g_cell: c.b_hat.ones().collect(),
                    stop_time: c.tau.stop_time.clone(),
                })
                .collect(),
            reconstructed: t.reconstructed.stop_time.clone(),
        }
    }
}
