use super::space::{FiniteFilteredSpace, RefinementTree, StoppingTimeTable};
use super::EnumerationError;

/// Default cap on the number of materialized stopping times.
pub const DEFAULT_CAP: u128 = 1_000_000;

/// Number of stopping times of the subtree at `(level, node)` that may stop
/// at a node only where `can_stop` allows: `[can_stop] + prod children`.
pub(crate) fn count_from(
    tree: &RefinementTree,
    level: usize,
    node: usize,
    can_stop: &dyn Fn(usize, usize) -> bool,
) -> u128 {
    let last = tree.levels.len() - 1;
    let here = can_stop(level, node) as u128;
    if level == last {
        return here;
    }
    let kids = tree.levels[level][node]
        .children
        .iter()
        .fold(1u128, |acc, c| {
            acc.saturating_mul(count_from(tree, level + 1, *c, can_stop))
        });
    here.saturating_add(kids)
}

/// Calls `visit` once per stopping time of the forest rooted at `roots`
/// (nodes of level `level`). Stopping at a node sets `tau` on all of its
/// atoms; atoms outside the forest are left untouched.
pub(crate) fn visit_from(
    tree: &RefinementTree,
    roots: &[(usize, usize)],
    can_stop: &dyn Fn(usize, usize) -> bool,
    tau: &mut [usize],
    visit: &mut dyn FnMut(&[usize]),
) {
    let mut pending: Vec<(usize, usize)> = roots.to_vec();
    rec(tree, &mut pending, can_stop, tau, visit);
}

fn rec(
    tree: &RefinementTree,
    pending: &mut Vec<(usize, usize)>,
    can_stop: &dyn Fn(usize, usize) -> bool,
    tau: &mut [usize],
    visit: &mut dyn FnMut(&[usize]),
) {
    let Some((k, i)) = pending.pop() else {
        visit(tau);
        return;
    };
    let node = &tree.levels[k][i];
    if can_stop(k, i) {
        for &w in &node.atoms {
            tau[w] = k;
        }
        rec(tree, pending, can_stop, tau, visit);
    }
    if k + 1 < tree.levels.len() {
        let len = pending.len();
        pending.extend(node.children.iter().map(|c| (k + 1, *c)));
        rec(tree, pending, can_stop, tau, visit);
        pending.truncate(len);
    }
    pending.push((k, i));
}

fn roots(tree: &RefinementTree) -> Vec<(usize, usize)> {
    (0..tree.levels[0].len()).map(|i| (0, i)).collect()
}

/// Total number of `F`-stopping times, by the product recursion.
pub fn count_stopping_times(space: &FiniteFilteredSpace) -> u128 {
    let tree = RefinementTree::new(space.n_atoms(), space.filtration());
    roots(&tree).iter().fold(1u128, |acc, (k, i)| {
        acc.saturating_mul(count_from(&tree, *k, *i, &|_, _| true))
    })
}

/// Every `F`-stopping time, in a fixed order.
pub fn enumerate_stopping_times(
    space: &FiniteFilteredSpace,
    cap: u128,
) -> Result<Vec<StoppingTimeTable>, EnumerationError> {
    let count = count_stopping_times(space);
    if count > cap {
        return Err(EnumerationError::CapExceeded { count, cap });
    }
    let tree = RefinementTree::new(space.n_atoms(), space.filtration());
    let mut out = Vec::with_capacity(count as usize);
    let mut tau = vec![0; space.n_atoms()];
    visit_from(&tree, &roots(&tree), &|_, _| true, &mut tau, &mut |t| {
        out.push(StoppingTimeTable {
            stop_time: t.to_vec(),
        })
    });
    Ok(out)
}

/// Streams every `F`-stopping time `tau >= theta` (all of them when `theta`
/// is `None`) without materializing the list. Returns the count.
pub fn for_each_stopping_time(
    space: &FiniteFilteredSpace,
    theta: Option<&StoppingTimeTable>,
    cap: u128,
    mut visit: impl FnMut(&[usize]),
) -> Result<u128, EnumerationError> {
    if let Some(th) = theta {
        th.check_adapted(space)?;
    }
    let tree = RefinementTree::new(space.n_atoms(), space.filtration());
    // theta is adapted, so it is either <= k on a whole F_k block or > k on it
    let can_stop =
        |k: usize, i: usize| theta.is_none_or(|th| th.stop_time[tree.levels[k][i].atoms[0]] <= k);
    let count = roots(&tree).iter().fold(1u128, |acc, (k, i)| {
        acc.saturating_mul(count_from(&tree, *k, *i, &can_stop))
    });
    if count > cap {
        return Err(EnumerationError::CapExceeded { count, cap });
    }
    let mut tau = vec![0; space.n_atoms()];
    visit_from(&tree, &roots(&tree), &can_stop, &mut tau, &mut visit);
    Ok(count)
}
