//! Cut conductance of the tree chain at small depth.
//!
//! For a set `A` of vertices, `Q(A, Aᶜ) = Σ_{u∈A, w∉A} π(u)T(u,w)` and the
//! `s`-conductance of `A` is `Q(A, Aᶜ) / min(π(A) − s, π(Aᶜ) − s)` over
//! `π(A) ∈ (s, 1 − s)`. A union of complete subtrees `A = Desc⁰(S)` rooted at
//! an antichain `S` only leaks through the edges from `S` to its parents.

use serde::Serialize;

use crate::disorder::VertexId;
use crate::error::{CremError, Result};

use super::TransitionMatrixView;

/// Largest depth for exhaustive cuts and for the antichain enumeration.
pub const EXHAUSTIVE_MAX_DEPTH: usize = 4;
const SCAN_MAX_DEPTH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cut {
    pub value: f64,
    /// Subtree roots for subtree unions, members for arbitrary cuts.
    pub vertices: Vec<VertexId>,
    /// `π(A)`.
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubtreeScan {
    pub s: f64,
    /// `min (1/3) π(S) / (π(A) − s)` over subtree unions with `π(A) > s`.
    pub lemma_bound: Cut,
    /// Minimum `s`-conductance over subtree unions; computed up to depth 4.
    pub conductance: Option<Cut>,
}

fn check_s(s: f64) -> Result<()> {
    if !(0.0..0.5).contains(&s) {
        return Err(CremError::NoFeasibleSet { s });
    }
    Ok(())
}

/// Stationary mass of every complete subtree, breadth first.
fn subtree_mass(view: &TransitionMatrixView) -> Vec<f64> {
    let mut mass = view.pi().to_vec();
    for i in (1..mass.len()).rev() {
        mass[(i - 1) / 2] += mass[i];
    }
    mass
}

/// `π(v)T(v, parent)`, zero at the root.
fn leak(view: &TransitionMatrixView, i: usize) -> f64 {
    if i == 0 {
        0.0
    } else {
        view.pi()[i] * view.up[i]
    }
}

#[derive(Clone, Copy)]
enum Back {
    Empty,
    Whole,
    Pair(usize, usize),
}

#[derive(Clone, Copy)]
struct Point {
    /// Objective numerator: `π(S)` or `Q`.
    cost: f64,
    mass: f64,
    back: Back,
}

/// Per-vertex lists of antichains in the subtree, combined bottom up.
struct Families {
    lists: Vec<Vec<Point>>,
}

impl Families {
    fn build(size: usize, leaves: usize, cost: impl Fn(usize) -> f64, mass: &[f64]) -> Self {
        let mut lists: Vec<Vec<Point>> = vec![Vec::new(); size];
        for i in (0..size).rev() {
            let mut pts = vec![Point { cost: 0.0, mass: 0.0, back: Back::Empty }];
            if i < leaves {
                let (l, r) = (&lists[2 * i + 1], &lists[2 * i + 2]);
                for (a, pa) in l.iter().enumerate() {
                    for (b, pb) in r.iter().enumerate() {
                        if matches!((pa.back, pb.back), (Back::Empty, Back::Empty)) {
                            continue;
                        }
                        pts.push(Point { cost: pa.cost + pb.cost, mass: pa.mass + pb.mass, back: Back::Pair(a, b) });
                    }
                }
            }
            pts.push(Point { cost: cost(i), mass: mass[i], back: Back::Whole });
            lists[i] = pts;
        }
        Self { lists }
    }

    fn roots(&self, i: usize, k: usize, out: &mut Vec<VertexId>) {
        match self.lists[i][k].back {
            Back::Empty => {}
            Back::Whole => out.push(VertexId::from_bfs_index(i)),
            Back::Pair(a, b) => {
                self.roots(2 * i + 1, a, out);
                self.roots(2 * i + 2, b, out);
            }
        }
    }
}

/// `min π(S)/(π(A) − s)` over antichains `S` with `A = Desc⁰(S)`, by
/// Dinkelbach iterations on `min π(S) − λ(π(A) − s)`, each a tree recursion.
fn lemma_ratio(view: &TransitionMatrixView, s: f64, mass: &[f64]) -> Cut {
    let pi = view.pi();
    let size = view.size();
    let leaves = (1usize << view.depth()) - 1;
    let mut lambda = pi[0] / (1.0 - s);
    let mut best = Cut { value: lambda, vertices: vec![VertexId::ROOT], mass: 1.0 };
    let mut f = vec![0.0; size];
    let mut whole = vec![false; size];
    for _ in 0..200 {
        for i in (0..size).rev() {
            let below = if i < leaves { f[2 * i + 1] + f[2 * i + 2] } else { 0.0 };
            let here = pi[i] - lambda * mass[i];
            whole[i] = here < below;
            f[i] = if whole[i] { here } else { below };
        }
        if f[0] + lambda * s >= 0.0 {
            break;
        }
        let mut roots = Vec::new();
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if whole[i] {
                roots.push(i);
            } else if i < leaves {
                stack.extend([2 * i + 2, 2 * i + 1]);
            }
        }
        let cost: f64 = roots.iter().map(|&i| pi[i]).sum();
        let m: f64 = roots.iter().map(|&i| mass[i]).sum();
        let ratio = cost / (m - s);
        if ratio >= lambda {
            break;
        }
        lambda = ratio;
        best = Cut { value: ratio, vertices: roots.into_iter().map(VertexId::from_bfs_index).collect(), mass: m };
    }
    best.value /= 3.0;
    best
}

/// Scans unions of complete subtrees. Returns the lemma-form lower bound
/// `min (1/3) π(S)/(π(A) − s)` (depth ≤ 8) and, up to depth 4, the minimum
/// `s`-conductance over the same family.
pub fn subtree_conductance_scan(view: &TransitionMatrixView, s: f64) -> Result<SubtreeScan> {
    check_s(s)?;
    let depth = view.depth();
    if depth > SCAN_MAX_DEPTH {
        return Err(CremError::EnumerationCap { depth, cap: SCAN_MAX_DEPTH });
    }
    let size = view.size();
    let leaves = (1usize << depth) - 1;
    let mass = subtree_mass(view);

    let lemma_bound = lemma_ratio(view, s, &mass);

    let conductance = if depth <= EXHAUSTIVE_MAX_DEPTH {
        let fam = Families::build(size, leaves, |i| leak(view, i), &mass);
        // the whole tree has no complement
        fam.lists[0]
            .iter()
            .enumerate()
            .filter(|(_, p)| !matches!(p.back, Back::Whole) && p.mass > s && 1.0 - p.mass > s)
            .map(|(k, p)| (k, p.cost / (p.mass - s).min(1.0 - p.mass - s)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, value)| {
                let mut roots = Vec::new();
                fam.roots(0, k, &mut roots);
                Cut { value, vertices: roots, mass: fam.lists[0][k].mass }
            })
    } else {
        None
    };
    Ok(SubtreeScan { s, lemma_bound, conductance })
}

/// All subsets of one child subtree of the root: `(Q, π(A), mask)` where
/// `Q` counts the edges cut inside the subtree plus the edge to the root.
fn side_subsets(view: &TransitionMatrixView, child: usize) -> (Vec<usize>, Vec<(f64, f64, u32)>) {
    let mut members = vec![child];
    let mut k = 0;
    while k < members.len() {
        let i = members[k];
        if 2 * i + 1 < view.size() {
            members.push(2 * i + 1);
            members.push(2 * i + 2);
        }
        k += 1;
    }
    let pos = |i: usize| members.iter().position(|&m| m == i);
    // (member position, parent position or None for the root edge, flow)
    let edges: Vec<(usize, Option<usize>, f64)> =
        members.iter().enumerate().map(|(a, &i)| (a, pos((i - 1) / 2), leak(view, i))).collect();
    let pi = view.pi();
    let subsets = (0..1u32 << members.len())
        .map(|mask| {
            let inside = |a: usize| mask >> a & 1 == 1;
            let mut q = 0.0;
            for &(a, p, flow) in &edges {
                q += match p {
                    None if inside(a) => flow,
                    Some(p) if inside(a) != inside(p) => flow,
                    _ => 0.0,
                };
            }
            let m: f64 = members.iter().enumerate().filter(|(a, _)| inside(*a)).map(|(_, &i)| pi[i]).sum();
            (q, m, mask)
        })
        .collect();
    (members, subsets)
}

/// Range minimum over a fixed array.
struct SparseMin {
    table: Vec<Vec<usize>>,
    values: Vec<f64>,
}

impl SparseMin {
    fn new(values: Vec<f64>) -> Self {
        let mut table = vec![(0..values.len()).collect::<Vec<_>>()];
        let mut width = 1;
        while 2 * width <= values.len() {
            let prev = table.last().expect("non-empty");
            let row = (0..=values.len() - 2 * width)
                .map(|i| {
                    let (a, b) = (prev[i], prev[i + width]);
                    if values[b] < values[a] {
                        b
                    } else {
                        a
                    }
                })
                .collect();
            table.push(row);
            width *= 2;
        }
        Self { table, values }
    }

    /// Index of the minimum on `lo..hi` (non-empty).
    fn argmin(&self, lo: usize, hi: usize) -> usize {
        let level = (usize::BITS - 1 - (hi - lo).leading_zeros()) as usize;
        let (a, b) = (self.table[level][lo], self.table[level][hi - (1 << level)]);
        if self.values[b] < self.values[a] {
            b
        } else {
            a
        }
    }
}

/// Exact minimum `s`-conductance over all vertex subsets (depth ≤ 4).
///
/// By reversibility `A` and `Aᶜ` have the same value, so `A` may be taken to
/// avoid the root; it then splits into independent subsets of the two child
/// subtrees. Each side of the ratio (`π(A) ≤ ½` and `π(A) ≥ ½`) is minimized
/// by Dinkelbach iterations with range-minimum queries over one side.
pub fn exhaustive_conductance(view: &TransitionMatrixView, s: f64) -> Result<Cut> {
    check_s(s)?;
    let depth = view.depth();
    if depth > EXHAUSTIVE_MAX_DEPTH {
        return Err(CremError::EnumerationCap { depth, cap: EXHAUSTIVE_MAX_DEPTH });
    }
    if depth == 0 {
        return Err(CremError::NoFeasibleSet { s });
    }
    let (left_members, left) = side_subsets(view, 1);
    let (right_members, mut right) = side_subsets(view, 2);
    right.sort_by(|a, b| a.1.total_cmp(&b.1));
    let right_mass: Vec<f64> = right.iter().map(|r| r.1).collect();

    let mut best: Option<(f64, usize, usize)> = None;
    for low in [true, false] {
        // denominators π(A) − s (low) or 1 − s − π(A) (high)
        let denom = |m: f64| if low { m - s } else { 1.0 - s - m };
        let feasible = |m: f64| if low { m > s && m <= 0.5 } else { m >= 0.5 && m < 1.0 - s };
        let range = |m0: f64| {
            let (a, b) = if low { (s - m0, 0.5 - m0) } else { (0.5 - m0, 1.0 - s - m0) };
            // low: m1 ∈ (a, b]; high: m1 ∈ [a, b)
            let lo = if low {
                right_mass.partition_point(|&m| m <= a)
            } else {
                right_mass.partition_point(|&m| m < a)
            };
            let hi = if low {
                right_mass.partition_point(|&m| m <= b)
            } else {
                right_mass.partition_point(|&m| m < b)
            };
            (lo, hi)
        };
        let mut lambda = 0.0;
        let mut current: Option<(f64, usize, usize)> = None;
        for iter in 0..100 {
            let sign = if low { -lambda } else { lambda };
            let rmq = SparseMin::new(right.iter().map(|r| r.0 + sign * r.1).collect());
            let mut arg: Option<(f64, usize, usize)> = None;
            for (a, l) in left.iter().enumerate() {
                let (lo, hi) = range(l.1);
                if lo >= hi {
                    continue;
                }
                let b = rmq.argmin(lo, hi);
                let m = l.1 + right[b].1;
                if !feasible(m) {
                    continue;
                }
                let val = l.0 + right[b].0 - lambda * denom(m);
                if arg.is_none_or(|(v, _, _)| val < v) {
                    arg = Some((val, a, b));
                }
            }
            let Some((val, a, b)) = arg else { break };
            let m = left[a].1 + right[b].1;
            let ratio = (left[a].0 + right[b].0) / denom(m);
            let improved = current.is_none_or(|(r, _, _)| ratio < r);
            if improved {
                current = Some((ratio, a, b));
            }
            if iter > 0 && (val >= -1e-15 * (left[a].0 + right[b].0) || !improved) {
                break;
            }
            lambda = ratio;
        }
        if let Some(c) = current {
            if best.is_none_or(|(r, _, _)| c.0 < r) {
                best = Some(c);
            }
        }
    }
    let (value, a, b) = best.ok_or(CremError::NoFeasibleSet { s })?;
    let mut vertices: Vec<VertexId> = Vec::new();
    for (members, mask) in [(&left_members, left[a].2), (&right_members, right[b].2)] {
        vertices.extend(members.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, &i)| VertexId::from_bfs_index(i)));
    }
    vertices.sort();
    Ok(Cut { value, vertices, mass: left[a].1 + right[b].1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CovarianceSpec;
    use crate::disorder::CremInstance;
    use crate::mcmc::{transition_matrix, UniformWeights};

    /// Brute force over all subsets (depth ≤ 3).
    fn brute(view: &TransitionMatrixView, s: f64) -> f64 {
        let n = view.size();
        let pi = view.pi();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let inside = |i: usize| mask >> i & 1 == 1;
            let m: f64 = (0..n).filter(|&i| inside(i)).map(|i| pi[i]).sum();
            if !(m > s && 1.0 - m > s) {
                continue;
            }
            let flow: f64 = (0..n)
                .filter(|&i| inside(i))
                .map(|i| view.row(i).iter().filter(|&&(j, _)| !inside(j)).map(|&(_, p)| pi[i] * p).sum::<f64>())
                .sum();
            best = best.min(flow / (m - s).min(1.0 - m - s));
        }
        best
    }

    fn brw_view(seed: u64, depth: usize, beta: f64) -> TransitionMatrixView {
        let inst = CremInstance::new(seed, depth, CovarianceSpec::brw()).unwrap();
        transition_matrix(&inst, 1.min(depth), beta, false).unwrap()
    }

    #[test]
    fn one_edge_uniform_chain() {
        // cutting one leaf: flow (1/3)(1/9) over mass 1/3
        let view = TransitionMatrixView::from_weights(&UniformWeights(1)).unwrap();
        let cut = exhaustive_conductance(&view, 0.0).unwrap();
        assert!((cut.value - 1.0 / 9.0 / (1.0 / 3.0)).abs() < 1e-12);
        let scan = subtree_conductance_scan(&view, 0.0).unwrap();
        assert!((scan.conductance.unwrap().value - 1.0 / 3.0).abs() < 1e-12);
        assert!(exhaustive_conductance(&view, 0.5).is_err());
        assert!(subtree_conductance_scan(&view, 0.6).is_err());
    }

    #[test]
    fn exhaustive_matches_brute_force() {
        for (seed, depth) in [(1, 1), (2, 2), (3, 3), (4, 3)] {
            let view = brw_view(seed, depth, 1.0);
            for s in [0.0, 0.05, 0.2] {
                let fast = exhaustive_conductance(&view, s).unwrap().value;
                let slow = brute(&view, s);
                assert!((fast - slow).abs() < 1e-12 * slow, "seed {seed} s {s}: {fast} vs {slow}");
            }
        }
    }

    #[test]
    fn lemma_bound_holds() {
        for seed in 0..10 {
            for depth in 2..=4 {
                let view = brw_view(seed, depth, 0.6);
                for s in [0.0, 0.05] {
                    let exact = exhaustive_conductance(&view, s).unwrap();
                    let scan = subtree_conductance_scan(&view, s).unwrap();
                    assert!(exact.value >= scan.lemma_bound.value * (1.0 - 1e-12));
                    assert!(exact.value <= scan.conductance.unwrap().value * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn lemma_ratio_matches_full_enumeration() {
        let view = brw_view(5, 4, 1.1);
        let mass = subtree_mass(&view);
        let pi = view.pi();
        let full = Families::build(view.size(), 15, |i| pi[i], &mass);
        for s in [0.0, 0.1, 0.3] {
            let direct = full.lists[0]
                .iter()
                .filter(|p| p.mass > s)
                .map(|p| p.cost / (3.0 * (p.mass - s)))
                .fold(f64::INFINITY, f64::min);
            let scan = subtree_conductance_scan(&view, s).unwrap();
            assert!((scan.lemma_bound.value - direct).abs() < 1e-14 * direct);
        }
        // 458330 antichains at depth 4 (including the empty one)
        assert_eq!(full.lists[0].len(), 458_330);
    }

    #[test]
    fn concentrated_subtree_is_the_bottleneck() {
        let depth = 4;
        let heavy: VertexId = "01".parse().unwrap();
        let log_w: Vec<f64> = (0..31)
            .map(|i| if heavy.is_prefix_of(VertexId::from_bfs_index(i)) { 1000f64.ln() } else { 0.0 })
            .collect();
        let view = TransitionMatrixView::from_log_weights(depth, log_w).unwrap();
        let scan = subtree_conductance_scan(&view, 0.0).unwrap();
        let best = scan.conductance.unwrap();
        assert_eq!(best.vertices, vec![heavy]);
        let exact = exhaustive_conductance(&view, 0.0).unwrap();
        assert!(exact.value >= best.value / 3.0);
    }

    #[test]
    fn deeper_scans() {
        let view = brw_view(9, 8, 1.0);
        let scan = subtree_conductance_scan(&view, 0.05).unwrap();
        assert!(scan.conductance.is_none());
        assert!(scan.lemma_bound.value > 0.0 && scan.lemma_bound.mass > 0.05);
        assert!(subtree_conductance_scan(&brw_view(9, 9, 1.0), 0.05).is_err());
    }

    #[test]
    fn gap_is_at_most_twice_conductance() {
        for seed in 0..10 {
            for depth in 1..=4 {
                let view = brw_view(seed, depth, 1.0);
                let phi = exhaustive_conductance(&view, 0.0).unwrap().value;
                assert!(view.spectral_gap().unwrap() <= 2.0 * phi + 1e-12);
            }
        }
    }
}
