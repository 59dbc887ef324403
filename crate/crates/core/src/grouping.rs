//! Assignment of channels to selected phrases.
//!
//! Channels are partitioned into `K` nonempty groups, group `k` being
//! anchored at the fixed centre `e_k`, minimising
//! `J = sum_k n_k ||mu_k - e_k||^2` where `mu_k` is the mean of the group's
//! weighted semantic vectors. The search is greedy single-channel
//! relocation from a nearest-centre start. Groups are 0-based here.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cam::{weighted_sum, ActivationStack, ChannelWeights, SaliencyMap};
use crate::error::{Error, Result};

/// A move must lower `J` by more than this to be taken.
pub const IMPROVEMENT_EPS: f64 = 1e-12;
pub const DEFAULT_MAX_SWEEPS: usize = 5000;

#[derive(Debug, Clone)]
pub struct GroupingProblem {
    /// `[d, D]`, row `j` is `w_j a_j p_j`.
    vectors: DMatrix<f64>,
    /// `[K, D]`, row `k` is the embedding of phrase `k`.
    centers: DMatrix<f64>,
}

impl GroupingProblem {
    pub fn new(vectors: DMatrix<f64>, centers: DMatrix<f64>) -> Result<Self> {
        if centers.nrows() == 0 {
            return Err(Error::invariant("need at least one group centre"));
        }
        if vectors.nrows() < centers.nrows() {
            return Err(Error::invariant(format!(
                "{} channels cannot fill {} nonempty groups",
                vectors.nrows(),
                centers.nrows()
            )));
        }
        if vectors.ncols() != centers.ncols() {
            return Err(Error::shape(format!(
                "channel vectors have dim {}, centres {}",
                vectors.ncols(),
                centers.ncols()
            )));
        }
        Ok(GroupingProblem { vectors, centers })
    }

    pub fn channels(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn groups(&self) -> usize {
        self.centers.nrows()
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn centers(&self) -> &DMatrix<f64> {
        &self.centers
    }

    fn vector(&self, j: usize) -> DVector<f64> {
        self.vectors.row(j).transpose()
    }

    fn center(&self, k: usize) -> DVector<f64> {
        self.centers.row(k).transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupAssignment {
    /// Group of each channel, `0..K`.
    pub groups: Vec<usize>,
    pub objective: f64,
    pub sweeps: usize,
    pub moves: usize,
    /// False when the sweep cap stopped the search before a quiet sweep.
    pub converged: bool,
}

impl GroupAssignment {
    /// Channel indices of each group, ascending.
    pub fn members(&self, k_groups: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); k_groups];
        for (j, &g) in self.groups.iter().enumerate() {
            out[g].push(j);
        }
        out
    }
}

/// `J(g)` computed from scratch.
pub fn objective(groups: &[usize], problem: &GroupingProblem) -> Result<f64> {
    if groups.len() != problem.channels() {
        return Err(Error::LengthMismatch {
            left: groups.len(),
            right: problem.channels(),
        });
    }
    let k_groups = problem.groups();
    let dim = problem.vectors.ncols();
    let mut sums = DMatrix::<f64>::zeros(k_groups, dim);
    let mut counts = vec![0usize; k_groups];
    for (j, &g) in groups.iter().enumerate() {
        if g >= k_groups {
            return Err(Error::IndexOutOfRange { index: g, len: k_groups });
        }
        counts[g] += 1;
        let mut row = sums.row_mut(g);
        row += problem.vectors.row(j);
    }
    let mut total = 0.0;
    for k in 0..k_groups {
        if counts[k] == 0 {
            return Err(Error::EmptyGroup(k));
        }
        let n = counts[k] as f64;
        let mean = sums.row(k).transpose() / n;
        total += n * (mean - problem.center(k)).norm_squared();
    }
    Ok(total)
}

/// Running per-group counts and vector sums.
#[derive(Debug, Clone)]
pub struct GroupState {
    groups: Vec<usize>,
    counts: Vec<usize>,
    sums: Vec<DVector<f64>>,
}

impl GroupState {
    /// Builds the state for `groups`; empty groups are allowed here so that
    /// the initial repair can fill them.
    pub fn new(groups: Vec<usize>, problem: &GroupingProblem) -> Result<Self> {
        let k_groups = problem.groups();
        let dim = problem.vectors.ncols();
        if groups.len() != problem.channels() {
            return Err(Error::LengthMismatch {
                left: groups.len(),
                right: problem.channels(),
            });
        }
        let mut counts = vec![0; k_groups];
        let mut sums = vec![DVector::<f64>::zeros(dim); k_groups];
        for (j, &g) in groups.iter().enumerate() {
            if g >= k_groups {
                return Err(Error::IndexOutOfRange { index: g, len: k_groups });
            }
            counts[g] += 1;
            sums[g] += problem.vector(j);
        }
        Ok(GroupState { groups, counts, sums })
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn count(&self, k: usize) -> usize {
        self.counts[k]
    }

    pub fn sum(&self, k: usize) -> &DVector<f64> {
        &self.sums[k]
    }

    pub fn mean(&self, k: usize) -> Option<DVector<f64>> {
        (self.counts[k] > 0).then(|| &self.sums[k] / self.counts[k] as f64)
    }

    /// `n ||S/n - e||^2`, zero for an empty group.
    fn contribution(count: usize, sum: &DVector<f64>, center: &DVector<f64>) -> f64 {
        if count == 0 {
            return 0.0;
        }
        let n = count as f64;
        n * (sum / n - center).norm_squared()
    }

    /// Sum of all group contributions.
    pub fn objective(&self, problem: &GroupingProblem) -> f64 {
        (0..problem.groups())
            .map(|k| Self::contribution(self.counts[k], &self.sums[k], &problem.center(k)))
            .sum()
    }

    fn apply(&mut self, problem: &GroupingProblem, channel: usize, to: usize) {
        let from = self.groups[channel];
        let s = problem.vector(channel);
        self.sums[from] -= &s;
        self.sums[to] += &s;
        self.counts[from] -= 1;
        self.counts[to] += 1;
        self.groups[channel] = to;
    }
}

/// Change in `J` from moving `channel` out of its group into `to`, using only
/// the two groups' counts and sums.
pub fn move_delta(state: &GroupState, problem: &GroupingProblem, channel: usize, to: usize) -> Result<f64> {
    if channel >= state.groups.len() {
        return Err(Error::IndexOutOfRange {
            index: channel,
            len: state.groups.len(),
        });
    }
    if to >= problem.groups() {
        return Err(Error::IndexOutOfRange {
            index: to,
            len: problem.groups(),
        });
    }
    let from = state.groups[channel];
    if from == to {
        return Err(Error::invariant(format!("channel {channel} is already in group {to}")));
    }
    let n_from = state.counts[from];
    if n_from <= 1 {
        return Err(Error::WouldEmptyGroup { channel, group: from });
    }
    let s = problem.vector(channel);
    let (e_from, e_to) = (problem.center(from), problem.center(to));
    let n_to = state.counts[to];

    let before = GroupState::contribution(n_from, &state.sums[from], &e_from)
        + GroupState::contribution(n_to, &state.sums[to], &e_to);
    let after = GroupState::contribution(n_from - 1, &(&state.sums[from] - &s), &e_from)
        + GroupState::contribution(n_to + 1, &(&state.sums[to] + &s), &e_to);
    Ok(after - before)
}

/// Index of the nearest centre for every channel (ties to the lowest index),
/// without the nonempty repair.
pub fn nearest_centers(problem: &GroupingProblem) -> Vec<usize> {
    (0..problem.channels())
        .map(|j| {
            let s = problem.vectors.row(j);
            let mut best = (f64::INFINITY, 0);
            for k in 0..problem.groups() {
                let dist = (s - problem.centers.row(k)).norm_squared();
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            best.1
        })
        .collect()
}

/// Nearest-centre assignment, then each empty group (ascending) receives the
/// channel whose move into it raises `J` the least; channels that are alone
/// in their group are never taken.
pub fn init_assignment(problem: &GroupingProblem) -> Result<GroupState> {
    let mut state = GroupState::new(nearest_centers(problem), problem)?;
    for k in 0..problem.groups() {
        if state.counts[k] > 0 {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for j in 0..problem.channels() {
            if state.counts[state.groups[j]] < 2 {
                continue;
            }
            let delta = move_delta(&state, problem, j, k)?;
            if best.is_none_or(|(d, _)| delta < d) {
                best = Some((delta, j));
            }
        }
        let (_, j) = best.ok_or_else(|| Error::invariant("no channel available to fill an empty group"))?;
        state.apply(problem, j, k);
    }
    Ok(state)
}

/// A candidate relocation evaluated during the search.
#[derive(Debug)]
pub struct MoveAttempt<'a> {
    /// Assignment at the time of evaluation.
    pub groups: &'a [usize],
    pub channel: usize,
    pub from: usize,
    pub to: usize,
    pub delta: f64,
    pub accepted: bool,
}

/// Greedy single-channel relocation.
///
/// One sweep visits channels in ascending order; for each channel whose
/// group has at least two members, the move with the most negative `delta`
/// (ties to the lowest target group) is applied if `delta < -1e-12`. Stops
/// after a sweep without moves or after `max_sweeps` sweeps.
pub fn greedy_relocate(problem: &GroupingProblem, max_sweeps: usize) -> Result<GroupAssignment> {
    greedy_relocate_observed(problem, max_sweeps, |_| {})
}

/// [`greedy_relocate`] reporting every evaluated move to `observe`.
pub fn greedy_relocate_observed(
    problem: &GroupingProblem,
    max_sweeps: usize,
    mut observe: impl FnMut(&MoveAttempt<'_>),
) -> Result<GroupAssignment> {
    let mut state = init_assignment(problem)?;
    let mut sweeps = 0;
    let mut moves = 0;
    let mut converged = false;
    let mut deltas = Vec::with_capacity(problem.groups());

    while sweeps < max_sweeps {
        sweeps += 1;
        let mut moved = false;
        for j in 0..problem.channels() {
            let from = state.groups[j];
            if state.counts[from] < 2 {
                continue;
            }
            deltas.clear();
            let mut best: Option<(f64, usize)> = None;
            for to in (0..problem.groups()).filter(|&b| b != from) {
                let delta = move_delta(&state, problem, j, to)?;
                deltas.push((to, delta));
                if best.is_none_or(|(d, _)| delta < d) {
                    best = Some((delta, to));
                }
            }
            let chosen = best.filter(|&(d, _)| d < -IMPROVEMENT_EPS).map(|(_, to)| to);
            for &(to, delta) in &deltas {
                observe(&MoveAttempt {
                    groups: &state.groups,
                    channel: j,
                    from,
                    to,
                    delta,
                    accepted: chosen == Some(to),
                });
            }
            if let Some(to) = chosen {
                state.apply(problem, j, to);
                moves += 1;
                moved = true;
            }
        }
        if !moved {
            converged = true;
            break;
        }
    }

    let objective = objective(&state.groups, problem)?;
    Ok(GroupAssignment {
        groups: state.groups,
        objective,
        sweeps,
        moves,
        converged,
    })
}

/// Partial saliency map of group `k`: `sum_{j in G_k} w_j A_j`.
pub fn group_saliency(
    stack: &ActivationStack,
    weights: &ChannelWeights,
    groups: &[usize],
    k: usize,
) -> Result<SaliencyMap> {
    if groups.len() != stack.channels() {
        return Err(Error::LengthMismatch {
            left: groups.len(),
            right: stack.channels(),
        });
    }
    let k_groups = groups.iter().copied().max().map_or(0, |m| m + 1);
    if k >= k_groups {
        return Err(Error::IndexOutOfRange { index: k, len: k_groups });
    }
    weighted_sum(stack, weights, |j| groups[j] == k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cam::{saliency, WeightSource};

    fn problem(vectors: &[&[f64]], centers: &[&[f64]]) -> GroupingProblem {
        let dim = centers[0].len();
        GroupingProblem::new(
            DMatrix::from_row_iterator(vectors.len(), dim, vectors.iter().flat_map(|r| r.iter().copied())),
            DMatrix::from_row_iterator(centers.len(), dim, centers.iter().flat_map(|r| r.iter().copied())),
        )
        .unwrap()
    }

    #[test]
    fn objective_hand_example() {
        let p = problem(&[&[0.0, 0.0], &[2.0, 0.0]], &[&[0.0, 0.0]]);
        assert_eq!(objective(&[0, 0], &p).unwrap(), 2.0);
    }

    #[test]
    fn objective_zero_at_means() {
        let p = problem(&[&[1.0, 0.0], &[3.0, 0.0], &[0.0, 5.0]], &[&[2.0, 0.0], &[0.0, 5.0]]);
        assert_eq!(objective(&[0, 0, 1], &p).unwrap(), 0.0);
        assert!(matches!(objective(&[0, 0, 0], &p), Err(Error::EmptyGroup(1))));
    }

    #[test]
    fn single_group_takes_everything() {
        let p = problem(&[&[1.0], &[-4.0], &[2.0]], &[&[0.0]]);
        let a = greedy_relocate(&p, DEFAULT_MAX_SWEEPS).unwrap();
        assert_eq!(a.groups, vec![0, 0, 0]);
        assert!(a.converged);
    }

    #[test]
    fn exact_match_goes_to_its_center() {
        let p = problem(&[&[0.0, 1.0], &[1.0, 0.0]], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(nearest_centers(&p), vec![1, 0]);
    }

    #[test]
    fn one_channel_per_center() {
        let rows: [&[f64]; 3] = [&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]];
        let p = problem(&rows, &rows);
        let a = greedy_relocate(&p, DEFAULT_MAX_SWEEPS).unwrap();
        assert_eq!(a.groups, vec![0, 1, 2]);
        assert_eq!(a.objective, 0.0);
        assert_eq!(a.moves, 0);
    }

    #[test]
    fn empty_group_repaired() {
        // Both channels sit on centre 0; centre 1 starts empty.
        let p = problem(&[&[0.0], &[0.1]], &[&[0.0], &[5.0]]);
        assert_eq!(nearest_centers(&p), vec![0, 0]);
        let state = init_assignment(&p).unwrap();
        // Moving channel 1 (closer to 5) costs less.
        assert_eq!(state.groups(), &[0, 1]);
    }

    #[test]
    fn move_delta_guards() {
        let p = problem(&[&[0.0], &[1.0]], &[&[0.0], &[1.0]]);
        let state = GroupState::new(vec![0, 1], &p).unwrap();
        assert!(matches!(move_delta(&state, &p, 0, 1), Err(Error::WouldEmptyGroup { channel: 0, group: 0 })));
        assert!(move_delta(&state, &p, 0, 0).is_err());
        assert!(matches!(move_delta(&state, &p, 5, 0), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn move_delta_positive_when_leaving_center() {
        // Channel 0 sits exactly on centre 0 alongside channel 1.
        let p = problem(&[&[0.0], &[0.0], &[4.0]], &[&[0.0], &[4.0]]);
        let state = GroupState::new(vec![0, 0, 1], &p).unwrap();
        assert!(move_delta(&state, &p, 0, 1).unwrap() > 0.0);
    }

    #[test]
    fn move_delta_zero_for_symmetric_swap() {
        // Two identical channels, two identical centres: moving either is neutral.
        let p = problem(&[&[1.0], &[1.0], &[1.0]], &[&[1.0], &[1.0]]);
        let state = GroupState::new(vec![0, 0, 1], &p).unwrap();
        assert_eq!(move_delta(&state, &p, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn group_saliency_single_group_is_full_map() {
        let stack = ActivationStack::new(2, 1, 2, vec![1.0, 2.0, -3.0, 4.0]).unwrap();
        let w = ChannelWeights::new(vec![0.5, 2.0], 0, WeightSource::External).unwrap();
        let full = saliency(&stack, &w).unwrap();
        assert_eq!(group_saliency(&stack, &w, &[0, 0], 0).unwrap(), full);
        assert!(matches!(group_saliency(&stack, &w, &[0, 0], 1), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn zero_weight_channels_do_not_change_group_maps() {
        let stack = ActivationStack::new(3, 1, 2, vec![1.0, 2.0, 7.0, 7.0, 3.0, 4.0]).unwrap();
        let w = ChannelWeights::new(vec![1.0, 0.0, 1.0], 0, WeightSource::External).unwrap();
        let a = group_saliency(&stack, &w, &[0, 0, 1], 0).unwrap();
        let b = group_saliency(&stack, &w, &[0, 1, 1], 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn problem_validation() {
        assert!(GroupingProblem::new(DMatrix::zeros(1, 2), DMatrix::zeros(2, 2)).is_err());
        assert!(GroupingProblem::new(DMatrix::zeros(2, 2), DMatrix::zeros(0, 2)).is_err());
        assert!(GroupingProblem::new(DMatrix::zeros(2, 3), DMatrix::zeros(1, 2)).is_err());
    }
}
