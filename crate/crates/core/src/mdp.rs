//! Finite MDPs, policies, rollouts and the chronological replay sampler.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{fmt_real, CSV_HEADER_TRAJECTORY};
use crate::rng;
use crate::scalar::{sup_diff, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("mdp needs at least one state and one action")]
    Empty,
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("transition row sum for state {state} action {action} is {sum}, expected 1")]
    RowSum { state: usize, action: usize, sum: f64 },
    #[error("transition probability out of [0,1] at state {state} action {action} next {next}: {value}")]
    Probability {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },
    #[error("reward at state {state} action {action} is not finite")]
    NonFiniteReward { state: usize, action: usize },
    #[error("discount must lie in [0,1), got {0}")]
    Discount(f64),
    #[error("policy row sum for state {state} is {sum}, expected 1")]
    PolicyRowSum { state: usize, sum: f64 },
    #[error("policy probability out of [0,1] at state {state} action {action}: {value}")]
    PolicyProbability { state: usize, action: usize, value: f64 },
    #[error("state {0} out of range")]
    StateOutOfRange(usize),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("tolerance must be positive")]
    Tolerance,
    #[error("no trajectories to sample from")]
    NoTrajectories,
    #[error("invalid step range [{min}, {max}]")]
    StepRange { min: usize, max: usize },
    #[error("trajectory {index} has length {len}, need more than {min} steps")]
    TrajectoryTooShort { index: usize, len: usize, min: usize },
    #[error("grid size must be at least 5, got {0}")]
    GridSize(usize),
    #[error("slip must lie in [0,1), got {0}")]
    Slip(f64),
    #[error("goal cell ({0}, {1}) is outside the grid or on a wall")]
    Goal(usize, usize),
}

/// Serialized form of a [`TabularMdp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MdpDocument<T> {
    n_states: usize,
    n_actions: usize,
    gamma: T,
    transition: Vec<Vec<Vec<T>>>,
    reward: Vec<Vec<T>>,
}

/// A finite MDP `(S, A, P, r, gamma)` with dense integer states and actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "MdpDocument<T>",
    into = "MdpDocument<T>",
    bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>")
)]
pub struct TabularMdp<T> {
    n_states: usize,
    n_actions: usize,
    gamma: T,
    /// Flattened `[state][action][next_state]`.
    transition: Vec<T>,
    /// Flattened `[state][action]`.
    reward: Vec<T>,
}

impl<T: Scalar> TryFrom<MdpDocument<T>> for TabularMdp<T> {
    type Error = MdpError;

    fn try_from(doc: MdpDocument<T>) -> Result<Self, MdpError> {
        let mdp = TabularMdp::new(doc.transition, doc.reward, doc.gamma)?;
        if mdp.n_states != doc.n_states {
            return Err(MdpError::Shape {
                what: "n_states",
                expected: doc.n_states,
                actual: mdp.n_states,
            });
        }
        if mdp.n_actions != doc.n_actions {
            return Err(MdpError::Shape {
                what: "n_actions",
                expected: doc.n_actions,
                actual: mdp.n_actions,
            });
        }
        Ok(mdp)
    }
}

impl<T: Scalar> From<TabularMdp<T>> for MdpDocument<T> {
    fn from(mdp: TabularMdp<T>) -> Self {
        let transition = (0..mdp.n_states)
            .map(|s| (0..mdp.n_actions).map(|a| mdp.transition_row(s, a).to_vec()).collect())
            .collect();
        let reward = (0..mdp.n_states)
            .map(|s| (0..mdp.n_actions).map(|a| mdp.reward(s, a)).collect())
            .collect();
        MdpDocument {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            gamma: mdp.gamma,
            transition,
            reward,
        }
    }
}

impl<T: Scalar> TabularMdp<T> {
    /// Builds and validates an MDP from nested `[s][a][s']` transitions and
    /// `[s][a]` rewards.
    pub fn new(transition: Vec<Vec<Vec<T>>>, reward: Vec<Vec<T>>, gamma: T) -> Result<Self, MdpError> {
        let n_states = transition.len();
        let n_actions = transition.first().map_or(0, Vec::len);
        if n_states == 0 || n_actions == 0 {
            return Err(MdpError::Empty);
        }
        if reward.len() != n_states {
            return Err(MdpError::Shape {
                what: "reward rows",
                expected: n_states,
                actual: reward.len(),
            });
        }
        let mut flat_p = Vec::with_capacity(n_states * n_actions * n_states);
        let mut flat_r = Vec::with_capacity(n_states * n_actions);
        for (rows, rewards) in transition.into_iter().zip(reward) {
            if rows.len() != n_actions {
                return Err(MdpError::Shape {
                    what: "transition actions",
                    expected: n_actions,
                    actual: rows.len(),
                });
            }
            if rewards.len() != n_actions {
                return Err(MdpError::Shape {
                    what: "reward actions",
                    expected: n_actions,
                    actual: rewards.len(),
                });
            }
            for row in rows {
                if row.len() != n_states {
                    return Err(MdpError::Shape {
                        what: "transition row",
                        expected: n_states,
                        actual: row.len(),
                    });
                }
                flat_p.extend(row);
            }
            flat_r.extend(rewards);
        }
        let mdp = TabularMdp {
            n_states,
            n_actions,
            gamma,
            transition: flat_p,
            reward: flat_r,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Checks every structural invariant, reporting the first violation.
    pub fn validate(&self) -> Result<(), MdpError> {
        let tol = T::row_tolerance();
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.transition_row(s, a);
                for (next, &p) in row.iter().enumerate() {
                    if !(p >= T::zero() && p <= T::one()) {
                        return Err(MdpError::Probability {
                            state: s,
                            action: a,
                            next,
                            value: p.as_f64(),
                        });
                    }
                }
                let sum: T = row.iter().copied().sum();
                if (sum - T::one()).abs() > tol {
                    return Err(MdpError::RowSum {
                        state: s,
                        action: a,
                        sum: sum.as_f64(),
                    });
                }
                if !self.reward(s, a).is_finite() {
                    return Err(MdpError::NonFiniteReward { state: s, action: a });
                }
            }
        }
        if !(self.gamma >= T::zero() && self.gamma < T::one()) {
            return Err(MdpError::Discount(self.gamma.as_f64()));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    /// Returns a copy with a different discount, re-validated.
    pub fn with_gamma(&self, gamma: T) -> Result<Self, MdpError> {
        let mdp = TabularMdp { gamma, ..self.clone() };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn transition_row(&self, state: usize, action: usize) -> &[T] {
        let start = (state * self.n_actions + action) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn reward(&self, state: usize, action: usize) -> T {
        self.reward[state * self.n_actions + action]
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error>
    where
        T: for<'de> Deserialize<'de>,
    {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String
    where
        T: Serialize,
    {
        serde_json::to_string_pretty(self).expect("mdp serializes")
    }
}

/// Free-function form of [`TabularMdp::validate`].
pub fn validate<T: Scalar>(mdp: &TabularMdp<T>) -> Result<(), MdpError> {
    mdp.validate()
}

/// Per-state action distribution `pi(a|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy<T> {
    probs: Vec<Vec<T>>,
}

impl<T: Scalar> Policy<T> {
    pub fn new(probs: Vec<Vec<T>>) -> Result<Self, MdpError> {
        if probs.is_empty() || probs[0].is_empty() {
            return Err(MdpError::Empty);
        }
        let n_actions = probs[0].len();
        let tol = T::row_tolerance();
        for (s, row) in probs.iter().enumerate() {
            if row.len() != n_actions {
                return Err(MdpError::Shape {
                    what: "policy row",
                    expected: n_actions,
                    actual: row.len(),
                });
            }
            for (a, &p) in row.iter().enumerate() {
                if !(p >= T::zero() && p <= T::one()) {
                    return Err(MdpError::PolicyProbability {
                        state: s,
                        action: a,
                        value: p.as_f64(),
                    });
                }
            }
            let sum: T = row.iter().copied().sum();
            if (sum - T::one()).abs() > tol {
                return Err(MdpError::PolicyRowSum {
                    state: s,
                    sum: sum.as_f64(),
                });
            }
        }
        Ok(Policy { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = T::one() / T::of(n_actions as f64);
        Policy {
            probs: vec![vec![p; n_actions]; n_states],
        }
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![T::zero(); n_actions];
                row[a] = T::one();
                row
            })
            .collect();
        Policy { probs }
    }

    /// Mixes `(1 - epsilon) * self` with the uniform policy.
    pub fn epsilon_greedy(&self, epsilon: T) -> Self {
        let n_actions = self.n_actions();
        let floor = epsilon / T::of(n_actions as f64);
        let probs = self
            .probs
            .iter()
            .map(|row| row.iter().map(|&p| (T::one() - epsilon) * p + floor).collect())
            .collect();
        Policy { probs }
    }

    /// Policy with independent random rows drawn from a flat Dirichlet.
    pub fn random(n_states: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = rng::generator(seed, "policy.random");
        let probs = (0..n_states)
            .map(|_| {
                let w: Vec<f64> = (0..n_actions).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
                let total: f64 = w.iter().sum();
                normalize_row(w.iter().map(|x| x / total).collect())
            })
            .collect();
        Policy { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.probs[0].len()
    }

    pub fn prob(&self, state: usize, action: usize) -> T {
        self.probs[state][action]
    }

    pub fn row(&self, state: usize) -> &[T] {
        &self.probs[state]
    }

    fn check_shape(&self, mdp: &TabularMdp<T>) -> Result<(), MdpError> {
        if self.n_states() != mdp.n_states() {
            return Err(MdpError::Shape {
                what: "policy states",
                expected: mdp.n_states(),
                actual: self.n_states(),
            });
        }
        if self.n_actions() != mdp.n_actions() {
            return Err(MdpError::Shape {
                what: "policy actions",
                expected: mdp.n_actions(),
                actual: self.n_actions(),
            });
        }
        Ok(())
    }
}

/// Converts an `f64` probability row to `T`, pushing the round-off residue
/// onto the largest entry so the row sums to one.
fn normalize_row<T: Scalar>(row: Vec<f64>) -> Vec<T> {
    let mut out: Vec<T> = row.iter().map(|&p| T::of(p)).collect();
    let sum: T = out.iter().copied().sum();
    if let Some((imax, _)) = out
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
    {
        out[imax] = out[imax] + (T::one() - sum);
    }
    out
}

/// `r^pi_x = sum_a pi(a|x) r(x, a)`.
pub fn policy_reward<T: Scalar>(mdp: &TabularMdp<T>, pi: &Policy<T>) -> Result<Vec<T>, MdpError> {
    pi.check_shape(mdp)?;
    Ok((0..mdp.n_states())
        .map(|s| (0..mdp.n_actions()).map(|a| pi.prob(s, a) * mdp.reward(s, a)).sum())
        .collect())
}

/// `P^pi[x][x'] = sum_a pi(a|x) P(x'|x, a)`, flattened row-major.
pub fn policy_transition<T: Scalar>(mdp: &TabularMdp<T>, pi: &Policy<T>) -> Result<Vec<T>, MdpError> {
    pi.check_shape(mdp)?;
    let n = mdp.n_states();
    let mut out = vec![T::zero(); n * n];
    for s in 0..n {
        let dst = &mut out[s * n..(s + 1) * n];
        for a in 0..mdp.n_actions() {
            let w = pi.prob(s, a);
            if w == T::zero() {
                continue;
            }
            for (d, &p) in dst.iter_mut().zip(mdp.transition_row(s, a)) {
                *d = *d + w * p;
            }
        }
    }
    Ok(out)
}

/// Optimal state values and the greedy policy (ties to the lowest action).
///
/// Iterates the Bellman optimality operator until one application moves the
/// values by at most `tol` in sup norm.
pub fn value_iteration<T: Scalar>(mdp: &TabularMdp<T>, tol: T) -> Result<(Vec<T>, Policy<T>), MdpError> {
    mdp.validate()?;
    if !(tol > T::zero()) {
        return Err(MdpError::Tolerance);
    }
    let n = mdp.n_states();
    let mut values = vec![T::zero(); n];
    loop {
        let next: Vec<T> = (0..n)
            .map(|s| {
                let (_, q) = greedy_action(mdp, &values, s);
                q
            })
            .collect();
        let change = sup_diff(&next, &values);
        values = next;
        // one more application moves by at most gamma * change <= tol
        if change <= tol {
            break;
        }
    }
    let actions: Vec<usize> = (0..n).map(|s| greedy_action(mdp, &values, s).0).collect();
    Ok((values, Policy::deterministic(&actions, mdp.n_actions())))
}

fn greedy_action<T: Scalar>(mdp: &TabularMdp<T>, values: &[T], s: usize) -> (usize, T) {
    let mut best = (0, T::neg_infinity());
    for a in 0..mdp.n_actions() {
        let cont: T = mdp.transition_row(s, a).iter().zip(values).map(|(&p, &v)| p * v).sum();
        let q = mdp.reward(s, a) + mdp.gamma() * cont;
        if q > best.1 {
            best = (a, q);
        }
    }
    best
}

/// A rollout: `states` has one more entry than `actions` and `rewards`, the
/// last one being the state reached after the final action.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<T>,
}

impl<T: Scalar> Trajectory<T> {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// CSV rows `(step, state, action, reward)`; the terminal state has empty
    /// action and reward cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER_TRAJECTORY);
        for t in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                t,
                self.states[t],
                self.actions[t],
                fmt_real(self.rewards[t].as_f64())
            ));
        }
        out.push_str(&format!("{},{},,\n", self.len(), self.states[self.len()]));
        out
    }
}

/// Rolls out `pi` from `start` for `horizon` transitions.
pub fn sample_trajectory<T: Scalar>(
    mdp: &TabularMdp<T>,
    pi: &Policy<T>,
    start: usize,
    horizon: usize,
    seed: u64,
) -> Result<Trajectory<T>, MdpError> {
    pi.check_shape(mdp)?;
    if horizon == 0 {
        return Err(MdpError::ZeroHorizon);
    }
    if start >= mdp.n_states() {
        return Err(MdpError::StateOutOfRange(start));
    }
    let mut rng = rng::generator(seed, "mdp.sample_trajectory");
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut s = start;
    states.push(s);
    for _ in 0..horizon {
        let a = rng::categorical(&mut rng, pi.row(s).iter().map(|p| p.as_f64()));
        let next = rng::categorical(&mut rng, mdp.transition_row(s, a).iter().map(|p| p.as_f64()));
        actions.push(a);
        rewards.push(mdp.reward(s, a));
        states.push(next);
        s = next;
    }
    Ok(Trajectory {
        states,
        actions,
        rewards,
    })
}

/// `sum_{t=0}^{len-1} gamma^t rewards[t]`.
pub fn discounted_sum<T: Scalar>(rewards: &[T], gamma: T) -> T {
    let mut acc = T::zero();
    let mut w = T::one();
    for &r in rewards {
        acc = acc + w * r;
        w = w * gamma;
    }
    acc
}

/// One chronological sample `(x_i, a_i, r_i, x_{i+1}, x_j, r_j, x_{j+1}, agg_rew)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChronoSample<T> {
    pub x_i: usize,
    pub a_i: usize,
    pub r_i: T,
    pub x_i1: usize,
    pub x_j: usize,
    pub r_j: T,
    pub x_j1: usize,
    /// Discounted reward sum over `t = 0..=step_gap`, both ends included.
    pub agg_rew: T,
    pub step_gap: usize,
    /// Source trajectory index and the position of `x_i` within it.
    pub trajectory: usize,
    pub position: usize,
}

pub type ChronoBatch<T> = Vec<ChronoSample<T>>;

/// Samples `batch_size` chronological tuples from a set of trajectories.
///
/// A trajectory is picked uniformly, then `i` uniformly over positions that
/// leave room for `k_min` steps, then the gap uniformly over
/// `[k_min, min(k_max, len - 1 - i)]`. `x_j` is never the terminal state, so
/// `r_j` and `x_{j+1}` always come from a recorded transition.
pub fn sample_chrono_batch<T: Scalar>(
    trajectories: &[Trajectory<T>],
    batch_size: usize,
    step_range: (usize, usize),
    gamma: T,
    seed: u64,
) -> Result<ChronoBatch<T>, MdpError> {
    let (k_min, k_max) = step_range;
    if trajectories.is_empty() {
        return Err(MdpError::NoTrajectories);
    }
    if k_min < 1 || k_max < k_min {
        return Err(MdpError::StepRange { min: k_min, max: k_max });
    }
    for (index, traj) in trajectories.iter().enumerate() {
        if traj.len() <= k_min {
            return Err(MdpError::TrajectoryTooShort {
                index,
                len: traj.len(),
                min: k_min,
            });
        }
    }
    let mut rng = rng::generator(seed, "mdp.sample_chrono_batch");
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let ti = rng.gen_range(0..trajectories.len());
        let traj = &trajectories[ti];
        let last = traj.len() - 1;
        let i = rng.gen_range(0..=last - k_min);
        let gap = rng.gen_range(k_min..=k_max.min(last - i));
        let j = i + gap;
        batch.push(ChronoSample {
            x_i: traj.states[i],
            a_i: traj.actions[i],
            r_i: traj.rewards[i],
            x_i1: traj.states[i + 1],
            x_j: traj.states[j],
            r_j: traj.rewards[j],
            x_j1: traj.states[j + 1],
            agg_rew: discounted_sum(&traj.rewards[i..=j], gamma),
            step_gap: gap,
            trajectory: ti,
            position: i,
        });
    }
    Ok(batch)
}

/// Four rooms on a `size x size` grid whose border is wall, split by one
/// vertical and one horizontal wall through the middle, each wall segment
/// pierced by a door at its midpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FourRooms<T> {
    pub mdp: TabularMdp<T>,
    /// `(row, col)` of each state index.
    pub cells: Vec<(usize, usize)>,
    pub goal_state: usize,
}

/// Grid layout used by [`four_rooms`]; `true` marks an open cell.
pub fn four_rooms_layout(size: usize) -> Vec<Vec<bool>> {
    let mid = size / 2;
    let mut open = vec![vec![false; size]; size];
    for (r, row) in open.iter_mut().enumerate().take(size - 1).skip(1) {
        for (c, cell) in row.iter_mut().enumerate().take(size - 1).skip(1) {
            *cell = r != mid && c != mid;
        }
    }
    let door = |lo: usize, hi: usize| (lo + hi) / 2;
    // vertical wall segments (column mid), horizontal ones (row mid)
    open[door(1, mid - 1)][mid] = true;
    open[door(mid + 1, size - 2)][mid] = true;
    open[mid][door(1, mid - 1)] = true;
    open[mid][door(mid + 1, size - 2)] = true;
    open
}

/// Actions: 0 up, 1 right, 2 down, 3 left. With probability `slip` a move
/// drawn uniformly from all four replaces the intended one. Reward is 1 in
/// the goal state (which is absorbing) and 0 elsewhere.
pub fn four_rooms<T: Scalar>(size: usize, goal: (usize, usize), slip: T, gamma: T) -> Result<FourRooms<T>, MdpError> {
    if size < 5 {
        return Err(MdpError::GridSize(size));
    }
    if !(slip >= T::zero() && slip < T::one()) {
        return Err(MdpError::Slip(slip.as_f64()));
    }
    let open = four_rooms_layout(size);
    if goal.0 >= size || goal.1 >= size || !open[goal.0][goal.1] {
        return Err(MdpError::Goal(goal.0, goal.1));
    }
    let mut index = vec![vec![usize::MAX; size]; size];
    let mut cells = Vec::new();
    for r in 0..size {
        for c in 0..size {
            if open[r][c] {
                index[r][c] = cells.len();
                cells.push((r, c));
            }
        }
    }
    let n = cells.len();
    let goal_state = index[goal.0][goal.1];
    let step = |(r, c): (usize, usize), a: usize| -> usize {
        let (nr, nc) = match a {
            0 => (r - 1, c),
            1 => (r, c + 1),
            2 => (r + 1, c),
            _ => (r, c - 1),
        };
        if open[nr][nc] {
            index[nr][nc]
        } else {
            index[r][c]
        }
    };
    let quarter = slip / T::of(4.0);
    let mut transition = vec![vec![vec![T::zero(); n]; 4]; n];
    let mut reward = vec![vec![T::zero(); 4]; n];
    for (s, &cell) in cells.iter().enumerate() {
        for a in 0..4 {
            let row = &mut transition[s][a];
            if s == goal_state {
                row[s] = T::one();
                reward[s][a] = T::one();
                continue;
            }
            row[step(cell, a)] = row[step(cell, a)] + (T::one() - slip);
            for b in 0..4 {
                let t = step(cell, b);
                row[t] = row[t] + quarter;
            }
        }
    }
    Ok(FourRooms {
        mdp: TabularMdp::new(transition, reward, gamma)?,
        cells,
        goal_state,
    })
}

/// Random MDP: each `(s, a)` moves to at most `support` distinct successors
/// with random weights; rewards depend on the state only and lie in `[0, 1)`.
pub fn random_mdp<T: Scalar>(
    n_states: usize,
    n_actions: usize,
    support: usize,
    gamma: T,
    seed: u64,
) -> Result<TabularMdp<T>, MdpError> {
    if n_states == 0 || n_actions == 0 {
        return Err(MdpError::Empty);
    }
    let mut rng = rng::generator(seed, "mdp.random_mdp");
    let support = support.clamp(1, n_states);
    let state_reward: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>()).collect();
    let mut transition = Vec::with_capacity(n_states);
    let mut reward = Vec::with_capacity(n_states);
    for &r in &state_reward {
        let mut rows = Vec::with_capacity(n_actions);
        for _ in 0..n_actions {
            let mut w = vec![0.0f64; n_states];
            for _ in 0..support {
                w[rng.gen_range(0..n_states)] += rng.gen::<f64>() + 0.05;
            }
            let total: f64 = w.iter().sum();
            rows.push(normalize_row(w.iter().map(|x| x / total).collect()));
        }
        transition.push(rows);
        reward.push(vec![T::of(r); n_actions]);
    }
    TabularMdp::new(transition, reward, gamma)
}
