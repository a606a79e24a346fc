//! Endpoint-conditioned discounted returns and the two constraints that
//! bracket the temporal measurement.

use thiserror::Error;

use crate::mdp::{policy_reward, policy_transition, value_iteration, MdpError, Policy, TabularMdp};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemporalError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("unreachable endpoint: state {y} cannot be reached from {x} in exactly {k} steps")]
    Unreachable { x: usize, y: usize, k: usize },
}

/// Slack below which a constraint counts as violated.
pub const CONSTRAINT_TOL: f64 = 1e-9;

/// `E[sum_{t=0}^{k} gamma^t r^pi_{s_t} | s_0 = x, s_k = y]` together with the
/// probability of the conditioning event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionedReturn<T> {
    pub value: T,
    pub endpoint_prob: T,
    pub k: usize,
}

/// Policy-induced chain reused across many `(x, y, k)` queries.
#[derive(Debug, Clone)]
pub struct Chain<T> {
    n: usize,
    gamma: T,
    reward: Vec<T>,
    /// Row-major `P^pi`.
    p: Vec<T>,
}

impl<T: Scalar> Chain<T> {
    pub fn new(mdp: &TabularMdp<T>, pi: &Policy<T>) -> Result<Self, TemporalError> {
        mdp.validate()?;
        Ok(Chain {
            n: mdp.n_states(),
            gamma: mdp.gamma(),
            reward: policy_reward(mdp, pi)?,
            p: policy_transition(mdp, pi)?,
        })
    }

    fn check_state(&self, s: usize) -> Result<(), TemporalError> {
        if s >= self.n {
            return Err(MdpError::StateOutOfRange(s).into());
        }
        Ok(())
    }

    /// Forward occupancies `alpha_t(s) = P(s_t = s | s_0 = x)` for `t = 0..=k`.
    fn forward(&self, x: usize, k: usize) -> Vec<Vec<T>> {
        let n = self.n;
        let mut alpha = Vec::with_capacity(k + 1);
        let mut cur = vec![T::zero(); n];
        cur[x] = T::one();
        alpha.push(cur);
        for _ in 0..k {
            let prev = alpha.last().expect("non-empty");
            let mut next = vec![T::zero(); n];
            for (s, &a) in prev.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (dst, &p) in next.iter_mut().zip(&self.p[s * n..(s + 1) * n]) {
                    *dst = *dst + a * p;
                }
            }
            alpha.push(next);
        }
        alpha
    }

    /// Backward reach probabilities `beta_t(s) = P(s_k = y | s_t = s)`.
    fn backward(&self, y: usize, k: usize) -> Vec<Vec<T>> {
        let n = self.n;
        let mut beta = vec![vec![T::zero(); n]; k + 1];
        beta[k][y] = T::one();
        for t in (0..k).rev() {
            for s in 0..n {
                beta[t][s] = self.p[s * n..(s + 1) * n]
                    .iter()
                    .zip(&beta[t + 1])
                    .map(|(&p, &b)| p * b)
                    .sum();
            }
        }
        beta
    }

    pub fn endpoint_probability(&self, x: usize, y: usize, k: usize) -> Result<T, TemporalError> {
        self.check_state(x)?;
        self.check_state(y)?;
        Ok(self.forward(x, k)[k][y])
    }

    pub fn conditioned_return(&self, x: usize, y: usize, k: usize) -> Result<ConditionedReturn<T>, TemporalError> {
        self.check_state(x)?;
        self.check_state(y)?;
        let alpha = self.forward(x, k);
        let endpoint_prob = alpha[k][y];
        if !(endpoint_prob > T::zero()) {
            return Err(TemporalError::Unreachable { x, y, k });
        }
        let beta = self.backward(y, k);
        let mut total = T::zero();
        let mut discount = T::one();
        for t in 0..=k {
            let joint: T = (0..self.n).map(|s| alpha[t][s] * beta[t][s] * self.reward[s]).sum();
            total = total + discount * joint;
            discount = discount * self.gamma;
        }
        Ok(ConditionedReturn {
            value: total / endpoint_prob,
            endpoint_prob,
            k,
        })
    }
}

/// `P(s_k = y | s_0 = x)` under `P^pi`.
pub fn endpoint_probability<T: Scalar>(
    mdp: &TabularMdp<T>,
    pi: &Policy<T>,
    x: usize,
    y: usize,
    k: usize,
) -> Result<T, TemporalError> {
    Chain::new(mdp, pi)?.endpoint_probability(x, y, k)
}

/// Discounted policy-reward sum from `x` to `y` over `k` steps (both ends
/// included), conditioned on the endpoint. Errors on unreachable endpoints.
pub fn conditioned_return<T: Scalar>(
    mdp: &TabularMdp<T>,
    pi: &Policy<T>,
    x: usize,
    y: usize,
    k: usize,
) -> Result<ConditionedReturn<T>, TemporalError> {
    Chain::new(mdp, pi)?.conditioned_return(x, y, k)
}

/// [`conditioned_return`] under the greedy policy of value iteration.
pub fn m_star<T: Scalar>(
    mdp: &TabularMdp<T>,
    x: usize,
    y: usize,
    k: usize,
    tol: T,
) -> Result<ConditionedReturn<T>, TemporalError> {
    let (_, greedy) = value_iteration(mdp, tol)?;
    conditioned_return(mdp, &greedy, x, y, k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowerBoundCheck<T> {
    pub satisfied: bool,
    /// `m_value - conditioned_return(pi)`.
    pub gap: T,
}

/// Does `m_value` dominate the conditioned return of `pi`?
pub fn check_lower_bound<T: Scalar>(
    mdp: &TabularMdp<T>,
    pi: &Policy<T>,
    x: usize,
    y: usize,
    k: usize,
    m_value: T,
) -> Result<LowerBoundCheck<T>, TemporalError> {
    let ret = conditioned_return(mdp, pi, x, y, k)?;
    let gap = m_value - ret.value;
    Ok(LowerBoundCheck {
        satisfied: gap >= -T::of(CONSTRAINT_TOL),
        gap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperBoundCheck<T> {
    pub satisfied: bool,
    /// `d(x_i, y_i) + |m(y_i, y_j)| + d(x_j, y_j) - |m(x_i, x_j)|`.
    pub slack: T,
}

/// Is `|m(x_i, x_j)|` bounded by the detour through the partner rollout?
pub fn check_upper_bound<T: Scalar>(m_xy: T, d_xi_yi: T, d_xj_yj: T, m_yy: T) -> UpperBoundCheck<T> {
    let slack = d_xi_yi + m_yy.abs() + d_xj_yj - m_xy.abs();
    UpperBoundCheck {
        satisfied: slack >= -T::of(CONSTRAINT_TOL),
        slack,
    }
}

/// Outcome of comparing one policy's conditioned returns against `m_star`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViolationReport {
    /// Triples `(x, y, k)` reachable under both policies.
    pub checked: usize,
    pub violations: usize,
}

impl ViolationReport {
    pub fn rate(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.violations as f64 / self.checked as f64
        }
    }
}

/// Counts triples `(x, y, k)` with `1 <= k <= k_max` where the conditioned
/// return of `pi` exceeds that of `optimal` by more than [`CONSTRAINT_TOL`].
pub fn lower_bound_violations<T: Scalar>(
    mdp: &TabularMdp<T>,
    optimal: &Policy<T>,
    pi: &Policy<T>,
    k_max: usize,
) -> Result<ViolationReport, TemporalError> {
    let best = Chain::new(mdp, optimal)?;
    let other = Chain::new(mdp, pi)?;
    let mut report = ViolationReport {
        checked: 0,
        violations: 0,
    };
    for x in 0..mdp.n_states() {
        for y in 0..mdp.n_states() {
            for k in 1..=k_max {
                let (Ok(m), Ok(r)) = (best.conditioned_return(x, y, k), other.conditioned_return(x, y, k)) else {
                    continue;
                };
                report.checked += 1;
                if r.value - m.value > T::of(CONSTRAINT_TOL) {
                    report.violations += 1;
                }
            }
        }
    }
    Ok(report)
}
