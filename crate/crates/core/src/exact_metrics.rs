//! Exact behavioral metrics on tabular MDPs: the pi-bisimulation metric
//! (Wasserstein coupling), the MICo distance (independent coupling) and the
//! finite-horizon chronological recursion.

use serde_json::json;
use thiserror::Error;

use crate::io::{fmt_real, CSV_HEADER_METRIC};
use crate::mdp::{policy_reward, policy_transition, MdpError, Policy, TabularMdp};
use crate::scalar::{sup_diff, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("{which} distribution is not normalized (sum {sum})")]
    NotNormalized { which: &'static str, sum: f64 },
    #[error("{which} distribution has a negative or non-finite entry")]
    InvalidMass { which: &'static str },
    #[error("cost matrix must be {rows}x{cols} with non-negative finite entries")]
    Cost { rows: usize, cols: usize },
    #[error("support of size {0} exceeds the limit of {MAX_SUPPORT}")]
    SupportTooLarge(usize),
    #[error("transport plan marginals off by {0}")]
    Marginals(f64),
    #[error("no convergence after {iterations} iterations (residual {residual})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        /// Last iterate, row-major `n x n`.
        last: Vec<f64>,
    },
    #[error("tolerance must be positive")]
    Tolerance,
}

/// Largest support handled by [`wasserstein1`].
pub const MAX_SUPPORT: usize = 64;

/// Costs are rounded to integers at this scale inside the flow solver.
pub const COST_SCALE: f64 = 1e12;

/// Default fixed-point tolerance.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Fixed point of a metric operator.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable<T> {
    n: usize,
    /// Row-major `[x][y]`.
    values: Vec<T>,
    pub iterations: usize,
    /// Sup-norm change made by the last operator application.
    pub residual: T,
    /// Sup-norm change of every application, in order.
    pub residual_trace: Vec<T>,
}

impl<T: Scalar> MetricTable<T> {
    pub fn from_values(n: usize, values: Vec<T>) -> Self {
        assert_eq!(values.len(), n * n, "metric table must be square");
        MetricTable {
            n,
            values,
            iterations: 0,
            residual: T::zero(),
            residual_trace: Vec::new(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[x * self.n + y]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn max_value(&self) -> T {
        self.values.iter().fold(T::zero(), |m, &v| m.max(v))
    }

    /// Largest `|d(x, y) - d(y, x)|`.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for x in 0..self.n {
            for y in 0..x {
                worst = worst.max((self.get(x, y) - self.get(y, x)).abs());
            }
        }
        worst
    }

    pub fn to_csv(&self) -> String {
        metric_csv(self.n, &self.values)
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "n_states": self.n,
            "values": self.values.chunks(self.n.max(1))
                .map(|row| row.iter().map(|v| v.as_f64()).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
            "iterations": self.iterations,
            "residual": self.residual.as_f64(),
        })
    }
}

fn metric_csv<T: Scalar>(n: usize, values: &[T]) -> String {
    let mut out = String::from(CSV_HEADER_METRIC);
    for x in 0..n {
        for y in 0..n {
            out.push_str(&format!("{x},{y},{}\n", fmt_real(values[x * n + y].as_f64())));
        }
    }
    out
}

/// Chronological metric in remaining-steps form: `values[k]` is the `n x n`
/// table for `k` remaining steps, `values[0]` is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ChronoMetricTable<T> {
    n: usize,
    values: Vec<Vec<T>>,
}

impl<T: Scalar> ChronoMetricTable<T> {
    pub fn n_states(&self) -> usize {
        self.n
    }

    /// Largest `k` stored.
    pub fn horizon(&self) -> usize {
        self.values.len() - 1
    }

    pub fn get(&self, k: usize, x: usize, y: usize) -> T {
        self.values[k][x * self.n + y]
    }

    pub fn layer(&self, k: usize) -> &[T] {
        &self.values[k]
    }

    pub fn layer_csv(&self, k: usize) -> String {
        metric_csv(self.n, &self.values[k])
    }
}

/// Optimal transport plan between two discrete distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// Row-major `mu.len() x nu.len()` masses.
    pub plan: Vec<f64>,
    pub cost: f64,
}

fn check_distribution<T: Scalar>(which: &'static str, p: &[T]) -> Result<(), MetricError> {
    if p.iter().any(|&x| !(x >= T::zero()) || !x.is_finite()) {
        return Err(MetricError::InvalidMass { which });
    }
    let sum: f64 = p.iter().map(|x| x.as_f64()).sum();
    if (sum - 1.0).abs() > 1e-9_f64.max(T::row_tolerance().as_f64() * p.len() as f64) {
        return Err(MetricError::NotNormalized { which, sum });
    }
    Ok(())
}

/// Exact 1-Wasserstein distance between `mu` and `nu` under `cost`
/// (row-major `mu.len() x nu.len()`).
pub fn wasserstein1<T: Scalar>(mu: &[T], nu: &[T], cost: &[T]) -> Result<T, MetricError> {
    Ok(T::of(transport(mu, nu, cost)?.cost))
}

/// Solves the transport problem by successive shortest augmenting paths on
/// the bipartite graph `source -> supplies -> demands -> sink`.
pub fn transport<T: Scalar>(mu: &[T], nu: &[T], cost: &[T]) -> Result<TransportPlan, MetricError> {
    check_distribution("mu", mu)?;
    check_distribution("nu", nu)?;
    let (rows, cols) = (mu.len(), nu.len());
    if cost.len() != rows * cols || cost.iter().any(|&c| !(c >= T::zero()) || !c.is_finite()) {
        return Err(MetricError::Cost { rows, cols });
    }
    let src: Vec<usize> = (0..rows).filter(|&i| mu[i] > T::zero()).collect();
    let dst: Vec<usize> = (0..cols).filter(|&j| nu[j] > T::zero()).collect();
    for support in [src.len(), dst.len()] {
        if support > MAX_SUPPORT {
            return Err(MetricError::SupportTooLarge(support));
        }
    }
    let supply: Vec<f64> = src.iter().map(|&i| mu[i].as_f64()).collect();
    let demand: Vec<f64> = dst.iter().map(|&j| nu[j].as_f64()).collect();
    let sub_cost: Vec<f64> = src
        .iter()
        .flat_map(|&i| dst.iter().map(move |&j| cost[i * cols + j].as_f64()))
        .collect();
    let flow = min_cost_transport(&supply, &demand, &sub_cost);

    let mut plan = vec![0.0; rows * cols];
    let mut total = 0.0;
    for (a, &i) in src.iter().enumerate() {
        for (b, &j) in dst.iter().enumerate() {
            let f = flow[a * dst.len() + b];
            plan[i * cols + j] = f;
            total += f * sub_cost[a * dst.len() + b];
        }
    }
    let mut worst = 0.0f64;
    for i in 0..rows {
        let out: f64 = plan[i * cols..(i + 1) * cols].iter().sum();
        worst = worst.max((out - mu[i].as_f64()).abs());
    }
    for j in 0..cols {
        let inflow: f64 = (0..rows).map(|i| plan[i * cols + j]).sum();
        worst = worst.max((inflow - nu[j].as_f64()).abs());
    }
    if worst > 1e-9 {
        return Err(MetricError::Marginals(worst));
    }
    Ok(TransportPlan { plan, cost: total })
}

struct Arc {
    to: usize,
    rev: usize,
    cap: f64,
    cost: i128,
}

struct FlowGraph {
    adj: Vec<Vec<Arc>>,
}

impl FlowGraph {
    fn add_arc(&mut self, from: usize, to: usize, cap: f64, cost: i128) -> (usize, usize) {
        let fwd = self.adj[from].len();
        let bwd = self.adj[to].len();
        self.adj[from].push(Arc {
            to,
            rev: bwd,
            cap,
            cost,
        });
        self.adj[to].push(Arc {
            to: from,
            rev: fwd,
            cap: 0.0,
            cost: -cost,
        });
        (from, fwd)
    }
}

/// Min-cost flow with integer-scaled costs and real capacities. Returns the
/// row-major plan. Dijkstra with node potentials keeps reduced costs
/// non-negative; all original costs are non-negative, so zero potentials are
/// a valid start.
fn min_cost_transport(supply: &[f64], demand: &[f64], cost: &[f64]) -> Vec<f64> {
    let (m, n) = (supply.len(), demand.len());
    let source = m + n;
    let sink = m + n + 1;
    let nodes = m + n + 2;
    let mut g = FlowGraph {
        adj: (0..nodes).map(|_| Vec::new()).collect(),
    };
    for (i, &s) in supply.iter().enumerate() {
        g.add_arc(source, i, s, 0);
    }
    for (j, &d) in demand.iter().enumerate() {
        g.add_arc(m + j, sink, d, 0);
    }
    let mut middle = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let c = (cost[i * n + j] * COST_SCALE).round() as i128;
            middle.push(g.add_arc(i, m + j, f64::INFINITY, c));
        }
    }

    let mut potential = vec![0i128; nodes];
    let mut dist = vec![i128::MAX; nodes];
    let mut done = vec![false; nodes];
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; nodes];
    loop {
        dist.fill(i128::MAX);
        done.fill(false);
        prev.fill(None);
        dist[source] = 0;
        // dense Dijkstra; stop once the sink is settled
        loop {
            let mut u = None;
            for v in 0..nodes {
                if !done[v] && dist[v] != i128::MAX && u.is_none_or(|w: usize| dist[v] < dist[w]) {
                    u = Some(v);
                }
            }
            let Some(u) = u else { break };
            done[u] = true;
            if u == sink {
                break;
            }
            for (k, arc) in g.adj[u].iter().enumerate() {
                if arc.cap <= 0.0 || done[arc.to] {
                    continue;
                }
                let reduced = arc.cost + potential[u] - potential[arc.to];
                debug_assert!(reduced >= 0, "negative reduced cost");
                let cand = dist[u] + reduced;
                if cand < dist[arc.to] {
                    dist[arc.to] = cand;
                    prev[arc.to] = Some((u, k));
                }
            }
        }
        if !done[sink] {
            break;
        }
        let reach = dist[sink];
        for v in 0..nodes {
            if done[v] {
                potential[v] += dist[v] - reach;
            }
        }
        let mut push = f64::INFINITY;
        let mut v = sink;
        while let Some((u, k)) = prev[v] {
            push = push.min(g.adj[u][k].cap);
            v = u;
        }
        let mut v = sink;
        while let Some((u, k)) = prev[v] {
            let rev = g.adj[u][k].rev;
            let to = g.adj[u][k].to;
            g.adj[u][k].cap -= push;
            g.adj[to][rev].cap += push;
            v = u;
        }
    }
    middle
        .iter()
        .map(|&(i, k)| {
            let arc = &g.adj[i][k];
            g.adj[arc.to][arc.rev].cap
        })
        .collect()
}

/// Iteration budget from the contraction bound:
/// `ceil(log(tol (1 - gamma) / r_range) / log gamma) + 8`.
pub fn default_max_iter(gamma: f64, tol: f64, reward_range: f64) -> usize {
    if gamma <= 0.0 || reward_range <= 0.0 {
        return 8;
    }
    let t = ((tol * (1.0 - gamma) / reward_range).ln() / gamma.ln()).ceil();
    t.max(0.0) as usize + 8
}

fn reward_gaps<T: Scalar>(r: &[T]) -> Vec<T> {
    let n = r.len();
    let mut out = vec![T::zero(); n * n];
    for x in 0..n {
        for y in 0..n {
            out[x * n + y] = (r[x] - r[y]).abs();
        }
    }
    out
}

/// Spread `max r^pi - min r^pi` of the policy reward.
pub fn reward_range<T: Scalar>(mdp: &TabularMdp<T>, pi: &Policy<T>) -> Result<T, MetricError> {
    let r = policy_reward(mdp, pi)?;
    let hi = r.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lo = r.iter().fold(T::infinity(), |m, &v| m.min(v));
    Ok(hi - lo)
}

/// `P d P^T` for row-major `n x n` matrices.
fn independent_coupling<T: Scalar>(p: &[T], d: &[T], n: usize) -> Vec<T> {
    let mut dp = vec![T::zero(); n * n];
    // dp[x'][y] = sum_y' d[x'][y'] P[y][y']
    for xp in 0..n {
        for y in 0..n {
            dp[xp * n + y] = (0..n).map(|yp| d[xp * n + yp] * p[y * n + yp]).sum();
        }
    }
    let mut out = vec![T::zero(); n * n];
    for x in 0..n {
        for y in 0..n {
            out[x * n + y] = (0..n).map(|xp| p[x * n + xp] * dp[xp * n + y]).sum();
        }
    }
    out
}

/// The policy-induced quantities every operator needs.
struct Dynamics<T> {
    n: usize,
    gamma: T,
    gaps: Vec<T>,
    p: Vec<T>,
}

impl<T: Scalar> Dynamics<T> {
    fn new(mdp: &TabularMdp<T>, pi: &Policy<T>) -> Result<Self, MetricError> {
        mdp.validate()?;
        let r = policy_reward(mdp, pi)?;
        Ok(Dynamics {
            n: mdp.n_states(),
            gamma: mdp.gamma(),
            gaps: reward_gaps(&r),
            p: policy_transition(mdp, pi)?,
        })
    }

    fn mico(&self, d: &[T]) -> Vec<T> {
        let coupled = independent_coupling(&self.p, d, self.n);
        self.gaps
            .iter()
            .zip(coupled)
            .map(|(&g, c)| g + self.gamma * c)
            .collect()
    }

    fn bisim(&self, d: &[T]) -> Result<Vec<T>, MetricError> {
        let n = self.n;
        let mut out = vec![T::zero(); n * n];
        for x in 0..n {
            // W(P_x, P_x) = 0 because every iterate vanishes on the diagonal
            for y in x + 1..n {
                let w = wasserstein1(&self.p[x * n..(x + 1) * n], &self.p[y * n..(y + 1) * n], d)?;
                let v = self.gaps[x * n + y] + self.gamma * w;
                out[x * n + y] = v;
                out[y * n + x] = v;
            }
        }
        Ok(out)
    }
}

/// One application of the MICo operator to a row-major table.
pub fn mico_operator<T: Scalar>(mdp: &TabularMdp<T>, pi: &Policy<T>, d: &[T]) -> Result<Vec<T>, MetricError> {
    Ok(Dynamics::new(mdp, pi)?.mico(d))
}

/// One application of the pi-bisimulation operator to a row-major table.
pub fn bisim_operator<T: Scalar>(mdp: &TabularMdp<T>, pi: &Policy<T>, d: &[T]) -> Result<Vec<T>, MetricError> {
    Dynamics::new(mdp, pi)?.bisim(d)
}

fn iterate<T: Scalar>(
    n: usize,
    tol: T,
    max_iter: usize,
    mut step: impl FnMut(&[T]) -> Result<Vec<T>, MetricError>,
) -> Result<MetricTable<T>, MetricError> {
    if !(tol > T::zero()) {
        return Err(MetricError::Tolerance);
    }
    let mut d = vec![T::zero(); n * n];
    let mut trace = Vec::new();
    for it in 1..=max_iter {
        let next = step(&d)?;
        let change = sup_diff(&next, &d);
        trace.push(change);
        d = next;
        if change <= tol {
            return Ok(MetricTable {
                n,
                values: d,
                iterations: it,
                residual: change,
                residual_trace: trace,
            });
        }
    }
    Err(MetricError::NotConverged {
        iterations: max_iter,
        residual: trace.last().map_or(f64::INFINITY, |r| r.as_f64()),
        last: d.iter().map(|v| v.as_f64()).collect(),
    })
}

/// Least fixed point of `d(x,y) = |r_x - r_y| + gamma W_d(P_x, P_y)`,
/// iterated from zero.
pub fn bisim_fixed_point<T: Scalar>(
    mdp: &TabularMdp<T>,
    pi: &Policy<T>,
    tol: T,
    max_iter: usize,
) -> Result<MetricTable<T>, MetricError> {
    let dynamics = Dynamics::new(mdp, pi)?;
    iterate(dynamics.n, tol, max_iter, |d| dynamics.bisim(d))
}

/// Fixed point of `d(x,y) = |r_x - r_y| + gamma E[d(x', y')]` with `x'` and
/// `y'` drawn independently from `P_x` and `P_y`.
pub fn mico_fixed_point<T: Scalar>(
    mdp: &TabularMdp<T>,
    pi: &Policy<T>,
    tol: T,
    max_iter: usize,
) -> Result<MetricTable<T>, MetricError> {
    let dynamics = Dynamics::new(mdp, pi)?;
    iterate(dynamics.n, tol, max_iter, |d| Ok(dynamics.mico(d)))
}

/// Runs [`mico_fixed_point`] with the default tolerance and budget.
pub fn mico_default<T: Scalar>(mdp: &TabularMdp<T>, pi: &Policy<T>) -> Result<MetricTable<T>, MetricError> {
    let range = reward_range(mdp, pi)?.as_f64();
    let budget = default_max_iter(mdp.gamma().as_f64(), DEFAULT_TOL, range);
    mico_fixed_point(mdp, pi, T::of(DEFAULT_TOL), budget)
}

/// Remaining-steps chronological metric for `k = 0..=horizon`.
pub fn chrono_fixed_point<T: Scalar>(
    mdp: &TabularMdp<T>,
    pi: &Policy<T>,
    horizon: usize,
) -> Result<ChronoMetricTable<T>, MetricError> {
    let dynamics = Dynamics::new(mdp, pi)?;
    let n = dynamics.n;
    let mut values = Vec::with_capacity(horizon + 1);
    values.push(vec![T::zero(); n * n]);
    for k in 1..=horizon {
        let next = dynamics.mico(&values[k - 1]);
        values.push(next);
    }
    Ok(ChronoMetricTable { n, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::random_mdp;
    use approx::assert_abs_diff_eq;

    fn absorbing_pair(gamma: f64) -> TabularMdp<f64> {
        TabularMdp::new(
            vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
            vec![vec![1.0], vec![0.0]],
            gamma,
        )
        .unwrap()
    }

    #[test]
    fn wasserstein_examples() {
        let cost = [0.0, 1.5, 1.5, 0.0];
        assert_eq!(wasserstein1(&[0.3, 0.7], &[0.3, 0.7], &cost).unwrap(), 0.0);
        let cost3 = [0.0, 1.0, 2.0, 1.0, 0.0, 3.0, 2.0, 3.0, 0.0];
        let v = wasserstein1(&[0.0, 0.0, 1.0], &[0.0, 1.0, 0.0], &cost3).unwrap();
        assert_abs_diff_eq!(v, 3.0, epsilon = 1e-15);
        let v = wasserstein1(&[0.5, 0.5], &[1.0, 0.0], &[0.0, 9.0, 2.0, 9.0]).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn wasserstein_rejects_bad_input() {
        assert!(matches!(
            wasserstein1(&[0.5, 0.4], &[1.0, 0.0], &[0.0; 4]),
            Err(MetricError::NotNormalized { which: "mu", .. })
        ));
        assert!(matches!(
            wasserstein1(&[1.0, 0.0], &[1.0, 0.0], &[0.0, -1.0, 0.0, 0.0]),
            Err(MetricError::Cost { .. })
        ));
        let big = vec![1.0 / 65.0; 65];
        assert_eq!(
            wasserstein1(&big, &big, &vec![0.0; 65 * 65]),
            Err(MetricError::SupportTooLarge(65))
        );
    }

    #[test]
    fn transport_plan_is_feasible() {
        let mu = [0.2, 0.3, 0.5];
        let nu = [0.6, 0.1, 0.3];
        let cost = [0.1, 2.0, 0.4, 0.9, 0.3, 1.1, 0.0, 0.7, 0.2];
        let t = transport(&mu, &nu, &cost).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(t.plan[i * 3..i * 3 + 3].iter().sum::<f64>(), mu[i], epsilon = 1e-12);
        }
        assert!(t.plan.iter().all(|&f| f >= 0.0));
    }

    #[test]
    fn bisim_examples() {
        let gaps = bisim_fixed_point(&absorbing_pair(0.0), &Policy::uniform(2, 1), 1e-10, 10).unwrap();
        assert_eq!(gaps.get(0, 1), 1.0);
        let t = bisim_fixed_point(&absorbing_pair(0.9), &Policy::uniform(2, 1), 1e-10, 400).unwrap();
        assert_abs_diff_eq!(t.get(0, 1), 10.0, epsilon = 1e-8);
        assert_eq!(t.get(0, 0), 0.0);
        assert!(t.residual <= 1e-10);

        // states 0 and 1 share dynamics and reward
        let twin = TabularMdp::new(
            vec![
                vec![vec![0.0, 0.0, 1.0]],
                vec![vec![0.0, 0.0, 1.0]],
                vec![vec![0.5, 0.5, 0.0]],
            ],
            vec![vec![0.5], vec![0.5], vec![0.0]],
            0.9,
        )
        .unwrap();
        let t = bisim_fixed_point(&twin, &Policy::uniform(3, 1), 1e-10, 500).unwrap();
        assert_eq!(t.get(0, 1), 0.0);
        assert!(t.get(0, 2) > 0.0);
    }

    #[test]
    fn non_convergence_carries_last_iterate() {
        let err = mico_fixed_point(&absorbing_pair(0.9), &Policy::uniform(2, 1), 1e-10, 3).unwrap_err();
        match err {
            MetricError::NotConverged { iterations, last, .. } => {
                assert_eq!(iterations, 3);
                assert_abs_diff_eq!(last[1], 1.0 + 0.9 + 0.81, epsilon = 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mico_examples() {
        let t = mico_fixed_point(&absorbing_pair(0.0), &Policy::uniform(2, 1), 1e-10, 10).unwrap();
        assert_eq!(t.values(), &[0.0, 1.0, 1.0, 0.0]);
        let t = mico_fixed_point(&absorbing_pair(0.9), &Policy::uniform(2, 1), 1e-10, 400).unwrap();
        assert_abs_diff_eq!(t.get(0, 1), 10.0, epsilon = 1e-8);
        assert_eq!(t.get(1, 1), 0.0);
    }

    /// Independent naive unrolling: 50 operator applications written out
    /// with explicit four-index sums.
    fn naive_mico(p: &[Vec<f64>], r: &[f64], gamma: f64, steps: usize) -> Vec<Vec<f64>> {
        let n = r.len();
        let mut d = vec![vec![0.0; n]; n];
        for _ in 0..steps {
            let mut next = vec![vec![0.0; n]; n];
            for x in 0..n {
                for y in 0..n {
                    let mut e = 0.0;
                    for xp in 0..n {
                        for yp in 0..n {
                            e += p[x][xp] * p[y][yp] * d[xp][yp];
                        }
                    }
                    next[x][y] = (r[x] - r[y]).abs() + gamma * e;
                }
            }
            d = next;
        }
        d
    }

    #[test]
    fn mico_stochastic_self_distance() {
        let mdp = TabularMdp::new(
            vec![
                vec![vec![0.5, 0.5, 0.0]],
                vec![vec![0.0, 0.2, 0.8]],
                vec![vec![0.3, 0.0, 0.7]],
            ],
            vec![vec![1.0], vec![0.0], vec![0.4]],
            0.5,
        )
        .unwrap();
        let pi = Policy::uniform(3, 1);
        let t = mico_fixed_point(&mdp, &pi, 1e-13, 200).unwrap();
        let p = vec![vec![0.5, 0.5, 0.0], vec![0.0, 0.2, 0.8], vec![0.3, 0.0, 0.7]];
        let naive = naive_mico(&p, &[1.0, 0.0, 0.4], 0.5, 50);
        assert!(t.get(0, 0) > 0.0);
        for x in 0..3 {
            for y in 0..3 {
                assert_abs_diff_eq!(t.get(x, y), naive[x][y], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn chrono_examples() {
        let pi = Policy::uniform(2, 1);
        let c = chrono_fixed_point(&absorbing_pair(0.9), &pi, 0).unwrap();
        assert_eq!(c.layer(0), &[0.0; 4]);
        let c = chrono_fixed_point(&absorbing_pair(0.9), &pi, 2).unwrap();
        assert_eq!(c.get(1, 0, 1), 1.0);
        assert_abs_diff_eq!(c.get(2, 0, 1), 1.9, epsilon = 1e-15);
        assert_eq!(c.horizon(), 2);
    }

    #[test]
    fn chrono_approaches_mico() {
        let mdp = random_mdp::<f64>(6, 2, 3, 0.8, 4).unwrap();
        let pi = Policy::uniform(6, 2);
        let mico = mico_default(&mdp, &pi).unwrap();
        let range = reward_range(&mdp, &pi).unwrap();
        let c = chrono_fixed_point(&mdp, &pi, 30).unwrap();
        for k in 0..=30 {
            let gap = sup_diff(c.layer(k), mico.values());
            assert!(gap <= 0.8f64.powi(k as i32) * range / 0.2 + 1e-9, "k={k} gap={gap}");
        }
    }

    #[test]
    fn contraction_and_dominance() {
        for seed in 0..5 {
            let mdp = random_mdp::<f64>(7, 3, 3, 0.9, seed).unwrap();
            let pi = Policy::random(7, 3, seed);
            let range = reward_range(&mdp, &pi).unwrap();
            let budget = default_max_iter(0.9, 1e-10, range);
            let mico = mico_fixed_point(&mdp, &pi, 1e-10, budget).unwrap();
            let bisim = bisim_fixed_point(&mdp, &pi, 1e-10, budget).unwrap();
            for table in [&mico, &bisim] {
                for w in table.residual_trace.windows(2) {
                    assert!(w[1] <= 0.9 * w[0] + 1e-12);
                }
                assert!(table.asymmetry() <= 1e-10);
                assert!(table.values().iter().all(|&v| v >= 0.0));
            }
            for (b, m) in bisim.values().iter().zip(mico.values()) {
                assert!(*b <= m + 1e-9);
            }
            // one more application barely moves the fixed point
            let again = mico_operator(&mdp, &pi, mico.values()).unwrap();
            assert!(sup_diff(&again, mico.values()) <= 1e-10);
            let again = bisim_operator(&mdp, &pi, bisim.values()).unwrap();
            assert!(sup_diff(&again, bisim.values()) <= 1e-10);
        }
    }

    #[test]
    fn budget_formula() {
        assert_eq!(default_max_iter(0.0, 1e-10, 1.0), 8);
        assert_eq!(default_max_iter(0.9, 1e-10, 0.0), 8);
        let expected = ((1e-10f64 * 0.1).ln() / 0.9f64.ln()).ceil() as usize + 8;
        assert_eq!(default_max_iter(0.9, 1e-10, 1.0), expected);
    }

    #[test]
    fn csv_and_json_exports() {
        let t = mico_fixed_point(&absorbing_pair(0.9), &Policy::uniform(2, 1), 1e-10, 400).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("x,y,value\n"));
        assert_eq!(csv.lines().count(), 5);
        let j = t.to_json();
        assert_eq!(j["n_states"], 2);
        assert!(j["values"][0][1].as_f64().unwrap() > 9.99);
    }
}
