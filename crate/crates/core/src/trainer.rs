//! The SCR representation learner: state encoder `phi`, chronological
//! encoder `psi`, the temporal head `m_hat`, their losses, EMA targets and the
//! training loop.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::distances::{self, IqeShape};
use crate::exact_metrics::{self, MetricError, MetricTable};
use crate::grad::{AdamConfig, GradError, Gradients, ParamStore, Tape, Tensor, Var};
use crate::io::fmt_real;
use crate::mdp::{self, ChronoSample, MdpError, Policy, TabularMdp, Trajectory};
use crate::rng;
use crate::temporal;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("training diverged at step {step}: total loss {total}")]
    Diverged { step: usize, total: f64 },
}

/// Right-hand side used by the upper-bound loss for the partner rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpperBoundForm {
    /// The partner's sampled reward sum.
    #[default]
    SampledReturn,
    /// `|m_hat|` of the partner pair.
    PartnerEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Embedding width, `iqe_components * l`.
    pub n_dim: usize,
    pub iqe_components: usize,
    pub hidden: usize,
    pub batch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Inclusive gap range between `x_i` and `x_j`; `[1, min(10, horizon / 2)]` when unset.
    pub step_range: Option<[usize; 2]>,
    pub alpha_phi: f64,
    pub eps_greedy: f64,
    pub l_up_form: UpperBoundForm,
    pub optimizer: Optimizer,
    /// Transitions per replay trajectory.
    pub horizon: usize,
    pub n_trajectories: usize,
    /// Steps between replay refreshes.
    pub refresh_every: usize,
    /// Steps between metric-recovery snapshots.
    pub eval_every: usize,
    /// Half-width of the uniform initializer for the state table.
    pub init_scale: f64,
    pub divergence_limit: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            n_dim: 16,
            iqe_components: 4,
            hidden: 64,
            batch: 128,
            lr: 1e-4,
            steps: 20_000,
            step_range: None,
            alpha_phi: 0.05,
            eps_greedy: 0.3,
            l_up_form: UpperBoundForm::SampledReturn,
            optimizer: Optimizer::Adam,
            horizon: 50,
            n_trajectories: 32,
            refresh_every: 500,
            eval_every: 1000,
            init_scale: 0.5,
            divergence_limit: 1e8,
        }
    }
}

impl TrainerConfig {
    pub fn step_range(&self) -> (usize, usize) {
        match self.step_range {
            Some([lo, hi]) => (lo, hi),
            None => (1, (self.horizon / 2).clamp(1, 10)),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.n_dim == 0 || self.iqe_components == 0 || !self.n_dim.is_multiple_of(self.iqe_components) {
            return fail("n_dim must be a positive multiple of iqe_components");
        }
        if self.hidden == 0 || self.batch == 0 || self.n_trajectories == 0 {
            return fail("hidden, batch and n_trajectories must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive and finite");
        }
        if !(self.alpha_phi > 0.0 && self.alpha_phi <= 1.0) {
            return fail("alpha_phi must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.eps_greedy) {
            return fail("eps_greedy must lie in [0, 1]");
        }
        if self.horizon < 2 {
            return fail("horizon must be at least 2");
        }
        let (lo, hi) = self.step_range();
        if lo < 1 || hi < lo || hi >= self.horizon {
            return fail("step_range must satisfy 1 <= min <= max < horizon");
        }
        if self.refresh_every == 0 || self.eval_every == 0 {
            return fail("refresh_every and eval_every must be positive");
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return fail("init_scale must be positive and finite");
        }
        if !(self.divergence_limit > 0.0) {
            return fail("divergence_limit must be positive");
        }
        Ok(())
    }
}

pub const PHI: &str = "phi";
pub const TARGET_PHI: &str = "target_phi";
pub const PSI_W1: &str = "psi.w1";
pub const PSI_B1: &str = "psi.b1";
pub const PSI_W2: &str = "psi.w2";
pub const PSI_B2: &str = "psi.b2";
pub const RAW_ALPHA: &str = "m.raw_alpha";

/// State table: `phi(x)` is row `x`, i.e. a linear map of the one-hot state.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiEncoder {
    pub table: Tensor,
}

impl PhiEncoder {
    pub fn embed(&self, state: usize) -> &[f64] {
        self.table.row(state)
    }

    pub fn n_states(&self) -> usize {
        self.table.rows()
    }

    /// `d_hat(phi(x), phi(y))`.
    pub fn distance(&self, x: usize, y: usize) -> f64 {
        let (a, b) = (self.embed(x), self.embed(y));
        distances::d_hat_radicand(a, b).max(0.0).sqrt()
    }
}

/// Two affine layers with a rectified-linear hidden layer over `[phi_i; phi_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiNetwork {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl PsiNetwork {
    pub fn forward(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let input: Vec<f64> = a.iter().chain(b).copied().collect();
        let hidden: Vec<f64> = (0..self.w1.cols())
            .map(|h| {
                let z: f64 = input.iter().enumerate().map(|(i, x)| x * self.w1.get(i, h)).sum();
                (z + self.b1.get(0, h)).max(0.0)
            })
            .collect();
        (0..self.w2.cols())
            .map(|o| {
                hidden
                    .iter()
                    .enumerate()
                    .map(|(h, x)| x * self.w2.get(h, o))
                    .sum::<f64>()
                    + self.b2.get(0, o)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetPhi {
    pub table: Tensor,
    pub alpha_phi: f64,
}

/// IQE head with mixing weight `sigmoid(raw_alpha)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MHead {
    pub raw_alpha: f64,
    pub k: usize,
    pub l: usize,
}

impl MHead {
    pub fn alpha(&self) -> f64 {
        1.0 / (1.0 + (-self.raw_alpha).exp())
    }

    pub fn evaluate(&self, a: &[f64], b: &[f64]) -> f64 {
        let shape = IqeShape::new(self.k, self.l, self.alpha()).expect("alpha in (0, 1)");
        distances::iqe(a, b, &shape).expect("dimension matches the head")
    }
}

/// `target <- alpha_phi * source + (1 - alpha_phi) * target`.
pub fn ema_update(target: &mut TargetPhi, source: &PhiEncoder) -> Result<(), TrainError> {
    if target.table.shape() != source.table.shape() {
        return Err(TrainError::Grad(GradError::Shape {
            op: "ema_update",
            left: target.table.shape(),
            right: source.table.shape(),
        }));
    }
    let a = target.alpha_phi;
    for (t, &s) in target.table.data_mut().iter_mut().zip(source.table.data()) {
        *t = a * s + (1.0 - a) * *t;
    }
    Ok(())
}

/// Trainable parameters plus the EMA target table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScrModel {
    pub params: ParamStore,
    pub target: TargetPhi,
    pub k: usize,
    pub l: usize,
}

/// Handles to one model's parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub struct NetVars {
    pub phi: Var,
    pub target_phi: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub raw_alpha: Var,
    pub k: usize,
    pub l: usize,
}

impl ScrModel {
    pub fn init(n_states: usize, cfg: &TrainerConfig, seed: u64) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = rng::generator(seed, "trainer.init");
        let mut uniform = |rows: usize, cols: usize, scale: f64| {
            let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
            Tensor::new(rows, cols, data)
        };
        let n = cfg.n_dim;
        let phi = PhiEncoder {
            table: uniform(n_states, n, cfg.init_scale),
        };
        let psi = PsiNetwork {
            w1: uniform(2 * n, cfg.hidden, (1.0 / (2 * n) as f64).sqrt()),
            b1: Tensor::zeros(1, cfg.hidden),
            w2: uniform(cfg.hidden, n, (1.0 / cfg.hidden as f64).sqrt()),
            b2: Tensor::zeros(1, n),
        };
        let head = MHead {
            raw_alpha: 0.0,
            k: cfg.iqe_components,
            l: n / cfg.iqe_components,
        };
        let target = TargetPhi {
            table: phi.table.clone(),
            alpha_phi: cfg.alpha_phi,
        };
        Ok(ScrModel::from_parts(phi, psi, head, target))
    }

    pub fn from_parts(phi: PhiEncoder, psi: PsiNetwork, head: MHead, target: TargetPhi) -> Self {
        let mut params = ParamStore::new();
        params.insert(PHI, phi.table);
        params.insert(PSI_W1, psi.w1);
        params.insert(PSI_B1, psi.b1);
        params.insert(PSI_W2, psi.w2);
        params.insert(PSI_B2, psi.b2);
        params.insert(RAW_ALPHA, Tensor::scalar(head.raw_alpha));
        ScrModel {
            params,
            target,
            k: head.k,
            l: head.l,
        }
    }

    /// Same architecture and target, different trainable values.
    pub fn with_params(&self, params: ParamStore) -> Self {
        ScrModel {
            params,
            target: self.target.clone(),
            k: self.k,
            l: self.l,
        }
    }

    fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .expect("model parameters are fixed at construction")
    }

    pub fn phi(&self) -> PhiEncoder {
        PhiEncoder {
            table: self.param(PHI).clone(),
        }
    }

    pub fn psi(&self) -> PsiNetwork {
        PsiNetwork {
            w1: self.param(PSI_W1).clone(),
            b1: self.param(PSI_B1).clone(),
            w2: self.param(PSI_W2).clone(),
            b2: self.param(PSI_B2).clone(),
        }
    }

    pub fn m_head(&self) -> MHead {
        MHead {
            raw_alpha: self.param(RAW_ALPHA).item(),
            k: self.k,
            l: self.l,
        }
    }

    pub fn n_states(&self) -> usize {
        self.param(PHI).rows()
    }

    pub fn ema_update(&mut self) -> Result<(), TrainError> {
        let phi = self.phi();
        ema_update(&mut self.target, &phi)
    }

    /// Registers everything on `tape`. The target table is a leaf too, so any
    /// gradient leaking past a stop-gradient would show up under its name.
    pub fn bind(&self, tape: &mut Tape) -> NetVars {
        NetVars {
            phi: tape.param(PHI, self.param(PHI).clone()),
            target_phi: tape.param(TARGET_PHI, self.target.table.clone()),
            w1: tape.param(PSI_W1, self.param(PSI_W1).clone()),
            b1: tape.param(PSI_B1, self.param(PSI_B1).clone()),
            w2: tape.param(PSI_W2, self.param(PSI_W2).clone()),
            b2: tape.param(PSI_B2, self.param(PSI_B2).clone()),
            raw_alpha: tape.param(RAW_ALPHA, self.param(RAW_ALPHA).clone()),
            k: self.k,
            l: self.l,
        }
    }

    /// Parameters plus the target table as `{name: nested arrays}`.
    pub fn checkpoint(&self) -> Value {
        let mut value = self.params.to_checkpoint();
        value[TARGET_PHI] = json!(self.target.table.to_nested());
        value
    }

    /// Evaluates all losses; with `root`, also differentiates that loss.
    pub fn losses(
        &self,
        batch: &[ChronoSample<f64>],
        pairing: &Pairing,
        gamma: f64,
        form: UpperBoundForm,
        frozen: Option<&Frozen>,
        root: Option<LossKind>,
    ) -> Result<(LossValues, Frozen, Option<Gradients>), TrainError> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape);
        let nodes = build_losses(&mut tape, &net, batch, pairing, gamma, form, frozen)?;
        let values = nodes.values(&tape);
        let grads = match root {
            Some(kind) => Some(tape.backward(nodes.get(kind))?),
            None => None,
        };
        Ok((values, nodes.frozen, grads))
    }
}

/// Seeded pairings: `pool` permutes the `2B` concatenated pool of the state
/// loss, `pair` permutes the `B` samples for the other three losses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    pub pool: Vec<usize>,
    pub pair: Vec<usize>,
}

impl Pairing {
    pub fn sample(batch_len: usize, seed: u64) -> Self {
        let mut rng = rng::generator(seed, "trainer.pairing");
        let mut pool: Vec<usize> = (0..2 * batch_len).collect();
        let mut pair: Vec<usize> = (0..batch_len).collect();
        pool.shuffle(&mut rng);
        pair.shuffle(&mut rng);
        Pairing { pool, pair }
    }

    pub fn identity(batch_len: usize) -> Self {
        Pairing {
            pool: (0..2 * batch_len).collect(),
            pair: (0..batch_len).collect(),
        }
    }
}

/// Values of the gradient-blocked branches, per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frozen {
    pub phi_bootstrap: Vec<f64>,
    pub psi_bootstrap: Vec<f64>,
    pub up_bound: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Phi,
    Psi,
    Low,
    Up,
    Total,
}

pub const LOSS_KINDS: [LossKind; 5] = [
    LossKind::Phi,
    LossKind::Psi,
    LossKind::Low,
    LossKind::Up,
    LossKind::Total,
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossValues {
    pub phi: f64,
    pub psi: f64,
    pub low: f64,
    pub up: f64,
    pub total: f64,
}

impl LossValues {
    pub fn get(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Phi => self.phi,
            LossKind::Psi => self.psi,
            LossKind::Low => self.low,
            LossKind::Up => self.up,
            LossKind::Total => self.total,
        }
    }
}

pub struct LossNodes {
    pub phi: Var,
    pub psi: Var,
    pub low: Var,
    pub up: Var,
    pub total: Var,
    pub frozen: Frozen,
}

impl LossNodes {
    pub fn get(&self, kind: LossKind) -> Var {
        match kind {
            LossKind::Phi => self.phi,
            LossKind::Psi => self.psi,
            LossKind::Low => self.low,
            LossKind::Up => self.up,
            LossKind::Total => self.total,
        }
    }

    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            phi: tape.value(self.phi).item(),
            psi: tape.value(self.psi).item(),
            low: tape.value(self.low).item(),
            up: tape.value(self.up).item(),
            total: tape.value(self.total).item(),
        }
    }
}

fn check_batch(batch: &[ChronoSample<f64>], perm: &[usize], len: usize) -> Result<(), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let mut seen = vec![false; len];
    if perm.len() != len || perm.iter().any(|&p| p >= len || std::mem::replace(&mut seen[p], true)) {
        return Err(TrainError::Config(format!("pairing is not a permutation of 0..{len}")));
    }
    Ok(())
}

fn states(batch: &[ChronoSample<f64>], f: impl Fn(&ChronoSample<f64>) -> usize) -> Vec<usize> {
    batch.iter().map(f).collect()
}

fn permuted<T: Copy>(values: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&p| values[p]).collect()
}

/// Either evaluates `branch` behind a stop-gradient or substitutes `frozen`.
fn detached(
    tape: &mut Tape,
    frozen: Option<&[f64]>,
    len: usize,
    branch: impl FnOnce(&mut Tape) -> Result<Var, GradError>,
) -> Result<(Var, Vec<f64>), TrainError> {
    match frozen {
        Some(values) if values.len() == len => Ok((tape.constant(Tensor::column(values.to_vec())), values.to_vec())),
        Some(values) => Err(TrainError::Config(format!(
            "frozen branch has {} rows, expected {len}",
            values.len()
        ))),
        None => {
            let node = branch(tape)?;
            let blocked = tape.stop_gradient(node);
            Ok((blocked, tape.value(blocked).data().to_vec()))
        }
    }
}

fn psi_forward(tape: &mut Tape, net: &NetVars, a: Var, b: Var) -> Result<Var, GradError> {
    let input = tape.concatenate(a, b)?;
    let hidden = tape.affine(net.w1, net.b1, input)?;
    let hidden = tape.rectified_linear(hidden);
    tape.affine(net.w2, net.b2, hidden)
}

/// `m_hat(a, b) = alpha * max_i d_i + (1 - alpha) * mean_i d_i`, `B x 1`.
pub fn m_hat(tape: &mut Tape, net: &NetVars, a: Var, b: Var) -> Result<Var, GradError> {
    let comps = tape.interval_union(a, b, net.k, net.l)?;
    let max = tape.max_over_axis(comps);
    let mean = tape.mean_over_axis(comps);
    let alpha = tape.sigmoid(net.raw_alpha);
    let spread = tape.subtract(max, mean)?;
    let weighted = tape.multiply_broadcast(spread, alpha)?;
    tape.add(mean, weighted)
}

/// Mean of `(x - bound)^2` over rows where `x` is on the violating side.
fn masked_square(tape: &mut Tape, x: Var, bound: Var, above: bool) -> Result<Var, GradError> {
    let mask: Vec<f64> = tape
        .value(x)
        .data()
        .iter()
        .zip(tape.value(bound).data())
        .map(|(&v, &b)| {
            if (above && v > b) || (!above && v < b) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mask = tape.constant(Tensor::column(mask));
    let diff = tape.subtract(x, bound)?;
    let sq = tape.multiply(diff, diff)?;
    let masked = tape.multiply(sq, mask)?;
    Ok(tape.mean(masked))
}

fn squared_error(tape: &mut Tape, x: Var, target: Var) -> Result<Var, GradError> {
    let diff = tape.subtract(x, target)?;
    let sq = tape.multiply(diff, diff)?;
    Ok(tape.mean(sq))
}

/// State loss over the pool `[x_i; x_j]` paired by `pool_perm`:
/// `mean (d_hat(phi x, phi y) - |r_x - r_y| - gamma * sg d_hat(phi_bar x', phi_bar y'))^2`.
pub fn loss_phi(
    tape: &mut Tape,
    net: &NetVars,
    batch: &[ChronoSample<f64>],
    pool_perm: &[usize],
    gamma: f64,
    frozen: Option<&[f64]>,
) -> Result<(Var, Vec<f64>), TrainError> {
    check_batch(batch, pool_perm, 2 * batch.len())?;
    let mut pool = states(batch, |s| s.x_i);
    pool.extend(states(batch, |s| s.x_j));
    let mut next = states(batch, |s| s.x_i1);
    next.extend(states(batch, |s| s.x_j1));
    let mut rewards: Vec<f64> = batch.iter().map(|s| s.r_i).collect();
    rewards.extend(batch.iter().map(|s| s.r_j));

    let x = tape.gather_rows(net.phi, &pool)?;
    let y = tape.gather_rows(net.phi, &permuted(&pool, pool_perm))?;
    let dist = tape.d_hat(x, y)?;
    let (boot, used) = detached(tape, frozen, pool.len(), |t| {
        let xn = t.gather_rows(net.target_phi, &next)?;
        let yn = t.gather_rows(net.target_phi, &permuted(&next, pool_perm))?;
        t.d_hat(xn, yn)
    })?;
    let reward_gap = rewards
        .iter()
        .zip(permuted(&rewards, pool_perm))
        .map(|(a, b)| (a - b).abs())
        .collect();
    let reward_gap = tape.constant(Tensor::column(reward_gap));
    let boot = tape.scalar_multiply(boot, gamma);
    let target = tape.add(reward_gap, boot)?;
    Ok((squared_error(tape, dist, target)?, used))
}

/// Chronological loss: `psi(phi x_i, phi x_j)` against its partner, with the
/// bootstrap `psi(phi_bar x_{i+1}, phi_bar x_j)` gradient-blocked. Only the
/// first argument advances.
pub fn loss_psi(
    tape: &mut Tape,
    net: &NetVars,
    batch: &[ChronoSample<f64>],
    perm: &[usize],
    gamma: f64,
    frozen: Option<&[f64]>,
) -> Result<(Var, Vec<f64>), TrainError> {
    check_batch(batch, perm, batch.len())?;
    let xi = tape.gather_rows(net.phi, &states(batch, |s| s.x_i))?;
    let xj = tape.gather_rows(net.phi, &states(batch, |s| s.x_j))?;
    let psi = psi_forward(tape, net, xi, xj)?;
    let partner = tape.gather_rows(psi, perm)?;
    let dist = tape.d_hat(psi, partner)?;
    let (boot, used) = detached(tape, frozen, batch.len(), |t| {
        let next = t.gather_rows(net.target_phi, &states(batch, |s| s.x_i1))?;
        let goal = t.gather_rows(net.target_phi, &states(batch, |s| s.x_j))?;
        let psi_next = psi_forward(t, net, next, goal)?;
        let partner_next = t.gather_rows(psi_next, perm)?;
        t.d_hat(psi_next, partner_next)
    })?;
    let rewards: Vec<f64> = batch.iter().map(|s| s.r_i).collect();
    let reward_gap = rewards
        .iter()
        .zip(permuted(&rewards, perm))
        .map(|(a, b)| (a - b).abs())
        .collect();
    let reward_gap = tape.constant(Tensor::column(reward_gap));
    let boot = tape.scalar_multiply(boot, gamma);
    let target = tape.add(reward_gap, boot)?;
    Ok((squared_error(tape, dist, target)?, used))
}

fn m_of_batch(tape: &mut Tape, net: &NetVars, batch: &[ChronoSample<f64>]) -> Result<(Var, Var, Var), GradError> {
    let xi = tape.gather_rows(net.phi, &states(batch, |s| s.x_i))?;
    let xj = tape.gather_rows(net.phi, &states(batch, |s| s.x_j))?;
    let m = m_hat(tape, net, xi, xj)?;
    Ok((m, xi, xj))
}

/// `mean (m_hat - agg_rew)^2 [m_hat < agg_rew]`.
pub fn loss_low(tape: &mut Tape, net: &NetVars, batch: &[ChronoSample<f64>]) -> Result<Var, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let (m, _, _) = m_of_batch(tape, net, batch)?;
    let agg = tape.constant(Tensor::column(batch.iter().map(|s| s.agg_rew).collect()));
    Ok(masked_square(tape, m, agg, false)?)
}

/// `mean (|m_hat| - up)^2 [|m_hat| > up]` with
/// `up = sg(d_hat(phi x_i, phi y_i) + d_hat(phi x_j, phi y_j) + partner)`.
pub fn loss_up(
    tape: &mut Tape,
    net: &NetVars,
    batch: &[ChronoSample<f64>],
    perm: &[usize],
    form: UpperBoundForm,
    frozen: Option<&[f64]>,
) -> Result<(Var, Vec<f64>), TrainError> {
    check_batch(batch, perm, batch.len())?;
    let (m, xi, xj) = m_of_batch(tape, net, batch)?;
    let abs_m = tape.absolute(m);
    let (up, used) = detached(tape, frozen, batch.len(), |t| {
        let yi = t.gather_rows(xi, perm)?;
        let yj = t.gather_rows(xj, perm)?;
        let di = t.d_hat(xi, yi)?;
        let dj = t.d_hat(xj, yj)?;
        let detour = t.add(di, dj)?;
        let partner = match form {
            UpperBoundForm::SampledReturn => {
                let agg: Vec<f64> = batch.iter().map(|s| s.agg_rew).collect();
                t.constant(Tensor::column(permuted(&agg, perm)))
            }
            UpperBoundForm::PartnerEstimate => {
                let my = t.gather_rows(m, perm)?;
                t.absolute(my)
            }
        };
        t.add(detour, partner)
    })?;
    Ok((masked_square(tape, abs_m, up, true)?, used))
}

/// All four losses and their unweighted sum.
pub fn build_losses(
    tape: &mut Tape,
    net: &NetVars,
    batch: &[ChronoSample<f64>],
    pairing: &Pairing,
    gamma: f64,
    form: UpperBoundForm,
    frozen: Option<&Frozen>,
) -> Result<LossNodes, TrainError> {
    let (phi, phi_boot) = loss_phi(
        tape,
        net,
        batch,
        &pairing.pool,
        gamma,
        frozen.map(|f| &f.phi_bootstrap[..]),
    )?;
    let (psi, psi_boot) = loss_psi(
        tape,
        net,
        batch,
        &pairing.pair,
        gamma,
        frozen.map(|f| &f.psi_bootstrap[..]),
    )?;
    let low = loss_low(tape, net, batch)?;
    let (up, up_bound) = loss_up(tape, net, batch, &pairing.pair, form, frozen.map(|f| &f.up_bound[..]))?;
    let total = total_loss(tape, [phi, psi, low, up])?;
    Ok(LossNodes {
        phi,
        psi,
        low,
        up,
        total,
        frozen: Frozen {
            phi_bootstrap: phi_boot,
            psi_bootstrap: psi_boot,
            up_bound,
        },
    })
}

pub fn total_loss(tape: &mut Tape, parts: [Var; 4]) -> Result<Var, GradError> {
    let a = tape.add(parts[0], parts[1])?;
    let b = tape.add(parts[2], parts[3])?;
    tape.add(a, b)
}

/// Spearman rank correlation with average ranks for ties. When either side is
/// constant the correlation is undefined; it is reported as 1 if both sides
/// are constant and 0 otherwise.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs paired samples");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    match (va > 0.0, vb > 0.0) {
        (true, true) => cov / (va * vb).sqrt(),
        (false, false) => 1.0,
        _ => 0.0,
    }
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end) as f64 / 2.0 + 1.0;
        for &i in &order[start..=end] {
            out[i] = rank;
        }
        start = end + 1;
    }
    out
}

/// Agreement between learned `d_hat(phi x, phi y)` and an exact table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Recovery {
    /// Over all ordered pairs.
    pub mae: f64,
    /// Over ordered pairs with `x != y`.
    pub mae_off_diagonal: f64,
    /// Spearman over unordered pairs `x < y`.
    pub rank_corr: f64,
    pub max_exact: f64,
}

pub fn evaluate_metric_recovery(phi: &PhiEncoder, exact: &MetricTable<f64>) -> Result<Recovery, TrainError> {
    let n = exact.n_states();
    if phi.n_states() != n {
        return Err(TrainError::Config(format!(
            "encoder has {} states, exact table {n}",
            phi.n_states()
        )));
    }
    let (mut all, mut off) = (0.0, 0.0);
    let (mut learned, mut truth) = (Vec::new(), Vec::new());
    for x in 0..n {
        for y in 0..n {
            let err = (phi.distance(x, y) - exact.get(x, y)).abs();
            all += err;
            if x != y {
                off += err;
            }
            if x < y {
                learned.push(phi.distance(x, y));
                truth.push(exact.get(x, y));
            }
        }
    }
    Ok(Recovery {
        mae: all / (n * n) as f64,
        mae_off_diagonal: if n > 1 { off / (n * (n - 1)) as f64 } else { 0.0 },
        rank_corr: if learned.is_empty() {
            1.0
        } else {
            spearman(&learned, &truth)
        },
        max_exact: exact.max_value(),
    })
}

/// Constraint violations of the learned head on a held-out batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConstraintReport {
    pub samples: usize,
    /// `m_hat(x_i, x_j)` below the conditioned expected return of the
    /// behavior policy by more than the margin.
    pub lower_violations: usize,
    /// `m_hat(x_i, x_j)` below the sampled reward sum by more than the margin.
    pub lower_sampled_violations: usize,
    /// Upper-bound slack below `-margin`, with oracle distances in the detour.
    pub upper_violations: usize,
}

impl ConstraintReport {
    pub fn lower_rate(&self) -> f64 {
        self.lower_violations as f64 / self.samples.max(1) as f64
    }

    pub fn lower_sampled_rate(&self) -> f64 {
        self.lower_sampled_violations as f64 / self.samples.max(1) as f64
    }

    pub fn upper_rate(&self) -> f64 {
        self.upper_violations as f64 / self.samples.max(1) as f64
    }
}

/// Checks both bounds on `batch`, pairing sample `t` with `batch[perm[t]]`.
pub fn constraint_violations(
    model: &ScrModel,
    mdp: &TabularMdp<f64>,
    behavior: &Policy<f64>,
    batch: &[ChronoSample<f64>],
    perm: &[usize],
    oracle: &MetricTable<f64>,
    margin: f64,
) -> Result<ConstraintReport, TrainError> {
    check_batch(batch, perm, batch.len())?;
    let chain = temporal::Chain::new(mdp, behavior).map_err(|e| TrainError::Config(e.to_string()))?;
    let (phi, head) = (model.phi(), model.m_head());
    let m = |s: &ChronoSample<f64>| head.evaluate(phi.embed(s.x_i), phi.embed(s.x_j));
    let mut report = ConstraintReport {
        samples: batch.len(),
        lower_violations: 0,
        lower_sampled_violations: 0,
        upper_violations: 0,
    };
    for (s, &p) in batch.iter().zip(perm) {
        let partner = &batch[p];
        let m_xy = m(s);
        // the sample itself witnesses that x_j is reachable from x_i
        let expected = chain
            .conditioned_return(s.x_i, s.x_j, s.step_gap)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        if m_xy < expected.value - margin {
            report.lower_violations += 1;
        }
        if m_xy < s.agg_rew - margin {
            report.lower_sampled_violations += 1;
        }
        let check = temporal::check_upper_bound(
            m_xy,
            oracle.get(s.x_i, partner.x_i),
            oracle.get(s.x_j, partner.x_j),
            m(partner),
        );
        if check.slack < -margin {
            report.upper_violations += 1;
        }
    }
    Ok(report)
}

/// Constraint check on a batch drawn from fresh rollouts that training never saw.
pub fn held_out_constraints(
    report: &TrainingReport,
    mdp: &TabularMdp<f64>,
    behavior: &Policy<f64>,
    samples: usize,
    margin: f64,
) -> Result<ConstraintReport, TrainError> {
    let seed = rng::child_seed(report.seed, "trainer.held_out", 0);
    let replay = collect_replay(mdp, behavior, &report.config, seed, 0)?;
    let batch = mdp::sample_chrono_batch(&replay, samples, report.config.step_range(), mdp.gamma(), seed)?;
    let perm = Pairing::sample(samples, seed).pair;
    constraint_violations(&report.model, mdp, behavior, &batch, &perm, &report.exact, margin)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub step: usize,
    pub losses: LossValues,
    pub recovery: Option<Recovery>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Snapshot {
    pub step: usize,
    #[serde(flatten)]
    pub recovery: Recovery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub config: TrainerConfig,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    /// Metric recovery at step 0, every `eval_every` steps and at the end.
    pub snapshots: Vec<Snapshot>,
    pub model: ScrModel,
    /// Exact MICo table under the behavior policy.
    pub exact: MetricTable<f64>,
}

pub const REPORT_HEADER: &str = "step,loss_phi,loss_psi,loss_low,loss_up,total,mae,rank_corr\n";

impl TrainingReport {
    pub fn final_recovery(&self) -> Recovery {
        self.snapshots
            .last()
            .expect("the initial snapshot always exists")
            .recovery
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        for row in &self.rows {
            let l = &row.losses;
            let (mae, corr) = row.recovery.map_or((String::new(), String::new()), |r| {
                (fmt_real(r.mae), fmt_real(r.rank_corr))
            });
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.step,
                fmt_real(l.phi),
                fmt_real(l.psi),
                fmt_real(l.low),
                fmt_real(l.up),
                fmt_real(l.total),
                mae,
                corr
            ));
        }
        out
    }

    pub fn summary_json(&self) -> Value {
        let fin = self.final_recovery();
        json!({
            "seed": self.seed,
            "steps": self.rows.len(),
            "mae": fin.mae,
            "mae_off_diagonal": fin.mae_off_diagonal,
            "rank_corr": fin.rank_corr,
            "max_exact": fin.max_exact,
            "final_losses": self.rows.last().map(|r| r.losses),
            "snapshots": self.snapshots,
            "alpha": self.model.m_head().alpha(),
        })
    }
}

/// Fresh replay buffer of behavior-policy rollouts from uniform start states.
pub fn collect_replay(
    mdp: &TabularMdp<f64>,
    behavior: &Policy<f64>,
    cfg: &TrainerConfig,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Trajectory<f64>>, TrainError> {
    let mut starts = rng::generator(rng::child_seed(seed, "trainer.replay.start", epoch), "trainer.replay");
    (0..cfg.n_trajectories)
        .map(|t| {
            let start = starts.gen_range(0..mdp.n_states());
            let s = rng::child_seed(seed, "trainer.replay", epoch * cfg.n_trajectories as u64 + t as u64);
            Ok(mdp::sample_trajectory(mdp, behavior, start, cfg.horizon, s)?)
        })
        .collect()
}

/// Runs the representation learning loop: sample a chronological batch, take
/// one optimizer step on the total loss, soft-update the target encoder.
pub fn train(
    mdp: &TabularMdp<f64>,
    behavior: &Policy<f64>,
    cfg: &TrainerConfig,
    seed: u64,
) -> Result<TrainingReport, TrainError> {
    cfg.validate()?;
    mdp.validate()?;
    if behavior.n_states() != mdp.n_states() || behavior.n_actions() != mdp.n_actions() {
        return Err(TrainError::Config("behavior policy does not match the MDP".into()));
    }
    let gamma = mdp.gamma();
    let exact = exact_metrics::mico_default(mdp, behavior)?;
    let mut model = ScrModel::init(mdp.n_states(), cfg, seed)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let range = cfg.step_range();
    let mut replay = collect_replay(mdp, behavior, cfg, seed, 0)?;
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut snapshots = vec![Snapshot {
        step: 0,
        recovery: evaluate_metric_recovery(&model.phi(), &exact)?,
    }];

    for step in 1..=cfg.steps {
        if step > 1 && (step - 1) % cfg.refresh_every == 0 {
            replay = collect_replay(mdp, behavior, cfg, seed, ((step - 1) / cfg.refresh_every) as u64)?;
        }
        let batch = mdp::sample_chrono_batch(
            &replay,
            cfg.batch,
            range,
            gamma,
            rng::child_seed(seed, "trainer.batch", step as u64),
        )?;
        let pairing = Pairing::sample(batch.len(), rng::child_seed(seed, "trainer.pairing", step as u64));
        let (losses, _, grads) = model.losses(&batch, &pairing, gamma, cfg.l_up_form, None, Some(LossKind::Total))?;
        if !losses.total.is_finite() || losses.total > cfg.divergence_limit {
            return Err(TrainError::Diverged {
                step,
                total: losses.total,
            });
        }
        let grads = grads.expect("root requested").by_name;
        match cfg.optimizer {
            Optimizer::Adam => model.params.adam_step(&grads, &adam)?,
            Optimizer::Sgd => model.params.sgd_step(&grads, cfg.lr)?,
        }
        model.ema_update()?;
        let recovery = if step % cfg.eval_every == 0 || step == cfg.steps {
            let r = evaluate_metric_recovery(&model.phi(), &exact)?;
            snapshots.push(Snapshot { step, recovery: r });
            Some(r)
        } else {
            None
        };
        rows.push(ReportRow { step, losses, recovery });
    }
    Ok(TrainingReport {
        config: cfg.clone(),
        seed,
        rows,
        snapshots,
        model,
        exact,
    })
}
