//! Command-line front end: `exact`, `train`, `check` and `oracle`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::distances::{self, IqeShape};
use crate::exact_metrics::{self, MetricError};
use crate::grad::check_gradients;
use crate::io::{fmt_real, write_file, VERSION};
use crate::mdp::{self, MdpError, Policy, TabularMdp};
use crate::rng;
use crate::temporal::{self, Chain};
use crate::trainer::{self, Pairing, ScrModel, TrainError, TrainerConfig, UpperBoundForm, LOSS_KINDS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_CONVERGENCE: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Held-out samples and slack used for the constraint report after training.
pub const HELD_OUT_SAMPLES: usize = 1000;
pub const CONSTRAINT_MARGIN: f64 = 0.01;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("did not converge: {0}")]
    NonConvergence(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::NonConvergence(_) => EXIT_NON_CONVERGENCE,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

impl From<MdpError> for CliError {
    fn from(e: MdpError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::NotConverged { .. } => CliError::NonConvergence(e.to_string()),
            MetricError::Mdp(m) => CliError::Config(m.to_string()),
            other => CliError::Failure(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Divergence(e.to_string()),
            TrainError::Metric(m) => m.into(),
            TrainError::Config(_) | TrainError::Mdp(_) => CliError::Config(e.to_string()),
            TrainError::Grad(_) => CliError::Failure(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(format!("writing outputs: {e}"))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "scr",
    version,
    about = "Behavioral metrics and chronological representations on tabular MDPs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; defaults to the config's out_dir, then $SCR_OUT_DIR, then ./scr_out.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Exact MICo, bisimulation and chronological metric tables.
    Exact,
    /// Train the representation and report metric recovery.
    Train,
    /// Run the property suites.
    Check,
    /// Conditioned returns and lower-bound violation rates over random policies.
    Oracle,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Exact => "exact",
            Command::Train => "train",
            Command::Check => "check",
            Command::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpSource {
    Inline {
        mdp: TabularMdp<f64>,
    },
    /// Path relative to the config file.
    File {
        path: PathBuf,
    },
    FourRooms {
        size: usize,
        goal: [usize; 2],
        #[serde(default)]
        slip: f64,
        gamma: f64,
    },
    Random {
        n_states: usize,
        n_actions: usize,
        #[serde(default = "default_support")]
        support: usize,
        gamma: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_support() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Uniform,
    /// Greedy with respect to value iteration.
    Optimal,
    /// Mixes the optimal policy with uniform; `epsilon` defaults to the trainer's `eps_greedy`.
    EpsilonGreedy {
        #[serde(default)]
        epsilon: Option<f64>,
    },
    Explicit {
        probs: Vec<Vec<f64>>,
    },
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::EpsilonGreedy { epsilon: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub tol: f64,
    /// Iteration budget for fixed points; derived from `tol` when unset.
    pub max_iter: Option<usize>,
    /// Largest step count for chronological tables and conditioned returns.
    pub k_max: usize,
    pub n_policies: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            tol: exact_metrics::DEFAULT_TOL,
            max_iter: None,
            k_max: 5,
            n_policies: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub mdp: MdpSource,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub seed: u64,
    /// Not embedded in manifests, so outputs do not depend on where they are written.
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

impl Config {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: Config =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((config, base))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.trainer.validate()?;
        let o = &self.oracle;
        if !(o.tol > 0.0 && o.tol.is_finite()) {
            return Err(CliError::Config("oracle.tol must be positive and finite".into()));
        }
        if o.k_max == 0 || o.max_iter == Some(0) {
            return Err(CliError::Config(
                "oracle.k_max and oracle.max_iter must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Builds the MDP, resolving file paths against `base`.
    pub fn build_mdp(&self, base: &Path) -> Result<TabularMdp<f64>, CliError> {
        match &self.mdp {
            MdpSource::Inline { mdp } => {
                mdp.validate()?;
                Ok(mdp.clone())
            }
            MdpSource::File { path } => {
                let full = base.join(path);
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", full.display())))?;
                TabularMdp::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", full.display())))
            }
            MdpSource::FourRooms {
                size,
                goal,
                slip,
                gamma,
            } => Ok(mdp::four_rooms(*size, (goal[0], goal[1]), *slip, *gamma)?.mdp),
            MdpSource::Random {
                n_states,
                n_actions,
                support,
                gamma,
                seed,
            } => Ok(mdp::random_mdp(*n_states, *n_actions, *support, *gamma, *seed)?),
        }
    }

    pub fn build_policy(&self, mdp: &TabularMdp<f64>) -> Result<Policy<f64>, CliError> {
        let (n, a) = (mdp.n_states(), mdp.n_actions());
        let optimal = || -> Result<Policy<f64>, CliError> { Ok(mdp::value_iteration(mdp, self.oracle.tol)?.1) };
        let pi = match &self.policy {
            PolicySpec::Uniform => Policy::uniform(n, a),
            PolicySpec::Optimal => optimal()?,
            PolicySpec::EpsilonGreedy { epsilon } => {
                let eps = epsilon.unwrap_or(self.trainer.eps_greedy);
                if !(0.0..=1.0).contains(&eps) {
                    return Err(CliError::Config("epsilon must lie in [0, 1]".into()));
                }
                optimal()?.epsilon_greedy(eps)
            }
            PolicySpec::Explicit { probs } => Policy::new(probs.clone())?,
        };
        if pi.n_states() != n || pi.n_actions() != a {
            return Err(CliError::Config(format!(
                "policy is {}x{}, MDP has {n} states and {a} actions",
                pi.n_states(),
                pi.n_actions()
            )));
        }
        Ok(pi)
    }

    fn iteration_budget(&self, mdp: &TabularMdp<f64>, pi: &Policy<f64>) -> Result<usize, CliError> {
        match self.oracle.max_iter {
            Some(m) => Ok(m),
            None => {
                let range = exact_metrics::reward_range(mdp, pi)?;
                Ok(exact_metrics::default_max_iter(mdp.gamma(), self.oracle.tol, range))
            }
        }
    }
}

fn manifest(command: Command, config: &Config, extra: Value) -> String {
    let mut value = json!({
        "version": VERSION,
        "command": command.name(),
        "config": config,
    });
    if let (Value::Object(map), Value::Object(more)) = (&mut value, extra) {
        map.extend(more);
    }
    let mut text = serde_json::to_string_pretty(&value).expect("manifest is serializable");
    text.push('\n');
    text
}

fn to_json_text(value: &Value) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("finite values serialize");
    text.push('\n');
    text
}

fn out_dir(cli: &Cli, config: Option<&Config>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| config.and_then(|c| c.out_dir.clone()))
        .or_else(|| std::env::var_os("SCR_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("scr_out"))
}

/// Exact metric tables: `mico.csv`, `bisim.csv`, `chrono_{k}.csv`, `manifest.json`.
pub fn cmd_exact(config: &Config, base: &Path, out: &Path) -> Result<(), CliError> {
    let mdp = config.build_mdp(base)?;
    let pi = config.build_policy(&mdp)?;
    let budget = config.iteration_budget(&mdp, &pi)?;
    let tol = config.oracle.tol;
    let mico = exact_metrics::mico_fixed_point(&mdp, &pi, tol, budget)?;
    let bisim = exact_metrics::bisim_fixed_point(&mdp, &pi, tol, budget)?;
    let chrono = exact_metrics::chrono_fixed_point(&mdp, &pi, config.oracle.k_max)?;
    write_file(out, "mico.csv", &mico.to_csv())?;
    write_file(out, "bisim.csv", &bisim.to_csv())?;
    for k in 1..=config.oracle.k_max {
        write_file(out, &format!("chrono_{k}.csv"), &chrono.layer_csv(k))?;
    }
    let extra = json!({
        "iteration_budget": budget,
        "mico": {"iterations": mico.iterations, "residual": mico.residual},
        "bisim": {"iterations": bisim.iterations, "residual": bisim.residual},
        "chrono": {"k_max": config.oracle.k_max},
    });
    write_file(out, "manifest.json", &manifest(Command::Exact, config, extra))?;
    Ok(())
}

/// Training: `report.csv`, `summary.json`, `checkpoint.json`.
pub fn cmd_train(config: &Config, base: &Path, out: &Path) -> Result<(), CliError> {
    let mdp = config.build_mdp(base)?;
    let behavior = config.build_policy(&mdp)?;
    let report = trainer::train(&mdp, &behavior, &config.trainer, config.seed)?;
    let constraints = trainer::held_out_constraints(&report, &mdp, &behavior, HELD_OUT_SAMPLES, CONSTRAINT_MARGIN)?;
    write_file(out, "report.csv", &report.to_csv())?;
    let extra = json!({
        "summary": report.summary_json(),
        "constraints": {
            "margin": CONSTRAINT_MARGIN,
            "samples": constraints.samples,
            "lower_violations": constraints.lower_violations,
            "lower_rate": constraints.lower_rate(),
            "lower_sampled_violations": constraints.lower_sampled_violations,
            "lower_sampled_rate": constraints.lower_sampled_rate(),
            "upper_violations": constraints.upper_violations,
            "upper_rate": constraints.upper_rate(),
        },
    });
    write_file(out, "summary.json", &manifest(Command::Train, config, extra))?;
    write_file(out, "checkpoint.json", &to_json_text(&report.model.checkpoint()))?;
    Ok(())
}

pub const CONDITIONED_HEADER: &str = "x,y,k,endpoint_prob,conditioned_return\n";
pub const VIOLATION_HEADER: &str = "policy,checked,violations,violation_rate\n";

fn conditioned_csv(chain: &Chain<f64>, n: usize, k_max: usize) -> Result<String, CliError> {
    let mut out = String::from(CONDITIONED_HEADER);
    for x in 0..n {
        for y in 0..n {
            for k in 1..=k_max {
                let prob = chain
                    .endpoint_probability(x, y, k)
                    .map_err(|e| CliError::Failure(e.to_string()))?;
                let value = match chain.conditioned_return(x, y, k) {
                    Ok(r) => fmt_real(r.value),
                    Err(temporal::TemporalError::Unreachable { .. }) => "unreachable".to_string(),
                    Err(e) => return Err(CliError::Failure(e.to_string())),
                };
                writeln!(out, "{x},{y},{k},{},{value}", fmt_real(prob)).expect("writing to a String");
            }
        }
    }
    Ok(out)
}

/// Conditioned returns for the configured and the optimal policy, plus
/// lower-bound violation rates for `n_policies` random policies.
pub fn cmd_oracle(config: &Config, base: &Path, out: &Path) -> Result<(), CliError> {
    let mdp = config.build_mdp(base)?;
    let pi = config.build_policy(&mdp)?;
    let (_, optimal) = mdp::value_iteration(&mdp, config.oracle.tol)?;
    let k_max = config.oracle.k_max;
    let n = mdp.n_states();
    let to_cli = |e: temporal::TemporalError| CliError::Failure(e.to_string());
    let chain = Chain::new(&mdp, &pi).map_err(to_cli)?;
    let best = Chain::new(&mdp, &optimal).map_err(to_cli)?;
    write_file(out, "conditioned_returns.csv", &conditioned_csv(&chain, n, k_max)?)?;
    write_file(out, "optimal_returns.csv", &conditioned_csv(&best, n, k_max)?)?;

    let mut rates = String::from(VIOLATION_HEADER);
    let mut total = 0.0;
    for i in 0..config.oracle.n_policies {
        let random = Policy::random(
            n,
            mdp.n_actions(),
            rng::child_seed(config.seed, "oracle.policy", i as u64),
        );
        let report = temporal::lower_bound_violations(&mdp, &optimal, &random, k_max).map_err(to_cli)?;
        total += report.rate();
        writeln!(
            rates,
            "{i},{},{},{}",
            report.checked,
            report.violations,
            fmt_real(report.rate())
        )
        .expect("writing to a String");
    }
    write_file(out, "violation_rates.csv", &rates)?;
    let mean = if config.oracle.n_policies == 0 {
        0.0
    } else {
        total / config.oracle.n_policies as f64
    };
    let extra = json!({"n_policies": config.oracle.n_policies, "mean_violation_rate": mean});
    write_file(out, "manifest.json", &manifest(Command::Oracle, config, extra))?;
    Ok(())
}

/// One property suite's tally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        format!(
            "{verdict} {} ({} cases, {} failures)",
            self.name, self.cases, self.failures
        )
    }
}

fn random_vectors(rng: &mut rng::Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| rng.gen_range(-10.0..=10.0)).collect())
        .collect()
}

fn tally(name: &'static str, cases: usize, mut fails: impl FnMut(usize) -> bool) -> SuiteOutcome {
    let failures = (0..cases).filter(|&i| fails(i)).count();
    SuiteOutcome { name, cases, failures }
}

/// Property suites over an arbitrary candidate for `d_hat`, so a broken
/// implementation can be fed through the same checks.
pub fn distance_suites(d: &dyn Fn(&[f64], &[f64]) -> f64, triples: usize, seed: u64) -> Vec<SuiteOutcome> {
    let mut rng = rng::generator(seed, "check.d_hat");
    let data: Vec<Vec<Vec<f64>>> = (0..triples).map(|_| random_vectors(&mut rng, 3, 16)).collect();
    vec![
        tally("d_hat_nonnegative_symmetric", triples, |i| {
            let (a, b) = (&data[i][0], &data[i][1]);
            let ab = d(a, b);
            !(ab >= 0.0) || ab != d(b, a)
        }),
        tally("d_hat_triangle", triples, |i| {
            let (a, b, c) = (&data[i][0], &data[i][1], &data[i][2]);
            d(a, c) > d(a, b) + d(b, c) + 1e-9
        }),
        tally("d_hat_self_distance", triples, |i| {
            let a = &data[i][0];
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            (d(a, a) - norm).abs() > 1e-12
        }),
    ]
}

fn iqe_suite(triples: usize, seed: u64) -> Vec<SuiteOutcome> {
    let mut rng = rng::generator(seed, "check.iqe");
    let shape = IqeShape::new(4, 4, 0.5).expect("valid shape");
    let data: Vec<Vec<Vec<f64>>> = (0..triples).map(|_| random_vectors(&mut rng, 3, 16)).collect();
    let q = |a: &[f64], b: &[f64]| distances::iqe(a, b, &shape).expect("matching dimensions");
    vec![tally("iqe_quasimetric", triples, |i| {
        let (a, b, c) = (&data[i][0], &data[i][1], &data[i][2]);
        q(a, a) != 0.0 || q(a, b) < 0.0 || q(a, c) > q(a, b) + q(b, c) + 1e-9
    })]
}

fn fixed_point_suites(instances: usize, seed: u64) -> Vec<SuiteOutcome> {
    let gammas = [0.5, 0.9, 0.95];
    let mut contraction = SuiteOutcome {
        name: "metric_contraction",
        cases: 0,
        failures: 0,
    };
    let mut chrono = SuiteOutcome {
        name: "chrono_to_mico_gap",
        cases: 0,
        failures: 0,
    };
    for i in 0..instances {
        let s = rng::child_seed(seed, "check.mdp", i as u64);
        let gamma = gammas[i % gammas.len()];
        let Ok(mdp) = mdp::random_mdp::<f64>(4 + i % 5, 3, 3, gamma, s) else {
            contraction.failures += 1;
            continue;
        };
        let pi = Policy::random(mdp.n_states(), 3, s);
        for table in [
            exact_metrics::mico_default(&mdp, &pi),
            exact_metrics::reward_range(&mdp, &pi).and_then(|r| {
                let budget = exact_metrics::default_max_iter(gamma, exact_metrics::DEFAULT_TOL, r);
                exact_metrics::bisim_fixed_point(&mdp, &pi, exact_metrics::DEFAULT_TOL, budget)
            }),
        ] {
            contraction.cases += 1;
            let ok = table.is_ok_and(|t| {
                t.residual_trace.windows(2).all(|w| w[1] <= gamma * w[0] + 1e-12)
                    && t.residual <= exact_metrics::DEFAULT_TOL
            });
            contraction.failures += usize::from(!ok);
        }
        chrono.cases += 1;
        let ok = (|| -> Result<bool, MetricError> {
            let mico = exact_metrics::mico_default(&mdp, &pi)?;
            let range = exact_metrics::reward_range(&mdp, &pi)?;
            let table = exact_metrics::chrono_fixed_point(&mdp, &pi, 10)?;
            Ok((0..=10).all(|k| {
                let gap = table
                    .layer(k)
                    .iter()
                    .zip(mico.values())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                gap <= gamma.powi(k as i32) * range / (1.0 - gamma) + 1e-9
            }))
        })()
        .unwrap_or(false);
        chrono.failures += usize::from(!ok);
    }
    vec![contraction, chrono]
}

fn transport_suite(instances: usize, seed: u64) -> SuiteOutcome {
    let mut rng = rng::generator(seed, "check.transport");
    tally("transport_plan", instances, |_| {
        let (m, n) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let normalize = |v: Vec<f64>| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let mu = normalize((0..m).map(|_| rng.gen_range(0.05..1.0)).collect());
        let nu = normalize((0..n).map(|_| rng.gen_range(0.05..1.0)).collect());
        let cost: Vec<f64> = (0..m * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let Ok(plan) = exact_metrics::transport(&mu, &nu, &cost) else {
            return true;
        };
        // cheaper than the independent coupling, marginals respected
        let product: f64 = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| mu[i] * nu[j] * cost[i * n + j])
            .sum();
        let rows_ok = (0..m).all(|i| ((0..n).map(|j| plan.plan[i * n + j]).sum::<f64>() - mu[i]).abs() < 1e-9);
        let cols_ok = (0..n).all(|j| ((0..m).map(|i| plan.plan[i * n + j]).sum::<f64>() - nu[j]).abs() < 1e-9);
        plan.cost > product + 1e-12 || !rows_ok || !cols_ok
    })
}

fn conditioned_return_suite(instances: usize, seed: u64) -> SuiteOutcome {
    // endpoint probabilities over y sum to one for every (x, k)
    tally("endpoint_probabilities", instances, |i| {
        let s = rng::child_seed(seed, "check.chain", i as u64);
        let Ok(mdp) = mdp::random_mdp::<f64>(5, 2, 2, 0.9, s) else {
            return true;
        };
        let Ok(chain) = Chain::new(&mdp, &Policy::random(5, 2, s)) else {
            return true;
        };
        !(0..5).all(|x| {
            (1..=4).all(|k| {
                let total: f64 = (0..5)
                    .map(|y| chain.endpoint_probability(x, y, k).unwrap_or(f64::NAN))
                    .sum();
                (total - 1.0).abs() < 1e-12
            })
        })
    })
}

fn gradient_suite(draws: usize, seed: u64) -> SuiteOutcome {
    let cfg = TrainerConfig {
        n_dim: 4,
        iqe_components: 2,
        hidden: 6,
        ..TrainerConfig::default()
    };
    let mut outcome = SuiteOutcome {
        name: "loss_gradients",
        cases: 0,
        failures: 0,
    };
    for i in 0..draws {
        let s = rng::child_seed(seed, "check.gradients", i as u64);
        let Ok(mdp) = mdp::random_mdp::<f64>(4, 2, 2, 0.9, s) else {
            continue;
        };
        let pi = Policy::uniform(4, 2);
        let Ok(model) = ScrModel::init(4, &cfg, s) else {
            continue;
        };
        let Ok(batch) = mdp::sample_trajectory(&mdp, &pi, 0, 12, s)
            .map_err(TrainError::from)
            .and_then(|t| Ok(mdp::sample_chrono_batch(&[t], 8, (1, 4), 0.9, s)?))
        else {
            continue;
        };
        let pairing = Pairing::sample(batch.len(), s);
        for kind in LOSS_KINDS {
            outcome.cases += 1;
            let ok = (|| -> Result<bool, TrainError> {
                let form = UpperBoundForm::SampledReturn;
                let (_, frozen, grads) = model.losses(&batch, &pairing, 0.9, form, None, Some(kind))?;
                let grads = grads.expect("root requested").by_name;
                let report = check_gradients(&model.params, &grads, 1e-5, |p| {
                    model
                        .with_params(p.clone())
                        .losses(&batch, &pairing, 0.9, form, Some(&frozen), None)
                        .map_or(f64::NAN, |v| v.0.get(kind))
                });
                Ok(report.max_rel_err <= 1e-4)
            })()
            .unwrap_or(false);
            outcome.failures += usize::from(!ok);
        }
    }
    outcome
}

/// Every property suite, with the library's `d_hat`.
pub fn property_suites(seed: u64) -> Vec<SuiteOutcome> {
    let d = |a: &[f64], b: &[f64]| distances::d_hat(a, b).unwrap_or(f64::NAN);
    let mut out = distance_suites(&d, 10_000, seed);
    out.extend(iqe_suite(10_000, seed));
    out.extend(fixed_point_suites(12, seed));
    out.push(transport_suite(200, seed));
    out.push(conditioned_return_suite(10, seed));
    out.push(gradient_suite(5, seed));
    out
}

/// Prints one line per suite; fails if any suite fails.
pub fn cmd_check(seed: u64) -> Result<String, CliError> {
    let suites = property_suites(seed);
    let mut text = String::new();
    for s in &suites {
        text.push_str(&s.line());
        text.push('\n');
    }
    let failed = suites.iter().filter(|s| !s.passed()).count();
    if failed > 0 {
        return Err(CliError::Failure(format!("{text}{failed} suite(s) failed")));
    }
    Ok(text)
}

/// Runs a parsed command line; returns what should go to standard output.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let loaded = match &cli.config {
        Some(path) => Some(Config::load(path)?),
        None => None,
    };
    if cli.command == Command::Check {
        let seed = cli.seed.or(loaded.as_ref().map(|(c, _)| c.seed)).unwrap_or(0);
        return cmd_check(seed);
    }
    let Some((mut config, base)) = loaded else {
        return Err(CliError::Config(format!(
            "{} needs --config <path>",
            cli.command.name()
        )));
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    let out = out_dir(cli, Some(&config));
    match cli.command {
        Command::Exact => cmd_exact(&config, &base, &out)?,
        Command::Train => cmd_train(&config, &base, &out)?,
        Command::Oracle => cmd_oracle(&config, &base, &out)?,
        Command::Check => unreachable!("handled above"),
    }
    Ok(format!("wrote {} outputs to {}\n", cli.command.name(), out.display()))
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
