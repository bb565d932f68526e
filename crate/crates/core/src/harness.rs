//! Experiment driver: FQI loops with divergence detection, parameter sweeps,
//! local stability probes and CSV logs.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_distribution::{
    epsilon_greedy, eta_mixture, from_product, uniform_distribution, JointDistribution, ProductPolicy,
};
use crate::env_model::{matrix_game_env, random_mmdp, two_state_env, Environment};
use crate::error::{Error, Result};
use crate::igm::{igm_decompose, igm_iterate, value_iteration, JointQ};
use crate::io;
use crate::lvf::{
    bellman_target, fit_residual, lvf_project, lvf_project_numeric, require_closed_form, FactoredQ,
    ResidueSpec,
};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_K: f64 = 10.0;
pub const DEFAULT_ITERS: usize = 300;
pub const CSV_HEADER: &str = "iter,q_tot_inf_norm,bellman_residual,greedy_optimal,status";

/// Greedy actions within this of `V*` count as optimal.
pub const OPTIMALITY_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum EnvSource {
    TwoState,
    MatrixGame,
    File(PathBuf),
    /// Random MMDP drawn from the run seed.
    Random {
        agents: usize,
        states: usize,
        actions: usize,
    },
}

impl EnvSource {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "two-state" => Ok(EnvSource::TwoState),
            "matrix-game" => Ok(EnvSource::MatrixGame),
            _ => {
                if let Some(path) = text.strip_prefix("file:") {
                    return Ok(EnvSource::File(path.into()));
                }
                if let Some(dims) = text.strip_prefix("random:") {
                    let parts: Vec<usize> = dims
                        .split(',')
                        .map(|p| p.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::param("env", format!("bad random dimensions `{dims}`: {e}")))?;
                    if let [agents, states, actions] = parts[..] {
                        return Ok(EnvSource::Random {
                            agents,
                            states,
                            actions,
                        });
                    }
                }
                Err(Error::param(
                    "env",
                    format!("`{text}`; expected two-state, matrix-game, file:PATH or random:N,S,M"),
                ))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperatorKind {
    LvfClosedForm,
    LvfNumeric,
    Igm,
}

impl OperatorKind {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "lvf" | "lvf-closed-form" => Ok(OperatorKind::LvfClosedForm),
            "lvf-numeric" => Ok(OperatorKind::LvfNumeric),
            "igm" => Ok(OperatorKind::Igm),
            _ => Err(Error::param(
                "operator",
                format!("`{text}`; expected lvf-closed-form, lvf-numeric or igm"),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::LvfClosedForm => "lvf-closed-form",
            OperatorKind::LvfNumeric => "lvf-numeric",
            OperatorKind::Igm => "igm",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DistSpec {
    Uniform,
    /// Product of per-agent policies; loaded from a file, or drawn from the
    /// run seed when no path is given.
    Product(Option<PathBuf>),
    /// ε-greedy with respect to the initial table (or every iterate, on-policy).
    EpsilonGreedy(f64),
    Eta(f64),
    File(PathBuf),
}

impl DistSpec {
    /// Parses `uniform`, `product[:PATH]`, `epsilon-greedy`, `eta` or
    /// `file:PATH`. The ε and η values come from separate flags.
    pub fn parse(text: &str, epsilon: Option<f64>, eta: Option<f64>) -> Result<Self> {
        match text {
            "uniform" => Ok(DistSpec::Uniform),
            "product" => Ok(DistSpec::Product(None)),
            "epsilon-greedy" => epsilon
                .map(DistSpec::EpsilonGreedy)
                .ok_or_else(|| Error::param("epsilon", "required by --dist epsilon-greedy")),
            "eta" => eta
                .map(DistSpec::Eta)
                .ok_or_else(|| Error::param("eta", "required by --dist eta")),
            _ => {
                if let Some(path) = text.strip_prefix("product:") {
                    Ok(DistSpec::Product(Some(path.into())))
                } else if let Some(path) = text.strip_prefix("file:") {
                    Ok(DistSpec::File(path.into()))
                } else {
                    Err(Error::param(
                        "dist",
                        format!("`{text}`; expected uniform, product[:PATH], epsilon-greedy, eta or file:PATH"),
                    ))
                }
            }
        }
    }
}

/// Initial table for a run.
#[derive(Clone, Debug, PartialEq)]
pub enum ValueTable {
    Factored(FactoredQ),
    Joint(JointQ),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvSource,
    pub operator: OperatorKind,
    pub dist: DistSpec,
    /// Rebuild the ε-greedy distribution from every iterate.
    pub on_policy: bool,
    pub gamma: Option<f64>,
    pub iters: usize,
    pub tol: f64,
    pub k: f64,
    pub seed: u64,
    pub initial: Option<ValueTable>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvSource::TwoState,
            operator: OperatorKind::LvfClosedForm,
            dist: DistSpec::Uniform,
            on_policy: false,
            gamma: None,
            iters: DEFAULT_ITERS,
            tol: DEFAULT_TOL,
            k: DEFAULT_K,
            seed: 0,
            initial: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters < 1 {
            return Err(Error::param("iters", "must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::param("tol", format!("must be positive, got {}", self.tol)));
        }
        if !(self.k > 1.0) {
            return Err(Error::param("k", format!("must exceed 1, got {}", self.k)));
        }
        if let Some(g) = self.gamma {
            if !(0.0..1.0).contains(&g) {
                return Err(Error::param("gamma", format!("must lie in [0, 1), got {g}")));
            }
        }
        Ok(())
    }

    pub fn resolve_env(&self) -> Result<Environment> {
        let env = match &self.env {
            EnvSource::TwoState => Environment::from_mmdp(two_state_env(self.gamma.unwrap_or(0.9)))?,
            EnvSource::MatrixGame => Environment::from_mmdp(matrix_game_env())?,
            EnvSource::File(path) => io::load_environment(path)?,
            EnvSource::Random {
                agents,
                states,
                actions,
            } => Environment::from_mmdp(random_mmdp(
                self.seed,
                *agents,
                *states,
                *actions,
                self.gamma.unwrap_or(0.9),
            )?)?,
        };
        match self.gamma {
            Some(g) if g != env.discount() => {
                let obs = env.observation_layer().clone();
                let mmdp = env.mmdp().clone().with_discount(g);
                Environment::new(mmdp, obs)
            }
            _ => Ok(env),
        }
    }

    /// The fixed data distribution. For ε-greedy it is built from the initial
    /// table.
    pub fn resolve_dist(&self, env: &Environment) -> Result<JointDistribution> {
        match &self.dist {
            DistSpec::Uniform => Ok(uniform_distribution(env)),
            DistSpec::Product(None) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, u64::MAX));
                from_product(env, &random_policy(env, &mut rng)?)
            }
            DistSpec::Product(Some(path)) => from_product(env, &io::load_product_policy(env, path)?),
            DistSpec::EpsilonGreedy(eps) => epsilon_greedy(env, &self.initial_factored(env), *eps),
            DistSpec::Eta(eta) => eta_mixture(env, *eta),
            DistSpec::File(path) => io::load_distribution(env, path),
        }
    }

    fn initial_factored(&self, env: &Environment) -> FactoredQ {
        match &self.initial {
            Some(ValueTable::Factored(q)) => q.clone(),
            Some(ValueTable::Joint(q)) => igm_decompose(env, q),
            None => FactoredQ::zeros(env),
        }
    }
}

/// Strictly positive product policy with rows drawn uniformly from the simplex
/// interior.
pub fn random_policy(env: &Environment, rng: &mut impl Rng) -> Result<ProductPolicy> {
    let m = env.num_actions();
    let probs = (0..env.num_agents())
        .map(|i| {
            let mut table = Vec::with_capacity(env.num_observations(i) * m);
            for _ in 0..env.num_observations(i) {
                let row: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
                let sum: f64 = row.iter().sum();
                table.extend(row.iter().map(|p| p / sum));
            }
            table
        })
        .collect();
    ProductPolicy::new(env, probs)
}

/// Seed for entry `index` of a sweep (splitmix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Converged,
    Diverged,
    CapReached,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::Diverged => "diverged",
            Status::CapReached => "cap-reached",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub q_tot_inf_norm: f64,
    /// Weighted squared error of this iteration's fit.
    pub bellman_residual: f64,
    /// Greedy joint action per context.
    pub greedy: Vec<usize>,
    pub greedy_optimal: bool,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub records: Vec<IterationRecord>,
    pub status: Option<Status>,
    /// Divergence threshold `K · R_max / (1 − γ)`.
    pub threshold: f64,
    pub final_q: Option<ValueTable>,
}

impl RunLog {
    pub fn empty() -> Self {
        RunLog {
            records: Vec::new(),
            status: None,
            threshold: f64::INFINITY,
            final_q: None,
        }
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// The CSV body. Wall-clock is left out so equal runs give equal bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let last = self.records.len();
        for r in &self.records {
            let status = match self.status {
                Some(s) if r.iter == last => s.name(),
                _ => "running",
            };
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{},{}",
                r.iter, r.q_tot_inf_norm, r.bellman_residual, r.greedy_optimal, status
            );
        }
        out
    }
}

/// Writes the log as CSV.
pub fn emit_csv(log: &RunLog, path: &Path) -> Result<()> {
    std::fs::write(path, log.to_csv()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(not(target_arch = "wasm32"))]
struct Stopwatch(std::time::Instant);

#[cfg(not(target_arch = "wasm32"))]
impl Stopwatch {
    fn start() -> Self {
        Stopwatch(std::time::Instant::now())
    }

    fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[cfg(target_arch = "wasm32")]
struct Stopwatch;

#[cfg(target_arch = "wasm32")]
impl Stopwatch {
    fn start() -> Self {
        Stopwatch
    }

    fn secs(&self) -> f64 {
        0.0
    }
}

/// Optimal joint values per state and the set of optimal joint actions.
struct Optimality {
    q_star: Vec<f64>,
    v_star: Vec<f64>,
    j: usize,
}

impl Optimality {
    fn new(env: &Environment) -> Result<Self> {
        let vi = value_iteration(env, 1e-11)?;
        let j = env.num_joint_actions();
        Ok(Optimality {
            v_star: vi.v_star(j),
            q_star: vi.q_star,
            j,
        })
    }

    fn is_optimal(&self, state: usize, joint: usize) -> bool {
        self.q_star[state * self.j + joint] >= self.v_star[state] - OPTIMALITY_TOL
    }

    fn all_optimal(&self, env: &Environment, greedy: &[usize]) -> bool {
        greedy
            .iter()
            .enumerate()
            .all(|(c, &a)| self.is_optimal(env.context(c).state, a))
    }
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Divergence threshold `K · R_max / (1 − γ)`.
pub fn divergence_threshold(env: &Environment, k: f64) -> f64 {
    k * env.mmdp().v_max()
}

/// Iterates the configured operator under a fixed distribution
/// (`on_policy = false`) or an ε-greedy distribution rebuilt from every
/// iterate (`on_policy = true`).
pub fn run_fqi(config: &RunConfig) -> Result<RunLog> {
    config.validate()?;
    let env = config.resolve_env()?;
    run_fqi_in(&env, config)
}

/// Same as [`run_fqi`] with the environment already resolved.
pub fn run_fqi_in(env: &Environment, config: &RunConfig) -> Result<RunLog> {
    config.validate()?;
    if config.on_policy {
        return run_onpolicy_in(env, config);
    }
    let dist = config.resolve_dist(env)?;
    run_fixed(env, &dist, config)
}

/// The on-policy loop; the distribution must be ε-greedy with `ε > 0`.
pub fn run_onpolicy_fqi(config: &RunConfig) -> Result<RunLog> {
    config.validate()?;
    let env = config.resolve_env()?;
    run_onpolicy_in(&env, config)
}

struct Loop<'a> {
    env: &'a Environment,
    config: &'a RunConfig,
    optimality: Optimality,
    threshold: f64,
    clock: Stopwatch,
    records: Vec<IterationRecord>,
}

impl<'a> Loop<'a> {
    fn new(env: &'a Environment, config: &'a RunConfig) -> Result<Self> {
        Ok(Loop {
            env,
            config,
            optimality: Optimality::new(env)?,
            threshold: divergence_threshold(env, config.k),
            clock: Stopwatch::start(),
            records: Vec::new(),
        })
    }

    /// Records one iteration and returns the terminal status, if reached.
    fn step(&mut self, before: &[f64], after: &[f64], residual: f64, greedy: Vec<usize>) -> Result<Option<Status>> {
        let iter = self.records.len() + 1;
        if !after.iter().all(|v| v.is_finite()) || !residual.is_finite() {
            return Err(Error::NonFinite { iteration: iter });
        }
        let norm = inf_norm(after);
        let greedy_optimal = self.optimality.all_optimal(self.env, &greedy);
        self.records.push(IterationRecord {
            iter,
            q_tot_inf_norm: norm,
            bellman_residual: residual,
            greedy,
            greedy_optimal,
            elapsed_secs: self.clock.secs(),
        });
        Ok(if norm > self.threshold {
            Some(Status::Diverged)
        } else if sup_distance(before, after) <= self.config.tol {
            Some(Status::Converged)
        } else if iter >= self.config.iters {
            Some(Status::CapReached)
        } else {
            None
        })
    }

    fn finish(self, status: Status, final_q: ValueTable) -> RunLog {
        RunLog {
            records: self.records,
            status: Some(status),
            threshold: self.threshold,
            final_q: Some(final_q),
        }
    }
}

fn greedy_factored(env: &Environment, q: &FactoredQ) -> Vec<usize> {
    (0..env.num_contexts()).map(|c| q.greedy_joint(env, c)).collect()
}

fn lvf_step(
    env: &Environment,
    dist: &JointDistribution,
    q: &FactoredQ,
    operator: OperatorKind,
    zero: &ResidueSpec,
) -> Result<(FactoredQ, f64)> {
    let target = bellman_target(env, q);
    match operator {
        OperatorKind::LvfClosedForm => {
            let next = lvf_project(env, dist, &target, zero)?;
            let residual = fit_residual(env, dist, &target, &next.q_tot_table(env));
            Ok((next, residual))
        }
        OperatorKind::LvfNumeric => {
            let fit = lvf_project_numeric(env, dist, &target)?;
            Ok((fit.q, fit.residual))
        }
        OperatorKind::Igm => unreachable!("igm runs on joint tables"),
    }
}

fn run_fixed(env: &Environment, dist: &JointDistribution, config: &RunConfig) -> Result<RunLog> {
    let mut lp = Loop::new(env, config)?;
    match config.operator {
        OperatorKind::Igm => {
            let mut q = match &config.initial {
                Some(ValueTable::Joint(q)) => q.clone(),
                Some(ValueTable::Factored(f)) => JointQ::new(env, f.q_tot_table(env))?,
                None => JointQ::zeros(env),
            };
            loop {
                let next = igm_iterate(env, dist, &q)?;
                let target = bellman_target_joint(env, &q);
                let residual = fit_residual(env, dist, &target, next.values());
                let greedy = (0..env.num_contexts()).map(|c| next.greedy_joint(env, c)).collect();
                let status = lp.step(q.values(), next.values(), residual, greedy)?;
                q = next;
                if let Some(status) = status {
                    return Ok(lp.finish(status, ValueTable::Joint(q)));
                }
            }
        }
        operator => {
            if operator == OperatorKind::LvfClosedForm {
                require_closed_form(env, dist)?;
            }
            let zero = ResidueSpec::zero(env);
            let mut q = config.initial_factored(env);
            let mut q_tot = q.q_tot_table(env);
            loop {
                let (next, residual) = lvf_step(env, dist, &q, operator, &zero)?;
                let next_tot = next.q_tot_table(env);
                let status = lp.step(&q_tot, &next_tot, residual, greedy_factored(env, &next))?;
                q = next;
                q_tot = next_tot;
                if let Some(status) = status {
                    return Ok(lp.finish(status, ValueTable::Factored(q)));
                }
            }
        }
    }
}

fn bellman_target_joint(env: &Environment, q: &JointQ) -> crate::lvf::TargetTable {
    let next = crate::igm::bellman_optimality(env, q);
    crate::lvf::TargetTable::new(env, next.values().to_vec()).expect("backup of a finite table is finite")
}

fn run_onpolicy_in(env: &Environment, config: &RunConfig) -> Result<RunLog> {
    let eps = match config.dist {
        DistSpec::EpsilonGreedy(eps) => eps,
        _ => return Err(Error::param("dist", "the on-policy loop needs an epsilon-greedy distribution")),
    };
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::param(
            "epsilon",
            format!("must lie in (0, 1] for the on-policy loop, got {eps}; ε = 0 leaves joint actions without data"),
        ));
    }
    if config.operator == OperatorKind::Igm {
        return Err(Error::param("operator", "the on-policy loop runs the LVF operator"));
    }
    let mut lp = Loop::new(env, config)?;
    let zero = ResidueSpec::zero(env);
    let mut q = config.initial_factored(env);
    let mut q_tot = q.q_tot_table(env);
    loop {
        let dist = epsilon_greedy(env, &q, eps)?;
        let (next, residual) = lvf_step(env, &dist, &q, config.operator, &zero)?;
        let next_tot = next.q_tot_table(env);
        let status = lp.step(&q_tot, &next_tot, residual, greedy_factored(env, &next))?;
        q = next;
        q_tot = next_tot;
        if let Some(status) = status {
            return Ok(lp.finish(status, ValueTable::Factored(q)));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Epsilon,
    Eta,
    Gamma,
}

impl SweepParam {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "epsilon" => Ok(SweepParam::Epsilon),
            "eta" => Ok(SweepParam::Eta),
            "gamma" => Ok(SweepParam::Gamma),
            _ => Err(Error::param("param", format!("`{text}`; expected epsilon, eta or gamma"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Epsilon => "epsilon",
            SweepParam::Eta => "eta",
            SweepParam::Gamma => "gamma",
        }
    }
}

#[derive(Debug)]
pub struct SweepEntry {
    pub value: f64,
    pub config: RunConfig,
    pub result: Result<RunLog>,
}

#[derive(Debug)]
pub struct SweepResult {
    pub param: SweepParam,
    pub entries: Vec<SweepEntry>,
}

/// The standalone configuration of sweep entry `index`.
pub fn sweep_config(template: &RunConfig, param: SweepParam, value: f64, index: usize) -> RunConfig {
    let mut config = template.clone();
    config.seed = derive_seed(template.seed, index as u64);
    match param {
        SweepParam::Epsilon => config.dist = DistSpec::EpsilonGreedy(value),
        SweepParam::Eta => config.dist = DistSpec::Eta(value),
        SweepParam::Gamma => config.gamma = Some(value),
    }
    config
}

/// Runs every value independently. A failing value records its error and
/// the sweep goes on.
pub fn sweep(template: &RunConfig, param: SweepParam, values: &[f64]) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::param("values", "need at least one value"));
    }
    let entries = values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let config = sweep_config(template, param, value, i);
            let result = run_fqi(&config);
            SweepEntry { value, config, result }
        })
        .collect();
    Ok(SweepResult { param, entries })
}

impl SweepResult {
    /// `value,status,final_q_tot_inf_norm,iterations,greedy_optimal`; failed
    /// runs report `error` and leave the rest empty.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("value,status,final_q_tot_inf_norm,iterations,greedy_optimal\n");
        for e in &self.entries {
            match &e.result {
                Ok(log) => {
                    let status = log.status.map_or("empty", Status::name);
                    let (norm, optimal) = log
                        .last()
                        .map_or((0.0, false), |r| (r.q_tot_inf_norm, r.greedy_optimal));
                    let _ = writeln!(
                        out,
                        "{},{},{:.16e},{},{}",
                        e.value,
                        status,
                        norm,
                        log.records.len(),
                        optimal
                    );
                }
                Err(_) => {
                    let _ = writeln!(out, "{},error,,,", e.value);
                }
            }
        }
        out
    }
}

/// Outcome of one batch of stability probes.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub trials: usize,
    pub remained: usize,
    /// Largest `|q_tot(x, π*(x)) − V*(x)|` after the step, over all trials
    /// and non-terminal contexts (terminal contexts use the max over joint
    /// actions).
    pub worst_excursion: f64,
    /// Trials whose greedy policy left `π*`.
    pub policy_changes: usize,
}

impl StabilityReport {
    pub fn fraction(&self) -> f64 {
        if self.trials == 0 {
            1.0
        } else {
            self.remained as f64 / self.trials as f64
        }
    }
}

/// Optimal joint action per state; `None` for absorbing zero-reward states,
/// where every action is optimal. Errors if some other state has tied
/// optimal actions.
pub fn unique_optimal_policy(env: &Environment) -> Result<Vec<Option<usize>>> {
    let vi = value_iteration(env, 1e-12)?;
    let j = env.num_joint_actions();
    let mmdp = env.mmdp();
    (0..env.num_states())
        .map(|s| {
            if mmdp.is_absorbing_terminal(s) {
                return Ok(None);
            }
            let row = &vi.q_star[s * j..(s + 1) * j];
            let best = env.joint_actions().argmax(row);
            let gap = row
                .iter()
                .enumerate()
                .filter(|&(a, _)| a != best)
                .map(|(_, &v)| row[best] - v)
                .fold(f64::INFINITY, f64::min);
            if gap <= 1e-9 {
                Err(Error::NonUniqueOptimalPolicy { state: s, gap })
            } else {
                Ok(Some(best))
            }
        })
        .collect()
}

/// Samples `Q` with greedy policy `π*` and `|q_tot(x, π*(x)) − V*(x)| ≤ δ`,
/// applies one on-policy LVF step with exploration `ε` and counts how many
/// land back in that set.
pub fn stability_box_check(env: &Environment, delta: f64, epsilon: f64, trials: usize, seed: u64) -> Result<StabilityReport> {
    if !(delta >= 0.0) {
        return Err(Error::param("delta", "must be non-negative"));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::param("epsilon", "must lie in (0, 1]"));
    }
    let policy = unique_optimal_policy(env)?;
    let vi = value_iteration(env, 1e-12)?;
    let v_star = vi.v_star(env.num_joint_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zero = ResidueSpec::zero(env);
    let mut report = StabilityReport {
        trials,
        remained: 0,
        worst_excursion: 0.0,
        policy_changes: 0,
    };
    for _ in 0..trials {
        let q = sample_box_point(env, &policy, &v_star, delta, &mut rng);
        let dist = epsilon_greedy(env, &q, epsilon)?;
        let next = lvf_project(env, &dist, &bellman_target(env, &q), &zero)?;
        let mut excursion: f64 = 0.0;
        let mut same_policy = true;
        for c in 0..env.num_contexts() {
            let s = env.context(c).state;
            match policy[s] {
                Some(best) => {
                    excursion = excursion.max((next.q_tot(env, c, best) - v_star[s]).abs());
                    same_policy &= next.greedy_joint(env, c) == best;
                }
                None => {
                    let max = (0..env.num_joint_actions())
                        .map(|a| next.q_tot(env, c, a))
                        .fold(f64::NEG_INFINITY, f64::max);
                    excursion = excursion.max((max - v_star[s]).abs());
                }
            }
        }
        report.worst_excursion = report.worst_excursion.max(excursion);
        if !same_policy {
            report.policy_changes += 1;
        }
        if same_policy && excursion <= delta {
            report.remained += 1;
        }
    }
    Ok(report)
}

/// One point of the stability set. Agent 0 carries `V*` plus noise on the
/// optimal action; every other agent carries noise only. Non-optimal actions
/// sit strictly below. With `δ = 0` the optimal joint value is exactly `V*`.
pub fn sample_box_point(
    env: &Environment,
    policy: &[Option<usize>],
    v_star: &[f64],
    delta: f64,
    rng: &mut impl Rng,
) -> FactoredQ {
    let n = env.num_agents();
    let m = env.num_actions();
    let space = env.joint_actions();
    let per_agent = delta / n as f64;
    let noise = |rng: &mut _| {
        if per_agent > 0.0 {
            sample_symmetric(rng, per_agent)
        } else {
            0.0
        }
    };
    let mut values: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; env.num_observations(i) * m]).collect();
    let mut done: Vec<Vec<bool>> = (0..n).map(|i| vec![false; env.num_observations(i)]).collect();
    for ctx in env.contexts() {
        let s = ctx.state;
        for (i, &x) in ctx.observations.iter().enumerate() {
            if done[i][x] {
                continue;
            }
            done[i][x] = true;
            let row = &mut values[i][x * m..(x + 1) * m];
            match policy[s] {
                Some(best) => {
                    let chosen = space.action_of(best, i);
                    let base = if i == 0 { v_star[s] } else { 0.0 } + noise(rng);
                    for (a, v) in row.iter_mut().enumerate() {
                        *v = if a == chosen {
                            base
                        } else {
                            base - rng.random_range(0.1..1.0)
                        };
                    }
                }
                None => {
                    for v in row.iter_mut() {
                        *v = if i == 0 { v_star[s] } else { 0.0 } + noise(rng);
                    }
                }
            }
        }
    }
    FactoredQ::new(env, values).expect("sampled tables are finite")
}

fn sample_symmetric(rng: &mut impl Rng, half_width: f64) -> f64 {
    rng.random_range(-half_width..=half_width)
}
