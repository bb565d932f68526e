//! Fitted Q-iteration under linear value factorization.
//!
//! The joint value is `Q_tot(x, ā) = Σ_i Q_i(x_i, a_i)`. Each iteration fits
//! that additive class to the one-step target `y = r + γ E[max Q_tot]` by
//! weighted least squares under the data distribution. For decentralized,
//! exploratory data the fit has a closed form per agent:
//!
//! ```text
//! Q_i(x_i, a_i) = E[y | x_i, a_i] − (n−1)/n · E[y | s] + w_i(x_i)
//! ```
//!
//! an individual evaluation minus a weighted counterfactual baseline, plus a
//! residue `w` that cancels in the sum. Everything else goes through the
//! numeric solver in [`crate::lstsq`], and only when the caller asks for it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_distribution::{is_factorized, JointDistribution};
use crate::env_model::{argmax_lowest, Environment};
use crate::error::{Error, Result};
use crate::lstsq::{weighted_lstsq_solve, EncodingMatrix, WlsInstance, DEFAULT_ROW_CAP};

/// Tolerance of the zero-sum check on residues.
pub const RESIDUE_TOL: f64 = 1e-12;

/// Individual value tables `Q_i(x_i, a_i)`; the joint value is their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct FactoredQ {
    num_actions: usize,
    // [agent][observation * m + action]
    values: Vec<Vec<f64>>,
}

impl FactoredQ {
    pub fn zeros(env: &Environment) -> Self {
        let m = env.num_actions();
        FactoredQ {
            num_actions: m,
            values: (0..env.num_agents())
                .map(|i| vec![0.0; env.num_observations(i) * m])
                .collect(),
        }
    }

    pub fn new(env: &Environment, values: Vec<Vec<f64>>) -> Result<Self> {
        let m = env.num_actions();
        if values.len() != env.num_agents() {
            return Err(Error::Shape(format!(
                "{} individual tables for {} agents",
                values.len(),
                env.num_agents()
            )));
        }
        for (i, table) in values.iter().enumerate() {
            if table.len() != env.num_observations(i) * m {
                return Err(Error::Shape(format!(
                    "table {i} has {} entries, expected {}",
                    table.len(),
                    env.num_observations(i) * m
                )));
            }
            if let Some(v) = table.iter().find(|v| !v.is_finite()) {
                return Err(Error::param("values", format!("agent {i} has non-finite entry {v}")));
            }
        }
        Ok(FactoredQ {
            num_actions: m,
            values,
        })
    }

    /// Uniform entries in `[-scale, scale]`.
    pub fn random(env: &Environment, rng: &mut impl Rng, scale: f64) -> Self {
        let m = env.num_actions();
        FactoredQ {
            num_actions: m,
            values: (0..env.num_agents())
                .map(|i| {
                    (0..env.num_observations(i) * m)
                        .map(|_| rng.random_range(-scale..=scale))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn num_agents(&self) -> usize {
        self.values.len()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn value(&self, agent: usize, observation: usize, action: usize) -> f64 {
        self.values[agent][observation * self.num_actions + action]
    }

    pub fn individual(&self, agent: usize, observation: usize) -> &[f64] {
        let m = self.num_actions;
        &self.values[agent][observation * m..(observation + 1) * m]
    }

    pub fn table(&self, agent: usize) -> &[f64] {
        &self.values[agent]
    }

    pub fn tables(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn q_tot(&self, env: &Environment, context: usize, joint: usize) -> f64 {
        let space = env.joint_actions();
        env.context(context)
            .observations
            .iter()
            .enumerate()
            .map(|(i, &x)| self.value(i, x, space.action_of(joint, i)))
            .sum()
    }

    /// `[context * J + joint]`.
    pub fn q_tot_table(&self, env: &Environment) -> Vec<f64> {
        let j = env.num_joint_actions();
        (0..env.num_contexts())
            .flat_map(|c| (0..j).map(move |a| (c, a)))
            .map(|(c, a)| self.q_tot(env, c, a))
            .collect()
    }

    /// Lowest-index argmax of `Q_i(x_i, ·)`.
    pub fn greedy_action(&self, agent: usize, observation: usize) -> usize {
        argmax_lowest(self.individual(agent, observation))
    }

    /// Tuple of individual greedy actions at a context.
    pub fn greedy_joint(&self, env: &Environment, context: usize) -> usize {
        let actions: Vec<usize> = env
            .context(context)
            .observations
            .iter()
            .enumerate()
            .map(|(i, &x)| self.greedy_action(i, x))
            .collect();
        env.joint_actions().encode(&actions)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

/// Regression targets `y(x, ā)`, `[context * J + joint]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetTable {
    num_joint_actions: usize,
    values: Vec<f64>,
}

impl TargetTable {
    pub fn new(env: &Environment, values: Vec<f64>) -> Result<Self> {
        let j = env.num_joint_actions();
        if values.len() != env.num_contexts() * j {
            return Err(Error::Shape(format!(
                "target has {} entries, expected {}",
                values.len(),
                env.num_contexts() * j
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::param("target", format!("non-finite entry {v}")));
        }
        Ok(TargetTable {
            num_joint_actions: j,
            values,
        })
    }

    pub fn get(&self, context: usize, joint: usize) -> f64 {
        self.values[context * self.num_joint_actions + joint]
    }

    pub fn row(&self, context: usize) -> &[f64] {
        let j = self.num_joint_actions;
        &self.values[context * j..(context + 1) * j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Per-agent offsets `w_i(x_i)` that sum to zero on every joint observation.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidueSpec {
    // [agent][observation]
    values: Vec<Vec<f64>>,
}

impl ResidueSpec {
    pub fn zero(env: &Environment) -> Self {
        ResidueSpec {
            values: (0..env.num_agents())
                .map(|i| vec![0.0; env.num_observations(i)])
                .collect(),
        }
    }

    pub fn new(env: &Environment, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != env.num_agents()
            || values
                .iter()
                .enumerate()
                .any(|(i, v)| v.len() != env.num_observations(i))
        {
            return Err(Error::Shape("residue must have one entry per (agent, observation)".into()));
        }
        for (c, ctx) in env.contexts().iter().enumerate() {
            let sum: f64 = ctx
                .observations
                .iter()
                .enumerate()
                .map(|(i, &x)| values[i][x])
                .sum();
            if !(sum.abs() <= RESIDUE_TOL) {
                return Err(Error::param(
                    "residue",
                    format!("sums to {sum:e} at context {c}, expected 0"),
                ));
            }
        }
        Ok(ResidueSpec { values })
    }

    /// Random valid residue: per state, agent offsets in `[-scale, scale]`
    /// with the last agent balancing the sum.
    pub fn random(env: &Environment, rng: &mut impl Rng, scale: f64) -> Self {
        let n = env.num_agents();
        let mut values: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; env.num_observations(i)]).collect();
        for s in 0..env.num_states() {
            let mut offsets: Vec<f64> = (0..n - 1).map(|_| rng.random_range(-scale..=scale)).collect();
            offsets.push(-offsets.iter().sum::<f64>());
            for (i, &w) in offsets.iter().enumerate() {
                for &(x, _) in env.local_observations(s, i) {
                    values[i][x] = w;
                }
            }
        }
        ResidueSpec { values }
    }

    pub fn get(&self, agent: usize, observation: usize) -> f64 {
        self.values[agent][observation]
    }

    pub fn tables(&self) -> &[Vec<f64>] {
        &self.values
    }
}

/// `y(s, ā) = r(s, ā) + γ Σ_{s'} P(s' | s, ā) · next[s']` for every context.
pub fn target_from_next_values(env: &Environment, next: &[f64]) -> TargetTable {
    let mmdp = env.mmdp();
    let j = env.num_joint_actions();
    let gamma = mmdp.discount();
    let mut values = Vec::with_capacity(env.num_contexts() * j);
    for ctx in env.contexts() {
        for a in 0..j {
            let future: f64 = mmdp
                .transition_row(ctx.state, a)
                .iter()
                .zip(next)
                .map(|(p, v)| p * v)
                .sum();
            values.push(mmdp.reward(ctx.state, a) + gamma * future);
        }
    }
    TargetTable {
        num_joint_actions: j,
        values,
    }
}

/// `V(s) = E_{x ~ Λ(·|s)}[max_ā Q_tot(x, ā)]`, the max taken over all joint
/// actions.
pub fn state_values(env: &Environment, q: &FactoredQ) -> Vec<f64> {
    let j = env.num_joint_actions();
    (0..env.num_states())
        .map(|s| {
            env.contexts_of(s)
                .map(|c| {
                    let best = (0..j)
                        .map(|a| q.q_tot(env, c, a))
                        .fold(f64::NEG_INFINITY, f64::max);
                    env.context(c).weight * best
                })
                .sum()
        })
        .collect()
}

/// One-step expected TD target of a factored value function.
pub fn bellman_target(env: &Environment, q: &FactoredQ) -> TargetTable {
    target_from_next_values(env, &state_values(env, q))
}

/// Fails unless the closed form applies: decentralized (factorized) and
/// strictly positive data.
pub fn require_closed_form(env: &Environment, dist: &JointDistribution) -> Result<()> {
    check_shapes(env, dist, None)?;
    let f = is_factorized(env, dist);
    if let Some(w) = f.witness {
        return Err(Error::NotFactorized {
            context: w.context,
            joint_action: w.joint_action,
            deviation: w.deviation,
        });
    }
    if let Some((context, joint_action)) = dist.first_zero() {
        return Err(Error::ZeroMass {
            context,
            joint_action,
        });
    }
    Ok(())
}

fn check_shapes(env: &Environment, dist: &JointDistribution, target: Option<&TargetTable>) -> Result<()> {
    if dist.num_contexts() != env.num_contexts() || dist.num_joint_actions() != env.num_joint_actions() {
        return Err(Error::Shape(format!(
            "distribution is {} × {}, environment is {} × {}",
            dist.num_contexts(),
            dist.num_joint_actions(),
            env.num_contexts(),
            env.num_joint_actions()
        )));
    }
    if let Some(t) = target {
        if t.values.len() != env.num_contexts() * env.num_joint_actions() {
            return Err(Error::Shape("target does not match the environment".into()));
        }
    }
    Ok(())
}

/// Per-state sufficient statistics of the closed form: data mass and
/// mass-weighted target per agent slot `(local observation, action)`, and the
/// state-level expected target.
struct SlotStats {
    mass: Vec<Vec<f64>>,
    weighted: Vec<Vec<f64>>,
    mean: f64,
}

fn slot_stats(env: &Environment, dist: &JointDistribution, target: &TargetTable, state: usize) -> SlotStats {
    let n = env.num_agents();
    let m = env.num_actions();
    let space = env.joint_actions();
    let mut mass: Vec<Vec<f64>> = (0..n)
        .map(|u| vec![0.0; env.local_observations(state, u).len() * m])
        .collect();
    let mut weighted = mass.clone();
    let mut total_mass = 0.0;
    let mut mean = 0.0;
    for c in env.contexts_of(state) {
        let w = env.context(c).weight;
        let locals: Vec<usize> = (0..n).map(|u| env.local_index(c, u)).collect();
        for (a, (&p, &y)) in dist.row(c).iter().zip(target.row(c)).enumerate() {
            let mass_here = w * p;
            total_mass += mass_here;
            mean += mass_here * y;
            for u in 0..n {
                let slot = locals[u] * m + space.action_of(a, u);
                mass[u][slot] += mass_here;
                weighted[u][slot] += mass_here * y;
            }
        }
    }
    SlotStats {
        mass,
        weighted,
        mean: mean / total_mass,
    }
}

/// Closed-form weighted least-squares projection onto the additive class.
///
/// Requires decentralized, strictly positive data; anything else is refused
/// with an error pointing at [`lvf_project_numeric`].
pub fn lvf_project(
    env: &Environment,
    dist: &JointDistribution,
    target: &TargetTable,
    residue: &ResidueSpec,
) -> Result<FactoredQ> {
    require_closed_form(env, dist)?;
    check_shapes(env, dist, Some(target))?;
    Ok(closed_form_unchecked(env, dist, target, residue))
}

fn closed_form_unchecked(
    env: &Environment,
    dist: &JointDistribution,
    target: &TargetTable,
    residue: &ResidueSpec,
) -> FactoredQ {
    let n = env.num_agents();
    let m = env.num_actions();
    let weight = (n as f64 - 1.0) / n as f64;
    let mut q = FactoredQ::zeros(env);
    for s in 0..env.num_states() {
        let stats = slot_stats(env, dist, target, s);
        for u in 0..n {
            for (l, &(x, _)) in env.local_observations(s, u).iter().enumerate() {
                for a in 0..m {
                    let slot = l * m + a;
                    let evaluation = stats.weighted[u][slot] / stats.mass[u][slot];
                    q.values[u][x * m + a] = evaluation - weight * stats.mean + residue.get(u, x);
                }
            }
        }
    }
    q
}

/// Output of the numeric projection.
#[derive(Clone, Debug, PartialEq)]
pub struct NumericFit {
    pub q: FactoredQ,
    /// Weighted squared error of the fit, summed over states.
    pub residual: f64,
    /// `(agent, observation, action)` slots with no data mass; their values
    /// are the minimum-norm choice, not determined by the data.
    pub off_support: Vec<(usize, usize, usize)>,
}

/// Minimum-norm weighted least-squares projection onto the additive class,
/// for any distribution (including non-factorized and zero-mass tables).
pub fn lvf_project_numeric(
    env: &Environment,
    dist: &JointDistribution,
    target: &TargetTable,
) -> Result<NumericFit> {
    check_shapes(env, dist, Some(target))?;
    let n = env.num_agents();
    let m = env.num_actions();
    let space = env.joint_actions();
    let mut q = FactoredQ::zeros(env);
    let mut residual = 0.0;
    let mut off_support = Vec::new();
    for s in 0..env.num_states() {
        let radices: Vec<usize> = (0..n)
            .map(|u| env.local_observations(s, u).len() * m)
            .collect();
        let a = EncodingMatrix::from_radices(&radices, DEFAULT_ROW_CAP.max(env.num_joint_actions()))?;
                let mut weights = vec![0.0; a.rows()];
        let mut targets = vec![0.0; a.rows()];
        let mut slot_mass: Vec<Vec<f64>> = radices.iter().map(|&r| vec![0.0; r]).collect();
        // row digits: agent u's slot = local observation · m + action
        for c in env.contexts_of(s) {
            let w = env.context(c).weight;
            let locals: Vec<usize> = (0..n).map(|u| env.local_index(c, u)).collect();
            for joint in 0..space.len() {
                let row = (0..n).rev().fold(0, |acc, u| {
                    acc * radices[u] + locals[u] * m + space.action_of(joint, u)
                });
                weights[row] = w * dist.prob(c, joint);
                targets[row] = target.get(c, joint);
                for u in 0..n {
                    slot_mass[u][locals[u] * m + space.action_of(joint, u)] += weights[row];
                }
            }
        }
        let sol = weighted_lstsq_solve(&WlsInstance { weights, targets }, &a)?;
        residual += sol.residual;
        for u in 0..n {
            for (l, &(x, _)) in env.local_observations(s, u).iter().enumerate() {
                for act in 0..m {
                    let col = a.column(u, l * m + act);
                    q.values[u][x * m + act] = sol.x[col];
                    if slot_mass[u][l * m + act] <= 0.0 {
                        off_support.push((u, x, act));
                    }
                }
            }
        }
    }
    Ok(NumericFit {
        q,
        residual,
        off_support,
    })
}

/// Weighted squared error `Σ_s Σ_x Λ(x|s) Σ_ā p(ā|x) (Q_tot − y)²`.
pub fn fit_residual(env: &Environment, dist: &JointDistribution, target: &TargetTable, q_tot: &[f64]) -> f64 {
    let j = env.num_joint_actions();
    env.contexts()
        .iter()
        .enumerate()
        .map(|(c, ctx)| {
            ctx.weight
                * (0..j)
                    .map(|a| {
                        let d = q_tot[c * j + a] - target.get(c, a);
                        dist.prob(c, a) * d * d
                    })
                    .sum::<f64>()
        })
        .sum()
}

/// One application of the empirical LVF Bellman operator (closed form).
pub fn lvf_iterate(
    env: &Environment,
    dist: &JointDistribution,
    q: &FactoredQ,
    residue: &ResidueSpec,
) -> Result<FactoredQ> {
    lvf_project(env, dist, &bellman_target(env, q), residue)
}

/// Terms of the closed-form update for one `(agent, observation, action)`:
/// `Q_i = evaluation − weight · baseline + w_i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CreditTerms {
    /// `E[y | x_i, a_i]`, other agents drawn from the data.
    pub evaluation: f64,
    /// Counterfactual baseline `E[y | s]`.
    pub baseline: f64,
    /// `(n − 1) / n`.
    pub weight: f64,
}

pub fn credit_decomposition(
    env: &Environment,
    dist: &JointDistribution,
    target: &TargetTable,
    agent: usize,
    observation: usize,
    action: usize,
) -> Result<CreditTerms> {
    require_closed_form(env, dist)?;
    check_shapes(env, dist, Some(target))?;
    if agent >= env.num_agents() || action >= env.num_actions() {
        return Err(Error::param("agent/action", "index out of range"));
    }
    let state = env
        .decode(agent, observation)
        .ok_or_else(|| Error::param("observation", format!("{observation} is never emitted to agent {agent}")))?;
    let stats = slot_stats(env, dist, target, state);
    let l = env
        .local_observations(state, agent)
        .iter()
        .position(|&(x, _)| x == observation)
        .expect("decoded observation is local to its state");
    let slot = l * env.num_actions() + action;
    let n = env.num_agents() as f64;
    Ok(CreditTerms {
        evaluation: stats.weighted[agent][slot] / stats.mass[agent][slot],
        baseline: stats.mean,
        weight: (n - 1.0) / n,
    })
}

/// One exported credit row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CreditRow {
    pub agent: usize,
    pub observation: usize,
    pub action: usize,
    pub terms: CreditTerms,
    pub residue: f64,
    pub q_i: f64,
}

/// Credit terms for every emitted `(agent, observation, action)`.
pub fn credit_rows(
    env: &Environment,
    dist: &JointDistribution,
    target: &TargetTable,
    residue: &ResidueSpec,
) -> Result<Vec<CreditRow>> {
    let q = lvf_project(env, dist, target, residue)?;
    let mut rows = Vec::new();
    for agent in 0..env.num_agents() {
        for observation in 0..env.num_observations(agent) {
            if env.decode(agent, observation).is_none() {
                continue;
            }
            for action in 0..env.num_actions() {
                let terms = credit_decomposition(env, dist, target, agent, observation, action)?;
                rows.push(CreditRow {
                    agent,
                    observation,
                    action,
                    terms,
                    residue: residue.get(agent, observation),
                    q_i: q.value(agent, observation, action),
                });
            }
        }
    }
    Ok(rows)
}

/// Largest observed expansion ratio of the LVF operator and the pair that
/// produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractionWitness {
    pub ratio: f64,
    pub first: FactoredQ,
    pub second: FactoredQ,
    /// Pairs with a non-zero denominator.
    pub pairs_evaluated: usize,
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Random search for `max ‖(T Q)_tot − (T Q')_tot‖_∞ / ‖Q_tot − Q'_tot‖_∞`
/// over pairs with entries uniform in `[-1, 1]`. Deterministic per seed.
pub fn contraction_ratio_search(
    env: &Environment,
    dist: &JointDistribution,
    num_pairs: usize,
    seed: u64,
) -> Result<ContractionWitness> {
    require_closed_form(env, dist)?;
    let zero = ResidueSpec::zero(env);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<ContractionWitness> = None;
    let mut evaluated = 0;
    for _ in 0..num_pairs {
        let q1 = FactoredQ::random(env, &mut rng, 1.0);
        let q2 = FactoredQ::random(env, &mut rng, 1.0);
        let denom = sup_distance(&q1.q_tot_table(env), &q2.q_tot_table(env));
        if denom <= 0.0 {
            continue;
        }
        evaluated += 1;
        let t1 = closed_form_unchecked(env, dist, &bellman_target(env, &q1), &zero);
        let t2 = closed_form_unchecked(env, dist, &bellman_target(env, &q2), &zero);
        let ratio = sup_distance(&t1.q_tot_table(env), &t2.q_tot_table(env)) / denom;
        if best.as_ref().is_none_or(|b| ratio > b.ratio) {
            best = Some(ContractionWitness {
                ratio,
                first: q1,
                second: q2,
                pairs_evaluated: 0,
            });
        }
    }
    let mut out = best.ok_or_else(|| Error::param("num_pairs", "no pair with a non-zero distance"))?;
    out.pairs_evaluated = evaluated;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_distribution::{eta_mixture, uniform_distribution};
    use crate::env_model::{matrix_game_env, two_state_env};

    fn two_state(gamma: f64) -> Environment {
        Environment::from_mmdp(two_state_env(gamma)).unwrap()
    }

    #[test]
    fn target_of_zero_q_is_reward() {
        let env = two_state(0.9);
        let y = bellman_target(&env, &FactoredQ::zeros(&env));
        assert_eq!(y.row(1), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(y.row(0), &[0.0; 4]);
    }

    #[test]
    fn target_with_constant_future() {
        let env = two_state(0.9);
        // q_tot(s2, ·) = 10 via Q_i(s2, ·) = 5
        let q = FactoredQ::new(&env, vec![vec![0.0, 0.0, 5.0, 5.0]; 2]).unwrap();
        let y = bellman_target(&env, &q);
        assert!((y.get(1, 0) - 10.0).abs() < 1e-12);
        assert!((y.get(1, 1) - 9.0).abs() < 1e-12);
        assert_eq!(y.get(1, 3), 0.0);
    }

    #[test]
    fn matrix_game_target_is_payoff() {
        let env = Environment::from_mmdp(matrix_game_env()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = FactoredQ::random(&env, &mut rng, 50.0);
        assert_eq!(bellman_target(&env, &q).values(), env.mmdp().rewards());
    }

    #[test]
    fn two_state_projection_values() {
        let env = two_state(0.9);
        let d = uniform_distribution(&env);
        let y = bellman_target(&env, &FactoredQ::zeros(&env));
        let q = lvf_project(&env, &d, &y, &ResidueSpec::zero(&env)).unwrap();
        for i in 0..2 {
            assert_eq!(q.individual(i, 1), &[0.375, -0.125]);
            assert_eq!(q.individual(i, 0), &[0.0, 0.0]);
        }
        assert_eq!(q.q_tot(&env, 1, 0), 0.75);
    }

    #[test]
    fn single_agent_projection_is_exact() {
        let mmdp = crate::env_model::random_mmdp(5, 1, 3, 4, 0.8).unwrap();
        let env = Environment::from_mmdp(mmdp).unwrap();
        let d = uniform_distribution(&env);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = TargetTable::new(&env, (0..12).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let q = lvf_project(&env, &d, &y, &ResidueSpec::zero(&env)).unwrap();
        for (a, b) in q.q_tot_table(&env).iter().zip(y.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_refuses_non_factorized_and_zero_mass() {
        let env = two_state(0.9);
        let y = bellman_target(&env, &FactoredQ::zeros(&env));
        let zero = ResidueSpec::zero(&env);
        let half = eta_mixture(&env, 0.5).unwrap();
        assert!(matches!(lvf_project(&env, &half, &y, &zero), Err(Error::NotFactorized { .. })));
        let q = FactoredQ::zeros(&env);
        let greedy = crate::data_distribution::epsilon_greedy(&env, &q, 0.0).unwrap();
        assert!(matches!(lvf_project(&env, &greedy, &y, &zero), Err(Error::ZeroMass { .. })));
        // the numeric path accepts both
        assert!(lvf_project_numeric(&env, &half, &y).is_ok());
        let fit = lvf_project_numeric(&env, &greedy, &y).unwrap();
        assert!(fit.off_support.contains(&(0, 1, 1)));
        assert!(!fit.off_support.contains(&(0, 1, 0)));
    }

    #[test]
    fn credit_terms_two_state() {
        let env = two_state(0.9);
        let d = uniform_distribution(&env);
        let y = bellman_target(&env, &FactoredQ::zeros(&env));
        let t = credit_decomposition(&env, &d, &y, 0, 1, 0).unwrap();
        assert_eq!(t, CreditTerms { evaluation: 0.5, baseline: 0.25, weight: 0.5 });
    }

    #[test]
    fn constant_target_assigns_one_nth() {
        let mmdp = crate::env_model::random_mmdp(5, 3, 2, 2, 0.8).unwrap();
        let env = Environment::from_mmdp(mmdp).unwrap();
        let d = uniform_distribution(&env);
        let y = TargetTable::new(&env, vec![6.0; 16]).unwrap();
        let q = lvf_project(&env, &d, &y, &ResidueSpec::zero(&env)).unwrap();
        for table in q.tables() {
            for v in table {
                assert!((v - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn numeric_eta_one_fits_diagonal() {
        let env = two_state(0.9);
        let d = eta_mixture(&env, 1.0).unwrap();
        let y = TargetTable::new(&env, vec![0.0, 0.0, 0.0, 0.0, 4.0, 7.0, 7.0, 2.0]).unwrap();
        let fit = lvf_project_numeric(&env, &d, &y).unwrap();
        // minimum norm splits each diagonal target equally between agents
        assert!((fit.q.value(0, 1, 0) - 2.0).abs() < 1e-10);
        assert!((fit.q.value(1, 1, 1) - 1.0).abs() < 1e-10);
        assert!(fit.residual < 1e-20);
    }

    #[test]
    fn residue_validation() {
        let env = two_state(0.9);
        assert!(ResidueSpec::new(&env, vec![vec![1.0, 2.0], vec![-1.0, -2.0]]).is_ok());
        assert!(ResidueSpec::new(&env, vec![vec![1.0, 2.0], vec![-1.0, -1.0]]).is_err());
    }

    #[test]
    fn contraction_search_skips_nothing_for_random_pairs() {
        let env = two_state(0.9);
        let d = uniform_distribution(&env);
        let w = contraction_ratio_search(&env, &d, 50, 3).unwrap();
        assert_eq!(w.pairs_evaluated, 50);
        assert!(w.ratio > 0.0);
        assert!(contraction_ratio_search(&env, &d, 0, 3).is_err());
    }
}
