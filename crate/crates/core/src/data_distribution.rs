//! Exact joint action distributions `p_D(ā | x)`.
//!
//! Distributions are full tables over (context, joint action), never sample
//! estimates. A distribution built from per-agent policies remembers that
//! origin; [`is_factorized`] re-derives the property numerically for any table.

use crate::env_model::{argmax_lowest, Environment, STOCHASTIC_TOL};
use crate::error::{Error, Result};
use crate::lvf::FactoredQ;

/// Tolerance of the outer-product test in [`is_factorized`].
pub const FACTORIZATION_TOL: f64 = 1e-10;

fn check_simplex(path: impl Fn() -> String, probs: &[f64]) -> Result<()> {
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "{}: entry {p} is not a probability",
            path()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidDistribution(format!(
            "{}: sums to {sum:.17}, expected 1",
            path()
        )));
    }
    Ok(())
}

/// Per-agent action distributions `π_i(a_i | x_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductPolicy {
    num_actions: usize,
    // [agent][observation * m + action]
    probs: Vec<Vec<f64>>,
}

impl ProductPolicy {
    pub fn new(env: &Environment, probs: Vec<Vec<f64>>) -> Result<Self> {
        let m = env.num_actions();
        if probs.len() != env.num_agents() {
            return Err(Error::Shape(format!(
                "policy covers {} agents, environment has {}",
                probs.len(),
                env.num_agents()
            )));
        }
        for (agent, table) in probs.iter().enumerate() {
            let expected = env.num_observations(agent) * m;
            if table.len() != expected {
                return Err(Error::Shape(format!(
                    "policy[{agent}] has {} entries, expected {expected}",
                    table.len()
                )));
            }
            for (x, row) in table.chunks(m).enumerate() {
                check_simplex(|| format!("policy[{agent}][{x}]"), row)?;
            }
        }
        Ok(ProductPolicy {
            num_actions: m,
            probs,
        })
    }

    pub fn uniform(env: &Environment) -> Self {
        let m = env.num_actions();
        let probs = (0..env.num_agents())
            .map(|i| vec![1.0 / m as f64; env.num_observations(i) * m])
            .collect();
        ProductPolicy {
            num_actions: m,
            probs,
        }
    }

    pub fn num_agents(&self) -> usize {
        self.probs.len()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn probs(&self, agent: usize, observation: usize) -> &[f64] {
        let m = self.num_actions;
        &self.probs[agent][observation * m..(observation + 1) * m]
    }

    pub fn table(&self, agent: usize) -> &[f64] {
        &self.probs[agent]
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.probs.iter().flatten().all(|&p| p > 0.0)
    }
}

/// `p_D(ā | x)` for every context of an environment.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution {
    num_joint_actions: usize,
    // [context * J + joint]
    probs: Vec<f64>,
    factorized_origin: bool,
}

impl JointDistribution {
    /// Full table; `factorized_origin` is recorded as given.
    pub fn new(env: &Environment, probs: Vec<f64>, factorized_origin: bool) -> Result<Self> {
        let j = env.num_joint_actions();
        if probs.len() != env.num_contexts() * j {
            return Err(Error::Shape(format!(
                "distribution has {} entries, expected {} (contexts × joint actions)",
                probs.len(),
                env.num_contexts() * j
            )));
        }
        for (c, row) in probs.chunks(j).enumerate() {
            check_simplex(|| format!("probabilities[{c}]"), row)?;
        }
        Ok(JointDistribution {
            num_joint_actions: j,
            probs,
            factorized_origin,
        })
    }

    pub fn num_contexts(&self) -> usize {
        self.probs.len() / self.num_joint_actions
    }

    pub fn num_joint_actions(&self) -> usize {
        self.num_joint_actions
    }

    pub fn row(&self, context: usize) -> &[f64] {
        let j = self.num_joint_actions;
        &self.probs[context * j..(context + 1) * j]
    }

    pub fn prob(&self, context: usize, joint: usize) -> f64 {
        self.probs[context * self.num_joint_actions + joint]
    }

    pub fn table(&self) -> &[f64] {
        &self.probs
    }

    pub fn factorized_origin(&self) -> bool {
        self.factorized_origin
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }

    /// First zero entry as `(context, joint action)`.
    pub fn first_zero(&self) -> Option<(usize, usize)> {
        self.probs
            .iter()
            .position(|&p| p <= 0.0)
            .map(|k| (k / self.num_joint_actions, k % self.num_joint_actions))
    }

    /// Per-agent action marginals at one context.
    pub fn marginals(&self, env: &Environment, context: usize) -> Vec<Vec<f64>> {
        let space = env.joint_actions();
        let mut out = vec![vec![0.0; env.num_actions()]; env.num_agents()];
        for (j, &p) in self.row(context).iter().enumerate() {
            for (u, marginal) in out.iter_mut().enumerate() {
                marginal[space.action_of(j, u)] += p;
            }
        }
        out
    }
}

/// Mass `m^{-n}` on every joint action everywhere.
pub fn uniform_distribution(env: &Environment) -> JointDistribution {
    let j = env.num_joint_actions();
    JointDistribution {
        num_joint_actions: j,
        probs: vec![1.0 / j as f64; env.num_contexts() * j],
        factorized_origin: true,
    }
}

/// `p(ā | x) = Π_i π_i(a_i | x_i)`.
pub fn from_product(env: &Environment, policy: &ProductPolicy) -> Result<JointDistribution> {
    if policy.num_agents() != env.num_agents() || policy.num_actions() != env.num_actions() {
        return Err(Error::Shape(format!(
            "policy is {} agents × {} actions, environment is {} × {}",
            policy.num_agents(),
            policy.num_actions(),
            env.num_agents(),
            env.num_actions()
        )));
    }
    for agent in 0..policy.num_agents() {
        if policy.table(agent).len() != env.num_observations(agent) * env.num_actions() {
            return Err(Error::Shape(format!(
                "policy[{agent}] does not match the observation count"
            )));
        }
        for x in 0..env.num_observations(agent) {
            check_simplex(|| format!("policy[{agent}][{x}]"), policy.probs(agent, x))?;
        }
    }
    let space = env.joint_actions();
    let j = space.len();
    let mut probs = Vec::with_capacity(env.num_contexts() * j);
    for ctx in env.contexts() {
        for joint in 0..j {
            let p = ctx
                .observations
                .iter()
                .enumerate()
                .map(|(u, &x)| policy.probs(u, x)[space.action_of(joint, u)])
                .product();
            probs.push(p);
        }
    }
    Ok(JointDistribution {
        num_joint_actions: j,
        probs,
        factorized_origin: true,
    })
}

/// Per-agent ε-greedy policy around the individual greedy actions of `q`
/// (lowest action index on ties): `ε/m + (1 − ε)·1[a = argmax Q_i]`.
pub fn epsilon_greedy_policy(
    env: &Environment,
    q: &FactoredQ,
    epsilon: f64,
) -> Result<ProductPolicy> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::param("epsilon", format!("{epsilon} is outside [0, 1]")));
    }
    let m = env.num_actions();
    let probs = (0..env.num_agents())
        .map(|i| {
            let mut table = Vec::with_capacity(env.num_observations(i) * m);
            for x in 0..env.num_observations(i) {
                let greedy = argmax_lowest(q.individual(i, x));
                table.extend((0..m).map(|a| {
                    epsilon / m as f64 + if a == greedy { 1.0 - epsilon } else { 0.0 }
                }));
            }
            table
        })
        .collect();
    Ok(ProductPolicy {
        num_actions: m,
        probs,
    })
}

pub fn epsilon_greedy(env: &Environment, q: &FactoredQ, epsilon: f64) -> Result<JointDistribution> {
    from_product(env, &epsilon_greedy_policy(env, q, epsilon)?)
}

/// Two-agent, two-action blend between uniform data (`η = 0`) and data where
/// both agents always pick the same action (`η = 1`).
pub fn eta_mixture(env: &Environment, eta: f64) -> Result<JointDistribution> {
    if env.num_agents() != 2 || env.num_actions() != 2 {
        return Err(Error::Shape(format!(
            "the η mixture is defined for 2 agents × 2 actions, got {} × {}",
            env.num_agents(),
            env.num_actions()
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::param("eta", format!("{eta} is outside [0, 1]")));
    }
    let diagonal = 0.5 * eta + 0.25 * (1.0 - eta);
    let off = 0.25 * (1.0 - eta);
    // joint index: 0 = ⟨A1,A1⟩, 1 = ⟨A2,A1⟩, 2 = ⟨A1,A2⟩, 3 = ⟨A2,A2⟩
    let row = [diagonal, off, off, diagonal];
    let probs = (0..env.num_contexts()).flat_map(|_| row).collect();
    Ok(JointDistribution {
        num_joint_actions: 4,
        probs,
        factorized_origin: eta == 0.0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizationWitness {
    pub context: usize,
    pub joint_action: usize,
    /// `|p − Π marginals|` at the witness.
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Factorization {
    pub factorized: bool,
    /// Worst-violating entry; `None` when factorized.
    pub witness: Option<FactorizationWitness>,
}

/// Tests whether, within every latent state, the data weight of each
/// (joint observation, joint action) cell equals the product of its
/// per-agent (observation, action) marginals. Under the identity observation
/// layer this is the outer-product-of-marginals test on each state's table.
pub fn is_factorized(env: &Environment, dist: &JointDistribution) -> Factorization {
    let space = env.joint_actions();
    let n = env.num_agents();
    let m = env.num_actions();
    let mut worst: Option<FactorizationWitness> = None;
    for s in 0..env.num_states() {
        let contexts = env.contexts_of(s);
        let mut slot_mass: Vec<Vec<f64>> = (0..n)
            .map(|u| vec![0.0; env.local_observations(s, u).len() * m])
            .collect();
        for c in contexts.clone() {
            let w = env.context(c).weight;
            let locals: Vec<usize> = (0..n).map(|u| env.local_index(c, u)).collect();
            for (j, &p) in dist.row(c).iter().enumerate() {
                for u in 0..n {
                    slot_mass[u][locals[u] * m + space.action_of(j, u)] += w * p;
                }
            }
        }
        for c in contexts {
            let w = env.context(c).weight;
            let locals: Vec<usize> = (0..n).map(|u| env.local_index(c, u)).collect();
            for (j, &p) in dist.row(c).iter().enumerate() {
                let predicted: f64 = (0..n)
                    .map(|u| slot_mass[u][locals[u] * m + space.action_of(j, u)])
                    .product();
                let deviation = (w * p - predicted).abs();
                if deviation > FACTORIZATION_TOL
                    && worst.as_ref().is_none_or(|b| deviation > b.deviation)
                {
                    worst = Some(FactorizationWitness {
                        context: c,
                        joint_action: j,
                        deviation,
                    });
                }
            }
        }
    }
    Factorization {
        factorized: worst.is_none(),
        witness: worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::{matrix_game_env, random_mmdp, random_observation_layer, two_state_env};

    fn two_state() -> Environment {
        Environment::from_mmdp(two_state_env(0.9)).unwrap()
    }

    #[test]
    fn uniform_masses() {
        let d = uniform_distribution(&two_state());
        assert!(d.table().iter().all(|&p| p == 0.25));
        let game = Environment::from_mmdp(matrix_game_env()).unwrap();
        let d9 = uniform_distribution(&game);
        assert!(d9.table().iter().all(|&p| p == 1.0 / 9.0));
        assert!(d9.factorized_origin());
        assert!(is_factorized(&game, &d9).factorized);
    }

    #[test]
    fn product_of_uniform_is_uniform() {
        let env = two_state();
        let d = from_product(&env, &ProductPolicy::uniform(&env)).unwrap();
        assert_eq!(d, uniform_distribution(&env));
    }

    #[test]
    fn delta_product() {
        let env = two_state();
        let policy =
            ProductPolicy::new(&env, vec![vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0, 1.0]])
                .unwrap();
        let d = from_product(&env, &policy).unwrap();
        let target = env.joint_actions().encode(&[0, 1]);
        for c in 0..2 {
            for j in 0..4 {
                assert_eq!(d.prob(c, j), if j == target { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn product_of_skewed_policies() {
        let env = two_state();
        let row = vec![0.9, 0.1, 0.9, 0.1];
        let d = from_product(&env, &ProductPolicy::new(&env, vec![row.clone(), row]).unwrap())
            .unwrap();
        assert!((d.prob(1, 0) - 0.81).abs() < 1e-15);
        assert!((d.prob(1, 3) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn product_policy_rejects_unnormalized() {
        let env = two_state();
        let err = ProductPolicy::new(&env, vec![vec![0.5, 0.4, 0.5, 0.5], vec![0.5; 4]]);
        assert!(matches!(err, Err(Error::InvalidDistribution(_))));
    }

    #[test]
    fn epsilon_greedy_extremes() {
        let env = two_state();
        let q = FactoredQ::zeros(&env);
        assert_eq!(epsilon_greedy(&env, &q, 1.0).unwrap(), uniform_distribution(&env));
        let greedy = epsilon_greedy(&env, &q, 0.0).unwrap();
        for c in 0..2 {
            assert_eq!(greedy.row(c), &[1.0, 0.0, 0.0, 0.0]);
        }
        assert!(epsilon_greedy(&env, &q, 1.5).is_err());
        assert!(epsilon_greedy(&env, &q, -0.1).is_err());
    }

    #[test]
    fn epsilon_greedy_individual_probabilities() {
        let env = two_state();
        let q = FactoredQ::new(&env, vec![vec![0.0, 0.0, 2.0, 1.0], vec![0.0, 3.0, 1.0, 1.0]])
            .unwrap();
        let policy = epsilon_greedy_policy(&env, &q, 0.1).unwrap();
        let close = |got: &[f64], want: [f64; 2]| {
            got.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15)
        };
        assert!(close(policy.probs(0, 1), [0.95, 0.05]));
        assert!(close(policy.probs(1, 0), [0.05, 0.95]));
        // tie resolves to the lowest index
        assert!(close(policy.probs(1, 1), [0.95, 0.05]));
    }

    #[test]
    fn eta_mixture_tables() {
        let env = two_state();
        let d0 = eta_mixture(&env, 0.0).unwrap();
        assert!(d0.table().iter().all(|&p| p == 0.25));
        assert!(d0.factorized_origin());
        let d1 = eta_mixture(&env, 1.0).unwrap();
        assert_eq!(d1.row(0), &[0.5, 0.0, 0.0, 0.5]);
        assert!(!d1.factorized_origin());
        let half = eta_mixture(&env, 0.5).unwrap();
        assert_eq!(half.row(1), &[0.375, 0.125, 0.125, 0.375]);
        let game = Environment::from_mmdp(matrix_game_env()).unwrap();
        assert!(matches!(eta_mixture(&game, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn eta_half_is_not_factorized() {
        let env = two_state();
        let f = is_factorized(&env, &eta_mixture(&env, 0.5).unwrap());
        assert!(!f.factorized);
        let w = f.witness.unwrap();
        // marginals are (0.5, 0.5): diagonal 0.375 vs 0.25 and off-diagonal
        // 0.125 vs 0.25 deviate equally; the first diagonal entry wins.
        assert!(w.joint_action == 0 || w.joint_action == 3);
        assert!((w.deviation - 0.125).abs() < 1e-15);
    }

    #[test]
    fn marginals_recover_policy() {
        let env = Environment::from_mmdp(random_mmdp(4, 3, 2, 3, 0.9).unwrap()).unwrap();
        let policy = ProductPolicy::new(
            &env,
            vec![
                vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1],
                vec![0.1, 0.1, 0.8, 0.3, 0.3, 0.4],
                vec![0.7, 0.2, 0.1, 0.05, 0.9, 0.05],
            ],
        )
        .unwrap();
        let d = from_product(&env, &policy).unwrap();
        assert!(is_factorized(&env, &d).factorized);
        for s in 0..2 {
            let marg = d.marginals(&env, s);
            for (u, row) in marg.iter().enumerate() {
                for (a, p) in row.iter().enumerate() {
                    assert!((p - policy.probs(u, s)[a]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rich_observation_products_are_factorized() {
        let mmdp = random_mmdp(9, 2, 2, 2, 0.9).unwrap();
        let obs = random_observation_layer(2, &mmdp, 3).unwrap();
        let env = Environment::new(mmdp, obs).unwrap();
        let policy = ProductPolicy::new(
            &env,
            (0..2)
                .map(|i| {
                    (0..env.num_observations(i))
                        .flat_map(|x| {
                            let p = 0.2 + 0.1 * (x % 5) as f64;
                            [p, 1.0 - p]
                        })
                        .collect()
                })
                .collect(),
        )
        .unwrap();
        let d = from_product(&env, &policy).unwrap();
        assert!(is_factorized(&env, &d).factorized);
    }
}
