//! Fitted Q-iteration under the individual-global-max (IGM) class.
//!
//! The IGM class holds every joint table whose greedy joint action is the
//! tuple of individual greedy actions. Any joint table is realized by some
//! member of the class, so with full-support data the least-squares fit
//! reproduces the target exactly and one iteration is the Bellman optimality
//! operator itself.

use crate::data_distribution::JointDistribution;
use crate::env_model::Environment;
use crate::error::{Error, Result};
use crate::lvf::FactoredQ;

/// Joint action-value table over `(context, joint action)`, `[c * J + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointQ {
    num_joint_actions: usize,
    values: Vec<f64>,
}

impl JointQ {
    pub fn zeros(env: &Environment) -> Self {
        JointQ {
            num_joint_actions: env.num_joint_actions(),
            values: vec![0.0; env.num_contexts() * env.num_joint_actions()],
        }
    }

    pub fn new(env: &Environment, values: Vec<f64>) -> Result<Self> {
        let j = env.num_joint_actions();
        if values.len() != env.num_contexts() * j {
            return Err(Error::Shape(format!(
                "joint table has {} entries, expected {}",
                values.len(),
                env.num_contexts() * j
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::param("values", format!("non-finite entry {v}")));
        }
        Ok(JointQ {
            num_joint_actions: j,
            values,
        })
    }

    /// Lifts a state-level table `[s * J + j]` to every context of the state.
    pub fn from_state_values(env: &Environment, per_state: &[f64]) -> Result<Self> {
        let j = env.num_joint_actions();
        if per_state.len() != env.num_states() * j {
            return Err(Error::Shape("state-level table does not match the environment".into()));
        }
        let values = env
            .contexts()
            .iter()
            .flat_map(|ctx| per_state[ctx.state * j..(ctx.state + 1) * j].iter().copied())
            .collect();
        JointQ::new(env, values)
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

    pub fn num_contexts(&self) -> usize {
        self.values.len() / self.num_joint_actions
    }

    /// Greedy joint action at a context, lexicographic tie-break.
    pub fn greedy_joint(&self, env: &Environment, context: usize) -> usize {
        env.joint_actions().argmax(self.row(context))
    }

    pub fn max(&self, context: usize) -> f64 {
        self.row(context).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_distance(&self, other: &JointQ) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn inf_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `(T Q)(x, ā) = r(s, ā) + γ Σ_{s'} P(s' | s, ā) E_{x' ~ Λ(·|s')}[max Q(x', ·)]`.
pub fn bellman_optimality(env: &Environment, q: &JointQ) -> JointQ {
    let next: Vec<f64> = (0..env.num_states())
        .map(|s| {
            env.contexts_of(s)
                .map(|c| env.context(c).weight * q.max(c))
                .sum()
        })
        .collect();
    let target = crate::lvf::target_from_next_values(env, &next);
    JointQ {
        num_joint_actions: env.num_joint_actions(),
        values: target.values().to_vec(),
    }
}

fn require_full_support(env: &Environment, dist: &JointDistribution) -> Result<()> {
    if dist.num_contexts() != env.num_contexts() || dist.num_joint_actions() != env.num_joint_actions() {
        return Err(Error::Shape("distribution does not match the environment".into()));
    }
    match dist.first_zero() {
        Some((context, joint_action)) => Err(Error::MissingSupport {
            context,
            joint_action,
        }),
        None => Ok(()),
    }
}

/// One application of the empirical IGM Bellman operator. With full-support
/// data the fit is exact, so this returns the Bellman optimality backup.
pub fn igm_iterate(env: &Environment, dist: &JointDistribution, q: &JointQ) -> Result<JointQ> {
    require_full_support(env, dist)?;
    Ok(bellman_optimality(env, q))
}

/// Indicator decomposition: `Q_i(x_i, a_i) = 1` if `a_i` is agent `i`'s part
/// of the greedy joint action, else 0. Observations shared by several joint
/// observations take the greedy action of the first context that contains
/// them.
pub fn igm_decompose(env: &Environment, q: &JointQ) -> FactoredQ {
    let n = env.num_agents();
    let m = env.num_actions();
    let space = env.joint_actions();
    let mut values: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; env.num_observations(i) * m]).collect();
    let mut assigned: Vec<Vec<bool>> = (0..n).map(|i| vec![false; env.num_observations(i)]).collect();
    for c in 0..env.num_contexts() {
        let greedy = q.greedy_joint(env, c);
        for (i, &x) in env.context(c).observations.iter().enumerate() {
            if !assigned[i][x] {
                assigned[i][x] = true;
                values[i][x * m + space.action_of(greedy, i)] = 1.0;
            }
        }
    }
    FactoredQ::new(env, values).expect("indicator tables match the environment")
}

/// Outcome of an IGM consistency check.
#[derive(Clone, Debug, PartialEq)]
pub struct IgmCheck {
    pub holds: bool,
    /// First context where the greedy joint action differs from the tuple of
    /// individual greedy actions: `(context, joint greedy, individual tuple)`.
    pub witness: Option<(usize, usize, usize)>,
}

pub fn igm_check(env: &Environment, joint: &JointQ, individual: &FactoredQ) -> IgmCheck {
    for c in 0..env.num_contexts() {
        let a = joint.greedy_joint(env, c);
        let b = individual.greedy_joint(env, c);
        if a != b {
            return IgmCheck {
                holds: false,
                witness: Some((c, a, b)),
            };
        }
    }
    IgmCheck {
        holds: true,
        witness: None,
    }
}

/// Result of value iteration on the latent MMDP.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueIteration {
    /// Optimal joint values per state, `[s * J + j]`.
    pub q_star: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ValueIteration {
    pub fn v_star(&self, num_joint_actions: usize) -> Vec<f64> {
        self.q_star
            .chunks(num_joint_actions)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// Iteration cap guaranteeing `γ^k R_max / (1 − γ) ≤ tol`, plus one.
pub fn value_iteration_cap(discount: f64, r_max: f64, tol: f64) -> usize {
    if r_max == 0.0 || discount == 0.0 {
        return 2;
    }
    let k = ((tol * (1.0 - discount) / r_max).ln() / discount.ln()).ceil();
    k.max(0.0) as usize + 1
}

/// Value iteration on the latent MMDP from `Q = 0`, stopping when successive
/// iterates differ by at most `tol` in sup norm or at the cap.
pub fn value_iteration(env: &Environment, tol: f64) -> Result<ValueIteration> {
    if !(tol > 0.0) {
        return Err(Error::param("tol", "must be positive"));
    }
    let mmdp = env.mmdp();
    let j = mmdp.num_joint_actions();
    let s_count = mmdp.num_states();
    let gamma = mmdp.discount();
    let cap = value_iteration_cap(gamma, mmdp.r_max(), tol);
    let mut q = vec![0.0; s_count * j];
    for it in 1..=cap {
        let v: Vec<f64> = q
            .chunks(j)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut next = Vec::with_capacity(q.len());
        for s in 0..s_count {
            for a in 0..j {
                let future: f64 = mmdp.transition_row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
                next.push(mmdp.reward(s, a) + gamma * future);
            }
        }
        let delta = q.iter().zip(&next).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        q = next;
        if delta <= tol {
            return Ok(ValueIteration {
                q_star: q,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(ValueIteration {
        q_star: q,
        iterations: cap,
        converged: false,
    })
}
