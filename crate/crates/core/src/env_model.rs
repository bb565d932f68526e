//! Finite multi-agent environments: the latent-state MMDP, the per-agent rich
//! observation layer on top of it, and the joint-action indexing convention
//! shared by every table in the crate.
//!
//! Joint actions are flat indices in `[0, m^n)` with agent `u`'s action at
//! digit `u` of the base-`m` expansion (agent 0 is the least significant
//! digit). All tensors are stored row-major under that convention.

use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Tolerance for "sums to one" checks on probability vectors.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Upper bound on `m^n` for any joint action space.
pub const MAX_JOINT_ACTIONS: usize = 4096;

/// Upper bound on `contexts × joint actions` held by one table.
const MAX_TABLE_ENTRIES: usize = 1 << 22;

/// Mixed-radix indexing of joint actions `a_0 a_1 … a_{n-1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointActionSpace {
    num_agents: usize,
    num_actions: usize,
    size: usize,
}

impl JointActionSpace {
    pub fn new(num_agents: usize, num_actions: usize) -> Result<Self> {
        if num_agents == 0 {
            return Err(Error::param("num_agents", "must be at least 1"));
        }
        if num_actions == 0 {
            return Err(Error::param("num_actions", "must be at least 1"));
        }
        let size = u32::try_from(num_agents)
            .ok()
            .and_then(|n| num_actions.checked_pow(n))
            .filter(|&s| s <= MAX_JOINT_ACTIONS)
            .ok_or(Error::CapExceeded {
                what: "joint action space",
                size: usize::MAX,
                cap: MAX_JOINT_ACTIONS,
            })?;
        Ok(JointActionSpace {
            num_agents,
            num_actions,
            size,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// `m^n`.
    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `a_u = floor(j / m^u) mod m`.
    pub fn action_of(&self, joint: usize, agent: usize) -> usize {
        (joint / self.num_actions.pow(agent as u32)) % self.num_actions
    }

    pub fn decode(&self, joint: usize) -> Vec<usize> {
        let mut rest = joint;
        (0..self.num_agents)
            .map(|_| {
                let a = rest % self.num_actions;
                rest /= self.num_actions;
                a
            })
            .collect()
    }

    pub fn encode(&self, actions: &[usize]) -> usize {
        debug_assert_eq!(actions.len(), self.num_agents);
        actions
            .iter()
            .rev()
            .fold(0, |acc, &a| acc * self.num_actions + a)
    }

    /// Position of `joint` when joint actions are ordered lexicographically as
    /// tuples `(a_0, a_1, …)`, agent 0 compared first.
    pub fn lex_rank(&self, joint: usize) -> usize {
        self.decode(joint)
            .iter()
            .fold(0, |acc, &a| acc * self.num_actions + a)
    }

    /// Joint argmax with ties broken toward the lexicographically first tuple.
    pub fn argmax(&self, values: &[f64]) -> usize {
        debug_assert_eq!(values.len(), self.size);
        let mut best = 0;
        for j in 1..values.len() {
            let (v, b) = (values[j], values[best]);
            if v > b || (v == b && self.lex_rank(j) < self.lex_rank(best)) {
                best = j;
            }
        }
        best
    }
}

/// Index of the maximum entry, lowest index on ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Finite latent-state multi-agent MDP with a uniform per-agent action count.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMmdp {
    num_states: usize,
    joint: JointActionSpace,
    // [state][joint]
    reward: Vec<f64>,
    // [state][joint][next state]
    transition: Vec<f64>,
    discount: f64,
}

impl LatentMmdp {
    /// Builds an MMDP after checking tensor shapes. Probabilistic invariants are
    /// reported by [`validate`] instead so that malformed models can still be
    /// inspected.
    pub fn new(
        num_agents: usize,
        num_states: usize,
        num_actions: usize,
        reward: Vec<f64>,
        transition: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if num_states == 0 {
            return Err(Error::param("num_states", "must be at least 1"));
        }
        let joint = JointActionSpace::new(num_agents, num_actions)?;
        let rows = num_states * joint.len();
        if reward.len() != rows {
            return Err(Error::Shape(format!(
                "reward has {} entries, expected {rows} (states × joint actions)",
                reward.len()
            )));
        }
        if transition.len() != rows * num_states {
            return Err(Error::Shape(format!(
                "transition has {} entries, expected {} (states × joint actions × states)",
                transition.len(),
                rows * num_states
            )));
        }
        Ok(LatentMmdp {
            num_states,
            joint,
            reward,
            transition,
            discount,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.joint.num_agents()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.joint.num_actions()
    }

    pub fn joint_actions(&self) -> &JointActionSpace {
        &self.joint
    }

    pub fn num_joint_actions(&self) -> usize {
        self.joint.len()
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn with_discount(mut self, discount: f64) -> Self {
        self.discount = discount;
        self
    }

    pub fn reward(&self, state: usize, joint: usize) -> f64 {
        self.reward[state * self.joint.len() + joint]
    }

    pub fn reward_row(&self, state: usize) -> &[f64] {
        let j = self.joint.len();
        &self.reward[state * j..(state + 1) * j]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transition
    }

    pub fn transition_row(&self, state: usize, joint: usize) -> &[f64] {
        let start = (state * self.joint.len() + joint) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    /// `max |r|`.
    pub fn r_max(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// `R_max / (1 - γ)`.
    pub fn v_max(&self) -> f64 {
        self.r_max() / (1.0 - self.discount)
    }

    /// Zero reward and a certain self-loop under every joint action.
    pub fn is_absorbing_terminal(&self, state: usize) -> bool {
        (0..self.joint.len()).all(|j| {
            self.reward(state, j) == 0.0 && self.transition_row(state, j)[state] == 1.0
        })
    }
}

/// Per-agent emission distributions `Λ(x | i, s)` over finite observation sets.
#[derive(Clone, Debug, PartialEq)]
pub struct RichObservationLayer {
    num_states: usize,
    num_observations: Vec<usize>,
    // [agent][state] -> (observation, probability)
    emission: Vec<Vec<Vec<(usize, f64)>>>,
}

impl RichObservationLayer {
    pub fn new(
        num_states: usize,
        num_observations: Vec<usize>,
        emission: Vec<Vec<Vec<(usize, f64)>>>,
    ) -> Result<Self> {
        if emission.len() != num_observations.len() {
            return Err(Error::Shape(format!(
                "emission covers {} agents but num_observations lists {}",
                emission.len(),
                num_observations.len()
            )));
        }
        for (agent, per_state) in emission.iter().enumerate() {
            if per_state.len() != num_states {
                return Err(Error::Shape(format!(
                    "emission[{agent}] covers {} states, expected {num_states}",
                    per_state.len()
                )));
            }
            for (state, entries) in per_state.iter().enumerate() {
                if let Some(&(x, _)) = entries.iter().find(|(x, _)| *x >= num_observations[agent])
                {
                    return Err(Error::Shape(format!(
                        "emission[{agent}][{state}] names observation {x}, but agent {agent} \
                         has {} observations",
                        num_observations[agent]
                    )));
                }
            }
        }
        Ok(RichObservationLayer {
            num_states,
            num_observations,
            emission,
        })
    }

    /// Every agent observes the latent state directly.
    pub fn identity(num_agents: usize, num_states: usize) -> Self {
        let emission = (0..num_agents)
            .map(|_| (0..num_states).map(|s| vec![(s, 1.0)]).collect())
            .collect();
        RichObservationLayer {
            num_states,
            num_observations: vec![num_states; num_agents],
            emission,
        }
    }

    pub fn num_agents(&self) -> usize {
        self.num_observations.len()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_observations(&self, agent: usize) -> usize {
        self.num_observations[agent]
    }

    pub fn emission(&self, agent: usize, state: usize) -> &[(usize, f64)] {
        &self.emission[agent][state]
    }

    /// `Λ^{-1}(i, x)`: the latent state whose emission gives `x` positive mass.
    pub fn decode(&self, agent: usize, observation: usize) -> Option<usize> {
        (0..self.num_states).find(|&s| {
            self.emission[agent][s]
                .iter()
                .any(|&(x, p)| x == observation && p > 0.0)
        })
    }

    pub fn is_identity(&self) -> bool {
        self.emission.iter().all(|per_state| {
            per_state
                .iter()
                .enumerate()
                .all(|(s, e)| e.len() == 1 && e[0] == (s, 1.0))
        }) && self.num_observations.iter().all(|&k| k == self.num_states)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Violated invariants found by [`validate`]; empty when the model is valid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, path: String, message: impl Into<String>) {
        self.violations.push(Violation {
            path,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

fn check_distribution(report: &mut ValidationReport, path: String, probs: impl Iterator<Item = f64>) {
    let mut sum = 0.0;
    for p in probs {
        if !p.is_finite() || p < 0.0 {
            report.push(path, format!("entry {p} is not a probability"));
            return;
        }
        sum += p;
    }
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        report.push(path, format!("sums to {sum:.17}, expected 1"));
    }
}

/// Collects every violated model invariant. Never fails.
pub fn validate(env: &LatentMmdp, obs: Option<&RichObservationLayer>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let gamma = env.discount();
    if !(0.0..1.0).contains(&gamma) {
        report.push("discount".into(), format!("{gamma} is outside [0, 1)"));
    }
    for s in 0..env.num_states() {
        for j in 0..env.num_joint_actions() {
            let r = env.reward(s, j);
            if !r.is_finite() {
                report.push(format!("reward[{s}][{j}]"), format!("{r} is not finite"));
            }
            check_distribution(
                &mut report,
                format!("transition[{s}][{j}]"),
                env.transition_row(s, j).iter().copied(),
            );
        }
    }
    let Some(obs) = obs else {
        return report;
    };
    if obs.num_agents() != env.num_agents() {
        report.push(
            "observations".into(),
            format!(
                "layer covers {} agents, environment has {}",
                obs.num_agents(),
                env.num_agents()
            ),
        );
        return report;
    }
    if obs.num_states() != env.num_states() {
        report.push(
            "observations".into(),
            format!(
                "layer covers {} states, environment has {}",
                obs.num_states(),
                env.num_states()
            ),
        );
        return report;
    }
    for agent in 0..obs.num_agents() {
        let mut owner: Vec<Option<usize>> = vec![None; obs.num_observations(agent)];
        for s in 0..obs.num_states() {
            let entries = obs.emission(agent, s);
            check_distribution(
                &mut report,
                format!("observations.emission[{agent}][{s}]"),
                entries.iter().map(|&(_, p)| p),
            );
            for &(x, p) in entries {
                if p <= 0.0 {
                    continue;
                }
                match owner[x] {
                    Some(prev) if prev != s => report.push(
                        format!("observations.emission[{agent}][{s}]"),
                        format!("observation {x} is also emitted under state {prev}; supports must be disjoint"),
                    ),
                    Some(_) => report.push(
                        format!("observations.emission[{agent}][{s}]"),
                        format!("observation {x} listed twice"),
                    ),
                    None => owner[x] = Some(s),
                }
            }
        }
    }
    report
}

/// One joint observation of the latent state `state`.
#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    pub state: usize,
    /// Global observation index per agent.
    pub observations: Vec<usize>,
    /// `Π_i Λ(x_i | i, s)`.
    pub weight: f64,
}

/// A validated environment together with its observation layer and the
/// enumeration of joint observations ("contexts") that every table is indexed
/// by. Under the identity layer there is exactly one context per state and
/// context `c` is state `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    mmdp: LatentMmdp,
    observations: RichObservationLayer,
    contexts: Vec<Context>,
    state_contexts: Vec<Range<usize>>,
    // [state][agent] -> positive-mass (observation, probability)
    local: Vec<Vec<Vec<(usize, f64)>>>,
}

impl Environment {
    /// MMDP with the identity observation layer.
    pub fn from_mmdp(mmdp: LatentMmdp) -> Result<Self> {
        let obs = RichObservationLayer::identity(mmdp.num_agents(), mmdp.num_states());
        Self::new(mmdp, obs)
    }

    pub fn new(mmdp: LatentMmdp, observations: RichObservationLayer) -> Result<Self> {
        let report = validate(&mmdp, Some(&observations));
        if !report.is_valid() {
            return Err(Error::InvalidModel(report.to_string()));
        }
        let n = mmdp.num_agents();
        let mut local = Vec::with_capacity(mmdp.num_states());
        let mut contexts = Vec::new();
        let mut state_contexts = Vec::with_capacity(mmdp.num_states());
        for s in 0..mmdp.num_states() {
            let per_agent: Vec<Vec<(usize, f64)>> = (0..n)
                .map(|i| {
                    observations
                        .emission(i, s)
                        .iter()
                        .copied()
                        .filter(|&(_, p)| p > 0.0)
                        .collect()
                })
                .collect();
            let count: usize = per_agent.iter().map(Vec::len).product();
            let start = contexts.len();
            if (start + count).saturating_mul(mmdp.num_joint_actions()) > MAX_TABLE_ENTRIES {
                return Err(Error::CapExceeded {
                    what: "context table",
                    size: (start + count).saturating_mul(mmdp.num_joint_actions()),
                    cap: MAX_TABLE_ENTRIES,
                });
            }
            for k in 0..count {
                let mut rest = k;
                let mut obs = Vec::with_capacity(n);
                let mut weight = 1.0;
                for entries in &per_agent {
                    let (x, p) = entries[rest % entries.len()];
                    rest /= entries.len();
                    obs.push(x);
                    weight *= p;
                }
                contexts.push(Context {
                    state: s,
                    observations: obs,
                    weight,
                });
            }
            state_contexts.push(start..contexts.len());
            local.push(per_agent);
        }
        Ok(Environment {
            mmdp,
            observations,
            contexts,
            state_contexts,
            local,
        })
    }

    pub fn mmdp(&self) -> &LatentMmdp {
        &self.mmdp
    }

    pub fn observation_layer(&self) -> &RichObservationLayer {
        &self.observations
    }

    pub fn num_agents(&self) -> usize {
        self.mmdp.num_agents()
    }

    pub fn num_states(&self) -> usize {
        self.mmdp.num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.mmdp.num_actions()
    }

    pub fn num_joint_actions(&self) -> usize {
        self.mmdp.num_joint_actions()
    }

    pub fn joint_actions(&self) -> &JointActionSpace {
        self.mmdp.joint_actions()
    }

    pub fn discount(&self) -> f64 {
        self.mmdp.discount()
    }

    pub fn num_observations(&self, agent: usize) -> usize {
        self.observations.num_observations(agent)
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn context(&self, c: usize) -> &Context {
        &self.contexts[c]
    }

    pub fn contexts(&self) -> &[Context] {
        &self.contexts
    }

    pub fn contexts_of(&self, state: usize) -> Range<usize> {
        self.state_contexts[state].clone()
    }

    /// Observations agent `agent` can receive in `state`, with their emission
    /// probabilities, in context-enumeration order.
    pub fn local_observations(&self, state: usize, agent: usize) -> &[(usize, f64)] {
        &self.local[state][agent]
    }

    /// Position of `context`'s observation for `agent` inside
    /// [`Environment::local_observations`].
    pub fn local_index(&self, context: usize, agent: usize) -> usize {
        let ctx = &self.contexts[context];
        let offset = context - self.state_contexts[ctx.state].start;
        let mut rest = offset;
        for entries in &self.local[ctx.state][..agent] {
            rest /= entries.len();
        }
        rest % self.local[ctx.state][agent].len()
    }

    pub fn decode(&self, agent: usize, observation: usize) -> Option<usize> {
        self.observations.decode(agent, observation)
    }
}

/// Two agents, two states, two actions each. The agents earn 1 for
/// coordinating on `⟨A1, A1⟩` in `s2` and stay there; `⟨A2, A2⟩` moves
/// them to the absorbing zero-reward state `s1`. States and actions are
/// zero-based: `s1 = 0`, `s2 = 1`, `A1 = 0`, `A2 = 1`.
pub fn two_state_env(discount: f64) -> LatentMmdp {
    let space = JointActionSpace::new(2, 2).expect("2x2 joint space");
    let mut reward = vec![0.0; 2 * 4];
    reward[4 + space.encode(&[0, 0])] = 1.0;
    let mut transition = vec![0.0; 2 * 4 * 2];
    for j in 0..4 {
        transition[j * 2] = 1.0;
        let next = if j == space.encode(&[1, 1]) { 0 } else { 1 };
        transition[(4 + j) * 2 + next] = 1.0;
    }
    LatentMmdp::new(2, 2, 2, reward, transition, discount).expect("two-state shapes")
}

/// One-shot 3×3 coordination game: 8 for `⟨A1, A1⟩`, −12 when exactly one
/// agent plays `A1`, 0 otherwise. A single state with discount 0, so every
/// episode ends after one step.
pub fn matrix_game_env() -> LatentMmdp {
    let space = JointActionSpace::new(2, 3).expect("3x3 joint space");
    let reward = (0..space.len())
        .map(|j| match (space.action_of(j, 0), space.action_of(j, 1)) {
            (0, 0) => 8.0,
            (0, _) | (_, 0) => -12.0,
            _ => 0.0,
        })
        .collect();
    LatentMmdp::new(2, 1, 3, reward, vec![1.0; 9], 0.0).expect("matrix game shapes")
}

fn simplex_row(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= sum);
    row
}

/// Random test instance: simplex-uniform transition rows, rewards uniform in
/// `[-1, 1]`. Deterministic per seed.
pub fn random_mmdp(
    seed: u64,
    num_agents: usize,
    num_states: usize,
    num_actions: usize,
    discount: f64,
) -> Result<LatentMmdp> {
    if !(0.0..1.0).contains(&discount) {
        return Err(Error::param("discount", format!("{discount} is outside [0, 1)")));
    }
    if num_states == 0 {
        return Err(Error::param("num_states", "must be at least 1"));
    }
    let space = JointActionSpace::new(num_agents, num_actions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = num_states * space.len();
    let reward = (0..rows).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let transition = (0..rows)
        .flat_map(|_| simplex_row(&mut rng, num_states))
        .collect();
    LatentMmdp::new(
        num_agents,
        num_states,
        num_actions,
        reward,
        transition,
        discount,
    )
}

/// Random rich observation layer: each agent sees between 1 and
/// `max_per_state` fresh observations per state, with simplex-uniform
/// emission probabilities.
pub fn random_observation_layer(
    seed: u64,
    env: &LatentMmdp,
    max_per_state: usize,
) -> Result<RichObservationLayer> {
    if max_per_state == 0 {
        return Err(Error::param("max_per_state", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut num_observations = Vec::new();
    let mut emission = Vec::new();
    for _ in 0..env.num_agents() {
        let mut next = 0;
        let mut per_state = Vec::new();
        for _ in 0..env.num_states() {
            let k = rng.random_range(1..=max_per_state);
            let probs = simplex_row(&mut rng, k);
            per_state.push(probs.into_iter().enumerate().map(|(i, p)| (next + i, p)).collect());
            next += k;
        }
        num_observations.push(next);
        emission.push(per_state);
    }
    RichObservationLayer::new(env.num_states(), num_observations, emission)
}
