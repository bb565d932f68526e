//! Browser bindings for the interactive demo page in `www/`.

use wasm_bindgen::prelude::*;

use mafqi::data_distribution::from_product;
use mafqi::env_model::{matrix_game_env, Environment};
use mafqi::harness::{run_fqi, DistSpec, OperatorKind, RunConfig, RunLog};
use mafqi::lvf::{bellman_target, lvf_project, FactoredQ, ResidueSpec};
use mafqi::ProductPolicy;

const MAX_ITERS: usize = 5000;

/// One learning curve of `||q_tot||_inf`.
#[wasm_bindgen]
pub struct Curve {
    norms: Vec<f64>,
    status: String,
    threshold: f64,
    greedy_optimal: bool,
}

#[wasm_bindgen]
impl Curve {
    pub fn norms(&self) -> Vec<f64> {
        self.norms.clone()
    }

    pub fn status(&self) -> String {
        self.status.clone()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    #[wasm_bindgen(js_name = greedyOptimal)]
    pub fn greedy_optimal(&self) -> bool {
        self.greedy_optimal
    }
}

impl Curve {
    fn from_log(log: RunLog) -> Curve {
        Curve {
            norms: log.records.iter().map(|r| r.q_tot_inf_norm).collect(),
            status: log.status.map_or("empty", |s| s.name()).to_string(),
            threshold: log.threshold,
            greedy_optimal: log.last().is_some_and(|r| r.greedy_optimal),
        }
    }

    fn failed(message: String) -> Curve {
        Curve {
            norms: Vec::new(),
            status: format!("error: {message}"),
            threshold: f64::NAN,
            greedy_optimal: false,
        }
    }
}

fn run(config: RunConfig) -> Curve {
    match run_fqi(&config) {
        Ok(log) => Curve::from_log(log),
        Err(e) => Curve::failed(e.to_string()),
    }
}

/// On-policy LVF iteration on the two-state example; `epsilon = 1` is the
/// fixed uniform distribution.
#[wasm_bindgen(js_name = epsilonCurve)]
pub fn epsilon_curve(gamma: f64, epsilon: f64, iters: usize) -> Curve {
    run(RunConfig {
        dist: DistSpec::EpsilonGreedy(epsilon),
        on_policy: true,
        gamma: Some(gamma),
        iters: iters.clamp(1, MAX_ITERS),
        ..RunConfig::default()
    })
}

/// LVF iteration on the two-state example under the fixed η-mixture of
/// coordinated (diagonal) and uniform joint actions, fitted numerically.
#[wasm_bindgen(js_name = etaCurve)]
pub fn eta_curve(gamma: f64, eta: f64, iters: usize) -> Curve {
    run(RunConfig {
        operator: OperatorKind::LvfNumeric,
        dist: DistSpec::Eta(eta),
        gamma: Some(gamma),
        iters: iters.clamp(1, MAX_ITERS),
        ..RunConfig::default()
    })
}

/// One LVF fit of the 3×3 coordination game when agent 1 plays `A1` with
/// probability `p1` and agent 2 with `p2`, the rest split evenly. Returns
/// the nine `q_tot` values row by row (rows agent 2, columns agent 1), or an
/// empty vector for probabilities outside `(0, 1)`.
#[wasm_bindgen(js_name = matrixGameFit)]
pub fn matrix_game_fit(p1: f64, p2: f64) -> Vec<f64> {
    let fit = || -> mafqi::Result<Vec<f64>> {
        let env = Environment::from_mmdp(matrix_game_env())?;
        let row = |p: f64| vec![p, (1.0 - p) / 2.0, (1.0 - p) / 2.0];
        let policy = ProductPolicy::new(&env, vec![row(p1), row(p2)])?;
        let dist = from_product(&env, &policy)?;
        let target = bellman_target(&env, &FactoredQ::zeros(&env));
        let q = lvf_project(&env, &dist, &target, &ResidueSpec::zero(&env))?;
        let space = env.joint_actions();
        Ok((0..3)
            .flat_map(|a2| (0..3).map(move |a1| (a1, a2)))
            .map(|(a1, a2)| q.q_tot(&env, 0, space.encode(&[a1, a2])))
            .collect())
    };
    if !(p1 > 0.0 && p1 < 1.0 && p2 > 0.0 && p2 < 1.0) {
        return Vec::new();
    }
    fit().unwrap_or_default()
}
