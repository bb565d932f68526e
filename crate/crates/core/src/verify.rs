//! Self-check suites run by `mafqi verify`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_distribution::{from_product, uniform_distribution};
use crate::env_model::{random_mmdp, two_state_env, Environment};
use crate::error::Result;
use crate::harness::random_policy;
use crate::lstsq::{reduce_lstsq_to_mmdp, verify_pseudoinverse, FactorKind};
use crate::lvf::{contraction_ratio_search, fit_residual, lvf_project, lvf_project_numeric, ResidueSpec, TargetTable};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub detail: String,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} ({} cases): {}", self.name, self.cases, self.detail)
    }
}

pub const SUITES: [&str; 4] = ["oracle-equivalence", "pseudoinverse", "contraction", "reduction"];

/// Random MMDP with `n ≤ 3`, `m ≤ 3`, `|S| ≤ 4`.
pub fn random_small_env(rng: &mut impl Rng) -> Result<Environment> {
    let n = rng.random_range(1..=3);
    let m = rng.random_range(2..=3);
    let s = rng.random_range(1..=4);
    let gamma = rng.random_range(0.0..0.99);
    Environment::from_mmdp(random_mmdp(rng.random(), n, s, m, gamma)?)
}

/// Closed form against the minimum-norm numeric solve on random positive
/// product data and random targets.
pub fn oracle_equivalence(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_value: f64 = 0.0;
    let mut worst_residual: f64 = 0.0;
    for _ in 0..instances {
        let env = random_small_env(&mut rng)?;
        let dist = from_product(&env, &random_policy(&env, &mut rng)?)?;
        let size = env.num_contexts() * env.num_joint_actions();
        let target = TargetTable::new(&env, (0..size).map(|_| rng.random_range(-10.0..10.0)).collect())?;
        let closed = lvf_project(&env, &dist, &target, &ResidueSpec::zero(&env))?;
        let numeric = lvf_project_numeric(&env, &dist, &target)?;
        let a = closed.q_tot_table(&env);
        let b = numeric.q.q_tot_table(&env);
        for (x, y) in a.iter().zip(&b) {
            worst_value = worst_value.max((x - y).abs());
        }
        let r = fit_residual(&env, &dist, &target, &a);
        worst_residual = worst_residual.max((r - numeric.residual).abs());
    }
    Ok(SuiteReport {
        name: "oracle-equivalence",
        passed: worst_value <= 1e-8 && worst_residual <= 1e-9,
        cases: instances,
        detail: format!("max |Δq_tot| = {worst_value:.3e}, max |Δresidual| = {worst_residual:.3e}"),
    })
}

/// The explicit weighted pseudoinverse against the Moore-Penrose conditions.
pub fn pseudoinverse(random_trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in 1..=3 {
        for m in 2..=3 {
            for kind in [FactorKind::Uniform, FactorKind::Random] {
                let report = verify_pseudoinverse(n, m, kind, random_trials, seed ^ (n * 10 + m) as u64)?;
                worst = worst.max(report.worst.max());
                cases += report.trials;
            }
        }
    }
    Ok(SuiteReport {
        name: "pseudoinverse",
        passed: worst <= 1e-9,
        cases,
        detail: format!("worst violation {worst:.3e}"),
    })
}

/// Random search for an expansion of the LVF operator on the two-state
/// example with uniform data.
pub fn contraction(pairs: usize, seed: u64) -> Result<SuiteReport> {
    let env = Environment::from_mmdp(two_state_env(0.9))?;
    let dist = uniform_distribution(&env);
    let w = contraction_ratio_search(&env, &dist, pairs, seed)?;
    Ok(SuiteReport {
        name: "contraction",
        passed: w.ratio > 0.9,
        cases: w.pairs_evaluated,
        detail: format!("largest ratio {:.6} (γ = 0.9)", w.ratio),
    })
}

/// Fitted values of the weighted affine least-squares problem
/// `min Σ w (c·x + b − y)²`: the projection of `√w·y` onto the span of the
/// scaled design `[C 1]`, through a twice-orthogonalized Gram-Schmidt basis.
pub fn affine_oracle(rows: &[Vec<u8>], labels: &[f64], weights: &[f64]) -> Vec<f64> {
    let n = rows[0].len();
    let k = rows.len();
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let design = DMatrix::from_fn(k, n + 1, |r, c| {
        let v = if c < n { f64::from(rows[r][c]) } else { 1.0 };
        v * sqrt_w[r]
    });
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for c in 0..=n {
        let original = design.column(c).into_owned();
        let mut v = original.clone();
        for _ in 0..2 {
            for q in &basis {
                let dot = q.dot(&v);
                v -= q * dot;
            }
        }
        let norm = v.norm();
        if norm > 1e-10 * original.norm().max(1.0) {
            basis.push(v / norm);
        }
    }
    let rhs = DVector::from_iterator(k, labels.iter().zip(&sqrt_w).map(|(y, w)| y * w));
    let mut proj = DVector::zeros(k);
    for q in &basis {
        proj += q * q.dot(&rhs);
    }
    proj.iter().zip(&sqrt_w).map(|(p, w)| p / w).collect()
}

/// Random binary instance with `n ≤ 4` columns and at most 10 rows.
pub fn random_binary_instance(rng: &mut impl Rng) -> (Vec<Vec<u8>>, Vec<f64>, Vec<f64>) {
    let n = rng.random_range(1..=4);
    let k = rng.random_range(1..=10);
    let rows = (0..k)
        .map(|_| (0..n).map(|_| rng.random_range(0..=1u8)).collect())
        .collect();
    let labels = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
    let weights = (0..k).map(|_| rng.random_range(0.1..2.0)).collect();
    (rows, labels, weights)
}

/// Binary least squares solved through the single-state reduction, against
/// the affine oracle.
pub fn reduction(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (rows, labels, weights) = random_binary_instance(&mut rng);
        let fit = reduce_lstsq_to_mmdp(&rows, &labels, &weights)?.solve()?;
        let oracle = affine_oracle(&rows, &labels, &weights);
        for (row, o) in rows.iter().zip(&oracle) {
            worst = worst.max((fit.predict(row) - o).abs());
        }
    }
    Ok(SuiteReport {
        name: "reduction",
        passed: worst <= 1e-8,
        cases: instances,
        detail: format!("max prediction gap {worst:.3e}"),
    })
}

/// Runs the named suites (all of them when `names` is empty) at their
/// standard sizes.
pub fn run_suites(names: &[String], seed: u64) -> Result<Vec<SuiteReport>> {
    let selected: Vec<&str> = if names.is_empty() {
        SUITES.to_vec()
    } else {
        names.iter().map(String::as_str).collect()
    };
    selected
        .into_iter()
        .map(|name| match name {
            "oracle-equivalence" => oracle_equivalence(200, seed),
            "pseudoinverse" => pseudoinverse(10, seed),
            "contraction" => contraction(10_000, seed),
            "reduction" => reduction(100, seed),
            other => Err(crate::error::Error::param(
                "suite",
                format!("`{other}`; expected one of {}", SUITES.join(", ")),
            )),
        })
        .collect()
}
