//! Weighted least squares over m-ary encoding matrices.
//!
//! Three things live here: a generic minimum-norm solver (the reference the
//! closed-form projection is checked against, and the only route for data that
//! is not decentralized), the explicit closed-form minimizer and weighted
//! pseudoinverse for product weights, and the reduction of arbitrary binary
//! least-squares problems to a single-state LVF fit.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_distribution::JointDistribution;
use crate::env_model::{Environment, LatentMmdp};
use crate::error::{Error, Result};
use crate::lvf::{lvf_project_numeric, FactoredQ, TargetTable};

/// Default cap on encoding-matrix rows.
pub const DEFAULT_ROW_CAP: usize = 4096;

/// Eigenvalues of the Gram matrix below this fraction of the largest are
/// treated as null directions.
pub const EIGEN_RELATIVE_THRESHOLD: f64 = 1e-10;

/// Binary design matrix with one one-hot block per agent. Row `j` is the
/// mixed-radix expansion of `j`; column `offset_u + d` is digit `d` of agent
/// `u`. With equal radices `m` this is the m-ary encoding matrix, column
/// `u·m + v`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodingMatrix {
    radices: Vec<usize>,
    offsets: Vec<usize>,
    matrix: DMatrix<f64>,
}

impl EncodingMatrix {
    pub fn from_radices(radices: &[usize], row_cap: usize) -> Result<Self> {
        if radices.is_empty() || radices.contains(&0) {
            return Err(Error::param("radices", "need at least one agent, each with a positive radix"));
        }
        let rows = radices
            .iter()
            .try_fold(1usize, |acc, &k| acc.checked_mul(k))
            .filter(|&r| r <= row_cap)
            .ok_or(Error::CapExceeded {
                what: "encoding matrix",
                size: radices.iter().fold(1usize, |a, &k| a.saturating_mul(k)),
                cap: row_cap,
            })?;
        let mut offsets = Vec::with_capacity(radices.len());
        let mut cols = 0;
        for &k in radices {
            offsets.push(cols);
            cols += k;
        }
        let mut matrix = DMatrix::zeros(rows, cols);
        for j in 0..rows {
            let mut rest = j;
            for (u, &k) in radices.iter().enumerate() {
                matrix[(j, offsets[u] + rest % k)] = 1.0;
                rest /= k;
            }
        }
        Ok(EncodingMatrix {
            radices: radices.to_vec(),
            offsets,
            matrix,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn radices(&self) -> &[usize] {
        &self.radices
    }

    pub fn column(&self, agent: usize, digit: usize) -> usize {
        self.offsets[agent] + digit
    }

    /// Digit of `agent` in row `row`.
    pub fn digit(&self, row: usize, agent: usize) -> usize {
        let stride: usize = self.radices[..agent].iter().product();
        (row / stride) % self.radices[agent]
    }
}

/// The `m^n × mn` m-ary encoding matrix, capped at [`DEFAULT_ROW_CAP`] rows.
pub fn build_encoding_matrix(num_agents: usize, num_actions: usize) -> Result<EncodingMatrix> {
    EncodingMatrix::from_radices(&vec![num_actions; num_agents], DEFAULT_ROW_CAP)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WlsInstance {
    pub weights: Vec<f64>,
    pub targets: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WlsSolution {
    pub x: Vec<f64>,
    /// `A·x`.
    pub fitted: Vec<f64>,
    /// `Σ_j p_j (A_j·x − b_j)²`.
    pub residual: f64,
    pub rank: usize,
}

pub fn weighted_residual(weights: &[f64], targets: &[f64], fitted: &[f64]) -> f64 {
    weights
        .iter()
        .zip(targets)
        .zip(fitted)
        .map(|((p, b), f)| p * (f - b) * (f - b))
        .sum()
}

/// Minimum-norm minimizer of `Σ_j p_j (A_j·x − b_j)²`.
///
/// Solves the normal equations `AᵀPA x = AᵀPb` through an eigendecomposition
/// of the Gram matrix, dropping eigenvalues below
/// `EIGEN_RELATIVE_THRESHOLD · λ_max`; the null space of the Gram matrix is
/// the null space of `√P·A`, so this is the minimum-norm solution.
pub fn weighted_lstsq_solve(inst: &WlsInstance, a: &EncodingMatrix) -> Result<WlsSolution> {
    let rows = a.rows();
    if inst.weights.len() != rows || inst.targets.len() != rows {
        return Err(Error::Shape(format!(
            "instance has {} weights and {} targets for {rows} rows",
            inst.weights.len(),
            inst.targets.len()
        )));
    }
    if let Some(p) = inst.weights.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::param("weights", format!("{p} is not a non-negative weight")));
    }
    if !inst.weights.iter().any(|&p| p > 0.0) {
        return Err(Error::NoPositiveWeight);
    }
    let a_mat = a.matrix();
    let cols = a.cols();
    let mut gram = DMatrix::<f64>::zeros(cols, cols);
    let mut rhs = DVector::<f64>::zeros(cols);
    for j in 0..rows {
        let p = inst.weights[j];
        if p == 0.0 {
            continue;
        }
        let active: Vec<usize> = (0..cols).filter(|&k| a_mat[(j, k)] != 0.0).collect();
        for &k in &active {
            rhs[k] += p * inst.targets[j];
            for &l in &active {
                gram[(k, l)] += p;
            }
        }
    }
    let eig = SymmetricEigen::new(gram);
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let threshold = EIGEN_RELATIVE_THRESHOLD * lambda_max;
    let mut x = DVector::<f64>::zeros(cols);
    let mut rank = 0;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > threshold {
            let v = eig.eigenvectors.column(k);
            x += v * (v.dot(&rhs) / lambda);
            rank += 1;
        }
    }
    let fitted: Vec<f64> = (a_mat * &x).iter().copied().collect();
    let residual = weighted_residual(&inst.weights, &inst.targets, &fitted);
    Ok(WlsSolution {
        x: x.iter().copied().collect(),
        fitted,
        residual,
        rank,
    })
}

fn check_factors(factors: &[Vec<f64>]) -> Result<usize> {
    let m = factors.first().map(Vec::len).unwrap_or(0);
    if m == 0 {
        return Err(Error::param("factors", "need at least one agent with at least one action"));
    }
    for (u, f) in factors.iter().enumerate() {
        if f.len() != m {
            return Err(Error::Shape(format!(
                "factor {u} has {} entries, expected {m}",
                f.len()
            )));
        }
        if let Some(p) = f.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
            return Err(Error::param("factors", format!("factor {u} has non-positive entry {p}")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::param("factors", format!("factor {u} sums to {sum}")));
        }
    }
    Ok(m)
}

/// `p(ā) = Π_u p_u(a_u)` in encoding-row order.
pub fn product_weights(factors: &[Vec<f64>]) -> Vec<f64> {
    let m = factors[0].len();
    let rows = m.pow(factors.len() as u32);
    (0..rows)
        .map(|j| {
            let mut rest = j;
            factors
                .iter()
                .map(|f| {
                    let p = f[rest % m];
                    rest /= m;
                    p
                })
                .product()
        })
        .collect()
}

/// Closed-form minimizer for strictly positive product weights:
///
/// `x_{u·m+v} = Σ_ā p(ā)/p_u(a_u)·b_ā·1(a_u = v) − (n−1)/n·Σ_ā p(ā) b_ā
///              − 1/(mn)·Σ_i w_i + 1/m·Σ_{v'} w_{u·m+v'}`.
///
/// `free = None` is `w = 0`.
pub fn closed_form_solution(
    factors: &[Vec<f64>],
    targets: &[f64],
    free: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let m = check_factors(factors)?;
    let n = factors.len();
    let rows = m.pow(n as u32);
    if targets.len() != rows {
        return Err(Error::Shape(format!(
            "{} targets for {rows} joint actions",
            targets.len()
        )));
    }
    if let Some(w) = free {
        if w.len() != m * n {
            return Err(Error::Shape(format!("free vector has {} entries, expected {}", w.len(), m * n)));
        }
    }
    let p = product_weights(factors);
    let mean: f64 = p.iter().zip(targets).map(|(p, b)| p * b).sum();
    let mut x = vec![0.0; m * n];
    for (j, (&pj, &bj)) in p.iter().zip(targets).enumerate() {
        let mut rest = j;
        for (u, f) in factors.iter().enumerate() {
            let a = rest % m;
            rest /= m;
            x[u * m + a] += pj / f[a] * bj;
        }
    }
    let shift = (n as f64 - 1.0) / n as f64 * mean;
    let w_total: f64 = free.map(|w| w.iter().sum()).unwrap_or(0.0);
    for u in 0..n {
        let w_block: f64 = free.map(|w| w[u * m..(u + 1) * m].iter().sum()).unwrap_or(0.0);
        for v in 0..m {
            x[u * m + v] += -shift - w_total / (m * n) as f64 + w_block / m as f64;
        }
    }
    Ok(x)
}

/// `√P·A`.
pub fn scaled_encoding(a: &EncodingMatrix, weights: &[f64]) -> DMatrix<f64> {
    let mut out = a.matrix().clone();
    for (j, &p) in weights.iter().enumerate() {
        out.row_mut(j).scale_mut(p.sqrt());
    }
    out
}

/// Explicit weighted pseudoinverse `A^{p,†}` (`mn × m^n`) for strictly
/// positive product weights, built entry by entry.
pub fn closed_form_pseudoinverse(factors: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let m = check_factors(factors)?;
    let n = factors.len();
    let rows = m.pow(n as u32);
    let p = product_weights(factors);
    let nf = n as f64;
    let mf = m as f64;
    let mut out = DMatrix::zeros(m * n, rows);
    for (j, &pj) in p.iter().enumerate() {
        let mut rest = j;
        let actions: Vec<usize> = (0..n)
            .map(|_| {
                let a = rest % m;
                rest /= m;
                a
            })
            .collect();
        // √(p(ā_{−u}) / p_u(a_u)) = √p(ā) / p_u(a_u)
        let ratio: Vec<f64> = (0..n).map(|u| pj.sqrt() / factors[u][actions[u]]).collect();
        let ratio_sum: f64 = ratio.iter().sum();
        for u in 0..n {
            for v in 0..m {
                let indicator = if actions[u] == v { ratio[u] } else { 0.0 };
                out[(u * m + v, j)] = indicator - (nf - 1.0) / nf * pj.sqrt() - ratio[u] / mf
                    + ratio_sum / (mf * nf);
            }
        }
    }
    Ok(out)
}

/// Largest entrywise violation of each Moore-Penrose condition.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PinvViolations {
    /// `A A† − (A A†)ᵀ`
    pub left_symmetry: f64,
    /// `A† A − (A† A)ᵀ`
    pub right_symmetry: f64,
    /// `A A† A − A`
    pub reconstruction: f64,
    /// `A† A A† − A†`
    pub reflexivity: f64,
}

impl PinvViolations {
    pub fn max(&self) -> f64 {
        self.left_symmetry
            .max(self.right_symmetry)
            .max(self.reconstruction)
            .max(self.reflexivity)
    }

    fn merge(&mut self, other: &PinvViolations) {
        self.left_symmetry = self.left_symmetry.max(other.left_symmetry);
        self.right_symmetry = self.right_symmetry.max(other.right_symmetry);
        self.reconstruction = self.reconstruction.max(other.reconstruction);
        self.reflexivity = self.reflexivity.max(other.reflexivity);
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Checks the closed-form pseudoinverse of `√P·A` against the three
/// Moore-Penrose conditions for one factor set.
pub fn pseudoinverse_violations(factors: &[Vec<f64>]) -> Result<PinvViolations> {
    let m = check_factors(factors)?;
    let a = EncodingMatrix::from_radices(&vec![m; factors.len()], DEFAULT_ROW_CAP)?;
    let ap = scaled_encoding(&a, &product_weights(factors));
    let pinv = closed_form_pseudoinverse(factors)?;
    let left = &ap * &pinv;
    let right = &pinv * &ap;
    Ok(PinvViolations {
        left_symmetry: max_abs(&(&left - left.transpose())),
        right_symmetry: max_abs(&(&right - right.transpose())),
        reconstruction: max_abs(&(&left * &ap - &ap)),
        reflexivity: max_abs(&(&right * &pinv - &pinv)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorKind {
    Uniform,
    /// Strictly positive factors drawn per trial.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PinvReport {
    pub num_agents: usize,
    pub num_actions: usize,
    pub kind: FactorKind,
    pub trials: usize,
    pub worst: PinvViolations,
}

impl PinvReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst.max() <= tol
    }
}

/// Random strictly positive, normalized factors, each entry at least
/// `0.05 / m` before normalization.
pub fn random_factors(rng: &mut impl Rng, num_agents: usize, num_actions: usize) -> Vec<Vec<f64>> {
    (0..num_agents)
        .map(|_| {
            let raw: Vec<f64> = (0..num_actions).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|p| p / sum).collect()
        })
        .collect()
}

/// Runs [`pseudoinverse_violations`] on uniform factors (one trial) or on
/// `trials` random factor sets; requires `m^n ≤ 256`.
pub fn verify_pseudoinverse(
    num_agents: usize,
    num_actions: usize,
    kind: FactorKind,
    trials: usize,
    seed: u64,
) -> Result<PinvReport> {
    let rows = num_actions.checked_pow(num_agents as u32).unwrap_or(usize::MAX);
    if rows > 256 {
        return Err(Error::CapExceeded {
            what: "pseudoinverse check",
            size: rows,
            cap: 256,
        });
    }
    let mut worst = PinvViolations::default();
    let trials = match kind {
        FactorKind::Uniform => {
            let f = vec![vec![1.0 / num_actions as f64; num_actions]; num_agents];
            worst.merge(&pseudoinverse_violations(&f)?);
            1
        }
        FactorKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..trials {
                let f = random_factors(&mut rng, num_agents, num_actions);
                worst.merge(&pseudoinverse_violations(&f)?);
            }
            trials
        }
    };
    Ok(PinvReport {
        num_agents,
        num_actions,
        kind,
        trials,
        worst,
    })
}

/// Affine predictor `c ↦ c·x + intercept` over binary rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineFit {
    pub x: Vec<f64>,
    pub intercept: f64,
}

impl AffineFit {
    pub fn predict(&self, row: &[u8]) -> f64 {
        self.intercept
            + row
                .iter()
                .zip(&self.x)
                .map(|(&c, &x)| f64::from(c) * x)
                .sum::<f64>()
    }
}

/// A binary weighted least-squares problem recast as one LVF fit on a
/// single-state MMDP with two actions per agent.
#[derive(Clone, Debug)]
pub struct Reduction {
    pub env: Environment,
    pub dist: JointDistribution,
    pub target: TargetTable,
}

impl Reduction {
    /// `x*_i = Q_i(1) − Q_i(0)`, `b* = Σ_i Q_i(0)`.
    pub fn recover(&self, q: &FactoredQ) -> AffineFit {
        let n = self.env.num_agents();
        let x = (0..n).map(|i| q.value(i, 0, 1) - q.value(i, 0, 0)).collect();
        let intercept = (0..n).map(|i| q.value(i, 0, 0)).sum();
        AffineFit { x, intercept }
    }

    /// Fits with the numeric solver and applies the recovery map.
    pub fn solve(&self) -> Result<AffineFit> {
        let fit = lvf_project_numeric(&self.env, &self.dist, &self.target)?;
        Ok(self.recover(&fit.q))
    }
}

/// Builds the single-state MMDP whose joint action `ā_j = c_j` pays `y_j`,
/// with data distribution proportional to `w_j`. Repeated rows are merged
/// (summed weight, weight-averaged label), which leaves the minimizer set
/// unchanged.
pub fn reduce_lstsq_to_mmdp(rows: &[Vec<u8>], labels: &[f64], weights: &[f64]) -> Result<Reduction> {
    if rows.is_empty() || rows.len() != labels.len() || rows.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} rows, {} labels, {} weights",
            rows.len(),
            labels.len(),
            weights.len()
        )));
    }
    let n = rows[0].len();
    if n == 0 {
        return Err(Error::param("rows", "rows must have at least one column"));
    }
    for (j, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Shape(format!("row {j} has {} columns, expected {n}", row.len())));
        }
        if let Some(c) = row.iter().find(|&&c| c > 1) {
            return Err(Error::param("rows", format!("row {j} has non-binary entry {c}")));
        }
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::param("weights", format!("{w} is not positive")));
    }
    if let Some(y) = labels.iter().find(|y| !y.is_finite()) {
        return Err(Error::param("labels", format!("{y} is not finite")));
    }
    let joint_count = 1usize
        .checked_shl(n as u32)
        .filter(|&r| r <= DEFAULT_ROW_CAP)
        .ok_or(Error::CapExceeded {
            what: "binary design",
            size: usize::MAX,
            cap: DEFAULT_ROW_CAP,
        })?;
    let mut mass = vec![0.0; joint_count];
    let mut weighted_label = vec![0.0; joint_count];
    for ((row, &y), &w) in rows.iter().zip(labels).zip(weights) {
        let j = row
            .iter()
            .rev()
            .fold(0usize, |acc, &c| acc * 2 + usize::from(c));
        mass[j] += w;
        weighted_label[j] += w * y;
    }
    let total: f64 = mass.iter().sum();
    let reward: Vec<f64> = mass
        .iter()
        .zip(&weighted_label)
        .map(|(&m, &wy)| if m > 0.0 { wy / m } else { 0.0 })
        .collect();
    let mmdp = LatentMmdp::new(n, 1, 2, reward.clone(), vec![1.0; joint_count], 0.0)?;
    let env = Environment::from_mmdp(mmdp)?;
    let probs: Vec<f64> = mass.iter().map(|m| m / total).collect();
    let sum: f64 = probs.iter().sum();
    let probs = probs.into_iter().map(|p| p / sum).collect();
    let dist = JointDistribution::new(&env, probs, false)?;
    let target = TargetTable::new(&env, reward)?;
    Ok(Reduction { env, dist, target })
}
