//! The linear data mechanism and its population-level closed forms.
//!
//! Rows are `x = (x1, x2)` with `x1 ~ P` (covariance `sigma`),
//! `y = x1·beta + eps_core`, and `x2 = y·gamma + eps_spu` in the training
//! environment or `x2 = eps_spu` in the test environment.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{is_symmetric, orthonormal_complement, sym_eigen_desc};
use crate::rng::{self, label};

/// Relative eigenvalue gap below which the spectrum of `sigma` counts as repeated.
pub const GAP_TOL: f64 = 1e-10;
/// Coefficients `q_j·beta` at or below this magnitude are treated as zero.
pub const COEFF_TOL: f64 = 1e-10;
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// `|c1 - (1 - alpha)/alpha|` below this is the degenerate case of the FTT bound.
pub const REGULARITY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("rank constraint violated: need 1 <= k < m < d, got k={k}, m={m}, d={d}")]
    BadRank { k: usize, m: usize, d: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("sigma is not symmetric")]
    NonSymmetric,
    #[error("sigma is not positive definite")]
    NonSpd,
    #[error("sigma has (near-)repeated eigenvalues, gap {gap:e}")]
    DegenerateSpectrum { gap: f64 },
    #[error("signal too weak: lambda_k = {lambda_k} <= max noise variance {noise_var}")]
    SignalTooWeak { lambda_k: f64, noise_var: f64 },
    #[error("{which} must have unit norm, got {norm}")]
    NotUnitNorm { which: &'static str, norm: f64 },
    #[error("beta is not in the span of the top-k eigenvectors (residual {residual:e})")]
    BetaOutsideSpan { residual: f64 },
    #[error("invalid noise level: {0}")]
    InvalidNoise(String),
    #[error("regularity violated: c1 = {c1} equals (1-alpha)/alpha = {ratio}")]
    RegularityViolated { c1: f64, ratio: f64 },
    #[error("secular root not isolated in ({lo}, {hi})")]
    RootBracketFailure { lo: f64, hi: f64 },
    #[error("eta_spu^2 = {eta_spu_sq} coincides with an eigenvalue of sigma")]
    SingularResolvent { eta_spu_sq: f64 },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Distribution of the core block `x1`. Both variants have covariance `sigma`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoreDist {
    #[default]
    Gaussian,
    /// Independent unit-variance uniforms, colored by the Cholesky factor.
    Uniform,
}

/// Field-for-field JSON form of a problem; matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawProblem {
    pub d1: usize,
    pub d2: usize,
    pub m: usize,
    pub k: usize,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub eta_core: f64,
    pub eta_spu: f64,
    #[serde(default)]
    pub core_dist: CoreDist,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BuildOptions {
    /// Project `beta` onto the top-k eigenspace and renormalize `beta`, `gamma`
    /// instead of rejecting them.
    pub project: bool,
}

/// A validated instance of the data mechanism.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawProblem", into = "RawProblem")]
pub struct ProblemSpec {
    d1: usize,
    d2: usize,
    m: usize,
    k: usize,
    beta: DVector<f64>,
    gamma: DVector<f64>,
    sigma: DMatrix<f64>,
    eta_core: f64,
    eta_spu: f64,
    core_dist: CoreDist,
    // derived
    lambdas: DVector<f64>,
    q: DMatrix<f64>,
    chol_l: DMatrix<f64>,
}

impl TryFrom<RawProblem> for ProblemSpec {
    type Error = ModelError;
    fn try_from(raw: RawProblem) -> Result<Self> {
        build_problem(raw, BuildOptions::default())
    }
}

impl From<ProblemSpec> for RawProblem {
    fn from(s: ProblemSpec) -> Self {
        s.to_raw()
    }
}

/// Validates raw fields into a [`ProblemSpec`]. `k` is lowered to the last
/// index with a nonzero coefficient of `beta` on the eigenbasis of `sigma`.
pub fn build_problem(raw: RawProblem, opts: BuildOptions) -> Result<ProblemSpec> {
    let RawProblem { d1, d2, m, k, beta, gamma, sigma, eta_core, eta_spu, core_dist } = raw;
    if d1 == 0 || d2 == 0 {
        return Err(ModelError::DimensionMismatch("d1 and d2 must be positive".into()));
    }
    let d = d1 + d2;
    if !(k >= 1 && k < m && m < d && k <= d1) {
        return Err(ModelError::BadRank { k, m, d });
    }
    if beta.len() != d1 || gamma.len() != d2 {
        return Err(ModelError::DimensionMismatch(format!(
            "beta has {} entries (want {d1}), gamma has {} (want {d2})",
            beta.len(),
            gamma.len()
        )));
    }
    if sigma.len() != d1 || sigma.iter().any(|row| row.len() != d1) {
        return Err(ModelError::DimensionMismatch(format!("sigma must be {d1}x{d1}")));
    }
    if !(eta_core.is_finite() && eta_core >= 0.0) {
        return Err(ModelError::InvalidNoise(format!("eta_core = {eta_core}")));
    }
    if !(eta_spu.is_finite() && eta_spu > 0.0) {
        return Err(ModelError::InvalidNoise(format!("eta_spu = {eta_spu}")));
    }
    let sigma = DMatrix::from_row_iterator(d1, d1, sigma.into_iter().flatten());
    if !is_symmetric(&sigma, 1e-12) {
        return Err(ModelError::NonSymmetric);
    }
    let sigma = 0.5 * (&sigma + sigma.transpose());
    let chol = Cholesky::new(sigma.clone()).ok_or(ModelError::NonSpd)?;
    let (lambdas, q) = sym_eigen_desc(&sigma);
    if lambdas[d1 - 1] <= 0.0 {
        return Err(ModelError::NonSpd);
    }
    let min_gap = lambdas.as_slice().windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min);
    if min_gap < GAP_TOL * lambdas[0] {
        return Err(ModelError::DegenerateSpectrum { gap: min_gap });
    }

    let mut beta = DVector::from_vec(beta);
    let mut gamma = DVector::from_vec(gamma);
    if opts.project {
        let qk = q.columns(0, k);
        beta = &qk * (qk.transpose() * &beta);
        let (nb, ng) = (beta.norm(), gamma.norm());
        if nb == 0.0 || ng == 0.0 {
            return Err(ModelError::NotUnitNorm { which: if nb == 0.0 { "beta" } else { "gamma" }, norm: 0.0 });
        }
        beta /= nb;
        gamma /= ng;
    }
    for (which, v) in [("beta", &beta), ("gamma", &gamma)] {
        let n = v.norm();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(ModelError::NotUnitNorm { which, norm: n });
        }
    }
    let coeffs = q.transpose() * &beta;
    let residual = coeffs.rows(k, d1 - k).norm();
    if residual > COEFF_TOL {
        return Err(ModelError::BetaOutsideSpan { residual });
    }
    let k = (0..k)
        .rev()
        .find(|&j| coeffs[j].abs() > COEFF_TOL)
        .map(|j| j + 1)
        .ok_or(ModelError::BetaOutsideSpan { residual })?;
    let noise_var = eta_core.powi(2).max(eta_spu.powi(2));
    if lambdas[k - 1] <= noise_var {
        return Err(ModelError::SignalTooWeak { lambda_k: lambdas[k - 1], noise_var });
    }

    Ok(ProblemSpec { d1, d2, m, k, beta, gamma, sigma, eta_core, eta_spu, core_dist, lambdas, q, chol_l: chol.l() })
}

impl ProblemSpec {
    pub fn d1(&self) -> usize {
        self.d1
    }
    pub fn d2(&self) -> usize {
        self.d2
    }
    pub fn d(&self) -> usize {
        self.d1 + self.d2
    }
    pub fn m(&self) -> usize {
        self.m
    }
    /// Signal rank after reduction to the minimal index.
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }
    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
    pub fn eta_core(&self) -> f64 {
        self.eta_core
    }
    pub fn eta_spu(&self) -> f64 {
        self.eta_spu
    }
    pub fn core_dist(&self) -> CoreDist {
        self.core_dist
    }
    /// Eigenvalues of `sigma`, descending.
    pub fn lambdas(&self) -> &DVector<f64> {
        &self.lambdas
    }
    /// Eigenvectors of `sigma` as columns, matching [`Self::lambdas`].
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    /// Coefficients `q_j·beta`.
    pub fn beta_coeffs(&self) -> DVector<f64> {
        self.q.transpose() * &self.beta
    }

    pub fn to_raw(&self) -> RawProblem {
        RawProblem {
            d1: self.d1,
            d2: self.d2,
            m: self.m,
            k: self.k,
            beta: self.beta.iter().cloned().collect(),
            gamma: self.gamma.iter().cloned().collect(),
            sigma: self.sigma.row_iter().map(|r| r.iter().cloned().collect()).collect(),
            eta_core: self.eta_core,
            eta_spu: self.eta_spu,
            core_dist: self.core_dist,
        }
    }

    /// Same mechanism with different noise levels (revalidated).
    pub fn with_noise(&self, eta_core: f64, eta_spu: f64) -> Result<ProblemSpec> {
        let mut raw = self.to_raw();
        raw.eta_core = eta_core;
        raw.eta_spu = eta_spu;
        build_problem(raw, BuildOptions::default())
    }

    /// Same mechanism with a different network width.
    pub fn with_width(&self, m: usize) -> Result<ProblemSpec> {
        let mut raw = self.to_raw();
        raw.m = m;
        build_problem(raw, BuildOptions::default())
    }
}

/// Closed-form second moments of the training distribution and the optima.
#[derive(Debug, Clone, Serialize)]
pub struct PopulationMoments {
    /// `E[x^T x]` in the training environment.
    pub h: DMatrix<f64>,
    /// `E[x^T y]`.
    pub c: DVector<f64>,
    /// `beta^T sigma beta`.
    pub g: f64,
    /// `E[y^2]`.
    pub ey2: f64,
    pub alpha: f64,
    pub v_star_tr: DVector<f64>,
    pub err_star_tr: f64,
    pub err_star_te: f64,
}

pub fn population_moments(spec: &ProblemSpec) -> PopulationMoments {
    let (d1, d2) = (spec.d1, spec.d2);
    let s = &spec.sigma;
    let beta = &spec.beta;
    let gamma = &spec.gamma;
    let e1 = spec.eta_core.powi(2);
    let e2 = spec.eta_spu.powi(2);
    let sb = s * beta;
    let g = beta.dot(&sb);

    let mut h = DMatrix::zeros(d1 + d2, d1 + d2);
    h.view_mut((0, 0), (d1, d1)).copy_from(s);
    let cross = &sb * gamma.transpose();
    h.view_mut((0, d1), (d1, d2)).copy_from(&cross);
    h.view_mut((d1, 0), (d2, d1)).copy_from(&cross.transpose());
    let spu = DMatrix::identity(d2, d2) * e2 + (gamma * gamma.transpose()) * (e1 + g);
    h.view_mut((d1, d1), (d2, d2)).copy_from(&spu);

    let mut c = DVector::zeros(d1 + d2);
    c.rows_mut(0, d1).copy_from(&sb);
    c.rows_mut(d1, d2).copy_from(&(gamma * (g + e1)));

    let alpha = e2 / (e1 + e2);
    let mut v = DVector::zeros(d1 + d2);
    v.rows_mut(0, d1).copy_from(&(beta * alpha));
    v.rows_mut(d1, d2).copy_from(&(gamma * (1.0 - alpha)));

    PopulationMoments {
        h,
        c,
        g,
        ey2: g + e1,
        alpha,
        v_star_tr: v,
        err_star_tr: e1 * e2 / (2.0 * (e1 + e2)),
        err_star_te: e1 / 2.0,
    }
}

impl PopulationMoments {
    /// `0.5 * E(x·v - y)^2` in the training environment.
    pub fn train_loss(&self, v: &DVector<f64>) -> f64 {
        0.5 * (v.dot(&(&self.h * v)) - 2.0 * v.dot(&self.c) + self.ey2)
    }

    /// `0.5 * ||v - v*||_H^2`, the excess over the training optimum, without
    /// the cancellation of the direct formula.
    pub fn train_excess(&self, v: &DVector<f64>) -> f64 {
        let delta = v - &self.v_star_tr;
        0.5 * delta.dot(&(&self.h * &delta))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenPair {
    pub value: f64,
    pub vector: DVector<f64>,
}

/// Eigenpair of `H` in the coupled group: vector `(sum_t e_t q_t, r gamma)`.
#[derive(Debug, Clone, Serialize)]
pub struct CoupledPair {
    pub value: f64,
    pub vector: DVector<f64>,
    /// Coefficient on `gamma` in the normalized vector; zero for the
    /// decoupled `(q_t, 0)` members with `q_t·beta = 0`.
    pub r: f64,
    /// True when the value was obtained from the secular equation.
    pub secular: bool,
}

/// Eigenstructure of `H` split into its three analytic groups.
#[derive(Debug, Clone, Serialize)]
pub struct HSpectrum {
    /// Value `eta_spu^2` on `(0, gamma_perp)`, `d2 - 1` members.
    pub spurious_null: Vec<EigenPair>,
    /// `(lambda_j, (q_j, 0))` for `j > k`.
    pub core_tail: Vec<EigenPair>,
    /// The `k + 1` remaining pairs, descending.
    pub coupled: Vec<CoupledPair>,
    /// `(beta, c1 gamma)` lies in the span of the top-k eigenvectors of `H`.
    pub c1: f64,
}

impl HSpectrum {
    /// All `d` eigenpairs sorted descending: `(values, columns)`.
    pub fn assemble(&self) -> (DVector<f64>, DMatrix<f64>) {
        let mut pairs: Vec<(f64, &DVector<f64>)> = self
            .spurious_null
            .iter()
            .chain(self.core_tail.iter())
            .map(|p| (p.value, &p.vector))
            .chain(self.coupled.iter().map(|p| (p.value, &p.vector)))
            .collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let d = pairs.len();
        let vals = DVector::from_iterator(d, pairs.iter().map(|p| p.0));
        let mut xi = DMatrix::zeros(d, d);
        for (j, (_, v)) in pairs.iter().enumerate() {
            xi.set_column(j, v);
        }
        (vals, xi)
    }

    /// Values of the coupled group, descending.
    pub fn coupled_values(&self) -> Vec<f64> {
        self.coupled.iter().map(|p| p.value).collect()
    }

    /// The top-`n` eigenvectors of `H` as columns.
    pub fn top(&self, n: usize) -> DMatrix<f64> {
        let (_, xi) = self.assemble();
        xi.columns(0, n).into_owned()
    }
}

/// `f(mu) = 1 - sum lambda b^2/(mu - lambda) - shift/mu`, increasing between poles.
fn secular_fn(mu: f64, lambdas: &[f64], b2: &[f64], shift: f64) -> (f64, f64) {
    let mut f = 1.0 - shift / mu;
    let mut df = shift / (mu * mu);
    for (&l, &w) in lambdas.iter().zip(b2) {
        let den = mu - l;
        f -= l * w / den;
        df += l * w / (den * den);
    }
    (f, df)
}

/// Roots of the secular equation `mu = sum mu lambda b^2/(mu - lambda) + shift`,
/// one per interval cut by the poles `lambdas` (descending, all distinct) on
/// `(0, inf)`. Returned descending.
pub fn secular_roots(lambdas: &[f64], b2: &[f64], shift: f64) -> Result<Vec<f64>> {
    assert_eq!(lambdas.len(), b2.len());
    assert!(shift > 0.0, "secular shift must be positive");
    let mut hi =
        lambdas.first().copied().unwrap_or(0.0) + lambdas.iter().zip(b2).map(|(l, w)| l * w).sum::<f64>() + shift + 1.0;
    while secular_fn(hi, lambdas, b2, shift).0 <= 0.0 {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(ModelError::RootBracketFailure { lo: lambdas[0], hi });
        }
    }
    let mut brackets = Vec::with_capacity(lambdas.len() + 1);
    let mut upper = hi;
    for &l in lambdas {
        brackets.push((l, upper));
        upper = l;
    }
    brackets.push((0.0, upper));

    brackets.into_iter().map(|(lo, hi)| bisect_secular(lo, hi, lambdas, b2, shift)).collect()
}

fn bisect_secular(lo0: f64, hi0: f64, lambdas: &[f64], b2: &[f64], shift: f64) -> Result<f64> {
    let (mut lo, mut hi) = (lo0, hi0);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-15 * mid {
            break;
        }
        let (f, _) = secular_fn(mid, lambdas, b2, shift);
        if f < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut mu = 0.5 * (lo + hi);
    if !(hi - lo <= 1e-12 * mu) {
        return Err(ModelError::RootBracketFailure { lo: lo0, hi: hi0 });
    }
    // Newton polish, kept inside the bracket
    for _ in 0..3 {
        let (f, df) = secular_fn(mu, lambdas, b2, shift);
        if !(f.is_finite() && df > 0.0) {
            break;
        }
        let next = mu - f / df;
        if next <= lo || next >= hi || secular_fn(next, lambdas, b2, shift).0.abs() >= f.abs() {
            break;
        }
        mu = next;
    }
    if !mu.is_finite() {
        return Err(ModelError::RootBracketFailure { lo: lo0, hi: hi0 });
    }
    Ok(mu)
}

pub fn h_spectrum(spec: &ProblemSpec, moments: &PopulationMoments) -> Result<HSpectrum> {
    let (d1, d2, k) = (spec.d1, spec.d2, spec.k);
    let d = d1 + d2;
    let e1 = spec.eta_core.powi(2);
    let e2 = spec.eta_spu.powi(2);
    let coeffs = spec.beta_coeffs();
    let embed_core = |u: &DVector<f64>| {
        let mut v = DVector::zeros(d);
        v.rows_mut(0, d1).copy_from(u);
        v
    };

    let spurious_null = if d2 > 1 {
        let comp = orthonormal_complement(&spec.gamma);
        comp.column_iter()
            .map(|col| {
                let mut v = DVector::zeros(d);
                v.rows_mut(d1, d2).copy_from(&col);
                EigenPair { value: e2, vector: v }
            })
            .collect()
    } else {
        Vec::new()
    };

    let core_tail = (k..d1)
        .map(|j| EigenPair { value: spec.lambdas[j], vector: embed_core(&spec.q.column(j).into_owned()) })
        .collect();

    let support: Vec<usize> = (0..k).filter(|&t| coeffs[t].abs() > COEFF_TOL).collect();
    let lam_t: Vec<f64> = support.iter().map(|&t| spec.lambdas[t]).collect();
    let b2_t: Vec<f64> = support.iter().map(|&t| coeffs[t].powi(2)).collect();
    let roots = secular_roots(&lam_t, &b2_t, e1 + e2)?;

    let mut coupled: Vec<CoupledPair> = roots
        .iter()
        .map(|&mu| {
            let mut u1 = DVector::zeros(d1);
            for &t in &support {
                let e = spec.lambdas[t] * coeffs[t] / (mu - spec.lambdas[t]);
                u1 += spec.q.column(t) * e;
            }
            let mut v = DVector::zeros(d);
            v.rows_mut(0, d1).copy_from(&u1);
            v.rows_mut(d1, d2).copy_from(&spec.gamma);
            let norm = v.norm();
            CoupledPair { value: mu, vector: v / norm, r: 1.0 / norm, secular: true }
        })
        .collect();
    for t in (0..k).filter(|t| !support.contains(t)) {
        coupled.push(CoupledPair {
            value: spec.lambdas[t],
            vector: embed_core(&spec.q.column(t).into_owned()),
            r: 0.0,
            secular: false,
        });
    }
    coupled.sort_by(|a, b| b.value.total_cmp(&a.value));

    // mu_{k+1} is the smallest secular root; (beta, c1 gamma) must be orthogonal to it
    let mu_last = *roots.last().expect("at least one secular root");
    let c1: f64 = support.iter().map(|&t| spec.lambdas[t] * coeffs[t].powi(2) / (spec.lambdas[t] - mu_last)).sum();
    let ratio = (1.0 - moments.alpha) / moments.alpha;
    if (c1 - ratio).abs() < REGULARITY_TOL {
        return Err(ModelError::RegularityViolated { c1, ratio });
    }

    Ok(HSpectrum { spurious_null, core_tail, coupled, c1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Regularity {
    pub passes: bool,
    /// `-eta_spu^2 beta^T (eta_spu^2 I - sigma)^{-1} sigma beta`.
    pub rhs: f64,
}

/// Checks `eta_core^2 != rhs`, the almost-sure condition of the FTT bound.
pub fn regularity_check(spec: &ProblemSpec) -> Result<Regularity> {
    let e2 = spec.eta_spu.powi(2);
    let coeffs = spec.beta_coeffs();
    let mut rhs = 0.0;
    for (j, &l) in spec.lambdas.iter().enumerate() {
        if (e2 - l).abs() <= 1e-12 * l.max(1.0) {
            return Err(ModelError::SingularResolvent { eta_spu_sq: e2 });
        }
        rhs += coeffs[j].powi(2) * l / (e2 - l);
    }
    rhs *= -e2;
    let e1 = spec.eta_core.powi(2);
    let passes = (e1 - rhs).abs() > REGULARITY_TOL * rhs.abs().max(1.0);
    Ok(Regularity { passes, rhs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Environment {
    Train,
    Test,
}

/// Draws `n` rows from the mechanism; reproducible from `seed`.
pub fn sample_dataset(spec: &ProblemSpec, n: usize, env: Environment, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let (d1, d2) = (spec.d1, spec.d2);
    let mut rng = rng::stream(seed, &[label::SAMPLE, env as u64]);
    let mut x = DMatrix::zeros(n, d1 + d2);
    let mut y = DVector::zeros(n);
    let unif_half = 3f64.sqrt();
    let mut z = DVector::zeros(d1);
    for i in 0..n {
        for zj in z.iter_mut() {
            *zj = match spec.core_dist {
                CoreDist::Gaussian => rng.sample(StandardNormal),
                CoreDist::Uniform => rng.gen_range(-unif_half..unif_half),
            };
        }
        let x1 = &spec.chol_l * &z;
        let eps_core: f64 = rng.sample(StandardNormal);
        let yi = x1.dot(&spec.beta) + spec.eta_core * eps_core;
        for j in 0..d1 {
            x[(i, j)] = x1[j];
        }
        for j in 0..d2 {
            let eps: f64 = rng.sample(StandardNormal);
            let shift = match env {
                Environment::Train => yi * spec.gamma[j],
                Environment::Test => 0.0,
            };
            x[(i, d1 + j)] = shift + spec.eta_spu * eps;
        }
        y[i] = yi;
    }
    (x, y)
}

/// Deterministic generator of valid mechanisms: `sigma` has eigenvalues
/// `lambda_max * decay^j` on a random orthonormal basis, `beta` is a random
/// unit vector in the top-k eigenspace with a non-negligible k-th coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecRecipe {
    pub d1: usize,
    pub d2: usize,
    pub m: usize,
    pub k: usize,
    pub lambda_max: f64,
    pub decay: f64,
    pub seed: u64,
}

impl SpecRecipe {
    pub fn build(&self, eta_core: f64, eta_spu: f64) -> Result<ProblemSpec> {
        let SpecRecipe { d1, d2, m, k, lambda_max, decay, seed } = *self;
        if !(k >= 1 && k <= d1) {
            return Err(ModelError::BadRank { k, m, d: d1 + d2 });
        }
        let mut rng = rng::stream(seed, &[label::SPEC]);
        let g = DMatrix::from_fn(d1, d1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let lambdas = DVector::from_fn(d1, |j, _| lambda_max * decay.powi(j as i32));
        let sigma = &q * DMatrix::from_diagonal(&lambdas) * q.transpose();
        let sigma = 0.5 * (&sigma + sigma.transpose());
        let mut coef: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        if coef[k - 1].abs() < 0.25 {
            coef[k - 1] = 0.25f64.copysign(coef[k - 1]);
        }
        let mut beta = DVector::zeros(d1);
        for (j, c) in coef.iter().enumerate() {
            beta += q.column(j) * *c;
        }
        let beta = beta.normalize();
        let gamma = DVector::from_fn(d2, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
        let raw = RawProblem {
            d1,
            d2,
            m,
            k,
            beta: beta.iter().cloned().collect(),
            gamma: gamma.iter().cloned().collect(),
            sigma: sigma.row_iter().map(|r| r.iter().cloned().collect()).collect(),
            eta_core,
            eta_spu,
            core_dist: CoreDist::Gaussian,
        };
        build_problem(raw, BuildOptions { project: true })
    }
}

/// Uncentered second moments of a finite sample, usable wherever the
/// population moments are.
#[derive(Debug, Clone, Serialize)]
pub struct SampleMoments {
    /// `X^T X / n`.
    pub h: DMatrix<f64>,
    /// `X^T y / n`.
    pub c: DVector<f64>,
    /// `y^T y / n`.
    pub ey2: f64,
    /// Least-squares coefficients (pseudo-inverse when `h` is singular).
    pub v_star: DVector<f64>,
    /// Half mean squared residual at `v_star`.
    pub min_loss: f64,
}

impl SampleMoments {
    pub fn from_data(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let n = x.nrows() as f64;
        let h = x.transpose() * x / n;
        let c = x.transpose() * y / n;
        let ey2 = y.norm_squared() / n;
        let v_star = match Cholesky::new(h.clone()) {
            Some(ch) => ch.solve(&c),
            None => crate::linalg::pinv_psd(&h, 1e-12) * &c,
        };
        let min_loss = (0.5 * (ey2 - v_star.dot(&c))).max(0.0);
        SampleMoments { h, c, ey2, v_star, min_loss }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn raw_padded(eta_core: f64, eta_spu: f64) -> RawProblem {
        // the scalar instance sigma=[1], beta=1, gamma=1 padded with a
        // decoupled second core coordinate
        RawProblem {
            d1: 2,
            d2: 1,
            m: 2,
            k: 1,
            beta: vec![1.0, 0.0],
            gamma: vec![1.0],
            sigma: vec![vec![1.0, 0.0], vec![0.0, 0.5]],
            eta_core,
            eta_spu,
            core_dist: CoreDist::Gaussian,
        }
    }

    #[test]
    fn rank_constraint_exhaustive() {
        // k < m < d has no solution for d = 2; smallest legal is d = 3 (k=1, m=2)
        for d1 in 1..=3usize {
            for d2 in 1..=3usize {
                let d = d1 + d2;
                let any = (1..=d1).any(|k| (1..d).any(|m| k < m && m < d));
                assert_eq!(any, d >= 3, "d1={d1} d2={d2}");
            }
        }
        let mut raw = raw_padded(0.1, 0.2);
        raw.d1 = 1;
        raw.beta = vec![1.0];
        raw.sigma = vec![vec![1.0]];
        raw.m = 1;
        assert!(matches!(build_problem(raw, BuildOptions::default()), Err(ModelError::BadRank { .. })));
        assert!(build_problem(raw_padded(0.1, 0.2), BuildOptions::default()).is_ok());
    }

    #[test]
    fn minimal_spec_with_two_spurious_dims() {
        let raw = RawProblem {
            d1: 2,
            d2: 2,
            m: 2,
            k: 1,
            beta: vec![1.0, 0.0],
            gamma: vec![0.6, 0.8],
            sigma: vec![vec![2.0, 0.0], vec![0.0, 1.0]],
            eta_core: 0.1,
            eta_spu: 0.2,
            core_dist: CoreDist::Gaussian,
        };
        assert!(build_problem(raw, BuildOptions::default()).is_ok());
    }

    #[test]
    fn identity_sigma_is_degenerate() {
        let mut raw = raw_padded(0.1, 0.2);
        raw.sigma = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(build_problem(raw, BuildOptions::default()), Err(ModelError::DegenerateSpectrum { .. })));
    }

    #[test]
    fn rejects_bad_sigma_and_weak_signal() {
        let mut raw = raw_padded(0.1, 0.2);
        raw.sigma = vec![vec![1.0, 0.0], vec![0.0, -0.5]];
        assert_eq!(build_problem(raw, BuildOptions::default()).unwrap_err(), ModelError::NonSpd);

        let mut raw = raw_padded(0.1, 0.2);
        raw.sigma = vec![vec![1.0, 0.1], vec![0.0, 0.5]];
        assert_eq!(build_problem(raw, BuildOptions::default()).unwrap_err(), ModelError::NonSymmetric);

        let raw = raw_padded(1.5, 0.2);
        assert!(matches!(build_problem(raw, BuildOptions::default()), Err(ModelError::SignalTooWeak { .. })));
    }

    #[test]
    fn beta_outside_span_needs_projection() {
        let mut raw = raw_padded(0.1, 0.2);
        raw.beta = vec![0.8, 0.6];
        assert!(matches!(build_problem(raw.clone(), BuildOptions::default()), Err(ModelError::BetaOutsideSpan { .. })));
        let spec = build_problem(raw, BuildOptions { project: true }).unwrap();
        assert_relative_eq!(spec.beta()[0], 1.0, epsilon = 1e-14);
        assert!(spec.beta()[1].abs() < 1e-14);
    }

    #[test]
    fn k_is_reduced_to_minimal_index() {
        let mut raw = raw_padded(0.1, 0.2);
        raw.d1 = 3;
        raw.m = 3;
        raw.k = 2;
        raw.beta = vec![1.0, 0.0, 0.0];
        raw.sigma = vec![vec![2.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.5]];
        let spec = build_problem(raw, BuildOptions::default()).unwrap();
        assert_eq!(spec.k(), 1);
    }

    #[test]
    fn scalar_instance_moments() {
        let spec = build_problem(raw_padded(0.1, 0.2), BuildOptions::default()).unwrap();
        let mo = population_moments(&spec);
        // coordinates (x1[0], x2[0]) form the scalar block
        assert_relative_eq!(mo.h[(0, 0)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(mo.h[(0, 2)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(mo.h[(2, 2)], 1.05, epsilon = 1e-15);
        assert_relative_eq!(mo.c[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(mo.c[2], 1.01, epsilon = 1e-15);
        assert_relative_eq!(mo.alpha, 0.8, epsilon = 1e-15);
        assert_relative_eq!(mo.v_star_tr[0], 0.8, epsilon = 1e-15);
        assert_relative_eq!(mo.v_star_tr[2], 0.2, epsilon = 1e-15);
        assert_relative_eq!(mo.err_star_tr, 0.004, epsilon = 1e-15);
        assert_relative_eq!(mo.err_star_te, 0.005, epsilon = 1e-15);
        let hv = &mo.h * &mo.v_star_tr;
        assert_relative_eq!(hv, mo.c, epsilon = 1e-15);
    }

    #[test]
    fn noiseless_and_symmetric_noise() {
        let spec = build_problem(raw_padded(0.0, 0.2), BuildOptions::default()).unwrap();
        let mo = population_moments(&spec);
        assert_eq!(mo.alpha, 1.0);
        assert_eq!(mo.err_star_tr, 0.0);
        assert_eq!(mo.err_star_te, 0.0);
        assert_eq!(mo.v_star_tr[2], 0.0);

        let spec = build_problem(raw_padded(0.2, 0.2), BuildOptions::default()).unwrap();
        let mo = population_moments(&spec);
        assert_relative_eq!(mo.alpha, 0.5);
        assert_relative_eq!(mo.err_star_tr, 0.04 / 4.0, epsilon = 1e-16);
    }

    #[test]
    fn scalar_instance_spectrum() {
        let spec = build_problem(raw_padded(0.1, 0.2), BuildOptions::default()).unwrap();
        let mo = population_moments(&spec);
        let sp = h_spectrum(&spec, &mo).unwrap();
        let vals = sp.coupled_values();
        // roots of mu^2 - 2.05 mu + 0.05
        let disc = (2.05f64 * 2.05 - 0.2).sqrt();
        assert_relative_eq!(vals[0], (2.05 + disc) / 2.0, epsilon = 1e-13);
        assert_relative_eq!(vals[1], (2.05 - disc) / 2.0, epsilon = 1e-13);
        // c1 = u1[spurious]/u1[core] for the top coupled vector
        let u = &sp.coupled[0].vector;
        assert_relative_eq!(sp.c1, u[2] / u[0], epsilon = 1e-12);
        assert_relative_eq!(sp.c1, 1.0253125, epsilon = 1e-6);
        assert!(sp.spurious_null.is_empty());
        assert_eq!(sp.core_tail.len(), 1);
        assert_eq!(sp.core_tail[0].value, 0.5);
    }

    #[test]
    fn regularity_scalar() {
        let spec = build_problem(raw_padded(0.1, 0.2), BuildOptions::default()).unwrap();
        let reg = regularity_check(&spec).unwrap();
        // -0.04 * (0.04 - 1)^-1 * 1 for the coupled coordinate, plus the
        // decoupled coordinate which has zero beta weight
        assert_relative_eq!(reg.rhs, 0.04 / 0.96, epsilon = 1e-15);
        assert!(reg.passes);

        let spec = build_problem(raw_padded(reg.rhs.sqrt(), 0.2), BuildOptions::default()).unwrap();
        assert!(!regularity_check(&spec).unwrap().passes);
        let mo = population_moments(&spec);
        assert!(matches!(h_spectrum(&spec, &mo), Err(ModelError::RegularityViolated { .. })));

        let spec = build_problem(raw_padded(0.1, 0.5f64.sqrt()), BuildOptions::default());
        // eta_spu^2 = 0.5 = lambda_2: the signal check passes (lambda_1 = 1 > 0.5)
        let spec = spec.unwrap();
        assert!(matches!(regularity_check(&spec), Err(ModelError::SingularResolvent { .. })));
    }

    #[test]
    fn secular_roots_interlace() {
        let lam = [3.0, 2.0, 1.0];
        let b2 = [0.2, 0.3, 0.5];
        let roots = secular_roots(&lam, &b2, 0.1).unwrap();
        assert_eq!(roots.len(), 4);
        assert!(roots[0] > 3.0 && roots[1] < 3.0 && roots[1] > 2.0);
        assert!(roots[2] < 2.0 && roots[2] > 1.0 && roots[3] < 1.0 && roots[3] > 0.0);
        for &mu in &roots {
            let rhs: f64 = lam.iter().zip(&b2).map(|(l, w)| mu * l * w / (mu - l)).sum::<f64>() + 0.1;
            assert_relative_eq!(mu, rhs, epsilon = 1e-11, max_relative = 1e-11);
        }
    }

    #[test]
    fn json_round_trip_uses_listed_field_names() {
        let spec = build_problem(raw_padded(0.1, 0.2), BuildOptions::default()).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        for key in ["d1", "d2", "m", "k", "beta", "gamma", "sigma", "eta_core", "eta_spu", "core_dist"] {
            assert!(text.contains(&format!("\"{key}\"")), "{key} missing in {text}");
        }
        let back: ProblemSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_raw(), spec.to_raw());
        let bad = text.replace("\"m\":2", "\"m\":5");
        assert!(serde_json::from_str::<ProblemSpec>(&bad).is_err());
    }
}
