//! Test-time probing: refit the last layer on frozen features.
//!
//! The closed-form part works at the population level of the linear model;
//! the empirical part is the balanced-resampling protocol on finite grouped
//! data, with L2 logistic or ridge heads.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{pinv_psd, sym_eigen_desc};
use crate::model::{PopulationMoments, ProblemSpec};
use crate::rng::{self, label};

/// Relative cutoff for the pseudo-inverse of the probe normal matrix.
pub const PINV_CUTOFF: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("test-loss ratio undefined: eta_core = 0")]
    RatioUndefined,
    #[error("spurious group {0} is empty")]
    EmptyGroup(u8),
    #[error("optimizer did not reach tolerance {tol:e} in {iters} iterations (grad norm {grad:e})")]
    DidNotConverge { iters: usize, tol: f64, grad: f64 },
    #[error("bad PCA dimension {dim} for {features} features")]
    BadDim { dim: usize, features: usize },
    #[error("bad probe input: {0}")]
    BadInput(String),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, Serialize)]
pub struct OptimalProbe {
    pub b: DVector<f64>,
    pub test_loss: f64,
}

/// Splits `W` into its core rows `W1` (`d1 x m`) and spurious rows `W2`.
pub fn split_rows(w: &DMatrix<f64>, d1: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let d2 = w.nrows() - d1;
    (w.rows(0, d1).into_owned(), w.rows(d1, d2).into_owned())
}

/// Head minimizing the test-environment loss for features `x W`.
pub fn optimal_probe(w: &DMatrix<f64>, spec: &ProblemSpec) -> OptimalProbe {
    let (w1, w2) = split_rows(w, spec.d1());
    let sigma = spec.sigma();
    let beta = spec.beta();
    let e1 = spec.eta_core().powi(2);
    let e2 = spec.eta_spu().powi(2);
    let sw1 = sigma * &w1;
    let a = w1.transpose() * &sw1 + (w2.transpose() * &w2) * e2;
    let rhs = sw1.transpose() * beta;
    let b = pinv_psd(&a, PINV_CUTOFF) * rhs;
    let test_loss = test_loss_of(&w1, &w2, &b, spec, e1, e2);
    OptimalProbe { b, test_loss }
}

fn test_loss_of(w1: &DMatrix<f64>, w2: &DMatrix<f64>, b: &DVector<f64>, spec: &ProblemSpec, e1: f64, e2: f64) -> f64 {
    let r = w1 * b - spec.beta();
    let core = r.dot(&(spec.sigma() * &r));
    let spu = (w2 * b).norm_squared();
    0.5 * (e1 + core + e2 * spu)
}

/// Test loss of an arbitrary head `b` on features `x W`.
pub fn probe_test_loss(w: &DMatrix<f64>, b: &DVector<f64>, spec: &ProblemSpec) -> f64 {
    let (w1, w2) = split_rows(w, spec.d1());
    test_loss_of(&w1, &w2, b, spec, spec.eta_core().powi(2), spec.eta_spu().powi(2))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossRatio {
    /// Probed test loss over `err*_te`.
    pub ratio: f64,
    /// `1 + (eta1^2/eta2^2) gamma^T (I + eta2^2 W2 L^{-1} W2^T)^{-1} gamma` with
    /// `L = W1^T sigma W1`, when `L` is invertible. It equals `ratio` whenever
    /// `W` reproduces the training optimum `v*` in its column space.
    pub closed_form: Option<f64>,
}

pub fn test_loss_ratio(w: &DMatrix<f64>, spec: &ProblemSpec, moments: &PopulationMoments) -> Result<LossRatio> {
    if spec.eta_core() == 0.0 {
        return Err(ProbeError::RatioUndefined);
    }
    let ratio = optimal_probe(w, spec).test_loss / moments.err_star_te;
    let (w1, w2) = split_rows(w, spec.d1());
    let lam = w1.transpose() * spec.sigma() * &w1;
    let (vals, _) = sym_eigen_desc(&lam);
    let invertible = vals.len() > 0 && vals[vals.len() - 1] > 1e-12 * vals[0].max(f64::MIN_POSITIVE);
    let closed_form = if invertible {
        lam.clone().cholesky().map(|ch| {
            let e1 = spec.eta_core().powi(2);
            let e2 = spec.eta_spu().powi(2);
            let d2 = w2.nrows();
            let inner = DMatrix::identity(d2, d2) + &w2 * ch.solve(&w2.transpose()) * e2;
            let g = spec.gamma();
            let sol = inner.lu().solve(g).unwrap_or_else(|| DVector::from_element(d2, f64::NAN));
            1.0 + (e1 / e2) * g.dot(&sol)
        })
    } else {
        None
    };
    Ok(LossRatio { ratio, closed_form })
}

// ---------------------------------------------------------------------------
// empirical protocol

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Logistic,
    Ridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeProtocol {
    pub head: HeadKind,
    /// Candidate inverse regularization strengths `C`.
    pub c_grid: Vec<f64>,
    pub resamples: usize,
    /// Fraction of the probe set used for fitting; the rest selects `C`.
    pub fit_fraction: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProbeProtocol {
    fn default() -> Self {
        ProbeProtocol {
            head: HeadKind::Logistic,
            c_grid: vec![1e-2, 1e-1, 1.0, 10.0, 1e2],
            resamples: 10,
            fit_fraction: 0.5,
            tol: 1e-8,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub chosen_reg: f64,
    /// Accuracy per spurious-attribute value on the evaluation rows.
    pub per_group_accuracy: BTreeMap<u8, f64>,
    pub worst_group_accuracy: f64,
    pub average_accuracy: f64,
    pub resample_count: usize,
    /// Per-resample counts of the two spurious groups after balancing.
    pub balanced_counts: Vec<[usize; 2]>,
}

/// Rows on which a probe is scored.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub features: &'a DMatrix<f64>,
    pub labels: &'a [u8],
    pub spurious: &'a [u8],
}

/// L2-penalized binary head, `sum_i loss_i + ||w||^2 / (2C)` with unpenalized
/// bias, minimized by accelerated gradient descent with backtracking.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[u8], c: f64, tol: f64, max_iter: usize) -> Result<(DVector<f64>, f64)> {
    let n = x.nrows();
    let f = x.ncols();
    let yv = DVector::from_iterator(n, y.iter().map(|&v| v as f64));
    // objective scaled by 1/n so that the tolerance is size independent
    let lam = 1.0 / (c * n as f64);
    let objective = |theta: &DVector<f64>| -> (f64, DVector<f64>) {
        let w = theta.rows(0, f);
        let z = x * w + DVector::from_element(n, theta[f]);
        let mut loss = 0.0;
        let mut resid = DVector::zeros(n);
        for i in 0..n {
            let zi = z[i];
            // log(1 + e^z) - y z, stable in both tails
            loss += zi.max(0.0) + (-zi.abs()).exp().ln_1p() - yv[i] * zi;
            resid[i] = sigmoid(zi) - yv[i];
        }
        loss /= n as f64;
        let mut grad = DVector::zeros(f + 1);
        grad.rows_mut(0, f).copy_from(&(x.transpose() * &resid / n as f64 + w * lam));
        grad[f] = resid.sum() / n as f64;
        (loss + 0.5 * lam * w.norm_squared(), grad)
    };

    let mut theta = DVector::zeros(f + 1);
    let mut prev = theta.clone();
    let mut momentum = 1.0f64;
    // Lipschitz estimate: (0.25 * ||[X 1]||^2 / n) + lam
    let mut lip = {
        let mut xa = DMatrix::from_element(n, f + 1, 1.0);
        xa.view_mut((0, 0), (n, f)).copy_from(x);
        0.25 * crate::linalg::spectral_norm(&xa).powi(2) / n as f64 + lam
    }
    .max(1e-12);
    let (_, mut grad) = objective(&theta);
    for iter in 0..max_iter {
        if grad.norm() <= tol {
            return Ok((theta.rows(0, f).into_owned(), theta[f]));
        }
        let next_m = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let mix = (momentum - 1.0) / next_m;
        let look = &theta + (&theta - &prev) * mix;
        let (f_look, g_look) = objective(&look);
        let g2 = g_look.norm_squared();
        // backtracking on the lookahead point; once the predicted decrease is
        // below roundoff the test carries no information and is skipped
        let mut cand;
        loop {
            cand = &look - &g_look * (1.0 / lip);
            if g2 / lip <= 1e-13 * f_look.abs().max(1e-300) {
                break;
            }
            let (f_cand, _) = objective(&cand);
            if f_cand <= f_look - 0.5 * g2 / lip {
                break;
            }
            lip *= 2.0;
        }
        let (_, g_new) = objective(&cand);
        // gradient restart
        if g_look.dot(&(&cand - &theta)) > 0.0 {
            momentum = 1.0;
        } else {
            momentum = next_m;
        }
        prev = std::mem::replace(&mut theta, cand);
        grad = g_new;
        if iter % 64 == 63 {
            // let the step size grow back after conservative backtracking
            lip *= 0.9;
        }
    }
    if grad.norm() <= tol {
        return Ok((theta.rows(0, f).into_owned(), theta[f]));
    }
    Err(ProbeError::DidNotConverge { iters: max_iter, tol, grad: grad.norm() })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Ridge regression on 0/1 targets with unpenalized intercept, penalty `||w||^2 / (2C)`
/// against half the summed squared error.
pub fn fit_ridge(x: &DMatrix<f64>, y: &[u8], c: f64) -> (DVector<f64>, f64) {
    let n = x.nrows();
    let f = x.ncols();
    let mean_x = DVector::from_iterator(f, x.column_iter().map(|col| col.sum() / n as f64));
    let mean_y = y.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let mut xc = x.clone();
    for j in 0..f {
        let mj = mean_x[j];
        xc.column_mut(j).add_scalar_mut(-mj);
    }
    let yc = DVector::from_iterator(n, y.iter().map(|&v| v as f64 - mean_y));
    let a = xc.transpose() * &xc + DMatrix::identity(f, f) * (1.0 / c);
    let rhs = xc.transpose() * yc;
    let w = a.cholesky().map(|ch| ch.solve(&rhs)).unwrap_or_else(|| DVector::zeros(f));
    let bias = mean_y - mean_x.dot(&w);
    (w, bias)
}

fn predict(x: &DMatrix<f64>, w: &DVector<f64>, bias: f64, head: HeadKind) -> Vec<u8> {
    let z = x * w;
    let thr = match head {
        HeadKind::Logistic => 0.0,
        HeadKind::Ridge => 0.5,
    };
    z.iter().map(|&v| u8::from(v + bias > thr)).collect()
}

/// `(per-group accuracy, worst-group, average)` grouped by spurious attribute.
pub fn score(
    x: &DMatrix<f64>,
    labels: &[u8],
    spurious: &[u8],
    w: &DVector<f64>,
    bias: f64,
    head: HeadKind,
) -> (BTreeMap<u8, f64>, f64, f64) {
    let pred = predict(x, w, bias, head);
    let mut hits: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for i in 0..labels.len() {
        let e = hits.entry(spurious[i]).or_insert((0, 0));
        e.1 += 1;
        if pred[i] == labels[i] {
            e.0 += 1;
        }
    }
    let per: BTreeMap<u8, f64> = hits.iter().map(|(&g, &(h, n))| (g, h as f64 / n as f64)).collect();
    let worst = per.values().cloned().fold(f64::INFINITY, f64::min);
    let total_hits: usize = hits.values().map(|v| v.0).sum();
    let avg = total_hits as f64 / labels.len().max(1) as f64;
    (per, worst, avg)
}

fn rows_of(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    x.select_rows(idx.iter())
}

/// Random subset of `idx` in which spurious groups 0 and 1 have equal counts.
fn balanced_subsample<R: rand::Rng>(idx: &[usize], spurious: &[u8], rng: &mut R) -> Vec<usize> {
    let mut g0: Vec<usize> = idx.iter().copied().filter(|&i| spurious[i] == 0).collect();
    let mut g1: Vec<usize> = idx.iter().copied().filter(|&i| spurious[i] == 1).collect();
    let n = g0.len().min(g1.len());
    g0.shuffle(rng);
    g1.shuffle(rng);
    let mut out: Vec<usize> = g0[..n].iter().chain(&g1[..n]).copied().collect();
    out.sort_unstable();
    out
}

/// Balanced-resampling probe: `C` is chosen by worst-group accuracy on the
/// held-out half, then heads from `resamples` balanced draws are averaged.
/// The final head is scored on `eval` if given, else on the held-out half.
pub fn empirical_probe(
    features: &DMatrix<f64>,
    labels: &[u8],
    spurious: &[u8],
    protocol: &ProbeProtocol,
    seed: u64,
    eval: Option<EvalSet<'_>>,
) -> Result<ProbeReport> {
    let n = features.nrows();
    if labels.len() != n || spurious.len() != n {
        return Err(ProbeError::BadInput(format!(
            "{n} feature rows, {} labels, {} spurious attributes",
            labels.len(),
            spurious.len()
        )));
    }
    if protocol.c_grid.is_empty() || protocol.resamples == 0 {
        return Err(ProbeError::BadInput("empty regularization grid or zero resamples".into()));
    }
    for g in 0..2u8 {
        if !spurious.iter().any(|&s| s == g) {
            return Err(ProbeError::EmptyGroup(g));
        }
    }
    let mut rng = rng::stream(seed, &[label::PROBE]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_fit = ((n as f64) * protocol.fit_fraction).round() as usize;
    let (fit_idx, sel_idx) = order.split_at(n_fit.clamp(1, n - 1));
    let mut fit_idx = fit_idx.to_vec();
    let mut sel_idx = sel_idx.to_vec();
    fit_idx.sort_unstable();
    sel_idx.sort_unstable();
    for g in 0..2u8 {
        if !fit_idx.iter().any(|&i| spurious[i] == g) {
            return Err(ProbeError::EmptyGroup(g));
        }
    }
    let x_sel = rows_of(features, &sel_idx);
    let y_sel: Vec<u8> = sel_idx.iter().map(|&i| labels[i]).collect();
    let s_sel: Vec<u8> = sel_idx.iter().map(|&i| spurious[i]).collect();

    let fit_head = |rows: &[usize], c: f64| -> Result<(DVector<f64>, f64)> {
        let x = rows_of(features, rows);
        let y: Vec<u8> = rows.iter().map(|&i| labels[i]).collect();
        match protocol.head {
            HeadKind::Logistic => fit_logistic(&x, &y, c, protocol.tol, protocol.max_iter),
            HeadKind::Ridge => Ok(fit_ridge(&x, &y, c)),
        }
    };

    let mut best: Option<(f64, f64)> = None;
    for &c in &protocol.c_grid {
        let rows = balanced_subsample(&fit_idx, spurious, &mut rng);
        let (w, bias) = fit_head(&rows, c)?;
        let (_, worst, _) = score(&x_sel, &y_sel, &s_sel, &w, bias, protocol.head);
        if best.map_or(true, |(_, bw)| worst > bw) {
            best = Some((c, worst));
        }
    }
    let chosen = best.expect("nonempty grid").0;

    let f = features.ncols();
    let mut w_avg = DVector::zeros(f);
    let mut b_avg = 0.0;
    let mut balanced_counts = Vec::with_capacity(protocol.resamples);
    for _ in 0..protocol.resamples {
        let rows = balanced_subsample(&fit_idx, spurious, &mut rng);
        let c0 = rows.iter().filter(|&&i| spurious[i] == 0).count();
        balanced_counts.push([c0, rows.len() - c0]);
        let (w, bias) = fit_head(&rows, chosen)?;
        w_avg += w;
        b_avg += bias;
    }
    w_avg /= protocol.resamples as f64;
    b_avg /= protocol.resamples as f64;

    let (per, worst, avg) = match eval {
        Some(e) => score(e.features, e.labels, e.spurious, &w_avg, b_avg, protocol.head),
        None => score(&x_sel, &y_sel, &s_sel, &w_avg, b_avg, protocol.head),
    };
    Ok(ProbeReport {
        weights: w_avg.iter().cloned().collect(),
        bias: b_avg,
        chosen_reg: chosen,
        per_group_accuracy: per,
        worst_group_accuracy: worst,
        average_accuracy: avg,
        resample_count: protocol.resamples,
        balanced_counts,
    })
}

/// Principal axes of a feature matrix (uncentered rows are centered first).
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// Orthonormal columns, by decreasing explained variance.
    pub components: DMatrix<f64>,
    /// Sample-covariance eigenvalues, descending (all of them).
    pub variances: DVector<f64>,
}

impl Pca {
    pub fn fit(x: &DMatrix<f64>, dim: usize) -> Result<Pca> {
        let (n, f) = x.shape();
        if dim == 0 || dim > f {
            return Err(ProbeError::BadDim { dim, features: f });
        }
        let mean = DVector::from_iterator(f, x.column_iter().map(|c| c.sum() / n as f64));
        let xc = centered(x, &mean);
        let cov = xc.transpose() * &xc / n as f64;
        let (vals, vecs) = sym_eigen_desc(&cov);
        Ok(Pca { mean, components: vecs.columns(0, dim).into_owned(), variances: vals })
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        centered(x, &self.mean) * &self.components
    }

    /// Mean squared reconstruction error on `x` per row.
    pub fn reconstruction_error(&self, x: &DMatrix<f64>) -> f64 {
        let xc = centered(x, &self.mean);
        let rec = &xc * &self.components * self.components.transpose();
        (xc - rec).norm_squared() / x.nrows() as f64
    }
}

fn centered(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    out
}

/// PCA fitted label-free on the probe features, then [`empirical_probe`] on
/// the projection. `eval` rows are projected with the same transform.
pub fn pca_project_probe(
    features: &DMatrix<f64>,
    labels: &[u8],
    spurious: &[u8],
    dim: usize,
    protocol: &ProbeProtocol,
    seed: u64,
    eval: Option<EvalSet<'_>>,
) -> Result<ProbeReport> {
    let pca = Pca::fit(features, dim)?;
    let z = pca.transform(features);
    match eval {
        Some(e) => {
            let ze = pca.transform(e.features);
            let projected = EvalSet { features: &ze, labels: e.labels, spurious: e.spurious };
            empirical_probe(&z, labels, spurious, protocol, seed, Some(projected))
        }
        None => empirical_probe(&z, labels, spurious, protocol, seed, None),
    }
}
