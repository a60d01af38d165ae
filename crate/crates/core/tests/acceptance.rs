//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spurlab::certify::{certify_case, thm2_lower_bound, CaseOptions, CaseOutcome, CertifyConfig, ClaimId, Verdict};
use spurlab::flow::{conserved_matrix, FlowTrace, IntegrateOptions};
use spurlab::model::{h_spectrum, population_moments, sample_dataset, Environment, ProblemSpec, SpecRecipe};
use spurlab::noise::{
    drop_to_spurious_target, flip_core_noise, largest_remainder, make_dominoes, BlobSampler, GroupedDataset, TIE_ORDER,
};
use spurlab::probe::{empirical_probe, test_loss_ratio, ProbeProtocol};
use spurlab::runner::{
    derive_seed, run_grid, run_pablation, with_threads, BenchmarkRecipe, CertificationPlan, ExperimentConfig, Method,
    NoiseGrid, ProblemSource, CONVERGED,
};

type Outcome = Result<String, String>;

fn check(ok: bool, pass: String, fail: impl FnOnce() -> String) -> Outcome {
    if ok {
        Ok(pass)
    } else {
        Err(fail())
    }
}

// ---------------------------------------------------------------------------
// independent oracles

/// Training moments assembled from the mechanism's primitives.
fn oracle_train_moments(spec: &ProblemSpec) -> (DMatrix<f64>, DVector<f64>, f64) {
    let (d1, d2) = (spec.d1(), spec.d2());
    let (e1, e2) = (spec.eta_core().powi(2), spec.eta_spu().powi(2));
    let s = spec.sigma();
    let beta = spec.beta();
    let gamma = spec.gamma();
    let g = (beta.transpose() * s * beta)[(0, 0)];
    let d = d1 + d2;
    let mut h = DMatrix::zeros(d, d);
    let mut c = DVector::zeros(d);
    for i in 0..d {
        for j in 0..d {
            h[(i, j)] = match (i < d1, j < d1) {
                (true, true) => s[(i, j)],
                (true, false) => (s * beta)[i] * gamma[j - d1],
                (false, true) => (s * beta)[j] * gamma[i - d1],
                (false, false) => {
                    let diag = if i == j { e2 } else { 0.0 };
                    diag + (e1 + g) * gamma[i - d1] * gamma[j - d1]
                }
            };
        }
        c[i] = if i < d1 { (s * beta)[i] } else { (g + e1) * gamma[i - d1] };
    }
    (h, c, g + e1)
}

/// Optimal last-layer refit on `W` in the test environment.
fn oracle_probe_loss(w: &DMatrix<f64>, spec: &ProblemSpec) -> f64 {
    let (d1, d2) = (spec.d1(), spec.d2());
    let e2 = spec.eta_spu().powi(2);
    let mut h = DMatrix::zeros(d1 + d2, d1 + d2);
    h.view_mut((0, 0), (d1, d1)).copy_from(spec.sigma());
    for j in 0..d2 {
        h[(d1 + j, d1 + j)] = e2;
    }
    let mut c = DVector::zeros(d1 + d2);
    c.rows_mut(0, d1).copy_from(&(spec.sigma() * spec.beta()));
    let ey2 = (spec.beta().transpose() * spec.sigma() * spec.beta())[(0, 0)] + spec.eta_core().powi(2);
    let a = w.transpose() * &h * w;
    let r = w.transpose() * &c;
    let b = a.pseudo_inverse(1e-12).expect("pseudo-inverse") * &r;
    0.5 * (ey2 - r.dot(&b))
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn random_specs(count: usize, seed: u64) -> Vec<ProblemSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < count {
        let d1 = rng.gen_range(3..=12);
        let d2 = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=d1.min(4));
        let m = rng.gen_range(k + 1..d1 + d2);
        let recipe = SpecRecipe {
            d1,
            d2,
            m,
            k,
            lambda_max: rng.gen_range(1.0..3.0),
            decay: rng.gen_range(0.6..0.95),
            seed: rng.gen(),
        };
        if let Ok(spec) = recipe.build(rng.gen_range(0.01..0.4), rng.gen_range(0.01..0.4)) {
            out.push(spec);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// criteria

fn closed_form_consistency() -> Outcome {
    let mut worst_res = 0.0f64;
    let mut worst_err = 0.0f64;
    for spec in random_specs(50, 11) {
        let mom = population_moments(&spec);
        let (h, c, ey2) = oracle_train_moments(&spec);
        let v = h.clone().lu().solve(&c).ok_or("singular oracle H")?;
        let res = (&mom.h * &mom.v_star_tr - &mom.c).norm() / mom.c.norm();
        let dv = (&v - &mom.v_star_tr).norm() / v.norm();
        worst_res = worst_res.max(res).max(dv).max((&mom.h - &h).norm() / h.norm());
        let (e1, e2) = (spec.eta_core().powi(2), spec.eta_spu().powi(2));
        let formula = e1 * e2 / (2.0 * (e1 + e2));
        let direct = 0.5 * (ey2 - c.dot(&v));
        let err = ((mom.err_star_tr - formula).abs() / formula).max((direct - formula).abs() / formula);
        worst_err = worst_err.max(err);
    }
    check(
        worst_res <= 1e-10 && worst_err <= 1e-10,
        format!("50 specs, residual {worst_res:.1e}, err*_tr rel. error {worst_err:.1e}"),
        || format!("residual {worst_res:.1e}, err*_tr rel. error {worst_err:.1e}"),
    )
}

fn monte_carlo_oracle() -> Outcome {
    let n = 100_000;
    let mut worst = 0.0f64;
    for (i, spec) in random_specs(10, 12).into_iter().enumerate() {
        let mom = population_moments(&spec);
        let (x, y) = sample_dataset(&spec, n, Environment::Train, 100 + i as u64);
        let h = x.transpose() * &x / n as f64;
        let c = x.transpose() * &y / n as f64;
        let eh = (&h - &mom.h).norm() / mom.h.norm();
        let ec = (&c - &mom.c).norm() / mom.c.norm();
        worst = worst.max(eh).max(ec);
    }
    check(worst <= 0.03, format!("10 specs, worst relative Frobenius error {worst:.4}"), || {
        format!("worst relative Frobenius error {worst:.4} > 0.03")
    })
}

fn certified_cases() -> Result<Vec<(String, ProblemSpec, CaseOutcome)>, String> {
    let plan = CertificationPlan::default();
    let opts = |seed| CaseOptions {
        init_seed: derive_seed(0, seed),
        ftt_p: None,
        integrate: IntegrateOptions { horizon: CONVERGED, tolerance: 1e-8, h0: None },
        certify: CertifyConfig::default(),
    };
    let mut out = Vec::new();
    for case in &plan.cases {
        let spec = case.problem.build(case.eta_core, case.eta_spu).map_err(|e| e.to_string())?;
        let o = CaseOptions { ftt_p: case.ftt_p, ..opts(case.init_seed) };
        let outcome = certify_case(&case.name, &spec, &o).map_err(|e| e.to_string())?;
        out.push((case.name.clone(), spec, outcome));
    }
    Ok(out)
}

fn conservation(cases: &[(String, ProblemSpec, CaseOutcome)]) -> Outcome {
    let mut worst = 0.0f64;
    let mut runs = 0;
    for (_, _, o) in cases {
        let runs_of = std::iter::once(&o.erm).chain(o.ftt.as_ref());
        for (state, trace) in runs_of {
            worst = worst.max(conserved_matrix(state).1).max(trace.drift_max);
            runs += 1;
        }
    }
    check(worst <= 1e-8, format!("{runs} trajectories, max drift {worst:.2e}"), || {
        format!("max drift {worst:.2e} > 1e-8")
    })
}

/// Max of `excess * t` over the samples with `t` in `(lo, hi]`.
fn excess_t_max(trace: &FlowTrace, lo: f64, hi: f64) -> f64 {
    trace.samples.iter().filter(|s| s.t > lo && s.t <= hi).map(|s| s.excess_tr * s.t).fold(0.0, f64::max)
}

fn training_convergence(cases: &[(String, ProblemSpec, CaseOutcome)]) -> Outcome {
    let mut worst_rel = 0.0f64;
    for (name, spec, o) in cases {
        let (state, trace) = &o.erm;
        let (h, c, ey2) = oracle_train_moments(spec);
        let v = state.v();
        let loss = 0.5 * (v.dot(&(&h * &v)) - 2.0 * v.dot(&c) + ey2);
        let err = population_moments(spec).err_star_tr;
        let rel = (loss - err) / err;
        worst_rel = worst_rel.max(rel);
        if rel > 0.01 {
            return Err(format!("{name}: loss_tr {loss:.6e} vs err*_tr {err:.6e}"));
        }
        let t_end = trace.last().t;
        let last = excess_t_max(trace, t_end / 10.0, t_end);
        let prev = excess_t_max(trace, t_end / 100.0, t_end / 10.0);
        if t_end < 100.0 || last > prev * (1.0 + 1e-6) + 1e-15 {
            return Err(format!("{name}: (loss - err*)·t final-decade max {last:.3e} vs previous {prev:.3e}"));
        }
        if o.report.get(ClaimId::Lemma1).verdict != Verdict::Pass
            || o.report.get(ClaimId::LemD3).verdict != Verdict::Pass
        {
            return Err(format!("{name}: certificate verdicts disagree"));
        }
    }
    Ok(format!("{} runs, worst relative excess {worst_rel:.2e}, excess·t bounded", cases.len()))
}

fn small_core_probing(cases: &[(String, ProblemSpec, CaseOutcome)]) -> Outcome {
    let mut ratios = Vec::new();
    for (name, spec, o) in cases.iter().filter(|(_, s, _)| s.eta_core() < s.eta_spu()) {
        let (e1, e2) = (spec.eta_core().powi(2), spec.eta_spu().powi(2));
        let loss = oracle_probe_loss(&o.erm.0.w, spec);
        let bound = (1.0 + e1 / e2) * (e1 / 2.0) * 1.05;
        if loss > bound {
            return Err(format!("{name}: probed loss {loss:.4e} > {bound:.4e}"));
        }
        ratios.push(format!("{:.4}", loss / (e1 / 2.0)));
    }
    check(ratios.len() == 5, format!("5 specs, loss/err*_te = [{}]", ratios.join(", ")), || {
        format!("{} small-core specs, expected 5", ratios.len())
    })
}

fn probing_gap(cases: &[(String, ProblemSpec, CaseOutcome)]) -> Outcome {
    let mut ratios = Vec::new();
    let mut noise_ratios = Vec::new();
    for (name, spec, o) in cases.iter().filter(|(_, s, _)| s.eta_core() > s.eta_spu()) {
        let w = &o.erm.0.w;
        let err_te = spec.eta_core().powi(2) / 2.0;
        let ratio = oracle_probe_loss(w, spec) / err_te;
        let w1 = w.rows(0, spec.d1()).into_owned();
        let lambda_min = SymmetricEigen::new(spec.sigma().clone()).eigenvalues.min();
        let smin = w1.singular_values().min();
        let (e1, e2) = (spec.eta_core().powi(2), spec.eta_spu().powi(2));
        let lb = 1.0 + e1 / (2.0 * e2) * (lambda_min * smin * smin / (2.0 * e2)).min(1.0);
        if (lb - thm2_lower_bound(spec, &w1)).abs() > 1e-10 * lb {
            return Err(format!("{name}: bound {lb} disagrees with the library"));
        }
        let closed = test_loss_ratio(w, spec, &population_moments(spec))
            .map_err(|e| e.to_string())?
            .closed_form
            .ok_or_else(|| format!("{name}: no closed form"))?;
        if !(ratio >= lb && ratio > 1.5 && (closed - ratio).abs() <= 1e-6 * ratio) {
            return Err(format!("{name}: ratio {ratio:.6} bound {lb:.6} closed form {closed:.9}"));
        }
        ratios.push(format!("{ratio:.3}>={lb:.3}"));
        noise_ratios.push((spec.eta_core() / spec.eta_spu()).round() as u32);
    }
    noise_ratios.sort_unstable();
    noise_ratios.dedup();
    check(
        ratios.len() == 5 && noise_ratios == [3, 6],
        format!("5 specs, eta ratios {{3, 6}}, ratio vs bound [{}]", ratios.join(", ")),
        || format!("{} large-core specs with eta ratios {noise_ratios:?}", ratios.len()),
    )
}

fn ftt_closes_gap(cases: &[(String, ProblemSpec, CaseOutcome)]) -> Outcome {
    let mut out = Vec::new();
    for (name, spec, o) in cases.iter().filter(|(_, s, _)| s.eta_core() > s.eta_spu()) {
        let (state, _) = o.ftt.as_ref().ok_or_else(|| format!("{name}: no FTT run"))?;
        if !(state.frozen_cols > spec.k()) {
            return Err(format!("{name}: pm = {} <= k", state.frozen_cols));
        }
        let err_te = spec.eta_core().powi(2) / 2.0;
        let ftt = oracle_probe_loss(&state.w, spec);
        let erm = oracle_probe_loss(&o.erm.0.w, spec);
        if ftt > err_te * 1.02 {
            return Err(format!("{name}: FTT loss {ftt:.6e} > 1.02 * {err_te:.6e}"));
        }
        out.push(format!("{:.4}/{:.3}", ftt / err_te, erm / err_te));
    }
    check(out.len() == 5, format!("FTT/ERM loss over err*_te [{}]", out.join(", ")), || {
        "missing paired FTT runs".into()
    })
}

fn secular_spectrum(cases: &[(String, ProblemSpec, CaseOutcome)]) -> Outcome {
    let mut specs: Vec<ProblemSpec> = cases.iter().map(|(_, s, _)| s.clone()).collect();
    specs.extend(random_specs(20, 13));
    let mut worst_eig = 0.0f64;
    let mut worst_span = 0.0f64;
    for spec in &specs {
        let mom = population_moments(spec);
        let sp = h_spectrum(spec, &mom).map_err(|e| e.to_string())?;
        let (vals, xi) = sp.assemble();
        let dense = sorted_desc(SymmetricEigen::new(mom.h.clone()).eigenvalues.iter().cloned().collect());
        for (a, b) in vals.iter().zip(&dense) {
            worst_eig = worst_eig.max((a - b).abs() / dense[0]);
        }
        let k = spec.k();
        let top = xi.columns(0, k).into_owned();
        let mut u = DVector::zeros(spec.d());
        u.rows_mut(0, spec.d1()).copy_from(spec.beta());
        u.rows_mut(spec.d1(), spec.d2()).copy_from(&(spec.gamma() * sp.c1));
        let proj = &top * (top.transpose() * &u);
        worst_span = worst_span.max((&u - proj).norm() / u.norm());
        // coupled values interlace the eigenvalues of sigma carrying beta
        let mu = sp.coupled_values();
        let lam: Vec<f64> = sorted_desc(spec.lambdas().iter().cloned().collect())[..k].to_vec();
        let tol = 1e-12 * mu[0];
        for j in 0..k {
            if !(mu[j + 1] <= lam[j] + tol && lam[j] <= mu[j] + tol) {
                return Err(format!("interlacing fails at {j}: mu {mu:?} lambda {lam:?}"));
            }
        }
    }
    check(
        worst_eig <= 1e-8 && worst_span <= 1e-8,
        format!(
            "{} specs, eigenvalue error {worst_eig:.1e}, span residual {worst_span:.1e}, interlacing holds",
            specs.len()
        ),
        || format!("eigenvalue error {worst_eig:.1e}, span residual {worst_span:.1e}"),
    )
}

fn sign_pattern() -> Outcome {
    let cfg = ExperimentConfig { methods: vec![Method::Init, Method::Erm], ..Default::default() };
    let res = run_grid(&cfg).map_err(|e| e.to_string())?;
    if let Some(r) = res.records.iter().find(|r| r.error.is_some()) {
        return Err(format!("record failed: {:?}", r.error));
    }
    let imps: Vec<_> = res.improvements.iter().filter(|i| i.method == Method::Erm).collect();
    let at = |c: f64, s: f64| imps.iter().find(|i| i.eta_core == c && i.eta_spu == s).map(|i| i.mean);
    let lo = at(0.05, 0.25).ok_or("missing cell")?;
    let hi = at(0.25, 0.05).ok_or("missing cell")?;
    let x: Vec<f64> = imps.iter().map(|i| i.eta_spu - i.eta_core).collect();
    let y: Vec<f64> = imps.iter().map(|i| i.mean).collect();
    let rho = spearman(&y, &x);
    check(
        imps.len() == 25 && lo > 0.0 && hi < 0.0 && rho >= 0.8,
        format!("low-core corner {lo:+.4}, high-core corner {hi:+.4}, Spearman {rho:.3}"),
        || format!("{} cells, low-core {lo:+.4}, high-core {hi:+.4}, Spearman {rho:.3}", imps.len()),
    )
}

fn dataset_from_counts(counts: [usize; 4]) -> GroupedDataset {
    let mut y = Vec::new();
    let mut a = Vec::new();
    for (gi, &(l, s)) in TIE_ORDER.iter().enumerate() {
        y.extend(std::iter::repeat(l).take(counts[gi]));
        a.extend(std::iter::repeat(s).take(counts[gi]));
    }
    let n = y.len();
    GroupedDataset::new(DMatrix::from_fn(n, 1, |i, _| i as f64), y.clone(), y, a).expect("valid dataset")
}

/// `(spurious noise, core noise)` counted directly from the labels.
fn measured_noise(ds: &GroupedDataset) -> (f64, f64) {
    let n = ds.len() as f64;
    let spu = ds.y_obs.iter().zip(&ds.spurious_attr).filter(|(y, a)| y != a).count() as f64 / n;
    let core = ds.y_obs.iter().zip(&ds.y_true).filter(|(y, t)| y != t).count() as f64 / n;
    (spu, core)
}

fn label_noise_machinery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 2000;
    let tol = 1.0 / n as f64 + 1e-12;
    for trial in 0..100 {
        let p0: f64 = rng.gen_range(0.2..0.8);
        let s: f64 = rng.gen_range(0.5..0.95);
        let eta = rng.gen_range(0.0f64..1.8 * (1.0 - s)).min(0.49);
        let q = [p0 * s, (1.0 - p0) * (1.0 - s), p0 * (1.0 - s), (1.0 - p0) * s].map(|f| f * n as f64);
        let c = largest_remainder(&q, n);
        let ds = dataset_from_counts([c[0], c[1], c[2], c[3]]);
        let (spu0, _) = measured_noise(&ds);
        let out = flip_core_noise(&ds, eta, trial).map_err(|e| format!("({p0:.3}, {s:.3}, {eta:.3}): {e}"))?;
        let (spu1, core1) = measured_noise(&out);
        if out.len() != n || (spu1 - spu0).abs() > tol || (core1 - eta).abs() > tol {
            return Err(format!("({p0:.3}, {s:.3}, {eta:.3}): spurious {spu0:.4} -> {spu1:.4}, core {core1:.4}"));
        }
    }
    let ds = dataset_from_counts([300, 20, 400, 280]);
    let (start, _) = measured_noise(&ds);
    let out = drop_to_spurious_target(&ds, 0.06, 0).map_err(|e| e.to_string())?;
    let (end, _) = measured_noise(&out);
    check(
        (start - 0.42).abs() < 1e-12 && (end - 0.06).abs() <= 1.0 / out.len() as f64,
        format!("100 flip triples within 1/n; drop {start:.2} -> {end:.4} keeping {} of {} rows", out.len(), ds.len()),
        || format!("drop {start:.2} -> {end:.4}"),
    )
}

fn probing_protocol() -> Outcome {
    let blob = BlobSampler::default();
    let ds = make_dominoes(&blob, &blob, 1000, 0.1, 0.2, Environment::Train, 15).map_err(|e| e.to_string())?;
    let report = empirical_probe(&ds.x, &ds.y_obs, &ds.spurious_attr, &ProbeProtocol::default(), 15, None)
        .map_err(|e| e.to_string())?;
    if report.balanced_counts.len() != report.resample_count || report.balanced_counts.iter().any(|c| c[0] != c[1]) {
        return Err(format!("unbalanced resamples {:?}", report.balanced_counts));
    }
    let cfg = ExperimentConfig {
        problem: ProblemSource::Benchmark(BenchmarkRecipe {
            n_train: 600,
            n_probe: 400,
            n_eval: 400,
            ..Default::default()
        }),
        noise_grid: NoiseGrid { eta_core: vec![0.05, 0.2], eta_spu: vec![0.05, 0.2] },
        seeds: vec![0, 1],
        ..Default::default()
    };
    let run = |threads| -> Result<String, String> {
        with_threads(Some(threads), || run_grid(&cfg))
            .and_then(|r| r)
            .and_then(|r| r.csv_string())
            .map_err(|e| e.to_string())
    };
    let (a, b, c) = (run(4)?, run(4)?, run(1)?);
    let pop = ExperimentConfig {
        noise_grid: NoiseGrid { eta_core: vec![0.1], eta_spu: vec![0.2] },
        seeds: vec![0],
        ..Default::default()
    };
    let pop_run = |threads| -> Result<String, String> {
        with_threads(Some(threads), || run_grid(&pop))
            .and_then(|r| r)
            .and_then(|r| r.csv_string())
            .map_err(|e| e.to_string())
    };
    let (p, q) = (pop_run(1)?, pop_run(3)?);
    check(
        a == b && a == c && p == q,
        format!(
            "{} balanced resamples of {} rows each; CSV identical across runs and 1/4 threads ({} bytes)",
            report.resample_count,
            2 * report.balanced_counts[0][0],
            a.len()
        ),
        || "CSV output differs between runs".into(),
    )
}

fn p_ablation() -> Outcome {
    let base = ExperimentConfig { p_values: vec![0.0, 0.25, 0.5, 0.75], ..Default::default() };
    let mut lines = Vec::new();
    for (eta_core, eta_spu) in [(0.25, 0.05), (0.02, 0.25)] {
        let cfg = ExperimentConfig {
            noise_grid: NoiseGrid { eta_core: vec![eta_core], eta_spu: vec![eta_spu] },
            ..base.clone()
        };
        let res = run_pablation(&cfg).map_err(|e| e.to_string())?;
        let mean = |p: f64| -> Result<f64, String> {
            let v: Vec<f64> = res.records.iter().filter(|r| r.p == Some(p)).filter_map(|r| r.loss_te).collect();
            if v.len() != cfg.seeds.len() {
                return Err(format!("missing records at p = {p}"));
            }
            Ok(v.iter().sum::<f64>() / v.len() as f64)
        };
        let p0 = mean(0.0)?;
        let best = [0.25, 0.5, 0.75].iter().map(|&p| mean(p)).collect::<Result<Vec<_>, _>>()?;
        let best = best.into_iter().fold(f64::INFINITY, f64::min);
        let ok = if eta_core > eta_spu { best < p0 } else { p0 <= best.min(p0) * 1.02 };
        if !ok {
            return Err(format!("({eta_core}, {eta_spu}): p=0 loss {p0:.5e}, best frozen {best:.5e}"));
        }
        lines.push(format!("({eta_core}, {eta_spu}): p=0 {p0:.4e} best {best:.4e}"));
    }
    Ok(lines.join("; "))
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(&str, Outcome, f64)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let out = f();
        results.push((name, out, t.elapsed().as_secs_f64()));
    };
    run("1 closed-form consistency", &closed_form_consistency);
    run("2 Monte-Carlo moments", &monte_carlo_oracle);

    let t = Instant::now();
    let cases = certified_cases();
    let cert_time = t.elapsed().as_secs_f64();
    let with_cases = |f: fn(&[(String, ProblemSpec, CaseOutcome)]) -> Outcome| -> Outcome {
        match &cases {
            Ok(c) => f(c),
            Err(e) => Err(format!("certification run failed: {e}")),
        }
    };
    run("3 conservation", &|| with_cases(conservation).map(|s| format!("{s} ({cert_time:.1} s)")));
    run("4 training-loss convergence", &|| with_cases(training_convergence));
    run("5 probing with small core noise", &|| with_cases(small_core_probing));
    run("6 probing gap with large core noise", &|| with_cases(probing_gap));
    run("7 freeze-then-train closes the gap", &|| with_cases(ftt_closes_gap));
    run("8 secular spectrum", &|| with_cases(secular_spectrum));
    run("9 noise-grid sign pattern", &sign_pattern);
    run("10 label-noise machinery", &label_noise_machinery);
    run("11 probing protocol and determinism", &probing_protocol);
    run("12 frozen-fraction ablation", &p_ablation);

    let mut failed = 0;
    for (name, out, secs) in &results {
        match out {
            Ok(msg) => println!("PASS  criterion {name}: {msg} [{secs:.1} s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  criterion {name}: {msg} [{secs:.1} s]");
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1} s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
