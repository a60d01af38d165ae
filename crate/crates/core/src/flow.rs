//! Gradient flow of the two-layer linear network `x -> x W b` on a quadratic
//! objective, for plain ERM and for training with a frozen leading block of
//! columns of `W`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{min_singular_value, spectral_norm, sym_eigen_desc};
use crate::model::{PopulationMoments, ProblemSpec, SampleMoments};
use crate::probe::optimal_probe;
use crate::rng::{self, label};

/// Smallest step the halving loop may reach.
pub const MIN_STEP: f64 = 1e-12;
/// Trace samples per decade of flow time.
pub const SAMPLES_PER_DECADE: usize = 64;
/// First nonzero trace sample time.
pub const FIRST_SAMPLE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("frozen block has {pm} columns, must be fewer than m = {m}")]
    BadFrozenWidth { pm: usize, m: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("required step {h:e} fell below {min:e}")]
    StepUnderflow { h: f64, min: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("bad horizon: {0}")]
    BadHorizon(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Quadratic objective `0.5 (v^T H v - 2 v^T c + ey2)` the flow descends.
pub trait FlowObjective: Sync {
    fn h(&self) -> &DMatrix<f64>;
    fn c(&self) -> &DVector<f64>;
    fn ey2(&self) -> f64;
    fn v_star(&self) -> &DVector<f64>;
    /// Objective value at `v_star`.
    fn min_loss(&self) -> f64;

    fn loss(&self, v: &DVector<f64>) -> f64 {
        0.5 * (v.dot(&(self.h() * v)) - 2.0 * v.dot(self.c()) + self.ey2())
    }

    /// `0.5 ||v - v*||_H^2`.
    fn excess(&self, v: &DVector<f64>) -> f64 {
        let delta = v - self.v_star();
        0.5 * delta.dot(&(self.h() * &delta))
    }
}

impl FlowObjective for PopulationMoments {
    fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    fn c(&self) -> &DVector<f64> {
        &self.c
    }
    fn ey2(&self) -> f64 {
        self.ey2
    }
    fn v_star(&self) -> &DVector<f64> {
        &self.v_star_tr
    }
    fn min_loss(&self) -> f64 {
        self.err_star_tr
    }
}

impl FlowObjective for SampleMoments {
    fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    fn c(&self) -> &DVector<f64> {
        &self.c
    }
    fn ey2(&self) -> f64 {
        self.ey2
    }
    fn v_star(&self) -> &DVector<f64> {
        &self.v_star
    }
    fn min_loss(&self) -> f64 {
        self.min_loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkState {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub t: f64,
    /// Leading columns of `w` held fixed.
    pub frozen_cols: usize,
    /// Conserved matrix of the trainable block at `t = 0`.
    pub m0: DMatrix<f64>,
}

impl NetworkState {
    /// Builds a state from explicit parameters at `t = 0`.
    pub fn new(w: DMatrix<f64>, b: DVector<f64>, frozen_cols: usize) -> Result<Self> {
        if b.len() != w.ncols() {
            return Err(FlowError::DimensionMismatch(format!(
                "W has {} columns, b has {} entries",
                w.ncols(),
                b.len()
            )));
        }
        if frozen_cols >= w.ncols() {
            return Err(FlowError::BadFrozenWidth { pm: frozen_cols, m: w.ncols() });
        }
        let m0 = trainable_invariant(&w, &b, frozen_cols);
        Ok(NetworkState { w, b, t: 0.0, frozen_cols, m0 })
    }

    pub fn v(&self) -> DVector<f64> {
        &self.w * &self.b
    }
}

/// `W_s^T W_s - b_s b_s^T` over the trainable columns `s`.
fn trainable_invariant(w: &DMatrix<f64>, b: &DVector<f64>, frozen: usize) -> DMatrix<f64> {
    let m = w.ncols();
    let ws = w.columns(frozen, m - frozen);
    let bs = b.rows(frozen, m - frozen);
    ws.transpose() * ws - bs * bs.transpose()
}

/// `M(t) = W^T W - b b^T` for the trainable block and `||M(t) - M(0)||_F`.
pub fn conserved_matrix(state: &NetworkState) -> (DMatrix<f64>, f64) {
    let m = trainable_invariant(&state.w, &state.b, state.frozen_cols);
    let drift = (&m - &state.m0).norm();
    (m, drift)
}

/// Uniform initialization on `[-1/sqrt(d), 1/sqrt(d)]` for `W` and
/// `[-1/sqrt(m), 1/sqrt(m)]` for `b`; the trainable block and `b` are scaled
/// down to spectral norm 1 if needed. A frozen block replaces the leading
/// columns after drawing, so the trainable draws do not depend on it.
pub fn init_state_dims(d: usize, m: usize, seed: u64, frozen: Option<&DMatrix<f64>>) -> Result<NetworkState> {
    let mut rng = rng::stream(seed, &[label::INIT]);
    let aw = 1.0 / (d as f64).sqrt();
    let ab = 1.0 / (m as f64).sqrt();
    let mut w = DMatrix::from_fn(d, m, |_, _| rng.gen_range(-aw..=aw));
    let mut b = DVector::from_fn(m, |_, _| rng.gen_range(-ab..=ab));
    let pm = match frozen {
        Some(f) => {
            if f.nrows() != d {
                return Err(FlowError::DimensionMismatch(format!("frozen block has {} rows, want {d}", f.nrows())));
            }
            if f.ncols() >= m {
                return Err(FlowError::BadFrozenWidth { pm: f.ncols(), m });
            }
            f.ncols()
        }
        None => 0,
    };
    {
        let mut ws = w.columns_mut(pm, m - pm);
        let s = spectral_norm(&ws.clone_owned());
        if s > 1.0 {
            ws /= s;
        }
    }
    let nb = b.norm();
    if nb > 1.0 {
        b /= nb;
    }
    if let Some(f) = frozen {
        w.columns_mut(0, pm).copy_from(f);
    }
    NetworkState::new(w, b, pm)
}

pub fn init_state(spec: &ProblemSpec, seed: u64, frozen: Option<&DMatrix<f64>>) -> Result<NetworkState> {
    init_state_dims(spec.d(), spec.m(), seed, frozen)
}

/// `dW = (c - H W b) b^T` with frozen columns zeroed, `db = W^T (c - H W b)`.
pub fn flow_derivative<O: FlowObjective + ?Sized>(state: &NetworkState, obj: &O) -> (DMatrix<f64>, DVector<f64>) {
    let r = obj.c() - obj.h() * (&state.w * &state.b);
    let mut dw = &r * state.b.transpose();
    dw.columns_mut(0, state.frozen_cols).fill(0.0);
    let db = state.w.transpose() * r;
    (dw, db)
}

/// Population losses and monitors at a state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Losses {
    pub loss_tr: f64,
    /// Probed test loss, when a population spec is available.
    pub loss_te: Option<f64>,
    /// `gamma^T W2 b`.
    pub c_t: Option<f64>,
    /// Smallest singular value of the core rows `W1`.
    pub min_sv_w1: Option<f64>,
}

/// Spec used for the population-only diagnostics of a trace.
pub type TraceContext<'a> = Option<&'a ProblemSpec>;

pub fn losses<O: FlowObjective + ?Sized>(state: &NetworkState, obj: &O, ctx: TraceContext<'_>) -> Losses {
    let v = state.v();
    let loss_tr = obj.loss(&v);
    match ctx {
        Some(spec) => {
            let d1 = spec.d1();
            let loss_te = optimal_probe(&state.w, spec).test_loss;
            let c_t = spec.gamma().dot(&v.rows(d1, spec.d2()));
            let w1 = state.w.rows(0, d1).into_owned();
            Losses { loss_tr, loss_te: Some(loss_te), c_t: Some(c_t), min_sv_w1: Some(min_singular_value(&w1)) }
        }
        None => Losses { loss_tr, loss_te: None, c_t: None, min_sv_w1: None },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceSample {
    pub t: f64,
    pub loss_tr: f64,
    /// `loss_tr - min_loss` computed without cancellation.
    pub excess_tr: f64,
    pub loss_te: Option<f64>,
    pub c_t: Option<f64>,
    pub drift: f64,
    /// Running minimum of `||v||` up to `t`.
    pub min_norm_v: f64,
    pub min_sv_w1: Option<f64>,
    /// `||v - v*||`.
    pub dist_v_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowTrace {
    pub samples: Vec<TraceSample>,
    pub steps: u64,
    /// Step size of the accepted run.
    pub h: f64,
    pub halvings: u32,
    pub drift_max: f64,
}

impl FlowTrace {
    pub fn last(&self) -> &TraceSample {
        self.samples.last().expect("trace is never empty")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["t", "loss_tr", "loss_te", "c_t", "drift", "min_norm_v", "min_sv_W1"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for s in &self.samples {
            wtr.write_record([
                format!("{:e}", s.t),
                format!("{:e}", s.loss_tr),
                opt(s.loss_te),
                opt(s.c_t),
                format!("{:e}", s.drift),
                format!("{:e}", s.min_norm_v),
                opt(s.min_sv_w1),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Horizon {
    /// Integrate to this flow time.
    Fixed { t_end: f64 },
    /// Integrate decade by decade (ends at powers of ten, at least `t_min`)
    /// until the training excess is at most `rel_excess * min_loss` and
    /// `||v - v*|| <= v_tol`, or `t_max` is reached.
    Auto {
        rel_excess: f64,
        /// `null` in JSON stands for no bound.
        #[serde(with = "inf_as_null", default = "infinite")]
        v_tol: f64,
        t_min: f64,
        t_max: f64,
    },
}

fn infinite() -> f64 {
    f64::INFINITY
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl Horizon {
    pub fn fixed(t_end: f64) -> Self {
        Horizon::Fixed { t_end }
    }
}

impl Default for Horizon {
    fn default() -> Self {
        Horizon::Auto { rel_excess: 1e-3, v_tol: f64::INFINITY, t_min: 100.0, t_max: 1e6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct IntegrateOptions {
    pub horizon: Horizon,
    /// Bound on the conserved-matrix drift over the run.
    pub tolerance: f64,
    /// Initial step; defaults to a stability estimate from `H` and the state.
    pub h0: Option<f64>,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions { horizon: Horizon::default(), tolerance: 1e-8, h0: None }
    }
}

/// Flat-buffer RK4 kernel; `y = [vec(W) column-major, b]`.
struct Kernel<'a> {
    h: &'a DMatrix<f64>,
    c: &'a DVector<f64>,
    d: usize,
    m: usize,
    frozen: usize,
    v: Vec<f64>,
    r: Vec<f64>,
}

impl<'a> Kernel<'a> {
    fn new<O: FlowObjective + ?Sized>(obj: &'a O, d: usize, m: usize, frozen: usize) -> Self {
        Kernel { h: obj.h(), c: obj.c(), d, m, frozen, v: vec![0.0; d], r: vec![0.0; d] }
    }

    fn deriv(&mut self, y: &[f64], dy: &mut [f64]) {
        let (d, m) = (self.d, self.m);
        let (w, b) = y.split_at(d * m);
        for i in 0..d {
            self.v[i] = 0.0;
        }
        for j in 0..m {
            let bj = b[j];
            let col = &w[j * d..(j + 1) * d];
            for i in 0..d {
                self.v[i] += col[i] * bj;
            }
        }
        let hs = self.h.as_slice();
        for i in 0..d {
            self.r[i] = self.c[i];
        }
        for j in 0..d {
            let vj = self.v[j];
            let col = &hs[j * d..(j + 1) * d];
            for i in 0..d {
                self.r[i] -= col[i] * vj;
            }
        }
        let (dw, db) = dy.split_at_mut(d * m);
        for j in 0..m {
            let col = &w[j * d..(j + 1) * d];
            let dcol = &mut dw[j * d..(j + 1) * d];
            let mut acc = 0.0;
            if j < self.frozen {
                dcol.fill(0.0);
                for i in 0..d {
                    acc += col[i] * self.r[i];
                }
            } else {
                let bj = b[j];
                for i in 0..d {
                    dcol[i] = self.r[i] * bj;
                    acc += col[i] * self.r[i];
                }
            }
            db[j] = acc;
        }
    }
}

struct Rk4<'a> {
    kernel: Kernel<'a>,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    start: usize,
}

impl<'a> Rk4<'a> {
    fn new(kernel: Kernel<'a>, y: &[f64]) -> Self {
        let n = y.len();
        let start = kernel.frozen * kernel.d;
        Rk4 { kernel, k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]], tmp: y.to_vec(), start }
    }

    fn step(&mut self, y: &mut [f64], h: f64) {
        let s = self.start;
        let n = y.len();
        let [k1, k2, k3, k4] = &mut self.k;
        self.kernel.deriv(y, k1);
        for i in s..n {
            self.tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        self.kernel.deriv(&self.tmp, k2);
        for i in s..n {
            self.tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        self.kernel.deriv(&self.tmp, k3);
        for i in s..n {
            self.tmp[i] = y[i] + h * k3[i];
        }
        self.kernel.deriv(&self.tmp, k4);
        let h6 = h / 6.0;
        for i in s..n {
            y[i] += h6 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
        }
    }
}

/// Step size from the local curvature: the Jacobian of the flow is bounded
/// by `lambda_max(H) (||W||^2 + ||b||^2 + 2 ||c - H v|| / lambda_max)`; the
/// result is conservative and refined by halving.
pub fn default_step<O: FlowObjective + ?Sized>(state: &NetworkState, obj: &O) -> f64 {
    let (vals, _) = sym_eigen_desc(obj.h());
    let lmax = vals[0].max(f64::MIN_POSITIVE);
    let rho = lmax * (2.0 + 2.0 * obj.v_star().norm() + spectral_norm(&state.w).powi(2) + state.b.norm_squared());
    1.0 / rho
}

fn sample_times_until(t_end: f64, t0: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut j = 0i32;
    loop {
        let t = FIRST_SAMPLE * 10f64.powf(j as f64 / SAMPLES_PER_DECADE as f64);
        if t >= t_end {
            break;
        }
        if t > t0 {
            out.push(t);
        }
        j += 1;
    }
    out.push(t_end);
    out
}

enum RunOutcome {
    Done(NetworkState, FlowTrace),
    TooCoarse,
}

/// Integrates from `state` to the horizon with RK4 at a fixed step, halving
/// the step and restarting until the conserved drift stays within
/// `opts.tolerance`.
pub fn integrate<O: FlowObjective + ?Sized>(
    state: &NetworkState,
    obj: &O,
    opts: &IntegrateOptions,
    ctx: TraceContext<'_>,
) -> Result<(NetworkState, FlowTrace)> {
    if !(opts.tolerance > 0.0) {
        return Err(FlowError::BadHorizon(format!("tolerance {} must be positive", opts.tolerance)));
    }
    match opts.horizon {
        Horizon::Fixed { t_end } if !(t_end > state.t) => {
            return Err(FlowError::BadHorizon(format!("t_end {t_end} must exceed t = {}", state.t)))
        }
        Horizon::Auto { t_min, t_max, .. } if !(t_max >= t_min && t_min > state.t) => {
            return Err(FlowError::BadHorizon(format!("need t < t_min <= t_max, got {t_min}, {t_max}")))
        }
        _ => {}
    }
    if obj.h().nrows() != state.w.nrows() {
        return Err(FlowError::DimensionMismatch(format!(
            "objective has dimension {}, W has {} rows",
            obj.h().nrows(),
            state.w.nrows()
        )));
    }
    let mut h = opts.h0.unwrap_or_else(|| default_step(state, obj));
    let mut halvings = 0;
    let mut last_nonfinite = None;
    loop {
        if h < MIN_STEP {
            return Err(match last_nonfinite {
                Some(t) => FlowError::NonFinite { t },
                None => FlowError::StepUnderflow { h, min: MIN_STEP },
            });
        }
        match run_fixed_step(state, obj, opts, ctx, h, halvings) {
            Ok(RunOutcome::Done(s, tr)) => return Ok((s, tr)),
            Ok(RunOutcome::TooCoarse) => {}
            Err(FlowError::NonFinite { t }) => last_nonfinite = Some(t),
            Err(e) => return Err(e),
        }
        h *= 0.5;
        halvings += 1;
    }
}

fn run_fixed_step<O: FlowObjective + ?Sized>(
    state0: &NetworkState,
    obj: &O,
    opts: &IntegrateOptions,
    ctx: TraceContext<'_>,
    h: f64,
    halvings: u32,
) -> Result<RunOutcome> {
    let (d, m) = state0.w.shape();
    let mut y: Vec<f64> = state0.w.as_slice().iter().chain(state0.b.iter()).copied().collect();
    let mut rk = Rk4::new(Kernel::new(obj, d, m, state0.frozen_cols), &y);
    let mut state = state0.clone();
    let mut t = state0.t;
    let mut steps = 0u64;
    let mut samples = Vec::new();
    let mut min_norm_v = f64::INFINITY;
    let mut drift_max = 0.0f64;

    let record = |state: &NetworkState, min_norm_v: &mut f64, drift_max: &mut f64| -> Result<TraceSample> {
        let v = state.v();
        if v.iter().any(|x| !x.is_finite()) || state.b.iter().any(|x| !x.is_finite()) {
            return Err(FlowError::NonFinite { t: state.t });
        }
        let l = losses(state, obj, ctx);
        let (_, drift) = conserved_matrix(state);
        *min_norm_v = min_norm_v.min(v.norm());
        *drift_max = drift_max.max(drift);
        Ok(TraceSample {
            t: state.t,
            loss_tr: l.loss_tr,
            excess_tr: obj.excess(&v),
            loss_te: l.loss_te,
            c_t: l.c_t,
            drift,
            min_norm_v: *min_norm_v,
            min_sv_w1: l.min_sv_w1,
            dist_v_star: (&v - obj.v_star()).norm(),
        })
    };
    samples.push(record(&state, &mut min_norm_v, &mut drift_max)?);

    let sync = |state: &mut NetworkState, y: &[f64], t: f64| {
        state.w.as_mut_slice().copy_from_slice(&y[..d * m]);
        state.b.as_mut_slice().copy_from_slice(&y[d * m..]);
        state.t = t;
    };

    // segments: a single one for a fixed horizon, decades for the auto rule
    let mut seg_end = match opts.horizon {
        Horizon::Fixed { t_end } => t_end,
        Horizon::Auto { t_min, t_max, .. } => {
            let mut e = 10f64.powf(t.max(FIRST_SAMPLE).log10().floor() + 1.0);
            while e < t_min {
                e *= 10.0;
            }
            e.min(t_max)
        }
    };
    loop {
        for target in sample_times_until(seg_end, t) {
            while t < target {
                let dt = if target - t < h * (1.0 + 1e-9) { target - t } else { h };
                rk.step(&mut y, dt);
                steps += 1;
                t = if dt == h { t + h } else { target };
            }
            sync(&mut state, &y, t);
            let s = record(&state, &mut min_norm_v, &mut drift_max)?;
            if drift_max > opts.tolerance {
                return Ok(RunOutcome::TooCoarse);
            }
            samples.push(s);
        }
        match opts.horizon {
            Horizon::Fixed { .. } => break,
            Horizon::Auto { rel_excess, v_tol, t_max, .. } => {
                let last = samples.last().expect("nonempty");
                let excess_ok = last.excess_tr <= (rel_excess * obj.min_loss()).max(1e-14);
                if (excess_ok && last.dist_v_star <= v_tol) || seg_end >= t_max {
                    break;
                }
                seg_end = (seg_end * 10.0).min(t_max);
            }
        }
    }
    Ok(RunOutcome::Done(state, FlowTrace { samples, steps, h, halvings, drift_max }))
}
