//! Unimodal performance-epoch curve models.
//!
//! Each family is an increasing bounded term `g(t)` plus a concave quadratic
//! `h(t) = a t + b t^2` with `b < 0`. The sign constraints make `f'` strictly
//! decreasing on `t >= 0`, so the curve has a single maximum: the knee.

pub mod corpus;
pub mod solver;

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use self::solver::{Bounds, LeastSquaresProblem, SolverSettings, Termination};

/// Strict negativity is enforced as `alpha <= -EPS`.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CurveError {
    #[error("{family} takes {expected} parameters, got {got}")]
    ParamCount {
        family: CurveFamily,
        expected: usize,
        got: usize,
    },
    #[error("observation series is empty")]
    EmptySeries,
    #[error("epochs must be strictly increasing (epoch {0} follows {1})")]
    EpochOrder(u32, u32),
    #[error("metric {0} at epoch {1} is not a finite value in [0, 1]")]
    MetricRange(f64, u32),
    #[error("{family} needs at least {needed} observations, got {got}")]
    InsufficientData {
        family: CurveFamily,
        needed: usize,
        got: usize,
    },
    #[error("no start converged for {}; best rmse {:.3e}", .best.family, .best.rmse)]
    FitFailure { best: Box<CurveFit> },
    #[error("unknown curve family `{0}`")]
    UnknownFamily(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveFamily {
    Power,
    MultiPower,
    Exponential,
    MultiExponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Saturation {
    Power,
    Exp,
}

impl CurveFamily {
    pub const ALL: [CurveFamily; 4] = [
        CurveFamily::Power,
        CurveFamily::MultiPower,
        CurveFamily::Exponential,
        CurveFamily::MultiExponential,
    ];

    pub fn n_params(self) -> usize {
        match self {
            CurveFamily::Power | CurveFamily::Exponential => 5,
            CurveFamily::MultiPower | CurveFamily::MultiExponential => 7,
        }
    }

    /// Zero-based indices of the parameters that must be strictly negative.
    pub fn negative_params(self) -> &'static [usize] {
        match self {
            CurveFamily::Power | CurveFamily::Exponential => &[1, 2, 4],
            CurveFamily::MultiPower | CurveFamily::MultiExponential => &[1, 2, 3, 4, 6],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CurveFamily::Power => "power",
            CurveFamily::MultiPower => "multi-power",
            CurveFamily::Exponential => "exponential",
            CurveFamily::MultiExponential => "multi-exponential",
        }
    }

    fn saturation(self) -> Saturation {
        match self {
            CurveFamily::Power | CurveFamily::MultiPower => Saturation::Power,
            CurveFamily::Exponential | CurveFamily::MultiExponential => Saturation::Exp,
        }
    }

    fn n_terms(self) -> usize {
        (self.n_params() - 3) / 2
    }

    pub fn bounds(self) -> Bounds {
        let mut b = Bounds::unbounded(self.n_params());
        for &i in self.negative_params() {
            b.upper[i] = -EPS;
        }
        b
    }

    pub fn satisfies_constraints(self, alpha: &[f64]) -> bool {
        alpha.len() == self.n_params()
            && alpha.iter().all(|a| a.is_finite())
            && self.negative_params().iter().all(|&i| alpha[i] <= -EPS)
    }

    fn check_len(self, alpha: &[f64]) -> Result<(), CurveError> {
        if alpha.len() != self.n_params() {
            return Err(CurveError::ParamCount {
                family: self,
                expected: self.n_params(),
                got: alpha.len(),
            });
        }
        Ok(())
    }

    /// `f(t)`, no length check.
    fn value(self, alpha: &[f64], t: f64) -> f64 {
        let sat = self.saturation();
        let mut v = alpha[0];
        for k in 0..self.n_terms() {
            let (c, e) = (alpha[1 + 2 * k], alpha[2 + 2 * k]);
            v += c * basis(sat, e, t);
        }
        let lin = self.n_params() - 2;
        v + alpha[lin] * t + alpha[lin + 1] * t * t
    }

    /// `f'(t)`, no length check.
    fn slope(self, alpha: &[f64], t: f64) -> f64 {
        let mut d = 0.0;
        for k in 0..self.n_terms() {
            let (c, e) = (alpha[1 + 2 * k], alpha[2 + 2 * k]);
            d += match self.saturation() {
                Saturation::Power => c * e * (t + 1.0).powf(e - 1.0),
                Saturation::Exp => c * e * (e * t).exp(),
            };
        }
        let lin = self.n_params() - 2;
        d + alpha[lin] + 2.0 * alpha[lin + 1] * t
    }

    /// Gradient of `f(t)` with respect to the parameters.
    fn param_gradient(self, alpha: &[f64], t: f64, out: &mut [f64]) {
        out[0] = 1.0;
        for k in 0..self.n_terms() {
            let (c, e) = (alpha[1 + 2 * k], alpha[2 + 2 * k]);
            let b = basis(self.saturation(), e, t);
            out[1 + 2 * k] = b;
            out[2 + 2 * k] = match self.saturation() {
                Saturation::Power => c * b * (t + 1.0).ln(),
                Saturation::Exp => c * b * t,
            };
        }
        let lin = self.n_params() - 2;
        out[lin] = t;
        out[lin + 1] = t * t;
    }
}

fn basis(sat: Saturation, e: f64, t: f64) -> f64 {
    match sat {
        Saturation::Power => (t + 1.0).powf(e),
        Saturation::Exp => (e * t).exp(),
    }
}

impl fmt::Display for CurveFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CurveFamily {
    type Err = CurveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "power" | "pow" => Ok(CurveFamily::Power),
            "multi-power" | "multi_power" => Ok(CurveFamily::MultiPower),
            "exp" | "exponential" => Ok(CurveFamily::Exponential),
            "multi-exp" | "multi-exponential" | "multi_exponential" => Ok(CurveFamily::MultiExponential),
            other => Err(CurveError::UnknownFamily(other.to_string())),
        }
    }
}

/// `f(t)` for the given family and parameters.
pub fn evaluate(family: CurveFamily, alpha: &[f64], t: f64) -> Result<f64, CurveError> {
    family.check_len(alpha)?;
    Ok(family.value(alpha, t))
}

/// `f'(t)` for the given family and parameters.
pub fn derivative(family: CurveFamily, alpha: &[f64], t: f64) -> Result<f64, CurveError> {
    family.check_len(alpha)?;
    Ok(family.slope(alpha, t))
}

/// Exponential-family parameters with a prescribed shape.
///
/// The curve starts at `start`, saturates towards `start + gain` at rate
/// `rate < 0`, bends down with quadratic coefficient `-curvature` and peaks
/// exactly at `knee`.
pub fn exponential_with_knee(start: f64, gain: f64, rate: f64, curvature: f64, knee: f64) -> [f64; 5] {
    let linear = gain * rate * (rate * knee).exp() + 2.0 * curvature * knee;
    [start + gain, -gain, rate, linear, -curvature]
}

/// Validation metric observed after each epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObservationSeries {
    points: Vec<(u32, f64)>,
}

impl ObservationSeries {
    pub fn new(points: Vec<(u32, f64)>) -> Result<Self, CurveError> {
        if points.is_empty() {
            return Err(CurveError::EmptySeries);
        }
        let mut series = ObservationSeries::default();
        for (t, y) in points {
            series.push(t, y)?;
        }
        Ok(series)
    }

    /// Appends one observation, keeping epochs strictly increasing.
    pub fn push(&mut self, epoch: u32, metric: f64) -> Result<(), CurveError> {
        if let Some(&(last, _)) = self.points.last() {
            if epoch <= last {
                return Err(CurveError::EpochOrder(epoch, last));
            }
        }
        if !(0.0..=1.0).contains(&metric) {
            return Err(CurveError::MetricRange(metric, epoch));
        }
        self.points.push((epoch, metric));
        Ok(())
    }

    pub fn points(&self) -> &[(u32, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first_epoch(&self) -> Option<u32> {
        self.points.first().map(|p| p.0)
    }

    pub fn last_epoch(&self) -> Option<u32> {
        self.points.last().map(|p| p.0)
    }

    pub fn metric_at(&self, epoch: u32) -> Option<f64> {
        self.points
            .binary_search_by_key(&epoch, |p| p.0)
            .ok()
            .map(|i| self.points[i].1)
    }

    /// Epoch of the highest observed metric; earliest on ties.
    pub fn argmax_epoch(&self) -> Option<u32> {
        let mut best: Option<(u32, f64)> = None;
        for &(t, y) in &self.points {
            if best.is_none_or(|(_, b)| y > b) {
                best = Some((t, y));
            }
        }
        best.map(|b| b.0)
    }
}

/// A fitted curve together with its diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    pub family: CurveFamily,
    pub alpha: Vec<f64>,
    pub rmse: f64,
    /// `None` when the series is constant.
    pub r_square: Option<f64>,
    /// Standard deviation estimate of the observation noise.
    pub residual_std: f64,
    pub knee: f64,
    pub horizon: f64,
}

impl CurveFit {
    pub fn value(&self, t: f64) -> f64 {
        self.family.value(&self.alpha, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub starts: usize,
    pub seed: u64,
    pub solver: SolverSettings,
    /// Tried before the heuristic starts, e.g. the previous epoch's solution.
    pub warm_start: Option<Vec<f64>>,
    /// Knee search interval end; defaults to the last observed epoch.
    pub horizon: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            starts: 5,
            seed: 0,
            solver: SolverSettings::default(),
            warm_start: None,
            horizon: None,
        }
    }
}

struct SeriesProblem<'a> {
    family: CurveFamily,
    t: Vec<f64>,
    y: &'a [(u32, f64)],
}

impl LeastSquaresProblem for SeriesProblem<'_> {
    fn n_params(&self) -> usize {
        self.family.n_params()
    }

    fn n_residuals(&self) -> usize {
        self.t.len()
    }

    fn residuals(&self, x: &[f64], out: &mut [f64]) {
        for ((o, &t), &(_, y)) in out.iter_mut().zip(&self.t).zip(self.y) {
            *o = self.family.value(x, t) - y;
        }
    }

    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        let mut row = vec![0.0; self.family.n_params()];
        for (i, &t) in self.t.iter().enumerate() {
            self.family.param_gradient(x, t, &mut row);
            for (j, v) in row.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
    }
}

/// Starting points for the multi-start schedule.
fn initial_guesses(series: &ObservationSeries, family: CurveFamily, opts: &FitOptions) -> Vec<Vec<f64>> {
    let pts = series.points();
    let y0 = pts[0].1;
    let y_max = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let t_max = pts.last().unwrap().0 as f64;
    let rate = match family.saturation() {
        Saturation::Exp => -5.0 / (t_max + 1.0),
        Saturation::Power => -1.0,
    };
    let amp = y0 - y_max - EPS;

    let mut base = vec![0.0; family.n_params()];
    base[0] = y_max;
    base[1] = amp;
    base[2] = rate;
    if family.n_terms() == 2 {
        base[3] = -EPS;
        base[4] = rate * 0.1;
    }
    base[family.n_params() - 1] = -EPS;

    let mut guesses = Vec::with_capacity(opts.starts + 1);
    if let Some(w) = &opts.warm_start {
        if w.len() == family.n_params() && w.iter().all(|v| v.is_finite()) {
            guesses.push(w.clone());
        }
    }
    if let Some(p) = profiled_start(series, family) {
        guesses.push(p);
    }
    guesses.push(base.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 1..opts.starts {
        let mut g = base.clone();
        for k in 0..family.n_terms() {
            let rate_factor = 10f64.powf(rng.random_range(-1.0..1.0));
            let amp_factor = rng.random_range(0.5..2.0);
            g[2 + 2 * k] *= rate_factor;
            g[1 + 2 * k] = if k == 0 {
                amp * amp_factor
            } else {
                amp * 0.5 * amp_factor
            };
        }
        guesses.push(g);
    }
    guesses
}

/// Best start over a grid of exponents.
///
/// With the exponents fixed every other parameter enters linearly, so each
/// grid point is an ordinary least-squares solve; the result is projected
/// onto the sign constraints.
fn profiled_start(series: &ObservationSeries, family: CurveFamily) -> Option<Vec<f64>> {
    let pts = series.points();
    let (lo, hi, n) = match (family.saturation(), family.n_terms()) {
        (Saturation::Exp, 1) => (-3.0, 0.5, 24),
        (Saturation::Exp, _) => (-3.0, 0.5, 10),
        (Saturation::Power, 1) => (-2.0, 1.0, 24),
        (Saturation::Power, _) => (-2.0, 1.0, 10),
    };
    let grid: Vec<f64> = (0..n)
        .map(|i| -10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect();
    let combos: Vec<Vec<f64>> = if family.n_terms() == 1 {
        grid.iter().map(|&e| vec![e]).collect()
    } else {
        let mut c = Vec::new();
        for i in 0..grid.len() {
            for j in i + 1..grid.len() {
                c.push(vec![grid[j], grid[i]]);
            }
        }
        c
    };
    let bounds = family.bounds();
    let y = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.1));
    let n_cols = family.n_params() - family.n_terms();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for exps in combos {
        let design = DMatrix::from_fn(pts.len(), n_cols, |r, c| {
            let t = pts[r].0 as f64;
            match c {
                0 => 1.0,
                c if c <= exps.len() => basis(family.saturation(), exps[c - 1], t),
                c if c == exps.len() + 1 => t,
                _ => t * t,
            }
        });
        let Ok(coef) = design.svd(true, true).solve(&y, 1e-12) else {
            continue;
        };
        let mut alpha = vec![0.0; family.n_params()];
        alpha[0] = coef[0];
        for (k, e) in exps.iter().enumerate() {
            alpha[1 + 2 * k] = coef[1 + k];
            alpha[2 + 2 * k] = *e;
        }
        let lin = family.n_params() - 2;
        alpha[lin] = coef[exps.len() + 1];
        alpha[lin + 1] = coef[exps.len() + 2];
        bounds.project(&mut alpha);
        let ssr: f64 = pts
            .iter()
            .map(|&(t, v)| (family.value(&alpha, t as f64) - v).powi(2))
            .sum();
        if ssr.is_finite() && best.as_ref().is_none_or(|b| ssr < b.0) {
            best = Some((ssr, alpha));
        }
    }
    best.map(|b| b.1)
}

/// Fits `family` to `series` by multi-start bound-constrained least squares.
pub fn fit(series: &ObservationSeries, family: CurveFamily) -> Result<CurveFit, CurveError> {
    fit_with(series, family, &FitOptions::default())
}

pub fn fit_with(series: &ObservationSeries, family: CurveFamily, opts: &FitOptions) -> Result<CurveFit, CurveError> {
    let needed = family.n_params() + 1;
    if series.len() < needed {
        return Err(CurveError::InsufficientData {
            family,
            needed,
            got: series.len(),
        });
    }
    let problem = SeriesProblem {
        family,
        t: series.points().iter().map(|p| p.0 as f64).collect(),
        y: series.points(),
    };
    let bounds = family.bounds();

    let mut best: Option<solver::Solution> = None;
    let mut any_converged = false;
    for guess in initial_guesses(series, family, opts) {
        let sol = solver::solve(&problem, &guess, &bounds, &opts.solver);
        if sol.termination == Termination::NonFinite || !sol.ssr.is_finite() {
            continue;
        }
        any_converged |= sol.termination.converged();
        if best.as_ref().is_none_or(|b| sol.ssr < b.ssr) {
            best = Some(sol);
        }
    }

    let horizon = opts
        .horizon
        .unwrap_or_else(|| series.last_epoch().unwrap_or(0) as f64)
        .max(f64::MIN_POSITIVE);
    let Some(best) = best else {
        let nan = vec![f64::NAN; family.n_params()];
        return Err(CurveError::FitFailure {
            best: Box::new(CurveFit {
                family,
                alpha: nan,
                rmse: f64::NAN,
                r_square: None,
                residual_std: f64::NAN,
                knee: f64::NAN,
                horizon,
            }),
        });
    };

    let (rmse, r_square) = diagnostics_of(series, family, &best.x);
    let dof = series.len().saturating_sub(family.n_params()).max(1);
    let curve = CurveFit {
        family,
        knee: knee_point_unchecked(family, &best.x, horizon),
        residual_std: (best.ssr / dof as f64).sqrt(),
        alpha: best.x,
        rmse,
        r_square,
        horizon,
    };
    if !any_converged {
        return Err(CurveError::FitFailure { best: Box::new(curve) });
    }
    Ok(curve)
}

/// Maximizer of `f` on `[0, horizon]` by bisection on `f'`.
///
/// `f'` is strictly decreasing for constraint-satisfying parameters, so the
/// root is unique; without an interior sign change the nearer end is returned.
pub fn knee_point(family: CurveFamily, alpha: &[f64], horizon: f64) -> Result<f64, CurveError> {
    family.check_len(alpha)?;
    Ok(knee_point_unchecked(family, alpha, horizon))
}

fn knee_point_unchecked(family: CurveFamily, alpha: &[f64], horizon: f64) -> f64 {
    if family.slope(alpha, 0.0) <= 0.0 {
        return 0.0;
    }
    if family.slope(alpha, horizon) >= 0.0 {
        return horizon;
    }
    let (mut lo, mut hi) = (0.0, horizon);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if family.slope(alpha, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// RMSE and R-square of `fit` against `series`.
pub fn diagnostics(series: &ObservationSeries, fit: &CurveFit) -> (f64, Option<f64>) {
    diagnostics_of(series, fit.family, &fit.alpha)
}

fn diagnostics_of(series: &ObservationSeries, family: CurveFamily, alpha: &[f64]) -> (f64, Option<f64>) {
    let pts = series.points();
    let n = pts.len() as f64;
    let mean = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let ss_res: f64 = pts.iter().map(|&(t, y)| (y - family.value(alpha, t as f64)).powi(2)).sum();
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - mean).powi(2)).sum();
    let r_square = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    ((ss_res / n).sqrt(), r_square)
}
