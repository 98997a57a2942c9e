//! Least-squares fitters for triplet spectra, Rabi oscillations, echo decays and lines.
//!
//! All nonlinear fits share one damped Gauss–Newton (Levenberg–Marquardt)
//! engine with analytic Jacobians. Reported 1σ uncertainties come from the
//! local quadratic model. Without per-point errors they are scaled by the
//! reduced χ²; with them, only when the reduced χ² exceeds one.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiments::{DecayCurve, Spectrum};
use crate::nv_model::MollowParams;

pub const MAX_ITERATIONS: usize = 200;
pub const STEP_TOL: f64 = 1e-10;
/// Largest accepted cosine between the weighted residual and any Jacobian column.
pub const GRADIENT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub params: Vec<f64>,
    pub uncertainties: Vec<f64>,
    /// √(Σ wᵢ rᵢ²)
    pub residual_norm: f64,
    /// `None` for saturated fits.
    pub reduced_chi2: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub diagnostic: Option<String>,
}

impl FitResult {
    fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.params[i])
    }

    pub fn sigma(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.uncertainties[i])
    }

    fn flag(mut self, msg: impl Into<String>) -> Self {
        self.converged = false;
        let msg = msg.into();
        self.diagnostic = Some(match self.diagnostic.take() {
            Some(prev) => format!("{prev}; {msg}"),
            None => msg,
        });
        self
    }

    fn flagged_without_fit(names: &[&str], msg: &str) -> Self {
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            params: vec![f64::NAN; names.len()],
            uncertainties: vec![f64::NAN; names.len()],
            residual_norm: f64::NAN,
            reduced_chi2: None,
            converged: false,
            iterations: 0,
            diagnostic: Some(msg.to_string()),
        }
    }
}

/// A model `y = f(x; p)` with its analytic gradient in `p`.
pub trait Model {
    fn names(&self) -> &'static [&'static str];
    fn eval(&self, x: f64, p: &[f64]) -> f64;
    fn gradient(&self, x: f64, p: &[f64], out: &mut [f64]);
}

/// Weights `1/σ²` when every σ is positive, unit weights otherwise.
fn has_errors(sigma: Option<&[f64]>, n: usize) -> bool {
    sigma.is_some_and(|s| s.len() == n && s.iter().all(|v| *v > 0.0 && v.is_finite()))
}

/// Inverse variances, or unit weights when any error is missing or zero.
fn weights(sigma: Option<&[f64]>, n: usize) -> Vec<f64> {
    match sigma {
        Some(s) if has_errors(sigma, n) => s.iter().map(|v| 1.0 / (v * v)).collect(),
        _ => vec![1.0; n],
    }
}

fn covariance_scale(sigma: Option<&[f64]>, n: usize, reduced_chi2: Option<f64>) -> f64 {
    match reduced_chi2 {
        Some(r) if has_errors(sigma, n) => r.max(1.0),
        Some(r) => r,
        None => 1.0,
    }
}

fn weighted_chi2<M: Model>(m: &M, x: &[f64], y: &[f64], w: &[f64], p: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .zip(w)
        .map(|((xi, yi), wi)| {
            let r = yi - m.eval(*xi, p);
            wi * r * r
        })
        .sum()
}

/// Normal matrix `JᵀWJ` and gradient `JᵀWr` at `p`.
fn normal_equations<M: Model>(
    m: &M,
    x: &[f64],
    y: &[f64],
    w: &[f64],
    p: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let k = p.len();
    let mut h = DMatrix::zeros(k, k);
    let mut g = DVector::zeros(k);
    let mut row = vec![0.0; k];
    for ((xi, yi), wi) in x.iter().zip(y).zip(w) {
        m.gradient(*xi, p, &mut row);
        let r = yi - m.eval(*xi, p);
        for a in 0..k {
            g[a] += wi * row[a] * r;
            for b in 0..=a {
                h[(a, b)] += wi * row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }
    (h, g)
}

/// Runs Levenberg–Marquardt from `p0`.
pub fn least_squares<M: Model>(
    m: &M,
    x: &[f64],
    y: &[f64],
    sigma: Option<&[f64]>,
    p0: &[f64],
) -> Result<FitResult> {
    let names = m.names();
    if p0.len() != names.len() {
        return Err(Error::DimensionMismatch {
            expected: names.len(),
            got: p0.len(),
        });
    }
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < p0.len() {
        return Err(Error::Fit(format!(
            "{} samples cannot determine {} parameters",
            x.len(),
            p0.len()
        )));
    }
    if x.iter().chain(y).chain(p0).any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite input".into()));
    }
    let w = weights(sigma, x.len());
    let k = p0.len();
    let mut p = p0.to_vec();
    let mut chi2 = weighted_chi2(m, x, y, &w, &p);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut step_converged = false;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (h, g) = normal_equations(m, x, y, &w, &p);
        let mut improved = false;
        for _ in 0..40 {
            let mut damped = h.clone();
            for a in 0..k {
                damped[(a, a)] += lambda * h[(a, a)].max(1e-300);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&g);
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let trial_chi2 = weighted_chi2(m, x, y, &w, &trial);
            if trial_chi2.is_finite() && trial_chi2 <= chi2 {
                let small = step
                    .iter()
                    .zip(&p)
                    .all(|(s, v)| s.abs() <= STEP_TOL * (v.abs() + STEP_TOL));
                let stalled = chi2 - trial_chi2 <= 1e-15 * chi2;
                p = trial;
                chi2 = trial_chi2;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                step_converged = small || stalled;
                break;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !improved {
            // No downhill step at any damping: a (local) minimum to machine precision.
            step_converged = true;
        }
        if step_converged {
            break;
        }
    }

    let (h, g) = normal_equations(m, x, y, &w, &p);
    let dof = x.len().saturating_sub(k);
    let reduced_chi2 = (dof > 0).then(|| chi2 / dof as f64);
    let scale = covariance_scale(sigma, x.len(), reduced_chi2);
    // Residuals at rounding level leave the gradient direction meaningless.
    let floor = 1e-16 * x.iter().zip(y).zip(&w).map(|((_, yi), wi)| wi * yi * yi).sum::<f64>();
    let gradient_ok = (0..k).all(|a| {
        let denom = (h[(a, a)] * (chi2 + floor)).sqrt();
        denom == 0.0 || g[a].abs() <= GRADIENT_TOL * denom
    });
    let mut diagnostic = None;
    let uncertainties = match h.clone().cholesky() {
        Some(chol) if (0..k).all(|a| h[(a, a)] > 0.0) => {
            let cov = chol.inverse();
            (0..k).map(|a| (cov[(a, a)] * scale).max(0.0).sqrt()).collect()
        }
        _ => {
            diagnostic = Some("singular Jacobian at the optimum".to_string());
            vec![f64::NAN; k]
        }
    };
    let converged = step_converged && gradient_ok && diagnostic.is_none();
    if diagnostic.is_none() && !converged {
        diagnostic = Some(format!("not converged after {iterations} iterations"));
    }
    Ok(FitResult {
        names: names.iter().map(|s| s.to_string()).collect(),
        params: p,
        uncertainties,
        residual_norm: chi2.sqrt(),
        reduced_chi2,
        converged,
        iterations,
        diagnostic,
    })
}

/// Linear least squares on a fixed basis, returning the coefficients.
fn linear_coefficients(columns: &[Vec<f64>], y: &[f64], w: &[f64]) -> Option<Vec<f64>> {
    let k = columns.len();
    let mut h = DMatrix::zeros(k, k);
    let mut g = DVector::zeros(k);
    for i in 0..y.len() {
        for a in 0..k {
            g[a] += w[i] * columns[a][i] * y[i];
            for b in 0..k {
                h[(a, b)] += w[i] * columns[a][i] * columns[b][i];
            }
        }
    }
    h.lu().solve(&g).map(|v| v.iter().copied().collect())
}

/// Offset plus scaled triplet line shape; parameters (ω, Ω, κ, amplitude, offset).
pub struct MollowModel;

impl MollowModel {
    fn shape(x: f64, omega: f64, rabi: f64, kappa: f64) -> f64 {
        let m = MollowParams::on_resonance(omega, rabi, kappa);
        crate::nv_model::mollow_spectrum(x, &m)
    }
}

impl Model for MollowModel {
    fn names(&self) -> &'static [&'static str] {
        &["omega", "rabi", "kappa", "amplitude", "offset"]
    }

    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        p[4] + p[3] * Self::shape(x, p[0], p[1], p[2])
    }

    fn gradient(&self, x: f64, p: &[f64], out: &mut [f64]) {
        let (omega, rabi, kappa, amp) = (p[0], p[1], p[2], p[3]);
        let u = x - omega;
        let dc = u * u + kappa * kappa / 4.0;
        let central = kappa / 4.0 / dc;
        let dcentral_du = -(kappa / 4.0) * 2.0 * u / (dc * dc);
        let dcentral_dk = (u * u / 4.0 - kappa * kappa / 16.0) / (dc * dc);

        let mut d_omega = -dcentral_du;
        let mut d_rabi = 0.0;
        let mut d_kappa = dcentral_dk;
        let mut shape = central;
        for sign in [1.0, -1.0] {
            let v = x - omega - sign * rabi;
            let e = v * v + 9.0 * kappa * kappa / 16.0;
            let side = 3.0 * kappa / 16.0 / e;
            let dside_dv = -(3.0 * kappa / 16.0) * 2.0 * v / (e * e);
            shape += side;
            d_omega -= dside_dv;
            d_rabi -= sign * dside_dv;
            d_kappa += (3.0 * v * v / 16.0 - 27.0 * kappa * kappa / 256.0) / (e * e);
        }
        out[0] = amp * d_omega;
        out[1] = amp * d_rabi;
        out[2] = amp * d_kappa;
        out[3] = shape;
        out[4] = 1.0;
    }
}

/// `A·sin(2πft + φ) + c`; parameters (frequency, amplitude, phase, offset).
pub struct SinusoidModel;

impl Model for SinusoidModel {
    fn names(&self) -> &'static [&'static str] {
        &["frequency", "amplitude", "phase", "offset"]
    }

    fn eval(&self, t: f64, p: &[f64]) -> f64 {
        p[1] * (2.0 * PI * p[0] * t + p[2]).sin() + p[3]
    }

    fn gradient(&self, t: f64, p: &[f64], out: &mut [f64]) {
        let arg = 2.0 * PI * p[0] * t + p[2];
        let (s, c) = arg.sin_cos();
        out[0] = p[1] * c * 2.0 * PI * t;
        out[1] = s;
        out[2] = p[1] * c;
        out[3] = 1.0;
    }
}

/// `A·exp(−t/T) + B`; parameters (T, amplitude, offset).
pub struct ExpDecayModel;

impl Model for ExpDecayModel {
    fn names(&self) -> &'static [&'static str] {
        &["T", "amplitude", "offset"]
    }

    fn eval(&self, t: f64, p: &[f64]) -> f64 {
        p[1] * (-t / p[0]).exp() + p[2]
    }

    fn gradient(&self, t: f64, p: &[f64], out: &mut [f64]) {
        let e = (-t / p[0]).exp();
        out[0] = p[1] * e * t / (p[0] * p[0]);
        out[1] = e;
        out[2] = 1.0;
    }
}

/// `A·exp(−(t/T)ⁿ) + B`; parameters (T, amplitude, offset, exponent).
pub struct StretchedDecayModel;

impl Model for StretchedDecayModel {
    fn names(&self) -> &'static [&'static str] {
        &["T", "amplitude", "offset", "exponent"]
    }

    fn eval(&self, t: f64, p: &[f64]) -> f64 {
        p[1] * (-(t / p[0]).powf(p[3])).exp() + p[2]
    }

    fn gradient(&self, t: f64, p: &[f64], out: &mut [f64]) {
        let (tc, a, n) = (p[0], p[1], p[3]);
        let r = t / tc;
        let rn = if t > 0.0 { r.powf(n) } else { 0.0 };
        let e = (-rn).exp();
        out[0] = a * e * rn * n / tc;
        out[1] = e;
        out[2] = 1.0;
        out[3] = if t > 0.0 { -a * e * rn * r.ln() } else { 0.0 };
    }
}

/// `A·γ²/((x − x₀)² + γ²) + c`; parameters (center, hwhm, amplitude, offset).
pub struct LorentzianModel;

impl Model for LorentzianModel {
    fn names(&self) -> &'static [&'static str] {
        &["center", "hwhm", "amplitude", "offset"]
    }

    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        let u = x - p[0];
        p[2] * p[1] * p[1] / (u * u + p[1] * p[1]) + p[3]
    }

    fn gradient(&self, x: f64, p: &[f64], out: &mut [f64]) {
        let (x0, g, a) = (p[0], p[1], p[2]);
        let u = x - x0;
        let d = u * u + g * g;
        out[0] = a * g * g * 2.0 * u / (d * d);
        out[1] = a * 2.0 * g * u * u / (d * d);
        out[2] = g * g / d;
        out[3] = 1.0;
    }
}

/// Three independent Lorentzians on a common offset; parameters
/// (center, hwhm, amplitude) for each line in turn, then the offset.
pub struct TripletModel;

impl Model for TripletModel {
    fn names(&self) -> &'static [&'static str] {
        &[
            "center_low",
            "hwhm_low",
            "amplitude_low",
            "center_mid",
            "hwhm_mid",
            "amplitude_mid",
            "center_high",
            "hwhm_high",
            "amplitude_high",
            "offset",
        ]
    }

    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        (0..3)
            .map(|j| LorentzianModel.eval(x, &[p[3 * j], p[3 * j + 1], p[3 * j + 2], 0.0]))
            .sum::<f64>()
            + p[9]
    }

    fn gradient(&self, x: f64, p: &[f64], out: &mut [f64]) {
        let mut g = [0.0; 4];
        for j in 0..3 {
            LorentzianModel.gradient(x, &[p[3 * j], p[3 * j + 1], p[3 * j + 2], 0.0], &mut g);
            out[3 * j..3 * j + 3].copy_from_slice(&g[..3]);
        }
        out[9] = 1.0;
    }
}

/// Joint fit of three peaks seeded from `seeds` (low, central, high).
/// Returns the refined peaks, or the error if the fit fails or a line
/// wanders past its neighbour.
pub fn fit_triplet(s: &Spectrum, seeds: &[Peak; 3]) -> Result<[Peak; 3]> {
    let (x, y) = (s.x(), s.y());
    let step = if x.len() > 1 { (x[x.len() - 1] - x[0]) / (x.len() - 1) as f64 } else { 1.0 };
    let base = median(y);
    let mut p0 = Vec::with_capacity(10);
    for pk in seeds {
        let hw = if pk.hwhm.is_finite() && pk.hwhm > 0.0 { pk.hwhm } else { 2.0 * step };
        p0.extend([pk.position, hw, (pk.height).max(f64::EPSILON)]);
    }
    p0.push(base);
    let fit = least_squares(&TripletModel, x, y, Some(s.y_err()), &p0)?;
    let c = [fit.params[0], fit.params[3], fit.params[6]];
    if !fit.converged || !(c[0] < c[1] && c[1] < c[2]) {
        return Err(Error::Fit(
            fit.diagnostic.unwrap_or_else(|| "triplet lines changed order".into()),
        ));
    }
    Ok(std::array::from_fn(|j| Peak {
        position: fit.params[3 * j],
        uncertainty: fit.uncertainties[3 * j],
        height: fit.params[3 * j + 2],
        hwhm: fit.params[3 * j + 1].abs(),
        unrefined: false,
    }))
}

fn half_max_width(x: &[f64], y: &[f64], peak: usize, base: f64) -> f64 {
    let half = base + 0.5 * (y[peak] - base);
    let above = |v: f64| (v - half) * (y[peak] - base).signum() > 0.0;
    let mut lo = peak;
    while lo > 0 && above(y[lo - 1]) {
        lo -= 1;
    }
    let mut hi = peak;
    while hi + 1 < y.len() && above(y[hi + 1]) {
        hi += 1;
    }
    let step = if x.len() > 1 {
        (x[x.len() - 1] - x[0]) / (x.len() - 1) as f64
    } else {
        1.0
    };
    (x[hi] - x[lo]).max(step)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Data-driven starting point: ω at the extremum, κ from its half-maximum
/// width, Ω from the strongest same-sign extremum outside the central line.
pub fn guess_mollow(s: &Spectrum) -> Result<MollowParams> {
    let (x, y) = (s.x(), s.y());
    if x.len() < 10 {
        return Err(Error::Fit("triplet fit needs at least 10 samples".into()));
    }
    let base = median(y);
    let sign = {
        let hi = y.iter().fold(f64::MIN, |a, b| a.max(*b)) - base;
        let lo = base - y.iter().fold(f64::MAX, |a, b| a.min(*b));
        if hi >= lo {
            1.0
        } else {
            -1.0
        }
    };
    let signed: Vec<f64> = y.iter().map(|v| sign * (v - base)).collect();
    let centre = argmax(&signed);
    let kappa = half_max_width(x, y, centre, base).max(1e-6);
    let omega = x[centre];
    let mut best = None;
    for i in 1..x.len().saturating_sub(1) {
        let d = (x[i] - omega).abs();
        if d > kappa && signed[i] >= signed[i - 1] && signed[i] >= signed[i + 1] {
            match best {
                Some((_, v)) if v >= signed[i] => {}
                _ => best = Some((d, signed[i])),
            }
        }
    }
    let rabi = best.map_or(2.0 * kappa, |(d, _)| d);
    Ok(MollowParams::on_resonance(omega, rabi, kappa))
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::MIN), |(bi, bv), (i, x)| if *x > bv { (i, *x) } else { (bi, bv) })
        .0
}

/// Fits offset + amplitude × triplet line shape.
///
/// Flags the result when the fitted Ω is below κ/2, where the side lines
/// merge with the central one and Ω is not identifiable.
pub fn fit_mollow(s: &Spectrum, init: &MollowParams) -> Result<FitResult> {
    let (x, y) = (s.x(), s.y());
    if x.len() < 10 {
        return Err(Error::Fit("triplet fit needs at least 10 samples".into()));
    }
    if !(init.kappa > 0.0) || !(init.rabi >= 0.0) {
        return Err(Error::Fit("initial κ must be positive and Ω non-negative".into()));
    }
    let w = weights(Some(s.y_err()), x.len());
    let shape: Vec<f64> = x
        .iter()
        .map(|xi| MollowModel::shape(*xi, init.omega, init.rabi, init.kappa))
        .collect();
    let ones = vec![1.0; x.len()];
    let lin = linear_coefficients(&[shape, ones], y, &w)
        .ok_or_else(|| Error::Fit("degenerate triplet line shape".into()))?;
    let p0 = [init.omega, init.rabi.max(init.kappa), init.kappa, lin[0], lin[1]];
    let mut fit = least_squares(&MollowModel, x, y, Some(s.y_err()), &p0)?;
    // Ω enters only through |Ω| and κ only through |κ|.
    fit.params[1] = fit.params[1].abs();
    fit.params[2] = fit.params[2].abs();
    if fit.params[1] < fit.params[2] / 2.0 {
        fit = fit.flag("degenerate: Ω unresolvable below κ/2");
    }
    Ok(fit)
}

/// Periodogram maximum over `f ∈ (0, n/(2·span)]`, sampled 8× finer than 1/span.
fn periodogram_peak(t: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = t.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let span = t[n - 1] - t[0];
    let df = 1.0 / (8.0 * span);
    let f_max = n as f64 / (2.0 * span);
    let mut powers = Vec::new();
    let mut best = (0.0, 0.0);
    let mut f = df;
    while f <= f_max {
        let (mut re, mut im) = (0.0, 0.0);
        for (ti, yi) in t.iter().zip(y) {
            let (s, c) = (2.0 * PI * f * ti).sin_cos();
            re += (yi - mean) * c;
            im += (yi - mean) * s;
        }
        let pw = re * re + im * im;
        powers.push(pw);
        if pw > best.1 {
            best = (f, pw);
        }
        f += df;
    }
    let mean_power = powers.iter().sum::<f64>() / powers.len().max(1) as f64;
    (best.0, best.1, mean_power)
}

/// Frequency seeded by the periodogram peak, then refined by least squares.
pub fn fit_sinusoid(c: &DecayCurve) -> Result<FitResult> {
    let (t, y) = (c.t(), c.y());
    let names = SinusoidModel.names();
    if t.len() < 6 {
        return Err(Error::Fit("sinusoid fit needs at least 6 samples".into()));
    }
    let n = t.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var.sqrt() <= 1e-12 * (mean.abs() + 1e-12) {
        return Ok(FitResult::flagged_without_fit(names, "no oscillation: constant input"));
    }
    let (f0, peak, mean_power) = periodogram_peak(t, y);
    if f0 == 0.0 || peak < 4.0 * mean_power {
        return Ok(FitResult::flagged_without_fit(
            names,
            "no oscillation: no spectral peak above the noise floor",
        ));
    }
    let w = weights(Some(c.y_err()), t.len());
    let sin: Vec<f64> = t.iter().map(|ti| (2.0 * PI * f0 * ti).sin()).collect();
    let cos: Vec<f64> = t.iter().map(|ti| (2.0 * PI * f0 * ti).cos()).collect();
    let lin = linear_coefficients(&[sin, cos, vec![1.0; t.len()]], y, &w)
        .ok_or_else(|| Error::Fit("degenerate sinusoid basis".into()))?;
    let p0 = [f0, lin[0].hypot(lin[1]), lin[1].atan2(lin[0]), lin[2]];
    let mut fit = least_squares(&SinusoidModel, t, y, Some(c.y_err()), &p0)?;
    if fit.params[1] < 0.0 {
        fit.params[1] = -fit.params[1];
        fit.params[2] += PI;
    }
    if fit.params[0] < 0.0 {
        fit.params[0] = -fit.params[0];
        fit.params[2] = PI - fit.params[2];
    }
    fit.params[2] = wrap_phase(fit.params[2]);
    let span = t[t.len() - 1] - t[0];
    if fit.params[0] * span < 2.0 {
        fit = fit.flag("fewer than two periods in the window");
    }
    Ok(fit)
}

/// Maps a phase to (−π, π].
pub fn wrap_phase(phi: f64) -> f64 {
    let r = (phi + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// Fitted T beyond this multiple of the time span counts as non-decaying.
pub const DECAY_BOUND_FACTOR: f64 = 100.0;

fn decay_guess(t: &[f64], y: &[f64]) -> [f64; 3] {
    let n = t.len();
    let tail = (n / 5).max(1);
    let b0 = y[n - tail..].iter().sum::<f64>() / tail as f64;
    let a0 = y[0] - b0;
    let target = a0.abs() / std::f64::consts::E;
    let span = t[n - 1] - t[0];
    let t0 = t
        .iter()
        .zip(y)
        .find(|(_, yi)| (*yi - b0).abs() <= target)
        .map_or(span / 2.0, |(ti, _)| (ti - t[0]).max(span / (4.0 * n as f64)));
    [t0, a0, b0]
}

fn check_decay(mut fit: FitResult, span: f64, t_max: f64) -> FitResult {
    let tc = fit.params[0];
    if !(tc > 0.0) || tc > DECAY_BOUND_FACTOR * span || !tc.is_finite() {
        fit = fit.flag("non-decaying: decay time at bound");
    } else if t_max < tc / 2.0 {
        fit = fit.flag("decay time poorly identified: max(t) < T/2");
    }
    fit
}

/// Fits `A·exp(−t/T) + B`.
pub fn fit_exp_decay(c: &DecayCurve) -> Result<FitResult> {
    let (t, y) = (c.t(), c.y());
    let names = ExpDecayModel.names();
    if t.len() < 6 {
        return Err(Error::Fit("decay fit needs at least 6 samples".into()));
    }
    let span = t[t.len() - 1] - t[0];
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let spread = y.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    if spread <= 1e-12 * (mean.abs() + 1e-12) {
        return Ok(FitResult::flagged_without_fit(names, "non-decaying: constant input"));
    }
    let p0 = decay_guess(t, y);
    let fit = least_squares(&ExpDecayModel, t, y, Some(c.y_err()), &p0)?;
    Ok(check_decay(fit, span, t[t.len() - 1]))
}

/// Fits `A·exp(−(t/T)ⁿ) + B`, starting from the plain exponential fit.
pub fn fit_stretched_decay(c: &DecayCurve) -> Result<FitResult> {
    let (t, y) = (c.t(), c.y());
    if t.len() < 7 {
        return Err(Error::Fit("stretched decay fit needs at least 7 samples".into()));
    }
    let base = fit_exp_decay(c)?;
    let p0 = if base.params.iter().all(|v| v.is_finite()) {
        [base.params[0], base.params[1], base.params[2], 1.0]
    } else {
        let g = decay_guess(t, y);
        [g[0], g[1], g[2], 1.0]
    };
    let fit = least_squares(&StretchedDecayModel, t, y, Some(c.y_err()), &p0)?;
    let span = t[t.len() - 1] - t[0];
    Ok(check_decay(fit, span, t[t.len() - 1]))
}

/// Weighted straight line `y = slope·x + intercept` in closed form.
///
/// With two points the line interpolates exactly and χ² is undefined; the
/// result is flagged as saturated.
pub fn fit_line(x: &[f64], y: &[f64], y_err: Option<&[f64]>) -> Result<FitResult> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::Fit("line fit needs at least 2 points".into()));
    }
    let w = weights(y_err, x.len());
    let s: f64 = w.iter().sum();
    let sx: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum();
    let sy: f64 = w.iter().zip(y).map(|(w, y)| w * y).sum();
    let xbar = sx / s;
    let ybar = sy / s;
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * (x - xbar) * (x - xbar)).sum();
    let sxy: f64 = w
        .iter()
        .zip(x)
        .zip(y)
        .map(|((w, x), y)| w * (x - xbar) * (y - ybar))
        .sum();
    if !(sxx > 0.0) {
        return Err(Error::Fit("all x values identical".into()));
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let chi2: f64 = w
        .iter()
        .zip(x)
        .zip(y)
        .map(|((w, x), y)| {
            let r = y - slope * x - intercept;
            w * r * r
        })
        .sum();
    let dof = x.len() - 2;
    let reduced_chi2 = (dof > 0).then(|| chi2 / dof as f64);
    let scale = covariance_scale(y_err, x.len(), reduced_chi2);
    let var_slope = scale / sxx;
    let var_intercept = scale * (1.0 / s + xbar * xbar / sxx);
    let mut fit = FitResult {
        names: vec!["slope".into(), "intercept".into()],
        params: vec![slope, intercept],
        uncertainties: vec![var_slope.sqrt(), var_intercept.sqrt()],
        residual_norm: chi2.sqrt(),
        reduced_chi2,
        converged: true,
        iterations: 0,
        diagnostic: None,
    };
    if dof == 0 {
        fit.diagnostic = Some("saturated: two points, χ² undefined".into());
    }
    Ok(fit)
}

/// Five-point quadratic Savitzky–Golay smoothing; the two samples at each edge are kept.
pub fn savitzky_golay5(y: &[f64]) -> Vec<f64> {
    const C: [f64; 5] = [-3.0, 12.0, 17.0, 12.0, -3.0];
    let n = y.len();
    if n < 5 {
        return y.to_vec();
    }
    let mut out = y.to_vec();
    for i in 2..n - 2 {
        out[i] = (0..5).map(|k| C[k] * y[i + k - 2]).sum::<f64>() / 35.0;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Peak {
    pub position: f64,
    pub uncertainty: f64,
    /// Signed height above the local baseline.
    pub height: f64,
    pub hwhm: f64,
    /// Position came from the smoothed maximum because refinement failed.
    pub unrefined: bool,
}

/// Local extrema of the smoothed spectrum whose prominence is at least
/// `min_prominence`, each refined by a Lorentzian fit over `±half_window`.
///
/// `sign = 1` looks for peaks, `sign = −1` for dips.
pub fn find_peaks(s: &Spectrum, sign: f64, min_prominence: f64, half_window: f64) -> Vec<Peak> {
    let (x, y, err) = (s.x(), s.y(), s.y_err());
    let n = x.len();
    if n < 5 {
        return Vec::new();
    }
    let smooth: Vec<f64> = savitzky_golay5(y).iter().map(|v| sign * v).collect();
    let mut peaks = Vec::new();
    for i in 1..n - 1 {
        if !(smooth[i] > smooth[i - 1] && smooth[i] >= smooth[i + 1]) {
            continue;
        }
        if prominence(&smooth, i) < min_prominence {
            continue;
        }
        peaks.push(refine_peak(x, y, err, i, sign, half_window));
    }
    peaks
}

/// Strongest local extremum within `guess ± search_half`, refined as in
/// [`find_peaks`]. Used to pick up a weak line whose position is expected.
pub fn find_peak_near(s: &Spectrum, sign: f64, guess: f64, search_half: f64, half_window: f64) -> Option<Peak> {
    let (x, y, err) = (s.x(), s.y(), s.y_err());
    let n = x.len();
    if n < 5 {
        return None;
    }
    let smooth: Vec<f64> = savitzky_golay5(y).iter().map(|v| sign * v).collect();
    let best = (1..n - 1)
        .filter(|&i| (x[i] - guess).abs() <= search_half)
        .filter(|&i| smooth[i] > smooth[i - 1] && smooth[i] >= smooth[i + 1])
        .max_by(|a, b| smooth[*a].total_cmp(&smooth[*b]))?;
    let peak = refine_peak(x, y, err, best, sign, half_window);
    (peak.height * sign > 0.0).then_some(peak)
}

/// Height above the higher of the two minima separating `i` from taller samples.
fn prominence(y: &[f64], i: usize) -> f64 {
    let mut left_min = y[i];
    let mut j = i;
    while j > 0 {
        j -= 1;
        if y[j] > y[i] {
            break;
        }
        left_min = left_min.min(y[j]);
    }
    let mut right_min = y[i];
    let mut j = i;
    while j + 1 < y.len() {
        j += 1;
        if y[j] > y[i] {
            break;
        }
        right_min = right_min.min(y[j]);
    }
    y[i] - left_min.max(right_min)
}

fn refine_peak(x: &[f64], y: &[f64], err: &[f64], i: usize, sign: f64, half_window: f64) -> Peak {
    let lo = x.partition_point(|v| *v < x[i] - half_window);
    let hi = x.partition_point(|v| *v <= x[i] + half_window);
    let (wx, wy, we) = (&x[lo..hi], &y[lo..hi], &err[lo..hi]);
    let base = wy
        .iter()
        .map(|v| sign * v)
        .fold(f64::MAX, f64::min)
        * sign;
    let fallback = Peak {
        position: x[i],
        uncertainty: if x.len() > 1 {
            (x[1] - x[0]).abs() / 2.0
        } else {
            0.0
        },
        height: y[i] - base,
        hwhm: f64::NAN,
        unrefined: true,
    };
    if wx.len() < 6 {
        return fallback;
    }
    let k = i - lo;
    let hw = 0.5 * half_max_width(wx, wy, k, base);
    let p0 = [x[i], hw, y[i] - base, base];
    match least_squares(&LorentzianModel, wx, wy, Some(we), &p0) {
        Ok(fit)
            if fit.converged
                && (fit.params[0] - x[i]).abs() <= half_window
                && fit.params[2] * sign > 0.0 =>
        {
            Peak {
                position: fit.params[0],
                uncertainty: fit.uncertainties[0],
                height: fit.params[2],
                hwhm: fit.params[1].abs(),
                unrefined: false,
            }
        }
        _ => fallback,
    }
}
