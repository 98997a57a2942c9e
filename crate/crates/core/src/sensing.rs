//! AC-field sensing with dressed states: Hahn-echo phase accumulation, the
//! quantum adder, and sensitivity arithmetic.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Largest sensing register the adder will simulate.
pub const MAX_ADDER_QUBITS: usize = 12;

const QUAD_RTOL: f64 = 1e-9;
const QUAD_MAX_DEPTH: u32 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingConfig {
    /// Half the number of dressed states.
    pub m: u32,
    /// Dressed coherence time, ms.
    pub t2_rho: f64,
    /// Undressed coherence time, μs.
    pub t2: f64,
    /// Qubit count for B_min scaling.
    pub n: u32,
}

impl SensingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.n < 1 {
            return Err(invalid("M and N must be at least 1"));
        }
        if !(self.t2_rho > 0.0) || !(self.t2 > 0.0) || !self.t2_rho.is_finite() || !self.t2.is_finite() {
            return Err(invalid(format!(
                "coherence times must be positive and finite, got T2ρ = {} ms, T2 = {} μs",
                self.t2_rho, self.t2
            )));
        }
        Ok(())
    }
}

/// `B(t) = amplitude·sin(2π·frequency·t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ACField {
    /// μT
    pub amplitude: f64,
    /// kHz
    pub frequency: f64,
    /// rad
    #[serde(default)]
    pub phase: f64,
}

impl ACField {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency > 0.0) || !self.frequency.is_finite() {
            return Err(invalid(format!("AC frequency must be positive, got {} kHz", self.frequency)));
        }
        if !self.amplitude.is_finite() || !self.phase.is_finite() {
            return Err(invalid("AC amplitude and phase must be finite"));
        }
        Ok(())
    }

    /// Frequency in cycles per μs.
    pub fn frequency_mhz(&self) -> f64 {
        self.frequency * 1e-3
    }

    /// Field at `t` μs, in μT.
    pub fn at(&self, t: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.frequency_mhz() * t + self.phase).sin()
    }

    /// Echo half-time that matches the field period: 2τ = 1/f.
    pub fn synchronized_tau(&self) -> f64 {
        0.5 / self.frequency_mhz()
    }
}

/// `√(M·T₂ρ/T₂)`, with T₂ρ in ms and T₂ in μs.
pub fn enhancement_ratio(cfg: &SensingConfig) -> Result<f64> {
    cfg.validate()?;
    Ok((cfg.m as f64 * cfg.t2_rho * 1e3 / cfg.t2).sqrt())
}

/// Factor by which B_min of configuration 1 exceeds that of configuration 2,
/// from `B_min ∝ 1/√(N·T₂)`. Both times in the same unit.
pub fn bmin_ratio(n1: f64, t2_1: f64, n2: f64, t2_2: f64) -> Result<f64> {
    if [n1, t2_1, n2, t2_2].iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid("B_min ratio needs positive finite inputs"));
    }
    Ok((n2 * t2_2 / (n1 * t2_1)).sqrt())
}

fn simpson(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &impl Fn(f64) -> f64,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    m: f64,
    fm: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let (lm, flm, left) = simpson(f, a, fa, m, fm);
    let (rm, frm, right) = simpson(f, m, fm, b, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
        + adaptive(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
///
/// `scale` sets the absolute tolerance `rtol·scale`; pass an estimate of
/// `∫|f|` so that integrals that cancel to zero still terminate.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rtol: f64, scale: f64) -> f64 {
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(&f, a, fa, b, fb);
    let tol = (rtol * scale).max(f64::MIN_POSITIVE);
    adaptive(&f, a, fa, b, fb, m, fm, whole, tol, QUAD_MAX_DEPTH)
}

/// Phase picked up in a Hahn echo with half-time `tau` μs:
/// `2π·γ·∫₀^{2τ} s(t)·B(t) dt`, `s = +1` before the π pulse and −1 after.
/// γ in MHz/mT.
pub fn echo_phase(ac: &ACField, tau: f64, gamma: f64) -> Result<f64> {
    ac.validate()?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(invalid(format!("echo half-time must be positive, got {tau} μs")));
    }
    // Each half is smooth; |B| ≤ amplitude bounds the scale.
    let scale = ac.amplitude.abs() * tau;
    let first = integrate(|t| ac.at(t), 0.0, tau, QUAD_RTOL, scale);
    let second = integrate(|t| ac.at(t), tau, 2.0 * tau, QUAD_RTOL, scale);
    Ok(2.0 * PI * gamma * 1e-3 * (first - second))
}

/// Register of sensing qubits plus one ancilla (bit 0 of the basis index).
#[derive(Debug, Clone, PartialEq)]
pub struct AdderRegister {
    amps: Vec<Complex64>,
    qubits: usize,
}

type Gate = [[Complex64; 2]; 2];

const fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

const HADAMARD: Gate = [
    [c(FRAC_1_SQRT_2, 0.0), c(FRAC_1_SQRT_2, 0.0)],
    [c(FRAC_1_SQRT_2, 0.0), c(-FRAC_1_SQRT_2, 0.0)],
];

fn matmul(a: &Gate, b: &Gate) -> Gate {
    let mut out = [[c(0.0, 0.0); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn dagger(a: &Gate) -> Gate {
    [[a[0][0].conj(), a[1][0].conj()], [a[0][1].conj(), a[1][1].conj()]]
}

/// `e^{iφ}·P(φ)·X·P(φ)†`: the state (|0⟩ + e^{iφ}|1⟩)/√2 is its eigenvector
/// with eigenvalue e^{iφ}.
fn phase_transfer(phi: f64) -> Gate {
    let p = [[c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), Complex64::from_polar(1.0, phi)]];
    let x = [[c(0.0, 0.0), c(1.0, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]];
    let g = matmul(&matmul(&p, &x), &dagger(&p));
    let k = Complex64::from_polar(1.0, phi);
    [[k * g[0][0], k * g[0][1]], [k * g[1][0], k * g[1][1]]]
}

impl AdderRegister {
    /// Ancilla in |0⟩, sensing qubit k in (|0⟩ + e^{iφ_k}|1⟩)/√2.
    pub fn prepare(phases: &[f64]) -> Result<Self> {
        let m = phases.len();
        if !(1..=MAX_ADDER_QUBITS).contains(&m) {
            return Err(invalid(format!(
                "adder supports 1..={MAX_ADDER_QUBITS} sensing qubits, got {m}"
            )));
        }
        let qubits = m + 1;
        let mut amps = vec![c(0.0, 0.0); 1 << qubits];
        amps[0] = c(1.0, 0.0);
        let mut reg = Self { amps, qubits };
        for (k, &phi) in phases.iter().enumerate() {
            let prep = [
                [c(FRAC_1_SQRT_2, 0.0), c(-FRAC_1_SQRT_2, 0.0)],
                [
                    Complex64::from_polar(FRAC_1_SQRT_2, phi),
                    Complex64::from_polar(FRAC_1_SQRT_2, phi),
                ],
            ];
            reg.apply(k + 1, &prep);
        }
        Ok(reg)
    }

    pub fn qubits(&self) -> usize {
        self.qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Applies `g` to `target`.
    pub fn apply(&mut self, target: usize, g: &Gate) {
        let bit = 1 << target;
        for i in 0..self.amps.len() {
            if i & bit == 0 {
                let (a0, a1) = (self.amps[i], self.amps[i | bit]);
                self.amps[i] = g[0][0] * a0 + g[0][1] * a1;
                self.amps[i | bit] = g[1][0] * a0 + g[1][1] * a1;
            }
        }
    }

    /// Applies `g` to `target` on the ancilla-|1⟩ subspace.
    pub fn apply_controlled(&mut self, target: usize, g: &Gate) {
        let bit = 1 << target;
        for i in 0..self.amps.len() {
            if i & 1 == 1 && i & bit == 0 {
                let (a0, a1) = (self.amps[i], self.amps[i | bit]);
                self.amps[i] = g[0][0] * a0 + g[0][1] * a1;
                self.amps[i | bit] = g[1][0] * a0 + g[1][1] * a1;
            }
        }
    }

    /// Probabilities of reading the ancilla as 0 and 1.
    pub fn ancilla_probabilities(&self) -> (f64, f64) {
        let mut p = [0.0; 2];
        for (i, a) in self.amps.iter().enumerate() {
            p[i & 1] += a.norm_sqr();
        }
        (p[0], p[1])
    }
}

/// Runs H · ∏ controlled-W_k · H on the ancilla and returns its outcome
/// probabilities (P(0), P(1)).
pub fn adder_run(phases: &[f64]) -> Result<(f64, f64)> {
    let mut reg = AdderRegister::prepare(phases)?;
    reg.apply(0, &HADAMARD);
    for (k, &phi) in phases.iter().enumerate() {
        reg.apply_controlled(k + 1, &phase_transfer(phi));
    }
    reg.apply(0, &HADAMARD);
    Ok(reg.ancilla_probabilities())
}

/// P(ancilla = 0) for `m` sensing qubits each carrying phase `phi`.
pub fn adder_simulate(m: usize, phi: f64) -> Result<f64> {
    if !(1..=MAX_ADDER_QUBITS).contains(&m) {
        return Err(invalid(format!(
            "adder supports 1..={MAX_ADDER_QUBITS} sensing qubits, got {m}"
        )));
    }
    Ok(adder_run(&vec![phi; m])?.0)
}

/// End-to-end sensing figures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensingReport {
    pub enhancement: f64,
    /// Same ratio obtained from the B_min scaling with N = M.
    pub bmin_ratio: f64,
    /// Half-time with 2τ = 1/f, μs.
    pub tau_sync: f64,
    /// dφ/dB at `tau_sync`, rad/μT.
    pub phase_per_ut: f64,
    /// Phase for the configured amplitude at `tau_sync`, rad.
    pub phase: f64,
    /// τ in (0, 1/f] maximizing |dφ/dB|·exp(−2τ/T₂), μs.
    pub optimal_tau: f64,
    pub optimal_phase_per_ut: f64,
    /// The same optimum with T₂ replaced by the dressed T₂ρ.
    pub optimal_tau_dressed: f64,
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > tol * (a.abs() + b.abs()).max(1e-300) {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1);
        }
    }
    0.5 * (a + b)
}

/// Echo sensitivity to `ac` at gyromagnetic ratio `gamma` (MHz/mT),
/// combined with the dressed-state enhancement.
pub fn protocol_sensitivity(cfg: &SensingConfig, ac: &ACField, gamma: f64) -> Result<SensingReport> {
    cfg.validate()?;
    ac.validate()?;
    if !(gamma > 0.0) {
        return Err(invalid("gyromagnetic ratio must be positive"));
    }
    let unit = ACField { amplitude: 1.0, ..*ac };
    let slope = |tau: f64| echo_phase(&unit, tau, gamma).map(f64::abs).unwrap_or(0.0);
    let tau_sync = ac.synchronized_tau();
    let hi = 2.0 * tau_sync;
    let best = |t2: f64| golden_max(|tau| slope(tau) * (-2.0 * tau / t2).exp(), hi * 1e-6, hi, 1e-10);
    let optimal_tau = best(cfg.t2);
    let m = cfg.m as f64;
    Ok(SensingReport {
        enhancement: enhancement_ratio(cfg)?,
        bmin_ratio: bmin_ratio(1.0, cfg.t2, m, cfg.t2_rho * 1e3)?,
        tau_sync,
        phase_per_ut: echo_phase(&unit, tau_sync, gamma)?,
        phase: echo_phase(ac, tau_sync, gamma)?,
        optimal_tau,
        optimal_phase_per_ut: echo_phase(&unit, optimal_tau, gamma)?,
        optimal_tau_dressed: best(cfg.t2_rho * 1e3),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_cfg() -> SensingConfig {
        SensingConfig {
            m: 2,
            t2_rho: 1.5,
            t2: 4.2,
            n: 2,
        }
    }

    #[test]
    fn enhancement_examples() {
        let r = enhancement_ratio(&paper_cfg()).unwrap();
        assert!((r - (2.0f64 * 1500.0 / 4.2).sqrt()).abs() < 1e-12);
        assert!((r - 26.726).abs() < 1e-3);
        let one = SensingConfig { m: 1, t2_rho: 0.0042, t2: 4.2, n: 1 };
        assert!((enhancement_ratio(&one).unwrap() - 1.0).abs() < 1e-12);
        let quad = SensingConfig { m: 8, ..paper_cfg() };
        assert!((enhancement_ratio(&quad).unwrap() / r - 2.0).abs() < 1e-12);
        assert!(enhancement_ratio(&SensingConfig { m: 0, ..paper_cfg() }).is_err());
    }

    #[test]
    fn bmin_examples() {
        assert_eq!(bmin_ratio(1.0, 4.2, 1.0, 4.2).unwrap(), 1.0);
        assert!((bmin_ratio(1.0, 4.2, 4.0, 4.2).unwrap() - 2.0).abs() < 1e-12);
        let x = bmin_ratio(1.0, 4.2, 2.0, 1500.0).unwrap();
        assert!((x - enhancement_ratio(&paper_cfg()).unwrap()).abs() < 1e-12);
        assert!(bmin_ratio(0.0, 1.0, 1.0, 1.0).is_err());
    }

    fn field(b: f64, phase: f64) -> ACField {
        ACField { amplitude: b, frequency: 50.0, phase }
    }

    #[test]
    fn echo_phase_synchronized_oracle() {
        let ac = field(0.7, 0.0);
        let tau = ac.synchronized_tau();
        let phi = echo_phase(&ac, tau, 28.03).unwrap();
        // Midpoint Riemann sum on a fine grid.
        let n = 200_000;
        let h = 2.0 * tau / n as f64;
        let sum: f64 = (0..n)
            .map(|i| {
                let t = (i as f64 + 0.5) * h;
                let s = if t < tau { 1.0 } else { -1.0 };
                s * ac.at(t)
            })
            .sum();
        let riemann = 2.0 * PI * 28.03e-3 * sum * h;
        assert!((phi / riemann - 1.0).abs() < 1e-6, "{phi} vs {riemann}");
        // ∫ = 2B/(πf) for the synchronized sine.
        let closed = 4.0 * 28.03e-3 * 0.7 / ac.frequency_mhz();
        assert!((phi / closed - 1.0).abs() < 1e-9);
    }

    #[test]
    fn echo_phase_symmetries() {
        let tau = 7.3;
        assert_eq!(echo_phase(&field(0.0, 0.3), tau, 28.03).unwrap(), 0.0);
        let a = echo_phase(&field(1.0, 0.3), tau, 28.03).unwrap();
        let b = echo_phase(&field(1.0, 0.3 + PI), tau, 28.03).unwrap();
        assert!((a + b).abs() < 1e-12 * a.abs());
        for k in [0.1, 2.0, 35.0] {
            let p = echo_phase(&field(k, 0.3), tau, 28.03).unwrap();
            assert!((p / (k * a) - 1.0).abs() < 1e-9);
        }
        assert!(echo_phase(&field(1.0, 0.0), 0.0, 28.03).is_err());
    }

    #[test]
    fn adder_matches_closed_form() {
        for m in 1..=3 {
            for k in 0..16 {
                let phi = -PI + 2.0 * PI * k as f64 / 16.0;
                let p = adder_simulate(m, phi).unwrap();
                let oracle = 0.5 * (1.0 + (m as f64 * phi).cos());
                assert!((p - oracle).abs() < 1e-10, "M={m} φ={phi}: {p} vs {oracle}");
            }
        }
        assert!((adder_simulate(5, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(adder_simulate(0, 0.1).is_err());
        assert!(adder_simulate(13, 0.1).is_err());
    }

    #[test]
    fn adder_preserves_norm() {
        let (p0, p1) = adder_run(&[0.3, -1.1, 2.0, 0.7]).unwrap();
        assert!((p0 + p1 - 1.0).abs() < 1e-12);
        let reg = AdderRegister::prepare(&[0.3, 0.4]).unwrap();
        assert!((reg.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sensitivity_report() {
        let ac = field(0.5, 0.0);
        let r = protocol_sensitivity(&paper_cfg(), &ac, 28.03).unwrap();
        assert!((r.enhancement - 26.726).abs() < 1e-3);
        assert!((r.bmin_ratio - r.enhancement).abs() < 1e-12);
        assert!((r.tau_sync - 10.0).abs() < 1e-12);
        let r2 = protocol_sensitivity(&paper_cfg(), &ac, 56.06).unwrap();
        assert!((r2.phase_per_ut / r.phase_per_ut - 2.0).abs() < 1e-12);
        let zero = protocol_sensitivity(&paper_cfg(), &field(0.0, 0.0), 28.03).unwrap();
        assert_eq!(zero.phase, 0.0);
        assert_eq!(zero.enhancement, r.enhancement);
        assert!(r.optimal_tau > 0.0 && r.optimal_tau <= 2.0 * r.tau_sync);
        assert!(r.optimal_tau_dressed >= r.optimal_tau);
    }
}
