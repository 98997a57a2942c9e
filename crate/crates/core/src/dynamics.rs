//! Stochastic time-domain engine.
//!
//! Each trajectory evolves the three ¹⁴N manifolds of the |0⟩↔|−1⟩ pair in
//! the rotating frame of the continuous drive (or of the probe when no drive
//! is on). Dephasing enters as an Ornstein–Uhlenbeck shift of the detuning,
//! shared by all manifolds of a trajectory. The readout projects onto |−1⟩
//! after removing the noiseless frame evolution accumulated since the last
//! laser reset, which for sequences without continuous drive is a pure
//! z-rotation and leaves populations untouched.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nv_model::{check_rwa, DriveField, NvParams, NUCLEAR_PROJECTIONS};
use crate::spin_core::{substeps, Su2};

pub const DEFAULT_TAU_C: f64 = 10.0;
pub const DEFAULT_N_TRAJ: usize = 2000;
/// Noise is held piecewise constant over at most `tau_c / NOISE_STEPS_PER_TAU`.
const NOISE_STEPS_PER_TAU: f64 = 200.0;

/// Ornstein–Uhlenbeck dephasing bath acting on the |0⟩↔|−1⟩ detuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    /// Correlation time, μs.
    pub tau_c: f64,
    /// RMS frequency deviation, MHz.
    pub sigma_b: f64,
    pub seed: u64,
    pub n_traj: usize,
    /// Fractional quasi-static error of the drive amplitude, drawn once per trajectory.
    #[serde(default)]
    pub drive_amplitude_noise: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            tau_c: DEFAULT_TAU_C,
            sigma_b: 0.0,
            seed: 0,
            n_traj: DEFAULT_N_TRAJ,
            drive_amplitude_noise: 0.0,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_c > 0.0 && self.tau_c.is_finite()) {
            return Err(invalid(format!("tau_c must be positive, got {}", self.tau_c)));
        }
        if !(self.sigma_b >= 0.0 && self.sigma_b.is_finite()) {
            return Err(invalid(format!("sigma_b must be >= 0, got {}", self.sigma_b)));
        }
        if self.n_traj == 0 {
            return Err(invalid("n_traj must be at least 1"));
        }
        if !(self.drive_amplitude_noise >= 0.0 && self.drive_amplitude_noise.is_finite()) {
            return Err(invalid("drive_amplitude_noise must be >= 0"));
        }
        Ok(())
    }
}

/// Random stream of trajectory `index`, independent of evaluation order.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Stationary OU process with exact discretization.
#[derive(Debug, Clone)]
pub struct OuProcess {
    value: f64,
    tau_c: f64,
    sigma: f64,
}

impl OuProcess {
    /// Starts from a draw of the stationary distribution N(0, σ²).
    pub fn stationary<R: Rng>(tau_c: f64, sigma: f64, rng: &mut R) -> Self {
        let z: f64 = rng.sample(StandardNormal);
        Self {
            value: sigma * z,
            tau_c,
            sigma,
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// `x ← x·e^(−dt/τ) + σ·√(1 − e^(−2dt/τ))·ξ`.
    pub fn advance<R: Rng>(&mut self, dt: f64, rng: &mut R) -> f64 {
        let decay = (-dt / self.tau_c).exp();
        let z: f64 = rng.sample(StandardNormal);
        self.value = self.value * decay + self.sigma * (1.0 - decay * decay).sqrt() * z;
        self.value
    }
}

/// OU frequency shifts (MHz) sampled at `t = k·dt`, `k = 0..=⌊T/dt⌋`.
pub fn ou_trajectory(nm: &NoiseModel, dt: f64, t_total: f64, traj_index: u64) -> Result<Vec<f64>> {
    nm.validate()?;
    if !(dt > 0.0) || !(t_total >= dt) {
        return Err(invalid(format!("need dt > 0 and T >= dt, got dt={dt}, T={t_total}")));
    }
    let n = (t_total / dt).floor() as usize;
    let mut rng = trajectory_rng(nm.seed, traj_index);
    let mut ou = OuProcess::stationary(nm.tau_c, nm.sigma_b, &mut rng);
    let mut out = Vec::with_capacity(n + 1);
    out.push(ou.value());
    for _ in 0..n {
        out.push(ou.advance(dt, &mut rng));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PulseKind {
    /// Instantaneous reset to the initialized state, then dead time.
    LaserInit,
    MwPulse {
        /// MHz
        frequency: f64,
        /// Rabi frequency, MHz
        rabi: f64,
        /// rad
        phase: f64,
    },
    Wait,
    /// Populations are read at the start of the element.
    Readout,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseElement {
    pub kind: PulseKind,
    /// μs
    pub duration: f64,
    /// Whether the continuous drive is on during this element.
    pub drive_on: bool,
}

impl PulseElement {
    pub fn laser(duration: f64, drive_on: bool) -> Self {
        Self {
            kind: PulseKind::LaserInit,
            duration,
            drive_on,
        }
    }

    pub fn mw(frequency: f64, rabi: f64, phase: f64, duration: f64, drive_on: bool) -> Self {
        Self {
            kind: PulseKind::MwPulse {
                frequency,
                rabi,
                phase,
            },
            duration,
            drive_on,
        }
    }

    pub fn wait(duration: f64, drive_on: bool) -> Self {
        Self {
            kind: PulseKind::Wait,
            duration,
            drive_on,
        }
    }

    pub fn readout(duration: f64, drive_on: bool) -> Self {
        Self {
            kind: PulseKind::Readout,
            duration,
            drive_on,
        }
    }
}

/// Relative phase between the probe source and the drive source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourcePhase {
    /// Probe phases are referenced to the drive.
    Locked,
    /// A uniformly random common offset is added to every probe pulse of a
    /// trajectory. Offsets are stratified: trajectory `i` of `n` draws from
    /// `[2πi/n, 2π(i+1)/n)`.
    Random,
}

/// Total-time tolerance for sequence bookkeeping, μs.
pub const T_SEQ_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PulseSequence {
    elements: Vec<PulseElement>,
    t_seq: f64,
    phase_cycle: Option<(f64, f64)>,
    source_phase: SourcePhase,
}

impl PulseSequence {
    pub fn new(elements: Vec<PulseElement>) -> Result<Self> {
        let t_seq = elements.iter().map(|e| e.duration).sum();
        Self::with_total(elements, t_seq)
    }

    /// Requires the element durations to add up to `t_seq`.
    pub fn with_total(elements: Vec<PulseElement>, t_seq: f64) -> Result<Self> {
        for (i, e) in elements.iter().enumerate() {
            if !(e.duration >= 0.0 && e.duration.is_finite()) {
                return Err(invalid(format!("element {i} has invalid duration {}", e.duration)));
            }
            if let PulseKind::MwPulse {
                frequency,
                rabi,
                phase,
            } = e.kind
            {
                if !(rabi >= 0.0) || !frequency.is_finite() || !phase.is_finite() {
                    return Err(invalid(format!("element {i} has invalid MW parameters")));
                }
            }
        }
        if !elements.iter().any(|e| e.kind == PulseKind::Readout) {
            return Err(invalid("sequence has no readout element"));
        }
        let sum: f64 = elements.iter().map(|e| e.duration).sum();
        if (sum - t_seq).abs() > T_SEQ_TOL {
            return Err(invalid(format!(
                "element durations sum to {sum} μs, expected T_seq = {t_seq} μs"
            )));
        }
        Ok(Self {
            elements,
            t_seq,
            phase_cycle: None,
            source_phase: SourcePhase::Locked,
        })
    }

    /// Inserts a wait before the first readout so the sequence lasts exactly `t_seq`.
    /// The wait inherits the drive state of the readout.
    pub fn padded(mut elements: Vec<PulseElement>, t_seq: f64) -> Result<Self> {
        let sum: f64 = elements.iter().map(|e| e.duration).sum();
        let pad = t_seq - sum;
        if pad < -T_SEQ_TOL {
            return Err(invalid(format!(
                "elements last {sum} μs, longer than T_seq = {t_seq} μs"
            )));
        }
        let idx = elements
            .iter()
            .position(|e| e.kind == PulseKind::Readout)
            .ok_or_else(|| invalid("sequence has no readout element"))?;
        let drive_on = elements[idx].drive_on;
        elements.insert(idx, PulseElement::wait(pad.max(0.0), drive_on));
        Self::with_total(elements, t_seq)
    }

    /// Alternates the phase of the last MW pulse between `a` and `b`, which must differ by π.
    pub fn with_phase_cycle(mut self, a: f64, b: f64) -> Result<Self> {
        let diff = (a - b).rem_euclid(2.0 * PI);
        if (diff - PI).abs() > 1e-9 {
            return Err(invalid("phase-cycle phases must differ by π"));
        }
        if self.last_mw_index().is_none() {
            return Err(invalid("phase cycling needs at least one MW pulse"));
        }
        self.phase_cycle = Some((a, b));
        Ok(self)
    }

    pub fn with_source_phase(mut self, source_phase: SourcePhase) -> Self {
        self.source_phase = source_phase;
        self
    }

    pub fn elements(&self) -> &[PulseElement] {
        &self.elements
    }

    pub fn t_seq(&self) -> f64 {
        self.t_seq
    }

    pub fn phase_cycle(&self) -> Option<(f64, f64)> {
        self.phase_cycle
    }

    pub fn source_phase(&self) -> SourcePhase {
        self.source_phase
    }

    fn last_mw_index(&self) -> Option<usize> {
        self.elements
            .iter()
            .rposition(|e| matches!(e.kind, PulseKind::MwPulse { .. }))
    }

    fn uses_drive(&self) -> bool {
        self.elements.iter().any(|e| e.drive_on)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    PolarizeTo0,
    PolarizeToMinus1,
}

/// Photoluminescence readout and optical initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadoutModel {
    /// Fractional PL drop of |−1⟩ relative to |0⟩.
    pub contrast: f64,
    pub baseline: f64,
    pub init_mode: InitMode,
    /// Population placed in the target state by the laser.
    pub init_fidelity: f64,
    /// Fidelity used by experiments that switch to [`InitMode::PolarizeToMinus1`]
    /// because the drive is on during the laser pulse.
    #[serde(default = "default_dressed_init_fidelity")]
    pub dressed_init_fidelity: f64,
    /// RMS fractional laser-power fluctuation, common to both acquisitions of a cycled pair.
    #[serde(default)]
    pub laser_noise: f64,
    /// Occupations of m_I = +1, 0, −1.
    #[serde(default = "equal_nuclear_populations")]
    pub nuclear_populations: [f64; 3],
}

fn default_dressed_init_fidelity() -> f64 {
    DEFAULT_DRESSED_INIT_FIDELITY
}

fn equal_nuclear_populations() -> [f64; 3] {
    [1.0 / 3.0; 3]
}

pub const DEFAULT_CONTRAST: f64 = 0.3;
/// Initialization fidelity into |−1⟩ under laser plus continuous drive.
pub const DEFAULT_DRESSED_INIT_FIDELITY: f64 = 0.8;

impl Default for ReadoutModel {
    fn default() -> Self {
        Self {
            contrast: DEFAULT_CONTRAST,
            baseline: 1.0,
            init_mode: InitMode::PolarizeTo0,
            init_fidelity: 1.0,
            dressed_init_fidelity: DEFAULT_DRESSED_INIT_FIDELITY,
            laser_noise: 0.0,
            nuclear_populations: equal_nuclear_populations(),
        }
    }
}

impl ReadoutModel {
    /// Laser and drive applied together: the spin ends up mostly in |−1⟩.
    pub fn dressed() -> Self {
        Self::default().for_initialization(true)
    }

    /// Picks the initialization mode from whether the drive is on during the laser pulse.
    pub fn for_initialization(mut self, drive_on: bool) -> Self {
        if drive_on {
            self.init_mode = InitMode::PolarizeToMinus1;
            self.init_fidelity = self.dressed_init_fidelity;
        } else {
            self.init_mode = InitMode::PolarizeTo0;
        }
        self
    }

    /// All nuclear population in one manifold.
    pub fn with_nuclear_polarization(mut self, m_i: i8) -> Self {
        self.nuclear_populations = NUCLEAR_PROJECTIONS.map(|m| if m == m_i { 1.0 } else { 0.0 });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.contrast) {
            return Err(invalid(format!("contrast must be in [0,1], got {}", self.contrast)));
        }
        if !(self.baseline > 0.0 && self.baseline.is_finite()) {
            return Err(invalid("baseline must be positive"));
        }
        if !(0.0..=1.0).contains(&self.init_fidelity)
            || !(0.0..=1.0).contains(&self.dressed_init_fidelity)
        {
            return Err(invalid("initialization fidelities must be in [0,1]"));
        }
        if !(self.laser_noise >= 0.0 && self.laser_noise.is_finite()) {
            return Err(invalid("laser_noise must be >= 0"));
        }
        let total: f64 = self.nuclear_populations.iter().sum();
        if self.nuclear_populations.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(invalid("nuclear populations must be non-negative and sum to 1"));
        }
        Ok(())
    }

    /// Initial population of |−1⟩.
    pub fn initial_minus1(&self) -> f64 {
        match self.init_mode {
            InitMode::PolarizeTo0 => 1.0 - self.init_fidelity,
            InitMode::PolarizeToMinus1 => self.init_fidelity,
        }
    }
}

/// PL for a given |−1⟩ population: `baseline·(1 − contrast·p)`.
///
/// |−1⟩ is the dark state in both initialization modes; the inverted (positive)
/// ODMR features of [`InitMode::PolarizeToMinus1`] come from the probe moving
/// population out of an already-dark initial state.
pub fn readout(population_minus1: f64, ro: &ReadoutModel) -> Result<f64> {
    if !(0.0..=1.0).contains(&population_minus1) {
        return Err(invalid(format!(
            "population must be in [0,1], got {population_minus1}"
        )));
    }
    Ok(ro.baseline * (1.0 - ro.contrast * population_minus1))
}

/// Trajectory-averaged ΔPL/PL with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub mean: f64,
    pub stderr: f64,
}

/// Sums in a fixed binary tree so the result does not depend on how the
/// per-trajectory values were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (l, r) = values.split_at(n / 2);
            pairwise_sum(l) + pairwise_sum(r)
        }
    }
}

fn mean_and_stderr(values: &[f64]) -> Signal {
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    if values.len() < 2 {
        return Signal { mean, stderr: 0.0 };
    }
    let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    Signal {
        mean,
        stderr: (var / n).sqrt(),
    }
}

#[derive(Debug, Clone, Copy)]
struct ProbeStep {
    beat: f64,
    rabi: f64,
    phase: f64,
}

#[derive(Debug, Clone, Copy)]
struct ElementPlan {
    kind: PulseKind,
    start: f64,
    n_sub: usize,
    dt: f64,
    drive_on: bool,
    probe: Option<ProbeStep>,
}

/// Everything about a run that does not depend on the trajectory.
struct Engine {
    plans: Vec<ElementPlan>,
    detunings: Vec<f64>,
    weights: Vec<f64>,
    /// Noiseless frame evolution from the last reset to the readout, per manifold.
    frame: Vec<Su2>,
    drive_rabi: f64,
    drive_phase: f64,
    last_mw: Option<usize>,
    phase_cycle: Option<(f64, f64)>,
    random_phase: bool,
    tau_c: f64,
    sigma_b: f64,
    amp_noise: f64,
    p_minus1: f64,
    ro: ReadoutModel,
}

impl Engine {
    fn build(
        p: &NvParams,
        drive: Option<&DriveField>,
        seq: &PulseSequence,
        nm: &NoiseModel,
        ro: &ReadoutModel,
    ) -> Result<Self> {
        p.validate()?;
        nm.validate()?;
        ro.validate()?;
        let uses_drive = seq.uses_drive();
        let drive = match (drive, uses_drive) {
            (None, true) => {
                return Err(invalid("sequence switches the drive on but no drive field was given"))
            }
            (Some(d), true) => {
                d.validate()?;
                check_rwa(p, d.omega, p.rabi_frequency(d.b_drive))?;
                Some(*d)
            }
            _ => None,
        };

        let frame_freq = match drive {
            Some(d) => d.omega,
            None => seq
                .elements
                .iter()
                .find_map(|e| match e.kind {
                    PulseKind::MwPulse { frequency, .. } => Some(frequency),
                    _ => None,
                })
                .unwrap_or_else(|| p.transition_minus(0)),
        };
        if drive.is_none() {
            // Without a drive the frame follows the probe; RWA still needs the
            // probe on the |−1⟩ side of the spectrum.
            check_rwa(p, frame_freq, 0.0)?;
        }

        let mut detunings = Vec::new();
        let mut weights = Vec::new();
        for (m, w) in NUCLEAR_PROJECTIONS.iter().zip(ro.nuclear_populations) {
            if w > 0.0 {
                detunings.push(p.transition_minus(*m) - frame_freq);
                weights.push(w);
            }
        }
        let max_detuning = detunings.iter().fold(0.0f64, |a, d| a.max(d.abs()));
        let drive_rabi = drive.map_or(0.0, |d| p.rabi_frequency(d.b_drive));
        let drive_phase = drive.map_or(0.0, |d| d.phase);
        let dt_noise = if nm.sigma_b > 0.0 {
            nm.tau_c / NOISE_STEPS_PER_TAU
        } else {
            f64::INFINITY
        };

        let mut plans = Vec::with_capacity(seq.elements.len());
        let mut t = 0.0;
        for e in &seq.elements {
            let probe = match e.kind {
                PulseKind::MwPulse {
                    frequency,
                    rabi,
                    phase,
                } if rabi > 0.0 => Some(ProbeStep {
                    beat: frequency - frame_freq,
                    rabi,
                    phase,
                }),
                _ => None,
            };
            let mut n_sub = if e.duration > 0.0 { 1 } else { 0 };
            if let Some(pr) = probe {
                if pr.beat != 0.0 {
                    let drive_part = if e.drive_on { drive_rabi } else { 0.0 };
                    let f_max = pr.beat.abs() + pr.rabi + drive_part + max_detuning;
                    n_sub = n_sub.max(substeps(e.duration, f_max));
                }
            }
            if dt_noise.is_finite() && e.duration > 0.0 {
                n_sub = n_sub.max((e.duration / dt_noise).ceil() as usize);
            }
            let dt = if n_sub > 0 {
                e.duration / n_sub as f64
            } else {
                0.0
            };
            plans.push(ElementPlan {
                kind: e.kind,
                start: t,
                n_sub,
                dt,
                drive_on: e.drive_on,
                probe,
            });
            t += e.duration;
        }

        let frame = detunings
            .iter()
            .map(|&det| {
                let mut u = Su2::IDENTITY;
                for pl in &plans {
                    match pl.kind {
                        PulseKind::LaserInit => u = Su2::IDENTITY,
                        PulseKind::Readout => break,
                        _ => {}
                    }
                    let (hx, hy) = if pl.drive_on {
                        (
                            0.5 * drive_rabi * drive_phase.cos(),
                            0.5 * drive_rabi * drive_phase.sin(),
                        )
                    } else {
                        (0.0, 0.0)
                    };
                    let dur = pl.dt * pl.n_sub as f64;
                    u = Su2::from_field(hx, hy, 0.5 * det, dur).then_after(u);
                }
                u
            })
            .collect();

        Ok(Self {
            plans,
            detunings,
            weights,
            frame,
            drive_rabi,
            drive_phase,
            last_mw: seq.last_mw_index(),
            phase_cycle: seq.phase_cycle,
            random_phase: seq.source_phase == SourcePhase::Random,
            tau_c: nm.tau_c,
            sigma_b: nm.sigma_b,
            amp_noise: nm.drive_amplitude_noise,
            p_minus1: ro.initial_minus1(),
            ro: *ro,
        })
    }

    fn is_deterministic(&self) -> bool {
        self.sigma_b == 0.0
            && self.amp_noise == 0.0
            && self.ro.laser_noise == 0.0
            && !(self.random_phase && self.last_mw.is_some())
    }

    /// |−1⟩ population at the readout for one acquisition.
    fn acquire(
        &self,
        rng: &mut ChaCha8Rng,
        phase_offset: f64,
        amp_factor: f64,
        last_phase: Option<f64>,
    ) -> f64 {
        let n_man = self.detunings.len();
        let mut us = [Su2::IDENTITY; 3];
        let mut ou = (self.sigma_b > 0.0)
            .then(|| OuProcess::stationary(self.tau_c, self.sigma_b, rng));
        let (dx, dy) = (
            0.5 * self.drive_rabi * amp_factor * self.drive_phase.cos(),
            0.5 * self.drive_rabi * amp_factor * self.drive_phase.sin(),
        );

        for (idx, pl) in self.plans.iter().enumerate() {
            match pl.kind {
                PulseKind::LaserInit => us = [Su2::IDENTITY; 3],
                PulseKind::Readout => break,
                _ => {}
            }
            if pl.n_sub == 0 {
                continue;
            }
            let (bx, by) = if pl.drive_on { (dx, dy) } else { (0.0, 0.0) };
            let probe = pl.probe.map(|pr| {
                let phase = match (last_phase, Some(idx) == self.last_mw) {
                    (Some(ph), true) => ph,
                    _ => pr.phase,
                };
                (pr, phase + phase_offset)
            });
            for k in 0..pl.n_sub {
                let noise = match ou.as_mut() {
                    Some(ou) => {
                        let before = ou.value();
                        0.5 * (before + ou.advance(pl.dt, rng))
                    }
                    None => 0.0,
                };
                let (mut hx, mut hy) = (bx, by);
                if let Some((pr, phase)) = probe {
                    let tm = pl.start + (k as f64 + 0.5) * pl.dt;
                    let arg = 2.0 * PI * pr.beat * tm + phase;
                    hx += 0.5 * pr.rabi * arg.cos();
                    hy += 0.5 * pr.rabi * arg.sin();
                }
                for (u, det) in us.iter_mut().zip(&self.detunings) {
                    *u = Su2::from_field(hx, hy, 0.5 * (det + noise), pl.dt).then_after(*u);
                }
            }
        }

        let p0 = 1.0 - self.p_minus1;
        let mut total = 0.0;
        for ((frame, u), w) in self.frame.iter().zip(us).zip(&self.weights).take(n_man) {
            let u = frame.adjoint().then_after(u);
            let pm = self.p_minus1 * u.a.norm_sqr() + p0 * u.b.norm_sqr();
            total += w * pm;
        }
        total.clamp(0.0, 1.0)
    }

    fn trajectory(&self, seed: u64, index: u64, n_traj: u64) -> f64 {
        let mut rng = trajectory_rng(seed, index);
        let phase_offset = if self.random_phase {
            (index as f64 + rng.random::<f64>()) / n_traj as f64 * 2.0 * PI
        } else {
            0.0
        };
        let amp_factor = if self.amp_noise > 0.0 {
            1.0 + self.amp_noise * rng.sample::<f64, _>(StandardNormal)
        } else {
            1.0
        };
        let gain = if self.ro.laser_noise > 0.0 {
            1.0 + self.ro.laser_noise * rng.sample::<f64, _>(StandardNormal)
        } else {
            1.0
        };
        let pl = |p: f64| gain * self.ro.baseline * (1.0 - self.ro.contrast * p);
        match self.phase_cycle {
            None => {
                let p = self.acquire(&mut rng, phase_offset, amp_factor, None);
                let reference = self.ro.baseline * (1.0 - self.ro.contrast * self.p_minus1);
                (pl(p) - reference) / reference
            }
            Some((a, b)) => {
                let pa = pl(self.acquire(&mut rng, phase_offset, amp_factor, Some(a)));
                let pb = pl(self.acquire(&mut rng, phase_offset, amp_factor, Some(b)));
                (pa - pb) / (pa + pb)
            }
        }
    }
}

/// Runs `seq` for `nm.n_traj` trajectories and returns the averaged ΔPL/PL.
///
/// Without a phase cycle the signal is `(PL − PL_init)/PL_init`, where
/// `PL_init` belongs to the freshly initialized state. With a phase cycle it
/// is `(PL_a − PL_b)/(PL_a + PL_b)` per trajectory, which cancels laser-power
/// fluctuations common to the pair.
pub fn run_sequence(
    p: &NvParams,
    drive: Option<&DriveField>,
    seq: &PulseSequence,
    nm: &NoiseModel,
    ro: &ReadoutModel,
) -> Result<Signal> {
    let engine = Engine::build(p, drive, seq, nm, ro)?;
    if engine.is_deterministic() {
        return Ok(Signal {
            mean: engine.trajectory(nm.seed, 0, 1),
            stderr: 0.0,
        });
    }
    let values: Vec<f64> = (0..nm.n_traj as u64)
        .into_par_iter()
        .map(|i| engine.trajectory(nm.seed, i, nm.n_traj as u64))
        .collect();
    Ok(mean_and_stderr(&values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_params() -> NvParams {
        NvParams {
            a: 0.0,
            ..NvParams::default()
        }
    }

    #[test]
    fn zero_sigma_gives_zero_series() {
        let nm = NoiseModel {
            sigma_b: 0.0,
            ..NoiseModel::default()
        };
        let xs = ou_trajectory(&nm, 0.1, 5.0, 3).unwrap();
        assert_eq!(xs.len(), 51);
        assert!(xs.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn ou_trajectory_is_deterministic() {
        let nm = NoiseModel {
            sigma_b: 0.3,
            seed: 9,
            ..NoiseModel::default()
        };
        let a = ou_trajectory(&nm, 0.1, 5.0, 4).unwrap();
        let b = ou_trajectory(&nm, 0.1, 5.0, 4).unwrap();
        let c = ou_trajectory(&nm, 0.1, 5.0, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(ou_trajectory(&nm, 0.0, 5.0, 0).is_err());
        assert!(ou_trajectory(&nm, 1.0, 0.5, 0).is_err());
    }

    #[test]
    fn readout_affine() {
        let ro = ReadoutModel::default();
        assert_eq!(readout(0.0, &ro).unwrap(), 1.0);
        assert!((readout(1.0, &ro).unwrap() - 0.7).abs() < 1e-15);
        let mid = readout(0.5, &ro).unwrap();
        assert!((mid - 0.5 * (1.0 + 0.7)).abs() < 1e-15);
        assert!(readout(1.2, &ro).is_err());
    }

    #[test]
    fn no_mw_sequence_is_reference_level() {
        let p = NvParams::default();
        let seq = PulseSequence::new(vec![
            PulseElement::laser(1.0, false),
            PulseElement::wait(3.0, false),
            PulseElement::readout(0.3, false),
        ])
        .unwrap();
        let s = run_sequence(&p, None, &seq, &NoiseModel::default(), &ReadoutModel::default())
            .unwrap();
        assert_eq!(s.mean, 0.0);
    }

    #[test]
    fn resonant_pi_pulse_inverts() {
        let p = flat_params();
        let rabi = 0.5;
        let seq = PulseSequence::new(vec![
            PulseElement::laser(1.0, false),
            PulseElement::mw(p.transition_minus(0), rabi, 0.0, 1.0 / (2.0 * rabi), false),
            PulseElement::readout(0.3, false),
        ])
        .unwrap();
        let ro = ReadoutModel::default();
        let s = run_sequence(&p, None, &seq, &NoiseModel::default(), &ro).unwrap();
        assert!((s.mean + ro.contrast).abs() < 1e-6, "{}", s.mean);
    }

    #[test]
    fn drive_required_when_switched_on() {
        let p = NvParams::default();
        let seq = PulseSequence::new(vec![
            PulseElement::laser(1.0, true),
            PulseElement::readout(0.3, true),
        ])
        .unwrap();
        assert!(run_sequence(&p, None, &seq, &NoiseModel::default(), &ReadoutModel::default())
            .is_err());
    }

    #[test]
    fn zero_trajectories_rejected() {
        let p = NvParams::default();
        let seq = PulseSequence::new(vec![PulseElement::readout(0.3, false)]).unwrap();
        let nm = NoiseModel {
            n_traj: 0,
            ..NoiseModel::default()
        };
        assert!(run_sequence(&p, None, &seq, &nm, &ReadoutModel::default()).is_err());
    }

    #[test]
    fn sequence_total_time_enforced() {
        let els = vec![PulseElement::laser(1.0, false), PulseElement::readout(0.3, false)];
        assert!(PulseSequence::with_total(els.clone(), 1.3).is_ok());
        assert!(PulseSequence::with_total(els.clone(), 1.4).is_err());
        let padded = PulseSequence::padded(els.clone(), 5.0).unwrap();
        assert!((padded.t_seq() - 5.0).abs() < 1e-12);
        assert_eq!(padded.elements()[1].kind, PulseKind::Wait);
        assert!(PulseSequence::padded(els, 1.0).is_err());
        assert!(PulseSequence::new(vec![PulseElement::laser(1.0, false)]).is_err());
    }

    #[test]
    fn phase_cycle_must_differ_by_pi() {
        let seq = PulseSequence::new(vec![
            PulseElement::mw(2837.0, 0.4, 0.0, 0.5, false),
            PulseElement::readout(0.3, false),
        ])
        .unwrap();
        assert!(seq.clone().with_phase_cycle(0.0, PI).is_ok());
        assert!(seq.clone().with_phase_cycle(0.5, 0.5 - PI).is_ok());
        assert!(seq.with_phase_cycle(0.0, 1.0).is_err());
    }

    #[test]
    fn pairwise_sum_matches_naive_for_small_sets() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(pairwise_sum(&v), 15.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
