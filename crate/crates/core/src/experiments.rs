//! Experiment recipes: ODMR, dressed spectra, drive sweeps, Rabi and echo scans,
//! and noise calibration.
//!
//! Every grid point is an independent [`run_sequence`] call with the same seed,
//! so all points of a scan share their random numbers and scans vary smoothly.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, find_peak_near, find_peaks, fit_exp_decay, FitResult, Model, Peak};
use crate::dynamics::{
    run_sequence, NoiseModel, PulseElement, PulseSequence, ReadoutModel, SourcePhase,
};
use crate::error::{invalid, Error, Result};
use crate::nv_model::{generalized_rabi, DriveField, NvParams, NUCLEAR_PROJECTIONS};

/// Sampled spectrum; `x` strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    x: Vec<f64>,
    y: Vec<f64>,
    y_err: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flag: Option<String>,
}

fn check_samples(x: &[f64], y: &[f64], e: &[f64]) -> Result<()> {
    if x.len() != y.len() || x.len() != e.len() {
        return Err(invalid(format!(
            "sample arrays differ in length: {}, {}, {}",
            x.len(),
            y.len(),
            e.len()
        )));
    }
    if x.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("abscissa must be strictly increasing"));
    }
    if e.iter().any(|v| !(*v >= 0.0)) {
        return Err(invalid("uncertainties must be non-negative"));
    }
    Ok(())
}

/// Sorts `(x, y, err)` triples by `x`.
fn sorted(x: Vec<f64>, y: Vec<f64>, e: Vec<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|a, b| x[*a].total_cmp(&x[*b]));
    (
        idx.iter().map(|i| x[*i]).collect(),
        idx.iter().map(|i| y[*i]).collect(),
        idx.iter().map(|i| e[*i]).collect(),
    )
}

impl Spectrum {
    pub fn new(x: Vec<f64>, y: Vec<f64>, y_err: Vec<f64>) -> Result<Self> {
        check_samples(&x, &y, &y_err)?;
        Ok(Self {
            x,
            y,
            y_err,
            flag: None,
        })
    }

    /// Accepts samples in any order.
    pub fn from_samples(x: Vec<f64>, y: Vec<f64>, y_err: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.len() != y_err.len() {
            return Err(invalid("sample arrays differ in length"));
        }
        let (x, y, e) = sorted(x, y, y_err);
        Self::new(x, y, e)
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn y_err(&self) -> &[f64] {
        &self.y_err
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Set when the scan cannot contain the feature it was meant to show.
    pub fn flag(&self) -> Option<&str> {
        self.flag.as_deref()
    }

    /// Same samples with zero errors, so fits weight every point equally.
    /// Use when the line-shape model error exceeds the sampling error.
    pub fn unweighted(&self) -> Spectrum {
        Spectrum {
            x: self.x.clone(),
            y: self.y.clone(),
            y_err: vec![0.0; self.y.len()],
            flag: self.flag.clone(),
        }
    }

    /// Samples with `lo ≤ x ≤ hi`.
    pub fn window(&self, lo: f64, hi: f64) -> Result<Spectrum> {
        let a = self.x.partition_point(|v| *v < lo);
        let b = self.x.partition_point(|v| *v <= hi);
        Spectrum::new(
            self.x[a..b].to_vec(),
            self.y[a..b].to_vec(),
            self.y_err[a..b].to_vec(),
        )
    }
}

/// Signal versus evolution time; `t` strictly increasing and non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    t: Vec<f64>,
    y: Vec<f64>,
    y_err: Vec<f64>,
}

impl DecayCurve {
    pub fn new(t: Vec<f64>, y: Vec<f64>, y_err: Vec<f64>) -> Result<Self> {
        check_samples(&t, &y, &y_err)?;
        if t.first().is_some_and(|v| *v < 0.0) {
            return Err(invalid("times must be non-negative"));
        }
        Ok(Self { t, y, y_err })
    }

    pub fn from_samples(t: Vec<f64>, y: Vec<f64>, y_err: Vec<f64>) -> Result<Self> {
        if t.len() != y.len() || t.len() != y_err.len() {
            return Err(invalid("sample arrays differ in length"));
        }
        let (t, y, e) = sorted(t, y, y_err);
        Self::new(t, y, e)
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn y_err(&self) -> &[f64] {
        &self.y_err
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Evenly spaced grid `start, start + step, …` up to `stop` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Grid {
    pub fn new(start: f64, stop: f64, step: f64) -> Self {
        Self { start, stop, step }
    }

    /// Centred on `c` with half-width `half`.
    pub fn around(c: f64, half: f64, step: f64) -> Self {
        Self::new(c - half, c + half, step)
    }

    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !(self.stop >= self.start) || !self.start.is_finite() {
            return Err(invalid(format!(
                "grid needs step > 0 and stop >= start, got {self:?}"
            )));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        if n > 1_000_000 {
            return Err(invalid("grid has more than 10⁶ points"));
        }
        Ok((0..n).map(|i| self.start + i as f64 * self.step).collect())
    }
}

/// Pulse timings shared by the spectral experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralTiming {
    /// μs
    pub laser: f64,
    /// π-pulse length, μs; the probe Rabi frequency is `1/(2·probe_duration)`.
    pub probe_duration: f64,
    /// μs
    pub readout: f64,
}

impl Default for SpectralTiming {
    fn default() -> Self {
        Self {
            laser: 1.0,
            probe_duration: 5.5,
            readout: 0.3,
        }
    }
}

impl SpectralTiming {
    pub fn probe_rabi(&self) -> f64 {
        1.0 / (2.0 * self.probe_duration)
    }

    fn validate(&self) -> Result<()> {
        if !(self.laser >= 0.0) || !(self.probe_duration > 0.0) || !(self.readout >= 0.0) {
            return Err(invalid("timings must be non-negative with a positive probe duration"));
        }
        Ok(())
    }
}

fn spectrum_from(
    freqs: &[f64],
    mut point: impl FnMut(f64) -> Result<crate::dynamics::Signal>,
) -> Result<Spectrum> {
    let mut y = Vec::with_capacity(freqs.len());
    let mut e = Vec::with_capacity(freqs.len());
    for &f in freqs {
        let s = point(f)?;
        y.push(s.mean);
        e.push(s.stderr);
    }
    Spectrum::new(freqs.to_vec(), y, e)
}

/// Hyperfine-resolved ODMR with a π probe pulse and no drive.
///
/// The spectrum is flagged when no |0⟩↔|−1⟩ line lies within the scan
/// (extended by four probe Rabi frequencies on each side).
pub fn pulsed_odmr(
    p: &NvParams,
    timing: &SpectralTiming,
    scan: &Grid,
    nm: &NoiseModel,
    ro: &ReadoutModel,
) -> Result<Spectrum> {
    timing.validate()?;
    let freqs = scan.points()?;
    let ro = ro.for_initialization(false);
    let rabi = timing.probe_rabi();
    let mut s = spectrum_from(&freqs, |nu| {
        let seq = PulseSequence::new(vec![
            PulseElement::laser(timing.laser, false),
            PulseElement::mw(nu, rabi, 0.0, timing.probe_duration, false),
            PulseElement::readout(timing.readout, false),
        ])?;
        run_sequence(p, None, &seq, nm, &ro)
    })?;
    let margin = 4.0 * rabi;
    let covered = NUCLEAR_PROJECTIONS.iter().any(|m| {
        let f = p.transition_minus(*m);
        f >= scan.start - margin && f <= scan.stop + margin
    });
    if !covered {
        s.flag = Some("no resonance inside the scan range".into());
    }
    Ok(s)
}

/// ODMR under continuous drive: laser, probe and readout all with the drive on.
///
/// Probe and drive come from independent sources, so their relative phase
/// is random from shot to shot.
pub fn ats_odmr(
    p: &NvParams,
    drive: &DriveField,
    timing: &SpectralTiming,
    scan: &Grid,
    nm: &NoiseModel,
    ro: &ReadoutModel,
) -> Result<Spectrum> {
    timing.validate()?;
    let freqs = scan.points()?;
    let ro = ro.for_initialization(true);
    let rabi = timing.probe_rabi();
    spectrum_from(&freqs, |nu| {
        let seq = PulseSequence::new(vec![
            PulseElement::laser(timing.laser, true),
            PulseElement::mw(nu, rabi, 0.0, timing.probe_duration, true),
            PulseElement::readout(timing.readout, true),
        ])?
        .with_source_phase(SourcePhase::Random);
        run_sequence(p, Some(drive), &seq, nm, &ro)
    })
}

/// Nuclear projection whose |0⟩↔|−1⟩ line is nearest `freq`.
pub fn nearest_manifold(p: &NvParams, freq: f64) -> i8 {
    *NUCLEAR_PROJECTIONS
        .iter()
        .min_by(|a, b| {
            (p.transition_minus(**a) - freq)
                .abs()
                .total_cmp(&(p.transition_minus(**b) - freq).abs())
        })
        .expect("three projections")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Low,
    Central,
    High,
}

/// Peaks found in one spectrum of a sweep: one when unresolved, otherwise
/// (low, central, high).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    /// B_drive in μT for power sweeps, drive frequency in MHz for detuning sweeps.
    pub control: f64,
    pub drive_frequency: f64,
    pub b_drive: f64,
    pub peaks: Vec<Peak>,
}

impl SweepPoint {
    pub fn resolved(&self) -> bool {
        self.peaks.len() == 3
    }

    pub fn branch(&self, b: Branch) -> Option<&Peak> {
        match (self.peaks.len(), b) {
            (3, Branch::Low) => Some(&self.peaks[0]),
            (3, Branch::Central) => Some(&self.peaks[1]),
            (3, Branch::High) => Some(&self.peaks[2]),
            (1, Branch::Central) => Some(&self.peaks[0]),
            _ => None,
        }
    }
}

/// Straight-line fit of one branch of one fan against the control value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchFit {
    pub drive_frequency: f64,
    pub branch: Branch,
    pub fit: FitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub control_name: String,
    pub control_unit: String,
    pub points: Vec<SweepPoint>,
    pub branch_fits: Vec<BranchFit>,
    /// The underlying spectra, one per point, in the same order.
    pub spectra: Vec<Spectrum>,
    /// Hyperfine manifold a detuning sweep is centred on.
    pub manifold: Option<i8>,
}

/// Settings shared by the power and detuning sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub timing: SpectralTiming,
    /// Probe scan half-width around the drive frequency, MHz.
    pub half_width: f64,
    /// Probe scan step, MHz.
    pub step: f64,
    /// Peaks below this fraction of the tallest feature are ignored.
    pub min_relative_prominence: f64,
    /// Half-width of the Lorentzian refinement window, MHz.
    pub refine_half_window: f64,
    /// Restrict the simulation to the hyperfine manifold nearest the drive.
    pub single_manifold: bool,
    pub positions: PeakPositions,
}

/// How resolved triplet positions are refined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakPositions {
    /// Joint fit of three Lorentzians and an offset over the whole scan.
    /// Biased when the lines carry pulse sidelobes.
    Triplet,
    /// Independent Lorentzian fits in a window around each peak.
    PerPeak,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            timing: SpectralTiming::default(),
            half_width: 2.2,
            step: 0.025,
            min_relative_prominence: 0.15,
            refine_half_window: 0.15,
            single_manifold: true,
            positions: PeakPositions::PerPeak,
        }
    }
}

/// Positive dressed peaks of a spectrum classified around the drive frequency:
/// the central peak is the one nearest the drive, the side peaks its nearest
/// neighbours on either side. When only one side line clears the threshold,
/// the other is looked for around its mirror image about the drive, where a
/// detuned drive leaves it weak.
pub fn classify_peaks(s: &Spectrum, drive_frequency: f64, settings: &SweepSettings) -> Vec<Peak> {
    let y = s.y();
    let base = y.iter().copied().fold(f64::MAX, f64::min);
    let top = y.iter().copied().fold(f64::MIN, f64::max);
    let noise = s.y_err().iter().copied().fold(0.0, f64::max);
    let threshold = (settings.min_relative_prominence * (top - base)).max(3.0 * noise);
    let peaks = find_peaks(s, 1.0, threshold, settings.refine_half_window);
    if peaks.is_empty() {
        return peaks;
    }
    let ci = (0..peaks.len())
        .min_by(|a, b| {
            (peaks[*a].position - drive_frequency)
                .abs()
                .total_cmp(&(peaks[*b].position - drive_frequency).abs())
        })
        .expect("non-empty");
    let tallest = || {
        let i = (0..peaks.len())
            .max_by(|a, b| peaks[*a].height.total_cmp(&peaks[*b].height))
            .expect("non-empty");
        vec![peaks[i]]
    };
    let central = peaks[ci];
    let lower = ci.checked_sub(1).map(|i| peaks[i]);
    let upper = peaks.get(ci + 1).copied();
    let mirror = |side: &Peak| {
        let guess = 2.0 * drive_frequency - side.position;
        let search = settings.refine_half_window.max(3.0 * settings.step);
        find_peak_near(s, 1.0, guess, search, settings.refine_half_window)
            .filter(|p| (p.position - central.position) * (side.position - central.position) < 0.0)
    };
    let seeds = match (lower, upper) {
        (Some(lo), Some(hi)) => [lo, central, hi],
        (Some(lo), None) => match mirror(&lo) {
            Some(hi) => [lo, central, hi],
            None => return tallest(),
        },
        (None, Some(hi)) => match mirror(&hi) {
            Some(lo) => [lo, central, hi],
            None => return tallest(),
        },
        (None, None) => return tallest(),
    };
    match settings.positions {
        PeakPositions::PerPeak => seeds.to_vec(),
        PeakPositions::Triplet => analysis::fit_triplet(s, &seeds).map_or(seeds.to_vec(), |t| t.to_vec()),
    }
}

fn sweep_point(
    p: &NvParams,
    drive: &DriveField,
    control: f64,
    manifold: i8,
    settings: &SweepSettings,
    nm: &NoiseModel,
    ro: &ReadoutModel,
) -> Result<(SweepPoint, Spectrum)> {
    let mut ro = *ro;
    if settings.single_manifold {
        ro = ro.with_nuclear_polarization(manifold);
    }
    let scan = Grid::around(drive.omega, settings.half_width, settings.step);
    let s = ats_odmr(p, drive, &settings.timing, &scan, nm, &ro)?;
    let peaks = classify_peaks(&s, drive.omega, settings);
    Ok((
        SweepPoint {
            control,
            drive_frequency: drive.omega,
            b_drive: drive.b_drive,
            peaks,
        },
        s,
    ))
}

fn branch_fits(points: &[SweepPoint], fan: f64, controls_as: impl Fn(&SweepPoint) -> f64) -> Vec<BranchFit> {
    let mut out = Vec::new();
    for b in [Branch::Low, Branch::Central, Branch::High] {
        let (mut x, mut y, mut e) = (Vec::new(), Vec::new(), Vec::new());
        for pt in points.iter().filter(|pt| pt.drive_frequency == fan && pt.resolved()) {
            let peak = pt.branch(b).expect("resolved point has all branches");
            x.push(controls_as(pt));
            y.push(peak.position);
            e.push(peak.uncertainty);
        }
        if x.len() < 3 {
            continue;
        }
        if let Ok(fit) = analysis::fit_line(&x, &y, Some(&e)) {
            out.push(BranchFit {
                drive_frequency: fan,
                branch: b,
                fit,
            });
        }
    }
    out
}

/// Dressed spectra for every (drive frequency, B_drive) pair, with straight
/// lines fitted to each branch of each fan. Slopes are in MHz/μT.
pub fn drive_power_sweep(
    p: &NvParams,
    drive_frequencies: &[f64],
    b_grid: &[f64],
    settings: &SweepSettings,
    nm: &NoiseModel,
    ro: &ReadoutModel,
) -> Result<SweepResult> {
    if drive_frequencies.is_empty() || b_grid.is_empty() {
        return Err(invalid("power sweep needs drive frequencies and a B_drive grid"));
    }
    let mut points = Vec::new();
    let mut spectra = Vec::new();
    for &f in drive_frequencies {
        for &b in b_grid {
            let (pt, s) = sweep_point(p, &DriveField::new(f, b), b, nearest_manifold(p, f), settings, nm, ro)?;
            points.push(pt);
            spectra.push(s);
        }
    }
    let mut fits = Vec::new();
    for &f in drive_frequencies {
        fits.extend(branch_fits(&points, f, |pt| pt.b_drive));
    }
    Ok(SweepResult {
        control_name: "b_drive".into(),
        control_unit: "uT".into(),
        points,
        branch_fits: fits,
        spectra,
        manifold: None,
    })
}

/// Dressed spectra at fixed B_drive for each drive frequency of `freq_grid`.
/// Branch lines are fitted against the drive frequency.
pub fn drive_detuning_sweep(
    p: &NvParams,
    b_drive: f64,
    freq_grid: &Grid,
    settings: &SweepSettings,
    nm: &NoiseModel,
    ro: &ReadoutModel,
) -> Result<SweepResult> {
    let freqs = freq_grid.points()?;
    let manifold = nearest_manifold(p, 0.5 * (freq_grid.start + freq_grid.stop));
    let mut points = Vec::new();
    let mut spectra = Vec::new();
    for &f in &freqs {
        let (pt, s) = sweep_point(p, &DriveField::new(f, b_drive), f, manifold, settings, nm, ro)?;
        points.push(pt);
        spectra.push(s);
    }
    // One fan: every point shares the tag of the first drive frequency.
    let fan = freqs[0];
    let mut tagged = points.clone();
    for pt in &mut tagged {
        pt.drive_frequency = fan;
    }
    let fits = branch_fits(&tagged, fan, |pt| pt.control);
    Ok(SweepResult {
        control_name: "drive_frequency".into(),
        control_unit: "MHz".into(),
        points,
        branch_fits: fits,
        spectra,
        manifold: Some(manifold),
    })
}

/// `√(Ω₀² + (Δω − c)²)`; parameters (Ω₀, c).
pub struct GeneralizedRabiModel;

impl Model for GeneralizedRabiModel {
    fn names(&self) -> &'static [&'static str] {
        &["rabi0", "centre"]
    }

    fn eval(&self, d: f64, p: &[f64]) -> f64 {
        generalized_rabi(p[0], d - p[1])
    }

    fn gradient(&self, d: f64, p: &[f64], out: &mut [f64]) {
        let g = generalized_rabi(p[0], d - p[1]).max(1e-300);
        out[0] = p[0] / g;
        out[1] = -(d - p[1]) / g;
    }
}

/// Per-point quantities of a detuning sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetuningPoint {
    /// Δω = ω₀ − ω, MHz.
    pub delta_omega: f64,
    /// Half the distance between the side peaks, MHz.
    pub splitting: f64,
    pub splitting_err: f64,
    /// Side-peak offsets from the drive frequency plus Ω₀, MHz.
    pub low_shift: f64,
    pub high_shift: f64,
    /// Combined 1σ uncertainty of `low_shift + high_shift`.
    pub sum_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetuningAnalysis {
    /// Configured Ω₀ = γ·B_drive, MHz.
    pub rabi0: f64,
    pub points: Vec<DetuningPoint>,
    /// Fit of the splitting against √(Ω₀² + Δω²).
    pub splitting_fit: FitResult,
}

/// Reduces a detuning sweep to the splitting branch and the side-peak shifts.
pub fn analyze_detuning(p: &NvParams, sweep: &SweepResult) -> Result<DetuningAnalysis> {
    let first = sweep
        .points
        .first()
        .ok_or_else(|| invalid("empty detuning sweep"))?;
    let rabi0 = p.rabi_frequency(first.b_drive);
    let m_i = sweep
        .manifold
        .unwrap_or_else(|| nearest_manifold(p, first.drive_frequency));
    let omega0 = p.transition_minus(m_i);
    let mut points = Vec::new();
    for pt in sweep.points.iter().filter(|pt| pt.resolved()) {
        let (lo, hi) = (&pt.peaks[0], &pt.peaks[2]);
        let w = pt.drive_frequency;
        points.push(DetuningPoint {
            delta_omega: omega0 - w,
            splitting: 0.5 * (hi.position - lo.position),
            splitting_err: 0.5 * lo.uncertainty.hypot(hi.uncertainty),
            low_shift: rabi0 + (lo.position - w),
            high_shift: rabi0 + (hi.position - w),
            sum_err: lo.uncertainty.hypot(hi.uncertainty),
        });
    }
    if points.len() < 3 {
        return Err(Error::Fit(format!(
            "only {} resolved points in the detuning sweep",
            points.len()
        )));
    }
    let x: Vec<f64> = points.iter().map(|q| q.delta_omega).collect();
    let y: Vec<f64> = points.iter().map(|q| q.splitting).collect();
    let e: Vec<f64> = points.iter().map(|q| q.splitting_err).collect();
    let splitting_fit = analysis::least_squares(&GeneralizedRabiModel, &x, &y, Some(&e), &[rabi0, 0.0])?;
    Ok(DetuningAnalysis {
        rabi0,
        points,
        splitting_fit,
    })
}

/// Where a probe addresses the dressed spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DressedProbe {
    /// At the drive frequency, in phase with the drive.
    Central,
    /// At ω + Ω, in quadrature with the drive.
    Upper,
    /// At ω − Ω, in quadrature with the drive.
    Lower,
}

/// Probe frequency, phase and effective Rabi frequency for the chosen line.
///
/// Under the rotating-wave approximation a probe at a side resonance drives
/// the dressed transition at half its bare Rabi frequency.
fn probe_setup(
    p: &NvParams,
    drive: Option<&DriveField>,
    line: DressedProbe,
    m_i: i8,
    probe_rabi: f64,
) -> (f64, f64, f64) {
    match drive {
        None => (p.transition_minus(m_i), 0.0, probe_rabi),
        Some(d) => {
            let split = generalized_rabi(p.rabi_frequency(d.b_drive), p.transition_minus(m_i) - d.omega);
            match line {
                DressedProbe::Central => (d.omega, d.phase, probe_rabi),
                DressedProbe::Upper => (d.omega + split, d.phase + PI / 2.0, probe_rabi / 2.0),
                DressedProbe::Lower => (d.omega - split, d.phase + PI / 2.0, probe_rabi / 2.0),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RabiSettings {
    pub laser: f64,
    pub readout: f64,
    /// Bare probe Rabi frequency, MHz.
    pub probe_rabi: f64,
    pub durations: Grid,
    pub dressed_probe: DressedProbe,
    /// Hyperfine manifold addressed by probe and drive.
    pub target_m_i: i8,
    /// Read out only the addressed manifold.
    pub hyperfine_selective: bool,
}

impl Default for RabiSettings {
    fn default() -> Self {
        Self {
            laser: 1.0,
            readout: 0.3,
            probe_rabi: 0.43,
            durations: Grid::new(0.0, 10.0, 0.1),
            dressed_probe: DressedProbe::Upper,
            target_m_i: 0,
            hyperfine_selective: true,
        }
    }
}

/// Drive resonant with the `m_i` line at `rabi` MHz.
pub fn resonant_drive(p: &NvParams, m_i: i8, rabi: f64) -> DriveField {
    DriveField::new(p.transition_minus(m_i), rabi / p.gamma * 1e3)
}

/// Probe-length scan at constant sequence time: the wait between probe and
/// readout absorbs the difference.
pub fn rabi_scan(
    p: &NvParams,
    drive: Option<&DriveField>,
    settings: &RabiSettings,
    nm: &NoiseModel,
    ro: &ReadoutModel,
) -> Result<DecayCurve> {
    let durations = settings.durations.points()?;
    if durations[0] < 0.0 {
        return Err(invalid("probe durations must be non-negative"));
    }
    let on = drive.is_some();
    let mut ro = ro.for_initialization(on);
    if settings.hyperfine_selective {
        ro = ro.with_nuclear_polarization(settings.target_m_i);
    }
    let (nu, phase, _) = probe_setup(p, drive, settings.dressed_probe, settings.target_m_i, settings.probe_rabi);
    let t_max = durations[durations.len() - 1];
    let t_seq = settings.laser + t_max + settings.readout;
    let mut y = Vec::new();
    let mut e = Vec::new();
    for &d in &durations {
        let seq = PulseSequence::padded(
            vec![
                PulseElement::laser(settings.laser, on),
                PulseElement::mw(nu, settings.probe_rabi, phase, d, on),
                PulseElement::readout(settings.readout, on),
            ],
            t_seq,
        )?;
        let s = run_sequence(p, drive, &seq, nm, &ro)?;
        y.push(s.mean);
        e.push(s.stderr);
    }
    DecayCurve::new(durations, y, e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EchoSettings {
    pub laser: f64,
    pub readout: f64,
    pub probe_rabi: f64,
    /// Total free evolution 2τ, μs.
    pub times: Vec<f64>,
    pub dressed_probe: DressedProbe,
    pub phase_cycle: bool,
    pub target_m_i: i8,
    pub hyperfine_selective: bool,
    /// Pad every point to the longest sequence. Off by default: under a
    /// continuous drive the padding itself decays the dressed populations.
    pub constant_t_seq: bool,
}

impl Default for EchoSettings {
    fn default() -> Self {
        Self {
            laser: 1.0,
            readout: 0.3,
            probe_rabi: 0.43,
            times: (0..=15).map(|i| i as f64).collect(),
            dressed_probe: DressedProbe::Upper,
            phase_cycle: true,
            target_m_i: 0,
            hyperfine_selective: true,
            constant_t_seq: false,
        }
    }
}

/// Geometric grid of `n` points from `first` to `last`, preceded by zero.
pub fn log_times(first: f64, last: f64, n: usize) -> Vec<f64> {
    let mut out = vec![0.0];
    if n == 1 {
        out.push(first);
    }
    if n >= 2 {
        let r = (last / first).ln() / (n - 1) as f64;
        out.extend((0..n).map(|i| first * (r * i as f64).exp()));
    }
    out
}

/// π/2 – τ – π – τ – π/2 with the final pulse phase alternated by π when
/// phase cycling is on. Pulse lengths use the effective Rabi frequency of
/// the addressed line.
pub fn echo_scan(
    p: &NvParams,
    drive: Option<&DriveField>,
    settings: &EchoSettings,
    nm: &NoiseModel,
    ro: &ReadoutModel,
) -> Result<DecayCurve> {
    if settings.times.len() < 2 {
        return Err(invalid("echo scan needs at least two times"));
    }
    if settings.times.iter().any(|t| !(*t >= 0.0)) {
        return Err(invalid("echo times must be non-negative"));
    }
    if !(settings.probe_rabi > 0.0) {
        return Err(invalid("echo probe Rabi frequency must be positive"));
    }
    let on = drive.is_some();
    let mut ro = ro.for_initialization(on);
    if settings.hyperfine_selective {
        ro = ro.with_nuclear_polarization(settings.target_m_i);
    }
    let (nu, phase, rabi_eff) = probe_setup(p, drive, settings.dressed_probe, settings.target_m_i, settings.probe_rabi);
    let t90 = 1.0 / (4.0 * rabi_eff);
    let t_max = settings.times.iter().copied().fold(0.0, f64::max);
    let t_seq = settings.laser + 4.0 * t90 + t_max + settings.readout;
    let mut times = settings.times.clone();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut y = Vec::new();
    let mut e = Vec::new();
    for &t in &times {
        let tau = t / 2.0;
        let mw = |len| PulseElement::mw(nu, settings.probe_rabi, phase, len, on);
        let elements = vec![
            PulseElement::laser(settings.laser, on),
            mw(t90),
            PulseElement::wait(tau, on),
            mw(2.0 * t90),
            PulseElement::wait(tau, on),
            mw(t90),
            PulseElement::readout(settings.readout, on),
        ];
        let mut seq = if settings.constant_t_seq {
            PulseSequence::padded(elements, t_seq)?
        } else {
            PulseSequence::new(elements)?
        };
        if settings.phase_cycle {
            seq = seq.with_phase_cycle(phase, phase + PI)?;
        }
        let s = run_sequence(p, drive, &seq, nm, &ro)?;
        y.push(s.mean);
        e.push(s.stderr);
    }
    DecayCurve::new(times, y, e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSettings {
    /// Starting bracket for σ_b, MHz.
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    /// The bracket is widened by factors of ten down/up to these limits.
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub max_iterations: usize,
    /// Stop once |T₂/target − 1| is below this.
    pub tolerance: f64,
    /// Echo times span `[0, span_factor·target]`.
    pub span_factor: f64,
    pub n_times: usize,
    pub echo: EchoSettings,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            sigma_lo: 0.03,
            sigma_hi: 1.0,
            sigma_min: 1e-4,
            sigma_max: 30.0,
            max_iterations: 20,
            tolerance: 0.01,
            span_factor: 3.0,
            n_times: 16,
            echo: EchoSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub sigma_b: f64,
    /// Undressed echo T₂ at `sigma_b`, μs.
    pub t2: f64,
    pub iterations: usize,
}

/// Maximum accepted mismatch between the calibrated and the target T₂.
pub const CALIBRATION_ACCEPT: f64 = 0.10;

/// Undressed echo T₂ for a given noise model, fitted over `[0, span]`.
pub fn undressed_t2(p: &NvParams, nm: &NoiseModel, echo: &EchoSettings, span: f64, n: usize, ro: &ReadoutModel) -> Result<f64> {
    let mut es = echo.clone();
    es.times = (0..n).map(|i| span * i as f64 / (n - 1) as f64).collect();
    let curve = echo_scan(p, None, &es, nm, ro)?;
    let fit = fit_exp_decay(&curve)?;
    let t = fit.params[0];
    if !t.is_finite() || !(t > 0.0) || fit.diagnostic.as_deref().is_some_and(|d| d.contains("non-decaying")) {
        return Ok(f64::INFINITY);
    }
    Ok(t)
}

/// Bisects σ_b (geometrically) at fixed τ_c until the undressed echo T₂ hits `target_t2`.
pub fn calibrate_noise(
    p: &NvParams,
    target_t2: f64,
    nm: &NoiseModel,
    settings: &CalibrationSettings,
    ro: &ReadoutModel,
) -> Result<Calibration> {
    if !(target_t2 > 0.0) {
        return Err(invalid(format!("target T2 must be positive, got {target_t2}")));
    }
    if !target_t2.is_finite() {
        return Err(Error::Calibration(
            "an infinite T2 needs σ_b = 0 and cannot be bracketed".into(),
        ));
    }
    if settings.n_times < 6 {
        return Err(invalid("calibration needs at least 6 echo times"));
    }
    let span = settings.span_factor * target_t2;
    let t2_at = |sigma: f64| {
        let m = NoiseModel { sigma_b: sigma, ..*nm };
        undressed_t2(p, &m, &settings.echo, span, settings.n_times, ro)
    };
    let (mut lo, mut hi) = (settings.sigma_lo, settings.sigma_hi);
    // T₂ falls as σ_b grows: need T₂(lo) ≥ target ≥ T₂(hi).
    let mut t_lo = t2_at(lo)?;
    while t_lo < target_t2 {
        lo /= 10.0;
        if lo < settings.sigma_min {
            return Err(Error::Calibration(format!(
                "T2 = {target_t2} μs not reached even at σ_b = {} MHz",
                settings.sigma_min
            )));
        }
        t_lo = t2_at(lo)?;
    }
    let mut t_hi = t2_at(hi)?;
    while t_hi > target_t2 {
        hi *= 10.0;
        if hi > settings.sigma_max {
            return Err(Error::Calibration(format!(
                "T2 = {target_t2} μs not reached even at σ_b = {} MHz",
                settings.sigma_max
            )));
        }
        t_hi = t2_at(hi)?;
    }
    let mut best = if (t_lo / target_t2 - 1.0).abs() < (t_hi / target_t2 - 1.0).abs() {
        (lo, t_lo)
    } else {
        (hi, t_hi)
    };
    let mut iterations = 0;
    while iterations < settings.max_iterations && (best.1 / target_t2 - 1.0).abs() > settings.tolerance {
        iterations += 1;
        let mid = (lo * hi).sqrt();
        let t = t2_at(mid)?;
        if (t / target_t2 - 1.0).abs() < (best.1 / target_t2 - 1.0).abs() {
            best = (mid, t);
        }
        if t > target_t2 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (best.1 / target_t2 - 1.0).abs() > CALIBRATION_ACCEPT {
        return Err(Error::Calibration(format!(
            "closest T2 = {:.4} μs at σ_b = {:.5} MHz misses the {target_t2} μs target",
            best.1, best.0
        )));
    }
    Ok(Calibration {
        sigma_b: best.0,
        t2: best.1,
        iterations,
    })
}
