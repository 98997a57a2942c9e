use nvdress_core::analysis::{find_peaks, fit_exp_decay, fit_sinusoid};
use nvdress_core::dynamics::{NoiseModel, ReadoutModel};
use nvdress_core::experiments::*;
use nvdress_core::nv_model::{DriveField, NvParams};

fn phase_averaged(n_traj: usize) -> NoiseModel {
    NoiseModel {
        n_traj,
        seed: 11,
        ..NoiseModel::default()
    }
}

/// |0⟩→|−1⟩ probability after a square pulse of Rabi frequency `rabi`,
/// detuning `d` and length `t`.
fn rabi_formula(rabi: f64, d: f64, t: f64) -> f64 {
    let g = rabi.hypot(d);
    (rabi / g).powi(2) * (std::f64::consts::PI * g * t).sin().powi(2)
}

/// Full width at half maximum of the π-pulse line, by bisection.
fn pi_pulse_fwhm(rabi: f64) -> f64 {
    let t = 1.0 / (2.0 * rabi);
    let (mut lo, mut hi) = (0.0, 2.0 * rabi);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rabi_formula(rabi, mid, t) > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo + hi
}

/// Width of the region where `y` is at or below half the minimum.
fn measured_fwhm(x: &[f64], y: &[f64]) -> f64 {
    let (imin, ymin) = y
        .iter()
        .enumerate()
        .fold((0, f64::MAX), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
    let half = 0.5 * ymin;
    let cross = |i: usize, j: usize| x[i] + (half - y[i]) * (x[j] - x[i]) / (y[j] - y[i]);
    let mut l = imin;
    while y[l - 1] <= half {
        l -= 1;
    }
    let mut r = imin;
    while y[r + 1] <= half {
        r += 1;
    }
    cross(r, r + 1) - cross(l - 1, l)
}

#[test]
fn odmr_shows_three_hyperfine_dips() {
    let p = NvParams::default();
    let s = pulsed_odmr(
        &p,
        &SpectralTiming::default(),
        &Grid::new(2833.0, 2841.0, 0.01),
        &NoiseModel::default(),
        &ReadoutModel::default(),
    )
    .unwrap();
    assert!(s.flag().is_none());
    let dips = find_peaks(&s, -1.0, 0.02, 0.15);
    assert_eq!(dips.len(), 3, "{dips:?}");
    for (d, m) in dips.iter().zip([1, 0, -1]) {
        assert!((d.position - p.transition_minus(m)).abs() < 1e-3, "{d:?}");
    }
    assert!((dips[1].position - dips[0].position - 2.1).abs() < 2e-3);
    assert!((dips[2].position - dips[1].position - 2.1).abs() < 2e-3);
}

#[test]
fn odmr_without_hyperfine_has_one_dip_of_pulse_width() {
    let p = NvParams { a: 0.0, ..NvParams::default() };
    let timing = SpectralTiming::default();
    let w0 = p.transition_minus(0);
    let s = pulsed_odmr(
        &p,
        &timing,
        &Grid::around(w0, 0.5, 0.002),
        &NoiseModel::default(),
        &ReadoutModel::default(),
    )
    .unwrap();
    let dips = find_peaks(&s, -1.0, 0.1, 0.02);
    assert_eq!(dips.len(), 1, "{dips:?}");
    assert!((dips[0].position - w0).abs() < 1e-4);

    // Dip depth: contrast × transfer, all three manifolds share the line.
    let depth = s.y().iter().copied().fold(f64::MAX, f64::min);
    assert!((depth + 0.3).abs() < 1e-3, "{depth}");

    let oracle = pi_pulse_fwhm(timing.probe_rabi());
    let fwhm = measured_fwhm(s.x(), s.y());
    assert!((fwhm / oracle - 1.0).abs() < 0.01, "{fwhm} vs {oracle}");
    assert!(oracle > 0.14 && oracle < 0.18);
}

#[test]
fn zero_drive_leaves_a_single_inverted_line() {
    let p = NvParams::default();
    let w0 = p.transition_minus(0);
    let ro = ReadoutModel::default().with_nuclear_polarization(0);
    let s = ats_odmr(
        &p,
        &DriveField::new(w0, 0.0),
        &SpectralTiming::default(),
        &Grid::around(w0, 1.2, 0.02),
        &phase_averaged(32),
        &ro,
    )
    .unwrap();
    let peaks = classify_peaks(&s, w0, &SweepSettings::default());
    assert_eq!(peaks.len(), 1, "{peaks:?}");
    assert!((peaks[0].position - w0).abs() < 5e-3);
    assert!(peaks[0].height > 0.0);
}

#[test]
fn ats_side_peaks_sit_at_the_drive_rabi_frequency() {
    let p = NvParams::default();
    let w0 = p.transition_minus(0);
    let ro = ReadoutModel::default().with_nuclear_polarization(0);
    let s = ats_odmr(
        &p,
        &DriveField::new(w0, 33.0),
        &SpectralTiming::default(),
        &Grid::around(w0, 1.6, 0.02),
        &phase_averaged(128),
        &ro,
    )
    .unwrap();
    let peaks = classify_peaks(&s, w0, &SweepSettings::default());
    assert_eq!(peaks.len(), 3, "{peaks:?}");
    let omega = p.rabi_frequency(33.0);
    assert!((omega - 0.92499).abs() < 1e-4);
    assert!((peaks[0].position - (w0 - omega)).abs() < 0.01 * omega, "{peaks:?}");
    assert!((peaks[2].position - (w0 + omega)).abs() < 0.01 * omega, "{peaks:?}");
    assert!(peaks.iter().all(|q| q.height > 0.0));
}

#[test]
fn noiseless_rabi_matches_the_probe_frequency() {
    let p = NvParams::default();
    let rs = RabiSettings::default();
    let c = rabi_scan(&p, None, &rs, &NoiseModel::default(), &ReadoutModel::default()).unwrap();
    let fit = fit_sinusoid(&c).unwrap();
    assert!(fit.converged, "{fit:?}");
    assert!((fit.params[0] / rs.probe_rabi - 1.0).abs() < 1e-3, "{:?}", fit.params);
}

#[test]
fn dressed_rabi_frequencies_follow_the_addressed_line() {
    let p = NvParams::default();
    let nm = NoiseModel::default();
    let ro = ReadoutModel::default();
    let freq = |rabi, probe| {
        let drive = resonant_drive(&p, 0, rabi);
        let rs = RabiSettings {
            dressed_probe: probe,
            durations: Grid::new(0.0, 12.0, 0.1),
            ..RabiSettings::default()
        };
        let c = rabi_scan(&p, Some(&drive), &rs, &nm, &ro).unwrap();
        fit_sinusoid(&c).unwrap().params[0]
    };
    assert!((freq(1.2, DressedProbe::Central) / 0.43 - 1.0).abs() < 1e-3);

    // A side-resonance probe drives the dressed pair at half its Rabi frequency,
    // up to an off-resonant correction of order (probe / drive)².
    let half = 0.215;
    let weak = 1.0 - freq(1.2, DressedProbe::Upper) / half;
    let strong = 1.0 - freq(2.4, DressedProbe::Upper) / half;
    assert!(weak > 0.0 && weak < 0.07, "{weak}");
    assert!(strong > 0.0 && strong < 0.02, "{strong}");
    assert!(weak / strong > 3.0 && weak / strong < 5.0, "{weak} {strong}");
    let lower = 1.0 - freq(1.2, DressedProbe::Lower) / half;
    assert!((lower - weak).abs() < 1e-3);
}

#[test]
fn zero_probe_gives_flat_rabi_signal() {
    let p = NvParams::default();
    let rs = RabiSettings {
        probe_rabi: 0.0,
        ..RabiSettings::default()
    };
    let c = rabi_scan(&p, None, &rs, &NoiseModel::default(), &ReadoutModel::default()).unwrap();
    assert!(c.y().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn noiseless_echo_does_not_decay() {
    let p = NvParams::default();
    let nm = NoiseModel::default();
    let ro = ReadoutModel::default();
    let es = EchoSettings {
        times: vec![0.0, 5.0, 20.0, 80.0],
        ..EchoSettings::default()
    };
    for drive in [None, Some(resonant_drive(&p, 0, 1.2))] {
        let c = echo_scan(&p, drive.as_ref(), &es, &nm, &ro).unwrap();
        let y0 = c.y()[0];
        assert!(y0.abs() > 0.01);
        for v in c.y() {
            assert!(v / y0 >= 0.99, "{:?}", c.y());
        }
    }
}

#[test]
fn undressed_echo_decays_faster_with_more_noise() {
    let p = NvParams::default();
    let es = EchoSettings {
        times: (0..10).map(|i| i as f64 * 1.5).collect(),
        ..EchoSettings::default()
    };
    let t2 = |sigma| {
        let nm = NoiseModel {
            sigma_b: sigma,
            n_traj: 200,
            seed: 5,
            ..NoiseModel::default()
        };
        let c = echo_scan(&p, None, &es, &nm, &ReadoutModel::default()).unwrap();
        fit_exp_decay(&c).unwrap().params[0]
    };
    let (a, b, c) = (t2(0.1), t2(0.2), t2(0.4));
    assert!(a > b && b > c, "{a} {b} {c}");
}

#[test]
fn calibration_is_self_consistent_and_monotone() {
    let p = NvParams::default();
    let nm = NoiseModel {
        n_traj: 200,
        seed: 3,
        ..NoiseModel::default()
    };
    let settings = CalibrationSettings::default();
    let ro = ReadoutModel::default();
    let a = calibrate_noise(&p, 4.2, &nm, &settings, &ro).unwrap();
    assert!((a.t2 / 4.2 - 1.0).abs() <= CALIBRATION_ACCEPT);
    assert!(a.iterations <= 20);

    // Fed back with a fresh seed the echo reproduces the target.
    let check = NoiseModel {
        sigma_b: a.sigma_b,
        seed: 99,
        n_traj: 400,
        ..nm
    };
    let t2 = undressed_t2(&p, &check, &settings.echo, 12.6, 16, &ro).unwrap();
    assert!((t2 / 4.2 - 1.0).abs() < 0.15, "{t2}");

    let b = calibrate_noise(&p, 8.4, &nm, &settings, &ro).unwrap();
    assert!(b.sigma_b < a.sigma_b);
}

#[test]
fn power_sweep_fans_out_at_the_gyromagnetic_ratio() {
    let p = NvParams::default();
    let w0 = p.transition_minus(0);
    let r = drive_power_sweep(
        &p,
        &[w0],
        &[20.0, 40.0, 60.0],
        &SweepSettings::default(),
        &phase_averaged(48),
        &ReadoutModel::default(),
    )
    .unwrap();
    assert_eq!(r.points.len(), 3);
    assert!(r.points.iter().all(|pt| pt.resolved()));
    let slope = |b| {
        r.branch_fits
            .iter()
            .find(|f| f.branch == b)
            .map(|f| f.fit.params[0])
            .unwrap()
    };
    let gamma_per_ut = p.gamma * 1e-3;
    assert!((slope(Branch::High) / gamma_per_ut - 1.0).abs() < 0.02);
    assert!((slope(Branch::Low) / gamma_per_ut + 1.0).abs() < 0.02);
    assert!(slope(Branch::Central).abs() < 1e-3 * gamma_per_ut);
}

#[test]
fn detuning_sweep_recovers_the_on_resonance_rabi_frequency() {
    let p = NvParams::default();
    let w0 = p.transition_minus(0);
    let settings = SweepSettings {
        half_width: 2.0,
        ..SweepSettings::default()
    };
    let r = drive_detuning_sweep(
        &p,
        33.0,
        &Grid::around(w0, 0.8, 0.4),
        &settings,
        &phase_averaged(48),
        &ReadoutModel::default(),
    )
    .unwrap();
    assert_eq!(r.manifold, Some(0));
    let a = analyze_detuning(&p, &r).unwrap();
    assert_eq!(a.points.len(), 5);
    let fitted = a.splitting_fit.params[0];
    assert!((fitted / a.rabi0 - 1.0).abs() < 0.03, "{fitted} vs {}", a.rabi0);
    let mid = a.points.iter().find(|q| q.delta_omega.abs() < 1e-9).unwrap();
    assert!((mid.splitting / a.rabi0 - 1.0).abs() < 0.01);
}
