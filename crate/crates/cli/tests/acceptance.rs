//! Acceptance gate: ten criteria, one PASS/FAIL line each.
//!
//! Criteria 1-6 run the bundled configs end to end through the library entry
//! point. Criteria 2, 3 and 5 are known to fail in this model; any other
//! failure makes the run exit non-zero.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nvdress_cli::{run, ExperimentConfig, Overrides};
use nvdress_core::analysis::{fit_exp_decay, fit_mollow, fit_sinusoid, FitResult};
use nvdress_core::dynamics::{ou_trajectory, NoiseModel, ReadoutModel};
use nvdress_core::experiments::{rabi_scan, DecayCurve, RabiSettings, Spectrum};
use nvdress_core::nv_model::{mollow_spectrum, MollowParams, NvParams};
use nvdress_core::sensing::{adder_simulate, enhancement_ratio, SensingConfig};
use nvdress_core::spin_core::{spin_operators, Operator};
use num_complex::Complex64 as C64;
use serde_json::Value;

const EXPECTED_FAILURES: [u32; 3] = [2, 3, 5];

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(format!("{name}.toml"))).expect("bundled config parses")
}

/// Runs a bundled config; returns the summary and the wall-clock time.
fn run_config(name: &str, out: &Path) -> (Result<Value, String>, f64) {
    let cfg = load(name);
    let dir = out.join(name);
    let t0 = Instant::now();
    let r = run(&cfg, &dir);
    let secs = t0.elapsed().as_secs_f64();
    let summary = std::fs::read(dir.join("summary.json"))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    match (r, summary) {
        (Ok(_), Some(s)) => (Ok(s), secs),
        (Err(e), _) => (Err(e.to_string()), secs),
        (Ok(_), None) => (Err("summary.json missing".into()), secs),
    }
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn criterion_1(out: &Path) -> Verdict {
    let expected = NvParams::default().rabi_frequency(33.0);
    let (s, secs) = run_config("fig3c", out);
    let (pass, detail) = match s {
        Ok(s) => {
            let omega = num(&s["splitting"]);
            let dev = omega / expected - 1.0;
            (
                dev.abs() <= 0.03 && secs <= 120.0,
                format!(
                    "drive 2834.75 MHz: fitted Omega = {omega:.5} MHz vs gamma*33 uT = {expected:.5} MHz ({:+.2}%), {secs:.0} s at 2000 trajectories",
                    100.0 * dev
                ),
            )
        }
        Err(e) => (false, e),
    };
    Verdict { id: 1, name: "Mollow triplet structure", pass, detail }
}

fn criterion_2(out: &Path) -> Verdict {
    let gamma = NvParams::default().gamma * 1e-3;
    let (s, secs) = run_config("fig3b", out);
    let s = match s {
        Ok(s) => s,
        Err(e) => return Verdict { id: 2, name: "Gyromagnetic slopes", pass: false, detail: e },
    };
    let mut pass = secs <= 600.0;
    let mut parts = Vec::new();
    let fits = s["branch_fits"].as_array().cloned().unwrap_or_default();
    let mut fans: Vec<f64> = fits.iter().map(|f| num(&f["drive_frequency"])).collect();
    fans.dedup();
    for fan in fans {
        let get = |b: &str| {
            fits.iter()
                .find(|f| num(&f["drive_frequency"]) == fan && f["branch"] == b)
                .map(|f| (num(&f["fit"]["params"][0]), num(&f["fit"]["uncertainties"][0])))
        };
        match (get("low"), get("central"), get("high")) {
            (Some(lo), Some(c), Some(hi)) => {
                let ok = (hi.0 / gamma - 1.0).abs() <= 0.02
                    && (lo.0 / gamma + 1.0).abs() <= 0.02
                    && c.0.abs() <= 2.0 * c.1;
                pass &= ok;
                parts.push(format!(
                    "{fan:.2} MHz: {:+.5}/{:+.1e}±{:.1e}/{:+.5}",
                    lo.0, c.0, c.1, hi.0
                ));
            }
            _ => {
                pass = false;
                parts.push(format!("{fan:.2} MHz: missing branch fit"));
            }
        }
    }
    if parts.is_empty() {
        pass = false;
    }
    let detail = format!(
        "slopes low/central/high in MHz/uT vs ±{gamma:.5}: {}; {secs:.0} s",
        parts.join("; ")
    );
    Verdict { id: 2, name: "Gyromagnetic slopes", pass, detail }
}

fn criterion_3(out: &Path) -> Verdict {
    let (s, secs) = run_config("fig4", out);
    let s = match s {
        Ok(s) => s,
        Err(e) => return Verdict { id: 3, name: "Detuning relations", pass: false, detail: e },
    };
    let rabi0 = num(&s["rabi0"]);
    let fitted = num(&s["fitted_rabi0"]);
    let fit_ok = (fitted / rabi0 - 1.0).abs() <= 0.03;
    let points = s["points"].as_array().cloned().unwrap_or_default();
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    for p in &points {
        let sum = num(&p["low_shift"]) + num(&p["high_shift"]);
        let z = (sum - 2.0 * rabi0).abs() / num(&p["sum_err"]);
        worst = worst.max(z);
        if !(z <= 2.0) {
            bad += 1;
        }
    }
    let pass = fit_ok && bad == 0 && !points.is_empty();
    let detail = format!(
        "Omega0 fit {fitted:.5} vs {rabi0:.5} MHz ({:+.2}%); low+high = 2*Omega0 within 2 sigma at {}/{} resolved points (worst {worst:.1} sigma); {secs:.0} s",
        100.0 * (fitted / rabi0 - 1.0),
        points.len() - bad,
        points.len()
    );
    Verdict { id: 3, name: "Detuning relations", pass, detail }
}

fn criterion_4(out: &Path) -> Verdict {
    let (s, _) = run_config("fig3a", out);
    let (pass, detail) = match s {
        Ok(s) => {
            let spacings: Vec<f64> = s["spacings"].as_array().cloned().unwrap_or_default().iter().map(num).collect();
            let pass = spacings.len() == 2 && spacings.iter().all(|d| (d - 2.1).abs() <= 0.05);
            (pass, format!("{} dips, spacings {spacings:.4?} MHz", spacings.len() + 1))
        }
        Err(e) => (false, e),
    };
    Verdict { id: 4, name: "Hyperfine triplet", pass, detail }
}

fn criterion_5(out: &Path) -> Verdict {
    let (s, _) = run_config("fig5", out);
    let (pass, detail) = match s {
        Ok(s) => {
            let ratio = num(&s["ratio"]);
            let u = num(&s["undressed_fit"]["params"][0]);
            let d = num(&s["dressed_fit"]["params"][0]);
            (
                (0.98..=1.02).contains(&ratio),
                format!("undressed {u:.4} MHz, dressed {d:.4} MHz, ratio {ratio:.3}"),
            )
        }
        Err(e) => (false, e),
    };
    Verdict { id: 5, name: "Rabi equality", pass, detail }
}

fn criterion_6(out: &Path) -> Verdict {
    let (s, secs) = run_config("fig6", out);
    let (pass, detail) = match s {
        Ok(s) => {
            let t2 = num(&s["t2"]);
            let t2_rho = num(&s["t2_rho"]);
            let ratio = num(&s["ratio"]);
            let sigma = num(&s["sigma_b"]);
            (
                (t2 / 4.2 - 1.0).abs() <= 0.15 && ratio > 50.0 && secs <= 1200.0,
                format!(
                    "sigma_b = {sigma:.4} MHz, T2 = {t2:.3} us, T2rho = {t2_rho:.1} us, ratio {ratio:.1}; {secs:.0} s"
                ),
            )
        }
        Err(e) => (false, e),
    };
    Verdict { id: 6, name: "Coherence extension", pass, detail }
}

fn criterion_7() -> Verdict {
    let cfg = SensingConfig { m: 2, t2_rho: 1.5, t2: 4.2, n: 2 };
    let r = enhancement_ratio(&cfg).unwrap_or(f64::NAN);
    Verdict {
        id: 7,
        name: "Sensitivity arithmetic",
        pass: (r - 26.7).abs() <= 0.1 && r.round() == 27.0,
        detail: format!("enhancement {r:.4}, rounds to {}", r.round()),
    }
}

fn criterion_8() -> Verdict {
    let mut worst: f64 = 0.0;
    for m in 1..=3usize {
        for k in 0..16 {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / 16.0;
            let p0 = adder_simulate(m, phi).unwrap_or(f64::NAN);
            let oracle = 0.5 * (1.0 + (m as f64 * phi).cos());
            worst = worst.max((p0 - oracle).abs());
        }
    }
    Verdict {
        id: 8,
        name: "Adder correctness",
        pass: worst <= 1e-10,
        detail: format!("max |P0 - (1+cos M phi)/2| = {worst:.2e} over M = 1..3, 16 phases"),
    }
}

fn random_hermitian(seed: u64, dim: usize) -> Operator {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    let mut e = vec![C64::new(0.0, 0.0); dim * dim];
    for i in 0..dim {
        e[i * dim + i] = C64::new(3.0 * next(), 0.0);
        for j in i + 1..dim {
            let z = C64::new(3.0 * next(), 3.0 * next());
            e[i * dim + j] = z;
            e[j * dim + i] = z.conj();
        }
    }
    Operator::from_rows(dim, &e).expect("square")
}

fn criterion_9() -> Verdict {
    let mut checks: Vec<(String, bool)> = Vec::new();

    // spin-core invariants
    let mut unitarity: f64 = 0.0;
    for seed in 0..50 {
        let h = random_hermitian(seed, 3 + (seed % 2) as usize * 6);
        let u = h.propagator(0.37 + seed as f64 * 0.1).expect("Hermitian");
        unitarity = unitarity.max(u.unitarity_error());
    }
    checks.push((format!("unitarity {unitarity:.1e}"), unitarity <= 1e-10));
    let (sx, sy, sz) = spin_operators(1.0).expect("spin 1");
    let comm = sx.commutator(&sy).expect("same dimension");
    let err = (&comm - &sz.scale_complex(C64::new(0.0, 1.0))).max_abs();
    checks.push((format!("[Sx,Sy]-iSz {err:.1e}"), err <= 1e-12));

    // analytic Rabi oracle
    let c = rabi_scan(
        &NvParams::default(),
        None,
        &RabiSettings::default(),
        &NoiseModel::default(),
        &ReadoutModel::default(),
    );
    let rabi = c.ok().and_then(|c| fit_sinusoid(&c).ok()).map_or(f64::NAN, |f| f.params[0]);
    let dev = (rabi / 0.43 - 1.0).abs();
    checks.push((format!("Rabi oracle {:.3}%", 100.0 * dev), dev <= 1e-3));

    // fit round trips on exact synthetic data
    let t: Vec<f64> = (0..80).map(|i| i as f64 * 0.125).collect();
    let sine: Vec<f64> = t.iter().map(|x| 0.1 * (2.0 * std::f64::consts::PI * 0.43 * x + 0.3).cos() - 0.05).collect();
    let decay: Vec<f64> = t.iter().map(|x| 0.2 * (-x / 4.2).exp() + 0.01).collect();
    let zeros = vec![0.0; t.len()];
    let close = |f: nvdress_core::Result<FitResult>, truth: f64| {
        f.is_ok_and(|f| (f.params[0] / truth - 1.0).abs() <= 1e-6)
    };
    let sine_ok = close(fit_sinusoid(&DecayCurve::new(t.clone(), sine, zeros.clone()).unwrap()), 0.43);
    let decay_ok = close(fit_exp_decay(&DecayCurve::new(t.clone(), decay, zeros.clone()).unwrap()), 4.2);
    let truth = MollowParams::on_resonance(2837.05, 0.925, 0.15);
    let x: Vec<f64> = (0..321).map(|i| 2835.45 + i as f64 * 0.01).collect();
    let y: Vec<f64> = x.iter().map(|v| 0.01 * mollow_spectrum(*v, &truth)).collect();
    let s = Spectrum::new(x.clone(), y, vec![0.0; x.len()]).unwrap();
    let start = MollowParams::on_resonance(2837.07, 0.9, 0.2);
    let mollow_ok = fit_mollow(&s, &start).is_ok_and(|f| {
        (f.params[1] / 0.925 - 1.0).abs() <= 1e-6 && (f.params[2] / 0.15 - 1.0).abs() <= 1e-6
    });
    checks.push(("fit round trips".into(), sine_ok && decay_ok && mollow_ok));

    // OU autocorrelation at lag tau_c
    let nm = NoiseModel {
        sigma_b: 0.2,
        tau_c: 10.0,
        n_traj: 10_000,
        seed: 9,
        ..NoiseModel::default()
    };
    let (mut lag, mut n) = (0.0, 0usize);
    for k in 0..nm.n_traj as u64 {
        let x = ou_trajectory(&nm, nm.tau_c, 20.0 * nm.tau_c, k).expect("valid noise model");
        lag += x.windows(2).map(|w| w[0] * w[1]).sum::<f64>();
        n += x.len() - 1;
    }
    let ac = lag / n as f64 / (0.04 * (-1.0f64).exp());
    checks.push((format!("OU autocorrelation {:.3} of e^-1 sigma^2", ac), (ac - 1.0).abs() <= 0.05));

    Verdict {
        id: 9,
        name: "Numerics suite",
        pass: checks.iter().all(|c| c.1),
        detail: checks
            .iter()
            .map(|(d, ok)| format!("{d} {}", if *ok { "ok" } else { "BAD" }))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

fn criterion_10(out: &Path) -> Verdict {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(configs_dir())
        .map(|d| d.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    entries.retain(|p| p.extension().is_some_and(|e| e == "toml"));
    entries.sort();
    let mut pass = !entries.is_empty();
    let mut compared = 0;
    let mut notes = Vec::new();
    for path in &entries {
        let stem = path.file_stem().unwrap().to_string_lossy().to_string();
        let mut cfg = ExperimentConfig::load(path).expect("bundled config parses");
        Overrides { seed: Some(42), n_traj: Some(16) }.apply(&mut cfg);
        let dirs = [out.join("det").join(format!("{stem}-a")), out.join("det").join(format!("{stem}-b"))];
        for d in &dirs {
            if let Err(e) = run(&cfg, d) {
                notes.push(format!("{stem}: {e}"));
                pass = false;
            }
        }
        let mut csvs: Vec<PathBuf> = std::fs::read_dir(&dirs[0])
            .map(|d| d.filter_map(|e| e.ok().map(|e| e.path())).collect())
            .unwrap_or_default();
        csvs.retain(|p| p.extension().is_some_and(|e| e == "csv"));
        if csvs.is_empty() {
            pass = false;
            notes.push(format!("{stem}: no CSV output"));
        }
        for a in csvs {
            let b = dirs[1].join(a.file_name().unwrap());
            compared += 1;
            if std::fs::read(&a).ok() != std::fs::read(&b).ok() {
                pass = false;
                notes.push(format!("{} differs", a.display()));
            }
        }
    }
    let mut detail = format!("{} configs, {compared} CSV files byte-identical across two runs (seed 42, 16 trajectories)", entries.len());
    if !notes.is_empty() {
        detail = format!("{detail}; {}", notes.join("; "));
    }
    Verdict { id: 10, name: "Determinism", pass, detail }
}

fn main() {
    let out = tempfile::tempdir().expect("temporary directory");
    let t0 = Instant::now();
    let criteria: Vec<Box<dyn Fn() -> Verdict>> = vec![
        Box::new(|| criterion_1(out.path())),
        Box::new(|| criterion_2(out.path())),
        Box::new(|| criterion_3(out.path())),
        Box::new(|| criterion_4(out.path())),
        Box::new(|| criterion_5(out.path())),
        Box::new(|| criterion_6(out.path())),
        Box::new(criterion_7),
        Box::new(criterion_8),
        Box::new(criterion_9),
        Box::new(|| criterion_10(out.path())),
    ];
    let mut unexpected = Vec::new();
    for c in criteria {
        let v = c();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag}  {}: {}", v.id, v.name, v.detail);
        if !v.pass && !EXPECTED_FAILURES.contains(&v.id) {
            unexpected.push(v.id);
        }
    }
    println!(
        "acceptance finished in {:.0} s; known model failures: {EXPECTED_FAILURES:?}",
        t0.elapsed().as_secs_f64()
    );
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
