//! Experiment execution and output emission.

use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nvdress_core::analysis::{find_peaks, fit_exp_decay, fit_mollow, fit_sinusoid, guess_mollow, FitResult};
use nvdress_core::dynamics::NoiseModel;
use nvdress_core::experiments::{
    analyze_detuning, ats_odmr, calibrate_noise, classify_peaks, drive_detuning_sweep,
    drive_power_sweep, echo_scan, pulsed_odmr, rabi_scan, Branch, DecayCurve, Grid, Spectrum,
    SweepResult,
};
use nvdress_core::sensing::{adder_simulate, protocol_sensitivity, MAX_ADDER_QUBITS};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{CliError, Result};
use crate::output::{write_atomic, RunManifest, Table};
use crate::plot::{figure_from_table, render_svg, PlotKind, PlotSpec};

pub const OUT_DIR_ENV: &str = "NVDRESS_OUT_DIR";
const DEFAULT_OUT_BASE: &str = "nvdress-out";

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_traj: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.noise.seed = s;
        }
        if let Some(n) = self.n_traj {
            cfg.noise.n_traj = n;
        }
    }
}

/// `--out-dir`, then the config's `out_dir`, then `$NVDRESS_OUT_DIR/<config stem>`,
/// then `nvdress-out/<config stem>`.
pub fn resolve_out_dir(
    flag: Option<&Path>,
    cfg: &ExperimentConfig,
    config_path: &Path,
    env: Option<&OsStr>,
) -> PathBuf {
    if let Some(d) = flag {
        return d.to_path_buf();
    }
    if let Some(d) = &cfg.out_dir {
        return d.clone();
    }
    let base = env.filter(|v| !v.is_empty()).map_or_else(|| PathBuf::from(DEFAULT_OUT_BASE), PathBuf::from);
    let stem = config_path.file_stem().unwrap_or(OsStr::new("run"));
    base.join(stem)
}

struct Emitter<'a> {
    dir: &'a Path,
    comments: Vec<String>,
    outputs: Vec<String>,
}

impl Emitter<'_> {
    fn file(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn table(&mut self, stem: &str, t: &Table, plot: Option<(PlotKind, &str)>) -> Result<()> {
        self.file(&format!("{stem}.csv"), &t.to_csv(&self.comments))?;
        if let Some((kind, title)) = plot {
            let svg = render_svg(&figure_from_table(t, kind, title)?);
            self.file(&format!("{stem}.svg"), svg.as_bytes())?;
        }
        Ok(())
    }

    fn spectrum(&mut self, stem: &str, s: &Spectrum, title: &str) -> Result<()> {
        let t = Table::from_columns(
            &[("probe_frequency", "MHz"), ("contrast", "1"), ("stderr", "1")],
            &[s.x(), s.y(), s.y_err()],
        );
        self.table(stem, &t, Some((PlotKind::Spectrum, title)))
    }

    fn curve(&mut self, stem: &str, c: &DecayCurve, x_name: &str, title: &str) -> Result<()> {
        let t = Table::from_columns(
            &[(x_name, "us"), ("signal", "1"), ("stderr", "1")],
            &[c.t(), c.y(), c.y_err()],
        );
        self.table(stem, &t, Some((PlotKind::Decay, title)))
    }

    fn sweep(&mut self, r: &SweepResult, detuning: bool, title: &str) -> Result<()> {
        let (first, second) = if detuning {
            (("drive_frequency", "MHz"), ("b_drive", "uT"))
        } else {
            (("b_drive", "uT"), ("drive_frequency", "MHz"))
        };
        let mut t = Table::new(&[
            first,
            second,
            ("low", "MHz"),
            ("low_err", "MHz"),
            ("central", "MHz"),
            ("central_err", "MHz"),
            ("high", "MHz"),
            ("high_err", "MHz"),
        ]);
        for pt in &r.points {
            let mut row = if detuning {
                vec![pt.drive_frequency, pt.b_drive]
            } else {
                vec![pt.b_drive, pt.drive_frequency]
            };
            for b in [Branch::Low, Branch::Central, Branch::High] {
                match pt.branch(b) {
                    Some(p) => row.extend([p.position, p.uncertainty]),
                    None => row.extend([f64::NAN, f64::NAN]),
                }
            }
            t.push(row);
        }
        self.table("sweep", &t, Some((PlotKind::Sweep, title)))?;

        let mut spectra = Table::new(&[
            ("drive_frequency", "MHz"),
            ("b_drive", "uT"),
            ("probe_frequency", "MHz"),
            ("contrast", "1"),
            ("stderr", "1"),
        ]);
        for (pt, s) in r.points.iter().zip(&r.spectra) {
            for i in 0..s.len() {
                spectra.push(vec![pt.drive_frequency, pt.b_drive, s.x()[i], s.y()[i], s.y_err()[i]]);
            }
        }
        self.table("spectra", &spectra, None)
    }

    fn json(&mut self, name: &str, v: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(v).expect("JSON value serializes");
        text.push('\n');
        self.file(name, text.as_bytes())
    }
}

fn fit_json(fit: &std::result::Result<FitResult, nvdress_core::Error>) -> Value {
    match fit {
        Ok(f) => json!(f),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

/// Runs one experiment, writing data, plots, `summary.json` and `manifest.json`
/// into `out_dir`. Data files are written before a failing fit is reported.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let hash = cfg.hash();
    let mut em = Emitter {
        dir: out_dir,
        comments: vec![
            format!("nvdress {}", env!("CARGO_PKG_VERSION")),
            format!("experiment: {}", cfg.experiment.name()),
            format!("config_sha256: {hash}"),
            format!("seed: {}", cfg.noise.seed),
            format!("n_traj: {}", cfg.noise.n_traj),
        ],
        outputs: Vec::new(),
    };
    let summary = execute(cfg, &mut em);
    let summary = match summary {
        Ok(v) => v,
        Err((partial, e)) => {
            if let Some(v) = partial {
                em.json("summary.json", &v)?;
            }
            return Err(e);
        }
    };
    em.json("summary.json", &summary)?;
    let manifest = RunManifest {
        experiment: cfg.experiment.name().to_string(),
        config_sha256: hash,
        seed: cfg.noise.seed,
        n_traj: cfg.noise.n_traj,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        outputs: em.outputs.clone(),
    };
    em.json("manifest.json", &json!(manifest))?;
    Ok(manifest)
}

type Outcome = std::result::Result<Value, (Option<Value>, CliError)>;

fn plain<T>(r: std::result::Result<T, impl Into<CliError>>) -> std::result::Result<T, (Option<Value>, CliError)> {
    r.map_err(|e| (None, e.into()))
}

fn need<T>(o: Option<T>, table: &str) -> std::result::Result<T, (Option<Value>, CliError)> {
    o.ok_or_else(|| (None, CliError::Config(format!("missing [{table}] table"))))
}

/// Returns the summary, or on failure whatever summary exists plus the error.
fn execute(cfg: &ExperimentConfig, em: &mut Emitter) -> Outcome {
    let p = &cfg.nv;
    let nm = cfg.noise;
    let ro = cfg.readout;
    match cfg.experiment {
        ExperimentKind::PulsedOdmr => {
            let grid = plain(need(cfg.scan, "scan")?.resolve(p))?;
            let s = plain(pulsed_odmr(p, &cfg.timing, &grid, &nm, &ro))?;
            plain(em.spectrum("spectrum", &s, "Pulsed ODMR"))?;
            let depth = s.y().iter().fold(0.0f64, |a, v| a.max(-v));
            let dips = find_peaks(&s, -1.0, 0.25 * depth, 0.15);
            let spacings: Vec<f64> = dips.windows(2).map(|w| w[1].position - w[0].position).collect();
            Ok(json!({ "flag": s.flag(), "dips": dips, "spacings": spacings }))
        }
        ExperimentKind::AtsOdmr => {
            let drive = plain(need(cfg.drive_field, "drive_field")?.resolve(p))?;
            let grid = plain(need(cfg.scan, "scan")?.resolve(p))?;
            let s = plain(ats_odmr(p, &drive, &cfg.timing, &grid, &nm, &ro))?;
            plain(em.spectrum("spectrum", &s, "Dressed-state spectrum"))?;
            let peaks = classify_peaks(&s, drive.omega, &cfg.sweep);
            // Pulse-limited lines are sinc-like rather than Lorentzian; with the tiny
            // phase-averaging errors in the wings a weighted fit is dominated by
            // that mismatch.
            let flat = s.unweighted();
            let fit = guess_mollow(&flat).and_then(|g| fit_mollow(&flat, &g));
            let summary = json!({
                "drive": drive,
                "configured_rabi": p.rabi_frequency(drive.b_drive),
                "peaks": peaks,
                "triplet_fit": fit_json(&fit),
                "splitting": fit.as_ref().ok().and_then(|f| f.value("rabi")),
            });
            match fit {
                Ok(_) => Ok(summary),
                Err(e) => Err((Some(summary), e.into())),
            }
        }
        ExperimentKind::DrivePowerSweep => {
            let spec = need(cfg.power_sweep.clone(), "power_sweep")?;
            let b = plain(spec.b_drive.points())?;
            let r = plain(drive_power_sweep(p, &spec.drive_frequencies, &b, &cfg.sweep, &nm, &ro))?;
            plain(em.sweep(&r, false, "Drive power sweep"))?;
            Ok(json!({
                "gamma": p.gamma,
                "resolved_points": r.points.iter().filter(|q| q.resolved()).count(),
                "points": r.points.len(),
                "branch_fits": r.branch_fits,
            }))
        }
        ExperimentKind::DriveDetuningSweep => {
            let spec = need(cfg.detuning_sweep, "detuning_sweep")?;
            let w0 = p.transition_minus(spec.m_i);
            let o = spec.offsets;
            let grid = Grid::new(w0 + o.start, w0 + o.stop, o.step);
            let r = plain(drive_detuning_sweep(p, spec.b_drive, &grid, &cfg.sweep, &nm, &ro))?;
            plain(em.sweep(&r, true, "Drive detuning sweep"))?;
            let a = match analyze_detuning(p, &r) {
                Ok(a) => a,
                Err(e) => {
                    let partial = json!({ "error": e.to_string() });
                    return Err((Some(partial), e.into()));
                }
            };
            let mut t = Table::new(&[
                ("delta_omega", "MHz"),
                ("splitting", "MHz"),
                ("splitting_err", "MHz"),
                ("low_shift", "MHz"),
                ("high_shift", "MHz"),
                ("sum_err", "MHz"),
            ]);
            for q in &a.points {
                t.push(vec![q.delta_omega, q.splitting, q.splitting_err, q.low_shift, q.high_shift, q.sum_err]);
            }
            plain(em.table("detuning", &t, None))?;
            Ok(json!({
                "rabi0": a.rabi0,
                "fitted_rabi0": a.splitting_fit.params[0],
                "splitting_fit": a.splitting_fit,
                "points": a.points,
            }))
        }
        ExperimentKind::RabiScan => {
            let settings = cfg.rabi.clone().unwrap_or_default();
            let undressed = plain(rabi_scan(p, None, &settings, &nm, &ro))?;
            plain(em.curve("rabi_undressed", &undressed, "duration", "Undressed Rabi oscillation"))?;
            let fit_u = fit_sinusoid(&undressed);
            let mut fit_d = None;
            if let Some(spec) = cfg.drive_field {
                let drive = plain(spec.resolve(p))?;
                let dressed = plain(rabi_scan(p, Some(&drive), &settings, &nm, &ro))?;
                plain(em.curve("rabi_dressed", &dressed, "duration", "Dressed Rabi oscillation"))?;
                fit_d = Some(fit_sinusoid(&dressed));
            }
            let freq = |f: &std::result::Result<FitResult, _>| f.as_ref().ok().map(|f| f.params[0]);
            let ratio = match (freq(&fit_u), fit_d.as_ref().and_then(freq)) {
                (Some(u), Some(d)) => Some(d / u),
                _ => None,
            };
            let summary = json!({
                "undressed_fit": fit_json(&fit_u),
                "dressed_fit": fit_d.as_ref().map(fit_json),
                "ratio": ratio,
            });
            for f in std::iter::once(&fit_u).chain(fit_d.as_ref()) {
                if let Err(e) = f {
                    return Err((Some(summary), e.clone().into()));
                }
            }
            Ok(summary)
        }
        ExperimentKind::EchoScan => {
            let spec = cfg.echo.clone().unwrap_or_default();
            let mut nm = nm;
            let mut calibration = None;
            if let Some(c) = &cfg.calibration {
                let cal = plain(calibrate_noise(p, c.target_t2, &nm, &c.settings, &ro))?;
                nm.sigma_b = cal.sigma_b;
                calibration = Some(cal);
            }
            let mut su = spec.settings.clone();
            if let Some(t) = spec.undressed_times {
                su.times = plain(t.points())?;
            }
            let undressed = plain(echo_scan(p, None, &su, &nm, &ro))?;
            plain(em.curve("echo_undressed", &undressed, "free_evolution", "Undressed Hahn echo"))?;
            let fit_u = fit_exp_decay(&undressed);
            let mut fit_d = None;
            if let Some(d) = cfg.drive_field {
                let drive = plain(d.resolve(p))?;
                let mut sd = spec.settings.clone();
                if let Some(t) = spec.dressed_times {
                    sd.times = plain(t.points())?;
                }
                let dressed = plain(echo_scan(p, Some(&drive), &sd, &nm, &ro))?;
                plain(em.curve("echo_dressed", &dressed, "free_evolution", "Dressed Hahn echo"))?;
                fit_d = Some(fit_exp_decay(&dressed));
            }
            let t2 = |f: &std::result::Result<FitResult, _>| f.as_ref().ok().map(|f| f.params[0]);
            let ratio = match (t2(&fit_u), fit_d.as_ref().and_then(t2)) {
                (Some(u), Some(d)) => Some(d / u),
                _ => None,
            };
            let summary = json!({
                "sigma_b": nm.sigma_b,
                "calibration": calibration,
                "undressed_fit": fit_json(&fit_u),
                "dressed_fit": fit_d.as_ref().map(fit_json),
                "t2": t2(&fit_u),
                "t2_rho": fit_d.as_ref().and_then(t2),
                "ratio": ratio,
            });
            for f in std::iter::once(&fit_u).chain(fit_d.as_ref()) {
                if let Err(e) = f {
                    return Err((Some(summary), e.clone().into()));
                }
            }
            Ok(summary)
        }
        ExperimentKind::CalibrateNoise => {
            let c = need(cfg.calibration.clone(), "calibration")?;
            let cal = plain(calibrate_noise(p, c.target_t2, &nm, &c.settings, &ro))?;
            let calibrated = NoiseModel {
                sigma_b: cal.sigma_b,
                ..nm
            };
            let mut es = c.settings.echo.clone();
            let n = c.settings.n_times.max(2);
            let span = c.settings.span_factor * c.target_t2;
            es.times = (0..n).map(|i| span * i as f64 / (n - 1) as f64).collect();
            let curve = plain(echo_scan(p, None, &es, &calibrated, &ro))?;
            plain(em.curve("calibration_echo", &curve, "free_evolution", "Calibrated undressed echo"))?;
            Ok(json!({ "target_t2": c.target_t2, "calibration": cal, "tau_c": nm.tau_c }))
        }
        ExperimentKind::SensingReport => {
            let sc = need(cfg.sensing, "sensing")?;
            let ac = need(cfg.ac_field, "ac_field")?;
            let report = plain(protocol_sensitivity(&sc, &ac, p.gamma))?;
            if sc.m as usize <= MAX_ADDER_QUBITS {
                let n = 129;
                let phi: Vec<f64> = (0..n).map(|i| 2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).collect();
                let p0 = plain(phi.iter().map(|&f| adder_simulate(sc.m as usize, f)).collect::<nvdress_core::Result<Vec<f64>>>())?;
                let t = Table::from_columns(&[("phase", "rad"), ("p0", "1")], &[&phi, &p0]);
                plain(em.table("adder", &t, Some((PlotKind::Fringe, "Quantum adder ancilla fringe"))))?;
            }
            Ok(json!({
                "report": report,
                "enhancement_rounded": report.enhancement.round(),
                "gamma": p.gamma,
            }))
        }
    }
}

/// `plot <data> <plotspec>`: renders a CSV written by `run` as SVG.
pub fn plot_file(data: &Path, spec_path: &Path) -> Result<PathBuf> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| CliError::io(spec_path, e))?;
    let spec: PlotSpec = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", spec_path.display())))?;
    let bytes = std::fs::read(data).map_err(|e| CliError::io(data, e))?;
    let (table, _) = Table::from_csv(&bytes)?;
    let svg = render_svg(&figure_from_table(&table, spec.kind, &spec.title)?);
    let out = spec.output.unwrap_or_else(|| data.with_extension("svg"));
    write_atomic(&out, svg.as_bytes())?;
    Ok(out)
}
