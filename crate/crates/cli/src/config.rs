//! Experiment configuration files.
//!
//! A config is a TOML document naming one experiment plus optional tables
//! overriding the physical model. Every table rejects unknown keys.
//!
//! ```toml
//! experiment = "ats_odmr"
//!
//! [noise]
//! seed = 42
//! n_traj = 2000
//!
//! [drive_field]
//! m_i = 0
//! b_drive = 33.0
//!
//! [scan]
//! m_i = 0
//! half_width = 1.6
//! step = 0.01
//! ```

use std::path::{Path, PathBuf};

use nvdress_core::dynamics::{NoiseModel, ReadoutModel};
use nvdress_core::experiments::{
    log_times, CalibrationSettings, EchoSettings, Grid, RabiSettings, SpectralTiming, SweepSettings,
};
use nvdress_core::nv_model::{DriveField, NvParams};
use nvdress_core::sensing::{ACField, SensingConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PulsedOdmr,
    AtsOdmr,
    DrivePowerSweep,
    DriveDetuningSweep,
    RabiScan,
    EchoScan,
    CalibrateNoise,
    SensingReport,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::PulsedOdmr,
        ExperimentKind::AtsOdmr,
        ExperimentKind::DrivePowerSweep,
        ExperimentKind::DriveDetuningSweep,
        ExperimentKind::RabiScan,
        ExperimentKind::EchoScan,
        ExperimentKind::CalibrateNoise,
        ExperimentKind::SensingReport,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::PulsedOdmr => "pulsed_odmr",
            ExperimentKind::AtsOdmr => "ats_odmr",
            ExperimentKind::DrivePowerSweep => "drive_power_sweep",
            ExperimentKind::DriveDetuningSweep => "drive_detuning_sweep",
            ExperimentKind::RabiScan => "rabi_scan",
            ExperimentKind::EchoScan => "echo_scan",
            ExperimentKind::CalibrateNoise => "calibrate_noise",
            ExperimentKind::SensingReport => "sensing_report",
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            ExperimentKind::PulsedOdmr => "pulsed ODMR spectrum of the hyperfine triplet [scan]",
            ExperimentKind::AtsOdmr => "dressed (Autler-Townes) spectrum with triplet fit [drive_field, scan]",
            ExperimentKind::DrivePowerSweep => "peak positions versus drive amplitude [power_sweep]",
            ExperimentKind::DriveDetuningSweep => "peak positions versus drive frequency [detuning_sweep]",
            ExperimentKind::RabiScan => "undressed and dressed Rabi oscillations [rabi, drive_field]",
            ExperimentKind::EchoScan => "undressed and dressed Hahn echo decay [echo, drive_field, calibration]",
            ExperimentKind::CalibrateNoise => "bath amplitude reproducing a target echo T2 [calibration]",
            ExperimentKind::SensingReport => "AC sensing phase, adder fringe and enhancement [sensing, ac_field]",
        }
    }
}

/// Drive field with either an absolute frequency or a hyperfine line plus
/// offset, and either a field amplitude or a Rabi frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveSpec {
    /// MHz
    pub frequency: Option<f64>,
    pub m_i: Option<i8>,
    /// ω − ω₀ relative to the `m_i` line, MHz.
    #[serde(default)]
    pub offset: f64,
    /// μT
    pub b_drive: Option<f64>,
    /// MHz
    pub rabi: Option<f64>,
    #[serde(default)]
    pub phase: f64,
}

impl DriveSpec {
    pub fn resolve(&self, p: &NvParams) -> Result<DriveField> {
        let omega = match (self.frequency, self.m_i) {
            (Some(f), None) if self.offset == 0.0 => f,
            (None, Some(m)) => line(p, m)? + self.offset,
            _ => {
                return Err(CliError::Config(
                    "drive_field needs exactly one of `frequency` or `m_i` (with optional `offset`)".into(),
                ))
            }
        };
        let b_drive = match (self.b_drive, self.rabi) {
            (Some(b), None) => b,
            (None, Some(r)) => r / p.gamma * 1e3,
            _ => {
                return Err(CliError::Config(
                    "drive_field needs exactly one of `b_drive` or `rabi`".into(),
                ))
            }
        };
        let mut d = DriveField::new(omega, b_drive);
        d.phase = self.phase;
        Ok(d)
    }
}

/// Probe-frequency scan, absolute or centred on a hyperfine line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    pub start: Option<f64>,
    pub stop: Option<f64>,
    pub centre: Option<f64>,
    pub m_i: Option<i8>,
    pub half_width: Option<f64>,
    pub step: f64,
}

impl ScanSpec {
    pub fn resolve(&self, p: &NvParams) -> Result<Grid> {
        match (self.start, self.stop, self.centre, self.m_i, self.half_width) {
            (Some(a), Some(b), None, None, None) => Ok(Grid::new(a, b, self.step)),
            (None, None, Some(c), None, Some(h)) => Ok(Grid::around(c, h, self.step)),
            (None, None, None, Some(m), Some(h)) => Ok(Grid::around(line(p, m)?, h, self.step)),
            _ => Err(CliError::Config(
                "scan needs `start` and `stop`, or `half_width` with one of `centre` or `m_i`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSweepSpec {
    /// One fan per drive frequency, MHz.
    pub drive_frequencies: Vec<f64>,
    /// μT
    pub b_drive: Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetuningSweepSpec {
    #[serde(default)]
    pub m_i: i8,
    /// μT
    pub b_drive: f64,
    /// ω − ω₀, MHz.
    pub offsets: Grid,
}

/// Geometric spacing `0, first, …, last` with `n` non-zero points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogSpacing {
    pub first: f64,
    pub last: f64,
    pub n: usize,
}

impl LogSpacing {
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.first > 0.0) || !(self.last > self.first) || self.n < 2 {
            return Err(CliError::Config(format!(
                "log spacing needs 0 < first < last and n >= 2, got {self:?}"
            )));
        }
        Ok(log_times(self.first, self.last, self.n))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EchoSpec {
    #[serde(default)]
    pub settings: EchoSettings,
    /// Times for the undressed scan; `settings.times` when absent.
    pub undressed_times: Option<LogSpacing>,
    /// Times for the dressed scan; `settings.times` when absent.
    pub dressed_times: Option<LogSpacing>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    /// Undressed echo T₂ to reproduce, μs.
    pub target_t2: f64,
    #[serde(default)]
    pub settings: CalibrationSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Not part of the hashed config.
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub nv: NvParams,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub readout: ReadoutModel,
    #[serde(default)]
    pub timing: SpectralTiming,
    pub drive_field: Option<DriveSpec>,
    pub scan: Option<ScanSpec>,
    #[serde(default)]
    pub sweep: SweepSettings,
    pub power_sweep: Option<PowerSweepSpec>,
    pub detuning_sweep: Option<DetuningSweepSpec>,
    pub rabi: Option<RabiSettings>,
    pub echo: Option<EchoSpec>,
    pub calibration: Option<CalibrationSpec>,
    pub sensing: Option<SensingConfig>,
    pub ac_field: Option<ACField>,
}

impl ExperimentConfig {
    /// Parses TOML text; `origin` names the source in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        cfg.check_sections()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Rejects missing required tables and tables the experiment would ignore.
    fn check_sections(&self) -> Result<()> {
        use ExperimentKind as K;
        let present = [
            ("drive_field", self.drive_field.is_some()),
            ("scan", self.scan.is_some()),
            ("power_sweep", self.power_sweep.is_some()),
            ("detuning_sweep", self.detuning_sweep.is_some()),
            ("rabi", self.rabi.is_some()),
            ("echo", self.echo.is_some()),
            ("calibration", self.calibration.is_some()),
            ("sensing", self.sensing.is_some()),
            ("ac_field", self.ac_field.is_some()),
        ];
        let (required, optional): (&[&str], &[&str]) = match self.experiment {
            K::PulsedOdmr => (&["scan"], &[]),
            K::AtsOdmr => (&["drive_field", "scan"], &[]),
            K::DrivePowerSweep => (&["power_sweep"], &[]),
            K::DriveDetuningSweep => (&["detuning_sweep"], &[]),
            K::RabiScan => (&[], &["rabi", "drive_field"]),
            K::EchoScan => (&[], &["echo", "drive_field", "calibration"]),
            K::CalibrateNoise => (&["calibration"], &[]),
            K::SensingReport => (&["sensing", "ac_field"], &[]),
        };
        for (name, is_set) in present {
            if required.contains(&name) && !is_set {
                return Err(CliError::Config(format!(
                    "experiment `{}` needs a [{name}] table",
                    self.experiment.name()
                )));
            }
            if is_set && !required.contains(&name) && !optional.contains(&name) {
                return Err(CliError::Config(format!(
                    "[{name}] is not used by experiment `{}`",
                    self.experiment.name()
                )));
            }
        }
        Ok(())
    }

    /// Canonical bytes: compact JSON of the parsed config with every default filled in.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("config serializes")
    }

    /// SHA-256 of [`Self::canonical_bytes`], lowercase hex.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.canonical_bytes()))
    }
}

fn line(p: &NvParams, m_i: i8) -> Result<f64> {
    if !(-1..=1).contains(&m_i) {
        return Err(CliError::Config(format!("m_i must be -1, 0 or 1, got {m_i}")));
    }
    Ok(p.transition_minus(m_i))
}

#[cfg(test)]
mod tests {
    use super::*;

    const ATS: &str = r#"
experiment = "ats_odmr"
[drive_field]
m_i = 0
b_drive = 33.0
[scan]
m_i = 0
half_width = 1.5
step = 0.05
"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let c = ExperimentConfig::parse(ATS, "ats").unwrap();
        assert_eq!(c.experiment, ExperimentKind::AtsOdmr);
        assert_eq!(c.nv, NvParams::default());
        let d = c.drive_field.unwrap().resolve(&c.nv).unwrap();
        assert!((d.omega - 2837.05).abs() < 1e-9);
        let g = c.scan.unwrap().resolve(&c.nv).unwrap();
        assert!((g.start - 2835.55).abs() < 1e-9);
    }

    #[test]
    fn unknown_key_is_named_with_position() {
        let text = ATS.replace("[drive_field]", "[drvie_field]");
        let e = ExperimentConfig::parse(&text, "bad.toml").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("drvie_field"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
        assert_eq!(e.exit_code(), 2);

        let text = ATS.replace("b_drive = 33.0", "b_drive = 33.0\nbdrive = 1.0");
        assert!(ExperimentConfig::parse(&text, "x").unwrap_err().to_string().contains("bdrive"));
    }

    #[test]
    fn missing_and_stray_sections_rejected() {
        let text = ATS.replace("[scan]\nm_i = 0\nhalf_width = 1.5\nstep = 0.05\n", "");
        assert!(ExperimentConfig::parse(&text, "x").unwrap_err().to_string().contains("[scan]"));
        let text = format!("{ATS}\n[sensing]\nm = 2\nt2_rho = 1.5\nt2 = 4.2\nn = 2\n");
        assert!(ExperimentConfig::parse(&text, "x").unwrap_err().to_string().contains("[sensing]"));
    }

    #[test]
    fn drive_spec_requires_one_of_each() {
        let p = NvParams::default();
        let both = DriveSpec {
            frequency: Some(2837.0),
            m_i: Some(0),
            offset: 0.0,
            b_drive: Some(1.0),
            rabi: None,
            phase: 0.0,
        };
        assert!(both.resolve(&p).is_err());
        let by_rabi = DriveSpec {
            frequency: None,
            m_i: Some(1),
            offset: 0.5,
            b_drive: None,
            rabi: Some(1.2),
            phase: 0.0,
        };
        let d = by_rabi.resolve(&p).unwrap();
        assert!((p.rabi_frequency(d.b_drive) - 1.2).abs() < 1e-12);
        assert!((d.omega - (p.transition_minus(1) + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn hash_tracks_every_field_but_not_out_dir() {
        let a = ExperimentConfig::parse(ATS, "x").unwrap();
        let mut b = a.clone();
        b.out_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.noise.seed += 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.readout.contrast = 0.31;
        assert_ne!(a.hash(), c.hash());
        let mut d = a.clone();
        d.sweep.half_width += 1e-12;
        assert_ne!(a.hash(), d.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
