//! NV ground-state model: spin-1 electron coupled to the ¹⁴N nucleus, the
//! two-level rotating frame of a near-resonant drive, the Mollow-triplet line
//! shape and the dressed-state ladder.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spin_core::{pauli, spin_operators, tensor, Operator};

/// Bohr magneton over Planck constant, MHz/mT.
pub const BOHR_MAGNETON_MHZ_PER_MT: f64 = 9.274_010_078_3e-24 / 6.626_070_15e-34 * 1e-9;
/// NV electron g-factor.
pub const NV_G_FACTOR: f64 = 2.0028;

pub const DEFAULT_ZERO_FIELD_SPLITTING: f64 = 2870.0;
pub const DEFAULT_GAMMA: f64 = 28.03;
pub const DEFAULT_HYPERFINE: f64 = 2.1;
/// Where the default static field puts the m_I = 0 line of the |0⟩↔|−1⟩ branch.
pub const DEFAULT_CENTRE_LINE: f64 = 2837.05;

/// Nuclear projections in the order used for every per-manifold array.
pub const NUCLEAR_PROJECTIONS: [i8; 3] = [1, 0, -1];

/// Static parameters of the NV ground state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NvParams {
    /// Zero-field splitting, MHz.
    pub d: f64,
    /// Electron gyromagnetic ratio, MHz/mT.
    pub gamma: f64,
    /// Secular ¹⁴N hyperfine constant, MHz.
    pub a: f64,
    /// Static field along the NV axis, mT.
    pub b0: f64,
}

impl Default for NvParams {
    fn default() -> Self {
        Self {
            d: DEFAULT_ZERO_FIELD_SPLITTING,
            gamma: DEFAULT_GAMMA,
            a: DEFAULT_HYPERFINE,
            b0: (DEFAULT_ZERO_FIELD_SPLITTING - DEFAULT_CENTRE_LINE) / DEFAULT_GAMMA,
        }
    }
}

impl NvParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(invalid(format!("D must be positive, got {}", self.d)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.a >= 0.0 && self.a.is_finite()) {
            return Err(invalid(format!("A must be >= 0, got {}", self.a)));
        }
        if !(self.b0 >= 0.0 && self.b0.is_finite()) {
            return Err(invalid(format!("B0 must be >= 0, got {}", self.b0)));
        }
        Ok(())
    }

    /// |0, m_I⟩ → |−1, m_I⟩ transition frequency, MHz.
    pub fn transition_minus(&self, m_i: i8) -> f64 {
        self.d - self.gamma * self.b0 - self.a * f64::from(m_i)
    }

    /// |0, m_I⟩ → |+1, m_I⟩ transition frequency, MHz.
    pub fn transition_plus(&self, m_i: i8) -> f64 {
        self.d + self.gamma * self.b0 + self.a * f64::from(m_i)
    }

    /// Rabi frequency (MHz) produced by a drive amplitude in μT.
    pub fn rabi_frequency(&self, b_drive_ut: f64) -> f64 {
        self.gamma * b_drive_ut * 1e-3
    }
}

/// `g_e·μ_B/h` in MHz/mT.
pub fn gyromagnetic_ratio_from_constants() -> f64 {
    NV_G_FACTOR * BOHR_MAGNETON_MHZ_PER_MT
}

/// `H = D·Sz² + γ·B0·Sz + A·Sz·Iz` in the basis |m_s⟩⊗|m_I⟩, both ordered +1, 0, −1.
///
/// The Zeeman term carries a plus sign so that the |0⟩→|−1⟩ branch moves
/// down in frequency with increasing field.
pub fn nv_hamiltonian(p: &NvParams) -> Operator {
    let (_, _, sz) = spin_operators(1.0).expect("spin 1");
    let id3 = Operator::identity(3);
    let sz2 = &sz * &sz;
    let electron = &sz2.scale(p.d) + &sz.scale(p.gamma * p.b0);
    let h_e = tensor(&electron, &id3);
    let h_hf = tensor(&sz, &sz).scale(p.a);
    &h_e + &h_hf
}

/// Index of |m_s, m_I⟩ in the 9-dimensional basis of [`nv_hamiltonian`].
pub fn basis_index(m_s: i8, m_i: i8) -> usize {
    let pos = |m: i8| (1 - m) as usize;
    3 * pos(m_s) + pos(m_i)
}

/// Continuous microwave drive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveField {
    /// Drive frequency, MHz.
    pub omega: f64,
    /// Drive amplitude, μT.
    pub b_drive: f64,
    /// Drive phase, rad.
    #[serde(default)]
    pub phase: f64,
}

impl DriveField {
    pub fn new(omega: f64, b_drive: f64) -> Self {
        Self {
            omega,
            b_drive,
            phase: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(invalid(format!("drive frequency must be positive, got {}", self.omega)));
        }
        if !(self.b_drive >= 0.0 && self.b_drive.is_finite()) {
            return Err(invalid(format!("drive amplitude must be >= 0, got {}", self.b_drive)));
        }
        if !self.phase.is_finite() {
            return Err(invalid("drive phase must be finite"));
        }
        Ok(())
    }
}

/// Checks that a drive at `omega` with Rabi frequency `rabi` addresses the
/// |0⟩↔|−1⟩ branch and stays at least `10·rabi` away from every |0⟩↔|+1⟩ line.
pub fn check_rwa(p: &NvParams, omega: f64, rabi: f64) -> Result<()> {
    let dist = |f: fn(&NvParams, i8) -> f64| {
        NUCLEAR_PROJECTIONS
            .iter()
            .map(|&m| (omega - f(p, m)).abs())
            .fold(f64::INFINITY, f64::min)
    };
    let to_plus = dist(NvParams::transition_plus);
    let to_minus = dist(NvParams::transition_minus);
    let required = 10.0 * rabi;
    if to_plus <= to_minus || to_plus < required {
        return Err(Error::RwaViolation {
            drive: omega,
            distance: to_plus,
            required,
        });
    }
    Ok(())
}

/// Two-level rotating-frame Hamiltonian of the |0, m_I⟩↔|−1, m_I⟩ pair in the
/// basis (|−1⟩, |0⟩): `Δω·σz/2 + Ω·(cos φ σx + sin φ σy)/2`, `Δω = ω₀ − ω`.
pub fn rotating_frame(p: &NvParams, d: &DriveField, target_m_i: i8) -> Result<Operator> {
    p.validate()?;
    d.validate()?;
    if !NUCLEAR_PROJECTIONS.contains(&target_m_i) {
        return Err(invalid(format!("m_I must be -1, 0 or 1, got {target_m_i}")));
    }
    let rabi = p.rabi_frequency(d.b_drive);
    check_rwa(p, d.omega, rabi)?;
    let detuning = p.transition_minus(target_m_i) - d.omega;
    let (sx, sy, sz) = pauli();
    let drive = &sx.scale(0.5 * rabi * d.phase.cos()) + &sy.scale(0.5 * rabi * d.phase.sin());
    Ok(&sz.scale(0.5 * detuning) + &drive)
}

/// Parameters of the Mollow-triplet line shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollowParams {
    /// Drive frequency ω, MHz.
    pub omega: f64,
    /// Rabi frequency Ω setting the side-peak offsets, MHz.
    pub rabi: f64,
    /// Inverse dephasing time κ, MHz.
    pub kappa: f64,
    /// Detuning Δω = ω₀ − ω, MHz.
    pub delta_omega: f64,
    /// On-resonance Rabi frequency Ω₀, MHz.
    pub rabi0: f64,
}

impl MollowParams {
    pub fn on_resonance(omega: f64, rabi: f64, kappa: f64) -> Self {
        Self {
            omega,
            rabi,
            kappa,
            delta_omega: 0.0,
            rabi0: rabi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(invalid(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.rabi >= 0.0) || !(self.rabi0 >= 0.0) {
            return Err(invalid("Rabi frequencies must be >= 0"));
        }
        Ok(())
    }
}

/// Mollow triplet at probe frequency `nu`: a central Lorentzian of weight κ/4
/// and half-width κ/2 at ω, and two side Lorentzians of weight 3κ/16 and
/// half-width 3κ/4 at ω ± Ω.
pub fn mollow_spectrum(nu: f64, m: &MollowParams) -> f64 {
    let k = m.kappa;
    let x = nu - m.omega;
    let central = 0.25 * k / (x * x + 0.25 * k * k);
    let side = |y: f64| (3.0 / 16.0) * k / (y * y + (9.0 / 16.0) * k * k);
    central + side(x - m.rabi) + side(x + m.rabi)
}

/// `√(Ω₀² + Δω²)`.
pub fn generalized_rabi(rabi0: f64, delta_omega: f64) -> f64 {
    rabi0.hypot(delta_omega)
}

/// Side-branch pair `(Ω₀ − √(Ω₀²+Δω²), Ω₀ + √(Ω₀²+Δω²))`.
pub fn side_peak_shifts(rabi0: f64, delta_omega: f64) -> (f64, f64) {
    let g = generalized_rabi(rabi0, delta_omega);
    (rabi0 - g, rabi0 + g)
}

/// One rung `n` of the dressed ladder with ħ = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DressedLevel {
    pub n: u64,
    pub e_plus: f64,
    pub e_minus: f64,
    pub c1: f64,
    pub c2: f64,
}

/// `E±(n) = (n − ½)·ω ± Ω/2` with mixing `c1 = cos(θ/2)`, `c2 = sin(θ/2)`,
/// `tan θ = Ω₀/Δω`, θ ∈ (0, π). `rabi` is the generalized Rabi frequency, so
/// `Ω₀ = √(Ω² − Δω²)`.
pub fn dressed_ladder(n: i64, omega: f64, rabi: f64, delta_omega: f64) -> Result<DressedLevel> {
    if n < 1 {
        return Err(invalid(format!("ladder index n must be >= 1, got {n}")));
    }
    if !(rabi >= 0.0) {
        return Err(invalid(format!("Rabi frequency must be >= 0, got {rabi}")));
    }
    let excess = rabi * rabi - delta_omega * delta_omega;
    if excess < -1e-12 * rabi.max(1.0).powi(2) {
        return Err(invalid(format!(
            "generalized Rabi frequency {rabi} is smaller than |detuning| {}",
            delta_omega.abs()
        )));
    }
    let rabi0 = excess.max(0.0).sqrt();
    let theta = rabi0.atan2(delta_omega);
    let base = (n as f64 - 0.5) * omega;
    Ok(DressedLevel {
        n: n as u64,
        e_plus: base + 0.5 * rabi,
        e_minus: base - 0.5 * rabi,
        c1: (0.5 * theta).cos(),
        c2: (0.5 * theta).sin(),
    })
}
