//! Dense complex linear algebra for Hilbert spaces of dimension ≤ 16.
//!
//! Hamiltonians are stored in ordinary frequency units (MHz); the factor 2π
//! lives in the propagator, `U = exp(-i·2π·H·t)` with `t` in μs.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{invalid, Error, Result};

pub type C64 = Complex64;

/// Relative Hermiticity tolerance for Hamiltonians.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Max-norm tolerance on `U†U − I` for generated propagators.
pub const UNITARITY_TOL: f64 = 1e-10;
/// Norm tolerance for state vectors.
pub const NORM_TOL: f64 = 1e-10;

const MAX_DIM: usize = 16;

/// Square complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    m: DMatrix<C64>,
}

impl Operator {
    /// Builds an operator from row-major entries.
    pub fn from_rows(dim: usize, entries: &[C64]) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("operator dimension must be positive"));
        }
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: entries.len(),
            });
        }
        Ok(Self {
            m: DMatrix::from_row_slice(dim, dim, entries),
        })
    }

    pub fn from_matrix(m: DMatrix<C64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(invalid(format!(
                "operator must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(invalid("operator dimension must be positive"));
        }
        Ok(Self { m })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            m: DMatrix::identity(dim, dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            m: DMatrix::zeros(dim, dim),
        }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = C64::new(*v, 0.0);
        }
        Self { m }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn entry(&self, row: usize, col: usize) -> C64 {
        self.m[(row, col)]
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.m
    }

    pub fn adjoint(&self) -> Self {
        Self {
            m: self.m.adjoint(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            m: self.m.map(|z| z * s),
        }
    }

    pub fn scale_complex(&self, s: C64) -> Self {
        Self {
            m: self.m.map(|z| z * s),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn trace(&self) -> C64 {
        self.m.trace()
    }

    pub fn commutator(&self, other: &Operator) -> Result<Operator> {
        check_dims(self.dim(), other.dim())?;
        Ok(Self {
            m: &self.m * &other.m - &other.m * &self.m,
        })
    }

    /// Largest entry of `|A − A†|`, relative to `max(1, max|A|)`.
    pub fn hermiticity_error(&self) -> f64 {
        let scale = self.max_abs().max(1.0);
        (&self.m - self.m.adjoint())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
            / scale
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermiticity_error() <= HERMITIAN_TOL
    }

    /// Largest entry of `|U†U − I|`.
    pub fn unitarity_error(&self) -> f64 {
        let n = self.dim();
        (self.m.adjoint() * &self.m - DMatrix::<C64>::identity(n, n))
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Real eigenvalues (ascending) of a Hermitian operator.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        self.require_hermitian()?;
        let eig = self.m.clone().symmetric_eigen();
        let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        Ok(v)
    }

    /// `exp(−i·2π·H·t)` through the Hermitian eigendecomposition of `H`.
    pub fn propagator(&self, t: f64) -> Result<Operator> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(invalid(format!("duration must be finite and >= 0, got {t}")));
        }
        self.require_hermitian()?;
        if t == 0.0 {
            return Ok(Operator::identity(self.dim()));
        }
        // Symmetrize so round-off in the input cannot leak into the eigenvectors.
        let h = (&self.m + self.m.adjoint()) * C64::new(0.5, 0.0);
        let eig = h.symmetric_eigen();
        let v = &eig.eigenvectors;
        let phases = DMatrix::from_diagonal(&DVector::from_iterator(
            self.dim(),
            eig.eigenvalues
                .iter()
                .map(|e| C64::from_polar(1.0, -2.0 * PI * e * t)),
        ));
        Ok(Self {
            m: v * phases * v.adjoint(),
        })
    }

    fn require_hermitian(&self) -> Result<()> {
        let deviation = self.hermiticity_error();
        if deviation > HERMITIAN_TOL {
            return Err(Error::NotHermitian { deviation });
        }
        Ok(())
    }

    pub fn apply(&self, psi: &StateVector) -> Result<StateVector> {
        check_dims(self.dim(), psi.dim())?;
        Ok(StateVector {
            amps: &self.m * &psi.amps,
        })
    }
}

impl Add for &Operator {
    type Output = Operator;
    fn add(self, rhs: &Operator) -> Operator {
        assert_eq!(self.dim(), rhs.dim(), "operator dimension mismatch");
        Operator {
            m: &self.m + &rhs.m,
        }
    }
}

impl Sub for &Operator {
    type Output = Operator;
    fn sub(self, rhs: &Operator) -> Operator {
        assert_eq!(self.dim(), rhs.dim(), "operator dimension mismatch");
        Operator {
            m: &self.m - &rhs.m,
        }
    }
}

impl Mul for &Operator {
    type Output = Operator;
    fn mul(self, rhs: &Operator) -> Operator {
        assert_eq!(self.dim(), rhs.dim(), "operator dimension mismatch");
        Operator {
            m: &self.m * &rhs.m,
        }
    }
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Spin-`s` angular momentum matrices in the Zeeman basis `m = s, s−1, …, −s`.
///
/// Only `s = 1/2` and `s = 1` are needed for the NV electron and ¹⁴N nucleus.
pub fn spin_operators(s: f64) -> Result<(Operator, Operator, Operator)> {
    let twice = 2.0 * s;
    if !(s == 0.5 || s == 1.0) {
        return Err(invalid(format!("unsupported spin quantum number {s}")));
    }
    let dim = twice as usize + 1;
    let m: Vec<f64> = (0..dim).map(|k| s - k as f64).collect();

    let mut sp = DMatrix::<C64>::zeros(dim, dim);
    // ⟨m+1|S+|m⟩ = sqrt(s(s+1) − m(m+1))
    for k in 1..dim {
        let mk = m[k];
        sp[(k - 1, k)] = C64::new((s * (s + 1.0) - mk * (mk + 1.0)).sqrt(), 0.0);
    }
    let sm = sp.adjoint();
    let sx = (&sp + &sm) * C64::new(0.5, 0.0);
    let sy = (&sp - &sm) * C64::new(0.0, -0.5);
    let sz = DMatrix::from_diagonal(&DVector::from_iterator(
        dim,
        m.iter().map(|v| C64::new(*v, 0.0)),
    ));
    Ok((Operator { m: sx }, Operator { m: sy }, Operator { m: sz }))
}

/// Kronecker product `a ⊗ b`.
pub fn tensor(a: &Operator, b: &Operator) -> Operator {
    Operator {
        m: a.m.kronecker(&b.m),
    }
}

/// Pauli matrices `(σx, σy, σz)`.
pub fn pauli() -> (Operator, Operator, Operator) {
    let (sx, sy, sz) = spin_operators(0.5).expect("spin 1/2 is supported");
    (sx.scale(2.0), sy.scale(2.0), sz.scale(2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amps: DVector<C64>,
}

impl StateVector {
    /// Normalizes the given amplitudes; rejects the zero vector.
    pub fn new(amps: Vec<C64>) -> Result<Self> {
        if amps.is_empty() || amps.len() > MAX_DIM * MAX_DIM {
            return Err(invalid("state dimension out of range"));
        }
        let v = DVector::from_vec(amps);
        let n = v.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(invalid("state vector must have finite non-zero norm"));
        }
        Ok(Self { amps: v / C64::new(n, 0.0) })
    }

    pub fn basis(dim: usize, index: usize) -> Result<Self> {
        if index >= dim {
            return Err(invalid(format!("basis index {index} out of range for dim {dim}")));
        }
        let mut amps = DVector::zeros(dim);
        amps[index] = C64::new(1.0, 0.0);
        Ok(Self { amps })
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitude(&self, index: usize) -> C64 {
        self.amps[index]
    }

    pub fn amplitudes(&self) -> impl Iterator<Item = &C64> {
        self.amps.iter()
    }

    pub fn norm(&self) -> f64 {
        self.amps.norm()
    }

    pub fn population(&self, index: usize) -> f64 {
        self.amps[index].norm_sqr()
    }

    /// Largest amplitude difference to another state of the same dimension.
    pub fn max_diff(&self, other: &StateVector) -> f64 {
        (&self.amps - &other.amps)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    rho: Operator,
}

impl DensityMatrix {
    /// Validates Hermiticity, unit trace and positive semidefiniteness.
    pub fn new(rho: Operator) -> Result<Self> {
        if !rho.is_hermitian() {
            return Err(Error::NotHermitian {
                deviation: rho.hermiticity_error(),
            });
        }
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > NORM_TOL || tr.im.abs() > NORM_TOL {
            return Err(invalid(format!("density matrix trace {tr} != 1")));
        }
        let min_eig = rho.eigenvalues()?.first().copied().unwrap_or(0.0);
        if min_eig < -1e-9 {
            return Err(invalid(format!(
                "density matrix has negative eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(Self { rho })
    }

    /// Diagonal mixture with the given populations.
    pub fn from_populations(pops: &[f64]) -> Result<Self> {
        if pops.iter().any(|p| *p < 0.0) {
            return Err(invalid("populations must be non-negative"));
        }
        Self::new(Operator::diagonal(pops))
    }

    pub fn pure(psi: &StateVector) -> Self {
        let m = &psi.amps * psi.amps.adjoint();
        Self { rho: Operator { m } }
    }

    pub fn operator(&self) -> &Operator {
        &self.rho
    }

    pub fn dim(&self) -> usize {
        self.rho.dim()
    }

    pub fn population(&self, index: usize) -> f64 {
        self.rho.entry(index, index).re
    }

    /// `U ρ U†`.
    pub fn evolve(&self, u: &Operator) -> Result<Self> {
        check_dims(self.dim(), u.dim())?;
        let m = &u.m * &self.rho.m * u.m.adjoint();
        Ok(Self { rho: Operator { m } })
    }
}

/// A time-independent Hamiltonian (MHz) held for `duration` μs.
#[derive(Debug, Clone)]
pub struct Segment {
    pub hamiltonian: Operator,
    pub duration: f64,
}

impl Segment {
    pub fn new(hamiltonian: Operator, duration: f64) -> Self {
        Self {
            hamiltonian,
            duration,
        }
    }
}

/// Applies each segment's propagator in order.
pub fn propagate_piecewise(segments: &[Segment], input: &StateVector) -> Result<StateVector> {
    let mut psi = input.clone();
    for seg in segments {
        check_dims(psi.dim(), seg.hamiltonian.dim())?;
        let u = seg.hamiltonian.propagator(seg.duration)?;
        psi = u.apply(&psi)?;
    }
    Ok(psi)
}

/// Number of midpoint sub-steps needed for a time-dependent segment so that
/// each step is at most `1/(50·f_max)`.
pub fn substeps(duration: f64, f_max: f64) -> usize {
    if duration <= 0.0 {
        return 0;
    }
    if f_max <= 0.0 {
        return 1;
    }
    (duration * 50.0 * f_max).ceil().max(1.0) as usize
}

/// Propagates through a time-dependent Hamiltonian `h(t)` on `[t0, t0 + duration]`,
/// freezing it at each sub-step midpoint.
pub fn propagate_time_dependent<F>(
    h: F,
    t0: f64,
    duration: f64,
    f_max: f64,
    input: &StateVector,
) -> Result<StateVector>
where
    F: Fn(f64) -> Operator,
{
    let n = substeps(duration, f_max);
    let mut psi = input.clone();
    if n == 0 {
        return Ok(psi);
    }
    let dt = duration / n as f64;
    for k in 0..n {
        let tm = t0 + (k as f64 + 0.5) * dt;
        let hk = h(tm);
        check_dims(psi.dim(), hk.dim())?;
        psi = hk.propagator(dt)?.apply(&psi)?;
    }
    Ok(psi)
}

/// Closed-form SU(2) element `[[a, b], [−b*, a*]]`, the workhorse of the
/// trajectory engine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Su2 {
    pub a: C64,
    pub b: C64,
}

impl Su2 {
    pub const IDENTITY: Su2 = Su2 {
        a: C64 { re: 1.0, im: 0.0 },
        b: C64 { re: 0.0, im: 0.0 },
    };

    /// `exp(−i·2π·(hx σx + hy σy + hz σz)·t)`.
    #[inline]
    pub fn from_field(hx: f64, hy: f64, hz: f64, t: f64) -> Su2 {
        let norm = (hx * hx + hy * hy + hz * hz).sqrt();
        let theta = 2.0 * PI * norm * t;
        if norm == 0.0 || theta == 0.0 {
            return Su2::IDENTITY;
        }
        let (s, c) = theta.sin_cos();
        let k = s / norm;
        // cos θ·I − i sin θ·(n·σ)
        Su2 {
            a: C64::new(c, -k * hz),
            b: C64::new(-k * hy, -k * hx),
        }
    }

    /// `self · rhs`.
    #[inline]
    pub fn then_after(self, rhs: Su2) -> Su2 {
        Su2 {
            a: self.a * rhs.a - self.b * rhs.b.conj(),
            b: self.a * rhs.b + self.b * rhs.a.conj(),
        }
    }

    #[inline]
    pub fn adjoint(self) -> Su2 {
        Su2 {
            a: self.a.conj(),
            b: -self.b,
        }
    }

    pub fn to_operator(self) -> Operator {
        Operator::from_rows(2, &[self.a, self.b, -self.b.conj(), self.a.conj()])
            .expect("2x2 entries")
    }

    /// `|⟨0|U|0⟩|²`, the probability of staying in the first basis state.
    #[inline]
    pub fn stay_probability(self) -> f64 {
        self.a.norm_sqr()
    }
}
