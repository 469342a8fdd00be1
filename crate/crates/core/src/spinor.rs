//! Explicit 4×4 Dirac algebra in the Dirac (Bjorken–Drell) representation.
//!
//! This module never uses trace identities. It is the independent oracle
//! for the traced bracket implemented in [`crate::radiation`].

use std::sync::OnceLock;

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use num_complex::Complex64;

use crate::kinematics::{ParticleParams, ScatteringKinematics};
use crate::{Error, FourVector, Result, Vec3};

pub type DiracMatrix = Matrix4<Complex64>;
pub type Bispinor4 = Vector4<Complex64>;

/// Diagonal of the metric, (+,−,−,−).
pub const METRIC: [f64; 4] = [1.0, -1.0, -1.0, -1.0];

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

pub fn lower(a: &FourVector) -> FourVector {
    [a[0], -a[1], -a[2], -a[3]]
}

pub fn pauli() -> [Matrix2<Complex64>; 3] {
    [Matrix2::new(ZERO, ONE, ONE, ZERO), Matrix2::new(ZERO, -I, I, ZERO), Matrix2::new(ONE, ZERO, ZERO, -ONE)]
}

#[derive(Debug, Clone)]
pub struct GammaBasis {
    pub gamma: [DiracMatrix; 4],
    pub gamma5: DiracMatrix,
    /// σ^{μν} = (i/2)[γ^μ, γ^ν].
    pub sigma: [[DiracMatrix; 4]; 4],
}

fn block(a: Matrix2<Complex64>, b: Matrix2<Complex64>, c: Matrix2<Complex64>, d: Matrix2<Complex64>) -> DiracMatrix {
    let mut m = DiracMatrix::zeros();
    m.fixed_view_mut::<2, 2>(0, 0).copy_from(&a);
    m.fixed_view_mut::<2, 2>(0, 2).copy_from(&b);
    m.fixed_view_mut::<2, 2>(2, 0).copy_from(&c);
    m.fixed_view_mut::<2, 2>(2, 2).copy_from(&d);
    m
}

fn build_basis() -> GammaBasis {
    let id = Matrix2::identity();
    let z = Matrix2::zeros();
    let s = pauli();
    let g0 = block(id, z, z, -id);
    let gi = |k: usize| block(z, s[k], -s[k], z);
    let gamma = [g0, gi(0), gi(1), gi(2)];
    let gamma5 = gamma[0] * gamma[1] * gamma[2] * gamma[3] * (-I);
    let mut sigma = [[DiracMatrix::zeros(); 4]; 4];
    for mu in 0..4 {
        for nu in 0..4 {
            sigma[mu][nu] = (gamma[mu] * gamma[nu] - gamma[nu] * gamma[mu]) * (I * 0.5);
        }
    }
    GammaBasis { gamma, gamma5, sigma }
}

pub fn gamma_basis() -> &'static GammaBasis {
    static BASIS: OnceLock<GammaBasis> = OnceLock::new();
    BASIS.get_or_init(build_basis)
}

impl GammaBasis {
    /// â = γ^μ a_μ for contravariant a.
    pub fn slash(&self, a: &FourVector) -> DiracMatrix {
        let al = lower(a);
        (0..4).fold(DiracMatrix::zeros(), |acc, mu| acc + self.gamma[mu] * Complex64::from(al[mu]))
    }
}

/// Totally antisymmetric symbol with ε^{0123} = +1.
pub fn levi_civita(idx: [usize; 4]) -> f64 {
    let mut s = 1.0;
    for i in 0..4 {
        for j in i + 1..4 {
            match idx[i].cmp(&idx[j]) {
                std::cmp::Ordering::Equal => return 0.0,
                std::cmp::Ordering::Greater => s = -s,
                std::cmp::Ordering::Less => {}
            }
        }
    }
    s
}

/// Two-component spin basis along τ: σ·τ χ_s = s χ_s.
pub fn pauli_spinor(tau: &Vec3, s: i8) -> Vector2<Complex64> {
    let theta = tau[2].clamp(-1.0, 1.0).acos();
    let phi = tau[1].atan2(tau[0]);
    let (sh, ch) = (theta / 2.0).sin_cos();
    if s > 0 {
        Vector2::new(Complex64::from(ch), Complex64::from_polar(sh, phi))
    } else {
        Vector2::new(-Complex64::from_polar(sh, -phi), Complex64::from(ch))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bispinor {
    pub u: Bispinor4,
    pub p: Vec3,
    pub s: i8,
    pub tau: Vec3,
}

impl Bispinor {
    /// ū = u†γ⁰.
    pub fn bar(&self) -> nalgebra::RowVector4<Complex64> {
        self.u.adjoint() * gamma_basis().gamma[0]
    }
}

/// Positive-energy spinor u_s(p) = (m + p̂)/√(2m(p0+m)) [χ_s; 0], normalized
/// to ū u = 1.
pub fn build_spinor(p: &Vec3, s: i8, tau: &Vec3, m: f64) -> Result<Bispinor> {
    if ((tau.norm() - 1.0).abs()) > 1e-12 {
        return Err(Error::invalid("spin quantization axis must be a unit vector"));
    }
    if s != 1 && s != -1 {
        return Err(Error::invalid("spin label must be ±1"));
    }
    let chi = pauli_spinor(tau, s);
    let p0 = (m * m + p.norm_squared()).sqrt();
    let g = gamma_basis();
    let rest = Bispinor4::new(chi[0], chi[1], ZERO, ZERO);
    let proj = DiracMatrix::identity() * Complex64::from(m) + g.slash(&[p0, p[0], p[1], p[2]]);
    let u = proj * rest / Complex64::from((2.0 * m * (p0 + m)).sqrt());
    Ok(Bispinor { u, p: *p, s, tau: *tau })
}

/// s^μ = (ζ·p/m, ζ + p(ζ·p)/(m(p0+m))).
pub fn spin_four_vector(zeta: &Vec3, p: &Vec3, m: f64) -> FourVector {
    let p0 = (m * m + p.norm_squared()).sqrt();
    let zp = zeta.dot(p);
    let v = zeta + p * (zp / (m * (p0 + m)));
    [zp / m, v[0], v[1], v[2]]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinState {
    pub zeta: Vec3,
}

impl SpinState {
    pub fn new(zeta: Vec3) -> Result<Self> {
        if zeta.norm() > 1.0 + 1e-12 {
            return Err(Error::invalid(format!("|ζ| = {} exceeds 1", zeta.norm())));
        }
        Ok(Self { zeta })
    }
    pub fn unpolarized() -> Self {
        Self { zeta: Vec3::zeros() }
    }
    pub fn is_pure(&self) -> bool {
        (self.zeta.norm() - 1.0).abs() < 1e-12
    }
    pub fn four_vector(&self, p: &Vec3, m: f64) -> FourVector {
        spin_four_vector(&self.zeta, p, m)
    }
}

/// ρ = (1 + σ·ζ)/2 in the rest frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinDensityMatrix {
    pub rho: Matrix2<Complex64>,
}

impl SpinDensityMatrix {
    pub fn from_zeta(zeta: &Vec3) -> Self {
        let s = pauli();
        let rho =
            (Matrix2::identity() + s[0] * Complex64::from(zeta[0]) + s[1] * Complex64::from(zeta[1]) + s[2] * Complex64::from(zeta[2]))
                * Complex64::from(0.5);
        Self { rho }
    }

    /// The pure state φ_s ∝ e^{s(κ − iψ)/2} χ_s(τ), built from the explicit
    /// two-spinors rather than from the closed form for ζ.
    pub fn from_superposition(tau: &Vec3, kappa: f64, psi: f64) -> Self {
        let mut rho = Matrix2::zeros();
        for s in [1i8, -1] {
            for sb in [1i8, -1] {
                let (sf, sbf) = (s as f64, sb as f64);
                let w = Complex64::from_polar((kappa * (sf + sbf) / 2.0).exp() / (2.0 * kappa.cosh()), -psi * (sf - sbf) / 2.0);
                rho += pauli_spinor(tau, s) * pauli_spinor(tau, sb).adjoint() * w;
            }
        }
        Self { rho }
    }

    /// ζ_i = tr(ρσ_i).
    pub fn zeta(&self) -> Vec3 {
        let s = pauli();
        Vec3::new((self.rho * s[0]).trace().re, (self.rho * s[1]).trace().re, (self.rho * s[2]).trace().re)
    }
}

/// ζ0 for axis τ(θ_τ, φ_τ) and relative phase ψ.
pub fn zeta0(theta: f64, phi: f64, psi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let (sd, cd) = (psi - phi).sin_cos();
    Vec3::new(ct * cp * cd - sp * sd, ct * sp * cd + cp * sd, -st * cd)
}

/// ζ = τ tanh κ + ζ0 / cosh κ.
pub fn effective_spin(tau: &Vec3, kappa: f64, psi: f64) -> Vec3 {
    let theta = tau[2].clamp(-1.0, 1.0).acos();
    let phi = tau[1].atan2(tau[0]);
    let z0 = zeta0(theta, phi, psi);
    if kappa.is_infinite() {
        return tau * kappa.signum();
    }
    tau * kappa.tanh() + z0 / kappa.cosh()
}

/// (1 − γ⁵ŝ)/2.
pub fn spin_projector(s: &FourVector) -> DiracMatrix {
    let g = gamma_basis();
    (DiracMatrix::identity() - g.gamma5 * g.slash(s)) * Complex64::from(0.5)
}

/// Γ̄^i = eγ^i − iμ q_ν σ^{νi} and Γ^j = eγ^j + iμ q_ρ σ^{ρj}, q = p − p'.
fn vertices(sk: &ScatteringKinematics, e: f64, mu: f64) -> ([DiracMatrix; 3], [DiracMatrix; 3]) {
    let g = gamma_basis();
    let ql = lower(&sk.q());
    let mut bar = [DiracMatrix::zeros(); 3];
    let mut ket = [DiracMatrix::zeros(); 3];
    for i in 0..3 {
        let mut qs = DiracMatrix::zeros();
        for nu in 0..4 {
            qs += g.sigma[nu][i + 1] * Complex64::from(ql[nu]);
        }
        bar[i] = g.gamma[i + 1] * Complex64::from(e) - qs * (I * mu);
        ket[i] = g.gamma[i + 1] * Complex64::from(e) + qs * (I * mu);
    }
    (bar, ket)
}

/// Squared-vertex tensor M^{ij} from explicit spinors: the incident mixed
/// state is decomposed into pure spinors along ζ̂ with weights (1 ± |ζ|)/2,
/// the outgoing spin is summed over an explicit spinor basis, and
/// M^{ij} = 2m² Σ_s w_s Σ_s' (ū_s Γ̄^i u'_s')(ū'_s' Γ^j u_s).
pub fn brute_force_tensor(sk: &ScatteringKinematics, params: &ParticleParams, zeta: &Vec3) -> Result<nalgebra::Matrix3<Complex64>> {
    let m = params.mass();
    let (bar, ket) = vertices(sk, params.charge(), params.mu_a());
    let z = zeta.norm();
    if z > 1.0 + 1e-12 {
        return Err(Error::invalid("|ζ| exceeds 1"));
    }
    let axis = if z > 0.0 { zeta / z } else { Vec3::z() };
    let out_axis = Vec3::z();
    let mut out = nalgebra::Matrix3::zeros();
    for s in [1i8, -1] {
        let w = 0.5 * (1.0 + s as f64 * z);
        if w == 0.0 {
            continue;
        }
        let u = build_spinor(&sk.p, s, &axis, m)?;
        let ub = u.bar();
        for s2 in [1i8, -1] {
            let v = build_spinor(&sk.p_out, s2, &out_axis, m)?;
            let vb = v.bar();
            let left: Vec<Complex64> = (0..3).map(|i| (ub * bar[i] * v.u)[(0, 0)]).collect();
            let right: Vec<Complex64> = (0..3).map(|j| (vb * ket[j] * u.u)[(0, 0)]).collect();
            for i in 0..3 {
                for j in 0..3 {
                    out[(i, j)] += left[i] * right[j] * (2.0 * m * m * w);
                }
            }
        }
    }
    Ok(out)
}

/// The same tensor as a 4×4 trace, ½ Tr[Γ̄^i (m+p̂') Γ^j (m+p̂)(1−γ⁵ŝ)/2].
/// Used only as a second explicit-matrix check of the spinor sums.
pub fn trace_tensor(sk: &ScatteringKinematics, params: &ParticleParams, zeta: &Vec3) -> nalgebra::Matrix3<Complex64> {
    let g = gamma_basis();
    let m = params.mass();
    let (bar, ket) = vertices(sk, params.charge(), params.mu_a());
    let s = spin_four_vector(zeta, &sk.p, m);
    let id = DiracMatrix::identity() * Complex64::from(m);
    let pin = (id + g.slash(&sk.p4())) * spin_projector(&s);
    let pout = id + g.slash(&sk.p_out4());
    nalgebra::Matrix3::from_fn(|i, j| (bar[i] * pout * ket[j] * pin).trace() * 0.5)
}
