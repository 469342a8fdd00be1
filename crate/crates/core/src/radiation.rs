//! Inclusive transition-radiation probability per photon momentum element
//! d³k: the traced integrand, the contraction fast path, polarization sums,
//! closed forms and packet quadrature.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix3;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::kinematics::{
    applicability, build_polarization, solve_final_momentum, ApplicabilityContext, ApplicabilityReport, ParticleParams, PhotonKinematics,
    PolarizationBasis, PolarizationMode, ScatteringKinematics, DOMINANCE_FACTOR, SMALL_RECOIL, THETA_MAX_DEFAULT,
};
use crate::quadrature::{self, Node, Quantity};
use crate::spinor::{brute_force_tensor, levi_civita, lower, spin_four_vector};
use crate::units;
use crate::wavepackets::WavePacket;
use crate::{minkowski_dot, CVec3, Error, FourVector, Result, Vec3};

/// Largest packet mass allowed on closed channels.
pub const CLOSED_MASS_LIMIT: f64 = 1e-6;

/// Contributions proportional to e², eμ_a and μ_a².
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermBreakdown {
    pub e2: f64,
    pub e_mu: f64,
    pub mu2: f64,
}

impl TermBreakdown {
    pub fn total(&self) -> f64 {
        self.e2 + self.e_mu + self.mu2
    }
}

impl Quantity for TermBreakdown {
    fn add(self, o: Self) -> Self {
        Self { e2: self.e2 + o.e2, e_mu: self.e_mu + o.e_mu, mu2: self.mu2 + o.mu2 }
    }
    fn scale(self, w: f64) -> Self {
        Self { e2: self.e2 * w, e_mu: self.e_mu * w, mu2: self.mu2 * w }
    }
    fn magnitude(&self) -> f64 {
        self.total().abs()
    }
}

/// The curly bracket of the traced probability, split by coupling, with the
/// couplings included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BracketTensor {
    pub e2: Matrix3<Complex64>,
    pub e_mu: Matrix3<Complex64>,
    pub mu2: Matrix3<Complex64>,
}

impl BracketTensor {
    pub fn total(&self) -> Matrix3<Complex64> {
        self.e2 + self.e_mu + self.mu2
    }
}

/// a_μ b_ν ε^{μνij} for spatial i, j (1-based indices inside).
fn eps_contract(a: &FourVector, b: &FourVector, i: usize, j: usize) -> f64 {
    let (al, bl) = (lower(a), lower(b));
    let mut s = 0.0;
    for mu in 0..4 {
        for nu in 0..4 {
            let e = levi_civita([mu, nu, i, j]);
            if e != 0.0 {
                s += e * al[mu] * bl[nu];
            }
        }
    }
    s
}

/// Traced bracket with all three coupling blocks and the spin terms, written
/// out index by index.
pub fn traced_bracket(sk: &ScatteringKinematics, params: &ParticleParams, zeta: &Vec3) -> BracketTensor {
    traced_bracket_with(sk, params, zeta, 1.0)
}

/// `eps_sign` scales every ε-tensor term; anything but 1 is a deliberate
/// defect used by the verification suite's mutation check.
pub(crate) fn traced_bracket_with(sk: &ScatteringKinematics, params: &ParticleParams, zeta: &Vec3, eps_sign: f64) -> BracketTensor {
    let (m, e, mu) = (params.mass(), params.charge(), params.mu_a());
    let p = sk.p4();
    let pp = sk.p_out4();
    let q = sk.q();
    let s = spin_four_vector(zeta, &sk.p, m);
    let q2 = sk.q2;
    let qs = minkowski_dot(&q, &s);
    let i_ = Complex64::new(0.0, 1.0);
    let mut t = BracketTensor { e2: Matrix3::zeros(), e_mu: Matrix3::zeros(), mu2: Matrix3::zeros() };
    for a in 0..3 {
        for b in 0..3 {
            let (i, j) = (a + 1, b + 1);
            let eta = if i == j { -1.0 } else { 0.0 };
            let eqs = eps_sign * eps_contract(&q, &s, i, j);
            let epq = eps_sign * eps_contract(&p, &q, i, j);
            let sym = p[i] * pp[j] + p[j] * pp[i];
            t.e2[(a, b)] = (Complex64::from(sym + eta * q2 / 2.0) + i_ * (m * eqs)) * (e * e);
            t.e_mu[(a, b)] =
                (Complex64::from(2.0 * m * q2 * eta - 2.0 * m * q[i] * q[j]) + i_ * ((2.0 * m * m + q2 / 2.0) * eqs + qs * epq)) * (e * mu);
            let ps = |k: usize| p[k] + pp[k];
            t.mu2[(a, b)] = (Complex64::from(q2 * (2.0 * m * m * eta - ps(i) * ps(j) / 2.0) - 2.0 * m * m * q[i] * q[j])
                + i_ * (2.0 * m * (qs * epq + q2 * eqs / 2.0)))
                * (mu * mu);
        }
    }
    t
}

/// 1/(32π³ k0 |p3' p3|).
pub fn prefactor(sk: &ScatteringKinematics) -> f64 {
    1.0 / (32.0 * PI.powi(3) * sk.k0 * (sk.p_out[2] * sk.p[2]).abs())
}

/// Σ_{r r'} f_{r i} T^{ij} f*_{r' j} / (D_r D_r'), D_r = p3' − p3 + r k3.
pub fn contract_reflected(t: &Matrix3<Complex64>, pol: &PolarizationBasis, sk: &ScatteringKinematics) -> Complex64 {
    let mut s = Complex64::new(0.0, 0.0);
    for r in [1i8, -1] {
        for r2 in [1i8, -1] {
            let fr = pol.f_r(r);
            let fr2 = pol.f_r(r2);
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    acc += fr[i] * t[(i, j)] * fr2[j].conj();
                }
            }
            s += acc / (sk.denominator(r) * sk.denominator(r2));
        }
    }
    s
}

fn contract_breakdown(t: &BracketTensor, pol: &PolarizationBasis, sk: &ScatteringKinematics) -> TermBreakdown {
    let pre = prefactor(sk);
    TermBreakdown {
        e2: contract_reflected(&t.e2, pol, sk).re * pre,
        e_mu: contract_reflected(&t.e_mu, pol, sk).re * pre,
        mu2: contract_reflected(&t.mu2, pol, sk).re * pre,
    }
}

/// General integrand at fixed p: traced bracket, explicit reflected sums.
pub fn integrand_general(
    p: &Vec3,
    photon: &PhotonKinematics,
    pol: &PolarizationBasis,
    params: &ParticleParams,
    zeta: &Vec3,
) -> Result<TermBreakdown> {
    let sk = solve_final_momentum(p, photon, params.mass())?;
    Ok(contract_breakdown(&traced_bracket(&sk, params, zeta), pol, &sk))
}

/// The same integrand from explicit 4×4 spinors (no trace identities).
pub fn integrand_brute_force(
    p: &Vec3,
    photon: &PhotonKinematics,
    pol: &PolarizationBasis,
    params: &ParticleParams,
    zeta: &Vec3,
) -> Result<f64> {
    let sk = solve_final_momentum(p, photon, params.mass())?;
    let t = brute_force_tensor(&sk, params, zeta)?;
    Ok(contract_reflected(&t, pol, &sk).re * prefactor(&sk))
}

fn cdot(a: &CVec3, b: &Vec3) -> Complex64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// F = k3 f + (q3 − k3) f3 e3, so that Σ_r f_r/D_r = (2/q²) F.
pub fn reflected_sum_vector(pol: &PolarizationBasis, k3: f64, q3: f64) -> CVec3 {
    let mut fv = pol.f * Complex64::from(k3);
    fv[2] += Complex64::from((q3 - k3) * pol.f3());
    fv
}

/// (b⁰ a − a⁰ b)·(F × F*), equal to a_μ b_ν ε^{μνij} F_i F*_j.
fn eps_vector(a: &FourVector, b: &FourVector, fxf: &CVec3) -> Complex64 {
    let v = Vec3::new(b[0] * a[1] - a[0] * b[1], b[0] * a[2] - a[0] * b[2], b[0] * a[3] - a[0] * b[3]);
    cdot(fxf, &v)
}

/// Fast path through the contraction identities; needs a real f3.
pub fn integrand_contracted(
    p: &Vec3,
    photon: &PhotonKinematics,
    pol: &PolarizationBasis,
    params: &ParticleParams,
    zeta: &Vec3,
) -> Result<TermBreakdown> {
    if pol.f[2].im != 0.0 {
        return Err(Error::invalid("contraction fast path needs a real f3"));
    }
    let m = params.mass();
    let (e, mu) = (params.charge(), params.mu_a());
    let sk = solve_final_momentum(p, photon, m)?;
    let (k3, q3, q2) = (sk.k[2], sk.q3, sk.q2);
    let f3 = pol.f3();
    let fv = reflected_sum_vector(pol, k3, q3);
    let f2 = fv.iter().map(|z| z.norm_sqr()).sum::<f64>();
    let pf = cdot(&fv, &sk.p);
    let fxf = fv.cross(&fv.map(|z| z.conj()));
    let s = spin_four_vector(zeta, &sk.p, m);
    let q = sk.q();
    let qs = minkowski_dot(&q, &s);
    let i_ = Complex64::new(0.0, 1.0);
    let eqs = eps_vector(&q, &s, &fxf);
    let epq = eps_vector(&sk.p4(), &q, &fxf);
    let qf2 = q2 * q2 * f3 * f3;

    let e2 = e * e * (2.0 * pf.norm_sqr() + 2.0 * q2 * f3 * pf.re - 0.5 * q2 * f2 + (i_ * m * eqs).re);
    let e_mu = e * mu * (-2.0 * m * q2 * f2 - 2.0 * m * qf2 + (i_ * ((2.0 * m * m + q2 / 2.0) * eqs + qs * epq)).re);
    let sum_pf = pf * 2.0 + q2 * f3;
    let mu2 = mu
        * mu
        * (q2 * (-2.0 * m * m * f2 - 0.5 * sum_pf.norm_sqr()) - 2.0 * m * m * qf2 + (i_ * 2.0 * m * (qs * epq + q2 * eqs / 2.0)).re);
    let scale = 4.0 / (q2 * q2) * prefactor(&sk);
    Ok(TermBreakdown { e2: e2 * scale, e_mu: e_mu * scale, mu2: mu2 * scale })
}

/// Polarization-summed bracket, exact at p⊥ = 0 (normal incidence).
pub fn integrand_summed_normal(p: &Vec3, photon: &PhotonKinematics, params: &ParticleParams) -> Result<TermBreakdown> {
    let m = params.mass();
    let (e, mu) = (params.charge(), params.mu_a());
    let sk = solve_final_momentum(p, photon, m)?;
    let (k3, q3, q2) = (sk.k[2], sk.q3, sk.q2);
    let np2 = photon.n_perp().powi(2);
    let x = (2.0 * sk.p[2] * q3 / q2 + 1.0).powi(2) * np2;
    let y = -2.0 * k3 * k3 / q2;
    let pre = 1.0 / (16.0 * PI.powi(3) * sk.k0 * (sk.p_out[2] * sk.p[2]).abs());
    Ok(TermBreakdown { e2: e * e * (x + y) * pre, e_mu: 4.0 * m * e * mu * y * pre, mu2: mu * mu * (-q2 * x + 4.0 * m * m * y) * pre })
}

/// Small-recoil approximants of q3 and q² at fixed p: k0(1 − β⊥·n⊥)/β3 and
/// −k0²[(1 − β⊥·n⊥)² − β3²n3²]/β3².
pub fn small_recoil_transfer(p: &Vec3, photon: &PhotonKinematics, m: f64) -> (f64, f64) {
    let p0 = (m * m + p.norm_squared()).sqrt();
    let b = p / p0;
    let n = photon.n();
    let bn = b[0] * n[0] + b[1] * n[1];
    let k0 = photon.k0();
    let q3 = k0 * (1.0 - bn) / b[2];
    let q2 = -k0 * k0 * ((1.0 - bn).powi(2) - b[2] * b[2] * n[2] * n[2]) / (b[2] * b[2]);
    (q3, q2)
}

/// Per-momentum closed-form integrands, integrated over the packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketClosedForm {
    /// Orthogonal polarization, small recoil, normal incidence.
    OrthoSmallRecoil,
    /// Polarization-summed, small recoil, normal incidence.
    SummedSmallRecoil,
    /// Charge only, small recoil, any polarization (twisted packets).
    TwistedCharge,
    /// Moment only, small recoil, any polarization (twisted packets).
    TwistedNeutral,
}

impl PacketClosedForm {
    pub fn name(&self) -> &'static str {
        match self {
            PacketClosedForm::OrthoSmallRecoil => "ortho_small_recoil",
            PacketClosedForm::SummedSmallRecoil => "summed_small_recoil",
            PacketClosedForm::TwistedCharge => "twisted_charge",
            PacketClosedForm::TwistedNeutral => "twisted_neutral",
        }
    }

    pub fn integrand(
        &self,
        p: &Vec3,
        photon: &PhotonKinematics,
        pol: &PolarizationBasis,
        params: &ParticleParams,
    ) -> Result<TermBreakdown> {
        let m = params.mass();
        let (e, mu) = (params.charge(), params.mu_a());
        let k0 = photon.k0();
        let (n3, np) = (photon.n3(), photon.n_perp());
        let p0 = (m * m + p.norm_squared()).sqrt();
        let g = p0 / m;
        let d = n3 * n3 + np * np * g * g;
        Ok(match self {
            PacketClosedForm::OrthoSmallRecoil => {
                let x = n3 * n3 / (m * m * d) / (16.0 * PI.powi(3) * k0);
                TermBreakdown { e2: e * e * x, e_mu: 4.0 * m * e * mu * x, mu2: 4.0 * m * m * mu * mu * x }
            }
            PacketClosedForm::SummedSmallRecoil => {
                let b3 = p[2] / p0;
                let pre = 1.0 / (d * 8.0 * PI.powi(3) * k0);
                let y = n3 * n3 / (m * m);
                TermBreakdown {
                    e2: e * e * (2.0 * np * np * g * g * b3 * b3 * g * g / (k0 * k0 * d) + y) * pre,
                    e_mu: 4.0 * m * e * mu * y * pre,
                    mu2: mu * mu * (2.0 * np * np * g * g + 4.0 * m * m * y) * pre,
                }
            }
            PacketClosedForm::TwistedCharge | PacketClosedForm::TwistedNeutral => {
                let (q3, q2) = small_recoil_transfer(p, photon, m);
                let k3 = photon.k()[2];
                let amp = (cdot(&pol.f, p) * k3 + (q3 - k3) * p[2] * pol.f3()).norm_sqr();
                let pre = 1.0 / (4.0 * PI.powi(3) * k0 * p[2] * p[2]);
                if *self == PacketClosedForm::TwistedCharge {
                    TermBreakdown { e2: e * e * amp / (q2 * q2) * pre, ..Default::default() }
                } else {
                    TermBreakdown { mu2: -mu * mu * (m * m * k3 * k3 + amp) / q2 * pre, ..Default::default() }
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    General,
    FastPath,
    ClosedForm(PacketClosedForm),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MethodTag {
    GeneralQuadrature,
    ContractionFastPath,
    ClosedForm(String),
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodTag::GeneralQuadrature => write!(f, "general"),
            MethodTag::ContractionFastPath => write!(f, "fastpath"),
            MethodTag::ClosedForm(n) => write!(f, "closedform:{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadiationResult {
    /// dP/d³k.
    pub value: f64,
    pub breakdown: TermBreakdown,
    pub method: MethodTag,
    /// Absolute integrator error estimate (zero for point closed forms).
    pub error_estimate: f64,
    pub warnings: Vec<String>,
}

impl RadiationResult {
    fn from_breakdown(b: TermBreakdown, method: MethodTag, error_estimate: f64, warnings: Vec<String>) -> Self {
        Self { value: b.total(), breakdown: b, method, error_estimate, warnings }
    }

    /// dP/(dk0 dΩ) = k0² dP/d³k.
    pub fn per_energy_solid_angle(&self, k0: f64) -> f64 {
        self.value * k0 * k0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbabilityOptions {
    pub method: Method,
    pub quadrature: quadrature::Options,
}

impl Default for ProbabilityOptions {
    fn default() -> Self {
        Self { method: Method::FastPath, quadrature: quadrature::Options::default() }
    }
}

impl ProbabilityOptions {
    pub fn with_rtol(mut self, rtol: f64) -> Self {
        self.quadrature.rtol = rtol;
        self
    }
    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }
}

fn finish(est: quadrature::Estimate<TermBreakdown>, method: MethodTag, rtol: f64) -> Result<RadiationResult> {
    if est.closed_fraction > CLOSED_MASS_LIMIT {
        return Err(Error::ChannelClosedOnSupport { fraction: est.closed_fraction });
    }
    let mut warnings = Vec::new();
    if !est.converged {
        warnings.push(format!(
            "quadrature not converged at order {}: error {:.3e} > rtol {:.1e}",
            est.order,
            est.error / est.value.magnitude().max(f64::MIN_POSITIVE),
            rtol
        ));
    }
    if est.closed_fraction > 0.0 {
        warnings.push(format!("channel closed on {:.3e} of the packet mass", est.closed_fraction));
    }
    Ok(RadiationResult::from_breakdown(est.value, method, est.error, warnings))
}

/// ∫ d³p c(p) × integrand, adaptive in the packet's own coordinates.
pub fn probability(
    packet: &WavePacket,
    photon: &PhotonKinematics,
    pol: &PolarizationBasis,
    params: &ParticleParams,
    opts: &ProbabilityOptions,
) -> Result<RadiationResult> {
    let q = &opts.quadrature;
    let (est, tag) = match opts.method {
        Method::General => (
            quadrature::integrate(packet, q, |n: &Node| integrand_general(&n.p, photon, pol, params, &n.zeta))?,
            MethodTag::GeneralQuadrature,
        ),
        Method::FastPath => {
            let est = if pol.f[2].im == 0.0 {
                quadrature::integrate(packet, q, |n: &Node| integrand_contracted(&n.p, photon, pol, params, &n.zeta))?
            } else {
                quadrature::integrate(packet, q, |n: &Node| integrand_general(&n.p, photon, pol, params, &n.zeta))?
            };
            (est, MethodTag::ContractionFastPath)
        }
        Method::ClosedForm(form) => (
            quadrature::integrate(packet, q, |n: &Node| {
                // closed forms share the kinematic domain of the exact result
                solve_final_momentum(&n.p, photon, params.mass())?;
                form.integrand(&n.p, photon, pol, params)
            })?,
            MethodTag::ClosedForm(form.name().to_string()),
        ),
    };
    finish(est, tag, q.rtol)
}

/// Probability with the photon polarization unobserved.
pub fn probability_polarization_summed(
    packet: &WavePacket,
    photon: &PhotonKinematics,
    params: &ParticleParams,
    opts: &ProbabilityOptions,
) -> Result<RadiationResult> {
    match opts.method {
        Method::ClosedForm(form @ PacketClosedForm::SummedSmallRecoil) => {
            let pol = build_polarization(photon, PolarizationMode::LinearOrthogonal)?;
            probability(packet, photon, &pol, params, &opts.with_method(Method::ClosedForm(form)))
        }
        Method::FastPath if packet.is_normal_incidence() => {
            let q = &opts.quadrature;
            let est = quadrature::integrate(packet, q, |n: &Node| integrand_summed_normal(&n.p, photon, params))?;
            finish(est, MethodTag::ContractionFastPath, q.rtol)
        }
        _ => {
            let a = probability(packet, photon, &build_polarization(photon, PolarizationMode::LinearInPlane)?, params, opts)?;
            let b = probability(packet, photon, &build_polarization(photon, PolarizationMode::LinearOrthogonal)?, params, opts)?;
            let mut warnings = a.warnings;
            warnings.extend(b.warnings);
            Ok(RadiationResult::from_breakdown(a.breakdown.add(b.breakdown), a.method, a.error_estimate + b.error_estimate, warnings))
        }
    }
}

/// The classical piece of the summed small-recoil form, the term that
/// survives as ħ → 0: 2e²n⊥²γ⁴β3²/(k0²(n3² + n⊥²γ²)²)/(8π³k0).
pub fn summed_small_recoil_classical(params: &ParticleParams, photon: &PhotonKinematics, momentum: f64) -> f64 {
    let m = params.mass();
    let p0 = (m * m + momentum * momentum).sqrt();
    let (g, b) = (p0 / m, momentum / p0);
    let (n3, np) = (photon.n3(), photon.n_perp());
    let d = n3 * n3 + np * np * g * g;
    let k0 = photon.k0();
    params.charge().powi(2) * 2.0 * np * np * g.powi(4) * b * b / (k0 * k0 * d * d) / (8.0 * PI.powi(3) * k0)
}

/// Point closed forms for a packet peaked at p = (0, 0, −|p|).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosedForm {
    OrthoPolNormal,
    OrthoPolNonrel,
    SummedPolSmallRecoil,
    TwistedEInplane,
    TwistedEOrtho,
    TwistedNInplane,
    TwistedNOrtho,
}

impl ClosedForm {
    pub const ALL: [ClosedForm; 7] = [
        ClosedForm::OrthoPolNormal,
        ClosedForm::OrthoPolNonrel,
        ClosedForm::SummedPolSmallRecoil,
        ClosedForm::TwistedEInplane,
        ClosedForm::TwistedEOrtho,
        ClosedForm::TwistedNInplane,
        ClosedForm::TwistedNOrtho,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ClosedForm::OrthoPolNormal => "OrthoPolNormal",
            ClosedForm::OrthoPolNonrel => "OrthoPolNonrel",
            ClosedForm::SummedPolSmallRecoil => "SummedPolSmallRecoil",
            ClosedForm::TwistedEInplane => "TwistedE_inplane",
            ClosedForm::TwistedEOrtho => "TwistedE_ortho",
            ClosedForm::TwistedNInplane => "TwistedN_inplane",
            ClosedForm::TwistedNOrtho => "TwistedN_ortho",
        }
    }

    fn is_twisted(&self) -> bool {
        matches!(self, ClosedForm::TwistedEInplane | ClosedForm::TwistedEOrtho | ClosedForm::TwistedNInplane | ClosedForm::TwistedNOrtho)
    }
}

impl FromStr for ClosedForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ClosedForm::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| Error::UnknownForm(s.to_string()))
    }
}

impl fmt::Display for ClosedForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormArgs {
    pub params: ParticleParams,
    pub photon: PhotonKinematics,
    /// |p| of the incident momentum (along −z).
    pub momentum: f64,
    pub l: i32,
    pub sigma_perp: f64,
    pub sigma3: f64,
}

/// Leading part and first-order (|l|+1)σ⊥² coefficient of a twisted closed
/// form: value = leading + c·correction, c = (|l|+1)σ⊥².
pub fn twisted_series(form: ClosedForm, args: &ClosedFormArgs) -> Result<(f64, f64)> {
    let m = args.params.mass();
    let (e, mu) = (args.params.charge(), args.params.mu_a());
    let p = args.momentum;
    let (n3, np) = (args.photon.n3(), args.photon.n_perp());
    let k0 = args.photon.k0();
    let (m2, p2, np2) = (m * m, p * p, np * np);
    let d = m2 + np2 * p2;
    let pe = 1.0 / (4.0 * PI.powi(3) * k0.powi(3));
    let pn = 1.0 / (4.0 * PI.powi(3) * k0);
    Ok(match form {
        ClosedForm::TwistedEInplane => {
            let lead = e * e * p2 / (d * d) * np2 * (m2 + p2) * pe;
            let br =
                m2 * m2 * (1.0 - 10.0 * np2 + 10.0 * np2 * np2) - 2.0 * m2 * p2 * np2 * (5.0 - 7.0 * np2 + np2 * np2) + p2 * p2 * np2 * np2;
            (lead, e * e * p2 / (d * d) * br / (d * d) * pe)
        }
        ClosedForm::TwistedEOrtho => (0.0, e * e * p2 * n3 * n3 / (d * d) * pe),
        ClosedForm::TwistedNInplane => (mu * mu * pn, -mu * mu * n3 * n3 / d * pn),
        ClosedForm::TwistedNOrtho => {
            let br = m2 * m2 * (1.0 - 3.0 * np2) - m2 * p2 * np2 * (4.0 - np2) - p2 * p2 * np2 * np2;
            (mu * mu / d * m2 * n3 * n3 * pn, -mu * mu / d * br / (d * d) * n3 * n3 * pn)
        }
        _ => return Err(Error::invalid(format!("{form} is not a twisted closed form"))),
    })
}

/// Literal evaluation of a named closed form.
pub fn closed_form(form: ClosedForm, args: &ClosedFormArgs) -> Result<RadiationResult> {
    let params = &args.params;
    let m = params.mass();
    let (e, mu) = (params.charge(), params.mu_a());
    let p = args.momentum;
    if !(p > 0.0) {
        return Err(Error::invalid("closed forms need |p| > 0"));
    }
    let photon = &args.photon;
    let k0 = photon.k0();
    let (n3, np) = (photon.n3(), photon.n_perp());
    let p0 = (m * m + p * p).sqrt();
    let g = p0 / m;
    let beta = p / p0;
    let chi = k0 / (p * beta);
    let mut warnings = Vec::new();
    if chi >= SMALL_RECOIL {
        warnings.push(format!("regime: recoil χ = {chi:.3e} is not small"));
    }
    if form.is_twisted() {
        let c = (args.l.unsigned_abs() as f64 + 1.0) * args.sigma_perp.powi(2) / (m * m);
        if c >= 1.0 / DOMINANCE_FACTOR {
            warnings.push(format!("regime: (|l|+1)σ⊥²/m² = {c:.3e} is not small"));
        }
        if args.sigma3 / p >= 1.0 / DOMINANCE_FACTOR {
            warnings.push(format!("regime: σ3/|p| = {:.3e} is not small", args.sigma3 / p));
        }
        let charge_form = matches!(form, ClosedForm::TwistedEInplane | ClosedForm::TwistedEOrtho);
        if charge_form && mu != 0.0 {
            warnings.push("regime: charged twisted forms ignore μ_a".into());
        }
        if !charge_form && e != 0.0 {
            warnings.push("regime: neutral twisted forms ignore the charge".into());
        }
    }
    if form == ClosedForm::OrthoPolNonrel && beta >= 1.0 / DOMINANCE_FACTOR {
        warnings.push(format!("regime: β = {beta:.3} is not nonrelativistic"));
    }
    let split = |x: f64| TermBreakdown { e2: e * e * x, e_mu: 4.0 * m * e * mu * x, mu2: 4.0 * m * m * mu * mu * x };
    let pre16 = 1.0 / (16.0 * PI.powi(3) * k0);
    let b = match form {
        ClosedForm::OrthoPolNormal => split(n3 * n3 / (m * m * (n3 * n3 + np * np * g * g)) * pre16),
        ClosedForm::OrthoPolNonrel => split(n3 * n3 / (m * m) * pre16),
        ClosedForm::SummedPolSmallRecoil => {
            let pv = Vec3::new(0.0, 0.0, -p);
            let pol = build_polarization(photon, PolarizationMode::LinearOrthogonal)?;
            PacketClosedForm::SummedSmallRecoil.integrand(&pv, photon, &pol, params)?
        }
        _ => {
            let (lead, corr) = twisted_series(form, args)?;
            let c = (args.l.unsigned_abs() as f64 + 1.0) * args.sigma_perp.powi(2);
            let v = lead + c * corr;
            if matches!(form, ClosedForm::TwistedEInplane | ClosedForm::TwistedEOrtho) {
                TermBreakdown { e2: v, ..Default::default() }
            } else {
                TermBreakdown { mu2: v, ..Default::default() }
            }
        }
    };
    Ok(RadiationResult::from_breakdown(b, MethodTag::ClosedForm(form.name().to_string()), 0.0, warnings))
}

/// Smallest incident momentum for which the non-paraxial orthogonal term
/// dominates the recoil correction:
/// (|l|+1)σ⊥²/m² ≥ F k0²(n3² + n⊥²γ²)/p², with F the dominance factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwistThreshold {
    pub momentum: f64,
    pub kinetic_energy: f64,
}

pub fn twisted_dominance_threshold(params: &ParticleParams, l: i32, sigma_perp: f64, k0: f64, n_perp: f64) -> Option<TwistThreshold> {
    let m = params.mass();
    let c = (l.unsigned_abs() as f64 + 1.0) * sigma_perp * sigma_perp / (m * m);
    // (n3² + n⊥²γ²)/p² = 1/p² + n⊥²/m²
    let inv_p2 = c / (DOMINANCE_FACTOR * k0 * k0) - n_perp * n_perp / (m * m);
    (inv_p2 > 0.0).then(|| {
        let p = inv_p2.sqrt().recip();
        TwistThreshold { momentum: p, kinetic_energy: units::kinetic_from_momentum(m, p) }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorGrid {
    pub k0: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub theta_max: f64,
}

impl DetectorGrid {
    pub fn new(k0: Vec<f64>, theta: Vec<f64>, phi: Vec<f64>, theta_max: Option<f64>) -> Result<Self> {
        let theta_max = theta_max.unwrap_or(THETA_MAX_DEFAULT);
        if !(0.0..PI / 2.0).contains(&theta_max) {
            return Err(Error::invalid("θ_max must lie in [0, π/2)"));
        }
        if k0.is_empty() || theta.is_empty() || phi.is_empty() {
            return Err(Error::invalid("detector grid axes must be non-empty"));
        }
        if let Some(k) = k0.iter().find(|&&k| !(k > 0.0 && k.is_finite())) {
            return Err(Error::invalid(format!("photon energy {k} must be positive")));
        }
        if let Some(t) = theta.iter().find(|&&t| !(t >= 0.0 && t <= theta_max)) {
            return Err(Error::invalid(format!("polar angle {t} lies outside [0, θ_max = {theta_max}]")));
        }
        Ok(Self { k0, theta, phi, theta_max })
    }

    /// Points in k0-major, then θ, then φ order.
    pub fn points(&self) -> Vec<PhotonKinematics> {
        let mut out = Vec::with_capacity(self.k0.len() * self.theta.len() * self.phi.len());
        for &k in &self.k0 {
            for &t in &self.theta {
                for &p in &self.phi {
                    out.push(PhotonKinematics::new(k, t, p).expect("grid validated"));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScanPolarization {
    Mode(PolarizationMode),
    Summed,
}

impl fmt::Display for ScanPolarization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScanPolarization::Mode(m) => write!(f, "{m}"),
            ScanPolarization::Summed => write!(f, "summed"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScanPoint {
    pub photon: PhotonKinematics,
    pub result: Result<RadiationResult>,
    /// Evaluated at the packet mean momentum; `None` if that point is closed.
    pub applicability: Option<ApplicabilityReport>,
}

#[derive(Debug, Clone)]
pub struct DetectorScan {
    pub polarization: ScanPolarization,
    pub points: Vec<ScanPoint>,
}

/// Evaluates one detector point.
pub fn evaluate_point(
    packet: &WavePacket,
    photon: &PhotonKinematics,
    pol: ScanPolarization,
    params: &ParticleParams,
    opts: &ProbabilityOptions,
) -> Result<RadiationResult> {
    match pol {
        ScanPolarization::Mode(mode) => probability(packet, photon, &build_polarization(photon, mode)?, params, opts),
        ScanPolarization::Summed => probability_polarization_summed(packet, photon, params, opts),
    }
}

/// Per-point probabilities over the grid, evaluated in parallel and returned
/// in grid order. Point failures are recorded, never fatal.
pub fn scan(
    packet: &WavePacket,
    grid: &DetectorGrid,
    pol: ScanPolarization,
    params: &ParticleParams,
    opts: &ProbabilityOptions,
    ctx: &ApplicabilityContext,
) -> DetectorScan {
    let mean = packet.mean_momentum();
    let points = grid
        .points()
        .into_par_iter()
        .map(|photon| {
            let result = evaluate_point(packet, &photon, pol, params, opts);
            let applicability = solve_final_momentum(&mean, &photon, params.mass()).ok().map(|sk| applicability(&sk, ctx));
            ScanPoint { photon, result, applicability }
        })
        .collect();
    DetectorScan { polarization: pol, points }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavepackets::{GaussianSuperposition, TwistedPacket, TwistedSpin};
    use proptest::prelude::*;

    fn point(g: f64, ang: f64, az: f64, chi: f64, th: f64, ph: f64) -> Option<(Vec3, PhotonKinematics)> {
        let p = (g * g - 1.0).sqrt();
        let pv = Vec3::new(p * ang.sin() * az.cos(), p * ang.sin() * az.sin(), -p * ang.cos());
        let k0 = chi * pv[2] * pv[2] / g;
        let photon = PhotonKinematics::new(k0, th, ph).ok()?;
        solve_final_momentum(&pv, &photon, 1.0).ok()?;
        Some((pv, photon))
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn zero_couplings_vanish() {
        let (p, ph) = point(2.0, 0.2, 0.1, 0.01, 0.5, 0.3).unwrap();
        let params = ParticleParams::from_couplings(1.0, 0.0, 0.0).unwrap();
        let pol = build_polarization(&ph, PolarizationMode::Helicity(1)).unwrap();
        assert_eq!(integrand_general(&p, &ph, &pol, &params, &Vec3::z()).unwrap().total(), 0.0);
        assert_eq!(integrand_contracted(&p, &ph, &pol, &params, &Vec3::z()).unwrap().total(), 0.0);
    }

    #[test]
    fn reflected_sum_identity() {
        let (p, ph) = point(3.0, 0.3, 0.5, 0.05, 0.7, 1.0).unwrap();
        let sk = solve_final_momentum(&p, &ph, 1.0).unwrap();
        let s: f64 = [1.0f64, -1.0].iter().map(|&r| r / (sk.q3 - r * sk.k[2])).sum();
        assert!(rel(s, -2.0 * sk.k[2] / sk.q2) < 1e-12);
    }

    #[test]
    fn pure_transverse_polarization_reduces_to_simple_bracket() {
        let (p, ph) = point(1.7, 0.4, 1.2, 0.03, 0.8, 0.2).unwrap();
        let params = ParticleParams::from_couplings(1.0, 0.6, 0.35).unwrap();
        let pol = build_polarization(&ph, PolarizationMode::LinearOrthogonal).unwrap();
        assert_eq!(pol.f3(), 0.0);
        let v = integrand_contracted(&p, &ph, &pol, &params, &Vec3::x()).unwrap().total();
        let sk = solve_final_momentum(&p, &ph, 1.0).unwrap();
        let (e, mu, m) = (0.6, 0.35, 1.0);
        let pf = cdot(&pol.f, &p).re;
        let k3 = sk.k[2];
        let expect = (4.0 * (e * e - sk.q2 * mu * mu) * pf * pf - sk.q2 * (e + 2.0 * m * mu).powi(2)) * k3 * k3
            / (sk.q2 * sk.q2)
            / (16.0 * PI.powi(3) * sk.k0 * (sk.p_out[2] * sk.p[2]).abs());
        assert!(rel(v, expect) < 1e-12);
    }

    #[test]
    fn summed_bracket_matches_two_linear_modes_at_normal_incidence() {
        let params = ParticleParams::from_couplings(1.0, 0.3, 0.5).unwrap();
        for th in [0.2, 0.9, 1.4] {
            let ph = PhotonKinematics::new(0.2, th, 0.3).unwrap();
            let p = Vec3::new(0.0, 0.0, -2.0);
            let a =
                integrand_contracted(&p, &ph, &build_polarization(&ph, PolarizationMode::LinearInPlane).unwrap(), &params, &Vec3::zeros())
                    .unwrap();
            let b = integrand_contracted(
                &p,
                &ph,
                &build_polarization(&ph, PolarizationMode::LinearOrthogonal).unwrap(),
                &params,
                &Vec3::zeros(),
            )
            .unwrap();
            let s = integrand_summed_normal(&p, &ph, &params).unwrap();
            assert!(rel(a.total() + b.total(), s.total()) < 1e-12);
            assert!(rel(a.e2 + b.e2, s.e2) < 1e-12);
            assert!(rel(a.mu2 + b.mu2, s.mu2) < 1e-12);
        }
    }

    #[test]
    fn closed_form_names() {
        for f in ClosedForm::ALL {
            assert_eq!(f.name().parse::<ClosedForm>().unwrap(), f);
        }
        assert!(matches!("Nope".parse::<ClosedForm>(), Err(Error::UnknownForm(_))));
    }

    #[test]
    fn neutron_inplane_leading_is_isotropic() {
        let params = ParticleParams::neutron();
        for th in [0.0, 0.5, 1.3] {
            let args = ClosedFormArgs {
                params,
                photon: PhotonKinematics::new(1.0, th, 0.0).unwrap(),
                momentum: 5e6,
                l: 3,
                sigma_perp: 0.0,
                sigma3: 0.0,
            };
            let r = closed_form(ClosedForm::TwistedNInplane, &args).unwrap();
            assert!(rel(r.value * 4.0 * PI.powi(3), params.mu_a().powi(2)) < 1e-14);
        }
    }

    #[test]
    fn charged_ortho_twisted_vanishes_without_width() {
        let args = ClosedFormArgs {
            params: ParticleParams::electron(),
            photon: PhotonKinematics::new(1.0, 0.4, 0.0).unwrap(),
            momentum: 1e5,
            l: 10,
            sigma_perp: 0.0,
            sigma3: 0.0,
        };
        assert_eq!(closed_form(ClosedForm::TwistedEOrtho, &args).unwrap().value, 0.0);
        let wide = ClosedFormArgs { sigma_perp: 20.0, ..args };
        let r = closed_form(ClosedForm::TwistedEOrtho, &wide).unwrap();
        let m = ParticleParams::electron().mass();
        let d = m * m + (0.4f64.sin() * 1e5).powi(2);
        let expect =
            ParticleParams::electron().charge().powi(2) * 1e10 * 11.0 * 400.0 * 0.4f64.cos().powi(2) / (d * d) / (4.0 * PI.powi(3));
        assert!(rel(r.value, expect) < 1e-12);
    }

    #[test]
    fn ortho_closed_form_scales_as_inverse_k0() {
        let params = ParticleParams::electron();
        let mk = |k0: f64| ClosedFormArgs {
            params,
            photon: PhotonKinematics::new(k0, 0.6, 0.0).unwrap(),
            momentum: 3e4,
            l: 0,
            sigma_perp: 0.0,
            sigma3: 0.0,
        };
        let a = closed_form(ClosedForm::OrthoPolNormal, &mk(1.0)).unwrap().value;
        let b = closed_form(ClosedForm::OrthoPolNormal, &mk(4.0)).unwrap().value;
        assert!(rel(a, 4.0 * b) < 1e-14);
    }

    #[test]
    fn neutral_leading_sum_is_summed_small_recoil() {
        let params = ParticleParams::neutron();
        let ph = PhotonKinematics::new(0.01, 0.7, 0.0).unwrap();
        let args = ClosedFormArgs { params, photon: ph, momentum: 3e6, l: 2, sigma_perp: 0.0, sigma3: 0.0 };
        let a = closed_form(ClosedForm::TwistedNInplane, &args).unwrap().value;
        let b = closed_form(ClosedForm::TwistedNOrtho, &args).unwrap().value;
        let s = closed_form(ClosedForm::SummedPolSmallRecoil, &args).unwrap().value;
        assert!(rel(a + b, s) < 1e-12);
    }

    #[test]
    fn warnings_flag_regimes() {
        let args = ClosedFormArgs {
            params: ParticleParams::electron(),
            photon: PhotonKinematics::new(1e4, 0.4, 0.0).unwrap(),
            momentum: 3e4,
            l: 10,
            sigma_perp: 3e5,
            sigma3: 1e4,
        };
        let r = closed_form(ClosedForm::TwistedEInplane, &args).unwrap();
        assert!(r.warnings.len() >= 3, "{:?}", r.warnings);
    }

    #[test]
    fn estimate_threshold_closed_form() {
        let params = ParticleParams::electron();
        let sp = units::momentum_spread_from_size(10.0);
        let t = twisted_dominance_threshold(&params, 10, sp, 1.0, 0.0).unwrap();
        let m = params.mass();
        let c = 11.0 * sp * sp / (m * m);
        assert!(rel(t.momentum, (10.0f64 / c).sqrt()) < 1e-12);
        assert!(twisted_dominance_threshold(&params, 10, sp, 100.0, 0.5).is_none());
    }

    #[test]
    fn grid_validation() {
        assert!(DetectorGrid::new(vec![1.0], vec![PI / 2.0], vec![0.0], None).is_err());
        assert!(DetectorGrid::new(vec![0.0], vec![0.1], vec![0.0], None).is_err());
        let g = DetectorGrid::new(vec![1.0, 2.0], vec![0.1, 0.2, 0.3], vec![0.0], None).unwrap();
        let pts = g.points();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1].theta(), 0.2);
        assert_eq!(pts[3].k0(), 2.0);
    }

    #[test]
    fn single_point_scan_equals_probability() {
        let params = ParticleParams::electron();
        let pz = units::momentum_from_kinetic(params.mass(), 1e4);
        let g = GaussianSuperposition::single(Vec3::new(0.0, 0.0, -pz), Vec3::new(1.0, 1.0, 10.0), Vec3::zeros()).unwrap();
        let packet = WavePacket::Gaussian(g);
        let grid = DetectorGrid::new(vec![1.0], vec![0.5], vec![0.2], None).unwrap();
        let opts = ProbabilityOptions::default();
        let s = scan(&packet, &grid, ScanPolarization::Mode(PolarizationMode::LinearInPlane), &params, &opts, &Default::default());
        let ph = PhotonKinematics::new(1.0, 0.5, 0.2).unwrap();
        let pol = build_polarization(&ph, PolarizationMode::LinearInPlane).unwrap();
        let d = probability(&packet, &ph, &pol, &params, &opts).unwrap();
        assert_eq!(s.points[0].result.as_ref().unwrap().value.to_bits(), d.value.to_bits());
        assert!(s.points[0].applicability.is_some());
    }

    #[test]
    fn closed_channel_on_support() {
        let params = ParticleParams::electron();
        let pz = units::momentum_from_kinetic(params.mass(), 10.0);
        let g = GaussianSuperposition::single(Vec3::new(0.0, 0.0, -pz), Vec3::new(1.0, 1.0, 10.0), Vec3::zeros()).unwrap();
        let ph = PhotonKinematics::new(10.0, 0.3, 0.0).unwrap();
        let pol = build_polarization(&ph, PolarizationMode::LinearInPlane).unwrap();
        let r = probability(&WavePacket::Gaussian(g), &ph, &pol, &params, &ProbabilityOptions::default());
        assert!(matches!(r, Err(Error::ChannelClosedOnSupport { .. })));
    }

    #[test]
    fn twisted_natural_spin_is_polarization_blind_for_charge() {
        // the twisted packet closed form holds for any polarization when the
        // spin is unpolarized; helicities agree with each other
        let params = ParticleParams::electron();
        let t = TwistedPacket::new(-3e5, 30.0, 20.0, 3, TwistedSpin::Natural).unwrap();
        let packet = WavePacket::Twisted(t);
        let ph = PhotonKinematics::new(1.0, 0.4, 0.0).unwrap();
        let opts = ProbabilityOptions::default().with_rtol(1e-8);
        let a = probability(&packet, &ph, &build_polarization(&ph, PolarizationMode::Helicity(1)).unwrap(), &params, &opts).unwrap();
        let b = probability(&packet, &ph, &build_polarization(&ph, PolarizationMode::Helicity(-1)).unwrap(), &params, &opts).unwrap();
        assert!(rel(a.value, b.value) < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn three_routes_agree(g in 1.0005f64..50.0, ang in 0.0f64..1.2, az in 0.0f64..std::f64::consts::TAU, lchi in -4.0f64..-0.3,
                              th in 0.0f64..1.5, ph in 0.0f64..std::f64::consts::TAU, e in -1.0f64..1.0, mu in -1.0f64..1.0,
                              za in 0.0f64..std::f64::consts::PI, zb in 0.0f64..std::f64::consts::TAU, zr in 0.0f64..1.0, mode in 0usize..4) {
            let Some((p, photon)) = point(g, ang, az, 10f64.powf(lchi), th, ph) else { return Ok(()) };
            let params = ParticleParams::from_couplings(1.0, e, mu).unwrap();
            let zeta = Vec3::new(za.sin() * zb.cos(), za.sin() * zb.sin(), za.cos()) * zr;
            let m = [PolarizationMode::Helicity(1), PolarizationMode::Helicity(-1), PolarizationMode::LinearInPlane, PolarizationMode::LinearOrthogonal][mode];
            let pol = build_polarization(&photon, m).unwrap();
            let a = integrand_general(&p, &photon, &pol, &params, &zeta).unwrap();
            let b = integrand_contracted(&p, &photon, &pol, &params, &zeta).unwrap();
            let c = integrand_brute_force(&p, &photon, &pol, &params, &zeta).unwrap();
            prop_assert!(a.total() >= 0.0 && b.total() >= 0.0);
            prop_assert!(rel(a.total(), b.total()) < 1e-10, "general {} fast {}", a.total(), b.total());
            prop_assert!(rel(a.total(), c) < 1e-10, "general {} brute {}", a.total(), c);
        }

        #[test]
        fn spin_decouples_for_real_polarization(g in 1.01f64..20.0, ang in 0.0f64..1.0, lchi in -3.0f64..-0.5,
                                                th in 0.0f64..1.5, za in 0.0f64..std::f64::consts::PI, zb in 0.0f64..std::f64::consts::TAU) {
            let Some((p, photon)) = point(g, ang, 0.4, 10f64.powf(lchi), th, 1.1) else { return Ok(()) };
            let params = ParticleParams::from_couplings(1.0, 0.5, 0.3).unwrap();
            let zeta = Vec3::new(za.sin() * zb.cos(), za.sin() * zb.sin(), za.cos());
            for m in [PolarizationMode::LinearInPlane, PolarizationMode::LinearOrthogonal] {
                let pol = build_polarization(&photon, m).unwrap();
                let a = integrand_contracted(&p, &photon, &pol, &params, &zeta).unwrap().total();
                let b = integrand_contracted(&p, &photon, &pol, &params, &(-zeta)).unwrap().total();
                prop_assert_eq!(a, b);
            }
        }
    }
}
