//! Particle couplings, photon kinematics and polarization, the outgoing
//! momentum on the physical mirror branch, recoil approximants and the
//! applicability estimates.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::units;
use crate::{CVec3, Error, FourVector, Result, Vec3};

/// "≪" and "≫" are read as a factor of ten throughout.
pub const DOMINANCE_FACTOR: f64 = 10.0;
/// χ below this is "small recoil"; up to 1 is "moderate".
pub const SMALL_RECOIL: f64 = 0.1;
/// Default upper cutoff for scans; grazing emission is excluded.
pub const THETA_MAX_DEFAULT: f64 = PI / 2.0 - 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleParams {
    mass: f64,
    charge: f64,
    mu_a: f64,
    anomaly: Option<f64>,
}

impl ParticleParams {
    /// Charged particle; μ_a is derived from the anomaly as a·e/(2m).
    pub fn charged(mass: f64, charge: f64, anomaly: f64) -> Result<Self> {
        check_mass(mass)?;
        if !charge.is_finite() || !anomaly.is_finite() {
            return Err(Error::invalid("charge and anomaly must be finite"));
        }
        Ok(Self { mass, charge, mu_a: anomaly * charge / (2.0 * mass), anomaly: Some(anomaly) })
    }

    /// Neutral particle coupling only through its anomalous moment.
    pub fn neutral(mass: f64, mu_a: f64) -> Result<Self> {
        check_mass(mass)?;
        if !mu_a.is_finite() {
            return Err(Error::invalid("anomalous moment must be finite"));
        }
        Ok(Self { mass, charge: 0.0, mu_a, anomaly: None })
    }

    /// Arbitrary (e, μ_a) pair. For e ≠ 0 the anomaly is inferred.
    pub fn from_couplings(mass: f64, charge: f64, mu_a: f64) -> Result<Self> {
        check_mass(mass)?;
        if !charge.is_finite() || !mu_a.is_finite() {
            return Err(Error::invalid("couplings must be finite"));
        }
        let anomaly = (charge != 0.0).then(|| 2.0 * mass * mu_a / charge);
        Ok(Self { mass, charge, mu_a, anomaly })
    }

    pub fn electron() -> Self {
        Self::charged(units::ELECTRON_MASS_EV, units::elementary_charge(), units::ELECTRON_ANOMALY).expect("electron constants are valid")
    }

    pub fn neutron() -> Self {
        let mu_n = units::elementary_charge() / (2.0 * units::PROTON_MASS_EV);
        Self::neutral(units::NEUTRON_MASS_EV, units::NEUTRON_MOMENT_NUCLEAR_MAGNETONS * mu_n).expect("neutron constants are valid")
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }
    pub fn charge(&self) -> f64 {
        self.charge
    }
    pub fn mu_a(&self) -> f64 {
        self.mu_a
    }
    pub fn anomaly(&self) -> Option<f64> {
        self.anomaly
    }

    pub fn with_couplings(&self, charge: f64, mu_a: f64) -> Self {
        Self::from_couplings(self.mass, charge, mu_a).expect("mass already validated")
    }
}

fn check_mass(mass: f64) -> Result<()> {
    if mass.is_finite() && mass > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("mass must be positive, got {mass}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotonKinematics {
    k0: f64,
    theta: f64,
    phi: f64,
}

impl PhotonKinematics {
    pub fn new(k0: f64, theta: f64, phi: f64) -> Result<Self> {
        if !(k0.is_finite() && k0 > 0.0) {
            return Err(Error::invalid(format!("photon energy must be positive, got {k0}")));
        }
        if !(theta.is_finite() && (0.0..PI / 2.0).contains(&theta)) {
            return Err(Error::invalid(format!("polar angle must lie in [0, π/2), got {theta}")));
        }
        if !phi.is_finite() {
            return Err(Error::invalid("azimuth must be finite"));
        }
        Ok(Self { k0, theta, phi: phi.rem_euclid(2.0 * PI) })
    }

    pub fn k0(&self) -> f64 {
        self.k0
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn n(&self) -> Vec3 {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        Vec3::new(st * cp, st * sp, ct)
    }
    pub fn n_perp(&self) -> f64 {
        self.theta.sin()
    }
    pub fn n3(&self) -> f64 {
        self.theta.cos()
    }
    pub fn k(&self) -> Vec3 {
        self.n() * self.k0
    }
    pub fn with_k0(&self, k0: f64) -> Result<Self> {
        Self::new(k0, self.theta, self.phi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolarizationMode {
    Helicity(i8),
    LinearInPlane,
    LinearOrthogonal,
    Custom([Complex64; 3]),
}

impl std::fmt::Display for PolarizationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolarizationMode::Helicity(l) if *l > 0 => write!(f, "helicity+"),
            PolarizationMode::Helicity(_) => write!(f, "helicity-"),
            PolarizationMode::LinearInPlane => write!(f, "in-plane"),
            PolarizationMode::LinearOrthogonal => write!(f, "orthogonal"),
            PolarizationMode::Custom(_) => write!(f, "custom"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarizationBasis {
    pub mode: PolarizationMode,
    pub f: CVec3,
    /// Index 0 is r = +1, index 1 is r = −1.
    pub reflected: [CVec3; 2],
}

impl PolarizationBasis {
    pub fn f_r(&self, r: i8) -> &CVec3 {
        if r > 0 {
            &self.reflected[0]
        } else {
            &self.reflected[1]
        }
    }

    /// f3 under the real-f3 phase convention.
    pub fn f3(&self) -> f64 {
        self.f[2].re
    }

    pub fn is_real(&self) -> bool {
        self.f.iter().all(|c| c.im == 0.0)
    }
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Resolves the polarization vector for `mode`. Custom vectors are projected
/// transverse to n, normalized and rephased so that f3 is real.
pub fn build_polarization(photon: &PhotonKinematics, mode: PolarizationMode) -> Result<PolarizationBasis> {
    let (st, ct) = photon.theta.sin_cos();
    let (sp, cp) = photon.phi.sin_cos();
    let f = match mode {
        PolarizationMode::Helicity(l) => {
            if l != 1 && l != -1 {
                return Err(Error::invalid(format!("helicity must be ±1, got {l}")));
            }
            let l = l as f64;
            CVec3::new(c(cp * ct, -l * sp), c(sp * ct, l * cp), c(-st, 0.0)) / c(2f64.sqrt(), 0.0)
        }
        PolarizationMode::LinearInPlane => CVec3::new(c(ct * cp, 0.0), c(ct * sp, 0.0), c(-st, 0.0)),
        PolarizationMode::LinearOrthogonal => CVec3::new(c(-sp, 0.0), c(cp, 0.0), c(0.0, 0.0)),
        PolarizationMode::Custom(v) => {
            let n = photon.n();
            let mut f = CVec3::new(v[0], v[1], v[2]);
            let fn_ = f[0] * n[0] + f[1] * n[1] + f[2] * n[2];
            f -= n.map(|x| c(x, 0.0)) * fn_;
            let norm = f.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if !(norm > 1e-12) {
                return Err(Error::invalid("custom polarization has no component transverse to n"));
            }
            f /= c(norm, 0.0);
            if f[2].norm() > 0.0 {
                let phase = Complex64::from_polar(1.0, -f[2].arg());
                f *= phase;
                f[2] = c(f[2].re, 0.0);
            }
            f
        }
    };
    let reflect = |r: f64| {
        let mut fr = f * c(r, 0.0);
        fr[2] += f[2] * (1.0 - r);
        fr
    };
    Ok(PolarizationBasis { mode, f, reflected: [reflect(1.0), reflect(-1.0)] })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecoilRegime {
    Small,
    Moderate,
    Large,
}

impl RecoilRegime {
    pub fn classify(chi: f64) -> Self {
        if chi < SMALL_RECOIL {
            RecoilRegime::Small
        } else if chi < 1.0 {
            RecoilRegime::Moderate
        } else {
            RecoilRegime::Large
        }
    }
}

/// Exact kinematics of one emission event on the mirror branch where the
/// outgoing particle keeps moving towards the mirror (p3' < 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatteringKinematics {
    pub mass: f64,
    pub p: Vec3,
    pub p0: f64,
    pub k: Vec3,
    pub k0: f64,
    pub p_out: Vec3,
    pub p0_out: f64,
    /// Contravariant q^3 = p^3 − p'^3.
    pub q3: f64,
    /// q² = k3² − q3² (< 0).
    pub q2: f64,
}

impl ScatteringKinematics {
    /// q^μ = (k0, k⊥, q3).
    pub fn q(&self) -> FourVector {
        [self.k0, self.k[0], self.k[1], self.q3]
    }
    pub fn p4(&self) -> FourVector {
        [self.p0, self.p[0], self.p[1], self.p[2]]
    }
    pub fn p_out4(&self) -> FourVector {
        [self.p0_out, self.p_out[0], self.p_out[1], self.p_out[2]]
    }
    pub fn gamma(&self) -> f64 {
        self.p0 / self.mass
    }
    pub fn beta(&self) -> Vec3 {
        self.p / self.p0
    }
    pub fn beta3(&self) -> f64 {
        self.p[2] / self.p0
    }
    pub fn k3(&self) -> f64 {
        self.k[2]
    }
    /// χ = k0/(p3 β3).
    pub fn chi(&self) -> f64 {
        self.k0 / (self.p[2] * self.beta3())
    }
    pub fn recoil_regime(&self) -> RecoilRegime {
        RecoilRegime::classify(self.chi())
    }
    /// Propagator denominator p'_3 − p_3 + r k_3 in covariant components,
    /// equal to q^3 − r k^3 contravariantly; always negative.
    pub fn denominator(&self, r: i8) -> f64 {
        self.q3 - r as f64 * self.k[2]
    }

    /// q² evaluated as 2(m² − p·p') with compensated products, for
    /// cross-checking [`Self::q2`].
    pub fn q2_four_product(&self) -> f64 {
        // m² − p·p' = p·q; the products are formed with fma so that only the
        // conditioning of the inputs limits the result.
        let q = self.q();
        let p = self.p4();
        let terms = [p[0] * q[0], -p[1] * q[1], -p[2] * q[2], -p[3] * q[3]];
        let errs = [
            p[0].mul_add(q[0], -terms[0]),
            (-p[1]).mul_add(q[1], -terms[1]),
            (-p[2]).mul_add(q[2], -terms[2]),
            (-p[3]).mul_add(q[3], -terms[3]),
        ];
        let (mut s, mut comp) = (0.0f64, 0.0f64);
        for t in terms.iter().chain(errs.iter()) {
            let y = s + t;
            let bp = y - s;
            comp += (s - (y - bp)) + (t - bp);
            s = y;
        }
        2.0 * (s + comp)
    }

    /// The p3' > 0 root (mirror-image scattering). Diagnostic only; never
    /// enters a probability.
    pub fn sigma_plus_p3(&self) -> f64 {
        -self.p_out[2]
    }
}

/// Solves energy and transverse-momentum conservation for the outgoing
/// particle on the p3' < 0 branch.
pub fn solve_final_momentum(p: &Vec3, photon: &PhotonKinematics, m: f64) -> Result<ScatteringKinematics> {
    if !(p[2] < 0.0) {
        return Err(Error::invalid(format!("incident p3 must be negative, got {}", p[2])));
    }
    let k0 = photon.k0();
    let k = photon.k();
    let p0 = (m * m + p.norm_squared()).sqrt();
    let p0_out = p0 - k0;
    if p0_out <= m {
        return Err(Error::ChannelClosed { k0, reason: "photon energy exceeds the kinetic energy" });
    }
    // p3² − p3'² = 2k0p0 − 2k⊥·p⊥ − k3², kept separate so q3 avoids cancellation
    let s = 2.0 * k0 * p0 - 2.0 * (k[0] * p[0] + k[1] * p[1]) - k[2] * k[2];
    let radicand = p[2] * p[2] - s;
    if !(radicand > 0.0) {
        return Err(Error::ChannelClosed { k0, reason: "no real longitudinal momentum in the final state" });
    }
    let p3_out = -radicand.sqrt();
    let q3 = s / (p[2] + p3_out);
    let q2 = (k[2] - q3) * (k[2] + q3);
    let p_out = Vec3::new(p[0] - k[0], p[1] - k[1], p3_out);
    Ok(ScatteringKinematics { mass: m, p: *p, p0, k, k0, p_out, p0_out, q3, q2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApproximationRegime {
    /// First order in the recoil, arbitrary velocity.
    SmallRecoil,
    Nonrelativistic,
    Ultrarelativistic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoilApprox {
    pub q3: f64,
    /// q3 − r k3 for r = +1 (index 0) and r = −1 (index 1).
    pub q3_minus_rk3: [f64; 2],
    pub q2: f64,
}

/// Small-recoil approximants of q3, q3 − r k3 and q², in the sign
/// conventions of [`ScatteringKinematics`].
pub fn recoil_approximations(sk: &ScatteringKinematics, regime: ApproximationRegime) -> Result<RecoilApprox> {
    let chi = sk.chi();
    if !(chi < 1.0) {
        return Err(Error::RegimeViolation(format!("recoil approximation needs χ < 1, got χ = {chi:.3e}")));
    }
    let k0 = sk.k0;
    let n = sk.k / k0;
    let beta = sk.beta();
    let b3 = beta[2];
    let bn = beta[0] * n[0] + beta[1] * n[1];
    Ok(match regime {
        ApproximationRegime::SmallRecoil => {
            let q3 = k0 * (1.0 - bn) / b3;
            RecoilApprox {
                q3,
                q3_minus_rk3: [q3 - sk.k[2], q3 + sk.k[2]],
                q2: -k0 * k0 * ((1.0 - bn).powi(2) - b3 * b3 * n[2] * n[2]) / (b3 * b3),
            }
        }
        ApproximationRegime::Nonrelativistic => {
            let q3 = k0 / b3;
            RecoilApprox { q3, q3_minus_rk3: [q3, q3], q2: -k0 * k0 / (b3 * b3) }
        }
        ApproximationRegime::Ultrarelativistic => {
            let g = sk.gamma();
            let d2 = (beta[0] - n[0]).powi(2) + (beta[1] - n[1]).powi(2);
            let x = 1.0 + d2 * g * g;
            RecoilApprox { q3: -k0, q3_minus_rk3: [-2.0 * k0, -k0 * x / (2.0 * g * g)], q2: -k0 * k0 * x / (g * g) }
        }
    })
}

/// Experimental scales supplied by the user. Any may be absent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ApplicabilityContext {
    pub plate_size: Option<f64>,
    pub interaction_time: Option<f64>,
    pub layer_thickness: Option<f64>,
    /// Longitudinal and transverse momentum scales of the packet.
    pub packet_p3_scale: Option<f64>,
    pub packet_pperp_scale: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApplicabilityReport {
    /// Formation lengths for r = +1 and r = −1.
    pub formation_length: [f64; 2],
    pub chi: f64,
    pub recoil_regime: RecoilRegime,
    pub recoil_small: bool,
    pub channel_open: bool,
    /// Whether δ ≫ 1/(2|p3|); `None` without a layer thickness.
    pub branch_sigma_plus_suppressed: Option<bool>,
    /// Upper bound on the angular packet spread Δθ², −q²/p3² at small recoil.
    pub packet_angle_bound: f64,
    pub time_covers_formation: Option<bool>,
    pub time_resolves_packet: Option<bool>,
    pub plate_resolves_packet: Option<bool>,
    pub sharp_boundary: Option<bool>,
}

impl ApplicabilityReport {
    pub fn max_formation_length(&self) -> f64 {
        self.formation_length[0].max(self.formation_length[1])
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !self.channel_open {
            w.push("channel closed".to_string());
        }
        match self.recoil_regime {
            RecoilRegime::Small => {}
            RecoilRegime::Moderate => w.push(format!("moderate recoil χ = {:.3e}", self.chi)),
            RecoilRegime::Large => w.push(format!("large recoil χ = {:.3e}", self.chi)),
        }
        let checks = [
            (self.time_covers_formation, "T|β3| ≫ ℓ_z fails"),
            (self.time_resolves_packet, "T|β3|p3 ≳ 1 fails"),
            (self.plate_resolves_packet, "L⊥p⊥ ≳ 1 fails"),
            (self.sharp_boundary, "δ ≪ ℓ_z fails"),
        ];
        for (flag, msg) in checks {
            if flag == Some(false) {
                w.push(msg.to_string());
            }
        }
        w
    }
}

/// Advisory applicability estimates at one kinematic point.
pub fn applicability(sk: &ScatteringKinematics, ctx: &ApplicabilityContext) -> ApplicabilityReport {
    let n = sk.k / sk.k0;
    let beta = sk.beta();
    let b3 = beta[2].abs();
    let bn = beta[0] * n[0] + beta[1] * n[1];
    let ell = |r: f64| b3 / (sk.k0 * (1.0 - bn + r * n[2]));
    let formation_length = [ell(1.0), ell(-1.0)];
    let lz = formation_length[0].max(formation_length[1]);
    let chi = sk.chi();
    let q2_small = -sk.k0 * sk.k0 * ((1.0 - bn).powi(2) - beta[2] * beta[2] * n[2] * n[2]) / (beta[2] * beta[2]);
    let f = DOMINANCE_FACTOR;
    ApplicabilityReport {
        formation_length,
        chi,
        recoil_regime: RecoilRegime::classify(chi),
        recoil_small: chi < SMALL_RECOIL,
        channel_open: sk.p0_out > sk.mass,
        branch_sigma_plus_suppressed: ctx.layer_thickness.map(|d| d >= f / (2.0 * sk.p[2].abs())),
        packet_angle_bound: -q2_small / (sk.p[2] * sk.p[2]),
        time_covers_formation: ctx.interaction_time.map(|t| t * b3 >= f * lz),
        time_resolves_packet: ctx.interaction_time.zip(ctx.packet_p3_scale).map(|(t, p3)| t * b3 * p3 >= 1.0),
        plate_resolves_packet: ctx.plate_size.zip(ctx.packet_pperp_scale).map(|(l, pp)| l * pp >= 1.0),
        sharp_boundary: ctx.layer_thickness.map(|d| d * f <= lz),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dot(a: &CVec3, b: &Vec3) -> Complex64 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    #[test]
    fn helicity_at_normal_direction() {
        let ph = PhotonKinematics::new(1.0, 0.0, 0.0).unwrap();
        let b = build_polarization(&ph, PolarizationMode::Helicity(1)).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((b.f[0] - c(s, 0.0)).norm() < 1e-15);
        assert!((b.f[1] - c(0.0, s)).norm() < 1e-15);
        assert_eq!(b.f[2], c(0.0, 0.0));
    }

    #[test]
    fn orthogonal_vector_at_zero_azimuth() {
        let ph = PhotonKinematics::new(1.0, PI / 3.0, 0.0).unwrap();
        let b = build_polarization(&ph, PolarizationMode::LinearOrthogonal).unwrap();
        assert_eq!(b.f, CVec3::new(c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)));
        assert!(b.is_real());
    }

    #[test]
    fn custom_vector_is_rephased_and_transverse() {
        let ph = PhotonKinematics::new(1.0, 0.7, 1.1).unwrap();
        let raw = [c(0.3, 0.2), c(-0.1, 0.9), c(0.5, -0.4)];
        let b = build_polarization(&ph, PolarizationMode::Custom(raw)).unwrap();
        assert_eq!(b.f[2].im, 0.0);
        assert!(dot(&b.f, &ph.n()).norm() < 1e-14);
        assert!((b.f.iter().map(|z| z.norm_sqr()).sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn polarization_completeness() {
        for &(t, p) in &[(0.0, 0.0), (0.4, 1.0), (1.3, 4.0)] {
            let ph = PhotonKinematics::new(2.0, t, p).unwrap();
            let s: f64 = [PolarizationMode::Helicity(1), PolarizationMode::Helicity(-1)]
                .iter()
                .map(|&m| build_polarization(&ph, m).unwrap().f[2].norm_sqr())
                .sum();
            assert!((s - ph.n_perp().powi(2)).abs() < 1e-15);
        }
    }

    #[test]
    fn solve_example_point() {
        let ph = PhotonKinematics::new(0.1, PI / 4.0, 0.0).unwrap();
        let sk = solve_final_momentum(&Vec3::new(0.0, 0.0, -10.0), &ph, 1.0).unwrap();
        let p0 = 101f64.sqrt();
        let k3 = 0.1 * (PI / 4.0).cos();
        let expect = -(100.0 - 2.0 * 0.1 * p0 + k3 * k3).sqrt();
        assert!((sk.p_out[2] - expect).abs() < 1e-12);
        let shell = sk.p0_out.powi(2) - sk.p_out.norm_squared();
        assert!((shell - 1.0).abs() < 1e-12);
        assert!(sk.q2 < 0.0);
    }

    #[test]
    fn closed_channel() {
        let ph = PhotonKinematics::new(1.0, 0.0, 0.0).unwrap();
        let err = solve_final_momentum(&Vec3::new(0.0, 0.0, -1.001), &ph, 1.0).unwrap_err();
        assert!(matches!(err, Error::ChannelClosed { .. }));
    }

    #[test]
    fn no_emission_limit() {
        let ph = PhotonKinematics::new(1e-12, 0.3, 0.2).unwrap();
        let p = Vec3::new(0.1, 0.0, -2.0);
        let sk = solve_final_momentum(&p, &ph, 1.0).unwrap();
        assert!((sk.p_out - p).norm() < 1e-10);
        assert!(sk.q3.abs() < 1e-10);
    }

    #[test]
    fn rejects_positive_p3() {
        let ph = PhotonKinematics::new(0.1, 0.3, 0.2).unwrap();
        assert!(solve_final_momentum(&Vec3::new(0.0, 0.0, 1.0), &ph, 1.0).is_err());
    }

    #[test]
    fn small_recoil_normal_incidence() {
        let ph = PhotonKinematics::new(0.01, PI / 6.0, 0.0).unwrap();
        let sk = solve_final_momentum(&Vec3::new(0.0, 0.0, -10.0), &ph, 1.0).unwrap();
        let a = recoil_approximations(&sk, ApproximationRegime::SmallRecoil).unwrap();
        assert!((a.q3 - 0.01 / sk.beta3()).abs() < 1e-15);
        // the neglected terms are χ·(1 + O(χ)) relative
        assert!((a.q2 - sk.q2).abs() / sk.q2.abs() < 1.01 * sk.chi());
        let nr = recoil_approximations(&sk, ApproximationRegime::Nonrelativistic).unwrap();
        assert!((nr.q3 - a.q3).abs() < 1e-15);
    }

    #[test]
    fn ultrarelativistic_limit() {
        let m = 1.0;
        let g = 100.0;
        let p = Vec3::new(0.0, 0.0, -m * (g * g - 1.0f64).sqrt());
        let ph = PhotonKinematics::new(1e-4, 0.01f64.asin(), 0.0).unwrap();
        let sk = solve_final_momentum(&p, &ph, m).unwrap();
        let ur = recoil_approximations(&sk, ApproximationRegime::Ultrarelativistic).unwrap();
        let expect = -1e-8 * (1.0 + 1e-4 * g * g) / (g * g);
        assert!((ur.q2 / expect - 1.0).abs() < 1e-12);
        assert!((sk.q2 / expect - 1.0).abs() < 1e-3);
        assert!((ur.q3_minus_rk3[1] / sk.denominator(-1) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn regime_violation_for_large_recoil() {
        // grazing incidence: p3 small, so χ = k0 p0/p3² can exceed one
        let ph = PhotonKinematics::new(0.3, 1.3, 0.0).unwrap();
        let sk = solve_final_momentum(&Vec3::new(2.0, 0.0, -0.5), &ph, 1.0).unwrap();
        assert!(sk.chi() >= 1.0);
        assert!(matches!(recoil_approximations(&sk, ApproximationRegime::SmallRecoil), Err(Error::RegimeViolation(_))));
    }

    #[test]
    fn applicability_flags() {
        let m = 1.0;
        // χ = 0.5
        let p = Vec3::new(0.0, 0.0, -1.0);
        let b3 = 1.0 / 2f64.sqrt();
        let ph = PhotonKinematics::new(0.5 * b3, 0.0, 0.0).unwrap();
        let sk = solve_final_momentum(&p, &ph, m).unwrap();
        let ctx = ApplicabilityContext { layer_thickness: Some(0.0), ..Default::default() };
        let r = applicability(&sk, &ctx);
        assert!((r.chi - 0.5).abs() < 1e-12);
        assert!(!r.recoil_small);
        assert_eq!(r.sharp_boundary, Some(true));
        assert!(r.formation_length.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn packet_angle_bound_is_chi_squared_nonrelativistically() {
        let e = ParticleParams::electron();
        let pz = units::momentum_from_kinetic(e.mass(), 1e3);
        let ph = PhotonKinematics::new(1.0, 0.0, 0.0).unwrap();
        let sk = solve_final_momentum(&Vec3::new(0.0, 0.0, -pz), &ph, e.mass()).unwrap();
        let r = applicability(&sk, &ApplicabilityContext::default());
        let chi = sk.chi();
        let n3b3 = sk.beta3();
        assert!((r.packet_angle_bound / (chi * chi * (1.0 - n3b3 * n3b3)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn couplings() {
        let e = ParticleParams::electron();
        let a = e.anomaly().unwrap();
        assert!((e.mu_a() - a * e.charge() / (2.0 * e.mass())).abs() <= 1e-15 * e.mu_a().abs());
        let n = ParticleParams::neutron();
        assert_eq!(n.charge(), 0.0);
        assert!(n.mu_a() < 0.0);
        assert!(ParticleParams::charged(0.0, 1.0, 0.0).is_err());
    }

    fn valid_point() -> impl Strategy<Value = (Vec3, PhotonKinematics)> {
        (1.0005f64..50.0, 0.0f64..1.2, 0.0f64..std::f64::consts::TAU, 1e-4f64..0.5, 0.0f64..1.5, 0.0f64..std::f64::consts::TAU)
            .prop_filter_map("closed channel", |(g, ang, az, chi, th, ph)| {
                let p = (g * g - 1.0).sqrt();
                let pv = Vec3::new(p * ang.sin() * az.cos(), p * ang.sin() * az.sin(), -p * ang.cos());
                let k0 = chi * pv[2] * pv[2] / g;
                let photon = PhotonKinematics::new(k0, th, ph).ok()?;
                solve_final_momentum(&pv, &photon, 1.0).ok()?;
                Some((pv, photon))
            })
    }

    proptest! {
        #[test]
        fn conservation_and_denominators((p, ph) in valid_point()) {
            let sk = solve_final_momentum(&p, &ph, 1.0).unwrap();
            let ulp = |x: f64| x.abs() * f64::EPSILON;
            prop_assert!((sk.p0_out + sk.k0 - sk.p0).abs() <= ulp(sk.p0));
            for i in 0..2 {
                prop_assert!((sk.p_out[i] + sk.k[i] - p[i]).abs() <= ulp(p[i]).max(ulp(sk.k[i])));
            }
            prop_assert!(sk.q2 < 0.0);
            prop_assert!(sk.denominator(1) < 0.0);
            prop_assert!(sk.denominator(-1) < 0.0);
            let shell = sk.p0_out * sk.p0_out - sk.p_out.norm_squared();
            prop_assert!((shell - 1.0).abs() < 1e-9 * sk.p0 * sk.p0);
        }

        #[test]
        fn q2_routes_agree((p, ph) in valid_point()) {
            let sk = solve_final_momentum(&p, &ph, 1.0).unwrap();
            // The four-product route is ill-conditioned by the factor
            // p0 k0/|q²|; it must match to 1e-12 relative up to that
            // conditioning of its inputs.
            let cond = (sk.p0 * sk.k0 + sk.p[2].abs() * sk.q3.abs()) / sk.q2.abs();
            let tol = 1e-12_f64.max(4.0 * f64::EPSILON * cond);
            prop_assert!((sk.q2_four_product() / sk.q2 - 1.0).abs() < tol);
        }

        #[test]
        fn polarization_invariants(t in 0.0f64..1.5, p in 0.0f64..6.3, l in prop::bool::ANY) {
            let ph = PhotonKinematics::new(1.0, t, p).unwrap();
            let n = ph.n();
            prop_assert!((n.norm() - 1.0).abs() < 1e-15 && n[2] >= 0.0);
            for mode in [PolarizationMode::Helicity(if l { 1 } else { -1 }), PolarizationMode::LinearInPlane, PolarizationMode::LinearOrthogonal] {
                let b = build_polarization(&ph, mode).unwrap();
                prop_assert!(dot(&b.f, &n).norm() < 1e-15);
                prop_assert!((b.f.iter().map(|z| z.norm_sqr()).sum::<f64>() - 1.0).abs() < 1e-15);
                prop_assert_eq!(b.f[2].im, 0.0);
                for r in [1i8, -1] {
                    let fr = b.f_r(r);
                    let rf = r as f64;
                    prop_assert!((fr[0] - b.f[0] * rf).norm() == 0.0);
                    prop_assert!((fr[2] - b.f[2] * rf - b.f[2] * (1.0 - rf)).norm() < 1e-16);
                }
            }
        }
    }
}
