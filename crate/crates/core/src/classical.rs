//! Classical point-current amplitudes and coherent radiation from bunches of
//! well-separated packets.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::kinematics::{ParticleParams, PhotonKinematics, PolarizationBasis};
use crate::radiation::{probability, reflected_sum_vector, small_recoil_transfer, ProbabilityOptions, TermBreakdown};
use crate::wavepackets::WavePacket;
use crate::{Error, Result, Vec3};

/// Widths above this fraction of |p| break the point-current picture.
pub const NARROW_LIMIT: f64 = 0.05;
/// Largest tolerated |⟨φ_i|φ_j⟩| between bunch members.
pub const OVERLAP_LIMIT: f64 = 1e-3;
/// Multiple of χ allowed between |a|² and the inclusive density.
pub const RECOIL_ALLOWANCE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicalAmplitude {
    pub value: Complex64,
    /// Momentum handed to the field, (k⊥, q3); translations by b multiply
    /// the amplitude by e^{−ik̃·b}.
    pub k_tilde: Vec3,
    /// The point current carries the charge only; a nonzero μ_a is dropped.
    pub moment_neglected: bool,
}

impl ClassicalAmplitude {
    pub fn probability(&self) -> f64 {
        self.value.norm_sqr()
    }
}

fn check_narrow(packet: &WavePacket) -> Result<Vec3> {
    let p = packet.mean_momentum();
    let w = packet.momentum_spread();
    let ratio = w.max() / p.norm();
    if !(ratio < NARROW_LIMIT) {
        return Err(Error::RegimeViolation(format!(
            "packet width/|p| = {ratio:.3e} exceeds {NARROW_LIMIT} for the point-current amplitude"
        )));
    }
    Ok(p)
}

/// Amplitude of the classical current of a packet centred at `center`,
/// with the outgoing momentum replaced by the incident one:
/// a = −(2e/(p3 q²)) (p·F*) e^{−ik̃·b} / √(16π³k0).
pub fn classical_amplitude(
    packet: &WavePacket,
    center: &Vec3,
    photon: &PhotonKinematics,
    pol: &PolarizationBasis,
    params: &ParticleParams,
) -> Result<ClassicalAmplitude> {
    let p = check_narrow(packet)?;
    let (q3, q2) = small_recoil_transfer(&p, photon, params.mass());
    let k = photon.k();
    let k_tilde = Vec3::new(k[0], k[1], q3);
    let fv = reflected_sum_vector(pol, k[2], q3);
    let pf: Complex64 = (0..3).map(|i| fv[i].conj() * p[i]).sum();
    let amp = pf * (-2.0 * params.charge() / (p[2] * q2)) / (16.0 * PI.powi(3) * photon.k0()).sqrt();
    Ok(ClassicalAmplitude {
        value: amp * Complex64::from_polar(1.0, -k_tilde.dot(center)),
        k_tilde,
        moment_neglected: params.mu_a() != 0.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BunchMember {
    pub packet: WavePacket,
    /// Position-space centre b.
    pub center: Vec3,
    /// Constant phase of this member's wave function.
    pub phase: f64,
}

impl BunchMember {
    pub fn new(packet: WavePacket, center: Vec3) -> Self {
        Self { packet, center, phase: 0.0 }
    }
    pub fn with_phase(mut self, phase: f64) -> Self {
        self.phase = phase;
        self
    }
}

/// The exchange contribution has no computable recipe here; it is recorded
/// as neglected together with the worst pairwise overlap that justifies it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExchangeTerm {
    Neglected { max_overlap: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NParticleResult {
    /// Σ_k of the single-packet quantum probabilities.
    pub incoherent_quantum: f64,
    /// |Σ_k a_k|².
    pub coherent_classical: f64,
    /// Σ_k |a_k|².
    pub incoherent_classical_subtraction: f64,
    pub total: f64,
    pub exchange_term: ExchangeTerm,
    pub amplitudes: Vec<Complex64>,
    pub breakdown: TermBreakdown,
    pub warnings: Vec<String>,
}

impl NParticleResult {
    /// |Σa|²/|a|² style enhancement of the coherent part over one member.
    pub fn coherent_enhancement(&self) -> f64 {
        let n = self.amplitudes.len() as f64;
        self.coherent_classical / (self.incoherent_classical_subtraction / n)
    }
}

/// ⟨φ_i|φ_j⟩ for members displaced by Δb = b_j − b_i.
pub fn member_overlap(a: &BunchMember, b: &BunchMember) -> Complex64 {
    let db = b.center - a.center;
    let phase = Complex64::from_polar(1.0, b.phase - a.phase);
    if a.packet == b.packet {
        return a.packet.overlap(&db) * phase;
    }
    // different shapes: ∫ φ_a* φ_b e^{−ip·Δb} over the nodes of a
    let mut s = Complex64::new(0.0, 0.0);
    for n in a.packet.nodes(24) {
        let fa = a.packet.amplitude(&n.p);
        if fa.norm_sqr() > 0.0 {
            s += n.weight * b.packet.amplitude(&n.p) / fa * Complex64::from_polar(1.0, -n.p.dot(&db));
        }
    }
    s * phase
}

fn max_overlap(members: &[BunchMember]) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            let o = member_overlap(&members[i], &members[j]).norm();
            if o > OVERLAP_LIMIT {
                return Err(Error::OverlapViolation { i, j, overlap: o });
            }
            worst = worst.max(o);
        }
    }
    Ok(worst)
}

/// Inclusive one-photon probability density of a bunch of separated packets:
/// incoherent quantum sum plus the coherent classical interference.
pub fn n_particle_probability(
    members: &[BunchMember],
    photon: &PhotonKinematics,
    pol: &PolarizationBasis,
    params: &ParticleParams,
    opts: &ProbabilityOptions,
) -> Result<NParticleResult> {
    if members.is_empty() {
        return Err(Error::invalid("bunch has no members"));
    }
    let worst = max_overlap(members)?;

    // one quadrature per distinct packet shape; translations leave c(p) alone
    let mut shapes: Vec<&WavePacket> = Vec::new();
    let index: Vec<usize> = members
        .iter()
        .map(|m| match shapes.iter().position(|s| **s == m.packet) {
            Some(i) => i,
            None => {
                shapes.push(&m.packet);
                shapes.len() - 1
            }
        })
        .collect();
    let quantum: Vec<_> = shapes.par_iter().map(|s| probability(s, photon, pol, params, opts)).collect::<Result<Vec<_>>>()?;

    let amplitudes: Vec<Complex64> = members
        .par_iter()
        .map(|m| classical_amplitude(&m.packet, &m.center, photon, pol, params).map(|a| a.value * Complex64::from_polar(1.0, m.phase)))
        .collect::<Result<Vec<_>>>()?;

    let mut breakdown = TermBreakdown::default();
    let mut warnings = Vec::new();
    for &i in &index {
        let q = &quantum[i];
        breakdown = TermBreakdown {
            e2: breakdown.e2 + q.breakdown.e2,
            e_mu: breakdown.e_mu + q.breakdown.e_mu,
            mu2: breakdown.mu2 + q.breakdown.mu2,
        };
    }
    for q in &quantum {
        warnings.extend(q.warnings.iter().cloned());
    }
    if params.mu_a() != 0.0 {
        warnings.push("classical amplitudes carry the charge only; μ_a enters the incoherent part alone".into());
    }
    // fixed summation order
    let sum = amplitudes.iter().fold(Complex64::new(0.0, 0.0), |a, b| a + b);
    let coherent = sum.norm_sqr();
    let sub: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
    let incoherent = breakdown.total();
    Ok(NParticleResult {
        incoherent_quantum: incoherent,
        coherent_classical: coherent,
        incoherent_classical_subtraction: sub,
        total: incoherent + coherent - sub,
        exchange_term: ExchangeTerm::Neglected { max_overlap: worst },
        amplitudes,
        breakdown,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExclusiveReport {
    pub exclusive: f64,
    pub inclusive: f64,
    /// exclusive/inclusive; NaN when both vanish.
    pub ratio: f64,
    /// exclusive ≤ inclusive within the quadrature tolerance plus the O(χ)
    /// accuracy of the classical amplitude.
    pub inequality_holds: bool,
    /// Set when the two notions diverge by construction: twisted packets
    /// carry a current with an orbital moment imprint the inclusive
    /// probability never sees.
    pub divergent_notions: bool,
    pub notes: Vec<String>,
}

/// Compares the classical exclusive density |a|² with the inclusive one.
pub fn exclusive_vs_inclusive_report(
    packet: &WavePacket,
    photon: &PhotonKinematics,
    pol: &PolarizationBasis,
    params: &ParticleParams,
    opts: &ProbabilityOptions,
) -> Result<ExclusiveReport> {
    let a = classical_amplitude(packet, &Vec3::zeros(), photon, pol, params)?;
    let inc = probability(packet, photon, pol, params, opts)?;
    let exclusive = a.probability();
    let inclusive = inc.value;
    let quad_tol = opts.quadrature.rtol.max(inc.error_estimate / inclusive.abs().max(f64::MIN_POSITIVE));
    // |a|² is the recoil-free limit of the exclusive probability and runs
    // O(χ) high; the inequality can only be tested to that accuracy
    let p = packet.mean_momentum();
    let p0 = (params.mass().powi(2) + p.norm_squared()).sqrt();
    let chi = photon.k0() * p0 / p.norm_squared();
    let tol = quad_tol + RECOIL_ALLOWANCE * chi;
    let mut notes = inc.warnings.clone();
    let ratio = exclusive / inclusive;
    if ratio > 1.0 + quad_tol && ratio <= 1.0 + tol {
        notes.push(format!(
            "|a|² exceeds the inclusive density by {:.2e}, inside the O(χ) accuracy of the recoil-free amplitude (χ = {chi:.2e})",
            ratio - 1.0
        ));
    }
    let divergent = matches!(packet, WavePacket::Twisted(t) if t.l() != 0);
    if divergent {
        notes.push(
            "twisted packet: the classical current holds an orbital magnetic-moment imprint, \
             the inclusive probability depends on c(p) only; |a|² does not approximate it"
                .into(),
        );
    }
    if a.moment_neglected {
        notes.push("classical amplitude ignores μ_a".into());
    }
    Ok(ExclusiveReport {
        exclusive,
        inclusive,
        ratio,
        inequality_holds: exclusive <= inclusive * (1.0 + tol),
        divergent_notions: divergent,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{build_polarization, PolarizationMode};
    use crate::radiation::{closed_form, ClosedForm, ClosedFormArgs};
    use crate::units;
    use crate::wavepackets::GaussianSuperposition;

    fn narrow(t_kin: f64, rel_width: f64) -> (WavePacket, f64) {
        let params = ParticleParams::electron();
        let p = units::momentum_from_kinetic(params.mass(), t_kin);
        let s = p * rel_width;
        let g = GaussianSuperposition::single(Vec3::new(0.0, 0.0, -p), Vec3::new(s, s, s), Vec3::zeros()).unwrap();
        (WavePacket::Gaussian(g), p)
    }

    #[test]
    fn amplitude_squared_is_classical_summed_term() {
        let params = ParticleParams::electron().with_couplings(units::elementary_charge(), 0.0);
        let (packet, p) = narrow(1e5, 1e-4);
        let photon = PhotonKinematics::new(0.5, 0.6, 0.0).unwrap();
        let sum: f64 = [PolarizationMode::LinearInPlane, PolarizationMode::LinearOrthogonal]
            .iter()
            .map(|&m| {
                let pol = build_polarization(&photon, m).unwrap();
                classical_amplitude(&packet, &Vec3::zeros(), &photon, &pol, &params).unwrap().probability()
            })
            .sum();
        let args = ClosedFormArgs { params, photon, momentum: p, l: 0, sigma_perp: 0.0, sigma3: 0.0 };
        let cf = closed_form(ClosedForm::SummedPolSmallRecoil, &args).unwrap();
        assert!((sum - cf.breakdown.e2).abs() / cf.breakdown.e2 < 1e-10, "{sum} {}", cf.breakdown.e2);
    }

    #[test]
    fn translation_is_a_phase() {
        let params = ParticleParams::electron();
        let (packet, _) = narrow(1e4, 1e-3);
        let photon = PhotonKinematics::new(1.0, 0.4, 0.7).unwrap();
        let pol = build_polarization(&photon, PolarizationMode::Helicity(1)).unwrap();
        let b = Vec3::new(0.3, -1.0, 2.0);
        let a0 = classical_amplitude(&packet, &Vec3::zeros(), &photon, &pol, &params).unwrap();
        let a1 = classical_amplitude(&packet, &b, &photon, &pol, &params).unwrap();
        let ratio = a1.value / a0.value;
        assert!((ratio.norm() - 1.0).abs() < 1e-14);
        assert!((ratio - Complex64::from_polar(1.0, -a0.k_tilde.dot(&b))).norm() < 1e-12);
    }

    #[test]
    fn no_coupling_no_amplitude() {
        let params = ParticleParams::from_couplings(units::ELECTRON_MASS_EV, 0.0, 0.0).unwrap();
        let (packet, _) = narrow(1e4, 1e-3);
        let photon = PhotonKinematics::new(1.0, 0.4, 0.0).unwrap();
        let pol = build_polarization(&photon, PolarizationMode::LinearInPlane).unwrap();
        assert_eq!(classical_amplitude(&packet, &Vec3::zeros(), &photon, &pol, &params).unwrap().value, Complex64::new(0.0, 0.0));
        let r = exclusive_vs_inclusive_report(&packet, &photon, &pol, &params, &Default::default()).unwrap();
        assert_eq!((r.exclusive, r.inclusive), (0.0, 0.0));
    }

    #[test]
    fn wide_packet_rejected() {
        let params = ParticleParams::electron();
        let (packet, _) = narrow(1e4, 0.1);
        let photon = PhotonKinematics::new(1.0, 0.4, 0.0).unwrap();
        let pol = build_polarization(&photon, PolarizationMode::LinearInPlane).unwrap();
        assert!(matches!(classical_amplitude(&packet, &Vec3::zeros(), &photon, &pol, &params), Err(Error::RegimeViolation(_))));
    }

    fn bunch(packet: &WavePacket, centers: &[Vec3]) -> Vec<BunchMember> {
        centers.iter().map(|c| BunchMember::new(packet.clone(), *c)).collect()
    }

    #[test]
    fn single_member_total_is_quantum() {
        let params = ParticleParams::electron();
        let (packet, _) = narrow(1e4, 1e-3);
        let photon = PhotonKinematics::new(1.0, 0.4, 0.0).unwrap();
        let pol = build_polarization(&photon, PolarizationMode::LinearInPlane).unwrap();
        let opts = ProbabilityOptions::default();
        let r = n_particle_probability(&bunch(&packet, &[Vec3::zeros()]), &photon, &pol, &params, &opts).unwrap();
        let q = probability(&packet, &photon, &pol, &params, &opts).unwrap();
        assert_eq!(r.total, q.value);
    }

    #[test]
    fn opposite_phases_cancel_and_overlap_guard() {
        let params = ParticleParams::electron();
        let (packet, p) = narrow(1e4, 1e-3);
        let photon = PhotonKinematics::new(1.0, 0.4, 0.0).unwrap();
        let pol = build_polarization(&photon, PolarizationMode::LinearInPlane).unwrap();
        let far = 20.0 / (p * 1e-3);
        let members = vec![BunchMember::new(packet.clone(), Vec3::zeros()), BunchMember::new(packet.clone(), Vec3::zeros()).with_phase(PI)];
        // coincident members overlap completely
        assert!(matches!(
            n_particle_probability(&members, &photon, &pol, &params, &Default::default()),
            Err(Error::OverlapViolation { .. })
        ));
        let members =
            [BunchMember::new(packet.clone(), Vec3::zeros()), BunchMember::new(packet.clone(), Vec3::new(far, 0.0, 0.0)).with_phase(PI)];
        let a = classical_amplitude(&packet, &Vec3::zeros(), &photon, &pol, &params).unwrap();
        // second member where its translation phase is a multiple of 2π
        let bx = 2.0 * PI * (far * a.k_tilde[0] / (2.0 * PI)).ceil() / a.k_tilde[0];
        let members = vec![members[0].clone(), BunchMember { center: Vec3::new(bx, 0.0, 0.0), ..members[1].clone() }];
        let r = n_particle_probability(&members, &photon, &pol, &params, &Default::default()).unwrap();
        assert!(r.coherent_classical < 1e-10 * r.incoherent_classical_subtraction);
        assert!((r.total - (r.incoherent_quantum - r.incoherent_classical_subtraction)).abs() <= 1e-12 * r.incoherent_quantum);
    }

    #[test]
    fn global_translation_invariance() {
        let params = ParticleParams::electron();
        let (packet, p) = narrow(1e4, 1e-3);
        let photon = PhotonKinematics::new(1.0, 0.4, 0.3).unwrap();
        let pol = build_polarization(&photon, PolarizationMode::Helicity(-1)).unwrap();
        let d = 30.0 / (p * 1e-3);
        let c: Vec<Vec3> = (0..4).map(|j| Vec3::new(0.1 * d * j as f64, 0.0, d * j as f64)).collect();
        let shifted: Vec<Vec3> = c.iter().map(|b| b + Vec3::new(3.0, -2.0, 7.5)).collect();
        let opts = ProbabilityOptions::default();
        let a = n_particle_probability(&bunch(&packet, &c), &photon, &pol, &params, &opts).unwrap();
        let b = n_particle_probability(&bunch(&packet, &shifted), &photon, &pol, &params, &opts).unwrap();
        assert!((a.total - b.total).abs() <= 1e-9 * a.total);
        let abs_sum: f64 = a.amplitudes.iter().map(|z| z.norm()).sum();
        assert!(a.coherent_classical <= abs_sum * abs_sum * (1.0 + 1e-12));
    }

    #[test]
    fn exclusive_below_inclusive() {
        let params = ParticleParams::electron();
        let (packet, _) = narrow(1e4, 1e-3);
        for th in [0.1, 0.7, 1.3] {
            let photon = PhotonKinematics::new(1.0, th, 0.0).unwrap();
            for m in [PolarizationMode::LinearInPlane, PolarizationMode::LinearOrthogonal, PolarizationMode::Helicity(1)] {
                let pol = build_polarization(&photon, m).unwrap();
                let r = exclusive_vs_inclusive_report(&packet, &photon, &pol, &params, &Default::default()).unwrap();
                assert!(r.inequality_holds, "{r:?}");
                // the orthogonal mode at normal incidence is pure recoil, with no classical part
                if m != PolarizationMode::LinearOrthogonal {
                    assert!((r.ratio - 1.0).abs() < 1e-2, "{r:?}");
                }
            }
        }
    }
}
