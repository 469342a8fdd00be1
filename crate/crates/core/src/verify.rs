//! Self-verification suites: oracle equivalence, closed-form convergence
//! and invariants. Shared by `transrad verify` and the acceptance tests.

use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kinematics::{build_polarization, solve_final_momentum, ParticleParams, PhotonKinematics, PolarizationMode};
use crate::radiation::{
    closed_form, contract_reflected, integrand_brute_force, integrand_contracted, integrand_summed_normal, prefactor, probability,
    probability_polarization_summed, traced_bracket_with, ClosedForm, ClosedFormArgs, ProbabilityOptions,
};
use crate::spinor::{effective_spin, zeta0};
use crate::units;
use crate::wavepackets::{
    phase_invariance_witness, GaussianSuperposition, SpinSuperposition, TwistedPacket, TwistedSpin, WavePacket, NORMALIZATION_ORDER,
};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

/// Deliberate defects for mutation smoke tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defect {
    /// Flips the sign of every ε-tensor term of the traced bracket.
    EpsSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub worst: f64,
    pub tolerance: f64,
    pub samples: usize,
    pub passed: bool,
    pub seconds: f64,
    pub details: Vec<String>,
}

impl SuiteReport {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self { name, worst: 0.0, tolerance, samples: 0, passed: true, seconds: 0.0, details: Vec::new() }
    }

    fn check(&mut self, what: impl FnOnce() -> String, err: f64, tol: f64) {
        self.samples += 1;
        let err = if err.is_nan() { f64::INFINITY } else { err };
        self.worst = self.worst.max(err / tol * self.tolerance);
        if !(err <= tol) {
            self.passed = false;
            if self.details.len() < 10 {
                self.details.push(format!("{}: {err:.3e} > {tol:.1e}", what()));
            }
        }
    }

    fn flag(&mut self, what: impl FnOnce() -> String, ok: bool) {
        self.check(what, if ok { 0.0 } else { f64::INFINITY }, self.tolerance);
    }
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

/// A random valid kinematic point with χ log-uniform in [1e-4, 0.5] and γ
/// log-uniform in [1.0005, 50] (unit mass).
#[derive(Debug, Clone, Copy)]
pub struct RandomPoint {
    pub p: Vec3,
    pub photon: PhotonKinematics,
    pub params: ParticleParams,
    pub zeta: Vec3,
    pub mode: PolarizationMode,
}

pub fn random_point(rng: &mut ChaCha8Rng) -> RandomPoint {
    loop {
        let g = (rng.random_range(1.0005f64.ln()..50f64.ln())).exp();
        let chi = (rng.random_range(1e-4f64.ln()..0.5f64.ln())).exp();
        let pm = (g * g - 1.0).sqrt();
        let a: f64 = rng.random_range(0.0..1.3);
        let b: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let p = Vec3::new(pm * a.sin() * b.cos(), pm * a.sin() * b.sin(), -pm * a.cos());
        let k0 = chi * p[2] * p[2] / g;
        let Ok(photon) = PhotonKinematics::new(k0, rng.random_range(0.0..1.55), rng.random_range(0.0..std::f64::consts::TAU)) else {
            continue;
        };
        if solve_final_momentum(&p, &photon, 1.0).is_err() {
            continue;
        }
        let params = ParticleParams::from_couplings(1.0, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).unwrap();
        let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let zeta = if dir.norm() > 1e-3 { dir.normalize() * rng.random_range(0.0..1.0f64).cbrt() } else { Vec3::zeros() };
        let mode = match rng.random_range(0..4) {
            0 => PolarizationMode::Helicity(1),
            1 => PolarizationMode::Helicity(-1),
            2 => PolarizationMode::LinearInPlane,
            _ => PolarizationMode::LinearOrthogonal,
        };
        return RandomPoint { p, photon, params, zeta, mode };
    }
}

/// Traced bracket, contraction fast path and explicit spinors, pairwise.
pub fn oracle_suite(samples: usize, seed: u64, defect: Option<Defect>) -> SuiteReport {
    let t0 = Instant::now();
    let mut rep = SuiteReport::new("oracle equivalence", 1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps_sign = if defect == Some(Defect::EpsSign) { -1.0 } else { 1.0 };
    // the two spin states with ±ζ on a helicity basis always exercise the
    // ε-tensor terms; random points cover the rest
    for i in 0..samples {
        let pt = random_point(&mut rng);
        let pol = build_polarization(&pt.photon, pt.mode).unwrap();
        let sk = solve_final_momentum(&pt.p, &pt.photon, 1.0).unwrap();
        let t = traced_bracket_with(&sk, &pt.params, &pt.zeta, eps_sign).total();
        let general = contract_reflected(&t, &pol, &sk).re * prefactor(&sk);
        let fast = integrand_contracted(&pt.p, &pt.photon, &pol, &pt.params, &pt.zeta).unwrap().total();
        let brute = integrand_brute_force(&pt.p, &pt.photon, &pol, &pt.params, &pt.zeta).unwrap();
        let tol = rep.tolerance;
        rep.check(|| format!("point {i} general/fast"), rel_diff(general, fast), tol);
        rep.check(|| format!("point {i} general/brute"), rel_diff(general, brute), tol);
        rep.check(|| format!("point {i} fast/brute"), rel_diff(fast, brute), tol);
    }
    rep.seconds = t0.elapsed().as_secs_f64();
    rep
}

/// One convergence case: a single normal-incidence Gaussian at recoil χ,
/// widths σ3 = r|p| along z and `transverse_ratio`·σ3 across.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceCase {
    pub kinetic_energy: f64,
    pub theta: f64,
    pub ratios: Vec<f64>,
    /// Relative errors against OrthoPolNormal and SummedPolSmallRecoil.
    pub ortho: Vec<f64>,
    pub summed: Vec<f64>,
    /// Same, against the zero-width point integrand.
    pub ortho_point: Vec<f64>,
    pub summed_point: Vec<f64>,
    /// Closed form against the exact point integrand (the O(χ) truncation).
    pub ortho_truncation: f64,
    pub summed_truncation: f64,
}

pub const CONVERGENCE_LADDER: [f64; 3] = [1e-2, 5e-3, 2.5e-3];
/// Transverse/longitudinal width ratio: keeps the angular spread well inside
/// the packet-angle bound Δθ² ≪ −q²/p3² where normal incidence is meaningful.
pub const TRANSVERSE_RATIO: f64 = 1e-3;

pub fn convergence_case(params: &ParticleParams, kinetic: f64, theta: f64, chi: f64, ratios: &[f64]) -> crate::Result<ConvergenceCase> {
    let m = params.mass();
    let p = units::momentum_from_kinetic(m, kinetic);
    let p0 = (m * m + p * p).sqrt();
    let k0 = chi * p * p / p0;
    let photon = PhotonKinematics::new(k0, theta, 0.0)?;
    let args = ClosedFormArgs { params: *params, photon, momentum: p, l: 0, sigma_perp: 0.0, sigma3: 0.0 };
    let co = closed_form(ClosedForm::OrthoPolNormal, &args)?.value;
    let cs = closed_form(ClosedForm::SummedPolSmallRecoil, &args)?.value;
    let pv = Vec3::new(0.0, 0.0, -p);
    let pol = build_polarization(&photon, PolarizationMode::LinearOrthogonal)?;
    let po = integrand_contracted(&pv, &photon, &pol, params, &Vec3::zeros())?.total();
    let ps = integrand_summed_normal(&pv, &photon, params)?.total();
    let opts = ProbabilityOptions::default().with_rtol(1e-9);
    let mut case = ConvergenceCase {
        kinetic_energy: kinetic,
        theta,
        ratios: ratios.to_vec(),
        ortho: vec![],
        summed: vec![],
        ortho_point: vec![],
        summed_point: vec![],
        ortho_truncation: po / co - 1.0,
        summed_truncation: ps / cs - 1.0,
    };
    for &r in ratios {
        let s = r * p;
        let g = GaussianSuperposition::single(pv, Vec3::new(s * TRANSVERSE_RATIO, s * TRANSVERSE_RATIO, s), Vec3::zeros())?;
        let w = WavePacket::Gaussian(g);
        let a = probability(&w, &photon, &pol, params, &opts)?.value;
        let b = probability_polarization_summed(&w, &photon, params, &opts)?.value;
        case.ortho.push(a / co - 1.0);
        case.summed.push(b / cs - 1.0);
        case.ortho_point.push(a / po - 1.0);
        case.summed_point.push(b / ps - 1.0);
    }
    Ok(case)
}

/// Worst deviation of successive error ratios from the σ² law, 1/(r_i/r_{i+1})².
pub fn sigma_squared_deviation(ratios: &[f64], errors: &[f64]) -> f64 {
    ratios
        .windows(2)
        .zip(errors.windows(2))
        .map(|(r, e)| {
            let expect = (r[0] / r[1]).powi(2);
            ((e[0] / e[1]) / expect - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

pub fn convergence_suite(level: Level) -> SuiteReport {
    let t0 = Instant::now();
    let mut rep = SuiteReport::new("closed-form convergence", 1e-3);
    let params = ParticleParams::electron();
    let cases: &[(f64, f64)] = match level {
        Level::Quick => &[(1e5, 0.6)],
        Level::Full => &[(1e3, 0.3), (1e3, 1.2), (1e5, 0.3), (1e5, 1.2), (1e7, 0.3), (1e7, 1.2)],
    };
    for &(t, th) in cases {
        match convergence_case(&params, t, th, 1e-3, &CONVERGENCE_LADDER) {
            Ok(c) => {
                let name = || format!("T = {t:.0e} eV, θ = {th}");
                rep.check(|| format!("{} ortho σ² law", name()), sigma_squared_deviation(&c.ratios, &c.ortho_point), 0.1);
                rep.check(|| format!("{} summed σ² law", name()), sigma_squared_deviation(&c.ratios, &c.summed_point), 0.1);
                rep.check(|| format!("{} ortho final", name()), c.ortho.last().unwrap().abs(), 1e-3);
                // the summed closed form drops a factor p3/p3' = 1 − χ + …;
                // the packet integral must converge onto that offset
                rep.check(
                    || format!("{} summed final minus truncation", name()),
                    (c.summed.last().unwrap() - c.summed_truncation).abs(),
                    1e-3,
                );
                rep.details.push(format!(
                    "{}: ortho {:.2e} summed {:.2e} (truncation {:.2e})",
                    name(),
                    c.ortho.last().unwrap(),
                    c.summed.last().unwrap(),
                    c.summed_truncation
                ));
            }
            Err(e) => rep.flag(|| format!("T = {t:.0e}: {e}"), false),
        }
    }
    rep.seconds = t0.elapsed().as_secs_f64();
    rep
}

pub fn invariant_suite(level: Level) -> SuiteReport {
    let t0 = Instant::now();
    let mut rep = SuiteReport::new("invariants", 1e-8);
    let n_points = if level == Level::Full { 400 } else { 60 };
    let mut rng = ChaCha8Rng::seed_from_u64(0x7a11);

    // spin decoupling, ζ-independence of the polarization sum, positivity
    for i in 0..n_points {
        let pt = random_point(&mut rng);
        let mut total = [0.0; 2];
        for (j, z) in [pt.zeta, -pt.zeta].into_iter().enumerate() {
            for mode in [PolarizationMode::LinearInPlane, PolarizationMode::LinearOrthogonal] {
                let pol = build_polarization(&pt.photon, mode).unwrap();
                let v = integrand_contracted(&pt.p, &pt.photon, &pol, &pt.params, &z).unwrap().total();
                let w = integrand_contracted(&pt.p, &pt.photon, &pol, &pt.params, &Vec3::zeros()).unwrap().total();
                rep.check(|| format!("point {i} {mode} spin decoupling"), rel_diff(v, w), 1e-12);
                rep.flag(|| format!("point {i} positivity"), v >= 0.0);
            }
            for h in [1, -1] {
                let pol = build_polarization(&pt.photon, PolarizationMode::Helicity(h)).unwrap();
                let v = integrand_contracted(&pt.p, &pt.photon, &pol, &pt.params, &z).unwrap().total();
                rep.flag(|| format!("point {i} helicity positivity"), v >= 0.0);
                total[j] += v;
            }
        }
        rep.check(|| format!("point {i} summed ζ-independence"), rel_diff(total[0], total[1]), 1e-10);
    }

    // packets: normalization, phase witness, ζ-independence after integration
    let e = ParticleParams::electron();
    let pz = units::momentum_from_kinetic(e.mass(), 1e4);
    let mean = Vec3::new(0.02 * pz, 0.0, -pz);
    let env = GaussianSuperposition::single(mean, Vec3::new(2.0, 2.0, 20.0), Vec3::zeros()).unwrap();
    let spin = SpinSuperposition::new(env.clone(), Vec3::new(0.3, 0.2, 0.9).normalize(), 0.4, Vec3::new(0.0, 0.0, 0.5), 0.1).unwrap();
    let twin = SpinSuperposition::new(env.clone(), Vec3::new(-0.6, 0.1, 0.2).normalize(), -1.0, Vec3::new(0.3, 0.0, 0.1), 2.0).unwrap();
    let lattice = GaussianSuperposition::new(
        mean,
        *env.covariance(),
        vec![Vec3::zeros(), Vec3::new(0.0, 0.0, 0.05), Vec3::new(0.0, 0.0, 0.1)],
        vec![num_complex::Complex64::new(1.0, 0.0); 3],
        Vec3::new(0.0, 0.0, 0.5),
    )
    .unwrap();
    let twisted = TwistedPacket::new(-pz, 20.0, 5.0, 4, TwistedSpin::Up).unwrap();
    let packets = [
        ("gaussian", WavePacket::Gaussian(env)),
        ("lattice", WavePacket::Gaussian(lattice)),
        ("spin", WavePacket::Spin(spin)),
        ("twisted", WavePacket::Twisted(twisted)),
    ];
    let photon = PhotonKinematics::new(1.0, 0.7, 0.4).unwrap();
    let opts = ProbabilityOptions::default();
    for (name, packet) in &packets {
        let norm = packet.normalization(NORMALIZATION_ORDER);
        rep.check(|| format!("{name} normalization"), (norm - 1.0).abs(), 1e-6);
        let witness = phase_invariance_witness(packet, 17);
        for mode in [PolarizationMode::Helicity(1), PolarizationMode::LinearInPlane] {
            let pol = build_polarization(&photon, mode).unwrap();
            let a = probability(packet, &photon, &pol, &e, &opts).unwrap();
            let b = probability(&witness, &photon, &pol, &e, &opts).unwrap();
            rep.flag(|| format!("{name} {mode} witness bit-identical"), a.value.to_bits() == b.value.to_bits());
            rep.flag(|| format!("{name} positivity"), a.value >= 0.0);
        }
    }
    let sa = probability_polarization_summed(&packets[2].1, &photon, &e, &opts).unwrap().value;
    let sb = probability_polarization_summed(&WavePacket::Spin(twin), &photon, &e, &opts).unwrap().value;
    rep.check(|| "summed probability ζ-independence".into(), rel_diff(sa, sb), 1e-10);

    // effective spin: |ζ| = 1, ζ0·τ = 0, dζ0/dψ = τ × ζ0
    for i in 0..10 {
        let (th, ph, psi): (f64, f64, f64) =
            (rng.random_range(0.0..3.1), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
        let tau = Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos());
        let z0 = zeta0(th, ph, psi);
        let h = 1e-5;
        let d = (zeta0(th, ph, psi + h) - zeta0(th, ph, psi - h)) / (2.0 * h);
        rep.check(|| format!("ζ0 ODE {i}"), (d - tau.cross(&z0)).norm(), 1e-8);
        rep.check(|| format!("ζ0·τ {i}"), z0.dot(&tau).abs(), 1e-14);
        let kappa = rng.random_range(-3.0..3.0);
        rep.check(|| format!("|ζ| {i}"), (effective_spin(&tau, kappa, psi).norm() - 1.0).abs(), 1e-14);
    }
    rep.seconds = t0.elapsed().as_secs_f64();
    rep
}

/// Runs every suite at the requested depth.
pub fn run(level: Level, defect: Option<Defect>) -> Vec<SuiteReport> {
    let n = if level == Level::Full { 5000 } else { 500 };
    vec![oracle_suite(n, 0x5eed, defect), convergence_suite(level), invariant_suite(level)]
}
