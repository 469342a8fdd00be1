//! Wave packets described by their momentum-space diagonal: the density c(p)
//! and the effective spin vector ζ(p).

use std::f64::consts::PI;

use nalgebra::{Matrix3, SymmetricEigen};
use num_complex::Complex64;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::quadrature::{hermite, laguerre, Node};
use crate::spinor::{effective_spin, SpinDensityMatrix};
use crate::{Error, Result, Vec3};

/// Largest tolerated packet mass at p3 ≥ 0.
pub const SUPPORT_LIMIT: f64 = 1e-8;
/// Twisted packets warn below this |p|/σ3.
pub const LONGITUDINAL_RATIO_WARN: f64 = 5.0;
/// Order of the product rule used for normalization checks.
pub const NORMALIZATION_ORDER: usize = 40;
/// −ln of the overlap below which a center pair is dropped from quadrature
/// weights (e^{−40} ≈ 4e-18).
const PAIR_CUTOFF: f64 = 40.0;

/// c(p) = A · N(p; p̄, Σ) · |Σ_l k_l e^{−ip·b_l}|², with Σ the momentum
/// covariance and A fixing ∫c = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSuperposition {
    mean: Vec3,
    covariance: Matrix3<f64>,
    centers: Vec<Vec3>,
    weights: Vec<Complex64>,
    zeta: Vec3,
    inv_cov: Matrix3<f64>,
    /// Columns are principal axes scaled by the standard deviation.
    axes: Matrix3<f64>,
    gauss_norm: f64,
    norm: f64,
}

impl GaussianSuperposition {
    pub fn new(mean: Vec3, covariance: Matrix3<f64>, centers: Vec<Vec3>, weights: Vec<Complex64>, zeta: Vec3) -> Result<Self> {
        if centers.is_empty() || centers.len() != weights.len() {
            return Err(Error::invalid("superposition needs equally many centers and weights (at least one)"));
        }
        if (covariance - covariance.transpose()).abs().max() > 1e-12 * covariance.abs().max() {
            return Err(Error::invalid("momentum covariance must be symmetric"));
        }
        let eig = SymmetricEigen::new(covariance);
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::invalid("momentum covariance must be positive definite"));
        }
        if zeta.norm() > 1.0 + 1e-12 {
            return Err(Error::invalid("|ζ| exceeds 1"));
        }
        let mut axes = eig.eigenvectors;
        for (j, &l) in eig.eigenvalues.iter().enumerate() {
            let s = l.sqrt();
            axes.column_mut(j).scale_mut(s);
        }
        let det: f64 = eig.eigenvalues.iter().product();
        let inv_cov = covariance.try_inverse().ok_or_else(|| Error::invalid("singular covariance"))?;
        let mut s = Complex64::new(0.0, 0.0);
        for (bk, kk) in centers.iter().zip(&weights) {
            for (bl, kl) in centers.iter().zip(&weights) {
                let b = bk - bl;
                let decay = (-0.5 * b.dot(&(covariance * b))).exp();
                s += kk * kl.conj() * Complex64::from_polar(decay, -mean.dot(&b));
            }
        }
        if !(s.re > 0.0) {
            return Err(Error::invalid("superposition weights give a vanishing norm"));
        }
        Ok(Self {
            mean,
            covariance,
            centers,
            weights,
            zeta,
            inv_cov,
            axes,
            gauss_norm: 1.0 / ((2.0 * PI).powf(1.5) * det.sqrt()),
            norm: 1.0 / s.re,
        })
    }

    /// Single Gaussian centered at the origin with diagonal widths.
    pub fn single(mean: Vec3, sigma: Vec3, zeta: Vec3) -> Result<Self> {
        let cov = Matrix3::from_diagonal(&sigma.component_mul(&sigma));
        Self::new(mean, cov, vec![Vec3::zeros()], vec![Complex64::new(1.0, 0.0)], zeta)
    }

    pub fn with_spin_density(mut self, rho: &SpinDensityMatrix) -> Result<Self> {
        let z = rho.zeta();
        if z.norm() > 1.0 + 1e-12 {
            return Err(Error::invalid("spin density matrix is not positive"));
        }
        self.zeta = z;
        Ok(self)
    }

    pub fn mean(&self) -> Vec3 {
        self.mean
    }
    pub fn covariance(&self) -> &Matrix3<f64> {
        &self.covariance
    }
    pub fn centers(&self) -> &[Vec3] {
        &self.centers
    }
    pub fn zeta(&self) -> Vec3 {
        self.zeta
    }
    /// 1/Σ_{kl} k_k k_l* e^{−ip̄·b_kl} e^{−b_klᵀΣb_kl/2}.
    pub fn normalization_constant(&self) -> f64 {
        self.norm
    }

    fn envelope(&self, p: &Vec3) -> f64 {
        let d = p - self.mean;
        self.gauss_norm * (-0.5 * d.dot(&(self.inv_cov * d))).exp()
    }

    fn lattice_sum(&self, p: &Vec3) -> Complex64 {
        self.centers.iter().zip(&self.weights).map(|(b, k)| k * Complex64::from_polar(1.0, -p.dot(b))).sum()
    }

    pub fn density(&self, p: &Vec3) -> f64 {
        self.norm * self.envelope(p) * structure_factor(self, p)
    }

    /// Density used for quadrature weights: center pairs whose Gaussian
    /// overlap e^{−b·Σb/2} is below double resolution are dropped. Their
    /// cross terms oscillate faster than any packet-aligned rule resolves
    /// and integrate to nothing against a smooth integrand.
    fn quadrature_density(&self, p: &Vec3) -> f64 {
        let mut s = 0.0;
        for (i, (bi, ki)) in self.centers.iter().zip(&self.weights).enumerate() {
            s += ki.norm_sqr();
            for (bj, kj) in self.centers.iter().zip(&self.weights).skip(i + 1) {
                let b = bi - bj;
                if 0.5 * b.dot(&(self.covariance * b)) < PAIR_CUTOFF {
                    s += 2.0 * (ki * kj.conj() * Complex64::from_polar(1.0, -p.dot(&b))).re;
                }
            }
        }
        self.norm * self.envelope(p) * s
    }

    fn amplitude(&self, p: &Vec3) -> Complex64 {
        self.lattice_sum(p) * (self.norm * self.envelope(p)).sqrt()
    }

    /// ∫ c(p) e^{−ip·Δb} d³p.
    pub fn overlap(&self, db: &Vec3) -> Complex64 {
        let mut s = Complex64::new(0.0, 0.0);
        for (bk, kk) in self.centers.iter().zip(&self.weights) {
            for (bl, kl) in self.centers.iter().zip(&self.weights) {
                let b = bk - bl + db;
                let decay = (-0.5 * b.dot(&(self.covariance * b))).exp();
                s += kk * kl.conj() * Complex64::from_polar(decay, -self.mean.dot(&b));
            }
        }
        s * self.norm
    }

    fn nodes(&self, n: usize, zeta: impl Fn(&Vec3) -> Vec3, density: impl Fn(&Vec3) -> f64) -> Vec<Node> {
        let r = hermite(n);
        let det_axes = self.axes.determinant().abs();
        let mut out = Vec::with_capacity(n * n * n);
        for &(t1, w1) in r.iter() {
            for &(t2, w2) in r.iter() {
                for &(t3, w3) in r.iter() {
                    let x = Vec3::new(t1, t2, t3) * 2f64.sqrt();
                    let p = self.mean + self.axes * x;
                    // volume element: Hermite weight over e^{−t²}, Jacobian √2³ det(axes)
                    let measure = w1 * w2 * w3 * (t1 * t1 + t2 * t2 + t3 * t3).exp() * 2f64.powf(1.5) * det_axes;
                    out.push(Node { p, weight: measure * density(&p), zeta: zeta(&p) });
                }
            }
        }
        out
    }

    /// Upper bound on the mass at p3 ≥ 0, using S(p) ≤ (Σ|k_l|)².
    pub fn support_leak(&self) -> f64 {
        let smax: f64 = self.weights.iter().map(|k| k.norm()).sum::<f64>().powi(2);
        let sz = self.covariance[(2, 2)].sqrt();
        (self.norm * smax * 0.5 * erfc(-self.mean[2] / (2f64.sqrt() * sz))).min(1.0)
    }
}

/// S(p) = |Σ_l k_l e^{−ip·b_l}|².
pub fn structure_factor(packet: &GaussianSuperposition, p: &Vec3) -> f64 {
    packet.lattice_sum(p).norm_sqr()
}

/// Reciprocal-lattice momenta p·d = 2πn for an equally weighted 1D lattice
/// of period `d`, within `range` of the packet mean along `axis`.
pub fn reciprocal_peaks(d: f64, lo: f64, hi: f64) -> Vec<f64> {
    let step = 2.0 * PI / d;
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|n| n as f64 * step).collect()
}

/// Pure spin state φ_s ∝ φ0 e^{s(κ − iψ)/2} χ_s(τ) with ψ = p·b + ϑ.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinSuperposition {
    pub envelope: GaussianSuperposition,
    pub tau: Vec3,
    pub kappa: f64,
    pub displacement: Vec3,
    pub vartheta: f64,
}

impl SpinSuperposition {
    pub fn new(envelope: GaussianSuperposition, tau: Vec3, kappa: f64, displacement: Vec3, vartheta: f64) -> Result<Self> {
        if (tau.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("spin axis τ must be a unit vector"));
        }
        if !kappa.is_finite() || !vartheta.is_finite() {
            return Err(Error::invalid("κ and ϑ must be finite"));
        }
        Ok(Self { envelope, tau, kappa, displacement, vartheta })
    }

    pub fn psi(&self, p: &Vec3) -> f64 {
        p.dot(&self.displacement) + self.vartheta
    }

    pub fn zeta(&self, p: &Vec3) -> Vec3 {
        effective_spin(&self.tau, self.kappa, self.psi(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwistedSpin {
    Up,
    Down,
    /// Unpolarized mixture.
    Natural,
}

/// c(p) = K p⊥^{2|l|} exp(−(p3 − p̄3)²/(2σ3²) − p⊥²/(2σ⊥²)).
#[derive(Debug, Clone, PartialEq)]
pub struct TwistedPacket {
    p3: f64,
    sigma3: f64,
    sigma_perp: f64,
    l: i32,
    spin: TwistedSpin,
    log_norm: f64,
}

impl TwistedPacket {
    pub fn new(p3: f64, sigma3: f64, sigma_perp: f64, l: i32, spin: TwistedSpin) -> Result<Self> {
        if !(p3 < 0.0) {
            return Err(Error::invalid("twisted packet must move towards the mirror (p3 < 0)"));
        }
        if !(sigma3 > 0.0 && sigma_perp > 0.0) {
            return Err(Error::invalid("twisted packet widths must be positive"));
        }
        let al = l.unsigned_abs() as f64;
        // K^{−2}... here K itself: 1/((2π)^{3/2} σ3 σ⊥² (2σ⊥²)^{|l|} |l|!)
        let log_norm =
            -(1.5 * (2.0 * PI).ln() + sigma3.ln() + 2.0 * sigma_perp.ln() + al * (2.0 * sigma_perp * sigma_perp).ln() + ln_gamma(al + 1.0));
        Ok(Self { p3, sigma3, sigma_perp, l, spin, log_norm })
    }

    pub fn p3(&self) -> f64 {
        self.p3
    }
    pub fn sigma3(&self) -> f64 {
        self.sigma3
    }
    pub fn sigma_perp(&self) -> f64 {
        self.sigma_perp
    }
    pub fn l(&self) -> i32 {
        self.l
    }
    pub fn spin(&self) -> TwistedSpin {
        self.spin
    }

    /// (|l|+1)σ⊥²/m², the non-paraxial smallness parameter.
    pub fn nonparaxiality(&self, m: f64) -> f64 {
        (self.l.unsigned_abs() as f64 + 1.0) * self.sigma_perp * self.sigma_perp / (m * m)
    }

    pub fn zeta(&self) -> Vec3 {
        match self.spin {
            TwistedSpin::Up => Vec3::z(),
            TwistedSpin::Down => -Vec3::z(),
            TwistedSpin::Natural => Vec3::zeros(),
        }
    }

    pub fn density(&self, p: &Vec3) -> f64 {
        let pp2 = p[0] * p[0] + p[1] * p[1];
        let al = self.l.unsigned_abs() as f64;
        let d3 = p[2] - self.p3;
        let lp = if al == 0.0 { 0.0 } else { al * pp2.ln() };
        (self.log_norm + lp - d3 * d3 / (2.0 * self.sigma3 * self.sigma3) - pp2 / (2.0 * self.sigma_perp * self.sigma_perp)).exp()
    }

    fn amplitude(&self, p: &Vec3) -> Complex64 {
        let psi = p[1].atan2(p[0]);
        Complex64::from_polar(self.density(p).sqrt(), self.l as f64 * psi)
    }

    /// ∫ c(p) e^{−ip·Δb} d³p = e^{−ip̄3Δb3 − σ3²Δb3²/2} e^{−x} L_{|l|}(x),
    /// x = σ⊥²|Δb⊥|²/2.
    pub fn overlap(&self, db: &Vec3) -> Complex64 {
        let x = 0.5 * self.sigma_perp * self.sigma_perp * (db[0] * db[0] + db[1] * db[1]);
        let long = Complex64::from_polar((-0.5 * (self.sigma3 * db[2]).powi(2)).exp(), -self.p3 * db[2]);
        long * (-x).exp() * laguerre_poly(self.l.unsigned_abs() as usize, x)
    }

    /// Cylindrical product rule: generalized Laguerre in u = p⊥²/(2σ⊥²),
    /// trapezoid in the azimuth, Hermite in p3.
    fn nodes(&self, n: usize, density: impl Fn(&Vec3) -> f64) -> Vec<Node> {
        let al = self.l.unsigned_abs() as f64;
        let rl = laguerre(n, al);
        let rh = hermite(n);
        let na = 2 * n;
        let s2 = self.sigma_perp * self.sigma_perp;
        let zeta = self.zeta();
        let mut out = Vec::with_capacity(n * n * na);
        for &(u, wu) in rl.iter() {
            let pp = (2.0 * u).sqrt() * self.sigma_perp;
            // p⊥ dp⊥ = σ⊥² du; divide out u^α e^{−u}
            let lu = if al == 0.0 { 0.0 } else { al * u.ln() };
            let mu = wu * (u - lu).exp() * s2;
            for j in 0..na {
                let psi = 2.0 * PI * (j as f64 + 0.5) / na as f64;
                let (sp, cp) = psi.sin_cos();
                for &(t, wt) in rh.iter() {
                    let p = Vec3::new(pp * cp, pp * sp, self.p3 + 2f64.sqrt() * self.sigma3 * t);
                    let measure = mu * (2.0 * PI / na as f64) * wt * (t * t).exp() * 2f64.sqrt() * self.sigma3;
                    out.push(Node { p, weight: measure * density(&p), zeta });
                }
            }
        }
        out
    }
}

/// Laguerre polynomial L_n(x) by the three-term recurrence.
pub fn laguerre_poly(n: usize, x: f64) -> f64 {
    let (mut a, mut b) = (1.0, 1.0 - x);
    if n == 0 {
        return a;
    }
    for k in 1..n {
        let kf = k as f64;
        let c = ((2.0 * kf + 1.0 - x) * b - kf * a) / (kf + 1.0);
        a = b;
        b = c;
    }
    b
}

/// A random smooth phase ξ(p) = Σ_j a_j sin(g_j·p + c_j) + p·b.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseField {
    modes: Vec<(f64, Vec3, f64)>,
    shift: Vec3,
}

impl PhaseField {
    pub fn zero() -> Self {
        Self { modes: Vec::new(), shift: Vec3::zeros() }
    }

    pub fn translation(b: Vec3) -> Self {
        Self { modes: Vec::new(), shift: b }
    }

    /// Random field whose wave vectors are scaled to `scale` (inverse
    /// momentum units).
    pub fn random(seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes = (0..6)
            .map(|_| {
                let a = rng.random_range(-PI..PI);
                let g = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale;
                (a, g, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Self { modes, shift: Vec3::zeros() }
    }

    pub fn eval(&self, p: &Vec3) -> f64 {
        self.modes.iter().map(|(a, g, c)| a * (g.dot(p) + c).sin()).sum::<f64>() + p.dot(&self.shift)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WavePacket {
    Gaussian(GaussianSuperposition),
    Spin(SpinSuperposition),
    Twisted(TwistedPacket),
    /// A packet with an extra momentum-dependent phase in its wave function.
    Witness(Box<WavePacket>, PhaseField),
}

/// Returns the packet with the random phase e^{iξ(p)} injected into its wave
/// function. The momentum diagonal is untouched.
pub fn phase_invariance_witness(packet: &WavePacket, seed: u64) -> WavePacket {
    let w = packet.momentum_spread();
    let scale = 3.0 / w.norm().max(f64::MIN_POSITIVE);
    WavePacket::Witness(Box::new(packet.clone()), PhaseField::random(seed, scale))
}

impl WavePacket {
    pub fn density(&self, p: &Vec3) -> f64 {
        match self {
            WavePacket::Gaussian(g) => g.density(p),
            WavePacket::Spin(s) => s.envelope.density(p),
            WavePacket::Twisted(t) => t.density(p),
            WavePacket::Witness(inner, _) => inner.density(p),
        }
    }

    /// Effective spin vector ζ(p).
    pub fn spin(&self, p: &Vec3) -> Vec3 {
        match self {
            WavePacket::Gaussian(g) => g.zeta(),
            WavePacket::Spin(s) => s.zeta(p),
            WavePacket::Twisted(t) => t.zeta(),
            WavePacket::Witness(inner, _) => inner.spin(p),
        }
    }

    /// Scalar wave-function envelope φ0(p), phases included; |φ0|² = c.
    pub fn amplitude(&self, p: &Vec3) -> Complex64 {
        match self {
            WavePacket::Gaussian(g) => g.amplitude(p),
            WavePacket::Spin(s) => s.envelope.amplitude(p),
            WavePacket::Twisted(t) => t.amplitude(p),
            WavePacket::Witness(inner, xi) => inner.amplitude(p) * Complex64::from_polar(1.0, xi.eval(p)),
        }
    }

    /// Quadrature nodes of order `n` per axis, weights c(p)·d³p.
    pub fn nodes(&self, n: usize) -> Vec<Node> {
        match self {
            WavePacket::Gaussian(g) => g.nodes(n, |_| g.zeta(), |p| g.quadrature_density(p)),
            WavePacket::Spin(s) => s.envelope.nodes(n, |p| s.zeta(p), |p| s.envelope.quadrature_density(p)),
            WavePacket::Twisted(t) => t.nodes(n, |p| t.density(p)),
            WavePacket::Witness(inner, _) => inner.nodes(n),
        }
    }

    /// ∫ c d³p with an independent evaluation of the closed-form density.
    pub fn normalization(&self, order: usize) -> f64 {
        self.nodes(order).iter().map(|n| n.weight).sum()
    }

    /// Mean momentum and per-axis rms spread.
    pub fn moments(&self) -> (Vec3, Vec3) {
        let nodes = self.nodes(16);
        let mass: f64 = nodes.iter().map(|n| n.weight).sum();
        let mean = nodes.iter().fold(Vec3::zeros(), |a, n| a + n.p * n.weight) / mass;
        let var = nodes.iter().fold(Vec3::zeros(), |a, n| a + (n.p - mean).component_mul(&(n.p - mean)) * n.weight) / mass;
        (mean, var.map(f64::sqrt))
    }

    pub fn mean_momentum(&self) -> Vec3 {
        match self {
            WavePacket::Gaussian(g) if g.centers.len() == 1 => g.mean,
            WavePacket::Spin(s) if s.envelope.centers.len() == 1 => s.envelope.mean,
            WavePacket::Twisted(t) => Vec3::new(0.0, 0.0, t.p3),
            WavePacket::Witness(inner, _) => inner.mean_momentum(),
            _ => self.moments().0,
        }
    }

    pub fn momentum_spread(&self) -> Vec3 {
        match self {
            WavePacket::Gaussian(g) if g.centers.len() == 1 => g.covariance.diagonal().map(f64::sqrt),
            WavePacket::Twisted(t) => {
                let s = t.sigma_perp * (t.l.unsigned_abs() as f64 + 1.0).sqrt();
                Vec3::new(s, s, t.sigma3)
            }
            WavePacket::Witness(inner, _) => inner.momentum_spread(),
            _ => self.moments().1,
        }
    }

    /// ∫ c(p) e^{−ip·Δb} d³p: overlap with a copy translated by Δb.
    pub fn overlap(&self, db: &Vec3) -> Complex64 {
        match self {
            WavePacket::Gaussian(g) => g.overlap(db),
            WavePacket::Spin(s) => s.envelope.overlap(db),
            WavePacket::Twisted(t) => t.overlap(db),
            WavePacket::Witness(inner, _) => inner.overlap(db),
        }
    }

    /// Mass fraction (or a bound on it) at p3 ≥ 0.
    pub fn support_leak(&self) -> f64 {
        match self {
            WavePacket::Gaussian(g) => g.support_leak(),
            WavePacket::Spin(s) => s.envelope.support_leak(),
            WavePacket::Twisted(t) => 0.5 * erfc(-t.p3 / (2f64.sqrt() * t.sigma3)),
            WavePacket::Witness(inner, _) => inner.support_leak(),
        }
    }

    /// Load-time validation; returns advisory warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let leak = self.support_leak();
        if leak > SUPPORT_LIMIT {
            return Err(Error::SupportViolation { fraction: leak });
        }
        Ok(self.diagnostics())
    }

    /// Advisory warnings. The |p|/σ3 warning is subsumed by the support
    /// check for accepted packets (5σ leaves ~3e-7 at p3 ≥ 0) but is kept
    /// for packets inspected before validation.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut w = Vec::new();
        if let WavePacket::Twisted(t) = self {
            let ratio = t.p3.abs() / t.sigma3;
            if ratio < LONGITUDINAL_RATIO_WARN {
                w.push(format!("twisted packet has |p|/σ3 = {ratio:.3} < {LONGITUDINAL_RATIO_WARN}"));
            }
        }
        w
    }

    /// True when the packet sits at p⊥ = 0 with transverse spread below
    /// `1e-4·|p|`, where the closed polarization-summed bracket applies.
    pub fn is_normal_incidence(&self) -> bool {
        let m = self.mean_momentum();
        let s = self.momentum_spread();
        let p = m.norm();
        (m[0].hypot(m[1]) <= 1e-12 * p) && s[0].max(s[1]) <= 1e-4 * p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(sig: Vec3) -> GaussianSuperposition {
        GaussianSuperposition::single(Vec3::new(0.0, 0.0, -10.0), sig, Vec3::zeros()).unwrap()
    }

    #[test]
    fn single_gaussian_peak() {
        let g = single(Vec3::new(0.5, 0.7, 1.1));
        let det = (0.25f64 * 0.49 * 1.21).sqrt();
        let expect = 1.0 / ((2.0 * PI).powf(1.5) * det);
        assert!((g.density(&g.mean()) / expect - 1.0).abs() < 1e-14);
    }

    #[test]
    fn normalization_of_each_packet_type() {
        let g = WavePacket::Gaussian(single(Vec3::new(0.5, 0.7, 1.1)));
        assert!((g.normalization(NORMALIZATION_ORDER) - 1.0).abs() < 1e-6);
        let cov = Matrix3::new(1.0, 0.3, 0.1, 0.3, 0.8, -0.2, 0.1, -0.2, 0.5);
        let two = GaussianSuperposition::new(
            Vec3::new(0.1, 0.0, -10.0),
            cov,
            vec![Vec3::zeros(), Vec3::new(0.3, 0.0, 1.5)],
            vec![Complex64::new(1.0, 0.0), Complex64::new(0.3, 0.8)],
            Vec3::zeros(),
        )
        .unwrap();
        assert!((WavePacket::Gaussian(two).normalization(NORMALIZATION_ORDER) - 1.0).abs() < 1e-6);
        for l in [0, 1, 4, 10] {
            let t = TwistedPacket::new(-50.0, 2.0, 0.7, l, TwistedSpin::Natural).unwrap();
            let n = WavePacket::Twisted(t).normalization(NORMALIZATION_ORDER);
            assert!((n - 1.0).abs() < 1e-6, "l = {l}: {n}");
        }
    }

    #[test]
    fn separated_lattice_normalizes_at_low_order() {
        let g = GaussianSuperposition::new(
            Vec3::new(600.0, 0.0, -30000.0),
            Matrix3::from_diagonal(&Vec3::new(4.0, 4.0, 400.0)),
            vec![Vec3::zeros(), Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, 6.0)],
            vec![Complex64::new(1.0, 0.0); 3],
            Vec3::zeros(),
        )
        .unwrap();
        let w = WavePacket::Gaussian(g);
        assert!((w.normalization(NORMALIZATION_ORDER) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_center_modulation() {
        let d = 4.0;
        let g = GaussianSuperposition::new(
            Vec3::new(0.0, 0.0, -10.0),
            Matrix3::identity(),
            vec![Vec3::zeros(), Vec3::new(0.0, 0.0, d)],
            vec![Complex64::new(1.0, 0.0); 2],
            Vec3::zeros(),
        )
        .unwrap();
        for pz in [-11.0, -10.3, -9.1] {
            let p = Vec3::new(0.0, 0.0, pz);
            assert!((structure_factor(&g, &p) - 4.0 * (pz * d / 2.0).cos().powi(2)).abs() < 1e-12);
        }
        assert!((WavePacket::Gaussian(g).normalization(NORMALIZATION_ORDER) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lattice_peaks() {
        let d = 3.0;
        let n = 4;
        let centers = (0..n).map(|j| Vec3::new(0.0, 0.0, j as f64 * d)).collect();
        let g = GaussianSuperposition::new(
            Vec3::new(0.0, 0.0, -10.0),
            Matrix3::identity(),
            centers,
            vec![Complex64::new(0.5, 0.0); n],
            Vec3::zeros(),
        )
        .unwrap();
        let peaks = reciprocal_peaks(d, -12.0, -8.0);
        assert!(!peaks.is_empty());
        for pz in peaks {
            let s = structure_factor(&g, &Vec3::new(0.0, 0.0, pz));
            assert!((s - 16.0 * 0.25).abs() < 1e-12);
        }
        let g1 = single(Vec3::new(1.0, 1.0, 1.0));
        assert_eq!(structure_factor(&g1, &Vec3::new(0.3, 0.1, -3.0)), 1.0);
    }

    #[test]
    fn twisted_l0_is_cylindrical_gaussian() {
        let t = TwistedPacket::new(-20.0, 1.5, 0.4, 0, TwistedSpin::Up).unwrap();
        let g = GaussianSuperposition::single(Vec3::new(0.0, 0.0, -20.0), Vec3::new(0.4, 0.4, 1.5), Vec3::z()).unwrap();
        for p in [Vec3::new(0.1, -0.2, -19.0), Vec3::new(0.5, 0.3, -21.0)] {
            assert!((t.density(&p) / g.density(&p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn twisted_overlap_matches_quadrature() {
        let t = TwistedPacket::new(-30.0, 1.0, 0.5, 3, TwistedSpin::Natural).unwrap();
        let db = Vec3::new(1.3, -0.8, 0.9);
        let w = WavePacket::Twisted(t.clone());
        let q: Complex64 = w.nodes(40).iter().map(|n| Complex64::from_polar(n.weight, -n.p.dot(&db))).sum();
        assert!((q - t.overlap(&db)).norm() < 1e-10);
    }

    #[test]
    fn gaussian_overlap_matches_quadrature() {
        let g = GaussianSuperposition::new(
            Vec3::new(0.2, 0.0, -10.0),
            Matrix3::from_diagonal(&Vec3::new(0.3, 0.5, 0.8)),
            vec![Vec3::zeros(), Vec3::new(0.5, 0.0, 2.0)],
            vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)],
            Vec3::zeros(),
        )
        .unwrap();
        let db = Vec3::new(0.4, 0.3, -1.2);
        let w = WavePacket::Gaussian(g.clone());
        let q: Complex64 = w.nodes(40).iter().map(|n| Complex64::from_polar(n.weight, -n.p.dot(&db))).sum();
        assert!((q - g.overlap(&db)).norm() < 1e-10);
    }

    #[test]
    fn support_and_warnings() {
        let t = TwistedPacket::new(-4.0, 1.0, 0.5, 1, TwistedSpin::Natural).unwrap();
        assert!(matches!(WavePacket::Twisted(t).validate(), Err(Error::SupportViolation { .. })));
        let t = TwistedPacket::new(-8.0, 2.0, 0.5, 1, TwistedSpin::Natural).unwrap();
        // |p|/σ3 = 4: the tail at p3 ≥ 0 is 3e-5
        assert!(WavePacket::Twisted(t.clone()).validate().is_err());
        assert_eq!(WavePacket::Twisted(t).diagnostics().len(), 1);
        let t = TwistedPacket::new(-1000.0, 100.0, 0.5, 1, TwistedSpin::Natural).unwrap();
        assert!(WavePacket::Twisted(t).validate().unwrap().is_empty());
    }

    #[test]
    fn witness_keeps_diagonal_and_phase_is_invisible() {
        let g = WavePacket::Gaussian(single(Vec3::new(0.5, 0.5, 0.5)));
        let w = phase_invariance_witness(&g, 7);
        let p = Vec3::new(0.1, 0.2, -9.8);
        assert_eq!(w.density(&p).to_bits(), g.density(&p).to_bits());
        assert!((w.amplitude(&p).norm_sqr() / g.density(&p) - 1.0).abs() < 1e-12);
        assert!((w.amplitude(&p) - g.amplitude(&p)).norm() > 1e-3 * g.amplitude(&p).norm());
        let t = TwistedPacket::new(-30.0, 1.0, 0.5, 5, TwistedSpin::Up).unwrap();
        let tm = TwistedPacket::new(-30.0, 1.0, 0.5, -5, TwistedSpin::Up).unwrap();
        let q = Vec3::new(0.3, -0.4, -29.0);
        assert_eq!(t.density(&q).to_bits(), tm.density(&q).to_bits());
        assert!((t.amplitude(&q).norm_sqr() / t.density(&q) - 1.0).abs() < 1e-12);
        let z = WavePacket::Witness(Box::new(g.clone()), PhaseField::zero());
        assert_eq!(z.amplitude(&p), g.amplitude(&p));
    }

    #[test]
    fn spin_superposition_rotates_in_plane() {
        let env = single(Vec3::new(0.5, 0.5, 0.5));
        let b = Vec3::new(0.0, 0.0, 2.0);
        let s = SpinSuperposition::new(env, Vec3::z(), 0.0, b, 0.0).unwrap();
        for pz in [-10.0, -10.2, -10.7] {
            let p = Vec3::new(0.0, 0.0, pz);
            let z = s.zeta(&p);
            assert!((z - Vec3::new((pz * 2.0).cos(), (pz * 2.0).sin(), 0.0)).norm() < 1e-14);
        }
        let s2 = SpinSuperposition::new(single(Vec3::new(0.5, 0.5, 0.5)), Vec3::new(0.6, 0.0, 0.8), 2.0, b, 0.3).unwrap();
        assert!((s2.zeta(&Vec3::new(0.1, 0.0, -10.0)).norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn laguerre_polynomials() {
        assert_eq!(laguerre_poly(0, 0.7), 1.0);
        assert!((laguerre_poly(1, 0.7) - 0.3).abs() < 1e-15);
        let x: f64 = 0.7;
        assert!((laguerre_poly(2, x) - (x * x - 4.0 * x + 2.0) / 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn structure_factor_nonnegative(px in -20.0f64..20.0, py in -20.0f64..20.0, pz in -20.0f64..0.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let centers: Vec<Vec3> = (0..4).map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect();
            let weights: Vec<Complex64> = (0..4).map(|_| Complex64::from_polar(rng.random_range(0.1..1.0), rng.random_range(0.0..6.3))).collect();
            let g = GaussianSuperposition::new(Vec3::new(0.0, 0.0, -10.0), Matrix3::identity(), centers, weights, Vec3::zeros()).unwrap();
            let p = Vec3::new(px, py, pz);
            prop_assert!(structure_factor(&g, &p) >= 0.0);
            prop_assert!(g.density(&p) >= 0.0);
        }
    }
}
