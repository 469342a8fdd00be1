//! Run configuration: strict TOML with explicit unit suffixes.
//!
//! ```toml
//! [particle]
//! kind = "electron"
//!
//! [packet]
//! type = "gaussian"
//! kinetic_energy = "1 keV"
//! sigma = ["1 eV", "1 eV", "3 eV"]
//!
//! [detector]
//! k0 = { values = ["1 eV"] }
//! theta = { min = "0 deg", max = "80 deg", n = 17 }
//! polarization = "orthogonal"
//! ```

use std::fmt;
use std::ops::Range;
use std::path::PathBuf;

use nalgebra::Matrix3;
use num_complex::Complex64;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use toml::Spanned;

use crate::classical::BunchMember;
use crate::kinematics::{ApplicabilityContext, ParticleParams, PolarizationMode, THETA_MAX_DEFAULT};
use crate::quadrature;
use crate::radiation::{ClosedForm, DetectorGrid, Method, PacketClosedForm, ProbabilityOptions, ScanPolarization};
use crate::units::{self, parse_quantity, Dimension};
use crate::wavepackets::{GaussianSuperposition, SpinSuperposition, TwistedPacket, TwistedSpin, WavePacket};
use crate::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "config error at line {l}, column {c}: {}", self.message),
            _ => write!(f, "config error: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

type Q = Spanned<String>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    particle: Spanned<RawParticle>,
    packet: Spanned<RawPacket>,
    detector: Option<Spanned<RawDetector>>,
    method: Option<Spanned<RawMethod>>,
    output: Option<RawOutput>,
    context: Option<RawContext>,
    bunch: Option<Spanned<RawBunch>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParticle {
    kind: Spanned<String>,
    mass: Option<Q>,
    /// In units of the elementary charge.
    charge: Option<Spanned<f64>>,
    anomaly: Option<Spanned<f64>>,
    mu_a: Option<Q>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPacket {
    #[serde(rename = "type")]
    kind: Spanned<String>,
    kinetic_energy: Option<Q>,
    momentum: Option<Q>,
    incidence_angle: Option<Q>,
    incidence_azimuth: Option<Q>,
    sigma: Option<Spanned<[Q; 3]>>,
    size: Option<Spanned<[Q; 3]>>,
    centers: Option<Spanned<Vec<[Q; 3]>>>,
    weights: Option<Spanned<Vec<[f64; 2]>>>,
    zeta: Option<Spanned<[f64; 3]>>,
    tau: Option<Spanned<[f64; 3]>>,
    kappa: Option<Spanned<f64>>,
    displacement: Option<Spanned<[Q; 3]>>,
    vartheta: Option<Spanned<f64>>,
    sigma3: Option<Q>,
    sigma_perp: Option<Q>,
    size_perp: Option<Q>,
    l: Option<Spanned<i32>>,
    spin: Option<Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAxis {
    values: Option<Vec<Q>>,
    min: Option<Q>,
    max: Option<Q>,
    n: Option<usize>,
    spacing: Option<Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetector {
    k0: Spanned<RawAxis>,
    theta: Spanned<RawAxis>,
    phi: Option<Spanned<RawAxis>>,
    polarization: Option<Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMethod {
    kind: Option<Spanned<String>>,
    rtol: Option<Spanned<f64>>,
    start_level: Option<usize>,
    max_level: Option<Spanned<usize>>,
    theta_max: Option<Q>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    path: Option<String>,
    format: Option<Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawContext {
    plate_size: Option<Q>,
    interaction_time: Option<Q>,
    layer_thickness: Option<Q>,
    packet_p3_scale: Option<Q>,
    packet_pperp_scale: Option<Q>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBunch {
    count: Option<usize>,
    spacing: Option<Spanned<[Q; 3]>>,
    centers: Option<Spanned<Vec<[Q; 3]>>>,
    /// Radians, one per member.
    phases: Option<Spanned<Vec<f64>>>,
}

/// How detector points are evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunMethod {
    Packet(Method),
    /// A point closed form at the packet's mean |p|.
    Point(ClosedForm),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub particle: ParticleParams,
    pub particle_kind: String,
    pub packet: WavePacket,
    pub packet_warnings: Vec<String>,
    pub grid: Option<DetectorGrid>,
    pub polarization: ScanPolarization,
    pub method: RunMethod,
    pub options: ProbabilityOptions,
    pub output: Option<PathBuf>,
    pub context: ApplicabilityContext,
    pub bunch: Option<Vec<BunchMember>>,
    /// sha256 of the configuration text.
    pub hash: String,
}

struct Ctx<'a> {
    src: &'a str,
}

impl Ctx<'_> {
    fn err(&self, span: Range<usize>, msg: impl Into<String>) -> ConfigError {
        let start = span.start.min(self.src.len());
        let before = &self.src[..start];
        let line = before.matches('\n').count() + 1;
        let column = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
        ConfigError { line: Some(line), column: Some(column), message: msg.into() }
    }

    fn q(&self, q: &Q, dim: Dimension) -> Result<f64, ConfigError> {
        parse_quantity(q.get_ref(), dim).map_err(|e| self.err(q.span(), e.to_string()))
    }

    fn vec3(&self, v: &Spanned<[Q; 3]>, dim: Dimension) -> Result<Vec3, ConfigError> {
        let a = v.get_ref();
        Ok(Vec3::new(self.q(&a[0], dim)?, self.q(&a[1], dim)?, self.q(&a[2], dim)?))
    }

    fn positive(&self, q: &Q, dim: Dimension) -> Result<f64, ConfigError> {
        let v = self.q(q, dim)?;
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(q.span(), format!("`{}` must be positive", q.get_ref())))
        }
    }

    fn axis(&self, a: &Spanned<RawAxis>, dim: Dimension) -> Result<Vec<f64>, ConfigError> {
        let r = a.get_ref();
        match (&r.values, &r.min, &r.max) {
            (Some(v), None, None) if r.n.is_none() && r.spacing.is_none() => {
                if v.is_empty() {
                    return Err(self.err(a.span(), "axis `values` is empty"));
                }
                v.iter().map(|q| self.q(q, dim)).collect()
            }
            (None, Some(lo), Some(hi)) => {
                let (x0, x1) = (self.q(lo, dim)?, self.q(hi, dim)?);
                let n = r.n.unwrap_or(1);
                if n == 0 {
                    return Err(self.err(a.span(), "axis needs n ≥ 1"));
                }
                if n == 1 {
                    return Ok(vec![x0]);
                }
                let log = match r.spacing.as_ref().map(|s| s.get_ref().as_str()) {
                    None | Some("linear") => false,
                    Some("log") => true,
                    Some(other) => {
                        let s = r.spacing.as_ref().unwrap();
                        return Err(self.err(s.span(), format!("unknown spacing `{other}` (linear | log)")));
                    }
                };
                if log && !(x0 > 0.0 && x1 > 0.0) {
                    return Err(self.err(a.span(), "log spacing needs positive bounds"));
                }
                Ok((0..n)
                    .map(|i| {
                        let t = i as f64 / (n - 1) as f64;
                        if log {
                            (x0.ln() + t * (x1.ln() - x0.ln())).exp()
                        } else {
                            x0 + t * (x1 - x0)
                        }
                    })
                    .collect())
            }
            _ => Err(self.err(a.span(), "axis takes either `values` or `min`/`max`/`n`/`spacing`")),
        }
    }
}

fn require<'a, T>(ctx: &Ctx, v: &'a Option<T>, span: Range<usize>, name: &str, what: &str) -> Result<&'a T, ConfigError> {
    v.as_ref().ok_or_else(|| ctx.err(span, format!("{what} needs `{name}`")))
}

fn reject<T>(ctx: &Ctx, v: &Option<Spanned<T>>, name: &str, what: &str) -> Result<(), ConfigError> {
    match v {
        Some(s) => Err(ctx.err(s.span(), format!("`{name}` does not apply to {what}"))),
        None => Ok(()),
    }
}

fn particle(ctx: &Ctx, raw: &Spanned<RawParticle>) -> Result<(ParticleParams, String), ConfigError> {
    let r = raw.get_ref();
    let kind = r.kind.get_ref().as_str();
    let preset = |p: ParticleParams| -> Result<_, ConfigError> {
        reject(ctx, &r.mass, "mass", "a preset particle")?;
        reject(ctx, &r.charge, "charge", "a preset particle")?;
        reject(ctx, &r.anomaly, "anomaly", "a preset particle")?;
        reject(ctx, &r.mu_a, "mu_a", "a preset particle")?;
        Ok(p)
    };
    let p = match kind {
        "electron" => preset(ParticleParams::electron())?,
        "neutron" => preset(ParticleParams::neutron())?,
        "custom" => {
            let m = ctx.positive(require(ctx, &r.mass, raw.span(), "mass", "a custom particle")?, Dimension::Energy)?;
            let e = r.charge.as_ref().map_or(0.0, |c| *c.get_ref()) * units::elementary_charge();
            let built = match (&r.anomaly, &r.mu_a) {
                (Some(_), Some(mu)) => return Err(ctx.err(mu.span(), "give either `anomaly` or `mu_a`, not both")),
                (Some(a), None) if e != 0.0 => ParticleParams::charged(m, e, *a.get_ref()),
                (Some(a), None) => return Err(ctx.err(a.span(), "`anomaly` needs a nonzero charge; use `mu_a`")),
                (None, Some(mu)) if e == 0.0 => ParticleParams::neutral(m, ctx.q(mu, Dimension::InverseEnergy)?),
                (None, Some(mu)) => return Err(ctx.err(mu.span(), "charged particles take `anomaly`, not `mu_a`")),
                (None, None) => ParticleParams::charged(m, e, 0.0),
            };
            built.map_err(|e| ctx.err(raw.span(), e.to_string()))?
        }
        other => return Err(ctx.err(r.kind.span(), format!("unknown particle kind `{other}` (electron | neutron | custom)"))),
    };
    Ok((p, kind.to_string()))
}

fn mean_momentum(ctx: &Ctx, r: &RawPacket, span: Range<usize>, m: f64) -> Result<f64, ConfigError> {
    match (&r.kinetic_energy, &r.momentum) {
        (Some(t), None) => Ok(units::momentum_from_kinetic(m, ctx.positive(t, Dimension::Energy)?)),
        (None, Some(p)) => ctx.positive(p, Dimension::Energy),
        _ => Err(ctx.err(span, "packet needs exactly one of `kinetic_energy`, `momentum`")),
    }
}

fn gaussian(ctx: &Ctx, r: &RawPacket, span: Range<usize>, m: f64) -> Result<GaussianSuperposition, ConfigError> {
    let p = mean_momentum(ctx, r, span.clone(), m)?;
    let a = r.incidence_angle.as_ref().map(|q| ctx.q(q, Dimension::Angle)).transpose()?.unwrap_or(0.0);
    let b = r.incidence_azimuth.as_ref().map(|q| ctx.q(q, Dimension::Angle)).transpose()?.unwrap_or(0.0);
    let mean = Vec3::new(p * a.sin() * b.cos(), p * a.sin() * b.sin(), -p * a.cos());
    let sigma = match (&r.sigma, &r.size) {
        (Some(s), None) => ctx.vec3(s, Dimension::Energy)?,
        (None, Some(s)) => ctx.vec3(s, Dimension::Length)?.map(|x| 1.0 / x),
        _ => return Err(ctx.err(span, "gaussian packet needs exactly one of `sigma`, `size`")),
    };
    let sspan = r.sigma.as_ref().map(|s| s.span()).or(r.size.as_ref().map(|s| s.span())).unwrap();
    if !sigma.iter().all(|&s| s > 0.0 && s.is_finite()) {
        return Err(ctx.err(sspan, "widths must be positive"));
    }
    let centers: Vec<Vec3> = match &r.centers {
        Some(c) => c
            .get_ref()
            .iter()
            .map(|b| Ok(Vec3::new(ctx.q(&b[0], Dimension::Length)?, ctx.q(&b[1], Dimension::Length)?, ctx.q(&b[2], Dimension::Length)?)))
            .collect::<Result<_, ConfigError>>()?,
        None => vec![Vec3::zeros()],
    };
    let weights: Vec<Complex64> = match &r.weights {
        Some(w) => {
            if w.get_ref().len() != centers.len() {
                return Err(ctx.err(w.span(), format!("{} weights for {} centers", w.get_ref().len(), centers.len())));
            }
            w.get_ref().iter().map(|[re, im]| Complex64::new(*re, *im)).collect()
        }
        None => vec![Complex64::new(1.0, 0.0); centers.len()],
    };
    let zeta = r.zeta.as_ref().map_or(Vec3::zeros(), |z| Vec3::from(*z.get_ref()));
    let cov = Matrix3::from_diagonal(&sigma.component_mul(&sigma));
    GaussianSuperposition::new(mean, cov, centers, weights, zeta).map_err(|e| {
        let at = r.zeta.as_ref().map_or(span.clone(), |z| z.span());
        ctx.err(if e.to_string().contains("ζ") { at } else { span.clone() }, e.to_string())
    })
}

fn packet(ctx: &Ctx, raw: &Spanned<RawPacket>, m: f64) -> Result<WavePacket, ConfigError> {
    let r = raw.get_ref();
    let span = raw.span();
    let kind = r.kind.get_ref().as_str();
    let twisted_only = |what: &str| -> Result<(), ConfigError> {
        reject(ctx, &r.sigma3, "sigma3", what)?;
        reject(ctx, &r.sigma_perp, "sigma_perp", what)?;
        reject(ctx, &r.size_perp, "size_perp", what)?;
        reject(ctx, &r.l, "l", what)?;
        reject(ctx, &r.spin, "spin", what)
    };
    let spin_only = |what: &str| -> Result<(), ConfigError> {
        reject(ctx, &r.tau, "tau", what)?;
        reject(ctx, &r.kappa, "kappa", what)?;
        reject(ctx, &r.displacement, "displacement", what)?;
        reject(ctx, &r.vartheta, "vartheta", what)
    };
    let packet = match kind {
        "gaussian" => {
            twisted_only("a gaussian packet")?;
            spin_only("a gaussian packet")?;
            WavePacket::Gaussian(gaussian(ctx, r, span.clone(), m)?)
        }
        "spin" => {
            twisted_only("a spin packet")?;
            reject(ctx, &r.zeta, "zeta", "a spin packet (ζ follows from tau, kappa, displacement)")?;
            let env = gaussian(ctx, r, span.clone(), m)?;
            let tau = Vec3::from(*require(ctx, &r.tau, span.clone(), "tau", "a spin packet")?.get_ref());
            let kappa = r.kappa.as_ref().map_or(0.0, |k| *k.get_ref());
            let disp = r.displacement.as_ref().map(|d| ctx.vec3(d, Dimension::Length)).transpose()?.unwrap_or_default();
            let vt = r.vartheta.as_ref().map_or(0.0, |v| *v.get_ref());
            WavePacket::Spin(
                SpinSuperposition::new(env, tau, kappa, disp, vt)
                    .map_err(|e| ctx.err(r.tau.as_ref().map_or(span.clone(), |t| t.span()), e.to_string()))?,
            )
        }
        "twisted" => {
            spin_only("a twisted packet")?;
            for (name, v) in [
                ("sigma", r.sigma.as_ref().map(|s| s.span())),
                ("size", r.size.as_ref().map(|s| s.span())),
                ("centers", r.centers.as_ref().map(|s| s.span())),
                ("weights", r.weights.as_ref().map(|s| s.span())),
                ("zeta", r.zeta.as_ref().map(|s| s.span())),
                ("incidence_angle", r.incidence_angle.as_ref().map(|s| s.span())),
                ("incidence_azimuth", r.incidence_azimuth.as_ref().map(|s| s.span())),
            ] {
                if let Some(s) = v {
                    return Err(ctx.err(s, format!("`{name}` does not apply to a twisted packet")));
                }
            }
            let p = mean_momentum(ctx, r, span.clone(), m)?;
            let s3 = ctx.positive(require(ctx, &r.sigma3, span.clone(), "sigma3", "a twisted packet")?, Dimension::Energy)?;
            let sp = match (&r.sigma_perp, &r.size_perp) {
                (Some(s), None) => ctx.positive(s, Dimension::Energy)?,
                (None, Some(s)) => 1.0 / ctx.positive(s, Dimension::Length)?,
                _ => return Err(ctx.err(span, "twisted packet needs exactly one of `sigma_perp`, `size_perp`")),
            };
            let l = r.l.as_ref().map_or(0, |l| *l.get_ref());
            let spin = match r.spin.as_ref().map(|s| s.get_ref().as_str()) {
                None | Some("natural") => TwistedSpin::Natural,
                Some("up") => TwistedSpin::Up,
                Some("down") => TwistedSpin::Down,
                Some(other) => {
                    return Err(ctx.err(r.spin.as_ref().unwrap().span(), format!("unknown spin `{other}` (up | down | natural)")))
                }
            };
            WavePacket::Twisted(TwistedPacket::new(-p, s3, sp, l, spin).map_err(|e| ctx.err(span.clone(), e.to_string()))?)
        }
        other => return Err(ctx.err(r.kind.span(), format!("unknown packet type `{other}` (gaussian | spin | twisted)"))),
    };
    Ok(packet)
}

fn polarization(ctx: &Ctx, s: Option<&Spanned<String>>) -> Result<ScanPolarization, ConfigError> {
    let Some(s) = s else { return Ok(ScanPolarization::Summed) };
    Ok(match s.get_ref().as_str() {
        "summed" => ScanPolarization::Summed,
        "in-plane" => ScanPolarization::Mode(PolarizationMode::LinearInPlane),
        "orthogonal" => ScanPolarization::Mode(PolarizationMode::LinearOrthogonal),
        "helicity+" => ScanPolarization::Mode(PolarizationMode::Helicity(1)),
        "helicity-" => ScanPolarization::Mode(PolarizationMode::Helicity(-1)),
        other => {
            return Err(
                ctx.err(s.span(), format!("unknown polarization `{other}` (summed | in-plane | orthogonal | helicity+ | helicity-)"))
            )
        }
    })
}

fn method(ctx: &Ctx, raw: Option<&Spanned<RawMethod>>) -> Result<(RunMethod, ProbabilityOptions, f64), ConfigError> {
    let mut opts = ProbabilityOptions::default();
    let Some(raw) = raw else { return Ok((RunMethod::Packet(Method::FastPath), opts, THETA_MAX_DEFAULT)) };
    let r = raw.get_ref();
    let m = match r.kind.as_ref().map(|k| (k.get_ref().as_str(), k.span())) {
        None | Some(("fastpath", _)) => RunMethod::Packet(Method::FastPath),
        Some(("general", _)) => RunMethod::Packet(Method::General),
        Some((s, span)) if s.starts_with("closedform:") => {
            let name = &s["closedform:".len()..];
            let packet_forms = [
                PacketClosedForm::OrthoSmallRecoil,
                PacketClosedForm::SummedSmallRecoil,
                PacketClosedForm::TwistedCharge,
                PacketClosedForm::TwistedNeutral,
            ];
            if let Some(f) = packet_forms.into_iter().find(|f| f.name() == name) {
                RunMethod::Packet(Method::ClosedForm(f))
            } else {
                RunMethod::Point(name.parse().map_err(|e: crate::Error| ctx.err(span, e.to_string()))?)
            }
        }
        Some((other, span)) => return Err(ctx.err(span, format!("unknown method `{other}` (general | fastpath | closedform:<name>)"))),
    };
    if let Some(t) = &r.rtol {
        let v = *t.get_ref();
        if !(v > 0.0 && v < 1.0) {
            return Err(ctx.err(t.span(), "rtol must lie in (0, 1)"));
        }
        opts.quadrature.rtol = v;
    }
    let ladder = quadrature::ORDER_LADDER.len() - 1;
    if let Some(s) = r.start_level {
        opts.quadrature.start = s.min(ladder);
    }
    if let Some(mx) = &r.max_level {
        if *mx.get_ref() > ladder {
            return Err(ctx.err(mx.span(), format!("max_level must be ≤ {ladder}")));
        }
        opts.quadrature.max = *mx.get_ref();
    }
    opts.quadrature.start = opts.quadrature.start.min(opts.quadrature.max);
    let tmax = match &r.theta_max {
        Some(q) => {
            let t = ctx.q(q, Dimension::Angle)?;
            if !(0.0..std::f64::consts::FRAC_PI_2).contains(&t) {
                return Err(ctx.err(q.span(), "theta_max must lie in [0, 90 deg)"));
            }
            t
        }
        None => THETA_MAX_DEFAULT,
    };
    let m = match m {
        RunMethod::Packet(m) => {
            opts.method = m;
            RunMethod::Packet(m)
        }
        p => p,
    };
    Ok((m, opts, tmax))
}

fn point_form_polarization(form: ClosedForm) -> ScanPolarization {
    match form {
        ClosedForm::SummedPolSmallRecoil => ScanPolarization::Summed,
        ClosedForm::TwistedEInplane | ClosedForm::TwistedNInplane => ScanPolarization::Mode(PolarizationMode::LinearInPlane),
        _ => ScanPolarization::Mode(PolarizationMode::LinearOrthogonal),
    }
}

fn bunch(ctx: &Ctx, raw: &Spanned<RawBunch>, packet: &WavePacket) -> Result<Vec<BunchMember>, ConfigError> {
    let r = raw.get_ref();
    let centers: Vec<Vec3> = match (&r.centers, &r.count, &r.spacing) {
        (Some(c), None, None) => c
            .get_ref()
            .iter()
            .map(|b| Ok(Vec3::new(ctx.q(&b[0], Dimension::Length)?, ctx.q(&b[1], Dimension::Length)?, ctx.q(&b[2], Dimension::Length)?)))
            .collect::<Result<_, ConfigError>>()?,
        (None, Some(n), Some(d)) => {
            let d = ctx.vec3(d, Dimension::Length)?;
            (0..*n).map(|j| d * j as f64).collect()
        }
        _ => return Err(ctx.err(raw.span(), "bunch takes either `centers` or `count` with `spacing`")),
    };
    if centers.is_empty() {
        return Err(ctx.err(raw.span(), "bunch has no members"));
    }
    let phases = match &r.phases {
        Some(p) if p.get_ref().len() != centers.len() => {
            return Err(ctx.err(p.span(), format!("{} phases for {} members", p.get_ref().len(), centers.len())))
        }
        Some(p) => p.get_ref().clone(),
        None => vec![0.0; centers.len()],
    };
    Ok(centers.into_iter().zip(phases).map(|(c, ph)| BunchMember::new(packet.clone(), c).with_phase(ph)).collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses and validates a configuration. Every error names its line.
pub fn parse(src: &str) -> Result<RunConfig, ConfigError> {
    let ctx = Ctx { src };
    let raw: RawConfig = toml::from_str(src).map_err(|e| match e.span() {
        Some(s) => ctx.err(s, e.message().to_string()),
        None => ConfigError { line: None, column: None, message: e.message().to_string() },
    })?;
    let (particle, particle_kind) = particle(&ctx, &raw.particle)?;
    let packet = packet(&ctx, &raw.packet, particle.mass())?;
    let packet_warnings = packet.validate().map_err(|e| ctx.err(raw.packet.span(), e.to_string()))?;

    let (run_method, options, theta_max) = method(&ctx, raw.method.as_ref())?;
    let (grid, mut pol) = match &raw.detector {
        Some(d) => {
            let r = d.get_ref();
            let k0 = ctx.axis(&r.k0, Dimension::Energy)?;
            let theta = ctx.axis(&r.theta, Dimension::Angle)?;
            let phi = r.phi.as_ref().map(|p| ctx.axis(p, Dimension::Angle)).transpose()?.unwrap_or_else(|| vec![0.0]);
            let grid = DetectorGrid::new(k0, theta, phi, Some(theta_max)).map_err(|e| ctx.err(d.span(), e.to_string()))?;
            (Some(grid), polarization(&ctx, r.polarization.as_ref())?)
        }
        None => (None, ScanPolarization::Summed),
    };
    if let RunMethod::Point(form) = run_method {
        let want = point_form_polarization(form);
        let given = raw.detector.as_ref().and_then(|d| d.get_ref().polarization.as_ref());
        match given {
            Some(g) if polarization(&ctx, Some(g))? != want => {
                return Err(ctx.err(g.span(), format!("closed form {form} fixes the polarization to `{want}`")));
            }
            _ => pol = want,
        }
        let mean = packet.mean_momentum();
        if mean[0].hypot(mean[1]) > 1e-12 * mean.norm() {
            let span = raw.method.as_ref().map_or(raw.packet.span(), |m| m.span());
            return Err(ctx.err(span, "point closed forms need a packet at normal incidence"));
        }
    }
    if let RunMethod::Packet(Method::ClosedForm(PacketClosedForm::SummedSmallRecoil)) = run_method {
        if pol != ScanPolarization::Summed {
            return Err(ctx.err(raw.method.as_ref().unwrap().span(), "summed_small_recoil needs polarization = \"summed\""));
        }
    }

    let context = match &raw.context {
        Some(c) => {
            let opt = |q: &Option<Q>, d| q.as_ref().map(|q| ctx.positive(q, d)).transpose();
            ApplicabilityContext {
                plate_size: opt(&c.plate_size, Dimension::Length)?,
                interaction_time: opt(&c.interaction_time, Dimension::Time)?,
                layer_thickness: opt(&c.layer_thickness, Dimension::Length)?,
                packet_p3_scale: opt(&c.packet_p3_scale, Dimension::Energy)?,
                packet_pperp_scale: opt(&c.packet_pperp_scale, Dimension::Energy)?,
            }
        }
        None => ApplicabilityContext::default(),
    };
    let mut context = context;
    let spread = packet.momentum_spread();
    context.packet_p3_scale.get_or_insert(spread[2]);
    context.packet_pperp_scale.get_or_insert(spread[0].max(spread[1]));

    let output = match &raw.output {
        Some(o) => {
            if let Some(f) = &o.format {
                if f.get_ref() != "csv" {
                    return Err(ctx.err(f.span(), format!("unknown output format `{}` (csv)", f.get_ref())));
                }
            }
            o.path.as_ref().map(PathBuf::from)
        }
        None => None,
    };
    let bunch = raw.bunch.as_ref().map(|b| bunch(&ctx, b, &packet)).transpose()?;
    Ok(RunConfig {
        particle,
        particle_kind,
        packet,
        packet_warnings,
        grid,
        polarization: pol,
        method: run_method,
        options,
        output,
        context,
        bunch,
        hash: sha256_hex(src.as_bytes()),
    })
}
