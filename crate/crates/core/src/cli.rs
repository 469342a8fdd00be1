//! Command-line front end.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::classical::n_particle_probability;
use crate::config::{self, RunConfig, RunMethod};
use crate::kinematics::{applicability, build_polarization, solve_final_momentum, PhotonKinematics, PolarizationMode};
use crate::radiation::{closed_form, evaluate_point, ClosedFormArgs, RadiationResult, ScanPolarization};
use crate::verify::{self, Defect, Level};
use crate::wavepackets::WavePacket;
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PHYSICS: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "transrad", version, about = "Transition radiation from Dirac-particle wave packets at an ideal mirror")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan dP/d³k over the detector grid of a run file.
    Spectrum {
        #[arg(short, long)]
        config: PathBuf,
        /// Overrides `[output] path`; `-` writes to stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run the self-verification suites.
    Verify {
        #[arg(long, value_enum, default_value_t = VerifyLevel::Quick)]
        level: VerifyLevel,
        #[arg(long, value_enum, hide = true)]
        inject_defect: Option<DefectArg>,
    },
    /// Coherent radiation of a bunch of packets.
    Nparticle {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VerifyLevel {
    Quick,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DefectArg {
    EpsSign,
}

/// Entry point of the binary; returns the process exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_CONFIG;
    }
    match cli.command {
        Command::Spectrum { config, output } => with_config(&config, output, spectrum),
        Command::Nparticle { config, output } => with_config(&config, output, nparticle),
        Command::Verify { level, inject_defect } => verify_cmd(level, inject_defect),
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("TRANSRAD_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| format!("TRANSRAD_THREADS=`{v}` is not a thread count"))?;
    if n == 0 {
        return Err("TRANSRAD_THREADS must be at least 1".into());
    }
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn with_config(path: &Path, output: Option<PathBuf>, body: fn(&RunConfig) -> Result<String, Error>) -> i32 {
    let src = match std::fs::read_to_string(path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    let cfg = match config::parse(&src) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    let text = match body(&cfg) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return if e.is_physics() { EXIT_PHYSICS } else { EXIT_CONFIG };
        }
    };
    let dest = output.or_else(|| cfg.output.clone());
    let written = match dest {
        Some(p) if p.as_os_str() != "-" => std::fs::write(&p, text).map_err(|e| format!("cannot write {}: {e}", p.display())),
        _ => std::io::stdout().write_all(text.as_bytes()).map_err(|e| e.to_string()),
    };
    match written {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn verify_cmd(level: VerifyLevel, defect: Option<DefectArg>) -> i32 {
    let level = match level {
        VerifyLevel::Quick => Level::Quick,
        VerifyLevel::Full => Level::Full,
    };
    let defect = defect.map(|DefectArg::EpsSign| Defect::EpsSign);
    let reports = verify::run(level, defect);
    let mut ok = true;
    for r in &reports {
        println!(
            "{:<24} {}  worst {:.3e}  tol {:.1e}  checks {}  {:.2} s",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.worst,
            r.tolerance,
            r.samples,
            r.seconds
        );
        for d in &r.details {
            println!("    {d}");
        }
        ok &= r.passed;
    }
    if ok {
        EXIT_OK
    } else {
        EXIT_VERIFY
    }
}

fn fmt_e(x: f64) -> String {
    format!("{x:.12e}")
}

fn header(out: &mut String, cfg: &RunConfig, command: &str) {
    let p = &cfg.particle;
    let _ = writeln!(out, "# transrad {command} {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, "# config_sha256 = {}", cfg.hash);
    let _ = writeln!(
        out,
        "# particle = {} m = {} eV e = {} mu_a = {} 1/eV",
        cfg.particle_kind,
        fmt_e(p.mass()),
        fmt_e(p.charge()),
        fmt_e(p.mu_a())
    );
    let mean = cfg.packet.mean_momentum();
    let spread = cfg.packet.momentum_spread();
    let kind = match &cfg.packet {
        WavePacket::Gaussian(_) => "gaussian",
        WavePacket::Spin(_) => "spin",
        WavePacket::Twisted(_) => "twisted",
        WavePacket::Witness(..) => "witness",
    };
    let _ = writeln!(
        out,
        "# packet = {kind} mean_p = ({}, {}, {}) eV spread = ({}, {}, {}) eV",
        fmt_e(mean[0]),
        fmt_e(mean[1]),
        fmt_e(mean[2]),
        fmt_e(spread[0]),
        fmt_e(spread[1]),
        fmt_e(spread[2])
    );
    let method = match cfg.method {
        RunMethod::Packet(m) => format!("{m:?}"),
        RunMethod::Point(f) => format!("point closed form {f}"),
    };
    let _ = writeln!(out, "# method = {method} rtol = {:e} polarization = {}", cfg.options.quadrature.rtol, cfg.polarization);
    let _ = writeln!(out, "# units: k0 eV; theta, phi rad; dP_d3k and terms and quad_err eV^-3; dP_dk0_dOmega eV^-1 sr^-1");
    for w in &cfg.packet_warnings {
        let _ = writeln!(out, "# warning: {w}");
    }
}

fn error_flag(e: &Error) -> String {
    let tag = match e {
        Error::ChannelClosed { .. } => "channel_closed",
        Error::ChannelClosedOnSupport { .. } => "channel_closed_on_support",
        Error::RegimeViolation(_) => "regime_violation",
        Error::OverlapViolation { .. } => "overlap_violation",
        Error::SupportViolation { .. } => "support_violation",
        Error::UnknownForm(_) => "unknown_form",
        Error::InvalidInput(_) => "invalid_input",
    };
    format!("error:{tag}")
}

fn sanitize(s: &str) -> String {
    s.replace([',', '\n'], " ")
}

fn point_value(cfg: &RunConfig, photon: &PhotonKinematics) -> Result<RadiationResult, Error> {
    match cfg.method {
        RunMethod::Packet(_) => evaluate_point(&cfg.packet, photon, cfg.polarization, &cfg.particle, &cfg.options),
        RunMethod::Point(form) => {
            let (l, sp, s3) = match &cfg.packet {
                WavePacket::Twisted(t) => (t.l(), t.sigma_perp(), t.sigma3()),
                other => (0, 0.0, other.momentum_spread()[2]),
            };
            let args = ClosedFormArgs {
                params: cfg.particle,
                photon: *photon,
                momentum: cfg.packet.mean_momentum().norm(),
                l,
                sigma_perp: sp,
                sigma3: s3,
            };
            closed_form(form, &args)
        }
    }
}

fn spectrum(cfg: &RunConfig) -> Result<String, Error> {
    let grid = cfg.grid.as_ref().ok_or_else(|| Error::invalid("spectrum needs a [detector] block"))?;
    let photons = grid.points();
    use rayon::prelude::*;
    let mean = cfg.packet.mean_momentum();
    let rows: Vec<String> = photons
        .par_iter()
        .map(|ph| {
            let res = point_value(cfg, ph);
            let mut flags: Vec<String> = Vec::new();
            if let Ok(sk) = solve_final_momentum(&mean, ph, cfg.particle.mass()) {
                let rep = applicability(&sk, &cfg.context);
                flags.push(format!("dtheta2_bound={:.3e}", rep.packet_angle_bound));
                flags.push(format!("chi={:.3e}", rep.chi));
                flags.extend(rep.warnings().iter().map(|w| sanitize(w)));
            }
            let cols = match &res {
                Ok(r) => {
                    if r.warnings.is_empty() {
                        flags.insert(0, "ok".into());
                    }
                    flags.extend(r.warnings.iter().map(|w| sanitize(w)));
                    [
                        fmt_e(r.value),
                        fmt_e(r.per_energy_solid_angle(ph.k0())),
                        fmt_e(r.breakdown.e2),
                        fmt_e(r.breakdown.e_mu),
                        fmt_e(r.breakdown.mu2),
                        fmt_e(r.error_estimate),
                    ]
                    .join(",")
                }
                Err(e) => {
                    flags.insert(0, error_flag(e));
                    ["nan"; 6].join(",")
                }
            };
            format!("{},{},{},{},{},{}", fmt_e(ph.k0()), fmt_e(ph.theta()), fmt_e(ph.phi()), cfg.polarization, cols, flags.join(";"))
        })
        .collect();
    let mut out = String::new();
    header(&mut out, cfg, "spectrum");
    out.push_str("k0,theta,phi,pol,dP_d3k,dP_dk0_dOmega,term_e2,term_e_mua,term_mua2,quad_err,flags\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    Ok(out)
}

fn nparticle(cfg: &RunConfig) -> Result<String, Error> {
    let grid = cfg.grid.as_ref().ok_or_else(|| Error::invalid("nparticle needs a [detector] block"))?;
    let members = cfg.bunch.as_ref().ok_or_else(|| Error::invalid("nparticle needs a [bunch] block"))?;
    if matches!(cfg.method, RunMethod::Point(_)) {
        return Err(Error::invalid("nparticle integrates packets; point closed forms do not apply"));
    }
    let modes = match cfg.polarization {
        ScanPolarization::Mode(m) => vec![m],
        ScanPolarization::Summed => vec![PolarizationMode::LinearInPlane, PolarizationMode::LinearOrthogonal],
    };
    let mut out = String::new();
    header(&mut out, cfg, "nparticle");
    let _ = writeln!(out, "# members = {} exchange term neglected", members.len());
    if cfg.particle.mu_a() != 0.0 {
        let _ = writeln!(out, "# note: classical amplitudes carry the charge only; mu_a enters incoherent_quantum alone");
    }
    out.push_str("k0,theta,phi,incoherent_quantum,coherent_classical,total,incoherent_classical,flags\n");
    for ph in grid.points() {
        let mut acc = [0.0; 4];
        let mut flags = Vec::new();
        for &m in &modes {
            let pol = build_polarization(&ph, m)?;
            match n_particle_probability(members, &ph, &pol, &cfg.particle, &cfg.options) {
                Ok(r) => {
                    acc[0] += r.incoherent_quantum;
                    acc[1] += r.coherent_classical;
                    acc[2] += r.total;
                    acc[3] += r.incoherent_classical_subtraction;
                    flags.extend(r.warnings.iter().filter(|w| !w.starts_with("classical amplitudes")).map(|w| sanitize(w)));
                }
                Err(e @ Error::OverlapViolation { .. }) => return Err(e),
                Err(e) => {
                    flags.push(error_flag(&e));
                    acc = [f64::NAN; 4];
                }
            }
        }
        flags.dedup();
        if flags.is_empty() {
            flags.push("ok".into());
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            fmt_e(ph.k0()),
            fmt_e(ph.theta()),
            fmt_e(ph.phi()),
            fmt_e(acc[0]),
            fmt_e(acc[1]),
            fmt_e(acc[2]),
            fmt_e(acc[3]),
            flags.join(";")
        );
    }
    Ok(out)
}
