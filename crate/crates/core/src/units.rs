//! Unit conversion at the I/O boundary.
//!
//! Internally every dimensionful quantity is a power of energy measured in eV
//! (ħ = c = 1). Lengths and times become inverse energies through ħc and ħ.

use crate::{Error, Result};

/// Fine-structure constant (CODATA 2018).
pub const ALPHA: f64 = 7.297_352_569_3e-3;
/// ħc in eV·nm.
pub const HBAR_C_EV_NM: f64 = 197.326_980_4;
/// ħ in eV·s.
pub const HBAR_EV_S: f64 = 6.582_119_569e-16;

pub const ELECTRON_MASS_EV: f64 = 510_998.950_00;
pub const ELECTRON_ANOMALY: f64 = 1.159_652_181_28e-3;
pub const PROTON_MASS_EV: f64 = 938_272_088.16;
pub const NEUTRON_MASS_EV: f64 = 939_565_420.52;
/// Neutron magnetic moment in nuclear magnetons.
pub const NEUTRON_MOMENT_NUCLEAR_MAGNETONS: f64 = -1.913_042_73;

/// Elementary charge in natural Heaviside-Lorentz units, e² = 4πα.
pub fn elementary_charge() -> f64 {
    (4.0 * std::f64::consts::PI * ALPHA).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Energy,
    Length,
    Time,
    Angle,
    InverseEnergy,
}

/// Parses `"<number> <unit>"` and returns the value in internal units
/// (eV, 1/eV, rad).
pub fn parse_quantity(text: &str, dim: Dimension) -> Result<f64> {
    let text = text.trim();
    // longest numeric prefix; the remainder is the unit
    let (value, unit) = (1..=text.len())
        .rev()
        .filter(|&i| text.is_char_boundary(i))
        .find_map(|i| text[..i].trim().parse::<f64>().ok().map(|v| (v, text[i..].trim())))
        .ok_or_else(|| Error::invalid(format!("`{text}`: expected `<number> <unit>`")))?;
    if unit.is_empty() {
        return Err(Error::invalid(format!("`{text}` has no unit suffix")));
    }
    let scale = unit_scale(unit, dim).ok_or_else(|| Error::invalid(format!("`{text}`: unit `{unit}` is not a valid {dim:?} unit")))?;
    Ok(value * scale)
}

fn unit_scale(unit: &str, dim: Dimension) -> Option<f64> {
    use Dimension::*;
    let s = match (dim, unit) {
        (Energy, "eV") => 1.0,
        (Energy, "keV") => 1e3,
        (Energy, "MeV") => 1e6,
        (Energy, "GeV") => 1e9,
        (InverseEnergy, "1/eV") | (InverseEnergy, "eV^-1") => 1.0,
        (InverseEnergy, "1/keV") | (InverseEnergy, "keV^-1") => 1e-3,
        (InverseEnergy, "1/MeV") | (InverseEnergy, "MeV^-1") => 1e-6,
        (InverseEnergy, "1/GeV") | (InverseEnergy, "GeV^-1") => 1e-9,
        (Length, "nm") => 1.0 / HBAR_C_EV_NM,
        (Length, "um") => 1e3 / HBAR_C_EV_NM,
        (Length, "mm") => 1e6 / HBAR_C_EV_NM,
        (Length, "m") => 1e9 / HBAR_C_EV_NM,
        (Time, "fs") => 1e-15 / HBAR_EV_S,
        (Time, "ps") => 1e-12 / HBAR_EV_S,
        (Time, "ns") => 1e-9 / HBAR_EV_S,
        (Time, "s") => 1.0 / HBAR_EV_S,
        (Angle, "rad") => 1.0,
        (Angle, "deg") => std::f64::consts::PI / 180.0,
        _ => return None,
    };
    Some(s)
}

/// Transverse momentum spread associated with a transverse packet size,
/// σ⊥ = ħc / size.
pub fn momentum_spread_from_size(size_nm: f64) -> f64 {
    HBAR_C_EV_NM / size_nm
}

/// Momentum (eV) of a particle of mass `m` (eV) with kinetic energy `t` (eV).
pub fn momentum_from_kinetic(m: f64, t: f64) -> f64 {
    (t * (t + 2.0 * m)).sqrt()
}

/// Kinetic energy from momentum, written to avoid cancellation at small p.
pub fn kinetic_from_momentum(m: f64, p: f64) -> f64 {
    p * p / ((m * m + p * p).sqrt() + m)
}
