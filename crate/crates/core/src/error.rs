use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// The photon takes more energy or transverse momentum than the incident
    /// particle can give up while staying on shell.
    #[error("channel closed at k0 = {k0:.6e}: {reason}")]
    ChannelClosed { k0: f64, reason: &'static str },

    #[error("channel closed on {fraction:.3e} of the packet mass (limit 1e-6)")]
    ChannelClosedOnSupport { fraction: f64 },

    #[error("regime violation: {0}")]
    RegimeViolation(String),

    #[error("unknown closed form `{0}`")]
    UnknownForm(String),

    #[error("packets {i} and {j} overlap by {overlap:.3e} (limit 1e-3)")]
    OverlapViolation { i: usize, j: usize, overlap: f64 },

    #[error("packet support: {fraction:.3e} of the density sits at p3 >= 0 (limit 1e-8)")]
    SupportViolation { fraction: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Physics errors map to exit code 3, everything else is a usage error.
    pub fn is_physics(&self) -> bool {
        !matches!(self, Error::InvalidInput(_) | Error::UnknownForm(_))
    }
}
