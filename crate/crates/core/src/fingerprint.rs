//! Initial-TTL fingerprinting of responding interfaces.
//!
//! Router stacks start their replies at one of a handful of initial TTLs. The
//! TTL seen on arrival, corrected by the return path length, is rounded up to
//! the nearest of those classes.

use core::fmt;

/// One of the common initial TTL values: 32, 64, 128 or 255.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "u8", into = "u8"))]
pub struct InitialTtlClass(u8);

impl InitialTtlClass {
    pub const CLASSES: [u8; 4] = [32, 64, 128, 255];

    pub fn value(self) -> u8 {
        self.0
    }

    /// Smallest class that is at least `ttl`.
    pub fn covering(ttl: u8) -> Self {
        let v = Self::CLASSES
            .into_iter()
            .find(|&c| c >= ttl)
            .unwrap_or(255);
        Self(v)
    }
}

impl TryFrom<u8> for InitialTtlClass {
    type Error = FingerprintError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        if Self::CLASSES.contains(&v) {
            Ok(Self(v))
        } else {
            Err(FingerprintError::NotAClass(v))
        }
    }
}

impl From<InitialTtlClass> for u8 {
    fn from(c: InitialTtlClass) -> u8 {
        c.0
    }
}

impl fmt::Display for InitialTtlClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum FingerprintError {
    #[error("corrected TTL {0} exceeds 255")]
    OutOfRange(u32),
    #[error("hop distance must be at least 1")]
    ZeroDistance,
    #[error("{0} is not an initial TTL class")]
    NotAClass(u8),
}

/// Infers the initial TTL class of a reply that arrived with `reply_ip_ttl`
/// from an interface `hop_distance` hops away.
pub fn infer_initial_ttl(
    reply_ip_ttl: u8,
    hop_distance: u32,
) -> Result<InitialTtlClass, FingerprintError> {
    if hop_distance == 0 {
        return Err(FingerprintError::ZeroDistance);
    }
    let corrected = u32::from(reply_ip_ttl) + hop_distance - 1;
    let corrected = u8::try_from(corrected).map_err(|_| FingerprintError::OutOfRange(corrected))?;
    Ok(InitialTtlClass::covering(corrected))
}
