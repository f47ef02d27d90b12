//! Crate-wide error type.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the simulation and training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value failed validation.
    #[error("config: {0}")]
    Config(String),

    /// An array argument had the wrong length.
    #[error("{context}: expected length {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A non-finite value was fed to a numerical kernel.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// Propagation broke down at a specific step.
    #[error("propagation failed at step {step}: {reason}")]
    Propagation { step: usize, reason: String },

    /// A trajectory or series was too short for the requested slicing.
    #[error("{context}: need at least {needed} points, have {actual}")]
    TooShort {
        context: &'static str,
        needed: usize,
        actual: usize,
    },

    /// A container file did not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    /// A container file was written by a newer format revision.
    #[error("unsupported container version {found}, this build reads up to {supported}")]
    UnsupportedVersion { found: u16, supported: u16 },

    /// A container file ended in the middle of a section.
    #[error("truncated container while reading {section}")]
    Truncated { section: &'static str },

    /// The container checksum did not match its payload.
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    /// A gradient tensor picked up a NaN or infinity.
    #[error("non-finite gradient in {tensor}")]
    NonFiniteGradient { tensor: &'static str },

    /// Training hit a non-finite loss and stopped.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
