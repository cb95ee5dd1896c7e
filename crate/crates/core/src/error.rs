//! Error types shared across the core modules.

use alloc::string::String;
use core::fmt;

/// Any failure reported by the core algorithms.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Grid or cordon geometry request cannot be built.
    Geometry(String),
    /// Operation called on an intersection outside its domain
    /// (e.g. movement partitioning on a non-cordon signal).
    Domain(String),
    /// Demand schedule is structurally invalid.
    Demand(String),
    /// No path exists between the requested links.
    Unreachable { origin: u32, destination: u32 },
    /// Network layer dimensions do not line up.
    DimMismatch { expected: usize, got: usize },
    /// Weight blob cannot be decoded; offset points at the failing byte.
    Decode { offset: usize, reason: String },
    /// Controller configuration or command is invalid.
    Control(String),
    /// Training produced a non-finite quantity.
    NonFinite(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Geometry(msg) => write!(f, "invalid geometry: {msg}"),
            CoreError::Domain(msg) => write!(f, "domain error: {msg}"),
            CoreError::Demand(msg) => write!(f, "invalid demand schedule: {msg}"),
            CoreError::Unreachable {
                origin,
                destination,
            } => write!(f, "no route from link {origin} to link {destination}"),
            CoreError::DimMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            CoreError::Decode { offset, reason } => {
                write!(f, "weight decode error at byte {offset}: {reason}")
            }
            CoreError::Control(msg) => write!(f, "controller error: {msg}"),
            CoreError::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type CoreResult<T> = core::result::Result<T, CoreError>;
