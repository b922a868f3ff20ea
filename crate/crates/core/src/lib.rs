//! Pseudonymous rating with charged, TPM-backed credentials.
//!
//! A platform's trusted agent obtains group credentials from a privacy CA,
//! spends each one exactly once at a reputation system, and pays a charging
//! provider that splits revenue between the three operators.

pub mod agent;
pub mod clock;
pub mod codec;
pub mod cp;
pub mod crypto;
pub mod journal;
pub mod pca;
pub mod rs;
pub mod scenario;
pub mod score;
pub mod tpm;
pub mod wire;

use num_rational::Ratio;

/// Exact aggregate score; unbounded so sums over many impacts cannot overflow.
pub type ExactScore = num_rational::BigRational;
/// Floating-point aggregate score.
pub type ApproxScore = f64;
/// Per-group rating weight; always positive.
pub type Impact = Ratio<i64>;
/// Revenue share of one operator; the three shares sum to one.
pub type Share = Ratio<u64>;
