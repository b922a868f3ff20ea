//! Impact-weighted rating aggregation, generic over the scalar type.
//!
//! The reputation system aggregates in exact rationals ([`crate::ExactScore`]);
//! `f64`/`f32` are available for callers that want a float directly.

use std::fmt::Debug;

use num_bigint::{BigInt, Sign};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{Num, One};

use crate::codec::{DecodeError, DecodeResult, Reader, Writer};
use crate::{ExactScore, Impact};

/// Scalars a weighted score can be computed in.
pub trait ScoreScalar: Num + Clone + PartialOrd + Debug + Send + Sync + 'static {
    fn from_score(score: i32) -> Self;
    fn from_impact(impact: &Impact) -> Self;
}

macro_rules! float_scalar {
    ($t:ty) => {
        impl ScoreScalar for $t {
            fn from_score(score: i32) -> Self {
                score as $t
            }

            fn from_impact(impact: &Impact) -> Self {
                *impact.numer() as $t / *impact.denom() as $t
            }
        }
    };
}

float_scalar!(f32);
float_scalar!(f64);

impl ScoreScalar for BigRational {
    fn from_score(score: i32) -> Self {
        BigRational::from_integer(BigInt::from(score))
    }

    fn from_impact(impact: &Impact) -> Self {
        BigRational::new(BigInt::from(*impact.numer()), BigInt::from(*impact.denom()))
    }
}

/// Writes an exact score as signed big-endian numerator and denominator.
pub fn write_exact(w: &mut Writer, score: &ExactScore) {
    w.bytes(&score.numer().to_signed_bytes_be()).bytes(&score.denom().to_signed_bytes_be());
}

/// Reads a score written by [`write_exact`]; only the canonical form is accepted.
pub fn read_exact(r: &mut Reader<'_>) -> DecodeResult<ExactScore> {
    let (n, d) = (r.bytes()?, r.bytes()?);
    let (numer, denom) = (BigInt::from_signed_bytes_be(&n), BigInt::from_signed_bytes_be(&d));
    if denom.sign() != Sign::Plus || numer.gcd(&denom) != BigInt::one() {
        return Err(DecodeError::Invalid("score must be in lowest terms with a positive denominator"));
    }
    if numer.to_signed_bytes_be() != n || denom.to_signed_bytes_be() != d {
        return Err(DecodeError::Invalid("non-minimal integer encoding"));
    }
    Ok(ExactScore::new_raw(numer, denom))
}

/// `Σ impactᵢ·scoreᵢ / Σ impactᵢ`, or `None` when there is nothing to weigh.
pub fn weighted_mean<'a, S, I>(ratings: I) -> Option<S>
where
    S: ScoreScalar,
    I: IntoIterator<Item = (i32, &'a Impact)>,
{
    let mut weighted = S::zero();
    let mut weights = S::zero();
    let mut any = false;
    for (score, impact) in ratings {
        let w = S::from_impact(impact);
        weighted = weighted + w.clone() * S::from_score(score);
        weights = weights + w;
        any = true;
    }
    (any && weights != S::zero()).then(|| weighted / weights)
}
