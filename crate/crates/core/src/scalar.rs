//! Floating-point scalar abstraction shared by the tensor, model and optimizer code.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};

/// A real scalar the encoder can be instantiated over.
///
/// Implemented for `f32` (training default) and `f64` (gradient checks and
/// high-precision oracles). Serialization is little-endian so checkpoints are
/// portable across hosts.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoint headers.
    const DTYPE: &'static str;
    /// Width of one serialized value.
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Conversion from an `f64` constant. Every `f64` is representable
    /// (rounded) in both implementors, so this never fails.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable in scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<S: Scalar>(v: S) -> S {
        let mut buf = Vec::new();
        v.write_le(&mut buf);
        assert_eq!(buf.len(), S::BYTES);
        S::read_le(&buf)
    }

    #[test]
    fn le_roundtrip_is_bit_exact() {
        assert_eq!(roundtrip(-1.25e-7f32).to_bits(), (-1.25e-7f32).to_bits());
        assert_eq!(roundtrip(std::f64::consts::PI).to_bits(), std::f64::consts::PI.to_bits());
    }
}
