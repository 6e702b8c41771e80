//! Skeleton sequences and the SKL1 on-disk format.
//!
//! ```text
//! "SKL1" | u32 T | u32 V | u32 C | T*V*C f32   (all little-endian)
//! ```
//! Payload order is (frame, joint, channel). Values are held as `f64` in
//! memory and rounded to `f32` on write.

use std::fs;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

pub const SKL1_MAGIC: &[u8; 4] = b"SKL1";
const HEADER_LEN: usize = 16;

/// Raw joint trajectories with shape `(frames, joints, channels)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    frames: Array3<f64>,
}

impl SkeletonSequence {
    pub fn new(frames: Array3<f64>) -> Result<Self> {
        let (t, v, c) = frames.dim();
        if t == 0 || v == 0 || c == 0 {
            return Err(Error::shape(
                "skeleton sequence",
                "all axes >= 1",
                format!("({t}, {v}, {c})"),
            ));
        }
        if let Some(index) = frames.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "skeleton frames",
                index,
            });
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array3<f64> {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn num_joints(&self) -> usize {
        self.frames.dim().1
    }

    pub fn num_channels(&self) -> usize {
        self.frames.dim().2
    }

    /// Encodes the sequence as SKL1 bytes.
    pub fn to_skl1_bytes(&self) -> Vec<u8> {
        let (t, v, c) = self.frames.dim();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * v * c);
        out.extend_from_slice(SKL1_MAGIC);
        for dim in [t, v, c] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &x in self.frames.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        out
    }

    /// Decodes SKL1 bytes.
    pub fn from_skl1_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |field, detail: String| Error::Parse {
            format: "SKL1",
            field,
            detail,
        };
        if bytes.len() < HEADER_LEN {
            return Err(parse("header", format!("{} bytes, need 16", bytes.len())));
        }
        if &bytes[..4] != SKL1_MAGIC {
            return Err(parse("magic", format!("{:?}", &bytes[..4])));
        }
        let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let (t, v, c) = (read_u32(4) as usize, read_u32(8) as usize, read_u32(12) as usize);
        for (field, dim) in [("frames", t), ("joints", v), ("channels", c)] {
            if dim == 0 {
                return Err(parse(field, "zero-sized axis".into()));
            }
        }
        let count = t
            .checked_mul(v)
            .and_then(|x| x.checked_mul(c))
            .ok_or_else(|| parse("shape", format!("({t}, {v}, {c}) overflows")))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != count * 4 {
            return Err(parse(
                "payload",
                format!(
                    "expected {} bytes for ({t}, {v}, {c}), found {}",
                    count * 4,
                    payload.len()
                ),
            ));
        }
        let mut values = Vec::with_capacity(count);
        for (index, chunk) in payload.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    what: "SKL1 payload",
                    index,
                });
            }
            values.push(x as f64);
        }
        let frames = Array3::from_shape_vec((t, v, c), values).expect("length checked above");
        Ok(Self { frames })
    }
}

/// Reads an SKL1 file.
pub fn load_sequence(path: impl AsRef<Path>) -> Result<SkeletonSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    SkeletonSequence::from_skl1_bytes(&bytes)
}

/// Writes an SKL1 file.
pub fn write_sequence(path: impl AsRef<Path>, seq: &SkeletonSequence) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, seq.to_skl1_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(t: u32, v: u32, c: u32) -> Vec<u8> {
        let mut b = SKL1_MAGIC.to_vec();
        for d in [t, v, c] {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b
    }

    #[test]
    fn parses_declared_shape() {
        let mut bytes = header(8, 2, 3);
        for i in 0..48 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let seq = SkeletonSequence::from_skl1_bytes(&bytes).unwrap();
        assert_eq!(seq.frames().dim(), (8, 2, 3));
        assert_eq!(seq.frames()[[7, 1, 2]], 47.0);
    }

    #[test]
    fn rejects_nan_payload() {
        let mut bytes = header(1, 1, 3);
        for x in [0.0f32, f32::NAN, 1.0] {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        match SkeletonSequence::from_skl1_bytes(&bytes) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn distinct_errors_per_field() {
        let field_of = |bytes: &[u8]| match SkeletonSequence::from_skl1_bytes(bytes) {
            Err(Error::Parse { field, .. }) => field,
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(field_of(b"SKL"), "header");
        let mut bad_magic = header(1, 1, 1);
        bad_magic[0] = b'X';
        assert_eq!(field_of(&bad_magic), "magic");
        assert_eq!(field_of(&header(0, 1, 1)), "frames");
        let mut short = header(2, 1, 1);
        short.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(field_of(&short), "payload");
    }

    #[test]
    fn constructor_rejects_non_finite() {
        let mut frames = Array3::zeros((2, 2, 3));
        frames[[1, 0, 2]] = f64::INFINITY;
        assert!(matches!(
            SkeletonSequence::new(frames),
            Err(Error::NonFinite { index: 8, .. })
        ));
    }
}
