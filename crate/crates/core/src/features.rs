//! Time-major feature sequences and the binary feature container.
//!
//! Container layout (little-endian): magic `W2SF`, version `u32`, `T u32`,
//! `d u32`, then `T * d` `f32` values, row-major with time as the outer axis.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"W2SF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureDomain {
    /// Content-encoder frames (half the 16 kHz mel rate).
    Content16k,
    Latent,
    /// Aligner output in the 22.05 kHz mel frame grid.
    Aligned22k,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// `T x d`
    pub frames: Array2<f32>,
    pub domain: FeatureDomain,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f32>, domain: FeatureDomain) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::Argument("feature sequence must have at least one frame".into()));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("feature sequence contains non-finite values".into()));
        }
        Ok(Self { frames, domain })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn expect_domain(&self, domain: FeatureDomain) -> Result<()> {
        if self.domain != domain {
            return Err(Error::Domain(format!("expected {domain:?} features, got {:?}", self.domain)));
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.frames.mapv(|v| v as f64)
    }

    /// Write the frames in the feature container format.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        write_matrix(path, &self.frames)
    }

    /// Read a feature container as content-domain features.
    pub fn import(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_matrix(path)?, FeatureDomain::Content16k)
    }
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Array2<f32>) -> Result<()> {
    let path = path.as_ref();
    let (t, d) = m.dim();
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(t as u32).to_le_bytes());
    bytes.extend_from_slice(&(d as u32).to_le_bytes());
    for v in m.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    if t == 0 || d == 0 {
        return Err(Error::format(path, format!("degenerate shape {t}x{d}")));
    }
    let expected = HEADER_LEN + 4 * t * d;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {}", bytes.len() - HEADER_LEN, expected - HEADER_LEN),
        ));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((t, d), data).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_scale_header_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.w2sf");
        let m = Array2::from_shape_fn((50, 1280), |(i, j)| (i * 1280 + j) as f32 * 1e-3);
        write_matrix(&p, &m).unwrap();
        let seq = FeatureSequence::import(&p).unwrap();
        assert_eq!((seq.len(), seq.dim()), (50, 1280));
        assert_eq!(seq.domain, FeatureDomain::Content16k);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.w2sf");
        write_matrix(&p, &Array2::ones((4, 3))).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(FeatureSequence::import(&p), Err(Error::Format { .. })));
        std::fs::write(&p, &bytes[..10]).unwrap();
        assert!(matches!(FeatureSequence::import(&p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(FeatureSequence::import(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_empty_sequence() {
        assert!(FeatureSequence::new(Array2::zeros((0, 4)), FeatureDomain::Latent).is_err());
    }

    proptest! {
        #[test]
        fn export_import_is_bit_identical(t in 1usize..20, d in 1usize..20, seed in any::<u32>()) {
            let m = Array2::from_shape_fn((t, d), |(i, j)| {
                f32::from_bits((seed ^ (i as u32 * 7919 + j as u32 * 104729)) & 0x3fff_ffff)
            });
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("f.w2sf");
            let seq = FeatureSequence { frames: m, domain: FeatureDomain::Content16k };
            seq.export(&p).unwrap();
            let back = read_matrix(&p).unwrap();
            prop_assert!(back.iter().zip(seq.frames.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
