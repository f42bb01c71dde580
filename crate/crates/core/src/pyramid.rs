//! Four-level feature pyramids and the HSQF binary format.
//!
//! Layout, all little-endian: magic `HSQF`, version `u32`, height `u32`,
//! width `u32`, level count `u32`, then per level stride `u32`, channels
//! `u32`, rows `u64`, cols `u64` and `rows·cols` `f32` values in row-major
//! order.

use std::fs;
use std::path::Path;

use crate::error::{config, FormatError, HsqError, Result};
use crate::numerics::rng::{normal_matrix, rng_for, stream_id};
use crate::numerics::Matrix;

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const LEVELS: usize = 4;
pub const DEFAULT_CHANNELS: [usize; 4] = [96, 192, 384, 768];

pub const PYRAMID_MAGIC: [u8; 4] = *b"HSQF";
pub const PYRAMID_VERSION: u32 = 1;

/// Token count of level `i` (0-based) for an `h × w` image.
pub fn level_tokens(h: usize, w: usize, level: usize) -> usize {
    let s = STRIDES[level];
    h * w / (s * s)
}

pub fn latent_lengths(h: usize, w: usize) -> [usize; 4] {
    std::array::from_fn(|i| level_tokens(h, w, i))
}

pub fn check_image_size(h: usize, w: usize) -> Result<()> {
    if h < 32 || w < 32 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(config(format!(
            "image size {h}x{w} invalid: height and width must be positive multiples of 32"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub stride: usize,
    pub tokens: Matrix,
}

impl PyramidLevel {
    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    height: usize,
    width: usize,
    levels: Vec<PyramidLevel>,
}

impl FeaturePyramid {
    /// Validates the geometry law on every level. Levels are numbered from 1
    /// in error messages.
    pub fn new(height: usize, width: usize, levels: Vec<PyramidLevel>) -> Result<Self> {
        check_image_size(height, width)?;
        Self::validate(height, width, &levels)?;
        Ok(Self { height, width, levels })
    }

    fn validate(h: usize, w: usize, levels: &[PyramidLevel]) -> Result<(), FormatError> {
        if levels.len() != LEVELS {
            return Err(FormatError::Malformed(format!(
                "expected {LEVELS} levels, found {}",
                levels.len()
            )));
        }
        for (i, l) in levels.iter().enumerate() {
            let geometry = |detail: String| FormatError::Geometry { level: i + 1, detail };
            if l.stride != STRIDES[i] {
                return Err(geometry(format!("stride {} (expected {})", l.stride, STRIDES[i])));
            }
            let n = level_tokens(h, w, i);
            if l.tokens.rows() != n {
                return Err(geometry(format!(
                    "{} tokens but a {h}x{w} image at stride {} has {n}",
                    l.tokens.rows(),
                    l.stride
                )));
            }
            if l.tokens.cols() == 0 {
                return Err(geometry("zero channels".into()));
            }
            if !l.tokens.is_finite() {
                return Err(geometry("non-finite token value".into()));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Matrix {
        &self.levels[i].tokens
    }

    pub fn channels(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.levels[i].channels())
    }

    pub fn token_counts(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.levels[i].tokens.rows())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.levels.iter().map(|l| 24 + 4 * l.tokens.len()).sum();
        let mut out = Vec::with_capacity(20 + payload);
        out.extend_from_slice(&PYRAMID_MAGIC);
        for v in [PYRAMID_VERSION, self.height as u32, self.width as u32, LEVELS as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.levels {
            out.extend_from_slice(&(l.stride as u32).to_le_bytes());
            out.extend_from_slice(&(l.channels() as u32).to_le_bytes());
            out.extend_from_slice(&(l.tokens.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(l.tokens.cols() as u64).to_le_bytes());
            for &v in l.tokens.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array::<4>("magic")?;
        if magic != PYRAMID_MAGIC {
            return Err(FormatError::BadMagic {
                expected: PYRAMID_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != PYRAMID_VERSION {
            return Err(FormatError::Version {
                expected: PYRAMID_VERSION,
                found: version,
            });
        }
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let count = r.u32("level count")? as usize;
        if count != LEVELS {
            return Err(FormatError::Malformed(format!("expected {LEVELS} levels, found {count}")));
        }
        if h < 32 || w < 32 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
            return Err(FormatError::Malformed(format!(
                "image size {h}x{w} is not a positive multiple of 32"
            )));
        }
        let mut levels = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            let what = |f: &str| format!("level {} {f}", i + 1);
            let stride = r.u32(&what("stride"))? as usize;
            let channels = r.u32(&what("channels"))? as usize;
            let rows = r.u64(&what("rows"))? as usize;
            let cols = r.u64(&what("cols"))? as usize;
            let geometry = |detail: String| FormatError::Geometry { level: i + 1, detail };
            if cols != channels {
                return Err(geometry(format!("{cols} columns but {channels} channels")));
            }
            let expected = level_tokens(h, w, i);
            if stride == STRIDES[i] && rows != expected {
                return Err(geometry(format!(
                    "{rows} tokens but a {h}x{w} image at stride {stride} has {expected}"
                )));
            }
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| geometry("rows x cols overflows".into()))?;
            let data = r.f32s(len, &what("payload"))?;
            let tokens = Matrix::from_vec(rows, cols, data)
                .map_err(|e| FormatError::Malformed(e.to_string()))?;
            levels.push(PyramidLevel { stride, tokens });
        }
        if r.remaining() != 0 {
            return Err(FormatError::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        Self::validate(h, w, &levels)?;
        Ok(Self { height: h, width: w, levels })
    }
}

/// Little-endian cursor that reports truncation by field name.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated { what: what.to_string() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], FormatError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, FormatError> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| FormatError::Truncated { what: what.to_string() })?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect())
    }
}

/// Standard-normal pyramid, values rounded to `f32` so that the HSQF round
/// trip is lossless.
pub fn synth_pyramid(h: usize, w: usize, channels: [usize; 4], seed: u64) -> Result<FeaturePyramid> {
    check_image_size(h, w)?;
    if let Some(i) = channels.iter().position(|&c| c == 0) {
        return Err(config(format!("level {} has zero channels", i + 1)));
    }
    let levels = (0..LEVELS)
        .map(|i| {
            let mut rng = rng_for(stream_id(seed, &[i as u64]));
            PyramidLevel {
                stride: STRIDES[i],
                tokens: normal_matrix(&mut rng, level_tokens(h, w, i), channels[i], 1.0),
            }
        })
        .collect();
    FeaturePyramid::new(h, w, levels)
}

/// Seeds of the two backbone stand-ins derived from one run seed.
pub fn backbone_seeds(seed: u64) -> (u64, u64) {
    (stream_id(seed, &[0xC0]), stream_id(seed, &[0x71]))
}

pub fn synth_pair(
    h: usize,
    w: usize,
    channels: [usize; 4],
    seed: u64,
) -> Result<(FeaturePyramid, FeaturePyramid)> {
    let (c, v) = backbone_seeds(seed);
    Ok((synth_pyramid(h, w, channels, c)?, synth_pyramid(h, w, channels, v)?))
}

pub fn write_pyramid(p: &FeaturePyramid, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, p.to_bytes())?;
    Ok(())
}

pub fn read_pyramid(path: impl AsRef<Path>) -> Result<FeaturePyramid> {
    let bytes = fs::read(path)?;
    FeaturePyramid::from_bytes(&bytes).map_err(HsqError::from)
}
