//! Binary observation masks and their PGM (`P5`, 0/255) serialization.

use std::path::Path;

use crate::depth_io::{read_file, write_file, HeaderReader};
use crate::error::{Error, Result};

/// Row-major binary grid marking observed positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SparsityMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl SparsityMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} bits, expected {}x{}",
                bits.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &SparsityMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Elementwise `self AND NOT other`.
    pub fn and_not(&self, other: &SparsityMask) -> Result<SparsityMask> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a && !b)
            .collect();
        Ok(SparsityMask {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &SparsityMask) -> bool {
        self.same_shape(other) && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    /// Decodes an 8-bit `P5` file; any nonzero sample counts as set.
    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let mut header = HeaderReader::new(bytes);
        let magic = header.token()?;
        if magic != "P5" {
            return Err(Error::MalformedHeader(format!(
                "expected P5 magic, found {magic:?}"
            )));
        }
        let width: usize = header.number("width")?;
        let height: usize = header.number("height")?;
        let maxval: u32 = header.number("maxval")?;
        if width == 0 || height == 0 {
            return Err(Error::MalformedHeader(format!(
                "zero dimension {width}x{height}"
            )));
        }
        if maxval != 255 {
            return Err(Error::UnsupportedMaxval(maxval));
        }
        let payload = header.payload()?;
        let expected = width * height;
        if payload.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits: payload[..expected].iter().map(|&b| b != 0).collect(),
        })
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode_pgm())
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode_pgm(&read_file(path.as_ref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn pgm_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let m = SparsityMask::from_fn(w, h, |x, y| {
                (seed.rotate_left((x * 7 + y * 13) as u32) & 1) == 1
            });
            prop_assert_eq!(SparsityMask::decode_pgm(&m.encode_pgm()).unwrap(), m);
        }
    }

    #[test]
    fn and_not_and_subset() {
        let a = SparsityMask::new(2, 1, vec![true, true]).unwrap();
        let b = SparsityMask::new(2, 1, vec![false, true]).unwrap();
        let c = a.and_not(&b).unwrap();
        assert_eq!(c.bits(), &[true, false]);
        assert!(c.is_subset_of(&a));
        assert!(!a.is_subset_of(&c));
    }
}
