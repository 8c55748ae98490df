//! Radon barcodes: per-angle median thresholding of projections, packed into
//! 64-bit words for popcount Hamming distance.

use std::fmt;

use thiserror::Error;

use crate::imaging::RadonFeatures;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BarcodeError {
    #[error("barcode shapes differ: {left} vs {right}")]
    ShapeMismatch { left: BarcodeShape, right: BarcodeShape },
    #[error("expected {expected} packed bytes for {shape}, got {actual}")]
    PackedLength {
        shape: BarcodeShape,
        expected: usize,
        actual: usize,
    },
    #[error("expected {expected} bits for {shape}, got {actual}")]
    BitLength {
        shape: BarcodeShape,
        expected: usize,
        actual: usize,
    },
}

/// `(n_p, N)` echo of the Radon configuration a barcode was built with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BarcodeShape {
    pub projections: u16,
    pub side: u16,
}

impl BarcodeShape {
    pub fn new(projections: u16, side: u16) -> Self {
        Self { projections, side }
    }

    pub fn bit_len(&self) -> usize {
        self.projections as usize * self.side as usize
    }

    /// `ceil(n_p · N / 8)`.
    pub fn packed_len(&self) -> usize {
        self.bit_len().div_ceil(8)
    }

    fn word_len(&self) -> usize {
        self.bit_len().div_ceil(64)
    }
}

impl fmt::Display for BarcodeShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N={} n_p={}", self.side, self.projections)
    }
}

/// Bit vector of length `n_p · N`, angle-major.
///
/// Bit `i` lives in word `i / 64` at position `63 - i % 64`, so writing the
/// words out big-endian yields the MSB-first packed byte layout directly.
/// Bits past `bit_len` are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RadonBarcode {
    shape: BarcodeShape,
    words: Vec<u64>,
}

impl RadonBarcode {
    pub fn zeros(shape: BarcodeShape) -> Self {
        Self {
            shape,
            words: vec![0; shape.word_len()],
        }
    }

    pub fn from_bits(shape: BarcodeShape, bits: &[bool]) -> Result<Self, BarcodeError> {
        if bits.len() != shape.bit_len() {
            return Err(BarcodeError::BitLength {
                shape,
                expected: shape.bit_len(),
                actual: bits.len(),
            });
        }
        let mut code = Self::zeros(shape);
        for (i, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
            code.words[i / 64] |= 1 << (63 - i % 64);
        }
        Ok(code)
    }

    /// Unpacks MSB-first bytes. Padding bits in the final byte are ignored.
    pub fn from_packed(shape: BarcodeShape, bytes: &[u8]) -> Result<Self, BarcodeError> {
        if bytes.len() != shape.packed_len() {
            return Err(BarcodeError::PackedLength {
                shape,
                expected: shape.packed_len(),
                actual: bytes.len(),
            });
        }
        let mut words = vec![0u64; shape.word_len()];
        for (w, chunk) in words.iter_mut().zip(bytes.chunks(8)) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            *w = u64::from_be_bytes(buf);
        }
        let tail = shape.bit_len() % 64;
        if tail != 0 {
            if let Some(last) = words.last_mut() {
                *last &= !0u64 << (64 - tail);
            }
        }
        Ok(Self { shape, words })
    }

    /// MSB-first packed bytes, `ceil(n_p · N / 8)` of them.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_be_bytes()).collect();
        out.truncate(self.shape.packed_len());
        out
    }

    pub fn shape(&self) -> BarcodeShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.bit_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.len(), "bit index {i} out of range");
        self.words[i / 64] >> (63 - i % 64) & 1 == 1
    }

    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len()).map(|i| self.bit(i))
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Hamming distance without the shape check. Callers must have verified
    /// that both codes share a shape.
    #[inline]
    pub fn distance_unchecked(&self, other: &Self) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    /// One line of `N` '0'/'1' characters per projection angle.
    pub fn to_text(&self) -> String {
        let side = self.shape.side as usize;
        let mut out = String::with_capacity(self.len() + self.shape.projections as usize);
        for row in 0..self.shape.projections as usize {
            for i in 0..side {
                out.push(if self.bit(row * side + i) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// Median of the strictly positive entries, or `None` when the row carries no mass.
/// An even count averages the middle pair.
pub fn projection_threshold(row: &[f64]) -> Option<f64> {
    let mut nonzero: Vec<f64> = row.iter().copied().filter(|&v| v != 0.0).collect();
    if nonzero.is_empty() {
        return None;
    }
    nonzero.sort_by(f64::total_cmp);
    let mid = nonzero.len() / 2;
    Some(if nonzero.len() % 2 == 1 {
        nonzero[mid]
    } else {
        (nonzero[mid - 1] + nonzero[mid]) / 2.0
    })
}

/// Binarizes one projection: `value ≥ median(nonzero values)`. A row of zeros
/// maps to all-zero bits.
pub fn threshold_projection(row: &[f64]) -> Vec<bool> {
    match projection_threshold(row) {
        Some(t) => row.iter().map(|&v| v >= t).collect(),
        None => vec![false; row.len()],
    }
}

/// Concatenates the thresholded rows in angle order.
pub fn generate_barcode(f: &RadonFeatures) -> RadonBarcode {
    let cfg = f.config();
    // RadonConfig guarantees both dimensions fit in u16
    let shape = BarcodeShape::new(cfg.projections() as u16, cfg.side() as u16);
    let bits: Vec<bool> = f.rows().flat_map(threshold_projection).collect();
    RadonBarcode::from_bits(shape, &bits).expect("feature matrix has n_p·N entries")
}

/// Number of differing bit positions.
pub fn hamming_distance(a: &RadonBarcode, b: &RadonBarcode) -> Result<u32, BarcodeError> {
    if a.shape != b.shape {
        return Err(BarcodeError::ShapeMismatch {
            left: a.shape,
            right: b.shape,
        });
    }
    Ok(a.distance_unchecked(b))
}
