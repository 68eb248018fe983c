//! Packed binary masks with a run-length codec.
//!
//! RLE layout: alternating run counts over the row-major flattened mask,
//! starting with a background run (which may be 0 when the first pixel is
//! foreground). Every other count is positive and the counts sum to H*W.

use crate::{Error, Result};

/// H x W binary mask packed into 64-bit words (row-major bit order). Bits
/// past H*W in the last word are always zero, so word-level popcounts are
/// exact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    height: usize,
    width: usize,
    words: Vec<u64>,
}

impl BitMask {
    pub fn new(height: usize, width: usize) -> BitMask {
        assert!(height > 0 && width > 0, "mask: empty dimensions {height}x{width}");
        BitMask { height, width, words: vec![0; (height * width).div_ceil(64)] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> BitMask {
        let mut m = BitMask::new(height, width);
        for y in 0..height {
            for x in 0..width {
                if f(y, x) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        let i = y * self.width + x;
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn get_flat(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        let i = y * self.width + x;
        if v {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    #[inline]
    pub fn set_flat(&mut self, i: usize, v: bool) {
        if v {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn area(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn assert_same_dims(&self, other: &BitMask, op: &str) {
        assert!(
            self.height == other.height && self.width == other.width,
            "{op}: mask dimensions {}x{} vs {}x{}",
            self.height,
            self.width,
            other.height,
            other.width
        );
    }

    pub fn intersection_area(&self, other: &BitMask) -> usize {
        self.assert_same_dims(other, "intersection");
        self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones() as usize).sum()
    }

    pub fn union_area(&self, other: &BitMask) -> usize {
        self.assert_same_dims(other, "union");
        self.words.iter().zip(&other.words).map(|(a, b)| (a | b).count_ones() as usize).sum()
    }

    /// Per-frame IoU; 0 when the union is empty.
    pub fn iou(&self, other: &BitMask) -> f64 {
        let u = self.union_area(other);
        if u == 0 {
            0.0
        } else {
            self.intersection_area(other) as f64 / u as f64
        }
    }

    /// Run-length encode (see module docs for the layout).
    pub fn to_rle(&self) -> Vec<u32> {
        let n = self.len();
        let mut counts = Vec::new();
        let mut current = false; // encoding starts with a background run
        let mut run = 0u32;
        for i in 0..n {
            let bit = self.get_flat(i);
            if bit == current {
                run += 1;
            } else {
                counts.push(run);
                current = bit;
                run = 1;
            }
        }
        counts.push(run);
        counts
    }

    /// Decode a run-length encoding. Zero-length runs are accepted anywhere
    /// (they occur in hand-written encodings that break runs at row
    /// boundaries); only the count sum is validated. `to_rle` always emits
    /// the canonical form with no interior zeros.
    pub fn from_rle(height: usize, width: usize, counts: &[u32]) -> Result<BitMask> {
        if height == 0 || width == 0 {
            return Err(Error::Dataset(format!("rle: empty dimensions {height}x{width}")));
        }
        let n = height * width;
        if counts.is_empty() {
            return Err(Error::Dataset("rle: no counts".into()));
        }
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total != n as u64 {
            return Err(Error::Dataset(format!("rle: counts sum to {total}, expected {n} for {height}x{width}")));
        }
        let mut m = BitMask::new(height, width);
        let mut i = 0usize;
        let mut fg = false;
        for &c in counts {
            if fg {
                for j in i..i + c as usize {
                    m.set_flat(j, true);
                }
            }
            i += c as usize;
            fg = !fg;
        }
        Ok(m)
    }
}
