use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary mask stored as a row-major bitset.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}x{}, area {})", self.width, self.height, self.area())
    }
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            words: vec![0; (width * height).div_ceil(64)],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set_index(y * width + x);
                }
            }
        }
        m
    }

    /// Pixels `i` with `bits[i] != 0`, row-major.
    pub fn from_bools(width: usize, height: usize, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), width * height);
        let mut m = Self::new(width, height);
        for (i, &b) in bits.iter().enumerate() {
            if b {
                m.set_index(i);
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.get_index(y * self.width + x)
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        self.words[i >> 6] >> (i & 63) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        let i = y * self.width + x;
        if v {
            self.set_index(i);
        } else {
            self.words[i >> 6] &= !(1u64 << (i & 63));
        }
    }

    #[inline]
    pub fn set_index(&mut self, i: usize) {
        self.words[i >> 6] |= 1u64 << (i & 63);
    }

    pub fn area(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn check_same(&self, other: &Mask, op: &'static str) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Dimension {
                op,
                lhs: vec![self.height, self.width],
                rhs: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &Mask) -> Result<usize> {
        self.check_same(other, "intersection")?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum())
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.check_same(other, "and")?;
        Ok(Mask {
            width: self.width,
            height: self.height,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect(),
        })
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.check_same(other, "or")?;
        Ok(Mask {
            width: self.width,
            height: self.height,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a | b).collect(),
        })
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let t = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(wi * 64 + t)
            })
        })
    }

    /// Row-major 0.0/1.0 values.
    pub fn to_f32(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.len()];
        for i in self.ones() {
            out[i] = 1.0;
        }
        out
    }

    /// Bounding box `(x0, y0, x1, y1)`, exclusive upper bounds.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for i in self.ones() {
            let (x, y) = (i % self.width, i / self.width);
            b = Some(match b {
                None => (x, y, x + 1, y + 1),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
            });
        }
        b
    }
}

/// |a∩b| / |a∪b|; 0 when both are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Uncompressed COCO run-length encoding: column-major runs, starting with background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

impl Rle {
    pub fn encode(mask: &Mask) -> Rle {
        let (w, h) = (mask.width, mask.height);
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for x in 0..w {
            for y in 0..h {
                let v = mask.get(x, y);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle { size: [h, w], counts }
    }

    pub fn decode(&self) -> Result<Mask> {
        let [h, w] = self.size;
        let total: u64 = self.counts.iter().sum();
        if total != (w * h) as u64 {
            return Err(Error::Data(format!(
                "RLE counts sum to {total}, expected {} for size [{h}, {w}]",
                w * h
            )));
        }
        let mut m = Mask::new(w, h);
        let mut pos = 0usize;
        for (k, &c) in self.counts.iter().enumerate() {
            if k % 2 == 1 {
                for p in pos..pos + c as usize {
                    m.set(p / h, p % h, true);
                }
            }
            pos += c as usize;
        }
        Ok(m)
    }
}
