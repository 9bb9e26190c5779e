//! Dense 4-D tensor logically indexed `[batch, maps, height, width]`,
//! stored batch-last (`[maps, h, w, batch]`) so the batch dimension is the
//! contiguous innermost run. Small-batch convolutions then reduce to long
//! axpy/dot loops over 64 contiguous doubles instead of kernel-width-sized
//! fragments.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub data: Vec<f64>,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            data: vec![0.0; n * c * h * w],
            n,
            c,
            h,
            w,
        }
    }

    /// Build from logically batch-major data (sample 0's full `c*h*w`
    /// block first), converting to the internal batch-last layout.
    pub fn from_vec(data: Vec<f64>, n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "vector of {} values cannot be {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        let chw = c * h * w;
        let mut t = Tensor4::zeros(n, c, h, w);
        for nn in 0..n {
            for p in 0..chw {
                t.data[p * n + nn] = data[nn * chw + p];
            }
        }
        Ok(t)
    }

    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        (((c * self.h) + h) * self.w + w) * self.n + n
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, h, w)]
    }

    /// Contiguous batch run at one `(c, h, w)` cell.
    #[inline(always)]
    pub fn run(&self, c: usize, h: usize, w: usize) -> &[f64] {
        let base = (((c * self.h) + h) * self.w + w) * self.n;
        &self.data[base..base + self.n]
    }

    #[inline(always)]
    pub fn run_mut(&mut self, c: usize, h: usize, w: usize) -> &mut [f64] {
        let base = (((c * self.h) + h) * self.w + w) * self.n;
        &mut self.data[base..base + self.n]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logical_indexing_round_trips() {
        let chw = 3 * 4 * 5;
        let data: Vec<f64> = (0..2 * chw).map(|i| i as f64).collect();
        let t = Tensor4::from_vec(data, 2, 3, 4, 5).unwrap();
        // Sample 1's block starts at logical offset chw.
        assert_eq!(t.at(1, 2, 3, 4), (chw + 59) as f64);
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        // Batch runs are contiguous.
        assert_eq!(t.run(2, 3, 4), &[59.0, (chw + 59) as f64]);
    }

    #[test]
    fn bad_shape_rejected() {
        assert!(Tensor4::from_vec(vec![0.0; 7], 1, 2, 2, 2).is_err());
    }
}
