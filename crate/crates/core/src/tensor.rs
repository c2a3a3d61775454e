//! Dense channel-major 3-D tensors and the matrix-multiply kernel the
//! network layers are built on.

use crate::error::{shape_err, Result};

/// A `channels × height × width` tensor stored channel-major
/// (`data[(c * height + y) * width + x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Activation tensor flowing through the network.
pub type FeatureMap = Tensor3;

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err!(
                "buffer of {} values cannot hold {channels}x{height}x{width}",
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.shape() == other.shape()
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add(&self, other: &Tensor3) -> Tensor3 {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    /// Stacks `self` and `other` along the channel axis.
    pub fn concat_channels(&self, other: &Tensor3) -> Result<Tensor3> {
        if self.height != other.height || self.width != other.width {
            return Err(shape_err!(
                "cannot concatenate {:?} with {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor3 {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Inverse of [`Tensor3::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Tensor3, Tensor3) {
        let cut = first * self.plane_len();
        (
            Tensor3 {
                channels: first,
                height: self.height,
                width: self.width,
                data: self.data[..cut].to_vec(),
            },
            Tensor3 {
                channels: self.channels - first,
                height: self.height,
                width: self.width,
                data: self.data[cut..].to_vec(),
            },
        )
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Strided, read-only view of a row-major-or-not matrix for [`gemm`].
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows × cols` matrix.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
        }
    }
}

/// `c = alpha * a · b + beta * c` with `c` row-major `a.rows × b.cols`.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    let n = b.cols;
    gemm_ld(alpha, a, b, beta, c, n);
}

/// [`gemm`] writing into a row-major output whose rows are `ldc` apart.
pub fn gemm_ld(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64], ldc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions disagree");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n, "gemm output buffer too small");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    assert!(a.max_offset() < a.data.len(), "gemm lhs view out of bounds");
    assert!(b.max_offset() < b.data.len(), "gemm rhs view out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the max_offset
    // checks above and by the output length check against `ldc`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|v| (v as f64).sin()).collect();
        let expected = naive(&a, &b, 3, 4, 5);
        let mut c = vec![0.0; 15];
        gemm(1.0, MatRef::new(&a, 3, 4), MatRef::new(&b, 4, 5), 0.0, &mut c);
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
        // (bᵀ aᵀ)ᵀ = a b
        let mut ct = vec![0.0; 15];
        gemm(
            1.0,
            MatRef::new(&b, 4, 5).t(),
            MatRef::new(&a, 3, 4).t(),
            0.0,
            &mut ct,
        );
        for i in 0..3 {
            for j in 0..5 {
                assert!((ct[j * 3 + i] - expected[i * 5 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_then_split_roundtrips() {
        let a = Tensor3::filled(2, 3, 4, 1.0);
        let b = Tensor3::filled(1, 3, 4, 2.0);
        let ab = a.concat_channels(&b).unwrap();
        assert_eq!(ab.shape(), (3, 3, 4));
        let (x, y) = ab.split_channels(2);
        assert_eq!(x, a);
        assert_eq!(y, b);
        assert!(a.concat_channels(&Tensor3::zeros(1, 2, 4)).is_err());
    }
}
