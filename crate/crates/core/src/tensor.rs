//! Dense row-major `f64` tensors and the numeric kernels the graph is built on.

use std::fmt;

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` stored contiguously in row-major order.
///
/// A tensor with an empty shape is a scalar and holds exactly one element.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "operand shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub(crate) fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            s => Err(Error::Shape(format!("expected NCHW, got shape {s:?}"))),
        }
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`, all row-major.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// Geometry of a 2-D convolution over NCHW input with an OIHW kernel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = match input {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(Error::Shape(format!("conv2d input must be NCHW, got {s:?}"))),
        };
        let (o, ci, kh, kw) = match kernel {
            [o, ci, kh, kw] => (*o, *ci, *kh, *kw),
            s => return Err(Error::Shape(format!("conv2d kernel must be OIHW, got {s:?}"))),
        };
        if ci != c {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {ci} input channels, input has {c}"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} (stride {stride}, pad {pad}) does not fit {h}x{w}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { n, c, h, w, o, kh, kw, stride, pad, oh, ow })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds every sample into a `[n][c*kh*kw, oh*ow]` column buffer.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (patch, sp) = (self.patch(), self.spatial());
        let mut cols = vec![0.0; self.n * patch * sp];
        for b in 0..self.n {
            let xs = &x[b * self.c * self.h * self.w..];
            let cs = &mut cols[b * patch * sp..(b + 1) * patch * sp];
            for ch in 0..self.c {
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let row = (ch * self.kh + ki) * self.kw + kj;
                        for oi in 0..self.oh {
                            let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                            if ii < 0 || ii >= self.h as isize {
                                continue;
                            }
                            for oj in 0..self.ow {
                                let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                                if jj < 0 || jj >= self.w as isize {
                                    continue;
                                }
                                cs[row * sp + oi * self.ow + oj] =
                                    xs[(ch * self.h + ii as usize) * self.w + jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back onto the input grid.
    pub fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (patch, sp) = (self.patch(), self.spatial());
        let mut x = vec![0.0; self.n * self.c * self.h * self.w];
        for b in 0..self.n {
            let xs = &mut x[b * self.c * self.h * self.w..(b + 1) * self.c * self.h * self.w];
            let cs = &cols[b * patch * sp..(b + 1) * patch * sp];
            for ch in 0..self.c {
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let row = (ch * self.kh + ki) * self.kw + kj;
                        for oi in 0..self.oh {
                            let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                            if ii < 0 || ii >= self.h as isize {
                                continue;
                            }
                            for oj in 0..self.ow {
                                let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                                if jj < 0 || jj >= self.w as isize {
                                    continue;
                                }
                                xs[(ch * self.h + ii as usize) * self.w + jj as usize] +=
                                    cs[row * sp + oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// `out = kernel * cols` per sample.
    pub fn forward_cols(&self, cols: &[f64], kernel: &[f64]) -> Vec<f64> {
        let (patch, sp) = (self.patch(), self.spatial());
        let mut out = vec![0.0; self.n * self.o * sp];
        for b in 0..self.n {
            gemm_acc(
                kernel,
                &cols[b * patch * sp..(b + 1) * patch * sp],
                &mut out[b * self.o * sp..(b + 1) * self.o * sp],
                self.o,
                patch,
                sp,
            );
        }
        out
    }

    /// Kernel gradient `sum_b g_b * cols_b^T`.
    pub fn kernel_grad(&self, cols: &[f64], g: &[f64]) -> Vec<f64> {
        let (patch, sp) = (self.patch(), self.spatial());
        let mut dk = vec![0.0; self.o * patch];
        for b in 0..self.n {
            gemm_nt_acc(
                &g[b * self.o * sp..(b + 1) * self.o * sp],
                &cols[b * patch * sp..(b + 1) * patch * sp],
                &mut dk,
                self.o,
                sp,
                patch,
            );
        }
        dk
    }

    /// Input gradient `col2im(kernel^T * g_b)`.
    pub fn input_grad(&self, kernel: &[f64], g: &[f64]) -> Vec<f64> {
        let (patch, sp) = (self.patch(), self.spatial());
        let mut dcols = vec![0.0; self.n * patch * sp];
        for b in 0..self.n {
            gemm_tn_acc(
                kernel,
                &g[b * self.o * sp..(b + 1) * self.o * sp],
                &mut dcols[b * patch * sp..(b + 1) * patch * sp],
                self.o,
                patch,
                sp,
            );
        }
        self.col2im(&dcols)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::scalar(4.0).len(), 1);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        assert!(matmul(&b, &b).is_err());
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom::new(&[2, 2, 5, 4], &[3, 2, 3, 2], 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = g.im2col(&x);
        let c: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = g.col2im(&c);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }
}
