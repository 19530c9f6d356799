//! Dense row-major `f32` tensors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Dense n-dimensional `f32` array with an optional gradient buffer.
///
/// `data.len()` always equals the product of `shape`, and `grad`, when
/// present, has the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::LengthMismatch {
                expected: self.data.len(),
                got: g.len(),
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Returns a copy with a new shape of the same element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Rejects NaN and infinities.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        ensure_finite(&self.data, op)
    }

    /// Interprets the tensor as `[h, w, c]`.
    pub fn hwc(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            other => Err(Error::dim(op, format!("expected [h, w, c], got {other:?}"))),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Frobenius norm accumulated in f64.
    pub fn norm(&self) -> f64 {
        crate::math::sqrt(self.data.iter().map(|&v| (v as f64) * (v as f64)).sum())
    }
}

pub(crate) fn ensure_finite(data: &[f32], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Cyclically shifts the columns of an `[h, w, c]` tensor so that output
/// column `j` holds input column `(j + shift) mod w`.
pub fn roll_columns(t: &Tensor, shift: usize) -> Result<Tensor> {
    let (h, w, c) = t.hwc("roll_columns")?;
    let src = t.data();
    let mut out = Tensor::zeros([h, w, c]);
    let dst = out.data_mut();
    for i in 0..h {
        for j in 0..w {
            let sj = (j + shift) % w;
            let d = (i * w + j) * c;
            let s = (i * w + sj) * c;
            dst[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Ok(out)
}

/// Reverses the column order of an `[h, w, c]` panorama about column 0:
/// output column `j` holds input column `(w - j) mod w`.
pub fn mirror_columns(t: &Tensor) -> Result<Tensor> {
    let (h, w, c) = t.hwc("mirror_columns")?;
    let src = t.data();
    let mut out = Tensor::zeros([h, w, c]);
    let dst = out.data_mut();
    for i in 0..h {
        for j in 0..w {
            let sj = (w - j) % w;
            let d = (i * w + j) * c;
            let s = (i * w + sj) * c;
            dst[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Ok(out)
}

/// Mirrors an `[h, w, c]` map left-right.
pub fn flip_horizontal(t: &Tensor) -> Result<Tensor> {
    let (h, w, c) = t.hwc("flip_horizontal")?;
    let src = t.data();
    let mut out = Tensor::zeros([h, w, c]);
    let dst = out.data_mut();
    for i in 0..h {
        for j in 0..w {
            let d = (i * w + j) * c;
            let s = (i * w + (w - 1 - j)) * c;
            dst[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Ok(out)
}

/// Rotates a square `[n, n, c]` map clockwise by `quarter_turns` × 90°.
pub fn rotate_quarter_turns(t: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    let (h, w, c) = t.hwc("rotate_quarter_turns")?;
    if h != w {
        return Err(Error::dim("rotate_quarter_turns", "map must be square"));
    }
    let n = h;
    let mut cur = t.clone();
    for _ in 0..quarter_turns % 4 {
        let src = cur.data();
        let mut out = Tensor::zeros([n, n, c]);
        let dst = out.data_mut();
        // Clockwise: output (r, col) takes input (n-1-col, r).
        for r in 0..n {
            for col in 0..n {
                let d = (r * n + col) * c;
                let s = ((n - 1 - col) * n + r) * c;
                dst[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        cur = out;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_length_must_agree() {
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new([2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn nan_rejected() {
        let t = Tensor::new([2], vec![1.0, f32::NAN]).unwrap();
        assert!(t.ensure_finite("x").is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros([3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn four_quarter_turns_is_identity() {
        let t = Tensor::from_fn([5, 5, 2], |i| i as f32);
        let r1 = rotate_quarter_turns(&t, 1).unwrap();
        assert_ne!(r1, t);
        assert_eq!(rotate_quarter_turns(&r1, 3).unwrap(), t);
    }

    #[test]
    fn quarter_turn_moves_north_to_east() {
        // Marker directly above the centre of a 3x3 map.
        let mut t = Tensor::zeros([3, 3, 1]);
        t.data_mut()[1] = 1.0;
        let r = rotate_quarter_turns(&t, 1).unwrap();
        // After a clockwise quarter turn it sits right of the centre.
        assert_eq!(r.data()[5], 1.0);
    }

    #[test]
    fn roll_and_mirror() {
        let t = Tensor::from_fn([1, 4, 1], |i| i as f32);
        assert_eq!(roll_columns(&t, 1).unwrap().data(), &[1.0, 2.0, 3.0, 0.0]);
        assert_eq!(mirror_columns(&t).unwrap().data(), &[0.0, 3.0, 2.0, 1.0]);
        assert_eq!(flip_horizontal(&t).unwrap().data(), &[3.0, 2.0, 1.0, 0.0]);
    }
}
