//! Dense 4-D tensor in (N, C, H, W) row-major layout, `f64` throughout.

use crate::error::{Error, Result};

/// The universal value type: a dense rank-4 array plus an optional gradient
/// buffer of identical shape. Vectors and matrices ride along with trailing
/// singleton dimensions (per-channel vectors as `(1, C, 1, 1)`, logits as
/// `(N, K, 1, 1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
            grad: None,
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
            grad: None,
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch {
                op: "tensor::from_vec",
                detail: format!(
                    "data length {} does not equal N*C*H*W = {} for shape {:?}",
                    data.len(),
                    expect,
                    shape
                ),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Fill with draws from `f` in index order; deterministic given the closure.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut() -> f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: (0..len).map(|_| f()).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.idx(n, c, h, w);
        &mut self.data[i]
    }

    /// Borrow one (n, c) plane as a contiguous H*W slice.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
            grad: None,
        }
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape("tensor::add", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
            grad: None,
        })
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| k * x)
    }

    pub fn check_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(())
    }

    /// Gradient slot accessors. The slot is populated by backward passes and
    /// consumed by the optimizer; it never participates in forward math.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor::set_grad",
                detail: format!(
                    "gradient length {} vs value length {}",
                    grad.len(),
                    self.data.len()
                ),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Error if any entry is NaN or infinite.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        for (i, &x) in self.data.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    op,
                    detail: format!("entry {i} is {x}"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::from_vec([1, 2, 2, 2], vec![0.0; 8]).is_ok());
        let err = Tensor::from_vec([1, 2, 2, 2], vec![0.0; 7]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_vec([2, 2, 2, 2], (0..16).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 0, 1), 1.0);
        assert_eq!(t.at(0, 0, 1, 0), 2.0);
        assert_eq!(t.at(0, 1, 0, 0), 4.0);
        assert_eq!(t.at(1, 0, 0, 0), 8.0);
        assert_eq!(t.at(1, 1, 1, 1), 15.0);
    }

    #[test]
    fn plane_is_contiguous_hw() {
        let t = Tensor::from_vec([1, 2, 2, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.plane(0, 1), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn set_grad_rejects_wrong_length() {
        let mut t = Tensor::zeros([1, 1, 2, 2]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        assert!(t.set_grad(vec![1.0; 4]).is_ok());
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn check_finite_catches_nan() {
        let mut t = Tensor::zeros([1, 1, 1, 3]);
        t.data_mut()[1] = f64::NAN;
        assert!(matches!(
            t.check_finite("test"),
            Err(Error::NonFinite { .. })
        ));
    }
}
