//! Dense row-major `f64` tensors and the numeric kernels shared by the tape
//! and by eager (non-differentiated) evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense n-dimensional array of finite `f64` values in row-major order.
///
/// A scalar has an empty shape and one element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    /// Builds a tensor without validating; callers guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Format("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Gathers the given rows of a matrix into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::from_parts(vec![idx.len(), c], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn as_matrix(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    match a.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: vec![],
        }),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    let (m, k) = match a.shape.as_slice() {
        [m, k] => (*m, *k),
        _ => return Err(mismatch()),
    };
    let (k2, n) = match b.shape.as_slice() {
        [k2, n] => (*k2, *n),
        _ => return Err(mismatch()),
    };
    if k != k2 {
        return Err(mismatch());
    }
    let mut out = vec![0.0; m * n];
    // SAFETY: slices have exactly m*k, k*n and m*n elements with the row-major
    // strides passed below.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = match a.shape.as_slice() {
        [r, c] => (*r, *c),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: a.shape.clone(),
                rhs: vec![],
            })
        }
    };
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax(a: &Tensor) -> Result<Tensor> {
    let (r, c) = as_matrix("log_softmax", a)?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &a.data[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for j in 0..c {
            out[i * c + j] = row[j] - lse;
        }
    }
    Ok(Tensor::from_parts(a.shape.clone(), out))
}

/// Row-wise softmax with max subtraction.
pub fn softmax(a: &Tensor) -> Result<Tensor> {
    let (r, c) = as_matrix("softmax", a)?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &a.data[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            out[i * c + j] = e;
            z += e;
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= z;
        }
    }
    Ok(Tensor::from_parts(a.shape.clone(), out))
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(a: &Tensor) -> Vec<usize> {
    let c = a.cols();
    (0..a.rows())
        .map(|i| {
            let row = &a.data[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &eye).unwrap(), a);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::vector(vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let l = log_softmax(&Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!(l.data()[0].abs() < 1e-300 || l.data()[0] == 0.0);
        assert!((l.data()[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn argmax_ties_lowest_index() {
        let t = Tensor::matrix(2, 3, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }

    #[test]
    fn serde_validates_shape() {
        let bad = r#"{"shape":[2],"data":[1.0]}"#;
        assert!(serde_json::from_str::<Tensor>(bad).is_err());
        let ok: Tensor = serde_json::from_str(r#"{"shape":[2],"data":[1.0,2.5]}"#).unwrap();
        assert_eq!(ok.data(), &[1.0, 2.5]);
    }
}
