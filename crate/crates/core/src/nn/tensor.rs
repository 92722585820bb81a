use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Dense vector of scalars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseVector<S> {
    values: Vec<S>,
}

impl<S: Scalar> DenseVector<S> {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![S::zero(); len],
        }
    }

    pub fn from_vec(values: Vec<S>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<S> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl<S: Scalar> From<Vec<S>> for DenseVector<S> {
    fn from(values: Vec<S>) -> Self {
        Self { values }
    }
}

/// Row-major dense matrix. Dimensions are fixed at construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix<S> {
    rows: usize,
    cols: usize,
    values: Vec<S>,
}

impl<S: Scalar> DenseMatrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![S::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<S>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(shape_err(
                "DenseMatrix::from_vec",
                rows * cols,
                values.len(),
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[&[S]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("DenseMatrix::from_rows", cols, r.len()));
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.values[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: S) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// `W x + b` with `W` shaped (out, in).
pub fn affine<S: Scalar>(
    w: &DenseMatrix<S>,
    b: &DenseVector<S>,
    x: &DenseVector<S>,
) -> Result<DenseVector<S>> {
    let mut out = vec![S::zero(); w.rows()];
    affine_into(w.as_slice(), w.rows(), w.cols(), b.as_slice(), x.as_slice(), &mut out)?;
    Ok(DenseVector::from_vec(out))
}

pub(crate) fn affine_into<S: Scalar>(
    w: &[S],
    rows: usize,
    cols: usize,
    b: &[S],
    x: &[S],
    out: &mut [S],
) -> Result<()> {
    if cols != x.len() {
        return Err(shape_err("affine", format!("input of length {cols}"), x.len()));
    }
    if b.len() != rows {
        return Err(shape_err("affine", format!("bias of length {rows}"), b.len()));
    }
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wv, xv) in row.iter().zip(x) {
            acc += *wv * *xv;
        }
        *o = acc;
    }
    Ok(())
}

pub fn elementwise_mul<S: Scalar>(a: &DenseVector<S>, b: &DenseVector<S>) -> Result<DenseVector<S>> {
    if a.len() != b.len() {
        return Err(shape_err("elementwise_mul", a.len(), b.len()));
    }
    Ok(DenseVector::from_vec(
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| *x * *y)
            .collect(),
    ))
}

pub fn relu<S: Scalar>(x: &DenseVector<S>) -> DenseVector<S> {
    DenseVector::from_vec(x.as_slice().iter().map(|v| v.max(S::zero())).collect())
}

/// Logistic function, evaluated without overflow for large |x|.
#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DenseVector<f64> {
        DenseVector::from_vec(x.to_vec())
    }

    #[test]
    fn affine_examples() {
        let eye = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(affine(&eye, &v(&[0.0, 0.0]), &v(&[3.0, 4.0])).unwrap(), v(&[3.0, 4.0]));
        assert_eq!(affine(&eye, &v(&[1.0, 1.0]), &v(&[3.0, 4.0])).unwrap(), v(&[4.0, 5.0]));
        let w = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(affine(&w, &v(&[0.0, 0.0]), &v(&[1.0, 1.0])).unwrap(), v(&[3.0, 7.0]));
    }

    #[test]
    fn affine_rejects_bad_dims() {
        let w = DenseMatrix::<f64>::zeros(2, 3);
        assert!(affine(&w, &v(&[0.0, 0.0]), &v(&[1.0, 1.0])).is_err());
        assert!(affine(&w, &v(&[0.0]), &v(&[1.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let x = v(&[5.0, 6.0, 7.0]);
        assert_eq!(elementwise_mul(&v(&[1.0, 1.0, 1.0]), &x).unwrap(), x);
        assert_eq!(elementwise_mul(&v(&[0.0, 0.0, 0.0]), &x).unwrap(), v(&[0.0, 0.0, 0.0]));
        assert_eq!(elementwise_mul(&v(&[2.0, 3.0]), &v(&[4.0, 5.0])).unwrap(), v(&[8.0, 15.0]));
        assert!(elementwise_mul(&v(&[2.0]), &v(&[4.0, 5.0])).is_err());
    }

    #[test]
    fn activations() {
        assert_eq!(relu(&v(&[-2.0, 3.0])), v(&[0.0, 3.0]));
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(8.0f64) - 0.999665).abs() < 1e-6);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
        assert!((sigmoid(0.3f32) - 0.574_442_5).abs() < 1e-6);
    }
}
