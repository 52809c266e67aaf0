//! Dense row-major `f64` tensors with a fixed `[batch, rows, cols]` layout.
//!
//! Everything in the model is at most three-dimensional: a batch of
//! sequences of feature rows. Matrices are `[1, rows, cols]` and vectors are
//! `[1, 1, cols]`.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 3],
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
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 3], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    /// A `[1, rows, cols]` matrix from nested rows.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged matrix rows");
            data.extend_from_slice(row);
        }
        Self::from_vec([1, r, c], data)
    }

    /// A `[1, 1, n]` row vector.
    pub fn row(values: &[f64]) -> Self {
        Self::from_vec([1, 1, values.len()], values.to_vec())
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec([1, 1, 1], vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([1, n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[1]
    }

    pub fn cols(&self) -> usize {
        self.shape[2]
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

    pub fn at(&self, b: usize, r: usize, c: usize) -> f64 {
        self.data[(b * self.shape[1] + r) * self.shape[2] + c]
    }

    /// Row `r` of batch entry `b`.
    pub fn row_slice(&self, b: usize, r: usize) -> &[f64] {
        let c = self.shape[2];
        let start = (b * self.shape[1] + r) * c;
        &self.data[start..start + c]
    }

    pub fn reshaped(mut self, shape: [usize; 3]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c[b] (+)= a[b] · op(b[b])` over a batch of matrices via `dgemm`.
///
/// `a` is `[m × k]` (or `[k × m]` when `trans_a`), `b` is `[k × n]` (or
/// `[n × k]` when `trans_b`). A batch stride of zero broadcasts an operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_batch_stride: usize,
    trans_a: bool,
    b: &[f64],
    b_batch_stride: usize,
    trans_b: bool,
    c: &mut [f64],
    c_batch_stride: usize,
    accumulate: bool,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    for i in 0..batch {
        let a_off = i * a_batch_stride;
        let b_off = i * b_batch_stride;
        let c_off = i * c_batch_stride;
        assert!(a_off + m * k <= a.len() && b_off + k * n <= b.len() && c_off + m * n <= c.len());
        // SAFETY: bounds are asserted above and strides describe dense
        // row-major (or transposed) blocks fully inside each slice.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr().add(b_off),
                rsb,
                csb,
                beta,
                c.as_mut_ptr().add(c_off),
                n as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(1, 2, 3, 2, &a, 0, false, &b, 0, false, &mut c, 0, false);
        assert_eq!(c, [1.0 - 2.0, 0.5 + 4.0 + 3.0, 4.0 - 5.0, 2.0 + 10.0 + 6.0]);

        // aᵀ stored as 3x2 and used with trans_a.
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0; 4];
        gemm(1, 2, 3, 2, &at, 0, true, &b, 0, false, &mut c2, 0, false);
        assert_eq!(c, c2);
    }

    #[test]
    fn matrix_constructor_and_indexing() {
        let t = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(t.shape(), [1, 2, 2]);
        assert_eq!(t.at(0, 1, 0), 3.0);
        assert_eq!(t.row_slice(0, 1), &[3.0, 4.0]);
    }
}
