//! Dense row-major `f64` matrices and the handful of kernels the transformer
//! needs. Everything is a pure function returning a fresh matrix.

mod rng;

pub use rng::Prng;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense 2-D matrix stored row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{}x{}", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()
    }
}

fn mismatch(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::DimMismatch {
        op,
        lhs_rows: a.rows,
        lhs_cols: a.cols,
        rhs_rows: b.rows,
        rhs_cols: b.cols,
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows; panics on ragged input, so it is
    /// meant for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self::from_rows(&[values])
    }

    /// Matrix with i.i.d. `N(0, stddev^2)` entries drawn row-major from `rng`.
    pub fn random_normal(rows: usize, cols: usize, stddev: f64, rng: &mut Prng) -> Self {
        let data = (0..rows * cols).map(|_| stddev * rng.next_normal()).collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard product. Each output entry accumulates its terms in ascending
    /// inner-index order starting from `0.0`, so appending zero rows to `b`
    /// (with matching columns in `a`) never changes the result.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(mismatch("matmul", self, b));
        }
        let mut out = Matrix::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (g, &a) in a_row.iter().enumerate() {
                let b_row = &b.data[g * b.cols..(g + 1) * b.cols];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn zip_with(&self, b: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != b.shape() {
            return Err(mismatch(op, self, b));
        }
        let data = self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with(b, "add", |x, y| x + y)
    }

    pub fn sub(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with(b, "sub", |x, y| x - y)
    }

    pub fn hadamard(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with(b, "hadamard", |x, y| x * y)
    }

    /// In-place `self += b`.
    pub fn add_assign(&mut self, b: &Matrix) -> Result<()> {
        if self.shape() != b.shape() {
            return Err(mismatch("add_assign", self, b));
        }
        for (x, &y) in self.data.iter_mut().zip(&b.data) {
            *x += y;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| x * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(mismatch("add_row_broadcast", self, bias));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (x, &b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// `1 x cols` vector of column sums (rows accumulated top to bottom).
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &x) in out.data.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    /// `[a b]`
    pub fn concat_cols(&self, b: &Matrix) -> Result<Matrix> {
        if self.rows != b.rows {
            return Err(mismatch("concat_cols", self, b));
        }
        let cols = self.cols + b.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(b.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// `[a; b]`
    pub fn concat_rows(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.cols {
            return Err(mismatch("concat_rows", self, b));
        }
        let mut data = Vec::with_capacity(self.data.len() + b.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&b.data);
        Ok(Matrix {
            rows: self.rows + b.rows,
            cols: self.cols,
            data,
        })
    }

    /// Horizontal concatenation of any number of blocks with equal row counts.
    pub fn hstack(blocks: &[Matrix]) -> Result<Matrix> {
        let Some(first) = blocks.first() else {
            return Err(Error::invalid("hstack of zero blocks"));
        };
        let mut out = first.clone();
        for b in &blocks[1..] {
            out = out.concat_cols(b)?;
        }
        Ok(out)
    }

    /// Vertical concatenation of any number of blocks with equal column counts.
    pub fn vstack(blocks: &[Matrix]) -> Result<Matrix> {
        let Some(first) = blocks.first() else {
            return Err(Error::invalid("vstack of zero blocks"));
        };
        let cols = first.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.cols != cols {
                return Err(mismatch("vstack", first, b));
            }
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.rows {
            return Err(Error::OutOfBounds {
                op: "slice_rows",
                start,
                end,
                len: self.rows,
            });
        }
        Ok(Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.cols {
            return Err(Error::OutOfBounds {
                op: "slice_cols",
                start,
                end,
                len: self.cols,
            });
        }
        let cols = end - start;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, b: &Matrix) -> Result<f64> {
        if self.shape() != b.shape() {
            return Err(mismatch("max_abs_diff", self, b));
        }
        Ok(self
            .data
            .iter()
            .zip(&b.data)
            .fold(0.0, |m, (x, y)| m.max((x - y).abs())))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Numerically stable softmax applied to each row independently.
pub fn row_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Root-mean-square of a row, `sqrt(mean(x^2))`.
#[inline]
pub fn row_rms(row: &[f64]) -> f64 {
    let sq: f64 = row.iter().map(|v| v * v).sum();
    (sq / row.len() as f64).sqrt()
}

/// RMSNorm over rows with gain `g` (`1 x cols`). There is no epsilon: a row
/// whose mean square is exactly zero maps to a zero row.
pub fn rmsnorm_rows(x: &Matrix, g: &Matrix) -> Result<Matrix> {
    if g.rows != 1 || g.cols != x.cols {
        return Err(mismatch("rmsnorm_rows", x, g));
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let rms = row_rms(x.row(r));
        if rms == 0.0 {
            continue;
        }
        for ((o, &v), &gain) in out.row_mut(r).iter_mut().zip(x.row(r)).zip(&g.data) {
            *o = v * gain / rms;
        }
    }
    Ok(out)
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: &Matrix) -> Matrix {
    x.map(|v| v * normal_cdf(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for g in 0..a.cols() {
                    acc += a.get(i, g) * b.get(g, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_small_cases() {
        let id = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let b = Matrix::from_rows(&[[5.0, 6.0], [7.0, 8.0]]);
        assert_eq!(id.matmul(&b).unwrap(), b);

        let row = Matrix::from_rows(&[[1.0, 2.0]]);
        let col = Matrix::from_rows(&[[3.0], [4.0]]);
        assert_eq!(row.matmul(&col).unwrap(), Matrix::from_rows(&[[11.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Prng::new(17);
        let a = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let b = Matrix::random_normal(4, 2, 1.0, &mut rng);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-15);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        let err = a.matmul(&Matrix::zeros(2, 3)).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let s = row_softmax(&Matrix::from_rows(&[[0.0, 0.0]]));
        assert_eq!(s, Matrix::from_rows(&[[0.5, 0.5]]));
        let s = row_softmax(&Matrix::from_rows(&[[1000.0, 1000.0]]));
        assert_eq!(s, Matrix::from_rows(&[[0.5, 0.5]]));
        // exp(ln 3) / (1 + 3)
        let s = row_softmax(&Matrix::from_rows(&[[0.0, 3f64.ln()]]));
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rmsnorm_cases() {
        let ones = Matrix::from_rows(&[[1.0; 4]]);
        assert_eq!(rmsnorm_rows(&ones, &ones).unwrap(), ones);

        let z = rmsnorm_rows(&Matrix::zeros(1, 2), &Matrix::from_rows(&[[3.0, -2.0]])).unwrap();
        assert_eq!(z, Matrix::zeros(1, 2));

        let y = rmsnorm_rows(&Matrix::from_rows(&[[3.0, 4.0]]), &Matrix::from_rows(&[[1.0, 1.0]])).unwrap();
        let rms = 12.5f64.sqrt();
        assert!((y.get(0, 0) - 3.0 / rms).abs() < 1e-15);
        assert!((y.get(0, 1) - 4.0 / rms).abs() < 1e-15);
        assert!((y.get(0, 0) - 0.848_528_137_423_857).abs() < 1e-12);
        assert!((y.get(0, 1) - 1.131_370_849_898_476).abs() < 1e-12);
    }

    #[test]
    fn rmsnorm_rejects_bad_gain() {
        assert!(rmsnorm_rows(&Matrix::zeros(2, 3), &Matrix::zeros(1, 2)).is_err());
        assert!(rmsnorm_rows(&Matrix::zeros(2, 3), &Matrix::zeros(3, 1)).is_err());
    }

    /// erf via its Maclaurin series; converges quickly for |x| <= 2.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..60 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    #[test]
    fn activations() {
        assert_eq!(
            relu(&Matrix::from_rows(&[[-1.0, 2.0]])),
            Matrix::from_rows(&[[0.0, 2.0]])
        );
        assert_eq!(gelu(&Matrix::from_rows(&[[0.0]])).get(0, 0), 0.0);
        let oracle = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
        let g = gelu(&Matrix::from_rows(&[[1.0]])).get(0, 0);
        assert!((g - oracle).abs() < 1e-14);
        assert!((g - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn block_ops() {
        let a = Matrix::from_rows(&[[1.0]]);
        let b = Matrix::from_rows(&[[2.0]]);
        assert_eq!(a.concat_cols(&b).unwrap(), Matrix::from_rows(&[[1.0, 2.0]]));
        assert_eq!(a.concat_rows(&b).unwrap(), Matrix::from_rows(&[[1.0], [2.0]]));
        let t = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).transpose();
        assert_eq!(t, Matrix::from_rows(&[[1.0, 3.0], [2.0, 4.0]]));
        assert!(Matrix::zeros(2, 2).concat_cols(&Matrix::zeros(3, 1)).is_err());
        assert!(Matrix::zeros(2, 2).concat_rows(&Matrix::zeros(1, 3)).is_err());
        assert!(Matrix::zeros(2, 2).slice_rows(1, 3).is_err());
        assert!(Matrix::zeros(2, 2).add(&Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn broadcast_and_sums() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let y = x.add_row_broadcast(&Matrix::row_vector(&[10.0, 20.0])).unwrap();
        assert_eq!(y, Matrix::from_rows(&[[11.0, 22.0], [13.0, 24.0]]));
        assert_eq!(x.column_sums(), Matrix::row_vector(&[4.0, 6.0]));
    }
}
