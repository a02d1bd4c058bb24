//! Dense f64 linear algebra: row-major matrices, vectors, products,
//! numerically stable softmax and spectral norms via power iteration.
//! Small and allocation-honest rather than fast; everything the rest of
//! the crate touches numerically goes through here.

use crate::error::{Error, Result};

/// Finite stand-in for "-inf" score entries. Softmax treats entries equal
/// to this constant as masked: they get exactly zero weight and do not
/// participate in the max-subtraction.
pub const NEG_LARGE: f64 = -1e30;

/// Which matrix norm bound computations use. All acceptance checks run on
/// the spectral norm; Frobenius is exposed for sensitivity studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatNorm {
    Spectral,
    Frobenius,
}

impl MatNorm {
    /// Norm of the identity of dimension `d` under this norm.
    pub fn identity_norm(self, d: usize) -> f64 {
        match self {
            MatNorm::Spectral => 1.0,
            MatNorm::Frobenius => (d as f64).sqrt(),
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "size mismatch");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_vec(&self, i: usize) -> Vector {
        Vector::from(self.row(i).to_vec())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul",
                format!(
                    "{}x{} * {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (l, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(l);
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        Ok(out)
    }

    /// A Bᵀ without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim(
                "matmul_nt",
                format!(
                    "{}x{} * ({}x{})ᵀ",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, cell) in out_row.iter_mut().enumerate() {
                *cell = dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    /// Aᵀ B without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim(
                "matmul_tn",
                format!(
                    "({}x{})ᵀ * {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// y = M x.
    pub fn matvec(&self, x: &Vector) -> Vector {
        assert_eq!(self.cols, x.dim(), "matvec shape");
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            y[i] = dot(self.row(i), x.as_slice());
        }
        Vector::from(y)
    }

    /// y = Mᵀ x without materializing the transpose.
    pub fn matvec_t(&self, x: &Vector) -> Vector {
        assert_eq!(self.rows, x.dim(), "matvec_t shape");
        let mut y = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x.as_slice()[i];
            if xi == 0.0 {
                continue;
            }
            for (j, &m) in self.row(i).iter().enumerate() {
                y[j] += m * xi;
            }
        }
        Vector::from(y)
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "add shape");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "sub shape");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// self += s * other.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, a| m.max(a.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    pub fn norm(&self, which: MatNorm) -> f64 {
        match which {
            MatNorm::Spectral => self.spectral_norm(),
            MatNorm::Frobenius => self.frobenius_norm(),
        }
    }

    /// Largest singular value via power iteration on MᵀM.
    ///
    /// Starts from the normalized all-ones vector. If that vector happens to
    /// lie in the null space of MᵀM the iteration falls back to the basis
    /// vector with the largest image. Stops when the Rayleigh estimate is
    /// stable to ~1e-13 relative (well inside the 1e-9 contract).
    pub fn spectral_norm(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        let fro = self.frobenius_norm();
        if fro == 0.0 {
            return 0.0;
        }
        let n = self.cols;
        let mut v = Vector::from(vec![1.0 / (n as f64).sqrt(); n]);
        let mut sigma = 0.0f64;
        for iter in 0..100_000 {
            let w = self.matvec(&v); // M v
            let s = w.norm2();
            if s <= f64::MIN_POSITIVE {
                // all-ones start was (numerically) in the null space:
                // restart from the basis vector with the largest image
                if iter == 0 {
                    let mut best = 0;
                    let mut best_norm = -1.0;
                    for j in 0..n {
                        let col_norm: f64 = (0..self.rows)
                            .map(|i| self.get(i, j) * self.get(i, j))
                            .sum::<f64>()
                            .sqrt();
                        if col_norm > best_norm {
                            best_norm = col_norm;
                            best = j;
                        }
                    }
                    let mut e = vec![0.0; n];
                    e[best] = 1.0;
                    v = Vector::from(e);
                    continue;
                }
                return sigma;
            }
            let u = self.matvec_t(&w); // Mᵀ M v
            let un = u.norm2();
            if un <= f64::MIN_POSITIVE {
                return s; // ‖v‖ = 1 here, so s is the Rayleigh estimate
            }
            v = u.scale(1.0 / un);
            if (s - sigma).abs() <= 1e-13 * s.max(f64::MIN_POSITIVE) {
                return s;
            }
            sigma = s;
        }
        sigma
    }
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector {
            data: vec![0.0; dim],
        }
    }

    pub fn from(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dot shape");
        dot(&self.data, &other.data)
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "sub shape");
        Vector::from(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector::from(self.data.iter().map(|a| a * s).collect())
    }

    /// Euclidean norm.
    pub fn norm2(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Outer product a ⊗ b: result[r][c] = a[r] * b[c].
pub fn outer(a: &Vector, b: &Vector) -> Matrix {
    let mut m = Matrix::zeros(a.dim(), b.dim());
    for (r, &av) in a.as_slice().iter().enumerate() {
        let row = m.row_mut(r);
        for (c, &bv) in b.as_slice().iter().enumerate() {
            row[c] = av * bv;
        }
    }
    m
}

/// Numerically stable softmax of one score row.
///
/// Entries equal to [`NEG_LARGE`] are masked out: they take no part in the
/// max-subtraction and come back as exactly 0. Errors if every entry is
/// masked.
pub fn softmax_row(s: &Vector) -> Result<Vector> {
    softmax_slice(s.as_slice()).map(Vector::from)
}

pub(crate) fn softmax_slice(s: &[f64]) -> Result<Vec<f64>> {
    debug_assert!(!s.is_empty(), "softmax of empty row");
    let mut max = f64::NEG_INFINITY;
    for &x in s {
        if x != NEG_LARGE && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySoftmaxSupport);
    }
    let mut out = vec![0.0; s.len()];
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(s) {
        if x == NEG_LARGE {
            continue; // masked: exactly zero weight
        }
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}
