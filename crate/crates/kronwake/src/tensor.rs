//! Dense matrix/vector arithmetic shared by every other module.
//!
//! Matrices are row-major `f64`. The vec convention used throughout the crate
//! is column-stacking, so `(A ⊗ G) vec(V) = vec(G V Aᵀ)` for `A` m×m, `G` n×n
//! and `V` n×m. Parameter and gradient flattening in the network module must
//! lay blocks out to match.

use crate::error::{Error, Result};

/// Relative tolerance used when deciding whether a matrix is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Largest matrix `dense_kron` will materialize (rows or cols).
pub const KRON_SIZE_CAP: usize = 4096;

/// Dense row-major matrix of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dimension("from_rows: no rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("from_rows: ragged rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &e) in entries.iter().enumerate() {
            m.data[i * n + i] = e;
        }
        m
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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

    pub fn scale(&self, a: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| a * x).collect() }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// self += a * other
    pub fn axpy(&mut self, a: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "shape {}x{} vs {}x{}",
                self.rows, other.rows, self.cols, other.cols
            )));
        }
        Ok(())
    }

    /// self · other
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul: {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = out.row_mut(i);
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        Ok(out)
    }

    /// self · otherᵀ — inner loops run over contiguous rows of both operands.
    pub fn mul_transpose_b(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "mul_transpose_b: {}x{} · ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(arow, other.row(j));
            }
        }
        Ok(out)
    }

    /// selfᵀ · other — accumulates rank-1 row contributions.
    pub fn mul_transpose_a(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Dimension(format!(
                "mul_transpose_a: ({}x{})ᵀ · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for b in 0..self.rows {
            let arow = self.row(b);
            let brow = other.row(b);
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[k * other.cols..(k + 1) * other.cols];
                for (o, &x) in orow.iter_mut().zip(brow) {
                    *o += a * x;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::Dimension(format!("matvec: {}x{} · {}", self.rows, self.cols, v.len())));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// Max entrywise asymmetry relative to the matrix scale.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn check_symmetric(&self, context: &str) -> Result<()> {
        if !self.is_square() {
            return Err(Error::Dimension(format!("{context}: {}x{} not square", self.rows, self.cols)));
        }
        let tol = SYMMETRY_TOL * (1.0 + self.max_abs());
        let asym = self.asymmetry();
        if asym > tol {
            return Err(Error::NotSymmetric(format!("{context}: |M - Mᵀ| = {asym:.3e} > {tol:.3e}")));
        }
        Ok(())
    }

    /// (M + Mᵀ)/2
    pub fn symmetrized(&self) -> Matrix {
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                s.set(i, j, v);
                s.set(j, i, v);
            }
        }
        s
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// y += a * x
pub fn vec_axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Column-stacking vec: chunks of length `rows` per column.
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!("unvec: {} into {}x{}", v.len(), rows, cols)));
    }
    let mut m = Matrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m.data[i * cols + j] = v[j * rows + i];
        }
    }
    Ok(m)
}

pub fn vec_of(m: &Matrix) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.rows * m.cols);
    for j in 0..m.cols {
        for i in 0..m.rows {
            v.push(m.data[i * m.cols + j]);
        }
    }
    v
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvector columns. Rejects non-square or non-symmetric input, then
/// symmetrizes (M + Mᵀ)/2 before iterating.
pub fn sym_eig(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    m.check_symmetric("sym_eig")?;
    let n = m.rows;
    if n == 0 {
        return Err(Error::Dimension("sym_eig: empty matrix".into()));
    }
    let mut a = m.symmetrized();
    let mut v = Matrix::identity(n);

    let mut off = off_diag_norm(&a);
    let scale = a.max_abs().max(1.0);
    let tol = 1e-14 * scale * (n as f64);
    let max_sweeps = 64;
    let mut sweep = 0;
    while off > tol && sweep < max_sweeps {
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // A <- Jᵀ A J on rows/cols p and q
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        off = off_diag_norm(&a);
        sweep += 1;
    }
    if off > tol * 1e3 {
        return Err(Error::Numeric(format!("sym_eig: no convergence after {max_sweeps} sweeps, off = {off:.3e}")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, new_col, v.get(r, old_col));
        }
    }
    Ok((values, vectors))
}

fn off_diag_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let x = a.get(i, j);
            acc += 2.0 * x * x;
        }
    }
    acc.sqrt()
}

/// Inverse of (M + γI): the γ shift on the eigenvalues realized as
/// Q diag(1/(λᵢ+γ)) Qᵀ at test scale, and as a Cholesky solve of the shifted
/// matrix for large factors (same operator, cubic instead of iterative cost).
///
/// Requires γ > 0, or γ = 0 with smallest eigenvalue above 1e-12.
pub fn damped_inverse(m: &Matrix, gamma: f64) -> Result<Matrix> {
    if gamma < 0.0 {
        return Err(Error::Config(format!("damped_inverse: gamma = {gamma} < 0")));
    }
    if gamma > 0.0 && m.rows() > 192 {
        return damped_inverse_cholesky(m, gamma);
    }
    let (values, q) = sym_eig(m)?;
    let min = values.last().copied().unwrap_or(0.0);
    if gamma == 0.0 && min <= 1e-12 {
        return Err(Error::Singular(format!("damped_inverse: gamma = 0 and min eigenvalue {min:.3e}")));
    }
    let n = m.rows();
    let mut out = Matrix::zeros(n, n);
    for k in 0..n {
        let w = values[k] + gamma;
        if w <= 0.0 {
            return Err(Error::Singular(format!("damped_inverse: shifted eigenvalue {w:.3e} <= 0")));
        }
        let inv = 1.0 / w;
        // out += inv * q_k q_kᵀ
        for i in 0..n {
            let qi = q.get(i, k) * inv;
            if qi == 0.0 {
                continue;
            }
            for j in 0..n {
                out.data[i * n + j] += qi * q.get(j, k);
            }
        }
    }
    Ok(out.symmetrized())
}

fn damped_inverse_cholesky(m: &Matrix, gamma: f64) -> Result<Matrix> {
    m.check_symmetric("damped_inverse")?;
    let n = m.rows();
    let mut shifted = m.symmetrized();
    for i in 0..n {
        shifted.set(i, i, shifted.get(i, i) + gamma);
    }
    let l = cholesky(&shifted)?;
    // Invert L in place (lower triangular), then (M+γI)⁻¹ = L⁻ᵀ L⁻¹.
    let mut linv = Matrix::zeros(n, n);
    for j in 0..n {
        linv.set(j, j, 1.0 / l.get(j, j));
        for i in (j + 1)..n {
            let mut sum = 0.0;
            for k in j..i {
                sum += l.get(i, k) * linv.get(k, j);
            }
            linv.set(i, j, -sum / l.get(i, i));
        }
    }
    // out[i][j] = Σ_k linv[k][i] · linv[k][j], k ≥ max(i, j)
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = 0.0;
            for k in i..n {
                sum += linv.get(k, i) * linv.get(k, j);
            }
            out.set(i, j, sum);
            out.set(j, i, sum);
        }
    }
    Ok(out)
}

/// Cholesky factor L of an SPD matrix (M = L Lᵀ, L lower triangular).
pub fn cholesky(m: &Matrix) -> Result<Matrix> {
    m.check_symmetric("cholesky")?;
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Singular(format!("cholesky: pivot {sum:.3e} at {i}")));
                }
                l.set(i, i, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solve M x = b for symmetric positive definite M.
pub fn solve_spd(m: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let l = cholesky(m)?;
    solve_with_cholesky(&l, b)
}

pub fn solve_with_cholesky(l: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = l.rows();
    if b.len() != n {
        return Err(Error::Dimension(format!("solve: rhs len {} vs {}", b.len(), n)));
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l.get(i, k) * y[k];
        }
        y[i] = sum / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l.get(k, i) * x[k];
        }
        x[i] = sum / l.get(i, i);
    }
    Ok(x)
}

/// (A ⊗ G) v without materializing the product: vec(G V Aᵀ) with V = unvec(v).
pub fn kron_matvec(a: &Matrix, g: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if !a.is_square() || !g.is_square() {
        return Err(Error::Dimension("kron_matvec: factors must be square".into()));
    }
    let m = a.rows();
    let n = g.rows();
    if v.len() != m * n {
        return Err(Error::Dimension(format!("kron_matvec: v len {} vs {}*{}", v.len(), m, n)));
    }
    let vm = unvec(v, n, m)?;
    let gv = g.matmul(&vm)?;
    let out = gv.mul_transpose_b(a)?;
    Ok(vec_of(&out))
}

/// Materialize A ⊗ G. Test/oracle scale only; guarded by `KRON_SIZE_CAP`.
pub fn dense_kron(a: &Matrix, g: &Matrix) -> Result<Matrix> {
    let rows = a.rows() * g.rows();
    let cols = a.cols() * g.cols();
    if rows > KRON_SIZE_CAP || cols > KRON_SIZE_CAP {
        return Err(Error::SizeCap(format!("dense_kron: {rows}x{cols} exceeds {KRON_SIZE_CAP}")));
    }
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let aij = a.get(i, j);
            if aij == 0.0 {
                continue;
            }
            for p in 0..g.rows() {
                for q in 0..g.cols() {
                    out.set(i * g.rows() + p, j * g.cols() + q, aij * g.get(p, q));
                }
            }
        }
    }
    Ok(out)
}

/// Spectral norm ‖X‖₂ of a square matrix via power iteration on XᵀX.
pub fn spectral_norm(x: &Matrix) -> Result<f64> {
    if !x.is_square() {
        return Err(Error::Dimension(format!("spectral_norm: {}x{} not square", x.rows(), x.cols())));
    }
    let n = x.rows();
    if n == 0 {
        return Ok(0.0);
    }
    // Deterministic, non-degenerate start vector.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * ((i as f64) + 1.0).sin()).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|e| *e /= nv);

    let xt = x.transpose();
    let mut sigma2 = 0.0;
    for _ in 0..500 {
        let xv = x.matvec(&v)?;
        let mut w = xt.matvec(&xv)?;
        let nw = norm2(&w);
        if nw == 0.0 {
            return Ok(0.0);
        }
        w.iter_mut().for_each(|e| *e /= nw);
        let prev = sigma2;
        sigma2 = nw;
        v = w;
        if (sigma2 - prev).abs() <= 1e-13 * sigma2.max(1.0) {
            break;
        }
    }
    Ok(sigma2.sqrt())
}
