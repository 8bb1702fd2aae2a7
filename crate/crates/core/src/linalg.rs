//! Small dense linear algebra on row-major `f64` buffers.
//!
//! Everything here is sized for desk-scale models (hidden width in the tens,
//! feature dimension below a hundred), so plain loops are enough. The inner
//! products use four independent accumulators, which lets the compiler keep
//! them in vector registers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        matvec_into(&self.data, self.rows, self.cols, x, &mut out);
        out
    }

    /// `selfᵀ * y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        matvec_t_acc(&self.data, self.rows, self.cols, y, &mut out);
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                axpy(self.data[i * self.cols + k], other.row(k), out_row);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += a * x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `out = W x` for a row-major `rows × cols` buffer.
#[inline]
pub fn matvec_into(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `out += Wᵀ y` for a row-major `rows × cols` buffer.
#[inline]
pub fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        if y[r] != 0.0 {
            axpy(y[r], &w[r * cols..(r + 1) * cols], out);
        }
    }
}

/// `G += a bᵀ` (outer-product accumulation) into a row-major buffer.
#[inline]
pub fn outer_acc(a: &[f64], b: &[f64], g: &mut [f64]) {
    let cols = b.len();
    for (r, &ar) in a.iter().enumerate() {
        if ar != 0.0 {
            axpy(ar, b, &mut g[r * cols..(r + 1) * cols]);
        }
    }
}

pub fn norm_l1(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

pub fn norm_l2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cholesky {
    l: Mat,
}

impl Cholesky {
    pub fn factor(a: &Mat) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::invalid(format!(
                "cholesky needs a square matrix, got {}x{}",
                a.rows, a.cols
            )));
        }
        let n = a.rows;
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::numerical(format!(
                    "matrix is not positive definite (pivot {j} = {d:e})"
                )));
            }
            let djj = d.sqrt();
            l.set(j, j, djj);
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / djj);
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// Solves `L y = b`.
    pub fn forward_solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let row = self.l.row(i);
            let s = b[i] - dot(&row[..i], &y[..i]);
            y[i] = s / row[i];
        }
        y
    }

    /// Solves `A x = b` with `A = L Lᵀ`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let y = self.forward_solve(b);
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l.get(k, i) * x[k];
            }
            x[i] = s / self.l.get(i, i);
        }
        x
    }

    /// `bᵀ A⁻¹ b`, computed as `‖L⁻¹ b‖²`.
    pub fn inv_quad_form(&self, b: &[f64]) -> f64 {
        let y = self.forward_solve(b);
        dot(&y, &y)
    }
}

/// Result of a power iteration run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub iterations: usize,
}

/// Largest singular value of `w` by power iteration on `wᵀw`.
///
/// The start vector is fixed (all ones, normalized) so the result is
/// deterministic. Converges when the relative change of the estimate drops
/// below `tol`.
pub fn spectral_norm(w: &Mat, tol: f64, max_iter: usize) -> Result<SpectralNorm> {
    let n = w.cols;
    if n == 0 || w.rows == 0 {
        return Ok(SpectralNorm {
            value: 0.0,
            iterations: 0,
        });
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut prev = 0.0f64;
    for it in 1..=max_iter {
        let wv = w.matvec(&v);
        let mut u = w.matvec_t(&wv);
        let nu = norm_l2(&u);
        if nu == 0.0 {
            // the start vector lies in the null space; wᵀw has no component there
            return Ok(SpectralNorm {
                value: 0.0,
                iterations: it,
            });
        }
        u.iter_mut().for_each(|x| *x /= nu);
        let sigma = nu.sqrt();
        if (sigma - prev).abs() <= tol * sigma.max(f64::MIN_POSITIVE) {
            return Ok(SpectralNorm {
                value: sigma,
                iterations: it,
            });
        }
        prev = sigma;
        v = u;
    }
    Err(Error::numerical(format!(
        "power iteration did not converge after {max_iter} iterations (last estimate {prev:e})"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..7).map(f64::from).collect();
        let b = vec![1.0; 7];
        assert_eq!(dot(&a, &b), 21.0);
    }

    #[test]
    fn cholesky_solves_small_system() {
        let a = Mat::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let ch = Cholesky::factor(&a).unwrap();
        let x = ch.solve(&[2.0, 1.0]);
        // 4x + 2y = 2, 2x + 3y = 1 → x = 0.5, y = 0
        assert!((x[0] - 0.5).abs() < 1e-12 && x[1].abs() < 1e-12);
        assert!((ch.inv_quad_form(&[2.0, 1.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(Cholesky::factor(&a), Err(Error::Numerical(_))));
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let a = Mat::from_rows(&[vec![3.0, 0.0], vec![0.0, -5.0], vec![0.0, 0.0]]);
        let s = spectral_norm(&a, 1e-12, 10_000).unwrap();
        assert!((s.value - 5.0).abs() < 1e-9);
    }

    #[test]
    fn matmul_and_transpose_agree() {
        let a = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let ata = a.transpose().matmul(&a);
        assert_eq!(ata.get(0, 0), 17.0);
        assert_eq!(ata.get(2, 1), 3.0 * 2.0 + 6.0 * 5.0);
    }
}
