//! Dense linear algebra for small action dimensions.
//!
//! Action vectors here have a handful of coordinates, so plain `Vec<f64>`
//! storage with O(d^3) factorizations is both simple and fast enough. The
//! trajectory solver exploits the block-tridiagonal structure so the whole
//! episode still costs O(T d^3).

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// y += alpha * x
pub fn add_scaled(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, s);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidParameter("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    context: "Mat::from_rows",
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|r| dot(&self.data[r * self.cols..(r + 1) * self.cols], v))
            .collect()
    }

    /// A^T v
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.rows, v.len());
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            add_scaled(&mut out, v[r], row);
        }
        out
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (o, v) in out.data.iter_mut().zip(&other.data) {
            *o += v;
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Mat {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// u^T A u
    pub fn quad_form(&self, u: &[f64]) -> f64 {
        debug_assert_eq!(self.rows, self.cols);
        debug_assert_eq!(self.rows, u.len());
        let mut acc = 0.0;
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            acc += u[r] * dot(row, u);
        }
        acc
    }

    pub fn max_asymmetry(&self) -> f64 {
        debug_assert_eq!(self.rows, self.cols);
        let mut worst: f64 = 0.0;
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                worst = worst.max((self.get(r, c) - self.get(c, r)).abs());
            }
        }
        worst
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Cholesky factorization A = L L^T of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Mat,
}

impl Cholesky {
    pub fn factor(a: &Mat) -> Result<Self> {
        assert_eq!(a.rows, a.cols);
        let n = a.rows;
        let mut l = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a.get(i, j);
                for k in 0..j {
                    sum -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(Error::NotPositiveDefinite);
                    }
                    l.set(i, j, sum.sqrt());
                } else {
                    l.set(i, j, sum / l.get(j, j));
                }
            }
        }
        Ok(Cholesky { lower: l })
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lower.rows;
        debug_assert_eq!(b.len(), n);
        // forward: L y = b
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut sum = b[i];
            for k in 0..i {
                sum -= self.lower.get(i, k) * y[k];
            }
            y[i] = sum / self.lower.get(i, i);
        }
        // backward: L^T x = y
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in (i + 1)..n {
                sum -= self.lower.get(k, i) * x[k];
            }
            x[i] = sum / self.lower.get(i, i);
        }
        x
    }

    /// Solve A X = B column by column.
    pub fn solve_mat(&self, b: &Mat) -> Mat {
        let n = self.lower.rows;
        debug_assert_eq!(b.rows, n);
        let mut out = Mat::zeros(n, b.cols);
        let mut col = vec![0.0; n];
        for j in 0..b.cols {
            for i in 0..n {
                col[i] = b.get(i, j);
            }
            let x = self.solve_vec(&col);
            for i in 0..n {
                out.set(i, j, x[i]);
            }
        }
        out
    }
}

/// Eigenvalues of a symmetric matrix via cyclic Jacobi rotations, ascending.
pub fn sym_eigenvalues(a: &Mat) -> Result<Vec<f64>> {
    if a.rows != a.cols {
        return Err(Error::DimensionMismatch {
            context: "sym_eigenvalues",
            expected: a.rows,
            actual: a.cols,
        });
    }
    let n = a.rows;
    if n == 1 {
        return Ok(vec![a.get(0, 0)]);
    }
    let mut m = a.clone();
    let fro = m.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get(p, q) * m.get(p, q);
            }
        }
        if off.sqrt() <= 1e-15 * fro {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(eig)
}

/// Solve a symmetric block-tridiagonal system with a constant off-diagonal
/// block: `diag[t]` on the diagonal, `off` on the sub/super diagonals.
///
/// Block Thomas elimination; each Schur complement is factored with a dense
/// Cholesky, which stays positive definite whenever the full system is.
pub fn solve_block_tridiagonal(diag: &[Mat], off: &Mat, rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let t_len = diag.len();
    assert_eq!(rhs.len(), t_len);
    assert!(t_len >= 1);
    let d = off.rows();

    let mut factors: Vec<Cholesky> = Vec::with_capacity(t_len);
    let mut carry: Vec<Mat> = Vec::with_capacity(t_len); // X_t = S_t^{-1} off
    let mut z: Vec<Vec<f64>> = Vec::with_capacity(t_len);

    let mut s = diag[0].clone();
    for t in 0..t_len {
        if t > 0 {
            // S_t = D_t - off^T S_{t-1}^{-1} off; off is symmetric here so
            // off^T X with X = S^{-1} off works out to X^T off as well.
            let x = carry.last().unwrap();
            let correction = off.transpose().matmul(x);
            s = diag[t].clone();
            for i in 0..d {
                for j in 0..d {
                    s.set(i, j, s.get(i, j) - correction.get(i, j));
                }
            }
        }
        let chol = Cholesky::factor(&s)?;
        let zt = if t == 0 {
            rhs[0].clone()
        } else {
            let mut b = rhs[t].clone();
            let w = off.transpose().mul_vec(&factors[t - 1].solve_vec(&z[t - 1]));
            for i in 0..d {
                b[i] -= w[i];
            }
            b
        };
        carry.push(chol.solve_mat(off));
        factors.push(chol);
        z.push(zt);
    }

    let mut x = vec![vec![0.0; d]; t_len];
    x[t_len - 1] = factors[t_len - 1].solve_vec(&z[t_len - 1]);
    for t in (0..t_len.saturating_sub(1)).rev() {
        let mut b = z[t].clone();
        let w = off.mul_vec(&x[t + 1]);
        for i in 0..d {
            b[i] -= w[i];
        }
        x[t] = factors[t].solve_vec(&b);
    }
    Ok(x)
}
