//! Small dense square matrices and Cholesky solves.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Base jitter added to rank-deficient covariances, intensity² units.
pub const JITTER_BASE: f64 = 1e-6;
/// Largest jitter tried before giving up on a factorization.
pub const JITTER_MAX: f64 = 1e-2;

/// Dense `n×n` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    n: usize,
    data: Vec<F>,
}

impl<F: Real> Matrix<F> {
    pub fn zeros(n: usize) -> Self {
        Matrix {
            n,
            data: vec![F::zero(); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = F::one();
        }
        m
    }

    pub fn from_row_major(n: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "{n}x{n} matrix needs {} values, got {}",
                n * n,
                data.len()
            )));
        }
        Ok(Matrix { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn add_diagonal(&mut self, v: F) {
        for i in 0..self.n {
            self[(i, i)] += v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mul_vec(&self, v: &[F]) -> Vec<F> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// `L·Lᵀ`, reading only the lower triangle of `self`.
    pub fn lower_gram(&self) -> Matrix<F> {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = F::zero();
                for p in 0..=j {
                    s += self[(i, p)] * self[(j, p)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix<F> {
        let mut out = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix<F>) -> Matrix<F> {
        let n = self.n;
        let mut out = Self::zeros(n);
        crate::scalar::gemm(
            n,
            n,
            n,
            &self.data,
            false,
            &other.data,
            false,
            &mut out.data,
            false,
        );
        out
    }
}

impl<F> std::ops::Index<(usize, usize)> for Matrix<F> {
    type Output = F;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &F {
        &self.data[i * self.n + j]
    }
}

impl<F> std::ops::IndexMut<(usize, usize)> for Matrix<F> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut F {
        &mut self.data[i * self.n + j]
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky<F: Real>(a: &Matrix<F>) -> Result<Matrix<F>> {
    let n = a.dim();
    let mut l = Matrix::zeros(n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for p in 0..j {
            diag -= l[(j, p)] * l[(j, p)];
        }
        if !(diag > F::zero()) || !diag.is_finite() {
            return Err(Error::Factorization(format!(
                "pivot {j} is {diag} (matrix not positive definite)"
            )));
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for p in 0..j {
                s -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Factorizes `a + ε·I`, starting at `first` and escalating ×10 up to [`JITTER_MAX`].
///
/// With `first == 0` the unmodified matrix is tried before [`JITTER_BASE`].
/// Returns the factor and the jitter that made it succeed.
pub fn cholesky_with_jitter<F: Real>(a: &Matrix<F>, first: f64) -> Result<(Matrix<F>, F)> {
    let mut eps = first;
    loop {
        let mut m = a.clone();
        if eps > 0.0 {
            m.add_diagonal(F::lit(eps));
        }
        match cholesky(&m) {
            Ok(l) => return Ok((l, F::lit(eps))),
            Err(e) => {
                eps = if eps == 0.0 { JITTER_BASE } else { eps * 10.0 };
                if eps > JITTER_MAX * (1.0 + 1e-9) {
                    return Err(Error::Factorization(format!(
                        "still failing with jitter {JITTER_MAX}: {e}"
                    )));
                }
            }
        }
    }
}

/// Solves `L·x = b` for lower-triangular `L`.
pub fn solve_lower<F: Real>(l: &Matrix<F>, b: &[F]) -> Vec<F> {
    let n = l.dim();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for p in 0..i {
            s -= l[(i, p)] * x[p];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `Lᵀ·x = b` for lower-triangular `L`.
pub fn solve_lower_transpose<F: Real>(l: &Matrix<F>, b: &[F]) -> Vec<F> {
    let n = l.dim();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for p in i + 1..n {
            s -= l[(p, i)] * x[p];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `(L·Lᵀ)·x = b`.
pub fn cholesky_solve<F: Real>(l: &Matrix<F>, b: &[F]) -> Vec<F> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// `log|L·Lᵀ| = 2·Σ log L_ii`.
pub fn log_det_from_factor<F: Real>(l: &Matrix<F>) -> F {
    let two = F::lit(2.0);
    (0..l.dim()).map(|i| l[(i, i)].ln()).sum::<F>() * two
}
