//! Symmetric banded linear solves for the graph-structured normal equations.
//!
//! Both optimization stages produce SPD systems whose coupling follows frame
//! adjacency: rotation averaging couples frames at most `W` apart plus one
//! dense border column for the dummy anchor node, and the reduced camera
//! system of bundle adjustment couples frames sharing a star track. Storing
//! the band (plus an optional dense border) keeps the factorization at
//! `O(n·b²)` instead of `O(n³)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix not positive definite at pivot {index} (value {value:.3e})")]
    NotPositiveDefinite { index: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Symmetric banded matrix stored by diagonals: `band[d][i] = A[i, i+d]`
/// for `0 <= d <= half_bandwidth`.
#[derive(Debug, Clone)]
pub struct BandedSymmetric {
    n: usize,
    half_bandwidth: usize,
    band: Vec<Vec<f64>>,
}

impl BandedSymmetric {
    pub fn zeros(n: usize, half_bandwidth: usize) -> Self {
        let hb = half_bandwidth.min(n.saturating_sub(1));
        Self {
            n,
            half_bandwidth: hb,
            band: (0..=hb).map(|d| vec![0.0; n - d]).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half_bandwidth(&self) -> usize {
        self.half_bandwidth
    }

    /// Add `value` at `(i, j)`; symmetric counterpart is implicit.
    /// Panics if `|i - j|` exceeds the bandwidth.
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        let d = hi - lo;
        assert!(
            d <= self.half_bandwidth,
            "entry ({i},{j}) outside half-bandwidth {}",
            self.half_bandwidth
        );
        self.band[d][lo] += value;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        let d = hi - lo;
        if d > self.half_bandwidth {
            0.0
        } else {
            self.band[d][lo]
        }
    }

    pub fn add_diagonal(&mut self, value: f64) {
        for v in self.band[0].iter_mut() {
            *v += value;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for d in 0..=self.half_bandwidth {
            for i in 0..self.n - d {
                m[(i, i + d)] = self.band[d][i];
                m[(i + d, i)] = self.band[d][i];
            }
        }
        m
    }

    /// In-place banded Cholesky `A = L·Lᵀ`; the band is overwritten with `L`
    /// (diagonal `band[0]`, subdiagonals `band[d][i] = L[i+d, i]`).
    pub fn cholesky(mut self) -> Result<BandedCholesky, LinalgError> {
        let n = self.n;
        let hb = self.half_bandwidth;
        for j in 0..n {
            let mut diag = self.band[0][j];
            let start = j.saturating_sub(hb);
            for k in start..j {
                let l_jk = self.band[j - k][k];
                diag -= l_jk * l_jk;
            }
            if diag <= 0.0 || !diag.is_finite() {
                return Err(LinalgError::NotPositiveDefinite {
                    index: j,
                    value: diag,
                });
            }
            let l_jj = diag.sqrt();
            self.band[0][j] = l_jj;
            let end = (j + hb).min(n - 1);
            for i in j + 1..=end {
                let mut v = self.band[i - j][j];
                let start_k = i.saturating_sub(hb).max(j.saturating_sub(hb));
                for k in start_k..j {
                    if i - k <= hb {
                        v -= self.band[i - k][k] * self.band[j - k][k];
                    }
                }
                self.band[i - j][j] = v / l_jj;
            }
        }
        Ok(BandedCholesky {
            n,
            half_bandwidth: hb,
            band: self.band,
        })
    }
}

/// Cholesky factor of a [`BandedSymmetric`].
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    half_bandwidth: usize,
    band: Vec<Vec<f64>>,
}

impl BandedCholesky {
    /// Solve `L·y = b` in place.
    pub fn solve_lower(&self, b: &mut DVector<f64>) {
        let hb = self.half_bandwidth;
        for i in 0..self.n {
            let start = i.saturating_sub(hb);
            let mut v = b[i];
            for k in start..i {
                v -= self.band[i - k][k] * b[k];
            }
            b[i] = v / self.band[0][i];
        }
    }

    /// Solve `Lᵀ·x = y` in place.
    pub fn solve_upper(&self, b: &mut DVector<f64>) {
        let hb = self.half_bandwidth;
        for i in (0..self.n).rev() {
            let end = (i + hb).min(self.n - 1);
            let mut v = b[i];
            for k in i + 1..=end {
                v -= self.band[k - i][i] * b[k];
            }
            b[i] = v / self.band[0][i];
        }
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut x = rhs.clone();
        self.solve_lower(&mut x);
        self.solve_upper(&mut x);
        x
    }
}

/// SPD system with a banded leading block and a small dense border:
///
/// ```text
/// [ B   C ] [x]   [b1]
/// [ Cᵀ  D ] [y] = [b2]
/// ```
///
/// Factor `B = LLᵀ` banded, eliminate the border through the Schur
/// complement `S = D − Cᵀ B⁻¹ C`, back-substitute.
pub fn solve_bordered_banded(
    banded: BandedSymmetric,
    border: &DMatrix<f64>,
    corner: &DMatrix<f64>,
    rhs: &DVector<f64>,
) -> Result<DVector<f64>, LinalgError> {
    let n = banded.n();
    let m = corner.nrows();
    if border.nrows() != n || border.ncols() != m || corner.ncols() != m {
        return Err(LinalgError::Dimension(format!(
            "border {}x{}, corner {}x{}, banded n={}",
            border.nrows(),
            border.ncols(),
            corner.nrows(),
            corner.ncols(),
            n
        )));
    }
    if rhs.len() != n + m {
        return Err(LinalgError::Dimension(format!(
            "rhs has {} entries, expected {}",
            rhs.len(),
            n + m
        )));
    }
    let chol = banded.cholesky()?;

    // E = L^-1 C, column by column.
    let mut e = DMatrix::zeros(n, m);
    for c in 0..m {
        let mut col = DVector::from_iterator(n, border.column(c).iter().copied());
        chol.solve_lower(&mut col);
        e.set_column(c, &col);
    }
    let mut f = DVector::from_iterator(n, rhs.rows(0, n).iter().copied());
    chol.solve_lower(&mut f);

    let s = corner - e.transpose() * &e;
    let rhs2 = DVector::from_iterator(m, rhs.rows(n, m).iter().copied()) - e.transpose() * &f;
    let s_chol = s
        .cholesky()
        .ok_or(LinalgError::NotPositiveDefinite { index: n, value: 0.0 })?;
    let y = s_chol.solve(&rhs2);

    // x = L^-T (f - E y)
    let mut x = f - &e * &y;
    chol.solve_upper(&mut x);

    let mut out = DVector::zeros(n + m);
    out.rows_mut(0, n).copy_from(&x);
    out.rows_mut(n, m).copy_from(&y);
    Ok(out)
}
