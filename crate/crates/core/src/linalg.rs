//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// First diagonal jitter tried when a factorization fails.
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter before giving up.
pub const JITTER_MAX: f64 = 1e-6;

/// Cholesky factorization with escalating diagonal jitter
/// (`0`, then `1e-10`, `1e-9`, ..., `1e-6`). Returns the factor and the
/// jitter that was needed.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Numeric(format!(
        "Cholesky factorization failed after jitter {JITTER_MAX:e}"
    )))
}

/// Log-determinant from a Cholesky factor.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Eigen-decomposition of the row Gram matrix `X Xᵀ` (N×N), eigenvalues
/// sorted nonincreasing and clamped at zero.
#[derive(Debug, Clone)]
pub struct GramEigen {
    pub values: DVector<f64>,
    /// Columns are the eigenvectors, in the same order as `values`.
    pub vectors: DMatrix<f64>,
}

impl GramEigen {
    pub fn of_rows(x: &DMatrix<f64>) -> Self {
        let gram = x * x.transpose();
        Self::of_symmetric(gram)
    }

    pub fn of_symmetric(m: DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(m);
        let n = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i].max(0.0)));
        let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
        GramEigen { values, vectors }
    }

    /// Coordinates of `v` in the eigenbasis, `Uᵀ v`.
    pub fn rotate(&self, v: &DVector<f64>) -> DVector<f64> {
        self.vectors.tr_mul(v)
    }

    /// `U diag(f(d)) Uᵀ v`.
    pub fn apply_fn(&self, v: &DVector<f64>, f: impl Fn(f64) -> f64) -> DVector<f64> {
        let mut z = self.rotate(v);
        for (zi, d) in z.iter_mut().zip(self.values.iter()) {
            *zi *= f(*d);
        }
        &self.vectors * z
    }
}

pub fn normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Draw from `Normal(0, L Lᵀ)` given the lower factor `L`.
pub fn mvn_from_factor<R: Rng + ?Sized>(l: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    l * normal_vector(l.ncols(), rng)
}

/// Relative asymmetry `max|S - Sᵀ| / max|S|`.
pub fn asymmetry(s: &DMatrix<f64>) -> f64 {
    let scale = s.amax().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for i in 0..s.nrows() {
        for j in (i + 1)..s.ncols() {
            worst = worst.max((s[(i, j)] - s[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Append columns side by side; all blocks must share the row count.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks[0].nrows();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c0 = 0;
    for b in blocks {
        out.view_mut((0, c0), (rows, b.ncols())).copy_from(b);
        c0 += b.ncols();
    }
    out
}
