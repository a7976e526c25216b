//! Shared dense linear-algebra primitives with uniform jitter semantics.
//!
//! Every module that factorizes a covariance goes through [`cholesky`] so
//! that near-singular matrices degrade identically everywhere: jitter starts
//! at `1e-10 * mean(diag)`, escalates by a factor of 10, and is capped at
//! `1e-2 * mean(diag)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Escalating diagonal-loading policy used when a Cholesky factorization fails.
#[derive(Debug, Clone, Copy)]
pub struct JitterPolicy {
    /// First jitter attempt, relative to the mean diagonal.
    pub initial_rel: f64,
    /// Multiplier between attempts.
    pub factor: f64,
    /// Largest allowed jitter, relative to the mean diagonal.
    pub max_rel: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            initial_rel: 1e-10,
            factor: 10.0,
            max_rel: 1e-2,
        }
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
    dim: usize,
    /// Absolute diagonal loading that was required to factorize the input.
    pub applied_jitter: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Solve `A x = b` for the factorized `A`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        self.lower.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// Solve `A X = B` column-wise for the factorized `A`.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        self.lower.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// Quadratic form `b' A^{-1} b`.
    pub fn inv_quad(&self, b: &DVector<f64>) -> f64 {
        let mut half = b.clone();
        self.lower.solve_lower_triangular_mut(&mut half);
        half.norm_squared()
    }

    /// `L y` for the stored lower factor, so `Cov(L xi) = A` for unit-variance `xi`.
    pub fn apply_lower(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.lower * xi
    }
}

fn symmetry_defect(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

fn require_square_symmetric(a: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: a.ncols(),
            context,
        });
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if symmetry_defect(a) > 1e-10 * scale {
        return Err(Error::InvalidArgument(format!(
            "{context}: matrix is not symmetric within tolerance"
        )));
    }
    Ok(())
}

/// Cholesky factorization with escalating jitter.
///
/// `policy = None` disables loading entirely: the factorization either
/// succeeds on the raw matrix or fails with [`Error::Singular`].
pub fn cholesky(a: &DMatrix<f64>, policy: Option<JitterPolicy>) -> Result<CholeskyFactor> {
    require_square_symmetric(a, "cholesky")?;
    let n = a.nrows();
    if let Some(f) = a.clone().cholesky() {
        return Ok(CholeskyFactor {
            lower: f.unpack(),
            dim: n,
            applied_jitter: 0.0,
        });
    }
    let policy = match policy {
        Some(p) => p,
        None => {
            return Err(Error::Singular(
                "cholesky failed and jitter is disabled".to_string(),
            ))
        }
    };
    let mean_diag = a.diagonal().iter().sum::<f64>() / n as f64;
    let mut rel = policy.initial_rel;
    while rel <= policy.max_rel {
        let jitter = rel * mean_diag;
        let mut loaded = a.clone();
        for i in 0..n {
            loaded[(i, i)] += jitter;
        }
        if let Some(f) = loaded.cholesky() {
            log::debug!("cholesky required jitter {jitter:.3e} (dim {n})");
            return Ok(CholeskyFactor {
                lower: f.unpack(),
                dim: n,
                applied_jitter: jitter,
            });
        }
        rel *= policy.factor;
    }
    Err(Error::Singular(format!(
        "cholesky failed after jitter escalation to {:.3e} * mean diagonal",
        policy.max_rel
    )))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eig(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    require_square_symmetric(a, "sym_eig")?;
    let mut vals: Vec<f64> = a
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    vals.sort_by(|x, y| x.partial_cmp(y).expect("non-finite eigenvalue"));
    Ok(DVector::from_vec(vals))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig(a: &DMatrix<f64>) -> Result<f64> {
    Ok(sym_eig(a)?[0])
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eig(a: &DMatrix<f64>) -> Result<f64> {
    let e = sym_eig(a)?;
    Ok(e[e.len() - 1])
}

/// Symmetric square root `S` of an SPD matrix, `S S = A`.
///
/// Eigenvalues in `[-1e-10 * scale, 0)` are clamped to zero; anything more
/// negative is an error.
pub fn sym_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_square_symmetric(a, "sym_sqrt")?;
    let eig = a.clone().symmetric_eigen();
    let scale = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -1e-10 * scale {
            return Err(Error::Singular(format!(
                "sym_sqrt: eigenvalue {v:.3e} below tolerance"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Kronecker product `A (x) B`. Test-scale only; nothing in the pipeline
/// forms the full product.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}
