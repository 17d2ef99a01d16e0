//! Dense symmetric linear algebra: Cholesky, SPD solves and inverses,
//! log-determinants, cyclic Jacobi eigendecomposition and Kronecker products.

use super::Matrix;
use crate::error::{Definiteness, Error, Result};

/// Tolerance used to decide whether an input is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

fn check_square(a: &Matrix, context: &'static str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::shape(
            context,
            "square matrix",
            format!("{}x{}", a.rows(), a.cols()),
        ));
    }
    Ok(())
}

fn check_symmetric(a: &Matrix, context: &'static str) -> Result<()> {
    check_square(a, context)?;
    let scale = a.max_abs().max(1.0);
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
///
/// Only the lower triangle of `a` is read. A pivot within rounding of zero
/// is reported as [`Definiteness::Singular`], a clearly negative one as
/// [`Definiteness::Indefinite`].
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    check_square(a, "cholesky")?;
    let n = a.rows();
    let max_diag = a.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = 16.0 * (n.max(1) as f64) * f64::EPSILON * max_diag.max(f64::MIN_POSITIVE);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !d.is_finite() {
            return Err(Error::NonFinite {
                context: format!("cholesky pivot {j}"),
            });
        }
        if d <= tol {
            let kind = if d.abs() <= tol {
                Definiteness::Singular
            } else {
                Definiteness::Indefinite
            };
            return Err(Error::NotPositiveDefinite {
                kind,
                pivot: j,
                value: d,
            });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`, column by column of `b`.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    assert_eq!(b.rows(), n, "solve_lower shape mismatch");
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    assert_eq!(b.rows(), n, "solve_lower_transpose shape mismatch");
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solves `A X = B` for symmetric positive definite `A`.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let l = cholesky(a)?;
    Ok(solve_lower_transpose(&l, &solve_lower(&l, b)))
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn inverse_spd(a: &Matrix) -> Result<Matrix> {
    let inv = solve_spd(a, &Matrix::identity(a.rows()))?;
    Ok(inv.symmetrize())
}

/// Inverse of a lower-triangular matrix.
pub fn inverse_lower(l: &Matrix) -> Matrix {
    solve_lower(l, &Matrix::identity(l.rows()))
}

/// `log det A` for symmetric positive definite `A`, via Cholesky.
pub fn logdet_spd(a: &Matrix) -> Result<f64> {
    check_symmetric(a, "logdet_spd")?;
    let l = cholesky(a)?;
    Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Orthogonal matrix whose columns are the matching eigenvectors.
    pub vectors: Matrix,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order with `A = V diag(λ) Vᵀ`.
pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    check_symmetric(a, "sym_eig")?;
    if !a.is_finite() {
        return Err(Error::NonFinite {
            context: "sym_eig input".into(),
        });
    }
    let n = a.rows();
    let mut m = a.symmetrize();
    let mut v = Matrix::identity(n);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        let total: f64 = m.as_slice().iter().map(|x| x * x).sum();
        if off <= f64::EPSILON * f64::EPSILON * total * 1e-2 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag = m.diagonal();
    order.sort_by(|&i, &j| diag[i].total_cmp(&diag[j]));
    let values = order.iter().map(|&i| diag[i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig { values, vectors })
}

impl SymEig {
    /// `V diag(f(λ)) Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let scaled = Matrix::from_fn(n, n, |i, j| self.vectors[(i, j)] * f(self.values[j]));
        scaled.matmul_nt(&self.vectors)
    }
}

/// Kronecker product `A ⊗ B`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = Matrix::zeros(ra * rb, ca * cb);
    for i in 0..ra {
        for j in 0..ca {
            let aij = a[(i, j)];
            for k in 0..rb {
                for l in 0..cb {
                    out[(i * rb + k, j * cb + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Places square blocks along the diagonal of a larger zero matrix.
pub fn block_diag(blocks: &[Matrix]) -> Matrix {
    let n: usize = blocks.iter().map(Matrix::rows).sum();
    let mut out = Matrix::zeros(n, n);
    let mut offset = 0;
    for b in blocks {
        for i in 0..b.rows() {
            for j in 0..b.cols() {
                out[(offset + i, offset + j)] = b[(i, j)];
            }
        }
        offset += b.rows();
    }
    out
}
