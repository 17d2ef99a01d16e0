//! Closed-form oracle for early stopping in linear least squares.
//!
//! `k` steps of (optionally preconditioned) gradient descent on
//! `‖y − Xφ‖²` started at `θ` land exactly on the minimizer of
//! `‖y − Xφ‖² + (θ − φ)ᵀ Q⁻¹ (θ − φ)`, i.e. the MAP estimate under a
//! Gaussian prior `N(θ, Q)`. This module computes both sides.
//!
//! With effective preconditioner `P = L Lᵀ` (`α·I` for plain gradient
//! descent) and `LᵀHL = V diag(μ) Vᵀ`, the prior covariance is
//!
//! ```text
//! Q = O diag(g(μᵢ)) Oᵀ,   O = L V,   g(μ) = ((1 − μ)^(−k) − 1) / μ
//! ```
//!
//! with `g(0) = k` on directions the data does not constrain. The same
//! construction covers the quadratic model `½(φ − φ*)ᵀH(φ − φ*)`.

use log::warn;

use crate::error::{Error, Result};
use crate::numcore::{cholesky, linalg, sym_eig, Matrix};

/// Eigenvalues of the preconditioned curvature below this are treated as
/// unconstrained directions.
const FLAT_DIRECTION_TOL: f64 = 1e-12;

/// A linear regression instance and the gradient-descent schedule run on it.
#[derive(Debug, Clone)]
pub struct QuadProblem {
    /// Design matrix, `n × d`.
    pub x: Matrix,
    /// Targets, length `n`.
    pub y: Vec<f64>,
    /// Initialization `φ(0) = θ`, length `d`.
    pub theta0: Vec<f64>,
    pub alpha: f64,
    pub k: usize,
    /// Optional SPD preconditioner (`d × d`). The update becomes
    /// `φ ← φ − α·P·Xᵀ(Xφ − y)`.
    pub precond: Option<Matrix>,
}

/// Gaussian prior `N(mean, Q)` induced by early stopping.
#[derive(Debug, Clone)]
pub struct InducedPrior {
    pub mean: Vec<f64>,
    /// Covariance `Q`.
    pub q: Matrix,
    /// `Q⁻¹`, assembled from the eigen-factorization when available so it
    /// stays accurate when `Q` is badly conditioned.
    pub precision: Matrix,
}

impl InducedPrior {
    /// Builds a prior from an explicit covariance.
    pub fn new(mean: Vec<f64>, q: Matrix) -> Result<Self> {
        if q.rows() != mean.len() || !q.is_square() {
            return Err(Error::shape(
                "InducedPrior::new",
                format!("{0}x{0} covariance", mean.len()),
                format!("{}x{}", q.rows(), q.cols()),
            ));
        }
        let precision = linalg::inverse_spd(&q)?;
        Ok(Self { mean, q, precision })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

impl QuadProblem {
    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Checks shapes and parameter ranges, and warns when the iteration
    /// does not contract.
    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.x.shape();
        if self.y.len() != n {
            return Err(Error::shape("QuadProblem.y", n, self.y.len()));
        }
        if self.theta0.len() != d {
            return Err(Error::shape("QuadProblem.theta0", d, self.theta0.len()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step size must be positive, got {}",
                self.alpha
            )));
        }
        if let Some(p) = &self.precond {
            if p.shape() != (d, d) {
                return Err(Error::shape(
                    "QuadProblem.precond",
                    format!("{d}x{d}"),
                    format!("{}x{}", p.rows(), p.cols()),
                ));
            }
            linalg::logdet_spd(p)?;
        }
        let radius = self.contraction_radius()?;
        if radius >= 1.0 {
            warn!("gradient descent does not contract: spectral radius {radius:.4} >= 1");
        }
        Ok(())
    }

    /// `α·P`, or `α·I` without a preconditioner.
    pub fn effective_precond(&self) -> Matrix {
        match &self.precond {
            Some(p) => p.scale(self.alpha),
            None => Matrix::identity(self.dim()).scale(self.alpha),
        }
    }

    pub fn hessian(&self) -> Matrix {
        self.x.matmul_tn(&self.x)
    }

    /// Spectral radius of `I − αPH`.
    pub fn contraction_radius(&self) -> Result<f64> {
        let mu = preconditioned_spectrum(&self.hessian(), &self.effective_precond())?.0;
        Ok(mu.iter().map(|m| (1.0 - m).abs()).fold(0.0, f64::max))
    }
}

/// Runs `k` gradient-descent steps on `‖y − Xφ‖²` from `theta0`.
pub fn gd_iterate(p: &QuadProblem) -> Result<Vec<f64>> {
    p.validate()?;
    let step = p.effective_precond();
    let mut phi = p.theta0.clone();
    for _ in 0..p.k {
        let resid: Vec<f64> = p.x.matvec(&phi).iter().zip(&p.y).map(|(f, y)| f - y).collect();
        let grad = p.x.transpose().matvec(&resid);
        let delta = step.matvec(&grad);
        for (v, d) in phi.iter_mut().zip(&delta) {
            *v -= d;
        }
    }
    Ok(phi)
}

/// `g(μ) = ((1 − μ)^(−k) − 1) / μ`, the prior variance along one
/// generalized eigendirection.
fn direction_variance(mu: f64, k: usize) -> Result<f64> {
    let kf = k as f64;
    if mu.abs() < FLAT_DIRECTION_TOL {
        return Ok(kf);
    }
    let g = if mu < 1.0 {
        (-kf * (-mu).ln_1p()).exp_m1() / mu
    } else {
        let base = 1.0 - mu;
        if base == 0.0 {
            return Err(Error::InvalidArgument(
                "preconditioned step solves a direction exactly; induced prior is flat".into(),
            ));
        }
        (base.powi(-(k as i32)) - 1.0) / mu
    };
    if !(g > 0.0 && g.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "induced prior is not positive definite along a direction with step eigenvalue {mu:.4} (k = {k})"
        )));
    }
    Ok(g)
}

/// Generalized spectrum of `(H, P⁻¹)`: returns `μ` and `O = L V` with
/// `Oᵀ H O = diag(μ)` and `Oᵀ P⁻¹ O = I`, plus `L`.
fn preconditioned_spectrum(h: &Matrix, precond: &Matrix) -> Result<(Vec<f64>, Matrix, Matrix)> {
    let l = cholesky(precond)?;
    let s = l.matmul_tn(&h.matmul(&l)).symmetrize();
    let eig = sym_eig(&s)?;
    let o = l.matmul(&eig.vectors);
    Ok((eig.values, o, l))
}

/// Early-stopping prior for `k` steps of `φ ← φ − P·H(φ − φ*)`.
fn early_stopping_prior(h: &Matrix, precond: &Matrix, k: usize, mean: Vec<f64>) -> Result<InducedPrior> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "zero descent steps induce a point-mass prior (Q = 0)".into(),
        ));
    }
    let d = h.rows();
    let (mu, o, l) = preconditioned_spectrum(h, precond)?;
    let g = mu
        .iter()
        .map(|&m| direction_variance(m, k))
        .collect::<Result<Vec<_>>>()?;

    let q = Matrix::from_fn(d, d, |i, j| o[(i, j)] * g[j])
        .matmul_nt(&o)
        .symmetrize();
    // Q⁻¹ = L⁻ᵀ V diag(1/g) Vᵀ L⁻¹ = W diag(1/g) Wᵀ with W = L⁻ᵀ V.
    let v = linalg::solve_lower(&l, &o); // L⁻¹ L V = V
    let w = linalg::solve_lower_transpose(&l, &v);
    let precision = Matrix::from_fn(d, d, |i, j| w[(i, j)] / g[j])
        .matmul_nt(&w)
        .symmetrize();

    // Q = O diag(g) Oᵀ with O invertible and every g > 0, so Q is SPD.
    Ok(InducedPrior { mean, q, precision })
}

/// The Gaussian prior under which `gd_iterate(p)` is the MAP estimate.
pub fn induced_q(p: &QuadProblem) -> Result<InducedPrior> {
    p.validate()?;
    early_stopping_prior(&p.hessian(), &p.effective_precond(), p.k, p.theta0.clone())
}

/// Posterior mode `(XᵀX + Q⁻¹)⁻¹ (Xᵀy + Q⁻¹·mean)` of the linear-Gaussian
/// model with unit noise and prior `N(mean, Q)`.
pub fn map_estimate(x: &Matrix, y: &[f64], prior: &InducedPrior) -> Result<Vec<f64>> {
    let d = x.cols();
    if prior.dim() != d || y.len() != x.rows() {
        return Err(Error::shape(
            "map_estimate",
            format!("{}x{d} design with {d}-dim prior", y.len()),
            format!("{}x{} design with {}-dim prior", x.rows(), d, prior.dim()),
        ));
    }
    let lhs = x.matmul_tn(x).add(&prior.precision);
    let xty = x.transpose().matvec(y);
    let pm = prior.precision.matvec(&prior.mean);
    let rhs: Vec<f64> = xty.iter().zip(&pm).map(|(a, b)| a + b).collect();
    Ok(linalg::solve_spd(&lhs, &Matrix::column(&rhs))?.into_vec())
}

/// `k` steps of `φ ← φ − P·H(φ − φ*)` on the quadratic `½(φ − φ*)ᵀH(φ − φ*)`.
pub fn quad_gd_iterate(h: &Matrix, phi_star: &[f64], theta0: &[f64], precond: &Matrix, k: usize) -> Result<Vec<f64>> {
    let d = phi_star.len();
    if h.shape() != (d, d) || precond.shape() != (d, d) || theta0.len() != d {
        return Err(Error::shape(
            "quad_gd_iterate",
            format!("{d}x{d} curvature and preconditioner"),
            format!("{:?} and {:?}", h.shape(), precond.shape()),
        ));
    }
    linalg::logdet_spd(h)?;
    linalg::logdet_spd(precond)?;
    let mut phi = theta0.to_vec();
    for _ in 0..k {
        let diff: Vec<f64> = phi.iter().zip(phi_star).map(|(a, b)| a - b).collect();
        let delta = precond.matvec(&h.matvec(&diff));
        for (v, dl) in phi.iter_mut().zip(&delta) {
            *v -= dl;
        }
    }
    Ok(phi)
}

/// Prior induced by [`quad_gd_iterate`] with the given preconditioner.
pub fn quad_induced_q(h: &Matrix, precond: &Matrix, k: usize, theta0: &[f64]) -> Result<InducedPrior> {
    early_stopping_prior(h, precond, k, theta0.to_vec())
}

/// Minimizer of `(φ − φ*)ᵀH(φ − φ*) + (θ − φ)ᵀQ⁻¹(θ − φ)`.
pub fn quad_map_estimate(h: &Matrix, phi_star: &[f64], prior: &InducedPrior) -> Result<Vec<f64>> {
    let lhs = h.add(&prior.precision);
    let a = h.matvec(phi_star);
    let b = prior.precision.matvec(&prior.mean);
    let rhs: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a + b).collect();
    Ok(linalg::solve_spd(&lhs, &Matrix::column(&rhs))?.into_vec())
}

/// `‖a − b‖₂ / ‖b‖₂`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn max_abs_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
