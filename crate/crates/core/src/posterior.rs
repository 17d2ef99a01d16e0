//! Predictive curves from Gaussian draws around the adapted parameters.
//!
//! The sampling precision is the curvature of the summed support NLL plus a
//! diagonal prior precision, `N·F̄ + τ_p I`. By default `τ_p = 1/(K·α)`, the
//! flat-direction precision of the early-stopping prior.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::adapt::{adapt_values, InnerLoopCfg};
use crate::curvature::{self, dense_sample, kfac_sample, DenseCurvature, KfacState};
use crate::error::{Error, Result};
use crate::laplace::{CurvatureMode, LaplaceCfg};
use crate::metatrain::MetaParams;
use crate::model::{self, MlpSpec, ParamVector, Targets};
use crate::numcore::Matrix;
use crate::tasks::{Task, TaskMeta};

/// `sample_id` of the point-estimate curve.
pub const POINT_ID: i64 = -1;
/// `sample_id` of the noiseless ground-truth curve.
pub const TRUTH_ID: i64 = -2;
/// `sample_id` of the support points.
pub const SUPPORT_ID: i64 = -3;

/// Source of the diagonal prior precision in the sampling covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PosteriorPrior {
    /// `1/(K·α)`: what `K` steps of size `α` leave unconstrained.
    #[default]
    EarlyStopping,
    /// The Laplace `τ`.
    Tau,
}

impl PosteriorPrior {
    pub fn precision(self, cfg: &LaplaceCfg) -> f64 {
        match self {
            PosteriorPrior::EarlyStopping => early_stopping_precision(&cfg.inner),
            PosteriorPrior::Tau => cfg.tau,
        }
    }
}

/// Inverse of the early-stopping prior variance `K·α` along directions the
/// support does not constrain.
pub fn early_stopping_precision(inner: &InnerLoopCfg) -> f64 {
    1.0 / (inner.steps as f64 * inner.alpha)
}

impl FromStr for PosteriorPrior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early_stopping" => Ok(PosteriorPrior::EarlyStopping),
            "tau" => Ok(PosteriorPrior::Tau),
            _ => Err(Error::InvalidArgument(format!(
                "unknown posterior prior '{s}' (expected early_stopping or tau)"
            ))),
        }
    }
}

impl fmt::Display for PosteriorPrior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosteriorPrior::EarlyStopping => "early_stopping",
            PosteriorPrior::Tau => "tau",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub task_id: u64,
    pub grid: Vec<f64>,
    /// Prediction of `φ̂` on the grid.
    pub point: Vec<f64>,
    /// One prediction curve per draw.
    pub curves: Vec<Vec<f64>>,
    /// Ground truth on the grid, when the task law is known.
    pub truth: Option<Vec<f64>>,
    /// Support `(x, y)` pairs.
    pub support: Vec<(f64, f64)>,
    /// The parameter draws, when retained.
    pub phi_samples: Option<Vec<ParamVector>>,
}

impl PosteriorDraws {
    pub fn n_samples(&self) -> usize {
        self.curves.len()
    }

    /// Across-sample standard deviation at each grid point.
    pub fn predictive_std(&self) -> Vec<f64> {
        let n = self.curves.len() as f64;
        (0..self.grid.len())
            .map(|i| {
                let mean = self.curves.iter().map(|c| c[i]).sum::<f64>() / n;
                let var = self.curves.iter().map(|c| (c[i] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                var.sqrt()
            })
            .collect()
    }

    /// Mean of [`PosteriorDraws::predictive_std`] over grid points in `[lo, hi]`.
    pub fn mean_std_over(&self, lo: f64, hi: f64) -> f64 {
        let std = self.predictive_std();
        let picked: Vec<f64> = self
            .grid
            .iter()
            .zip(&std)
            .filter(|(x, _)| (lo..=hi).contains(*x))
            .map(|(_, s)| *s)
            .collect();
        picked.iter().sum::<f64>() / picked.len() as f64
    }
}

/// K-FAC posterior precision `N·(A ⊗ G) + τ_p` with `√τ_p` on each factor.
pub fn kfac_posterior(state: &KfacState, prior_precision: f64) -> Result<KfacState> {
    let n = state.sample_count as f64;
    let factors = state.factors.iter().map(|(a, g)| (a.scale(n), g.clone())).collect();
    KfacState::new(factors, prior_precision.sqrt(), state.sample_count)
}

/// Dense posterior precision `N·F̄ + τ_p I` on the support set.
pub fn dense_posterior(
    spec: &MlpSpec,
    phi_hat: &ParamVector,
    support: &crate::model::Examples,
    prior_precision: f64,
) -> Result<DenseCurvature> {
    let n = support.len() as f64;
    let mean = curvature::dense_ggn(spec, phi_hat, support, prior_precision / n)?;
    Ok(DenseCurvature { h: mean.h.scale(n) })
}

/// Adapts to `task`, builds the posterior precision `Ĥ` of the support set
/// under `prior` and maps `n_samples` draws from `N(φ̂, scale² · Ĥ⁻¹)` to
/// curves on `grid`.
#[allow(clippy::too_many_arguments)]
pub fn sample_predictive(
    spec: &MlpSpec,
    params: &MetaParams,
    task: &Task,
    cfg: &LaplaceCfg,
    prior: PosteriorPrior,
    grid: &[f64],
    n_samples: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
    task_id: u64,
    keep_samples: bool,
) -> Result<PosteriorDraws> {
    if n_samples == 0 || grid.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one sample and one grid point".into(),
        ));
    }
    if spec.input_dim() != 1 || spec.output_dim() != 1 {
        return Err(Error::InvalidArgument(
            "predictive curves need a scalar-input, scalar-output model".into(),
        ));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "scale must be non-negative, got {scale}"
        )));
    }
    let wrap = |e: Error| Error::Task {
        task_seed: task_id,
        source: Box::new(e),
    };
    let (phi_hat, _) =
        adapt_values(spec, &params.theta, task, &cfg.inner, params.log_precond.as_ref()).map_err(wrap)?;
    let tau_p = prior.precision(cfg);
    let x = Matrix::column(grid);
    let curve = |p: &ParamVector| -> Result<Vec<f64>> { Ok(model::predict(spec, p, &x)?.into_vec()) };
    let draw: Box<dyn FnMut(&mut ChaCha8Rng) -> Result<ParamVector>> = match cfg.curvature {
        CurvatureMode::Kfac => {
            let state = curvature::kfac_estimate(spec, &phi_hat, &task.support, tau_p.sqrt(), &cfg.fisher_cfg(task_id))
                .and_then(|s| kfac_posterior(&s, tau_p))
                .map_err(wrap)?;
            let mean = phi_hat.clone();
            Box::new(move |r| kfac_sample(&state, &mean, scale, r))
        }
        CurvatureMode::Dense => {
            let curv = dense_posterior(spec, &phi_hat, &task.support, tau_p).map_err(wrap)?;
            let mean = phi_hat.clone();
            Box::new(move |r| dense_sample(&curv, &mean, scale, r))
        }
    };
    let mut draw = draw;
    let mut curves = Vec::with_capacity(n_samples);
    let mut kept = keep_samples.then(Vec::new);
    for _ in 0..n_samples {
        let phi = draw(rng).map_err(wrap)?;
        let c = curve(&phi)?;
        if c.iter().any(|v| !v.is_finite()) {
            return Err(wrap(Error::NonFinite {
                context: "posterior predictive curve".into(),
            }));
        }
        curves.push(c);
        if let Some(k) = &mut kept {
            k.push(phi);
        }
    }
    let truth = match task.meta {
        TaskMeta::Sinusoid { amplitude, phase } => Some(grid.iter().map(|x| amplitude * (x - phase).sin()).collect()),
        _ => None,
    };
    let support = match &task.support.targets {
        Targets::Real(y) => task
            .support
            .inputs
            .as_slice()
            .iter()
            .copied()
            .zip(y.as_slice().iter().copied())
            .collect(),
        Targets::Class(_) => Vec::new(),
    };
    Ok(PosteriorDraws {
        task_id,
        grid: grid.to_vec(),
        point: curve(&phi_hat)?,
        curves,
        truth,
        support,
        phi_samples: kept,
    })
}

/// Writes `task_id,sample_id,x,y` rows: draws `0..n`, then the point
/// estimate ([`POINT_ID`]), ground truth ([`TRUTH_ID`]) and support points
/// ([`SUPPORT_ID`]).
pub fn write_predictions_csv<W: Write>(w: W, draws: &[PosteriorDraws]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["task_id", "sample_id", "x", "y"])?;
    for d in draws {
        let mut emit = |id: i64, xs: &[f64], ys: &[f64]| -> Result<()> {
            for (x, y) in xs.iter().zip(ys) {
                out.write_record([d.task_id.to_string(), id.to_string(), x.to_string(), y.to_string()])?;
            }
            Ok(())
        };
        for (s, c) in d.curves.iter().enumerate() {
            emit(s as i64, &d.grid, c)?;
        }
        emit(POINT_ID, &d.grid, &d.point)?;
        if let Some(t) = &d.truth {
            emit(TRUTH_ID, &d.grid, t)?;
        }
        let (sx, sy): (Vec<f64>, Vec<f64>) = d.support.iter().copied().unzip();
        emit(SUPPORT_ID, &sx, &sy)?;
    }
    out.flush()?;
    Ok(())
}
