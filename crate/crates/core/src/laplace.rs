//! Laplace-approximated per-task marginal negative log-likelihood.
//!
//! The per-task objective is `query NLL(φ̂) + η · log det Ĥ`, where `Ĥ` is
//! the support-set curvature at `φ̂` plus prior precision `τ`. Under K-FAC
//! `τ` enters as damping `√τ` on both factors of every layer.

use crate::adapt::{ml_point, AdaptResult, InnerLoopCfg};
use crate::curvature::{self, FisherCfg, FisherKind};
use crate::error::{Error, Result};
use crate::model::{MlpSpec, ParamVector};
use crate::numcore::{linalg, Node};
use crate::tasks::{derive_seed, Task};

/// Substream tag for Fisher target sampling.
const FISHER_STREAM: u64 = 0xF15E;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureMode {
    Kfac,
    Dense,
}

impl std::str::FromStr for CurvatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kfac" => Ok(CurvatureMode::Kfac),
            "dense" => Ok(CurvatureMode::Dense),
            other => Err(Error::InvalidArgument(format!("unknown curvature mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for CurvatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CurvatureMode::Kfac => "kfac",
            CurvatureMode::Dense => "dense",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceCfg {
    /// Prior precision `τ`.
    pub tau: f64,
    /// Weight `η` of the log-determinant.
    pub eta: f64,
    pub curvature: CurvatureMode,
    pub fisher: FisherKind,
    /// Treat the log-determinant as a constant even in second-order mode.
    pub detach_logdet: bool,
    pub inner: InnerLoopCfg,
}

impl Default for LaplaceCfg {
    fn default() -> Self {
        Self {
            tau: 0.001,
            eta: 1e-6,
            curvature: CurvatureMode::Kfac,
            fisher: FisherKind::True,
            detach_logdet: false,
            inner: InnerLoopCfg::default(),
        }
    }
}

impl LaplaceCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) || !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau and eta must be finite and non-negative (got {} and {})",
                self.tau, self.eta
            )));
        }
        self.inner.validate()
    }

    /// Factor damping that makes the Kronecker product carry `τ` on its diagonal.
    pub fn factor_damping(&self) -> f64 {
        self.tau.sqrt()
    }

    /// True when the log-determinant is differentiated through `φ̂`.
    pub fn logdet_is_differentiable(&self) -> bool {
        self.inner.second_order && !self.detach_logdet
    }

    /// Fisher sampling stream of a task.
    pub fn fisher_cfg(&self, task_seed: u64) -> FisherCfg {
        FisherCfg {
            kind: self.fisher,
            seed: derive_seed(task_seed, &[FISHER_STREAM]),
        }
    }
}

pub struct LaplaceResult<'t> {
    /// `query NLL + η · log det Ĥ`.
    pub objective: Node<'t>,
    pub point: AdaptResult<'t>,
    /// `log det Ĥ`, or `None` when `η = 0` and it was not computed.
    pub logdet: Option<f64>,
}

/// `log det` of the support curvature at `phi_hat` with prior precision `τ`,
/// without a graph.
pub fn curvature_logdet(
    spec: &MlpSpec,
    phi_hat: &ParamVector,
    task: &Task,
    cfg: &LaplaceCfg,
    task_seed: u64,
) -> Result<f64> {
    match cfg.curvature {
        CurvatureMode::Kfac => {
            let state = curvature::kfac_estimate(
                spec,
                phi_hat,
                &task.support,
                cfg.factor_damping(),
                &cfg.fisher_cfg(task_seed),
            )?;
            curvature::kfac_logdet(&state)
        }
        CurvatureMode::Dense => {
            let h = curvature::dense_ggn(spec, phi_hat, &task.support, cfg.tau)?.h;
            linalg::logdet_spd(&h)
        }
    }
}

/// Adapts to `task` and returns the Laplace-penalized query objective.
///
/// Errors carry `task_seed`, which also seeds the Fisher target sampling.
pub fn ml_laplace<'t>(
    spec: &MlpSpec,
    theta: &[Node<'t>],
    task: &Task,
    cfg: &LaplaceCfg,
    log_precond: Option<&[Node<'t>]>,
    task_seed: u64,
) -> Result<LaplaceResult<'t>> {
    let wrap = |e: Error| Error::Task {
        task_seed,
        source: Box::new(e),
    };
    cfg.validate().map_err(wrap)?;
    let point = ml_point(spec, theta, task, &cfg.inner, log_precond).map_err(wrap)?;
    if cfg.eta == 0.0 {
        return Ok(LaplaceResult {
            objective: point.query_nll,
            point,
            logdet: None,
        });
    }
    let tape = point.query_nll.tape();
    let logdet = if cfg.curvature == CurvatureMode::Kfac && cfg.logdet_is_differentiable() {
        let factors = curvature::kfac_factors(spec, &point.phi_hat, &task.support, &cfg.fisher_cfg(task_seed), true)
            .map_err(wrap)?;
        curvature::kfac_logdet_node(&factors, cfg.factor_damping()).map_err(wrap)?
    } else {
        let v = curvature_logdet(spec, &point.phi_hat_values(), task, cfg, task_seed).map_err(wrap)?;
        tape.constant(crate::numcore::Matrix::scalar(v))
    };
    let ld = logdet.item();
    if !ld.is_finite() {
        return Err(wrap(Error::NonFinite {
            context: "curvature log-determinant".into(),
        }));
    }
    Ok(LaplaceResult {
        objective: point.query_nll + logdet.scale(cfg.eta),
        point,
        logdet: Some(ld),
    })
}

/// Sum of per-task objectives, in the given order.
pub fn laplace_marginal_nll<'t>(per_task: &[Node<'t>]) -> Result<Node<'t>> {
    let (first, rest) = per_task
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("marginal NLL needs at least one task".into()))?;
    Ok(rest.iter().fold(*first, |acc, &v| acc + v))
}
