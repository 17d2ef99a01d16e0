//! Fast adaptation: truncated gradient descent from the shared
//! initialization on a task's support set.

use crate::error::{Error, Result};
use crate::model::{self, MlpSpec, ParamVector};
use crate::numcore::{Node, Tape};
use crate::tasks::Task;

#[derive(Debug, Clone, PartialEq)]
pub struct InnerLoopCfg {
    /// Inner step size `α`.
    pub alpha: f64,
    /// Number of inner steps `K`.
    pub steps: usize,
    /// Differentiate through the inner gradients. When off, they are
    /// treated as constants with respect to `θ`.
    pub second_order: bool,
    /// Scale each parameter's step by a meta-learned positive factor.
    pub learn_precond: bool,
}

impl Default for InnerLoopCfg {
    fn default() -> Self {
        Self {
            alpha: 0.003,
            steps: 5,
            second_order: true,
            learn_precond: false,
        }
    }
}

impl InnerLoopCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "inner step size must be positive, got {}",
                self.alpha
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("inner step count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome of adapting to one task.
pub struct AdaptResult<'t> {
    /// Adapted parameters `φ̂`, one node per layer block.
    pub phi_hat: Vec<Node<'t>>,
    /// Mean query negative log-likelihood at `φ̂`.
    pub query_nll: Node<'t>,
    /// Support NLL before each step and after the last (`K + 1` entries).
    pub support_nll_trace: Vec<f64>,
}

impl AdaptResult<'_> {
    pub fn phi_hat_values(&self) -> ParamVector {
        ParamVector::from_nodes(&self.phi_hat)
    }
}

/// Runs `K` full-batch gradient steps on the support NLL from `theta` and
/// evaluates the query NLL at the result.
///
/// `log_precond`, when given, holds one block per layer; the step for each
/// parameter is scaled by `exp` of its entry.
pub fn ml_point<'t>(
    spec: &MlpSpec,
    theta: &[Node<'t>],
    task: &Task,
    cfg: &InnerLoopCfg,
    log_precond: Option<&[Node<'t>]>,
) -> Result<AdaptResult<'t>> {
    task.validate()?;
    if cfg.steps == 0 || !(cfg.alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "inner loop needs K >= 1 and alpha >= 0 (got K = {}, alpha = {})",
            cfg.steps, cfg.alpha
        )));
    }
    let tape = theta
        .first()
        .ok_or_else(|| Error::InvalidArgument("no parameter blocks".into()))?
        .tape();
    let scales: Option<Vec<Node<'t>>> = log_precond.map(|lp| lp.iter().map(|l| l.exp()).collect());
    if let Some(s) = &scales {
        if s.len() != theta.len() || s.iter().zip(theta).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::shape(
                "preconditioner blocks",
                format!("{} blocks matching the parameters", theta.len()),
                format!("{} blocks", s.len()),
            ));
        }
    }

    let mut phi: Vec<Node<'t>> = theta.to_vec();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let support = model::nll(spec, &phi, &task.support)?;
        trace.push(support.item());
        let grads = tape.grad(support, &phi, cfg.second_order)?;
        if grads.iter().any(|g| !g.value().is_finite()) {
            return Err(Error::NonFinite {
                context: format!("inner gradient at step {step}"),
            });
        }
        phi = phi
            .iter()
            .zip(&grads)
            .enumerate()
            .map(|(l, (&p, &g))| {
                let g = match &scales {
                    Some(s) => s[l] * g,
                    None => g,
                };
                p - g.scale(cfg.alpha)
            })
            .collect();
    }
    let phi_values = ParamVector::from_nodes(&phi);
    trace.push(model::nll_value(spec, &phi_values, &task.support)?);
    if trace.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "support negative log-likelihood".into(),
        });
    }
    let query_nll = model::nll(spec, &phi, &task.query)?;
    Ok(AdaptResult {
        phi_hat: phi,
        query_nll,
        support_nll_trace: trace,
    })
}

/// Adapted parameters and support trace, without keeping a graph.
pub fn adapt_values(
    spec: &MlpSpec,
    theta: &ParamVector,
    task: &Task,
    cfg: &InnerLoopCfg,
    log_precond: Option<&ParamVector>,
) -> Result<(ParamVector, Vec<f64>)> {
    let tape = Tape::new();
    let cfg = InnerLoopCfg {
        second_order: false,
        ..cfg.clone()
    };
    let lp = log_precond.map(|p| p.to_nodes(&tape));
    let res = ml_point(spec, &theta.to_nodes(&tape), task, &cfg, lp.as_deref())?;
    Ok((res.phi_hat_values(), res.support_nll_trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Examples, Likelihood, Targets};
    use crate::numcore::Matrix;
    use crate::quadprior::{self, relative_error, QuadProblem};
    use crate::tasks::{rng_for, SinusoidDist, TaskDist, TaskMeta};
    use rand::Rng;

    fn linear_spec(d: usize) -> MlpSpec {
        MlpSpec {
            layer_sizes: vec![d, 1],
            activation: Activation::Tanh,
            likelihood: Likelihood::Gaussian,
        }
    }

    fn linear_task(seed: u64, n: usize, d: usize) -> Task {
        let mut rng = rng_for(seed, &[]);
        let mut set = |n: usize| Examples {
            inputs: Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)),
            targets: Targets::Real(Matrix::from_fn(n, 1, |_, _| rng.random_range(-2.0..2.0))),
        };
        Task {
            support: set(n),
            query: set(4),
            meta: TaskMeta::External,
        }
    }

    /// Support design with the bias column, matching the flat layout.
    fn augmented(x: &Matrix) -> Matrix {
        Matrix::from_fn(
            x.rows(),
            x.cols() + 1,
            |i, j| if j < x.cols() { x[(i, j)] } else { 1.0 },
        )
    }

    fn support_targets(task: &Task) -> Vec<f64> {
        match &task.support.targets {
            Targets::Real(y) => y.as_slice().to_vec(),
            Targets::Class(_) => unreachable!(),
        }
    }

    fn tiny_spec() -> MlpSpec {
        MlpSpec {
            layer_sizes: vec![2, 4, 1],
            activation: Activation::Tanh,
            likelihood: Likelihood::Gaussian,
        }
    }

    #[test]
    fn linear_model_matches_gradient_descent_oracle() {
        let (n, d) = (6, 3);
        let spec = linear_spec(d);
        for (seed, steps) in [(1, 1), (2, 1), (3, 4), (4, 9)] {
            let task = linear_task(seed, n, d);
            let theta = spec.init(&mut rng_for(seed, &[1]));
            let cfg = InnerLoopCfg {
                alpha: 0.3,
                steps,
                ..InnerLoopCfg::default()
            };
            let (phi, trace) = adapt_values(&spec, &theta, &task, &cfg, None).unwrap();
            assert_eq!(trace.len(), steps + 1);
            let p = QuadProblem {
                x: augmented(&task.support.inputs),
                y: support_targets(&task),
                theta0: theta.as_slice().to_vec(),
                alpha: cfg.alpha / n as f64,
                k: steps,
                precond: None,
            };
            let gd = quadprior::gd_iterate(&p).unwrap();
            let err = relative_error(phi.as_slice(), &gd);
            assert!(if steps == 1 { err < 1e-12 } else { err < 1e-10 }, "{err}");
            // the same point is the MAP estimate under the early-stopping prior
            let prior = quadprior::induced_q(&p).unwrap();
            let map = quadprior::map_estimate(&p.x, &p.y, &prior).unwrap();
            assert!(relative_error(phi.as_slice(), &map) < 1e-8);
        }
    }

    #[test]
    fn zero_step_size_leaves_theta() {
        let spec = tiny_spec();
        let task = linear_task(5, 5, 2);
        let theta = spec.init(&mut rng_for(5, &[]));
        let tape = Tape::new();
        let nodes = theta.to_nodes(&tape);
        let cfg = InnerLoopCfg {
            alpha: 0.0,
            steps: 3,
            ..InnerLoopCfg::default()
        };
        let res = ml_point(&spec, &nodes, &task, &cfg, None).unwrap();
        assert_eq!(res.phi_hat_values(), theta);
        assert_eq!(
            res.query_nll.item(),
            model::nll_value(&spec, &theta, &task.query).unwrap()
        );
    }

    fn meta_gradient_error(spec: &MlpSpec, seed: u64, steps: usize, learn_precond: bool) -> f64 {
        let task = linear_task(seed, 5, 2);
        let theta = spec.init(&mut rng_for(seed, &[2]));
        let lp = theta.filled_like(-0.5);
        let cfg = InnerLoopCfg {
            alpha: 0.4,
            steps,
            second_order: true,
            learn_precond,
        };
        let objective = |th: &ParamVector, lp: &ParamVector| {
            let tape = Tape::new();
            let lpn = lp.to_nodes(&tape);
            ml_point(
                spec,
                &th.to_nodes(&tape),
                &task,
                &cfg,
                learn_precond.then_some(lpn.as_slice()),
            )
            .unwrap()
            .query_nll
            .item()
        };
        let tape = Tape::new();
        let nodes = theta.to_nodes(&tape);
        let lpn = lp.to_nodes(&tape);
        let res = ml_point(spec, &nodes, &task, &cfg, learn_precond.then_some(lpn.as_slice())).unwrap();
        let mut wrt = nodes.clone();
        if learn_precond {
            wrt.extend(&lpn);
        }
        let g = tape.grad_values(res.query_nll, &wrt).unwrap();
        let analytic: Vec<f64> = g.iter().flat_map(|m| m.as_slice().to_vec()).collect();
        let h = 1e-5;
        let mut numeric = Vec::new();
        for k in 0..theta.len() {
            let (mut a, mut b) = (theta.clone(), theta.clone());
            a.as_mut_slice()[k] += h;
            b.as_mut_slice()[k] -= h;
            numeric.push((objective(&a, &lp) - objective(&b, &lp)) / (2.0 * h));
        }
        if learn_precond {
            for k in 0..lp.len() {
                let (mut a, mut b) = (lp.clone(), lp.clone());
                a.as_mut_slice()[k] += h;
                b.as_mut_slice()[k] -= h;
                numeric.push((objective(&theta, &a) - objective(&theta, &b)) / (2.0 * h));
            }
        }
        relative_error(&analytic, &numeric)
    }

    #[test]
    fn second_order_meta_gradient_matches_finite_differences() {
        let spec = tiny_spec();
        for seed in 0..5 {
            for steps in [1, 2] {
                let err = meta_gradient_error(&spec, seed, steps, false);
                assert!(err < 1e-5, "seed {seed} K {steps}: {err}");
            }
        }
        let err = meta_gradient_error(&spec, 9, 2, true);
        assert!(err < 1e-5, "preconditioned: {err}");
    }

    #[test]
    fn first_order_mode_differs_only_in_gradient() {
        let spec = tiny_spec();
        let task = linear_task(3, 5, 2);
        let theta = spec.init(&mut rng_for(3, &[]));
        let run = |second_order: bool| {
            let tape = Tape::new();
            let nodes = theta.to_nodes(&tape);
            let cfg = InnerLoopCfg {
                alpha: 0.4,
                steps: 2,
                second_order,
                learn_precond: false,
            };
            let res = ml_point(&spec, &nodes, &task, &cfg, None).unwrap();
            let g = tape.grad_values(res.query_nll, &nodes).unwrap();
            let gq = tape.grad_values(res.query_nll, &res.phi_hat).unwrap();
            (
                res.phi_hat_values(),
                res.query_nll.item(),
                ParamVector::from_blocks(&g),
                ParamVector::from_blocks(&gq),
            )
        };
        let (p1, q1, g1, gq1) = run(false);
        let (p2, q2, g2, _) = run(true);
        assert_eq!(p1, p2);
        assert_eq!(q1, q2);
        assert_ne!(g1, g2);
        // first order: the meta-gradient is the query gradient at φ̂
        assert_eq!(g1, gq1);
    }

    #[test]
    fn small_steps_descend_on_sinusoid() {
        let spec = MlpSpec::sinusoid();
        let dist = TaskDist::Sinusoid(SinusoidDist::default());
        let cfg = InnerLoopCfg {
            alpha: 1e-3,
            steps: 10,
            ..InnerLoopCfg::default()
        };
        for seed in 0..10 {
            let task = dist.sample_seeded(seed).unwrap();
            let theta = spec.init(&mut rng_for(seed, &[3]));
            let (_, trace) = adapt_values(&spec, &theta, &task, &cfg, None).unwrap();
            assert!(trace.windows(2).all(|w| w[1] <= w[0]), "{trace:?}");
        }
    }

    #[test]
    fn non_finite_gradient_names_the_step() {
        let spec = tiny_spec();
        let task = linear_task(1, 5, 2);
        let theta = spec.init(&mut rng_for(1, &[]));
        let cfg = InnerLoopCfg {
            alpha: 1e200,
            steps: 4,
            ..InnerLoopCfg::default()
        };
        let tape = Tape::new();
        let err = ml_point(&spec, &theta.to_nodes(&tape), &task, &cfg, None)
            .err()
            .unwrap();
        assert!(
            matches!(&err, Error::NonFinite { context } if context.contains("step")),
            "{err}"
        );
    }
}
