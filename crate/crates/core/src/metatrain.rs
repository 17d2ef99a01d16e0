//! The outer empirical-Bayes loop: sample a meta-batch, score each task
//! with the point or Laplace subroutine, step the shared initialization.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::adapt::{adapt_values, InnerLoopCfg};
use crate::error::{Error, Result};
use crate::laplace::{ml_laplace, LaplaceCfg};
use crate::model::{self, Likelihood, MlpSpec, ParamVector};
use crate::numcore::Tape;
use crate::tasks::{derive_seed, rng_for, TaskDist};

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subroutine {
    MlPoint,
    MlLaplace,
}

impl std::str::FromStr for Subroutine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml_point" => Ok(Subroutine::MlPoint),
            "ml_laplace" => Ok(Subroutine::MlLaplace),
            other => Err(Error::InvalidArgument(format!("unknown subroutine '{other}'"))),
        }
    }
}

impl std::fmt::Display for Subroutine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Subroutine::MlPoint => "ml_point",
            Subroutine::MlLaplace => "ml_laplace",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetaOptimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl MetaOptimizer {
    pub fn adam() -> Self {
        MetaOptimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaCfg {
    /// Tasks per meta-batch `J`.
    pub meta_batch: usize,
    /// Meta learning rate `β`.
    pub meta_lr: f64,
    pub optimizer: MetaOptimizer,
    pub iterations: usize,
    pub subroutine: Subroutine,
    /// Evaluate every this many iterations; 0 disables evaluation.
    pub eval_every: usize,
    /// Held-out tasks per evaluation.
    pub eval_tasks: usize,
    pub seed: u64,
    /// Worker threads for per-task evaluation.
    pub workers: usize,
    /// Record wall-clock milliseconds in the metrics.
    pub log_wall_time: bool,
}

impl Default for MetaCfg {
    fn default() -> Self {
        Self {
            meta_batch: 25,
            meta_lr: 1e-3,
            optimizer: MetaOptimizer::adam(),
            iterations: 10_000,
            subroutine: Subroutine::MlPoint,
            eval_every: 500,
            eval_tasks: 100,
            seed: 0,
            workers: 1,
            log_wall_time: false,
        }
    }
}

impl MetaCfg {
    pub fn validate(&self) -> Result<()> {
        if self.meta_batch == 0 || self.iterations == 0 || self.workers == 0 {
            return Err(Error::InvalidArgument(
                "meta_batch, iterations and workers must be at least 1".into(),
            ));
        }
        if !(self.meta_lr >= 0.0 && self.meta_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "meta learning rate must be non-negative, got {}",
                self.meta_lr
            )));
        }
        if self.eval_every > 0 && self.eval_tasks == 0 {
            return Err(Error::InvalidArgument(
                "eval_tasks must be at least 1 when evaluating".into(),
            ));
        }
        Ok(())
    }
}

/// Everything the outer loop learns.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaParams {
    pub theta: ParamVector,
    /// Log of the per-parameter inner-step scale, when meta-learned.
    pub log_precond: Option<ParamVector>,
}

impl MetaParams {
    /// Seeded initialization for `spec`.
    pub fn init(spec: &MlpSpec, inner: &InnerLoopCfg, seed: u64) -> Self {
        let theta = spec.init(&mut rng_for(seed, &[INIT_STREAM]));
        let log_precond = inner.learn_precond.then(|| theta.zeros_like());
        Self { theta, log_precond }
    }
}

/// Objective value and gradients of one meta-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradient {
    /// Sum of per-task objectives.
    pub objective: f64,
    pub theta: ParamVector,
    pub log_precond: Option<ParamVector>,
}

struct TaskOutcome {
    seed: u64,
    value: f64,
    theta: ParamVector,
    log_precond: Option<ParamVector>,
}

fn task_outcome(
    spec: &MlpSpec,
    params: &MetaParams,
    dist: &TaskDist,
    seed: u64,
    lap: &LaplaceCfg,
    subroutine: Subroutine,
) -> Result<TaskOutcome> {
    let task = dist.sample_seeded(seed)?;
    let tape = Tape::new();
    let theta = params.theta.to_nodes(&tape);
    let lp = params.log_precond.as_ref().map(|p| p.to_nodes(&tape));
    let objective = match subroutine {
        Subroutine::MlPoint => {
            crate::adapt::ml_point(spec, &theta, &task, &lap.inner, lp.as_deref())
                .map_err(|e| Error::Task {
                    task_seed: seed,
                    source: Box::new(e),
                })?
                .query_nll
        }
        Subroutine::MlLaplace => ml_laplace(spec, &theta, &task, lap, lp.as_deref(), seed)?.objective,
    };
    let mut wrt = theta.clone();
    if let Some(lp) = &lp {
        wrt.extend(lp);
    }
    let grads = tape.grad_values(objective, &wrt)?;
    let (gt, gp) = grads.split_at(theta.len());
    Ok(TaskOutcome {
        seed,
        value: objective.item(),
        theta: ParamVector::from_blocks(gt),
        log_precond: lp.as_ref().map(|_| ParamVector::from_blocks(gp)),
    })
}

fn run_tasks<T: Send>(workers: usize, seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    if workers <= 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| seeds.par_iter().map(|&s| f(s)).collect::<Vec<_>>())
        .into_iter()
        .collect()
}

/// Summed objective and its gradient over the tasks drawn from `seeds`,
/// reduced in the order of `seeds`.
pub fn meta_gradient(
    spec: &MlpSpec,
    params: &MetaParams,
    dist: &TaskDist,
    seeds: &[u64],
    lap: &LaplaceCfg,
    subroutine: Subroutine,
    workers: usize,
) -> Result<MetaGradient> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("meta-batch is empty".into()));
    }
    let outcomes = run_tasks(workers, seeds, |s| task_outcome(spec, params, dist, s, lap, subroutine))?;
    let mut total = MetaGradient {
        objective: 0.0,
        theta: params.theta.zeros_like(),
        log_precond: params.log_precond.as_ref().map(ParamVector::zeros_like),
    };
    for o in &outcomes {
        if !o.value.is_finite() || !o.theta.is_finite() || o.log_precond.as_ref().is_some_and(|p| !p.is_finite()) {
            return Err(Error::MetaGradientNonFinite {
                iteration: 0,
                task_seed: o.seed,
            });
        }
        total.objective += o.value;
        total.theta.axpy(1.0, &o.theta);
        if let (Some(acc), Some(g)) = (&mut total.log_precond, &o.log_precond) {
            acc.axpy(1.0, g);
        }
    }
    Ok(total)
}

/// First-order optimizer over one flat parameter group.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: MetaOptimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: MetaOptimizer, lr: f64, len: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        match self.kind {
            MetaOptimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            MetaOptimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= self.lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

/// Which post-adaptation quantity [`meta_eval`] reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMetric {
    Nll,
    /// Mean squared error; twice the Gaussian NLL.
    Mse,
    Accuracy,
}

impl EvalMetric {
    /// MSE for regression, accuracy for classification.
    pub fn default_for(likelihood: Likelihood) -> Self {
        match likelihood {
            Likelihood::Gaussian => EvalMetric::Mse,
            Likelihood::Categorical => EvalMetric::Accuracy,
        }
    }
}

impl std::fmt::Display for EvalMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMetric::Nll => "nll",
            EvalMetric::Mse => "mse",
            EvalMetric::Accuracy => "accuracy",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub metric: EvalMetric,
    pub mean: f64,
    /// Half-width `1.96 · sd / √n`; `None` for a single task.
    pub ci95: Option<f64>,
    /// Per-task values in seed order.
    pub values: Vec<f64>,
}

impl EvalSummary {
    pub fn from_values(metric: EvalMetric, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("evaluation needs at least one task".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ci95 = (values.len() > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * var.sqrt() / n.sqrt()
        });
        Ok(Self {
            metric,
            mean,
            ci95,
            values,
        })
    }
}

/// Seeds of the fixed held-out evaluation tasks.
pub fn eval_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(seed, &[EVAL_STREAM, i])).collect()
}

/// Post-adaptation query metric over the tasks drawn from `seeds`.
/// `inner = None` scores the unadapted parameters. Sinusoid queries lie on
/// a uniform grid.
pub fn meta_eval(
    spec: &MlpSpec,
    params: &MetaParams,
    dist: &TaskDist,
    seeds: &[u64],
    inner: Option<&InnerLoopCfg>,
    metric: EvalMetric,
    workers: usize,
) -> Result<EvalSummary> {
    let dist = dist.for_eval();
    let values = run_tasks(workers, seeds, |s| {
        let task = dist.sample_seeded(s)?;
        let phi = match inner {
            Some(cfg) => {
                adapt_values(spec, &params.theta, &task, cfg, params.log_precond.as_ref())
                    .map_err(|e| Error::Task {
                        task_seed: s,
                        source: Box::new(e),
                    })?
                    .0
            }
            None => params.theta.clone(),
        };
        match metric {
            EvalMetric::Nll => model::nll_value(spec, &phi, &task.query),
            EvalMetric::Mse => Ok(2.0 * model::nll_value(spec, &phi, &task.query)?),
            EvalMetric::Accuracy => model::accuracy(spec, &phi, &task.query),
        }
    })?;
    EvalSummary::from_values(metric, values)
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    /// Summed meta-batch objective at the parameters before this
    /// iteration's update; `None` on the final evaluation row.
    pub meta_objective: Option<f64>,
    pub eval: Option<EvalSummary>,
    pub wall_ms: Option<u128>,
}

pub const METRICS_HEADER: &str = "iteration,meta_objective,eval_metric_mean,eval_metric_ci95,wall_ms";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let (mean, ci) = match &self.eval {
            Some(e) => (
                e.mean.to_string(),
                e.ci95.map_or_else(|| "NA".to_string(), |c| c.to_string()),
            ),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{}",
            self.iteration,
            opt(self.meta_objective),
            mean,
            ci,
            self.wall_ms.map(|w| w.to_string()).unwrap_or_default()
        )
    }
}

/// Writes the header and rows of `metrics.csv`.
pub fn write_metrics<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv_line())?;
    }
    Ok(())
}

pub struct TrainOutput {
    pub params: MetaParams,
    pub metrics: Vec<MetricsRow>,
}

/// Runs the outer loop from `init` (or a seeded initialization).
///
/// `observe` sees every metrics row as soon as it is produced.
pub fn meta_train(
    cfg: &MetaCfg,
    dist: &TaskDist,
    spec: &MlpSpec,
    lap: &LaplaceCfg,
    init: Option<MetaParams>,
    mut observe: impl FnMut(&MetricsRow),
) -> Result<TrainOutput> {
    cfg.validate()?;
    lap.validate()?;
    dist.check_spec(spec)?;
    let mut params = init.unwrap_or_else(|| MetaParams::init(spec, &lap.inner, cfg.seed));
    if params.log_precond.is_some() != lap.inner.learn_precond {
        return Err(Error::InvalidArgument(
            "initial parameters and inner-loop config disagree on the learned preconditioner".into(),
        ));
    }
    let mut opt_theta = Optimizer::new(cfg.optimizer, cfg.meta_lr, params.theta.len());
    let mut opt_precond = params
        .log_precond
        .as_ref()
        .map(|p| Optimizer::new(cfg.optimizer, cfg.meta_lr, p.len()));
    let held_out = eval_seeds(cfg.seed, if cfg.eval_every > 0 { cfg.eval_tasks } else { 0 });
    let metric = EvalMetric::default_for(spec.likelihood);
    let start = Instant::now();
    let mut metrics = Vec::new();
    let evaluate = |p: &MetaParams| meta_eval(spec, p, dist, &held_out, Some(&lap.inner), metric, cfg.workers);

    for it in 0..cfg.iterations {
        let seeds: Vec<u64> = (0..cfg.meta_batch as u64)
            .map(|j| derive_seed(cfg.seed, &[TRAIN_STREAM, it as u64, j]))
            .collect();
        let eval = if cfg.eval_every > 0 && it % cfg.eval_every == 0 {
            Some(evaluate(&params)?)
        } else {
            None
        };
        let grad =
            meta_gradient(spec, &params, dist, &seeds, lap, cfg.subroutine, cfg.workers).map_err(|e| match e {
                Error::MetaGradientNonFinite { task_seed, .. } => Error::MetaGradientNonFinite {
                    iteration: it,
                    task_seed,
                },
                other => other,
            })?;
        opt_theta.step(params.theta.as_mut_slice(), grad.theta.as_slice());
        if let (Some(opt), Some(p), Some(g)) = (&mut opt_precond, &mut params.log_precond, &grad.log_precond) {
            opt.step(p.as_mut_slice(), g.as_slice());
        }
        let row = MetricsRow {
            iteration: it,
            meta_objective: Some(grad.objective),
            eval,
            wall_ms: cfg.log_wall_time.then(|| start.elapsed().as_millis()),
        };
        observe(&row);
        metrics.push(row);
    }
    if cfg.eval_every > 0 {
        let row = MetricsRow {
            iteration: cfg.iterations,
            meta_objective: None,
            eval: Some(evaluate(&params)?),
            wall_ms: cfg.log_wall_time.then(|| start.elapsed().as_millis()),
        };
        observe(&row);
        metrics.push(row);
    }
    Ok(TrainOutput { params, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Targets};
    use crate::numcore::Matrix;
    use crate::quadprior::relative_error;
    use crate::tasks::{FewShotDist, SinusoidDist};

    fn tiny_spec() -> MlpSpec {
        MlpSpec {
            layer_sizes: vec![1, 4, 1],
            activation: Activation::Tanh,
            likelihood: Likelihood::Gaussian,
        }
    }

    fn sine() -> TaskDist {
        TaskDist::Sinusoid(SinusoidDist {
            n_support: 5,
            n_query: 6,
            ..SinusoidDist::default()
        })
    }

    fn lap(alpha: f64, steps: usize, second_order: bool, eta: f64) -> LaplaceCfg {
        LaplaceCfg {
            tau: 0.01,
            eta,
            inner: InnerLoopCfg {
                alpha,
                steps,
                second_order,
                learn_precond: false,
            },
            ..LaplaceCfg::default()
        }
    }

    #[test]
    fn linear_single_task_sgd_step_by_hand() {
        let spec = MlpSpec {
            layer_sizes: vec![1, 1],
            activation: Activation::Tanh,
            likelihood: Likelihood::Gaussian,
        };
        let dist = sine();
        let (alpha, beta) = (0.05, 0.1);
        let lcfg = lap(alpha, 1, true, 0.0);
        let cfg = MetaCfg {
            meta_batch: 1,
            meta_lr: beta,
            optimizer: MetaOptimizer::Sgd,
            iterations: 1,
            eval_every: 0,
            seed: 3,
            ..MetaCfg::default()
        };
        let init = MetaParams::init(&spec, &lcfg.inner, cfg.seed);
        let out = meta_train(&cfg, &dist, &spec, &lcfg, Some(init.clone()), |_| {}).unwrap();

        // θ' = θ − β (I − α/N XsᵀXs) Xqᵀ(Xq φ − yq)/M, with φ = θ − α/N Xsᵀ(Xs θ − ys)
        let task = dist
            .sample_seeded(derive_seed(cfg.seed, &[TRAIN_STREAM, 0, 0]))
            .unwrap();
        let aug = |x: &Matrix| Matrix::from_fn(x.rows(), 2, |i, j| if j == 0 { x[(i, 0)] } else { 1.0 });
        let ys = |t: &Targets| match t {
            Targets::Real(y) => y.as_slice().to_vec(),
            Targets::Class(_) => unreachable!(),
        };
        let (xs, xq) = (aug(&task.support.inputs), aug(&task.query.inputs));
        let (ysup, yq) = (ys(&task.support.targets), ys(&task.query.targets));
        let (n, m) = (xs.rows() as f64, xq.rows() as f64);
        let theta = init.theta.as_slice().to_vec();
        let rs: Vec<f64> = xs.matvec(&theta).iter().zip(&ysup).map(|(a, b)| a - b).collect();
        let gs = xs.transpose().matvec(&rs);
        let phi: Vec<f64> = theta.iter().zip(&gs).map(|(t, g)| t - alpha / n * g).collect();
        let rq: Vec<f64> = xq.matvec(&phi).iter().zip(&yq).map(|(a, b)| a - b).collect();
        let gq: Vec<f64> = xq.transpose().matvec(&rq).iter().map(|v| v / m).collect();
        let jac = Matrix::identity(2).sub(&xs.matmul_tn(&xs).scale(alpha / n));
        let g = jac.matvec(&gq);
        let expect: Vec<f64> = theta.iter().zip(&g).map(|(t, g)| t - beta * g).collect();
        assert!(relative_error(out.params.theta.as_slice(), &expect) < 1e-12);
    }

    fn fd_error(subroutine: Subroutine, second_order: bool, steps: usize, seed: u64) -> f64 {
        let spec = tiny_spec();
        let dist = sine();
        let lcfg = lap(0.1, steps, second_order, 0.05);
        let params = MetaParams::init(&spec, &lcfg.inner, seed);
        let seeds = [seed * 10 + 1, seed * 10 + 2, seed * 10 + 3];
        let g = meta_gradient(&spec, &params, &dist, &seeds, &lcfg, subroutine, 1).unwrap();
        let objective = |theta: &ParamVector| {
            let p = MetaParams {
                theta: theta.clone(),
                log_precond: None,
            };
            meta_gradient(&spec, &p, &dist, &seeds, &lcfg, subroutine, 1)
                .unwrap()
                .objective
        };
        let h = 1e-5;
        let num: Vec<f64> = (0..params.theta.len())
            .map(|k| {
                let (mut a, mut b) = (params.theta.clone(), params.theta.clone());
                a.as_mut_slice()[k] += h;
                b.as_mut_slice()[k] -= h;
                (objective(&a) - objective(&b)) / (2.0 * h)
            })
            .collect();
        relative_error(g.theta.as_slice(), &num)
    }

    #[test]
    fn second_order_meta_gradient_matches_finite_differences() {
        for subroutine in [Subroutine::MlPoint, Subroutine::MlLaplace] {
            for steps in [1, 2] {
                for seed in 0..3 {
                    let err = fd_error(subroutine, true, steps, seed);
                    assert!(err < 1e-4, "{subroutine} K={steps} seed={seed}: {err}");
                }
            }
        }
    }

    #[test]
    fn objective_is_order_invariant_and_parallel_safe() {
        let spec = tiny_spec();
        let dist = sine();
        let lcfg = lap(0.1, 2, true, 0.05);
        let params = MetaParams::init(&spec, &lcfg.inner, 1);
        let seeds: Vec<u64> = (100..108).collect();
        let mut rev = seeds.clone();
        rev.reverse();
        let a = meta_gradient(&spec, &params, &dist, &seeds, &lcfg, Subroutine::MlLaplace, 1).unwrap();
        let b = meta_gradient(&spec, &params, &dist, &rev, &lcfg, Subroutine::MlLaplace, 1).unwrap();
        let c = meta_gradient(&spec, &params, &dist, &seeds, &lcfg, Subroutine::MlLaplace, 4).unwrap();
        assert!((a.objective - b.objective).abs() < 1e-10);
        assert_eq!(a, c);
    }

    #[test]
    fn zero_meta_lr_keeps_theta() {
        let spec = tiny_spec();
        let lcfg = lap(0.1, 1, true, 0.0);
        let cfg = MetaCfg {
            meta_batch: 2,
            meta_lr: 0.0,
            optimizer: MetaOptimizer::Sgd,
            iterations: 5,
            eval_every: 0,
            ..MetaCfg::default()
        };
        let init = MetaParams::init(&spec, &lcfg.inner, cfg.seed);
        let out = meta_train(&cfg, &sine(), &spec, &lcfg, Some(init.clone()), |_| {}).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let spec = tiny_spec();
        let lcfg = lap(0.1, 2, true, 1e-3);
        let cfg = MetaCfg {
            meta_batch: 3,
            iterations: 12,
            eval_every: 5,
            eval_tasks: 4,
            subroutine: Subroutine::MlLaplace,
            seed: 8,
            workers: 2,
            ..MetaCfg::default()
        };
        let run = || {
            let out = meta_train(&cfg, &sine(), &spec, &lcfg, None, |_| {}).unwrap();
            let mut buf = Vec::new();
            write_metrics(&mut buf, &out.metrics).unwrap();
            buf
        };
        let a = run();
        assert_eq!(a, run());
        let text = String::from_utf8(a).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 1 + 12 + 1);
        assert!(lines[1].split(',').nth(2).is_some_and(|m| !m.is_empty()));
        assert!(lines[2].ends_with(",,,"));
    }

    #[test]
    fn learned_preconditioner_gets_gradients() {
        let spec = tiny_spec();
        let mut lcfg = lap(0.1, 2, true, 0.0);
        lcfg.inner.learn_precond = true;
        let params = MetaParams::init(&spec, &lcfg.inner, 2);
        let g = meta_gradient(&spec, &params, &sine(), &[1, 2], &lcfg, Subroutine::MlPoint, 1).unwrap();
        let gp = g.log_precond.unwrap();
        assert!(gp.as_slice().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn single_task_has_no_interval() {
        let s = EvalSummary::from_values(EvalMetric::Mse, vec![0.5]).unwrap();
        assert_eq!(s.ci95, None);
        let row = MetricsRow {
            iteration: 0,
            meta_objective: Some(1.0),
            eval: Some(s),
            wall_ms: None,
        };
        assert_eq!(row.to_csv_line(), "0,1,0.5,NA,");
        let s = EvalSummary::from_values(EvalMetric::Mse, vec![1.0, 3.0]).unwrap();
        assert!((s.ci95.unwrap() - 1.96 * 2f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn oracle_parameters_reach_the_floor() {
        // a 1-1 linear model fits y = 0 tasks exactly at θ = 0
        let spec = MlpSpec {
            layer_sizes: vec![1, 1],
            activation: Activation::Tanh,
            likelihood: Likelihood::Gaussian,
        };
        let dist = TaskDist::Sinusoid(SinusoidDist {
            amplitude_range: (0.0, 0.0),
            ..SinusoidDist::default()
        });
        let params = MetaParams {
            theta: ParamVector::new(vec![0.0, 0.0], vec![(2, 1)]),
            log_precond: None,
        };
        let s = meta_eval(
            &spec,
            &params,
            &dist,
            &eval_seeds(0, 5),
            Some(&InnerLoopCfg::default()),
            EvalMetric::Nll,
            1,
        )
        .unwrap();
        assert_eq!(s.mean, 0.0);
    }

    #[test]
    fn untrained_classifier_is_at_chance() {
        let dist = FewShotDist::default();
        let spec = MlpSpec {
            layer_sizes: vec![dist.dim, 32, dist.way],
            activation: Activation::Relu,
            likelihood: Likelihood::Categorical,
        };
        let dist = TaskDist::FewShot(dist);
        let params = MetaParams::init(&spec, &InnerLoopCfg::default(), 4);
        let s = meta_eval(
            &spec,
            &params,
            &dist,
            &eval_seeds(4, 600),
            None,
            EvalMetric::Accuracy,
            4,
        )
        .unwrap();
        assert!((s.mean - 0.2).abs() < 0.03, "{}", s.mean);
    }
}
