use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::Rng;

use hbml::adapt::adapt_values;
use hbml::metatrain::{self, eval_seeds, meta_eval, meta_train, EvalMetric, EvalSummary, MetaParams, MetricsRow};
use hbml::model::{self, read_checkpoint, write_checkpoint, Targets};
use hbml::numcore::{sym_eig, Matrix};
use hbml::posterior::{sample_predictive, write_predictions_csv};
use hbml::quadprior::{gd_iterate, induced_q, map_estimate, max_abs_error, QuadProblem};
use hbml::tasks::{derive_seed, linspace, read_tasks_csv, rng_for, Task, TaskDist};
use hbml::Error;

use crate::config::RunConfig;

/// Substream tags for tasks drawn by the commands.
const ADAPT_STREAM: u64 = 10;
const EVAL_STREAM: u64 = 11;
const SAMPLE_STREAM: u64 = 12;
const DRAW_STREAM: u64 = 13;

/// Largest absolute error `verify-oracle` accepts.
pub const ORACLE_TOL: f64 = 1e-8;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn precond_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name("precond.ckpt")
}

/// Header lines of `run.meta`, followed by the resolved configuration.
pub fn run_meta(cfg: &RunConfig) -> String {
    let spec = cfg.spec();
    format!(
        "# hbml {}\n# model {} ({} parameters)\n# kfac factor damping sqrt(tau) = {}\n{}",
        env!("CARGO_PKG_VERSION"),
        spec.canonical(),
        spec.param_count(),
        cfg.laplace.factor_damping(),
        cfg.render()
    )
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("run.meta"), run_meta(cfg)).context("writing run.meta")?;
    let mut metrics = create(&dir.join("metrics.csv"))?;
    writeln!(metrics, "{}", metatrain::METRICS_HEADER)?;
    let mut write_err = None;
    let spec = cfg.spec();
    let out = meta_train(
        &cfg.meta_cfg(),
        &cfg.task_dist(),
        &spec,
        &cfg.laplace,
        None,
        |row: &MetricsRow| {
            if let Some(e) = &row.eval {
                eprintln!("iteration {}: eval {} = {:.5}", row.iteration, e.metric, e.mean);
            }
            if write_err.is_none() {
                write_err = writeln!(metrics, "{}", row.to_csv_line())
                    .and_then(|_| metrics.flush())
                    .err();
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics.csv");
    }
    let ckpt = dir.join("theta.ckpt");
    write_checkpoint(create(&ckpt)?, &spec, &out.params.theta)?;
    if let Some(lp) = &out.params.log_precond {
        write_checkpoint(create(&precond_path(&ckpt))?, &spec, lp)?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn load_params(cfg: &RunConfig, checkpoint: &Path) -> Result<MetaParams> {
    let spec = cfg.spec();
    let open = |p: &Path| File::open(p).map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", p.display())));
    let theta = read_checkpoint(std::io::BufReader::new(open(checkpoint)?), &spec)?;
    let log_precond = if cfg.inner().learn_precond {
        Some(read_checkpoint(
            std::io::BufReader::new(open(&precond_path(checkpoint))?),
            &spec,
        )?)
    } else {
        None
    };
    Ok(MetaParams { theta, log_precond })
}

/// Tasks from a CSV file, or one seeded draw.
fn tasks_for(cfg: &RunConfig, task_csv: Option<&Path>, task_seed: Option<u64>) -> Result<Vec<(u64, Task)>> {
    let dist = cfg.task_dist();
    match task_csv {
        Some(p) => {
            let f = File::open(p).map_err(|e| Error::Config(format!("cannot open {}: {e}", p.display())))?;
            let tasks = read_tasks_csv(f, dist.likelihood())?;
            let spec = cfg.spec();
            for (id, t) in &tasks {
                if t.support.inputs.cols() != spec.input_dim() {
                    return Err(Error::Config(format!(
                        "task {id} has {} inputs, model expects {}",
                        t.support.inputs.cols(),
                        spec.input_dim()
                    ))
                    .into());
                }
            }
            Ok(tasks)
        }
        None => {
            let seed = task_seed.unwrap_or_else(|| derive_seed(cfg.seed, &[ADAPT_STREAM]));
            Ok(vec![(seed, dist.sample_seeded(seed)?)])
        }
    }
}

/// Adapts to each task and writes query predictions.
pub fn adapt(
    cfg: &RunConfig,
    checkpoint: &Path,
    task_csv: Option<&Path>,
    task_seed: Option<u64>,
    output: &Path,
) -> Result<()> {
    cfg.validate()?;
    let params = load_params(cfg, checkpoint)?;
    let spec = cfg.spec();
    let tasks = tasks_for(cfg, task_csv, task_seed)?;
    let dim = spec.input_dim();
    let mut w = csv::Writer::from_writer(create(output)?);
    let mut header = vec!["task_id".to_string(), "set".to_string()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    header.extend(["target".to_string(), "prediction".to_string()]);
    w.write_record(&header)?;
    for (id, task) in &tasks {
        let (phi, trace) = adapt_values(&spec, &params.theta, task, cfg.inner(), params.log_precond.as_ref())?;
        for (name, set) in [("support", &task.support), ("query", &task.query)] {
            let pred = model::predict(&spec, &phi, &set.inputs)?;
            for i in 0..set.len() {
                let mut row = vec![id.to_string(), name.to_string()];
                row.extend(set.inputs.row_slice(i).iter().map(f64::to_string));
                match &set.targets {
                    Targets::Real(y) => {
                        row.push(y[(i, 0)].to_string());
                        row.push(pred[(i, 0)].to_string());
                    }
                    Targets::Class(c) => {
                        row.push(c[i].to_string());
                        row.push(model::argmax(pred.row_slice(i)).to_string());
                    }
                }
                w.write_record(&row)?;
            }
        }
        let metric = EvalMetric::default_for(spec.likelihood);
        let value = match metric {
            EvalMetric::Accuracy => model::accuracy(&spec, &phi, &task.query)?,
            _ => 2.0 * model::nll_value(&spec, &phi, &task.query)?,
        };
        println!(
            "task {id}: support nll {:.5} -> {:.5}, query {metric} {value:.5}",
            trace[0],
            trace[trace.len() - 1]
        );
    }
    w.flush()?;
    Ok(())
}

/// Scores the checkpoint on `episodes` fresh tasks.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, episodes: usize, output: &Path) -> Result<EvalSummary> {
    cfg.validate()?;
    if episodes == 0 {
        return Err(Error::Config("--episodes must be at least 1".into()).into());
    }
    let params = load_params(cfg, checkpoint)?;
    let spec = cfg.spec();
    let seeds = eval_seeds(derive_seed(cfg.seed, &[EVAL_STREAM]), episodes);
    let metric = EvalMetric::default_for(spec.likelihood);
    let summary = meta_eval(
        &spec,
        &params,
        &cfg.task_dist(),
        &seeds,
        Some(cfg.inner()),
        metric,
        cfg.workers,
    )?;
    let mut w = csv::Writer::from_writer(create(output)?);
    w.write_record(["episode", "task_seed", metric.to_string().as_str()])?;
    for (i, (s, v)) in seeds.iter().zip(&summary.values).enumerate() {
        w.write_record([i.to_string(), s.to_string(), v.to_string()])?;
    }
    w.flush()?;
    let ci = summary.ci95.map_or_else(|| "NA".to_string(), |c| format!("{c:.5}"));
    println!("{metric}: {:.5} +/- {ci} over {episodes} episodes", summary.mean);
    Ok(summary)
}

/// Posterior predictive curves for `n_tasks` fresh tasks.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    cfg: &RunConfig,
    checkpoint: &Path,
    window: Option<(f64, f64)>,
    n_samples: usize,
    scale: f64,
    n_tasks: usize,
    output: &Path,
) -> Result<()> {
    cfg.validate()?;
    let TaskDist::Sinusoid(mut dist) = cfg.task_dist() else {
        return Err(Error::Config("sample needs task.kind = sinusoid".into()).into());
    };
    if window.is_some() {
        dist.input_window = window;
    }
    let params = load_params(cfg, checkpoint)?;
    let spec = cfg.spec();
    let grid = linspace(dist.input_range.0, dist.input_range.1, cfg.sample_grid_points);
    let dist = TaskDist::Sinusoid(dist);
    let mut draws = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks as u64 {
        let seed = derive_seed(cfg.seed, &[SAMPLE_STREAM, t]);
        let task = dist.sample_seeded(seed)?;
        let mut rng = rng_for(cfg.seed, &[DRAW_STREAM, t]);
        draws.push(sample_predictive(
            &spec,
            &params,
            &task,
            &cfg.laplace,
            cfg.sample_prior,
            &grid,
            n_samples,
            scale,
            &mut rng,
            seed,
            false,
        )?);
    }
    write_predictions_csv(create(output)?, &draws)?;
    for d in &draws {
        println!(
            "task {}: mean predictive sd {:.4}",
            d.task_id,
            d.mean_std_over(f64::NEG_INFINITY, f64::INFINITY)
        );
    }
    Ok(())
}

/// One row of `oracle_report.csv`.
pub struct OracleRow {
    pub seed: u64,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub alpha: f64,
    pub max_abs_err: f64,
}

/// Random linear problem within the contraction region.
pub fn oracle_problem(seed: u64, max_dim: usize, max_k: usize) -> Result<QuadProblem> {
    let mut rng = rng_for(seed, &[]);
    let d = rng.random_range(1..=max_dim);
    let n = rng.random_range(1..=32);
    let k = rng.random_range(1..=max_k);
    let x = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let lmax = sym_eig(&x.matmul_tn(&x))?.values[d - 1].max(1e-6);
    Ok(QuadProblem {
        y: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        theta0: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        alpha: rng.random_range(0.05..0.95) / lmax,
        k,
        precond: None,
        x,
    })
}

/// Compares gradient descent with the MAP estimate under the induced prior.
pub fn verify_oracle(
    max_dim: usize,
    max_k: usize,
    problems: usize,
    seed: u64,
    output: &Path,
) -> Result<Vec<OracleRow>> {
    if max_dim == 0 || max_k == 0 || problems == 0 {
        return Err(Error::Config("--max-dim, --max-k and --problems must be at least 1".into()).into());
    }
    let mut w = csv::Writer::from_writer(create(output)?);
    w.write_record(["seed", "d", "n", "k", "alpha", "max_abs_err"])?;
    let mut rows = Vec::with_capacity(problems);
    for i in 0..problems as u64 {
        let s = derive_seed(seed, &[i]);
        let p = oracle_problem(s, max_dim, max_k)?;
        let gd = gd_iterate(&p)?;
        let map = map_estimate(&p.x, &p.y, &induced_q(&p)?)?;
        let row = OracleRow {
            seed: s,
            d: p.dim(),
            n: p.x.rows(),
            k: p.k,
            alpha: p.alpha,
            max_abs_err: max_abs_error(&gd, &map),
        };
        w.write_record([
            row.seed.to_string(),
            row.d.to_string(),
            row.n.to_string(),
            row.k.to_string(),
            row.alpha.to_string(),
            format!("{:e}", row.max_abs_err),
        ])?;
        rows.push(row);
    }
    w.flush()?;
    Ok(rows)
}
