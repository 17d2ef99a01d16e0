//! Run configuration: flat `section.key = value` text with `#` comments.
//!
//! Every key has a default and unknown keys are rejected. [`RunConfig::render`]
//! emits every key, so its output parses back to the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hbml::adapt::InnerLoopCfg;
use hbml::curvature::FisherKind;
use hbml::laplace::{CurvatureMode, LaplaceCfg};
use hbml::metatrain::{MetaCfg, MetaOptimizer, Subroutine};
use hbml::model::{Activation, MlpSpec};
use hbml::posterior::PosteriorPrior;
use hbml::tasks::{FewShotDist, SinusoidDist, TaskDist};
use hbml::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Sinusoid,
    FewShot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub log_wall_time: bool,

    pub task_kind: TaskKind,
    pub sinusoid: SinusoidDist,
    pub fewshot: FewShotDist,

    pub hidden: Vec<usize>,
    pub activation: Activation,

    pub laplace: LaplaceCfg,
    pub meta: MetaCfg,

    pub eval_episodes: usize,
    pub sample_n: usize,
    pub sample_scale: f64,
    pub sample_prior: PosteriorPrior,
    pub sample_grid_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            workers: 1,
            log_wall_time: false,
            task_kind: TaskKind::Sinusoid,
            sinusoid: SinusoidDist::default(),
            fewshot: FewShotDist::default(),
            hidden: vec![40, 40],
            activation: Activation::Tanh,
            laplace: LaplaceCfg::default(),
            meta: MetaCfg::default(),
            eval_episodes: 600,
            sample_n: 50,
            sample_scale: 1.0,
            sample_prior: PosteriorPrior::default(),
            sample_grid_points: 200,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, Error> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value '{value}' for key '{key}' (expected true or false)"
        ))),
    }
}

fn parse_enum<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T, Error> {
    value
        .parse()
        .map_err(|e: Error| Error::Config(format!("key '{key}': {e}")))
}

fn parse_window(key: &str, value: &str) -> Result<Option<(f64, f64)>, Error> {
    if value == "none" {
        return Ok(None);
    }
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok(Some((parse(key, a)?, parse(key, b)?))),
        _ => Err(Error::Config(format!(
            "invalid value '{value}' for key '{key}' (expected 'lo, hi' or 'none')"
        ))),
    }
}

impl RunConfig {
    /// Reads and applies a config file over the defaults.
    pub fn from_file(path: &Path) -> Result<Self, Error> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), Error> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'section.key = value'", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), Error> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), Error> {
        let l = &mut self.laplace;
        match key {
            "run.seed" => self.seed = parse(key, v)?,
            "run.output_dir" => self.output_dir = PathBuf::from(v),
            "run.workers" => self.workers = parse(key, v)?,
            "run.log_wall_time" => self.log_wall_time = parse_bool(key, v)?,

            "task.kind" => {
                self.task_kind = match v {
                    "sinusoid" => TaskKind::Sinusoid,
                    "fewshot" => TaskKind::FewShot,
                    _ => return Err(Error::Config(format!("key '{key}': unknown task kind '{v}'"))),
                }
            }
            "task.amplitude_min" => self.sinusoid.amplitude_range.0 = parse(key, v)?,
            "task.amplitude_max" => self.sinusoid.amplitude_range.1 = parse(key, v)?,
            "task.phase_min" => self.sinusoid.phase_range.0 = parse(key, v)?,
            "task.phase_max" => self.sinusoid.phase_range.1 = parse(key, v)?,
            "task.input_min" => self.sinusoid.input_range.0 = parse(key, v)?,
            "task.input_max" => self.sinusoid.input_range.1 = parse(key, v)?,
            "task.n_support" => self.sinusoid.n_support = parse(key, v)?,
            "task.n_query" => self.sinusoid.n_query = parse(key, v)?,
            "task.query_grid" => self.sinusoid.query_grid = parse_bool(key, v)?,
            "task.support_window" => self.sinusoid.input_window = parse_window(key, v)?,
            "task.way" => self.fewshot.way = parse(key, v)?,
            "task.shot" => self.fewshot.shot = parse(key, v)?,
            "task.query_per_class" => self.fewshot.query = parse(key, v)?,
            "task.dim" => self.fewshot.dim = parse(key, v)?,
            "task.separation" => self.fewshot.separation = parse(key, v)?,

            "model.hidden" => {
                self.hidden = v
                    .split(',')
                    .map(|s| parse::<usize>(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "model.activation" => self.activation = parse_enum(key, v)?,

            "inner.alpha" => l.inner.alpha = parse(key, v)?,
            "inner.steps" => l.inner.steps = parse(key, v)?,
            "inner.second_order" => l.inner.second_order = parse_bool(key, v)?,
            "inner.learn_precond" => l.inner.learn_precond = parse_bool(key, v)?,

            "laplace.tau" => l.tau = parse(key, v)?,
            "laplace.eta" => l.eta = parse(key, v)?,
            "laplace.curvature" => l.curvature = parse_enum::<CurvatureMode>(key, v)?,
            "laplace.fisher" => l.fisher = parse_enum::<FisherKind>(key, v)?,
            "laplace.detach_logdet" => l.detach_logdet = parse_bool(key, v)?,

            "meta.batch" => self.meta.meta_batch = parse(key, v)?,
            "meta.lr" => self.meta.meta_lr = parse(key, v)?,
            "meta.optimizer" => {
                self.meta.optimizer = match v {
                    "sgd" => MetaOptimizer::Sgd,
                    "adam" => match self.meta.optimizer {
                        MetaOptimizer::Adam { .. } => self.meta.optimizer,
                        MetaOptimizer::Sgd => MetaOptimizer::adam(),
                    },
                    _ => return Err(Error::Config(format!("key '{key}': unknown optimizer '{v}'"))),
                }
            }
            "meta.adam_beta1" | "meta.adam_beta2" | "meta.adam_eps" => {
                let x: f64 = parse(key, v)?;
                let MetaOptimizer::Adam { beta1, beta2, eps } = &mut self.meta.optimizer else {
                    return Err(Error::Config(format!(
                        "key '{key}' requires meta.optimizer = adam set before it"
                    )));
                };
                match key {
                    "meta.adam_beta1" => *beta1 = x,
                    "meta.adam_beta2" => *beta2 = x,
                    _ => *eps = x,
                }
            }
            "meta.iterations" => self.meta.iterations = parse(key, v)?,
            "meta.subroutine" => self.meta.subroutine = parse_enum::<Subroutine>(key, v)?,
            "meta.eval_every" => self.meta.eval_every = parse(key, v)?,
            "meta.eval_tasks" => self.meta.eval_tasks = parse(key, v)?,

            "eval.episodes" => self.eval_episodes = parse(key, v)?,
            "sample.n_samples" => self.sample_n = parse(key, v)?,
            "sample.scale" => self.sample_scale = parse(key, v)?,
            "sample.prior" => self.sample_prior = parse_enum::<PosteriorPrior>(key, v)?,
            "sample.grid_points" => self.sample_grid_points = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn task_dist(&self) -> TaskDist {
        match self.task_kind {
            TaskKind::Sinusoid => TaskDist::Sinusoid(self.sinusoid.clone()),
            TaskKind::FewShot => TaskDist::FewShot(self.fewshot.clone()),
        }
    }

    pub fn spec(&self) -> MlpSpec {
        let dist = self.task_dist();
        let mut layer_sizes = vec![dist.input_dim()];
        layer_sizes.extend(&self.hidden);
        layer_sizes.push(dist.output_dim());
        MlpSpec {
            layer_sizes,
            activation: self.activation,
            likelihood: dist.likelihood(),
        }
    }

    /// Meta-training settings with the run-level seed, workers and timing flag.
    pub fn meta_cfg(&self) -> MetaCfg {
        MetaCfg {
            seed: self.seed,
            workers: self.workers,
            log_wall_time: self.log_wall_time,
            ..self.meta.clone()
        }
    }

    /// Checks every section for consistency.
    pub fn validate(&self) -> Result<(), Error> {
        let as_config = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if self.hidden.contains(&0) {
            return Err(Error::Config("model.hidden widths must be positive".into()));
        }
        self.meta_cfg().validate().map_err(as_config)?;
        self.laplace.validate().map_err(as_config)?;
        self.task_dist().check_spec(&self.spec()).map_err(as_config)?;
        // a dry draw catches empty ranges and windows
        self.task_dist().sample_seeded(0).map_err(as_config)?;
        if self.eval_episodes == 0 || self.sample_n == 0 || self.sample_grid_points < 2 {
            return Err(Error::Config(
                "eval.episodes and sample.n_samples must be positive and sample.grid_points at least 2".into(),
            ));
        }
        if !(self.sample_scale >= 0.0 && self.sample_scale.is_finite()) {
            return Err(Error::Config("sample.scale must be non-negative".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a form [`RunConfig::apply_text`] accepts.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        let l = &self.laplace;
        let d = &self.sinusoid;
        let f = &self.fewshot;
        kv("run.seed", self.seed.to_string());
        kv("run.output_dir", self.output_dir.display().to_string());
        kv("run.workers", self.workers.to_string());
        kv("run.log_wall_time", self.log_wall_time.to_string());
        kv(
            "task.kind",
            match self.task_kind {
                TaskKind::Sinusoid => "sinusoid",
                TaskKind::FewShot => "fewshot",
            }
            .into(),
        );
        kv("task.amplitude_min", d.amplitude_range.0.to_string());
        kv("task.amplitude_max", d.amplitude_range.1.to_string());
        kv("task.phase_min", d.phase_range.0.to_string());
        kv("task.phase_max", d.phase_range.1.to_string());
        kv("task.input_min", d.input_range.0.to_string());
        kv("task.input_max", d.input_range.1.to_string());
        kv("task.n_support", d.n_support.to_string());
        kv("task.n_query", d.n_query.to_string());
        kv("task.query_grid", d.query_grid.to_string());
        kv(
            "task.support_window",
            d.input_window
                .map_or_else(|| "none".into(), |(a, b)| format!("{a}, {b}")),
        );
        kv("task.way", f.way.to_string());
        kv("task.shot", f.shot.to_string());
        kv("task.query_per_class", f.query.to_string());
        kv("task.dim", f.dim.to_string());
        kv("task.separation", f.separation.to_string());
        kv("model.hidden", join(&self.hidden));
        kv("model.activation", self.activation.to_string());
        kv("inner.alpha", l.inner.alpha.to_string());
        kv("inner.steps", l.inner.steps.to_string());
        kv("inner.second_order", l.inner.second_order.to_string());
        kv("inner.learn_precond", l.inner.learn_precond.to_string());
        kv("laplace.tau", l.tau.to_string());
        kv("laplace.eta", l.eta.to_string());
        kv("laplace.curvature", l.curvature.to_string());
        kv("laplace.fisher", l.fisher.to_string());
        kv("laplace.detach_logdet", l.detach_logdet.to_string());
        kv("meta.batch", self.meta.meta_batch.to_string());
        kv("meta.lr", self.meta.meta_lr.to_string());
        match self.meta.optimizer {
            MetaOptimizer::Sgd => kv("meta.optimizer", "sgd".into()),
            MetaOptimizer::Adam { beta1, beta2, eps } => {
                kv("meta.optimizer", "adam".into());
                kv("meta.adam_beta1", beta1.to_string());
                kv("meta.adam_beta2", beta2.to_string());
                kv("meta.adam_eps", eps.to_string());
            }
        }
        kv("meta.iterations", self.meta.iterations.to_string());
        kv("meta.subroutine", self.meta.subroutine.to_string());
        kv("meta.eval_every", self.meta.eval_every.to_string());
        kv("meta.eval_tasks", self.meta.eval_tasks.to_string());
        kv("eval.episodes", self.eval_episodes.to_string());
        kv("sample.n_samples", self.sample_n.to_string());
        kv("sample.scale", self.sample_scale.to_string());
        kv("sample.prior", self.sample_prior.to_string());
        kv("sample.grid_points", self.sample_grid_points.to_string());
        s
    }

    pub fn inner(&self) -> &InnerLoopCfg {
        &self.laplace.inner
    }
}
