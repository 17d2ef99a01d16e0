use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hbml_cli::config::RunConfig;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hbml-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn hbml(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hbml"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const QUICK: [&str; 8] = [
    "--set",
    "meta.iterations=20",
    "--set",
    "meta.eval_every=10",
    "--set",
    "meta.eval_tasks=5",
    "--set",
    "meta.batch=4",
];

fn quick_train(dir: &Path) -> PathBuf {
    let mut args = vec!["train", "--output-dir", "run"];
    args.extend(QUICK);
    let out = hbml(&args, dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join("run")
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = scratch("unknown");
    let out = hbml(&["train", "--set", "inner.alpah=0.1"], &dir);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("inner.alpah"));

    fs::write(
        dir.join("bad.cfg"),
        "# comment\nmeta.iterations = 5\nmeta.colour = red\n",
    )
    .unwrap();
    let out = hbml(&["train", "--config", "bad.cfg"], &dir);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("meta.colour"));
}

#[test]
fn invalid_value_is_a_config_error() {
    let dir = scratch("value");
    let out = hbml(&["train", "--set", "inner.steps=0"], &dir);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = hbml(&["train", "--set", "laplace.curvature=diagonal"], &dir);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("laplace.curvature"));
}

#[test]
fn missing_checkpoint_is_a_user_error() {
    let dir = scratch("missing");
    for cmd in ["adapt", "eval", "sample"] {
        let out = hbml(&[cmd, "--checkpoint", "nope/theta.ckpt"], &dir);
        assert_eq!(code(&out), 2, "{cmd}: {}", stderr(&out));
    }
}

#[test]
fn numeric_blowup_exits_with_three() {
    let dir = scratch("numeric");
    let out = hbml(
        &[
            "train",
            "--set",
            "inner.alpha=1e300",
            "--set",
            "meta.iterations=3",
            "--set",
            "meta.eval_every=0",
        ],
        &dir,
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn verify_oracle_writes_report() {
    let dir = scratch("oracle");
    let out = hbml(
        &["verify-oracle", "--max-dim", "8", "--max-k", "20", "--problems", "50"],
        &dir,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(dir.join("oracle_report.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("seed,d,n,k,alpha,max_abs_err"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 50);
    for r in rows {
        let err: f64 = r.rsplit(',').next().unwrap().parse().unwrap();
        assert!(err < 1e-8, "{r}");
    }
}

#[test]
fn train_then_adapt_eval_and_sample() {
    let dir = scratch("pipeline");
    let run = quick_train(&dir);
    for f in ["metrics.csv", "theta.ckpt", "run.meta"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("iteration,"));
    assert_eq!(metrics.lines().count(), 1 + 20 + 1);

    // run.meta parses back to the configuration that produced it
    let meta = fs::read_to_string(run.join("run.meta")).unwrap();
    assert!(meta.starts_with("# hbml "));
    let mut cfg = RunConfig::default();
    cfg.apply_text(&meta).unwrap();
    assert_eq!(cfg.meta.iterations, 20);
    assert_eq!(cfg.output_dir, PathBuf::from("run"));

    let ckpt = run.join("theta.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let out = hbml(&["adapt", "--checkpoint", ckpt, "--task-seed", "3"], &dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let preds = fs::read_to_string(dir.join("predictions.csv")).unwrap();
    assert!(preds.starts_with("task_id,set,x0,target,prediction\n"));
    assert_eq!(preds.lines().count(), 1 + 10 + 25);

    let out = hbml(&["eval", "--checkpoint", ckpt, "--episodes", "7"], &dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let eval = fs::read_to_string(dir.join("eval.csv")).unwrap();
    assert!(eval.starts_with("episode,task_seed,mse\n"));
    assert_eq!(eval.lines().count(), 8);

    let out = hbml(
        &[
            "sample",
            "--checkpoint",
            ckpt,
            "--window",
            "-10",
            "0",
            "--n-samples",
            "4",
            "--output",
            "s.csv",
        ],
        &dir,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let s = fs::read_to_string(dir.join("s.csv")).unwrap();
    assert!(s.starts_with("task_id,sample_id,x,y\n"));
    // support points lie in the window
    for line in s.lines().skip(1).filter(|l| l.split(',').nth(1) == Some("-3")) {
        let x: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((-10.0..=0.0).contains(&x));
    }
    // incompatible model shape in the checkpoint
    let out = hbml(&["eval", "--checkpoint", ckpt, "--set", "model.hidden=8"], &dir);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn adapt_reads_tasks_from_csv() {
    let dir = scratch("tasks");
    let run = quick_train(&dir);
    fs::write(
        dir.join("tasks.csv"),
        "task_id,set,x0,target\n7,support,0.5,1.0\n7,support,-1.0,0.2\n7,query,2.0,0.3\n",
    )
    .unwrap();
    let ckpt = run.join("theta.ckpt");
    let out = hbml(
        &["adapt", "--checkpoint", ckpt.to_str().unwrap(), "--tasks", "tasks.csv"],
        &dir,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let preds = fs::read_to_string(dir.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 4);
    assert!(preds.lines().nth(3).unwrap().starts_with("7,query,2,0.3,"));

    fs::write(
        dir.join("bad.csv"),
        "task_id,set,x0,x1,target\n7,support,0.5,1,1.0\n7,query,2.0,1,0.3\n",
    )
    .unwrap();
    let out = hbml(
        &["adapt", "--checkpoint", ckpt.to_str().unwrap(), "--tasks", "bad.csv"],
        &dir,
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}
