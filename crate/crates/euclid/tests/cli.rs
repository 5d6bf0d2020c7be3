//! End-to-end tests of the command-line binary: exit codes, determinism,
//! and the plot emission pipeline, all through real process invocations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_euclid"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Minutes would be overkill; this config finishes each phase in well under
/// a second.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(
        &path,
        "env = twomode\n\
         task = mode_a\n\
         latent_dim = 4\n\
         hidden = 8\n\
         num_heads = 2\n\
         rollout_horizon = 2\n\
         batch_size = 8\n\
         pt_steps = 60\n\
         ft_steps = 620\n\
         seed_steps = 600\n\
         buffer_capacity = 10000\n\
         plan_population = 8\n\
         plan_elites = 3\n\
         plan_iterations = 2\n\
         plan_horizon = 2\n\
         metrics_every = 20\n\
         eval_episodes = 2\n",
    )
    .unwrap();
    path
}

const HEADER: &str = "phase,step,task,return,loss_reward,loss_consistency,loss_value,loss_actor,intrinsic_mean,selected_head,wall_ms";

#[test]
fn pretrain_twice_is_byte_identical() {
    let dir = tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let r = run(&[
            "pretrain",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(r.status.code(), Some(0), "{}", stderr_of(&r));
    }
    let metrics_a = std::fs::read(out_a.join("metrics.csv")).unwrap();
    let metrics_b = std::fs::read(out_b.join("metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_b);
    let ckpt_a = std::fs::read(out_a.join("pt.ckpt")).unwrap();
    let ckpt_b = std::fs::read(out_b.join("pt.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn finetune_without_checkpoint_is_usage_error() {
    let dir = tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let r = run(&["finetune", "--config", cfg.to_str().unwrap(), "--out", "x"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(stderr_of(&r).contains("--checkpoint"), "{}", stderr_of(&r));
}

#[test]
fn unknown_flag_is_usage_error() {
    let r = run(&["pretrain", "--bogus"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(stderr_of(&r).contains("--bogus"), "{}", stderr_of(&r));
}

#[test]
fn bad_set_overrides_name_the_token() {
    let dir = tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let base = ["pretrain", "--config", cfg.to_str().unwrap(), "--out", "x"];

    let mut args = base.to_vec();
    args.extend(["--set", "nonsense"]);
    let r = run(&args);
    assert_eq!(r.status.code(), Some(1));
    assert!(stderr_of(&r).contains("nonsense"), "{}", stderr_of(&r));

    let mut args = base.to_vec();
    args.extend(["--set", "plan_elites=zap"]);
    let r = run(&args);
    assert_eq!(r.status.code(), Some(1));
    let err = stderr_of(&r);
    assert!(err.contains("plan_elites") && err.contains("zap"), "{err}");

    let mut args = base.to_vec();
    args.extend(["--set", "no_such_key=1"]);
    let r = run(&args);
    assert_eq!(r.status.code(), Some(1));
    assert!(stderr_of(&r).contains("no_such_key"), "{}", stderr_of(&r));
}

#[test]
fn missing_config_file_is_usage_error() {
    let r = run(&["pretrain", "--config", "nowhere.cfg", "--out", "x"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(stderr_of(&r).contains("nowhere.cfg"), "{}", stderr_of(&r));
}

#[test]
fn missing_checkpoint_file_is_runtime_error() {
    let dir = tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let r = run(&[
        "finetune",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        "missing.ckpt",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2), "{}", stderr_of(&r));
}

#[test]
fn plot_rejects_foreign_headers() {
    let dir = tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "step,value\n1,2\n").unwrap();
    let r = run(&[
        "plot",
        "--metrics",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("p").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr_of(&r).contains("bad.csv"), "{}", stderr_of(&r));
}

/// Synthetic metrics file with one ft row per (step, return) pair.
fn write_metrics(path: &Path, task: &str, rows: &[(u64, f64)]) {
    let mut text = format!("{HEADER}\n");
    for (step, ret) in rows {
        text.push_str(&format!("ft,{step},{task},{ret},0,0,0,0,0,0,0\n"));
    }
    std::fs::write(path, text).unwrap();
}

fn read_curve(path: &Path) -> Vec<(u64, f64, f64, usize)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,mean,ci_half,runs"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn plot_aggregates_across_seeds_with_known_interval() {
    let dir = tempdir().unwrap();
    let mut args: Vec<String> = vec!["plot".into()];
    // Five seeds: constant 100 at step 0, the probe values at step 100.
    let probe = [1.0, 2.0, 3.0, 4.0, 5.0];
    let mut inputs = Vec::new();
    for (i, v) in probe.iter().enumerate() {
        let path = dir.path().join(format!("m{i}.csv"));
        write_metrics(&path, "reach_ne", &[(0, 100.0), (100, *v)]);
        args.push("--metrics".into());
        args.push(path.to_str().unwrap().into());
        inputs.push(path);
    }
    let plot_dir = dir.path().join("plots");
    args.push("--out".into());
    args.push(plot_dir.to_str().unwrap().into());
    let before: Vec<Vec<u8>> = inputs.iter().map(|p| std::fs::read(p).unwrap()).collect();

    let r = run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(r.status.code(), Some(0), "{}", stderr_of(&r));

    // Inputs untouched.
    for (path, bytes) in inputs.iter().zip(&before) {
        assert_eq!(&std::fs::read(path).unwrap(), bytes);
    }

    let curve = read_curve(&plot_dir.join("curve_reach_ne.csv"));
    assert_eq!(curve.len(), 2);
    // Constant across seeds: zero-width band.
    assert_eq!(curve[0], (0, 100.0, 0.0, 5));
    // Known-value probe: mean 3, sd sqrt(2.5), half-width 1.96 sd / sqrt(5).
    let (step, mean, ci, n) = curve[1];
    assert_eq!((step, n), (100, 5));
    assert!((mean - 3.0).abs() < 1e-12);
    let oracle = 1.96 * 2.5f64.sqrt() / 5f64.sqrt();
    assert!((ci - oracle).abs() < 1e-12, "ci {ci} vs oracle {oracle}");
    assert!(plot_dir.join("plot.py").exists());
}

#[test]
fn plot_single_seed_has_zero_width_band() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("m.csv");
    write_metrics(&input, "mode_a", &[(0, 10.0), (50, 20.0)]);
    let plot_dir = dir.path().join("plots");
    let r = run(&[
        "plot",
        "--metrics",
        input.to_str().unwrap(),
        "--out",
        plot_dir.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr_of(&r));
    let curve = read_curve(&plot_dir.join("curve_mode_a.csv"));
    assert_eq!(curve, vec![(0, 10.0, 0.0, 1), (50, 20.0, 0.0, 1)]);
}

/// Full pipeline through the binary, ending in a rendered figure when a
/// python with matplotlib is on PATH.
#[test]
fn pipeline_runs_and_plot_script_renders() {
    let dir = tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let pt_dir = dir.path().join("pt");
    let ft_dir = dir.path().join("ft");

    let r = run(&["pretrain", "--config", cfg, "--seed", "3", "--out", pt_dir.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr_of(&r));
    let ckpt = pt_dir.join("pt.ckpt");

    let r = run(&[
        "finetune",
        "--config",
        cfg,
        "--seed",
        "3",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        ft_dir.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr_of(&r));
    let stdout = String::from_utf8_lossy(&r.stdout).into_owned();
    assert!(stdout.contains("selected head"), "{stdout}");

    let sel_dir = dir.path().join("sel");
    let r = run(&[
        "select-head",
        "--config",
        cfg,
        "--seed",
        "3",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        sel_dir.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr_of(&r));
    let selection = std::fs::read_to_string(sel_dir.join("selection.csv")).unwrap();
    assert!(selection.starts_with("head,return\n0,"), "{selection}");
    assert_eq!(selection.lines().count(), 3, "header plus one row per head");

    let eval_dir = dir.path().join("eval");
    let r = run(&[
        "evaluate",
        "--config",
        cfg,
        "--seed",
        "3",
        "--checkpoint",
        ft_dir.join("ft.ckpt").to_str().unwrap(),
        "--episodes",
        "2",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr_of(&r));
    let eval = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 3, "header plus one row per episode");

    let plot_dir = dir.path().join("plots");
    let r = run(&[
        "plot",
        "--metrics",
        ft_dir.join("metrics.csv").to_str().unwrap(),
        "--out",
        plot_dir.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr_of(&r));
    assert!(plot_dir.join("curve_mode_a.csv").exists());

    // Render only when the toolchain is present; the data contract above is
    // what the Rust side owns.
    let have_matplotlib = Command::new("python3")
        .args(["-c", "import matplotlib"])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false);
    if !have_matplotlib {
        eprintln!("skipping render check: python3/matplotlib unavailable");
        return;
    }
    let r = Command::new("python3")
        .arg(plot_dir.join("plot.py"))
        .output()
        .expect("python3 should spawn");
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(plot_dir.join("curves.png").exists());
}
