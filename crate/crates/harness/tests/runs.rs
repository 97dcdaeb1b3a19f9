use std::path::{Path, PathBuf};
use std::process::Command;

use mlhf_harness::checkpoint::Checkpoint;
use mlhf_harness::config::ExperimentConfig;
use mlhf_harness::experiments::{ablate, meta_train, train, Workspace};
use mlhf_harness::metrics::Table;
use mlhf_harness::plot::{emit_plots, PlotSpec, XAxis};
use mlhf_harness::HarnessError;

fn small(extra: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = [
        "data.points_per_class=120",
        "train.steps=60",
        "train.b_tr=32",
        "train.b_mt=16",
        "train.b_bl=32",
        "train.eval_every=20",
        "meta.iterations=6",
        "meta.t=3",
        "meta.windows_per_episode=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::default_spirals(&o).unwrap()
}

fn without_wall_time(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(2);
            f.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn sgdm_smoke_run_lowers_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(small(&[])).unwrap();
    let before = ws.split_loss(&ws.objective.initial_point()).unwrap();
    let s = train(&ws, &dir.path().join("sgdm.csv")).unwrap();
    assert!(s.final_loss < before, "{} -> {}", before, s.final_loss);
    let t = Table::read(&s.csv).unwrap();
    assert_eq!(t.rows.len(), 60);
    let samples = t.column("samples_seen").unwrap();
    for (k, v) in samples.iter().enumerate() {
        assert_eq!(*v, Some((k * 32) as f64));
    }
    let acc = t.column("test_accuracy").unwrap();
    assert_eq!(acc.iter().filter(|a| a.is_some()).count(), 4);
    assert!(t.column("l_p").unwrap().iter().all(Option::is_none));
}

#[test]
fn every_optimizer_runs() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["sgdm", "adam", "rmsprop", "hf_fixed", "hf_lm", "mlhf"] {
        let mut cfg = small(&["train.steps=10"]);
        cfg.optimizer = mlhf_harness::config::OptimizerConfig::default_for(name).unwrap();
        let s = train(&Workspace::new(cfg).unwrap(), &dir.path().join(format!("{name}.csv"))).unwrap();
        assert!(s.final_loss.is_finite(), "{name}");
    }
}

#[test]
fn same_config_and_seed_give_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&["optimizer={ name = \"mlhf\" }"]);
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    train(&Workspace::new(cfg.clone()).unwrap(), &a).unwrap();
    train(&Workspace::new(cfg.clone()).unwrap(), &b).unwrap();
    assert_eq!(without_wall_time(&a), without_wall_time(&b));

    let (c, d) = (dir.path().join("c.csv"), dir.path().join("d.csv"));
    let ws = Workspace::new(cfg).unwrap();
    let first = meta_train(&ws, &c, &dir.path().join("c.ckpt")).unwrap();
    let second = meta_train(&ws, &d, &dir.path().join("d.ckpt")).unwrap();
    assert_eq!(without_wall_time(&c), without_wall_time(&d));
    assert_eq!(std::fs::read(&first.checkpoint).unwrap(), std::fs::read(&second.checkpoint).unwrap());
}

#[test]
fn meta_training_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(small(&["meta.checkpoint_every=2"])).unwrap();
    let s = meta_train(&ws, &dir.path().join("m.csv"), &dir.path().join("m.ckpt")).unwrap();
    assert_eq!(s.records.len(), 6);
    let bank = Checkpoint::load(&s.checkpoint).unwrap().to_bank().unwrap();
    for (a, b) in s.bank.precond.flatten().iter().zip(bank.precond.flatten()) {
        assert_eq!((*a as f32).to_bits(), (b as f32).to_bits());
    }
    let t = Table::read(&s.csv).unwrap();
    assert!(t.column("l_p").unwrap().iter().all(Option::is_some));
    assert!(t.column("l_s_avg").unwrap().iter().all(Option::is_some));
}

#[test]
fn ablation_writes_four_metric_files_and_plots_them() {
    let dir = tempfile::tempdir().unwrap();
    let runs = ablate(&small(&["meta.iterations=3"]), dir.path()).unwrap();
    assert_eq!(runs.len(), 4);
    let csvs: Vec<PathBuf> = runs.iter().map(|r| r.csv.clone()).collect();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| {
            let n = e.unwrap().file_name().into_string().unwrap();
            n.ends_with(".csv").then_some(n)
        })
        .collect();
    names.sort();
    assert_eq!(names, ["ablation_config1.csv", "ablation_config2.csv", "ablation_config3.csv", "ablation_config4.csv"]);

    let spec = PlotSpec { metrics: vec!["l_p".into()], log_wall_time: false, out_dir: dir.path().join("plots") };
    let out = emit_plots(&csvs, &spec).unwrap();
    assert_eq!(out.charts.len(), 2);
    assert!(out.charts.iter().all(|c| c.series == 4));
    let svg = std::fs::read_to_string(&out.charts[0].path).unwrap();
    for k in 1..=4 {
        assert!(svg.contains(&format!("ablation_config{k}")));
    }
}

#[test]
fn plot_cardinality_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(small(&["train.steps=5"])).unwrap();
    let csv = train(&ws, &dir.path().join("run.csv")).unwrap().csv;
    let spec = |m: &[&str], log| PlotSpec { metrics: m.iter().map(|s| s.to_string()).collect(), log_wall_time: log, out_dir: dir.path().join("p") };

    let one = emit_plots(&[csv.clone()], &spec(&["train_loss"], true)).unwrap();
    assert_eq!(one.charts.len(), 2);
    assert_eq!(one.charts.iter().map(|c| c.axis).collect::<Vec<_>>(), XAxis::ALL);
    assert!(one.charts.iter().all(|c| c.path.exists() && c.series == 1));

    let skipped = emit_plots(&[csv.clone()], &spec(&["train_loss", "no_such_metric"], false)).unwrap();
    assert_eq!(skipped.charts.len(), 2);
    assert_eq!(skipped.skipped, ["no_such_metric"]);

    assert!(matches!(emit_plots(&[], &spec(&["train_loss"], false)), Err(HarnessError::Plot(_))));
}

#[test]
fn model_and_data_must_agree() {
    let cfg = small(&["model.widths=[3, 4, 3]"]);
    assert!(matches!(Workspace::new(cfg), Err(HarnessError::Config(_))));
    let cfg = small(&["model.widths=[2, 4, 5]"]);
    assert!(matches!(Workspace::new(cfg), Err(HarnessError::Config(_))));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mlhf")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let base = ["--out", out, "--override", "data.points_per_class=60", "--override", "train.b_tr=32", "--override", "train.b_bl=32"];

    let ok = cli(&[&["train", "--steps", "5", "--seed", "2"][..], &base].concat());
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("train_sgdm.csv").exists());
    assert!(dir.path().join("config.toml").exists());

    let bad = cli(&["train", "--override", "train.b_tr=0"]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(cli(&["train", "--optimizer", "kfac"]).status.code(), Some(2));
    assert_eq!(cli(&["train", "--config", "/nonexistent.toml"]).status.code(), Some(2));

    let boom = cli(&[&["train", "--steps", "20", "--override", "optimizer.lr=1e306"][..], &base].concat());
    assert_eq!(boom.status.code(), Some(1), "{}", String::from_utf8_lossy(&boom.stderr));
    let partial = Table::read(&dir.path().join("train_sgdm.csv")).unwrap();
    assert!(!partial.rows.is_empty() && partial.rows.len() < 20);

    let meta = cli(&[&["meta-train", "--steps", "2", "--override", "meta.t=2", "--override", "train.b_mt=16"][..], &base].concat());
    assert_eq!(meta.status.code(), Some(0), "{}", String::from_utf8_lossy(&meta.stderr));
    let ck = dir.path().join("controllers.ckpt");
    let inspect = cli(&["inspect-checkpoint", ck.to_str().unwrap()]);
    assert_eq!(inspect.status.code(), Some(0));
    let text = String::from_utf8_lossy(&inspect.stdout);
    assert!(text.starts_with("mlhf-checkpoint 1") && text.contains("checksum ok"));

    let plot_dir = dir.path().join("plots");
    let plot = cli(&["plot", dir.path().join("meta_train.csv").to_str().unwrap(), "--metric", "l_p", "--log-time", "--out", plot_dir.to_str().unwrap()]);
    assert_eq!(plot.status.code(), Some(0));
    assert!(plot_dir.join("l_p_vs_wall_time.svg").exists());
    assert_eq!(cli(&["plot"]).status.code(), Some(2));
}
