use std::fs;
use std::path::Path;

use flatgrad::data::generate_two_moons;
use flatgrad::harness::metrics::{parse_metrics, METRICS_COLUMNS};
use flatgrad::harness::run::epoch_scale;
use flatgrad::harness::{
    emit_plots, final_window_accuracy, run_ablation_grid, run_experiment, AblationAxis, ExperimentConfig,
};
use flatgrad::Error;

fn config(dir: &Path, optimizer: &str, extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
            "dataset": {{"kind": "two_moons", "n": 240, "noise_std": 0.15}},
            "noise": {{"kind": "symmetric", "rate": 0.2}},
            "model": {{"hidden": [12]}},
            "optimizer": "{optimizer}",
            "optimizer_config": {{"learning_rate": 0.05, "warmup_epochs": 2}},
            "epochs": 8,
            "batch_size": 24,
            "output_dir": {:?}{extra}
        }}"#,
        dir.display().to_string()
    ))
    .unwrap()
}

#[test]
fn run_directory_contents() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        "ncsam",
        r#", "log_flips": true, "diagnostics": {"sharpness_trials": 3, "clean_twin": true}"#,
    );
    let run = run_experiment(&cfg, 2).unwrap();
    assert_eq!(run.dir, tmp.path().join("ncsam-seed2"));
    for f in [
        "config.json",
        "metrics.csv",
        "final_params.bin",
        "final_params.json",
        "timings.csv",
        "flips.csv",
        "sharpness.csv",
        "deviation.csv",
    ] {
        assert!(run.dir.join(f).is_file(), "{f} missing");
    }
    let text = fs::read_to_string(run.dir.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_COLUMNS.join(","));
    let rows = parse_metrics(&text).unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.wall_seconds == 0.0));
    for r in &rows[..2] {
        assert_eq!(r.mean_correction_norm, 0.0);
    }
    assert!(rows[7].schedule_scale > 0.0);

    // Flips start with the first post-warm-up epoch; 40% of 24 is 10 per batch.
    let flips = fs::read_to_string(run.dir.join("flips.csv")).unwrap();
    let first_epoch: usize = flips
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(first_epoch, 2);

    // 2·12 + 12 + 12·2 + 2 parameters, eight bytes each.
    let params = fs::read(run.dir.join("final_params.bin")).unwrap();
    assert_eq!(params.len(), 62 * 8);

    let echo = ExperimentConfig::from_json(&fs::read_to_string(run.dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo.seeds, vec![2]);
    assert_eq!(echo.optimizer_config, cfg.optimizer_config);

    let dev = fs::read_to_string(run.dir.join("deviation.csv")).unwrap();
    assert_eq!(dev.lines().count(), 9);
}

#[test]
fn sgd_and_degenerate_ncsam_share_loss_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let sgd = run_experiment(&config(tmp.path(), "sgd", ""), 3).unwrap();
    let mut nc_cfg = config(tmp.path(), "ncsam", "");
    nc_cfg.optimizer_config.sam_radius = 0.0;
    nc_cfg.optimizer_config.kappa = 0.0;
    let nc = run_experiment(&nc_cfg, 3).unwrap();
    for (a, b) in sgd.metrics.iter().zip(&nc.metrics) {
        assert!((a.train_loss - b.train_loss).abs() < 1e-9);
        assert_eq!(a.test_acc, b.test_acc);
    }
}

#[test]
fn schedule_column_follows_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), "ncsam", "");
    cfg.optimizer_config.kappa = 0.4;
    let progressive: Vec<f64> = (0..8).map(|t| epoch_scale(&cfg, t)).collect();
    assert_eq!(&progressive[..3], &[0.0, 0.0, 0.0]);
    assert_eq!(progressive[7], 0.4);
    cfg.schedule_mode = flatgrad::optim::ScheduleMode::ConstantScale;
    let constant: Vec<f64> = (0..8).map(|t| epoch_scale(&cfg, t)).collect();
    assert_eq!(constant, vec![0.0, 0.0, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4]);
    cfg.optimizer = flatgrad::optim::OptimizerKind::Sam;
    assert!((0..8).all(|t| epoch_scale(&cfg, t) == 0.0));
}

#[test]
fn single_value_ablation_equals_its_run() {
    let tmp = tempfile::tempdir().unwrap();
    let base = config(tmp.path(), "ncsam", "");
    let summary = run_ablation_grid(&base, AblationAxis::FlipRatio, &["0.25".into()]).unwrap();
    assert_eq!(summary.rows.len(), 1);
    assert_eq!(summary.rows[0].mean, final_window_accuracy(&summary.runs[0].metrics));
    assert_eq!(summary.rows[0].std, 0.0);
    let text = fs::read_to_string(&summary.summary_path).unwrap();
    assert_eq!(text.lines().nth(1).unwrap().split(',').next().unwrap(), "0.25");

    let six: Vec<String> = ["0.2", "0.3", "0.4", "0.5", "0.6", "0.7"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut short = base.clone();
    short.epochs = 3;
    short.optimizer_config.warmup_epochs = Some(1);
    let s = run_ablation_grid(&short, AblationAxis::FlipRatio, &six).unwrap();
    assert_eq!(fs::read_to_string(&s.summary_path).unwrap().lines().count(), 7);

    assert!(run_ablation_grid(&base, AblationAxis::Kappa, &[]).is_err());
    assert!(matches!(
        run_ablation_grid(&base, AblationAxis::ScheduleMode, &["linear".into()]),
        Err(Error::Config(_))
    ));
    let sgd = config(tmp.path(), "sgd", "");
    assert!(run_ablation_grid(&sgd, AblationAxis::Kappa, &["0.1".into()]).is_err());
}

#[test]
fn plots_compare_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_experiment(&config(tmp.path(), "sgd", ""), 0).unwrap();
    let b = run_experiment(&config(tmp.path(), "ncsam", ""), 0).unwrap();
    let out = tmp.path().join("plots");
    let written = emit_plots(&[a.dir.clone(), b.dir.clone()], &out).unwrap();
    assert_eq!(written.len(), 3);
    for name in ["test_acc.svg", "schedule_scale.svg", "cos_theta.svg"] {
        let svg = fs::read_to_string(out.join(name)).unwrap();
        assert!(svg.contains(">sgd-seed0<") && svg.contains(">ncsam-seed0<"), "{name}");
        assert_eq!(svg.matches(r#"data-points="8""#).count(), 2);
    }
    assert_eq!(fs::read_dir(&out).unwrap().count(), 3);
}

#[test]
fn empty_metrics_write_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join("metrics.csv"), METRICS_COLUMNS.join(",") + "\n").unwrap();
    let out = tmp.path().join("plots");
    assert!(emit_plots(std::slice::from_ref(&run), &out).is_err());
    assert!(!out.exists());
    assert!(emit_plots(&[tmp.path().join("missing")], &out).is_err());
}

#[test]
fn config_errors_surface_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), "sgd", "");
    cfg.batch_size = 10_000;
    assert!(matches!(run_experiment(&cfg, 0), Err(Error::Config(_))));
    assert!(!tmp.path().join("sgd-seed0").exists());
    let missing = ExperimentConfig::from_json(
        r#"{"dataset": {"kind": "idx_files", "train_images": "/nonexistent/a", "train_labels": "/nonexistent/b"},
            "model": {"hidden": [4]}, "optimizer": "sgd", "epochs": 1, "batch_size": 1, "output_dir": "o"}"#,
    );
    assert!(matches!(missing, Err(Error::Config(_))));
}

#[test]
fn idx_dataset_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let (x, y) = generate_two_moons(60, 0.1, 1).unwrap();
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 60, 0, 0, 0, 1, 0, 0, 0, 2];
    img.extend(
        x.data()
            .iter()
            .map(|v| ((v + 1.5) / 4.0 * 255.0).clamp(0.0, 255.0) as u8),
    );
    let mut lab = vec![0, 0, 8, 1, 0, 0, 0, 60];
    lab.extend(y.iter().map(|&c| c as u8));
    fs::write(tmp.path().join("img"), img).unwrap();
    fs::write(tmp.path().join("lab"), lab).unwrap();
    let cfg = ExperimentConfig::from_json(&format!(
        r#"{{"dataset": {{"kind": "idx_files", "train_images": {:?}, "train_labels": {:?}, "limit": 50}},
            "model": {{"hidden": [8]}}, "optimizer": "sam", "epochs": 2, "batch_size": 8, "output_dir": {:?}}}"#,
        tmp.path().join("img").display().to_string(),
        tmp.path().join("lab").display().to_string(),
        tmp.path().join("out").display().to_string(),
    ))
    .unwrap();
    let run = run_experiment(&cfg, 0).unwrap();
    assert_eq!(run.metrics.len(), 2);
}
