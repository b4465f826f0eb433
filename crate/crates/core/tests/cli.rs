use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use smc_da::csvio::read_table;
use smc_da::pipeline::{RunManifest, SampleReport};

const SMALL: &str = "\
n_window = 30
t_pred = 100
beta_max = 8
n_inits = 3
max_iterations = 300
walkers = 2
burn_in = 100
steps = 400
thin = 80
";

fn smc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smc-da")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = smc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn config_file(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn generate_default_window_shape_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["generate", "--out", a.to_str().unwrap()]);
    ok(&["generate", "--out", b.to_str().unwrap()]);
    let obs = read_table(&a.join("observations.csv")).unwrap();
    assert_eq!(obs.rows.len(), 166);
    assert_eq!(obs.header.len(), 8);
    assert_eq!(fs::read(a.join("truth.csv")).unwrap(), fs::read(b.join("truth.csv")).unwrap());

    let text = fs::read_to_string(a.join("truth.csv")).unwrap();
    assert!(!text.contains('\r'));
    let field = text.lines().nth(1).unwrap().split(',').nth(1).unwrap();
    let mantissa = field.trim_start_matches('-').split('e').next().unwrap();
    assert_eq!(mantissa.len(), 18, "{field}");
}

#[test]
fn seed_override_changes_data() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["generate", "--out", a.to_str().unwrap()]);
    ok(&["generate", "--out", b.to_str().unwrap(), "--seed", "99"]);
    assert_ne!(fs::read(a.join("truth.csv")).unwrap(), fs::read(b.join("truth.csv")).unwrap());
    let m = RunManifest::load(&b).unwrap();
    assert_eq!(m.config.seed, 99);
}

#[test]
fn invalid_config_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_file(tmp.path(), "n_measured = 12\n");
    let out_dir = tmp.path().join("out");
    let out = smc(&["generate", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!out_dir.exists());

    let cfg = config_file(tmp.path(), "walkrs = 3\n");
    let out = smc(&["generate", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("walkrs"));
    assert!(!out_dir.exists());
}

#[test]
fn sample_without_anneal_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    ok(&["generate", "--out", out]);
    let res = smc(&["sample", "--out", out]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("best_path"));
}

#[test]
fn small_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_file(tmp.path(), SMALL);
    let dir = tmp.path().join("run");
    let out = dir.to_str().unwrap();
    for stage in ["generate", "anneal", "sample", "report"] {
        ok(&[stage, "--config", &cfg, "--out", out]);
    }
    let manifest = RunManifest::load(&dir).unwrap();
    for file in manifest.artifacts.values() {
        assert!(dir.join(file).exists(), "{file}");
    }

    let levels = read_table(&dir.join("action_levels.csv")).unwrap();
    assert_eq!(levels.rows.len(), 9 * 3);
    assert_eq!(levels.header, ["beta", "log10_rf_over_rm", "init_id", "action_total", "action_meas", "action_model"]);
    let g = manifest.derived.best_cell.unwrap().g;
    assert!((5.0..=15.0).contains(&g), "{g}");

    let chain = read_table(&dir.join("chain.csv")).unwrap();
    assert_eq!(chain.header, ["walker", "step", "weight", "G"]);
    assert_eq!(chain.rows.len(), 2 * (400 / 80));

    let report = SampleReport::load(&dir.join("report.json")).unwrap();
    assert!(report.histogram.mean.is_finite());
    assert!((0.0..=1.0).contains(&report.acceptance_rate));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    for key in ["param_index", "bin_edges", "mass", "mean", "rms", "n_samples", "total_weight", "acceptance_rate"] {
        assert!(json.get(key).is_some(), "{key}");
    }

    let hist = read_table(&dir.join("fig4_histogram.csv")).unwrap();
    let total: f64 = hist.rows.iter().map(|r| r[2]).sum();
    assert!((total - 1.0).abs() <= 1e-12, "{total}");

    let overlay = read_table(&dir.join("fig3_prediction_x0.csv")).unwrap();
    assert_eq!(overlay.header, ["t", "y", "x_est", "x_pred"]);
    assert_eq!(overlay.rows.len(), 31 + 100);
    assert!(overlay.rows[130][3].is_finite());

    // Report regeneration is idempotent.
    let before: Vec<Vec<u8>> = ["fig2_action_levels.csv", "fig3_prediction_x5.csv", "fig4_histogram.csv"]
        .iter()
        .map(|f| fs::read(dir.join(f)).unwrap())
        .collect();
    ok(&["report", "--config", &cfg, "--out", out]);
    for (f, b) in ["fig2_action_levels.csv", "fig3_prediction_x5.csv", "fig4_histogram.csv"].iter().zip(&before) {
        assert_eq!(&fs::read(dir.join(f)).unwrap(), b, "{f}");
    }

    // Re-running the anneal stage from the manifest reproduces the scores.
    let scores = fs::read(dir.join("scores.csv")).unwrap();
    ok(&["anneal", "--config", &cfg, "--out", out]);
    assert_eq!(fs::read(dir.join("scores.csv")).unwrap(), scores);
}
