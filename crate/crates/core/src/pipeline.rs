//! On-disk orchestration of the four stages. Each stage reads only files
//! listed in `manifest.json`, writes its artifacts next to it and records
//! them there.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::action::{ActionConfig, Path};
use crate::anneal::{action_levels_csv, anneal, score_all, scores_csv, select_endpoints, CellRef};
use crate::config::RunConfig;
use crate::csvio::{read_table, CsvWriter};
use crate::error::{Error, Result};
use crate::sampler::{build_bias, marginalize, normalized_weights, run_ensemble, MarginalHistogram};
use crate::twin::{apply_noise, generate_truth, measured_indices, truth_csv, Observations};

pub const MANIFEST: &str = "manifest.json";

const ANNEAL: &[&str] = &["action_levels", "scores", "best_path", "worst_path"];
const SAMPLE: &[&str] = &["chain", "report"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub r_m: f64,
    /// Half-width of the uniform measurement noise.
    pub noise_amplitude: f64,
    pub measured_indices: Vec<usize>,
    pub r_f_star: Option<f64>,
    pub best_cell: Option<CellSummary>,
    pub worst_cell: Option<CellSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub beta: u32,
    pub init_id: usize,
    pub mse: f64,
    #[serde(rename = "G")]
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub derived: Derived,
    /// Artifact name to file name, relative to the manifest's directory.
    pub artifacts: BTreeMap<String, String>,
    /// Stage name to completion time in seconds since the Unix epoch.
    pub timestamps: BTreeMap<String, u64>,
    pub software_version: String,
}

impl RunManifest {
    fn new(config: &RunConfig) -> Result<Self> {
        Ok(RunManifest {
            config: config.clone(),
            derived: Derived {
                r_m: config.r_m(),
                noise_amplitude: config.noise().amplitude(),
                measured_indices: measured_indices(config.dim, config.n_measured)?,
                r_f_star: None,
                best_cell: None,
                worst_cell: None,
            },
            artifacts: BTreeMap::new(),
            timestamps: BTreeMap::new(),
            software_version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn load(dir: &FsPath) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        Ok(serde_json::from_str(&fs::read_to_string(&path)?)?)
    }

    fn save(&self, dir: &FsPath) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }

    /// Path of a listed artifact that exists on disk.
    pub fn artifact(&self, dir: &FsPath, name: &str) -> Result<PathBuf> {
        let file = self.artifacts.get(name).ok_or_else(|| Error::MissingArtifact(dir.join(name)))?;
        let path = dir.join(file);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        Ok(path)
    }

    fn forget(&mut self, names: &[&str]) {
        self.artifacts.retain(|k, _| !names.contains(&k.as_str()) && !k.starts_with("fig"));
    }

    fn record(&mut self, dir: &FsPath, name: &str, file: &str, csv: &CsvWriter) -> Result<()> {
        csv.save(&dir.join(file))?;
        self.artifacts.insert(name.to_string(), file.to_string());
        Ok(())
    }

    fn stamp(&mut self, stage: &str) {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        self.timestamps.insert(stage.to_string(), secs);
    }

    /// The generation-relevant part of the config must match the one the
    /// observations were produced with.
    fn check_data_config(&self, config: &RunConfig) -> Result<()> {
        let a = &self.config;
        let same = a.dim == config.dim
            && a.dt == config.dt
            && a.g_true == config.g_true
            && a.n_window == config.n_window
            && a.t_pred == config.t_pred
            && a.noise_fraction == config.noise_fraction
            && a.dynamic_range == config.dynamic_range
            && a.n_measured == config.n_measured
            && a.seed == config.seed;
        if same {
            Ok(())
        } else {
            Err(Error::Config("data settings differ from the manifest; rerun generate".into()))
        }
    }

    fn observations(&self, dir: &FsPath) -> Result<Observations> {
        Observations::read_csv(&self.artifact(dir, "observations")?, &self.artifact(dir, "continuation")?)
    }
}

/// Histogram plus the ensemble's acceptance rate, as written to report.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    #[serde(flatten)]
    pub histogram: MarginalHistogram,
    pub acceptance_rate: f64,
}

impl SampleReport {
    pub fn load(path: &FsPath) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn out_dir(config: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&config.output)?;
    Ok(config.output.clone())
}

/// Simulates the truth and writes the noisy window and continuation. Starts a
/// fresh manifest.
pub fn cmd_generate(config: &RunConfig) -> Result<RunManifest> {
    config.validate()?;
    let model = config.model()?;
    let mut manifest = RunManifest::new(config)?;
    let truth = generate_truth(&model, &[config.g_true], config.n_window, config.t_pred, config.seed)?;
    let obs = apply_noise(&truth, &manifest.derived.measured_indices, &config.noise(), config.n_window)?;
    let dir = out_dir(config)?;
    let (window, continuation) = obs.to_csv();
    manifest.record(&dir, "truth", "truth.csv", &truth_csv(&truth))?;
    manifest.record(&dir, "observations", "observations.csv", &window)?;
    manifest.record(&dir, "continuation", "continuation.csv", &continuation)?;
    manifest.stamp("generate");
    manifest.save(&dir)?;
    log::info!("generate: {} window rows, {} measured components", obs.n_times(), obs.n_measured());
    Ok(manifest)
}

fn summary(cell: &CellRef, path: &Path) -> CellSummary {
    CellSummary { beta: cell.beta, init_id: cell.init_id, mse: cell.mse, g: path.params()[0] }
}

/// Full annealing grid, prediction scores and the bias endpoints.
pub fn cmd_anneal(config: &RunConfig) -> Result<RunManifest> {
    config.validate()?;
    let dir = config.output.clone();
    let mut manifest = RunManifest::load(&dir)?;
    manifest.check_data_config(config)?;
    manifest.config = config.clone();
    let model = config.model()?;
    let obs = manifest.observations(&dir)?;
    let r_m = config.r_m();
    let base = ActionConfig::new(model, r_m, 0.0, Arc::new(obs.clone()))?;
    let schedule = config.schedule(r_m);
    let result = anneal(&base, &schedule, config.n_inits, &config.optimizer(), &config.init_ranges(), config.seed)?;
    if result.cells.iter().flatten().all(|c| !c.action.total.is_finite()) {
        return Err(Error::AllOptimizationsFailed);
    }
    let scores = score_all(&result, &model, &obs, config.t_pred)?;
    let endpoints = select_endpoints(&result, &scores)?;
    let best = &result.cell(endpoints.best.beta, endpoints.best.init_id).path;
    let worst = &result.cell(endpoints.worst.beta, endpoints.worst.init_id).path;

    manifest.forget(ANNEAL);
    manifest.forget(SAMPLE);
    manifest.record(&dir, "action_levels", "action_levels.csv", &action_levels_csv(&result, r_m))?;
    manifest.record(&dir, "scores", "scores.csv", &scores_csv(&scores))?;
    manifest.record(&dir, "best_path", "best_path.csv", &best.states_csv())?;
    manifest.record(&dir, "worst_path", "worst_path.csv", &worst.states_csv())?;
    manifest.derived.r_f_star = Some(endpoints.r_f_star);
    manifest.derived.best_cell = Some(summary(&endpoints.best, best));
    manifest.derived.worst_cell = Some(summary(&endpoints.worst, worst));
    manifest.stamp("anneal");
    manifest.save(&dir)?;
    log::info!(
        "anneal: best cell beta {} init {} (mse {:.4}), worst beta {} init {} (mse {:.4}), R_f* = {:.4e}",
        endpoints.best.beta,
        endpoints.best.init_id,
        endpoints.best.mse,
        endpoints.worst.beta,
        endpoints.worst.init_id,
        endpoints.worst.mse,
        endpoints.r_f_star
    );
    Ok(manifest)
}

fn endpoint_paths(manifest: &RunManifest, dir: &FsPath) -> Result<(Path, Path, f64)> {
    let missing = || Error::MissingArtifact(dir.join("best_path.csv"));
    let best_cell = manifest.derived.best_cell.ok_or_else(missing)?;
    let worst_cell = manifest.derived.worst_cell.ok_or_else(missing)?;
    let r_f_star = manifest.derived.r_f_star.ok_or_else(missing)?;
    let best = Path::read_csv(&manifest.artifact(dir, "best_path")?, vec![best_cell.g])?;
    let worst = Path::read_csv(&manifest.artifact(dir, "worst_path")?, vec![worst_cell.g])?;
    Ok((best, worst, r_f_star))
}

/// Runs the walker ensemble at `R_f*` and writes the chain and the marginal
/// of `G`.
pub fn cmd_sample(config: &RunConfig) -> Result<(RunManifest, SampleReport)> {
    config.validate()?;
    let dir = config.output.clone();
    let mut manifest = RunManifest::load(&dir)?;
    manifest.check_data_config(config)?;
    let (best, worst, r_f_star) = endpoint_paths(&manifest, &dir)?;
    let obs = manifest.observations(&dir)?;
    let target = ActionConfig::new(config.model()?, config.r_m(), r_f_star, Arc::new(obs))?;
    let bias = build_bias(&best, &worst)?;
    let run = config.run_settings();
    let out = run_ensemble(&target, &bias, &run, config.seed)?;
    let histogram = marginalize(&out.samples, 0)?;
    let report = SampleReport { histogram, acceptance_rate: out.acceptance_rate };

    let mut header = vec!["walker".to_string(), "step".into(), "weight".into(), "G".into()];
    if run.record_states {
        for t in 0..best.n_times() {
            for i in 0..best.dim() {
                header.push(format!("x_{i}_{t}"));
            }
        }
    }
    let mut chain = CsvWriter::new(&header);
    for (s, w) in out.samples.iter().zip(normalized_weights(&out.samples)?) {
        let mut reals = vec![w, s.path.params()[0]];
        reals.extend_from_slice(s.path.states());
        chain.row(&[s.walker_id as i64, s.step_index as i64], &reals);
    }

    manifest.config = config.clone();
    manifest.forget(SAMPLE);
    manifest.record(&dir, "chain", "chain.csv", &chain)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(dir.join("report.json"), text)?;
    manifest.artifacts.insert("report".into(), "report.json".into());
    manifest.stamp("sample");
    manifest.save(&dir)?;
    log::info!(
        "sample: G mean {:.5}, rms {:.5}, acceptance {:.3}",
        report.histogram.mean,
        report.histogram.rms,
        report.acceptance_rate
    );
    Ok((manifest, report))
}

/// Plot-ready exports: action levels, prediction overlays for every state
/// component, and the marginal histogram of `G`.
pub fn cmd_report(dir: &FsPath) -> Result<RunManifest> {
    let mut manifest = RunManifest::load(dir)?;
    let config = manifest.config.clone();
    let model = config.model()?;
    let obs = manifest.observations(dir)?;
    let levels = read_table(&manifest.artifact(dir, "action_levels")?)?;
    let report = SampleReport::load(&manifest.artifact(dir, "report")?)?;
    let (best, _, _) = endpoint_paths(&manifest, dir)?;

    let col = |name: &str| {
        levels.column(name).ok_or_else(|| Error::Parse {
            path: dir.join("action_levels.csv"),
            msg: format!("missing column {name}"),
        })
    };
    let (c_ratio, c_init, c_action) = (col("log10_rf_over_rm")?, col("init_id")?, col("action_total")?);
    let mut fig2 = CsvWriter::new(&["log10_rf_over_rm", "init_id", "action"]);
    for r in &levels.rows {
        fig2.raw_row(&[
            crate::csvio::fmt_real(r[c_ratio]),
            (r[c_init] as i64).to_string(),
            crate::csvio::fmt_real(r[c_action]),
        ]);
    }

    let n = best.n_times() - 1;
    let forecast = model.integrate_trajectory(best.state(n), best.params(), config.t_pred).ok();
    let mut figures = vec![("fig2_action_levels".to_string(), fig2)];
    for i in 0..model.dim {
        let m = obs.measured_indices.iter().position(|&j| j == i);
        let mut w = CsvWriter::new(&["t", "y", "x_est", "x_pred"]);
        for t in 0..=n + config.t_pred {
            let y = match m {
                Some(m) if t <= n => obs.row(t)[m],
                Some(m) => obs.continuation_row(t - n)[m],
                None => f64::NAN,
            };
            let x_est = if t <= n { best.state(t)[i] } else { f64::NAN };
            let x_pred = match &forecast {
                Some(f) if t >= n => f[t - n][i],
                Some(_) => f64::NAN,
                None => f64::INFINITY,
            };
            w.row(&[t as i64], &[y, x_est, x_pred]);
        }
        figures.push((format!("fig3_prediction_x{i}"), w));
    }

    let h = &report.histogram;
    let mut fig4 = CsvWriter::new(&["bin_lo", "bin_hi", "mass"]);
    for (k, m) in h.mass.iter().enumerate() {
        fig4.row(&[], &[h.bin_edges[k], h.bin_edges[k + 1], *m]);
    }
    figures.push(("fig4_histogram".to_string(), fig4));

    manifest.artifacts.retain(|k, _| !k.starts_with("fig"));
    for (name, csv) in &figures {
        manifest.record(dir, name, &format!("{name}.csv"), csv)?;
    }
    manifest.stamp("report");
    manifest.save(dir)?;
    Ok(manifest)
}
