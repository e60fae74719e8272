//! Config-driven runs: train, evaluate, probe, and write artifacts.
//!
//! Output layout under the run directory:
//!
//! ```text
//! config.json            resolved config
//! metrics.csv            one row per logged epoch
//! checkpoints/           params.tvm, basis.tvm, dictionary.tvm
//! reports/               conditions.json, trajectory.json, ood.json, summary.json
//! plots/                 four SVG panels (when enabled)
//! error.json             only when the run failed
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::concept_space::{ConceptBasis, Dictionary};
use crate::diagnostics::conditions::{check_theory_conditions, ConditionInputs, ConditionReport, DEFAULT_DELTA};
use crate::diagnostics::trajectory::{trajectory_assertions, TrajectoryReport, TrajectoryThresholds};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::ood::{self, OodContext, OodExperiment};
use crate::plots;
use crate::trainer::{self, LogRow, TrainConfig, TrainLog, TrainSetup};

pub const PARAMS_FILE: &str = "params.tvm";
pub const BASIS_FILE: &str = "basis.tvm";
pub const DICTIONARY_FILE: &str = "dictionary.tvm";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotToggles {
    #[serde(default = "yes")]
    pub enabled: bool,
}

impl Default for PlotToggles {
    fn default() -> Self {
        PlotToggles { enabled: true }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSettings {
    /// The constant the inequalities are scaled by.
    #[serde(default = "one")]
    pub c: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

impl Default for ConditionSettings {
    fn default() -> Self {
        ConditionSettings {
            c: 1.0,
            delta: DEFAULT_DELTA,
        }
    }
}

fn one() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    DEFAULT_DELTA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// Run directory; `--out` overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub plots: PlotToggles,
    /// Probes run after training. Absent means the standard suite; an
    /// empty list skips them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood: Option<Vec<OodExperiment>>,
    #[serde(default)]
    pub trajectory: TrajectoryThresholds,
    #[serde(default)]
    pub conditions: ConditionSettings,
}

impl ExperimentConfig {
    pub fn new(train: TrainConfig) -> Self {
        ExperimentConfig {
            train,
            output_dir: None,
            plots: PlotToggles::default(),
            ood: None,
            trajectory: TrajectoryThresholds::default(),
            conditions: ConditionSettings::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train.test_dists.is_empty() {
            return Err(Error::config("test_dists", "at least one test distribution is required"));
        }
        if !(self.conditions.c > 0.0) || !(self.conditions.delta > 0.0 && self.conditions.delta < 1.0) {
            return Err(Error::config("conditions", "need c > 0 and 0 < delta < 1"));
        }
        for exp in self.ood_suite() {
            if exp.name().is_empty() || exp.name().contains(['/', '\\']) {
                return Err(Error::config("ood", format!("bad experiment name `{}`", exp.name())));
            }
        }
        let names: Vec<&str> = self.ood.iter().flatten().map(|e| e.name()).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::config("ood", format!("experiment name `{n}` used twice")));
            }
        }
        Ok(())
    }

    pub fn ood_suite(&self) -> Vec<OodExperiment> {
        match &self.ood {
            Some(list) => list.clone(),
            None => OodExperiment::standard_suite(self.train.num_tasks, self.train.icl_test_demos()),
        }
    }

    pub fn ood_context(&self) -> OodContext {
        let t = &self.train;
        OodContext {
            prefix_len: t.prefix_len,
            icl_demos: t.icl_test_demos(),
            qaicl_demos: t.qaicl_demos(),
            noise_sd: t.test_noise(),
            anchor: t.anchor,
            seed: t.seed,
        }
    }

    pub fn condition_inputs(&self) -> ConditionInputs {
        let t = &self.train;
        ConditionInputs {
            d: t.d,
            prefix_len: t.prefix_len,
            num_train: t.num_train,
            num_tasks: t.num_tasks,
            num_common: t.num_common,
            sigma0: t.sigma0,
            sigma1: t.sigma1,
            noise_sd: t.noise_sd,
            q_v: t.q_v,
            eta: t.eta,
        }
    }

    pub fn condition_report(&self) -> Result<ConditionReport> {
        check_theory_conditions(&self.condition_inputs(), self.conditions.c, self.conditions.delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub config: ExperimentConfig,
    pub conditions: ConditionReport,
}

/// Schema and invariant checks plus the condition report. Reads only.
pub fn validate_config(path: &Path) -> Result<ValidationReport> {
    let config = ExperimentConfig::load(path)?;
    config.validate()?;
    let conditions = config.condition_report()?;
    Ok(ValidationReport { config, conditions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs_logged: usize,
    pub updates: usize,
    pub stopped_early: bool,
    pub loss_increases: usize,
    pub final_row: Option<LogRow>,
    pub trajectory_passed: Option<bool>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub params: ModelParams,
    pub log: TrainLog,
    pub summary: RunSummary,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_metrics(log: &TrainLog, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    log.write_csv(std::io::BufWriter::new(file))
}

#[derive(Serialize)]
struct ErrorRecord {
    error: String,
    root: String,
    kind: &'static str,
}

/// Run a config file; `out` and `seed` override the file's values.
pub fn run(config_path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<RunOutput> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(s) = seed {
        config.train.seed = s;
    }
    let dir = match (out, &config.output_dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => o.clone(),
        (None, None) => return Err(Error::config("output_dir", "no output directory given")),
    };
    run_config(&config, &dir)
}

/// Run a parsed config into `dir`. On a runtime failure the partial
/// metrics, checkpoint and an `error.json` are left in place.
pub fn run_config(config: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    config.validate()?;
    create_dir(dir)?;
    let _ = fs::remove_file(dir.join("error.json"));
    let mut resolved = config.clone();
    resolved.output_dir = Some(dir.to_path_buf());
    write_json(&dir.join("config.json"), &resolved)?;

    let mut log = TrainLog::empty(config.train.num_tasks);
    let mut params: Option<ModelParams> = None;
    let result = trainer::with_threads(config.train.threads, || {
        execute(config, dir, &mut params, &mut log)
    })
    .and_then(|r| r);
    match result {
        Ok(summary) => Ok(RunOutput {
            dir: dir.to_path_buf(),
            params: params.expect("set on success"),
            log,
            summary,
        }),
        Err(e) => {
            let _ = write_metrics(&log, &dir.join("metrics.csv"));
            if let Some(p) = params.as_ref().filter(|p| p.is_finite()) {
                let ck = dir.join("checkpoints");
                if create_dir(&ck).is_ok() {
                    let _ = checkpoint::save_params(p, &ck.join(PARAMS_FILE));
                }
            }
            let record = ErrorRecord {
                error: e.to_string(),
                root: e.root().to_string(),
                kind: if is_config_error(&e) { "config" } else { "runtime" },
            };
            let _ = write_json(&dir.join("error.json"), &record);
            Err(e)
        }
    }
}

/// Whether the error stems from the config rather than the run.
pub fn is_config_error(e: &Error) -> bool {
    matches!(e.root(), Error::Config { .. } | Error::Schema(_))
}

fn execute(config: &ExperimentConfig, dir: &Path, params_out: &mut Option<ModelParams>, log: &mut TrainLog) -> Result<RunSummary> {
    let t = &config.train;
    let setup = TrainSetup::build(t)?;
    let ck = dir.join("checkpoints");
    create_dir(&ck)?;
    checkpoint::save_basis(&setup.basis, &ck.join(BASIS_FILE))?;
    checkpoint::save_dictionary(&setup.dict, &ck.join(DICTIONARY_FILE))?;

    let params = params_out.insert(model::init_params(t.d, t.sigma0, t.sigma1, t.seed)?);
    trainer::train_into(t, &setup, params, log)?;
    write_metrics(log, &dir.join("metrics.csv"))?;
    checkpoint::save_params(params, &ck.join(PARAMS_FILE))?;

    let reports = dir.join("reports");
    create_dir(&reports)?;
    write_json(&reports.join("conditions.json"), &config.condition_report()?)?;
    let trajectory = match trajectory_assertions(log, t.train_dist, &config.trajectory) {
        Ok(r) => Some(r),
        Err(Error::InsufficientLog(msg)) => {
            write_json(&reports.join("trajectory.json"), &serde_json::json!({ "skipped": msg }))?;
            None
        }
        Err(e) => return Err(e),
    };
    if let Some(r) = &trajectory {
        write_json(&reports.join("trajectory.json"), r)?;
    }
    let suite = config.ood_suite();
    if !suite.is_empty() {
        let ood = run_ood(params, &setup.basis, &setup.dict, &config.ood_context(), &suite)?;
        write_json(&reports.join("ood.json"), &ood)?;
    }
    let summary = RunSummary {
        epochs_logged: log.rows.len(),
        updates: log.updates,
        stopped_early: log.stopped_early,
        loss_increases: log.loss_increases.len(),
        final_row: log.last().cloned(),
        trajectory_passed: trajectory.as_ref().map(TrajectoryReport::all_passed),
    };
    write_json(&reports.join("summary.json"), &summary)?;

    if config.plots.enabled {
        plots::emit_plots(&dir.join("metrics.csv"), &dir.join("plots"))?;
    }
    Ok(summary)
}

/// Probe results keyed by experiment name.
pub fn run_ood(
    params: &ModelParams,
    basis: &ConceptBasis,
    dict: &Dictionary,
    ctx: &OodContext,
    suite: &[OodExperiment],
) -> Result<BTreeMap<String, serde_json::Value>> {
    suite
        .iter()
        .map(|exp| Ok((exp.name().to_string(), ood::run_experiment(params, basis, dict, ctx, exp)?)))
        .collect()
}

/// Re-run the probes against the checkpoints of a finished run.
pub fn ood_from_run(dir: &Path, config: &ExperimentConfig) -> Result<BTreeMap<String, serde_json::Value>> {
    let ck = dir.join("checkpoints");
    let params = checkpoint::load_params(&ck.join(PARAMS_FILE))?;
    let basis = checkpoint::load_basis(&ck.join(BASIS_FILE))?;
    let dict = checkpoint::load_dictionary(&ck.join(DICTIONARY_FILE))?;
    let suite = config.ood_suite();
    let report = trainer::with_threads(config.train.threads, || {
        run_ood(&params, &basis, &dict, &config.ood_context(), &suite)
    })??;
    let reports = dir.join("reports");
    create_dir(&reports)?;
    write_json(&reports.join("ood.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SampleKind;
    use crate::trainer::BatchMode;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::new(TrainConfig {
            d: 24,
            num_tasks: 2,
            num_common: 6,
            prefix_len: 3,
            num_demos: 2,
            test_num_demos: None,
            qaicl_num_demos: None,
            num_train: 8,
            sigma0: 1e-2,
            sigma1: 5e-2,
            noise_sd: 1e-2,
            test_noise_sd: None,
            anchor: 0.1,
            eta: 0.5,
            q_v: 0.5,
            lambda: 0.0,
            epochs: 12,
            epsilon: 0.0,
            early_stop: false,
            seed: 3,
            train_dist: SampleKind::Qa,
            test_dists: SampleKind::ALL.to_vec(),
            log_every: 2,
            batch: BatchMode::Full,
            eval_size: 20,
            probe_size: 10,
            threads: Some(2),
        });
        c.ood = Some(vec![
            OodExperiment::Arithmetic {
                name: "arith".into(),
                transfers: 20,
            },
            OodExperiment::DemoOnly {
                name: "demo".into(),
                prompts: 5,
                num_demos: 2,
            },
        ]);
        c
    }

    #[test]
    fn full_artifact_set() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_config(&tiny(), dir.path()).unwrap();
        for f in [
            "config.json",
            "metrics.csv",
            "checkpoints/params.tvm",
            "checkpoints/basis.tvm",
            "checkpoints/dictionary.tvm",
            "reports/conditions.json",
            "reports/trajectory.json",
            "reports/ood.json",
            "reports/summary.json",
            "plots/train_loss.svg",
            "plots/v_projections.svg",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(!dir.path().join("error.json").exists());
        assert_eq!(checkpoint::load_params(&dir.path().join("checkpoints/params.tvm")).unwrap(), out.params);
        let ood: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("reports/ood.json")).unwrap()).unwrap();
        assert!(ood["arith"]["accuracy_icl"].is_number());
        assert!(ood["demo"]["qa_demos_cos_task"].is_number());
    }

    #[test]
    fn zero_epochs_log_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.train.epochs = 0;
        c.plots.enabled = false;
        run_config(&c, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("0,"));
        assert!(!dir.path().join("plots").exists());
        let traj = fs::read_to_string(dir.path().join("reports/trajectory.json")).unwrap();
        assert!(traj.contains("skipped"));
    }

    #[test]
    fn resolved_config_reruns_identically() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_config(&tiny(), a.path()).unwrap();
        let resolved = ExperimentConfig::load(&a.path().join("config.json")).unwrap();
        let mut again = resolved.clone();
        again.train.threads = Some(1);
        run_config(&again, b.path()).unwrap();
        let read = |d: &Path| fs::read(d.join("metrics.csv")).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }

    #[test]
    fn runtime_failure_leaves_partial_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.train.eta = 1e300;
        c.train.q_v = 1.0;
        let err = run_config(&c, dir.path()).unwrap_err();
        assert!(!is_config_error(&err));
        let record: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("error.json")).unwrap()).unwrap();
        assert_eq!(record["kind"], "runtime");
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.lines().count() >= 2, "{csv}");
    }

    #[test]
    fn schema_errors_name_the_field() {
        let mut v = serde_json::to_value(tiny()).unwrap();
        v["train"].as_object_mut().unwrap().remove("eta");
        let e = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(e.to_string().contains("eta"), "{e}");
        assert!(is_config_error(&e));

        let mut c = tiny();
        c.train.q_v = -1.0;
        let e = c.validate().unwrap_err();
        assert!(matches!(&e, Error::Config { field, .. } if field == "q_v"), "{e}");

        let mut v = serde_json::to_value(tiny()).unwrap();
        v["plotz"] = serde_json::json!(true);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());

        let mut c = tiny();
        c.train.test_dists.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn validate_config_reads_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        write_json(&path, &tiny()).unwrap();
        let before: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        let report = validate_config(&path).unwrap();
        assert_eq!(report.config, tiny());
        assert!(!report.conditions.checks.is_empty());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), before.len());
    }

    #[test]
    fn ood_rerun_from_checkpoints_matches() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        run_config(&c, dir.path()).unwrap();
        let first = fs::read(dir.path().join("reports/ood.json")).unwrap();
        ood_from_run(dir.path(), &c).unwrap();
        assert_eq!(first, fs::read(dir.path().join("reports/ood.json")).unwrap());
    }
}
