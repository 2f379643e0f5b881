//! Experiment runner behind the `causalrec` binary: TOML experiment
//! configs with flag overrides, plus the `generate`, `train`, `eval`,
//! `bench`, and `verify` commands as library functions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    generate_dataset, read_dataset, task_names, write_dataset, GeneratorConfig, UserSequence,
};
use crate::models::{
    load_checkpoint, save_checkpoint, Architecture, Model, ModelConfig, ModelError,
};
use crate::training::{
    append_history, benchmark, deterministic_report, evaluate, render_comparison_table, train,
    MetricsReport, TrainConfig, TrainError,
};
use crate::verify::{self, Corruption};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error in {path}: {message}")]
    ConfigFile { path: String, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    #[default]
    #[serde(rename = "table-text")]
    TableText,
    #[serde(rename = "structured")]
    Structured,
}

fn default_bench_architectures() -> Vec<Architecture> {
    vec![
        Architecture::InterleavedBaseline,
        Architecture::AttnLfa,
        Architecture::AttnMvp,
        Architecture::AttnMvpNoLfa,
    ]
}

/// Whole-experiment configuration: generator, one model (the architecture
/// list for benchmarks reuses its hyperparameters), trainer, and outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    /// Architectures compared by `bench`; entry 0 is the reference row.
    #[serde(default = "default_bench_architectures")]
    pub bench_architectures: Vec<Architecture>,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub report_format: ReportFormat,
    /// Dataset file; defaults to `<output_dir>/dataset.jsonl`.
    #[serde(default)]
    pub dataset_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| CliError::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Built-in preset encoding the two-user dog/cat fixture: user 0 likes
    /// category 0 and dislikes category 1, user 1 is the mirror image, and
    /// labels are noise-free.
    pub fn fig3() -> Self {
        let generator = GeneratorConfig {
            n_users: 2,
            n_categories: 2,
            items_per_category: 4,
            seq_len: 12,
            noise_rate: 0.0,
            n_tasks: 3,
            label_correlation: vec![0.0, 0.0, 0.0],
            candidate_fraction: 0.34,
            seed: 42,
            feature_jitter: 0.05,
            continuous_dwell: false,
            fixed_preferences: Some(vec![vec![1, -1], vec![-1, 1]]),
        };
        let model = ModelConfig {
            architecture: Architecture::AttnLfa,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            lambda: 1.0,
            n_tasks: generator.n_tasks,
            mmoe_experts: 2,
            late_fusion_dim: generator.late_fusion_dim(),
            d_item: generator.d_item(),
            d_action: generator.d_action(),
            rope_base: crate::attention::DEFAULT_ROPE_BASE,
            max_seq_len: generator.seq_len,
            dhn_action_first: false,
        };
        ExperimentConfig {
            generator,
            model,
            bench_architectures: default_bench_architectures(),
            train: TrainConfig {
                learning_rate: 3e-3,
                lr_scale_dhn: 0.5,
                epochs: 4,
                batch_size: 2,
                adam: Default::default(),
                seed: 42,
                label_clamp: 1e-7,
            },
            output_dir: PathBuf::from("runs/fig3"),
            report_format: ReportFormat::TableText,
            dataset_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let checks = [
            (self.model.d_item, self.generator.d_item(), "model.d_item", "generator.n_categories"),
            (self.model.d_action, self.generator.d_action(), "model.d_action", "generator.n_tasks"),
            (self.model.n_tasks, self.generator.n_tasks, "model.n_tasks", "generator.n_tasks"),
            (
                self.model.late_fusion_dim,
                self.generator.late_fusion_dim(),
                "model.late_fusion_dim",
                "generator late-fusion width (1 + n_tasks)",
            ),
        ];
        for (got, want, field, source) in checks {
            if got != want {
                return Err(CliError::Config(format!(
                    "{field} = {got} does not match {source} = {want}"
                )));
            }
        }
        if self.model.max_seq_len < self.generator.seq_len {
            return Err(CliError::Config(format!(
                "model.max_seq_len = {} is below generator.seq_len = {}",
                self.model.max_seq_len, self.generator.seq_len
            )));
        }
        if self.bench_architectures.is_empty() {
            return Err(CliError::Config("bench_architectures must not be empty".into()));
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset_path.clone().unwrap_or_else(|| self.output_dir.join("dataset.jsonl"))
    }

    /// Field-by-field flag overrides; `seed` retunes both the generator and
    /// the trainer.
    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.generator.seed = seed;
            self.train.seed = seed;
        }
        if let Some(arch) = &o.arch {
            self.model.architecture = Architecture::parse(arch)?;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(format) = &o.format {
            self.report_format = match format.as_str() {
                "table-text" => ReportFormat::TableText,
                "structured" => ReportFormat::Structured,
                other => {
                    return Err(CliError::Config(format!(
                        "unknown report format {other:?}; expected table-text or structured"
                    )))
                }
            };
        }
        self.validate()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub arch: Option<String>,
    pub out: Option<PathBuf>,
    pub format: Option<String>,
}

fn ensure_output_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug, Serialize)]
pub struct GenerateSummary {
    pub path: PathBuf,
    pub n_users: usize,
    pub n_events: usize,
    pub context_events: usize,
    pub candidate_events: usize,
    pub per_task_base_rate: BTreeMap<String, f64>,
}

/// Per-task positive rates over every event of a dataset.
pub fn base_rates(dataset: &[UserSequence], n_tasks: usize) -> BTreeMap<String, f64> {
    let names = task_names(n_tasks);
    let mut positives = vec![0u64; n_tasks];
    let mut total = 0u64;
    for seq in dataset {
        for e in &seq.events {
            total += 1;
            for (t, &l) in e.labels.iter().enumerate() {
                positives[t] += l as u64;
            }
        }
    }
    names
        .into_iter()
        .enumerate()
        .map(|(t, name)| (name, positives[t] as f64 / total.max(1) as f64))
        .collect()
}

/// Generates the dataset file and a summary of what landed in it.
pub fn cmd_generate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<GenerateSummary> {
    cfg.validate()?;
    ensure_output_dir(cfg)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.dataset_path());
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    let dataset = generate_dataset(&cfg.generator)?;
    write_dataset(&dataset, &path)?;
    let n_events = dataset.iter().map(|s| s.events.len()).sum();
    let context_events = dataset.iter().map(|s| s.context_len).sum();
    Ok(GenerateSummary {
        path,
        n_users: dataset.len(),
        n_events,
        context_events,
        candidate_events: n_events - context_events,
        per_task_base_rate: base_rates(&dataset, cfg.generator.n_tasks),
    })
}

fn load_or_generate(cfg: &ExperimentConfig) -> Result<Vec<UserSequence>> {
    let path = cfg.dataset_path();
    if path.exists() {
        Ok(read_dataset(&path)?)
    } else {
        let dataset = generate_dataset(&cfg.generator)?;
        write_dataset(&dataset, &path)?;
        Ok(dataset)
    }
}

fn require_dataset(cfg: &ExperimentConfig) -> Result<Vec<UserSequence>> {
    let path = cfg.dataset_path();
    if !path.exists() {
        return Err(CliError::Config(format!(
            "dataset {} does not exist; run `generate` first or set dataset_path",
            path.display()
        )));
    }
    Ok(read_dataset(&path)?)
}

#[derive(Debug)]
pub struct TrainArtifacts {
    pub checkpoint_path: PathBuf,
    pub report_path: PathBuf,
    pub report: MetricsReport,
}

/// Trains the configured architecture and writes its checkpoint plus a
/// structured metrics report.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainArtifacts> {
    cfg.validate()?;
    ensure_output_dir(cfg)?;
    let dataset = require_dataset(cfg)?;
    let outcome = train::<f64>(&cfg.model, &cfg.train, &dataset)?;
    let arch = cfg.model.architecture.name();
    let checkpoint_path = cfg.output_dir.join(format!("{arch}.ckpt"));
    save_checkpoint(&outcome.model, &checkpoint_path)?;
    let report_path = cfg.output_dir.join(format!("{arch}_report.json"));
    let json = serde_json::to_string_pretty(&outcome.report)
        .map_err(|e| CliError::Config(format!("encoding report: {e}")))?;
    std::fs::write(&report_path, json).map_err(|e| io_err(&report_path, e))?;
    Ok(TrainArtifacts { checkpoint_path, report_path, report: outcome.report })
}

/// Evaluates a checkpoint under the candidate-isolation protocol. Timing
/// fields are zero: nothing was trained.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let dataset = require_dataset(cfg)?;
    let model: Model<f64> = load_checkpoint(checkpoint)?;
    let eval =
        evaluate(&model, &dataset, cfg.train.batch_size, cfg.train.label_clamp)?;
    let mcfg = model.config();
    let updates = mcfg.n_layers * mcfg.architecture.attention_updates_per_layer();
    let seq_len = dataset.iter().map(|s| s.events.len()).max().unwrap_or(0);
    Ok(MetricsReport {
        eval_loss: eval.eval_loss,
        per_task_bce: eval.per_task_bce,
        per_task_ne: eval.per_task_ne,
        train_wall_clock_s: 0.0,
        per_step_ms: 0.0,
        attention_flops: crate::attention::attention_flops(
            seq_len,
            mcfg.d_model,
            updates,
            mcfg.architecture.is_interleaved(),
        ),
        n_eval_labels: eval.n_eval_labels,
    })
}

#[derive(Debug)]
pub struct BenchArtifacts {
    /// Comparative table (columns: eval_loss, ne_<task>…, time) including
    /// measured wall-clock — informative but not reproducible.
    pub table: String,
    pub table_path: PathBuf,
    /// Seed-reproducible report (metrics and FLOPs, no timing).
    pub report_path: PathBuf,
    pub history_path: PathBuf,
    pub structured: String,
}

/// Trains every benchmark architecture under shared hyperparameters and
/// writes the comparison artifacts. The deterministic report excludes
/// wall-clock numbers so a fixed seed reproduces it byte-for-byte; the
/// table (with its time column) is appended to the history file.
pub fn cmd_bench(cfg: &ExperimentConfig) -> Result<BenchArtifacts> {
    cfg.validate()?;
    if cfg.bench_architectures.len() < 2 {
        return Err(CliError::Config(
            "bench needs at least two entries in bench_architectures".into(),
        ));
    }
    ensure_output_dir(cfg)?;
    let dataset = load_or_generate(cfg)?;
    let configs: Vec<ModelConfig> = cfg
        .bench_architectures
        .iter()
        .map(|&a| cfg.model.with_architecture(a))
        .collect();
    let report = benchmark::<f64>(&configs, &cfg.train, &dataset)?;

    let table = render_comparison_table(&report);
    let structured = deterministic_report(&report)?;

    let table_path = cfg.output_dir.join("bench_table.txt");
    std::fs::write(&table_path, &table).map_err(|e| io_err(&table_path, e))?;
    let report_path = cfg.output_dir.join("bench_report.json");
    std::fs::write(&report_path, &structured).map_err(|e| io_err(&report_path, e))?;
    let history_path = cfg.output_dir.join("bench_history.txt");
    append_history(
        &history_path,
        &format!("bench run at unix {} seed {}", unix_now(), cfg.train.seed),
        &table,
    )?;
    Ok(BenchArtifacts { table, table_path, report_path, history_path, structured })
}

/// Runs the invariant suites; returns the rendered summary and whether all
/// suites passed.
pub fn cmd_verify(seed: u64) -> (String, bool) {
    let results = verify::run_all(seed, None);
    (verify::render(&results), verify::all_passed(&results))
}

/// Test hook: verify with an injected defect.
pub fn cmd_verify_corrupted(seed: u64, corruption: Corruption) -> (String, bool) {
    let results = verify::run_all(seed, Some(corruption));
    (verify::render(&results), verify::all_passed(&results))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_cfg(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::fig3();
        cfg.generator.n_users = 6;
        cfg.generator.fixed_preferences = None;
        cfg.generator.noise_rate = 0.1;
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn fig3_preset_emits_the_fixture_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = {
            let mut c = ExperimentConfig::fig3();
            c.output_dir = dir.path().to_path_buf();
            c
        };
        let summary = cmd_generate(&cfg, None).unwrap();
        assert_eq!(summary.n_users, 2);
        let data = read_dataset(&summary.path).unwrap();
        assert_eq!(data[0].preference, vec![1, -1]);
        assert_eq!(data[1].preference, vec![-1, 1]);
        for e in &data[0].events {
            assert_eq!(e.labels[0], (e.category_id == 0) as u8);
        }
        for e in &data[1].events {
            assert_eq!(e.labels[0], (e.category_id == 1) as u8);
        }
    }

    #[test]
    fn generate_is_reproducible_and_summary_matches_recount() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_cfg(dir.path());
        let a = cmd_generate(&cfg, Some(&dir.path().join("a.jsonl"))).unwrap();
        let b = cmd_generate(&cfg, Some(&dir.path().join("b.jsonl"))).unwrap();
        assert_eq!(
            std::fs::read(&a.path).unwrap(),
            std::fs::read(&b.path).unwrap(),
            "same seed must write identical bytes"
        );
        // Recount base rates from the file itself.
        let reread = read_dataset(&a.path).unwrap();
        let recounted = base_rates(&reread, cfg.generator.n_tasks);
        assert_eq!(a.per_task_base_rate, recounted);
    }

    #[test]
    fn train_writes_checkpoint_and_report_and_eval_reproduces_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_cfg(dir.path());
        cfg.train.epochs = 1;
        cmd_generate(&cfg, None).unwrap();
        let artifacts = cmd_train(&cfg).unwrap();
        assert!(artifacts.checkpoint_path.exists());
        assert!(artifacts.report_path.exists());

        let eval = cmd_eval(&cfg, &artifacts.checkpoint_path).unwrap();
        assert_eq!(eval.eval_loss.to_bits(), artifacts.report.eval_loss.to_bits());
        assert_eq!(eval.per_task_ne, artifacts.report.per_task_ne);

        let again = cmd_eval(&cfg, &artifacts.checkpoint_path).unwrap();
        assert_eq!(again.eval_loss.to_bits(), eval.eval_loss.to_bits());
    }

    #[test]
    fn train_without_dataset_names_the_missing_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_cfg(dir.path());
        let err = cmd_train(&cfg).unwrap_err();
        assert!(err.to_string().contains("dataset"));
        assert!(err.to_string().contains(dir.path().to_str().unwrap()));
    }

    #[test]
    fn invalid_architecture_override_lists_valid_names() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_cfg(dir.path());
        let err = cfg
            .apply_overrides(&Overrides { arch: Some("attn_xyz".into()), ..Default::default() })
            .unwrap_err();
        let msg = err.to_string();
        for a in Architecture::ALL {
            assert!(msg.contains(a.name()), "{msg}");
        }
    }

    #[test]
    fn bench_table_has_the_fixed_columns_and_zero_baseline_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_cfg(dir.path());
        cfg.generator.n_users = 4;
        cfg.generator.seq_len = 8;
        cfg.model.max_seq_len = 8;
        cfg.model.n_layers = 1;
        cfg.train.epochs = 1;
        let artifacts = cmd_bench(&cfg).unwrap();
        let lines: Vec<&str> = artifacts.table.lines().collect();
        assert!(lines[0].starts_with("architecture"));
        let header: Vec<&str> = lines[0].split_whitespace().collect();
        assert_eq!(
            header,
            vec!["architecture", "eval_loss", "ne_long_dwell", "ne_contribution", "ne_like", "time"]
        );
        assert_eq!(lines.len(), 1 + 4);
        let baseline: Vec<&str> = lines[1].split_whitespace().collect();
        assert_eq!(baseline[0], "interleaved_baseline");
        for cell in &baseline[1..] {
            assert_eq!(*cell, "+0.00%");
        }
        assert!(artifacts.history_path.exists());
    }

    #[test]
    fn toml_round_trip_and_field_error_reporting() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_cfg(dir.path());
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(loaded.generator, cfg.generator);
        assert_eq!(loaded.model, cfg.model);

        std::fs::write(&path, "[generator]\nn_users = \"many\"\n").unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("exp.toml"));
        assert!(msg.contains("n_users"), "{msg}");
    }
}
