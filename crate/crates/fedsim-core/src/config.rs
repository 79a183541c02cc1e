//! Experiment configuration: a single JSON document that pins down the
//! dataset, model, strategy, and engine settings. Parsing is strict:
//! unknown fields are rejected and schema violations name the offending
//! field path. Round-tripping a config through JSON is the identity.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{
    gen_concept_shift_regression, gen_label_skew_classification, gen_quadratic_clients,
    gen_sine_clients, load_csv_partition, FederatedDataset,
};
use crate::engine::{
    run_federation, EngineParams, EpochSpec, RoundRecord, RunOutput, SamplingScheme, Weighting,
    SCHEMA_VERSION,
};
use crate::error::{FedError, Result};
use crate::model::ModelSpec;
use crate::strategies::{self, BatchSize, Strategy};

fn default_seed() -> u64 {
    0
}

fn default_epochs() -> EpochSpec {
    EpochSpec::Same(1)
}

fn default_batch() -> BatchConfig {
    BatchConfig::Word("full".to_string())
}

fn default_lr_local() -> f64 {
    0.1
}

fn default_lr_server() -> f64 {
    1.0
}

fn default_fraction() -> f64 {
    1.0
}

fn default_weighting() -> String {
    "auto".to_string()
}

fn default_scheme() -> String {
    "uniform".to_string()
}

fn default_sampling() -> SamplingConfig {
    SamplingConfig { scheme: default_scheme(), gamma: None }
}

fn default_noise() -> f64 {
    0.05
}

fn default_hidden() -> Vec<usize> {
    vec![8]
}

fn one() -> usize {
    1
}

/// Batch size: a positive count or the string "full".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchConfig {
    Count(usize),
    Word(String),
}

impl BatchConfig {
    fn to_batch_size(&self) -> Result<BatchSize> {
        match self {
            BatchConfig::Count(0) => Err(FedError::config("engine.batch_size: must be at least 1")),
            BatchConfig::Count(b) => Ok(BatchSize::Size(*b)),
            BatchConfig::Word(w) if w == "full" => Ok(BatchSize::Full),
            BatchConfig::Word(w) => Err(FedError::config(format!(
                "engine.batch_size: expected a count or \"full\", got {w:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl SamplingConfig {
    fn to_scheme(&self) -> Result<SamplingScheme> {
        let gamma = self.gamma.unwrap_or(1.0);
        match self.scheme.as_str() {
            "uniform" | "size" => {
                if self.gamma.is_some() {
                    return Err(FedError::config(format!(
                        "engine.sampling.gamma: not used by scheme {:?}",
                        self.scheme
                    )));
                }
                Ok(if self.scheme == "uniform" { SamplingScheme::Uniform } else { SamplingScheme::Size })
            }
            "grad_norm" => Ok(SamplingScheme::GradNorm { gamma }),
            "loss" => Ok(SamplingScheme::Loss { gamma }),
            other => Err(FedError::config(format!(
                "engine.sampling.scheme: unknown scheme {other:?} (uniform, size, grad_norm, loss)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// One-parameter quadratics with client curvatures and optima.
    Quadratic {
        curvatures: Vec<f64>,
        optima: Vec<f64>,
        #[serde(default = "one")]
        n_per_client: usize,
    },
    /// Phase-shifted sine regression for a small tanh MLP.
    Sine {
        n_clients: usize,
        n_train: usize,
        n_test: usize,
        #[serde(default = "default_noise")]
        noise_sd: f64,
        #[serde(default = "default_hidden")]
        hidden_dims: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phases: Option<Vec<f64>>,
    },
    /// Dirichlet label-skew classification on a ring of Gaussian blobs.
    LabelSkew {
        n_clients: usize,
        n_classes: usize,
        alpha: f64,
        total_train: usize,
        n_test_per_client: usize,
    },
    /// Linear regression with per-group ground-truth weights.
    ConceptShift {
        n_clients: usize,
        n_groups: usize,
        n_train: usize,
        n_test: usize,
        input_dim: usize,
        #[serde(default = "default_noise")]
        noise_sd: f64,
    },
    /// External CSV, partitioned into clients by a column.
    Csv {
        path: String,
        partition_column: String,
        target_column: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        group_column: Option<String>,
    },
}

impl DatasetConfig {
    pub fn build(&self, seed: u64) -> Result<FederatedDataset> {
        match self {
            DatasetConfig::Quadratic { curvatures, optima, n_per_client } => {
                gen_quadratic_clients(curvatures, optima, *n_per_client)
            }
            DatasetConfig::Sine { n_clients, n_train, n_test, noise_sd, hidden_dims, phases } => {
                gen_sine_clients(*n_clients, *n_train, *n_test, *noise_sd, hidden_dims, seed, phases.as_deref())
            }
            DatasetConfig::LabelSkew { n_clients, n_classes, alpha, total_train, n_test_per_client } => {
                gen_label_skew_classification(*n_clients, *n_classes, *alpha, *total_train, *n_test_per_client, seed)
            }
            DatasetConfig::ConceptShift { n_clients, n_groups, n_train, n_test, input_dim, noise_sd } => {
                gen_concept_shift_regression(*n_clients, *n_groups, *n_train, *n_test, *input_dim, *noise_sd, seed)
            }
            DatasetConfig::Csv { path, partition_column, target_column, group_column } => {
                load_csv_partition(Path::new(path), partition_column, target_column, group_column.as_deref(), seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub rounds: usize,
    #[serde(default = "default_epochs")]
    pub local_epochs: EpochSpec,
    #[serde(default = "default_batch")]
    pub batch_size: BatchConfig,
    #[serde(default = "default_lr_local")]
    pub lr_local: f64,
    #[serde(default = "default_lr_server")]
    pub lr_server: f64,
    #[serde(default = "default_fraction")]
    pub sample_fraction: f64,
    #[serde(default = "default_sampling")]
    pub sampling: SamplingConfig,
    #[serde(default = "default_weighting")]
    pub weighting: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub dataset: DatasetConfig,
    /// Optional model override; only CSV datasets accept one (the
    /// synthetic generators fix their model to keep oracles valid).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    pub strategy: StrategyConfig,
    pub engine: EngineConfig,
}

impl ExperimentConfig {
    /// Strict parse with field-path diagnostics on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path.is_empty() || path == "." {
                FedError::config(format!("config: {inner}"))
            } else {
                FedError::config(format!("{path}: {inner}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization is infallible")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(FedError::config(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        if let DatasetConfig::Quadratic { curvatures, optima, .. } = &self.dataset {
            if curvatures.len() != optima.len() {
                return Err(FedError::config(
                    "dataset.optima: must match the length of dataset.curvatures",
                ));
            }
        }
        if self.model.is_some() && !matches!(self.dataset, DatasetConfig::Csv { .. }) {
            return Err(FedError::config(
                "model: overrides are only supported for csv datasets; synthetic generators fix their model",
            ));
        }
        match self.engine.weighting.as_str() {
            "auto" | "size" | "equal" => {}
            other => {
                return Err(FedError::config(format!(
                    "engine.weighting: unknown weighting {other:?} (auto, size, equal)"
                )))
            }
        }
        self.engine.sampling.to_scheme()?;
        self.engine.batch_size.to_batch_size()?;
        Ok(())
    }

    /// Builds the dataset, applying the model override when present.
    pub fn dataset(&self) -> Result<FederatedDataset> {
        let mut ds = self.dataset.build(self.seed)?;
        if let Some(spec) = &self.model {
            spec.validate()?;
            if spec.input_dim != ds.model.input_dim {
                return Err(FedError::config(format!(
                    "model.input_dim: dataset provides {} features",
                    ds.model.input_dim
                )));
            }
            ds.model = spec.clone();
            ds.validate()?;
        }
        Ok(ds)
    }

    pub fn strategy(&self) -> Result<Box<dyn Strategy>> {
        strategies::build(&self.strategy.name, &self.strategy.params, self.engine.lr_local)
    }

    pub fn engine_params(&self, workers: usize) -> Result<EngineParams> {
        Ok(EngineParams {
            rounds: self.engine.rounds,
            local_epochs: self.engine.local_epochs.clone(),
            batch_size: self.engine.batch_size.to_batch_size()?,
            lr_local: self.engine.lr_local,
            lr_server: self.engine.lr_server,
            sample_fraction: self.engine.sample_fraction,
            sampling: self.engine.sampling.to_scheme()?,
            weighting: match self.engine.weighting.as_str() {
                "size" => Weighting::Size,
                "equal" => Weighting::Equal,
                _ => Weighting::Auto,
            },
            seed: self.seed,
            init_values: self.engine.init_values.clone(),
            target_loss: self.engine.target_loss,
            workers,
        })
    }

    /// One-call experiment: build everything and run the federation.
    pub fn run(&self, workers: usize) -> Result<RunOutput> {
        let dataset = self.dataset()?;
        let strategy = self.strategy()?;
        let params = self.engine_params(workers)?;
        run_federation(&dataset, strategy.as_ref(), &params)
    }
}

/// Run summary written next to the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub strategy: String,
    pub rounds_run: usize,
    pub stopped_early: bool,
    pub mean_train_loss: f64,
    pub mean_test_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_test_accuracy: Option<f64>,
    pub loss_variance: f64,
    pub per_client_test_loss: Vec<f64>,
    pub total_floats_up: u64,
    pub total_floats_down: u64,
    /// First round whose mean test loss reached the target, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounds_to_target: Option<usize>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn summarize(strategy: &str, out: &RunOutput, target_loss: Option<f64>) -> Summary {
    let last = out.records.last().expect("runs have at least one round");
    let rounds_to_target = target_loss.and_then(|t| {
        out.records
            .iter()
            .find(|r| mean(&r.test_loss) <= t)
            .map(|r| r.round + 1)
    });
    Summary {
        schema_version: SCHEMA_VERSION,
        strategy: strategy.to_string(),
        rounds_run: out.records.len(),
        stopped_early: out.stopped_early,
        mean_train_loss: mean(&last.train_loss),
        mean_test_loss: mean(&last.test_loss),
        mean_test_accuracy: last.test_acc.as_ref().map(|a| mean(a)),
        loss_variance: last.loss_variance,
        per_client_test_loss: last.test_loss.clone(),
        total_floats_up: out.records.iter().map(|r| r.floats_up).sum(),
        total_floats_down: out.records.iter().map(|r| r.floats_down).sum(),
        rounds_to_target,
    }
}

/// One JSON object per line, one line per round.
pub fn write_metrics_jsonl(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serialization is infallible");
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub fn write_summary_json(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).expect("summary serialization is infallible");
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Per-round curves with stable columns; accuracy cells stay empty for
/// regression runs.
pub fn write_curves_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(
        file,
        "schema_version,round,mean_train_loss,mean_test_loss,mean_train_acc,mean_test_acc,loss_variance,floats_up,floats_down"
    )?;
    for r in records {
        let acc = |a: &Option<Vec<f64>>| a.as_ref().map(|v| mean(v).to_string()).unwrap_or_default();
        writeln!(
            file,
            "{},{},{},{},{},{},{},{},{}",
            r.schema_version,
            r.round,
            mean(&r.train_loss),
            mean(&r.test_loss),
            acc(&r.train_acc),
            acc(&r.test_acc),
            r.loss_variance,
            r.floats_up,
            r.floats_down
        )?;
    }
    Ok(())
}

/// Lexicographic snapshot of the generated dataset; handy for goldens.
pub fn dataset_digest(ds: &FederatedDataset) -> String {
    let mut s = format!("{}:{}", ds.name, ds.n_clients());
    for c in &ds.clients {
        s.push_str(&format!(";{}|{}|{}|{}", c.id, c.train.n, c.test.n, c.group));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{
            "schema_version": 1,
            "seed": 7,
            "dataset": {"kind": "quadratic", "curvatures": [1.0, 2.0], "optima": [0.0, 1.0]},
            "strategy": {"name": "fedavg"},
            "engine": {"rounds": 3}
        }"#
        .to_string()
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = ExperimentConfig::from_json(&minimal()).unwrap();
        let text = cfg.to_json_pretty();
        let again = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(text, again.to_json_pretty());
    }

    #[test]
    fn unknown_field_is_named() {
        let bad = minimal().replace("\"rounds\": 3", "\"rounds\": 3, \"bogus\": 1");
        let err = ExperimentConfig::from_json(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("engine"), "missing path in: {msg}");
        assert!(msg.contains("bogus"), "missing field name in: {msg}");
    }

    #[test]
    fn type_mismatch_names_the_path() {
        let bad = minimal().replace("\"rounds\": 3", "\"rounds\": \"three\"");
        let err = ExperimentConfig::from_json(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("engine.rounds"), "missing path in: {msg}");
    }

    #[test]
    fn schema_version_is_checked() {
        let bad = minimal().replace("\"schema_version\": 1", "\"schema_version\": 99");
        let err = ExperimentConfig::from_json(&bad).unwrap_err();
        assert!(err.to_string().contains("schema_version"));
    }

    #[test]
    fn model_override_rejected_for_synthetic_data() {
        let bad = minimal().replace(
            "\"strategy\"",
            r#""model": {"family": "linear", "input_dim": 1, "output_dim": 1, "loss": "squared_error"}, "strategy""#,
        );
        let err = ExperimentConfig::from_json(&bad).unwrap_err();
        assert!(err.to_string().contains("model"), "got: {err}");
    }

    #[test]
    fn mismatched_quadratic_lengths_rejected() {
        let bad = minimal().replace("\"optima\": [0.0, 1.0]", "\"optima\": [0.0]");
        let err = ExperimentConfig::from_json(&bad).unwrap_err();
        assert!(err.to_string().contains("dataset.optima"), "got: {err}");
    }

    #[test]
    fn batch_size_forms() {
        let full = minimal().replace("\"rounds\": 3", "\"rounds\": 3, \"batch_size\": \"full\"");
        assert!(ExperimentConfig::from_json(&full).is_ok());
        let count = minimal().replace("\"rounds\": 3", "\"rounds\": 3, \"batch_size\": 4");
        assert!(ExperimentConfig::from_json(&count).is_ok());
        let bad = minimal().replace("\"rounds\": 3", "\"rounds\": 3, \"batch_size\": \"half\"");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn per_client_epochs_parse() {
        let text = minimal().replace("\"rounds\": 3", "\"rounds\": 3, \"local_epochs\": [2, 5]");
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(cfg.engine.local_epochs, EpochSpec::PerClient(vec![2, 5]));
        let run = cfg.run(1).unwrap();
        assert_eq!(run.records.len(), 3);
    }

    #[test]
    fn end_to_end_run_from_config() {
        let cfg = ExperimentConfig::from_json(&minimal()).unwrap();
        let out = cfg.run(2).unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.records[2].round, 2);
    }

    #[test]
    fn summary_totals_and_target() {
        let text = minimal().replace("\"rounds\": 3", "\"rounds\": 50, \"target_loss\": 0.2, \"init_values\": [2.0]");
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        let out = cfg.run(1).unwrap();
        let s = summarize("fedavg", &out, cfg.engine.target_loss);
        assert!(s.stopped_early);
        assert_eq!(s.rounds_to_target, Some(out.records.len()));
        assert!(s.mean_test_loss <= 0.2);
        assert_eq!(s.total_floats_up, out.records.iter().map(|r| r.floats_up).sum::<u64>());
    }
}
