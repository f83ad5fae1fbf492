//! Dataset evaluation harness.
//!
//! Datasets are JSONL files of labeled samples. Evaluation classifies each
//! sample in decision-only mode, accumulates a confusion matrix with unsafe as
//! the positive class, and reports precision/recall/F1 per dataset plus a
//! macro-F1 across datasets.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::CompletionBackend;
use crate::policy::{TextInput, TextKind, ValidatedPolicy};
use crate::taxonomy::{CategoryRegistry, SAFE_CATEGORY_ID};
use crate::verdict::{classify, ClassifyMode, ClassifyOptions, Decision, ThresholdVector};

/// One labeled sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    pub id: String,
    pub kind: TextKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    pub gold_label: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_category: Option<String>,
}

impl EvalSample {
    /// Builds the classifier input, enforcing that the populated fields match
    /// the declared kind.
    pub fn text_input(&self) -> Result<TextInput, String> {
        let prompt = self.prompt.as_deref().unwrap_or_default();
        let response = self.response.as_deref().unwrap_or_default();
        let built = match self.kind {
            TextKind::Prompt if self.response.is_none() => TextInput::prompt(prompt),
            TextKind::Response if self.prompt.is_none() => TextInput::response(response),
            TextKind::Pair => TextInput::pair(prompt, response),
            _ => return Err("populated fields do not match kind".into()),
        };
        built.map_err(|e| e.to_string())
    }

    fn check(&self, registry: &CategoryRegistry) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id must be non-empty".into());
        }
        self.text_input()?;
        if let Some(category) = &self.gold_category {
            if !registry.contains(category) {
                return Err(format!("gold_category {category:?} is not in the registry"));
            }
            let implied = if category == SAFE_CATEGORY_ID {
                Decision::Safe
            } else {
                Decision::Unsafe
            };
            if self.gold_label != implied {
                return Err(format!(
                    "gold_category {category:?} is inconsistent with gold_label"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    /// Line numbers are 1-based, matching editor display.
    #[error("{path}:{line}: {message}")]
    InvalidSample {
        path: String,
        line: usize,
        message: String,
    },
    #[error("dataset {0:?} is empty")]
    EmptyDataset(String),
    #[error("sample {id:?}: {message}")]
    SampleFailed { id: String, message: String },
}

/// Loads and validates a JSONL dataset. Every malformed line is an error with
/// its line number; blank lines are skipped.
pub fn load_dataset(path: &Path, registry: &CategoryRegistry) -> Result<Vec<EvalSample>, EvalError> {
    let display = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: display.clone(),
        message: e.to_string(),
    })?;
    let mut samples = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: EvalSample =
            serde_json::from_str(line).map_err(|e| EvalError::InvalidSample {
                path: display.clone(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        sample.check(registry).map_err(|message| EvalError::InvalidSample {
            path: display.clone(),
            line: idx + 1,
            message,
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Binary confusion counts with unsafe as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    #[serde(rename = "tp")]
    pub true_pos: u64,
    #[serde(rename = "fp")]
    pub false_pos: u64,
    #[serde(rename = "fn")]
    pub false_neg: u64,
    #[serde(rename = "tn")]
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, predicted: Decision, gold: Decision) {
        match (predicted, gold) {
            (Decision::Unsafe, Decision::Unsafe) => self.true_pos += 1,
            (Decision::Unsafe, Decision::Safe) => self.false_pos += 1,
            (Decision::Safe, Decision::Unsafe) => self.false_neg += 1,
            (Decision::Safe, Decision::Safe) => self.true_neg += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

/// Precision, recall, and F1 over the positive (unsafe) class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Metric conventions: a dataset with no positives anywhere (tp = fp = fn = 0)
/// scores a vacuous 1.0 across the board; otherwise zero denominators yield 0.
pub fn f1_metrics(counts: &ConfusionCounts) -> PrfMetrics {
    if counts.true_pos == 0 && counts.false_pos == 0 && counts.false_neg == 0 {
        return PrfMetrics {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let ratio = |num: u64, denom: u64| if denom == 0 { 0.0 } else { num as f64 / denom as f64 };
    let precision = ratio(counts.true_pos, counts.true_pos + counts.false_pos);
    let recall = ratio(counts.true_pos, counts.true_pos + counts.false_neg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrfMetrics { precision, recall, f1 }
}

/// What to do when a sample fails to classify.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorPolicy {
    /// Stop the run and surface the failing sample.
    #[default]
    Abort,
    /// Treat the prediction as safe and keep going.
    CountAsSafe,
}

/// Per-dataset results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetMetrics {
    pub dataset: String,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Fraction of samples whose predicted category matched `gold_category`,
    /// over samples that carry one. Absent when none do.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category_accuracy: Option<f64>,
    /// Samples scored as safe because classification failed under
    /// [`ErrorPolicy::CountAsSafe`].
    pub errored: u64,
}

/// Classifies every sample in decision-only mode and scores the dataset.
pub async fn evaluate(
    backend: &dyn CompletionBackend,
    registry: &CategoryRegistry,
    dataset: &str,
    samples: &[EvalSample],
    thresholds: &ThresholdVector,
    error_policy: ErrorPolicy,
    opts: &ClassifyOptions,
) -> Result<DatasetMetrics, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyDataset(dataset.to_string()));
    }
    let policy = ValidatedPolicy::empty();
    let mut counts = ConfusionCounts::default();
    let mut category_hits = 0u64;
    let mut category_total = 0u64;
    let mut errored = 0u64;

    for sample in samples {
        let text = sample.text_input().map_err(|message| EvalError::SampleFailed {
            id: sample.id.clone(),
            message,
        })?;
        let outcome = classify(
            backend,
            registry,
            &policy,
            &text,
            thresholds,
            ClassifyMode::DecisionOnly,
            opts,
        )
        .await;

        let (decision, category) = match outcome {
            Ok(verdict) => (verdict.decision, Some(verdict.category)),
            Err(err) => match error_policy {
                ErrorPolicy::Abort => {
                    return Err(EvalError::SampleFailed {
                        id: sample.id.clone(),
                        message: err.to_string(),
                    })
                }
                ErrorPolicy::CountAsSafe => {
                    errored += 1;
                    (Decision::Safe, None)
                }
            },
        };

        counts.record(decision, sample.gold_label);
        if let Some(gold_category) = &sample.gold_category {
            category_total += 1;
            if category.as_deref() == Some(gold_category.as_str()) {
                category_hits += 1;
            }
        }
    }

    let metrics = f1_metrics(&counts);
    Ok(DatasetMetrics {
        dataset: dataset.to_string(),
        counts,
        precision: metrics.precision,
        recall: metrics.recall,
        f1: metrics.f1,
        category_accuracy: (category_total > 0)
            .then(|| category_hits as f64 / category_total as f64),
        errored,
    })
}

/// Multi-dataset report. Macro-F1 is the unweighted mean of dataset F1s.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub datasets: Vec<DatasetMetrics>,
    pub macro_f1: f64,
}

impl MetricsReport {
    pub fn new(datasets: Vec<DatasetMetrics>) -> Self {
        let macro_f1 = if datasets.is_empty() {
            0.0
        } else {
            datasets.iter().map(|d| d.f1).sum::<f64>() / datasets.len() as f64
        };
        Self { datasets, macro_f1 }
    }

    /// Aligned text table, one row per dataset plus the macro row.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 7]> = vec![[
            "dataset".into(),
            "n".into(),
            "precision".into(),
            "recall".into(),
            "f1".into(),
            "cat_acc".into(),
            "errors".into(),
        ]];
        for d in &self.datasets {
            rows.push([
                d.dataset.clone(),
                d.counts.total().to_string(),
                format!("{:.4}", d.precision),
                format!("{:.4}", d.recall),
                format!("{:.4}", d.f1),
                d.category_accuracy
                    .map(|a| format!("{a:.4}"))
                    .unwrap_or_else(|| "-".into()),
                d.errored.to_string(),
            ]);
        }
        rows.push([
            "macro".into(),
            String::new(),
            String::new(),
            String::new(),
            format!("{:.4}", self.macro_f1),
            String::new(),
            String::new(),
        ]);

        let mut widths = [0usize; 7];
        for row in &rows {
            for (i, cell) in row.iter().enumerate() {
                widths[i] = widths[i].max(cell.len());
            }
        }
        let mut out = String::new();
        for row in &rows {
            let mut line = String::new();
            for (i, cell) in row.iter().enumerate() {
                if i > 0 {
                    line.push_str("  ");
                }
                let _ = write!(line, "{cell:<width$}", width = widths[i]);
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}
