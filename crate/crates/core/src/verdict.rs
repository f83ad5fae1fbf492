//! From first-token logprobs to a thresholded verdict.
//!
//! The category distribution is read off the first generated token: registry
//! IDs found in the top-k logprob map are exponentiated, missing IDs get a
//! small floor, and the result is renormalized to sum to 1. The argmax becomes
//! the predicted category; a category is unsafe when its renormalized score
//! meets its threshold. The safe category is exempt from thresholding by
//! construction.

use std::collections::{BTreeMap, HashMap};

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::backend::{BackendError, CompletionBackend, CompletionRequest};
use crate::policy::{render_prompt, TextInput, TextKind, ValidatedPolicy};
use crate::taxonomy::{CategoryRegistry, SAFE_CATEGORY_ID};

/// Default renormalization floor for registry IDs absent from the top-k map.
pub const DEFAULT_SCORE_FLOOR: f64 = 1e-9;
/// Default prompt-side unsafe threshold.
pub const DEFAULT_PROMPT_THRESHOLD: f64 = 0.5;
/// Default response-side unsafe threshold.
pub const DEFAULT_RESPONSE_THRESHOLD: f64 = 0.8;

/// Final binary outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Safe,
    Unsafe,
}

/// Renormalized probability per category, in registry order. Scores are
/// non-negative and sum to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    entries: Vec<(String, f64)>,
}

impl ScoreVector {
    pub fn get(&self, id: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|(eid, _)| eid == id)
            .map(|(_, score)| *score)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(id, score)| (id.as_str(), *score))
    }

    /// Highest-scoring ID; ties break toward the earlier registry position.
    pub fn argmax(&self) -> &str {
        let mut best = 0;
        for (idx, (_, score)) in self.entries.iter().enumerate().skip(1) {
            if *score > self.entries[best].1 {
                best = idx;
            }
        }
        &self.entries[best].0
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|(_, s)| s).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Serialize for ScoreVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.entries.len()))?;
        for (id, score) in &self.entries {
            map.serialize_entry(id, score)?;
        }
        map.end()
    }
}

/// Unsafe thresholds: optional per-category values over prompt/response
/// defaults. The safe category must not carry an entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector {
    #[serde(default)]
    pub per_category: BTreeMap<String, f64>,
    #[serde(default = "default_prompt_threshold")]
    pub default_prompt: f64,
    #[serde(default = "default_response_threshold")]
    pub default_response: f64,
}

fn default_prompt_threshold() -> f64 {
    DEFAULT_PROMPT_THRESHOLD
}

fn default_response_threshold() -> f64 {
    DEFAULT_RESPONSE_THRESHOLD
}

impl Default for ThresholdVector {
    fn default() -> Self {
        Self {
            per_category: BTreeMap::new(),
            default_prompt: DEFAULT_PROMPT_THRESHOLD,
            default_response: DEFAULT_RESPONSE_THRESHOLD,
        }
    }
}

impl ThresholdVector {
    pub fn check(&self) -> Result<(), ClassifyError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.default_prompt) || !in_unit(self.default_response) {
            return Err(ClassifyError::InvalidThreshold(
                "defaults must lie in [0, 1]".into(),
            ));
        }
        for (id, value) in &self.per_category {
            if id == SAFE_CATEGORY_ID {
                return Err(ClassifyError::InvalidThreshold(format!(
                    "{SAFE_CATEGORY_ID:?} is never thresholded"
                )));
            }
            if !in_unit(*value) {
                return Err(ClassifyError::InvalidThreshold(format!(
                    "threshold for {id:?} must lie in [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Effective threshold for a category. Pairs judge the response side, so
    /// they fall back to the response default.
    pub fn for_category(&self, id: &str, kind: TextKind) -> f64 {
        if let Some(value) = self.per_category.get(id) {
            return *value;
        }
        match kind {
            TextKind::Prompt => self.default_prompt,
            TextKind::Response | TextKind::Pair => self.default_response,
        }
    }
}

/// How much work a classification does.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifyMode {
    /// One single-token request; no explanation.
    #[default]
    DecisionOnly,
    /// Decision plus a natural-language justification.
    WithExplanation,
}

/// How the explanation is obtained in [`ClassifyMode::WithExplanation`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainMode {
    /// Second request continuing the prompt with the decided category.
    #[default]
    Continuation,
    /// Single request with a larger budget; the output is split into the
    /// category token and the tagged explanation.
    Full,
}

/// Knobs shared by classify/explain.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyOptions {
    pub floor: f64,
    pub top_k_logprobs: u32,
    pub explain_mode: ExplainMode,
    pub explanation_max_tokens: u32,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            floor: DEFAULT_SCORE_FLOOR,
            top_k_logprobs: 32,
            explain_mode: ExplainMode::Continuation,
            explanation_max_tokens: 256,
        }
    }
}

/// Classification outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub category: String,
    /// Renormalized score of `category`.
    pub confidence: f64,
    pub decision: Decision,
    pub scores: ScoreVector,
    pub explanation: Option<String>,
    /// True when the first sampled token itself was not a registry ID and the
    /// category had to be recovered from the rest of the top-k map.
    pub degraded: bool,
}

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    /// Neither the first token nor any top-k entry matched a registry ID.
    #[error("first token {0:?} maps to no registry category")]
    UnmappedFirstToken(String),
    #[error("model output has no <explanation>...</explanation> pair")]
    MissingExplanationTags,
    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),
    #[error("renormalization needs a non-empty registry and a positive floor")]
    DegenerateDistribution,
}

/// Projects a raw `token -> logprob` map onto the registry and renormalizes.
/// Known IDs contribute `exp(logprob)`, missing IDs contribute `floor`,
/// non-registry tokens are dropped. Returns an error when the map contains no
/// registry ID at all (the caller decides how to surface the unmapped token).
pub fn renormalize(
    raw: &HashMap<String, f64>,
    registry: &CategoryRegistry,
    floor: f64,
) -> Result<ScoreVector, ClassifyError> {
    if registry.is_empty() || floor.is_nan() || floor <= 0.0 {
        return Err(ClassifyError::DegenerateDistribution);
    }
    let mut matched = false;
    let mut entries: Vec<(String, f64)> = Vec::with_capacity(registry.len());
    for entry in registry.entries() {
        let mass = match raw.get(&entry.id) {
            Some(lp) => {
                matched = true;
                lp.exp()
            }
            None => floor,
        };
        entries.push((entry.id.clone(), mass));
    }
    if !matched {
        return Err(ClassifyError::DegenerateDistribution);
    }
    let total: f64 = entries.iter().map(|(_, m)| m).sum();
    for (_, mass) in &mut entries {
        *mass /= total;
    }
    Ok(ScoreVector { entries })
}

/// Threshold rule: unsafe iff the category is not the safe one and its score
/// meets the applicable threshold. The boundary is inclusive.
pub fn decide(
    category: &str,
    confidence: f64,
    thresholds: &ThresholdVector,
    kind: TextKind,
) -> Decision {
    if category == SAFE_CATEGORY_ID {
        return Decision::Safe;
    }
    if confidence >= thresholds.for_category(category, kind) {
        Decision::Unsafe
    } else {
        Decision::Safe
    }
}

fn decision_request(prompt: String, opts: &ClassifyOptions) -> CompletionRequest {
    CompletionRequest {
        prompt,
        max_new_tokens: 1,
        want_top_logprobs: opts.top_k_logprobs,
        stop_sequences: vec![],
        temperature: 0.0,
    }
}

/// Runs the first-token classification flow against `backend`.
///
/// Decision-only mode issues exactly one request with `max_new_tokens = 1`.
/// With-explanation mode either continues with a second request
/// ([`ExplainMode::Continuation`]) or widens the single request and splits its
/// output ([`ExplainMode::Full`]).
pub async fn classify(
    backend: &dyn CompletionBackend,
    registry: &CategoryRegistry,
    policy: &ValidatedPolicy,
    text: &TextInput,
    thresholds: &ThresholdVector,
    mode: ClassifyMode,
    opts: &ClassifyOptions,
) -> Result<Verdict, ClassifyError> {
    thresholds.check()?;
    let prompt = render_prompt(registry, policy, text);

    let full_mode = mode == ClassifyMode::WithExplanation && opts.explain_mode == ExplainMode::Full;
    let request = if full_mode {
        CompletionRequest {
            max_new_tokens: opts.explanation_max_tokens,
            ..decision_request(prompt.clone(), opts)
        }
    } else {
        decision_request(prompt.clone(), opts)
    };
    let result = backend.complete(&request).await?;

    let mut raw = result.first_token_top_logprobs.clone();
    if raw.is_empty() && !result.first_token.is_empty() {
        // Greedy token with no reported alternatives: treat it as certain.
        raw.insert(result.first_token.clone(), 0.0);
    }
    raw.retain(|token, _| registry.contains(token));
    if raw.is_empty() {
        return Err(ClassifyError::UnmappedFirstToken(result.first_token));
    }

    let scores = renormalize(&raw, registry, opts.floor)?;
    let category = scores.argmax().to_string();
    let confidence = scores.get(&category).unwrap_or(0.0);
    let degraded = !registry.contains(&result.first_token);
    if degraded {
        tracing::warn!(
            first_token = %result.first_token,
            recovered = %category,
            "first token is not a category id; recovered from top-k map"
        );
    }
    let decision = decide(&category, confidence, thresholds, text.kind());

    let explanation = match mode {
        ClassifyMode::DecisionOnly => None,
        ClassifyMode::WithExplanation => {
            if full_mode {
                Some(parse_output(&result.text, registry)?.1)
            } else {
                Some(explain(backend, &prompt, &category, opts).await?)
            }
        }
    };

    Ok(Verdict {
        category,
        confidence,
        decision,
        scores,
        explanation,
        degraded,
    })
}

/// Fetches a justification by continuing `prior_prompt` with the decided
/// category, then extracting the tagged explanation from the continuation.
pub async fn explain(
    backend: &dyn CompletionBackend,
    prior_prompt: &str,
    category: &str,
    opts: &ClassifyOptions,
) -> Result<String, ClassifyError> {
    let request = CompletionRequest {
        prompt: format!("{prior_prompt}{category}"),
        max_new_tokens: opts.explanation_max_tokens,
        want_top_logprobs: 0,
        stop_sequences: vec![],
        temperature: 0.0,
    };
    let result = backend.complete(&request).await?;
    extract_explanation(&result.text)
}

/// Everything between the first `<explanation>` and the next `</explanation>`.
fn extract_explanation(text: &str) -> Result<String, ClassifyError> {
    const OPEN: &str = "<explanation>";
    const CLOSE: &str = "</explanation>";
    let start = text.find(OPEN).ok_or(ClassifyError::MissingExplanationTags)?;
    let rest = &text[start + OPEN.len()..];
    let end = rest.find(CLOSE).ok_or(ClassifyError::MissingExplanationTags)?;
    Ok(rest[..end].to_string())
}

/// Splits a full-mode output into `(category_id, explanation)`. The category
/// is the first whitespace-delimited token and must be a registry ID.
pub fn parse_output(
    text: &str,
    registry: &CategoryRegistry,
) -> Result<(String, String), ClassifyError> {
    let first = text.split_whitespace().next().unwrap_or_default();
    if !registry.contains(first) {
        return Err(ClassifyError::UnmappedFirstToken(first.to_string()));
    }
    Ok((first.to_string(), extract_explanation(text)?))
}
