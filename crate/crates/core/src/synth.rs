//! Policy-conditioned training data synthesis.
//!
//! Three stages per base sample. Stage 1 asks a teacher (which sees the gold
//! label) for dynamic policy rules that maintain or reverse that label, as a
//! fenced JSON block. Stage 2 re-judges the mutated input under the new policy
//! through the ordinary classification prompt; the teacher sees only the input
//! and the policy, never the original label. Stage 3 shows a verifier the full
//! candidate triplet and keeps it only on an explicit `AGREE`. Every input
//! sample lands in exactly one [`PipelineStats`] bucket.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, CompletionBackend, CompletionRequest};
use crate::eval::ErrorPolicy;
use crate::policy::{
    render_policy_block, render_prompt, validate_policy, DynamicPolicy, PolicyError, RuleOp,
    TextInput, ValidatedPolicy,
};
use crate::taxonomy::{CategoryRegistry, SAFE_CATEGORY_ID};
use crate::verdict::{parse_output, Decision};

const STAGE1_MAX_TOKENS: u32 = 1024;
const STAGE2_MAX_TOKENS: u32 = 512;
const STAGE3_MAX_TOKENS: u32 = 64;

/// An unlabeled-for-inference, labeled-for-synthesis seed sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseSample {
    /// Stable identifier; falls back to the corpus index when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub text: String,
    pub label: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

/// Whether the policy mutation should keep or flip the sample's label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationTarget {
    Maintain,
    Reverse,
}

/// What the teacher is asked for. `k` is the maximum number of rules; the
/// pipeline samples the per-sample count from `1..=k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationSpec {
    pub k: u32,
    pub allowed_ops: Vec<RuleOp>,
    pub target: MutationTarget,
}

impl MutationSpec {
    pub fn check(&self) -> Result<(), SynthError> {
        if self.k == 0 || self.allowed_ops.is_empty() {
            return Err(SynthError::InvalidSpec(
                "k must be >= 1 and allowed_ops non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Stage-2 output: the label is derived from the category, never copied from
/// the base sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub label: Decision,
    pub category: String,
    pub explanation: String,
}

/// Reproducibility record attached to every kept triplet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub base_id: String,
    pub corpus_index: usize,
    /// The per-sample spec actually used, after sampling from the run spec.
    pub spec: MutationSpec,
    pub seed: u64,
    pub teacher: String,
    pub verifier: String,
    /// True when stage 1 rewrote the input text.
    pub input_modified: bool,
}

/// One kept training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthTriplet {
    pub mutated_input: String,
    pub policy: DynamicPolicy,
    pub judgment: Judgment,
    pub provenance: Provenance,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid mutation spec: {0}")]
    InvalidSpec(String),
    #[error("teacher output not parseable: {0}")]
    TeacherParse(String),
    #[error("teacher policy rejected: {}", format_policy_errors(.0))]
    PolicyRejected(Vec<PolicyError>),
    #[error("stage-2 output not parseable: {0}")]
    OutputParse(String),
    #[error("sample {id}: backend failure in {stage}: {source}")]
    Backend {
        id: String,
        stage: &'static str,
        source: BackendError,
    },
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
}

fn format_policy_errors(errors: &[PolicyError]) -> String {
    errors
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Stage-1 result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MutationOutcome {
    pub mutated_input: String,
    pub policy: ValidatedPolicy,
    pub input_modified: bool,
}

fn op_name(op: RuleOp) -> &'static str {
    match op {
        RuleOp::AddNew => "add_new",
        RuleOp::ExpandScope => "expand_scope",
        RuleOp::NarrowScope => "narrow_scope",
    }
}

fn label_name(label: Decision) -> &'static str {
    match label {
        Decision::Safe => "safe",
        Decision::Unsafe => "unsafe",
    }
}

/// Deterministic stage-1 prompt. This is the only place the gold label is
/// ever rendered for a model.
pub fn render_mutation_prompt(
    sample: &BaseSample,
    spec: &MutationSpec,
    registry: &CategoryRegistry,
) -> String {
    let ops = spec
        .allowed_ops
        .iter()
        .map(|op| op_name(*op))
        .collect::<Vec<_>>()
        .join(", ");
    let target = match spec.target {
        MutationTarget::Maintain => "maintain",
        MutationTarget::Reverse => "reverse",
    };
    let mut categories = String::new();
    for entry in registry.entries() {
        categories.push_str("\n- ");
        categories.push_str(&entry.id);
        categories.push_str(": ");
        categories.push_str(&entry.name);
    }
    let category_line = match &sample.category {
        Some(category) => format!("\nCategory: {category}"),
        None => String::new(),
    };
    format!(
        "You are designing dynamic policy rules for a content risk classifier.\n\
         \n\
         # Base Sample\n\
         Text: {text}\n\
         Judgment: {label}{category_line}\n\
         \n\
         # System Categories{categories}\n\
         \n\
         # Task\n\
         Write exactly {k} rule(s) using only these operations: {ops}.\n\
         Applying the rules must {target} the judgment above when the sample is re-judged.\n\
         - add_new: introduce a new category; its id must be one lowercase ascii letter.\n\
         - expand_scope: broaden one system category from the list above.\n\
         - narrow_scope: restrict one system category from the list above.\n\
         You may also rewrite the sample text; if so, return the new text as rewritten_text.\n\
         \n\
         Respond with a single fenced json block:\n\
         ```json\n\
         {{\"rules\": [{{\"op\": \"...\", \"category_id\": \"...\", \"category_name\": \"...\", \"definitions\": [\"...\"]}}], \"rewritten_text\": \"...\"}}\n\
         ```",
        text = sample.text,
        label = label_name(sample.label),
        k = spec.k,
    )
}

#[derive(Deserialize)]
struct TeacherPayload {
    rules: Vec<crate::policy::DynamicRule>,
    #[serde(default)]
    rewritten_text: Option<String>,
}

/// Extracts the first ```json fenced block.
fn extract_fenced_json(text: &str) -> Result<&str, SynthError> {
    let open = text
        .find("```json")
        .ok_or_else(|| SynthError::TeacherParse("no ```json fence".into()))?;
    let body_start = open + "```json".len();
    let body = text[body_start..]
        .strip_prefix('\n')
        .unwrap_or(&text[body_start..]);
    let close = body
        .find("```")
        .ok_or_else(|| SynthError::TeacherParse("unterminated fence".into()))?;
    Ok(body[..close].trim())
}

/// Stage 1: ask the teacher for a policy mutation and validate it.
/// The returned policy has exactly `spec.k` rules; anything else is a parse
/// failure so the contract stays checkable.
pub async fn mutate_policy(
    sample: &BaseSample,
    spec: &MutationSpec,
    teacher: &dyn CompletionBackend,
    registry: &CategoryRegistry,
) -> Result<MutationOutcome, SynthError> {
    spec.check()?;
    let request = CompletionRequest {
        prompt: render_mutation_prompt(sample, spec, registry),
        max_new_tokens: STAGE1_MAX_TOKENS,
        want_top_logprobs: 0,
        stop_sequences: vec![],
        temperature: 0.0,
    };
    let result = teacher
        .complete(&request)
        .await
        .map_err(|source| SynthError::Backend {
            id: sample.id.clone().unwrap_or_default(),
            stage: "mutate_policy",
            source,
        })?;

    let payload: TeacherPayload = serde_json::from_str(extract_fenced_json(&result.text)?)
        .map_err(|e| SynthError::TeacherParse(e.to_string()))?;
    if payload.rules.len() != spec.k as usize {
        return Err(SynthError::TeacherParse(format!(
            "expected {} rules, got {}",
            spec.k,
            payload.rules.len()
        )));
    }
    for rule in &payload.rules {
        if !spec.allowed_ops.contains(&rule.op) {
            return Err(SynthError::TeacherParse(format!(
                "operation {} is not in the allowed set",
                op_name(rule.op)
            )));
        }
    }
    let policy = validate_policy(&DynamicPolicy { rules: payload.rules }, registry)
        .map_err(SynthError::PolicyRejected)?;

    let (mutated_input, input_modified) = match payload.rewritten_text {
        Some(text) if !text.trim().is_empty() && text != sample.text => (text, true),
        _ => (sample.text.clone(), false),
    };
    Ok(MutationOutcome {
        mutated_input,
        policy,
        input_modified,
    })
}

/// Stage 2: re-judge the mutated input under the mutated policy. The prompt is
/// built solely from `(mutated_input, policy)` through [`render_prompt`], so
/// this stage is label-blind by construction.
pub async fn refine_response(
    mutated_input: &str,
    policy: &ValidatedPolicy,
    teacher: &dyn CompletionBackend,
    registry: &CategoryRegistry,
) -> Result<Judgment, SynthError> {
    let merged = registry
        .merge_dynamic(policy)
        .map_err(|e| SynthError::OutputParse(e.to_string()))?;
    let text = TextInput::prompt(mutated_input)
        .map_err(|e| SynthError::OutputParse(e.to_string()))?;
    let request = CompletionRequest {
        prompt: render_prompt(&merged, policy, &text),
        max_new_tokens: STAGE2_MAX_TOKENS,
        want_top_logprobs: 0,
        stop_sequences: vec![],
        temperature: 0.0,
    };
    let result = teacher
        .complete(&request)
        .await
        .map_err(|source| SynthError::Backend {
            id: String::new(),
            stage: "refine_response",
            source,
        })?;
    let (category, explanation) =
        parse_output(&result.text, &merged).map_err(|e| SynthError::OutputParse(e.to_string()))?;
    let label = if category == SAFE_CATEGORY_ID {
        Decision::Safe
    } else {
        Decision::Unsafe
    };
    Ok(Judgment {
        label,
        category,
        explanation,
    })
}

/// Stage-3 outcome for one candidate triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterOutcome {
    Keep,
    /// Verifier answered `DISAGREE`.
    Disagreed,
    /// Verifier answered neither token at a line start.
    Unparseable,
}

/// Deterministic stage-3 prompt showing the full candidate.
pub fn render_verifier_prompt(triplet: &SynthTriplet) -> String {
    let policy = match validate_policy(&triplet.policy, &CategoryRegistry::builtin()) {
        Ok(validated) if !validated.is_empty() => render_policy_block(&validated),
        _ => {
            // Fall back to raw rendering so the verifier still sees something
            // sensible for policies built against an override registry.
            triplet
                .policy
                .rules
                .iter()
                .map(|r| format!("- {}: {}", r.category_id, r.category_name.clone().unwrap_or_default()))
                .collect::<Vec<_>>()
                .join("\n")
        }
    };
    format!(
        "You are auditing one labeled training example for a content risk classifier.\n\
         \n\
         # Dynamic Policy\n\
         {policy}\n\
         \n\
         # Input\n\
         {input}\n\
         \n\
         # Proposed Judgment\n\
         Label: {label}\n\
         Category: {category}\n\
         Explanation: {explanation}\n\
         \n\
         # Task\n\
         State whether the proposed judgment is consistent with the policy and the input.\n\
         Reply with AGREE or DISAGREE at the start of a line, optionally followed by a reason.",
        input = triplet.mutated_input,
        label = label_name(triplet.judgment.label),
        category = triplet.judgment.category,
        explanation = triplet.judgment.explanation,
    )
}

/// Scans for the first line starting with `AGREE` or `DISAGREE` (case
/// sensitive, word boundary). No such line means the reply is unparseable.
fn parse_verifier_reply(text: &str) -> FilterOutcome {
    let bounded = |line: &str, word: &str| {
        line.strip_prefix(word)
            .map(|rest| !rest.starts_with(|c: char| c.is_ascii_alphanumeric()))
            .unwrap_or(false)
    };
    for line in text.lines() {
        if bounded(line, "DISAGREE") {
            return FilterOutcome::Disagreed;
        }
        if bounded(line, "AGREE") {
            return FilterOutcome::Keep;
        }
    }
    FilterOutcome::Unparseable
}

/// Stage 3: independent consistency check of a candidate triplet.
pub async fn consistency_filter(
    triplet: &SynthTriplet,
    verifier: &dyn CompletionBackend,
) -> Result<FilterOutcome, SynthError> {
    let request = CompletionRequest {
        prompt: render_verifier_prompt(triplet),
        max_new_tokens: STAGE3_MAX_TOKENS,
        want_top_logprobs: 0,
        stop_sequences: vec![],
        temperature: 0.0,
    };
    let result = verifier
        .complete(&request)
        .await
        .map_err(|source| SynthError::Backend {
            id: triplet.provenance.base_id.clone(),
            stage: "consistency_filter",
            source,
        })?;
    Ok(parse_verifier_reply(&result.text))
}

/// Run-level settings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineConfig {
    pub spec: MutationSpec,
    pub seed: u64,
    pub teacher_id: String,
    pub verifier_id: String,
    /// [`ErrorPolicy::Abort`] stops on the first backend failure;
    /// [`ErrorPolicy::CountAsSafe`] discards the sample, counting it against
    /// the stage that failed.
    pub error_policy: ErrorPolicy,
}

/// Per-run accounting. `input` always equals the sum of the other buckets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub input: usize,
    pub stage1_fail: usize,
    pub stage2_fail: usize,
    pub verifier_disagreed: usize,
    pub verifier_unparseable: usize,
    pub kept: usize,
}

impl PipelineStats {
    pub fn is_conserved(&self) -> bool {
        self.input
            == self.stage1_fail
                + self.stage2_fail
                + self.verifier_disagreed
                + self.verifier_unparseable
                + self.kept
    }
}

/// Runs the three-stage pipeline over `corpus`, appending one JSON line per
/// kept triplet to `out`. Samples are processed in corpus order; the per-sample
/// rule count and operation menu are drawn from a ChaCha8 stream seeded with
/// `config.seed`, so a fixed corpus, seed, and backend script reproduce the
/// output byte for byte.
pub async fn run_pipeline(
    corpus: &[BaseSample],
    config: &PipelineConfig,
    teacher: &dyn CompletionBackend,
    verifier: &dyn CompletionBackend,
    registry: &CategoryRegistry,
    out: &mut dyn Write,
) -> Result<PipelineStats, SynthError> {
    if corpus.is_empty() {
        return Err(SynthError::EmptyCorpus);
    }
    config.spec.check()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stats = PipelineStats {
        input: corpus.len(),
        ..Default::default()
    };

    for (corpus_index, sample) in corpus.iter().enumerate() {
        // Drawn before any stage so failures cannot desynchronize the stream.
        let k = rng.random_range(1..=config.spec.k);
        let mut ops = config.spec.allowed_ops.clone();
        ops.shuffle(&mut rng);
        let menu_len = rng.random_range(1..=ops.len());
        ops.truncate(menu_len);
        let sample_spec = MutationSpec {
            k,
            allowed_ops: ops,
            target: config.spec.target,
        };
        let base_id = sample
            .id
            .clone()
            .unwrap_or_else(|| corpus_index.to_string());

        let outcome = match mutate_policy(sample, &sample_spec, teacher, registry).await {
            Ok(outcome) => outcome,
            Err(SynthError::Backend { stage, source, .. })
                if config.error_policy == ErrorPolicy::Abort =>
            {
                return Err(SynthError::Backend { id: base_id, stage, source });
            }
            Err(_) => {
                stats.stage1_fail += 1;
                continue;
            }
        };

        let judgment =
            match refine_response(&outcome.mutated_input, &outcome.policy, teacher, registry).await
            {
                Ok(judgment) => judgment,
                Err(SynthError::Backend { stage, source, .. })
                    if config.error_policy == ErrorPolicy::Abort =>
                {
                    return Err(SynthError::Backend { id: base_id, stage, source });
                }
                Err(_) => {
                    stats.stage2_fail += 1;
                    continue;
                }
            };

        let triplet = SynthTriplet {
            mutated_input: outcome.mutated_input,
            policy: DynamicPolicy {
                rules: outcome.policy.rules().to_vec(),
            },
            judgment,
            provenance: Provenance {
                base_id,
                corpus_index,
                spec: sample_spec,
                seed: config.seed,
                teacher: config.teacher_id.clone(),
                verifier: config.verifier_id.clone(),
                input_modified: outcome.input_modified,
            },
        };

        match consistency_filter(&triplet, verifier).await {
            Ok(FilterOutcome::Keep) => {
                let line = serde_json::to_string(&triplet)
                    .map_err(|e| SynthError::Io(std::io::Error::other(e)))?;
                out.write_all(line.as_bytes())?;
                out.write_all(b"\n")?;
                stats.kept += 1;
            }
            Ok(FilterOutcome::Disagreed) => stats.verifier_disagreed += 1,
            Ok(FilterOutcome::Unparseable) => stats.verifier_unparseable += 1,
            Err(SynthError::Backend { id, stage, source })
                if config.error_policy == ErrorPolicy::Abort =>
            {
                return Err(SynthError::Backend { id, stage, source });
            }
            Err(_) => stats.verifier_unparseable += 1,
        }
    }

    debug_assert!(stats.is_conserved());
    Ok(stats)
}

/// Parses a JSONL corpus of [`BaseSample`]s. Line numbers are 1-based.
pub fn parse_corpus(raw: &str) -> Result<Vec<BaseSample>, SynthError> {
    let mut corpus = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: BaseSample = serde_json::from_str(line)
            .map_err(|e| SynthError::TeacherParse(format!("corpus line {}: {e}", idx + 1)))?;
        if sample.text.trim().is_empty() {
            return Err(SynthError::TeacherParse(format!(
                "corpus line {}: text must be non-empty",
                idx + 1
            )));
        }
        corpus.push(sample);
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CompletionResult, MockBackend};

    fn text_result(text: &str) -> CompletionResult {
        CompletionResult {
            text: text.into(),
            first_token: text.split_whitespace().next().unwrap_or_default().into(),
            first_token_top_logprobs: Default::default(),
        }
    }

    fn base_sample(text: &str, label: Decision) -> BaseSample {
        BaseSample {
            id: Some("s0".into()),
            text: text.into(),
            label,
            category: None,
        }
    }

    fn spec(k: u32) -> MutationSpec {
        MutationSpec {
            k,
            allowed_ops: vec![RuleOp::AddNew, RuleOp::ExpandScope, RuleOp::NarrowScope],
            target: MutationTarget::Reverse,
        }
    }

    fn stage1_reply(rules_json: &str, rewritten: Option<&str>) -> String {
        let rewritten = rewritten
            .map(|t| format!(", \"rewritten_text\": {}", serde_json::to_string(t).unwrap()))
            .unwrap_or_default();
        format!("Here you go.\n```json\n{{\"rules\": {rules_json}{rewritten}}}\n```\nDone.")
    }

    #[tokio::test]
    async fn mutate_policy_parses_fenced_json_and_validates() {
        let reply = stage1_reply(
            r#"[{"op": "add_new", "category_id": "a", "category_name": "Alpha", "definitions": ["Any mention of alpha."]}]"#,
            Some("rewritten sample"),
        );
        let teacher = MockBackend::new([text_result(&reply)]);
        let sample = base_sample("original sample", Decision::Safe);
        let outcome = mutate_policy(&sample, &spec(1), &teacher, &CategoryRegistry::builtin())
            .await
            .unwrap();
        assert_eq!(outcome.mutated_input, "rewritten sample");
        assert!(outcome.input_modified);
        assert_eq!(outcome.policy.rules().len(), 1);

        let prompt = &teacher.recorded_requests()[0].prompt;
        assert!(prompt.contains("Judgment: safe"));
        assert!(prompt.contains("Write exactly 1 rule(s)"));
    }

    #[tokio::test]
    async fn mutate_policy_rejects_bad_shape() {
        let registry = CategoryRegistry::builtin();
        let sample = base_sample("x", Decision::Unsafe);

        // No fence at all.
        let teacher = MockBackend::new([text_result("I refuse to answer in JSON.")]);
        assert!(matches!(
            mutate_policy(&sample, &spec(1), &teacher, &registry).await,
            Err(SynthError::TeacherParse(_))
        ));

        // Wrong rule count.
        let teacher = MockBackend::new([text_result(&stage1_reply(
            r#"[{"op": "add_new", "category_id": "a", "category_name": "A", "definitions": ["d"]},
                {"op": "add_new", "category_id": "b", "category_name": "B", "definitions": ["d"]}]"#,
            None,
        ))]);
        assert!(matches!(
            mutate_policy(&sample, &spec(1), &teacher, &registry).await,
            Err(SynthError::TeacherParse(_))
        ));

        // Disallowed operation.
        let narrow_only = MutationSpec {
            k: 1,
            allowed_ops: vec![RuleOp::NarrowScope],
            target: MutationTarget::Maintain,
        };
        let teacher = MockBackend::new([text_result(&stage1_reply(
            r#"[{"op": "add_new", "category_id": "a", "category_name": "A", "definitions": ["d"]}]"#,
            None,
        ))]);
        assert!(matches!(
            mutate_policy(&sample, &narrow_only, &teacher, &registry).await,
            Err(SynthError::TeacherParse(_))
        ));

        // Structurally fine, semantically invalid policy.
        let teacher = MockBackend::new([text_result(&stage1_reply(
            r#"[{"op": "add_new", "category_id": "abc", "category_name": "A", "definitions": ["d"]}]"#,
            None,
        ))]);
        assert!(matches!(
            mutate_policy(&sample, &spec(1), &teacher, &registry).await,
            Err(SynthError::PolicyRejected(_))
        ));
    }

    #[tokio::test]
    async fn refine_response_is_label_blind_and_parses_judgment() {
        let registry = CategoryRegistry::builtin();
        let policy = validate_policy(
            &DynamicPolicy {
                rules: vec![crate::policy::DynamicRule {
                    op: RuleOp::AddNew,
                    category_id: "a".into(),
                    category_name: Some("Alpha".into()),
                    definitions: vec!["Any mention of alpha.".into()],
                }],
            },
            &registry,
        )
        .unwrap();
        let teacher = MockBackend::new([text_result(
            "a\n<explanation>Mentions alpha directly.</explanation>",
        )]);
        let judgment = refine_response("mutated text", &policy, &teacher, &registry)
            .await
            .unwrap();
        assert_eq!(judgment.category, "a");
        assert_eq!(judgment.label, Decision::Unsafe);
        assert_eq!(judgment.explanation, "Mentions alpha directly.");

        let prompt = &teacher.recorded_requests()[0].prompt;
        let merged = registry.merge_dynamic(&policy).unwrap();
        let expected = render_prompt(&merged, &policy, &TextInput::prompt("mutated text").unwrap());
        assert_eq!(prompt, &expected);
    }

    #[test]
    fn verifier_reply_parsing_is_strict() {
        assert_eq!(parse_verifier_reply("AGREE"), FilterOutcome::Keep);
        assert_eq!(
            parse_verifier_reply("AGREE, the label matches."),
            FilterOutcome::Keep
        );
        assert_eq!(parse_verifier_reply("DISAGREE: wrong"), FilterOutcome::Disagreed);
        assert_eq!(
            parse_verifier_reply("Thinking...\nDISAGREE because reasons"),
            FilterOutcome::Disagreed
        );
        // Case, word boundary, and line-start requirements.
        assert_eq!(parse_verifier_reply("agree"), FilterOutcome::Unparseable);
        assert_eq!(parse_verifier_reply("AGREED"), FilterOutcome::Unparseable);
        assert_eq!(parse_verifier_reply("I AGREE"), FilterOutcome::Unparseable);
        assert_eq!(parse_verifier_reply(""), FilterOutcome::Unparseable);
    }

    #[tokio::test]
    async fn pipeline_conserves_samples_and_is_seed_deterministic() {
        let corpus: Vec<BaseSample> = (0..6)
            .map(|i| BaseSample {
                id: Some(format!("s{i}")),
                text: format!("sample number {i}"),
                label: if i % 2 == 0 { Decision::Safe } else { Decision::Unsafe },
                category: None,
            })
            .collect();
        let config = PipelineConfig {
            spec: spec(2),
            seed: 7,
            teacher_id: "teacher-model".into(),
            verifier_id: "verifier-model".into(),
            error_policy: ErrorPolicy::Abort,
        };

        // One rule in the teacher script per drawn rule slot, using the first
        // operation of the drawn menu so the reply always satisfies the
        // per-sample spec.
        let scripted_rules = |sspec: &MutationSpec| -> String {
            let rules: Vec<String> = match sspec.allowed_ops[0] {
                RuleOp::AddNew => (0..sspec.k)
                    .map(|j| {
                        let id = char::from(b'a' + j as u8);
                        format!(
                            r#"{{"op": "add_new", "category_id": "{id}", "category_name": "Cat {id}", "definitions": ["Mentions {id}."]}}"#
                        )
                    })
                    .collect(),
                op => {
                    let targets = ["pc", "dc", "dw", "pi", "ec"];
                    (0..sspec.k)
                        .map(|j| {
                            format!(
                                r#"{{"op": "{}", "category_id": "{}", "definitions": ["Adjusted boundary."]}}"#,
                                op_name(op),
                                targets[j as usize]
                            )
                        })
                        .collect()
                }
            };
            format!("[{}]", rules.join(","))
        };

        let run = |per_sample: &[MutationSpec]| {
            let teacher = MockBackend::empty();
            let verifier = MockBackend::empty();
            // Sample 2 fails stage 1 (no fence); sample 4 fails stage 2 (no
            // tags); sample 5 draws a disagreement.
            for (i, sspec) in per_sample.iter().enumerate() {
                if i == 2 {
                    teacher.push(text_result("no fence"));
                    continue;
                }
                teacher.push(text_result(&stage1_reply(&scripted_rules(sspec), None)));
                if i == 4 {
                    teacher.push(text_result("pc no tags here"));
                } else {
                    teacher.push(text_result("pc\n<explanation>Seen.</explanation>"));
                }
                if i != 4 {
                    verifier.push(text_result(if i == 5 { "DISAGREE" } else { "AGREE" }));
                }
            }
            (teacher, verifier)
        };

        // Re-derive the per-sample draws with the same seeded stream the
        // pipeline uses, so the scripts line up with what it will request.
        let mut probe = ChaCha8Rng::seed_from_u64(config.seed);
        let specs: Vec<MutationSpec> = (0..6)
            .map(|_| {
                let k = probe.random_range(1..=config.spec.k);
                let mut ops = config.spec.allowed_ops.clone();
                ops.shuffle(&mut probe);
                let menu_len = probe.random_range(1..=ops.len());
                ops.truncate(menu_len);
                MutationSpec {
                    k,
                    allowed_ops: ops,
                    target: config.spec.target,
                }
            })
            .collect();

        let mut run_once = Vec::new();
        let (teacher, verifier) = run(&specs);
        let stats = run_pipeline(
            &corpus,
            &config,
            &teacher,
            &verifier,
            &CategoryRegistry::builtin(),
            &mut run_once,
        )
        .await
        .unwrap();

        assert!(stats.is_conserved());
        assert_eq!(stats.input, 6);
        assert_eq!(stats.stage1_fail, 1);
        assert_eq!(stats.stage2_fail, 1);
        assert_eq!(stats.verifier_disagreed, 1);
        assert_eq!(stats.kept, 3);
        assert_eq!(stats.verifier_unparseable, 0);

        // Same seed and scripts reproduce the bytes.
        let mut run_twice = Vec::new();
        let (teacher, verifier) = run(&specs);
        let stats2 = run_pipeline(
            &corpus,
            &config,
            &teacher,
            &verifier,
            &CategoryRegistry::builtin(),
            &mut run_twice,
        )
        .await
        .unwrap();
        assert_eq!(stats, stats2);
        assert_eq!(run_once, run_twice);

        // Kept lines parse back into triplets with valid policies.
        let text = String::from_utf8(run_once).unwrap();
        let registry = CategoryRegistry::builtin();
        for line in text.lines() {
            let triplet: SynthTriplet = serde_json::from_str(line).unwrap();
            let validated = validate_policy(&triplet.policy, &registry).unwrap();
            let merged = registry.merge_dynamic(&validated).unwrap();
            assert!(merged.contains(&triplet.judgment.category));
            assert_eq!(triplet.provenance.seed, config.seed);
            assert_eq!(triplet.provenance.teacher, "teacher-model");
        }
    }

    #[tokio::test]
    async fn pipeline_backend_failure_respects_error_policy() {
        let corpus = vec![base_sample("only one", Decision::Safe)];
        let config = PipelineConfig {
            spec: spec(1),
            seed: 1,
            teacher_id: "t".into(),
            verifier_id: "v".into(),
            error_policy: ErrorPolicy::Abort,
        };
        let teacher = MockBackend::empty();
        teacher.push_transport_error("connection refused");
        let verifier = MockBackend::empty();
        let mut sink = Vec::new();
        let err = run_pipeline(
            &corpus,
            &config,
            &teacher,
            &verifier,
            &CategoryRegistry::builtin(),
            &mut sink,
        )
        .await
        .unwrap_err();
        assert!(matches!(err, SynthError::Backend { stage: "mutate_policy", .. }));

        let config = PipelineConfig {
            error_policy: ErrorPolicy::CountAsSafe,
            ..config
        };
        let teacher = MockBackend::empty();
        teacher.push_transport_error("connection refused");
        let mut sink = Vec::new();
        let stats = run_pipeline(
            &corpus,
            &config,
            &teacher,
            &verifier,
            &CategoryRegistry::builtin(),
            &mut sink,
        )
        .await
        .unwrap();
        assert_eq!(stats.stage1_fail, 1);
        assert!(stats.is_conserved());
    }

    #[test]
    fn corpus_parsing_reports_lines() {
        let good = concat!(
            r#"{"text": "hello", "label": "safe"}"#,
            "\n",
            r#"{"id": "x", "text": "boom", "label": "unsafe", "category": "dw"}"#,
            "\n",
        );
        let corpus = parse_corpus(good).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus[1].category.as_deref(), Some("dw"));

        let err = parse_corpus("{}\n").unwrap_err();
        assert!(matches!(err, SynthError::TeacherParse(_)));
        let err = parse_corpus(r#"{"text": "  ", "label": "safe"}"#).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
