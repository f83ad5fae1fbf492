//! Dynamic policies and prompt rendering.
//!
//! A dynamic policy is a per-request list of rules that either add a new
//! category or adjust the scope of a system category. Validation collects every
//! violation instead of stopping at the first, then normalizes rule order so
//! that rendering is deterministic: scope rules in registry order first, then
//! new categories alphabetically. [`render_prompt`] assembles the full
//! classification prompt; its output is byte-stable and golden-tested, so any
//! change here is a wire format change.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{CategoryOrigin, CategoryRegistry};

/// Rule operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleOp {
    /// Define a brand-new category with a single-letter ID.
    AddNew,
    /// Broaden what an existing system category covers.
    ExpandScope,
    /// Restrict what an existing system category covers.
    NarrowScope,
}

/// One dynamic rule as supplied by the caller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicRule {
    pub op: RuleOp,
    pub category_id: String,
    /// Required for `add_new`; ignored for scope rules (the registry name wins).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_name: Option<String>,
    pub definitions: Vec<String>,
}

/// An unvalidated policy: just the rule list, in caller order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicPolicy {
    #[serde(default)]
    pub rules: Vec<DynamicRule>,
}

impl DynamicPolicy {
    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Policy validation failure, tagged with the offending rule index.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyError {
    #[error("rule {index}: new category id {id:?} must be exactly one ascii lowercase letter")]
    IdNotSingleLetter { index: usize, id: String },
    #[error("rule {index}: {id:?} is not a system category")]
    UnknownSystemId { index: usize, id: String },
    #[error("rule {index}: category id {id:?} already has a rule or registry entry")]
    DuplicateRuleId { index: usize, id: String },
    #[error("rule {index}: every rule needs at least one non-empty definition")]
    EmptyDefinition { index: usize },
    #[error("rule {index}: add_new requires a non-empty category_name")]
    MissingCategoryName { index: usize },
}

/// A policy that passed validation. Rules are normalized: scope rules sorted by
/// registry position, then `add_new` rules sorted by ID; scope rules carry the
/// registry name so rendering never needs another lookup.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidatedPolicy {
    rules: Vec<DynamicRule>,
}

impl ValidatedPolicy {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn rules(&self) -> &[DynamicRule] {
        &self.rules
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// IDs introduced by `add_new` rules, in normalized order.
    pub fn new_category_ids(&self) -> impl Iterator<Item = &str> {
        self.rules
            .iter()
            .filter(|r| r.op == RuleOp::AddNew)
            .map(|r| r.category_id.as_str())
    }
}

/// Checks every rule against the system registry and returns either a
/// normalized policy or the full list of violations in rule order.
pub fn validate_policy(
    policy: &DynamicPolicy,
    registry: &CategoryRegistry,
) -> Result<ValidatedPolicy, Vec<PolicyError>> {
    let mut errors = Vec::new();
    let mut seen_ids: Vec<&str> = Vec::new();
    let mut accepted: Vec<DynamicRule> = Vec::new();

    for (index, rule) in policy.rules.iter().enumerate() {
        let mut rule_ok = true;
        let id = rule.category_id.as_str();

        match rule.op {
            RuleOp::AddNew => {
                if !(id.len() == 1 && id.bytes().all(|b| b.is_ascii_lowercase())) {
                    errors.push(PolicyError::IdNotSingleLetter {
                        index,
                        id: id.to_string(),
                    });
                    rule_ok = false;
                } else if registry.contains(id) {
                    errors.push(PolicyError::DuplicateRuleId {
                        index,
                        id: id.to_string(),
                    });
                    rule_ok = false;
                }
                match &rule.category_name {
                    Some(name) if !name.trim().is_empty() => {}
                    _ => {
                        errors.push(PolicyError::MissingCategoryName { index });
                        rule_ok = false;
                    }
                }
            }
            RuleOp::ExpandScope | RuleOp::NarrowScope => {
                let is_system = registry
                    .lookup(id)
                    .map(|entry| entry.origin == CategoryOrigin::System)
                    .unwrap_or(false);
                if !is_system {
                    errors.push(PolicyError::UnknownSystemId {
                        index,
                        id: id.to_string(),
                    });
                    rule_ok = false;
                }
            }
        }

        if rule.definitions.is_empty() || rule.definitions.iter().any(|d| d.trim().is_empty()) {
            errors.push(PolicyError::EmptyDefinition { index });
            rule_ok = false;
        }

        if seen_ids.contains(&id) {
            errors.push(PolicyError::DuplicateRuleId {
                index,
                id: id.to_string(),
            });
            rule_ok = false;
        }
        seen_ids.push(id);

        if rule_ok {
            let mut rule = rule.clone();
            if rule.op != RuleOp::AddNew {
                // Resolved once here so later rendering cannot drift from the registry.
                rule.category_name = registry.lookup(id).map(|e| e.name.clone());
            }
            accepted.push(rule);
        }
    }

    if !errors.is_empty() {
        return Err(errors);
    }

    accepted.sort_by(|a, b| {
        let key = |r: &DynamicRule| match r.op {
            RuleOp::ExpandScope | RuleOp::NarrowScope => {
                (0usize, registry.position(&r.category_id).unwrap_or(usize::MAX), r.category_id.clone())
            }
            RuleOp::AddNew => (1usize, 0, r.category_id.clone()),
        };
        key(a).cmp(&key(b))
    });
    Ok(ValidatedPolicy { rules: accepted })
}

/// Renders the `# Dynamic Policy` body. Each rule is a `- id: Name` header
/// followed by one two-space-indented `- definition` line per definition;
/// rules are separated by a blank line. Empty policies render as `""`.
pub fn render_policy_block(policy: &ValidatedPolicy) -> String {
    let mut blocks = Vec::with_capacity(policy.rules.len());
    for rule in &policy.rules {
        let name = rule.category_name.as_deref().unwrap_or_default();
        let mut block = format!("- {}: {}", rule.category_id, name);
        for definition in &rule.definitions {
            block.push_str("\n  - ");
            block.push_str(definition);
        }
        blocks.push(block);
    }
    blocks.join("\n\n")
}

/// What the classifier is judging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    #[serde(alias = "prompt_only")]
    Prompt,
    #[serde(alias = "response_only")]
    Response,
    Pair,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InputError {
    #[error("{0} text must be non-empty")]
    Empty(&'static str),
}

/// The text under classification: a user prompt, a model response, or both.
/// Constructors enforce non-empty parts, so a built value always renders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextInput {
    kind: TextKind,
    prompt: Option<String>,
    response: Option<String>,
}

impl TextInput {
    pub fn prompt(text: impl Into<String>) -> Result<Self, InputError> {
        let text = text.into();
        if text.is_empty() {
            return Err(InputError::Empty("prompt"));
        }
        Ok(Self {
            kind: TextKind::Prompt,
            prompt: Some(text),
            response: None,
        })
    }

    pub fn response(text: impl Into<String>) -> Result<Self, InputError> {
        let text = text.into();
        if text.is_empty() {
            return Err(InputError::Empty("response"));
        }
        Ok(Self {
            kind: TextKind::Response,
            prompt: None,
            response: Some(text),
        })
    }

    pub fn pair(prompt: impl Into<String>, response: impl Into<String>) -> Result<Self, InputError> {
        let prompt = prompt.into();
        let response = response.into();
        if prompt.is_empty() {
            return Err(InputError::Empty("prompt"));
        }
        if response.is_empty() {
            return Err(InputError::Empty("response"));
        }
        Ok(Self {
            kind: TextKind::Pair,
            prompt: Some(prompt),
            response: Some(response),
        })
    }

    pub fn kind(&self) -> TextKind {
        self.kind
    }

    pub fn prompt_text(&self) -> Option<&str> {
        self.prompt.as_deref()
    }

    pub fn response_text(&self) -> Option<&str> {
        self.response.as_deref()
    }

    /// Serialization used in the `Input Text:` slot. A bare prompt stays
    /// unlabeled; anything involving a response is labeled so the model can
    /// tell which side it is judging.
    pub fn render(&self) -> String {
        match self.kind {
            TextKind::Prompt => self.prompt.clone().unwrap_or_default(),
            TextKind::Response => format!("Response: {}", self.response.as_deref().unwrap_or_default()),
            TextKind::Pair => format!(
                "Prompt: {}\nResponse: {}",
                self.prompt.as_deref().unwrap_or_default(),
                self.response.as_deref().unwrap_or_default()
            ),
        }
    }
}

// The wrapped lines below end with a literal trailing space; it is part of the
// wire format and golden-tested. Do not trim.
const PREAMBLE: &str = "You are an expert in content safety evaluation, possessing strong language \n\
comprehension and risk identification skills.\n\
Your task is to classify the provided input text into the most appropriate \n\
category from the list below as part of a safety audit project.";

const INSTRUCTIONS: &str = "# Instructions\n\
- Identify the single most relevant category ID for the input text.\n\
- On the next line, provide a concise justification for your choice, placing it \n\
between <explanation> and </explanation> tags.";

/// Assembles the classification prompt. Sections are joined by blank lines:
/// preamble, category list, optional dynamic policy, instructions, `---`,
/// and the input text. No trailing newline.
pub fn render_prompt(
    registry: &CategoryRegistry,
    policy: &ValidatedPolicy,
    text: &TextInput,
) -> String {
    let mut category_list = String::from("# Category List");
    for entry in registry.entries() {
        category_list.push_str("\n- ");
        category_list.push_str(&entry.id);
        category_list.push_str(": ");
        category_list.push_str(&entry.name);
    }

    let mut sections: Vec<String> = vec![PREAMBLE.to_string(), category_list];
    if !policy.is_empty() {
        sections.push(format!("# Dynamic Policy\n{}", render_policy_block(policy)));
    }
    sections.push(INSTRUCTIONS.to_string());
    sections.push("---".to_string());
    sections.push(format!("Input Text: {}", text.render()));
    sections.join("\n\n")
}
