//! Risk category registry.
//!
//! The registry is an ordered list of categories; order is load-bearing because
//! it fixes both the rendered category list and argmax tie-breaking. The first
//! entry is always the safe category `sec`, followed by 28 built-in risk
//! categories grouped into 9 dimensions. Dynamic categories appended through a
//! policy keep their validated order after the built-ins.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{RuleOp, ValidatedPolicy};

/// ID of the one category that is never thresholded and never unsafe.
pub const SAFE_CATEGORY_ID: &str = "sec";

/// Where a registry entry came from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryOrigin {
    /// Built in or loaded from a registry override file.
    #[default]
    System,
    /// Added at request time by an `add_new` policy rule.
    Dynamic,
}

/// One category entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryInfo {
    pub id: String,
    pub name: String,
    /// Risk dimension grouping; empty for the safe category and dynamic entries.
    #[serde(default)]
    pub dimension: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub origin: CategoryOrigin,
}

impl CategoryInfo {
    fn check(&self) -> Result<(), TaxonomyError> {
        let id_ok = !self.id.is_empty()
            && self.id.len() <= 4
            && self.id.bytes().all(|b| b.is_ascii_lowercase());
        if !id_ok {
            return Err(TaxonomyError::InvalidId(self.id.clone()));
        }
        if self.name.trim().is_empty() {
            return Err(TaxonomyError::EmptyName(self.id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    /// IDs are 1 to 4 ASCII lowercase letters so they decode as one token.
    #[error("invalid category id {0:?}: expected 1-4 ascii lowercase letters")]
    InvalidId(String),
    #[error("category {0:?} has an empty name")]
    EmptyName(String),
    #[error("duplicate category id {0:?}")]
    DuplicateId(String),
    #[error("category {0:?} not found in registry")]
    NotFound(String),
    #[error("registry must contain the safe category {SAFE_CATEGORY_ID:?}")]
    MissingSafeCategory,
    #[error("registry override file error: {0}")]
    OverrideFile(String),
}

/// Ordered, ID-unique category table.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryRegistry {
    entries: Vec<CategoryInfo>,
    by_id: HashMap<String, usize>,
}

/// `(id, name, dimension, description)` rows for the built-in table.
const BUILTIN: &[(&str, &str, &str, &str)] = &[
    (
        "sec",
        "Safe",
        "",
        "Content that does not match any risk category.",
    ),
    (
        "pc",
        "Pornographic Contraband",
        "Crimes and Illegal Activities",
        "Content involving the dissemination of obscene materials, child pornography, and other illegal sexual information.",
    ),
    (
        "dc",
        "Drug Crimes",
        "Crimes and Illegal Activities",
        "Discussion related to the manufacturing, trafficking, or abuse of illegal drugs or controlled substances.",
    ),
    (
        "dw",
        "Dangerous Weapons",
        "Crimes and Illegal Activities",
        "Information or instructions regarding the creation, acquisition, or use of illegal weapons such as firearms and explosives.",
    ),
    (
        "pi",
        "Property Infringement",
        "Crimes and Illegal Activities",
        "Content that encourages or provides methods for theft, fraud, embezzlement, or damage to public or private property.",
    ),
    (
        "ec",
        "Economic Crimes",
        "Crimes and Illegal Activities",
        "Topics related to financial fraud, money laundering, illegal fundraising, and other activities that disrupt economic order.",
    ),
    (
        "ac",
        "Abusive Curses",
        "Hate Speech",
        "Use of profane, vulgar, or insulting language to attack or degrade individuals or groups.",
    ),
    (
        "def",
        "Defamation",
        "Hate Speech",
        "Spreading false information intended to harm the reputation of a person, group, or organization.",
    ),
    (
        "ti",
        "Threats and Intimidation",
        "Hate Speech",
        "Content that explicitly or implicitly threatens violence, harm, or coercion against others.",
    ),
    (
        "cy",
        "Cyberbullying",
        "Hate Speech",
        "Persistent online harassment, insults, or social exclusion targeting an individual.",
    ),
    (
        "ph",
        "Physical Health",
        "Physical and Mental Health",
        "Content that encourages self-harm, eating disorders, dangerous challenges, or provides unsafe and unverified medical advice.",
    ),
    (
        "mh",
        "Mental Health",
        "Physical and Mental Health",
        "Content that glorifies suicide, promotes harmful psychological practices, or discourages seeking professional mental health support.",
    ),
    (
        "se",
        "Social Ethics",
        "Ethics and Morality",
        "Content that violates widely accepted societal moral standards, such as promoting academic misconduct, cheating, or extreme selfishness.",
    ),
    (
        "sci",
        "Science Ethics",
        "Ethics and Morality",
        "Discussion of or incitement to unethical scientific practices, such as non-therapeutic human cloning or irresponsible genetic engineering.",
    ),
    (
        "pp",
        "Personal Privacy",
        "Data Privacy",
        "Attempts to elicit, expose, or misuse personally identifiable information (PII) such as contact details, home addresses, or financial data.",
    ),
    (
        "cs",
        "Commercial Secret",
        "Data Privacy",
        "Attempts to unlawfully obtain or leak confidential business information, such as trade secrets, customer data, or internal strategies.",
    ),
    (
        "acc",
        "Access Control",
        "Cybersecurity",
        "Content related to bypassing security systems, unauthorized account access, or cracking software protections.",
    ),
    (
        "mc",
        "Malicious Code",
        "Cybersecurity",
        "Generation, distribution, or discussion of viruses, worms, Trojan horses, ransomware, or other malicious software.",
    ),
    (
        "ha",
        "Hacker Attack",
        "Cybersecurity",
        "Providing instructions or tools for conducting cyberattacks like DDoS, SQL injection, or phishing.",
    ),
    (
        "ps",
        "Physical Security",
        "Cybersecurity",
        "Information on compromising physical security systems, such as lock-picking techniques or disabling surveillance equipment.",
    ),
    (
        "ter",
        "Violent Terrorist Activities",
        "Extremism",
        "Content that promotes, glorifies, or provides instruction for acts of terrorism and violent extremism.",
    ),
    (
        "sd",
        "Social Disruption",
        "Extremism",
        "Incitement to riots, illegal assemblies, or other activities intended to severely disrupt social order and public safety.",
    ),
    (
        "ext",
        "Extremist Ideological Trends",
        "Extremism",
        "Dissemination of radical ideologies that advocate for violence, hatred, or the overthrow of established systems.",
    ),
    (
        "fin",
        "Finance",
        "Inappropriate Suggestions",
        "Providing unlicensed, speculative, or high-risk financial advice that could lead to significant monetary loss.",
    ),
    (
        "med",
        "Medicine",
        "Inappropriate Suggestions",
        "Offering medical diagnoses, treatment plans, or prescriptions without professional qualifications, potentially endangering health.",
    ),
    (
        "law",
        "Law",
        "Inappropriate Suggestions",
        "Giving unqualified legal advice or interpretations that could lead to adverse legal consequences.",
    ),
    (
        "cm",
        "Corruption of Minors",
        "Risks Involving Minors",
        "Content that encourages minors to engage in harmful or illegal behaviors like underage drinking, smoking, or truancy.",
    ),
    (
        "ma",
        "Minor Abuse and Exploitation",
        "Risks Involving Minors",
        "Content depicting or encouraging physical, psychological, or sexual abuse and exploitation of children.",
    ),
    (
        "md",
        "Minor Delinquency",
        "Risks Involving Minors",
        "Content involving minors as perpetrators in criminal activities, or providing guidance for such acts.",
    ),
];

impl CategoryRegistry {
    /// The built-in registry: `sec` plus 28 risk categories in template order.
    pub fn builtin() -> Self {
        let entries = BUILTIN
            .iter()
            .map(|&(id, name, dimension, description)| CategoryInfo {
                id: id.to_string(),
                name: name.to_string(),
                dimension: dimension.to_string(),
                description: description.to_string(),
                origin: CategoryOrigin::System,
            })
            .collect();
        // The built-in table is validated by unit tests; construction cannot fail.
        Self::from_entries(entries).expect("built-in registry is valid")
    }

    /// Builds a registry from explicit entries, checking ID shape, uniqueness,
    /// and the presence of the safe category.
    pub fn from_entries(entries: Vec<CategoryInfo>) -> Result<Self, TaxonomyError> {
        let mut by_id = HashMap::with_capacity(entries.len());
        for (idx, entry) in entries.iter().enumerate() {
            entry.check()?;
            if by_id.insert(entry.id.clone(), idx).is_some() {
                return Err(TaxonomyError::DuplicateId(entry.id.clone()));
            }
        }
        if !by_id.contains_key(SAFE_CATEGORY_ID) {
            return Err(TaxonomyError::MissingSafeCategory);
        }
        Ok(Self { entries, by_id })
    }

    /// Loads a replacement system registry from a JSON array of entries.
    /// The file replaces the built-in table wholesale; every entry is treated
    /// as a system category and `sec` must be present.
    pub fn from_override_file(path: &Path) -> Result<Self, TaxonomyError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| TaxonomyError::OverrideFile(format!("{}: {e}", path.display())))?;
        let mut entries: Vec<CategoryInfo> = serde_json::from_str(&raw)
            .map_err(|e| TaxonomyError::OverrideFile(format!("{}: {e}", path.display())))?;
        for entry in &mut entries {
            entry.origin = CategoryOrigin::System;
        }
        Self::from_entries(entries)
    }

    /// Returns a new registry with one dynamic entry per `add_new` rule
    /// appended after the existing entries. Scope rules do not add entries;
    /// their definitions are appended to the target entry's description.
    pub fn merge_dynamic(&self, policy: &ValidatedPolicy) -> Result<Self, TaxonomyError> {
        let mut entries = self.entries.clone();
        for rule in policy.rules() {
            match rule.op {
                RuleOp::AddNew => {
                    let name = rule
                        .category_name
                        .clone()
                        .ok_or_else(|| TaxonomyError::EmptyName(rule.category_id.clone()))?;
                    entries.push(CategoryInfo {
                        id: rule.category_id.clone(),
                        name,
                        dimension: String::new(),
                        description: rule.definitions.join("\n"),
                        origin: CategoryOrigin::Dynamic,
                    });
                }
                RuleOp::ExpandScope | RuleOp::NarrowScope => {
                    let idx = *self
                        .by_id
                        .get(&rule.category_id)
                        .ok_or_else(|| TaxonomyError::NotFound(rule.category_id.clone()))?;
                    let description = &mut entries[idx].description;
                    for definition in &rule.definitions {
                        description.push('\n');
                        description.push_str(definition);
                    }
                }
            }
        }
        Self::from_entries(entries)
    }

    pub fn lookup(&self, id: &str) -> Option<&CategoryInfo> {
        self.by_id.get(id).map(|&idx| &self.entries[idx])
    }

    /// Position in registry order; used for argmax tie-breaking.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn entries(&self) -> &[CategoryInfo] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn safe_id(&self) -> &str {
        SAFE_CATEGORY_ID
    }
}

impl Default for CategoryRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}
