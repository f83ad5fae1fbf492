//! HTTP gateway over the classifier.
//!
//! `POST /v1/classify` runs one classification; `GET /healthz` reports
//! liveness without touching the backend. Handlers are stateless between
//! requests: identical requests against an identically scripted backend
//! produce identical responses. Error mapping: bad request bodies and policy
//! violations are 400, upstream failures are 502, broken internal invariants
//! are 500.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backend::{BackendConfig, BackendError, CompletionBackend, HttpBackend, API_KEY_ENV};
use crate::policy::{validate_policy, DynamicPolicy, PolicyError, TextInput, TextKind};
use crate::taxonomy::CategoryRegistry;
use crate::verdict::{
    classify, ClassifyError, ClassifyMode, ClassifyOptions, Decision, ExplainMode, ScoreVector,
    ThresholdVector, DEFAULT_SCORE_FLOOR,
};

/// Gateway settings, loaded from TOML.
#[derive(Debug, Clone, Deserialize)]
pub struct GatewayConfig {
    #[serde(default = "default_listen_addr")]
    pub listen_addr: String,
    pub backend: BackendConfig,
    /// Stage-1/2 teacher for synthesis runs; falls back to `backend`.
    #[serde(default)]
    pub teacher: Option<BackendConfig>,
    /// Stage-3 verifier for synthesis runs; falls back to `backend`.
    #[serde(default)]
    pub verifier: Option<BackendConfig>,
    #[serde(default)]
    pub thresholds: ThresholdVector,
    #[serde(default)]
    pub default_mode: ClassifyMode,
    #[serde(default)]
    pub explain_mode: ExplainMode,
    #[serde(default = "default_explanation_max_tokens")]
    pub explanation_max_tokens: u32,
    #[serde(default = "default_floor")]
    pub score_floor: f64,
    /// Replaces the built-in category table when set.
    #[serde(default)]
    pub registry_override_path: Option<PathBuf>,
}

fn default_listen_addr() -> String {
    "127.0.0.1:8080".to_string()
}

fn default_explanation_max_tokens() -> u32 {
    256
}

fn default_floor() -> f64 {
    DEFAULT_SCORE_FLOOR
}

#[derive(Debug, Error)]
pub enum ConfigError {
    /// Unreadable or syntactically invalid config file. The message carries
    /// the location toml reports.
    #[error("config parse error: {0}")]
    Parse(String),
    /// Syntactically fine but violates an invariant.
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Reads and validates a TOML config file. The `RISKGATE_API_KEY` environment
/// variable, when set and non-empty, overrides any api_key from the file.
pub fn load_config(path: &Path) -> Result<GatewayConfig, ConfigError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
    let mut config: GatewayConfig = toml::from_str(&raw)
        .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;

    config
        .thresholds
        .check()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if config.score_floor.is_nan() || config.score_floor <= 0.0 {
        return Err(ConfigError::Invalid("score_floor must be positive".into()));
    }
    if config.backend.base_url.trim().is_empty() {
        return Err(ConfigError::Invalid("backend.base_url must be non-empty".into()));
    }
    if config.backend.model_name.trim().is_empty() {
        return Err(ConfigError::Invalid("backend.model_name must be non-empty".into()));
    }

    if let Ok(key) = std::env::var(API_KEY_ENV) {
        if !key.is_empty() {
            config.backend.api_key = Some(key.clone());
            if let Some(teacher) = &mut config.teacher {
                teacher.api_key = Some(key.clone());
            }
            if let Some(verifier) = &mut config.verifier {
                verifier.api_key = Some(key);
            }
        }
    }
    Ok(config)
}

impl GatewayConfig {
    /// Registry selected by the config: the override file when given,
    /// otherwise the built-in table.
    pub fn registry(&self) -> Result<CategoryRegistry, ConfigError> {
        match &self.registry_override_path {
            Some(path) => CategoryRegistry::from_override_file(path)
                .map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(CategoryRegistry::builtin()),
        }
    }

    pub fn classify_options(&self) -> ClassifyOptions {
        ClassifyOptions {
            floor: self.score_floor,
            top_k_logprobs: self.backend.top_k_logprobs,
            explain_mode: self.explain_mode,
            explanation_max_tokens: self.explanation_max_tokens,
        }
    }
}

/// Shared handler state.
pub struct GatewayState {
    pub registry: CategoryRegistry,
    pub backend: Arc<dyn CompletionBackend>,
    pub thresholds: ThresholdVector,
    pub default_mode: ClassifyMode,
    pub options: ClassifyOptions,
}

impl GatewayState {
    /// Builds state with an HTTP backend from the config.
    pub fn from_config(config: &GatewayConfig) -> Result<Self, ConfigError> {
        let backend = HttpBackend::new(config.backend.clone())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Self::with_backend(config, Arc::new(backend))
    }

    /// Same as [`GatewayState::from_config`] but with an injected backend;
    /// used by tests to run against a scripted mock.
    pub fn with_backend(
        config: &GatewayConfig,
        backend: Arc<dyn CompletionBackend>,
    ) -> Result<Self, ConfigError> {
        Ok(Self {
            registry: config.registry()?,
            backend,
            thresholds: config.thresholds.clone(),
            default_mode: config.default_mode,
            options: config.classify_options(),
        })
    }
}

/// Classification request body. Fields irrelevant to `kind` are ignored.
#[derive(Debug, Clone, Deserialize)]
pub struct ClassifyRequest {
    pub kind: TextKind,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub response: Option<String>,
    #[serde(default)]
    pub policy: Option<DynamicPolicy>,
    #[serde(default)]
    pub mode: Option<ClassifyMode>,
    /// Replaces the configured thresholds for this request only.
    #[serde(default)]
    pub thresholds_override: Option<ThresholdVector>,
    #[serde(default)]
    pub include_scores: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassifyResponse {
    pub category: String,
    pub category_name: String,
    pub confidence: f64,
    pub decision: Decision,
    pub degraded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<ScoreVector>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

/// Handler-level error with its HTTP mapping.
#[derive(Debug)]
enum GatewayError {
    BadRequest(serde_json::Value),
    Upstream(String),
    Internal(String),
}

impl GatewayError {
    fn bad_request(message: impl Into<String>) -> Self {
        GatewayError::BadRequest(json!({ "error": message.into() }))
    }

    fn policy(errors: Vec<PolicyError>) -> Self {
        let rendered: Vec<String> = errors.iter().map(|e| e.to_string()).collect();
        GatewayError::BadRequest(json!({
            "error": "invalid policy",
            "violations": errors,
            "messages": rendered,
        }))
    }
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        match self {
            GatewayError::BadRequest(body) => (StatusCode::BAD_REQUEST, Json(body)).into_response(),
            GatewayError::Upstream(message) => (
                StatusCode::BAD_GATEWAY,
                Json(json!({ "error": message })),
            )
                .into_response(),
            GatewayError::Internal(message) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                Json(json!({ "error": message })),
            )
                .into_response(),
        }
    }
}

fn classify_error_to_gateway(err: ClassifyError) -> GatewayError {
    match err {
        // Upstream unreachable or answering garbage: the gateway itself is fine.
        ClassifyError::Backend(BackendError::Transport(m)) => {
            GatewayError::Upstream(format!("backend transport error: {m}"))
        }
        ClassifyError::Backend(BackendError::MalformedResponse(m)) => {
            GatewayError::Upstream(format!("backend returned malformed payload: {m}"))
        }
        ClassifyError::Backend(BackendError::ScriptExhausted) => {
            GatewayError::Upstream("backend script exhausted".into())
        }
        ClassifyError::UnmappedFirstToken(token) => GatewayError::Upstream(format!(
            "backend produced no usable category token (first token {token:?})"
        )),
        ClassifyError::MissingExplanationTags => {
            GatewayError::Upstream("backend produced no tagged explanation".into())
        }
        ClassifyError::InvalidThreshold(m) => GatewayError::bad_request(format!("invalid threshold: {m}")),
        ClassifyError::DegenerateDistribution => {
            GatewayError::Internal("score renormalization invariant breached".into())
        }
    }
}

fn require_field<'a>(
    field: Option<&'a String>,
    kind: TextKind,
    name: &str,
) -> Result<&'a str, GatewayError> {
    field
        .map(String::as_str)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| {
            GatewayError::bad_request(format!(
                "kind {:?} requires a non-empty {name}",
                kind_name(kind)
            ))
        })
}

fn build_text_input(body: &ClassifyRequest) -> Result<TextInput, GatewayError> {
    let kind = body.kind;
    let input = match kind {
        TextKind::Prompt => TextInput::prompt(require_field(body.prompt.as_ref(), kind, "prompt")?),
        TextKind::Response => {
            TextInput::response(require_field(body.response.as_ref(), kind, "response")?)
        }
        TextKind::Pair => TextInput::pair(
            require_field(body.prompt.as_ref(), kind, "prompt")?,
            require_field(body.response.as_ref(), kind, "response")?,
        ),
    };
    input.map_err(|e| GatewayError::bad_request(e.to_string()))
}

fn kind_name(kind: TextKind) -> &'static str {
    match kind {
        TextKind::Prompt => "prompt",
        TextKind::Response => "response",
        TextKind::Pair => "pair",
    }
}

async fn handle_classify(
    State(state): State<Arc<GatewayState>>,
    Json(body): Json<ClassifyRequest>,
) -> Result<Json<ClassifyResponse>, GatewayError> {
    let text = build_text_input(&body)?;

    let policy = body.policy.clone().unwrap_or_default();
    let validated = validate_policy(&policy, &state.registry).map_err(GatewayError::policy)?;
    let merged = state
        .registry
        .merge_dynamic(&validated)
        .map_err(|e| GatewayError::bad_request(e.to_string()))?;

    let thresholds = body
        .thresholds_override
        .clone()
        .unwrap_or_else(|| state.thresholds.clone());
    thresholds
        .check()
        .map_err(|e| GatewayError::bad_request(e.to_string()))?;

    let mode = body.mode.unwrap_or(state.default_mode);
    let verdict = classify(
        state.backend.as_ref(),
        &merged,
        &validated,
        &text,
        &thresholds,
        mode,
        &state.options,
    )
    .await
    .map_err(classify_error_to_gateway)?;

    let category_name = merged
        .lookup(&verdict.category)
        .map(|e| e.name.clone())
        .ok_or_else(|| GatewayError::Internal("verdict category missing from registry".into()))?;

    Ok(Json(ClassifyResponse {
        category: verdict.category,
        category_name,
        confidence: verdict.confidence,
        decision: verdict.decision,
        degraded: verdict.degraded,
        scores: body.include_scores.then_some(verdict.scores),
        explanation: verdict.explanation,
    }))
}

async fn handle_healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

/// Builds the router; exposed separately so tests can drive it in-process.
pub fn router(state: Arc<GatewayState>) -> Router {
    Router::new()
        .route("/v1/classify", post(handle_classify))
        .route("/healthz", get(handle_healthz))
        .with_state(state)
}

/// Binds `listen_addr` and serves until the process is stopped.
pub async fn serve(config: GatewayConfig) -> Result<(), ConfigError> {
    let state = Arc::new(GatewayState::from_config(&config)?);
    let app = router(state);
    let listener = tokio::net::TcpListener::bind(&config.listen_addr)
        .await
        .map_err(|e| ConfigError::Invalid(format!("cannot bind {}: {e}", config.listen_addr)))?;
    tracing::info!(addr = %config.listen_addr, "gateway listening");
    axum::serve(listener, app)
        .await
        .map_err(|e| ConfigError::Invalid(e.to_string()))
}
