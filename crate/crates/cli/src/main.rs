use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use riskgate_core::backend::HttpBackend;
use riskgate_core::eval::{evaluate, load_dataset, MetricsReport};
use riskgate_core::gateway::{load_config, serve, GatewayConfig};
use riskgate_core::policy::{validate_policy, DynamicPolicy, TextInput};
use riskgate_core::signals::{
    combined_distill_loss, grpo_reward, kl_forward, kl_reverse, CategoricalDist, GoldAnnotation,
    Rollout,
};
use riskgate_core::synth::{parse_corpus, run_pipeline, MutationSpec, PipelineConfig};
use riskgate_core::verdict::{classify, ClassifyMode};
use riskgate_core::ErrorPolicy;
use serde_json::json;

#[derive(Parser)]
#[command(name = "riskgate", version, about = "First-token risk classification tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Prompt,
    Response,
    Pair,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    DecisionOnly,
    WithExplanation,
}

#[derive(Clone, Copy, ValueEnum)]
enum ErrorPolicyArg {
    Abort,
    CountAsSafe,
}

impl From<ErrorPolicyArg> for ErrorPolicy {
    fn from(value: ErrorPolicyArg) -> Self {
        match value {
            ErrorPolicyArg::Abort => ErrorPolicy::Abort,
            ErrorPolicyArg::CountAsSafe => ErrorPolicy::CountAsSafe,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP gateway.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Classify a single input and print the verdict as JSON.
    Classify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "prompt")]
        kind: KindArg,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        response: Option<String>,
        /// JSON file holding dynamic policy rules for this call.
        #[arg(long)]
        policy_file: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "decision-only")]
        mode: ModeArg,
        #[arg(long)]
        include_scores: bool,
    },
    /// Score labeled datasets and print a metrics table.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// JSONL dataset path; repeat for multiple datasets.
        #[arg(long, required = true)]
        dataset: Vec<PathBuf>,
        /// Write the full report as JSON to this path.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "abort")]
        error_policy: ErrorPolicyArg,
    },
    /// Run the three-stage policy mutation pipeline over a base corpus.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// JSONL corpus of labeled base samples.
        #[arg(long)]
        corpus: PathBuf,
        /// JSON file holding the mutation settings (k, allowed_ops, target).
        #[arg(long)]
        mutation: PathBuf,
        /// Output JSONL path for kept triplets.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "abort")]
        error_policy: ErrorPolicyArg,
    },
    /// Training-signal arithmetic.
    #[command(subcommand)]
    Signals(SignalsCommand),
}

#[derive(Subcommand)]
enum SignalsCommand {
    /// Forward, reverse, and blended KL divergence between two distributions.
    Kl {
        /// JSON array of probabilities.
        #[arg(long)]
        p: String,
        /// JSON array of probabilities.
        #[arg(long)]
        q: String,
        /// Blend weight on the forward term.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Reward for one rollout against a gold annotation.
    Reward {
        /// Rollout as JSON.
        #[arg(long)]
        rollout: String,
        /// Gold annotation as JSON.
        #[arg(long)]
        gold: String,
    },
}

fn read_config(path: &Path) -> Result<GatewayConfig> {
    load_config(path).with_context(|| format!("loading config {}", path.display()))
}

fn build_text(kind: KindArg, prompt: Option<String>, response: Option<String>) -> Result<TextInput> {
    let need = |value: Option<String>, name: &str| {
        value.with_context(|| format!("--{name} is required for this kind"))
    };
    let input = match kind {
        KindArg::Prompt => TextInput::prompt(need(prompt, "prompt")?),
        KindArg::Response => TextInput::response(need(response, "response")?),
        KindArg::Pair => TextInput::pair(need(prompt, "prompt")?, need(response, "response")?),
    };
    input.map_err(Into::into)
}

async fn run_classify(
    config_path: PathBuf,
    kind: KindArg,
    prompt: Option<String>,
    response: Option<String>,
    policy_file: Option<PathBuf>,
    mode: ModeArg,
    include_scores: bool,
) -> Result<()> {
    let config = read_config(&config_path)?;
    let registry = config.registry()?;
    let text = build_text(kind, prompt, response)?;

    let policy: DynamicPolicy = match policy_file {
        Some(path) => serde_json::from_str(
            &fs::read_to_string(&path)
                .with_context(|| format!("reading policy file {}", path.display()))?,
        )
        .context("parsing policy file")?,
        None => DynamicPolicy::default(),
    };
    let validated = match validate_policy(&policy, &registry) {
        Ok(validated) => validated,
        Err(errors) => {
            let messages: Vec<String> = errors.iter().map(|e| e.to_string()).collect();
            bail!("invalid policy: {}", messages.join("; "));
        }
    };
    let merged = registry.merge_dynamic(&validated)?;

    let backend = HttpBackend::new(config.backend.clone())?;
    let mode = match mode {
        ModeArg::DecisionOnly => ClassifyMode::DecisionOnly,
        ModeArg::WithExplanation => ClassifyMode::WithExplanation,
    };
    let verdict = classify(
        &backend,
        &merged,
        &validated,
        &text,
        &config.thresholds,
        mode,
        &config.classify_options(),
    )
    .await?;

    let category_name = merged
        .lookup(&verdict.category)
        .map(|e| e.name.clone())
        .unwrap_or_default();
    let mut body = json!({
        "category": verdict.category,
        "category_name": category_name,
        "confidence": verdict.confidence,
        "decision": verdict.decision,
        "degraded": verdict.degraded,
    });
    if include_scores {
        body["scores"] = serde_json::to_value(&verdict.scores)?;
    }
    if let Some(explanation) = verdict.explanation {
        body["explanation"] = json!(explanation);
    }
    println!("{}", serde_json::to_string_pretty(&body)?);
    Ok(())
}

async fn run_eval(
    config_path: PathBuf,
    datasets: Vec<PathBuf>,
    report_path: Option<PathBuf>,
    error_policy: ErrorPolicyArg,
) -> Result<()> {
    let config = read_config(&config_path)?;
    let registry = config.registry()?;
    let backend = HttpBackend::new(config.backend.clone())?;
    let opts = config.classify_options();

    let mut results = Vec::with_capacity(datasets.len());
    for path in &datasets {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let samples = load_dataset(path, &registry)?;
        let metrics = evaluate(
            &backend,
            &registry,
            &name,
            &samples,
            &config.thresholds,
            error_policy.into(),
            &opts,
        )
        .await?;
        results.push(metrics);
    }

    let report = MetricsReport::new(results);
    print!("{}", report.to_table());
    if let Some(path) = report_path {
        fs::write(&path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing report {}", path.display()))?;
    }
    Ok(())
}

async fn run_synth(
    config_path: PathBuf,
    corpus_path: PathBuf,
    mutation_path: PathBuf,
    out_path: PathBuf,
    seed: u64,
    error_policy: ErrorPolicyArg,
) -> Result<()> {
    let config = read_config(&config_path)?;
    let registry = config.registry()?;

    let corpus = parse_corpus(
        &fs::read_to_string(&corpus_path)
            .with_context(|| format!("reading corpus {}", corpus_path.display()))?,
    )?;
    let spec: MutationSpec = serde_json::from_str(
        &fs::read_to_string(&mutation_path)
            .with_context(|| format!("reading mutation settings {}", mutation_path.display()))?,
    )
    .context("parsing mutation settings")?;

    let teacher_config = config.teacher.clone().unwrap_or_else(|| config.backend.clone());
    let verifier_config = config.verifier.clone().unwrap_or_else(|| config.backend.clone());
    let pipeline = PipelineConfig {
        spec,
        seed,
        teacher_id: teacher_config.model_name.clone(),
        verifier_id: verifier_config.model_name.clone(),
        error_policy: error_policy.into(),
    };
    let teacher = HttpBackend::new(teacher_config)?;
    let verifier = HttpBackend::new(verifier_config)?;

    let mut out = fs::File::create(&out_path)
        .with_context(|| format!("creating output {}", out_path.display()))?;
    let stats = run_pipeline(&corpus, &pipeline, &teacher, &verifier, &registry, &mut out).await?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn run_signals(command: SignalsCommand) -> Result<()> {
    match command {
        SignalsCommand::Kl { p, q, alpha } => {
            let p: Vec<f64> = serde_json::from_str(&p).context("parsing --p")?;
            let q: Vec<f64> = serde_json::from_str(&q).context("parsing --q")?;
            let p = CategoricalDist::new(p)?;
            let q = CategoricalDist::new(q)?;
            let body = json!({
                "forward": kl_forward(&p, &q)?,
                "reverse": kl_reverse(&p, &q)?,
                "alpha": alpha,
                "combined": combined_distill_loss(&p, &q, alpha)?,
            });
            println!("{}", serde_json::to_string_pretty(&body)?);
        }
        SignalsCommand::Reward { rollout, gold } => {
            let rollout: Rollout = serde_json::from_str(&rollout).context("parsing --rollout")?;
            let gold: GoldAnnotation = serde_json::from_str(&gold).context("parsing --gold")?;
            let body = json!({ "reward": grpo_reward(&rollout, &gold) });
            println!("{}", serde_json::to_string_pretty(&body)?);
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    match Cli::parse().command {
        Command::Serve { config } => {
            let config = read_config(&config)?;
            serve(config).await?;
        }
        Command::Classify {
            config,
            kind,
            prompt,
            response,
            policy_file,
            mode,
            include_scores,
        } => run_classify(config, kind, prompt, response, policy_file, mode, include_scores).await?,
        Command::Eval {
            config,
            dataset,
            report,
            error_policy,
        } => run_eval(config, dataset, report, error_policy).await?,
        Command::Synth {
            config,
            corpus,
            mutation,
            out,
            seed,
            error_policy,
        } => run_synth(config, corpus, mutation, out, seed, error_policy).await?,
        Command::Signals(command) => run_signals(command)?,
    }
    Ok(())
}
