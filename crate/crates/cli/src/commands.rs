use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use prunekv::inference::{self, BenchmarkConfig, GenerationRequest, PrefillMode, Sampling, BENCHMARK_HEADER};
use prunekv::model::checkpoint;
use prunekv::selftest;
use prunekv::training::{self, evaluate, train_from, CharTokenizer, Corpus, TrainConfig};
use prunekv::{Alpha, AlphaSchedule, GateMode, ModelConfig, ModelParams, PruningVariant};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{read_input, require_out, CliError, CliResult, ConfigFile};

/// Written next to every command's outputs.
#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    config: &'a C,
    files: Vec<String>,
}

fn write_manifest<C: Serialize>(out: &Path, command: &str, config: &C, files: &[&str]) -> CliResult<()> {
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config,
        files: files.iter().map(|f| f.to_string()).collect(),
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn parse_variant(name: &str, k: Option<usize>, depth: bool) -> CliResult<PruningVariant> {
    let variant = if name.contains(':') {
        name.parse()
    } else {
        PruningVariant::from_name(name, k)
    }
    .map_err(|e| CliError::Usage(e.to_string()))?;
    match (depth, variant) {
        (false, v) => Ok(v),
        (true, PruningVariant::Learned | PruningVariant::LearnedDepthPropagated) => Ok(PruningVariant::LearnedDepthPropagated),
        (true, v) => Err(CliError::Usage(format!("--depth-propagate needs a learned variant, got {v}"))),
    }
}

fn load_checkpoint(dir: &Path) -> CliResult<(ModelParams<f32>, checkpoint::CheckpointManifest)> {
    if !dir.join(checkpoint::MANIFEST_FILE).is_file() {
        return Err(CliError::Usage(format!("no checkpoint at {}", dir.display())));
    }
    Ok(checkpoint::load(dir)?)
}

fn checkpoint_tokenizer(manifest: &checkpoint::CheckpointManifest) -> CliResult<Option<CharTokenizer>> {
    match manifest.metadata.get("alphabet").and_then(|v| v.as_str()) {
        Some(a) => Ok(Some(CharTokenizer::from_alphabet(a)?)),
        None => Ok(None),
    }
}

fn checkpoint_variant(manifest: &checkpoint::CheckpointManifest) -> Option<String> {
    manifest.metadata.get("variant").and_then(|v| v.as_str()).map(str::to_string)
}

fn corpus_with(tokenizer: CharTokenizer, text: &str, held_out_fraction: f64) -> CliResult<Corpus> {
    let tokens = tokenizer
        .encode(text)
        .map_err(|e| CliError::Usage(format!("corpus does not fit the checkpoint alphabet: {e}")))?;
    let split = tokens.len() - (tokens.len() as f64 * held_out_fraction) as usize;
    Ok(Corpus {
        tokenizer,
        train: tokens[..split].to_vec(),
        held_out: tokens[split..].to_vec(),
    })
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug, Serialize)]
pub struct TrainFlags {
    /// Sparsity regularization weight.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Sequences per optimizer step.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha_start: Option<f64>,
    #[arg(long)]
    alpha_end: Option<f64>,
    /// Interaction dimension.
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Training window length, also the model's maximum context.
    #[arg(long)]
    context: Option<usize>,
    /// learned | learned_depth_propagated | dense | local | strided_sparse
    #[arg(long)]
    variant: Option<String>,
    /// Window or stride of the static variants.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// UTF-8 text; a synthetic context-switch corpus is generated when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train only the interaction projections and gate biases.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    freeze_backbone: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    depth_propagate: Option<bool>,
    #[arg(long)]
    log_every: Option<u64>,
    /// Held-out windows scored after training.
    #[arg(long)]
    eval_windows: Option<usize>,
    #[arg(long)]
    synthetic_chars: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    gamma: f64,
    steps: u64,
    batch: usize,
    lr: f64,
    alpha_start: f64,
    alpha_end: f64,
    r: usize,
    d_model: usize,
    layers: usize,
    heads: usize,
    context: usize,
    variant: String,
    k: Option<usize>,
    seed: u64,
    corpus: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    out: Option<PathBuf>,
    freeze_backbone: bool,
    depth_propagate: bool,
    log_every: u64,
    eval_windows: usize,
    synthetic_chars: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            gamma: t.gamma,
            steps: t.steps,
            batch: t.batch_size,
            lr: t.lr,
            alpha_start: t.alpha.alpha_start,
            alpha_end: t.alpha.alpha_end,
            r: 64,
            d_model: 128,
            layers: 4,
            heads: 4,
            context: t.context_len,
            variant: "learned".into(),
            k: None,
            seed: 0,
            corpus: None,
            ckpt: None,
            out: None,
            freeze_backbone: false,
            depth_propagate: false,
            log_every: 100,
            eval_windows: 32,
            synthetic_chars: 400_000,
        }
    }
}

pub fn train(flags: &TrainFlags, file: &ConfigFile) -> CliResult<()> {
    let s: TrainSettings = file.resolve("train", flags)?;
    let out = require_out(&s.out)?;
    let variant = parse_variant(&s.variant, s.k, s.depth_propagate)?;
    let text = match &s.corpus {
        Some(path) => read_input(path)?,
        None => training::synthetic_context_switch(s.seed, s.synthetic_chars),
    };
    let (params, corpus) = match &s.ckpt {
        Some(dir) => {
            let (params, manifest) = load_checkpoint(dir)?;
            let tokenizer = checkpoint_tokenizer(&manifest)?.unwrap_or_else(|| CharTokenizer::from_text(&text));
            (params, corpus_with(tokenizer, &text, 0.1)?)
        }
        None => {
            let corpus = Corpus::from_text(&text, 0.1)?;
            let cfg = ModelConfig::new(corpus.vocab_size(), s.d_model, s.layers, s.heads, s.r, s.context);
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            (ModelParams::<f32>::init(&cfg, s.seed)?, corpus)
        }
    };
    let config = TrainConfig {
        gamma: s.gamma,
        steps: s.steps,
        batch_size: s.batch,
        lr: s.lr,
        alpha: AlphaSchedule::new(s.alpha_start, s.alpha_end, s.steps.max(1)).map_err(|e| CliError::Usage(e.to_string()))?,
        seed: s.seed,
        context_len: s.context,
        variant,
        freeze_backbone: s.freeze_backbone,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    std::fs::create_dir_all(out)?;
    let log_every = s.log_every.max(1);
    let (params, records) = train_from(params, &config, &corpus, |r| {
        if r.step % log_every == 0 || r.step + 1 == config.steps {
            eprintln!(
                "step {:>6}  lm {:.4}  sparsity-loss {:.4}  alpha {:.3}  hard sparsity {:.3}",
                r.step, r.lm_loss, r.sparsity_loss, r.alpha, r.sparsity
            );
        }
    })?;

    let metadata = json!({
        "alphabet": corpus.tokenizer.alphabet(),
        "variant": variant.to_string(),
        "gamma": s.gamma,
        "steps": s.steps,
    });
    checkpoint::save(&params, &out.join("checkpoint"), metadata)?;
    training::write_records_csv(&out.join("records.csv"), &records)?;

    let windows = corpus.held_out_windows(s.context, s.eval_windows);
    let eval = if windows.is_empty() {
        json!(null)
    } else {
        let pruned = evaluate(&params, &windows, variant, GateMode::Hard, Alpha::ONE)?;
        let dense = evaluate(&params, &windows, PruningVariant::Dense, GateMode::Hard, Alpha::ONE)?;
        eprintln!(
            "held-out: loss {:.4} at sparsity {:.3} ({} windows); dense-attention loss {:.4}",
            pruned.lm_loss, pruned.sparsity, pruned.windows, dense.lm_loss
        );
        json!({ "hard": pruned, "dense": dense })
    };
    std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&eval)? + "\n")?;
    write_manifest(out, "train", &s, &["checkpoint/", "records.csv", "eval.json"])
}

// ---------------------------------------------------------------- generate

#[derive(Args, Debug, Serialize)]
pub struct GenerateFlags {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Prompt text; repeat for a batch.
    #[arg(long)]
    prompt: Option<Vec<String>>,
    /// One prompt per line.
    #[arg(long)]
    prompts_file: Option<PathBuf>,
    /// Read prompts as space-separated token ids instead of text.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    token_ids: Option<bool>,
    #[arg(long)]
    max_new: Option<usize>,
    /// greedy | temperature:<t> | top_k:<k>
    #[arg(long)]
    sampling: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults to the variant the checkpoint was trained with.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    depth_propagate: Option<bool>,
    /// pruned | dense
    #[arg(long)]
    prefill: Option<String>,
    #[arg(long)]
    stop_token: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSettings {
    ckpt: Option<PathBuf>,
    prompt: Option<Vec<String>>,
    prompts_file: Option<PathBuf>,
    token_ids: bool,
    max_new: Option<usize>,
    sampling: Option<String>,
    seed: u64,
    variant: Option<String>,
    k: Option<usize>,
    depth_propagate: bool,
    prefill: Option<String>,
    stop_token: Option<u32>,
    out: Option<PathBuf>,
}

fn escape_line(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

pub fn generate(flags: &GenerateFlags, file: &ConfigFile) -> CliResult<()> {
    let s: GenerateSettings = file.resolve("generate", flags)?;
    let out = require_out(&s.out)?;
    let ckpt = s.ckpt.as_deref().ok_or_else(|| CliError::Usage("--ckpt is required".into()))?;
    let (params, manifest) = load_checkpoint(ckpt)?;
    let tokenizer = checkpoint_tokenizer(&manifest)?;

    let mut lines: Vec<String> = s.prompt.clone().unwrap_or_default();
    if let Some(path) = &s.prompts_file {
        lines.extend(read_input(path)?.lines().map(str::to_string));
    }
    if lines.is_empty() {
        return Err(CliError::Usage("no prompts: pass --prompt or --prompts-file".into()));
    }
    let prompts = lines
        .iter()
        .map(|line| {
            if s.token_ids {
                line.split_whitespace()
                    .map(|t| t.parse::<u32>().map_err(|_| CliError::Usage(format!("bad token id `{t}`"))))
                    .collect::<CliResult<Vec<u32>>>()
            } else {
                let tok = tokenizer
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("checkpoint has no alphabet; use --token-ids".into()))?;
                tok.encode(line).map_err(|e| CliError::Usage(e.to_string()))
            }
        })
        .collect::<CliResult<Vec<_>>>()?;

    let variant_name = s.variant.clone().or_else(|| checkpoint_variant(&manifest)).unwrap_or_else(|| "learned".into());
    let variant = parse_variant(&variant_name, s.k, s.depth_propagate)?;
    let longest = prompts.iter().map(Vec::len).max().unwrap_or(0);
    let max_new = s.max_new.unwrap_or(64.min(params.config.max_context + 1 - longest.min(params.config.max_context)));
    let mut request = GenerationRequest::new(prompts, max_new);
    request.seed = s.seed;
    request.stop_token = s.stop_token;
    if let Some(sampling) = &s.sampling {
        request.sampling = sampling.parse::<Sampling>().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    request.prefill = match s.prefill.as_deref() {
        None | Some("pruned") => PrefillMode::Pruned,
        Some("dense") => PrefillMode::Dense,
        Some(other) => return Err(CliError::Usage(format!("unknown prefill mode `{other}`"))),
    };
    request.validate(&params).map_err(|e| CliError::Usage(e.to_string()))?;

    let generation = inference::generate(&params, &request, variant)?;
    std::fs::create_dir_all(out)?;
    let mut files = vec!["tokens.txt", "steps.csv", "drops.csv", "report.json"];
    let mut ids = std::io::BufWriter::new(std::fs::File::create(out.join("tokens.txt"))?);
    for row in &generation.tokens {
        let line: Vec<String> = row.iter().map(u32::to_string).collect();
        writeln!(ids, "{}", line.join(" "))?;
    }
    ids.flush()?;
    if let Some(tok) = &tokenizer {
        let mut text = std::io::BufWriter::new(std::fs::File::create(out.join("generations.txt"))?);
        for row in &generation.tokens {
            writeln!(text, "{}", escape_line(&tok.decode(row)))?;
        }
        text.flush()?;
        files.push("generations.txt");
    }
    let report = &generation.report;
    report.write_steps_csv(&out.join("steps.csv"))?;
    report.write_drops_csv(&out.join("drops.csv"))?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    eprintln!(
        "{} rows, {} new tokens each; read sparsity {:.3}; {:.1} tokens/s",
        generation.tokens.len(),
        max_new,
        report.read_sparsity,
        report.tokens_per_sec
    );
    write_manifest(out, "generate", &s, &files)
}

// ---------------------------------------------------------------- benchmark

#[derive(Args, Debug, Serialize)]
pub struct BenchmarkFlags {
    /// Benchmarks a freshly initialized model when absent.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    depth_propagate: Option<bool>,
    /// Comma-separated context lengths.
    #[arg(long, value_delimiter = ',')]
    context: Option<Vec<usize>>,
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',')]
    batch: Option<Vec<usize>>,
    /// Timed decode steps per repeat.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    warmups: Option<usize>,
    /// Enforce this kept fraction with synthetic gates.
    #[arg(long)]
    keep: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    homogeneous: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_cache_mb: Option<u64>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSettings {
    ckpt: Option<PathBuf>,
    variant: String,
    k: Option<usize>,
    depth_propagate: bool,
    context: Vec<usize>,
    batch: Vec<usize>,
    steps: usize,
    repeats: usize,
    warmups: usize,
    keep: Option<f64>,
    homogeneous: bool,
    seed: u64,
    max_cache_mb: u64,
    r: usize,
    d_model: usize,
    layers: usize,
    heads: usize,
    out: Option<PathBuf>,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        Self {
            ckpt: None,
            variant: "learned".into(),
            k: None,
            depth_propagate: false,
            context: b.contexts,
            batch: b.batch_sizes,
            steps: b.decode_steps,
            repeats: b.repeats,
            warmups: b.warmups,
            keep: None,
            homogeneous: false,
            seed: 0,
            max_cache_mb: b.max_cache_bytes >> 20,
            r: 64,
            d_model: 128,
            layers: 4,
            heads: 4,
            out: None,
        }
    }
}

pub fn benchmark(flags: &BenchmarkFlags, file: &ConfigFile) -> CliResult<()> {
    let s: BenchmarkSettings = file.resolve("benchmark", flags)?;
    let out = require_out(&s.out)?;
    let variant = parse_variant(&s.variant, s.k, s.depth_propagate)?;
    if s.context.is_empty() || s.batch.is_empty() {
        return Err(CliError::Usage("--context and --batch need at least one value".into()));
    }
    if s.keep.is_some_and(|f| !(0.0..=1.0).contains(&f)) {
        return Err(CliError::Usage("--keep must be in [0, 1]".into()));
    }
    let params = match &s.ckpt {
        Some(dir) => load_checkpoint(dir)?.0,
        None => {
            let longest = s.context.iter().copied().max().unwrap_or(1);
            let cfg = ModelConfig::new(64, s.d_model, s.layers, s.heads, s.r, longest);
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            ModelParams::<f32>::init(&cfg, s.seed)?
        }
    };
    let config = BenchmarkConfig {
        contexts: s.context.clone(),
        batch_sizes: s.batch.clone(),
        decode_steps: s.steps,
        warmups: s.warmups,
        repeats: s.repeats,
        homogeneous: s.homogeneous,
        keep_fraction: s.keep,
        variant,
        seed: s.seed,
        max_cache_bytes: s.max_cache_mb << 20,
    };
    std::fs::create_dir_all(out)?;
    let rows = inference::benchmark(&params, &config);
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out.join("benchmark.csv"))?);
    writeln!(csv, "{BENCHMARK_HEADER}")?;
    for row in &rows {
        writeln!(csv, "{}", row.to_csv())?;
        match &row.error {
            Some(e) => eprintln!("context {} batch {}: error: {e}", row.context, row.batch),
            None => eprintln!(
                "context {:>5} batch {:>3}: {:.3} ms/step, attention {:.3} ms, {:.0} tokens/s, read sparsity {:.3}",
                row.context, row.batch, row.step_ms, row.attention_ms, row.tokens_per_sec, row.read_sparsity
            ),
        }
    }
    csv.flush()?;
    write_manifest(out, "benchmark", &s, &["benchmark.csv"])
}

// ---------------------------------------------------------------- analyze

#[derive(Args, Debug, Serialize)]
pub struct AnalyzeFlags {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Text to sample windows from; the synthetic corpus when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Window length; defaults to the model's maximum context.
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    depth_propagate: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSettings {
    ckpt: Option<PathBuf>,
    corpus: Option<PathBuf>,
    context: Option<usize>,
    windows: usize,
    variant: Option<String>,
    k: Option<usize>,
    depth_propagate: bool,
    seed: u64,
    out: Option<PathBuf>,
}

impl Default for AnalyzeSettings {
    fn default() -> Self {
        Self {
            ckpt: None,
            corpus: None,
            context: None,
            windows: 16,
            variant: None,
            k: None,
            depth_propagate: false,
            seed: 0,
            out: None,
        }
    }
}

pub fn analyze(flags: &AnalyzeFlags, file: &ConfigFile) -> CliResult<()> {
    let s: AnalyzeSettings = file.resolve("analyze", flags)?;
    let out = require_out(&s.out)?;
    let ckpt = s.ckpt.as_deref().ok_or_else(|| CliError::Usage("--ckpt is required".into()))?;
    let (params, manifest) = load_checkpoint(ckpt)?;
    let variant_name = s.variant.clone().or_else(|| checkpoint_variant(&manifest)).unwrap_or_else(|| "learned".into());
    let variant = parse_variant(&variant_name, s.k, s.depth_propagate)?;
    let len = s.context.unwrap_or(params.config.max_context);
    if len == 0 || len > params.config.max_context {
        return Err(CliError::Usage(format!("--context must be in 1..={}", params.config.max_context)));
    }
    let text = match &s.corpus {
        Some(path) => read_input(path)?,
        None => training::synthetic_context_switch(s.seed, (s.windows + 1) * len * 12),
    };
    let tokenizer = checkpoint_tokenizer(&manifest)?
        .ok_or_else(|| CliError::Usage("checkpoint has no alphabet to tokenize the corpus".into()))?;
    let tokens = tokenizer
        .encode(&text)
        .map_err(|e| CliError::Usage(format!("corpus does not fit the checkpoint alphabet: {e}")))?;
    let windows: Vec<Vec<u32>> = tokens.chunks_exact(len).take(s.windows).map(<[u32]>::to_vec).collect();
    if windows.is_empty() {
        return Err(CliError::Usage(format!("corpus is shorter than one window of {len} tokens")));
    }
    let analysis = inference::analyze(&params, &windows, variant)?;
    analysis.write_csv(out)?;
    let summary = json!({
        "variant": variant.to_string(),
        "windows": analysis.windows,
        "window_len": analysis.window_len,
        "per_layer": analysis.per_layer,
        "aggregate": analysis.aggregate(),
    });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    eprintln!("per-layer sparsity {:?}, aggregate {:.3}", analysis.per_layer, analysis.aggregate());
    let mut files = vec![
        "summary.json".to_string(),
        "sparsity_per_layer.csv".into(),
        "sparsity_by_position.csv".into(),
        "kept_by_position.csv".into(),
        "triggers_by_token.csv".into(),
        "triggers_by_position.csv".into(),
    ];
    files.extend((0..analysis.masks.len()).map(|l| format!("mask_l{l}.csv")));
    let refs: Vec<&str> = files.iter().map(String::as_str).collect();
    write_manifest(out, "analyze", &s, &refs)
}

// ---------------------------------------------------------------- selftest

#[derive(Args, Debug, Serialize)]
pub struct SelftestFlags {
    #[arg(long)]
    seed: Option<u64>,
    /// Also write `selftest.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelftestSettings {
    seed: u64,
    out: Option<PathBuf>,
}

pub fn selftest(flags: &SelftestFlags, file: &ConfigFile) -> CliResult<()> {
    let s: SelftestSettings = file.resolve("selftest", flags)?;
    let reports = selftest::run_all(s.seed);
    for r in &reports {
        println!("{r}");
    }
    if let Some(out) = &s.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("selftest.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
        write_manifest(out, "selftest", &s, &["selftest.json"])?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} suites failed", reports.len())));
    }
    Ok(())
}
