//! `stepsnet` command line.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime or numeric failures. Commands that write files put them under
//! `--out`, else `$STEPSNET_OUT`, else `./stepsnet-out`, together with a
//! `manifest.json` naming the command, seed, config hash and artifacts.

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use stepsnet::blocks::{BlockKind, Init};
use stepsnet::config::{emit_config, load_config, Format};
use stepsnet::costing::{allocate_depths, head_count, model_cost, width_schedule};
use stepsnet::gradcheck::{suite, SUITE_TOLERANCE};
use stepsnet::harness::ablation::{ablation_sweep, SweepKind};
use stepsnet::harness::train::{evaluate, train, TrainConfig};
use stepsnet::network::{InputSpec, Inputs, Network, NetworkSpec};
use stepsnet::presets::{network_preset, preset, PRESET_NAMES};
use stepsnet::steps::StepsConfig;
use stepsnet::{Error, Tensor};

pub const OUT_ENV: &str = "STEPSNET_OUT";
pub const DEFAULT_OUT: &str = "stepsnet-out";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "stepsnet", version, about = "Step-by-step network laboratory")]
struct Cli {
    /// Output directory (overrides $STEPSNET_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// FLOPs, parameters and layers of a preset or network config.
    Analyze(AnalyzeArgs),
    /// Step widths and depths for a base width and depth.
    Genconfig(GenconfigArgs),
    /// Train from a config file.
    Train(TrainArgs),
    /// Shortcut-ratio trace of a network at initialization.
    Probe(ProbeArgs),
    /// Mask, drop, step-count or allocation sweep.
    Ablate(AblateArgs),
    /// Finite-difference check of every op and block.
    Gradcheck(GradcheckArgs),
    /// Task metric of a saved checkpoint.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct ModelSource {
    /// Bundled preset name.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,
    /// Network config file (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// `dotted.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Table,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value = "json")]
    format: ReportFormat,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConfigFormat {
    Toml,
    Json,
}

impl From<ConfigFormat> for Format {
    fn from(f: ConfigFormat) -> Self {
        match f {
            ConfigFormat::Toml => Format::Toml,
            ConfigFormat::Json => Format::Json,
        }
    }
}

#[derive(Debug, Args)]
struct GenconfigArgs {
    #[arg(long)]
    base_depth: usize,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    steps: usize,
    #[arg(long, value_enum, default_value = "transformer")]
    kind: Kind,
    /// Target channels per attention head.
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    #[arg(long, value_enum, default_value = "toml")]
    format: ConfigFormat,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Transformer,
    Mlp,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples per probe batch.
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Zero-initialize every branch output (the trace is then all ones).
    #[arg(long)]
    zero_branches: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// mask_table6, drop_table7, steps_table4 or alloc_table5.
    #[arg(long)]
    sweep: String,
    /// Trained checkpoint; required by mask_table6 and drop_table7.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = SUITE_TOLERANCE)]
    tolerance: f64,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    checkpoint: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(m: impl Display) -> Self {
        Self { code: 1, message: m.to_string() }
    }

    fn runtime(m: impl Display) -> Self {
        Self { code: 2, message: m.to_string() }
    }
}

/// Errors from loading or checking inputs.
fn setup(e: Error) -> Failure {
    Failure::config(e)
}

/// Errors from doing the work: configuration-class errors still exit 1.
fn work(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::Partition { .. } | Error::Range { .. } | Error::Checkpoint(_) | Error::Precondition(_) => {
            Failure::config(e)
        }
        _ => Failure::runtime(e),
    }
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: Vec<String>,
    subcommand: &'static str,
    seed: u64,
    config_file: String,
    config_hash: String,
    artifacts: Vec<String>,
    version: &'static str,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Outputs {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self, Failure> {
        std::fs::create_dir_all(&dir).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir, artifacts: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))?;
        self.record(name);
        Ok(())
    }

    fn record(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    /// Writes `config_text` as the run config, then the manifest.
    fn finish(mut self, argv: &[String], subcommand: &'static str, seed: u64, config_name: &str, config_text: &str) -> Result<PathBuf, Failure> {
        self.write(config_name, config_text)?;
        let manifest = Manifest {
            command: argv.to_vec(),
            subcommand,
            seed,
            config_file: config_name.to_string(),
            config_hash: sha256_hex(config_text.as_bytes()),
            artifacts: self.artifacts.clone(),
            version: env!("CARGO_PKG_VERSION"),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        let path = self.dir.join(MANIFEST);
        std::fs::write(&path, text).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

struct Context {
    argv: Vec<String>,
    /// Directory given by flag or environment.
    stated_out: Option<PathBuf>,
}

impl Context {
    fn out_dir(&self) -> PathBuf {
        self.stated_out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

fn emit<C: Serialize>(cfg: &C) -> Result<String, Failure> {
    emit_config(cfg, Format::Toml).map_err(setup)
}

fn load_spec(preset_name: Option<&str>, config: Option<&Path>, overrides: &[String]) -> Result<NetworkSpec, Failure> {
    match (preset_name, config) {
        (Some(name), _) => {
            let spec = network_preset(name).map_err(setup)?;
            if overrides.is_empty() {
                Ok(spec)
            } else {
                let text = emit(&spec)?;
                stepsnet::config::load_str(&text, Format::Toml, name, overrides).map_err(setup)
            }
        }
        (None, Some(path)) => load_config(path, overrides).map_err(setup),
        (None, None) => Err(Failure::config("one of --preset or --config is required")),
    }
}

fn analyze(ctx: &Context, a: &AnalyzeArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let (report, config_text) = match (&a.preset, &a.config) {
        (Some(name), None) if a.overrides.is_empty() => {
            let p = preset(name).map_err(setup)?;
            let text = match &p {
                stepsnet::presets::Preset::Isotropic(spec) => emit(spec)?,
                stepsnet::presets::Preset::Hierarchical(_) => format!("preset = {name:?}\n"),
            };
            (p.report(name).map_err(work)?, text)
        }
        _ => {
            let spec = load_spec(a.preset.as_deref(), a.config.as_deref(), &a.overrides)?;
            let name = a.preset.clone().unwrap_or_else(|| a.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
            let report = stepsnet::presets::PresetReport::Cost(model_cost(&spec).map_err(work)?.with_name(name));
            (report, emit(&spec)?)
        }
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    let shown = match (a.format, &report) {
        (ReportFormat::Table, stepsnet::presets::PresetReport::Cost(c)) => c.to_table(),
        _ => json.clone(),
    };
    stdout.write_all(shown.as_bytes()).map_err(Failure::runtime)?;
    if let Some(dir) = &ctx.stated_out {
        let mut out = Outputs::new(dir.clone())?;
        out.write("cost_report.json", &json)?;
        out.finish(&ctx.argv, "analyze", 0, "config.toml", &config_text)?;
    }
    Ok(())
}

pub fn generate_steps_config(kind: BlockKind, width: usize, base_depth: usize, steps: usize, head_dim: usize) -> stepsnet::Result<StepsConfig> {
    let widths = width_schedule(width, steps)?;
    let depths = allocate_depths(base_depth, steps)?;
    let heads: Vec<usize> = match kind {
        BlockKind::Transformer => widths.iter().map(|&w| head_count(w, head_dim)).collect(),
        BlockKind::Mlp => Vec::new(),
    };
    StepsConfig::from_step_widths(kind, &widths, &depths, &heads)
}

fn genconfig(ctx: &Context, g: &GenconfigArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let kind = match g.kind {
        Kind::Transformer => BlockKind::Transformer,
        Kind::Mlp => BlockKind::Mlp,
    };
    let cfg = generate_steps_config(kind, g.width, g.base_depth, g.steps, g.head_dim).map_err(setup)?;
    let mut text = emit_config(&cfg, g.format.into()).map_err(setup)?;
    if let ConfigFormat::Toml = g.format {
        let widths: Vec<String> = cfg.step_widths().iter().map(usize::to_string).collect();
        text = format!("# step widths: {}\n{text}", widths.join(", "));
    }
    stdout.write_all(text.as_bytes()).map_err(Failure::runtime)?;
    if let Some(dir) = &ctx.stated_out {
        let out = Outputs::new(dir.clone())?;
        let name = match g.format {
            ConfigFormat::Toml => "steps_config.toml",
            ConfigFormat::Json => "steps_config.json",
        };
        out.finish(&ctx.argv, "genconfig", 0, name, &text)?;
    }
    Ok(())
}

fn load_train(path: &Path, overrides: &[String]) -> Result<TrainConfig, Failure> {
    load_config(path, overrides).map_err(setup)
}

fn train_cmd(ctx: &Context, t: &TrainArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let mut cfg = load_train(&t.config, &t.overrides)?;
    let dir = ctx.stated_out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| ctx.out_dir());
    let mut out = Outputs::new(dir.clone())?;
    cfg.output_dir = Some(dir);
    let record = train(&cfg).map_err(work)?;
    for name in ["run.csv", "checkpoint.ssnc", "run.json"] {
        out.record(name);
    }
    writeln!(
        stdout,
        "{} steps, final train loss {}, {} {}",
        cfg.steps,
        record.final_loss().unwrap_or(f64::NAN),
        record.metric,
        record.last_eval().unwrap_or(f64::NAN)
    )
    .map_err(Failure::runtime)?;
    // train() already wrote config.toml with the same canonical text.
    out.finish(&ctx.argv, "train", cfg.seed, "config.toml", &emit(&cfg)?)?;
    Ok(())
}

fn probe(ctx: &Context, p: &ProbeArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let spec = load_spec(p.model.preset.as_deref(), p.model.config.as_deref(), &p.model.overrides)?;
    if p.batch == 0 {
        return Err(Failure::config("--batch must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let init = if p.zero_branches { Init::zero_branches() } else { Init::default() };
    let net = Network::<f64>::new(spec.clone(), &init, &mut rng).map_err(setup)?;
    let trace = match spec.input {
        InputSpec::Features { dim } => {
            let x = Tensor::<f64>::randn(&[p.batch * spec.tokens, dim], 1.0, &mut rng);
            net.gamma_trace(Inputs::Features(&x))
        }
        InputSpec::Tokens { vocab } => {
            use rand::Rng;
            let ids: Vec<usize> = (0..p.batch * spec.tokens).map(|_| rng.random_range(0..vocab)).collect();
            net.gamma_trace(Inputs::Tokens(&ids))
        }
    }
    .map_err(work)?;
    let mut out = Outputs::new(ctx.out_dir())?;
    out.write("gamma.csv", trace.to_csv())?;
    out.write("gamma_depth.csv", trace.to_depth_csv())?;
    writeln!(stdout, "{} blocks, first-quarter mean gamma {}", trace.records.len(), trace.first_quarter_mean()).map_err(Failure::runtime)?;
    out.finish(&ctx.argv, "probe", p.seed, "config.toml", &emit(&spec)?)?;
    Ok(())
}

fn ablate(ctx: &Context, a: &AblateArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let kind: SweepKind = a.sweep.parse().map_err(setup)?;
    let cfg = load_train(&a.config, &a.overrides)?;
    let report = ablation_sweep(kind, &cfg, a.checkpoint.as_deref()).map_err(work)?;
    let mut out = Outputs::new(ctx.out_dir())?;
    let csv = report.to_csv();
    out.write(&format!("ablation_{kind}.csv"), &csv)?;
    stdout.write_all(csv.as_bytes()).map_err(Failure::runtime)?;
    out.finish(&ctx.argv, "ablate", cfg.seed, "config.toml", &emit(&cfg)?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradcheckSettings {
    seed: u64,
    tolerance: f64,
}

fn gradcheck(ctx: &Context, g: &GradcheckArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let cases = suite(g.seed).map_err(work)?;
    let mut out = Outputs::new(ctx.out_dir())?;
    let json = serde_json::to_string_pretty(&cases).expect("suite serializes") + "\n";
    out.write("gradcheck.json", json)?;
    let mut failed = Vec::new();
    for c in &cases {
        let ok = c.report.passes(g.tolerance);
        writeln!(stdout, "{:<20} {:>5} params  max rel err {:.3e}  {}", c.name, c.report.checked, c.report.max_rel_error, if ok { "ok" } else { "FAIL" })
            .map_err(Failure::runtime)?;
        if !ok {
            failed.push(c.name);
        }
    }
    let settings = GradcheckSettings { seed: g.seed, tolerance: g.tolerance };
    out.finish(&ctx.argv, "gradcheck", g.seed, "config.toml", &emit(&settings)?)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}

#[derive(Debug, Serialize)]
struct Evaluation {
    task: String,
    metric: String,
    value: f64,
    checkpoint: String,
}

fn evaluate_cmd(ctx: &Context, e: &EvaluateArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let cfg = load_train(&e.config, &e.overrides)?;
    let value = evaluate(&e.checkpoint, &cfg).map_err(work)?;
    let ev = Evaluation {
        task: cfg.task.name().into(),
        metric: cfg.task.metric().into(),
        value,
        checkpoint: e.checkpoint.display().to_string(),
    };
    let json = serde_json::to_string_pretty(&ev).expect("evaluation serializes") + "\n";
    stdout.write_all(json.as_bytes()).map_err(Failure::runtime)?;
    if let Some(dir) = &ctx.stated_out {
        let mut out = Outputs::new(dir.clone())?;
        out.write("evaluation.json", &json)?;
        out.finish(&ctx.argv, "evaluate", cfg.seed, "config.toml", &emit(&cfg)?)?;
    }
    Ok(())
}

/// Runs one command with explicit streams and environment output
/// directory. Returns the exit code.
pub fn run_with(argv: Vec<String>, env_out: Option<PathBuf>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if code == 0 { stdout } else { stderr };
            let _ = sink.write_all(text.as_bytes());
            if code == 1 && !text.contains("Usage") {
                let _ = writeln!(sink, "\n{}", Cli::command_usage());
            }
            return code;
        }
    };
    let ctx = Context {
        argv,
        stated_out: cli.out.clone().or(env_out),
    };
    let result = match &cli.command {
        Command::Analyze(a) => analyze(&ctx, a, stdout),
        Command::Genconfig(g) => genconfig(&ctx, g, stdout),
        Command::Train(t) => train_cmd(&ctx, t, stdout),
        Command::Probe(p) => probe(&ctx, p, stdout),
        Command::Ablate(a) => ablate(&ctx, a, stdout),
        Command::Gradcheck(g) => gradcheck(&ctx, g, stdout),
        Command::Evaluate(e) => evaluate_cmd(&ctx, e, stdout),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

impl Cli {
    fn command_usage() -> String {
        use clap::CommandFactory;
        Cli::command().render_usage().to_string()
    }
}

/// Entry point used by the binary: reads `$STEPSNET_OUT` and the process
/// streams.
pub fn run<I: IntoIterator<Item = String>>(argv: I) -> i32 {
    let env_out = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    run_with(argv.into_iter().collect(), env_out, &mut std::io::stdout(), &mut std::io::stderr())
}

/// Names accepted by `--preset`.
pub fn preset_names() -> &'static [&'static str] {
    PRESET_NAMES
}
