//! `scorediff`: graphic-score pages to a long-form WAV from the command line.
//!
//! Progress and summaries go to stderr; paths and counts for scripts go to stdout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use scorediff::pipeline::{
    self, discover_pages, CompositionConfig, Manifest, ModelChoice, PageRange, VisionChoice, DEFAULT_PREFIX,
};
use scorediff::prompts::{build_corpus, save_corpus, ScorePage, StylePrefix};
use scorediff::vision::{FixtureClient, ServiceClient, ServiceConfig, VisionClient};
use scorediff::Error;

#[derive(Parser, Debug)]
#[command(name = "scorediff", version, about = "Turn graphic-score pages into long-form audio")]
struct Cli {
    /// JSON file mirroring the composition config; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Describe score pages as prompts and save the corpus.
    Prompts(PromptsArgs),
    /// Generate audio from an existing prompt corpus.
    Generate(GenerateArgs),
    /// Prompts and generation in one run.
    Compose(ComposeArgs),
    /// Print a manifest's segment table and check the WAV against it.
    Inspect(InspectArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum VisionArg {
    Fixture,
    Service,
}

impl From<VisionArg> for VisionChoice {
    fn from(v: VisionArg) -> Self {
        match v {
            VisionArg::Fixture => VisionChoice::Fixture,
            VisionArg::Service => VisionChoice::Service,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModelArg {
    Toy,
    Checkpoint,
}

impl From<ModelArg> for ModelChoice {
    fn from(v: ModelArg) -> Self {
        match v {
            ModelArg::Toy => ModelChoice::Toy,
            ModelArg::Checkpoint => ModelChoice::Checkpoint,
        }
    }
}

#[derive(Args, Debug)]
struct VisionOpts {
    /// Where prompts come from.
    #[arg(long, value_enum)]
    vision: Option<VisionArg>,
    /// Chat-completions endpoint for `--vision service`.
    #[arg(long)]
    service_url: Option<String>,
    #[arg(long)]
    service_model: Option<String>,
}

#[derive(Args, Debug)]
struct PromptsArgs {
    /// Directory of page images (optional with `--vision fixture`).
    #[arg(long)]
    pages: Option<PathBuf>,
    /// Pages to describe, as A:B.
    #[arg(long)]
    range: Option<String>,
    #[arg(long)]
    prefix: Option<String>,
    #[command(flatten)]
    vision: VisionOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenerationOpts {
    #[arg(long)]
    range: Option<String>,
    /// Replaces the corpus prefix.
    #[arg(long)]
    prefix: Option<String>,
    #[arg(long, value_enum)]
    backend: Option<ModelArg>,
    #[arg(long, value_enum)]
    decoder: Option<ModelArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Diffusion steps per segment.
    #[arg(long)]
    steps: Option<usize>,
    /// Checkpoint file or directory for the checkpoint backend/decoder.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    device: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for per-segment latents; defaults next to the manifest.
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Stop after this many segments; finish later with `--resume`.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Continue the run recorded in `--manifest`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    opts: GenerationOpts,
}

#[derive(Args, Debug)]
struct ComposeArgs {
    #[arg(long)]
    pages: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    vision: VisionOpts,
    #[command(flatten)]
    opts: GenerationOpts,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    wav: PathBuf,
}

/// A failure plus the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn in_stage(e: &Error, name: &str) -> bool {
    match e {
        Error::Stage { stage, source, .. } => *stage == name || in_stage(source, name),
        _ => false,
    }
}

/// 1 usage/config, 2 generation backend, 3 vision service, 4 I/O.
fn exit_code(e: &Error) -> u8 {
    let root = e.root();
    match root {
        Error::Service(_) => 3,
        Error::Format { raw: Some(_), .. } if in_stage(e, "vision") => 3,
        Error::Backend(_) | Error::Contract { .. } | Error::Numerical { .. } => 2,
        Error::Io { .. } | Error::Consistency { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let base = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Prompts(args) => cmd_prompts(base, args),
        Command::Generate(args) => {
            let mut config = base;
            config.pages_dir = None;
            config.corpus_path = Some(args.corpus);
            apply_generation(&mut config, &args.opts)?;
            run_generation(config, args.opts.resume)
        }
        Command::Compose(args) => {
            let mut config = base;
            if args.pages.is_some() && args.corpus.is_some() {
                return Err(usage("pass either --pages or --corpus, not both"));
            }
            if args.pages.is_some() || args.corpus.is_some() {
                config.pages_dir = args.pages;
                config.corpus_path = args.corpus;
            }
            apply_vision(&mut config, &args.vision);
            apply_generation(&mut config, &args.opts)?;
            run_generation(config, args.opts.resume)
        }
        Command::Inspect(args) => cmd_inspect(&args),
    }
}

fn load_config(path: Option<&Path>) -> Result<CompositionConfig, Failure> {
    let Some(path) = path else {
        return Ok(CompositionConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn parse_range(text: &str) -> Result<PageRange, Failure> {
    PageRange::parse(text).map_err(|e| usage(e.to_string()))
}

fn apply_vision(config: &mut CompositionConfig, v: &VisionOpts) {
    if let Some(choice) = v.vision {
        config.vision = choice.into();
    }
    if let Some(url) = &v.service_url {
        config.service.base_url = url.clone();
    }
    if let Some(model) = &v.service_model {
        config.service.model = model.clone();
    }
}

fn apply_generation(config: &mut CompositionConfig, o: &GenerationOpts) -> Result<(), Failure> {
    if let Some(r) = &o.range {
        config.page_range = Some(parse_range(r)?);
    }
    if let Some(p) = &o.prefix {
        config.prefix = Some(p.clone());
    }
    if let Some(b) = o.backend {
        config.backend = b.into();
    }
    if let Some(d) = o.decoder {
        config.decoder = d.into();
    }
    if let Some(seed) = o.seed {
        config.sampler.seed = seed;
    }
    if let Some(steps) = o.steps {
        config.sampler.num_steps = steps;
    }
    if let Some(c) = &o.checkpoint {
        config.checkpoint.checkpoint_path = Some(c.clone());
    }
    if let Some(d) = &o.device {
        config.checkpoint.device = d.clone();
    }
    if let Some(out) = &o.out {
        config.output_wav_path = out.clone();
    }
    if let Some(m) = &o.manifest {
        config.manifest_path = m.clone();
    }
    if let Some(w) = &o.work_dir {
        config.work_dir = Some(w.clone());
    }
    if o.stop_after.is_some() {
        config.stop_after = o.stop_after;
    }
    Ok(())
}

fn run_generation(config: CompositionConfig, resume: bool) -> Result<(), Failure> {
    config.validate().map_err(|e| usage(e.to_string()))?;
    let result = if resume {
        let manifest = Manifest::load(&config.manifest_path)?;
        pipeline::resume(&config, &manifest)?
    } else {
        pipeline::compose(&config)?
    };
    let m = &result.manifest;
    match &result.wav_path {
        Some(wav) => {
            eprintln!(
                "wrote {} ({} segments, {:.1} s) and {}",
                wav.display(),
                m.segments.len(),
                m.total_duration_s.unwrap_or(0.0),
                config.manifest_path.display()
            );
            println!(
                "{}",
                json!({
                    "wav": wav,
                    "manifest": config.manifest_path,
                    "segments": m.segments.len(),
                    "duration_s": m.total_duration_s,
                    "sample_count": m.sample_count,
                })
            );
        }
        None => {
            eprintln!(
                "stopped after {} of {} segments; continue with --resume --manifest {}",
                m.segments.len(),
                m.planned_segments,
                config.manifest_path.display()
            );
            println!(
                "{}",
                json!({
                    "manifest": config.manifest_path,
                    "segments": m.segments.len(),
                    "planned_segments": m.planned_segments,
                    "status": "incomplete",
                })
            );
        }
    }
    Ok(())
}

fn cmd_prompts(base: CompositionConfig, args: PromptsArgs) -> Result<(), Failure> {
    let mut config = base;
    apply_vision(&mut config, &args.vision);
    let range = match &args.range {
        Some(r) => parse_range(r)?,
        None => config.page_range.unwrap_or_default(),
    };
    let prefix_text = args
        .prefix
        .or(config.prefix.clone())
        .unwrap_or_else(|| DEFAULT_PREFIX.to_owned());
    let prefix = StylePrefix::new(prefix_text).map_err(|e| usage(e.to_string()))?;

    let client: Box<dyn VisionClient> = match config.vision {
        VisionChoice::Fixture => Box::new(FixtureClient::new()),
        VisionChoice::Service => Box::new(
            ServiceClient::from_env(ServiceConfig {
                base_url: config.service.base_url.clone(),
                model: config.service.model.clone(),
                ..ServiceConfig::default()
            })
            .map_err(|e| e.at_stage("vision", None))?,
        ),
    };
    let pages_dir = args.pages.or(config.pages_dir.clone());
    let pages = match (&pages_dir, config.vision) {
        (Some(dir), _) => discover_pages(dir, range)?,
        (None, VisionChoice::Fixture) => range.pages().map(ScorePage::without_image).collect(),
        (None, VisionChoice::Service) => return Err(usage("--vision service needs --pages DIR")),
    };
    let corpus = build_corpus(client.as_ref(), &pages, prefix, config.service.concurrency)
        .map_err(|e| e.at_stage("vision", None))?;
    save_corpus(&corpus, &args.out)?;
    eprintln!(
        "wrote {}: {} pages, {} prompts",
        args.out.display(),
        corpus.pages().len(),
        corpus.prompt_count()
    );
    println!(
        "{}",
        json!({"corpus": args.out, "pages": corpus.pages().len(), "prompts": corpus.prompt_count()})
    );
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<(), Failure> {
    let report = pipeline::inspect(&args.manifest, &args.wav).map_err(|e| match e.root() {
        Error::Format { .. } | Error::Input(_) => Failure {
            code: 4,
            message: e.to_string(),
        },
        _ => Failure::from(e),
    })?;
    eprintln!(
        "{:>4}  {:>4}  {:>3}  {:>8}  {:>8}  checksum",
        "k", "page", "pos", "start_s", "end_s"
    );
    for s in &report.manifest.segments {
        eprintln!(
            "{:>4}  {:>4}  {:>3}  {:>8.1}  {:>8.1}  {}",
            s.index, s.page, s.prompt_position, s.start_time_s, s.end_time_s, s.latent_checksum
        );
    }
    println!("{}", report.summary());
    Ok(())
}
