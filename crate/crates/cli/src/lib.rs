//! The `phenokit` command line: synthetic data generation, training,
//! embedding, profile correction, evaluation and reporting.

mod config;
mod svg;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use phenokit_core::dataio::{gen_synthetic, load_images, load_index, SyntheticSpec, INDEX_FILE};
use phenokit_core::eval::{evaluate, imad, AnnotationMap, EvalReport, PcaEmbedder};
use phenokit_core::model::{load_checkpoint, save_checkpoint, PhenoNet};
use phenokit_core::pipeline::{site_profiles, train_on_dir, EMBED_BATCH};
use phenokit_core::profiles::{correct, read_profiles, write_profiles, Level, ProfileTable};
use phenokit_core::train::EpochLog;
use phenokit_core::util::write_atomic;
use phenokit_core::{Error, Result};

pub use config::{MetricsConfig, PathsConfig, PcsConfig, RunConfig, SpheringConfig, DEFAULT_ALPHA};
pub use svg::emit_report_svg;

/// Exit status for malformed command lines.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for unreadable or invalid inputs.
pub const EXIT_INPUT: i32 = 1;
/// Exit status for internal invariant violations.
pub const EXIT_INVARIANT: i32 = 3;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "PHENOKIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "phenokit", version, about = "Image-based phenotypic profiling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cell-painting screen.
    Synth(SynthArgs),
    /// Train a network: regression warm-up, then the joint objective.
    Train(TrainArgs),
    /// Embed every site of a dataset into a site-level profile table.
    Embed(EmbedArgs),
    /// PCs, well aggregation, sphering and treatment aggregation.
    Correct(CorrectArgs),
    /// Score treatment profiles against annotations (FoE, MAP, recall@K).
    Evaluate(EvaluateArgs),
    /// IMAD batch-effect score of a well-level table.
    Imad(ImadArgs),
    /// Render an evaluation report as an SVG bar chart.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Synthetic spec JSON [default: built-in spec]
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's seed [default: spec value, 7]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration JSON [default: built-in configuration]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory [default: config paths.data]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Drop the classification term [default: off]
    #[arg(long)]
    no_cls: bool,
    /// Drop the regression term and its warm-up stage [default: off]
    #[arg(long)]
    no_mse: bool,
    /// Drop the contrastive term [default: off]
    #[arg(long)]
    no_con: bool,
    /// Replace difference convolutions with plain convolutions [default: off]
    #[arg(long)]
    no_diffconv: bool,
    /// Write per-epoch losses, one JSON object per line [default: not written]
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory [default: config paths.data]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run configuration JSON [default: built-in configuration]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output site profile table (.csv, otherwise binary)
    #[arg(long)]
    out: PathBuf,
    /// Images per forward pass
    #[arg(long, default_value_t = EMBED_BATCH)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct CorrectArgs {
    /// Site-level profile table
    #[arg(long = "in")]
    input: PathBuf,
    /// Weight of the plate control mean [default: config pcs.alpha, 0.7]
    #[arg(long)]
    alpha: Option<f64>,
    /// Sphering ridge [default: config sphering.epsilon, else 1e-3 x mean control variance]
    #[arg(long)]
    epsilon: Option<f64>,
    /// Run configuration JSON [default: built-in configuration]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output treatment-level table
    #[arg(long)]
    out: PathBuf,
    /// Also write the corrected well-level table [default: not written]
    #[arg(long)]
    wells_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Treatment-level profile table
    #[arg(long)]
    profiles: PathBuf,
    /// `treatment,annotation` CSV [default: config paths.annotations]
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Well-level table; when given the report includes IMAD [default: none]
    #[arg(long)]
    wells: Option<PathBuf>,
    /// Top fraction of each ranking used by FoE [default: config metrics.top_frac, 0.01]
    #[arg(long)]
    top_frac: Option<f64>,
    /// Run configuration JSON [default: built-in configuration]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output report JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ImadArgs {
    /// Well-level profile table
    #[arg(long)]
    wells: PathBuf,
    /// Output file holding the IMAD value
    #[arg(long)]
    out: PathBuf,
    /// Keep the raw scale of the 2-D embedding axes [default: off]
    #[arg(long)]
    no_whiten: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Report JSON written by `evaluate`
    #[arg(long)]
    report: PathBuf,
    /// Output SVG
    #[arg(long)]
    out: PathBuf,
}

/// Map a library error onto the process exit status.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Invariant(_) | Error::NonFinite { .. } | Error::BackwardTwice | Error::NonScalarLoss(_) => {
            EXIT_INVARIANT
        }
        _ => EXIT_INPUT,
    }
}

fn configure_threads() {
    let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) else {
        return;
    };
    if n > 0 {
        // A second call in the same process keeps the first pool; that is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parse `argv` (program name first), run the subcommand and return the exit status.
pub fn run_command(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            if code == EXIT_INVARIANT {
                eprintln!("error: internal invariant violated: {e}");
            } else {
                eprintln!("error: {e}");
            }
            code
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Correct(a) => correct_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Imad(a) => imad_cmd(a),
        Command::Report(a) => report(a),
    }
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::InvalidArgument(format!("--{name} is required (or set it in the run configuration)")))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => Ok(std::fs::create_dir_all(p)?),
        _ => Ok(()),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::Input { path: p.clone(), detail: e.to_string() })?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .map_err(|e| Error::Input { path: p.clone(), detail: e.to_string() })?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let summary = gen_synthetic(&spec, &a.out)?;
    log::info!("wrote {} site images ({} treated) to {}", summary.images, summary.treated_images, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    cfg.train.use_cls &= !a.no_cls;
    cfg.train.use_mse &= !a.no_mse;
    cfg.train.use_con &= !a.no_con;
    cfg.train.use_diffconv &= !a.no_diffconv;
    cfg.validate()?;
    let data = required(a.data, &cfg.paths.data, "data")?;
    let mut logs: Vec<EpochLog> = Vec::new();
    let trained = train_on_dir(&data, &cfg.model, &cfg.train, &mut |l| {
        logs.push(l.clone());
        Ok(())
    })?;
    create_parent(&a.out)?;
    save_checkpoint(&trained.net, &a.out)?;
    if let Some(path) = &a.log {
        create_parent(path)?;
        let mut lines = Vec::new();
        for l in &logs {
            serde_json::to_writer(&mut lines, l)?;
            lines.push(b'\n');
        }
        write_atomic(path, &lines)?;
    }
    log::info!("saved checkpoint to {}", a.out.display());
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let data = required(a.data, &cfg.paths.data, "data")?;
    if a.batch_size == 0 {
        return Err(Error::InvalidArgument("--batch-size must be positive".into()));
    }
    let net: PhenoNet<f32> = load_checkpoint(&a.ckpt)?;
    let records = load_index(data.join(INDEX_FILE))?;
    let images = load_images(&records, net.config().image_size)?;
    let z = net.embed(&images, a.batch_size)?;
    let table = site_profiles(&records, &z)?;
    create_parent(&a.out)?;
    write_profiles(&table, &a.out)
}

fn correct_cmd(a: CorrectArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(alpha) = a.alpha {
        cfg.pcs.alpha = alpha;
    }
    if a.epsilon.is_some() {
        cfg.sphering.epsilon = a.epsilon;
    }
    cfg.validate()?;
    let sites = read_profiles(&a.input)?;
    let out = correct(&sites, cfg.pcs.alpha, cfg.sphering.epsilon)?;
    create_parent(&a.out)?;
    write_profiles(&out.treatments, &a.out)?;
    if let Some(w) = &a.wells_out {
        create_parent(w)?;
        write_profiles(&out.wells, w)?;
    }
    Ok(())
}

fn read_level(path: &Path, level: Level) -> Result<ProfileTable> {
    let t = read_profiles(path)?;
    if t.level() != level {
        return Err(Error::Input {
            path: path.into(),
            detail: format!("expected a {level}-level table, found {}", t.level()),
        });
    }
    Ok(t)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(f) = a.top_frac {
        cfg.metrics.top_frac = f;
    }
    cfg.validate()?;
    let annotations = required(a.annotations, &cfg.paths.annotations, "annotations")?;
    let table = read_level(&a.profiles, Level::Treatment)?;
    let ann = AnnotationMap::read_csv(&annotations)?;
    let mut report = evaluate(&table, &ann, cfg.metrics.top_frac)?;
    if let Some(w) = &a.wells {
        let wells = read_level(w, Level::Well)?;
        report.imad = Some(imad(&wells, &PcaEmbedder { whiten: cfg.metrics.imad_whiten })?);
    }
    create_parent(&a.out)?;
    report.write_json(&a.out)
}

fn imad_cmd(a: ImadArgs) -> Result<()> {
    let wells = read_level(&a.wells, Level::Well)?;
    let value = imad(&wells, &PcaEmbedder { whiten: !a.no_whiten })?;
    create_parent(&a.out)?;
    write_atomic(&a.out, format!("{value}\n").as_bytes())
}

fn report(a: ReportArgs) -> Result<()> {
    let r = EvalReport::read_json(&a.report)?;
    create_parent(&a.out)?;
    write_atomic(&a.out, emit_report_svg(&r).as_bytes())
}
