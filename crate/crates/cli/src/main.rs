//! `splatfield`: batch pipeline and service launcher.
//!
//! Every command prints one JSON summary line (`"schema": 1`) on stdout and
//! human-readable progress on stderr. Failures exit with status 1.

mod commands;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "splatfield", version, about = "Training-free feature fields for Gaussian splats")]
struct Cli {
    /// Worker threads for data-parallel passes (default: all cores).
    #[arg(long, global = true, env = "SPLATFIELD_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Lift per-view 2D feature maps onto the Gaussians.
    Backproject(BackprojectArgs),
    /// Render views: plain color or under a query.
    Render(RenderArgs),
    /// Select the Gaussians matching a prompt.
    Segment(SegmentArgs),
    /// Label every Gaussian by kNN vote over labeled exemplars.
    Transfer(TransferArgs),
    /// Identity codebooks and instance encoding.
    #[command(subcommand)]
    Identity(IdentityCommand),
    /// Mean IoU between predicted and ground-truth label images.
    Eval(EvalArgs),
    /// Serve one scene over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct SceneArgs {
    /// 3DGS PLY file.
    #[arg(long)]
    scene: PathBuf,
    /// Camera JSON file.
    #[arg(long)]
    cameras: PathBuf,
    /// Background color as `r,g,b` in [0, 1].
    #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
    background: [f64; 3],
}

#[derive(Debug, Args)]
struct RasterArgs {
    /// Stop blending a pixel once transmittance falls below this (0 disables).
    #[arg(long, default_value_t = 1e-4)]
    early_stop: f64,
}

#[derive(Debug, Args)]
struct QueryArgs {
    /// Prompt bank JSON.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Positive prompt name.
    #[arg(long)]
    positive: Option<String>,
    /// Negative prompt name (repeatable).
    #[arg(long = "negative")]
    negatives: Vec<String>,
    /// Cosine threshold; members score strictly above it.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    theta: f64,
    /// With negatives, members must also score highest on the positive.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    argmax: bool,
}

#[derive(Debug, Args)]
struct BackprojectArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Directory holding `feat_{view:05}.ftn1` for every view.
    #[arg(long)]
    features: PathBuf,
    /// expected (weighted average) or accumulated (weighted sum).
    #[arg(long, default_value = "expected")]
    mode: splatfield_core::BackprojectionMode,
    /// Scale surviving rows to unit length.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    normalize: bool,
    /// Gaussians with total weight at most this are pruned.
    #[arg(long, default_value_t = 1e-8)]
    prune_epsilon: f64,
    /// Also write the scene without pruned Gaussians.
    #[arg(long)]
    prune_cloud: bool,
    #[command(flatten)]
    raster: RasterArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Views to render (comma separated; default all).
    #[arg(long, value_delimiter = ',')]
    views: Vec<usize>,
    /// color, heatmap, extraction or deletion.
    #[arg(long, default_value = "color")]
    what: splatfield_service::RenderMode,
    /// Feature store, required for every mode but color.
    #[arg(long)]
    store: Option<PathBuf>,
    #[command(flatten)]
    query: QueryArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    /// Feature store.
    #[arg(long)]
    store: PathBuf,
    #[command(flatten)]
    query: QueryArgs,
    /// Scene PLY; needed for --extract, --delete and --masks.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Camera JSON matching --scene.
    #[arg(long)]
    cameras: Option<PathBuf>,
    /// Background color as `r,g,b` in [0, 1].
    #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
    background: [f64; 3],
    /// Write the selected Gaussians as `extraction.ply`.
    #[arg(long)]
    extract: bool,
    /// Write everything else as `deletion.ply`.
    #[arg(long)]
    delete: bool,
    /// Write per-view 2D masks (PGM) and similarity heatmaps (PNG).
    #[arg(long)]
    masks: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TransferArgs {
    /// Feature store of the target scene.
    #[arg(long)]
    store: PathBuf,
    /// Labeled exemplars JSON (`label_names`, `exemplars`).
    #[arg(long)]
    source: PathBuf,
    /// Neighbors per vote.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Best similarity below this makes a Gaussian background (-1).
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    background_threshold: f64,
    /// Ground-truth labels JSON (one integer per Gaussian) to score against.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum IdentityCommand {
    /// Build a codebook: orthogonal codes, or trained with --train.
    Codebook(CodebookArgs),
    /// Back-project identity codes from labeled views (`label_{view:05}.pgm`).
    Encode(EncodeArgs),
    /// Decode rendered identity features into per-view label images.
    Classify(ClassifyArgs),
}

#[derive(Debug, Args)]
struct CodebookArgs {
    /// Number of identities.
    #[arg(long)]
    classes: usize,
    /// Code length.
    #[arg(long)]
    dim: usize,
    /// Train contrastive codes instead of orthogonal ones.
    #[arg(long)]
    train: bool,
    /// Training epochs (full-batch gradient descent).
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Seed for the random initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Codebook JSON.
    #[arg(long)]
    codebook: PathBuf,
    /// Directory of label images; views without a file are skipped.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    prune_epsilon: f64,
    #[command(flatten)]
    raster: RasterArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Feature store.
    #[arg(long)]
    store: PathBuf,
    /// Codebook JSON.
    #[arg(long)]
    codebook: PathBuf,
    /// Views to classify (comma separated; default all).
    #[arg(long, value_delimiter = ',')]
    views: Vec<usize>,
    /// Pixels whose rendered feature norm is below this become -1.
    #[arg(long, default_value_t = splatfield_core::identity::DEFAULT_REJECT_THRESHOLD)]
    reject: f64,
    #[command(flatten)]
    raster: RasterArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of predicted label PGMs.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth label PGMs with the same file names.
    #[arg(long)]
    truth: PathBuf,
    /// Class ids to score (comma separated; default every id >= 0 present).
    #[arg(long, value_delimiter = ',')]
    classes: Vec<i32>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Feature store.
    #[arg(long)]
    store: PathBuf,
    /// Prompt bank JSON.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Threshold offered to clients that do not send one.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    theta: f64,
    /// Bind address.
    #[arg(long = "serve", default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Directory for exported PLY files.
    #[arg(long, default_value = "exports")]
    out: PathBuf,
    /// Static viewer assets served at `/`.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
}

fn parse_rgb(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|p| format!("expected 3 components, got {}", p.len()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
