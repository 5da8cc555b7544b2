//! `thermoviab`: runs the viability pipeline over case directories.
//!
//! Each stage reads and writes files in the case directory, so stages can be
//! rerun one at a time and a reviewer can edit annotations in between.

use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use thermoviab::io::{self, RoiMask};
use thermoviab::learning::EnsembleConfig;
use thermoviab::phantom::{self, PhantomError, PhantomSpec};
use thermoviab::pipeline::{self, PipelineError, RunConfig, Segmenter};
use thermoviab::registration::{StabilizeConfig, WarpKind};
use thermoviab::segmentation::{self, TrainConfig};
use thermoviab_gateway::{AppState, GatewayConfig};

#[derive(Debug, Parser)]
#[command(name = "thermoviab", version, about = "Thermal-recovery viability classification of palpable nodules")]
struct Cli {
    /// Worker threads for per-case parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled synthetic study.
    Phantom(PhantomArgs),
    /// Register every frame to frame 0 and the precool image to the sequence.
    Align(AlignArgs),
    /// Segment the cooled region of frame 0.
    Segment(SegmentArgs),
    /// Extract the five feature families of every nodule.
    Features(FeaturesArgs),
    /// Train the five-family ensemble on a labeled dataset.
    Train(TrainArgs),
    /// Classify every nodule of one case.
    Predict(PredictArgs),
    /// Score a trained model on labeled cases.
    Eval(EvalArgs),
    /// Serve the review API (and optionally the built UI).
    Serve(ServeArgs),
    /// Fit the segmentation net on phantom truth masks.
    TrainSegmenter(TrainSegmenterArgs),
}

#[derive(Debug, Args)]
struct Seed {
    #[arg(long, env = "THERMOVIAB_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    cases: usize,
    #[arg(long, default_value_t = 0.5)]
    viable_frac: f64,
    #[command(flatten)]
    seed: Seed,
    /// Frame size WxH; geometry scales with the width.
    #[arg(long, value_parser = parse_size, default_value = "320x240")]
    size: (usize, usize),
}

#[derive(Debug, Args)]
struct Warps {
    /// Warp for frame-to-frame jitter.
    #[arg(long, default_value = "euclidean")]
    warp: WarpKind,
    /// Warp for the precool image.
    #[arg(long, default_value = "affine")]
    precool_warp: WarpKind,
}

impl Warps {
    fn config(&self) -> StabilizeConfig {
        StabilizeConfig { frame_kind: self.warp, precool_kind: self.precool_warp, ..StabilizeConfig::default() }
    }
}

#[derive(Debug, Args)]
struct AlignArgs {
    #[arg(long)]
    case: PathBuf,
    #[command(flatten)]
    warps: Warps,
}

#[derive(Debug, Args)]
struct SegmenterChoice {
    /// otsu, net or manual (reads roi_polygon.json).
    #[arg(long, default_value = "otsu")]
    segmenter: String,
    /// Weights for `--segmenter net`.
    #[arg(long = "segmenter-model")]
    segmenter_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long)]
    case: PathBuf,
    #[arg(long, default_value = "otsu")]
    segmenter: String,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[arg(long)]
    case: PathBuf,
    /// Also copy the wide table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Train:validation percentages of the training pool.
    #[arg(long, value_parser = parse_split, default_value = "80:20")]
    split: u32,
    #[command(flatten)]
    seed: Seed,
    #[arg(long)]
    out: PathBuf,
    /// Cases set aside for `eval` before the split.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    /// Families that must vote viable (V).
    #[arg(long, default_value_t = 2)]
    vote_threshold: usize,
    #[arg(long, default_value_t = 0.95)]
    specificity_target: f64,
    #[arg(long, default_value_t = 0.60)]
    sensitivity_target: f64,
    #[arg(long, default_value_t = 40)]
    trees: usize,
    #[command(flatten)]
    warps: Warps,
    #[command(flatten)]
    segmenter: SegmenterChoice,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    case: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// JSON report path; a Markdown table is written next to it.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    warps: Warps,
    #[command(flatten)]
    segmenter: SegmenterChoice,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Directory of the built review UI.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
    #[command(flatten)]
    warps: Warps,
}

#[derive(Debug, Args)]
struct TrainSegmenterArgs {
    /// Phantom study (cases need truth_mask.pgm).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[command(flatten)]
    seed: Seed,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or("expected WxH")?;
    let w = w.parse().map_err(|_| "bad width")?;
    let h = h.parse().map_err(|_| "bad height")?;
    Ok((w, h))
}

/// `80:20` → 20, the validation share.
fn parse_split(s: &str) -> Result<u32, String> {
    let (a, b) = s.split_once(':').ok_or("expected TRAIN:VAL, e.g. 80:20")?;
    let (a, b): (u32, u32) = (a.parse().map_err(|_| "bad train share")?, b.parse().map_err(|_| "bad validation share")?);
    if a + b != 100 || a == 0 || b == 0 {
        return Err(format!("{a}:{b} must be two positive shares summing to 100"));
    }
    Ok(b)
}

fn phantom_error(e: PhantomError) -> PipelineError {
    match e {
        PhantomError::InvalidSpec(m) => PipelineError::Usage(m),
        PhantomError::Case(c) => c.into(),
    }
}

fn print(v: &impl serde::Serialize) -> Result<(), PipelineError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run_config(seed: u64, warps: &Warps, segmenter: &SegmenterChoice) -> Result<RunConfig, PipelineError> {
    Ok(RunConfig {
        seed,
        stabilize: warps.config(),
        segmenter: Segmenter::parse(&segmenter.segmenter, segmenter.segmenter_model.clone())?,
        ..RunConfig::default()
    })
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(PipelineError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| PipelineError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Phantom(a) => {
            let (w, h) = a.size;
            let base = if (w, h) == (320, 240) { PhantomSpec::default() } else { PhantomSpec::small(w, h, 0) };
            let m = phantom::generate_study(&a.out, &base, a.cases, a.viable_frac, a.seed.seed).map_err(phantom_error)?;
            let viable = m.cases.iter().filter(|c| c.label == io::Label::Viable).count();
            print(&json!({ "out": a.out, "cases": m.cases.len(), "viable": viable, "seed": m.seed }))
        }
        Command::Align(a) => {
            let s = pipeline::align_case(&a.case, &a.warps.config())?;
            print(&s)?;
            if s.review_required {
                return Err(PipelineError::ReviewRequired { min_rho: s.min_rho });
            }
            Ok(())
        }
        Command::Segment(a) => {
            let mask = pipeline::segment_case(&a.case, &Segmenter::parse(&a.segmenter, a.model)?)?;
            print(&json!({ "roi": a.case.join(pipeline::ROI_FILE), "pixels": mask.count() }))
        }
        Command::Features(a) => {
            let recs = pipeline::features_case(&a.case)?;
            let table = a.case.join(pipeline::FEATURES_FILE);
            if let Some(out) = &a.out {
                if let Some(p) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(p)?;
                }
                fs::copy(&table, out)?;
            }
            let columns = recs.first().map_or(0, |r| r.names().count());
            print(&json!({ "table": a.out.unwrap_or(table), "nodules": recs.len(), "columns": columns }))
        }
        Command::Train(a) => {
            let mut cfg = run_config(a.seed.seed, &a.warps, &a.segmenter)?;
            cfg.validation_percent = a.split;
            cfg.holdout = a.holdout;
            cfg.ensemble = EnsembleConfig {
                vote_threshold: a.vote_threshold,
                specificity_target: a.specificity_target,
                sensitivity_target: a.sensitivity_target,
                n_trees: a.trees,
                ..EnsembleConfig::default()
            };
            let out = pipeline::train(&a.data, &a.out, &cfg)?;
            let report: Value = serde_json::from_str(&out.validation.to_json())?;
            print(&json!({ "model": a.out, "split": out.split, "validation": report }))
        }
        Command::Predict(a) => {
            let (model, _) = pipeline::load_model(&a.model)?;
            print(&pipeline::predict_case(&a.case, &model)?)
        }
        Command::Eval(a) => {
            let cfg = run_config(0, &a.warps, &a.segmenter)?;
            let report = pipeline::evaluate(&a.data, &a.model, a.report.as_deref(), &cfg)?;
            println!("{}", report.to_json());
            Ok(())
        }
        Command::Serve(a) => {
            let mut cfg = GatewayConfig::new(&a.data);
            cfg.model_dir = a.model;
            cfg.static_dir = a.static_dir;
            cfg.run.stabilize = a.warps.config();
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let state = AppState::start(cfg)?;
                thermoviab_gateway::serve(SocketAddr::new(a.host, a.port), state).await?;
                Ok(())
            })
        }
        Command::TrainSegmenter(a) => train_segmenter(&a),
    }
}

fn train_segmenter(a: &TrainSegmenterArgs) -> Result<(), PipelineError> {
    let cases = pipeline::list_dataset(&a.data)?;
    let mut data = Vec::with_capacity(cases.len());
    for c in &cases {
        let truth = c.dir.join(phantom::TRUTH_MASK_FILE);
        if !truth.is_file() {
            return Err(PipelineError::StageMissing { stage: "truth mask", path: truth.display().to_string() });
        }
        let (_, seq) = pipeline::load_decimated(&c.dir)?;
        data.push((seq.frames()[0].clone(), RoiMask::load_pgm(&truth)?));
    }
    let cfg = TrainConfig { learning_rate: a.lr, batch_size: a.batch, epochs: a.epochs, seed: a.seed.seed, ..TrainConfig::default() };
    let report = segmentation::train_segmenter(&data, &cfg)?;
    report.net.save(&a.out, Some(&cfg))?;
    print(&json!({ "model": a.out, "cases": data.len(), "final_loss": report.losses.last() }))
}

fn fail(kind: &str, message: &str, code: i32) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message, "exit_code": code }));
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().trim(), 1),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), e.exit_code()),
    }
}

