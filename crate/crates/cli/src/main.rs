use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args as ClapArgs, Parser, Subcommand};

use crowdbench_core::categorize::{apply_categories, CategorizeConfig};
use crowdbench_core::dataset::{parse_ndjson_with, write_ndjson, Dataset, MainType, WindowConfig};
use crowdbench_core::harness::{
    calibrate_gridsearch, default_grid, evaluate, parse_grid, predict_dataset, read_predictions,
    scene_svg, write_predictions, Model, ModelParams,
};
use crowdbench_core::metrics::{aggregate_report, ScoreConfig};
use crowdbench_core::orca::OrcaParams;
use crowdbench_core::synth::{generate, SynthConfig};

#[derive(Parser)]
#[command(name = "crowdbench", version, about = "Pedestrian trajectory forecasting benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic interacting scenes with ORCA
    Generate(GenerateArgs),
    /// Tag every scene with its interaction category
    Categorize(CategorizeArgs),
    /// Forecast every scene with a classical model
    Predict(PredictArgs),
    /// Score predictions and print the metrics table
    Evaluate(EvaluateArgs),
    /// Grid-search social force or ORCA parameters
    Calibrate(CalibrateArgs),
    /// Write the metrics report and per-scene plots
    Report(ReportArgs),
}

#[derive(ClapArgs, Clone, Copy)]
struct WindowArgs {
    /// Observed frames per scene
    #[arg(long, default_value_t = 9)]
    obs: usize,
    /// Predicted frames per scene
    #[arg(long, default_value_t = 12)]
    pred: usize,
}

impl WindowArgs {
    fn config(self) -> WindowConfig {
        WindowConfig {
            obs_len: self.obs,
            pred_len: self.pred,
        }
    }
}

#[derive(ClapArgs)]
struct GenerateArgs {
    /// Output dataset (stdout if not provided)
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of scenes to keep
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    /// JSON generator settings; fields left out keep their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON ORCA parameters for the simulation
    #[arg(long)]
    orca: Option<PathBuf>,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(ClapArgs)]
struct CategorizeArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Keep only scenes of these main types (comma separated codes 1-4)
    #[arg(long, value_delimiter = ',')]
    filter_types: Vec<u8>,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(ClapArgs)]
struct PredictArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// cv, kalman, sf or orca
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Modes per scene
    #[arg(long, default_value_t = 1)]
    modes: usize,
    /// JSON model parameters, as written by `calibrate`
    #[arg(long)]
    params: Option<PathBuf>,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(ClapArgs)]
struct ScoreArgs {
    /// Distance below which two pedestrians collide (m)
    #[arg(long, default_value_t = 0.1)]
    collision_threshold: f64,
}

impl ScoreArgs {
    fn config(&self) -> anyhow::Result<ScoreConfig> {
        if !(self.collision_threshold > 0.0) {
            bail!("collision threshold must be positive");
        }
        let mut cfg = ScoreConfig::default();
        cfg.collision.threshold = self.collision_threshold;
        Ok(cfg)
    }
}

#[derive(ClapArgs)]
struct EvaluateArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Label of the model in the report
    #[arg(long, default_value = "model")]
    model: String,
    /// Also write the report as CSV here
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    score: ScoreArgs,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(ClapArgs)]
struct CalibrateArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// sf or orca
    #[arg(long)]
    model: String,
    /// JSON array of candidate parameter objects
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Where to write the selected parameters (stdout if not provided)
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    score: ScoreArgs,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(ClapArgs)]
struct ReportArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, default_value = "model")]
    model: String,
    /// Directory for report.csv and report.txt
    #[arg(short, long)]
    output: PathBuf,
    /// Directory for one SVG per scene
    #[arg(long)]
    plots: Option<PathBuf>,
    #[command(flatten)]
    score: ScoreArgs,
    #[command(flatten)]
    window: WindowArgs,
}

fn read_dataset(path: &Path, window: WindowConfig) -> anyhow::Result<Dataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let ds = parse_ndjson_with(BufReader::new(file), window)
        .with_context(|| format!("reading {}", path.display()))?;
    if ds.skipped_records > 0 {
        log::warn!("skipped {} unknown records in {}", ds.skipped_records, path.display());
    }
    Ok(ds)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn run_generate(args: &GenerateArgs) -> anyhow::Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    cfg.seed = args.seed;
    cfg.scenes_target = args.scenes;
    cfg.window = args.window.config();
    let params: OrcaParams = match &args.orca {
        Some(p) => read_json(p)?,
        None => OrcaParams::default(),
    };
    let ds = generate(&cfg, &params)?;
    let mut out = output(args.output.as_deref())?;
    write_ndjson(&ds, &mut out)?;
    out.flush()?;
    log::info!("wrote {} scenes", ds.scenes().len());
    Ok(())
}

fn run_categorize(args: &CategorizeArgs) -> anyhow::Result<()> {
    let mut ds = read_dataset(&args.input, args.window.config())?;
    apply_categories(&mut ds, &CategorizeConfig::default())?;
    if !args.filter_types.is_empty() {
        let keep: Vec<MainType> = args
            .filter_types
            .iter()
            .map(|c| MainType::from_code(*c).with_context(|| format!("unknown type code {c}")))
            .collect::<anyhow::Result<_>>()?;
        ds.retain_scenes(|s| s.tags.as_ref().is_some_and(|t| keep.contains(&t.main_type)));
    }
    let mut out = output(args.output.as_deref())?;
    write_ndjson(&ds, &mut out)?;
    out.flush()?;
    Ok(())
}

fn run_predict(args: &PredictArgs) -> anyhow::Result<()> {
    let model: Model = args.model.parse()?;
    if args.modes == 0 {
        bail!("--modes must be at least 1");
    }
    let params: ModelParams = match &args.params {
        Some(p) => read_json(p)?,
        None => ModelParams::default(),
    };
    let ds = read_dataset(&args.input, args.window.config())?;
    let sets = predict_dataset(&ds, model, &params, args.modes, args.seed)?;
    let mut out = output(args.output.as_deref())?;
    write_predictions(&ds, &sets, &mut out)?;
    out.flush()?;
    Ok(())
}

fn load_predictions(ds: &Dataset, path: &Path) -> anyhow::Result<Vec<crowdbench_core::metrics::PredictionSet>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_predictions(ds, BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?)
}

fn run_evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let ds = read_dataset(&args.input, args.window.config())?;
    let sets = load_predictions(&ds, &args.predictions)?;
    let report = evaluate(&ds, &sets, &args.model, &args.score.config()?)?;
    print!("{}", report.to_table());
    if let Some(path) = &args.output {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run_calibrate(args: &CalibrateArgs) -> anyhow::Result<()> {
    let model: Model = args.model.parse()?;
    let grid = match &args.grid {
        Some(p) => parse_grid(model, &fs::read_to_string(p).with_context(|| format!("opening {}", p.display()))?)?,
        None => default_grid(model)?,
    };
    let ds = read_dataset(&args.input, args.window.config())?;
    let cal = calibrate_gridsearch(&ds, model, &grid, &args.score.config()?)?;
    for (i, c) in cal.candidates.iter().enumerate() {
        let mark = if i == cal.best { "*" } else { " " };
        eprintln!("{mark} {i:3}  ADE {:.3}  FDE {:.3}  Col-I {:.1}%", c.ade, c.fde, 100.0 * c.col_i);
    }
    let mut out = output(args.output.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &cal.params)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn run_report(args: &ReportArgs) -> anyhow::Result<()> {
    let ds = read_dataset(&args.input, args.window.config())?;
    let sets = load_predictions(&ds, &args.predictions)?;
    let cfg = args.score.config()?;
    let scores = crowdbench_core::harness::score_predictions(&ds, &sets, &cfg)?;
    let report = aggregate_report(&args.model, &scores);
    fs::create_dir_all(&args.output)?;
    fs::write(args.output.join("report.csv"), report.to_csv())?;
    fs::write(args.output.join("report.txt"), report.to_table())?;
    print!("{}", report.to_table());
    if let Some(dir) = &args.plots {
        fs::create_dir_all(dir)?;
        for set in &sets {
            let scene = ds.scene(set.scene_id).expect("scored above");
            let svg = scene_svg(&ds.scene_window(scene)?, set, &cfg);
            fs::write(dir.join(format!("scene_{}.svg", set.scene_id)), svg)?;
        }
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate(a) => run_generate(a),
        Command::Categorize(a) => run_categorize(a),
        Command::Predict(a) => run_predict(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::Report(a) => run_report(a),
    }
}
