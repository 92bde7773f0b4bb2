use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hyperds::baselines::SrArch;
use hyperds::config::RunConfig;
use hyperds::grid::Split;
use hyperds::io::{prepare_dir, read_checkpoint, read_dataset, read_metrics_csv, write_checkpoint, write_metrics_csv};
use hyperds::model::DecoderVariant;
use hyperds::plot::plot_station_errors;
use hyperds::synth::{build_dataset, SyntheticScenario};
use hyperds::train::{
    compare_methods, evaluate, evaluate_interpolation, format_curves_csv, format_ranking, load_model, train, DataAccess,
    EvalReport, Model, ModelSpec,
};
use hyperds::{Error, Result};

#[derive(Parser)]
#[command(name = "hyperds", version, about = "Station-scale downscaling experiments on synthetic scenarios")]
struct Cli {
    /// TOML run configuration; defaults apply to anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scenario and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData,
    /// Train a model and keep the checkpoint with the lowest validation station loss.
    Train(TrainArgs),
    /// Score a checkpoint or an interpolation baseline on one split.
    Eval(EvalArgs),
    /// Merge metrics from several evaluation directories and rank methods.
    Compare {
        /// Evaluation output directories holding `metrics.csv`.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Draw per-station error maps from an evaluation report.
    Plot {
        /// `report.json` written by `eval`.
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMethod {
    Hyperds,
    Unet,
    Edsr,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, env = "HYPERDS_DATA_ROOT")]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "hyperds")]
    method: TrainMethod,
    /// Decoder variant: multi_block or multi_var.
    #[arg(long)]
    variant: Option<DecoderVariant>,
    /// Train against the interpolated input instead of high-resolution labels.
    #[arg(long)]
    no_hr_supervision: bool,
    /// Station loss weight.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    InterpLr,
    InterpHr,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, env = "HYPERDS_DATA_ROOT")]
    data: PathBuf,
    /// Checkpoint directory written by `train`.
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Method name used in the metrics; defaults to the model kind.
    #[arg(long)]
    name: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match cli.command {
        Command::GenData => {
            let out = output_dir(cli.out, std::env::var_os("HYPERDS_DATA_ROOT").map(PathBuf::from))?;
            let scenario = SyntheticScenario::new(cfg.scenario.clone())?;
            let ds = build_dataset(&scenario, &out, cli.force)?;
            echo_config(&cfg, &out)?;
            let s = ds.manifest.shapes;
            println!(
                "wrote {}: LR {}x{}, HR {}x{}, {} time steps, {} stations",
                out.display(),
                s.lr_h,
                s.lr_w,
                s.hr_h,
                s.hr_w,
                s.n_times,
                s.n_stations
            );
        }
        Command::Train(args) => {
            let out = output_dir(cli.out, None)?;
            prepare_dir(&out, cli.force)?;
            if let Some(v) = args.variant {
                cfg.model.variant = v;
            }
            if args.no_hr_supervision {
                cfg.loss.hr_supervision = false;
            }
            if let Some(beta) = args.beta {
                cfg.loss.beta = beta;
            }
            cfg.validate()?;
            let ds = read_dataset(&args.data)?;
            let data = DataAccess::new(&ds)?;
            let spec = match args.method {
                TrainMethod::Hyperds => ModelSpec::Hyperds(cfg.model.clone()),
                TrainMethod::Unet => ModelSpec::Sr(hyperds::baselines::SrConfig {
                    arch: SrArch::Unet,
                    ..cfg.sr.clone()
                }),
                TrainMethod::Edsr => ModelSpec::Sr(hyperds::baselines::SrConfig {
                    arch: SrArch::Edsr,
                    ..cfg.sr.clone()
                }),
            };
            let model = Model::build(&spec, *data.domain(), data.shapes(), cfg.train.seed, cfg.train.dtype()?)?;
            let outcome = train(&model, &data, &cfg.loss, &cfg.train)?;
            write_checkpoint(&outcome.checkpoint, &out.join("checkpoint"))?;
            write_text(&out.join("curves.csv"), &format_curves_csv(&outcome.curves))?;
            echo_config(&cfg, &out)?;
            println!(
                "best epoch {} with validation station loss {:.6}; checkpoint in {}",
                outcome.checkpoint.epoch,
                outcome.checkpoint.val_station_loss,
                out.join("checkpoint").display()
            );
        }
        Command::Eval(args) => {
            let out = output_dir(cli.out, None)?;
            prepare_dir(&out, cli.force)?;
            let ds = read_dataset(&args.data)?;
            let data = DataAccess::new(&ds)?;
            let mut report = match (&args.checkpoint, args.baseline) {
                (Some(dir), _) => {
                    let bundle = read_checkpoint(dir)?;
                    let model = load_model(&bundle, &data, cfg.train.dtype()?)?;
                    let name = args.name.clone().unwrap_or_else(|| match model.spec() {
                        ModelSpec::Hyperds(_) => "hyperds".into(),
                        ModelSpec::Sr(c) => c.arch.as_str().into(),
                    });
                    evaluate(&name, &model, &data, args.split, &cfg.train)?
                }
                (None, Some(b)) => evaluate_interpolation(&data, args.split, matches!(b, Baseline::InterpHr), cfg.train.grid_eval)?,
                (None, None) => return Err(Error::Config("pass --checkpoint or --baseline".into())),
            };
            if let Some(name) = &args.name {
                report.method = name.clone();
                for r in &mut report.rows {
                    r.method = name.clone();
                }
            }
            write_metrics_csv(&out.join("metrics.csv"), &report.rows)?;
            write_text(&out.join("report.json"), &report.to_json()?)?;
            echo_config(&cfg, &out)?;
            for r in &report.rows {
                println!("{} {}: mse {:.6e} mae {:.6e}", r.method, r.variable, r.mse, r.mae);
            }
        }
        Command::Compare { reports } => {
            let out = output_dir(cli.out, None)?;
            prepare_dir(&out, cli.force)?;
            let mut loaded = Vec::new();
            for dir in &reports {
                let text = std::fs::read_to_string(dir.join("report.json")).map_err(|e| Error::io(dir.join("report.json"), e))?;
                let mut report = EvalReport::from_json(&text)?;
                report.rows = read_metrics_csv(&dir.join("metrics.csv"))?;
                loaded.push(report);
            }
            let (rows, ranking) = compare_methods(&loaded);
            write_metrics_csv(&out.join("comparison.csv"), &rows)?;
            let text = format_ranking(&ranking);
            write_text(&out.join("ranking.txt"), &text)?;
            echo_config(&cfg, &out)?;
            print!("{text}");
        }
        Command::Plot { report } => {
            let out = output_dir(cli.out, None)?;
            let text = std::fs::read_to_string(&report).map_err(|e| Error::io(&report, e))?;
            let report = EvalReport::from_json(&text)?;
            prepare_dir(&out, cli.force)?;
            for path in plot_station_errors(&report, &out)? {
                println!("{}", path.display());
            }
            echo_config(&cfg, &out)?;
        }
    }
    Ok(())
}

fn output_dir(out: Option<PathBuf>, fallback: Option<PathBuf>) -> Result<PathBuf> {
    out.or(fallback)
        .ok_or_else(|| Error::Config("no output directory: pass --out".into()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)
}
