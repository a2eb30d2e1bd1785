//! `cml` — run continual multilingual learning experiments from the
//! command line: generate benchmark data, run single-stage fan-out
//! experiments or sequential trajectories, and render reports and
//! heatmaps from previous runs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cml_core::data::Benchmark;
use cml_core::metrics::ChangeMatrix;
use cml_core::runner::{
    emit_benchmark, emit_experiment_artifacts, emit_trajectory_artifacts, render_heatmap_svg,
    run_experiment, run_trajectory, write_atomic, write_manifest, ArtifactFormat,
    ExperimentConfig, TrajectoryOrder,
};
use cml_core::strategies::StrategyKind;

#[derive(Parser)]
#[command(name = "cml", version, about = "Continual multilingual learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed list, e.g. `--seed 1,2,3`.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Override the config's strategy (fft|sft|laft|laft-uriel).
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark and dump it to disk.
    GenData(ConfigArgs),
    /// Run the single-stage fan-out experiment and emit artifacts.
    Run {
        #[command(flatten)]
        common: ConfigArgs,
        /// Heatmap artifact format.
        #[arg(long, default_value = "all")]
        format: String,
    },
    /// Run a sequential continuation trajectory.
    Trajectory {
        #[command(flatten)]
        common: ConfigArgs,
        /// Stage order (h2l|l2h); overrides the config.
        #[arg(long)]
        order: Option<String>,
    },
    /// Summarize a previous run's report file.
    Report {
        /// Directory holding `report_<strategy>.json`.
        #[arg(long)]
        out: PathBuf,
        /// Strategy whose report to summarize.
        #[arg(long)]
        strategy: String,
    },
    /// Re-render a heatmap CSV.
    Heatmap {
        /// Heatmap CSV produced by `run`.
        #[arg(long)]
        input: PathBuf,
        /// Output directory (defaults to the input's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "svg")]
        format: String,
    },
}

fn parse_strategy(s: &str) -> Result<StrategyKind> {
    match s {
        "fft" => Ok(StrategyKind::Fft),
        "sft" => Ok(StrategyKind::Sft),
        "laft" => Ok(StrategyKind::Laft),
        "laft-uriel" => Ok(StrategyKind::LaftUriel),
        other => bail!("unknown strategy {other:?} (expected fft|sft|laft|laft-uriel)"),
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if !args.seed.is_empty() {
        cfg.seeds = args.seed.clone();
    }
    if let Some(s) = &args.strategy {
        cfg.strategy = parse_strategy(s)?;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::GenData(args) => {
            let cfg = load_config(&args)?;
            let out = args.out.join(&cfg.name).join("data");
            let mut total = 0;
            for &seed in &cfg.seeds {
                let bench = Benchmark::build(&cfg.benchmark, seed)?;
                let files = emit_benchmark(&bench, seed, &out)?;
                total += files.len();
            }
            println!("wrote {total} files under {}", out.display());
            Ok(())
        }
        Command::Run { common, format } => {
            let cfg = load_config(&common)?;
            let format = ArtifactFormat::parse(&format)?;
            let out = common.out.join(&cfg.name);
            let result = run_experiment(&cfg)?;
            match &result.outcome {
                Some(outcome) => {
                    let manifest =
                        emit_experiment_artifacts(&cfg, outcome, result.manifest, &out, format)?;
                    let avg = &outcome.averaged_report.averaged;
                    println!("strategy {}: seeds {:?}", cfg.strategy.as_str(), cfg.seeds);
                    println!("  AvgPercentLoss    {:.4}", avg.avg_percent_loss);
                    println!("  NumImprovedLangs  {:.4}", avg.num_improved_langs);
                    println!("  SumRatio          {}", ratio(avg.sum_ratio));
                    println!("  MaxRatio          {}", ratio(avg.max_ratio));
                    println!("artifacts in {} ({} files)", out.display(), manifest.artifacts.len());
                    Ok(())
                }
                None => {
                    write_manifest(&result.manifest, &out)?;
                    for arm in result.manifest.arms.iter().filter(|a| !a.ok()) {
                        eprintln!(
                            "arm failed (seed {}, lang {}): {}",
                            arm.seed,
                            arm.lang.as_ref().map_or("inception", |l| l.as_str()),
                            arm.status
                        );
                    }
                    bail!("run incomplete; see manifest in {}", out.display());
                }
            }
        }
        Command::Trajectory { common, order } => {
            let mut cfg = load_config(&common)?;
            if let Some(order) = order {
                cfg.trajectory = Some(match order.as_str() {
                    "h2l" => TrajectoryOrder::H2l,
                    "l2h" => TrajectoryOrder::L2h,
                    other => bail!("unknown order {other:?} (expected h2l|l2h)"),
                });
            }
            let out = common.out.join(&cfg.name);
            let outcome = run_trajectory(&cfg)?;
            let path = emit_trajectory_artifacts(&cfg, &outcome, &out)?;
            println!(
                "strategy {}: worst-stage AvgPercentLoss {:.4}, NumImprovedLangs {:.4} (avg over {} seeds)",
                cfg.strategy.as_str(),
                outcome.avg_worst_loss,
                outcome.avg_worst_improved,
                outcome.per_seed.len()
            );
            println!("report at {}", path.display());
            Ok(())
        }
        Command::Report { out, strategy } => {
            let kind = parse_strategy(&strategy)?;
            let path = out.join(format!("report_{}.json", kind.as_str()));
            let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let value: serde_json::Value = serde_json::from_reader(BufReader::new(file))?;
            println!("experiment {}", value["name"].as_str().unwrap_or("?"));
            println!("config hash {}", value["config_hash"].as_str().unwrap_or("?"));
            let avg = &value["averaged"]["averaged"];
            println!("averaged over rows and seeds:");
            for key in ["avg_percent_loss", "num_improved_langs", "sum_ratio", "max_ratio"] {
                println!("  {key:<20} {}", avg[key]);
            }
            let per_seed = value["per_seed"].as_array().cloned().unwrap_or_default();
            println!("seeds: {}", per_seed.len());
            for seed in &per_seed {
                let before: BTreeMap<String, f64> = seed["before"]
                    .as_object()
                    .map(|m| {
                        m.iter()
                            .filter_map(|(k, v)| v.as_f64().map(|f| (k.clone(), f)))
                            .collect()
                    })
                    .unwrap_or_default();
                let macro_avg = if before.is_empty() {
                    0.0
                } else {
                    before.values().sum::<f64>() / before.len() as f64
                };
                println!(
                    "  seed {}: deployed macro-avg accuracy {macro_avg:.2}%",
                    seed["seed"]
                );
            }
            Ok(())
        }
        Command::Heatmap { input, out, format } => {
            let format = ArtifactFormat::parse(&format)?;
            let file = File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let matrix = ChangeMatrix::read_csv(&mut BufReader::new(file))?;
            let dir = out.unwrap_or_else(|| {
                input.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
            });
            let stem = input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "heatmap".to_owned());
            let mut written = Vec::new();
            if matches!(format, ArtifactFormat::Svg | ArtifactFormat::All) {
                let path = dir.join(format!("{stem}.svg"));
                write_atomic(&path, render_heatmap_svg(&matrix, &stem).as_bytes())?;
                written.push(path);
            }
            if matches!(format, ArtifactFormat::Csv | ArtifactFormat::All) {
                let mut csv = Vec::new();
                matrix.write_csv(&mut csv)?;
                let path = dir.join(format!("{stem}.norm.csv"));
                write_atomic(&path, &csv)?;
                written.push(path);
            }
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn ratio(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_owned()
    } else {
        format!("{v:.4}")
    }
}
