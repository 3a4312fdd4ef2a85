use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use neuralmd::data::{self, generate_synthetic, load_complex, load_dataset, save_complex, ComplexRecord, SyntheticSpec, Trajectory};
use neuralmd::training::{evaluate, make_split, predict, train, MethodKind, SplitKind, TrainConfig, TrainedModel};
use neuralmd::{Error, Result};

#[derive(Parser)]
#[command(name = "neuralmd", version, about = "Train and roll out ligand binding dynamics models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a synthetic force field and write ground-truth complexes.
    GenSynthetic(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Roll a checkpoint out from the first snapshot of a complex.
    Simulate(SimulateArgs),
    /// Score a checkpoint on the test part of its split.
    Evaluate(EvaluateArgs),
    /// Print counts and statistics of a complex file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    /// TOML synthetic spec; defaults apply to omitted keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output file, or a directory when --count is above 1.
    #[arg(long)]
    out: PathBuf,
    /// Number of complexes; each gets its own seed.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Single,
    Multi,
}

impl From<SplitArg> for SplitKind {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Single => SplitKind::SingleTrajectory,
            SplitArg::Multi => SplitKind::MultiTrajectory,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_method)]
    method: MethodKind,
    /// Complex file or directory; falls back to $NEURALMD_DATA_DIR.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: SplitArg,
    /// TOML training config; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    complex: PathBuf,
    #[arg(long)]
    steps: usize,
    /// Output trajectory; `.nmdb` selects the binary container.
    #[arg(long)]
    out: PathBuf,
    /// Noise stream for stochastic methods.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Complex file or directory; falls back to $NEURALMD_DATA_DIR.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON report path; a CSV table is written next to it.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    complex: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<MethodKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

const META_SPLIT: &str = "split";

fn split_name(kind: SplitKind) -> &'static str {
    match kind {
        SplitKind::SingleTrajectory => "single",
        SplitKind::MultiTrajectory => "multi",
    }
}

fn data_path(arg: Option<PathBuf>) -> Result<PathBuf> {
    arg.or_else(data::default_data_dir).ok_or_else(|| {
        Error::Config(format!("no --data given and {} is not set", data::DATA_DIR_ENV))
    })
}

fn gen_synthetic(args: GenArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            SyntheticSpec::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if args.count <= 1 {
        let rec = generate_synthetic(&spec)?;
        save_complex(&rec, &args.out)?;
        println!("wrote {} ({} snapshots) to {}", rec.id, rec.trajectory.len(), args.out.display());
        return Ok(());
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Config(format!("{}: {e}", args.out.display())))?;
    let base = spec.id.clone();
    for k in 0..args.count {
        let one = SyntheticSpec {
            id: format!("{base}-{k:03}"),
            seed: spec.seed.wrapping_add(k as u64),
            ..spec.clone()
        };
        let rec = generate_synthetic(&one)?;
        save_complex(&rec, &args.out.join(format!("{}.{}", rec.id, data::TEXT_EXTENSION)))?;
    }
    println!("wrote {} complexes to {}", args.count, args.out.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.langevin.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    let dataset = load_dataset(&data_path(args.data)?)?;
    let kind = SplitKind::from(args.split);
    let split = make_split(kind, &dataset, &cfg)?;
    log::info!("training {} on {} records for {} epochs", args.method, dataset.len(), cfg.epochs);
    let out = train(args.method, &dataset, &split, &cfg)?;
    let extra = BTreeMap::from([(META_SPLIT.to_string(), split_name(kind).to_string())]);
    out.model.save(&args.out, &extra)?;
    match (out.curves.train.last(), out.best_epoch) {
        (Some(last), Some(best)) => println!(
            "{}: {} epochs, final train loss {last:.6}, selected epoch {best}",
            args.method,
            out.curves.train.len()
        ),
        _ => println!("{}: no training epochs ran; saved the initialization", args.method),
    }
    if let Some(epoch) = out.diverged_at {
        println!("training diverged at epoch {epoch}; kept the best earlier checkpoint");
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(TrainedModel, BTreeMap<String, String>)> {
    let ckpt = neuralmd::tensor::Checkpoint::load(path)?;
    Ok((TrainedModel::from_checkpoint(&ckpt)?, ckpt.meta))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let (model, _) = load_model(&args.ckpt)?;
    let rec = load_complex(&args.complex)?;
    let (pred, diverged) = predict(&model, &rec, 0, args.steps, args.seed)?;
    let mut positions = vec![rec.trajectory.positions[0].clone()];
    positions.extend(pred);
    let mut metadata = rec.metadata.clone();
    metadata.insert("source".into(), format!("neuralmd-simulate:{}", model.method));
    metadata.insert("truncated".into(), diverged.to_string());
    let out = ComplexRecord {
        trajectory: Trajectory {
            positions,
            velocities: None,
        },
        metadata,
        ..rec
    };
    save_complex(&out, &args.out)?;
    if diverged {
        println!("rollout diverged; padded with the last finite snapshot");
    }
    println!("wrote {} snapshots to {}", out.trajectory.len(), args.out.display());
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let (model, meta) = load_model(&args.ckpt)?;
    let kind = match meta.get(META_SPLIT).map(String::as_str) {
        Some("multi") => SplitKind::MultiTrajectory,
        Some("single") | None => SplitKind::SingleTrajectory,
        Some(other) => return Err(Error::Config(format!("checkpoint names unknown split {other:?}"))),
    };
    let dataset = load_dataset(&data_path(args.data)?)?;
    let split = make_split(kind, &dataset, &model.config)?;
    let report = evaluate(&model, &dataset, &split)?;
    report.save(&args.report)?;
    println!("{}", report.summary());
    println!("report written to {}", args.report.display());
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let rec = load_complex(&args.complex)?;
    let traj = &rec.trajectory;
    println!("id          {}", rec.id);
    println!("atoms       {}", rec.ligand.len());
    println!("residues    {}", rec.protein.len());
    println!("snapshots   {}", traj.len());
    println!("velocities  {}", if rec.has_velocities() { "yes" } else { "no" });
    let first = &traj.positions[0];
    let last = &traj.positions[traj.len() - 1];
    let net: f64 = first.iter().zip(last).map(|(a, b)| (b - a).norm()).sum::<f64>() / first.len() as f64;
    let steps: Vec<f64> = traj
        .positions
        .windows(2)
        .flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (b - a).norm()))
        .collect();
    let mean_step = if steps.is_empty() { 0.0 } else { steps.iter().sum::<f64>() / steps.len() as f64 };
    let max_step = steps.iter().copied().fold(0.0, f64::max);
    let ca = &rec.protein.ca;
    let closest = traj
        .positions
        .iter()
        .flatten()
        .flat_map(|p| ca.iter().map(move |c| (p - c).norm()))
        .fold(f64::INFINITY, f64::min);
    println!("mean net displacement  {net:.4} Å");
    println!("mean step              {mean_step:.4} Å");
    println!("max step               {max_step:.4} Å");
    println!("closest ligand-Cα      {closest:.4} Å");
    for (k, v) in &rec.metadata {
        println!("meta {k} = {v}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Train(a) => run_train(a),
        Command::Simulate(a) => simulate(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
