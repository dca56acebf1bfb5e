//! `scadi`: generate the pendulum data, train, evaluate and intervene.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scadi_core::config::{RunConfig, TrainConfig};
use scadi_core::evalkit::{full_report, render_do_grid};
use scadi_core::scene::{
    build_dataset, build_label_finding_set, load_label_finding_set, load_split, write_dataset,
    write_label_finding_set, DatasetConfig, LabelFindingSet, LfConfig, Split,
};
use scadi_core::trainer::{ablation_sweep, load_model, train, SweepRow, TrainData, DEFAULT_DAG_SETTINGS};
use scadi_core::{Error, Model, Variant};

#[derive(Parser)]
#[command(name = "scadi", version, about = "Causal disentanglement on the pendulum scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the dataset and the label-finding pairs.
    GenerateData(GenerateArgs),
    /// Train one model, or one per DAG setting with --dag-sweep.
    Train(TrainArgs),
    /// Label finding, LQ scores and structure of a checkpoint, as JSON.
    Evaluate(EvaluateArgs),
    /// Grid of do-operation results for some test images.
    Intervene(InterveneArgs),
    /// Same as `train --dag-sweep`.
    Sweep(TrainArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` run config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Label-finding set, needed for --dag-sweep. Defaults to
    /// `<dataset>/lfset`.
    #[arg(long)]
    lfset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train with observer DAG weights (0,0), (3,0.5) and (6,1).
    #[arg(long)]
    dag_sweep: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Rendered at the checkpoint's image size when omitted.
    #[arg(long)]
    lfset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated latent index per factor, overriding argmax.
    #[arg(long, value_delimiter = ',')]
    relabel: Option<Vec<usize>>,
}

#[derive(Args)]
struct InterveneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    concept: usize,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [-2.0, 0.0, 2.0])]
    values: Vec<f64>,
    /// Number of test images, one grid row each.
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn init_logging() {
    let level = match std::env::var("SCADI_LOG").as_deref() {
        Ok("quiet") => "off",
        Ok("debug") => "debug",
        _ => "info",
    };
    env_logger::Builder::new()
        .parse_filters(level)
        .format_timestamp(None)
        .init();
}

fn generate(args: &GenerateArgs) -> scadi_core::Result<()> {
    let config = DatasetConfig {
        width: args.width,
        height: args.height,
        ..DatasetConfig::default()
    };
    let dataset = build_dataset(&config, args.seed)?;
    let digest = write_dataset(&dataset, &args.out)?;
    let lfset = build_label_finding_set(&LfConfig {
        width: args.width,
        height: args.height,
        ..LfConfig::default()
    })?;
    write_label_finding_set(&lfset, &args.out.join("lfset"))?;
    println!("train={} test={}", dataset.train.len(), dataset.test.len());
    println!("digest={digest}");
    Ok(())
}

fn run_config(args: &TrainArgs) -> scadi_core::Result<RunConfig> {
    let mut run = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let t: &mut TrainConfig = &mut run.train;
    if let Some(v) = args.variant {
        t.variant = v;
    }
    if let Some(e) = args.epochs {
        t.epochs = e;
    }
    if let Some(b) = args.batch_size {
        t.batch_size = b;
    }
    if let Some(l) = args.train_limit {
        t.train_limit = l;
    }
    if let Some(s) = args.seed {
        t.seed = s;
    }
    t.validate()?;
    if args.dataset.is_some() {
        run.dataset.clone_from(&args.dataset);
    }
    if args.lfset.is_some() {
        run.lfset.clone_from(&args.lfset);
    }
    if args.out.is_some() {
        run.out.clone_from(&args.out);
    }
    Ok(run)
}

fn train_cmd(args: &TrainArgs, sweep: bool) -> scadi_core::Result<()> {
    let run = run_config(args)?;
    let dataset = run
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("no dataset given (--dataset or `dataset =`)".into()))?;
    let data = TrainData::load(&dataset, run.train.train_limit)?;
    log::info!("{} training images from {}", data.len(), dataset.display());
    if !sweep {
        let trainer = train(&run.train, &data, run.out.as_deref(), |_| {})?;
        print!("{}", trainer.structure().to_text());
        return Ok(());
    }
    let lf_dir = run.lfset.clone().unwrap_or_else(|| dataset.join("lfset"));
    let lfset = load_label_finding_set(&lf_dir)?;
    let rows = ablation_sweep(&run.train, &DEFAULT_DAG_SETTINGS, &data, &lfset, run.out.as_deref())?;
    let table = SweepRow::table(&rows);
    if let Some(out) = &run.out {
        let path = out.join("sweep.tsv");
        std::fs::write(&path, &table).map_err(|e| Error::Io { path, source: e })?;
    }
    print!("{table}");
    Ok(())
}

fn lfset_for(model: &Model, dir: Option<&Path>) -> scadi_core::Result<LabelFindingSet> {
    match dir {
        Some(d) => load_label_finding_set(d),
        None => {
            let arch = model.arch();
            build_label_finding_set(&LfConfig {
                width: arch.width,
                height: arch.height,
                ..LfConfig::default()
            })
        }
    }
}

fn evaluate(args: &EvaluateArgs) -> scadi_core::Result<()> {
    let model = load_model(&args.checkpoint)?;
    let lfset = lfset_for(&model, args.lfset.as_deref())?;
    let report = full_report(&model, &lfset, args.relabel.as_deref())?;
    if report.overlap {
        log::warn!("two factors share a latent dimension; consider --relabel");
    }
    let json = report.to_json();
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        let path = out.join("report.json");
        std::fs::write(&path, format!("{json}\n")).map_err(|e| Error::Io { path, source: e })?;
    }
    println!("{json}");
    Ok(())
}

fn intervene(args: &InterveneArgs) -> scadi_core::Result<()> {
    let model = load_model(&args.checkpoint)?;
    let test = load_split(&args.dataset, Split::Test)?;
    let images: Vec<_> = test.into_iter().take(args.count.max(1)).map(|(img, _)| img).collect();
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let grid = render_do_grid(&model, &images, args.concept, &args.values, &args.out)?;
    println!(
        "wrote {} ({}x{}, {} rows, {} columns)",
        args.out.display(),
        grid.width,
        grid.height,
        images.len(),
        args.values.len() + 1
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    let result = match &cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train_cmd(a, a.dag_sweep),
        Command::Sweep(a) => train_cmd(a, true),
        Command::Evaluate(a) => evaluate(a),
        Command::Intervene(a) => intervene(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::UnknownVariant(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
