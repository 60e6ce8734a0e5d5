//! `codecforge`: generate scenes, train, evaluate, analyze and export graphs.

mod data;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use codecforge_core::analysis::{analyze, AnalysisSettings};
use codecforge_core::blocks::{BlockConfig, BlockKind, DimSchedule};
use codecforge_core::graph::{build_topology, to_dot, to_json, GraphSpec, TopologyKind};
use codecforge_core::point::DEFAULT_RATIOS;
use codecforge_core::supervision::SupervisionMode;
use codecforge_harness::scene::label_histogram;
use codecforge_harness::train::{threads_from_env, CHECKPOINT_FILE, LOG_FILE};
use codecforge_harness::{
    evaluate, generate_suite, pcio, run_ablation, train, AblationPlan, Checkpoint, Preset, SceneClass, SceneSpec,
    TrainConfig, TrainOptions,
};

#[derive(Parser, Debug)]
#[command(name = "codecforge", version, about = "Nested codec graphs for point-cloud segmentation")]
struct Cli {
    /// Worker threads for neighbor search and evaluation; overrides
    /// CODECFORGE_THREADS. 0 runs single-threaded.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic labelled rooms.
    Generate(GenerateArgs),
    /// Print a documented training configuration with default values.
    InitConfig {
        #[arg(long)]
        seed: u64,
    },
    /// Train from a configuration file; writes train.jsonl and checkpoint.json.
    Train(TrainArgs),
    /// Score a checkpoint on labelled clouds.
    Eval(EvalArgs),
    /// Parameter and MAC accounting for a topology.
    Analyze(AnalyzeArgs),
    /// Print a topology as Graphviz DOT or JSON.
    ExportGraph(ExportArgs),
    /// Train every arm of a preset sweep and write the comparison CSV.
    Ablate(AblateArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum FileFormat {
    Text,
    Binary,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ReportFormat {
    Text,
    Json,
    Csv,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum GraphFormat {
    Dot,
    Json,
}

#[derive(clap::Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Approximate points per room.
    #[arg(long, default_value_t = 4096)]
    points: usize,
    /// Target share of thin_board and column points.
    #[arg(long)]
    small_fraction: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, value_enum, default_value_t = FileFormat::Text)]
    format: FileFormat,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Point-cloud files or directories of them.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Print nothing but the final line.
    #[arg(long)]
    quiet: bool,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    format: ReportFormat,
}

#[derive(clap::Args, Debug)]
struct GraphArgs {
    #[arg(long)]
    topology: TopologyKind,
    #[arg(long)]
    levels: usize,
    #[arg(long, default_value = "shared_mlp")]
    block: BlockKind,
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// Comma-separated channel widths for rows 0..=L.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long, default_value = "multi_level")]
    supervision: SupervisionMode,
}

#[derive(clap::Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, default_value_t = 4096)]
    points: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 6)]
    features: usize,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    format: ReportFormat,
}

#[derive(clap::Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, value_enum, default_value_t = GraphFormat::Dot)]
    format: GraphFormat,
}

#[derive(clap::Args, Debug)]
struct AblateArgs {
    /// arc, ds or skip.
    #[arg(long)]
    preset: Preset,
    /// Base configuration; topology, supervision and seed are overridden.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    train: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    test: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
    seeds: Vec<u64>,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn class_names(classes: usize) -> Vec<String> {
    if classes == SceneClass::ALL.len() {
        SceneClass::ALL.iter().map(|c| c.name().to_string()).collect()
    } else {
        (0..classes).map(|c| format!("class_{c}")).collect()
    }
}

fn generate(args: &GenerateArgs) -> Result<String> {
    let mut spec = SceneSpec::with_points(args.points);
    if let Some(f) = args.small_fraction {
        spec.small_object_fraction = f;
    }
    if let Some(s) = args.noise {
        spec.noise_sigma = s;
    }
    let clouds = generate_suite(&spec, args.count, args.seed)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let ext = match args.format {
        FileFormat::Text => "pcseg",
        FileFormat::Binary => "pcsb",
    };
    let mut out = String::new();
    for (i, cloud) in clouds.iter().enumerate() {
        let name = format!("scene_{i:03}.{ext}");
        pcio::save(cloud, &args.out.join(&name))?;
        let hist = label_histogram(cloud);
        let counts: Vec<String> = SceneClass::ALL
            .iter()
            .map(|c| format!("{}={}", c.name(), hist.get(c.id()).copied().unwrap_or(0)))
            .collect();
        writeln!(out, "{name} {} points {}", cloud.len(), counts.join(" "))?;
    }
    Ok(out)
}

fn run_train(args: &TrainArgs, threads: usize) -> Result<String> {
    let config = TrainConfig::load(&args.config)?;
    let data = data::load_all(&args.data)?;
    let resume = if args.resume {
        let path = args.out.join(CHECKPOINT_FILE);
        Some(Checkpoint::load(&path).with_context(|| format!("resuming from {}", path.display()))?)
    } else {
        let log = args.out.join(LOG_FILE);
        if log.exists() {
            fs::remove_file(&log).with_context(|| format!("replacing {}", log.display()))?;
        }
        None
    };
    let run = train(
        config,
        &data,
        TrainOptions {
            out_dir: Some(args.out.clone()),
            resume,
            threads,
        },
    )?;
    let mut out = String::new();
    if !args.quiet {
        for e in &run.epochs {
            writeln!(
                out,
                "epoch {} steps {} l_h {:.6} l_ds {:.6} l_oa {:.6} train_oa {:.4}",
                e.epoch, e.steps, e.l_h, e.l_ds, e.l_oa, e.train_oa
            )?;
        }
    }
    writeln!(
        out,
        "trained to epoch {}; log {}, checkpoint {}",
        run.trainer.epoch,
        args.out.join(LOG_FILE).display(),
        args.out.join(CHECKPOINT_FILE).display()
    )?;
    Ok(out)
}

fn run_eval(args: &EvalArgs, threads: usize) -> Result<String> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (model, _) = ck.restore::<f32>()?;
    let data = data::load_all(&args.data)?;
    let report = evaluate(&model, &ck.config, &data, threads)?;
    Ok(match args.format {
        ReportFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Text => {
            let names = class_names(model.classes);
            let mut out = String::new();
            writeln!(out, "points {}", report.points)?;
            writeln!(out, "oa     {:.4}", report.oa)?;
            writeln!(out, "miou   {:.4}", report.miou)?;
            writeln!(out, "macc   {:.4}", report.macc)?;
            for c in &report.per_class {
                let iou = c.iou.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
                writeln!(out, "  {:<14} {iou}", names[c.class_id])?;
            }
            out
        }
    })
}

fn graph_of(args: &GraphArgs) -> Result<GraphSpec> {
    let mut dims = DimSchedule::default();
    if let Some(d) = &args.dims {
        dims.row_dims = d.clone();
    }
    let block = BlockConfig {
        kind: args.block,
        k: args.k,
        ..BlockConfig::default()
    };
    let mut g = build_topology(args.topology, args.levels, &dims, block)?;
    g.supervise(args.supervision);
    Ok(g)
}

fn run_analyze(args: &AnalyzeArgs) -> Result<String> {
    let g = graph_of(&args.graph)?;
    let settings = AnalysisSettings {
        d_in: args.features,
        classes: args.classes,
        ratios: DEFAULT_RATIOS.to_vec(),
    };
    let r = analyze(&g, args.points, &settings)?;
    Ok(match args.format {
        ReportFormat::Json => r.to_json() + "\n",
        ReportFormat::Csv => r.to_csv(),
        ReportFormat::Text => {
            let mut out = String::new();
            writeln!(out, "topology        {} L={} block={}", r.topology, r.levels, r.block.name())?;
            writeln!(out, "nodes           {}", r.nodes.len())?;
            writeln!(out, "total params    {}", r.total_params)?;
            writeln!(out, "block params    {}", r.block_params())?;
            writeln!(out, "embedding       {}", r.embedding_params)?;
            writeln!(out, "final head      {}", r.final_head_params)?;
            writeln!(out, "total MACs      {} at {} points", r.total_macs, r.input_points)?;
            for (row, f) in r.row_fractions.iter().enumerate() {
                writeln!(out, "row {row} share     {:.4}", f)?;
            }
            writeln!(out, "backbone share  {:.4}", r.backbone_fraction)?;
            writeln!(out, "deepest codec   {:.4}", r.deepest_codec_fraction)?;
            out
        }
    })
}

fn run_export(args: &ExportArgs) -> Result<String> {
    let g = graph_of(&args.graph)?;
    Ok(match args.format {
        GraphFormat::Dot => to_dot(&g),
        GraphFormat::Json => to_json(&g) + "\n",
    })
}

fn run_ablate(args: &AblateArgs, threads: usize) -> Result<String> {
    let base = TrainConfig::load(&args.config)?;
    let train_set = data::load_all(&args.train)?;
    let test_set = data::load_all(&args.test)?;
    let classes = train_set.first().map_or(0, |c| c.num_classes);
    let plan = AblationPlan {
        base,
        arms: args.preset.arms(),
        seeds: args.seeds.clone(),
        class_names: class_names(classes),
    };
    let report = run_ablation(&plan, &train_set, &test_set, threads, &mut |r| {
        eprintln!("{} seed {}: oa {:.4} miou {:.4}", r.arm, r.seed, r.oa, r.miou);
    })?;
    let csv = report.to_csv();
    match &args.out {
        Some(path) => {
            write_file(path, &csv)?;
            let mut out = String::new();
            for arm in report.arms() {
                let miou = report.mean_miou(&arm).unwrap_or(f64::NAN);
                writeln!(out, "{arm:<28} mean miou {:.2}", 100.0 * miou)?;
            }
            writeln!(out, "wrote {}", path.display())?;
            Ok(out)
        }
        None => Ok(csv),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<String> {
    let threads = cli.threads.unwrap_or_else(threads_from_env);
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::InitConfig { seed } => Ok(TrainConfig::new(*seed).to_documented_text()),
        Command::Train(a) => run_train(a, threads),
        Command::Eval(a) => run_eval(a, threads),
        Command::Analyze(a) => run_analyze(a),
        Command::ExportGraph(a) => run_export(a),
        Command::Ablate(a) => {
            if a.seeds.is_empty() {
                bail!("--seeds needs at least one seed");
            }
            run_ablate(a, threads)
        }
    }
}

/// The error and its causes, skipping any cause its parent already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut text = e.to_string();
    let mut last = text.clone();
    for cause in e.chain().skip(1) {
        let msg = cause.to_string();
        if !last.contains(&msg) {
            text.push_str(": ");
            text.push_str(&msg);
        }
        last = msg;
    }
    text
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
