//! Command-line entry point: scene generation, graph inspection, training,
//! evaluation, and benchmark timing.
//!
//! Exit codes: 0 success, 2 input/validation error, 3 numerical failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use helofusion::error::{Error, Result};
use helofusion::graph::build_multiscale;
use helofusion::model::{bind_model, forward_scene, ModelParams};
use helofusion::scene::{
    generate_synthetic_scene, load_scenes, save_scenes, ScenarioKind, ScenarioSpec, Scene,
};
use helofusion::tensor::Tape;
use helofusion::train::{
    ensure_compatible, evaluate, evaluate_baseline, load_checkpoint, save_checkpoint,
    save_predictions, train, ExperimentConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "helofusion", version, about = "Desk-scale trajectory prediction encoder")]
struct Cli {
    /// Experiment config file (TOML); flags override config values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene corpus.
    Generate(GenerateArgs),
    /// Print the deterministic interaction-graph dump of one scene.
    GraphDump(GraphDumpArgs),
    /// Train a model and write the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the constant-velocity baseline).
    Eval(EvalArgs),
    /// Time graph construction and the encoder forward pass.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Platoon,
    Crowd,
    Intersection,
}

impl From<KindArg> for ScenarioKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Platoon => ScenarioKind::Platoon,
            KindArg::Crowd => ScenarioKind::CrowdCrossing,
            KindArg::Intersection => ScenarioKind::MixedIntersection,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Agents per scene.
    #[arg(long)]
    n: usize,
    /// Number of scenes.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 10.0)]
    speed: f64,
    #[arg(long, default_value_t = 10.0)]
    spacing: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 11)]
    t_h: usize,
    #[arg(long, default_value_t = 80)]
    t_f: usize,
    #[arg(long, default_value_t = 0.1)]
    timestep: f64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct GraphDumpArgs {
    /// Scene file (scenes.jsonl).
    #[arg(long)]
    scenes: PathBuf,
    /// Which scene in the file to dump.
    #[arg(long, default_value_t = 0)]
    scene_index: usize,
    /// Pairwise neighbor count override.
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated hyperedge sizes; empty string for pairwise only.
    #[arg(long)]
    scales: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train_scenes: PathBuf,
    #[arg(long)]
    val_scenes: PathBuf,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Training log (JSON lines; first line echoes the effective config).
    #[arg(long)]
    out_log: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    k_modes: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// Trained checkpoint; not needed with --baseline.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate the constant-velocity baseline instead of a checkpoint.
    #[arg(long, default_value_t = false)]
    baseline: bool,
    #[arg(long)]
    out_report: PathBuf,
    #[arg(long)]
    out_predictions: PathBuf,
    #[arg(long)]
    k_modes: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated agent counts.
    #[arg(long, default_value = "128,512")]
    sizes: String,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

fn load_config(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = match cli_config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn echo_config(config: &ExperimentConfig) {
    println!("effective config:");
    for line in config.to_toml_string().lines() {
        println!("  {line}");
    }
}

fn cmd_generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    let config = load_config(&cli.config, cli.seed)?;
    let seed = config.seed;
    let spec = ScenarioSpec {
        kind: a.kind.into(),
        n_agents: a.n,
        speed: a.speed,
        spacing: a.spacing,
        noise_sigma: a.noise_sigma,
        t_h: a.t_h,
        t_f: a.t_f,
        timestep: a.timestep,
    };
    let scenes: Vec<Scene> = (0..a.count)
        .map(|i| generate_synthetic_scene(&spec, seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    save_scenes(&scenes, &a.out)?;
    println!("wrote {} scenes (seed {seed}) to {}", scenes.len(), a.out.display());
    Ok(())
}

fn cmd_graph_dump(cli: &Cli, a: &GraphDumpArgs) -> Result<()> {
    let config = load_config(&cli.config, cli.seed)?;
    let mut graph_config = config.model.graph.clone();
    if let Some(k) = a.k {
        graph_config.k = k;
    }
    if let Some(scales) = &a.scales {
        graph_config.scales = scales
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Validation(format!("bad scale `{s}`: {e}")))
            })
            .collect::<Result<_>>()?;
    }
    let scenes = load_scenes(&a.scenes)?;
    let scene = scenes.get(a.scene_index).ok_or_else(|| {
        Error::Validation(format!(
            "scene index {} out of range for {} scenes",
            a.scene_index,
            scenes.len()
        ))
    })?;
    let graph = build_multiscale(scene, &graph_config)?;
    print!("{}", graph.dump());
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut config = load_config(&cli.config, cli.seed)?;
    if let Some(e) = a.epochs {
        config.optimizer.epochs = e;
    }
    if let Some(b) = a.batch_size {
        config.optimizer.batch_size = b;
    }
    if let Some(lr) = a.lr {
        config.optimizer.lr = lr;
    }
    if let Some(k) = a.k_modes {
        config.model.k_modes = k;
    }
    config.validate()?;
    echo_config(&config);
    let train_scenes = load_scenes(&a.train_scenes)?;
    let val_scenes = load_scenes(&a.val_scenes)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(&a.out_log)?);
    writeln!(
        log,
        "{}",
        serde_json::json!({"schema": 1, "kind": "train_log", "config": &config})
    )?;
    let outcome = train(&config, &train_scenes, &val_scenes, |entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        writeln!(log, "{line}").expect("log write");
        println!(
            "epoch {:>4}  lr {:.3e}  train_loss {:.6}  val_minADE {:.6}",
            entry.epoch, entry.lr, entry.train_loss, entry.val_min_ade
        );
    })?;
    log.flush()?;
    save_checkpoint(&outcome.checkpoint, &a.out_checkpoint)?;
    println!(
        "best epoch {} (val minADE {:.6}); checkpoint written to {}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.val_min_ade,
        a.out_checkpoint.display()
    );
    Ok(())
}

fn write_report(
    path: &Path,
    config: &ExperimentConfig,
    report: &helofusion::metrics::MetricsReport,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "{}",
        serde_json::json!({"schema": 1, "kind": "report", "config": config})
    )?;
    writeln!(f, "{}", report.machine_record())?;
    for line in report.render_table().lines() {
        writeln!(f, "# {line}")?;
    }
    f.flush()?;
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let mut config = load_config(&cli.config, cli.seed)?;
    if let Some(k) = a.k_modes {
        config.model.k_modes = k;
    }
    let scenes = load_scenes(&a.scenes)?;
    let (report, predictions) = if a.baseline {
        evaluate_baseline(&scenes, &config.thresholds)?
    } else {
        let path = a.checkpoint.as_ref().ok_or_else(|| {
            Error::Validation("eval: --checkpoint required unless --baseline".into())
        })?;
        let ckpt = load_checkpoint(path)?;
        // A config file, if given, must agree with the checkpoint; otherwise
        // the checkpoint's own config drives inference.
        if cli.config.is_some() {
            ensure_compatible(&config.model, &ckpt)?;
        } else {
            config = ckpt.config.clone();
            if let Some(k) = a.k_modes {
                config.model.k_modes = k;
            }
        }
        config.validate()?;
        evaluate(&config, &ckpt.params, &ckpt.anchors, &scenes)?
    };
    echo_config(&config);
    write_report(&a.out_report, &config, &report)?;
    save_predictions(&predictions, &a.out_predictions)?;
    print!("{}", report.render_table());
    println!(
        "report -> {}, predictions -> {}",
        a.out_report.display(),
        a.out_predictions.display()
    );
    Ok(())
}

fn time_stats(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let config = load_config(&cli.config, cli.seed)?;
    let sizes: Vec<usize> = a
        .sizes
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::Validation(format!("bad size `{s}`: {e}")))
        })
        .collect::<Result<_>>()?;
    if sizes.is_empty() || a.repeats == 0 {
        return Err(Error::Validation("bench: need sizes and repeats >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = ModelParams::init(&config.model, &mut rng)?;
    println!(
        "{:>6} {:>12} {:>12} {:>12} {:>12} {:>8}",
        "N", "graph_ms", "graph_sd", "forward_ms", "forward_sd", "ratio"
    );
    let mut first_total: Option<f64> = None;
    for &n in &sizes {
        let spec = ScenarioSpec {
            kind: ScenarioKind::MixedIntersection,
            n_agents: n,
            speed: 8.0,
            spacing: 3.0,
            noise_sigma: 0.3,
            t_h: 5,
            t_f: config.model.t_f,
            timestep: 0.1,
        };
        let scene = generate_synthetic_scene(&spec, config.seed)?;
        let mut graph_t = Vec::with_capacity(a.repeats);
        let mut fwd_t = Vec::with_capacity(a.repeats);
        for _ in 0..a.repeats {
            let t0 = Instant::now();
            let graph = build_multiscale(&scene, &config.model.graph)?;
            graph_t.push(t0.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(graph.entry_count());
            let t1 = Instant::now();
            let mut tape = Tape::new();
            let binding = bind_model(&mut tape, &params);
            let fwd = forward_scene(&mut tape, &binding, &config.model, &scene)?;
            fwd_t.push(t1.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(tape.value(fwd.embeddings).data.len());
        }
        let (gm, gs) = time_stats(&graph_t);
        let (fm, fs) = time_stats(&fwd_t);
        let total = gm + fm;
        let ratio = match first_total {
            None => {
                first_total = Some(total);
                1.0
            }
            Some(f) => total / f,
        };
        println!("{n:>6} {gm:>12.3} {gs:>12.3} {fm:>12.3} {fs:>12.3} {ratio:>8.2}");
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Generate(a) => cmd_generate(&cli, a),
        Cmd::GraphDump(a) => cmd_graph_dump(&cli, a),
        Cmd::Train(a) => cmd_train(&cli, a),
        Cmd::Eval(a) => cmd_eval(&cli, a),
        Cmd::Bench(a) => cmd_bench(&cli, a),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
