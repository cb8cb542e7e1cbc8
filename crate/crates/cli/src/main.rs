//! `camo`: dataset generation, attack runs, evaluation, sweeps and plots.

mod config;
mod plot;
mod provenance;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use camo_core::attack::{self, latest_checkpoint, RunOptions};
use camo_core::eval::judge::{HttpJudge, Judge, MockJudge};
use camo_core::eval::{evaluate_run, read_summary, EvalOptions, EvalReport, PromptSet, SuccessMode, SUMMARY_FILE};
use camo_core::mesh::Mesh;
use camo_core::sampler::{load_manifest, DatasetManifest};
use camo_core::scene::{benign_texture, generate_dataset};
use camo_core::texture::TextureMap;
use camo_core::victim::{SurrogateVictim, Victim, VictimRegistry};
use clap::{Args, CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::info;

use crate::config::{CliConfig, EvalMode, JudgeKind, Override};
use crate::provenance::{new_run_id, sha256_file, Provenance};

#[derive(Parser)]
#[command(name = "camo", version, about = "Adversarial camouflage textures against vision-language driving models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the pose-gridded scene dataset.
    Dataset(DatasetArgs),
    /// Optimize a camouflage texture.
    Attack(AttackArgs),
    /// Score a texture against the benign paint on a held-out dataset.
    Eval(EvalArgs),
    /// Train and evaluate a grid of attack settings or the ablation ladder.
    Sweep(SweepArgs),
    /// Draw success-rate bar charts from an evaluation summary.
    Plot(PlotArgs),
    /// Write the built-in surrogate victim's weights to a file.
    ExportVictim(ExportArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML configuration file (see docs/config.md); defaults apply when absent.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any config field by dotted path, e.g. run.attack.delta=0.7. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<Override>,
    /// Seed for the run (run.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DatasetArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Camera distances in metres.
    #[arg(long, value_delimiter = ',', value_parser = positive)]
    distances: Option<Vec<f64>>,
    /// Camera pitches in degrees, each strictly between 0 and 90.
    #[arg(long, value_delimiter = ',', value_parser = pitch)]
    pitches: Option<Vec<f64>>,
    /// Background variants per pose.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    variants: Option<u64>,
    /// Image side length in pixels.
    #[arg(long, value_parser = clap::value_parser!(u64).range(8..))]
    size: Option<u64>,
    /// Wavefront OBJ mesh with texture coordinates; the built-in toy car when absent.
    #[arg(long)]
    mesh: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training dataset (paths.manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Learning rate (run.learning_rate).
    #[arg(long)]
    lr: Option<f64>,
    /// Epochs (run.max_epochs).
    #[arg(long)]
    epochs: Option<u64>,
    /// Run directory; defaults to <paths.out_dir>/<run id>.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Continue from a state file, or `latest` for the newest checkpoint in the run directory.
    #[arg(long, value_name = "STATE|latest")]
    resume: Option<String>,
    /// Stop after this many iterations (max_iterations).
    #[arg(long)]
    max_iterations: Option<u64>,
    /// One sample, batch of one, ten steps.
    #[arg(long)]
    smoke: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Texture PNG, or `benign` / `random` for the reference paints.
    #[arg(long)]
    texture: String,
    /// Held-out dataset (paths.eval_manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Prompt set JSON (paths.prompts); the built-in set when absent.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Judge backend (judge.kind). `http` reads CAMO_JUDGE_* from the environment.
    #[arg(long, value_enum)]
    judge: Option<JudgeKind>,
    /// Success criterion (eval.mode).
    #[arg(long, value_enum)]
    mode: Option<EvalMode>,
    /// Report directory.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training dataset (paths.manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Held-out dataset (paths.eval_manifest).
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    /// Encoder,projector weight pair. Repeatable.
    #[arg(long, value_parser = sweep::parse_alpha)]
    alpha: Vec<(f64, f64)>,
    /// Key-feature threshold. Repeatable.
    #[arg(long)]
    delta: Vec<f64>,
    /// Smoothness weight. Repeatable.
    #[arg(long)]
    lambda: Vec<f64>,
    /// Pitch sampling ratio such as 3:1:1. Repeatable.
    #[arg(long, value_parser = sweep::parse_ratio)]
    ratio: Vec<[f64; 3]>,
    /// Run the five-row ablation ladder instead of a grid.
    #[arg(long)]
    ladder: bool,
    /// Cells trained at once (sweep.parallelism).
    #[arg(long)]
    jobs: Option<usize>,
    /// Stop each cell after this many iterations (max_iterations).
    #[arg(long)]
    max_iterations: Option<u64>,
    /// Output directory for cell directories and comparison.csv.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// summary.json, or the evaluation directory containing it.
    #[arg(long)]
    report: PathBuf,
    /// Directory for the SVG charts; defaults to the report's directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(short, long)]
    out: PathBuf,
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a positive number")),
    }
}

fn pitch(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 90.0 => Ok(v),
        _ => Err(format!("`{s}` is not a pitch strictly between 0 and 90 degrees")),
    }
}

fn set(key: &str, value: impl ToString) -> Override {
    Override {
        key: key.to_string(),
        value: value.to_string(),
    }
}

fn toml_list(values: &[f64]) -> String {
    format!("[{}]", values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", "))
}

fn toml_path(p: &Path) -> String {
    toml::Value::String(p.to_string_lossy().into_owned()).to_string()
}

/// Config file plus `--set` overrides plus the command's own flags, in that
/// order. Returns the merged config and every override applied.
fn resolve(args: &ConfigArgs, mut flags: Vec<Override>) -> Result<(CliConfig, Vec<Override>)> {
    let mut all = args.set.clone();
    if let Some(s) = args.seed {
        flags.push(set("run.seed", s));
    }
    all.append(&mut flags);
    let cfg = config::load(args.config.as_deref(), &all)?;
    Ok((cfg, all))
}

fn load_victim(cfg: &CliConfig) -> Result<Arc<dyn Victim>> {
    Ok(VictimRegistry::default().load(&cfg.victim.name, cfg.victim.weights.as_deref())?)
}

fn load_benign(cfg: &CliConfig) -> Result<TextureMap> {
    match &cfg.paths.benign_texture {
        Some(p) => Ok(TextureMap::import(p)?),
        None => Ok(benign_texture(cfg.run.texture_resolution)),
    }
}

fn load_prompts(cfg: &CliConfig) -> Result<PromptSet> {
    match &cfg.paths.prompts {
        Some(p) => Ok(PromptSet::load(p)?),
        None => Ok(PromptSet::default()),
    }
}

fn make_judge(cfg: &CliConfig) -> Result<Option<Box<dyn Judge>>> {
    Ok(match cfg.judge.kind {
        JudgeKind::None => None,
        JudgeKind::Mock => Some(Box::new(MockJudge)),
        JudgeKind::Http => Some(Box::new(HttpJudge::new(cfg.judge.http()?)?)),
    })
}

fn evaluate(cfg: &CliConfig, texture: &TextureMap, manifest: &DatasetManifest, victim: &dyn Victim) -> Result<EvalReport> {
    let judge = make_judge(cfg)?;
    let prompts = load_prompts(cfg)?;
    let benign = load_benign(cfg)?;
    let options = EvalOptions {
        mode: match cfg.eval.mode {
            EvalMode::ClosedSet => SuccessMode::ClosedSet,
            EvalMode::OpenText => SuccessMode::OpenText(judge.as_deref()),
        },
        judge: judge.as_deref(),
    };
    Ok(evaluate_run(texture, &benign, manifest, victim, &prompts, options)?)
}

fn cmd_dataset(a: DatasetArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(d) = &a.distances {
        flags.push(set("dataset.distances_m", toml_list(d)));
    }
    if let Some(p) = &a.pitches {
        flags.push(set("dataset.pitches_deg", toml_list(p)));
    }
    if let Some(v) = a.variants {
        flags.push(set("dataset.variants_per_pose", v));
    }
    if let Some(s) = a.size {
        flags.push(set("dataset.image_size", format!("[{s}, {s}]")));
    }
    let (cfg, overrides) = resolve(&a.cfg, flags)?;
    let mesh = match &a.mesh {
        Some(p) => Mesh::load_obj(p)?,
        None => Mesh::toy_car(),
    };
    let manifest = generate_dataset(&mesh, &cfg.dataset, &a.out, cfg.run.seed)?;
    let prov = Provenance::new(&new_run_id(), "dataset", &cfg, cfg.run.seed, &overrides)?.finish(&a.out, &cfg)?;
    println!(
        "{} entries written to {} (manifest sha256 {})",
        manifest.len(),
        a.out.display(),
        prov.outputs.get(camo_core::sampler::MANIFEST_FILE).map_or("?", String::as_str)
    );
    Ok(())
}

fn run_dir(cfg: &CliConfig, explicit: Option<&Path>, run_id: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => cfg.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs")).join(run_id),
    }
}

fn cmd_attack(a: AttackArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(m) = &a.manifest {
        flags.push(set("paths.manifest", toml_path(m)));
    }
    if let Some(lr) = a.lr {
        flags.push(set("run.learning_rate", format!("{lr:?}")));
    }
    if let Some(e) = a.epochs {
        flags.push(set("run.max_epochs", e));
    }
    if let Some(m) = a.max_iterations {
        flags.push(set("max_iterations", m));
    }
    // Resolve once to find the manifest the smoke profile narrows.
    let (probe, _) = resolve(&a.cfg, flags.clone())?;
    let manifest_path = probe.require("paths.manifest", &probe.paths.manifest)?.clone();
    let mut manifest = load_manifest(&manifest_path)?;
    if a.smoke {
        manifest.entries.truncate(1);
        let pitch = manifest.entries.first().context("the manifest is empty")?.pitch_deg;
        flags.push(set("run.sampling.batch_size", 1));
        flags.push(set("run.max_epochs", 10));
        flags.push(set("run.sampling.pitch_weights", format!("[{{ pitch_deg = {pitch:?}, weight = 1.0 }}]")));
    }
    let (cfg, overrides) = resolve(&a.cfg, flags)?;

    let run_id = new_run_id();
    let dir = run_dir(&cfg, a.out.as_deref(), &run_id);
    let resume = match a.resume.as_deref() {
        None => None,
        Some("latest") => Some(
            latest_checkpoint(&dir).with_context(|| format!("no checkpoint under {}", dir.display()))?,
        ),
        Some(p) => Some(PathBuf::from(p)),
    };
    let victim = load_victim(&cfg)?;
    let benign = load_benign(&cfg)?;
    info!("run {run_id} -> {}", dir.display());
    let options = RunOptions {
        out_dir: Some(dir.clone()),
        resume,
        max_iterations: cfg.max_iterations,
    };
    let state = attack::run(&cfg.run, &manifest, victim.as_ref(), &benign, &options)?;
    Provenance::new(&run_id, "attack", &cfg, cfg.run.seed, &overrides)?.finish(&dir, &cfg)?;
    let last = state.loss_history.last();
    println!(
        "run {run_id}: {} iterations, final L_d {}, texture {}",
        state.iteration,
        last.map_or("n/a".into(), |r| format!("{:.4}", r.divergence)),
        dir.join(attack::FINAL_TEXTURE_FILE).display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(m) = &a.manifest {
        flags.push(set("paths.eval_manifest", toml_path(m)));
    }
    if let Some(p) = &a.prompts {
        flags.push(set("paths.prompts", toml_path(p)));
    }
    if let Some(j) = a.judge {
        flags.push(set("judge.kind", toml::Value::try_from(j)?));
    }
    if let Some(m) = a.mode {
        flags.push(set("eval.mode", toml::Value::try_from(m)?));
    }
    let (cfg, overrides) = resolve(&a.cfg, flags)?;
    let manifest = load_manifest(cfg.require("paths.eval_manifest", &cfg.paths.eval_manifest)?)?;
    let texture = match a.texture.as_str() {
        "benign" => load_benign(&cfg)?,
        "random" => TextureMap::random_uniform(cfg.run.texture_resolution, &mut ChaCha8Rng::seed_from_u64(cfg.run.seed)),
        path => TextureMap::import(Path::new(path))?,
    };
    let victim = load_victim(&cfg)?;
    let report = evaluate(&cfg, &texture, &manifest, victim.as_ref())?;
    report.write(&a.out)?;
    let mut prov = Provenance::new(&new_run_id(), "eval", &cfg, cfg.run.seed, &overrides)?;
    if Path::new(&a.texture).is_file() {
        prov.config["texture_sha256"] = sha256_file(Path::new(&a.texture))?.into();
    }
    prov.finish(&a.out, &cfg)?;
    println!("{}", sweep::summary_line(&report));
    if report.incomplete {
        eprintln!("warning: some judge calls failed; the report is marked incomplete");
    }
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let path = if a.report.is_dir() { a.report.join(SUMMARY_FILE) } else { a.report.clone() };
    let summary = read_summary(&path)?;
    let out = a
        .out
        .unwrap_or_else(|| path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    for p in plot::plot_summary(&summary, &out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    SurrogateVictim::shipped().save(&a.out)?;
    println!("{} ({})", a.out.display(), sha256_file(&a.out)?);
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dataset(a) => cmd_dataset(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => {
            if !a.ladder && a.alpha.is_empty() && a.delta.is_empty() && a.lambda.is_empty() && a.ratio.is_empty() {
                match resolve(&a.cfg, Vec::new()) {
                    Ok((cfg, _)) if !cfg.sweep.is_empty() => sweep::cmd_sweep(a),
                    Ok(_) => Cli::command()
                        .error(
                            clap::error::ErrorKind::MissingRequiredArgument,
                            "the sweep grid is empty: pass --alpha/--delta/--lambda/--ratio, --ladder, or a [sweep] table",
                        )
                        .exit(),
                    Err(e) => Err(e),
                }
            } else {
                sweep::cmd_sweep(a)
            }
        }
        Command::Plot(a) => cmd_plot(a),
        Command::ExportVictim(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
