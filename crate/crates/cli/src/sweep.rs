//! Parameter grids and the ablation ladder: one attack plus evaluation per
//! cell, summarized in `comparison.csv`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use camo_core::attack::{ablation_ladder, run, RunConfig, RunOptions};
use camo_core::eval::{EvalReport, Scenario};
use camo_core::sampler::{load_manifest, SamplingPolicy};
use camo_core::victim::{ENCODER_LAYER, PROJECTOR_LAYER};
use rayon::prelude::*;
use tracing::info;

use crate::config::CliConfig;
use crate::provenance::{new_run_id, Provenance};
use crate::{load_benign, load_victim, resolve, set, toml_path, SweepArgs};

pub const COMPARISON_FILE: &str = "comparison.csv";

pub fn parse_alpha(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split([',', ':']).collect();
    match parts.as_slice() {
        [e, p] => match (e.trim().parse::<f64>(), p.trim().parse::<f64>()) {
            (Ok(e), Ok(p)) if e >= 0.0 && p >= 0.0 && e + p > 0.0 => Ok((e, p)),
            _ => Err(format!("`{s}` needs two non-negative weights, not both zero")),
        },
        _ => Err(format!("`{s}` is not an encoder,projector pair")),
    }
}

pub fn parse_ratio(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(':')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format!("`{s}` is not a ratio like 3:1:1"))?;
    match v.as_slice() {
        &[a, b, c] if v.iter().all(|&w| w >= 0.0) && a + b + c > 0.0 => Ok([a, b, c]),
        _ => Err(format!("`{s}` needs three non-negative weights")),
    }
}

/// One row per cell of the Cartesian product of the non-empty lists.
pub fn grid_cells(cfg: &CliConfig) -> Vec<(String, RunConfig)> {
    let base = &cfg.run;
    let s = &cfg.sweep;
    let alphas: Vec<Option<(f64, f64)>> = if s.alpha.is_empty() { vec![None] } else { s.alpha.iter().copied().map(Some).collect() };
    let deltas: Vec<Option<f64>> = if s.delta.is_empty() { vec![None] } else { s.delta.iter().copied().map(Some).collect() };
    let lambdas: Vec<Option<f64>> = if s.lambda_smooth.is_empty() { vec![None] } else { s.lambda_smooth.iter().copied().map(Some).collect() };
    let ratios: Vec<Option<[f64; 3]>> = if s.ratio.is_empty() { vec![None] } else { s.ratio.iter().copied().map(Some).collect() };
    let mut cells = Vec::new();
    for a in &alphas {
        for d in &deltas {
            for l in &lambdas {
                for r in &ratios {
                    let mut c = base.clone();
                    let mut name = Vec::new();
                    if let Some((e, p)) = a {
                        c.attack.layer_weights = [(ENCODER_LAYER, *e), (PROJECTOR_LAYER, *p)]
                            .into_iter()
                            .filter(|&(_, w)| w > 0.0)
                            .map(|(k, w)| (k.to_string(), w))
                            .collect();
                        name.push(format!("a{e}-{p}"));
                    }
                    if let Some(d) = d {
                        c.attack.delta = *d;
                        name.push(format!("d{d}"));
                    }
                    if let Some(l) = l {
                        c.attack.lambda_smooth = *l;
                        name.push(format!("l{l}"));
                    }
                    if let Some(r) = r {
                        c.sampling.pitch_weights = SamplingPolicy::with_ratio(*r)
                            .pitch_weights
                            .into_iter()
                            .filter(|w| w.weight > 0.0)
                            .collect();
                        name.push(format!("r{}-{}-{}", r[0], r[1], r[2]));
                    }
                    cells.push((name.join("_"), c));
                }
            }
        }
    }
    cells
}

pub fn summary_line(r: &EvalReport) -> String {
    let rate = |s: Scenario| r.per_scenario.get(&s).map_or(0.0, |x| x.success_rate) * 100.0;
    format!(
        "success {:.1}% (planning {:.1}%, prediction {:.1}%, perception {:.1}%), universality {:.1}%, projector cosine {:.4}",
        r.overall_success_rate * 100.0,
        rate(Scenario::Planning),
        rate(Scenario::Prediction),
        rate(Scenario::Perception),
        r.universality * 100.0,
        r.mean_projector_cosine
    )
}

struct CellResult {
    name: String,
    dir: PathBuf,
    config: RunConfig,
    report: EvalReport,
    final_divergence: f64,
}

fn comparison_csv(rows: &[CellResult]) -> String {
    let mut out = String::from(
        "cell,encoder_weight,projector_weight,delta,lambda_smooth,pitch_weights,scales,success_rate,planning,prediction,perception,universality,projector_cosine,final_divergence\n",
    );
    for r in rows {
        let w = |l: &str| r.config.attack.layer_weights.get(l).copied().unwrap_or(0.0);
        let pitch = r
            .config
            .sampling
            .pitch_weights
            .iter()
            .map(|p| format!("{}={}", p.pitch_deg, p.weight))
            .collect::<Vec<_>>()
            .join(" ");
        let scales = r.config.schedule.0.iter().map(|e| e.label.as_str()).collect::<Vec<_>>().join(" ");
        let rate = |s: Scenario| r.report.per_scenario.get(&s).map_or(0.0, |x| x.success_rate);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6}",
            r.name,
            w(ENCODER_LAYER),
            w(PROJECTOR_LAYER),
            r.config.attack.delta,
            r.config.attack.lambda_smooth,
            pitch,
            scales,
            r.report.overall_success_rate,
            rate(Scenario::Planning),
            rate(Scenario::Prediction),
            rate(Scenario::Perception),
            r.report.universality,
            r.report.mean_projector_cosine,
            r.final_divergence
        );
    }
    out
}

fn run_cell(cfg: &CliConfig, index: usize, name: &str, run_cfg: &RunConfig, out: &Path) -> Result<CellResult> {
    let dir = out.join(format!("{index:02}_{name}"));
    let mut cell_cfg = cfg.clone();
    cell_cfg.run = run_cfg.clone();
    let manifest = load_manifest(cfg.require("paths.manifest", &cfg.paths.manifest)?)?;
    let eval_manifest = load_manifest(cfg.require("paths.eval_manifest", &cfg.paths.eval_manifest)?)?;
    let victim = load_victim(cfg)?;
    let benign = load_benign(cfg)?;
    info!("cell {name} -> {}", dir.display());
    let options = RunOptions {
        out_dir: Some(dir.clone()),
        resume: None,
        max_iterations: cfg.max_iterations,
    };
    let state = run(run_cfg, &manifest, victim.as_ref(), &benign, &options)?;
    let report = crate::evaluate(&cell_cfg, &state.texture, &eval_manifest, victim.as_ref())?;
    report.write(&dir.join("eval"))?;
    Provenance::new(&new_run_id(), "sweep-cell", &cell_cfg, run_cfg.seed, &[])?.finish(&dir, &cell_cfg)?;
    Ok(CellResult {
        name: name.to_string(),
        dir,
        config: run_cfg.clone(),
        report,
        final_divergence: state.loss_history.last().map_or(f64::NAN, |r| r.divergence),
    })
}

pub fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(m) = &a.manifest {
        flags.push(set("paths.manifest", toml_path(m)));
    }
    if let Some(m) = &a.eval_manifest {
        flags.push(set("paths.eval_manifest", toml_path(m)));
    }
    let list = |v: Vec<String>| format!("[{}]", v.join(", "));
    if !a.alpha.is_empty() {
        flags.push(set("sweep.alpha", list(a.alpha.iter().map(|(e, p)| format!("[{e:?}, {p:?}]")).collect())));
    }
    if !a.delta.is_empty() {
        flags.push(set("sweep.delta", list(a.delta.iter().map(|d| format!("{d:?}")).collect())));
    }
    if !a.lambda.is_empty() {
        flags.push(set("sweep.lambda_smooth", list(a.lambda.iter().map(|d| format!("{d:?}")).collect())));
    }
    if !a.ratio.is_empty() {
        flags.push(set(
            "sweep.ratio",
            list(a.ratio.iter().map(|r| format!("[{:?}, {:?}, {:?}]", r[0], r[1], r[2])).collect()),
        ));
    }
    if let Some(j) = a.jobs {
        flags.push(set("sweep.parallelism", j.max(1)));
    }
    if let Some(m) = a.max_iterations {
        flags.push(set("max_iterations", m));
    }
    let (cfg, overrides) = resolve(&a.cfg, flags)?;
    cfg.require("paths.manifest", &cfg.paths.manifest)?;
    cfg.require("paths.eval_manifest", &cfg.paths.eval_manifest)?;
    let cells = if a.ladder { ablation_ladder(&cfg.run) } else { grid_cells(&cfg) };
    for (_, c) in &cells {
        c.validate()?;
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.sweep.parallelism.max(1))
        .build()?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, (name, c))| run_cell(&cfg, i, name, c, &a.out))
            .collect::<Result<_>>()
    })?;

    std::fs::write(a.out.join(COMPARISON_FILE), comparison_csv(&results))?;
    Provenance::new(&new_run_id(), "sweep", &cfg, cfg.run.seed, &overrides)?.finish(&a.out, &cfg)?;
    for r in &results {
        println!("{:<36} {}  [{}]", r.name, summary_line(&r.report), r.dir.display());
    }
    println!("{}", a.out.join(COMPARISON_FILE).display());
    Ok(())
}
