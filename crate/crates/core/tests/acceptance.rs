//! One PASS/FAIL line per acceptance criterion. A FAIL line is a measured
//! result, not a harness error: the process exits nonzero only on a panic or
//! an error while running a check.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use camo_core::attack::{ablation_ladder, run, Attack, RunConfig, RunOptions, RunState};
use camo_core::eval::judge::{Judge, MockJudge};
use camo_core::eval::metrics::{bleu, meteor, rouge_l};
use camo_core::eval::{evaluate_run, three_p_success, EvalOptions, EvalReport, PromptSet, Scenario, SuccessMode};
use camo_core::imageio::Image;
use camo_core::loss::{
    feature_divergence_grad, feature_divergence_loss, select_key_features, smoothness_grad_masked, smoothness_loss,
    total_objective, AttackConfig, SmoothTarget,
};
use camo_core::mesh::Mesh;
use camo_core::render::{render, render_backward};
use camo_core::sampler::{DatasetManifest, SamplingPolicy, ViewSampler};
use camo_core::scene::{benign_texture, generate_dataset, GridSpec};
use camo_core::texture::TextureMap;
use camo_core::transforms::{apply_phi, apply_phi_backward, center_crop, TransformParams};
use camo_core::victim::{StubVictim, SurrogateVictim, Victim, ENCODER_LAYER, PROJECTOR_LAYER};
use common::*;
use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

const GRAD_TOL: f64 = 1e-4;

fn report(n: usize, name: &str, outcome: Outcome) -> bool {
    match outcome {
        Ok((pass, detail)) => {
            println!("criterion {n:>2} [{name}] {}: {detail}", if pass { "PASS" } else { "FAIL" });
            pass
        }
        Err(e) => {
            println!("criterion {n:>2} [{name}] ERROR: {e}");
            std::process::exit(1);
        }
    }
}

fn signed(dim: (usize, usize, usize), seed: u64) -> Array3<f64> {
    random_image(dim, seed).mapv(|v| 2.0 * v - 1.0)
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut errors = BTreeMap::new();

    let img = random_image((8, 8, 3), 1);
    errors.insert("smoothness", relative_error(&smoothness_grad_masked(&img, None), &numeric_gradient(&img, smoothness_loss)));

    let mut r = rng(2);
    let mut layer = |n: usize, d: usize| Array2::from_shape_simple_fn((n, d), || r.gen_range(-1.0..1.0));
    let clean = stack(vec![(ENCODER_LAYER, layer(6, 4)), (PROJECTOR_LAYER, layer(3, 5))]);
    let adv = stack(vec![(ENCODER_LAYER, layer(6, 4)), (PROJECTOR_LAYER, layer(3, 5))]);
    let w = BTreeMap::from([(ENCODER_LAYER.to_string(), 0.4), (PROJECTOR_LAYER.to_string(), 0.6)]);
    let keys = select_key_features(&clean, &adv, 1.0)?;
    let (_, grads) = feature_divergence_grad(&clean, &adv, &keys, &w)?;
    let mut fdl = 0.0f64;
    for (li, name) in [ENCODER_LAYER, PROJECTOR_LAYER].iter().enumerate() {
        let base = adv.layers[li].values.clone().insert_axis(Axis(2));
        let numeric = numeric_gradient(&base, |x| {
            let mut probe = adv.clone();
            probe.layers[li].values = x.index_axis(Axis(2), 0).to_owned();
            feature_divergence_loss(&clean, &probe, &keys, &w).unwrap()
        });
        fdl = fdl.max(relative_error(&grads[*name].clone().insert_axis(Axis(2)), &numeric));
    }
    errors.insert("divergence", fdl);

    let sample = toy_sample(12, 12, 3);
    let texels = random_image((8, 8, 3), 4).mapv(|v| 0.1 + 0.8 * v);
    let wr = signed((12, 12, 3), 5);
    let mut analytic = Array3::zeros(texels.dim());
    render_backward(&sample, &wr, &mut analytic)?;
    let numeric = numeric_gradient(&texels, |t| (&render(&sample, &TextureMap::new(t.clone()).unwrap()).unwrap() * &wr).sum());
    errors.insert("render", relative_error(&analytic, &numeric));

    let img = random_image((11, 13, 3), 6);
    let params = TransformParams {
        crop_fraction: 0.6,
        output_size: (8, 8),
        scale_label: "t".into(),
    };
    let wp = signed((8, 8, 3), 7);
    let analytic = apply_phi_backward(&wp, (11, 13), &params)?;
    let numeric = numeric_gradient(&img, |x| (&apply_phi(x, &params).unwrap() * &wp).sum());
    errors.insert("phi", relative_error(&analytic, &numeric));

    let victim = StubVictim::seeded((8, 8), 4, 8);
    let params = TransformParams {
        crop_fraction: 0.75,
        output_size: (8, 8),
        scale_label: "t".into(),
    };
    let benign = TextureMap::new(random_image((8, 8, 3), 10).mapv(|v| 0.1 + 0.8 * v))?;
    let clean = victim.extract_features(&apply_phi(&render(&sample, &benign)?, &params)?)?;
    let cfg = AttackConfig {
        delta: 1.0,
        lambda_smooth: 0.1,
        smooth_target: SmoothTarget::RenderedImage,
        ..AttackConfig::default()
    };
    let texels = random_image((8, 8, 3), 11).mapv(|v| 0.1 + 0.8 * v);
    let tex = TextureMap::new(texels.clone())?;
    let adv = victim.extract_features(&apply_phi(&render(&sample, &tex)?, &params)?)?;
    let keys = select_key_features(&clean, &adv, cfg.delta)?;
    let g = camo_core::attack::sample_gradient(&victim, &sample, &params, &clean, &tex, &cfg, Some(&keys))?;
    let numeric = numeric_gradient(&texels, |t| {
        let x = render(&sample, &TextureMap::new(t.clone()).unwrap()).unwrap();
        let adv = victim.extract_features(&apply_phi(&x, &params).unwrap()).unwrap();
        total_objective(&clean, &adv, &keys, &x, Some(&sample.mask), &cfg).unwrap().total
    });
    errors.insert("total", relative_error(&g.grad, &numeric));

    let elapsed = t.elapsed();
    let worst = errors.values().copied().fold(0.0, f64::max);
    let pass = worst < GRAD_TOL && elapsed < Duration::from_secs(60);
    let listed: Vec<String> = errors.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Ok((pass, format!("{} ({:.2} s)", listed.join(", "), elapsed.as_secs_f64())))
}

fn smoothness_oracle() -> Outcome {
    let fixture = Image::from_shape_vec((2, 2, 1), vec![0.0, 1.0, 0.0, 1.0])?;
    let on_fixture = smoothness_loss(&fixture);
    let mut r = rng(3);
    let constants: Vec<f64> = (0..20)
        .map(|_| {
            let v: f64 = r.gen();
            let dim = (r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..4));
            smoothness_loss(&Image::from_elem(dim, v))
        })
        .collect();
    let pass = on_fixture == 2.0 && constants.iter().all(|&c| c == 0.0);
    Ok((pass, format!("fixture {on_fixture}, 20 constant images all 0: {}", constants.iter().all(|&c| c == 0.0))))
}

fn key_feature_semantics() -> Outcome {
    let mut r = rng(4);
    let mut ok_identical = true;
    let mut ok_monotone = true;
    for _ in 0..100 {
        let mut layer = |n: usize, d: usize| Array2::from_shape_simple_fn((n, d), || r.gen_range(-1.0..1.0));
        let clean = stack(vec![(ENCODER_LAYER, layer(7, 5)), (PROJECTOR_LAYER, layer(4, 6))]);
        let adv = stack(vec![(ENCODER_LAYER, layer(7, 5)), (PROJECTOR_LAYER, layer(4, 6))]);
        for delta in [-0.5, 0.0, 0.5, 0.999_999] {
            ok_identical &= select_key_features(&clean, &clean, delta)?.is_empty();
        }
        let all = select_key_features(&clean, &clean, 1.0)?;
        ok_identical &= all.get(ENCODER_LAYER).len() == 7 && all.get(PROJECTOR_LAYER).len() == 4;
        let deltas = [-1.0, -0.6, -0.2, 0.0, 0.3, 0.7, 1.0];
        let sets: Vec<_> = deltas.iter().map(|&d| select_key_features(&clean, &adv, d)).collect::<Result<_, _>>()?;
        for pair in sets.windows(2) {
            for name in [ENCODER_LAYER, PROJECTOR_LAYER] {
                ok_monotone &= pair[0].get(name).iter().all(|i| pair[1].get(name).contains(i));
            }
        }
        ok_monotone &= sets[6].get(ENCODER_LAYER).len() == 7;
    }
    Ok((
        ok_identical && ok_monotone,
        format!("identical stacks empty below 1 and full at 1: {ok_identical}; nested over 100 stacks: {ok_monotone}"),
    ))
}

fn divergence_arithmetic() -> Outcome {
    // unit rows at angle acos(c) to the clean row have cosine exactly c
    let row = |c: f64| Array2::from_shape_vec((1, 2), vec![c, (1.0 - c * c).sqrt()]).unwrap();
    let e1 = Array2::from_shape_vec((1, 2), vec![1.0, 0.0])?;
    let clean = stack(vec![(ENCODER_LAYER, e1.clone()), (PROJECTOR_LAYER, e1)]);
    let adv = stack(vec![(ENCODER_LAYER, row(0.2)), (PROJECTOR_LAYER, row(0.5))]);
    let w = BTreeMap::from([(ENCODER_LAYER.to_string(), 0.4), (PROJECTOR_LAYER.to_string(), 0.6)]);
    let keys = select_key_features(&clean, &adv, 1.0)?;
    let ld = feature_divergence_loss(&clean, &adv, &keys, &w)?;
    let oracle = 0.4 * 0.2 + 0.6 * 0.5;
    Ok(((ld - oracle).abs() <= 1e-12 && (ld - 0.38).abs() <= 1e-12, format!("L_d = {ld:.15}")))
}

fn sampling_ratio() -> Outcome {
    let m = synthetic_manifest(3);
    let sampler = ViewSampler::new(&m, &SamplingPolicy::with_ratio([3.0, 1.0, 1.0]))?;
    let mut r = rng(21);
    let draws = 10_000;
    let mut per_entry = vec![0usize; m.len()];
    for _ in 0..draws {
        per_entry[sampler.draw(&mut r)] += 1;
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for (pitch, expected) in [(22.5, 0.6), (45.0, 0.2), (67.5, 0.2)] {
        let counts: Vec<usize> = (0..m.len()).filter(|&i| m.entries[i].pitch_deg == pitch).map(|i| per_entry[i]).collect();
        let n: usize = counts.iter().sum();
        let freq = n as f64 / draws as f64;
        let e = n as f64 / counts.len() as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new((counts.len() - 1) as f64)?.cdf(stat);
        pass &= (freq - expected).abs() <= 0.02 && p > 0.01;
        parts.push(format!("{pitch}: {freq:.4} (p {p:.3})"));
    }
    Ok((pass, parts.join(", ")))
}

fn crop_exactness() -> Outcome {
    let img = Image::from_shape_fn((100, 100, 1), |(r, c, _)| (r * 1000 + c) as f64);
    let out = center_crop(&img, 50, 50)?;
    let exact = out.dim() == (50, 50, 1)
        && ndarray::indices((50, 50)).into_iter().all(|(r, c)| out[[r, c, 0]] == ((r + 25) * 1000 + c + 25) as f64);
    let identity = center_crop(&img, 100, 100)? == img;
    Ok((exact && identity, format!("rows/cols [25, 75): {exact}; full-size crop is identity: {identity}")))
}

fn occlusion() -> Outcome {
    let sample = toy_sample(12, 12, 12);
    let w = signed((12, 12, 3), 13);
    let mut g = Array3::zeros((8, 8, 3));
    render_backward(&sample, &w, &mut g)?;
    let texels = random_image((8, 8, 3), 14);
    let base = render(&sample, &TextureMap::new(texels.clone())?)?;
    let mut checked = 0;
    let mut zero = true;
    for r in 0..8 {
        for c in 5..8 {
            let idx = [r, c, (r + c) % 3];
            let mut probe = texels.clone();
            probe[idx] += 0.05;
            zero &= g[idx] == 0.0 && render(&sample, &TextureMap::new(probe)?)? == base;
            checked += 1;
        }
    }
    let live = g.iter().filter(|&&v| v != 0.0).count();
    Ok((zero && checked >= 8 && live > 0, format!("{checked} unreferenced texels exactly zero: {zero}; {live} referenced texels nonzero")))
}

fn metric_identities(eval: &DatasetManifest) -> Outcome {
    let mut nlp = true;
    for t in ["go straight", "Slow down, a pedestrian is crossing.", "the car ahead is turning left"] {
        nlp &= bleu(t, t)? == 1.0 && meteor(t, t)? == 1.0 && rouge_l(t, t)? == 1.0;
    }
    let s = MockJudge.score("keep a safe distance", "keep a safe distance", Scenario::Prediction)?;
    let mock = (s.general, s.regional, s.suggestion) == (10.0, 10.0, 10.0);
    let direct = !three_p_success("stop", "stop", Scenario::Planning, SuccessMode::ClosedSet)?;
    let benign = benign_texture(RunConfig::default().texture_resolution);
    let r = evaluate_run(
        &benign,
        &benign,
        eval,
        &SurrogateVictim::shipped(),
        &PromptSet::default(),
        EvalOptions {
            mode: SuccessMode::ClosedSet,
            judge: Some(&MockJudge),
        },
    )?;
    let clean = r.overall_success_rate == 0.0 && r.per_scenario.values().all(|s| s.success_rate == 0.0);
    Ok((
        nlp && mock && direct && clean,
        format!(
            "BLEU/METEOR/ROUGE 1.0000: {nlp}; mock (10, 10, 10): {mock}; clean-vs-clean success {:.1}% over {} records",
            100.0 * r.overall_success_rate,
            r.records.len()
        ),
    ))
}

struct Desk {
    train: DatasetManifest,
    eval: DatasetManifest,
    victim: SurrogateVictim,
    benign: TextureMap,
}

impl Desk {
    fn evaluate(&self, texture: &TextureMap) -> Result<EvalReport, camo_core::Error> {
        evaluate_run(texture, &self.benign, &self.eval, &self.victim, &PromptSet::default(), EvalOptions::default())
    }

    fn attack(&self, cfg: &RunConfig) -> Result<RunState, camo_core::Error> {
        run(cfg, &self.train, &self.victim, &self.benign, &RunOptions::default())
    }
}

fn desk(root: &Path) -> Result<Desk, camo_core::Error> {
    let mesh = Mesh::toy_car();
    let train = generate_dataset(&mesh, &GridSpec::default(), &root.join("train"), 1)?;
    let held_out = GridSpec {
        variants_per_pose: 2,
        ..GridSpec::default()
    };
    let eval = generate_dataset(&mesh, &held_out, &root.join("eval"), 2)?;
    Ok(Desk {
        train,
        eval,
        victim: SurrogateVictim::shipped(),
        benign: benign_texture(RunConfig::default().texture_resolution),
    })
}

fn attack_efficacy(d: &Desk, cfg: &RunConfig) -> Result<((bool, String), f64), Box<dyn std::error::Error>> {
    let t = Instant::now();
    let state = d.attack(cfg)?;
    let attack_time = t.elapsed();
    let init = Attack::new(&d.victim, &d.train, d.benign.clone(), cfg.clone())?.initial_state()?.texture;
    let random = TextureMap::random_uniform(cfg.texture_resolution, &mut rng(99));
    let adv = d.evaluate(&state.texture)?;
    let start = d.evaluate(&init)?;
    let base = d.evaluate(&random)?;
    let total = t.elapsed();
    let drop = start.mean_projector_cosine - adv.mean_projector_cosine;
    let lift = adv.overall_success_rate - base.overall_success_rate;
    let pass = drop >= 0.1 && lift >= 0.15 && total < Duration::from_secs(30 * 60);
    let detail = format!(
        "{} iterations in {:.0} s (with evals {:.0} s); projector cosine {:.4} -> {:.4} (drop {drop:.4}); \
         success {:.1}% vs random {:.1}% (+{:.1} pp)",
        state.iteration,
        attack_time.as_secs_f64(),
        total.as_secs_f64(),
        start.mean_projector_cosine,
        adv.mean_projector_cosine,
        100.0 * adv.overall_success_rate,
        100.0 * base.overall_success_rate,
        100.0 * lift
    );
    Ok(((pass, detail), adv.overall_success_rate))
}

fn ladder(d: &Desk, cfg: &RunConfig, full_success: f64) -> Outcome {
    let rows = ablation_ladder(cfg);
    let mut success = Vec::new();
    for (name, row) in &rows {
        let rate = if row == cfg {
            full_success
        } else {
            d.evaluate(&d.attack(row)?.texture)?.overall_success_rate
        };
        success.push((name.clone(), rate));
    }
    let s: Vec<f64> = success.iter().map(|(_, r)| *r).collect();
    let multi_beats_single = s[2] >= s[0].max(s[1]);
    let sampling_keeps = s[3] >= s[2];
    let scales_keep = s[4] >= s[3];
    let listed: Vec<String> = success.iter().map(|(n, r)| format!("{n} {:.1}%", 100.0 * r)).collect();
    Ok((
        multi_beats_single && sampling_keeps && scales_keep,
        format!(
            "{}; multi >= single: {multi_beats_single}, +sampling keeps: {sampling_keeps}, +multi-scale keeps: {scales_keep}",
            listed.join(", ")
        ),
    ))
}

fn determinism(d: &Desk, cfg: &RunConfig) -> Outcome {
    let once = || run(cfg, &d.train, &d.victim, &d.benign, &RunOptions { max_iterations: Some(20), ..RunOptions::default() });
    let (a, b) = (once()?, once()?);
    let bits = |s: &RunState| s.texture.texels().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same_texture = bits(&a) == bits(&b);
    let same_log = serde_json::to_string(&a.loss_history)? == serde_json::to_string(&b.loss_history)?;
    Ok((same_texture && same_log, format!("{} iterations twice: texture identical {same_texture}, loss log identical {same_log}", a.iteration)))
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut passed = 0;
    let mut tally = |ok: bool| passed += ok as usize;
    tally(report(1, "gradients", gradients()));
    tally(report(2, "smoothness oracle", smoothness_oracle()));
    tally(report(3, "key-feature semantics", key_feature_semantics()));
    tally(report(4, "divergence arithmetic", divergence_arithmetic()));
    tally(report(5, "pitch sampling", sampling_ratio()));
    tally(report(6, "centre crop", crop_exactness()));
    tally(report(7, "occlusion gradient", occlusion()));
    let d = desk(dir.path()).expect("desk datasets");
    tally(report(8, "metric identities", metric_identities(&d.eval)));
    let cfg = RunConfig::default();
    let (efficacy, full_success) = match attack_efficacy(&d, &cfg) {
        Ok((outcome, s)) => (Ok(outcome), s),
        Err(e) => (Err(e), 0.0),
    };
    tally(report(9, "attack efficacy", efficacy));
    tally(report(10, "ablation ladder", ladder(&d, &cfg, full_success)));
    tally(report(11, "determinism", determinism(&d, &cfg)));
    println!("{passed}/11 criteria pass");
}
