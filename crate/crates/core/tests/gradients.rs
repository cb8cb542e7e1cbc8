mod common;

use std::collections::BTreeMap;

use camo_core::attack::sample_gradient;
use camo_core::loss::{
    feature_divergence_grad, feature_divergence_loss, select_key_features, smoothness_grad_masked,
    smoothness_loss_masked, total_objective, AttackConfig, KeyFeatureSet, SmoothTarget,
};
use camo_core::render::{render, render_backward};
use camo_core::texture::TextureMap;
use camo_core::transforms::{apply_phi, apply_phi_backward, TransformParams};
use camo_core::victim::{StubVictim, Victim, ENCODER_LAYER, PROJECTOR_LAYER};
use common::*;
use ndarray::{Array2, Array3, Axis};
use rand::Rng;

const TOL: f64 = 1e-4;

fn weights(dim: (usize, usize, usize), seed: u64) -> Array3<f64> {
    random_image(dim, seed).mapv(|v| 2.0 * v - 1.0)
}

fn mid_texture(seed: u64) -> Array3<f64> {
    random_image((8, 8, 3), seed).mapv(|v| 0.1 + 0.8 * v)
}

#[test]
fn smoothness_gradient_matches_finite_differences() {
    let img = random_image((5, 7, 3), 1);
    let mask = Array2::from_shape_fn((5, 7), |(r, c)| (r * 7 + c) % 3 != 0);
    for m in [None, Some(&mask)] {
        let analytic = smoothness_grad_masked(&img, m);
        let numeric = numeric_gradient(&img, |x| smoothness_loss_masked(x, m));
        assert!(relative_error(&analytic, &numeric) < TOL);
    }
}

#[test]
fn divergence_gradient_matches_finite_differences() {
    let mut r = rng(2);
    let mut layer = |n: usize, d: usize| Array2::from_shape_simple_fn((n, d), || r.gen_range(-1.0..1.0));
    let clean = stack(vec![(ENCODER_LAYER, layer(6, 4)), (PROJECTOR_LAYER, layer(3, 5))]);
    let adv = stack(vec![(ENCODER_LAYER, layer(6, 4)), (PROJECTOR_LAYER, layer(3, 5))]);
    let w = BTreeMap::from([(ENCODER_LAYER.to_string(), 0.4), (PROJECTOR_LAYER.to_string(), 0.6)]);
    let keys = select_key_features(&clean, &adv, 0.3).unwrap();
    assert!(!keys.is_empty());
    let (_, grads) = feature_divergence_grad(&clean, &adv, &keys, &w).unwrap();
    for (li, name) in [ENCODER_LAYER, PROJECTOR_LAYER].iter().enumerate() {
        let base = adv.layers[li].values.clone().insert_axis(Axis(2));
        let numeric = numeric_gradient(&base, |x| {
            let mut probe = adv.clone();
            probe.layers[li].values = x.index_axis(Axis(2), 0).to_owned();
            feature_divergence_loss(&clean, &probe, &keys, &w).unwrap()
        });
        let analytic = grads
            .get(*name)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(adv.layers[li].values.dim()))
            .insert_axis(Axis(2));
        assert!(relative_error(&analytic, &numeric) < TOL, "layer {name}");
    }
}

#[test]
fn render_gradient_matches_finite_differences() {
    let sample = toy_sample(12, 12, 3);
    let texels = mid_texture(4);
    let w = weights((12, 12, 3), 5);
    let mut analytic = Array3::zeros(texels.dim());
    render_backward(&sample, &w, &mut analytic).unwrap();
    let numeric = numeric_gradient(&texels, |t| {
        let out = render(&sample, &TextureMap::new(t.clone()).unwrap()).unwrap();
        (&out * &w).sum()
    });
    assert!(relative_error(&analytic, &numeric) < TOL);
}

#[test]
fn phi_gradient_matches_finite_differences() {
    let img = random_image((11, 13, 3), 6);
    for (fraction, out) in [(1.0, (11, 13)), (0.5, (8, 8)), (0.75, (16, 5)), (0.6, (3, 3))] {
        let params = TransformParams {
            crop_fraction: fraction,
            output_size: out,
            scale_label: "t".into(),
        };
        let w = weights((out.0, out.1, 3), 7);
        let analytic = apply_phi_backward(&w, (11, 13), &params).unwrap();
        let numeric = numeric_gradient(&img, |x| (&apply_phi(x, &params).unwrap() * &w).sum());
        assert!(relative_error(&analytic, &numeric) < TOL, "fraction {fraction}");
    }
}

fn objective_at(
    victim: &StubVictim,
    sample: &camo_core::render::SceneSample,
    params: &TransformParams,
    clean: &camo_core::victim::FeatureStack,
    keys: &KeyFeatureSet,
    cfg: &AttackConfig,
    texels: &Array3<f64>,
) -> f64 {
    let x = render(sample, &TextureMap::new(texels.clone()).unwrap()).unwrap();
    let adv = victim.extract_features(&apply_phi(&x, params).unwrap()).unwrap();
    total_objective(clean, &adv, keys, &x, Some(&sample.mask), cfg).unwrap().total
}

#[test]
fn total_objective_gradient_matches_finite_differences() {
    let victim = StubVictim::seeded((8, 8), 4, 8);
    let sample = toy_sample(12, 12, 9);
    let params = TransformParams {
        crop_fraction: 0.75,
        output_size: (8, 8),
        scale_label: "t".into(),
    };
    let benign = TextureMap::new(mid_texture(10)).unwrap();
    let clean = victim
        .extract_features(&apply_phi(&render(&sample, &benign).unwrap(), &params).unwrap())
        .unwrap();
    let texels = mid_texture(11);
    let cfg = AttackConfig {
        delta: 1.0,
        lambda_smooth: 0.1,
        smooth_target: SmoothTarget::RenderedImage,
        ..AttackConfig::default()
    };
    let adv = victim
        .extract_features(&apply_phi(&render(&sample, &TextureMap::new(texels.clone()).unwrap()).unwrap(), &params).unwrap())
        .unwrap();
    let keys = select_key_features(&clean, &adv, cfg.delta).unwrap();
    let g = sample_gradient(&victim, &sample, &params, &clean, &TextureMap::new(texels.clone()).unwrap(), &cfg, Some(&keys))
        .unwrap();
    let numeric = numeric_gradient(&texels, |t| objective_at(&victim, &sample, &params, &clean, &keys, &cfg, t));
    assert!(relative_error(&g.grad, &numeric) < TOL);
    let at = objective_at(&victim, &sample, &params, &clean, &keys, &cfg, &texels);
    assert!((g.terms.total - at).abs() < 1e-12);
}

#[test]
fn unreferenced_texels_get_exactly_zero_gradient() {
    let sample = toy_sample(12, 12, 12);
    let w = weights((12, 12, 3), 13);
    let mut g = Array3::zeros((8, 8, 3));
    render_backward(&sample, &w, &mut g).unwrap();
    let texels = mid_texture(14);
    // u <= 0.45 touches texel columns 0..=3 only
    let mut checked = 0;
    for r in 0..8 {
        for c in 5..8 {
            for ch in 0..3 {
                assert_eq!(g[[r, c, ch]], 0.0);
                let mut probe = texels.clone();
                probe[[r, c, ch]] += 0.05;
                let a = render(&sample, &TextureMap::new(texels.clone()).unwrap()).unwrap();
                let b = render(&sample, &TextureMap::new(probe).unwrap()).unwrap();
                assert_eq!(a, b);
                checked += 1;
            }
        }
    }
    assert!(checked >= 8);
    assert!(g.iter().any(|&v| v != 0.0));
}

#[test]
fn surrogate_gradient_reaches_the_texture() {
    let victim = camo_core::victim::SurrogateVictim::shipped();
    let sample = toy_sample(32, 32, 15);
    let texels = random_image((16, 16, 3), 16).mapv(|v| 0.2 + 0.6 * v);
    let params = TransformParams::identity((32, 32));
    let benign = TextureMap::constant((16, 16), 0.75);
    let clean = victim
        .extract_features(&render(&sample, &benign).unwrap())
        .unwrap();
    let cfg = AttackConfig {
        delta: 1.0,
        lambda_smooth: 0.0,
        ..AttackConfig::default()
    };
    let tex = TextureMap::new(texels.clone()).unwrap();
    let adv = victim.extract_features(&render(&sample, &tex).unwrap()).unwrap();
    let keys = select_key_features(&clean, &adv, 1.0).unwrap();
    let g = sample_gradient(&victim, &sample, &params, &clean, &tex, &cfg, Some(&keys)).unwrap();
    let mut r = rng(17);
    let step = 1e-5;
    for _ in 0..8 {
        // texel columns 0..=7 of 16 are referenced by u in [0.05, 0.45]
        let idx = [r.gen_range(2..14), r.gen_range(1..7), r.gen_range(0..3)];
        let f = |d: f64| {
            let mut t = texels.clone();
            t[idx] += d;
            let tm = TextureMap::new(t).unwrap();
            let adv = victim.extract_features(&render(&sample, &tm).unwrap()).unwrap();
            feature_divergence_loss(&clean, &adv, &keys, &cfg.layer_weights).unwrap()
        };
        let numeric = (f(step) - f(-step)) / (2.0 * step);
        let analytic = g.grad[idx];
        let scale = numeric.abs().max(analytic.abs()).max(1e-9);
        assert!((numeric - analytic).abs() / scale < 1e-3, "{idx:?}: {analytic} vs {numeric}");
    }
}
