#![allow(dead_code)]

use std::path::PathBuf;

use camo_core::camera::{CameraPose, YawLabel};
use camo_core::imageio::Image;
use camo_core::render::SceneSample;
use camo_core::sampler::{DatasetManifest, ManifestEntry, PoseGrid};
use camo_core::victim::{FeatureLayer, FeatureStack, Provenance};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(dim: (usize, usize, usize), seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_shape_simple_fn(dim, || r.gen())
}

pub fn stack(layers: Vec<(&str, Array2<f64>)>) -> FeatureStack {
    FeatureStack {
        layers: layers
            .into_iter()
            .map(|(n, v)| FeatureLayer {
                name: n.to_string(),
                values: v,
            })
            .collect(),
        provenance: Provenance {
            victim: "test".into(),
            input_digest: String::new(),
        },
    }
}

/// A `h x w` view whose foreground skips the one-pixel border and whose UVs
/// cover only u in [0.05, 0.45], v in [0.1, 0.9]: the right half of any
/// texture is never looked up.
pub fn toy_sample(h: usize, w: usize, seed: u64) -> SceneSample {
    let background = random_image((h, w, 3), seed);
    let mask = Array2::from_shape_fn((h, w), |(r, c)| r > 0 && c > 0 && r + 1 < h && c + 1 < w);
    let uv_map = Array3::from_shape_fn((h, w, 2), |(r, c, k)| {
        if k == 0 {
            0.05 + 0.4 * c as f64 / w as f64
        } else {
            0.1 + 0.8 * r as f64 / h as f64
        }
    });
    SceneSample {
        sample_id: format!("toy-{seed}"),
        pose: CameraPose::new(5.0, 45.0, YawLabel::North).unwrap(),
        background,
        uv_map,
        mask,
    }
}

/// Manifest over the default pose grid with placeholder file paths.
pub fn synthetic_manifest(variants: usize) -> DatasetManifest {
    let grid = PoseGrid::default();
    let mut entries = Vec::new();
    for &d in &grid.distances_m {
        for &p in &grid.pitches_deg {
            for &y in &grid.yaws {
                for v in 0..variants {
                    let id = format!("d{d}_p{p}_{}_{v}", y.as_str());
                    entries.push(ManifestEntry {
                        sample_id: id.clone(),
                        background_path: format!("bg/{id}.png").into(),
                        uv_map_path: format!("uv/{id}.png").into(),
                        mask_path: format!("mask/{id}.png").into(),
                        distance_m: d,
                        pitch_deg: p,
                        yaw_label: y,
                    });
                }
            }
        }
    }
    DatasetManifest {
        root: PathBuf::new(),
        entries,
        pose_grid: grid,
    }
}

/// Central differences of `f` over every entry of `x`.
pub fn numeric_gradient(x: &Array3<f64>, mut f: impl FnMut(&Array3<f64>) -> f64) -> Array3<f64> {
    let mut probe = x.clone();
    let mut g = Array3::zeros(x.dim());
    for idx in ndarray::indices(x.dim()) {
        let v = probe[idx];
        probe[idx] = v + FD_STEP;
        let up = f(&probe);
        probe[idx] = v - FD_STEP;
        let down = f(&probe);
        probe[idx] = v;
        g[idx] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
pub fn relative_error(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
