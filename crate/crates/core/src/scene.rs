//! Synthetic scene dataset: the toy car rendered over procedural street
//! backgrounds on a distance x pitch x yaw pose grid.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::camera::{Camera, CameraPose, YawLabel};
use crate::error::{Error, Result};
use crate::imageio::{save_mask, save_rgb, save_uv16, Image};
use crate::mesh::Mesh;
use crate::raster::rasterize_uv;
use crate::render::{render, SceneSample};
use crate::sampler::{DatasetManifest, ManifestEntry, PoseGrid};
use crate::texture::TextureMap;

/// Layout version of the directories written by [`generate_dataset`].
pub const DATASET_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub distances_m: Vec<f64>,
    pub pitches_deg: Vec<f64>,
    pub yaws: Vec<YawLabel>,
    pub variants_per_pose: usize,
    pub image_size: (usize, usize),
}

impl Default for GridSpec {
    fn default() -> Self {
        let g = PoseGrid::default();
        Self {
            distances_m: g.distances_m,
            pitches_deg: g.pitches_deg,
            yaws: g.yaws,
            variants_per_pose: 10,
            image_size: (224, 224),
        }
    }
}

impl GridSpec {
    pub fn pose_grid(&self) -> PoseGrid {
        PoseGrid {
            distances_m: self.distances_m.clone(),
            pitches_deg: self.pitches_deg.clone(),
            yaws: self.yaws.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pose_grid().validate()?;
        if self.variants_per_pose == 0 {
            return Err(Error::Config("variants_per_pose must be >= 1".into()));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.pose_grid().cells() * self.variants_per_pose
    }

    /// Every (pose, variant) in generation order.
    pub fn cells(&self) -> Result<Vec<(CameraPose, usize)>> {
        let mut out = Vec::with_capacity(self.total());
        for &d in &self.distances_m {
            for &p in &self.pitches_deg {
                for &y in &self.yaws {
                    for v in 0..self.variants_per_pose {
                        out.push((CameraPose::new(d, p, y)?, v));
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn sample_id(pose: &CameraPose, variant: usize) -> String {
    format!(
        "d{:04.1}_p{:04.1}_{}_v{:02}",
        pose.distance_m,
        pose.pitch_deg,
        pose.yaw_label.as_str(),
        variant
    )
}

/// Seed of one grid cell: a fixed mix of the dataset seed and the cell index.
fn cell_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash2(x: i64, y: i64, salt: u64) -> f64 {
    let h = cell_seed(salt, (x.wrapping_mul(73_856_093) ^ y.wrapping_mul(19_349_663)) as usize);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * t)
}

/// Randomized parameters of one street scene.
struct Street {
    salt: u64,
    road_angle: f64,
    road_offset: f64,
    road_half_width: f64,
    asphalt: [f64; 3],
    verge: [f64; 3],
    sky_horizon: [f64; 3],
    sky_zenith: [f64; 3],
    clutter: Vec<([f64; 2], f64, [f64; 3])>,
}

impl Street {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let gray = rng.gen_range(0.22..0.42);
        let tint = rng.gen_range(-0.03..0.03);
        let verge_hue = rng.gen_range(0.0..1.0);
        let verge = mix([0.30, 0.45, 0.20], [0.55, 0.48, 0.35], verge_hue);
        let horizon = rng.gen_range(0.75..0.95);
        let clutter = (0..rng.gen_range(4..12))
            .map(|_| {
                let pos = [rng.gen_range(-25.0..25.0), rng.gen_range(-25.0..25.0)];
                let radius = rng.gen_range(0.4..2.0);
                let color = [rng.gen(), rng.gen(), rng.gen()];
                (pos, radius, color)
            })
            .collect();
        Self {
            salt: rng.gen(),
            road_angle: rng.gen_range(-0.35..0.35),
            road_offset: rng.gen_range(-1.0..1.0),
            road_half_width: rng.gen_range(3.5..6.0),
            asphalt: [gray + tint, gray, gray - tint],
            verge,
            sky_horizon: [horizon, horizon, horizon + 0.03],
            sky_zenith: [rng.gen_range(0.25..0.5), rng.gen_range(0.45..0.65), rng.gen_range(0.75..0.95)],
            clutter,
        }
    }

    fn ground(&self, x: f64, z: f64) -> [f64; 3] {
        let (s, c) = self.road_angle.sin_cos();
        let across = c * x - s * z - self.road_offset;
        let along = s * x + c * z;
        let grain = hash2((x * 6.0).floor() as i64, (z * 6.0).floor() as i64, self.salt) - 0.5;
        let mut col = if across.abs() < self.road_half_width {
            let lane = across.abs() < 0.08 && along.rem_euclid(6.0) < 3.0;
            let edge = (across.abs() - (self.road_half_width - 0.25)).abs() < 0.08;
            if lane || edge {
                [0.9, 0.9, 0.85]
            } else {
                self.asphalt.map(|v| v + 0.06 * grain)
            }
        } else {
            self.verge.map(|v| v + 0.12 * grain)
        };
        for (pos, radius, color) in &self.clutter {
            let d2 = (x - pos[0]).powi(2) + (z - pos[1]).powi(2);
            // keep the car's footprint clear
            if d2 < radius * radius && (x.abs() > 1.5 || z.abs() > 3.0) {
                col = *color;
            }
        }
        col
    }

    fn sky(&self, up: f64) -> [f64; 3] {
        mix(self.sky_horizon, self.sky_zenith, up.clamp(0.0, 1.0).sqrt())
    }
}

/// Procedural background for one viewpoint: ground plane with road, lane
/// markings and clutter below the horizon, sky gradient above.
pub fn procedural_background(camera: &Camera, image_size: (usize, usize), rng: &mut ChaCha8Rng) -> Image {
    let street = Street::random(rng);
    let (h, w) = image_size;
    let mut img = Image::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let d = camera.ray(r, c);
            let col = if d[1] < -1e-6 {
                let t = -camera.position[1] / d[1];
                let x = camera.position[0] + t * d[0];
                let z = camera.position[2] + t * d[2];
                let fog = (t / 80.0).min(1.0);
                mix(street.ground(x, z), street.sky_horizon, fog)
            } else {
                street.sky(d[1])
            };
            for k in 0..3 {
                img[[r, c, k]] = col[k].clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Builds the in-memory sample for one grid cell.
pub fn make_sample(mesh: &Mesh, pose: &CameraPose, variant: usize, image_size: (usize, usize), seed: u64) -> Result<SceneSample> {
    let (uv_map, mask) = rasterize_uv(mesh, pose, image_size)?;
    let camera = Camera::orbit(pose, mesh.center(), image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = procedural_background(&camera, image_size, &mut rng);
    let sample = SceneSample {
        sample_id: sample_id(pose, variant),
        pose: *pose,
        background,
        uv_map,
        mask,
    };
    sample.validate()?;
    Ok(sample)
}

/// Writes every grid cell under `out_dir` and returns the manifest. Cells
/// whose pose sees nothing of the mesh are skipped with a warning.
pub fn generate_dataset(mesh: &Mesh, grid: &GridSpec, out_dir: &Path, seed: u64) -> Result<DatasetManifest> {
    grid.validate()?;
    mesh.validate()?;
    for sub in ["backgrounds", "uv", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let cells = grid.cells()?;
    let results: Vec<Result<Option<ManifestEntry>>> = cells
        .par_iter()
        .enumerate()
        .map(|(i, (pose, variant))| {
            let sample = match make_sample(mesh, pose, *variant, grid.image_size, cell_seed(seed, i)) {
                Ok(s) => s,
                Err(Error::DegeneratePose(msg)) => {
                    warn!("skipping {}: {msg}", sample_id(pose, *variant));
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let id = &sample.sample_id;
            let bg = PathBuf::from("backgrounds").join(format!("{id}.png"));
            let uv = PathBuf::from("uv").join(format!("{id}.png"));
            let mask = PathBuf::from("masks").join(format!("{id}.png"));
            save_rgb(&out_dir.join(&bg), &sample.background)?;
            save_uv16(&out_dir.join(&uv), &sample.uv_map)?;
            save_mask(&out_dir.join(&mask), &sample.mask)?;
            Ok(Some(ManifestEntry {
                sample_id: id.clone(),
                background_path: bg,
                uv_map_path: uv,
                mask_path: mask,
                distance_m: pose.distance_m,
                pitch_deg: pose.pitch_deg,
                yaw_label: pose.yaw_label,
            }))
        })
        .collect();
    let mut entries = Vec::with_capacity(results.len());
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(e) => entries.push(e),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("{skipped} of {} cells skipped as degenerate", cells.len());
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
        pose_grid: grid.pose_grid(),
    };
    manifest.write()?;
    Ok(manifest)
}

/// Renders `texture` into `sample` and writes the result as a PNG.
pub fn preview(sample: &SceneSample, texture: &TextureMap, path: &Path) -> Result<Image> {
    let img = render(sample, texture)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_rgb(path, &img)?;
    Ok(img)
}

/// Benign paint job for the toy car atlas: silver body, dark glazing on the
/// cabin sides, a darker rocker stripe along the lower body.
pub fn benign_texture(resolution: (usize, usize)) -> TextureMap {
    let (h, w) = resolution;
    let (cols, rows) = (4usize, 3usize);
    let silver = [0.74, 0.75, 0.78];
    let glass = [0.12, 0.15, 0.2];
    let trim = [0.35, 0.36, 0.38];
    let texels = Array3::from_shape_fn((h, w, 3), |(r, c, k)| {
        let u = (c as f64 + 0.5) / w as f64;
        let v = 1.0 - (r as f64 + 0.5) / h as f64;
        let (cx, cy) = ((u * cols as f64) as usize, (v * rows as f64) as usize);
        let cell = cy.min(rows - 1) * cols + cx.min(cols - 1);
        let fu = u * cols as f64 - cx as f64;
        let fv = v * rows as f64 - cy as f64;
        let color = match cell {
            // body sides: lower trim stripe
            2..=5 if fv < 0.25 => trim,
            // cabin sides: window inside a frame
            7..=10 if (0.12..0.88).contains(&fu) && (0.12..0.85).contains(&fv) => glass,
            _ => silver,
        };
        color[k]
    });
    TextureMap::new(texels).expect("benign texels are in range")
}

/// Ships the toy car as OBJ text so the CLI can write it to disk.
pub fn toy_car_obj() -> String {
    Mesh::toy_car().to_obj()
}
