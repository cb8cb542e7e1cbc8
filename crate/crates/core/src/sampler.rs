//! Training dataset manifest and pitch-reweighted view sampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::camera::{CameraPose, YawLabel};
use crate::error::{Error, Result};
use crate::imageio::{load_mask, load_rgb, load_uv16};
use crate::render::SceneSample;
use crate::transforms::{sample_transform, TransformParams, TransformSchedule};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const GRID_FILE: &str = "grid.json";
const POSE_TOLERANCE: f64 = 1e-6;

/// The declared pose grid a dataset was captured on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseGrid {
    pub distances_m: Vec<f64>,
    pub pitches_deg: Vec<f64>,
    pub yaws: Vec<YawLabel>,
}

impl Default for PoseGrid {
    fn default() -> Self {
        Self {
            distances_m: vec![5.0, 10.0],
            pitches_deg: vec![22.5, 45.0, 67.5],
            yaws: YawLabel::ALL.to_vec(),
        }
    }
}

fn on_grid(value: f64, grid: &[f64]) -> bool {
    grid.iter().any(|g| (g - value).abs() < POSE_TOLERANCE)
}

impl PoseGrid {
    pub fn validate(&self) -> Result<()> {
        if self.distances_m.is_empty() || self.pitches_deg.is_empty() || self.yaws.is_empty() {
            return Err(Error::Config("pose grid lists must be nonempty".into()));
        }
        if self.distances_m.iter().chain(&self.pitches_deg).any(|&v| !(v > 0.0)) {
            return Err(Error::Config("pose grid values must be positive".into()));
        }
        for &p in &self.pitches_deg {
            CameraPose::new(1.0, p, YawLabel::North)?;
        }
        Ok(())
    }

    pub fn contains(&self, pose: &CameraPose) -> bool {
        on_grid(pose.distance_m, &self.distances_m)
            && on_grid(pose.pitch_deg, &self.pitches_deg)
            && self.yaws.contains(&pose.yaw_label)
    }

    pub fn cells(&self) -> usize {
        self.distances_m.len() * self.pitches_deg.len() * self.yaws.len()
    }
}

/// One manifest record. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub background_path: PathBuf,
    pub uv_map_path: PathBuf,
    pub mask_path: PathBuf,
    pub distance_m: f64,
    pub pitch_deg: f64,
    pub yaw_label: YawLabel,
}

impl ManifestEntry {
    pub fn pose(&self) -> Result<CameraPose> {
        CameraPose::new(self.distance_m, self.pitch_deg, self.yaw_label)
    }
}

const ENTRY_FIELDS: [&str; 7] = [
    "sample_id",
    "background_path",
    "uv_map_path",
    "mask_path",
    "distance_m",
    "pitch_deg",
    "yaw_label",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub pose_grid: PoseGrid,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    /// Reads the assets of one entry from disk.
    pub fn load_sample(&self, index: usize) -> Result<SceneSample> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("manifest index {index} out of range")))?;
        let sample = SceneSample {
            sample_id: e.sample_id.clone(),
            pose: e.pose()?,
            background: load_rgb(&self.resolve(&e.background_path))?,
            uv_map: load_uv16(&self.resolve(&e.uv_map_path))?,
            mask: load_mask(&self.resolve(&e.mask_path))?,
        };
        sample.validate()?;
        Ok(sample)
    }

    /// Entry indices grouped by pitch (keyed by the grid's pitch values).
    pub fn by_pitch(&self) -> Vec<(f64, Vec<usize>)> {
        self.pose_grid
            .pitches_deg
            .iter()
            .map(|&p| {
                let idx = self
                    .entries
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| (e.pitch_deg - p).abs() < POSE_TOLERANCE)
                    .map(|(i, _)| i)
                    .collect();
                (p, idx)
            })
            .collect()
    }

    /// Writes `manifest.jsonl` and `grid.json` into `root`.
    pub fn write(&self) -> Result<()> {
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&serde_json::to_string(e).map_err(|e| Error::Format(e.to_string()))?);
            text.push('\n');
        }
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let grid = serde_json::to_string_pretty(&self.pose_grid).map_err(|e| Error::Format(e.to_string()))?;
        let path = self.root.join(GRID_FILE);
        fs::write(&path, grid + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Loads and validates a manifest. `path` may name the manifest file or its
/// directory. The pose grid is read from `grid.json` next to it, falling back
/// to the default grid.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;

    let grid_path = root.join(GRID_FILE);
    let pose_grid = if grid_path.exists() {
        let g = fs::read_to_string(&grid_path).map_err(|e| Error::io(&grid_path, e))?;
        serde_json::from_str(&g).map_err(|e| Error::Format(format!("{}: {e}", grid_path.display())))?
    } else {
        PoseGrid::default()
    };
    pose_grid.validate()?;

    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{}", file.display(), lineno + 1);
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("{}: {e}", at())))?;
        if let Some(obj) = value.as_object() {
            for key in obj.keys().filter(|k| !ENTRY_FIELDS.contains(&k.as_str())) {
                warn!("{}: ignoring unknown field `{key}`", at());
            }
        }
        let entry: ManifestEntry =
            serde_json::from_value(value).map_err(|e| Error::Format(format!("{}: {e}", at())))?;
        let pose = entry.pose().map_err(|e| Error::Format(format!("{}: {e}", at())))?;
        if !pose_grid.contains(&pose) {
            return Err(Error::Format(format!(
                "{}: pose ({} m, {} deg, {}) is not on the declared grid",
                at(),
                pose.distance_m,
                pose.pitch_deg,
                pose.yaw_label
            )));
        }
        for p in [&entry.background_path, &entry.uv_map_path, &entry.mask_path] {
            let full = root.join(p);
            if !full.is_file() {
                return Err(Error::MissingFile(full));
            }
        }
        entries.push(entry);
    }
    Ok(DatasetManifest {
        root,
        entries,
        pose_grid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchWeight {
    pub pitch_deg: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPolicy {
    pub pitch_weights: Vec<PitchWeight>,
    pub batch_size: usize,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self::with_ratio([3.0, 1.0, 1.0])
    }
}

impl SamplingPolicy {
    /// Weights for the 22.5 / 45 / 67.5 degree pitches.
    pub fn with_ratio(ratio: [f64; 3]) -> Self {
        Self {
            pitch_weights: [22.5, 45.0, 67.5]
                .iter()
                .zip(ratio)
                .map(|(&pitch_deg, weight)| PitchWeight { pitch_deg, weight })
                .collect(),
            batch_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.pitch_weights.is_empty() || self.pitch_weights.iter().any(|w| !(w.weight > 0.0) || !w.weight.is_finite()) {
            return Err(Error::Config("pitch weights must be a nonempty list of positive values".into()));
        }
        Ok(())
    }
}

/// Precomputed two-stage sampler: pitch class by weight, then uniform within
/// the class.
#[derive(Debug, Clone)]
pub struct ViewSampler {
    pitch_dist: WeightedIndex<f64>,
    classes: Vec<Vec<usize>>,
}

impl ViewSampler {
    pub fn new(manifest: &DatasetManifest, policy: &SamplingPolicy) -> Result<Self> {
        policy.validate()?;
        let groups = manifest.by_pitch();
        let mut classes = Vec::new();
        let mut weights = Vec::new();
        for pw in &policy.pitch_weights {
            if !on_grid(pw.pitch_deg, &manifest.pose_grid.pitches_deg) {
                return Err(Error::Config(format!("weighted pitch {} is not on the manifest grid", pw.pitch_deg)));
            }
            let members = groups
                .iter()
                .find(|(p, _)| (p - pw.pitch_deg).abs() < POSE_TOLERANCE)
                .map(|(_, m)| m.clone())
                .unwrap_or_default();
            if members.is_empty() {
                return Err(Error::EmptyPitchClass(pw.pitch_deg));
            }
            classes.push(members);
            weights.push(pw.weight);
        }
        let pitch_dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { pitch_dist, classes })
    }

    /// One manifest index.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let class = &self.classes[self.pitch_dist.sample(rng)];
        class[rng.gen_range(0..class.len())]
    }

    /// `batch_size` manifest indices, each paired with an independent transform.
    pub fn draw_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        schedule: &TransformSchedule,
        rng: &mut R,
    ) -> Result<Vec<(usize, TransformParams)>> {
        (0..batch_size)
            .map(|_| {
                let idx = self.draw(rng);
                Ok((idx, sample_transform(rng, schedule)?))
            })
            .collect()
    }
}

/// Draws and loads one batch of (sample, transform) pairs.
pub fn sample_batch<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    policy: &SamplingPolicy,
    schedule: &TransformSchedule,
    rng: &mut R,
) -> Result<Vec<(SceneSample, TransformParams)>> {
    let sampler = ViewSampler::new(manifest, policy)?;
    sampler
        .draw_batch(policy.batch_size, schedule, rng)?
        .into_iter()
        .map(|(i, t)| Ok((manifest.load_sample(i)?, t)))
        .collect()
}

/// Number of draws per epoch: ceil(|manifest| / batch_size) batches.
pub fn batches_per_epoch(manifest_len: usize, batch_size: usize) -> usize {
    manifest_len.div_ceil(batch_size.max(1))
}

/// Empirical pitch frequencies of `draws` samples, keyed by pitch in
/// thousandths of a degree.
pub fn pitch_histogram<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    sampler: &ViewSampler,
    draws: usize,
    rng: &mut R,
) -> BTreeMap<i64, usize> {
    let mut hist = BTreeMap::new();
    for _ in 0..draws {
        let e = &manifest.entries[sampler.draw(rng)];
        *hist.entry((e.pitch_deg * 1000.0).round() as i64).or_insert(0) += 1;
    }
    hist
}
