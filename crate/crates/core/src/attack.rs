//! The texture optimization loop.
//!
//! Each iteration draws a batch of (sample, transform) pairs, renders the
//! benign and adversarial textures into each sample, passes both through the
//! same transform into the victim, and descends the batch-mean objective
//! with respect to the adversarial texels.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{Error, Result};
use crate::loss::{
    feature_divergence_grad, select_key_features, smoothness_grad_masked, smoothness_loss_masked, AttackConfig,
    KeyFeatureSet, ObjectiveTerms, SmoothTarget,
};
use crate::render::{render, render_backward, SceneSample};
use crate::sampler::{batches_per_epoch, DatasetManifest, SamplingPolicy, ViewSampler};
use crate::texture::{TextureMap, DEFAULT_RESOLUTION};
use crate::transforms::{apply_phi, apply_phi_backward, TransformParams, TransformSchedule};
use crate::victim::{FeatureStack, Victim, ENCODER_LAYER, PROJECTOR_LAYER};

pub const STATE_FORMAT_VERSION: u32 = 1;
const STATE_MAGIC: &[u8; 8] = b"CAMOSTAT";
pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const FINAL_TEXTURE_FILE: &str = "final_texture.png";
pub const FINAL_STATE_FILE: &str = "final.state";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    RandomUniform,
    Gray,
    FromFile(PathBuf),
}

/// Initial adversarial texture. `rng` is only consumed by `RandomUniform`.
pub fn init_texture(resolution: (usize, usize), mode: &InitMode, rng: &mut ChaCha8Rng) -> Result<TextureMap> {
    if resolution.0 == 0 || resolution.1 == 0 {
        return Err(Error::InvalidArgument("texture resolution must be positive".into()));
    }
    match mode {
        InitMode::RandomUniform => Ok(TextureMap::random_uniform(resolution, rng)),
        InitMode::Gray => Ok(TextureMap::constant(resolution, 0.5)),
        InitMode::FromFile(path) => {
            let t = TextureMap::import(path)?;
            if t.resolution() != resolution {
                return Err(Error::Format(format!(
                    "{}: texture is {:?}, expected {resolution:?}",
                    path.display(),
                    t.resolution()
                )));
            }
            Ok(t)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Optimizer {
    fn slots(&self) -> usize {
        match self {
            Optimizer::Sgd => 0,
            Optimizer::Momentum { .. } => 1,
            Optimizer::Adam { .. } => 2,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Sgd => true,
            Optimizer::Momentum { beta } => (0.0..1.0).contains(&beta),
            Optimizer::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub attack: AttackConfig,
    pub sampling: SamplingPolicy,
    pub schedule: TransformSchedule,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Iterations between checkpoints; 0 writes only the final state.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub init: InitMode,
    pub texture_resolution: (usize, usize),
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig::default(),
            sampling: SamplingPolicy::default(),
            schedule: TransformSchedule::multi_scale((224, 224)),
            learning_rate: 0.1,
            max_epochs: 5,
            checkpoint_every: 50,
            seed: 0,
            optimizer: Optimizer::default(),
            init: InitMode::RandomUniform,
            texture_resolution: DEFAULT_RESOLUTION,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        self.sampling.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.texture_resolution.0 == 0 || self.texture_resolution.1 == 0 {
            return Err(Error::Config("texture_resolution must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub divergence: f64,
    pub smoothness: f64,
    pub total: f64,
    /// Batch-mean |Z_l| per layer.
    pub key_sizes: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub texture: TextureMap,
    /// Number of completed updates.
    pub iteration: u64,
    pub loss_history: Vec<LossRecord>,
    /// Optimizer moment buffers (none for plain descent).
    pub moments: Vec<Array3<f64>>,
    /// Position of the batch random stream.
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

impl RunState {
    pub fn new(texture: TextureMap, optimizer: &Optimizer, rng_seed: u64) -> Self {
        let (h, w) = texture.resolution();
        Self {
            texture,
            iteration: 0,
            loss_history: Vec::new(),
            moments: vec![Array3::zeros((h, w, 3)); optimizer.slots()],
            rng_seed,
            rng_word_pos: 0,
        }
    }

    pub fn key_feature_sizes(&self) -> Vec<(u64, BTreeMap<String, f64>)> {
        self.loss_history.iter().map(|r| (r.iteration, r.key_sizes.clone())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let (h, wd) = self.texture.resolution();
        w.write_all(STATE_MAGIC)?;
        w.write_u32::<LittleEndian>(STATE_FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(self.iteration)?;
        w.write_u64::<LittleEndian>(self.rng_seed)?;
        w.write_u128::<LittleEndian>(self.rng_word_pos)?;
        w.write_u32::<LittleEndian>(h as u32)?;
        w.write_u32::<LittleEndian>(wd as u32)?;
        for &v in self.texture.texels() {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_u32::<LittleEndian>(self.moments.len() as u32)?;
        for m in &self.moments {
            for &v in m {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.write_u64::<LittleEndian>(self.loss_history.len() as u64)?;
        for r in &self.loss_history {
            w.write_u64::<LittleEndian>(r.iteration)?;
            w.write_f64::<LittleEndian>(r.divergence)?;
            w.write_f64::<LittleEndian>(r.smoothness)?;
            w.write_f64::<LittleEndian>(r.total)?;
            w.write_u32::<LittleEndian>(r.key_sizes.len() as u32)?;
            for (name, &size) in &r.key_sizes {
                w.write_u32::<LittleEndian>(name.len() as u32)?;
                w.write_all(name.as_bytes())?;
                w.write_f64::<LittleEndian>(size)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let fmt = |e: std::io::Error| Error::Format(format!("{}: truncated state file ({e})", path.display()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != STATE_MAGIC {
            return Err(Error::Format(format!("{}: not a run state file", path.display())));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != STATE_FORMAT_VERSION {
            return Err(Error::Version {
                expected: STATE_FORMAT_VERSION,
                found: version,
            });
        }
        let iteration = r.read_u64::<LittleEndian>().map_err(fmt)?;
        let rng_seed = r.read_u64::<LittleEndian>().map_err(fmt)?;
        let rng_word_pos = r.read_u128::<LittleEndian>().map_err(fmt)?;
        let h = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        let w = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        if h == 0 || w == 0 || h * w > 1 << 26 {
            return Err(Error::Format(format!("implausible texture size {h}x{w}")));
        }
        let read_array = |r: &mut BufReader<File>| -> Result<Array3<f64>> {
            let mut v = vec![0.0; h * w * 3];
            r.read_f64_into::<LittleEndian>(&mut v).map_err(fmt)?;
            Ok(Array3::from_shape_vec((h, w, 3), v).expect("length matches"))
        };
        let texture = TextureMap::new(read_array(&mut r)?)?;
        let n_moments = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if n_moments > 2 {
            return Err(Error::Format(format!("{n_moments} optimizer buffers")));
        }
        let moments = (0..n_moments).map(|_| read_array(&mut r)).collect::<Result<Vec<_>>>()?;
        let n_hist = r.read_u64::<LittleEndian>().map_err(fmt)?;
        let mut loss_history = Vec::new();
        for _ in 0..n_hist {
            let iteration = r.read_u64::<LittleEndian>().map_err(fmt)?;
            let divergence = r.read_f64::<LittleEndian>().map_err(fmt)?;
            let smoothness = r.read_f64::<LittleEndian>().map_err(fmt)?;
            let total = r.read_f64::<LittleEndian>().map_err(fmt)?;
            let n_layers = r.read_u32::<LittleEndian>().map_err(fmt)?;
            let mut key_sizes = BTreeMap::new();
            for _ in 0..n_layers {
                let len = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
                if len > 1024 {
                    return Err(Error::Format("layer name too long".into()));
                }
                let mut buf = vec![0u8; len];
                r.read_exact(&mut buf).map_err(fmt)?;
                let name = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
                key_sizes.insert(name, r.read_f64::<LittleEndian>().map_err(fmt)?);
            }
            loss_history.push(LossRecord {
                iteration,
                divergence,
                smoothness,
                total,
                key_sizes,
            });
        }
        Ok(Self {
            texture,
            iteration,
            loss_history,
            moments,
            rng_seed,
            rng_word_pos,
        })
    }
}

/// Objective terms, key features and texel gradient of one (sample, transform) pair.
#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub terms: ObjectiveTerms,
    pub keys: KeyFeatureSet,
    pub grad: Array3<f64>,
}

/// Clean-branch features for one (sample, transform) pair.
pub fn clean_features(
    victim: &dyn Victim,
    sample: &SceneSample,
    benign: &TextureMap,
    params: &TransformParams,
) -> Result<FeatureStack> {
    let x = render(sample, benign)?;
    victim.extract_features(&apply_phi(&x, params)?)
}

/// Full forward/backward for one pair. `keys` overrides the key-feature
/// selection (used when the selection is not refreshed this iteration).
/// In texture-smoothness mode the smoothness term is left to the caller.
pub fn sample_gradient(
    victim: &dyn Victim,
    sample: &SceneSample,
    params: &TransformParams,
    clean: &FeatureStack,
    texture: &TextureMap,
    config: &AttackConfig,
    keys: Option<&KeyFeatureSet>,
) -> Result<SampleGradient> {
    let x_adv = render(sample, texture)?;
    let y_adv = apply_phi(&x_adv, params)?;
    let (adv, pullback) = victim.extract_features_traced(&y_adv)?;
    let keys = match keys {
        Some(k) => k.clone(),
        None => select_key_features(clean, &adv, config.delta)?,
    };
    let (divergence, feature_grads) = feature_divergence_grad(clean, &adv, &keys, &config.layer_weights)?;
    let grad_y = pullback.backward(&feature_grads)?;
    let mut grad_x = apply_phi_backward(&grad_y, sample.image_size(), params)?;

    let smoothness = match config.smooth_target {
        SmoothTarget::RenderedImage => {
            if config.lambda_smooth > 0.0 {
                grad_x.scaled_add(config.lambda_smooth, &smoothness_grad_masked(&x_adv, Some(&sample.mask)));
            }
            smoothness_loss_masked(&x_adv, Some(&sample.mask))
        }
        SmoothTarget::Texture => 0.0,
    };
    let (th, tw) = texture.resolution();
    let mut grad = Array3::zeros((th, tw, 3));
    render_backward(sample, &grad_x, &mut grad)?;
    Ok(SampleGradient {
        terms: ObjectiveTerms {
            divergence,
            smoothness,
            total: divergence + config.lambda_smooth * smoothness,
        },
        keys,
        grad,
    })
}

/// Batch-mean objective and gradient.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub terms: ObjectiveTerms,
    pub key_sizes: BTreeMap<String, f64>,
    pub keys: Vec<KeyFeatureSet>,
    pub grad: Array3<f64>,
}

/// Evaluates the batch-mean objective at `texture`. Per-sample work runs in
/// parallel; results are reduced in batch order so the sum is reproducible.
pub fn batch_gradient(
    victim: &dyn Victim,
    batch: &[(&SceneSample, &TransformParams, &FeatureStack, Option<&KeyFeatureSet>)],
    texture: &TextureMap,
    config: &AttackConfig,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch must be nonempty".into()));
    }
    let per_sample: Vec<Result<SampleGradient>> = batch
        .par_iter()
        .map(|(s, p, clean, keys)| sample_gradient(victim, s, p, clean, texture, config, *keys))
        .collect();
    let n = batch.len() as f64;
    let (th, tw) = texture.resolution();
    let mut grad = Array3::zeros((th, tw, 3));
    let mut divergence = 0.0;
    let mut smoothness = 0.0;
    let mut key_sizes: BTreeMap<String, f64> = BTreeMap::new();
    let mut keys = Vec::with_capacity(batch.len());
    for r in per_sample {
        let g = r?;
        grad.scaled_add(1.0 / n, &g.grad);
        divergence += g.terms.divergence / n;
        smoothness += g.terms.smoothness / n;
        for (layer, size) in g.keys.sizes() {
            *key_sizes.entry(layer).or_insert(0.0) += size as f64 / n;
        }
        keys.push(g.keys);
    }
    if config.smooth_target == SmoothTarget::Texture {
        let texels = texture.texels();
        smoothness = smoothness_loss_masked(texels, None);
        if config.lambda_smooth > 0.0 {
            grad.scaled_add(config.lambda_smooth, &smoothness_grad_masked(texels, None));
        }
    }
    Ok(BatchGradient {
        terms: ObjectiveTerms {
            divergence,
            smoothness,
            total: divergence + config.lambda_smooth * smoothness,
        },
        key_sizes,
        keys,
        grad,
    })
}

/// Applies one optimizer update in place and clamps the texture.
pub fn apply_optimizer(state: &mut RunState, grad: &Array3<f64>, optimizer: &Optimizer, learning_rate: f64) -> Result<()> {
    let step = match *optimizer {
        Optimizer::Sgd => grad.mapv(|g| learning_rate * g),
        Optimizer::Momentum { beta } => {
            let m = &mut state.moments[0];
            m.zip_mut_with(grad, |m, &g| *m = beta * *m + g);
            m.mapv(|v| learning_rate * v)
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let t = (state.iteration + 1) as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let (first, second) = state.moments.split_at_mut(1);
            let (m, v) = (&mut first[0], &mut second[0]);
            m.zip_mut_with(grad, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            v.zip_mut_with(grad, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let mut step = m.clone();
            step.zip_mut_with(v, |s, &v| *s = learning_rate * (*s / c1) / ((v / c2).sqrt() + eps));
            step
        }
    };
    state.texture.apply_update(&step)
}

type CacheKey = (usize, String);

/// Owns the run-wide context: victim, benign texture, clean-feature cache
/// and the key-feature cache used when `reselect_every > 1`.
pub struct Attack<'a> {
    pub victim: &'a dyn Victim,
    pub manifest: &'a DatasetManifest,
    pub benign: TextureMap,
    pub config: RunConfig,
    sampler: ViewSampler,
    clean_cache: HashMap<CacheKey, FeatureStack>,
    key_cache: HashMap<CacheKey, KeyFeatureSet>,
}

fn cache_key(index: usize, params: &TransformParams) -> CacheKey {
    (index, format!("{}:{:?}:{}", params.scale_label, params.output_size, params.crop_fraction))
}

impl<'a> Attack<'a> {
    pub fn new(victim: &'a dyn Victim, manifest: &'a DatasetManifest, benign: TextureMap, config: RunConfig) -> Result<Self> {
        config.validate()?;
        if manifest.is_empty() {
            return Err(Error::InvalidArgument("manifest is empty".into()));
        }
        victim.check_layers(&config.attack.active_layers())?;
        let sampler = ViewSampler::new(manifest, &config.sampling)?;
        Ok(Self {
            victim,
            manifest,
            benign,
            config,
            sampler,
            clean_cache: HashMap::new(),
            key_cache: HashMap::new(),
        })
    }

    pub fn total_iterations(&self) -> u64 {
        (self.config.max_epochs * batches_per_epoch(self.manifest.len(), self.config.sampling.batch_size)) as u64
    }

    pub fn initial_state(&self) -> Result<RunState> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7e87_0000);
        let texture = init_texture(self.config.texture_resolution, &self.config.init, &mut rng)?;
        Ok(RunState::new(texture, &self.config.optimizer, self.config.seed))
    }

    /// Draws the next batch of manifest indices and transforms, advancing the
    /// state's random stream.
    pub fn draw(&self, state: &mut RunState) -> Result<Vec<(usize, TransformParams)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(state.rng_seed);
        rng.set_word_pos(state.rng_word_pos);
        let batch = self
            .sampler
            .draw_batch(self.config.sampling.batch_size, &self.config.schedule, &mut rng)?;
        state.rng_word_pos = rng.get_word_pos();
        Ok(batch)
    }

    /// Loads the samples of a batch and fills the clean-feature cache.
    pub fn prepare(&mut self, batch: &[(usize, TransformParams)]) -> Result<Vec<SceneSample>> {
        let samples = batch
            .par_iter()
            .map(|(i, _)| self.manifest.load_sample(*i))
            .collect::<Result<Vec<_>>>()?;
        let missing: Vec<usize> = (0..batch.len())
            .filter(|&k| !self.clean_cache.contains_key(&cache_key(batch[k].0, &batch[k].1)))
            .collect();
        let fresh = missing
            .par_iter()
            .map(|&k| clean_features(self.victim, &samples[k], &self.benign, &batch[k].1))
            .collect::<Result<Vec<_>>>()?;
        for (k, stack) in missing.into_iter().zip(fresh) {
            self.clean_cache.insert(cache_key(batch[k].0, &batch[k].1), stack);
        }
        Ok(samples)
    }

    /// One optimization step on the given batch.
    pub fn step(&mut self, state: &mut RunState, batch: &[(usize, TransformParams)], samples: &[SceneSample]) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("batch must be nonempty".into()));
        }
        let reselect = self.config.attack.reselect_every;
        let keys: Vec<CacheKey> = batch.iter().map(|(i, p)| cache_key(*i, p)).collect();
        let items: Vec<_> = batch
            .iter()
            .zip(samples)
            .zip(&keys)
            .map(|(((_, p), s), k)| {
                let cached = self
                    .key_cache
                    .get(k)
                    .filter(|z| reselect > 1 && state.iteration - z.snapshot_iteration < reselect);
                (s, p, &self.clean_cache[k], cached)
            })
            .collect();
        let bg = batch_gradient(self.victim, &items, &state.texture, &self.config.attack)?;
        let was_cached: Vec<bool> = items.iter().map(|it| it.3.is_some()).collect();
        drop(items);
        if reselect > 1 {
            for ((k, mut z), cached) in keys.iter().cloned().zip(bg.keys.iter().cloned()).zip(was_cached) {
                if !cached {
                    z.snapshot_iteration = state.iteration;
                    self.key_cache.insert(k, z);
                }
            }
        }
        let record = LossRecord {
            iteration: state.iteration,
            divergence: bg.terms.divergence,
            smoothness: bg.terms.smoothness,
            total: bg.terms.total,
            key_sizes: bg.key_sizes.clone(),
        };
        if bg.key_sizes.values().all(|&s| s == 0.0) {
            warn!("iteration {}: every key-feature set is empty; no divergence signal", state.iteration);
        }
        let finite = record.total.is_finite() && bg.grad.iter().all(|g| g.is_finite());
        if !finite {
            return Err(Error::NonFiniteLoss {
                iteration: state.iteration,
                dump: None,
            });
        }
        apply_optimizer(state, &bg.grad, &self.config.optimizer, self.config.learning_rate)?;
        state.loss_history.push(record.clone());
        state.iteration += 1;
        Ok(record)
    }
}

/// Ablation rows in ladder order: single-layer losses, the multi-layer loss,
/// then pitch reweighting, then multi-scale crops. Everything else comes from
/// `base`. The first three rows use uniform pitch weights and one scale.
pub fn ablation_ladder(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let output_size = base
        .schedule
        .0
        .first()
        .map_or((224, 224), |e| e.output_size);
    let plain = |weights: &[(&str, f64)]| {
        let mut c = base.clone();
        c.attack.layer_weights = weights.iter().map(|&(l, a)| (l.to_string(), a)).collect();
        c.sampling.pitch_weights = SamplingPolicy::with_ratio([1.0, 1.0, 1.0]).pitch_weights;
        c.schedule = TransformSchedule::single_scale(output_size);
        c
    };
    let multi = plain(&[(ENCODER_LAYER, 0.4), (PROJECTOR_LAYER, 0.6)]);
    let mut sampled = multi.clone();
    sampled.sampling.pitch_weights = SamplingPolicy::with_ratio([3.0, 1.0, 1.0]).pitch_weights;
    let mut scaled = sampled.clone();
    scaled.schedule = TransformSchedule::multi_scale(output_size);
    vec![
        ("encoder-only".to_string(), plain(&[(ENCODER_LAYER, 1.0)])),
        ("projector-only".to_string(), plain(&[(PROJECTOR_LAYER, 1.0)])),
        ("multi-layer".to_string(), multi),
        ("multi-layer+sampling".to_string(), sampled),
        ("multi-layer+sampling+multi-scale".to_string(), scaled),
    ]
}

pub fn checkpoint_paths(out_dir: &Path, iteration: u64) -> (PathBuf, PathBuf) {
    let dir = out_dir.join("checkpoints");
    (
        dir.join(format!("ckpt_{iteration:06}.png")),
        dir.join(format!("ckpt_{iteration:06}.state")),
    )
}

/// Most recent checkpoint state file under `out_dir`, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let dir = out_dir.join("checkpoints");
    let mut states: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "state"))
        .collect();
    states.sort();
    states.pop()
}

fn write_checkpoint(out_dir: &Path, state: &RunState) -> Result<()> {
    let (png, st) = checkpoint_paths(out_dir, state.iteration);
    let dir = png.parent().expect("checkpoint dir");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    state.texture.export(&png)?;
    state.save(&st)
}

fn append_log(path: &Path, records: &[LossRecord], truncate: bool) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!truncate)
        .truncate(truncate)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a run log written by [`run`].
pub fn read_run_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// State file to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this many iterations in total (for smoke runs).
    pub max_iterations: Option<u64>,
}

/// Runs the optimization to completion. With an output directory, writes
/// checkpoints, the run log, the final texture and the final state.
pub fn run(
    config: &RunConfig,
    manifest: &DatasetManifest,
    victim: &dyn Victim,
    benign: &TextureMap,
    options: &RunOptions,
) -> Result<RunState> {
    let mut attack = Attack::new(victim, manifest, benign.clone(), config.clone())?;
    let mut state = match &options.resume {
        Some(path) => {
            let s = RunState::load(path)?;
            if s.texture.resolution() != config.texture_resolution || s.moments.len() != config.optimizer.slots() {
                return Err(Error::Config(format!(
                    "{} does not match the run configuration",
                    path.display()
                )));
            }
            info!("resuming from {} at iteration {}", path.display(), s.iteration);
            s
        }
        None => attack.initial_state()?,
    };
    let log_path = options.out_dir.as_ref().map(|d| d.join(RUN_LOG_FILE));
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        append_log(log_path.as_ref().unwrap(), &state.loss_history, true)?;
    }
    let total = options
        .max_iterations
        .map_or(attack.total_iterations(), |m| m.min(attack.total_iterations()));
    while state.iteration < total {
        let batch = attack.draw(&mut state)?;
        let samples = attack.prepare(&batch)?;
        let record = match attack.step(&mut state, &batch, &samples) {
            Ok(r) => r,
            Err(Error::NonFiniteLoss { iteration, .. }) => {
                let dump = options.out_dir.as_ref().map(|d| d.join("nonfinite_dump.state"));
                if let Some(p) = &dump {
                    state.save(p)?;
                }
                return Err(Error::NonFiniteLoss { iteration, dump });
            }
            Err(e) => return Err(e),
        };
        if let Some(p) = &log_path {
            append_log(p, std::slice::from_ref(&record), false)?;
        }
        if record.iteration % 10 == 0 {
            info!(
                "iter {} L_d {:.4} L_smooth {:.4} total {:.4}",
                record.iteration, record.divergence, record.smoothness, record.total
            );
        }
        if let Some(dir) = &options.out_dir {
            if config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0 {
                write_checkpoint(dir, &state)?;
            }
        }
    }
    if let Some(dir) = &options.out_dir {
        state.texture.export(&dir.join(FINAL_TEXTURE_FILE))?;
        state.save(&dir.join(FINAL_STATE_FILE))?;
    }
    Ok(state)
}
