//! Desk-scale surrogate victim.
//!
//! Architecture (default sizes):
//!
//! ```text
//! image 224x224x3
//!   -> 16x16 patches (196 x 768) -> linear patch embedding + position (196 x 64)
//!   -> 4 residual blocks  h += W2 tanh(W1 LN(h))              (196 x 64)
//!   -> final LN                                   = "encoder" (196 x 64)
//!   -> spatial pooling (32 x 196) -> linear       = "projector" (32 x 128)
//!   -> nearest-prototype answer head
//! ```
//!
//! The projector pools the 14x14 patch grid with 32 fixed Gaussian windows
//! laid out on a 4x8 grid, so each projector row summarizes one image region.
//! Patch-embedding filters are drawn from low-order cosine bases, which makes
//! the encoder respond to shapes and colours rather than pixel noise.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::head::{CaptionHead, DEFAULT_ANSWERS};
use super::{
    fit_input, image_digest, unfit_grad, FeatureGrads, FeatureLayer, FeaturePullback, FeatureStack, Provenance,
    Victim, VictimSpec, ENCODER_LAYER, PROJECTOR_LAYER,
};
use crate::camera::{CameraPose, YawLabel};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::mesh::Mesh;
use crate::render::render;
use crate::scene::{benign_texture, make_sample};

pub const SURROGATE_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CAMOSURR";
const LN_EPS: f64 = 1e-5;
/// Seed of the weights shipped with the crate.
pub const SHIPPED_SEED: u64 = 20_240_917;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SurrogateConfig {
    pub input_size: (usize, usize),
    pub patch: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub pool_grid: (usize, usize),
    pub proj_dim: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            input_size: (224, 224),
            patch: 16,
            embed_dim: 64,
            hidden_dim: 128,
            blocks: 4,
            pool_grid: (4, 8),
            proj_dim: 128,
        }
    }
}

impl SurrogateConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.input_size.0 / self.patch, self.input_size.1 / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn proj_tokens(&self) -> usize {
        self.pool_grid.0 * self.pool_grid.1
    }

    fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input {h}x{w} does not tile into {} px patches", self.patch)));
        }
        if [self.embed_dim, self.hidden_dim, self.blocks, self.proj_dim, self.pool_grid.0, self.pool_grid.1]
            .contains(&0)
        {
            return Err(Error::Config("surrogate dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln_gain: Array1<f64>,
    ln_bias: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateVictim {
    config: SurrogateConfig,
    spec: VictimSpec,
    patch_w: Array2<f64>,
    patch_b: Array1<f64>,
    pos: Array2<f64>,
    blocks: Vec<Block>,
    final_gain: Array1<f64>,
    final_bias: Array1<f64>,
    pool: Array2<f64>,
    proj_w: Array2<f64>,
    proj_b: Array1<f64>,
    head: CaptionHead,
}

/// Rows are patches in raster order; columns run over (dy, dx, channel).
pub(crate) fn patchify(image: &Image, patch: usize) -> Array2<f64> {
    let (h, w, c) = image.dim();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((gh * gw, patch * patch * c));
    for gr in 0..gh {
        for gc in 0..gw {
            let row = gr * gw + gc;
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..c {
                        out[[row, k]] = image[[gr * patch + dy, gc * patch + dx, ch]];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn unpatchify(patches: &Array2<f64>, size: (usize, usize), patch: usize) -> Image {
    let (h, w) = size;
    let c = patches.ncols() / (patch * patch);
    let gw = w / patch;
    let mut out = Image::zeros((h, w, c));
    for (row, values) in patches.rows().into_iter().enumerate() {
        let (gr, gc) = (row / gw, row % gw);
        let mut k = 0;
        for dy in 0..patch {
            for dx in 0..patch {
                for ch in 0..c {
                    out[[gr * patch + dy, gc * patch + dx, ch]] = values[k];
                    k += 1;
                }
            }
        }
    }
    out
}

/// Row-wise layer norm. Returns (output, normalized input, 1/sigma per row).
fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let inv = *s;
        row.mapv_inplace(|v| v * inv);
    }
    let out = &xhat * gain + bias;
    (out, xhat, inv_std)
}

fn layer_norm_backward(g_out: &Array2<f64>, xhat: &Array2<f64>, inv_std: &Array1<f64>, gain: &Array1<f64>) -> Array2<f64> {
    let d = xhat.ncols() as f64;
    let g_hat = g_out * gain;
    let mut g_in = Array2::zeros(xhat.dim());
    for (((mut gi, gh), xh), &s) in g_in
        .rows_mut()
        .into_iter()
        .zip(g_hat.rows())
        .zip(xhat.rows())
        .zip(inv_std.iter())
    {
        let mean_g = gh.sum() / d;
        let mean_gx = gh.dot(&xh) / d;
        for ((o, &g), &x) in gi.iter_mut().zip(gh.iter()).zip(xh.iter()) {
            *o = s * (g - mean_g - x * mean_gx);
        }
    }
    g_in
}

struct BlockTrace {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    act: Array2<f64>,
}

struct SurrogateTrace<'a> {
    victim: &'a SurrogateVictim,
    blocks: Vec<BlockTrace>,
    final_xhat: Array2<f64>,
    final_inv_std: Array1<f64>,
    original: Option<(usize, usize)>,
}

impl FeaturePullback for SurrogateTrace<'_> {
    fn backward(&self, grads: &FeatureGrads) -> Result<Image> {
        let v = self.victim;
        let cfg = &v.config;
        let mut g_enc = Array2::<f64>::zeros((cfg.tokens(), cfg.embed_dim));
        if let Some(g) = grads.get(ENCODER_LAYER) {
            check_grad(g, g_enc.dim(), ENCODER_LAYER)?;
            g_enc += g;
        }
        if let Some(g) = grads.get(PROJECTOR_LAYER) {
            check_grad(g, (cfg.proj_tokens(), cfg.proj_dim), PROJECTOR_LAYER)?;
            g_enc += &v.pool.t().dot(&g.dot(&v.proj_w.t()));
        }
        let mut g_h = layer_norm_backward(&g_enc, &self.final_xhat, &self.final_inv_std, &v.final_gain);
        for (block, trace) in v.blocks.iter().zip(&self.blocks).rev() {
            let g_act = g_h.dot(&block.w2.t());
            let g_pre = &g_act * &trace.act.mapv(|t| 1.0 - t * t);
            let g_norm = g_pre.dot(&block.w1.t());
            g_h += &layer_norm_backward(&g_norm, &trace.xhat, &trace.inv_std, &block.ln_gain);
        }
        let g_patches = g_h.dot(&v.patch_w.t());
        let g_img = unpatchify(&g_patches, cfg.input_size, cfg.patch);
        Ok(unfit_grad(g_img, self.original))
    }
}

fn check_grad(g: &Array2<f64>, expected: (usize, usize), name: &str) -> Result<()> {
    if g.dim() != expected {
        return Err(Error::ShapeMismatch(format!(
            "gradient for `{name}` is {:?}, expected {expected:?}",
            g.dim()
        )));
    }
    Ok(())
}

impl SurrogateVictim {
    /// The surrogate shipped with the crate: default sizes, fixed seed.
    ///
    /// The answer head is standardized on clean renders of the toy car over
    /// procedural streets, so that answers spread over the label set.
    pub fn shipped() -> Self {
        static SHIPPED: OnceLock<SurrogateVictim> = OnceLock::new();
        SHIPPED
            .get_or_init(|| {
                let mut v = Self::seeded(SurrogateConfig::default(), SHIPPED_SEED).expect("default surrogate config is valid");
                let (images, labels) = calibration_scenes(v.config.input_size).expect("calibration scenes render");
                v.calibrate(&images, Some(&labels)).expect("calibration succeeds");
                v
            })
            .clone()
    }

    /// Standardizes the answer head on the pooled projector features of
    /// `images` and, given labels, moves the prototypes to the class means.
    pub fn calibrate(&mut self, images: &[Image], labels: Option<&[usize]>) -> Result<()> {
        let projectors = images
            .iter()
            .map(|img| {
                let (_, proj, _) = self.forward(img)?;
                Ok(proj)
            })
            .collect::<Result<Vec<_>>>()?;
        self.head.calibrate(&projectors)?;
        match labels {
            Some(l) => self.head.fit_prototypes(&projectors, l),
            None => Ok(()),
        }
    }

    pub fn seeded(config: SurrogateConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = config.patch;
        let e = config.embed_dim;
        let hd = config.hidden_dim;

        // Patch filters: random mixtures of the 4x4 lowest 2-D cosine modes,
        // one mixture per (output channel, colour channel).
        let modes = 4;
        let mut patch_w = Array2::<f64>::zeros((config.patch_dim(), e));
        for out in 0..e {
            for ch in 0..3 {
                let coefs: Vec<f64> = (0..modes * modes)
                    .map(|m| {
                        let (u, v) = (m / modes, m % modes);
                        rng.gen_range(-1.0..1.0) / (1.0 + (u + v) as f64)
                    })
                    .collect();
                for dy in 0..p {
                    for dx in 0..p {
                        let mut acc = 0.0;
                        for (m, c) in coefs.iter().enumerate() {
                            let (u, v) = ((m / modes) as f64, (m % modes) as f64);
                            acc += c
                                * (PI * (dy as f64 + 0.5) * u / p as f64).cos()
                                * (PI * (dx as f64 + 0.5) * v / p as f64).cos();
                        }
                        patch_w[[(dy * p + dx) * 3 + ch, out]] = acc * 4.0 / (p * p) as f64;
                    }
                }
            }
        }
        let patch_b = Array1::from_shape_simple_fn(e, || rng.gen_range(-0.1..0.1));
        let pos = Array2::from_shape_simple_fn((config.tokens(), e), || rng.gen_range(-0.05..0.05));

        let blocks = (0..config.blocks)
            .map(|_| Block {
                ln_gain: Array1::ones(e),
                ln_bias: Array1::zeros(e),
                w1: Array2::from_shape_simple_fn((e, hd), || rng.gen_range(-1.0..1.0) * (3.0 / e as f64).sqrt()),
                b1: Array1::from_shape_simple_fn(hd, || rng.gen_range(-0.1..0.1)),
                w2: Array2::from_shape_simple_fn((hd, e), || rng.gen_range(-1.0..1.0) * (1.5 / hd as f64).sqrt()),
                b2: Array1::zeros(e),
            })
            .collect();

        let pool = gaussian_pool(config.grid(), config.pool_grid);
        let proj_w = Array2::from_shape_simple_fn((e, config.proj_dim), || {
            rng.gen_range(-1.0..1.0) * (3.0 / e as f64).sqrt()
        });
        let proj_b = Array1::zeros(config.proj_dim);

        let prototypes = Array2::from_shape_simple_fn((DEFAULT_ANSWERS.len(), config.proj_dim), || {
            rng.gen_range(-1.0..1.0)
        });
        let mut head = CaptionHead::new(
            DEFAULT_ANSWERS.iter().map(|s| s.to_string()).collect(),
            prototypes,
            0.05,
            seed,
            config.proj_tokens(),
        );
        head.row_weights = center_weights(config.pool_grid);

        Ok(Self {
            config,
            spec: spec_for(&config),
            patch_w,
            patch_b,
            pos,
            blocks,
            final_gain: Array1::ones(e),
            final_bias: Array1::zeros(e),
            pool,
            proj_w,
            proj_b,
            head,
        })
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.config
    }

    pub fn head(&self) -> &CaptionHead {
        &self.head
    }

    /// Replaces the answer prototypes (used to calibrate the head).
    pub fn set_prototypes(&mut self, prototypes: Array2<f64>) -> Result<()> {
        if prototypes.dim() != self.head.prototypes.dim() {
            return Err(Error::ShapeMismatch(format!(
                "prototypes {:?} vs {:?}",
                prototypes.dim(),
                self.head.prototypes.dim()
            )));
        }
        self.head.prototypes = prototypes;
        Ok(())
    }

    /// The answer the head gives for already-extracted projector features.
    pub fn answer_from_features(&self, stack: &FeatureStack, prompt: &str) -> Result<String> {
        let proj = stack
            .layer(PROJECTOR_LAYER)
            .ok_or_else(|| Error::LayerNotExposed(PROJECTOR_LAYER.into()))?;
        self.head.answer(proj.view(), prompt)
    }

    fn forward(&self, image: &Image) -> Result<(Array2<f64>, Array2<f64>, SurrogateTrace<'_>)> {
        let (input, original) = fit_input(image, self.config.input_size)?;
        let patches = patchify(&input.mapv(|v| v - 0.5), self.config.patch);
        let mut h = patches.dot(&self.patch_w) + &self.patch_b + &self.pos;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (normed, xhat, inv_std) = layer_norm(&h, &block.ln_gain, &block.ln_bias);
            let act = (normed.dot(&block.w1) + &block.b1).mapv(f64::tanh);
            h = h + act.dot(&block.w2) + &block.b2;
            traces.push(BlockTrace { xhat, inv_std, act });
        }
        let (enc, final_xhat, final_inv_std) = layer_norm(&h, &self.final_gain, &self.final_bias);
        let proj = self.pool.dot(&enc).dot(&self.proj_w) + &self.proj_b;
        Ok((
            enc,
            proj,
            SurrogateTrace {
                victim: self,
                blocks: traces,
                final_xhat,
                final_inv_std,
                original,
            },
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(SURROGATE_FORMAT_VERSION)?;
        for v in [
            c.input_size.0,
            c.input_size.1,
            c.patch,
            c.embed_dim,
            c.hidden_dim,
            c.blocks,
            c.pool_grid.0,
            c.pool_grid.1,
            c.proj_dim,
            self.head.answers.len(),
        ] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        for a in &self.head.answers {
            w.write_u32::<LittleEndian>(a.len() as u32)?;
            w.write_all(a.as_bytes())?;
        }
        w.write_f64::<LittleEndian>(self.head.prompt_weight)?;
        w.write_u64::<LittleEndian>(self.head.prompt_seed)?;
        let mut put = |values: &mut dyn Iterator<Item = &f64>| -> std::io::Result<()> {
            for &v in values {
                w.write_f64::<LittleEndian>(v)?;
            }
            Ok(())
        };
        put(&mut self.patch_w.iter())?;
        put(&mut self.patch_b.iter())?;
        put(&mut self.pos.iter())?;
        for b in &self.blocks {
            put(&mut b.ln_gain.iter())?;
            put(&mut b.ln_bias.iter())?;
            put(&mut b.w1.iter())?;
            put(&mut b.b1.iter())?;
            put(&mut b.w2.iter())?;
            put(&mut b.b2.iter())?;
        }
        put(&mut self.final_gain.iter())?;
        put(&mut self.final_bias.iter())?;
        put(&mut self.pool.iter())?;
        put(&mut self.proj_w.iter())?;
        put(&mut self.proj_b.iter())?;
        put(&mut self.head.prototypes.iter())?;
        put(&mut self.head.row_weights.iter())?;
        put(&mut self.head.center.iter())?;
        put(&mut self.head.scale.iter())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let fmt = |e: std::io::Error| Error::Format(format!("{}: truncated surrogate checkpoint ({e})", path.display()));

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{}: not a surrogate checkpoint", path.display())));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != SURROGATE_FORMAT_VERSION {
            return Err(Error::Version {
                expected: SURROGATE_FORMAT_VERSION,
                found: version,
            });
        }
        let mut dims = [0usize; 10];
        for d in dims.iter_mut() {
            *d = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        }
        let config = SurrogateConfig {
            input_size: (dims[0], dims[1]),
            patch: dims[2],
            embed_dim: dims[3],
            hidden_dim: dims[4],
            blocks: dims[5],
            pool_grid: (dims[6], dims[7]),
            proj_dim: dims[8],
        };
        config.validate()?;
        let n_answers = dims[9];
        if n_answers == 0 || n_answers > 1024 {
            return Err(Error::Format(format!("implausible answer count {n_answers}")));
        }
        let mut answers = Vec::with_capacity(n_answers);
        for _ in 0..n_answers {
            let len = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
            if len > 4096 {
                return Err(Error::Format("answer text too long".into()));
            }
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(fmt)?;
            answers.push(String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?);
        }
        let prompt_weight = r.read_f64::<LittleEndian>().map_err(fmt)?;
        let prompt_seed = r.read_u64::<LittleEndian>().map_err(fmt)?;

        let mut take2 = |shape: (usize, usize)| -> Result<Array2<f64>> {
            let mut v = vec![0.0; shape.0 * shape.1];
            r.read_f64_into::<LittleEndian>(&mut v).map_err(fmt)?;
            Ok(Array2::from_shape_vec(shape, v).expect("length matches shape"))
        };
        let e = config.embed_dim;
        let hd = config.hidden_dim;
        let patch_w = take2((config.patch_dim(), e))?;
        let patch_b = take2((1, e))?.remove_axis(Axis(0));
        let pos = take2((config.tokens(), e))?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            blocks.push(Block {
                ln_gain: take2((1, e))?.remove_axis(Axis(0)),
                ln_bias: take2((1, e))?.remove_axis(Axis(0)),
                w1: take2((e, hd))?,
                b1: take2((1, hd))?.remove_axis(Axis(0)),
                w2: take2((hd, e))?,
                b2: take2((1, e))?.remove_axis(Axis(0)),
            });
        }
        let final_gain = take2((1, e))?.remove_axis(Axis(0));
        let final_bias = take2((1, e))?.remove_axis(Axis(0));
        let pool = take2((config.proj_tokens(), config.tokens()))?;
        let proj_w = take2((e, config.proj_dim))?;
        let proj_b = take2((1, config.proj_dim))?.remove_axis(Axis(0));
        let prototypes = take2((n_answers, config.proj_dim))?;
        let row_weights = take2((1, config.proj_tokens()))?.remove_axis(Axis(0));
        let center = take2((1, config.proj_dim))?.remove_axis(Axis(0));
        let scale = take2((1, config.proj_dim))?.remove_axis(Axis(0));

        Ok(Self {
            config,
            spec: spec_for(&config),
            patch_w,
            patch_b,
            pos,
            blocks,
            final_gain,
            final_bias,
            pool,
            proj_w,
            proj_b,
            head: CaptionHead {
                answers,
                prototypes,
                prompt_weight,
                prompt_seed,
                row_weights,
                center,
                scale,
            },
        })
    }
}

/// Benign-paint renders of the toy car on every pose of the default grid,
/// each over its own street, labeled by heading: the head learns to read
/// the other vehicle's orientation as the driving cue.
fn calibration_scenes(size: (usize, usize)) -> Result<(Vec<Image>, Vec<usize>)> {
    let mesh = Mesh::toy_car();
    let benign = benign_texture((128, 128));
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for d in [5.0, 10.0] {
        for p in [22.5, 45.0, 67.5] {
            for y in YawLabel::ALL {
                let pose = CameraPose::new(d, p, y)?;
                let sample = make_sample(&mesh, &pose, 0, size, 0xca1b_0000 + images.len() as u64)?;
                images.push(render(&sample, &benign)?);
                labels.push(y.index() % DEFAULT_ANSWERS.len());
            }
        }
    }
    Ok((images, labels))
}

fn spec_for(config: &SurrogateConfig) -> VictimSpec {
    VictimSpec {
        name: "surrogate".into(),
        attack_layers: vec![ENCODER_LAYER.into(), PROJECTOR_LAYER.into()],
        input_size: config.input_size,
        prompt_template: "<image>{image}</image> {prompt}".into(),
    }
}

/// Pooling weights over the projector windows that favour the image centre,
/// where the vehicle in front sits.
fn center_weights(windows: (usize, usize)) -> Array1<f64> {
    let (wh, ww) = windows;
    let mut w = Array1::from_shape_fn(wh * ww, |k| {
        let cy = ((k / ww) as f64 + 0.5) / wh as f64 - 0.5;
        let cx = ((k % ww) as f64 + 0.5) / ww as f64 - 0.5;
        (-(cx * cx + cy * cy) / (2.0 * 0.25 * 0.25)).exp()
    });
    let s = w.sum();
    w.mapv_inplace(|v| v / s);
    w
}

/// Row-normalized Gaussian windows over the patch grid, one per cell of a
/// `windows.0 x windows.1` layout.
fn gaussian_pool(grid: (usize, usize), windows: (usize, usize)) -> Array2<f64> {
    let (gh, gw) = grid;
    let (wh, ww) = windows;
    let sy = gh as f64 / wh as f64 / 2.0;
    let sx = gw as f64 / ww as f64 / 2.0;
    let mut pool = Array2::zeros((wh * ww, gh * gw));
    for k in 0..wh * ww {
        let cy = ((k / ww) as f64 + 0.5) * gh as f64 / wh as f64 - 0.5;
        let cx = ((k % ww) as f64 + 0.5) * gw as f64 / ww as f64 - 0.5;
        let mut row = pool.row_mut(k);
        for t in 0..gh * gw {
            let (ty, tx) = ((t / gw) as f64, (t % gw) as f64);
            let d = ((ty - cy) / sy).powi(2) + ((tx - cx) / sx).powi(2);
            row[t] = (-0.5 * d).exp();
        }
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    pool
}

impl Victim for SurrogateVictim {
    fn spec(&self) -> &VictimSpec {
        &self.spec
    }

    fn exposed_layers(&self) -> Vec<String> {
        vec![ENCODER_LAYER.into(), PROJECTOR_LAYER.into()]
    }

    fn extract_features_traced(&self, image: &Image) -> Result<(FeatureStack, Box<dyn FeaturePullback + '_>)> {
        let (enc, proj, trace) = self.forward(image)?;
        let stack = FeatureStack {
            layers: vec![
                FeatureLayer {
                    name: ENCODER_LAYER.into(),
                    values: enc,
                },
                FeatureLayer {
                    name: PROJECTOR_LAYER.into(),
                    values: proj,
                },
            ],
            provenance: Provenance {
                victim: self.spec.name.clone(),
                input_digest: image_digest(image),
            },
        };
        Ok((stack, Box::new(trace)))
    }

    fn generate(&self, image: &Image, prompt: &str) -> Result<String> {
        if prompt.trim().is_empty() {
            return Err(Error::InvalidArgument("prompt must be nonempty".into()));
        }
        let stack = self.extract_features(image)?;
        self.answer_from_features(&stack, prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SurrogateVictim {
        let cfg = SurrogateConfig {
            input_size: (16, 24),
            patch: 4,
            embed_dim: 6,
            hidden_dim: 5,
            blocks: 2,
            pool_grid: (2, 3),
            proj_dim: 7,
        };
        SurrogateVictim::seeded(cfg, 11).unwrap()
    }

    fn test_image(h: usize, w: usize) -> Image {
        Image::from_shape_fn((h, w, 3), |(r, c, k)| {
            (0.5 + 0.4 * ((r as f64 * 0.7 + c as f64 * 1.3 + k as f64).sin())).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn patchify_round_trips() {
        let img = test_image(8, 12);
        assert_eq!(unpatchify(&patchify(&img, 4), (8, 12), 4), img);
    }

    #[test]
    fn shipped_shapes() {
        let v = SurrogateVictim::shipped();
        let img = test_image(224, 224);
        let f = v.extract_features(&img).unwrap();
        assert_eq!(f.layer(ENCODER_LAYER).unwrap().dim(), (196, 64));
        assert_eq!(f.layer(PROJECTOR_LAYER).unwrap().dim(), (32, 128));
    }

    #[test]
    fn pool_rows_are_normalized() {
        let p = gaussian_pool((14, 14), (4, 8));
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let v = small();
        let img = test_image(16, 24);
        let (stack, pullback) = v.extract_features_traced(&img).unwrap();
        // loss = <G_e, enc> + <G_p, proj> with fixed random G
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut grads = FeatureGrads::new();
        for l in &stack.layers {
            grads.insert(
                l.name.clone(),
                Array2::from_shape_simple_fn(l.values.dim(), || rng.gen_range(-1.0..1.0)),
            );
        }
        let loss = |im: &Image| -> f64 {
            let s = v.extract_features(im).unwrap();
            s.layers.iter().map(|l| (&l.values * &grads[&l.name]).sum()).sum()
        };
        let analytic = pullback.backward(&grads).unwrap();
        let h = 1e-6;
        for &(r, c, k) in &[(0, 0, 0), (3, 5, 1), (7, 9, 2), (15, 23, 0), (10, 2, 1), (8, 17, 2)] {
            let mut p = img.clone();
            p[[r, c, k]] += h;
            let mut m = img.clone();
            m[[r, c, k]] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let a = analytic[[r, c, k]];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-5, "pixel ({r},{c},{k}): fd {fd} vs analytic {a}");
        }
    }

    #[test]
    fn resized_inputs_pull_back_to_original_size() {
        let v = small();
        let img = test_image(20, 30);
        let (stack, pullback) = v.extract_features_traced(&img).unwrap();
        let mut grads = FeatureGrads::new();
        grads.insert(PROJECTOR_LAYER.into(), Array2::ones(stack.layer(PROJECTOR_LAYER).unwrap().dim()));
        assert_eq!(pullback.backward(&grads).unwrap().dim(), (20, 30, 3));
    }

    #[test]
    fn checkpoint_round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let v = small();
        let path = dir.path().join("s.bin");
        v.save(&path).unwrap();
        assert_eq!(SurrogateVictim::load(&path).unwrap(), v);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&(SURROGATE_FORMAT_VERSION + 1).to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(SurrogateVictim::load(&path), Err(Error::Version { .. })));

        std::fs::write(&path, &bytes[..40]).unwrap();
        assert!(SurrogateVictim::load(&path).is_err());
    }

    #[test]
    fn generate_goes_through_projector_features() {
        let v = small();
        let img = test_image(16, 24);
        let prompt = "What should the ego vehicle do next?";
        let via_features = v.answer_from_features(&v.extract_features(&img).unwrap(), prompt).unwrap();
        assert_eq!(v.generate(&img, prompt).unwrap(), via_features);
        assert!(DEFAULT_ANSWERS.contains(&via_features.as_str()));
        assert!(v.generate(&img, "  ").is_err());
    }
}
