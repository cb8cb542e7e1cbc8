//! Attack objective: key-feature selection, feature divergence, smoothness.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::victim::{FeatureGrads, FeatureStack, ENCODER_LAYER, PROJECTOR_LAYER};

/// Which image the smoothness term is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SmoothTarget {
    /// The rendered adversarial image, restricted to car pixels.
    #[default]
    RenderedImage,
    /// The texture atlas itself.
    Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Rows with clean/adversarial cosine at or below this are key features.
    pub delta: f64,
    pub layer_weights: BTreeMap<String, f64>,
    pub lambda_smooth: f64,
    /// Iterations between key-feature refreshes.
    pub reselect_every: u64,
    pub smooth_target: SmoothTarget,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            delta: 0.8,
            layer_weights: BTreeMap::from([(ENCODER_LAYER.to_string(), 0.4), (PROJECTOR_LAYER.to_string(), 0.6)]),
            lambda_smooth: 1e-4,
            reselect_every: 1,
            smooth_target: SmoothTarget::RenderedImage,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta {} outside [-1, 1]", self.delta)));
        }
        if self.layer_weights.values().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config("layer weights must be finite and >= 0".into()));
        }
        if !self.layer_weights.values().any(|&a| a > 0.0) {
            return Err(Error::Config("at least one layer weight must be positive".into()));
        }
        if !(self.lambda_smooth >= 0.0) || !self.lambda_smooth.is_finite() {
            return Err(Error::Config(format!("lambda_smooth {} must be finite and >= 0", self.lambda_smooth)));
        }
        if self.reselect_every == 0 {
            return Err(Error::Config("reselect_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Layers that carry a positive weight, in name order.
    pub fn active_layers(&self) -> Vec<String> {
        self.layer_weights
            .iter()
            .filter(|(_, &a)| a > 0.0)
            .map(|(l, _)| l.clone())
            .collect()
    }
}

/// Cosine similarity; 0 when either vector is zero and exactly 1 for equal
/// nonzero vectors, so identical features never fall under a threshold below 1.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else if a == b {
        1.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Gradient of cos(a, b) with respect to b.
fn cosine_grad_b(a: ArrayView1<f64>, b: ArrayView1<f64>) -> ndarray::Array1<f64> {
    let na = a.dot(&a).sqrt();
    let nb2 = b.dot(&b);
    if na == 0.0 || nb2 == 0.0 {
        return ndarray::Array1::zeros(b.len());
    }
    let nb = nb2.sqrt();
    let c = a.dot(&b) / (na * nb);
    a.mapv(|v| v / (na * nb)) - b.mapv(|v| v * c / nb2)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KeyFeatureSet {
    pub layers: BTreeMap<String, Vec<usize>>,
    pub snapshot_iteration: u64,
}

impl KeyFeatureSet {
    pub fn get(&self, layer: &str) -> &[usize] {
        self.layers.get(layer).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn sizes(&self) -> BTreeMap<String, usize> {
        self.layers.iter().map(|(l, z)| (l.clone(), z.len())).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.values().all(Vec::is_empty)
    }
}

fn paired_layer<'a>(clean: &'a FeatureStack, adv: &'a FeatureStack, name: &str) -> Result<(&'a Array2<f64>, &'a Array2<f64>)> {
    let c = clean
        .layer(name)
        .ok_or_else(|| Error::ShapeMismatch(format!("clean stack lacks layer `{name}`")))?;
    let a = adv
        .layer(name)
        .ok_or_else(|| Error::ShapeMismatch(format!("adversarial stack lacks layer `{name}`")))?;
    if c.dim() != a.dim() {
        return Err(Error::ShapeMismatch(format!(
            "layer `{name}`: clean {:?} vs adversarial {:?}",
            c.dim(),
            a.dim()
        )));
    }
    Ok((c, a))
}

/// Row-wise cosine between clean and adversarial features of every layer.
pub fn row_cosines(clean: &FeatureStack, adv: &FeatureStack) -> Result<BTreeMap<String, Vec<f64>>> {
    let clean_names: Vec<&str> = clean.names().collect();
    let adv_names: Vec<&str> = adv.names().collect();
    if clean_names != adv_names {
        return Err(Error::ShapeMismatch(format!("layer names {clean_names:?} vs {adv_names:?}")));
    }
    clean
        .names()
        .map(|name| {
            let (c, a) = paired_layer(clean, adv, name)?;
            let cos = c.rows().into_iter().zip(a.rows()).map(|(x, y)| cosine(x, y)).collect();
            Ok((name.to_string(), cos))
        })
        .collect()
}

pub fn select_key_features(clean: &FeatureStack, adv: &FeatureStack, delta: f64) -> Result<KeyFeatureSet> {
    let layers = row_cosines(clean, adv)?
        .into_iter()
        .map(|(name, cos)| {
            let z = cos.iter().enumerate().filter(|(_, &c)| c <= delta).map(|(i, _)| i).collect();
            (name, z)
        })
        .collect();
    Ok(KeyFeatureSet {
        layers,
        snapshot_iteration: 0,
    })
}

fn check_keys(keys: &[usize], rows: usize, layer: &str) -> Result<()> {
    match keys.iter().find(|&&i| i >= rows) {
        Some(i) => Err(Error::ShapeMismatch(format!("key index {i} out of range for layer `{layer}` with {rows} rows"))),
        None => Ok(()),
    }
}

pub fn feature_divergence_loss(
    clean: &FeatureStack,
    adv: &FeatureStack,
    keys: &KeyFeatureSet,
    layer_weights: &BTreeMap<String, f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for (name, &alpha) in layer_weights {
        let z = keys.get(name);
        if alpha == 0.0 || z.is_empty() {
            continue;
        }
        let (c, a) = paired_layer(clean, adv, name)?;
        check_keys(z, c.nrows(), name)?;
        let sum: f64 = z.iter().map(|&i| cosine(c.row(i), a.row(i))).sum();
        total += alpha * sum / z.len() as f64;
    }
    Ok(total)
}

/// L_d and its gradient with respect to the adversarial features.
pub fn feature_divergence_grad(
    clean: &FeatureStack,
    adv: &FeatureStack,
    keys: &KeyFeatureSet,
    layer_weights: &BTreeMap<String, f64>,
) -> Result<(f64, FeatureGrads)> {
    let mut total = 0.0;
    let mut grads = FeatureGrads::new();
    for (name, &alpha) in layer_weights {
        let z = keys.get(name);
        if alpha == 0.0 || z.is_empty() {
            continue;
        }
        let (c, a) = paired_layer(clean, adv, name)?;
        check_keys(z, c.nrows(), name)?;
        let scale = alpha / z.len() as f64;
        let mut g = Array2::zeros(a.dim());
        for &i in z {
            total += scale * cosine(c.row(i), a.row(i));
            let gi = cosine_grad_b(c.row(i), a.row(i));
            g.row_mut(i).scaled_add(scale, &gi);
        }
        grads.insert(name.clone(), g);
    }
    Ok((total, grads))
}

fn pair_included(mask: Option<&Array2<bool>>, a: (usize, usize), b: (usize, usize)) -> bool {
    mask.map_or(true, |m| m[a] && m[b])
}

/// Sum of squared differences between vertically and horizontally adjacent
/// pixels, over channels. With a mask, only pairs whose two pixels are both
/// inside the mask count.
pub fn smoothness_loss_masked(image: &Image, mask: Option<&Array2<bool>>) -> f64 {
    let (h, w, ch) = image.dim();
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            for (dr, dc) in [(1, 0), (0, 1)] {
                let (r2, c2) = (r + dr, c + dc);
                if r2 >= h || c2 >= w || !pair_included(mask, (r, c), (r2, c2)) {
                    continue;
                }
                for k in 0..ch {
                    let d = image[[r, c, k]] - image[[r2, c2, k]];
                    total += d * d;
                }
            }
        }
    }
    total
}

pub fn smoothness_loss(image: &Image) -> f64 {
    smoothness_loss_masked(image, None)
}

pub fn smoothness_grad_masked(image: &Image, mask: Option<&Array2<bool>>) -> Image {
    let (h, w, ch) = image.dim();
    let mut g = Image::zeros(image.dim());
    for r in 0..h {
        for c in 0..w {
            for (dr, dc) in [(1, 0), (0, 1)] {
                let (r2, c2) = (r + dr, c + dc);
                if r2 >= h || c2 >= w || !pair_included(mask, (r, c), (r2, c2)) {
                    continue;
                }
                for k in 0..ch {
                    let d = 2.0 * (image[[r, c, k]] - image[[r2, c2, k]]);
                    g[[r, c, k]] += d;
                    g[[r2, c2, k]] -= d;
                }
            }
        }
    }
    g
}

pub fn smoothness_grad(image: &Image) -> Image {
    smoothness_grad_masked(image, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub divergence: f64,
    pub smoothness: f64,
    pub total: f64,
}

/// L_d + lambda_s * L_smooth, with the smoothness term taken on `smooth_image`
/// (restricted to `mask` when given).
pub fn total_objective(
    clean: &FeatureStack,
    adv: &FeatureStack,
    keys: &KeyFeatureSet,
    smooth_image: &Image,
    mask: Option<&Array2<bool>>,
    config: &AttackConfig,
) -> Result<ObjectiveTerms> {
    let divergence = feature_divergence_loss(clean, adv, keys, &config.layer_weights)?;
    let smoothness = smoothness_loss_masked(smooth_image, mask);
    Ok(ObjectiveTerms {
        divergence,
        smoothness,
        total: divergence + config.lambda_smooth * smoothness,
    })
}
