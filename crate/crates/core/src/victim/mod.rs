//! Victim vision-language models.
//!
//! A victim exposes named intermediate feature layers (encoder before
//! projector) that are differentiable with respect to the input image, and a
//! text generator driven by those same features. The attack only ever talks
//! to victims through [`Victim`]; the in-repo [`SurrogateVictim`] is a small
//! network with that structure, and external models plug in through the
//! [`VictimRegistry`].

mod head;
mod stub;
mod surrogate;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::transforms::{rescale, rescale_backward};

pub use head::{CaptionHead, DEFAULT_ANSWERS};
pub use stub::StubVictim;
pub use surrogate::{SurrogateConfig, SurrogateVictim, SURROGATE_FORMAT_VERSION};

pub const ENCODER_LAYER: &str = "encoder";
pub const PROJECTOR_LAYER: &str = "projector";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimSpec {
    pub name: String,
    /// Layers exposed to the feature divergence loss, in network order.
    pub attack_layers: Vec<String>,
    /// (H, W) the victim consumes; other sizes are bilinearly resized.
    pub input_size: (usize, usize),
    /// Prompt template; `{image}` marks the scene-image slot.
    pub prompt_template: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayer {
    pub name: String,
    /// N_l rows (tokens / patches) by D_l channels.
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub victim: String,
    pub input_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<FeatureLayer>,
    pub provenance: Provenance,
}

impl FeatureStack {
    pub fn layer(&self, name: &str) -> Option<&Array2<f64>> {
        self.layers.iter().find(|l| l.name == name).map(|l| &l.values)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name.as_str())
    }
}

/// Gradients with respect to each feature layer, keyed by layer name.
/// Layers absent from the map contribute no gradient.
pub type FeatureGrads = BTreeMap<String, Array2<f64>>;

/// Reverse pass for one traced forward evaluation.
pub trait FeaturePullback: Send {
    /// Maps feature-layer gradients to a gradient on the input image passed
    /// to [`Victim::extract_features_traced`].
    fn backward(&self, grads: &FeatureGrads) -> Result<Image>;
}

pub trait Victim: Send + Sync {
    fn spec(&self) -> &VictimSpec;

    /// Every layer the victim can report, in network order.
    fn exposed_layers(&self) -> Vec<String>;

    /// Features at every attack layer, together with the reverse pass.
    fn extract_features_traced(&self, image: &Image) -> Result<(FeatureStack, Box<dyn FeaturePullback + '_>)>;

    fn extract_features(&self, image: &Image) -> Result<FeatureStack> {
        self.extract_features_traced(image).map(|(f, _)| f)
    }

    /// Greedy answer to `prompt` about `image`.
    fn generate(&self, image: &Image, prompt: &str) -> Result<String>;

    /// Checks that the configured attack layers exist.
    fn check_layers(&self, layers: &[String]) -> Result<()> {
        let exposed = self.exposed_layers();
        for l in layers {
            if !exposed.contains(l) {
                return Err(Error::LayerNotExposed(l.clone()));
            }
        }
        Ok(())
    }
}

/// Resizes to the victim's input size when needed. Returns the resized
/// image and, if a resize happened, the original size for the backward pass.
pub(crate) fn fit_input(image: &Image, input_size: (usize, usize)) -> Result<(Image, Option<(usize, usize)>)> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("victim input must have 3 channels, got {c}")));
    }
    if (h, w) == input_size {
        Ok((image.clone(), None))
    } else {
        Ok((rescale(image, input_size)?, Some((h, w))))
    }
}

pub(crate) fn unfit_grad(grad: Image, original: Option<(usize, usize)>) -> Image {
    match original {
        Some(size) => rescale_backward(&grad, size),
        None => grad,
    }
}

/// FNV-1a over the raw bits of the pixels; cheap and stable across runs.
pub fn image_digest(image: &Image) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in image.iter() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    let (r, c, k) = image.dim();
    format!("{h:016x}-{r}x{c}x{k}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: String,
    pub mean: f64,
    pub variance: f64,
}

/// Per-layer scalar mean and population variance over every feature entry
/// of every image in the set.
pub fn feature_stats(victim: &dyn Victim, images: &[Image]) -> Result<Vec<LayerStats>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("feature_stats needs at least one image".into()));
    }
    let mut sums: Vec<(String, f64, f64, usize)> = Vec::new();
    for img in images {
        let stack = victim.extract_features(img)?;
        if sums.is_empty() {
            sums = stack.layers.iter().map(|l| (l.name.clone(), 0.0, 0.0, 0)).collect();
        }
        for (acc, layer) in sums.iter_mut().zip(&stack.layers) {
            for &v in layer.values.iter() {
                acc.1 += v;
                acc.2 += v * v;
                acc.3 += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(layer, s, s2, n)| {
            let n = n.max(1) as f64;
            let mean = s / n;
            LayerStats {
                layer,
                mean,
                variance: (s2 / n - mean * mean).max(0.0),
            }
        })
        .collect())
}

type Factory = Box<dyn Fn(Option<&Path>) -> Result<Arc<dyn Victim>> + Send + Sync>;

/// Name -> constructor table for victims. `surrogate` is always present;
/// external adapters register themselves under their own names.
pub struct VictimRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for VictimRegistry {
    fn default() -> Self {
        let mut reg = Self {
            factories: BTreeMap::new(),
        };
        reg.register("surrogate", |weights| {
            let v = match weights {
                Some(p) => SurrogateVictim::load(p)?,
                None => SurrogateVictim::shipped(),
            };
            Ok(Arc::new(v) as Arc<dyn Victim>)
        });
        reg
    }
}

impl VictimRegistry {
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(Option<&Path>) -> Result<Arc<dyn Victim>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    pub fn load(&self, name: &str, weights: Option<&Path>) -> Result<Arc<dyn Victim>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::VictimUnavailable(format!("{name} (no adapter registered)")))?;
        factory(weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_stub_has_zero_stats() {
        let v = StubVictim::zeros((8, 8), 4);
        let img = Image::from_elem((8, 8, 3), 0.3);
        let stats = feature_stats(&v, &[img]).unwrap();
        for s in stats {
            assert_eq!(s.mean, 0.0);
            assert_eq!(s.variance, 0.0);
        }
    }

    #[test]
    fn identical_sets_give_identical_stats() {
        let v = StubVictim::seeded((8, 8), 4, 3);
        let imgs: Vec<Image> = (0..3)
            .map(|k| Image::from_shape_fn((8, 8, 3), |(r, c, ch)| ((r + c * k + ch) % 5) as f64 / 5.0))
            .collect();
        assert_eq!(feature_stats(&v, &imgs).unwrap(), feature_stats(&v, &imgs.clone()).unwrap());
    }

    #[test]
    fn empty_image_set_is_rejected() {
        let v = StubVictim::seeded((8, 8), 4, 3);
        assert!(feature_stats(&v, &[]).is_err());
    }

    #[test]
    fn registry_knows_surrogate_only() {
        let reg = VictimRegistry::default();
        assert_eq!(reg.names(), vec!["surrogate".to_string()]);
        assert!(matches!(reg.load("dolphins", None), Err(Error::VictimUnavailable(_))));
    }

    #[test]
    fn unknown_attack_layer_is_reported() {
        let v = StubVictim::seeded((8, 8), 4, 3);
        assert!(matches!(
            v.check_layers(&["decoder".to_string()]),
            Err(Error::LayerNotExposed(_))
        ));
        assert!(v.check_layers(&[ENCODER_LAYER.to_string()]).is_ok());
    }
}
