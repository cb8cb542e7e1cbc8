use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::head::{CaptionHead, DEFAULT_ANSWERS};
use super::surrogate::{patchify, unpatchify};
use super::{
    fit_input, image_digest, unfit_grad, FeatureGrads, FeatureLayer, FeaturePullback, FeatureStack, Provenance,
    Victim, VictimSpec, ENCODER_LAYER, PROJECTOR_LAYER,
};
use crate::error::{Error, Result};
use crate::imageio::Image;

/// Two-layer toy victim for tests and diagnostics:
/// encoder = tanh(patches * A), projector = encoder * B.
#[derive(Debug, Clone)]
pub struct StubVictim {
    spec: VictimSpec,
    patch: usize,
    a: Array2<f64>,
    b: Array2<f64>,
    head: CaptionHead,
}

const ENC_DIM: usize = 6;
const PROJ_DIM: usize = 5;

impl StubVictim {
    pub fn seeded(input_size: (usize, usize), patch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pd = patch * patch * 3;
        let a = Array2::from_shape_simple_fn((pd, ENC_DIM), || rng.gen_range(-1.0..1.0) / (pd as f64).sqrt());
        let b = Array2::from_shape_simple_fn((ENC_DIM, PROJ_DIM), || rng.gen_range(-1.0..1.0));
        Self::with_weights(input_size, patch, a, b, seed)
    }

    /// All weights zero: every feature entry is exactly 0.
    pub fn zeros(input_size: (usize, usize), patch: usize) -> Self {
        let pd = patch * patch * 3;
        Self::with_weights(input_size, patch, Array2::zeros((pd, ENC_DIM)), Array2::zeros((ENC_DIM, PROJ_DIM)), 0)
    }

    fn with_weights(input_size: (usize, usize), patch: usize, a: Array2<f64>, b: Array2<f64>, seed: u64) -> Self {
        assert!(input_size.0 % patch == 0 && input_size.1 % patch == 0, "input must tile into patches");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let prototypes = Array2::from_shape_simple_fn((DEFAULT_ANSWERS.len(), PROJ_DIM), || rng.gen_range(-1.0..1.0));
        Self {
            spec: VictimSpec {
                name: "stub".into(),
                attack_layers: vec![ENCODER_LAYER.into(), PROJECTOR_LAYER.into()],
                input_size,
                prompt_template: "{image} {prompt}".into(),
            },
            patch,
            a,
            b,
            head: CaptionHead::new(
                DEFAULT_ANSWERS.iter().map(|s| s.to_string()).collect(),
                prototypes,
                0.1,
                seed,
                (input_size.0 / patch) * (input_size.1 / patch),
            ),
        }
    }
}

struct StubTrace<'a> {
    victim: &'a StubVictim,
    enc: Array2<f64>,
    original: Option<(usize, usize)>,
}

impl FeaturePullback for StubTrace<'_> {
    fn backward(&self, grads: &FeatureGrads) -> Result<Image> {
        let mut g_enc = match grads.get(ENCODER_LAYER) {
            Some(g) => g.clone(),
            None => Array2::zeros(self.enc.dim()),
        };
        if let Some(g_proj) = grads.get(PROJECTOR_LAYER) {
            g_enc = g_enc + g_proj.dot(&self.victim.b.t());
        }
        let g_pre = &g_enc * &self.enc.mapv(|t| 1.0 - t * t);
        let g_patches = g_pre.dot(&self.victim.a.t());
        let g_img = unpatchify(&g_patches, self.victim.spec.input_size, self.victim.patch);
        Ok(unfit_grad(g_img, self.original))
    }
}

impl Victim for StubVictim {
    fn spec(&self) -> &VictimSpec {
        &self.spec
    }

    fn exposed_layers(&self) -> Vec<String> {
        vec![ENCODER_LAYER.into(), PROJECTOR_LAYER.into()]
    }

    fn extract_features_traced(&self, image: &Image) -> Result<(FeatureStack, Box<dyn FeaturePullback + '_>)> {
        let (input, original) = fit_input(image, self.spec.input_size)?;
        let patches = patchify(&input, self.patch);
        let enc = patches.dot(&self.a).mapv(f64::tanh);
        let proj = enc.dot(&self.b);
        let stack = FeatureStack {
            layers: vec![
                FeatureLayer {
                    name: ENCODER_LAYER.into(),
                    values: enc.clone(),
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
        Ok((
            stack,
            Box::new(StubTrace {
                victim: self,
                enc,
                original,
            }),
        ))
    }

    fn generate(&self, image: &Image, prompt: &str) -> Result<String> {
        if prompt.trim().is_empty() {
            return Err(Error::InvalidArgument("prompt must be nonempty".into()));
        }
        let stack = self.extract_features(image)?;
        let proj = stack.layer(PROJECTOR_LAYER).expect("stub exposes projector");
        self.head.answer(proj.view(), prompt)
    }
}
