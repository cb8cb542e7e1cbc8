//! The learnable surface texture.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::imageio;

pub const DEFAULT_RESOLUTION: (usize, usize) = (512, 512);

/// H_t x W_t x 3 texels in [0, 1]. Row 0 is the top of the atlas (v = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct TextureMap {
    texels: Array3<f64>,
}

impl TextureMap {
    pub fn new(texels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = texels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::Shape(format!("texture must be HxWx3 and nonempty, got {h}x{w}x{c}")));
        }
        let mut t = Self { texels };
        t.clamp();
        Ok(t)
    }

    pub fn constant(resolution: (usize, usize), value: f64) -> Self {
        Self::new(Array3::from_elem((resolution.0, resolution.1, 3), value)).expect("nonempty resolution")
    }

    pub fn random_uniform<R: Rng + ?Sized>(resolution: (usize, usize), rng: &mut R) -> Self {
        let texels = Array3::from_shape_simple_fn((resolution.0, resolution.1, 3), || rng.gen::<f64>());
        Self::new(texels).expect("nonempty resolution")
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (h, w, _) = self.texels.dim();
        (h, w)
    }

    pub fn texels(&self) -> &Array3<f64> {
        &self.texels
    }

    /// Applies `texels -= step` followed by the [0, 1] clamp.
    pub fn apply_update(&mut self, step: &Array3<f64>) -> Result<()> {
        if step.dim() != self.texels.dim() {
            return Err(Error::ShapeMismatch(format!(
                "update {:?} vs texture {:?}",
                step.dim(),
                self.texels.dim()
            )));
        }
        self.texels.zip_mut_with(step, |t, s| *t -= s);
        self.clamp();
        Ok(())
    }

    fn clamp(&mut self) {
        // NaN texels are left in place so the optimizer can detect them.
        self.texels.mapv_inplace(|v| if v.is_nan() { v } else { v.clamp(0.0, 1.0) });
    }

    /// 8-bit RGB PNG, row-major.
    pub fn export(&self, path: &Path) -> Result<()> {
        imageio::save_rgb(path, &self.texels)
    }

    pub fn import(path: &Path) -> Result<Self> {
        let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
        if meta.len() == 0 {
            return Err(Error::Format(format!("{}: empty file", path.display())));
        }
        Self::new(imageio::load_rgb(path)?)
    }

    pub fn max_abs_diff(&self, other: &TextureMap) -> f64 {
        self.texels
            .iter()
            .zip(other.texels.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn export_import_is_within_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = TextureMap::random_uniform((17, 23), &mut rng);
        let path = dir.path().join("t.png");
        t.export(&path).unwrap();
        let back = TextureMap::import(&path).unwrap();
        assert_eq!(back.resolution(), (17, 23));
        assert!(t.max_abs_diff(&back) <= 1.0 / 510.0 + 1e-15);
    }

    #[test]
    fn zero_byte_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.png");
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(TextureMap::import(&path), Err(Error::Format(_))));
    }

    #[test]
    fn garbage_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.png");
        std::fs::write(&path, b"definitely not a png").unwrap();
        assert!(matches!(TextureMap::import(&path), Err(Error::Format(_))));
    }

    #[test]
    fn all_zero_texture_exports_black() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("black.png");
        TextureMap::constant((4, 6), 0.0).export(&path).unwrap();
        let raw = image::open(&path).unwrap().to_rgb8();
        assert!(raw.pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn update_clamps_to_unit_interval() {
        let mut t = TextureMap::constant((2, 2), 0.9);
        let step = Array3::from_elem((2, 2, 3), -0.5);
        t.apply_update(&step).unwrap();
        assert!(t.texels().iter().all(|&v| v == 1.0));
        let step = Array3::from_elem((2, 2, 3), 3.0);
        t.apply_update(&step).unwrap();
        assert!(t.texels().iter().all(|&v| v == 0.0));
    }
}
