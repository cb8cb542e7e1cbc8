//! Differentiable texture stage of the renderer.
//!
//! A [`SceneSample`] carries the fixed geometry of one viewpoint (a per-pixel
//! UV lookup and a foreground mask). Rendering composites a bilinear texture
//! lookup over the background; it is linear in the texels, so the backward
//! pass is an exact scatter of pixel gradients onto the bilinear footprints.

use ndarray::{Array2, Array3};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::texture::TextureMap;

#[derive(Debug, Clone)]
pub struct SceneSample {
    pub sample_id: String,
    pub pose: CameraPose,
    pub background: Image,
    pub uv_map: Array3<f64>,
    pub mask: Array2<bool>,
}

impl SceneSample {
    pub fn image_size(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.mask.dim();
        let (bh, bw, bc) = self.background.dim();
        let (uh, uw, uc) = self.uv_map.dim();
        if (bh, bw) != (h, w) || (uh, uw) != (h, w) || bc != 3 || uc != 2 {
            return Err(Error::ShapeMismatch(format!(
                "mask {h}x{w}, background {bh}x{bw}x{bc}, uv {uh}x{uw}x{uc}"
            )));
        }
        for ((r, c), &m) in self.mask.indexed_iter() {
            if m {
                let (u, v) = (self.uv_map[[r, c, 0]], self.uv_map[[r, c, 1]]);
                if !((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v)) {
                    return Err(Error::Format(format!("uv ({u}, {v}) at ({r}, {c}) outside [0,1]^2")));
                }
            }
        }
        Ok(())
    }

    pub fn foreground_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// The four texels a lookup blends, with their weights.
#[derive(Debug, Clone, Copy)]
pub struct Footprint {
    pub rows: [usize; 2],
    pub cols: [usize; 2],
    /// weights for (r0,c0), (r0,c1), (r1,c0), (r1,c1)
    pub weights: [f64; 4],
}

/// Bilinear footprint of texture coordinate (u, v). Texel centres sit at
/// ((j + 0.5) / W_t, 1 - (i + 0.5) / H_t); lookups clamp to the edge.
pub fn footprint(u: f64, v: f64, resolution: (usize, usize)) -> Footprint {
    let (th, tw) = resolution;
    let x = (u * tw as f64 - 0.5).clamp(0.0, (tw - 1) as f64);
    let y = ((1.0 - v) * th as f64 - 0.5).clamp(0.0, (th - 1) as f64);
    let c0 = x.floor() as usize;
    let r0 = y.floor() as usize;
    let c1 = (c0 + 1).min(tw - 1);
    let r1 = (r0 + 1).min(th - 1);
    let fx = x - c0 as f64;
    let fy = y - r0 as f64;
    Footprint {
        rows: [r0, r1],
        cols: [c0, c1],
        weights: [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ],
    }
}

fn check_shapes(sample: &SceneSample) -> Result<()> {
    let (h, w) = sample.mask.dim();
    let (bh, bw, bc) = sample.background.dim();
    let (uh, uw, uc) = sample.uv_map.dim();
    if (bh, bw) != (h, w) || (uh, uw) != (h, w) || bc != 3 || uc != 2 {
        return Err(Error::ShapeMismatch(format!(
            "mask {h}x{w}, background {bh}x{bw}x{bc}, uv {uh}x{uw}x{uc}"
        )));
    }
    Ok(())
}

/// X_T = R(M, T; pose): masked pixels take the bilinear texture lookup,
/// the rest keep the background.
pub fn render(sample: &SceneSample, texture: &TextureMap) -> Result<Image> {
    check_shapes(sample)?;
    let res = texture.resolution();
    let texels = texture.texels();
    let mut out = sample.background.clone();
    for ((r, c), &m) in sample.mask.indexed_iter() {
        if !m {
            continue;
        }
        let fp = footprint(sample.uv_map[[r, c, 0]], sample.uv_map[[r, c, 1]], res);
        for ch in 0..3 {
            let mut acc = 0.0;
            let mut k = 0;
            for &tr in &fp.rows {
                for &tc in &fp.cols {
                    acc += fp.weights[k] * texels[[tr, tc, ch]];
                    k += 1;
                }
            }
            out[[r, c, ch]] = acc;
        }
    }
    Ok(out)
}

/// Accumulates d(loss)/d(texels) given d(loss)/d(rendered image).
pub fn render_backward(sample: &SceneSample, grad_image: &Image, grad_texels: &mut Array3<f64>) -> Result<()> {
    check_shapes(sample)?;
    let (h, w) = sample.mask.dim();
    if grad_image.dim() != (h, w, 3) {
        return Err(Error::ShapeMismatch(format!(
            "image gradient {:?} vs sample {h}x{w}x3",
            grad_image.dim()
        )));
    }
    let (th, tw, tc) = grad_texels.dim();
    if tc != 3 {
        return Err(Error::ShapeMismatch(format!("texture gradient has {tc} channels")));
    }
    for ((r, c), &m) in sample.mask.indexed_iter() {
        if !m {
            continue;
        }
        let fp = footprint(sample.uv_map[[r, c, 0]], sample.uv_map[[r, c, 1]], (th, tw));
        for ch in 0..3 {
            let g = grad_image[[r, c, ch]];
            if g == 0.0 {
                continue;
            }
            let mut k = 0;
            for &tr in &fp.rows {
                for &tcol in &fp.cols {
                    grad_texels[[tr, tcol, ch]] += fp.weights[k] * g;
                    k += 1;
                }
            }
        }
    }
    Ok(())
}
