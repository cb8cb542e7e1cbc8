//! Physical-robustness transforms: centre crop, bilinear rescale, and their
//! composition sampled from a multi-scale schedule.
//!
//! Every forward op has a matching backward that maps an output gradient to
//! an input gradient, so the chain render -> crop -> rescale -> victim stays
//! differentiable with respect to rendered pixels.

use ndarray::s;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Image;

/// Top-left corner of a centred `h x w` window. Odd size differences floor
/// the start index, so the window leans up/left by at most one pixel.
pub fn crop_origin(height: usize, width: usize, h: usize, w: usize) -> (usize, usize) {
    ((height - h) / 2, (width - w) / 2)
}

/// Central region rows [(H-h)/2, (H+h)/2) and columns [(W-w)/2, (W+w)/2).
pub fn center_crop(image: &Image, w: usize, h: usize) -> Result<Image> {
    let (height, width, _) = image.dim();
    if w > width || h > height {
        return Err(Error::CropTooLarge {
            crop_w: w,
            crop_h: h,
            width,
            height,
        });
    }
    if w == 0 || h == 0 {
        return Err(Error::Shape(format!("crop {w}x{h} must be positive")));
    }
    let (r0, c0) = crop_origin(height, width, h, w);
    Ok(image.slice(s![r0..r0 + h, c0..c0 + w, ..]).to_owned())
}

fn center_crop_backward(grad_out: &Image, input_size: (usize, usize)) -> Image {
    let (h, w, ch) = grad_out.dim();
    let (height, width) = input_size;
    let (r0, c0) = crop_origin(height, width, h, w);
    let mut grad = Image::zeros((height, width, ch));
    grad.slice_mut(s![r0..r0 + h, c0..c0 + w, ..]).assign(grad_out);
    grad
}

/// Per-output-index source taps (i0, i1, frac) for 1-D linear resampling
/// with half-pixel centres: src = (dst + 0.5) * in / out - 0.5, clamped to
/// [0, in - 1].
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling (align-corners off) to `output_size = (H, W)`.
pub fn rescale(image: &Image, output_size: (usize, usize)) -> Result<Image> {
    let (ih, iw, ch) = image.dim();
    let (oh, ow) = output_size;
    if ih == 0 || iw == 0 {
        return Err(Error::Shape("cannot rescale an empty image".into()));
    }
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("target size {oh}x{ow} must be positive")));
    }
    if (ih, iw) == (oh, ow) {
        return Ok(image.clone());
    }
    let ty = taps(ih, oh);
    let tx = taps(iw, ow);
    let mut out = Image::zeros((oh, ow, ch));
    for (r, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (c, &(x0, x1, fx)) in tx.iter().enumerate() {
            for k in 0..ch {
                let top = image[[y0, x0, k]] * (1.0 - fx) + image[[y0, x1, k]] * fx;
                let bot = image[[y1, x0, k]] * (1.0 - fx) + image[[y1, x1, k]] * fx;
                out[[r, c, k]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`rescale`]: scatters an output gradient onto input pixels.
pub fn rescale_backward(grad_out: &Image, input_size: (usize, usize)) -> Image {
    let (oh, ow, ch) = grad_out.dim();
    let (ih, iw) = input_size;
    if (ih, iw) == (oh, ow) {
        return grad_out.clone();
    }
    let ty = taps(ih, oh);
    let tx = taps(iw, ow);
    let mut grad = Image::zeros((ih, iw, ch));
    for (r, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (c, &(x0, x1, fx)) in tx.iter().enumerate() {
            for k in 0..ch {
                let g = grad_out[[r, c, k]];
                grad[[y0, x0, k]] += g * (1.0 - fy) * (1.0 - fx);
                grad[[y0, x1, k]] += g * (1.0 - fy) * fx;
                grad[[y1, x0, k]] += g * fy * (1.0 - fx);
                grad[[y1, x1, k]] += g * fy * fx;
            }
        }
    }
    grad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    /// w / W = h / H
    pub crop_fraction: f64,
    /// (H, W) after rescaling
    pub output_size: (usize, usize),
    pub scale_label: String,
}

impl TransformParams {
    pub fn identity(size: (usize, usize)) -> Self {
        Self {
            crop_fraction: 1.0,
            output_size: size,
            scale_label: "identity".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "crop fraction {} must lie in (0, 1]",
                self.crop_fraction
            )));
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::InvalidArgument("output size must be positive".into()));
        }
        Ok(())
    }

    /// Crop window (h, w) for an input of `(height, width)`.
    pub fn crop_size(&self, height: usize, width: usize) -> (usize, usize) {
        let h = ((self.crop_fraction * height as f64).round() as usize).clamp(1, height);
        let w = ((self.crop_fraction * width as f64).round() as usize).clamp(1, width);
        (h, w)
    }
}

/// The transform phi: centre crop, then rescale to the output size.
pub fn apply_phi(image: &Image, params: &TransformParams) -> Result<Image> {
    params.validate()?;
    let (height, width, _) = image.dim();
    let (h, w) = params.crop_size(height, width);
    let cropped = center_crop(image, w, h)?;
    rescale(&cropped, params.output_size)
}

/// Gradient of phi with respect to its input image.
pub fn apply_phi_backward(grad_out: &Image, input_size: (usize, usize), params: &TransformParams) -> Result<Image> {
    params.validate()?;
    let (gh, gw, _) = grad_out.dim();
    if (gh, gw) != params.output_size {
        return Err(Error::ShapeMismatch(format!(
            "gradient {gh}x{gw} vs transform output {:?}",
            params.output_size
        )));
    }
    let (h, w) = params.crop_size(input_size.0, input_size.1);
    let grad_crop = rescale_backward(grad_out, (h, w));
    Ok(center_crop_backward(&grad_crop, input_size))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub label: String,
    pub crop_fraction: f64,
    pub weight: f64,
    pub output_size: (usize, usize),
}

/// Weighted list of crop/scale settings that phi is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransformSchedule(pub Vec<ScheduleEntry>);

impl TransformSchedule {
    /// Whole frame plus the centre half, equally weighted: a 10 m view and
    /// its 2x magnification standing in for 5 m.
    pub fn multi_scale(output_size: (usize, usize)) -> Self {
        Self(vec![
            ScheduleEntry {
                label: "full".into(),
                crop_fraction: 1.0,
                weight: 1.0,
                output_size,
            },
            ScheduleEntry {
                label: "half".into(),
                crop_fraction: 0.5,
                weight: 1.0,
                output_size,
            },
        ])
    }

    pub fn single_scale(output_size: (usize, usize)) -> Self {
        Self(vec![ScheduleEntry {
            label: "full".into(),
            crop_fraction: 1.0,
            weight: 1.0,
            output_size,
        }])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::EmptySchedule);
        }
        for e in &self.0 {
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(Error::InvalidArgument(format!("schedule weight {} must be positive", e.weight)));
            }
            e.params().validate()?;
        }
        Ok(())
    }
}

impl ScheduleEntry {
    pub fn params(&self) -> TransformParams {
        TransformParams {
            crop_fraction: self.crop_fraction,
            output_size: self.output_size,
            scale_label: self.label.clone(),
        }
    }
}

/// Draws one transform from the schedule in proportion to its weights.
pub fn sample_transform<R: Rng + ?Sized>(rng: &mut R, schedule: &TransformSchedule) -> Result<TransformParams> {
    schedule.validate()?;
    if schedule.0.len() == 1 {
        return Ok(schedule.0[0].params());
    }
    let dist = WeightedIndex::new(schedule.0.iter().map(|e| e.weight))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(schedule.0[dist.sample(rng)].params())
}

/// Reverse composition (rescale to the crop size of the output, then crop).
/// Only used to show that order matters.
#[doc(hidden)]
pub fn apply_phi_reversed(image: &Image, params: &TransformParams) -> Result<Image> {
    let (oh, ow) = params.output_size;
    let big = (
        ((oh as f64) / params.crop_fraction).round() as usize,
        ((ow as f64) / params.crop_fraction).round() as usize,
    );
    let scaled = rescale(image, big)?;
    center_crop(&scaled, ow, oh)
}
