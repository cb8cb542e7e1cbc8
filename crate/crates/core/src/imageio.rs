//! Lossless raster persistence for images, UV maps and masks.

use std::path::Path;

use image::{GrayImage, ImageBuffer, ImageReader, LumaA, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// H x W x C image with values nominally in [0, 1].
pub type Image = Array3<f64>;

fn quantize8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn quantize16(x: f64) -> u16 {
    (x.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

fn save_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// Writes an RGB image as an 8-bit PNG, row-major.
pub fn save_rgb(path: &Path, img: &Image) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut buf = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let (r, col) = (y as usize, x as usize);
        *px = image::Rgb([
            quantize8(img[[r, col, 0]]),
            quantize8(img[[r, col, 1]]),
            quantize8(img[[r, col, 2]]),
        ]);
    }
    create_parent(path)?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| save_err(path, e))
}

pub fn load_rgb(path: &Path) -> Result<Image> {
    let img = open(path)?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(b) => b,
        other => other.to_rgb8(),
    };
    let (w, h) = rgb.dimensions();
    let mut out = Image::zeros((h as usize, w as usize, 3));
    for (x, y, px) in rgb.enumerate_pixels() {
        for k in 0..3 {
            out[[y as usize, x as usize, k]] = px.0[k] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Two-channel map stored as a 16-bit grey+alpha PNG.
pub fn save_uv16(path: &Path, uv: &Array3<f64>) -> Result<()> {
    let (h, w, c) = uv.dim();
    if c != 2 {
        return Err(Error::Shape(format!("expected 2 channels, got {c}")));
    }
    let mut buf: ImageBuffer<LumaA<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let (r, col) = (y as usize, x as usize);
        *px = LumaA([quantize16(uv[[r, col, 0]]), quantize16(uv[[r, col, 1]])]);
    }
    create_parent(path)?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| save_err(path, e))
}

pub fn load_uv16(path: &Path) -> Result<Array3<f64>> {
    let img = open(path)?;
    let buf = match img {
        image::DynamicImage::ImageLumaA16(b) => b,
        _ => return Err(Error::Format(format!("{}: expected 16-bit two-channel PNG", path.display()))),
    };
    let (w, h) = buf.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 2));
    for (x, y, px) in buf.enumerate_pixels() {
        out[[y as usize, x as usize, 0]] = px.0[0] as f64 / 65535.0;
        out[[y as usize, x as usize, 1]] = px.0[1] as f64 / 65535.0;
    }
    Ok(out)
}

pub fn save_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = GrayImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        *px = image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }]);
    }
    create_parent(path)?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| save_err(path, e))
}

pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let img = open(path)?;
    let buf = match img {
        image::DynamicImage::ImageLuma8(b) => b,
        _ => return Err(Error::Format(format!("{}: expected 8-bit grey PNG", path.display()))),
    };
    let (w, h) = buf.dimensions();
    let mut out = Array2::from_elem((h as usize, w as usize), false);
    for (x, y, px) in buf.enumerate_pixels() {
        out[[y as usize, x as usize]] = px.0[0] >= 128;
    }
    Ok(out)
}
