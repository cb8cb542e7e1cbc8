//! Geometry stage of the renderer: per-pixel texture coordinates.
//!
//! The mesh is projected once per pose and the result stored as a UV lookup
//! map plus a foreground mask. This stage is not differentiable; gradients
//! only ever flow through the texture lookup in [`crate::render`].

use ndarray::{Array2, Array3};

use crate::camera::{Camera, CameraPose, FAR_CLIP_M, NEAR_CLIP_M};
use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Perspective-correct UV rasterization with a z-buffer.
///
/// Triangles with any corner outside the near/far clip range are dropped
/// whole; the pose is rejected when nothing remains visible.
pub fn rasterize_uv(
    mesh: &Mesh,
    pose: &CameraPose,
    image_size: (usize, usize),
) -> Result<(Array3<f64>, Array2<bool>)> {
    let (height, width) = image_size;
    if height == 0 || width == 0 {
        return Err(Error::Shape(format!("image size {height}x{width} must be positive")));
    }
    mesh.validate()?;
    pose.validate()?;

    let camera = Camera::orbit(pose, mesh.center(), image_size);
    let mut depth = Array2::<f64>::from_elem((height, width), f64::INFINITY);
    let mut uv_map = Array3::<f64>::zeros((height, width, 2));
    let mut mask = Array2::<bool>::from_elem((height, width), false);

    for face in &mesh.faces {
        let cam = face.vertices.map(|v| camera.to_camera(mesh.vertices[v]));
        if cam.iter().any(|c| c[2] < NEAR_CLIP_M || c[2] > FAR_CLIP_M) {
            continue;
        }
        let screen = cam.map(|c| camera.project(c));
        let uvs = face.uvs.map(|t| mesh.uv_coords[t]);

        let area = edge(screen[0], screen[1], screen[2]);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = screen.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_x = screen.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = screen.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_y = screen.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let col0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let row0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let col1 = ((max_x - 0.5).floor()).min(width as f64 - 1.0);
        let row1 = ((max_y - 0.5).floor()).min(height as f64 - 1.0);
        if col1 < 0.0 || row1 < 0.0 {
            continue;
        }
        let (col1, row1) = (col1 as usize, row1 as usize);

        for row in row0..=row1 {
            for col in col0..=col1 {
                let p = (col as f64 + 0.5, row as f64 + 0.5);
                let b0 = edge(screen[1], screen[2], p) / area;
                let b1 = edge(screen[2], screen[0], p) / area;
                let b2 = edge(screen[0], screen[1], p) / area;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                let w = [b0 / cam[0][2], b1 / cam[1][2], b2 / cam[2][2]];
                let inv_z = w[0] + w[1] + w[2];
                let z = 1.0 / inv_z;
                if z >= depth[[row, col]] {
                    continue;
                }
                depth[[row, col]] = z;
                for k in 0..2 {
                    let t = (w[0] * uvs[0][k] + w[1] * uvs[1][k] + w[2] * uvs[2][k]) * z;
                    uv_map[[row, col, k]] = t.clamp(0.0, 1.0);
                }
                mask[[row, col]] = true;
            }
        }
    }

    if !mask.iter().any(|&m| m) {
        return Err(Error::DegeneratePose(format!(
            "d={} m, pitch={} deg, yaw={}",
            pose.distance_m, pose.pitch_deg, pose.yaw_label
        )));
    }
    Ok((uv_map, mask))
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}
