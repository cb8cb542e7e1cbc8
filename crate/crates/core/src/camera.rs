//! Camera poses on the capture grid and the pinhole camera they induce.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vertical field of view of the scene camera, in degrees.
pub const FIELD_OF_VIEW_DEG: f64 = 60.0;
pub const NEAR_CLIP_M: f64 = 0.1;
pub const FAR_CLIP_M: f64 = 100.0;

/// Compass heading of the camera around the vehicle. Index k maps to a yaw
/// of 45 * k degrees, starting at north and turning clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YawLabel {
    North,
    Northeast,
    East,
    Southeast,
    South,
    Southwest,
    West,
    Northwest,
}

impl YawLabel {
    pub const ALL: [YawLabel; 8] = [
        YawLabel::North,
        YawLabel::Northeast,
        YawLabel::East,
        YawLabel::Southeast,
        YawLabel::South,
        YawLabel::Southwest,
        YawLabel::West,
        YawLabel::Northwest,
    ];

    pub fn index(self) -> usize {
        YawLabel::ALL.iter().position(|&y| y == self).unwrap()
    }

    pub fn degrees(self) -> f64 {
        45.0 * self.index() as f64
    }

    pub fn as_str(self) -> &'static str {
        match self {
            YawLabel::North => "north",
            YawLabel::Northeast => "northeast",
            YawLabel::East => "east",
            YawLabel::Southeast => "southeast",
            YawLabel::South => "south",
            YawLabel::Southwest => "southwest",
            YawLabel::West => "west",
            YawLabel::Northwest => "northwest",
        }
    }
}

impl fmt::Display for YawLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for YawLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        YawLabel::ALL
            .into_iter()
            .find(|y| y.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Format(format!("unknown yaw label `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub distance_m: f64,
    pub pitch_deg: f64,
    pub yaw_label: YawLabel,
}

impl CameraPose {
    pub fn new(distance_m: f64, pitch_deg: f64, yaw_label: YawLabel) -> Result<Self> {
        let pose = Self {
            distance_m,
            pitch_deg,
            yaw_label,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance_m > 0.0 && self.distance_m.is_finite()) {
            return Err(Error::InvalidArgument(format!("distance {} must be positive", self.distance_m)));
        }
        if !(self.pitch_deg > 0.0 && self.pitch_deg < 90.0) {
            return Err(Error::InvalidArgument(format!("pitch {} must lie in (0, 90)", self.pitch_deg)));
        }
        Ok(())
    }

    pub fn yaw_deg(&self) -> f64 {
        self.yaw_label.degrees()
    }
}

/// Pinhole camera looking at a target point.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub position: [f64; 3],
    right: [f64; 3],
    up: [f64; 3],
    forward: [f64; 3],
    focal_px: f64,
    width: usize,
    height: usize,
}

impl Camera {
    /// Orbit camera: `pose.distance_m` from `target`, elevated by the pitch,
    /// at the compass heading given by the yaw label.
    pub fn orbit(pose: &CameraPose, target: [f64; 3], image_size: (usize, usize)) -> Self {
        let pitch = pose.pitch_deg.to_radians();
        let yaw = pose.yaw_deg().to_radians();
        let d = pose.distance_m;
        let offset = [d * pitch.cos() * yaw.sin(), d * pitch.sin(), d * pitch.cos() * yaw.cos()];
        let position = add(target, offset);
        let forward = normalize(sub(target, position));
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        let (height, width) = image_size;
        let focal_px = (height as f64 / 2.0) / (FIELD_OF_VIEW_DEG.to_radians() / 2.0).tan();
        Self {
            position,
            right,
            up,
            forward,
            focal_px,
            width,
            height,
        }
    }

    /// Camera-space coordinates (x right, y up, z forward depth).
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = sub(p, self.position);
        [dot(d, self.right), dot(d, self.up), dot(d, self.forward)]
    }

    /// Continuous pixel coordinates (column, row) of a camera-space point.
    pub fn project(&self, c: [f64; 3]) -> (f64, f64) {
        let x = self.width as f64 / 2.0 + self.focal_px * c[0] / c[2];
        let y = self.height as f64 / 2.0 - self.focal_px * c[1] / c[2];
        (x, y)
    }

    /// World-space unit ray through the centre of pixel (row, col).
    pub fn ray(&self, row: usize, col: usize) -> [f64; 3] {
        let x = (col as f64 + 0.5 - self.width as f64 / 2.0) / self.focal_px;
        let y = (self.height as f64 / 2.0 - row as f64 - 0.5) / self.focal_px;
        normalize(add(add(scale(self.right, x), scale(self.up, y)), self.forward))
    }
}

pub(crate) fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / dot(a, a).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yaw_degrees_follow_label_index() {
        for (k, y) in YawLabel::ALL.iter().enumerate() {
            assert_eq!(y.degrees(), 45.0 * k as f64);
            assert_eq!(y.as_str().parse::<YawLabel>().unwrap(), *y);
        }
        assert!("up".parse::<YawLabel>().is_err());
    }

    #[test]
    fn pose_invariants() {
        assert!(CameraPose::new(5.0, 45.0, YawLabel::North).is_ok());
        assert!(CameraPose::new(0.0, 45.0, YawLabel::North).is_err());
        assert!(CameraPose::new(5.0, 90.0, YawLabel::North).is_err());
        assert!(CameraPose::new(5.0, 0.0, YawLabel::North).is_err());
    }

    #[test]
    fn target_projects_to_image_centre() {
        let pose = CameraPose::new(7.0, 22.5, YawLabel::Southwest).unwrap();
        let cam = Camera::orbit(&pose, [0.0, 0.7, 0.0], (64, 48));
        let c = cam.to_camera([0.0, 0.7, 0.0]);
        assert!((c[2] - 7.0).abs() < 1e-12);
        let (x, y) = cam.project(c);
        assert!((x - 24.0).abs() < 1e-9 && (y - 32.0).abs() < 1e-9);
    }
}
