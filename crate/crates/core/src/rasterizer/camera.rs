use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scene::TimeSample;

/// Pinhole camera with a world-to-camera rigid transform. Camera space
/// looks down `+z` with `x` right and `y` down; pixel `(i, j)` is sampled at
/// `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub time: TimeSample,
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera(format!(
                "viewport {}x{} must be at least 1x1",
                self.width, self.height
            )));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(Error::InvalidCamera(format!(
                "rotation is not orthonormal (max deviation {err:e})"
            )));
        }
        if ![self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite intrinsics".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` roughly opposite to
    /// image `y`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
        time: TimeSample,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        CameraPose {
            rotation,
            translation,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            time,
        }
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn with_time(&self, time: TimeSample) -> Self {
        CameraPose { time, ..self.clone() }
    }
}
