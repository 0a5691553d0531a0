//! EWA projection of 3D Gaussians to screen-space splats, and its adjoint.

use nalgebra::{Matrix2x3, Matrix3, Vector3};

use super::camera::CameraPose;
use crate::scene::ActivatedGaussian;

pub const NEAR_PLANE: f64 = 0.01;
/// Added to the diagonal of every projected covariance (pixels squared).
pub const COV_FLOOR: f64 = 0.3;
/// Footprint extent, in standard deviations, used for viewport culling.
pub const CULL_SIGMA: f64 = 3.0;

/// A projected Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub id: u64,
    pub mean: [f64; 2],
    /// Regularised screen covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, same packing.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Visible(Splat2D),
    Culled,
}

impl Projection {
    pub fn visible(self) -> Option<Splat2D> {
        match self {
            Projection::Visible(s) => Some(s),
            Projection::Culled => None,
        }
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient with respect to a unit quaternion given `dL/dR`.
pub fn quat_matrix_backward(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let dw = 2.0 * (-g[(0, 1)] * z + g[(0, 2)] * y + g[(1, 0)] * z - g[(1, 2)] * x - g[(2, 0)] * y + g[(2, 1)] * x);
    let dx = 2.0
        * (g[(0, 1)] * y + g[(0, 2)] * z + g[(1, 0)] * y - 2.0 * g[(1, 1)] * x - g[(1, 2)] * w
            + g[(2, 0)] * z
            + g[(2, 1)] * w
            - 2.0 * g[(2, 2)] * x);
    let dy = 2.0
        * (-2.0 * g[(0, 0)] * y + g[(0, 1)] * x + g[(0, 2)] * w + g[(1, 0)] * x + g[(1, 2)] * z
            - g[(2, 0)] * w
            + g[(2, 1)] * z
            - 2.0 * g[(2, 2)] * y);
    let dz = 2.0
        * (-2.0 * g[(0, 0)] * z - g[(0, 1)] * w + g[(0, 2)] * x + g[(1, 0)] * w - 2.0 * g[(1, 1)] * z
            + g[(1, 2)] * y
            + g[(2, 0)] * x
            + g[(2, 1)] * y);
    [dw, dx, dy, dz]
}

/// World-space covariance `R diag(s^2) R^T`.
pub fn covariance_3d(g: &ActivatedGaussian) -> Matrix3<f64> {
    let m = quat_to_matrix(&g.rotation) * Matrix3::from_diagonal(&g.scale);
    m * m.transpose()
}

/// First-order projection Jacobian at camera-space point `pc`.
pub fn projection_jacobian(cam: &CameraPose, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (pc.x, pc.y, pc.z);
    Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    )
}

/// Un-regularised screen covariance `J W Sigma W^T J^T`.
pub fn raw_cov2d(g: &ActivatedGaussian, cam: &CameraPose) -> [f64; 3] {
    let pc = cam.world_to_camera(&g.position);
    let j = projection_jacobian(cam, &pc);
    let cov_cam = cam.rotation * covariance_3d(g) * cam.rotation.transpose();
    let c = j * cov_cam * j.transpose();
    [c[(0, 0)], c[(0, 1)], c[(1, 1)]]
}

pub fn project(g: &ActivatedGaussian, cam: &CameraPose) -> Projection {
    let pc = cam.world_to_camera(&g.position);
    if !(pc.z > NEAR_PLANE) {
        return Projection::Culled;
    }
    let mean = [cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy];
    let raw = raw_cov2d(g, cam);
    let cov2d = [raw[0] + COV_FLOOR, raw[1], raw[2] + COV_FLOOR];
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    if !(det > 0.0) || !det.is_finite() {
        return Projection::Culled;
    }
    let ext_x = CULL_SIGMA * cov2d[0].sqrt();
    let ext_y = CULL_SIGMA * cov2d[2].sqrt();
    if mean[0] + ext_x < 0.0
        || mean[0] - ext_x > cam.width as f64
        || mean[1] + ext_y < 0.0
        || mean[1] - ext_y > cam.height as f64
    {
        return Projection::Culled;
    }
    let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
    Projection::Visible(Splat2D {
        id: g.id,
        mean,
        cov2d,
        conic,
        depth: pc.z,
        opacity: g.opacity,
        color: g.color,
    })
}

/// Gradients of a splat's screen-space quantities.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplatGrad {
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl SplatGrad {
    pub fn add(&mut self, other: &SplatGrad) {
        for k in 0..2 {
            self.mean[k] += other.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += other.conic[k];
            self.color[k] += other.color[k];
        }
        self.opacity += other.opacity;
    }
}

/// Gradients with respect to activated 3D parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ActivatedGrad {
    pub position: [f64; 3],
    pub scale: [f64; 3],
    pub rotation: [f64; 4],
}

/// Adjoint of [`project`] for the geometric terms (mean and conic).
pub fn project_backward(g: &ActivatedGaussian, splat: &Splat2D, cam: &CameraPose, grad: &SplatGrad) -> ActivatedGrad {
    let pc = cam.world_to_camera(&g.position);
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let (fx, fy) = (cam.fx, cam.fy);

    // conic = inverse(cov2d)
    let [aa, bb, cc] = splat.cov2d;
    let det = aa * cc - bb * bb;
    let det2 = det * det;
    let [ga, gb, gc] = grad.conic;
    let d_a = ga * (-cc * cc / det2) + gb * (bb * cc / det2) + gc * (-bb * bb / det2);
    let d_b = ga * (2.0 * bb * cc / det2) + gb * (-1.0 / det - 2.0 * bb * bb / det2) + gc * (2.0 * aa * bb / det2);
    let d_c = ga * (-bb * bb / det2) + gb * (aa * bb / det2) + gc * (-aa * aa / det2);

    let j = projection_jacobian(cam, &pc);
    let rot = quat_to_matrix(&g.rotation);
    let m = rot * Matrix3::from_diagonal(&g.scale);
    let cov3 = m * m.transpose();
    let w = cam.rotation;
    let cov_cam = w * cov3 * w.transpose();

    // cov2d = J cov_cam J^T, with symmetric upstream gradient
    let g2 = nalgebra::Matrix2::new(d_a, 0.5 * d_b, 0.5 * d_b, d_c);
    let d_cov_cam = j.transpose() * g2 * j;
    let d_j = 2.0 * g2 * j * cov_cam;
    let d_cov3 = w.transpose() * d_cov_cam * w;
    let d_m = 2.0 * d_cov3 * m;

    let mut scale = [0.0; 3];
    let mut d_rot = Matrix3::zeros();
    for c in 0..3 {
        for r in 0..3 {
            scale[c] += d_m[(r, c)] * rot[(r, c)];
            d_rot[(r, c)] = d_m[(r, c)] * g.scale[c];
        }
    }
    let rotation = quat_matrix_backward(&g.rotation, &d_rot);

    // Camera-space point: mean projection plus Jacobian dependence.
    let z2 = z * z;
    let z3 = z2 * z;
    let [gu, gv] = grad.mean;
    let mut d_pc = Vector3::new(gu * fx / z, gv * fy / z, -gu * fx * x / z2 - gv * fy * y / z2);
    d_pc.x += d_j[(0, 2)] * (-fx / z2);
    d_pc.y += d_j[(1, 2)] * (-fy / z2);
    d_pc.z += d_j[(0, 0)] * (-fx / z2)
        + d_j[(0, 2)] * (2.0 * fx * x / z3)
        + d_j[(1, 1)] * (-fy / z2)
        + d_j[(1, 2)] * (2.0 * fy * y / z3);
    let d_p = w.transpose() * d_pc;

    ActivatedGrad {
        position: [d_p.x, d_p.y, d_p.z],
        scale,
        rotation,
    }
}
