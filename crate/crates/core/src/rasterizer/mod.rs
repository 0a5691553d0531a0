//! CPU splat rasterizer with analytic gradients.

mod camera;
mod image;
mod project;
mod render;

pub use camera::CameraPose;
pub use image::{assemble_grid, assemble_mask_grid, split_grid, ImageBuffer, Mask2D};
pub use project::{
    covariance_3d, project, project_backward, projection_jacobian, quat_to_matrix, raw_cov2d, Projection, Splat2D,
    SplatGrad, COV_FLOOR, CULL_SIGMA, NEAR_PLANE,
};
pub use render::{
    check_alignment, prepare_view, render, render_backward, render_masked, render_soft, silhouette, GaussianGrad,
    PreparedView, Rgb, SceneGradients, ALPHA_MAX,
};
