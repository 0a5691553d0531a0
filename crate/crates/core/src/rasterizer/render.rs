//! Depth-sorted alpha compositing and its analytic adjoint.
//!
//! Every pixel walks the full depth-sorted splat list (no tiling). Splats
//! are sorted once per view by ascending camera depth with ties broken by
//! primitive id, so the composition order does not depend on storage order.
//! The backward pass reduces per-block partial gradients in fixed block
//! order, which keeps results bitwise reproducible across thread counts.

use rayon::prelude::*;

use super::camera::CameraPose;
use super::image::{ImageBuffer, Mask2D};
use super::project::{project, project_backward, Projection, Splat2D, SplatGrad};
use crate::error::{Error, Result};
use crate::scene::{
    apply_offsets, quat_norm, time_embed, ActivatedGaussian, DeformationField, FieldTrace, GaussianCloud,
    GaussianPrimitive, Offsets,
};
use crate::selector::EditMask;

pub const ALPHA_MAX: f64 = 0.999;
/// Mahalanobis distance squared beyond which a splat's weight
/// (`exp(-q/2) < 1.4e-11`) is treated as zero.
const Q_CUTOFF: f64 = 50.0;
const ROWS_PER_BLOCK: usize = 4;

pub type Rgb = [f64; 3];

/// Per-view state shared by the forward and backward passes: deformed and
/// activated primitives plus the depth-sorted visible splats.
#[derive(Debug, Clone)]
pub struct PreparedView {
    pub camera: CameraPose,
    deformed: Vec<GaussianPrimitive>,
    traces: Vec<Option<FieldTrace>>,
    activated: Vec<ActivatedGaussian>,
    /// `(primitive index, splat)` sorted front to back.
    splats: Vec<(usize, Splat2D)>,
}

pub fn prepare_view(cloud: &GaussianCloud, field: &DeformationField, cam: &CameraPose) -> Result<PreparedView> {
    cam.validate()?;
    field.validate()?;
    let embedding = time_embed(cam.time, field.time_embed_order);
    let n = cloud.len();
    let mut deformed = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    let mut activated = Vec::with_capacity(n);
    let mut splats = Vec::with_capacity(n);
    for (i, p) in cloud.primitives().iter().enumerate() {
        let (d, trace) = if field.is_inert() {
            (p.clone(), None)
        } else {
            let trace = field.forward(&p.position, &embedding);
            let off = field.split_output(trace.output());
            (apply_offsets(p, &off, field.deformed), Some(trace))
        };
        let a = d.activate()?;
        if let Projection::Visible(s) = project(&a, cam) {
            splats.push((i, s));
        }
        deformed.push(d);
        traces.push(trace);
        activated.push(a);
    }
    splats.sort_by(|(_, a), (_, b)| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));
    Ok(PreparedView {
        camera: cam.clone(),
        deformed,
        traces,
        activated,
        splats,
    })
}

impl PreparedView {
    pub fn splats(&self) -> impl Iterator<Item = (usize, &Splat2D)> {
        self.splats.iter().map(|(i, s)| (*i, s))
    }

    pub fn visible_count(&self) -> usize {
        self.splats.len()
    }

    pub fn primitive_count(&self) -> usize {
        self.activated.len()
    }

    fn effective_opacity(&self, slot: usize, keep: Option<&[f64]>) -> f64 {
        let (i, s) = &self.splats[slot];
        match keep {
            Some(k) => s.opacity * k[*i],
            None => s.opacity,
        }
    }

    fn check_keep(&self, keep: Option<&[f64]>) -> Result<()> {
        match keep {
            Some(k) if k.len() != self.activated.len() => Err(Error::MaskMisaligned(format!(
                "{} keep probabilities for {} gaussians",
                k.len(),
                self.activated.len()
            ))),
            _ => Ok(()),
        }
    }

    /// Composites the view. `keep`, when given, scales each primitive's
    /// opacity by a keep-probability in `[0, 1]`. Returns the image and the
    /// per-pixel accumulated alpha `1 - prod(1 - alpha_i)`.
    pub fn composite_with_alpha(&self, keep: Option<&[f64]>, background: Rgb) -> Result<(ImageBuffer, Vec<f64>)> {
        self.check_keep(keep)?;
        let (w, h) = (self.camera.width, self.camera.height);
        let opacities: Vec<f64> = (0..self.splats.len()).map(|k| self.effective_opacity(k, keep)).collect();
        let mut pixels = vec![[0.0; 3]; w * h];
        let mut alpha = vec![0.0; w * h];
        pixels
            .par_chunks_mut(w)
            .zip(alpha.par_chunks_mut(w))
            .enumerate()
            .for_each(|(y, (row, arow))| {
                let py = y as f64 + 0.5;
                for x in 0..w {
                    let px = x as f64 + 0.5;
                    let mut t = 1.0;
                    let mut c = [0.0; 3];
                    for (k, (_, s)) in self.splats.iter().enumerate() {
                        let op = opacities[k];
                        if op <= 0.0 {
                            continue;
                        }
                        let Some(a) = splat_alpha(s, op, px, py).map(|(a, _, _)| a) else {
                            continue;
                        };
                        for ch in 0..3 {
                            c[ch] += s.color[ch] * a * t;
                        }
                        t *= 1.0 - a;
                    }
                    for ch in 0..3 {
                        c[ch] = (c[ch] + background[ch] * t).clamp(0.0, 1.0);
                    }
                    row[x] = c;
                    arow[x] = 1.0 - t;
                }
            });
        Ok((ImageBuffer { width: w, height: h, pixels }, alpha))
    }

    pub fn composite(&self, keep: Option<&[f64]>, background: Rgb) -> Result<ImageBuffer> {
        Ok(self.composite_with_alpha(keep, background)?.0)
    }

    /// Gradients of `sum(adjoint * composite)` with respect to each visible
    /// splat's screen-space quantities, indexed like [`splats`](Self::splats).
    pub fn composite_backward(&self, keep: Option<&[f64]>, background: Rgb, adjoint: &ImageBuffer) -> Result<Vec<SplatGrad>> {
        self.check_keep(keep)?;
        let (w, h) = (self.camera.width, self.camera.height);
        if adjoint.width != w || adjoint.height != h {
            return Err(Error::DimensionMismatch(format!(
                "adjoint {}x{} for a {w}x{h} view",
                adjoint.width, adjoint.height
            )));
        }
        let n = self.splats.len();
        let opacities: Vec<f64> = (0..n).map(|k| self.effective_opacity(k, keep)).collect();
        let blocks = h.div_ceil(ROWS_PER_BLOCK);
        let partials: Vec<Vec<SplatGrad>> = (0..blocks)
            .into_par_iter()
            .map(|b| {
                let mut acc = vec![SplatGrad::default(); n];
                let mut hits: Vec<Hit> = Vec::with_capacity(n);
                let y_end = ((b + 1) * ROWS_PER_BLOCK).min(h);
                for y in b * ROWS_PER_BLOCK..y_end {
                    for x in 0..w {
                        let g = adjoint.pixels[y * w + x];
                        if g == [0.0; 3] {
                            continue;
                        }
                        self.pixel_backward(x, y, &opacities, background, g, &mut hits, &mut acc);
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![SplatGrad::default(); n];
        for part in &partials {
            for (t, p) in total.iter_mut().zip(part) {
                t.add(p);
            }
        }
        Ok(total)
    }

    #[allow(clippy::too_many_arguments)]
    fn pixel_backward(
        &self,
        x: usize,
        y: usize,
        opacities: &[f64],
        background: Rgb,
        g: Rgb,
        hits: &mut Vec<Hit>,
        acc: &mut [SplatGrad],
    ) {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        hits.clear();
        let mut t = 1.0;
        for (k, (_, s)) in self.splats.iter().enumerate() {
            let op = opacities[k];
            if op <= 0.0 {
                continue;
            }
            let Some((alpha, weight, clamped)) = splat_alpha(s, op, px, py) else {
                continue;
            };
            hits.push(Hit {
                slot: k,
                alpha,
                weight,
                clamped,
                t_before: t,
            });
            t *= 1.0 - alpha;
        }
        // Back to front: `behind` holds sum_{j>i} c_j a_j T_j + bg * T_final.
        let mut behind = [background[0] * t, background[1] * t, background[2] * t];
        for hit in hits.iter().rev() {
            let s = &self.splats[hit.slot].1;
            let ga = &mut acc[hit.slot];
            let mut d_alpha = 0.0;
            for ch in 0..3 {
                ga.color[ch] += g[ch] * hit.alpha * hit.t_before;
                d_alpha += g[ch] * (s.color[ch] * hit.t_before - behind[ch] / (1.0 - hit.alpha));
            }
            for ch in 0..3 {
                behind[ch] += s.color[ch] * hit.alpha * hit.t_before;
            }
            if hit.clamped {
                continue;
            }
            // alpha = o * exp(-q / 2)
            ga.opacity += d_alpha * hit.weight;
            let d_q = -0.5 * hit.alpha * d_alpha;
            let dx = px - s.mean[0];
            let dy = py - s.mean[1];
            let [a, b, c] = s.conic;
            ga.mean[0] += d_q * -2.0 * (a * dx + b * dy);
            ga.mean[1] += d_q * -2.0 * (b * dx + c * dy);
            ga.conic[0] += d_q * dx * dx;
            ga.conic[1] += d_q * 2.0 * dx * dy;
            ga.conic[2] += d_q * dy * dy;
        }
    }

    /// Gradient with respect to each primitive's keep-probability only.
    pub fn keep_gradients(&self, splat_grads: &[SplatGrad]) -> Vec<f64> {
        let mut out = vec![0.0; self.activated.len()];
        for ((i, _), sg) in self.splats.iter().zip(splat_grads) {
            out[*i] = sg.opacity * self.activated[*i].opacity;
        }
        out
    }

    /// Chains splat gradients back to raw primitive parameters and field
    /// weights. Culled primitives receive zero gradients.
    pub fn backward_params(
        &self,
        field: &DeformationField,
        splat_grads: &[SplatGrad],
        keep: Option<&[f64]>,
    ) -> SceneGradients {
        let n = self.activated.len();
        let mut out = SceneGradients::zeros(n, field.param_count());
        for ((i, s), sg) in self.splats.iter().zip(splat_grads) {
            let i = *i;
            let a = &self.activated[i];
            let raw = &self.deformed[i];
            let gg = &mut out.gaussians[i];
            for ch in 0..3 {
                if (0.0..=1.0).contains(&raw.color[ch]) {
                    gg.color[ch] = sg.color[ch];
                }
            }
            let k = keep.map_or(1.0, |k| k[i]);
            out.keep[i] = sg.opacity * a.opacity;
            gg.opacity_logit = sg.opacity * k * a.opacity * (1.0 - a.opacity);
            out.screen_mean_norm[i] = (sg.mean[0] * sg.mean[0] + sg.mean[1] * sg.mean[1]).sqrt();

            let ag = project_backward(a, s, &self.camera, sg);
            let mut d_log_scale = [0.0; 3];
            for c in 0..3 {
                d_log_scale[c] = ag.scale[c] * a.scale[c];
            }
            let norm = quat_norm(&raw.rotation);
            let dot: f64 = (0..4).map(|c| a.rotation[c] * ag.rotation[c]).sum();
            let mut d_rot = [0.0; 4];
            for c in 0..4 {
                d_rot[c] = (ag.rotation[c] - a.rotation[c] * dot) / norm;
            }
            let mut d_pos = ag.position;
            if let Some(trace) = &self.traces[i] {
                let d_out = field.pack_output_grad(&Offsets {
                    position: d_pos,
                    rotation: d_rot,
                    log_scale: d_log_scale,
                });
                // The raw position is also the field input.
                let d_in = field.backward(trace, &d_out, &mut out.field);
                for c in 0..3 {
                    d_pos[c] += d_in[c];
                }
            }
            gg.position = d_pos;
            gg.log_scale = d_log_scale;
            gg.rotation = d_rot;
        }
        out
    }
}

struct Hit {
    slot: usize,
    alpha: f64,
    weight: f64,
    clamped: bool,
    t_before: f64,
}

/// `(alpha, gaussian weight, clamped)` of a splat at a pixel centre, or
/// `None` when the weight is negligible.
#[inline]
fn splat_alpha(s: &Splat2D, opacity: f64, px: f64, py: f64) -> Option<(f64, f64, bool)> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let [a, b, c] = s.conic;
    let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if !(q <= Q_CUTOFF) {
        return None;
    }
    let weight = (-0.5 * q).exp();
    let alpha = opacity * weight;
    if alpha > ALPHA_MAX {
        Some((ALPHA_MAX, weight, true))
    } else {
        Some((alpha, weight, false))
    }
}

/// Gradients of one primitive's raw parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl GaussianGrad {
    pub fn add_scaled(&mut self, other: &GaussianGrad, s: f64) {
        for k in 0..3 {
            self.position[k] += s * other.position[k];
            self.log_scale[k] += s * other.log_scale[k];
            self.color[k] += s * other.color[k];
        }
        for k in 0..4 {
            self.rotation[k] += s * other.rotation[k];
        }
        self.opacity_logit += s * other.opacity_logit;
    }

    pub fn is_zero(&self) -> bool {
        *self == GaussianGrad::default()
    }
}

/// Gradients of a scalar loss with respect to the whole scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradients {
    /// Aligned with cloud storage order.
    pub gaussians: Vec<GaussianGrad>,
    /// Flat, in [`DeformationField::flat_params`] order.
    pub field: Vec<f64>,
    /// Norm of the screen-space mean gradient (densification statistic).
    pub screen_mean_norm: Vec<f64>,
    /// Gradient with respect to each primitive's keep-probability.
    pub keep: Vec<f64>,
}

impl SceneGradients {
    pub fn zeros(gaussians: usize, field_params: usize) -> Self {
        SceneGradients {
            gaussians: vec![GaussianGrad::default(); gaussians],
            field: vec![0.0; field_params],
            screen_mean_norm: vec![0.0; gaussians],
            keep: vec![0.0; gaussians],
        }
    }

    pub fn add_scaled(&mut self, other: &SceneGradients, s: f64) {
        for (a, b) in self.gaussians.iter_mut().zip(&other.gaussians) {
            a.add_scaled(b, s);
        }
        for (a, b) in self.field.iter_mut().zip(&other.field) {
            *a += s * b;
        }
        for (a, b) in self.screen_mean_norm.iter_mut().zip(&other.screen_mean_norm) {
            *a += s * b;
        }
        for (a, b) in self.keep.iter_mut().zip(&other.keep) {
            *a += s * b;
        }
    }
}

pub fn render(cloud: &GaussianCloud, field: &DeformationField, cam: &CameraPose, background: Rgb) -> Result<ImageBuffer> {
    prepare_view(cloud, field, cam)?.composite(None, background)
}

/// Gradients of `L = sum(adjoint * render(...))`.
pub fn render_backward(
    cloud: &GaussianCloud,
    field: &DeformationField,
    cam: &CameraPose,
    background: Rgb,
    adjoint: &ImageBuffer,
) -> Result<SceneGradients> {
    let view = prepare_view(cloud, field, cam)?;
    let sg = view.composite_backward(None, background, adjoint)?;
    Ok(view.backward_params(field, &sg, None))
}

pub fn check_alignment(cloud: &GaussianCloud, mask: &EditMask) -> Result<()> {
    if mask.len() != cloud.len() {
        return Err(Error::MaskMisaligned(format!(
            "mask has {} entries, cloud has {}",
            mask.len(),
            cloud.len()
        )));
    }
    for (a, p) in mask.gaussian_ids.iter().zip(cloud.primitives()) {
        if *a != p.id {
            return Err(Error::MaskMisaligned(format!("mask id {a} vs cloud id {}", p.id)));
        }
    }
    Ok(())
}

/// Renders only the Gaussians whose mask label is 1.
pub fn render_masked(
    cloud: &GaussianCloud,
    field: &DeformationField,
    mask: &EditMask,
    cam: &CameraPose,
    background: Rgb,
) -> Result<ImageBuffer> {
    check_alignment(cloud, mask)?;
    render(&cloud.subcloud(&mask.label_flags()), field, cam, background)
}

/// Renders with every opacity multiplied by a soft keep-probability.
pub fn render_soft(
    cloud: &GaussianCloud,
    field: &DeformationField,
    keep: &[f64],
    cam: &CameraPose,
    background: Rgb,
) -> Result<ImageBuffer> {
    prepare_view(cloud, field, cam)?.composite(Some(keep), background)
}

/// Pixels where the mask-1 Gaussians alone accumulate alpha above
/// `threshold`.
pub fn silhouette(
    cloud: &GaussianCloud,
    field: &DeformationField,
    mask: &EditMask,
    cam: &CameraPose,
    threshold: f64,
) -> Result<Mask2D> {
    check_alignment(cloud, mask)?;
    let view = prepare_view(&cloud.subcloud(&mask.label_flags()), field, cam)?;
    let (_, alpha) = view.composite_with_alpha(None, [0.0; 3])?;
    Ok(Mask2D {
        width: cam.width,
        height: cam.height,
        data: alpha.iter().map(|a| *a > threshold).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::TimeSample;
    use nalgebra::{Matrix3, Vector3};

    fn camera(w: usize, h: usize) -> CameraPose {
        CameraPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            fx: 20.0,
            fy: 20.0,
            cx: w as f64 / 2.0 + 0.5,
            cy: h as f64 / 2.0 + 0.5,
            width: w,
            height: h,
            time: TimeSample::default(),
        }
    }

    fn prim(id: u64, pos: [f64; 3], logit: f64, color: [f64; 3]) -> GaussianPrimitive {
        GaussianPrimitive {
            id,
            position: pos,
            log_scale: [(0.1f64).ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit,
            color,
        }
    }

    #[test]
    fn empty_cloud_is_background() {
        let img = render(&GaussianCloud::new(), &DeformationField::identity(), &camera(8, 6), [0.1, 0.2, 0.3]).unwrap();
        assert!(img.pixels.iter().all(|p| *p == [0.1, 0.2, 0.3]));
    }

    #[test]
    fn single_splat_centre_pixel() {
        let c = [0.8, 0.4, 0.2];
        let cloud = GaussianCloud::from_primitives(vec![prim(0, [0.0, 0.0, 2.0], 0.0, c)]).unwrap();
        let cam = camera(16, 16);
        let img = render(&cloud, &DeformationField::identity(), &cam, [0.0; 3]).unwrap();
        // Centre pixel (8, 8) samples (8.5, 8.5) = (cx, cy): d = 0, alpha = 0.5.
        let px = img.get(8, 8);
        for k in 0..3 {
            assert!((px[k] - 0.5 * c[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn transparent_cloud_is_background() {
        let cloud = GaussianCloud::from_primitives(vec![
            prim(0, [0.0, 0.0, 2.0], -40.0, [1.0; 3]),
            prim(1, [0.1, 0.0, 3.0], -40.0, [0.5; 3]),
        ])
        .unwrap();
        let img = render(&cloud, &DeformationField::identity(), &camera(12, 12), [0.3, 0.3, 0.3]).unwrap();
        assert!(img.pixels.iter().all(|p| p.iter().all(|v| (v - 0.3).abs() < 1e-6)));
    }

    #[test]
    fn zero_adjoint_gives_zero_gradients() {
        let cloud = GaussianCloud::from_primitives(vec![prim(0, [0.0, 0.0, 2.0], 1.0, [0.3; 3])]).unwrap();
        let cam = camera(10, 10);
        let adj = ImageBuffer::filled(10, 10, [0.0; 3]);
        let g = render_backward(&cloud, &DeformationField::identity(), &cam, [0.0; 3], &adj).unwrap();
        assert!(g.gaussians.iter().all(GaussianGrad::is_zero));
    }

    #[test]
    fn centre_pixel_color_gradient_is_alpha() {
        let cloud = GaussianCloud::from_primitives(vec![prim(0, [0.0, 0.0, 2.0], 0.0, [0.3; 3])]).unwrap();
        let cam = camera(16, 16);
        let mut adj = ImageBuffer::filled(16, 16, [0.0; 3]);
        adj.set(8, 8, [1.0, 1.0, 1.0]);
        let g = render_backward(&cloud, &DeformationField::identity(), &cam, [0.0; 3], &adj).unwrap();
        for k in 0..3 {
            assert!((g.gaussians[0].color[k] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn storage_order_does_not_matter() {
        let a = prim(0, [0.05, 0.0, 2.0], 1.0, [1.0, 0.0, 0.0]);
        let b = prim(1, [-0.05, 0.02, 2.0], 1.0, [0.0, 1.0, 0.0]);
        let c = prim(2, [0.0, 0.05, 2.5], 0.5, [0.0, 0.0, 1.0]);
        let cam = camera(16, 16);
        let f = DeformationField::identity();
        let one = render(&GaussianCloud::from_primitives(vec![a.clone(), b.clone(), c.clone()]).unwrap(), &f, &cam, [0.0; 3]).unwrap();
        let two = render(&GaussianCloud::from_primitives(vec![c, a, b]).unwrap(), &f, &cam, [0.0; 3]).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn masked_render_rejects_misaligned_mask() {
        let cloud = GaussianCloud::from_primitives(vec![prim(0, [0.0, 0.0, 2.0], 0.0, [0.3; 3])]).unwrap();
        let mask = EditMask::uniform(&[5], true);
        let err = render_masked(&cloud, &DeformationField::identity(), &mask, &camera(8, 8), [0.0; 3]);
        assert!(matches!(err, Err(Error::MaskMisaligned(_))));
    }
}
