//! Small procedural scenes with known ground truth, used by the demos,
//! tests and benchmarks.

use nalgebra::Vector3;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::rasterizer::{render, CameraPose, Mask2D, Rgb};
use crate::rng::{self, Rng};
use crate::scene::{logit, DeformationField, DeformedAttributes, GaussianCloud, GaussianPrimitive, TimeSample};
use crate::selector::SegTarget;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub name: String,
    pub cloud: GaussianCloud,
    pub field: DeformationField,
    pub cameras: Vec<CameraPose>,
    /// Ground-truth membership of the object to select or edit.
    pub truth: Vec<bool>,
    pub background: Rgb,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub center: [f64; 3],
    /// Standard deviation of member positions.
    pub spread: f64,
    /// Isotropic activated scale of each member.
    pub scale: f64,
    pub color: Rgb,
    pub count: usize,
    pub opacity: f64,
}

/// Gaussians scattered normally around `spec.center` with slightly jittered
/// colours.
pub fn blob(spec: &BlobSpec, rng: &mut Rng) -> Vec<GaussianPrimitive> {
    let pos = Normal::new(0.0, spec.spread).expect("finite spread");
    (0..spec.count)
        .map(|_| GaussianPrimitive {
            id: 0,
            position: [0, 1, 2].map(|a| spec.center[a] + pos.sample(rng)),
            log_scale: [spec.scale.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(spec.opacity),
            color: spec.color.map(|c| (c + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0)),
        })
        .collect()
}

/// Cameras on an arc in the `x`-`z` plane at `distance` from the origin,
/// facing it from the `-z` side. `yaw` holds the angles in radians.
pub fn arc_cameras(yaw: &[f64], distance: f64, focal: f64, width: usize, height: usize, times: &[f64]) -> Result<Vec<CameraPose>> {
    let mut out = Vec::new();
    for &t in times {
        let time = TimeSample::new(t)?;
        for &a in yaw {
            let eye = Vector3::new(distance * a.sin(), 0.0, -distance * a.cos());
            out.push(CameraPose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), focal, width, height, time));
        }
    }
    Ok(out)
}

fn assemble(name: &str, groups: Vec<(Vec<GaussianPrimitive>, bool)>, field: DeformationField, cameras: Vec<CameraPose>) -> ToyScene {
    let mut cloud = GaussianCloud::new();
    let mut truth = Vec::new();
    for (prims, member) in groups {
        for p in prims {
            cloud.push(p);
            truth.push(member);
        }
    }
    ToyScene {
        name: name.to_string(),
        cloud,
        field,
        cameras,
        truth,
        background: [0.0; 3],
    }
}

/// A blue blob `A` (the edit object) on the left and a green blob `B` on the
/// right, slightly closer to the cameras. The two stay apart on screen in
/// every view.
pub fn two_blob_scene(size: usize, seed: u64) -> Result<ToyScene> {
    let mut r = rng::substream(seed, "toy/two-blob");
    let a = blob(
        &BlobSpec {
            center: [-0.45, 0.0, 0.1],
            spread: 0.12,
            scale: 0.09,
            color: [0.15, 0.25, 0.9],
            count: 12,
            opacity: 0.9,
        },
        &mut r,
    );
    let b = blob(
        &BlobSpec {
            center: [0.45, 0.0, -0.1],
            spread: 0.12,
            scale: 0.09,
            color: [0.2, 0.85, 0.3],
            count: 12,
            opacity: 0.9,
        },
        &mut r,
    );
    let cams = arc_cameras(&[-0.25, -0.1, 0.0, 0.1, 0.25, 0.35], 3.0, size as f64 * 1.1, size, size, &[0.0])?;
    let mut s = assemble("two-blob", vec![(a, true), (b, false)], DeformationField::identity(), cams);
    s.background = [0.0; 3];
    Ok(s)
}

/// Three scenes for selector evaluation: side-by-side objects, objects at
/// different depths whose footprints touch, and a dynamic scene viewed at
/// several times.
pub fn selector_scenes(size: usize, seed: u64) -> Result<Vec<ToyScene>> {
    let focal = size as f64 * 1.1;
    let mut out = Vec::new();

    let mut r = rng::substream(seed, "toy/side-by-side");
    let spec = |center: [f64; 3], color: Rgb, count| BlobSpec {
        center,
        spread: 0.1,
        scale: 0.08,
        color,
        count,
        opacity: 0.85,
    };
    let groups = vec![
        (blob(&spec([-0.5, 0.0, 0.0], [0.9, 0.2, 0.2], 10), &mut r), true),
        (blob(&spec([0.5, 0.0, 0.0], [0.2, 0.3, 0.9], 10), &mut r), false),
        (blob(&spec([0.0, 0.45, 0.1], [0.8, 0.8, 0.2], 8), &mut r), false),
    ];
    let cams = arc_cameras(&[-0.3, 0.0, 0.3], 3.0, focal, size, size, &[0.0])?;
    out.push(assemble("side-by-side", groups, DeformationField::identity(), cams));

    let mut r = rng::substream(seed, "toy/layered");
    let groups = vec![
        (blob(&spec([0.0, 0.0, 0.3], [0.9, 0.5, 0.1], 12), &mut r), true),
        (
            blob(
                &BlobSpec {
                    spread: 0.07,
                    ..spec([0.62, 0.12, -0.4], [0.3, 0.8, 0.8], 6)
                },
                &mut r,
            ),
            false,
        ),
        (blob(&spec([-0.75, 0.45, 0.2], [0.6, 0.3, 0.9], 8), &mut r), false),
    ];
    let cams = arc_cameras(&[-0.3, -0.1, 0.1, 0.3], 3.0, focal, size, size, &[0.0])?;
    out.push(assemble("layered", groups, DeformationField::identity(), cams));

    let mut r = rng::substream(seed, "toy/dynamic");
    let groups = vec![
        (blob(&spec([-0.35, 0.1, 0.0], [0.9, 0.9, 0.9], 10), &mut r), true),
        (blob(&spec([0.4, -0.1, 0.0], [0.9, 0.3, 0.6], 10), &mut r), false),
    ];
    let mut field = DeformationField::new(2, DeformedAttributes::default(), &[8], &mut r);
    let last = field.layers.len() - 1;
    for w in &mut field.layers[last].weights {
        *w = r.random_range(-0.05..0.05);
    }
    let cams = arc_cameras(&[-0.2, 0.2], 3.0, focal, size, size, &[0.0, 0.5, 1.0])?;
    out.push(assemble("dynamic", groups, field, cams));
    Ok(out)
}

/// Visible weight above which a pixel belongs to the true object.
pub const SEGMENTATION_WEIGHT: f64 = 0.05;

/// Pixels where the true object is visible: its compositing weight in the
/// full render exceeds `threshold`.
pub fn visible_segmentation(scene: &ToyScene, cam: &CameraPose, threshold: f64) -> Result<Mask2D> {
    let mut painted = scene.cloud.clone();
    for (p, t) in painted.primitives_mut().iter_mut().zip(&scene.truth) {
        p.color = if *t { [1.0; 3] } else { [0.0; 3] };
    }
    let weight = render(&painted, &scene.field, cam, [0.0; 3])?;
    Ok(Mask2D {
        width: cam.width,
        height: cam.height,
        data: weight.pixels.iter().map(|w| w[0] > threshold).collect(),
    })
}

/// Ground-truth segmentation targets: the full render with the visible
/// footprint of the true object.
pub fn segmentation_targets(scene: &ToyScene, threshold: f64) -> Result<Vec<SegTarget>> {
    scene
        .cameras
        .iter()
        .map(|cam| {
            let frame = render(&scene.cloud, &scene.field, cam, scene.background)?;
            let mask = visible_segmentation(scene, cam, threshold)?;
            SegTarget::new(frame, mask, cam.clone())
        })
        .collect()
}

/// Intersection over union of two label sets.
pub fn label_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
