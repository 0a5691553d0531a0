//! Reference implementations and fixtures shared by the integration tests
//! and the acceptance runner.

#![allow(dead_code)]

pub mod mock;

use gsedit_core::optimizer::{flatten_grad, flatten_primitive, unflatten_into, PARAMS_PER_GAUSSIAN};
use gsedit_core::rasterizer::{prepare_view, render, render_backward, CameraPose, ImageBuffer, Mask2D};
use gsedit_core::rng::{self, Rng};
use gsedit_core::scene::{logit, DeformationField, DeformedAttributes, GaussianCloud, GaussianPrimitive, TimeSample};
use nalgebra::Vector3;
use rand::Rng as _;

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn front_camera(size: usize, t: f64) -> CameraPose {
    CameraPose::look_at(
        Vector3::new(0.0, 0.0, -3.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        size as f64 * 1.2,
        size,
        size,
        TimeSample::new(t).unwrap(),
    )
}

/// Up to `max` Gaussians well inside the frustum, with random anisotropic
/// scales, rotations, opacities and colours strictly inside `(0, 1)`.
pub fn random_small_scene(seed: u64, max: usize) -> GaussianCloud {
    let mut r = rng::seeded(seed);
    let n = r.random_range(1..=max);
    let mut c = GaussianCloud::new();
    for _ in 0..n {
        let q = [0; 4].map(|_| r.random_range(-1.0..1.0f64));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(0.3);
        c.push(GaussianPrimitive {
            id: 0,
            position: [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.3..0.3)],
            log_scale: [0; 3].map(|_| r.random_range(0.12f64..0.3).ln()),
            rotation: q.map(|v| v / norm),
            opacity_logit: logit(r.random_range(0.3..0.8)),
            color: [0; 3].map(|_| r.random_range(0.15..0.85)),
        });
    }
    c
}

/// Small field with random non-zero output weights so offsets matter.
pub fn random_small_field(seed: u64) -> DeformationField {
    let mut r = rng::substream(seed, "test-field");
    let mut f = DeformationField::new(2, DeformedAttributes::default(), &[8], &mut r);
    let last = f.layers.len() - 1;
    for w in &mut f.layers[last].weights {
        *w = r.random_range(-0.05..0.05);
    }
    f
}

pub fn random_adjoint(w: usize, h: usize, rng: &mut Rng) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, |_, _| [0; 3].map(|_| rng.random_range(-1.0..1.0)))
}

fn objective(cloud: &GaussianCloud, field: &DeformationField, cam: &CameraPose, adj: &ImageBuffer) -> f64 {
    let img = render(cloud, field, cam, [0.1, 0.2, 0.3]).unwrap();
    img.pixels
        .iter()
        .zip(&adj.pixels)
        .map(|(p, a)| p[0] * a[0] + p[1] * a[1] + p[2] * a[2])
        .sum()
}

/// Relative error with a floor so that gradients that are both tiny do not
/// register as failures.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Central differences of `sum(adjoint * render)` against
/// `render_backward` for every Gaussian and field parameter. Parameters
/// whose perturbation changes the set of visible splats are skipped.
pub fn check_gradients(cloud: &GaussianCloud, field: &DeformationField, cam: &CameraPose, adj: &ImageBuffer, h: f64, floor: f64) -> GradCheck {
    let g = render_backward(cloud, field, cam, [0.1, 0.2, 0.3], adj).unwrap();
    let visible = |c: &GaussianCloud, f: &DeformationField| prepare_view(c, f, cam).unwrap().splats().map(|(i, _)| i).collect::<Vec<_>>();
    let base_visible = visible(cloud, field);
    let mut out = GradCheck::default();
    let record = |a: f64, n: f64, what: String, out: &mut GradCheck| {
        let e = rel_err(a, n, floor);
        out.checked += 1;
        if e > out.worst {
            out.worst = e;
            out.worst_at = format!("{what}: analytic {a:e} numeric {n:e}");
        }
    };
    for k in 0..cloud.len() {
        let analytic = flatten_grad(&g.gaussians[k]);
        for s in 0..PARAMS_PER_GAUSSIAN {
            let eval = |delta: f64| {
                let mut c = cloud.clone();
                let mut v = flatten_primitive(&c.primitives()[k]);
                v[s] += delta;
                unflatten_into(&mut c.primitives_mut()[k], &v);
                (objective(&c, field, cam, adj), visible(&c, field))
            };
            let (lp, vp) = eval(h);
            let (lm, vm) = eval(-h);
            if vp != base_visible || vm != base_visible {
                out.skipped += 1;
                continue;
            }
            record(analytic[s], (lp - lm) / (2.0 * h), format!("gaussian {k} slot {s}"), &mut out);
        }
    }
    let flat = field.flat_params();
    for j in 0..flat.len() {
        let eval = |delta: f64| {
            let mut f = field.clone();
            let mut p = flat.clone();
            p[j] += delta;
            f.set_flat_params(&p).unwrap();
            (objective(cloud, &f, cam, adj), visible(cloud, &f))
        };
        let (lp, vp) = eval(h);
        let (lm, vm) = eval(-h);
        if vp != base_visible || vm != base_visible {
            out.skipped += 1;
            continue;
        }
        record(g.field[j], (lp - lm) / (2.0 * h), format!("field param {j}"), &mut out);
    }
    out
}

/// List-based model of the tracking rules: entries are `(id, label)` in
/// storage order; new entries are appended with consecutive fresh ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTracker {
    pub entries: Vec<(u64, bool)>,
    pub next_id: u64,
}

impl ReferenceTracker {
    pub fn new(labels: &[bool]) -> Self {
        ReferenceTracker {
            entries: labels.iter().enumerate().map(|(i, l)| (i as u64, *l)).collect(),
            next_id: labels.len() as u64,
        }
    }

    fn fresh(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id - 1
    }

    pub fn clone_at(&mut self, i: usize) {
        let label = self.entries[i].1;
        let id = self.fresh();
        self.entries.push((id, label));
    }

    /// Both children take the parent's label; the parent's entry goes away.
    pub fn split_at(&mut self, i: usize) {
        let (_, label) = self.entries.remove(i);
        let a = self.fresh();
        let b = self.fresh();
        self.entries.push((a, label));
        self.entries.push((b, label));
    }

    pub fn prune_at(&mut self, i: usize) {
        self.entries.remove(i);
    }

    pub fn sorted(&self) -> Vec<(u64, bool)> {
        let mut v = self.entries.clone();
        v.sort();
        v
    }
}

/// PSNR by a plain double loop over pixels and channels.
pub fn naive_psnr(a: &ImageBuffer, b: &ImageBuffer, region: Option<&Mask2D>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            if region.map_or(true, |r| r.get(x, y)) {
                let (p, q) = (a.get(x, y), b.get(x, y));
                for c in 0..3 {
                    sum += (p[c] - q[c]) * (p[c] - q[c]);
                    n += 1;
                }
            }
        }
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        99.0
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// SSIM by explicit loops over every 8x8 window whose centre pixel
/// (top-left + 4) lies in the region.
pub fn naive_ssim(a: &ImageBuffer, b: &ImageBuffer, region: Option<&Mask2D>) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(a.height - 8) {
        for x0 in 0..=(a.width - 8) {
            if !region.map_or(true, |r| r.get(x0 + 4, y0 + 4)) {
                continue;
            }
            let mut xs = Vec::with_capacity(64);
            let mut ys = Vec::with_capacity(64);
            for y in y0..y0 + 8 {
                for x in x0..x0 + 8 {
                    xs.push(luma(a.get(x, y)));
                    ys.push(luma(b.get(x, y)));
                }
            }
            let mx = xs.iter().sum::<f64>() / 64.0;
            let my = ys.iter().sum::<f64>() / 64.0;
            let vx = xs.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / 64.0;
            let vy = ys.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / 64.0;
            let cov = xs.iter().zip(&ys).map(|(u, v)| (u - mx) * (v - my)).sum::<f64>() / 64.0;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn random_image(w: usize, h: usize, rng: &mut Rng) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, |_, _| [0; 3].map(|_| rng.random::<f64>()))
}

/// Image whose values are exact multiples of 1/255, so it survives an
/// 8-bit PNG round trip bit for bit.
pub fn quantised_image(w: usize, h: usize, rng: &mut Rng) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, |_, _| [0; 3].map(|_| rng.random_range(0..=255u8) as f64 / 255.0))
}

/// Scalar Adam with bias correction, written out longhand.
pub fn reference_adam(grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, start: f64) -> Vec<f64> {
    let (mut x, mut m, mut v) = (start, 0.0, 0.0);
    let mut out = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
        out.push(x);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Clone(usize),
    Split(usize),
    Prune(usize),
}

/// Random op sequence of length `len` over a cloud starting at `n0`
/// entries; indices are valid for the size at each step and prunes are
/// skipped when only one entry is left.
pub fn random_ops(n0: usize, len: usize, rng: &mut Rng) -> Vec<Op> {
    let mut n = n0;
    let mut ops = Vec::with_capacity(len);
    for _ in 0..len {
        let i = rng.random_range(0..n);
        let op = match rng.random_range(0..3) {
            0 => Op::Clone(i),
            1 => Op::Split(i),
            _ if n > 1 => Op::Prune(i),
            _ => Op::Clone(i),
        };
        n = match op {
            Op::Clone(_) | Op::Split(_) => n + 1,
            Op::Prune(_) => n - 1,
        };
        ops.push(op);
    }
    ops
}

pub fn line_cloud(n: usize) -> GaussianCloud {
    let mut c = GaussianCloud::new();
    for k in 0..n {
        c.push(GaussianPrimitive {
            id: 0,
            position: [k as f64 * 0.1, 0.0, 0.0],
            log_scale: [(0.05f64).ln(), (0.03f64).ln(), (0.02f64).ln()],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            color: [0.5; 3],
        });
    }
    c
}

/// Applies a random sequence to both the real tracker and the list model
/// and compares `(id, label)` multisets after every op, then checks that
/// replaying the op log from the start reproduces the final state.
pub fn tracking_case(seed: u64, max_len: usize) -> Result<(), String> {
    use gsedit_core::selector::EditMask;
    use gsedit_core::tracking::TrackedCloud;
    let mut r = rng::seeded(seed);
    let n0 = r.random_range(1..=12);
    let labels: Vec<bool> = (0..n0).map(|_| r.random_bool(0.5)).collect();
    let cloud = line_cloud(n0);
    let mask = EditMask::from_labels(&cloud.ids(), &labels);
    let mut tc = TrackedCloud::new(cloud, mask).map_err(|e| e.to_string())?;
    let start = tc.checkpoint();
    let mut model = ReferenceTracker::new(&labels);
    let len = r.random_range(0..=max_len);
    for (step, op) in random_ops(n0, len, &mut r).into_iter().enumerate() {
        match op {
            Op::Clone(i) => {
                tc.clone_op(i).map_err(|e| e.to_string())?;
                model.clone_at(i);
            }
            Op::Split(i) => {
                tc.split_op(i, &mut r).map_err(|e| e.to_string())?;
                model.split_at(i);
            }
            Op::Prune(i) => {
                tc.prune_op(i).map_err(|e| e.to_string())?;
                model.prune_at(i);
            }
        }
        tc.check_invariants().map_err(|e| format!("step {step}: {e}"))?;
        let got: Vec<(u64, bool)> = tc.mask.gaussian_ids.iter().copied().zip(tc.mask.labels.iter().copied()).collect();
        if got != model.entries {
            return Err(format!("seed {seed} step {step} {op:?}: tracker {got:?} model {:?}", model.entries));
        }
        if tc.cloud.ids() != tc.mask.gaussian_ids {
            return Err(format!("seed {seed} step {step}: cloud ids diverge from mask ids"));
        }
    }
    let mut replayed = start;
    replayed.replay(&tc.op_log).map_err(|e| e.to_string())?;
    if replayed.cloud != tc.cloud || replayed.mask != tc.mask {
        return Err(format!("seed {seed}: replay differs"));
    }
    Ok(())
}

/// Random image pair (the second a noisy copy of the first) with a random
/// region covering at least one SSIM window centre.
pub fn metrics_pair(seed: u64) -> (ImageBuffer, ImageBuffer, Mask2D) {
    let mut r = rng::seeded(seed);
    let (w, h) = (r.random_range(8..40), r.random_range(8..40));
    let a = random_image(w, h, &mut r);
    let noise = r.random_range(0.0..0.3);
    let b = ImageBuffer::from_fn(w, h, |x, y| a.get(x, y).map(|v| (v + noise * r.random_range(-1.0..1.0f64)).clamp(0.0, 1.0)));
    let p = r.random_range(0.2..0.9);
    let mut region = Mask2D::from_fn(w, h, |_, _| r.random_bool(p));
    region.data[4 * w + 4] = true;
    (a, b, region)
}

/// Largest absolute deviations `(psnr, ssim)` of the library metrics from
/// the naive loops, with and without a region.
pub fn metrics_deviation(seed: u64) -> (f64, f64) {
    use gsedit_core::metrics::{psnr, ssim};
    let (a, b, region) = metrics_pair(seed);
    let mut dp: f64 = 0.0;
    let mut ds: f64 = 0.0;
    for reg in [None, Some(&region)] {
        dp = dp.max((psnr(&a, &b, reg).unwrap() - naive_psnr(&a, &b, reg)).abs());
        ds = ds.max((ssim(&a, &b, reg).unwrap() - naive_ssim(&a, &b, reg)).abs());
    }
    (dp, ds)
}

pub struct FreezeRun {
    /// Mean PSNR of the non-edited region, edited render vs original.
    pub non_edited_psnr: f64,
    /// Mean PSNR of the edited render vs the oracle target inside the region.
    pub masked_psnr: f64,
    /// Every mask-0 primitive of the input survives bit for bit.
    pub frozen_bitwise: bool,
    pub trace: Vec<f64>,
}

/// Recolours the labelled blob of the two-blob toy scene with the
/// synthetic oracle and scores the result.
pub fn two_blob_edit(size: usize, steps: usize, freeze: bool) -> FreezeRun {
    use gsedit_core::optimizer::OptimConfig;
    use gsedit_core::pipeline::{edit_regions, metrics_report, render_all, run_task};
    use gsedit_core::planner::{AtomicTask, TaskCategory};
    use gsedit_core::selector::EditMask;
    use gsedit_core::supervision::SyntheticOracle;
    use gsedit_core::toy::two_blob_scene;
    use gsedit_core::tracking::TrackedCloud;

    let s = two_blob_scene(size, 0).unwrap();
    let mask = EditMask::from_labels(&s.cloud.ids(), &s.truth);
    let tc = TrackedCloud::new(s.cloud.clone(), mask).unwrap();
    let task = AtomicTask::new(TaskCategory::ColorAdjustment, "Make the blob red", "blob", None);
    let oracle = SyntheticOracle::new(task, 0);
    let cfg = OptimConfig {
        steps,
        freeze,
        ..OptimConfig::edit_default()
    };
    let before = render_all(&tc, &s.field, &s.cameras, s.background).unwrap();
    let regions = edit_regions(&tc, &s.field, &s.cameras).unwrap();
    let r = run_task(tc.clone(), s.field.clone(), &s.cameras, &oracle, &cfg).unwrap();
    let after = render_all(&r.tracked, &r.field, &s.cameras, s.background).unwrap();
    let rep = metrics_report(&before, &after, &regions).unwrap();
    let masked = r
        .dataset
        .entries
        .iter()
        .enumerate()
        .map(|(k, e)| gsedit_core::metrics::psnr(&after[k], &e.target, Some(&regions[k])).unwrap())
        .sum::<f64>()
        / s.cameras.len() as f64;
    let frozen_bitwise = tc
        .cloud
        .primitives()
        .iter()
        .zip(&tc.mask.labels)
        .filter(|(_, l)| !**l)
        .all(|(p, _)| r.tracked.cloud.primitives().iter().any(|q| q == p));
    FreezeRun {
        non_edited_psnr: rep.non_edited.map_or(f64::NAN, |s| s.psnr),
        masked_psnr: masked,
        frozen_bitwise,
        trace: r.trace,
    }
}

/// Three opaque coloured Gaussians seen from three cameras at t = 0.
pub fn three_gaussian_frames(size: usize) -> Vec<gsedit_core::optimizer::Observation> {
    use gsedit_core::optimizer::Observation;
    let mut cloud = GaussianCloud::new();
    for (pos, col) in [
        ([-0.4, 0.0, 0.0], [0.9, 0.2, 0.2]),
        ([0.4, 0.1, 0.1], [0.2, 0.9, 0.3]),
        ([0.0, -0.3, -0.1], [0.2, 0.3, 0.9]),
    ] {
        cloud.push(GaussianPrimitive {
            id: 0,
            position: pos,
            log_scale: [0.2f64.ln(), 0.15f64.ln(), 0.2f64.ln()],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(0.9),
            color: col,
        });
    }
    let cams = gsedit_core::toy::arc_cameras(&[-0.3, 0.0, 0.3], 3.0, size as f64 * 1.1, size, size, &[0.0]).unwrap();
    cams.iter()
        .map(|c| Observation {
            camera: c.clone(),
            image: render(&cloud, &DeformationField::identity(), c, [0.0; 3]).unwrap(),
        })
        .collect()
}

/// IoU between the learned mask and the ground-truth labels of a toy scene.
pub fn selector_iou(scene: &gsedit_core::toy::ToyScene, steps: usize, seed: u64) -> f64 {
    use gsedit_core::selector::{train_selector, SelectorConfig};
    use gsedit_core::toy::{label_iou, segmentation_targets, SEGMENTATION_WEIGHT};
    let targets = segmentation_targets(scene, SEGMENTATION_WEIGHT).unwrap();
    let cfg = SelectorConfig {
        steps,
        seed,
        background: scene.background,
        ..SelectorConfig::default()
    };
    let out = train_selector(&scene.cloud, &scene.field, &targets, &cfg).unwrap();
    label_iou(&out.mask.labels, &scene.truth)
}

/// Largest gap between the empirical argmax frequency of `draws` Gumbel
/// samples and `softmax(logits)`, over a few fixed logit pairs.
pub fn gumbel_frequency_gap(draws: usize, seed: u64) -> f64 {
    use gsedit_core::selector::{argmax2, gumbel_sample};
    let mut r = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    for logits in [[0.0f64, 0.0], [0.0, 1.0], [1.5, -0.5], [-2.0, 1.0], [0.3, 0.2]] {
        let p1 = 1.0 / (1.0 + (logits[0] - logits[1]).exp());
        let hits = (0..draws)
            .filter(|_| argmax2(gumbel_sample(logits, 0.5, &mut r).unwrap()) == 1)
            .count();
        worst = worst.max((hits as f64 / draws as f64 - p1).abs());
    }
    worst
}
