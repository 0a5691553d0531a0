//! Per-Gaussian edit-mask learning with Gumbel-Softmax relaxation.
//!
//! Each Gaussian carries two logits (class 0 = keep as is, class 1 = edit).
//! Training renders the scene with every opacity scaled by the sampled
//! edit-class weight and matches it against the segmented reference frame.
//! Scene parameters are never touched; only the logits move.

use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::adam::{adam_update_slice, AdamParams, Moments};
use crate::rasterizer::{prepare_view, CameraPose, ImageBuffer, Mask2D, PreparedView, Rgb};
use crate::rng::{self, Rng};
use crate::scene::{DeformationField, GaussianCloud};

/// Binary per-Gaussian edit labels with the logits they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EditMask {
    pub logits: Vec<[f64; 2]>,
    pub labels: Vec<bool>,
    pub gaussian_ids: Vec<u64>,
}

/// Index of the larger entry; ties go to class 0.
pub fn argmax2(v: [f64; 2]) -> usize {
    usize::from(v[1] > v[0])
}

impl EditMask {
    /// Uninformed mask: logits `(0, 0)`, every label 0.
    pub fn initial(ids: &[u64]) -> Self {
        EditMask {
            logits: vec![[0.0, 0.0]; ids.len()],
            labels: vec![false; ids.len()],
            gaussian_ids: ids.to_vec(),
        }
    }

    pub fn uniform(ids: &[u64], label: bool) -> Self {
        Self::from_labels(ids, &vec![label; ids.len()])
    }

    /// Mask with logits `(0, 1)` for label 1 and `(1, 0)` for label 0.
    pub fn from_labels(ids: &[u64], labels: &[bool]) -> Self {
        EditMask {
            logits: labels.iter().map(|&l| if l { [0.0, 1.0] } else { [1.0, 0.0] }).collect(),
            labels: labels.to_vec(),
            gaussian_ids: ids.to_vec(),
        }
    }

    pub fn for_cloud(cloud: &GaussianCloud, label: bool) -> Self {
        Self::uniform(&cloud.ids(), label)
    }

    pub fn len(&self) -> usize {
        self.gaussian_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussian_ids.is_empty()
    }

    /// Sets every label to the argmax of its logits.
    pub fn binarize(&mut self) {
        self.labels = self.logits.iter().map(|l| argmax2(*l) == 1).collect();
    }

    pub fn label_flags(&self) -> Vec<bool> {
        self.labels.clone()
    }

    pub fn edit_count(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    pub fn label_of(&self, id: u64) -> Option<bool> {
        self.gaussian_ids.iter().position(|g| *g == id).map(|i| self.labels[i])
    }

    pub fn validate(&self) -> Result<()> {
        if self.logits.len() != self.labels.len() || self.labels.len() != self.gaussian_ids.len() {
            return Err(Error::MaskMisaligned(format!(
                "logits {}, labels {}, ids {}",
                self.logits.len(),
                self.labels.len(),
                self.gaussian_ids.len()
            )));
        }
        Ok(())
    }
}

/// `softmax((logits + noise) / temperature)` for fixed noise.
pub fn gumbel_softmax(logits: [f64; 2], noise: [f64; 2], temperature: f64) -> [f64; 2] {
    let a = (logits[0] + noise[0]) / temperature;
    let b = (logits[1] + noise[1]) / temperature;
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let s = ea + eb;
    [ea / s, eb / s]
}

/// Draws Gumbel(0, 1) noise for one two-class sample.
pub fn gumbel_noise(rng: &mut Rng) -> [f64; 2] {
    let g = Gumbel::new(0.0, 1.0).expect("unit gumbel");
    [g.sample(rng), g.sample(rng)]
}

/// One relaxed categorical sample.
pub fn gumbel_sample(logits: [f64; 2], temperature: f64, rng: &mut Rng) -> Result<[f64; 2]> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidTemperature(temperature));
    }
    Ok(gumbel_softmax(logits, gumbel_noise(rng), temperature))
}

/// Hard one-hot forward value whose gradient is that of the soft sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StraightThrough {
    pub hard: [f64; 2],
    pub soft: [f64; 2],
}

pub fn straight_through(soft: [f64; 2]) -> StraightThrough {
    let mut hard = [0.0; 2];
    hard[argmax2(soft)] = 1.0;
    StraightThrough { hard, soft }
}

impl StraightThrough {
    /// Gradient with respect to the soft sample: identity pass-through.
    pub fn backward(&self, grad_hard: [f64; 2]) -> [f64; 2] {
        grad_hard
    }
}

/// Vector-Jacobian product of [`gumbel_softmax`] with respect to logits.
pub fn gumbel_softmax_backward(soft: [f64; 2], grad_soft: [f64; 2], temperature: f64) -> [f64; 2] {
    let dot = soft[0] * grad_soft[0] + soft[1] * grad_soft[1];
    [
        soft[0] * (grad_soft[0] - dot) / temperature,
        soft[1] * (grad_soft[1] - dot) / temperature,
    ]
}

/// An edited reference view with its binary segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTarget {
    pub frame: ImageBuffer,
    pub mask: Mask2D,
    pub camera: CameraPose,
}

impl SegTarget {
    pub fn new(frame: ImageBuffer, mask: Mask2D, camera: CameraPose) -> Result<Self> {
        mask.ensure_matches(&frame)?;
        if frame.width != camera.width || frame.height != camera.height {
            return Err(Error::DimensionMismatch(format!(
                "frame {}x{} vs camera {}x{}",
                frame.width, frame.height, camera.width, camera.height
            )));
        }
        Ok(SegTarget { frame, mask, camera })
    }

    /// `mask * frame`, the image the masked render is compared against.
    pub fn masked_frame(&self) -> ImageBuffer {
        self.frame.masked(&self.mask).expect("dimensions checked at construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorLoss {
    pub loss: f64,
    pub grad_logits: Vec<[f64; 2]>,
}

/// How each Gaussian's keep weight is drawn in one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Relaxation {
    pub temperature: f64,
    /// Use the straight-through hard sample in the forward pass.
    pub hard: bool,
}

fn loss_on_view(
    view: &PreparedView,
    logits: &[[f64; 2]],
    noise: &[[f64; 2]],
    target: &ImageBuffer,
    relax: Relaxation,
    background: Rgb,
) -> Result<SelectorLoss> {
    let samples: Vec<StraightThrough> = logits
        .iter()
        .zip(noise)
        .map(|(l, n)| straight_through(gumbel_softmax(*l, *n, relax.temperature)))
        .collect();
    let keep: Vec<f64> = samples
        .iter()
        .map(|s| if relax.hard { s.hard[1] } else { s.soft[1] })
        .collect();
    let render = view.composite(Some(&keep), background)?;
    render.ensure_same_size(target)?;
    let n = (3 * render.pixels.len()) as f64;
    let mut loss = 0.0;
    let mut adjoint = ImageBuffer::filled(render.width, render.height, [0.0; 3]);
    for ((a, r), t) in adjoint.pixels.iter_mut().zip(&render.pixels).zip(&target.pixels) {
        for c in 0..3 {
            let d = r[c] - t[c];
            loss += d * d;
            a[c] = 2.0 * d / n;
        }
    }
    loss /= n;
    let sg = view.composite_backward(Some(&keep), background, &adjoint)?;
    let d_keep = view.keep_gradients(&sg);
    let grad_logits = samples
        .iter()
        .zip(&d_keep)
        .map(|(s, g)| {
            // keep = sample[1]; the straight-through path reuses the soft Jacobian.
            let grad_soft = s.backward([0.0, *g]);
            gumbel_softmax_backward(s.soft, grad_soft, relax.temperature)
        })
        .collect();
    Ok(SelectorLoss { loss, grad_logits })
}

/// MSE between the keep-weighted render at the target view and the masked
/// reference frame, with gradients with respect to the logits only.
#[allow(clippy::too_many_arguments)]
pub fn selector_loss(
    cloud: &GaussianCloud,
    field: &DeformationField,
    logits: &[[f64; 2]],
    target: &SegTarget,
    relax: Relaxation,
    rng: &mut Rng,
    background: Rgb,
) -> Result<SelectorLoss> {
    if !(relax.temperature > 0.0) {
        return Err(Error::InvalidTemperature(relax.temperature));
    }
    if logits.len() != cloud.len() {
        return Err(Error::MaskMisaligned(format!(
            "{} logits for {} gaussians",
            logits.len(),
            cloud.len()
        )));
    }
    let view = prepare_view(cloud, field, &target.camera)?;
    let noise: Vec<[f64; 2]> = (0..logits.len()).map(|_| gumbel_noise(rng)).collect();
    loss_on_view(&view, logits, &noise, &target.masked_frame(), relax, background)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    /// Fraction of final steps that use the hard straight-through sample.
    pub hard_fraction: f64,
    pub seed: u64,
    pub background: Rgb,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            steps: 3000,
            learning_rate: 0.05,
            temperature_start: 1.0,
            temperature_end: 0.1,
            hard_fraction: 1.0 / 3.0,
            seed: 0,
            background: [0.0; 3],
        }
    }
}

impl SelectorConfig {
    /// Linear temperature annealing and hard-phase switch for step `i`.
    pub fn relaxation_at(&self, i: usize) -> Relaxation {
        let frac = if self.steps > 1 {
            i as f64 / (self.steps - 1) as f64
        } else {
            0.0
        };
        let temperature = self.temperature_start + (self.temperature_end - self.temperature_start) * frac;
        let hard_from = (self.steps as f64 * (1.0 - self.hard_fraction)).ceil() as usize;
        Relaxation {
            temperature,
            hard: i >= hard_from,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorOutcome {
    pub mask: EditMask,
    pub losses: Vec<f64>,
}

/// Optimises per-Gaussian logits against all targets and returns the
/// binarised mask along with the per-step mean loss.
pub fn train_selector(
    cloud: &GaussianCloud,
    field: &DeformationField,
    targets: &[SegTarget],
    config: &SelectorConfig,
) -> Result<SelectorOutcome> {
    if targets.is_empty() {
        return Err(Error::NoTargets);
    }
    if !(config.temperature_start > 0.0 && config.temperature_end > 0.0) {
        return Err(Error::InvalidTemperature(config.temperature_start.min(config.temperature_end)));
    }
    let views = targets
        .iter()
        .map(|t| prepare_view(cloud, field, &t.camera))
        .collect::<Result<Vec<_>>>()?;
    let frames: Vec<ImageBuffer> = targets.iter().map(SegTarget::masked_frame).collect();
    let mut mask = EditMask::initial(&cloud.ids());
    let n = cloud.len();
    let mut flat: Vec<f64> = vec![0.0; 2 * n];
    let mut moments = Moments::zeros(2 * n);
    let adam = AdamParams {
        eps: 1e-8,
        ..AdamParams::default()
    };
    let mut rng = rng::substream(config.seed, rng::SELECTOR);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let relax = config.relaxation_at(step);
        let logits: Vec<[f64; 2]> = flat.chunks(2).map(|c| [c[0], c[1]]).collect();
        let noise: Vec<[f64; 2]> = (0..n).map(|_| gumbel_noise(&mut rng)).collect();
        let mut grad = vec![0.0; 2 * n];
        let mut loss = 0.0;
        for (view, frame) in views.iter().zip(&frames) {
            let l = loss_on_view(view, &logits, &noise, frame, relax, config.background)?;
            loss += l.loss;
            for (g, gl) in grad.chunks_mut(2).zip(&l.grad_logits) {
                g[0] += gl[0];
                g[1] += gl[1];
            }
        }
        let k = targets.len() as f64;
        grad.iter_mut().for_each(|g| *g /= k);
        losses.push(loss / k);
        adam_update_slice(&mut flat, &grad, &mut moments, config.learning_rate, &adam, step as u64 + 1);
    }
    mask.logits = flat.chunks(2).map(|c| [c[0], c[1]]).collect();
    mask.binarize();
    Ok(SelectorOutcome { mask, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasterizer::render;
    use crate::scene::{GaussianPrimitive, TimeSample};
    use nalgebra::{Matrix3, Vector3};

    #[test]
    fn equal_logits_split_evenly() {
        let mut r = rng::seeded(11);
        let n = 10_000;
        let ones = (0..n)
            .filter(|_| argmax2(gumbel_sample([0.3, 0.3], 1.0, &mut r).unwrap()) == 1)
            .count();
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.02, "{freq}");
    }

    #[test]
    fn strong_logits_are_nearly_deterministic() {
        // Monte-Carlo: the soft class-0 weight exceeds 0.999 on every draw.
        let mut r = rng::seeded(12);
        let n = 20_000;
        let good = (0..n)
            .filter(|_| gumbel_sample([10.0, -10.0], 0.5, &mut r).unwrap()[0] > 0.999)
            .count();
        assert!(good as f64 / n as f64 > 0.999);
    }

    #[test]
    fn huge_temperature_flattens() {
        let mut r = rng::seeded(13);
        let s = gumbel_sample([2.0, -1.0], 1e6, &mut r).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-3 && (s[1] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn invalid_temperature() {
        let mut r = rng::seeded(0);
        assert!(matches!(gumbel_sample([0.0, 0.0], 0.0, &mut r), Err(Error::InvalidTemperature(_))));
        assert!(gumbel_sample([0.0, 0.0], -1.0, &mut r).is_err());
    }

    #[test]
    fn straight_through_forward() {
        assert_eq!(straight_through([0.7, 0.3]).hard, [1.0, 0.0]);
        assert_eq!(straight_through([0.5, 0.5]).hard, [1.0, 0.0]);
        assert_eq!(straight_through([0.2, 0.8]).hard, [0.0, 1.0]);
    }

    #[test]
    fn straight_through_gradient_equals_soft_gradient() {
        // Loss f(y) = 3 y0 - 2 y1^2 evaluated on the soft sample; the ST
        // gradient (soft Jacobian at the hard value's upstream) must equal
        // the finite-difference gradient of f(soft(logits)) when the upstream
        // gradient is taken at the soft point.
        let noise = [0.13, -0.4];
        let temp = 0.7;
        let logits = [0.2, -0.1];
        let f = |l: [f64; 2]| {
            let y = gumbel_softmax(l, noise, temp);
            3.0 * y[0] - 2.0 * y[1] * y[1]
        };
        let y = gumbel_softmax(logits, noise, temp);
        let st = straight_through(y);
        let upstream = [3.0, -4.0 * y[1]];
        let g = gumbel_softmax_backward(st.soft, st.backward(upstream), temp);
        let h = 1e-6;
        for k in 0..2 {
            let mut up = logits;
            up[k] += h;
            let mut dn = logits;
            dn[k] -= h;
            let fd = (f(up) - f(dn)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn soft_samples_sum_to_one() {
        let mut r = rng::seeded(3);
        for temp in [1e-3, 0.1, 1.0, 10.0, 1e4] {
            for _ in 0..100 {
                let s = gumbel_sample([1.5, -2.0], temp, &mut r).unwrap();
                assert!((s[0] + s[1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn binarize_is_idempotent_argmax() {
        let mut m = EditMask::initial(&[1, 2, 3, 4]);
        m.logits = vec![[0.0, 1.0], [1.0, 0.0], [0.5, 0.5], [-1.0, -0.5]];
        m.binarize();
        assert_eq!(m.labels, vec![true, false, false, true]);
        let snapshot = m.clone();
        m.binarize();
        assert_eq!(m, snapshot);
    }

    fn cam() -> CameraPose {
        CameraPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            fx: 24.0,
            fy: 24.0,
            cx: 12.0,
            cy: 12.0,
            width: 24,
            height: 24,
            time: TimeSample::default(),
        }
    }

    fn two_blobs() -> GaussianCloud {
        let mk = |id, x: f64, color| GaussianPrimitive {
            id,
            position: [x, 0.0, 3.0],
            log_scale: [(0.12f64).ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 3.0,
            color,
        };
        GaussianCloud::from_primitives(vec![mk(0, -0.5, [0.9, 0.2, 0.1]), mk(1, 0.5, [0.1, 0.3, 0.9])]).unwrap()
    }

    #[test]
    fn identity_masks_reduce_to_plain_mse() {
        let cloud = two_blobs();
        let field = DeformationField::identity();
        let frame = render(&cloud, &field, &cam(), [0.0; 3]).unwrap();
        let target = SegTarget::new(frame.clone(), Mask2D::filled(24, 24, true), cam()).unwrap();
        let mut r = rng::seeded(1);
        let hard = Relaxation {
            temperature: 1.0,
            hard: true,
        };
        let l = selector_loss(&cloud, &field, &[[-40.0, 40.0]; 2], &target, hard, &mut r, [0.0; 3]).unwrap();
        assert!(l.loss < 1e-20);

        // Both sides empty: the loss is the background energy.
        let target = SegTarget::new(frame, Mask2D::filled(24, 24, false), cam()).unwrap();
        let bg = [0.2, 0.4, 0.1];
        let l = selector_loss(&cloud, &field, &[[40.0, -40.0]; 2], &target, hard, &mut r, bg).unwrap();
        let want = (0.04 + 0.16 + 0.01) / 3.0;
        assert!((l.loss - want).abs() < 1e-12);
    }

    #[test]
    fn gradient_sign_follows_segmentation() {
        let cloud = two_blobs();
        let field = DeformationField::identity();
        let frame = render(&cloud, &field, &cam(), [0.0; 3]).unwrap();
        // Blob A projects left of centre.
        let seg = Mask2D::from_fn(24, 24, |x, _| x < 12);
        let target = SegTarget::new(frame, seg, cam()).unwrap();
        let view = prepare_view(&cloud, &field, &target.camera).unwrap();
        let soft = Relaxation {
            temperature: 1.0,
            hard: false,
        };
        let l = loss_on_view(&view, &[[0.0, 0.0]; 2], &[[0.0, 0.0]; 2], &target.masked_frame(), soft, [0.0; 3]).unwrap();
        // Descending the gradient raises class 1 for A and class 0 for B.
        assert!(l.grad_logits[0][1] < 0.0 && l.grad_logits[0][0] > 0.0);
        assert!(l.grad_logits[1][1] > 0.0 && l.grad_logits[1][0] < 0.0);
    }

    #[test]
    fn no_steps_keeps_tie_rule() {
        let cloud = two_blobs();
        let field = DeformationField::identity();
        let frame = render(&cloud, &field, &cam(), [0.0; 3]).unwrap();
        let target = SegTarget::new(frame, Mask2D::filled(24, 24, true), cam()).unwrap();
        let cfg = SelectorConfig {
            steps: 0,
            ..SelectorConfig::default()
        };
        let out = train_selector(&cloud, &field, &[target], &cfg).unwrap();
        assert_eq!(out.mask.labels, vec![false, false]);
        assert!(matches!(train_selector(&cloud, &field, &[], &cfg), Err(Error::NoTargets)));
    }

    #[test]
    fn annealing_schedule() {
        let cfg = SelectorConfig {
            steps: 301,
            ..SelectorConfig::default()
        };
        assert_eq!(cfg.relaxation_at(0).temperature, 1.0);
        assert!((cfg.relaxation_at(300).temperature - 0.1).abs() < 1e-12);
        assert!(!cfg.relaxation_at(200).hard);
        assert!(cfg.relaxation_at(201).hard);
    }
}
