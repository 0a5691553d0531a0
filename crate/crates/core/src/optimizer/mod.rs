//! Scene fitting and edit optimisation.

pub mod adam;
pub mod checkpoint;

use std::collections::HashMap;

use rand::Rng as _;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasterizer::{render, render_backward, CameraPose, GaussianGrad, ImageBuffer, Rgb, SceneGradients};
use crate::rng::{self, Rng};
use crate::scene::{logit, DeformationField, DeformedAttributes, GaussianCloud, GaussianPrimitive};
use crate::selector::EditMask;
use crate::supervision::{idu_refresh, refresh_entries, EditOracle, SupervisionDataset, DEFAULT_IDU_PERIOD, DEFAULT_MAX_IN_FLIGHT};
use crate::tracking::TrackedCloud;
use adam::{adam_update, adam_update_slice, AdamParams, Moments};

/// Raw parameters per Gaussian: position 3, log_scale 3, rotation 4,
/// opacity logit 1, colour 3.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Initial position rate; decays exponentially to `position_final`.
    pub position: f64,
    pub position_final: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity_logit: f64,
    pub color: f64,
    pub field: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            position_final: 1.6e-6,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity_logit: 5e-2,
            color: 2.5e-3,
            field: 1e-3,
        }
    }
}

impl LearningRates {
    /// Position rate at `iteration` of `total`, log-linear between the
    /// initial and final values.
    pub fn position_at(&self, iteration: usize, total: usize) -> f64 {
        if total <= 1 || self.position <= 0.0 || self.position_final <= 0.0 {
            return self.position;
        }
        let f = (iteration as f64 / (total - 1) as f64).clamp(0.0, 1.0);
        (self.position.ln() * (1.0 - f) + self.position_final.ln() * f).exp()
    }

    fn per_slot(&self, iteration: usize, total: usize) -> [f64; PARAMS_PER_GAUSSIAN] {
        let p = self.position_at(iteration, total);
        let mut out = [0.0; PARAMS_PER_GAUSSIAN];
        out[0..3].fill(p);
        out[3..6].fill(self.log_scale);
        out[6..10].fill(self.rotation);
        out[10] = self.opacity_logit;
        out[11..14].fill(self.color);
        out
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.position,
            self.position_final,
            self.log_scale,
            self.rotation,
            self.opacity_logit,
            self.color,
            self.field,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("learning rates must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: LearningRates,
    pub adam: AdamParams,
    pub steps: usize,
    /// Iterations between densification passes; 0 disables densification.
    pub densify_interval: usize,
    /// No densification after this iteration.
    pub densify_until: usize,
    /// Mean screen-space position gradient norm (pixels, per unit of the
    /// per-pixel MSE) that triggers clone/split.
    pub grad_threshold: f64,
    /// Largest activated scale below which a triggered Gaussian is cloned
    /// rather than split.
    pub split_scale: f64,
    /// Activated opacity below which a Gaussian is pruned.
    pub prune_opacity: f64,
    pub idu_period: usize,
    pub max_in_flight: usize,
    pub seed: u64,
    pub background: Rgb,
    /// When false, mask-0 Gaussians are optimised too (ablation switch).
    pub freeze: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: LearningRates::default(),
            adam: AdamParams::default(),
            steps: 2000,
            densify_interval: 100,
            densify_until: 1000,
            grad_threshold: 5e-5,
            split_scale: 0.05,
            prune_opacity: 0.005,
            idu_period: DEFAULT_IDU_PERIOD,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            seed: 0,
            background: [0.0; 3],
            freeze: true,
        }
    }
}

impl OptimConfig {
    /// Defaults for editing: the shared deformation field stays fixed,
    /// since moving it would also move frozen Gaussians.
    pub fn edit_default() -> Self {
        OptimConfig {
            lr: LearningRates {
                field: 0.0,
                ..LearningRates::default()
            },
            ..OptimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        let thresholds = [self.grad_threshold, self.split_scale, self.prune_opacity];
        if thresholds.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Config("thresholds must be >= 0".into()));
        }
        if self.idu_period == 0 {
            return Err(Error::Config("idu_period must be at least 1".into()));
        }
        if !(self.adam.beta1 >= 0.0 && self.adam.beta1 < 1.0 && self.adam.beta2 >= 0.0 && self.adam.beta2 < 1.0) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub fn flatten_primitive(p: &GaussianPrimitive) -> [f64; PARAMS_PER_GAUSSIAN] {
    let mut out = [0.0; PARAMS_PER_GAUSSIAN];
    out[0..3].copy_from_slice(&p.position);
    out[3..6].copy_from_slice(&p.log_scale);
    out[6..10].copy_from_slice(&p.rotation);
    out[10] = p.opacity_logit;
    out[11..14].copy_from_slice(&p.color);
    out
}

pub fn unflatten_into(p: &mut GaussianPrimitive, v: &[f64; PARAMS_PER_GAUSSIAN]) {
    p.position.copy_from_slice(&v[0..3]);
    p.log_scale.copy_from_slice(&v[3..6]);
    p.rotation.copy_from_slice(&v[6..10]);
    p.opacity_logit = v[10];
    p.color.copy_from_slice(&v[11..14]);
}

pub fn flatten_grad(g: &GaussianGrad) -> [f64; PARAMS_PER_GAUSSIAN] {
    let mut out = [0.0; PARAMS_PER_GAUSSIAN];
    out[0..3].copy_from_slice(&g.position);
    out[3..6].copy_from_slice(&g.log_scale);
    out[6..10].copy_from_slice(&g.rotation);
    out[10] = g.opacity_logit;
    out[11..14].copy_from_slice(&g.color);
    out
}

/// Adam state for a cloud plus its deformation field. Gaussian moments are
/// keyed by id so they survive topology changes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState {
    /// Number of updates applied so far.
    pub step: u64,
    pub ids: Vec<u64>,
    pub gaussians: Moments,
    pub field: Moments,
}

impl OptimState {
    pub fn new(cloud: &GaussianCloud, field: &DeformationField) -> Self {
        OptimState {
            step: 0,
            ids: cloud.ids(),
            gaussians: Moments::zeros(PARAMS_PER_GAUSSIAN * cloud.len()),
            field: Moments::zeros(field.param_count()),
        }
    }

    /// Re-indexes Gaussian moments to the cloud's current order. Gaussians
    /// that are new get zero moments; removed ones are dropped.
    pub fn realign(&mut self, cloud: &GaussianCloud) {
        let old: HashMap<u64, usize> = self.ids.iter().enumerate().map(|(k, id)| (*id, k)).collect();
        let mut m = Moments::zeros(PARAMS_PER_GAUSSIAN * cloud.len());
        for (k, p) in cloud.primitives().iter().enumerate() {
            if let Some(&j) = old.get(&p.id) {
                let (dst, src) = (k * PARAMS_PER_GAUSSIAN, j * PARAMS_PER_GAUSSIAN);
                m.m[dst..dst + PARAMS_PER_GAUSSIAN].copy_from_slice(&self.gaussians.m[src..src + PARAMS_PER_GAUSSIAN]);
                m.v[dst..dst + PARAMS_PER_GAUSSIAN].copy_from_slice(&self.gaussians.v[src..src + PARAMS_PER_GAUSSIAN]);
            }
        }
        self.ids = cloud.ids();
        self.gaussians = m;
    }
}

/// MSE between the render at the entry's camera and its target, with
/// gradients of that loss.
pub fn edit_loss(
    cloud: &GaussianCloud,
    field: &DeformationField,
    camera: &CameraPose,
    target: &ImageBuffer,
    background: Rgb,
) -> Result<(f64, SceneGradients)> {
    if target.width != camera.width || target.height != camera.height {
        return Err(Error::DimensionMismatch(format!(
            "target {}x{} vs viewport {}x{}",
            target.width, target.height, camera.width, camera.height
        )));
    }
    let img = render(cloud, field, camera, background)?;
    let n = (3 * img.pixels.len()) as f64;
    let mut loss = 0.0;
    let mut adjoint = ImageBuffer::filled(img.width, img.height, [0.0; 3]);
    for ((a, r), t) in adjoint.pixels.iter_mut().zip(&img.pixels).zip(&target.pixels) {
        for c in 0..3 {
            let d = r[c] - t[c];
            loss += d * d;
            a[c] = 2.0 * d / n;
        }
    }
    loss /= n;
    let grads = render_backward(cloud, field, camera, background, &adjoint)?;
    Ok((loss, grads))
}

/// One Adam update. Gaussians with mask label 0 are skipped entirely when
/// `config.freeze` is set, so their parameters and moments never change.
pub fn step(
    cloud: &mut GaussianCloud,
    field: &mut DeformationField,
    mask: &EditMask,
    grads: &SceneGradients,
    state: &mut OptimState,
    config: &OptimConfig,
    iteration: usize,
) -> Result<()> {
    let n = cloud.len();
    if grads.gaussians.len() != n || mask.len() != n || state.ids.len() != n {
        return Err(Error::MaskMisaligned(format!(
            "cloud {n}, mask {}, gradients {}, optimiser state {}",
            mask.len(),
            grads.gaussians.len(),
            state.ids.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    let lrs = config.lr.per_slot(iteration, config.steps);
    for (k, p) in cloud.primitives_mut().iter_mut().enumerate() {
        if config.freeze && !mask.labels[k] {
            continue;
        }
        let g = flatten_grad(&grads.gaussians[k]);
        let mut v = flatten_primitive(p);
        let base = k * PARAMS_PER_GAUSSIAN;
        for s in 0..PARAMS_PER_GAUSSIAN {
            if lrs[s] > 0.0 {
                adam_update(
                    &mut v[s],
                    g[s],
                    &mut state.gaussians.m[base + s],
                    &mut state.gaussians.v[base + s],
                    lrs[s],
                    &config.adam,
                    t,
                );
            }
        }
        unflatten_into(p, &v);
    }
    if config.lr.field > 0.0 && field.param_count() > 0 {
        let mut flat = field.flat_params();
        adam_update_slice(&mut flat, &grads.field, &mut state.field, config.lr.field, &config.adam, t);
        field.set_flat_params(&flat)?;
    }
    Ok(())
}

/// Running mean of the screen-space position gradient norm per Gaussian,
/// counted over the iterations in which the Gaussian was visible.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn zeros(n: usize) -> Self {
        GradStats {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn accumulate(&mut self, screen_norm: &[f64]) {
        for ((s, c), g) in self.sum.iter_mut().zip(&mut self.count).zip(screen_norm) {
            if *g > 0.0 {
                *s += g;
                *c += 1;
            }
        }
    }

    pub fn mean(&self, k: usize) -> f64 {
        if self.count[k] == 0 {
            0.0
        } else {
            self.sum[k] / self.count[k] as f64
        }
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensifyAction {
    Clone,
    Split,
    Prune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Decides the action for each mask-1 Gaussian, in index order. Pruning
/// takes precedence over densification.
pub fn plan_densify(cloud: &GaussianCloud, mask: &EditMask, stats: &GradStats, config: &OptimConfig) -> Vec<(u64, DensifyAction)> {
    let mut out = Vec::new();
    for (k, p) in cloud.primitives().iter().enumerate() {
        if !mask.labels[k] {
            continue;
        }
        let opacity = crate::scene::sigmoid(p.opacity_logit);
        if opacity < config.prune_opacity {
            out.push((p.id, DensifyAction::Prune));
        } else if stats.mean(k) > config.grad_threshold {
            if p.max_scale() < config.split_scale {
                out.push((p.id, DensifyAction::Clone));
            } else {
                out.push((p.id, DensifyAction::Split));
            }
        }
    }
    out
}

/// Clones, splits and prunes mask-1 Gaussians through the tracking ops.
/// Mask-0 Gaussians are never touched.
pub fn densify_and_prune(tc: &mut TrackedCloud, stats: &GradStats, config: &OptimConfig, rng: &mut Rng) -> Result<DensifyReport> {
    if stats.len() != tc.len() {
        return Err(Error::MaskMisaligned(format!(
            "{} gradient statistics for {} gaussians",
            stats.len(),
            tc.len()
        )));
    }
    let plan = plan_densify(&tc.cloud, &tc.mask, stats, config);
    let mut report = DensifyReport::default();
    for (id, action) in plan {
        let k = tc.cloud.index_of(id).expect("planned ids are present");
        match action {
            DensifyAction::Clone => {
                tc.clone_op(k)?;
                report.cloned += 1;
            }
            DensifyAction::Split => {
                tc.split_op(k, rng)?;
                report.split += 1;
            }
            DensifyAction::Prune => {
                tc.prune_op(k)?;
                report.pruned += 1;
            }
        }
    }
    Ok(report)
}

/// Visits entries round-robin, reshuffling at the start of every epoch.
#[derive(Debug, Clone)]
pub struct EntrySampler {
    order: Vec<usize>,
    pos: usize,
}

impl EntrySampler {
    pub fn new(n: usize) -> Self {
        EntrySampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next(&mut self, rng: &mut Rng) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let k = self.order[self.pos];
        self.pos += 1;
        k
    }
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub tracked: TrackedCloud,
    pub field: DeformationField,
    pub trace: Vec<f64>,
    pub densify: DensifyReport,
    pub state: OptimState,
}

/// Runs the edit loop: refresh all targets once, then per iteration sample
/// an entry, take an Adam step on its loss, densify every
/// `densify_interval` iterations and refresh due targets every
/// `idu_period` iterations.
pub fn edit_optimize(
    tracked: TrackedCloud,
    field: DeformationField,
    dataset: &mut SupervisionDataset,
    oracle: &dyn EditOracle,
    config: &OptimConfig,
) -> Result<EditOutcome> {
    config.validate()?;
    tracked.check_invariants()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("supervision dataset is empty".into()));
    }
    dataset.validate()?;
    let mut tc = tracked;
    let mut field = field;
    let mut state = OptimState::new(&tc.cloud, &field);
    let mut stats = GradStats::zeros(tc.len());
    let mut rng_opt = rng::substream(config.seed, rng::OPTIMIZER);
    let mut rng_grid = rng::substream(config.seed, rng::GRID_SAMPLING);
    let mut rng_dens = rng::substream(config.seed, rng::DENSIFY);
    let mut sampler = EntrySampler::new(dataset.len());
    let mut trace = Vec::with_capacity(config.steps);
    let mut report = DensifyReport::default();
    let bg = config.background;

    if config.steps > 0 {
        let all: Vec<usize> = (0..dataset.len()).collect();
        refresh_entries(dataset, &all, oracle, &tc.cloud, &field, bg, 0, &mut rng_grid, config.max_in_flight)?;
    }
    for it in 0..config.steps {
        if it > 0 {
            idu_refresh(dataset, oracle, &tc.cloud, &field, bg, it, config.idu_period, &mut rng_grid)?;
        }
        let k = sampler.next(&mut rng_opt);
        let entry = &dataset.entries[k];
        let (loss, grads) = edit_loss(&tc.cloud, &field, &entry.camera, &entry.target, bg)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        trace.push(loss);
        stats.accumulate(&grads.screen_mean_norm);
        step(&mut tc.cloud, &mut field, &tc.mask, &grads, &mut state, config, it)?;
        let n = it + 1;
        if config.densify_interval > 0 && n % config.densify_interval == 0 && n <= config.densify_until {
            let r = densify_and_prune(&mut tc, &stats, config, &mut rng_dens)?;
            report.cloned += r.cloned;
            report.split += r.split;
            report.pruned += r.pruned;
            state.realign(&tc.cloud);
            stats = GradStats::zeros(tc.len());
        }
        tc.check_invariants()?;
    }
    Ok(EditOutcome {
        tracked: tc,
        field,
        trace,
        densify: report,
        state,
    })
}

/// One observed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub camera: CameraPose,
    pub image: ImageBuffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub optim: OptimConfig,
    /// Number of Gaussians in the random initialisation.
    pub initial_count: usize,
    /// Camera-space depth range for initial positions; derived from each
    /// camera's distance to the world origin when absent.
    pub init_depth: Option<[f64; 2]>,
    pub time_embed_order: usize,
    pub hidden: Vec<usize>,
    pub deformed: Vec<String>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            optim: OptimConfig::default(),
            initial_count: 64,
            init_depth: None,
            time_embed_order: crate::scene::DEFAULT_TIME_EMBED_ORDER,
            hidden: crate::scene::DEFAULT_HIDDEN.to_vec(),
            deformed: DeformedAttributes::default().names().into_iter().map(String::from).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub cloud: GaussianCloud,
    pub field: DeformationField,
    pub trace: Vec<f64>,
    /// Mean PSNR over the training frames after fitting.
    pub psnr: f64,
}

/// Seeded initialisation: Gaussians back-projected from random pixels of
/// random frames, coloured by the pixel they came from.
pub fn initial_cloud(frames: &[Observation], config: &FitConfig, rng: &mut Rng) -> GaussianCloud {
    let mut cloud = GaussianCloud::new();
    for _ in 0..config.initial_count {
        let f = &frames[rng.random_range(0..frames.len())];
        let cam = &f.camera;
        let (lo, hi) = match config.init_depth {
            Some([a, b]) => (a, b),
            None => {
                let d = cam.center().norm().max(1.0);
                (0.75 * d, 1.25 * d)
            }
        };
        let u = rng.random_range(0.0..cam.width as f64);
        let v = rng.random_range(0.0..cam.height as f64);
        let z = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let pc = nalgebra::Vector3::new((u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z);
        let pw = cam.rotation.transpose() * (pc - cam.translation);
        let footprint = 0.5 * ((cam.width * cam.height) as f64 / config.initial_count.max(1) as f64).sqrt();
        let s = (z / cam.fx * footprint).max(1e-4);
        let color = f.image.get((u as usize).min(cam.width - 1), (v as usize).min(cam.height - 1));
        cloud.push(GaussianPrimitive {
            id: 0,
            position: [pw.x, pw.y, pw.z],
            log_scale: [s.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(0.5),
            color: color.map(|c| c.clamp(0.0, 1.0)),
        });
    }
    cloud
}

/// Photometric fit of a cloud and deformation field to observed frames.
pub fn fit_scene(frames: &[Observation], config: &FitConfig) -> Result<FitOutcome> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("fit_scene needs at least one frame".into()));
    }
    let oc = &config.optim;
    oc.validate()?;
    for f in frames {
        f.camera.validate()?;
        if f.image.width != f.camera.width || f.image.height != f.camera.height {
            return Err(Error::DimensionMismatch("frame size differs from its camera viewport".into()));
        }
    }
    let mut init_rng = rng::substream(oc.seed, rng::FIT_INIT);
    let cloud = initial_cloud(frames, config, &mut init_rng);
    let attrs = DeformedAttributes::from_names(&config.deformed)?;
    let mut field = DeformationField::new(config.time_embed_order, attrs, &config.hidden, &mut init_rng);
    let mut tc = TrackedCloud::new(cloud.clone(), EditMask::for_cloud(&cloud, true))?;
    let mut state = OptimState::new(&tc.cloud, &field);
    let mut stats = GradStats::zeros(tc.len());
    let mut rng_opt = rng::substream(oc.seed, rng::OPTIMIZER);
    let mut rng_dens = rng::substream(oc.seed, rng::DENSIFY);
    let mut sampler = EntrySampler::new(frames.len());
    let mut trace = Vec::with_capacity(oc.steps);
    for it in 0..oc.steps {
        let f = &frames[sampler.next(&mut rng_opt)];
        let (loss, grads) = edit_loss(&tc.cloud, &field, &f.camera, &f.image, oc.background)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        trace.push(loss);
        stats.accumulate(&grads.screen_mean_norm);
        step(&mut tc.cloud, &mut field, &tc.mask, &grads, &mut state, oc, it)?;
        let n = it + 1;
        if oc.densify_interval > 0 && n % oc.densify_interval == 0 && n <= oc.densify_until {
            densify_and_prune(&mut tc, &stats, oc, &mut rng_dens)?;
            state.realign(&tc.cloud);
            stats = GradStats::zeros(tc.len());
        }
    }
    let psnr = training_psnr(&tc.cloud, &field, frames, oc.background)?;
    Ok(FitOutcome {
        cloud: tc.cloud,
        field,
        trace,
        psnr,
    })
}

pub fn training_psnr(cloud: &GaussianCloud, field: &DeformationField, frames: &[Observation], background: Rgb) -> Result<f64> {
    let mut total = 0.0;
    for f in frames {
        total += crate::metrics::psnr(&render(cloud, field, &f.camera, background)?, &f.image, None)?;
    }
    Ok(total / frames.len() as f64)
}
