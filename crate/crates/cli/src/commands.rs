use std::path::{Path, PathBuf};

use gsedit_core::config::{rescale_camera, ProjectConfig};
use gsedit_core::io;
use gsedit_core::optimizer::{fit_scene, FitConfig, Observation, OptimConfig};
use gsedit_core::pipeline::{edit_regions, metrics_report, run_edit, single_task_plan};
use gsedit_core::planner::{classify, decompose, BackendKind, EditPlan};
use gsedit_core::rasterizer::{self, CameraPose, Mask2D};
use gsedit_core::scene::{DeformationField, TimeSample};
use gsedit_core::selector::{train_selector, EditMask, SegTarget};
use gsedit_core::toy::{arc_cameras, two_blob_scene, visible_segmentation, SEGMENTATION_WEIGHT};
use gsedit_core::tracking::{read_op_log, TrackedCloud};
use gsedit_core::{rng, Error, Result};
use rand::Rng as _;
use serde_json::{json, Value};

fn out_dir(cfg: &ProjectConfig) -> Result<&Path> {
    let out = cfg.require("out", &cfg.paths.out)?;
    std::fs::create_dir_all(out).map_err(|e| Error::InvalidInput(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn cameras(cfg: &ProjectConfig) -> Result<Vec<CameraPose>> {
    let cams = io::load_cameras(cfg.require("cameras", &cfg.paths.cameras)?)?;
    if cams.is_empty() {
        return Err(Error::InvalidInput("camera list is empty".into()));
    }
    Ok(match cfg.resolution {
        Some([w, h]) => cams.iter().map(|c| rescale_camera(c, w, h)).collect(),
        None => cams,
    })
}

fn scene(cfg: &ProjectConfig) -> Result<(gsedit_core::scene::GaussianCloud, DeformationField)> {
    io::load_scene(cfg.require("scene", &cfg.paths.scene)?)
}

fn tracked(cfg: &ProjectConfig) -> Result<(TrackedCloud, DeformationField)> {
    let (cloud, field) = scene(cfg)?;
    let mask = io::load_mask(cfg.require("mask", &cfg.paths.mask)?)?;
    Ok((TrackedCloud::new(cloud, mask)?, field))
}

fn optim(cfg: &ProjectConfig, steps: Option<usize>) -> OptimConfig {
    let mut o = cfg.optim.clone();
    o.background = cfg.background;
    if let Some(s) = steps {
        o.steps = s;
    }
    o
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).display().to_string()
}

pub fn toy(cfg: &ProjectConfig, size: usize) -> Result<Value> {
    if size < gsedit_core::config::MIN_RESOLUTION {
        return Err(Error::Config(format!("toy size {size} is below the minimum resolution")));
    }
    let out = out_dir(cfg)?;
    let s = two_blob_scene(size, cfg.seed)?;
    let paths = [
        out.join("scene.json"),
        out.join("cameras.json"),
        out.join("mask.json"),
        out.join("frames"),
        out.join("masks"),
    ];
    io::save_scene(&paths[0], &s.cloud, &s.field)?;
    io::save_cameras(&paths[1], &s.cameras)?;
    io::save_mask(&paths[2], &EditMask::from_labels(&s.cloud.ids(), &s.truth))?;
    let frames = s
        .cameras
        .iter()
        .map(|c| rasterizer::render(&s.cloud, &s.field, c, s.background))
        .collect::<Result<Vec<_>>>()?;
    io::save_frames(&paths[3], &frames)?;
    let masks = s
        .cameras
        .iter()
        .map(|c| visible_segmentation(&s, c, SEGMENTATION_WEIGHT))
        .collect::<Result<Vec<Mask2D>>>()?;
    io::save_mask_frames(&paths[4], &masks)?;

    let mut project = ProjectConfig::default();
    project.set_seed(cfg.seed);
    project.paths.scene = Some(PathBuf::from("scene.json"));
    project.paths.cameras = Some(PathBuf::from("cameras.json"));
    project.paths.mask = Some(PathBuf::from("mask.json"));
    project.paths.frames = Some(PathBuf::from("frames"));
    project.paths.masks = Some(PathBuf::from("masks"));
    project.paths.out = Some(PathBuf::from("out"));
    let config_path = out.join("gsedit.toml");
    io::write_bytes(&config_path, project.to_toml()?.as_bytes())?;
    Ok(json!({
        "scene": paths[0],
        "gaussians": s.cloud.len(),
        "edit_gaussians": s.truth.iter().filter(|t| **t).count(),
        "cameras": s.cameras.len(),
        "config": config_path,
        "files": paths.iter().map(|p| rel(p, out)).collect::<Vec<_>>(),
    }))
}

pub fn fit(cfg: &ProjectConfig, steps: Option<usize>, initial_count: usize, hidden: Vec<usize>, time_embed_order: usize) -> Result<Value> {
    let cams = cameras(cfg)?;
    let images = io::load_frames(cfg.require("frames", &cfg.paths.frames)?, cams.len())?;
    let frames: Vec<Observation> = cams
        .into_iter()
        .zip(images)
        .map(|(camera, image)| Observation { camera, image })
        .collect();
    let mut optim = OptimConfig {
        seed: cfg.seed,
        background: cfg.background,
        ..OptimConfig::default()
    };
    if let Some(s) = steps {
        optim.steps = s;
    }
    let fc = FitConfig {
        optim,
        initial_count,
        hidden,
        time_embed_order,
        ..FitConfig::default()
    };
    let out = out_dir(cfg)?;
    let r = fit_scene(&frames, &fc)?;
    io::save_scene(&out.join("scene.json"), &r.cloud, &r.field)?;
    io::save_trace(&out.join("trace.csv"), &r.trace)?;
    Ok(json!({
        "gaussians": r.cloud.len(),
        "steps": r.trace.len(),
        "final_loss": r.trace.last(),
        "psnr": r.psnr,
        "scene": out.join("scene.json"),
    }))
}

pub fn plan(
    cfg: &ProjectConfig,
    instruction: &str,
    backend: Option<&str>,
    endpoint: Option<String>,
    fixtures: Option<PathBuf>,
) -> Result<Value> {
    let mut spec = cfg.planner.clone();
    match backend {
        Some("llm") => spec.backend = BackendKind::Llm,
        Some(_) => spec.backend = BackendKind::Rule,
        None => {}
    }
    if endpoint.is_some() {
        spec.endpoint = endpoint;
    }
    if fixtures.is_some() {
        spec.fixtures = fixtures;
    }
    let plan = decompose(instruction, &spec.build()?)?;
    let text = plan.to_json()?;
    if cfg.paths.out.is_some() {
        io::write_bytes(&out_dir(cfg)?.join("plan.json"), text.as_bytes())?;
    }
    Ok(serde_json::from_str(&text)?)
}

pub fn select(cfg: &ProjectConfig, steps: Option<usize>) -> Result<Value> {
    let (cloud, field) = scene(cfg)?;
    let cams = cameras(cfg)?;
    let frames = io::load_frames(cfg.require("frames", &cfg.paths.frames)?, cams.len())?;
    let masks = io::load_mask_frames(cfg.require("masks", &cfg.paths.masks)?, cams.len())?;
    let targets = frames
        .into_iter()
        .zip(masks)
        .zip(&cams)
        .map(|((f, m), c)| SegTarget::new(f, m, c.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut sc = cfg.selector.clone();
    sc.background = cfg.background;
    if let Some(s) = steps {
        sc.steps = s;
    }
    let out = out_dir(cfg)?;
    let r = train_selector(&cloud, &field, &targets, &sc)?;
    io::save_mask(&out.join("mask.json"), &r.mask)?;
    Ok(json!({
        "gaussians": r.mask.len(),
        "selected": r.mask.edit_count(),
        "final_loss": r.losses.last(),
        "mask": out.join("mask.json"),
    }))
}

fn load_plan(cfg: &ProjectConfig, prompt: Option<&str>) -> Result<EditPlan> {
    match prompt {
        Some(p) => Ok(single_task_plan(classify(p)?)),
        None => {
            let path = cfg.require("plan", &cfg.paths.plan)?;
            let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
            EditPlan::from_json(&text)
        }
    }
}

pub fn edit(cfg: &ProjectConfig, prompt: Option<&str>, steps: Option<usize>) -> Result<Value> {
    let (tc, field) = tracked(cfg)?;
    let cams = cameras(cfg)?;
    let plan = load_plan(cfg, prompt)?;
    let oc = optim(cfg, steps);
    let out = out_dir(cfg)?;
    let summary = run_edit(tc, field, &cams, &plan, &cfg.oracle, &oc, out)?;
    let mut v = serde_json::to_value(&summary)?;
    v["out"] = json!(out);
    Ok(v)
}

pub fn render(cfg: &ProjectConfig, turntable: Option<usize>, time: f64, size: usize) -> Result<Value> {
    let (cloud, field) = scene(cfg)?;
    let cams = match turntable {
        Some(n) if n > 0 => {
            let t = TimeSample::new(time)?;
            let yaw: Vec<f64> = (0..n).map(|k| std::f64::consts::TAU * k as f64 / n as f64).collect();
            let [w, h] = cfg.resolution.unwrap_or([size, size]);
            arc_cameras(&yaw, 3.0, w as f64 * 1.1, w, h, &[t.value()])?
        }
        Some(_) => return Err(Error::InvalidInput("turntable needs at least one view".into())),
        None => cameras(cfg)?,
    };
    let out = out_dir(cfg)?;
    let frames = cams
        .iter()
        .map(|c| rasterizer::render(&cloud, &field, c, cfg.background))
        .collect::<Result<Vec<_>>>()?;
    io::save_frames(&out.join("frames"), &frames)?;
    Ok(json!({ "frames": frames.len(), "dir": out.join("frames") }))
}

fn count_frames(dir: &Path) -> Result<usize> {
    let mut n = 0;
    while dir.join(format!("{n:04}.png")).exists() {
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput(format!("no %04d.png frames in {}", dir.display())));
    }
    Ok(n)
}

pub fn metrics(cfg: &ProjectConfig, before: &Path, after: &Path) -> Result<Value> {
    let n = count_frames(before)?;
    let a = io::load_frames(before, n)?;
    let b = io::load_frames(after, n)?;
    let regions = if cfg.paths.scene.is_some() && cfg.paths.mask.is_some() {
        let (tc, field) = tracked(cfg)?;
        let cams = cameras(cfg)?;
        if cams.len() != n {
            return Err(Error::DimensionMismatch(format!("{n} frames for {} cameras", cams.len())));
        }
        edit_regions(&tc, &field, &cams)?
    } else {
        a.iter().map(|f| Mask2D::filled(f.width, f.height, true)).collect()
    };
    let report = metrics_report(&a, &b, &regions)?;
    if cfg.paths.out.is_some() {
        io::write_json(&out_dir(cfg)?.join("metrics.json"), &report)?;
    }
    Ok(serde_json::to_value(&report)?)
}

fn audit_line(step: usize, op: &str, tc: &TrackedCloud) -> Result<Value> {
    tc.check_invariants()?;
    Ok(json!({
        "step": step,
        "op": op,
        "gaussians": tc.cloud.len(),
        "mask": tc.mask.len(),
        "edit": tc.mask.edit_count(),
        "aligned": tc.cloud.ids() == tc.mask.gaussian_ids,
    }))
}

pub fn track_demo(cfg: &ProjectConfig, op_log: Option<&Path>, ops: usize) -> Result<Value> {
    let mut audit = Vec::new();
    let final_state = match op_log {
        Some(path) => {
            let log = read_op_log(path)?;
            let (mut tc, _) = tracked(cfg)?;
            audit.push(audit_line(0, "start", &tc)?);
            for (k, rec) in log.iter().enumerate() {
                tc.replay(std::slice::from_ref(rec))?;
                audit.push(audit_line(k + 1, &format!("{:?}", rec.op).to_lowercase(), &tc)?);
            }
            tc
        }
        None => {
            let s = two_blob_scene(16, cfg.seed)?;
            let mut tc = TrackedCloud::new(s.cloud.clone(), EditMask::from_labels(&s.cloud.ids(), &s.truth))?;
            let mut r = rng::substream(cfg.seed, rng::DENSIFY);
            audit.push(audit_line(0, "start", &tc)?);
            for k in 0..ops {
                let i = r.random_range(0..tc.len());
                let op = if tc.len() == 1 { r.random_range(0..2) } else { r.random_range(0..3) };
                let name = match op {
                    0 => {
                        tc.clone_op(i)?;
                        "clone"
                    }
                    1 => {
                        tc.split_op(i, &mut r)?;
                        "split"
                    }
                    _ => {
                        tc.prune_op(i)?;
                        "prune"
                    }
                };
                audit.push(audit_line(k + 1, name, &tc)?);
            }
            if let Some(out) = &cfg.paths.out {
                std::fs::create_dir_all(out).map_err(|e| Error::InvalidInput(format!("{}: {e}", out.display())))?;
                gsedit_core::tracking::write_op_log(&out.join("op_log.jsonl"), &tc.op_log)?;
            }
            tc
        }
    };
    Ok(json!({
        "audit": audit,
        "gaussians": final_state.cloud.len(),
        "edit": final_state.mask.edit_count(),
        "ops": final_state.op_log.len(),
    }))
}
