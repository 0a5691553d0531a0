mod common;

use gsedit_core::io;
use gsedit_core::optimizer::adam::{adam_update, AdamParams};
use gsedit_core::optimizer::*;
use gsedit_core::pipeline::{run_edit, run_plan, single_task_plan};
use gsedit_core::planner::{AtomicTask, EditPlan, Provenance, BackendKind, TaskCategory};
use gsedit_core::rasterizer::ImageBuffer;
use gsedit_core::rng;
use gsedit_core::selector::EditMask;
use gsedit_core::supervision::{OracleKind, OracleSpec};
use gsedit_core::toy::two_blob_scene;
use gsedit_core::tracking::TrackedCloud;
use rand::Rng as _;

#[test]
fn scalar_adam_matches_longhand() {
    let mut r = rng::seeded(1);
    let grads: Vec<f64> = (0..300).map(|_| r.random_range(-2.0..2.0)).collect();
    let p = AdamParams::default();
    let expect = common::reference_adam(&grads, 0.01, p.beta1, p.beta2, p.eps, 0.7);
    let (mut x, mut m, mut v) = (0.7, 0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        adam_update(&mut x, *g, &mut m, &mut v, 0.01, &p, t as u64 + 1);
        assert!((x - expect[t]).abs() <= 1e-12 * expect[t].abs().max(1.0), "step {t}");
    }
}

#[test]
fn densify_plan_follows_rules() {
    let cloud = common::line_cloud(6);
    let labels = [true, true, true, false, true, true];
    let mask = EditMask::from_labels(&cloud.ids(), &labels);
    let mut cloud = cloud;
    let cfg = OptimConfig::default();
    {
        let ps = cloud.primitives_mut();
        ps[0].log_scale = [(0.01f64).ln(); 3];
        ps[1].log_scale = [(0.2f64).ln(); 3];
        ps[2].opacity_logit = gsedit_core::scene::logit(0.001);
        ps[3].log_scale = [(0.01f64).ln(); 3];
        ps[5].log_scale = [(0.01f64).ln(); 3];
    }
    let mut stats = GradStats::zeros(6);
    stats.accumulate(&[1e-3, 1e-3, 1e-3, 1e-3, 1e-6, 0.0]);
    let plan = plan_densify(&cloud, &mask, &stats, &cfg);
    let ids = cloud.ids();
    assert_eq!(
        plan,
        vec![(ids[0], DensifyAction::Clone), (ids[1], DensifyAction::Split), (ids[2], DensifyAction::Prune)]
    );
}

#[test]
fn frozen_gaussians_survive_bitwise() {
    let run = common::two_blob_edit(16, 150, true);
    assert!(run.frozen_bitwise);
    assert!(run.non_edited_psnr > 60.0, "{}", run.non_edited_psnr);
    assert!(run.trace.last().unwrap() < &run.trace[0]);
}

#[test]
fn identity_oracle_keeps_zero_loss() {
    let s = two_blob_scene(16, 0).unwrap();
    let tc = TrackedCloud::new(s.cloud.clone(), EditMask::from_labels(&s.cloud.ids(), &s.truth)).unwrap();
    let plan = single_task_plan(AtomicTask::new(TaskCategory::ColorAdjustment, "Make the blob red", "blob", None));
    let oracle = OracleSpec {
        kind: OracleKind::Identity,
        ..OracleSpec::default()
    };
    let cfg = OptimConfig {
        steps: 40,
        ..OptimConfig::edit_default()
    };
    let run = run_plan(tc, s.field, &s.cameras, &plan, &oracle, &cfg).unwrap();
    assert_eq!(run.trace.len(), 40);
    assert!(run.trace.windows(2).all(|w| w[1] <= w[0]));
}

fn fit_config(n0: usize, steps: usize) -> FitConfig {
    FitConfig {
        initial_count: n0,
        optim: OptimConfig {
            steps,
            ..OptimConfig::default()
        },
        hidden: vec![16],
        time_embed_order: 2,
        ..FitConfig::default()
    }
}

#[test]
fn fit_three_gaussians() {
    let frames = common::three_gaussian_frames(32);
    let out = fit_scene(&frames, &fit_config(32, 2000)).unwrap();
    assert!(out.psnr >= 30.0, "psnr {}", out.psnr);
    assert!(out.trace.last().unwrap() < &out.trace[0]);
}

#[test]
fn fit_solid_colour() {
    let cam = common::three_gaussian_frames(32)[1].camera.clone();
    let frames = vec![Observation {
        camera: cam,
        image: ImageBuffer::filled(32, 32, [0.3, 0.6, 0.4]),
    }];
    let out = fit_scene(&frames, &fit_config(32, 1500)).unwrap();
    assert!(out.psnr >= 40.0, "psnr {}", out.psnr);
}

#[test]
fn zero_step_fit_is_initialisation() {
    let frames = common::three_gaussian_frames(16);
    let cfg = fit_config(20, 0);
    let out = fit_scene(&frames, &cfg).unwrap();
    let expect = initial_cloud(&frames, &cfg, &mut rng::substream(cfg.optim.seed, rng::FIT_INIT));
    assert_eq!(out.cloud, expect);
    assert!(out.trace.is_empty());
    let last = out.field.layers.last().unwrap();
    assert!(last.weights.iter().chain(&last.bias).all(|w| *w == 0.0));
}

#[test]
fn fit_rejects_mismatched_frames() {
    let mut frames = common::three_gaussian_frames(16);
    frames[0].image = ImageBuffer::filled(8, 8, [0.0; 3]);
    assert!(fit_scene(&frames, &fit_config(8, 5)).is_err());
    assert!(fit_scene(&[], &fit_config(8, 5)).is_err());
}

fn toy_inputs() -> (TrackedCloud, gsedit_core::scene::DeformationField, Vec<gsedit_core::rasterizer::CameraPose>) {
    let s = two_blob_scene(16, 0).unwrap();
    let tc = TrackedCloud::new(s.cloud.clone(), EditMask::from_labels(&s.cloud.ids(), &s.truth)).unwrap();
    (tc, s.field, s.cameras)
}

#[test]
fn edit_runs_are_deterministic() {
    let (tc, f, cams) = toy_inputs();
    let plan = single_task_plan(AtomicTask::new(TaskCategory::ColorAdjustment, "Make the blob red", "blob", None));
    let cfg = OptimConfig {
        steps: 120,
        densify_interval: 40,
        ..OptimConfig::edit_default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_edit(tc.clone(), f.clone(), &cams, &plan, &OracleSpec::default(), &cfg, d.path()).unwrap();
    }
    for name in ["scene.json", "trace.csv", "mask.json", "op_log.jsonl", "optim_state.bin"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
}

#[test]
fn multi_task_equals_chained_single_tasks() {
    let (tc, f, cams) = toy_inputs();
    let tasks = vec![
        AtomicTask::new(TaskCategory::ColorAdjustment, "Make the blob red", "blob", None),
        AtomicTask::new(TaskCategory::ColorAdjustment, "Make the blob yellow", "blob", None),
    ];
    let plan = EditPlan {
        tasks: tasks.iter().enumerate().map(|(k, t)| AtomicTask { order: k + 1, ..t.clone() }).collect(),
        provenance: Provenance {
            backend: BackendKind::Rule,
            raw_instruction: "Make the blob red. Make the blob yellow.".into(),
            grounded_text: "Make the blob red. Make the blob yellow.".into(),
        },
    };
    let cfg = OptimConfig {
        steps: 60,
        ..OptimConfig::edit_default()
    };
    let spec = OracleSpec::default();
    let both = run_plan(tc.clone(), f.clone(), &cams, &plan, &spec, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = run_plan(tc, f, &cams, &single_task_plan(tasks[0].clone()), &spec, &cfg).unwrap();
    let scene = dir.path().join("mid.json");
    let mask = dir.path().join("mid_mask.json");
    io::save_scene(&scene, &first.tracked.cloud, &first.field).unwrap();
    io::save_mask(&mask, &first.tracked.mask).unwrap();
    let (c, f2) = io::load_scene(&scene).unwrap();
    let tc2 = TrackedCloud::new(c, io::load_mask(&mask).unwrap()).unwrap();
    let second = run_plan(tc2, f2, &cams, &single_task_plan(tasks[1].clone()), &spec, &cfg).unwrap();

    assert_eq!(both.tracked.cloud, second.tracked.cloud);
    assert_eq!(both.task_traces[1], second.trace);
}

#[test]
fn checkpoint_round_trip_after_edit() {
    let (tc, f, cams) = toy_inputs();
    let dir = tempfile::tempdir().unwrap();
    let plan = single_task_plan(AtomicTask::new(TaskCategory::ColorAdjustment, "Make the blob red", "blob", None));
    let cfg = OptimConfig {
        steps: 30,
        ..OptimConfig::edit_default()
    };
    let run = run_plan(tc, f, &cams, &plan, &OracleSpec::default(), &cfg).unwrap();
    let state = run.state.unwrap();
    let path = dir.path().join("state.bin");
    checkpoint::save_state(&path, &state).unwrap();
    assert_eq!(checkpoint::load_state(&path).unwrap(), state);
}
