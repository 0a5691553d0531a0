//! Deterministic procedural editor used in place of a diffusion model.

use rand::Rng as _;

use crate::error::Result;
use crate::planner::{lexicon, AtomicTask, TaskCategory};
use crate::rasterizer::{ImageBuffer, Mask2D};
use crate::rng::{self, Rng};

pub type ColorMatrix = [[f64; 3]; 3];

pub const SEPIA: ColorMatrix = [[0.393, 0.769, 0.189], [0.349, 0.686, 0.168], [0.272, 0.534, 0.131]];
pub const IDENTITY: ColorMatrix = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv(p: [f64; 3]) -> [f64; 3] {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == p[0] {
        60.0 * ((p[1] - p[2]) / d).rem_euclid(6.0)
    } else if max == p[1] {
        60.0 * ((p[2] - p[0]) / d + 2.0)
    } else {
        60.0 * ((p[0] - p[1]) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn task_rng(task: &AtomicTask, seed: u64) -> Rng {
    rng::substream(seed, &format!("oracle/{}/{}", task.category, task.prompt))
}

fn random_color(r: &mut Rng) -> [f64; 3] {
    [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()]
}

/// Colour named in the prompt, or a stable hue derived from it.
pub fn target_color(task: &AtomicTask, seed: u64) -> [f64; 3] {
    match lexicon::find_color(&task.prompt) {
        Some((_, c)) => c,
        None => {
            let h = task_rng(task, seed).random_range(0.0..360.0);
            hsv_to_rgb([h, 1.0, 1.0])
        }
    }
}

fn recolor(p: [f64; 3], target: [f64; 3]) -> [f64; 3] {
    let t = rgb_to_hsv(target);
    let [_, s, v] = rgb_to_hsv(p);
    if t[1] == 0.0 {
        [t[2]; 3]
    } else {
        hsv_to_rgb([t[0], s, v])
    }
}

pub fn apply_matrix(p: [f64; 3], m: &ColorMatrix) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (o, row) in out.iter_mut().zip(m) {
        *o = (row[0] * p[0] + row[1] * p[1] + row[2] * p[2]).clamp(0.0, 1.0);
    }
    out
}

fn bbox(region: &Mask2D) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in 0..region.height {
        for x in 0..region.width {
            if region.get(x, y) {
                b = Some(match b {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    b
}

/// Applies the category's procedural edit. `style` is the colour matrix
/// used for style transfer.
pub fn synthetic_edit_with(
    image: &ImageBuffer,
    task: &AtomicTask,
    region: &Mask2D,
    seed: u64,
    style: &ColorMatrix,
) -> Result<ImageBuffer> {
    region.ensure_matches(image)?;
    let mut out = image.clone();
    if task.category.is_global() {
        for p in &mut out.pixels {
            *p = apply_matrix(*p, style);
        }
        return Ok(out);
    }
    if region.count() == 0 {
        return Ok(out);
    }
    let mut r = task_rng(task, seed);
    let (w, h) = (image.width, image.height);
    match task.category {
        TaskCategory::ColorAdjustment => {
            let target = target_color(task, seed);
            for (p, m) in out.pixels.iter_mut().zip(&region.data) {
                if *m {
                    *p = recolor(*p, target);
                }
            }
        }
        TaskCategory::BackgroundEditing => {
            let (a, b) = (random_color(&mut r), random_color(&mut r));
            let cell = r.random_range(2..=6usize);
            for y in 0..h {
                for x in 0..w {
                    if !region.get(x, y) {
                        out.set(x, y, if (x / cell + y / cell) % 2 == 0 { a } else { b });
                    }
                }
            }
        }
        TaskCategory::TextureReplacement | TaskCategory::MaterialProperties => {
            let color = random_color(&mut r);
            let period = r.random_range(3..=6usize);
            let diagonal = r.random_bool(0.5);
            for y in 0..h {
                for x in 0..w {
                    let phase = if diagonal { x + y } else { y };
                    if region.get(x, y) && (phase % period) < period / 2 {
                        let p = out.get(x, y);
                        out.set(x, y, [0, 1, 2].map(|c| 0.5 * p[c] + 0.5 * color[c]));
                    }
                }
            }
        }
        TaskCategory::LocalGeometryModification | TaskCategory::CategorySwapping => {
            let color = random_color(&mut r);
            let (x0, y0, x1, y1) = bbox(region).expect("region is non-empty");
            let (bw, bh) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
            let cx = (x0 + x1) as f64 / 2.0 + 0.5 + r.random_range(-0.25..=0.25) * bw;
            let cy = (y0 + y1) as f64 / 2.0 + 0.5 + r.random_range(-0.25..=0.25) * bh;
            let radius = (bw.min(bh) / 3.0).max(1.0);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if region.get(x, y) && dx * dx + dy * dy <= radius * radius {
                        out.set(x, y, color);
                    }
                }
            }
        }
        TaskCategory::StyleTransfer => unreachable!("handled as global"),
    }
    Ok(out)
}

/// [`synthetic_edit_with`] using the sepia style matrix.
pub fn synthetic_edit(image: &ImageBuffer, task: &AtomicTask, region: &Mask2D, seed: u64) -> Result<ImageBuffer> {
    synthetic_edit_with(image, task, region, seed, &SEPIA)
}
