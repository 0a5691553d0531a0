//! Image quality on optional pixel regions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasterizer::{ImageBuffer, Mask2D};

/// Returned by [`psnr`] for identical inputs.
pub const INF_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check(a: &ImageBuffer, b: &ImageBuffer, region: Option<&Mask2D>) -> Result<()> {
    a.ensure_same_size(b)?;
    if let Some(r) = region {
        r.ensure_matches(a)?;
    }
    Ok(())
}

pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, region: Option<&Mask2D>) -> Result<f64> {
    check(a, b, region)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (pa, pb)) in a.pixels.iter().zip(&b.pixels).enumerate() {
        if region.is_some_and(|r| !r.data[i]) {
            continue;
        }
        for c in 0..3 {
            let d = pa[c] - pb[c];
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        Ok(INF_DB)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

pub fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Summed-area table with a zero first row and column.
struct Sat {
    w: usize,
    data: Vec<f64>,
}

impl Sat {
    fn new(w: usize, h: usize, f: impl Fn(usize) -> f64) -> Self {
        let sw = w + 1;
        let mut data = vec![0.0; sw * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += f(y * w + x);
                data[(y + 1) * sw + x + 1] = data[y * sw + x + 1] + row;
            }
        }
        Sat { w: sw, data }
    }

    fn window(&self, x: usize, y: usize, n: usize) -> f64 {
        let s = self.w;
        self.data[(y + n) * s + x + n] - self.data[y * s + x + n] - self.data[(y + n) * s + x] + self.data[y * s + x]
    }
}

/// SSIM of one window from its moments.
pub fn ssim_from_moments(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// Mean SSIM on luma over every 8x8 window (stride 1) whose centre pixel
/// `(x + 4, y + 4)` lies in `region`.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, region: Option<&Mask2D>) -> Result<f64> {
    check(a, b, region)?;
    let (w, h, n) = (a.width, a.height, SSIM_WINDOW);
    if w < n || h < n {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            window: n,
        });
    }
    let ya: Vec<f64> = a.pixels.iter().map(|p| luma(*p)).collect();
    let yb: Vec<f64> = b.pixels.iter().map(|p| luma(*p)).collect();
    let sa = Sat::new(w, h, |i| ya[i]);
    let sb = Sat::new(w, h, |i| yb[i]);
    let saa = Sat::new(w, h, |i| ya[i] * ya[i]);
    let sbb = Sat::new(w, h, |i| yb[i] * yb[i]);
    let sab = Sat::new(w, h, |i| ya[i] * yb[i]);
    let area = (n * n) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - n {
        for x in 0..=w - n {
            let (cx, cy) = ((x + n / 2).min(w - 1), (y + n / 2).min(h - 1));
            if region.is_some_and(|r| !r.get(cx, cy)) {
                continue;
            }
            let mu_a = sa.window(x, y, n) / area;
            let mu_b = sb.window(x, y, n) / area;
            let var_a = (saa.window(x, y, n) / area - mu_a * mu_a).max(0.0);
            let var_b = (sbb.window(x, y, n) / area - mu_b * mu_b).max(0.0);
            let cov = sab.window(x, y, n) / area - mu_a * mu_b;
            total += ssim_from_moments(mu_a, mu_b, var_a, var_b, cov);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    pub psnr: f64,
    pub ssim: f64,
}

pub fn scores(a: &ImageBuffer, b: &ImageBuffer, region: Option<&Mask2D>) -> Result<RegionScores> {
    Ok(RegionScores {
        psnr: psnr(a, b, region)?,
        ssim: ssim(a, b, region)?,
    })
}
