use crate::error::{Error, Result};

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl ImageBuffer {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        ImageBuffer {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(ImageBuffer { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        ImageBuffer { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: [f64; 3]) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn same_size(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_size(&self, other: &ImageBuffer) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Clamps every channel into `[0, 1]` (NaN becomes 0).
    pub fn clamp(&mut self) {
        for px in &mut self.pixels {
            for c in px.iter_mut() {
                *c = if c.is_nan() { 0.0 } else { c.clamp(0.0, 1.0) };
            }
        }
    }

    /// Zeroes pixels where `mask` is unset.
    pub fn masked(&self, mask: &Mask2D) -> Result<ImageBuffer> {
        mask.ensure_matches(self)?;
        let mut out = self.clone();
        for (px, &keep) in out.pixels.iter_mut().zip(&mask.data) {
            if !keep {
                *px = [0.0; 3];
            }
        }
        Ok(out)
    }

    pub fn mse(&self, other: &ImageBuffer) -> Result<f64> {
        self.ensure_same_size(other)?;
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).powi(2)))
            .sum();
        Ok(sum / (3 * self.pixels.len()).max(1) as f64)
    }
}

/// Single-channel binary mask aligned with an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask2D {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Mask2D {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Mask2D { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn ensure_matches(&self, image: &ImageBuffer) -> Result<()> {
        if self.width == image.width && self.height == image.height {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "mask {}x{} vs image {}x{}",
                self.width, self.height, image.width, image.height
            )))
        }
    }

    pub fn complement(&self) -> Mask2D {
        Mask2D {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    pub fn union(&self, other: &Mask2D) -> Result<Mask2D> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch("mask union".into()));
        }
        Ok(Mask2D {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Square-neighbourhood (Chebyshev) dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask2D {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        // Separable: horizontal pass then vertical pass.
        let mut horizontal = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                horizontal[y * w + x] = (lo..=hi).any(|xx| self.data[y * w + xx]);
            }
        }
        let mut data = vec![false; w * h];
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for x in 0..w {
                data[y * w + x] = (lo..=hi).any(|yy| horizontal[yy * w + x]);
            }
        }
        Mask2D { width: w, height: h, data }
    }
}

/// Tiles four equally sized row-major buffers as `[0 1; 2 3]`.
fn tile4<T: Copy>(width: usize, height: usize, parts: [&[T]; 4]) -> Vec<T> {
    let mut out = Vec::with_capacity(4 * width * height);
    for band in 0..2 {
        for y in 0..height {
            for col in 0..2 {
                let src = parts[band * 2 + col];
                out.extend_from_slice(&src[y * width..(y + 1) * width]);
            }
        }
    }
    out
}

fn untile4<T: Copy>(width: usize, height: usize, data: &[T]) -> [Vec<T>; 4] {
    let (w, h) = (width / 2, height / 2);
    std::array::from_fn(|q| {
        let (ox, oy) = ((q % 2) * w, (q / 2) * h);
        let mut part = Vec::with_capacity(w * h);
        for y in 0..h {
            let row = (oy + y) * width + ox;
            part.extend_from_slice(&data[row..row + w]);
        }
        part
    })
}

/// Combines four same-sized frames into one `2W x 2H` image, placed
/// row-major as `[0 1; 2 3]`.
pub fn assemble_grid(frames: &[ImageBuffer]) -> Result<ImageBuffer> {
    if frames.len() != 4 {
        return Err(Error::DimensionMismatch(format!("grid needs 4 frames, got {}", frames.len())));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(Error::DimensionMismatch("grid frames differ in size".into()));
    }
    let pixels = tile4(w, h, std::array::from_fn(|i| frames[i].pixels.as_slice()));
    Ok(ImageBuffer {
        width: 2 * w,
        height: 2 * h,
        pixels,
    })
}

/// Inverse of [`assemble_grid`].
pub fn split_grid(grid: &ImageBuffer) -> Result<[ImageBuffer; 4]> {
    if grid.width % 2 != 0 || grid.height % 2 != 0 || grid.width == 0 || grid.height == 0 {
        return Err(Error::DimensionMismatch(format!(
            "grid {}x{} is not an even 2x2 tiling",
            grid.width, grid.height
        )));
    }
    let (w, h) = (grid.width / 2, grid.height / 2);
    let parts = untile4(grid.width, grid.height, &grid.pixels);
    Ok(parts.map(|pixels| ImageBuffer {
        width: w,
        height: h,
        pixels,
    }))
}

pub fn assemble_mask_grid(masks: &[Mask2D]) -> Result<Mask2D> {
    if masks.len() != 4 {
        return Err(Error::DimensionMismatch(format!("grid needs 4 masks, got {}", masks.len())));
    }
    let (w, h) = (masks[0].width, masks[0].height);
    if masks.iter().any(|m| m.width != w || m.height != h) {
        return Err(Error::DimensionMismatch("grid masks differ in size".into()));
    }
    let data = tile4(w, h, std::array::from_fn(|i| masks[i].data.as_slice()));
    Ok(Mask2D {
        width: 2 * w,
        height: 2 * h,
        data,
    })
}
