//! On-disk formats: scene, camera and mask JSON, PNG frames, NPY arrays and
//! the loss trace CSV.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasterizer::{CameraPose, ImageBuffer, Mask2D};
use crate::scene::{DeformationField, DeformedAttributes, DenseLayer, GaussianCloud, GaussianPrimitive, TimeSample};
use crate::selector::EditMask;

pub const SCENE_VERSION: u32 = 1;
pub const MASK_VERSION: u32 = 1;

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FieldRecord {
    time_embed_order: usize,
    deformed: Vec<String>,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    version: u32,
    next_id: u64,
    #[serde(default)]
    generation: u64,
    gaussians: Vec<GaussianPrimitive>,
    field: FieldRecord,
}

pub fn scene_to_json(cloud: &GaussianCloud, field: &DeformationField) -> Result<String> {
    let rec = SceneRecord {
        version: SCENE_VERSION,
        next_id: cloud.next_id(),
        generation: cloud.generation(),
        gaussians: cloud.primitives().to_vec(),
        field: FieldRecord {
            time_embed_order: field.time_embed_order,
            deformed: field.deformed.names().into_iter().map(String::from).collect(),
            layers: field
                .layers
                .iter()
                .map(|l| LayerRecord {
                    weights: l.rows(),
                    bias: l.bias.clone(),
                })
                .collect(),
        },
    };
    let mut s = serde_json::to_string_pretty(&rec)?;
    s.push('\n');
    Ok(s)
}

pub fn scene_from_json(text: &str) -> Result<(GaussianCloud, DeformationField)> {
    let rec: SceneRecord = serde_json::from_str(text)?;
    if rec.version != SCENE_VERSION {
        return Err(Error::InvalidInput(format!("unsupported scene version {}", rec.version)));
    }
    let cloud = GaussianCloud::from_parts(rec.gaussians, rec.next_id, rec.generation)?;
    for p in cloud.primitives() {
        p.activate()?;
    }
    let layers = rec
        .field
        .layers
        .into_iter()
        .map(|l| DenseLayer::from_rows(l.weights, l.bias))
        .collect::<Result<Vec<_>>>()?;
    let field = DeformationField {
        layers,
        time_embed_order: rec.field.time_embed_order,
        deformed: DeformedAttributes::from_names(&rec.field.deformed)?,
    };
    field.validate()?;
    Ok((cloud, field))
}

pub fn save_scene(path: &Path, cloud: &GaussianCloud, field: &DeformationField) -> Result<()> {
    write_bytes(path, scene_to_json(cloud, field)?.as_bytes())
}

pub fn load_scene(path: &Path) -> Result<(GaussianCloud, DeformationField)> {
    scene_from_json(&read_text(path)?).map_err(|e| match e {
        Error::Json(j) => format_err(path, j.to_string()),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub time: f64,
}

impl CameraRecord {
    pub fn from_camera(c: &CameraPose) -> Self {
        let r = &c.rotation;
        CameraRecord {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [c.translation.x, c.translation.y, c.translation.z],
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            time: c.time.value(),
        }
    }

    pub fn to_camera(&self) -> Result<CameraPose> {
        let r = &self.rotation;
        let cam = CameraPose {
            rotation: Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]),
            translation: Vector3::from(self.translation),
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            time: TimeSample::new(self.time)?,
        };
        cam.validate()?;
        Ok(cam)
    }
}

#[derive(Serialize, Deserialize)]
struct CamerasRecord {
    cameras: Vec<CameraRecord>,
}

pub fn save_cameras(path: &Path, cameras: &[CameraPose]) -> Result<()> {
    write_json(
        path,
        &CamerasRecord {
            cameras: cameras.iter().map(CameraRecord::from_camera).collect(),
        },
    )
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraPose>> {
    let rec: CamerasRecord = serde_json::from_str(&read_text(path)?).map_err(|e| format_err(path, e.to_string()))?;
    rec.cameras.iter().map(CameraRecord::to_camera).collect()
}

#[derive(Serialize, Deserialize)]
struct MaskEntry {
    id: u64,
    logits: [f64; 2],
    label: bool,
}

#[derive(Serialize, Deserialize)]
struct MaskRecord {
    version: u32,
    gaussians: Vec<MaskEntry>,
}

pub fn mask_to_json(mask: &EditMask) -> Result<String> {
    let rec = MaskRecord {
        version: MASK_VERSION,
        gaussians: mask
            .gaussian_ids
            .iter()
            .zip(&mask.logits)
            .zip(&mask.labels)
            .map(|((id, logits), label)| MaskEntry {
                id: *id,
                logits: *logits,
                label: *label,
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&rec)?;
    s.push('\n');
    Ok(s)
}

pub fn mask_from_json(text: &str) -> Result<EditMask> {
    let rec: MaskRecord = serde_json::from_str(text)?;
    if rec.version != MASK_VERSION {
        return Err(Error::InvalidInput(format!("unsupported mask version {}", rec.version)));
    }
    let mut mask = EditMask::initial(&[]);
    for e in rec.gaussians {
        mask.gaussian_ids.push(e.id);
        mask.logits.push(e.logits);
        mask.labels.push(e.label);
    }
    mask.validate()?;
    Ok(mask)
}

pub fn save_mask(path: &Path, mask: &EditMask) -> Result<()> {
    write_bytes(path, mask_to_json(mask)?.as_bytes())
}

pub fn load_mask(path: &Path) -> Result<EditMask> {
    mask_from_json(&read_text(path)?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB PNG.
pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let raw: Vec<u8> = img.pixels.iter().flat_map(|p| p.map(quantize)).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| Error::DimensionMismatch("pixel count does not match size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.pixels().map(|p| p.0.map(|v| v as f64 / 255.0)).collect();
    ImageBuffer::from_pixels(w as usize, h as usize, pixels)
}

pub fn save_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    write_bytes(path, &encode_png(img)?)
}

pub fn load_png(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes).map_err(|e| format_err(path, e.to_string()))
}

/// Mask PNGs are white where set.
pub fn save_mask_png(path: &Path, mask: &Mask2D) -> Result<()> {
    let img = ImageBuffer::from_fn(mask.width, mask.height, |x, y| [if mask.get(x, y) { 1.0 } else { 0.0 }; 3]);
    save_png(path, &img)
}

pub fn load_mask_png(path: &Path) -> Result<Mask2D> {
    let img = load_png(path)?;
    Ok(Mask2D {
        width: img.width,
        height: img.height,
        data: img.pixels.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0 > 0.5).collect(),
    })
}

/// NPY v1.0 little-endian float32 array.
pub fn encode_npy_f32(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::DimensionMismatch(format!(
            "shape {shape:?} needs {expected} values, got {}",
            data.len()
        )));
    }
    let dims = match shape {
        [d] => format!("({d},)"),
        _ => format!("({})", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {dims}, }}");
    // Magic (6) + version (2) + header length (2) + header + '\n' is a multiple of 64.
    let total = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - total % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + 4 * data.len());
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses what [`encode_npy_f32`] writes.
pub fn decode_npy_f32(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let bad = |r: &str| Error::InvalidInput(format!("npy: {r}"));
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad("missing magic"));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header is not utf-8"))?;
    if !header.contains("'descr': '<f4'") || !header.contains("'fortran_order': False") {
        return Err(bad("only C-order <f4 is supported"));
    }
    let start = header.find("'shape': (").ok_or_else(|| bad("no shape"))? + 10;
    let end = start + header[start..].find(')').ok_or_else(|| bad("unterminated shape"))?;
    let shape = header[start..end]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("bad dimension")))
        .collect::<Result<Vec<_>>>()?;
    let body = &bytes[10 + hlen..];
    let n: usize = shape.iter().product();
    if body.len() != 4 * n {
        return Err(bad("data length does not match shape"));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((shape, data))
}

/// Saves an image as an `(height, width, 3)` float32 array.
pub fn save_image_npy(path: &Path, img: &ImageBuffer) -> Result<()> {
    let data: Vec<f32> = img.pixels.iter().flat_map(|p| p.map(|v| v as f32)).collect();
    write_bytes(path, &encode_npy_f32(&[img.height, img.width, 3], &data)?)
}

pub fn trace_to_csv(trace: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{l:?}\n"));
    }
    s
}

pub fn save_trace(path: &Path, trace: &[f64]) -> Result<()> {
    write_bytes(path, trace_to_csv(trace).as_bytes())
}

pub fn load_trace(path: &Path) -> Result<Vec<f64>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (_, loss) = line.split_once(',').ok_or_else(|| format_err(path, format!("line {}: no comma", n + 1)))?;
        out.push(
            loss.trim()
                .parse::<f64>()
                .map_err(|e| format_err(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

/// Writes `frames/%04d.png` under `dir`.
pub fn save_frames(dir: &Path, frames: &[ImageBuffer]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        save_png(&dir.join(format!("{i:04}.png")), f)?;
    }
    Ok(())
}

/// Reads `dir/%04d.png` for indices `0..count`.
pub fn load_frames(dir: &Path, count: usize) -> Result<Vec<ImageBuffer>> {
    (0..count).map(|i| load_png(&dir.join(format!("{i:04}.png")))).collect()
}

pub fn load_mask_frames(dir: &Path, count: usize) -> Result<Vec<Mask2D>> {
    (0..count).map(|i| load_mask_png(&dir.join(format!("{i:04}.png")))).collect()
}

/// Writes `dir/%04d.png` masks.
pub fn save_mask_frames(dir: &Path, masks: &[Mask2D]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in masks.iter().enumerate() {
        save_mask_png(&dir.join(format!("{i:04}.png")), m)?;
    }
    Ok(())
}
