//! Client for a remote image-editing service.

use std::path::{Path, PathBuf};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{decode_png, encode_png};
use crate::rasterizer::ImageBuffer;
use crate::remote::{self, HttpConfig};

#[derive(Debug, Serialize)]
struct EditRequest<'a> {
    prompt: &'a str,
    width: usize,
    height: usize,
    image_b64: String,
}

#[derive(Debug, Deserialize)]
struct EditResponse {
    image_b64: String,
    #[serde(default)]
    #[allow(dead_code)]
    model: String,
}

/// Cache file name for a request: SHA-256 over the PNG bytes, a zero byte,
/// and the prompt.
pub fn cache_key(png: &[u8], prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(png);
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

fn decode_reply(b64: &str, width: usize, height: usize) -> Result<(Vec<u8>, ImageBuffer)> {
    let png = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| Error::MalformedResponse(format!("image_b64: {e}")))?;
    let img = decode_png(&png).map_err(|e| Error::MalformedResponse(format!("image_b64 is not a PNG: {e}")))?;
    if img.width != width || img.height != height {
        return Err(Error::MalformedResponse(format!(
            "expected a {width}x{height} image, got {}x{}",
            img.width, img.height
        )));
    }
    Ok((png, img))
}

/// Sends a 2x2 grid and prompt to `endpoint/edit`. The grid travels as an
/// 8-bit PNG, so pixel values are quantised to multiples of 1/255.
pub fn remote_edit(
    grid: &ImageBuffer,
    prompt: &str,
    endpoint: &str,
    http: &HttpConfig,
    cache_dir: Option<&Path>,
) -> Result<ImageBuffer> {
    if grid.width < 2 || grid.height < 2 || grid.width % 2 != 0 || grid.height % 2 != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} is not a 2x2 grid",
            grid.width, grid.height
        )));
    }
    let png = encode_png(grid)?;
    let cached = cache_dir.map(|d| d.join(format!("{}.png", cache_key(&png, prompt))));
    if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if let Ok(img) = decode_png(&bytes) {
            if img.same_size(grid) {
                return Ok(img);
            }
        }
    }
    let body = EditRequest {
        prompt,
        width: grid.width,
        height: grid.height,
        image_b64: base64::engine::general_purpose::STANDARD.encode(&png),
    };
    let reply: EditResponse = remote::post_json(&remote::join(endpoint, "edit"), &body, http)?;
    let (bytes, img) = decode_reply(&reply.image_b64, grid.width, grid.height)?;
    if let Some(path) = cached {
        crate::io::write_bytes(&path, &bytes)?;
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteOracle {
    pub endpoint: String,
    pub prompt: String,
    pub http: HttpConfig,
    pub cache_dir: Option<PathBuf>,
}

impl super::EditOracle for RemoteOracle {
    fn edit_grid(&self, grid: &ImageBuffer, _region: Option<&crate::rasterizer::Mask2D>) -> Result<ImageBuffer> {
        remote_edit(grid, &self.prompt, &self.endpoint, &self.http, self.cache_dir.as_deref())
    }
}
