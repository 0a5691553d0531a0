//! Project configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! resolution = [64, 64]
//! background = [0.0, 0.0, 0.0]
//!
//! [paths]
//! scene = "scene.json"
//! cameras = "cameras.json"
//! out = "out"
//!
//! [optim]
//! steps = 600
//!
//! [oracle]
//! kind = "synthetic"
//!
//! [planner]
//! backend = "rule"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! `GSEDIT_SEED` overrides `seed` and every seed derived from it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::OptimConfig;
use crate::planner::{Backend, BackendKind, LlmBackend, RuleGrounder};
use crate::rasterizer::{CameraPose, Rgb};
use crate::remote::HttpConfig;
use crate::selector::SelectorConfig;
use crate::supervision::OracleSpec;

pub const SEED_ENV: &str = "GSEDIT_SEED";
pub const MIN_RESOLUTION: usize = 8;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub scene: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    /// Directory of `%04d.png` frames, one per camera.
    pub frames: Option<PathBuf>,
    /// Directory of `%04d.png` segmentation masks, one per camera.
    pub masks: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    /// Existing edit mask (`mask.json`).
    pub mask: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSpec {
    pub backend: BackendKind,
    pub endpoint: Option<String>,
    /// JSON map from instruction to grounded text for the rule backend.
    pub fixtures: Option<PathBuf>,
    pub http: HttpConfig,
}

impl PlannerSpec {
    pub fn build(&self) -> Result<Backend> {
        match self.backend {
            BackendKind::Rule => Ok(Backend::Rule(match &self.fixtures {
                Some(p) => RuleGrounder::load(p)?,
                None => RuleGrounder::new(),
            })),
            BackendKind::Llm => {
                let endpoint = self
                    .endpoint
                    .as_deref()
                    .filter(|e| !e.trim().is_empty())
                    .ok_or_else(|| Error::Config("llm planner requires an endpoint".into()))?;
                Ok(Backend::Llm(LlmBackend {
                    endpoint: endpoint.to_string(),
                    http: self.http.clone(),
                }))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub seed: u64,
    /// Render size as `[width, height]`; cameras are rescaled to it.
    pub resolution: Option<[usize; 2]>,
    pub background: Rgb,
    pub paths: Paths,
    pub optim: OptimConfig,
    pub selector: SelectorConfig,
    pub oracle: OracleSpec,
    pub planner: PlannerSpec,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig {
            seed: 0,
            resolution: None,
            background: [0.0; 3],
            paths: Paths::default(),
            optim: OptimConfig::edit_default(),
            selector: SelectorConfig::default(),
            oracle: OracleSpec::default(),
            planner: PlannerSpec::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl ProjectConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses, resolves relative paths against the config's directory,
    /// applies the seed override from the environment and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply_env_seed()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `GSEDIT_SEED` if it is set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.set_seed(seed);
        }
        Ok(())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [&mut p.scene, &mut p.cameras, &mut p.frames, &mut p.masks, &mut p.plan, &mut p.mask, &mut p.out] {
            resolve(base, slot);
        }
        resolve(base, &mut self.planner.fixtures);
        resolve(base, &mut self.oracle.cache_dir);
    }

    /// Sets the root seed and the per-module seeds derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.optim.seed = seed;
        self.selector.seed = seed;
        self.oracle.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if let Some([w, h]) = self.resolution {
            if w < MIN_RESOLUTION || h < MIN_RESOLUTION {
                return Err(Error::Config(format!(
                    "resolution {w}x{h} is below {MIN_RESOLUTION}x{MIN_RESOLUTION}"
                )));
            }
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("background components must lie in [0, 1]".into()));
        }
        let p = &self.paths;
        let inputs = [
            ("scene", &p.scene),
            ("cameras", &p.cameras),
            ("frames", &p.frames),
            ("masks", &p.masks),
            ("plan", &p.plan),
            ("mask", &p.mask),
            ("planner.fixtures", &self.planner.fixtures),
        ];
        for (name, path) in inputs {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(Error::Config(format!("{name} path {} does not exist", path.display())));
                }
            }
        }
        self.optim.validate()?;
        self.oracle.validate()?;
        if self.planner.backend == BackendKind::Llm && self.planner.endpoint.is_none() {
            return Err(Error::Config("llm planner requires an endpoint".into()));
        }
        Ok(())
    }

    pub fn require<'a>(&self, name: &str, path: &'a Option<PathBuf>) -> Result<&'a Path> {
        path.as_deref().ok_or_else(|| Error::Config(format!("paths.{name} is not set")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Rescales a camera's intrinsics to a new image size.
pub fn rescale_camera(cam: &CameraPose, width: usize, height: usize) -> CameraPose {
    let (sx, sy) = (width as f64 / cam.width as f64, height as f64 / cam.height as f64);
    CameraPose {
        fx: cam.fx * sx,
        fy: cam.fy * sy,
        cx: cam.cx * sx,
        cy: cam.cy * sy,
        width,
        height,
        ..cam.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty() {
        let c = ProjectConfig::from_toml("").unwrap();
        assert_eq!(c, ProjectConfig::default());
        assert_eq!(c.optim.lr.field, 0.0);
    }

    #[test]
    fn sections_parse() {
        let c = ProjectConfig::from_toml(
            "seed = 5\nresolution = [32, 16]\n[optim]\nsteps = 10\nidu_period = 3\n[optim.lr]\ncolor = 0.01\n[oracle]\nkind = \"identity\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.resolution, Some([32, 16]));
        assert_eq!(c.optim.steps, 10);
        assert_eq!(c.optim.idu_period, 3);
        assert_eq!(c.optim.lr.color, 0.01);
        assert_eq!(c.optim.lr.rotation, 1e-3);
    }

    #[test]
    fn unknown_key_is_config_error() {
        assert!(matches!(ProjectConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(matches!(ProjectConfig::from_toml("seed = \"x\""), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_resolution_rejected() {
        let c = ProjectConfig {
            resolution: Some([4, 64]),
            ..ProjectConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn missing_input_path_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gsedit.toml");
        std::fs::write(&path, "[paths]\nscene = \"nope.json\"\n").unwrap();
        assert!(matches!(ProjectConfig::load(&path), Err(Error::Config(_))));
        std::fs::write(dir.path().join("nope.json"), "{}").unwrap();
        let c = ProjectConfig::load(&path).unwrap();
        assert_eq!(c.paths.scene.unwrap(), dir.path().join("nope.json"));
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ProjectConfig::default();
        c.set_seed(11);
        c.resolution = Some([16, 16]);
        assert_eq!(ProjectConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn rescale_keeps_principal_point_centred() {
        let cam = crate::toy::two_blob_scene(32, 0).unwrap().cameras[0].clone();
        let r = rescale_camera(&cam, 64, 64);
        assert_eq!(r.cx, 32.0);
        assert_eq!(r.fx, cam.fx * 2.0);
    }
}
