//! Per-view edit targets and their periodic refresh.

pub mod client;
pub mod synthetic;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::AtomicTask;
use crate::rasterizer::{assemble_grid, assemble_mask_grid, render, split_grid, CameraPose, ImageBuffer, Mask2D, Rgb};
use crate::remote::HttpConfig;
use crate::rng::Rng;
use crate::scene::{DeformationField, GaussianCloud, TimeSample};
pub use client::{remote_edit, RemoteOracle};
pub use synthetic::{synthetic_edit, synthetic_edit_with, ColorMatrix, SEPIA};

/// Default number of iterations between target refreshes.
pub const DEFAULT_IDU_PERIOD: usize = 10;
/// Default bound on concurrent oracle calls.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

/// An image editor that maps a 2x2 grid of same-time views to an edited
/// grid of the same size. `region` is the matching grid of edit regions.
pub trait EditOracle: Send + Sync {
    fn edit_grid(&self, grid: &ImageBuffer, region: Option<&Mask2D>) -> Result<ImageBuffer>;
}

/// Returns its input.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityOracle;

impl EditOracle for IdentityOracle {
    fn edit_grid(&self, grid: &ImageBuffer, _region: Option<&Mask2D>) -> Result<ImageBuffer> {
        Ok(grid.clone())
    }
}

/// Applies [`synthetic_edit_with`] to each quadrant independently.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOracle {
    pub task: AtomicTask,
    pub seed: u64,
    pub style: ColorMatrix,
}

impl SyntheticOracle {
    pub fn new(task: AtomicTask, seed: u64) -> Self {
        SyntheticOracle {
            task,
            seed,
            style: SEPIA,
        }
    }

    pub fn edit_view(&self, image: &ImageBuffer, region: Option<&Mask2D>) -> Result<ImageBuffer> {
        let full;
        let region = match region {
            Some(r) => r,
            None => {
                full = Mask2D::filled(image.width, image.height, true);
                &full
            }
        };
        synthetic_edit_with(image, &self.task, region, self.seed, &self.style)
    }
}

impl EditOracle for SyntheticOracle {
    fn edit_grid(&self, grid: &ImageBuffer, region: Option<&Mask2D>) -> Result<ImageBuffer> {
        let views = split_grid(grid)?;
        let regions = match region {
            Some(r) => {
                r.ensure_matches(grid)?;
                Some(split_mask_grid(r))
            }
            None => None,
        };
        let edited = views
            .iter()
            .enumerate()
            .map(|(k, v)| self.edit_view(v, regions.as_ref().map(|r| &r[k])))
            .collect::<Result<Vec<_>>>()?;
        assemble_grid(&edited)
    }
}

fn split_mask_grid(m: &Mask2D) -> [Mask2D; 4] {
    let img = ImageBuffer::from_fn(m.width, m.height, |x, y| [if m.get(x, y) { 1.0 } else { 0.0 }; 3]);
    split_grid(&img)
        .expect("size checked by caller")
        .map(|q| Mask2D {
            width: q.width,
            height: q.height,
            data: q.pixels.iter().map(|p| p[0] > 0.5).collect(),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    #[default]
    Synthetic,
    Remote,
    Identity,
}

/// Serializable description of which oracle to build for a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSpec {
    pub kind: OracleKind,
    pub endpoint: Option<String>,
    pub seed: u64,
    /// Style-transfer matrix for the synthetic oracle.
    pub style_matrix: ColorMatrix,
    pub cache_dir: Option<PathBuf>,
    pub http: HttpConfig,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            kind: OracleKind::Synthetic,
            endpoint: None,
            seed: 0,
            style_matrix: SEPIA,
            cache_dir: None,
            http: HttpConfig::default(),
        }
    }
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == OracleKind::Remote && self.endpoint.as_deref().map_or(true, |s| s.trim().is_empty()) {
            return Err(Error::Config("remote oracle requires an endpoint".into()));
        }
        Ok(())
    }

    pub fn build(&self, task: &AtomicTask) -> Result<Box<dyn EditOracle>> {
        self.validate()?;
        Ok(match self.kind {
            OracleKind::Synthetic => Box::new(SyntheticOracle {
                task: task.clone(),
                seed: self.seed,
                style: self.style_matrix,
            }),
            OracleKind::Identity => Box::new(IdentityOracle),
            OracleKind::Remote => Box::new(RemoteOracle {
                endpoint: self.endpoint.clone().unwrap_or_default(),
                prompt: task.prompt.clone(),
                http: self.http.clone(),
                cache_dir: self.cache_dir.clone(),
            }),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub camera: CameraPose,
    pub time: TimeSample,
    /// Render of the scene at the last refresh.
    pub source: ImageBuffer,
    pub target: ImageBuffer,
    pub last_refresh: usize,
    /// Where a local edit is allowed to act in this view.
    pub region: Option<Mask2D>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SupervisionDataset {
    pub entries: Vec<DatasetEntry>,
}

impl SupervisionDataset {
    /// One entry per camera with source and target set to the current
    /// render.
    pub fn from_renders(
        cloud: &GaussianCloud,
        field: &DeformationField,
        cameras: &[CameraPose],
        regions: Option<Vec<Mask2D>>,
        background: Rgb,
    ) -> Result<Self> {
        if let Some(r) = &regions {
            if r.len() != cameras.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} regions for {} cameras",
                    r.len(),
                    cameras.len()
                )));
            }
        }
        let mut entries = Vec::with_capacity(cameras.len());
        for (k, cam) in cameras.iter().enumerate() {
            let img = render(cloud, field, cam, background)?;
            let region = regions.as_ref().map(|r| r[k].clone());
            if let Some(r) = &region {
                r.ensure_matches(&img)?;
            }
            entries.push(DatasetEntry {
                camera: cam.clone(),
                time: cam.time,
                source: img.clone(),
                target: img,
                last_refresh: 0,
                region,
            });
        }
        let ds = SupervisionDataset { entries };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, e) in self.entries.iter().enumerate() {
            let (w, h) = (e.camera.width, e.camera.height);
            for (name, img) in [("source", &e.source), ("target", &e.target)] {
                if img.width != w || img.height != h {
                    return Err(Error::DimensionMismatch(format!(
                        "entry {k} {name} is {}x{}, camera is {w}x{h}",
                        img.width, img.height
                    )));
                }
            }
        }
        Ok(())
    }

    /// Entries due for a refresh at `iteration`.
    pub fn due(&self, iteration: usize, period: usize) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&k| iteration.saturating_sub(self.entries[k].last_refresh) >= period)
            .collect()
    }
}

/// Picks the three companion views for entry `k`: other entries at the
/// same time, drawn without replacement, or with replacement (including `k`
/// itself) when fewer than three exist.
pub fn grid_companions(dataset: &SupervisionDataset, k: usize, rng: &mut Rng) -> [usize; 3] {
    let t = dataset.entries[k].time;
    let others: Vec<usize> = (0..dataset.len())
        .filter(|&j| j != k && dataset.entries[j].time == t)
        .collect();
    if others.len() >= 3 {
        let picks = index::sample(rng, others.len(), 3);
        [others[picks.index(0)], others[picks.index(1)], others[picks.index(2)]]
    } else {
        let mut pool = others;
        pool.push(k);
        [0; 3].map(|_| pool[rng.random_range(0..pool.len())])
    }
}

struct Job {
    entry: usize,
    grid: ImageBuffer,
    region: Option<Mask2D>,
}

/// Re-edits the listed entries: renders the current scene, places each due
/// view in the top-left cell of a grid with three companions, edits the
/// grid, and writes back only that cell. Entries whose oracle call fails keep
/// their previous target and the first error is returned after all
/// successful results are written.
#[allow(clippy::too_many_arguments)]
pub fn refresh_entries(
    dataset: &mut SupervisionDataset,
    indices: &[usize],
    oracle: &dyn EditOracle,
    cloud: &GaussianCloud,
    field: &DeformationField,
    background: Rgb,
    iteration: usize,
    rng: &mut Rng,
    max_in_flight: usize,
) -> Result<Vec<usize>> {
    if indices.is_empty() {
        return Ok(Vec::new());
    }
    let mut renders: BTreeMap<usize, ImageBuffer> = BTreeMap::new();
    let mut jobs = Vec::with_capacity(indices.len());
    for &k in indices {
        if k >= dataset.len() {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: dataset.len(),
            });
        }
        let cells = {
            let c = grid_companions(dataset, k, rng);
            [k, c[0], c[1], c[2]]
        };
        for &j in &cells {
            if let std::collections::btree_map::Entry::Vacant(slot) = renders.entry(j) {
                slot.insert(render(cloud, field, &dataset.entries[j].camera, background)?);
            }
        }
        let views: Vec<ImageBuffer> = cells.iter().map(|j| renders[j].clone()).collect();
        let region = if cells.iter().all(|&j| dataset.entries[j].region.is_some()) {
            let masks: Vec<Mask2D> = cells
                .iter()
                .map(|&j| dataset.entries[j].region.clone().expect("checked"))
                .collect();
            Some(assemble_mask_grid(&masks)?)
        } else {
            None
        };
        jobs.push(Job {
            entry: k,
            grid: assemble_grid(&views)?,
            region,
        });
    }

    let mut results: Vec<Result<ImageBuffer>> = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(max_in_flight.max(1)) {
        if chunk.len() == 1 {
            results.push(oracle.edit_grid(&chunk[0].grid, chunk[0].region.as_ref()));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|job| s.spawn(move || oracle.edit_grid(&job.grid, job.region.as_ref())))
                .collect();
            for h in handles {
                results.push(h.join().unwrap_or_else(|_| Err(Error::InvalidInput("oracle thread panicked".into()))));
            }
        });
    }

    let mut first_err = None;
    let mut refreshed = Vec::new();
    for (job, res) in jobs.iter().zip(results) {
        let outcome = res.and_then(|edited| {
            if !edited.same_size(&job.grid) {
                return Err(Error::MalformedResponse(format!(
                    "oracle returned {}x{} for a {}x{} grid",
                    edited.width, edited.height, job.grid.width, job.grid.height
                )));
            }
            let [first, ..] = split_grid(&edited)?;
            Ok(first)
        });
        match outcome {
            Ok(target) => {
                let e = &mut dataset.entries[job.entry];
                e.source = renders[&job.entry].clone();
                e.target = target;
                e.last_refresh = iteration;
                refreshed.push(job.entry);
            }
            Err(err) => {
                first_err.get_or_insert(err);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(refreshed),
    }
}

/// Refreshes every entry with `iteration - last_refresh >= period`.
#[allow(clippy::too_many_arguments)]
pub fn idu_refresh(
    dataset: &mut SupervisionDataset,
    oracle: &dyn EditOracle,
    cloud: &GaussianCloud,
    field: &DeformationField,
    background: Rgb,
    iteration: usize,
    period: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if period == 0 {
        return Err(Error::Config("refresh period must be at least 1".into()));
    }
    let due = dataset.due(iteration, period);
    refresh_entries(dataset, &due, oracle, cloud, field, background, iteration, rng, DEFAULT_MAX_IN_FLIGHT)
}
