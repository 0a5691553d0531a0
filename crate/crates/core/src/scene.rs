//! Dynamic scene representation: a canonical Gaussian cloud plus a
//! time-conditioned deformation field that offsets per-Gaussian parameters.

use nalgebra::Vector3;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum raw quaternion norm accepted by [`GaussianPrimitive::activate`].
pub const MIN_QUAT_NORM: f64 = 1e-8;

/// Raw (pre-activation) parameters of one splat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub id: u64,
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    /// Quaternion `(w, x, y, z)`, normalised on activation.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

/// Parameters after activation, ready for projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivatedGaussian {
    pub id: u64,
    pub position: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl GaussianPrimitive {
    pub fn activate(&self) -> Result<ActivatedGaussian> {
        let norm = quat_norm(&self.rotation);
        if !(norm > MIN_QUAT_NORM) {
            return Err(Error::DegenerateRotation { id: self.id, norm });
        }
        let q = self.rotation.map(|v| v / norm);
        Ok(ActivatedGaussian {
            id: self.id,
            position: Vector3::from(self.position),
            scale: Vector3::from(self.log_scale.map(f64::exp)),
            rotation: q,
            opacity: sigmoid(self.opacity_logit),
            color: self.color.map(|c| c.clamp(0.0, 1.0)),
        })
    }

    /// Inverse of [`activate`](Self::activate) for in-range values.
    pub fn from_activated(g: &ActivatedGaussian) -> Self {
        GaussianPrimitive {
            id: g.id,
            position: g.position.into(),
            log_scale: [g.scale.x.ln(), g.scale.y.ln(), g.scale.z.ln()],
            rotation: g.rotation,
            opacity_logit: logit(g.opacity),
            color: g.color,
        }
    }

    /// Largest activated per-axis scale.
    pub fn max_scale(&self) -> f64 {
        self.log_scale
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
            .exp()
    }
}

/// Ordered collection of primitives. Storage order is the canonical index
/// order that edit masks align to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianCloud {
    primitives: Vec<GaussianPrimitive>,
    next_id: u64,
    generation: u64,
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a cloud from primitives that already carry ids.
    pub fn from_primitives(primitives: Vec<GaussianPrimitive>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(primitives.len());
        for p in &primitives {
            if !seen.insert(p.id) {
                return Err(Error::InvalidInput(format!("duplicate gaussian id {}", p.id)));
            }
        }
        let next_id = primitives.iter().map(|p| p.id + 1).max().unwrap_or(0);
        Ok(GaussianCloud {
            primitives,
            next_id,
            generation: 0,
        })
    }

    /// Restores a saved cloud with its id counter and generation.
    pub fn from_parts(primitives: Vec<GaussianPrimitive>, next_id: u64, generation: u64) -> Result<Self> {
        let mut cloud = Self::from_primitives(primitives)?;
        if next_id < cloud.next_id {
            return Err(Error::InvalidInput(format!(
                "next_id {next_id} does not exceed the largest id {}",
                cloud.next_id.saturating_sub(1)
            )));
        }
        cloud.next_id = next_id;
        cloud.generation = generation;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    /// Mutable access to parameters. Ids must not be changed through this.
    pub fn primitives_mut(&mut self) -> &mut [GaussianPrimitive] {
        &mut self.primitives
    }

    pub fn get(&self, index: usize) -> Option<&GaussianPrimitive> {
        self.primitives.get(index)
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn ids(&self) -> Vec<u64> {
        self.primitives.iter().map(|p| p.id).collect()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.primitives.iter().position(|p| p.id == id)
    }

    /// Appends a primitive with a freshly allocated id (the incoming id is
    /// overwritten) and returns that id.
    pub fn push(&mut self, mut primitive: GaussianPrimitive) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        primitive.id = id;
        self.primitives.push(primitive);
        self.generation += 1;
        id
    }

    pub fn remove(&mut self, index: usize) -> Result<GaussianPrimitive> {
        if index >= self.primitives.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.primitives.len(),
            });
        }
        self.generation += 1;
        Ok(self.primitives.remove(index))
    }

    /// Cloud of the primitives whose `keep` flag is set, in storage order.
    pub fn subcloud(&self, keep: &[bool]) -> GaussianCloud {
        GaussianCloud {
            primitives: self
                .primitives
                .iter()
                .zip(keep)
                .filter(|(_, k)| **k)
                .map(|(p, _)| p.clone())
                .collect(),
            next_id: self.next_id,
            generation: self.generation,
        }
    }
}

/// A normalised timeline coordinate in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct TimeSample(f64);

impl TimeSample {
    pub fn new(t: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(TimeSample(t))
        } else {
            Err(Error::InvalidInput(format!("time {t} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Fourier features `[sin(2^k pi t), cos(2^k pi t)]` for `k = 0..order`.
pub fn time_embed(t: TimeSample, order: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * order);
    for k in 0..order {
        let arg = (1u64 << k) as f64 * std::f64::consts::PI * t.value();
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Which raw attributes the deformation field offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeformedAttributes {
    pub position: bool,
    pub rotation: bool,
    pub log_scale: bool,
}

impl Default for DeformedAttributes {
    fn default() -> Self {
        DeformedAttributes {
            position: true,
            rotation: true,
            log_scale: true,
        }
    }
}

impl DeformedAttributes {
    pub const NONE: DeformedAttributes = DeformedAttributes {
        position: false,
        rotation: false,
        log_scale: false,
    };

    /// Output width of the field: position(3) + rotation(4) + log_scale(3),
    /// counting only the enabled attributes, in that order.
    pub fn width(&self) -> usize {
        3 * self.position as usize + 4 * self.rotation as usize + 3 * self.log_scale as usize
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.position {
            out.push("position");
        }
        if self.rotation {
            out.push("rotation");
        }
        if self.log_scale {
            out.push("log_scale");
        }
        out
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut attrs = DeformedAttributes::NONE;
        for name in names {
            match name.as_ref() {
                "position" => attrs.position = true,
                "rotation" => attrs.rotation = true,
                "log_scale" => attrs.log_scale = true,
                other => {
                    return Err(Error::InvalidInput(format!(
                        "unknown deformed attribute {other:?}"
                    )))
                }
            }
        }
        Ok(attrs)
    }
}

/// Fully connected layer with row-major weights of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let out_dim = rows.len();
        if bias.len() != out_dim {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} != {} weight rows",
                bias.len(),
                out_dim
            )));
        }
        let in_dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != in_dim) {
            return Err(Error::ShapeMismatch("ragged weight matrix".into()));
        }
        Ok(DenseLayer {
            in_dim,
            out_dim,
            weights: rows.into_iter().flatten().collect(),
            bias,
        })
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        if self.in_dim == 0 {
            return vec![Vec::new(); self.out_dim];
        }
        self.weights.chunks(self.in_dim).map(<[f64]>::to_vec).collect()
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks(self.in_dim.max(1)).zip(&self.bias) {
            let dot: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
            out.push(dot + b);
        }
        // `chunks` yields nothing for empty weights.
        if self.in_dim == 0 {
            out.clear();
            out.extend_from_slice(&self.bias);
        }
    }
}

/// Small MLP mapping `(position, time embedding)` to raw-parameter offsets.
/// Hidden layers use `tanh`; the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub layers: Vec<DenseLayer>,
    pub time_embed_order: usize,
    pub deformed: DeformedAttributes,
}

/// Intermediate activations of one field evaluation, needed for backprop.
#[derive(Debug, Clone, Default)]
pub struct FieldTrace {
    /// `inputs[l]` is the input of layer `l`; the last entry is the output.
    values: Vec<Vec<f64>>,
}

impl FieldTrace {
    pub fn output(&self) -> &[f64] {
        self.values.last().map_or(&[], Vec::as_slice)
    }
}

/// Per-Gaussian offsets split by attribute (zeros when not deformed).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Offsets {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
}

pub const DEFAULT_TIME_EMBED_ORDER: usize = 6;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

impl DeformationField {
    /// Randomly initialised hidden layers with a zeroed output layer, so the
    /// field starts as the identity deformation.
    pub fn new(
        time_embed_order: usize,
        deformed: DeformedAttributes,
        hidden: &[usize],
        rng: &mut impl rand::Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut in_dim = 3 + 2 * time_embed_order;
        for &width in hidden {
            let std = (1.0 / in_dim as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut layer = DenseLayer::zeros(in_dim, width);
            for w in &mut layer.weights {
                *w = normal.sample(rng);
            }
            for b in &mut layer.bias {
                *b = rng.random_range(-0.1..0.1);
            }
            layers.push(layer);
            in_dim = width;
        }
        layers.push(DenseLayer::zeros(in_dim, deformed.width()));
        DeformationField {
            layers,
            time_embed_order,
            deformed,
        }
    }

    /// A field with no layers and no deformed attributes: the identity.
    pub fn identity() -> Self {
        DeformationField {
            layers: Vec::new(),
            time_embed_order: 1,
            deformed: DeformedAttributes::NONE,
        }
    }

    pub fn input_width(&self) -> usize {
        3 + 2 * self.time_embed_order
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_embed_order == 0 {
            return Err(Error::ShapeMismatch("time embedding order must be >= 1".into()));
        }
        let out = self.deformed.width();
        if self.layers.is_empty() {
            return if out == 0 {
                Ok(())
            } else {
                Err(Error::ShapeMismatch(format!(
                    "field has no layers but must output {out} offsets"
                )))
            };
        }
        let mut width = self.input_width();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_dim != width {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} expects input width {} but receives {width}",
                    layer.in_dim
                )));
            }
            if layer.weights.len() != layer.in_dim * layer.out_dim
                || layer.bias.len() != layer.out_dim
            {
                return Err(Error::ShapeMismatch(format!("layer {i} storage size")));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::ShapeMismatch(format!("layer {i} has non-finite weights")));
            }
            width = layer.out_dim;
        }
        if width != out {
            return Err(Error::ShapeMismatch(format!(
                "field outputs {width} values but deformed attributes need {out}"
            )));
        }
        Ok(())
    }

    /// Whether evaluation can be skipped entirely.
    pub fn is_inert(&self) -> bool {
        self.deformed.width() == 0
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flattened parameters: for each layer, weights (row-major) then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} field parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.weights.len();
            layer.weights.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
            let n = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Evaluates the MLP on `position ++ embedding`, recording activations.
    pub fn forward(&self, position: &[f64; 3], embedding: &[f64]) -> FieldTrace {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        let mut input = Vec::with_capacity(self.input_width());
        input.extend_from_slice(position);
        input.extend_from_slice(embedding);
        values.push(input);
        let last = self.layers.len().saturating_sub(1);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.apply(&values[l], &mut out);
            if l != last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            values.push(out);
        }
        FieldTrace { values }
    }

    /// Splits a raw output vector into per-attribute offsets.
    pub fn split_output(&self, output: &[f64]) -> Offsets {
        let mut off = Offsets::default();
        let mut i = 0;
        if self.deformed.position {
            off.position.copy_from_slice(&output[i..i + 3]);
            i += 3;
        }
        if self.deformed.rotation {
            off.rotation.copy_from_slice(&output[i..i + 4]);
            i += 4;
        }
        if self.deformed.log_scale {
            off.log_scale.copy_from_slice(&output[i..i + 3]);
        }
        off
    }

    /// Packs per-attribute output gradients into the output layout.
    pub fn pack_output_grad(&self, grad: &Offsets) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.deformed.width());
        if self.deformed.position {
            out.extend_from_slice(&grad.position);
        }
        if self.deformed.rotation {
            out.extend_from_slice(&grad.rotation);
        }
        if self.deformed.log_scale {
            out.extend_from_slice(&grad.log_scale);
        }
        out
    }

    /// Backpropagates `d_output` through a recorded evaluation. Parameter
    /// gradients are added into `param_grad` (flat layout); returns the
    /// gradient with respect to the position part of the input.
    pub fn backward(&self, trace: &FieldTrace, d_output: &[f64], param_grad: &mut [f64]) -> [f64; 3] {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.weights.len() + layer.bias.len();
        }
        let last = self.layers.len().saturating_sub(1);
        let mut delta = d_output.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if l != last {
                // d tanh(z) = 1 - tanh^2
                for (d, y) in delta.iter_mut().zip(&trace.values[l + 1]) {
                    *d *= 1.0 - y * y;
                }
            }
            let input = &trace.values[l];
            let base = offsets[l];
            let (wg, bg) = param_grad[base..base + layer.weights.len() + layer.bias.len()]
                .split_at_mut(layer.weights.len());
            let mut d_input = vec![0.0; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                bg[o] += d;
                let row = o * layer.in_dim;
                for i in 0..layer.in_dim {
                    wg[row + i] += d * input[i];
                    d_input[i] += d * layer.weights[row + i];
                }
            }
            delta = d_input;
        }
        let mut out = [0.0; 3];
        if delta.len() >= 3 {
            out.copy_from_slice(&delta[..3]);
        }
        out
    }

    /// Offsets for one raw primitive at the given embedding.
    pub fn offsets(&self, primitive: &GaussianPrimitive, embedding: &[f64]) -> Offsets {
        if self.is_inert() {
            return Offsets::default();
        }
        let trace = self.forward(&primitive.position, embedding);
        self.split_output(trace.output())
    }
}

/// Applies offsets in raw parameter space; non-deformed attributes are
/// copied untouched.
pub fn apply_offsets(p: &GaussianPrimitive, off: &Offsets, attrs: DeformedAttributes) -> GaussianPrimitive {
    let mut out = p.clone();
    if attrs.position {
        for k in 0..3 {
            out.position[k] += off.position[k];
        }
    }
    if attrs.rotation {
        for k in 0..4 {
            out.rotation[k] += off.rotation[k];
        }
    }
    if attrs.log_scale {
        for k in 0..3 {
            out.log_scale[k] += off.log_scale[k];
        }
    }
    out
}

/// Evaluates the deformed cloud at time `t`: same ids and order, with the
/// field's offsets added to the deformed raw attributes.
pub fn deform_at(cloud: &GaussianCloud, field: &DeformationField, t: TimeSample) -> Result<GaussianCloud> {
    field.validate()?;
    if field.is_inert() {
        return Ok(cloud.clone());
    }
    let embedding = time_embed(t, field.time_embed_order);
    let primitives = cloud
        .primitives()
        .iter()
        .map(|p| apply_offsets(p, &field.offsets(p, &embedding), field.deformed))
        .collect();
    Ok(GaussianCloud {
        primitives,
        next_id: cloud.next_id,
        generation: cloud.generation,
    })
}
