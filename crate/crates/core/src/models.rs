//! The two classifiers, their flat parameter layout, and scaled initialization.
//!
//! Ising: conv(1→2, k2, s2) → ReLU → conv(2→4, k2, s2) → ReLU → flatten →
//! fc(64→100) → ReLU → fc(100→2). ModAdd: fc(2P→512) → ReLU → fc(512→P).
//!
//! Linear weights are stored `[in, out]` (the layer computes `x·W + b`), conv
//! kernels `[out_c, in_c, k, k]`. Every layer owns one contiguous weight range
//! followed by its bias range in the flat vector.

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ising::Snapshot;
use crate::modadd::ModAddSample;
use crate::numerics::{GradMode, Graph, NodeId, Tensor};
use crate::rng::derive_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ising,
    ModAdd,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Ising => "ising",
            Task::ModAdd => "modadd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Linear,
}

/// One entry of a parameter vector's layer map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
    /// Weight shape: `[in, out]` for linear, `[out_c, in_c, k, k]` for conv.
    pub shape: Vec<usize>,
    /// Conv stride; 1 for linear layers.
    pub stride: usize,
}

impl LayerEntry {
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Linear => self.shape[0],
            LayerKind::Conv => self.shape[1..].iter().product(),
        }
    }

    /// Output units: columns for linear, channels for conv.
    pub fn outputs(&self) -> usize {
        match self.kind {
            LayerKind::Linear => self.shape[1],
            LayerKind::Conv => self.shape[0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub task: Task,
    /// Per-sample input shape (`[1, L, L]` or `[2P]`).
    pub input_shape: Vec<usize>,
    pub classes: usize,
    layers: Vec<LayerEntry>,
}

struct Builder {
    layers: Vec<LayerEntry>,
    offset: usize,
}

impl Builder {
    fn add(&mut self, name: &str, kind: LayerKind, shape: Vec<usize>, stride: usize) {
        let nw: usize = shape.iter().product();
        let nb = match kind {
            LayerKind::Linear => shape[1],
            LayerKind::Conv => shape[0],
        };
        let weight = self.offset..self.offset + nw;
        let bias = weight.end..weight.end + nb;
        self.offset = bias.end;
        self.layers.push(LayerEntry { name: name.into(), kind, weight, bias, shape, stride });
    }
}

impl Architecture {
    pub const ISING_CHANNELS: [usize; 2] = [2, 4];
    pub const ISING_HIDDEN: usize = 100;
    pub const MODADD_HIDDEN: usize = 512;

    pub fn ising(size: usize) -> Result<Self> {
        let [c1, c2] = Self::ISING_CHANNELS;
        let s1 = size.checked_sub(2).map(|v| v / 2 + 1);
        let s2 = s1.and_then(|s| s.checked_sub(2)).map(|v| v / 2 + 1);
        let Some(s2) = s2 else {
            return Err(Error::dim(format!("lattice size {size} too small for two stride-2 convolutions")));
        };
        let mut b = Builder { layers: Vec::new(), offset: 0 };
        b.add("conv1", LayerKind::Conv, vec![c1, 1, 2, 2], 2);
        b.add("conv2", LayerKind::Conv, vec![c2, c1, 2, 2], 2);
        b.add("fc1", LayerKind::Linear, vec![c2 * s2 * s2, Self::ISING_HIDDEN], 1);
        b.add("fc2", LayerKind::Linear, vec![Self::ISING_HIDDEN, 2], 1);
        Ok(Architecture { task: Task::Ising, input_shape: vec![1, size, size], classes: 2, layers: b.layers })
    }

    pub fn modadd(modulus: usize) -> Self {
        let mut b = Builder { layers: Vec::new(), offset: 0 };
        b.add("fc1", LayerKind::Linear, vec![2 * modulus, Self::MODADD_HIDDEN], 1);
        b.add("fc2", LayerKind::Linear, vec![Self::MODADD_HIDDEN, modulus], 1);
        Architecture { task: Task::ModAdd, input_shape: vec![2 * modulus], classes: modulus, layers: b.layers }
    }

    pub fn layers(&self) -> &[LayerEntry] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Result<&LayerEntry> {
        find_layer(&self.layers, name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.end)
    }

    pub fn input_width(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector { values: vec![0.0; self.param_count()], layers: self.layers.clone() }
    }
}

fn find_layer<'l>(layers: &'l [LayerEntry], name: &str) -> Result<&'l LayerEntry> {
    layers
        .iter()
        .find(|l| l.name == name)
        .ok_or_else(|| Error::UnknownLayer(name.to_string()))
}

/// Flat parameter vector θ with its layer map.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layers: Vec<LayerEntry>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layers: Vec<LayerEntry>) -> Result<Self> {
        let mut next = 0;
        for l in &layers {
            let nw: usize = l.shape.iter().product();
            if l.weight.start != next || l.weight.len() != nw || l.bias.start != l.weight.end || l.bias.len() != l.outputs() {
                return Err(Error::dim(format!("layer {} does not continue the layout at {next}", l.name)));
            }
            next = l.bias.end;
        }
        if next != values.len() {
            return Err(Error::dim(format!("layer map covers {next} values, vector has {}", values.len())));
        }
        Ok(ParamVector { values, layers })
    }

    /// Same layout, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::dim(format!("{} values for a {}-parameter layout", values.len(), self.values.len())));
        }
        Ok(ParamVector { values, layers: self.layers.clone() })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layers(&self) -> &[LayerEntry] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Result<&LayerEntry> {
        find_layer(&self.layers, name)
    }

    pub fn weights(&self, layer: &LayerEntry) -> &[f64] {
        &self.values[layer.weight.clone()]
    }

    pub fn bias(&self, layer: &LayerEntry) -> &[f64] {
        &self.values[layer.bias.clone()]
    }

    /// Weight ranges of every layer, in layout order.
    pub fn weight_ranges(&self) -> Vec<Range<usize>> {
        self.layers.iter().map(|l| l.weight.clone()).collect()
    }

    /// Per-layer `(weight, bias)` tensors.
    pub fn unflatten(&self) -> Vec<(Tensor, Tensor)> {
        self.layers
            .iter()
            .map(|l| {
                let w = Tensor::new(l.shape.clone(), self.values[l.weight.clone()].to_vec()).expect("layout invariant");
                let b = Tensor::new(vec![l.outputs()], self.values[l.bias.clone()].to_vec()).expect("layout invariant");
                (w, b)
            })
            .collect()
    }

    pub fn flatten(layers: Vec<LayerEntry>, tensors: &[(Tensor, Tensor)]) -> Result<Self> {
        if layers.len() != tensors.len() {
            return Err(Error::dim(format!("{} tensor pairs for {} layers", tensors.len(), layers.len())));
        }
        let mut values = Vec::new();
        for (l, (w, b)) in layers.iter().zip(tensors) {
            if w.shape() != l.shape.as_slice() || b.len() != l.outputs() {
                return Err(Error::dim(format!("layer {}: tensor shapes do not match the layer map", l.name)));
            }
            values.extend_from_slice(w.data());
            values.extend_from_slice(b.data());
        }
        ParamVector::new(values, layers)
    }
}

/// Weights uniform on `±√(1/fan_in)` times `w0`; biases zero and unscaled.
pub fn init(arch: &Architecture, w0: f64, seed: u64) -> Result<ParamVector> {
    if !(w0 > 0.0 && w0.is_finite()) {
        return Err(Error::Domain(format!("weight multiplier must be positive, got {w0}")));
    }
    let mut p = arch.zeros();
    for (i, l) in arch.layers.iter().enumerate() {
        let bound = (1.0 / l.fan_in() as f64).sqrt();
        let mut rng = derive_rng(seed, arch.task.name(), "init", i as u64);
        for v in &mut p.values[l.weight.clone()] {
            *v = rng.gen_range(-bound..bound) * w0;
        }
    }
    Ok(p)
}

/// Records the network on `g`. Returns the logits node and the pre-activation
/// node of every layer.
pub(crate) fn record<'a>(
    arch: &Architecture,
    params: &'a [f64],
    g: &mut Graph<'a>,
    x: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    if params.len() != arch.param_count() {
        return Err(Error::dim(format!("{} parameters for a {}-parameter model", params.len(), arch.param_count())));
    }
    let mut h = x;
    let mut pre = Vec::with_capacity(arch.layers.len());
    let last = arch.layers.len() - 1;
    for (i, l) in arch.layers.iter().enumerate() {
        let w = g.param(l.shape.clone(), &params[l.weight.clone()], l.weight.start)?;
        let b = g.param(vec![l.outputs()], &params[l.bias.clone()], l.bias.start)?;
        let z = match l.kind {
            LayerKind::Conv => g.conv2d(h, w, b, l.stride)?,
            LayerKind::Linear => {
                if g.shape(h).len() != 2 {
                    h = g.flatten(h)?;
                }
                g.linear(h, w, b)?
            }
        };
        pre.push(z);
        h = if i == last { z } else { g.relu(z)? };
    }
    Ok((h, pre))
}

fn batch_shape(arch: &Architecture, rows: usize) -> Vec<usize> {
    let mut s = vec![rows];
    s.extend_from_slice(&arch.input_shape);
    s
}

fn input_rows(arch: &Architecture, input: &[f64]) -> Result<usize> {
    let w = arch.input_width();
    if w == 0 || input.len() % w != 0 {
        return Err(Error::dim(format!("input of {} values is not a whole number of {w}-wide rows", input.len())));
    }
    Ok(input.len() / w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Pre-activation of every layer, in layer order.
    pub pre_activations: Vec<Tensor>,
}

/// Runs the model on a batch whose leading axis is the sample axis.
pub fn forward(arch: &Architecture, params: &ParamVector, input: &Tensor) -> Result<ForwardOutput> {
    let per: usize = input.shape().iter().skip(1).product();
    if input.shape().len() < 2 || per != arch.input_width() {
        return Err(Error::dim(format!("input shape {:?} does not match {:?}", input.shape(), arch.input_shape)));
    }
    let rows = input.shape()[0];
    let mut g = Graph::new();
    let x = g.input_borrowed(batch_shape(arch, rows), input.data())?;
    let (logits, pre) = record(arch, params.values(), &mut g, x)?;
    Ok(ForwardOutput { logits: g.tensor(logits), pre_activations: pre.into_iter().map(|id| g.tensor(id)).collect() })
}

/// Mean cross-entropy of a batch; the gradient of that mean is written to
/// `grads` (overwritten).
pub fn loss_and_grad(arch: &Architecture, params: &[f64], input: &[f64], targets: &[usize], grads: &mut [f64]) -> Result<f64> {
    let rows = input_rows(arch, input)?;
    let mut g = Graph::new();
    let x = g.input_borrowed(batch_shape(arch, rows), input)?;
    let (logits, _) = record(arch, params, &mut g, x)?;
    let loss = g.softmax_cross_entropy(logits, targets)?;
    g.backward(loss, grads)?;
    Ok(g.value(loss)[0])
}

/// Backpropagates `seed` (one row of logit gradients per sample) and adds the
/// per-sample squared parameter gradients into `acc`.
pub(crate) fn accumulate_squared_grads(
    arch: &Architecture,
    params: &[f64],
    input: &[f64],
    seeds: &[Vec<f64>],
    acc: &mut [f64],
) -> Result<()> {
    let rows = input_rows(arch, input)?;
    let mut g = Graph::new();
    let x = g.input_borrowed(batch_shape(arch, rows), input)?;
    let (logits, _) = record(arch, params, &mut g, x)?;
    for seed in seeds {
        g.backward_from(logits, seed, acc, GradMode::SquaredPerRow)?;
    }
    Ok(())
}

/// Logits for a batch of flat input rows.
pub fn logits(arch: &Architecture, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    let rows = input_rows(arch, input)?;
    let mut g = Graph::new();
    let x = g.input_borrowed(batch_shape(arch, rows), input)?;
    let (logits, _) = record(arch, params, &mut g, x)?;
    Ok(g.value(logits).to_vec())
}

/// Dense feature rows with integer class targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    width: usize,
    targets: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, width: usize, targets: Vec<usize>) -> Result<Self> {
        if features.len() != width * targets.len() {
            return Err(Error::dim(format!("{} features for {} rows of width {width}", features.len(), targets.len())));
        }
        Ok(Dataset { features, width, targets })
    }

    pub fn from_snapshots(snaps: &[Snapshot]) -> Result<Self> {
        let width = snaps.first().map_or(0, |s| s.size() * s.size());
        let mut features = Vec::with_capacity(width * snaps.len());
        for s in snaps {
            if s.size() * s.size() != width {
                return Err(Error::dim("snapshots of mixed lattice sizes"));
            }
            features.extend(s.spins().iter().map(|&v| v as f64));
        }
        Dataset::new(features, width, snaps.iter().map(|s| s.label.class()).collect())
    }

    pub fn from_modadd(samples: &[ModAddSample]) -> Result<Self> {
        let width = samples.first().map_or(0, |s| 2 * s.modulus);
        let mut features = vec![0.0; width * samples.len()];
        for (i, s) in samples.iter().enumerate() {
            if 2 * s.modulus != width {
                return Err(Error::dim("samples of mixed moduli"));
            }
            s.write_input(&mut features[i * width..(i + 1) * width]);
        }
        Dataset::new(features, width, samples.iter().map(|s| s.target).collect())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    /// Contiguous rows `range` as (features, targets).
    pub fn rows(&self, range: Range<usize>) -> (&[f64], &[usize]) {
        (&self.features[range.start * self.width..range.end * self.width], &self.targets[range])
    }

    /// Copies the rows at `idx` into `features`/`targets` (cleared first).
    pub fn gather_into(&self, idx: &[usize], features: &mut Vec<f64>, targets: &mut Vec<usize>) {
        features.clear();
        targets.clear();
        for &i in idx {
            features.extend_from_slice(self.row(i));
            targets.push(self.targets[i]);
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (mut f, mut t) = (Vec::new(), Vec::new());
        self.gather_into(idx, &mut f, &mut t);
        Dataset { features: f, width: self.width, targets: t }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

const EVAL_CHUNK: usize = 1024;

/// Index of the largest value; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and accuracy over a whole dataset.
pub fn evaluate(arch: &Architecture, params: &[f64], data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Ok(Metrics { loss: f64::NAN, accuracy: f64::NAN });
    }
    let c = arch.classes;
    let (mut loss, mut correct) = (0.0, 0usize);
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let (x, t) = data.rows(start..end);
        let z = logits(arch, params, x)?;
        for (i, &target) in t.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            loss += crate::numerics::softmax_cross_entropy(row, target)?;
            correct += usize::from(argmax(row) == target);
        }
        start = end;
    }
    let n = data.len() as f64;
    Ok(Metrics { loss: loss / n, accuracy: correct as f64 / n })
}

#[cfg(test)]
mod tests;
