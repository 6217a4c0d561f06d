//! Feature interpretability: neuron/observable correlations for the Ising
//! model, Fourier-basis localization (IPR) for modular addition, and Gini
//! coefficients.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ising::{energy, magnetization, Snapshot};
use crate::models::{self, Architecture, ParamVector};
use crate::numerics::Tensor;

/// Pearson correlation coefficient, clamped to `[−1, 1]`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim(format!("series of lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// The three candidate features of an Ising snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Energy,
    Magnetization,
    AbsMagnetization,
}

impl Feature {
    pub const ALL: [Feature; 3] = [Feature::Energy, Feature::Magnetization, Feature::AbsMagnetization];
}

/// Observable series aligned with a list of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Observables {
    pub energy: Vec<f64>,
    pub magnetization: Vec<f64>,
    pub abs_magnetization: Vec<f64>,
}

impl Observables {
    pub fn of(snaps: &[Snapshot]) -> Self {
        let m: Vec<f64> = snaps.iter().map(|s| magnetization(s) as f64).collect();
        Observables {
            energy: snaps.iter().map(|s| energy(s) as f64).collect(),
            abs_magnetization: m.iter().map(|v| v.abs()).collect(),
            magnetization: m,
        }
    }

    pub fn len(&self) -> usize {
        self.energy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energy.is_empty()
    }

    fn series(&self, f: Feature) -> &[f64] {
        match f {
            Feature::Energy => &self.energy,
            Feature::Magnetization => &self.magnetization,
            Feature::AbsMagnetization => &self.abs_magnetization,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronStat {
    pub layer: String,
    pub neuron: usize,
    pub r_energy: f64,
    pub r_magnetization: f64,
    pub r_abs_magnetization: f64,
    /// Share of the layer's total absolute pre-activation.
    pub weight: f64,
    /// Constant pre-activation; its correlations are recorded as 0.
    pub dead: bool,
}

impl NeuronStat {
    pub fn r(&self, f: Feature) -> f64 {
        match f {
            Feature::Energy => self.r_energy,
            Feature::Magnetization => self.r_magnetization,
            Feature::AbsMagnetization => self.r_abs_magnetization,
        }
    }

    /// Feature with the largest `|r|`; ties go to the earlier feature.
    pub fn dominant(&self) -> Feature {
        let mut best = Feature::Energy;
        for f in Feature::ALL {
            if self.r(f).abs() > self.r(best).abs() {
                best = f;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronCorrelations {
    pub layer: String,
    pub neurons: Vec<NeuronStat>,
}

/// Correlates every neuron of a `[samples × neurons]` pre-activation matrix
/// with the observables.
pub fn correlate_neurons(layer: &str, z: &[f64], neurons: usize, obs: &Observables) -> Result<NeuronCorrelations> {
    let samples = obs.len();
    if z.len() != samples * neurons {
        return Err(Error::dim(format!("{} pre-activations for {samples} samples × {neurons} neurons", z.len())));
    }
    let mut mass = vec![0.0; neurons];
    for row in z.chunks_exact(neurons.max(1)) {
        for (m, v) in mass.iter_mut().zip(row) {
            *m += v.abs();
        }
    }
    let total: f64 = mass.iter().sum();
    let mut out = Vec::with_capacity(neurons);
    let mut col = vec![0.0; samples];
    for k in 0..neurons {
        for (i, c) in col.iter_mut().enumerate() {
            *c = z[i * neurons + k];
        }
        let mut r = [0.0; 3];
        let mut dead = false;
        for (slot, f) in r.iter_mut().zip(Feature::ALL) {
            match pearson(&col, obs.series(f)) {
                Ok(v) => *slot = v,
                Err(Error::UndefinedCorrelation(_)) => dead = true,
                Err(e) => return Err(e),
            }
        }
        let weight = if total > 0.0 { mass[k] / total } else { 1.0 / neurons as f64 };
        out.push(NeuronStat {
            layer: layer.to_string(),
            neuron: k,
            r_energy: r[0],
            r_magnetization: r[1],
            r_abs_magnetization: r[2],
            weight,
            dead,
        });
    }
    Ok(NeuronCorrelations { layer: layer.to_string(), neurons: out })
}

const CHUNK: usize = 512;

/// Pre-activations of `layer` over a snapshot set, flattened to
/// `[samples × neurons]` (conv layers: channel-major per sample).
pub fn layer_preactivations(arch: &Architecture, params: &ParamVector, snaps: &[Snapshot], layer: &str) -> Result<(Vec<f64>, usize)> {
    let idx = arch
        .layers()
        .iter()
        .position(|l| l.name == layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
    let width = arch.input_width();
    let mut z = Vec::new();
    let mut neurons = 0;
    for chunk in snaps.chunks(CHUNK) {
        let mut x = Vec::with_capacity(chunk.len() * width);
        for s in chunk {
            if s.spins().len() != width {
                return Err(Error::dim("snapshot size does not match the model"));
            }
            x.extend(s.spins().iter().map(|&v| v as f64));
        }
        let t = Tensor::new(vec![chunk.len(), width], x)?;
        let out = models::forward(arch, params, &t)?;
        let pre = &out.pre_activations[idx];
        neurons = pre.len() / chunk.len();
        z.extend_from_slice(pre.data());
    }
    Ok((z, neurons))
}

pub fn neuron_correlations(arch: &Architecture, params: &ParamVector, snaps: &[Snapshot], layer: &str) -> Result<NeuronCorrelations> {
    let (z, neurons) = layer_preactivations(arch, params, snaps, layer)?;
    correlate_neurons(layer, &z, neurons, &Observables::of(snaps))
}

/// `r̃ = (1/|L|) Σ w_k |r_k|`; `with_prefactor = false` drops the `1/|L|`.
pub fn weighted_correlation(corr: &NeuronCorrelations, feature: Feature, with_prefactor: bool) -> f64 {
    let s: f64 = corr.neurons.iter().map(|n| n.weight * n.r(feature).abs()).sum();
    if with_prefactor && !corr.neurons.is_empty() {
        s / corr.neurons.len() as f64
    } else {
        s
    }
}

/// Per feature: fraction of neurons whose largest `|r|` is that feature, and
/// the pre-activation share carried by those neurons.
pub fn dominance(corr: &NeuronCorrelations) -> [(Feature, f64, f64); 3] {
    let live: Vec<&NeuronStat> = corr.neurons.iter().filter(|n| !n.dead).collect();
    let n = live.len().max(1) as f64;
    Feature::ALL.map(|f| {
        let winners = live.iter().filter(|s| s.dominant() == f);
        let (count, share) = winners.fold((0usize, 0.0), |(c, w), s| (c + 1, w + s.weight));
        (f, count as f64 / n, share)
    })
}

/// Fraction of neurons for which `|r_energy|` strictly exceeds both
/// magnetization correlations.
pub fn energy_dominant_fraction(corr: &NeuronCorrelations) -> f64 {
    if corr.neurons.is_empty() {
        return 0.0;
    }
    let k = corr
        .neurons
        .iter()
        .filter(|n| !n.dead && n.r_energy.abs() > n.r_magnetization.abs().max(n.r_abs_magnetization.abs()))
        .count();
    k as f64 / corr.neurons.len() as f64
}

pub fn write_correlations_csv<W: Write>(w: W, layers: &[NeuronCorrelations]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "neuron", "r_E", "r_M", "r_absM", "w_k", "dead"])?;
    for l in layers {
        for n in &l.neurons {
            out.write_record([
                n.layer.clone(),
                n.neuron.to_string(),
                n.r_energy.to_string(),
                n.r_magnetization.to_string(),
                n.r_abs_magnetization.to_string(),
                n.weight.to_string(),
                n.dead.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Orthonormal real Fourier basis of size `n` as rows of an `n × n`
/// matrix: the constant mode, then `cos`/`sin` pairs for frequencies
/// `1..=(n−1)/2`, then the alternating mode when `n` is even.
pub fn fourier_basis(n: usize) -> Vec<f64> {
    let mut b = Vec::with_capacity(n * n);
    let c = (1.0 / n as f64).sqrt();
    let s = (2.0 / n as f64).sqrt();
    b.extend(std::iter::repeat(c).take(n));
    for f in 1..=(n.saturating_sub(1)) / 2 {
        b.extend((0..n).map(|j| s * (2.0 * PI * (f * j % n) as f64 / n as f64).cos()));
        b.extend((0..n).map(|j| s * (2.0 * PI * (f * j % n) as f64 / n as f64).sin()));
    }
    if n % 2 == 0 && n > 0 {
        b.extend((0..n).map(|j| if j % 2 == 0 { c } else { -c }));
    }
    b
}

/// Frequency carried by each row of [`fourier_basis`].
pub fn basis_frequencies(n: usize) -> Vec<usize> {
    let mut f = vec![0];
    for k in 1..=(n.saturating_sub(1)) / 2 {
        f.push(k);
        f.push(k);
    }
    if n % 2 == 0 && n > 0 {
        f.push(n / 2);
    }
    f
}

fn transform(basis: &[f64], n: usize, v: &[f64]) -> Vec<f64> {
    basis.chunks_exact(n).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMatrix {
    /// Input-to-hidden weights, transformed along the `2P` input axis.
    Embedding,
    /// Hidden-to-output weights, transformed along the `P` output axis.
    Unembedding,
}

/// How the `2P` embedding axis is transformed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingAxis {
    /// Each `P`-sized half (operand `a`, operand `b`) transformed and scored
    /// separately; a neuron's IPR is the mean over the halves.
    #[default]
    Blockwise,
    /// Halves transformed separately, one IPR over the joined coefficients.
    Concatenated,
    /// One transform of length `2P`.
    Whole,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IprSpectrum {
    pub matrix: WeightMatrix,
    /// `IPR(k)` per hidden neuron; NaN for an all-zero column.
    pub ipr: Vec<f64>,
    pub dominant_frequency: Vec<usize>,
    /// Fraction of the column's squared mass at the dominant frequency.
    pub dominant_share: Vec<f64>,
    /// Squared Fourier mass per neuron and frequency, `[neurons × (max_freq + 1)]`.
    pub power: Vec<Vec<f64>>,
}

fn ipr_of(coeffs: &[f64]) -> f64 {
    let s2: f64 = coeffs.iter().map(|c| c * c).sum();
    let s4: f64 = coeffs.iter().map(|c| c.powi(4)).sum();
    if s2 == 0.0 {
        f64::NAN
    } else {
        s4 / (s2 * s2)
    }
}

/// Fourier-basis IPR of every hidden neuron.
///
/// `weights` is the layer's weight block in storage order: `[2P, H]` for the
/// embedding (neuron = column), `[H, P]` for the unembedding (neuron = row).
pub fn fourier_ipr(weights: &[f64], shape: [usize; 2], matrix: WeightMatrix, modulus: usize, axis: EmbeddingAxis) -> Result<IprSpectrum> {
    let [rows, cols] = shape;
    if rows * cols != weights.len() {
        return Err(Error::dim(format!("{} weights for shape {rows}x{cols}", weights.len())));
    }
    let (neurons, d) = match matrix {
        WeightMatrix::Embedding => (cols, rows),
        WeightMatrix::Unembedding => (rows, cols),
    };
    let expected = match matrix {
        WeightMatrix::Embedding => 2 * modulus,
        WeightMatrix::Unembedding => modulus,
    };
    if d != expected {
        return Err(Error::dim(format!("transform axis has {d} entries, expected {expected} for P = {modulus}")));
    }
    let column = |k: usize| -> Vec<f64> {
        match matrix {
            WeightMatrix::Embedding => (0..rows).map(|r| weights[r * cols + k]).collect(),
            WeightMatrix::Unembedding => weights[k * cols..(k + 1) * cols].to_vec(),
        }
    };
    let blocks: Vec<(usize, usize)> = match (matrix, axis) {
        (WeightMatrix::Embedding, EmbeddingAxis::Blockwise | EmbeddingAxis::Concatenated) => vec![(0, modulus), (modulus, modulus)],
        _ => vec![(0, d)],
    };
    let bases: Vec<(Vec<f64>, Vec<usize>)> = blocks.iter().map(|&(_, n)| (fourier_basis(n), basis_frequencies(n))).collect();
    let max_freq = bases.iter().flat_map(|(_, f)| f.iter().copied()).max().unwrap_or(0);
    let mut spec = IprSpectrum {
        matrix,
        ipr: Vec::with_capacity(neurons),
        dominant_frequency: Vec::with_capacity(neurons),
        dominant_share: Vec::with_capacity(neurons),
        power: Vec::with_capacity(neurons),
    };
    for k in 0..neurons {
        let v = column(k);
        let mut coeffs = Vec::with_capacity(d);
        let mut per_block = Vec::with_capacity(blocks.len());
        let mut power = vec![0.0; max_freq + 1];
        for (&(start, n), (basis, freqs)) in blocks.iter().zip(&bases) {
            let c = transform(basis, n, &v[start..start + n]);
            for (ci, &f) in c.iter().zip(freqs) {
                power[f] += ci * ci;
            }
            per_block.push(ipr_of(&c));
            coeffs.extend(c);
        }
        let total: f64 = power.iter().sum();
        let dom = models::argmax(&power);
        let ipr = if matrix == WeightMatrix::Embedding && axis == EmbeddingAxis::Blockwise {
            let live: Vec<f64> = per_block.into_iter().filter(|v| v.is_finite()).collect();
            if live.is_empty() {
                f64::NAN
            } else {
                live.iter().sum::<f64>() / live.len() as f64
            }
        } else {
            ipr_of(&coeffs)
        };
        spec.ipr.push(ipr);
        spec.dominant_frequency.push(dom);
        spec.dominant_share.push(if total > 0.0 { power[dom] / total } else { 0.0 });
        spec.power.push(power);
    }
    Ok(spec)
}

/// Both hidden-layer spectra of a ModAdd model (`fc1` embedding, `fc2`
/// unembedding).
pub fn modadd_spectra(params: &ParamVector, modulus: usize, axis: EmbeddingAxis) -> Result<(IprSpectrum, IprSpectrum)> {
    let fc1 = params.layer("fc1")?;
    let fc2 = params.layer("fc2")?;
    let emb = fourier_ipr(params.weights(fc1), [fc1.shape[0], fc1.shape[1]], WeightMatrix::Embedding, modulus, axis)?;
    let unemb = fourier_ipr(params.weights(fc2), [fc2.shape[0], fc2.shape[1]], WeightMatrix::Unembedding, modulus, axis)?;
    Ok((emb, unemb))
}

/// Arithmetic mean of the defined IPR values.
pub fn mean_ipr(spec: &IprSpectrum) -> Result<f64> {
    let vals: Vec<f64> = spec.ipr.iter().copied().filter(|v| v.is_finite()).collect();
    if vals.is_empty() {
        return Err(Error::Domain("no neuron with a defined IPR".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Fraction of neurons whose dominant frequency carries at least `share`
/// of the column mass.
pub fn localized_fraction(spec: &IprSpectrum, share: f64) -> f64 {
    if spec.dominant_share.is_empty() {
        return 0.0;
    }
    spec.dominant_share.iter().filter(|&&s| s >= share).count() as f64 / spec.dominant_share.len() as f64
}

pub fn write_ipr_csv<W: Write>(w: W, spectra: &[&IprSpectrum]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["matrix", "neuron", "ipr", "dominant_frequency", "dominant_share"])?;
    for s in spectra {
        let tag = matrix_tag(s.matrix);
        for k in 0..s.ipr.len() {
            out.write_record([
                tag.to_string(),
                k.to_string(),
                s.ipr[k].to_string(),
                s.dominant_frequency[k].to_string(),
                s.dominant_share[k].to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Long-format heatmap: `matrix,neuron,frequency,amplitude` with amplitude
/// `√(cos² + sin²)` summed over blocks.
pub fn write_heatmap_csv<W: Write>(w: W, spectra: &[&IprSpectrum]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["matrix", "neuron", "frequency", "amplitude"])?;
    for s in spectra {
        let tag = matrix_tag(s.matrix);
        for (k, p) in s.power.iter().enumerate() {
            for (f, v) in p.iter().enumerate() {
                out.write_record([tag.to_string(), k.to_string(), f.to_string(), v.sqrt().to_string()])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn matrix_tag(m: WeightMatrix) -> &'static str {
    match m {
        WeightMatrix::Embedding => "embedding",
        WeightMatrix::Unembedding => "unembedding",
    }
}

/// Mean-absolute-difference Gini coefficient `Σᵢⱼ|xᵢ−xⱼ| / (2n²μ)`.
pub fn gini(values: &[f64]) -> Result<f64> {
    if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain("Gini coefficient needs finite non-negative values".into()));
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(Error::Domain("Gini coefficient of an all-zero series".into()));
    }
    let mut x = values.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    // Σᵢⱼ|xᵢ−xⱼ| = 2 Σᵢ (2i − n + 1) x₍ᵢ₎ for ascending order
    let s: f64 = x.iter().enumerate().map(|(i, v)| (2.0 * i as f64 - n + 1.0) * v).sum();
    Ok(s / (n * total))
}

/// Gini coefficient of `|w|` over all weight (non-bias) entries.
pub fn weight_gini(params: &ParamVector) -> Result<f64> {
    let w: Vec<f64> = params.weight_ranges().into_iter().flat_map(|r| params.values()[r].iter().map(|v| v.abs()).collect::<Vec<_>>()).collect();
    gini(&w)
}
