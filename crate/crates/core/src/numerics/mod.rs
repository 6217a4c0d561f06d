//! Minimal dense tensors and reverse-mode differentiation for the two models.
//!
//! Only the pieces the models need exist: linear, valid 2-D convolution,
//! ReLU, flatten, softmax cross-entropy, and Adam.

mod adam;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use adam::{AdamConfig, AdamState, DecayMode};
pub use graph::{GradMode, Graph, NodeId};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use kernels::ConvGeom;

/// `input · weights + bias` for `input[m×k]`, `weights[k×n]`, `bias[n]`.
pub fn linear_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input_borrowed(input.shape().to_vec(), input.data())?;
    let w = g.input_borrowed(weights.shape().to_vec(), weights.data())?;
    let b = g.input_borrowed(bias.shape().to_vec(), bias.data())?;
    let y = g.linear(x, w, b)?;
    Ok(g.tensor(y))
}

/// Valid convolution of `input[b, c, h, w]` with `kernels[o, c, k, k]`.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let geom = ConvGeom::new(input.shape(), kernels.shape(), stride)?;
    if bias.len() != geom.out_c {
        return Err(Error::dim(format!("conv bias needs {} entries", geom.out_c)));
    }
    let out = kernels::conv2d(input.data(), kernels.data(), bias.data(), &geom);
    Tensor::new(geom.out_shape(), out)
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| if v <= 0.0 { 0.0 } else { v }).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    kernels::softmax_rows(logits, 1, logits.len())
}

/// `−log softmax(logits)[target]` for a single logit vector.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Index(format!("target {target} with {} classes", logits.len())));
    }
    Ok(kernels::log_sum_exp(logits) - logits[target])
}
