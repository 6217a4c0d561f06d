//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is always a valid
//! topological order and `backward` simply walks it in reverse. Parameters are
//! leaves that borrow their values from a flat parameter buffer; their
//! gradients are written straight into a caller-provided flat gradient buffer
//! at the same offsets.

use std::borrow::Cow;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// How parameter gradients are accumulated during a backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Ordinary gradient: sum over batch rows.
    Sum,
    /// Sum over batch rows of the squared per-row gradient. Every batch row
    /// must be an independent example; used for Fisher diagonals.
    SquaredPerRow,
}

#[derive(Debug)]
enum Op {
    Input,
    Param { offset: usize },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, k: NodeId, b: NodeId, geom: ConvGeom },
    Relu { x: NodeId },
    Flatten { x: NodeId },
    SoftmaxCe { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    data: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn matrix_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [m, n] => Ok((m, n)),
        _ => Err(Error::dim(format!("expected a 2-D tensor, got {shape:?}"))),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node<'a>> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::State(format!("node {} not recorded", id.0)))
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Input, false)
    }

    pub fn input_borrowed(&mut self, shape: Vec<usize>, data: &'a [f64]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim(format!("input shape {shape:?} vs {} values", data.len())));
        }
        Ok(self.push(shape, Cow::Borrowed(data), Op::Input, false))
    }

    /// Registers a parameter whose gradient lands at `offset` in the flat
    /// gradient buffer passed to `backward`.
    pub fn param(&mut self, shape: Vec<usize>, data: &'a [f64], offset: usize) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim(format!("param shape {shape:?} vs {} values", data.len())));
        }
        Ok(self.push(shape, Cow::Borrowed(data), Op::Param { offset }, true))
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.data.to_vec()).expect("node invariant")
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = matrix_dims(&self.node(x)?.shape)?;
        let (k2, n) = matrix_dims(&self.node(w)?.shape)?;
        if k != k2 {
            return Err(Error::dim(format!("linear: input width {k} vs weight rows {k2}")));
        }
        if self.node(b)?.shape.iter().product::<usize>() != n {
            return Err(Error::dim(format!("linear: bias must have {n} entries")));
        }
        let out = kernels::linear(self.value(x), self.value(w), self.value(b), m, k, n);
        let rg = self.nodes[x.0].requires_grad || self.nodes[w.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::Linear { x, w, b }, rg))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let geom = ConvGeom::new(&self.node(x)?.shape, &self.node(k)?.shape, stride)?;
        if self.node(b)?.shape.iter().product::<usize>() != geom.out_c {
            return Err(Error::dim(format!("conv: bias must have {} entries", geom.out_c)));
        }
        let out = kernels::conv2d(self.value(x), self.value(k), self.value(b), &geom);
        let rg = self.nodes[x.0].requires_grad || self.nodes[k.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(geom.out_shape(), Cow::Owned(out), Op::Conv2d { x, k, b, geom }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.node(x)?;
        let out: Vec<f64> = n.data.iter().map(|&v| if v <= 0.0 { 0.0 } else { v }).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, Cow::Owned(out), Op::Relu { x }, rg))
    }

    /// Collapses every axis after the first (batch) axis.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.node(x)?;
        let rows = n.shape.first().copied().unwrap_or(1);
        let width = n.data.len() / rows.max(1);
        let (data, rg) = (n.data.to_vec(), n.requires_grad);
        Ok(self.push(vec![rows, width], Cow::Owned(data), Op::Flatten { x }, rg))
    }

    /// Mean softmax cross-entropy over the batch rows of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, n) = matrix_dims(&self.node(logits)?.shape)?;
        if targets.len() != m {
            return Err(Error::dim(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Index(format!("target {t} with {n} classes")));
        }
        let z = self.value(logits);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &z[i * n..(i + 1) * n];
            loss += kernels::log_sum_exp(row) - row[t];
        }
        loss /= m as f64;
        let probs = kernels::softmax_rows(z, m, n);
        let rg = self.nodes[logits.0].requires_grad;
        let op = Op::SoftmaxCe { logits, targets: targets.to_vec(), probs };
        Ok(self.push(vec![1], Cow::Owned(vec![loss]), op, rg))
    }

    /// Backpropagates from a single-element `loss` node. `grads` is zeroed
    /// first and then receives every parameter gradient at its offset.
    pub fn backward(&self, loss: NodeId, grads: &mut [f64]) -> Result<()> {
        let node = self.node(loss).map_err(|_| Error::State("backward before forward".into()))?;
        if node.data.len() != 1 {
            return Err(Error::State(format!("loss must be a single value, got shape {:?}", node.shape)));
        }
        grads.iter_mut().for_each(|g| *g = 0.0);
        self.backward_from(loss, &[1.0], grads, GradMode::Sum)
    }

    /// Backpropagates an arbitrary upstream gradient `seed` (same shape as
    /// `output`) and accumulates into `grads` without zeroing it.
    pub fn backward_from(&self, output: NodeId, seed: &[f64], grads: &mut [f64], mode: GradMode) -> Result<()> {
        let out = self.node(output).map_err(|_| Error::State("backward before forward".into()))?;
        if seed.len() != out.data.len() {
            return Err(Error::dim(format!("seed has {} values, node has {}", seed.len(), out.data.len())));
        }
        let mut node_grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        node_grads[output.0] = Some(seed.to_vec());

        for idx in (0..=output.0).rev() {
            let Some(dy) = node_grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    if mode == GradMode::SquaredPerRow {
                        return Err(Error::State(
                            "squared per-row gradients need parameters as direct layer weights".into(),
                        ));
                    }
                    let dst = self.param_slice(grads, *offset, dy.len())?;
                    dst.iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                }
                Op::Linear { x, w, b } => {
                    let (m, k) = matrix_dims(&self.nodes[x.0].shape)?;
                    let n = node.shape[1];
                    let xv = self.value(*x);
                    if self.nodes[w.0].requires_grad {
                        match self.param_offset(*w) {
                            Some(off) => {
                                let dst = self.param_slice(grads, off, k * n)?;
                                if mode == GradMode::SquaredPerRow {
                                    let x2: Vec<f64> = xv.iter().map(|v| v * v).collect();
                                    let dy2: Vec<f64> = dy.iter().map(|v| v * v).collect();
                                    kernels::accumulate_xt_dy(&x2, &dy2, m, k, n, dst);
                                } else {
                                    kernels::accumulate_xt_dy(xv, &dy, m, k, n, dst);
                                }
                            }
                            None => {
                                self.require_sum(mode)?;
                                let mut acc = vec![0.0; k * n];
                                kernels::accumulate_xt_dy(xv, &dy, m, k, n, &mut acc);
                                add_into(&mut node_grads[w.0], acc);
                            }
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        match self.param_offset(*b) {
                            Some(off) => {
                                let dst = self.param_slice(grads, off, n)?;
                                if mode == GradMode::SquaredPerRow {
                                    let dy2: Vec<f64> = dy.iter().map(|v| v * v).collect();
                                    kernels::accumulate_col_sums(&dy2, m, n, dst);
                                } else {
                                    kernels::accumulate_col_sums(&dy, m, n, dst);
                                }
                            }
                            None => {
                                self.require_sum(mode)?;
                                let mut acc = vec![0.0; n];
                                kernels::accumulate_col_sums(&dy, m, n, &mut acc);
                                add_into(&mut node_grads[b.0], acc);
                            }
                        }
                    }
                    if self.nodes[x.0].requires_grad {
                        let dx = kernels::dy_wt(&dy, self.value(*w), m, k, n);
                        add_into(&mut node_grads[x.0], dx);
                    }
                }
                Op::Conv2d { x, k, b, geom } => {
                    let xv = self.value(*x);
                    let squared = mode == GradMode::SquaredPerRow;
                    let (kr, br) = (self.nodes[k.0].requires_grad, self.nodes[b.0].requires_grad);
                    if kr || br {
                        let mut dk = vec![0.0; self.nodes[k.0].data.len()];
                        let mut db = vec![0.0; geom.out_c];
                        kernels::conv2d_param_grads(xv, &dy, geom, squared, &mut dk, &mut db);
                        for (id, acc, needed) in [(*k, dk, kr), (*b, db, br)] {
                            if !needed {
                                continue;
                            }
                            match self.param_offset(id) {
                                Some(off) => {
                                    let dst = self.param_slice(grads, off, acc.len())?;
                                    dst.iter_mut().zip(&acc).for_each(|(g, d)| *g += d);
                                }
                                None => {
                                    self.require_sum(mode)?;
                                    add_into(&mut node_grads[id.0], acc);
                                }
                            }
                        }
                    }
                    if self.nodes[x.0].requires_grad {
                        let dx = kernels::conv2d_input_grad(&dy, self.value(*k), geom);
                        add_into(&mut node_grads[x.0], dx);
                    }
                }
                Op::Relu { x } => {
                    if self.nodes[x.0].requires_grad {
                        let xv = self.value(*x);
                        let dx: Vec<f64> = dy.iter().zip(xv.iter()).map(|(d, &v)| if v > 0.0 { *d } else { 0.0 }).collect();
                        add_into(&mut node_grads[x.0], dx);
                    }
                }
                Op::Flatten { x } => {
                    if self.nodes[x.0].requires_grad {
                        add_into(&mut node_grads[x.0], dy);
                    }
                }
                Op::SoftmaxCe { logits, targets, probs } => {
                    if self.nodes[logits.0].requires_grad {
                        let (m, n) = matrix_dims(&self.nodes[logits.0].shape)?;
                        let scale = dy[0] / m as f64;
                        let mut dz = probs.clone();
                        for (i, &t) in targets.iter().enumerate() {
                            dz[i * n + t] -= 1.0;
                        }
                        dz.iter_mut().for_each(|v| *v *= scale);
                        add_into(&mut node_grads[logits.0], dz);
                    }
                }
            }
        }
        Ok(())
    }

    fn param_offset(&self, id: NodeId) -> Option<usize> {
        match self.nodes[id.0].op {
            Op::Param { offset } => Some(offset),
            _ => None,
        }
    }

    fn param_slice<'g>(&self, grads: &'g mut [f64], offset: usize, len: usize) -> Result<&'g mut [f64]> {
        grads
            .get_mut(offset..offset + len)
            .ok_or_else(|| Error::dim(format!("gradient buffer too short for parameter at {offset}+{len}")))
    }

    fn require_sum(&self, mode: GradMode) -> Result<()> {
        match mode {
            GradMode::Sum => Ok(()),
            GradMode::SquaredPerRow => Err(Error::State(
                "squared per-row gradients need parameters as direct layer weights".into(),
            )),
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
        None => *slot = Some(g),
    }
}
