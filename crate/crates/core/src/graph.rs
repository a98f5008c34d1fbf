//! Reverse-mode automatic differentiation over a tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! execution order, so the tape is topologically sorted by construction.
//! [`Graph::detach`] inserts a hard stop: backward never propagates through
//! it, so everything upstream receives exactly zero gradient from losses
//! downstream of the mark.

use std::cell::Cell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, RunningStats};
use crate::tensor::{Element, Tensor};

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the training computation a node belongs to, for memory accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Region {
    /// Backbone activations.
    #[default]
    Main,
    /// Auxiliary heads and replica stacks.
    Aux,
}

/// Tracks activation elements retained by live graphs.
#[derive(Debug, Default)]
pub struct ActivationMeter {
    live_main: Cell<usize>,
    live_aux: Cell<usize>,
    peak_total: Cell<usize>,
    peak_main: Cell<usize>,
    largest_tensor: Cell<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MeterReading {
    pub peak_total: usize,
    pub peak_main: usize,
    pub largest_tensor: usize,
}

impl ActivationMeter {
    pub fn new() -> Rc<Self> {
        Rc::new(ActivationMeter::default())
    }

    pub fn acquire(&self, region: Region, elements: usize) {
        match region {
            Region::Main => self.live_main.set(self.live_main.get() + elements),
            Region::Aux => self.live_aux.set(self.live_aux.get() + elements),
        }
        let total = self.live_main.get() + self.live_aux.get();
        self.peak_total.set(self.peak_total.get().max(total));
        self.peak_main.set(self.peak_main.get().max(self.live_main.get()));
        self.largest_tensor.set(self.largest_tensor.get().max(elements));
    }

    pub fn release(&self, region: Region, elements: usize) {
        let cell = match region {
            Region::Main => &self.live_main,
            Region::Aux => &self.live_aux,
        };
        cell.set(cell.get().saturating_sub(elements));
    }

    pub fn live(&self) -> usize {
        self.live_main.get() + self.live_aux.get()
    }

    pub fn reading(&self) -> MeterReading {
        MeterReading {
            peak_total: self.peak_total.get(),
            peak_main: self.peak_main.get(),
            largest_tensor: self.largest_tensor.get(),
        }
    }

    /// Starts a new peak window from the currently live elements.
    pub fn reset_peaks(&self) {
        self.peak_total.set(self.live());
        self.peak_main.set(self.live_main.get());
        self.largest_tensor.set(0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics; optionally fold them into the running stats.
    Train { update_stats: bool },
    /// Normalize with running statistics.
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Detach,
    MatMul,
    AddBias,
    Conv2d { stride: usize, pad: usize },
    Relu,
    BatchNorm { mean: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    GlobalAvgPool,
    Add,
    Mul,
    Sum,
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Detach => "detach",
            Op::MatMul => "matmul",
            Op::AddBias => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Add => "residual_add",
            Op::Mul => "mul",
            Op::Sum => "sum",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
    region: Region,
    /// Elements charged to the activation meter for this node.
    retained: usize,
}

/// Tape of recorded operations for one forward pass.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    region: Region,
    meter: Option<Rc<ActivationMeter>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<T: Element> Drop for Graph<T> {
    fn drop(&mut self) {
        if let Some(meter) = &self.meter {
            for node in &self.nodes {
                meter.release(node.region, node.retained);
            }
        }
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            region: Region::Main,
            meter: None,
        }
    }

    /// A graph that charges every retained activation to `meter` until dropped.
    pub fn metered(meter: Rc<ActivationMeter>) -> Self {
        Graph {
            nodes: Vec::new(),
            region: Region::Main,
            meter: Some(meter),
        }
    }

    pub fn set_region(&mut self, region: Region) {
        self.region = region;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Node ids carrying a detach mark.
    pub fn detach_marks(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Detach))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Activation elements currently retained by this graph.
    pub fn retained_elements(&self) -> usize {
        self.nodes.iter().map(|n| n.retained).sum()
    }

    pub fn retained_in(&self, region: Region) -> usize {
        self.nodes.iter().filter(|n| n.region == region).map(|n| n.retained).sum()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let requires_grad = match op {
            Op::Input | Op::Detach => false,
            Op::Param(_) => unreachable!("parameters are pushed through Graph::param"),
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        let retained = value.numel();
        self.push_node(op, inputs, value, requires_grad, retained)
    }

    fn push_node(
        &mut self,
        op: Op<T>,
        inputs: Vec<NodeId>,
        value: Tensor<T>,
        requires_grad: bool,
        retained: usize,
    ) -> NodeId {
        if let Some(meter) = &self.meter {
            meter.acquire(self.region, retained);
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            region: self.region,
            retained,
        });
        id
    }

    /// A constant leaf (data, labels-independent inputs). Never receives gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, Vec::new(), value)
    }

    /// A leaf holding a copy of a parameter's current value. Parameters are
    /// weights, not activations, so they are not charged to the meter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let p = store.param(id);
        self.push_node(Op::Param(id), Vec::new(), p.value.clone(), p.trainable, 0)
    }

    /// Value-identical copy whose backward contribution is exactly zero.
    /// Shares no storage with the source, so it is charged as a fresh activation.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.clone();
        self.push(Op::Detach, vec![x], value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul, vec![a, b], value))
    }

    /// Adds a `[C]` bias to every row of an `[N×C]` input.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let c = sx[1];
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::new(sx.to_vec(), out)?;
        Ok(self.push(Op::AddBias, vec![x, bias], value))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        let cols = im2col(self.value(x).data(), &geom);
        let np = geom.n * geom.p();
        let mut tmp = vec![T::zero(); geom.f * np];
        T::gemm(
            geom.f,
            geom.ckk(),
            np,
            T::one(),
            self.value(w).data(),
            geom.ckk() as isize,
            1,
            &cols,
            np as isize,
            1,
            T::zero(),
            &mut tmp,
            np as isize,
            1,
        );
        let p = geom.p();
        let mut out = vec![T::zero(); geom.n * geom.f * p];
        for f in 0..geom.f {
            for n in 0..geom.n {
                out[(n * geom.f + f) * p..(n * geom.f + f + 1) * p]
                    .copy_from_slice(&tmp[f * np + n * p..f * np + (n + 1) * p]);
            }
        }
        let value = Tensor::new(vec![geom.n, geom.f, geom.ho, geom.wo], out)?;
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, w], value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        self.push(Op::Relu, vec![x], value)
    }

    /// Per-channel batch normalization of an `[N×C×H×W]` input.
    pub fn batch_norm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut RunningStats<T>,
        mode: NormMode,
        eps: f64,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("batchnorm2d", format!("expected NCHW, got {sx:?}")));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return Err(Error::shape("batchnorm2d", format!("affine/stats size vs {c} channels")));
        }
        let eps = T::from_f64_lossy(eps);
        let xd = self.value(x).data();
        let (mean, inv_std, batch_stats) = match mode {
            NormMode::Train { update_stats } => {
                let m = n * hw;
                if m < 2 {
                    return Err(Error::Config(
                        "batchnorm2d: train mode needs at least two values per channel".into(),
                    ));
                }
                let mf = T::from_usize(m).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            s += v;
                        }
                    }
                    let mu = s / mf;
                    let mut sq = T::zero();
                    for b in 0..n {
                        for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            let d = v - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / mf;
                }
                if update_stats {
                    let mom = T::from_f64_lossy(BN_MOMENTUM);
                    let keep = T::one() - mom;
                    let unbias = mf / T::from_usize(m - 1).unwrap();
                    for ch in 0..c {
                        stats.mean[ch] = keep * stats.mean[ch] + mom * mean[ch];
                        stats.var[ch] = keep * stats.var[ch] + mom * var[ch] * unbias;
                    }
                    stats.initialized = true;
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv_std, true)
            }
            NormMode::Eval => {
                if !stats.initialized {
                    return Err(Error::State(
                        "batchnorm2d: eval mode before running statistics were initialized".into(),
                    ));
                }
                let inv_std = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (stats.mean.clone(), inv_std, false)
            }
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (mu, is, gm, bb) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for i in base..base + hw {
                    out[i] = gm * ((xd[i] - mu) * is) + bb;
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(
            Op::BatchNorm {
                mean,
                inv_std,
                batch_stats,
            },
            vec![x, gamma, beta],
            value,
        ))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected NCHW, got {sx:?}")));
        }
        let hw = sx[2] * sx[3];
        let scale = T::one() / T::from_usize(hw).unwrap();
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        let value = Tensor::new(vec![sx[0], sx[1]], data)?;
        Ok(self.push(Op::GlobalAvgPool, vec![x], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "residual_add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for (i, row) in self.value(logits).data().chunks(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[i * c + j] = probs[i * c + j] / z;
            }
            loss += z.ln() - (row[labels[i]] - max);
        }
        let loss = loss / T::from_usize(n).unwrap();
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits],
            Tensor::scalar(loss),
        ))
    }

    /// Backpropagates from a scalar `loss`, adding into parameter gradients.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        self.backward_scaled(loss, T::one(), store)
    }

    /// Backward with the loss gradient seeded to `scale` instead of one.
    pub fn backward_scaled(&self, loss: NodeId, scale: T, store: &mut ParamStore<T>) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.inputs.iter().any(|inp| inp.0 >= i) {
                return Err(Error::Cycle(i));
            }
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::full(root.value.shape(), scale));
        let mut touched = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let Op::Param(pid) = node.op {
                let p = store.param_mut(pid);
                p.grad.add_assign(&upstream)?;
                touched.push(pid);
                continue;
            }
            let contributions = self.local_grads(node, &upstream)?;
            for (input, g) in node.inputs.iter().zip(contributions) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        touched.sort_unstable();
        touched.dedup();
        for pid in touched {
            let p = store.param_mut(pid);
            p.accumulations += 1;
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products for each input of `node`. `None` means the
    /// input needs no gradient (or the op stops it).
    fn local_grads(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let want = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        let val = |k: usize| &self.nodes[node.inputs[k].0].value;
        let out = match &node.op {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::Detach => vec![None],
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let da = want(0).then(|| {
                    let mut d = vec![T::zero(); m * k];
                    // dA = dC · Bᵀ
                    T::gemm(m, n, k, T::one(), dy.data(), n as isize, 1, b.data(), 1, n as isize, T::zero(), &mut d, k as isize, 1);
                    Tensor::new(vec![m, k], d).unwrap()
                });
                let db = want(1).then(|| {
                    let mut d = vec![T::zero(); k * n];
                    // dB = Aᵀ · dC
                    T::gemm(k, m, n, T::one(), a.data(), 1, k as isize, dy.data(), n as isize, 1, T::zero(), &mut d, n as isize, 1);
                    Tensor::new(vec![k, n], d).unwrap()
                });
                vec![da, db]
            }
            Op::AddBias => {
                let c = dy.shape()[1];
                let db = want(1).then(|| {
                    let mut d = vec![T::zero(); c];
                    for row in dy.data().chunks(c) {
                        for (acc, &v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::new(vec![c], d).unwrap()
                });
                vec![want(0).then(|| dy.clone()), db]
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (val(0), val(1));
                let geom = ConvGeom::new(x.shape(), w.shape(), *stride, *pad)?;
                conv2d_backward(x, w, dy, &geom, want(0), want(1))
            }
            Op::Relu => {
                let x = val(0);
                let d = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
                    .collect();
                vec![Some(Tensor::new(x.shape().to_vec(), d)?)]
            }
            Op::BatchNorm {
                mean,
                inv_std,
                batch_stats,
            } => batch_norm_backward(val(0), val(1), dy, mean, inv_std, *batch_stats, [want(0), want(1), want(2)]),
            Op::GlobalAvgPool => {
                let x = val(0);
                let s = x.shape();
                let hw = s[2] * s[3];
                let scale = T::one() / T::from_usize(hw).unwrap();
                let mut d = Vec::with_capacity(x.numel());
                for &g in dy.data() {
                    d.extend(std::iter::repeat_n(g * scale, hw));
                }
                vec![Some(Tensor::new(s.to_vec(), d)?)]
            }
            Op::Add => vec![want(0).then(|| dy.clone()), want(1).then(|| dy.clone())],
            Op::Mul => {
                let prod = |other: &Tensor<T>| {
                    let d = other.data().iter().zip(dy.data()).map(|(&o, &g)| o * g).collect();
                    Tensor::new(dy.shape().to_vec(), d).unwrap()
                };
                vec![want(0).then(|| prod(val(1))), want(1).then(|| prod(val(0)))]
            }
            Op::Sum => {
                let g = dy.data()[0];
                vec![Some(Tensor::full(val(0).shape(), g))]
            }
            Op::SoftmaxCrossEntropy { labels, probs } => {
                let s = val(0).shape();
                let (n, c) = (s[0], s[1]);
                let scale = dy.data()[0] / T::from_usize(n).unwrap();
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![Some(Tensor::new(vec![n, c], d)?)]
            }
        };
        debug_assert!(out.is_empty() || out.len() == node.inputs.len(), "{}", node.op.name());
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", format!("input {xs:?} with kernel {ws:?}")));
        }
        let (kh, kw) = (ws[2], ws[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("conv2d: kernel {kh}×{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let (h, w) = (xs[2], xs[3]);
        let span_h = (h + 2 * pad).checked_sub(kh);
        let span_w = (w + 2 * pad).checked_sub(kw);
        let (Some(sh), Some(sw)) = (span_h, span_w) else {
            return Err(Error::Config(format!(
                "conv2d: kernel {kh}×{kw} larger than padded input {h}×{w} (pad {pad})"
            )));
        };
        if sh % stride != 0 || sw % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d: non-integral output size for input {h}×{w}, kernel {kh}×{kw}, stride {stride}, pad {pad}"
            )));
        }
        Ok(ConvGeom {
            n: xs[0],
            c: xs[1],
            h,
            w,
            f: ws[0],
            kh,
            kw,
            stride,
            pad,
            ho: sh / stride + 1,
            wo: sw / stride + 1,
        })
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Unfolds `x` into a `[C·kh·kw × N·H'·W']` column matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, np) = (g.p(), g.n * g.p());
    let mut cols = vec![T::zero(); g.ckk() * np];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                        let out_row = &mut dst[n * p + oh * g.wo..n * p + (oh + 1) * g.wo];
                        for (ow, o) in out_row.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                *o = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds column gradients back onto the input layout (adjoint of [`im2col`]).
fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, np) = (g.p(), g.n * g.p());
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                plane[ih as usize * g.w + iw as usize] += src[n * p + oh * g.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> Vec<Option<Tensor<T>>> {
    let (p, np, ckk) = (g.p(), g.n * g.p(), g.ckk());
    // [F × N·P] layout matching the forward gemm.
    let mut dtmp = vec![T::zero(); g.f * np];
    for n in 0..g.n {
        for f in 0..g.f {
            dtmp[f * np + n * p..f * np + (n + 1) * p]
                .copy_from_slice(&dy.data()[(n * g.f + f) * p..(n * g.f + f + 1) * p]);
        }
    }
    let dw = want_w.then(|| {
        let cols = im2col(x.data(), g);
        let mut d = vec![T::zero(); g.f * ckk];
        T::gemm(g.f, np, ckk, T::one(), &dtmp, np as isize, 1, &cols, 1, np as isize, T::zero(), &mut d, ckk as isize, 1);
        Tensor::new(w.shape().to_vec(), d).unwrap()
    });
    let dx = want_x.then(|| {
        let mut dcols = vec![T::zero(); ckk * np];
        T::gemm(ckk, g.f, np, T::one(), w.data(), 1, ckk as isize, &dtmp, np as isize, 1, T::zero(), &mut dcols, np as isize, 1);
        Tensor::new(x.shape().to_vec(), col2im(&dcols, g)).unwrap()
    });
    vec![dx, dw]
}

fn batch_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    batch_stats: bool,
    want: [bool; 3],
) -> Vec<Option<Tensor<T>>> {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let m = T::from_usize(n * hw).unwrap();
    let (xd, dyd, gd) = (x.data(), dy.data(), gamma.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mu, is) = (mean[ch], inv_std[ch]);
        let (mut sg, mut sb) = (T::zero(), T::zero());
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                sb += dyd[i];
                sg += dyd[i] * (xd[i] - mu) * is;
            }
        }
        dgamma[ch] = sg;
        dbeta[ch] = sb;
    }
    let dx = want[0].then(|| {
        let mut d = vec![T::zero(); xd.len()];
        for ch in 0..c {
            let (mu, is, gm) = (mean[ch], inv_std[ch], gd[ch]);
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    d[i] = if batch_stats {
                        let xhat = (xd[i] - mu) * is;
                        gm * is / m * (m * dyd[i] - dbeta[ch] - xhat * dgamma[ch])
                    } else {
                        gm * is * dyd[i]
                    };
                }
            }
        }
        Tensor::new(s.to_vec(), d).unwrap()
    });
    vec![
        dx,
        want[1].then(|| Tensor::new(vec![c], dgamma).unwrap()),
        want[2].then(|| Tensor::new(vec![c], dbeta).unwrap()),
    ]
}
