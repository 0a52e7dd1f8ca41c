//! Define-by-run tape. Nodes are appended in evaluation order, so walking
//! the node list backwards is a valid reverse topological order.

use super::kernels::{self, ConvGeom};
use super::{Gradients, ParameterStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::losses;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub(crate) const BN_EPS: f64 = 1e-5;

enum Op<T: Scalar> {
    Leaf,
    FullyConnected { x: Var, w: Var, b: Var },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    GlobalAvgPool(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Reshape(Var),
    Scale(Var, T),
    Sum(Var),
    SumSquares(Vec<Var>),
    WeightedSum(Vec<(Var, T)>),
    CrossEntropy { probs: Var, target: Vec<T> },
    CosineDistance { a: Var, b: Var },
    SmoothL1 { pred: Var, target: Vec<T> },
    HalfMse { pred: Var, target: Vec<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Per-channel batch statistics recorded by training-mode batch norm, for
/// updating running averages after the step.
#[derive(Debug, Clone)]
pub struct BatchStats<T: Scalar> {
    pub label: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    bn_stats: Vec<BatchStats<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bn_stats: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf holding a copy of a named parameter.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        let t = store.get(name)?.clone();
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    /// Leaf holding a copy of a named parameter that is excluded from
    /// differentiation (frozen sub-network).
    pub fn frozen_param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        let t = store.get(name)?.clone();
        Ok(self.push(t, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameter leaves created so far, in creation order.
    pub fn param_vars(&self) -> Vec<(&str, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.as_deref().map(|p| (p, Var(i))))
            .collect()
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStats<T>> {
        std::mem::take(&mut self.bn_stats)
    }

    // ---- forward ops -------------------------------------------------------

    /// `x [batch, in] * w [in, out] + b [out]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("fully_connected", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(Error::shape("fully_connected(bias)", ws, bs));
        }
        let (batch, n_in, n_out) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(batch * n_out);
        for _ in 0..batch {
            out.extend_from_slice(self.value(b).data());
        }
        kernels::gemm(batch, n_in, n_out, self.value(x).data(), false, self.value(w).data(), false, &mut out, true);
        let t = Tensor::new(vec![batch, n_out], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::FullyConnected { x, w, b }, rg))
    }

    /// Dilated 2-D cross-correlation, `x [batch, c_in, h, w]`,
    /// `w [c_out, c_in, kh, kw]`, with same-size padding at stride 1.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, dilation: usize) -> Result<Var> {
        if dilation < 1 {
            return Err(Error::Param(format!("dilation must be >= 1, got {dilation}")));
        }
        if stride < 1 {
            return Err(Error::Param(format!("stride must be >= 1, got {stride}")));
        }
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(Error::Param(format!("conv kernel must have odd extent, got {ws:?}")));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d(bias)", &ws, bs));
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, dilation);
        let out = kernels::conv_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), xs[0], &geom);
        let t = Tensor::new(vec![xs[0], geom.c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::Conv { x, w, b, geom }, rg))
    }

    /// Dilated 1-D cross-correlation, `x [batch, c_in, len]`,
    /// `w [c_out, c_in, k]`, stride 1, same-length padding.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::shape("conv1d", &xs, &ws));
        }
        let x4 = self.reshape(x, &[xs[0], xs[1], 1, xs[2]])?;
        let w4 = self.reshape(w, &[ws[0], ws[1], 1, ws[2]])?;
        let y = self.conv2d(x4, w4, b, 1, dilation)?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[3]])
    }

    /// Training-mode batch norm over every axis but the channel axis (1).
    /// Records the batch mean and unbiased variance under `label`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, label: &str) -> Result<Var> {
        let (batch, channels, spatial) = self.bn_dims(x, gamma, beta)?;
        if batch < 2 {
            return Err(Error::Param("batch norm in training mode needs a batch of at least 2".into()));
        }
        let m = batch * spatial;
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        for b in 0..batch {
            for c in 0..channels {
                let s = &xd[(b * channels + c) * spatial..(b * channels + c + 1) * spatial];
                mean[c] = mean[c] + s.iter().copied().sum();
            }
        }
        let mt = T::lit(m as f64);
        mean.iter_mut().for_each(|v| *v = *v / mt);
        for b in 0..batch {
            for c in 0..channels {
                let s = &xd[(b * channels + c) * spatial..(b * channels + c + 1) * spatial];
                var[c] = var[c] + s.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / mt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt()).collect();
        let unbiased: Vec<T> = var.iter().map(|&v| v * mt / T::lit((m - 1).max(1) as f64)).collect();
        self.bn_stats.push(BatchStats {
            label: label.to_string(),
            mean: mean.clone(),
            var: unbiased,
        });
        self.bn_apply(x, gamma, beta, &mean, inv_std, true)
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[T], running_var: &[T]) -> Result<Var> {
        let (_, channels, _) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::shape("batch_norm(running)", &[channels], &[running_mean.len(), running_var.len()]));
        }
        let inv_std = running_var.iter().map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(Error::shape("batch_norm", xs, &[]));
        }
        let (batch, channels) = (xs[0], xs[1]);
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::shape("batch_norm(affine)", xs, self.shape(gamma)));
        }
        Ok((batch, channels, xs[2..].iter().product()))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: Vec<T>, train: bool) -> Result<Var> {
        let (batch, channels, spatial) = self.bn_dims(x, gamma, beta)?;
        let xv = self.value(x);
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = vec![T::zero(); xv.numel()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                for s in 0..spatial {
                    let h = (xv.data()[base + s] - mean[c]) * inv_std[c];
                    xhat[base + s] = h;
                    out[base + s] = gd[c] * h + bd[c];
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let width = *xv.shape().last().expect("non-empty shape");
        let data = kernels::softmax_rows(xv.data(), width);
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// `[batch, ch, h, w] -> [batch, ch]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", &xs, &[]));
        }
        let plane = xs[2] * xs[3];
        let inv = T::lit(1.0 / plane as f64);
        let data = self.value(x).data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let t = Tensor::new(vec![xs[0], xs[1]], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sum of squared entries over several tensors (weight decay).
    pub fn sum_squares(&mut self, xs: &[Var]) -> Var {
        let s = xs.iter().map(|&v| self.value(v).sum_squares()).fold(T::zero(), |a, b| a + b);
        let rg = self.rg(xs);
        self.push(Tensor::scalar(s), Op::SumSquares(xs.to_vec()), rg)
    }

    /// Linear combination of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, c) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::shape("weighted_sum", self.shape(v), &[1]));
            }
            s = s + T::lit(c) * self.value(v).item();
        }
        let terms: Vec<(Var, T)> = terms.iter().map(|&(v, c)| (v, T::lit(c))).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms), rg))
    }

    /// Mean cross-entropy of probability rows against one-hot targets.
    pub fn cross_entropy(&mut self, probs: Var, onehot: &Tensor<T>) -> Result<Var> {
        let l = losses::perceptual_loss(self.value(probs), onehot)?;
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(l),
            Op::CrossEntropy {
                probs,
                target: onehot.data().to_vec(),
            },
            rg,
        ))
    }

    /// Batch mean of per-row cosine distance.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let l = losses::representation_loss(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(l), Op::CosineDistance { a, b }, rg))
    }

    /// Mean smooth-L1 of `target - pred` over every element.
    pub fn smooth_l1_mean(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let l = losses::generation_loss(target, self.value(pred))?;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(l),
            Op::SmoothL1 {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// `1/(2N) * sum_i mean_t (target - pred)^2`.
    pub fn half_mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let l = losses::half_mse(target, self.value(pred))?;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(l),
            Op::HalfMse {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. May be run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph; build a new graph per step".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    /// Gradients of every parameter leaf, summed over repeated uses.
    pub fn param_grads(&self) -> Gradients<T> {
        let mut out = Gradients::new();
        for node in &self.nodes {
            let (Some(name), Some(g)) = (&node.param, node.value.grad()) else { continue };
            match out.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b): (&mut T, &T)| *a = *a + b),
                None => {
                    out.insert(name.clone(), g.to_vec());
                }
            }
        }
        out
    }

    /// Like [`Self::param_grads`] but moves the buffers out of the graph.
    pub fn into_param_grads(mut self) -> Gradients<T> {
        let mut out = Gradients::new();
        for node in &mut self.nodes {
            let Some(name) = node.param.take() else { continue };
            let Some(g) = node.value.take_grad() else { continue };
            match out.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b): (&mut T, &T)| *a = *a + b),
                None => {
                    out.insert(name, g);
                }
            }
        }
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::FullyConnected { x, w, b } => {
                let (xs, ws) = (self.shape(x), self.shape(w));
                let (batch, n_in, n_out) = (xs[0], xs[1], ws[1]);
                if self.wants(x) {
                    let mut dx = vec![T::zero(); batch * n_in];
                    kernels::gemm(batch, n_out, n_in, dy, false, self.value(w).data(), true, &mut dx, false);
                    accumulate(grads, x, dx);
                }
                if self.wants(w) {
                    let mut dw = vec![T::zero(); n_in * n_out];
                    kernels::gemm(n_in, batch, n_out, self.value(x).data(), true, dy, false, &mut dw, false);
                    accumulate(grads, w, dw);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); n_out];
                    for row in dy.chunks(n_out) {
                        db.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Conv { x, w, b, ref geom } => {
                let batch = self.shape(x)[0];
                let mut dx = self.wants(x).then(|| vec![T::zero(); self.value(x).numel()]);
                let mut dw = vec![T::zero(); self.value(w).numel()];
                let mut db = vec![T::zero(); geom.c_out];
                kernels::conv_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    dy,
                    batch,
                    geom,
                    dx.as_deref_mut(),
                    &mut dw,
                    &mut db,
                );
                if let Some(dx) = dx {
                    accumulate(grads, x, dx);
                }
                if self.wants(w) {
                    accumulate(grads, w, dw);
                }
                if self.wants(b) {
                    accumulate(grads, b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.shape(*x);
                let (batch, channels) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let gd = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                let mut sum_dxhat = vec![T::zero(); channels];
                let mut sum_dxhat_xhat = vec![T::zero(); channels];
                for bi in 0..batch {
                    for c in 0..channels {
                        let base = (bi * channels + c) * spatial;
                        for s in 0..spatial {
                            let (g, h) = (dy[base + s], xhat[base + s]);
                            dgamma[c] = dgamma[c] + g * h;
                            dbeta[c] = dbeta[c] + g;
                            sum_dxhat[c] = sum_dxhat[c] + g * gd[c];
                            sum_dxhat_xhat[c] = sum_dxhat_xhat[c] + g * gd[c] * h;
                        }
                    }
                }
                if self.wants(*x) {
                    let m = T::lit((batch * spatial) as f64);
                    let mut dx = vec![T::zero(); dy.len()];
                    for bi in 0..batch {
                        for c in 0..channels {
                            let base = (bi * channels + c) * spatial;
                            for s in 0..spatial {
                                let dxhat = dy[base + s] * gd[c];
                                dx[base + s] = if *train {
                                    inv_std[c] / m * (m * dxhat - sum_dxhat[c] - xhat[base + s] * sum_dxhat_xhat[c])
                                } else {
                                    dxhat * inv_std[c]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            &Op::Relu(x) => {
                let xd = self.value(x).data();
                let dx = dy.iter().zip(xd).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                accumulate(grads, x, dx);
            }
            &Op::Tanh(x) => {
                let dx = dy.iter().zip(out).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                accumulate(grads, x, dx);
            }
            &Op::Sigmoid(x) => {
                let dx = dy.iter().zip(out).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                accumulate(grads, x, dx);
            }
            &Op::Softmax(x) => {
                let width = *node.value.shape().last().expect("non-empty");
                let mut dx = vec![T::zero(); dy.len()];
                for ((g, y), d) in dy.chunks(width).zip(out.chunks(width)).zip(dx.chunks_mut(width)) {
                    let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    for k in 0..width {
                        d[k] = y[k] * (g[k] - dot);
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::GlobalAvgPool(x) => {
                let xs = self.shape(x);
                let plane = xs[2] * xs[3];
                let inv = T::lit(1.0 / plane as f64);
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for (chunk, &g) in dx.chunks_mut(plane).zip(dy) {
                    chunk.fill(g * inv);
                }
                accumulate(grads, x, dx);
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, dy.to_vec());
                }
                if self.wants(b) {
                    accumulate(grads, b, dy.to_vec());
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let d = dy.iter().zip(self.value(b).data()).map(|(&g, &v)| g * v).collect();
                    accumulate(grads, a, d);
                }
                if self.wants(b) {
                    let d = dy.iter().zip(self.value(a).data()).map(|(&g, &v)| g * v).collect();
                    accumulate(grads, b, d);
                }
            }
            &Op::Reshape(x) => accumulate(grads, x, dy.to_vec()),
            &Op::Scale(x, c) => accumulate(grads, x, dy.iter().map(|&g| g * c).collect()),
            &Op::Sum(x) => accumulate(grads, x, vec![dy[0]; self.value(x).numel()]),
            Op::SumSquares(xs) => {
                let two = T::lit(2.0) * dy[0];
                for &x in xs {
                    if self.wants(x) {
                        accumulate(grads, x, self.value(x).data().iter().map(|&v| two * v).collect());
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if self.wants(v) {
                        accumulate(grads, v, vec![c * dy[0]]);
                    }
                }
            }
            Op::CrossEntropy { probs, target } => {
                let mut d = losses::perceptual_grad(self.value(*probs), target);
                d.iter_mut().for_each(|v| *v = *v * dy[0]);
                accumulate(grads, *probs, d);
            }
            &Op::CosineDistance { a, b } => {
                let (mut da, mut db) = losses::representation_grad(self.value(a), self.value(b));
                da.iter_mut().chain(db.iter_mut()).for_each(|v| *v = *v * dy[0]);
                if self.wants(a) {
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    accumulate(grads, b, db);
                }
            }
            Op::SmoothL1 { pred, target } => {
                let mut d = losses::generation_grad(target, self.value(*pred).data());
                d.iter_mut().for_each(|v| *v = *v * dy[0]);
                accumulate(grads, *pred, d);
            }
            Op::HalfMse { pred, target } => {
                let p = self.value(*pred);
                let denom = T::lit(p.numel() as f64);
                let d = p.data().iter().zip(target).map(|(&a, &t)| (a - t) / denom * dy[0]).collect();
                accumulate(grads, *pred, d);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &c)| *a = *a + c),
        slot @ None => *slot = Some(contribution),
    }
}
