//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is always a
//! valid topological order and `backward` is a single reverse sweep.

use crate::conv::{ConvGeometry, ConvSpec};
use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamKind, ParamStore, StatUpdate};
use crate::pool::{self, PoolGeometry, PoolSpec};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize by batch statistics and emit running-stat updates.
    Train,
    /// Normalize by the stored running statistics.
    Infer,
}

/// Running statistics and constants for one batchnorm call.
pub struct BatchNormState<'a, T> {
    pub running_mean: &'a Tensor<T>,
    pub running_var: &'a Tensor<T>,
    /// Where train-mode updates are written back; `None` discards them.
    pub ids: Option<(ParamId, ParamId)>,
    pub momentum: f64,
    pub eps: f64,
}

/// Backward rule for an operation defined outside this crate.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradient for each input given the output gradient; `None` means zero.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Conv { input: Var, weight: Var, bias: Option<Var>, geom: Box<ConvGeometry> },
    MaxPool { input: Var, argmax: Vec<u32> },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, mode: BatchNormMode },
    Dense { input: Var, weight: Var, bias: Var },
    Add(Var, Var),
    Mul(Var, Var),
    WeightedSum(Vec<(Var, T)>),
    Sum(Var),
    Concat(Vec<Var>),
    Upsample { input: Var, factors: Vec<usize> },
    SelectChannels { input: Var, channels: Vec<usize> },
    FramesToVolume(Var),
    FramePool(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation over tensors of element type `T`.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, ParamId)>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), stat_updates: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn stat_updates(&self) -> &[StatUpdate<T>] {
        &self.stat_updates
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let entry = store.entry(id);
        let v = self.push(entry.value.clone(), Op::Leaf, entry.kind == ParamKind::Trainable);
        self.params.push((v, id));
        v
    }

    pub fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let geom = ConvGeometry::new(spec, self.value(input).shape(), self.value(weight).shape())?;
        if let Some(b) = bias {
            if self.value(b).shape() != [spec.out_channels] {
                return Err(TensorError::shape(
                    "conv",
                    format!("bias shape {:?}, expected [{}]", self.value(b).shape(), spec.out_channels),
                ));
            }
        }
        let out = geom.forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_parts_unchecked(geom.out_shape.clone(), out);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::Conv { input, weight, bias, geom: Box::new(geom) }, rg))
    }

    pub fn max_pool(&mut self, input: Var, spec: &PoolSpec) -> Result<Var> {
        let geom = PoolGeometry::new(spec, self.value(input).shape())?;
        let (out, argmax) = geom.forward(self.value(input).data());
        let value = Tensor::from_parts_unchecked(geom.out_shape.clone(), out);
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sigmoid(input), rg)
    }

    /// Softmax across axis 1 (channels) at every batch/spatial position.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() < 2 {
            return Err(TensorError::shape("softmax", "input needs a channel axis at position 1"));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let inner: usize = x.shape()[2..].iter().product();
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            let base = b * c * inner;
            for s in 0..inner {
                let mut m = T::neg_infinity();
                for k in 0..c {
                    m = m.max(xd[base + k * inner + s]);
                }
                let mut z = T::zero();
                for k in 0..c {
                    let e = (xd[base + k * inner + s] - m).exp();
                    out[base + k * inner + s] = e;
                    z = z + e;
                }
                for k in 0..c {
                    out[base + k * inner + s] = out[base + k * inner + s] / z;
                }
            }
        }
        let value = Tensor::from_parts_unchecked(x.shape().to_vec(), out);
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Softmax(input), rg))
    }

    /// Per-channel normalization over the batch and spatial axes.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: BatchNormState<'_, T>,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let x = self.value(input);
        if x.rank() < 2 {
            return Err(TensorError::shape("batchnorm", "input needs a channel axis at position 1"));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let inner: usize = x.shape()[2..].iter().product();
        for (what, t) in [
            ("gamma", self.value(gamma)),
            ("beta", self.value(beta)),
            ("running mean", state.running_mean),
            ("running var", state.running_var),
        ] {
            if t.shape() != [c] {
                return Err(TensorError::shape(
                    "batchnorm",
                    format!("{what} has shape {:?}, input has {c} channels", t.shape()),
                ));
            }
        }
        let eps = T::of_f64(state.eps);
        let count = T::of_f64((n * inner) as f64);
        let xd = x.data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut batch_mean = vec![T::zero(); c];
        let mut batch_var = vec![T::zero(); c];
        for ch in 0..c {
            let lanes = (0..n).map(|b| (b * c + ch) * inner);
            let (mean, var) = match mode {
                BatchNormMode::Train => {
                    let mut s = T::zero();
                    for base in lanes.clone() {
                        s = s + xd[base..base + inner].iter().copied().sum::<T>();
                    }
                    let mean = s / count;
                    let mut sq = T::zero();
                    for base in lanes.clone() {
                        sq = sq + xd[base..base + inner].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                    }
                    (mean, sq / count)
                }
                BatchNormMode::Infer => (state.running_mean.data()[ch], state.running_var.data()[ch]),
            };
            batch_mean[ch] = mean;
            batch_var[ch] = var;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[ch] = inv;
            for base in lanes {
                for i in base..base + inner {
                    let h = (xd[i] - mean) * inv;
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        if mode == BatchNormMode::Train {
            if let Some((mean_id, var_id)) = state.ids {
                let mom = T::of_f64(state.momentum);
                let blend = |running: &Tensor<T>, batch: &[T]| {
                    Tensor::from_parts_unchecked(
                        vec![c],
                        running.data().iter().zip(batch).map(|(&r, &v)| mom * r + (T::one() - mom) * v).collect(),
                    )
                };
                self.stat_updates.push(StatUpdate { id: mean_id, value: blend(state.running_mean, &batch_mean) });
                self.stat_updates.push(StatUpdate { id: var_id, value: blend(state.running_var, &batch_var) });
            }
        }
        let value = Tensor::from_parts_unchecked(self.value(input).shape().to_vec(), out);
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(value, Op::BatchNorm { input, gamma, beta, xhat, inv_std, mode }, rg))
    }

    /// `x [m, in] -> x W^T + b`, with `W [out, in]` and `b [out]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] || b.shape() != [w.shape()[0]] {
            return Err(TensorError::shape(
                "dense",
                format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let (m, k, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let mut out = vec![T::zero(); m * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(b.data());
        }
        gemm(MatRef::new(x.data(), m, k), MatRef::new(w.data(), o, k).t(), T::one(), &mut out);
        let value = Tensor::from_parts_unchecked(vec![m, o], out);
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, Op::Dense { input, weight, bias }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_parts_unchecked(self.value(a).shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `sum_i c_i * x_i` over same-shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| TensorError::invalid("weighted_sum", "no terms"))?;
        let mut value = self.value(first).zeros_like();
        let mut coeffs = Vec::with_capacity(terms.len());
        for &(v, c) in terms {
            self.same_shape("weighted_sum", first, v)?;
            let c = T::of_f64(c);
            for (o, &x) in value.data_mut().iter_mut().zip(self.value(v).data()) {
                *o = *o + c * x;
            }
            coeffs.push((v, c));
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&vars);
        Ok(self.push(value, Op::WeightedSum(coeffs), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.weighted_sum(&[(a, c)]).expect("single term always matches its own shape")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?);
        let n = first.shape()[0];
        let tail = first.shape()[2..].to_vec();
        let inner: usize = tail.iter().product();
        let mut total_c = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() < 2 || s[0] != n || s[2..] != tail[..] {
                return Err(TensorError::shape(
                    "concat",
                    format!("{:?} is incompatible with {:?}", s, first.shape()),
                ));
            }
            total_c += s[1];
        }
        let mut data = Vec::with_capacity(n * total_c * inner);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = vec![n, total_c];
        shape.extend(tail);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::from_parts_unchecked(shape, data), Op::Concat(parts.to_vec()), rg))
    }

    /// Nearest-neighbour upsampling of the trailing `factors.len()` axes.
    pub fn upsample_nearest(&mut self, input: Var, factors: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if factors.is_empty() || factors.len() > 3 || factors.len() + 2 != x.rank() || factors.contains(&0) {
            return Err(TensorError::shape(
                "upsample",
                format!("factors {factors:?} for input {:?}", x.shape()),
            ));
        }
        let (out, shape) = pool::upsample_nearest(x.data(), x.shape(), factors);
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::Upsample { input, factors: factors.to_vec() },
            rg,
        ))
    }

    pub fn select_channels(&mut self, input: Var, channels: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if x.rank() < 2 || channels.is_empty() || channels.iter().any(|&c| c >= x.shape()[1]) {
            return Err(TensorError::shape(
                "select_channels",
                format!("channels {channels:?} from input {:?}", x.shape()),
            ));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let inner: usize = x.shape()[2..].iter().product();
        let mut data = Vec::with_capacity(n * channels.len() * inner);
        for b in 0..n {
            for &k in channels {
                let base = (b * c + k) * inner;
                data.extend_from_slice(&x.data()[base..base + inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[1] = channels.len();
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor::from_parts_unchecked(shape, data),
            Op::SelectChannels { input, channels: channels.to_vec() },
            rg,
        ))
    }

    /// `[t, c, h, w] -> [1, c, t, h, w]`: a stack of frames becomes one volume.
    pub fn frames_to_volume(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 4 {
            return Err(TensorError::shape("frames_to_volume", format!("expected rank 4, got {:?}", x.shape())));
        }
        let s = x.shape();
        let value = x.permute(&[1, 0, 2, 3])?.reshape(&[1, s[1], s[0], s[2], s[3]])?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::FramesToVolume(input), rg))
    }

    /// `[n, c, t, h, w] -> [n * t, c]`: spatial mean per frame.
    pub fn frame_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 5 {
            return Err(TensorError::shape("frame_pool", format!("expected rank 5, got {:?}", x.shape())));
        }
        let [n, c, t, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]];
        let hw = h * w;
        let norm = T::of_f64(1.0 / hw as f64);
        let mut data = vec![T::zero(); n * t * c];
        for b in 0..n {
            for k in 0..c {
                for f in 0..t {
                    let base = ((b * c + k) * t + f) * hw;
                    data[(b * t + f) * c + k] = x.data()[base..base + hw].iter().copied().sum::<T>() * norm;
                }
            }
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::from_parts_unchecked(vec![n * t, c], data), Op::FramePool(input), rg))
    }

    /// Records an externally computed node with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let seed = &self.nodes[loss.0].value;
        if seed.len() != 1 {
            return Err(TensorError::NotScalar { shape: seed.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed.map(|_| T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, gy, &mut grads, &mut leaves)?;
        }
        Ok(Gradients { leaves, params: self.params.clone() })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        i: usize,
        gy: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        leaves: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let like = |v: Var, data: Vec<T>| Tensor::from_parts_unchecked(self.value(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => leaves[i] = Some(gy),
            Op::Conv { input, weight, bias, geom } => {
                let want_dx = self.requires_grad(*input);
                let (dx, dw, db) =
                    geom.backward(self.value(*input).data(), self.value(*weight).data(), gy.data(), want_dx);
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, like(*input, dx));
                }
                self.accumulate(grads, *weight, like(*weight, dw));
                if let Some(b) = bias {
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (&a, &g) in argmax.iter().zip(gy.data()) {
                    dx[a as usize] = dx[a as usize] + g;
                }
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::Relu(x) => {
                let dx = y.data().iter().zip(gy.data()).map(|(&o, &g)| if o > T::zero() { g } else { T::zero() }).collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Sigmoid(x) => {
                let dx = y.data().iter().zip(gy.data()).map(|(&s, &g)| g * s * (T::one() - s)).collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Softmax(x) => {
                let (n, c) = (y.shape()[0], y.shape()[1]);
                let inner: usize = y.shape()[2..].iter().product();
                let (yd, gd) = (y.data(), gy.data());
                let mut dx = vec![T::zero(); yd.len()];
                for b in 0..n {
                    let base = b * c * inner;
                    for s in 0..inner {
                        let dot: T = (0..c).map(|k| yd[base + k * inner + s] * gd[base + k * inner + s]).sum();
                        for k in 0..c {
                            let j = base + k * inner + s;
                            dx[j] = yd[j] * (gd[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, mode } => {
                let shape = y.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let count = T::of_f64((n * inner) as f64);
                let g = self.value(*gamma).data();
                let gd = gy.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); gd.len()];
                for ch in 0..c {
                    let lanes: Vec<usize> = (0..n).map(|b| (b * c + ch) * inner).collect();
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    for &base in &lanes {
                        for j in base..base + inner {
                            sg = sg + gd[j];
                            sgx = sgx + gd[j] * xhat[j];
                        }
                    }
                    dbeta[ch] = sg;
                    dgamma[ch] = sgx;
                    let k = g[ch] * inv_std[ch];
                    for &base in &lanes {
                        for j in base..base + inner {
                            dx[j] = match mode {
                                BatchNormMode::Train => k * (gd[j] - sg / count - xhat[j] * sgx / count),
                                BatchNormMode::Infer => k * gd[j],
                            };
                        }
                    }
                }
                self.accumulate(grads, *input, like(*input, dx));
                self.accumulate(grads, *gamma, like(*gamma, dgamma));
                self.accumulate(grads, *beta, like(*beta, dbeta));
            }
            Op::Dense { input, weight, bias } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (m, k, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let gm = MatRef::new(gy.data(), m, o);
                if self.requires_grad(*input) {
                    let mut dx = vec![T::zero(); m * k];
                    gemm(gm, MatRef::new(w.data(), o, k), T::zero(), &mut dx);
                    self.accumulate(grads, *input, like(*input, dx));
                }
                let mut dw = vec![T::zero(); o * k];
                gemm(gm.t(), MatRef::new(x.data(), m, k), T::zero(), &mut dw);
                self.accumulate(grads, *weight, like(*weight, dw));
                let mut db = vec![T::zero(); o];
                for row in gy.data().chunks(o) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                self.accumulate(grads, *bias, like(*bias, db));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let da = gy.data().iter().zip(bd).map(|(&g, &v)| g * v).collect();
                let db = gy.data().iter().zip(ad).map(|(&g, &v)| g * v).collect();
                self.accumulate(grads, *a, like(*a, da));
                self.accumulate(grads, *b, like(*b, db));
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, gy.map(|g| g * c));
                }
            }
            Op::Sum(x) => {
                let g = gy.data()[0];
                self.accumulate(grads, *x, self.value(*x).map(|_| g));
            }
            Op::Concat(parts) => {
                let n = y.shape()[0];
                let total_c = y.shape()[1];
                let inner: usize = y.shape()[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(n * c * inner);
                        for b in 0..n {
                            let base = (b * total_c + offset) * inner;
                            d.extend_from_slice(&gy.data()[base..base + c * inner]);
                        }
                        self.accumulate(grads, p, like(p, d));
                    }
                    offset += c;
                }
            }
            Op::Upsample { input, factors } => {
                let dx = pool::upsample_nearest_backward(gy.data(), self.value(*input).shape(), factors);
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::SelectChannels { input, channels } => {
                let xs = self.value(*input).shape();
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let mut dx = vec![T::zero(); n * c * inner];
                for b in 0..n {
                    for (j, &k) in channels.iter().enumerate() {
                        let src = (b * channels.len() + j) * inner;
                        let dst = (b * c + k) * inner;
                        for s in 0..inner {
                            dx[dst + s] = dx[dst + s] + gy.data()[src + s];
                        }
                    }
                }
                self.accumulate(grads, *input, like(*input, dx));
            }
            Op::FramesToVolume(x) => {
                let s = y.shape();
                let dx = gy.clone().reshape(&[s[1], s[2], s[3], s[4]])?.permute(&[1, 0, 2, 3])?;
                self.accumulate(grads, *x, dx);
            }
            Op::FramePool(x) => {
                let xs = self.value(*x).shape();
                let [n, c, t, h, w] = [xs[0], xs[1], xs[2], xs[3], xs[4]];
                let hw = h * w;
                let norm = T::of_f64(1.0 / hw as f64);
                let mut dx = vec![T::zero(); n * c * t * hw];
                for b in 0..n {
                    for k in 0..c {
                        for f in 0..t {
                            let g = gy.data()[(b * t + f) * c + k] * norm;
                            let base = ((b * c + k) * t + f) * hw;
                            dx[base..base + hw].fill(g);
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let dins = op.backward(&values, y, &gy)?;
                if dins.len() != inputs.len() {
                    return Err(TensorError::invalid(
                        "custom",
                        format!("{} returned {} gradients for {} inputs", op.name(), dins.len(), inputs.len()),
                    ));
                }
                for (&v, d) in inputs.iter().zip(dins) {
                    if let Some(d) = d {
                        if d.shape() != self.value(v).shape() {
                            return Err(TensorError::shape(op.name(), "gradient shape differs from its input"));
                        }
                        self.accumulate(grads, v, d);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    leaves: Vec<Option<Tensor<T>>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::input_with_grad`] or
    /// [`Graph::param`]; `None` when no path reaches it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// One gradient per store entry, summed over every use of the parameter.
    /// Entries that do not reach the loss get zeros.
    pub fn for_params(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store.ids().map(|id| store.get(id).zeros_like()).collect();
        for &(v, id) in &self.params {
            if let Some(g) = self.wrt(v) {
                out[id.index()].add_assign(g);
            }
        }
        out
    }
}
