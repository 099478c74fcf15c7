//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive in the order it is executed, so the
//! node list is already a topological order. [`Graph::backward`] walks it once
//! in reverse and accumulates adjoints additively, which handles fan-out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{ConvPlan, Padding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        plan: ConvPlan,
    },
    InstanceNorm {
        input: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        input: Var,
        scale: Option<Var>,
        shift: Option<Var>,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    Softmax {
        input: Var,
        temperature: f64,
    },
    Upsample {
        input: Var,
    },
    ChannelMask {
        input: Var,
        mask: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine {
        input: Var,
        scale: f64,
    },
    Sum(Var),
    ChannelSum(Var),
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Record of one forward evaluation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let plan = ConvPlan::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        let out = plan.forward(self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(plan.output_shape(), out)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(value, Op::Conv3d { input, kernel, plan }, rg))
    }

    /// Per-channel standardization over the spatial axes (no affine terms).
    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("instance_norm eps {eps} must be > 0")));
        }
        let x = self.value(input);
        if x.rank() < 2 {
            return Err(Error::shape("instance_norm", format!("{:?}", x.shape())));
        }
        let channels = x.shape()[0];
        let n = x.inner_len() as f64;
        let mut normalized = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(channels);
        for c in 0..channels {
            let xs = x.channel(c);
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            normalized.extend(xs.iter().map(|v| (v - mean) * is));
        }
        let value = Tensor::new(x.shape().to_vec(), normalized.clone())?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::InstanceNorm {
                input,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// `y[c,..] = scale[c] * x[c,..] + shift[c]`; either term may be absent.
    pub fn channel_affine(&mut self, input: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let channels = x.shape()[0];
        for p in [scale, shift].into_iter().flatten() {
            if self.value(p).len() != channels {
                return Err(Error::shape(
                    "channel_affine",
                    format!("{} channels vs parameter of length {}", channels, self.value(p).len()),
                ));
            }
        }
        let inner = x.inner_len();
        let mut out = x.clone();
        for c in 0..channels {
            let s = scale.map_or(1.0, |p| self.value(p).data()[c]);
            let b = shift.map_or(0.0, |p| self.value(p).data()[c]);
            for v in &mut out.data_mut()[c * inner..(c + 1) * inner] {
                *v = s * *v + b;
            }
        }
        let rg = self.rg(input) || [scale, shift].into_iter().flatten().any(|p| self.rg(p));
        Ok(self.push(out, Op::ChannelAffine { input, scale, shift }, rg))
    }

    /// Elementwise `max(x, slope * x)`; the derivative at 0 is `slope`.
    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::InvalidArgument(format!("leaky_relu slope {slope} not in (0,1)")));
        }
        let value = self.value(input).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(input);
        Ok(self.push(value, Op::LeakyRelu { input, slope }, rg))
    }

    /// Softmax of `logits / temperature` over the leading (class) axis.
    pub fn softmax_temperature(&mut self, input: Var, temperature: f64) -> Result<Var> {
        let value = softmax_temperature(self.value(input), temperature)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Softmax { input, temperature }, rg))
    }

    /// Nearest-neighbour upsampling by 2 on every spatial axis.
    pub fn upsample_nearest(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 4 {
            return Err(Error::shape("upsample_nearest", format!("{:?}", x.shape())));
        }
        let [c, d, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
        let src = x.data();
        let mut out = Vec::with_capacity(c * d2 * h2 * w2);
        for ci in 0..c {
            for z in 0..d2 {
                for y in 0..h2 {
                    let row = ((ci * d + z / 2) * h + y / 2) * w;
                    out.extend((0..w2).map(|xx| src[row + xx / 2]));
                }
            }
        }
        let value = Tensor::new(vec![c, d2, h2, w2], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Upsample { input }, rg))
    }

    /// Whole-channel dropout. Identity outside training or at rate 0.
    pub fn dropout3d(&mut self, input: Var, rate: f64, seed: u64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0,1)")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let x = self.value(input);
        let channels = x.shape()[0];
        let inner = x.inner_len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let channel_scale: Vec<f64> = (0..channels)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask: Vec<f64> = channel_scale
            .iter()
            .flat_map(|&s| std::iter::repeat(s).take(inner))
            .collect();
        let value = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::ChannelMask { input, mask }, rg))
    }

    /// Concatenate along the leading (channel) axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.value(inputs[0]).shape().to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let t = self.value(v);
            if t.shape()[1..] != first[1..] {
                return Err(Error::shape(
                    "concat",
                    format!("spatial extents {:?} vs {:?}", &t.shape()[1..], &first[1..]),
                ));
            }
            channels += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = channels;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(input).map(|v| scale * v + shift);
        let rg = self.rg(input);
        self.push(value, Op::Affine { input, scale }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(input);
        self.push(value, Op::Sum(input), rg)
    }

    /// Sum over all non-leading axes, giving one value per channel.
    pub fn channel_sum(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let channels = x.shape()[0];
        let sums: Vec<f64> = (0..channels).map(|c| x.channel(c).iter().sum()).collect();
        let value = Tensor::from_fn(&[channels], |c| sums[c]);
        let rg = self.rg(input);
        self.push(value, Op::ChannelSum(input), rg)
    }

    /// Scalar `sum_i w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<f64>) -> Result<Var> {
        let x = self.value(input);
        if x.len() != weights.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} values vs {} weights", x.len(), weights.len()),
            ));
        }
        let value = Tensor::scalar(x.data().iter().zip(&weights).map(|(a, b)| a * b).sum());
        let rg = self.rg(input);
        Ok(self.push(value, Op::WeightedSum { input, weights }, rg))
    }

    /// Populate gradients of the scalar `loss` on every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        if !self.rg(loss) {
            return Err(Error::InvalidArgument(
                "loss does not depend on any tensor that requires a gradient".into(),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            let shape = self.nodes[id].value.shape().to_vec();
            self.nodes[id].grad = Some(Tensor::new(shape, g)?);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Conv3d { input, kernel, plan } => {
                if rg(*input) {
                    accumulate(grads, *input, plan.backward_input(g, val(*kernel).data()));
                }
                if rg(*kernel) {
                    accumulate(grads, *kernel, plan.backward_kernel(g, val(*input).data()));
                }
            }
            Op::InstanceNorm {
                input,
                normalized,
                inv_std,
            } => {
                if rg(*input) {
                    let inner = val(*input).inner_len();
                    let n = inner as f64;
                    let mut dx = vec![0.0; g.len()];
                    for (c, &is) in inv_std.iter().enumerate() {
                        let r = c * inner..(c + 1) * inner;
                        let gc = &g[r.clone()];
                        let xh = &normalized[r.clone()];
                        let mean_g = gc.iter().sum::<f64>() / n;
                        let mean_gx = gc.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((d, &gi), &xi) in dx[r].iter_mut().zip(gc).zip(xh) {
                            *d = is * (gi - mean_g - xi * mean_gx);
                        }
                    }
                    accumulate(grads, *input, dx);
                }
            }
            Op::ChannelAffine { input, scale, shift } => {
                let x = val(*input);
                let inner = x.inner_len();
                let channels = x.shape()[0];
                if rg(*input) {
                    let mut dx = g.to_vec();
                    if let Some(s) = scale {
                        for c in 0..channels {
                            let sc = val(*s).data()[c];
                            for d in &mut dx[c * inner..(c + 1) * inner] {
                                *d *= sc;
                            }
                        }
                    }
                    accumulate(grads, *input, dx);
                }
                if let Some(s) = scale.filter(|s| rg(*s)) {
                    let ds = (0..channels)
                        .map(|c| {
                            let r = c * inner..(c + 1) * inner;
                            g[r.clone()].iter().zip(&x.data()[r]).map(|(a, b)| a * b).sum()
                        })
                        .collect();
                    accumulate(grads, s, ds);
                }
                if let Some(b) = shift.filter(|b| rg(*b)) {
                    let db = (0..channels)
                        .map(|c| g[c * inner..(c + 1) * inner].iter().sum())
                        .collect();
                    accumulate(grads, b, db);
                }
            }
            Op::LeakyRelu { input, slope } => {
                if rg(*input) {
                    let dx = g
                        .iter()
                        .zip(val(*input).data())
                        .map(|(&gi, &x)| if x > 0.0 { gi } else { slope * gi })
                        .collect();
                    accumulate(grads, *input, dx);
                }
            }
            Op::Softmax { input, temperature } => {
                if rg(*input) {
                    let p = &nodes[id].value;
                    let classes = p.shape()[0];
                    let inner = p.inner_len();
                    let pd = p.data();
                    let mut dz = vec![0.0; g.len()];
                    for v in 0..inner {
                        let dot: f64 = (0..classes).map(|c| pd[c * inner + v] * g[c * inner + v]).sum();
                        for c in 0..classes {
                            let i = c * inner + v;
                            dz[i] = pd[i] * (g[i] - dot) / temperature;
                        }
                    }
                    accumulate(grads, *input, dz);
                }
            }
            Op::Upsample { input } => {
                if rg(*input) {
                    let x = val(*input);
                    let [c, d, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
                    let mut dx = vec![0.0; x.len()];
                    for ci in 0..c {
                        for z in 0..d2 {
                            for y in 0..h2 {
                                let row = ((ci * d + z / 2) * h + y / 2) * w;
                                let src = ((ci * d2 + z) * h2 + y) * w2;
                                for xx in 0..w2 {
                                    dx[row + xx / 2] += g[src + xx];
                                }
                            }
                        }
                    }
                    accumulate(grads, *input, dx);
                }
            }
            Op::ChannelMask { input, mask } => {
                if rg(*input) {
                    accumulate(grads, *input, g.iter().zip(mask).map(|(a, m)| a * m).collect());
                }
            }
            Op::Concat { inputs } => {
                let mut start = 0;
                for &v in inputs {
                    let n = val(v).len();
                    if rg(v) {
                        accumulate(grads, v, g[start..start + n].to_vec());
                    }
                    start += n;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b).data();
                if rg(*a) {
                    accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x / y).collect());
                }
                if rg(*b) {
                    let av = val(*a).data();
                    let db = g
                        .iter()
                        .zip(av)
                        .zip(bv)
                        .map(|((gi, ai), bi)| -gi * ai / (bi * bi))
                        .collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::Affine { input, scale } => {
                if rg(*input) {
                    accumulate(grads, *input, g.iter().map(|v| v * scale).collect());
                }
            }
            Op::Sum(input) => {
                if rg(*input) {
                    accumulate(grads, *input, vec![g[0]; val(*input).len()]);
                }
            }
            Op::ChannelSum(input) => {
                if rg(*input) {
                    let inner = val(*input).inner_len();
                    let dx = g
                        .iter()
                        .flat_map(|&gc| std::iter::repeat(gc).take(inner))
                        .collect();
                    accumulate(grads, *input, dx);
                }
            }
            Op::WeightedSum { input, weights } => {
                if rg(*input) {
                    accumulate(grads, *input, weights.iter().map(|w| w * g[0]).collect());
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Class-axis softmax of `logits / temperature` with max subtraction.
pub fn softmax_temperature(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature {temperature} must be a positive finite number"
        )));
    }
    if logits.rank() < 1 {
        return Err(Error::shape("softmax_temperature", "rank-0 input"));
    }
    let classes = logits.shape()[0];
    let inner = logits.inner_len();
    let z = logits.data();
    let mut out = vec![0.0; z.len()];
    let mut scratch = vec![0.0; classes];
    for v in 0..inner {
        let mut m = f64::NEG_INFINITY;
        for c in 0..classes {
            scratch[c] = z[c * inner + v] / temperature;
            m = m.max(scratch[c]);
        }
        let mut total = 0.0;
        for s in scratch.iter_mut() {
            *s = (*s - m).exp();
            total += *s;
        }
        for c in 0..classes {
            out[c * inner + v] = scratch[c] / total;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}
