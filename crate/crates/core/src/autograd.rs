//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every op appends one node holding its output value and enough context to
//! run its backward rule. [`Tape::backward`] walks the nodes in reverse
//! record order, so gradients are complete for every node once its position
//! is reached. Nodes that cannot reach a `requires_grad` leaf are never
//! differentiated.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, GroupNormCache};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeometry, batch: usize, out_channels: usize },
    GroupNorm { input: Var, gamma: Var, beta: Var, groups: usize, cache: GroupNormCache },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Relu { input: Var },
    AvgPool { input: Var },
    Add { lhs: Var, rhs: Var },
    Mul { lhs: Var, rhs: Var },
    Scale { input: Var, factor: f32 },
    Sum { input: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn grad(&self, var: Var) -> Option<&[f32]> {
        self.nodes[var.0].value.grad()
    }

    /// Moves a recorded value (with its gradient) out of the tape.
    pub fn take(&mut self, var: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[var.0].value, Tensor::scalar(0.0))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.value(input).shape(), self.value(kernel).shape());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, kernel {ks:?}: both must be 4-D")));
        }
        if xs[1] != ks[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but kernel {ks:?} expects {}", xs[1], ks[1]),
            ));
        }
        if ks[2] != ks[3] {
            return Err(Error::shape("conv2d", format!("kernel {ks:?} is not square")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if ks[2] > xs[2] + 2 * padding || ks[2] > xs[3] + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel extent {} exceeds padded input {}x{}", ks[2], xs[2] + 2 * padding, xs[3] + 2 * padding),
            ));
        }
        let geom = ConvGeometry { channels: xs[1], height: xs[2], width: xs[3], kernel: ks[2], stride, padding };
        let (batch, out_channels) = (xs[0], ks[0]);
        let out = kernels::conv2d_forward(&geom, batch, out_channels, self.value(input).data(), self.value(kernel).data());
        let shape = [batch, out_channels, geom.out_height(), geom.out_width()];
        let needs = self.needs(&[input, kernel]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv2d { input, kernel, geom, batch, out_channels }, needs))
    }

    pub fn group_norm(&mut self, input: Var, groups: usize, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("group_norm", format!("input {xs:?} must be 4-D")));
        }
        let channels = xs[1];
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!("{channels} channels not divisible into {groups} groups")));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Config(format!("group_norm eps must be positive, got {eps}")));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [channels] {
                return Err(Error::shape(
                    "group_norm",
                    format!("{name} {:?} must be [{channels}]", self.value(v).shape()),
                ));
            }
        }
        let shape = [xs[0], xs[1], xs[2], xs[3]];
        let (out, cache) = kernels::group_norm_forward(
            shape,
            groups,
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let needs = self.needs(&[input, gamma, beta]);
        Ok(self.push(Tensor::new(&xs, out)?, Op::GroupNorm { input, gamma, beta, groups, cache }, needs))
    }

    /// `input[N,D] · weight[D,M] + bias[M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(input).shape(), self.value(weight).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("linear", format!("input {xs:?} incompatible with weight {ws:?}")));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        if let Some(b) = bias {
            if self.value(b).shape() != [m] {
                return Err(Error::shape("linear", format!("bias {:?} must be [{m}]", self.value(b).shape())));
            }
        }
        let mut out = vec![0.0; n * m];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bd);
            }
        }
        kernels::gemm_nn(n, d, m, self.value(input).data(), self.value(weight).data(), &mut out);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let needs = self.needs(&deps);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Linear { input, weight, bias }, needs))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(x.shape(), data).expect("same shape");
        let needs = self.needs(&[input]);
        self.push(t, Op::Relu { input }, needs)
    }

    /// Global average pool `[N,C,H,W] -> [N,C]`.
    pub fn avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::shape("avg_pool", format!("input {s:?} must be 4-D")));
        }
        let plane = s[2] * s[3];
        let data = x.data().chunks(plane).map(|p| p.iter().sum::<f32>() / plane as f32).collect();
        let t = Tensor::new(&[s[0], s[1]], data)?;
        let needs = self.needs(&[input]);
        Ok(self.push(t, Op::AvgPool { input }, needs))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let t = self.zip("add", lhs, rhs, |a, b| a + b)?;
        let needs = self.needs(&[lhs, rhs]);
        Ok(self.push(t, Op::Add { lhs, rhs }, needs))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let t = self.zip("mul", lhs, rhs, |a, b| a * b)?;
        let needs = self.needs(&[lhs, rhs]);
        Ok(self.push(t, Op::Mul { lhs, rhs }, needs))
    }

    fn zip(&self, op: &'static str, lhs: Var, rhs: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data)
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let t = Tensor::new(x.shape(), data).expect("same shape");
        let needs = self.needs(&[input]);
        self.push(t, Op::Scale { input, factor }, needs)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        let needs = self.needs(&[input]);
        self.push(Tensor::scalar(total), Op::Sum { input }, needs)
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label: bad, classes: k });
        }
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0f32;
        for (i, row) in x.data().chunks(k).enumerate() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let denom: f32 = row.iter().map(|&v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            for (j, &v) in row.iter().enumerate() {
                probs[i * k + j] = (v - max).exp() / denom;
            }
            loss += log_denom - (row[labels[i]] - max);
        }
        loss /= labels.len() as f32;
        let needs = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, needs))
    }

    /// Populates `grad` on every differentiable node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].value.set_grad(Some(vec![1.0]));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(grad_out) = self.nodes[idx].value.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let contributions = self.backward_rule(idx, &grad_out);
            for (var, g) in contributions {
                let t = &mut self.nodes[var.0].value;
                match t.grad() {
                    Some(existing) => {
                        let summed = existing.iter().zip(&g).map(|(a, b)| a + b).collect();
                        t.set_grad(Some(summed));
                    }
                    None => t.set_grad(Some(g)),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn backward_rule(&self, idx: usize, dy: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let mut out = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom, batch, out_channels } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let mut dx = self.wants(*input).then(|| vec![0.0; x.len()]);
                let mut dk = self.wants(*kernel).then(|| vec![0.0; k.len()]);
                kernels::conv2d_backward(
                    geom,
                    *batch,
                    *out_channels,
                    x.data(),
                    k.data(),
                    dy,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                out.extend(dx.map(|g| (*input, g)));
                out.extend(dk.map(|g| (*kernel, g)));
            }
            Op::GroupNorm { input, gamma, beta, groups, cache } => {
                let x = self.value(*input);
                let s = x.shape();
                let channels = s[1];
                let mut dx = self.wants(*input).then(|| vec![0.0; x.len()]);
                let mut dg = self.wants(*gamma).then(|| vec![0.0; channels]);
                let mut db = self.wants(*beta).then(|| vec![0.0; channels]);
                kernels::group_norm_backward(
                    [s[0], s[1], s[2], s[3]],
                    *groups,
                    cache,
                    self.value(*gamma).data(),
                    dy,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                out.extend(dx.map(|g| (*input, g)));
                out.extend(dg.map(|g| (*gamma, g)));
                out.extend(db.map(|g| (*beta, g)));
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, d, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                if self.wants(*input) {
                    let mut dx = vec![0.0; n * d];
                    kernels::gemm_nt(n, m, d, dy, w.data(), &mut dx);
                    out.push((*input, dx));
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0; d * m];
                    kernels::gemm_tn(d, n, m, x.data(), dy, &mut dw);
                    out.push((*weight, dw));
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; m];
                    for row in dy.chunks(m) {
                        for (acc, &g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    out.push((b, db));
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let dx = x.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                out.push((*input, dx));
            }
            Op::AvgPool { input } => {
                let s = self.value(*input).shape();
                let plane = s[2] * s[3];
                let mut dx = Vec::with_capacity(s.iter().product());
                for &g in dy {
                    dx.extend(std::iter::repeat_n(g / plane as f32, plane));
                }
                out.push((*input, dx));
            }
            Op::Add { lhs, rhs } => {
                if self.wants(*lhs) {
                    out.push((*lhs, dy.to_vec()));
                }
                if self.wants(*rhs) {
                    out.push((*rhs, dy.to_vec()));
                }
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.value(*lhs).data(), self.value(*rhs).data());
                if self.wants(*lhs) {
                    out.push((*lhs, dy.iter().zip(b).map(|(g, v)| g * v).collect()));
                }
                if self.wants(*rhs) {
                    out.push((*rhs, dy.iter().zip(a).map(|(g, v)| g * v).collect()));
                }
            }
            Op::Scale { input, factor } => {
                out.push((*input, dy.iter().map(|g| g * factor).collect()));
            }
            Op::Sum { input } => {
                out.push((*input, vec![dy[0]; self.value(*input).len()]));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).shape()[1];
                let scale = dy[0] / labels.len() as f32;
                let mut dx: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= scale;
                }
                out.push((*logits, dx));
            }
        }
        out
    }
}
