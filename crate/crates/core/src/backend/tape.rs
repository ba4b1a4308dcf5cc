//! Reverse-mode recording. Every op evaluates eagerly and appends a node;
//! `backward` walks the nodes in reverse creation order (a valid reverse
//! topological order) and accumulates gradients into parameter leaves.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom, Padding};
use super::param::{ParamId, ParamStore, RunningStats};
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept by the running statistics on each training update.
pub const BN_MOMENTUM: f32 = 0.9;

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm statistics source.
pub enum NormStats<'a> {
    /// Use batch statistics and fold them into the running estimates.
    Train(&'a mut RunningStats),
    /// Use the running estimates.
    Eval(&'a RunningStats),
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Relu { x: Var, mask: Vec<bool> },
    Sigmoid(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, inv_std: Vec<f32>, batch_stats: bool },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2(Var),
    Add(Var, Var),
    Mul(Var, Var),
    BroadcastChannels(Var),
    Concat(Var, Var),
    SumAll(Var),
    DiceLoss { pred: Var, target: Vec<f32>, eps: f64, inter: f64, denom: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    scalar: Option<f64>,
}

/// Gradients produced by one backward pass, indexed by recorded value.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// The branch taken by every ReLU and max-pool window of one recording,
/// in op order. Replaying it turns the network into a smooth function of its
/// parameters that agrees with the original in a neighbourhood of the point
/// where the pattern was captured, which is what finite-difference checks
/// of a deep ReLU network need.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationPattern {
    relu: Vec<Vec<bool>>,
    pool: Vec<Vec<u32>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    spent: bool,
    replay: Option<(ActivationPattern, usize, usize)>,
}

fn mismatch(op: &'static str, a: Shape, b: Shape) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_string(),
        right: b.to_string(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A recording whose ReLU masks and pooling choices are taken from
    /// `pattern` instead of being decided by the values.
    pub fn replaying(pattern: ActivationPattern) -> Self {
        Self {
            replay: Some((pattern, 0, 0)),
            ..Self::default()
        }
    }

    pub fn activation_pattern(&self) -> ActivationPattern {
        let mut pattern = ActivationPattern::default();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { mask, .. } => pattern.relu.push(mask.clone()),
                Op::MaxPool2 { argmax, .. } => pattern.pool.push(argmax.clone()),
                _ => {}
            }
        }
        pattern
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            scalar: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of `v`; losses report their double-precision value.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.scalar.unwrap_or_else(|| node.value.data()[0] as f64)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records parameter `id` as a gradient-carrying leaf. Repeated uses share one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let value = Tensor::new(p.shape4(), p.data.clone()).expect("parameter dims are validated on insert");
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.h != ws.w || ws.h.is_multiple_of(2) {
            return Err(Error::contract("conv2d", format!("kernel {ws} must be square with odd size")));
        }
        if ws.c != xs.c {
            return Err(mismatch("conv2d", xs, ws));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.numel() != ws.n {
                return Err(mismatch("conv2d", ws, bs));
            }
        }
        let geom = ConvGeom::new(xs, ws.n, ws.h, stride, padding)
            .ok_or_else(|| Error::contract("conv2d", format!("kernel {ws} does not fit input {xs} at stride {stride}")))?;
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            xs.n,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(Shape::new(xs.n, geom.cout, geom.ho, geom.wo), data)?;
        let rg = self.grad_of(&[x, w]) || b.is_some_and(|b| self.grad_of(&[b]));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mask = match &mut self.replay {
            Some((pattern, next, _)) => {
                *next += 1;
                pattern.relu.get(*next - 1).cloned()
            }
            None => None,
        };
        let v = self.value(x);
        let mask = match mask {
            Some(m) if m.len() == v.data().len() => m,
            Some(_) => panic!("replayed activation pattern does not match the recording"),
            None => v.data().iter().map(|&a| a > 0.0).collect(),
        };
        let data = v.data().iter().zip(&mask).map(|(&a, &on)| if on { a } else { 0.0 }).collect();
        let out = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.grad_of(&[x]);
        self.push(out, Op::Relu { x, mask }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid(a)).collect();
        let out = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.grad_of(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, stats: NormStats<'_>) -> Result<Var> {
        let s = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p).numel() != s.c {
                return Err(mismatch("batchnorm2d", s, self.shape(p)));
            }
        }
        let (mean, inv_std, batch_stats) = match stats {
            NormStats::Train(running) => {
                if running.mean.len() != s.c {
                    return Err(Error::contract("batchnorm2d", format!("running stats for {} channels, input {s}", running.mean.len())));
                }
                let (mean, var) = kernels::channel_moments(self.value(x).data(), s);
                let count = (s.n * s.plane()) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for c in 0..s.c {
                    running.mean[c] = BN_MOMENTUM * running.mean[c] + (1.0 - BN_MOMENTUM) * mean[c] as f32;
                    running.var[c] = BN_MOMENTUM * running.var[c] + (1.0 - BN_MOMENTUM) * (var[c] * unbias) as f32;
                }
                let inv: Vec<f32> = var.iter().map(|&v| (1.0 / (v + BN_EPS).sqrt()) as f32).collect();
                (mean.iter().map(|&m| m as f32).collect::<Vec<_>>(), inv, true)
            }
            NormStats::Eval(running) => {
                if running.mean.len() != s.c {
                    return Err(Error::contract("batchnorm2d", format!("running stats for {} channels, input {s}", running.mean.len())));
                }
                let inv = running.var.iter().map(|&v| (1.0 / (v as f64 + BN_EPS).sqrt()) as f32).collect();
                (running.mean.clone(), inv, false)
            }
        };
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xv = self.value(x).data();
        let mut out = vec![0.0; s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * s.plane();
                let (m, is, gc, bc) = (mean[c], inv_std[c], g[c], b[c]);
                for (o, &v) in out[off..off + s.plane()].iter_mut().zip(&xv[off..off + s.plane()]) {
                    *o = gc * ((v - m) * is) + bc;
                }
            }
        }
        let out = Tensor::new(s, out)?;
        let rg = self.grad_of(&[x, gamma, beta]);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats }, rg))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::contract("maxpool2", format!("odd spatial extent in {s}")));
        }
        let replayed = match &mut self.replay {
            Some((pattern, _, next)) => {
                *next += 1;
                pattern.pool.get(*next - 1).cloned()
            }
            None => None,
        };
        let (data, argmax) = match replayed {
            Some(argmax) => {
                let xv = self.value(x).data();
                assert_eq!(argmax.len(), s.numel() / 4, "replayed activation pattern does not match the recording");
                (argmax.iter().map(|&i| xv[i as usize]).collect(), argmax)
            }
            None => kernels::maxpool2_forward(self.value(x).data(), s),
        };
        let out = Tensor::new(Shape::new(s.n, s.c, s.h / 2, s.w / 2), data)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let data = kernels::upsample2_forward(self.value(x).data(), s);
        let out = Tensor::new(Shape::new(s.n, s.c, s.h * 2, s.w * 2), data).expect("doubled extents");
        let rg = self.grad_of(&[x]);
        self.push(out, Op::Upsample2(x), rg)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(sa, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |p, q| p + q)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |p, q| p * q)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Repeats a single-channel map `channels` times along the channel axis.
    pub fn broadcast_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.c != 1 || channels == 0 {
            return Err(Error::contract("broadcast_channels", format!("expected one channel, got {s}")));
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(s.n * channels * s.plane());
        for plane in v.chunks(s.plane()) {
            for _ in 0..channels {
                data.extend_from_slice(plane);
            }
        }
        let out = Tensor::new(Shape::new(s.n, channels, s.h, s.w), data)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(out, Op::BroadcastChannels(x), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(mismatch("concat_channels", sa, sb));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(sa.numel() + sb.numel());
        for n in 0..sa.n {
            data.extend_from_slice(&va[n * sa.item()..(n + 1) * sa.item()]);
            data.extend_from_slice(&vb[n * sb.item()..(n + 1) * sb.item()]);
        }
        let out = Tensor::new(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w), data)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.grad_of(&[x]);
        let v = self.push(Tensor::scalar(total as f32), Op::SumAll(x), rg);
        self.nodes[v.0].scalar = Some(total);
        v
    }

    /// `1 − (2·Σp·t + eps) / (Σp + Σt + eps)` over every element of the batch,
    /// accumulated in double precision.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let s = self.shape(pred);
        if s != target.shape() {
            return Err(mismatch("dice_loss", s, target.shape()));
        }
        let p = self.value(pred).data();
        let t = target.data();
        let mut inter = 0.0f64;
        let mut psum = 0.0f64;
        let mut tsum = 0.0f64;
        for (&pi, &ti) in p.iter().zip(t) {
            inter += pi as f64 * ti as f64;
            psum += pi as f64;
            tsum += ti as f64;
        }
        let denom = psum + tsum + eps;
        let loss = 1.0 - (2.0 * inter + eps) / denom;
        let rg = self.grad_of(&[pred]);
        let v = self.push(
            Tensor::scalar(loss as f32),
            Op::DiceLoss { pred, target: t.to_vec(), eps, inter, denom },
            rg,
        );
        self.nodes[v.0].scalar = Some(loss);
        Ok(v)
    }

    /// Back-propagates from scalar `loss`, adding parameter gradients into `store`.
    /// A recording supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.spent {
            return Err(Error::BackwardTwice);
        }
        let numel = self.shape(loss).numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss(numel));
        }
        self.spent = true;

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }

        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(id), Some(g)) = (node.param, g.as_ref()) {
                let p = store.get_mut(id);
                if p.grad.len() != g.len() {
                    return Err(Error::contract("backward", format!("gradient size mismatch for `{}`", p.name)));
                }
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, g: Vec<f32>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xs = self.shape(*x);
                let need_dx = self.nodes[x.0].requires_grad;
                let g = kernels::conv2d_backward(self.value(*x).data(), xs.n, geom, self.value(*w).data(), dy, need_dx);
                if let Some(dx) = g.dx {
                    acc(*x, dx);
                }
                acc(*w, g.dw);
                if let Some(b) = b {
                    acc(*b, g.db);
                }
            }
            Op::Relu { x, mask } => {
                acc(*x, dy.iter().zip(mask).map(|(&g, &on)| if on { g } else { 0.0 }).collect());
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, dy.iter().zip(y).map(|(&g, &s)| g * s * (1.0 - s)).collect());
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                let s = self.shape(*x);
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let count = (s.n * s.plane()) as f64;
                let mut dgamma = vec![0.0f32; s.c];
                let mut dbeta = vec![0.0f32; s.c];
                let mut dx = vec![0.0f32; s.numel()];
                for c in 0..s.c {
                    let (m, is) = (mean[c], inv_std[c]);
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xhat = 0.0f64;
                    for n in 0..s.n {
                        let off = (n * s.c + c) * s.plane();
                        for j in off..off + s.plane() {
                            let xhat = (xv[j] - m) * is;
                            sum_dy += dy[j] as f64;
                            sum_dy_xhat += (dy[j] * xhat) as f64;
                        }
                    }
                    dgamma[c] = sum_dy_xhat as f32;
                    dbeta[c] = sum_dy as f32;
                    let scale = gv[c] * is;
                    for n in 0..s.n {
                        let off = (n * s.c + c) * s.plane();
                        for j in off..off + s.plane() {
                            dx[j] = if *batch_stats {
                                let xhat = ((xv[j] - m) * is) as f64;
                                (scale as f64 * (dy[j] as f64 - sum_dy / count - xhat * sum_dy_xhat / count)) as f32
                            } else {
                                scale * dy[j]
                            };
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.shape(*x).numel()];
                for (&g, &a) in dy.iter().zip(argmax) {
                    dx[a as usize] += g;
                }
                acc(*x, dx);
            }
            Op::Upsample2(x) => acc(*x, kernels::upsample2_backward(dy, self.shape(*x))),
            Op::Add(a, b) => {
                acc(*a, dy.to_vec());
                acc(*b, dy.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, dy.iter().zip(vb).map(|(&g, &q)| g * q).collect());
                acc(*b, dy.iter().zip(va).map(|(&g, &p)| g * p).collect());
            }
            Op::BroadcastChannels(x) => {
                let s = self.shape(*x);
                let channels = node.value.shape().c;
                let mut dx = vec![0.0f32; s.numel()];
                for n in 0..s.n {
                    let dst = &mut dx[n * s.plane()..(n + 1) * s.plane()];
                    for c in 0..channels {
                        let src = &dy[(n * channels + c) * s.plane()..][..s.plane()];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                acc(*x, dx);
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ia, ib) = (sa.item(), sb.item());
                let mut da = Vec::with_capacity(sa.numel());
                let mut db = Vec::with_capacity(sb.numel());
                for n in 0..sa.n {
                    let item = &dy[n * (ia + ib)..(n + 1) * (ia + ib)];
                    da.extend_from_slice(&item[..ia]);
                    db.extend_from_slice(&item[ia..]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::SumAll(x) => acc(*x, vec![dy[0]; self.shape(*x).numel()]),
            Op::DiceLoss { pred, target, eps, inter, denom } => {
                let up = dy[0] as f64;
                let num = 2.0 * inter + eps;
                let d2 = denom * denom;
                let g = target
                    .iter()
                    .map(|&t| (up * -(2.0 * t as f64 * denom - num) / d2) as f32)
                    .collect();
                acc(*pred, g);
            }
        }
    }
}

/// Logistic function kept strictly inside (0, 1) in single precision.
pub(crate) fn sigmoid(a: f32) -> f32 {
    let s = if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    };
    s.clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0)
}
