//! Reverse-mode automatic differentiation over a tape recorded during the
//! forward pass.
//!
//! A [`Graph`] is built fresh for every forward pass: parameters enter as
//! named leaves, every operation appends a node holding its output value and
//! whatever it needs for the backward sweep, and [`Graph::backward`] walks
//! the tape in reverse. A leaf consumed by several operations (a shared
//! weight used at every iteration of a block) receives the sum of all path
//! gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Float, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm statistics source.
pub enum BnStats<'a, T> {
    /// Normalize with batch statistics and fold them into the running
    /// estimates. Only samples flagged in `active` contribute.
    Train {
        running_mean: &'a mut [T],
        running_var: &'a mut [T],
        active: Option<&'a [bool]>,
    },
    /// Normalize with the running estimates.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// `None` in eval mode (statistics are constants).
        active: Option<Vec<bool>>,
        counted: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    ScaleBatch {
        x: Var,
        w: Var,
    },
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    /// leaf key → (var, parameter name)
    params: HashMap<String, (Var, String)>,
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every branch the recorded pass took: ReLU input signs and
    /// max-pool winners. Two passes with equal signatures lie on the same
    /// smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.nodes[x.0].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Registers parameter `name` as a leaf, reusing the existing leaf if the
    /// parameter was already registered in this pass.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        self.param_keyed(name, name, t)
    }

    /// Like [`Graph::param`] but deduplicated by `key`, so one parameter can
    /// enter the tape as several independent leaves. Gradients of all leaves
    /// sharing a parameter name are summed by [`Graph::param_grads`].
    pub fn param_keyed(&mut self, key: &str, name: &str, t: &Tensor<T>) -> Var {
        if let Some((v, _)) = self.params.get(key) {
            return *v;
        }
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("same shape");
        let v = self.push(Op::Leaf, value, true);
        self.params.insert(key.to_string(), (v, name.to_string()));
        v
    }

    /// Leaf registered under `key`, if any.
    pub fn param_var(&self, key: &str) -> Option<Var> {
        self.params.get(key).map(|(v, _)| *v)
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients after [`Graph::backward`], summed per name.
    pub fn param_grads(&self) -> HashMap<String, Vec<T>> {
        let mut out: HashMap<String, Vec<T>> = HashMap::new();
        let mut keys: Vec<_> = self.params.iter().collect();
        keys.sort_by_key(|(_, (v, _))| v.0);
        for (_, (v, name)) in keys {
            let Some(g) = self.grad(*v) else { continue };
            match out.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => {
                    out.insert(name.clone(), g.to_vec());
                }
            }
        }
        out
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let x = self.value(a);
        Tensor::new(x.shape(), x.data().iter().map(|&p| f(p)).collect()).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::cast(scale), T::cast(shift));
        let v = self.map(x, |p| s * p + c);
        let rg = self.rg(x);
        self.push(Op::Affine { x, scale: s }, v, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |p| if p > T::zero() { p } else { T::zero() });
        let rg = self.rg(x);
        self.push(Op::Relu(x), v, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, |p| {
            if p >= T::zero() {
                T::one() / (T::one() + (-p).exp())
            } else {
                let e = p.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.rg(x);
        self.push(Op::Sigmoid(x), v, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, |p| p.tanh());
        let rg = self.rg(x);
        self.push(Op::Tanh(x), v, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), v, rg))
    }

    /// Concatenates `[B, Ci, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_channels of nothing".into()))?;
        let (b, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pb, pc, ph, pw) = self.value(p).dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::shape("concat_channels", self.shape(first), self.shape(p)));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total_c * plane);
        for bi in 0..b {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let v = Tensor::new(&[b, total_c, h, w], data)?;
        Ok(self.push(Op::ConcatChannels(parts.to_vec()), v, rg))
    }

    /// Bias-free 2-D convolution; `weight` is `[Cout, Cin, K, K]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (b, c_in, h, w) = self.value(input).dims4()?;
        let (c_out, wc, k, k2) = self.value(weight).dims4()?;
        if wc != c_in || k != k2 || stride == 0 || k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::shape("conv2d", self.shape(input), self.shape(weight)));
        }
        let geom = ConvGeom {
            batch: b,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
        };
        let (oh, ow) = geom.out_hw();
        let out = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(weight).data());
        let v = Tensor::new(&[b, c_out, oh, ow], out)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(Op::Conv2d { input, weight, geom }, v, rg))
    }

    /// Per-channel batch normalization of `[B, C, H, W]` followed by the
    /// affine `gamma·x̂ + beta`.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, stats: BnStats<'_, T>) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", self.shape(input), self.shape(gamma)));
        }
        let plane = h * w;
        let eps = T::cast(BN_EPSILON);
        let x = self.value(input).data();
        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        let (active_out, counted) = match stats {
            BnStats::Train {
                running_mean,
                running_var,
                active,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape("batch_norm", &[c], &[running_mean.len()]));
                }
                let mask: Vec<bool> = match active {
                    Some(a) if a.len() == b => a.to_vec(),
                    Some(a) => return Err(Error::shape("batch_norm", &[b], &[a.len()])),
                    None => vec![true; b],
                };
                let n_active = mask.iter().filter(|&&m| m).count();
                let n = n_active * plane;
                if n < 2 {
                    return Err(Error::DegenerateBatch { count: n });
                }
                let nt = T::cast(n as f64);
                let m = T::cast(BN_MOMENTUM);
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in (0..b).filter(|&bi| mask[bi]) {
                        let base = (bi * c + ch) * plane;
                        s += x[base..base + plane].iter().copied().sum::<T>();
                    }
                    let mu = s / nt;
                    let mut ss = T::zero();
                    for bi in (0..b).filter(|&bi| mask[bi]) {
                        let base = (bi * c + ch) * plane;
                        ss += x[base..base + plane].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                    let var = ss / nt;
                    mean[ch] = mu;
                    inv_std[ch] = T::one() / (var + eps).sqrt();
                    let unbiased = ss / T::cast((n - 1) as f64);
                    running_mean[ch] = (T::one() - m) * running_mean[ch] + m * mu;
                    running_var[ch] = (T::one() - m) * running_var[ch] + m * unbiased;
                }
                (Some(mask), n)
            }
            BnStats::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape("batch_norm", &[c], &[running_mean.len()]));
                }
                for ch in 0..c {
                    mean[ch] = running_mean[ch];
                    inv_std[ch] = T::one() / (running_var[ch] + eps).sqrt();
                }
                (None, 0)
            }
        };
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + be[ch];
                }
            }
        }
        let v = Tensor::new(&[b, c, h, w], out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                active: active_out,
                counted,
            },
            v,
            rg,
        ))
    }

    pub fn max_pool(&mut self, input: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if k > h + 2 * padding || k > w + 2 * padding || stride == 0 || padding >= k {
            return Err(Error::shape("max_pool", self.shape(input), &[k, k]));
        }
        let (out, argmax, oh, ow) =
            kernels::maxpool_forward(b * c, h, w, k, stride, padding, self.value(input).data());
        let v = Tensor::new(&[b, c, oh, ow], out)?;
        let rg = self.rg(input);
        Ok(self.push(Op::MaxPool { input, argmax }, v, rg))
    }

    /// 2×2 window, stride 2, odd extents floored.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        self.max_pool(input, 2, 2, 0)
    }

    /// `[B, C, H, W]` → `[B, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let plane = h * w;
        let inv = T::one() / T::cast(plane as f64);
        let x = self.value(input).data();
        let data = (0..b * c)
            .map(|i| x[i * plane..(i + 1) * plane].iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::new(&[b, c], data)?;
        let rg = self.rg(input);
        Ok(self.push(Op::GlobalAvgPool(input), v, rg))
    }

    /// `x[B, in] · weightᵀ + bias`, with `weight` stored `[out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(weight));
        let (&[b, fin], &[fout, win]) = (xs, ws) else {
            return Err(Error::shape("linear", xs, ws));
        };
        if fin != win {
            return Err(Error::shape("linear", xs, ws));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [fout] {
                return Err(Error::shape("linear", ws, self.shape(bv)));
            }
        }
        let mut out = vec![T::zero(); b * fout];
        kernels::gemm_nt(b, fin, fout, self.value(x).data(), self.value(weight).data(), &mut out);
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bd).for_each(|(o, &bb)| *o += bb);
            }
        }
        let v = Tensor::new(&[b, fout], out)?;
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|bv| self.rg(bv));
        Ok(self.push(Op::Linear { x, weight, bias }, v, rg))
    }

    /// Scales each sample of `x[B, ...]` by the matching entry of `w[B]`.
    pub fn scale_batch(&mut self, x: Var, w: Var) -> Result<Var> {
        let b = self.shape(x).first().copied().unwrap_or(0);
        if self.shape(w) != [b] {
            return Err(Error::shape("scale_batch", self.shape(x), self.shape(w)));
        }
        let xv = self.value(x);
        let inner = xv.numel() / b.max(1);
        let wd = self.value(w).data();
        let data = xv
            .data()
            .chunks(inner.max(1))
            .zip(wd)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        let v = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Op::ScaleBatch { x, w }, v, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::cast(t.numel().max(1) as f64);
        let rg = self.rg(x);
        self.push(Op::Mean(x), Tensor::scalar(s), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let &[b, k] = &shape[..] else {
            return Err(Error::Rank {
                op: "softmax_cross_entropy",
                expected: 2,
                got: shape,
            });
        };
        if labels.len() != b || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape("softmax_cross_entropy", &shape, &[labels.len()]));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for i in 0..b {
            let row = &z[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - mx).exp() / denom;
            }
            loss += denom.ln() + mx - row[labels[i]];
        }
        loss /= T::cast(b as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Fills gradients of every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                got: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let val = node.value.data();
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(cur) => cur.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect());
                acc(*b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect());
            }
            Op::Affine { x, scale } => acc(*x, g.iter().map(|&v| v * *scale).collect()),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val)
                    .map(|(&gi, &y)| if y > T::zero() { gi } else { T::zero() })
                    .collect(),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                g.iter().zip(val).map(|(&gi, &y)| gi * y * (T::one() - y)).collect(),
            ),
            Op::Tanh(x) => acc(
                *x,
                g.iter().zip(val).map(|(&gi, &y)| gi * (T::one() - y * y)).collect(),
            ),
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::ConcatChannels(parts) => {
                let (b, total_c, h, w) = node.value.dims4().expect("rank 4");
                let plane = h * w;
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    let mut d = Vec::with_capacity(b * c * plane);
                    for bi in 0..b {
                        let start = (bi * total_c + off) * plane;
                        d.extend_from_slice(&g[start..start + c * plane]);
                    }
                    acc(p, d);
                    off += c;
                }
            }
            Op::Conv2d { input, weight, geom } => {
                let (gi, gw) = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    self.rg(*input),
                    self.rg(*weight),
                );
                if let Some(gi) = gi {
                    acc(*input, gi);
                }
                if let Some(gw) = gw {
                    acc(*weight, gw);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                active,
                counted,
            } => {
                let (b, c, h, w) = node.value.dims4().expect("rank 4");
                let plane = h * w;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        for i in base..base + plane {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    match active {
                        None => {
                            for bi in 0..b {
                                for ch in 0..c {
                                    let base = (bi * c + ch) * plane;
                                    let s = gam[ch] * inv_std[ch];
                                    for i in base..base + plane {
                                        dx[i] = g[i] * s;
                                    }
                                }
                            }
                        }
                        Some(mask) => {
                            // Statistics depend on the active samples only,
                            // but every output was normalized with them.
                            let n = T::cast(*counted as f64);
                            for ch in 0..c {
                                let s = gam[ch] * inv_std[ch];
                                let mut sum_g = T::zero();
                                let mut sum_gx = T::zero();
                                for bi in 0..b {
                                    let base = (bi * c + ch) * plane;
                                    for i in base..base + plane {
                                        sum_g += g[i];
                                        sum_gx += g[i] * xhat[i];
                                    }
                                }
                                for bi in 0..b {
                                    let base = (bi * c + ch) * plane;
                                    for i in base..base + plane {
                                        dx[i] = if mask[bi] {
                                            s * (g[i] - sum_g / n - xhat[i] * sum_gx / n)
                                        } else {
                                            s * g[i]
                                        };
                                    }
                                }
                            }
                        }
                    }
                    acc(*input, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).numel()];
                for (&gi, &src) in g.iter().zip(argmax) {
                    d[src] += gi;
                }
                acc(*input, d);
            }
            Op::GlobalAvgPool(input) => {
                let (_, _, h, w) = self.value(*input).dims4().expect("rank 4");
                let plane = h * w;
                let inv = T::one() / T::cast(plane as f64);
                let d = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, plane)).collect();
                acc(*input, d);
            }
            Op::Linear { x, weight, bias } => {
                let (b, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*weight)[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); b * fin];
                    kernels::gemm(b, fout, fin, g, self.value(*weight).data(), &mut dx);
                    acc(*x, dx);
                }
                if self.rg(*weight) {
                    let mut dw = vec![T::zero(); fout * fin];
                    kernels::gemm_tn(fout, b, fin, g, self.value(*x).data(), &mut dw);
                    acc(*weight, dw);
                }
                if let Some(bv) = bias {
                    let mut db = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    acc(*bv, db);
                }
            }
            Op::ScaleBatch { x, w } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let b = wv.len();
                let inner = xv.len() / b.max(1);
                if self.rg(*x) {
                    acc(
                        *x,
                        g.chunks(inner)
                            .zip(wv)
                            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
                            .collect(),
                    );
                }
                let dw = g
                    .chunks(inner)
                    .zip(xv.chunks(inner))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(&p, &q)| p * q).sum())
                    .collect();
                acc(*w, dw);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / T::cast(n as f64); n]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / T::cast(b as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= scale;
                }
                acc(*logits, d);
            }
        }
    }
}
