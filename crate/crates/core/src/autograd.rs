//! A small define-by-run tape for the convolutional network.
//!
//! A [`Graph`] borrows a [`ParamStore`], records every op applied to it and
//! can then run reverse-mode differentiation from seed gradients on any set of
//! output nodes. Losses live outside the tape: they hand back their gradient
//! with respect to the head outputs, which become the seeds.

use serde::{Deserialize, Serialize};

use crate::tensor::{col2im, gemm, im2col, Element, Tensor, Window};

pub type ParamId = usize;
pub type BufferId = usize;

/// What a parameter is; weight decay only touches [`ParamKind::Weight`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            kinds: Vec::new(),
            values: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.kinds.push(kind);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        self.buffers.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id]
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.buffers
    }

    pub fn buffer_name(&self, id: BufferId) -> &str {
        &self.buffer_names[id]
    }

    /// Number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Same layout, every value converted to another element type.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            buffer_names: self.buffer_names.clone(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn apply(&mut self, update: &BatchStatUpdate<T>) {
        let mean = &mut self.buffers[update.mean_buffer];
        for (m, &b) in mean.data_mut().iter_mut().zip(&update.batch_mean) {
            *m = (T::one() - update.momentum) * *m + update.momentum * b;
        }
        let var = &mut self.buffers[update.var_buffer];
        for (v, &b) in var.data_mut().iter_mut().zip(&update.batch_var) {
            *v = (T::one() - update.momentum) * *v + update.momentum * b;
        }
    }
}

/// Running-statistic update produced by a batch-norm layer in training mode.
#[derive(Debug, Clone)]
pub struct BatchStatUpdate<T> {
    pub mean_buffer: BufferId,
    pub var_buffer: BufferId,
    pub batch_mean: Vec<T>,
    /// Unbiased variance.
    pub batch_var: Vec<T>,
    pub momentum: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
        groups: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Silu(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    Shuffle {
        x: Var,
        groups: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
}

/// Public tag of a recorded operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Param,
    Conv,
    ConvTranspose,
    BatchNorm,
    Silu,
    Add,
    Concat,
    Shuffle,
    MaxPool,
    UpsampleNearest,
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<'p, T>>,
    training: bool,
    stat_updates: Vec<BatchStatUpdate<T>>,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id].as_ref()
    }

    /// Parameter gradients with missing entries filled by zeros.
    pub fn into_param_grads(self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        self.params
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(store.get(i).shape())))
            .collect()
    }
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>, training: bool) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            training,
            stat_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    /// Operation kinds recorded so far, in order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.nodes
            .iter()
            .map(|n| match n.op {
                Op::Leaf => OpKind::Leaf,
                Op::Param(_) => OpKind::Param,
                Op::Conv { .. } => OpKind::Conv,
                Op::ConvTranspose { .. } => OpKind::ConvTranspose,
                Op::BatchNorm { .. } => OpKind::BatchNorm,
                Op::Silu(_) => OpKind::Silu,
                Op::Add(..) => OpKind::Add,
                Op::Concat(_) => OpKind::Concat,
                Op::Shuffle { .. } => OpKind::Shuffle,
                Op::MaxPool { .. } => OpKind::MaxPool,
                Op::Upsample { .. } => OpKind::UpsampleNearest,
            })
            .collect()
    }

    pub fn into_stat_updates(self) -> Vec<BatchStatUpdate<T>> {
        self.stat_updates
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// An input that is not differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient [`Graph::backward`] will report.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(self.store.get(id)),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, win: Window, groups: usize) -> Var {
        let out = conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), win, groups);
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv { x, w, b, win, groups }, rg)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, win: Window) -> Var {
        let out = conv_transpose_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), win);
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::ConvTranspose { x, w, b, win }, rg)
    }

    /// Batch norm over (n, h, w). Training mode normalizes with batch
    /// statistics and queues a running-stat update; eval mode uses the
    /// stored running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean_buffer: BufferId,
        var_buffer: BufferId,
        momentum: f64,
        eps: f64,
    ) -> Var {
        let eps = T::from_f64_lossy(eps);
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4();
        let plane = h * w;
        let count = n * plane;
        let mut pending = None;
        let (mean, inv_std) = if self.training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut s = 0.0f64;
                for img in 0..n {
                    let off = (img * c + ci) * plane;
                    s += xt.data()[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0f64;
                for img in 0..n {
                    let off = (img * c + ci) * plane;
                    ss += xt.data()[off..off + plane]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - m;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ci] = T::from_f64_lossy(m);
                var[ci] = T::from_f64_lossy(ss / count as f64);
            }
            let unbiased = if count > 1 {
                let f = T::from_f64_lossy(count as f64 / (count - 1) as f64);
                var.iter().map(|&v| v * f).collect()
            } else {
                var.clone()
            };
            pending = Some(BatchStatUpdate {
                mean_buffer,
                var_buffer,
                batch_mean: mean.clone(),
                batch_var: unbiased,
                momentum: T::from_f64_lossy(momentum),
            });
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv_std)
        } else {
            let mean = self.store.buffer(mean_buffer).data().to_vec();
            let inv_std = self
                .store
                .buffer(var_buffer)
                .data()
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect();
            (mean, inv_std)
        };
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let mut out = Tensor::zeros(xt.shape());
        for img in 0..n {
            for ci in 0..c {
                let off = (img * c + ci) * plane;
                let scale = g[ci] * inv_std[ci];
                let shift = bta[ci] - mean[ci] * scale;
                for (o, &v) in out.data_mut()[off..off + plane]
                    .iter_mut()
                    .zip(&xt.data()[off..off + plane])
                {
                    *o = v * scale + shift;
                }
            }
        }
        self.stat_updates.extend(pending);
        let batch_stats = self.training;
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            true,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let rg = self.needs(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Concatenate along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let plane = h * w;
        let total: usize = parts.iter().map(|&p| self.value(p).dims4().1).sum();
        let mut out = Tensor::zeros(&[n, total, h, w]);
        for img in 0..n {
            let mut c0 = 0;
            for &p in parts {
                let t = self.value(p);
                let (pn, pc, ph, pw) = t.dims4();
                assert!(pn == n && ph == h && pw == w, "concat of mismatched maps");
                let src = &t.data()[img * pc * plane..(img + 1) * pc * plane];
                out.data_mut()[(img * total + c0) * plane..][..pc * plane].copy_from_slice(src);
                c0 += pc;
            }
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    /// Channel shuffle: `groups × m` channels are re-ordered as `m × groups`.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Var {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4();
        let m = c / groups;
        let plane = h * w;
        let mut out = Tensor::zeros(xt.shape());
        for img in 0..n {
            for gi in 0..groups {
                for k in 0..m {
                    let src = (img * c + gi * m + k) * plane;
                    let dst = (img * c + k * groups + gi) * plane;
                    out.data_mut()[dst..dst + plane].copy_from_slice(&xt.data()[src..src + plane]);
                }
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::Shuffle { x, groups }, rg)
    }

    /// Stride-1 max pooling with `kernel/2` padding (spatial size preserved).
    pub fn max_pool_same(&mut self, x: Var, kernel: usize) -> Var {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4();
        let r = (kernel / 2) as isize;
        let mut out = Tensor::zeros(xt.shape());
        let mut argmax = vec![0u32; xt.numel()];
        let plane = h * w;
        for nc in 0..n * c {
            let src = &xt.data()[nc * plane..(nc + 1) * plane];
            for y in 0..h as isize {
                for x0 in 0..w as isize {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for yy in (y - r).max(0)..(y + r + 1).min(h as isize) {
                        for xx in (x0 - r).max(0)..(x0 + r + 1).min(w as isize) {
                            let i = yy as usize * w + xx as usize;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = nc * plane + y as usize * w + x0 as usize;
                    out.data_mut()[o] = best;
                    argmax[o] = best_i as u32;
                }
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::MaxPool { x, argmax }, rg)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for nc in 0..n * c {
            let src = &xt.data()[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out.data_mut()[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
                for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                    *d = row[ox / factor];
                }
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::Upsample { x, factor }, rg)
    }

    /// Reverse-mode sweep from `seeds` (output node, d loss / d output).
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Tensor<T>>> = (0..self.store.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads[v.0], g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let dy = match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[idx].take() {
                        accumulate(&mut params[*id], g);
                    }
                    continue;
                }
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::Conv { x, w, b, win, groups } => {
                    let (dx, dw, db) = conv_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        *win,
                        *groups,
                        self.needs(*x),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                    accumulate(&mut grads[w.0], dw);
                    if let Some(b) = b {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::ConvTranspose { x, w, b, win } => {
                    let (dx, dw, db) =
                        conv_transpose_backward(self.value(*x), self.value(*w), &dy, *win);
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], dx);
                    }
                    accumulate(&mut grads[w.0], dw);
                    if let Some(b) = b {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let (dx, dg, dbeta) = batch_norm_backward(
                        self.value(*x),
                        self.value(*gamma),
                        mean,
                        inv_std,
                        *batch_stats,
                        &dy,
                    );
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], dx);
                    }
                    accumulate(&mut grads[gamma.0], dg);
                    accumulate(&mut grads[beta.0], dbeta);
                }
                Op::Silu(x) => {
                    let xt = self.value(*x);
                    let mut dx = dy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xt.data()) {
                        let s = T::one() / (T::one() + (-v).exp());
                        *d *= s * (T::one() + v * (T::one() - s));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], dy.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], dy);
                    }
                }
                Op::Concat(parts) => {
                    let (n, total, h, w) = dy.dims4();
                    let plane = h * w;
                    let mut c0 = 0;
                    for &p in parts {
                        let pc = self.value(p).dims4().1;
                        if self.needs(p) {
                            let mut g = Tensor::zeros(&[n, pc, h, w]);
                            for img in 0..n {
                                g.data_mut()[img * pc * plane..(img + 1) * pc * plane]
                                    .copy_from_slice(&dy.data()[(img * total + c0) * plane..][..pc * plane]);
                            }
                            accumulate(&mut grads[p.0], g);
                        }
                        c0 += pc;
                    }
                }
                Op::Shuffle { x, groups } => {
                    let (n, c, h, w) = dy.dims4();
                    let m = c / groups;
                    let plane = h * w;
                    let mut dx = Tensor::zeros(dy.shape());
                    for img in 0..n {
                        for gi in 0..*groups {
                            for k in 0..m {
                                let src = (img * c + gi * m + k) * plane;
                                let dst = (img * c + k * groups + gi) * plane;
                                dx.data_mut()[src..src + plane]
                                    .copy_from_slice(&dy.data()[dst..dst + plane]);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::MaxPool { x, argmax } => {
                    let (_, _, h, w) = dy.dims4();
                    let plane = h * w;
                    let mut dx = Tensor::zeros(dy.shape());
                    for (o, (&g, &a)) in dy.data().iter().zip(argmax).enumerate() {
                        let base = (o / plane) * plane;
                        dx.data_mut()[base + a as usize] += g;
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Upsample { x, factor } => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let (oh, ow) = (h * factor, w * factor);
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    for nc in 0..n * c {
                        let src = &dy.data()[nc * oh * ow..(nc + 1) * oh * ow];
                        let dst = &mut dx.data_mut()[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            let row = &mut dst[(oy / factor) * w..(oy / factor + 1) * w];
                            for (ox, &g) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                                row[ox / factor] += g;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn conv_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    win: Window,
    groups: usize,
) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (co, cig, k, _) = w.dims4();
    assert_eq!(cig * groups, c, "conv: {c} input channels vs weight {:?} with {groups} groups", w.shape());
    assert_eq!(k, win.kernel);
    let (oh, ow) = (win.out_len(h), win.out_len(wd));
    let p = oh * ow;
    let kk = cig * k * k;
    let cog = co / groups;
    let direct = k == 1 && win.stride == 1 && win.pad == 0;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * p] };
    for img in 0..n {
        for g in 0..groups {
            let xg = &x.data()[(img * c + g * cig) * h * wd..][..cig * h * wd];
            if !direct {
                im2col(xg, cig, h, wd, win, oh, ow, &mut cols);
            }
            let src: &[T] = if direct { xg } else { &cols };
            let wg = &w.data()[g * cog * kk..][..cog * kk];
            let og = &mut out.data_mut()[(img * co + g * cog) * p..][..cog * p];
            gemm(cog, kk, p, wg, false, src, false, og, false);
        }
    }
    if let Some(b) = b {
        add_channel_bias(&mut out, b);
    }
    out
}

fn add_channel_bias<T: Element>(out: &mut Tensor<T>, b: &Tensor<T>) {
    let (n, co, oh, ow) = out.dims4();
    let p = oh * ow;
    for img in 0..n {
        for (ci, &bv) in b.data().iter().enumerate().take(co) {
            for v in &mut out.data_mut()[(img * co + ci) * p..][..p] {
                *v += bv;
            }
        }
    }
}

fn channel_sums<T: Element>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dy.dims4();
    let p = h * w;
    let mut db = Tensor::zeros(&[c]);
    for img in 0..n {
        for ci in 0..c {
            let s: T = dy.data()[(img * c + ci) * p..][..p].iter().copied().sum();
            db.data_mut()[ci] += s;
        }
    }
    db
}

type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

fn conv_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    win: Window,
    groups: usize,
    need_dx: bool,
) -> ConvGrads<T> {
    let (n, c, h, wd) = x.dims4();
    let (co, cig, k, _) = w.dims4();
    let (_, _, oh, ow) = dy.dims4();
    let p = oh * ow;
    let kk = cig * k * k;
    let cog = co / groups;
    let direct = k == 1 && win.stride == 1 && win.pad == 0;
    let mut dx = if need_dx { Some(Tensor::zeros(x.shape())) } else { None };
    let mut dw = Tensor::zeros(w.shape());
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * p] };
    let mut dcols = if need_dx { vec![T::zero(); kk * p] } else { Vec::new() };
    for img in 0..n {
        for g in 0..groups {
            let xoff = (img * c + g * cig) * h * wd;
            let xg = &x.data()[xoff..][..cig * h * wd];
            if !direct {
                im2col(xg, cig, h, wd, win, oh, ow, &mut cols);
            }
            let src: &[T] = if direct { xg } else { &cols };
            let dyg = &dy.data()[(img * co + g * cog) * p..][..cog * p];
            let dwg = &mut dw.data_mut()[g * cog * kk..][..cog * kk];
            gemm(cog, p, kk, dyg, false, src, true, dwg, true);
            if let Some(dx) = dx.as_mut() {
                let wg = &w.data()[g * cog * kk..][..cog * kk];
                let dxg = &mut dx.data_mut()[xoff..][..cig * h * wd];
                if direct {
                    gemm(kk, cog, p, wg, true, dyg, false, dxg, true);
                } else {
                    gemm(kk, cog, p, wg, true, dyg, false, &mut dcols, false);
                    col2im(&dcols, cig, h, wd, win, oh, ow, dxg);
                }
            }
        }
    }
    (dx, dw, channel_sums(dy))
}

fn conv_transpose_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    win: Window,
) -> Tensor<T> {
    let (n, ci, h, wd) = x.dims4();
    let (wci, co, k, _) = w.dims4();
    assert_eq!(wci, ci, "transposed conv channel mismatch");
    let oh = (h - 1) * win.stride + k - 2 * win.pad;
    let ow = (wd - 1) * win.stride + k - 2 * win.pad;
    let kk = co * k * k;
    let p = h * wd;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    let mut cols = vec![T::zero(); kk * p];
    for img in 0..n {
        let xi = &x.data()[img * ci * p..][..ci * p];
        gemm(kk, ci, p, w.data(), true, xi, false, &mut cols, false);
        let oi = &mut out.data_mut()[img * co * oh * ow..][..co * oh * ow];
        col2im(&cols, co, oh, ow, win, h, wd, oi);
    }
    if let Some(b) = b {
        add_channel_bias(&mut out, b);
    }
    out
}

fn conv_transpose_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    win: Window,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, ci, h, wd) = x.dims4();
    let (_, co, k, _) = w.dims4();
    let (_, _, oh, ow) = dy.dims4();
    let kk = co * k * k;
    let p = h * wd;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut dcols = vec![T::zero(); kk * p];
    for img in 0..n {
        let dyi = &dy.data()[img * co * oh * ow..][..co * oh * ow];
        im2col(dyi, co, oh, ow, win, h, wd, &mut dcols);
        let xi = &x.data()[img * ci * p..][..ci * p];
        gemm(ci, p, kk, xi, false, &dcols, true, dw.data_mut(), true);
        let dxi = &mut dx.data_mut()[img * ci * p..][..ci * p];
        gemm(ci, kk, p, w.data(), false, &dcols, false, dxi, false);
    }
    (dx, dw, channel_sums(dy))
}

fn batch_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    batch_stats: bool,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let m = T::from_f64_lossy((n * plane) as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ci in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for img in 0..n {
            let off = (img * c + ci) * plane;
            for (&g, &v) in dy.data()[off..off + plane].iter().zip(&x.data()[off..off + plane]) {
                let xhat = (v - mean[ci]) * inv_std[ci];
                sum_dy += g;
                sum_dy_xhat += g * xhat;
            }
        }
        dgamma.data_mut()[ci] = sum_dy_xhat;
        dbeta.data_mut()[ci] = sum_dy;
        let scale = gamma.data()[ci] * inv_std[ci];
        for img in 0..n {
            let off = (img * c + ci) * plane;
            for i in off..off + plane {
                let g = dy.data()[i];
                dx.data_mut()[i] = if batch_stats {
                    let xhat = (x.data()[i] - mean[ci]) * inv_std[ci];
                    scale * (g - sum_dy / m - xhat * sum_dy_xhat / m)
                } else {
                    scale * g
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
