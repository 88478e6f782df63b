//! Reverse-mode differentiation tape.
//!
//! Every op appends one node holding its output value. Nodes are created in
//! topological order, so the backward pass is a single reverse sweep.

use crate::error::{contract, Error, Result};
use crate::kernels::{self, ConvGeom, GroupStats};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary {
        kind: Elementwise,
        a: Var,
        b: Var,
    },
    Affine {
        input: Var,
        scale: T,
    },
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    Sum(Var),
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2 {
        input: Var,
        planes: usize,
        dims: [usize; 3],
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    MulChannelMap {
        input: Var,
        map: Var,
    },
    GroupNorm {
        input: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        stats: GroupStats<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node, saved intermediate and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut value = value;
        value.requires_grad = needs_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Side of the kink taken by every ReLU and clamp element on the tape, in
    /// recording order. Two evaluations with equal patterns lie on the same
    /// smooth piece of the graph.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(input) => bits.extend(self.value(*input).data().iter().map(|&v| v > T::ZERO)),
                Op::Clamp { input, lo, hi } => {
                    for &v in self.value(*input).data() {
                        bits.push(v >= *lo);
                        bits.push(v <= *hi);
                    }
                }
                _ => {}
            }
        }
        bits
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }

    /// A copy of the leaf's value with `grad` filled in from the last backward pass.
    pub fn leaf_with_grad(&self, v: Var) -> Tensor<T> {
        let mut t = self.nodes[v.0].value.clone();
        t.grad = self.grads[v.0].clone();
        t
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- elementwise ------------------------------------------------------

    /// Elementwise binary op on equal shapes; a one-element operand broadcasts as a scalar.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if sa != sb && na != 1 && nb != 1 {
            let dim = sa
                .iter()
                .zip(sb)
                .position(|(x, y)| x != y)
                .unwrap_or(sa.len().min(sb.len()));
            return Err(contract(
                "elementwise",
                format!("shapes {sa:?} and {sb:?} differ at dim {dim}"),
            ));
        }
        let shape = if na >= nb { sa.to_vec() } else { sb.to_vec() };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let f = |x: T, y: T| match kind {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            Elementwise::Mul => x * y,
            Elementwise::Div => x / y,
        };
        let data: Vec<T> = if na == nb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else if nb == 1 {
            va.iter().map(|&x| f(x, vb[0])).collect()
        } else {
            vb.iter().map(|&y| f(va[0], y)).collect()
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Binary { kind, a, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Div, a, b)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::of(scale), T::of(shift));
        let t = self.value(input);
        let data = t.data().iter().map(|&x| s * x + c).collect();
        let out = Tensor::new(t.shape(), data).expect("affine preserves shape");
        let needs = self.needs(input);
        self.push(out, Op::Affine { input, scale: s }, needs)
    }

    pub fn activation(&mut self, kind: Activation, input: Var) -> Var {
        match kind {
            Activation::Relu => self.relu(input),
            Activation::Sigmoid => self.sigmoid(input),
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let data = t.data().iter().map(|&x| if x > T::ZERO { x } else { T::ZERO }).collect();
        let out = Tensor::new(t.shape(), data).expect("relu preserves shape");
        let needs = self.needs(input);
        self.push(out, Op::Relu(input), needs)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let data = t.data().iter().map(|&x| sigmoid(x)).collect();
        let out = Tensor::new(t.shape(), data).expect("sigmoid preserves shape");
        let needs = self.needs(input);
        self.push(out, Op::Sigmoid(input), needs)
    }

    pub fn ln(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let data = t.data().iter().map(|&x| x.ln()).collect();
        let out = Tensor::new(t.shape(), data).expect("ln preserves shape");
        let needs = self.needs(input);
        self.push(out, Op::Ln(input), needs)
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let t = self.value(input);
        let data = t.data().iter().map(|&x| x.max(lo).min(hi)).collect();
        let out = Tensor::new(t.shape(), data).expect("clamp preserves shape");
        let needs = self.needs(input);
        self.push(out, Op::Clamp { input, lo, hi }, needs)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        let needs = self.needs(input);
        self.push(Tensor::scalar(s), Op::Sum(input), needs)
    }

    // ---- volumetric ops ---------------------------------------------------

    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv3d";
        let [n, c, d, h, w] = self.value(input).dims5(OP)?;
        let [k, wc, kd, kh, kw] = self.value(weight).dims5(OP)?;
        if wc != c {
            return Err(contract(
                OP,
                format!("input channels (dim 1) = {c} but weight expects {wc}"),
            ));
        }
        if stride == 0 {
            return Err(contract(OP, "stride must be positive"));
        }
        for (axis, ext) in [kd, kh, kw].into_iter().enumerate() {
            if ext % 2 == 0 {
                return Err(contract(
                    OP,
                    format!("kernel extent {ext} on dim {} is even", axis + 2),
                ));
            }
        }
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(contract(
                    OP,
                    format!("bias shape {:?} does not match {k} output channels", self.shape(b)),
                ));
            }
        }
        let mut output = [0usize; 3];
        for (axis, (i, kk)) in [d, h, w].into_iter().zip([kd, kh, kw]).enumerate() {
            output[axis] = kernels::conv_out_extent(i, kk, stride, padding).ok_or_else(|| {
                contract(
                    OP,
                    format!("spatial dim {} extent {i} + 2*{padding} is smaller than kernel {kk}", axis + 2),
                )
            })?;
        }
        let geom = ConvGeom {
            n,
            c,
            k,
            input: [d, h, w],
            kernel: [kd, kh, kw],
            output,
            stride,
            pad: padding,
        };
        let data = kernels::conv3d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(&[n, k, output[0], output[1], output[2]], data)?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
            needs,
        ))
    }

    /// Trilinear upsampling of every spatial axis by `factor` (only 2 is supported).
    pub fn trilinear_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor != 2 {
            return Err(Error::Unsupported(format!(
                "trilinear upsampling by {factor}; only 2 is implemented"
            )));
        }
        let [n, c, d, h, w] = self.value(input).dims5("trilinear_upsample")?;
        let data = kernels::upsample2_forward(self.value(input).data(), n * c, [d, h, w]);
        let out = Tensor::new(&[n, c, 2 * d, 2 * h, 2 * w], data)?;
        let needs = self.needs(input);
        Ok(self.push(
            out,
            Op::Upsample2 {
                input,
                planes: n * c,
                dims: [d, h, w],
            },
            needs,
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let [n, ca, d, h, w] = self.value(a).dims5(OP)?;
        let sb = self.value(b).dims5(OP)?;
        for (dim, (x, y)) in [n, d, h, w].into_iter().zip([sb[0], sb[2], sb[3], sb[4]]).enumerate() {
            if x != y {
                let dim = if dim == 0 { 0 } else { dim + 1 };
                return Err(contract(OP, format!("extent mismatch at dim {dim}: {x} vs {y}")));
            }
        }
        let cb = sb[1];
        let vol = d * h * w;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * vol);
        for s in 0..n {
            data.extend_from_slice(&va[s * ca * vol..(s + 1) * ca * vol]);
            data.extend_from_slice(&vb[s * cb * vol..(s + 1) * cb * vol]);
        }
        let out = Tensor::new(&[n, ca + cb, d, h, w], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, needs))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(input).slice_channels(start, len)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::SliceChannels { input, start }, needs))
    }

    /// Multiply every channel of `input` by a single-channel `map` of matching extents.
    pub fn mul_channel_map(&mut self, input: Var, map: Var) -> Result<Var> {
        const OP: &str = "mul_channel_map";
        let [n, c, d, h, w] = self.value(input).dims5(OP)?;
        let sm = self.value(map).dims5(OP)?;
        if sm != [n, 1, d, h, w] {
            return Err(contract(
                OP,
                format!("map shape {sm:?} must be [{n}, 1, {d}, {h}, {w}]"),
            ));
        }
        let vol = d * h * w;
        let (vi, vm) = (self.value(input).data(), self.value(map).data());
        let mut data = Vec::with_capacity(vi.len());
        for s in 0..n {
            let m = &vm[s * vol..(s + 1) * vol];
            for ch in 0..c {
                let base = (s * c + ch) * vol;
                data.extend(vi[base..base + vol].iter().zip(m).map(|(&x, &a)| x * a));
            }
        }
        let out = Tensor::new(&[n, c, d, h, w], data)?;
        let needs = self.needs(input) || self.needs(map);
        Ok(self.push(out, Op::MulChannelMap { input, map }, needs))
    }

    pub fn group_norm(&mut self, input: Var, groups: usize, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        const OP: &str = "group_norm";
        let [n, c, d, h, w] = self.value(input).dims5(OP)?;
        if groups == 0 || c % groups != 0 {
            return Err(contract(OP, format!("{c} channels not divisible into {groups} groups")));
        }
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(contract(
                OP,
                format!(
                    "affine shapes {:?}/{:?} must be [{c}]",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let (data, stats) = kernels::group_norm_forward(
            self.value(input).data(),
            n,
            c,
            d * h * w,
            groups,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let out = Tensor::new(&[n, c, d, h, w], data)?;
        let needs = self.needs(input) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::GroupNorm {
                input,
                gain,
                bias,
                groups,
                stats,
            },
            needs,
        ))
    }

    // ---- backward ---------------------------------------------------------

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, x)| *a += x),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduce a broadcast gradient back onto a one-element operand.
    fn reduce_to(&self, v: Var, g: Vec<T>) -> Vec<T> {
        if self.value(v).numel() == 1 && g.len() != 1 {
            vec![g.into_iter().sum()]
        } else {
            g
        }
    }

    /// Populate gradients of the scalar `loss` with respect to every leaf that requires one.
    ///
    /// A second call without [`Tape::clear`] is rejected instead of accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_done = true;
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: Vec<T>) {
        // Input grads are computed against immutable borrows first, then accumulated.
        let updates: Vec<(Var, Vec<T>)> = {
            let node = &self.nodes[i];
            let out = node.value.data();
            match &node.op {
                Op::Leaf => Vec::new(),
                Op::Binary { kind, a, b } => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let n = g.len();
                    let ai = |j: usize| va[if va.len() == 1 { 0 } else { j }];
                    let bi = |j: usize| vb[if vb.len() == 1 { 0 } else { j }];
                    let (ga, gb): (Vec<T>, Vec<T>) = match kind {
                        Elementwise::Add => (g.clone(), g),
                        Elementwise::Sub => (g.clone(), g.iter().map(|&x| -x).collect()),
                        Elementwise::Mul => (
                            (0..n).map(|j| g[j] * bi(j)).collect(),
                            (0..n).map(|j| g[j] * ai(j)).collect(),
                        ),
                        Elementwise::Div => (
                            (0..n).map(|j| g[j] / bi(j)).collect(),
                            (0..n).map(|j| -g[j] * ai(j) / (bi(j) * bi(j))).collect(),
                        ),
                    };
                    vec![(*a, self.reduce_to(*a, ga)), (*b, self.reduce_to(*b, gb))]
                }
                Op::Affine { input, scale } => {
                    vec![(*input, g.iter().map(|&x| x * *scale).collect())]
                }
                Op::Relu(input) => {
                    let vi = self.value(*input).data();
                    vec![(
                        *input,
                        g.iter()
                            .zip(vi)
                            .map(|(&x, &v)| if v > T::ZERO { x } else { T::ZERO })
                            .collect(),
                    )]
                }
                Op::Sigmoid(input) => vec![(
                    *input,
                    g.iter().zip(out).map(|(&x, &s)| x * s * (T::ONE - s)).collect(),
                )],
                Op::Ln(input) => {
                    let vi = self.value(*input).data();
                    vec![(*input, g.iter().zip(vi).map(|(&x, &v)| x / v).collect())]
                }
                Op::Clamp { input, lo, hi } => {
                    let vi = self.value(*input).data();
                    vec![(
                        *input,
                        g.iter()
                            .zip(vi)
                            .map(|(&x, &v)| if v >= *lo && v <= *hi { x } else { T::ZERO })
                            .collect(),
                    )]
                }
                Op::Sum(input) => vec![(*input, vec![g[0]; self.value(*input).numel()])],
                Op::Conv3d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let mut ups = Vec::with_capacity(3);
                    if self.needs(*input) {
                        ups.push((
                            *input,
                            kernels::conv3d_backward_input(geom, &g, self.value(*weight).data()),
                        ));
                    }
                    if self.needs(*weight) {
                        ups.push((
                            *weight,
                            kernels::conv3d_backward_weight(geom, &g, self.value(*input).data()),
                        ));
                    }
                    if let Some(b) = bias {
                        if self.needs(*b) {
                            ups.push((*b, kernels::conv3d_backward_bias(geom, &g)));
                        }
                    }
                    ups
                }
                Op::Upsample2 {
                    input,
                    planes,
                    dims,
                } => vec![(*input, kernels::upsample2_backward(&g, *planes, *dims))],
                Op::Concat { a, b } => {
                    let [n, ca, d, h, w] = self.value(*a).dims5("concat").expect("5-D");
                    let cb = self.value(*b).shape()[1];
                    let vol = d * h * w;
                    let (mut ga, mut gb) = (Vec::new(), Vec::new());
                    for s in 0..n {
                        let base = s * (ca + cb) * vol;
                        ga.extend_from_slice(&g[base..base + ca * vol]);
                        gb.extend_from_slice(&g[base + ca * vol..base + (ca + cb) * vol]);
                    }
                    vec![(*a, ga), (*b, gb)]
                }
                Op::SliceChannels { input, start } => {
                    let [n, c, d, h, w] = self.value(*input).dims5("slice").expect("5-D");
                    let len = node.value.shape()[1];
                    let vol = d * h * w;
                    let mut gi = vec![T::ZERO; n * c * vol];
                    for s in 0..n {
                        let dst = (s * c + start) * vol;
                        gi[dst..dst + len * vol].copy_from_slice(&g[s * len * vol..(s + 1) * len * vol]);
                    }
                    vec![(*input, gi)]
                }
                Op::MulChannelMap { input, map } => {
                    let [n, c, d, h, w] = self.value(*input).dims5("mul_channel_map").expect("5-D");
                    let vol = d * h * w;
                    let (vi, vm) = (self.value(*input).data(), self.value(*map).data());
                    let mut gi = vec![T::ZERO; vi.len()];
                    let mut gm = vec![T::ZERO; vm.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * vol;
                            for j in 0..vol {
                                gi[base + j] = g[base + j] * vm[s * vol + j];
                                gm[s * vol + j] += g[base + j] * vi[base + j];
                            }
                        }
                    }
                    vec![(*input, gi), (*map, gm)]
                }
                Op::GroupNorm {
                    input,
                    gain,
                    bias,
                    groups,
                    stats,
                } => {
                    let [n, c, d, h, w] = self.value(*input).dims5("group_norm").expect("5-D");
                    let (gi, ggain, gbias) = kernels::group_norm_backward(
                        &g,
                        self.value(*input).data(),
                        n,
                        c,
                        d * h * w,
                        *groups,
                        self.value(*gain).data(),
                        stats,
                    );
                    vec![(*input, gi), (*gain, ggain), (*bias, gbias)]
                }
            }
        };
        for (v, gv) in updates {
            self.accumulate(v, gv);
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}
