//! Parameterised building blocks: convolutions, group normalisation,
//! residual blocks and the boundary-stream attention gate.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Result};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors. Each tensor is registered exactly once.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Record every parameter as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Record every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }
}

/// Tape handles of a [`ParamStore`], indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wrap handles supplied in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Group count used for `channels`: the largest divisor not exceeding 8.
pub fn norm_groups(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3d {
    /// Fan-in scaled normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = in_channels * kernel.pow(3);
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let shape = [out_channels, in_channels, kernel, kernel, kernel];
        let weight = Tensor::from_fn(&shape, |_| T::of(normal.sample(rng)));
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        out_channels * in_channels * kernel.pow(3) + out_channels
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv3d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[channels])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            channels,
            groups: norm_groups(channels),
        }
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        group_norm_forward(tape, x, self.groups, p.var(self.gain), p.var(self.bias), NORM_EPS)
    }
}

/// Group normalisation: per (sample, group) zero mean and unit variance, then a per-channel affine.
pub fn group_norm_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    groups: usize,
    gain: Var,
    bias: Var,
    eps: f64,
) -> Result<Var> {
    tape.group_norm(x, groups, gain, bias, eps)
}

/// `x + conv(relu(norm(conv(relu(norm(x))))))` with 3³ same-padding convolutions.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv3d,
    pub norm2: GroupNorm,
    pub conv2: Conv3d,
    pub channels: usize,
}

impl ResidualBlock {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, channels: usize) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), channels),
            conv1: Conv3d::new(store, rng, &format!("{name}.conv1"), channels, channels, 3, 1),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), channels),
            conv2: Conv3d::new(store, rng, &format!("{name}.conv2"), channels, channels, 3, 1),
            channels,
        }
    }

    pub fn param_count(channels: usize) -> usize {
        2 * Conv3d::param_count(channels, channels, 3) + 2 * GroupNorm::param_count(channels)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(contract(
                "residual_block_forward",
                format!("input has {c} channels, block expects {}", self.channels),
            ));
        }
        let h = self.norm1.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.conv1.forward(tape, p, h)?;
        let h = self.norm2.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Gates the boundary stream with a single-channel map computed from both inputs.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub proj_encoder: Conv3d,
    pub proj_stream: Conv3d,
    pub score: Conv3d,
}

impl AttentionGate {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        encoder_channels: usize,
        stream_channels: usize,
        inner_channels: usize,
    ) -> Self {
        Self {
            proj_encoder: Conv3d::new(
                store,
                rng,
                &format!("{name}.proj_encoder"),
                encoder_channels,
                inner_channels,
                3,
                1,
            ),
            proj_stream: Conv3d::new(
                store,
                rng,
                &format!("{name}.proj_stream"),
                stream_channels,
                inner_channels,
                3,
                1,
            ),
            score: Conv3d::new(store, rng, &format!("{name}.score"), inner_channels, 1, 1, 1),
        }
    }

    pub fn param_count(encoder_channels: usize, stream_channels: usize, inner_channels: usize) -> usize {
        Conv3d::param_count(encoder_channels, inner_channels, 3)
            + Conv3d::param_count(stream_channels, inner_channels, 3)
            + Conv3d::param_count(inner_channels, 1, 1)
    }

    /// Returns `(gated stream features, attention map)`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        encoder_feat: Var,
        stream_feat: Var,
    ) -> Result<(Var, Var)> {
        let (se, ss) = (tape.shape(encoder_feat), tape.shape(stream_feat));
        if se.len() != 5 || ss.len() != 5 || se[0] != ss[0] || se[2..] != ss[2..] {
            return Err(contract(
                "attention_gate_forward",
                format!("encoder features {se:?} and stream features {ss:?} differ in batch or spatial extents"),
            ));
        }
        let e = self.proj_encoder.forward(tape, p, encoder_feat)?;
        let s = self.proj_stream.forward(tape, p, stream_feat)?;
        let fused = tape.add(e, s)?;
        let fused = tape.relu(fused);
        let logits = self.score.forward(tape, p, fused)?;
        let map = tape.sigmoid(logits);
        let gated = tape.mul_channel_map(stream_feat, map)?;
        Ok((gated, map))
    }
}
