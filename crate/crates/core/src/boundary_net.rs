//! Asymmetric encoder-decoder with an attention-gated boundary stream.
//!
//! Encoder: stem conv, then per level a residual block followed by a strided
//! conv that halves the extent and doubles the width; a stack of bottleneck
//! residual blocks sits at the coarsest level. Decoder: per level a 1×1×1 conv
//! halves the width, trilinear upsampling doubles the extent, the encoder
//! features of that level are added and a residual block follows.
//!
//! Boundary stream: the bottleneck output is upsampled, concatenated with the
//! encoder features one level up, reduced by a 1×1×1 conv and passed through a
//! residual block. Attention gates then run coarsest to finest, each gating the
//! stream with that level's encoder features. Both heads are 1×1×1 convs to two
//! sigmoid channels: channel 0 is foreground (kidney or tumor), channel 1 tumor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::layers::{AttentionGate, Bound, Conv3d, ParamStore, ResidualBlock};
use crate::tensor::{Real, Tensor};

pub const OUTPUT_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Edge of the cubic input crop.
    pub input_size: usize,
    pub base_filters: usize,
    /// Number of downsampling stages.
    pub levels: usize,
    pub bottleneck_blocks: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkConfig {
    pub fn desk() -> Self {
        Self {
            input_size: 32,
            base_filters: 4,
            levels: 2,
            bottleneck_blocks: 2,
        }
    }

    /// Full-size preset: 176³ crops, 16 base filters, four bottleneck blocks.
    pub fn full_scale() -> Self {
        Self {
            input_size: 176,
            base_filters: 16,
            levels: 4,
            bottleneck_blocks: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if self.base_filters == 0 {
            return Err(Error::Config("base_filters must be at least 1".into()));
        }
        let step = 1usize << self.levels;
        if self.input_size == 0 || !self.input_size.is_multiple_of(step) {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by 2^levels = {step}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Encoder widths per level, finest first (`levels + 1` entries).
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.levels).map(|l| self.base_filters << l).collect()
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Number of scalar parameters `build_network(config, _)` allocates.
pub fn parameter_count(config: &NetworkConfig) -> usize {
    let w = config.widths();
    let l = config.levels;
    let res = ResidualBlock::param_count;
    let conv = Conv3d::param_count;
    let mut total = conv(1, w[0], 3);
    for i in 0..l {
        total += res(w[i]) + conv(w[i], w[i + 1], 3);
    }
    total += config.bottleneck_blocks * res(w[l]);
    for i in 0..l {
        total += conv(w[i + 1], w[i], 1) + res(w[i]);
    }
    total += conv(w[l] + w[l - 1], w[l - 1], 1) + res(w[l - 1]);
    for i in 0..l {
        total += AttentionGate::param_count(w[i], w[i], w[i]);
    }
    for i in 0..l - 1 {
        total += conv(w[i + 1], w[i], 1);
    }
    total + conv(w[0], OUTPUT_CHANNELS, 1) + conv(2 * w[0], OUTPUT_CHANNELS, 1)
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    block: ResidualBlock,
    down: Conv3d,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    reduce: Conv3d,
    block: ResidualBlock,
}

#[derive(Clone, Debug)]
struct BoundaryLevel {
    gate: AttentionGate,
    /// Width reduction applied to the previous gate's output; absent at the coarsest gate.
    reduce: Option<Conv3d>,
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub seg_probs: Var,
    pub boundary_probs: Var,
    /// Attention maps, coarsest gate first.
    pub attention_maps: Vec<Var>,
}

/// Per-voxel sigmoid probabilities, each `[N, 2, S, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs<T> {
    pub seg_probs: Tensor<T>,
    pub boundary_probs: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BoundaryAwareNet<T> {
    config: NetworkConfig,
    params: ParamStore<T>,
    stem: Conv3d,
    encoder: Vec<EncoderLevel>,
    bottleneck: Vec<ResidualBlock>,
    /// Indexed by level, finest first.
    decoder: Vec<DecoderLevel>,
    fuse_reduce: Conv3d,
    fuse_block: ResidualBlock,
    /// Indexed by level, finest first.
    boundary: Vec<BoundaryLevel>,
    boundary_head: Conv3d,
    seg_head: Conv3d,
}

impl<T: Real> BoundaryAwareNet<T> {
    /// Deterministic for a fixed seed.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let w = config.widths();
        let l = config.levels;

        let stem = Conv3d::new(&mut ps, &mut rng, "stem", 1, w[0], 3, 1);
        let encoder = (0..l)
            .map(|i| EncoderLevel {
                block: ResidualBlock::new(&mut ps, &mut rng, &format!("enc{i}.block"), w[i]),
                down: Conv3d::new(&mut ps, &mut rng, &format!("enc{i}.down"), w[i], w[i + 1], 3, 2),
            })
            .collect();
        let bottleneck = (0..config.bottleneck_blocks)
            .map(|b| ResidualBlock::new(&mut ps, &mut rng, &format!("bottleneck{b}"), w[l]))
            .collect();
        let mut decoder: Vec<DecoderLevel> = (0..l)
            .rev()
            .map(|i| DecoderLevel {
                reduce: Conv3d::new(&mut ps, &mut rng, &format!("dec{i}.reduce"), w[i + 1], w[i], 1, 1),
                block: ResidualBlock::new(&mut ps, &mut rng, &format!("dec{i}.block"), w[i]),
            })
            .collect();
        decoder.reverse();

        let fuse_reduce = Conv3d::new(&mut ps, &mut rng, "stream.fuse_reduce", w[l] + w[l - 1], w[l - 1], 1, 1);
        let fuse_block = ResidualBlock::new(&mut ps, &mut rng, "stream.fuse_block", w[l - 1]);
        let mut boundary: Vec<BoundaryLevel> = (0..l)
            .rev()
            .map(|i| BoundaryLevel {
                reduce: (i + 1 < l).then(|| {
                    Conv3d::new(&mut ps, &mut rng, &format!("stream{i}.reduce"), w[i + 1], w[i], 1, 1)
                }),
                gate: AttentionGate::new(&mut ps, &mut rng, &format!("stream{i}.gate"), w[i], w[i], w[i]),
            })
            .collect();
        boundary.reverse();
        let boundary_head = Conv3d::new(&mut ps, &mut rng, "boundary_head", w[0], OUTPUT_CHANNELS, 1, 1);
        let seg_head = Conv3d::new(&mut ps, &mut rng, "seg_head", 2 * w[0], OUTPUT_CHANNELS, 1, 1);

        Ok(Self {
            config,
            params: ps,
            stem,
            encoder,
            bottleneck,
            decoder,
            fuse_reduce,
            fuse_block,
            boundary,
            boundary_head,
            seg_head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// The same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> BoundaryAwareNet<U> {
        BoundaryAwareNet {
            config: self.config,
            params: self.params.cast(),
            stem: self.stem.clone(),
            encoder: self.encoder.clone(),
            bottleneck: self.bottleneck.clone(),
            decoder: self.decoder.clone(),
            fuse_reduce: self.fuse_reduce.clone(),
            fuse_block: self.fuse_block.clone(),
            boundary: self.boundary.clone(),
            boundary_head: self.boundary_head.clone(),
            seg_head: self.seg_head.clone(),
        }
    }

    /// The attention gate at `level` (0 = finest).
    pub fn attention_gate(&self, level: usize) -> &AttentionGate {
        &self.boundary[level].gate
    }

    /// Record a forward pass on `tape` using parameters bound by [`ParamStore::bind`].
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, crop: Var) -> Result<ForwardVars> {
        let s = self.config.input_size;
        let shape = tape.shape(crop);
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != [s, s, s] {
            return Err(contract(
                "forward",
                format!("crop shape {shape:?} must be [N, 1, {s}, {s}, {s}]"),
            ));
        }
        let l = self.config.levels;

        let mut x = self.stem.forward(tape, p, crop)?;
        let mut skips = Vec::with_capacity(l);
        for level in &self.encoder {
            let f = level.block.forward(tape, p, x)?;
            skips.push(f);
            x = level.down.forward(tape, p, f)?;
        }
        for block in &self.bottleneck {
            x = block.forward(tape, p, x)?;
        }
        let deep = x;

        for (i, level) in self.decoder.iter().enumerate().rev() {
            let h = level.reduce.forward(tape, p, x)?;
            let h = tape.trilinear_upsample(h, 2)?;
            let h = tape.add(h, skips[i])?;
            x = level.block.forward(tape, p, h)?;
        }
        let decoded = x;

        let up = tape.trilinear_upsample(deep, 2)?;
        let cat = tape.concat_channels(up, skips[l - 1])?;
        let fused = self.fuse_reduce.forward(tape, p, cat)?;
        let mut stream = self.fuse_block.forward(tape, p, fused)?;
        let mut attention_maps = Vec::with_capacity(l);
        for (i, level) in self.boundary.iter().enumerate().rev() {
            if let Some(reduce) = &level.reduce {
                let h = reduce.forward(tape, p, stream)?;
                stream = tape.trilinear_upsample(h, 2)?;
            }
            let (gated, map) = level.gate.forward(tape, p, skips[i], stream)?;
            stream = gated;
            attention_maps.push(map);
        }

        let b_logits = self.boundary_head.forward(tape, p, stream)?;
        let boundary_probs = tape.sigmoid(b_logits);
        let joined = tape.concat_channels(decoded, stream)?;
        let s_logits = self.seg_head.forward(tape, p, joined)?;
        let seg_probs = tape.sigmoid(s_logits);
        Ok(ForwardVars {
            seg_probs,
            boundary_probs,
            attention_maps,
        })
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, crop: &Tensor<T>) -> Result<ForwardOutputs<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(crop.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(ForwardOutputs {
            seg_probs: tape.value(out.seg_probs).clone(),
            boundary_probs: tape.value(out.boundary_probs).clone(),
        })
    }
}

/// Convenience alias matching [`BoundaryAwareNet::build`].
pub fn build_network<T: Real>(config: NetworkConfig, rng_seed: u64) -> Result<BoundaryAwareNet<T>> {
    BoundaryAwareNet::build(config, rng_seed)
}
