//! Class-biased training crops.
//!
//! A crop centre is drawn from tumor voxels with probability 0.8, from any
//! foreground voxel with probability 0.1 and from background with probability
//! 0.1. Missing classes fall back tumor → foreground → background. The volume
//! is implicitly zero-padded so every centre yields a full crop.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::data::boundary::extract_boundary_targets;
use crate::data::volume::{LabelVolume, Volume, BACKGROUND, TUMOR};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

pub const P_TUMOR: f64 = 0.8;
pub const P_FOREGROUND: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SamplingClass {
    Tumor,
    Foreground,
    Background,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropSample {
    /// `[1, 1, S, S, S]`
    pub image: Tensor<f32>,
    /// `[1, 2, S, S, S]`: foreground, tumor.
    pub seg_targets: Tensor<f32>,
    /// `[1, 2, S, S, S]`: foreground edges, tumor edges.
    pub edge_targets: Tensor<f32>,
    pub sampling_class: SamplingClass,
    /// Crop centre in volume voxel coordinates `[x, y, z]`.
    pub center: [usize; 3],
}

/// One volume with its labels and precomputed targets and class index lists.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    image: Volume,
    labels: LabelVolume,
    seg: Tensor<f32>,
    edges: Tensor<f32>,
    tumor: Vec<u32>,
    foreground: Vec<u32>,
    background: Vec<u32>,
}

impl PreparedCase {
    pub fn new(image: Volume, labels: LabelVolume) -> Result<Self> {
        if image.dims() != labels.dims() {
            return Err(contract(
                "PreparedCase::new",
                format!("image dims {:?} differ from label dims {:?}", image.dims(), labels.dims()),
            ));
        }
        let mut tumor = Vec::new();
        let mut foreground = Vec::new();
        let mut background = Vec::new();
        for (i, &l) in labels.labels().iter().enumerate() {
            let i = i as u32;
            if l == BACKGROUND {
                background.push(i);
            } else {
                foreground.push(i);
                if l == TUMOR {
                    tumor.push(i);
                }
            }
        }
        Ok(Self {
            seg: labels.class_targets(),
            edges: extract_boundary_targets(&labels),
            image,
            labels,
            tumor,
            foreground,
            background,
        })
    }

    pub fn image(&self) -> &Volume {
        &self.image
    }

    pub fn labels(&self) -> &LabelVolume {
        &self.labels
    }

    fn class_voxels(&self, class: SamplingClass) -> &[u32] {
        match class {
            SamplingClass::Tumor => &self.tumor,
            SamplingClass::Foreground => &self.foreground,
            SamplingClass::Background => &self.background,
        }
    }

    /// First non-empty class in the fallback chain starting at `class`.
    fn resolve(&self, class: SamplingClass) -> SamplingClass {
        use SamplingClass::*;
        let chain: &[SamplingClass] = match class {
            Tumor => &[Tumor, Foreground, Background],
            Foreground => &[Foreground, Background],
            // Only reachable with an all-foreground volume.
            Background => &[Background, Foreground],
        };
        chain
            .iter()
            .copied()
            .find(|&c| !self.class_voxels(c).is_empty())
            .unwrap_or(Background)
    }

    /// Draw a class by the 0.8 / 0.1 / 0.1 law, then a uniform voxel of it as the crop centre.
    pub fn sample_crop<R: RngCore>(&self, size: usize, rng: &mut R) -> Result<CropSample> {
        let u: f64 = rng.random();
        let drawn = if u < P_TUMOR {
            SamplingClass::Tumor
        } else if u < P_TUMOR + P_FOREGROUND {
            SamplingClass::Foreground
        } else {
            SamplingClass::Background
        };
        let class = self.resolve(drawn);
        let voxels = self.class_voxels(class);
        let dims = self.labels.dims();
        let center = if voxels.is_empty() {
            dims.map(|d| d / 2)
        } else {
            let flat = voxels[rng.random_range(0..voxels.len())] as usize;
            [flat % dims[0], (flat / dims[0]) % dims[1], flat / (dims[0] * dims[1])]
        };
        let mut crop = self.crop_at(center, size)?;
        crop.sampling_class = class;
        Ok(crop)
    }

    /// Crop of edge `size` whose voxel `size / 2` (per axis) is `center`; outside voxels are zero.
    pub fn crop_at(&self, center: [usize; 3], size: usize) -> Result<CropSample> {
        if size == 0 {
            return Err(contract("crop_at", "crop size must be positive"));
        }
        let dims = self.labels.dims();
        if (0..3).any(|a| center[a] >= dims[a]) {
            return Err(contract(
                "crop_at",
                format!("centre {center:?} lies outside dims {dims:?}"),
            ));
        }
        let start: [isize; 3] = std::array::from_fn(|a| center[a] as isize - (size / 2) as isize);
        let vol = dims.iter().product::<usize>();
        let s3 = size * size * size;
        let mut image = vec![0.0f32; s3];
        let mut seg = vec![0.0f32; 2 * s3];
        let mut edges = vec![0.0f32; 2 * s3];
        let (src_img, src_seg, src_edge) = (self.image.data(), self.seg.data(), self.edges.data());
        for z in 0..size {
            let zs = start[2] + z as isize;
            if zs < 0 || zs >= dims[2] as isize {
                continue;
            }
            for y in 0..size {
                let ys = start[1] + y as isize;
                if ys < 0 || ys >= dims[1] as isize {
                    continue;
                }
                let x_lo = (-start[0]).max(0) as usize;
                let x_hi = ((dims[0] as isize - start[0]).min(size as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                let src = (start[0] + x_lo as isize) as usize + dims[0] * (ys as usize + dims[1] * zs as usize);
                let dst = x_lo + size * (y + size * z);
                let len = x_hi - x_lo;
                image[dst..dst + len].copy_from_slice(&src_img[src..src + len]);
                for c in 0..2 {
                    seg[c * s3 + dst..c * s3 + dst + len]
                        .copy_from_slice(&src_seg[c * vol + src..c * vol + src + len]);
                    edges[c * s3 + dst..c * s3 + dst + len]
                        .copy_from_slice(&src_edge[c * vol + src..c * vol + src + len]);
                }
            }
        }
        let shape1 = [1, 1, size, size, size];
        let shape2 = [1, 2, size, size, size];
        Ok(CropSample {
            image: Tensor::new(&shape1, image)?,
            seg_targets: Tensor::new(&shape2, seg)?,
            edge_targets: Tensor::new(&shape2, edges)?,
            sampling_class: SamplingClass::Background,
            center,
        })
    }
}

/// One-shot form: prepare `(v, labels)` and draw a single crop.
pub fn sample_training_crop<R: RngCore>(
    v: &Volume,
    labels: &LabelVolume,
    size: usize,
    rng: &mut R,
) -> Result<CropSample> {
    PreparedCase::new(v.clone(), labels.clone())?.sample_crop(size, rng)
}

/// Source of training crops consumed by the trainer.
pub trait CropSource {
    fn next_crop(&mut self) -> Result<CropSample>;
    /// RNG driving the draws, persisted in checkpoints.
    fn rng(&self) -> &ChaCha8Rng;
    fn set_rng(&mut self, rng: ChaCha8Rng);
}

/// Uniform case choice followed by class-biased crop sampling.
#[derive(Clone, Debug)]
pub struct CropSampler {
    cases: Vec<PreparedCase>,
    size: usize,
    rng: ChaCha8Rng,
}

impl CropSampler {
    pub fn new(cases: Vec<PreparedCase>, size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if cases.is_empty() {
            return Err(contract("CropSampler::new", "no training cases"));
        }
        Ok(Self { cases, size, rng })
    }

    pub fn cases(&self) -> &[PreparedCase] {
        &self.cases
    }
}

impl CropSource for CropSampler {
    fn next_crop(&mut self) -> Result<CropSample> {
        let i = if self.cases.len() == 1 {
            0
        } else {
            self.rng.random_range(0..self.cases.len())
        };
        self.cases[i].sample_crop(self.size, &mut self.rng)
    }

    fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }
}

/// Always yields the same crop; used for overfitting checks.
#[derive(Clone, Debug)]
pub struct FixedCrop {
    crop: CropSample,
    rng: ChaCha8Rng,
}

impl FixedCrop {
    pub fn new(crop: CropSample, rng: ChaCha8Rng) -> Self {
        Self { crop, rng }
    }

    pub fn crop(&self) -> &CropSample {
        &self.crop
    }
}

impl CropSource for FixedCrop {
    fn next_crop(&mut self) -> Result<CropSample> {
        Ok(self.crop.clone())
    }

    fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }
}
