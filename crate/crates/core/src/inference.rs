//! Whole-volume prediction (sliding window, flip TTA, ensembles), label
//! composition and dice metrics.

use rayon::prelude::*;

use crate::boundary_net::BoundaryAwareNet;
use crate::data::volume::{resample_volume_to, voxel_index};
use crate::data::{normalize_intensities, Interpolation, LabelVolume, Resample, Volume, BACKGROUND, KIDNEY, TUMOR};
use crate::data::ISOTROPIC_MM;
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_OVERLAP: f64 = 0.5;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const METRICS_HEADER: &str = "case,kidneys_dice,tumor_dice,composite_dice";

/// Two-channel probability field on a voxel grid (x-fastest, like [`Volume`]).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionField {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    foreground: Vec<f32>,
    tumor: Vec<f32>,
    pub tta_used: bool,
    pub ensemble_size: usize,
}

impl PredictionField {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], foreground: Vec<f32>, tumor: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n == 0 || foreground.len() != n || tumor.len() != n {
            return Err(contract(
                "PredictionField::new",
                format!(
                    "dims {dims:?} need {n} voxels per channel, got {} and {}",
                    foreground.len(),
                    tumor.len()
                ),
            ));
        }
        if let Some(v) = foreground.iter().chain(&tumor).find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(contract("PredictionField::new", format!("probability {v} outside [0, 1]")));
        }
        Ok(Self {
            dims,
            spacing_mm,
            foreground,
            tumor,
            tta_used: false,
            ensemble_size: 1,
        })
    }

    /// Constant field, mostly useful in tests.
    pub fn constant(dims: [usize; 3], spacing_mm: [f64; 3], foreground: f32, tumor: f32) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing_mm, vec![foreground; n], vec![tumor; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn foreground(&self) -> &[f32] {
        &self.foreground
    }

    pub fn tumor(&self) -> &[f32] {
        &self.tumor
    }

    /// `(foreground, tumor)` at a voxel.
    pub fn at(&self, x: usize, y: usize, z: usize) -> (f32, f32) {
        let i = voxel_index(self.dims, x, y, z);
        (self.foreground[i], self.tumor[i])
    }

    /// Trilinear resampling of both channels onto another grid with the same origin.
    pub fn resample_to(&self, dims: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self> {
        let channel = |data: &[f32]| -> Result<Vec<f32>> {
            let v = Volume::new(self.dims, self.spacing_mm, data.to_vec())?;
            Ok(resample_volume_to(&v, dims, spacing_mm)?.data().to_vec())
        };
        Ok(Self {
            dims,
            spacing_mm,
            foreground: channel(&self.foreground)?,
            tumor: channel(&self.tumor)?,
            tta_used: self.tta_used,
            ensemble_size: self.ensemble_size,
        })
    }
}

/// Window origins along one axis. The last window is flush with the far edge;
/// an axis shorter than the window gets a single zero-padded window.
pub fn window_starts(extent: usize, size: usize, overlap: f64) -> Vec<usize> {
    if extent <= size {
        return vec![0];
    }
    let stride = ((size as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let last = extent - size;
    let mut starts: Vec<usize> = (0..last).step_by(stride).collect();
    starts.push(last);
    starts
}

/// `[1, 1, s, s, s]` crop whose corner sits at `start` (x, y, z); outside voxels are zero.
pub fn extract_window(v: &Volume, start: [usize; 3], size: usize) -> Tensor<f32> {
    let [nx, ny, nz] = v.dims();
    let mut data = vec![0.0f32; size * size * size];
    for z in 0..size.min(nz.saturating_sub(start[2])) {
        for y in 0..size.min(ny.saturating_sub(start[1])) {
            let w = size.min(nx.saturating_sub(start[0]));
            let src = voxel_index(v.dims(), start[0], start[1] + y, start[2] + z);
            let dst = (z * size + y) * size;
            data[dst..dst + w].copy_from_slice(&v.data()[src..src + w]);
        }
    }
    Tensor::new(&[1, 1, size, size, size], data).expect("window extents are non-zero")
}

fn check_window(net: &BoundaryAwareNet<f32>, crop_size: usize, overlap: f64) -> Result<()> {
    let expected = net.config().input_size;
    if crop_size != expected {
        return Err(Error::Config(format!(
            "crop size {crop_size} differs from the network input size {expected}"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} must lie in [0, 1)")));
    }
    Ok(())
}

/// Sliding-window prediction over a normalised volume on the network grid.
/// Overlapping windows are averaged uniformly, in window order.
pub fn predict_volume(net: &BoundaryAwareNet<f32>, v: &Volume, crop_size: usize, overlap: f64) -> Result<PredictionField> {
    check_window(net, crop_size, overlap)?;
    if !v.is_normalized() {
        return Err(contract("predict_volume", "volume intensities are not normalised"));
    }
    let s = crop_size;
    let dims = v.dims();
    let [xs, ys, zs] = std::array::from_fn::<_, 3, _>(|a| window_starts(dims[a], s, overlap));
    let mut origins = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            origins.extend(xs.iter().map(|&x| [x, y, z]));
        }
    }
    let outputs = origins
        .par_iter()
        .map(|&o| net.predict(&extract_window(v, o, s)).map(|out| out.seg_probs))
        .collect::<Result<Vec<_>>>()?;

    let n: usize = dims.iter().product();
    let mut sums = [vec![0.0f64; n], vec![0.0f64; n]];
    let mut counts = vec![0u32; n];
    let plane = s * s * s;
    for (o, probs) in origins.iter().zip(&outputs) {
        let p = probs.data();
        for z in 0..s.min(dims[2] - o[2].min(dims[2])) {
            for y in 0..s.min(dims[1] - o[1].min(dims[1])) {
                for x in 0..s.min(dims[0] - o[0].min(dims[0])) {
                    let i = voxel_index(dims, o[0] + x, o[1] + y, o[2] + z);
                    let w = (z * s + y) * s + x;
                    sums[0][i] += p[w] as f64;
                    sums[1][i] += p[plane + w] as f64;
                    counts[i] += 1;
                }
            }
        }
    }
    let mean = |sum: &[f64]| -> Vec<f32> {
        sum.iter().zip(&counts).map(|(s, &c)| (s / c as f64) as f32).collect()
    };
    PredictionField::new(dims, v.spacing_mm(), mean(&sums[0]), mean(&sums[1]))
}

/// Reflection along any subset of the three axes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Flip {
    pub x: bool,
    pub y: bool,
    pub z: bool,
}

impl Flip {
    pub const IDENTITY: Flip = Flip {
        x: false,
        y: false,
        z: false,
    };

    /// The eight axis-flip combinations, identity first.
    pub fn all() -> Vec<Flip> {
        (0..8u8)
            .map(|b| Flip {
                x: b & 1 != 0,
                y: b & 2 != 0,
                z: b & 4 != 0,
            })
            .collect()
    }

    pub fn apply<V: Copy>(&self, dims: [usize; 3], data: &[V]) -> Vec<V> {
        let [nx, ny, nz] = dims;
        let pick = |flip: bool, i: usize, n: usize| if flip { n - 1 - i } else { i };
        let mut out = Vec::with_capacity(data.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out.push(data[voxel_index(dims, pick(self.x, x, nx), pick(self.y, y, ny), pick(self.z, z, nz))]);
                }
            }
        }
        out
    }

    pub fn apply_volume(&self, v: &Volume) -> Volume {
        let flipped = Volume::new(v.dims(), v.spacing_mm(), self.apply(v.dims(), v.data())).expect("same geometry");
        if v.is_normalized() {
            flipped.assume_normalized()
        } else {
            flipped
        }
    }
}

/// Mean over flips `t` of `t(predict(t(v)))`.
pub fn tta_predict(
    net: &BoundaryAwareNet<f32>,
    v: &Volume,
    flips: &[Flip],
    crop_size: usize,
    overlap: f64,
) -> Result<PredictionField> {
    if flips.is_empty() {
        return Err(contract("tta_predict", "empty transform set"));
    }
    for (i, f) in flips.iter().enumerate() {
        if flips[..i].contains(f) {
            return Err(contract("tta_predict", format!("duplicate transform {f:?}")));
        }
    }
    let dims = v.dims();
    let n: usize = dims.iter().product();
    let mut sums = [vec![0.0f64; n], vec![0.0f64; n]];
    for f in flips {
        let p = predict_volume(net, &f.apply_volume(v), crop_size, overlap)?;
        for (sum, ch) in sums.iter_mut().zip([p.foreground(), p.tumor()]) {
            for (s, x) in sum.iter_mut().zip(f.apply(dims, ch)) {
                *s += x as f64;
            }
        }
    }
    let k = flips.len() as f64;
    let mean = |s: &[f64]| s.iter().map(|v| (v / k) as f32).collect();
    let mut field = PredictionField::new(dims, v.spacing_mm(), mean(&sums[0]), mean(&sums[1]))?;
    field.tta_used = flips != [Flip::IDENTITY];
    Ok(field)
}

/// Voxelwise mean of member fields. Each voxel's member values are sorted
/// before summation so the result does not depend on member order.
pub fn ensemble_mean(fields: &[PredictionField]) -> Result<PredictionField> {
    let first = fields.first().ok_or_else(|| contract("ensemble_mean", "no members"))?;
    if let Some(f) = fields.iter().find(|f| f.dims != first.dims || f.spacing_mm != first.spacing_mm) {
        return Err(contract(
            "ensemble_mean",
            format!("member grid {:?} differs from {:?}", f.dims, first.dims),
        ));
    }
    let k = fields.len() as f64;
    let reduce = |channel: fn(&PredictionField) -> &[f32]| -> Vec<f32> {
        let mut vals = vec![0.0f32; fields.len()];
        (0..channel(first).len())
            .map(|i| {
                for (v, f) in vals.iter_mut().zip(fields) {
                    *v = channel(f)[i];
                }
                vals.sort_by(f32::total_cmp);
                (vals.iter().map(|&v| v as f64).sum::<f64>() / k) as f32
            })
            .collect()
    };
    let mut out = PredictionField::new(
        first.dims,
        first.spacing_mm,
        reduce(PredictionField::foreground),
        reduce(PredictionField::tumor),
    )?;
    out.tta_used = fields.iter().any(|f| f.tta_used);
    out.ensemble_size = fields.iter().map(|f| f.ensemble_size).sum();
    Ok(out)
}

/// Run every member (with the given flips) and average.
pub fn ensemble_predict(
    nets: &[&BoundaryAwareNet<f32>],
    v: &Volume,
    flips: &[Flip],
    crop_size: usize,
    overlap: f64,
) -> Result<PredictionField> {
    let first = nets.first().ok_or_else(|| contract("ensemble_predict", "no members"))?;
    if let Some((i, _)) = nets.iter().enumerate().find(|(_, n)| n.config() != first.config()) {
        return Err(contract(
            "ensemble_predict",
            format!("member {i} has a different network config"),
        ));
    }
    let fields = nets
        .iter()
        .map(|net| tta_predict(net, v, flips, crop_size, overlap))
        .collect::<Result<Vec<_>>>()?;
    ensemble_mean(&fields)
}

/// Knobs for [`predict_case`].
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOptions {
    pub overlap: f64,
    pub flips: Vec<Flip>,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            overlap: DEFAULT_OVERLAP,
            flips: vec![Flip::IDENTITY],
        }
    }
}

impl InferenceOptions {
    pub fn with_tta(mut self) -> Self {
        self.flips = Flip::all();
        self
    }
}

/// Preprocess a raw volume, predict with every member and bring the field back to the input grid.
pub fn predict_case(nets: &[&BoundaryAwareNet<f32>], raw: &Volume, opts: &InferenceOptions) -> Result<PredictionField> {
    let first = nets.first().ok_or_else(|| contract("predict_case", "no members"))?;
    let v = normalize_intensities(raw).resample_isotropic(ISOTROPIC_MM, Interpolation::Trilinear)?;
    let field = ensemble_predict(nets, &v, &opts.flips, first.config().input_size, opts.overlap)?;
    field.resample_to(raw.dims(), raw.spacing_mm())
}

/// Tumor where its channel reaches `threshold`, otherwise foreground, otherwise background.
pub fn compose_labels(p: &PredictionField, threshold: f64) -> Result<LabelVolume> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(contract("compose_labels", format!("threshold {threshold} outside (0, 1)")));
    }
    let labels = p
        .foreground
        .iter()
        .zip(&p.tumor)
        .map(|(&fg, &t)| {
            if t as f64 >= threshold {
                TUMOR
            } else if fg as f64 >= threshold {
                KIDNEY
            } else {
                BACKGROUND
            }
        })
        .collect();
    LabelVolume::new(p.dims, p.spacing_mm, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiceMode {
    /// Kidney and tumor together as foreground.
    Kidneys,
    Tumor,
}

impl DiceMode {
    fn includes(self, label: u8) -> bool {
        match self {
            DiceMode::Kidneys => label != BACKGROUND,
            DiceMode::Tumor => label == TUMOR,
        }
    }
}

/// Binary dice of the mode's masks; 1 when both are empty.
pub fn dice_metric(pred: &LabelVolume, truth: &LabelVolume, mode: DiceMode) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(contract(
            "dice_metric",
            format!("prediction dims {:?} differ from truth {:?}", pred.dims(), truth.dims()),
        ));
    }
    let (mut both, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        let (p, t) = (mode.includes(p), mode.includes(t));
        both += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    })
}

pub fn composite_dice(kidneys: f64, tumor: f64) -> f64 {
    (kidneys + tumor) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub kidneys_dice: f64,
    pub tumor_dice: f64,
    pub composite_dice: f64,
}

impl MetricsReport {
    pub fn evaluate(pred: &LabelVolume, truth: &LabelVolume) -> Result<Self> {
        let kidneys_dice = dice_metric(pred, truth, DiceMode::Kidneys)?;
        let tumor_dice = dice_metric(pred, truth, DiceMode::Tumor)?;
        Ok(Self {
            kidneys_dice,
            tumor_dice,
            composite_dice: composite_dice(kidneys_dice, tumor_dice),
        })
    }

    pub fn csv_row(&self, case: &str) -> String {
        format!("{case},{},{},{}", self.kidneys_dice, self.tumor_dice, self.composite_dice)
    }
}
