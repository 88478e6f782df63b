use crate::error::{contract, Error, Result};
use crate::tensor::{Real, Tensor};

pub const BACKGROUND: u8 = 0;
pub const KIDNEY: u8 = 1;
pub const TUMOR: u8 = 2;

/// Intensity divisor and clip range applied by [`normalize_intensities`].
pub const INTENSITY_SCALE: f32 = 1000.0;

/// Scalar intensity field in physical space. Voxels are stored x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    data: Vec<f32>,
    normalized: bool,
}

/// Per-voxel class labels: 0 background, 1 kidney, 2 tumor.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    labels: Vec<u8>,
}

fn check_geometry(op: &'static str, dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(contract(op, format!("spacing {spacing:?} must be positive and finite")));
    }
    if dims.contains(&0) {
        return Err(contract(op, format!("dims {dims:?} contain a zero extent")));
    }
    let n: usize = dims.iter().product();
    if n != len {
        return Err(contract(op, format!("dims {dims:?} need {n} voxels, buffer has {len}")));
    }
    Ok(())
}

#[inline]
pub fn voxel_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_geometry("Volume::new", dims, spacing_mm, data.len())?;
        Ok(Self {
            dims,
            spacing_mm,
            data,
            normalized: false,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Mark the intensities as already in normalised units.
    pub fn assume_normalized(mut self) -> Self {
        self.normalized = true;
        self
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[voxel_index(self.dims, x, y, z)]
    }

    /// `[1, 1, z, y, x]` tensor view of the intensities.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let [nx, ny, nz] = self.dims;
        Tensor::new(&[1, 1, nz, ny, nx], self.data.iter().map(|&v| T::of(v as f64)).collect())
            .expect("volume dims are non-zero")
    }
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        check_geometry("LabelVolume::new", dims, spacing_mm, labels.len())?;
        if let Some(i) = labels.iter().position(|&l| l > TUMOR) {
            return Err(contract(
                "LabelVolume::new",
                format!("label {} at voxel {i} is not one of 0, 1, 2", labels[i]),
            ));
        }
        Ok(Self {
            dims,
            spacing_mm,
            labels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[voxel_index(self.dims, x, y, z)]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// `[1, 2, z, y, x]` binary targets: channel 0 foreground (1 or 2), channel 1 tumor.
    pub fn class_targets<T: Real>(&self) -> Tensor<T> {
        let [nx, ny, nz] = self.dims;
        let fg = self.labels.iter().map(|&l| if l != BACKGROUND { T::ONE } else { T::ZERO });
        let tumor = self.labels.iter().map(|&l| if l == TUMOR { T::ONE } else { T::ZERO });
        Tensor::new(&[1, 2, nz, ny, nx], fg.chain(tumor).collect()).expect("label dims are non-zero")
    }
}

/// `clamp(v / 1000, -1, 1)`; a no-op on a volume that is already normalised.
pub fn normalize_intensities(v: &Volume) -> Volume {
    if v.normalized {
        return v.clone();
    }
    Volume {
        dims: v.dims,
        spacing_mm: v.spacing_mm,
        data: v
            .data
            .iter()
            .map(|&x| (x / INTENSITY_SCALE).clamp(-1.0, 1.0))
            .collect(),
        normalized: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Output extents for resampling `dims` from `spacing` to `target`.
pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> Result<[usize; 3]> {
    if target.iter().chain(&spacing).any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(contract(
            "resample_isotropic",
            format!("spacings {spacing:?} -> {target:?} must be positive"),
        ));
    }
    Ok(std::array::from_fn(|a| {
        ((dims[a] as f64 * spacing[a] / target[a]).round() as usize).max(1)
    }))
}

/// Source coordinate (in source voxels) of each output voxel centre along one axis.
fn axis_coords(n_out: usize, n_in: usize, out_spacing: f64, in_spacing: f64) -> Vec<f64> {
    let ratio = out_spacing / in_spacing;
    (0..n_out)
        .map(|o| ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64))
        .collect()
}

fn same_grid(a: ([usize; 3], [f64; 3]), b: ([usize; 3], [f64; 3])) -> bool {
    a.0 == b.0 && a.1 == b.1
}

/// Resample onto a grid of `dims` voxels at `spacing` sharing the source origin.
pub fn resample_volume_to(v: &Volume, dims: [usize; 3], spacing: [f64; 3]) -> Result<Volume> {
    resampled_dims(dims, spacing, spacing)?;
    if same_grid((v.dims, v.spacing_mm), (dims, spacing)) {
        return Ok(v.clone());
    }
    let [cx, cy, cz] =
        std::array::from_fn::<_, 3, _>(|a| axis_coords(dims[a], v.dims[a], spacing[a], v.spacing_mm[a]));
    let split = |c: f64, n: usize| {
        let i0 = c.floor() as usize;
        (i0, (i0 + 1).min(n - 1), (c - i0 as f64) as f32)
    };
    let [nx, ny, _] = v.dims;
    let src = &v.data;
    let mut out = Vec::with_capacity(dims.iter().product());
    for &z in &cz {
        let (z0, z1, fz) = split(z, v.dims[2]);
        for &y in &cy {
            let (y0, y1, fy) = split(y, ny);
            for &x in &cx {
                let (x0, x1, fx) = split(x, nx);
                let at = |xi: usize, yi: usize, zi: usize| src[xi + nx * (yi + ny * zi)];
                let lerp = |a: f32, b: f32, f: f32| a + f * (b - a);
                let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
                let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
                let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
                let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
                out.push(lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz));
            }
        }
    }
    Ok(Volume {
        dims,
        spacing_mm: spacing,
        data: out,
        normalized: v.normalized,
    })
}

/// Nearest-neighbour resampling; never creates a label absent from the input.
pub fn resample_labels_to(v: &LabelVolume, dims: [usize; 3], spacing: [f64; 3]) -> Result<LabelVolume> {
    resampled_dims(dims, spacing, spacing)?;
    if same_grid((v.dims, v.spacing_mm), (dims, spacing)) {
        return Ok(v.clone());
    }
    Ok(LabelVolume {
        dims,
        spacing_mm: spacing,
        labels: nearest_pick(v.dims, v.spacing_mm, &v.labels, dims, spacing),
    })
}

/// Anything that can be brought onto a new voxel grid.
pub trait Resample: Sized {
    fn resample_isotropic(&self, target_spacing: [f64; 3], mode: Interpolation) -> Result<Self>;
}

impl Resample for Volume {
    fn resample_isotropic(&self, target: [f64; 3], mode: Interpolation) -> Result<Self> {
        let dims = resampled_dims(self.dims, self.spacing_mm, target)?;
        match mode {
            Interpolation::Trilinear => resample_volume_to(self, dims, target),
            Interpolation::Nearest => {
                Ok(Volume {
                    dims,
                    spacing_mm: target,
                    data: nearest_pick(self.dims, self.spacing_mm, &self.data, dims, target),
                    normalized: self.normalized,
                })
            }
        }
    }
}

impl Resample for LabelVolume {
    fn resample_isotropic(&self, target: [f64; 3], mode: Interpolation) -> Result<Self> {
        if mode != Interpolation::Nearest {
            return Err(Error::Unsupported("labels are only resampled nearest-neighbour".into()));
        }
        let dims = resampled_dims(self.dims, self.spacing_mm, target)?;
        resample_labels_to(self, dims, target)
    }
}

fn nearest_pick<V: Copy>(
    src_dims: [usize; 3],
    src_spacing: [f64; 3],
    values: &[V],
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Vec<V> {
    let [cx, cy, cz] =
        std::array::from_fn::<_, 3, _>(|a| axis_coords(dims[a], src_dims[a], spacing[a], src_spacing[a]));
    let near = |c: f64, n: usize| ((c + 0.5).floor() as usize).min(n - 1);
    let mut out = Vec::with_capacity(dims.iter().product());
    for &z in &cz {
        for &y in &cy {
            for &x in &cx {
                out.push(values[voxel_index(src_dims, near(x, src_dims[0]), near(y, src_dims[1]), near(z, src_dims[2]))]);
            }
        }
    }
    out
}

/// Free-function form of [`Resample::resample_isotropic`].
pub fn resample_isotropic<V: Resample>(v: &V, target_spacing: [f64; 3], mode: Interpolation) -> Result<V> {
    v.resample_isotropic(target_spacing, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_rule() {
        let v = Volume::new([6, 1, 1], [1.0; 3], vec![1000.0, -1000.0, 0.0, 2500.0, -3000.0, 500.0]).unwrap();
        let n = normalize_intensities(&v);
        assert_eq!(n.data(), &[1.0, -1.0, 0.0, 1.0, -1.0, 0.5]);
        assert_eq!(normalize_intensities(&n), n);
    }

    #[test]
    fn identity_resample_is_exact() {
        let data: Vec<f32> = (0..27).map(|i| (i as f32).sin()).collect();
        let v = Volume::new([3, 3, 3], [1.5, 2.0, 0.7], data).unwrap();
        let r = resample_isotropic(&v, [1.5, 2.0, 0.7], Interpolation::Trilinear).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn upsampling_dims_follow_spacing_ratio() {
        let v = Volume::new([10, 10, 10], [2.0; 3], vec![0.0; 1000]).unwrap();
        let r = resample_isotropic(&v, [1.0; 3], Interpolation::Trilinear).unwrap();
        assert_eq!(r.dims(), [20, 20, 20]);
    }

    #[test]
    fn resampling_preserves_constants() {
        let v = Volume::new([5, 4, 3], [2.0, 1.0, 3.0], vec![0.25; 60]).unwrap();
        let r = resample_isotropic(&v, [1.0; 3], Interpolation::Trilinear).unwrap();
        assert!(r.data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn non_positive_spacing_is_rejected() {
        let v = Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 8]).unwrap();
        assert!(resample_isotropic(&v, [0.0, 1.0, 1.0], Interpolation::Trilinear).is_err());
        assert!(Volume::new([2, 2, 2], [1.0, -1.0, 1.0], vec![0.0; 8]).is_err());
    }

    #[test]
    fn labels_refuse_trilinear() {
        let l = LabelVolume::new([2, 2, 2], [1.0; 3], vec![0; 8]).unwrap();
        assert!(resample_isotropic(&l, [0.5; 3], Interpolation::Trilinear).is_err());
    }

    #[test]
    fn invalid_labels_are_rejected() {
        assert!(LabelVolume::new([2, 1, 1], [1.0; 3], vec![0, 3]).is_err());
    }
}
