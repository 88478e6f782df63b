//! Synthetic CT-like phantoms: kidney ellipsoids with a spherical tumor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::volume::{LabelVolume, Volume, BACKGROUND, KIDNEY, TUMOR};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    pub intensity_offset: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    pub center_mm: [f64; 3],
    pub radius_mm: f64,
    pub intensity_offset: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing_mm: [f64; 3],
    pub background: f32,
    #[serde(default)]
    pub noise_std: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "kidney")]
    pub kidneys: Vec<Ellipsoid>,
    #[serde(default)]
    pub tumor: Option<Sphere>,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

/// Physical position of a voxel centre.
fn voxel_mm(i: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| (i[a] as f64 + 0.5) * spacing[a])
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center_mm[a]) / self.semi_axes_mm[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

impl Sphere {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| (p[a] - self.center_mm[a]).powi(2)).sum::<f64>() <= self.radius_mm.powi(2)
    }
}

impl PhantomSpec {
    /// A single-kidney phantom with a tumor on its surface, filling a `size`³ grid at 1 mm.
    pub fn centered(size: usize, seed: u64) -> Self {
        let s = size as f64;
        let c = s / 2.0;
        Self {
            dims: [size; 3],
            spacing_mm: [1.0; 3],
            background: -100.0,
            noise_std: 20.0,
            seed,
            kidneys: vec![Ellipsoid {
                center_mm: [c, c, c],
                semi_axes_mm: [0.34 * s, 0.25 * s, 0.22 * s],
                intensity_offset: 250.0,
            }],
            tumor: Some(Sphere {
                center_mm: [c + 0.22 * s, c + 0.06 * s, c],
                radius_mm: 0.17 * s,
                intensity_offset: 120.0,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims.contains(&0) {
            return bad(format!("phantom dims {:?} contain a zero extent", self.dims));
        }
        if self.spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("phantom spacing {:?} must be positive", self.spacing_mm));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std {} must be non-negative", self.noise_std));
        }
        let extent: [f64; 3] = std::array::from_fn(|a| self.dims[a] as f64 * self.spacing_mm[a]);
        let fits = |c: [f64; 3], r: [f64; 3]| (0..3).all(|a| c[a] - r[a] >= 0.0 && c[a] + r[a] <= extent[a]);
        for (i, k) in self.kidneys.iter().enumerate() {
            if k.semi_axes_mm.iter().any(|&r| !(r > 0.0)) {
                return bad(format!("kidney {i} has non-positive semi-axes {:?}", k.semi_axes_mm));
            }
            if !fits(k.center_mm, k.semi_axes_mm) {
                return bad(format!("kidney {i} does not fit inside the {extent:?} mm field"));
            }
        }
        if let Some(t) = &self.tumor {
            if !(t.radius_mm > 0.0) {
                return bad(format!("tumor radius {} must be positive", t.radius_mm));
            }
            if !fits(t.center_mm, [t.radius_mm; 3]) {
                return bad(format!("tumor does not fit inside the {extent:?} mm field"));
            }
        }
        Ok(())
    }
}

/// Rasterise the phantom: tumor label inside the sphere, else kidney inside any
/// ellipsoid, else background; intensity is background + class offset + Gaussian noise.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;
    let n = nx * ny * nz;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0f32, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n);
    let mut tumor_in_kidney = false;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = voxel_mm([x, y, z], spec.spacing_mm);
                let kidney = spec.kidneys.iter().find(|k| k.contains(p));
                let in_tumor = spec.tumor.as_ref().is_some_and(|t| t.contains(p));
                tumor_in_kidney |= in_tumor && kidney.is_some();
                let (label, offset) = match (in_tumor, kidney) {
                    (true, _) => (TUMOR, spec.tumor.as_ref().map_or(0.0, |t| t.intensity_offset)),
                    (false, Some(k)) => (KIDNEY, k.intensity_offset),
                    (false, None) => (BACKGROUND, 0.0),
                };
                let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                labels.push(label);
                data.push(spec.background + offset + eps);
            }
        }
    }
    if spec.tumor.is_some() && !tumor_in_kidney {
        return Err(Error::Config("tumor sphere does not intersect any kidney ellipsoid".into()));
    }
    Ok((
        Volume::new(spec.dims, spec.spacing_mm, data)?,
        LabelVolume::new(spec.dims, spec.spacing_mm, labels)?,
    ))
}
