//! Volumes, preprocessing, synthetic phantoms, target extraction and crop sampling.

pub mod boundary;
pub mod mvol;
pub mod phantom;
pub mod sampler;
pub mod volume;

pub use boundary::extract_boundary_targets;
pub use mvol::{read_labels, read_mvol, read_volume, write_labels, write_volume, MvolData};
pub use phantom::{generate_phantom, Ellipsoid, PhantomSpec, Sphere};
pub use sampler::{sample_training_crop, CropSample, CropSampler, CropSource, FixedCrop, PreparedCase, SamplingClass};
pub use volume::{
    normalize_intensities, resample_isotropic, Interpolation, LabelVolume, Resample, Volume, BACKGROUND, KIDNEY,
    TUMOR,
};

use crate::error::Result;

/// Target grid spacing used for training and inference.
pub const ISOTROPIC_MM: [f64; 3] = [1.0; 3];

/// Normalise intensities and bring both volumes onto the 1 mm isotropic grid.
pub fn preprocess(image: &Volume, labels: &LabelVolume) -> Result<(Volume, LabelVolume)> {
    let image = normalize_intensities(image).resample_isotropic(ISOTROPIC_MM, Interpolation::Trilinear)?;
    let labels = labels.resample_isotropic(ISOTROPIC_MM, Interpolation::Nearest)?;
    Ok((image, labels))
}
