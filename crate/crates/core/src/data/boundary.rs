use crate::data::volume::{LabelVolume, BACKGROUND, TUMOR};
use crate::tensor::{Real, Tensor};

/// Inner 6-connected boundary of a binary mask: members with at least one
/// face neighbour outside the mask. Neighbours beyond the volume count as outside.
pub fn inner_boundary(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let mut out = vec![false; mask.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !mask[i] {
                    continue;
                }
                let interior = x > 0
                    && x + 1 < nx
                    && y > 0
                    && y + 1 < ny
                    && z > 0
                    && z + 1 < nz
                    && mask[i - 1]
                    && mask[i + 1]
                    && mask[i - nx]
                    && mask[i + nx]
                    && mask[i - nx * ny]
                    && mask[i + nx * ny];
                out[i] = !interior;
            }
        }
    }
    out
}

/// Per-class edge masks as a `[1, 2, z, y, x]` tensor: channel 0 foreground, channel 1 tumor.
pub fn extract_boundary_targets<T: Real>(labels: &LabelVolume) -> Tensor<T> {
    let [nx, ny, nz] = labels.dims();
    let dims = labels.dims();
    let fg: Vec<bool> = labels.labels().iter().map(|&l| l != BACKGROUND).collect();
    let tumor: Vec<bool> = labels.labels().iter().map(|&l| l == TUMOR).collect();
    let to_t = |b: bool| if b { T::ONE } else { T::ZERO };
    let data = inner_boundary(&fg, dims)
        .into_iter()
        .chain(inner_boundary(&tumor, dims))
        .map(to_t)
        .collect();
    Tensor::new(&[1, 2, nz, ny, nx], data).expect("label dims are non-zero")
}
