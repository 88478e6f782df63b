//! Axis-aligned slice rendering with label contours.

use bseg::data::volume::INTENSITY_SCALE;
use bseg::data::{LabelVolume, Volume, KIDNEY, TUMOR};
use image::{Rgb, RgbImage};

use crate::Axis;

const KIDNEY_RGB: [u8; 3] = [40, 220, 60];
const TUMOR_RGB: [u8; 3] = [230, 40, 40];

/// Image width, height, and the volume voxel behind pixel `(u, v)`.
fn slice_geometry(dims: [usize; 3], axis: Axis, index: usize) -> (usize, usize, impl Fn(usize, usize) -> [usize; 3]) {
    let [nx, ny, nz] = dims;
    let (w, h) = match axis {
        Axis::Z => (nx, ny),
        Axis::Y => (nx, nz),
        Axis::X => (ny, nz),
    };
    let voxel = move |u: usize, v: usize| match axis {
        Axis::Z => [u, v, index],
        Axis::Y => [u, index, v],
        Axis::X => [index, u, v],
    };
    (w, h, voxel)
}

pub fn axis_extent(dims: [usize; 3], axis: Axis) -> usize {
    match axis {
        Axis::X => dims[0],
        Axis::Y => dims[1],
        Axis::Z => dims[2],
    }
}

/// Map raw HU or normalised intensities onto 0..=255 over [-1000, 1000] HU.
fn gray(value: f32, normalized: bool) -> u8 {
    let v = if normalized { value } else { value / INTENSITY_SCALE };
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn render_slice(volume: &Volume, labels: Option<&LabelVolume>, axis: Axis, index: usize) -> RgbImage {
    let (w, h, voxel) = slice_geometry(volume.dims(), axis, index);
    let mut img = RgbImage::new(w as u32, h as u32);
    for v in 0..h {
        for u in 0..w {
            let [x, y, z] = voxel(u, v);
            let g = gray(volume.at(x, y, z), volume.is_normalized());
            img.put_pixel(u as u32, v as u32, Rgb([g, g, g]));
        }
    }
    let Some(labels) = labels else { return img };
    let label = |u: isize, v: isize| -> Option<u8> {
        if u < 0 || v < 0 || u as usize >= w || v as usize >= h {
            return None;
        }
        let [x, y, z] = voxel(u as usize, v as usize);
        Some(labels.at(x, y, z))
    };
    for v in 0..h as isize {
        for u in 0..w as isize {
            let l = label(u, v).unwrap_or_default();
            if l != KIDNEY && l != TUMOR {
                continue;
            }
            let on_contour = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|(du, dv)| label(u + du, v + dv) != Some(l));
            if on_contour {
                let rgb = if l == TUMOR { TUMOR_RGB } else { KIDNEY_RGB };
                img.put_pixel(u as u32, v as u32, Rgb(rgb));
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_mapping_saturates() {
        assert_eq!(gray(-5000.0, false), 0);
        assert_eq!(gray(5000.0, false), 255);
        assert_eq!(gray(0.0, true), 128);
    }

    #[test]
    fn square_contour_has_perimeter_pixels() {
        let vol = Volume::new([6, 6, 1], [1.0; 3], vec![0.0; 36]).unwrap();
        let mut l = vec![0u8; 36];
        for y in 1..5 {
            for x in 1..5 {
                l[x + 6 * y] = KIDNEY;
            }
        }
        let labels = LabelVolume::new([6, 6, 1], [1.0; 3], l).unwrap();
        let img = render_slice(&vol, Some(&labels), Axis::Z, 0);
        let coloured = img.pixels().filter(|p| p.0 == KIDNEY_RGB).count();
        assert_eq!(coloured, 16 - 4);
    }
}
