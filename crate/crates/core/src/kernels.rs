//! Slice-level forward/backward kernels.
//!
//! Work is split over independent output planes with rayon, and each output
//! element is accumulated by exactly one thread in a fixed order, so results
//! are bitwise identical for any thread count.

use rayon::prelude::*;

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }
    fn kernel_vol(&self) -> usize {
        self.kernel.iter().product()
    }
}

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output indices `o` in `[lo, hi)` for which `o * stride + offset` lands in `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

pub fn conv3d_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ivol, ovol, kvol) = (g.in_vol(), g.out_vol(), g.kernel_vol());
    let [_, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let (s, p) = (g.stride, g.pad as isize);
    let mut out = vec![T::ZERO; g.n * g.k * ovol];
    out.par_chunks_mut(ovol).enumerate().for_each(|(idx, plane)| {
        let (n, k) = (idx / g.k, idx % g.k);
        if let Some(b) = bias {
            plane.fill(b[k]);
        }
        for c in 0..g.c {
            let src = &input[(n * g.c + c) * ivol..(n * g.c + c + 1) * ivol];
            let wk = &weight[(k * g.c + c) * kvol..(k * g.c + c + 1) * kvol];
            for a in 0..kd {
                let (z0, z1) = valid_range(od, g.input[0], s, a as isize - p);
                for b in 0..kh {
                    let (y0, y1) = valid_range(oh, ih, s, b as isize - p);
                    for e in 0..kw {
                        let wv = wk[(a * kh + b) * kw + e];
                        let off = e as isize - p;
                        let (x0, x1) = valid_range(ow, iw, s, off);
                        for z in z0..z1 {
                            let zi = z * s + a - g.pad;
                            for y in y0..y1 {
                                let yi = y * s + b - g.pad;
                                let row_in = &src[(zi * ih + yi) * iw..(zi * ih + yi + 1) * iw];
                                let row_out = &mut plane[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                                if s == 1 {
                                    let shift = (x0 as isize + off) as usize;
                                    let span = x1 - x0;
                                    for (o, &i) in row_out[x0..x1]
                                        .iter_mut()
                                        .zip(&row_in[shift..shift + span])
                                    {
                                        *o += wv * i;
                                    }
                                } else {
                                    for x in x0..x1 {
                                        row_out[x] += wv * row_in[(x as isize * s as isize + off) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv3d_backward_input<T: Real>(g: &ConvGeom, grad_out: &[T], weight: &[T]) -> Vec<T> {
    let (ivol, ovol, kvol) = (g.in_vol(), g.out_vol(), g.kernel_vol());
    let [_, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let (s, p) = (g.stride, g.pad as isize);
    let mut gi = vec![T::ZERO; g.n * g.c * ivol];
    gi.par_chunks_mut(ivol).enumerate().for_each(|(idx, plane)| {
        let (n, c) = (idx / g.c, idx % g.c);
        for k in 0..g.k {
            let go = &grad_out[(n * g.k + k) * ovol..(n * g.k + k + 1) * ovol];
            let wk = &weight[(k * g.c + c) * kvol..(k * g.c + c + 1) * kvol];
            for a in 0..kd {
                let (z0, z1) = valid_range(od, g.input[0], s, a as isize - p);
                for b in 0..kh {
                    let (y0, y1) = valid_range(oh, ih, s, b as isize - p);
                    for e in 0..kw {
                        let wv = wk[(a * kh + b) * kw + e];
                        let off = e as isize - p;
                        let (x0, x1) = valid_range(ow, iw, s, off);
                        for z in z0..z1 {
                            let zi = z * s + a - g.pad;
                            for y in y0..y1 {
                                let yi = y * s + b - g.pad;
                                let row_go = &go[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                                let row_gi = &mut plane[(zi * ih + yi) * iw..(zi * ih + yi + 1) * iw];
                                if s == 1 {
                                    let shift = (x0 as isize + off) as usize;
                                    let span = x1 - x0;
                                    for (i, &o) in row_gi[shift..shift + span]
                                        .iter_mut()
                                        .zip(&row_go[x0..x1])
                                    {
                                        *i += wv * o;
                                    }
                                } else {
                                    for x in x0..x1 {
                                        row_gi[(x as isize * s as isize + off) as usize] += wv * row_go[x];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gi
}

pub fn conv3d_backward_weight<T: Real>(g: &ConvGeom, grad_out: &[T], input: &[T]) -> Vec<T> {
    let (ivol, ovol, kvol) = (g.in_vol(), g.out_vol(), g.kernel_vol());
    let [_, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let (s, p) = (g.stride, g.pad as isize);
    let mut gw = vec![T::ZERO; g.k * g.c * kvol];
    gw.par_chunks_mut(kvol).enumerate().for_each(|(idx, wk)| {
        let (k, c) = (idx / g.c, idx % g.c);
        for a in 0..kd {
            let (z0, z1) = valid_range(od, g.input[0], s, a as isize - p);
            for b in 0..kh {
                let (y0, y1) = valid_range(oh, ih, s, b as isize - p);
                for e in 0..kw {
                    let off = e as isize - p;
                    let (x0, x1) = valid_range(ow, iw, s, off);
                    let mut acc = T::ZERO;
                    for n in 0..g.n {
                        let go = &grad_out[(n * g.k + k) * ovol..(n * g.k + k + 1) * ovol];
                        let src = &input[(n * g.c + c) * ivol..(n * g.c + c + 1) * ivol];
                        for z in z0..z1 {
                            let zi = z * s + a - g.pad;
                            for y in y0..y1 {
                                let yi = y * s + b - g.pad;
                                let row_go = &go[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                                let row_in = &src[(zi * ih + yi) * iw..(zi * ih + yi + 1) * iw];
                                if s == 1 {
                                    let shift = (x0 as isize + off) as usize;
                                    let span = x1 - x0;
                                    acc += row_go[x0..x1]
                                        .iter()
                                        .zip(&row_in[shift..shift + span])
                                        .map(|(&o, &i)| o * i)
                                        .sum::<T>();
                                } else {
                                    for x in x0..x1 {
                                        acc += row_go[x] * row_in[(x as isize * s as isize + off) as usize];
                                    }
                                }
                            }
                        }
                    }
                    wk[(a * kh + b) * kw + e] = acc;
                }
            }
        }
    });
    gw
}

pub fn conv3d_backward_bias<T: Real>(g: &ConvGeom, grad_out: &[T]) -> Vec<T> {
    let ovol = g.out_vol();
    (0..g.k)
        .map(|k| {
            let mut acc = T::ZERO;
            for n in 0..g.n {
                acc += grad_out[(n * g.k + k) * ovol..(n * g.k + k + 1) * ovol]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
            acc
        })
        .collect()
}

/// Interpolation taps for doubling one axis under the align-corners-false mapping.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    w_lo: T,
    w_hi: T,
}

fn upsample_taps<T: Real>(n_in: usize) -> Vec<Tap<T>> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: T::of(1.0 - frac),
                w_hi: T::of(frac),
            }
        })
        .collect()
}

/// `planes` independent `[d, h, w]` planes, each doubled along every axis.
pub fn upsample2_forward<T: Real>(input: &[T], planes: usize, dims: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let (tz, ty, tx) = (upsample_taps::<T>(d), upsample_taps::<T>(h), upsample_taps::<T>(w));
    let ivol = d * h * w;
    let ovol = 8 * ivol;
    let mut out = vec![T::ZERO; planes * ovol];
    out.par_chunks_mut(ovol).enumerate().for_each(|(pl, dst)| {
        let src = &input[pl * ivol..(pl + 1) * ivol];
        let at = |z: usize, y: usize, x: usize| src[(z * h + y) * w + x];
        for (oz, az) in tz.iter().enumerate() {
            for (oy, ay) in ty.iter().enumerate() {
                for (ox, ax) in tx.iter().enumerate() {
                    let lo = az.w_lo
                        * (ay.w_lo * (ax.w_lo * at(az.lo, ay.lo, ax.lo) + ax.w_hi * at(az.lo, ay.lo, ax.hi))
                            + ay.w_hi * (ax.w_lo * at(az.lo, ay.hi, ax.lo) + ax.w_hi * at(az.lo, ay.hi, ax.hi)));
                    let hi = az.w_hi
                        * (ay.w_lo * (ax.w_lo * at(az.hi, ay.lo, ax.lo) + ax.w_hi * at(az.hi, ay.lo, ax.hi))
                            + ay.w_hi * (ax.w_lo * at(az.hi, ay.hi, ax.lo) + ax.w_hi * at(az.hi, ay.hi, ax.hi)));
                    dst[(oz * 2 * h + oy) * 2 * w + ox] = lo + hi;
                }
            }
        }
    });
    out
}

pub fn upsample2_backward<T: Real>(grad_out: &[T], planes: usize, dims: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let (tz, ty, tx) = (upsample_taps::<T>(d), upsample_taps::<T>(h), upsample_taps::<T>(w));
    let ivol = d * h * w;
    let ovol = 8 * ivol;
    let mut gi = vec![T::ZERO; planes * ivol];
    gi.par_chunks_mut(ivol).enumerate().for_each(|(pl, dst)| {
        let go = &grad_out[pl * ovol..(pl + 1) * ovol];
        for (oz, az) in tz.iter().enumerate() {
            for (oy, ay) in ty.iter().enumerate() {
                for (ox, ax) in tx.iter().enumerate() {
                    let gv = go[(oz * 2 * h + oy) * 2 * w + ox];
                    for (zi, wz) in [(az.lo, az.w_lo), (az.hi, az.w_hi)] {
                        for (yi, wy) in [(ay.lo, ay.w_lo), (ay.hi, ay.w_hi)] {
                            let gzy = gv * wz * wy;
                            let row = (zi * h + yi) * w;
                            dst[row + ax.lo] += gzy * ax.w_lo;
                            dst[row + ax.hi] += gzy * ax.w_hi;
                        }
                    }
                }
            }
        }
    });
    gi
}

/// Per `(sample, group)` statistics saved for the backward pass.
#[derive(Clone, Debug)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm_forward<T: Real>(
    input: &[T],
    n: usize,
    c: usize,
    vol: usize,
    groups: usize,
    gain: &[T],
    bias: &[T],
    eps: f64,
) -> (Vec<T>, GroupStats<T>) {
    let cg = c / groups;
    let block = cg * vol;
    let stats: Vec<(T, T)> = input
        .par_chunks(block)
        .map(|xs| {
            let m = xs.len() as f64;
            let mean = xs.iter().map(|v| v.to_f64()).sum::<f64>() / m;
            let var = xs.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / m;
            (T::of(mean), T::of(1.0 / (var + eps).sqrt()))
        })
        .collect();
    let mut out = vec![T::ZERO; n * c * vol];
    out.par_chunks_mut(vol).enumerate().for_each(|(idx, plane)| {
        let ch = idx % c;
        let (mean, rstd) = stats[(idx / c) * groups + ch / cg];
        let (gm, bs) = (gain[ch], bias[ch]);
        for (o, &x) in plane.iter_mut().zip(&input[idx * vol..(idx + 1) * vol]) {
            *o = (x - mean) * rstd * gm + bs;
        }
    });
    let (mean, rstd) = stats.into_iter().unzip();
    (out, GroupStats { mean, rstd })
}

/// Returns `(grad_input, grad_gain, grad_bias)`.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    grad_out: &[T],
    input: &[T],
    n: usize,
    c: usize,
    vol: usize,
    groups: usize,
    gain: &[T],
    stats: &GroupStats<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let block = cg * vol;
    let mut gi = vec![T::ZERO; n * c * vol];
    gi.par_chunks_mut(block).enumerate().for_each(|(ng, dst)| {
        let g = ng % groups;
        let (mean, rstd) = (stats.mean[ng], stats.rstd[ng]);
        let xs = &input[ng * block..(ng + 1) * block];
        let gs = &grad_out[ng * block..(ng + 1) * block];
        let mut sum_dxhat = T::ZERO;
        let mut sum_dxhat_xhat = T::ZERO;
        for (i, (&x, &gy)) in xs.iter().zip(gs).enumerate() {
            let dxhat = gy * gain[g * cg + i / vol];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * (x - mean) * rstd;
        }
        let m = T::of(block as f64);
        let (mean_d, mean_dx) = (sum_dxhat / m, sum_dxhat_xhat / m);
        for (i, (o, (&x, &gy))) in dst.iter_mut().zip(xs.iter().zip(gs)).enumerate() {
            let xhat = (x - mean) * rstd;
            let dxhat = gy * gain[g * cg + i / vol];
            *o = rstd * (dxhat - mean_d - xhat * mean_dx);
        }
    });
    let mut ggain = vec![T::ZERO; c];
    let mut gbias = vec![T::ZERO; c];
    for b in 0..n {
        for ch in 0..c {
            let idx = b * c + ch;
            let ng = b * groups + ch / cg;
            let (mean, rstd) = (stats.mean[ng], stats.rstd[ng]);
            let xs = &input[idx * vol..(idx + 1) * vol];
            let gs = &grad_out[idx * vol..(idx + 1) * vol];
            ggain[ch] += xs.iter().zip(gs).map(|(&x, &gy)| gy * (x - mean) * rstd).sum::<T>();
            gbias[ch] += gs.iter().copied().sum::<T>();
        }
    }
    (gi, ggain, gbias)
}
