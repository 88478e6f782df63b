//! Central finite-difference verification of tape gradients.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Activation, Elementwise, Tape, Var};
use crate::boundary_net::{BoundaryAwareNet, NetworkConfig};
use crate::data::{extract_boundary_targets, LabelVolume};
use crate::layers::Bound;
use crate::losses::network_loss;
use crate::error::{contract, Result};
use crate::tensor::{Real, Tensor};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Check at most this many coordinates per input, sampled without replacement.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    /// Multiplier applied to the tape gradient before comparison (1.0 for a real check).
    pub analytic_scale: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_coords_per_input: None,
            seed: 0,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    /// Coordinates left unchecked because every tried step crossed a ReLU or clamp kink.
    pub kinks_skipped: usize,
}

/// Each retry after a kink crossing divides the step by this.
const KINK_STEP_SHRINK: f64 = 10.0;
const KINK_RETRIES: usize = 2;

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(RELATIVE_FLOOR)
}

impl GradCheck {
    pub fn with_eps(eps: f64) -> Self {
        Self {
            eps,
            ..Self::default()
        }
    }

    fn eval<T, F>(graph: &F, inputs: &[Tensor<T>]) -> Result<(f64, Vec<bool>)>
    where
        T: Real,
        F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = graph(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(contract("finite_diff_check", "graph output is not scalar"));
        }
        Ok((v.item().to_f64(), tape.branch_pattern()))
    }

    /// Central difference at one coordinate, shrinking the step while `x ± h`
    /// straddles a kink. `None` if every step tried straddles one.
    fn central_difference<T, F>(
        &self,
        graph: &F,
        perturbed: &mut [Tensor<T>],
        (ii, j): (usize, usize),
        base_pattern: &[bool],
    ) -> Result<Option<f64>>
    where
        T: Real,
        F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    {
        let x0 = perturbed[ii].data()[j];
        let mut h = self.eps;
        for _ in 0..=KINK_RETRIES {
            perturbed[ii].data_mut()[j] = x0 + T::of(h);
            let (fp, pp) = Self::eval(graph, perturbed)?;
            perturbed[ii].data_mut()[j] = x0 - T::of(h);
            let (fm, pm) = Self::eval(graph, perturbed)?;
            perturbed[ii].data_mut()[j] = x0;
            if pp == base_pattern && pm == base_pattern {
                // Divide by the realised step, which differs from 2h at 32-bit.
                let step = (x0 + T::of(h)).to_f64() - (x0 - T::of(h)).to_f64();
                return Ok(Some((fp - fm) / step));
            }
            h /= KINK_STEP_SHRINK;
        }
        Ok(None)
    }

    /// Compare tape gradients of `graph` against central differences at every
    /// (or a sampled subset of) input coordinate.
    pub fn run<T, F>(&self, graph: F, inputs: &[Tensor<T>]) -> Result<GradCheckReport>
    where
        T: Real,
        F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = graph(&mut tape, &vars)?;
        tape.backward(out)?;
        let analytic: Vec<Vec<T>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![T::ZERO; t.numel()], <[T]>::to_vec))
            .collect();
        drop(tape);

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (_, base_pattern) = Self::eval(&graph, inputs)?;
        let mut perturbed: Vec<Tensor<T>> = inputs.to_vec();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            coords_checked: 0,
            kinks_skipped: 0,
        };
        for (ii, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let coords: Vec<usize> = match self.max_coords_per_input {
                Some(m) if m < n => {
                    let mut c = index::sample(&mut rng, n, m).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..n).collect(),
            };
            for j in coords {
                let Some(numeric) = self.central_difference(&graph, &mut perturbed, (ii, j), &base_pattern)? else {
                    report.kinks_skipped += 1;
                    continue;
                };
                let a = analytic[ii][j].to_f64() * self.analytic_scale;
                let err = relative_error(a, numeric);
                report.coords_checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = Some((ii, j));
                }
            }
        }
        Ok(report)
    }
}

/// Worst relative error between tape and central-difference gradients over all inputs.
pub fn finite_diff_check<T, F>(graph: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    Ok(GradCheck::with_eps(eps).run(graph, inputs)?.max_rel_error)
}

/// Worst error seen for one operation across all seeds of [`run_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub kinks_skipped: usize,
}

type Graph<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;
type SuiteCase<T> = (&'static str, Graph<T>, Vec<Tensor<T>>);

fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64, offset: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(offset + scale * z)
    })
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
}

/// `Σ w ⊙ y` with fixed random `w`, so every output element carries a distinct weight.
fn project<T: Real>(tape: &mut Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = tape.constant(normal(&mut rng, tape.shape(y), 1.0, 0.0));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> LabelVolume {
    let labels = (0..n * n * n).map(|_| rng.random_range(0..3u8)).collect();
    LabelVolume::new([n; 3], [1.0; 3], labels).expect("valid labels")
}

/// One randomised instance of every checked operation for `seed`.
fn suite_cases<T: Real + 'static>(seed: u64) -> Result<Vec<SuiteCase<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let s3 = [1, 2, 3, 3, 3];
    let mut cases: Vec<SuiteCase<T>> = Vec::new();
    let binary = |kind: Elementwise| -> Graph<T> {
        Box::new(move |t, v| {
            let y = t.elementwise(kind, v[0], v[1])?;
            project(t, y, seed)
        })
    };
    cases.push(("add", binary(Elementwise::Add), vec![normal(r, &s3, 1.0, 0.0), normal(r, &s3, 1.0, 0.0)]));
    cases.push(("sub", binary(Elementwise::Sub), vec![normal(r, &s3, 1.0, 0.0), normal(r, &s3, 1.0, 0.0)]));
    cases.push(("mul", binary(Elementwise::Mul), vec![normal(r, &[2, 2, 2], 1.0, 0.0), normal(r, &[2, 2, 2], 1.0, 0.0)]));
    cases.push(("div", binary(Elementwise::Div), vec![normal(r, &s3, 1.0, 0.0), uniform(r, &s3, 0.5, 2.0)]));
    cases.push((
        "affine",
        Box::new(move |t, v| {
            let y = t.affine(v[0], -1.7, 0.3);
            project(t, y, seed)
        }),
        vec![normal(r, &s3, 1.0, 0.0)],
    ));
    for (name, kind) in [("relu", Activation::Relu), ("sigmoid", Activation::Sigmoid)] {
        cases.push((
            name,
            Box::new(move |t, v| {
                let y = t.activation(kind, v[0]);
                project(t, y, seed)
            }),
            vec![normal(r, &s3, 2.0, 0.0)],
        ));
    }
    cases.push((
        "ln",
        Box::new(move |t, v| {
            let y = t.ln(v[0]);
            project(t, y, seed)
        }),
        vec![uniform(r, &s3, 0.2, 3.0)],
    ));
    cases.push((
        "clamp",
        Box::new(move |t, v| {
            let y = t.clamp(v[0], -0.5, 0.5);
            project(t, y, seed)
        }),
        vec![normal(r, &s3, 1.0, 0.0)],
    ));
    cases.push((
        "sum",
        Box::new(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        }),
        vec![normal(r, &s3, 1.0, 0.0)],
    ));
    for (name, stride) in [("conv3d", 1), ("conv3d_strided", 2)] {
        cases.push((
            name,
            Box::new(move |t, v| {
                let y = t.conv3d(v[0], v[1], Some(v[2]), stride, 1)?;
                project(t, y, seed)
            }),
            vec![normal(r, &[1, 2, 5, 5, 5], 1.0, 0.0), normal(r, &[3, 2, 3, 3, 3], 0.3, 0.0), normal(r, &[3], 1.0, 0.0)],
        ));
    }
    cases.push((
        "trilinear_upsample",
        Box::new(move |t, v| {
            let y = t.trilinear_upsample(v[0], 2)?;
            project(t, y, seed)
        }),
        vec![normal(r, &[1, 2, 2, 3, 2], 1.0, 0.0)],
    ));
    cases.push((
        "concat_slice",
        Box::new(move |t, v| {
            let c = t.concat_channels(v[0], v[1])?;
            let s = t.slice_channels(c, 1, 2)?;
            project(t, s, seed)
        }),
        vec![normal(r, &s3, 1.0, 0.0), normal(r, &[1, 1, 3, 3, 3], 1.0, 0.0)],
    ));
    cases.push((
        "mul_channel_map",
        Box::new(move |t, v| {
            let y = t.mul_channel_map(v[0], v[1])?;
            project(t, y, seed)
        }),
        vec![normal(r, &s3, 1.0, 0.0), normal(r, &[1, 1, 3, 3, 3], 1.0, 0.0)],
    ));
    cases.push((
        "group_norm",
        Box::new(move |t, v| {
            let y = t.group_norm(v[0], 2, v[1], v[2], 1e-5)?;
            project(t, y, seed)
        }),
        vec![normal(r, &[2, 4, 2, 3, 2], 1.0, 0.5), normal(r, &[4], 0.5, 1.0), normal(r, &[4], 0.5, 0.0)],
    ));
    let target = uniform::<T>(r, &[4, 4, 4], 0.0, 1.0).into_data();
    let target: Vec<T> = target.into_iter().map(|x| if x.to_f64() < 0.3 { T::ONE } else { T::ZERO }).collect();
    let target = Tensor::new(&[4, 4, 4], target)?;
    let dice_target = target.clone();
    cases.push((
        "dice_loss",
        Box::new(move |t, v| {
            let tv = t.constant(dice_target.clone());
            crate::losses::dice_loss(t, v[0], tv, crate::losses::DICE_EPS)
        }),
        vec![uniform(r, &[4, 4, 4], 0.05, 0.95)],
    ));
    cases.push((
        "weighted_bce",
        Box::new(move |t, v| {
            let tv = t.constant(target.clone());
            crate::losses::weighted_bce(t, v[0], tv)
        }),
        vec![uniform(r, &[4, 4, 4], 0.05, 0.95)],
    ));

    let cfg = NetworkConfig {
        input_size: 8,
        base_filters: 2,
        levels: 1,
        bottleneck_blocks: 1,
    };
    let net = BoundaryAwareNet::<T>::build(cfg, seed)?;
    let labels = random_labels(r, 8);
    let seg_t: Tensor<T> = labels.class_targets();
    let edge_t: Tensor<T> = extract_boundary_targets(&labels);
    let mut inputs = vec![normal(r, &[1, 1, 8, 8, 8], 0.5, 0.0)];
    inputs.extend(net.params().tensors().iter().cloned());
    cases.push((
        "network_total_loss",
        Box::new(move |t, v| {
            let bound = Bound::from_vars(v[1..].to_vec());
            let out = net.forward(t, &bound, v[0])?;
            let (st, et) = (t.constant(seg_t.clone()), t.constant(edge_t.clone()));
            Ok(network_loss(t, &out, st, et, crate::losses::DICE_EPS)?.0)
        }),
        inputs,
    ));
    Ok(cases)
}

/// Check every differentiable operation, the losses and the end-to-end network
/// loss (8³ input, one level) for each seed. At most `max_coords` coordinates
/// per input tensor are compared.
pub fn run_suite<T: Real + 'static>(seeds: std::ops::Range<u64>, eps: f64, max_coords: usize) -> Result<Vec<SuiteEntry>> {
    let mut entries: Vec<SuiteEntry> = Vec::new();
    for seed in seeds {
        for (op, graph, inputs) in suite_cases::<T>(seed)? {
            let check = GradCheck {
                eps,
                max_coords_per_input: Some(max_coords),
                seed,
                analytic_scale: 1.0,
            };
            let report = check.run(graph, &inputs)?;
            match entries.iter_mut().find(|e| e.op == op) {
                Some(e) => {
                    e.max_rel_error = e.max_rel_error.max(report.max_rel_error);
                    e.coords_checked += report.coords_checked;
                    e.kinks_skipped += report.kinks_skipped;
                }
                None => entries.push(SuiteEntry {
                    op,
                    max_rel_error: report.max_rel_error,
                    coords_checked: report.coords_checked,
                    kinks_skipped: report.kinks_skipped,
                }),
            }
        }
    }
    Ok(entries)
}
