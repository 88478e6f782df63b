//! Soft dice, class-balanced boundary BCE, and their composition over both
//! output streams and both class channels.

use crate::autodiff::{Tape, Var};
use crate::boundary_net::{ForwardVars, OUTPUT_CHANNELS};
use crate::error::{contract, Result};
use crate::tensor::{Real, Tensor};

pub const DICE_EPS: f64 = 1e-5;
/// Probabilities are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]` before taking logs.
pub const LOG_CLAMP: f64 = 1e-7;

fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(contract(
            op,
            format!("prediction {:?} and target {:?} differ", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

/// `1 - 2 Σ(t·p) / (Σt² + Σp² + eps)`.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, eps: f64) -> Result<Var> {
    same_shape(tape, "dice_loss", pred, target)?;
    let tp = tape.mul(target, pred)?;
    let inter = tape.sum(tp);
    let tt = tape.mul(target, target)?;
    let st = tape.sum(tt);
    let pp = tape.mul(pred, pred)?;
    let sp = tape.sum(pp);
    let denom = tape.add(st, sp)?;
    let denom = tape.affine(denom, 1.0, eps);
    let ratio = tape.div(inter, denom)?;
    Ok(tape.affine(ratio, -2.0, 1.0))
}

/// Fraction of non-edge voxels.
pub fn edge_beta<T: Real>(edge_target: &Tensor<T>) -> Result<f64> {
    let n = edge_target.numel();
    if n == 0 {
        return Err(contract("edge_beta", "empty edge mask"));
    }
    let zeros = edge_target.data().iter().filter(|&&v| v == T::ZERO).count();
    Ok(zeros as f64 / n as f64)
}

/// `-β Σ_edge ln p - (1-β) Σ_non-edge ln(1-p)`, summed (not averaged) over voxels.
pub fn weighted_bce<T: Real>(tape: &mut Tape<T>, pred: Var, edge_target: Var) -> Result<Var> {
    same_shape(tape, "weighted_bce", pred, edge_target)?;
    let beta = edge_beta(tape.value(edge_target))?;
    let p = tape.clamp(pred, LOG_CLAMP, 1.0 - LOG_CLAMP);
    let log_p = tape.ln(p);
    let q = tape.affine(p, -1.0, 1.0);
    let log_q = tape.ln(q);
    let non_edge = tape.affine(edge_target, -1.0, 1.0);
    let pos = tape.mul(edge_target, log_p)?;
    let pos = tape.sum(pos);
    let neg = tape.mul(non_edge, log_q)?;
    let neg = tape.sum(neg);
    let pos = tape.affine(pos, -beta, 0.0);
    let neg = tape.affine(neg, beta - 1.0, 0.0);
    tape.add(pos, neg)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub dice_main_fg: f64,
    pub dice_main_tumor: f64,
    pub dice_boundary_fg: f64,
    pub dice_boundary_tumor: f64,
    pub bce_boundary_fg: f64,
    pub bce_boundary_tumor: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 7] = [
        "dice_main_fg",
        "dice_main_tumor",
        "dice_boundary_fg",
        "dice_boundary_tumor",
        "bce_boundary_fg",
        "bce_boundary_tumor",
        "total",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.dice_main_fg,
            self.dice_main_tumor,
            self.dice_boundary_fg,
            self.dice_boundary_tumor,
            self.bce_boundary_fg,
            self.bce_boundary_tumor,
            self.total,
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| *name)
    }

    /// Recompute `total` from the parts.
    pub fn recomposed_total(&self) -> f64 {
        let fg = self.dice_main_fg + self.dice_boundary_fg + self.bce_boundary_fg;
        let tumor = self.dice_main_tumor + self.dice_boundary_tumor + self.bce_boundary_tumor;
        (fg + tumor) / 2.0
    }
}

/// Per class channel `dice(seg) + dice(boundary) + wBCE(boundary)`, averaged over the two channels.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    seg_probs: Var,
    boundary_probs: Var,
    seg_targets: Var,
    edge_targets: Var,
    eps: f64,
) -> Result<(Var, LossBreakdown)> {
    for v in [seg_probs, boundary_probs, seg_targets, edge_targets] {
        let shape = tape.shape(v);
        if shape.len() != 5 || shape[1] != OUTPUT_CHANNELS {
            return Err(contract(
                "total_loss",
                format!("expected [N, 2, D, H, W] tensors, got {shape:?}"),
            ));
        }
    }
    let mut per_class = Vec::with_capacity(OUTPUT_CHANNELS);
    let mut terms = [[0.0f64; 3]; OUTPUT_CHANNELS];
    for (c, slot) in terms.iter_mut().enumerate() {
        let sp = tape.slice_channels(seg_probs, c, 1)?;
        let st = tape.slice_channels(seg_targets, c, 1)?;
        let bp = tape.slice_channels(boundary_probs, c, 1)?;
        let et = tape.slice_channels(edge_targets, c, 1)?;
        let d_main = dice_loss(tape, sp, st, eps)?;
        let d_edge = dice_loss(tape, bp, et, eps)?;
        let bce = weighted_bce(tape, bp, et)?;
        *slot = [d_main, d_edge, bce].map(|v| tape.value(v).item().to_f64());
        let s = tape.add(d_main, d_edge)?;
        per_class.push(tape.add(s, bce)?);
    }
    let sum = tape.add(per_class[0], per_class[1])?;
    let total = tape.affine(sum, 0.5, 0.0);
    let breakdown = LossBreakdown {
        dice_main_fg: terms[0][0],
        dice_main_tumor: terms[1][0],
        dice_boundary_fg: terms[0][1],
        dice_boundary_tumor: terms[1][1],
        bce_boundary_fg: terms[0][2],
        bce_boundary_tumor: terms[1][2],
        total: tape.value(total).item().to_f64(),
    };
    Ok((total, breakdown))
}

/// [`total_loss`] applied to the outputs of a network forward pass.
pub fn network_loss<T: Real>(
    tape: &mut Tape<T>,
    outputs: &ForwardVars,
    seg_targets: Var,
    edge_targets: Var,
    eps: f64,
) -> Result<(Var, LossBreakdown)> {
    total_loss(
        tape,
        outputs.seg_probs,
        outputs.boundary_probs,
        seg_targets,
        edge_targets,
        eps,
    )
}
