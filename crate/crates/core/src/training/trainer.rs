use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::boundary_net::BoundaryAwareNet;
use crate::data::sampler::CropSource;
use crate::error::{Error, Result};
use crate::losses::{network_loss, LossBreakdown};
use crate::tensor::Tensor;
use crate::training::checkpoint::{save_checkpoint, Checkpoint, RngState};
use crate::training::{adam_step, lr_at, AdamState, TrainConfig};

pub const LOG_HEADER: &str = "step,epoch,lr,dice_main_fg,dice_main_tumor,dice_boundary_fg,dice_boundary_tumor,bce_boundary_fg,bce_boundary_tumor,total";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// Zero-based index of the step this row describes.
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{},{}", self.step, self.epoch, self.lr);
        for v in self.loss.values() {
            row.push(',');
            row.push_str(&v.to_string());
        }
        row
    }
}

/// Owns the network parameters and optimiser state for one training run.
pub struct Trainer<S> {
    cfg: TrainConfig,
    net: BoundaryAwareNet<f32>,
    adam: AdamState<f32>,
    sampler: S,
    step: u64,
}

impl<S: CropSource> Trainer<S> {
    pub fn new(cfg: TrainConfig, net: BoundaryAwareNet<f32>, sampler: S) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(net.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Ok(Self {
            cfg,
            net,
            adam,
            sampler,
            step: 0,
        })
    }

    /// Continue exactly where `ck` left off.
    pub fn from_checkpoint(ck: &Checkpoint, mut sampler: S) -> Result<Self> {
        ck.train.validate()?;
        let net = ck.network()?;
        sampler.set_rng(ck.rng.restore());
        Ok(Self {
            cfg: ck.train.clone(),
            net,
            adam: ck.adam.clone(),
            sampler,
            step: ck.step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn network(&self) -> &BoundaryAwareNet<f32> {
        &self.net
    }

    pub fn into_network(self) -> BoundaryAwareNet<f32> {
        self.net
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.total_steps()
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.cfg.steps_per_epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: *self.net.config(),
            train: self.cfg.clone(),
            params: self.net.params().clone(),
            adam: self.adam.clone(),
            step: self.step,
            epoch: self.epoch(),
            rng: RngState::capture(self.sampler.rng()),
        }
    }

    /// Sample a batch, run forward/backward and apply one Adam update at the current epoch's rate.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let epoch = self.epoch();
        let lr = lr_at(epoch.min(self.cfg.total_epochs), &self.cfg)?;
        let crops = (0..self.cfg.batch_size)
            .map(|_| self.sampler.next_crop())
            .collect::<Result<Vec<_>>>()?;
        let stack = |f: fn(&crate::data::CropSample) -> &Tensor<f32>| {
            Tensor::stack_batch(&crops.iter().map(f).collect::<Vec<_>>())
        };
        let image = stack(|c| &c.image)?;
        let seg = stack(|c| &c.seg_targets)?;
        let edges = stack(|c| &c.edge_targets)?;

        let mut tape = Tape::new();
        let bound = self.net.params().bind(&mut tape);
        let x = tape.constant(image);
        let out = self.net.forward(&mut tape, &bound, x)?;
        let seg = tape.constant(seg);
        let edges = tape.constant(edges);
        let (loss, breakdown) = network_loss(&mut tape, &out, seg, edges, self.cfg.dice_eps)?;
        if let Some(term) = breakdown.first_non_finite() {
            return Err(Error::NonFiniteLoss { term, step: self.step });
        }
        tape.backward(loss)?;
        let grads = bound.vars().iter().map(|&v| tape.take_grad(v)).collect();
        drop(tape);
        adam_step(self.net.params_mut(), grads, &mut self.adam, lr)?;

        let log = StepLog {
            step: self.step,
            epoch,
            lr,
            loss: breakdown,
        };
        self.step += 1;
        Ok(log)
    }

    /// Train up to `until_step` (capped at the configured total), appending rows to
    /// `log` and writing a checkpoint into `checkpoint_dir` at every epoch boundary.
    pub fn run_until<W: Write>(
        &mut self,
        until_step: u64,
        log: &mut W,
        checkpoint_dir: Option<&Path>,
    ) -> Result<Vec<StepLog>> {
        let until = until_step.min(self.cfg.total_steps());
        let mut rows = Vec::new();
        while self.step < until {
            let row = self.train_step()?;
            writeln!(log, "{}", row.csv_row())?;
            rows.push(row);
            if self.step.is_multiple_of(self.cfg.steps_per_epoch) {
                if let Some(dir) = checkpoint_dir {
                    let ck = self.checkpoint();
                    save_checkpoint(epoch_checkpoint_path(dir, self.epoch()), &ck)?;
                    save_checkpoint(dir.join("latest.mckp"), &ck)?;
                }
            }
        }
        log.flush()?;
        Ok(rows)
    }
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.mckp"))
}

/// Train from scratch to completion. Writes `train_log.csv` and per-epoch
/// checkpoints under `checkpoint_dir`; returns the final checkpoint and the log rows.
pub fn run_training<S: CropSource>(
    cfg: TrainConfig,
    net: BoundaryAwareNet<f32>,
    sampler: S,
    checkpoint_dir: &Path,
) -> Result<(Checkpoint, Vec<StepLog>)> {
    fs::create_dir_all(checkpoint_dir)?;
    let mut trainer = Trainer::new(cfg, net, sampler)?;
    let mut log = BufWriter::new(File::create(checkpoint_dir.join(LOG_FILE))?);
    writeln!(log, "{LOG_HEADER}")?;
    let total = trainer.config().total_steps();
    let rows = trainer.run_until(total, &mut log, Some(checkpoint_dir))?;
    Ok((trainer.checkpoint(), rows))
}

/// Continue a run from `ck`, appending to the existing log in `checkpoint_dir`.
pub fn resume_training<S: CropSource>(
    ck: &Checkpoint,
    sampler: S,
    checkpoint_dir: &Path,
) -> Result<(Checkpoint, Vec<StepLog>)> {
    fs::create_dir_all(checkpoint_dir)?;
    let mut trainer = Trainer::from_checkpoint(ck, sampler)?;
    let path = checkpoint_dir.join(LOG_FILE);
    let fresh = !path.exists();
    let mut log = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    if fresh {
        writeln!(log, "{LOG_HEADER}")?;
    }
    let total = trainer.config().total_steps();
    let rows = trainer.run_until(total, &mut log, Some(checkpoint_dir))?;
    Ok((trainer.checkpoint(), rows))
}
