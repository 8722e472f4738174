//! Episodic training: batches of episode gradients averaged into one SGD step.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{Sgd, SgdConfig};
use crate::episodes::{sample_episode, Dataset, Phase};
use crate::error::{HseError, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::hse::{FeatureBank, HseModel};
use crate::numerics::Tensor;
use crate::params::ParamId;
use crate::semantics::EmbeddingTable;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr · (1 − step/total)^power`.
    Poly { power: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    /// Episodes averaged per update.
    pub batch_size: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub fold: usize,
    pub shots: usize,
    /// Keys the training episode stream.
    pub seed: u64,
    /// Compare frozen parameters against a snapshot after every epoch.
    pub check_frozen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgd: SgdConfig::default(),
            schedule: LrSchedule::Constant,
            batch_size: 4,
            epochs: 20,
            episodes_per_epoch: 200,
            fold: 0,
            shots: 1,
            seed: 0,
            check_frozen: cfg!(debug_assertions),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.batch_size == 0 || self.shots == 0 {
            return Err(HseError::Config(
                "batch size and shot count must be positive".into(),
            ));
        }
        if let LrSchedule::Poly { power } = self.schedule {
            if !(power > 0.0 && power.is_finite()) {
                return Err(HseError::Config(format!(
                    "poly power must be positive, got {power}"
                )));
            }
        }
        Ok(())
    }

    fn updates_per_epoch(&self) -> usize {
        self.episodes_per_epoch.div_ceil(self.batch_size)
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.sgd.lr,
            LrSchedule::Poly { power } => {
                let total = (self.epochs * self.updates_per_epoch()).max(1) as f64;
                self.sgd.lr * (1.0 - step as f64 / total).max(0.0).powf(power)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub loss_curve: Vec<EpochStats>,
    pub warnings: Vec<String>,
}

fn frozen_snapshot(model: &HseModel<f32>) -> Vec<(ParamId, Tensor<f32>)> {
    model
        .store()
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(id, p)| (id, p.value.clone()))
        .collect()
}

/// Trains `model` in place on the non-held-out classes of `cfg.fold`.
/// `on_epoch` sees each epoch's statistics as they are produced.
pub fn train(
    model: &mut HseModel<f32>,
    dataset: &Dataset,
    embeddings: &EmbeddingTable,
    cfg: &TrainConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let frozen = cfg.check_frozen.then(|| frozen_snapshot(model));
    let bank = FeatureBank::new();
    let mut opt = Sgd::new(cfg.sgd);
    let mut outcome = TrainOutcome::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut lr = cfg.sgd.lr;
        let first = (epoch * cfg.episodes_per_epoch) as u64;
        for start in (0..cfg.episodes_per_epoch).step_by(cfg.batch_size) {
            let n = cfg.batch_size.min(cfg.episodes_per_epoch - start);
            let snapshot: &HseModel<f32> = model;
            let results = try_map_indexed(exec, n, |j| {
                let index = first + (start + j) as u64;
                let ep =
                    sample_episode(dataset, cfg.fold, Phase::Train, cfg.shots, cfg.seed, index)?;
                let (loss, grads) = snapshot.episode_gradients(&ep, embeddings, Some(&bank))?;
                if !loss.is_finite() {
                    return Err(HseError::Divergence {
                        epoch,
                        detail: format!("loss {loss} on training episode {index} ({})", ep.class),
                    });
                }
                Ok((loss, grads))
            })?;
            let scale = 1.0 / n as f32;
            let mut batch_grads: Vec<Option<Tensor<f32>>> = vec![None; model.store().len()];
            for (loss, grads) in results {
                loss_sum += loss;
                for (acc, g) in batch_grads.iter_mut().zip(grads) {
                    let Some(g) = g else { continue };
                    match acc {
                        Some(a) => a
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(x, &y)| *x += y),
                        None => *acc = Some(g),
                    }
                }
            }
            for g in batch_grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            lr = cfg.lr_at(step);
            opt.step(model.store_mut(), &batch_grads, lr)?;
            step += 1;
        }
        if let Some((id, p)) = model.store().iter().find(|(_, p)| !p.value.is_finite()) {
            return Err(HseError::Divergence {
                epoch,
                detail: format!("parameter {} (#{}) became non-finite", p.name, id.index()),
            });
        }
        if let Some(snap) = &frozen {
            for (id, value) in snap {
                if model.store().value(*id) != value {
                    return Err(HseError::Evaluation(format!(
                        "frozen parameter {} changed during epoch {epoch}",
                        model.store().get(*id).name
                    )));
                }
            }
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / cfg.episodes_per_epoch.max(1) as f64,
            lr,
        };
        on_epoch(&stats);
        outcome.loss_curve.push(stats);
    }
    Ok(outcome)
}

/// `epoch,mean_loss,lr` rows.
pub fn write_loss_curve(path: &Path, curve: &[EpochStats]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "epoch,mean_loss,lr").expect("writing to a Vec");
    for s in curve {
        writeln!(out, "{},{},{}", s.epoch, s.mean_loss, s.lr).expect("writing to a Vec");
    }
    std::fs::write(path, out).map_err(|e| HseError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_decays_to_zero() {
        let cfg = TrainConfig {
            schedule: LrSchedule::Poly { power: 0.9 },
            epochs: 2,
            episodes_per_epoch: 8,
            batch_size: 4,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), cfg.sgd.lr);
        assert!(cfg.lr_at(2) < cfg.sgd.lr);
        assert_eq!(cfg.lr_at(4), 0.0);
    }

    #[test]
    fn invalid_momentum_is_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.sgd.momentum = 1.0;
        assert!(matches!(cfg.validate(), Err(HseError::Config(_))));
    }
}
