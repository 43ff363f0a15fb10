//! Joint end-to-end optimization of the regression and decoupling losses.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::dataset::{assemble_batch, Batch, Sample};
use crate::error::{config, Error, Result};
use crate::graph::{Graph, Mode};
use crate::model::HdNet;
use crate::objective::{evaluate, EvalRecord, ImageRecord, LossBreakdown};
use crate::optim::{Sgd, SgdConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Reshuffle the training order every epoch (seeded).
    pub shuffle: bool,
    pub horizontal_flip: bool,
    /// Images whose longer side exceeds this are downscaled when loaded from disk.
    pub resize_longer_side: Option<usize>,
    /// Data preparation workers; 1 keeps runs bit-reproducible.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            weight_decay: 0.0005,
            momentum: 0.9,
            batch_size: 4,
            epochs: 20,
            seed: 0,
            shuffle: true,
            horizontal_flip: false,
            resize_longer_side: Some(64),
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(config("learning_rate", "must be non-negative and finite"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(config("weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config("momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(config("batch_size", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(config("workers", "must be at least 1"));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, momentum: self.momentum }
    }
}

/// Per-epoch summary; losses are means over the epoch's batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub l_reg: f64,
    pub l_dec: f64,
    pub total: f64,
    pub val_mae: Option<f64>,
    pub val_mse: Option<f64>,
    /// Norm of the regression-loss gradient on the decoupling-head parameters,
    /// probed on the epoch's first batch.
    pub ddm_reg_grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub running: LossBreakdown,
    pub best_val_mae: Option<f64>,
    /// Epoch whose parameters the checkpoint holds.
    pub checkpoint_epoch: Option<usize>,
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation MAE (the last epoch
    /// when there is no validation set), rounded to `f32` precision.
    pub checkpoint: HdNet,
    /// Parameters after the final step.
    pub last: HdNet,
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
}

/// Counts of `model` on `samples`, batched.
pub fn evaluate_model(model: &HdNet, samples: &[Sample], batch_size: usize) -> Result<EvalRecord> {
    let multiple = model.config().input_multiple();
    let mut records = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = assemble_batch(&refs, multiple, None)?;
        let counts = model.predict_counts(&batch)?;
        for (s, c) in chunk.iter().zip(counts) {
            records.push(ImageRecord { image_id: s.id.clone(), gt_count: s.gt_count, predicted_count: c });
        }
    }
    evaluate(records)
}

/// `|| d L_reg / d theta ||` over the decoupling-head parameters.
pub fn ddm_reg_grad_norm(model: &HdNet, batch: &Batch, mode: Mode) -> Result<f64> {
    let mut g = Graph::new();
    let pass = model.forward(&mut g, batch.images.clone(), mode)?;
    let losses = model.losses(&mut g, &pass, batch);
    let grads = g.backward(losses.reg);
    let sq: f64 = grads
        .params(&g)
        .filter(|(id, _)| model.store.get(*id).name.starts_with(HdNet::DDM_PREFIX))
        .fold(0.0, |acc, (_, t)| acc + t.squared_norm());
    Ok(libm::sqrt(sq))
}

fn checkpoint_copy(model: &HdNet) -> HdNet {
    let mut copy = model.clone();
    copy.store.round_to_f32();
    copy
}

pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model_config.validate()?;
    train_config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if let Some(s) = train_set.iter().chain(val_set).find(|s| s.labels.num_levels != model_config.num_levels) {
        return Err(config(
            "num_levels",
            alloc::format!(
                "sample {} has {} density levels, the model has {}",
                s.id,
                s.labels.num_levels,
                model_config.num_levels
            ),
        ));
    }
    let mut model = HdNet::new(model_config.clone(), train_config.seed)?;
    let mut opt = Sgd::new(train_config.sgd());
    let mut data_rng = ChaCha8Rng::seed_from_u64(train_config.seed ^ 0xda7a_0de5);
    let multiple = model_config.input_multiple();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut state = TrainState::default();
    let mut history = Vec::with_capacity(train_config.epochs);
    let mut checkpoint = None;

    for epoch in 1..=train_config.epochs {
        if train_config.shuffle {
            order.shuffle(&mut data_rng);
        }
        let (mut reg_sum, mut dec_sum, mut tot_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        let mut probe = 0.0;
        for (bi, chunk) in order.chunks(train_config.batch_size).enumerate() {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let flips: Option<Vec<bool>> =
                train_config.horizontal_flip.then(|| refs.iter().map(|_| data_rng.random_bool(0.5)).collect());
            let batch = assemble_batch(&refs, multiple, flips.as_deref())?;
            if bi == 0 {
                probe = ddm_reg_grad_norm(&model, &batch, Mode::Train)?;
            }
            let mut g = Graph::new();
            let pass = model.forward(&mut g, batch.images.clone(), Mode::Train)?;
            let losses = model.losses(&mut g, &pass, &batch);
            let (reg, dec, total) =
                (g.value(losses.reg).data()[0], g.value(losses.dec).data()[0], g.value(losses.total).data()[0]);
            state.step += 1;
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, step: state.step });
            }
            let grads = g.backward(losses.total);
            opt.step(&mut model.store, grads.params(&g));
            model.update_running_stats(&g);
            state.running = LossBreakdown { l_reg: reg, l_dec: dec, lambda_weight: model_config.lambda_weight, total };
            reg_sum += reg;
            dec_sum += dec;
            tot_sum += total;
            batches += 1;
        }
        state.epoch = epoch;
        let snapshot = checkpoint_copy(&model);
        let (val_mae, val_mse) = if val_set.is_empty() {
            (None, None)
        } else {
            let e = evaluate_model(&snapshot, val_set, train_config.batch_size)?;
            (Some(e.mae), Some(e.mse))
        };
        let improved = match (val_mae, state.best_val_mae) {
            (Some(m), Some(best)) => m <= best,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            if val_mae.is_some() {
                state.best_val_mae = val_mae;
            }
            state.checkpoint_epoch = Some(epoch);
            checkpoint = Some(snapshot);
        }
        let n = batches.max(1) as f64;
        let record = EpochRecord {
            epoch,
            steps: batches,
            l_reg: reg_sum / n,
            l_dec: dec_sum / n,
            total: tot_sum / n,
            val_mae,
            val_mse,
            ddm_reg_grad_norm: probe,
        };
        on_epoch(&record);
        history.push(record);
    }
    let checkpoint = checkpoint.unwrap_or_else(|| checkpoint_copy(&model));
    Ok(TrainOutcome { checkpoint, last: model, history, state })
}
