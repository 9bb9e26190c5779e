//! Mini-batch Adam training with patience-based early stopping and
//! best-weights restoration. Fully seeded: data order, dropout masks, and
//! initialization all derive from the config seed, so a run is
//! reproducible bit for bit.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamHyper, AdamState};
use super::layers::{backward, forward, loss_grad_mse, mse, output_to_array, Mode};
use super::params::{init_params, ModelParams};
use super::tensor::Tensor4;
use super::ModelSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 64,
            max_epochs: 400,
            patience: 5,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch, patience, and max_epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience-based early stopping: only a strict improvement of the
/// validation loss resets the counter; ties count toward patience.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Feed the validation loss of `epoch` (1-based). Returns whether a new
    /// best was recorded and whether to stop.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, StopDecision) {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, StopDecision::Continue)
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                (false, StopDecision::Stop)
            } else {
                (false, StopDecision::Continue)
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    /// 1-based epoch after which training stopped.
    pub stopped_epoch: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Gather dataset rows into a `[b, 1, C, W]` batch tensor.
pub fn batch_tensor(inputs: &Array3<f64>, rows: &[usize]) -> Tensor4 {
    let (_, c, w) = inputs.dim();
    let mut t = Tensor4::zeros(rows.len(), 1, c, w);
    for ci in 0..c {
        for wi in 0..w {
            // Logical layout [b, 1, C, W]: one map, height C, width W.
            let dst = t.run_mut(0, ci, wi);
            for (bi, &r) in rows.iter().enumerate() {
                dst[bi] = inputs[[r, ci, wi]];
            }
        }
    }
    t
}

fn gather_targets(targets: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut t = Array2::zeros((rows.len(), targets.ncols()));
    for (bi, &r) in rows.iter().enumerate() {
        t.row_mut(bi).assign(&targets.row(r));
    }
    t
}

/// Eval-mode predictions for a whole input set, in fixed-size chunks.
pub fn predict(spec: &ModelSpec, params: &ModelParams, inputs: &Array3<f64>) -> Result<Array2<f64>> {
    let n = inputs.dim().0;
    let mut out = Array2::zeros((n, 3));
    let mut scratch = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let chunk = 512;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let batch = batch_tensor(inputs, &rows);
        let (pred, _) = forward(spec, &mut scratch, &batch, Mode::Eval, &mut rng)?;
        let pred = output_to_array(&pred);
        for (bi, r) in (start..end).enumerate() {
            for k in 0..3 {
                out[[r, k]] = pred[[bi, k]];
            }
        }
        start = end;
    }
    Ok(out)
}

fn eval_loss(spec: &ModelSpec, params: &ModelParams, inputs: &Array3<f64>, targets: &Array2<f64>) -> Result<f64> {
    let pred = predict(spec, params, inputs)?;
    Ok(mse(&pred, targets))
}

/// Train with mini-batch Adam on the mse loss, evaluating the validation
/// loss after each epoch, keeping the best weights, and stopping after
/// `patience` epochs without strict improvement. Returns the best
/// parameters and the full loss history.
pub fn train_model(
    spec: &ModelSpec,
    train_inputs: &Array3<f64>,
    train_targets: &Array2<f64>,
    val_inputs: &Array3<f64>,
    val_targets: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    let n = train_inputs.dim().0;
    if n == 0 || val_inputs.dim().0 == 0 {
        return Err(Error::InvalidArgument("train and validation sets must be non-empty".into()));
    }
    let (_, c, w) = train_inputs.dim();
    if c != spec.input_channels || w != spec.input_width {
        return Err(Error::Shape(format!(
            "dataset is {c}x{w} but the model expects {}x{}",
            spec.input_channels, spec.input_width
        )));
    }

    let mut params = init_params(spec, cfg.seed)?;
    let mut state = AdamState::new(&params);
    let hp = cfg.adam();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x5348_5546));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = params.clone();
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        stopped_epoch: 0,
    };

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, rows) in order.chunks(cfg.batch).enumerate() {
            let batch = batch_tensor(train_inputs, rows);
            let targets = gather_targets(train_targets, rows);
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(splitmix64(
                cfg.seed ^ (epoch as u64).wrapping_mul(0x10001) ^ (bi as u64),
            ));
            let (out, caches) = forward(spec, &mut params, &batch, Mode::Train, &mut dropout_rng)?;
            let pred = output_to_array(&out);
            let loss = mse(&pred, &targets);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_loss += loss;
            batches += 1;
            let g = loss_grad_mse(&pred, &targets);
            let gt = Tensor4::from_vec(g.iter().cloned().collect(), rows.len(), 3, 1, 1)?;
            let grads = backward(spec, &params, &caches, &gt)?;
            adam_step(spec, &mut params, &grads, &mut state, &hp);
        }
        let val = eval_loss(spec, &params, val_inputs, val_targets)?;
        if !val.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.train_loss.push(epoch_loss / batches.max(1) as f64);
        history.val_loss.push(val);
        let (improved, decision) = stopper.observe(epoch, val);
        if improved {
            best_params = params.clone();
        }
        history.stopped_epoch = epoch;
        if decision == StopDecision::Stop {
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    Ok((best_params, history))
}
