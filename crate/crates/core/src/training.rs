//! Unsupervised training on defect-free images with Adam.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::model::{reconstruction_error, Mmae, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Weight of the summed addressing entropy in the loss.
    pub alpha: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (the final one is always written).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            alpha: 2e-4,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("train.batch_size must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!(
                "train.weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            problems.push(format!("train.alpha must be >= 0, got {}", self.alpha));
        }
        if self.checkpoint_every == 0 {
            problems.push("train.checkpoint_every must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// One row of the loss log. Losses are per-image means over the epoch;
/// `sparsity_loss` is the α-weighted entropy term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub recon_loss: f64,
    pub sparsity_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Mmae) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update from the accumulated gradients. Weight decay is the
    /// classic L2 form, added to the gradient before the moment estimates.
    pub fn update(&mut self, model: &mut Mmae, lr: f64, weight_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in model
            .params_mut()
            .into_iter()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.value.len() {
                let g = p.grad[i] + weight_decay * p.value[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Mmae,
    pub optimizer: Adam,
    pub epoch: usize,
    pub history: Vec<LossRecord>,
}

/// Where and how a training run persists its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
    /// Stored in every checkpoint manifest.
    pub config_echo: serde_json::Value,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch{epoch:05}.ckpt")
}

/// Mean losses of one batch and gradients accumulated into `model`.
fn batch_step(model: &mut Mmae, batch: &[&ImageGrid], alpha: f64) -> Result<(f64, f64)> {
    model.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let (mut recon, mut sparsity) = (0.0, 0.0);
    for x in batch {
        let (out, cache) = model.forward_with_cache(x)?;
        recon += reconstruction_error(x, &out.x_hat)? * scale;
        sparsity += alpha * out.entropy_sum() * scale;
        let g: Vec<f64> = out
            .x_hat
            .data()
            .iter()
            .zip(x.data())
            .map(|(r, t)| 2.0 * (r - t) * scale)
            .collect();
        model.backward(&cache, &g, alpha * scale);
    }
    Ok((recon, sparsity))
}

pub fn train(
    dataset: &[ImageGrid],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainState> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let expected = model_config.pyramid.base_resolution;
    if let Some((i, x)) = dataset
        .iter()
        .enumerate()
        .find(|(_, x)| x.resolution() != expected || x.channels() != model_config.channels)
    {
        return Err(Error::input(format!(
            "training image {i} is {:?}x{}, expected {expected:?}x{}",
            x.resolution(),
            x.channels(),
            model_config.channels
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Mmae::new(model_config.clone(), &mut rng)?;
    let mut state = TrainState {
        optimizer: Adam::new(&model),
        model,
        epoch: 0,
        history: Vec::new(),
    };

    let mut log = match outputs {
        Some(out) => Some(open_log(&out.dir)?),
        None => None,
    };

    let started = Instant::now();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut recon_sum, mut sparsity_sum) = (0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&ImageGrid> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (recon, sparsity) = batch_step(&mut state.model, &batch, cfg.alpha)?;
            if !(recon + sparsity).is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            state
                .optimizer
                .update(&mut state.model, cfg.learning_rate, cfg.weight_decay);
            if let Some(name) = state.model.first_non_finite() {
                return Err(Error::NumericalDomain(format!(
                    "parameter {name} became non-finite at epoch {epoch}, batch {b}"
                )));
            }
            for bank in &state.model.memories {
                bank.check_norms()?;
            }
            recon_sum += recon * chunk.len() as f64;
            sparsity_sum += sparsity * chunk.len() as f64;
        }
        let n = dataset.len() as f64;
        let record = LossRecord {
            epoch,
            recon_loss: recon_sum / n,
            sparsity_loss: sparsity_sum / n,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: recon {:.6} sparsity {:.6}",
            record.recon_loss,
            record.sparsity_loss
        );
        state.epoch = epoch;
        if let (Some(w), Some(out)) = (log.as_mut(), outputs) {
            writeln!(
                w,
                "{},{},{},{:.3}",
                record.epoch, record.recon_loss, record.sparsity_loss, record.wall_seconds
            )
            .map_err(|e| Error::io(out.dir.join(LOG_FILE), e))?;
        }
        state.history.push(record);
        if let Some(out) = outputs {
            if epoch % cfg.checkpoint_every == 0 {
                checkpoint::save(
                    &out.dir.join(checkpoint_name(epoch)),
                    &state.model,
                    epoch,
                    &state.history,
                    &out.config_echo,
                )?;
            }
        }
    }

    if let Some(out) = outputs {
        checkpoint::save(
            &out.dir.join(FINAL_CHECKPOINT),
            &state.model,
            state.epoch,
            &state.history,
            &out.config_echo,
        )?;
    }
    Ok(state)
}

fn open_log(dir: &Path) -> Result<fs::File> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOG_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "epoch,recon_loss,sparsity_loss,wall_seconds").map_err(|e| Error::io(&path, e))?;
    Ok(f)
}
