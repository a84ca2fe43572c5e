//! Pretraining: view sampling, the training step, the learning-rate schedule,
//! checkpoints and the metrics log.

pub mod config;
pub mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{OptimizerConfig, OptimizerKind, TrainConfig, ViewsConfig};
pub use optim::Optimizer;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{apply_view, position_grid, sample_view_spec, CropRect, PositionGrid, SeedSample, ViewSpec};
use crate::losses::{total_loss_multicrop, total_loss_two_view, LossBreakdown, ViewBatch};
use crate::model::checkpoint::hash_config;
use crate::model::{Checkpoint, EncoderConfig, Model, Tensor};
use crate::nn::Mode;
use crate::verify::collapse_monitor;

/// Linear warmup from 0 to `base_lr`, then cosine decay to `final_lr`.
pub fn cosine_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64, final_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return final_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    final_lr + 0.5 * (base_lr - final_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One augmented view of every image in a minibatch.
#[derive(Debug, Clone)]
pub struct ViewInput {
    /// `B x 3 x H x W`
    pub images: Array4<f64>,
    pub crops: Vec<CropRect>,
    pub grids: Vec<PositionGrid>,
    pub is_large: bool,
}

/// Draws two large views (plus small views under multi-crop) of every image.
/// Random draws happen image by image, view by view.
pub fn sample_views<R: Rng + ?Sized>(
    batch: &[&SeedSample],
    views: &ViewsConfig,
    encoder: &EncoderConfig,
    rng: &mut R,
) -> Result<Vec<ViewInput>> {
    let specs: Vec<(&ViewSpec, bool)> = (0..views.n_views())
        .map(|v| {
            if v < 2 {
                (&views.large, true)
            } else {
                (&views.small, false)
            }
        })
        .collect();
    let mut out: Vec<ViewInput> = specs
        .iter()
        .map(|(spec, is_large)| ViewInput {
            images: Array4::zeros((batch.len(), 3, spec.out_size.0, spec.out_size.1)),
            crops: Vec::with_capacity(batch.len()),
            grids: Vec::with_capacity(batch.len()),
            is_large: *is_large,
        })
        .collect();
    for (b, sample) in batch.iter().enumerate() {
        for (v, (spec, _)) in specs.iter().enumerate() {
            let crop = sample_view_spec(
                rng,
                (sample.height(), sample.width()),
                spec.area_range,
                spec.aspect_range,
                spec.out_size,
                spec.flip_prob,
            )?;
            let img = apply_view(sample, &crop, &views.augment, rng)?;
            out[v].images.index_axis_mut(Axis(0), b).assign(&img);
            let map = (encoder.map_size(spec.out_size.0)?, encoder.map_size(spec.out_size.1)?);
            out[v].grids.push(position_grid(&crop, map)?.with_view_id(v));
            out[v].crops.push(crop);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    /// Smallest and mean unbiased per-dimension std of the first view's global embeddings.
    pub std_min: f64,
    pub std_mean: f64,
}

/// Forward, loss and backward for one minibatch; gradients are left
/// accumulated in `model` and no parameter is changed.
pub fn loss_and_grads(model: &mut Model, views: &[ViewInput], cfg: &TrainConfig, step: u64) -> Result<StepOutput> {
    let mut fwd = Vec::with_capacity(views.len());
    for v in views {
        fwd.push(model.forward_view(v.images.view(), Mode::Train)?);
    }
    let batches: Vec<ViewBatch> = fwd
        .iter()
        .zip(views)
        .map(|(f, v)| ViewBatch {
            maps: f.maps.view(),
            global: f.global.view(),
            grids: &v.grids,
            is_large: v.is_large,
        })
        .collect();
    let out = if batches.len() == 2 {
        total_loss_two_view(&batches[0], &batches[1], &cfg.loss)?
    } else {
        total_loss_multicrop(&batches, &cfg.loss)?
    };
    let b = &out.breakdown;
    let terms = [
        b.total,
        b.invariance,
        b.variance,
        b.covariance,
        b.local_location,
        b.local_feature,
    ];
    if terms.iter().any(|t| !t.is_finite()) {
        let dump = serde_json::to_string(b).unwrap_or_else(|_| format!("{b:?}"));
        return Err(Error::NonFinite { step, dump });
    }
    let (std_min, std_mean) = collapse_monitor(fwd[0].global.view())?;
    model.zero_grad();
    for ((f, g), _) in fwd.iter().zip(&out.grads).zip(views) {
        model.backward_view(f, &g.maps, &g.global);
    }
    Ok(StepOutput {
        breakdown: out.breakdown,
        std_min,
        std_mean,
    })
}

/// One optimizer update on a minibatch. `rng` drives view sampling only.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    opt: &mut Optimizer,
    batch: &[&SeedSample],
    cfg: &TrainConfig,
    lr: f64,
    step: u64,
    rng: &mut R,
) -> Result<StepOutput> {
    let views = sample_views(batch, &cfg.views, &cfg.model.encoder, rng)?;
    let out = loss_and_grads(model, &views, cfg, step)?;
    opt.step(model, lr);
    Ok(out)
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Number of updates applied so far, starting at 1.
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub total: f64,
    pub global_vicreg: f64,
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
    pub local_location: f64,
    pub local_feature: f64,
    pub alpha: f64,
    pub location_weight: f64,
    pub feature_weight: f64,
    pub lambda_inv: f64,
    pub mu_var: f64,
    pub nu_cov: f64,
    pub local_lambda_inv: f64,
    pub local_mu_var: f64,
    pub local_nu_cov: f64,
    pub std_min: f64,
    pub std_mean: f64,
}

impl StepRecord {
    fn new(step: u64, epoch: u64, lr: f64, out: &StepOutput) -> Self {
        let b = &out.breakdown;
        Self {
            step,
            epoch,
            lr,
            total: b.total,
            global_vicreg: b.global_vicreg,
            invariance: b.invariance,
            variance: b.variance,
            covariance: b.covariance,
            local_location: b.local_location,
            local_feature: b.local_feature,
            alpha: b.alpha,
            location_weight: b.location_weight,
            feature_weight: b.feature_weight,
            lambda_inv: b.weights.lambda_inv,
            mu_var: b.weights.mu_var,
            nu_cov: b.weights.nu_cov,
            local_lambda_inv: b.local_weights.lambda_inv,
            local_mu_var: b.local_weights.mu_var,
            local_nu_cov: b.local_weights.nu_cov,
            std_min: out.std_min,
            std_mean: out.std_mean,
        }
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.vrgl"))
}

/// Highest-step checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut best = None;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt_"))
            .and_then(|n| n.strip_suffix(".vrgl"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best)
}

/// Model tensors, optional optimizer state, the step counter and the resolved config.
pub fn build_checkpoint(model: &mut Model, opt: Option<&Optimizer>, cfg: &TrainConfig, step: u64) -> Checkpoint {
    let text = cfg.to_toml();
    let mut tensors: Vec<(String, Tensor)> = model.state().into_iter().map(|(n, v)| (n, Tensor::F64(v))).collect();
    if let Some(opt) = opt {
        tensors.extend(opt.state());
    }
    tensors.push(("train.step".into(), Tensor::scalar_u64(step)));
    tensors.push(("meta.config".into(), Tensor::bytes(text.as_bytes())));
    Checkpoint::new(tensors, hash_config(&text))
}

/// Rebuilds the model stored in a checkpoint, with its config and step.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Model, TrainConfig, u64)> {
    let text = match ckpt.get("meta.config") {
        Some(Tensor::U8(bytes)) => String::from_utf8(bytes.iter().copied().collect())
            .map_err(|_| Error::invalid("checkpoint config is not UTF-8"))?,
        _ => return Err(Error::invalid("checkpoint has no meta.config tensor")),
    };
    if hash_config(&text) != ckpt.config_hash {
        return Err(Error::invalid("checkpoint config hash does not match its config"));
    }
    let cfg = TrainConfig::from_toml(&text)?;
    let mut model = Model::new(&cfg.model_config())?;
    let state: Vec<(String, ndarray::ArrayD<f64>)> = ckpt
        .tensors
        .iter()
        .filter_map(|(n, t)| t.as_f64().map(|a| (n.clone(), a.clone())))
        .collect();
    model.load_state(&state)?;
    let step = match ckpt.get("train.step") {
        Some(Tensor::U64(a)) => a.iter().copied().next().unwrap_or(0),
        _ => 0,
    };
    Ok((model, cfg, step))
}

pub fn load_model(path: &Path) -> Result<(Model, TrainConfig, u64)> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub records: Vec<StepRecord>,
}

fn epoch_order(data: &Dataset, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a);
    rng.set_stream(epoch);
    data.shuffled_order(&mut rng)
}

fn read_records(path: &Path, up_to: u64) -> Result<Vec<StepRecord>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord =
            serde_json::from_str(&line).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if rec.step <= up_to {
            out.push(rec);
        }
    }
    Ok(out)
}

fn record_line(rec: &StepRecord) -> String {
    let mut s = serde_json::to_string(rec).expect("records serialize");
    s.push('\n');
    s
}

/// Runs (or resumes) pretraining into `out_dir`.
///
/// Writes the resolved config, one metrics record per update and checkpoints
/// named by step: the initial state, every `checkpoint_every` updates and the
/// final state. With `resume`, training continues from the latest checkpoint
/// and metrics after that step are discarded.
pub fn pretrain(cfg: &TrainConfig, data: &Dataset, out_dir: &Path, resume: bool) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let steps_per_epoch = data.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::invalid(format!(
            "dataset of {} samples is smaller than one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let text = cfg.to_toml();
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, &text).map_err(|e| Error::io(&cfg_path, e))?;

    let mut model = Model::new(&cfg.model_config())?;
    let mut opt = Optimizer::new(cfg.optimizer, &mut model);
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut start = 0u64;
    let mut records = Vec::new();
    let resumed = if resume { latest_checkpoint(out_dir)? } else { None };
    if let Some((_, path)) = &resumed {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.config_hash != hash_config(&text) {
            return Err(Error::Config(format!(
                "{} was written with a different config",
                path.display()
            )));
        }
        let (loaded, _, step) = model_from_checkpoint(&ckpt)?;
        model = loaded;
        opt.load_state(|name| ckpt.get(name).cloned())?;
        start = step;
        records = read_records(&metrics_path, step)?;
        let body: String = records.iter().map(record_line).collect();
        fs::write(&metrics_path, body).map_err(|e| Error::io(&metrics_path, e))?;
    } else {
        fs::write(&metrics_path, "").map_err(|e| Error::io(&metrics_path, e))?;
        build_checkpoint(&mut model, Some(&opt), cfg, 0).save(&checkpoint_path(out_dir, 0))?;
    }

    let mut log = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut order = Vec::new();
    let mut order_epoch = u64::MAX;
    for step in start as usize..total {
        let epoch = (step / steps_per_epoch) as u64;
        if epoch != order_epoch {
            order = epoch_order(data, cfg.seed, epoch);
            order_epoch = epoch;
        }
        let offset = (step % steps_per_epoch) * cfg.batch_size;
        let batch: Vec<&SeedSample> = order[offset..offset + cfg.batch_size]
            .iter()
            .map(|&i| &data.samples[i])
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step as u64);
        let lr = cosine_schedule(step + 1, total, warmup, cfg.base_lr, cfg.final_lr);
        let out = train_step(&mut model, &mut opt, &batch, cfg, lr, step as u64 + 1, &mut rng)?;
        let rec = StepRecord::new(step as u64 + 1, epoch, lr, &out);
        log.write_all(record_line(&rec).as_bytes())
            .map_err(|e| Error::io(&metrics_path, e))?;
        records.push(rec);
        let done = step as u64 + 1;
        if done == total as u64 || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0) {
            build_checkpoint(&mut model, Some(&opt), cfg, done).save(&checkpoint_path(out_dir, done))?;
        }
    }
    let steps = total.max(start as usize) as u64;
    Ok(PretrainOutcome {
        steps,
        checkpoint: checkpoint_path(out_dir, if total == 0 { 0 } else { steps }),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_schedule(0, 100, 10, 0.5, 0.01), 0.0);
        assert_eq!(cosine_schedule(10, 100, 10, 0.5, 0.01), 0.5);
        assert!((cosine_schedule(100, 100, 10, 0.5, 0.01) - 0.01).abs() < 1e-15);
        assert!((cosine_schedule(5, 100, 10, 0.5, 0.01) - 0.25).abs() < 1e-15);
        let mid = cosine_schedule(55, 100, 10, 0.5, 0.01);
        assert!((mid - 0.255).abs() < 1e-12);
    }

    #[test]
    fn schedule_without_warmup_starts_at_base() {
        assert_eq!(cosine_schedule(0, 10, 0, 1.0, 0.0), 1.0);
    }
}
