//! Training loop: seeded shuffle, per-sample augmentation, Adam, per-epoch
//! validation, and checkpoints that carry enough state to resume exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::augment_sample;
use crate::autodiff::{Tape, Tensor};
use crate::data::{class_counts, stratified_split, DatasetManifest, RasterImage};
use crate::error::{Error, Result};
use crate::metrics::overall_metrics;
use crate::model::{build_ensemble, save_checkpoint, CheckpointExtras, Ensemble, ParamSet};
use crate::rng::{keyed_rng, SampleRng};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::config::RunConfig;
use super::evaluate::{confusion_of, load_images, ModelMeta};

pub const RUN_ROOT_ENV: &str = "SONOCLASS_RUN_ROOT";
pub const CONFIG_ECHO: &str = "config.echo";
pub const TRAIN_LOG: &str = "train.log";
pub const BEST_CKPT: &str = "best.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";

/// Run root: the explicit path, else `$SONOCLASS_RUN_ROOT`, else `runs`.
pub fn run_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("runs"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplits {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

/// Uses explicit validation / test manifests when configured, otherwise a
/// stratified split of the main manifest keyed by the global seed.
pub fn prepare_splits(cfg: &RunConfig) -> Result<DataSplits> {
    let main = DatasetManifest::read(&cfg.data.manifest)?;
    let read_other = |p: &Path| -> Result<DatasetManifest> {
        let m = DatasetManifest::read(p)?;
        if m.class_count() != main.class_count() {
            return Err(Error::Config(format!(
                "{} has {} classes, the main manifest has {}",
                p.display(),
                m.class_count(),
                main.class_count()
            )));
        }
        Ok(m)
    };
    match (&cfg.data.val_manifest, &cfg.data.test_manifest) {
        (Some(v), Some(t)) => Ok(DataSplits {
            val: read_other(v)?,
            test: read_other(t)?,
            train: main,
        }),
        (val, test) => {
            let s = stratified_split(&main, cfg.data.split, cfg.global_seed)?;
            // An explicit manifest replaces its split; the freed items are dropped
            // rather than moved into training so the split stays seed-stable.
            Ok(DataSplits {
                train: s.train,
                val: match val {
                    Some(v) => read_other(v)?,
                    None => s.val,
                },
                test: match test {
                    Some(t) => read_other(t)?,
                    None => s.test,
                },
            })
        }
    }
}

/// One line of `train.log`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

impl EpochRecord {
    pub fn log_line(&self, loss_kind: &str) -> String {
        format!(
            "epoch={} step={} loss_kind={} train_loss={} val_accuracy={} val_macro_f1={}",
            self.epoch, self.step, loss_kind, self.train_loss, self.val_accuracy, self.val_macro_f1
        )
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub global_seed: u64,
    pub best_epoch: usize,
    pub best_macro_f1: f64,
    pub history: Vec<EpochRecord>,
    /// Effective configuration text with `optim.epochs` neutralized.
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_macro_f1: f64,
    /// Epoch the run resumed after, if any.
    pub resumed_from: Option<usize>,
    pub splits: DataSplits,
}

fn fingerprint(cfg: &RunConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.optim.epochs = 0;
    c.echo()
}

fn model_meta(model: &Ensemble, class_names: &[String], cfg: &RunConfig, epoch: usize) -> ModelMeta {
    ModelMeta {
        ensemble: model.config.clone(),
        class_names: class_names.to_vec(),
        loss: cfg.loss.kind.key().to_string(),
        epoch,
    }
}

fn state_extras(meta: &ModelMeta, params: &ParamSet, adam: &AdamState, state: &TrainState) -> Result<CheckpointExtras> {
    let mut arrays = Vec::with_capacity(3 * params.len());
    for (i, (name, t)) in params.iter().enumerate() {
        arrays.push((format!("param/{name}"), t.data().to_vec()));
        arrays.push((format!("adam.m/{name}"), adam.m[i].data().to_vec()));
        arrays.push((format!("adam.v/{name}"), adam.v[i].data().to_vec()));
    }
    Ok(CheckpointExtras {
        meta: serde_json::json!({
            "model": serde_json::to_value(meta)?,
            "train_state": serde_json::to_value(state)?,
            "adam_t": adam.t,
        }),
        arrays,
    })
}

fn restore(path: &Path, model: &mut Ensemble, cfg: &RunConfig) -> Result<(AdamState, TrainState)> {
    let ckpt = crate::model::load_checkpoint(path)?;
    let extras = ckpt
        .extras
        .ok_or_else(|| Error::CheckpointFormat(format!("{} has no training state", path.display())))?;
    let state: TrainState = serde_json::from_value(
        extras
            .meta
            .get("train_state")
            .cloned()
            .ok_or_else(|| Error::CheckpointFormat("missing train_state".into()))?,
    )?;
    if state.config_fingerprint != fingerprint(cfg)? {
        return Err(Error::Config(format!(
            "cannot resume {}: configuration differs from the original run (only optim.epochs may change)",
            path.display()
        )));
    }
    let t = extras
        .meta
        .get("adam_t")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::CheckpointFormat("missing adam_t".into()))?;
    let mut adam = AdamState::zeros_like(model.params.tensors());
    adam.t = t;
    let names: Vec<String> = model.params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let fetch = |prefix: &str, dst: &mut Tensor| -> Result<()> {
            let key = format!("{prefix}/{name}");
            let src = extras
                .array(&key)
                .ok_or_else(|| Error::CheckpointFormat(format!("missing array {key}")))?;
            if src.len() != dst.numel() {
                return Err(Error::CheckpointFormat(format!("array {key} has {} values, expected {}", src.len(), dst.numel())));
            }
            dst.data_mut().copy_from_slice(src);
            Ok(())
        };
        fetch("param", &mut model.params.tensors_mut()[i])?;
        fetch("adam.m", &mut adam.m[i])?;
        fetch("adam.v", &mut adam.v[i])?;
    }
    Ok((adam, state))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_log(run_dir: &Path, history: &[EpochRecord], loss_kind: &str) -> Result<()> {
    let mut s = String::new();
    for r in history {
        s.push_str(&r.log_line(loss_kind));
        s.push('\n');
    }
    write_text(&run_dir.join(TRAIN_LOG), &s)
}

/// Writes each split as a manifest with resolved paths under `<run_dir>/splits`.
fn write_splits(run_dir: &Path, splits: &DataSplits) -> Result<()> {
    let dir = run_dir.join("splits");
    for (name, m) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let entries = m
            .entries
            .iter()
            .map(|e| {
                let p = m.resolve(e);
                let p = fs::canonicalize(&p).unwrap_or(p);
                crate::data::ManifestEntry {
                    path: p.to_string_lossy().into_owned(),
                    ..e.clone()
                }
            })
            .collect();
        m.subset(entries).write(&dir.join(format!("{name}.csv")))?;
    }
    Ok(())
}

/// Trains the configured ensemble into `run_dir`. With `resume`, continues
/// from `final.ckpt` when it exists.
pub fn train(cfg: &RunConfig, run_dir: &Path, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let splits = prepare_splits(cfg)?;
    if splits.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let class_names = splits.train.class_names.clone();
    let k = class_names.len();
    let counts = class_counts(&splits.train);
    cfg.loss
        .validate(k, Some(&counts))
        .map_err(|e| Error::Config(format!("loss: {e}")))?;
    let ens_cfg = cfg.model.ensemble_config(k)?;
    let aug = cfg.augmentation();
    let adam_cfg = AdamConfig {
        learning_rate: cfg.optim.learning_rate,
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        epsilon: cfg.optim.epsilon,
    };

    let train_images = load_images(&splits.train)?;
    let train_labels: Vec<usize> = splits.train.entries.iter().map(|e| e.label).collect();
    // Without a validation split, selection falls back to the (unaugmented) training set.
    let (val_images, val_labels) = if splits.val.is_empty() {
        log::warn!("validation split is empty; selecting the best epoch on the training set");
        (train_images.clone(), train_labels.clone())
    } else {
        (load_images(&splits.val)?, splits.val.entries.iter().map(|e| e.label).collect())
    };

    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut model = build_ensemble(&ens_cfg, cfg.global_seed)?;
    let final_path = run_dir.join(FINAL_CKPT);
    let (mut adam, mut state, resumed_from) = if resume && final_path.exists() {
        let (adam, state) = restore(&final_path, &mut model, cfg)?;
        log::info!("resuming after epoch {}", state.epoch);
        let from = state.epoch;
        (adam, state, Some(from))
    } else {
        let state = TrainState {
            epoch: 0,
            step: 0,
            global_seed: cfg.global_seed,
            best_epoch: 0,
            best_macro_f1: f64::NEG_INFINITY,
            history: Vec::new(),
            config_fingerprint: fingerprint(cfg)?,
        };
        (AdamState::zeros_like(model.params.tensors()), state, None)
    };
    write_text(&run_dir.join(CONFIG_ECHO), &cfg.echo()?)?;
    write_splits(run_dir, &splits)?;
    let loss_key = cfg.loss.kind.key();
    write_log(run_dir, &state.history, loss_key)?;

    let n = train_images.len();
    for epoch in state.epoch + 1..=cfg.optim.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut keyed_rng(cfg.global_seed, "shuffle", b"", epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.optim.batch_size) {
            let step_no = adam.t as usize + 1;
            let mut images: Vec<RasterImage> = Vec::with_capacity(batch.len());
            for &i in batch {
                let img = &train_images[i];
                images.push(if cfg.augment.enabled {
                    let id = &splits.train.entries[i].image_id;
                    augment_sample(img, &aug, &mut SampleRng::new(cfg.global_seed, id, epoch as u64))?
                } else {
                    img.clone()
                });
            }
            let labels: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let mut tape = Tape::new();
            let vars = model.params.register(&mut tape);
            let logits = model.forward_batch(&mut tape, &vars, &images)?;
            let diverged = |loss: f64| Error::Diverged {
                epoch,
                step: step_no,
                loss_kind: loss_key.to_string(),
                loss,
            };
            if !tape.value(logits).all_finite() {
                return Err(diverged(f64::NAN));
            }
            let out = cfg.loss.compute(tape.value(logits), &labels, Some(&counts))?;
            if !out.loss.is_finite() || !out.grad_logits.iter().all(|g| g.is_finite()) {
                return Err(diverged(out.loss));
            }
            loss_sum += out.per_sample.iter().sum::<f64>();
            let root = tape.external_scalar(logits, out.loss, out.grad_logits)?;
            tape.backward(root)?;
            let grads: Vec<Vec<f64>> = vars
                .iter()
                .zip(model.params.tensors())
                .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
                .collect();
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(diverged(out.loss));
            }
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            adam_step(model.params.tensors_mut(), &grad_refs, &mut adam, &adam_cfg)?;
        }
        let (matrix, _) = confusion_of(&model, &class_names, &val_images, &val_labels, cfg.eval.batch_size)?;
        let report = overall_metrics(&matrix)?;
        let record = EpochRecord {
            epoch,
            step: adam.t,
            train_loss: loss_sum / n as f64,
            val_accuracy: report.overall_accuracy,
            val_macro_f1: report.macro_f1,
        };
        log::info!("{}", record.log_line(loss_key));
        state.epoch = epoch;
        state.step = adam.t;
        state.history.push(record);
        let meta = model_meta(&model, &class_names, cfg, epoch);
        if report.macro_f1 > state.best_macro_f1 {
            state.best_macro_f1 = report.macro_f1;
            state.best_epoch = epoch;
            let extras = CheckpointExtras {
                meta: serde_json::json!({ "model": serde_json::to_value(&meta)? }),
                arrays: Vec::new(),
            };
            save_checkpoint(&model.params, Some(&extras), &run_dir.join(BEST_CKPT))?;
        }
        save_checkpoint(&model.params, Some(&state_extras(&meta, &model.params, &adam, &state)?), &final_path)?;
        write_log(run_dir, &state.history, loss_key)?;
    }
    Ok(TrainSummary {
        run_dir: run_dir.to_path_buf(),
        history: state.history,
        best_epoch: state.best_epoch,
        best_macro_f1: state.best_macro_f1,
        resumed_from,
        splits,
    })
}
