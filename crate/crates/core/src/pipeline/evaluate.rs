//! Resize-only evaluation of a checkpoint on a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{decode_image, DatasetManifest, RasterImage};
use crate::error::{Error, Result};
use crate::metrics::{overall_metrics, report_emit, ConfusionMatrix, MetricsReport, ReportFormat};
use crate::model::{argmax, load_checkpoint, Checkpoint, Ensemble, EnsembleConfig};

use super::config::RunConfig;

/// Metadata every checkpoint written by training carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub ensemble: EnsembleConfig,
    pub class_names: Vec<String>,
    pub loss: String,
    pub epoch: usize,
}

impl ModelMeta {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let extras = ckpt
            .extras
            .as_ref()
            .ok_or_else(|| Error::CheckpointFormat("no metadata trailer; cannot rebuild the model".into()))?;
        let model = extras
            .meta
            .get("model")
            .ok_or_else(|| Error::CheckpointFormat("metadata has no \"model\" entry".into()))?;
        Ok(serde_json::from_value(model.clone())?)
    }
}

/// Loads a checkpoint as an inference model.
pub fn load_model(path: &Path) -> Result<(Ensemble, ModelMeta)> {
    let ckpt = load_checkpoint(path)?;
    let meta = ModelMeta::from_checkpoint(&ckpt)?;
    let model = Ensemble::new(meta.ensemble.clone(), ckpt.params)?;
    Ok((model, meta))
}

pub fn load_images(manifest: &DatasetManifest) -> Result<Vec<RasterImage>> {
    manifest.entries.iter().map(|e| decode_image(&manifest.resolve(e))).collect()
}

/// Argmax predictions, `batch_size` images per forward pass.
pub fn predict_all(model: &Ensemble, images: &[RasterImage], batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        preds.extend(model.logits(chunk)?.iter().map(|row| argmax(row)));
    }
    Ok(preds)
}

pub fn confusion_of(
    model: &Ensemble,
    class_names: &[String],
    images: &[RasterImage],
    labels: &[usize],
    batch_size: usize,
) -> Result<(ConfusionMatrix, Vec<usize>)> {
    let preds = predict_all(model, images, batch_size)?;
    let mut matrix = ConfusionMatrix::new(class_names.to_vec());
    matrix.accumulate(&preds, labels)?;
    Ok((matrix, preds))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// `(image_id, label, predicted)` in manifest order.
    pub predictions: Vec<(String, usize, usize)>,
}

/// Evaluates `checkpoint` on every item of `manifest`. Only the model's own
/// resize is applied; augmentation settings in `config` are ignored.
pub fn evaluate(checkpoint: &Path, manifest: &DatasetManifest, config: &RunConfig) -> Result<Evaluation> {
    let (model, meta) = load_model(checkpoint)?;
    if meta.class_names.len() != manifest.class_count() {
        return Err(Error::invalid(format!(
            "checkpoint has {} classes but the manifest has {}",
            meta.class_names.len(),
            manifest.class_count()
        )));
    }
    if meta.class_names != manifest.class_names {
        log::warn!("class names differ between checkpoint and manifest; using the checkpoint's");
    }
    if manifest.is_empty() {
        return Err(Error::invalid("evaluation manifest is empty"));
    }
    let images = load_images(manifest)?;
    let labels: Vec<usize> = manifest.entries.iter().map(|e| e.label).collect();
    let (matrix, preds) = confusion_of(&model, &meta.class_names, &images, &labels, config.eval.batch_size)?;
    let predictions = manifest
        .entries
        .iter()
        .zip(&preds)
        .map(|(e, &p)| (e.image_id.clone(), e.label, p))
        .collect();
    Ok(Evaluation {
        report: overall_metrics(&matrix)?,
        predictions,
    })
}

/// Writes `matrix.csv`, `predictions.csv` and one `metrics.<ext>` per format.
pub fn write_evaluation(eval: &Evaluation, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    put("matrix.csv".into(), eval.report.matrix.to_csv()?)?;
    let names = eval.report.matrix.class_names();
    let mut preds = String::from("image_id,label,predicted,true_class,predicted_class\n");
    for (id, label, pred) in &eval.predictions {
        preds.push_str(&format!("{id},{label},{pred},{},{}\n", csv_field(&names[*label]), csv_field(&names[*pred])));
    }
    put("predictions.csv".into(), preds)?;
    for &f in formats {
        put(format!("metrics.{}", f.extension()), report_emit(&eval.report, f)?)?;
    }
    Ok(written)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
