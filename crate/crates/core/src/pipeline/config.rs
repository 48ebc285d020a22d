//! Run configuration: a TOML file with `data`, `augment`, `model`, `loss`,
//! `optim` and `eval` tables, plus `section.key=value` overrides.
//!
//! Unknown keys are rejected, every value is range-checked before any work
//! starts, and the effective configuration is echoed back as TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::metrics::ReportFormat;
use crate::model::{BackboneSpec, EnsembleConfig, ResizeMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run directory name under the run root.
    pub name: String,
    pub global_seed: u64,
    pub data: DataSection,
    pub augment: AugmentSection,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub optim: OptimSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Manifest CSV; relative paths resolve against the config file's directory.
    pub manifest: PathBuf,
    /// Separate validation / test manifests; when absent the main manifest is split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_manifest: Option<PathBuf>,
    /// Train / validation / test fractions.
    pub split: (f64, f64, f64),
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: PathBuf::new(),
            val_manifest: None,
            test_manifest: None,
            split: (0.7, 0.15, 0.15),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub enabled: bool,
    pub gamma_range: (f64, f64),
    pub crop_scale_range: (f64, f64),
    pub crop_aspect_range: (f64, f64),
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub jitter_prob: f64,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
    pub hue_range: (f64, f64),
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub translate_prob: f64,
    /// Fraction of each side; converted to pixels of `target`.
    pub translate_max_frac: f64,
    /// Output size of the augmentation pipeline; defaults to the detailed input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<(usize, usize)>,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentationConfig::default_for(64, 64);
        AugmentSection {
            enabled: true,
            gamma_range: d.gamma_range,
            crop_scale_range: d.crop_scale_range,
            crop_aspect_range: d.crop_aspect_range,
            flip_h_prob: d.flip_h_prob,
            flip_v_prob: d.flip_v_prob,
            jitter_prob: d.jitter_prob,
            brightness_range: d.brightness_range,
            contrast_range: d.contrast_range,
            saturation_range: d.saturation_range,
            hue_range: d.hue_range,
            grayscale_prob: d.grayscale_prob,
            blur_prob: d.blur_prob,
            blur_sigma_range: d.blur_sigma_range,
            translate_prob: d.translate_prob,
            translate_max_frac: 0.1,
            target: None,
        }
    }
}

impl AugmentSection {
    pub fn to_config(&self, default_target: (usize, usize)) -> AugmentationConfig {
        let target = self.target.unwrap_or(default_target);
        AugmentationConfig {
            gamma_range: self.gamma_range,
            crop_scale_range: self.crop_scale_range,
            crop_aspect_range: self.crop_aspect_range,
            flip_h_prob: self.flip_h_prob,
            flip_v_prob: self.flip_v_prob,
            jitter_prob: self.jitter_prob,
            brightness_range: self.brightness_range,
            contrast_range: self.contrast_range,
            saturation_range: self.saturation_range,
            hue_range: self.hue_range,
            grayscale_prob: self.grayscale_prob,
            blur_prob: self.blur_prob,
            blur_sigma_range: self.blur_sigma_range,
            translate_prob: self.translate_prob,
            translate_max: (
                (target.1 as f64 * self.translate_max_frac).floor() as usize,
                (target.0 as f64 * self.translate_max_frac).floor() as usize,
            ),
            target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeKind {
    Fixed,
    ScaleFactor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub shallow_input: (usize, usize),
    pub detailed_input: (usize, usize),
    /// Must match the manifest when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    pub hidden: Vec<usize>,
    pub resize: ResizeKind,
    pub shallow_scale: f64,
    pub detailed_scale: f64,
    pub backbone: BackboneSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub shallow: BackboneSpec,
    pub detailed: BackboneSpec,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            shallow: BackboneSpec::shallow_default(),
            detailed: BackboneSpec::detailed_default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            shallow_input: (32, 32),
            detailed_input: (64, 64),
            classes: None,
            hidden: Vec::new(),
            resize: ResizeKind::Fixed,
            shallow_scale: 0.5,
            detailed_scale: 1.0,
            backbone: BackboneSection::default(),
        }
    }
}

impl ModelSection {
    pub fn ensemble_config(&self, classes: usize) -> Result<EnsembleConfig> {
        if let Some(k) = self.classes {
            if k != classes {
                return Err(Error::Config(format!("model.classes = {k} but the manifest has {classes} classes")));
            }
        }
        let cfg = EnsembleConfig {
            shallow_input: self.shallow_input,
            detailed_input: self.detailed_input,
            shallow_backbone: self.backbone.shallow.clone(),
            detailed_backbone: self.backbone.detailed.clone(),
            classes,
            hidden: self.hidden.clone(),
            resize: match self.resize {
                ResizeKind::Fixed => ResizeMode::Fixed,
                ResizeKind::ScaleFactor => ResizeMode::ScaleFactor {
                    shallow: self.shallow_scale,
                    detailed: self.detailed_scale,
                },
            },
        };
        cfg.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Any of `json`, `csv`, `markdown`.
    pub formats: Vec<String>,
    pub batch_size: usize,
    /// Class reported in its own column of comparison rows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub focus_class: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            formats: vec!["json".into(), "markdown".into()],
            batch_size: 64,
            focus_class: None,
        }
    }
}

impl EvalSection {
    pub fn parsed_formats(&self) -> Result<Vec<ReportFormat>> {
        self.formats.iter().map(|f| f.parse()).collect()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            global_seed: 0,
            data: DataSection::default(),
            augment: AugmentSection::default(),
            model: ModelSection::default(),
            loss: LossConfig::default(),
            optim: OptimSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Parses a scalar override; anything that is not a TOML literal is a string.
fn override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `section.key=value` to a parsed table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not a table")))?;
    }
    node.insert(path[path.len() - 1].to_string(), override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides and validates. Relative data paths
    /// are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, overrides: &[String], base_dir: Option<&Path>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(base) = base_dir {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_toml_str(&text, overrides, Some(base))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.manifest);
        if let Some(p) = self.data.val_manifest.as_mut() {
            fix(p);
        }
        if let Some(p) = self.data.test_manifest.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return bad(format!("name {:?} is not a valid directory name", self.name));
        }
        if self.data.manifest.as_os_str().is_empty() {
            return bad("data.manifest is required".into());
        }
        let (a, b, c) = self.data.split;
        if [a, b, c].iter().any(|&x| !(x > 0.0)) || (a + b + c - 1.0).abs() > 1e-9 {
            return bad(format!("data.split must be three positive fractions summing to 1, got {:?}", self.data.split));
        }
        self.augment
            .to_config(self.model.detailed_input)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..0.5).contains(&self.augment.translate_max_frac) {
            return bad("augment.translate_max_frac must lie in [0, 0.5)".into());
        }
        let k = self
            .model
            .classes
            .or(self.loss.focal_alpha.as_ref().map(Vec::len))
            .unwrap_or(2);
        self.loss
            .validate(k, Some(&vec![1; k]))
            .map_err(|e| Error::Config(format!("loss: {e}")))?;
        let o = &self.optim;
        if o.epochs == 0 || o.batch_size == 0 {
            return bad("optim.epochs and optim.batch_size must be positive".into());
        }
        if !(o.learning_rate > 0.0) || !o.learning_rate.is_finite() {
            return bad(format!("optim.learning_rate must be positive, got {}", o.learning_rate));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optim.beta1 and optim.beta2 must lie in [0, 1)".into());
        }
        if !(o.epsilon > 0.0) {
            return bad("optim.epsilon must be positive".into());
        }
        if self.eval.batch_size == 0 {
            return bad("eval.batch_size must be positive".into());
        }
        self.eval.parsed_formats().map_err(|e| Error::Config(e.to_string()))?;
        // Model shape checks that do not depend on the class count.
        self.model.ensemble_config(self.model.classes.unwrap_or(2).max(2))?;
        Ok(())
    }

    pub fn augmentation(&self) -> AugmentationConfig {
        self.augment.to_config(self.model.detailed_input)
    }

    /// Effective configuration as TOML.
    pub fn echo(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss.kind
    }
}
