//! Two-branch, two-scale convolutional ensemble.
//!
//! Each image is resized twice: a small copy feeds the shallow backbone and a
//! larger copy feeds the detailed backbone. Both feature maps are globally
//! average-pooled, concatenated, and passed through a dense classifier head.

pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::resize_bilinear;
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::RasterImage;
use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::rng::keyed_rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointExtras};

/// Pixels are standardized as `(p − 0.5) · 4` before the first convolution.
const INPUT_CENTER: f64 = 0.5;
const INPUT_GAIN: f64 = 4.0;

/// One `conv → ReLU → (2×2 average pool)` block. Padding is `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: bool,
}

impl StageSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, pool: bool) -> Self {
        StageSpec {
            out_channels,
            kernel,
            stride,
            pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
}

impl BackboneSpec {
    /// 8 → 16 → 32 channels, pooling after each stage.
    pub fn shallow_default() -> Self {
        BackboneSpec {
            in_channels: 3,
            stages: vec![
                StageSpec::new(8, 3, 1, true),
                StageSpec::new(16, 3, 1, true),
                StageSpec::new(32, 3, 1, true),
            ],
        }
    }

    /// 8 → 16 → 32 → 64 → 64 channels, pooling after the first four stages.
    pub fn detailed_default() -> Self {
        BackboneSpec {
            in_channels: 3,
            stages: vec![
                StageSpec::new(8, 3, 1, true),
                StageSpec::new(16, 3, 1, true),
                StageSpec::new(32, 3, 1, true),
                StageSpec::new(64, 3, 1, true),
                StageSpec::new(64, 3, 1, false),
            ],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    pub fn validate(&self, branch: &str) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::invalid(format!("{branch}: input channels must be 1 or 3, got {}", self.in_channels)));
        }
        if self.stages.is_empty() {
            return Err(Error::invalid(format!("{branch}: backbone needs at least one stage")));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(Error::invalid(format!(
                    "{branch}.stage{i}: channels, kernel and stride must be positive, got {s:?}"
                )));
            }
        }
        Ok(())
    }

    /// Spatial extent after the backbone, or an error naming the stage that
    /// collapses it to zero.
    pub fn output_extent(&self, branch: &str, (mut h, mut w): (usize, usize)) -> Result<(usize, usize)> {
        for (i, s) in self.stages.iter().enumerate() {
            let pad = s.kernel / 2;
            if s.kernel > h + 2 * pad || s.kernel > w + 2 * pad {
                return Err(Error::invalid(format!("{branch}.stage{i}: kernel {} exceeds {h}×{w} input", s.kernel)));
            }
            h = (h + 2 * pad - s.kernel) / s.stride + 1;
            w = (w + 2 * pad - s.kernel) / s.stride + 1;
            if s.pool {
                h /= 2;
                w /= 2;
            }
            if h == 0 || w == 0 {
                return Err(Error::invalid(format!("{branch}.stage{i}: spatial extent shrinks to zero")));
            }
        }
        Ok((h, w))
    }
}

/// How each image is brought to branch resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResizeMode {
    /// Resize to `shallow_input` / `detailed_input` exactly.
    Fixed,
    /// Scale each side of the source by a per-branch factor.
    ScaleFactor { shallow: f64, detailed: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    /// `(height, width)`
    pub shallow_input: (usize, usize),
    pub detailed_input: (usize, usize),
    pub shallow_backbone: BackboneSpec,
    pub detailed_backbone: BackboneSpec,
    pub classes: usize,
    /// Hidden widths of the classifier head; empty means a single dense layer.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub resize: ResizeMode,
}

impl EnsembleConfig {
    pub fn new(classes: usize) -> Self {
        EnsembleConfig {
            shallow_input: (32, 32),
            detailed_input: (64, 64),
            shallow_backbone: BackboneSpec::shallow_default(),
            detailed_backbone: BackboneSpec::detailed_default(),
            classes,
            hidden: Vec::new(),
            resize: ResizeMode::Fixed,
        }
    }

    pub fn fused_width(&self) -> usize {
        self.shallow_backbone.out_channels() + self.detailed_backbone.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("model needs at least 2 classes, got {}", self.classes)));
        }
        self.shallow_backbone.validate("shallow")?;
        self.detailed_backbone.validate("detailed")?;
        if self.shallow_backbone.in_channels != self.detailed_backbone.in_channels {
            return Err(Error::invalid("both backbones must take the same number of input channels"));
        }
        let (hs, ws) = self.shallow_input;
        let (hd, wd) = self.detailed_input;
        if hs * ws == 0 || hd * wd == 0 {
            return Err(Error::invalid("branch input sizes must be positive"));
        }
        if hd * wd <= hs * ws {
            return Err(Error::invalid(format!(
                "detailed input {hd}×{wd} must have more pixels than shallow input {hs}×{ws}"
            )));
        }
        if let ResizeMode::ScaleFactor { shallow, detailed } = self.resize {
            if !(shallow > 0.0) || !(detailed > shallow) || !detailed.is_finite() {
                return Err(Error::invalid(format!(
                    "scale factors must satisfy 0 < shallow < detailed, got {shallow} and {detailed}"
                )));
            }
        }
        self.shallow_backbone.output_extent("shallow", self.shallow_input)?;
        self.detailed_backbone.output_extent("detailed", self.detailed_input)?;
        if let Some(i) = self.hidden.iter().position(|&h| h == 0) {
            return Err(Error::invalid(format!("head.hidden{i}: width must be positive")));
        }
        Ok(())
    }

    /// Branch input sizes for a source image of the given extent.
    pub fn branch_sizes(&self, source: (usize, usize)) -> ((usize, usize), (usize, usize)) {
        match self.resize {
            ResizeMode::Fixed => (self.shallow_input, self.detailed_input),
            ResizeMode::ScaleFactor { shallow, detailed } => {
                let scaled = |f: f64| {
                    (
                        ((source.0 as f64 * f).round() as usize).max(1),
                        ((source.1 as f64 * f).round() as usize).max(1),
                    )
                };
                (scaled(shallow), scaled(detailed))
            }
        }
    }

    /// `(name, shape, fan_in)` for every parameter, in storage order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        for (branch, spec) in [("shallow", &self.shallow_backbone), ("detailed", &self.detailed_backbone)] {
            let mut c = spec.in_channels;
            for (i, s) in spec.stages.iter().enumerate() {
                let fan_in = c * s.kernel * s.kernel;
                out.push((format!("{branch}.conv{i}.weight"), vec![s.out_channels, c, s.kernel, s.kernel], fan_in));
                out.push((format!("{branch}.conv{i}.bias"), vec![s.out_channels], fan_in));
                c = s.out_channels;
            }
        }
        let mut width = self.fused_width();
        for (i, &h) in self.hidden.iter().chain(std::iter::once(&self.classes)).enumerate() {
            out.push((format!("head.dense{i}.weight"), vec![h, width], width));
            out.push((format!("head.dense{i}.bias"), vec![h], width));
            width = h;
        }
        out
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, t) in entries {
            if names.contains(&name) {
                return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ParamSet { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor as a tape leaf, in order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub config: EnsembleConfig,
    pub params: ParamSet,
}

/// Fan-in uniform initialization (`|w| ≤ √(6 / fan_in)`), zero biases. Each
/// tensor draws from its own stream keyed by `seed` and its name.
pub fn build_ensemble(config: &EnsembleConfig, seed: u64) -> Result<Ensemble> {
    config.validate()?;
    let mut entries = Vec::new();
    for (name, shape, fan_in) in config.layout() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = keyed_rng(seed, "init", name.as_bytes(), 0);
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(Ensemble {
        config: config.clone(),
        params: ParamSet::new(entries)?,
    })
}

/// Prediction for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Ensemble {
    pub fn new(config: EnsembleConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::invalid(format!(
                "config expects {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (pname, t)) in layout.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter {pname:?} {:?} does not match expected {name:?} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Ensemble { config, params })
    }

    /// Builds the forward graph for a batch on `tape`, given the parameter
    /// leaves from [`ParamSet::register`]. Returns `B×K` logits.
    pub fn forward_batch(&self, tape: &mut Tape, vars: &[Var], images: &[RasterImage]) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid("parameter variables do not match the parameter set"));
        }
        if images.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        match self.config.resize {
            ResizeMode::Fixed => self.forward_group(tape, vars, images),
            ResizeMode::ScaleFactor { .. } => {
                // Branch sizes depend on each source, so images go one at a time.
                let rows = images
                    .iter()
                    .map(|img| self.forward_group(tape, vars, std::slice::from_ref(img)))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_rows(&rows)
            }
        }
    }

    /// All images in `images` must map to the same branch sizes.
    fn forward_group(&self, tape: &mut Tape, vars: &[Var], images: &[RasterImage]) -> Result<Var> {
        let cfg = &self.config;
        let (small, large) = cfg.branch_sizes((images[0].height(), images[0].width()));
        let in_c = cfg.shallow_backbone.in_channels;
        let xs = tape.constant(self.branch_input(images, small, in_c)?);
        let xd = tape.constant(self.branch_input(images, large, in_c)?);
        let mut cursor = 0;
        let fs = backbone(tape, vars, &mut cursor, &cfg.shallow_backbone, xs)?;
        let fd = backbone(tape, vars, &mut cursor, &cfg.detailed_backbone, xd)?;
        let gs = tape.global_average_pool(fs)?;
        let gd = tape.global_average_pool(fd)?;
        let mut h = tape.concat_channels(gs, gd)?;
        let layers = cfg.hidden.len() + 1;
        for i in 0..layers {
            h = tape.dense(h, vars[cursor], vars[cursor + 1])?;
            cursor += 2;
            if i + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Resized, standardized `N×C×H×W` tensor.
    fn branch_input(&self, images: &[RasterImage], (h, w): (usize, usize), channels: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * channels * h * w);
        for img in images {
            let img = match (img.channels(), channels) {
                (a, b) if a == b => img.clone(),
                (1, 3) => img.to_rgb(),
                (a, b) => {
                    return Err(Error::invalid(format!("model expects {b}-channel input, image has {a} channels")))
                }
            };
            let resized = resize_bilinear(&img, h, w)?;
            data.extend(resized.to_planar().into_iter().map(|p| (p - INPUT_CENTER) * INPUT_GAIN));
        }
        Tensor::new(vec![images.len(), channels, h, w], data)
    }

    /// Logits for a batch, without keeping the graph.
    pub fn logits(&self, images: &[RasterImage]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let out = self.forward_batch(&mut tape, &vars, images)?;
        Ok(tape.value(out).data().chunks(self.config.classes).map(<[f64]>::to_vec).collect())
    }

    /// `K` logits for one image.
    pub fn forward(&self, img: &RasterImage) -> Result<Vec<f64>> {
        Ok(self.logits(std::slice::from_ref(img))?.remove(0))
    }

    /// Softmax probabilities and their argmax.
    pub fn predict(&self, img: &RasterImage) -> Result<Prediction> {
        Ok(prediction_from_logits(&self.forward(img)?))
    }
}

pub fn prediction_from_logits(logits: &[f64]) -> Prediction {
    Prediction {
        class: argmax(logits),
        probabilities: softmax(logits),
    }
}

fn backbone(tape: &mut Tape, vars: &[Var], cursor: &mut usize, spec: &BackboneSpec, mut x: Var) -> Result<Var> {
    for s in &spec.stages {
        x = tape.conv2d(x, vars[*cursor], vars[*cursor + 1], s.stride, s.kernel / 2)?;
        *cursor += 2;
        x = tape.relu(x);
        if s.pool {
            x = tape.avg_pool2(x)?;
        }
    }
    Ok(x)
}
