//! Built-in consistency suite: gradient checks, loss identities and a few
//! invariants of augmentation, consensus, metrics and the optimizer.
//!
//! Meant as a quick health check of a build; the test suite goes further.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{flip_h, gaussian_blur, gaussian_taps, AugmentationConfig};
use crate::autodiff::{grad_check, Coordinates, Tape, TapeObjective, Tensor, Var};
use crate::consensus::{ds_initialize, ds_log_likelihood, ds_m_step, ds_e_step, AnnotationRecord, AnnotationSet};
use crate::data::RasterImage;
use crate::error::Result;
use crate::losses::{LossConfig, LossKind, LossObjective};
use crate::metrics::ConfusionMatrix;
use crate::model::{build_ensemble, BackboneSpec, EnsembleConfig, ResizeMode, StageSpec};
use crate::pipeline::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &str, result: Result<(bool, String)>) -> CheckOutcome {
    let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, spread: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-spread..spread)).collect()).expect("shape matches data")
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}

const COUNTS: [usize; 4] = [30, 12, 5, 2];

/// Runs every check with `seeds` random seeds where applicable.
pub fn run(seeds: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for kind in LossKind::ALL {
        out.push(outcome(&format!("gradient/loss/{}", kind.key()), loss_gradient(kind, seeds)));
    }
    out.push(outcome("gradient/conv-relu-pool-gap-dense", layer_gradient(seeds)));
    out.push(outcome("gradient/ensemble", ensemble_gradient(seeds)));
    out.push(outcome("identity/loss-reductions", loss_identities(seeds)));
    out.push(outcome("augment/gaussian-kernel-sums", kernel_sums()));
    out.push(outcome("augment/flip-and-blur", flip_and_blur()));
    out.push(outcome("augment/disabled-is-identity", disabled_identity()));
    out.push(outcome("consensus/monotone-likelihood", consensus_monotone(seeds)));
    out.push(outcome("metrics/diagonal-equals-recall", diagonal_recall(seeds)));
    out.push(outcome("optim/adam-first-step", adam_first_step()));
    out
}

fn loss_gradient(kind: LossKind, seeds: u64) -> Result<(bool, String)> {
    let cfg = LossConfig::with_kind(kind);
    let spread = if kind.needs_counts() { 3.0 / cfg.ldam_scale } else { 2.0 };
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_tensor(&mut rng, vec![3, 4], spread);
        let labels = random_labels(&mut rng, 3, 4);
        let mut obj = LossObjective(|z: &Tensor| cfg.compute(z, &labels, Some(&COUNTS)));
        worst = worst.max(grad_check(&mut obj, &[logits], 1e-5, Coordinates::All)?.max_rel_error);
    }
    Ok((worst <= 1e-6, format!("max relative error {worst:.2e} (limit 1e-6)")))
}

fn layer_gradient(seeds: u64) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let params = vec![
            random_tensor(&mut rng, vec![2, 2, 6, 6], 1.0),
            random_tensor(&mut rng, vec![3, 2, 3, 3], 0.5),
            random_tensor(&mut rng, vec![3], 0.1),
            random_tensor(&mut rng, vec![4, 3], 0.5),
            random_tensor(&mut rng, vec![4], 0.1),
        ];
        let labels = random_labels(&mut rng, 2, 4);
        let mut obj = TapeObjective::new(|t: &mut Tape, v: &[Var]| {
            let h = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            let h = t.relu(h);
            let h = t.avg_pool2(h)?;
            let g = t.global_average_pool(h)?;
            let z = t.dense(g, v[3], v[4])?;
            let out = crate::losses::cross_entropy(t.value(z), &labels)?;
            t.external_scalar(z, out.loss, out.grad_logits)
        });
        worst = worst.max(grad_check(&mut obj, &params, 1e-6, Coordinates::All)?.max_rel_error);
    }
    Ok((worst <= 1e-4, format!("max relative error {worst:.2e} (limit 1e-4)")))
}

fn ensemble_gradient(seeds: u64) -> Result<(bool, String)> {
    let cfg = EnsembleConfig {
        shallow_input: (8, 8),
        detailed_input: (16, 16),
        shallow_backbone: BackboneSpec {
            in_channels: 3,
            stages: vec![StageSpec::new(4, 3, 1, true)],
        },
        detailed_backbone: BackboneSpec {
            in_channels: 3,
            stages: vec![StageSpec::new(4, 3, 2, true), StageSpec::new(6, 3, 1, false)],
        },
        classes: 3,
        hidden: vec![5],
        resize: ResizeMode::Fixed,
    };
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let model = build_ensemble(&cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let images: Vec<RasterImage> = (0..2)
            .map(|_| RasterImage::new(12, 12, 3, (0..432).map(|_| rng.gen()).collect()))
            .collect::<Result<_>>()?;
        let labels = random_labels(&mut rng, 2, 3);
        let mut obj = TapeObjective::new(|t: &mut Tape, v: &[Var]| {
            let z = model.forward_batch(t, v, &images)?;
            let out = crate::losses::cross_entropy(t.value(z), &labels)?;
            t.external_scalar(z, out.loss, out.grad_logits)
        });
        let coords = Coordinates::Sample { per_tensor: 6, seed };
        worst = worst.max(grad_check(&mut obj, model.params.tensors(), 1e-5, coords)?.max_rel_error);
    }
    Ok((worst <= 1e-4, format!("max relative error {worst:.2e} (limit 1e-4)")))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn loss_identities(seeds: u64) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let logits = random_tensor(&mut rng, vec![5, 4], 3.0);
        let labels = random_labels(&mut rng, 5, 4);
        let eval = |cfg: LossConfig| cfg.compute(&logits, &labels, Some(&COUNTS));
        let ce = eval(LossConfig::with_kind(LossKind::Ce))?;
        let pairs = [
            (LossConfig { focal_gamma: 0.0, ..LossConfig::with_kind(LossKind::Focal) }, None),
            (LossConfig { ls_epsilon: 0.0, ..LossConfig::with_kind(LossKind::CeLs) }, None),
            (LossConfig { ldam_max_margin: 0.0, ldam_scale: 1.0, ..LossConfig::with_kind(LossKind::Ldam) }, None),
            (
                LossConfig { mix_beta: 0.0, ..LossConfig::with_kind(LossKind::LdamFocal) },
                Some(LossConfig::with_kind(LossKind::Focal)),
            ),
            (
                LossConfig { mix_alpha: 0.0, ..LossConfig::with_kind(LossKind::LdamFocal) },
                Some(LossConfig::with_kind(LossKind::Ldam)),
            ),
        ];
        for (cfg, reference) in pairs {
            let got = eval(cfg)?;
            let want = match reference {
                Some(r) => eval(r)?,
                None => ce.clone(),
            };
            worst = worst.max((got.loss - want.loss).abs());
            worst = worst.max(max_abs_diff(&got.grad_logits, &want.grad_logits));
        }
    }
    Ok((worst <= 1e-12, format!("max deviation {worst:.2e} (limit 1e-12)")))
}

fn kernel_sums() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for sigma in [0.1, 0.5, 1.5, 3.0] {
        worst = worst.max((gaussian_taps(sigma)?.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((worst <= 1e-9, format!("max |sum − 1| {worst:.2e}")))
}

fn flip_and_blur() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let img = RasterImage::new(9, 7, 3, (0..189).map(|_| rng.gen()).collect())?;
    let involution = flip_h(&flip_h(&img)) == img;
    let flat = RasterImage::filled(9, 7, 3, 0.37)?;
    let blurred = gaussian_blur(&flat, 1.5)?;
    let constant_kept = max_abs_diff(blurred.pixels(), flat.pixels()) <= 1e-12;
    Ok((
        involution && constant_kept,
        format!("flip involution {involution}, constant image kept by blur {constant_kept}"),
    ))
}

fn disabled_identity() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let img = RasterImage::new(12, 10, 3, (0..360).map(|_| rng.gen()).collect())?;
    let cfg = AugmentationConfig::disabled(12, 10);
    let out = crate::augment::augment_sample(&img, &cfg, &mut rng)?;
    let same = out == img;
    Ok((same, format!("identity {same}")))
}

fn consensus_monotone(seeds: u64) -> Result<(bool, String)> {
    let mut worst_drop: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let (items, annotators, k) = (12, 3, 3);
        let mut records = Vec::new();
        for item in 0..items {
            for annotator in 0..annotators {
                if annotator == 0 || rng.gen_bool(0.8) {
                    records.push(AnnotationRecord {
                        item,
                        annotator,
                        label: rng.gen_range(0..k),
                    });
                }
            }
        }
        let ann = AnnotationSet::new(
            (0..items).map(|i| format!("i{i}")).collect(),
            (0..annotators).map(|a| format!("a{a}")).collect(),
            k,
            &records,
        )?;
        let mut posterior = ds_initialize(&ann)?;
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..30 {
            let (p, c) = ds_m_step(&ann, &posterior, 0.0)?;
            let ll = ds_log_likelihood(&ann, &p, &c)?;
            worst_drop = worst_drop.max(prev - ll);
            prev = ll;
            posterior = ds_e_step(&ann, &p, &c)?;
        }
    }
    Ok((worst_drop <= 1e-9, format!("largest log-likelihood decrease {worst_drop:.2e}")))
}

fn diagonal_recall(seeds: u64) -> Result<(bool, String)> {
    let mut ok = true;
    for seed in 0..seeds * 5 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let k = rng.gen_range(2..7);
        let counts: Vec<Vec<u64>> = (0..k).map(|_| (0..k).map(|_| rng.gen_range(0..20)).collect()).collect();
        let m = ConfusionMatrix::from_counts((0..k).map(|i| format!("c{i}")).collect(), counts)?;
        let diag = m.per_class_diagonal_accuracy();
        for (j, d) in diag.iter().enumerate() {
            if m.row_sum(j) > 0 && *d != m.precision_recall_f1(j).1 {
                ok = false;
            }
        }
    }
    Ok((ok, format!("{} matrices", seeds * 5)))
}

fn adam_first_step() -> Result<(bool, String)> {
    let mut params = vec![Tensor::scalar(0.0)];
    let mut state = AdamState::zeros_like(&params);
    let cfg = AdamConfig {
        learning_rate: 0.1,
        ..AdamConfig::default()
    };
    adam_step(&mut params, &[&[1.0]], &mut state, &cfg)?;
    let step = params[0].data()[0];
    Ok(((step + 0.1).abs() < 1e-8, format!("first update {step}")))
}
