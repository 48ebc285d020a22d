use std::fs;
use std::path::Path;

use super::*;
use crate::autodiff::Tensor;
use crate::data::{synth_generate, SynthSpec};
use crate::losses::LossKind;

#[test]
fn adam_zero_gradient_from_zero_state_is_identity() {
    let mut params = vec![Tensor::vector(vec![0.3, -1.2, 4.0])];
    let before = params.clone();
    let mut state = AdamState::zeros_like(&params);
    let zeros = [0.0; 3];
    for _ in 0..5 {
        adam_step(&mut params, &[&zeros], &mut state, &AdamConfig::default()).unwrap();
    }
    assert_eq!(params, before);
    assert_eq!(state.t, 5);
}

#[test]
fn adam_first_step_is_bias_corrected() {
    let mut params = vec![Tensor::scalar(0.0)];
    let mut state = AdamState::zeros_like(&params);
    let cfg = AdamConfig {
        learning_rate: 0.1,
        ..AdamConfig::default()
    };
    adam_step(&mut params, &[&[1.0]], &mut state, &cfg).unwrap();
    // m̂ = v̂ = 1, so the update is −lr / (1 + eps)
    let expected = -0.1 / (1.0 + 1e-8);
    assert!((params[0].data()[0] - expected).abs() < 1e-15);
}

#[test]
fn adam_update_is_bounded_by_learning_rate_for_constant_gradients() {
    let cfg = AdamConfig {
        learning_rate: 0.01,
        ..AdamConfig::default()
    };
    let g = [3.0, -0.002, 1e4, -7.5];
    let mut params = vec![Tensor::vector(vec![0.0; 4])];
    let mut state = AdamState::zeros_like(&params);
    for _ in 0..200 {
        let before = params[0].data().to_vec();
        adam_step(&mut params, &[&g], &mut state, &cfg).unwrap();
        for (a, b) in before.iter().zip(params[0].data()) {
            assert!((a - b).abs() <= cfg.learning_rate * (1.0 + 1e-9));
        }
    }
}

#[test]
fn adam_rejects_shape_mismatch_and_bad_hyperparameters() {
    let mut params = vec![Tensor::vector(vec![0.0; 3])];
    let mut state = AdamState::zeros_like(&params);
    assert!(adam_step(&mut params, &[&[1.0, 2.0]], &mut state, &AdamConfig::default()).is_err());
    assert!(adam_step(&mut params, &[], &mut state, &AdamConfig::default()).is_err());
    let mut wrong = AdamState::zeros_like(&[Tensor::vector(vec![0.0; 4])]);
    assert!(adam_step(&mut params, &[&[0.0; 3]], &mut wrong, &AdamConfig::default()).is_err());
    for bad in [
        AdamConfig { learning_rate: 0.0, ..AdamConfig::default() },
        AdamConfig { beta1: 1.0, ..AdamConfig::default() },
        AdamConfig { beta2: -0.1, ..AdamConfig::default() },
    ] {
        assert!(adam_step(&mut params, &[&[0.0; 3]], &mut state, &bad).is_err());
    }
    assert_eq!(state.t, 0);
}

const MINIMAL: &str = "[data]\nmanifest = \"data/manifest.csv\"\n";

#[test]
fn config_defaults_and_path_resolution() {
    let cfg = RunConfig::from_toml_str(MINIMAL, &[], Some(Path::new("/base"))).unwrap();
    assert_eq!(cfg.data.manifest, Path::new("/base/data/manifest.csv"));
    assert_eq!(cfg.optim.learning_rate, 1e-3);
    assert_eq!((cfg.optim.beta1, cfg.optim.beta2, cfg.optim.epsilon), (0.9, 0.999, 1e-8));
    assert_eq!((cfg.optim.batch_size, cfg.optim.epochs), (32, 30));
    assert_eq!(cfg.loss.kind, LossKind::Ce);
}

#[test]
fn config_overrides_apply_and_echo_round_trips() {
    let overrides = [
        "optim.epochs=3".to_string(),
        "loss.kind=ldam_focal".to_string(),
        "global_seed=9".to_string(),
        "name=probe".to_string(),
        "augment.flip_h_prob=0.25".to_string(),
    ];
    let cfg = RunConfig::from_toml_str(MINIMAL, &overrides, None).unwrap();
    assert_eq!(cfg.optim.epochs, 3);
    assert_eq!(cfg.loss.kind, LossKind::LdamFocal);
    assert_eq!(cfg.global_seed, 9);
    assert_eq!(cfg.name, "probe");
    assert_eq!(cfg.augment.flip_h_prob, 0.25);
    let echoed = RunConfig::from_toml_str(&cfg.echo().unwrap(), &[], None).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    for (text, overrides) in [
        (format!("{MINIMAL}[optim]\nlearnig_rate = 0.1\n"), vec![]),
        (format!("{MINIMAL}[surprise]\nx = 1\n"), vec![]),
        (MINIMAL.to_string(), vec!["optim.learning_rate=-1".to_string()]),
        (MINIMAL.to_string(), vec!["optim.beta2=1.0".to_string()]),
        (MINIMAL.to_string(), vec!["optim.batch_size=0".to_string()]),
        (MINIMAL.to_string(), vec!["loss.kind=hinge".to_string()]),
        (MINIMAL.to_string(), vec!["augment.flip_h_prob=1.5".to_string()]),
        (MINIMAL.to_string(), vec!["data.split=[0.5, 0.5, 0.5]".to_string()]),
        (MINIMAL.to_string(), vec!["eval.formats=[\"pdf\"]".to_string()]),
        (MINIMAL.to_string(), vec!["novalue".to_string()]),
        ("[optim]\nepochs = 2\n".to_string(), vec![]),
    ] {
        let r = RunConfig::from_toml_str(&text, &overrides, None);
        assert!(r.is_err(), "accepted {text:?} with {overrides:?}");
    }
}

/// Tiny model and data so a full run takes well under a second.
fn tiny_config(root: &Path, images: usize, epochs: usize) -> RunConfig {
    let data = root.join("data");
    if !data.join("manifest.csv").exists() {
        synth_generate(&SynthSpec::reference(3, images, 16, 5).unwrap(), &data).unwrap();
    }
    let text = format!(
        r#"
name = "tiny"
global_seed = 11

[data]
manifest = "{}"
split = [0.5, 0.25, 0.25]

[model]
shallow_input = [8, 8]
detailed_input = [16, 16]

[model.backbone.shallow]
in_channels = 3
stages = [{{ out_channels = 4, kernel = 3, stride = 1, pool = true }}]

[model.backbone.detailed]
in_channels = 3
stages = [
  {{ out_channels = 4, kernel = 3, stride = 1, pool = true }},
  {{ out_channels = 6, kernel = 3, stride = 1, pool = false }},
]

[optim]
epochs = {epochs}
batch_size = 4
learning_rate = 0.01
"#,
        data.join("manifest.csv").display()
    );
    RunConfig::from_toml_str(&text, &[], None).unwrap()
}

#[test]
fn training_smoke_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 16, 2);
    let run = dir.path().join("run");
    let summary = train(&cfg, &run, false).unwrap();
    assert_eq!(summary.history.len(), 2);
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("epoch=1 step="));
    for f in ["best.ckpt", "final.ckpt", "config.echo"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let echoed = fs::read_to_string(run.join("config.echo")).unwrap();
    assert_eq!(RunConfig::from_toml_str(&echoed, &[], None).unwrap(), cfg);
}

#[test]
fn identical_configs_train_identically_and_resume_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 24, 4);
    let a = train(&cfg, &dir.path().join("a"), false).unwrap();
    let b = train(&cfg, &dir.path().join("b"), false).unwrap();
    assert_eq!(a.history, b.history);
    for f in ["train.log", "best.ckpt", "final.ckpt"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }

    let mut short = cfg.clone();
    short.optim.epochs = 2;
    let c_dir = dir.path().join("c");
    train(&short, &c_dir, false).unwrap();
    let c = train(&cfg, &c_dir, true).unwrap();
    assert_eq!(c.resumed_from, Some(2));
    assert_eq!(c.history, a.history);
    assert_eq!(fs::read(c_dir.join("final.ckpt")).unwrap(), fs::read(dir.path().join("a/final.ckpt")).unwrap());

    let mut changed = cfg.clone();
    changed.optim.learning_rate = 0.02;
    assert!(matches!(train(&changed, &c_dir, true), Err(crate::Error::Config(_))));
}

#[test]
fn evaluation_is_resize_only_and_self_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 16, 1);
    let run = dir.path().join("run");
    let summary = train(&cfg, &run, false).unwrap();
    let ckpt = run.join("best.ckpt");
    let first = evaluate(&ckpt, &summary.splits.test, &cfg).unwrap();
    let mut no_aug = cfg.clone();
    no_aug.augment.enabled = false;
    no_aug.augment.flip_h_prob = 0.0;
    no_aug.augment.blur_prob = 0.0;
    let second = evaluate(&ckpt, &summary.splits.test, &no_aug).unwrap();
    assert_eq!(first, second);

    let formats = [crate::metrics::ReportFormat::Json];
    write_evaluation(&first, &run.join("e1"), &formats).unwrap();
    write_evaluation(&second, &run.join("e2"), &formats).unwrap();
    assert_eq!(fs::read(run.join("e1/metrics.json")).unwrap(), fs::read(run.join("e2/metrics.json")).unwrap());

    let matrix = crate::metrics::ConfusionMatrix::from_csv(&fs::read_to_string(run.join("e1/matrix.csv")).unwrap()).unwrap();
    let acc = matrix.trace() as f64 / matrix.total() as f64;
    assert_eq!(acc, first.report.overall_accuracy);
}

#[test]
fn evaluation_rejects_class_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 16, 1);
    let run = dir.path().join("run");
    let summary = train(&cfg, &run, false).unwrap();
    let mut wrong = summary.splits.test.clone();
    wrong.class_names.push("extra".into());
    assert!(evaluate(&run.join("best.ckpt"), &wrong, &cfg).is_err());
}

#[test]
fn missing_manifest_is_reported_with_its_path() {
    let cfg = RunConfig::from_toml_str("[data]\nmanifest = \"/nonexistent/m.csv\"\n", &[], None).unwrap();
    let err = train(&cfg, Path::new("/nonexistent/run"), false).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/m.csv"), "{err}");
}
