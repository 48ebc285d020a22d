//! `sonoclass` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use sonoclass::augment::{augment_sample, AugmentationConfig};
use sonoclass::consensus::{
    ds_run, label_agreement, majority_vote, simulate_annotations, write_consensus_csv, AnnotationSet,
    ConsensusDiagnostics, DEFAULT_MAX_ITER, DEFAULT_SMOOTHING, DEFAULT_TOL,
};
use sonoclass::data::{decode_image, synth_generate, write_image, DatasetManifest, ManifestEntry, SynthSpec};
use sonoclass::metrics::{comparison_table, fixtures, per_class_table, report_emit, ComparisonRow, MetricsReport, ReportFormat};
use sonoclass::pipeline::{evaluate, run_root, train, write_evaluation, RunConfig};
use sonoclass::rng::SampleRng;
use sonoclass::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "sonoclass", version, about = "Two-scale ensemble classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labelled image dataset.
    Synth(SynthArgs),
    /// Aggregate multi-annotator labels with Dawid–Skene EM.
    Consensus(ConsensusArgs),
    /// Export augmented variants of one image.
    Augment(AugmentArgs),
    /// Train an ensemble from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Evaluate(EvaluateArgs),
    /// Re-render metrics JSON or build comparison tables.
    Report(ReportArgs),
    /// Run the built-in gradient and invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    /// Class proportions of the reference dataset.
    Reference,
    /// Equal count per class.
    Balanced,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "reference")]
    profile: Profile,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    classes: usize,
    /// Total image count (reference profile).
    #[arg(long, default_value_t = 1600)]
    total: usize,
    /// Images per class (balanced profile).
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    /// Side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Simulated annotators written to annotations.csv; 0 skips the file.
    #[arg(long, default_value_t = 3)]
    annotators: usize,
    /// Probability that a simulated annotator reports the true class.
    #[arg(long, default_value_t = 0.8)]
    annotator_accuracy: f64,
}

#[derive(Args, Debug)]
struct ConsensusArgs {
    /// CSV with header item_id,annotator_id,label.
    #[arg(long)]
    annotations: PathBuf,
    /// Output directory for consensus.csv and diagnostics.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    /// Manifest to relabel with the consensus; written as <out>/manifest.csv.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long, default_value_t = DEFAULT_SMOOTHING)]
    smoothing: f64,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    /// Image file to augment.
    #[arg(long, conflicts_with = "manifest")]
    image: Option<PathBuf>,
    /// Manifest to pick the image from, together with --index.
    #[arg(long, requires = "index")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output side length; defaults to the source size.
    #[arg(long)]
    size: Option<usize>,
    /// Run configuration whose [augment] table is used instead of the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration value, e.g. `--set optim.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding run directories (default: $SONOCLASS_RUN_ROOT, else ./runs).
    #[arg(long)]
    run_root: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Continue from final.ckpt in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Defaults to best.ckpt in the run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to the configured test manifest, else the run's test split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of json, csv, markdown; defaults to eval.formats.
    #[arg(long, value_delimiter = ',')]
    formats: Vec<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// metrics.json to render.
    #[arg(long, required_unless_present_any = ["row", "fixture"])]
    metrics: Option<PathBuf>,
    #[arg(long, default_value = "markdown")]
    format: String,
    /// Comparison row `ARCHITECTURE|LOSS|path/to/metrics.json`; repeatable.
    #[arg(long)]
    row: Vec<String>,
    /// Class reported in its own comparison column.
    #[arg(long)]
    focus_class: Option<String>,
    /// Render the reference comparison and per-class tables.
    #[arg(long)]
    fixture: bool,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Random seeds per check.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Consensus(a) => consensus(a),
        Command::Augment(a) => augment(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Report(a) => report(a),
        Command::Selftest(a) => selftest(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let spec = match a.profile {
        Profile::Reference => SynthSpec::reference(a.classes, a.total, a.size, a.seed)?,
        Profile::Balanced => SynthSpec::balanced(a.classes, a.per_class, a.size, a.seed)?,
    };
    let manifest = synth_generate(&spec, &a.out)?;
    println!("wrote {} images in {} classes to {}", manifest.len(), manifest.class_count(), a.out.display());
    if a.annotators > 0 {
        let ids: Vec<String> = manifest.entries.iter().map(|e| e.image_id.clone()).collect();
        let truth: Vec<usize> = manifest.entries.iter().map(|e| e.label).collect();
        let ann = simulate_annotations(&ids, &truth, manifest.class_count(), a.annotators, a.annotator_accuracy, 0.0, a.seed)?;
        let path = a.out.join("annotations.csv");
        ann.write_csv(&path)?;
        println!("wrote {} simulated annotators to {}", a.annotators, path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn consensus(a: ConsensusArgs) -> Result<ExitCode> {
    let manifest = a.manifest.as_deref().map(DatasetManifest::read).transpose()?;
    let classes = a.classes.or(manifest.as_ref().map(DatasetManifest::class_count));
    let ann = AnnotationSet::read_csv(&a.annotations, classes)?;
    let (result, state) = ds_run(&ann, a.tol, a.max_iter, a.smoothing)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_consensus_csv(&a.out.join("consensus.csv"), &ann, &result)?;
    let diag = ConsensusDiagnostics::new(&ann, &result, &state);
    write_file(&a.out.join("diagnostics.json"), serde_json::to_string_pretty(&diag)? + "\n")?;
    let mv = majority_vote(&ann);
    println!(
        "{} items, {} annotators: {} after {} iterations, agreement with majority vote {:.4}",
        ann.items(),
        ann.annotators(),
        if result.converged { "converged" } else { "stopped" },
        result.iterations,
        label_agreement(&result.labels, &mv)?
    );
    if let Some(m) = manifest {
        let by_id: std::collections::HashMap<&str, usize> =
            ann.item_ids().iter().enumerate().map(|(i, id)| (id.as_str(), result.labels[i])).collect();
        let mut changed = 0;
        let mut entries = Vec::with_capacity(m.len());
        for e in &m.entries {
            let label = *by_id
                .get(e.image_id.as_str())
                .ok_or_else(|| Error::Config(format!("image {:?} has no annotations", e.image_id)))?;
            changed += usize::from(label != e.label);
            let path = m.resolve(e);
            let path = fs::canonicalize(&path).unwrap_or(path);
            entries.push(ManifestEntry {
                image_id: e.image_id.clone(),
                path: path.to_string_lossy().into_owned(),
                label,
            });
        }
        let out = a.out.join("manifest.csv");
        m.subset(entries).write(&out)?;
        println!("relabelled manifest: {} ({changed} labels differ from the input)", out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn augment(a: AugmentArgs) -> Result<ExitCode> {
    let (source, image_id) = match (&a.image, &a.manifest, a.index) {
        (Some(p), _, _) => (p.clone(), p.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned())),
        (None, Some(m), Some(i)) => {
            let manifest = DatasetManifest::read(m)?;
            let e = manifest
                .entries
                .get(i)
                .ok_or_else(|| Error::Config(format!("index {i} out of range for {} entries", manifest.len())))?;
            (manifest.resolve(e), e.image_id.clone())
        }
        _ => return Err(Error::Config("give --image, or --manifest with --index".into())),
    };
    let img = decode_image(&source)?;
    let target = a.size.map_or((img.height(), img.width()), |s| (s, s));
    let cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let mut run = RunConfig::from_toml_str(&text, &[], path.parent())?;
            run.augment.target = Some(target);
            run.augmentation()
        }
        None => AugmentationConfig::default_for(target.0, target.1),
    };
    cfg.validate()?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut variants = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let out = augment_sample(&img, &cfg, &mut SampleRng::new(a.seed, &image_id, i as u64))?;
        let name = format!("{image_id}_aug{i:03}.png");
        write_image(&out, &a.out.join(&name))?;
        variants.push(serde_json::json!({
            "file": name,
            "epoch": i,
            "sha256": hex(&Sha256::digest(out.to_bytes())),
        }));
    }
    let record = serde_json::json!({
        "source": source.to_string_lossy(),
        "image_id": image_id,
        "seed": a.seed,
        "config": cfg,
        "variants": variants,
    });
    write_file(&a.out.join("augment_record.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    println!("wrote {} variants of {} to {}", a.count, image_id, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn load_run(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(&args.config, &args.overrides)?;
    let dir = run_root(args.run_root.as_deref()).join(&cfg.name);
    Ok((cfg, dir))
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let (cfg, dir) = load_run(&a.run)?;
    let summary = train(&cfg, &dir, a.resume)?;
    let last = summary.history.last();
    println!(
        "trained {} epochs into {}; final train loss {}, best validation macro-F1 {:.4} at epoch {}",
        summary.history.len(),
        dir.display(),
        last.map_or(f64::NAN, |r| r.train_loss),
        summary.best_macro_f1,
        summary.best_epoch
    );
    Ok(ExitCode::SUCCESS)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<ExitCode> {
    let (cfg, dir) = load_run(&a.run)?;
    let checkpoint = a.checkpoint.unwrap_or_else(|| dir.join("best.ckpt"));
    let manifest_path = a
        .manifest
        .or_else(|| cfg.data.test_manifest.clone())
        .unwrap_or_else(|| dir.join("splits").join("test.csv"));
    let manifest = DatasetManifest::read(&manifest_path)?;
    let formats: Vec<ReportFormat> = if a.formats.is_empty() {
        cfg.eval.parsed_formats()?
    } else {
        a.formats.iter().map(|f| f.parse()).collect::<Result<_>>()?
    };
    let eval = evaluate(&checkpoint, &manifest, &cfg)?;
    let out = a.out.unwrap_or(dir);
    let mut formats = formats;
    if !formats.contains(&ReportFormat::Json) {
        formats.insert(0, ReportFormat::Json);
    }
    let written = write_evaluation(&eval, &out, &formats)?;
    let r = &eval.report;
    println!(
        "{} images: accuracy {:.4}, macro-F1 {:.4}, weighted-F1 {:.4}",
        manifest.len(),
        r.overall_accuracy,
        r.macro_f1,
        r.weighted_f1
    );
    for w in written {
        println!("wrote {}", w.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn report(a: ReportArgs) -> Result<ExitCode> {
    let mut text = String::new();
    if a.fixture {
        text.push_str(&comparison_table(&[fixtures::reference_row()]));
        text.push('\n');
        let matrix = fixtures::reference_matrix();
        text.push_str(&per_class_table(&sonoclass::metrics::overall_metrics(&matrix)?));
    }
    if let Some(path) = &a.metrics {
        let format: ReportFormat = a.format.parse()?;
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&report_emit(&read_report(path)?, format)?);
    }
    if !a.row.is_empty() {
        let mut rows = Vec::new();
        for spec in &a.row {
            let parts: Vec<&str> = spec.splitn(3, '|').collect();
            let [arch, loss, path] = parts[..] else {
                return Err(Error::Config(format!("row {spec:?} is not ARCHITECTURE|LOSS|PATH")));
            };
            let report = read_report(Path::new(path))?;
            let focus = match &a.focus_class {
                Some(f) => f.clone(),
                None => worst_class(&report),
            };
            rows.push(ComparisonRow::from_report(arch, loss, &report, &focus)?);
        }
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&comparison_table(&rows));
    }
    match &a.out {
        Some(p) => write_file(p, &text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

/// Class with the lowest diagonal accuracy; the default focus column.
fn worst_class(r: &MetricsReport) -> String {
    r.per_class
        .iter()
        .min_by(|a, b| a.diagonal_accuracy.total_cmp(&b.diagonal_accuracy))
        .map_or_else(String::new, |c| c.name.clone())
}

fn selftest(a: SelftestArgs) -> Result<ExitCode> {
    let results = sonoclass::selftest::run(a.seeds);
    let passed = results.iter().filter(|r| r.passed).count();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    println!("selftest: {passed}/{} checks passed", results.len());
    Ok(if passed == results.len() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
