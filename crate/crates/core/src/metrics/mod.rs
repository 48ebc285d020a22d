//! Confusion matrices and the metrics derived from them.
//!
//! Rows index the true class and columns the predicted class. Every ratio
//! with an empty denominator is reported as 0 rather than NaN.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    class_names: Vec<String>,
    /// `counts[t][p]`
    counts: Vec<Vec<u64>>,
}

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        ConfusionMatrix {
            class_names,
            counts: vec![vec![0; k]; k],
        }
    }

    /// Matrix with classes named `0`, `1`, ….
    pub fn unnamed(k: usize) -> Self {
        Self::new((0..k).map(|i| i.to_string()).collect())
    }

    pub fn from_counts(class_names: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = class_names.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::invalid(format!("confusion matrix must be {k}×{k}")));
        }
        Ok(ConfusionMatrix { class_names, counts })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let k = self.classes();
        if truth >= k || pred >= k {
            return Err(Error::invalid(format!("class index ({truth}, {pred}) out of range for {k} classes")));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    /// Adds every `(label, prediction)` pair; nothing is recorded on error.
    pub fn accumulate(&mut self, preds: &[usize], labels: &[usize]) -> Result<()> {
        if preds.len() != labels.len() {
            return Err(Error::invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
        }
        let k = self.classes();
        if let Some((t, p)) = labels.iter().zip(preds).find(|(&t, &p)| t >= k || p >= k) {
            return Err(Error::invalid(format!("class index ({t}, {p}) out of range for {k} classes")));
        }
        for (&t, &p) in labels.iter().zip(preds) {
            self.counts[t][p] += 1;
        }
        Ok(())
    }

    /// Cell-wise sum.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.class_names != other.class_names {
            return Err(Error::invalid("cannot merge confusion matrices over different classes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    pub fn binary_counts(&self, k: usize) -> BinaryCounts {
        let tp = self.counts[k][k];
        let fp = self.col_sum(k) - tp;
        let fn_ = self.row_sum(k) - tp;
        let tn = self.total() - tp - fp - fn_;
        BinaryCounts { tp, tn, fp, fn_ }
    }

    /// `(precision, recall, F1)` for class `k`.
    pub fn precision_recall_f1(&self, k: usize) -> (f64, f64, f64) {
        let c = self.binary_counts(k);
        let p = ratio(c.tp, c.tp + c.fp);
        let r = ratio(c.tp, c.tp + c.fn_);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f1)
    }

    /// Row-normalized diagonal; 0 (with a warning) for classes with no samples.
    pub fn per_class_diagonal_accuracy(&self) -> Vec<f64> {
        (0..self.classes())
            .map(|k| {
                let n = self.row_sum(k);
                if n == 0 {
                    log::warn!("class {:?} has no samples; diagonal accuracy reported as 0", self.class_names[k]);
                }
                ratio(self.counts[k][k], n)
            })
            .collect()
    }

    /// `(TP + TN) / total` for class `k` treated as a binary problem.
    pub fn one_vs_rest_accuracy(&self, k: usize) -> f64 {
        let c = self.binary_counts(k);
        ratio(c.tp + c.tn, self.total())
    }

    /// CSV with class names as header row and first column.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\pred".to_string()];
        header.extend(self.class_names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut counts = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.get(0) != names.get(i).map(String::as_str) {
                return Err(Error::invalid(format!("matrix CSV row {i} is not labelled {:?}", names.get(i))));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<u64>().map_err(|_| Error::invalid(format!("bad count {v:?} in matrix CSV"))))
                .collect::<Result<Vec<_>>>()?;
            counts.push(row);
        }
        Self::from_counts(names, counts)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

/// Matrix of `labels` against `preds` over `k` classes.
pub fn confusion_accumulate(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::unnamed(k);
    m.accumulate(preds, labels)?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Row-normalized diagonal entry; equal to recall.
    pub diagonal_accuracy: f64,
    /// Binary accuracy `(TP + TN) / total` of this class against the rest.
    pub one_vs_rest_accuracy: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    pub macro_f1: f64,
    /// Per-class F1 weighted by true-class count.
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub matrix: ConfusionMatrix,
}

impl MetricsReport {
    pub fn class(&self, name: &str) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|c| c.name == name)
    }
}

pub fn overall_metrics(matrix: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = matrix.total();
    if total == 0 {
        return Err(Error::invalid("cannot compute metrics of an empty confusion matrix"));
    }
    let diag = matrix.per_class_diagonal_accuracy();
    let per_class: Vec<ClassMetrics> = (0..matrix.classes())
        .map(|k| {
            let (precision, recall, f1) = matrix.precision_recall_f1(k);
            ClassMetrics {
                name: matrix.class_names()[k].clone(),
                precision,
                recall,
                f1,
                diagonal_accuracy: diag[k],
                one_vs_rest_accuracy: matrix.one_vs_rest_accuracy(k),
                support: matrix.row_sum(k),
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64;
    let weighted_f1 = per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / total as f64;
    Ok(MetricsReport {
        overall_accuracy: matrix.trace() as f64 / total as f64,
        macro_f1,
        weighted_f1,
        per_class,
        matrix: matrix.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::invalid(format!("unknown report format {other:?} (expected json, csv or markdown)"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

/// Whole percent, as printed in the per-class table.
pub fn percent(x: f64) -> String {
    format!("{:.0}", 100.0 * x)
}

pub fn report_emit(report: &MetricsReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Csv => emit_csv(report),
        ReportFormat::Markdown => Ok(emit_markdown(report)),
    }
}

fn emit_csv(report: &MetricsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "class", "value"]).map_err(csv_err)?;
    for (name, v) in [
        ("overall_accuracy", report.overall_accuracy),
        ("macro_f1", report.macro_f1),
        ("weighted_f1", report.weighted_f1),
    ] {
        w.write_record([name, "", &v.to_string()]).map_err(csv_err)?;
    }
    for c in &report.per_class {
        for (name, v) in [
            ("precision", c.precision),
            ("recall", c.recall),
            ("f1", c.f1),
            ("diagonal_accuracy", c.diagonal_accuracy),
            ("one_vs_rest_accuracy", c.one_vs_rest_accuracy),
        ] {
            w.write_record([name, &c.name, &v.to_string()]).map_err(csv_err)?;
        }
        w.write_record(["support", &c.name, &c.support.to_string()]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn emit_markdown(report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| Metric | Value |");
    let _ = writeln!(s, "|---|---|");
    let _ = writeln!(s, "| Accuracy | {}% |", percent(report.overall_accuracy));
    let _ = writeln!(s, "| Macro F1 | {:.2} |", report.macro_f1);
    let _ = writeln!(s, "| Weighted F1 | {:.2} |", report.weighted_f1);
    s.push('\n');
    s.push_str(&per_class_table(report));
    s.push('\n');
    let _ = writeln!(s, "| Class | Precision | Recall | F1 | One-vs-rest accuracy | Support |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for c in &report.per_class {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
            c.name, c.precision, c.recall, c.f1, c.one_vs_rest_accuracy, c.support
        );
    }
    s
}

/// Two-column table of class label and diagonal accuracy in whole percent.
pub fn per_class_table(report: &MetricsReport) -> String {
    let mut s = String::from("| Class Label | Accuracy (%) |\n|---|---|\n");
    for c in &report.per_class {
        let _ = writeln!(s, "| {} | {} |", c.name, percent(c.diagonal_accuracy));
    }
    s
}

/// One line of an experiment comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub architecture: String,
    pub loss: String,
    pub accuracy: f64,
    pub f1: f64,
    /// Class whose accuracy gets its own column.
    pub focus_class: String,
    pub focus_accuracy: f64,
}

impl ComparisonRow {
    /// Uses overall accuracy, macro F1 and the focus class's diagonal accuracy.
    pub fn from_report(architecture: &str, loss: &str, report: &MetricsReport, focus_class: &str) -> Result<Self> {
        let focus = report
            .class(focus_class)
            .ok_or_else(|| Error::invalid(format!("report has no class {focus_class:?}")))?;
        Ok(ComparisonRow {
            architecture: architecture.into(),
            loss: loss.into(),
            accuracy: report.overall_accuracy,
            f1: report.macro_f1,
            focus_class: focus_class.into(),
            focus_accuracy: focus.diagonal_accuracy,
        })
    }

    /// `85% / 0.86 / 55%`
    pub fn summary(&self) -> String {
        format!("{}% / {:.2} / {}%", percent(self.accuracy), self.f1, percent(self.focus_accuracy))
    }
}

/// Markdown comparison table; the focus column is titled after the first row.
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let focus = rows.first().map_or("Focus class", |r| r.focus_class.as_str());
    let mut s = format!(
        "| Ensemble Architecture | Loss Function | Accuracy Score | F1-Score | {focus} Accuracy |\n|---|---|---|---|---|\n"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {}% | {:.2} | {}% |",
            r.architecture,
            r.loss,
            percent(r.accuracy),
            r.f1,
            percent(r.focus_accuracy)
        );
    }
    s
}

pub mod fixtures;
