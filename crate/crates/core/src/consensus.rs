//! Dawid–Skene expectation maximization over multi-annotator labels.
//!
//! Each annotator `a` is modelled by a row-stochastic confusion matrix
//! `π_a[t][l] = P(a says l | true class t)`; class priors `p` and item
//! posteriors `T` are estimated jointly. The E-step runs in log space.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;

pub const DEFAULT_SMOOTHING: f64 = 0.01;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;

/// One label given by one annotator to one item (indices into the set's id tables).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub item: usize,
    pub annotator: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    item_ids: Vec<String>,
    annotator_ids: Vec<String>,
    classes: usize,
    /// Per item, the `(annotator, label)` pairs in record order.
    by_item: Vec<Vec<(usize, usize)>>,
}

impl AnnotationSet {
    /// Builds the set from explicit id tables and index records. Every item
    /// must carry at least one record and no `(item, annotator)` pair may repeat.
    pub fn new(
        item_ids: Vec<String>,
        annotator_ids: Vec<String>,
        classes: usize,
        records: &[AnnotationRecord],
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("annotation set needs at least 2 classes"));
        }
        let mut by_item = vec![Vec::new(); item_ids.len()];
        let mut seen = HashSet::new();
        for r in records {
            if r.item >= item_ids.len() || r.annotator >= annotator_ids.len() {
                return Err(Error::invalid(format!("record {r:?} refers to an unknown item or annotator")));
            }
            if r.label >= classes {
                return Err(Error::invalid(format!(
                    "item {:?}: label {} ≥ class count {classes}",
                    item_ids[r.item], r.label
                )));
            }
            if !seen.insert((r.item, r.annotator)) {
                return Err(Error::invalid(format!(
                    "duplicate annotation of item {:?} by {:?}",
                    item_ids[r.item], annotator_ids[r.annotator]
                )));
            }
            by_item[r.item].push((r.annotator, r.label));
        }
        if let Some(i) = by_item.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("item {:?} has no annotations", item_ids[i])));
        }
        Ok(AnnotationSet {
            item_ids,
            annotator_ids,
            classes,
            by_item,
        })
    }

    /// Builds the set from string-keyed triples; ids are numbered in order of
    /// first appearance.
    pub fn from_triples<'a, I>(classes: usize, triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, usize)>,
    {
        let mut items: Vec<String> = Vec::new();
        let mut annotators: Vec<String> = Vec::new();
        let mut item_idx: HashMap<String, usize> = HashMap::new();
        let mut ann_idx: HashMap<String, usize> = HashMap::new();
        let mut records = Vec::new();
        for (item, annotator, label) in triples {
            let i = *item_idx.entry(item.to_string()).or_insert_with(|| {
                items.push(item.to_string());
                items.len() - 1
            });
            let a = *ann_idx.entry(annotator.to_string()).or_insert_with(|| {
                annotators.push(annotator.to_string());
                annotators.len() - 1
            });
            records.push(AnnotationRecord {
                item: i,
                annotator: a,
                label,
            });
        }
        Self::new(items, annotators, classes, &records)
    }

    pub fn items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn annotators(&self) -> usize {
        self.annotator_ids.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn annotator_ids(&self) -> &[String] {
        &self.annotator_ids
    }

    /// `(annotator, label)` pairs recorded for item `i`.
    pub fn labels_of(&self, i: usize) -> &[(usize, usize)] {
        &self.by_item[i]
    }

    pub fn records(&self) -> impl Iterator<Item = AnnotationRecord> + '_ {
        self.by_item.iter().enumerate().flat_map(|(item, ls)| {
            ls.iter().map(move |&(annotator, label)| AnnotationRecord { item, annotator, label })
        })
    }

    /// Reads `item_id,annotator_id,label` CSV. `classes` defaults to the
    /// largest label + 1 (at least 2).
    pub fn read_csv(path: &Path, classes: Option<usize>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            item_id: String,
            annotator_id: String,
            label: usize,
        }
        let csv_err = |detail: String| Error::Csv {
            path: path.to_path_buf(),
            detail,
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| csv_err(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["item_id", "annotator_id", "label"] {
            return Err(csv_err("expected header item_id,annotator_id,label".into()));
        }
        let rows: Vec<Row> = rdr
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| csv_err(e.to_string()))?;
        let k = classes.unwrap_or_else(|| rows.iter().map(|r| r.label + 1).max().unwrap_or(0).max(2));
        Self::from_triples(
            k,
            rows.iter().map(|r| (r.item_id.as_str(), r.annotator_id.as_str(), r.label)),
        )
        .map_err(|e| csv_err(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("item_id,annotator_id,label\n");
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in self.records() {
            w.write_record([
                self.item_ids[r.item].as_str(),
                self.annotator_ids[r.annotator].as_str(),
                &r.label.to_string(),
            ])
            .map_err(|e| Error::Csv {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        }
        out.push_str(&String::from_utf8_lossy(&w.into_inner().map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?));
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Model parameters and posteriors after one or more EM iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DawidSkeneState {
    pub priors: Vec<f64>,
    /// Per annotator, a row-major `K×K` matrix `π_a[true][given]`.
    pub confusions: Vec<Vec<f64>>,
    /// Row-major `I×K` posterior over true classes.
    pub posterior: Vec<f64>,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Observed-data log-likelihood after each M-step.
    pub log_likelihood_trace: Vec<f64>,
    /// [`ds_objective`] after each M-step; monotone.
    pub objective_trace: Vec<f64>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Vote proportions per item.
pub fn ds_initialize(ann: &AnnotationSet) -> Result<Vec<f64>> {
    let k = ann.classes;
    let mut t = vec![0.0; ann.items() * k];
    for i in 0..ann.items() {
        let labels = ann.labels_of(i);
        if labels.is_empty() {
            return Err(Error::invalid(format!("item {:?} has no annotations", ann.item_ids[i])));
        }
        let share = 1.0 / labels.len() as f64;
        for &(_, l) in labels {
            t[i * k + l] += share;
        }
    }
    Ok(t)
}

pub fn ds_m_step(ann: &AnnotationSet, posterior: &[f64], smoothing: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let k = ann.classes;
    if posterior.len() != ann.items() * k {
        return Err(Error::shape("ds_m_step posterior", &[posterior.len()], &[ann.items(), k]));
    }
    if !(smoothing >= 0.0) {
        return Err(Error::invalid(format!("smoothing must be nonnegative, got {smoothing}")));
    }
    let mut priors = vec![0.0; k];
    for row in posterior.chunks(k) {
        for (p, t) in priors.iter_mut().zip(row) {
            *p += t;
        }
    }
    let total: f64 = priors.iter().sum();
    for p in &mut priors {
        *p /= total;
    }

    let mut counts = vec![vec![smoothing; k * k]; ann.annotators()];
    let mut active = vec![false; ann.annotators()];
    for i in 0..ann.items() {
        let row = &posterior[i * k..(i + 1) * k];
        for &(a, l) in ann.labels_of(i) {
            active[a] = true;
            for t in 0..k {
                counts[a][t * k + l] += row[t];
            }
        }
    }
    for (a, m) in counts.iter_mut().enumerate() {
        if !active[a] {
            log::warn!("annotator {:?} has no records; excluded", ann.annotator_ids[a]);
        }
        for row in m.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            } else {
                row.iter_mut().for_each(|v| *v = 1.0 / k as f64);
            }
        }
    }
    Ok((priors, counts))
}

fn check_params(ann: &AnnotationSet, priors: &[f64], confusions: &[Vec<f64>]) -> Result<()> {
    let k = ann.classes;
    if priors.len() != k || confusions.len() != ann.annotators() || confusions.iter().any(|m| m.len() != k * k) {
        return Err(Error::invalid(format!(
            "parameters do not match {} classes and {} annotators",
            k,
            ann.annotators()
        )));
    }
    Ok(())
}

/// Unnormalized log joint `log p[k] + Σ log π_a[k][l]` for item `i`.
fn item_log_joint(ann: &AnnotationSet, i: usize, log_p: &[f64], log_pi: &[Vec<f64>], out: &mut [f64]) {
    let k = ann.classes;
    out.copy_from_slice(log_p);
    for &(a, l) in ann.labels_of(i) {
        for (t, o) in out.iter_mut().enumerate() {
            *o += log_pi[a][t * k + l];
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn logs(priors: &[f64], confusions: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    (
        priors.iter().map(|p| p.ln()).collect(),
        confusions.iter().map(|m| m.iter().map(|v| v.ln()).collect()).collect(),
    )
}

pub fn ds_e_step(ann: &AnnotationSet, priors: &[f64], confusions: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_params(ann, priors, confusions)?;
    let k = ann.classes;
    let (log_p, log_pi) = logs(priors, confusions);
    let mut post = vec![0.0; ann.items() * k];
    let mut buf = vec![0.0; k];
    for i in 0..ann.items() {
        item_log_joint(ann, i, &log_p, &log_pi, &mut buf);
        let z = log_sum_exp(&buf);
        let row = &mut post[i * k..(i + 1) * k];
        if z == f64::NEG_INFINITY {
            log::warn!("item {:?}: every class has zero probability; using uniform posterior", ann.item_ids[i]);
            row.fill(1.0 / k as f64);
        } else {
            for (r, b) in row.iter_mut().zip(&buf) {
                *r = (b - z).exp();
            }
        }
    }
    Ok(post)
}

/// `Σ_i log Σ_k p[k]·Π π_a[k][l]`; `−∞` when some item is impossible.
pub fn ds_log_likelihood(ann: &AnnotationSet, priors: &[f64], confusions: &[Vec<f64>]) -> Result<f64> {
    check_params(ann, priors, confusions)?;
    let (log_p, log_pi) = logs(priors, confusions);
    let mut buf = vec![0.0; ann.classes];
    let mut ll = 0.0;
    for i in 0..ann.items() {
        item_log_joint(ann, i, &log_p, &log_pi, &mut buf);
        ll += log_sum_exp(&buf);
    }
    Ok(ll)
}

/// The quantity the smoothed M-step maximizes: the observed-data
/// log-likelihood plus `smoothing·Σ log π_a[t][l]` (a symmetric Dirichlet
/// prior on every confusion row). Equal to [`ds_log_likelihood`] when
/// `smoothing` is 0, and nondecreasing across EM iterations in all cases.
pub fn ds_objective(ann: &AnnotationSet, priors: &[f64], confusions: &[Vec<f64>], smoothing: f64) -> Result<f64> {
    let ll = ds_log_likelihood(ann, priors, confusions)?;
    if smoothing == 0.0 {
        return Ok(ll);
    }
    let penalty: f64 = confusions.iter().flatten().map(|v| v.ln()).sum();
    Ok(ll + smoothing * penalty)
}

/// Alternates M and E steps from vote proportions until the log-likelihood
/// changes by less than `tol` or `max_iter` iterations have run.
///
/// With `smoothing > 0` the monotone quantity is [`ds_objective`], recorded
/// in `objective_trace`; the plain log-likelihood may dip slightly.
pub fn ds_run(
    ann: &AnnotationSet,
    tol: f64,
    max_iter: usize,
    smoothing: f64,
) -> Result<(ConsensusResult, DawidSkeneState)> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::invalid(format!("need tol > 0 and max_iter ≥ 1 (got {tol}, {max_iter})")));
    }
    let mut posterior = ds_initialize(ann)?;
    let mut trace: Vec<f64> = Vec::new();
    let mut objective_trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut params = (Vec::new(), Vec::new());
    for _ in 0..max_iter {
        params = ds_m_step(ann, &posterior, smoothing)?;
        let ll = ds_log_likelihood(ann, &params.0, &params.1)?;
        objective_trace.push(ds_objective(ann, &params.0, &params.1, smoothing)?);
        posterior = ds_e_step(ann, &params.0, &params.1)?;
        let prev = trace.last().copied();
        trace.push(ll);
        if let Some(prev) = prev {
            if (ll - prev).abs() < tol {
                converged = true;
                break;
            }
        }
    }
    let k = ann.classes;
    let labels: Vec<usize> = posterior.chunks(k).map(argmax).collect();
    let confidence = posterior
        .chunks(k)
        .map(|row| row.iter().cloned().fold(0.0, f64::max))
        .collect();
    let state = DawidSkeneState {
        priors: params.0,
        confusions: params.1,
        posterior,
        log_likelihood: *trace.last().expect("max_iter ≥ 1"),
    };
    Ok((
        ConsensusResult {
            labels,
            confidence,
            iterations: trace.len(),
            converged,
            log_likelihood_trace: trace,
            objective_trace,
        },
        state,
    ))
}

/// Plurality label per item; ties go to the lowest class index.
pub fn majority_vote(ann: &AnnotationSet) -> Vec<usize> {
    (0..ann.items())
        .map(|i| {
            let mut votes = vec![0.0; ann.classes];
            for &(_, l) in ann.labels_of(i) {
                votes[l] += 1.0;
            }
            argmax(&votes)
        })
        .collect()
}

/// Annotators that report the true class with probability `accuracy` and a
/// uniformly chosen wrong class otherwise; each (item, annotator) pair is
/// dropped with probability `missing`.
pub fn simulate_annotations(
    item_ids: &[String],
    truth: &[usize],
    classes: usize,
    annotators: usize,
    accuracy: f64,
    missing: f64,
    seed: u64,
) -> Result<AnnotationSet> {
    if item_ids.len() != truth.len() || annotators == 0 || classes < 2 {
        return Err(Error::invalid("simulate_annotations: inconsistent arguments"));
    }
    if !(0.0..=1.0).contains(&accuracy) || !(0.0..1.0).contains(&missing) {
        return Err(Error::invalid("accuracy must lie in [0,1] and missing in [0,1)"));
    }
    let mut records = Vec::new();
    for (i, &t) in truth.iter().enumerate() {
        let mut rng = keyed_rng(seed, "annotate", b"", i as u64);
        let start = records.len();
        for a in 0..annotators {
            // the last annotator always answers if everyone else skipped
            let forced = a + 1 == annotators && records.len() == start;
            if !forced && rng.gen_bool(missing) {
                continue;
            }
            let label = if rng.gen_bool(accuracy) {
                t
            } else {
                let wrong = rng.gen_range(0..classes - 1);
                if wrong >= t {
                    wrong + 1
                } else {
                    wrong
                }
            };
            records.push(AnnotationRecord {
                item: i,
                annotator: a,
                label,
            });
        }
    }
    AnnotationSet::new(
        item_ids.to_vec(),
        (0..annotators).map(|a| format!("annotator_{a}")).collect(),
        classes,
        &records,
    )
}

/// Two readings of agreement between two sets of positively marked items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetAgreement {
    /// `|A∩B| / |A∪B|`
    pub intersection_over_union: f64,
    /// `|A∩B| / ((|A| + |B|) / 2)`
    pub intersection_over_mean: f64,
}

pub fn agreement_from_counts(count_a: usize, count_b: usize, both: usize) -> Result<SetAgreement> {
    if both > count_a.min(count_b) {
        log::warn!("overlap {both} exceeds the smaller set ({count_a}, {count_b}); counts are inconsistent");
    }
    let union = (count_a + count_b).saturating_sub(both);
    if union == 0 {
        return Err(Error::invalid("agreement of two empty sets is undefined"));
    }
    Ok(SetAgreement {
        intersection_over_union: both as f64 / union as f64,
        intersection_over_mean: both as f64 / ((count_a + count_b) as f64 / 2.0),
    })
}

pub fn set_agreement<T: std::hash::Hash + Eq>(a: &HashSet<T>, b: &HashSet<T>) -> Result<SetAgreement> {
    agreement_from_counts(a.len(), b.len(), a.intersection(b).count())
}

/// Fraction of positions where two label sequences agree.
pub fn label_agreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "label agreement needs two equal-length nonempty sequences ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

/// `item_id,consensus_label,confidence`
pub fn write_consensus_csv(path: &Path, ann: &AnnotationSet, result: &ConsensusResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    w.write_record(["item_id", "consensus_label", "confidence"]).map_err(err)?;
    for (i, id) in ann.item_ids().iter().enumerate() {
        w.write_record([
            id.as_str(),
            &result.labels[i].to_string(),
            &format!("{:.6}", result.confidence[i]),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusDiagnostics {
    pub priors: Vec<f64>,
    /// Annotator id → `K×K` confusion matrix (rows = true class).
    pub confusions: BTreeMap<String, Vec<Vec<f64>>>,
    pub log_likelihood_trace: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ConsensusDiagnostics {
    pub fn new(ann: &AnnotationSet, result: &ConsensusResult, state: &DawidSkeneState) -> Self {
        let k = ann.classes();
        ConsensusDiagnostics {
            priors: state.priors.clone(),
            confusions: ann
                .annotator_ids()
                .iter()
                .zip(&state.confusions)
                .map(|(id, m)| (id.clone(), m.chunks(k).map(<[f64]>::to_vec).collect()))
                .collect(),
            log_likelihood_trace: result.log_likelihood_trace.clone(),
            objective_trace: result.objective_trace.clone(),
            iterations: result.iterations,
            converged: result.converged,
        }
    }
}
