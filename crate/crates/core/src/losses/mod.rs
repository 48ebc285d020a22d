//! Classification losses over a batch of logits, each returning the
//! batch-mean loss and its gradient with respect to the logits.
//!
//! Logits are a `B×K` [`Tensor`]; gradients come back in the same row-major
//! layout so they can be attached to a tape with
//! [`Tape::external_scalar`](crate::autodiff::Tape::external_scalar).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Objective, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Batch mean.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    /// `B×K`, row-major.
    pub grad_logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    CeLs,
    Focal,
    Ldam,
    LdamFocal,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::Ce, LossKind::CeLs, LossKind::Focal, LossKind::Ldam, LossKind::LdamFocal];

    /// Config spelling.
    pub fn key(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::CeLs => "ce_ls",
            LossKind::Focal => "focal",
            LossKind::Ldam => "ldam",
            LossKind::LdamFocal => "ldam_focal",
        }
    }

    /// Name used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            LossKind::Ce => "Cross-Entropy",
            LossKind::CeLs => "Cross-Entropy + Label Smoothing",
            LossKind::Focal => "Focal",
            LossKind::Ldam => "LDAM",
            LossKind::LdamFocal => "LDAM-Focal",
        }
    }

    pub fn needs_counts(self) -> bool {
        matches!(self, LossKind::Ldam | LossKind::LdamFocal)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| Error::invalid(format!("unknown loss kind {s:?} (expected ce, ce_ls, focal, ldam or ldam_focal)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub ls_epsilon: f64,
    pub focal_gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal_alpha: Option<Vec<f64>>,
    pub ldam_max_margin: f64,
    pub ldam_scale: f64,
    pub mix_alpha: f64,
    pub mix_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Ce,
            ls_epsilon: 0.1,
            focal_gamma: 2.0,
            focal_alpha: None,
            ldam_max_margin: 0.5,
            ldam_scale: 30.0,
            mix_alpha: 1.0,
            mix_beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn with_kind(kind: LossKind) -> Self {
        LossConfig {
            kind,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self, classes: usize, counts: Option<&[usize]>) -> Result<()> {
        match self.kind {
            LossKind::Ce => {}
            LossKind::CeLs => check_epsilon(self.ls_epsilon)?,
            LossKind::Focal => check_focal(self.focal_gamma, self.focal_alpha.as_deref(), classes)?,
            LossKind::Ldam => check_ldam(self.ldam_max_margin, self.ldam_scale)?,
            LossKind::LdamFocal => {
                check_focal(self.focal_gamma, self.focal_alpha.as_deref(), classes)?;
                check_ldam(self.ldam_max_margin, self.ldam_scale)?;
                check_mix(self.mix_alpha, self.mix_beta)?;
            }
        }
        if self.kind.needs_counts() {
            let counts = counts.ok_or_else(|| Error::invalid(format!("loss {} needs class counts", self.kind)))?;
            if counts.len() != classes {
                return Err(Error::invalid(format!("{} class counts for {classes} classes", counts.len())));
            }
        }
        if self.kind.needs_counts() && self.ldam_max_margin <= 0.0 {
            return Err(Error::invalid("loss.ldam_max_margin must be positive"));
        }
        Ok(())
    }

    /// Evaluates the configured loss; `counts` are per-class training counts.
    pub fn compute(&self, logits: &Tensor, labels: &[usize], counts: Option<&[usize]>) -> Result<LossOutput> {
        let need = || counts.ok_or_else(|| Error::invalid(format!("loss {} needs class counts", self.kind)));
        match self.kind {
            LossKind::Ce => cross_entropy(logits, labels),
            LossKind::CeLs => cross_entropy_label_smoothing(logits, labels, self.ls_epsilon),
            LossKind::Focal => focal_loss(logits, labels, self.focal_gamma, self.focal_alpha.as_deref()),
            LossKind::Ldam => ldam_loss(logits, labels, need()?, self.ldam_max_margin, self.ldam_scale),
            LossKind::LdamFocal => ldam_focal_loss(
                logits,
                labels,
                need()?,
                FocalParams {
                    gamma: self.focal_gamma,
                    alpha: self.focal_alpha.as_deref(),
                },
                LdamParams {
                    max_margin: self.ldam_max_margin,
                    scale: self.ldam_scale,
                },
                self.mix_alpha,
                self.mix_beta,
            ),
        }
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid(format!("label smoothing epsilon must lie in [0, 1), got {eps}")));
    }
    Ok(())
}

fn check_focal(gamma: f64, alpha: Option<&[f64]>, classes: usize) -> Result<()> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("focal gamma must be nonnegative, got {gamma}")));
    }
    if let Some(a) = alpha {
        if a.len() != classes {
            return Err(Error::invalid(format!("focal alpha has {} entries for {classes} classes", a.len())));
        }
        if a.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("focal alpha weights must be positive"));
        }
    }
    Ok(())
}

fn check_ldam(max_margin: f64, scale: f64) -> Result<()> {
    if !(max_margin >= 0.0) || !max_margin.is_finite() {
        return Err(Error::invalid(format!("LDAM max margin must be nonnegative, got {max_margin}")));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("LDAM scale must be positive, got {scale}")));
    }
    Ok(())
}

fn check_mix(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && beta >= 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::invalid(format!("mix weights must be nonnegative, got ({alpha}, {beta})")));
    }
    if alpha == 0.0 && beta == 0.0 {
        return Err(Error::invalid("mix weights cannot both be zero"));
    }
    Ok(())
}

/// Checks shapes and labels, returning `(batch, classes)`.
fn batch_dims(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let &[b, k] = logits.shape() else {
        return Err(Error::invalid(format!("logits must be B×K, got shape {:?}", logits.shape())));
    };
    if b != labels.len() {
        return Err(Error::shape("loss", logits.shape(), &[labels.len()]));
    }
    if b == 0 || k == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    Ok((b, k))
}

/// Stable `log softmax` of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

/// Shared body for losses of the form `−Σ_k q_k log softmax(z)_k` with a
/// target distribution `q` summing to one.
fn soft_target_ce(logits: &Tensor, labels: &[usize], target: impl Fn(usize, usize) -> f64) -> Result<LossOutput> {
    let (b, k) = batch_dims(logits, labels)?;
    let mut per_sample = Vec::with_capacity(b);
    let mut grad = Vec::with_capacity(b * k);
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let logp = log_softmax(row);
        let mut loss = 0.0;
        for (j, &lp) in logp.iter().enumerate() {
            let q = target(y, j);
            if q != 0.0 {
                loss -= q * lp;
            }
            grad.push((lp.exp() - q) / b as f64);
        }
        per_sample.push(loss);
    }
    Ok(finish(per_sample, grad))
}

fn finish(per_sample: Vec<f64>, grad_logits: Vec<f64>) -> LossOutput {
    let loss = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    LossOutput {
        loss,
        per_sample,
        grad_logits,
    }
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    soft_target_ce(logits, labels, |y, j| if j == y { 1.0 } else { 0.0 })
}

/// Target `(1−ε)·onehot + ε/K`.
pub fn cross_entropy_label_smoothing(logits: &Tensor, labels: &[usize], epsilon: f64) -> Result<LossOutput> {
    check_epsilon(epsilon)?;
    let k = logits.shape().last().copied().unwrap_or(0).max(1) as f64;
    soft_target_ce(logits, labels, |y, j| {
        let base = epsilon / k;
        if j == y {
            1.0 - epsilon + base
        } else {
            base
        }
    })
}

/// `−α_y (1−p_y)^γ log p_y`; `alpha` defaults to all ones.
pub fn focal_loss(logits: &Tensor, labels: &[usize], gamma: f64, alpha: Option<&[f64]>) -> Result<LossOutput> {
    let (b, k) = batch_dims(logits, labels)?;
    check_focal(gamma, alpha, k)?;
    let mut per_sample = Vec::with_capacity(b);
    let mut grad = Vec::with_capacity(b * k);
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let logp = log_softmax(row);
        let a = alpha.map_or(1.0, |w| w[y]);
        let lp = logp[y];
        let p = lp.exp();
        // 1 − p without cancellation when p is close to one.
        let q = -lp.exp_m1();
        per_sample.push(-a * q.powf(gamma) * lp);
        // dℓ/dz_j = −α [q^γ − γ p q^(γ−1) log p] (δ_yj − p_j)
        let tail = if gamma == 0.0 || q == 0.0 {
            0.0
        } else {
            gamma * p * q.powf(gamma - 1.0) * lp
        };
        let coef = -a * (q.powf(gamma) - tail);
        for (j, &lpj) in logp.iter().enumerate() {
            let delta = if j == y { 1.0 } else { 0.0 };
            grad.push(coef * (delta - lpj.exp()) / b as f64);
        }
    }
    Ok(finish(per_sample, grad))
}

/// Per-class margins `C·n_j^(−1/4)` scaled so the rarest class gets `max_margin`.
pub fn ldam_margins(counts: &[usize], max_margin: f64) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::invalid("LDAM needs at least one class count"));
    }
    if counts.contains(&0) {
        return Err(Error::invalid("LDAM class counts must be positive"));
    }
    check_ldam(max_margin, 1.0)?;
    let min = *counts.iter().min().expect("nonempty") as f64;
    Ok(counts.iter().map(|&n| max_margin * (min / n as f64).powf(0.25)).collect())
}

/// Cross-entropy over `s·(z − Δ_y·onehot_y)`.
pub fn ldam_loss(logits: &Tensor, labels: &[usize], counts: &[usize], max_margin: f64, scale: f64) -> Result<LossOutput> {
    let (b, k) = batch_dims(logits, labels)?;
    check_ldam(max_margin, scale)?;
    if counts.len() != k {
        return Err(Error::invalid(format!("{} class counts for {k} classes", counts.len())));
    }
    let margins = ldam_margins(counts, max_margin)?;
    let mut per_sample = Vec::with_capacity(b);
    let mut grad = Vec::with_capacity(b * k);
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let shifted: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(j, &z)| scale * if j == y { z - margins[y] } else { z })
            .collect();
        let logp = log_softmax(&shifted);
        per_sample.push(-logp[y]);
        for (j, &lp) in logp.iter().enumerate() {
            let delta = if j == y { 1.0 } else { 0.0 };
            grad.push(scale * (lp.exp() - delta) / b as f64);
        }
    }
    Ok(finish(per_sample, grad))
}

#[derive(Debug, Clone, Copy)]
pub struct FocalParams<'a> {
    pub gamma: f64,
    pub alpha: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy)]
pub struct LdamParams {
    pub max_margin: f64,
    pub scale: f64,
}

/// `mix_alpha·focal + mix_beta·ldam`.
pub fn ldam_focal_loss(
    logits: &Tensor,
    labels: &[usize],
    counts: &[usize],
    focal: FocalParams<'_>,
    ldam: LdamParams,
    mix_alpha: f64,
    mix_beta: f64,
) -> Result<LossOutput> {
    check_mix(mix_alpha, mix_beta)?;
    let f = focal_loss(logits, labels, focal.gamma, focal.alpha)?;
    let l = ldam_loss(logits, labels, counts, ldam.max_margin, ldam.scale)?;
    let combine = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| mix_alpha * x + mix_beta * y).collect::<Vec<_>>();
    Ok(finish(combine(&f.per_sample, &l.per_sample), combine(&f.grad_logits, &l.grad_logits)))
}

/// Wraps a loss evaluated at a single logits tensor for gradient checking.
pub struct LossObjective<F>(pub F);

impl<F> Objective for LossObjective<F>
where
    F: FnMut(&Tensor) -> Result<LossOutput>,
{
    fn value(&mut self, params: &[Tensor]) -> Result<f64> {
        Ok((self.0)(&params[0])?.loss)
    }

    fn gradient(&mut self, params: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![(self.0)(&params[0])?.grad_logits])
    }
}
