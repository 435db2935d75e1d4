//! Central finite-difference checks of the analytic gradients.
//!
//! The numeric side only ever evaluates forward losses, so it shares no code
//! with the backward rules it checks.

use crate::error::Result;
use crate::nn::MiVolo;
use crate::nn::Prediction;
use crate::train::objective::{loss_and_grads, LabeledPair};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Which entries of each parameter tensor to probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Every scalar of every parameter.
    All,
    /// Up to `n` evenly spaced entries per parameter tensor.
    PerGroup(usize),
}

#[derive(Debug, Clone)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// `(index, analytic, numeric)` for every probed entry.
    pub samples: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupResult>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn worst(&self) -> Option<&GroupResult> {
        self.groups.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Entries with `|a - n| > abs + rel * max(|a|, |n|)`, as
    /// `(group, index, analytic, numeric)`.
    pub fn violations(&self, rel: f64, abs: f64) -> Vec<(&str, usize, f64, f64)> {
        self.groups
            .iter()
            .flat_map(|g| g.samples.iter().map(move |&(i, a, n)| (g.name.as_str(), i, a, n)))
            .filter(|&(_, _, a, n)| (a - n).abs() > abs + rel * a.abs().max(n.abs()))
            .collect()
    }
}

fn probe_indices(len: usize, selection: Selection) -> Vec<usize> {
    match selection {
        Selection::All => (0..len).collect(),
        Selection::PerGroup(n) if n >= len => (0..len).collect(),
        Selection::PerGroup(n) => {
            let mut idx: Vec<usize> = (0..n).map(|i| i * len / n + (len / n) / 2).collect();
            idx.dedup();
            idx
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `softplus(a) - softplus(b)` without cancellation when `a` is close to `b`.
fn softplus_diff(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (hi, lo, sign) = if a > b { (a, b, 1.0) } else { (b, a, -1.0) };
    // log((1 + e^hi) / (1 + e^lo)) = log1p(expm1(hi - lo) * s(lo)), s the logistic
    let s_lo = if lo >= 0.0 { 1.0 / (1.0 + (-lo).exp()) } else { lo.exp() / (1.0 + lo.exp()) };
    let d = (hi - lo).exp_m1() * s_lo;
    if d.is_finite() {
        sign * d.ln_1p()
    } else {
        sign * (softplus(hi) - softplus(lo))
    }
}

/// `loss(plus) - loss(minus)` for one sample, from forward outputs only.
/// The loss is re-derived here in closed form and differenced term by term,
/// so the result keeps the precision of the outputs rather than that of the
/// (much larger) loss value.
fn sample_loss_delta(plus: &Prediction, minus: &Prediction, s: &LabeledPair, gender_weight: f64) -> f64 {
    let (pp, pm) = (plus.age_norm, minus.age_norm);
    let age = s.weight * (pp - pm) * (pp + pm - 2.0 * s.age_norm);
    // two-logit cross-entropy is softplus of the wrong-minus-right margin
    let margin = |p: &Prediction| {
        let [m, f] = p.gender_logits;
        if s.gender == 0 {
            f - m
        } else {
            m - f
        }
    };
    age + gender_weight * softplus_diff(margin(plus), margin(minus))
}

/// Mean-loss difference between two models on `batch`, from forward outputs.
pub fn batch_loss_delta(plus: &MiVolo, minus: &MiVolo, batch: &[LabeledPair]) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let a = plus.forward_pair(&s.pair)?;
        let b = minus.forward_pair(&s.pair)?;
        total += sample_loss_delta(&a, &b, s, plus.config.loss.gender_weight);
    }
    Ok(total / batch.len() as f64)
}

/// Compares backward-pass gradients of the mean training loss on `batch`
/// against central differences with step `h`, parameter by parameter.
/// Frozen parameters are skipped.
pub fn check_model(model: &MiVolo, batch: &[LabeledPair], selection: Selection, h: f64) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(model, batch, None)?;
    let mut plus = model.clone();
    let mut minus = model.clone();
    let mut groups = Vec::new();
    for (pid, grad) in model.store.ids().zip(&grads) {
        let param = model.store.param(pid);
        if param.frozen {
            continue;
        }
        let mut result = GroupResult {
            name: param.name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            samples: Vec::new(),
        };
        for i in probe_indices(param.value.len(), selection) {
            let original = param.value.data()[i];
            plus.store.param_mut(pid).value.data_mut()[i] = original + h;
            minus.store.param_mut(pid).value.data_mut()[i] = original - h;
            let delta = batch_loss_delta(&plus, &minus, batch)?;
            plus.store.param_mut(pid).value.data_mut()[i] = original;
            minus.store.param_mut(pid).value.data_mut()[i] = original;

            let numeric = delta / (2.0 * h);
            let analytic = grad.data()[i];
            let err = relative_error(analytic, numeric);
            result.checked += 1;
            result.samples.push((i, analytic, numeric));
            if err > result.max_rel_error || result.checked == 1 {
                result.max_rel_error = err;
                result.worst_index = i;
                result.worst_analytic = analytic;
                result.worst_numeric = numeric;
            }
        }
        groups.push(result);
    }
    Ok(GradCheckReport { groups })
}
