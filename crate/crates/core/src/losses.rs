//! Training objectives and their exact gradients.
//!
//! * [`loss_rep`]: position-weighted negative log-likelihood
//!   `sum_t -gamma_t log p_t`, with `gamma` increasing along the horizon;
//! * [`loss_rep_focal`]: the focal-style variant `sum_t -(1 - p_t)^gamma_t log p_t`;
//! * [`loss_plau`]: the counterfactual contrastive loss
//!   `E[-log z(v, t, v') - log(1 - z(v, t, t_cf))]`;
//! * [`loss_total`]: `alpha * plau + beta * rep`.

use serde::{Deserialize, Serialize};

use crate::corpus::ActionSequence;
use crate::embedding::{cosine_grad, cosine_sim, pair_backward, pair_forward, EmbedderParams};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-12;

/// Per-token penalty weights, linearly spaced and strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSchedule {
    values: Vec<f64>,
    gamma_min: f64,
    gamma_max: f64,
}

impl GammaSchedule {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn gamma_min(&self) -> f64 {
        self.gamma_min
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma_max
    }
}

/// `steps` values from `gamma_min` to `gamma_max` inclusive. A single step
/// gets `gamma_max`: the only future token is also the farthest one.
pub fn gamma_schedule(steps: usize, gamma_min: f64, gamma_max: f64) -> Result<GammaSchedule> {
    if steps == 0 {
        return Err(Error::invalid("gamma schedule needs at least one step"));
    }
    if gamma_min.is_nan() || gamma_max.is_nan() || gamma_min >= gamma_max || !gamma_min.is_finite() || !gamma_max.is_finite() {
        return Err(Error::invalid(format!("gamma range [{gamma_min}, {gamma_max}] is empty")));
    }
    let values = if steps == 1 {
        vec![gamma_max]
    } else {
        let step = (gamma_max - gamma_min) / (steps - 1) as f64;
        (0..steps)
            .map(|t| if t == steps - 1 { gamma_max } else { gamma_min + step * t as f64 })
            .collect()
    };
    Ok(GammaSchedule { values, gamma_min, gamma_max })
}

/// Default schedule over `[0, 2]`.
pub fn default_gamma_schedule(steps: usize) -> Result<GammaSchedule> {
    gamma_schedule(steps, 0.0, 2.0)
}

/// A scalar loss with its per-term breakdown and a flat gradient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub value: f64,
    pub per_term: Vec<f64>,
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepVariant {
    /// `-gamma_t log p_t`
    Linear,
    /// `-(1 - p_t)^gamma_t log p_t`
    Focal,
}

struct RowSoftmax {
    probs: Vec<f64>,
    log_p: f64,
    /// `1 - p_target`, summed from the other probabilities.
    rest: f64,
}

fn row_softmax(row: &[f64], target: usize) -> RowSoftmax {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let rest = probs.iter().enumerate().filter(|&(j, _)| j != target).map(|(_, p)| p).sum();
    RowSoftmax { log_p: row[target] - max - sum.ln(), probs, rest }
}

fn check_rows<R: AsRef<[f64]>>(logits: &[R], targets: &[usize], gammas: &[f64]) -> Result<()> {
    if logits.len() != targets.len() || logits.len() != gammas.len() {
        return Err(Error::dim(format!(
            "{} logit rows, {} targets, {} gamma values",
            logits.len(),
            targets.len(),
            gammas.len()
        )));
    }
    for (t, (row, &target)) in logits.iter().zip(targets).enumerate() {
        let row = row.as_ref();
        if target >= row.len() {
            return Err(Error::dim(format!("target {target} at step {t} outside a row of {} logits", row.len())));
        }
        if row.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
    }
    if gammas.iter().any(|g| !g.is_finite() || *g < 0.0) {
        return Err(Error::invalid("gamma values must be finite and non-negative"));
    }
    Ok(())
}

/// Position-weighted NLL. Rows may differ in width; the gradient is the
/// concatenation of the per-row logit gradients
/// `gamma_t * (softmax(row_t) - onehot(target_t))`.
pub fn loss_rep<R: AsRef<[f64]>>(logits: &[R], targets: &[usize], gammas: &[f64]) -> Result<LossReport> {
    check_rows(logits, targets, gammas)?;
    let mut report = LossReport { value: 0.0, per_term: Vec::with_capacity(targets.len()), gradient: Vec::new() };
    for ((row, &target), &gamma) in logits.iter().zip(targets).zip(gammas) {
        let sm = row_softmax(row.as_ref(), target);
        let term = -gamma * sm.log_p.max(EPS.ln());
        report.per_term.push(term);
        report.value += term;
        report.gradient.extend(
            sm.probs.iter().enumerate().map(|(j, &s)| gamma * (s - if j == target { 1.0 } else { 0.0 })),
        );
    }
    Ok(report)
}

/// Focal-style variant `-(1 - p_t)^gamma_t log p_t`.
pub fn loss_rep_focal<R: AsRef<[f64]>>(logits: &[R], targets: &[usize], gammas: &[f64]) -> Result<LossReport> {
    check_rows(logits, targets, gammas)?;
    let mut report = LossReport { value: 0.0, per_term: Vec::with_capacity(targets.len()), gradient: Vec::new() };
    for ((row, &target), &gamma) in logits.iter().zip(targets).zip(gammas) {
        let sm = row_softmax(row.as_ref(), target);
        let log_p = sm.log_p.max(EPS.ln());
        let p = sm.probs[target];
        let q = sm.rest;
        // term = -q^gamma log p;  g = p * d(term)/dp
        let (term, g) = if gamma == 0.0 {
            (-log_p, -1.0)
        } else if q <= 0.0 {
            (0.0, 0.0)
        } else {
            let qg = q.powf(gamma);
            (-qg * log_p, gamma * q.powf(gamma - 1.0) * p * log_p - qg)
        };
        report.per_term.push(term);
        report.value += term;
        // d term / d z_j = g * (onehot_j - s_j)
        report.gradient.extend(
            sm.probs.iter().enumerate().map(|(j, &s)| g * (if j == target { 1.0 } else { 0.0 } - s)),
        );
    }
    Ok(report)
}

pub fn loss_rep_variant<R: AsRef<[f64]>>(
    variant: RepVariant,
    logits: &[R],
    targets: &[usize],
    gammas: &[f64],
) -> Result<LossReport> {
    match variant {
        RepVariant::Linear => loss_rep(logits, targets, gammas),
        RepVariant::Focal => loss_rep_focal(logits, targets, gammas),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// One contrastive example: the video vector, its augmented view, the
/// ground-truth text and its counterfactual.
#[derive(Debug, Clone, Copy)]
pub struct PlauSample<'a> {
    pub v: &'a [f64],
    pub v_aug: &'a [f64],
    pub t: &'a ActionSequence,
    pub t_cf: &'a ActionSequence,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    Ok(())
}

/// `z_pos = sigmoid(sim(dp(v, t), dp(v', t)) / tau)` and
/// `z_neg = sigmoid(sim(dp(v, t), dp(v, t_cf)) / tau)`.
pub fn z_scores(
    v: &[f64],
    v_aug: &[f64],
    t: &ActionSequence,
    t_cf: &ActionSequence,
    params: &EmbedderParams,
    tau: f64,
) -> Result<(f64, f64)> {
    check_tau(tau)?;
    let anchor = pair_forward(v, t, params)?.output;
    let pos = pair_forward(v_aug, t, params)?.output;
    let neg = pair_forward(v, t_cf, params)?.output;
    Ok((
        sigmoid(cosine_sim(&anchor, &pos).value / tau),
        sigmoid(cosine_sim(&anchor, &neg).value / tau),
    ))
}

/// Per-sample loss from the two scaled similarities, with `d loss / d x`
/// for each. Clamped regions have zero gradient.
fn plau_terms(x_pos: f64, x_neg: f64) -> (f64, f64, f64) {
    let z_pos = sigmoid(x_pos);
    let z_neg = sigmoid(x_neg);
    let (pos, d_pos) = if z_pos < EPS { (-EPS.ln(), 0.0) } else { (softplus(-x_pos), -(1.0 - z_pos)) };
    let (neg, d_neg) = if z_neg > 1.0 - EPS { (-EPS.ln(), 0.0) } else { (softplus(x_neg), z_neg) };
    (pos + neg, d_pos, d_neg)
}

/// Contrastive loss from explicit pair representations; the building block
/// of [`loss_plau`].
pub fn plau_from_pairs(anchor: &[f64], positive: &[f64], negative: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let x_pos = cosine_sim(anchor, positive).value / tau;
    let x_neg = cosine_sim(anchor, negative).value / tau;
    Ok(plau_terms(x_pos, x_neg).0)
}

#[derive(Debug, Clone)]
pub struct PlauLoss {
    /// Batch-mean loss; `gradient` is the flattened parameter gradient.
    pub report: LossReport,
    pub param_grad: EmbedderParams,
    /// Gradients w.r.t. each sample's `(v, v_aug)`.
    pub video_grads: Vec<(Vec<f64>, Vec<f64>)>,
    pub z: Vec<(f64, f64)>,
}

pub fn loss_plau(batch: &[PlauSample<'_>], params: &EmbedderParams, tau: f64) -> Result<PlauLoss> {
    check_tau(tau)?;
    if batch.is_empty() {
        return Err(Error::invalid("empty contrastive batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = params.zeros_like();
    let mut per_term = Vec::with_capacity(batch.len());
    let mut video_grads = Vec::with_capacity(batch.len());
    let mut zs = Vec::with_capacity(batch.len());
    let mut value = 0.0;

    for s in batch {
        let anchor = pair_forward(s.v, s.t, params)?;
        let pos = pair_forward(s.v_aug, s.t, params)?;
        let neg = pair_forward(s.v, s.t_cf, params)?;
        let x_pos = cosine_sim(&anchor.output, &pos.output).value / tau;
        let x_neg = cosine_sim(&anchor.output, &neg.output).value / tau;
        let (loss, d_pos, d_neg) = plau_terms(x_pos, x_neg);
        zs.push((sigmoid(x_pos), sigmoid(x_neg)));
        per_term.push(loss);
        value += scale * loss;

        let (ga_pos, gp) = cosine_grad(&anchor.output, &pos.output);
        let (ga_neg, gn) = cosine_grad(&anchor.output, &neg.output);
        let c_pos = scale * d_pos / tau;
        let c_neg = scale * d_neg / tau;
        let g_anchor: Vec<f64> = ga_pos.iter().zip(&ga_neg).map(|(a, b)| c_pos * a + c_neg * b).collect();
        let g_pos: Vec<f64> = gp.iter().map(|x| c_pos * x).collect();
        let g_neg: Vec<f64> = gn.iter().map(|x| c_neg * x).collect();

        let mut dv = pair_backward(&anchor, s.t, params, &g_anchor, &mut grad);
        let dv_aug = pair_backward(&pos, s.t, params, &g_pos, &mut grad);
        let dv_neg = pair_backward(&neg, s.t_cf, params, &g_neg, &mut grad);
        for (a, b) in dv.iter_mut().zip(&dv_neg) {
            *a += b;
        }
        video_grads.push((dv, dv_aug));
    }

    Ok(PlauLoss {
        report: LossReport { value, per_term, gradient: grad.flatten() },
        param_grad: grad,
        video_grads,
        z: zs,
    })
}

/// `alpha * plau + beta * rep`
pub fn loss_total(plau: f64, rep: f64, alpha: f64, beta: f64) -> Result<f64> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::invalid(format!("loss weights must be non-negative (alpha={alpha}, beta={beta})")));
    }
    Ok(alpha * plau + beta * rep)
}

/// Training-log record: `{"plau", "rep", "total", "step"}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub plau: f64,
    pub rep: f64,
    pub total: f64,
    pub step: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Action;
    use crate::tensor::Matrix;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn schedule_examples() {
        assert_eq!(default_gamma_schedule(5).unwrap().values(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(default_gamma_schedule(2).unwrap().values(), &[0.0, 2.0]);
        assert_eq!(default_gamma_schedule(1).unwrap().values(), &[2.0]);
        assert!(gamma_schedule(3, 2.0, 2.0).is_err());
        assert!(gamma_schedule(0, 0.0, 2.0).is_err());
        let s = gamma_schedule(40, 0.0, 2.0).unwrap();
        assert!(s.values().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s.values()[39], 2.0);
    }

    #[test]
    fn rep_uniform_logits() {
        let r = loss_rep(&[vec![0.0, 0.0], vec![0.0, 0.0]], &[0, 1], &[0.0, 2.0]).unwrap();
        assert!((r.value - 2.0 * LN2).abs() < 1e-15);
        assert_eq!(r.gradient.len(), 4);
        assert_eq!(&r.gradient[2..], &[1.0, -1.0]);
    }

    #[test]
    fn rep_confident_target_vanishes() {
        let r = loss_rep(&[vec![800.0, 0.0, 0.0]], &[0], &[2.0]).unwrap();
        assert!(r.value.abs() < 1e-300);
        let r = loss_rep_focal(&[vec![800.0, 0.0, 0.0]], &[0], &[2.0]).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn focal_uniform_logits() {
        let r = loss_rep_focal(&[vec![0.0, 0.0]], &[1], &[2.0]).unwrap();
        assert!((r.value - 0.25 * LN2).abs() < 1e-15);
    }

    #[test]
    fn rep_is_finite_for_huge_logits() {
        let r = loss_rep(&[vec![1e4, -1e4, 0.0]], &[1], &[1.0]).unwrap();
        assert!((r.value + EPS.ln()).abs() < 1e-9);
        assert!(r.gradient.iter().all(|g| g.is_finite()));
        let r = loss_rep_focal(&[vec![1e4, -1e4, 0.0]], &[1], &[1.5]).unwrap();
        assert!(r.value.is_finite() && r.gradient.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn rep_errors() {
        assert!(loss_rep(&[vec![0.0, 0.0]], &[0, 1], &[1.0]).is_err());
        assert!(loss_rep(&[vec![0.0, 0.0]], &[2], &[1.0]).is_err());
        assert!(matches!(loss_rep(&[vec![f64::NAN, 0.0]], &[0], &[1.0]), Err(Error::NonFinite(_))));
    }

    fn identity_params() -> EmbedderParams {
        // d = 2, pair output = tanh(v): the text side is ignored
        let mut p = EmbedderParams::zeros(1, 2, 2).unwrap();
        p.pair_weight = Matrix::from_vec(2, 4, vec![1., 0., 0., 0., 0., 1., 0., 0.]).unwrap();
        p
    }

    #[test]
    fn z_score_examples() {
        let p = identity_params();
        let t = ActionSequence::new("t", vec![Action::new(0, 0)]);
        let cf = ActionSequence::new("cf", vec![Action::new(0, 1)]);
        let v = [0.3, -0.2];
        let (z_pos, z_neg) = z_scores(&v, &v, &t, &cf, &p, 0.1).unwrap();
        let expected = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((z_pos - expected).abs() < 1e-12 && (z_neg - expected).abs() < 1e-12);
        assert!((z_pos - 0.99995).abs() < 1e-5);

        let (z_pos, _) = z_scores(&[0.5, 0.0], &[0.0, 0.5], &t, &cf, &p, 1.0).unwrap();
        assert!((z_pos - 0.5).abs() < 1e-15);
        let (z_pos, _) = z_scores(&[0.5, 0.0], &[-0.5, 0.0], &t, &cf, &p, 1.0).unwrap();
        assert!((z_pos - 0.268_941_421_369_995).abs() < 1e-12);

        assert!(z_scores(&v, &v, &t, &cf, &p, 0.0).is_err());
    }

    #[test]
    fn plau_examples() {
        assert!((plau_from_pairs(&[1., 0.], &[0., 1.], &[0., -1.], 1.0).unwrap() - 2.0 * LN2).abs() < 1e-15);
        let perfect = plau_from_pairs(&[1., 0.], &[1., 0.], &[-1., 0.], 0.01).unwrap();
        assert!(perfect < 1e-40);

        // anchor/positive 60 degrees apart, anchor/negative parallel, tau = 1
        let p = identity_params();
        let t = ActionSequence::new("t", vec![Action::new(0, 0)]);
        let cf = ActionSequence::new("cf", vec![Action::new(0, 1)]);
        let r = 0.5f64;
        let v = [r.atanh(), 0.0];
        let v_aug = [(r * 0.5).atanh(), (r * 3f64.sqrt() / 2.0).atanh()];
        let loss = loss_plau(&[PlauSample { v: &v, v_aug: &v_aug, t: &t, t_cf: &cf }], &p, 1.0).unwrap();
        let expected = (1.0 + (-0.5f64).exp()).ln() + (1.0 + 1f64.exp()).ln();
        assert!((loss.report.value - expected).abs() < 1e-12);
        assert!((loss.report.value - 1.7874).abs() < 1e-4);
        assert!(loss_plau(&[], &p, 1.0).is_err());
    }

    #[test]
    fn plau_decreases_with_better_scores() {
        let base = plau_terms(0.2, 0.1).0;
        assert!(plau_terms(0.3, 0.1).0 < base);
        assert!(plau_terms(0.2, 0.0).0 < base);
    }

    #[test]
    fn total_examples() {
        assert_eq!(loss_total(1.0, 3.0, 0.5, 0.5).unwrap(), 2.0);
        assert_eq!(loss_total(1.5, 3.0, 0.5, 0.0).unwrap(), 0.75);
        assert_eq!(loss_total(0.0, 0.0, 0.5, 0.5).unwrap(), 0.0);
        assert!(loss_total(1.0, 1.0, -0.1, 0.5).is_err());
    }
}
