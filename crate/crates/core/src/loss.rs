//! Classification and regression losses. Everything takes logits and
//! returns the gradient with respect to them, evaluated in a numerically
//! stable form.

use crate::anchors::{AnchorLabels, Label};
use crate::error::{Error, Result};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln σ(s)`.
fn log_sigmoid(s: f64) -> f64 {
    -softplus(-s)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig { alpha: 0.8, gamma: 5.0 }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("focal_alpha", "must be in (0, 1)"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("focal_gamma", "must be >= 0"));
        }
        Ok(())
    }
}

/// Schedule of the negative-term factor `T(iter) = t0 + (t1 - t0) * iter / total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocusShiftState {
    pub iter: usize,
    pub total_iters: usize,
    pub t0: f64,
    pub t1: f64,
    /// Negatives with probability below this count as true negatives.
    pub tn_threshold: f64,
}

impl FocusShiftState {
    pub fn new(iter: usize, total_iters: usize) -> Self {
        FocusShiftState {
            iter,
            total_iters,
            t0: 1.0,
            t1: 10.0,
            tn_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::invalid("total_iters", "must be >= 1"));
        }
        if !(self.t0 > 0.0 && self.t1 >= self.t0) {
            return Err(Error::invalid("focus_t0/t1", "need t1 >= t0 > 0"));
        }
        if !(self.tn_threshold > 0.0 && self.tn_threshold < 1.0) {
            return Err(Error::invalid("tn_threshold", "must be in (0, 1)"));
        }
        Ok(())
    }

    pub fn factor(&self) -> f64 {
        let frac = (self.iter as f64 / self.total_iters as f64).min(1.0);
        self.t0 + (self.t1 - self.t0) * frac
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchLabelSummary {
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_tn: usize,
    pub n_all: usize,
}

/// Focal term for one element with signed logit `s` (the logit of the true
/// class): value `-a (1-q)^γ ln q` with `q = σ(s)`, and its derivative in `s`.
fn focal_term(s: f64, a: f64, gamma: f64) -> (f64, f64) {
    let ln_q = log_sigmoid(s);
    let q = sigmoid(s);
    let one_m_q = sigmoid(-s);
    let w = one_m_q.powf(gamma);
    (-a * w * ln_q, a * w * (gamma * q * ln_q - one_m_q))
}

/// Focal loss normalized by the number of positives. `labels[i]` is true for
/// positives.
pub fn focal_vanilla(logits: &[f64], labels: &[bool], cfg: &FocalConfig) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::shape("focal labels", logits.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::DegenerateBatch("focal loss needs at least one positive".into()));
    }
    let norm = 1.0 / n_pos as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, (&z, &pos)) in logits.iter().zip(labels).enumerate() {
        let (s, a, sign) = if pos { (z, cfg.alpha, 1.0) } else { (-z, 1.0 - cfg.alpha, -1.0) };
        let (l, d) = focal_term(s, a, cfg.gamma);
        loss += l * norm;
        grad[i] = sign * d * norm;
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveLoss {
    pub loss: f64,
    pub loss_neg: f64,
    pub loss_pos: f64,
    pub grad: Vec<f64>,
    pub summary: BatchLabelSummary,
}

/// Focal loss on negatives scaled by `T·ln(N_TN)/N_TN`, plus cross entropy
/// averaged over positives. `N_TN` is clamped to at least 2 and the positive
/// term is dropped when there are no positives; ignored anchors contribute
/// nothing.
pub fn focal_adaptive(logits: &[f64], labels: &[Label], cfg: &FocalConfig, state: &FocusShiftState) -> Result<AdaptiveLoss> {
    if logits.len() != labels.len() {
        return Err(Error::shape("focal labels", logits.len(), labels.len()));
    }
    let mut summary = BatchLabelSummary {
        n_all: logits.len(),
        ..Default::default()
    };
    for (&z, &l) in logits.iter().zip(labels) {
        match l {
            Label::Positive => summary.n_pos += 1,
            Label::Negative => {
                summary.n_neg += 1;
                if sigmoid(z) < state.tn_threshold {
                    summary.n_tn += 1;
                }
            }
            Label::Ignore => {}
        }
    }
    let n_tn = summary.n_tn.max(2) as f64;
    let w_neg = state.factor() * n_tn.ln() / n_tn;
    let w_pos = if summary.n_pos > 0 { 1.0 / summary.n_pos as f64 } else { 0.0 };
    let (mut loss_neg, mut loss_pos) = (0.0, 0.0);
    let mut grad = vec![0.0; logits.len()];
    for (i, (&z, &l)) in logits.iter().zip(labels).enumerate() {
        match l {
            Label::Negative => {
                let (v, d) = focal_term(-z, 1.0 - cfg.alpha, cfg.gamma);
                loss_neg += w_neg * v;
                grad[i] = -w_neg * d;
            }
            Label::Positive => {
                loss_pos += w_pos * softplus(-z);
                grad[i] = -w_pos * sigmoid(-z);
            }
            Label::Ignore => {}
        }
    }
    Ok(AdaptiveLoss {
        loss: loss_neg + loss_pos,
        loss_neg,
        loss_pos,
        grad,
        summary,
    })
}

/// Summed over the 4 components; the caller averages over positives.
pub fn smooth_l1(pred: &[f64; 4], target: &[f64; 4], beta: f64) -> (f64, [f64; 4]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let x = pred[k] - target[k];
        if x.abs() < beta {
            loss += 0.5 * x * x / beta;
            grad[k] = x / beta;
        } else {
            loss += x.abs() - 0.5 * beta;
            grad[k] = x.signum();
        }
    }
    (loss, grad)
}

/// Network outputs and targets for one pyramid level, anchor-major.
#[derive(Debug, Clone, Copy)]
pub struct LevelBatch<'a> {
    pub logits: &'a [f64],
    pub regs: &'a [[f64; 4]],
    pub labels: &'a AnchorLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnLoss {
    pub total: f64,
    pub loss_neg: f64,
    pub loss_pos: f64,
    pub loss_reg: f64,
    pub n_pos: usize,
    pub n_tn: usize,
    pub grad_logits: Vec<Vec<f64>>,
    pub grad_regs: Vec<Vec<[f64; 4]>>,
}

/// Sum over levels of the adaptive focal loss plus `lambda` times the
/// smooth-L1 regression loss averaged over that level's positives.
pub fn rpn_loss(levels: &[LevelBatch], cfg: &FocalConfig, state: &FocusShiftState, lambda: f64) -> Result<RpnLoss> {
    let mut out = RpnLoss {
        total: 0.0,
        loss_neg: 0.0,
        loss_pos: 0.0,
        loss_reg: 0.0,
        n_pos: 0,
        n_tn: 0,
        grad_logits: Vec::with_capacity(levels.len()),
        grad_regs: Vec::with_capacity(levels.len()),
    };
    for (li, lv) in levels.iter().enumerate() {
        let n = lv.labels.labels.len();
        if lv.logits.len() != n || lv.regs.len() != n || lv.labels.targets.len() != n {
            return Err(Error::shape(
                format!("rpn level {li} anchors"),
                n,
                format!("{} logits / {} regressions", lv.logits.len(), lv.regs.len()),
            ));
        }
        let cls = focal_adaptive(lv.logits, &lv.labels.labels, cfg, state)?;
        let mut greg = vec![[0.0; 4]; n];
        let mut reg = 0.0;
        let n_pos = cls.summary.n_pos;
        if n_pos > 0 {
            let w = lambda / n_pos as f64;
            for i in 0..n {
                if lv.labels.labels[i] == Label::Positive {
                    let (l, g) = smooth_l1(&lv.regs[i], &lv.labels.targets[i], 1.0);
                    reg += w * l;
                    greg[i] = g.map(|v| w * v);
                }
            }
        }
        out.loss_neg += cls.loss_neg;
        out.loss_pos += cls.loss_pos;
        out.loss_reg += reg;
        out.n_pos += n_pos;
        out.n_tn += cls.summary.n_tn;
        out.grad_logits.push(cls.grad);
        out.grad_regs.push(greg);
    }
    out.total = out.loss_neg + out.loss_pos + out.loss_reg;
    Ok(out)
}

/// Mean binary cross entropy over proposals; zero for an empty set.
pub fn fprn_loss(logits: &[f64], labels: &[bool]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::shape("fprn labels", logits.len(), labels.len()));
    }
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let w = 1.0 / logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &pos)| {
            if pos {
                loss += w * softplus(-z);
                -w * sigmoid(-z)
            } else {
                loss += w * softplus(z);
                w * sigmoid(z)
            }
        })
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(800.0).is_finite());
        assert!((sigmoid(-1.0) - 0.268_941_4).abs() < 1e-7);
    }

    #[test]
    fn vanilla_needs_a_positive() {
        let err = focal_vanilla(&[0.1, -0.3], &[false, false], &FocalConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(_)));
    }

    #[test]
    fn vanilla_perfect_predictions_vanish() {
        let (l, _) = focal_vanilla(&[40.0, -40.0, -40.0], &[true, false, false], &FocalConfig::default()).unwrap();
        assert!(l < 1e-15);
    }

    #[test]
    fn vanilla_reduces_to_half_ce() {
        let z = [0.3, -1.2, 2.0, 0.7];
        let y = [true, false, true, false];
        let (l, _) = focal_vanilla(&z, &y, &FocalConfig { alpha: 0.5, gamma: 0.0 }).unwrap();
        let ce: f64 = z
            .iter()
            .zip(y)
            .map(|(&z, y)| if y { -sigmoid(z).ln() } else { -(1.0 - sigmoid(z)).ln() })
            .sum();
        assert!((l - 0.5 * ce / 2.0).abs() < 1e-12);
    }

    #[test]
    fn adaptive_zero_positives_is_finite() {
        let labels = [Label::Negative; 4];
        let out = focal_adaptive(&[0.5, -2.0, 1.0, -0.1], &labels, &FocalConfig::default(), &FocusShiftState::new(0, 10)).unwrap();
        assert!(out.loss.is_finite() && out.loss_pos == 0.0);
        assert!(out.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn adaptive_confident_negatives_vanish() {
        let labels = [Label::Negative; 5];
        let out = focal_adaptive(&[-60.0; 5], &labels, &FocalConfig::default(), &FocusShiftState::new(3, 10)).unwrap();
        assert!(out.loss < 1e-20);
    }

    #[test]
    fn ignored_anchors_have_no_effect() {
        let z = [0.2, -0.4, 3.0];
        let out = focal_adaptive(&z, &[Label::Positive, Label::Ignore, Label::Negative], &FocalConfig::default(), &FocusShiftState::new(0, 1)).unwrap();
        assert_eq!(out.grad[1], 0.0);
        assert_eq!(out.summary.n_all, 3);
        assert_eq!(out.summary.n_neg, 1);
    }

    #[test]
    fn smooth_l1_branches_meet_at_beta() {
        let (a, _) = smooth_l1(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4], 1.0);
        assert!((a - 0.5).abs() < 1e-15);
        let (b, _) = smooth_l1(&[2.0, 0.0, 0.0, 0.0], &[1.0 + 1e-12, 0.0, 0.0, 0.0], 1.0);
        assert!((b - 0.5).abs() < 1e-9);
        assert_eq!(smooth_l1(&[0.3; 4], &[0.3; 4], 1.0).0, 0.0);
    }

    #[test]
    fn fprn_loss_cases() {
        assert_eq!(fprn_loss(&[], &[]).unwrap().0, 0.0);
        let (l, _) = fprn_loss(&[0.0, 0.0, 0.0], &[true, false, true]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let (l, _) = fprn_loss(&[50.0, -50.0], &[true, false]).unwrap();
        assert!(l < 1e-20);
    }
}
