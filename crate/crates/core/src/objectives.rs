//! Heteroscedastic Gaussian NLL and focal loss, as plain functions over
//! slices (reference values, diagnostics) and as graph ops (training).

use weaksig_tensor::Tensor;

use crate::error::{tensor_stage, validation, Result};

/// Floor on probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    /// Mean of `per_sample`.
    pub scalar: f64,
    pub per_sample: Vec<f64>,
}

impl LossValue {
    fn from_per_sample(per_sample: Vec<f64>) -> Result<Self> {
        let scalar = per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64;
        if !scalar.is_finite() {
            return Err(validation("loss is not finite"));
        }
        Ok(Self { scalar, per_sample })
    }
}

/// `log_var / 2 + (y − mu)² / (2 exp(log_var))` for one element.
pub fn gaussian_nll_term(y: f64, mu: f64, log_var: f64) -> f64 {
    0.5 * log_var + (y - mu) * (y - mu) / (2.0 * log_var.exp())
}

/// Row-major `[n, k]` inputs; per-sample loss is the mean over the `k`
/// targets.
pub fn gaussian_nll(y: &[f64], mu: &[f64], log_var: &[f64], k: usize) -> Result<LossValue> {
    if k == 0 || y.len() != mu.len() || y.len() != log_var.len() || y.len() % k != 0 {
        return Err(validation(format!(
            "gaussian_nll: lengths {}/{}/{} incompatible with {k} targets",
            y.len(),
            mu.len(),
            log_var.len()
        )));
    }
    if y.iter().chain(mu).chain(log_var).any(|v| !v.is_finite()) {
        return Err(validation("gaussian_nll: non-finite input"));
    }
    let per_sample = (0..y.len() / k)
        .map(|i| (i * k..(i + 1) * k).map(|j| gaussian_nll_term(y[j], mu[j], log_var[j])).sum::<f64>() / k as f64)
        .collect();
    LossValue::from_per_sample(per_sample)
}

/// Graph version of [`gaussian_nll`]: `mu`, `log_var` are `[n, k]`, `y`
/// row-major. Returns the scalar mean.
pub fn gaussian_nll_tensor(mu: &Tensor, log_var: &Tensor, y: &[f64]) -> Result<Tensor> {
    if mu.shape() != log_var.shape() || mu.numel() != y.len() {
        return Err(validation(format!(
            "gaussian_nll: mu {:?}, log_var {:?}, {} targets",
            mu.shape(),
            log_var.shape(),
            y.len()
        )));
    }
    let target = tensor_stage("gaussian_nll", Tensor::new(y.to_vec(), mu.shape()))?;
    let sq = tensor_stage("gaussian_nll", target.sub(mu))?.square();
    let weighted = tensor_stage("gaussian_nll", sq.mul(&log_var.neg().exp()))?;
    let per = tensor_stage("gaussian_nll", log_var.add(&weighted))?;
    Ok(per.mean().mul_scalar(0.5))
}

fn check_focal_args(n_classes: usize, targets: &[usize], alpha: &[f64], gamma: f64) -> Result<()> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(validation(format!("focal_loss: gamma must be >= 0, got {gamma}")));
    }
    if alpha.len() != n_classes || alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
        return Err(validation(format!("focal_loss: alpha must hold {n_classes} positive values")));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= n_classes) {
        return Err(validation(format!("focal_loss: class index {t} out of range")));
    }
    Ok(())
}

/// `−α[t] (1 − p_t)^γ ln p_t` with `p_t` the softmax probability of the
/// target; `logits` is row-major `[n, alpha.len()]`.
pub fn focal_loss(logits: &[f64], targets: &[usize], alpha: &[f64], gamma: f64) -> Result<LossValue> {
    let c = alpha.len();
    if c == 0 || logits.len() != targets.len() * c {
        return Err(validation("focal_loss: logits do not match targets and classes"));
    }
    check_focal_args(c, targets, alpha, gamma)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(validation("focal_loss: non-finite logits"));
    }
    let per_sample = logits
        .chunks(c)
        .zip(targets)
        .map(|(row, &t)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let log_p = (row[t] - lse).max(PROB_FLOOR.ln());
            let p = log_p.exp();
            let modulation = if gamma == 0.0 { 1.0 } else { (1.0 - p).powf(gamma) };
            -alpha[t] * modulation * log_p
        })
        .collect();
    LossValue::from_per_sample(per_sample)
}

/// Graph version of [`focal_loss`] over `[n, classes]` logits.
pub fn focal_loss_tensor(logits: &Tensor, targets: &[usize], alpha: &[f64], gamma: f64) -> Result<Tensor> {
    if logits.rank() != 2 || logits.shape()[1] != alpha.len() || logits.shape()[0] != targets.len() {
        return Err(validation(format!(
            "focal_loss: logits {:?} for {} targets and {} classes",
            logits.shape(),
            targets.len(),
            alpha.len()
        )));
    }
    check_focal_args(alpha.len(), targets, alpha, gamma)?;
    let floor = PROB_FLOOR.ln();
    let log_p = tensor_stage("focal_loss", logits.log_softmax().and_then(|l| l.gather_rows(targets)))?
        .map(move |v| v.max(floor), move |v, _| if v > floor { 1.0 } else { 0.0 });
    let weights = Tensor::new(targets.iter().map(|&t| -alpha[t]).collect(), &[targets.len()])?;
    let mut per = tensor_stage("focal_loss", log_p.mul(&weights))?;
    if gamma != 0.0 {
        // (1 − p)^γ with 1 − p kept off zero so the power's derivative stays finite
        let one_minus_p = log_p.exp().neg().add_scalar(1.0).map(|v| v.max(PROB_FLOOR), |v, _| {
            if v > PROB_FLOOR {
                1.0
            } else {
                0.0
            }
        });
        per = tensor_stage("focal_loss", per.mul(&one_minus_p.powf(gamma)))?;
    }
    Ok(per.mean())
}

/// `α_k = n / (K · n_k)` from training labels; classes without samples get
/// weight 1.
pub fn inverse_frequency_alpha(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let n = labels.len() as f64;
    (0..n_classes)
        .map(|k| {
            let nk = labels.iter().filter(|&&l| l == k).count();
            if nk == 0 {
                1.0
            } else {
                n / (n_classes as f64 * nk as f64)
            }
        })
        .collect()
}
