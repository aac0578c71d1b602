//! Cross-entropy and softened KL divergence over logit rows.

use alloc::vec;

use crate::tensor::{log_softmax, Tensor};
use crate::{Error, Result};

/// Mean negative log-softmax of the true class, and its gradient.
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::shape("one label per logit row is required"));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let mut grad = vec![0.0; b * c];
    let mut lsm = vec![0.0; c];
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, &y) in labels.iter().enumerate() {
        log_softmax(logits.row(i), &mut lsm);
        total -= lsm[y];
        let g = &mut grad[i * c..(i + 1) * c];
        for (gj, l) in g.iter_mut().zip(&lsm) {
            *gj = libm::exp(*l) * inv_b;
        }
        g[y] -= inv_b;
    }
    let loss = total * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy"));
    }
    Ok((loss, Tensor::from_rows(b, c, grad)?))
}

/// Which distribution leads the KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `Σ σ(s/t) ln(σ(s/t)/σ(z/t))`: student distribution leads.
    #[default]
    StudentLed,
    /// `Σ σ(z/t) ln(σ(z/t)/σ(s/t))`: the usual distillation direction.
    TeacherLed,
}

/// Batch-mean `t² · KL` between softened student and (constant) teacher
/// logits; returns the value and its gradient w.r.t. the student logits.
pub fn softened_kl(
    student: &Tensor,
    teacher: &Tensor,
    temperature: f64,
    direction: KlDirection,
) -> Result<(f64, Tensor)> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature", "must be positive"));
    }
    let (b, c) = student.dims2()?;
    if teacher.shape() != student.shape() {
        return Err(Error::shape("student and teacher logits differ in shape"));
    }
    let t = temperature;
    let inv_b = 1.0 / b as f64;
    let mut grad = vec![0.0; b * c];
    let mut ls = vec![0.0; c];
    let mut lt = vec![0.0; c];
    let mut zs = vec![0.0; c];
    let mut zt = vec![0.0; c];
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..c {
            zs[j] = student.row(i)[j] / t;
            zt[j] = teacher.row(i)[j] / t;
        }
        log_softmax(&zs, &mut ls);
        log_softmax(&zt, &mut lt);
        let g = &mut grad[i * c..(i + 1) * c];
        match direction {
            KlDirection::StudentLed => {
                let kl: f64 = (0..c).map(|j| libm::exp(ls[j]) * (ls[j] - lt[j])).sum();
                total += kl;
                // ∂/∂z_j Σ p(ln p − ln q) = p_j((ln p_j − ln q_j) − KL)
                for j in 0..c {
                    let p = libm::exp(ls[j]);
                    g[j] = p * ((ls[j] - lt[j]) - kl) * t * inv_b;
                }
            }
            KlDirection::TeacherLed => {
                let kl: f64 = (0..c).map(|j| libm::exp(lt[j]) * (lt[j] - ls[j])).sum();
                total += kl;
                for j in 0..c {
                    g[j] = (libm::exp(ls[j]) - libm::exp(lt[j])) * t * inv_b;
                }
            }
        }
    }
    let value = total * t * t * inv_b;
    if !value.is_finite() {
        return Err(Error::NonFinite("kl divergence"));
    }
    Ok((value, Tensor::from_rows(b, c, grad)?))
}
