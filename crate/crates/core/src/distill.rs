//! Multi-exit classifier placement and the self-distillation objective.

use alloc::vec::Vec;

use crate::loss::{ce_loss, softened_kl, KlDirection};
use crate::submodel::DepthWindow;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Classifier depths of one client; the deepest one is the teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitSet {
    pub depths: Vec<usize>,
    pub lambda2: f64,
    pub temperature: f64,
    pub direction: KlDirection,
}

impl ExitSet {
    pub fn teacher(&self) -> usize {
        *self.depths.last().expect("exit set is never empty")
    }
}

/// `{s + ⌊L·R_i⌋ : R_i ≤ R_n}` clipped to the window top, sorted and
/// deduplicated. Budgets whose width would be zero yield no exit.
pub fn classifier_depths(
    budgets: &[f64],
    r_depth: f64,
    window: &DepthWindow,
    depth: usize,
) -> Result<Vec<usize>> {
    if budgets.is_empty() {
        return Err(Error::invalid("budgets", "budget set is empty"));
    }
    let s = window.start;
    let mut out: Vec<usize> = budgets
        .iter()
        .filter(|r| **r <= r_depth + 1e-12)
        .map(|r| libm::floor(depth as f64 * r + 1e-9) as usize)
        .filter(|w| *w > 0)
        .map(|w| (s + w).min(window.top()))
        .collect();
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(Error::invalid("budgets", "no classifier depth falls inside the window"));
    }
    Ok(out)
}

/// Value of the distillation objective, split into its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillLoss {
    pub total: f64,
    pub ce: Vec<f64>,
    pub kl: Vec<f64>,
    /// `∂total/∂logits` per exit; the teacher receives only its CE share.
    pub grads: Vec<Tensor>,
}

/// `Σ_i (1−λ2)·CE(ŷ_i, y) + λ2·KL(ŷ_i, ŷ_teacher)` over `logits`
/// (shallow to deep; the last entry is the teacher, held constant inside
/// every KL term).
pub fn self_distill_loss(
    logits: &[Tensor],
    labels: &[usize],
    lambda2: f64,
    temperature: f64,
    direction: KlDirection,
) -> Result<DistillLoss> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature", "must be positive"));
    }
    if !(0.0..=1.0).contains(&lambda2) {
        return Err(Error::invalid("lambda2", "must lie in [0, 1]"));
    }
    let teacher = logits.last().ok_or(Error::EmptyData("exit logits"))?;
    let mut out = DistillLoss {
        total: 0.0,
        ce: Vec::with_capacity(logits.len()),
        kl: Vec::with_capacity(logits.len()),
        grads: Vec::with_capacity(logits.len()),
    };
    let last = logits.len() - 1;
    for (i, l) in logits.iter().enumerate() {
        let (ce, mut g) = ce_loss(l, labels)?;
        g.data_mut().iter_mut().for_each(|v| *v *= 1.0 - lambda2);
        let kl = if i == last {
            0.0
        } else {
            let (kl, gk) = softened_kl(l, teacher, temperature, direction)?;
            tensor_axpy(lambda2, &gk, &mut g);
            kl
        };
        out.total += (1.0 - lambda2) * ce + lambda2 * kl;
        out.ce.push(ce);
        out.kl.push(kl);
        out.grads.push(g);
    }
    if !out.total.is_finite() {
        return Err(Error::NonFinite("distillation loss"));
    }
    Ok(out)
}

fn tensor_axpy(alpha: f64, x: &Tensor, y: &mut Tensor) {
    crate::tensor::axpy(alpha, x.data(), y.data_mut());
}
