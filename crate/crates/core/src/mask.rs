//! Trainable segment masks.
//!
//! Each maskable layer carries a real importance vector `I`, the
//! probabilities `P = sigmoid(I)` and, per sample, a Bernoulli draw `M`.
//! `M̂` extends `M` over every parameter of the segment it gates. Gradients
//! reach `I` through a straight-through estimator: the collapsed `∂L/∂M̂` is
//! passed to `P` unchanged and then scaled by `P(1 − P)`.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layout::{Layer, LayerKind, ModelLayout};
use crate::model::BlockGates;
use crate::tensor::sigmoid;
use crate::{Error, Result};

/// Importance and probability vectors of one maskable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    importance: Vec<f64>,
    prob: Vec<f64>,
}

impl LayerMask {
    pub fn new(importance: Vec<f64>) -> Self {
        let prob = importance.iter().map(|i| sigmoid(*i)).collect();
        LayerMask { importance, prob }
    }

    pub fn importance(&self) -> &[f64] {
        &self.importance
    }

    pub fn prob(&self) -> &[f64] {
        &self.prob
    }

    pub fn len(&self) -> usize {
        self.importance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.importance.is_empty()
    }

    /// `I ← I − lr·grad`, keeping `P` in sync.
    pub fn descend(&mut self, grad: &[f64], lr: f64) {
        for ((i, p), g) in self.importance.iter_mut().zip(&mut self.prob).zip(grad) {
            *i -= lr * g;
            *p = sigmoid(*i);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<bool> {
        sample_binary(&self.prob, rng)
    }
}

/// Mask state of every maskable layer of the model, indexed
/// `block * 3 + {0: attention, 1: fc1, 2: fc2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    pub layers: Vec<LayerMask>,
}

impl MaskState {
    pub fn init(layout: &ModelLayout, init_value: f64) -> Self {
        let mut layers = Vec::with_capacity(layout.spec.depth * 3);
        for blk in 0..layout.spec.depth {
            for l in layout.block_layers(blk) {
                layers.push(LayerMask::new(vec![init_value; layout.layer(l).segment_count()]));
            }
        }
        MaskState { layers }
    }

    pub fn layer(&self, blk: usize, li: usize) -> &LayerMask {
        &self.layers[blk * 3 + li]
    }

    pub fn layer_mut(&mut self, blk: usize, li: usize) -> &mut LayerMask {
        &mut self.layers[blk * 3 + li]
    }

    /// Fresh Bernoulli draw for the three layers of block `blk`.
    pub fn sample_block<R: Rng + ?Sized>(&self, blk: usize, rng: &mut R) -> BlockGates {
        let g = |li: usize, rng: &mut R| to_gates(&self.layer(blk, li).sample(rng));
        BlockGates {
            attn: g(0, rng),
            fc1: g(1, rng),
            fc2: g(2, rng),
        }
    }

    /// Deterministic mask of block `blk` under `policy`.
    pub fn freeze_block(&self, blk: usize, policy: FreezePolicy, r_width: f64) -> BlockGates {
        let f = |li: usize| to_gates(&freeze_mask(self.layer(blk, li).prob(), policy, r_width));
        BlockGates {
            attn: f(0),
            fc1: f(1),
            fc2: f(2),
        }
    }
}

pub fn to_gates(bits: &[bool]) -> Vec<f64> {
    bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()
}

/// Independent `M_j ~ Bern(P_j)`.
pub fn sample_binary<R: Rng + ?Sized>(prob: &[f64], rng: &mut R) -> Vec<bool> {
    prob.iter()
        .map(|p| {
            let u: f64 = rng.random();
            u < *p
        })
        .collect()
}

/// Shape of a maskable layer as seen by the mask extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDescriptor {
    /// `d_out × d_in` weight plus `d_out` bias, split into row groups.
    Linear {
        d_out: usize,
        d_in: usize,
        group_size: usize,
    },
    /// `Wq, Wk, Wv` (`d × d`, rows per head), biases, and `Wo` (`d × d`,
    /// columns per head).
    Attention { heads: usize, hidden: usize },
}

impl LayerDescriptor {
    pub fn of(layer: &Layer) -> Result<Self> {
        match layer.kind {
            LayerKind::Fc1 | LayerKind::Fc2 => Ok(LayerDescriptor::Linear {
                d_out: layer.d_out,
                d_in: layer.d_in,
                group_size: layer.group,
            }),
            LayerKind::Attention => Ok(LayerDescriptor::Attention {
                heads: layer.d_out,
                hidden: layer.d_in,
            }),
            _ => Err(Error::invalid("layer", "layer is not maskable")),
        }
    }

    pub fn segments(&self) -> usize {
        match *self {
            LayerDescriptor::Linear { d_out, group_size, .. } => d_out / group_size,
            LayerDescriptor::Attention { heads, .. } => heads,
        }
    }

    /// Number of `M̂` entries belonging to each segment.
    pub fn segment_size(&self) -> usize {
        match *self {
            LayerDescriptor::Linear {
                d_in, group_size, ..
            } => group_size * (d_in + 1),
            LayerDescriptor::Attention { heads, hidden } => {
                let dh = hidden / heads;
                3 * (dh * hidden + dh) + hidden * dh
            }
        }
    }
}

/// `M̂` laid out as dense matrices (`weights`) plus bias vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedMask {
    /// `(rows, cols, row-major entries)`; Linear: `[W]`, Attention: `[Wq, Wk, Wv, Wo]`.
    pub weights: Vec<(usize, usize, Vec<f64>)>,
    /// Linear: `[b]`, Attention: `[bq, bk, bv]`.
    pub biases: Vec<Vec<f64>>,
}

impl ExtendedMask {
    pub fn sum(&self) -> f64 {
        self.weights.iter().map(|(_, _, w)| w.iter().sum::<f64>()).sum::<f64>()
            + self.biases.iter().map(|b| b.iter().sum::<f64>()).sum::<f64>()
    }

    pub fn size(&self) -> usize {
        self.weights.iter().map(|(_, _, w)| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }
}

pub fn extend_mask(mask: &[bool], desc: &LayerDescriptor) -> Result<ExtendedMask> {
    if mask.len() != desc.segments() {
        return Err(Error::shape(alloc::format!(
            "mask has {} entries, layer has {} segments",
            mask.len(),
            desc.segments()
        )));
    }
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    match *desc {
        LayerDescriptor::Linear {
            d_out,
            d_in,
            group_size,
        } => {
            let mut w = vec![0.0; d_out * d_in];
            let mut b = vec![0.0; d_out];
            for r in 0..d_out {
                let v = on(mask[r / group_size]);
                w[r * d_in..(r + 1) * d_in].iter_mut().for_each(|x| *x = v);
                b[r] = v;
            }
            Ok(ExtendedMask {
                weights: vec![(d_out, d_in, w)],
                biases: vec![b],
            })
        }
        LayerDescriptor::Attention { heads, hidden } => {
            let dh = hidden / heads;
            let rowwise = || {
                let mut w = vec![0.0; hidden * hidden];
                for r in 0..hidden {
                    let v = on(mask[r / dh]);
                    w[r * hidden..(r + 1) * hidden].iter_mut().for_each(|x| *x = v);
                }
                (hidden, hidden, w)
            };
            let mut wo = vec![0.0; hidden * hidden];
            for r in 0..hidden {
                for c in 0..hidden {
                    wo[r * hidden + c] = on(mask[c / dh]);
                }
            }
            let bias: Vec<f64> = (0..hidden).map(|r| on(mask[r / dh])).collect();
            Ok(ExtendedMask {
                weights: vec![rowwise(), rowwise(), rowwise(), (hidden, hidden, wo)],
                biases: vec![bias.clone(), bias.clone(), bias],
            })
        }
    }
}

/// Inverse of [`extend_mask`]: a segment is kept iff all its entries are 1.
pub fn collapse_mask(ext: &ExtendedMask, desc: &LayerDescriptor) -> Result<Vec<bool>> {
    let n = desc.segments();
    let mut kept = vec![true; n];
    let mut bad = false;
    match *desc {
        LayerDescriptor::Linear {
            d_out,
            d_in,
            group_size,
        } => {
            let (r, c, w) = ext.weights.first().ok_or(Error::shape("missing weight mask"))?;
            bad |= *r != d_out || *c != d_in;
            for row in 0..d_out.min(*r) {
                let all = w[row * c..(row + 1) * c].iter().all(|v| *v == 1.0)
                    && ext.biases.first().is_some_and(|b| b[row] == 1.0);
                kept[row / group_size] &= all;
            }
        }
        LayerDescriptor::Attention { heads, hidden } => {
            let dh = hidden / heads;
            if ext.weights.len() != 4 || ext.biases.len() != 3 {
                return Err(Error::shape("attention mask needs four matrices and three biases"));
            }
            for (mi, (r, c, w)) in ext.weights.iter().enumerate() {
                bad |= *r != hidden || *c != hidden;
                for row in 0..hidden {
                    for col in 0..hidden {
                        let head = if mi == 3 { col / dh } else { row / dh };
                        kept[head] &= w[row * hidden + col] == 1.0;
                    }
                }
            }
            for b in &ext.biases {
                for (row, v) in b.iter().enumerate() {
                    kept[row / dh] &= *v == 1.0;
                }
            }
        }
    }
    if bad {
        return Err(Error::shape("extended mask does not match the descriptor"));
    }
    Ok(kept)
}

/// Value and subgradient of `|Σ sum(M̂)/Σ size(M̂) − R_width|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalty {
    pub value: f64,
    pub keep_ratio: f64,
    /// `∂penalty/∂M̂` of every entry: `sign(keep_ratio − R_width)/Σ size`.
    pub grad_per_entry: f64,
}

/// `layers` lists `(M, per-segment M̂ size)` for every layer in `S`.
pub fn budget_penalty(layers: &[(&[f64], usize)], r_width: f64) -> Result<Penalty> {
    let total: usize = layers.iter().map(|(m, s)| m.len() * s).sum();
    if total == 0 {
        return Err(Error::invalid("S", "budget penalty needs at least one maskable layer"));
    }
    let kept: f64 = layers
        .iter()
        .map(|(m, s)| m.iter().sum::<f64>() * *s as f64)
        .sum();
    let keep_ratio = kept / total as f64;
    let diff = keep_ratio - r_width;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok(Penalty {
        value: libm::fabs(diff),
        keep_ratio,
        grad_per_entry: sign / total as f64,
    })
}

/// Straight-through step from the collapsed `∂L/∂M` to `∂L/∂I`.
pub fn ste_backward(layer: &LayerMask, grad_m: &[f64]) -> Vec<f64> {
    layer
        .prob()
        .iter()
        .zip(grad_m)
        .map(|(p, g)| g * p * (1.0 - p))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Keep segments with `P ≥ 0.5`.
    Threshold,
    /// Keep the `⌈R_width · n⌉` most probable segments, lower index first
    /// on ties.
    #[default]
    Topk,
}

/// How often a fresh `M` is drawn during mask training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleEvery {
    #[default]
    Batch,
    Epoch,
}

pub fn keep_count(n: usize, r_width: f64) -> usize {
    (libm::ceil(r_width * n as f64 - 1e-9) as usize).clamp(0, n)
}

pub fn freeze_mask(prob: &[f64], policy: FreezePolicy, r_width: f64) -> Vec<bool> {
    match policy {
        FreezePolicy::Threshold => prob.iter().map(|p| *p >= 0.5).collect(),
        FreezePolicy::Topk => {
            let k = keep_count(prob.len(), r_width);
            let mut order: Vec<usize> = (0..prob.len()).collect();
            // stable sort keeps lower indices first among equal P
            order.sort_by(|a, b| prob[*b].total_cmp(&prob[*a]));
            let mut out = vec![false; prob.len()];
            for &i in order.iter().take(k) {
                out[i] = true;
            }
            out
        }
    }
}

/// Uniformly random subset of exactly `⌈R_width · n⌉` segments.
pub fn random_mask<R: Rng + ?Sized>(n: usize, r_width: f64, rng: &mut R) -> Vec<bool> {
    let k = keep_count(n, r_width);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out = vec![false; n];
    for &i in idx.iter().take(k) {
        out[i] = true;
    }
    out
}
