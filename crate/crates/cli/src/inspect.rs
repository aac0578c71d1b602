//! Per-layer summaries of saved client masks.

use cos2p_core::experiment::ClientMasks;
use serde::Serialize;

pub const LAYER_NAMES: [&str; 3] = ["attn", "fc1", "fc2"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub client: usize,
    pub block: usize,
    pub layer: &'static str,
    pub segments: usize,
    pub kept: usize,
    pub keep_ratio: f64,
    pub target: f64,
    pub mean_prob: f64,
    /// Counts of `P` over `[0, 1]` in equal bins; `P = 1` lands in the last.
    pub histogram: Vec<usize>,
}

pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

pub fn inspect(masks: &[ClientMasks], bins: usize) -> Vec<LayerReport> {
    let bins = bins.max(1);
    let mut out = Vec::new();
    for c in masks {
        for (blk, (gates, probs)) in c.blocks.iter().zip(&c.probs).enumerate() {
            for (li, name) in LAYER_NAMES.iter().enumerate() {
                let g = gates.layer(li);
                let p = &probs[li];
                let kept = g.iter().filter(|v| **v != 0.0).count();
                out.push(LayerReport {
                    client: c.client,
                    block: blk,
                    layer: name,
                    segments: g.len(),
                    kept,
                    keep_ratio: kept as f64 / g.len().max(1) as f64,
                    target: c.r_width,
                    mean_prob: p.iter().sum::<f64>() / p.len().max(1) as f64,
                    histogram: histogram(p, bins),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_edges() {
        assert_eq!(histogram(&[0.0, 0.5, 0.99, 1.0], 2), vec![1, 3]);
        assert_eq!(histogram(&[0.1, 0.2], 1), vec![2]);
    }
}
