//! Depth-rolling windows, coverage, submodel views and delta staging.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::client::ClientUpdate;
use crate::layout::{LayerKind, ModelLayout, SegmentTable};
use crate::model::MaskSet;
use crate::{Error, Result};

/// Partition of `[0, L)` into frozen `[0, s)`, trainable `[s, s + w)` and
/// pruned `[s + w, L)` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthWindow {
    pub depth: usize,
    pub start: usize,
    pub width: usize,
}

impl DepthWindow {
    pub fn full(depth: usize) -> Self {
        DepthWindow {
            depth,
            start: 0,
            width: depth,
        }
    }

    pub fn top(&self) -> usize {
        self.start + self.width
    }

    pub fn frozen(&self) -> Range<usize> {
        0..self.start
    }

    pub fn trainable(&self) -> Range<usize> {
        self.start..self.top()
    }

    pub fn pruned(&self) -> Range<usize> {
        self.top()..self.depth
    }

    pub fn is_trainable(&self, blk: usize) -> bool {
        self.trainable().contains(&blk)
    }

    pub fn check(&self, depth: usize) -> Result<()> {
        if self.depth != depth || self.width == 0 || self.top() > depth {
            return Err(Error::shape(alloc::format!(
                "window {:?} is not valid for a {}-block model",
                self,
                depth
            )));
        }
        Ok(())
    }
}

/// `⌊L · R_depth⌋`, guarded against representation error in products such
/// as `10 × 0.3`.
pub fn window_width(depth: usize, r_depth: f64) -> Result<usize> {
    if !(r_depth > 0.0 && r_depth <= 1.0) {
        return Err(Error::invalid("r_depth", "must lie in (0, 1]"));
    }
    let w = libm::floor(depth as f64 * r_depth + 1e-9) as usize;
    if w == 0 {
        return Err(Error::EmptyWindow { depth, r_depth });
    }
    Ok(w.min(depth))
}

/// Rolling window of client `client` in round `round`:
/// `s = (client·stride + round) mod (L − w + 1)`.
pub fn depth_window(
    client: usize,
    round: usize,
    depth: usize,
    r_depth: f64,
    stride: usize,
) -> Result<DepthWindow> {
    if depth == 0 {
        return Err(Error::invalid("depth", "model needs at least one block"));
    }
    let width = window_width(depth, r_depth)?;
    let positions = depth - width + 1;
    let start = (client.wrapping_mul(stride).wrapping_add(round)) % positions;
    Ok(DepthWindow {
        depth,
        start,
        width,
    })
}

/// One bit per segment of the global table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageMask {
    bits: Vec<bool>,
}

impl CoverageMask {
    pub fn empty(segments: usize) -> Self {
        CoverageMask {
            bits: vec![false; segments],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        CoverageMask { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, seg: usize) -> bool {
        self.bits.get(seg).copied().unwrap_or(false)
    }

    pub fn set(&mut self, seg: usize, on: bool) {
        self.bits[seg] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn covered(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Segments a client trains under `window`, `masks` and its exit set.
///
/// Block segments count when the block is trainable and the gate is open;
/// the embedding counts when no block is frozen; global exit classifiers
/// count at the client's exit depths.
pub fn coverage(
    layout: &ModelLayout,
    window: &DepthWindow,
    masks: &MaskSet,
    exits: &[usize],
) -> CoverageMask {
    let table = &layout.table;
    let mut cov = CoverageMask::empty(table.len());
    for layer in &table.layers {
        match layer.kind {
            LayerKind::Embed => {
                if window.start == 0 {
                    for s in layer.segments.clone() {
                        cov.set(s, true);
                    }
                }
            }
            LayerKind::Exit => {
                if exits.contains(&layer.index) && layer.index > window.start {
                    for s in layer.segments.clone() {
                        cov.set(s, true);
                    }
                }
            }
            LayerKind::Attention | LayerKind::Fc1 | LayerKind::Fc2 => {
                let blk = layer.index;
                if !window.is_trainable(blk) {
                    continue;
                }
                let li = match layer.kind {
                    LayerKind::Attention => 0,
                    LayerKind::Fc1 => 1,
                    _ => 2,
                };
                for (j, s) in layer.segments.clone().enumerate() {
                    let open = masks.gates(blk).map_or(true, |g| g.layer(li)[j] != 0.0);
                    cov.set(s, open);
                }
            }
        }
    }
    cov
}

/// Parameters a client receives for one round. Pruned blocks are zeroed
/// and never read; masks are carried separately so they can keep changing
/// during the mask phase.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmodelView {
    pub window: DepthWindow,
    pub params: Vec<f64>,
    pub masks: MaskSet,
}

impl SubmodelView {
    /// `w ⊙ M̂` over the whole vector.
    pub fn effective_params(&self, layout: &ModelLayout) -> Vec<f64> {
        let mut p = self.params.clone();
        for blk in 0..layout.spec.depth {
            let Some(g) = self.masks.gates(blk) else {
                continue;
            };
            for (li, layer) in layout.block_layers(blk).into_iter().enumerate() {
                for (j, s) in layout.layer(layer).segments.clone().enumerate() {
                    let gate = g.layer(li)[j];
                    for v in &mut p[layout.table.segments[s].range()] {
                        *v *= gate;
                    }
                }
            }
        }
        p
    }
}

pub fn build_submodel(
    layout: &ModelLayout,
    global: &[f64],
    window: &DepthWindow,
    masks: &MaskSet,
    exits: &[usize],
) -> Result<(SubmodelView, CoverageMask)> {
    window.check(layout.spec.depth)?;
    if global.len() != layout.total_params() {
        return Err(Error::shape("global parameters do not match the segment table"));
    }
    if masks.blocks.len() != layout.spec.depth {
        return Err(Error::shape("mask set must have one entry per block"));
    }
    let mut params = global.to_vec();
    for blk in window.pruned() {
        for v in &mut params[layout.block_range(blk)] {
            *v = 0.0;
        }
    }
    let cov = coverage(layout, window, masks, exits);
    Ok((
        SubmodelView {
            window: *window,
            params,
            masks: masks.clone(),
        },
        cov,
    ))
}

/// One client's delta for one segment, weighted by its importance score.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub client: usize,
    pub base_round: usize,
    pub gamma: f64,
    pub delta: Vec<f64>,
}

/// Per-segment contributions awaiting aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Staging {
    pub segments: Vec<Vec<Contribution>>,
}

impl Staging {
    pub fn new(segments: usize) -> Self {
        Staging {
            segments: vec![Vec::new(); segments],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.segments.iter().all(|s| s.is_empty())
    }

    /// Contributions sorted by (client, base round) so the result of
    /// aggregation does not depend on arrival order.
    pub fn sorted(&self, seg: usize) -> Vec<&Contribution> {
        let mut v: Vec<&Contribution> = self.segments[seg].iter().collect();
        v.sort_by_key(|c| (c.client, c.base_round));
        v
    }
}

/// Stages the covered segments of `update`; `gammas` is aligned with
/// `update.deltas`. Uncovered segments are left untouched.
pub fn merge_delta(
    staging: &mut Staging,
    table: &SegmentTable,
    update: &ClientUpdate,
    gammas: &[f64],
    oldest_retained: usize,
) -> Result<()> {
    if update.base_round < oldest_retained {
        return Err(Error::VersionEvicted {
            requested: update.base_round,
            oldest: oldest_retained,
        });
    }
    if gammas.len() != update.deltas.len() || staging.segments.len() != table.len() {
        return Err(Error::shape("scores must align with the update's deltas"));
    }
    for d in &update.deltas {
        let seg = table.segment(d.segment)?;
        if d.values.len() != seg.len || !update.coverage.get(d.segment) {
            return Err(Error::shape(alloc::format!(
                "delta for segment {} does not match coverage or length",
                seg.name
            )));
        }
    }
    for (d, g) in update.deltas.iter().zip(gammas) {
        staging.segments[d.segment].push(Contribution {
            client: update.client,
            base_round: update.base_round,
            gamma: *g,
            delta: d.values.clone(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::SegmentDelta;
    use crate::layout::ModelSpec;
    use crate::model::BlockGates;
    use proptest::prelude::*;

    #[test]
    fn window_examples() {
        let w = depth_window(0, 0, 8, 0.5, 1).unwrap();
        assert_eq!((w.frozen(), w.trainable(), w.pruned()), (0..0, 0..4, 4..8));
        let w = depth_window(0, 3, 8, 0.5, 1).unwrap();
        assert_eq!((w.frozen(), w.trainable(), w.pruned()), (0..3, 3..7, 7..8));
        for q in 0..20 {
            let w = depth_window(5, q, 8, 1.0, 3).unwrap();
            assert_eq!((w.frozen(), w.trainable(), w.pruned()), (0..0, 0..8, 8..8));
        }
    }

    #[test]
    fn too_small_depth_ratio_is_an_error() {
        assert!(matches!(
            depth_window(0, 0, 8, 0.1, 1),
            Err(Error::EmptyWindow { depth: 8, .. })
        ));
        assert!(depth_window(0, 0, 8, 0.0, 1).is_err());
    }

    proptest! {
        #[test]
        fn window_partitions_blocks(depth in 1usize..17, r in 0.01f64..=1.0, n in 0usize..32, q in 0usize..200, stride in 0usize..5) {
            if let Ok(w) = depth_window(n, q, depth, r, stride) {
                let mut seen = vec![0u8; depth];
                for b in w.frozen().chain(w.trainable()).chain(w.pruned()) {
                    seen[b] += 1;
                }
                prop_assert!(seen.iter().all(|c| *c == 1));
                prop_assert!(w.width >= 1);
            }
        }
    }

    fn layout() -> ModelLayout {
        ModelLayout::new(ModelSpec {
            input_dim: 4,
            tokens: 1,
            hidden: 8,
            heads: 4,
            mlp_hidden: 8,
            depth: 3,
            classes: 2,
            group_size: 2,
        })
        .unwrap()
    }

    #[test]
    fn full_window_all_ones_covers_everything() {
        let l = layout();
        let global: Vec<f64> = (0..l.total_params()).map(|i| i as f64).collect();
        let (view, cov) =
            build_submodel(&l, &global, &DepthWindow::full(3), &MaskSet::all_kept(3), &[1, 2, 3]).unwrap();
        assert_eq!(cov.count(), l.table.len());
        assert_eq!(view.params, global);
    }

    #[test]
    fn pruned_block_is_uncovered_and_head_mask_uncovers_one_head() {
        let l = layout();
        let global = vec![1.0; l.total_params()];
        let w = DepthWindow {
            depth: 3,
            start: 1,
            width: 1,
        };
        let mut masks = MaskSet::all_kept(3);
        let mut g = BlockGates::ones(&l.spec);
        g.attn = vec![1.0, 0.0, 1.0, 1.0];
        masks.blocks[1] = Some(g);
        let (view, cov) = build_submodel(&l, &global, &w, &masks, &[2]).unwrap();
        for s in l.block_range(2) {
            assert_eq!(view.params[s], 0.0);
        }
        for blk in [0, 2] {
            for layer in l.block_layers(blk) {
                assert!(l.layer(layer).segments.clone().all(|s| !cov.get(s)));
            }
        }
        let heads = l.layer(l.blocks[1].attn).segments.clone();
        let uncovered: Vec<usize> = heads.clone().filter(|s| !cov.get(*s)).collect();
        assert_eq!(uncovered, vec![heads.start + 1]);
        // embedding frozen, exit 2 covered
        assert!(!cov.get(0));
        assert!(cov.get(l.exit_layer(2).segments.start));
        let eff = view.effective_params(&l);
        let seg = &l.table.segments[heads.start + 1];
        assert!(eff[seg.range()].iter().all(|v| *v == 0.0));
    }

    fn update(client: usize, segs: &[(usize, f64)], table: &SegmentTable) -> ClientUpdate {
        let mut cov = CoverageMask::empty(table.len());
        let deltas = segs
            .iter()
            .map(|(s, v)| {
                cov.set(*s, true);
                SegmentDelta {
                    segment: *s,
                    values: vec![*v; table.segments[*s].len],
                }
            })
            .collect();
        ClientUpdate {
            client,
            base_round: 0,
            tau: 0,
            coverage: cov,
            deltas,
        }
    }

    #[test]
    fn empty_coverage_stages_nothing() {
        let t = SegmentTable::uniform("w", 4, 2);
        let mut st = Staging::new(4);
        merge_delta(&mut st, &t, &update(0, &[], &t), &[], 0).unwrap();
        assert!(st.is_empty());
    }

    #[test]
    fn single_segment_staged_exactly() {
        let t = SegmentTable::uniform("w", 4, 2);
        let mut st = Staging::new(4);
        merge_delta(&mut st, &t, &update(0, &[(2, 1.5)], &t), &[1.0], 0).unwrap();
        assert_eq!(st.segments[2].len(), 1);
        assert_eq!(st.segments[2][0].delta, vec![1.5, 1.5]);
        assert!(st.segments[0].is_empty() && st.segments[1].is_empty() && st.segments[3].is_empty());
    }

    #[test]
    fn staging_commutes_across_clients() {
        let t = SegmentTable::uniform("w", 4, 2);
        let a = update(0, &[(0, 1.0), (1, 2.0)], &t);
        let b = update(1, &[(2, 3.0), (3, 4.0)], &t);
        let mut ab = Staging::new(4);
        merge_delta(&mut ab, &t, &a, &[1.0, 1.0], 0).unwrap();
        merge_delta(&mut ab, &t, &b, &[1.0, 1.0], 0).unwrap();
        let mut ba = Staging::new(4);
        merge_delta(&mut ba, &t, &b, &[1.0, 1.0], 0).unwrap();
        merge_delta(&mut ba, &t, &a, &[1.0, 1.0], 0).unwrap();
        for s in 0..4 {
            assert_eq!(ab.sorted(s), ba.sorted(s));
        }
    }

    #[test]
    fn merge_rejects_unknown_segment_and_evicted_version() {
        let t = SegmentTable::uniform("w", 2, 2);
        let mut st = Staging::new(2);
        let mut u = update(0, &[(1, 1.0)], &t);
        u.deltas[0].segment = 9;
        assert_eq!(
            merge_delta(&mut st, &t, &u, &[1.0], 0),
            Err(Error::UnknownSegment(9))
        );
        let mut u = update(0, &[(1, 1.0)], &t);
        u.base_round = 2;
        assert!(matches!(
            merge_delta(&mut st, &t, &u, &[1.0], 5),
            Err(Error::VersionEvicted { requested: 2, oldest: 5 })
        ));
    }
}
