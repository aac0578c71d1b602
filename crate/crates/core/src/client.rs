//! Two-phase local training: mask phase (importance only) followed by the
//! weight phase (self-distillation over the trainable window), then update
//! packaging.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::{classifier_depths, self_distill_loss, ExitSet};
use crate::layout::{ModelLayout, SegmentTable};
use crate::loss::{ce_loss, KlDirection};
use crate::mask::{budget_penalty, random_mask, ste_backward, to_gates, FreezePolicy, MaskState, SampleEvery};
use crate::metrics::{self, Metrics};
use crate::model::{exit_backward, exit_forward, trunk_backward, trunk_forward, BlockGates, GradMode, GradStore, MaskGrads, MaskSet};
use crate::optim::{clip_global_norm, Sgd};
use crate::rng::SimRng;
use crate::submodel::{build_submodel, depth_window, CoverageMask, DepthWindow};
use crate::{Error, Result};

/// Local training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta: f64,
    pub epochs: usize,
    pub eta_hat: f64,
    pub epochs_hat: usize,
    pub q_hat: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
    pub batch: usize,
    pub momentum: f64,
    pub kl_direction: KlDirection,
    pub freeze_policy: FreezePolicy,
    pub sample_every: SampleEvery,
    pub mask_init: f64,
    /// Per-client offset of the rolling depth window.
    pub stride: usize,
    /// Joint L2 cap on each weight-phase step's gradients; 0 disables.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 0.005,
            epochs: 5,
            eta_hat: 0.01,
            epochs_hat: 5,
            q_hat: 20,
            lambda1: 1.0,
            lambda2: 0.2,
            temperature: 3.0,
            batch: 32,
            momentum: 0.0,
            kl_direction: KlDirection::StudentLed,
            freeze_policy: FreezePolicy::Topk,
            sample_every: SampleEvery::Batch,
            mask_init: 0.0,
            stride: 1,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, f: &'static str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(f, "must be positive and finite"))
            }
        };
        pos(self.eta, "train.eta")?;
        pos(self.eta_hat, "train.eta_hat")?;
        pos(self.temperature, "train.temperature")?;
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::invalid("train.lambda1", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.lambda2) {
            return Err(Error::invalid("train.lambda2", "must lie in [0, 1]"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("train.batch", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::invalid("train.clip_norm", "must be non-negative"));
        }
        if !self.mask_init.is_finite() {
            return Err(Error::invalid("train.mask_init", "must be finite"));
        }
        Ok(())
    }
}

/// Accumulated gradient of one covered segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDelta {
    pub segment: usize,
    pub values: Vec<f64>,
}

/// What a client reports after a round of local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub base_round: usize,
    /// Filled in by the server on arrival.
    pub tau: usize,
    pub coverage: CoverageMask,
    pub deltas: Vec<SegmentDelta>,
}

impl ClientUpdate {
    pub fn digest(&self) -> u64 {
        let mut fp = crate::digest::Fingerprint::new();
        fp.word(self.client as u64);
        fp.word(self.base_round as u64);
        for d in &self.deltas {
            fp.word(d.segment as u64);
            fp.floats(&d.values);
        }
        fp.finish()
    }
}

/// `Δ^i = (w_start^i − w_end^i)/η` for every covered segment.
pub fn make_update(
    table: &SegmentTable,
    client: usize,
    base_round: usize,
    coverage: &CoverageMask,
    start: &[f64],
    end: &[f64],
    eta: f64,
) -> Result<ClientUpdate> {
    if !(eta != 0.0 && eta.is_finite()) {
        return Err(Error::invalid("eta", "learning rate must be non-zero"));
    }
    if start.len() != table.total || end.len() != start.len() {
        return Err(Error::shape("snapshots do not match the segment table"));
    }
    let deltas = coverage
        .covered()
        .map(|s| {
            let r = table.segments[s].range();
            SegmentDelta {
                segment: s,
                values: start[r.clone()].iter().zip(&end[r]).map(|(a, b)| (a - b) / eta).collect(),
            }
        })
        .collect();
    Ok(ClientUpdate {
        client,
        base_round,
        tau: 0,
        coverage: coverage.clone(),
        deltas,
    })
}

/// How a client obtains its width masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Importance masks trained in rounds `q < Q̂`, frozen afterwards.
    Learned,
    /// A fixed random subset per layer; no mask training.
    Random,
}

/// Private state of one simulated client.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub r_width: f64,
    pub r_depth: f64,
    pub train: Dataset,
    pub test: Dataset,
    pub masks: MaskState,
    pub mode: MaskMode,
    frozen: Vec<Option<BlockGates>>,
    visited: Vec<bool>,
    /// Personal exit classifiers for depths `1..=L`, packed `[W, b]` each.
    personal: Vec<Vec<f64>>,
    rng: SimRng,
}

/// Result of one local training job.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub update: ClientUpdate,
    pub window: DepthWindow,
    pub exits: Vec<usize>,
    pub mask_phase: bool,
    /// Local test metrics at the teacher exit after training.
    pub metrics: Metrics,
    pub keep_ratio: f64,
    pub final_loss: f64,
}

impl ClientState {
    /// `personal` seeds every personal classifier from the matching global
    /// exit of the initial model.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        layout: &ModelLayout,
        initial: &[f64],
        r_width: f64,
        r_depth: f64,
        train: Dataset,
        test: Dataset,
        cfg: &TrainConfig,
        mode: MaskMode,
        rng: SimRng,
        mask_rng: Option<&mut SimRng>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyData("client training shard"));
        }
        if !(r_width > 0.0 && r_width <= 1.0) {
            return Err(Error::invalid("r_width", "must lie in (0, 1]"));
        }
        let depth = layout.spec.depth;
        let masks = MaskState::init(layout, cfg.mask_init);
        let mut frozen = vec![None; depth];
        if mode == MaskMode::Random {
            let r = mask_rng.ok_or(Error::invalid("mask_rng", "random masks need a seeded stream"))?;
            for slot in frozen.iter_mut() {
                let mut g = BlockGates::ones(&layout.spec);
                for li in 0..3 {
                    let n = g.layer(li).len();
                    *g.layer_mut(li) = to_gates(&random_mask(n, r_width, r));
                }
                *slot = Some(g);
            }
        }
        let personal = (1..=depth)
            .map(|k| crate::model::exit_params(layout, initial, k).to_vec())
            .collect();
        Ok(ClientState {
            id,
            r_width,
            r_depth,
            train,
            test,
            masks,
            mode,
            frozen,
            visited: vec![false; depth],
            personal,
            rng,
        })
    }

    pub fn is_frozen(&self, blk: usize) -> bool {
        self.frozen[blk].is_some()
    }

    pub fn personal_head(&self, depth: usize) -> &[f64] {
        &self.personal[depth - 1]
    }

    /// The deterministic mask block `blk` would use right now: the frozen
    /// mask if fixed, the freeze policy applied to `P` if the block has been
    /// trained, otherwise top-k on the untouched `P` (lowest indices).
    pub fn hard_mask(&self, blk: usize, policy: FreezePolicy) -> BlockGates {
        if let Some(g) = &self.frozen[blk] {
            return g.clone();
        }
        let p = if self.visited[blk] { policy } else { FreezePolicy::Topk };
        self.masks.freeze_block(blk, p, self.r_width)
    }

    /// Fixes the mask of every block; later calls keep the first result.
    pub fn freeze_all(&mut self, policy: FreezePolicy) {
        for blk in 0..self.frozen.len() {
            if self.frozen[blk].is_none() {
                self.frozen[blk] = Some(self.hard_mask(blk, policy));
            }
        }
    }

    /// Kept fraction of maskable parameters over all blocks under the
    /// current hard masks.
    pub fn keep_ratio(&self, layout: &ModelLayout, policy: FreezePolicy) -> f64 {
        let depth = layout.spec.depth;
        let gates: Vec<BlockGates> = (0..depth).map(|b| self.hard_mask(b, policy)).collect();
        gates_keep_ratio(layout, &gates, 0..depth)
    }

    /// Runs one dispatched job against the global snapshot `global`
    /// tagged `round`.
    pub fn train_round(
        &mut self,
        layout: &ModelLayout,
        global: &[f64],
        round: usize,
        budgets: &[f64],
        cfg: &TrainConfig,
    ) -> Result<RoundOutcome> {
        let spec = &layout.spec;
        let window = depth_window(self.id, round, spec.depth, self.r_depth, cfg.stride)?;
        let exits = ExitSet {
            depths: classifier_depths(budgets, self.r_depth, &window, spec.depth)?,
            lambda2: cfg.lambda2,
            temperature: cfg.temperature,
            direction: cfg.kl_direction,
        };

        let mask_phase = self.mode == MaskMode::Learned && round < cfg.q_hat;
        if self.mode == MaskMode::Learned && round >= cfg.q_hat {
            self.freeze_all(cfg.freeze_policy);
        }

        let mut masks = MaskSet::all_kept(spec.depth);
        for blk in 0..window.top() {
            masks.blocks[blk] = Some(self.hard_mask(blk, cfg.freeze_policy));
        }
        let (view, _) = build_submodel(layout, global, &window, &masks, &exits.depths)?;
        let mut params = view.params;

        if mask_phase {
            let sampled = self.train_mask_phase(layout, &params, &window, &mut masks, &exits, cfg)?;
            for (blk, g) in window.trainable().zip(sampled) {
                self.visited[blk] = true;
                masks.blocks[blk] = Some(g);
            }
        }

        let coverage = crate::submodel::coverage(layout, &window, &masks, &exits.depths);
        let start = params.clone();
        let final_loss = self.train_weight_phase(layout, &mut params, &window, &masks, &exits, cfg)?;
        let update = make_update(&layout.table, self.id, round, &coverage, &start, &params, cfg.eta)?;
        let metrics = self.evaluate_local(layout, &params, &window, &masks, exits.teacher())?;
        let keep_ratio = gates_keep_ratio(
            layout,
            &window
                .trainable()
                .map(|b| masks.blocks[b].clone().unwrap_or_else(|| BlockGates::ones(spec)))
                .collect::<Vec<_>>(),
            0..window.width,
        );
        Ok(RoundOutcome {
            update,
            window,
            exits: exits.depths,
            mask_phase,
            metrics,
            keep_ratio,
            final_loss,
        })
    }

    /// `Ê` epochs on `L_mask = CE(teacher) + λ1·penalty`, updating only the
    /// importance of trainable blocks. Blocks outside the trainable range
    /// use the masks already in `masks`. Returns the last sampled gates of
    /// each trainable block.
    pub fn train_mask_phase(
        &mut self,
        layout: &ModelLayout,
        params: &[f64],
        window: &DepthWindow,
        masks: &mut MaskSet,
        exits: &ExitSet,
        cfg: &TrainConfig,
    ) -> Result<Vec<BlockGates>> {
        let spec = &layout.spec;
        let teacher = exits.teacher();
        let head = self.personal[teacher - 1].clone();
        let mut grads = GradStore::zeros(params.len());
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let sizes: Vec<[usize; 3]> = (0..spec.depth)
            .map(|b| layout.block_layers(b).map(|l| layout.table.segments[layout.layer(l).segments.start].len))
            .collect();
        let mut last: Vec<BlockGates> = window
            .trainable()
            .map(|b| masks.blocks[b].clone().unwrap_or_else(|| BlockGates::ones(spec)))
            .collect();

        for _ in 0..cfg.epochs_hat {
            order.shuffle(&mut self.rng);
            if cfg.sample_every == SampleEvery::Epoch {
                for (i, blk) in window.trainable().enumerate() {
                    last[i] = self.masks.sample_block(blk, &mut self.rng);
                }
            }
            for chunk in order.chunks(cfg.batch) {
                if cfg.sample_every == SampleEvery::Batch {
                    for (i, blk) in window.trainable().enumerate() {
                        last[i] = self.masks.sample_block(blk, &mut self.rng);
                    }
                }
                for (i, blk) in window.trainable().enumerate() {
                    masks.blocks[blk] = Some(last[i].clone());
                }
                let (x, y) = self.train.batch(chunk);
                let pass = trunk_forward(layout, params, &x, window, Some(masks), &[teacher], GradMode::MASKS)?;
                let logits = exit_forward(spec, &head, &pass.features[0], pass.batch)?;
                let (_, dl) = ce_loss(&logits, &y)?;
                let mut dfeat = vec![0.0; pass.batch * spec.hidden];
                exit_backward(spec, &head, &pass.features[0], &dl, None, &mut dfeat)?;
                let mut mg = MaskGrads::new(spec.depth);
                trunk_backward(layout, params, &pass, &[dfeat], &mut grads, Some(&mut mg))?;

                let layers: Vec<(&[f64], usize)> = window
                    .trainable()
                    .enumerate()
                    .flat_map(|(i, b)| (0..3).map(move |li| (i, b, li)))
                    .map(|(i, b, li)| (last[i].layer(li), sizes[b][li]))
                    .collect();
                let pen = budget_penalty(&layers, self.r_width)?;
                for blk in window.trainable() {
                    let g = mg.blocks[blk].take().unwrap_or_else(|| BlockGates::zeros(spec));
                    for li in 0..3 {
                        let pull = cfg.lambda1 * pen.grad_per_entry * sizes[blk][li] as f64;
                        let collapsed: Vec<f64> = g.layer(li).iter().map(|v| v + pull).collect();
                        let layer = self.masks.layer_mut(blk, li);
                        let gi = ste_backward(layer, &collapsed);
                        layer.descend(&gi, cfg.eta_hat);
                    }
                }
            }
        }
        Ok(last)
    }

    /// `E` epochs of SGD on the self-distillation loss. Trunk gradients
    /// come from the personal classifiers; the global exit copies at the
    /// covered depths are fitted on the detached features with CE.
    /// Returns the mean loss of the last epoch.
    pub fn train_weight_phase(
        &mut self,
        layout: &ModelLayout,
        params: &mut [f64],
        window: &DepthWindow,
        masks: &MaskSet,
        exits: &ExitSet,
        cfg: &TrainConfig,
    ) -> Result<f64> {
        let spec = &layout.spec;
        let mut grads = GradStore::zeros(params.len());
        let mut sgd = Sgd::new(cfg.eta, cfg.momentum)?;
        let mut head_sgd: Vec<Sgd> = exits
            .depths
            .iter()
            .map(|_| Sgd::new(cfg.eta, cfg.momentum))
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut epoch_loss = 0.0;
        let d = spec.hidden;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(cfg.batch) {
                let (x, y) = self.train.batch(chunk);
                let pass = trunk_forward(layout, params, &x, window, Some(masks), &exits.depths, GradMode::PARAMS)?;
                let b = pass.batch;
                let logits: Vec<_> = exits
                    .depths
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| exit_forward(spec, &self.personal[k - 1], &pass.features[i], b))
                    .collect::<Result<_>>()?;
                let loss = self_distill_loss(&logits, &y, exits.lambda2, exits.temperature, exits.direction)?;
                total += loss.total * b as f64;
                seen += b;

                let mut feat_grads = Vec::with_capacity(exits.depths.len());
                let mut head_grads = Vec::with_capacity(exits.depths.len());
                for (i, &k) in exits.depths.iter().enumerate() {
                    let w = &self.personal[k - 1];
                    let mut dw = vec![0.0; w.len()];
                    let mut dfeat = vec![0.0; b * d];
                    exit_backward(spec, w, &pass.features[i], &loss.grads[i], Some(&mut dw), &mut dfeat)?;
                    feat_grads.push(dfeat);
                    head_grads.push(dw);
                }
                grads.zero();
                trunk_backward(layout, params, &pass, &feat_grads, &mut grads, None)?;

                let mut scratch = vec![0.0; b * d];
                for (i, &k) in exits.depths.iter().enumerate() {
                    if k <= window.start {
                        continue;
                    }
                    let l = layout.exit_layer(k);
                    let w = &params[l.offset..l.offset + l.len];
                    let lg = exit_forward(spec, w, &pass.features[i], b)?;
                    let (_, dl) = ce_loss(&lg, &y)?;
                    exit_backward(
                        spec,
                        w,
                        &pass.features[i],
                        &dl,
                        Some(&mut grads.values[l.offset..l.offset + l.len]),
                        &mut scratch,
                    )?;
                }
                let mut groups: Vec<&mut [f64]> = Vec::with_capacity(head_grads.len() + 1);
                groups.push(&mut grads.values);
                groups.extend(head_grads.iter_mut().map(|g| g.as_mut_slice()));
                clip_global_norm(&mut groups, cfg.clip_norm);
                sgd.step(params, &grads.values, None)?;
                for (i, &k) in exits.depths.iter().enumerate() {
                    head_sgd[i].step(&mut self.personal[k - 1], &head_grads[i], None)?;
                }
            }
            epoch_loss = if seen > 0 { total / seen as f64 } else { 0.0 };
        }
        Ok(epoch_loss)
    }

    /// Metrics on the local test split at the teacher exit with the
    /// personal classifier.
    pub fn evaluate_local(
        &self,
        layout: &ModelLayout,
        params: &[f64],
        window: &DepthWindow,
        masks: &MaskSet,
        teacher: usize,
    ) -> Result<Metrics> {
        if self.test.is_empty() {
            return Ok(Metrics::default());
        }
        let idx: Vec<usize> = (0..self.test.len()).collect();
        let (x, y) = self.test.batch(&idx);
        let pass = trunk_forward(layout, params, &x, window, Some(masks), &[teacher], GradMode::INFERENCE)?;
        let logits = exit_forward(&layout.spec, &self.personal[teacher - 1], &pass.features[0], pass.batch)?;
        metrics::evaluate(&logits, &y)
    }
}

/// Kept fraction of maskable parameters of `gates` (one per block of
/// `blocks`, in order).
pub fn gates_keep_ratio(layout: &ModelLayout, gates: &[BlockGates], blocks: core::ops::Range<usize>) -> f64 {
    let mut kept = 0.0;
    let mut total = 0.0;
    for (g, blk) in gates.iter().zip(blocks) {
        let blk = blk.min(layout.spec.depth - 1);
        for (li, l) in layout.block_layers(blk).into_iter().enumerate() {
            let size = layout.table.segments[layout.layer(l).segments.start].len as f64;
            for v in g.layer(li) {
                kept += v * size;
                total += size;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        kept / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::ModelSpec;
    use crate::model::init_params;
    use crate::rng;
    use alloc::sync::Arc;

    fn layout() -> Arc<ModelLayout> {
        Arc::new(
            ModelLayout::new(ModelSpec {
                input_dim: 6,
                tokens: 2,
                hidden: 8,
                heads: 2,
                mlp_hidden: 16,
                depth: 4,
                classes: 3,
                group_size: 4,
            })
            .unwrap(),
        )
    }

    fn data(n: usize, seed: u64) -> Dataset {
        crate::data::gen_synthetic(3, 6, n, 4.0, &mut rng::seeded(seed)).unwrap()
    }

    fn client(l: &ModelLayout, p: &[f64], r_w: f64, r_d: f64, mode: MaskMode, cfg: &TrainConfig) -> ClientState {
        let mut mr = rng::seeded(9);
        ClientState::new(0, l, p, r_w, r_d, data(10, 1), data(4, 2), cfg, mode, rng::seeded(5), Some(&mut mr)).unwrap()
    }

    #[test]
    fn make_update_divides_by_eta() {
        let l = layout();
        let p = init_params(&l, &mut rng::seeded(1));
        let mut cov = CoverageMask::empty(l.table.len());
        cov.set(3, true);
        let mut end = p.clone();
        let r = l.table.segments[3].range();
        for v in &mut end[r.clone()] {
            *v -= 0.1 * 2.0;
        }
        let u = make_update(&l.table, 0, 0, &cov, &p, &end, 0.1).unwrap();
        assert_eq!(u.deltas.len(), 1);
        assert!(u.deltas[0].values.iter().all(|v| (v - 2.0).abs() < 1e-12));
        let z = make_update(&l.table, 0, 0, &cov, &p, &p, 0.1).unwrap();
        assert!(z.deltas[0].values.iter().all(|v| *v == 0.0));
        assert!(make_update(&l.table, 0, 0, &cov, &p, &p, 0.0).is_err());
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let l = layout();
        let p = init_params(&l, &mut rng::seeded(1));
        let cfg = TrainConfig {
            epochs: 0,
            epochs_hat: 0,
            ..TrainConfig::default()
        };
        let mut c = client(&l, &p, 0.5, 0.5, MaskMode::Learned, &cfg);
        let before = c.masks.clone();
        let out = c.train_round(&l, &p, 0, &[0.5], &cfg).unwrap();
        assert_eq!(c.masks, before);
        assert!(out.update.deltas.iter().all(|d| d.values.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn mask_phase_leaves_weights_and_weight_phase_leaves_masks() {
        let l = layout();
        let p = init_params(&l, &mut rng::seeded(1));
        let cfg = TrainConfig {
            epochs: 0,
            epochs_hat: 2,
            ..TrainConfig::default()
        };
        let mut c = client(&l, &p, 0.5, 1.0, MaskMode::Learned, &cfg);
        let out = c.train_round(&l, &p, 0, &[1.0], &cfg).unwrap();
        assert!(out.mask_phase);
        assert!(out.update.deltas.iter().all(|d| d.values.iter().all(|v| *v == 0.0)));
        assert_ne!(c.masks, MaskState::init(&l, 0.0));

        let cfg = TrainConfig {
            epochs: 1,
            epochs_hat: 2,
            q_hat: 0,
            ..TrainConfig::default()
        };
        let before = c.masks.clone();
        c.train_round(&l, &p, 1, &[1.0], &cfg).unwrap();
        assert_eq!(c.masks, before);
    }

    #[test]
    fn masked_segments_untouched_and_uncovered() {
        let l = layout();
        let p = init_params(&l, &mut rng::seeded(1));
        let cfg = TrainConfig {
            epochs: 2,
            q_hat: 0,
            eta: 0.05,
            ..TrainConfig::default()
        };
        let mut c = client(&l, &p, 0.5, 1.0, MaskMode::Random, &cfg);
        let out = c.train_round(&l, &p, 0, &[1.0], &cfg).unwrap();
        for blk in 0..4 {
            let g = c.hard_mask(blk, cfg.freeze_policy);
            for (li, layer) in l.block_layers(blk).into_iter().enumerate() {
                for (j, s) in l.layer(layer).segments.clone().enumerate() {
                    assert_eq!(out.update.coverage.get(s), g.layer(li)[j] == 1.0);
                }
            }
        }
        assert!(out.update.deltas.iter().any(|d| d.values.iter().any(|v| *v != 0.0)));
        for d in &out.update.deltas {
            assert!(out.update.coverage.get(d.segment));
        }
    }

    #[test]
    fn random_masks_have_exact_rate() {
        let l = layout();
        let p = init_params(&l, &mut rng::seeded(1));
        let c = client(&l, &p, 0.5, 1.0, MaskMode::Random, &TrainConfig::default());
        for blk in 0..4 {
            let g = c.hard_mask(blk, FreezePolicy::Threshold);
            assert_eq!(g.attn.iter().sum::<f64>(), 1.0);
            assert_eq!(g.fc1.iter().sum::<f64>(), 2.0);
            assert_eq!(g.fc2.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn huge_penalty_pulls_expected_keep_ratio_to_budget() {
        let l = layout();
        let p = init_params(&l, &mut rng::seeded(1));
        let cfg = TrainConfig {
            epochs: 0,
            epochs_hat: 40,
            lambda1: 1e2,
            batch: 4,
            ..TrainConfig::default()
        };
        let mut c = client(&l, &p, 0.25, 1.0, MaskMode::Learned, &cfg);
        c.train_round(&l, &p, 0, &[1.0], &cfg).unwrap();
        let mut kept = 0.0;
        let mut total = 0.0;
        for blk in 0..4 {
            for (li, layer) in l.block_layers(blk).into_iter().enumerate() {
                let size = l.table.segments[l.layer(layer).segments.start].len as f64;
                for pj in c.masks.layer(blk, li).prob() {
                    kept += pj * size;
                    total += size;
                }
            }
        }
        assert!((kept / total - 0.25).abs() <= 0.02, "{}", kept / total);
    }
}
