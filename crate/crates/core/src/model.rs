//! Block model: a linear token embedding, `L` pre-activation blocks of
//! multi-head self-attention followed by a GELU MLP (each with a residual
//! add), and one linear exit classifier per depth reading mean-pooled tokens.
//!
//! Gradients are written by hand. Segment gates multiply every parameter of
//! a segment (the Hadamard product `w ⊙ M̂`), so the backward pass can report
//! both `∂L/∂w = M̂ ⊙ ∂L/∂w̃` and the collapsed `∂L/∂gate = Σ w ⊙ ∂L/∂w̃` per
//! segment. Masked segments are skipped in the forward pass and contribute
//! exactly zero; their outputs are zero-padded back to full width before the
//! residual add.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::digest::Fingerprint;
use crate::layout::{ModelLayout, ModelSpec};
use crate::submodel::DepthWindow;
use crate::tensor::{self, gelu, gelu_grad, linear_backward, linear_forward, Tensor};
use crate::{Error, Result};

/// Per-segment gate values of one block (1 = kept, 0 = masked).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockGates {
    pub attn: Vec<f64>,
    pub fc1: Vec<f64>,
    pub fc2: Vec<f64>,
}

impl BlockGates {
    pub fn ones(spec: &ModelSpec) -> Self {
        Self::filled(spec, 1.0)
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self::filled(spec, 0.0)
    }

    fn filled(spec: &ModelSpec, v: f64) -> Self {
        BlockGates {
            attn: vec![v; spec.heads],
            fc1: vec![v; spec.mlp_hidden / spec.group_size],
            fc2: vec![v; spec.hidden / spec.group_size],
        }
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        match i {
            0 => &self.attn,
            1 => &self.fc1,
            _ => &self.fc2,
        }
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Vec<f64> {
        match i {
            0 => &mut self.attn,
            1 => &mut self.fc1,
            _ => &mut self.fc2,
        }
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.attn.len() != spec.heads
            || self.fc1.len() != spec.mlp_hidden / spec.group_size
            || self.fc2.len() != spec.hidden / spec.group_size
        {
            return Err(Error::shape("block gates do not match the model"));
        }
        Ok(())
    }
}

/// Gates for every block; `None` means all segments kept.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub blocks: Vec<Option<BlockGates>>,
}

impl MaskSet {
    pub fn all_kept(depth: usize) -> Self {
        MaskSet {
            blocks: vec![None; depth],
        }
    }

    pub fn gates(&self, blk: usize) -> Option<&BlockGates> {
        self.blocks.get(blk).and_then(|g| g.as_ref())
    }
}

/// Which gradients a forward pass should prepare for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradMode {
    pub params: bool,
    pub masks: bool,
}

impl GradMode {
    pub const INFERENCE: GradMode = GradMode {
        params: false,
        masks: false,
    };
    pub const PARAMS: GradMode = GradMode {
        params: true,
        masks: false,
    };
    pub const MASKS: GradMode = GradMode {
        params: false,
        masks: true,
    };
    pub const BOTH: GradMode = GradMode {
        params: true,
        masks: true,
    };

    fn any(self) -> bool {
        self.params || self.masks
    }
}

/// Gradient buffer congruent with the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore {
    pub values: Vec<f64>,
}

impl GradStore {
    pub fn zeros(len: usize) -> Self {
        GradStore {
            values: vec![0.0; len],
        }
    }

    pub fn zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// Per-block `∂L/∂gate` values, aligned with [`BlockGates`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrads {
    pub blocks: Vec<Option<BlockGates>>,
}

impl MaskGrads {
    pub fn new(depth: usize) -> Self {
        MaskGrads {
            blocks: vec![None; depth],
        }
    }
}

/// Trunk and global exit classifiers over one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockModel {
    layout: Arc<ModelLayout>,
    params: Vec<f64>,
}

impl BlockModel {
    pub fn new(layout: Arc<ModelLayout>, params: Vec<f64>) -> Result<Self> {
        if params.len() != layout.total_params() {
            return Err(Error::shape("parameter vector does not match the segment table"));
        }
        Ok(BlockModel { layout, params })
    }

    /// Scaled Gaussian initialisation; residual output projections are
    /// shrunk by `1/sqrt(2L)` so activations stay bounded without
    /// normalisation layers.
    pub fn init<R: Rng + ?Sized>(layout: Arc<ModelLayout>, rng: &mut R) -> Self {
        let params = init_params(&layout, rng);
        BlockModel { layout, params }
    }

    pub fn layout(&self) -> &Arc<ModelLayout> {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    /// Logits of every global exit at or below the window top.
    pub fn forward(
        &self,
        batch: &Tensor,
        window: &DepthWindow,
        masks: Option<&MaskSet>,
    ) -> Result<ModelOutput> {
        let exits: Vec<usize> = (1..=window.top()).collect();
        let pass = trunk_forward(
            &self.layout,
            &self.params,
            batch,
            window,
            masks,
            &exits,
            GradMode::PARAMS,
        )?;
        let mut logits = Vec::with_capacity(exits.len());
        for (i, &k) in exits.iter().enumerate() {
            let w = exit_params(&self.layout, &self.params, k);
            logits.push(exit_forward(&self.layout.spec, w, &pass.features[i], pass.batch)?);
        }
        Ok(ModelOutput {
            depths: exits,
            logits,
            pass,
        })
    }

    /// Gradients of a loss given `∂loss/∂logits` for each emitted exit.
    pub fn backward(&self, out: &ModelOutput, loss_grads: &[Tensor]) -> Result<GradStore> {
        if loss_grads.len() != out.depths.len() {
            return Err(Error::shape("one loss gradient per emitted exit is required"));
        }
        let spec = &self.layout.spec;
        let mut grads = GradStore::zeros(self.params.len());
        let mut feat_grads = Vec::with_capacity(loss_grads.len());
        let s = out.pass.window.start;
        for (i, &k) in out.depths.iter().enumerate() {
            let layer = self.layout.exit_layer(k);
            let w = &self.params[layer.offset..layer.offset + layer.len];
            let mut dfeat = vec![0.0; out.pass.batch * spec.hidden];
            // exits inside the frozen range are forward-only
            let dw = if k > s {
                Some(&mut grads.values[layer.offset..layer.offset + layer.len])
            } else {
                None
            };
            exit_backward(spec, w, &out.pass.features[i], &loss_grads[i], dw, &mut dfeat)?;
            feat_grads.push(dfeat);
        }
        trunk_backward(
            &self.layout,
            &self.params,
            &out.pass,
            &feat_grads,
            &mut grads,
            None,
        )?;
        Ok(grads)
    }
}

/// Output of [`BlockModel::forward`].
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub depths: Vec<usize>,
    pub logits: Vec<Tensor>,
    pub pass: TrunkPass,
}

pub fn init_params<R: Rng + ?Sized>(layout: &ModelLayout, rng: &mut R) -> Vec<f64> {
    let spec = &layout.spec;
    let d = spec.hidden;
    let dh = spec.head_dim();
    let m = spec.mlp_hidden;
    let gs = spec.group_size;
    let mut p = vec![0.0; layout.total_params()];
    let mut normal = |scale: f64, out: &mut [f64]| {
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = z * scale;
        }
    };
    let resid = 1.0 / libm::sqrt(2.0 * spec.depth as f64);

    let e = layout.layer(layout.embed_layer);
    let rows = spec.tokens * d;
    normal(
        1.0 / libm::sqrt(spec.input_dim as f64),
        &mut p[e.offset..e.offset + rows * spec.input_dim],
    );

    for blk in 0..spec.depth {
        let [a, f1, f2] = layout.block_layers(blk);
        for seg in layout.layer(a).segments.clone() {
            let base = layout.table.segments[seg].offset;
            for part in 0..3 {
                let o = base + part * (dh * d + dh);
                normal(1.0 / libm::sqrt(d as f64), &mut p[o..o + dh * d]);
            }
            let o = base + 3 * (dh * d + dh);
            normal(resid / libm::sqrt(d as f64), &mut p[o..o + d * dh]);
        }
        for seg in layout.layer(f1).segments.clone() {
            let base = layout.table.segments[seg].offset;
            normal(1.0 / libm::sqrt(d as f64), &mut p[base..base + gs * d]);
        }
        for seg in layout.layer(f2).segments.clone() {
            let base = layout.table.segments[seg].offset;
            normal(resid / libm::sqrt(m as f64), &mut p[base..base + gs * m]);
        }
    }
    for k in 1..=spec.depth {
        let l = layout.exit_layer(k);
        normal(
            1.0 / libm::sqrt(d as f64),
            &mut p[l.offset..l.offset + spec.classes * d],
        );
    }
    p
}

/// Parameters of the global exit classifier at depth `k`.
pub fn exit_params<'a>(layout: &ModelLayout, params: &'a [f64], k: usize) -> &'a [f64] {
    let l = layout.exit_layer(k);
    &params[l.offset..l.offset + l.len]
}

/// `logits = feats · Wᵀ + b` for a packed `[W (C×d), b (C)]` classifier.
pub fn exit_forward(spec: &ModelSpec, w: &[f64], feats: &[f64], batch: usize) -> Result<Tensor> {
    let (c, d) = (spec.classes, spec.hidden);
    if w.len() != c * d + c || feats.len() != batch * d {
        return Err(Error::shape("exit classifier shape mismatch"));
    }
    let mut out = vec![0.0; batch * c];
    linear_forward(feats, batch, d, &w[..c * d], Some(&w[c * d..]), c, None, &mut out);
    let t = Tensor::from_rows(batch, c, out)?;
    t.ensure_finite("logits")?;
    Ok(t)
}

/// Accumulates classifier gradients into `dw` (if given) and adds
/// `∂L/∂feats` into `dfeat`.
pub fn exit_backward(
    spec: &ModelSpec,
    w: &[f64],
    feats: &[f64],
    dlogits: &Tensor,
    dw: Option<&mut [f64]>,
    dfeat: &mut [f64],
) -> Result<()> {
    let (c, d) = (spec.classes, spec.hidden);
    let (b, cc) = dlogits.dims2()?;
    if cc != c || feats.len() != b * d || dfeat.len() != b * d {
        return Err(Error::shape("exit gradient shape mismatch"));
    }
    let g = dlogits.data();
    match dw {
        Some(dw) => {
            let (dww, dwb) = dw.split_at_mut(c * d);
            linear_backward(feats, b, d, &w[..c * d], c, g, Some(dww), Some(dwb), Some(dfeat), None, None);
        }
        None => linear_backward(feats, b, d, &w[..c * d], c, g, None, None, Some(dfeat), None, None),
    }
    Ok(())
}

/// Effective (gated) dense weights of one block.
#[derive(Debug, Clone)]
struct DenseBlock {
    wq: Vec<f64>,
    bq: Vec<f64>,
    wk: Vec<f64>,
    bk: Vec<f64>,
    wv: Vec<f64>,
    bv: Vec<f64>,
    wo: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    head_on: Vec<bool>,
    qkv_rows: Vec<bool>,
    fc1_rows: Vec<bool>,
    fc2_rows: Vec<bool>,
    gates: BlockGates,
}

impl DenseBlock {
    fn zeros_like(spec: &ModelSpec, gates: BlockGates) -> Self {
        let d = spec.hidden;
        let m = spec.mlp_hidden;
        let dh = spec.head_dim();
        let gs = spec.group_size;
        let head_on: Vec<bool> = gates.attn.iter().map(|g| *g != 0.0).collect();
        let qkv_rows = (0..d).map(|r| head_on[r / dh]).collect();
        let fc1_rows = (0..m).map(|r| gates.fc1[r / gs] != 0.0).collect();
        let fc2_rows = (0..d).map(|r| gates.fc2[r / gs] != 0.0).collect();
        DenseBlock {
            wq: vec![0.0; d * d],
            bq: vec![0.0; d],
            wk: vec![0.0; d * d],
            bk: vec![0.0; d],
            wv: vec![0.0; d * d],
            bv: vec![0.0; d],
            wo: vec![0.0; d * d],
            w1: vec![0.0; m * d],
            b1: vec![0.0; m],
            w2: vec![0.0; d * m],
            b2: vec![0.0; d],
            head_on,
            qkv_rows,
            fc1_rows,
            fc2_rows,
            gates,
        }
    }
}

/// Maps every parameter of block `blk` onto its slot in the dense block and
/// its gate. `f(flat_index, dense_slot, gate)` is called once per parameter.
///
/// Dense slots: 0..=5 q/k/v weight+bias, 6 wo, 7 w1, 8 b1, 9 w2, 10 b2.
fn visit_block<F: FnMut(usize, usize, usize, f64, usize)>(
    layout: &ModelLayout,
    blk: usize,
    gates: &BlockGates,
    mut f: F,
) {
    // f(flat, slot, dense_index, gate, segment)
    let spec = &layout.spec;
    let d = spec.hidden;
    let dh = spec.head_dim();
    let m = spec.mlp_hidden;
    let gs = spec.group_size;
    let [a, f1, f2] = layout.block_layers(blk);
    let table = &layout.table;

    for (j, seg) in table.layers[a].segments.clone().enumerate() {
        let g = gates.attn[j];
        let base = table.segments[seg].offset;
        for part in 0..3 {
            let wo_ = base + part * (dh * d + dh);
            for r in 0..dh {
                let row = j * dh + r;
                for c in 0..d {
                    f(wo_ + r * d + c, 2 * part, row * d + c, g, seg);
                }
                f(wo_ + dh * d + r, 2 * part + 1, row, g, seg);
            }
        }
        let ob = base + 3 * (dh * d + dh);
        for r in 0..d {
            for c in 0..dh {
                f(ob + r * dh + c, 6, r * d + j * dh + c, g, seg);
            }
        }
    }
    for (gi, seg) in table.layers[f1].segments.clone().enumerate() {
        let g = gates.fc1[gi];
        let base = table.segments[seg].offset;
        for r in 0..gs {
            let row = gi * gs + r;
            for c in 0..d {
                f(base + r * d + c, 7, row * d + c, g, seg);
            }
            f(base + gs * d + r, 8, row, g, seg);
        }
    }
    for (gi, seg) in table.layers[f2].segments.clone().enumerate() {
        let g = gates.fc2[gi];
        let base = table.segments[seg].offset;
        for r in 0..gs {
            let row = gi * gs + r;
            for c in 0..m {
                f(base + r * m + c, 9, row * m + c, g, seg);
            }
            f(base + gs * m + r, 10, row, g, seg);
        }
    }
}

fn slot_mut(db: &mut DenseBlock, slot: usize) -> &mut [f64] {
    match slot {
        0 => &mut db.wq,
        1 => &mut db.bq,
        2 => &mut db.wk,
        3 => &mut db.bk,
        4 => &mut db.wv,
        5 => &mut db.bv,
        6 => &mut db.wo,
        7 => &mut db.w1,
        8 => &mut db.b1,
        9 => &mut db.w2,
        _ => &mut db.b2,
    }
}

fn slot(db: &DenseBlock, slot: usize) -> &[f64] {
    match slot {
        0 => &db.wq,
        1 => &db.bq,
        2 => &db.wk,
        3 => &db.bk,
        4 => &db.wv,
        5 => &db.bv,
        6 => &db.wo,
        7 => &db.w1,
        8 => &db.b1,
        9 => &db.w2,
        _ => &db.b2,
    }
}

fn gather_block(layout: &ModelLayout, params: &[f64], blk: usize, gates: BlockGates) -> DenseBlock {
    let mut db = DenseBlock::zeros_like(&layout.spec, gates.clone());
    visit_block(layout, blk, &gates, |flat, s, i, g, _| {
        if g != 0.0 {
            slot_mut(&mut db, s)[i] = g * params[flat];
        }
    });
    db
}

#[derive(Debug, Clone)]
struct BlockCache {
    dense: DenseBlock,
    h_in: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    h1: Vec<f64>,
    u: Vec<f64>,
    act: Vec<f64>,
}

/// Activations retained by [`trunk_forward`] for [`trunk_backward`].
#[derive(Debug, Clone)]
pub struct TrunkPass {
    pub batch: usize,
    pub window: DepthWindow,
    pub exits: Vec<usize>,
    /// Mean-pooled features (`batch × hidden`) per exit, aligned with `exits`.
    pub features: Vec<Vec<f64>>,
    mode: GradMode,
    input: Vec<f64>,
    caches: Vec<BlockCache>,
    fingerprint: u64,
}

impl TrunkPass {
    pub fn mode(&self) -> GradMode {
        self.mode
    }
}

fn window_fingerprint(layout: &ModelLayout, params: &[f64], window: &DepthWindow) -> u64 {
    let mut fp = Fingerprint::new();
    if window.start == 0 {
        let e = layout.layer(layout.embed_layer);
        fp.floats(&params[e.offset..e.offset + e.len]);
    }
    for blk in window.trainable() {
        fp.floats(&params[layout.block_range(blk)]);
    }
    fp.finish()
}

/// Runs the embedding and blocks `[0, window.top())`, pooling features at
/// each requested exit depth. Blocks below `window.start` run without
/// retaining activations; blocks at or above `window.top()` are never read.
pub fn trunk_forward(
    layout: &ModelLayout,
    params: &[f64],
    batch: &Tensor,
    window: &DepthWindow,
    masks: Option<&MaskSet>,
    exits: &[usize],
    mode: GradMode,
) -> Result<TrunkPass> {
    let spec = &layout.spec;
    let (b, in_dim) = batch.dims2()?;
    if in_dim != spec.input_dim {
        return Err(Error::shape(alloc::format!(
            "batch has {} features, model expects {}",
            in_dim,
            spec.input_dim
        )));
    }
    if params.len() != layout.total_params() {
        return Err(Error::shape("parameter vector does not match the segment table"));
    }
    window.check(spec.depth)?;
    if let Some(m) = masks {
        if m.blocks.len() != spec.depth {
            return Err(Error::shape("mask set must have one entry per block"));
        }
        for g in m.blocks.iter().flatten() {
            g.check(spec)?;
        }
    }
    let top = window.top();
    if exits.windows(2).any(|w| w[0] >= w[1]) || exits.iter().any(|&k| k == 0 || k > top) {
        return Err(Error::shape("exit depths must be increasing and inside the window"));
    }

    let d = spec.hidden;
    let t = spec.tokens;
    let n = b * t;
    let e = layout.layer(layout.embed_layer);
    let rows = t * d;
    let mut h = vec![0.0; b * rows];
    linear_forward(
        batch.data(),
        b,
        in_dim,
        &params[e.offset..e.offset + rows * in_dim],
        Some(&params[e.offset + rows * in_dim..e.offset + e.len]),
        rows,
        None,
        &mut h,
    );

    let mut features = Vec::with_capacity(exits.len());
    let mut caches = Vec::new();
    let mut next_exit = 0;
    for blk in 0..top {
        let gates = masks
            .and_then(|m| m.gates(blk).cloned())
            .unwrap_or_else(|| BlockGates::ones(spec));
        let dense = gather_block(layout, params, blk, gates);
        let keep = mode.any() && blk >= window.start;
        let (out, cache) = block_forward(spec, dense, h, b, keep);
        h = out;
        if let Some(c) = cache {
            caches.push(c);
        }
        if next_exit < exits.len() && exits[next_exit] == blk + 1 {
            features.push(mean_pool(&h, b, t, d));
            next_exit += 1;
        }
    }
    debug_assert_eq!(h.len(), n * d);
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("activations"));
    }
    let fingerprint = if mode.any() {
        window_fingerprint(layout, params, window)
    } else {
        0
    };
    Ok(TrunkPass {
        batch: b,
        window: *window,
        exits: exits.to_vec(),
        features,
        mode,
        input: if mode.any() && window.start == 0 {
            batch.data().to_vec()
        } else {
            Vec::new()
        },
        caches,
        fingerprint,
    })
}

fn mean_pool(h: &[f64], b: usize, t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * d];
    let inv = 1.0 / t as f64;
    for i in 0..b {
        let o = &mut out[i * d..(i + 1) * d];
        for tok in 0..t {
            tensor::axpy(inv, &h[(i * t + tok) * d..(i * t + tok + 1) * d], o);
        }
    }
    out
}

fn block_forward(
    spec: &ModelSpec,
    dense: DenseBlock,
    h_in: Vec<f64>,
    b: usize,
    keep: bool,
) -> (Vec<f64>, Option<BlockCache>) {
    let d = spec.hidden;
    let m = spec.mlp_hidden;
    let t = spec.tokens;
    let nh = spec.heads;
    let dh = spec.head_dim();
    let n = b * t;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let any_head = dense.head_on.iter().any(|x| *x);

    let mut q = vec![0.0; n * d];
    let mut k = vec![0.0; n * d];
    let mut v = vec![0.0; n * d];
    let mut o = vec![0.0; n * d];
    let mut probs = vec![0.0; if keep { b * nh * t * t } else { 0 }];
    let mut h1 = h_in.clone();
    if any_head {
        let rows = Some(dense.qkv_rows.as_slice());
        linear_forward(&h_in, n, d, &dense.wq, Some(&dense.bq), d, rows, &mut q);
        linear_forward(&h_in, n, d, &dense.wk, Some(&dense.bk), d, rows, &mut k);
        linear_forward(&h_in, n, d, &dense.wv, Some(&dense.bv), d, rows, &mut v);
        let mut p = vec![0.0; t * t];
        for s in 0..b {
            for j in 0..nh {
                if !dense.head_on[j] {
                    continue;
                }
                let col = j * dh;
                for t1 in 0..t {
                    let qr = &q[(s * t + t1) * d + col..(s * t + t1) * d + col + dh];
                    for t2 in 0..t {
                        let kr = &k[(s * t + t2) * d + col..(s * t + t2) * d + col + dh];
                        p[t1 * t + t2] = scale * tensor::dot(qr, kr);
                    }
                    tensor::softmax_in_place(&mut p[t1 * t..(t1 + 1) * t]);
                    let orow = (s * t + t1) * d + col;
                    for t2 in 0..t {
                        let w = p[t1 * t + t2];
                        let vr = &v[(s * t + t2) * d + col..(s * t + t2) * d + col + dh];
                        tensor::axpy(w, vr, &mut o[orow..orow + dh]);
                    }
                }
                if keep {
                    let off = (s * nh + j) * t * t;
                    probs[off..off + t * t].copy_from_slice(&p);
                }
            }
        }
        let mut attn = vec![0.0; n * d];
        linear_forward(&o, n, d, &dense.wo, None, d, None, &mut attn);
        for (a, x) in h1.iter_mut().zip(&attn) {
            *a += x;
        }
    }

    let mut u = vec![0.0; n * m];
    linear_forward(&h1, n, d, &dense.w1, Some(&dense.b1), m, Some(&dense.fc1_rows), &mut u);
    let act: Vec<f64> = u.iter().map(|x| gelu(*x)).collect();
    let mut f = vec![0.0; n * d];
    linear_forward(&act, n, m, &dense.w2, Some(&dense.b2), d, Some(&dense.fc2_rows), &mut f);
    let mut h2 = h1.clone();
    for (a, x) in h2.iter_mut().zip(&f) {
        *a += x;
    }
    let cache = keep.then(|| BlockCache {
        dense,
        h_in,
        q,
        k,
        v,
        probs,
        o,
        h1,
        u,
        act,
    });
    (h2, cache)
}

/// Back-propagates pooled-feature gradients (aligned with `pass.exits`)
/// through the trainable blocks. Parameter gradients are accumulated into
/// `grads` when the pass was run with `GradMode::params`; per-segment gate
/// gradients into `mask_grads` when requested.
pub fn trunk_backward(
    layout: &ModelLayout,
    params: &[f64],
    pass: &TrunkPass,
    feat_grads: &[Vec<f64>],
    grads: &mut GradStore,
    mut mask_grads: Option<&mut MaskGrads>,
) -> Result<()> {
    let spec = &layout.spec;
    let d = spec.hidden;
    let t = spec.tokens;
    let b = pass.batch;
    let n = b * t;
    if !pass.mode.any()
        || feat_grads.len() != pass.exits.len()
        || grads.values.len() != params.len()
        || window_fingerprint(layout, params, &pass.window) != pass.fingerprint
    {
        return Err(Error::StaleCache);
    }
    if feat_grads.iter().any(|g| g.len() != b * d) {
        return Err(Error::shape("feature gradient shape mismatch"));
    }
    if mask_grads.is_some() && !pass.mode.masks {
        return Err(Error::StaleCache);
    }

    let s = pass.window.start;
    let top = pass.window.top();
    let mut dh = vec![0.0; n * d];
    let inv_t = 1.0 / t as f64;
    for blk in (s..top).rev() {
        if let Some(i) = pass.exits.iter().position(|&k| k == blk + 1) {
            let g = &feat_grads[i];
            for sample in 0..b {
                for tok in 0..t {
                    tensor::axpy(
                        inv_t,
                        &g[sample * d..(sample + 1) * d],
                        &mut dh[(sample * t + tok) * d..(sample * t + tok + 1) * d],
                    );
                }
            }
        }
        let cache = &pass.caches[blk - s];
        let (dx, dense_grads) = block_backward(spec, cache, &dh, b, pass.mode);
        dh = dx;
        let gates = &cache.dense.gates;
        let mut mg = mask_grads.as_ref().map(|_| BlockGates::zeros(spec));
        let [a, f1, f2] = layout.block_layers(blk);
        let seg_base = [
            layout.table.layers[a].segments.start,
            layout.table.layers[f1].segments.start,
            layout.table.layers[f2].segments.start,
        ];
        let want_params = pass.mode.params;
        visit_block(layout, blk, gates, |flat, sl, i, g, seg| {
            let dg = slot(&dense_grads, sl)[i];
            if want_params && g != 0.0 {
                grads.values[flat] += g * dg;
            }
            if let Some(mg) = mg.as_mut() {
                let (li, local) = if seg >= seg_base[2] {
                    (2, seg - seg_base[2])
                } else if seg >= seg_base[1] {
                    (1, seg - seg_base[1])
                } else {
                    (0, seg - seg_base[0])
                };
                mg.layer_mut(li)[local] += params[flat] * dg;
            }
        });
        if let (Some(all), Some(mg)) = (mask_grads.as_deref_mut(), mg) {
            all.blocks[blk] = Some(mg);
        }
    }

    if s == 0 && pass.mode.params {
        let e = layout.layer(layout.embed_layer);
        let rows = t * d;
        let in_dim = spec.input_dim;
        let (dw, db) = grads.values[e.offset..e.offset + e.len].split_at_mut(rows * in_dim);
        linear_backward(
            &pass.input,
            b,
            in_dim,
            &params[e.offset..e.offset + rows * in_dim],
            rows,
            &dh,
            Some(dw),
            Some(db),
            None,
            None,
            None,
        );
    }
    if !grads.values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("gradients"));
    }
    Ok(())
}

/// Returns `∂L/∂h_in` and the dense gradients w.r.t. the gated weights.
fn block_backward(
    spec: &ModelSpec,
    c: &BlockCache,
    dh_out: &[f64],
    b: usize,
    mode: GradMode,
) -> (Vec<f64>, DenseBlock) {
    let d = spec.hidden;
    let m = spec.mlp_hidden;
    let t = spec.tokens;
    let nh = spec.heads;
    let dh = spec.head_dim();
    let n = b * t;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let db = &c.dense;
    let mut g = DenseBlock::zeros_like(spec, db.gates.clone());

    // with mask gradients every row's dense gradient is needed, since
    // ∂L/∂gate = Σ w ⊙ ∂L/∂w̃ is non-zero even for a closed linear group
    let fc1_want: Option<&[bool]> = if mode.masks { None } else { Some(&db.fc1_rows) };
    let fc2_want: Option<&[bool]> = if mode.masks { None } else { Some(&db.fc2_rows) };

    // MLP: h2 = h1 + W2·gelu(W1·h1 + b1) + b2
    let mut dh1 = dh_out.to_vec();
    let mut dact = vec![0.0; n * m];
    linear_backward(
        &c.act,
        n,
        m,
        &db.w2,
        d,
        dh_out,
        Some(&mut g.w2),
        Some(&mut g.b2),
        Some(&mut dact),
        fc2_want,
        Some(&db.fc2_rows),
    );
    let du: Vec<f64> = dact
        .iter()
        .zip(&c.u)
        .map(|(da, u)| da * gelu_grad(*u))
        .collect();
    linear_backward(
        &c.h1,
        n,
        d,
        &db.w1,
        m,
        &du,
        Some(&mut g.w1),
        Some(&mut g.b1),
        Some(&mut dh1),
        fc1_want,
        Some(&db.fc1_rows),
    );

    // attention: h1 = h_in + Wo·concat_j softmax(Q_j K_jᵀ/√dh) V_j
    let mut dx = dh1.clone();
    if db.head_on.iter().any(|x| *x) {
        let mut d_o = vec![0.0; n * d];
        linear_backward(&c.o, n, d, &db.wo, d, &dh1, Some(&mut g.wo), None, Some(&mut d_o), None, None);
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; t * t];
        for s in 0..b {
            for j in 0..nh {
                if !db.head_on[j] {
                    continue;
                }
                let col = j * dh;
                let p = &c.probs[(s * nh + j) * t * t..(s * nh + j + 1) * t * t];
                let row = |tok: usize| (s * t + tok) * d + col;
                for t1 in 0..t {
                    let dor = &d_o[row(t1)..row(t1) + dh];
                    for t2 in 0..t {
                        let vr = &c.v[row(t2)..row(t2) + dh];
                        dp[t1 * t + t2] = tensor::dot(dor, vr);
                    }
                }
                for t1 in 0..t {
                    let pr = &p[t1 * t..(t1 + 1) * t];
                    let dot_pd: f64 = (0..t).map(|t2| pr[t2] * dp[t1 * t + t2]).sum();
                    for t2 in 0..t {
                        let ds = pr[t2] * (dp[t1 * t + t2] - dot_pd) * scale;
                        // dV[t2] += P[t1,t2]·dO[t1]
                        let (o1, o2) = (row(t1), row(t2));
                        for cc in 0..dh {
                            dv[o2 + cc] += pr[t2] * d_o[o1 + cc];
                            dq[o1 + cc] += ds * c.k[o2 + cc];
                            dk[o2 + cc] += ds * c.q[o1 + cc];
                        }
                    }
                }
            }
        }
        let rows = Some(db.qkv_rows.as_slice());
        for (dproj, w, gw, gb) in [
            (&dq, &db.wq, &mut g.wq, &mut g.bq),
            (&dk, &db.wk, &mut g.wk, &mut g.bk),
            (&dv, &db.wv, &mut g.wv, &mut g.bv),
        ] {
            linear_backward(&c.h_in, n, d, w, d, dproj, Some(gw), Some(gb), Some(&mut dx), rows, rows);
        }
    }
    (dx, g)
}
