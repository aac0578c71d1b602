//! Segment table: how the flat parameter vector of the block model is cut
//! into named segments, the unit of masking, scoring and aggregation.
//!
//! Flat layout, in order:
//!
//! ```text
//! embed                           W_e (T·d × D_in), b_e (T·d)
//! for block b in 0..L:
//!   block{b}.attn.head{j}         Wq_j (dh×d), bq_j, Wk_j, bk_j, Wv_j, bv_j, Wo_j (d×dh)
//!   block{b}.fc1.group{g}         gs rows of W1 (gs×d), then b1 slice (gs)
//!   block{b}.fc2.group{g}         gs rows of W2 (gs×m), then b2 slice (gs)
//! exit{k} for k in 1..=L          W (C×d), b (C)
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Number of tokens the flattened input is projected into.
    pub tokens: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub depth: usize,
    pub classes: usize,
    /// Output neurons per linear-layer segment.
    pub group_size: usize,
}

impl ModelSpec {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: usize, f: &'static str| {
            if v == 0 {
                Err(Error::invalid(f, "must be positive"))
            } else {
                Ok(())
            }
        };
        pos(self.input_dim, "model.input_dim")?;
        pos(self.tokens, "model.tokens")?;
        pos(self.hidden, "model.hidden")?;
        pos(self.heads, "model.heads")?;
        pos(self.mlp_hidden, "model.mlp_hidden")?;
        pos(self.depth, "model.depth")?;
        pos(self.group_size, "model.group_size")?;
        if self.classes < 2 {
            return Err(Error::invalid("model.classes", "need at least 2 classes"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::invalid("model.heads", "hidden size must be divisible by heads"));
        }
        if self.hidden % self.group_size != 0 || self.mlp_hidden % self.group_size != 0 {
            return Err(Error::invalid(
                "model.group_size",
                "must divide both hidden and MLP sizes",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Embed,
    Attention,
    Fc1,
    Fc2,
    Exit,
}

/// A contiguous run of parameters belonging to one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Owning block for attention/fc layers, exit depth for classifiers.
    pub index: usize,
    pub segments: Range<usize>,
    pub offset: usize,
    pub len: usize,
    /// Output rows of the weight matrix (heads for attention).
    pub d_out: usize,
    pub d_in: usize,
    /// Output rows per segment (head_dim for attention).
    pub group: usize,
}

impl Layer {
    pub fn is_maskable(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Attention | LayerKind::Fc1 | LayerKind::Fc2
        )
    }

    pub fn segment_count(&self) -> usize {
        self.segments.end - self.segments.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub layer: usize,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Named segments and layers over one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTable {
    pub segments: Vec<Segment>,
    pub layers: Vec<Layer>,
    pub total: usize,
}

impl SegmentTable {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segment(&self, i: usize) -> Result<&Segment> {
        self.segments.get(i).ok_or(Error::UnknownSegment(i))
    }

    /// Checks that segments tile `[0, total)` in order.
    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        for (i, s) in self.segments.iter().enumerate() {
            if s.offset != cursor || s.layer >= self.layers.len() {
                return Err(Error::shape(format!("segment {} ({}) out of place", i, s.name)));
            }
            cursor += s.len;
        }
        if cursor != self.total {
            return Err(Error::shape("segments do not cover the parameter vector"));
        }
        Ok(())
    }

    /// Builds a table where each listed layer is split into equal segments.
    /// Used by models other than the block model (e.g. the convex surrogate).
    pub fn uniform(layer_name: &str, segments: usize, seg_len: usize) -> Self {
        let segs = (0..segments)
            .map(|i| Segment {
                name: format!("{}.seg{}", layer_name, i),
                layer: 0,
                offset: i * seg_len,
                len: seg_len,
            })
            .collect();
        SegmentTable {
            segments: segs,
            layers: alloc::vec![Layer {
                name: String::from(layer_name),
                kind: LayerKind::Fc1,
                index: 0,
                segments: 0..segments,
                offset: 0,
                len: segments * seg_len,
                d_out: segments,
                d_in: seg_len,
                group: 1,
            }],
            total: segments * seg_len,
        }
    }
}

/// Layer indices of one block inside the segment table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayers {
    pub attn: usize,
    pub fc1: usize,
    pub fc2: usize,
}

/// Segment table plus the typed offsets the forward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub spec: ModelSpec,
    pub table: SegmentTable,
    pub embed_layer: usize,
    pub blocks: Vec<BlockLayers>,
    /// Layer index of the exit classifier at depth `k` is `exits[k - 1]`.
    pub exits: Vec<usize>,
}

impl ModelLayout {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.hidden;
        let dh = spec.head_dim();
        let m = spec.mlp_hidden;
        let gs = spec.group_size;
        let mut b = TableBuilder::default();

        let embed_layer = b.layer(
            String::from("embed"),
            LayerKind::Embed,
            0,
            spec.tokens * d,
            spec.input_dim,
            spec.tokens * d,
            &[(String::from("embed"), spec.tokens * d * (spec.input_dim + 1))],
        );

        let head_len = 3 * (dh * d + dh) + d * dh;
        let mut blocks = Vec::with_capacity(spec.depth);
        for blk in 0..spec.depth {
            let heads: Vec<_> = (0..spec.heads)
                .map(|j| (format!("block{}.attn.head{}", blk, j), head_len))
                .collect();
            let attn = b.layer(
                format!("block{}.attn", blk),
                LayerKind::Attention,
                blk,
                spec.heads,
                d,
                dh,
                &heads,
            );
            let fc1_groups: Vec<_> = (0..m / gs)
                .map(|g| (format!("block{}.fc1.group{}", blk, g), gs * d + gs))
                .collect();
            let fc1 = b.layer(format!("block{}.fc1", blk), LayerKind::Fc1, blk, m, d, gs, &fc1_groups);
            let fc2_groups: Vec<_> = (0..d / gs)
                .map(|g| (format!("block{}.fc2.group{}", blk, g), gs * m + gs))
                .collect();
            let fc2 = b.layer(format!("block{}.fc2", blk), LayerKind::Fc2, blk, d, m, gs, &fc2_groups);
            blocks.push(BlockLayers { attn, fc1, fc2 });
        }

        let exits = (1..=spec.depth)
            .map(|k| {
                b.layer(
                    format!("exit{}", k),
                    LayerKind::Exit,
                    k,
                    spec.classes,
                    d,
                    spec.classes,
                    &[(format!("exit{}", k), spec.classes * d + spec.classes)],
                )
            })
            .collect();

        let table = b.finish();
        table.validate()?;
        Ok(ModelLayout {
            spec,
            table,
            embed_layer,
            blocks,
            exits,
        })
    }

    pub fn total_params(&self) -> usize {
        self.table.total
    }

    pub fn layer(&self, i: usize) -> &Layer {
        &self.table.layers[i]
    }

    pub fn exit_layer(&self, depth: usize) -> &Layer {
        &self.table.layers[self.exits[depth - 1]]
    }

    /// Maskable layers of one block, in attention, fc1, fc2 order.
    pub fn block_layers(&self, blk: usize) -> [usize; 3] {
        let b = self.blocks[blk];
        [b.attn, b.fc1, b.fc2]
    }

    /// Parameter range covered by block `blk`.
    pub fn block_range(&self, blk: usize) -> Range<usize> {
        let b = self.blocks[blk];
        let start = self.table.layers[b.attn].offset;
        let end = self.table.layers[b.fc2].offset + self.table.layers[b.fc2].len;
        start..end
    }

    pub fn block_of_segment(&self, seg: usize) -> Option<usize> {
        let layer = &self.table.layers[self.table.segments[seg].layer];
        layer.is_maskable().then_some(layer.index)
    }
}

#[derive(Default)]
struct TableBuilder {
    segments: Vec<Segment>,
    layers: Vec<Layer>,
    cursor: usize,
}

impl TableBuilder {
    #[allow(clippy::too_many_arguments)]
    fn layer(
        &mut self,
        name: String,
        kind: LayerKind,
        index: usize,
        d_out: usize,
        d_in: usize,
        group: usize,
        segs: &[(String, usize)],
    ) -> usize {
        let li = self.layers.len();
        let first = self.segments.len();
        let offset = self.cursor;
        for (sname, len) in segs {
            self.segments.push(Segment {
                name: sname.clone(),
                layer: li,
                offset: self.cursor,
                len: *len,
            });
            self.cursor += len;
        }
        self.layers.push(Layer {
            name,
            kind,
            index,
            segments: first..self.segments.len(),
            offset,
            len: self.cursor - offset,
            d_out,
            d_in,
            group,
        });
        li
    }

    fn finish(self) -> SegmentTable {
        SegmentTable {
            segments: self.segments,
            layers: self.layers,
            total: self.cursor,
        }
    }
}
