//! Convex surrogate: a segmented linear least-squares model trained by
//! full-batch local gradient descent.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::client::{make_update, ClientUpdate};
use crate::layout::SegmentTable;
use crate::sim::{Job, RoundRecord, Worker};
use crate::submodel::CoverageMask;
use crate::tensor::dot;
use crate::{Error, Result};

/// `½‖Xw − y‖²/n` over one client's rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl LeastSquares {
    pub fn rows(&self) -> usize {
        self.y.len()
    }

    fn residuals(&self, w: &[f64]) -> Vec<f64> {
        (0..self.rows())
            .map(|i| dot(&self.x[i * self.dim..(i + 1) * self.dim], w) - self.y[i])
            .collect()
    }

    /// Sum of squared residuals halved (not normalised).
    pub fn half_sse(&self, w: &[f64]) -> f64 {
        self.residuals(w).iter().map(|r| r * r).sum::<f64>() * 0.5
    }

    /// `Xᵀ(Xw − y)` (not normalised).
    pub fn sse_grad(&self, w: &[f64]) -> Vec<f64> {
        let r = self.residuals(w);
        let mut g = vec![0.0; self.dim];
        for (i, ri) in r.iter().enumerate() {
            crate::tensor::axpy(*ri, &self.x[i * self.dim..(i + 1) * self.dim], &mut g);
        }
        g
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        self.half_sse(w) / self.rows() as f64
    }

    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        let n = self.rows() as f64;
        self.sse_grad(w).into_iter().map(|g| g / n).collect()
    }
}

/// Loss and gradient of the pooled objective over every client's rows.
pub fn pooled(parts: &[LeastSquares], w: &[f64]) -> (f64, Vec<f64>) {
    let n: usize = parts.iter().map(|p| p.rows()).sum();
    let mut loss = 0.0;
    let mut grad = vec![0.0; w.len()];
    for p in parts {
        loss += p.half_sse(w);
        crate::tensor::axpy(1.0, &p.sse_grad(w), &mut grad);
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (loss * inv, grad)
}

/// Nearly realizable data: `y = Xw* + noise·ε` with Gaussian `X` whose
/// column scales differ per client.
pub fn generate<R: Rng + ?Sized>(
    clients: usize,
    dim: usize,
    rows: usize,
    noise: f64,
    rng: &mut R,
) -> Result<(Vec<LeastSquares>, Vec<f64>)> {
    if clients == 0 || dim == 0 || rows == 0 {
        return Err(Error::invalid("convex", "clients, dim and rows must be positive"));
    }
    let w_star: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let mut parts = Vec::with_capacity(clients);
    for c in 0..clients {
        let scale = 0.5 + (c % 3) as f64 * 0.25;
        let mut x = Vec::with_capacity(rows * dim);
        let mut y = Vec::with_capacity(rows);
        for _ in 0..rows {
            let row: Vec<f64> = (0..dim).map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            }).collect();
            let e: f64 = StandardNormal.sample(rng);
            y.push(dot(&row, &w_star) + noise * e);
            x.extend(row);
        }
        parts.push(LeastSquares { dim, x, y });
    }
    Ok((parts, w_star))
}

/// Pooled objective after one aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexTrace {
    pub round: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
}

/// Clients running `epochs` full-batch gradient steps on their own rows.
#[derive(Debug, Clone)]
pub struct ConvexWorker {
    pub parts: Vec<LeastSquares>,
    pub table: SegmentTable,
    pub eta: f64,
    pub epochs: usize,
    pub trace: Vec<ConvexTrace>,
}

impl ConvexWorker {
    /// `segments` equal segments must tile the weight vector.
    pub fn new(parts: Vec<LeastSquares>, segments: usize, eta: f64, epochs: usize) -> Result<Self> {
        let dim = parts.first().map_or(0, |p| p.dim);
        if segments == 0 || dim % segments != 0 {
            return Err(Error::invalid("segments", "must divide the weight dimension"));
        }
        Ok(ConvexWorker {
            parts,
            table: SegmentTable::uniform("w", segments, dim / segments),
            eta,
            epochs,
            trace: Vec::new(),
        })
    }
}

impl Worker for ConvexWorker {
    fn clients(&self) -> usize {
        self.parts.len()
    }

    fn train(&mut self, client: usize, round: usize, global: &[f64]) -> Result<Job> {
        let p = &self.parts[client];
        let mut w = global.to_vec();
        for _ in 0..self.epochs {
            let g = p.grad(&w);
            crate::tensor::axpy(-self.eta, &g, &mut w);
        }
        let cov = CoverageMask::from_bits(vec![true; self.table.len()]);
        let update: ClientUpdate = make_update(&self.table, client, round, &cov, global, &w, self.eta)?;
        Ok(Job {
            update,
            epochs: self.epochs,
            samples: p.rows(),
            r_n: 1.0,
        })
    }

    fn after_round(&mut self, record: &RoundRecord, global: &[f64]) -> Result<()> {
        let (loss, g) = pooled(&self.parts, global);
        self.trace.push(ConvexTrace {
            round: record.round,
            loss,
            grad_norm_sq: dot(&g, &g),
        });
        Ok(())
    }
}
