//! Simulator worker driving real clients of the block model.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::client::{ClientState, TrainConfig};
use crate::data::Dataset;
use crate::layout::ModelLayout;
use crate::metrics::{self, Metrics};
use crate::model::{exit_forward, exit_params, trunk_forward, GradMode};
use crate::sim::{Job, RoundRecord, Worker};
use crate::submodel::DepthWindow;
use crate::Result;

const EVAL_CHUNK: usize = 256;

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub sim_time: f64,
    pub server_top1: Option<f64>,
    pub server_top5: Option<f64>,
    pub server_f1: Option<f64>,
    pub client_top1: Option<f64>,
    pub client_top5: Option<f64>,
    pub client_f1: Option<f64>,
    pub ru_running: f64,
    pub tau_max: usize,
    pub n_star_running: Option<usize>,
    pub keep_ratio_mean: f64,
}

impl MetricsRow {
    pub const COLUMNS: [&'static str; 12] = [
        "round",
        "sim_time",
        "server_top1",
        "server_top5",
        "server_f1",
        "client_top1",
        "client_top5",
        "client_f1",
        "ru_running",
        "tau_max",
        "n_star_running",
        "keep_ratio_mean",
    ];
}

/// Top-1/top-5/F1 of the full global model at its deepest exit.
pub fn evaluate_global(layout: &ModelLayout, params: &[f64], data: &Dataset) -> Result<Metrics> {
    let spec = &layout.spec;
    let depth = spec.depth;
    let window = DepthWindow::full(depth);
    let head = exit_params(layout, params, depth);
    let mut logits = Vec::with_capacity(data.len() * spec.classes);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk);
        let pass = trunk_forward(layout, params, &x, &window, None, &[depth], GradMode::INFERENCE)?;
        let out = exit_forward(spec, head, &pass.features[0], pass.batch)?;
        logits.extend_from_slice(out.data());
    }
    let all = crate::tensor::Tensor::from_rows(data.len(), spec.classes, logits)?;
    metrics::evaluate(&all, &data.labels)
}

/// Clients, budgets and the running metric rows of one experiment.
#[derive(Debug, Clone)]
pub struct Cos2pWorker {
    pub layout: ModelLayout,
    pub clients: Vec<ClientState>,
    pub train: TrainConfig,
    pub server_test: Dataset,
    pub eval_every: usize,
    pub rounds: usize,
    pub rows: Vec<MetricsRow>,
    budgets: Vec<f64>,
    pending: Vec<Option<Metrics>>,
    latest: Vec<Option<Metrics>>,
    ru_sum: f64,
    tau_seen: usize,
    n_star: Option<usize>,
    last_server: Option<Metrics>,
}

impl Cos2pWorker {
    pub fn new(
        layout: ModelLayout,
        clients: Vec<ClientState>,
        train: TrainConfig,
        server_test: Dataset,
        eval_every: usize,
        rounds: usize,
    ) -> Self {
        let mut budgets: Vec<f64> = clients.iter().map(|c| c.r_depth).collect();
        budgets.sort_by(f64::total_cmp);
        budgets.dedup();
        let n = clients.len();
        Cos2pWorker {
            layout,
            clients,
            train,
            server_test,
            eval_every: eval_every.max(1),
            rounds,
            rows: Vec::new(),
            budgets,
            pending: vec![None; n],
            latest: vec![None; n],
            ru_sum: 0.0,
            tau_seen: 0,
            n_star: None,
            last_server: None,
        }
    }

    /// Distinct depth budgets `R_d` across clients.
    pub fn budgets(&self) -> &[f64] {
        &self.budgets
    }

    /// Latest server metrics, if any evaluation ran.
    pub fn server_metrics(&self) -> Option<Metrics> {
        self.last_server
    }

    /// Test-size weighted mean of each client's latest aggregated report.
    pub fn client_metrics(&self) -> Option<Metrics> {
        let items: Vec<(Metrics, usize)> = self
            .latest
            .iter()
            .zip(&self.clients)
            .filter_map(|(m, c)| m.map(|m| (m, c.test.len())))
            .collect();
        metrics::client_average(&items).ok()
    }

    pub fn keep_ratio_mean(&self) -> f64 {
        let policy = self.train.freeze_policy;
        let sum: f64 = self.clients.iter().map(|c| c.keep_ratio(&self.layout, policy)).sum();
        sum / self.clients.len().max(1) as f64
    }
}

impl Worker for Cos2pWorker {
    fn clients(&self) -> usize {
        self.clients.len()
    }

    fn train(&mut self, client: usize, round: usize, global: &[f64]) -> Result<Job> {
        let c = &mut self.clients[client];
        let out = c.train_round(&self.layout, global, round, &self.budgets, &self.train)?;
        self.pending[client] = Some(out.metrics);
        let epochs = if out.mask_phase {
            self.train.epochs + self.train.epochs_hat
        } else {
            self.train.epochs
        };
        Ok(Job {
            update: out.update,
            epochs,
            samples: c.train.len(),
            r_n: c.r_width * c.r_depth,
        })
    }

    fn after_round(&mut self, record: &RoundRecord, global: &[f64]) -> Result<()> {
        for a in &record.admitted {
            if let Some(m) = self.pending[a.client].take() {
                self.latest[a.client] = Some(m);
            }
        }
        self.ru_sum += record.utilization;
        self.tau_seen = record.admitted.iter().map(|a| a.tau).fold(self.tau_seen, usize::max);
        if record.min_participants > 0 {
            self.n_star = Some(self.n_star.map_or(record.min_participants, |n| n.min(record.min_participants)));
        }

        let q = record.round + 1;
        let evaluated = if q % self.eval_every == 0 || q == self.rounds {
            let m = evaluate_global(&self.layout, global, &self.server_test)?;
            self.last_server = Some(m);
            Some(m)
        } else {
            None
        };
        let client = self.client_metrics();
        self.rows.push(MetricsRow {
            round: record.round,
            sim_time: record.closed_at,
            server_top1: evaluated.map(|m| m.top1),
            server_top5: evaluated.map(|m| m.top5),
            server_f1: evaluated.map(|m| m.f1),
            client_top1: client.map(|m| m.top1),
            client_top5: client.map(|m| m.top5),
            client_f1: client.map(|m| m.f1),
            ru_running: self.ru_sum / q as f64,
            tau_max: self.tau_seen,
            n_star_running: self.n_star,
            keep_ratio_mean: self.keep_ratio_mean(),
        });
        Ok(())
    }
}
