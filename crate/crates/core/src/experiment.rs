//! End-to-end orchestration: data, partition, clients, simulation, summary.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::client::{ClientState, MaskMode};
use crate::config::{ExperimentConfig, Mode};
use crate::data::{self, Dataset};
use crate::federation::{Cos2pWorker, MetricsRow};
use crate::layout::ModelLayout;
use crate::model::BlockGates;
use crate::metrics::Metrics;
use crate::rng::{self, Stream};
use crate::server::Weighting;
use crate::sim::{self, RoundRecord, SimConfig, SimEvent, Timing};
use crate::{Error, Result};

/// Generated data: the pool split into client shards, plus the server test
/// set drawn from the same class centers.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedData {
    pub pool: Dataset,
    pub shards: Vec<Vec<usize>>,
    pub server_test: Dataset,
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<FederatedData> {
    let d = &cfg.data;
    let seed = d.seed;
    let mut data_rng = rng::stream(seed, Stream::Data, 0);
    let centers = data::cluster_centers(d.classes, d.dim, &mut data_rng);
    let pool = data::sample_clusters(&centers, d.n, d.separation, &mut data_rng)?;
    let mut test_rng = rng::stream(seed, Stream::ServerTest, 0);
    let server_test = data::sample_clusters(&centers, d.test_per_class, d.separation, &mut test_rng)?;
    let mut part_rng = rng::stream(seed, Stream::Partition, 0);
    let shards = data::dirichlet_partition(&pool.labels, cfg.federation.clients, d.alpha, &mut part_rng)?;
    Ok(FederatedData {
        pool,
        shards,
        server_test,
    })
}

/// Simulator settings implied by the experiment mode.
pub fn sim_config(cfg: &ExperimentConfig) -> SimConfig {
    let f = &cfg.federation;
    let timing = cfg
        .client_profiles()
        .iter()
        .map(|c| Timing {
            speed: c.speed,
            comm_latency: c.comm_latency,
        })
        .collect();
    let (mu, t_clk, weighting, max_admit) = match f.mode {
        Mode::Cos2p | Mode::RandomMask => (f.mu, f.t_clk, Weighting::Importance, None),
        Mode::SyncFedavg => (1.0, 0.0, Weighting::Uniform, None),
        Mode::FullAsync => (1.0 / f.clients as f64, 0.0, Weighting::Importance, Some(1)),
    };
    SimConfig {
        mu,
        t_clk,
        rounds: f.rounds,
        tau_max: f.tau_max,
        eta: cfg.server_eta(),
        weighting,
        max_admit,
        jitter_sigma: f.jitter_sigma,
        timing,
        seed: cfg.data.seed,
    }
}

/// Local 8:2 train/test indices of client `n`, keeping only
/// `⌈fraction·|shard|⌉` samples of its shard.
pub fn client_split(seed: u64, n: usize, shard: &[usize], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let keep = (libm::ceil(fraction * shard.len() as f64 - 1e-9) as usize).clamp(1, shard.len().max(1));
    let mut split_rng = rng::stream(seed, Stream::Split, n as u64);
    let (mut train, mut test) = data::train_test_split(shard, &mut split_rng);
    if keep < shard.len() {
        let n_test = (test.len() * keep / shard.len()).max(usize::from(keep >= 2));
        test.truncate(n_test);
        train.truncate(keep - n_test);
    }
    (train, test)
}

/// Builds every client's private state from its shard.
pub fn build_clients(
    cfg: &ExperimentConfig,
    layout: &ModelLayout,
    initial: &[f64],
    fed: &FederatedData,
) -> Result<Vec<ClientState>> {
    let seed = cfg.data.seed;
    let mode = if cfg.federation.mode == Mode::RandomMask {
        MaskMode::Random
    } else {
        MaskMode::Learned
    };
    let mut out = Vec::with_capacity(fed.shards.len());
    for (n, (shard, prof)) in fed.shards.iter().zip(cfg.client_profiles()).enumerate() {
        let (train, test) = client_split(seed, n, shard, prof.dataset_fraction);
        let mut mask_rng = rng::stream(seed, Stream::RandomMask, n as u64);
        out.push(ClientState::new(
            n,
            layout,
            initial,
            prof.r_width,
            prof.r_depth,
            fed.pool.subset(&train),
            fed.pool.subset(&test),
            &cfg.train,
            mode,
            rng::stream(seed, Stream::Client, n as u64),
            Some(&mut mask_rng),
        )?);
    }
    Ok(out)
}

/// Headline numbers of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub seed: u64,
    pub rounds: usize,
    pub sim_time: f64,
    pub server: Metrics,
    pub client: Metrics,
    pub resource_utilization: f64,
    pub n_star: Option<usize>,
    pub max_tau: usize,
    pub stale_drops: usize,
    pub keep_ratio_mean: f64,
    pub final_digest: String,
    pub records: Vec<RoundRecord>,
}

/// Final hard masks of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMasks {
    pub client: usize,
    pub r_width: f64,
    pub r_depth: f64,
    pub blocks: Vec<BlockGates>,
    /// Keep probabilities `P` per block, as `[attn, fc1, fc2]`.
    pub probs: Vec<[Vec<f64>; 3]>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub layout: ModelLayout,
    pub global: Vec<f64>,
    pub events: Vec<SimEvent>,
    pub rows: Vec<MetricsRow>,
    pub masks: Vec<ClientMasks>,
    pub summary: Summary,
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let layout = ModelLayout::new(cfg.model_spec()?)?;
    let fed = generate_data(cfg)?;
    let initial = crate::model::init_params(&layout, &mut rng::stream(cfg.data.seed, Stream::Init, 0));
    let clients = build_clients(cfg, &layout, &initial, &fed)?;
    let sim_cfg = sim_config(cfg);

    let mut worker = Cos2pWorker::new(
        layout,
        clients,
        cfg.train,
        fed.server_test,
        cfg.federation.eval_every,
        cfg.federation.rounds,
    );
    let table = worker.layout.table.clone();
    let res = sim::run(&sim_cfg, &table, initial, &mut worker)?;

    let policy = cfg.train.freeze_policy;
    let masks = worker
        .clients
        .iter()
        .map(|c| ClientMasks {
            client: c.id,
            r_width: c.r_width,
            r_depth: c.r_depth,
            blocks: (0..worker.layout.spec.depth).map(|b| c.hard_mask(b, policy)).collect(),
            probs: (0..worker.layout.spec.depth)
                .map(|b| core::array::from_fn(|li| c.masks.layer(b, li).prob().to_vec()))
                .collect(),
        })
        .collect();
    let server = match worker.server_metrics() {
        Some(m) => m,
        None => crate::federation::evaluate_global(&worker.layout, &res.global, &worker.server_test)?,
    };
    let summary = Summary {
        mode: cfg.federation.mode,
        seed: cfg.data.seed,
        rounds: res.rounds.len(),
        sim_time: res.end_time(),
        server,
        client: worker.client_metrics().unwrap_or_default(),
        resource_utilization: res.resource_utilization().unwrap_or(0.0),
        n_star: res.n_star(),
        max_tau: res.max_tau(),
        stale_drops: res.stale_drops,
        keep_ratio_mean: worker.keep_ratio_mean(),
        final_digest: alloc::format!("{:016x}", crate::digest::of_floats(&res.global)),
        records: res.rounds,
    };
    if !res.global.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("final parameters"));
    }
    Ok(ExperimentResult {
        layout: worker.layout,
        global: res.global,
        events: res.events,
        rows: worker.rows,
        masks,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ClientConfig;

    pub(crate) fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.model.depth = 4;
        c.model.hidden = 8;
        c.model.heads = 2;
        c.data.dim = 6;
        c.data.classes = 3;
        c.data.n = 12;
        c.data.test_per_class = 4;
        c.federation.clients = 3;
        c.federation.rounds = 4;
        c.federation.tau_max = 3;
        c.train.epochs = 1;
        c.train.epochs_hat = 1;
        c.train.q_hat = 2;
        c.train.batch = 8;
        c
    }

    #[test]
    fn tiny_run_is_deterministic() {
        let c = tiny();
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        assert_eq!(a.global, b.global);
        assert_eq!(a.events, b.events);
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.rows.len(), 4);
        assert!(a.summary.server.top1 >= 0.0);
    }

    #[test]
    fn modes_set_their_admission_rules() {
        let mut c = tiny();
        c.federation.mode = Mode::SyncFedavg;
        let s = sim_config(&c);
        assert_eq!((s.mu, s.t_clk, s.weighting), (1.0, 0.0, Weighting::Uniform));
        c.federation.mode = Mode::FullAsync;
        assert_eq!(sim_config(&c).max_admit, Some(1));
        let r = run(&c).unwrap();
        assert!(r.summary.records.iter().all(|x| x.admitted.len() == 1));
        assert!((r.summary.resource_utilization - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dataset_fraction_shrinks_shards() {
        let mut c = tiny();
        let mut profs = crate::config::default_clients(3);
        profs[1] = ClientConfig {
            dataset_fraction: 0.5,
            ..profs[1]
        };
        c.clients = profs;
        let layout = ModelLayout::new(c.model_spec().unwrap()).unwrap();
        let fed = generate_data(&c).unwrap();
        let init = crate::model::init_params(&layout, &mut rng::seeded(0));
        let cl = build_clients(&c, &layout, &init, &fed).unwrap();
        let full = fed.shards[1].len();
        let held = cl[1].train.len() + cl[1].test.len();
        assert_eq!(held, (full + 1) / 2);
    }
}
