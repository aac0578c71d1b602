use cos2p_core::client::{make_update, ClientUpdate};
use cos2p_core::convex::{self, ConvexWorker};
use cos2p_core::layout::SegmentTable;
use cos2p_core::rng::seeded;
use cos2p_core::server::Weighting;
use cos2p_core::sim::{self, EventKind, Job, SimConfig, Timing, Worker};
use cos2p_core::submodel::CoverageMask;

/// Every job takes exactly `speed` seconds and pushes the weights by one.
struct Fixed {
    table: SegmentTable,
    clients: usize,
}

impl Worker for Fixed {
    fn clients(&self) -> usize {
        self.clients
    }

    fn train(&mut self, client: usize, round: usize, global: &[f64]) -> cos2p_core::Result<Job> {
        let end: Vec<f64> = global.iter().map(|w| w - 1.0).collect();
        let cov = CoverageMask::from_bits(vec![true; self.table.len()]);
        let update: ClientUpdate = make_update(&self.table, client, round, &cov, global, &end, 1.0)?;
        Ok(Job {
            update,
            epochs: 1,
            samples: 1,
            r_n: 1.0,
        })
    }
}

fn config(mu: f64, t_clk: f64, rounds: usize, speeds: &[f64]) -> SimConfig {
    SimConfig {
        mu,
        t_clk,
        rounds,
        tau_max: 4,
        eta: 0.1,
        weighting: Weighting::Importance,
        max_admit: None,
        jitter_sigma: 0.0,
        timing: speeds
            .iter()
            .map(|&speed| Timing {
                speed,
                comm_latency: 0.0,
            })
            .collect(),
        seed: 1,
    }
}

#[test]
fn quorum_then_clock_admits_the_early_pair() {
    let mut w = Fixed {
        table: SegmentTable::uniform("w", 2, 1),
        clients: 4,
    };
    let cfg = config(0.5, 5.0, 1, &[1.0, 2.0, 9.0, 20.0]);
    let res = sim::run(&cfg, &w.table.clone(), vec![0.0, 0.0], &mut w).unwrap();
    let rec = &res.rounds[0];
    let ids: Vec<usize> = rec.admitted.iter().map(|a| a.client).collect();
    assert_eq!(ids, vec![0, 1]);
    assert_eq!(rec.closed_at, 7.0);
    let timer = res.events.iter().find(|e| e.kind == EventKind::Timer).unwrap();
    assert_eq!(timer.t, 7.0);
}

#[test]
fn repeated_seeded_runs_agree_bit_for_bit() {
    let run = || {
        let (parts, _) = convex::generate(4, 4, 10, 0.1, &mut seeded(3)).unwrap();
        let mut w = ConvexWorker::new(parts, 2, 0.05, 1).unwrap();
        let mut cfg = config(0.5, 0.3, 40, &[0.01, 0.03, 0.05, 0.2]);
        cfg.jitter_sigma = 0.1;
        let table = w.table.clone();
        sim::run(&cfg, &table, vec![0.0; 4], &mut w).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.events, b.events);
    assert_eq!(a.global.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.global.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn utilization_orders_sync_semi_async_and_async() {
    let speeds = [0.01, 0.02, 0.05, 0.1, 0.2, 0.4];
    let ru = |mu: f64, t_clk: f64, cap: Option<usize>| {
        let (parts, _) = convex::generate(6, 4, 20, 0.1, &mut seeded(9)).unwrap();
        let mut w = ConvexWorker::new(parts, 2, 0.05, 2).unwrap();
        let mut cfg = config(mu, t_clk, 60, &speeds);
        cfg.jitter_sigma = 0.1;
        cfg.max_admit = cap;
        let table = w.table.clone();
        sim::run(&cfg, &table, vec![0.0; 4], &mut w)
            .unwrap()
            .resource_utilization()
            .unwrap()
    };
    let sync = ru(1.0, 0.0, None);
    let semi = ru(0.5, 0.1, None);
    let full = ru(1.0 / 6.0, 0.0, Some(1));
    assert!(sync > 0.0 && sync <= semi, "{} {}", sync, semi);
    assert!(semi <= full, "{} {}", semi, full);
    assert_eq!(full, 1.0);
}
