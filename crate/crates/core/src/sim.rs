//! Deterministic discrete-event driver for semi-asynchronous rounds.
//!
//! Clients are dispatched with a round tag, train against that snapshot,
//! and report after a simulated duration. The server admits arrivals until
//! the quorum plus grace window closes the round, aggregates, and
//! redispatches the admitted clients against the new version.

use alloc::collections::BinaryHeap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::client::ClientUpdate;
use crate::digest;
use crate::layout::SegmentTable;
use crate::rng::{self, SimRng, Stream};
use crate::server::{aggregate, segment_score, Collector, Offer, RoundLedger, Weighting};
use crate::submodel::{merge_delta, Staging};
use crate::{Error, Result};

/// Timing model of one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Seconds per sample-epoch on the full model.
    pub speed: f64,
    /// Seconds per dispatch or upload.
    pub comm_latency: f64,
}

/// `2·comm + speed·|D|·E·R_n·jitter`.
pub fn client_time(timing: &Timing, r_n: f64, epochs: usize, samples: usize, jitter: f64) -> f64 {
    2.0 * timing.comm_latency + timing.speed * samples as f64 * epochs as f64 * r_n * jitter
}

/// Log-normal multiplicative noise `exp(σ·z)`; exactly 1 without a draw
/// when `σ = 0`.
pub fn jitter_draw<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    libm::exp(sigma * z)
}

/// `Σ Time / (N_q · max Time)` of one round.
pub fn round_utilization(times: &[f64]) -> Result<f64> {
    if times.is_empty() {
        return Err(Error::EmptyData("round without participants"));
    }
    let max = times.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Ok(1.0);
    }
    Ok(times.iter().sum::<f64>() / (times.len() as f64 * max))
}

/// Mean of the per-round utilization.
pub fn resource_utilization(rounds: &[Vec<f64>]) -> Result<f64> {
    if rounds.is_empty() {
        return Err(Error::EmptyData("no completed round"));
    }
    let mut s = 0.0;
    for r in rounds {
        s += round_utilization(r)?;
    }
    Ok(s / rounds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Dispatch,
    UpdateArrival,
    Timer,
    Aggregate,
    StaleDrop,
    End,
}

/// One line of the event log. `round` is the dispatch tag for dispatches,
/// the base tag for arrivals and drops, and the closed round otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t: f64,
    pub kind: EventKind,
    pub client: Option<usize>,
    pub round: usize,
    pub digest: u64,
}

/// Work reported by a worker for one dispatched job.
#[derive(Debug, Clone)]
pub struct Job {
    pub update: ClientUpdate,
    pub epochs: usize,
    pub samples: usize,
    pub r_n: f64,
}

/// The client side as seen by the simulator.
pub trait Worker {
    fn clients(&self) -> usize;

    /// Trains `client` against `global`, the version tagged `round`.
    fn train(&mut self, client: usize, round: usize, global: &[f64]) -> Result<Job>;

    /// Called after every aggregation with the new global version.
    fn after_round(&mut self, _record: &RoundRecord, _global: &[f64]) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mu: f64,
    pub t_clk: f64,
    pub rounds: usize,
    pub tau_max: usize,
    /// Server learning rate applied to the aggregated gradients.
    pub eta: f64,
    pub weighting: Weighting,
    /// Upper bound on admissions per round; a round closes as soon as it
    /// is reached.
    pub max_admit: Option<usize>,
    pub jitter_sigma: f64,
    pub timing: Vec<Timing>,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self, clients: usize) -> Result<()> {
        if self.timing.len() != clients {
            return Err(Error::invalid("clients", "one timing profile per client is required"));
        }
        for t in &self.timing {
            if !(t.speed > 0.0 && t.speed.is_finite()) {
                return Err(Error::invalid("clients.speed", "must be positive"));
            }
            if !(t.comm_latency >= 0.0 && t.comm_latency.is_finite()) {
                return Err(Error::invalid("clients.comm_latency", "must be non-negative"));
            }
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("federation.eta_server", "must be positive"));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::invalid("federation.jitter_sigma", "must be non-negative"));
        }
        Collector::new(clients, self.mu, self.t_clk, self.max_admit)?;
        Ok(())
    }
}

/// One admitted update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Admission {
    pub client: usize,
    pub base_round: usize,
    pub tau: usize,
    pub dispatched: f64,
    pub arrival: f64,
}

impl Admission {
    /// Training plus communication time of the job.
    pub fn time(&self) -> f64 {
        self.arrival - self.dispatched
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub closed_at: f64,
    pub admitted: Vec<Admission>,
    /// Smallest non-zero participant count over segments.
    pub min_participants: usize,
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub global: Vec<f64>,
    pub events: Vec<SimEvent>,
    pub rounds: Vec<RoundRecord>,
    pub stale_drops: usize,
}

impl SimResult {
    pub fn resource_utilization(&self) -> Option<f64> {
        let times: Vec<Vec<f64>> = self
            .rounds
            .iter()
            .map(|r| r.admitted.iter().map(Admission::time).collect())
            .collect();
        resource_utilization(&times).ok()
    }

    /// `N*`: the participation floor over rounds and trained segments.
    pub fn n_star(&self) -> Option<usize> {
        self.rounds.iter().map(|r| r.min_participants).filter(|m| *m > 0).min()
    }

    pub fn max_tau(&self) -> usize {
        self.rounds
            .iter()
            .flat_map(|r| r.admitted.iter().map(|a| a.tau))
            .max()
            .unwrap_or(0)
    }

    pub fn end_time(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pending {
    Arrival(usize),
    Timer(usize),
}

#[derive(Debug, Clone, Copy)]
struct Queued {
    t: f64,
    seq: u64,
    what: Pending,
}

impl Queued {
    // arrivals at the deadline instant are admitted before the timer fires
    fn rank(&self) -> u8 {
        match self.what {
            Pending::Arrival(_) => 0,
            Pending::Timer(_) => 1,
        }
    }
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // reversed so the max-heap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .t
            .total_cmp(&self.t)
            .then(other.rank().cmp(&self.rank()))
            .then(other.seq.cmp(&self.seq))
    }
}

struct InFlight {
    job: Job,
    round: usize,
    dispatched: f64,
}

struct Engine<'a, W: Worker> {
    cfg: &'a SimConfig,
    worker: &'a mut W,
    queue: BinaryHeap<Queued>,
    seq: u64,
    events: Vec<SimEvent>,
    inflight: Vec<Option<InFlight>>,
    jitter: Vec<SimRng>,
    ledger: RoundLedger,
    digests: Vec<u64>,
}

impl<W: Worker> Engine<'_, W> {
    fn push(&mut self, t: f64, what: Pending) {
        self.queue.push(Queued { t, seq: self.seq, what });
        self.seq += 1;
    }

    fn log(&mut self, t: f64, kind: EventKind, client: Option<usize>, round: usize, digest: u64) {
        self.events.push(SimEvent {
            t,
            kind,
            client,
            round,
            digest,
        });
    }

    fn dispatch(&mut self, client: usize, t: f64) -> Result<()> {
        let round = self.ledger.round();
        let job = self.worker.train(client, round, self.ledger.current())?;
        if job.update.client != client || job.update.base_round != round {
            return Err(Error::invalid("job", "worker returned an update for another dispatch"));
        }
        let jitter = jitter_draw(self.cfg.jitter_sigma, &mut self.jitter[client]);
        let dur = client_time(&self.cfg.timing[client], job.r_n, job.epochs, job.samples, jitter);
        let digest = self.digests[round];
        self.log(t, EventKind::Dispatch, Some(client), round, digest);
        self.inflight[client] = Some(InFlight {
            job,
            round,
            dispatched: t,
        });
        self.push(t + dur, Pending::Arrival(client));
        Ok(())
    }
}

/// Runs `cfg.rounds` aggregations starting from `initial`.
pub fn run<W: Worker>(cfg: &SimConfig, table: &SegmentTable, initial: Vec<f64>, worker: &mut W) -> Result<SimResult> {
    let n = worker.clients();
    cfg.validate(n)?;
    if initial.len() != table.total {
        return Err(Error::shape("initial parameters do not match the segment table"));
    }
    let mut collector = Collector::new(n, cfg.mu, cfg.t_clk, cfg.max_admit)?;
    let d0 = digest::of_floats(&initial);
    let mut eng = Engine {
        cfg,
        worker,
        queue: BinaryHeap::new(),
        seq: 0,
        events: Vec::new(),
        inflight: (0..n).map(|_| None).collect(),
        jitter: (0..n).map(|c| rng::stream(cfg.seed, Stream::Jitter, c as u64)).collect(),
        ledger: RoundLedger::new(cfg.tau_max, initial),
        digests: vec![d0],
    };
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut stale_drops = 0;

    if cfg.rounds == 0 {
        eng.log(0.0, EventKind::End, None, 0, d0);
        return Ok(SimResult {
            global: eng.ledger.current().to_vec(),
            events: eng.events,
            rounds,
            stale_drops,
        });
    }

    for c in 0..n {
        eng.dispatch(c, 0.0)?;
    }
    let mut staging = Staging::new(table.len());
    let mut admitted: Vec<Admission> = Vec::new();

    loop {
        let Some(ev) = eng.queue.pop() else {
            return Err(Error::Deadlock(format!(
                "event queue empty in round {} with {} admitted",
                eng.ledger.round(),
                admitted.len()
            )));
        };
        let q = eng.ledger.round();
        let t = ev.t;
        let close = match ev.what {
            Pending::Arrival(c) => {
                let fl = eng.inflight[c]
                    .take()
                    .ok_or_else(|| Error::Deadlock(format!("arrival from idle client {}", c)))?;
                let mut update = fl.job.update;
                let tau = q - fl.round;
                eng.log(t, EventKind::UpdateArrival, Some(c), fl.round, update.digest());
                if tau > cfg.tau_max || fl.round < eng.ledger.oldest_retained() {
                    eng.log(t, EventKind::StaleDrop, Some(c), fl.round, 0);
                    stale_drops += 1;
                    eng.dispatch(c, t)?;
                    continue;
                }
                match collector.offer(t) {
                    Offer::Late => {
                        return Err(Error::Deadlock(format!("arrival at {} after the round deadline", t)));
                    }
                    Offer::Admitted { arm_timer, close } => {
                        update.tau = tau;
                        let current = eng.ledger.current();
                        let base = eng.ledger.snapshot(fl.round)?;
                        let mut gammas = Vec::with_capacity(update.deltas.len());
                        for d in &update.deltas {
                            let r = table.segment(d.segment)?.range();
                            gammas.push(segment_score(&d.values, &current[r.clone()], &base[r])?);
                        }
                        merge_delta(&mut staging, table, &update, &gammas, eng.ledger.oldest_retained())?;
                        admitted.push(Admission {
                            client: c,
                            base_round: fl.round,
                            tau,
                            dispatched: fl.dispatched,
                            arrival: t,
                        });
                        if let Some(d) = arm_timer {
                            if !close {
                                eng.push(d, Pending::Timer(q));
                            }
                        }
                        close
                    }
                }
            }
            Pending::Timer(r) => {
                if r != q {
                    continue;
                }
                eng.log(t, EventKind::Timer, None, q, 0);
                true
            }
        };
        if !close {
            continue;
        }

        let mut global = eng.ledger.current().to_vec();
        let participants = aggregate(&mut global, table, &staging, cfg.eta, cfg.weighting)?;
        let dg = digest::of_floats(&global);
        eng.ledger.push(global);
        eng.digests.push(dg);
        eng.log(t, EventKind::Aggregate, None, q, dg);
        let times: Vec<f64> = admitted.iter().map(Admission::time).collect();
        let record = RoundRecord {
            round: q,
            closed_at: t,
            min_participants: participants.iter().copied().filter(|p| *p > 0).min().unwrap_or(0),
            utilization: round_utilization(&times)?,
            admitted: core::mem::take(&mut admitted),
        };
        eng.worker.after_round(&record, eng.ledger.current())?;
        staging = Staging::new(table.len());
        collector.reset();
        let next: Vec<usize> = record.admitted.iter().map(|a| a.client).collect();
        rounds.push(record);
        if rounds.len() == cfg.rounds {
            eng.log(t, EventKind::End, None, q + 1, dg);
            break;
        }
        for c in next {
            eng.dispatch(c, t)?;
        }
    }
    Ok(SimResult {
        global: eng.ledger.current().to_vec(),
        events: eng.events,
        rounds,
        stale_drops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::SegmentDelta;
    use crate::submodel::CoverageMask;

    #[test]
    fn client_time_examples() {
        let t = Timing {
            speed: 0.001,
            comm_latency: 1.0,
        };
        assert!((client_time(&t, 0.25, 5, 1000, 1.0) - 3.25).abs() < 1e-12);
        let full = client_time(&t, 0.5, 5, 1000, 1.0) - 2.0;
        let half = client_time(&t, 0.25, 5, 1000, 1.0) - 2.0;
        assert!((full - 2.0 * half).abs() < 1e-12);
        assert_eq!(jitter_draw(0.0, &mut rng::seeded(0)), 1.0);
    }

    #[test]
    fn utilization_examples() {
        assert_eq!(round_utilization(&[5.0, 10.0]).unwrap(), 0.75);
        assert_eq!(round_utilization(&[3.0, 3.0, 3.0]).unwrap(), 1.0);
        assert!(resource_utilization(&[]).is_err());
        assert!(round_utilization(&[]).is_err());
    }

    /// Each client reports a constant gradient on one segment.
    struct Constant {
        n: usize,
        samples: Vec<usize>,
    }

    impl Worker for Constant {
        fn clients(&self) -> usize {
            self.n
        }

        fn train(&mut self, client: usize, round: usize, _global: &[f64]) -> Result<Job> {
            let mut cov = CoverageMask::empty(self.n);
            cov.set(client, true);
            Ok(Job {
                update: ClientUpdate {
                    client,
                    base_round: round,
                    tau: 0,
                    coverage: cov,
                    deltas: vec![SegmentDelta {
                        segment: client,
                        values: vec![1.0],
                    }],
                },
                epochs: 1,
                samples: self.samples[client],
                r_n: 1.0,
            })
        }
    }

    fn cfg(n: usize, mu: f64, t_clk: f64, cap: Option<usize>, rounds: usize) -> SimConfig {
        SimConfig {
            mu,
            t_clk,
            rounds,
            tau_max: 10,
            eta: 0.1,
            weighting: Weighting::Importance,
            max_admit: cap,
            jitter_sigma: 0.0,
            timing: vec![
                Timing {
                    speed: 1.0,
                    comm_latency: 0.0
                };
                n
            ],
            seed: 1,
        }
    }

    #[test]
    fn zero_rounds_returns_initial() {
        let mut w = Constant { n: 2, samples: vec![1, 2] };
        let r = run(&cfg(2, 1.0, 0.0, None, 0), &SegmentTable::uniform("w", 2, 1), vec![0.5, 0.5], &mut w).unwrap();
        assert_eq!(r.global, vec![0.5, 0.5]);
        assert_eq!(r.events.len(), 1);
        assert_eq!(r.events[0].kind, EventKind::End);
    }

    #[test]
    fn synchronous_barrier_waits_for_slowest() {
        let mut w = Constant {
            n: 3,
            samples: vec![1, 2, 4],
        };
        let r = run(&cfg(3, 1.0, 0.0, None, 3), &SegmentTable::uniform("w", 3, 1), vec![0.0; 3], &mut w).unwrap();
        for (i, rec) in r.rounds.iter().enumerate() {
            assert_eq!(rec.admitted.len(), 3);
            assert_eq!(rec.closed_at, 4.0 * (i + 1) as f64);
        }
        assert!((r.global[0] + 0.3).abs() < 1e-12);
        assert_eq!(r.max_tau(), 0);
    }

    #[test]
    fn async_cap_gives_full_utilization() {
        let mut w = Constant {
            n: 4,
            samples: vec![1, 1, 3, 7],
        };
        let r = run(&cfg(4, 0.25, 0.0, Some(1), 30), &SegmentTable::uniform("w", 4, 1), vec![0.0; 4], &mut w).unwrap();
        assert!(r.rounds.iter().all(|x| x.admitted.len() == 1));
        assert_eq!(r.resource_utilization(), Some(1.0));
    }

    #[test]
    fn arrivals_never_precede_dispatch() {
        let mut w = Constant {
            n: 4,
            samples: vec![1, 2, 5, 9],
        };
        let r = run(&cfg(4, 0.5, 1.0, None, 20), &SegmentTable::uniform("w", 4, 1), vec![0.0; 4], &mut w).unwrap();
        let mut last_dispatch = vec![f64::NAN; 4];
        for e in &r.events {
            match e.kind {
                EventKind::Dispatch => last_dispatch[e.client.unwrap()] = e.t,
                EventKind::UpdateArrival => assert!(e.t >= last_dispatch[e.client.unwrap()]),
                _ => {}
            }
        }
        assert!(r.events.windows(2).all(|p| p[0].t <= p[1].t));
    }
}
