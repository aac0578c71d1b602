//! Semi-asynchronous collection, segment importance scores and weighted
//! segment aggregation, plus the bounded history of global versions.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::layout::SegmentTable;
use crate::submodel::Staging;
use crate::{Error, Result};

/// `γ = ‖Δ‖₁ / (‖w_q − w_base‖₁ + size)`, summed sequentially.
pub fn segment_score(delta: &[f64], current: &[f64], base: &[f64]) -> Result<f64> {
    if delta.len() != current.len() || base.len() != current.len() {
        return Err(Error::shape("segment versions differ in length"));
    }
    let mut num = 0.0;
    for d in delta {
        num += libm::fabs(*d);
    }
    let mut drift = 0.0;
    for (a, b) in current.iter().zip(base) {
        drift += libm::fabs(a - b);
    }
    let g = num / (drift + current.len() as f64);
    if !g.is_finite() {
        return Err(Error::NonFinite("segment score"));
    }
    Ok(g)
}

/// How contributions to one segment are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `γ_n / Σ γ`, uniform when every `γ` is zero.
    Importance,
    Uniform,
}

/// Normalised weights of a set of scores.
pub fn normalized_weights(gammas: &[f64], weighting: Weighting) -> Vec<f64> {
    let n = gammas.len() as f64;
    let sum: f64 = gammas.iter().sum();
    if weighting == Weighting::Uniform || sum == 0.0 {
        return vec![1.0 / n; gammas.len()];
    }
    gammas.iter().map(|g| g / sum).collect()
}

/// `w^i ← w^i − η·Σ_n γ̃_n^i·Δ_n^i` for every staged segment. Returns the
/// number of participants per segment.
pub fn aggregate(
    global: &mut [f64],
    table: &SegmentTable,
    staging: &Staging,
    eta: f64,
    weighting: Weighting,
) -> Result<Vec<usize>> {
    if global.len() != table.total || staging.segments.len() != table.len() {
        return Err(Error::shape("staging does not match the segment table"));
    }
    let mut participants = vec![0; table.len()];
    for (seg, count) in participants.iter_mut().enumerate() {
        let contribs = staging.sorted(seg);
        if contribs.is_empty() {
            continue;
        }
        if contribs.iter().any(|c| !(c.gamma >= 0.0 && c.gamma.is_finite())) {
            return Err(Error::invalid("gamma", "scores must be finite and non-negative"));
        }
        *count = contribs.len();
        let gammas: Vec<f64> = contribs.iter().map(|c| c.gamma).collect();
        let weights = normalized_weights(&gammas, weighting);
        let r = table.segments[seg].range();
        let mut step = vec![0.0; r.len()];
        for (c, w) in contribs.iter().zip(&weights) {
            crate::tensor::axpy(*w, &c.delta, &mut step);
        }
        for (p, s) in global[r].iter_mut().zip(&step) {
            *p -= eta * s;
        }
    }
    if !global.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("aggregated parameters"));
    }
    Ok(participants)
}

/// Global versions `w_{q−τ_max} … w_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLedger {
    tau_max: usize,
    snapshots: VecDeque<(usize, Vec<f64>)>,
}

impl RoundLedger {
    pub fn new(tau_max: usize, initial: Vec<f64>) -> Self {
        let mut snapshots = VecDeque::with_capacity(tau_max + 1);
        snapshots.push_back((0, initial));
        RoundLedger { tau_max, snapshots }
    }

    pub fn round(&self) -> usize {
        self.snapshots.back().map_or(0, |s| s.0)
    }

    pub fn oldest_retained(&self) -> usize {
        self.snapshots.front().map_or(0, |s| s.0)
    }

    pub fn current(&self) -> &[f64] {
        &self.snapshots.back().expect("ledger always holds a version").1
    }

    /// Exactly version `round`, or an error when it is evicted or not yet
    /// produced.
    pub fn snapshot(&self, round: usize) -> Result<&[f64]> {
        let oldest = self.oldest_retained();
        if round < oldest {
            return Err(Error::VersionEvicted {
                requested: round,
                oldest,
            });
        }
        self.snapshots
            .get(round - oldest)
            .map(|s| s.1.as_slice())
            .ok_or_else(|| Error::invalid("round", "version not produced yet"))
    }

    /// Appends the next version, evicting anything older than `τ_max`
    /// rounds.
    pub fn push(&mut self, params: Vec<f64>) {
        let next = self.round() + 1;
        self.snapshots.push_back((next, params));
        while self.snapshots.len() > self.tau_max + 1 {
            self.snapshots.pop_front();
        }
    }
}

/// Outcome of offering one arrival to the collector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Offer {
    /// Admitted. `arm_timer` carries `T_timeout` when this arrival reached
    /// the quorum; `close` asks for immediate aggregation (admission cap).
    Admitted { arm_timer: Option<f64>, close: bool },
    /// Arrived after `T_timeout`; belongs to the next round.
    Late,
}

/// Admission state of one round: wait for `⌈μN⌉` arrivals, then accept
/// everything up to `T_timeout = t + T_clk`.
#[derive(Debug, Clone, PartialEq)]
pub struct Collector {
    need: usize,
    t_clk: f64,
    cap: Option<usize>,
    admitted: usize,
    deadline: Option<f64>,
}

impl Collector {
    pub fn new(clients: usize, mu: f64, t_clk: f64, cap: Option<usize>) -> Result<Self> {
        if !(mu > 0.0 && mu <= 1.0) {
            return Err(Error::invalid("federation.mu", "must lie in (0, 1]"));
        }
        if !(t_clk >= 0.0 && t_clk.is_finite()) {
            return Err(Error::invalid("federation.t_clk", "must be non-negative"));
        }
        if clients == 0 {
            return Err(Error::invalid("federation.clients", "need at least one client"));
        }
        if cap == Some(0) {
            return Err(Error::invalid("cap", "admission cap must be positive"));
        }
        Ok(Collector {
            need: quorum(clients, mu),
            t_clk,
            cap,
            admitted: 0,
            deadline: None,
        })
    }

    pub fn quorum(&self) -> usize {
        self.need
    }

    pub fn deadline(&self) -> Option<f64> {
        self.deadline
    }

    pub fn admitted(&self) -> usize {
        self.admitted
    }

    pub fn offer(&mut self, t: f64) -> Offer {
        if self.deadline.is_some_and(|d| t > d) {
            return Offer::Late;
        }
        self.admitted += 1;
        let mut arm_timer = None;
        if self.deadline.is_none() && self.admitted >= self.need {
            let d = t + self.t_clk;
            self.deadline = Some(d);
            arm_timer = Some(d);
        }
        let close = self.cap.is_some_and(|c| self.admitted >= c);
        Offer::Admitted { arm_timer, close }
    }

    pub fn reset(&mut self) {
        self.admitted = 0;
        self.deadline = None;
    }
}

/// `⌈μN⌉`, at least one.
pub fn quorum(clients: usize, mu: f64) -> usize {
    (libm::ceil(mu * clients as f64 - 1e-9) as usize).clamp(1, clients.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::submodel::Contribution;

    #[test]
    fn score_examples() {
        assert_eq!(segment_score(&[3.0, -1.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(segment_score(&[2.0, -2.0], &[5.0, 5.0], &[5.0, 5.0]).unwrap(), 2.0);
        assert_eq!(segment_score(&[0.0, 0.0], &[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    fn one_segment(contribs: Vec<(f64, f64)>) -> f64 {
        let table = SegmentTable::uniform("w", 1, 1);
        let mut st = Staging::new(1);
        for (i, (gamma, d)) in contribs.into_iter().enumerate() {
            st.segments[0].push(Contribution {
                client: i,
                base_round: 0,
                gamma,
                delta: vec![d],
            });
        }
        let mut w = vec![1.0];
        aggregate(&mut w, &table, &st, 0.1, Weighting::Importance).unwrap();
        w[0]
    }

    #[test]
    fn aggregate_examples() {
        assert!((one_segment(vec![(1.0, 2.0), (3.0, -2.0)]) - 1.1).abs() < 1e-15);
        assert!((one_segment(vec![(7.5, 2.0)]) - 0.8).abs() < 1e-15);
        assert!((one_segment(vec![(0.0, 2.0), (0.0, 4.0)]) - 0.7).abs() < 1e-15);
        assert_eq!(one_segment(vec![]), 1.0);
    }

    #[test]
    fn weights_sum_to_one() {
        for g in [vec![0.1, 0.2, 0.7], vec![0.0, 0.0], vec![3.0]] {
            let s: f64 = normalized_weights(&g, Weighting::Importance).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn ledger_evicts_and_never_returns_newer() {
        let mut l = RoundLedger::new(2, vec![0.0]);
        for q in 1..=5 {
            l.push(vec![q as f64]);
        }
        assert_eq!(l.round(), 5);
        assert_eq!(l.oldest_retained(), 3);
        assert_eq!(l.snapshot(4).unwrap(), &[4.0]);
        assert!(matches!(l.snapshot(2), Err(Error::VersionEvicted { requested: 2, oldest: 3 })));
        assert!(l.snapshot(6).is_err());
    }

    #[test]
    fn collector_example() {
        let mut c = Collector::new(4, 0.5, 5.0, None).unwrap();
        let mut admitted = Vec::new();
        for t in [1.0, 2.0, 9.0, 20.0] {
            if let Offer::Admitted { .. } = c.offer(t) {
                admitted.push(t);
            }
        }
        assert_eq!(admitted, vec![1.0, 2.0]);
        assert_eq!(c.deadline(), Some(7.0));
    }

    #[test]
    fn collector_cap_closes_immediately() {
        let mut c = Collector::new(4, 0.25, 0.0, Some(1)).unwrap();
        assert_eq!(c.offer(3.0), Offer::Admitted { arm_timer: Some(3.0), close: true });
        assert!(Collector::new(4, 1.5, 0.0, None).is_err());
        assert_eq!(quorum(4, 1.0), 4);
        assert_eq!(quorum(8, 0.5), 4);
        assert_eq!(quorum(3, 1e-9), 1);
    }
}
