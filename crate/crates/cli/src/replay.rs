//! Re-derives delays, admission sets and resource utilization from an event
//! log and diffs them against the recorded summary.

use cos2p_core::experiment::Summary;
use cos2p_core::sim::{EventKind, SimConfig, SimEvent};
use serde::Serialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayedAdmission {
    pub client: usize,
    pub base_round: usize,
    pub tau: usize,
    pub dispatched: f64,
    pub arrival: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub rounds: usize,
    pub admissions: usize,
    pub stale_drops: usize,
    pub max_tau: usize,
    pub resource_utilization: f64,
    pub diffs: Vec<String>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.diffs.is_empty()
    }
}

fn utilization(adm: &[ReplayedAdmission]) -> f64 {
    let times: Vec<f64> = adm.iter().map(|a| a.arrival - a.dispatched).collect();
    let max = times.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return 1.0;
    }
    let sum: f64 = times.iter().sum();
    sum / (times.len() as f64 * max)
}

/// Replays `events` under the admission rules of `sim` for `clients`
/// clients. Fails only when the log is incomplete; disagreements are listed
/// in the report.
pub fn replay(events: &[SimEvent], sim: &SimConfig, clients: usize, summary: &Summary) -> Result<ReplayReport> {
    match events.last() {
        Some(e) if e.kind == EventKind::End => {}
        _ => return Err(CliError::format("events", "truncated log: no end event")),
    }
    let need = ((sim.mu * clients as f64 - 1e-9).ceil() as usize).clamp(1, clients.max(1));
    let mut diffs = Vec::new();
    let mut dispatched: Vec<Option<(f64, usize)>> = vec![None; clients];
    let mut q = 0usize;
    let mut open: Vec<ReplayedAdmission> = Vec::new();
    let mut deadline: Option<f64> = None;
    let mut capped = false;
    let mut timer_at: Option<f64> = None;
    let mut pending_drop: Option<usize> = None;
    let mut rounds: Vec<Vec<ReplayedAdmission>> = Vec::new();
    let mut stale_drops = 0;

    for (i, e) in events.iter().enumerate() {
        let line = i + 1;
        if let Some(c) = pending_drop {
            if e.kind != EventKind::StaleDrop {
                diffs.push(format!("line {}: client {} exceeded tau_max but was not dropped", line, c));
                pending_drop = None;
            }
        }
        let client = match (e.kind, e.client) {
            (EventKind::Dispatch | EventKind::UpdateArrival | EventKind::StaleDrop, None) => {
                return Err(CliError::format("events", format!("line {}: client missing", line)));
            }
            (_, Some(c)) if c >= clients => {
                return Err(CliError::format("events", format!("line {}: unknown client {}", line, c)));
            }
            (_, c) => c.unwrap_or(0),
        };
        match e.kind {
            EventKind::Dispatch => {
                if e.round != q {
                    diffs.push(format!("line {}: client {} dispatched with tag {} in round {}", line, client, e.round, q));
                }
                dispatched[client] = Some((e.t, e.round));
            }
            EventKind::UpdateArrival => {
                let Some((td, tag)) = dispatched[client].take() else {
                    diffs.push(format!("line {}: arrival from client {} without a dispatch", line, client));
                    continue;
                };
                if e.round != tag {
                    diffs.push(format!(
                        "line {}: tau: client {} reports base round {} but was dispatched with {}",
                        line, client, e.round, tag
                    ));
                }
                if e.round > q {
                    diffs.push(format!("line {}: tau: base round {} is ahead of round {}", line, e.round, q));
                    continue;
                }
                let tau = q - e.round;
                if tau > sim.tau_max {
                    pending_drop = Some(client);
                    continue;
                }
                if deadline.is_some_and(|d| e.t > d) {
                    diffs.push(format!(
                        "line {}: admission: client {} arrived at {} after the round {} deadline {}",
                        line,
                        client,
                        e.t,
                        q,
                        deadline.unwrap_or_default()
                    ));
                }
                if capped {
                    diffs.push(format!("line {}: admission: round {} already reached its cap", line, q));
                }
                open.push(ReplayedAdmission {
                    client,
                    base_round: e.round,
                    tau,
                    dispatched: td,
                    arrival: e.t,
                });
                if deadline.is_none() && open.len() >= need {
                    deadline = Some(e.t + sim.t_clk);
                }
                if sim.max_admit.is_some_and(|k| open.len() >= k) {
                    capped = true;
                }
            }
            EventKind::StaleDrop => {
                if pending_drop != Some(client) {
                    diffs.push(format!("line {}: unexpected stale drop of client {}", line, client));
                } else {
                    stale_drops += 1;
                }
                pending_drop = None;
            }
            EventKind::Timer => {
                if e.round != q {
                    diffs.push(format!("line {}: timer tagged {} in round {}", line, e.round, q));
                }
                if deadline != Some(e.t) {
                    diffs.push(format!("line {}: admission: timer at {} but deadline is {:?}", line, e.t, deadline));
                }
                timer_at = Some(e.t);
            }
            EventKind::Aggregate => {
                if e.round != q {
                    diffs.push(format!("line {}: aggregate tagged {} in round {}", line, e.round, q));
                }
                let by_timer = timer_at == Some(e.t) && deadline == Some(e.t);
                if !(capped || by_timer) {
                    diffs.push(format!("line {}: admission: round {} closed at {} without quorum and deadline", line, q, e.t));
                }
                if open.is_empty() {
                    diffs.push(format!("line {}: round {} closed with no admissions", line, q));
                }
                rounds.push(std::mem::take(&mut open));
                q += 1;
                deadline = None;
                capped = false;
                timer_at = None;
            }
            EventKind::End => {
                if i + 1 != events.len() {
                    diffs.push(format!("line {}: end event before the end of the log", line));
                }
                if e.round != q {
                    diffs.push(format!("line {}: end tagged {} after {} rounds", line, e.round, q));
                }
            }
        }
    }

    if rounds.len() != summary.records.len() {
        diffs.push(format!("log has {} rounds, summary has {}", rounds.len(), summary.records.len()));
    }
    let mut ru_sum = 0.0;
    let mut max_tau = 0;
    for (q, (adm, rec)) in rounds.iter().zip(&summary.records).enumerate() {
        let ru = if adm.is_empty() { 0.0 } else { utilization(adm) };
        ru_sum += ru;
        max_tau = adm.iter().map(|a| a.tau).fold(max_tau, usize::max);
        let ids: Vec<usize> = adm.iter().map(|a| a.client).collect();
        let live: Vec<usize> = rec.admitted.iter().map(|a| a.client).collect();
        if ids != live {
            diffs.push(format!("round {}: admission set {:?} != recorded {:?}", q, ids, live));
            continue;
        }
        for (a, b) in adm.iter().zip(&rec.admitted) {
            if a.tau != b.tau || a.base_round != b.base_round {
                diffs.push(format!(
                    "round {}: tau of client {} replays as {} (base {}) but was {} (base {})",
                    q, a.client, a.tau, a.base_round, b.tau, b.base_round
                ));
            }
            if a.dispatched.to_bits() != b.dispatched.to_bits() || a.arrival.to_bits() != b.arrival.to_bits() {
                diffs.push(format!("round {}: timing of client {} differs from the record", q, a.client));
            }
        }
        if ru.to_bits() != rec.utilization.to_bits() {
            diffs.push(format!("round {}: utilization {} != recorded {}", q, ru, rec.utilization));
        }
    }
    let ru = if rounds.is_empty() { 0.0 } else { ru_sum / rounds.len() as f64 };
    if ru.to_bits() != summary.resource_utilization.to_bits() {
        diffs.push(format!("resource utilization {} != summary {}", ru, summary.resource_utilization));
    }
    if max_tau != summary.max_tau {
        diffs.push(format!("max tau {} != summary {}", max_tau, summary.max_tau));
    }
    if stale_drops != summary.stale_drops {
        diffs.push(format!("{} stale drops != summary {}", stale_drops, summary.stale_drops));
    }
    Ok(ReplayReport {
        rounds: rounds.len(),
        admissions: rounds.iter().map(Vec::len).sum(),
        stale_drops,
        max_tau,
        resource_utilization: ru,
        diffs,
    })
}
