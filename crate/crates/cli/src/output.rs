//! Run directory contents: `metrics.csv`, `events.jsonl`, `final.ckpt`,
//! `summary.json`, `masks.json` and the resolved `config.json`.

use std::io::{BufRead, Write};
use std::path::Path;

use cos2p_core::config::ExperimentConfig;
use cos2p_core::experiment::{ClientMasks, ExperimentResult, Summary};
use cos2p_core::federation::MetricsRow;
use cos2p_core::sim::SimEvent;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::checkpoint;
use crate::error::{CliError, Result};

pub const METRICS: &str = "metrics.csv";
pub const EVENTS: &str = "events.jsonl";
pub const CHECKPOINT: &str = "final.ckpt";
pub const SUMMARY: &str = "summary.json";
pub const MASKS: &str = "masks.json";
pub const CONFIG: &str = "config.json";

pub fn write_metrics<W: Write>(w: W, rows: &[MetricsRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(MetricsRow::COLUMNS)?;
    }
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_events<W: Write>(mut w: W, events: &[SimEvent]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Reads an event log; a malformed line is reported with its number.
pub fn read_events(path: &Path) -> Result<Vec<SimEvent>> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line).map_err(|e| CliError::format(path, format!("line {}: {}", i + 1, e)))?;
        out.push(e);
    }
    Ok(out)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    read_json(path)
}

pub fn read_masks(path: &Path) -> Result<Vec<ClientMasks>> {
    read_json(path)
}

pub fn write_run(dir: &Path, cfg: &ExperimentConfig, res: &ExperimentResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let create = |name: &str| {
        let p = dir.join(name);
        std::fs::File::create(&p)
            .map(std::io::BufWriter::new)
            .map_err(|e| CliError::io(p, e))
    };
    write_metrics(create(METRICS)?, &res.rows).map_err(|e| CliError::format(dir.join(METRICS), e.to_string()))?;
    write_events(create(EVENTS)?, &res.events).map_err(|e| CliError::io(dir.join(EVENTS), e))?;
    checkpoint::save(&dir.join(CHECKPOINT), &res.layout, &res.global)?;
    write_json(&dir.join(SUMMARY), &res.summary)?;
    write_json(&dir.join(MASKS), &res.masks)?;
    write_json(&dir.join(CONFIG), cfg)
}
