//! File formats, config loading, run persistence and log replay for the
//! `cos2p` command-line tool.

pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod inspect;
pub mod output;
pub mod replay;

pub use error::{CliError, Result};

use std::path::Path;

use cos2p_core::config::ExperimentConfig;
use cos2p_core::experiment::{self, ExperimentResult};

/// Runs an experiment and writes its outputs into `out`.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentResult> {
    let res = experiment::run(cfg)?;
    output::write_run(out, cfg, &res)?;
    Ok(res)
}

/// Writes the generated pool, the server test set and one index file per
/// client (`client_NNN.json` with its shard and local split).
pub fn write_partition(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let fed = experiment::generate_data(cfg)?;
    dataset::write_dataset(&out.join("pool"), &fed.pool)?;
    dataset::write_dataset(&out.join("server_test"), &fed.server_test)?;
    #[derive(serde::Serialize)]
    struct ClientIndex<'a> {
        client: usize,
        shard: &'a [usize],
        train: Vec<usize>,
        test: Vec<usize>,
    }
    for (n, (shard, prof)) in fed.shards.iter().zip(cfg.client_profiles()).enumerate() {
        let (train, test) = experiment::client_split(cfg.data.seed, n, shard, prof.dataset_fraction);
        let idx = ClientIndex {
            client: n,
            shard,
            train,
            test,
        };
        let p = out.join(format!("client_{:03}.json", n));
        let text = serde_json::to_string(&idx).map_err(|e| CliError::format(&p, e.to_string()))?;
        std::fs::write(&p, text + "\n").map_err(|e| CliError::io(p, e))?;
    }
    Ok(())
}
