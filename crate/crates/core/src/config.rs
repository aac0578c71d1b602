//! Experiment configuration with defaults and range checks.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::client::TrainConfig;
use crate::layout::ModelSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Learned masks, importance-weighted semi-asynchronous aggregation.
    #[default]
    Cos2p,
    /// Full barrier (`μ = 1`, `T_clk = 0`) with uniform weights.
    SyncFedavg,
    /// Fixed random width masks, otherwise as `cos2p`.
    RandomMask,
    /// One update per aggregation.
    FullAsync,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub tokens: usize,
    /// Must equal `data.classes` when given.
    pub classes: Option<usize>,
    /// Output neurons per linear segment; `hidden / heads` when absent.
    pub group_size: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 8,
            hidden: 64,
            heads: 4,
            mlp_ratio: 2,
            tokens: 2,
            classes: None,
            group_size: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub clients: usize,
    pub mu: f64,
    pub t_clk: f64,
    pub rounds: usize,
    pub tau_max: usize,
    pub mode: Mode,
    /// Server learning rate; the client `train.eta` when absent.
    pub eta_server: Option<f64>,
    pub jitter_sigma: f64,
    /// Evaluate the global model every this many rounds (and after the last).
    pub eval_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 8,
            mu: 0.5,
            t_clk: 60.0,
            rounds: 150,
            tau_max: 10,
            mode: Mode::Cos2p,
            eta_server: None,
            jitter_sigma: 0.1,
            eval_every: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub r_depth: f64,
    pub r_width: f64,
    /// Declared `R_n`; must equal `r_width · r_depth` when given.
    #[serde(default)]
    pub r_n: Option<f64>,
    #[serde(default = "default_speed")]
    pub speed: f64,
    #[serde(default = "default_comm")]
    pub comm_latency: f64,
    /// Fraction of the client's partition shard it actually holds.
    #[serde(default = "default_fraction")]
    pub dataset_fraction: f64,
}

fn default_speed() -> f64 {
    0.05
}

fn default_comm() -> f64 {
    1.0
}

fn default_fraction() -> f64 {
    1.0
}

impl ClientConfig {
    pub fn r_n(&self) -> f64 {
        self.r_width * self.r_depth
    }
}

/// Default heterogeneous tiers: `R_n ∈ {9/16, 1/4, 1/16}` with equal width
/// and depth rates, assigned round-robin.
pub fn default_clients(n: usize) -> Vec<ClientConfig> {
    const TIERS: [f64; 3] = [0.75, 0.5, 0.25];
    (0..n)
        .map(|i| {
            let r = TIERS[i % TIERS.len()];
            ClientConfig {
                r_depth: r,
                r_width: r,
                r_n: None,
                speed: default_speed(),
                comm_latency: default_comm(),
                dataset_fraction: 1.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dim: usize,
    pub classes: usize,
    /// Samples per class in the pool that is partitioned across clients.
    pub n: usize,
    /// Samples per class in the server test set.
    pub test_per_class: usize,
    pub alpha: f64,
    pub separation: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dim: 64,
            classes: 10,
            n: 100,
            test_per_class: 30,
            alpha: 1.5,
            separation: 4.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub federation: FederationConfig,
    /// One entry per client; the default tiers when empty.
    pub clients: Vec<ClientConfig>,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    /// Client profiles, falling back to [`default_clients`].
    pub fn client_profiles(&self) -> Vec<ClientConfig> {
        if self.clients.is_empty() {
            default_clients(self.federation.clients)
        } else {
            self.clients.clone()
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        if m.heads == 0 {
            return Err(Error::invalid("model.heads", "must be positive"));
        }
        let spec = ModelSpec {
            input_dim: self.data.dim,
            tokens: m.tokens,
            hidden: m.hidden,
            heads: m.heads,
            mlp_hidden: m.hidden * m.mlp_ratio,
            depth: m.depth,
            classes: self.data.classes,
            group_size: m.group_size.unwrap_or(m.hidden / m.heads),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn server_eta(&self) -> f64 {
        self.federation.eta_server.unwrap_or(self.train.eta)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.model.classes {
            if c != self.data.classes {
                return Err(Error::invalid("model.classes", "must equal data.classes"));
            }
        }
        if self.model.mlp_ratio == 0 {
            return Err(Error::invalid("model.mlp_ratio", "must be positive"));
        }
        self.model_spec()?;

        let f = &self.federation;
        if f.clients == 0 {
            return Err(Error::invalid("federation.clients", "need at least one client"));
        }
        if !(f.mu > 0.0 && f.mu <= 1.0) {
            return Err(Error::invalid("federation.mu", format!("{} is outside (0, 1]", f.mu)));
        }
        if !(f.t_clk >= 0.0 && f.t_clk.is_finite()) {
            return Err(Error::invalid("federation.t_clk", "must be non-negative"));
        }
        if f.eval_every == 0 {
            return Err(Error::invalid("federation.eval_every", "must be positive"));
        }
        if !(f.jitter_sigma >= 0.0 && f.jitter_sigma.is_finite()) {
            return Err(Error::invalid("federation.jitter_sigma", "must be non-negative"));
        }
        if let Some(e) = f.eta_server {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::invalid("federation.eta_server", "must be positive"));
            }
        }

        if !self.clients.is_empty() && self.clients.len() != f.clients {
            return Err(Error::invalid(
                "clients",
                format!("{} profiles given for {} clients", self.clients.len(), f.clients),
            ));
        }
        for c in &self.client_profiles() {
            let unit = |v: f64, field: &'static str| {
                if v > 0.0 && v <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(field, format!("{} is outside (0, 1]", v)))
                }
            };
            unit(c.r_depth, "clients.r_depth")?;
            unit(c.r_width, "clients.r_width")?;
            unit(c.dataset_fraction, "clients.dataset_fraction")?;
            if let Some(rn) = c.r_n {
                if (rn - c.r_n()).abs() > 1e-12 {
                    return Err(Error::invalid(
                        "clients.r_n",
                        format!("declared {} but r_width·r_depth = {}", rn, c.r_n()),
                    ));
                }
            }
            if !(c.speed > 0.0 && c.speed.is_finite()) {
                return Err(Error::invalid("clients.speed", "must be positive"));
            }
            if !(c.comm_latency >= 0.0 && c.comm_latency.is_finite()) {
                return Err(Error::invalid("clients.comm_latency", "must be non-negative"));
            }
            crate::submodel::window_width(self.model.depth, c.r_depth)
                .map_err(|_| Error::invalid("clients.r_depth", "leaves no trainable block"))?;
        }

        self.train.validate()?;

        let d = &self.data;
        if d.dim == 0 {
            return Err(Error::invalid("data.dim", "must be at least 1"));
        }
        if d.classes < 2 {
            return Err(Error::invalid("data.classes", "need at least 2 classes"));
        }
        if d.n == 0 {
            return Err(Error::invalid("data.n", "must be positive"));
        }
        if d.test_per_class == 0 {
            return Err(Error::invalid("data.test_per_class", "must be positive"));
        }
        if !(d.alpha > 0.0 && d.alpha.is_finite()) {
            return Err(Error::invalid("data.alpha", "must be positive"));
        }
        if !(d.separation >= 0.0 && d.separation.is_finite()) {
            return Err(Error::invalid("data.separation", "must be non-negative"));
        }
        Ok(())
    }
}
