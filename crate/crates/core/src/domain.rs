//! Typed configuration for one offloading experiment.
//!
//! Every quantity the models consume lives here or in the per-slot state of
//! [`crate::workload`] / [`crate::queueing`]. Data volumes are integer bits,
//! rates are bits per slot, energies are joules and delays are seconds.
//!
//! A configuration that passes [`validate_config`] is accepted by every other
//! module without further precondition checks.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::workload::RequestModel;

/// Data volume in bits.
pub type Bits = u64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// The service database reachable from the macro base station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceCatalog {
    /// Size `b_k` of each service in bits.
    pub sizes: Vec<Bits>,
    /// Arrival intensity of each service per user, in requests per slot.
    pub per_user_intensity: Vec<f64>,
}

impl ServiceCatalog {
    pub fn service_count(&self) -> usize {
        self.sizes.len()
    }
}

/// One small base station with its co-located edge server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeServerSpec {
    pub id: usize,
    /// Caching capacity `B_i` in bits.
    pub cache_capacity: Bits,
    /// Placement vector `f_i^k`, one flag per service.
    pub cached_services: Vec<bool>,
    /// Maximum workload `μ_i^max` processed per slot.
    pub max_service_rate: Bits,
    /// Maximum data `A_i^max` the server may receive per slot.
    pub max_arrival: Bits,
    /// Buffer bound `Q_i^max`.
    pub max_queue: Bits,
    /// Number of users `n_i` attached to this server.
    pub covered_users: u32,
    pub position: Position,
}

impl EdgeServerSpec {
    /// Number of cached service types (`Ā_i`).
    pub fn cached_count(&self) -> usize {
        self.cached_services.iter().filter(|&&f| f).count()
    }

    pub fn cached_bits(&self, catalog: &ServiceCatalog) -> Bits {
        self.cached_services
            .iter()
            .zip(&catalog.sizes)
            .filter(|(f, _)| **f)
            .map(|(_, b)| *b)
            .sum()
    }
}

/// Device transmit power `P_u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TxPower {
    Fixed { watts: f64 },
    /// Drawn uniformly once per slot.
    Uniform { min_watts: f64, max_watts: f64 },
}

/// Channel gain `h(t)` model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ChannelGain {
    /// The same gain on every slot.
    Fixed { gain_db: f64 },
    /// Per-slot i.i.d. log-normal fading around `mean_db`.
    LogNormal { mean_db: f64, sigma_db: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioConfig {
    pub bandwidth_hz: f64,
    pub tx_power: TxPower,
    pub channel_gain: ChannelGain,
    /// Noise power `φ²` in watts.
    pub noise_power: f64,
}

/// Per-bit energy constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    /// `e_u`, device to server, joules per bit.
    pub device_to_server: f64,
    /// `e_s`, server to server, joules per bit per hop.
    pub server_to_server: f64,
    /// `e_p`, processing, joules per bit.
    pub processing: f64,
}

/// How the number of servers in a service's collaboration area is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CollaborationScope {
    /// `O_k` is the number of servers caching service `k`.
    #[default]
    Providers,
    /// `O_k` is the largest number of providers of `k` within `hops` of any server.
    HopRadius { hops: usize },
}

/// Which arrival volume multiplies the processing-energy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessingEnergyMode {
    /// Total server arrivals `A_i(t)` inside the per-service sum, as written.
    #[default]
    ServerArrivals,
    /// Per-service arrivals `A_i^k(t)`.
    ServiceArrivals,
}

/// All physical and economic parameters of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub servers: Vec<EdgeServerSpec>,
    pub catalog: ServiceCatalog,
    pub radio: RadioConfig,
    pub energy: EnergyConfig,
    /// Control parameter `V`.
    pub control_v: f64,
    /// Energy/delay weight `θ`.
    pub weight_theta: f64,
    pub slot_count: usize,
    /// Slot length in seconds.
    pub slot_duration: f64,
    pub rng_seed: u64,
    /// Per-slot energy cap `E^max` (joules).
    pub energy_cap: f64,
    /// Per-slot delay cap `T^max` (seconds).
    pub delay_cap: f64,
    pub request_model: RequestModel,
    /// User to SBS communication range in meters.
    pub user_range: f64,
    /// SBS to SBS communication range in meters.
    pub server_range: f64,
    #[serde(default)]
    pub collaboration: CollaborationScope,
    #[serde(default)]
    pub processing_energy: ProcessingEnergyMode,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SystemConfig {
    pub fn server_count(&self) -> usize {
        self.servers.len()
    }

    pub fn service_count(&self) -> usize {
        self.catalog.service_count()
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, ConfigError> {
        Ok(serde_json::from_value(value)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON encoding, hex encoded.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Number of providers `a_k` of each service.
    pub fn provider_counts(&self) -> Vec<usize> {
        (0..self.service_count())
            .map(|k| self.servers.iter().filter(|s| s.cached_services[k]).count())
            .collect()
    }

    /// Server adjacency defined by the SBS to SBS range.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        adjacency_within(
            &self.servers.iter().map(|s| s.position).collect::<Vec<_>>(),
            self.server_range,
        )
    }

    /// Unweighted shortest-path hop counts between servers; `None` when unreachable.
    pub fn hop_distances(&self) -> Vec<Vec<Option<usize>>> {
        hop_distances(&self.adjacency())
    }
}

pub(crate) fn adjacency_within(points: &[Position], range: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if points[i].distance(&points[j]) <= range {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    adj
}

/// All-pairs BFS on an unweighted graph.
pub fn hop_distances(adj: &[Vec<usize>]) -> Vec<Vec<Option<usize>>> {
    let n = adj.len();
    let mut out = vec![vec![None; n]; n];
    for (src, row) in out.iter_mut().enumerate() {
        let mut queue = VecDeque::from([src]);
        row[src] = Some(0);
        while let Some(u) = queue.pop_front() {
            let d = row[u].unwrap_or(0);
            for &v in &adj[u] {
                if row[v].is_none() {
                    row[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
    }
    out
}

/// One violated invariant, addressed by its JSON field path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }

    fn check(&mut self, ok: bool, path: impl Into<String>, message: impl FnOnce() -> String) {
        if !ok {
            self.push(path, message());
        }
    }
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

fn non_negative(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

/// Checks every configuration invariant. Violations are data, not faults.
pub fn validate_config(cfg: &SystemConfig) -> ValidationReport {
    let mut r = ValidationReport::default();
    let k = cfg.service_count();

    r.check(!cfg.servers.is_empty(), "servers", || {
        "at least one server is required".into()
    });
    r.check(k >= 1, "catalog.sizes", || {
        "at least one service is required".into()
    });
    r.check(
        cfg.catalog.per_user_intensity.len() == k,
        "catalog.per_user_intensity",
        || {
            format!(
                "length {} does not match service count {k}",
                cfg.catalog.per_user_intensity.len()
            )
        },
    );
    for (idx, &b) in cfg.catalog.sizes.iter().enumerate() {
        r.check(b > 0, format!("catalog.sizes[{idx}]"), || {
            "service size must be positive".into()
        });
    }
    for (idx, &l) in cfg.catalog.per_user_intensity.iter().enumerate() {
        r.check(non_negative(l), format!("catalog.per_user_intensity[{idx}]"), || {
            format!("intensity must be finite and >= 0, got {l}")
        });
    }

    for (idx, s) in cfg.servers.iter().enumerate() {
        let p = |field: &str| format!("servers[{idx}].{field}");
        r.check(s.id == idx, p("id"), || {
            format!("id {} does not match position {idx}", s.id)
        });
        if s.cached_services.len() != k {
            r.push(
                p("cached_services"),
                format!("length {} does not match service count {k}", s.cached_services.len()),
            );
        } else if cfg.catalog.sizes.len() == k {
            let used = s.cached_bits(&cfg.catalog);
            r.check(used <= s.cache_capacity, p("cached_services"), || {
                format!("cache overflow: {used} > {}", s.cache_capacity)
            });
        }
        r.check(s.max_service_rate > 0, p("max_service_rate"), || {
            "must be positive".into()
        });
        r.check(s.max_queue > 0, p("max_queue"), || "must be positive".into());
        r.check(s.max_arrival > 0, p("max_arrival"), || "must be positive".into());
        r.check(
            s.position.x.is_finite() && s.position.y.is_finite(),
            p("position"),
            || "coordinates must be finite".into(),
        );
    }

    r.check(
        cfg.weight_theta.is_finite() && (0.0..=1.0).contains(&cfg.weight_theta),
        "weight_theta",
        || format!("weight_theta out of [0,1]: {}", cfg.weight_theta),
    );
    r.check(non_negative(cfg.control_v), "control_v", || {
        format!("control_v must be >= 0, got {}", cfg.control_v)
    });
    r.check(cfg.slot_count >= 1, "slot_count", || "must be >= 1".into());
    r.check(positive(cfg.slot_duration), "slot_duration", || {
        "must be positive".into()
    });
    r.check(positive(cfg.energy_cap), "energy_cap", || {
        "must be positive".into()
    });
    r.check(positive(cfg.delay_cap), "delay_cap", || "must be positive".into());
    r.check(positive(cfg.user_range), "user_range", || "must be positive".into());
    r.check(positive(cfg.server_range), "server_range", || {
        "must be positive".into()
    });

    r.check(positive(cfg.radio.bandwidth_hz), "radio.bandwidth_hz", || {
        "must be positive".into()
    });
    r.check(positive(cfg.radio.noise_power), "radio.noise_power", || {
        "must be positive".into()
    });
    // A zero SNR makes the shared link rate zero, which is a link outage for
    // any slot with demand.
    match cfg.radio.tx_power {
        TxPower::Fixed { watts } => r.check(positive(watts), "radio.tx_power.watts", || {
            "must be positive".into()
        }),
        TxPower::Uniform {
            min_watts,
            max_watts,
        } => r.check(
            positive(min_watts) && positive(max_watts) && min_watts <= max_watts,
            "radio.tx_power",
            || format!("need 0 < min_watts <= max_watts, got [{min_watts}, {max_watts}]"),
        ),
    }
    match cfg.radio.channel_gain {
        ChannelGain::Fixed { gain_db } => {
            r.check(gain_db.is_finite(), "radio.channel_gain.gain_db", || {
                "must be finite".into()
            })
        }
        ChannelGain::LogNormal { mean_db, sigma_db } => r.check(
            mean_db.is_finite() && non_negative(sigma_db),
            "radio.channel_gain",
            || "mean_db must be finite and sigma_db >= 0".into(),
        ),
    }

    let e = &cfg.energy;
    for (name, v) in [
        ("energy.device_to_server", e.device_to_server),
        ("energy.server_to_server", e.server_to_server),
        ("energy.processing", e.processing),
    ] {
        r.check(non_negative(v), name, || format!("must be >= 0, got {v}"));
    }

    if let CollaborationScope::HopRadius { hops } = cfg.collaboration {
        r.check(hops >= 1, "collaboration.hops", || "must be >= 1".into());
    }

    for v in cfg.request_model.violations(k) {
        r.violations.push(v);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn tiny() -> SystemConfig {
        presets::small(1, 10, 7)
    }

    #[test]
    fn preset_is_valid() {
        let cfg = presets::reference(10, 1);
        let report = validate_config(&cfg);
        assert!(report.is_ok(), "{:?}", report.violations);
    }

    #[test]
    fn cache_at_exact_capacity_passes() {
        let mut cfg = tiny();
        let s = &mut cfg.servers[0];
        s.cached_services = vec![true; 10];
        s.cache_capacity = cfg.catalog.sizes.iter().sum();
        assert!(validate_config(&cfg).is_ok());
    }

    #[test]
    fn theta_out_of_range() {
        let mut cfg = tiny();
        cfg.weight_theta = 1.5;
        let report = validate_config(&cfg);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].path, "weight_theta");
        assert!(report.violations[0].message.contains("out of [0,1]"));
    }

    #[test]
    fn cache_overflow_is_reported_with_sums() {
        let mut cfg = tiny();
        cfg.catalog.sizes = vec![100; 10];
        let s = &mut cfg.servers[0];
        s.cached_services = vec![true; 10];
        s.cache_capacity = 500;
        let report = validate_config(&cfg);
        assert!(report
            .violations
            .iter()
            .any(|v| v.message == "cache overflow: 1000 > 500"
                && v.path == "servers[0].cached_services"));
    }

    #[test]
    fn several_violations_are_all_listed() {
        let mut cfg = tiny();
        cfg.control_v = -1.0;
        cfg.slot_count = 0;
        cfg.servers[0].max_queue = 0;
        let paths: Vec<_> = validate_config(&cfg)
            .violations
            .into_iter()
            .map(|v| v.path)
            .collect();
        assert!(paths.contains(&"control_v".to_string()));
        assert!(paths.contains(&"slot_count".to_string()));
        assert!(paths.contains(&"servers[0].max_queue".to_string()));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value = serde_json::to_value(tiny()).unwrap();
        value["surprise"] = serde_json::json!(1);
        assert!(SystemConfig::from_value(value).is_err());
    }

    #[test]
    fn json_roundtrip_and_hash_stability() {
        let cfg = presets::reference(5, 3);
        let back = SystemConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.config_hash(), back.config_hash());
        let mut other = cfg.clone();
        other.control_v += 1.0;
        assert_ne!(cfg.config_hash(), other.config_hash());
    }

    #[test]
    fn bfs_hops_on_a_path_graph() {
        let adj = vec![vec![1], vec![0, 2], vec![1], vec![]];
        let d = hop_distances(&adj);
        assert_eq!(d[0][2], Some(2));
        assert_eq!(d[2][0], Some(2));
        assert_eq!(d[0][3], None);
        assert_eq!(d[3][3], Some(0));
    }
}
