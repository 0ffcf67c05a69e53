//! Per-slot service demand.
//!
//! Request probabilities `P_k(t)` come from one of three time-varying
//! popularity models. Per-server request counts are either the rounded
//! expectation `n_i · P_k(t)` or Poisson samples around it.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::domain::{Bits, SystemConfig, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestKind {
    StaticZipf,
    /// Zipf popularity whose ranking rotates through all services once per period.
    RotatingZipf,
    /// Zipf base weights modulated by phase-shifted sinusoids.
    Sinusoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DemandMode {
    /// `n_i^k(t) = round(n_i · P_k(t))`, ties to even. Independent of the rng.
    #[default]
    Expectation,
    /// `n_i^k(t) ~ Poisson(mean · P_k(t))`.
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestModel {
    pub kind: RequestKind,
    pub zipf_exponent: f64,
    /// Period in slots of the rotating and sinusoidal models.
    pub rotation_period: usize,
    /// Amplitude of the sinusoidal modulation, in `[0, 1)`.
    pub modulation_depth: f64,
    /// Mean requests per server per slot in stochastic mode. When absent the
    /// server's user count `n_i` is used.
    #[serde(default)]
    pub poisson_mean: Option<f64>,
    #[serde(default)]
    pub mode: DemandMode,
}

impl RequestModel {
    pub(crate) fn violations(&self, _services: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut bad = |path: &str, message: String| {
            out.push(Violation {
                path: format!("request_model.{path}"),
                message,
            })
        };
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            bad("zipf_exponent", format!("must be >= 0, got {}", self.zipf_exponent));
        }
        if self.rotation_period == 0 {
            bad("rotation_period", "must be >= 1".into());
        }
        if !(self.modulation_depth.is_finite() && (0.0..1.0).contains(&self.modulation_depth)) {
            bad(
                "modulation_depth",
                format!("must be in [0,1), got {}", self.modulation_depth),
            );
        }
        if let Some(m) = self.poisson_mean {
            if !(m.is_finite() && m >= 0.0) {
                bad("poisson_mean", format!("must be >= 0, got {m}"));
            }
        }
        out
    }
}

fn zipf_weights(k: usize, exponent: f64) -> Vec<f64> {
    (1..=k).map(|r| (r as f64).powf(-exponent)).collect()
}

fn normalize(mut w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// `P_k(t)` for every service. Nonnegative, sums to one, pure in `(model, t)`.
pub fn request_probabilities(model: &RequestModel, services: usize, t: usize) -> Vec<f64> {
    let base = zipf_weights(services, model.zipf_exponent);
    let period = model.rotation_period.max(1);
    let phase = t % period;
    match model.kind {
        RequestKind::StaticZipf => normalize(base),
        RequestKind::RotatingZipf => {
            let shift = phase * services / period;
            let w = (0..services)
                .map(|k| base[(k + shift) % services])
                .collect();
            normalize(w)
        }
        RequestKind::Sinusoidal => {
            let w = base
                .iter()
                .enumerate()
                .map(|(k, b)| {
                    let angle =
                        2.0 * PI * (phase as f64 / period as f64 + k as f64 / services as f64);
                    b * (1.0 + model.modulation_depth * angle.sin())
                })
                .collect();
            normalize(w)
        }
    }
}

/// Demand offered to the servers in one slot, after admission truncation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotDemand {
    pub t: usize,
    pub probabilities: Vec<f64>,
    /// `n_i^k(t)`, indexed `[server][service]`.
    pub counts: Vec<Vec<u64>>,
    /// `A_i^k(t) = n_i^k(t) · b_k`.
    pub bits: Vec<Vec<Bits>>,
    /// `A_i(t) = Σ_k A_i^k(t)`.
    pub totals: Vec<Bits>,
    /// Bits cut by the `A_i^max` truncation.
    pub rejected: Vec<Bits>,
}

impl SlotDemand {
    /// Applies the `A_i^max` cap by scaling every service's count on an
    /// overloaded server by the same factor, rounding down.
    pub fn from_counts(
        cfg: &SystemConfig,
        t: usize,
        probabilities: Vec<f64>,
        mut counts: Vec<Vec<u64>>,
    ) -> Self {
        let sizes = &cfg.catalog.sizes;
        let volume = |row: &[u64]| -> Bits { row.iter().zip(sizes).map(|(n, b)| n * b).sum() };
        let mut rejected = vec![0; counts.len()];
        for (i, row) in counts.iter_mut().enumerate() {
            let offered = volume(row);
            let cap = cfg.servers[i].max_arrival;
            if offered > cap {
                for n in row.iter_mut() {
                    *n = ((*n as u128 * cap as u128) / offered as u128) as u64;
                }
                rejected[i] = offered - volume(row);
            }
        }
        let bits: Vec<Vec<Bits>> = counts
            .iter()
            .map(|row| row.iter().zip(sizes).map(|(n, b)| n * b).collect())
            .collect();
        let totals = bits.iter().map(|r| r.iter().sum()).collect();
        Self {
            t,
            probabilities,
            counts,
            bits,
            totals,
            rejected,
        }
    }

    pub fn server_count(&self) -> usize {
        self.counts.len()
    }

    pub fn service_count(&self) -> usize {
        self.probabilities.len()
    }

    /// Total demand `Σ_i A_i^k(t)` of one service.
    pub fn service_volume(&self, k: usize) -> Bits {
        self.bits.iter().map(|r| r[k]).sum()
    }

    /// Total requests `Σ_i n_i^k(t)` for one service.
    pub fn service_requests(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    pub fn total_bits(&self) -> Bits {
        self.totals.iter().sum()
    }

    /// Copy with the given services' demand removed.
    pub fn restricted_to(&self, keep: &[bool]) -> Self {
        let mut d = self.clone();
        for (row_n, row_b) in d.counts.iter_mut().zip(d.bits.iter_mut()) {
            for k in 0..keep.len() {
                if !keep[k] {
                    row_n[k] = 0;
                    row_b[k] = 0;
                }
            }
        }
        d.totals = d.bits.iter().map(|r| r.iter().sum()).collect();
        d
    }
}

/// Untruncated request counts for slot `t`. Stochastic mode draws from a
/// stream keyed by `(seed, t)`.
pub fn request_counts(
    cfg: &SystemConfig,
    probabilities: &[f64],
    t: usize,
    seed: u64,
) -> Vec<Vec<u64>> {
    let model = &cfg.request_model;
    match model.mode {
        DemandMode::Expectation => cfg
            .servers
            .iter()
            .map(|s| {
                probabilities
                    .iter()
                    .map(|p| (s.covered_users as f64 * p).round_ties_even() as u64)
                    .collect()
            })
            .collect(),
        DemandMode::Stochastic => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            cfg.servers
                .iter()
                .map(|s| {
                    let per_server = if s.covered_users == 0 {
                        0.0
                    } else {
                        model.poisson_mean.unwrap_or(s.covered_users as f64)
                    };
                    probabilities
                        .iter()
                        .map(|p| {
                            let mean = per_server * p;
                            if mean > 0.0 {
                                Poisson::new(mean).expect("positive mean").sample(&mut rng) as u64
                            } else {
                                0
                            }
                        })
                        .collect()
                })
                .collect()
        }
    }
}

/// Demand for slot `t`: probabilities, counts and the `A_i^max` truncation.
pub fn slot_demand(cfg: &SystemConfig, t: usize, seed: u64) -> SlotDemand {
    let p = request_probabilities(&cfg.request_model, cfg.service_count(), t);
    let counts = request_counts(cfg, &p, t, seed);
    SlotDemand::from_counts(cfg, t, p, counts)
}
