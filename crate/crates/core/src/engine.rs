//! Slot loop, run records and parameter sweeps.
//!
//! Each slot runs, in order: demand generation (with deferred requests from
//! the previous slot), radio sampling, candidate construction, the policy
//! decision, cost evaluation with the actual decision, the per-service queue
//! update, the Lyapunov snapshot and the per-slot invariant checks. A failed
//! invariant aborts the run with the slot index.
//!
//! Per-slot queue columns report the backlog `Q_i(t)` at the start of slot
//! `t`, so the first row of every run shows empty queues.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cost::{
    channel_rate, db_to_linear, evaluate, local_terms, mm1_wait, per_second, CollaborationContext,
    CostBreakdown, CostError,
};
use crate::domain::{validate_config, Bits, ChannelGain, SystemConfig, TxPower};
use crate::lyapunov::{decision_cost, drift_bound_b, LyapunovSnapshot};
use crate::policies::{check_decision, Candidate, MatchProblem, Policy, PolicyError};
use crate::queueing::{QueueError, QueueState, ServerStep};
use crate::workload::{request_counts, request_probabilities, DemandMode, SlotDemand};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Relative tolerance of the per-slot floating-point bound checks.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Moving-average window and relative tolerance used for the summary's
/// stabilization slot. The window spans one rotation period of the preset
/// demand so that the periodic popularity drift averages out.
pub const STABILIZATION_WINDOW: usize = 200;
pub const STABILIZATION_TOLERANCE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("slot {slot}: {message}")]
    Invariant { slot: usize, message: String },
    #[error("slot {slot}: {source}")]
    Cost { slot: usize, source: CostError },
    #[error("slot {slot}: {source}")]
    Policy { slot: usize, source: PolicyError },
    #[error("slot {slot}: {source}")]
    Queue { slot: usize, source: QueueError },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("metrics file: {0}")]
    Metrics(String),
}

impl EngineError {
    /// Whether the run aborted on a broken invariant rather than on input or io.
    pub fn is_runtime_abort(&self) -> bool {
        matches!(
            self,
            EngineError::Invariant { .. }
                | EngineError::Cost { .. }
                | EngineError::Policy { .. }
                | EngineError::Queue { .. }
        )
    }
}

/// First eight bytes of SHA-256 over the little-endian parts.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

const RADIO_STREAM: u64 = 1;
const POLICY_STREAM: u64 = 2;

/// Device power and link rate of slot `t`.
pub fn sample_radio(cfg: &SystemConfig, seed: u64, t: usize) -> Result<(f64, f64), CostError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, RADIO_STREAM]));
    rng.set_stream(t as u64);
    let p_u = match cfg.radio.tx_power {
        TxPower::Fixed { watts } => watts,
        TxPower::Uniform {
            min_watts,
            max_watts,
        } => rng.gen_range(min_watts..=max_watts),
    };
    let gain_db = match cfg.radio.channel_gain {
        ChannelGain::Fixed { gain_db } => gain_db,
        ChannelGain::LogNormal { mean_db, sigma_db } => {
            let z: f64 = StandardNormal.sample(&mut rng);
            mean_db + sigma_db * z
        }
    };
    let snr = p_u * db_to_linear(gain_db) / cfg.radio.noise_power;
    Ok((p_u, channel_rate(cfg.radio.bandwidth_hz, snr)?))
}

/// Everything recorded about one slot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotMetrics {
    pub t: usize,
    pub cost: CostBreakdown,
    /// `Σ_i Q_i(t)`.
    pub q_total: Bits,
    pub lyapunov: f64,
    pub drift: f64,
    pub l_cost: f64,
    /// `B + Σ Q_i (A_i − μ_i)`.
    pub drift_bound: f64,
    /// `B + V · Cost + Σ Q_i A_i`.
    pub penalty_bound: f64,
    /// Demand after truncation, including deferred requests.
    pub offered_bits: Bits,
    /// Demand of hosted services, routed into queues this slot.
    pub offloaded_bits: Bits,
    /// Part of the offloaded bits that entered at a server other than the host.
    pub forwarded_bits: Bits,
    /// Demand of unassigned services, re-offered next slot.
    pub deferred_bits: Bits,
    /// Bits cut by the arrival cap.
    pub rejected_bits: Bits,
    pub unassigned_services: usize,
    /// Candidates dropped because the M/M/1 model would be overloaded.
    pub overloaded_candidates: usize,
    pub tx_power: f64,
    pub rate_bps: f64,
    pub served_bits: Bits,
    /// A backlog exceeded `Q_max` after the update.
    pub flag_queue_bound: bool,
    /// Admitted data exceeded the slot's service rate on some server.
    pub flag_admission_rate: bool,
    /// A service rate exceeded `μ_max`.
    pub flag_rate_cap: bool,
    pub flag_energy_cap: bool,
    pub flag_delay_cap: bool,
    /// `Q_i(t)` per server.
    pub queues: Vec<Bits>,
}

const FIXED_COLUMNS: [&str; 33] = [
    "t",
    "cost",
    "e_c1",
    "e_c2",
    "e_p",
    "e_total",
    "t_c",
    "t_p",
    "t_total",
    "q_total",
    "lyapunov",
    "drift",
    "l_cost",
    "drift_bound",
    "penalty_bound",
    "offered_bits",
    "offloaded_bits",
    "forwarded_bits",
    "deferred_bits",
    "rejected_bits",
    "served_bits",
    "unassigned_services",
    "overloaded_candidates",
    "tx_power",
    "rate_bps",
    "flag_1b",
    "flag_1c",
    "flag_1d",
    "flag_1e",
    "flag_1f",
    "energy_cap_exceeded",
    "delay_cap_exceeded",
    "servers",
];

/// Column names of the per-slot CSV for `m` servers: the fixed columns
/// followed by `q_0 .. q_{m-1}`.
pub fn metrics_header(m: usize) -> Vec<String> {
    FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..m).map(|i| format!("q_{i}")))
        .collect()
}

fn flag(b: bool) -> String {
    u8::from(b).to_string()
}

impl SlotMetrics {
    pub fn to_record(&self) -> Vec<String> {
        let c = &self.cost;
        let mut out = vec![
            self.t.to_string(),
            c.cost.to_string(),
            c.e_c1.to_string(),
            c.e_c2.to_string(),
            c.e_p.to_string(),
            c.e_total.to_string(),
            c.t_c.to_string(),
            c.t_p.to_string(),
            c.t_total.to_string(),
            self.q_total.to_string(),
            self.lyapunov.to_string(),
            self.drift.to_string(),
            self.l_cost.to_string(),
            self.drift_bound.to_string(),
            self.penalty_bound.to_string(),
            self.offered_bits.to_string(),
            self.offloaded_bits.to_string(),
            self.forwarded_bits.to_string(),
            self.deferred_bits.to_string(),
            self.rejected_bits.to_string(),
            self.served_bits.to_string(),
            self.unassigned_services.to_string(),
            self.overloaded_candidates.to_string(),
            self.tx_power.to_string(),
            self.rate_bps.to_string(),
            flag(self.flag_queue_bound),
            flag(self.flag_admission_rate),
            flag(self.flag_rate_cap),
            flag(self.flag_energy_cap),
            flag(self.flag_delay_cap),
            flag(c.energy_cap_exceeded),
            flag(c.delay_cap_exceeded),
            self.queues.len().to_string(),
        ];
        out.extend(self.queues.iter().map(|q| q.to_string()));
        out
    }

    fn from_record(rec: &csv::StringRecord) -> Result<Self, String> {
        let get = |i: usize| rec.get(i).ok_or_else(|| format!("missing column {}", FIXED_COLUMNS[i]));
        let f = |i: usize| -> Result<f64, String> {
            get(i)?.parse().map_err(|e| format!("{}: {e}", FIXED_COLUMNS[i]))
        };
        let u = |i: usize| -> Result<u64, String> {
            get(i)?.parse().map_err(|e| format!("{}: {e}", FIXED_COLUMNS[i]))
        };
        let b = |i: usize| -> Result<bool, String> { Ok(u(i)? != 0) };
        let m = u(32)? as usize;
        let queues = (0..m)
            .map(|i| {
                rec.get(FIXED_COLUMNS.len() + i)
                    .ok_or_else(|| format!("missing column q_{i}"))?
                    .parse()
                    .map_err(|e| format!("q_{i}: {e}"))
            })
            .collect::<Result<Vec<Bits>, String>>()?;
        Ok(Self {
            t: u(0)? as usize,
            cost: CostBreakdown {
                cost: f(1)?,
                e_c1: f(2)?,
                e_c2: f(3)?,
                e_p: f(4)?,
                e_total: f(5)?,
                t_c: f(6)?,
                t_p: f(7)?,
                t_total: f(8)?,
                energy_cap_exceeded: b(30)?,
                delay_cap_exceeded: b(31)?,
            },
            q_total: u(9)?,
            lyapunov: f(10)?,
            drift: f(11)?,
            l_cost: f(12)?,
            drift_bound: f(13)?,
            penalty_bound: f(14)?,
            offered_bits: u(15)?,
            offloaded_bits: u(16)?,
            forwarded_bits: u(17)?,
            deferred_bits: u(18)?,
            rejected_bits: u(19)?,
            served_bits: u(20)?,
            unassigned_services: u(21)? as usize,
            overloaded_candidates: u(22)? as usize,
            tx_power: f(23)?,
            rate_bps: f(24)?,
            flag_queue_bound: b(25)?,
            flag_admission_rate: b(26)?,
            flag_rate_cap: b(27)?,
            flag_energy_cap: b(28)?,
            flag_delay_cap: b(29)?,
            queues,
        })
    }
}

/// Reads a per-slot CSV written by this engine.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<SlotMetrics>, EngineError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    for (i, name) in FIXED_COLUMNS.iter().enumerate() {
        if headers.get(i) != Some(name) {
            return Err(EngineError::Metrics(format!(
                "expected column {name} at position {i} (engine {ENGINE_VERSION})"
            )));
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(SlotMetrics::from_record(&rec?).map_err(EngineError::Metrics)?);
    }
    Ok(rows)
}

/// First slot `t ≥ window` from which the trailing moving average of
/// `series` stays within `tolerance` (relative) of its value at `t` for the
/// rest of the series, with at least `window` slots left to observe. The
/// moving average at `t` is the mean of `series[t − window .. t]`.
pub fn stabilization_slot(series: &[f64], window: usize, tolerance: f64) -> Option<usize> {
    assert!(window >= 2, "window must be at least 2");
    let n = series.len();
    if n < 2 * window {
        return None;
    }
    let mut ma = Vec::with_capacity(n + 1 - window);
    let mut sum: f64 = series[..window].iter().sum();
    ma.push(sum / window as f64);
    for t in window..n {
        sum += series[t] - series[t - window];
        ma.push(sum / window as f64);
    }
    // ma[j] is the average ending at slot window + j. Scan from the end,
    // tracking the range of the suffix.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut best = None;
    for j in (0..ma.len()).rev() {
        lo = lo.min(ma[j]);
        hi = hi.max(ma[j]);
        let t = window + j;
        if n - t < window {
            continue;
        }
        let slack = tolerance * ma[j].abs() + 1e-12;
        if hi - ma[j] <= slack && ma[j] - lo <= slack {
            best = Some(t);
        }
    }
    best
}

/// Summary statistics recomputable from the per-slot rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub slots: usize,
    /// `(1/T) Σ_t Cost(t)`.
    pub avg_cost: f64,
    /// `(1/T) Σ_t Σ_i Q_i(t)`.
    pub avg_q_total: f64,
    pub max_server_queue: Bits,
    pub total_offloaded_bits: Bits,
    pub total_deferred_bits: Bits,
    pub total_rejected_bits: Bits,
    pub stabilization_slot: Option<usize>,
    pub queue_bound_violations: usize,
    pub admission_rate_flags: usize,
    pub rate_cap_violations: usize,
    pub energy_cap_violations: usize,
    pub delay_cap_violations: usize,
}

#[derive(Default)]
struct SummaryAcc {
    cost_sum: f64,
    q_sum: f64,
    max_queue: Bits,
    offloaded: Bits,
    deferred: Bits,
    rejected: Bits,
    q_series: Vec<f64>,
    flags: [usize; 5],
}

impl SummaryAcc {
    fn push(&mut self, r: &SlotMetrics) {
        self.cost_sum += r.cost.cost;
        self.q_sum += r.q_total as f64;
        self.max_queue = self.max_queue.max(r.queues.iter().copied().max().unwrap_or(0));
        self.offloaded += r.offloaded_bits;
        self.deferred += r.deferred_bits;
        self.rejected += r.rejected_bits;
        self.q_series.push(r.q_total as f64);
        let flags = [
            r.flag_queue_bound,
            r.flag_admission_rate,
            r.flag_rate_cap,
            r.flag_energy_cap,
            r.flag_delay_cap,
        ];
        for (count, f) in self.flags.iter_mut().zip(flags) {
            *count += usize::from(f);
        }
    }

    fn finish(self) -> RunSummary {
        let n = self.q_series.len();
        let denom = n.max(1) as f64;
        RunSummary {
            slots: n,
            avg_cost: self.cost_sum / denom,
            avg_q_total: self.q_sum / denom,
            max_server_queue: self.max_queue,
            total_offloaded_bits: self.offloaded,
            total_deferred_bits: self.deferred,
            total_rejected_bits: self.rejected,
            stabilization_slot: stabilization_slot(
                &self.q_series,
                STABILIZATION_WINDOW,
                STABILIZATION_TOLERANCE,
            ),
            queue_bound_violations: self.flags[0],
            admission_rate_flags: self.flags[1],
            rate_cap_violations: self.flags[2],
            energy_cap_violations: self.flags[3],
            delay_cap_violations: self.flags[4],
        }
    }
}

impl RunSummary {
    pub fn from_rows(rows: &[SlotMetrics]) -> Self {
        let mut acc = SummaryAcc::default();
        rows.iter().for_each(|r| acc.push(r));
        acc.finish()
    }
}

/// Whether the reference-scale link and servers can carry the configured demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsReport {
    pub min_rate_bps: f64,
    pub max_rate_bps: f64,
    /// Bits the shared link carries in one slot at the lowest device power.
    pub link_bits_per_slot_min: f64,
    pub expected_offered_bits_per_slot: f64,
    pub total_service_bits_per_slot: u64,
    /// Expected offered bits over total `μ_max`.
    pub service_load: f64,
    /// Expected offered bits over the link's per-slot capacity at minimum power.
    pub link_load: f64,
    pub feasible: bool,
    pub notes: Vec<String>,
}

pub fn physics_report(cfg: &SystemConfig) -> PhysicsReport {
    let gain = match cfg.radio.channel_gain {
        ChannelGain::Fixed { gain_db } => gain_db,
        ChannelGain::LogNormal { mean_db, .. } => mean_db,
    };
    let (p_min, p_max) = match cfg.radio.tx_power {
        TxPower::Fixed { watts } => (watts, watts),
        TxPower::Uniform {
            min_watts,
            max_watts,
        } => (min_watts, max_watts),
    };
    let rate = |p: f64| {
        let snr = p * db_to_linear(gain) / cfg.radio.noise_power;
        cfg.radio.bandwidth_hz * (1.0 + snr).log2()
    };
    let mean_size =
        cfg.catalog.sizes.iter().sum::<Bits>() as f64 / cfg.service_count().max(1) as f64;
    let requests: f64 = cfg
        .servers
        .iter()
        .map(|s| match cfg.request_model.mode {
            DemandMode::Stochastic if s.covered_users > 0 => cfg
                .request_model
                .poisson_mean
                .unwrap_or(s.covered_users as f64),
            _ => s.covered_users as f64,
        })
        .sum();
    let offered = requests * mean_size;
    let service: u64 = cfg.servers.iter().map(|s| s.max_service_rate).sum();
    let (r_min, r_max) = (rate(p_min), rate(p_max));
    let link_bits = r_min * cfg.slot_duration;
    let service_load = offered / service as f64;
    let link_load = offered / link_bits;
    let mut notes = Vec::new();
    if service_load >= 1.0 {
        notes.push(format!(
            "expected demand {offered:.0} bits/slot meets or exceeds total service capacity {service} bits/slot"
        ));
    }
    if link_load >= 1.0 {
        notes.push(format!(
            "expected demand {offered:.0} bits/slot exceeds the {link_bits:.0} bits one slot carries at minimum power"
        ));
    }
    PhysicsReport {
        min_rate_bps: r_min,
        max_rate_bps: r_max,
        link_bits_per_slot_min: link_bits,
        expected_offered_bits_per_slot: offered,
        total_service_bits_per_slot: service,
        service_load,
        link_load,
        feasible: notes.is_empty(),
        notes,
    }
}

/// One run in progress.
pub struct Simulation<'a> {
    cfg: &'a SystemConfig,
    policy: Policy,
    seed: u64,
    ctx: CollaborationContext,
    hops: Vec<Vec<Option<usize>>>,
    b: f64,
    max_rates: Vec<Bits>,
    queues: QueueState,
    carry: Vec<Vec<u64>>,
    last: Vec<ServerStep>,
    t: usize,
}

impl<'a> Simulation<'a> {
    pub fn new(cfg: &'a SystemConfig, policy: Policy, seed: u64) -> Result<Self, EngineError> {
        let report = validate_config(cfg);
        if !report.is_ok() {
            let list: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
            return Err(EngineError::Invalid(list.join("; ")));
        }
        let m = cfg.server_count();
        let k = cfg.service_count();
        let max_rates: Vec<Bits> = cfg.servers.iter().map(|s| s.max_service_rate).collect();
        let max_arrivals: Vec<Bits> = cfg.servers.iter().map(|s| s.max_arrival).collect();
        Ok(Self {
            cfg,
            policy,
            seed,
            ctx: CollaborationContext::from_config(cfg),
            hops: cfg.hop_distances(),
            b: drift_bound_b(&max_rates, &max_arrivals),
            max_rates,
            queues: QueueState::empty(m, k),
            carry: vec![vec![0; k]; m],
            last: Vec::new(),
            t: 0,
        })
    }

    pub fn drift_constant(&self) -> f64 {
        self.b
    }

    pub fn queues(&self) -> &QueueState {
        &self.queues
    }

    pub fn slot(&self) -> usize {
        self.t
    }

    /// Per-server rate, drained bits and admitted bits of the last slot run.
    pub fn last_transition(&self) -> &[ServerStep] {
        &self.last
    }

    fn demand(&self) -> SlotDemand {
        let cfg = self.cfg;
        let p = request_probabilities(&cfg.request_model, cfg.service_count(), self.t);
        let mut counts = request_counts(cfg, &p, self.t, self.seed);
        for (row, carry) in counts.iter_mut().zip(&self.carry) {
            for (n, c) in row.iter_mut().zip(carry) {
                *n += c;
            }
        }
        SlotDemand::from_counts(cfg, self.t, p, counts)
    }

    fn problem(
        &self,
        demand: &SlotDemand,
        rate: f64,
        waits: &mut [Vec<f64>],
    ) -> Result<(MatchProblem, usize), CostError> {
        let cfg = self.cfg;
        let (m, k) = (cfg.server_count(), cfg.service_count());
        let v = cfg.control_v;
        let theta = cfg.weight_theta;
        let volume: Vec<Bits> = (0..k).map(|s| demand.service_volume(s)).collect();
        let mut candidates = Vec::new();
        let mut overloaded = 0;
        for s in (0..k).filter(|&s| volume[s] > 0) {
            let arrival = per_second(
                demand.service_requests(s) as f64
                    * cfg.catalog.per_user_intensity[s]
                    * cfg.catalog.sizes[s] as f64,
                cfg.slot_duration,
            );
            for i in (0..m).filter(|&i| cfg.servers[i].cached_services[s]) {
                let service = per_second(self.max_rates[i] as f64, cfg.slot_duration);
                let Ok(wait) = mm1_wait(service, arrival) else {
                    overloaded += 1;
                    continue;
                };
                waits[i][s] = wait;
                let (e, d) = local_terms(cfg, &self.ctx, demand, i, s, rate, wait)?;
                let q = self.queues.service_backlog(i, s);
                candidates.push(Candidate {
                    server: i,
                    service: s,
                    cost: decision_cost(v, theta, e, d, q, volume[s]),
                    penalty: decision_cost(v, theta, e, d, 0, 0),
                });
            }
        }
        let requester = (0..k)
            .map(|s| {
                (volume[s] > 0).then(|| {
                    (0..m)
                        .max_by_key(|&i| (demand.bits[i][s], std::cmp::Reverse(i)))
                        .expect("m >= 1")
                })
            })
            .collect();
        Ok((
            MatchProblem {
                servers: m,
                services: k,
                candidates,
                demand: volume,
                backlog: self.queues.totals(),
                max_queue: cfg.servers.iter().map(|s| s.max_queue).collect(),
                max_arrival: cfg.servers.iter().map(|s| s.max_arrival).collect(),
                requester,
                hops: self.hops.clone(),
            },
            overloaded,
        ))
    }

    /// Runs one slot.
    pub fn step(&mut self) -> Result<SlotMetrics, EngineError> {
        let t = self.t;
        let cfg = self.cfg;
        let (m, k) = (cfg.server_count(), cfg.service_count());
        let invariant = |message: String| EngineError::Invariant { slot: t, message };
        let cost_err = |source| EngineError::Cost { slot: t, source };

        let demand = self.demand();
        let (tx_power, rate) = sample_radio(cfg, self.seed, t).map_err(cost_err)?;
        let mut host_waits = vec![vec![f64::NAN; k]; m];
        let (problem, overloaded) = self.problem(&demand, rate, &mut host_waits).map_err(cost_err)?;

        let decision = self
            .policy
            .decide(&problem, derive_seed(&[self.seed, POLICY_STREAM, t as u64]))
            .map_err(|source| EngineError::Policy { slot: t, source })?;
        check_decision(&problem, &decision).map_err(invariant)?;

        let keep: Vec<bool> = decision.hosts.iter().map(Option::is_some).collect();
        let served = demand.restricted_to(&keep);
        let mut waits = vec![vec![0.0; k]; m];
        let mut arrivals = vec![vec![0; k]; m];
        let mut forwarded = 0;
        for (s, host) in decision.hosts.iter().enumerate() {
            if let Some(h) = *host {
                arrivals[h][s] = problem.demand[s];
                for i in 0..m {
                    waits[i][s] = host_waits[h][s];
                    if i != h {
                        forwarded += served.bits[i][s];
                    }
                }
            }
        }
        let cost = evaluate(cfg, &self.ctx, &served, &decision.x, rate, &waits).map_err(cost_err)?;

        for (s, keep) in keep.iter().enumerate() {
            for i in 0..m {
                self.carry[i][s] = if *keep { 0 } else { demand.counts[i][s] };
            }
        }

        let before = self.queues.totals();
        let per_server = self
            .queues
            .step(&arrivals, &self.max_rates)
            .map_err(|source| EngineError::Queue { slot: t, source })?;
        let after = self.queues.totals();
        let admitted: Vec<Bits> = per_server.iter().map(|s| s.arrivals).collect();
        let rates: Vec<Bits> = per_server.iter().map(|s| s.rate).collect();
        let snap = LyapunovSnapshot::new(
            self.b,
            cfg.control_v,
            cost.cost,
            &before,
            &after,
            &admitted,
            &rates,
        )
        .map_err(|e| invariant(e.to_string()))?;

        if !snap.drift_bound_holds(BOUND_TOLERANCE) {
            return Err(invariant(format!(
                "drift {} exceeds its bound {}",
                snap.drift, snap.drift_rhs
            )));
        }
        if !snap.penalty_bound_holds(BOUND_TOLERANCE) {
            return Err(invariant(format!(
                "drift-plus-penalty {} exceeds its bound {}",
                snap.l_cost, snap.upper_bound
            )));
        }
        for i in 0..m {
            if (after[i] as i128) < before[i] as i128 + admitted[i] as i128 - rates[i] as i128 {
                return Err(invariant(format!("server {i}: telescoping bound broken")));
            }
            if admitted[i] > cfg.servers[i].max_arrival {
                return Err(invariant(format!(
                    "server {i}: admitted {} bits above its arrival cap",
                    admitted[i]
                )));
            }
            if before[i] + admitted[i] > cfg.servers[i].max_queue {
                return Err(invariant(format!("server {i}: admission guard breached")));
            }
        }
        let parts = [cost.e_c1, cost.e_c2, cost.e_p, cost.t_c, cost.t_p];
        if parts.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(invariant(format!("negative or non-finite cost term in {parts:?}")));
        }

        let total_demand = demand.total_bits();
        let offloaded = served.total_bits();
        let metrics = SlotMetrics {
            t,
            cost,
            q_total: before.iter().sum(),
            lyapunov: snap.value,
            drift: snap.drift,
            l_cost: snap.l_cost,
            drift_bound: snap.drift_rhs,
            penalty_bound: snap.upper_bound,
            offered_bits: total_demand,
            offloaded_bits: offloaded,
            forwarded_bits: forwarded,
            deferred_bits: total_demand - offloaded,
            rejected_bits: demand.rejected.iter().sum(),
            served_bits: per_server.iter().map(|s| s.served).sum(),
            unassigned_services: decision.unassigned.len(),
            overloaded_candidates: overloaded,
            tx_power,
            rate_bps: rate,
            flag_queue_bound: (0..m).any(|i| after[i] > cfg.servers[i].max_queue),
            flag_admission_rate: (0..m).any(|i| admitted[i] > rates[i]),
            flag_rate_cap: (0..m).any(|i| rates[i] > self.max_rates[i]),
            flag_energy_cap: cost.energy_cap_exceeded,
            flag_delay_cap: cost.delay_cap_exceeded,
            queues: before,
        };
        self.last = per_server;
        self.t += 1;
        Ok(metrics)
    }
}

/// Run metadata: everything except the per-slot rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub engine_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub policy: Policy,
    pub drift_constant: f64,
    pub summary: RunSummary,
    pub physics: PhysicsReport,
    pub config: SystemConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub meta: RunMeta,
    pub rows: Vec<SlotMetrics>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const META_FILE: &str = "meta.json";

fn run_inner(
    cfg: &SystemConfig,
    policy: Policy,
    seed: u64,
    mut sink: impl FnMut(&SlotMetrics) -> Result<(), EngineError>,
) -> Result<RunMeta, EngineError> {
    let mut sim = Simulation::new(cfg, policy, seed)?;
    let mut acc = SummaryAcc::default();
    for _ in 0..cfg.slot_count {
        let row = sim.step()?;
        acc.push(&row);
        sink(&row)?;
    }
    Ok(RunMeta {
        engine_version: ENGINE_VERSION.to_string(),
        config_hash: cfg.config_hash(),
        seed,
        policy,
        drift_constant: sim.drift_constant(),
        summary: acc.finish(),
        physics: physics_report(cfg),
        config: cfg.clone(),
    })
}

/// Runs `cfg.slot_count` slots and keeps every row in memory.
pub fn run(cfg: &SystemConfig, policy: Policy, seed: u64) -> Result<RunRecord, EngineError> {
    let mut rows = Vec::with_capacity(cfg.slot_count);
    let meta = run_inner(cfg, policy, seed, |r| {
        rows.push(r.clone());
        Ok(())
    })?;
    Ok(RunRecord { meta, rows })
}

fn metrics_writer(dir: &Path, m: usize) -> Result<csv::Writer<BufWriter<File>>, EngineError> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(METRICS_FILE))?));
    w.write_record(metrics_header(m))?;
    Ok(w)
}

fn write_meta(dir: &Path, meta: &RunMeta) -> Result<(), EngineError> {
    let mut f = BufWriter::new(File::create(dir.join(META_FILE))?);
    serde_json::to_writer_pretty(&mut f, meta)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Runs and streams rows to `dir/metrics.csv`, flushing every 256 slots,
/// then writes `dir/meta.json`.
pub fn run_to_dir(cfg: &SystemConfig, policy: Policy, seed: u64, dir: &Path) -> Result<RunMeta, EngineError> {
    let mut w = metrics_writer(dir, cfg.server_count())?;
    let meta = run_inner(cfg, policy, seed, |r| {
        w.write_record(r.to_record())?;
        if r.t % 256 == 255 {
            w.flush()?;
        }
        Ok(())
    })?;
    w.flush()?;
    write_meta(dir, &meta)?;
    Ok(meta)
}

impl RunRecord {
    /// Writes `metrics.csv` and `meta.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), EngineError> {
        let mut w = metrics_writer(dir, self.meta.config.server_count())?;
        for r in &self.rows {
            w.write_record(r.to_record())?;
        }
        w.flush()?;
        write_meta(dir, &self.meta)
    }

    pub fn q_series(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.q_total as f64).collect()
    }

    pub fn stabilization_slot(&self, window: usize, tolerance: f64) -> Option<usize> {
        stabilization_slot(&self.q_series(), window, tolerance)
    }
}

pub fn read_meta(dir: &Path) -> Result<RunMeta, EngineError> {
    let text = std::fs::read_to_string(dir.join(META_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    ControlV,
    PoissonMean,
    WeightTheta,
    QMax,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::ControlV => "control_V",
            SweepAxis::PoissonMean => "poisson_mean",
            SweepAxis::WeightTheta => "weight_theta",
            SweepAxis::QMax => "Q_max",
        }
    }

    pub fn apply(self, cfg: &mut SystemConfig, value: f64) {
        match self {
            SweepAxis::ControlV => cfg.control_v = value,
            SweepAxis::PoissonMean => cfg.request_model.poisson_mean = Some(value),
            SweepAxis::WeightTheta => cfg.weight_theta = value,
            SweepAxis::QMax => cfg
                .servers
                .iter_mut()
                .for_each(|s| s.max_queue = value.round().max(0.0) as Bits),
        }
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "control_V" | "control_v" | "V" => Ok(SweepAxis::ControlV),
            "poisson_mean" | "lambda" => Ok(SweepAxis::PoissonMean),
            "weight_theta" | "weight_θ" | "theta" => Ok(SweepAxis::WeightTheta),
            "Q_max" | "q_max" | "max_queue" => Ok(SweepAxis::QMax),
            other => Err(format!(
                "unknown sweep axis {other:?}, expected control_V, poisson_mean, weight_theta or Q_max"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub policies: Vec<Policy>,
    pub seeds: Vec<u64>,
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
}

/// Seed of one sweep run, derived from the base seed, the index of the axis
/// value and the policy's position in [`Policy::ALL`].
pub fn sweep_seed(base_seed: u64, value_index: usize, policy: Policy) -> u64 {
    let p = Policy::ALL.iter().position(|&x| x == policy).expect("listed") as u64;
    derive_seed(&[base_seed, value_index as u64, p])
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub value_index: usize,
    pub value: f64,
    pub policy: Policy,
    pub base_seed: u64,
    pub run_seed: u64,
    pub dir: Option<PathBuf>,
    pub outcome: Result<RunRecord, String>,
}

pub const SWEEP_SUMMARY_FILE: &str = "summary.csv";

fn run_dir(root: &Path, axis: SweepAxis, vi: usize, policy: Policy, seed: u64) -> PathBuf {
    root.join(format!("{}-{vi}", axis.name()))
        .join(policy.name())
        .join(format!("seed-{seed}"))
}

/// Runs the Cartesian product values × policies × seeds. With `out`, each
/// run's files are written as soon as it finishes and a combined
/// `summary.csv` is written at the end. A failing run is recorded in its
/// [`SweepRun::outcome`] and does not stop the others.
pub fn sweep(base: &SystemConfig, spec: &SweepSpec, out: Option<&Path>) -> Result<Vec<SweepRun>, EngineError> {
    let mut jobs = Vec::new();
    for (vi, &value) in spec.values.iter().enumerate() {
        for &policy in &spec.policies {
            for &base_seed in &spec.seeds {
                jobs.push((vi, value, policy, base_seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.threads.unwrap_or(0))
        .build()
        .map_err(|e| EngineError::Io(std::io::Error::other(e.to_string())))?;
    let runs: Vec<SweepRun> = pool.install(|| {
        jobs.par_iter()
            .map(|&(vi, value, policy, base_seed)| {
                let mut cfg = base.clone();
                spec.axis.apply(&mut cfg, value);
                let run_seed = sweep_seed(base_seed, vi, policy);
                let dir = out.map(|o| run_dir(o, spec.axis, vi, policy, base_seed));
                let outcome = run(&cfg, policy, run_seed).and_then(|rec| {
                    if let Some(d) = &dir {
                        rec.write_dir(d)?;
                    }
                    Ok(rec)
                });
                SweepRun {
                    value_index: vi,
                    value,
                    policy,
                    base_seed,
                    run_seed,
                    dir,
                    outcome: outcome.map_err(|e| e.to_string()),
                }
            })
            .collect()
    });
    if let Some(o) = out {
        write_sweep_summary(&o.join(SWEEP_SUMMARY_FILE), spec.axis, &runs)?;
    }
    Ok(runs)
}

pub const SWEEP_COLUMNS: [&str; 14] = [
    "axis",
    "value",
    "policy",
    "base_seed",
    "run_seed",
    "status",
    "avg_cost",
    "avg_q_total",
    "max_server_queue",
    "total_offloaded_bits",
    "total_deferred_bits",
    "total_rejected_bits",
    "stabilization_slot",
    "error",
];

pub fn write_sweep_summary(path: &Path, axis: SweepAxis, runs: &[SweepRun]) -> Result<(), EngineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in runs {
        let head = [
            axis.name().to_string(),
            r.value.to_string(),
            r.policy.name().to_string(),
            r.base_seed.to_string(),
            r.run_seed.to_string(),
        ];
        let tail: Vec<String> = match &r.outcome {
            Ok(rec) => {
                let s = &rec.meta.summary;
                vec![
                    "ok".into(),
                    s.avg_cost.to_string(),
                    s.avg_q_total.to_string(),
                    s.max_server_queue.to_string(),
                    s.total_offloaded_bits.to_string(),
                    s.total_deferred_bits.to_string(),
                    s.total_rejected_bits.to_string(),
                    s.stabilization_slot.map(|x| x.to_string()).unwrap_or_default(),
                    String::new(),
                ]
            }
            Err(e) => {
                let mut v = vec!["failed".to_string()];
                v.extend(std::iter::repeat_n(String::new(), 7));
                v.push(e.clone());
                v
            }
        };
        w.write_record(head.iter().chain(&tail))?;
    }
    w.flush()?;
    Ok(())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &p in &idx[i..=j] {
                r[p] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
