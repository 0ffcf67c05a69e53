//! Energy and delay terms of the per-slot system cost.
//!
//! Energy has three parts: device to server (`E^c1`), server to server
//! forwarding over `H_k` hops (`E^c2`) and processing (`E^p`). Delay has a
//! communication part over one shared Shannon-rate link (`T^c`) and a
//! computation part built from M/M/1 waits (`T^p`). Processing and
//! computation terms are summed over every server and every *active* service,
//! i.e. every service with nonzero demand in the slot.
//!
//! Decision matrices are indexed `[server][service]`; `true` means the server
//! hosts the service this slot.

use serde::Serialize;
use thiserror::Error;

use crate::domain::{CollaborationScope, ProcessingEnergyMode, SystemConfig};
use crate::workload::SlotDemand;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("negative signal-to-noise ratio {0}")]
    NegativeSnr(f64),
    #[error("link outage: rate is zero with {bits} bits to send")]
    LinkOutage { bits: u64 },
    #[error("M/M/1 overload: arrival rate {arrival} >= service rate {service}")]
    Overload { service: f64, arrival: f64 },
    #[error("no waiting time defined for server {server}, service {service}")]
    UndefinedWait { server: usize, service: usize },
}

/// Collaboration-area quantities shared by all cost terms of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollaborationContext {
    /// `O_k`, servers in the collaboration area of each service.
    pub area_servers: Vec<usize>,
    /// `H_k = O_k − 1`.
    pub hops: Vec<u64>,
    /// `P_c = Ā_i / K` per server.
    pub hit: Vec<f64>,
}

impl CollaborationContext {
    pub fn new(area_servers: Vec<usize>, hit: Vec<f64>) -> Self {
        let hops = area_servers
            .iter()
            .map(|&o| o.saturating_sub(1) as u64)
            .collect();
        Self {
            area_servers,
            hops,
            hit,
        }
    }

    pub fn from_config(cfg: &SystemConfig) -> Self {
        let k = cfg.service_count() as f64;
        let hit = cfg
            .servers
            .iter()
            .map(|s| s.cached_count() as f64 / k)
            .collect();
        let area = match cfg.collaboration {
            CollaborationScope::Providers => cfg.provider_counts(),
            CollaborationScope::HopRadius { hops } => {
                let dist = cfg.hop_distances();
                (0..cfg.service_count())
                    .map(|k| {
                        dist.iter()
                            .map(|row| {
                                row.iter()
                                    .enumerate()
                                    .filter(|(j, d)| {
                                        cfg.servers[*j].cached_services[k]
                                            && d.is_some_and(|d| d <= hops)
                                    })
                                    .count()
                            })
                            .max()
                            .unwrap_or(0)
                    })
                    .collect()
            }
        };
        Self::new(area, hit)
    }

    /// `P_nc = (K − Ā_i) / K`.
    pub fn miss(&self, server: usize) -> f64 {
        1.0 - self.hit[server]
    }
}

fn active(d: &SlotDemand, k: usize) -> bool {
    d.service_volume(k) > 0
}

fn x_of(x: &[Vec<bool>], i: usize, k: usize) -> f64 {
    if x[i][k] {
        1.0
    } else {
        0.0
    }
}

/// `E^c1 = Σ_i Σ_k n_i^k b_k e_u`.
pub fn energy_device_to_server(d: &SlotDemand, e_u: f64) -> f64 {
    d.bits.iter().flatten().map(|&b| b as f64 * e_u).sum()
}

/// `E^c2 = Σ_i Σ_k n_i^k b_k e_s H_k (1 − x_i^k)`.
pub fn energy_server_to_server(
    d: &SlotDemand,
    x: &[Vec<bool>],
    ctx: &CollaborationContext,
    e_s: f64,
) -> f64 {
    let mut total = 0.0;
    for (i, row) in d.bits.iter().enumerate() {
        for (k, &b) in row.iter().enumerate() {
            total += b as f64 * e_s * ctx.hops[k] as f64 * (1.0 - x_of(x, i, k));
        }
    }
    total
}

/// `E^p = Σ_i Σ_k e_p A (P_c x_i^k + P_nc (1 − x_i^k) H_k)` where `A` is
/// `A_i(t)` or `A_i^k(t)` depending on `mode`.
pub fn energy_processing(
    d: &SlotDemand,
    x: &[Vec<bool>],
    ctx: &CollaborationContext,
    e_p: f64,
    mode: ProcessingEnergyMode,
) -> f64 {
    let mut total = 0.0;
    for i in 0..d.server_count() {
        for k in (0..d.service_count()).filter(|&k| active(d, k)) {
            total += processing_term(d, x_of(x, i, k), ctx, e_p, mode, i, k);
        }
    }
    total
}

fn processing_term(
    d: &SlotDemand,
    x: f64,
    ctx: &CollaborationContext,
    e_p: f64,
    mode: ProcessingEnergyMode,
    i: usize,
    k: usize,
) -> f64 {
    let volume = match mode {
        ProcessingEnergyMode::ServerArrivals => d.totals[i],
        ProcessingEnergyMode::ServiceArrivals => d.bits[i][k],
    } as f64;
    e_p * volume * (ctx.hit[i] * x + ctx.miss(i) * (1.0 - x) * ctx.hops[k] as f64)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// `r = B_w log2(1 + SNR)` in bits per second.
pub fn channel_rate(bandwidth_hz: f64, snr: f64) -> Result<f64, CostError> {
    if snr < 0.0 || snr.is_nan() {
        return Err(CostError::NegativeSnr(snr));
    }
    Ok(bandwidth_hz * (1.0 + snr).log2())
}

/// `T^c = Σ_i Σ_k n_i^k b_k / r`.
pub fn delay_communication(d: &SlotDemand, rate: f64) -> Result<f64, CostError> {
    let bits = d.total_bits();
    if bits == 0 {
        return Ok(0.0);
    }
    if rate <= 0.0 {
        return Err(CostError::LinkOutage { bits });
    }
    Ok(d.bits.iter().flatten().map(|&b| b as f64 / rate).sum())
}

/// Mean sojourn of an M/M/1 queue, `1 / (μ − λ)`, both in bits per second.
pub fn mm1_wait(service_rate: f64, arrival_rate: f64) -> Result<f64, CostError> {
    if arrival_rate >= service_rate {
        return Err(CostError::Overload {
            service: service_rate,
            arrival: arrival_rate,
        });
    }
    Ok(1.0 / (service_rate - arrival_rate))
}

/// Converts a per-slot volume to a per-second rate.
pub fn per_second(bits_per_slot: f64, slot_duration: f64) -> f64 {
    bits_per_slot / slot_duration
}

/// `T^p = Σ_i Σ_k P_c t x_i^k + H_k P_nc t (1 − x_i^k)` with `t = waits[i][k]`.
pub fn delay_computation(
    d: &SlotDemand,
    x: &[Vec<bool>],
    ctx: &CollaborationContext,
    waits: &[Vec<f64>],
) -> Result<f64, CostError> {
    let mut total = 0.0;
    for i in 0..d.server_count() {
        for k in (0..d.service_count()).filter(|&k| active(d, k)) {
            total += computation_term(x_of(x, i, k), ctx, waits, i, k)?;
        }
    }
    Ok(total)
}

fn computation_term(
    x: f64,
    ctx: &CollaborationContext,
    waits: &[Vec<f64>],
    i: usize,
    k: usize,
) -> Result<f64, CostError> {
    let t = waits[i][k];
    if !t.is_finite() || t < 0.0 {
        return Err(CostError::UndefinedWait {
            server: i,
            service: k,
        });
    }
    Ok(ctx.hit[i] * t * x + ctx.hops[k] as f64 * ctx.miss(i) * t * (1.0 - x))
}

/// Cost components of one slot and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct CostBreakdown {
    pub e_c1: f64,
    pub e_c2: f64,
    pub e_p: f64,
    pub t_c: f64,
    pub t_p: f64,
    pub e_total: f64,
    pub t_total: f64,
    pub cost: f64,
    pub energy_cap_exceeded: bool,
    pub delay_cap_exceeded: bool,
}

/// `Cost = θ E_total + (1 − θ) T_total`, flagging the per-slot caps.
#[allow(clippy::too_many_arguments)]
pub fn slot_cost(
    e_c1: f64,
    e_c2: f64,
    e_p: f64,
    t_c: f64,
    t_p: f64,
    theta: f64,
    energy_cap: f64,
    delay_cap: f64,
) -> CostBreakdown {
    let e_total = e_c1 + e_c2 + e_p;
    let t_total = t_c + t_p;
    CostBreakdown {
        e_c1,
        e_c2,
        e_p,
        t_c,
        t_p,
        e_total,
        t_total,
        cost: theta * e_total + (1.0 - theta) * t_total,
        energy_cap_exceeded: e_total > energy_cap,
        delay_cap_exceeded: t_total > delay_cap,
    }
}

/// Full breakdown for a decision matrix.
pub fn evaluate(
    cfg: &SystemConfig,
    ctx: &CollaborationContext,
    d: &SlotDemand,
    x: &[Vec<bool>],
    rate: f64,
    waits: &[Vec<f64>],
) -> Result<CostBreakdown, CostError> {
    let e = &cfg.energy;
    Ok(slot_cost(
        energy_device_to_server(d, e.device_to_server),
        energy_server_to_server(d, x, ctx, e.server_to_server),
        energy_processing(d, x, ctx, e.processing, cfg.processing_energy),
        delay_communication(d, rate)?,
        delay_computation(d, x, ctx, waits)?,
        cfg.weight_theta,
        cfg.energy_cap,
        cfg.delay_cap,
    ))
}

/// Energy and delay summands of one `(server, service)` pair on the local
/// branch `x_i^k = 1`: `E_i^k` and `T_i^k`.
pub fn local_terms(
    cfg: &SystemConfig,
    ctx: &CollaborationContext,
    d: &SlotDemand,
    server: usize,
    service: usize,
    rate: f64,
    wait: f64,
) -> Result<(f64, f64), CostError> {
    let bits = d.bits[server][service];
    let e = &cfg.energy;
    let mut energy = bits as f64 * e.device_to_server;
    let mut delay = if bits == 0 {
        0.0
    } else if rate <= 0.0 {
        return Err(CostError::LinkOutage { bits });
    } else {
        bits as f64 / rate
    };
    if active(d, service) {
        energy += processing_term(d, 1.0, ctx, e.processing, cfg.processing_energy, server, service);
        if !wait.is_finite() || wait < 0.0 {
            return Err(CostError::UndefinedWait { server, service });
        }
        delay += ctx.hit[server] * wait;
    }
    Ok((energy, delay))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn one_cell(n: u64, b: u64) -> (SystemConfig, SlotDemand) {
        let mut cfg = presets::small(1, 1, 0);
        cfg.catalog.sizes = vec![b];
        cfg.servers[0].max_arrival = u64::MAX / 4;
        let d = SlotDemand::from_counts(&cfg, 0, vec![1.0], vec![vec![n]]);
        (cfg, d)
    }

    fn ctx1(o: usize, hit: f64) -> CollaborationContext {
        CollaborationContext::new(vec![o], vec![hit])
    }

    #[test]
    fn device_energy() {
        let (_, d) = one_cell(10, 100);
        assert!((energy_device_to_server(&d, 1e-9) - 1e-6).abs() < 1e-21);
        let (_, z) = one_cell(0, 100);
        assert_eq!(energy_device_to_server(&z, 1e-9), 0.0);
        let (_, d2) = one_cell(20, 100);
        assert!((energy_device_to_server(&d2, 1e-9) - 2e-6).abs() < 1e-21);
    }

    #[test]
    fn forwarding_energy() {
        let (_, d) = one_cell(10, 100);
        let ctx = ctx1(3, 1.0);
        assert_eq!(energy_server_to_server(&d, &[vec![true]], &ctx, 1e-9), 0.0);
        let e = energy_server_to_server(&d, &[vec![false]], &ctx, 1e-9);
        assert!((e - 2e-6).abs() < 1e-21);
        let single = ctx1(1, 1.0);
        assert_eq!(energy_server_to_server(&d, &[vec![false]], &single, 1e-9), 0.0);
    }

    #[test]
    fn processing_energy() {
        let (_, d) = one_cell(10, 100); // A_i = 1000 bits
        let full = ctx1(3, 1.0);
        let e = energy_processing(&d, &[vec![true]], &full, 1e-9, ProcessingEnergyMode::ServerArrivals);
        assert!((e - 1e-6).abs() < 1e-21);
        let partial = ctx1(3, 0.4);
        let e = energy_processing(&d, &[vec![true]], &partial, 1e-9, ProcessingEnergyMode::ServerArrivals);
        assert!((e - 4e-7).abs() < 1e-21);
        let (_, z) = one_cell(0, 100);
        assert_eq!(
            energy_processing(&z, &[vec![true]], &partial, 1e-9, ProcessingEnergyMode::ServerArrivals),
            0.0
        );
    }

    #[test]
    fn processing_energy_modes_differ_only_with_several_services() {
        let mut cfg = presets::small(1, 2, 0);
        cfg.catalog.sizes = vec![10, 10];
        cfg.servers[0].max_arrival = 1 << 20;
        let d = SlotDemand::from_counts(&cfg, 0, vec![0.5, 0.5], vec![vec![3, 1]]);
        let ctx = CollaborationContext::new(vec![1, 1], vec![1.0]);
        let x = [vec![true, true]];
        let verbatim = energy_processing(&d, &x, &ctx, 1.0, ProcessingEnergyMode::ServerArrivals);
        let per_k = energy_processing(&d, &x, &ctx, 1.0, ProcessingEnergyMode::ServiceArrivals);
        assert_eq!(verbatim, 80.0);
        assert_eq!(per_k, 40.0);
    }

    #[test]
    fn shannon_rate() {
        assert_eq!(channel_rate(5.0, 1.0).unwrap(), 5.0);
        assert_eq!(channel_rate(5.0, 0.0).unwrap(), 0.0);
        let r = channel_rate(40e6, db_to_linear(20.0)).unwrap();
        let expected = 40e6 * 101f64.log2();
        assert!((r - expected).abs() < 1e-3);
        assert!((r - 2.663e8).abs() / 2.663e8 < 1e-3);
        assert!(matches!(channel_rate(1.0, -0.5), Err(CostError::NegativeSnr(_))));
    }

    #[test]
    fn communication_delay() {
        let (_, z) = one_cell(0, 100);
        assert_eq!(delay_communication(&z, 1e8).unwrap(), 0.0);
        assert_eq!(delay_communication(&z, 0.0).unwrap(), 0.0);
        let (_, d) = one_cell(10_000, 100); // 1e6 bits
        let t = delay_communication(&d, 1e8).unwrap();
        assert!((t - 0.01).abs() < 1e-15);
        let half = delay_communication(&d, 5e7).unwrap();
        assert!((half - 2.0 * t).abs() < 1e-15);
        assert_eq!(
            delay_communication(&d, 0.0),
            Err(CostError::LinkOutage { bits: 1_000_000 })
        );
    }

    #[test]
    fn mm1() {
        assert!((mm1_wait(1000.0, 600.0).unwrap() - 2.5e-3).abs() < 1e-18);
        assert_eq!(mm1_wait(1000.0, 0.0).unwrap(), 1e-3);
        assert!(matches!(mm1_wait(1000.0, 1000.0), Err(CostError::Overload { .. })));
    }

    #[test]
    fn computation_delay() {
        let (_, d) = one_cell(10, 100);
        let ctx = ctx1(3, 0.4);
        let t = delay_computation(&d, &[vec![true]], &ctx, &[vec![2.5e-3]]).unwrap();
        assert!((t - 1e-3).abs() < 1e-18);
        let miss = delay_computation(&d, &[vec![false]], &ctx, &[vec![2.5e-3]]).unwrap();
        assert!((miss - 2.0 * 0.6 * 2.5e-3).abs() < 1e-18);
        let zero_hops = ctx1(1, 0.4);
        assert_eq!(
            delay_computation(&d, &[vec![false]], &zero_hops, &[vec![2.5e-3]]).unwrap(),
            0.0
        );
        assert_eq!(
            delay_computation(&d, &[vec![true]], &ctx, &[vec![f64::INFINITY]]),
            Err(CostError::UndefinedWait {
                server: 0,
                service: 0
            })
        );
    }

    #[test]
    fn weighted_cost() {
        let c = slot_cost(10.0, 0.0, 0.0, 4.0, 0.0, 0.5, 100.0, 100.0);
        assert_eq!(c.cost, 7.0);
        assert_eq!(c.e_total, 10.0);
        assert_eq!(c.t_total, 4.0);
        assert_eq!(slot_cost(3.0, 2.0, 1.0, 4.0, 5.0, 1.0, 100.0, 100.0).cost, 6.0);
        assert_eq!(slot_cost(3.0, 2.0, 1.0, 4.0, 5.0, 0.0, 100.0, 100.0).cost, 9.0);
        let flagged = slot_cost(3.0, 2.0, 1.0, 4.0, 5.0, 0.5, 5.0, 9.0);
        assert!(flagged.energy_cap_exceeded);
        assert!(!flagged.delay_cap_exceeded);
    }

    #[test]
    fn all_local_has_no_forwarding_energy() {
        let cfg = presets::reference(6, 2);
        let ctx = CollaborationContext::from_config(&cfg);
        let d = crate::workload::slot_demand(&cfg, 0, 3);
        let x = vec![vec![true; cfg.service_count()]; cfg.server_count()];
        assert_eq!(energy_server_to_server(&d, &x, &ctx, 1.0), 0.0);
    }

    #[test]
    fn tenfold_scaling() {
        // Volumes scale E^c1, E^c2 and T^c linearly; E^p scales linearly in
        // the arrival volume; T^p is volume-free and scales with the waits.
        let mut cfg = presets::small(2, 2, 0);
        cfg.catalog.sizes = vec![7, 13];
        for s in &mut cfg.servers {
            s.max_arrival = u64::MAX / 1024;
        }
        let ctx = CollaborationContext::new(vec![2, 3], vec![0.5, 0.25]);
        let counts = vec![vec![3, 1], vec![2, 5]];
        let big: Vec<Vec<u64>> = counts.iter().map(|r| r.iter().map(|n| n * 10).collect()).collect();
        let d = SlotDemand::from_counts(&cfg, 0, vec![0.5, 0.5], counts);
        let d10 = SlotDemand::from_counts(&cfg, 0, vec![0.5, 0.5], big);
        let x = vec![vec![true, false], vec![false, true]];
        let waits = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        let waits10: Vec<Vec<f64>> = waits.iter().map(|r| r.iter().map(|w| w * 10.0).collect()).collect();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
        assert!(close(energy_device_to_server(&d10, 1.0), 10.0 * energy_device_to_server(&d, 1.0)));
        assert!(close(energy_server_to_server(&d10, &x, &ctx, 1.0), 10.0 * energy_server_to_server(&d, &x, &ctx, 1.0)));
        let m = ProcessingEnergyMode::ServerArrivals;
        assert!(close(energy_processing(&d10, &x, &ctx, 1.0, m), 10.0 * energy_processing(&d, &x, &ctx, 1.0, m)));
        assert!(close(delay_communication(&d10, 3.0).unwrap(), 10.0 * delay_communication(&d, 3.0).unwrap()));
        assert!(close(
            delay_computation(&d, &x, &ctx, &waits10).unwrap(),
            10.0 * delay_computation(&d, &x, &ctx, &waits).unwrap()
        ));
        // energy constants enter linearly
        assert!(close(energy_device_to_server(&d, 10.0), 10.0 * energy_device_to_server(&d, 1.0)));
    }

    #[test]
    fn monotone_in_demand() {
        let mut cfg = presets::small(2, 2, 0);
        for s in &mut cfg.servers {
            s.max_arrival = 1 << 30;
        }
        let ctx = CollaborationContext::new(vec![2, 2], vec![0.5, 0.5]);
        let x = vec![vec![true, false], vec![false, true]];
        let waits = vec![vec![0.1; 2]; 2];
        let mut last = 0.0;
        for n in 0..20u64 {
            let d = SlotDemand::from_counts(&cfg, 0, vec![0.5, 0.5], vec![vec![n, 1], vec![2, n]]);
            let c = evaluate(&cfg, &ctx, &d, &x, 1e3, &waits).unwrap();
            assert!(c.cost >= last);
            last = c.cost;
        }
    }
}
