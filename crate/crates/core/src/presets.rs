//! Ready-made configurations.
//!
//! [`reference`] is the standard evaluation setting at desk scale:
//! ten services, 50 users per small base station, a 100 m square with 15 m
//! and 30 m ranges, 1000 slots of 1 ms, a 40 MHz link at 20 dB gain, device
//! power uniform on [0.01, 1] W, Poisson demand with mean 20, `θ = 0.5` and a
//! 4000-bit queue bound. Quantities the setting leaves open (service sizes,
//! processing rates, energy constants, caching) are drawn or fixed here.
//!
//! [`small`] is a minimal valid configuration for unit tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{
    ChannelGain, CollaborationScope, EdgeServerSpec, EnergyConfig, Position,
    ProcessingEnergyMode, RadioConfig, ServiceCatalog, SystemConfig, TxPower,
};
use crate::topology::{generate_topology, TopologyParams};
use crate::workload::{DemandMode, RequestKind, RequestModel};

pub const REFERENCE_SERVICES: usize = 10;
pub const REFERENCE_USERS_PER_SERVER: u32 = 50;
pub const REFERENCE_QUEUE_BOUND: u64 = 4000;

pub fn reference_topology(m: usize) -> TopologyParams {
    TopologyParams {
        server_intensity: m as f64 / 10_000.0,
        user_intensity: 0.0,
        width: 100.0,
        height: 100.0,
        user_range: 15.0,
        server_range: 30.0,
        server_count: Some(m),
    }
}

/// The standard evaluation setting with `m` servers placed by a conditioned PPP.
pub fn reference(m: usize, seed: u64) -> SystemConfig {
    let k = REFERENCE_SERVICES;
    let topo = generate_topology(seed, &reference_topology(m)).expect("m >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);

    let sizes: Vec<u64> = (0..k).map(|_| rng.gen_range(6..=14)).collect();
    let mut cached: Vec<Vec<bool>> = (0..m)
        .map(|_| {
            let mut ids: Vec<usize> = (0..k).collect();
            ids.shuffle(&mut rng);
            let n = rng.gen_range(2..=9);
            let mut row = vec![false; k];
            ids[..n].iter().for_each(|&s| row[s] = true);
            row
        })
        .collect();
    for s in 0..k {
        if !cached.iter().any(|row| row[s]) {
            let i = rng.gen_range(0..m);
            cached[i][s] = true;
        }
    }

    let servers = topo
        .servers
        .iter()
        .zip(cached)
        .enumerate()
        .map(|(id, (&position, cached_services))| {
            let used: u64 = cached_services
                .iter()
                .zip(&sizes)
                .filter(|(f, _)| **f)
                .map(|(_, b)| b)
                .sum();
            EdgeServerSpec {
                id,
                cache_capacity: used.div_ceil(10) * 10 + 10,
                cached_services,
                max_service_rate: rng.gen_range(200..=350),
                max_arrival: 2000,
                max_queue: REFERENCE_QUEUE_BOUND,
                covered_users: REFERENCE_USERS_PER_SERVER,
                position,
            }
        })
        .collect();

    SystemConfig {
        servers,
        catalog: ServiceCatalog {
            sizes,
            per_user_intensity: vec![0.002; k],
        },
        radio: RadioConfig {
            bandwidth_hz: 40e6,
            tx_power: TxPower::Uniform {
                min_watts: 0.01,
                max_watts: 1.0,
            },
            channel_gain: ChannelGain::Fixed { gain_db: 20.0 },
            noise_power: 1.0,
        },
        energy: EnergyConfig {
            device_to_server: 0.01,
            server_to_server: 0.01,
            processing: 1.0,
        },
        control_v: 1300.0,
        weight_theta: 0.5,
        slot_count: 1000,
        slot_duration: 1e-3,
        rng_seed: seed,
        energy_cap: 1e9,
        delay_cap: 1.0,
        request_model: RequestModel {
            kind: RequestKind::RotatingZipf,
            zipf_exponent: 0.8,
            rotation_period: 200,
            modulation_depth: 0.5,
            poisson_mean: Some(20.0),
            mode: DemandMode::Stochastic,
        },
        user_range: 15.0,
        server_range: 30.0,
        collaboration: CollaborationScope::Providers,
        processing_energy: ProcessingEnergyMode::ServerArrivals,
    }
}

/// `m` servers on a line 10 m apart, each caching all `k` services of 10
/// bits, with generous capacities and expectation-mode static Zipf demand.
pub fn small(m: usize, k: usize, seed: u64) -> SystemConfig {
    let sizes = vec![10; k];
    let servers = (0..m)
        .map(|id| EdgeServerSpec {
            id,
            cache_capacity: 10 * k as u64,
            cached_services: vec![true; k],
            max_service_rate: 1000,
            max_arrival: 10_000,
            max_queue: 100_000,
            covered_users: 10,
            position: Position::new(10.0 * id as f64, 0.0),
        })
        .collect();
    SystemConfig {
        servers,
        catalog: ServiceCatalog {
            sizes,
            per_user_intensity: vec![0.01; k],
        },
        radio: RadioConfig {
            bandwidth_hz: 1e6,
            tx_power: TxPower::Fixed { watts: 1.0 },
            channel_gain: ChannelGain::Fixed { gain_db: 20.0 },
            noise_power: 1.0,
        },
        energy: EnergyConfig {
            device_to_server: 1e-3,
            server_to_server: 1e-3,
            processing: 1e-3,
        },
        control_v: 100.0,
        weight_theta: 0.5,
        slot_count: 100,
        slot_duration: 1e-3,
        rng_seed: seed,
        energy_cap: 1e12,
        delay_cap: 1e12,
        request_model: RequestModel {
            kind: RequestKind::StaticZipf,
            zipf_exponent: 1.0,
            rotation_period: 10,
            modulation_depth: 0.0,
            poisson_mean: None,
            mode: DemandMode::Expectation,
        },
        user_range: 15.0,
        server_range: 30.0,
        collaboration: CollaborationScope::Providers,
        processing_energy: ProcessingEnergyMode::ServerArrivals,
    }
}
