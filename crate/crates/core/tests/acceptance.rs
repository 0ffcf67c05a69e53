//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL line
//! with its measured values; the process exits non-zero if any fails.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use offload_core::cost::{evaluate, local_terms, CollaborationContext};
use offload_core::domain::{Bits, ProcessingEnergyMode, SystemConfig};
use offload_core::engine::{
    run, run_to_dir, spearman, sweep, Simulation, SweepAxis, SweepSpec, METRICS_FILE, META_FILE,
};
use offload_core::lyapunov::decision_cost;
use offload_core::policies::{contention_free, ldso_match, oracle_match, random_instance, Policy};
use offload_core::presets;
use offload_core::queueing::queue_update;
use offload_core::workload::{DemandMode, RequestKind, SlotDemand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn queue_law() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let q: Bits = rng.gen_range(0..1_000_000);
        let mu: Bits = rng.gen_range(0..1_000_000);
        let a: Bits = rng.gen_range(0..1_000_000);
        let cap = mu + rng.gen_range(0..1000);
        let expected = ((q as i128 - mu as i128).max(0) + a as i128) as Bits;
        if queue_update(q, mu, a, cap) != Ok(expected) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(1),
        format!("10000 triples, {mismatches} mismatches, {:.3} s", secs(elapsed)),
    )
}

/// Bound violations found by replaying `runs` seeded preset runs slot by slot
/// and recomputing both sides from the per-server transitions.
struct BoundTally {
    slots: usize,
    drift_violations: usize,
    penalty_violations: usize,
    law_violations: usize,
    elapsed: Duration,
}

fn le_rel(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + 1e-9 * lhs.abs().max(rhs.abs()).max(1.0)
}

fn replay_bounds(runs: u64) -> BoundTally {
    let start = Instant::now();
    let mut tally = BoundTally {
        slots: 0,
        drift_violations: 0,
        penalty_violations: 0,
        law_violations: 0,
        elapsed: Duration::ZERO,
    };
    for seed in 0..runs {
        let cfg = presets::reference(10, seed);
        let b: f64 = cfg
            .servers
            .iter()
            .map(|s| {
                let (mu, a) = (s.max_service_rate as f64, s.max_arrival as f64);
                (mu * mu + a * a) / 2.0
            })
            .sum();
        let mut sim = Simulation::new(&cfg, Policy::Ldso, seed).expect("preset is valid");
        for _ in 0..cfg.slot_count {
            let before = sim.queues().totals();
            let row = sim.step().expect("slot runs");
            let after = sim.queues().totals();
            let steps = sim.last_transition();
            let l = |q: &[Bits]| q.iter().map(|&x| 0.5 * (x as f64).powi(2)).sum::<f64>();
            let delta = l(&after) - l(&before);
            let mut drift_rhs = b;
            let mut penalty_rhs = b + cfg.control_v * row.cost.cost;
            for (i, s) in steps.iter().enumerate() {
                let q = before[i] as f64;
                drift_rhs += q * (s.arrivals as f64 - s.rate as f64);
                penalty_rhs += q * s.arrivals as f64;
                let law = before[i].saturating_sub(s.rate) + s.arrivals;
                if law != after[i] || s.rate > cfg.servers[i].max_service_rate {
                    tally.law_violations += 1;
                }
            }
            if !le_rel(delta, drift_rhs) {
                tally.drift_violations += 1;
            }
            if !le_rel(delta + cfg.control_v * row.cost.cost, penalty_rhs) {
                tally.penalty_violations += 1;
            }
            tally.slots += 1;
        }
    }
    tally.elapsed = start.elapsed();
    tally
}

/// Random configuration and slot state for the decomposition check.
fn random_state(rng: &mut ChaCha8Rng) -> (SystemConfig, SlotDemand, Vec<Vec<Bits>>, f64, Vec<Vec<f64>>) {
    let m = rng.gen_range(1..=6);
    let k = rng.gen_range(1..=6);
    let mut cfg = presets::small(m, k, rng.gen());
    cfg.catalog.sizes = (0..k).map(|_| rng.gen_range(1..50)).collect();
    let total_size: Bits = cfg.catalog.sizes.iter().sum();
    for s in cfg.servers.iter_mut() {
        s.cached_services = (0..k).map(|_| rng.gen_bool(0.6)).collect();
        s.cache_capacity = total_size;
        s.max_arrival = u64::MAX / 8;
        s.max_queue = u64::MAX / 4;
    }
    for kk in 0..k {
        let i = rng.gen_range(0..m);
        cfg.servers[i].cached_services[kk] = true;
    }
    cfg.energy.device_to_server = rng.gen_range(0.0..2.0);
    cfg.energy.server_to_server = rng.gen_range(0.0..2.0);
    cfg.energy.processing = rng.gen_range(0.0..10.0);
    cfg.weight_theta = rng.gen_range(0.0..=1.0);
    cfg.control_v = rng.gen_range(0.0..1e4);
    cfg.processing_energy = if rng.gen_bool(0.5) {
        ProcessingEnergyMode::ServerArrivals
    } else {
        ProcessingEnergyMode::ServiceArrivals
    };
    let counts: Vec<Vec<u64>> = (0..m)
        .map(|_| {
            (0..k)
                .map(|_| if rng.gen_bool(0.3) { 0 } else { rng.gen_range(0..30) })
                .collect()
        })
        .collect();
    let demand = SlotDemand::from_counts(&cfg, 0, vec![1.0 / k as f64; k], counts);
    let backlog = (0..m)
        .map(|_| (0..k).map(|_| rng.gen_range(0..10_000)).collect())
        .collect();
    let rate = rng.gen_range(1e4..1e8);
    let waits = (0..m)
        .map(|_| (0..k).map(|_| rng.gen_range(1e-6..1e-1)).collect())
        .collect();
    (cfg, demand, backlog, rate, waits)
}

fn decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..1000 {
        let (cfg, d, backlog, rate, waits) = random_state(&mut rng);
        let (m, k) = (cfg.server_count(), cfg.service_count());
        let ctx = CollaborationContext::from_config(&cfg);
        let (v, theta) = (cfg.control_v, cfg.weight_theta);

        // Left side: per-pair candidate costs on the local branch.
        let mut lhs = 0.0;
        for i in 0..m {
            for s in 0..k {
                let (e, t) = local_terms(&cfg, &ctx, &d, i, s, rate, waits[i][s]).expect("finite terms");
                lhs += decision_cost(v, theta, e, t, backlog[i][s], d.bits[i][s]);
            }
        }

        // Right side, first path: the slot cost evaluator with every x set.
        let all_local = vec![vec![true; k]; m];
        let slot = evaluate(&cfg, &ctx, &d, &all_local, rate, &waits).expect("finite cost").cost;

        // Right side, second path: the energy and delay sums written out.
        let bits = |i: usize, s: usize| cfg.catalog.sizes[s] as f64 * d.counts[i][s] as f64;
        let hit = |i: usize| {
            cfg.servers[i].cached_services.iter().filter(|c| **c).count() as f64 / k as f64
        };
        let active = |s: usize| (0..m).any(|i| d.counts[i][s] > 0);
        let mut energy = 0.0;
        let mut delay = 0.0;
        for i in 0..m {
            let ingress: f64 = (0..k).map(|s| bits(i, s)).sum();
            for s in 0..k {
                energy += bits(i, s) * cfg.energy.device_to_server;
                delay += bits(i, s) / rate;
                if active(s) {
                    let volume = match cfg.processing_energy {
                        ProcessingEnergyMode::ServerArrivals => ingress,
                        ProcessingEnergyMode::ServiceArrivals => bits(i, s),
                    };
                    energy += cfg.energy.processing * volume * hit(i);
                    delay += hit(i) * waits[i][s];
                }
            }
        }
        let hand = theta * energy + (1.0 - theta) * delay;
        let qa: f64 = (0..m)
            .flat_map(|i| (0..k).map(move |s| (i, s)))
            .map(|(i, s)| backlog[i][s] as f64 * bits(i, s))
            .sum();

        for rhs in [v * slot + qa, v * hand + qa] {
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300);
            worst = worst.max(rel);
            if rel >= 1e-9 {
                failures += 1;
            }
        }
    }
    outcome(
        failures == 0,
        format!("1000 random slot states, {failures} failures, worst relative error {worst:.2e}"),
    )
}

fn oracle_gap() -> Outcome {
    let start = Instant::now();
    let mut worse_than_oracle = 0;
    let mut contention_free_gaps = 0;
    let mut free = 0;
    let mut gaps = Vec::new();
    let mut fewer_assigned = 0;
    for seed in 0..500 {
        let p = random_instance(seed, 3, 3);
        let greedy = ldso_match(&p);
        let best = oracle_match(&p).expect("3^3 hostings is within the oracle limit");
        let g = (greedy.unassigned.len(), greedy.objective());
        let o = (best.unassigned.len(), best.objective());
        let tol = 1e-9 * o.1.abs().max(1.0);
        if g.0 < o.0 || (g.0 == o.0 && g.1 < o.1 - tol) {
            worse_than_oracle += 1;
        }
        if g.0 > o.0 {
            fewer_assigned += 1;
        } else {
            gaps.push(g.1 - o.1);
        }
        if contention_free(&p) {
            free += 1;
            if g.0 != o.0 || (g.1 - o.1).abs() > tol {
                contention_free_gaps += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let mean = gaps.iter().sum::<f64>() / gaps.len().max(1) as f64;
    outcome(
        worse_than_oracle == 0 && contention_free_gaps == 0 && elapsed < Duration::from_secs(30),
        format!(
            "500 instances, {worse_than_oracle} below oracle, {contention_free_gaps}/{free} nonzero \
             contention-free gaps, mean gap {mean:.4}, {fewer_assigned} with fewer services placed, {:.2} s",
            secs(elapsed)
        ),
    )
}

struct VSweep {
    values: Vec<f64>,
    costs: Vec<f64>,
    queues: Vec<f64>,
    max_server_queue: Bits,
    bound_flags: usize,
}

fn v_sweep() -> VSweep {
    let base = presets::reference(10, 1);
    let values = vec![500.0, 1300.0, 2500.0, 5000.0];
    let spec = SweepSpec {
        axis: SweepAxis::ControlV,
        values: values.clone(),
        policies: vec![Policy::Ldso],
        seeds: (0..5).collect(),
        threads: None,
    };
    let runs = sweep(&base, &spec, None).expect("sweep runs");
    let mut costs = vec![0.0; values.len()];
    let mut queues = vec![0.0; values.len()];
    let mut max_server_queue = 0;
    let mut bound_flags = 0;
    for r in &runs {
        let rec = r.outcome.as_ref().expect("run completes");
        costs[r.value_index] += rec.rows.iter().map(|x| x.cost.cost).sum::<f64>() / rec.rows.len() as f64 / 5.0;
        queues[r.value_index] += rec.rows.iter().map(|x| x.q_total as f64).sum::<f64>() / rec.rows.len() as f64 / 5.0;
        for row in &rec.rows {
            max_server_queue = max_server_queue.max(row.queues.iter().copied().max().unwrap_or(0));
            bound_flags += usize::from(row.flag_queue_bound);
        }
    }
    VSweep {
        values,
        costs,
        queues,
        max_server_queue,
        bound_flags,
    }
}

fn listing(xs: &[f64]) -> String {
    let mut s = String::new();
    for (n, x) in xs.iter().enumerate() {
        let _ = write!(s, "{}{x:.1}", if n > 0 { ", " } else { "" });
    }
    s
}

fn convergence() -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let slot = |lambda: f64| {
            let mut cfg = presets::reference(10, 1);
            cfg.slot_count = 2000;
            cfg.control_v = 1300.0;
            cfg.request_model.poisson_mean = Some(lambda);
            run(&cfg, Policy::Ldso, seed).expect("run completes").meta.summary.stabilization_slot
        };
        let (low, high) = (slot(15.0), slot(25.0));
        if let (Some(a), Some(b)) = (low, high) {
            if b > a {
                wins += 1;
            }
        }
        pairs.push(format!("{low:?}/{high:?}"));
    }
    outcome(
        wins >= 4,
        format!("{wins}/5 seed pairs later at the higher rate ({})", pairs.join(" ")),
    )
}

/// Two servers, two services, heterogeneous caching and rates.
fn duo(seed: u64, v: f64) -> SystemConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = presets::small(2, 2, seed);
    cfg.catalog.sizes = vec![rng.gen_range(5..15), rng.gen_range(5..15)];
    cfg.catalog.per_user_intensity = vec![0.05, 0.05];
    let both = rng.gen_range(0..2);
    for (i, s) in cfg.servers.iter_mut().enumerate() {
        s.cached_services = if i == both { vec![true, true] } else { vec![rng.gen_bool(0.5), true] };
        s.cache_capacity = 30;
        s.max_service_rate = rng.gen_range(60..120);
        s.max_arrival = 400;
        s.max_queue = 2000;
        s.covered_users = 20;
    }
    cfg.energy.device_to_server = 0.01;
    cfg.energy.server_to_server = 0.01;
    cfg.energy.processing = 1.0;
    cfg.request_model.kind = RequestKind::RotatingZipf;
    cfg.request_model.modulation_depth = 0.5;
    cfg.request_model.rotation_period = 100;
    cfg.request_model.mode = DemandMode::Stochastic;
    cfg.request_model.poisson_mean = Some(4.0);
    cfg.slot_count = 1000;
    cfg.control_v = v;
    cfg
}

fn stability_gap() -> Outcome {
    let mut ok = true;
    let mut excess = [0.0f64; 2];
    let mut notes = Vec::new();
    for seed in 0..5 {
        for (n, v) in [1e3, 1e4].into_iter().enumerate() {
            let cfg = duo(seed, v);
            let avg = |p: Policy| run(&cfg, p, seed).expect("run completes").meta.summary.avg_cost;
            let (greedy, best) = (avg(Policy::Ldso), avg(Policy::Oracle));
            let sim = Simulation::new(&cfg, Policy::Ldso, seed).expect("valid");
            let bound = best + sim.drift_constant() / v;
            ok &= greedy <= bound * 1.05;
            excess[n] += (greedy - best) / 5.0;
            if seed == 0 {
                notes.push(format!("V={v:.0}: ldso {greedy:.3} oracle {best:.3} bound {bound:.1}"));
            }
        }
    }
    ok &= excess[1] <= excess[0];
    outcome(
        ok,
        format!(
            "5 instances; mean excess over oracle {:.4} at V=1e3, {:.4} at V=1e4; seed 0: {}",
            excess[0],
            excess[1],
            notes.join("; ")
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = presets::reference(10, 3);
    let dirs = [tempfile::tempdir().expect("tmp"), tempfile::tempdir().expect("tmp")];
    let mut same = true;
    for policy in [Policy::Ldso, Policy::Random] {
        for d in &dirs {
            run_to_dir(&cfg, policy, 9, d.path()).expect("run completes");
        }
        for file in [METRICS_FILE, META_FILE] {
            let read = |d: &tempfile::TempDir| std::fs::read(d.path().join(file)).expect("written");
            same &= read(&dirs[0]) == read(&dirs[1]);
        }
    }
    outcome(same, "ldso and random runs repeated, metrics and meta files compared byte for byte".into())
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    };

    report("queue-law oracle", queue_law());

    let t = replay_bounds(20);
    let within = t.elapsed < Duration::from_secs(10);
    report(
        "drift bound per slot",
        outcome(
            t.drift_violations == 0 && t.law_violations == 0 && within,
            format!(
                "{} slots over 20 runs, {} violations, {} queue-law mismatches, {:.2} s",
                t.slots,
                t.drift_violations,
                t.law_violations,
                secs(t.elapsed)
            ),
        ),
    );
    report(
        "drift-plus-penalty bound per slot",
        outcome(
            t.penalty_violations == 0 && within,
            format!("{} slots over 20 runs, {} violations", t.slots, t.penalty_violations),
        ),
    );

    report("candidate cost decomposition", decomposition());
    report("oracle optimality gap", oracle_gap());

    let s = v_sweep();
    let rho_cost = spearman(&s.values, &s.costs);
    let rho_q = spearman(&s.values, &s.queues);
    report(
        "cost falls with V",
        outcome(
            rho_cost <= -0.9,
            format!("mean cost [{}], Spearman {rho_cost:.2}", listing(&s.costs)),
        ),
    );
    report(
        "backlog grows with V under the queue bound",
        outcome(
            rho_q >= 0.9 && s.max_server_queue <= presets::REFERENCE_QUEUE_BOUND && s.bound_flags == 0,
            format!(
                "mean total backlog [{}], Spearman {rho_q:.2}, largest server backlog {}",
                listing(&s.queues),
                s.max_server_queue
            ),
        ),
    );

    report("convergence ordering", convergence());
    report("stability gap", stability_gap());
    report("determinism", determinism());

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
