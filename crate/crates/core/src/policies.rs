//! Offloading policies: the greedy drift-plus-penalty matcher, an exhaustive
//! oracle for small instances, and four simple baselines.
//!
//! Every policy consumes a [`MatchProblem`]: the list of feasible
//! `(server, service)` candidates with their decision costs, plus the
//! per-server headroom the admission guard checks. A candidate exists only
//! when the server caches the service, the service has demand this slot and
//! the server can host it without M/M/1 overload. Building the problem is the
//! engine's job; policies never look at the configuration.
//!
//! Admission is cumulative within a slot. Hosting service `k` on server `i`
//! routes the whole slot demand `D_k` of that service into `Q_i^k`, so the
//! guard checks `Q_i(t) + admitted_i + D_k ≤ Q_i^max` and
//! `admitted_i + D_k ≤ A_i^max`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Bits;

/// One feasible hosting option.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    pub server: usize,
    pub service: usize,
    /// `C_i^k(t)`.
    pub cost: f64,
    /// The penalty part `Vθ E_i^k + V(1 − θ) T_i^k`.
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchProblem {
    pub servers: usize,
    pub services: usize,
    pub candidates: Vec<Candidate>,
    /// `D_k`, bits routed to the host of each service; zero means no demand.
    pub demand: Vec<Bits>,
    /// `Q_i(t)` before the slot.
    pub backlog: Vec<Bits>,
    pub max_queue: Vec<Bits>,
    pub max_arrival: Vec<Bits>,
    /// Server with the largest ingress of each service, used by the
    /// topology-aware baselines.
    pub requester: Vec<Option<usize>>,
    /// Hop distances between servers.
    pub hops: Vec<Vec<Option<usize>>>,
}

impl MatchProblem {
    /// Whether `server` can take `extra` more bits after `admitted` were
    /// already routed to it this slot.
    pub fn admits(&self, server: usize, admitted: Bits, extra: Bits) -> bool {
        let load = admitted + extra;
        self.backlog[server] + load <= self.max_queue[server] && load <= self.max_arrival[server]
    }

    pub fn demanded(&self, service: usize) -> bool {
        self.demand[service] > 0
    }
}

/// Completed offloading decision for one slot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffloadDecision {
    /// `x_i^k(t)`, indexed `[server][service]`.
    pub x: Vec<Vec<bool>>,
    /// Host of each service, `None` when unassigned or not demanded.
    pub hosts: Vec<Option<usize>>,
    /// Demanded services without an admissible host.
    pub unassigned: Vec<usize>,
    /// Accepted candidates in acceptance order.
    pub selections: Vec<Candidate>,
}

impl OffloadDecision {
    fn from_hosts(problem: &MatchProblem, hosts: Vec<Option<usize>>, selections: Vec<Candidate>) -> Self {
        let mut x = vec![vec![false; problem.services]; problem.servers];
        for (k, h) in hosts.iter().enumerate() {
            if let Some(i) = h {
                x[*i][k] = true;
            }
        }
        let unassigned = (0..problem.services)
            .filter(|&k| problem.demanded(k) && hosts[k].is_none())
            .collect();
        Self {
            x,
            hosts,
            unassigned,
            selections,
        }
    }

    /// `Σ C_i^k` over the accepted candidates.
    pub fn objective(&self) -> f64 {
        self.selections.iter().map(|c| c.cost).sum()
    }

    pub fn assigned_count(&self) -> usize {
        self.hosts.iter().filter(|h| h.is_some()).count()
    }
}

/// Checks single assignment per demanded service, candidate membership and
/// the cumulative admission guard.
pub fn check_decision(problem: &MatchProblem, d: &OffloadDecision) -> Result<(), String> {
    let mut admitted = vec![0; problem.servers];
    for k in 0..problem.services {
        let hosts: Vec<usize> = (0..problem.servers).filter(|&i| d.x[i][k]).collect();
        match hosts.as_slice() {
            [] => {
                if problem.demanded(k) && !d.unassigned.contains(&k) {
                    return Err(format!("service {k} has demand but no host and is not listed unassigned"));
                }
            }
            [i] => {
                if !problem.demanded(k) {
                    return Err(format!("service {k} has no demand but is hosted on {i}"));
                }
                if !problem.candidates.iter().any(|c| c.server == *i && c.service == k) {
                    return Err(format!("server {i} is not a candidate for service {k}"));
                }
                admitted[*i] += problem.demand[k];
            }
            many => return Err(format!("service {k} hosted {} times: {many:?}", many.len())),
        }
    }
    for (i, &a) in admitted.iter().enumerate() {
        if !problem.admits(i, 0, a) {
            return Err(format!(
                "server {i} admitted {a} bits with backlog {} (Q_max {}, A_max {})",
                problem.backlog[i], problem.max_queue[i], problem.max_arrival[i]
            ));
        }
    }
    Ok(())
}

fn by_key(key: impl Fn(&Candidate) -> f64) -> impl Fn(&Candidate, &Candidate) -> std::cmp::Ordering {
    move |a, b| {
        key(a)
            .total_cmp(&key(b))
            .then(a.server.cmp(&b.server))
            .then(a.service.cmp(&b.service))
    }
}

/// Repeatedly takes the cheapest remaining candidate. An admissible pick
/// hosts its service and removes every other candidate of that service; an
/// inadmissible one is removed alone. Admissibility only shrinks as servers
/// fill up, so a single pass over the sorted candidates performs the same
/// removals.
fn greedy(problem: &MatchProblem, key: impl Fn(&Candidate) -> f64) -> OffloadDecision {
    let mut order: Vec<Candidate> = problem.candidates.clone();
    order.sort_by(by_key(key));
    let mut hosts = vec![None; problem.services];
    let mut admitted = vec![0; problem.servers];
    let mut selections = Vec::new();
    for c in order {
        if hosts[c.service].is_some() || !problem.demanded(c.service) {
            continue;
        }
        let need = problem.demand[c.service];
        if problem.admits(c.server, admitted[c.server], need) {
            admitted[c.server] += need;
            hosts[c.service] = Some(c.server);
            selections.push(c);
        }
    }
    OffloadDecision::from_hosts(problem, hosts, selections)
}

/// Greedy matching on the full decision cost `C_i^k`.
pub fn ldso_match(problem: &MatchProblem) -> OffloadDecision {
    greedy(problem, |c| c.cost)
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("oracle refused: {servers}^{services} assignments exceed the limit of {limit}")]
    TooLarge {
        servers: usize,
        services: usize,
        limit: u64,
    },
}

/// Enumeration limit on `M^K`.
pub const ORACLE_LIMIT: u64 = 1_000_000;

/// Exhaustive search over every admissible assignment. The objective is
/// lexicographic: fewest unassigned services first, then smallest `Σ C_i^k`.
/// Among equal objectives the first assignment in enumeration order wins,
/// where each service tries its hosts by ascending server id before leaving
/// the service unassigned.
pub fn oracle_match(problem: &MatchProblem) -> Result<OffloadDecision, PolicyError> {
    let size = (problem.servers as u64).checked_pow(problem.services as u32);
    if size.is_none_or(|s| s > ORACLE_LIMIT) {
        return Err(PolicyError::TooLarge {
            servers: problem.servers,
            services: problem.services,
            limit: ORACLE_LIMIT,
        });
    }
    let mut options: Vec<Vec<Option<Candidate>>> = vec![Vec::new(); problem.services];
    for c in &problem.candidates {
        if problem.demanded(c.service) {
            options[c.service].push(Some(*c));
        }
    }
    for opts in &mut options {
        opts.sort_by_key(|c| c.map(|c| c.server));
        opts.push(None);
    }

    struct Search<'a> {
        problem: &'a MatchProblem,
        options: &'a [Vec<Option<Candidate>>],
        admitted: Vec<Bits>,
        current: Vec<Option<Candidate>>,
        best: Option<(usize, f64, Vec<Option<Candidate>>)>,
    }
    impl Search<'_> {
        fn go(&mut self, k: usize, missing: usize, cost: f64) {
            if k == self.options.len() {
                let better = match &self.best {
                    None => true,
                    Some((m, c, _)) => missing < *m || (missing == *m && cost < *c),
                };
                if better {
                    self.best = Some((missing, cost, self.current.clone()));
                }
                return;
            }
            for opt in &self.options[k] {
                match opt {
                    Some(c) => {
                        let need = self.problem.demand[k];
                        if !self.problem.admits(c.server, self.admitted[c.server], need) {
                            continue;
                        }
                        self.admitted[c.server] += need;
                        self.current[k] = Some(*c);
                        self.go(k + 1, missing, cost + c.cost);
                        self.admitted[c.server] -= need;
                        self.current[k] = None;
                    }
                    None => {
                        let miss = usize::from(self.problem.demanded(k));
                        self.go(k + 1, missing + miss, cost);
                    }
                }
            }
        }
    }

    let mut s = Search {
        problem,
        options: &options,
        admitted: vec![0; problem.servers],
        current: vec![None; problem.services],
        best: None,
    };
    s.go(0, 0, 0.0);
    let chosen = s.best.map(|b| b.2).unwrap_or_default();
    let hosts = chosen.iter().map(|c| c.map(|c| c.server)).collect();
    let selections = chosen.into_iter().flatten().collect();
    Ok(OffloadDecision::from_hosts(problem, hosts, selections))
}

/// Picks one admissible host per demanded service in service order.
fn per_service(
    problem: &MatchProblem,
    mut choose: impl FnMut(usize, &[Candidate]) -> Option<Candidate>,
) -> OffloadDecision {
    let mut hosts = vec![None; problem.services];
    let mut admitted = vec![0; problem.servers];
    let mut selections = Vec::new();
    for k in (0..problem.services).filter(|&k| problem.demanded(k)) {
        let need = problem.demand[k];
        let mut feasible: Vec<Candidate> = problem
            .candidates
            .iter()
            .filter(|c| c.service == k && problem.admits(c.server, admitted[c.server], need))
            .copied()
            .collect();
        feasible.sort_by_key(|c| c.server);
        if let Some(c) = choose(k, &feasible) {
            admitted[c.server] += need;
            hosts[k] = Some(c.server);
            selections.push(c);
        }
    }
    OffloadDecision::from_hosts(problem, hosts, selections)
}

fn hop_rank(problem: &MatchProblem, k: usize, server: usize) -> usize {
    problem.requester[k]
        .and_then(|r| problem.hops[r][server])
        .unwrap_or(usize::MAX)
}

fn nearest(problem: &MatchProblem, k: usize, feasible: &[Candidate]) -> Option<Candidate> {
    feasible
        .iter()
        .min_by_key(|c| (hop_rank(problem, k, c.server), c.server))
        .copied()
}

/// Uniformly random admissible host per service.
pub fn random_match(problem: &MatchProblem, rng: &mut impl Rng) -> OffloadDecision {
    per_service(problem, |_, feasible| feasible.choose(rng).copied())
}

/// Admissible host with the fewest hops from the requesting server.
pub fn nearest_capable_match(problem: &MatchProblem) -> OffloadDecision {
    per_service(problem, |k, feasible| nearest(problem, k, feasible))
}

/// The requesting server when admissible, otherwise the nearest capable one.
pub fn local_first_match(problem: &MatchProblem) -> OffloadDecision {
    per_service(problem, |k, feasible| {
        feasible
            .iter()
            .find(|c| Some(c.server) == problem.requester[k])
            .copied()
            .or_else(|| nearest(problem, k, feasible))
    })
}

/// Greedy matching on the penalty alone, ignoring backlogs.
pub fn cost_only_match(problem: &MatchProblem) -> OffloadDecision {
    greedy(problem, |c| c.penalty)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Ldso,
    Oracle,
    Random,
    NearestCapable,
    LocalFirst,
    CostOnly,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::Ldso,
        Policy::Oracle,
        Policy::Random,
        Policy::NearestCapable,
        Policy::LocalFirst,
        Policy::CostOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Ldso => "ldso",
            Policy::Oracle => "oracle",
            Policy::Random => "random",
            Policy::NearestCapable => "nearest-capable",
            Policy::LocalFirst => "local-first",
            Policy::CostOnly => "cost-only",
        }
    }

    /// Runs the policy. `seed` only matters for the random baseline.
    pub fn decide(self, problem: &MatchProblem, seed: u64) -> Result<OffloadDecision, PolicyError> {
        Ok(match self {
            Policy::Ldso => ldso_match(problem),
            Policy::Oracle => oracle_match(problem)?,
            Policy::Random => random_match(problem, &mut ChaCha8Rng::seed_from_u64(seed)),
            Policy::NearestCapable => nearest_capable_match(problem),
            Policy::LocalFirst => local_first_match(problem),
            Policy::CostOnly => cost_only_match(problem),
        })
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Policy::ALL.iter().map(|p| p.name()).collect();
                format!("unknown policy {s:?}, expected one of {}", names.join(", "))
            })
    }
}

/// Random matching instance with `m` servers and `k` services. Caching,
/// demand, backlogs and costs are drawn so that the admission guard binds on
/// some instances and not on others.
pub fn random_instance(seed: u64, m: usize, k: usize) -> MatchProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let demand: Vec<Bits> = (0..k)
        .map(|_| if rng.gen_bool(0.9) { rng.gen_range(10..100) } else { 0 })
        .collect();
    let max_queue: Vec<Bits> = (0..m).map(|_| rng.gen_range(100..400)).collect();
    let backlog: Vec<Bits> = max_queue.iter().map(|&q| rng.gen_range(0..q)).collect();
    let max_arrival = vec![250; m];
    let mut candidates = Vec::new();
    for s in 0..k {
        for i in 0..m {
            if demand[s] > 0 && rng.gen_bool(0.75) {
                let penalty = rng.gen_range(0.0..100.0);
                let q_term = (backlog[i] / k as u64 * demand[s]) as f64 / 50.0;
                candidates.push(Candidate {
                    server: i,
                    service: s,
                    cost: penalty + q_term,
                    penalty,
                });
            }
        }
    }
    MatchProblem {
        servers: m,
        services: k,
        candidates,
        demand,
        backlog,
        max_queue,
        max_arrival,
        requester: (0..k).map(|_| Some(rng.gen_range(0..m))).collect(),
        hops: (0..m)
            .map(|a| (0..m).map(|b| Some(a.abs_diff(b))).collect())
            .collect(),
    }
}

/// Whether every demanded service's cheapest standalone-admissible host is
/// distinct, so no two services compete for the same server.
pub fn contention_free(problem: &MatchProblem) -> bool {
    let mut seen = Vec::new();
    for k in (0..problem.services).filter(|&k| problem.demanded(k)) {
        let best = problem
            .candidates
            .iter()
            .filter(|c| c.service == k && problem.admits(c.server, 0, problem.demand[k]))
            .min_by(|a, b| by_key(|c| c.cost)(a, b));
        if let Some(c) = best {
            if seen.contains(&c.server) {
                return false;
            }
            seen.push(c.server);
        }
    }
    true
}
