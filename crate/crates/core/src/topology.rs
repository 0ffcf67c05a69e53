//! Poisson point process placement of small base stations and users.
//!
//! Servers are drawn from a homogeneous PPP over a rectangle. Users are drawn
//! from an independent PPP and attach to their nearest server within the
//! user range; users outside every range are dropped and counted.

use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{adjacency_within, Position};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyParams {
    /// Server intensity `λ_e` in points per square meter.
    pub server_intensity: f64,
    /// User intensity `λ_u` in points per square meter.
    pub user_intensity: f64,
    pub width: f64,
    pub height: f64,
    pub user_range: f64,
    pub server_range: f64,
    /// Condition the server process on exactly this many points.
    #[serde(default)]
    pub server_count: Option<usize>,
}

impl TopologyParams {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Topology {
    pub servers: Vec<Position>,
    pub users: Vec<Position>,
    /// Serving server of each user, `None` for dropped users.
    pub user_server: Vec<Option<usize>>,
    /// Number of attached users per server.
    pub covered_users: Vec<u32>,
    pub orphan_users: usize,
    pub adjacency: Vec<Vec<usize>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("invalid topology parameters: {0}")]
    InvalidParams(String),
    #[error("the point process produced zero servers for seed {seed}; resample with a different seed")]
    NoServers { seed: u64 },
    #[error("positions file: {0}")]
    Positions(String),
}

fn uniform_points(rng: &mut ChaCha8Rng, n: usize, w: f64, h: f64) -> Vec<Position> {
    (0..n)
        .map(|_| Position::new(rng.gen::<f64>() * w, rng.gen::<f64>() * h))
        .collect()
}

fn poisson_count(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("positive mean");
    d.sample(rng) as usize
}

/// Samples a topology. Pure in `(seed, params)`.
pub fn generate_topology(seed: u64, params: &TopologyParams) -> Result<Topology, TopologyError> {
    let valid = |x: f64| x.is_finite() && x > 0.0;
    if !(valid(params.width) && valid(params.height)) {
        return Err(TopologyError::InvalidParams("area must be positive".into()));
    }
    if !(valid(params.server_intensity) || params.server_count.is_some()) {
        return Err(TopologyError::InvalidParams(
            "server intensity must be positive".into(),
        ));
    }
    if !(params.user_intensity.is_finite() && params.user_intensity >= 0.0) {
        return Err(TopologyError::InvalidParams(
            "user intensity must be >= 0".into(),
        ));
    }
    if !(valid(params.user_range) && valid(params.server_range)) {
        return Err(TopologyError::InvalidParams("ranges must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area = params.area();
    let m = match params.server_count {
        Some(m) => m,
        None => poisson_count(&mut rng, params.server_intensity * area),
    };
    if m == 0 {
        return Err(TopologyError::NoServers { seed });
    }
    let servers = uniform_points(&mut rng, m, params.width, params.height);
    let n_users = poisson_count(&mut rng, params.user_intensity * area);
    let users = uniform_points(&mut rng, n_users, params.width, params.height);
    Ok(attach(servers, users, params.user_range, params.server_range))
}

/// Builds a topology from fixed server positions, e.g. loaded from a file.
pub fn attach(
    servers: Vec<Position>,
    users: Vec<Position>,
    user_range: f64,
    server_range: f64,
) -> Topology {
    let mut covered = vec![0u32; servers.len()];
    let user_server: Vec<Option<usize>> = users
        .iter()
        .map(|u| {
            let mut best: Option<(usize, f64)> = None;
            for (i, s) in servers.iter().enumerate() {
                let d = u.distance(s);
                if d <= user_range && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            best.map(|(i, _)| i)
        })
        .collect();
    for i in user_server.iter().flatten() {
        covered[*i] += 1;
    }
    let orphan_users = user_server.iter().filter(|s| s.is_none()).count();
    let adjacency = adjacency_within(&servers, server_range);
    Topology {
        servers,
        users,
        user_server,
        covered_users: covered,
        orphan_users,
        adjacency,
    }
}

/// Reads server positions from CSV with header `id,x,y`. Rows are returned
/// ordered by `id`, which must be exactly `0..n`.
pub fn load_positions_csv<R: Read>(reader: R) -> Result<Vec<Position>, TopologyError> {
    #[derive(Deserialize)]
    struct Row {
        id: usize,
        x: f64,
        y: f64,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| TopologyError::Positions(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "x", "y"] {
        return Err(TopologyError::Positions(format!(
            "expected columns id,x,y, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows: Vec<Row> = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec.map_err(|e| TopologyError::Positions(e.to_string()))?);
    }
    rows.sort_by_key(|r| r.id);
    for (expected, r) in rows.iter().enumerate() {
        if r.id != expected {
            return Err(TopologyError::Positions(format!(
                "ids must be 0..n without gaps, missing {expected}"
            )));
        }
    }
    Ok(rows.into_iter().map(|r| Position::new(r.x, r.y)).collect())
}
