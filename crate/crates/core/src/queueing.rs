//! Per-server, per-service buffer backlogs.
//!
//! The update law is `Q(t+1) = max(Q(t) − μ(t), 0) + A(t)`: service in slot
//! `t` draws from the backlog present at the start of the slot and the slot's
//! arrivals are buffered for the next one. Within a server, service capacity
//! is split across services in proportion to their backlog.

use serde::Serialize;
use thiserror::Error;

use crate::domain::Bits;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueueError {
    #[error("service rate {rate} exceeds the server maximum {max}")]
    RateAboveMax { rate: Bits, max: Bits },
    #[error("served {served} bits but only {available} were available")]
    OverService { served: Bits, available: Bits },
    #[error("queue shape mismatch: {0}")]
    Shape(String),
}

/// `max(Q − μ, 0) + A` for one server.
pub fn queue_update(backlog: Bits, rate: Bits, arrivals: Bits, max_rate: Bits) -> Result<Bits, QueueError> {
    if rate > max_rate {
        return Err(QueueError::RateAboveMax {
            rate,
            max: max_rate,
        });
    }
    Ok(backlog.saturating_sub(rate) + arrivals)
}

/// The same law at service granularity.
pub fn per_service_update(backlog: Bits, served: Bits, arrivals: Bits) -> Result<Bits, QueueError> {
    let available = backlog + arrivals;
    if served > available {
        return Err(QueueError::OverService { served, available });
    }
    Ok(backlog.saturating_sub(served) + arrivals)
}

/// Splits `capacity` across backlogs in proportion to their size, using
/// largest remainders so the shares sum to `min(capacity, Σ backlog)` and no
/// share exceeds its backlog. Ties go to the lower index.
pub fn proportional_service(backlogs: &[Bits], capacity: Bits) -> Vec<Bits> {
    let total: Bits = backlogs.iter().sum();
    if total == 0 {
        return vec![0; backlogs.len()];
    }
    if capacity >= total {
        return backlogs.to_vec();
    }
    let cap = capacity as u128;
    let tot = total as u128;
    let mut shares: Vec<Bits> = Vec::with_capacity(backlogs.len());
    let mut remainders: Vec<(u128, usize)> = Vec::with_capacity(backlogs.len());
    for (k, &q) in backlogs.iter().enumerate() {
        let num = q as u128 * cap;
        shares.push((num / tot) as Bits);
        remainders.push((num % tot, k));
    }
    let mut left = capacity - shares.iter().sum::<Bits>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, k) in &remainders {
        if left == 0 {
            break;
        }
        if shares[k] < backlogs[k] {
            shares[k] += 1;
            left -= 1;
        }
    }
    shares
}

/// What happened to one server's queue in one slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ServerStep {
    /// `μ_i(t) = min(μ_i^max, Q_i(t) + A_i(t))`.
    pub rate: Bits,
    /// Bits actually drained from the pre-arrival backlog.
    pub served: Bits,
    pub arrivals: Bits,
}

/// `Q_i^k(t)` for every server and service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueueState {
    backlog: Vec<Vec<Bits>>,
}

impl QueueState {
    pub fn empty(servers: usize, services: usize) -> Self {
        Self {
            backlog: vec![vec![0; services]; servers],
        }
    }

    pub fn from_backlog(backlog: Vec<Vec<Bits>>) -> Self {
        Self { backlog }
    }

    pub fn per_service(&self) -> &[Vec<Bits>] {
        &self.backlog
    }

    pub fn service_backlog(&self, server: usize, service: usize) -> Bits {
        self.backlog[server][service]
    }

    /// `Q_i(t) = Σ_k Q_i^k(t)`.
    pub fn server_backlog(&self, server: usize) -> Bits {
        self.backlog[server].iter().sum()
    }

    pub fn totals(&self) -> Vec<Bits> {
        (0..self.backlog.len()).map(|i| self.server_backlog(i)).collect()
    }

    pub fn total(&self) -> Bits {
        self.backlog.iter().flatten().sum()
    }

    /// Advances every queue by one slot. `arrivals[i][k]` lands after service.
    pub fn step(&mut self, arrivals: &[Vec<Bits>], max_rates: &[Bits]) -> Result<Vec<ServerStep>, QueueError> {
        if arrivals.len() != self.backlog.len() || max_rates.len() != self.backlog.len() {
            return Err(QueueError::Shape(format!(
                "{} servers, {} arrival rows, {} rates",
                self.backlog.len(),
                arrivals.len(),
                max_rates.len()
            )));
        }
        let mut steps = Vec::with_capacity(self.backlog.len());
        for (i, row) in self.backlog.iter_mut().enumerate() {
            if arrivals[i].len() != row.len() {
                return Err(QueueError::Shape(format!("server {i} arrival width")));
            }
            let before: Bits = row.iter().sum();
            let incoming: Bits = arrivals[i].iter().sum();
            let rate = max_rates[i].min(before + incoming);
            let shares = proportional_service(row, rate);
            let served = shares.iter().sum();
            for ((q, s), a) in row.iter_mut().zip(&shares).zip(&arrivals[i]) {
                *q = per_service_update(*q, *s, *a)?;
            }
            debug_assert_eq!(
                row.iter().sum::<Bits>(),
                queue_update(before, rate, incoming, max_rates[i])?
            );
            steps.push(ServerStep {
                rate,
                served,
                arrivals: incoming,
            });
        }
        Ok(steps)
    }
}
