//! Quadratic Lyapunov function, its one-slot drift and the drift-plus-penalty
//! quantities the scheduler minimizes.
//!
//! Queue vectors are per-server backlogs `Q_i(t)` in bits. Everything is
//! evaluated on the realized sample path; the conditional expectations of the
//! theory become per-slot values here.

use serde::Serialize;
use thiserror::Error;

use crate::domain::Bits;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("queue vectors differ in length: {before} vs {after}")]
pub struct LengthMismatch {
    pub before: usize,
    pub after: usize,
}

/// `L = ½ Σ_i Q_i²`.
pub fn lyapunov_value(q: &[Bits]) -> f64 {
    0.5 * q.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()
}

/// `ΔL = L(Q(t+1)) − L(Q(t))`, computed from per-entry differences so that
/// large backlogs do not cancel catastrophically.
pub fn drift(before: &[Bits], after: &[Bits]) -> Result<f64, LengthMismatch> {
    if before.len() != after.len() {
        return Err(LengthMismatch {
            before: before.len(),
            after: after.len(),
        });
    }
    Ok(before
        .iter()
        .zip(after)
        .map(|(&a, &b)| {
            let (a, b) = (a as f64, b as f64);
            0.5 * (b - a) * (b + a)
        })
        .sum())
}

/// `B = Σ_i ((μ_i^max)² + (A_i^max)²) / 2`.
pub fn drift_bound_b(max_rates: &[Bits], max_arrivals: &[Bits]) -> f64 {
    assert_eq!(max_rates.len(), max_arrivals.len(), "one rate and one cap per server");
    max_rates
        .iter()
        .zip(max_arrivals)
        .map(|(&m, &a)| ((m as f64).powi(2) + (a as f64).powi(2)) / 2.0)
        .sum()
}

/// `C_i^k = Vθ E_i^k + V(1 − θ) T_i^k + Q_i^k A_i^k`.
pub fn decision_cost(v: f64, theta: f64, energy: f64, delay: f64, backlog: Bits, arrivals: Bits) -> f64 {
    v * theta * energy + v * (1.0 - theta) * delay + backlog as f64 * arrivals as f64
}

/// `L_cost = ΔL + V · Cost`.
pub fn drift_plus_penalty(drift: f64, v: f64, cost: f64) -> f64 {
    drift + v * cost
}

/// Right-hand side `B + Σ_i Q_i (A_i − μ_i)` of the drift bound.
pub fn drift_bound_rhs(b: f64, q: &[Bits], arrivals: &[Bits], rates: &[Bits]) -> f64 {
    b + q
        .iter()
        .zip(arrivals)
        .zip(rates)
        .map(|((&q, &a), &m)| q as f64 * (a as f64 - m as f64))
        .sum::<f64>()
}

/// Right-hand side `B + V · Cost + Σ_i Q_i A_i` of the drift-plus-penalty bound.
pub fn penalty_bound_rhs(b: f64, v: f64, cost: f64, q: &[Bits], arrivals: &[Bits]) -> f64 {
    b + v * cost
        + q.iter()
            .zip(arrivals)
            .map(|(&q, &a)| q as f64 * a as f64)
            .sum::<f64>()
}

/// `lhs ≤ rhs` up to a relative tolerance on the magnitudes involved.
pub fn within_bound(lhs: f64, rhs: f64, rel: f64) -> bool {
    lhs <= rhs + rel * lhs.abs().max(rhs.abs()).max(1.0)
}

/// Lyapunov quantities of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LyapunovSnapshot {
    pub value: f64,
    pub drift: f64,
    pub b: f64,
    pub drift_rhs: f64,
    pub l_cost: f64,
    pub upper_bound: f64,
}

impl LyapunovSnapshot {
    /// Builds the snapshot for a transition `before → after` with the slot's
    /// arrivals and service rates per server.
    pub fn new(
        b: f64,
        v: f64,
        cost: f64,
        before: &[Bits],
        after: &[Bits],
        arrivals: &[Bits],
        rates: &[Bits],
    ) -> Result<Self, LengthMismatch> {
        let d = drift(before, after)?;
        Ok(Self {
            value: lyapunov_value(before),
            drift: d,
            b,
            drift_rhs: drift_bound_rhs(b, before, arrivals, rates),
            l_cost: drift_plus_penalty(d, v, cost),
            upper_bound: penalty_bound_rhs(b, v, cost, before, arrivals),
        })
    }

    pub fn drift_bound_holds(&self, rel: f64) -> bool {
        within_bound(self.drift, self.drift_rhs, rel)
    }

    pub fn penalty_bound_holds(&self, rel: f64) -> bool {
        within_bound(self.l_cost, self.upper_bound, rel)
    }
}
