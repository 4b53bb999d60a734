//! Integer volume-constraint geometry.
//!
//! `Q_k` is the cumulative volume bought strictly before date `k`. With firm
//! global constraints the attainable set at `k` is the integer interval
//! `[max(k q̲, Q̲ - (n-k) q̄), min(k q̄, Q̄ - (n-k) q̲)]`; in the penalty variant
//! only the local bounds restrict it. The `(n-k) q̲` term is inactive when
//! `q̲ = 0` and otherwise removes levels from which `Q̄` cannot be respected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeConstraints {
    /// Per-date purchase bounds `q̲ <= q_k <= q̄`.
    pub q_min: i64,
    pub q_max: i64,
    /// Global bounds `Q̲ <= Q_n <= Q̄` (firm) or penalty-free band reference.
    pub total_min: i64,
    pub total_max: i64,
    /// Number of exercise dates.
    pub n: usize,
    /// Firm global constraints (take-or-pay) versus the penalty variant.
    pub firm: bool,
}

impl VolumeConstraints {
    pub fn firm(q_min: i64, q_max: i64, total_min: i64, total_max: i64, n: usize) -> Self {
        Self {
            q_min,
            q_max,
            total_min,
            total_max,
            n,
            firm: true,
        }
    }

    pub fn penalty(q_min: i64, q_max: i64, n: usize) -> Self {
        Self {
            q_min,
            q_max,
            total_min: q_min * n as i64,
            total_max: q_max * n as i64,
            n,
            firm: false,
        }
    }

    /// Every violated invariant, empty when the constraints are usable.
    pub fn validate(&self) -> Vec<String> {
        let mut findings = Vec::new();
        if self.n == 0 {
            findings.push("at least one exercise date is required".to_string());
        }
        if self.q_min < 0 {
            findings.push(format!("local minimum {} is negative", self.q_min));
        }
        if self.q_min >= self.q_max {
            findings.push(format!(
                "local bounds require q_min < q_max (got {} and {})",
                self.q_min, self.q_max
            ));
        }
        if !self.firm {
            return findings;
        }
        if self.total_min > self.total_max {
            findings.push(format!(
                "global bounds require Q_min <= Q_max (got {} and {})",
                self.total_min, self.total_max
            ));
        }
        let span = self.q_max - self.q_min;
        if span > 0 && (self.total_max - self.total_min).rem_euclid(span) != 0 {
            findings.push(format!(
                "bang-bang condition violated: Q_max - Q_min = {} is not a multiple of q_max - q_min = {}",
                self.total_max - self.total_min,
                span
            ));
        }
        let n = self.n as i64;
        if self.total_min > n * self.q_max {
            findings.push(format!(
                "infeasible: Q_min = {} exceeds n * q_max = {}",
                self.total_min,
                n * self.q_max
            ));
        }
        if self.total_max < n * self.q_min {
            findings.push(format!(
                "infeasible: Q_max = {} is below n * q_min = {}",
                self.total_max,
                n * self.q_min
            ));
        }
        findings
    }

    /// `(Q_k^d, Q_k^u)`.
    pub fn cumulative_bounds(&self, k: usize) -> (i64, i64) {
        let (k_i, n) = (k as i64, self.n as i64);
        if self.firm {
            (
                (k_i * self.q_min).max(self.total_min - (n - k_i) * self.q_max),
                (k_i * self.q_max).min(self.total_max - (n - k_i) * self.q_min),
            )
        } else {
            let kn = k_i.min(n - 1);
            (kn * self.q_min, kn * self.q_max)
        }
    }

    /// Remaining-capacity feature `m(Q)` fed to the task heads, clipped to
    /// `[0, 1]`. Early levels below `Q̲` would otherwise reach large negative
    /// values that blow up the effective step size of the first head column.
    pub fn remaining_capacity(&self, level: i64) -> f64 {
        let m = if self.firm {
            let range = (self.total_max - self.total_min).max(1);
            (level - self.total_min) as f64 / range as f64
        } else {
            level as f64 / (self.n as i64 * self.q_max) as f64
        };
        m.clamp(0.0, 1.0)
    }
}

/// Attainable levels and admissible controls for every date.
#[derive(Debug, Clone, PartialEq)]
pub struct QGrid {
    constraints: VolumeConstraints,
    bounds: Vec<(i64, i64)>,
}

impl QGrid {
    pub fn new(constraints: VolumeConstraints) -> Result<Self> {
        let findings = constraints.validate();
        if !findings.is_empty() {
            return Err(Error::Constraints(findings));
        }
        let bounds: Vec<_> = (0..=constraints.n)
            .map(|k| constraints.cumulative_bounds(k))
            .collect();
        if let Some((k, (lo, hi))) = bounds.iter().enumerate().find(|(_, (lo, hi))| lo > hi) {
            return Err(Error::Constraints(vec![format!(
                "no attainable volume at date {k} (interval [{lo}, {hi}])"
            )]));
        }
        Ok(Self {
            constraints,
            bounds,
        })
    }

    pub fn constraints(&self) -> &VolumeConstraints {
        &self.constraints
    }

    pub fn n_dates(&self) -> usize {
        self.constraints.n
    }

    pub fn bounds(&self, k: usize) -> (i64, i64) {
        self.bounds[k]
    }

    /// The ordered level list `Q_k^1 < ... < Q_k^{I_k}`.
    pub fn levels(&self, k: usize) -> std::ops::RangeInclusive<i64> {
        let (lo, hi) = self.bounds[k];
        lo..=hi
    }

    pub fn level_count(&self, k: usize) -> usize {
        let (lo, hi) = self.bounds[k];
        (hi - lo + 1) as usize
    }

    pub fn index_of(&self, k: usize, level: i64) -> Option<usize> {
        let (lo, hi) = self.bounds[k];
        (lo..=hi).contains(&level).then(|| (level - lo) as usize)
    }

    /// `(q_k^-(Q), q_k^+(Q))` for `Q ∈ Q_k`, `k < n`.
    pub fn admissible(&self, k: usize, level: i64) -> Result<(i64, i64)> {
        if k >= self.constraints.n || self.index_of(k, level).is_none() {
            return Err(Error::Domain { date: k, level });
        }
        let (next_lo, next_hi) = self.bounds[k + 1];
        let c = &self.constraints;
        Ok((
            (next_lo - level).max(c.q_min),
            (next_hi - level).min(c.q_max),
        ))
    }

    /// True when only one control is feasible, so no decision is needed.
    pub fn is_trivial(&self, k: usize, level: i64) -> Result<bool> {
        let (lo, hi) = self.admissible(k, level)?;
        Ok(lo == hi)
    }

    /// Levels at date `k` that carry a real decision, in increasing order.
    pub fn tasks(&self, k: usize) -> Vec<i64> {
        self.levels(k)
            .filter(|q| !self.is_trivial(k, *q).unwrap_or(true))
            .collect()
    }
}
