//! Reward and terminal-value functions for take-or-pay and penalty swings.

use serde::{Deserialize, Serialize};

use crate::volume::VolumeConstraints;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContractKind {
    TakeOrPay,
    /// Terminal cost `S (A (Q - Q_A)_- + B (Q - Q_B)_+)`.
    Penalty {
        a: f64,
        b: f64,
        q_a: i64,
        q_b: i64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractSpec {
    pub kind: ContractKind,
    pub strike: f64,
    pub volume: VolumeConstraints,
}

impl ContractSpec {
    pub fn take_or_pay(strike: f64, volume: VolumeConstraints) -> Self {
        Self {
            kind: ContractKind::TakeOrPay,
            strike,
            volume,
        }
    }

    pub fn penalty(strike: f64, volume: VolumeConstraints, a: f64, b: f64, q_a: i64, q_b: i64) -> Self {
        Self {
            kind: ContractKind::Penalty { a, b, q_a, q_b },
            strike,
            volume,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut findings = self.volume.validate();
        if !self.strike.is_finite() {
            findings.push("strike must be finite".to_string());
        }
        match self.kind {
            ContractKind::TakeOrPay if !self.volume.firm => {
                findings.push("take-or-pay contracts need firm volume constraints".to_string())
            }
            ContractKind::Penalty { a, b, q_a, q_b } => {
                if self.volume.firm {
                    findings.push("penalty contracts use non-firm volume constraints".to_string());
                }
                if !(a >= 0.0 && b >= 0.0) {
                    findings.push("penalty coefficients must be non-negative".to_string());
                }
                if q_a > q_b {
                    findings.push(format!("penalty band requires Q_A <= Q_B (got {q_a} > {q_b})"));
                }
            }
            _ => {}
        }
        findings
    }

    /// `c_k(s, q) = q (S - K)`; no discounting.
    pub fn immediate_reward(&self, spot: f64, q: i64) -> f64 {
        q as f64 * (spot - self.strike)
    }

    /// `g_n(s, Q)`.
    pub fn terminal_value(&self, spot: f64, level: i64) -> f64 {
        match self.kind {
            ContractKind::TakeOrPay => 0.0,
            ContractKind::Penalty { a, b, q_a, q_b } => {
                let shortfall = (q_a - level).max(0) as f64;
                let excess = (level - q_b).max(0) as f64;
                -spot * (a * shortfall + b * excess)
            }
        }
    }
}
