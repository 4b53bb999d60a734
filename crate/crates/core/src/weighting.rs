//! Task-weighting schemes for the per-date multitask loss.
//!
//! `Ew` keeps every weight at one, `Uw` draws each weight once from U(0,1),
//! and `Smag` adapts the weights with a GradNorm-style step whose targets
//! come from a sigmoid of each loss relative to its moving average. The
//! sigmoid keeps the learning-speed ratio well defined when losses are zero
//! or negative, which is the normal situation for swing payoffs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::sigmoid;

pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "SMAG")]
    Smag,
    #[serde(rename = "EW")]
    Ew,
    #[serde(rename = "UW")]
    Uw,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Smag => "SMAG",
            Scheme::Ew => "EW",
            Scheme::Uw => "UW",
        })
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "SMAG" | "S-MAG" => Ok(Scheme::Smag),
            "EW" => Ok(Scheme::Ew),
            "UW" => Ok(Scheme::Uw),
            other => Err(format!("unknown weighting scheme {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmagParams {
    /// Balancing strength α.
    pub alpha: f64,
    /// EMA decay β.
    pub beta: f64,
    pub weight_lr: f64,
    pub floor: f64,
}

impl Default for SmagParams {
    fn default() -> Self {
        Self {
            alpha: 1.8,
            beta: 0.7,
            weight_lr: 0.01,
            floor: DEFAULT_WEIGHT_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    pub scheme: Scheme,
    pub params: SmagParams,
    w: Vec<f64>,
    ema: Option<Vec<f64>>,
    previous_losses: Vec<f64>,
    t: u64,
}

impl WeightState {
    pub fn new(scheme: Scheme, task_count: usize, seed: u64, params: SmagParams) -> Self {
        assert!(task_count >= 1, "at least one task is required");
        let w = match scheme {
            Scheme::Smag | Scheme::Ew => vec![1.0; task_count],
            Scheme::Uw => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..task_count).map(|_| rng.random::<f64>()).collect()
            }
        };
        Self {
            scheme,
            params,
            w,
            ema: None,
            previous_losses: Vec::new(),
            t: 0,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn task_count(&self) -> usize {
        self.w.len()
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn ema(&self) -> Option<&[f64]> {
        self.ema.as_deref()
    }

    /// Advance the moving average with the losses observed at iteration `t`.
    ///
    /// `L̄⁽⁰⁾ = L⁽⁰⁾` and `L̄⁽ᵗ⁾ = β L̄⁽ᵗ⁻¹⁾ + (1-β) L⁽ᵗ⁻¹⁾`: the average used at
    /// `t` lags the current loss by one iteration.
    pub fn ema_update(&mut self, losses: &[f64]) {
        assert_eq!(losses.len(), self.w.len(), "loss vector length");
        let beta = self.params.beta;
        match &mut self.ema {
            None => self.ema = Some(losses.to_vec()),
            Some(ema) => {
                for (e, l) in ema.iter_mut().zip(&self.previous_losses) {
                    *e = beta * *e + (1.0 - beta) * l;
                }
            }
        }
        self.previous_losses.clear();
        self.previous_losses.extend_from_slice(losses);
        self.t += 1;
    }

    /// `(L̃, r)` with `L̃_i = σ(L_i - L̄_i)` and `r_i = L̃_i / mean(L̃)`. The
    /// sigmoid is kept away from an underflowed zero so `r` stays defined.
    pub fn learning_speeds(&self, losses: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let ema = self
            .ema
            .as_ref()
            .expect("ema_update must run before learning_speeds");
        let tilde: Vec<f64> = losses
            .iter()
            .zip(ema)
            .map(|(l, e)| sigmoid(l - e).max(f64::MIN_POSITIVE))
            .collect();
        let mean = tilde.iter().sum::<f64>() / tilde.len() as f64;
        let r = tilde.iter().map(|v| v / mean).collect();
        (tilde, r)
    }

    /// One descent step on `Σ_i |G_i(w) - Ḡ r_i^α|` with the targets held
    /// fixed, followed by floor clipping and renormalization to `Σ w = I`.
    pub fn smag_update(&mut self, grad_norms: &[f64], r: &[f64], mean_grad: f64) {
        assert_eq!(grad_norms.len(), self.w.len(), "grad norm vector length");
        assert_eq!(r.len(), self.w.len(), "speed vector length");
        let p = self.params;
        for ((w, g), ri) in self.w.iter_mut().zip(grad_norms).zip(r) {
            let target = mean_grad * ri.powf(p.alpha);
            let dg_dw = g / w.max(p.floor);
            *w -= p.weight_lr * sign(g - target) * dg_dw;
        }
        renormalize_with_floor(&mut self.w, p.floor);
    }

    /// Full per-iteration update for the configured scheme; a no-op for EW and UW.
    pub fn observe(&mut self, losses: &[f64], grad_norms: Option<&[f64]>) {
        if self.scheme != Scheme::Smag {
            self.t += 1;
            return;
        }
        let grad_norms = grad_norms.expect("S-MAG needs per-task gradient norms");
        self.ema_update(losses);
        let (_, r) = self.learning_speeds(losses);
        let mean_grad = grad_norms.iter().sum::<f64>() / grad_norms.len() as f64;
        self.smag_update(grad_norms, &r, mean_grad);
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Rescale `w` so that it sums to its length with every entry at least
/// `floor`. Entries that would fall below the floor are pinned there and
/// the remaining mass is shared proportionally among the others.
pub fn renormalize_with_floor(w: &mut [f64], floor: f64) {
    let n = w.len();
    let total = n as f64;
    assert!(floor * total <= total, "floor too large for renormalization");
    for v in w.iter_mut() {
        if !(*v >= floor) {
            *v = floor;
        }
    }
    let mut pinned = vec![false; n];
    loop {
        let free_mass: f64 = w
            .iter()
            .zip(&pinned)
            .filter(|(_, p)| !**p)
            .map(|(v, _)| *v)
            .sum();
        let pinned_count = pinned.iter().filter(|p| **p).count();
        let budget = total - pinned_count as f64 * floor;
        if free_mass <= 0.0 {
            break;
        }
        let scale = budget / free_mass;
        let mut newly_pinned = false;
        for (v, p) in w.iter_mut().zip(pinned.iter_mut()) {
            if !*p && *v * scale < floor {
                *v = floor;
                *p = true;
                newly_pinned = true;
            }
        }
        if !newly_pinned {
            for (v, p) in w.iter_mut().zip(&pinned) {
                if !*p {
                    *v *= scale;
                }
            }
            break;
        }
    }
    // Absorb the last rounding error in the largest entry.
    let err = total - w.iter().sum::<f64>();
    if let Some(max) = w.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        *max += err;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn smag(n: usize) -> WeightState {
        WeightState::new(Scheme::Smag, n, 0, SmagParams::default())
    }

    #[test]
    fn initial_weights() {
        assert_eq!(smag(4).weights(), &[1.0; 4]);
        assert_eq!(
            WeightState::new(Scheme::Ew, 3, 9, SmagParams::default()).weights(),
            &[1.0; 3]
        );
        let a = WeightState::new(Scheme::Uw, 5, 42, SmagParams::default());
        let b = WeightState::new(Scheme::Uw, 5, 42, SmagParams::default());
        assert_eq!(a.weights(), b.weights());
        assert!(a.weights().iter().all(|w| (0.0..1.0).contains(w)));
    }

    #[test]
    fn ema_unrolls_with_one_step_lag() {
        let mut s = smag(1);
        s.ema_update(&[1.0]);
        assert_eq!(s.ema().unwrap(), &[1.0]);
        s.ema_update(&[2.0]);
        assert_eq!(s.ema().unwrap(), &[1.0]);
        s.ema_update(&[5.0]);
        assert!((s.ema().unwrap()[0] - 1.3).abs() < 1e-15);
    }

    #[test]
    fn ema_fixed_point_and_frozen_decay() {
        let mut s = smag(2);
        for _ in 0..10 {
            s.ema_update(&[-3.0, 0.0]);
        }
        assert_eq!(s.ema().unwrap(), &[-3.0, 0.0]);
        let mut frozen = WeightState::new(
            Scheme::Smag,
            1,
            0,
            SmagParams {
                beta: 1.0,
                ..SmagParams::default()
            },
        );
        frozen.ema_update(&[4.0]);
        for l in [1.0, 9.0, -2.0] {
            frozen.ema_update(&[l]);
        }
        assert_eq!(frozen.ema().unwrap(), &[4.0]);
    }

    #[test]
    fn speeds_at_equilibrium_and_for_lagging_task() {
        let mut s = smag(3);
        s.ema_update(&[1.0, -2.0, 0.0]);
        let (tilde, r) = s.learning_speeds(&[1.0, -2.0, 0.0]);
        assert_eq!(tilde, vec![0.5; 3]);
        assert_eq!(r, vec![1.0; 3]);
        let (_, r) = s.learning_speeds(&[4.0, -2.0, 0.0]);
        assert!(r[0] > 1.0 && r[1] < 1.0 && r[2] < 1.0);
    }

    #[test]
    fn relative_speed_arithmetic() {
        let tilde = [0.8, 0.4];
        let mean: f64 = tilde.iter().sum::<f64>() / 2.0;
        let r: Vec<f64> = tilde.iter().map(|t| t / mean).collect();
        assert!((r[0] - 4.0 / 3.0).abs() < 1e-15 && (r[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn balanced_tasks_leave_weights_alone() {
        let mut s = smag(3);
        s.smag_update(&[2.0, 2.0, 2.0], &[1.0; 3], 2.0);
        assert_eq!(s.weights(), &[1.0; 3]);
    }

    #[test]
    fn renormalization_scales_to_task_count() {
        let mut w = vec![1.0, 3.0];
        renormalize_with_floor(&mut w, 1e-3);
        assert_eq!(w, vec![0.5, 1.5]);
    }

    #[test]
    fn descent_moves_weights_toward_targets() {
        let mut s = WeightState::new(
            Scheme::Smag,
            2,
            0,
            SmagParams {
                weight_lr: 0.1,
                ..SmagParams::default()
            },
        );
        // One-step oracle before renormalization: w - lr * sign(G - Ḡ) * G / w.
        let raw = [1.0 - 0.1 * 2.0, 1.0 + 0.1 * 1.0];
        s.smag_update(&[2.0, 1.0], &[1.0, 1.0], 1.5);
        let scale = 2.0 / (raw[0] + raw[1]);
        assert!((s.weights()[0] - raw[0] * scale).abs() < 1e-14);
        assert!(s.weights()[0] < 1.0 && s.weights()[1] > 1.0);
    }

    #[test]
    fn floor_is_kept_after_renormalization() {
        let mut w = vec![-5.0, 1e-9, 100.0, 3.0];
        renormalize_with_floor(&mut w, 1e-3);
        assert!(w.iter().all(|v| *v >= 1e-3));
        assert!((w.iter().sum::<f64>() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_uses_floor_in_derivative() {
        let mut s = smag(2);
        s.w = vec![0.0, 2.0];
        s.smag_update(&[0.0, 1.0], &[1.0, 1.0], 0.5);
        assert!(s.weights().iter().all(|w| w.is_finite() && *w >= 1e-3));
    }

    proptest! {
        #[test]
        fn smag_invariants_hold_for_arbitrary_losses(
            steps in prop::collection::vec(
                (prop::collection::vec(-1e3f64..1e3, 6), prop::collection::vec(0.0f64..50.0, 6)),
                1..40,
            ),
            lr in 0.0f64..5.0,
        ) {
            let mut s = WeightState::new(
                Scheme::Smag,
                6,
                0,
                SmagParams { weight_lr: lr, ..SmagParams::default() },
            );
            for (losses, norms) in &steps {
                s.ema_update(losses);
                let (tilde, r) = s.learning_speeds(losses);
                prop_assert!(tilde.iter().all(|t| *t > 0.0 && *t <= 1.0));
                let mean_r = r.iter().sum::<f64>() / r.len() as f64;
                prop_assert!((mean_r - 1.0).abs() <= 1e-12);
                let g = norms.iter().sum::<f64>() / 6.0;
                s.smag_update(norms, &r, g);
                let sum: f64 = s.weights().iter().sum();
                prop_assert!((sum - 6.0).abs() <= 1e-10);
                prop_assert!(s.weights().iter().all(|w| *w >= 1e-3));
            }
        }

        #[test]
        fn renormalization_preserves_order(mut w in prop::collection::vec(-2.0f64..10.0, 1..30)) {
            let before = w.clone();
            renormalize_with_floor(&mut w, 1e-3);
            prop_assert!((w.iter().sum::<f64>() - w.len() as f64).abs() <= 1e-10);
            for i in 0..w.len() {
                for j in 0..w.len() {
                    if before[i] < before[j] {
                        prop_assert!(w[i] <= w[j] + 1e-12);
                    }
                }
            }
        }
    }
}
