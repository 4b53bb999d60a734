//! Hard-parameter-sharing network for the per-date decision functions.
//!
//! Layout: input batch-norm, then `depth` blocks of (affine without bias,
//! batch-norm, ReLU), then one affine head per task. Head `i` produces a
//! vector `χ_i` that is contracted with the task feature `Z_i` and squashed
//! by a sigmoid: `f_i = σ(<χ_i, Z_i>)`. The scalar date-0 network is the same
//! structure with one hidden block, one head of width one and `Z = (1)`.
//!
//! All parameters live in one flat vector; the shared trunk occupies a prefix
//! of it, which makes optimizer updates, trunk transfer and checkpointing
//! plain slice operations. Gradients are computed by hand-written reverse
//! mode over this fixed architecture.

mod adam;

pub use adam::AdamState;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub task_count: usize,
    /// Length of each head output `χ_i` (2 for task heads, 1 for the scalar net).
    pub head_width: usize,
}

impl Architecture {
    pub fn multitask(input_dim: usize, width: usize, task_count: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![width, width],
            task_count,
            head_width: 2,
        }
    }

    pub fn scalar(input_dim: usize, width: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![width],
            task_count: 1,
            head_width: 1,
        }
    }

    fn last_width(&self) -> usize {
        *self.hidden.last().expect("at least one hidden layer")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl RunningStats {
    fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }
}

/// Offsets into the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    input_gamma: usize,
    input_beta: usize,
    /// (weight, gamma, beta) per hidden block.
    hidden: Vec<(usize, usize, usize)>,
    head_weight: usize,
    head_bias: usize,
    total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let mut off = 0;
        let input_gamma = off;
        off += arch.input_dim;
        let input_beta = off;
        off += arch.input_dim;
        let mut hidden = Vec::new();
        let mut fan_in = arch.input_dim;
        for &w in &arch.hidden {
            let weight = off;
            off += fan_in * w;
            let gamma = off;
            off += w;
            let beta = off;
            off += w;
            hidden.push((weight, gamma, beta));
            fan_in = w;
        }
        let head_weight = off;
        off += fan_in * arch.task_count * arch.head_width;
        let head_bias = off;
        off += arch.task_count * arch.head_width;
        Self {
            input_gamma,
            input_beta,
            hidden,
            head_weight,
            head_bias,
            total: off,
        }
    }
}

/// Task features `Z_i`, one row per task.
pub type TaskFeatures = Array2<f64>;

/// `Z_i = (m(Q_i), 1)` for each level's remaining capacity `m`.
pub fn task_features(capacities: &[f64]) -> TaskFeatures {
    let mut z = Array2::ones((capacities.len(), 2));
    for (i, m) in capacities.iter().enumerate() {
        z[[i, 0]] = *m;
    }
    z
}

/// Features of the scalar net: a single task with `Z = (1)`.
pub fn scalar_features() -> TaskFeatures {
    Array2::ones((1, 1))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest double strictly below one.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskNet {
    arch: Architecture,
    layout: Layout,
    params: Vec<f64>,
    running: Vec<RunningStats>,
    mode: Mode,
}

struct BnCache {
    hat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerCache {
    input: Array2<f64>,
    bn: BnCache,
    out: Array2<f64>,
}

struct ForwardCache {
    input_bn: BnCache,
    layers: Vec<LayerCache>,
}

/// Result of one training evaluation.
#[derive(Debug, Clone)]
pub struct LossOutput {
    /// `L_i = -mean[ψ⁺ f_i + ψ⁻ (1 - f_i)]`.
    pub task_losses: Vec<f64>,
    /// `Σ w_i L_i`.
    pub global_loss: f64,
    /// Gradient of the global loss, same layout as the parameters.
    pub grads: Vec<f64>,
    /// `‖∇_W (w_i L_i)‖₂` with `W` the last shared affine weights.
    pub task_grad_norms: Option<Vec<f64>>,
}

impl MultitaskNet {
    /// He-uniform affine weights, unit batch-norm scales, zero shifts and biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.input_dim == 0 || arch.task_count == 0 || arch.hidden.is_empty() {
            return Err(Error::Usage(format!("degenerate architecture {arch:?}")));
        }
        if arch.hidden.iter().any(|w| *w == 0) || arch.head_width == 0 {
            return Err(Error::Usage(format!("zero-width layer in {arch:?}")));
        }
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params[layout.input_gamma..layout.input_gamma + arch.input_dim].fill(1.0);
        let mut fan_in = arch.input_dim;
        for (&(weight, gamma, _), &w) in layout.hidden.iter().zip(&arch.hidden) {
            he_uniform(&mut rng, &mut params[weight..weight + fan_in * w], fan_in);
            params[gamma..gamma + w].fill(1.0);
            fan_in = w;
        }
        let head_len = fan_in * arch.task_count * arch.head_width;
        he_uniform(
            &mut rng,
            &mut params[layout.head_weight..layout.head_weight + head_len],
            fan_in,
        );
        let mut running = vec![RunningStats::new(arch.input_dim)];
        running.extend(arch.hidden.iter().map(|w| RunningStats::new(*w)));
        Ok(Self {
            arch,
            layout,
            params,
            running,
            mode: Mode::Train,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn task_count(&self) -> usize {
        self.arch.task_count
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Length of the shared-trunk prefix of the parameter vector.
    pub fn trunk_len(&self) -> usize {
        self.layout.head_weight
    }

    pub fn running_stats(&self) -> Vec<(&[f64], &[f64])> {
        self.running
            .iter()
            .map(|r| (r.mean.as_slice(), r.var.as_slice()))
            .collect()
    }

    /// Zero every head weight and bias.
    pub fn zero_heads(&mut self) {
        let start = self.layout.head_weight;
        self.params[start..].fill(0.0);
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let fan_in = if l == 0 {
            self.arch.input_dim
        } else {
            self.arch.hidden[l - 1]
        };
        let w = self.arch.hidden[l];
        let off = self.layout.hidden[l].0;
        ArrayView2::from_shape((fan_in, w), &self.params[off..off + fan_in * w]).unwrap()
    }

    fn vector(&self, off: usize, len: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[off..off + len])
    }

    /// Effective head map: logit_i = h · u_i + c_i with `u_i = V_i Z_i`, `c_i = b_i · Z_i`.
    pub fn effective_heads(&self, features: &TaskFeatures) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_features(features)?;
        let h = self.arch.last_width();
        let (tasks, width) = (self.arch.task_count, self.arch.head_width);
        let v = ArrayView2::from_shape(
            (h, tasks * width),
            &self.params[self.layout.head_weight..self.layout.head_weight + h * tasks * width],
        )
        .unwrap();
        let bias = self.vector(self.layout.head_bias, tasks * width);
        let mut u = Array2::zeros((h, tasks));
        let mut c = Array1::zeros(tasks);
        for i in 0..tasks {
            for r in 0..width {
                let z = features[[i, r]];
                u.column_mut(i).scaled_add(z, &v.column(i * width + r));
                c[i] += z * bias[i * width + r];
            }
        }
        Ok((u, c))
    }

    fn check_features(&self, features: &TaskFeatures) -> Result<()> {
        if features.dim() != (self.arch.task_count, self.arch.head_width) {
            return Err(Error::Usage(format!(
                "features have shape {:?}, expected ({}, {})",
                features.dim(),
                self.arch.task_count,
                self.arch.head_width
            )));
        }
        Ok(())
    }

    fn check_states(&self, states: &ArrayView2<f64>) -> Result<()> {
        if states.ncols() != self.arch.input_dim || states.nrows() == 0 {
            return Err(Error::Usage(format!(
                "state batch has shape {:?}, expected (M >= 1, {})",
                states.dim(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    /// Last shared representation in eval mode (running statistics, no side effects).
    pub fn hidden_eval(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_states(&states)?;
        let d = self.arch.input_dim;
        let gamma = self.vector(self.layout.input_gamma, d);
        let beta = self.vector(self.layout.input_beta, d);
        let mut x = bn_eval(states, &self.running[0], gamma, beta);
        for l in 0..self.arch.hidden.len() {
            let w = self.arch.hidden[l];
            let (_, g, b) = self.layout.hidden[l];
            let mut a = x.dot(&self.weight(l));
            bn_eval_inplace(&mut a, &self.running[l + 1], self.vector(g, w), self.vector(b, w));
            a.mapv_inplace(|v| v.max(0.0));
            x = a;
        }
        ensure_finite(&x, "hidden layers")?;
        Ok(x)
    }

    /// Decision probabilities `f_i ∈ (0, 1)` for every row and task.
    ///
    /// Train mode normalizes with batch statistics and updates the running
    /// statistics; eval mode uses the running statistics only.
    pub fn forward_decisions(
        &mut self,
        states: ArrayView2<f64>,
        features: &TaskFeatures,
    ) -> Result<Array2<f64>> {
        let logits = self.forward_logits(states, features)?;
        Ok(logits.mapv(|z| sigmoid(z).clamp(f64::MIN_POSITIVE, ONE_MINUS)))
    }

    pub fn forward_logits(
        &mut self,
        states: ArrayView2<f64>,
        features: &TaskFeatures,
    ) -> Result<Array2<f64>> {
        self.check_features(features)?;
        let hidden = match self.mode {
            Mode::Eval => self.hidden_eval(states)?,
            Mode::Train => {
                let cache = self.forward_train(states)?;
                cache.layers.last().unwrap().out.clone()
            }
        };
        let (u, c) = self.effective_heads(features)?;
        let logits = hidden.dot(&u) + &c;
        ensure_finite(&logits, "task heads")?;
        Ok(logits)
    }

    /// Eval-mode logits; a pure function of parameters, running stats and inputs.
    pub fn logits_eval(&self, states: ArrayView2<f64>, features: &TaskFeatures) -> Result<Array2<f64>> {
        let hidden = self.hidden_eval(states)?;
        let (u, c) = self.effective_heads(features)?;
        Ok(hidden.dot(&u) + &c)
    }

    /// Replace the running statistics by the batch statistics of `states`
    /// under the current parameters (no parameter change).
    fn forward_train(&mut self, states: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_states(&states)?;
        if states.nrows() < 2 {
            return Err(Error::Usage(
                "train mode needs at least two rows for batch statistics".into(),
            ));
        }
        let d = self.arch.input_dim;
        let (input_bn, mut x) = {
            let gamma = self.vector(self.layout.input_gamma, d).to_owned();
            let beta = self.vector(self.layout.input_beta, d).to_owned();
            bn_train(states.to_owned(), &mut self.running[0], gamma.view(), beta.view(), BN_MOMENTUM)
        };
        ensure_finite(&x, "input normalization")?;
        let mut layers = Vec::with_capacity(self.arch.hidden.len());
        for l in 0..self.arch.hidden.len() {
            let w = self.arch.hidden[l];
            let (_, g, b) = self.layout.hidden[l];
            let a = x.dot(&self.weight(l));
            let gamma = self.vector(g, w).to_owned();
            let beta = self.vector(b, w).to_owned();
            let (bn, mut out) = bn_train(a, &mut self.running[l + 1], gamma.view(), beta.view(), BN_MOMENTUM);
            out.mapv_inplace(|v| v.max(0.0));
            ensure_finite(&out, &format!("hidden layer {l}"))?;
            layers.push(LayerCache {
                input: x,
                bn,
                out: out.clone(),
            });
            x = out;
        }
        Ok(ForwardCache { input_bn, layers })
    }

    /// Per-task losses, the gradient of `Σ w_i L_i` and, on request, the
    /// per-task gradient norms at the last shared layer. Requires train mode.
    pub fn loss_and_gradients(
        &mut self,
        states: ArrayView2<f64>,
        features: &TaskFeatures,
        psi_plus: ArrayView2<f64>,
        psi_minus: ArrayView2<f64>,
        weights: &[f64],
        with_task_norms: bool,
    ) -> Result<LossOutput> {
        if self.mode != Mode::Train {
            return Err(Error::Usage("loss_and_gradients requires train mode".into()));
        }
        self.check_features(features)?;
        let (batch, tasks) = (states.nrows(), self.arch.task_count);
        if psi_plus.dim() != (batch, tasks) || psi_minus.dim() != (batch, tasks) {
            return Err(Error::Usage(format!(
                "payoff matrices must be {batch} x {tasks}"
            )));
        }
        if weights.len() != tasks {
            return Err(Error::Usage(format!("expected {tasks} task weights")));
        }
        if psi_plus.iter().chain(psi_minus.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: "branch payoffs".into(),
            });
        }

        let cache = self.forward_train(states)?;
        let hidden = &cache.layers.last().unwrap().out;
        let (u, c) = self.effective_heads(features)?;
        let logits = hidden.dot(&u) + &c;
        ensure_finite(&logits, "task heads")?;

        let inv_b = 1.0 / batch as f64;
        let mut task_losses = vec![0.0; tasks];
        let mut dlogits = Array2::zeros((batch, tasks));
        for m in 0..batch {
            for i in 0..tasks {
                let z = logits[[m, i]];
                let f = sigmoid(z);
                let slope = sigmoid(z) * sigmoid(-z);
                let (pp, pm) = (psi_plus[[m, i]], psi_minus[[m, i]]);
                task_losses[i] -= (pp * f + pm * (1.0 - f)) * inv_b;
                dlogits[[m, i]] = -weights[i] * (pp - pm) * slope * inv_b;
            }
        }
        let global_loss = task_losses.iter().zip(weights).map(|(l, w)| l * w).sum();

        let mut grads = vec![0.0; self.layout.total];
        self.backward(&cache, &u, features, &dlogits, &mut grads);
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric {
                layer: "backward pass".into(),
            });
        }
        let task_grad_norms = with_task_norms.then(|| self.last_layer_task_norms(&cache, &u, &dlogits));
        Ok(LossOutput {
            task_losses,
            global_loss,
            grads,
            task_grad_norms,
        })
    }

    fn backward(
        &self,
        cache: &ForwardCache,
        u: &Array2<f64>,
        features: &TaskFeatures,
        dlogits: &Array2<f64>,
        grads: &mut [f64],
    ) {
        let h = self.arch.last_width();
        let (tasks, width) = (self.arch.task_count, self.arch.head_width);
        let hidden = &cache.layers.last().unwrap().out;

        // Heads: dV_i = hᵀ g_i Z_iᵀ, db_i = Σ g_i Z_i.
        let gh = hidden.t().dot(dlogits);
        let gsum = dlogits.sum_axis(Axis(0));
        for i in 0..tasks {
            for r in 0..width {
                let z = features[[i, r]];
                let col = i * width + r;
                for j in 0..h {
                    grads[self.layout.head_weight + j * tasks * width + col] = gh[[j, i]] * z;
                }
                grads[self.layout.head_bias + col] = gsum[i] * z;
            }
        }

        let mut upstream = dlogits.dot(&u.t());
        for l in (0..self.arch.hidden.len()).rev() {
            let layer = &cache.layers[l];
            let w = self.arch.hidden[l];
            let (woff, goff, boff) = self.layout.hidden[l];
            Zip::from(&mut upstream)
                .and(&layer.out)
                .for_each(|g, o| {
                    if *o <= 0.0 {
                        *g = 0.0;
                    }
                });
            let gamma = self.vector(goff, w);
            let (da, dgamma, dbeta) = bn_backward(&upstream, &layer.bn, gamma);
            grads[goff..goff + w].copy_from_slice(dgamma.as_slice().unwrap());
            grads[boff..boff + w].copy_from_slice(dbeta.as_slice().unwrap());
            let dw = layer.input.t().dot(&da);
            let fan_in = layer.input.ncols();
            grads[woff..woff + fan_in * w]
                .iter_mut()
                .zip(dw.iter())
                .for_each(|(g, v)| *g = *v);
            upstream = da.dot(&self.weight(l).t());
        }

        let d = self.arch.input_dim;
        let dgamma = (&upstream * &cache.input_bn.hat).sum_axis(Axis(0));
        let dbeta = upstream.sum_axis(Axis(0));
        grads[self.layout.input_gamma..self.layout.input_gamma + d]
            .copy_from_slice(dgamma.as_slice().unwrap());
        grads[self.layout.input_beta..self.layout.input_beta + d]
            .copy_from_slice(dbeta.as_slice().unwrap());
    }

    /// Frobenius norm of the gradient of each weighted task loss with respect
    /// to the last shared affine weights.
    ///
    /// The upstream gradient of task `i` at the last hidden layer is
    /// `mask ∘ (e_i u_iᵀ)`, so after batch-norm backward the weight gradient
    /// factors as `γ_j σ_j⁻¹ u_ij (T_i - x̄ A_i - P C_i)[a, j]` with
    /// `T_i = Xᵀ(mask ∘ e_i)`, `P = Xᵀ x̂` and per-column batch means `A`,
    /// `C`. Only `T_i` costs a batch-sized product; it is computed for a
    /// block of tasks in one gemm.
    fn last_layer_task_norms(
        &self,
        cache: &ForwardCache,
        u: &Array2<f64>,
        dlogits: &Array2<f64>,
    ) -> Vec<f64> {
        let l = self.arch.hidden.len() - 1;
        let layer = &cache.layers[l];
        let w = self.arch.hidden[l];
        let gamma = self.vector(self.layout.hidden[l].1, w);
        let (batch, tasks) = dlogits.dim();
        let inv_b = 1.0 / batch as f64;
        let x = &layer.input;
        let fan_in = x.ncols();
        let mask = layer.out.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let a = mask.t().dot(dlogits) * inv_b;
        let c = (&mask * &layer.bn.hat).t().dot(dlogits) * inv_b;
        let p = x.t().dot(&layer.bn.hat);
        let colsum = x.sum_axis(Axis(0));
        let scale: Vec<f64> = (0..w).map(|j| gamma[j] * layer.bn.inv_std[j]).collect();

        let block = 32.min(tasks);
        let mut norms = Vec::with_capacity(tasks);
        let mut stacked = Array2::<f64>::zeros((batch, w * block));
        let mask_rows = mask.as_slice().expect("standard layout");
        for start in (0..tasks).step_by(block) {
            let end = (start + block).min(tasks);
            let width = (end - start) * w;
            for (m, mut row) in stacked.rows_mut().into_iter().enumerate() {
                let row = row.as_slice_mut().expect("standard layout");
                let mrow = &mask_rows[m * w..(m + 1) * w];
                for (slot, i) in (start..end).enumerate() {
                    let e = dlogits[[m, i]];
                    for (dst, mk) in row[slot * w..(slot + 1) * w].iter_mut().zip(mrow) {
                        *dst = mk * e;
                    }
                }
            }
            let t = x.t().dot(&stacked.slice(s![.., ..width]));
            for (slot, i) in (start..end).enumerate() {
                let mut sq = 0.0;
                for j in 0..w {
                    let f = scale[j] * u[[j, i]];
                    if f == 0.0 {
                        continue;
                    }
                    let (aj, cj) = (a[[j, i]], c[[j, i]]);
                    for r in 0..fan_in {
                        let g = t[[r, slot * w + j]] - colsum[r] * aj - p[[r, j]] * cj;
                        sq += (f * g) * (f * g);
                    }
                }
                norms.push(sq.sqrt());
            }
        }
        norms
    }

    /// Copy trunk parameters and batch-norm statistics from `src`; heads untouched.
    pub fn transfer_shared_from(&mut self, src: &MultitaskNet) -> Result<()> {
        if src.arch.input_dim != self.arch.input_dim || src.arch.hidden != self.arch.hidden {
            return Err(Error::Usage(format!(
                "trunk shapes differ: {:?}/{:?} vs {:?}/{:?}",
                src.arch.input_dim, src.arch.hidden, self.arch.input_dim, self.arch.hidden
            )));
        }
        let len = self.trunk_len();
        self.params[..len].copy_from_slice(&src.params[..len]);
        self.running.clone_from(&src.running);
        Ok(())
    }

    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            format_version: CHECKPOINT_VERSION,
            architecture: self.arch.clone(),
            params: self.params.clone(),
            running_mean: self.running.iter().map(|r| r.mean.clone()).collect(),
            running_var: self.running.iter().map(|r| r.var.clone()).collect(),
        }
    }

    pub fn from_checkpoint(ck: NetCheckpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported network format version {}",
                ck.format_version
            )));
        }
        let mut net = Self::new(ck.architecture, 0)?;
        if ck.params.len() != net.params.len()
            || ck.running_mean.len() != net.running.len()
            || ck.running_var.len() != net.running.len()
        {
            return Err(Error::Checkpoint("parameter count does not match architecture".into()));
        }
        net.params = ck.params;
        for (r, (m, v)) in net
            .running
            .iter_mut()
            .zip(ck.running_mean.into_iter().zip(ck.running_var))
        {
            if m.len() != r.mean.len() || v.len() != r.var.len() {
                return Err(Error::Checkpoint("running statistics have wrong width".into()));
            }
            r.mean = m;
            r.var = v;
        }
        net.mode = Mode::Eval;
        Ok(net)
    }
}

/// Copy the shared trunk of `src` into `dst`.
pub fn transfer_shared(src: &MultitaskNet, dst: &mut MultitaskNet) -> Result<()> {
    dst.transfer_shared_from(src)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    pub params: Vec<f64>,
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
}

fn he_uniform(rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize) {
    let bound = (6.0 / fan_in as f64).sqrt();
    for v in out {
        *v = rng.random_range(-bound..bound);
    }
}

fn ensure_finite(a: &Array2<f64>, layer: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer: layer.to_string(),
        })
    }
}

fn bn_train(
    mut x: Array2<f64>,
    running: &mut RunningStats,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    momentum: f64,
) -> (BnCache, Array2<f64>) {
    let b = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).unwrap();
    x -= &mean;
    let var = x.map_axis(Axis(0), |c| c.iter().map(|v| v * v).sum::<f64>() / b);
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    x *= &inv_std;
    let hat = x;
    let out = &hat * &gamma + &beta;
    let unbiased = b / (b - 1.0);
    for j in 0..mean.len() {
        running.mean[j] = (1.0 - momentum) * running.mean[j] + momentum * mean[j];
        running.var[j] = (1.0 - momentum) * running.var[j] + momentum * var[j] * unbiased;
    }
    (BnCache { hat, inv_std }, out)
}

fn bn_eval(
    x: ArrayView2<f64>,
    running: &RunningStats,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> Array2<f64> {
    let mut out = x.to_owned();
    bn_eval_inplace(&mut out, running, gamma, beta);
    out
}

fn bn_eval_inplace(
    x: &mut Array2<f64>,
    running: &RunningStats,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) {
    let scale: Array1<f64> = running
        .var
        .iter()
        .zip(gamma.iter())
        .map(|(v, g)| g / (v + BN_EPS).sqrt())
        .collect();
    let shift: Array1<f64> = running
        .mean
        .iter()
        .zip(scale.iter().zip(beta.iter()))
        .map(|(m, (s, b))| b - m * s)
        .collect();
    *x *= &scale;
    *x += &shift;
}

/// Gradient through `y = γ x̂ + β` with batch statistics. Returns
/// `(dL/dx, dL/dγ, dL/dβ)`.
fn bn_backward(
    dy: &Array2<f64>,
    cache: &BnCache,
    gamma: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let b = dy.nrows() as f64;
    let dgamma = (dy * &cache.hat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    // dx = γ/σ (dy - mean(dy) - x̂ mean(dy x̂))
    let mean_dy = &dbeta / b;
    let mean_dy_hat = &dgamma / b;
    let mut dx = dy - &mean_dy;
    dx -= &(&cache.hat * &mean_dy_hat);
    let scale = &gamma * &cache.inv_std;
    dx *= &scale;
    (dx, dgamma, dbeta)
}
