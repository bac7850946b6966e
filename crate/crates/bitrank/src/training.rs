//! Stochastic gradient training with Adam: pairwise ranking losses, uniform
//! and adaptive negative sampling, and the straight-through sign gradient
//! for the binary representation.
//!
//! The binary forward keeps all parameters in single precision and runs the
//! sign dot product in the real domain; gradients flow through the sign via
//! the straight-through mask (identity inside [-1, 1], zero outside) and
//! through the scale factors via the subgradient of the L1-norm mean,
//! `d(mean |w|)/dw_m = sign(w_m)/n`.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::distributions::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::dataset::{InteractionSet, PositiveSets};
use crate::error::{Error, Result};
use crate::kernels::dot;
use crate::model::{scale_factor, sign1, sign_dot_f32, DenseModel, Representation};

/// Resample cap when rejecting positives during uniform negative draws.
const MAX_REJECTION_ATTEMPTS: usize = 100;

/// Pairwise ranking loss selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `1 - sigmoid(r_ui - r_uj)`, minimized exactly as printed.
    Bpr,
    /// `-ln sigmoid(r_ui - r_uj)`, the conventional alternative.
    BprLog,
    /// `max(0, 1 - r_ui + r_uj)` with violation-seeking resampling.
    AdaptiveHinge,
}

impl Loss {
    pub fn as_str(self) -> &'static str {
        match self {
            Loss::Bpr => "bpr",
            Loss::BprLog => "bpr_log",
            Loss::AdaptiveHinge => "adaptive_hinge",
        }
    }

    /// Loss value and its derivative with respect to `d = r_ui - r_uj`.
    #[inline]
    fn value_and_slope(self, d: f32) -> (f32, f32) {
        match self {
            Loss::Bpr => {
                // sigmoid(-d) is 1 - sigmoid(d) without the cancellation
                // that would round the loss to exactly 0 for large d; the
                // slope -sigmoid(d) * sigmoid(-d) stays accurate even where
                // the loss itself saturates in f32 (|d| beyond ~17).
                let loss = sigmoid(-d);
                (loss, -sigmoid(d) * loss)
            }
            Loss::BprLog => {
                // softplus(-d) is the numerically stable -ln sigmoid(d).
                let loss = if d > 0.0 {
                    (-d).exp().ln_1p()
                } else {
                    -d + d.exp().ln_1p()
                };
                (loss, sigmoid(d) - 1.0)
            }
            Loss::AdaptiveHinge => {
                let l = 1.0 - d;
                if l > 0.0 {
                    (l, -1.0)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }

    pub fn triplet_loss(self, r_ui: f32, r_uj: f32) -> f32 {
        self.value_and_slope(r_ui - r_uj).0
    }
}

impl std::str::FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpr" => Ok(Loss::Bpr),
            "bpr_log" | "bpr-log" => Ok(Loss::BprLog),
            "adaptive_hinge" | "adaptive-hinge" => Ok(Loss::AdaptiveHinge),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss {other:?} (expected bpr, bpr_log or adaptive_hinge)"
            ))),
        }
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `1 - sigmoid(r_ui - r_uj)`; always in (0, 1).
pub fn bpr_loss(r_ui: f32, r_uj: f32) -> f32 {
    Loss::Bpr.triplet_loss(r_ui, r_uj)
}

/// `max(0, 1 - r_ui + r_uj)`.
pub fn hinge_loss(r_ui: f32, r_uj: f32) -> f32 {
    Loss::AdaptiveHinge.triplet_loss(r_ui, r_uj)
}

/// Straight-through surrogate derivative of the sign function:
/// 1 inside |w| <= 1, 0 outside.
#[inline]
pub fn ste_grad(w: f32) -> f32 {
    if w.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub representation: Representation,
    pub loss: Loss,
    pub learning_rate: f32,
    pub l2: f32,
    pub minibatch_size: usize,
    pub epochs: usize,
    /// Attempt budget `k` for adaptive-hinge negative resampling.
    pub max_sampled: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 32,
            representation: Representation::Dense,
            loss: Loss::Bpr,
            learning_rate: 0.01,
            l2: 1e-6,
            minibatch_size: 256,
            epochs: 10,
            max_sampled: 5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 32 != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim must be a positive multiple of 32, got {}",
                self.dim
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.l2 < 0.0 || !self.l2.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "l2 penalty must be non-negative, got {}",
                self.l2
            )));
        }
        if self.minibatch_size == 0 {
            return Err(Error::InvalidConfig("minibatch size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if self.max_sampled == 0 {
            return Err(Error::InvalidConfig("max_sampled must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam first/second moment accumulators for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    /// One standard bias-corrected Adam step over the full tensor.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                left: params.len(),
                right: grads.len(),
            });
        }
        let corrections = self.begin_step();
        self.apply(0, params, grads, corrections, lr, "adam_step", 0)
    }

    /// Advances the shared timestep and returns the bias-correction
    /// denominators (1 - beta1^t, 1 - beta2^t).
    fn begin_step(&mut self) -> (f32, f32) {
        self.t += 1;
        let t = self.t as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    /// Updates the coordinate range starting at `offset` with `grads`.
    fn apply(
        &mut self,
        offset: usize,
        params: &mut [f32],
        grads: &[f32],
        (corr1, corr2): (f32, f32),
        lr: f32,
        tensor: &'static str,
        row: usize,
    ) -> Result<()> {
        for (k, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { tensor, row });
            }
            let idx = offset + k;
            let m = self.beta1 * self.m[idx] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.v[idx] + (1.0 - self.beta2) * g * g;
            self.m[idx] = m;
            self.v[idx] = v;
            let m_hat = m / corr1;
            let v_hat = v / corr2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Uniformly samples a negative item for `user`, rejecting known positives.
///
/// For the adaptive hinge, candidates are rescored and the first one whose
/// triplet loss is nonzero is returned; after `k` attempts the last draw is
/// returned anyway. For BPR-style losses the first accepted draw wins and
/// `k` is irrelevant. Returns `None` when the user's positives cover the
/// whole catalog or rejection sampling exhausts its attempt budget.
pub fn sample_negative(
    user_positives: &[u32],
    num_items: usize,
    r_ui: f32,
    loss: Loss,
    k: usize,
    mut score_item: impl FnMut(u32) -> f32,
    rng: &mut impl Rng,
) -> Option<u32> {
    if user_positives.len() >= num_items {
        return None;
    }
    let draw_valid = |rng: &mut dyn rand::RngCore| -> Option<u32> {
        for _ in 0..MAX_REJECTION_ATTEMPTS {
            let j = rng.gen_range(0..num_items as u32);
            if user_positives.binary_search(&j).is_err() {
                return Some(j);
            }
        }
        None
    };
    match loss {
        Loss::Bpr | Loss::BprLog => draw_valid(rng),
        Loss::AdaptiveHinge => {
            let mut last = None;
            for _ in 0..k {
                let j = draw_valid(rng)?;
                if hinge_loss(r_ui, score_item(j)) > 0.0 {
                    return Some(j);
                }
                last = Some(j);
            }
            last
        }
    }
}

/// Gradients of one triplet loss, plus the loss value.
#[derive(Debug, Clone)]
pub struct TripletGrads {
    pub d_user: Vec<f32>,
    pub d_pos: Vec<f32>,
    pub d_neg: Vec<f32>,
    pub d_user_bias: f32,
    pub d_pos_bias: f32,
    pub d_neg_bias: f32,
    pub loss: f32,
}

impl TripletGrads {
    fn zeroed(dim: usize) -> Self {
        TripletGrads {
            d_user: vec![0.0; dim],
            d_pos: vec![0.0; dim],
            d_neg: vec![0.0; dim],
            d_user_bias: 0.0,
            d_pos_bias: 0.0,
            d_neg_bias: 0.0,
            loss: 0.0,
        }
    }
}

/// Exact analytic gradients of the triplet loss (plus L2 terms) with
/// respect to the user row, both item rows and the three biases.
///
/// In binary mode the sign path is masked by [`ste_grad`] and the scale
/// path differentiates the L1-norm mean.
pub fn grad_triplet(
    model: &DenseModel,
    mode: Representation,
    loss: Loss,
    user: usize,
    pos: usize,
    neg: usize,
    l2: f32,
) -> Result<TripletGrads> {
    model.check_indices(user, pos)?;
    model.check_indices(user, neg)?;
    let mut out = TripletGrads::zeroed(model.dim);
    grad_triplet_into(model, mode, loss, user, pos, neg, l2, &mut out);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn grad_triplet_into(
    model: &DenseModel,
    mode: Representation,
    loss: Loss,
    user: usize,
    pos: usize,
    neg: usize,
    l2: f32,
    out: &mut TripletGrads,
) {
    let u_row = model.user_row(user);
    let i_row = model.item_row(pos);
    let j_row = model.item_row(neg);
    let b_u = model.user_bias[user];
    let b_i = model.item_bias[pos];
    let b_j = model.item_bias[neg];

    match mode {
        Representation::Dense => {
            let r_ui = dot(u_row, i_row) + b_u + b_i;
            let r_uj = dot(u_row, j_row) + b_u + b_j;
            let (loss_val, slope) = loss.value_and_slope(r_ui - r_uj);
            for m in 0..model.dim {
                out.d_user[m] = slope * (i_row[m] - j_row[m]) + l2 * u_row[m];
                out.d_pos[m] = slope * u_row[m] + l2 * i_row[m];
                out.d_neg[m] = -slope * u_row[m] + l2 * j_row[m];
            }
            // The user bias cancels in the score difference.
            out.d_user_bias = l2 * b_u;
            out.d_pos_bias = slope + l2 * b_i;
            out.d_neg_bias = -slope + l2 * b_j;
            out.loss = loss_val;
        }
        Representation::Binary => {
            let n = model.dim as f32;
            let beta = scale_factor(u_row);
            let alpha_i = scale_factor(i_row);
            let alpha_j = scale_factor(j_row);
            let d_ui = sign_dot_f32(u_row, i_row);
            let d_uj = sign_dot_f32(u_row, j_row);
            let r_ui = beta * alpha_i * d_ui + b_u + b_i;
            let r_uj = beta * alpha_j * d_uj + b_u + b_j;
            let (loss_val, slope) = loss.value_and_slope(r_ui - r_uj);
            for m in 0..model.dim {
                let su = sign1(u_row[m]);
                let si = sign1(i_row[m]);
                let sj = sign1(j_row[m]);
                let mask_u = ste_grad(u_row[m]);
                let mask_i = ste_grad(i_row[m]);
                let mask_j = ste_grad(j_row[m]);
                // d r_ui / d u_m: scale path + masked sign path.
                let dr_ui_du = su / n * alpha_i * d_ui + beta * alpha_i * mask_u * si;
                let dr_uj_du = su / n * alpha_j * d_uj + beta * alpha_j * mask_u * sj;
                out.d_user[m] = slope * (dr_ui_du - dr_uj_du) + l2 * u_row[m];
                out.d_pos[m] =
                    slope * (si / n * beta * d_ui + beta * alpha_i * mask_i * su) + l2 * i_row[m];
                out.d_neg[m] =
                    -slope * (sj / n * beta * d_uj + beta * alpha_j * mask_j * su) + l2 * j_row[m];
            }
            out.d_user_bias = l2 * b_u;
            out.d_pos_bias = slope + l2 * b_i;
            out.d_neg_bias = -slope + l2 * b_j;
            out.loss = loss_val;
        }
    }
}

/// Per-epoch progress record handed to the caller's sink.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub duration: Duration,
}

/// Training summary returned alongside the fitted model.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub epoch_durations: Vec<Duration>,
    /// Pairs dropped because no valid negative could be drawn.
    pub skipped_pairs: usize,
}

/// Sparse per-minibatch gradient accumulator for one parameter tensor.
struct RowAccum {
    width: usize,
    rows: Vec<u32>,
    slot_of: HashMap<u32, usize>,
    grads: Vec<f32>,
}

impl RowAccum {
    fn new(width: usize) -> Self {
        RowAccum {
            width,
            rows: Vec::new(),
            slot_of: HashMap::new(),
            grads: Vec::new(),
        }
    }

    fn clear(&mut self) {
        self.rows.clear();
        self.slot_of.clear();
        self.grads.clear();
    }

    fn add(&mut self, row: u32, grad: &[f32]) {
        debug_assert_eq!(grad.len(), self.width);
        let slot = *self.slot_of.entry(row).or_insert_with(|| {
            self.rows.push(row);
            self.grads.extend(std::iter::repeat(0.0).take(self.width));
            self.rows.len() - 1
        });
        let base = slot * self.width;
        for (acc, &g) in self.grads[base..base + self.width].iter_mut().zip(grad) {
            *acc += g;
        }
    }

    fn apply(
        &self,
        adam: &mut AdamState,
        params: &mut [f32],
        lr: f32,
        tensor: &'static str,
    ) -> Result<()> {
        let corrections = adam.begin_step();
        for (slot, &row) in self.rows.iter().enumerate() {
            let base = row as usize * self.width;
            let gbase = slot * self.width;
            adam.apply(
                base,
                &mut params[base..base + self.width],
                &self.grads[gbase..gbase + self.width],
                corrections,
                lr,
                tensor,
                row as usize,
            )?;
        }
        Ok(())
    }
}

/// Fits a factorization model with minibatch Adam.
///
/// Embeddings start from Normal(0, 1/dim) (standard deviation `1/sqrt(dim)`)
/// and biases from zero. Each epoch shuffles the interactions, draws one
/// negative per positive, accumulates triplet gradients per minibatch and
/// applies one Adam step per touched parameter tensor. Deterministic for a
/// fixed config; single-threaded.
pub fn fit(
    train: &InteractionSet,
    positives: &PositiveSets,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<(DenseModel, TrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput);
    }
    if positives.num_users() != train.num_users() {
        return Err(Error::InvalidConfig(format!(
            "positive sets cover {} users, dataset has {}",
            positives.num_users(),
            train.num_users()
        )));
    }

    let n = config.dim;
    let num_users = train.num_users();
    let num_items = train.num_items();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0f32, (1.0 / n as f32).sqrt()).expect("valid stddev");

    let mut model = DenseModel {
        dim: n,
        num_users,
        num_items,
        user_factors: (0..num_users * n).map(|_| normal.sample(&mut rng)).collect(),
        item_factors: (0..num_items * n).map(|_| normal.sample(&mut rng)).collect(),
        user_bias: vec![0.0; num_users],
        item_bias: vec![0.0; num_items],
        mode: config.representation,
    };

    let mut adam_user_fac = AdamState::new(num_users * n);
    let mut adam_item_fac = AdamState::new(num_items * n);
    let mut adam_user_bias = AdamState::new(num_users);
    let mut adam_item_bias = AdamState::new(num_items);

    let mut acc_user_fac = RowAccum::new(n);
    let mut acc_item_fac = RowAccum::new(n);
    let mut acc_user_bias = RowAccum::new(1);
    let mut acc_item_bias = RowAccum::new(1);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut scratch = TripletGrads::zeroed(n);
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;

        for batch in order.chunks(config.minibatch_size) {
            acc_user_fac.clear();
            acc_item_fac.clear();
            acc_user_bias.clear();
            acc_item_bias.clear();
            let mut batch_has_grads = false;

            for &idx in batch {
                let u = train.user_ids()[idx] as usize;
                let i = train.item_ids()[idx] as usize;
                let r_ui = forward(&model, config.representation, u, i);
                let j = match sample_negative(
                    positives.set(u),
                    num_items,
                    r_ui,
                    config.loss,
                    config.max_sampled,
                    |cand| forward(&model, config.representation, u, cand as usize),
                    &mut rng,
                ) {
                    Some(j) => j as usize,
                    None => {
                        report.skipped_pairs += 1;
                        continue;
                    }
                };

                grad_triplet_into(
                    &model,
                    config.representation,
                    config.loss,
                    u,
                    i,
                    j,
                    config.l2,
                    &mut scratch,
                );
                loss_sum += scratch.loss as f64;
                loss_count += 1;
                batch_has_grads = true;

                acc_user_fac.add(u as u32, &scratch.d_user);
                acc_item_fac.add(i as u32, &scratch.d_pos);
                acc_item_fac.add(j as u32, &scratch.d_neg);
                acc_user_bias.add(u as u32, &[scratch.d_user_bias]);
                acc_item_bias.add(i as u32, &[scratch.d_pos_bias]);
                acc_item_bias.add(j as u32, &[scratch.d_neg_bias]);
            }

            if batch_has_grads {
                let lr = config.learning_rate;
                acc_user_fac.apply(&mut adam_user_fac, &mut model.user_factors, lr, "user_factors")?;
                acc_item_fac.apply(&mut adam_item_fac, &mut model.item_factors, lr, "item_factors")?;
                acc_user_bias.apply(&mut adam_user_bias, &mut model.user_bias, lr, "user_bias")?;
                acc_item_bias.apply(&mut adam_item_bias, &mut model.item_bias, lr, "item_bias")?;
            }
        }

        let stats = EpochStats {
            epoch,
            mean_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { 0.0 },
            duration: start.elapsed(),
        };
        progress(&stats);
        report.epoch_losses.push(stats.mean_loss);
        report.epoch_durations.push(stats.duration);
    }

    Ok((model, report))
}

#[inline]
fn forward(model: &DenseModel, mode: Representation, user: usize, item: usize) -> f32 {
    let u_row = model.user_row(user);
    let i_row = model.item_row(item);
    let bias = model.user_bias[user] + model.item_bias[item];
    match mode {
        Representation::Dense => dot(u_row, i_row) + bias,
        Representation::Binary => {
            scale_factor(u_row) * scale_factor(i_row) * sign_dot_f32(u_row, i_row) + bias
        }
    }
}
