//! Alternating WGAN loop: k_critic DP-sanitized critic ascent steps per
//! generator descent step, stopping at max_epochs or budget exhaustion.
//!
//! The critic trains with SGD on the sanitized (clip + noise + average)
//! per-example gradients and optional weight clipping; the generator trains
//! with RMSProp on the exact gradient. With the budget set to infinity the
//! same code path runs with sigma = 0 and no clip, which reproduces a plain
//! WGAN loop update for update.
//!
//! Rng streams are split by purpose (init / lot sampling / noise prior /
//! DP noise) so the parameter trajectory is a pure function of
//! (seed, config, dataset).

use crate::discriminator::{DiscriminatorParams, DiscriminatorShape};
use crate::generator::{generate_on_tape, GeneratorParams};
use crate::privacy::{clip, noise_and_average, PrivacyError, PrivacyLedger};
use crate::tensor::{Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training aborted: non-finite {0}")]
    NonFinite(String),
    #[error("invalid training setup: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// RMSProp decay for the generator's squared-gradient accumulators.
const RMS_RHO: f64 = 0.99;
const RMS_EPS: f64 = 1e-8;
/// Redraw bound for empty Poisson lots.
const MAX_LOT_REDRAWS: usize = 10_000;

/// Serialize f64 infinity as the string "inf" (JSON has no infinity).
mod eps_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            v.serialize(s)
        } else {
            "inf".serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub k_critic: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Privacy budget; infinity disables DP entirely.
    #[serde(with = "eps_serde")]
    pub budget_eps: f64,
    /// Poisson sampling probability used when DP is on.
    pub q: f64,
    pub sigma: f64,
    pub delta: f64,
    pub clip_bound: f64,
    /// WGAN critic weight clip; None disables it.
    pub weight_clip: Option<f64>,
    pub seed: u64,
    pub attention_enabled: bool,
    /// Also sanitize and account generator updates (the ledger then counts
    /// both sides). Off by default: the generator sees data only through
    /// the critic.
    pub account_generator_steps: bool,
    /// Initialize the generator kernel mean at the training-data mean.
    pub kernel_mean_init: bool,
    /// Generator kernel init standard deviation; None keeps 1.0.
    pub kernel_init_sd: Option<f64>,
    /// Epoch after which the learning rate decays geometrically.
    pub lr_anneal_after: Option<usize>,
    /// Per-epoch decay factor once annealing starts.
    pub lr_anneal: f64,
    /// Critic warmup: 100 critic iterations per generator step for the
    /// first 25 generator steps and every 500th thereafter. `None`
    /// resolves to on without DP and off with DP (warmup consumes budget).
    pub critic_warmup: Option<bool>,
    /// Exponential-moving-average decay for the released generator
    /// weights (post-processing of the trajectory); None disables.
    pub generator_ema: Option<f64>,
    /// Spatial attention hidden width; None keeps ceil(T/2).
    pub m_dim: Option<usize>,
    /// Temporal attention hidden width; None keeps ceil(T/2).
    pub h_dim: Option<usize>,
    /// Critic temporal conv kernel length; None keeps 3.
    pub kd_len: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            k_critic: 5,
            max_epochs: 400,
            batch_size: 10,
            budget_eps: f64::INFINITY,
            q: 0.01,
            sigma: 2.0,
            delta: 1e-7,
            clip_bound: 1.0,
            weight_clip: Some(0.01),
            seed: 0,
            attention_enabled: false,
            account_generator_steps: false,
            kernel_mean_init: true,
            kernel_init_sd: None,
            lr_anneal_after: None,
            lr_anneal: 0.97,
            critic_warmup: None,
            generator_ema: Some(0.999),
            m_dim: None,
            h_dim: None,
            kd_len: None,
        }
    }
}

impl TrainConfig {
    pub fn dp_enabled(&self) -> bool {
        self.budget_eps.is_finite()
    }

    pub fn warmup_enabled(&self) -> bool {
        self.critic_warmup.unwrap_or(!self.dp_enabled())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Validation("learning_rate must be positive".into()));
        }
        if self.k_critic == 0 || self.batch_size == 0 {
            return Err(TrainError::Validation("k_critic and batch_size must be >= 1".into()));
        }
        if self.dp_enabled() {
            if !(self.q > 0.0 && self.q <= 1.0) {
                return Err(TrainError::Validation("q must lie in (0, 1]".into()));
            }
            if !(self.sigma > 0.0) {
                return Err(TrainError::Validation("sigma must be positive for DP".into()));
            }
            if !(self.delta > 0.0 && self.delta < 1.0) {
                return Err(TrainError::Validation("delta must lie in (0, 1)".into()));
            }
            if !self.clip_bound.is_finite() || !(self.clip_bound > 0.0) {
                return Err(TrainError::Validation("clip bound must be positive and finite".into()));
            }
            if !(self.budget_eps > 0.0) {
                return Err(TrainError::Validation("budget_eps must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    BudgetExhausted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub n_train_samples: usize,
    pub effective_q: f64,
    pub epochs_run: usize,
    pub critic_steps: u64,
    pub generator_steps: u64,
    /// Per-epoch mean critic objective (real minus fake score).
    pub critic_loss: Vec<f64>,
    /// Per-epoch mean generator loss (negative mean fake score).
    pub generator_loss: Vec<f64>,
    /// Per-epoch epsilon; empty when DP is off.
    pub epsilon_trajectory: Vec<f64>,
    #[serde(with = "eps_serde")]
    pub final_epsilon: f64,
    pub stopped: StopReason,
}

pub struct TrainState {
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    /// RMSProp squared-gradient accumulators for the generator.
    pub gen_rms_acc: Vec<f64>,
    /// RMSProp accumulators for the critic; used only when DP is off
    /// (DP runs update the critic by plain SGD on the sanitized gradient).
    pub critic_rms_acc: Vec<f64>,
    /// Bias-corrected EMA of the generator's flat parameters.
    pub gen_ema: Vec<f64>,
    pub gen_ema_weight: f64,
    pub ledger: Option<PrivacyLedger>,
    pub epoch: usize,
    pub critic_steps: u64,
    pub generator_steps: u64,
}

impl TrainState {
    pub fn epsilon(&self) -> f64 {
        self.ledger.as_ref().map_or(f64::INFINITY, |l| l.epsilon())
    }
}

pub struct Trainer {
    pub state: TrainState,
    config: TrainConfig,
    laplacian: Tensor,
    windows: Vec<Tensor>,
    effective_q: f64,
    gen_batch: usize,
    lot_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    dp_rng: ChaCha8Rng,
    current_lr: f64,
}

impl Trainer {
    /// `windows`: the T x N training samples; `laplacian`: N x N from the
    /// graph module.
    pub fn new(windows: Vec<Tensor>, laplacian: Tensor, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if windows.is_empty() {
            return Err(TrainError::Validation("no training samples".into()));
        }
        let t_len = windows[0].rows();
        let n_nodes = windows[0].cols();
        if laplacian.shape() != [n_nodes, n_nodes] {
            return Err(TrainError::Validation(format!(
                "laplacian shape {:?} does not match {} nodes",
                laplacian.shape(),
                n_nodes
            )));
        }
        for w in &windows {
            if w.shape() != [t_len, n_nodes] {
                return Err(TrainError::Validation("training samples differ in shape".into()));
            }
        }

        let n = windows.len();
        // DP runs sample lots at the configured q; otherwise the expected
        // lot size matches the plain batch size.
        let effective_q = if config.dp_enabled() {
            config.q
        } else {
            (config.batch_size as f64 / n as f64).min(1.0)
        };
        let gen_batch = ((effective_q * n as f64).round() as usize).max(1);

        let mut init_rng = stream_rng(config.seed, 0);
        let kernel_mean = if config.kernel_mean_init {
            let total: f64 = windows.iter().map(|w| w.data().iter().sum::<f64>()).sum();
            let count: usize = windows.iter().map(|w| w.numel()).sum();
            Some(total / count as f64)
        } else {
            None
        };
        let generator = GeneratorParams::init_with_scale(
            n_nodes,
            t_len,
            kernel_mean,
            config.kernel_init_sd.unwrap_or(1.0),
            &mut init_rng,
        );
        let mut disc_shape = DiscriminatorShape::new(n_nodes, t_len, config.attention_enabled);
        if let Some(m) = config.m_dim {
            disc_shape.m_dim = m;
        }
        if let Some(h) = config.h_dim {
            disc_shape.h_dim = h;
        }
        if let Some(kd) = config.kd_len {
            if kd == 0 || kd > t_len {
                return Err(TrainError::Validation(format!(
                    "kd_len {} must lie in [1, {}]",
                    kd, t_len
                )));
            }
            disc_shape.kd_len = kd;
        }
        let discriminator = DiscriminatorParams::init(disc_shape, &mut init_rng);
        let gen_rms_acc = vec![0.0; generator.flat_len()];
        let critic_rms_acc = vec![0.0; discriminator.flat_len()];
        let gen_ema = vec![0.0; generator.flat_len()];

        let ledger = if config.dp_enabled() {
            Some(PrivacyLedger::new(
                effective_q,
                config.sigma,
                config.delta,
                config.clip_bound,
            )?)
        } else {
            None
        };

        let seed = config.seed;
        let learning_rate = config.learning_rate;
        Ok(Trainer {
            state: TrainState {
                generator,
                discriminator,
                gen_rms_acc,
                critic_rms_acc,
                gen_ema,
                gen_ema_weight: 0.0,
                ledger,
                epoch: 0,
                critic_steps: 0,
                generator_steps: 0,
            },
            config,
            laplacian,
            windows,
            effective_q,
            gen_batch,
            lot_rng: stream_rng(seed, 1),
            noise_rng: stream_rng(seed, 2),
            dp_rng: stream_rng(seed, 3),
            current_lr: learning_rate,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn effective_q(&self) -> f64 {
        self.effective_q
    }

    /// Poisson lot: each sample independently with probability
    /// `effective_q`; empty draws are redrawn.
    pub fn draw_lot(&mut self) -> Result<Vec<usize>> {
        for _ in 0..MAX_LOT_REDRAWS {
            let lot: Vec<usize> = (0..self.windows.len())
                .filter(|_| self.lot_rng.gen::<f64>() < self.effective_q)
                .collect();
            if !lot.is_empty() {
                return Ok(lot);
            }
        }
        Err(TrainError::Validation(
            "Poisson sampling kept drawing empty lots; q is too small for this dataset".into(),
        ))
    }

    /// One critic ascent step on the given lot. Refuses to run if the next
    /// step would exhaust the budget. Returns the mean critic objective.
    pub fn critic_step_on_lot(&mut self, lot: &[usize]) -> Result<f64> {
        if lot.is_empty() {
            return Err(TrainError::Privacy(PrivacyError::EmptyLot));
        }
        if let Some(ledger) = &self.state.ledger {
            ledger.check_next_step(self.config.budget_eps)?;
        }

        let m = lot.len();
        let n_nodes = self.windows[0].cols();
        let zs: Vec<Tensor> = (0..m)
            .map(|_| {
                let z = crate::generator::sample_noise(n_nodes, &mut self.noise_rng);
                Tensor::new(vec![n_nodes, 1], z.data().to_vec()).expect("finite noise")
            })
            .collect();

        let dp_on = self.config.dp_enabled();
        let clip_bound = if dp_on { self.config.clip_bound } else { f64::INFINITY };
        let sigma = if dp_on { self.config.sigma } else { 0.0 };

        let mut clipped = Vec::with_capacity(m);
        let mut objective_sum = 0.0;
        for (&idx, z) in lot.iter().zip(&zs) {
            let (flat, value) = self.critic_example_grad(idx, z)?;
            objective_sum += value;
            clipped.push(clip(&flat, clip_bound)?);
        }
        let update = noise_and_average(&clipped, sigma, clip_bound, m, &mut self.dp_rng)?;

        // Gradient ascent on the sanitized gradient. DP runs use plain SGD
        // (the DP optimizer is SGD-based); without DP the critic uses
        // RMSProp like the generator, the standard WGAN setup.
        let step: Vec<f64> = if dp_on {
            update
        } else {
            update
                .iter()
                .enumerate()
                .map(|(i, &g)| {
                    self.state.critic_rms_acc[i] =
                        RMS_RHO * self.state.critic_rms_acc[i] + (1.0 - RMS_RHO) * g * g;
                    g / (self.state.critic_rms_acc[i].sqrt() + RMS_EPS)
                })
                .collect()
        };
        self.state
            .discriminator
            .apply_scaled(&step, self.current_lr)
            .map_err(|_| TrainError::NonFinite("critic update".into()))?;
        if let Some(c) = self.config.weight_clip {
            self.state.discriminator.clamp_weights(c);
        }
        if let Some(ledger) = &mut self.state.ledger {
            ledger.step();
        }
        self.state.critic_steps += 1;
        Ok(objective_sum / m as f64)
    }

    /// Per-example gradient of `F_w(x_real) - F_w(G(z))` with respect to
    /// the critic's trainable tensors, plus the objective value.
    fn critic_example_grad(&self, idx: usize, z_col: &Tensor) -> Result<(Vec<f64>, f64)> {
        let disc = &self.state.discriminator;
        let mut tape = Tape::new();
        let dvars = disc.register(&mut tape);
        let gvars = self.state.generator.register(&mut tape);

        let real = tape.leaf(self.windows[idx].clone());
        let s_real = crate::discriminator::score_on_tape(&mut tape, disc, &dvars, &self.laplacian, real)?;
        let zv = tape.leaf(z_col.clone());
        let fake = generate_on_tape(&mut tape, gvars, zv)?;
        let s_fake = crate::discriminator::score_on_tape(&mut tape, disc, &dvars, &self.laplacian, fake)?;
        let obj = tape.sub(s_real, s_fake)?;
        let value = tape.scalar_value(obj);
        let grads = tape.backward(obj)?;

        let mut flat = Vec::with_capacity(disc.flat_len());
        for v in disc.trainable_vars(&dvars) {
            flat.extend_from_slice(grads.grad(v));
        }
        Ok((flat, value))
    }

    /// One generator descent step on fresh noise. Returns the generator
    /// loss (negative mean critic score on fakes).
    pub fn generator_step(&mut self) -> Result<f64> {
        let m = self.gen_batch;
        let n_nodes = self.windows[0].cols();
        let account = self.config.account_generator_steps && self.config.dp_enabled();
        if account {
            if let Some(ledger) = &self.state.ledger {
                ledger.check_next_step(self.config.budget_eps)?;
            }
        }

        let mut per_example: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut loss_sum = 0.0;
        for _ in 0..m {
            let z = crate::generator::sample_noise(n_nodes, &mut self.noise_rng);
            let z_col = Tensor::new(vec![n_nodes, 1], z.data().to_vec())?;

            let mut tape = Tape::new();
            let gvars = self.state.generator.register(&mut tape);
            let dvars = self.state.discriminator.register(&mut tape);
            let zv = tape.leaf(z_col);
            let fake = generate_on_tape(&mut tape, gvars, zv)?;
            let s_fake = crate::discriminator::score_on_tape(
                &mut tape,
                &self.state.discriminator,
                &dvars,
                &self.laplacian,
                fake,
            )?;
            let loss = tape.neg(s_fake)?;
            loss_sum += tape.scalar_value(loss);
            let grads = tape.backward(loss)?;

            let mut flat = Vec::with_capacity(self.state.generator.flat_len());
            for v in [gvars.w, gvars.b, gvars.kernel] {
                flat.extend_from_slice(grads.grad(v));
            }
            per_example.push(flat);
        }

        let grad: Vec<f64> = if account {
            let clipped = per_example
                .iter()
                .map(|g| clip(g, self.config.clip_bound))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            noise_and_average(&clipped, self.config.sigma, self.config.clip_bound, m, &mut self.dp_rng)?
        } else {
            let dim = per_example[0].len();
            let mut avg = vec![0.0; dim];
            for g in &per_example {
                for (a, v) in avg.iter_mut().zip(g) {
                    *a += v;
                }
            }
            for a in avg.iter_mut() {
                *a /= m as f64;
            }
            avg
        };

        // RMSProp descent
        let lr = self.current_lr;
        let mut step = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            let g = grad[i];
            self.state.gen_rms_acc[i] = RMS_RHO * self.state.gen_rms_acc[i] + (1.0 - RMS_RHO) * g * g;
            step[i] = -g / (self.state.gen_rms_acc[i].sqrt() + RMS_EPS);
        }
        self.state
            .generator
            .apply_scaled(&step, lr)
            .map_err(|_| TrainError::NonFinite("generator update".into()))?;

        if account {
            if let Some(ledger) = &mut self.state.ledger {
                ledger.step();
            }
        }
        if let Some(decay) = self.config.generator_ema {
            let flat = self.state.generator.flat();
            for (e, v) in self.state.gen_ema.iter_mut().zip(&flat) {
                *e = decay * *e + (1.0 - decay) * v;
            }
            self.state.gen_ema_weight = decay * self.state.gen_ema_weight + (1.0 - decay);
        }
        self.state.generator_steps += 1;
        Ok(loss_sum / m as f64)
    }

    /// Swap the bias-corrected parameter average into the generator.
    fn apply_generator_ema(&mut self) -> Result<()> {
        if self.config.generator_ema.is_none() || self.state.gen_ema_weight == 0.0 {
            return Ok(());
        }
        let w = self.state.gen_ema_weight;
        let current = self.state.generator.flat();
        let delta: Vec<f64> = self
            .state
            .gen_ema
            .iter()
            .zip(&current)
            .map(|(e, c)| e / w - c)
            .collect();
        self.state
            .generator
            .apply_scaled(&delta, 1.0)
            .map_err(|_| TrainError::NonFinite("generator average".into()))?;
        Ok(())
    }

    /// Lots consumed per epoch: one expected pass over the data.
    pub fn lots_per_epoch(&self) -> usize {
        (1.0 / self.effective_q).ceil() as usize
    }

    /// Critic iterations before the next generator step.
    pub fn critic_iters(&self) -> usize {
        if self.config.warmup_enabled()
            && (self.state.generator_steps < 25 || self.state.generator_steps % 500 == 0)
        {
            100
        } else {
            self.config.k_critic
        }
    }

    /// Run the full alternating loop.
    pub fn run(mut self) -> Result<(TrainState, RunReport)> {
        let lots_per_epoch = self.lots_per_epoch();
        let mut critic_loss = Vec::new();
        let mut generator_loss = Vec::new();
        let mut epsilon_trajectory = Vec::new();
        let mut stopped = StopReason::MaxEpochs;

        'outer: for epoch in 0..self.config.max_epochs {
            self.state.epoch = epoch;
            if let Some(start) = self.config.lr_anneal_after {
                if epoch > start {
                    self.current_lr *= self.config.lr_anneal;
                }
            }
            let mut epoch_critic = Vec::new();
            let mut epoch_gen = Vec::new();
            let mut lots_used = 0;
            while lots_used < lots_per_epoch {
                let k = self.critic_iters();
                for _ in 0..k {
                    let lot = self.draw_lot()?;
                    match self.critic_step_on_lot(&lot) {
                        Ok(v) => {
                            epoch_critic.push(v);
                            lots_used += 1;
                        }
                        Err(TrainError::Privacy(PrivacyError::BudgetExhausted { .. })) => {
                            stopped = StopReason::BudgetExhausted;
                            record_epoch(
                                &mut critic_loss,
                                &mut generator_loss,
                                &epoch_critic,
                                &epoch_gen,
                            );
                            if self.state.ledger.is_some() {
                                epsilon_trajectory.push(self.state.epsilon());
                            }
                            break 'outer;
                        }
                        Err(e) => return Err(e),
                    }
                }
                match self.generator_step() {
                    Ok(v) => epoch_gen.push(v),
                    Err(TrainError::Privacy(PrivacyError::BudgetExhausted { .. })) => {
                        stopped = StopReason::BudgetExhausted;
                        record_epoch(&mut critic_loss, &mut generator_loss, &epoch_critic, &epoch_gen);
                        if self.state.ledger.is_some() {
                            epsilon_trajectory.push(self.state.epsilon());
                        }
                        break 'outer;
                    }
                    Err(e) => return Err(e),
                }
            }
            record_epoch(&mut critic_loss, &mut generator_loss, &epoch_critic, &epoch_gen);
            if self.state.ledger.is_some() {
                epsilon_trajectory.push(self.state.epsilon());
            }
        }

        self.apply_generator_ema()?;

        if let Some(ledger) = &self.state.ledger {
            debug_assert_eq!(
                ledger.steps_taken(),
                self.state.critic_steps
                    + if self.config.account_generator_steps {
                        self.state.generator_steps
                    } else {
                        0
                    }
            );
        }

        let report = RunReport {
            config: self.config.clone(),
            n_train_samples: self.windows.len(),
            effective_q: self.effective_q,
            epochs_run: critic_loss.len(),
            critic_steps: self.state.critic_steps,
            generator_steps: self.state.generator_steps,
            critic_loss,
            generator_loss,
            epsilon_trajectory,
            final_epsilon: self.state.epsilon(),
            stopped,
        };
        Ok((self.state, report))
    }
}

fn record_epoch(
    critic_loss: &mut Vec<f64>,
    generator_loss: &mut Vec<f64>,
    epoch_critic: &[f64],
    epoch_gen: &[f64],
) {
    if epoch_critic.is_empty() && epoch_gen.is_empty() {
        return;
    }
    critic_loss.push(mean_or_zero(epoch_critic));
    generator_loss.push(mean_or_zero(epoch_gen));
}

fn mean_or_zero(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Convenience wrapper: build a [`Trainer`] and run it.
pub fn train(
    windows: Vec<Tensor>,
    laplacian: Tensor,
    config: TrainConfig,
) -> Result<(TrainState, RunReport)> {
    Trainer::new(windows, laplacian, config)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, normalize, split, synth_dataset};

    fn toy_setup(seed: u64) -> (Vec<Tensor>, Tensor) {
        let mut ds = synth_dataset(4, 120, seed).unwrap();
        normalize(&mut ds).unwrap();
        let (train_ds, _, _) = split(&ds, 0.7, 0.2, 0.1).unwrap();
        let w = make_windows(&train_ds.observations, 6, 3, 1).unwrap();
        (w.full_samples(), ds.laplacian.clone())
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: 2,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn non_dp_run_completes_max_epochs() {
        let (windows, lap) = toy_setup(1);
        let (state, report) = train(windows, lap, quick_config(3)).unwrap();
        assert_eq!(report.stopped, StopReason::MaxEpochs);
        assert_eq!(report.epochs_run, 2);
        assert!(report.final_epsilon.is_infinite());
        assert!(report.epsilon_trajectory.is_empty());
        assert!(state.ledger.is_none());
        // expected one data pass per epoch at batch 10 over ~75 samples
        assert_eq!(report.critic_steps, state.critic_steps);
        assert!(state.critic_steps > 0 && state.generator_steps > 0);
    }

    #[test]
    fn tiny_budget_stops_early_with_exhaustion() {
        let (windows, lap) = toy_setup(2);
        let mut cfg = quick_config(4);
        cfg.budget_eps = 0.45; // below epsilon after one step at these params
        cfg.q = 0.2;
        cfg.sigma = 1.0;
        cfg.max_epochs = 3;
        let (state, report) = train(windows, lap, cfg).unwrap();
        assert_eq!(report.stopped, StopReason::BudgetExhausted);
        assert!(state.ledger.is_some());
        assert!(report.final_epsilon < 0.45);
        assert!(report.critic_steps < 10);
    }

    #[test]
    fn budget_stop_happens_at_the_crossing_step() {
        // epsilon(q=0.2, sigma=1, delta=1e-5) crossing for the chosen budget
        let (windows, lap) = toy_setup(3);
        let mut cfg = quick_config(5);
        cfg.q = 0.2;
        cfg.sigma = 1.0;
        cfg.delta = 1e-5;
        cfg.budget_eps = 3.0;
        cfg.max_epochs = 50;
        let crossing =
            crate::privacy::crossing_steps(0.2, 1.0, 1e-5, 3.0, &crate::privacy::default_orders())
                .unwrap();
        let (state, report) = train(windows, lap, cfg).unwrap();
        assert_eq!(report.stopped, StopReason::BudgetExhausted);
        // the refused step is the crossing step, so the ledger sits one short
        assert_eq!(state.ledger.as_ref().unwrap().steps_taken(), crossing - 1);
        assert!(report.final_epsilon < 3.0);
    }

    #[test]
    fn k_critic_advances_ledger_per_cycle() {
        let (windows, lap) = toy_setup(4);
        let mut cfg = quick_config(6);
        cfg.budget_eps = 100.0;
        cfg.q = 0.1;
        cfg.max_epochs = 1;
        cfg.k_critic = 5;
        cfg.critic_warmup = Some(false);
        let (state, _) = train(windows, lap, cfg).unwrap();
        // 1 epoch: ceil(1/0.1)=10 lots -> 2 cycles -> 10 critic steps, 2 generator steps
        assert_eq!(state.critic_steps, 10);
        assert_eq!(state.generator_steps, 2);
        assert_eq!(state.ledger.as_ref().unwrap().steps_taken(), 10);
    }

    #[test]
    fn account_generator_steps_counts_both() {
        let (windows, lap) = toy_setup(5);
        let mut cfg = quick_config(7);
        cfg.budget_eps = 100.0;
        cfg.q = 0.1;
        cfg.max_epochs = 1;
        cfg.account_generator_steps = true;
        let (state, _) = train(windows, lap, cfg).unwrap();
        assert_eq!(
            state.ledger.as_ref().unwrap().steps_taken(),
            state.critic_steps + state.generator_steps
        );
    }

    #[test]
    fn trajectories_are_bit_identical_per_seed() {
        let (windows, lap) = toy_setup(6);
        let run = |seed: u64| {
            let mut cfg = quick_config(seed);
            cfg.max_epochs = 1;
            let (state, _) = train(windows.clone(), lap.clone(), cfg).unwrap();
            (state.generator.flat(), state.discriminator.flat())
        };
        let (g1, d1) = run(11);
        let (g2, d2) = run(11);
        assert_eq!(g1, g2);
        assert_eq!(d1, d2);
        let (g3, _) = run(12);
        assert_ne!(g1, g3);
    }

    #[test]
    fn dp_noise_changes_critic_updates() {
        let (windows, lap) = toy_setup(7);
        let mut base = quick_config(13);
        base.max_epochs = 1;
        base.q = 0.1;
        let mut dp = base.clone();
        dp.budget_eps = 1000.0;
        let (s_plain, _) = train(windows.clone(), lap.clone(), base).unwrap();
        let (s_dp, _) = train(windows, lap, dp).unwrap();
        assert_ne!(s_plain.discriminator.flat(), s_dp.discriminator.flat());
    }

    #[test]
    fn zero_critic_gives_zero_generator_gradient() {
        let (windows, lap) = toy_setup(8);
        let cfg = quick_config(14);
        let mut trainer = Trainer::new(windows, lap, cfg).unwrap();
        // zero every critic tensor: score is constant 0, so the generator
        // gradient vanishes and RMSProp leaves the parameters unchanged
        let zeroed: Vec<f64> = trainer
            .state
            .discriminator
            .flat()
            .iter()
            .map(|v| -v)
            .collect();
        trainer.state.discriminator.apply_scaled(&zeroed, 1.0).unwrap();
        let before = trainer.state.generator.flat();
        trainer.generator_step().unwrap();
        let after = trainer.state.generator.flat();
        assert_eq!(before, after);
    }

    #[test]
    fn generator_loss_decreases_against_frozen_favorable_critic() {
        // critic frozen at a linear scoring function favoring large
        // outputs: 50 generator steps must reduce the loss
        let (windows, lap) = toy_setup(9);
        let mut cfg = quick_config(15);
        cfg.learning_rate = 5e-3;
        let mut trainer = Trainer::new(windows, lap, cfg).unwrap();
        // wd > 0, kd a positive averaging kernel: score grows with output
        let d = &mut trainer.state.discriminator;
        d.kd = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        d.wd = Tensor::new(vec![1, d.shape.head_width()], vec![1.0; d.shape.head_width()]).unwrap();
        d.bd = Tensor::zeros(vec![1, 1]);

        let first = trainer.generator_step().unwrap();
        let mut last = first;
        for _ in 0..49 {
            last = trainer.generator_step().unwrap();
        }
        assert!(
            last < first,
            "generator loss did not decrease: {} -> {}",
            first,
            last
        );
    }

    #[test]
    fn run_report_serializes_with_inf_sentinel() {
        let (windows, lap) = toy_setup(10);
        let mut cfg = quick_config(16);
        cfg.max_epochs = 1;
        let (_, report) = train(windows, lap, cfg).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"final_epsilon\":\"inf\""));
        assert!(json.contains("\"budget_eps\":\"inf\""));
        let back: RunReport = serde_json::from_str(&json).unwrap();
        assert!(back.final_epsilon.is_infinite());
    }
}
