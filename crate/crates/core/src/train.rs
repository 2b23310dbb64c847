//! Two-phase training: straight-through pretraining until the codebook is
//! in use, then joint training through the quantized path.
//!
//! Plain SGD with global-norm clipping, applied separately to the network
//! parameters and to the codebook. The learning rate halves after
//! `patience_epochs` epochs without validation improvement; training stops
//! after `max_decays` decays or `max_epochs` epochs.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::code_perplexity;
use crate::data::{batch_iter, epoch_seed, SequenceBatch};
use crate::error::{Error, Result};
use crate::model::{eval_perplexity, eval_perplexity_phase, LatentInjection, Mode, ModelConfig, ModelState, Phase};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub slices: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Pretraining continues while the held-out code perplexity is `≤ sigma`.
    pub sigma: f64,
    pub batch_size: usize,
    pub lr_init: f64,
    pub decay_factor: f64,
    pub patience_epochs: usize,
    pub max_decays: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub dropout: f64,
    pub clip_norm: f64,
    pub latent_injection: LatentInjection,
    /// Start in the joint phase (no straight-through pretraining).
    pub skip_pretrain: bool,
}

pub const DEFAULT_SIGMA_FRAC: f64 = 0.05;

impl Default for TrainConfig {
    fn default() -> Self {
        let k = 512;
        TrainConfig {
            codebook_size: k,
            latent_dim: 16,
            slices: 2,
            hidden_dim: 64,
            embed_dim: 64,
            alpha: 0.25,
            beta: 0.0,
            sigma: DEFAULT_SIGMA_FRAC * k as f64,
            batch_size: 32,
            lr_init: 1.0,
            decay_factor: 2.0,
            patience_epochs: 2,
            max_decays: 5,
            max_epochs: 50,
            seed: 0,
            mode: Mode::Q,
            dropout: 0.5,
            clip_norm: 5.0,
            latent_injection: LatentInjection::Input,
            skip_pretrain: false,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            latent_dim: self.latent_dim,
            slices: self.slices,
            codebook_size: self.codebook_size,
            mode: self.mode,
            alpha: self.alpha,
            beta: self.beta,
            dropout: self.dropout,
            latent_injection: self.latent_injection,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        let k = self.codebook_size as f64;
        if !(self.sigma >= 1.0 && self.sigma <= k) {
            return bad(format!("sigma {} outside [1, K = {k}]", self.sigma));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return bad(format!("lr_init must be positive, got {}", self.lr_init));
        }
        if !(self.decay_factor > 1.0) {
            return bad(format!("decay_factor must exceed 1, got {}", self.decay_factor));
        }
        if self.patience_epochs == 0 || self.max_epochs == 0 {
            return bad("patience_epochs and max_epochs must be at least 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        self.model_config(5).validate()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_rec: f64,
    pub loss_kl: f64,
    pub loss_code: f64,
    /// Code perplexity on the held-out monitoring batch.
    pub ppl_code: f64,
    pub valid_ppl: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

/// Learning-rate decay on validation plateaus.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub decays: usize,
    best: f64,
    stale: usize,
    factor: f64,
    patience: usize,
    max_decays: usize,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        LrSchedule {
            lr: cfg.lr_init,
            decays: 0,
            best: f64::INFINITY,
            stale: 0,
            factor: cfg.decay_factor,
            patience: cfg.patience_epochs,
            max_decays: cfg.max_decays,
        }
    }

    /// Feeds one epoch's validation loss; returns the learning rate for the
    /// next epoch and whether to stop.
    pub fn observe(&mut self, loss: f64) -> (f64, bool) {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr /= self.factor;
                self.decays += 1;
                self.stale = 0;
            }
        }
        (self.lr, self.decays >= self.max_decays)
    }

    /// Forgets the best loss seen so far (used when the validation path
    /// changes at the phase switch).
    pub fn reset_history(&mut self) {
        self.best = f64::INFINITY;
        self.stale = 0;
    }
}

/// Replays `history` from `lr_init`: the learning rate after the last
/// epoch and whether training should stop.
pub fn lr_schedule(history: &[f64], cfg: &TrainConfig) -> (f64, bool) {
    let mut s = LrSchedule::new(cfg);
    let mut out = (s.lr, false);
    for &loss in history {
        out = s.observe(loss);
    }
    out
}

/// `p ← p − lr·g` over one parameter group, after scaling the group's
/// gradients so their global norm is at most `clip`. Returns the norm
/// before clipping.
pub fn sgd_step<'a, N: AsRef<str>>(
    group: impl IntoIterator<Item = (N, &'a mut Tensor)>,
    lr: f64,
    clip: f64,
) -> Result<f64> {
    let group: Vec<(N, &mut Tensor)> = group.into_iter().collect();
    let mut sq = 0.0;
    for (name, t) in &group {
        let name = name.as_ref();
        if let Some(g) = t.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient in parameter {name} at entry {i}"
                )));
            }
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    let scale = if norm > clip { clip / norm } else { 1.0 };
    for (_, t) in group {
        let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
        for (p, g) in t.data_mut().iter_mut().zip(g) {
            *p -= lr * scale * g;
        }
    }
    Ok(norm)
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub best: ModelState,
    pub best_epoch: usize,
    pub reports: Vec<TrainReport>,
    /// Held-out code perplexity at the evaluation that ended pretraining.
    pub exit_ppl_code: Option<f64>,
}

/// Per-epoch hook, called after each report with the current model and
/// whether it is the best so far. Errors abort training.
pub trait EpochObserver {
    fn on_epoch(&mut self, report: &TrainReport, state: &ModelState, is_best: bool) -> Result<()>;
}

impl EpochObserver for () {
    fn on_epoch(&mut self, _: &TrainReport, _: &ModelState, _: bool) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(&TrainReport, &ModelState, bool) -> Result<()>> EpochObserver for F {
    fn on_epoch(&mut self, report: &TrainReport, state: &ModelState, is_best: bool) -> Result<()> {
        self(report, state, is_best)
    }
}

/// The fixed-size monitoring batch for epoch `epoch`, drawn from `valid`.
pub fn monitor_batch(valid: &[Vec<usize>], m: usize, seed: u64, epoch: usize) -> Result<SequenceBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed ^ 0x6d6f_6e69_746f_72, epoch));
    let n = m.min(valid.len());
    let mut idx = sample(&mut rng, valid.len(), n).into_vec();
    idx.sort_unstable();
    let seqs: Vec<&[usize]> = idx.iter().map(|&i| valid[i].as_slice()).collect();
    SequenceBatch::from_sequences(&seqs)
}

/// Code perplexity of `batch` under the current encoder and codebook.
pub fn batch_code_perplexity(state: &ModelState, batch: &SequenceBatch) -> Result<f64> {
    let tape = Tape::new();
    let bound = state.bind_frozen(&tape);
    let zs = state.encode(&bound, batch)?;
    let asg = state.assign(&zs, batch)?;
    Ok(code_perplexity(&asg, state.codebook.size())?.1)
}

pub fn train(
    cfg: &TrainConfig,
    vocab_size: usize,
    train_set: &[Vec<usize>],
    valid_set: &[Vec<usize>],
    observer: &mut impl EpochObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Argument("training and validation corpora must be non-empty".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = ModelState::new(cfg.model_config(vocab_size), &mut init_rng)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e6f_6973_65);

    let mut phase = if cfg.skip_pretrain { Phase::Joint } else { Phase::Pretrain };
    let mut schedule = LrSchedule::new(cfg);
    let mut reports = Vec::new();
    let mut best = (f64::INFINITY, state.clone(), 0);
    let mut exit_ppl_code = None;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let lr = schedule.lr;
        let (mut rec, mut kl, mut code, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (bi, batch) in batch_iter(train_set, cfg.batch_size, Some(epoch_seed(cfg.seed, epoch)))?.enumerate() {
            let tape = Tape::new();
            let bound = state.bind(&tape);
            let out = state.forward(&bound, &batch, phase, &mut noise_rng)?;
            let total = out.loss_total.item();
            if !total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss {total} at epoch {epoch}, batch {bi}"
                )));
            }
            rec += out.loss_rec;
            kl += out.loss_kl;
            code += out.loss_code;
            batches += 1;
            let grads = tape.backward(out.loss_total)?;
            state.absorb(&bound, &grads)?;
            drop(bound);
            // Codebook first, then the network, mirroring the update order
            // of the algorithm listing; the two groups are independent.
            sgd_step(
                state
                    .codebook
                    .slices_mut()
                    .iter_mut()
                    .enumerate()
                    .map(|(i, c)| (format!("codebook.{i}"), c.atoms_mut())),
                lr,
                cfg.clip_norm,
            )?;
            sgd_step(state.params.iter_mut(), lr, cfg.clip_norm)?;
            state.zero_grad();
        }

        let ppl_code = batch_code_perplexity(&state, &monitor_batch(valid_set, cfg.batch_size, cfg.seed, epoch)?)?;
        let valid_ppl = eval_perplexity(&state, valid_set, cfg.batch_size)?;
        if !valid_ppl.is_finite() {
            return Err(Error::Divergence(format!("validation perplexity {valid_ppl} at epoch {epoch}")));
        }
        let phase_loss = match (phase, cfg.mode) {
            (Phase::Pretrain, Mode::Q) => eval_perplexity_phase(&state, valid_set, cfg.batch_size, phase)?.ln(),
            _ => valid_ppl.ln(),
        };
        let n = batches as f64;
        let report = TrainReport {
            epoch,
            phase,
            loss_rec: rec / n,
            loss_kl: kl / n,
            loss_code: code / n,
            ppl_code,
            valid_ppl,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        let is_best = valid_ppl < best.0;
        if is_best {
            best = (valid_ppl, state.clone(), epoch);
        }
        observer.on_epoch(&report, &state, is_best)?;
        reports.push(report);

        let (_, stop) = schedule.observe(phase_loss);
        if phase == Phase::Pretrain && ppl_code > cfg.sigma {
            phase = Phase::Joint;
            exit_ppl_code = Some(ppl_code);
            schedule.reset_history();
        }
        if stop {
            break;
        }
    }

    Ok(TrainOutcome {
        state,
        best: best.1,
        best_epoch: best.2,
        reports,
        exit_ppl_code,
    })
}
