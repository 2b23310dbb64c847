//! Encoder, discretized bottleneck and decoder assembled into one model.
//!
//! Two variants share the same parameters:
//!
//! * [`Mode::Q`] feeds the quantized latent to the decoder (through the
//!   straight-through path once joint training starts) and has no KL term.
//! * [`Mode::R`] feeds a reparameterized Gaussian sample to the decoder; the
//!   codebook only regularizes the encoder states.
//!
//! The objective is always `L = L_rec + β·L_kl + L_code`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codebook::{
    aggregate_latent, aggregate_rows, code_perplexity, codebook_loss, straight_through, Assignment,
    SlicedCodebook,
};
use crate::data::{batch_iter, SequenceBatch, BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{dropout, Binding, EmbeddingTable, Linear, LstmCell, ParamSet};
use crate::tape::{sum_all, Tape, Var};
use crate::tensor::Tensor;


#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Q,
    R,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Joint,
}

/// How the latent reaches the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentInjection {
    /// Concatenated to the token embedding at every step.
    Input,
    /// Additionally mapped to the decoder's initial hidden state.
    InitAndInput,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.pad(match self { $(Self::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::Usage(format!(
                        "unknown {} {other:?}", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

text_enum!(Mode { Q => "q", R => "r" });
text_enum!(Phase { Pretrain => "pretrain", Joint => "joint" });
text_enum!(LatentInjection { Input => "input", InitAndInput => "init-and-input" });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Full latent width `D`.
    pub latent_dim: usize,
    /// Number of codebook slices `S`; `D` must be divisible by it.
    pub slices: usize,
    /// Atoms per slice `K`.
    pub codebook_size: usize,
    pub mode: Mode,
    pub alpha: f64,
    pub beta: f64,
    pub dropout: f64,
    pub latent_injection: LatentInjection,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} leaves no word ids", self.vocab_size));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.latent_dim == 0 {
            return bad("embed_dim, hidden_dim and latent_dim must be positive".into());
        }
        if self.slices == 0 || self.latent_dim % self.slices != 0 {
            return bad(format!(
                "latent_dim {} is not divisible by slices {}",
                self.latent_dim, self.slices
            ));
        }
        if self.codebook_size == 0 {
            return bad("codebook_size must be at least 1".into());
        }
        match self.mode {
            Mode::Q if self.beta != 0.0 => return bad(format!("mode q requires beta = 0, got {}", self.beta)),
            Mode::R if !(self.beta > 0.0) => return bad(format!("mode r requires beta > 0, got {}", self.beta)),
            _ => {}
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorHead {
    pub mean: Linear,
    pub logvar: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub embedding: EmbeddingTable,
    pub encoder: LstmCell,
    pub decoder: LstmCell,
    /// `z_t = W_e h_t + b_e`
    pub proj_e: Linear,
    pub out: Linear,
    pub posterior: Option<PosteriorHead>,
    pub init_proj: Option<Linear>,
    pub codebook: SlicedCodebook,
}

/// Parameters and codebook atoms recorded on one tape.
pub struct Bound<'t> {
    pub params: Binding<'t>,
    pub atoms: Vec<Var<'t>>,
}

pub struct ForwardOutput<'t> {
    pub loss_total: Var<'t>,
    pub loss_rec: f64,
    pub loss_kl: f64,
    pub loss_code: f64,
    pub asg: Assignment,
    pub ppl_code: f64,
    pub z_x: Var<'t>,
    pub rec: Var<'t>,
    pub code: Var<'t>,
}

/// One decoded candidate of [`ModelState::generate_topk`].
#[derive(Clone, Debug, PartialEq)]
pub struct TopkCandidate {
    pub rank: usize,
    /// Mean over positions of the summed per-slice squared distances.
    pub distance: f64,
    pub latent: Vec<f64>,
    pub tokens: Vec<usize>,
}

pub const DEFAULT_MAX_DECODE: usize = 50;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl ModelState {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut params = ParamSet::new();
        let embedding = EmbeddingTable::new(&mut params, "embedding", c.vocab_size, c.embed_dim, rng);
        let encoder = LstmCell::new(&mut params, "encoder", c.embed_dim, c.hidden_dim, rng);
        let decoder = LstmCell::new(&mut params, "decoder", c.embed_dim + c.latent_dim, c.hidden_dim, rng);
        let proj_e = Linear::new(&mut params, "proj_e", c.hidden_dim, c.latent_dim, 0.1, rng);
        let out = Linear::new(&mut params, "out", c.hidden_dim, c.vocab_size, 0.1, rng);
        let posterior = (c.mode == Mode::R).then(|| PosteriorHead {
            mean: Linear::new(&mut params, "posterior.mean", c.latent_dim, c.latent_dim, 0.1, rng),
            logvar: Linear::new(&mut params, "posterior.logvar", c.latent_dim, c.latent_dim, 0.1, rng),
        });
        let init_proj = (c.latent_injection == LatentInjection::InitAndInput)
            .then(|| Linear::new(&mut params, "init_proj", c.latent_dim, c.hidden_dim, 0.1, rng));
        let codebook = SlicedCodebook::init_uniform(c.slices, c.codebook_size, c.latent_dim, rng)?;
        Ok(ModelState {
            config,
            params,
            embedding,
            encoder,
            decoder,
            proj_e,
            out,
            posterior,
            init_proj,
            codebook,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            params: self.params.bind(tape),
            atoms: self.codebook.slices().iter().map(|c| tape.leaf(c.atoms())).collect(),
        }
    }

    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            params: self.params.bind_frozen(tape),
            atoms: self
                .codebook
                .slices()
                .iter()
                .map(|c| tape.constant(c.atoms().clone()))
                .collect(),
        }
    }

    /// Projected encoder states `z_t`, one `[batch × D]` value per step.
    pub fn encode<'t>(&self, bound: &Bound<'t>, batch: &SequenceBatch) -> Result<Vec<Var<'t>>> {
        let tape = bound.params.var(self.proj_e.weight).tape();
        let (mut h, mut c) = self.encoder.zero_state(tape, batch.batch_size());
        let mut zs = Vec::with_capacity(batch.max_len());
        for t in 0..batch.max_len() {
            let x = self.embedding.lookup(&bound.params, &batch.step(t))?;
            (h, c) = self.encoder.step(&bound.params, x, h, c)?;
            zs.push(self.proj_e.forward(&bound.params, h)?);
        }
        Ok(zs)
    }

    /// `z_t` for every position as a plain `[batch × T × D]` tensor.
    pub fn encode_tensor(&self, batch: &SequenceBatch) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let zs = self.encode(&bound, batch)?;
        Ok(stack_steps(&zs, batch.batch_size()))
    }

    pub fn assign(&self, zs: &[Var<'_>], batch: &SequenceBatch) -> Result<Assignment> {
        let z = stack_steps(zs, batch.batch_size());
        Ok(self.codebook.quantize_sequence(&z, batch.lengths())?.1)
    }

    /// Selected atoms `e_t` per step, zero rows at padding.
    pub fn selected<'t>(&self, bound: &Bound<'t>, asg: &Assignment) -> Result<Vec<Var<'t>>> {
        (0..asg.steps)
            .map(|t| self.codebook.gather_step(&bound.atoms, asg, t))
            .collect()
    }

    /// Teacher-forced reconstruction loss from latent `z_x`. Each valid
    /// token's NLL is weighted by `weight_per_token`; `1/batch` gives the
    /// per-sentence sum averaged over the batch. `rng` enables dropout.
    pub fn reconstruct<'t, R: Rng>(
        &self,
        bound: &Bound<'t>,
        batch: &SequenceBatch,
        z_x: Var<'t>,
        mut rng: Option<&mut R>,
        weight_per_token: f64,
    ) -> Result<Var<'t>> {
        let p = &bound.params;
        let tape = z_x.tape();
        let n = batch.batch_size();
        let (mut h, mut c) = self.decoder.zero_state(tape, n);
        if let Some(init) = &self.init_proj {
            h = init.forward(p, z_x)?.tanh();
        }
        let training = rng.is_some();
        let mut terms = Vec::with_capacity(batch.max_len());
        for t in 0..batch.max_len() {
            let mut emb = self.embedding.lookup(p, &batch.decoder_input(t))?;
            if let Some(r) = rng.as_deref_mut() {
                emb = dropout(emb, self.config.dropout, training, r)?;
            }
            (h, c) = self.decoder.decoder_step(p, emb, z_x, h, c)?;
            let mut out_h = h;
            if let Some(r) = rng.as_deref_mut() {
                out_h = dropout(out_h, self.config.dropout, training, r)?;
            }
            let logits = self.out.forward(p, out_h)?;
            let weights: Vec<f64> = batch.mask(t).iter().map(|m| m * weight_per_token).collect();
            terms.push(logits.softmax_xent(&batch.step(t), &weights)?);
        }
        sum_all(&terms)
    }

    fn finish<'t>(
        &self,
        rec: Var<'t>,
        kl: Option<Var<'t>>,
        code: Var<'t>,
        asg: Assignment,
        z_x: Var<'t>,
    ) -> Result<ForwardOutput<'t>> {
        let mut total = rec;
        let mut loss_kl = 0.0;
        if let Some(kl) = kl {
            loss_kl = kl.item();
            total = total.add(kl.scale(self.config.beta))?;
        }
        let loss_total = total.add(code)?;
        let (_, ppl_code) = code_perplexity(&asg, self.codebook.size())?;
        Ok(ForwardOutput {
            loss_total,
            loss_rec: rec.item(),
            loss_kl,
            loss_code: code.item(),
            asg,
            ppl_code,
            z_x,
            rec,
            code,
        })
    }

    /// Quantized-latent objective. `rng` enables dropout (training).
    ///
    /// In the pretrain phase the decoder reads the continuous mean of the
    /// encoder states and the codebook loss only moves the atoms. In the
    /// joint phase the decoder reads the quantized mean through the
    /// straight-through path.
    pub fn forward_q<'t, R: Rng>(
        &self,
        bound: &Bound<'t>,
        batch: &SequenceBatch,
        phase: Phase,
        rng: Option<&mut R>,
    ) -> Result<ForwardOutput<'t>> {
        if self.config.mode != Mode::Q {
            return Err(Error::Usage("forward_q called on a mode r model".into()));
        }
        let zs = self.encode(bound, batch)?;
        let asg = self.assign(&zs, batch)?;
        let e_sel = self.selected(bound, &asg)?;
        let lengths = batch.lengths();
        let (z_x, code) = match phase {
            Phase::Pretrain => {
                let frozen: Vec<Var<'t>> = zs.iter().map(Var::stop_gradient).collect();
                (
                    aggregate_latent(&zs, lengths)?,
                    codebook_loss(&frozen, &e_sel, self.config.alpha, lengths)?,
                )
            }
            Phase::Joint => {
                let st = zs
                    .iter()
                    .zip(&e_sel)
                    .map(|(z, e)| straight_through(*z, *e))
                    .collect::<Result<Vec<_>>>()?;
                (
                    aggregate_latent(&st, lengths)?,
                    codebook_loss(&zs, &e_sel, self.config.alpha, lengths)?,
                )
            }
        };
        let rec = self.reconstruct(bound, batch, z_x, rng, 1.0 / batch.batch_size() as f64)?;
        self.finish(rec, None, code, asg, z_x)
    }

    /// Gaussian-latent objective regularized by the codebook.
    pub fn forward_r<'t, R: Rng>(
        &self,
        bound: &Bound<'t>,
        batch: &SequenceBatch,
        phase: Phase,
        rng: &mut R,
        training: bool,
    ) -> Result<ForwardOutput<'t>> {
        let head = match (&self.posterior, self.config.mode) {
            (Some(h), Mode::R) => h,
            _ => return Err(Error::Usage("forward_r called on a mode q model".into())),
        };
        let zs = self.encode(bound, batch)?;
        let asg = self.assign(&zs, batch)?;
        let e_sel = self.selected(bound, &asg)?;
        let lengths = batch.lengths();
        let code = match phase {
            Phase::Pretrain => {
                let frozen: Vec<Var<'t>> = zs.iter().map(Var::stop_gradient).collect();
                codebook_loss(&frozen, &e_sel, self.config.alpha, lengths)?
            }
            Phase::Joint => codebook_loss(&zs, &e_sel, self.config.alpha, lengths)?,
        };
        let pooled = aggregate_latent(&zs, lengths)?;
        let (mean, logvar) = (head.mean.forward(&bound.params, pooled)?, head.logvar.forward(&bound.params, pooled)?);
        let kl = gaussian_kl(mean, logvar)?;
        let shape = mean.shape();
        let eps = Tensor::new(shape.clone(), (0..mean.numel()).map(|_| rng.sample(StandardNormal)).collect())?;
        let z = mean.add(logvar.scale(0.5).exp().mul_const(&eps)?)?;
        let weight = 1.0 / batch.batch_size() as f64;
        let rec = if training {
            self.reconstruct(bound, batch, z, Some(rng), weight)?
        } else {
            self.reconstruct::<R>(bound, batch, z, None, weight)?
        };
        self.finish(rec, Some(kl), code, asg, z)
    }

    /// Mode-dispatching training forward pass.
    pub fn forward<'t, R: Rng>(
        &self,
        bound: &Bound<'t>,
        batch: &SequenceBatch,
        phase: Phase,
        rng: &mut R,
    ) -> Result<ForwardOutput<'t>> {
        match self.config.mode {
            Mode::Q => self.forward_q(bound, batch, phase, Some(rng)),
            Mode::R => self.forward_r(bound, batch, phase, rng, true),
        }
    }

    /// Deterministic latent of each sequence: the quantized mean in mode q,
    /// the posterior mean in mode r.
    pub fn latent(&self, batch: &SequenceBatch) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        Ok(self.latent_on(&bound, batch)?.value())
    }

    fn latent_on<'t>(&self, bound: &Bound<'t>, batch: &SequenceBatch) -> Result<Var<'t>> {
        self.latent_for_phase(bound, batch, Phase::Joint)
    }

    /// Deterministic decoder input for `phase`: only mode q in pretraining
    /// differs, reading the continuous mean of `Z`.
    fn latent_for_phase<'t>(&self, bound: &Bound<'t>, batch: &SequenceBatch, phase: Phase) -> Result<Var<'t>> {
        let zs = self.encode(bound, batch)?;
        match (&self.posterior, self.config.mode) {
            (Some(head), Mode::R) => {
                let pooled = aggregate_latent(&zs, batch.lengths())?;
                head.mean.forward(&bound.params, pooled)
            }
            _ if phase == Phase::Pretrain => aggregate_latent(&zs, batch.lengths()),
            _ => {
                let asg = self.assign(&zs, batch)?;
                let e_sel = self.selected(bound, &asg)?;
                aggregate_latent(&e_sel, batch.lengths())
            }
        }
    }

    /// Summed token NLL and token count under teacher forcing, without
    /// dropout, decoding from [`Self::latent`].
    pub fn eval_nll(&self, batch: &SequenceBatch) -> Result<(f64, usize)> {
        self.eval_nll_phase(batch, Phase::Joint)
    }

    /// As [`Self::eval_nll`], along the decoder path used in `phase`.
    pub fn eval_nll_phase(&self, batch: &SequenceBatch, phase: Phase) -> Result<(f64, usize)> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let z = self.latent_for_phase(&bound, batch, phase)?;
        let rec = self.reconstruct::<rand_chacha::ChaCha8Rng>(&bound, batch, z, None, 1.0)?;
        Ok((rec.item(), batch.num_tokens()))
    }

    /// Greedy decoding of each row of `latents: [n × D]`. Output excludes
    /// the terminating EOS.
    pub fn decode_greedy(&self, latents: &Tensor, max_len: usize) -> Result<Vec<Vec<usize>>> {
        let shape = latents.shape();
        if shape.len() != 2 || shape[1] != self.config.latent_dim {
            return Err(Error::shape("decode_greedy", shape, &[0, self.config.latent_dim]));
        }
        let n = shape[0];
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let p = &bound.params;
        let z = tape.constant(latents.clone());
        let (mut h, mut c) = self.decoder.zero_state(&tape, n);
        if let Some(init) = &self.init_proj {
            h = init.forward(p, z)?.tanh();
        }
        let mut prev = vec![BOS; n];
        let mut out = vec![Vec::new(); n];
        let mut done = vec![false; n];
        for _ in 0..max_len {
            let emb = self.embedding.lookup(p, &prev)?;
            (h, c) = self.decoder.decoder_step(p, emb, z, h, c)?;
            let logits = self.out.forward(p, h)?.value();
            for b in 0..n {
                let tok = argmax(logits.row(b));
                prev[b] = tok;
                if done[b] {
                    continue;
                }
                if tok == EOS {
                    done[b] = true;
                } else {
                    out[b].push(tok);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    /// Decodes `λ·z₁ + (1−λ)·z₂` for `steps` evenly spaced `λ` in `[0, 1]`.
    pub fn interpolate(
        &self,
        x1: &[usize],
        x2: &[usize],
        steps: usize,
        requantize: bool,
        max_len: usize,
    ) -> Result<Vec<(f64, Vec<usize>)>> {
        if steps < 2 {
            return Err(Error::Argument(format!("interpolation needs at least 2 steps, got {steps}")));
        }
        let lat = self.latent(&SequenceBatch::from_sequences(&[x1, x2])?)?;
        let (z1, z2) = (lat.row(0), lat.row(1));
        let d = self.config.latent_dim;
        let lambdas: Vec<f64> = (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect();
        let mut rows = Vec::with_capacity(steps * d);
        for &l in &lambdas {
            let mut z: Vec<f64> = z1.iter().zip(z2).map(|(a, b)| l * a + (1.0 - l) * b).collect();
            if requantize {
                z = self.requantize(&z)?;
            }
            rows.extend(z);
        }
        let decoded = self.decode_greedy(&Tensor::new(vec![steps, d], rows)?, max_len)?;
        Ok(lambdas.into_iter().zip(decoded).collect())
    }

    fn requantize(&self, z: &[f64]) -> Result<Vec<f64>> {
        let d = self.codebook.slice_dim();
        let mut out = Vec::with_capacity(z.len());
        for (s, cb) in self.codebook.slices().iter().enumerate() {
            let (k, _) = cb.nearest(&z[s * d..(s + 1) * d])?;
            out.extend_from_slice(cb.atom(k));
        }
        Ok(out)
    }

    /// Candidate latents built from the `i`-th nearest atom at every
    /// position and slice, `i = 0..k`, each decoded greedily.
    pub fn topk_latents(&self, x: &[usize], k: usize) -> Result<Vec<(f64, Vec<f64>)>> {
        if self.config.mode != Mode::Q {
            return Err(Error::Usage("top-k generation requires a mode q model".into()));
        }
        let size = self.codebook.size();
        if k == 0 || k > size {
            return Err(Error::Argument(format!("top-k requires 1 <= k <= K = {size}, got {k}")));
        }
        let batch = SequenceBatch::from_sequences(&[x])?;
        let z = self.encode_tensor(&batch)?;
        let steps = batch.lengths()[0];
        let (d, s_count, width) = (self.codebook.slice_dim(), self.codebook.num_slices(), self.config.latent_dim);
        // ranked[t][s] = the k nearest (atom, distance) pairs
        let mut ranked = Vec::with_capacity(steps);
        for t in 0..steps {
            let row = &z.data()[t * width..(t + 1) * width];
            let per_slice = self
                .codebook
                .slices()
                .iter()
                .enumerate()
                .map(|(s, cb)| cb.top_k(&row[s * d..(s + 1) * d], k))
                .collect::<Result<Vec<_>>>()?;
            ranked.push(per_slice);
        }
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let mut sel = vec![0.0; steps * width];
            let mut dist = 0.0;
            for (t, per_slice) in ranked.iter().enumerate() {
                for (s, list) in per_slice.iter().enumerate() {
                    let (atom, dd) = list[i];
                    sel[t * width + s * d..t * width + (s + 1) * d]
                        .copy_from_slice(self.codebook.slices()[s].atom(atom));
                    dist += dd;
                }
            }
            debug_assert_eq!(s_count, ranked[0].len());
            let agg = aggregate_rows(&Tensor::new(vec![1, steps, width], sel)?, &[steps])?;
            out.push((dist / steps as f64, agg.into_data()));
        }
        Ok(out)
    }

    pub fn generate_topk(&self, x: &[usize], k: usize, max_len: usize) -> Result<Vec<TopkCandidate>> {
        let latents = self.topk_latents(x, k)?;
        let d = self.config.latent_dim;
        let flat: Vec<f64> = latents.iter().flat_map(|(_, z)| z.iter().copied()).collect();
        let decoded = self.decode_greedy(&Tensor::new(vec![k, d], flat)?, max_len)?;
        Ok(latents
            .into_iter()
            .zip(decoded)
            .enumerate()
            .map(|(rank, ((distance, latent), tokens))| TopkCandidate {
                rank,
                distance,
                latent,
                tokens,
            })
            .collect())
    }

    /// Greedy reconstruction from the deterministic latent.
    pub fn reconstruct_greedy(&self, x: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let lat = self.latent(&SequenceBatch::from_sequences(&[x])?)?;
        Ok(self.decode_greedy(&lat, max_len)?.remove(0))
    }

    /// Overwrites every parameter with the same-named tensor from `other`.
    pub fn load_tensors<'a>(
        &mut self,
        named: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        let mut seen = 0;
        for (name, t) in named {
            let target = if let Some(s) = name.strip_prefix("codebook.") {
                let idx: usize = s
                    .parse()
                    .map_err(|_| Error::Integrity(format!("bad codebook record {name:?}")))?;
                self.codebook
                    .slices_mut()
                    .get_mut(idx)
                    .ok_or_else(|| Error::Integrity(format!("codebook slice {idx} out of range")))?
                    .atoms_mut()
            } else {
                let id = self
                    .params
                    .id(name)
                    .ok_or_else(|| Error::Integrity(format!("unknown parameter {name:?}")))?;
                self.params.get_mut(id)
            };
            if target.shape() != t.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    target.shape()
                )));
            }
            target.data_mut().copy_from_slice(t.data());
            seen += 1;
        }
        let expected = self.params.len() + self.codebook.num_slices();
        if seen != expected {
            return Err(Error::Integrity(format!("expected {expected} parameter records, found {seen}")));
        }
        Ok(())
    }

    /// All trainable tensors by name, codebook slices last.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        for (i, cb) in self.codebook.slices().iter().enumerate() {
            out.push((format!("codebook.{i}"), cb.atoms()));
        }
        out
    }

    /// Folds the gradients of a backward pass into parameters and atoms.
    pub fn absorb(&mut self, bound: &Bound<'_>, grads: &crate::tape::Gradients) -> Result<()> {
        self.params.absorb(&bound.params, grads)?;
        for (cb, v) in self.codebook.slices_mut().iter_mut().zip(&bound.atoms) {
            if let Some(g) = grads.get(*v) {
                cb.atoms_mut().accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.zero_grad();
        for cb in self.codebook.slices_mut() {
            cb.atoms_mut().zero_grad();
        }
    }
}

/// `mean_b ½ Σ_j (μ² + σ² − log σ² − 1)`.
pub fn gaussian_kl<'t>(mean: Var<'t>, logvar: Var<'t>) -> Result<Var<'t>> {
    let shape = mean.shape();
    if shape != logvar.shape() || shape.len() != 2 {
        return Err(Error::shape("gaussian_kl", &shape, &logvar.shape()));
    }
    let n = mean.numel() as f64;
    let batch = shape[0] as f64;
    let inner = mean
        .square()?
        .add(logvar.exp())?
        .sub(logvar)?
        .sum()
        .add_scalar(-n);
    Ok(inner.scale(0.5 / batch))
}

/// Stacks per-step `[batch × D]` values into `[batch × T × D]`.
fn stack_steps(zs: &[Var<'_>], batch: usize) -> Tensor {
    let steps = zs.len();
    let d = zs.first().map_or(0, |z| z.numel() / batch.max(1));
    let mut out = vec![0.0; batch * steps * d];
    for (t, z) in zs.iter().enumerate() {
        z.with_value(|v| {
            for b in 0..batch {
                out[(b * steps + t) * d..(b * steps + t + 1) * d].copy_from_slice(&v[b * d..(b + 1) * d]);
            }
        });
    }
    Tensor::new(vec![batch, steps, d], out).expect("stacked shape is consistent")
}

/// `exp(total NLL / total tokens)` under teacher forcing, batching the
/// corpus in order with `m` sequences per batch.
pub fn eval_perplexity(state: &ModelState, corpus: &[Vec<usize>], m: usize) -> Result<f64> {
    eval_perplexity_phase(state, corpus, m, Phase::Joint)
}

/// [`eval_perplexity`] along the decoder path of `phase`.
pub fn eval_perplexity_phase(state: &ModelState, corpus: &[Vec<usize>], m: usize, phase: Phase) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty corpus".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for batch in batch_iter(corpus, m, None)? {
        let (n, t) = state.eval_nll_phase(&batch, phase)?;
        nll += n;
        tokens += t;
    }
    Ok((nll / tokens as f64).exp())
}

/// Usage histogram and code perplexity of the codebook over a corpus.
pub fn corpus_code_usage(state: &ModelState, corpus: &[Vec<usize>], m: usize) -> Result<(Vec<f64>, f64)> {
    let mut ids = Vec::new();
    for batch in batch_iter(corpus, m, None)? {
        let tape = Tape::new();
        let bound = state.bind_frozen(&tape);
        let zs = state.encode(&bound, &batch)?;
        ids.extend(state.assign(&zs, &batch)?.valid());
    }
    crate::codebook::histogram_perplexity(ids, state.codebook.size())
}

/// Builds a `[1 × D]` tensor, convenient for decoding a single latent.
pub fn latent_row(z: &[f64]) -> Tensor {
    Tensor::new(vec![1, z.len()], z.to_vec()).expect("row shape")
}
