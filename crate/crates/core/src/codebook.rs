//! The discretized bottleneck.
//!
//! A [`Codebook`] is a `K × d` matrix of atoms. A [`SlicedCodebook`] splits a
//! latent of width `D = S·d` into `S` contiguous slices and quantizes each
//! against its own codebook; the quantized latent is the concatenation of the
//! selected atoms in slice order.
//!
//! ```
//! use dbvae::codebook::Codebook;
//! use dbvae::tensor::Tensor;
//!
//! let cb = Codebook::new(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap()).unwrap();
//! let (idx, dist) = cb.nearest(&[0.9, 0.8]).unwrap();
//! assert_eq!(idx, 1);
//! assert!((dist - 0.05).abs() < 1e-12);
//! ```

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::uniform_tensor;
use crate::tape::{concat, sum_all, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    atoms: Tensor,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn by_distance(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

impl Codebook {
    pub fn new(atoms: Tensor) -> Result<Self> {
        if atoms.shape().len() != 2 || atoms.shape()[0] == 0 || atoms.shape()[1] == 0 {
            return Err(Error::Argument(format!(
                "codebook atoms must be a non-empty K×d matrix, got {:?}",
                atoms.shape()
            )));
        }
        if !atoms.is_finite() {
            return Err(Error::Domain {
                op: "Codebook::new",
                detail: "non-finite atom value".into(),
            });
        }
        Ok(Codebook {
            atoms: atoms.with_grad(),
        })
    }

    /// Atoms drawn from `U(−1/K, 1/K)`.
    pub fn init_uniform(k: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 {
            return Err(Error::Argument("codebook size must be at least 1".into()));
        }
        Codebook::new(uniform_tensor(vec![k, dim], 1.0 / k as f64, rng))
    }

    pub fn size(&self) -> usize {
        self.atoms.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.atoms.shape()[1]
    }

    pub fn atoms(&self) -> &Tensor {
        &self.atoms
    }

    pub fn atoms_mut(&mut self) -> &mut Tensor {
        &mut self.atoms
    }

    pub fn atom(&self, k: usize) -> &[f64] {
        self.atoms.row(k)
    }

    fn check_query(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::shape("codebook query", &[self.dim()], &[z.len()]));
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "nearest",
                detail: format!("query entry {i} = {}", z[i]),
            });
        }
        Ok(())
    }

    /// Index and squared distance of the closest atom; ties go to the lowest
    /// index.
    pub fn nearest(&self, z: &[f64]) -> Result<(usize, f64)> {
        self.check_query(z)?;
        let d = self.dim();
        let mut best = (0, f64::INFINITY);
        for (k, atom) in self.atoms.data().chunks_exact(d).enumerate() {
            let dist = sq_dist(z, atom);
            if dist < best.1 {
                best = (k, dist);
            }
        }
        Ok(best)
    }

    /// The `k` closest atoms, ascending by squared distance then index.
    pub fn top_k(&self, z: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.size() {
            return Err(Error::Argument(format!(
                "top-k requires 1 <= k <= K, got k = {k}, K = {}",
                self.size()
            )));
        }
        self.check_query(z)?;
        let d = self.dim();
        let mut all: Vec<(usize, f64)> = self
            .atoms
            .data()
            .chunks_exact(d)
            .enumerate()
            .map(|(i, atom)| (i, sq_dist(z, atom)))
            .collect();
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, by_distance);
            all.truncate(k);
        }
        all.sort_by(by_distance);
        Ok(all)
    }
}

/// Nearest-atom choice for every (sequence, step, slice); padded positions
/// carry `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub batch: usize,
    pub steps: usize,
    pub slices: usize,
    pub indices: Vec<Option<usize>>,
    pub distances: Vec<f64>,
}

impl Assignment {
    fn offset(&self, b: usize, t: usize, s: usize) -> usize {
        (b * self.steps + t) * self.slices + s
    }

    pub fn index(&self, b: usize, t: usize, s: usize) -> Option<usize> {
        self.indices[self.offset(b, t, s)]
    }

    pub fn distance(&self, b: usize, t: usize, s: usize) -> f64 {
        self.distances[self.offset(b, t, s)]
    }

    pub fn valid(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().flatten().copied()
    }

    /// Atom ids of slice `s` at step `t`, one per sequence.
    pub fn step_slice(&self, t: usize, s: usize) -> Vec<Option<usize>> {
        (0..self.batch).map(|b| self.index(b, t, s)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlicedCodebook {
    slices: Vec<Codebook>,
}

impl SlicedCodebook {
    pub fn new(slices: Vec<Codebook>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Argument("sliced codebook needs at least one slice".into()))?;
        let (k, d) = (first.size(), first.dim());
        if slices.iter().any(|c| c.size() != k || c.dim() != d) {
            return Err(Error::Argument("all slices must share K and slice width".into()));
        }
        Ok(SlicedCodebook { slices })
    }

    /// `slices` independent codebooks of `k` atoms covering a latent of width
    /// `latent_dim`.
    pub fn init_uniform(slices: usize, k: usize, latent_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if slices == 0 || latent_dim % slices != 0 {
            return Err(Error::Argument(format!(
                "latent width {latent_dim} is not divisible by slice count {slices}"
            )));
        }
        let d = latent_dim / slices;
        let books = (0..slices)
            .map(|_| Codebook::init_uniform(k, d, rng))
            .collect::<Result<Vec<_>>>()?;
        SlicedCodebook::new(books)
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn size(&self) -> usize {
        self.slices[0].size()
    }

    pub fn slice_dim(&self) -> usize {
        self.slices[0].dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.slice_dim() * self.num_slices()
    }

    pub fn slices(&self) -> &[Codebook] {
        &self.slices
    }

    pub fn slices_mut(&mut self) -> &mut [Codebook] {
        &mut self.slices
    }

    /// Quantizes `z: [batch × T × D]`; positions `t ≥ lengths[b]` are padding.
    ///
    /// Returns the selected atoms (zero at padding) and the assignment.
    pub fn quantize_sequence(&self, z: &Tensor, lengths: &[usize]) -> Result<(Tensor, Assignment)> {
        let shape = z.shape();
        if shape.len() != 3 || shape[2] != self.latent_dim() || shape[0] != lengths.len() {
            return Err(Error::shape(
                "quantize_sequence",
                shape,
                &[lengths.len(), 0, self.latent_dim()],
            ));
        }
        let (batch, steps, width) = (shape[0], shape[1], shape[2]);
        let (s_count, d) = (self.num_slices(), self.slice_dim());
        let mut selected = vec![0.0; z.numel()];
        let mut indices = Vec::with_capacity(batch * steps * s_count);
        let mut distances = Vec::with_capacity(batch * steps * s_count);
        for b in 0..batch {
            for t in 0..steps {
                let row = (b * steps + t) * width;
                for (s, cb) in self.slices.iter().enumerate() {
                    if t >= lengths[b] {
                        indices.push(None);
                        distances.push(0.0);
                        continue;
                    }
                    let part = &z.data()[row + s * d..row + (s + 1) * d];
                    let (k, dist) = cb.nearest(part)?;
                    selected[row + s * d..row + (s + 1) * d].copy_from_slice(cb.atom(k));
                    indices.push(Some(k));
                    distances.push(dist);
                }
            }
        }
        let asg = Assignment {
            batch,
            steps,
            slices: s_count,
            indices,
            distances,
        };
        Ok((Tensor::new(shape.to_vec(), selected)?, asg))
    }

    /// Selected atoms at step `t` as a `[batch × D]` tape value, gathered
    /// from the bound atom matrices so codebook gradients reach them.
    pub fn gather_step<'t>(&self, atoms: &[Var<'t>], asg: &Assignment, t: usize) -> Result<Var<'t>> {
        let parts = atoms
            .iter()
            .enumerate()
            .map(|(s, a)| a.gather_rows(&asg.step_slice(t, s)))
            .collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            concat(&parts)
        }
    }
}

/// Per-step row weights `1/len_b` for unmasked positions, zero elsewhere.
fn mean_weights(lengths: &[usize], steps: usize) -> Result<Vec<Vec<f64>>> {
    if let Some(b) = lengths.iter().position(|&l| l == 0) {
        return Err(Error::Argument(format!("sequence {b} is fully masked")));
    }
    Ok((0..steps)
        .map(|t| {
            lengths
                .iter()
                .map(|&l| if t < l { 1.0 / l as f64 } else { 0.0 })
                .collect()
        })
        .collect())
}

/// Masked mean over steps of `[batch × D]` values.
pub fn aggregate_latent<'t>(steps: &[Var<'t>], lengths: &[usize]) -> Result<Var<'t>> {
    let weights = mean_weights(lengths, steps.len())?;
    let terms = steps
        .iter()
        .zip(&weights)
        .map(|(v, w)| v.mul_rows(w))
        .collect::<Result<Vec<_>>>()?;
    sum_all(&terms)
}

/// Plain-data masked mean of `[batch × T × D]` over `T`.
pub fn aggregate_rows(z: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    let shape = z.shape();
    if shape.len() != 3 || shape[0] != lengths.len() {
        return Err(Error::shape("aggregate_rows", shape, &[lengths.len()]));
    }
    let (batch, steps, d) = (shape[0], shape[1], shape[2]);
    let weights = mean_weights(lengths, steps)?;
    let mut out = vec![0.0; batch * d];
    for b in 0..batch {
        for (t, w) in weights.iter().enumerate() {
            if w[b] == 0.0 {
                continue;
            }
            let src = &z.data()[(b * steps + t) * d..(b * steps + t + 1) * d];
            out[b * d..(b + 1) * d]
                .iter_mut()
                .zip(src)
                .for_each(|(o, v)| *o += v * w[b]);
        }
    }
    Tensor::new(vec![batch, d], out)
}

/// Forward value `e`, gradient passed unchanged to `z`, none to `e`.
pub fn straight_through<'t>(z: Var<'t>, e: Var<'t>) -> Result<Var<'t>> {
    // sg(e) + (z − sg(z)) is exactly e in floating point.
    e.stop_gradient().add(z.sub(z.stop_gradient())?)
}

/// `mean_b [ Σ_t ‖sg(z_t) − e_t‖² + α‖z_t − sg(e_t)‖² ] / len_b`.
///
/// The first term trains only the selected atoms, the second only `z`.
pub fn codebook_loss<'t>(z: &[Var<'t>], e_sel: &[Var<'t>], alpha: f64, lengths: &[usize]) -> Result<Var<'t>> {
    if z.len() != e_sel.len() {
        return Err(Error::shape("codebook_loss", &[z.len()], &[e_sel.len()]));
    }
    let batch = lengths.len() as f64;
    let weights = mean_weights(lengths, z.len())?;
    let mut terms = Vec::with_capacity(2 * z.len());
    for ((zt, et), w) in z.iter().zip(e_sel).zip(&weights) {
        let w: Vec<f64> = w.iter().map(|v| v / batch).collect();
        let codebook = zt.stop_gradient().sub(*et)?.square()?.mul_rows(&w)?.sum();
        let commit = zt.sub(et.stop_gradient())?.square()?.mul_rows(&w)?.sum().scale(alpha);
        terms.push(codebook);
        terms.push(commit);
    }
    sum_all(&terms)
}

/// Normalized usage histogram over `k` atoms and its exponentiated entropy.
pub fn code_perplexity(asg: &Assignment, k: usize) -> Result<(Vec<f64>, f64)> {
    histogram_perplexity(asg.valid(), k)
}

/// Same as [`code_perplexity`] for an arbitrary stream of atom ids.
pub fn histogram_perplexity(ids: impl IntoIterator<Item = usize>, k: usize) -> Result<(Vec<f64>, f64)> {
    let mut counts = vec![0usize; k];
    let mut total = 0usize;
    for id in ids {
        if id >= k {
            return Err(Error::Index {
                index: id,
                bound: k,
                position: "assignment".into(),
            });
        }
        counts[id] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::Argument("no valid assignments".into()));
    }
    let v: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok((v.clone(), perplexity_of(&v)))
}

/// `exp(−Σ v log v)` with `0·log 0 = 0`.
pub fn perplexity_of(v: &[f64]) -> f64 {
    let h: f64 = v.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.exp()
}
