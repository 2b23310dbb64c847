//! Shared oracles for integration tests.
#![allow(dead_code)]

use dbvae::model::{Bound, LatentInjection, Mode, ModelConfig, ModelState};
use dbvae::tape::{Tape, Var};
use dbvae::tensor::Tensor;
use dbvae::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so that entries whose true
/// derivative is ~0 are judged on absolute error instead.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights, so the check
/// covers every output coordinate rather than just their sum.
fn scalarize<'t>(out: Var<'t>) -> Var<'t> {
    let w = random_tensor(&out.shape(), -1.0, 1.0, 0xfeed);
    out.mul_const(&w).unwrap().sum()
}

/// Largest relative error between the tape gradient of `f` and central
/// differences, over every entry of every input.
pub fn check_op<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let value = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        scalarize(f(&vars).unwrap()).item()
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(&x.clone().with_grad())).collect();
    let loss = scalarize(f(&vars).unwrap());
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zero(vars[i]);
        for j in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

pub fn tiny_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        vocab_size: 5,
        embed_dim: 3,
        hidden_dim: 4,
        latent_dim: 4,
        slices: 2,
        codebook_size: 8,
        mode,
        alpha: 0.25,
        beta: if mode == Mode::R { 1.0 } else { 0.0 },
        dropout: 0.0,
        latent_injection: LatentInjection::Input,
    }
}

/// Scales every parameter up so gradients are not vanishingly small.
pub fn tiny_model(config: ModelConfig, seed: u64) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ModelState::new(config, &mut rng).unwrap();
    for (_, t) in state.params.iter_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    for cb in state.codebook.slices_mut() {
        for v in cb.atoms_mut().data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    state
}

/// Compares tape gradients of `loss` for every named tensor accepted by
/// `include` against central differences. Returns the worst relative error
/// and the number of entries checked.
pub fn check_model<F>(state: &ModelState, loss: F, include: impl Fn(&str) -> bool) -> (f64, usize)
where
    F: for<'t> Fn(&ModelState, &Bound<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = state.bind(&tape);
    let root = loss(state, &bound).unwrap();
    let grads = tape.backward(root).unwrap();
    let value = |s: &ModelState| {
        let tape = Tape::new();
        let b = s.bind_frozen(&tape);
        loss(s, &b).unwrap().item()
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let names: Vec<String> = state.named_tensors().into_iter().map(|(n, _)| n).collect();
    for name in names.iter().filter(|n| include(n)) {
        let var = match name.strip_prefix("codebook.") {
            Some(i) => bound.atoms[i.parse::<usize>().unwrap()],
            None => bound.params.var(state.params.id(name).unwrap()),
        };
        let analytic = grads.get_or_zero(var);
        for j in 0..analytic.len() {
            let perturbed = |delta: f64| {
                let mut s = state.clone();
                let t = match name.strip_prefix("codebook.") {
                    Some(i) => s.codebook.slices_mut()[i.parse::<usize>().unwrap()].atoms_mut(),
                    None => {
                        let id = s.params.id(name).unwrap();
                        s.params.get_mut(id)
                    }
                };
                t.data_mut()[j] += delta;
                value(&s)
            };
            let numeric = (perturbed(STEP) - perturbed(-STEP)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

// ---- reusable oracle suites ---------------------------------------------

pub type OpFn = for<'t> fn(&[Var<'t>]) -> Result<Var<'t>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub op: OpFn,
}

fn case(name: &'static str, shapes: &[&[usize]], seed: u64, op: OpFn) -> OpCase {
    let inputs = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| random_tensor(s, -2.0, 2.0, seed * 16 + i as u64))
        .collect();
    OpCase { name, inputs, op }
}

fn positive_case(name: &'static str, shape: &[usize], seed: u64, op: OpFn) -> OpCase {
    OpCase {
        name,
        inputs: vec![random_tensor(shape, 0.5, 2.0, seed)],
        op,
    }
}

/// Every differentiable tape operation on random inputs in [-2, 2]
/// (strictly positive inputs for `log` and `sqrt`).
pub fn op_cases() -> Vec<OpCase> {
    use dbvae::codebook::aggregate_latent;
    use dbvae::model::gaussian_kl;
    use dbvae::tape::concat;
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], 1, |v| v[0].matmul(v[1])),
        case("matmul_bt", &[&[3, 4], &[5, 4]], 2, |v| v[0].matmul_bt(v[1])),
        case("add_bias", &[&[3, 4], &[4]], 3, |v| v[0].add_bias(v[1])),
        case("add", &[&[2, 3], &[2, 3]], 4, |v| v[0].add(v[1])),
        case("sub", &[&[2, 3], &[2, 3]], 5, |v| v[0].sub(v[1])),
        case("mul", &[&[2, 3], &[2, 3]], 6, |v| v[0].mul(v[1])),
        case("scale", &[&[2, 3]], 7, |v| Ok(v[0].scale(-1.7))),
        case("add_scalar", &[&[2, 3]], 8, |v| Ok(v[0].add_scalar(0.3))),
        case("neg", &[&[2, 3]], 9, |v| Ok(v[0].neg())),
        case("mul_const", &[&[2, 3]], 10, |v| v[0].mul_const(&random_tensor(&[2, 3], -2.0, 2.0, 99))),
        case("mul_rows", &[&[3, 2]], 11, |v| v[0].mul_rows(&[0.5, -1.0, 2.0])),
        case("sigmoid", &[&[3, 3]], 12, |v| Ok(v[0].sigmoid())),
        case("tanh", &[&[3, 3]], 13, |v| Ok(v[0].tanh())),
        case("exp", &[&[3, 3]], 14, |v| Ok(v[0].exp())),
        positive_case("log", &[3, 3], 15, |v| v[0].log()),
        case("square", &[&[3, 3]], 16, |v| v[0].square()),
        positive_case("sqrt", &[3, 3], 17, |v| v[0].sqrt()),
        case("sum", &[&[3, 3]], 18, |v| Ok(v[0].sum())),
        case("mean", &[&[3, 3]], 19, |v| Ok(v[0].mean())),
        case("concat", &[&[2, 3], &[2, 1], &[2, 2]], 20, |v| concat(v)),
        case("slice_cols", &[&[3, 5]], 21, |v| v[0].slice_cols(1, 4)),
        case("gather_rows", &[&[4, 3]], 22, |v| {
            v[0].gather_rows(&[Some(2), None, Some(0), Some(2), Some(3)])
        }),
        case("softmax_xent", &[&[3, 5]], 23, |v| v[0].softmax_xent(&[4, 0, 2], &[1.0, 0.5, 0.0])),
        case("aggregate_latent", &[&[2, 3], &[2, 3], &[2, 3]], 25, |v| aggregate_latent(v, &[3, 1])),
        case("gaussian_kl", &[&[2, 3], &[2, 3]], 27, |v| gaussian_kl(v[0], v[1])),
        case("composite", &[&[2, 3], &[3, 3]], 26, |v| {
            let h = v[0].matmul(v[1])?.tanh();
            h.mul(v[0].sigmoid())?.square()
        }),
    ]
}

/// Worst FD error per op.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    op_cases()
        .into_iter()
        .map(|c| (c.name, check_op(&c.inputs, c.op)))
        .collect()
}

pub fn tiny_batch() -> dbvae::data::SequenceBatch {
    dbvae::data::SequenceBatch::from_sequences(&[vec![4, 3, 4], vec![3]]).unwrap()
}

/// `L_rec + β·L_kl`: the part of the objective free of stop-gradients.
pub fn smooth_part(out: dbvae::model::ForwardOutput<'_>) -> Result<Var<'_>> {
    out.loss_total.sub(out.code)
}

/// `L_rec(mean_t(z_t + c_t))` with the offsets `c_t` held constant: with
/// assignments fixed, its exact gradient is the straight-through estimate.
pub fn straight_through_surrogate<'t>(
    s: &ModelState,
    b: &Bound<'t>,
    batch: &dbvae::data::SequenceBatch,
    offsets: &[Tensor],
) -> Result<Var<'t>> {
    let zs = s.encode(b, batch)?;
    let shifted: Vec<Var> = zs
        .iter()
        .zip(offsets)
        .map(|(z, c)| z.add(z.tape().constant(c.clone())))
        .collect::<Result<_>>()?;
    let z_x = dbvae::codebook::aggregate_latent(&shifted, batch.lengths())?;
    s.reconstruct::<ChaCha8Rng>(b, batch, z_x, None, 1.0 / batch.batch_size() as f64)
}

/// Offsets `c_t = e_t − z_t` at the current parameters.
pub fn straight_through_offsets(state: &ModelState, batch: &dbvae::data::SequenceBatch) -> Vec<Tensor> {
    let tape = Tape::new();
    let b = state.bind_frozen(&tape);
    let zs = state.encode(&b, batch).unwrap();
    let asg = state.assign(&zs, batch).unwrap();
    let es = state.selected(&b, &asg).unwrap();
    zs.iter().zip(&es).map(|(z, e)| e.sub(*z).unwrap().value()).collect()
}

/// Worst FD error of the full unrolled encoder–bottleneck–decoder graph
/// (vocab 5, hidden 4, D=4, S=2, K=8, T=3) along every path:
/// continuous pretraining, mode r with init injection, the joint decoder,
/// and the joint encoder through its straight-through surrogate.
pub fn full_model_suite() -> Vec<(&'static str, f64)> {
    use dbvae::model::Phase;
    let batch = tiny_batch();
    let mut out = Vec::new();

    let q = tiny_model(tiny_config(Mode::Q), 11);
    out.push((
        "model q pretrain (all parameters)",
        check_model(
            &q,
            |s, b| smooth_part(s.forward_q::<ChaCha8Rng>(b, &batch, Phase::Pretrain, None)?),
            |_| true,
        )
        .0,
    ));
    out.push((
        "model q joint (decoder, output)",
        check_model(
            &q,
            |s, b| smooth_part(s.forward_q::<ChaCha8Rng>(b, &batch, Phase::Joint, None)?),
            |n| n.starts_with("decoder") || n.starts_with("out"),
        )
        .0,
    ));
    let offsets = straight_through_offsets(&q, &batch);
    out.push((
        "model q joint encoder vs straight-through surrogate",
        check_model(&q, |s, b| straight_through_surrogate(s, b, &batch, &offsets), |n| {
            n.starts_with("encoder") || n.starts_with("proj_e") || n.starts_with("embedding")
        })
        .0,
    ));

    let mut rc = tiny_config(Mode::R);
    rc.latent_injection = LatentInjection::InitAndInput;
    let r = tiny_model(rc, 14);
    out.push((
        "model r (all parameters)",
        check_model(
            &r,
            |s, b| {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                smooth_part(s.forward_r(b, &batch, Phase::Joint, &mut rng, true)?)
            },
            |_| true,
        )
        .0,
    ));
    out
}

/// Largest deviation between tape gradients of the codebook loss on a
/// randomly quantized batch and the closed forms `2α(z−e)·w` (w.r.t. z) and
/// `Σ 2(e−z)·w` over positions selecting an atom (w.r.t. atoms), where
/// `w = 1/(len_b · batch)`. Unselected atoms must get exactly zero; a
/// violation returns infinity.
pub fn stop_gradient_deviation(seed: u64) -> f64 {
    use dbvae::codebook::{codebook_loss, SlicedCodebook};
    let (batch, steps, slices, k, width) = (3, 4, 2, 6, 6);
    let lengths = [4, 2, 1];
    let alpha = 0.25;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cb = SlicedCodebook::init_uniform(slices, k, width, &mut rng).unwrap();
    for c in cb.slices_mut() {
        for v in c.atoms_mut().data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let z = random_tensor(&[batch, steps, width], -1.0, 1.0, seed + 1);
    let (selected, asg) = cb.quantize_sequence(&z, &lengths).unwrap();

    let tape = Tape::new();
    let atoms: Vec<Var> = cb.slices().iter().map(|c| tape.leaf(&c.atoms().clone().with_grad())).collect();
    let zs: Vec<Var> = (0..steps)
        .map(|t| {
            let rows: Vec<f64> = (0..batch)
                .flat_map(|b| z.data()[(b * steps + t) * width..(b * steps + t + 1) * width].to_vec())
                .collect();
            tape.leaf(&Tensor::new(vec![batch, width], rows).unwrap().with_grad())
        })
        .collect();
    let es: Vec<Var> = (0..steps).map(|t| cb.gather_step(&atoms, &asg, t).unwrap()).collect();
    let loss = codebook_loss(&zs, &es, alpha, &lengths).unwrap();
    let grads = tape.backward(loss).unwrap();

    let d = width / slices;
    let mut worst: f64 = 0.0;
    let mut atom_expect = vec![vec![0.0; k * d]; slices];
    for t in 0..steps {
        let gz = grads.get_or_zero(zs[t]);
        for b in 0..batch {
            let w = if t < lengths[b] { 1.0 / (lengths[b] * batch) as f64 } else { 0.0 };
            for j in 0..width {
                let zv = z.data()[(b * steps + t) * width + j];
                let ev = selected.data()[(b * steps + t) * width + j];
                worst = worst.max((gz[b * width + j] - 2.0 * alpha * (zv - ev) * w).abs());
                if let Some(atom) = asg.index(b, t, j / d) {
                    atom_expect[j / d][atom * d + j % d] += 2.0 * (ev - zv) * w;
                }
            }
        }
    }
    for s in 0..slices {
        let got = grads.get_or_zero(atoms[s]);
        for (g, want) in got.iter().zip(&atom_expect[s]) {
            worst = worst.max((g - want).abs());
        }
        for atom in 0..k {
            let used = (0..batch).any(|b| (0..steps).any(|t| asg.index(b, t, s) == Some(atom)));
            if !used && got[atom * d..(atom + 1) * d].iter().any(|&g| g != 0.0) {
                return f64::INFINITY;
            }
        }
    }
    worst
}

/// Full sort of every atom by (distance, index).
pub fn full_scan(atoms: &Tensor, z: &[f64]) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..atoms.rows())
        .map(|k| {
            let d = atoms.row(k).iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            (k, d)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all
}

/// Mismatches of `nearest` and `top_k(10)` against a full sort over
/// `queries` random queries at K = 4096.
pub fn nearest_neighbour_mismatches(queries: usize, seed: u64) -> usize {
    use dbvae::codebook::Codebook;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cb = Codebook::init_uniform(4096, 8, &mut rng).unwrap();
    let mut mismatches = 0;
    for _ in 0..queries {
        let z: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0 / 4096.0..1.0 / 4096.0)).collect();
        let oracle = full_scan(cb.atoms(), &z);
        if cb.nearest(&z).unwrap() != oracle[0] {
            mismatches += 1;
        }
        if cb.top_k(&z, 10).unwrap() != oracle[..10] {
            mismatches += 1;
        }
    }
    mismatches
}

/// Largest deviation of `topk_latents` on a K = 4 codebook from brute-force
/// enumeration (rank all four atoms at every position and slice, take the
/// i-th, average over positions).
pub fn topk_k4_deviation(seed: u64) -> f64 {
    let config = ModelConfig {
        latent_dim: 4,
        slices: 2,
        codebook_size: 4,
        ..tiny_config(Mode::Q)
    };
    let state = tiny_model(config, seed);
    let x: &[usize] = &[4, 3, 3];
    let b = dbvae::data::SequenceBatch::from_sequences(&[x]).unwrap();
    let z = state.encode_tensor(&b).unwrap();
    let steps = b.lengths()[0];
    let d = state.codebook.slice_dim();
    let got = state.topk_latents(x, 4).unwrap();
    let mut worst: f64 = 0.0;
    for (i, (dist, latent)) in got.iter().enumerate() {
        let mut want = vec![0.0; 4];
        let mut want_dist = 0.0;
        for t in 0..steps {
            for (s, cb) in state.codebook.slices().iter().enumerate() {
                let ranked = full_scan(cb.atoms(), &z.data()[t * 4 + s * d..t * 4 + (s + 1) * d]);
                let (atom, dd) = ranked[i];
                want_dist += dd;
                for j in 0..d {
                    want[s * d + j] += cb.atom(atom)[j] / steps as f64;
                }
            }
        }
        worst = worst.max((dist - want_dist / steps as f64).abs());
        for (g, w) in latent.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    worst
}
