//! Quantization against brute-force oracles and the codebook loss against
//! its closed-form gradient.

mod common;

use common::{nearest_neighbour_mismatches, stop_gradient_deviation};
use dbvae::codebook::{codebook_loss, histogram_perplexity, Codebook};
use dbvae::tape::Tape;
use dbvae::tensor::Tensor;

#[test]
fn nearest_and_top_k_match_full_scan_at_k4096() {
    assert_eq!(nearest_neighbour_mismatches(1000, 42), 0);
}

#[test]
fn exact_ties_resolve_to_lowest_index() {
    let atoms = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let cb = Codebook::new(atoms).unwrap();
    assert_eq!(cb.nearest(&[0.0, 0.0]).unwrap().0, 0);
    assert_eq!(cb.nearest(&[1.0, 0.0]).unwrap().0, 0);
    let ranked: Vec<usize> = cb.top_k(&[0.0, 0.0], 3).unwrap().iter().map(|p| p.0).collect();
    assert_eq!(ranked, [0, 1, 2]);
}

#[test]
fn perplexity_fixtures() {
    let (_, one) = histogram_perplexity(vec![3; 10], 8).unwrap();
    assert!((one - 1.0).abs() < 1e-12);
    let (_, uniform) = histogram_perplexity(0..512, 512).unwrap();
    assert!((uniform - 512.0).abs() < 1e-9);
    let (_, mixed) = histogram_perplexity([0, 0, 1, 2], 3).unwrap();
    // entropy = 0.5 ln 2 + 2 · 0.25 ln 4 = 1.5 ln 2
    let entropy = -(0.5f64 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
    assert!((entropy - 1.0397207708399179).abs() < 1e-12);
    assert!((mixed - entropy.exp()).abs() < 1e-6);
}

#[test]
fn codebook_loss_gradients_are_the_stop_gradient_formulas() {
    for seed in [9, 10, 11] {
        let dev = stop_gradient_deviation(seed);
        assert!(dev < 1e-9, "seed {seed}: deviation {dev:e}");
    }
}

#[test]
fn single_position_gradients_are_unweighted() {
    let tape = Tape::new();
    let z = tape.leaf(&Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap().with_grad());
    let e = tape.leaf(&Tensor::new(vec![1, 3], vec![0.25, 0.0, 1.0]).unwrap().with_grad());
    let loss = codebook_loss(&[z], &[e], 0.25, &[1]).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(z).unwrap(), &[0.125, -0.5, 0.5]);
    assert_eq!(g.get(e).unwrap(), &[-0.5, 2.0, -2.0]);
}
