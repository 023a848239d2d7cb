#![allow(dead_code)]

use std::path::Path;

use headsim::tensor_io::{names, BundleWriter, DType, HeadId, ModelConfig};
use headsim::weights::{LnParams, ModelWeights};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const D_MODEL: usize = 16;
pub const D_HEAD: usize = 4;
pub const VOCAB: usize = 40;
pub const BASE_LEN: usize = 5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Orthonormal d x m basis from the thin QR of a Gaussian matrix.
pub fn random_basis(d: usize, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian(d, m, rng).qr().q()
}

pub fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    random_basis(d, d, rng)
}

/// Uniform causal attention, with a shifted diagonal where `offset` is set.
fn pattern(n: usize, offset: Option<usize>) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| match offset {
        Some(o) if i >= o => (j == i - o) as u8 as f64,
        Some(_) => (j == 0) as u8 as f64,
        None if j <= i => 1.0 / (i + 1) as f64,
        None => 0.0,
    })
}

/// Gaussian 12-layer x 12-head model with LN parameters, unembedding, vocab
/// and attention patterns: L0H3 attends to itself, L5H1 and L5H5 are
/// induction heads, L4H11 attends to the previous token.
pub fn synthetic_model(seed: u64) -> ModelWeights {
    let cfg = ModelConfig::new(D_MODEL, D_HEAD, 12, 12).unwrap();
    let mut m = ModelWeights::gaussian(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for l in 0..12 {
        m.ln1[l] = Some(LnParams {
            gamma: DVector::from_fn(D_MODEL, |_, _| 1.0 + 0.1 * r.random::<f64>()),
            beta: DVector::from_fn(D_MODEL, |_, _| 0.1 * r.random::<f64>()),
        });
    }
    m.ln_final = Some(LnParams {
        gamma: DVector::from_fn(D_MODEL, |_, _| 1.0 + 0.1 * r.random::<f64>()),
        beta: DVector::from_fn(D_MODEL, |_, _| 0.1 * r.random::<f64>()),
    });
    m.unembed = Some(gaussian(D_MODEL, VOCAB, &mut r));
    m.config.vocab_size = VOCAB;
    m
}

pub fn write_synthetic_bundle(dir: &Path, seed: u64) -> ModelWeights {
    let m = synthetic_model(seed);
    let mut w = BundleWriter::create(dir, m.config, DType::F32).unwrap();
    m.write_into(&mut w).unwrap();
    let n = 2 * BASE_LEN;
    for seq in 0..2 {
        for h in m.config.heads() {
            let offset = match (h.layer, h.head) {
                (0, 3) => Some(0),
                (4, 11) => Some(1),
                (5, 1) | (5, 5) => Some(BASE_LEN - 1),
                _ => None,
            };
            let p = pattern(n, offset);
            w.add_matrix(&names::pattern(seq, h), &p).unwrap();
        }
    }
    w.set_metadata(names::META_PATTERN_BASE_LEN, BASE_LEN.into());
    w.set_metadata(names::META_PATTERN_N_SEQ, 2.into());
    let vocab: Vec<String> = (0..VOCAB).map(|i| format!("Ġtok{i}")).collect();
    w.set_vocab(&vocab).unwrap();
    w.finish().unwrap();
    // Reload to get f32-rounded values.
    ModelWeights::from_bundle(&headsim::load_bundle(dir).unwrap(), true).unwrap()
}

pub fn head(l: usize, h: usize) -> HeadId {
    HeadId::new(l, h)
}
