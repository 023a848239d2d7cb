//! Output-preserving weight rewrites: folding LayerNorm into reading weights,
//! centering writing weights and the unembedding, folding the value bias.
//!
//! The centering operator C_n = I − 11ᵀ/n is never materialized; it is applied
//! as a mean subtraction.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{BundleWriter, TensorBundle, WType};
pub use crate::weights::LnParams;
use crate::weights::ModelWeights;

/// W·C_n: subtracts each row's mean.
pub fn center_rows(w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = w.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    out
}

/// C_n·W: subtracts each column's mean.
pub fn center_cols(w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = w.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

pub fn center_vector(v: &DVector<f64>) -> DVector<f64> {
    v.add_scalar(-v.mean())
}

/// (W_in·D_γ·C_d, W_in·β + b_in) for a reading weight W_in (d_mid x d).
pub fn fold_ln_into_reading(
    w_in: &DMatrix<f64>,
    b_in: &DVector<f64>,
    ln: &LnParams,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = w_in.ncols();
    ln.check_dim(d, "fold_ln_into_reading")?;
    if b_in.len() != w_in.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "bias length {} for {}x{} weight",
            b_in.len(),
            w_in.nrows(),
            d
        )));
    }
    let mut scaled = w_in.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= ln.gamma[j];
    }
    Ok((center_rows(&scaled), w_in * &ln.beta + b_in))
}

/// (C_d·W_out, C_d·b_out) for a writing weight W_out (d x d_mid).
pub fn center_writing(
    w_out: &DMatrix<f64>,
    b_out: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if b_out.len() != w_out.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "bias length {} for {}x{} weight",
            b_out.len(),
            w_out.nrows(),
            w_out.ncols()
        )));
    }
    Ok((center_cols(w_out), center_vector(b_out)))
}

/// E·C_T: removes each row's mean over the vocabulary.
pub fn center_unembedding(e: &DMatrix<f64>) -> DMatrix<f64> {
    center_rows(e)
}

/// (b_V′ = 0, b_O′ = W_O·b_V + b_O).
pub fn fold_attention_bias(
    w_o: &DMatrix<f64>,
    b_v: &DVector<f64>,
    b_o: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if w_o.ncols() != b_v.len() || w_o.nrows() != b_o.len() {
        return Err(Error::DimensionMismatch(format!(
            "W_O {}x{} with b_V {} and b_O {}",
            w_o.nrows(),
            w_o.ncols(),
            b_v.len(),
            b_o.len()
        )));
    }
    Ok((DVector::zeros(b_v.len()), w_o * b_v + b_o))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub ln_fold: bool,
    pub center_writes: bool,
    pub center_unembed: bool,
    pub fold_bias: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            ln_fold: true,
            center_writes: true,
            center_unembed: true,
            fold_bias: true,
        }
    }
}

/// Applies the enabled rewrites to a copy of `weights`.
///
/// Folded layers get identity LN params, so applying this twice is the same
/// as applying it once.
pub fn preprocess_weights(weights: &ModelWeights, opts: PreprocessOptions) -> Result<ModelWeights> {
    let cfg = weights.config;
    let (d, dh) = (cfg.d_model, cfg.d_head);
    let mut out = weights.clone();
    if opts.ln_fold {
        for layer in 0..cfg.n_layers {
            let ln = weights.ln1[layer].as_ref().ok_or_else(|| {
                Error::MissingTensor(crate::tensor_io::names::ln1_gamma(layer))
            })?;
            for head in 0..cfg.n_heads {
                let hw = out.head_mut(crate::tensor_io::HeadId::new(layer, head));
                for wtype in [WType::Q, WType::K, WType::V] {
                    let (w, b) = match wtype {
                        WType::Q => (&mut hw.w_q, &mut hw.b_q),
                        WType::K => (&mut hw.w_k, &mut hw.b_k),
                        _ => (&mut hw.w_v, &mut hw.b_v),
                    };
                    let b_in = b.take().unwrap_or_else(|| DVector::zeros(dh));
                    let (w2, b2) = fold_ln_into_reading(w, &b_in, ln)?;
                    *w = w2;
                    *b = Some(b2);
                }
            }
            out.ln1[layer] = Some(LnParams::identity(d));
        }
    }
    for hw in &mut out.heads {
        if opts.fold_bias {
            if let Some(b_v) = &hw.b_v {
                let b_o = hw.b_o.take().unwrap_or_else(|| DVector::zeros(d));
                let (bv2, bo2) = fold_attention_bias(&hw.w_o, b_v, &b_o)?;
                hw.b_v = Some(bv2);
                hw.b_o = Some(bo2);
            }
        }
        if opts.center_writes {
            hw.w_o = center_cols(&hw.w_o);
            if let Some(b_o) = &hw.b_o {
                hw.b_o = Some(center_vector(b_o));
            }
        }
    }
    if opts.center_unembed {
        if let Some(e) = &out.unembed {
            out.unembed = Some(center_unembedding(e));
        }
    }
    Ok(out)
}

/// Writes a preprocessed sibling bundle. Tensors not touched by preprocessing
/// (patterns, other metadata) are copied verbatim.
pub fn preprocess_bundle(
    bundle: &TensorBundle,
    out: impl AsRef<Path>,
    opts: PreprocessOptions,
) -> Result<TensorBundle> {
    let weights = ModelWeights::from_bundle(bundle, true)?;
    let processed = preprocess_weights(&weights, opts)?;
    let m = bundle.manifest();
    let mut w = BundleWriter::create(out, m.config, m.dtype)?;
    processed.write_into(&mut w)?;
    for entry in &m.tensors {
        if !w.contains(&entry.name) {
            let dtype = entry.dtype.unwrap_or(m.dtype);
            w.add_raw(&entry.name, entry.shape.clone(), dtype, &bundle.read_raw(&entry.name)?)?;
        }
    }
    for (k, v) in &m.metadata {
        w.set_metadata(k, v.clone());
    }
    if let Some(vocab) = bundle.vocab()? {
        w.set_vocab(&vocab)?;
    }
    w.finish()
}
