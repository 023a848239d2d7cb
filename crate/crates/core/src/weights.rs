//! In-memory model weights, loaded eagerly from a bundle.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor_io::{names, BundleWriter, DType, HeadId, ModelConfig, TensorBundle, WType, WeightRef};

/// LayerNorm scale and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LnParams {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
}

impl LnParams {
    pub fn identity(d: usize) -> Self {
        LnParams {
            gamma: DVector::from_element(d, 1.0),
            beta: DVector::zeros(d),
        }
    }

    pub fn check_dim(&self, d: usize, what: &str) -> Result<()> {
        if self.gamma.len() != d || self.beta.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "{what}: LN params have length {}/{}, expected {d}",
                self.gamma.len(),
                self.beta.len()
            )));
        }
        Ok(())
    }

    fn load(bundle: &TensorBundle, gamma: &str, beta: &str, d: usize) -> Result<Option<Self>> {
        if !bundle.contains(gamma) && !bundle.contains(beta) {
            return Ok(None);
        }
        Ok(Some(LnParams {
            gamma: bundle.read_vector(gamma, d)?,
            beta: bundle.read_vector(beta, d)?,
        }))
    }
}

/// One head's weights in stored orientation: Q/K/V are d_head x d, O is d x d_head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub w_o: DMatrix<f64>,
    pub b_q: Option<DVector<f64>>,
    pub b_k: Option<DVector<f64>>,
    pub b_v: Option<DVector<f64>>,
    pub b_o: Option<DVector<f64>>,
}

impl HeadWeights {
    pub fn new(w_q: DMatrix<f64>, w_k: DMatrix<f64>, w_v: DMatrix<f64>, w_o: DMatrix<f64>) -> Self {
        HeadWeights {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: None,
            b_k: None,
            b_v: None,
            b_o: None,
        }
    }

    pub fn stored(&self, wtype: WType) -> &DMatrix<f64> {
        match wtype {
            WType::Q => &self.w_q,
            WType::K => &self.w_k,
            WType::V => &self.w_v,
            WType::O => &self.w_o,
        }
    }

    /// d x d_head matrix whose columns span the weight's subspace.
    pub fn generator(&self, wtype: WType) -> DMatrix<f64> {
        match wtype {
            WType::O => self.w_o.clone(),
            _ => self.stored(wtype).transpose(),
        }
    }

    fn check(&self, cfg: &ModelConfig, head: HeadId) -> Result<()> {
        for wtype in WType::ALL {
            let expected = match wtype {
                WType::O => (cfg.d_model, cfg.d_head),
                _ => (cfg.d_head, cfg.d_model),
            };
            let m = self.stored(wtype);
            if m.shape() != expected {
                return Err(Error::ShapeMismatch {
                    name: names::weight(head, wtype),
                    expected: vec![expected.0, expected.1],
                    actual: vec![m.nrows(), m.ncols()],
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// Layer-major: index = layer * n_heads + head.
    pub heads: Vec<HeadWeights>,
    /// Pre-attention LN per layer, when exported.
    pub ln1: Vec<Option<LnParams>>,
    pub ln_final: Option<LnParams>,
    /// d x T, loaded only on request.
    pub unembed: Option<DMatrix<f64>>,
}

impl ModelWeights {
    pub fn new(config: ModelConfig, heads: Vec<HeadWeights>) -> Result<Self> {
        config.validate()?;
        if heads.len() != config.n_total_heads() {
            return Err(Error::InvalidConfig(format!(
                "{} heads supplied for a {}x{} model",
                heads.len(),
                config.n_layers,
                config.n_heads
            )));
        }
        for (head, w) in config.heads().zip(&heads) {
            w.check(&config, head)?;
        }
        Ok(ModelWeights {
            config,
            heads,
            ln1: vec![None; config.n_layers],
            ln_final: None,
            unembed: None,
        })
    }

    /// Loads all head weights and LN params; the unembedding only if `with_unembed`.
    pub fn from_bundle(bundle: &TensorBundle, with_unembed: bool) -> Result<Self> {
        let cfg = *bundle.config();
        let d = cfg.d_model;
        let mut heads = Vec::with_capacity(cfg.n_total_heads());
        for head in cfg.heads() {
            let bias = |wtype: WType, len: usize| -> Result<Option<DVector<f64>>> {
                let name = names::bias(head, wtype);
                if bundle.contains(&name) {
                    bundle.read_vector(&name, len).map(Some)
                } else {
                    Ok(None)
                }
            };
            heads.push(HeadWeights {
                w_q: bundle.get_stored_weight(head, WType::Q)?,
                w_k: bundle.get_stored_weight(head, WType::K)?,
                w_v: bundle.get_stored_weight(head, WType::V)?,
                w_o: bundle.get_stored_weight(head, WType::O)?,
                b_q: bias(WType::Q, cfg.d_head)?,
                b_k: bias(WType::K, cfg.d_head)?,
                b_v: bias(WType::V, cfg.d_head)?,
                b_o: bias(WType::O, d)?,
            });
        }
        let mut weights = ModelWeights::new(cfg, heads)?;
        for layer in 0..cfg.n_layers {
            weights.ln1[layer] =
                LnParams::load(bundle, &names::ln1_gamma(layer), &names::ln1_beta(layer), d)?;
        }
        weights.ln_final =
            LnParams::load(bundle, names::LN_FINAL_GAMMA, names::LN_FINAL_BETA, d)?;
        if with_unembed && bundle.contains(names::UNEMBED) {
            let shape = bundle.entry(names::UNEMBED)?.shape.clone();
            let t = match shape.as_slice() {
                [rows, t] if *rows == d => *t,
                _ => {
                    return Err(Error::ShapeMismatch {
                        name: names::UNEMBED.into(),
                        expected: vec![d, cfg.vocab_size],
                        actual: shape,
                    })
                }
            };
            weights.unembed = Some(bundle.read_matrix(names::UNEMBED, d, t)?);
        }
        Ok(weights)
    }

    /// Independent standard-normal entries everywhere; no LN or unembedding.
    pub fn gaussian(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, dh) = (config.d_model, config.d_head);
        let mut sample = |r: usize, c: usize| {
            DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
        };
        let heads = (0..config.n_total_heads())
            .map(|_| {
                let w_q = sample(dh, d);
                let w_k = sample(dh, d);
                let w_v = sample(dh, d);
                let w_o = sample(d, dh);
                HeadWeights::new(w_q, w_k, w_v, w_o)
            })
            .collect();
        ModelWeights::new(config, heads)
    }

    pub fn head(&self, head: HeadId) -> &HeadWeights {
        &self.heads[self.config.head_index(head)]
    }

    pub fn head_mut(&mut self, head: HeadId) -> &mut HeadWeights {
        let i = self.config.head_index(head);
        &mut self.heads[i]
    }

    pub fn generator(&self, weight: WeightRef) -> Result<DMatrix<f64>> {
        self.config.check_head(weight.head)?;
        Ok(self.head(weight.head).generator(weight.wtype))
    }

    /// Writes every loaded tensor to a new bundle directory.
    pub fn write_bundle(&self, out: impl AsRef<Path>, dtype: DType) -> Result<TensorBundle> {
        let mut w = BundleWriter::create(out, self.config, dtype)?;
        self.write_into(&mut w)?;
        w.finish()
    }

    /// Adds every loaded tensor to `w`.
    pub fn write_into(&self, w: &mut BundleWriter) -> Result<()> {
        for head in self.config.heads() {
            let hw = self.head(head);
            for wtype in WType::ALL {
                w.add_weight(head, wtype, hw.stored(wtype))?;
            }
            let biases = [
                (WType::Q, &hw.b_q),
                (WType::K, &hw.b_k),
                (WType::V, &hw.b_v),
                (WType::O, &hw.b_o),
            ];
            for (wtype, b) in biases {
                if let Some(b) = b {
                    w.add_vector(&names::bias(head, wtype), b)?;
                }
            }
        }
        for (layer, ln) in self.ln1.iter().enumerate() {
            if let Some(ln) = ln {
                w.add_vector(&names::ln1_gamma(layer), &ln.gamma)?;
                w.add_vector(&names::ln1_beta(layer), &ln.beta)?;
            }
        }
        if let Some(ln) = &self.ln_final {
            w.add_vector(names::LN_FINAL_GAMMA, &ln.gamma)?;
            w.add_vector(names::LN_FINAL_BETA, &ln.beta)?;
        }
        if let Some(e) = &self.unembed {
            w.set_vocab_size(e.ncols());
            w.add_matrix(names::UNEMBED, e)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::load_bundle;

    #[test]
    fn bundle_round_trip_f64() {
        let cfg = ModelConfig::new(6, 2, 2, 3).unwrap();
        let mut m = ModelWeights::gaussian(cfg, 1).unwrap();
        m.ln1[1] = Some(LnParams::identity(6));
        m.head_mut(HeadId::new(1, 2)).b_v = Some(DVector::from_element(2, 0.5));
        m.unembed = Some(DMatrix::from_fn(6, 5, |i, j| (i * 5 + j) as f64));
        m.config.vocab_size = 5;
        let dir = tempfile::tempdir().unwrap();
        m.write_bundle(dir.path(), DType::F64).unwrap();
        let back = ModelWeights::from_bundle(&load_bundle(dir.path()).unwrap(), true).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn gpt2_like_inventory_count() {
        // 12x12 heads x 4 weights + ln_final gamma/beta + unembedding = 579.
        let cfg = ModelConfig::new(8, 2, 12, 12).unwrap();
        let mut m = ModelWeights::gaussian(cfg, 0).unwrap();
        m.ln_final = Some(LnParams::identity(8));
        m.unembed = Some(DMatrix::zeros(8, 10));
        let dir = tempfile::tempdir().unwrap();
        let b = m.write_bundle(dir.path(), DType::F32).unwrap();
        assert_eq!(b.len(), 579);
    }

    #[test]
    fn generators_are_d_by_dhead() {
        let cfg = ModelConfig::new(7, 3, 1, 1).unwrap();
        let m = ModelWeights::gaussian(cfg, 3).unwrap();
        for wtype in WType::ALL {
            let g = m.generator(WeightRef::new(0, 0, wtype)).unwrap();
            assert_eq!(g.shape(), (7, 3));
        }
        assert!(m.generator(WeightRef::new(0, 1, WType::Q)).is_err());
    }
}
