//! Reading a head's subspace through the unembedding.
//!
//! A weight W (d x d_head) is passed through the final LayerNorm column by
//! column to get W̃. Each token's unembedding vector e_t is preprocessed by f
//! and its logit is the norm of the projection of f(e_t) onto span(W̃). The
//! projector W̃(W̃ᵀW̃)⁻¹W̃ᵀ equals QQᵀ for a thin QR W̃ = QR, so the logit is
//! ‖Qᵀf(e_t)‖ and the d x d projector is never formed.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::spearman;
use crate::tensor_io::{WType, WeightRef};
use crate::weights::{LnParams, ModelWeights};

const STD_FLOOR: f64 = 1e-12;
const MAX_GRAM_CONDITION: f64 = 1e12;

/// LN_final applied independently to each column (population std over d).
pub fn ln_final_transform(w: &DMatrix<f64>, ln: &LnParams) -> Result<DMatrix<f64>> {
    let d = w.nrows();
    ln.check_dim(d, "ln_final_transform")?;
    let mut out = DMatrix::zeros(d, w.ncols());
    for (j, col) in w.column_iter().enumerate() {
        let mean = col.mean();
        let std = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64).sqrt();
        if std <= STD_FLOOR {
            return Err(Error::Degenerate(format!(
                "column {j} has zero variance under LN_final"
            )));
        }
        for i in 0..d {
            out[(i, j)] = ln.gamma[i] * (col[i] - mean) / std + ln.beta[i];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnembedPreprocessing {
    Identity,
    Center,
    Normalize,
    #[default]
    CenterThenNormalize,
}

impl UnembedPreprocessing {
    pub const ALL: [UnembedPreprocessing; 4] = [
        UnembedPreprocessing::Identity,
        UnembedPreprocessing::Center,
        UnembedPreprocessing::Normalize,
        UnembedPreprocessing::CenterThenNormalize,
    ];

    pub fn centers(self) -> bool {
        matches!(self, UnembedPreprocessing::Center | UnembedPreprocessing::CenterThenNormalize)
    }

    pub fn normalizes(self) -> bool {
        matches!(
            self,
            UnembedPreprocessing::Normalize | UnembedPreprocessing::CenterThenNormalize
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UnembedPreprocessing::Identity => "identity",
            UnembedPreprocessing::Center => "center",
            UnembedPreprocessing::Normalize => "normalize",
            UnembedPreprocessing::CenterThenNormalize => "center-normalize",
        }
    }
}

impl fmt::Display for UnembedPreprocessing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UnembedPreprocessing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        UnembedPreprocessing::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown unembedding preprocessing `{s}`")))
    }
}

/// Per-token quantities shared across heads for one unembedding matrix.
pub struct PreparedUnembedding<'a> {
    e: &'a DMatrix<f64>,
    /// ē, the mean unembedding vector.
    pub mean: DVector<f64>,
    /// ‖e_t‖
    pub norms: Vec<f64>,
    /// ‖e_t − ē‖
    pub centered_norms: Vec<f64>,
}

impl<'a> PreparedUnembedding<'a> {
    pub fn new(e: &'a DMatrix<f64>) -> Result<Self> {
        if e.ncols() == 0 {
            return Err(Error::InvalidArgument("empty unembedding".into()));
        }
        let mean = e.column_mean();
        let norms = e.column_iter().map(|c| c.norm()).collect();
        let centered_norms = e.column_iter().map(|c| (c - &mean).norm()).collect();
        Ok(PreparedUnembedding {
            e,
            mean,
            norms,
            centered_norms,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.e.ncols()
    }

    /// ‖f(e_t)‖ before any normalization step.
    pub fn pre_norms(&self, prep: UnembedPreprocessing) -> &[f64] {
        if prep.centers() {
            &self.centered_norms
        } else {
            &self.norms
        }
    }

    /// f(e_t) for one token.
    pub fn prepared(&self, token: usize, prep: UnembedPreprocessing) -> DVector<f64> {
        let mut v: DVector<f64> = self.e.column(token).into();
        if prep.centers() {
            v -= &self.mean;
        }
        if prep.normalizes() {
            let n = self.pre_norms(prep)[token];
            if n > 0.0 {
                v /= n;
            } else {
                v.fill(0.0);
            }
        }
        v
    }

    /// ‖Qᵀf(e_t)‖ for every token, Q an orthonormal basis of the subspace.
    pub fn logits(&self, projector: &SubspaceProjector, prep: UnembedPreprocessing) -> Vec<f64> {
        let q = &projector.q;
        let proj = q.transpose() * self.e;
        let shift = if prep.centers() {
            Some(q.tr_mul(&self.mean))
        } else {
            None
        };
        let pre = self.pre_norms(prep);
        proj.column_iter()
            .enumerate()
            .map(|(t, c)| {
                let norm = match &shift {
                    Some(s) => (c - s).norm(),
                    None => c.norm(),
                };
                if prep.normalizes() {
                    if pre[t] > 0.0 {
                        norm / pre[t]
                    } else {
                        0.0
                    }
                } else {
                    norm
                }
            })
            .collect()
    }
}

/// Orthonormal basis of span(W̃) with a conditioning check on W̃ᵀW̃.
pub struct SubspaceProjector {
    pub q: DMatrix<f64>,
}

impl SubspaceProjector {
    pub fn new(w_tilde: &DMatrix<f64>) -> Result<Self> {
        let (d, m) = w_tilde.shape();
        if m == 0 || m > d {
            return Err(Error::InvalidArgument(format!("cannot project onto {d}x{m}")));
        }
        let qr = w_tilde.clone().qr();
        let sv = qr.r().singular_values();
        let (max, min) = (sv.max(), sv.min());
        // cond(W̃ᵀW̃) = cond(R)².
        if min == 0.0 || (max / min).powi(2) >= MAX_GRAM_CONDITION {
            return Err(Error::RankDeficient {
                rank: crate::subspace::numerical_rank(sv.as_slice()),
                expected: m,
                weight: None,
            });
        }
        Ok(SubspaceProjector { q: qr.q() })
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.q * self.q.tr_mul(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub id: usize,
    pub token: Option<String>,
    pub logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogitRanking {
    pub head: String,
    pub prep: UnembedPreprocessing,
    #[serde(skip)]
    pub logits: Vec<f64>,
    pub top_k: Vec<RankedToken>,
}

/// Byte-pair space marker shown as an underscore.
pub fn display_token(s: &str) -> String {
    s.replace('Ġ', "_")
}

/// Top-k tokens by logit, ties by ascending id.
pub fn top_tokens(logits: &[f64], k: usize, vocab: Option<&[String]>) -> Vec<RankedToken> {
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids.into_iter()
        .map(|id| RankedToken {
            id,
            token: vocab.and_then(|v| v.get(id)).map(|s| display_token(s)),
            logit: logits[id],
        })
        .collect()
}

/// Logits of every token for the subspace of W̃ (already LN_final-transformed).
pub fn oblique_projector_logits(
    w_tilde: &DMatrix<f64>,
    e_out: &DMatrix<f64>,
    prep: UnembedPreprocessing,
    top_k: usize,
    vocab: Option<&[String]>,
) -> Result<TokenLogitRanking> {
    if w_tilde.nrows() != e_out.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "weight has {} rows, unembedding {}",
            w_tilde.nrows(),
            e_out.nrows()
        )));
    }
    let prepared = PreparedUnembedding::new(e_out)?;
    let logits = prepared.logits(&SubspaceProjector::new(w_tilde)?, prep);
    Ok(TokenLogitRanking {
        head: String::new(),
        prep,
        top_k: top_tokens(&logits, top_k, vocab),
        logits,
    })
}

/// Full pipeline for one head weight of a loaded model.
pub fn project_head(
    weights: &ModelWeights,
    weight: WeightRef,
    prep: UnembedPreprocessing,
    top_k: usize,
    vocab: Option<&[String]>,
) -> Result<TokenLogitRanking> {
    let e = weights
        .unembed
        .as_ref()
        .ok_or_else(|| Error::MissingTensor(crate::tensor_io::names::UNEMBED.into()))?;
    let ln = weights
        .ln_final
        .as_ref()
        .ok_or_else(|| Error::MissingTensor(crate::tensor_io::names::LN_FINAL_GAMMA.into()))?;
    let w_tilde = ln_final_transform(&weights.generator(weight)?, ln)?;
    let mut ranking = oblique_projector_logits(&w_tilde, e, prep, top_k, vocab)
        .map_err(|e| match e {
            Error::RankDeficient { rank, expected, .. } => Error::RankDeficient {
                rank,
                expected,
                weight: Some(weight),
            },
            other => other,
        })?;
    ranking.head = weight.to_string();
    Ok(ranking)
}

/// Mean and standard deviation of Spearman ρ over a set of heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl RhoSummary {
    fn from(values: &[f64]) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let n = finite.len();
        if n == 0 {
            return RhoSummary { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = finite.iter().sum::<f64>() / n as f64;
        let std = (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        RhoSummary { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepNormCorrelation {
    pub prep: UnembedPreprocessing,
    /// Keyed by weight type letter.
    pub by_wtype: Vec<(WType, RhoSummary)>,
    pub all: RhoSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnembedStats {
    /// ρ(‖e_t‖, e_tᵀβ)
    pub rho_norm_beta: f64,
    /// ρ(‖e_t − ē‖, (e_t − ē)ᵀβ)
    pub rho_centered_norm_beta: f64,
    /// ρ(e_tᵀβ, (e_t/‖e_t‖)ᵀβ)
    pub rho_beta_normalize: f64,
    /// ρ((e_t − ē)ᵀβ, ((e_t − ē)/‖e_t − ē‖)ᵀβ)
    pub rho_beta_center_normalize: f64,
    pub mean_cos_e_mean: f64,
    pub mean_cos_e_beta: f64,
    pub cos_mean_beta: f64,
    /// ρ between ‖f(e_t)‖ before normalization and the projected norm, per prep.
    pub projection: Vec<PrepNormCorrelation>,
}

fn cos(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        f64::NAN
    } else {
        a.dot(b) / (na * nb)
    }
}

/// Token statistics of the unembedding plus, for `weights_subset` (all
/// (head, type) weights when None), the norm correlation table per preprocessing.
pub fn unembed_stats(
    weights: &ModelWeights,
    preps: &[UnembedPreprocessing],
    weights_subset: Option<&[WeightRef]>,
) -> Result<UnembedStats> {
    let e = weights
        .unembed
        .as_ref()
        .ok_or_else(|| Error::MissingTensor(crate::tensor_io::names::UNEMBED.into()))?;
    let ln = weights
        .ln_final
        .as_ref()
        .ok_or_else(|| Error::MissingTensor(crate::tensor_io::names::LN_FINAL_GAMMA.into()))?;
    let p = PreparedUnembedding::new(e)?;
    let beta = &ln.beta;
    let dot_beta: Vec<f64> = e.column_iter().map(|c| c.dot(beta)).collect();
    let mean_dot = p.mean.dot(beta);
    let centered_dot: Vec<f64> = dot_beta.iter().map(|v| v - mean_dot).collect();
    let div = |xs: &[f64], ns: &[f64]| -> Vec<f64> {
        xs.iter().zip(ns).map(|(x, n)| if *n > 0.0 { x / n } else { 0.0 }).collect()
    };
    let t = e.ncols() as f64;
    let mean_cos = |other: &DVector<f64>| {
        e.column_iter().map(|c| cos(&c.into(), other)).sum::<f64>() / t
    };

    let all_refs: Vec<WeightRef> = weights
        .config
        .heads()
        .flat_map(|h| WType::ALL.map(|w| WeightRef { head: h, wtype: w }))
        .collect();
    let refs = weights_subset.unwrap_or(&all_refs);
    let projectors = refs
        .iter()
        .map(|&r| {
            let w = ln_final_transform(&weights.generator(r)?, ln)?;
            Ok((r, SubspaceProjector::new(&w)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let projection = preps
        .iter()
        .map(|&prep| {
            let mut rhos: Vec<(WType, f64)> = Vec::with_capacity(projectors.len());
            for (r, proj) in &projectors {
                let logits = p.logits(proj, prep);
                rhos.push((r.wtype, spearman(p.pre_norms(prep), &logits)?));
            }
            let by_wtype = WType::ALL
                .iter()
                .map(|&w| {
                    let v: Vec<f64> = rhos.iter().filter(|(x, _)| *x == w).map(|(_, r)| *r).collect();
                    (w, RhoSummary::from(&v))
                })
                .filter(|(_, s)| s.n > 0)
                .collect();
            let all: Vec<f64> = rhos.iter().map(|(_, r)| *r).collect();
            Ok(PrepNormCorrelation {
                prep,
                by_wtype,
                all: RhoSummary::from(&all),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(UnembedStats {
        rho_norm_beta: spearman(&p.norms, &dot_beta)?,
        rho_centered_norm_beta: spearman(&p.centered_norms, &centered_dot)?,
        rho_beta_normalize: spearman(&dot_beta, &div(&dot_beta, &p.norms))?,
        rho_beta_center_normalize: spearman(&centered_dot, &div(&centered_dot, &p.centered_norms))?,
        mean_cos_e_mean: mean_cos(&p.mean),
        mean_cos_e_beta: mean_cos(beta),
        cos_mean_beta: cos(&p.mean, beta),
        projection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_final_on_standardized_column() {
        // Mean 0, population std 1.
        let w = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let out = ln_final_transform(&w, &LnParams::identity(4)).unwrap();
        assert!((out - w).amax() < 1e-15);
        let constant = DMatrix::from_element(4, 2, 3.0);
        assert!(matches!(
            ln_final_transform(&constant, &LnParams::identity(4)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn in_span_and_orthogonal_logits() {
        let w = DMatrix::from_column_slice(3, 1, &[2.0, 0.0, 0.0]);
        let e = DMatrix::from_column_slice(3, 3, &[5.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 1.0]);
        let r = oblique_projector_logits(&w, &e, UnembedPreprocessing::Normalize, 3, None).unwrap();
        assert_eq!(r.logits, vec![1.0, 0.0, 0.0]);
        assert_eq!(r.top_k.iter().map(|t| t.id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn ties_break_by_id_and_display() {
        let vocab = vec!["a".to_string(), "Ġthe".to_string(), "c".to_string()];
        let top = top_tokens(&[0.5, 0.9, 0.9], 2, Some(&vocab));
        assert_eq!(top[0].id, 1);
        assert_eq!(top[0].token.as_deref(), Some("_the"));
        assert_eq!(top[1].id, 2);
    }

    #[test]
    fn singular_weight_rejected() {
        let w = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert!(SubspaceProjector::new(&w).is_err());
    }

    #[test]
    fn prep_parsing() {
        for p in UnembedPreprocessing::ALL {
            assert_eq!(p.as_str().parse::<UnembedPreprocessing>().unwrap(), p);
        }
    }
}
