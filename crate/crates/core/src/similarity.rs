//! Head-to-head similarity: PK, the Composition Score and three baselines,
//! pair enumeration and the parallel scoring engine.
//!
//! Every composition matrix is a product A·Bᵀ of two d x d_head generators,
//! so all per-pair work below is done on d_head x d_head matrices:
//!
//! ```text
//! ‖A_t B_tᵀ A_s B_sᵀ‖² = tr(Mᵀ (A_tᵀA_t) M (B_sᵀB_s)),   M = B_tᵀ A_s
//! ```

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subspace::{cosines_from_cross_gram, orthonormalize_weight};
use crate::tensor_io::{HeadId, ModelConfig, WType, WeightRef};
use crate::weights::{HeadWeights, ModelWeights};

/// (source weight type of the earlier head, target weight type of the later head).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairingType {
    pub source: WType,
    pub target: WType,
}

impl PairingType {
    pub const fn new(source: WType, target: WType) -> Self {
        PairingType { source, target }
    }

    /// All 16 pairings, source-major.
    pub fn all() -> Vec<PairingType> {
        WType::ALL
            .iter()
            .flat_map(|&s| WType::ALL.iter().map(move |&t| PairingType::new(s, t)))
            .collect()
    }

    pub const OQ: PairingType = PairingType::new(WType::O, WType::Q);
    pub const OK: PairingType = PairingType::new(WType::O, WType::K);
    pub const OV: PairingType = PairingType::new(WType::O, WType::V);

    /// QQ, KK, VV, OO.
    pub fn same_type() -> [PairingType; 4] {
        WType::ALL.map(|w| PairingType::new(w, w))
    }
}

impl fmt::Display for PairingType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.source, self.target)
    }
}

impl FromStr for PairingType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut c = s.chars();
        match (
            c.next().and_then(WType::from_letter),
            c.next().and_then(WType::from_letter),
            c.next(),
        ) {
            (Some(source), Some(target), None) => Ok(PairingType { source, target }),
            _ => Err(Error::InvalidArgument(format!("unknown pairing `{s}`"))),
        }
    }
}

impl Serialize for PairingType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PairingType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Pk,
    Cs,
    SimpleCs,
    LinearCka,
    Procrustes,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Pk,
        Metric::Cs,
        Metric::SimpleCs,
        Metric::LinearCka,
        Metric::Procrustes,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Pk => "pk",
            Metric::Cs => "cs",
            Metric::SimpleCs => "simple-cs",
            Metric::LinearCka => "cka",
            Metric::Procrustes => "procrustes",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pk" => Ok(Metric::Pk),
            "cs" => Ok(Metric::Cs),
            "simple-cs" => Ok(Metric::SimpleCs),
            "cka" | "linear-cka" => Ok(Metric::LinearCka),
            "procrustes" => Ok(Metric::Procrustes),
            _ => Err(Error::InvalidArgument(format!("unknown metric `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Source layer strictly below target layer.
    StrictEarlier,
    /// StrictEarlier plus same-layer pairs, each unordered pair once (lower head first).
    SameType,
}

impl PairMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PairMode::StrictEarlier => "strict_earlier",
            PairMode::SameType => "same_type",
        }
    }

    fn admits(self, src: HeadId, dst: HeadId) -> bool {
        match self {
            PairMode::StrictEarlier => src.layer < dst.layer,
            PairMode::SameType => {
                src.layer < dst.layer || (src.layer == dst.layer && src.head < dst.head)
            }
        }
    }
}

impl FromStr for PairMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "strict_earlier" => Ok(PairMode::StrictEarlier),
            "same_type" => Ok(PairMode::SameType),
            _ => Err(Error::InvalidArgument(format!("unknown pair mode `{s}`"))),
        }
    }
}

/// Pairs in canonical order: sources layer-major, then targets layer-major.
pub fn enumerate_pairs(config: &ModelConfig, mode: PairMode) -> Vec<(HeadId, HeadId)> {
    let heads: Vec<HeadId> = config.heads().collect();
    heads
        .iter()
        .flat_map(|&s| {
            heads
                .iter()
                .filter(move |&&t| mode.admits(s, t))
                .map(move |&t| (s, t))
        })
        .collect()
}

/// Which end of a directed pair a head sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Composition matrix as factors (A, B) with matrix = A·Bᵀ, both d x d_head.
///
/// QK = W_QᵀW_K = G_Q G_Kᵀ and OV = W_O W_V = G_O G_Vᵀ, where G is the
/// column generator. On the source side a weight type r gives (G_r, G_partner),
/// on the target side (G_partner, G_r).
fn composition_factors(w: &HeadWeights, side: Side, wtype: WType) -> (DMatrix<f64>, DMatrix<f64>) {
    let partner = match wtype {
        WType::Q => WType::K,
        WType::K => WType::Q,
        WType::V => WType::O,
        WType::O => WType::V,
    };
    let (r, p) = (w.generator(wtype), w.generator(partner));
    match side {
        Side::Source => (r, p),
        Side::Target => (p, r),
    }
}

/// Dense d x d composition matrix following the source/target transposition convention.
pub fn composition_matrix(
    weights: &ModelWeights,
    head: HeadId,
    side: Side,
    wtype: WType,
) -> Result<DMatrix<f64>> {
    weights.config.check_head(head)?;
    let (a, b) = composition_factors(weights.head(head), side, wtype);
    Ok(a * b.transpose())
}

/// ‖Wt·Ws‖_F / (‖Wt‖_F ‖Ws‖_F), defined as 0 when either norm vanishes.
pub fn composition_score(wt: &DMatrix<f64>, ws: &DMatrix<f64>) -> Result<f64> {
    if wt.ncols() != ws.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "cannot multiply {}x{} by {}x{}",
            wt.nrows(),
            wt.ncols(),
            ws.nrows(),
            ws.ncols()
        )));
    }
    let (nt, ns) = (wt.norm(), ws.norm());
    if nt == 0.0 || ns == 0.0 {
        return Ok(0.0);
    }
    Ok(((wt * ws).norm() / (nt * ns)).clamp(0.0, 1.0))
}

/// CS(Wtᵀ, Ws) on raw d x d_head generators.
pub fn simple_cs(ws: &DMatrix<f64>, wt: &DMatrix<f64>) -> Result<f64> {
    composition_score(&wt.transpose(), ws)
}

/// Subtracts the mean column from every column.
pub fn center_columns(w: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = w.column_mean();
    let mut c = w.clone();
    for mut col in c.column_iter_mut() {
        col -= &mean;
    }
    c
}

pub fn linear_cka(ws: &DMatrix<f64>, wt: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(ws, wt)?;
    let gs = gram(&center_columns(ws));
    let gt = gram(&center_columns(wt));
    cka_from_grams(&gs, &gt)
}

/// ‖Xc Ycᵀ‖² / (‖Xc Xcᵀ‖ ‖Yc Ycᵀ‖) from the d_head x d_head Grams XcᵀXc, YcᵀYc.
fn cka_from_grams(gs: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<f64> {
    let (ns, nt) = (gs.norm(), gt.norm());
    if ns == 0.0 || nt == 0.0 {
        return Err(Error::Degenerate("zero centered norm in linear CKA".into()));
    }
    Ok((gs.dot(gt) / (ns * nt)).clamp(0.0, 1.0))
}

/// 1 − ‖Φ*Ws − Wt‖² / (‖Φ*Ws‖² + ‖Wt‖²) with Φ* the optimal orthogonal map.
///
/// With ‖Φ*Ws‖ = ‖Ws‖ and the optimal cross term equal to the nuclear norm of
/// Ws Wtᵀ, this is 2‖Ws Wtᵀ‖_* / (‖Ws‖² + ‖Wt‖²). The nuclear norm is taken
/// from the small product of the thin-QR R factors.
pub fn procrustes_similarity(ws: &DMatrix<f64>, wt: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(ws, wt)?;
    procrustes_from_factors(&ProcrustesFeature::new(ws), &ProcrustesFeature::new(wt))
}

struct ProcrustesFeature {
    r: DMatrix<f64>,
    norm_sq: f64,
}

impl ProcrustesFeature {
    fn new(w: &DMatrix<f64>) -> Self {
        let r = if w.nrows() >= w.ncols() {
            w.clone().qr().r()
        } else {
            w.clone()
        };
        ProcrustesFeature {
            r,
            norm_sq: w.norm_squared(),
        }
    }
}

fn procrustes_from_factors(s: &ProcrustesFeature, t: &ProcrustesFeature) -> Result<f64> {
    let denom = s.norm_sq + t.norm_sq;
    if denom == 0.0 {
        return Err(Error::Degenerate("both inputs zero in Procrustes similarity".into()));
    }
    let nuclear: f64 = (&s.r * t.r.transpose()).singular_values().sum();
    Ok((2.0 * nuclear / denom).clamp(0.0, 1.0))
}

fn check_same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// `transpose() * b` goes through the blocked gemm kernel; `tr_mul` does not.
fn gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * a
}

/// ‖A Bᵀ‖_F² = <AᵀA, BᵀB>_F.
fn factored_norm_sq(ga: &DMatrix<f64>, gb: &DMatrix<f64>) -> f64 {
    ga.dot(gb)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub src: HeadId,
    pub dst: HeadId,
    pub score: f64,
}

/// Scores for one metric and pairing, in canonical pair order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTable {
    pub metric: Metric,
    pub pairing: PairingType,
    pub mode: PairMode,
    pub entries: Vec<PairScore>,
}

impl SimilarityTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn lookup(&self) -> HashMap<(HeadId, HeadId), f64> {
        self.entries.iter().map(|e| ((e.src, e.dst), e.score)).collect()
    }

    pub fn get(&self, src: HeadId, dst: HeadId) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.src == src && e.dst == dst)
            .map(|e| e.score)
    }

    pub const CSV_HEADER: [&'static str; 7] = [
        "pairing",
        "metric",
        "src_layer",
        "src_head",
        "dst_layer",
        "dst_head",
        "score",
    ];

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        Self::write_csv_many(std::slice::from_ref(self), out)
    }

    pub fn write_csv_many<W: Write>(tables: &[SimilarityTable], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for t in tables {
            let pairing = t.pairing.to_string();
            for e in &t.entries {
                w.write_record([
                    pairing.as_str(),
                    t.metric.as_str(),
                    &e.src.layer.to_string(),
                    &e.src.head.to_string(),
                    &e.dst.layer.to_string(),
                    &e.dst.head.to_string(),
                    &format!("{:.17e}", e.score),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

/// Per-(head, weight type) precomputation shared across all pairs.
enum Feature {
    /// Transposed orthonormal basis, and the basis.
    Pk(DMatrix<f64>, DMatrix<f64>),
    /// Factors of the composition matrix plus their Grams.
    Cs {
        a: DMatrix<f64>,
        /// Transposed second factor.
        bt: DMatrix<f64>,
        ga: DMatrix<f64>,
        gb: DMatrix<f64>,
        norm: f64,
    },
    /// Transposed generator, generator and norm.
    Raw(DMatrix<f64>, DMatrix<f64>, f64),
    /// Centered Gram.
    Cka(DMatrix<f64>),
    Procrustes(ProcrustesFeature),
}

fn build_feature(
    weights: &ModelWeights,
    metric: Metric,
    head: HeadId,
    wtype: WType,
    side: Side,
) -> Result<Feature> {
    let hw = weights.head(head);
    Ok(match metric {
        Metric::Pk => {
            let g = hw.generator(wtype);
            let r = WeightRef { head, wtype };
            let u = orthonormalize_weight(&g, Some(r))?.into_basis();
            Feature::Pk(u.transpose(), u)
        }
        Metric::Cs => {
            let (a, b) = composition_factors(hw, side, wtype);
            let (ga, gb) = (gram(&a), gram(&b));
            let norm = factored_norm_sq(&ga, &gb).max(0.0).sqrt();
            Feature::Cs { a, bt: b.transpose(), ga, gb, norm }
        }
        Metric::SimpleCs => {
            let g = hw.generator(wtype);
            let n = g.norm();
            Feature::Raw(g.transpose(), g, n)
        }
        Metric::LinearCka => Feature::Cka(gram(&center_columns(&hw.generator(wtype)))),
        Metric::Procrustes => Feature::Procrustes(ProcrustesFeature::new(&hw.generator(wtype))),
    })
}

fn score_features(src: &Feature, dst: &Feature) -> Result<f64> {
    match (src, dst) {
        (Feature::Pk(ut, _), Feature::Pk(_, v)) => {
            let cos = cosines_from_cross_gram(ut * v);
            Ok(cos.iter().map(|c| c * c).sum())
        }
        (
            Feature::Cs { a: a_s, gb: gb_s, norm: n_s, .. },
            Feature::Cs { bt: bt_t, ga: ga_t, norm: n_t, .. },
        ) => {
            if *n_s == 0.0 || *n_t == 0.0 {
                return Ok(0.0);
            }
            let m = bt_t * a_s;
            let prod_sq = (m.transpose() * ga_t * &m).dot(gb_s).max(0.0);
            Ok((prod_sq.sqrt() / (n_s * n_t)).clamp(0.0, 1.0))
        }
        (Feature::Raw(_, gs, ns), Feature::Raw(gt_t, _, nt)) => {
            if *ns == 0.0 || *nt == 0.0 {
                return Ok(0.0);
            }
            Ok(((gt_t * gs).norm() / (ns * nt)).clamp(0.0, 1.0))
        }
        (Feature::Cka(gs), Feature::Cka(gt)) => cka_from_grams(gs, gt),
        (Feature::Procrustes(s), Feature::Procrustes(t)) => procrustes_from_factors(s, t),
        _ => unreachable!("feature kinds always match the metric"),
    }
}

/// Scores every enumerated pair. Features are built up front, then source
/// rows are scored in parallel; output order is the canonical pair order.
pub fn score_all_pairs(
    weights: &ModelWeights,
    metric: Metric,
    pairing: PairingType,
    mode: PairMode,
) -> Result<SimilarityTable> {
    let cfg = weights.config;
    let heads: Vec<HeadId> = cfg.heads().collect();
    let build = |wtype: WType, side: Side| -> Result<Vec<Feature>> {
        heads
            .par_iter()
            .map(|&h| build_feature(weights, metric, h, wtype, side))
            .collect()
    };
    let src_features = build(pairing.source, Side::Source)?;
    // PK, Simple-CS, CKA and Procrustes features do not depend on the side.
    let dst_features = if metric != Metric::Cs && pairing.source == pairing.target {
        None
    } else {
        Some(build(pairing.target, Side::Target)?)
    };
    let dst_features = dst_features.as_ref().unwrap_or(&src_features);

    let rows: Vec<Vec<PairScore>> = heads
        .par_iter()
        .map(|&src| {
            let fs = &src_features[cfg.head_index(src)];
            heads
                .iter()
                .filter(|&&dst| mode.admits(src, dst))
                .map(|&dst| {
                    let score = score_features(fs, &dst_features[cfg.head_index(dst)])?;
                    Ok(PairScore { src, dst, score })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(SimilarityTable {
        metric,
        pairing,
        mode,
        entries: rows.into_iter().flatten().collect(),
    })
}

/// Per-layer mean and population standard deviation of ‖W_QK‖_F and ‖W_OV‖_F.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerNormStats {
    pub layer: usize,
    pub qk_mean: f64,
    pub qk_std: f64,
    pub ov_mean: f64,
    pub ov_std: f64,
}

pub fn layerwise_frobenius_stats(weights: &ModelWeights) -> Vec<LayerNormStats> {
    let cfg = weights.config;
    (0..cfg.n_layers)
        .map(|layer| {
            let mut qk = Vec::with_capacity(cfg.n_heads);
            let mut ov = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let hw = weights.head(HeadId::new(layer, head));
                qk.push(factored_norm_sq(&gram(&hw.w_q.transpose()), &gram(&hw.w_k.transpose())).max(0.0).sqrt());
                ov.push(factored_norm_sq(&gram(&hw.w_o), &gram(&hw.w_v.transpose())).max(0.0).sqrt());
            }
            let (qk_mean, qk_std) = mean_std(&qk);
            let (ov_mean, ov_std) = mean_std(&ov);
            LayerNormStats {
                layer,
                qk_mean,
                qk_std,
                ov_mean,
                ov_std,
            }
        })
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
