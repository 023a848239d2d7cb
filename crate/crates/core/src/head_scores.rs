//! Identity, Previous Token, Duplicate Token and Induction head scores from
//! attention patterns recorded on sequences made of a random block of length
//! L repeated twice (n_ctx = 2L).
//!
//! A score is the mean attention mass at a fixed offset below the diagonal,
//! A[i, i − offset], over query positions i ≥ offset and then over sequences:
//!
//! | kind      | offset |
//! |-----------|--------|
//! | identity  | 0      |
//! | previous  | 1      |
//! | duplicate | L      |
//! | induction | L − 1  |

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{names, HeadClass, HeadClassAnnotations, HeadId, TensorBundle};

const ROW_SUM_TOL: f64 = 1e-4;
const CAUSAL_TOL: f64 = 1e-6;

/// Read access to per-sequence, per-head attention patterns.
pub trait PatternSource: Sync {
    fn n_layers(&self) -> usize;
    fn n_heads(&self) -> usize;
    fn n_seq(&self) -> usize;
    fn n_ctx(&self) -> usize;
    fn base_len(&self) -> usize;
    /// n_ctx x n_ctx, rows are query positions.
    fn pattern(&self, seq: usize, head: HeadId) -> Result<DMatrix<f64>>;
}

/// Checks softmax rows and the causal mask.
pub fn validate_pattern(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::MalformedPatterns(format!("{what}: not square")));
    }
    for (i, row) in a.row_iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::MalformedPatterns(format!(
                "{what}: row {i} sums to {sum}"
            )));
        }
        if let Some(j) = (i + 1..a.ncols()).find(|&j| a[(i, j)].abs() > CAUSAL_TOL) {
            return Err(Error::MalformedPatterns(format!(
                "{what}: attention above the diagonal at ({i}, {j})"
            )));
        }
    }
    Ok(())
}

/// Patterns stored as `patterns.{seq}.{layer}.{head}` in a bundle.
pub struct BundlePatterns<'a> {
    bundle: &'a TensorBundle,
    n_seq: usize,
    n_ctx: usize,
    base_len: usize,
}

impl<'a> BundlePatterns<'a> {
    pub fn new(bundle: &'a TensorBundle) -> Result<Self> {
        let meta = |key: &str| {
            bundle
                .metadata_usize(key)
                .ok_or_else(|| Error::MalformedPatterns(format!("missing metadata `{key}`")))
        };
        let n_seq = meta(names::META_PATTERN_N_SEQ)?;
        let base_len = meta(names::META_PATTERN_BASE_LEN)?;
        if n_seq == 0 {
            return Err(Error::MalformedPatterns("no sequences".into()));
        }
        let first = names::pattern(0, HeadId::new(0, 0));
        let n_ctx = match bundle.entry(&first)?.shape.as_slice() {
            [r, c] if r == c => *r,
            other => {
                return Err(Error::MalformedPatterns(format!(
                    "`{first}` has shape {other:?}"
                )))
            }
        };
        if n_ctx != 2 * base_len {
            return Err(Error::MalformedPatterns(format!(
                "n_ctx {n_ctx} is not twice base_len {base_len}"
            )));
        }
        Ok(BundlePatterns {
            bundle,
            n_seq,
            n_ctx,
            base_len,
        })
    }
}

impl PatternSource for BundlePatterns<'_> {
    fn n_layers(&self) -> usize {
        self.bundle.config().n_layers
    }
    fn n_heads(&self) -> usize {
        self.bundle.config().n_heads
    }
    fn n_seq(&self) -> usize {
        self.n_seq
    }
    fn n_ctx(&self) -> usize {
        self.n_ctx
    }
    fn base_len(&self) -> usize {
        self.base_len
    }
    fn pattern(&self, seq: usize, head: HeadId) -> Result<DMatrix<f64>> {
        let name = names::pattern(seq, head);
        let a = self.bundle.read_matrix(&name, self.n_ctx, self.n_ctx)?;
        validate_pattern(&a, &name)?;
        Ok(a)
    }
}

/// Patterns held in memory, indexed `[seq][layer * n_heads + head]`.
#[derive(Debug, Clone)]
pub struct InMemoryPatterns {
    pub n_layers: usize,
    pub n_heads: usize,
    pub base_len: usize,
    pub patterns: Vec<Vec<DMatrix<f64>>>,
}

impl InMemoryPatterns {
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        base_len: usize,
        patterns: Vec<Vec<DMatrix<f64>>>,
    ) -> Result<Self> {
        if patterns.is_empty() {
            return Err(Error::MalformedPatterns("no sequences".into()));
        }
        for (s, seq) in patterns.iter().enumerate() {
            if seq.len() != n_layers * n_heads {
                return Err(Error::MalformedPatterns(format!(
                    "sequence {s} has {} heads, expected {}",
                    seq.len(),
                    n_layers * n_heads
                )));
            }
            for (h, a) in seq.iter().enumerate() {
                if a.nrows() != 2 * base_len {
                    return Err(Error::MalformedPatterns(format!(
                        "sequence {s} head {h}: n_ctx {} is not twice base_len {base_len}",
                        a.nrows()
                    )));
                }
                validate_pattern(a, &format!("sequence {s} head {h}"))?;
            }
        }
        Ok(InMemoryPatterns {
            n_layers,
            n_heads,
            base_len,
            patterns,
        })
    }
}

impl PatternSource for InMemoryPatterns {
    fn n_layers(&self) -> usize {
        self.n_layers
    }
    fn n_heads(&self) -> usize {
        self.n_heads
    }
    fn n_seq(&self) -> usize {
        self.patterns.len()
    }
    fn n_ctx(&self) -> usize {
        2 * self.base_len
    }
    fn base_len(&self) -> usize {
        self.base_len
    }
    fn pattern(&self, seq: usize, head: HeadId) -> Result<DMatrix<f64>> {
        Ok(self.patterns[seq][head.layer * self.n_heads + head.head].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Identity,
    Previous,
    Duplicate,
    Induction,
}

impl ScoreKind {
    pub fn offset(self, base_len: usize) -> usize {
        match self {
            ScoreKind::Identity => 0,
            ScoreKind::Previous => 1,
            ScoreKind::Duplicate => base_len,
            ScoreKind::Induction => base_len.saturating_sub(1),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Identity => "identity",
            ScoreKind::Previous => "previous",
            ScoreKind::Duplicate => "duplicate",
            ScoreKind::Induction => "induction",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ScoreKind::Identity),
            "previous" => Ok(ScoreKind::Previous),
            "duplicate" => Ok(ScoreKind::Duplicate),
            "induction" => Ok(ScoreKind::Induction),
            _ => Err(Error::InvalidArgument(format!("unknown score kind `{s}`"))),
        }
    }
}

/// n_layers x n_heads scores, each a mean over sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScoreTable {
    pub kind: Option<ScoreKind>,
    pub offset: usize,
    pub scores: DMatrix<f64>,
}

impl HeadScoreTable {
    pub fn get(&self, head: HeadId) -> f64 {
        self.scores[(head.layer, head.head)]
    }

    /// All heads by descending score, ties by head id.
    pub fn ranked(&self) -> Vec<(HeadId, f64)> {
        let mut v: Vec<(HeadId, f64)> = (0..self.scores.nrows())
            .flat_map(|l| (0..self.scores.ncols()).map(move |h| HeadId::new(l, h)))
            .map(|h| (h, self.get(h)))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn top_k(&self, k: usize) -> Vec<(HeadId, f64)> {
        let mut v = self.ranked();
        v.truncate(k);
        v
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "layer", "head", "score"])?;
        let kind = self.kind.map_or_else(|| format!("offset{}", self.offset), |k| k.to_string());
        for l in 0..self.scores.nrows() {
            for h in 0..self.scores.ncols() {
                w.write_record([
                    kind.clone(),
                    l.to_string(),
                    h.to_string(),
                    format!("{:.17e}", self.scores[(l, h)]),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(())
    }
}

/// Mean over i ≥ offset of A[i, i − offset].
pub fn diagonal_mean(a: &DMatrix<f64>, offset: usize) -> f64 {
    let n = a.nrows();
    let total: f64 = (offset..n).map(|i| a[(i, i - offset)]).sum();
    total / (n - offset) as f64
}

pub fn offset_score(src: &dyn PatternSource, offset: usize) -> Result<HeadScoreTable> {
    if offset >= src.n_ctx() {
        return Err(Error::InvalidArgument(format!(
            "offset {offset} >= n_ctx {}",
            src.n_ctx()
        )));
    }
    let heads: Vec<HeadId> = (0..src.n_layers())
        .flat_map(|l| (0..src.n_heads()).map(move |h| HeadId::new(l, h)))
        .collect();
    let n_seq = src.n_seq();
    let means = heads
        .par_iter()
        .map(|&head| {
            let mut acc = 0.0;
            for seq in 0..n_seq {
                acc += diagonal_mean(&src.pattern(seq, head)?, offset);
            }
            Ok(acc / n_seq as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(HeadScoreTable {
        kind: None,
        offset,
        scores: DMatrix::from_row_slice(src.n_layers(), src.n_heads(), &means),
    })
}

pub fn identity_score(src: &dyn PatternSource) -> Result<HeadScoreTable> {
    head_score(src, ScoreKind::Identity)
}

pub fn head_score(src: &dyn PatternSource, kind: ScoreKind) -> Result<HeadScoreTable> {
    let mut t = offset_score(src, kind.offset(src.base_len()))?;
    t.kind = Some(kind);
    Ok(t)
}

/// Adds the top-k Previous Token and Induction heads that carry no functional
/// label in `annotations` to those classes. Existing labels are kept.
pub fn assign_top_k_classes(
    previous: &HeadScoreTable,
    induction: &HeadScoreTable,
    annotations: &HeadClassAnnotations,
    k: usize,
) -> HeadClassAnnotations {
    let labelled = annotations.functional_heads();
    let mut out = annotations.clone();
    for (table, class) in [(previous, HeadClass::Previous), (induction, HeadClass::Induction)] {
        for (head, _) in table.top_k(k) {
            if !labelled.contains(&head) {
                out.insert(class, head);
            }
        }
    }
    out
}
