//! Rank correlation and AUC-based evaluation of similarity tables against
//! head-class annotations.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{score_all_pairs, Metric, PairMode, PairScore, PairingType, SimilarityTable};
use crate::tensor_io::{HeadClass, HeadClassAnnotations, HeadId};
use crate::weights::ModelWeights;

/// 1-based ranks, ties get the average of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's ρ; NaN when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "spearman inputs of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least 2 points".into()));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

/// Entries by descending score; ties in (src, dst) order.
pub fn ranked_pairs(table: &SimilarityTable) -> Vec<PairScore> {
    let mut v = table.entries.clone();
    v.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.src.cmp(&b.src))
            .then(a.dst.cmp(&b.dst))
    });
    v
}

/// Head-level PR-AUC.
///
/// Pairs are walked in rank order while accumulating the set of heads seen
/// in any pair so far. After each pair, precision and recall are taken over
/// that head set. Each distinct recall level keeps its best precision and the
/// curve is integrated as a step function. No recall at all gives 0.
pub fn head_detection_pr_auc(table: &SimilarityTable, positives: &BTreeSet<HeadId>) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::InvalidArgument("no positive heads".into()));
    }
    let mut seen = BTreeSet::new();
    let mut hits = 0usize;
    // Recall level (as hit count) -> best precision.
    let mut best: Vec<f64> = vec![f64::NEG_INFINITY; positives.len() + 1];
    for e in ranked_pairs(table) {
        for h in [e.src, e.dst] {
            if seen.insert(h) && positives.contains(&h) {
                hits += 1;
            }
        }
        let precision = hits as f64 / seen.len() as f64;
        best[hits] = best[hits].max(precision);
    }
    let p = positives.len() as f64;
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    for (h, &prec) in best.iter().enumerate().skip(1) {
        if prec.is_finite() {
            let r = h as f64 / p;
            auc += (r - prev_recall) * prec;
            prev_recall = r;
        }
    }
    Ok(auc)
}

/// Average precision with tied scores forming one threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_binary(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    Ok(ap)
}

/// Mann–Whitney ROC-AUC; ties between a positive and a negative count 1/2.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_binary(scores, labels)?;
    let ranks = average_ranks(scores);
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::InvalidArgument(
            "need both positive and negative pairs".into(),
        ));
    }
    Ok(())
}

/// (PR-AUC, ROC-AUC) with pairs inside one functional class as positives.
pub fn pair_classification_auc(
    table: &SimilarityTable,
    annotations: &HeadClassAnnotations,
) -> Result<(f64, f64)> {
    let classes: Vec<BTreeSet<HeadId>> = HeadClass::FUNCTIONAL
        .iter()
        .map(|c| annotations.heads(*c))
        .collect();
    let labels: Vec<bool> = table
        .entries
        .iter()
        .map(|e| classes.iter().any(|c| c.contains(&e.src) && c.contains(&e.dst)))
        .collect();
    let scores = table.scores();
    Ok((average_precision(&scores, &labels)?, roc_auc(&scores, &labels)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub pairing: PairingType,
    pub class: Option<HeadClass>,
    pub pr_auc: f64,
    pub roc_auc: Option<f64>,
    pub positives: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClasswiseReport {
    pub cells: Vec<EvalReport>,
    /// Classes with fewer than two heads, which have no within-class pairs.
    pub skipped: Vec<HeadClass>,
    pub mean_pr_auc: f64,
    pub mean_roc_auc: f64,
}

/// Per (same-type pairing, class) AUCs over same_type pairs, plus their means.
pub fn classwise_mean_auc(
    weights: &ModelWeights,
    metric: Metric,
    annotations: &HeadClassAnnotations,
) -> Result<ClasswiseReport> {
    let tables = PairingType::same_type()
        .into_iter()
        .map(|p| score_all_pairs(weights, metric, p, PairMode::SameType))
        .collect::<Result<Vec<_>>>()?;
    classwise_from_tables(&tables, annotations)
}

pub fn classwise_from_tables(
    tables: &[SimilarityTable],
    annotations: &HeadClassAnnotations,
) -> Result<ClasswiseReport> {
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for class in HeadClass::FUNCTIONAL {
        let heads = annotations.heads(class);
        if heads.len() < 2 {
            skipped.push(class);
            continue;
        }
        for table in tables {
            let labels: Vec<bool> = table
                .entries
                .iter()
                .map(|e| heads.contains(&e.src) && heads.contains(&e.dst))
                .collect();
            let scores = table.scores();
            cells.push(EvalReport {
                metric: table.metric,
                pairing: table.pairing,
                class: Some(class),
                pr_auc: average_precision(&scores, &labels)?,
                roc_auc: Some(roc_auc(&scores, &labels)?),
                positives: labels.iter().filter(|&&l| l).count(),
                pairs: labels.len(),
            });
        }
    }
    if cells.is_empty() {
        return Err(Error::InvalidArgument("no class has two or more heads".into()));
    }
    let n = cells.len() as f64;
    let mean_pr_auc = cells.iter().map(|c| c.pr_auc).sum::<f64>() / n;
    let mean_roc_auc = cells.iter().filter_map(|c| c.roc_auc).sum::<f64>() / n;
    Ok(ClasswiseReport {
        cells,
        skipped,
        mean_pr_auc,
        mean_roc_auc,
    })
}

/// Mean squared difference between two tables over the same pairs. With
/// `pk_scale` set, scores are divided by it first (d_head for PK).
pub fn preprocess_mse(
    orig: &SimilarityTable,
    prep: &SimilarityTable,
    pk_scale: Option<f64>,
) -> Result<f64> {
    if orig.len() != prep.len() {
        return Err(Error::DimensionMismatch(format!(
            "tables have {} and {} pairs",
            orig.len(),
            prep.len()
        )));
    }
    if orig.is_empty() {
        return Err(Error::InvalidArgument("empty tables".into()));
    }
    let other: HashMap<(HeadId, HeadId), f64> = prep.lookup();
    let scale = pk_scale.unwrap_or(1.0);
    let mut acc = 0.0;
    for e in &orig.entries {
        let p = other.get(&(e.src, e.dst)).ok_or_else(|| {
            Error::DimensionMismatch(format!("pair {}->{} missing from second table", e.src, e.dst))
        })?;
        acc += ((e.score - p) / scale).powi(2);
    }
    Ok(acc / orig.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    type Entry = ((usize, usize), (usize, usize), f64);

    fn table(entries: &[Entry]) -> SimilarityTable {
        SimilarityTable {
            metric: Metric::Pk,
            pairing: PairingType::OQ,
            mode: PairMode::StrictEarlier,
            entries: entries
                .iter()
                .map(|&((a, b), (c, d), score)| PairScore {
                    src: HeadId::new(a, b),
                    dst: HeadId::new(c, d),
                    score,
                })
                .collect(),
        }
    }

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(spearman(&x, &[2.0; 4]).unwrap().is_nan());
        assert!(spearman(&x, &[1.0]).is_err());
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn detection_all_positive() {
        let t = table(&[((0, 0), (1, 0), 0.9), ((0, 1), (1, 1), 0.5)]);
        let pos: BTreeSet<HeadId> = [(0, 0), (1, 0), (0, 1), (1, 1)]
            .iter()
            .map(|&(l, h)| HeadId::new(l, h))
            .collect();
        assert_eq!(head_detection_pr_auc(&t, &pos).unwrap(), 1.0);
        let absent: BTreeSet<HeadId> = [HeadId::new(5, 5)].into();
        assert_eq!(head_detection_pr_auc(&t, &absent).unwrap(), 0.0);
        assert!(head_detection_pr_auc(&t, &BTreeSet::new()).is_err());
    }

    #[test]
    fn detection_three_head_toy() {
        // Heads a=L0H0 (positive), b=L1H0, c=L2H0.
        let t = table(&[((0, 0), (1, 0), 0.2), ((1, 0), (2, 0), 0.9), ((0, 0), (2, 0), 0.5)]);
        let pos: BTreeSet<HeadId> = [HeadId::new(0, 0)].into();
        // Ranked: b-c (seen {b,c}, 0 hits), a-c (seen 3, 1 hit -> P=1/3), a-b (same).
        assert!((head_detection_pr_auc(&t, &pos).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_ranking() {
        let scores = [0.9, 0.8, 0.3, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(average_precision(&scores, &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
        assert!(roc_auc(&scores, &[false; 4]).is_err());
    }

    #[test]
    fn mse_cases() {
        let a = table(&[((0, 0), (1, 0), 0.5), ((0, 1), (1, 1), 0.25)]);
        assert_eq!(preprocess_mse(&a, &a, None).unwrap(), 0.0);
        let mut b = a.clone();
        for e in &mut b.entries {
            e.score += 0.125;
        }
        assert!((preprocess_mse(&a, &b, None).unwrap() - 0.125f64.powi(2)).abs() < 1e-15);
        assert!((preprocess_mse(&a, &b, Some(2.0)).unwrap() - 0.0625f64.powi(2)).abs() < 1e-15);
        let c = table(&[((0, 0), (1, 0), 0.5)]);
        assert!(preprocess_mse(&a, &c, None).is_err());
    }
}
