//! Wiring diagrams, hub (inlet/outlet) scores and the KL informativeness heatmap.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::ranked_pairs;
use crate::rand_baseline::{kl_with_direction, tight_reference, EmpiricalDistribution, KlDirection};
use crate::similarity::{enumerate_pairs, score_all_pairs, Metric, PairMode, PairingType, SimilarityTable};
use crate::tensor_io::{HeadClass, HeadClassAnnotations, HeadId, ModelConfig, WType};
use crate::weights::ModelWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WiringEdge {
    pub pairing: PairingType,
    pub src: HeadId,
    pub dst: HeadId,
    pub score: f64,
    /// score / largest score of the pairing.
    pub opacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WiringDiagram {
    pub k: usize,
    pub edges: Vec<WiringEdge>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<HeadId, Vec<String>>,
}

/// Top-k pairs of each table; ties by (src, dst).
pub fn build_wiring(tables: &[SimilarityTable], k: usize) -> Result<WiringDiagram> {
    let mut edges = Vec::new();
    for table in tables {
        if table.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "empty {} table",
                table.pairing
            )));
        }
        let ranked = ranked_pairs(table);
        let max = ranked[0].score;
        edges.extend(ranked.into_iter().take(k).map(|e| WiringEdge {
            pairing: table.pairing,
            src: e.src,
            dst: e.dst,
            score: e.score,
            opacity: if max > 0.0 { e.score / max } else { 0.0 },
        }));
    }
    Ok(WiringDiagram {
        k,
        edges,
        labels: BTreeMap::new(),
    })
}

fn class_color(class: HeadClass) -> &'static str {
    match class {
        HeadClass::Duplicate => "#1f77b4",
        HeadClass::Previous => "#ff7f0e",
        HeadClass::Induction => "#2ca02c",
        HeadClass::NameMover => "#d62728",
        HeadClass::NegativeNameMover => "#9467bd",
        HeadClass::BackupNameMover => "#8c564b",
        HeadClass::SInhibition => "#e377c2",
        HeadClass::Identity => "#7f7f7f",
    }
}

fn pairing_color(p: PairingType) -> &'static str {
    match p.target {
        WType::Q => "#1f4e9c",
        WType::K => "#b8860b",
        WType::V => "#2e7d32",
        WType::O => "#6a1b9a",
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

impl WiringDiagram {
    /// Graphviz source. Nodes carry the color of their first functional class
    /// (Identity only if nothing else); edge width and alpha follow opacity.
    pub fn to_dot(&self, annotations: Option<&HeadClassAnnotations>, comment: Option<&str>) -> String {
        let mut s = String::new();
        if let Some(c) = comment {
            for line in c.lines() {
                let _ = writeln!(s, "// {line}");
            }
        }
        s.push_str("digraph wiring {\n  rankdir=LR;\n  node [shape=box, style=filled, fillcolor=white];\n");
        let mut nodes: Vec<HeadId> = self.edges.iter().flat_map(|e| [e.src, e.dst]).collect();
        nodes.sort();
        nodes.dedup();
        for h in nodes {
            let mut attrs = Vec::new();
            let mut label = h.to_string();
            if let Some(tokens) = self.labels.get(&h) {
                label.push_str("\\n");
                label.push_str(&dot_escape(&tokens.join(" ")));
            }
            attrs.push(format!("label=\"{label}\""));
            if let Some(ann) = annotations {
                let classes = ann.classes_of(h);
                let main = classes
                    .iter()
                    .find(|c| **c != HeadClass::Identity)
                    .or(classes.first());
                if let Some(c) = main {
                    attrs.push(format!("fillcolor=\"{}\"", class_color(*c)));
                    let names: Vec<&str> = classes.iter().map(|c| c.short()).collect();
                    attrs.push(format!("class=\"{}\"", names.join(",")));
                }
            }
            let _ = writeln!(s, "  {h} [{}];", attrs.join(", "));
        }
        for e in &self.edges {
            let alpha = (e.opacity.clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = writeln!(
                s,
                "  {} -> {} [label=\"{}\", pairing=\"{}\", score=\"{:.6}\", penwidth={:.3}, color=\"{}{:02x}\"];",
                e.src,
                e.dst,
                e.pairing,
                e.pairing,
                e.score,
                0.5 + 4.5 * e.opacity,
                pairing_color(e.pairing),
                alpha
            );
        }
        s.push_str("}\n");
        s
    }
}

/// Per-pairing bias from random Gaussian weights, subtracted and renormalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DebiasInfo {
    pub bias: f64,
    pub n_random_pairs: usize,
    /// Every score fell at or below the bias; the table is left all zero.
    pub all_zero: bool,
}

/// The bias is the mean score over n_side² pairs between two layers of
/// n_side heads with standard-normal weights of the model's shapes.
pub fn debias_toy(
    table: &SimilarityTable,
    config: &ModelConfig,
    n_side: usize,
    seed: u64,
) -> Result<(SimilarityTable, DebiasInfo)> {
    let toy = ModelConfig::new(config.d_model, config.d_head, 2, n_side.max(1))?;
    let random = ModelWeights::gaussian(toy, seed)?;
    let reference = score_all_pairs(&random, table.metric, table.pairing, PairMode::StrictEarlier)?;
    let bias = reference.scores().iter().sum::<f64>() / reference.len() as f64;
    Ok(debias_with(table, bias, reference.len()))
}

pub fn debias_with(table: &SimilarityTable, bias: f64, n_random_pairs: usize) -> (SimilarityTable, DebiasInfo) {
    let mut out = table.clone();
    for e in &mut out.entries {
        e.score = (e.score - bias).max(0.0);
    }
    let max = out.entries.iter().map(|e| e.score).fold(0.0, f64::max);
    if max > 0.0 {
        for e in &mut out.entries {
            e.score /= max;
        }
    }
    (
        out,
        DebiasInfo {
            bias,
            n_random_pairs,
            all_zero: max == 0.0,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HubDirection {
    Inlet,
    Outlet,
}

/// Heads without a defined score (layer 0 for inlet, last layer for outlet) are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubScoreTable {
    pub direction: HubDirection,
    pub pairing: PairingType,
    pub scores: BTreeMap<HeadId, f64>,
}

impl HubScoreTable {
    /// Heads by descending score, ties by id.
    pub fn ranked(&self) -> Vec<(HeadId, f64)> {
        let mut v: Vec<(HeadId, f64)> = self.scores.iter().map(|(h, s)| (*h, *s)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn argmax(&self) -> Option<HeadId> {
        self.ranked().first().map(|(h, _)| *h)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["direction", "pairing", "layer", "head", "score"])?;
        let dir = match self.direction {
            HubDirection::Inlet => "inlet",
            HubDirection::Outlet => "outlet",
        };
        for (h, s) in &self.scores {
            w.write_record([
                dir.to_string(),
                self.pairing.to_string(),
                h.layer.to_string(),
                h.head.to_string(),
                format!("{s:.17e}"),
            ])?;
        }
        w.flush().map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(())
    }
}

fn check_complete(table: &SimilarityTable, config: &ModelConfig) -> Result<()> {
    if table.mode != PairMode::StrictEarlier
        || table.len() != enumerate_pairs(config, PairMode::StrictEarlier).len()
    {
        return Err(Error::InvalidArgument(format!(
            "hub scores need the full strict_earlier table ({} pairs given)",
            table.len()
        )));
    }
    Ok(())
}

/// Target h accumulates PK(h′→h) from every source h′ whose largest score over
/// all later targets is attained at h. Co-maximal targets all receive it.
pub fn inlet_scores(table: &SimilarityTable, config: &ModelConfig) -> Result<HubScoreTable> {
    hub_scores(table, config, HubDirection::Inlet)
}

/// Source h accumulates PK(h→h′) from every target h′ whose largest score over
/// all earlier sources is attained at h.
pub fn outlet_scores(table: &SimilarityTable, config: &ModelConfig) -> Result<HubScoreTable> {
    hub_scores(table, config, HubDirection::Outlet)
}

fn hub_scores(table: &SimilarityTable, config: &ModelConfig, direction: HubDirection) -> Result<HubScoreTable> {
    check_complete(table, config)?;
    let mut scores: BTreeMap<HeadId, f64> = config
        .heads()
        .filter(|h| match direction {
            HubDirection::Inlet => h.layer > 0,
            HubDirection::Outlet => h.layer + 1 < config.n_layers,
        })
        .map(|h| (h, 0.0))
        .collect();
    // Group by the head whose row is maximized over.
    let mut groups: BTreeMap<HeadId, Vec<(HeadId, f64)>> = BTreeMap::new();
    for e in &table.entries {
        let (key, other) = match direction {
            HubDirection::Inlet => (e.src, e.dst),
            HubDirection::Outlet => (e.dst, e.src),
        };
        groups.entry(key).or_default().push((other, e.score));
    }
    for row in groups.values() {
        let max = row.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        for (h, s) in row {
            if *s == max {
                *scores.get_mut(h).expect("row heads are in range") += s;
            }
        }
    }
    Ok(HubScoreTable {
        direction,
        pairing: table.pairing,
        scores,
    })
}

pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlCell {
    pub pairing: PairingType,
    pub mean: f64,
    pub variance: f64,
    pub kl: f64,
    /// The fitted or reference variance was raised to `VARIANCE_FLOOR`.
    pub floored: bool,
}

/// KL between the Gaussian fit of each pairing's PK scores and the tight
/// random-subspace reference. Rows are source types, columns target types,
/// both in Q, K, V, O order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlHeatmap {
    pub direction: KlDirection,
    pub reference_mean: f64,
    pub reference_variance: f64,
    pub cells: Vec<KlCell>,
}

impl KlHeatmap {
    pub fn get(&self, pairing: PairingType) -> Option<&KlCell> {
        self.cells.iter().find(|c| c.pairing == pairing)
    }

    pub fn argmax(&self) -> PairingType {
        self.cells
            .iter()
            .max_by(|a, b| a.kl.total_cmp(&b.kl))
            .expect("16 cells")
            .pairing
    }

    pub fn argmin(&self) -> PairingType {
        self.cells
            .iter()
            .min_by(|a, b| a.kl.total_cmp(&b.kl))
            .expect("16 cells")
            .pairing
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["source", "Q", "K", "V", "O"])?;
        for s in WType::ALL {
            let mut rec = vec![s.to_string()];
            for t in WType::ALL {
                let cell = self.get(PairingType::new(s, t)).expect("all pairings present");
                rec.push(format!("{:.17e}", cell.kl));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(())
    }
}

pub fn kl_from_tables(tables: &[SimilarityTable], config: &ModelConfig, direction: KlDirection) -> Result<KlHeatmap> {
    let reference = tight_reference(config.d_model, config.d_head)?;
    let ref_var = reference.variance.max(VARIANCE_FLOOR);
    let cells = tables
        .iter()
        .map(|t| {
            let fit = EmpiricalDistribution::from_samples(t.scores())?;
            let variance = fit.variance.max(VARIANCE_FLOOR);
            let kl = kl_with_direction((fit.mean, variance), (reference.mean, ref_var), direction)?;
            Ok(KlCell {
                pairing: t.pairing,
                mean: fit.mean,
                variance: fit.variance,
                kl,
                floored: fit.variance < VARIANCE_FLOOR || reference.variance < VARIANCE_FLOOR,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KlHeatmap {
        direction,
        reference_mean: reference.mean,
        reference_variance: reference.variance,
        cells,
    })
}

/// PK over strict_earlier pairs for all 16 pairings, each compared with the
/// tight reference. Deterministic: no sampling is involved.
pub fn kl_heatmap(weights: &ModelWeights, direction: KlDirection) -> Result<KlHeatmap> {
    let tables = PairingType::all()
        .into_iter()
        .map(|p| score_all_pairs(weights, Metric::Pk, p, PairMode::StrictEarlier))
        .collect::<Result<Vec<_>>>()?;
    kl_from_tables(&tables, &weights.config, direction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::PairScore;

    fn table(cfg: &ModelConfig, f: impl Fn(HeadId, HeadId) -> f64) -> SimilarityTable {
        SimilarityTable {
            metric: Metric::Pk,
            pairing: PairingType::OV,
            mode: PairMode::StrictEarlier,
            entries: enumerate_pairs(cfg, PairMode::StrictEarlier)
                .into_iter()
                .map(|(src, dst)| PairScore { src, dst, score: f(src, dst) })
                .collect(),
        }
    }

    #[test]
    fn wiring_top_k() {
        let cfg = ModelConfig::new(4, 2, 2, 2).unwrap();
        let t = table(&cfg, |s, d| (s.head * 2 + d.head) as f64);
        let w = build_wiring(std::slice::from_ref(&t), 1).unwrap();
        assert_eq!(w.edges.len(), 1);
        assert_eq!((w.edges[0].src, w.edges[0].dst), (HeadId::new(0, 1), HeadId::new(1, 1)));
        assert_eq!(w.edges[0].opacity, 1.0);
        let all = build_wiring(&[t], 100).unwrap();
        assert_eq!(all.edges.len(), 4);
        let dot = all.to_dot(None, Some("cfg"));
        assert!(dot.starts_with("// cfg\n"));
        assert_eq!(dot.matches(" -> ").count(), 4);
    }

    #[test]
    fn debias_cases() {
        let cfg = ModelConfig::new(4, 2, 2, 2).unwrap();
        let flat = table(&cfg, |_, _| 0.3);
        let (z, info) = debias_with(&flat, 0.3, 64);
        assert!(info.all_zero);
        assert!(z.scores().iter().all(|&s| s == 0.0));
        let peaked = table(&cfg, |s, d| if s.head == 0 && d.head == 0 { 5.0 } else { 0.1 });
        let (p, _) = debias_with(&peaked, 0.3, 64);
        assert_eq!(p.get(HeadId::new(0, 0), HeadId::new(1, 0)), Some(1.0));
    }

    #[test]
    fn hub_edges() {
        let cfg = ModelConfig::new(4, 2, 2, 2).unwrap();
        let t = table(&cfg, |s, d| (s.head * 2 + d.head) as f64 + 1.0);
        let inlet = inlet_scores(&t, &cfg).unwrap();
        assert!(!inlet.scores.contains_key(&HeadId::new(0, 0)));
        // Both sources peak at L1H1: 2 + 4.
        assert_eq!(inlet.scores[&HeadId::new(1, 1)], 6.0);
        assert_eq!(inlet.scores[&HeadId::new(1, 0)], 0.0);
        let outlet = outlet_scores(&t, &cfg).unwrap();
        assert!(!outlet.scores.contains_key(&HeadId::new(1, 0)));
        assert_eq!(outlet.scores[&HeadId::new(0, 1)], 3.0 + 4.0);
        let mut partial = t.clone();
        partial.entries.pop();
        assert!(inlet_scores(&partial, &cfg).is_err());
    }

    #[test]
    fn degenerate_kl_uses_floor() {
        let cfg = ModelConfig::new(4, 2, 2, 2).unwrap();
        let t = table(&cfg, |_, _| 2.0);
        let h = kl_from_tables(&[t], &cfg, KlDirection::default()).unwrap();
        assert!(h.cells[0].floored);
        assert!(h.cells[0].kl.is_finite());
    }
}
