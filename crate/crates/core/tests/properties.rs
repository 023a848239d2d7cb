mod common;

use common::{gaussian, random_basis, random_orthogonal, rng};
use headsim::analysis::{build_wiring, debias_with, inlet_scores, outlet_scores};
use headsim::evaluation::{roc_auc, spearman};
use headsim::similarity::{
    composition_score, enumerate_pairs, linear_cka, procrustes_similarity, PairScore,
};
use headsim::subspace::{normalized_pk, orthonormalize, projection_kernel, Subspace};
use headsim::tensor_io::{BundleWriter, DType};
use headsim::{HeadId, Metric, ModelConfig, PairMode, PairingType, SimilarityTable};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn subspace(b: DMatrix<f64>) -> Subspace {
    Subspace::from_orthonormal(b).unwrap()
}

fn random_table(cfg: &ModelConfig, seed: u64) -> SimilarityTable {
    let mut r = rng(seed);
    SimilarityTable {
        metric: Metric::Pk,
        pairing: PairingType::OQ,
        mode: PairMode::StrictEarlier,
        entries: enumerate_pairs(cfg, PairMode::StrictEarlier)
            .into_iter()
            .map(|(src, dst)| PairScore { src, dst, score: r.random::<f64>() * cfg.d_head as f64 })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pk_is_bounded_symmetric_and_rotation_invariant(seed in any::<u64>(), d in 2usize..24, frac in 0.0f64..1.0) {
        let m = 1 + ((d - 1) as f64 * frac) as usize;
        let mut r = rng(seed);
        let a = subspace(random_basis(d, m, &mut r));
        let b = subspace(random_basis(d, m, &mut r));
        let pk = projection_kernel(&a, &b).unwrap();
        prop_assert!((-1e-12..=m as f64 + 1e-12).contains(&pk));
        prop_assert!((pk - projection_kernel(&b, &a).unwrap()).abs() < 1e-10);
        let n = normalized_pk(&a, &b).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&n));
        let q = random_orthogonal(d, &mut r);
        let qa = subspace(&q * a.basis());
        let qb = subspace(&q * b.basis());
        prop_assert!((projection_kernel(&qa, &qb).unwrap() - pk).abs() < 1e-9);
    }

    #[test]
    fn pk_depends_only_on_the_span(seed in any::<u64>(), d in 3usize..20) {
        let mut r = rng(seed);
        let m = d / 2;
        let w = gaussian(d, m, &mut r);
        let mix = gaussian(m, m, &mut r);
        let other = subspace(random_basis(d, m, &mut r));
        let a = orthonormalize(&w).unwrap();
        let b = orthonormalize(&(&w * mix)).unwrap();
        prop_assert!((projection_kernel(&a, &other).unwrap() - projection_kernel(&b, &other).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn baselines_lie_in_unit_interval(seed in any::<u64>(), d in 3usize..20, dh in 2usize..6, scale in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let ws = gaussian(d, dh, &mut r) * scale;
        let wt = gaussian(d, dh, &mut r);
        let unit = -1e-12..=1.0 + 1e-12;
        let cs = composition_score(&(&wt * wt.transpose()), &(&ws * ws.transpose())).unwrap();
        prop_assert!(unit.contains(&cs));
        let cka = linear_cka(&ws, &wt).unwrap();
        prop_assert!(unit.contains(&cka));
        prop_assert!((linear_cka(&(&ws * 7.0), &wt).unwrap() - cka).abs() < 1e-9);
        let p = procrustes_similarity(&ws, &wt).unwrap();
        prop_assert!(unit.contains(&p));
        prop_assert!((procrustes_similarity(&wt, &ws).unwrap() - p).abs() < 1e-9);
    }

    #[test]
    fn inlet_mass_is_sum_of_row_maxima(seed in any::<u64>(), layers in 2usize..5, heads in 1usize..5) {
        let cfg = ModelConfig::new(8, 2, layers, heads).unwrap();
        let table = random_table(&cfg, seed);
        let inlet = inlet_scores(&table, &cfg).unwrap();
        let outlet = outlet_scores(&table, &cfg).unwrap();
        let mut row_max = std::collections::BTreeMap::<HeadId, f64>::new();
        let mut col_max = std::collections::BTreeMap::<HeadId, f64>::new();
        for e in &table.entries {
            let r = row_max.entry(e.src).or_insert(f64::MIN);
            *r = r.max(e.score);
            let c = col_max.entry(e.dst).or_insert(f64::MIN);
            *c = c.max(e.score);
        }
        let inlet_mass: f64 = inlet.scores.values().sum();
        let outlet_mass: f64 = outlet.scores.values().sum();
        prop_assert!((inlet_mass - row_max.values().sum::<f64>()).abs() < 1e-9);
        prop_assert!((outlet_mass - col_max.values().sum::<f64>()).abs() < 1e-9);
        prop_assert!(inlet.scores.values().all(|s| *s >= 0.0));
        prop_assert!(inlet.scores.keys().all(|h| h.layer > 0));
        prop_assert!(outlet.scores.keys().all(|h| h.layer + 1 < layers));
    }

    #[test]
    fn wiring_ignores_input_order(seed in any::<u64>(), k in 1usize..30) {
        let cfg = ModelConfig::new(8, 2, 3, 4).unwrap();
        let mut table = random_table(&cfg, seed);
        // Coarse scores force ties.
        for e in &mut table.entries {
            e.score = (e.score * 2.0).round();
        }
        let a = build_wiring(std::slice::from_ref(&table), k).unwrap();
        table.entries.shuffle(&mut rng(seed.wrapping_add(1)));
        let b = build_wiring(&[table], k).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn debias_peaks_at_one(seed in any::<u64>(), bias in 0.0f64..2.0) {
        let cfg = ModelConfig::new(8, 2, 3, 3).unwrap();
        let table = random_table(&cfg, seed);
        let (out, info) = debias_with(&table, bias, 64);
        let max = out.scores().into_iter().fold(0.0, f64::max);
        if table.scores().iter().any(|s| *s > bias) {
            prop_assert!(!info.all_zero);
            prop_assert_eq!(max, 1.0);
        } else {
            prop_assert_eq!(max, 0.0);
        }
        prop_assert!(out.scores().iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn spearman_is_symmetric_and_bounded(xs in prop::collection::vec(-10.0f64..10.0, 3..40), seed in any::<u64>()) {
        let mut r = rng(seed);
        let ys: Vec<f64> = xs.iter().map(|x| x + r.random::<f64>()).collect();
        let a = spearman(&xs, &ys).unwrap();
        let b = spearman(&ys, &xs).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
    }

    #[test]
    fn roc_auc_flips_under_negation(seed in any::<u64>(), n in 4usize..100) {
        let mut r = rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * 5.0).floor()).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
        labels[0] = true;
        labels[1] = false;
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = roc_auc(&scores, &labels).unwrap();
        prop_assert!((a + roc_auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn head_ids_round_trip(layer in 0usize..100, head in 0usize..100) {
        let h = HeadId::new(layer, head);
        prop_assert_eq!(h.to_string().parse::<HeadId>().unwrap(), h);
    }

    #[test]
    fn bundle_round_trips_f64(seed in any::<u64>(), rows in 1usize..9, cols in 1usize..9) {
        let m = gaussian(rows, cols, &mut rng(seed));
        let dir = tempfile::tempdir().unwrap();
        let mut w = BundleWriter::create(dir.path(), ModelConfig::new(4, 2, 1, 1).unwrap(), DType::F64).unwrap();
        w.add_matrix("x", &m).unwrap();
        let b = w.finish().unwrap();
        prop_assert_eq!(b.read_matrix("x", rows, cols).unwrap(), m);
    }
}
