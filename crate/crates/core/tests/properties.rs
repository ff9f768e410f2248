use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;

use cleit::data::{pair_domains, DomainDataset};
use cleit::eval::{matrix_report, topk_precision};
use cleit::losses::{contrastive_clr, mmd, si_mse, KernelSpec, LabelBatch};
use cleit::numerics::{Graph, Matrix};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

/// Random mask with at least one observed entry per row.
fn mask(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(prop::bool::weighted(0.8), rows * cols).prop_map(move |v| {
        let mut m = Array2::from_shape_vec((rows, cols), v.into_iter().map(|b| b as u8 as f64).collect()).unwrap();
        for i in 0..rows {
            m[[i, i % cols]] = 1.0;
        }
        m
    })
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(z)) => (x - z).abs() < 1e-12,
        (x, z) => x == z,
    }
}

fn si(pred: &Matrix, y: &Matrix, m: &Matrix) -> f64 {
    let batch = LabelBatch::new(y * m, m.clone()).unwrap();
    let mut g = Graph::new();
    let p = g.input(pred.clone());
    let l = si_mse(&mut g, p, &batch).unwrap();
    g.scalar(l)
}

fn clr(zh: &Matrix, zl: &Matrix) -> f64 {
    let mut g = Graph::new();
    let (a, b) = (g.input(zh.clone()), g.input(zl.clone()));
    let l = contrastive_clr(&mut g, a, b, 1.0).unwrap();
    g.scalar(l)
}

fn mmd_value(a: &Matrix, b: &Matrix) -> f64 {
    let kernel = KernelSpec::new(vec![0.5, 1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let (x, y) = (g.input(a.clone()), g.input(b.clone()));
    let l = mmd(&mut g, x, y, &kernel).unwrap();
    g.scalar(l)
}

fn dataset(ids: &[usize], prefix: &str) -> DomainDataset {
    let features = Array2::from_shape_fn((ids.len(), 2), |(i, j)| (ids[i] * 10 + j) as f64);
    DomainDataset::new(
        ids.iter().map(|i| format!("{prefix}{i}")).collect(),
        vec!["a".into(), "b".into()],
        features,
        None,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn si_mse_ignores_per_row_shifts(
        y in matrix(5, 4, 0.0, 1.0),
        pred in matrix(5, 4, -1.0, 2.0),
        shift in prop::collection::vec(-5.0..5.0f64, 5),
        m in mask(5, 4),
    ) {
        let shifted = &pred + &Array1::from(shift).insert_axis(Axis(1));
        prop_assert!((si(&pred, &y, &m) - si(&shifted, &y, &m)).abs() < 1e-9);
    }

    #[test]
    fn si_mse_ignores_masked_entries(
        y in matrix(5, 4, 0.0, 1.0),
        pred in matrix(5, 4, -1.0, 2.0),
        junk in matrix(5, 4, -100.0, 100.0),
        m in mask(5, 4),
    ) {
        let mixed = &pred * &m + &junk * &m.mapv(|v| 1.0 - v);
        prop_assert_eq!(si(&pred, &y, &m).to_bits(), si(&mixed, &y, &m).to_bits());
    }

    #[test]
    fn contrastive_is_scale_invariant(
        zh in matrix(6, 3, -2.0, 2.0),
        zl in matrix(6, 3, -2.0, 2.0),
        a in 0.01..50.0f64,
        b in 0.01..50.0f64,
    ) {
        prop_assume!(zh.rows().into_iter().chain(zl.rows()).all(|r| r.dot(&r) > 1e-6));
        prop_assert!((clr(&zh, &zl) - clr(&(&zh * a), &(&zl * b))).abs() < 1e-9);
    }

    #[test]
    fn contrastive_is_invariant_to_joint_row_permutation(
        zh in matrix(6, 3, -2.0, 2.0),
        zl in matrix(6, 3, -2.0, 2.0),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        prop_assume!(zh.rows().into_iter().chain(zl.rows()).all(|r| r.dot(&r) > 1e-6));
        let (ph, pl) = (zh.select(Axis(0), &perm), zl.select(Axis(0), &perm));
        prop_assert!((clr(&zh, &zl) - clr(&ph, &pl)).abs() < 1e-9);
    }

    #[test]
    fn mmd_is_symmetric_and_non_negative(a in matrix(5, 3, -2.0, 2.0), b in matrix(7, 3, -1.0, 3.0)) {
        let ab = mmd_value(&a, &b);
        prop_assert!(ab >= -1e-12);
        prop_assert!((ab - mmd_value(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn pairing_follows_high_order_and_ignores_low_order(
        high in prop::collection::btree_set(0usize..40, 1..20),
        low in prop::collection::btree_set(0usize..40, 1..20),
        seed in any::<u64>(),
    ) {
        let high: Vec<usize> = high.into_iter().collect();
        let mut low: Vec<usize> = low.into_iter().collect();
        let h = dataset(&high, "S");
        let a = pair_domains(&h, &dataset(&low, "S"));
        low.reverse();
        let shift = seed as usize % low.len();
        low.rotate_left(shift);
        let b = pair_domains(&h, &dataset(&low, "S"));
        let shared: Vec<usize> = high.iter().copied().filter(|i| low.contains(i)).collect();
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a.sample_ids, &b.sample_ids);
                prop_assert_eq!(&a.low, &b.low);
                let want: Vec<String> = shared.iter().map(|i| format!("S{i}")).collect();
                prop_assert_eq!(&a.sample_ids, &want);
                for (r, &i) in a.high_rows.iter().zip(&shared) {
                    prop_assert_eq!(high[*r], i);
                }
            }
            (Err(_), Err(_)) => prop_assert!(shared.is_empty()),
            _ => prop_assert!(false, "permuting the low domain changed success"),
        }
    }

    #[test]
    fn pairing_is_idempotent(ids in prop::collection::btree_set(0usize..40, 1..20)) {
        let ids: Vec<usize> = ids.into_iter().collect();
        let d = dataset(&ids, "S");
        let p = pair_domains(&d, &d).unwrap();
        prop_assert_eq!(&p.sample_ids, &d.sample_ids);
        prop_assert_eq!(&p.high, &d.features);
        prop_assert_eq!(&p.low, &d.features);
    }

    #[test]
    fn report_permutes_with_rows_and_columns(
        y in matrix(6, 5, 0.0, 1.0),
        p in matrix(6, 5, 0.0, 1.0),
        m in mask(6, 5),
        rows in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        cols in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let a = matrix_report(&y, &p, &m).unwrap();
        let permute = |x: &Matrix| x.select(Axis(0), &rows).select(Axis(1), &cols);
        let b = matrix_report(&permute(&y), &permute(&p), &permute(&m)).unwrap();
        for (k, &r) in rows.iter().enumerate() {
            prop_assert!(close(a.samplewise_rmse.values[r], b.samplewise_rmse.values[k]));
            prop_assert!(close(a.samplewise_pearson.values[r], b.samplewise_pearson.values[k]));
        }
        for (k, &c) in cols.iter().enumerate() {
            prop_assert!(close(a.drugwise_rmse.values[c], b.drugwise_rmse.values[k]));
            prop_assert!(close(a.drugwise_pearson.values[c], b.drugwise_pearson.values[k]));
        }
        prop_assert_eq!(a.samplewise_pearson.excluded, b.samplewise_pearson.excluded);
    }

    #[test]
    fn topk_matches_brute_force(
        y in prop::collection::vec(0.0..1.0f64, 12),
        p in prop::collection::vec(0.0..1.0f64, 12),
        m in prop::collection::vec(prop::bool::weighted(0.7), 12),
        k in 1usize..12,
    ) {
        let mf: Vec<f64> = m.iter().map(|&b| b as u8 as f64).collect();
        let got = topk_precision(Array1::from(y.clone()).view(), Array1::from(p.clone()).view(), Array1::from(mf).view(), k);
        let idx: Vec<usize> = (0..12).filter(|&j| m[j]).collect();
        if idx.len() < k {
            prop_assert_eq!(got, None);
        } else {
            // an entry is in the top k when fewer than k entries precede it
            let top = |v: &[f64]| -> Vec<usize> {
                idx.iter()
                    .copied()
                    .filter(|&j| idx.iter().filter(|&&i| (v[i], i) < (v[j], j)).count() < k)
                    .collect()
            };
            let (ty, tp) = (top(&y), top(&p));
            let hits = tp.iter().filter(|j| ty.contains(j)).count();
            prop_assert_eq!(got, Some(hits as f64 / k as f64));
        }
    }

    #[test]
    fn topk_is_invariant_to_monotone_transforms(
        y in prop::collection::vec(0.0..1.0f64, 12),
        p in prop::collection::vec(-3.0..3.0f64, 12),
        m in prop::collection::vec(prop::bool::weighted(0.7), 12),
        k in 1usize..12,
        scale in 0.1..10.0f64,
        offset in -5.0..5.0f64,
    ) {
        let (y, p) = (Array1::from(y), Array1::from(p));
        let m: Array1<f64> = m.iter().map(|&b| b as u8 as f64).collect();
        let base = topk_precision(y.view(), p.view(), m.view(), k);
        let affine = p.mapv(|v| scale * v + offset);
        let exp = p.mapv(f64::exp);
        prop_assert_eq!(base, topk_precision(y.view(), affine.view(), m.view(), k));
        prop_assert_eq!(base, topk_precision(y.view(), exp.view(), m.view(), k));
    }
}
