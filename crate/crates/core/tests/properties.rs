use dissim::dichotomizer::{
    diag_mahalanobis_distance, fixed_norm_project, predict, Dichotomizer, MahalanobisParams, NormRegime,
};
use dissim::evaluator::{pca_project_2d, recall_at_k, RankKey, Scorer};
use dissim::ops::Mode;
use dissim::pairspace::{count_pairs, dichotomy_transform, enumerate_all_pairs};
use dissim::{SeededRng, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

fn row(v: &[f64]) -> Tensor {
    Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
}

fn dichotomizer(w: &[f64], b: f64) -> Dichotomizer {
    let mut d = Dichotomizer::new(w.len(), 1.0, NormRegime::SoftL2, &mut SeededRng::new(0)).unwrap();
    d.weight.value = Tensor::vector(w.to_vec());
    d.bias.value = Tensor::scalar(b);
    d
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn dichotomy_is_a_symmetric_nonnegative_elementwise_metric(
        a in vec_strategy(6), b in vec_strategy(6), c in vec_strategy(6)
    ) {
        let (ta, tb, tc) = (row(&a), row(&b), row(&c));
        let ab = dichotomy_transform(&ta, &tb).unwrap();
        let ba = dichotomy_transform(&tb, &ta).unwrap();
        let ac = dichotomy_transform(&ta, &tc).unwrap();
        let bc = dichotomy_transform(&tb, &tc).unwrap();
        prop_assert_eq!(ab.data(), ba.data());
        prop_assert!(ab.data().iter().all(|v| *v >= 0.0));
        prop_assert_eq!(ab.data().iter().all(|v| *v == 0.0), a == b);
        prop_assert!(dichotomy_transform(&ta, &ta).unwrap().data().iter().all(|v| *v == 0.0));
        for j in 0..6 {
            // The three subtractions each round once; allow those few ulps.
            let bound = (ab.data()[j] + bc.data()[j]) * (1.0 + 4.0 * f64::EPSILON);
            prop_assert!(ac.data()[j] <= bound);
        }
    }

    #[test]
    fn hinge_is_convex_in_classifier_parameters(
        w1 in vec_strategy(4), w2 in vec_strategy(4), b1 in -5.0f64..5.0, b2 in -5.0f64..5.0,
        u in prop::collection::vec(0.0f64..5.0, 24), fixed in any::<bool>(),
    ) {
        let u = Tensor::new(vec![6, 4], u).unwrap();
        let y = [1i8, -1, 1, -1, 1, -1];
        let mut rng = SeededRng::new(0);
        let mut loss = |w: &[f64], b: f64| {
            let mut d = dichotomizer(w, b);
            if fixed {
                d.norm_regime = NormRegime::FixedNorm(1.0);
            }
            d.hinge_loss(&u, &y, Mode::Eval, &mut rng, 1.0).unwrap().0
        };
        let mid: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| 0.5 * (a + b)).collect();
        let lm = loss(&mid, 0.5 * (b1 + b2));
        let avg = 0.5 * (loss(&w1, b1) + loss(&w2, b2));
        prop_assert!(lm <= avg + 1e-9 * avg.abs().max(1.0));
    }

    #[test]
    fn positive_rescaling_keeps_predictions_and_rankings(
        w in vec_strategy(3), b in -3.0f64..3.0, lambda in 0.01f64..100.0, exp in -8i32..8,
        pts in prop::collection::vec(-3.0f64..3.0, 24),
    ) {
        let emb = Tensor::new(vec![8, 3], pts).unwrap();
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let d = dichotomizer(&w, b);
        let scaled = |l: f64| dichotomizer(&w.iter().map(|v| v * l).collect::<Vec<_>>(), b * l);
        let u = dichotomy_transform(&emb.select_rows(&[0, 1, 2, 3]), &emb.select_rows(&[4, 5, 6, 7])).unwrap();
        let s = d.scores(&u).unwrap();
        for (a, c) in s.iter().zip(&scaled(lambda).scores(&u).unwrap()) {
            if a.abs() > 1e-9 {
                prop_assert_eq!(predict(*a), predict(*c));
            }
        }
        // Power-of-two factors rescale every score exactly, so rankings must match bit for bit.
        let pow2 = scaled(2f64.powi(exp));
        let r = recall_at_k(&emb, &labels, &[1, 2, 4], Scorer::DissimSvm, &RankKey::Dissim(&d), 1).unwrap();
        let r2 = recall_at_k(&emb, &labels, &[1, 2, 4], Scorer::DissimSvm, &RankKey::Dissim(&pow2), 1).unwrap();
        prop_assert_eq!(r, r2);
    }

    #[test]
    fn recall_is_monotone_in_k_for_every_scorer(
        pts in prop::collection::vec(-3.0f64..3.0, 30), w in vec_strategy(3),
        lvals in prop::collection::vec(-2.0f64..2.0, 9),
    ) {
        let emb = Tensor::new(vec![10, 3], pts).unwrap();
        let labels = [0, 0, 0, 1, 1, 2, 2, 2, 3, 4];
        let d = dichotomizer(&w, 0.3);
        let mut m = MahalanobisParams::new(3, 1.0);
        m.l.value = Tensor::new(vec![3, 3], lvals).unwrap();
        let ks: Vec<usize> = (1..=9).collect();
        for (scorer, key) in [
            (Scorer::Euclid, RankKey::Euclid),
            (Scorer::DissimSvm, RankKey::Dissim(&d)),
            (Scorer::Mahalanobis, RankKey::Mahalanobis(&m)),
        ] {
            let r = recall_at_k(&emb, &labels, &ks, scorer, &key, 1).unwrap();
            let vals: Vec<f64> = r.recall_at.values().copied().collect();
            prop_assert!(vals.windows(2).all(|p| p[0] <= p[1]));
            prop_assert_eq!(r.skipped, 2);
            prop_assert_eq!(r.recall_at[&9], 1.0);
        }
    }

    #[test]
    fn diagonal_weighting_equals_full_metric_with_root_weights(
        x in vec_strategy(5), y in vec_strategy(5), w in prop::collection::vec(0.0f64..4.0, 5),
    ) {
        let diag = diag_mahalanobis_distance(&x, &y, &w, true).unwrap();
        let mut m = MahalanobisParams::new(5, 1.0);
        for (i, wi) in w.iter().enumerate() {
            m.l.value.data_mut()[i * 5 + i] = wi.sqrt();
        }
        let full = m.distance(&x, &y).unwrap();
        prop_assert!((diag - full).abs() <= 1e-12 * diag.max(1.0));
    }

    #[test]
    fn full_metric_is_nonnegative_and_matches_quadratic_form(
        x in vec_strategy(4), y in vec_strategy(4), l in prop::collection::vec(-3.0f64..3.0, 16),
    ) {
        let mut m = MahalanobisParams::new(4, 1.0);
        m.l.value = Tensor::new(vec![4, 4], l.clone()).unwrap();
        let d2 = m.distance(&x, &y).unwrap();
        prop_assert!(d2 >= 0.0);
        let lm = DMatrix::from_row_slice(4, 4, &l);
        let delta = DMatrix::from_iterator(4, 1, x.iter().zip(&y).map(|(a, b)| a - b));
        let quad = (delta.transpose() * lm.transpose() * lm * &delta)[(0, 0)];
        prop_assert!((d2 - quad).abs() <= 1e-10 * quad.abs().max(1.0));
    }

    #[test]
    fn fixed_norm_projection_hits_tau(w in vec_strategy(7), tau in 0.01f64..50.0) {
        prop_assume!(w.iter().any(|v| *v != 0.0));
        let mut t = Tensor::vector(w);
        fixed_norm_project(&mut t, tau).unwrap();
        prop_assert!((t.norm_sq().sqrt() - tau).abs() <= 1e-12 * tau.max(1.0));
    }

    #[test]
    fn pca_matches_dense_eigensolver(pts in prop::collection::vec(-5.0f64..5.0, 50 * 8)) {
        let x = Tensor::new(vec![50, 8], pts).unwrap();
        let p = pca_project_2d(&x).unwrap();

        let m = DMatrix::from_row_slice(50, 8, x.data());
        let mean = m.row_mean();
        let mut centered = m.clone();
        for mut r in centered.row_iter_mut() {
            r -= &mean;
        }
        let cov = centered.transpose() * &centered / 49.0;
        let mut eig: Vec<f64> = SymmetricEigen::new(cov.clone()).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));

        prop_assert!((p.variances[0] - eig[0]).abs() <= 1e-8 * eig[0].max(1.0));
        prop_assert!((p.variances[1] - eig[1]).abs() <= 1e-8 * eig[0].max(1.0));
        prop_assert!((p.total_variance - cov.trace()).abs() <= 1e-9 * cov.trace());
        prop_assert!(p.variances[0] + p.variances[1] <= p.total_variance + 1e-9);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        prop_assert!((dot(&p.axes[0], &p.axes[0]) - 1.0).abs() < 1e-10);
        prop_assert!((dot(&p.axes[1], &p.axes[1]) - 1.0).abs() < 1e-10);
        prop_assert!(dot(&p.axes[0], &p.axes[1]).abs() < 1e-10);
        prop_assert!(!p.degenerate);
    }
}

#[test]
fn pair_counts_satisfy_the_binomial_identity() {
    let choose2 = |n: u64| n * n.saturating_sub(1) / 2;
    for k in 1..=20u64 {
        for r in 1..=20u64 {
            let c = count_pairs(k, r).unwrap();
            assert_eq!(c.positives + c.negatives, choose2(k * r));
            assert_eq!(c.total, choose2(k * r));
        }
    }
    for k in 1..=6usize {
        for r in 1..=6usize {
            let labels: Vec<usize> = (0..k * r).map(|i| i / r).collect();
            let mut pos = 0u64;
            let mut neg = 0u64;
            for i in 0..labels.len() {
                for j in i + 1..labels.len() {
                    if labels[i] == labels[j] {
                        pos += 1;
                    } else {
                        neg += 1;
                    }
                }
            }
            let c = count_pairs(k as u64, r as u64).unwrap();
            assert_eq!((c.positives, c.negatives), (pos, neg), "K={k} R={r}");
            if labels.len() >= 2 {
                let e = enumerate_all_pairs(&labels);
                assert_eq!(e.positives() as u64, pos);
                assert_eq!(e.len() as u64, pos + neg);
            }
        }
    }
}

#[test]
fn duplicated_points_give_perfect_recall_under_every_scorer() {
    let emb = Tensor::from_rows(&[
        vec![1.0, 2.0],
        vec![1.0, 2.0],
        vec![-3.0, 0.5],
        vec![-3.0, 0.5],
        vec![4.0, -1.0],
        vec![4.0, -1.0],
    ])
    .unwrap();
    let labels = [0, 0, 1, 1, 2, 2];
    let d = dichotomizer(&[-1.0, -0.5], 0.0);
    let m = MahalanobisParams::new(2, 1.0);
    for (scorer, key) in [
        (Scorer::Euclid, RankKey::Euclid),
        (Scorer::DissimSvm, RankKey::Dissim(&d)),
        (Scorer::Mahalanobis, RankKey::Mahalanobis(&m)),
    ] {
        assert_eq!(recall_at_k(&emb, &labels, &[1], scorer, &key, 1).unwrap().r1(), 1.0);
    }
}
