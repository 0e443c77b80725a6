mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use common::*;
use imblens::class_stats::{self, ProfileOptions};
use imblens::cli::manifest::sha256_file;
use imblens::divergence::{self, OverlapOptions, RankBy};
use imblens::embx::{self, read_embeddings, read_head};
use imblens::probe::{self, TrainConfig};
use imblens::topk::{self, GroupBy, Ranking, TopKRequest};
use imblens::{accuracy, check_exported_logits, decompose, ClassifierHead, EmbeddingSet, Matrix, ReadOptions, Split};
use rand::Rng;

#[test]
fn union_count_matches_set_union() {
    let mut r = rng(20);
    for _ in 0..25 {
        let es = random_set(&mut r, 20, 8, 3, Split::Train);
        let head = random_head(&mut r, 3, 8, true);
        let d = decompose(&es, &head).unwrap();
        let got = topk::union_counts(&d, es.labels(), 2, Ranking::CE, GroupBy::Predicted).unwrap();
        let mut expected: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for i in 0..20 {
            let o = oracle_instance(es.fe().row(i), &head);
            expected
                .entry(o.reference)
                .or_default()
                .extend(oracle_top_set(es.fe().row(i), &head, 2));
        }
        let expected: BTreeMap<usize, usize> = expected.into_iter().map(|(c, s)| (c, s.len())).collect();
        assert_eq!(got, expected);
    }
}

#[test]
fn ce_aligned_identities_follow_ce() {
    let mut r = rng(21);
    let es = random_set(&mut r, 30, 10, 4, Split::Train);
    let head = random_head(&mut r, 4, 10, false);
    let d = decompose(&es, &head).unwrap();
    for i in 0..30 {
        let ce = topk::instance_topk(&d, i, 4, Ranking::CE).unwrap();
        let aligned = topk::instance_topk(&d, i, 4, Ranking::FE_CE_ALIGNED).unwrap();
        assert_eq!(ce.k_indices, aligned.k_indices);
        assert_eq!(ce.covered, aligned.covered);
    }
}

#[test]
fn coverage_of_minimal_k_fixture() {
    let head = ClassifierHead::new(
        Matrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![0.0, 0.0, 2.0]]).unwrap(),
        None,
    )
    .unwrap();
    let rows = vec![
        vec![1.0, 0.25, 0.125],
        vec![1.0, 0.75, 0.5],
        vec![0.5, 0.75, 1.0],
        vec![0.625, 0.5, 1.0],
    ];
    let es = EmbeddingSet::new(Matrix::from_rows(&rows).unwrap(), vec![0; 4], 2, Split::Train).unwrap();
    let d = decompose(&es, &head).unwrap();
    let mins: Vec<usize> = (0..4)
        .map(|i| oracle_instance(es.fe().row(i), &head).minimal_k)
        .collect();
    assert_eq!(mins, [1, 2, 3, 3]);
    let r = topk::coverage_ratios(&d, es.labels(), &TopKRequest::new(vec![1, 2, 3])).unwrap();
    assert_eq!(r.overall_coverage, BTreeMap::from([(1, 0.25), (2, 0.5), (3, 1.0)]));
    assert_eq!(r.minimal_k, mins);
}

/// Two classes over 16 features: train activates features 0..10, the test
/// TPs activate 3..13, so each class's top-10 lists share exactly 7.
fn overlap_fixture() -> (EmbeddingSet, EmbeddingSet, ClassifierHead) {
    let row = |active: std::ops::Range<usize>| {
        (0..16)
            .map(|j| if active.contains(&j) { 1.0 } else { 0.0 })
            .collect::<Vec<f32>>()
    };
    let labels = vec![0, 0, 1, 1];
    let train = EmbeddingSet::new(
        Matrix::from_rows(&vec![row(0..10); 4]).unwrap(),
        labels.clone(),
        2,
        Split::Train,
    )
    .unwrap();
    let test = EmbeddingSet::new(Matrix::from_rows(&vec![row(3..13); 4]).unwrap(), labels, 2, Split::Test).unwrap();
    let mut r = rng(22);
    let weights: Vec<f32> = (0..32).map(|_| r.random_range(0.5f32..1.0)).collect();
    let head = ClassifierHead::new(Matrix::from_vec(2, 16, weights).unwrap(), None).unwrap();
    (train, test, head)
}

#[test]
fn constructed_overlap_is_seven_tenths() {
    let (train, test, head) = overlap_fixture();
    let d_train = decompose(&train, &head)
        .unwrap()
        .with_predictions(train.labels().to_vec())
        .unwrap();
    let d_test = decompose(&test, &head)
        .unwrap()
        .with_predictions(test.labels().to_vec())
        .unwrap();
    for rank_by in [RankBy::Topk, RankBy::Activation] {
        let opts = OverlapOptions {
            ranking: Ranking::FE,
            top_m: 10,
            k: 10,
            rank_by,
            activity_epsilon: 0.0,
        };
        let r = divergence::identity_overlap(&train, &test, &d_train, &d_test, &opts).unwrap();
        assert_eq!(r.overlap_tp, Some(0.7), "{rank_by:?}");
        assert_eq!(r.overlap_fp, None);
        assert_eq!(r.excluded_fp, vec![0, 1]);
        for v in r.per_class.values() {
            assert_eq!(v.tp, Some(0.7));
        }
    }
}

#[test]
fn overlap_is_invariant_under_feature_relabelling() {
    let mut r = rng(23);
    let train = random_set(&mut r, 40, 12, 3, Split::Train);
    let test = random_set(&mut r, 40, 12, 3, Split::Test);
    let head = random_head(&mut r, 3, 12, true);
    let perm: Vec<usize> = (0..12).rev().collect();
    let relabel = |es: &EmbeddingSet| {
        let rows: Vec<Vec<f32>> = es
            .fe()
            .iter_rows()
            .map(|row| perm.iter().map(|&j| row[j]).collect())
            .collect();
        EmbeddingSet::new(Matrix::from_rows(&rows).unwrap(), es.labels().to_vec(), 3, es.split()).unwrap()
    };
    let w_rows: Vec<Vec<f32>> = head
        .weights()
        .iter_rows()
        .map(|row| perm.iter().map(|&j| row[j]).collect())
        .collect();
    let phead = ClassifierHead::new(Matrix::from_rows(&w_rows).unwrap(), head.bias().map(<[f32]>::to_vec)).unwrap();
    let (ptrain, ptest) = (relabel(&train), relabel(&test));
    let opts = OverlapOptions {
        rank_by: RankBy::Activation,
        activity_epsilon: 2.0,
        top_m: 12,
        ..Default::default()
    };
    let a = divergence::identity_overlap(
        &train,
        &test,
        &decompose(&train, &head).unwrap(),
        &decompose(&test, &head).unwrap(),
        &opts,
    )
    .unwrap();
    let b = divergence::identity_overlap(
        &ptrain,
        &ptest,
        &decompose(&ptrain, &phead).unwrap(),
        &decompose(&ptest, &phead).unwrap(),
        &opts,
    )
    .unwrap();
    assert_eq!(a, b);
    for v in a.per_class.values() {
        assert!(v.tp.is_none_or(|x| (0.0..=1.0).contains(&x)));
    }
}

#[test]
fn random_64_square_round_trips_by_checksum() {
    let tmp = tempfile::tempdir().unwrap();
    let mut r = rng(64);
    let es = random_set(&mut r, 64, 64, 5, Split::Train);
    let a = embx::write_embeddings(&es, &tmp.path().join("a")).unwrap();
    let back = read_embeddings(&a, &ReadOptions::default()).unwrap();
    assert_eq!(back, es);
    let b = embx::write_embeddings(&back, &tmp.path().join("b")).unwrap();
    for file in ["fe.bin", "labels.bin", "manifest.json"] {
        assert_eq!(
            sha256_file(&a.join(file)).unwrap(),
            sha256_file(&b.join(file)).unwrap(),
            "{file}"
        );
    }
    let bytes: Vec<u8> = es.fe().as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    assert_eq!(fs::read(a.join("fe.bin")).unwrap(), bytes);
}

#[test]
fn sibling_directories_load_as_a_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let es = EmbeddingSet::new(
        Matrix::from_rows(&[vec![1.5, 0.25, 0.0]]).unwrap(),
        vec![0],
        2,
        Split::Test,
    )
    .unwrap();
    let head = ClassifierHead::new(
        Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 1.0]]).unwrap(),
        None,
    )
    .unwrap();
    embx::write_embeddings(&es, &tmp.path().join("fe")).unwrap();
    embx::write_head(&head, &tmp.path().join("weights")).unwrap();
    let es2 = read_embeddings(&tmp.path().join("fe"), &ReadOptions::default()).unwrap();
    let head2 = read_head(&tmp.path().join("weights")).unwrap();
    assert_eq!(es2, es);
    assert_eq!(head2, head);
    let bytes: Vec<u8> = [1.5f32, 0.25, 0.0].iter().flat_map(|v| v.to_le_bytes()).collect();
    assert_eq!(fs::read(tmp.path().join("fe/fe.bin")).unwrap(), bytes);
    let d = decompose(&es2, &head2).unwrap();
    assert_eq!(d.logits().row(0), &[1.5, 0.25]);
}

#[test]
fn swapped_exported_row_counts_one_mismatch() {
    let es = EmbeddingSet::new(
        Matrix::from_rows(&[vec![2.0, 1.0, 0.0], vec![0.0, 3.0, 0.0]]).unwrap(),
        vec![0, 1],
        2,
        Split::Test,
    )
    .unwrap();
    let head = ClassifierHead::new(
        Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 1.0]]).unwrap(),
        None,
    )
    .unwrap();
    let d = decompose(&es, &head).unwrap();
    let mut exported = d.logits().map(|v| v as f32);
    exported.row_mut(0).swap(0, 1);
    let r = check_exported_logits(&d, &exported, 1e-4).unwrap();
    assert_eq!(r.mismatched_argmax_count, 1);
    assert_eq!(r.max_abs_err, 1.0);
    assert!(!r.within_tolerance);
}

#[test]
fn weight_summary_of_hand_row() {
    let head = ClassifierHead::new(Matrix::from_rows(&[vec![0.5, -1.2, 0.3]]).unwrap(), None).unwrap();
    let s = &class_stats::weight_summaries(&head)[0];
    let ids: Vec<usize> = s.top_weights.iter().map(|&(i, _)| i).collect();
    assert_eq!(ids, [1, 0, 2]);
    assert!((s.top_weights[0].1 - 1.2).abs() < 1e-6);
    assert!((s.top10_abs_sum - 2.0).abs() < 1e-6);
}

#[test]
fn identical_classes_give_unit_ratio() {
    let mut r = rng(24);
    let base = random_set(&mut r, 10, 6, 1, Split::Train);
    let rows: Vec<Vec<f32>> = base
        .fe()
        .iter_rows()
        .chain(base.fe().iter_rows())
        .map(<[f32]>::to_vec)
        .collect();
    let labels: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
    let es = EmbeddingSet::new(Matrix::from_rows(&rows).unwrap(), labels, 2, Split::Train).unwrap();
    let w: Vec<f32> = (0..6).map(|_| r.random_range(0.1f32..1.0)).collect();
    let head = ClassifierHead::new(Matrix::from_rows(&[w.clone(), w]).unwrap(), None).unwrap();
    let d = decompose(&es, &head).unwrap();
    let opts = ProfileOptions {
        group_by: GroupBy::True,
        ..Default::default()
    };
    let p = class_stats::class_profiles(&es, &d, &opts).unwrap();
    let ratio = class_stats::largest_mean_ce_ratio(&p.profiles, 0).unwrap();
    assert_eq!(ratio.ratio, Some(1.0));
}

#[test]
fn class_means_scale_linearly() {
    let mut r = rng(25);
    let es = random_set(&mut r, 30, 5, 3, Split::Train);
    let head = random_head(&mut r, 3, 5, false);
    let lambda = 4.0f32;
    let scaled = EmbeddingSet::new(es.fe().map(|v| v * lambda), es.labels().to_vec(), 3, Split::Train).unwrap();
    let opts = ProfileOptions {
        group_by: GroupBy::True,
        ..Default::default()
    };
    let a = class_stats::class_profiles(&es, &decompose(&es, &head).unwrap(), &opts).unwrap();
    let b = class_stats::class_profiles(&scaled, &decompose(&scaled, &head).unwrap(), &opts).unwrap();
    for (x, y) in a.profiles.iter().zip(&b.profiles) {
        for (u, v) in x.mean_fe.iter().zip(&y.mean_fe) {
            assert_eq!(u * lambda as f64, *v);
        }
        for (u, v) in x.mean_ce.iter().zip(&y.mean_ce) {
            assert_eq!(u * lambda as f64, *v);
        }
    }
}

#[test]
fn separable_fixture_trains_to_perfect_bac() {
    let es = separable_fixture();
    // Closed-form separator: each class weights its own coordinate.
    let oracle = ClassifierHead::new(Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap(), None).unwrap();
    assert_eq!(
        accuracy(&decompose(&es, &oracle).unwrap(), es.labels()).unwrap().bac,
        1.0
    );
    let cfg = TrainConfig {
        epochs: 200,
        learning_rate: 0.1,
        final_learning_rate: None,
        ..Default::default()
    };
    let t = probe::retrain_head(&es, &cfg, None).unwrap();
    assert_eq!(t.best_bac, 1.0);
    assert_eq!(
        accuracy(&decompose(&es, &t.final_head).unwrap(), es.labels())
            .unwrap()
            .bac,
        1.0
    );
}

#[test]
fn gradient_check_small_problem_and_duplication() {
    let mut r = rng(26);
    let es = random_set(&mut r, 8, 4, 3, Split::Train);
    let head = random_head(&mut r, 3, 4, true);
    assert!(probe::gradient_check(&es, &head, 1e-4).unwrap() < 1e-3);

    let twice: Vec<usize> = (0..16).map(|i| i % 8).collect();
    let dup = es.select(&twice).unwrap();
    let g = probe::analytic_gradient(&es, &head).unwrap();
    let g2 = probe::analytic_gradient(&dup, &head).unwrap();
    for (a, b) in g.weights.as_slice().iter().zip(g2.weights.as_slice()) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
    for (a, b) in g.bias.iter().zip(&g2.bias) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}
