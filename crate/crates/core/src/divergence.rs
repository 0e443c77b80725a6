//! Train/test divergence of class feature profiles.
//!
//! The test split is partitioned per class into true positives, false
//! positives and false negatives. Class mean vectors of the train split
//! (grouped by true label) are compared with the means of each test
//! partition, and the most frequent top-K identities of train and test are
//! intersected.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::decomposition::Decomposition;
use crate::embx::{ClassifierHead, EmbeddingSet};
use crate::error::{Error, Result};
use crate::topk::{self, Ranking, Space};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OutcomePartition {
    pub class: usize,
    /// label = class, prediction = class
    pub tp: Vec<usize>,
    /// prediction = class, label != class
    pub fp: Vec<usize>,
    /// label = class, prediction != class
    #[serde(rename = "fn")]
    pub fn_: Vec<usize>,
}

pub fn partition_outcomes(
    labels: &[usize],
    predictions: &[usize],
    num_classes: usize,
) -> Result<Vec<OutcomePartition>> {
    if labels.len() != predictions.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut parts: Vec<OutcomePartition> = (0..num_classes)
        .map(|class| OutcomePartition {
            class,
            tp: Vec::new(),
            fp: Vec::new(),
            fn_: Vec::new(),
        })
        .collect();
    for (n, (&y, &p)) in labels.iter().zip(predictions).enumerate() {
        if y >= num_classes || p >= num_classes {
            return Err(Error::LabelOutOfRange {
                index: n,
                label: y.max(p) as i64,
                num_classes,
            });
        }
        if y == p {
            parts[y].tp.push(n);
        } else {
            parts[p].fp.push(n);
            parts[y].fn_.push(n);
        }
    }
    Ok(parts)
}

/// Mean over `indices` of fe rows, or of CE rows for `class` in ce space.
fn mean_vector(es: &EmbeddingSet, head: &ClassifierHead, indices: &[usize], class: usize, space: Space) -> Vec<f64> {
    let h = es.dim();
    let mut sum = vec![0.0f64; h];
    let w = head.weights().row(class);
    for &n in indices {
        let x = es.fe().row(n);
        match space {
            Space::Fe => {
                for (s, &v) in sum.iter_mut().zip(x) {
                    *s += v as f64;
                }
            }
            Space::Ce => {
                for ((s, &v), &wv) in sum.iter_mut().zip(x).zip(w) {
                    *s += v as f64 * wv as f64;
                }
            }
        }
    }
    let scale = indices.len() as f64;
    sum.iter().map(|s| s / scale).collect()
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_pair(train: &EmbeddingSet, test: &EmbeddingSet, d_test: &Decomposition<'_>) -> Result<()> {
    if train.dim() != test.dim() || train.num_classes() != test.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "train is {} features / {} classes, test is {} / {}",
            train.dim(),
            train.num_classes(),
            test.dim(),
            test.num_classes()
        )));
    }
    if d_test.len() != test.len() || d_test.dim() != test.dim() || d_test.num_classes() != test.num_classes() {
        return Err(Error::DimensionMismatch(
            "test decomposition does not match the test split".into(),
        ));
    }
    Ok(())
}

fn class_indices(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_classes];
    for (n, &l) in labels.iter().enumerate() {
        out[l].push(n);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionValues {
    pub tp: Option<f64>,
    pub fp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrobeniusReport {
    pub space: Space,
    /// Frobenius norm over classes with a non-empty TP partition.
    pub fb_train_tp: f64,
    pub fb_train_fp: f64,
    pub per_class_fb: BTreeMap<usize, PartitionValues>,
    /// Classes left out of the TP aggregate (empty train class or TP set).
    pub excluded_tp: Vec<usize>,
    pub excluded_fp: Vec<usize>,
}

pub fn frobenius_divergence(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    d_test: &Decomposition<'_>,
    space: Space,
) -> Result<FrobeniusReport> {
    check_pair(train, test, d_test)?;
    let head = d_test.head();
    let c = train.num_classes();
    let parts = partition_outcomes(test.labels(), d_test.predictions(), c)?;
    let train_idx = class_indices(train.labels(), c);

    let mut per_class_fb = BTreeMap::new();
    let (mut sq_tp, mut sq_fp) = (0.0f64, 0.0f64);
    let (mut excluded_tp, mut excluded_fp) = (Vec::new(), Vec::new());
    for part in &parts {
        let class = part.class;
        if train_idx[class].is_empty() {
            excluded_tp.push(class);
            excluded_fp.push(class);
            per_class_fb.insert(class, PartitionValues { tp: None, fp: None });
            continue;
        }
        let mu_train = mean_vector(train, head, &train_idx[class], class, space);
        let norm = |set: &[usize], excluded: &mut Vec<usize>, sq: &mut f64| {
            if set.is_empty() {
                excluded.push(class);
                return None;
            }
            let v = l2_diff(&mu_train, &mean_vector(test, head, set, class, space));
            *sq += v * v;
            Some(v)
        };
        let tp = norm(&part.tp, &mut excluded_tp, &mut sq_tp);
        let fp = norm(&part.fp, &mut excluded_fp, &mut sq_fp);
        per_class_fb.insert(class, PartitionValues { tp, fp });
    }
    Ok(FrobeniusReport {
        space,
        fb_train_tp: sq_tp.sqrt(),
        fb_train_fp: sq_fp.sqrt(),
        per_class_fb,
        excluded_tp,
        excluded_fp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RankBy {
    /// Membership in per-instance top-K sets.
    #[default]
    Topk,
    /// fe strictly above the activity threshold.
    Activation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapOptions {
    pub ranking: Ranking,
    pub top_m: usize,
    pub k: usize,
    pub rank_by: RankBy,
    pub activity_epsilon: f32,
}

impl Default for OverlapOptions {
    fn default() -> Self {
        Self {
            ranking: Ranking::FE,
            top_m: 10,
            k: 7,
            rank_by: RankBy::Topk,
            activity_epsilon: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub top_m: usize,
    pub k: usize,
    pub rank_by: RankBy,
    /// Mean over classes with non-empty partitions; `None` when all are empty.
    pub overlap_tp: Option<f64>,
    pub overlap_fp: Option<f64>,
    pub per_class: BTreeMap<usize, PartitionValues>,
    pub excluded_tp: Vec<usize>,
    pub excluded_fp: Vec<usize>,
}

/// Per-instance feature sets used for frequency ranking.
fn feature_sets(es: &EmbeddingSet, d: &Decomposition<'_>, opts: &OverlapOptions) -> Vec<Vec<usize>> {
    match opts.rank_by {
        RankBy::Topk => topk::top_sets(d, opts.ranking, opts.k),
        RankBy::Activation => es
            .fe()
            .iter_rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &v)| v > opts.activity_epsilon)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect(),
    }
}

fn most_frequent(sets: &[Vec<usize>], indices: &[usize], dim: usize, top_m: usize) -> Vec<usize> {
    let mut counts = vec![0usize; dim];
    for &n in indices {
        for &i in &sets[n] {
            counts[i] += 1;
        }
    }
    // Zero-count identities fill the tail (ascending) so every list has
    // exactly `top_m` entries.
    topk::ranked_identities(&counts, top_m, true)
}

fn intersection_ratio(a: &[usize], b: &[usize], top_m: usize) -> f64 {
    a.iter().filter(|i| b.contains(i)).count() as f64 / top_m as f64
}

/// Overlap between the `top_m` most frequent feature identities of each
/// train class and of its test TP / FP partitions.
pub fn identity_overlap(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    d_train: &Decomposition<'_>,
    d_test: &Decomposition<'_>,
    opts: &OverlapOptions,
) -> Result<OverlapReport> {
    check_pair(train, test, d_test)?;
    if d_train.len() != train.len() || d_train.dim() != train.dim() {
        return Err(Error::DimensionMismatch(
            "train decomposition does not match the train split".into(),
        ));
    }
    if opts.top_m == 0 || opts.top_m > train.dim() {
        return Err(Error::InvalidArgument(format!(
            "top_m must be in [1, {}], got {}",
            train.dim(),
            opts.top_m
        )));
    }
    if opts.k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let (c, h) = (train.num_classes(), train.dim());
    let parts = partition_outcomes(test.labels(), d_test.predictions(), c)?;
    let train_idx = class_indices(train.labels(), c);
    let train_sets = feature_sets(train, d_train, opts);
    let test_sets = feature_sets(test, d_test, opts);

    let mut per_class = BTreeMap::new();
    let (mut excluded_tp, mut excluded_fp) = (Vec::new(), Vec::new());
    let (mut tp_vals, mut fp_vals) = (Vec::new(), Vec::new());
    for part in &parts {
        let class = part.class;
        if train_idx[class].is_empty() {
            excluded_tp.push(class);
            excluded_fp.push(class);
            per_class.insert(class, PartitionValues { tp: None, fp: None });
            continue;
        }
        let reference = most_frequent(&train_sets, &train_idx[class], h, opts.top_m);
        let overlap = |set: &[usize], excluded: &mut Vec<usize>, vals: &mut Vec<f64>| {
            if set.is_empty() {
                excluded.push(class);
                return None;
            }
            let v = intersection_ratio(&reference, &most_frequent(&test_sets, set, h, opts.top_m), opts.top_m);
            vals.push(v);
            Some(v)
        };
        let tp = overlap(&part.tp, &mut excluded_tp, &mut tp_vals);
        let fp = overlap(&part.fp, &mut excluded_fp, &mut fp_vals);
        per_class.insert(class, PartitionValues { tp, fp });
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(OverlapReport {
        top_m: opts.top_m,
        k: opts.k,
        rank_by: opts.rank_by,
        overlap_tp: mean(&tp_vals),
        overlap_fp: mean(&fp_vals),
        per_class,
        excluded_tp,
        excluded_fp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub frobenius: FrobeniusReport,
    pub overlap: OverlapReport,
    pub partitions: Vec<PartitionSizes>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartitionSizes {
    pub class: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Frobenius divergence and identity overlap in one report. The space of
/// `opts.ranking` selects the mean vectors as well.
pub fn divergence_report(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    d_train: &Decomposition<'_>,
    d_test: &Decomposition<'_>,
    opts: &OverlapOptions,
) -> Result<DivergenceReport> {
    let frobenius = frobenius_divergence(train, test, d_test, opts.ranking.space)?;
    let overlap = identity_overlap(train, test, d_train, d_test, opts)?;
    let partitions = partition_outcomes(test.labels(), d_test.predictions(), test.num_classes())?
        .into_iter()
        .map(|p| PartitionSizes {
            class: p.class,
            tp: p.tp.len(),
            fp: p.fp.len(),
            fn_: p.fn_.len(),
        })
        .collect();
    Ok(DivergenceReport {
        frobenius,
        overlap,
        partitions,
    })
}
