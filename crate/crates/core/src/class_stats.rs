//! Per-class feature statistics and classifier weight summaries.

use serde::Serialize;

use crate::decomposition::Decomposition;
use crate::embx::{ClassifierHead, EmbeddingSet};
use crate::error::{Error, Result};
use crate::topk::GroupBy;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassProfile {
    pub class: usize,
    pub count: usize,
    pub mean_fe: Vec<f64>,
    /// Mean of the class's own CE row over its instances.
    pub mean_ce: Vec<f64>,
    /// Fraction of instances whose fe exceeds the activity threshold.
    pub fe_frequency: Vec<f64>,
}

impl ClassProfile {
    /// `(feature, value)` pairs of the `m` largest entries, descending.
    pub fn top(values: &[f64], m: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        idx.into_iter().take(m).map(|i| (i, values[i])).collect()
    }

    pub fn max_mean_ce(&self) -> f64 {
        self.mean_ce.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileOptions {
    pub group_by: GroupBy,
    /// fe counts as active when strictly greater than this.
    pub activity_epsilon: f32,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            group_by: GroupBy::Predicted,
            activity_epsilon: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassProfiles {
    pub profiles: Vec<ClassProfile>,
    pub empty_classes: Vec<usize>,
}

/// Class means of fe and of each class's own CE row. Classes without
/// instances are listed in `empty_classes` instead of getting a profile.
pub fn class_profiles(es: &EmbeddingSet, d: &Decomposition<'_>, opts: &ProfileOptions) -> Result<ClassProfiles> {
    if es.len() != d.len() || es.dim() != d.dim() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings are {}x{}, decomposition is {}x{}",
            es.len(),
            es.dim(),
            d.len(),
            d.dim()
        )));
    }
    let groups = match opts.group_by {
        GroupBy::Predicted => d.predictions(),
        GroupBy::True => es.labels(),
    };
    let (c, h) = (d.num_classes(), d.dim());
    let mut counts = vec![0usize; c];
    let mut fe_sum = vec![vec![0.0f64; h]; c];
    let mut ce_sum = vec![vec![0.0f64; h]; c];
    let mut active = vec![vec![0usize; h]; c];
    let mut ce = Vec::with_capacity(h);
    for (n, &g) in groups.iter().enumerate() {
        counts[g] += 1;
        for (j, &v) in es.fe().row(n).iter().enumerate() {
            fe_sum[g][j] += v as f64;
            if v > opts.activity_epsilon {
                active[g][j] += 1;
            }
        }
        d.ce_into(n, g, &mut ce);
        for (s, v) in ce_sum[g].iter_mut().zip(&ce) {
            *s += v;
        }
    }
    let mut profiles = Vec::new();
    let mut empty_classes = Vec::new();
    for class in 0..c {
        let count = counts[class];
        if count == 0 {
            empty_classes.push(class);
            continue;
        }
        let scale = count as f64;
        profiles.push(ClassProfile {
            class,
            count,
            mean_fe: fe_sum[class].iter().map(|s| s / scale).collect(),
            mean_ce: ce_sum[class].iter().map(|s| s / scale).collect(),
            fe_frequency: active[class].iter().map(|&a| a as f64 / scale).collect(),
        });
    }
    Ok(ClassProfiles {
        profiles,
        empty_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSummary {
    pub class: usize,
    /// `(feature, |weight|)`, descending; ties by ascending feature.
    pub top_weights: Vec<(usize, f64)>,
    pub top10_abs_sum: f64,
    pub max_abs_weight: f64,
}

pub fn weight_summaries(head: &ClassifierHead) -> Vec<WeightSummary> {
    head.weights()
        .iter_rows()
        .enumerate()
        .map(|(class, row)| {
            let abs: Vec<f64> = row.iter().map(|&w| (w as f64).abs()).collect();
            let top_weights = ClassProfile::top(&abs, abs.len());
            let top10_abs_sum = top_weights.iter().take(10).map(|&(_, v)| v).sum();
            let max_abs_weight = top_weights.first().map_or(0.0, |&(_, v)| v);
            WeightSummary {
                class,
                top_weights,
                top10_abs_sum,
                max_abs_weight,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanCeRatio {
    pub majority_class: usize,
    pub majority_max: f64,
    pub others_avg: f64,
    /// `others_avg / majority_max`; `None` when `majority_max` is zero.
    pub ratio: Option<f64>,
}

/// Compares the largest mean CE of the majority class with the average of
/// the other classes' largest mean CE.
pub fn largest_mean_ce_ratio(profiles: &[ClassProfile], majority_class: usize) -> Result<MeanCeRatio> {
    if profiles.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 class profiles, got {}",
            profiles.len()
        )));
    }
    let majority = profiles
        .iter()
        .find(|p| p.class == majority_class)
        .ok_or_else(|| Error::InvalidArgument(format!("no profile for majority class {majority_class}")))?;
    let majority_max = majority.max_mean_ce();
    let others: Vec<f64> = profiles
        .iter()
        .filter(|p| p.class != majority_class)
        .map(ClassProfile::max_mean_ce)
        .collect();
    let others_avg = others.iter().sum::<f64>() / others.len() as f64;
    let ratio = (majority_max != 0.0).then(|| others_avg / majority_max);
    if ratio.is_none() {
        log::warn!("majority class {majority_class} has a zero largest mean ce; ratio is undefined");
    }
    Ok(MeanCeRatio {
        majority_class,
        majority_max,
        others_avg,
        ratio,
    })
}

/// Class with the most instances, lowest index on ties.
pub fn majority_class(labels: &[usize], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}
