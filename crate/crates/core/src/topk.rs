//! Feature relevance through top-K analysis.
//!
//! For each instance the reference class is the prediction and the adversary
//! is the runner-up logit `LG_A`. Ranking the reference class's CE entries in
//! descending order (ties by ascending feature index), the instance is
//! *covered* at `K` when the sum of the first `K` entries plus the reference
//! bias strictly exceeds `LG_A`. Coverage ratios, class member tallies and
//! union counts are aggregates of these per-instance rankings.
//!
//! In fe space the features are ranked by their FE value instead (class
//! free), or, in [`FeMode::CeAligned`], by the reference CE ranking while
//! reporting FE values. Coverage in fe space is always judged on the CE
//! evidence carried by the selected features.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::decomposition::Decomposition;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    #[default]
    Ce,
    Fe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FeMode {
    /// Largest FE values of the instance, independent of class.
    #[default]
    Magnitude,
    /// FE underlying the reference class's top-K CE.
    CeAligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    #[default]
    Predicted,
    True,
}

/// Which values are ranked when building per-instance top-K sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub struct Ranking {
    pub space: Space,
    pub fe_mode: FeMode,
}

impl Ranking {
    pub const CE: Ranking = Ranking {
        space: Space::Ce,
        fe_mode: FeMode::Magnitude,
    };
    pub const FE: Ranking = Ranking {
        space: Space::Fe,
        fe_mode: FeMode::Magnitude,
    };
    pub const FE_CE_ALIGNED: Ranking = Ranking {
        space: Space::Fe,
        fe_mode: FeMode::CeAligned,
    };
}

impl From<Space> for Ranking {
    fn from(space: Space) -> Self {
        Ranking {
            space,
            fe_mode: FeMode::Magnitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceTopK {
    pub instance: usize,
    pub reference_class: usize,
    pub adversary_class: Option<usize>,
    pub adversary_logit: f64,
    pub k_indices: Vec<usize>,
    pub k_values: Vec<f64>,
    pub covered: bool,
}

/// Full ranking of one instance.
struct RankedInstance {
    order: Vec<usize>,
    /// Ranked values in `order` (CE or FE depending on the ranking).
    values: Vec<f64>,
    /// `prefix[k]` is the CE evidence of the first `k` ranked features.
    prefix: Vec<f64>,
    reference: usize,
    adversary: Option<(usize, f64)>,
    bias_ref: f64,
}

impl RankedInstance {
    fn adversary_logit(&self) -> f64 {
        self.adversary.map_or(f64::NEG_INFINITY, |(_, v)| v)
    }

    fn covered(&self, k: usize) -> bool {
        let k = k.min(self.order.len());
        self.prefix[k] + self.bias_ref > self.adversary_logit()
    }

    /// Smallest `k` that covers the instance, or `H + 1` when none does.
    fn minimal_k(&self) -> usize {
        let h = self.order.len();
        (1..=h).find(|&k| self.covered(k)).unwrap_or(h + 1)
    }
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn rank_instance(d: &Decomposition<'_>, n: usize, ranking: Ranking) -> RankedInstance {
    let reference = d.predictions()[n];
    let ce = d.ce(n, reference);
    let fe_row = d.fe().row(n);
    let (order, values): (Vec<usize>, Vec<f64>) = match ranking {
        Ranking { space: Space::Ce, .. } => {
            let order = descending(&ce);
            let values = order.iter().map(|&i| ce[i]).collect();
            (order, values)
        }
        Ranking {
            space: Space::Fe,
            fe_mode: FeMode::Magnitude,
        } => {
            let fe: Vec<f64> = fe_row.iter().map(|&v| v as f64).collect();
            let order = descending(&fe);
            let values = order.iter().map(|&i| fe[i]).collect();
            (order, values)
        }
        Ranking {
            space: Space::Fe,
            fe_mode: FeMode::CeAligned,
        } => {
            let order = descending(&ce);
            let values = order.iter().map(|&i| fe_row[i] as f64).collect();
            (order, values)
        }
    };
    let mut prefix = Vec::with_capacity(order.len() + 1);
    let mut acc = 0.0f64;
    prefix.push(acc);
    for &i in &order {
        acc += ce[i];
        prefix.push(acc);
    }
    RankedInstance {
        order,
        values,
        prefix,
        reference,
        adversary: d.adversary(n),
        bias_ref: d.head().bias_of(reference),
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    Ok(())
}

fn group_labels<'l>(d: &'l Decomposition<'_>, labels: &'l [usize], group_by: GroupBy) -> Result<&'l [usize]> {
    if labels.len() != d.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} instances",
            labels.len(),
            d.len()
        )));
    }
    if let Some((index, &l)) = labels.iter().enumerate().find(|(_, l)| **l >= d.num_classes()) {
        return Err(Error::LabelOutOfRange {
            index,
            label: l as i64,
            num_classes: d.num_classes(),
        });
    }
    Ok(match group_by {
        GroupBy::Predicted => d.predictions(),
        GroupBy::True => labels,
    })
}

pub fn instance_topk(d: &Decomposition<'_>, n: usize, k: usize, ranking: Ranking) -> Result<InstanceTopK> {
    check_k(k)?;
    if n >= d.len() {
        return Err(Error::InvalidArgument(format!(
            "instance {n} out of range for {} instances",
            d.len()
        )));
    }
    let r = rank_instance(d, n, ranking);
    let k = k.min(r.order.len());
    Ok(InstanceTopK {
        instance: n,
        reference_class: r.reference,
        adversary_class: r.adversary.map(|(c, _)| c),
        adversary_logit: r.adversary_logit(),
        k_indices: r.order[..k].to_vec(),
        k_values: r.values[..k].to_vec(),
        covered: r.covered(k),
    })
}

/// Smallest K covering instance `n`, `H + 1` when no K does.
pub fn minimal_k(d: &Decomposition<'_>, n: usize, ranking: Ranking) -> usize {
    rank_instance(d, n, ranking).minimal_k()
}

/// Per-instance facts gathered in one parallel pass.
struct InstanceSummary {
    covered: Vec<bool>,
    minimal_k: usize,
    top: Vec<usize>,
}

fn summarize(d: &Decomposition<'_>, ranking: Ranking, k_values: &[usize], top_len: usize) -> Vec<InstanceSummary> {
    (0..d.len())
        .into_par_iter()
        .map(|n| {
            let r = rank_instance(d, n, ranking);
            let take = top_len.min(r.order.len());
            InstanceSummary {
                covered: k_values.iter().map(|&k| r.covered(k)).collect(),
                minimal_k: r.minimal_k(),
                top: r.order[..take].to_vec(),
            }
        })
        .collect()
}

/// Per-instance top-K identity sets, in instance order.
pub(crate) fn top_sets(d: &Decomposition<'_>, ranking: Ranking, k: usize) -> Vec<Vec<usize>> {
    summarize(d, ranking, &[], k).into_iter().map(|s| s.top).collect()
}

/// Identity tally over per-instance top-K sets, per group class.
fn tally(d: &Decomposition<'_>, groups: &[usize], k: usize, ranking: Ranking) -> (Vec<usize>, Vec<Vec<usize>>) {
    let summaries = summarize(d, ranking, &[], k);
    tally_from(&summaries, groups, d.num_classes(), d.dim(), k)
}

fn tally_from(
    summaries: &[InstanceSummary],
    groups: &[usize],
    num_classes: usize,
    dim: usize,
    k: usize,
) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut sizes = vec![0usize; num_classes];
    let mut counts = vec![vec![0usize; dim]; num_classes];
    for (s, &g) in summaries.iter().zip(groups) {
        sizes[g] += 1;
        for &i in s.top.iter().take(k) {
            counts[g][i] += 1;
        }
    }
    (sizes, counts)
}

/// The `top_m` identities by count, ties by ascending identity. Zero-count
/// identities are included only when `fill` is set.
pub(crate) fn ranked_identities(counts: &[usize], top_m: usize, fill: bool) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..counts.len()).filter(|&i| fill || counts[i] > 0).collect();
    ids.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    ids.truncate(top_m);
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Member {
    pub feature: usize,
    pub count: usize,
    pub ratio: f64,
}

fn members_from(size: usize, counts: &[usize], top_m: usize) -> Vec<Member> {
    ranked_identities(counts, top_m, false)
        .into_iter()
        .map(|feature| Member {
            feature,
            count: counts[feature],
            ratio: counts[feature] as f64 / size as f64,
        })
        .collect()
}

/// Class top-K members: most frequent identities in the per-instance top-K
/// sets of each class, with occurrence ratio `count / class size`. Classes
/// without instances are omitted.
pub fn class_members(
    d: &Decomposition<'_>,
    labels: &[usize],
    k: usize,
    ranking: Ranking,
    group_by: GroupBy,
    top_m: usize,
) -> Result<BTreeMap<usize, Vec<Member>>> {
    check_k(k)?;
    if top_m == 0 {
        return Err(Error::InvalidArgument("top_m must be at least 1".into()));
    }
    let groups = group_labels(d, labels, group_by)?;
    let (sizes, counts) = tally(d, groups, k, ranking);
    Ok((0..d.num_classes())
        .filter(|&c| sizes[c] > 0)
        .map(|c| (c, members_from(sizes[c], &counts[c], top_m)))
        .collect())
}

/// Number of distinct identities across the per-instance top-K sets of each
/// class. Classes without instances are omitted.
pub fn union_counts(
    d: &Decomposition<'_>,
    labels: &[usize],
    k: usize,
    ranking: Ranking,
    group_by: GroupBy,
) -> Result<BTreeMap<usize, usize>> {
    check_k(k)?;
    let groups = group_labels(d, labels, group_by)?;
    let (sizes, counts) = tally(d, groups, k, ranking);
    Ok(union_from(&sizes, &counts))
}

fn union_from(sizes: &[usize], counts: &[Vec<usize>]) -> BTreeMap<usize, usize> {
    sizes
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0)
        .map(|(c, _)| (c, counts[c].iter().filter(|&&v| v > 0).count()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopKReport {
    pub space: Space,
    pub fe_mode: FeMode,
    pub group_by: GroupBy,
    pub k_values: Vec<usize>,
    pub overall_coverage: BTreeMap<usize, f64>,
    /// class -> K -> ratio; `None` for classes without instances.
    pub per_class_coverage: BTreeMap<usize, BTreeMap<usize, Option<f64>>>,
    pub class_sizes: Vec<usize>,
    pub empty_classes: Vec<usize>,
    /// K used for member tallies and union counts.
    pub members_k: usize,
    pub class_members: BTreeMap<usize, Vec<Member>>,
    pub union_count: BTreeMap<usize, usize>,
    /// Per instance; `H + 1` marks instances no K covers.
    pub minimal_k: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TopKRequest {
    pub k_values: Vec<usize>,
    pub ranking: Ranking,
    pub group_by: GroupBy,
    /// K for member tallies and union counts; defaults to the largest of `k_values`.
    pub members_k: Option<usize>,
    pub top_m: usize,
}

impl TopKRequest {
    pub fn new(k_values: Vec<usize>) -> Self {
        Self {
            k_values,
            ranking: Ranking::CE,
            group_by: GroupBy::Predicted,
            members_k: None,
            top_m: 10,
        }
    }
}

/// Coverage ratios per K, overall and per class, together with member
/// tallies and union counts.
pub fn coverage_ratios(d: &Decomposition<'_>, labels: &[usize], req: &TopKRequest) -> Result<TopKReport> {
    if req.k_values.is_empty() {
        return Err(Error::InvalidArgument("no K values requested".into()));
    }
    for &k in &req.k_values {
        check_k(k)?;
    }
    if req.top_m == 0 {
        return Err(Error::InvalidArgument("top_m must be at least 1".into()));
    }
    let members_k = req
        .members_k
        .unwrap_or_else(|| *req.k_values.iter().max().expect("non-empty"));
    check_k(members_k)?;
    let groups = group_labels(d, labels, req.group_by)?;
    let c = d.num_classes();

    let summaries = summarize(d, req.ranking, &req.k_values, members_k);
    let mut covered = vec![vec![0usize; req.k_values.len()]; c];
    for (s, &g) in summaries.iter().zip(groups) {
        for (slot, &hit) in covered[g].iter_mut().zip(&s.covered) {
            *slot += hit as usize;
        }
    }
    let (sizes, counts) = tally_from(&summaries, groups, c, d.dim(), members_k);

    let n = d.len() as f64;
    let overall_coverage = req
        .k_values
        .iter()
        .enumerate()
        .map(|(j, &k)| (k, covered.iter().map(|row| row[j]).sum::<usize>() as f64 / n))
        .collect();
    let per_class_coverage = (0..c)
        .map(|class| {
            let by_k = req
                .k_values
                .iter()
                .enumerate()
                .map(|(j, &k)| {
                    let ratio = (sizes[class] > 0).then(|| covered[class][j] as f64 / sizes[class] as f64);
                    (k, ratio)
                })
                .collect();
            (class, by_k)
        })
        .collect();
    let class_members = (0..c)
        .filter(|&class| sizes[class] > 0)
        .map(|class| (class, members_from(sizes[class], &counts[class], req.top_m)))
        .collect();

    let mut k_values = req.k_values.clone();
    k_values.sort_unstable();
    k_values.dedup();
    Ok(TopKReport {
        space: req.ranking.space,
        fe_mode: req.ranking.fe_mode,
        group_by: req.group_by,
        k_values,
        overall_coverage,
        per_class_coverage,
        empty_classes: (0..c).filter(|&class| sizes[class] == 0).collect(),
        class_sizes: sizes.clone(),
        members_k,
        class_members,
        union_count: union_from(&sizes, &counts),
        minimal_k: summaries.iter().map(|s| s.minimal_k).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassContribution {
    /// Mean of `ce_(j) / LG_R` for ranks `j = 0..K`; `None` when every
    /// instance of the class was excluded.
    pub mean_fractions: Option<Vec<f64>>,
    /// Mean contribution of the single largest CE entry.
    pub largest: Option<f64>,
    pub included: usize,
    pub excluded_non_positive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContributionReport {
    pub k: usize,
    pub group_by: GroupBy,
    pub per_class: BTreeMap<usize, ClassContribution>,
    /// Instances whose reference logit is not positive.
    pub excluded_non_positive: usize,
}

/// Fraction of the reference logit contributed by each of the top-K CE
/// entries, averaged per class. Instances with `LG_R <= 0` are excluded and
/// counted.
pub fn logit_contributions(
    d: &Decomposition<'_>,
    labels: &[usize],
    k: usize,
    group_by: GroupBy,
) -> Result<ContributionReport> {
    check_k(k)?;
    let groups = group_labels(d, labels, group_by)?;
    let k = k.min(d.dim());
    let fractions: Vec<Option<Vec<f64>>> = (0..d.len())
        .into_par_iter()
        .map(|n| {
            let reference = d.predictions()[n];
            let total = d.logit(n, reference);
            if total <= 0.0 {
                return None;
            }
            let ce = d.ce(n, reference);
            let order = descending(&ce);
            Some(order[..k].iter().map(|&i| ce[i] / total).collect())
        })
        .collect();

    let c = d.num_classes();
    let mut sums = vec![vec![0.0f64; k]; c];
    let mut included = vec![0usize; c];
    let mut excluded = vec![0usize; c];
    let mut present = vec![false; c];
    for (f, &g) in fractions.iter().zip(groups) {
        present[g] = true;
        match f {
            Some(f) => {
                included[g] += 1;
                for (s, v) in sums[g].iter_mut().zip(f) {
                    *s += v;
                }
            }
            None => excluded[g] += 1,
        }
    }
    let per_class = (0..c)
        .filter(|&class| present[class])
        .map(|class| {
            let mean_fractions = (included[class] > 0).then(|| {
                sums[class]
                    .iter()
                    .map(|s| s / included[class] as f64)
                    .collect::<Vec<_>>()
            });
            let largest = mean_fractions.as_ref().and_then(|m| m.first().copied());
            (
                class,
                ClassContribution {
                    mean_fractions,
                    largest,
                    included: included[class],
                    excluded_non_positive: excluded[class],
                },
            )
        })
        .collect();
    Ok(ContributionReport {
        k,
        group_by,
        per_class,
        excluded_non_positive: excluded.iter().sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embx::{ClassifierHead, EmbeddingSet, Split};
    use crate::matrix::Matrix;

    fn fixture(fe: &[Vec<f32>], w: &[Vec<f32>], labels: Vec<usize>) -> (EmbeddingSet, ClassifierHead) {
        let c = w.len();
        (
            EmbeddingSet::new(Matrix::from_rows(fe).unwrap(), labels, c, Split::Train).unwrap(),
            ClassifierHead::new(Matrix::from_rows(w).unwrap(), None).unwrap(),
        )
    }

    #[test]
    fn toy_instance_topk() {
        let (es, head) = fixture(
            &[vec![2.0, 1.0, 0.0]],
            &[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 1.0]],
            vec![0],
        );
        let d = crate::decompose(&es, &head).unwrap();
        let t = instance_topk(&d, 0, 1, Ranking::CE).unwrap();
        assert_eq!(t.reference_class, 0);
        assert_eq!(t.adversary_class, Some(1));
        assert_eq!(t.adversary_logit, 1.0);
        assert_eq!(t.k_indices, vec![0]);
        assert_eq!(t.k_values, vec![2.0]);
        assert!(t.covered);
        assert_eq!(minimal_k(&d, 0, Ranking::CE), 1);

        // K is clamped to H
        let t = instance_topk(&d, 0, 10, Ranking::CE).unwrap();
        assert_eq!(t.k_indices, vec![0, 1, 2]);
        assert!(t.covered);

        assert!(instance_topk(&d, 0, 0, Ranking::CE).is_err());
        assert!(instance_topk(&d, 1, 1, Ranking::CE).is_err());
    }

    #[test]
    fn tied_logits_are_never_covered() {
        let (es, head) = fixture(&[vec![1.0, 1.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]], vec![0]);
        let d = crate::decompose(&es, &head).unwrap();
        let t = instance_topk(&d, 0, 2, Ranking::CE).unwrap();
        assert_eq!(t.reference_class, 0);
        assert_eq!(t.adversary_logit, 1.0);
        assert!(!t.covered);
        assert_eq!(minimal_k(&d, 0, Ranking::CE), 3);
    }

    #[test]
    fn fe_space_rankings() {
        // fe ranking picks feature 2 first; ce ranking picks feature 0.
        let (es, head) = fixture(
            &[vec![2.0, 1.0, 3.0]],
            &[vec![1.0, 0.0, 0.0], vec![0.0, 0.5, 0.1]],
            vec![0],
        );
        let d = crate::decompose(&es, &head).unwrap();
        let fe = instance_topk(&d, 0, 1, Ranking::FE).unwrap();
        assert_eq!(fe.k_indices, vec![2]);
        assert_eq!(fe.k_values, vec![3.0]);
        // ce of feature 2 for class 0 is 0, adversary logit 0.8
        assert!(!fe.covered);
        let aligned = instance_topk(&d, 0, 1, Ranking::FE_CE_ALIGNED).unwrap();
        let ce = instance_topk(&d, 0, 1, Ranking::CE).unwrap();
        assert_eq!(aligned.k_indices, ce.k_indices);
        assert_eq!(aligned.k_values, vec![2.0]);
        assert_eq!(aligned.covered, ce.covered);
    }

    #[test]
    fn coverage_counts_thresholds() {
        // Class 0 sums all features, class 1 doubles the last one; fe rows
        // are chosen so that minimal_k is 1, 2, 3, 3.
        let w = vec![vec![1.0, 1.0, 1.0], vec![0.0, 0.0, 2.0]];
        let fe = vec![
            vec![1.0, 0.25, 0.125],
            vec![1.0, 0.75, 0.5],
            vec![0.5, 0.75, 1.0],
            vec![0.625, 0.5, 1.0],
        ];
        let (es, head) = fixture(&fe, &w, vec![0; 4]);
        let d = crate::decompose(&es, &head).unwrap();
        let mk: Vec<usize> = (0..4).map(|n| minimal_k(&d, n, Ranking::CE)).collect();
        assert_eq!(mk, vec![1, 2, 3, 3]);
        let r = coverage_ratios(&d, es.labels(), &TopKRequest::new(vec![1, 2, 3])).unwrap();
        assert_eq!(r.overall_coverage, BTreeMap::from([(1, 0.25), (2, 0.5), (3, 1.0)]));
        assert_eq!(r.per_class_coverage[&0][&2], Some(0.5));
        assert_eq!(r.per_class_coverage[&1][&2], None);
        assert_eq!(r.empty_classes, vec![1]);
        assert_eq!(r.minimal_k, mk);
    }

    #[test]
    fn single_instance_full_coverage() {
        let (es, head) = fixture(
            &[vec![2.0, 1.0, 0.0]],
            &[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 1.0]],
            vec![0],
        );
        let d = crate::decompose(&es, &head).unwrap();
        let r = coverage_ratios(&d, es.labels(), &TopKRequest::new(vec![1])).unwrap();
        assert_eq!(r.overall_coverage, BTreeMap::from([(1, 1.0)]));
        assert!(coverage_ratios(&d, es.labels(), &TopKRequest::new(vec![])).is_err());
        assert!(coverage_ratios(&d, es.labels(), &TopKRequest::new(vec![0])).is_err());
    }

    #[test]
    fn member_tally_breaks_ties_low() {
        // Two class-0 instances with top-2 sets {0,3} and {0,5} under an
        // all-ones weight row, so the ce ranking follows fe.
        let fe = vec![vec![3.0, 0.0, 0.0, 2.0, 0.0, 0.0], vec![3.0, 0.0, 0.0, 0.0, 0.0, 2.0]];
        let w = vec![vec![1.0; 6], vec![0.0; 6]];
        let (es, head) = fixture(&fe, &w, vec![0, 0]);
        let d = crate::decompose(&es, &head).unwrap();
        let m = class_members(&d, es.labels(), 2, Ranking::CE, GroupBy::Predicted, 2).unwrap();
        assert_eq!(
            m[&0],
            vec![
                Member {
                    feature: 0,
                    count: 2,
                    ratio: 1.0
                },
                Member {
                    feature: 3,
                    count: 1,
                    ratio: 0.5
                },
            ]
        );
        assert!(!m.contains_key(&1));
        assert_eq!(
            union_counts(&d, es.labels(), 2, Ranking::CE, GroupBy::Predicted).unwrap()[&0],
            3
        );
    }

    #[test]
    fn unions_of_equal_and_disjoint_sets() {
        let w = vec![vec![1.0; 6]];
        let same = vec![vec![3.0, 2.0, 1.0, 0.0, 0.0, 0.0]; 2];
        let (es, head) = fixture(&same, &w, vec![0, 0]);
        let d = crate::decompose(&es, &head).unwrap();
        assert_eq!(
            union_counts(&d, es.labels(), 3, Ranking::CE, GroupBy::True).unwrap()[&0],
            3
        );
        let m = class_members(&d, es.labels(), 3, Ranking::CE, GroupBy::True, 10).unwrap();
        assert!(m[&0].iter().all(|x| x.ratio == 1.0));

        let disjoint = vec![
            vec![2.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 2.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 2.0, 1.0],
        ];
        let (es, head) = fixture(&disjoint, &w, vec![0, 0, 0]);
        let d = crate::decompose(&es, &head).unwrap();
        assert_eq!(
            union_counts(&d, es.labels(), 2, Ranking::CE, GroupBy::True).unwrap()[&0],
            6
        );
    }

    #[test]
    fn contributions() {
        let (es, head) = fixture(
            &[vec![2.0, 1.0, 0.0]],
            &[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 1.0]],
            vec![0],
        );
        let d = crate::decompose(&es, &head).unwrap();
        let r = logit_contributions(&d, es.labels(), 3, GroupBy::Predicted).unwrap();
        assert_eq!(r.per_class[&0].mean_fractions, Some(vec![1.0, 0.0, 0.0]));
        assert_eq!(r.per_class[&0].largest, Some(1.0));

        let (es, head) = fixture(&[vec![3.0, 1.0]], &[vec![1.0, 1.0], vec![0.0, 0.0]], vec![0]);
        let d = crate::decompose(&es, &head).unwrap();
        let r = logit_contributions(&d, es.labels(), 2, GroupBy::Predicted).unwrap();
        assert_eq!(r.per_class[&0].mean_fractions, Some(vec![0.75, 0.25]));
    }

    #[test]
    fn non_positive_logits_are_excluded() {
        let (es, head) = fixture(
            &[vec![1.0, 1.0], vec![2.0, 0.0]],
            &[vec![-1.0, 0.0], vec![-2.0, -1.0]],
            vec![0, 0],
        );
        let d = crate::decompose(&es, &head).unwrap();
        let r = logit_contributions(&d, es.labels(), 1, GroupBy::True).unwrap();
        assert_eq!(r.excluded_non_positive, 2);
        assert_eq!(r.per_class[&0].mean_fractions, None);
        assert_eq!(r.per_class[&0].excluded_non_positive, 2);
    }
}
