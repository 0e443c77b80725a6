//! Classifier decision pipeline rebuilt from feature embeddings and the
//! final linear layer.
//!
//! For instance `n` and class `c` the classification embedding is the
//! element-wise product `ce(n, c)[h] = fe[n][h] * weights[c][h]`; the logit is
//! its row sum plus the class bias, and the prediction is the arg-max logit.
//! CE rows are never materialized as a full `N x C x H` tensor.
//!
//! All arithmetic is carried out in `f64`. The product of two `f32` values is
//! exact in `f64`, so every CE entry is exact; logits accumulate over `h` in
//! ascending order.

use rayon::prelude::*;
use serde::Serialize;

use crate::embx::{ClassifierHead, EmbeddingSet};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Index of the largest value, ties broken toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Decomposition<'a> {
    fe: &'a Matrix<f32>,
    head: &'a ClassifierHead,
    logits: Matrix<f64>,
    predictions: Vec<usize>,
}

pub fn decompose<'a>(es: &'a EmbeddingSet, head: &'a ClassifierHead) -> Result<Decomposition<'a>> {
    if es.num_classes() != head.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings declare {} classes, head has {}",
            es.num_classes(),
            head.num_classes()
        )));
    }
    Decomposition::new(es.fe(), head)
}

impl<'a> Decomposition<'a> {
    pub fn new(fe: &'a Matrix<f32>, head: &'a ClassifierHead) -> Result<Self> {
        if fe.cols() != head.dim() {
            return Err(Error::DimensionMismatch(format!(
                "fe has {} features, head expects {}",
                fe.cols(),
                head.dim()
            )));
        }
        let c = head.num_classes();
        let mut logits = Matrix::filled(fe.rows(), c, 0.0f64);
        logits
            .as_mut_slice()
            .par_chunks_mut(c)
            .enumerate()
            .for_each(|(n, out)| {
                let x = fe.row(n);
                for (class, slot) in out.iter_mut().enumerate() {
                    let w = head.weights().row(class);
                    let mut sum = 0.0f64;
                    for (&xv, &wv) in x.iter().zip(w) {
                        sum += xv as f64 * wv as f64;
                    }
                    *slot = sum + head.bias_of(class);
                }
            });
        let predictions = (0..fe.rows()).map(|n| argmax(logits.row(n))).collect();
        Ok(Self {
            fe,
            head,
            logits,
            predictions,
        })
    }

    /// Replaces the predicted labels, e.g. to force a perfect classifier when
    /// comparing a split against itself. Logits are left untouched.
    pub fn with_predictions(mut self, predictions: Vec<usize>) -> Result<Self> {
        if predictions.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} predictions for {} instances",
                predictions.len(),
                self.len()
            )));
        }
        if let Some((index, &p)) = predictions.iter().enumerate().find(|(_, p)| **p >= self.num_classes()) {
            return Err(Error::LabelOutOfRange {
                index,
                label: p as i64,
                num_classes: self.num_classes(),
            });
        }
        self.predictions = predictions;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.fe.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.fe.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.fe.cols()
    }

    pub fn fe(&self) -> &'a Matrix<f32> {
        self.fe
    }

    pub fn head(&self) -> &'a ClassifierHead {
        self.head
    }

    pub fn logits(&self) -> &Matrix<f64> {
        &self.logits
    }

    pub fn logit(&self, n: usize, c: usize) -> f64 {
        self.logits.get(n, c)
    }

    pub fn predictions(&self) -> &[usize] {
        &self.predictions
    }

    /// CE row of instance `n` for class `c`, written into `out`.
    pub fn ce_into(&self, n: usize, c: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.fe
                .row(n)
                .iter()
                .zip(self.head.weights().row(c))
                .map(|(&x, &w)| x as f64 * w as f64),
        );
    }

    pub fn ce(&self, n: usize, c: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        self.ce_into(n, c, &mut out);
        out
    }

    /// Largest logit among classes other than the prediction, as
    /// `(class, logit)`. `None` for single-class heads.
    pub fn adversary(&self, n: usize) -> Option<(usize, f64)> {
        let reference = self.predictions[n];
        let row = self.logits.row(n);
        let mut best: Option<(usize, f64)> = None;
        for (c, &v) in row.iter().enumerate() {
            if c == reference {
                continue;
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub max_abs_err: f64,
    pub mismatched_argmax_count: usize,
    pub tolerance: f64,
    pub within_tolerance: bool,
}

/// Compares logits recomputed from FE and weights with logits exported by the
/// training framework.
pub fn check_exported_logits(d: &Decomposition<'_>, exported: &Matrix<f32>, tol: f64) -> Result<ConsistencyReport> {
    if exported.rows() != d.len() || exported.cols() != d.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "exported logits are {}x{}, decomposition is {}x{}",
            exported.rows(),
            exported.cols(),
            d.len(),
            d.num_classes()
        )));
    }
    let mut max_abs_err = 0.0f64;
    let mut mismatched = 0;
    let mut row = Vec::with_capacity(d.num_classes());
    for n in 0..d.len() {
        row.clear();
        row.extend(exported.row(n).iter().map(|&v| v as f64));
        for (a, b) in d.logits().row(n).iter().zip(&row) {
            max_abs_err = max_abs_err.max((a - b).abs());
        }
        if argmax(&row) != d.predictions()[n] {
            mismatched += 1;
        }
    }
    Ok(ConsistencyReport {
        max_abs_err,
        mismatched_argmax_count: mismatched,
        tolerance: tol,
        within_tolerance: max_abs_err <= tol && mismatched == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    /// Recall per class; `None` for classes without instances.
    pub per_class_recall: Vec<Option<f64>>,
    pub absent_classes: Vec<usize>,
    pub bac: f64,
    pub overall_accuracy: f64,
    /// Rows are true labels, columns are predictions.
    pub confusion: Vec<Vec<usize>>,
}

pub fn accuracy(d: &Decomposition<'_>, labels: &[usize]) -> Result<AccuracyReport> {
    accuracy_from_predictions(d.predictions(), labels, d.num_classes())
}

/// Balanced accuracy: mean recall over classes that have instances.
pub fn accuracy_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<AccuracyReport> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("no instances to score".into()));
    }
    if labels.len() != predictions.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (index, (&y, &p)) in labels.iter().zip(predictions).enumerate() {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                index,
                label: y as i64,
                num_classes,
            });
        }
        confusion[y][p] += 1;
    }
    let mut per_class_recall = Vec::with_capacity(num_classes);
    let mut absent_classes = Vec::new();
    for (c, row) in confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total == 0 {
            absent_classes.push(c);
            per_class_recall.push(None);
        } else {
            per_class_recall.push(Some(row[c] as f64 / total as f64));
        }
    }
    let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    let bac = present.iter().sum::<f64>() / present.len() as f64;
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    Ok(AccuracyReport {
        per_class_recall,
        absent_classes,
        bac,
        overall_accuracy: correct as f64 / labels.len() as f64,
        confusion,
    })
}
