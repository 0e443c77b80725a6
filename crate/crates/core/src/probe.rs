//! Retraining of the final linear layer on stored feature embeddings.
//!
//! Full-batch gradient descent on the mean softmax cross-entropy of
//! `W·fe + b`, with optional L2 weight decay on `W` and optional
//! inverse-frequency class weights. Parameters are kept in `f64`; the
//! gradient is accumulated over fixed-size instance chunks and reduced in
//! chunk order, so results do not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::decomposition::{accuracy, Decomposition};
use crate::embx::{ClassifierHead, EmbeddingSet};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    Zeros,
    /// Uniform in `±1/sqrt(H)`, zero bias.
    ScaledUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Cosine decay target; `None` keeps the rate constant.
    pub final_learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub seed: u64,
    pub init: Init,
    pub class_balanced_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.1,
            final_learning_rate: Some(0.001),
            weight_decay: 1e-4,
            seed: 0,
            init: Init::Zeros,
            class_balanced_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        let rate_ok = |r: f64| r.is_finite() && r >= 0.0;
        if !rate_ok(self.learning_rate) || !self.final_learning_rate.is_none_or(rate_ok) {
            return Err(Error::InvalidArgument(
                "learning rates must be finite and non-negative".into(),
            ));
        }
        if !rate_ok(self.weight_decay) {
            return Err(Error::InvalidArgument(
                "weight_decay must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate used at `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.final_learning_rate {
            Some(end) if self.epochs > 1 => {
                let end = end.min(self.learning_rate);
                let t = epoch as f64 / (self.epochs - 1) as f64;
                end + 0.5 * (self.learning_rate - end) * (1.0 + (std::f64::consts::PI * t).cos())
            }
            _ => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BacSource {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainTrace {
    pub per_epoch_loss: Vec<f64>,
    pub per_epoch_bac: Vec<f64>,
    pub bac_source: BacSource,
    /// Epoch whose head was kept (highest BAC, earliest on ties).
    pub best_epoch: usize,
    pub best_bac: f64,
    #[serde(skip)]
    pub final_head: ClassifierHead,
}

/// Linear head parameters in `f64`, weights row-major `C x H`.
#[derive(Debug, Clone, PartialEq)]
struct Params {
    classes: usize,
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Params {
    fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    fn from_head(head: &ClassifierHead) -> Self {
        Self {
            classes: head.num_classes(),
            dim: head.dim(),
            weights: head.weights().as_slice().iter().map(|&v| v as f64).collect(),
            bias: (0..head.num_classes()).map(|c| head.bias_of(c)).collect(),
        }
    }

    /// `None` when a parameter does not fit in a finite `f32`.
    fn to_head(&self) -> Option<ClassifierHead> {
        let weights =
            Matrix::from_vec(self.classes, self.dim, self.weights.iter().map(|&v| v as f32).collect()).ok()?;
        ClassifierHead::new(weights, Some(self.bias.iter().map(|&v| v as f32).collect())).ok()
    }

    fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn get(&self, i: usize) -> f64 {
        if i < self.weights.len() {
            self.weights[i]
        } else {
            self.bias[i - self.weights.len()]
        }
    }

    fn set(&mut self, i: usize, v: f64) {
        if i < self.weights.len() {
            self.weights[i] = v;
        } else {
            let j = i - self.weights.len();
            self.bias[j] = v;
        }
    }
}

/// Gradient of the training objective with respect to the head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub weights: Matrix<f64>,
    pub bias: Vec<f64>,
}

struct Objective<'a> {
    fe: &'a Matrix<f32>,
    labels: &'a [usize],
    /// Per-instance loss weight, normalized to sum to one.
    instance_weight: Vec<f64>,
    weight_decay: f64,
}

impl<'a> Objective<'a> {
    fn new(es: &'a EmbeddingSet, class_balanced: bool, weight_decay: f64) -> Self {
        let n = es.len();
        let instance_weight = if class_balanced {
            let counts = es.class_counts();
            let raw: Vec<f64> = es.labels().iter().map(|&y| 1.0 / counts[y] as f64).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / total).collect()
        } else {
            vec![1.0 / n as f64; n]
        };
        Self {
            fe: es.fe(),
            labels: es.labels(),
            instance_weight,
            weight_decay,
        }
    }

    /// Weighted cross-entropy of one chunk, and its gradient when requested.
    fn chunk(&self, p: &Params, range: std::ops::Range<usize>, grad: Option<&mut Params>) -> f64 {
        let mut loss = 0.0f64;
        let mut z = vec![0.0f64; p.classes];
        let mut grad = grad;
        for n in range {
            let x = self.fe.row(n);
            for (c, zc) in z.iter_mut().enumerate() {
                let w = &p.weights[c * p.dim..(c + 1) * p.dim];
                let mut s = 0.0f64;
                for (&xv, &wv) in x.iter().zip(w) {
                    s += xv as f64 * wv;
                }
                *zc = s + p.bias[c];
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let log_denom = max + denom.ln();
            let y = self.labels[n];
            let s = self.instance_weight[n];
            loss += s * (log_denom - z[y]);
            if let Some(g) = grad.as_deref_mut() {
                for (c, &zc) in z.iter().enumerate() {
                    let prob = (zc - log_denom).exp();
                    let coef = s * (prob - if c == y { 1.0 } else { 0.0 });
                    g.bias[c] += coef;
                    let gw = &mut g.weights[c * p.dim..(c + 1) * p.dim];
                    for (gv, &xv) in gw.iter_mut().zip(x) {
                        *gv += coef * xv as f64;
                    }
                }
            }
        }
        loss
    }

    fn decay_term(&self, p: &Params) -> f64 {
        if self.weight_decay == 0.0 {
            return 0.0;
        }
        0.5 * self.weight_decay * p.weights.iter().map(|w| w * w).sum::<f64>()
    }

    fn loss(&self, p: &Params) -> f64 {
        let n = self.labels.len();
        let parts: Vec<f64> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|i| self.chunk(p, i * CHUNK..((i + 1) * CHUNK).min(n), None))
            .collect();
        parts.iter().sum::<f64>() + self.decay_term(p)
    }

    fn loss_and_grad(&self, p: &Params) -> (f64, Params) {
        let n = self.labels.len();
        let parts: Vec<(f64, Params)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|i| {
                let mut g = Params::zeros(p.classes, p.dim);
                let l = self.chunk(p, i * CHUNK..((i + 1) * CHUNK).min(n), Some(&mut g));
                (l, g)
            })
            .collect();
        let mut grad = Params::zeros(p.classes, p.dim);
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            for (a, b) in grad.weights.iter_mut().zip(&g.weights) {
                *a += b;
            }
            for (a, b) in grad.bias.iter_mut().zip(&g.bias) {
                *a += b;
            }
        }
        if self.weight_decay != 0.0 {
            for (g, w) in grad.weights.iter_mut().zip(&p.weights) {
                *g += self.weight_decay * w;
            }
        }
        (loss + self.decay_term(p), grad)
    }
}

fn check_head(es: &EmbeddingSet, head: &ClassifierHead) -> Result<()> {
    if es.dim() != head.dim() || es.num_classes() != head.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings are {} features / {} classes, head is {} / {}",
            es.dim(),
            es.num_classes(),
            head.dim(),
            head.num_classes()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of `head` on `es` (no decay, no class weights).
pub fn cross_entropy(es: &EmbeddingSet, head: &ClassifierHead) -> Result<f64> {
    check_head(es, head)?;
    Ok(Objective::new(es, false, 0.0).loss(&Params::from_head(head)))
}

/// Analytic gradient of the mean cross-entropy at `head`.
pub fn analytic_gradient(es: &EmbeddingSet, head: &ClassifierHead) -> Result<HeadGradient> {
    check_head(es, head)?;
    let (_, g) = Objective::new(es, false, 0.0).loss_and_grad(&Params::from_head(head));
    Ok(HeadGradient {
        weights: Matrix::from_vec(g.classes, g.dim, g.weights)?,
        bias: g.bias,
    })
}

/// Largest relative disagreement between the analytic gradient and central
/// finite differences over every weight and bias entry. Entries where both
/// magnitudes are below `1e-8` contribute their absolute difference.
pub fn gradient_check(es: &EmbeddingSet, head: &ClassifierHead, epsilon: f64) -> Result<f64> {
    check_head(es, head)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let objective = Objective::new(es, false, 0.0);
    let base = Params::from_head(head);
    let (_, grad) = objective.loss_and_grad(&base);
    let mut probe = base.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let v = base.get(i);
        probe.set(i, v + epsilon);
        let up = objective.loss(&probe);
        probe.set(i, v - epsilon);
        let down = objective.loss(&probe);
        probe.set(i, v);
        let numeric = (up - down) / (2.0 * epsilon);
        let analytic = grad.get(i);
        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < 1e-8 {
            (analytic - numeric).abs()
        } else {
            (analytic - numeric).abs() / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

fn initial_params(classes: usize, dim: usize, cfg: &TrainConfig) -> Params {
    let mut p = Params::zeros(classes, dim);
    if cfg.init == Init::ScaledUniform {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for w in &mut p.weights {
            *w = rng.random_range(-bound..bound);
        }
    }
    p
}

fn bac_of(es: &EmbeddingSet, head: &ClassifierHead) -> Result<f64> {
    let d = Decomposition::new(es.fe(), head)?;
    Ok(accuracy(&d, es.labels())?.bac)
}

/// Retrains the head on `train`; keeps the epoch with the best BAC on `eval`
/// (or on `train` when no eval split is given).
pub fn retrain_head(train: &EmbeddingSet, cfg: &TrainConfig, eval: Option<&EmbeddingSet>) -> Result<TrainTrace> {
    cfg.validate()?;
    if let Some(e) = eval {
        if e.dim() != train.dim() || e.num_classes() != train.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "eval split is {} features / {} classes, train is {} / {}",
                e.dim(),
                e.num_classes(),
                train.dim(),
                train.num_classes()
            )));
        }
    }
    let scored = eval.unwrap_or(train);
    let objective = Objective::new(train, cfg.class_balanced_loss, cfg.weight_decay);
    let mut params = initial_params(train.num_classes(), train.dim(), cfg);

    let mut trace = TrainTrace {
        per_epoch_loss: Vec::with_capacity(cfg.epochs),
        per_epoch_bac: Vec::with_capacity(cfg.epochs),
        bac_source: if eval.is_some() {
            BacSource::Eval
        } else {
            BacSource::Train
        },
        best_epoch: 0,
        best_bac: f64::NEG_INFINITY,
        final_head: params.to_head().expect("initial parameters are finite"),
    };
    for epoch in 0..cfg.epochs {
        let (loss, grad) = objective.loss_and_grad(&params);
        trace.per_epoch_loss.push(loss);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                trace: Box::new(trace),
            });
        }
        let lr = cfg.learning_rate_at(epoch);
        for (w, g) in params.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * g;
        }
        for (b, g) in params.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
        let Some(head) = params.to_head() else {
            return Err(Error::Divergence {
                epoch,
                trace: Box::new(trace),
            });
        };
        let bac = bac_of(scored, &head)?;
        trace.per_epoch_bac.push(bac);
        if bac > trace.best_bac {
            trace.best_bac = bac;
            trace.best_epoch = epoch;
            trace.final_head = head;
        }
    }
    Ok(trace)
}
