//! Linear-softmax classifier with Gaussian weight uncertainty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labelled samples: `inputs[n]` has length `features`, `labels[n] < classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    features: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if inputs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                actual: labels.len(),
            });
        }
        let features = inputs[0].len();
        if let Some(x) = inputs.iter().find(|x| x.len() != features) {
            return Err(Error::DimensionMismatch {
                expected: features,
                actual: x.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            inputs,
            labels,
            features,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input(&self, n: usize) -> &[f64] {
        &self.inputs[n]
    }

    pub fn label(&self, n: usize) -> usize {
        self.labels[n]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.inputs.iter().map(Vec::as_slice).zip(self.labels.iter().copied())
    }

    /// Samples at `indices` (which may repeat) as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
        )
    }
}

/// A view of some samples plus the full-dataset size the likelihood is
/// rescaled to.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    samples: Vec<(&'a [f64], usize)>,
    scale: f64,
}

impl<'a> Batch<'a> {
    /// No samples: the likelihood term vanishes.
    pub fn empty() -> Self {
        Self {
            samples: Vec::new(),
            scale: 0.0,
        }
    }

    pub fn full(data: &'a Dataset) -> Self {
        Self {
            samples: data.iter().collect(),
            scale: data.len() as f64,
        }
    }

    pub fn from_indices(data: &'a Dataset, indices: &[usize], scale: f64) -> Self {
        Self {
            samples: indices.iter().map(|&i| (data.input(i), data.label(i))).collect(),
            scale,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn samples(&self) -> &[(&'a [f64], usize)] {
        &self.samples
    }
}

/// Multinomial logistic regression. Weights are laid out class-major: class
/// `c` owns `w[c*(features+1) .. (c+1)*(features+1)]`, bias last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BayesClassifier {
    pub features: usize,
    pub classes: usize,
}

impl BayesClassifier {
    pub fn new(features: usize, classes: usize) -> Self {
        Self { features, classes }
    }

    pub fn dims(&self) -> usize {
        (self.features + 1) * self.classes
    }

    pub(crate) fn check_weights(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: w.len(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let stride = self.features + 1;
        (0..self.classes)
            .map(|c| {
                let row = &w[c * stride..(c + 1) * stride];
                row[..self.features].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[self.features]
            })
            .collect()
    }

    /// Log-softmax of the logits.
    pub fn log_probs(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let logits = self.logits(w, x);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.into_iter().map(|l| l - lse).collect()
    }

    pub fn predict(&self, w: &[f64], x: &[f64]) -> usize {
        let logits = self.logits(w, x);
        logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &l)| if l > best.1 { (c, l) } else { best })
            .0
    }

    pub fn accuracy(&self, w: &[f64], data: &Dataset) -> f64 {
        let hits = data.iter().filter(|(x, y)| self.predict(w, x) == *y).count();
        hits as f64 / data.len() as f64
    }

    /// Accumulates `coef * d log p(y|x,w) / dw` into `grad`; returns log p(y|x,w).
    pub(crate) fn accumulate_grad(&self, w: &[f64], x: &[f64], y: usize, coef: f64, grad: &mut [f64]) -> f64 {
        let lp = self.log_probs(w, x);
        let stride = self.features + 1;
        for (c, l) in lp.iter().enumerate() {
            let delta = if c == y { 1.0 } else { 0.0 } - l.exp();
            let g = &mut grad[c * stride..(c + 1) * stride];
            for (gi, xi) in g[..self.features].iter_mut().zip(x) {
                *gi += coef * delta * xi;
            }
            g[self.features] += coef * delta;
        }
        lp[y]
    }
}

/// Sum over the batch of log p(y_n | x_n, w), i.e. minus the cross-entropy.
pub fn log_likelihood(model: &BayesClassifier, w: &[f64], batch: &Batch<'_>) -> Result<f64> {
    model.check_weights(w)?;
    batch.samples.iter().try_fold(0.0, |acc, (x, y)| {
        if *y >= model.classes {
            return Err(Error::LabelOutOfRange {
                label: *y,
                classes: model.classes,
            });
        }
        Ok(acc + model.log_probs(w, x)[*y])
    })
}
