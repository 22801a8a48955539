use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, LearnerError};

/// Parameter layout, flattened row-major:
///
/// * `Logistic`: `W[classes][features]`, then `b[classes]`.
/// * `Mlp`: `W1[hidden][features]`, `b1[hidden]`, `W2[classes][hidden]`, `b2[classes]`,
///   with a ReLU hidden layer.
///
/// Both end in softmax cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Logistic { features: usize, classes: usize },
    Mlp { features: usize, hidden: usize, classes: usize },
}

impl Architecture {
    pub fn dim(&self) -> usize {
        match *self {
            Self::Logistic { features, classes } => features * classes + classes,
            Self::Mlp {
                features,
                hidden,
                classes,
            } => hidden * features + hidden + classes * hidden + classes,
        }
    }

    pub fn features(&self) -> usize {
        match *self {
            Self::Logistic { features, .. } | Self::Mlp { features, .. } => features,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Self::Logistic { classes, .. } | Self::Mlp { classes, .. } => classes,
        }
    }

    /// Zeros for the logistic model; Glorot-uniform weights and zero biases
    /// for the MLP.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        let mut w = vec![0.0; self.dim()];
        if let Self::Mlp {
            features,
            hidden,
            classes,
        } = *self
        {
            let a1 = (6.0 / (features + hidden) as f64).sqrt();
            for v in &mut w[..hidden * features] {
                *v = rng.random_range(-a1..a1);
            }
            let start = hidden * features + hidden;
            let a2 = (6.0 / (hidden + classes) as f64).sqrt();
            for v in &mut w[start..start + classes * hidden] {
                *v = rng.random_range(-a2..a2);
            }
        }
        ModelParams { arch: *self, w }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub w: Vec<f64>,
}

/// In-place softmax; returns `log Σ exp(z)`.
fn softmax(z: &mut [f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn affine(w: &[f64], b: &[f64], x: impl Fn(usize) -> f64, n_in: usize, out: &mut [f64]) {
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        let mut acc = *bias;
        for (j, wj) in row.iter().enumerate() {
            acc += wj * x(j);
        }
        *o = acc;
    }
}

impl ModelParams {
    pub fn new(arch: Architecture, w: Vec<f64>) -> Result<Self, LearnerError> {
        if w.len() != arch.dim() {
            return Err(LearnerError::Dimension {
                expected: arch.dim(),
                got: w.len(),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::NonFinite("parameter"));
        }
        Ok(Self { arch, w })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    fn check_data(&self, data: &Dataset) -> Result<(), LearnerError> {
        if data.n_features() != self.arch.features() {
            return Err(LearnerError::Dimension {
                expected: self.arch.features(),
                got: data.n_features(),
            });
        }
        if data.n_classes() != self.arch.classes() {
            return Err(LearnerError::Dimension {
                expected: self.arch.classes(),
                got: data.n_classes(),
            });
        }
        Ok(())
    }

    /// Class scores for one sample; `hidden` receives post-ReLU activations.
    fn logits(&self, x: &[f32], hidden: &mut Vec<f64>, out: &mut [f64]) {
        let xi = |j: usize| x[j] as f64;
        match self.arch {
            Architecture::Logistic { features, classes } => {
                let (w, b) = self.w.split_at(features * classes);
                affine(w, b, xi, features, out);
            }
            Architecture::Mlp {
                features,
                hidden: h,
                classes,
            } => {
                let (w1, rest) = self.w.split_at(h * features);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(classes * h);
                hidden.resize(h, 0.0);
                affine(w1, b1, xi, features, hidden);
                for v in hidden.iter_mut() {
                    *v = v.max(0.0);
                }
                affine(w2, b2, |k| hidden[k], h, out);
            }
        }
    }

    /// Mean softmax cross-entropy over `batch` and its exact gradient.
    pub fn loss_and_grad(&self, data: &Dataset, batch: &[usize]) -> Result<(f64, Vec<f64>), LearnerError> {
        let mut grad = vec![0.0; self.dim()];
        let loss = self.loss_and_grad_into(data, batch, &mut grad)?;
        Ok((loss, grad))
    }

    /// As [`Self::loss_and_grad`], overwriting `grad`.
    pub fn loss_and_grad_into(&self, data: &Dataset, batch: &[usize], grad: &mut [f64]) -> Result<f64, LearnerError> {
        self.check_data(data)?;
        if batch.is_empty() {
            return Err(LearnerError::Empty("batch"));
        }
        if grad.len() != self.dim() {
            return Err(LearnerError::Dimension {
                expected: self.dim(),
                got: grad.len(),
            });
        }
        grad.fill(0.0);
        let classes = self.arch.classes();
        let scale = 1.0 / batch.len() as f64;
        let mut p = vec![0.0; classes];
        let mut hidden = Vec::new();
        let mut dh = Vec::new();
        let mut loss = 0.0;

        for &i in batch {
            let x = data.row(i);
            let y = data.label(i) as usize;
            self.logits(x, &mut hidden, &mut p);
            let zy = p[y];
            loss += softmax(&mut p) - zy;
            p[y] -= 1.0;
            for v in p.iter_mut() {
                *v *= scale;
            }
            match self.arch {
                Architecture::Logistic { features, .. } => {
                    let (gw, gb) = grad.split_at_mut(features * classes);
                    for (c, &delta) in p.iter().enumerate() {
                        let row = &mut gw[c * features..(c + 1) * features];
                        for (g, &xj) in row.iter_mut().zip(x) {
                            *g += delta * xj as f64;
                        }
                        gb[c] += delta;
                    }
                }
                Architecture::Mlp { features, hidden: h, .. } => {
                    let w2 = &self.w[h * features + h..h * features + h + classes * h];
                    let (gw1, rest) = grad.split_at_mut(h * features);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(classes * h);
                    dh.clear();
                    dh.resize(h, 0.0);
                    for (c, &delta) in p.iter().enumerate() {
                        let row = &mut gw2[c * h..(c + 1) * h];
                        let wrow = &w2[c * h..(c + 1) * h];
                        for k in 0..h {
                            row[k] += delta * hidden[k];
                            dh[k] += delta * wrow[k];
                        }
                        gb2[c] += delta;
                    }
                    for k in 0..h {
                        // ReLU passes gradient only where the unit is active
                        if hidden[k] <= 0.0 {
                            continue;
                        }
                        let row = &mut gw1[k * features..(k + 1) * features];
                        for (g, &xj) in row.iter_mut().zip(x) {
                            *g += dh[k] * xj as f64;
                        }
                        gb1[k] += dh[k];
                    }
                }
            }
        }
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(LearnerError::NonFinite("loss"));
        }
        Ok(loss)
    }

    /// Mean loss over the whole dataset.
    pub fn loss(&self, data: &Dataset) -> Result<f64, LearnerError> {
        self.check_data(data)?;
        if data.is_empty() {
            return Err(LearnerError::Empty("dataset"));
        }
        let mut p = vec![0.0; self.arch.classes()];
        let mut hidden = Vec::new();
        let mut total = 0.0;
        for i in 0..data.len() {
            self.logits(data.row(i), &mut hidden, &mut p);
            let zy = p[data.label(i) as usize];
            total += softmax(&mut p) - zy;
        }
        Ok(total / data.len() as f64)
    }

    /// Argmax class, lowest index on ties.
    pub fn predict(&self, x: &[f32]) -> usize {
        let mut p = vec![0.0; self.arch.classes()];
        self.logits(x, &mut Vec::new(), &mut p);
        argmax(&p)
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64, LearnerError> {
        self.check_data(data)?;
        if data.is_empty() {
            return Err(LearnerError::Empty("dataset"));
        }
        let mut p = vec![0.0; self.arch.classes()];
        let mut hidden = Vec::new();
        let mut correct = 0usize;
        for i in 0..data.len() {
            self.logits(data.row(i), &mut hidden, &mut p);
            if argmax(&p) == data.label(i) as usize {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}
