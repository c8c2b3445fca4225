//! Softmax-regression classifier with exact gradients for the combined
//! local + distillation objective.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Standard deviation of the parameter initialization distribution.
pub const INIT_STD: f64 = 0.01;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!("matrix data has {} entries, expected {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(invalid(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }
}

/// Parameters of a softmax-regression model: `weights` is classes x features.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(num_classes: usize, num_features: usize) -> Self {
        Self { weights: Matrix::zeros(num_classes, num_features), bias: vec![0.0; num_classes] }
    }

    /// Draws every entry i.i.d. from N(0, INIT_STD^2).
    pub fn random_init<R: Rng + ?Sized>(num_classes: usize, num_features: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let mut p = Self::zeros(num_classes, num_features);
        for w in p.weights.as_mut_slice() {
            *w = normal.sample(rng);
        }
        for b in &mut p.bias {
            *b = normal.sample(rng);
        }
        p
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_features(&self) -> usize {
        self.weights.cols()
    }

    /// Total number of scalar parameters.
    pub fn dim(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    /// Row-major weights followed by the bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(self.weights.as_slice());
        v.extend_from_slice(&self.bias);
        v
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn unflatten(num_classes: usize, num_features: usize, flat: &[f64]) -> Result<Self> {
        let nw = num_classes * num_features;
        if flat.len() != nw + num_classes {
            return Err(invalid(format!("flat vector has {} entries, expected {}", flat.len(), nw + num_classes)));
        }
        Ok(Self {
            weights: Matrix::from_vec(num_classes, num_features, flat[..nw].to_vec())?,
            bias: flat[nw..].to_vec(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.weights.as_slice().iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn axpy(&mut self, scale: f64, other: &ModelParams) {
        for (a, b) in self.weights.as_mut_slice().iter_mut().zip(other.weights.as_slice()) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }
}

/// Labeled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(invalid(format!("{} feature rows but {} labels", features.rows(), labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { features: self.features.select_rows(idx), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }
}

/// Row-stochastic class probabilities, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Matrix,
}

impl Prediction {
    pub fn rows(&self) -> usize {
        self.probabilities.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.probabilities.cols()
    }

    pub fn argmax(&self, i: usize) -> usize {
        let row = self.probabilities.row(i);
        let mut best = 0;
        for (k, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = k;
            }
        }
        best
    }

    /// Element-wise mean of several predictions of identical shape.
    pub fn mean<'a, I>(preds: I) -> Result<Option<Prediction>>
    where
        I: IntoIterator<Item = &'a Prediction>,
    {
        let mut acc: Option<Matrix> = None;
        let mut count = 0usize;
        for p in preds {
            let m = &p.probabilities;
            match acc.as_mut() {
                None => acc = Some(m.clone()),
                Some(a) => {
                    if a.rows() != m.rows() || a.cols() != m.cols() {
                        return Err(invalid("cannot average predictions of different shapes"));
                    }
                    for (x, y) in a.as_mut_slice().iter_mut().zip(m.as_slice()) {
                        *x += y;
                    }
                }
            }
            count += 1;
        }
        Ok(acc.map(|mut a| {
            let inv = 1.0 / count as f64;
            for x in a.as_mut_slice() {
                *x *= inv;
            }
            Prediction { probabilities: a }
        }))
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of the affine map `features · weightsᵀ + bias`.
pub fn predict(params: &ModelParams, features: &Matrix) -> Result<Prediction> {
    if features.cols() != params.num_features() {
        return Err(invalid(format!(
            "feature dimension {} does not match model dimension {}",
            features.cols(),
            params.num_features()
        )));
    }
    let c = params.num_classes();
    let mut out = Matrix::zeros(features.rows(), c);
    for i in 0..features.rows() {
        let x = features.row(i);
        let row = out.row_mut(i);
        for (k, z) in row.iter_mut().enumerate() {
            let w = params.weights.row(k);
            *z = params.bias[k] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        softmax_in_place(row);
    }
    Ok(Prediction { probabilities: out })
}

/// Mean negative log-probability of the true class.
pub fn cross_entropy(pred: &Prediction, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(invalid("cross-entropy of an empty dataset"));
    }
    if pred.rows() != labels.len() {
        return Err(invalid(format!("prediction has {} rows but {} labels", pred.rows(), labels.len())));
    }
    let c = pred.num_classes();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(invalid(format!("label {y} outside [0, {c})")));
        }
        total -= pred.probabilities.get(i, y).max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Squared Frobenius distance divided by the number of samples.
pub fn distill_loss(own: &Prediction, neighbor_mean: &Prediction) -> Result<f64> {
    let (a, b) = (&own.probabilities, &neighbor_mean.probabilities);
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(invalid(format!(
            "prediction shapes differ: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if a.rows() == 0 {
        return Err(invalid("distillation loss over zero samples"));
    }
    let sq: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sq / a.rows() as f64)
}

/// Fraction of samples whose argmax matches the label.
pub fn accuracy(params: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("accuracy of an empty dataset"));
    }
    let pred = predict(params, &data.features)?;
    let hits = (0..data.len()).filter(|&i| pred.argmax(i) == data.labels[i]).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Inputs to the combined objective `alpha * L_loc + (1 - alpha) * L_ref`.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub local: &'a Dataset,
    pub reference: &'a Matrix,
    /// Absent when no valid neighbor outputs exist; the objective is then `L_loc` alone.
    pub neighbor_mean: Option<&'a Prediction>,
    pub alpha: f64,
}

impl Objective<'_> {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.local.is_empty() {
            return Err(invalid("local dataset is empty"));
        }
        if let Some(m) = self.neighbor_mean {
            if m.rows() != self.reference.rows() {
                return Err(invalid(format!(
                    "neighbor mean has {} rows, reference set has {}",
                    m.rows(),
                    self.reference.rows()
                )));
            }
        }
        Ok(())
    }

    fn local_weight(&self) -> f64 {
        if self.neighbor_mean.is_some() {
            self.alpha
        } else {
            1.0
        }
    }

    /// Value of the objective at `params`.
    pub fn value(&self, params: &ModelParams) -> Result<f64> {
        self.validate()?;
        let a = self.local_weight();
        let mut v = 0.0;
        if a > 0.0 {
            let p = predict(params, &self.local.features)?;
            v += a * cross_entropy(&p, &self.local.labels)?;
        }
        if let Some(m) = self.neighbor_mean {
            if a < 1.0 {
                let p = predict(params, self.reference)?;
                v += (1.0 - a) * distill_loss(&p, m)?;
            }
        }
        Ok(v)
    }

    /// Exact gradient of the objective with respect to weights and bias.
    pub fn gradient(&self, params: &ModelParams) -> Result<ModelParams> {
        self.validate()?;
        let a = self.local_weight();
        let c = params.num_classes();
        let mut grad = ModelParams::zeros(c, params.num_features());

        if a > 0.0 {
            let p = predict(params, &self.local.features)?;
            let scale = a / self.local.len() as f64;
            let mut dz = vec![0.0; c];
            for i in 0..self.local.len() {
                let probs = p.probabilities.row(i);
                for k in 0..c {
                    dz[k] = scale * (probs[k] - if k == self.local.labels[i] { 1.0 } else { 0.0 });
                }
                accumulate(&mut grad, &dz, self.local.features.row(i));
            }
        }

        if let Some(m) = self.neighbor_mean {
            if a < 1.0 && self.reference.rows() > 0 {
                let p = predict(params, self.reference)?;
                let scale = 2.0 * (1.0 - a) / self.reference.rows() as f64;
                let mut g = vec![0.0; c];
                let mut dz = vec![0.0; c];
                for i in 0..self.reference.rows() {
                    let probs = p.probabilities.row(i);
                    let target = m.probabilities.row(i);
                    for k in 0..c {
                        g[k] = scale * (probs[k] - target[k]);
                    }
                    // softmax Jacobian is diag(p) - p pᵀ
                    let pg: f64 = probs.iter().zip(&g).map(|(x, y)| x * y).sum();
                    for k in 0..c {
                        dz[k] = probs[k] * (g[k] - pg);
                    }
                    accumulate(&mut grad, &dz, self.reference.row(i));
                }
            }
        }
        Ok(grad)
    }
}

fn accumulate(grad: &mut ModelParams, dz: &[f64], x: &[f64]) {
    for (k, &d) in dz.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        for (w, xv) in grad.weights.row_mut(k).iter_mut().zip(x) {
            *w += d * xv;
        }
        grad.bias[k] += d;
    }
}

/// Runs `steps` full-batch gradient-descent steps on the combined objective.
pub fn combined_update(
    params: &ModelParams,
    objective: &Objective<'_>,
    lr: f64,
    steps: usize,
    round: u32,
) -> Result<ModelParams> {
    if steps == 0 {
        return Err(invalid("steps must be at least 1"));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(invalid(format!("learning rate {lr} must be finite and non-negative")));
    }
    let mut current = params.clone();
    for step in 0..steps {
        let grad = objective.gradient(&current)?;
        if !grad.is_finite() {
            return Err(Error::Numeric { round, detail: format!("non-finite gradient at step {step}") });
        }
        current.axpy(-lr, &grad);
        if !current.is_finite() {
            return Err(Error::Numeric { round, detail: format!("non-finite parameters after step {step}") });
        }
    }
    let loss = objective.value(&current)?;
    if !loss.is_finite() {
        return Err(Error::Numeric { round, detail: "non-finite objective after update".into() });
    }
    Ok(current)
}
