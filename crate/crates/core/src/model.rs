//! Desk-scale differentiable models and synthetic datasets.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, seeded_rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<f64>, seed: u64) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features.first().map_or(0, Vec::len);
        if features.iter().any(|x| x.len() != dim) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        Ok(Self { features, labels, seed })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Rows `indices` as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            seed: self.seed,
        }
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Two balanced Gaussian classes: `x₊ ~ N(μ, σ²I)`, `x₋ ~ N(−μ, σ²I)`.
///
/// Labels alternate starting with −1, so exactly `⌊n/2⌋` points are positive.
pub fn gen_two_gaussian(mu: &[f64], sigma: f64, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(sigma > 0.0) || linalg::norm2(mu) == 0.0 {
        return Err(Error::Config("two-gaussian data needs σ > 0 and μ ≠ 0".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = if i % 2 == 1 { 1.0 } else { -1.0 };
        let x = mu
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                y * m + sigma * z
            })
            .collect();
        features.push(x);
        labels.push(y);
    }
    Dataset::new(features, labels, seed)
}

/// `y = X w* + noise·ε` with standard-normal design and `w*`.
pub fn gen_least_squares(d: usize, n: usize, noise: f64, seed: u64) -> (Dataset, Vec<f64>) {
    let mut rng = seeded_rng(seed);
    let true_w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eps: f64 = StandardNormal.sample(&mut rng);
        labels.push(linalg::dot(&x, &true_w) + noise * eps);
        features.push(x);
    }
    let data = Dataset { features, labels, seed };
    if log::log_enabled!(log::Level::Debug) && n > 0 && d > 0 {
        log::debug!("least-squares design: cond(XᵀX) ≈ {:.3e}", gram_condition(&data));
    }
    (data, true_w)
}

fn gram_condition(data: &Dataset) -> f64 {
    let d = data.dim();
    let n = data.len() as f64;
    let gram = |v: &[f64]| {
        let mut out = vec![0.0; d];
        for x in &data.features {
            let c = linalg::dot(x, v) / n;
            for (o, xi) in out.iter_mut().zip(x) {
                *o += c * xi;
            }
        }
        out
    };
    let top = linalg::power_iteration_top_eig(gram, d, 500, 1e-10, 0).value;
    let shifted = |v: &[f64]| {
        let g = gram(v);
        v.iter().zip(g).map(|(vi, gi)| top * vi - gi).collect()
    };
    let bottom = top - linalg::power_iteration_top_eig(shifted, d, 500, 1e-10, 1).value;
    top / bottom.max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LeastSquares,
    Logistic,
    Lasso,
    Mlp,
}

impl ModelKind {
    pub fn is_classifier(self) -> bool {
        matches!(self, ModelKind::Logistic | ModelKind::Mlp)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LeastSquares => "least_squares",
            ModelKind::Logistic => "logistic",
            ModelKind::Lasso => "lasso",
            ModelKind::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least_squares" => Ok(ModelKind::LeastSquares),
            "logistic" => Ok(ModelKind::Logistic),
            "lasso" => Ok(ModelKind::Lasso),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub value: Tensor,
}

impl Layer {
    fn new(name: &str, value: Tensor) -> Self {
        Self {
            name: name.to_string(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub layers: Vec<Layer>,
    /// L1 weight, used by [`ModelKind::Lasso`] only.
    pub lambda: f64,
}

/// Matrix shape for a linear model's `d` weights: the most nearly square
/// `rows × cols` factorisation with `rows ≥ cols`. Prime `d` gives a vector.
pub fn weight_shape(d: usize) -> (usize, usize) {
    let mut cols = 1;
    let mut c = 1;
    while c * c <= d {
        if d.is_multiple_of(c) {
            cols = c;
        }
        c += 1;
    }
    (d / cols.max(1), cols)
}

impl Model {
    fn linear_weight(d: usize) -> Tensor {
        let (r, c) = weight_shape(d);
        Tensor::zeros(r, c)
    }

    pub fn least_squares(d: usize) -> Self {
        Self {
            kind: ModelKind::LeastSquares,
            layers: vec![Layer::new("w", Self::linear_weight(d))],
            lambda: 0.0,
        }
    }

    pub fn lasso(d: usize, lambda: f64) -> Self {
        Self {
            kind: ModelKind::Lasso,
            layers: vec![Layer::new("w", Self::linear_weight(d))],
            lambda,
        }
    }

    pub fn logistic(d: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            layers: vec![
                Layer::new("w", Self::linear_weight(d)),
                Layer::new("b", Tensor::zeros(1, 1)),
            ],
            lambda: 0.0,
        }
    }

    /// One tanh hidden layer, scalar output: `[W1 (h×d), b1 (h), W2 (1×h), b2 (1)]`.
    pub fn mlp(d: usize, hidden: usize, seed: u64) -> Self {
        let w1 = Tensor::random_normal(hidden, d, seed).scale(1.0 / (d as f64).sqrt());
        let w2 = Tensor::random_normal(1, hidden, linalg::derive_seed(seed, 1)).scale(1.0 / (hidden as f64).sqrt());
        Self {
            kind: ModelKind::Mlp,
            layers: vec![
                Layer::new("W1", w1),
                Layer::new("b1", Tensor::zeros(hidden, 1)),
                Layer::new("W2", w2),
                Layer::new("b2", Tensor::zeros(1, 1)),
            ],
            lambda: 0.0,
        }
    }

    pub fn build(kind: ModelKind, d: usize, hidden: usize, lambda: f64, seed: u64) -> Self {
        match kind {
            ModelKind::LeastSquares => Self::least_squares(d),
            ModelKind::Logistic => Self::logistic(d),
            ModelKind::Lasso => Self::lasso(d, lambda),
            ModelKind::Mlp => Self::mlp(d, hidden, seed),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            ModelKind::Mlp => self.layers[0].value.cols(),
            _ => self.layers[0].value.len(),
        }
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.value.shape()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.value.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.value.data().iter().copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.value.len();
            l.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Raw model output for one example.
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.kind {
            ModelKind::LeastSquares | ModelKind::Lasso => linalg::dot(self.layers[0].value.data(), x),
            ModelKind::Logistic => linalg::dot(self.layers[0].value.data(), x) + self.layers[1].value.data()[0],
            ModelKind::Mlp => self.mlp_forward(x).1,
        }
    }

    fn mlp_forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let w1 = &self.layers[0].value;
        let b1 = self.layers[1].value.data();
        let w2 = self.layers[2].value.data();
        let b2 = self.layers[3].value.data()[0];
        let d = w1.cols();
        let hidden: Vec<f64> = (0..w1.rows())
            .map(|j| (linalg::dot(&w1.data()[j * d..(j + 1) * d], x) + b1[j]).tanh())
            .collect();
        let out = linalg::dot(w2, &hidden) + b2;
        (hidden, out)
    }

    fn check_input(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.input_dim() && !data.is_empty() {
            return Err(Error::Shape(format!(
                "model expects {} features, data has {}",
                self.input_dim(),
                data.dim()
            )));
        }
        Ok(())
    }

    fn l1_penalty(&self) -> f64 {
        self.lambda * self.layers[0].value.data().iter().map(|w| w.abs()).sum::<f64>()
    }

    /// Mean loss over the rows `batch` of `data`.
    pub fn loss(&self, data: &Dataset, batch: &[usize]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.check_input(data)?;
        let mut total = 0.0;
        for &i in batch {
            let (x, y) = (&data.features[i], data.labels[i]);
            total += match self.kind {
                ModelKind::LeastSquares | ModelKind::Lasso => {
                    let r = self.predict(x) - y;
                    0.5 * r * r
                }
                ModelKind::Logistic | ModelKind::Mlp => softplus(-y * self.predict(x)),
            };
        }
        let mut loss = total / batch.len() as f64;
        if self.kind == ModelKind::Lasso {
            loss += self.l1_penalty();
        }
        if !loss.is_finite() {
            return Err(Error::Numeric { layer: "loss".into() });
        }
        Ok(loss)
    }
}

/// `ln(1 + eᶻ)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Subgradient choice: `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-layer gradients, shaped like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub grads: Vec<Tensor>,
    pub batch_size: usize,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            grads: model
                .layers
                .iter()
                .map(|l| Tensor::zeros(l.value.rows(), l.value.cols()))
                .collect(),
            batch_size: 0,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|g| g.data().iter().copied()).collect()
    }

    pub fn norm2(&self) -> f64 {
        linalg::norm2(&self.flatten())
    }
}

/// Mean loss and mean per-example gradient over `batch`.
pub fn loss_and_grad(model: &Model, data: &Dataset, batch: &[usize]) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    model.check_input(data)?;
    let mut gs = GradientSet::zeros_like(model);
    gs.batch_size = batch.len();
    let mut total = 0.0;

    match model.kind {
        ModelKind::LeastSquares | ModelKind::Lasso => {
            let gw = gs.grads[0].data_mut();
            for &i in batch {
                let (x, y) = (&data.features[i], data.labels[i]);
                let r = model.predict(x) - y;
                total += 0.5 * r * r;
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += r * xi;
                }
            }
        }
        ModelKind::Logistic => {
            let mut gb = 0.0;
            {
                let gw = gs.grads[0].data_mut();
                for &i in batch {
                    let (x, y) = (&data.features[i], data.labels[i]);
                    let m = y * model.predict(x);
                    total += softplus(-m);
                    let dz = -y * sigmoid(-m);
                    for (g, xi) in gw.iter_mut().zip(x) {
                        *g += dz * xi;
                    }
                    gb += dz;
                }
            }
            gs.grads[1].data_mut()[0] = gb;
        }
        ModelKind::Mlp => {
            let d = model.input_dim();
            let w2 = model.layers[2].value.data().to_vec();
            let (gw1, rest) = gs.grads.split_at_mut(1);
            let (gb1, rest) = rest.split_at_mut(1);
            let (gw2, gb2) = rest.split_at_mut(1);
            let (gw1, gb1, gw2, gb2) = (
                gw1[0].data_mut(),
                gb1[0].data_mut(),
                gw2[0].data_mut(),
                gb2[0].data_mut(),
            );
            for &i in batch {
                let (x, y) = (&data.features[i], data.labels[i]);
                let (hidden, out) = model.mlp_forward(x);
                let m = y * out;
                total += softplus(-m);
                let dout = -y * sigmoid(-m);
                gb2[0] += dout;
                for (j, h) in hidden.iter().enumerate() {
                    gw2[j] += dout * h;
                    let da = dout * w2[j] * (1.0 - h * h);
                    gb1[j] += da;
                    for (g, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g += da * xi;
                    }
                }
            }
        }
    }

    let inv = 1.0 / batch.len() as f64;
    for g in &mut gs.grads {
        g.scale_mut(inv);
    }
    let mut loss = total * inv;
    if model.kind == ModelKind::Lasso {
        loss += model.l1_penalty();
        let lambda = model.lambda;
        for (g, w) in gs.grads[0].data_mut().iter_mut().zip(model.layers[0].value.data()) {
            *g += lambda * sign(*w);
        }
    }

    for (g, layer) in gs.grads.iter().zip(&model.layers) {
        if !g.is_finite() {
            return Err(Error::Numeric {
                layer: layer.name.clone(),
            });
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric { layer: "loss".into() });
    }
    Ok((loss, gs))
}

/// Central-difference gradient of [`Model::loss`].
pub fn finite_diff_grad(model: &Model, data: &Dataset, batch: &[usize], eps: f64) -> Result<GradientSet> {
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "finite-difference step {eps} outside [1e-8, 1e-3]"
        )));
    }
    let mut probe = model.clone();
    let mut gs = GradientSet::zeros_like(model);
    gs.batch_size = batch.len();
    for (li, layer) in model.layers.iter().enumerate() {
        for k in 0..layer.value.len() {
            let orig = layer.value.data()[k];
            probe.layers[li].value.data_mut()[k] = orig + eps;
            let up = probe.loss(data, batch)?;
            probe.layers[li].value.data_mut()[k] = orig - eps;
            let down = probe.loss(data, batch)?;
            probe.layers[li].value.data_mut()[k] = orig;
            gs.grads[li].data_mut()[k] = (up - down) / (2.0 * eps);
        }
    }
    Ok(gs)
}

/// Accuracy for classifiers (prediction `≥ 0` means +1), mean squared error
/// otherwise.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    model.check_input(data)?;
    let n = data.len() as f64;
    let metric = if model.kind.is_classifier() {
        let correct = data
            .features
            .iter()
            .zip(&data.labels)
            .filter(|(x, &y)| {
                let pred = if model.predict(x) >= 0.0 { 1.0 } else { -1.0 };
                pred == y
            })
            .count();
        correct as f64 / n
    } else {
        data.features
            .iter()
            .zip(&data.labels)
            .map(|(x, y)| {
                let r = model.predict(x) - y;
                r * r
            })
            .sum::<f64>()
            / n
    };
    Ok(metric)
}
