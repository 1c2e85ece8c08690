//! Compact differentiable backbone `g ∘ f`, cross-entropy and evaluation
//! metrics.
//!
//! The feature extractor `f` average-pools each channel in time, flattens
//! channel-major and applies fully-connected tanh layers ending in the
//! `d`-dimensional feature. The classifier `g` is a single linear layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::SubjectDataset;
use crate::error::{Error, Result};
use crate::numerics::{log_softmax_rows, Mat, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub channels: usize,
    pub samples: usize,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub hidden: Vec<usize>,
    pub pool: usize,
    pub seed: u64,
    /// Initialise the classifier weights to zero.
    #[serde(default)]
    pub zero_classifier: bool,
}

impl BackboneConfig {
    pub fn new(channels: usize, samples: usize, n_classes: usize) -> Self {
        Self {
            channels,
            samples,
            feature_dim: 32,
            n_classes,
            hidden: vec![32],
            pool: 10,
            seed: 0,
            zero_classifier: false,
        }
    }

    pub fn pooled_len(&self) -> usize {
        self.samples / self.pool.max(1)
    }

    pub fn input_dim(&self) -> usize {
        self.channels * self.pooled_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::Config(format!("feature dimension must be >= 2, got {}", self.feature_dim)));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.pool == 0 || self.channels == 0 || self.pooled_len() == 0 {
            return Err(Error::Config(format!(
                "pooling factor {} incompatible with {} channels x {} samples",
                self.pool, self.channels, self.samples
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.feature_dim);
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// in × out
    pub weight: Mat,
    /// 1 × out
    pub bias: Mat,
}

impl Dense {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weight: Mat::from_vec(fan_in, fan_out, data),
            bias: Mat::zeros(1, fan_out),
        }
    }

    fn apply(&self, x: &Mat) -> Mat {
        let mut y = x.matmul_unchecked(&self.weight);
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub feature_layers: Vec<Dense>,
    pub classifier: Dense,
}

/// Tape leaves for every parameter, in [`Backbone::params`] order.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

impl Backbone {
    /// Seeded initialisation, uniform in `±√(6/(fan_in + fan_out))` with zero
    /// biases.
    pub fn init(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dims = config.layer_dims();
        let feature_layers = dims
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], &mut rng))
            .collect();
        let mut classifier = Dense::glorot(config.feature_dim, config.n_classes, &mut rng);
        if config.zero_classifier {
            classifier.weight = Mat::zeros(config.feature_dim, config.n_classes);
        }
        Ok(Self {
            config,
            feature_layers,
            classifier,
        })
    }

    /// Parameter names, in [`Backbone::params`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.feature_layers.len() {
            names.push(format!("feature.{i}.weight"));
            names.push(format!("feature.{i}.bias"));
        }
        names.push("classifier.weight".into());
        names.push("classifier.bias".into());
        names
    }

    pub fn params(&self) -> Vec<&Mat> {
        let mut out = Vec::new();
        for l in &self.feature_layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.classifier.weight);
        out.push(&self.classifier.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        for l in &mut self.feature_layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data().len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, backbone has {}",
                theta.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.data().len();
            p.data_mut().copy_from_slice(&theta[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Registers every parameter as a tape leaf.
    pub fn leaves(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.params().into_iter().map(|p| tape.leaf(p.clone())).collect())
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.config.input_dim() {
            return Err(Error::Shape(format!(
                "backbone expects {} input features, got {}",
                self.config.input_dim(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Features (B×d) and logits (B×K) for a batch of prepared inputs.
    pub fn forward(&self, x: &Mat) -> Result<(Mat, Mat)> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.feature_layers.iter().enumerate() {
            h = layer.apply(&h).map(f64::tanh);
            if !h.is_finite() {
                return Err(Error::Numeric(format!("non-finite activation in feature layer {i}")));
            }
        }
        let logits = self.classifier.apply(&h);
        if !logits.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite activation in classifier (layer {})",
                self.feature_layers.len()
            )));
        }
        Ok((h, logits))
    }

    /// Differentiable forward pass.
    pub fn forward_var(&self, tape: &mut Tape, params: &ParamVars, x: Var) -> Result<(Var, Var)> {
        self.check_input(tape.value(x))?;
        let p = &params.0;
        let mut h = x;
        for i in 0..self.feature_layers.len() {
            let z = tape.matmul(h, p[2 * i])?;
            let z = tape.add_row(z, p[2 * i + 1])?;
            h = tape.tanh(z);
        }
        let n = self.feature_layers.len();
        let logits = tape.matmul(h, p[2 * n])?;
        let logits = tape.add_row(logits, p[2 * n + 1])?;
        Ok((h, logits))
    }

    /// Argmax class per row (ties to the lowest index).
    pub fn predict(&self, x: &Mat) -> Result<Vec<usize>> {
        let (_, logits) = self.forward(x)?;
        Ok(argmax_rows(&logits))
    }
}

pub fn argmax_rows(logits: &Mat) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            logits
                .row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, v)| if *v > bv { (j, *v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Average-pools each trial in time by `pool` (a trailing partial window is
/// dropped) and flattens channel-major into one row per trial.
pub fn prepare_inputs(ds: &SubjectDataset, pool: usize) -> Result<Mat> {
    if pool == 0 {
        return Err(Error::Parameter("pooling factor must be positive".into()));
    }
    let (c, t) = (ds.channels(), ds.samples());
    let w = t / pool;
    if ds.is_empty() {
        return Ok(Mat::zeros(0, c * w));
    }
    if w == 0 {
        return Err(Error::Shape(format!("{t} samples shorter than pooling factor {pool}")));
    }
    let mut data = Vec::with_capacity(ds.len() * c * w);
    for trial in &ds.trials {
        for ch in 0..c {
            let row = trial.signal.row(ch);
            for k in 0..w {
                let window = &row[k * pool..(k + 1) * pool];
                data.push(window.iter().sum::<f64>() / pool as f64);
            }
        }
    }
    Ok(Mat::from_vec(ds.len(), c * w, data))
}

fn check_labels(labels: &[usize], rows: usize, k: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(l) = labels.iter().find(|l| **l >= k) {
        return Err(Error::Parameter(format!("label {l} outside {k} classes")));
    }
    Ok(())
}

/// Batch-mean cross-entropy of softmax(logits) against class indices.
pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.rows(), logits.cols())?;
    if labels.is_empty() {
        return Err(Error::SampleSize("cross-entropy of an empty batch".into()));
    }
    let lp = log_softmax_rows(logits);
    let total = labels
        .iter()
        .enumerate()
        .fold(0.0, |acc, (i, &l)| acc - lp[(i, l)]);
    Ok(total / labels.len() as f64)
}

fn one_hot(labels: &[usize], k: usize) -> Mat {
    let mut m = Mat::zeros(labels.len(), k);
    for (i, &l) in labels.iter().enumerate() {
        m[(i, l)] = 1.0;
    }
    m
}

/// Differentiable batch-mean cross-entropy.
pub fn cross_entropy_var(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, k) = tape.value(logits).shape();
    check_labels(labels, rows, k)?;
    if labels.is_empty() {
        return Err(Error::SampleSize("cross-entropy of an empty batch".into()));
    }
    let y = tape.leaf(one_hot(labels, k));
    let lp = tape.log_softmax(logits);
    let picked = tape.mul(y, lp)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / rows as f64))
}

/// Accuracy, Cohen's kappa and the confusion matrix (rows = true class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub chance: f64,
    pub kappa: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], k: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::SampleSize("no trials to evaluate".into()));
        }
        if labels.len() != predictions.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut confusion = vec![vec![0usize; k]; k];
        for (&l, &p) in labels.iter().zip(predictions) {
            if l >= k || p >= k {
                return Err(Error::Parameter(format!("class index outside {k} classes")));
            }
            confusion[l][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    /// Cohen's kappa with chance agreement from the confusion marginals.
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let k = confusion.len();
        let n: usize = confusion.iter().flatten().sum();
        let nf = n as f64;
        let agree: usize = (0..k).map(|i| confusion[i][i]).sum();
        let accuracy = agree as f64 / nf;
        let chance = (0..k)
            .map(|c| {
                let row: usize = confusion[c].iter().sum();
                let col: usize = confusion.iter().map(|r| r[c]).sum();
                (row as f64 / nf) * (col as f64 / nf)
            })
            .sum::<f64>();
        // With a single class used on both sides chance agreement is 1; count
        // that as perfect agreement.
        let kappa = if chance >= 1.0 {
            if accuracy >= 1.0 { 1.0 } else { 0.0 }
        } else {
            (accuracy - chance) / (1.0 - chance)
        };
        Self {
            accuracy,
            chance,
            kappa,
            confusion,
        }
    }
}

/// Evaluates the backbone on a labelled dataset.
pub fn evaluate(ds: &SubjectDataset, backbone: &Backbone) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(Error::SampleSize(format!("subject {}: no trials to evaluate", ds.subject_id)));
    }
    let labels = ds.labels()?;
    let x = prepare_inputs(ds, backbone.config.pool)?;
    let predictions = backbone.predict(&x)?;
    Metrics::from_predictions(&labels, &predictions, backbone.config.n_classes)
}
