//! Multi-source adaptation: divergence-based source weights, feature-level
//! and decision-level alignment losses, the loss schedule and the training
//! loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::SubjectDataset;
use crate::divergence::{
    ccs_divergence, ccs_divergence_var, cs_divergence, cs_divergence_var,
    cs_divergence_with,
};
use crate::error::{Error, Result};
use crate::kernels::{KernelConfig, ResolvedKernel};
use crate::model::{cross_entropy_var, evaluate, prepare_inputs, Backbone, BackboneConfig, Metrics, ParamVars};
use crate::numerics::{log_softmax_rows, stable_sigmoid, Mat, Tape, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Epoch at which both weights reach half their maximum.
    pub offset: f64,
    pub epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 1.4,
            offset: 100.0,
            epochs: 300,
        }
    }
}

/// `(α_τ, β_τ) = (α · (1 - σ(τ - τ₀)), β · σ(τ - τ₀))`.
pub fn schedule(tau: f64, cfg: &ScheduleConfig) -> (f64, f64) {
    let s = stable_sigmoid(tau - cfg.offset);
    // 1 - σ(x) = σ(-x), evaluated directly to keep precision for large x
    let rest = stable_sigmoid(cfg.offset - tau);
    (cfg.alpha * rest, cfg.beta * s)
}

/// `ω_s = exp(-d_s) / Σ exp(-d_s')` over the given (selected) sources.
pub fn source_weights(divs: &[f64]) -> Result<Vec<f64>> {
    if divs.is_empty() {
        return Err(Error::SampleSize("no sources to weight".into()));
    }
    if let Some(d) = divs.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::Parameter(format!("source divergence {d} must be finite and >= 0")));
    }
    let min = divs.iter().fold(f64::INFINITY, |m, d| m.min(*d));
    let e: Vec<f64> = divs.iter().map(|d| (min - d).exp()).collect();
    let total = e.iter().sum::<f64>();
    Ok(e.iter().map(|v| v / total).collect())
}

/// Marginal feature alignment or the literal conditional reading of the
/// source–source term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlaMode {
    #[default]
    Marginal,
    Conditional,
}

/// What the output kernel of the conditional divergence sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSpace {
    #[default]
    Logits,
    Softmax,
}

impl OutputSpace {
    pub fn apply(self, logits: &Mat) -> Mat {
        match self {
            OutputSpace::Logits => logits.clone(),
            OutputSpace::Softmax => log_softmax_rows(logits).map(f64::exp),
        }
    }

    fn apply_var(self, tape: &mut Tape, logits: Var) -> Var {
        match self {
            OutputSpace::Logits => logits,
            OutputSpace::Softmax => tape.softmax(logits),
        }
    }
}

impl std::str::FromStr for FlaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "marginal" => Ok(FlaMode::Marginal),
            "conditional" => Ok(FlaMode::Conditional),
            other => Err(Error::Config(format!("unknown FLA mode '{other}' (marginal, conditional)"))),
        }
    }
}

impl std::fmt::Display for FlaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FlaMode::Marginal => "marginal",
            FlaMode::Conditional => "conditional",
        })
    }
}

impl std::str::FromStr for OutputSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "logits" => Ok(OutputSpace::Logits),
            "softmax" => Ok(OutputSpace::Softmax),
            other => Err(Error::Config(format!("unknown output space '{other}' (logits, softmax)"))),
        }
    }
}

impl std::fmt::Display for OutputSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OutputSpace::Logits => "logits",
            OutputSpace::Softmax => "softmax",
        })
    }
}

/// Feature and output kernels for one domain pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairKernels {
    pub feat: ResolvedKernel,
    pub out: ResolvedKernel,
}

/// Resolved kernels for every source–target and source–source pair.
#[derive(Debug, Clone)]
pub struct AlignmentKernels {
    pub source_target: Vec<PairKernels>,
    /// Upper triangle, `source_source[a][b - a - 1]` for `a < b`.
    pub source_source: Vec<Vec<PairKernels>>,
}

impl AlignmentKernels {
    /// Resolves bandwidths on (features, outputs) of every domain.
    pub fn resolve(
        sources: &[(&Mat, &Mat)],
        target: (&Mat, &Mat),
        kcfg_feat: &KernelConfig,
        kcfg_out: &KernelConfig,
    ) -> Result<Self> {
        let pair = |a: (&Mat, &Mat), b: (&Mat, &Mat)| -> Result<PairKernels> {
            Ok(PairKernels {
                feat: kcfg_feat.resolve(a.0, b.0)?,
                out: kcfg_out.resolve(a.1, b.1)?,
            })
        };
        let source_target = sources
            .iter()
            .map(|s| pair(*s, target))
            .collect::<Result<Vec<_>>>()?;
        let source_source = (0..sources.len())
            .map(|a| {
                ((a + 1)..sources.len())
                    .map(|b| pair(sources[a], sources[b]))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            source_target,
            source_source,
        })
    }

    pub fn pair(&self, a: usize, b: usize) -> &PairKernels {
        &self.source_source[a][b - a - 1]
    }
}

fn check_weights(n: usize, weights: &[f64]) -> Result<()> {
    if n == 0 {
        return Err(Error::SampleSize("alignment needs at least one source".into()));
    }
    if weights.len() != n {
        return Err(Error::Shape(format!("{} weights for {n} sources", weights.len())));
    }
    Ok(())
}

fn pairwise_scale(n: usize) -> f64 {
    2.0 / (n * (n - 1)) as f64
}

/// `(L_FLA_ST, L_FLA_SS)` on plain feature batches, resolving kernels per
/// pair from `kcfg`.
pub fn fla_loss(sources: &[Mat], target: &Mat, weights: &[f64], kcfg: &KernelConfig) -> Result<(f64, f64)> {
    check_weights(sources.len(), weights)?;
    let mut st = 0.0;
    for (z, w) in sources.iter().zip(weights) {
        st += w * cs_divergence(z, target, kcfg)?.raw;
    }
    let n = sources.len();
    let mut ss = 0.0;
    if n > 1 {
        for a in 0..n {
            for b in (a + 1)..n {
                ss += cs_divergence(&sources[a], &sources[b], kcfg)?.raw;
            }
        }
        ss *= pairwise_scale(n);
    }
    Ok((st, ss))
}

/// `(L_DLA_ST, L_DLA_SS)` on plain (features, outputs) batches.
pub fn dla_loss(
    sources: &[(Mat, Mat)],
    target: (&Mat, &Mat),
    weights: &[f64],
    kcfg_feat: &KernelConfig,
    kcfg_out: &KernelConfig,
) -> Result<(f64, f64)> {
    check_weights(sources.len(), weights)?;
    let mut st = 0.0;
    for ((z, y), w) in sources.iter().zip(weights) {
        st += w * ccs_divergence(z, y, target.0, target.1, kcfg_feat, kcfg_out)?.raw;
    }
    let n = sources.len();
    let mut ss = 0.0;
    if n > 1 {
        for a in 0..n {
            for b in (a + 1)..n {
                let (za, ya) = &sources[a];
                let (zb, yb) = &sources[b];
                ss += ccs_divergence(za, ya, zb, yb, kcfg_feat, kcfg_out)?.raw;
            }
        }
        ss *= pairwise_scale(n);
    }
    Ok((st, ss))
}

/// Differentiable `(L_FLA_ST, L_FLA_SS)`. `sources` and `target` are
/// (features, outputs) nodes; outputs are only read in
/// [`FlaMode::Conditional`].
pub fn fla_loss_var(
    tape: &mut Tape,
    sources: &[(Var, Var)],
    target: (Var, Var),
    weights: &[f64],
    kernels: &AlignmentKernels,
    mode: FlaMode,
) -> Result<(Var, Var)> {
    check_weights(sources.len(), weights)?;
    let mut st: Option<Var> = None;
    for (s, (src, w)) in sources.iter().zip(weights).enumerate() {
        let d = cs_divergence_var(tape, src.0, target.0, &kernels.source_target[s].feat)?;
        let term = tape.scale(d, *w);
        st = Some(match st {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let st = st.expect("at least one source");
    let ss = pairwise_sum(tape, sources, |tape, a, b| {
        let k = kernels.pair(a, b);
        match mode {
            FlaMode::Marginal => cs_divergence_var(tape, sources[a].0, sources[b].0, &k.feat),
            FlaMode::Conditional => ccs_divergence_var(tape, sources[a], sources[b], &k.feat, &k.out),
        }
    })?;
    Ok((st, ss))
}

/// Differentiable `(L_DLA_ST, L_DLA_SS)`.
pub fn dla_loss_var(
    tape: &mut Tape,
    sources: &[(Var, Var)],
    target: (Var, Var),
    weights: &[f64],
    kernels: &AlignmentKernels,
) -> Result<(Var, Var)> {
    check_weights(sources.len(), weights)?;
    let mut st: Option<Var> = None;
    for (s, (src, w)) in sources.iter().zip(weights).enumerate() {
        let k = &kernels.source_target[s];
        let d = ccs_divergence_var(tape, *src, target, &k.feat, &k.out)?;
        let term = tape.scale(d, *w);
        st = Some(match st {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let st = st.expect("at least one source");
    let ss = pairwise_sum(tape, sources, |tape, a, b| {
        let k = kernels.pair(a, b);
        ccs_divergence_var(tape, sources[a], sources[b], &k.feat, &k.out)
    })?;
    Ok((st, ss))
}

/// `2/(N(N-1)) Σ_{a<b} f(a, b)`, or a constant zero when `N = 1`.
fn pairwise_sum<F>(tape: &mut Tape, sources: &[(Var, Var)], mut f: F) -> Result<Var>
where
    F: FnMut(&mut Tape, usize, usize) -> Result<Var>,
{
    let n = sources.len();
    if n < 2 {
        return Ok(tape.constant(0.0));
    }
    let mut acc: Option<Var> = None;
    for a in 0..n {
        for b in (a + 1)..n {
            let d = f(tape, a, b)?;
            acc = Some(match acc {
                None => d,
                Some(prev) => tape.add(prev, d)?,
            });
        }
    }
    Ok(tape.scale(acc.expect("n >= 2"), pairwise_scale(n)))
}

/// Loss components of one step or one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub cls: f64,
    pub fla_st: f64,
    pub fla_ss: f64,
    pub dla_st: f64,
    pub dla_ss: f64,
    pub total: f64,
    pub alpha_tau: f64,
    pub beta_tau: f64,
}

impl LossBreakdown {
    /// `L_cls + α_τ (L_FLA_ST + L_FLA_SS) + β_τ (L_DLA_ST + L_DLA_SS)`.
    pub fn recomposed_total(&self) -> f64 {
        self.cls + self.alpha_tau * (self.fla_st + self.fla_ss) + self.beta_tau * (self.dla_st + self.dla_ss)
    }
}

/// Options shared by the loss graph and the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossOptions {
    pub output_space: OutputSpace,
    pub fla_mode: FlaMode,
}

/// One domain's mini-batch: prepared inputs and, for sources, labels.
#[derive(Debug, Clone, Copy)]
pub struct DomainBatch<'a> {
    pub inputs: &'a Mat,
    pub labels: Option<&'a [usize]>,
}

/// All loss nodes of one step.
pub struct StepGraph {
    pub tape: Tape,
    pub params: ParamVars,
    pub cls: Var,
    pub fla_st: Var,
    pub fla_ss: Var,
    pub dla_st: Var,
    pub dla_ss: Var,
    pub total: Var,
}

impl StepGraph {
    pub fn breakdown(&self, epoch: usize, alpha_tau: f64, beta_tau: f64) -> LossBreakdown {
        let v = |x: Var| self.tape.scalar(x);
        LossBreakdown {
            epoch,
            cls: v(self.cls),
            fla_st: v(self.fla_st),
            fla_ss: v(self.fla_ss),
            dla_st: v(self.dla_st),
            dla_ss: v(self.dla_ss),
            total: v(self.total),
            alpha_tau,
            beta_tau,
        }
    }

    /// Flattened gradient of `output` with respect to every parameter.
    pub fn gradient(&self, output: Var) -> Result<Vec<f64>> {
        let grads = self.tape.backward(output)?;
        Ok(self
            .params
            .0
            .iter()
            .flat_map(|p| {
                let (r, c) = self.tape.value(*p).shape();
                grads.get_or_zeros(*p, r, c).into_data()
            })
            .collect())
    }
}

/// Builds the full scheduled objective for one step.
#[allow(clippy::too_many_arguments)]
pub fn build_step_graph(
    backbone: &Backbone,
    sources: &[DomainBatch<'_>],
    target: DomainBatch<'_>,
    weights: &[f64],
    kernels: &AlignmentKernels,
    options: LossOptions,
    alpha_tau: f64,
    beta_tau: f64,
) -> Result<StepGraph> {
    check_weights(sources.len(), weights)?;
    let mut tape = Tape::new();
    let params = backbone.leaves(&mut tape);

    let forward = |tape: &mut Tape, x: &Mat| -> Result<(Var, Var, Var)> {
        let xv = tape.leaf(x.clone());
        let (z, logits) = backbone.forward_var(tape, &params, xv)?;
        let out = options.output_space.apply_var(tape, logits);
        Ok((z, logits, out))
    };

    let mut domain_nodes = Vec::with_capacity(sources.len());
    let mut cls: Option<Var> = None;
    for (batch, w) in sources.iter().zip(weights) {
        let (z, logits, out) = forward(&mut tape, batch.inputs)?;
        let labels = batch
            .labels
            .ok_or_else(|| Error::State("source batch without labels".into()))?;
        let ce = cross_entropy_var(&mut tape, logits, labels)?;
        let term = tape.scale(ce, *w);
        cls = Some(match cls {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
        domain_nodes.push((z, out));
    }
    let (zt, _, outt) = forward(&mut tape, target.inputs)?;
    let target_nodes = (zt, outt);

    let cls = cls.expect("at least one source");
    let (fla_st, fla_ss) = fla_loss_var(&mut tape, &domain_nodes, target_nodes, weights, kernels, options.fla_mode)?;
    let (dla_st, dla_ss) = dla_loss_var(&mut tape, &domain_nodes, target_nodes, weights, kernels)?;

    let fla = tape.add(fla_st, fla_ss)?;
    let dla = tape.add(dla_st, dla_ss)?;
    let fla = tape.scale(fla, alpha_tau);
    let dla = tape.scale(dla, beta_tau);
    let total = tape.add(cls, fla)?;
    let total = tape.add(total, dla)?;
    Ok(StepGraph {
        tape,
        params,
        cls,
        fla_st,
        fla_ss,
        dla_st,
        dla_ss,
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub pool: usize,
    pub kernel_feat: KernelConfig,
    pub kernel_out: KernelConfig,
    pub losses: LossOptions,
    /// Cosine-anneal the learning rate over the epochs.
    pub cosine: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            lr: 0.001,
            batch_size: 32,
            feature_dim: 32,
            hidden: vec![32],
            pool: 10,
            kernel_feat: KernelConfig::default(),
            kernel_out: KernelConfig::default(),
            losses: LossOptions::default(),
            cosine: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.schedule.epochs == 0 {
            return Err(Error::Config("need at least one epoch".into()));
        }
        let s = &self.schedule;
        if !(s.alpha >= 0.0 && s.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        self.kernel_feat.validate()?;
        self.kernel_out.validate()
    }

    pub fn backbone_config(&self, channels: usize, samples: usize, n_classes: usize) -> BackboneConfig {
        BackboneConfig {
            channels,
            samples,
            feature_dim: self.feature_dim,
            n_classes,
            hidden: self.hidden.clone(),
            pool: self.pool,
            seed: self.seed,
            zero_classifier: false,
        }
    }

    /// Cosine-annealed learning rate for 1-based epoch `tau`.
    pub fn lr_at(&self, tau: usize) -> f64 {
        if !self.cosine {
            return self.lr;
        }
        let progress = (tau - 1) as f64 / self.schedule.epochs as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub losses: LossBreakdown,
    pub lr: f64,
    pub weights: Vec<f64>,
    pub target_acc: Option<f64>,
    /// Epoch-level divergences whose log argument hit the floor.
    pub clamp_warnings: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub backbone: Backbone,
    pub log: Vec<EpochLog>,
    pub source_ids: Vec<String>,
    /// Final metrics on the target, when target labels were supplied.
    pub target_metrics: Option<Metrics>,
}

impl TrainOutcome {
    pub fn mean_epoch_ms(&self) -> f64 {
        self.log.iter().map(|e| e.wall_ms).sum::<f64>() / self.log.len().max(1) as f64
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

fn check_domains(sources: &[SubjectDataset], target: &SubjectDataset) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::SampleSize("training needs at least one source subject".into()));
    }
    let (c, t) = (target.channels(), target.samples());
    for ds in sources.iter().chain(std::iter::once(target)) {
        if ds.len() < 2 {
            return Err(Error::SampleSize(format!(
                "subject {} has {} trials, need at least 2",
                ds.subject_id,
                ds.len()
            )));
        }
        if (ds.channels(), ds.samples()) != (c, t) {
            return Err(Error::Shape(format!(
                "subject {} trials are {}x{}, target is {c}x{t}",
                ds.subject_id,
                ds.channels(),
                ds.samples()
            )));
        }
        if ds.n_classes != target.n_classes {
            return Err(Error::Shape(format!(
                "subject {} has {} classes, target has {}",
                ds.subject_id, ds.n_classes, target.n_classes
            )));
        }
    }
    for ds in sources {
        if !ds.is_labeled() {
            return Err(Error::State(format!("source subject {} is not fully labeled", ds.subject_id)));
        }
    }
    Ok(())
}

/// Batch indices for one step: a window of the epoch permutation, wrapping
/// around for domains shorter than the number of steps needs.
fn batch_indices(perm: &[usize], step: usize, batch: usize) -> Vec<usize> {
    let n = perm.len();
    let size = batch.min(n);
    (0..size).map(|i| perm[(step * size + i) % n]).collect()
}

/// Trains the backbone on the selected sources and the unlabeled target.
///
/// Target labels, if present, are only used to report accuracy.
pub fn train(sources: &[SubjectDataset], target: &SubjectDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_domains(sources, target)?;
    let bcfg = cfg.backbone_config(target.channels(), target.samples(), target.n_classes);
    let mut backbone = Backbone::init(bcfg)?;

    let source_inputs = sources
        .iter()
        .map(|ds| prepare_inputs(ds, cfg.pool))
        .collect::<Result<Vec<_>>>()?;
    let source_labels = sources.iter().map(|ds| ds.labels()).collect::<Result<Vec<_>>>()?;
    let target_inputs = prepare_inputs(target, cfg.pool)?;
    let evaluate_target = target.is_labeled();

    let mut theta = backbone.flatten();
    let mut adam = Adam::new(theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c_4000_0001);
    let mut log = Vec::with_capacity(cfg.schedule.epochs);

    let sizes: Vec<usize> = source_inputs
        .iter()
        .map(Mat::rows)
        .chain(std::iter::once(target_inputs.rows()))
        .collect();
    let max_len = *sizes.iter().max().expect("non-empty");
    let steps = max_len.div_ceil(cfg.batch_size);

    for tau in 1..=cfg.schedule.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(tau);
        let (alpha_tau, beta_tau) = schedule(tau as f64, &cfg.schedule);

        // Epoch-level pass on full datasets: bandwidths and source weights.
        let full_sources = source_inputs
            .iter()
            .map(|x| backbone.forward(x))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| epoch_error(tau, None, e))?;
        let full_target = backbone.forward(&target_inputs).map_err(|e| epoch_error(tau, None, e))?;
        let outs: Vec<Mat> = full_sources
            .iter()
            .map(|(_, l)| cfg.losses.output_space.apply(l))
            .collect();
        let out_t = cfg.losses.output_space.apply(&full_target.1);
        let pairs: Vec<(&Mat, &Mat)> = full_sources.iter().zip(&outs).map(|((z, _), y)| (z, y)).collect();
        let kernels = AlignmentKernels::resolve(&pairs, (&full_target.0, &out_t), &cfg.kernel_feat, &cfg.kernel_out)
            .map_err(|e| epoch_error(tau, None, e))?;
        let mut clamp_warnings = 0;
        let mut divs = Vec::with_capacity(sources.len());
        for (s, (z, _)) in full_sources.iter().enumerate() {
            let d = cs_divergence_with(z, &full_target.0, &kernels.source_target[s].feat)
                .map_err(|e| epoch_error(tau, None, e))?;
            clamp_warnings += usize::from(d.clamped);
            divs.push(d.value);
        }
        let weights = source_weights(&divs)?;

        let perms: Vec<Vec<usize>> = sizes
            .iter()
            .map(|&n| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();

        let mut acc = [0.0f64; 6];
        for step in 0..steps {
            let src_batches: Vec<(Mat, Vec<usize>)> = (0..sources.len())
                .map(|s| {
                    let idx = batch_indices(&perms[s], step, cfg.batch_size);
                    let labels = idx.iter().map(|&i| source_labels[s][i]).collect();
                    (source_inputs[s].select_rows(&idx), labels)
                })
                .collect();
            let tgt_idx = batch_indices(&perms[sources.len()], step, cfg.batch_size);
            let tgt_batch = target_inputs.select_rows(&tgt_idx);
            let batches: Vec<DomainBatch<'_>> = src_batches
                .iter()
                .map(|(x, y)| DomainBatch {
                    inputs: x,
                    labels: Some(y),
                })
                .collect();
            let graph = build_step_graph(
                &backbone,
                &batches,
                DomainBatch {
                    inputs: &tgt_batch,
                    labels: None,
                },
                &weights,
                &kernels,
                cfg.losses,
                alpha_tau,
                beta_tau,
            )
            .map_err(|e| epoch_error(tau, Some(step), e))?;
            let b = graph.breakdown(tau, alpha_tau, beta_tau);
            let values = [b.cls, b.fla_st, b.fla_ss, b.dla_st, b.dla_ss, b.total];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {tau}, batch {step}: {b:?}"
                )));
            }
            for (a, v) in acc.iter_mut().zip(values) {
                *a += v;
            }
            let grad = graph.gradient(graph.total)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient at epoch {tau}, batch {step}")));
            }
            adam.step(&mut theta, &grad, lr);
            backbone.set_flat(&theta)?;
        }
        let n = steps as f64;
        let losses = LossBreakdown {
            epoch: tau,
            cls: acc[0] / n,
            fla_st: acc[1] / n,
            fla_ss: acc[2] / n,
            dla_st: acc[3] / n,
            dla_ss: acc[4] / n,
            total: acc[5] / n,
            alpha_tau,
            beta_tau,
        };
        let target_acc = if evaluate_target {
            Some(evaluate(target, &backbone)?.accuracy)
        } else {
            None
        };
        log.push(EpochLog {
            losses,
            lr,
            weights,
            target_acc,
            clamp_warnings,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    let target_metrics = if evaluate_target {
        Some(evaluate(target, &backbone)?)
    } else {
        None
    };
    Ok(TrainOutcome {
        backbone,
        log,
        source_ids: sources.iter().map(|s| s.subject_id.clone()).collect(),
        target_metrics,
    })
}

fn epoch_error(tau: usize, step: Option<usize>, e: Error) -> Error {
    match (e, step) {
        (Error::Numeric(msg), Some(b)) => Error::Numeric(format!("epoch {tau}, batch {b}: {msg}")),
        (Error::Numeric(msg), None) => Error::Numeric(format!("epoch {tau}: {msg}")),
        (other, _) => other,
    }
}
