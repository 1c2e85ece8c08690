//! Synthetic multi-subject datasets with controllable inter-subject shift,
//! and a frozen random-projection stand-in for foundation-model embeddings.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::{SubjectDataset, Trial};
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::selection::SubjectEmbedding;

/// Samples per embedding patch.
pub const PATCH_LEN: usize = 200;
pub const DEFAULT_EMBED_DIM: usize = 200;

const TEMPLATE_STREAM: u64 = 1;
const CLUSTER_STREAM: u64 = 2;
const PROJECTION_STREAM: u64 = 3;

/// Subjects sharing one base transform. `shift` overrides the global
/// `subject_shift` for the members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub members: Vec<usize>,
    pub shift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub trials_per_class: usize,
    pub channels: usize,
    pub samples: usize,
    pub n_classes: usize,
    pub class_separation: f64,
    /// Scale of the per-subject channel rotation angles and mean offsets.
    pub subject_shift: f64,
    pub clusters: Option<Vec<ClusterSpec>>,
    /// Relative perturbation of each member around its cluster transform.
    pub cluster_jitter: f64,
    pub noise_std: f64,
    pub sample_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 6,
            trials_per_class: 32,
            channels: 8,
            samples: 200,
            n_classes: 2,
            class_separation: 1.0,
            subject_shift: 0.6,
            clusters: None,
            cluster_jitter: 0.05,
            noise_std: 1.0,
            sample_rate: 250.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_subjects", self.n_subjects),
            ("trials_per_class", self.trials_per_class),
            ("channels", self.channels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.samples < 2 {
            return Err(Error::Config("samples must be at least 2".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("K must be at least 2, got {}", self.n_classes)));
        }
        let reals = [
            ("class_separation", self.class_separation),
            ("subject_shift", self.subject_shift),
            ("cluster_jitter", self.cluster_jitter),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if let Some(clusters) = &self.clusters {
            let mut seen = vec![false; self.n_subjects];
            for c in clusters {
                if let Some(s) = c.shift {
                    if !(s.is_finite() && s >= 0.0) {
                        return Err(Error::Config(format!("cluster shift must be >= 0, got {s}")));
                    }
                }
                for &m in &c.members {
                    if m >= self.n_subjects {
                        return Err(Error::Config(format!("cluster member {m} out of range")));
                    }
                    if std::mem::replace(&mut seen[m], true) {
                        return Err(Error::Config(format!("subject {m} listed in two clusters")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn subject_id(&self, index: usize) -> String {
        let width = self.n_subjects.to_string().len().max(2);
        format!("S{:0width$}", index + 1)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Class-conditional noise-free signals, shared by every subject.
struct Templates {
    classes: Vec<Mat>,
}

impl Templates {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = stream_rng(cfg.seed, TEMPLATE_STREAM);
        let (c, t, k) = (cfg.channels, cfg.samples, cfg.n_classes);
        let base_freq = 10.0;
        let base_amp: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        let base_phase: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let mut base = Mat::zeros(c, t);
        for ch in 0..c {
            for s in 0..t {
                let time = s as f64 / cfg.sample_rate;
                base[(ch, s)] = base_amp[ch] * (2.0 * PI * base_freq * time + base_phase[ch]).sin();
            }
        }
        let classes = (0..k)
            .map(|class| {
                // class frequencies spread across the 8–13 Hz band
                let freq = 8.0 + 5.0 * class as f64 / (k - 1) as f64;
                let amp: Vec<f64> = (0..c).map(|_| normal(&mut rng)).collect();
                let phase: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
                let mut m = base.clone();
                for ch in 0..c {
                    for s in 0..t {
                        let time = s as f64 / cfg.sample_rate;
                        m[(ch, s)] += cfg.class_separation * amp[ch] * (2.0 * PI * freq * time + phase[ch]).sin();
                    }
                }
                m
            })
            .collect();
        Self { classes }
    }
}

/// Rotation angles for every channel pair plus a channel mean offset.
#[derive(Clone)]
struct Shift {
    angles: Vec<f64>,
    offset: Vec<f64>,
}

impl Shift {
    fn draw(rng: &mut ChaCha8Rng, c: usize) -> Self {
        let pairs = c * (c - 1) / 2;
        Self {
            angles: (0..pairs).map(|_| normal(rng)).collect(),
            offset: (0..c).map(|_| normal(rng)).collect(),
        }
    }

    fn perturbed(&self, rng: &mut ChaCha8Rng, jitter: f64) -> Self {
        Self {
            angles: self.angles.iter().map(|a| a + jitter * normal(rng)).collect(),
            offset: self.offset.iter().map(|o| o + jitter * normal(rng)).collect(),
        }
    }

    /// Orthogonal mixing `Q` as a product of Givens rotations with angles
    /// `scale · π/4 · a_ij`, and offset `scale · δ`.
    fn realize(&self, c: usize, scale: f64) -> (Mat, Vec<f64>) {
        let mut q = Mat::identity(c);
        let mut idx = 0;
        for i in 0..c {
            for j in (i + 1)..c {
                let theta = scale * 0.25 * PI * self.angles[idx];
                idx += 1;
                let (sn, cs) = theta.sin_cos();
                // q ← G(i, j, θ) q
                for col in 0..c {
                    let a = q[(i, col)];
                    let b = q[(j, col)];
                    q[(i, col)] = cs * a - sn * b;
                    q[(j, col)] = sn * a + cs * b;
                }
            }
        }
        (q, self.offset.iter().map(|o| scale * o).collect())
    }
}

/// Generates `n_subjects` class-balanced datasets. Labels cycle through the
/// classes trial by trial.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SubjectDataset>> {
    cfg.validate()?;
    let templates = Templates::new(cfg);
    let (c, t, k) = (cfg.channels, cfg.samples, cfg.n_classes);

    let mut cluster_of = vec![None; cfg.n_subjects];
    let mut cluster_shifts = Vec::new();
    if let Some(clusters) = &cfg.clusters {
        for (ci, spec) in clusters.iter().enumerate() {
            let mut rng = stream_rng(cfg.seed.wrapping_add(ci as u64), CLUSTER_STREAM);
            cluster_shifts.push((Shift::draw(&mut rng, c), spec.shift.unwrap_or(cfg.subject_shift)));
            for &m in &spec.members {
                cluster_of[m] = Some(ci);
            }
        }
    }

    (0..cfg.n_subjects)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(s as u64));
            let (shift, scale) = match cluster_of[s] {
                Some(ci) => {
                    let (base, scale) = &cluster_shifts[ci];
                    (base.perturbed(&mut rng, cfg.cluster_jitter), *scale)
                }
                None => (Shift::draw(&mut rng, c), cfg.subject_shift),
            };
            let (q, offset) = shift.realize(c, scale);
            let trials = (0..cfg.trials_per_class * k)
                .map(|i| {
                    let label = i % k;
                    let noise: Vec<f64> = (0..c * t).map(|_| cfg.noise_std * normal(&mut rng)).collect();
                    let x = templates.classes[label].add(&Mat::from_vec(c, t, noise)).expect("same shape");
                    let mut signal = q.matmul_unchecked(&x);
                    for (ch, shift) in offset.iter().enumerate() {
                        signal.row_mut(ch).iter_mut().for_each(|v| *v += shift);
                    }
                    Trial::new(signal, Some(label))
                })
                .collect();
            SubjectDataset::new(cfg.subject_id(s), trials, k)
        })
        .collect()
}

/// Frozen random linear map from a flattened `C × 200` patch to `d_e`
/// dimensions, shared by every subject.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    channels: usize,
    projection: Mat,
    pub zero_pad: bool,
}

impl StubEmbedder {
    pub fn new(channels: usize, dim: usize, seed: u64) -> Result<Self> {
        if channels == 0 || dim == 0 {
            return Err(Error::Config("embedder needs channels > 0 and d_e > 0".into()));
        }
        let mut rng = stream_rng(seed, PROJECTION_STREAM);
        let n = channels * PATCH_LEN;
        let scale = 1.0 / (n as f64).sqrt();
        let data = (0..n * dim).map(|_| scale * normal(&mut rng)).collect();
        Ok(Self {
            channels,
            projection: Mat::from_vec(n, dim, data),
            zero_pad: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    /// Mean of the projected patches of one trial.
    pub fn embed_trial(&self, signal: &Mat) -> Result<Vec<f64>> {
        let (c, t) = signal.shape();
        if c != self.channels {
            return Err(Error::Shape(format!(
                "embedder built for {} channels, trial has {c}",
                self.channels
            )));
        }
        let full = t / PATCH_LEN;
        let partial = t % PATCH_LEN;
        let patches = full + usize::from(self.zero_pad && partial > 0);
        if patches == 0 {
            return Err(Error::Shape(format!(
                "trial has {t} samples, shorter than one {PATCH_LEN}-sample patch; enable zero padding"
            )));
        }
        let mut flat = Mat::zeros(patches, c * PATCH_LEN);
        for p in 0..patches {
            let start = p * PATCH_LEN;
            let len = PATCH_LEN.min(t - start);
            let row = flat.row_mut(p);
            for ch in 0..c {
                row[ch * PATCH_LEN..ch * PATCH_LEN + len].copy_from_slice(&signal.row(ch)[start..start + len]);
            }
        }
        let projected = flat.matmul_unchecked(&self.projection);
        Ok(projected.row_mean())
    }

    pub fn embed(&self, ds: &SubjectDataset) -> Result<SubjectEmbedding> {
        if ds.is_empty() {
            return Err(Error::SampleSize(format!("subject {} has no trials to embed", ds.subject_id)));
        }
        let dim = self.dim();
        let mut data = Vec::with_capacity(ds.len() * dim);
        for trial in &ds.trials {
            data.extend(self.embed_trial(&trial.signal)?);
        }
        SubjectEmbedding::new(ds.subject_id.clone(), Mat::from_vec(ds.len(), dim, data))
    }
}

/// Embeds `ds` with a stub projection built from `seed` (no zero padding).
pub fn stub_embed(ds: &SubjectDataset, dim: usize, seed: u64) -> Result<SubjectEmbedding> {
    StubEmbedder::new(ds.channels(), dim, seed)?.embed(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::cs_divergence;
    use crate::kernels::KernelConfig;
    use crate::selection::divergence_matrix;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_subjects: 3,
            trials_per_class: 10,
            channels: 4,
            samples: 200,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = generate(&small(7)).unwrap();
        let b = generate(&small(7)).unwrap();
        assert_eq!(a, b);
        for ds in &a {
            let labels = ds.labels().unwrap();
            for k in 0..2 {
                assert_eq!(labels.iter().filter(|&&l| l == k).count(), 10);
            }
        }
        assert_ne!(a, generate(&small(8)).unwrap());
    }

    #[test]
    fn invalid_configs() {
        let bad = SynthConfig {
            n_classes: 1,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&bad), Err(Error::Config(_))));
        let bad = SynthConfig {
            clusters: Some(vec![
                ClusterSpec {
                    members: vec![0, 1],
                    shift: None,
                },
                ClusterSpec {
                    members: vec![1],
                    shift: None,
                },
            ]),
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_shift_rotation_is_identity() {
        let shift = Shift::draw(&mut ChaCha8Rng::seed_from_u64(1), 5);
        let (q, off) = shift.realize(5, 0.0);
        assert_eq!(q, Mat::identity(5));
        assert!(off.iter().all(|&o| o == 0.0));
        let (q, _) = shift.realize(5, 1.3);
        let qtq = q.t_matmul(&q);
        assert!(qtq.max_abs_diff(&Mat::identity(5)) < 1e-12);
    }

    #[test]
    fn zero_separation_makes_classes_identical() {
        let cfg = SynthConfig {
            class_separation: 0.0,
            noise_std: 0.0,
            ..small(3)
        };
        let ds = &generate(&cfg).unwrap()[0];
        assert_eq!(ds.trials[0].signal, ds.trials[1].signal);
    }

    #[test]
    fn shift_zero_subjects_closer_than_shifted() {
        let cfg = SynthConfig {
            clusters: Some(vec![
                ClusterSpec {
                    members: vec![0, 1],
                    shift: Some(0.0),
                },
                ClusterSpec {
                    members: vec![2],
                    shift: Some(1.0),
                },
            ]),
            ..small(11)
        };
        let data = generate(&cfg).unwrap();
        let embedder = StubEmbedder::new(4, 16, 5).unwrap();
        let e: Vec<_> = data.iter().map(|d| embedder.embed(d).unwrap()).collect();
        let k = KernelConfig::default();
        let near = cs_divergence(&e[0].vectors, &e[1].vectors, &k).unwrap().value;
        let far = cs_divergence(&e[0].vectors, &e[2].vectors, &k).unwrap().value;
        assert!(near < far, "{near} vs {far}");
    }

    #[test]
    fn planted_clusters_visible_in_divergence_matrix() {
        let mut wins = 0;
        for seed in 0..10 {
            let cfg = SynthConfig {
                n_subjects: 6,
                trials_per_class: 16,
                clusters: Some(vec![
                    ClusterSpec {
                        members: vec![0, 1, 2],
                        shift: None,
                    },
                    ClusterSpec {
                        members: vec![3, 4, 5],
                        shift: None,
                    },
                ]),
                seed,
                ..SynthConfig::default()
            };
            let data = generate(&cfg).unwrap();
            let embedder = StubEmbedder::new(cfg.channels, 32, seed).unwrap();
            let e: Vec<_> = data.iter().map(|d| embedder.embed(d).unwrap()).collect();
            let d = divergence_matrix(&e, &KernelConfig::default()).unwrap();
            let (mut intra, mut inter, mut ni, mut no) = (0.0, 0.0, 0, 0);
            for a in 0..6 {
                for b in (a + 1)..6 {
                    if (a < 3) == (b < 3) {
                        intra += d[(a, b)];
                        ni += 1;
                    } else {
                        inter += d[(a, b)];
                        no += 1;
                    }
                }
            }
            if intra / ni as f64 <= inter / no as f64 {
                wins += 1;
            }
        }
        assert!(wins >= 9, "{wins}/10");
    }

    #[test]
    fn embedding_of_constant_signal_is_linear() {
        let embedder = StubEmbedder::new(2, 8, 3).unwrap();
        let ones = Mat::filled(2, 200, 1.0);
        let v1 = embedder.embed_trial(&ones).unwrap();
        let v3 = embedder.embed_trial(&ones.scale(3.0)).unwrap();
        for (a, b) in v1.iter().zip(&v3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
        let colsum: Vec<f64> = (0..8)
            .map(|j| (0..400).map(|i| embedder.projection[(i, j)]).sum())
            .collect();
        for (a, b) in v1.iter().zip(&colsum) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn short_trials_need_padding() {
        let mut embedder = StubEmbedder::new(2, 4, 0).unwrap();
        let short = Mat::filled(2, 150, 1.0);
        assert!(matches!(embedder.embed_trial(&short), Err(Error::Shape(_))));
        embedder.zero_pad = true;
        assert!(embedder.embed_trial(&short).is_ok());

        // trailing partial patch is dropped without padding
        embedder.zero_pad = false;
        let mut long = Mat::filled(2, 250, 1.0);
        let head = embedder.embed_trial(&long).unwrap();
        for ch in 0..2 {
            long.row_mut(ch)[200..].iter_mut().for_each(|v| *v = 9.0);
        }
        assert_eq!(head, embedder.embed_trial(&long).unwrap());
    }

    #[test]
    fn embedding_commutes_with_trial_order() {
        let ds = generate(&small(2)).unwrap().remove(0);
        let mut rev = ds.clone();
        rev.trials.reverse();
        let a = stub_embed(&ds, 12, 1).unwrap();
        let b = stub_embed(&rev, 12, 1).unwrap();
        let n = ds.len();
        for i in 0..n {
            assert_eq!(a.vectors.row(i), b.vectors.row(n - 1 - i));
        }
    }
}
