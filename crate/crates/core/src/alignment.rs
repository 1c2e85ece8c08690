//! Trials, per-subject datasets and Euclidean Alignment.

use crate::error::{Error, Result};
use crate::numerics::{inv_sqrt_psd, Mat, DEFAULT_EIG_FLOOR};

/// One C×T signal segment with an optional class label (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub signal: Mat,
    pub label: Option<usize>,
}

impl Trial {
    pub fn new(signal: Mat, label: Option<usize>) -> Self {
        Self { signal, label }
    }

    pub fn channels(&self) -> usize {
        self.signal.rows()
    }

    pub fn samples(&self) -> usize {
        self.signal.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDataset {
    pub subject_id: String,
    pub trials: Vec<Trial>,
    pub n_classes: usize,
    pub ea_applied: bool,
}

impl SubjectDataset {
    /// Validates shapes and labels.
    pub fn new(subject_id: impl Into<String>, trials: Vec<Trial>, n_classes: usize) -> Result<Self> {
        let ds = Self {
            subject_id: subject_id.into(),
            trials,
            n_classes,
            ea_applied: false,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.subject_id;
        if self.n_classes < 2 {
            return Err(Error::Config(format!("subject {id}: need at least 2 classes")));
        }
        let Some(first) = self.trials.first() else {
            return Ok(());
        };
        let (c, t) = first.signal.shape();
        if c < 1 || t < 2 {
            return Err(Error::Shape(format!(
                "subject {id}: trials need C >= 1 and T >= 2, got {c}x{t}"
            )));
        }
        for (i, trial) in self.trials.iter().enumerate() {
            if trial.signal.shape() != (c, t) {
                return Err(Error::Shape(format!(
                    "subject {id}: trial {i} is {:?}, expected {c}x{t}",
                    trial.signal.shape()
                )));
            }
            if let Some(l) = trial.label {
                if l >= self.n_classes {
                    return Err(Error::Config(format!(
                        "subject {id}: trial {i} has label {} outside 1..={}",
                        l + 1,
                        self.n_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.trials.first().map_or(0, Trial::channels)
    }

    pub fn samples(&self) -> usize {
        self.trials.first().map_or(0, Trial::samples)
    }

    /// Every trial carries a label.
    pub fn is_labeled(&self) -> bool {
        !self.trials.is_empty() && self.trials.iter().all(|t| t.label.is_some())
    }

    /// Labels of a fully labelled dataset.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.trials
            .iter()
            .enumerate()
            .map(|(i, t)| {
                t.label.ok_or_else(|| {
                    Error::State(format!("subject {}: trial {i} is unlabeled", self.subject_id))
                })
            })
            .collect()
    }

    /// Copy with every label removed.
    pub fn unlabeled(&self) -> Self {
        let mut out = self.clone();
        out.trials.iter_mut().for_each(|t| t.label = None);
        out
    }

    /// `(1/M) Σ X_i X_iᵀ` without mean-centering.
    pub fn mean_covariance(&self) -> Result<Mat> {
        if self.trials.is_empty() {
            return Err(Error::SampleSize(format!(
                "subject {}: no trials to average",
                self.subject_id
            )));
        }
        let c = self.channels();
        let mut acc = Mat::zeros(c, c);
        for t in &self.trials {
            acc.add_assign(&t.signal.matmul_t(&t.signal));
        }
        Ok(acc.scale(1.0 / self.trials.len() as f64))
    }
}

/// Euclidean Alignment output.
#[derive(Debug, Clone)]
pub struct Aligned {
    pub dataset: SubjectDataset,
    /// `R̄^{-1/2}` applied to every trial.
    pub whitening: Mat,
    /// Eigenvalues of `R̄` raised to the floor (non-zero means `R̄` was
    /// rank-deficient).
    pub floored_eigenvalues: usize,
}

/// Replaces every trial `X_i` by `R̄^{-1/2} X_i` where `R̄` is the mean
/// trial covariance of the subject.
pub fn euclidean_align(ds: &SubjectDataset) -> Result<SubjectDataset> {
    euclidean_align_with_report(ds).map(|a| a.dataset)
}

pub fn euclidean_align_with_report(ds: &SubjectDataset) -> Result<Aligned> {
    if ds.ea_applied {
        return Err(Error::State(format!(
            "subject {}: Euclidean Alignment already applied",
            ds.subject_id
        )));
    }
    let r_bar = ds.mean_covariance()?;
    let inv = inv_sqrt_psd(&r_bar, DEFAULT_EIG_FLOOR)?;
    let trials = ds
        .trials
        .iter()
        .map(|t| Trial {
            signal: inv.matrix.matmul_unchecked(&t.signal),
            label: t.label,
        })
        .collect();
    Ok(Aligned {
        dataset: SubjectDataset {
            subject_id: ds.subject_id.clone(),
            trials,
            n_classes: ds.n_classes,
            ea_applied: true,
        },
        whitening: inv.matrix,
        floored_eigenvalues: inv.floored,
    })
}
