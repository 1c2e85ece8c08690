//! End-to-end runs: Euclidean Alignment, source selection and adaptation for
//! one target or every subject in turn.

use serde::{Deserialize, Serialize};

use crate::adapt::{train, TrainConfig, TrainOutcome};
use crate::alignment::{euclidean_align, SubjectDataset};
use crate::error::{Error, Result};
use crate::kernels::KernelConfig;
use crate::selection::{select_sources, SelectionResult, SubjectEmbedding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Selection percentile.
    pub q: f64,
    /// Skip selection and train on every other subject.
    pub all_sources: bool,
    pub euclidean_alignment: bool,
    pub selection_kernel: KernelConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            q: 50.0,
            all_sources: false,
            euclidean_alignment: true,
            selection_kernel: KernelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TargetRun {
    pub target: String,
    pub selection: Option<SelectionResult>,
    pub outcome: TrainOutcome,
}

/// Applies Euclidean Alignment to every subject, when enabled.
pub fn prepare(datasets: &[SubjectDataset], ea: bool) -> Result<Vec<SubjectDataset>> {
    if ea {
        datasets.iter().map(euclidean_align).collect()
    } else {
        Ok(datasets.to_vec())
    }
}

fn find<'a>(datasets: &'a [SubjectDataset], id: &str) -> Result<&'a SubjectDataset> {
    datasets
        .iter()
        .find(|d| d.subject_id == id)
        .ok_or_else(|| Error::Config(format!("unknown subject {id}")))
}

/// Trains on the named sources of already-prepared datasets.
pub fn train_on(
    prepared: &[SubjectDataset],
    source_ids: &[String],
    target_id: &str,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let target = find(prepared, target_id)?;
    let sources = source_ids
        .iter()
        .map(|id| {
            if id == target_id {
                return Err(Error::Config(format!("target {id} cannot also be a source")));
            }
            find(prepared, id).cloned()
        })
        .collect::<Result<Vec<_>>>()?;
    train(&sources, target, cfg)
}

/// Selection (unless `all_sources`) followed by training for one target.
pub fn run_target(
    prepared: &[SubjectDataset],
    embeddings: Option<&[SubjectEmbedding]>,
    target_id: &str,
    cfg: &PipelineConfig,
) -> Result<TargetRun> {
    let (selection, sources) = if cfg.all_sources {
        let ids = prepared
            .iter()
            .map(|d| d.subject_id.clone())
            .filter(|id| id != target_id)
            .collect();
        (None, ids)
    } else {
        let embeddings =
            embeddings.ok_or_else(|| Error::Config("source selection needs subject embeddings".into()))?;
        for d in prepared {
            if !embeddings.iter().any(|e| e.subject_id == d.subject_id) {
                return Err(Error::Config(format!("subject {} has no embedding", d.subject_id)));
            }
        }
        let sel = select_sources(embeddings, target_id, &cfg.selection_kernel, cfg.q)?;
        let ids = sel.selected.clone();
        (Some(sel), ids)
    };
    let outcome = train_on(prepared, &sources, target_id, &cfg.train)?;
    Ok(TargetRun {
        target: target_id.to_string(),
        selection,
        outcome,
    })
}

/// Leave-one-subject-out: every subject is the target once. Targets run on
/// separate threads; results keep subject order.
pub fn loso(
    datasets: &[SubjectDataset],
    embeddings: Option<&[SubjectEmbedding]>,
    cfg: &PipelineConfig,
) -> Result<Vec<TargetRun>> {
    let prepared = prepare(datasets, cfg.euclidean_alignment)?;
    let prepared = &prepared;
    std::thread::scope(|scope| {
        let handles: Vec<_> = prepared
            .iter()
            .map(|d| scope.spawn(move || run_target(prepared, embeddings, &d.subject_id, cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoSummary {
    pub accuracy: MeanStd,
    pub kappa: MeanStd,
}

pub fn summarize(runs: &[TargetRun]) -> Result<LosoSummary> {
    let metrics = runs
        .iter()
        .map(|r| {
            r.outcome
                .target_metrics
                .as_ref()
                .ok_or_else(|| Error::State(format!("target {} has no evaluation labels", r.target)))
        })
        .collect::<Result<Vec<_>>>()?;
    if metrics.is_empty() {
        return Err(Error::SampleSize("no runs to summarize".into()));
    }
    let acc: Vec<f64> = metrics.iter().map(|m| m.accuracy).collect();
    let kappa: Vec<f64> = metrics.iter().map(|m| m.kappa).collect();
    Ok(LosoSummary {
        accuracy: MeanStd::of(&acc),
        kappa: MeanStd::of(&kappa),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::ScheduleConfig;
    use crate::synth::{generate, stub_embed, SynthConfig};

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 1.0).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }

    #[test]
    fn small_loso_runs_every_target() {
        let data = generate(&SynthConfig {
            n_subjects: 3,
            trials_per_class: 4,
            channels: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let emb: Vec<_> = data.iter().map(|d| stub_embed(d, 8, 0).unwrap()).collect();
        let cfg = PipelineConfig {
            q: 100.0,
            train: TrainConfig {
                schedule: ScheduleConfig {
                    epochs: 2,
                    ..ScheduleConfig::default()
                },
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        };
        let runs = loso(&data, Some(&emb), &cfg).unwrap();
        assert_eq!(runs.len(), 3);
        for r in &runs {
            let sel = r.selection.as_ref().unwrap();
            assert!(!sel.selected.contains(&r.target));
            assert_eq!(r.outcome.log.len(), 2);
        }
        summarize(&runs).unwrap();
    }

    #[test]
    fn target_cannot_be_source() {
        let data = generate(&SynthConfig {
            n_subjects: 2,
            trials_per_class: 2,
            channels: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let ids = vec!["S01".to_string()];
        assert!(train_on(&data, &ids, "S01", &TrainConfig::default()).is_err());
    }
}
