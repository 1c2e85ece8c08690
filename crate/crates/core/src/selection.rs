//! Source-subject selection from embedding-level CS divergences, greedy
//! compact-subset search and classical MDS for distance visualisation.

use serde::{Deserialize, Serialize};

use crate::divergence::cs_divergence;
use crate::error::{Error, Result};
use crate::kernels::KernelConfig;
use crate::numerics::{sym_eig_psd, Mat};

/// Per-trial embedding vectors of one subject plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectEmbedding {
    pub subject_id: String,
    /// n_e × d_e matrix, one row per trial.
    pub vectors: Mat,
    pub aggregate: Vec<f64>,
}

impl SubjectEmbedding {
    pub fn new(subject_id: impl Into<String>, vectors: Mat) -> Result<Self> {
        let subject_id = subject_id.into();
        let aggregate = aggregate_embedding(&vectors).map_err(|e| match e {
            Error::SampleSize(msg) => Error::SampleSize(format!("subject {subject_id}: {msg}")),
            other => other,
        })?;
        Ok(Self {
            subject_id,
            vectors,
            aggregate,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Mean-pools trial vectors into one subject vector.
pub fn aggregate_embedding(per_trial: &Mat) -> Result<Vec<f64>> {
    if per_trial.rows() == 0 {
        return Err(Error::SampleSize("no embedding vectors to aggregate".into()));
    }
    Ok(per_trial.row_mean())
}

/// Symmetric matrix of CS divergences between the subjects' embedding
/// vector-sets.
pub fn divergence_matrix(embeddings: &[SubjectEmbedding], kcfg: &KernelConfig) -> Result<Mat> {
    if embeddings.len() < 2 {
        return Err(Error::SampleSize(format!(
            "divergence matrix needs at least 2 subjects, got {}",
            embeddings.len()
        )));
    }
    for e in embeddings {
        if e.vectors.rows() < 2 {
            return Err(Error::SampleSize(format!(
                "subject {} has {} embedding vectors, need at least 2",
                e.subject_id,
                e.vectors.rows()
            )));
        }
    }
    let n = embeddings.len();
    let mut d = Mat::zeros(n, n);
    for a in 0..n {
        for b in (a + 1)..n {
            let v = cs_divergence(&embeddings[a].vectors, &embeddings[b].vectors, kcfg)?.value;
            d[(a, b)] = v;
            d[(b, a)] = v;
        }
    }
    Ok(d)
}

/// Threshold subset for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct PercentileSelection {
    pub threshold: f64,
    /// Indices into the distance vector, ascending.
    pub selected: Vec<usize>,
    /// No distance was strictly below the threshold; the nearest source was
    /// taken instead.
    pub fallback_used: bool,
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(q/100 · n)` of
/// the sorted list.
pub fn nearest_rank_percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::SampleSize("percentile of an empty list".into()));
    }
    if !(q > 0.0 && q <= 100.0) {
        return Err(Error::Parameter(format!("percentile must lie in (0, 100], got {q}")));
    }
    let n = values.len();
    let rank = ((q * n as f64) / 100.0).ceil() as usize;
    let rank = rank.clamp(1, n);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[rank - 1])
}

/// Keeps the sources whose distance to the target is strictly below the
/// nearest-rank `q`-th percentile of all distances.
pub fn select_by_percentile(dists: &[f64], q: f64) -> Result<PercentileSelection> {
    if let Some(d) = dists.iter().find(|d| !d.is_finite()) {
        return Err(Error::Numeric(format!("non-finite source distance {d}")));
    }
    let threshold = nearest_rank_percentile(dists, q)?;
    let mut selected: Vec<usize> = (0..dists.len()).filter(|&i| dists[i] < threshold).collect();
    let fallback_used = selected.is_empty();
    if fallback_used {
        // first index among the minima
        let nearest = (0..dists.len())
            .min_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)))
            .unwrap_or(0);
        selected.push(nearest);
    }
    Ok(PercentileSelection {
        threshold,
        selected,
        fallback_used,
    })
}

/// Full selection record for one target subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub target: String,
    pub q: f64,
    pub delta: f64,
    /// Selected source ids in subject order.
    pub selected: Vec<String>,
    pub fallback_used: bool,
    /// Candidate source ids and their distances to the target.
    pub sources: Vec<String>,
    pub distances: Vec<f64>,
    #[serde(skip)]
    pub subject_ids: Vec<String>,
    #[serde(skip)]
    pub distance_matrix: Option<Mat>,
}

/// Stage-1 selection: divergence matrix over all subjects, then the
/// percentile threshold on the target's row.
pub fn select_sources(
    embeddings: &[SubjectEmbedding],
    target_id: &str,
    kcfg: &KernelConfig,
    q: f64,
) -> Result<SelectionResult> {
    let matrix = divergence_matrix(embeddings, kcfg)?;
    select_from_matrix(embeddings.iter().map(|e| e.subject_id.clone()).collect(), matrix, target_id, q)
}

pub fn select_from_matrix(
    subject_ids: Vec<String>,
    matrix: Mat,
    target_id: &str,
    q: f64,
) -> Result<SelectionResult> {
    let t = subject_ids
        .iter()
        .position(|s| s == target_id)
        .ok_or_else(|| Error::Config(format!("target subject {target_id} has no embedding")))?;
    let sources: Vec<usize> = (0..subject_ids.len()).filter(|&i| i != t).collect();
    let distances: Vec<f64> = sources.iter().map(|&s| matrix[(s, t)]).collect();
    let picked = select_by_percentile(&distances, q)?;
    Ok(SelectionResult {
        target: target_id.to_string(),
        q,
        delta: picked.threshold,
        selected: picked
            .selected
            .iter()
            .map(|&i| subject_ids[sources[i]].clone())
            .collect(),
        fallback_used: picked.fallback_used,
        sources: sources.iter().map(|&i| subject_ids[i].clone()).collect(),
        distances,
        subject_ids,
        distance_matrix: Some(matrix),
    })
}

fn check_distance_matrix(d: &Mat) -> Result<()> {
    if !d.is_square() {
        return Err(Error::Shape(format!(
            "distance matrix must be square, got {}x{}",
            d.rows(),
            d.cols()
        )));
    }
    if !d.is_finite() {
        return Err(Error::Numeric("distance matrix has non-finite entries".into()));
    }
    Ok(())
}

fn subset_total(d: &Mat, subset: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &a) in subset.iter().enumerate() {
        for &b in &subset[i + 1..] {
            total += d[(a, b)];
        }
    }
    total
}

/// Greedy compact subset: start from the subject with the smallest mean
/// distance to all others, then repeatedly add the subject that increases
/// the total intra-subset distance least. Ties go to the lowest index.
pub fn greedy_min_distance_subset(d: &Mat, k: usize) -> Result<Vec<usize>> {
    check_distance_matrix(d)?;
    let n = d.rows();
    if k < 2 || k > n {
        return Err(Error::Parameter(format!("subset size {k} outside 2..={n}")));
    }
    let row_means: Vec<f64> = d.row_sums().iter().map(|s| s / n as f64).collect();
    let seed = (0..n)
        .min_by(|&a, &b| row_means[a].total_cmp(&row_means[b]).then(a.cmp(&b)))
        .unwrap_or(0);
    let mut chosen = vec![seed];
    let mut in_set = vec![false; n];
    in_set[seed] = true;
    while chosen.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for c in (0..n).filter(|&c| !in_set[c]) {
            let increase = chosen.iter().fold(0.0, |acc, &m| acc + d[(c, m)]);
            if best.is_none_or(|(b, _)| increase < b) {
                best = Some((increase, c));
            }
        }
        let (_, c) = best.expect("k <= n leaves a candidate");
        chosen.push(c);
        in_set[c] = true;
    }
    Ok(chosen)
}

/// Total pairwise distance inside a subset.
pub fn subset_total_distance(d: &Mat, subset: &[usize]) -> f64 {
    subset_total(d, subset)
}

#[derive(Debug, Clone)]
pub struct MdsCoordinates {
    /// n × dims coordinates.
    pub coords: Mat,
    /// Eigenvalues of the double-centred matrix used, descending.
    pub eigenvalues: Vec<f64>,
    /// Fewer than `dims` positive eigenvalues; missing axes are zero.
    pub degenerate: bool,
}

/// Classical MDS: `B = -½ J D² J`, coordinates `V · diag(√max(λ, 0))` from
/// the top eigenpairs of `B`.
pub fn mds_coordinates(d: &Mat, dims: usize) -> Result<MdsCoordinates> {
    check_distance_matrix(d)?;
    if d.data().iter().any(|v| *v < 0.0) {
        return Err(Error::Parameter("distance matrix has negative entries".into()));
    }
    let n = d.rows();
    if dims == 0 {
        return Err(Error::Parameter("MDS needs at least one dimension".into()));
    }
    let sq = d.map(|v| v * v);
    let row_means: Vec<f64> = sq.row_sums().iter().map(|s| s / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let mut b = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // D² is symmetric, so column means equal row means
            b[(i, j)] = -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand);
        }
    }
    let eig = sym_eig_psd(&b)?;
    let scale = eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut coords = Mat::zeros(n, dims);
    let mut eigenvalues = Vec::with_capacity(dims);
    let mut degenerate = false;
    for axis in 0..dims {
        let Some(k) = n.checked_sub(axis + 1) else {
            degenerate = true;
            eigenvalues.push(0.0);
            continue;
        };
        let lambda = eig.values[k];
        eigenvalues.push(lambda);
        if lambda <= 1e-12 * scale {
            degenerate = true;
            continue;
        }
        let root = lambda.sqrt();
        for i in 0..n {
            coords[(i, axis)] = eig.vectors[(i, k)] * root;
        }
    }
    Ok(MdsCoordinates {
        coords,
        eigenvalues,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_set(rows: usize, cols: usize, shift: f64, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|z: f64| z + shift)
            .collect();
        Mat::new(rows, cols, data).unwrap()
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_embedding(&Mat::from_rows(&[[1.5, -2.0]]).unwrap()).unwrap(), vec![1.5, -2.0]);
        assert_eq!(
            aggregate_embedding(&Mat::from_rows(&[[0.0, 0.0], [2.0, 4.0]]).unwrap()).unwrap(),
            vec![1.0, 2.0]
        );
        assert!(aggregate_embedding(&Mat::zeros(0, 3)).is_err());

        let m = gaussian_set(100, 5, 0.3, 1);
        let agg = aggregate_embedding(&m).unwrap();
        for c in 0..5 {
            let direct: f64 = (0..100).map(|r| m[(r, c)]).sum::<f64>() / 100.0;
            assert!((agg[c] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_matrix_examples() {
        let same = gaussian_set(20, 2, 0.0, 2);
        let e = vec![
            SubjectEmbedding::new("a", same.clone()).unwrap(),
            SubjectEmbedding::new("b", same).unwrap(),
        ];
        let d = divergence_matrix(&e, &KernelConfig::default()).unwrap();
        assert!(d[(0, 1)].abs() < 1e-12);

        let e = vec![
            SubjectEmbedding::new("1", gaussian_set(60, 2, 0.0, 3)).unwrap(),
            SubjectEmbedding::new("2", gaussian_set(60, 2, 1.0, 4)).unwrap(),
            SubjectEmbedding::new("3", gaussian_set(60, 2, 5.0, 5)).unwrap(),
        ];
        let d = divergence_matrix(&e, &KernelConfig::default()).unwrap();
        assert_eq!(d, d.transpose());
        assert!(d[(0, 1)] < d[(0, 2)]);
        for i in 0..3 {
            assert_eq!(d[(i, i)], 0.0);
        }

        // no cross-subject state: a sub-matrix equals recomputation
        let sub = divergence_matrix(&[e[0].clone(), e[2].clone()], &KernelConfig::default()).unwrap();
        assert_eq!(sub[(0, 1)], d[(0, 2)]);
    }

    #[test]
    fn divergence_matrix_names_small_subject() {
        let e = vec![
            SubjectEmbedding::new("ok", gaussian_set(5, 2, 0.0, 6)).unwrap(),
            SubjectEmbedding::new("tiny", gaussian_set(1, 2, 0.0, 7)).unwrap(),
        ];
        let err = divergence_matrix(&e, &KernelConfig::default()).unwrap_err();
        assert!(err.to_string().contains("tiny"));
    }

    #[test]
    fn percentile_examples() {
        let s = select_by_percentile(&[1.0, 2.0, 3.0, 4.0], 50.0).unwrap();
        assert_eq!(s.threshold, 2.0);
        assert_eq!(s.selected, vec![0]);
        assert!(!s.fallback_used);

        let s = select_by_percentile(&[2.0, 2.0, 2.0], 50.0).unwrap();
        assert!(s.fallback_used);
        assert_eq!(s.selected, vec![0]);

        let s = select_by_percentile(&[1.0, 2.0, 3.0, 4.0], 100.0).unwrap();
        assert_eq!(s.threshold, 4.0);
        assert_eq!(s.selected, vec![0, 1, 2]);

        assert!(select_by_percentile(&[], 50.0).is_err());
        assert!(select_by_percentile(&[1.0], 0.0).is_err());
    }

    #[test]
    fn stricter_percentile_never_selects_more() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let n = rng.random_range(1..30);
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
            let a = select_by_percentile(&d, 25.0).unwrap();
            let b = select_by_percentile(&d, 50.0).unwrap();
            assert!(a.selected.len() <= b.selected.len().max(1));
        }
    }

    #[test]
    fn select_sources_by_id() {
        let e: Vec<_> = [0.0, 0.2, 3.0, 0.1, 4.0]
            .iter()
            .enumerate()
            .map(|(i, s)| SubjectEmbedding::new(format!("s{i}"), gaussian_set(40, 2, *s, 10 + i as u64)).unwrap())
            .collect();
        let r = select_sources(&e, "s0", &KernelConfig::default(), 50.0).unwrap();
        assert_eq!(r.sources, vec!["s1", "s2", "s3", "s4"]);
        assert_eq!(r.selected.len(), 1);
        assert!(select_sources(&e, "nobody", &KernelConfig::default(), 50.0).is_err());
    }

    fn line_matrix(points: &[f64]) -> Mat {
        let n = points.len();
        let mut d = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                d[(i, j)] = (points[i] - points[j]).abs();
            }
        }
        d
    }

    #[test]
    fn greedy_examples() {
        let d = line_matrix(&[0.0, 1.0, 10.0]);
        let mut g = greedy_min_distance_subset(&d, 2).unwrap();
        g.sort();
        assert_eq!(g, vec![0, 1]);

        let d = line_matrix(&[3.0, 0.0, 1.0, 7.0]);
        let g = greedy_min_distance_subset(&d, 4).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g, greedy_min_distance_subset(&d, 4).unwrap());

        assert!(greedy_min_distance_subset(&d, 1).is_err());
        assert!(greedy_min_distance_subset(&d, 5).is_err());
    }

    #[test]
    fn mds_two_points() {
        let d = Mat::from_rows(&[[0.0, 2.0], [2.0, 0.0]]).unwrap();
        let m = mds_coordinates(&d, 2).unwrap();
        assert!((m.coords[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((m.coords[(0, 0)] + m.coords[(1, 0)]).abs() < 1e-12);
        assert!(m.coords[(0, 1)].abs() < 1e-12);
        assert!(m.degenerate);
    }

    #[test]
    fn mds_equilateral() {
        let d = Mat::from_rows(&[[0.0, 3.0, 3.0], [3.0, 0.0, 3.0], [3.0, 3.0, 0.0]]).unwrap();
        let m = mds_coordinates(&d, 2).unwrap();
        assert!(!m.degenerate);
        for i in 0..3 {
            for j in 0..3 {
                let dx = m.coords[(i, 0)] - m.coords[(j, 0)];
                let dy = m.coords[(i, 1)] - m.coords[(j, 1)];
                assert!(((dx * dx + dy * dy).sqrt() - d[(i, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn mds_invariant_under_relabeling() {
        let pts: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.5], [3.0, -1.0], [2.0, 2.0]];
        let n = pts.len();
        let dist = |order: &[usize]| {
            let mut d = Mat::zeros(n, n);
            for (i, &a) in order.iter().enumerate() {
                for (j, &b) in order.iter().enumerate() {
                    let (p, q) = (pts[a], pts[b]);
                    d[(i, j)] = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                }
            }
            d
        };
        let order = [2, 0, 3, 1];
        let a = mds_coordinates(&dist(&[0, 1, 2, 3]), 2).unwrap().coords;
        let b = mds_coordinates(&dist(&order), 2).unwrap().coords;
        // pairwise distances of the embeddings agree after relabeling
        for i in 0..n {
            for j in 0..n {
                let da = ((a[(order[i], 0)] - a[(order[j], 0)]).powi(2)
                    + (a[(order[i], 1)] - a[(order[j], 1)]).powi(2))
                .sqrt();
                let db = ((b[(i, 0)] - b[(j, 0)]).powi(2) + (b[(i, 1)] - b[(j, 1)]).powi(2)).sqrt();
                assert!((da - db).abs() < 1e-8);
            }
        }
    }
}
