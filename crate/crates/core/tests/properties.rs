use msda_core::adapt::{source_weights, train, ScheduleConfig, TrainConfig};
use msda_core::alignment::euclidean_align;
use msda_core::divergence::{ccs_divergence_var, cs_divergence, cs_divergence_var};
use msda_core::kernels::{KernelConfig, ResolvedKernel};
use msda_core::numerics::{check_gradients, Tape, DEFAULT_FD_STEP};
use msda_core::selection::{
    divergence_matrix, greedy_min_distance_subset, select_by_percentile, subset_total_distance, SubjectEmbedding,
};
use msda_core::synth::{generate, stub_embed, SynthConfig};
use msda_core::Mat;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal_mat(seed: u64, rows: usize, cols: usize, shift: f64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z + shift
        })
        .collect();
    Mat::new(rows, cols, data).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn fixed_unit_bandwidth_median_near_gaussian_value() {
    let values: Vec<f64> = (0..20u64)
        .map(|seed| {
            let s = normal_mat(2 * seed, 2000, 1, 0.0);
            let t = normal_mat(2 * seed + 1, 2000, 1, 1.0);
            cs_divergence(&s, &t, &KernelConfig::fixed(1.0)).unwrap().value
        })
        .collect();
    let med = median(values);
    assert!((med - 0.5).abs() <= 0.1, "median over 20 seeds {med:.4}, need within 0.1 of 0.5");
}

fn flatten(ms: &[&Mat]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.data().to_vec()).collect()
}

fn unflatten(theta: &[f64], shapes: &[(usize, usize)]) -> Vec<Mat> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let m = Mat::new(r, c, theta[offset..offset + r * c].to_vec()).unwrap();
            offset += r * c;
            m
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn divergence_gradients_match_finite_differences(seed in 0u64..1000, n in 3usize..9, d in 1usize..4) {
        let s = normal_mat(seed, n, d, 0.0);
        let t = normal_mat(seed + 7, n + 1, d, 0.8);
        let ys = normal_mat(seed + 11, n, 2, 0.0);
        let yt = normal_mat(seed + 13, n + 1, 2, 0.3);
        let kf = ResolvedKernel::single(1.3).unwrap();
        let ko = ResolvedKernel::single(0.9).unwrap();
        let shapes = [(n, d), (n + 1, d), (n, 2)];

        let cs = |theta: &[f64]| {
            let m = unflatten(theta, &shapes);
            let mut tape = Tape::new();
            let (a, b) = (tape.leaf(m[0].clone()), tape.leaf(m[1].clone()));
            let out = cs_divergence_var(&mut tape, a, b, &kf)?;
            let g = tape.backward(out)?;
            let grad = flatten(&[&g.get_or_zeros(a, n, d), &g.get_or_zeros(b, n + 1, d), &Mat::zeros(n, 2)]);
            Ok((tape.scalar(out), grad))
        };
        let theta = flatten(&[&s, &t, &ys]);
        let report = check_gradients(cs, &theta, DEFAULT_FD_STEP).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "cs: {}", report.max_rel_error);

        let ccs = |theta: &[f64]| {
            let m = unflatten(theta, &shapes);
            let mut tape = Tape::new();
            let (zs, zt, y_s) = (tape.leaf(m[0].clone()), tape.leaf(m[1].clone()), tape.leaf(m[2].clone()));
            let y_t = tape.leaf(yt.clone());
            let out = ccs_divergence_var(&mut tape, (zs, y_s), (zt, y_t), &kf, &ko)?;
            let g = tape.backward(out)?;
            let grad = flatten(&[&g.get_or_zeros(zs, n, d), &g.get_or_zeros(zt, n + 1, d), &g.get_or_zeros(y_s, n, 2)]);
            Ok((tape.scalar(out), grad))
        };
        let report = check_gradients(ccs, &theta, DEFAULT_FD_STEP).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "ccs: {}", report.max_rel_error);
    }

    #[test]
    fn greedy_last_step_is_locally_optimal(seed in 0u64..10_000, n in 3usize..9, k_frac in 0.0f64..1.0) {
        let p = normal_mat(seed, n, 2, 0.0);
        let mut d = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                d[(i, j)] = (0..2).map(|c| (p[(i, c)] - p[(j, c)]).powi(2)).sum::<f64>().sqrt();
            }
        }
        let k = 2 + ((n - 2) as f64 * k_frac) as usize;
        let subset = greedy_min_distance_subset(&d, k).unwrap();
        prop_assert_eq!(subset.len(), k);
        let total = subset_total_distance(&d, &subset);
        for alt in (0..n).filter(|c| !subset.contains(c)) {
            let mut swapped = subset.clone();
            *swapped.last_mut().unwrap() = alt;
            prop_assert!(total <= subset_total_distance(&d, &swapped) + 1e-12);
        }
    }

    #[test]
    fn stricter_percentile_selects_a_subset(d in prop::collection::vec(0.0f64..5.0, 1..40)) {
        let a = select_by_percentile(&d, 25.0).unwrap();
        let b = select_by_percentile(&d, 50.0).unwrap();
        prop_assert!(a.selected.len() <= b.selected.len());
        prop_assert!(a.selected.iter().all(|i| b.selected.contains(i)));
    }

    #[test]
    fn weights_sum_to_one_and_reverse_divergence_order(d in prop::collection::vec(0.0f64..50.0, 1..12)) {
        let w = source_weights(&d).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d[i] > d[j] {
                    prop_assert!(w[i] < w[j]);
                }
            }
        }
    }
}

#[test]
fn divergence_matrix_has_no_cross_subject_state() {
    let embeddings: Vec<SubjectEmbedding> = (0..5)
        .map(|i| SubjectEmbedding::new(format!("S{i}"), normal_mat(i, 12 + i as usize, 3, i as f64 * 0.3)).unwrap())
        .collect();
    let kcfg = KernelConfig::default();
    let full = divergence_matrix(&embeddings, &kcfg).unwrap();
    let pick = [4usize, 1, 3];
    let subset: Vec<SubjectEmbedding> = pick.iter().map(|&i| embeddings[i].clone()).collect();
    let sub = divergence_matrix(&subset, &kcfg).unwrap();
    for (a, &i) in pick.iter().enumerate() {
        for (b, &j) in pick.iter().enumerate() {
            assert_eq!(sub[(a, b)], full[(i, j)]);
        }
    }
}

#[test]
fn larger_subject_shift_spreads_subjects_apart() {
    let median_divergence = |shift: f64| {
        let per_seed: Vec<f64> = (0..10u64)
            .map(|seed| {
                let cfg = SynthConfig { subject_shift: shift, seed, ..SynthConfig::default() };
                let data = generate(&cfg).unwrap();
                let emb: Vec<SubjectEmbedding> = data.iter().map(|d| stub_embed(d, 200, seed).unwrap()).collect();
                let m = divergence_matrix(&emb, &KernelConfig::default()).unwrap();
                let n = m.rows();
                median((0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect())
            })
            .collect();
        median(per_seed)
    };
    let m: Vec<f64> = [0.0, 0.5, 1.0].into_iter().map(median_divergence).collect();
    assert!(m[0] < m[1] && m[1] < m[2], "{m:?}");
}

fn small_training(n_sources: usize) -> msda_core::adapt::TrainOutcome {
    let data = generate(&SynthConfig {
        n_subjects: n_sources + 1,
        trials_per_class: 6,
        channels: 3,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let aligned: Vec<_> = data.iter().map(|d| euclidean_align(d).unwrap()).collect();
    let cfg = TrainConfig {
        schedule: ScheduleConfig { epochs: 4, offset: 2.0, ..ScheduleConfig::default() },
        batch_size: 8,
        ..TrainConfig::default()
    };
    train(&aligned[1..], &aligned[0], &cfg).unwrap()
}

#[test]
fn every_epoch_recomposes_and_weights_are_normalised() {
    let outcome = small_training(3);
    assert_eq!(outcome.log.len(), 4);
    for e in &outcome.log {
        assert!((e.losses.total - e.losses.recomposed_total()).abs() <= 1e-10);
        assert_eq!(e.weights.len(), 3);
        assert!((e.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_source_has_no_source_source_terms() {
    let outcome = small_training(1);
    for e in &outcome.log {
        assert_eq!(e.weights, vec![1.0]);
        assert_eq!((e.losses.fla_ss, e.losses.dla_ss), (0.0, 0.0));
    }
}
