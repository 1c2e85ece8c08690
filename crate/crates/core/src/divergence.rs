//! Empirical Cauchy–Schwarz (CS) and conditional CS divergence estimators.
//!
//! Two evaluation paths share each formula: a streaming path on plain
//! matrices that never materialises Gram matrices (used for selection,
//! source weighting and reporting) and a tape path that builds the same
//! expression from differentiable nodes (used inside training losses).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{KernelConfig, ResolvedKernel};
use crate::numerics::{sq_dist, sym_eig_psd, Mat, Tape, Var};

/// Floor applied to log arguments and to Gram row sums.
pub const LOG_FLOOR: f64 = 1e-12;
/// Raw CS values below `-NEGATIVE_TOL` indicate a numerical problem.
pub const NEGATIVE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceValue {
    /// Non-negative value in nats (the raw value clamped at zero).
    pub value: f64,
    /// Value before clamping at zero.
    pub raw: f64,
    pub n_source: usize,
    pub n_target: usize,
    /// Feature-kernel bandwidth(s).
    pub bandwidths: Vec<f64>,
    /// Output-kernel bandwidth(s); empty for the unconditional estimator.
    pub output_bandwidths: Vec<f64>,
    /// A log argument or Gram row sum hit [`LOG_FLOOR`].
    pub clamped: bool,
    /// The raw value was below `-NEGATIVE_TOL`.
    pub negative: bool,
}

fn check_samples(what: &str, m: &Mat) -> Result<()> {
    if m.rows() < 2 {
        return Err(Error::SampleSize(format!(
            "{what} needs at least 2 samples, got {}",
            m.rows()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Numeric(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn check_dims(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "{what}: dimension {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    Ok(())
}

/// Total order on sample sets, used to evaluate `D(S, T)` and `D(T, S)`
/// along the same summation path.
fn canonical_order(a: &Mat, b: &Mat) -> std::cmp::Ordering {
    a.shape().cmp(&b.shape()).then_with(|| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Mean of the Gram matrix `K(A, A)`, walking the upper triangle.
fn self_gram_mean(a: &Mat, k: &ResolvedKernel) -> f64 {
    let n = a.rows();
    let diag = k.eval_sq(0.0);
    let mut off = 0.0;
    for i in 0..n {
        let ai = a.row(i);
        let mut row = 0.0;
        for j in (i + 1)..n {
            row += k.eval(ai, a.row(j));
        }
        off += row;
    }
    (2.0 * off + n as f64 * diag) / (n * n) as f64
}

fn cross_gram_mean(a: &Mat, b: &Mat, k: &ResolvedKernel) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let ai = a.row(i);
        let mut row = 0.0;
        for j in 0..b.rows() {
            row += k.eval(ai, b.row(j));
        }
        total += row;
    }
    total / (a.rows() * b.rows()) as f64
}

/// Empirical CS divergence between the samples `s` (M×d) and `t` (N×d):
///
/// `log mean(K^s) + log mean(K^t) - 2 log mean(K^{st})`.
pub fn cs_divergence(s: &Mat, t: &Mat, kcfg: &KernelConfig) -> Result<DivergenceValue> {
    check_samples("source sample set", s)?;
    check_samples("target sample set", t)?;
    check_dims(s, t, "cs divergence")?;
    let (a, b) = match canonical_order(s, t) {
        std::cmp::Ordering::Greater => (t, s),
        _ => (s, t),
    };
    let kernel = kcfg.resolve(a, b)?;
    let mut out = cs_divergence_ordered(a, b, &kernel);
    out.n_source = s.rows();
    out.n_target = t.rows();
    Ok(out)
}

/// As [`cs_divergence`] with a pre-resolved kernel.
pub fn cs_divergence_with(s: &Mat, t: &Mat, kernel: &ResolvedKernel) -> Result<DivergenceValue> {
    check_samples("source sample set", s)?;
    check_samples("target sample set", t)?;
    check_dims(s, t, "cs divergence")?;
    let mut out = match canonical_order(s, t) {
        std::cmp::Ordering::Greater => cs_divergence_ordered(t, s, kernel),
        _ => cs_divergence_ordered(s, t, kernel),
    };
    out.n_source = s.rows();
    out.n_target = t.rows();
    Ok(out)
}

fn cs_divergence_ordered(a: &Mat, b: &Mat, kernel: &ResolvedKernel) -> DivergenceValue {
    let means = [
        self_gram_mean(a, kernel),
        self_gram_mean(b, kernel),
        cross_gram_mean(a, b, kernel),
    ];
    let clamped = means.iter().any(|m| *m < LOG_FLOOR);
    let [maa, mbb, mab] = means.map(|m| m.max(LOG_FLOOR).ln());
    let raw = maa + mbb - 2.0 * mab;
    DivergenceValue {
        value: raw.max(0.0),
        raw,
        n_source: a.rows(),
        n_target: b.rows(),
        bandwidths: kernel.sigmas.clone(),
        output_bandwidths: Vec::new(),
        clamped,
        negative: raw < -NEGATIVE_TOL,
    }
}

/// Row-wise statistics of a (feature, output) Gram pair:
/// `Σ_i K_ji` and `Σ_i K_ji L_ji` for every row `j` of the outer set.
fn gram_row_stats(
    z_outer: &Mat,
    y_outer: &Mat,
    z_inner: &Mat,
    y_inner: &Mat,
    kf: &ResolvedKernel,
    ko: &ResolvedKernel,
) -> (Vec<f64>, Vec<f64>) {
    let mut k_sum = Vec::with_capacity(z_outer.rows());
    let mut kl_sum = Vec::with_capacity(z_outer.rows());
    for j in 0..z_outer.rows() {
        let (zj, yj) = (z_outer.row(j), y_outer.row(j));
        let (mut ks, mut kls) = (0.0, 0.0);
        for i in 0..z_inner.rows() {
            let k = kf.eval_sq(sq_dist(zj, z_inner.row(i)));
            let l = ko.eval_sq(sq_dist(yj, y_inner.row(i)));
            ks += k;
            kls += k * l;
        }
        k_sum.push(ks);
        kl_sum.push(kls);
    }
    (k_sum, kl_sum)
}

/// Resolves the feature and output kernels for a conditional divergence.
pub fn resolve_conditional_kernels(
    zs: &Mat,
    ys: &Mat,
    zt: &Mat,
    yt: &Mat,
    kcfg_feat: &KernelConfig,
    kcfg_out: &KernelConfig,
) -> Result<(ResolvedKernel, ResolvedKernel)> {
    Ok((kcfg_feat.resolve(zs, zt)?, kcfg_out.resolve(ys, yt)?))
}

/// Empirical conditional CS divergence between `p_s(y|z)` and `p_t(y|z)`
/// from paired features `Z` and outputs `Y` of both domains.
pub fn ccs_divergence(
    zs: &Mat,
    ys: &Mat,
    zt: &Mat,
    yt: &Mat,
    kcfg_feat: &KernelConfig,
    kcfg_out: &KernelConfig,
) -> Result<DivergenceValue> {
    check_conditional_inputs(zs, ys, zt, yt)?;
    let (kf, ko) = resolve_conditional_kernels(zs, ys, zt, yt, kcfg_feat, kcfg_out)?;
    Ok(ccs_divergence_unchecked(zs, ys, zt, yt, &kf, &ko))
}

/// As [`ccs_divergence`] with pre-resolved kernels.
pub fn ccs_divergence_with(
    zs: &Mat,
    ys: &Mat,
    zt: &Mat,
    yt: &Mat,
    kf: &ResolvedKernel,
    ko: &ResolvedKernel,
) -> Result<DivergenceValue> {
    check_conditional_inputs(zs, ys, zt, yt)?;
    Ok(ccs_divergence_unchecked(zs, ys, zt, yt, kf, ko))
}

fn check_conditional_inputs(zs: &Mat, ys: &Mat, zt: &Mat, yt: &Mat) -> Result<()> {
    check_samples("source features", zs)?;
    check_samples("target features", zt)?;
    for (z, y, what) in [(zs, ys, "source"), (zt, yt, "target")] {
        if z.rows() != y.rows() {
            return Err(Error::Shape(format!(
                "{what}: {} feature rows but {} output rows",
                z.rows(),
                y.rows()
            )));
        }
        if !y.is_finite() {
            return Err(Error::Numeric(format!("{what} outputs contain non-finite values")));
        }
    }
    check_dims(zs, zt, "conditional divergence features")?;
    check_dims(ys, yt, "conditional divergence outputs")
}

fn ccs_divergence_unchecked(
    zs: &Mat,
    ys: &Mat,
    zt: &Mat,
    yt: &Mat,
    kf: &ResolvedKernel,
    ko: &ResolvedKernel,
) -> DivergenceValue {
    // j indexes rows of the outer domain, i the inner sum.
    let (ks, kls) = gram_row_stats(zs, ys, zs, ys, kf, ko);
    let (kt, klt) = gram_row_stats(zt, yt, zt, yt, kf, ko);
    let (kst, klst) = gram_row_stats(zs, ys, zt, yt, kf, ko);
    let (kts, klts) = gram_row_stats(zt, yt, zs, ys, kf, ko);

    let mut clamped = false;
    let mut floor = |v: f64| {
        if v < LOG_FLOOR {
            clamped = true;
            LOG_FLOOR
        } else {
            v
        }
    };
    // Σ_j num_j / (den1_j · den2_j)
    let mut term = |num: &[f64], den1: &[f64], den2: &[f64]| {
        num.iter()
            .zip(den1.iter().zip(den2))
            .fold(0.0, |acc, (n, (a, b))| acc + n / (floor(*a) * floor(*b)))
    };
    let t_s = term(&kls, &ks, &ks);
    let t_t = term(&klt, &kt, &kt);
    let t_st = term(&klst, &ks, &kst);
    let t_ts = term(&klts, &kts, &kt);
    let [l_s, l_t, l_st, l_ts] = [t_s, t_t, t_st, t_ts].map(|v| floor(v).ln());
    // Grouped so that identical domains cancel exactly and the domain swap
    // only reorders a commutative sum.
    let raw = (l_s - l_st) + (l_t - l_ts);
    DivergenceValue {
        value: raw.max(0.0),
        raw,
        n_source: zs.rows(),
        n_target: zt.rows(),
        bandwidths: kf.sigmas.clone(),
        output_bandwidths: ko.sigmas.clone(),
        clamped,
        negative: raw < -NEGATIVE_TOL,
    }
}

/// Differentiable CS divergence between two feature nodes. Returns the raw
/// (unclamped) value as a 1×1 node.
pub fn cs_divergence_var(tape: &mut Tape, s: Var, t: Var, kernel: &ResolvedKernel) -> Result<Var> {
    let kss = kernel.gram_var(tape, s, s)?;
    let ktt = kernel.gram_var(tape, t, t)?;
    let kst = kernel.gram_var(tape, s, t)?;
    let mut log_mean = |k: Var| {
        let m = tape.mean(k);
        let m = tape.clamp_min(m, LOG_FLOOR);
        tape.log(m)
    };
    let (lss, ltt, lst) = (log_mean(kss), log_mean(ktt), log_mean(kst));
    let self_terms = tape.add(lss, ltt)?;
    let cross = tape.scale(lst, 2.0);
    tape.sub(self_terms, cross)
}

/// Differentiable conditional CS divergence. Returns the raw value.
pub fn ccs_divergence_var(
    tape: &mut Tape,
    (zs, ys): (Var, Var),
    (zt, yt): (Var, Var),
    kf: &ResolvedKernel,
    ko: &ResolvedKernel,
) -> Result<Var> {
    let k_s = kf.gram_var(tape, zs, zs)?;
    let l_s = ko.gram_var(tape, ys, ys)?;
    let k_t = kf.gram_var(tape, zt, zt)?;
    let l_t = ko.gram_var(tape, yt, yt)?;
    let k_st = kf.gram_var(tape, zs, zt)?;
    let l_st = ko.gram_var(tape, ys, yt)?;
    let k_ts = kf.gram_var(tape, zt, zs)?;
    let l_ts = ko.gram_var(tape, yt, ys)?;

    let row_stats = |tape: &mut Tape, k: Var, l: Var| -> Result<(Var, Var)> {
        let kl = tape.mul(k, l)?;
        let num = tape.row_sum(kl);
        let den = tape.row_sum(k);
        Ok((num, tape.clamp_min(den, LOG_FLOOR)))
    };
    let (num_s, den_s) = row_stats(tape, k_s, l_s)?;
    let (num_t, den_t) = row_stats(tape, k_t, l_t)?;
    let (num_st, den_st) = row_stats(tape, k_st, l_st)?;
    let (num_ts, den_ts) = row_stats(tape, k_ts, l_ts)?;

    let log_term = |tape: &mut Tape, num: Var, a: Var, b: Var| -> Result<Var> {
        let den = tape.mul(a, b)?;
        let ratio = tape.div(num, den)?;
        let sum = tape.sum(ratio);
        let sum = tape.clamp_min(sum, LOG_FLOOR);
        Ok(tape.log(sum))
    };
    let t_s = log_term(tape, num_s, den_s, den_s)?;
    let t_t = log_term(tape, num_t, den_t, den_t)?;
    let t_st = log_term(tape, num_st, den_s, den_st)?;
    let t_ts = log_term(tape, num_ts, den_ts, den_t)?;
    let a = tape.sub(t_s, t_st)?;
    let b = tape.sub(t_t, t_ts)?;
    tape.add(a, b)
}

/// Closed-form CS divergence between `N(μ1, Σ1)` and `N(μ2, Σ2)`:
/// `-2 log Z12 + log Z11 + log Z22` with `Z_ab = N(μ_a; μ_b, Σ_a + Σ_b)`.
pub fn cs_gaussian_closed_form(mu1: &[f64], cov1: &Mat, mu2: &[f64], cov2: &Mat) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "Gaussian parameters: means {} and {}, covariances {:?} and {:?}",
            d,
            mu2.len(),
            cov1.shape(),
            cov2.shape()
        )));
    }
    let log_z = |ma: &[f64], mb: &[f64], sum: Mat| -> Result<f64> {
        let eig = sym_eig_psd(&sum)?;
        let lmax = eig.values.last().copied().unwrap_or(0.0);
        if eig.values[0] <= 1e-14 * lmax.max(f64::MIN_POSITIVE) {
            return Err(Error::Numeric(format!(
                "covariance sum is singular (smallest eigenvalue {:e})",
                eig.values[0]
            )));
        }
        let delta: Vec<f64> = ma.iter().zip(mb).map(|(a, b)| a - b).collect();
        let mut quad = 0.0;
        let mut log_det = 0.0;
        for (k, lambda) in eig.values.iter().enumerate() {
            let proj = (0..d).fold(0.0, |acc, i| acc + eig.vectors[(i, k)] * delta[i]);
            quad += proj * proj / lambda;
            log_det += lambda.ln();
        }
        Ok(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad))
    };
    let z12 = log_z(mu1, mu2, cov1.add(cov2)?)?;
    let z11 = log_z(mu1, mu1, cov1.add(cov1)?)?;
    let z22 = log_z(mu2, mu2, cov2.add(cov2)?)?;
    Ok(-2.0 * z12 + z11 + z22)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Combine;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, shift: f64, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z + shift
            })
            .collect();
        Mat::new(rows, cols, data).unwrap()
    }

    /// Direct evaluation through materialised Gram matrices.
    fn cs_reference(s: &Mat, t: &Mat, k: &ResolvedKernel) -> f64 {
        let m = |a: &Mat, b: &Mat| k.gram(a, b).unwrap().mean().ln();
        m(s, s) + m(t, t) - 2.0 * m(s, t)
    }

    #[test]
    fn identical_sets_give_zero() {
        let s = random(30, 3, 0.0, 1);
        let v = cs_divergence(&s, &s, &KernelConfig::default()).unwrap();
        assert!(v.raw.abs() < 1e-12);
        assert!(!v.clamped);
    }

    #[test]
    fn symmetric_bit_for_bit() {
        let s = random(25, 2, 0.0, 2);
        let t = random(17, 2, 0.7, 3);
        for cfg in [KernelConfig::default(), KernelConfig::median(), KernelConfig::fixed(0.8)] {
            let a = cs_divergence(&s, &t, &cfg).unwrap();
            let b = cs_divergence(&t, &s, &cfg).unwrap();
            assert_eq!(a.raw.to_bits(), b.raw.to_bits());
            assert_eq!((a.n_source, a.n_target), (25, 17));
            assert_eq!((b.n_source, b.n_target), (17, 25));
        }
    }

    #[test]
    fn streaming_matches_materialised_grams() {
        let s = random(20, 3, 0.0, 4);
        let t = random(15, 3, 0.5, 5);
        let k = KernelConfig::default().resolve(&s, &t).unwrap();
        let v = cs_divergence_with(&s, &t, &k).unwrap();
        assert!((v.raw - cs_reference(&s, &t, &k)).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples() {
        let s = random(1, 2, 0.0, 6);
        let t = random(5, 2, 0.0, 7);
        assert!(matches!(cs_divergence(&s, &t, &KernelConfig::default()), Err(Error::SampleSize(_))));
        assert!(matches!(cs_divergence(&t, &s, &KernelConfig::default()), Err(Error::SampleSize(_))));
    }

    #[test]
    fn far_apart_sets_trigger_clamp() {
        let s = random(5, 1, 0.0, 8);
        let t = random(5, 1, 1e4, 9);
        let v = cs_divergence(&s, &t, &KernelConfig::fixed(0.5)).unwrap();
        assert!(v.clamped);
        assert!(v.value.is_finite() && v.value > 0.0);
    }

    /// Mean Gaussian-kernel value between N(0,1) and N(Δ,1) samples equals
    /// the CS divergence of the densities smoothed by N(0, σ²/2), so the
    /// estimator converges to the closed form with variance 1 + σ²/2.
    #[test]
    fn fixed_bandwidth_converges_to_smoothed_closed_form() {
        let sigma = 1.0;
        let s = random(2000, 1, 0.0, 10);
        let t = random(2000, 1, 1.0, 11);
        let v = cs_divergence(&s, &t, &KernelConfig::fixed(sigma)).unwrap();
        let var = Mat::scalar(1.0 + sigma * sigma / 2.0);
        let oracle = cs_gaussian_closed_form(&[0.0], &var, &[1.0], &var).unwrap();
        assert!((oracle - 1.0 / 3.0).abs() < 1e-12);
        assert!((v.value - oracle).abs() < 0.05, "{} vs {}", v.value, oracle);
    }

    #[test]
    fn median_bandwidth_tracks_smoothed_closed_form() {
        let s = random(2000, 1, 0.0, 12);
        let t = random(2000, 1, 1.0, 13);
        let v = cs_divergence(&s, &t, &KernelConfig::median()).unwrap();
        let sigma = v.bandwidths[0];
        let var = Mat::scalar(1.0 + sigma * sigma / 2.0);
        let oracle = cs_gaussian_closed_form(&[0.0], &var, &[1.0], &var).unwrap();
        assert!((v.value - oracle).abs() < 0.05, "{} vs {}", v.value, oracle);
    }

    #[test]
    fn closed_form_examples() {
        let one = Mat::scalar(1.0);
        assert!(cs_gaussian_closed_form(&[0.0], &one, &[0.0], &one).unwrap().abs() < 1e-14);
        assert!((cs_gaussian_closed_form(&[0.0], &one, &[1.0], &one).unwrap() - 0.5).abs() < 1e-14);
        let four = Mat::scalar(4.0);
        let v = cs_gaussian_closed_form(&[0.0], &one, &[0.0], &four).unwrap();
        assert!((v - (10.0f64 / 8.0).ln()).abs() < 1e-14);
        assert!((v - 0.22314).abs() < 1e-5);
        // equal-variance rule Δ²/(2σ²) in 2-D with isotropic variance 2
        let two = Mat::diag(&[2.0, 2.0]);
        let v = cs_gaussian_closed_form(&[0.0, 0.0], &two, &[3.0, 4.0], &two).unwrap();
        assert!((v - 25.0 / 4.0).abs() < 1e-12);
        assert!(matches!(
            cs_gaussian_closed_form(&[0.0], &Mat::scalar(0.0), &[1.0], &Mat::scalar(0.0)),
            Err(Error::Numeric(_))
        ));
    }

    fn one_hot(rows: usize, class: usize, k: usize) -> Mat {
        let mut m = Mat::zeros(rows, k);
        for i in 0..rows {
            m[(i, class)] = 1.0;
        }
        m
    }

    #[test]
    fn ccs_hand_case() {
        // constant features: every feature Gram entry is exactly 1
        let z = Mat::zeros(2, 3);
        let ys = one_hot(2, 0, 2);
        let yt = one_hot(2, 1, 2);
        let v = ccs_divergence(&z, &ys, &z, &yt, &KernelConfig::fixed(1e6), &KernelConfig::fixed(1.0))
            .unwrap();
        assert!((v.raw - 2.0).abs() < 1e-9, "{}", v.raw);
    }

    #[test]
    fn ccs_identical_domains_exact_zero() {
        let z = random(12, 3, 0.0, 20);
        let y = random(12, 2, 0.0, 21);
        let v = ccs_divergence(&z, &y, &z, &y, &KernelConfig::default(), &KernelConfig::default())
            .unwrap();
        assert_eq!(v.raw, 0.0);
    }

    #[test]
    fn ccs_shape_errors() {
        let z = random(5, 3, 0.0, 22);
        let y = random(4, 2, 0.0, 23);
        let err = ccs_divergence(&z, &y, &z, &y, &KernelConfig::default(), &KernelConfig::default());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn tape_paths_match_streaming() {
        let (zs, ys) = (random(9, 3, 0.0, 30), random(9, 2, 0.0, 31));
        let (zt, yt) = (random(7, 3, 0.4, 32), random(7, 2, 0.3, 33));
        for combine in [Combine::Average, Combine::Sum, Combine::Max] {
            let cfg = KernelConfig { combine, ..KernelConfig::default() };
            let (kf, ko) = resolve_conditional_kernels(&zs, &ys, &zt, &yt, &cfg, &cfg).unwrap();
            let mut tape = Tape::new();
            let (a, b, c, d) = (
                tape.leaf(zs.clone()),
                tape.leaf(ys.clone()),
                tape.leaf(zt.clone()),
                tape.leaf(yt.clone()),
            );
            let cs = cs_divergence_var(&mut tape, a, c, &kf).unwrap();
            let ccs = ccs_divergence_var(&mut tape, (a, b), (c, d), &kf, &ko).unwrap();
            let cs_plain = cs_divergence_with(&zs, &zt, &kf).unwrap().raw;
            let ccs_plain = ccs_divergence_with(&zs, &ys, &zt, &yt, &kf, &ko).unwrap().raw;
            assert!((tape.scalar(cs) - cs_plain).abs() < 1e-12);
            assert!((tape.scalar(ccs) - ccs_plain).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn cs_non_negative_and_permutation_invariant(seed in 0u64..10_000, shift in 0.0f64..3.0, rot in 1usize..10) {
            let s = random(12, 2, 0.0, seed);
            let t = random(10, 2, shift, seed + 1);
            let cfg = KernelConfig::default();
            let v = cs_divergence(&s, &t, &cfg).unwrap();
            prop_assert!(v.raw >= -NEGATIVE_TOL);
            let mut perm: Vec<usize> = (0..12).collect();
            perm.rotate_left(rot);
            let w = cs_divergence(&s.select_rows(&perm), &t, &cfg).unwrap();
            prop_assert!((v.raw - w.raw).abs() < 1e-12);
        }

        #[test]
        fn ccs_symmetric_and_permutation_invariant(seed in 0u64..10_000, rot in 1usize..8) {
            let (zs, ys) = (random(8, 2, 0.0, seed), random(8, 2, 0.0, seed + 1));
            let (zt, yt) = (random(8, 2, 0.5, seed + 2), random(8, 2, 1.0, seed + 3));
            let cfg = KernelConfig::default();
            let a = ccs_divergence(&zs, &ys, &zt, &yt, &cfg, &cfg).unwrap();
            let b = ccs_divergence(&zt, &yt, &zs, &ys, &cfg, &cfg).unwrap();
            prop_assert_eq!(a.raw.to_bits(), b.raw.to_bits());
            let mut perm: Vec<usize> = (0..8).collect();
            perm.rotate_left(rot);
            let c = ccs_divergence(&zs.select_rows(&perm), &ys.select_rows(&perm), &zt, &yt, &cfg, &cfg).unwrap();
            prop_assert!((a.raw - c.raw).abs() < 1e-12);
        }
    }
}
