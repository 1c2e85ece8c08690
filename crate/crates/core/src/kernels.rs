//! Gaussian kernel Gram matrices and bandwidth selection.
//!
//! `κ_σ(z, z') = exp(-‖z - z'‖² / (2σ²))`. Bandwidths are either fixed, the
//! median pairwise distance of the pooled samples, or a set of multiples of
//! that median whose kernels are combined entrywise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pairwise_sq_dists, sq_dist, Mat, Tape, Var};

pub const DEFAULT_MULTI_SCALES: [f64; 3] = [0.5, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    Fixed(f64),
    Median,
    Multi,
}

/// Entrywise combination rule for multi-bandwidth kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Average,
    Sum,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub mode: BandwidthMode,
    pub multi_scales: Vec<f64>,
    pub combine: Combine,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self::multi(DEFAULT_MULTI_SCALES.to_vec())
    }
}

impl KernelConfig {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            mode: BandwidthMode::Fixed(sigma),
            multi_scales: DEFAULT_MULTI_SCALES.to_vec(),
            combine: Combine::Average,
        }
    }

    pub fn median() -> Self {
        Self {
            mode: BandwidthMode::Median,
            ..Self::fixed(1.0)
        }
    }

    pub fn multi(scales: Vec<f64>) -> Self {
        Self {
            mode: BandwidthMode::Multi,
            multi_scales: scales,
            combine: Combine::Average,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let BandwidthMode::Fixed(s) = self.mode {
            check_sigma(s)?;
        }
        if self.mode == BandwidthMode::Multi {
            if self.multi_scales.is_empty() {
                return Err(Error::Parameter("multi-kernel scale list is empty".into()));
            }
            if let Some(s) = self.multi_scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
                return Err(Error::Parameter(format!("multi-kernel scale {s} is not positive")));
            }
        }
        Ok(())
    }

    /// Whether resolving needs the sample data.
    pub fn is_data_dependent(&self) -> bool {
        !matches!(self.mode, BandwidthMode::Fixed(_))
    }

    /// Fixes the bandwidth(s) for a pair of sample sets.
    pub fn resolve(&self, a: &Mat, b: &Mat) -> Result<ResolvedKernel> {
        self.validate()?;
        let sigmas = match self.mode {
            BandwidthMode::Fixed(s) => vec![s],
            BandwidthMode::Median => vec![median_bandwidth(a, b)?],
            BandwidthMode::Multi => {
                let base = median_bandwidth(a, b)?;
                self.multi_scales.iter().map(|s| s * base).collect()
            }
        };
        Ok(ResolvedKernel {
            sigmas,
            combine: self.combine,
        })
    }
}

/// `fixed:<σ>`, `median`, `multi` or `multi:<s1>,<s2>,...`.
impl std::str::FromStr for KernelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, rest) = match s.trim().split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (s.trim(), None),
        };
        let number = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("kernel setting '{s}': '{v}' is not a number")))
        };
        let cfg = match (head, rest) {
            ("median", None) => Self::median(),
            ("multi", None) => Self::default(),
            ("multi", Some(list)) => Self::multi(list.split(',').map(number).collect::<Result<_>>()?),
            ("fixed", Some(v)) => Self::fixed(number(v)?),
            _ => {
                return Err(Error::Config(format!(
                    "unknown kernel setting '{s}' (expected fixed:<sigma>, median or multi[:scales])"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl std::fmt::Display for KernelConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.mode {
            BandwidthMode::Fixed(s) => write!(f, "fixed:{s}"),
            BandwidthMode::Median => write!(f, "median"),
            BandwidthMode::Multi => {
                let scales: Vec<String> = self.multi_scales.iter().map(f64::to_string).collect();
                write!(f, "multi:{}", scales.join(","))
            }
        }
    }
}

impl std::str::FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "average" | "avg" | "mean" => Ok(Combine::Average),
            "sum" => Ok(Combine::Sum),
            "max" => Ok(Combine::Max),
            other => Err(Error::Config(format!("unknown combine rule '{other}' (average, sum, max)"))),
        }
    }
}

impl std::fmt::Display for Combine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Combine::Average => "average",
            Combine::Sum => "sum",
            Combine::Max => "max",
        })
    }
}

fn check_sigma(s: f64) -> Result<()> {
    if s.is_finite() && s > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("kernel bandwidth must be positive, got {s}")))
    }
}

/// A kernel with concrete bandwidths, treated as constant under
/// differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedKernel {
    pub sigmas: Vec<f64>,
    pub combine: Combine,
}

impl ResolvedKernel {
    pub fn single(sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(Self {
            sigmas: vec![sigma],
            combine: Combine::Average,
        })
    }

    /// Kernel value for a squared distance.
    #[inline]
    pub fn eval_sq(&self, d2: f64) -> f64 {
        match self.combine {
            Combine::Average | Combine::Sum => {
                let s = self
                    .sigmas
                    .iter()
                    .fold(0.0, |acc, s| acc + (-d2 / (2.0 * s * s)).exp());
                if self.combine == Combine::Average {
                    s / self.sigmas.len() as f64
                } else {
                    s
                }
            }
            Combine::Max => self
                .sigmas
                .iter()
                .fold(0.0, |acc: f64, s| acc.max((-d2 / (2.0 * s * s)).exp())),
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.eval_sq(sq_dist(x, y))
    }

    pub fn gram(&self, a: &Mat, b: &Mat) -> Result<Mat> {
        Ok(pairwise_sq_dists(a, b)?.map(|d2| self.eval_sq(d2)))
    }

    /// Differentiable Gram matrix between two tape nodes.
    pub fn gram_var(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let d2 = tape.sq_dists(a, b)?;
        let mut acc: Option<Var> = None;
        for s in &self.sigmas {
            let scaled = tape.scale(d2, -1.0 / (2.0 * s * s));
            let k = tape.exp(scaled);
            acc = Some(match acc {
                None => k,
                Some(prev) => match self.combine {
                    Combine::Average | Combine::Sum => tape.add(prev, k)?,
                    Combine::Max => tape.max(prev, k)?,
                },
            });
        }
        let k = acc.ok_or_else(|| Error::Parameter("kernel has no bandwidth".into()))?;
        Ok(if self.combine == Combine::Average && self.sigmas.len() > 1 {
            tape.scale(k, 1.0 / self.sigmas.len() as f64)
        } else {
            k
        })
    }
}

/// Median of all pairwise Euclidean distances in the pooled set `A ∪ B`
/// (self-pairs excluded). For an even count the upper middle is used.
pub fn median_bandwidth(a: &Mat, b: &Mat) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "median bandwidth: feature dimension {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let n = a.rows() + b.rows();
    if n < 2 {
        return Err(Error::SampleSize(format!(
            "median bandwidth needs at least 2 pooled samples, got {n}"
        )));
    }
    let row = |i: usize| if i < a.rows() { a.row(i) } else { b.row(i - a.rows()) };
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let ri = row(i);
        for j in (i + 1)..n {
            dists.push(sq_dist(ri, row(j)));
        }
    }
    let mid = dists.len() / 2;
    let (_, median_sq, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let sigma = median_sq.sqrt();
    if sigma > 0.0 && sigma.is_finite() {
        Ok(sigma)
    } else {
        Err(Error::Degenerate(
            "median pairwise distance is zero (pooled points coincide)".into(),
        ))
    }
}

pub fn gaussian_gram(a: &Mat, b: &Mat, sigma: f64) -> Result<Mat> {
    ResolvedKernel::single(sigma)?.gram(a, b)
}

/// Unweighted average of Gaussian Grams at bandwidths `s · base_sigma`.
pub fn multi_kernel_gram(a: &Mat, b: &Mat, base_sigma: f64, scales: &[f64]) -> Result<Mat> {
    check_sigma(base_sigma)?;
    let cfg = KernelConfig::multi(scales.to_vec());
    cfg.validate()?;
    let kernel = ResolvedKernel {
        sigmas: scales.iter().map(|s| s * base_sigma).collect(),
        combine: Combine::Average,
    };
    kernel.gram(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sym_eig_psd;
    use proptest::prelude::*;

    fn pts(v: &[f64]) -> Mat {
        Mat::new(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn median_examples() {
        // distances {1, 2, 3}
        let a = pts(&[0.0, 1.0]);
        let b = pts(&[3.0]);
        assert_eq!(median_bandwidth(&a, &b).unwrap(), 2.0);
        assert_eq!(median_bandwidth(&pts(&[0.0]), &pts(&[2.0])).unwrap(), 2.0);
        assert!(matches!(
            median_bandwidth(&pts(&[0.0, 0.0]), &pts(&[0.0])),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            median_bandwidth(&pts(&[0.0]), &Mat::zeros(0, 1)),
            Err(Error::SampleSize(_))
        ));
    }

    #[test]
    fn median_even_count_takes_upper_middle() {
        // 4 points on a line: distances {1,1,1,2,2,3} -> sorted index 3 -> 2
        assert_eq!(median_bandwidth(&pts(&[0.0, 1.0]), &pts(&[2.0, 3.0])).unwrap(), 2.0);
    }

    #[test]
    fn gram_examples() {
        let x = pts(&[0.7]);
        assert_eq!(gaussian_gram(&x, &x, 0.3).unwrap().data(), &[1.0]);

        let a = pts(&[0.0, 2f64.sqrt()]);
        let k = gaussian_gram(&a, &a, 1.0).unwrap();
        assert!((k[(0, 1)] - (-1f64).exp()).abs() < 1e-15);
        assert!((k[(0, 1)] - 0.36788).abs() < 1e-5);
        assert_eq!(k[(0, 0)], 1.0);

        let wide = pts(&[-3.0, 0.0, 5.0]);
        let k = gaussian_gram(&wide, &wide, 1e6).unwrap();
        assert!(k.data().iter().all(|v| (v - 1.0).abs() < 1e-9));

        assert!(matches!(gaussian_gram(&x, &x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(gaussian_gram(&x, &x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn multi_kernel_examples() {
        let a = pts(&[0.0, 2f64.sqrt()]);
        let single = gaussian_gram(&a, &a, 1.3).unwrap();
        assert_eq!(multi_kernel_gram(&a, &a, 1.3, &[1.0]).unwrap(), single);

        let p = pts(&[4.0]);
        assert_eq!(multi_kernel_gram(&p, &p, 0.2, &[0.5, 1.0, 2.0]).unwrap().data(), &[1.0]);

        let k = multi_kernel_gram(&a, &a, 1.0, &[1.0, 2.0]).unwrap();
        let expect = ((-1f64).exp() + (-0.25f64).exp()) / 2.0;
        assert!((k[(0, 1)] - expect).abs() < 1e-15);
        assert!((k[(0, 1)] - 0.57334).abs() < 1e-5);

        assert!(multi_kernel_gram(&a, &a, 1.0, &[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(KernelConfig::fixed(-1.0).validate().is_err());
        assert!(KernelConfig::multi(vec![1.0, 0.0]).validate().is_err());
        assert!(KernelConfig::default().validate().is_ok());
        let r = KernelConfig::default().resolve(&pts(&[0.0, 1.0]), &pts(&[3.0])).unwrap();
        assert_eq!(r.sigmas, vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn kernel_settings_parse_and_print() {
        for text in ["median", "fixed:1.5", "multi:0.5,1,2"] {
            let k: KernelConfig = text.parse().unwrap();
            assert_eq!(k.to_string(), text);
        }
        assert_eq!("multi".parse::<KernelConfig>().unwrap(), KernelConfig::default());
        assert!("fixed:-1".parse::<KernelConfig>().is_err());
        assert!("gauss".parse::<KernelConfig>().is_err());
        assert_eq!("max".parse::<Combine>().unwrap(), Combine::Max);
        assert_eq!(Combine::Average.to_string(), "average");
    }

    #[test]
    fn gram_var_matches_eager() {
        let a = Mat::from_rows(&[[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]]).unwrap();
        let b = Mat::from_rows(&[[1.0, 1.0], [-2.0, 0.0]]).unwrap();
        for combine in [Combine::Average, Combine::Sum, Combine::Max] {
            let k = ResolvedKernel {
                sigmas: vec![0.5, 1.0, 2.0],
                combine,
            };
            let mut tape = Tape::new();
            let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
            let g = k.gram_var(&mut tape, va, vb).unwrap();
            assert!(tape.value(g).max_abs_diff(&k.gram(&a, &b).unwrap()) < 1e-15);
        }
    }

    fn arb_points() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..20)
    }

    proptest! {
        #[test]
        fn gram_is_symmetric_psd(rows in arb_points(), sigma in 0.1f64..5.0) {
            let a = Mat::from_rows(&rows).unwrap();
            let k = gaussian_gram(&a, &a, sigma).unwrap();
            prop_assert_eq!(k.clone(), k.transpose());
            for i in 0..a.rows() {
                prop_assert_eq!(k[(i, i)], 1.0);
            }
            let eig = sym_eig_psd(&k).unwrap();
            prop_assert!(eig.values[0] >= -1e-8);
        }

        #[test]
        fn multi_kernel_bounds(rows in arb_points(), sigma in 0.1f64..5.0) {
            let a = Mat::from_rows(&rows).unwrap();
            let scales = [0.5, 1.0, 2.0];
            let k = multi_kernel_gram(&a, &a, sigma, &scales).unwrap();
            let smallest = gaussian_gram(&a, &a, 0.5 * sigma).unwrap();
            for (m, s) in k.data().iter().zip(smallest.data()) {
                prop_assert!(*m >= 0.0 && *m <= 1.0);
                prop_assert!(*m >= s / scales.len() as f64);
            }
        }

        #[test]
        fn median_invariant_under_permutation_and_translation(
            rows in arb_points(),
            shift in prop::collection::vec(-10.0f64..10.0, 3),
            rot in 0usize..20,
        ) {
            let a = Mat::from_rows(&rows).unwrap();
            let split = a.rows() / 2;
            let idx: Vec<usize> = (0..a.rows()).collect();
            let (left, right) = idx.split_at(split);
            let base = match median_bandwidth(&a.select_rows(left), &a.select_rows(right)) {
                Ok(s) => s,
                Err(_) => return Ok(()),
            };
            let mut perm = idx.clone();
            let len = perm.len();
            perm.rotate_left(rot % len);
            let (l2, r2) = perm.split_at(split);
            let permuted = median_bandwidth(&a.select_rows(l2), &a.select_rows(r2)).unwrap();
            prop_assert!((permuted - base).abs() <= 1e-12 * base.max(1.0));

            let moved: Vec<Vec<f64>> = rows.iter()
                .map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect())
                .collect();
            let m = Mat::from_rows(&moved).unwrap();
            let translated = median_bandwidth(&m.select_rows(left), &m.select_rows(right)).unwrap();
            prop_assert!((translated - base).abs() <= 1e-9 * base.max(1.0));
        }
    }
}
