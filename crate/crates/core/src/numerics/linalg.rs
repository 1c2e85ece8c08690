use super::mat::{sq_dist, Mat};
use crate::error::{Error, Result};

/// Off-diagonal Frobenius norm (relative to the matrix norm) below which the
/// Jacobi sweep stops.
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Default relative eigenvalue floor for [`inv_sqrt_psd`].
pub const DEFAULT_EIG_FLOOR: f64 = 1e-10;

/// Squared Euclidean distances between the rows of `a` (n×d) and `b` (m×d).
pub fn pairwise_sq_dists(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "pairwise distances: feature dimension {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    if a.cols() == 0 {
        return Err(Error::Shape("pairwise distances: zero feature dimension".into()));
    }
    Ok(pairwise_sq_dists_unchecked(a, b))
}

pub(crate) fn pairwise_sq_dists_unchecked(a: &Mat, b: &Mat) -> Mat {
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            // Difference form cannot go negative, but keep the clamp for
            // callers that feed cancellation-prone inputs.
            out.push(sq_dist(ai, b.row(j)).max(0.0));
        }
    }
    Mat::from_vec(n, m, out)
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `values`.
    pub vectors: Mat,
    pub sweeps: usize,
}

impl SymEig {
    /// `V · diag(f(λ)) · Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Mat {
        let n = self.values.len();
        let v = &self.vectors;
        let mut out = Mat::zeros(n, n);
        for k in 0..n {
            let w = f(self.values[k]);
            if w == 0.0 {
                continue;
            }
            for i in 0..n {
                let vik = v[(i, k)] * w;
                for j in 0..n {
                    out[(i, j)] += vik * v[(j, k)];
                }
            }
        }
        out
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. The input is
/// symmetrised as `(M + Mᵀ)/2` first.
pub fn sym_eig_psd(m: &Mat) -> Result<SymEig> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Numeric("eigendecomposition of non-finite matrix".into()));
    }
    let n = m.rows();
    let mut a = m.symmetrize();
    let mut v = Mat::identity(n);
    let scale = a.frobenius_norm();
    let tol = JACOBI_TOL * scale.max(f64::MIN_POSITIVE);

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&a);
        if off <= tol || n < 2 {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numeric(format!(
                "Jacobi eigendecomposition did not converge after {sweeps} sweeps \
                 (off-diagonal norm {off:e})"
            )));
        }
        sweeps += 1;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[(r, dst)] = v[(r, src)];
        }
    }
    Ok(SymEig {
        values,
        vectors,
        sweeps,
    })
}

fn off_diagonal_norm(a: &Mat) -> f64 {
    let n = a.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// Applies the rotation `A ← Pᵀ A P`, `V ← V P` in the (p, q) plane.
fn rotate(a: &mut Mat, v: &mut Mat, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Result of [`inv_sqrt_psd`].
#[derive(Debug, Clone)]
pub struct InverseSqrt {
    pub matrix: Mat,
    /// Number of eigenvalues raised to the floor.
    pub floored: usize,
}

/// `M^{-1/2}` for a symmetric PSD matrix. Eigenvalues below
/// `floor · λ_max` are raised to that value before inversion.
pub fn inv_sqrt_psd(m: &Mat, floor: f64) -> Result<InverseSqrt> {
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::Parameter(format!("eigenvalue floor must be positive, got {floor}")));
    }
    let eig = sym_eig_psd(m)?;
    let lambda_max = eig.values.last().copied().unwrap_or(0.0);
    if lambda_max <= 0.0 {
        return Err(Error::Degenerate(
            "inverse square root of a matrix with no positive eigenvalue".into(),
        ));
    }
    let min_value = floor * lambda_max;
    let floored = eig.values.iter().filter(|&&l| l < min_value).count();
    let matrix = eig
        .reconstruct_with(|l| 1.0 / l.max(min_value).sqrt())
        .symmetrize();
    Ok(InverseSqrt { matrix, floored })
}
