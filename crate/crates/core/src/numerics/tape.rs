//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! Only the operations the alignment and classification losses need are
//! supported. Nodes are appended in evaluation order, so walking the tape
//! backwards visits them in reverse topological order.

use super::linalg::pairwise_sq_dists_unchecked;
use super::mat::Mat;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Provenance of a node.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Max(Var, Var),
    Scale(Var, f64),
    /// Adds a 1×c row vector to every row.
    AddRow(Var, Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    Sum(Var),
    RowSum(Var),
    LogSoftmax(Var),
    Softmax(Var),
    SqDists(Var, Var),
}

/// A value on the tape together with the operation that produced it.
#[derive(Debug, Clone)]
pub struct GradNode {
    pub value: Mat,
    pub op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<GradNode>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Mat>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, zero-filled with the given shape when absent.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(rows, cols))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &GradNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(GradNode { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(Mat::scalar(value))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(value, Op::Div(a, b)))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "max")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| if x >= y { x } else { y });
        Ok(self.push(value, Op::Max(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::Shape(format!(
                "add_row: row {:?} for {r}x{c} matrix",
                self.shape(row)
            )));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(row).row(0).to_vec();
        for i in 0..r {
            for (v, b) in value.row_mut(i).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    /// `max(a, floor)` elementwise; clamped entries receive no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        self.push(value, Op::ClampMin(a, floor))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data().len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as an r×1 column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let sums = self.value(a).row_sums();
        self.push(Mat::column(&sums), Op::RowSum(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(value, Op::LogSoftmax(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a)).map(f64::exp);
        self.push(value, Op::Softmax(a))
    }

    /// Squared Euclidean distances between the rows of `a` and `b`.
    pub fn sq_dists(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).1 != self.shape(b).1 {
            return Err(Error::Shape(format!(
                "sq_dists: feature dimension {} vs {}",
                self.shape(a).1,
                self.shape(b).1
            )));
        }
        let value = pairwise_sq_dists_unchecked(self.value(a), self.value(b));
        Ok(self.push(value, Op::SqDists(a, b)))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut adjoints: Vec<Option<Mat>> = vec![None; output.0 + 1];
        adjoints[output.0] = Some(Mat::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            // Leaves keep their adjoint for the caller.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adjoints[idx].take() else {
                continue;
            };
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(b));
                    let gb = self.value(a).t_matmul(&g);
                    accumulate(&mut adjoints, a, ga);
                    accumulate(&mut adjoints, b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, b, g.clone());
                    accumulate(&mut adjoints, a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adjoints, b, g.scale(-1.0));
                    accumulate(&mut adjoints, a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(b), |x, y| x * y);
                    let gb = g.zip_map(self.value(a), |x, y| x * y);
                    accumulate(&mut adjoints, a, ga);
                    accumulate(&mut adjoints, b, gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(b);
                    let ga = g.zip_map(bv, |x, y| x / y);
                    // d(a/b)/db = -(a/b)/b
                    let q = node.value.zip_map(bv, |x, y| x / y);
                    let gb = g.zip_map(&q, |x, y| -x * y);
                    accumulate(&mut adjoints, a, ga);
                    accumulate(&mut adjoints, b, gb);
                }
                Op::Max(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let mut ga = g.clone();
                    let mut gb = g.clone();
                    for ((ga, gb), (x, y)) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(gb.data_mut())
                        .zip(av.data().iter().zip(bv.data()))
                    {
                        if x >= y {
                            *gb = 0.0;
                        } else {
                            *ga = 0.0;
                        }
                    }
                    accumulate(&mut adjoints, a, ga);
                    accumulate(&mut adjoints, b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut adjoints, a, g.scale(s)),
                Op::AddRow(a, row) => {
                    let mut grow = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (acc, v) in grow.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut adjoints, row, Mat::from_vec(1, grow.len(), grow));
                    accumulate(&mut adjoints, a, g);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, t| x * (1.0 - t * t));
                    accumulate(&mut adjoints, a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |x, e| x * e);
                    accumulate(&mut adjoints, a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map(self.value(a), |x, v| x / v);
                    accumulate(&mut adjoints, a, ga);
                }
                Op::ClampMin(a, floor) => {
                    let ga = g.zip_map(self.value(a), |x, v| if v > floor { x } else { 0.0 });
                    accumulate(&mut adjoints, a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(a);
                    accumulate(&mut adjoints, a, Mat::filled(r, c, g.item()));
                }
                Op::RowSum(a) => {
                    let (r, c) = self.shape(a);
                    let mut ga = Mat::zeros(r, c);
                    for i in 0..r {
                        let gi = g[(i, 0)];
                        ga.row_mut(i).iter_mut().for_each(|v| *v = gi);
                    }
                    accumulate(&mut adjoints, a, ga);
                }
                Op::LogSoftmax(a) => {
                    // dx = g - softmax * rowsum(g)
                    let mut ga = g.clone();
                    for i in 0..g.rows() {
                        let gs = g.row(i).iter().fold(0.0, |acc, v| acc + v);
                        let lp = node.value.row(i);
                        for (dst, l) in ga.row_mut(i).iter_mut().zip(lp) {
                            *dst -= l.exp() * gs;
                        }
                    }
                    accumulate(&mut adjoints, a, ga);
                }
                Op::Softmax(a) => {
                    // dx = p * (g - <g, p>)
                    let mut ga = g.clone();
                    for i in 0..g.rows() {
                        let p = node.value.row(i);
                        let gp = p.iter().zip(g.row(i)).fold(0.0, |acc, (p, g)| acc + p * g);
                        for (dst, p) in ga.row_mut(i).iter_mut().zip(p) {
                            *dst = p * (*dst - gp);
                        }
                    }
                    accumulate(&mut adjoints, a, ga);
                }
                Op::SqDists(a, b) => {
                    // D_ij = |a_i - b_j|^2
                    // dA = 2 (diag(G 1) A - G B),  dB = 2 (diag(Gᵀ 1) B - Gᵀ A)
                    let (av, bv) = (self.value(a), self.value(b));
                    let g_rows = g.row_sums();
                    let mut g_cols = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (acc, v) in g_cols.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    let gb_prod = g.matmul_unchecked(bv);
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        for k in 0..av.cols() {
                            ga[(i, k)] = 2.0 * (g_rows[i] * av[(i, k)] - gb_prod[(i, k)]);
                        }
                    }
                    let ga_prod = g.t_matmul(av);
                    let mut gb = Mat::zeros(bv.rows(), bv.cols());
                    for j in 0..bv.rows() {
                        for k in 0..bv.cols() {
                            gb[(j, k)] = 2.0 * (g_cols[j] * bv[(j, k)] - ga_prod[(j, k)]);
                        }
                    }
                    accumulate(&mut adjoints, a, ga);
                    accumulate(&mut adjoints, b, gb);
                }
            }
        }
        Ok(Gradients { adjoints })
    }
}

fn accumulate(adjoints: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adjoints[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Row-wise log-softmax with max subtraction.
pub(crate) fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(*v));
        let lse = m + row.iter().fold(0.0, |acc, v| acc + (v - m).exp()).ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_via_mul() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(t.scalar(y), 9.0);
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn unused_leaf_has_no_adjoint() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::scalar(1.0));
        let unused = t.leaf(Mat::scalar(2.0));
        let y = t.exp(x);
        let g = t.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert!((g.get(x).unwrap().item() - 1f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::zeros(2, 2));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn clamp_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::column(&[1e-20, 2.0]));
        let c = t.clamp_min(x, 1e-12);
        let l = t.log(c);
        let s = t.sum(l);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Mat::from_rows(&[[1.0, 2.0, 3.0], [1000.0, -1000.0, 0.0]]).unwrap();
        let p = log_softmax_rows(&x).map(f64::exp);
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
