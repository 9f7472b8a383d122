//! Reverse-mode automatic differentiation on dense f64 matrices.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] walks the
//! recording in reverse and accumulates gradients for every node, so the
//! analytic gradients used by the optimizer and by `gradcheck` come from the
//! same machinery. Scalars are represented as 1x1 matrices.

use ndarray::{Array2, Axis};

pub type Arr = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulCol(usize, usize),
    DivScalar(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    AddConst(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    RowL2Normalize(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(usize, usize),
    SliceRows(usize, usize, usize),
    Clamp(usize, f64, f64),
    PairwiseExpNegDist(usize),
}

struct Node {
    value: Arr,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Arr>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Arr {
        &self.grads[v.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "scalar() on non-1x1 node");
        a[[0, 0]]
    }

    fn push(&mut self, value: Arr, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, c: f64) -> Var {
        self.leaf(Arr::from_elem((1, 1), c))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a.0, b.0))
    }

    /// (N,D) + broadcast (1,D).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a.0, row.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// (N,D) * broadcast column (N,1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a.0, col.0))
    }

    /// Elementwise division by a 1x1 scalar node.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a) / sv;
        self.push(v, Op::DivScalar(a.0, s.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows_value(self.value(a));
        self.push(v, Op::SoftmaxRows(a.0))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = m + row.mapv(|x| (x - m).exp()).sum().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmaxRows(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Arr::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Arr::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(v, Op::Mean(a.0))
    }

    /// Column sums: (N,D) -> (1,D).
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .sum_axis(Axis(0))
            .insert_axis(Axis(0))
            .to_owned();
        self.push(v, Op::SumRows(a.0))
    }

    /// Row sums: (N,D) -> (N,1).
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .to_owned();
        self.push(v, Op::SumCols(a.0))
    }

    /// L2-normalize each row. Errors are the caller's job: zero rows give NaN.
    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let n = row.mapv(|x| x * x).sum().sqrt();
            row.mapv_inplace(|x| x / n);
        }
        self.push(v, Op::RowL2Normalize(a.0))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(a.0, b.0))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self
            .value(a)
            .slice(ndarray::s![start..end, ..])
            .to_owned();
        self.push(v, Op::SliceRows(a.0, start, end))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, i + 1)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a.0, lo, hi))
    }

    /// (1/B^2) sum_ij exp(-||x_i - x_j||) over rows, as a 1x1 node.
    /// Diagonal terms contribute exactly 1 and carry no gradient.
    pub fn pairwise_exp_neg_dist(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let b = x.nrows();
        let mut total = 0.0;
        for i in 0..b {
            for j in 0..b {
                if i == j {
                    total += 1.0;
                } else {
                    let d = row_dist(x, i, j);
                    total += (-d).exp();
                }
            }
        }
        let v = Arr::from_elem((1, 1), total / (b * b) as f64);
        self.push(v, Op::PairwiseExpNegDist(a.0))
    }

    /// Numerically stable log-sum-exp of all entries, as a 1x1 node.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let m = self
            .value(a)
            .fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
        let shifted = self.add_const(a, -m);
        let e = self.exp(shifted);
        let s = self.sum(e);
        let l = self.ln(s);
        self.add_const(l, m)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar node");
        let mut grads: Vec<Arr> = self
            .nodes
            .iter()
            .map(|n| Arr::zeros(n.value.dim()))
            .collect();
        grads[loss.0][[0, 0]] = 1.0;

        for idx in (0..=loss.0).rev() {
            let g = grads[idx].clone();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[*a] += &g;
                    grads[*b] += &g;
                }
                Op::AddRow(a, r) => {
                    grads[*a] += &g;
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[*r] += &col_sum;
                }
                Op::Sub(a, b) => {
                    grads[*a] += &g;
                    grads[*b] -= &g;
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[*b].value;
                    let db = &g * &self.nodes[*a].value;
                    grads[*a] += &da;
                    grads[*b] += &db;
                }
                Op::MulCol(a, c) => {
                    let da = &g * &self.nodes[*c].value;
                    let dc = (&g * &self.nodes[*a].value)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    grads[*a] += &da;
                    grads[*c] += &dc;
                }
                Op::DivScalar(a, s) => {
                    let sv = self.nodes[*s].value[[0, 0]];
                    let da = &g / sv;
                    let ds = -(&g * &self.nodes[*a].value).sum() / (sv * sv);
                    grads[*a] += &da;
                    grads[*s][[0, 0]] += ds;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    grads[*a] += &da;
                    grads[*b] += &db;
                }
                Op::Transpose(a) => {
                    let da = g.t().to_owned();
                    grads[*a] += &da;
                }
                Op::Scale(a, c) => {
                    let da = &g * *c;
                    grads[*a] += &da;
                }
                Op::AddConst(a) => {
                    grads[*a] += &g;
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let da = &g * &(y * &(1.0 - y));
                    grads[*a] += &da;
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let da = &g * &(1.0 - y * y);
                    grads[*a] += &da;
                }
                Op::Exp(a) => {
                    let da = &g * &self.nodes[idx].value;
                    grads[*a] += &da;
                }
                Op::Ln(a) => {
                    let da = &g / &self.nodes[*a].value;
                    grads[*a] += &da;
                }
                Op::Abs(a) => {
                    let da = &g * &self.nodes[*a].value.mapv(f64::signum);
                    grads[*a] += &da;
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut da = Arr::zeros(y.dim());
                    for (i, yrow) in y.rows().into_iter().enumerate() {
                        let grow = g.row(i);
                        let dot: f64 = yrow.iter().zip(grow.iter()).map(|(y, g)| y * g).sum();
                        for (j, &yj) in yrow.iter().enumerate() {
                            da[[i, j]] = yj * (grow[j] - dot);
                        }
                    }
                    grads[*a] += &da;
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.nodes[idx].value; // log-probs
                    let mut da = g.clone();
                    for (i, yrow) in y.rows().into_iter().enumerate() {
                        let gsum: f64 = g.row(i).sum();
                        for (j, &yj) in yrow.iter().enumerate() {
                            da[[i, j]] -= yj.exp() * gsum;
                        }
                    }
                    grads[*a] += &da;
                }
                Op::Sum(a) => {
                    let da = Arr::from_elem(self.nodes[*a].value.dim(), g[[0, 0]]);
                    grads[*a] += &da;
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len() as f64;
                    let da = Arr::from_elem(self.nodes[*a].value.dim(), g[[0, 0]] / n);
                    grads[*a] += &da;
                }
                Op::SumRows(a) => {
                    let dim = self.nodes[*a].value.dim();
                    let mut da = Arr::zeros(dim);
                    for mut row in da.rows_mut() {
                        row.assign(&g.row(0));
                    }
                    grads[*a] += &da;
                }
                Op::SumCols(a) => {
                    let dim = self.nodes[*a].value.dim();
                    let mut da = Arr::zeros(dim);
                    for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                        row.fill(g[[i, 0]]);
                    }
                    grads[*a] += &da;
                }
                Op::RowL2Normalize(a) => {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[idx].value;
                    let mut da = Arr::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let norm = x.row(i).mapv(|v| v * v).sum().sqrt();
                        let ydotg: f64 =
                            y.row(i).iter().zip(g.row(i).iter()).map(|(a, b)| a * b).sum();
                        for j in 0..x.ncols() {
                            da[[i, j]] = (g[[i, j]] - y[[i, j]] * ydotg) / norm;
                        }
                    }
                    grads[*a] += &da;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.nrows();
                        let slice = g.slice(ndarray::s![offset..offset + n, ..]);
                        grads[p] += &slice;
                        offset += n;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.ncols();
                    let ga = g.slice(ndarray::s![.., ..ca]).to_owned();
                    let gb = g.slice(ndarray::s![.., ca..]).to_owned();
                    grads[*a] += &ga;
                    grads[*b] += &gb;
                }
                Op::SliceRows(a, start, end) => {
                    let mut da = Arr::zeros(self.nodes[*a].value.dim());
                    da.slice_mut(ndarray::s![*start..*end, ..]).assign(&g);
                    grads[*a] += &da;
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[*a].value;
                    let mut da = g.clone();
                    ndarray::Zip::from(&mut da).and(x).for_each(|d, &xv| {
                        if xv <= *lo || xv >= *hi {
                            *d = 0.0;
                        }
                    });
                    grads[*a] += &da;
                }
                Op::PairwiseExpNegDist(a) => {
                    let x = &self.nodes[*a].value;
                    let b = x.nrows();
                    let scale = g[[0, 0]] / (b * b) as f64;
                    let mut da = Arr::zeros(x.dim());
                    for i in 0..b {
                        for j in 0..b {
                            if i == j {
                                continue;
                            }
                            let d = row_dist(x, i, j);
                            if d == 0.0 {
                                continue;
                            }
                            let coef = -(-d).exp() / d * scale;
                            for k in 0..x.ncols() {
                                let diff = x[[i, k]] - x[[j, k]];
                                // both (i,j) and (j,i) orderings hit row i
                                da[[i, k]] += 2.0 * coef * diff;
                            }
                        }
                    }
                    grads[*a] += &da;
                }
            }
        }
        Gradients { grads }
    }
}

fn row_dist(x: &Arr, i: usize, j: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(x.row(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

pub fn softmax_rows_value(x: &Arr) -> Arr {
    let mut v = x.clone();
    for mut row in v.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    v
}
