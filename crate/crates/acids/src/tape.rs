//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes.
//! Values are computed eagerly when an operation is pushed; calling
//! [`Tape::backward`] once propagates gradients to every node in reverse
//! insertion order. The tape is rebuilt from scratch for every optimizer
//! step, so per-step cost does not grow over time.
//!
//! The op set is small on purpose: dense affine layers, convolution via
//! gather (im2col), batch normalization, softmax heads and the
//! information-theoretic losses all compose from it.

use crate::error::{Error, Result};
use ndarray::{Array2, Axis};
use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// Elementwise sum of two same-shape nodes.
    Add(usize, usize),
    /// `a + b` where `b` has shape (r,c), (r,1), (1,c) or (1,1).
    AddBroadcast(usize, usize),
    /// `a * b` elementwise, with the same broadcast rules for `b`.
    MulBroadcast(usize, usize),
    MulScalar(usize, f64),
    AddScalar(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Relu(usize),
    /// Row-wise softmax via the log-sum-exp trick.
    SoftmaxRows(usize),
    /// (r,c) -> (r,1), sum over each row.
    RowSum(usize),
    /// (r,c) -> (1,c), sum over each column.
    ColSum(usize),
    /// (r,c) -> (1,1).
    SumAll(usize),
    /// `ln(max(x, floor))`; gradient is zero where the floor is active.
    LnClamped(usize, f64),
    /// `x.powf(p)` elementwise; inputs must stay in the positive domain.
    PowConst(usize, f64),
    ConcatRows(usize, usize),
    SliceRows {
        src: usize,
        start: usize,
        len: usize,
    },
    /// `out.flat[k] = src.flat[idx[k]]`, with `idx[k] < 0` producing zero.
    /// Backward scatter-adds, so indices may repeat.
    Gather {
        src: usize,
        idx: Arc<Vec<i64>>,
    },
    /// Confident rows replaced by gradient-constant one-hots.
    Sharpen {
        src: usize,
        confident: Arc<Vec<bool>>,
    },
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
}

/// One recorded forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert an input node. Leaves accumulate gradients like any other
    /// node; whether they are trainable is the caller's bookkeeping.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.dim(), (1, 1));
        val[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            av + &bv.broadcast(av.dim()).expect("add_broadcast: incompatible shapes")
        };
        self.push(value, Op::AddBroadcast(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            av * &bv.broadcast(av.dim()).expect("mul: incompatible shapes")
        };
        self.push(value, Op::MulBroadcast(a.0, b.0))
    }

    pub fn mul_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = &self.nodes[a.0].value * k;
        self.push(value, Op::MulScalar(a.0, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = &self.nodes[a.0].value + k;
        self.push(value, Op::AddScalar(a.0, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add_broadcast(a, nb)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::Matmul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.iter().sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(value, Op::SoftmaxRows(a.0))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let value = v
            .sum_axis(Axis(1))
            .into_shape_with_order((v.nrows(), 1))
            .unwrap();
        self.push(value, Op::RowSum(a.0))
    }

    pub fn col_sum(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let value = v
            .sum_axis(Axis(0))
            .into_shape_with_order((1, v.ncols()))
            .unwrap();
        self.push(value, Op::ColSum(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a.0))
    }

    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(floor).ln());
        self.push(value, Op::LnClamped(a.0, floor))
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.powf(p));
        self.push(value, Op::PowConst(a.0, p))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.ncols(), bv.ncols(), "concat_rows: column mismatch");
        let mut value = Array2::zeros((av.nrows() + bv.nrows(), av.ncols()));
        value.slice_mut(ndarray::s![..av.nrows(), ..]).assign(av);
        value.slice_mut(ndarray::s![av.nrows().., ..]).assign(bv);
        self.push(value, Op::ConcatRows(a.0, b.0))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(
            value,
            Op::SliceRows {
                src: a.0,
                start,
                len,
            },
        )
    }

    /// Rearrangement by flat index; the workhorse behind im2col, pooling
    /// and layout permutations. `idx.len()` must equal `rows * cols`.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<i64>>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather: index count mismatch");
        let src = self.nodes[a.0].value.as_slice().expect("contiguous");
        let mut out = Vec::with_capacity(rows * cols);
        for &i in idx.iter() {
            out.push(if i >= 0 { src[i as usize] } else { 0.0 });
        }
        let value = Array2::from_shape_vec((rows, cols), out).unwrap();
        self.push(value, Op::Gather { src: a.0, idx })
    }

    /// Replace rows whose maximum is at least `threshold` by the one-hot of
    /// their argmax (ties break to the lowest index). Confident rows become
    /// gradient constants; the rest pass through untouched. Returns the
    /// output node and the per-row confidence mask.
    pub fn sharpen(&mut self, a: Var, threshold: f64) -> (Var, Vec<bool>) {
        let src = &self.nodes[a.0].value;
        let mut value = src.clone();
        let mut confident = vec![false; src.nrows()];
        for (n, mut row) in value.rows_mut().into_iter().enumerate() {
            let mut best = 0usize;
            let mut best_val = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if x > best_val {
                    best_val = x;
                    best = j;
                }
            }
            if best_val >= threshold {
                confident[n] = true;
                row.fill(0.0);
                row[best] = 1.0;
            }
        }
        let mask = confident.clone();
        let var = self.push(
            value,
            Op::Sharpen {
                src: a.0,
                confident: Arc::new(confident),
            },
        );
        (var, mask)
    }

    /// Gradient of a node after [`backward`](Self::backward) has run.
    /// Zero matrix if the node does not influence the loss.
    pub fn grad(&self, v: Var) -> Array2<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Array2::zeros(self.nodes[v.0].value.dim()),
        }
    }

    fn accumulate(&mut self, idx: usize, delta: &Array2<f64>) {
        match &mut self.nodes[idx].grad {
            Some(g) => *g += delta,
            None => self.nodes[idx].grad = Some(delta.clone()),
        }
    }

    /// Reverse pass from a scalar (1x1) loss node. Consumes the graph:
    /// a second call fails with [`Error::GraphConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.consumed = true;
        assert_eq!(
            self.shape(loss),
            (1, 1),
            "backward: loss must be a scalar node"
        );
        self.nodes[loss.0].grad = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            let g = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::AddBroadcast(a, b) => {
                    let (a, b) = (*a, *b);
                    let gb = reduce_to(&g, self.nodes[b].value.dim());
                    self.accumulate(a, &g);
                    self.accumulate(b, &gb);
                }
                Op::MulBroadcast(a, b) => {
                    let (a, b) = (*a, *b);
                    let bv = self.nodes[b].value.clone();
                    let av = self.nodes[a].value.clone();
                    let ga = &g * &bv.broadcast(g.dim()).unwrap();
                    let gb = reduce_to(&(&g * &av), bv.dim());
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::MulScalar(a, k) => {
                    let (a, k) = (*a, *k);
                    self.accumulate(a, &(&g * k));
                }
                Op::AddScalar(a, _) => {
                    let a = *a;
                    self.accumulate(a, &g);
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.dot(&self.nodes[b].value.t());
                    let gb = self.nodes[a].value.t().dot(&g);
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    self.accumulate(a, &g.t().to_owned());
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mask = self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(a, &(&g * &mask));
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    // dL/dx_ij = p_ij * (g_ij - sum_k g_ik p_ik)
                    let p = &self.nodes[i].value;
                    let mut ga = Array2::zeros(p.dim());
                    for r in 0..p.nrows() {
                        let dot: f64 = (0..p.ncols()).map(|c| g[(r, c)] * p[(r, c)]).sum();
                        for c in 0..p.ncols() {
                            ga[(r, c)] = p[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    self.accumulate(a, &ga);
                }
                Op::RowSum(a) => {
                    let a = *a;
                    let dim = self.nodes[a].value.dim();
                    let ga = g.broadcast(dim).unwrap().to_owned();
                    self.accumulate(a, &ga);
                }
                Op::ColSum(a) => {
                    let a = *a;
                    let dim = self.nodes[a].value.dim();
                    let ga = g.broadcast(dim).unwrap().to_owned();
                    self.accumulate(a, &ga);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let dim = self.nodes[a].value.dim();
                    let ga = Array2::from_elem(dim, g[(0, 0)]);
                    self.accumulate(a, &ga);
                }
                Op::LnClamped(a, floor) => {
                    let (a, floor) = (*a, *floor);
                    let src = &self.nodes[a].value;
                    let ga = ndarray::Zip::from(&g)
                        .and(src)
                        .map_collect(|&gi, &x| if x > floor { gi / x } else { 0.0 });
                    self.accumulate(a, &ga);
                }
                Op::PowConst(a, p) => {
                    let (a, p) = (*a, *p);
                    let src = &self.nodes[a].value;
                    let ga = ndarray::Zip::from(&g)
                        .and(src)
                        .map_collect(|&gi, &x| gi * p * x.powf(p - 1.0));
                    self.accumulate(a, &ga);
                }
                Op::ConcatRows(a, b) => {
                    let (a, b) = (*a, *b);
                    let na = self.nodes[a].value.nrows();
                    let ga = g.slice(ndarray::s![..na, ..]).to_owned();
                    let gb = g.slice(ndarray::s![na.., ..]).to_owned();
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::SliceRows { src, start, len } => {
                    let (src, start, len) = (*src, *start, *len);
                    let mut ga = Array2::zeros(self.nodes[src].value.dim());
                    ga.slice_mut(ndarray::s![start..start + len, ..]).assign(&g);
                    self.accumulate(src, &ga);
                }
                Op::Gather { src, idx } => {
                    let src = *src;
                    let idx = idx.clone();
                    let mut ga = Array2::zeros(self.nodes[src].value.dim());
                    {
                        let flat = ga.as_slice_mut().unwrap();
                        let gflat = g.as_slice().unwrap();
                        for (k, &i) in idx.iter().enumerate() {
                            if i >= 0 {
                                flat[i as usize] += gflat[k];
                            }
                        }
                    }
                    self.accumulate(src, &ga);
                }
                Op::Sharpen { src, confident } => {
                    let src = *src;
                    let confident = confident.clone();
                    let mut ga = g.clone();
                    for (n, &c) in confident.iter().enumerate() {
                        if c {
                            ga.row_mut(n).fill(0.0);
                        }
                    }
                    self.accumulate(src, &ga);
                }
            }
        }
        Ok(())
    }
}

/// Sum `g` down to `dim`, undoing a broadcast.
fn reduce_to(g: &Array2<f64>, dim: (usize, usize)) -> Array2<f64> {
    let (r, c) = dim;
    let mut out = g.clone();
    if r == 1 && g.nrows() > 1 {
        out = out
            .sum_axis(Axis(0))
            .into_shape_with_order((1, out.ncols()))
            .unwrap();
    }
    if c == 1 && g.ncols() > 1 {
        out = out
            .sum_axis(Axis(1))
            .into_shape_with_order((out.nrows(), 1))
            .unwrap();
    }
    out
}
