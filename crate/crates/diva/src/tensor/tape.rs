//! Reverse-mode tape over dense `ndarray` values.
//!
//! One tape holds one computation graph (we build one graph per sample and
//! average parameter gradients across the batch outside the tape). A tape
//! built with gradients disabled runs the same forward code but records no
//! backward state; `backward` on such a tape is a programming error.
//!
//! Reductions that cross the slot axis (`softmax_slots`, `weighted_sum_slots`)
//! use a canonical summation order, which keeps every forward output bit-exact
//! under slot permutation.

use super::kernels;
use super::{as2, canonical_sum, Real, SLOT_CAP};
use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix3, Ix4, IxDyn};

/// Handle to a node in a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<F: Real> {
    Leaf,
    Param { slot: usize },
    Conv2dSame { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    /// `a^T * b` with `a: [M, n]`, `b: [M, K]` -> `[n, K]`
    MatMulTA { a: Var, b: Var },
    /// `a * b^T` with `a: [M, K]`, `b: [n, K]` -> `[M, n]`
    MatMulNT { a: Var, b: Var },
    AddRowBcast { x: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, alpha: F },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    LayerNormRows { x: Var, gamma: Var, beta: Var, mean: Array1<F>, inv_std: Array1<F> },
    SoftmaxSlots { x: Var },
    ColSums { x: Var },
    ScaleRowsByInv { x: Var, s: Var, eps: F },
    Row { x: Var, i: usize },
    StackCols { xs: Vec<Var> },
    ColTo3d { x: Var, i: usize },
    BroadcastSpatial { x: Var },
    ConcatC { a: Var, b: Var },
    SliceC { x: Var, from: usize, to: usize },
    WeightedSumSlots { flows: Vec<Var>, masks: Vec<Var> },
    Wmse { a: Var, w: Option<Var>, target: ArrayD<F>, denom: F },
    Axpy { terms: Vec<(Var, F)> },
    Reshape { x: Var },
}

struct Node<F: Real> {
    value: ArrayD<F>,
    op: Op<F>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    param_nodes: Vec<usize>,
    grad: bool,
}

impl<F: Real> Tape<F> {
    pub fn new(grad: bool) -> Self {
        Tape { nodes: Vec::with_capacity(256), param_nodes: Vec::new(), grad }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        *self.nodes[v.0].value.first().expect("scalar node")
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>) -> Var {
        let op = if self.grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Register a parameter leaf. Gradients from `backward` are returned in
    /// registration order.
    pub fn param(&mut self, value: &ArrayD<F>) -> Var {
        let v = self.push(value.clone(), Op::Param { slot: self.param_nodes.len() });
        if self.grad {
            self.param_nodes.push(v.0);
        }
        v
    }

    /// Cut the graph: the result carries the same value but no history.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("conv input 3-D");
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().expect("conv weight 4-D");
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().expect("conv bias 1-D");
        let y = kernels::conv2d_same(xv, wv, bv);
        self.push(y.into_dyn(), Op::Conv2dSame { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let mut y = Array2::<F>::zeros((av.nrows(), bv.ncols()));
        ndarray::linalg::general_mat_mul(F::one(), &av, &bv, F::zero(), &mut y);
        self.push(y.into_dyn(), Op::MatMul { a, b })
    }

    pub fn matmul_ta(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let mut y = Array2::<F>::zeros((av.ncols(), bv.ncols()));
        ndarray::linalg::general_mat_mul(F::one(), &av.t(), &bv, F::zero(), &mut y);
        self.push(y.into_dyn(), Op::MatMulTA { a, b })
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let mut y = Array2::<F>::zeros((av.nrows(), bv.nrows()));
        ndarray::linalg::general_mat_mul(F::one(), &av, &bv.t(), F::zero(), &mut y);
        self.push(y.into_dyn(), Op::MatMulNT { a, b })
    }

    pub fn add_row_bcast(&mut self, x: Var, b: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().expect("bias 1-D");
        let y = &xv + &bv.broadcast(xv.dim()).unwrap();
        self.push(y.into_dyn(), Op::AddRowBcast { x, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let y = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let y = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(y, Op::Mul { a, b })
    }

    /// `alpha * x + beta`, elementwise.
    pub fn affine(&mut self, x: Var, alpha: F, beta: F) -> Var {
        let y = self.nodes[x.0].value.mapv(|v| alpha * v + beta);
        self.push(y, Op::Affine { x, alpha })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.mapv(|v| if v > F::zero() { v } else { F::zero() });
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.mapv(kernels::sigmoid);
        self.push(y, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.mapv(|v| v.tanh());
        self.push(y, Op::Tanh { x })
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let gv = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.nodes[beta.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let (y, mean, inv_std) = kernels::layer_norm_rows(xv, gv, bv, eps);
        self.push(y.into_dyn(), Op::LayerNormRows { x, gamma, beta, mean, inv_std })
    }

    pub fn softmax_slots(&mut self, x: Var) -> Var {
        let y = kernels::softmax_slots(as2(&self.nodes[x.0].value));
        self.push(y.into_dyn(), Op::SoftmaxSlots { x })
    }

    pub fn col_sums(&mut self, x: Var) -> Var {
        let y = as2(&self.nodes[x.0].value).sum_axis(Axis(0));
        self.push(y.into_dyn(), Op::ColSums { x })
    }

    /// Divide row `i` of `x: [n, K]` by `s[i] + eps`.
    pub fn scale_rows_by_inv(&mut self, x: Var, s: Var, eps: F) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let sv = self.nodes[s.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = xv.to_owned();
        for (mut row, &si) in y.rows_mut().into_iter().zip(sv.iter()) {
            let inv = F::one() / (si + eps);
            row.mapv_inplace(|v| v * inv);
        }
        self.push(y.into_dyn(), Op::ScaleRowsByInv { x, s, eps })
    }

    pub fn row(&mut self, x: Var, i: usize) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let y = xv.row(i).to_owned().insert_axis(Axis(0));
        self.push(y.into_dyn(), Op::Row { x, i })
    }

    /// Stack `n` fields of shape `[H, W, 1]` into `[H*W, n]`.
    pub fn stack_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty() && xs.len() <= SLOT_CAP);
        let d = self.nodes[xs[0].0].value.shape().to_vec();
        let m = d[0] * d[1];
        let mut y = Array2::<F>::zeros((m, xs.len()));
        for (j, &v) in xs.iter().enumerate() {
            let col = &self.nodes[v.0].value;
            for (i, &val) in col.iter().enumerate() {
                y[[i, j]] = val;
            }
        }
        self.push(y.into_dyn(), Op::StackCols { xs: xs.to_vec() })
    }

    /// Extract column `i` of `x: [H*W, n]` as `[H, W, 1]`.
    pub fn col_to_3d(&mut self, x: Var, i: usize, h: usize, w: usize) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let y = xv.column(i).to_owned().into_shape_with_order((h, w, 1)).unwrap();
        self.push(y.into_dyn(), Op::ColTo3d { x, i })
    }

    /// Broadcast a `[1, K]` slot to the `[H, W, K]` lattice.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let k = xv.ncols();
        let y = xv.broadcast((h * w, k)).unwrap().to_owned().into_shape_with_order((h, w, k)).unwrap();
        self.push(y.into_dyn(), Op::BroadcastSpatial { x })
    }

    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let y = ndarray::concatenate(Axis(2), &[av, bv]).expect("channel concat");
        self.push(y.into_dyn(), Op::ConcatC { a, b })
    }

    pub fn slice_c(&mut self, x: Var, from: usize, to: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let y = xv.slice(ndarray::s![.., .., from..to]).to_owned();
        self.push(y.into_dyn(), Op::SliceC { x, from, to })
    }

    /// `sum_i flows[i] * masks[i]` with masks `[H, W, 1]` broadcast over the
    /// flow channels, summed in canonical order across slots.
    pub fn weighted_sum_slots(&mut self, flows: &[Var], masks: &[Var]) -> Var {
        assert_eq!(flows.len(), masks.len());
        assert!(!flows.is_empty() && flows.len() <= SLOT_CAP);
        let n = flows.len();
        let dim = self.nodes[flows[0].0].value.shape().to_vec();
        let (h, w, c) = (dim[0], dim[1], dim[2]);
        let mut y = ArrayD::<F>::zeros(IxDyn(&[h, w, c]));
        let mut buf = [F::zero(); SLOT_CAP];
        {
            let fl: Vec<&ArrayD<F>> = flows.iter().map(|v| &self.nodes[v.0].value).collect();
            let ms: Vec<&ArrayD<F>> = masks.iter().map(|v| &self.nodes[v.0].value).collect();
            for yy in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        for i in 0..n {
                            buf[i] = fl[i][[yy, xx, ch]] * ms[i][[yy, xx, 0]];
                        }
                        y[[yy, xx, ch]] = canonical_sum(&mut buf[..n]);
                    }
                }
            }
        }
        self.push(y, Op::WeightedSumSlots { flows: flows.to_vec(), masks: masks.to_vec() })
    }

    /// Mean over all elements of `weight * (a - target)^2`, with the fixed
    /// denominator `denom` and the optional `[H, W, 1]` weight broadcast over
    /// channels. Returns a scalar node.
    pub fn wmse(&mut self, a: Var, w: Option<Var>, target: ArrayD<F>, denom: F) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.shape(), target.shape());
        let mut acc = F::zero();
        match w {
            None => {
                for (&p, &t) in av.iter().zip(target.iter()) {
                    let d = p - t;
                    acc = acc + d * d;
                }
            }
            Some(wv) => {
                let wv = self.nodes[wv.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = av.view().into_dimensionality::<Ix3>().unwrap();
                let t3 = target.view().into_dimensionality::<Ix3>().unwrap();
                let (h, wd, c) = a3.dim();
                for yy in 0..h {
                    for xx in 0..wd {
                        let wt = wv[[yy, xx, 0]];
                        for ch in 0..c {
                            let d = a3[[yy, xx, ch]] - t3[[yy, xx, ch]];
                            acc = acc + wt * d * d;
                        }
                    }
                }
            }
        }
        let v = ArrayD::from_elem(IxDyn(&[]), acc / denom);
        self.push(v, Op::Wmse { a, w, target, denom })
    }

    /// Scalar linear combination `sum_i coeff_i * terms_i`.
    pub fn axpy(&mut self, terms: &[(Var, F)]) -> Var {
        let mut acc = F::zero();
        for &(v, c) in terms {
            acc = acc + c * self.scalar(v);
        }
        let v = ArrayD::from_elem(IxDyn(&[]), acc);
        self.push(v, Op::Axpy { terms: terms.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.nodes[x.0].value.clone().into_shape_with_order(IxDyn(shape)).expect("reshape");
        self.push(y, Op::Reshape { x })
    }

    /// Backpropagate from the scalar `root`; returns one gradient per
    /// registered parameter, in registration order (zeros when unreached).
    pub fn backward(&self, root: Var) -> Vec<ArrayD<F>> {
        assert!(self.grad, "backward on a no-grad tape");
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<ArrayD<F>> = self
            .param_nodes
            .iter()
            .map(|&i| ArrayD::zeros(self.nodes[i].value.raw_dim()))
            .collect();
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), F::one()));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, g, &mut grads, &mut param_grads);
        }
        param_grads
    }

    fn backprop_node(
        &self,
        i: usize,
        g: ArrayD<F>,
        grads: &mut [Option<ArrayD<F>>],
        param_grads: &mut [ArrayD<F>],
    ) {
        fn acc<F: Real>(grads: &mut [Option<ArrayD<F>>], v: Var, delta: ArrayD<F>) {
            match &mut grads[v.0] {
                Some(g) => *g += &delta,
                slot => *slot = Some(delta),
            }
        }
        let val = |v: Var| &self.nodes[v.0].value;

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param { slot } => param_grads[*slot] += &g,
            Op::Conv2dSame { x, w, b } => {
                let xv = val(*x).view().into_dimensionality::<Ix3>().unwrap();
                let wv = val(*w).view().into_dimensionality::<Ix4>().unwrap();
                let dy = g.view().into_dimensionality::<Ix3>().unwrap();
                let (dx, dw, db) = kernels::conv2d_same_backward(xv, wv, dy);
                acc(grads, *x, dx.into_dyn());
                acc(grads, *w, dw.into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::MatMul { a, b } => {
                let av = as2(val(*a));
                let bv = as2(val(*b));
                let gv = as2(&g);
                let mut da = Array2::<F>::zeros(av.dim());
                ndarray::linalg::general_mat_mul(F::one(), &gv, &bv.t(), F::zero(), &mut da);
                let mut db = Array2::<F>::zeros(bv.dim());
                ndarray::linalg::general_mat_mul(F::one(), &av.t(), &gv, F::zero(), &mut db);
                acc(grads, *a, da.into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::MatMulTA { a, b } => {
                // y = a^T b; da = b g^T, db = a g
                let av = as2(val(*a));
                let bv = as2(val(*b));
                let gv = as2(&g);
                let mut da = Array2::<F>::zeros(av.dim());
                ndarray::linalg::general_mat_mul(F::one(), &bv, &gv.t(), F::zero(), &mut da);
                let mut db = Array2::<F>::zeros(bv.dim());
                ndarray::linalg::general_mat_mul(F::one(), &av, &gv, F::zero(), &mut db);
                acc(grads, *a, da.into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::MatMulNT { a, b } => {
                // y = a b^T; da = g b, db = g^T a
                let av = as2(val(*a));
                let bv = as2(val(*b));
                let gv = as2(&g);
                let mut da = Array2::<F>::zeros(av.dim());
                ndarray::linalg::general_mat_mul(F::one(), &gv, &bv, F::zero(), &mut da);
                let mut db = Array2::<F>::zeros(bv.dim());
                ndarray::linalg::general_mat_mul(F::one(), &gv.t(), &av, F::zero(), &mut db);
                acc(grads, *a, da.into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::AddRowBcast { x, b } => {
                let db = as2(&g).sum_axis(Axis(0));
                acc(grads, *x, g);
                acc(grads, *b, db.into_dyn());
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g);
            }
            Op::Mul { a, b } => {
                let da = &g * val(*b);
                let db = &g * val(*a);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Affine { x, alpha } => {
                acc(grads, *x, g.mapv(|v| v * *alpha));
            }
            Op::Relu { x } => {
                let y = &self.nodes[i].value;
                let dx = ndarray::Zip::from(&g).and(y).map_collect(|&gi, &yi| if yi > F::zero() { gi } else { F::zero() });
                acc(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[i].value;
                let dx = ndarray::Zip::from(&g).and(y).map_collect(|&gi, &yi| gi * yi * (F::one() - yi));
                acc(grads, *x, dx);
            }
            Op::Tanh { x } => {
                let y = &self.nodes[i].value;
                let dx = ndarray::Zip::from(&g).and(y).map_collect(|&gi, &yi| gi * (F::one() - yi * yi));
                acc(grads, *x, dx);
            }
            Op::LayerNormRows { x, gamma, beta, mean, inv_std } => {
                let xv = as2(val(*x));
                let gv = as2(&g);
                let gammav = val(*gamma).view().into_dimensionality::<Ix1>().unwrap();
                let (rows, k) = xv.dim();
                let kf = F::from_f64(k as f64);
                let mut dx = Array2::<F>::zeros((rows, k));
                let mut dgamma = Array1::<F>::zeros(k);
                let mut dbeta = Array1::<F>::zeros(k);
                for r in 0..rows {
                    let istd = inv_std[r];
                    let mu = mean[r];
                    let mut m1 = F::zero(); // mean of dxhat
                    let mut m2 = F::zero(); // mean of dxhat * xhat
                    for c in 0..k {
                        let xhat = (xv[[r, c]] - mu) * istd;
                        let dxhat = gv[[r, c]] * gammav[c];
                        m1 = m1 + dxhat;
                        m2 = m2 + dxhat * xhat;
                        dgamma[c] = dgamma[c] + gv[[r, c]] * xhat;
                        dbeta[c] = dbeta[c] + gv[[r, c]];
                    }
                    m1 = m1 / kf;
                    m2 = m2 / kf;
                    for c in 0..k {
                        let xhat = (xv[[r, c]] - mu) * istd;
                        let dxhat = gv[[r, c]] * gammav[c];
                        dx[[r, c]] = istd * (dxhat - m1 - xhat * m2);
                    }
                }
                acc(grads, *x, dx.into_dyn());
                acc(grads, *gamma, dgamma.into_dyn());
                acc(grads, *beta, dbeta.into_dyn());
            }
            Op::SoftmaxSlots { x } => {
                let y = as2(&self.nodes[i].value);
                let gv = as2(&g);
                let (rows, n) = y.dim();
                let mut dx = Array2::<F>::zeros((rows, n));
                let mut buf = [F::zero(); SLOT_CAP];
                for r in 0..rows {
                    for j in 0..n {
                        buf[j] = y[[r, j]] * gv[[r, j]];
                    }
                    let mut tmp = buf;
                    let dot = canonical_sum(&mut tmp[..n]);
                    for j in 0..n {
                        dx[[r, j]] = y[[r, j]] * (gv[[r, j]] - dot);
                    }
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::ColSums { x } => {
                let xv = as2(val(*x));
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let dx = gv.broadcast(xv.dim()).unwrap().to_owned();
                acc(grads, *x, dx.into_dyn());
            }
            Op::ScaleRowsByInv { x, s, eps } => {
                let xv = as2(val(*x));
                let sv = val(*s).view().into_dimensionality::<Ix1>().unwrap();
                let gv = as2(&g);
                let (n, k) = xv.dim();
                let mut dx = Array2::<F>::zeros((n, k));
                let mut ds = Array1::<F>::zeros(n);
                for r in 0..n {
                    let inv = F::one() / (sv[r] + *eps);
                    let mut dot = F::zero();
                    for c in 0..k {
                        dx[[r, c]] = gv[[r, c]] * inv;
                        dot = dot + gv[[r, c]] * xv[[r, c]];
                    }
                    ds[r] = -inv * inv * dot;
                }
                acc(grads, *x, dx.into_dyn());
                acc(grads, *s, ds.into_dyn());
            }
            Op::Row { x, i: ri } => {
                let xv = as2(val(*x));
                let mut dx = Array2::<F>::zeros(xv.dim());
                dx.row_mut(*ri).assign(&as2(&g).row(0));
                acc(grads, *x, dx.into_dyn());
            }
            Op::StackCols { xs } => {
                let gv = as2(&g);
                for (j, &v) in xs.iter().enumerate() {
                    let shape = val(v).raw_dim();
                    let dx = gv.column(j).to_owned().into_shape_with_order(shape).unwrap();
                    acc(grads, v, dx);
                }
            }
            Op::ColTo3d { x, i: ci } => {
                let xv = as2(val(*x));
                let mut dx = Array2::<F>::zeros(xv.dim());
                let gflat: Vec<F> = g.iter().copied().collect();
                for (r, &gi) in gflat.iter().enumerate() {
                    dx[[r, *ci]] = gi;
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::BroadcastSpatial { x } => {
                let k = val(*x).shape()[1];
                let g2 = g.view().into_shape_with_order((g.len() / k, k)).unwrap();
                let dx = g2.sum_axis(Axis(0)).insert_axis(Axis(0));
                acc(grads, *x, dx.into_dyn());
            }
            Op::ConcatC { a, b } => {
                let ca = val(*a).shape()[2];
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let da = g3.slice(ndarray::s![.., .., ..ca]).to_owned();
                let db = g3.slice(ndarray::s![.., .., ca..]).to_owned();
                acc(grads, *a, da.into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::SliceC { x, from, to } => {
                let xv = val(*x).view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<F>::zeros(xv.dim());
                dx.slice_mut(ndarray::s![.., .., *from..*to])
                    .assign(&g.view().into_dimensionality::<Ix3>().unwrap());
                acc(grads, *x, dx.into_dyn());
            }
            Op::WeightedSumSlots { flows, masks } => {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (h, w, c) = g3.dim();
                for (fv, mv) in flows.iter().zip(masks.iter()) {
                    let f3 = val(*fv).view().into_dimensionality::<Ix3>().unwrap();
                    let m3 = val(*mv).view().into_dimensionality::<Ix3>().unwrap();
                    let mut df = ndarray::Array3::<F>::zeros((h, w, c));
                    let mut dm = ndarray::Array3::<F>::zeros((h, w, 1));
                    for yy in 0..h {
                        for xx in 0..w {
                            let m = m3[[yy, xx, 0]];
                            let mut s = F::zero();
                            for ch in 0..c {
                                let gi = g3[[yy, xx, ch]];
                                df[[yy, xx, ch]] = gi * m;
                                s = s + gi * f3[[yy, xx, ch]];
                            }
                            dm[[yy, xx, 0]] = s;
                        }
                    }
                    acc(grads, *fv, df.into_dyn());
                    acc(grads, *mv, dm.into_dyn());
                }
            }
            Op::Wmse { a, w, target, denom } => {
                let gs = *g.first().unwrap();
                let av = val(*a);
                let scale = F::from_f64(2.0) * gs / *denom;
                match w {
                    None => {
                        let da = ndarray::Zip::from(av).and(target).map_collect(|&p, &t| scale * (p - t));
                        acc(grads, *a, da);
                    }
                    Some(wv) => {
                        let w3 = val(*wv).view().into_dimensionality::<Ix3>().unwrap();
                        let a3 = av.view().into_dimensionality::<Ix3>().unwrap();
                        let t3 = target.view().into_dimensionality::<Ix3>().unwrap();
                        let (h, wd, c) = a3.dim();
                        let mut da = ndarray::Array3::<F>::zeros((h, wd, c));
                        let mut dw = ndarray::Array3::<F>::zeros((h, wd, 1));
                        for yy in 0..h {
                            for xx in 0..wd {
                                let wt = w3[[yy, xx, 0]];
                                let mut s = F::zero();
                                for ch in 0..c {
                                    let d = a3[[yy, xx, ch]] - t3[[yy, xx, ch]];
                                    da[[yy, xx, ch]] = scale * wt * d;
                                    s = s + d * d;
                                }
                                dw[[yy, xx, 0]] = gs * s / *denom;
                            }
                        }
                        acc(grads, *a, da.into_dyn());
                        acc(grads, *wv, dw.into_dyn());
                    }
                }
            }
            Op::Axpy { terms } => {
                let gs = *g.first().unwrap();
                for &(v, cf) in terms {
                    acc(grads, v, ArrayD::from_elem(IxDyn(&[]), gs * cf));
                }
            }
            Op::Reshape { x } => {
                let dx = g.into_shape_with_order(val(*x).raw_dim()).unwrap();
                acc(grads, *x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Finite-difference check of a scalar-valued graph with respect to one
    /// input array. `build` receives (tape, input-var) and returns the root.
    fn fd_check(shape: &[usize], seed: u64, build: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0));

        let mut tape = Tape::new(true);
        let xv = tape.param(&x0);
        let root = build(&mut tape, xv);
        let analytic = tape.backward(root).remove(0);

        let eval = |x: &ArrayD<f64>| {
            let mut t = Tape::new(false);
            let xv = t.constant(x.clone());
            let r = build(&mut t, xv);
            t.scalar(r)
        };
        let h = 1e-6;
        for idx in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                (an - fd).abs() / denom < 1e-5,
                "idx {idx}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn conv_grads_match_fd() {
        fd_check(&[4, 5, 2], 1, |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(100);
            let w = ArrayD::from_shape_fn(IxDyn(&[3, 3, 2, 3]), |_| rng.gen_range(-0.5..0.5));
            let b = ArrayD::from_shape_fn(IxDyn(&[3]), |_| rng.gen_range(-0.5..0.5));
            let wv = t.constant(w);
            let bv = t.constant(b);
            let y = t.conv2d_same(x, wv, bv);
            let y = t.relu(y);
            let target = ArrayD::zeros(IxDyn(&[4, 5, 3]));
            t.wmse(y, None, target, 60.0)
        });
    }

    #[test]
    fn conv_weight_grads_match_fd() {
        fd_check(&[3, 3, 2, 3], 2, |t, w| {
            let mut rng = ChaCha8Rng::seed_from_u64(101);
            let x = ArrayD::from_shape_fn(IxDyn(&[4, 5, 2]), |_| rng.gen_range(-0.5..0.5));
            let b = ArrayD::from_shape_fn(IxDyn(&[3]), |_| rng.gen_range(-0.5..0.5));
            let xv = t.constant(x);
            let bv = t.constant(b);
            let y = t.conv2d_same(xv, w, bv);
            let target = ArrayD::from_elem(IxDyn(&[4, 5, 3]), 0.3);
            t.wmse(y, None, target, 60.0)
        });
    }

    #[test]
    fn attention_block_grads_match_fd() {
        // layer norm + projections + slot softmax + weighted mean, the exact
        // shape of one binding iteration
        fd_check(&[6, 4], 3, |t, feats| {
            let mut rng = ChaCha8Rng::seed_from_u64(102);
            let slots = ArrayD::from_shape_fn(IxDyn(&[2, 4]), |_| rng.gen_range(-1.0..1.0));
            let wq = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| rng.gen_range(-0.7..0.7));
            let wk = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| rng.gen_range(-0.7..0.7));
            let wv_ = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| rng.gen_range(-0.7..0.7));
            let gamma = ArrayD::from_elem(IxDyn(&[4]), 1.0);
            let beta = ArrayD::zeros(IxDyn(&[4]));
            let sv = t.constant(slots);
            let wq = t.constant(wq);
            let wk = t.constant(wk);
            let wv_ = t.constant(wv_);
            let ga = t.constant(gamma);
            let be = t.constant(beta);
            let nf = t.layer_norm_rows(feats, ga, be, 1e-5);
            let k = t.matmul(nf, wk);
            let v = t.matmul(nf, wv_);
            let q = t.matmul(sv, wq);
            let logits = t.matmul_nt(k, q); // [6, 2]
            let logits = t.affine(logits, 0.5, 0.0);
            let att = t.softmax_slots(logits);
            let sums = t.col_sums(att);
            let upd = t.matmul_ta(att, v); // [2, 4]
            let upd = t.scale_rows_by_inv(upd, sums, 1e-8);
            let target = ArrayD::zeros(IxDyn(&[2, 4]));
            t.wmse(upd, None, target, 8.0)
        });
    }

    #[test]
    fn softmax_stack_compose_grads_match_fd() {
        fd_check(&[3, 4, 1], 4, |t, logit0| {
            let mut rng = ChaCha8Rng::seed_from_u64(103);
            let logit1 = ArrayD::from_shape_fn(IxDyn(&[3, 4, 1]), |_| rng.gen_range(-1.0..1.0));
            let f0 = ArrayD::from_shape_fn(IxDyn(&[3, 4, 2]), |_| rng.gen_range(0.0..1.0));
            let f1 = ArrayD::from_shape_fn(IxDyn(&[3, 4, 2]), |_| rng.gen_range(0.0..1.0));
            let target = ArrayD::from_shape_fn(IxDyn(&[3, 4, 2]), |_| rng.gen_range(0.0..1.0));
            let l1 = t.constant(logit1);
            let f0 = t.constant(f0);
            let f1 = t.constant(f1);
            let stack = t.stack_cols(&[logit0, l1]);
            let masks = t.softmax_slots(stack);
            let m0 = t.col_to_3d(masks, 0, 3, 4);
            let m1 = t.col_to_3d(masks, 1, 3, 4);
            let composite = t.weighted_sum_slots(&[f0, f1], &[m0, m1]);
            let recon = t.wmse(composite, None, target.clone(), 24.0);
            let one_minus_m0 = t.affine(m0, -1.0, 1.0);
            let sep = t.wmse(f1, Some(one_minus_m0), target, 24.0);
            t.axpy(&[(recon, 1.0), (sep, -0.25)])
        });
    }

    #[test]
    fn misc_op_grads_match_fd() {
        fd_check(&[2, 5], 5, |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(104);
            let b = ArrayD::from_shape_fn(IxDyn(&[5]), |_| rng.gen_range(-0.5..0.5));
            let bv = t.constant(b);
            let y = t.add_row_bcast(x, bv);
            let y = t.tanh(y);
            let r0 = t.row(y, 0);
            let r1 = t.row(y, 1);
            let bc = t.broadcast_spatial(r0, 2, 3); // [2,3,5]
            let bc2 = t.broadcast_spatial(r1, 2, 3);
            let cat = t.concat_c(bc, bc2); // [2,3,10]
            let sl = t.slice_c(cat, 2, 7);
            let sg = t.sigmoid(sl);
            let target = ArrayD::from_elem(IxDyn(&[2, 3, 5]), 0.4);
            t.wmse(sg, None, target, 30.0)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let x0 = ArrayD::from_elem(IxDyn(&[2, 2]), 1.5);
        let mut tape = Tape::new(true);
        let x = tape.param(&x0);
        let d = tape.detach(x);
        let y = tape.mul(d, d);
        let flat = tape.reshape(y, &[1, 4]);
        let target = ArrayD::zeros(IxDyn(&[1, 4]));
        let loss = tape.wmse(flat, None, target, 4.0);
        let grads = tape.backward(loss);
        assert!(grads[0].iter().all(|&g| g == 0.0));
    }
}
