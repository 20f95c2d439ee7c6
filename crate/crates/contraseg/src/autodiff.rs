//! Reverse-mode autodiff over dynamically shaped ndarray tensors.
//!
//! A [`Graph`] is a disposable tape: build it per batch, run [`Graph::backward`]
//! once, read gradients off the leaves, drop the whole thing. Values are kept
//! in standard (row-major) layout at every node so reshapes never copy.
//!
//! Gradient-tracked inputs are created with [`Graph::leaf`]; inputs that must
//! never receive gradient (data, frozen or momentum-updated parameters) are
//! created with [`Graph::constant`] — the stop-gradient contract is structural,
//! not a runtime flag.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, ArrayD, ArrayViewD, Axis, Ix2, IxDyn};

use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

enum Op<F: Scalar> {
    /// Leaf or constant; no parents.
    Source,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, F),
    AddScalar(usize),
    AddBias(usize, usize),
    Relu(usize),
    Gelu(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Roll(usize, isize, isize),
    Repeat0(usize, usize),
    ConcatLast(Vec<usize>),
    Matmul(usize, usize),
    Bmm(usize, usize),
    BmmNt(usize, usize),
    MeanAll(usize),
    MeanAxis(usize, usize),
    SoftmaxLast(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: ArrayD<F>,
        inv_std: ArrayD<F>,
    },
    L2NormalizeLast {
        x: usize,
        inv_norm: ArrayD<F>,
    },
    GatherRows(usize, Vec<usize>),
    CrossEntropyRows {
        logits: usize,
        targets: Vec<usize>,
        probs: ArrayD<F>,
    },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Disposable computation tape.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn to_standard<F: Scalar>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        let mut out = ArrayD::zeros(a.raw_dim());
        out.assign(&a);
        out
    }
}

fn reshape_std<F: Scalar>(a: ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    debug_assert_eq!(a.len(), shape.iter().product::<usize>(), "reshape length");
    to_standard(a)
        .into_shape_with_order(IxDyn(shape))
        .expect("standard layout reshape")
}

fn materialize_permuted<F: Scalar>(a: ArrayViewD<'_, F>, perm: &[usize]) -> ArrayD<F> {
    let v = a.permuted_axes(IxDyn(perm));
    let mut out = ArrayD::zeros(v.raw_dim());
    out.assign(&v);
    out
}

fn roll_hw<F: Scalar>(x: &ArrayD<F>, sh: isize, sw: isize) -> ArrayD<F> {
    let (h, w) = (x.shape()[1] as isize, x.shape()[2] as isize);
    let mut out = ArrayD::zeros(x.raw_dim());
    for i in 0..h {
        let ti = (i + sh).rem_euclid(h);
        for j in 0..w {
            let tj = (j + sw).rem_euclid(w);
            out.slice_mut(s![.., ti, tj, ..])
                .assign(&x.slice(s![.., i, j, ..]));
        }
    }
    out
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<F>, requires_grad: bool, op: Op<F>) -> Tensor {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn rg(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Gradient-tracked input.
    pub fn leaf(&mut self, value: ArrayD<F>) -> Tensor {
        self.push(value, true, Op::Source)
    }

    /// Input excluded from differentiation (data, stop-gradient parameters).
    pub fn constant(&mut self, value: ArrayD<F>) -> Tensor {
        self.push(value, false, Op::Source)
    }

    pub fn value(&self, t: Tensor) -> &ArrayD<F> {
        &self.nodes[t.0].value
    }

    /// Value of a 0-dim (scalar) node.
    pub fn scalar_value(&self, t: Tensor) -> F {
        *self.nodes[t.0]
            .value
            .first()
            .expect("scalar node has one element")
    }

    /// Gradient accumulated at `t` by the last `backward` call.
    /// `None` for constants and for nodes outside the loss cone.
    pub fn grad(&self, t: Tensor) -> Option<&ArrayD<F>> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    // ── elementwise ────────────────────────────────────────────────────────

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(self.shape(a), self.shape(b), "div shapes");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Tensor, c: F) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(v, rg, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Tensor, c: F) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(v, rg, Op::AddScalar(a.0))
    }

    /// Broadcast-add a vector over the last axis: `x[..., c] + b[c]`.
    pub fn add_bias(&mut self, x: Tensor, b: Tensor) -> Tensor {
        let c = *self.shape(x).last().expect("add_bias input rank >= 1");
        assert_eq!(self.shape(b), [c], "bias length");
        let mut v = self.nodes[x.0].value.clone();
        let bv = &self.nodes[b.0].value;
        for mut lane in v.lanes_mut(Axis(v.ndim() - 1)) {
            lane += bv;
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(v, rg, Op::AddBias(x.0, b.0))
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let v = self.nodes[x.0].value.mapv(|t| t.max(F::zero()));
        let rg = self.rg(x);
        self.push(v, rg, Op::Relu(x.0))
    }

    /// GELU, tanh approximation (matches a standard transformer stack).
    pub fn gelu(&mut self, x: Tensor) -> Tensor {
        let c0 = F::cast(GELU_C0);
        let c1 = F::cast(GELU_C1);
        let half = F::cast(0.5);
        let v = self.nodes[x.0]
            .value
            .mapv(|t| half * t * (F::one() + (c0 * (t + c1 * t * t * t)).tanh()));
        let rg = self.rg(x);
        self.push(v, rg, Op::Gelu(x.0))
    }

    // ── shape ──────────────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Tensor {
        let v = reshape_std(self.nodes[x.0].value.clone(), shape);
        let rg = self.rg(x);
        self.push(v, rg, Op::Reshape(x.0))
    }

    pub fn permute(&mut self, x: Tensor, perm: &[usize]) -> Tensor {
        let v = materialize_permuted(self.nodes[x.0].value.view(), perm);
        let rg = self.rg(x);
        self.push(v, rg, Op::Permute(x.0, perm.to_vec()))
    }

    /// Cyclic shift along axes 1 and 2 of a `[B, H, W, C]` tensor.
    pub fn roll_hw(&mut self, x: Tensor, sh: isize, sw: isize) -> Tensor {
        assert_eq!(self.nodes[x.0].value.ndim(), 4, "roll_hw rank");
        let v = roll_hw(&self.nodes[x.0].value, sh, sw);
        let rg = self.rg(x);
        self.push(v, rg, Op::Roll(x.0, sh, sw))
    }

    /// Stack `n` copies along axis 0: `[d0, ...] -> [n*d0, ...]`.
    pub fn repeat0(&mut self, x: Tensor, n: usize) -> Tensor {
        let xv = &self.nodes[x.0].value;
        let mut shape = xv.shape().to_vec();
        shape[0] *= n;
        let mut v = ArrayD::zeros(IxDyn(&shape));
        let d0 = xv.shape()[0];
        for i in 0..n {
            v.slice_axis_mut(Axis(0), (i * d0..(i + 1) * d0).into())
                .assign(xv);
        }
        let rg = self.rg(x);
        self.push(v, rg, Op::Repeat0(x.0, n))
    }

    pub fn concat_last(&mut self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| self.nodes[t.0].value.view()).collect();
        let last = views[0].ndim() - 1;
        let v = to_standard(concatenate(Axis(last), &views).expect("concat shapes"));
        let rg = parts.iter().any(|t| self.rg(*t));
        self.push(v, rg, Op::ConcatLast(parts.iter().map(|t| t.0).collect()))
    }

    // ── linear algebra ─────────────────────────────────────────────────────

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2, "matmul lhs rank");
        assert_eq!(sb.len(), 2, "matmul rhs rank");
        assert_eq!(sa[1], sb[0], "matmul inner dim");
        let (m, n) = (sa[0], sb[1]);
        let mut v = ArrayD::zeros(IxDyn(&[m, n]));
        {
            let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let mut cv = v.view_mut().into_dimensionality::<Ix2>().unwrap();
            general_mat_mul(F::one(), &av, &bv, F::zero(), &mut cv);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Matmul(a.0, b.0))
    }

    /// Batched matmul `[G, M, K] x [G, K, N] -> [G, M, N]`.
    pub fn bmm(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa[0], sb[0], "bmm groups");
        assert_eq!(sa[2], sb[1], "bmm inner dim");
        let (g, m, n) = (sa[0], sa[1], sb[2]);
        let mut v = ArrayD::zeros(IxDyn(&[g, m, n]));
        for i in 0..g {
            let av = self.nodes[a.0].value.slice(s![i, .., ..]);
            let bv = self.nodes[b.0].value.slice(s![i, .., ..]);
            let mut cv = v.slice_mut(s![i, .., ..]);
            general_mat_mul(F::one(), &av, &bv, F::zero(), &mut cv);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Bmm(a.0, b.0))
    }

    /// Batched matmul against a transposed rhs: `[G, M, K] x [G, N, K] -> [G, M, N]`.
    pub fn bmm_nt(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa[0], sb[0], "bmm_nt groups");
        assert_eq!(sa[2], sb[2], "bmm_nt inner dim");
        let (g, m, n) = (sa[0], sa[1], sb[1]);
        let mut v = ArrayD::zeros(IxDyn(&[g, m, n]));
        for i in 0..g {
            let av = self.nodes[a.0].value.slice(s![i, .., ..]);
            let bv = self.nodes[b.0].value.slice(s![i, .., ..]);
            let bt = bv.reversed_axes();
            let mut cv = v.slice_mut(s![i, .., ..]);
            general_mat_mul(F::one(), &av, &bt, F::zero(), &mut cv);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::BmmNt(a.0, b.0))
    }

    // ── reductions and normalizations ──────────────────────────────────────

    /// Mean over all elements; yields a 0-dim node.
    pub fn mean_all(&mut self, x: Tensor) -> Tensor {
        let xv = &self.nodes[x.0].value;
        let n = F::cast(xv.len());
        let m = xv.iter().fold(F::zero(), |acc, &t| acc + t) / n;
        let v = ArrayD::from_elem(IxDyn(&[]), m);
        let rg = self.rg(x);
        self.push(v, rg, Op::MeanAll(x.0))
    }

    pub fn mean_axis(&mut self, x: Tensor, axis: usize) -> Tensor {
        let xv = &self.nodes[x.0].value;
        let d = F::cast(xv.shape()[axis]);
        let v = xv.sum_axis(Axis(axis)).mapv(|t| t / d);
        let rg = self.rg(x);
        self.push(v, rg, Op::MeanAxis(x.0, axis))
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_last(&mut self, x: Tensor) -> Tensor {
        let mut v = self.nodes[x.0].value.clone();
        let last = v.ndim() - 1;
        for mut lane in v.lanes_mut(Axis(last)) {
            let mx = lane.iter().cloned().fold(F::neg_infinity(), F::max);
            lane.mapv_inplace(|t| (t - mx).exp());
            let sum = lane.iter().fold(F::zero(), |acc, &t| acc + t);
            lane.mapv_inplace(|t| t / sum);
        }
        let rg = self.rg(x);
        self.push(v, rg, Op::SoftmaxLast(x.0))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: F) -> Tensor {
        let xv = &self.nodes[x.0].value;
        let last = xv.ndim() - 1;
        let c = xv.shape()[last];
        assert_eq!(self.shape(gamma), [c], "layer_norm gamma");
        assert_eq!(self.shape(beta), [c], "layer_norm beta");
        let n = F::cast(c);
        let mut xhat = xv.clone();
        let mut inv_std_shape = xv.shape().to_vec();
        inv_std_shape[last] = 1;
        let mut inv_std = ArrayD::zeros(IxDyn(&inv_std_shape));
        for (mut lane, is) in xhat.lanes_mut(Axis(last)).into_iter().zip(inv_std.iter_mut()) {
            let mean = lane.iter().fold(F::zero(), |a, &t| a + t) / n;
            let var = lane.iter().fold(F::zero(), |a, &t| a + (t - mean) * (t - mean)) / n;
            let istd = F::one() / (var + eps).sqrt();
            lane.mapv_inplace(|t| (t - mean) * istd);
            *is = istd;
        }
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut v = xhat.clone();
        for mut lane in v.lanes_mut(Axis(last)) {
            lane.zip_mut_with(gv, |t, &g| *t *= g);
            lane += bv;
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            v,
            rg,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        )
    }

    /// Normalize the last axis to unit L2 norm (eps keeps zero rows finite).
    pub fn l2_normalize_last(&mut self, x: Tensor, eps: F) -> Tensor {
        let xv = &self.nodes[x.0].value;
        let last = xv.ndim() - 1;
        let mut inv_shape = xv.shape().to_vec();
        inv_shape[last] = 1;
        let mut inv_norm = ArrayD::zeros(IxDyn(&inv_shape));
        let mut v = xv.clone();
        for (mut lane, iv) in v.lanes_mut(Axis(last)).into_iter().zip(inv_norm.iter_mut()) {
            let ss = lane.iter().fold(F::zero(), |a, &t| a + t * t);
            let inv = F::one() / (ss + eps).sqrt();
            lane.mapv_inplace(|t| t * inv);
            *iv = inv;
        }
        let rg = self.rg(x);
        self.push(
            v,
            rg,
            Op::L2NormalizeLast {
                x: x.0,
                inv_norm,
            },
        )
    }

    /// Row gather: `table[idx[i], :]` stacked into `[idx.len(), C]`.
    pub fn gather_rows(&mut self, table: Tensor, idx: &[usize]) -> Tensor {
        let tv = &self.nodes[table.0].value;
        assert_eq!(tv.ndim(), 2, "gather_rows table rank");
        let c = tv.shape()[1];
        let mut v = ArrayD::zeros(IxDyn(&[idx.len(), c]));
        for (i, &r) in idx.iter().enumerate() {
            v.slice_mut(s![i, ..]).assign(&tv.slice(s![r, ..]));
        }
        let rg = self.rg(table);
        self.push(v, rg, Op::GatherRows(table.0, idx.to_vec()))
    }

    /// Mean cross-entropy of `[N, C]` logits against class indices.
    pub fn cross_entropy_rows(&mut self, logits: Tensor, targets: &[usize]) -> Tensor {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.ndim(), 2, "cross_entropy logits rank");
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(n, targets.len(), "cross_entropy target count");
        let mut probs = lv.clone();
        let mut loss = F::zero();
        for (mut lane, &t) in probs.lanes_mut(Axis(1)).into_iter().zip(targets.iter()) {
            debug_assert!(t < c, "target class in range");
            let mx = lane.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = lane.iter().fold(F::zero(), |a, &z| a + (z - mx).exp()).ln() + mx;
            loss = loss + lse - lane[t];
            lane.mapv_inplace(|z| (z - mx).exp());
            let sum = lane.iter().fold(F::zero(), |a, &z| a + z);
            lane.mapv_inplace(|z| z / sum);
        }
        loss /= F::cast(n);
        let v = ArrayD::from_elem(IxDyn(&[]), loss);
        let rg = self.rg(logits);
        self.push(
            v,
            rg,
            Op::CrossEntropyRows {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    // ── backward ───────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Accumulated gradients stay
    /// available on gradient-tracked sources until the next call.
    pub fn backward(&mut self, loss: Tensor) {
        assert!(
            self.nodes[loss.0].value.len() == 1,
            "backward requires a scalar loss"
        );
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(ArrayD::from_elem(
            self.nodes[loss.0].value.raw_dim(),
            F::one(),
        ));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                self.grads[i] = None;
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let keep = matches!(self.nodes[i].op, Op::Source);
            self.propagate(i, &g);
            if keep {
                self.grads[i] = Some(g);
            }
        }
    }

    fn accum(&mut self, id: usize, delta: ArrayD<F>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &ArrayD<F>) {
        // Ops are matched by moving cheap metadata out; parent values are read
        // immutably from the tape.
        match &self.nodes[i].op {
            Op::Source => {}
            &Op::Add(a, b) => {
                self.accum(a, g.clone());
                self.accum(b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accum(a, g.clone());
                self.accum(b, g.mapv(|t| -t));
            }
            &Op::Mul(a, b) => {
                let da = g * &self.nodes[b].value;
                let db = g * &self.nodes[a].value;
                self.accum(a, da);
                self.accum(b, db);
            }
            &Op::Div(a, b) => {
                let y = &self.nodes[i].value;
                let da = g / &self.nodes[b].value;
                let mut db = g * y;
                db.zip_mut_with(&self.nodes[b].value, |d, &bv| *d = -*d / bv);
                self.accum(a, da);
                self.accum(b, db);
            }
            &Op::Scale(a, c) => {
                self.accum(a, g.mapv(|t| t * c));
            }
            &Op::AddScalar(a) => {
                self.accum(a, g.clone());
            }
            &Op::AddBias(x, b) => {
                let last = g.ndim() - 1;
                let c = g.shape()[last];
                let mut db = ArrayD::zeros(IxDyn(&[c]));
                for lane in g.lanes(Axis(last)) {
                    db.zip_mut_with(&lane, |d, &t| *d += t);
                }
                self.accum(x, g.clone());
                self.accum(b, db);
            }
            &Op::Relu(x) => {
                let mut dx = g.clone();
                dx.zip_mut_with(&self.nodes[x].value, |d, &t| {
                    if t <= F::zero() {
                        *d = F::zero()
                    }
                });
                self.accum(x, dx);
            }
            &Op::Gelu(x) => {
                let c0 = F::cast(GELU_C0);
                let c1 = F::cast(GELU_C1);
                let half = F::cast(0.5);
                let three = F::cast(3.0);
                let mut dx = g.clone();
                dx.zip_mut_with(&self.nodes[x].value, |d, &t| {
                    let u = c0 * (t + c1 * t * t * t);
                    let th = u.tanh();
                    let du = c0 * (F::one() + three * c1 * t * t);
                    let deriv = half * (F::one() + th) + half * t * (F::one() - th * th) * du;
                    *d *= deriv;
                });
                self.accum(x, dx);
            }
            &Op::Reshape(x) => {
                let shape = self.nodes[x].value.shape().to_vec();
                self.accum(x, reshape_std(g.clone(), &shape));
            }
            Op::Permute(x, perm) => {
                let (x, perm) = (*x, perm.clone());
                let mut inv = vec![0usize; perm.len()];
                for (to, &from) in perm.iter().enumerate() {
                    inv[from] = to;
                }
                self.accum(x, materialize_permuted(g.view(), &inv));
            }
            &Op::Roll(x, sh, sw) => {
                self.accum(x, roll_hw(g, -sh, -sw));
            }
            &Op::Repeat0(x, n) => {
                let d0 = self.nodes[x].value.shape()[0];
                let mut dx = ArrayD::zeros(self.nodes[x].value.raw_dim());
                for i in 0..n {
                    dx += &g.slice_axis(Axis(0), (i * d0..(i + 1) * d0).into());
                }
                self.accum(x, dx);
            }
            Op::ConcatLast(parts) => {
                let parts = parts.clone();
                let last = g.ndim() - 1;
                let mut offset = 0usize;
                for p in parts {
                    let w = *self.nodes[p].value.shape().last().unwrap();
                    let dp = g
                        .slice_axis(Axis(last), (offset..offset + w).into())
                        .to_owned();
                    self.accum(p, dp);
                    offset += w;
                }
            }
            &Op::Matmul(a, b) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[b].value.view().into_dimensionality::<Ix2>().unwrap();
                let mut da = ndarray::Array2::<F>::zeros((av.nrows(), av.ncols()));
                let mut db = ndarray::Array2::<F>::zeros((bv.nrows(), bv.ncols()));
                general_mat_mul(F::one(), &gv, &bv.t(), F::zero(), &mut da.view_mut());
                general_mat_mul(F::one(), &av.t(), &gv, F::zero(), &mut db.view_mut());
                self.accum(a, da.into_dyn());
                self.accum(b, db.into_dyn());
            }
            &Op::Bmm(a, b) => {
                let gdim = self.nodes[a].value.shape()[0];
                let mut da = ArrayD::zeros(self.nodes[a].value.raw_dim());
                let mut db = ArrayD::zeros(self.nodes[b].value.raw_dim());
                for gi in 0..gdim {
                    let gv2 = g.slice(s![gi, .., ..]);
                    let av = self.nodes[a].value.slice(s![gi, .., ..]);
                    let bv = self.nodes[b].value.slice(s![gi, .., ..]);
                    let mut dav = da.slice_mut(s![gi, .., ..]);
                    general_mat_mul(F::one(), &gv2, &bv.reversed_axes(), F::zero(), &mut dav);
                    let mut dbv = db.slice_mut(s![gi, .., ..]);
                    general_mat_mul(F::one(), &av.reversed_axes(), &gv2, F::zero(), &mut dbv);
                }
                self.accum(a, da);
                self.accum(b, db);
            }
            &Op::BmmNt(a, b) => {
                // y[g] = a[g] @ b[g]^T: da = g @ b, db = g^T @ a
                let gdim = self.nodes[a].value.shape()[0];
                let mut da = ArrayD::zeros(self.nodes[a].value.raw_dim());
                let mut db = ArrayD::zeros(self.nodes[b].value.raw_dim());
                for gi in 0..gdim {
                    let gv2 = g.slice(s![gi, .., ..]);
                    let av = self.nodes[a].value.slice(s![gi, .., ..]);
                    let bv = self.nodes[b].value.slice(s![gi, .., ..]);
                    let mut dav = da.slice_mut(s![gi, .., ..]);
                    general_mat_mul(F::one(), &gv2, &bv, F::zero(), &mut dav);
                    let mut dbv = db.slice_mut(s![gi, .., ..]);
                    general_mat_mul(F::one(), &gv2.reversed_axes(), &av, F::zero(), &mut dbv);
                }
                self.accum(a, da);
                self.accum(b, db);
            }
            &Op::MeanAll(x) => {
                let n = F::cast(self.nodes[x].value.len());
                let gs = *g.first().unwrap() / n;
                self.accum(x, ArrayD::from_elem(self.nodes[x].value.raw_dim(), gs));
            }
            &Op::MeanAxis(x, axis) => {
                let xshape = self.nodes[x].value.shape().to_vec();
                let d = F::cast(xshape[axis]);
                let mut dx = ArrayD::zeros(IxDyn(&xshape));
                let gscaled = g.mapv(|t| t / d);
                for mut sl in dx.axis_iter_mut(Axis(axis)) {
                    sl.assign(&gscaled);
                }
                self.accum(x, dx);
            }
            &Op::SoftmaxLast(x) => {
                let y = &self.nodes[i].value;
                let last = y.ndim() - 1;
                let mut dx = g * y;
                // dx = y * (g - sum(g*y)) done lane by lane
                let dots: Vec<F> = dx
                    .lanes(Axis(last))
                    .into_iter()
                    .map(|l| l.iter().fold(F::zero(), |a, &t| a + t))
                    .collect();
                for ((mut lane, yl), dot) in dx
                    .lanes_mut(Axis(last))
                    .into_iter()
                    .zip(y.lanes(Axis(last)))
                    .zip(dots)
                {
                    lane.zip_mut_with(&yl, |d, &yv| *d -= yv * dot);
                }
                self.accum(x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let last = g.ndim() - 1;
                let c = g.shape()[last];
                let n = F::cast(c);
                let gv = &self.nodes[gamma].value;
                let mut dgamma = ArrayD::zeros(IxDyn(&[c]));
                let mut dbeta = ArrayD::zeros(IxDyn(&[c]));
                let mut dx = ArrayD::zeros(g.raw_dim());
                for (((glane, xl), mut dxl), &istd) in g
                    .lanes(Axis(last))
                    .into_iter()
                    .zip(xhat.lanes(Axis(last)))
                    .zip(dx.lanes_mut(Axis(last)))
                    .zip(inv_std.iter())
                {
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    for k in 0..c {
                        let dxh = glane[k] * gv[k];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xl[k];
                        dgamma[k] += glane[k] * xl[k];
                        dbeta[k] += glane[k];
                    }
                    for k in 0..c {
                        let dxh = glane[k] * gv[k];
                        dxl[k] = istd * (dxh - sum_dxhat / n - xl[k] * sum_dxhat_xhat / n);
                    }
                }
                self.accum(x, dx);
                self.accum(gamma, dgamma);
                self.accum(beta, dbeta);
            }
            Op::L2NormalizeLast { x, inv_norm } => {
                let x = *x;
                let y = &self.nodes[i].value;
                let last = g.ndim() - 1;
                let mut dx = ArrayD::zeros(g.raw_dim());
                for (((glane, yl), mut dxl), &inv) in g
                    .lanes(Axis(last))
                    .into_iter()
                    .zip(y.lanes(Axis(last)))
                    .zip(dx.lanes_mut(Axis(last)))
                    .zip(inv_norm.iter())
                {
                    let dot = glane
                        .iter()
                        .zip(yl.iter())
                        .fold(F::zero(), |a, (&gk, &yk)| a + gk * yk);
                    for k in 0..glane.len() {
                        dxl[k] = (glane[k] - yl[k] * dot) * inv;
                    }
                }
                self.accum(x, dx);
            }
            Op::GatherRows(table, idx) => {
                let (table, idx) = (*table, idx.clone());
                let mut dt = ArrayD::zeros(self.nodes[table].value.raw_dim());
                for (row, &r) in idx.iter().enumerate() {
                    let mut sl = dt.slice_mut(s![r, ..]);
                    sl += &g.slice(s![row, ..]);
                }
                self.accum(table, dt);
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                let gs = *g.first().unwrap();
                let n = F::cast(targets.len());
                let mut dl = probs.clone();
                for (mut lane, &t) in dl.lanes_mut(Axis(1)).into_iter().zip(targets.iter()) {
                    lane[t] -= F::one();
                }
                dl.mapv_inplace(|p| p * gs / n);
                self.accum(logits, dl);
            }
        }
    }
}
