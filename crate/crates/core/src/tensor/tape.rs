use rand::Rng;

use super::value::{numel, Tensor};
use crate::error::{Error, Result};

/// Additive mask value used in place of negative infinity before a softmax.
pub const MASK_VALUE: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    Log(Var),
    LogClamped { x: Var, eps: f64 },
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding { weight: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
    Gather { x: Var, idx: Vec<usize> },
    SumAll(Var),
    SumLast(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape.
///
/// Nodes are appended in execution order, so the vector is already a
/// topological order of the graph. A tape is rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `target`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) {
        if let Some(g) = self.get(v) {
            target.accumulate_grad(g);
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out` (zero on broadcast axes).
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let axis = rank - shape.len() + i;
        strides[axis] = if shape[i] == 1 && out[axis] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output position together with the matching input offsets.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..total {
        f(o, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = row_major_strides(shape);
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

/// `c += a · b` for row-major `a` (m×k) and `b` (k×n), with arbitrary
/// element strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n
    // and m×n (row-major, contiguous) views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf holding a copy of `t`; gradients are tracked when
    /// `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn variable(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, true))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node invariant")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rg = self.rg(a) || self.rg(b);
        if sa == sb {
            let value = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok(self.push(sa, value, op, rg));
        }
        let out = broadcast_shape(&sa, &sb).ok_or(Error::Shape {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (stra, strb) = (aligned_strides(&sa, &out), aligned_strides(&sb, &out));
        let mut value = vec![0.0; numel(&out)];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for_each_broadcast(&out, &stra, &strb, |o, ia, ib| value[o] = f(va[ia], vb[ib]));
        }
        Ok(self.push(out, value, op, rg))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x + s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, Op::AddScalar(a), rg)
    }

    /// `1 - a`, used for the complementary mixing weight.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, op, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `ln(max(a, eps))`; clamped entries pass no gradient.
    pub fn log_clamped(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, move |x| x.max(eps).ln(), Op::LogClamped { x: a, eps })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either 2-D (shared across every leading batch index of `a`) or
    /// carries exactly the same leading batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let shared = sb.len() == 2;
        if !shared && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(err());
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for bi in 0..batch {
                let ao = &va[bi * m * k..(bi + 1) * m * k];
                let bo = if shared { vb } else { &vb[bi * k * n..(bi + 1) * k * n] };
                gemm_acc(m, k, n, ao, k as isize, 1, bo, n as isize, 1, &mut out[bi * m * n..(bi + 1) * m * n]);
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul(a, b), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        let (value, out_shape) = permute_data(self.value(a), &shape, axes);
        let rg = self.rg(a);
        Ok(self.push(out_shape, value, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Shape {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let v = self.value(x);
        if v.iter().any(|z| z.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (outer, len, inner) = axis_layout(&shape, axis);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mx = (0..len).map(|j| v[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    let e = (v[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let axis = self.shape(x).len().checked_sub(1).ok_or(Error::Shape {
            op: "softmax",
            lhs: vec![],
            rhs: vec![],
        })?;
        self.softmax(x, axis)
    }

    /// Layer normalization over the last axis, `eps = 1e-5` on the variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let rows = self.value(x).len() / d;
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        {
            let (v, g, b) = (self.value(x), self.value(gain), self.value(bias));
            for r in 0..rows {
                let row = &v[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let xh = (row[j] - mean) * is;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = xh * g[j] + b[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup: `weight` is `[rows, d]`, output is `ids_shape ++ [d]`.
    pub fn embedding(&mut self, weight: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 || numel(ids_shape) != ids.len() {
            return Err(Error::Shape {
                op: "embedding",
                lhs: ws,
                rhs: ids_shape.to_vec(),
            });
        }
        let (rows, d) = (ws[0], ws[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Vocab(format!("id {bad} out of range for table of {rows} rows")));
        }
        let w = self.value(weight);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&w[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let rg = self.rg(weight);
        Ok(self.push(
            shape,
            out,
            Op::Embedding {
                weight,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. `train == false` or `p == 0` returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let value = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Dropout { x, mask }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or(Error::Contract("concat of zero tensors".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Picks one entry per row along the last axis: `out[r] = x[r, idx[r]]`.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let l = *shape.last().unwrap_or(&0);
        let rows = self.value(x).len().checked_div(l).unwrap_or(0);
        if l == 0 || rows != idx.len() {
            return Err(Error::Shape {
                op: "gather",
                lhs: shape,
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= l) {
            return Err(Error::Shape {
                op: "gather",
                lhs: shape,
                rhs: vec![bad],
            });
        }
        let v = self.value(x);
        let out = idx.iter().enumerate().map(|(r, &i)| v[r * l + i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            shape[..shape.len() - 1].to_vec(),
            out,
            Op::Gather { x, idx: idx.to_vec() },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over the last axis (dropped from the shape).
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let l = *shape.last().ok_or(Error::Shape {
            op: "sum_last",
            lhs: vec![],
            rhs: vec![],
        })?;
        let v = self.value(x);
        let out = if l == 0 {
            vec![0.0; numel(&shape[..shape.len() - 1])]
        } else {
            v.chunks(l).map(|c| c.iter().sum()).collect()
        };
        let rg = self.rg(x);
        Ok(self.push(shape[..shape.len() - 1].to_vec(), out, Op::SumLast(x), rg))
    }

    /// Adds [`MASK_VALUE`] wherever `mask` is true. `mask_shape` must
    /// broadcast against `x`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], mask_shape: &[usize]) -> Result<Var> {
        let m = mask.iter().map(|&b| if b { MASK_VALUE } else { 0.0 }).collect();
        let c = self.constant(mask_shape, m)?;
        self.add(x, c)
    }

    /// Runs reverse accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", ln.shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_broadcast(&self, grads: &mut [Option<Vec<f64>>], out: &[usize], g: &[f64], a: Var, b: Var, da: impl Fn(f64, f64, f64) -> f64, db: impl Fn(f64, f64, f64) -> f64) {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a), self.value(b));
        if sa == sb {
            self.acc(grads, a, |buf| {
                for i in 0..g.len() {
                    buf[i] += da(g[i], va[i], vb[i]);
                }
            });
            self.acc(grads, b, |buf| {
                for i in 0..g.len() {
                    buf[i] += db(g[i], va[i], vb[i]);
                }
            });
            return;
        }
        let (stra, strb) = (aligned_strides(&sa, out), aligned_strides(&sb, out));
        self.acc(grads, a, |buf| for_each_broadcast(out, &stra, &strb, |o, ia, ib| buf[ia] += da(g[o], va[ia], vb[ib])));
        self.acc(grads, b, |buf| for_each_broadcast(out, &stra, &strb, |o, ia, ib| buf[ib] += db(g[o], va[ia], vb[ib])));
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => self.backprop_broadcast(grads, &node.shape, g, a, b, |g, _, _| g, |g, _, _| g),
            &Op::Sub(a, b) => self.backprop_broadcast(grads, &node.shape, g, a, b, |g, _, _| g, |g, _, _| -g),
            &Op::Mul(a, b) => self.backprop_broadcast(grads, &node.shape, g, a, b, |g, _, y| g * y, |g, x, _| g * x),
            &Op::Scale(a, s) => self.acc(grads, a, |buf| buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi * s)),
            &Op::AddScalar(a) | &Op::Reshape(a) => self.acc(grads, a, |buf| buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi)),
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let shared = sb.len() == 2;
                let batch = numel(&sa[..sa.len() - 2]);
                let (va, vb) = (self.value(a), self.value(b));
                self.acc(grads, a, |buf| {
                    for bi in 0..batch {
                        let bo = if shared { vb } else { &vb[bi * k * n..(bi + 1) * k * n] };
                        // dA = dC · Bᵀ
                        gemm_acc(m, n, k, &g[bi * m * n..(bi + 1) * m * n], n as isize, 1, bo, 1, n as isize, &mut buf[bi * m * k..(bi + 1) * m * k]);
                    }
                });
                self.acc(grads, b, |buf| {
                    for bi in 0..batch {
                        let target = if shared { &mut buf[..] } else { &mut buf[bi * k * n..(bi + 1) * k * n] };
                        // dB = Aᵀ · dC
                        gemm_acc(k, m, n, &va[bi * m * k..(bi + 1) * m * k], 1, k as isize, &g[bi * m * n..(bi + 1) * m * n], n as isize, 1, target);
                    }
                });
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (back, _) = permute_data(g, &node.shape, &inverse);
                self.acc(grads, *a, |buf| buf.iter_mut().zip(&back).for_each(|(b, gi)| *b += gi));
            }
            &Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_layout(&node.shape, axis);
                self.acc(grads, x, |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                buf[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            &Op::Log(x) => {
                let v = self.value(x);
                self.acc(grads, x, |buf| (0..g.len()).for_each(|i| buf[i] += g[i] / v[i]));
            }
            &Op::LogClamped { x, eps } => {
                let v = self.value(x);
                self.acc(grads, x, |buf| {
                    (0..g.len()).for_each(|i| {
                        if v[i] > eps {
                            buf[i] += g[i] / v[i]
                        }
                    })
                });
            }
            &Op::Exp(x) => {
                let y = &node.value;
                self.acc(grads, x, |buf| (0..g.len()).for_each(|i| buf[i] += g[i] * y[i]));
            }
            &Op::Sigmoid(x) => {
                let y = &node.value;
                self.acc(grads, x, |buf| (0..g.len()).for_each(|i| buf[i] += g[i] * y[i] * (1.0 - y[i])));
            }
            &Op::Relu(x) => {
                let v = self.value(x);
                self.acc(grads, x, |buf| {
                    (0..g.len()).for_each(|i| {
                        if v[i] > 0.0 {
                            buf[i] += g[i]
                        }
                    })
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *node.shape.last().unwrap();
                let rows = inv_std.len();
                let gv = self.value(*gain);
                self.acc(grads, *x, |buf| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            buf[r * d + j] += scale * (d as f64 * dxh - s1 - xh[j] * s2);
                        }
                    }
                });
                self.acc(grads, *gain, |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(grads, *bias, |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Embedding { weight, ids } => {
                let d = *node.shape.last().unwrap();
                self.acc(grads, *weight, |buf| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            buf[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => self.acc(grads, *x, |buf| (0..g.len()).for_each(|i| buf[i] += g[i] * mask[i])),
            Op::Concat { inputs, axis } => {
                let outer = numel(&node.shape[..*axis]);
                let inner = numel(&node.shape[*axis + 1..]);
                let row = node.shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    self.acc(grads, v, |buf| {
                        for o in 0..outer {
                            for j in 0..len {
                                buf[o * len + j] += g[o * row + offset + j];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Gather { x, idx } => {
                let l = *self.shape(*x).last().unwrap();
                self.acc(grads, *x, |buf| idx.iter().enumerate().for_each(|(r, &i)| buf[r * l + i] += g[r]));
            }
            &Op::SumAll(x) => self.acc(grads, x, |buf| buf.iter_mut().for_each(|b| *b += g[0])),
            &Op::SumLast(x) => {
                let l = *self.shape(x).last().unwrap();
                self.acc(grads, x, |buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b += g[i / l];
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let eye = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = t.matmul(eye, m).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = t.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        match t.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_and_overflow_safe() {
        let mut t = Tape::new();
        let x = t.constant(&[3], vec![0.0; 3]).unwrap();
        let y = t.softmax_last(x).unwrap();
        assert!(close(t.value(y), &[1.0 / 3.0; 3], 1e-15));

        let x = t.constant(&[2], vec![1000.0, 0.0]).unwrap();
        let y = t.softmax_last(x).unwrap();
        assert!(t.value(y).iter().all(|v| v.is_finite()));
        assert!((t.value(y)[0] - 1.0).abs() < 1e-12);
        assert!(t.value(y)[1] < 1e-300 || t.value(y)[1] == 0.0);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut t = Tape::new();
        let x = t.constant(&[2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(t.softmax_last(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_along_inner_axis_sums_to_one() {
        let mut t = Tape::new();
        let x = t.constant(&[2, 3, 2], (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let y = t.softmax(x, 1).unwrap();
        let v = t.value(y);
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| v[o * 6 + j * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_reference_values() {
        let mut t = Tape::new();
        let g = t.constant(&[2], vec![1.0, 1.0]).unwrap();
        let b = t.constant(&[2], vec![0.0, 0.0]).unwrap();
        let x = t.constant(&[2], vec![1.0, 3.0]).unwrap();
        let y = t.layer_norm(x, g, b).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(close(t.value(y), &[-expect, expect], 1e-12));

        let g = t.constant(&[4], vec![1.0; 4]).unwrap();
        let b = t.constant(&[4], vec![0.0; 4]).unwrap();
        let x = t.constant(&[4], vec![2.5; 4]).unwrap();
        let y = t.layer_norm(x, g, b).unwrap();
        assert!(t.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::new();
        let x = t.variable(&[3], vec![1.0, -2.0, 5.0]).unwrap();
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.variable(&[], vec![3.0]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let g = t.backward(sq).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.variable(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut param = Tensor::vector(vec![1.0, 2.0]).with_grad();
        let mut t = Tape::new();
        let x = t.leaf(&param);
        let s = t.sum(x);
        for _ in 0..3 {
            let g = t.backward(s).unwrap();
            g.accumulate_into(x, &mut param);
        }
        assert_eq!(param.grad().unwrap(), &[3.0, 3.0]);
        param.zero_grad();
        assert!(param.grad().is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(&[2], vec![1.0, 2.0]).unwrap();
        let x = t.variable(&[2], vec![3.0, 4.0]).unwrap();
        let p = t.mul(c, x).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Tape::new();
        let x = t.constant(&[100_000], vec![1.0; 100_000]).unwrap();
        let y = t.dropout(x, 0.2, false, &mut rng).unwrap();
        assert_eq!(x, y);
        let y = t.dropout(x, 0.2, true, &mut rng).unwrap();
        let mean = t.value(y).iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(t.value(y).iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn broadcast_add_of_bias() {
        let mut t = Tape::new();
        let x = t.variable(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.variable(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.add(x, b).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap(), &[2.0, 2.0, 2.0]);
        let bad = t.variable(&[2], vec![0.0; 2]).unwrap();
        assert!(t.add(x, bad).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut t = Tape::new();
        let x = t.constant(&[2, 3, 4], (0..24).map(|i| i as f64).collect()).unwrap();
        let y = t.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape(y), &[4, 2, 3]);
        let z = t.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(t.value(z), t.value(x));
    }

    #[test]
    fn concat_and_gather() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = t.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let g = t.gather_last(c, &[2, 0]).unwrap();
        assert_eq!(t.value(g), &[4.0, 2.0]);
    }

    #[test]
    fn masked_fill_zeroes_softmax_mass() {
        let mut t = Tape::new();
        let x = t.constant(&[2, 3], vec![0.5, 1.0, 9.0, 0.0, 0.0, 0.0]).unwrap();
        let m = t.masked_fill(x, &[false, false, true], &[3]).unwrap();
        let y = t.softmax_last(m).unwrap();
        assert!(t.value(y)[2] < 1e-9 && t.value(y)[5] < 1e-9);
    }
}
