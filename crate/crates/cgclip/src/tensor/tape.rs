//! Wengert tape: operations append nodes in execution order, so node ids are
//! already a topological order and one reverse sweep replays every adjoint
//! exactly once.

use std::cell::RefCell;
use std::sync::Arc;

use super::{axis_split, Result, Tensor, TensorError};

/// Numeric width of a tape. `F32` rounds every produced value through `f32`,
/// matching a single-precision run while keeping one `f64` code path; `F64`
/// is exact and is what gradient checking uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

// Guard for norm-type denominators: sqrt(sum + EPS2) keeps unit norms for any
// input with norm >= 1e-8 while never dividing by zero.
const NORM_EPS2: f64 = 1e-24;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Exp { x: usize },
    Relu { x: usize },
    Gelu { x: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatmulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: usize, m: usize, k: usize, n: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, scale: f64, tq: usize, tk: usize, dim: usize, probs: Option<Arc<Vec<f64>>> },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    L2Normalize { x: usize },
    CosineSim { a: usize, b: usize },
    MeanAxis { x: usize, axis: usize },
    SumAxis { x: usize, axis: usize },
    SumAll { x: usize },
    Concat { parts: Vec<usize>, axis: usize },
    SliceRows { x: usize, start: usize },
    Reshape { x: usize },
    Embedding { table: usize, ids: Arc<Vec<usize>> },
    ScaleBy { x: usize, s: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    macs: u64,
}

/// Single-writer computation record. Forward calls append nodes;
/// [`Tape::backward`] fills gradient slots for every `requires_grad` node.
pub struct Tape {
    inner: RefCell<TapeInner>,
    precision: Precision,
    checked: bool,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                macs: 0,
            }),
            precision,
            checked: true,
        }
    }

    /// NaN/Inf checking after every op; on by default, benchmarks turn it off.
    pub fn with_checked(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulate count of all matmul-shaped forward work so far
    /// (matmul, linear, attention scores / weighted sums). Elementwise ops,
    /// normalizations and softmax are not counted.
    pub fn mac_count(&self) -> u64 {
        self.inner.borrow().macs
    }

    /// Records a gradient-tracked input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().nodes[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.id].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let inner = self.inner.borrow();
        inner.grads.get(v.id).and_then(|g| {
            g.as_ref().map(|data| {
                Tensor::new(inner.nodes[v.id].value.shape().to_vec(), data.clone())
                    .expect("grad shape matches value")
            })
        })
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { id }
    }

    fn push(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if self.precision == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        if self.checked && !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let inner = self.inner.borrow();
        vars.iter().any(|v| inner.nodes[v.id].requires_grad)
    }

    fn add_macs(&self, macs: u64) {
        self.inner.borrow_mut().macs += macs;
    }

    // ---- elementwise -----------------------------------------------------

    fn binary_same_shape(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::Shape {
                op: name,
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(name, va.shape().to_vec(), data, op, self.any_grad(&[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a: a.id, b: b.id })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a: a.id, b: b.id })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a: a.id, b: b.id })
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * c).collect();
        self.push("scale", vx.shape().to_vec(), data, Op::Scale { x: x.id, c }, self.any_grad(&[x]))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v + c).collect();
        self.push("add_scalar", vx.shape().to_vec(), data, Op::AddScalar { x: x.id }, self.any_grad(&[x]))
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.exp()).collect();
        self.push("exp", vx.shape().to_vec(), data, Op::Exp { x: x.id }, self.any_grad(&[x]))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.max(0.0)).collect();
        self.push("relu", vx.shape().to_vec(), data, Op::Relu { x: x.id }, self.any_grad(&[x]))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu_fwd(v)).collect();
        self.push("gelu", vx.shape().to_vec(), data, Op::Gelu { x: x.id }, self.any_grad(&[x]))
    }

    // ---- matmul family ---------------------------------------------------

    fn mat_dims(&self, name: &'static str, v: Var) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            return Err(TensorError::Shape {
                op: name,
                detail: format!("expected matrix, got {:?}", shape),
            });
        }
        Ok((shape[0], shape[1]))
    }

    /// `C[m x n] = A[m x k] · B[k x n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.mat_dims("matmul", a)?;
        let (kb, n) = self.mat_dims("matmul", b)?;
        if ka != kb {
            return Err(TensorError::Shape {
                op: "matmul",
                detail: format!("inner dims {} vs {}", ka, kb),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        mm(va.data(), vb.data(), m, ka, n, &mut out);
        self.add_macs((m * ka * n) as u64);
        self.push(
            "matmul",
            vec![m, n],
            out,
            Op::Matmul { a: a.id, b: b.id, m, k: ka, n },
            self.any_grad(&[a, b]),
        )
    }

    /// `C[m x n] = A[m x k] · B[n x k]ᵀ`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.mat_dims("matmul_nt", a)?;
        let (n, kb) = self.mat_dims("matmul_nt", b)?;
        if ka != kb {
            return Err(TensorError::Shape {
                op: "matmul_nt",
                detail: format!("inner dims {} vs {}", ka, kb),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        mm_nt(va.data(), vb.data(), m, ka, n, &mut out);
        self.add_macs((m * ka * n) as u64);
        self.push(
            "matmul_nt",
            vec![m, n],
            out,
            Op::MatmulNt { a: a.id, b: b.id, m, k: ka, n },
            self.any_grad(&[a, b]),
        )
    }

    /// Affine map `y = x · w + bias` with `bias` broadcast over rows.
    pub fn linear(&self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("linear", x)?;
        let (kw, n) = self.mat_dims("linear", w)?;
        let bshape = self.shape(bias);
        if kw != k || bshape != vec![n] {
            return Err(TensorError::Shape {
                op: "linear",
                detail: format!("x {:?} w {:?} bias {:?}", self.shape(x), self.shape(w), bshape),
            });
        }
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(bias));
        let mut out = vec![0.0; m * n];
        for row in out.chunks_mut(n) {
            row.copy_from_slice(vb.data());
        }
        mm(vx.data(), vw.data(), m, k, n, &mut out);
        self.add_macs((m * k * n) as u64);
        self.push(
            "linear",
            vec![m, n],
            out,
            Op::Linear { x: x.id, w: w.id, b: bias.id, m, k, n },
            self.any_grad(&[x, w, bias]),
        )
    }

    // ---- attention ---------------------------------------------------------

    /// Scaled dot-product attention over all heads in one node:
    /// per head `softmax(Q_h K_hᵀ · scale) V_h`, heads concatenated.
    /// Counts `2 · tq · tk · dim` MACs (scores plus weighted sum).
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<Var> {
        self.attention_impl(q, k, v, heads, scale).map(|(out, _)| out)
    }

    /// As [`Tape::attention`], additionally returning the per-head attention
    /// weights as a `[heads, tq, tk]` tensor.
    pub fn attention_with_weights(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
    ) -> Result<(Var, Tensor)> {
        let (out, probs) = self.attention_impl(q, k, v, heads, scale)?;
        Ok((out, probs))
    }

    fn attention_impl(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
    ) -> Result<(Var, Tensor)> {
        let (tq, dq) = self.mat_dims("attention", q)?;
        let (tk, dk) = self.mat_dims("attention", k)?;
        let (tv, dv) = self.mat_dims("attention", v)?;
        if dq != dk || dk != dv || tk != tv {
            return Err(TensorError::Shape {
                op: "attention",
                detail: format!("q {:?} k {:?} v {:?}", self.shape(q), self.shape(k), self.shape(v)),
            });
        }
        if heads == 0 || dq % heads != 0 {
            return Err(TensorError::Config {
                op: "attention",
                detail: format!("dim {} not divisible by {} heads", dq, heads),
            });
        }
        let dim = dq;
        let dh = dim / heads;
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());

        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * dim];
        let mut row = vec![0.0; tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let qrow = &qd[i * dim + off..i * dim + off + dh];
                for (j, r) in row.iter_mut().enumerate() {
                    let krow = &kd[j * dim + off..j * dim + off + dh];
                    *r = scale * dot(qrow, krow);
                }
                softmax_inplace(&mut row);
                let prow = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                prow.copy_from_slice(&row);
                let orow = &mut out[i * dim + off..i * dim + off + dh];
                for (j, &p) in row.iter().enumerate() {
                    let vrow = &vd[j * dim + off..j * dim + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
        self.add_macs(2 * (tq * tk * dim) as u64);

        let requires_grad = self.any_grad(&[q, k, v]);
        let probs_arc = Arc::new(probs);
        let probs_tensor = Tensor::new(vec![heads, tq, tk], probs_arc.as_ref().clone())?;
        let saved = if requires_grad { Some(Arc::clone(&probs_arc)) } else { None };
        let var = self.push(
            "attention",
            vec![tq, dim],
            out,
            Op::Attention { q: q.id, k: k.id, v: v.id, heads, scale, tq, tk, dim, probs: saved },
            requires_grad,
        )?;
        Ok((var, probs_tensor))
    }

    // ---- normalizations ----------------------------------------------------

    fn check_axis(&self, name: &'static str, v: Var, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape(v);
        if axis >= shape.len() {
            return Err(TensorError::Shape {
                op: name,
                detail: format!("axis {} out of range for {:?}", axis, shape),
            });
        }
        Ok(shape)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis("softmax", x, axis)?;
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for_each_lane(&shape, axis, |idx| {
            softmax_lane(&mut data, &idx);
        });
        self.push("softmax", shape, data, Op::Softmax { x: x.id, axis }, self.any_grad(&[x]))
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis("log_softmax", x, axis)?;
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for_each_lane(&shape, axis, |idx| {
            let max = idx.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = idx.iter().map(|&i| (data[i] - max).exp()).sum::<f64>().ln() + max;
            for &i in &idx {
                data[i] -= lse;
            }
        });
        self.push("log_softmax", shape, data, Op::LogSoftmax { x: x.id, axis }, self.any_grad(&[x]))
    }

    /// Normalizes the last axis: per row mean 0 and unit variance, then the
    /// affine `gamma`/`beta` map.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x);
        let feat = *shape.last().ok_or(TensorError::Shape {
            op: "layer_norm",
            detail: "rank 0 input".into(),
        })?;
        if self.shape(gamma) != vec![feat] || self.shape(beta) != vec![feat] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                detail: format!(
                    "gamma {:?} beta {:?} vs feature {}",
                    self.shape(gamma),
                    self.shape(beta),
                    feat
                ),
            });
        }
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let mut data = vec![0.0; vx.numel()];
        for (orow, xrow) in data.chunks_mut(feat).zip(vx.data().chunks(feat)) {
            let (mean, rstd) = row_stats(xrow, eps);
            for i in 0..feat {
                orow[i] = (xrow[i] - mean) * rstd * vg.data()[i] + vb.data()[i];
            }
        }
        self.push(
            "layer_norm",
            shape,
            data,
            Op::LayerNorm { x: x.id, gamma: gamma.id, beta: beta.id, eps },
            self.any_grad(&[x, gamma, beta]),
        )
    }

    /// Scales each last-axis row to unit L2 norm.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let feat = *shape.last().ok_or(TensorError::Shape {
            op: "l2_normalize",
            detail: "rank 0 input".into(),
        })?;
        let vx = self.value(x);
        let mut data = vec![0.0; vx.numel()];
        for (orow, xrow) in data.chunks_mut(feat).zip(vx.data().chunks(feat)) {
            let n = (xrow.iter().map(|v| v * v).sum::<f64>() + NORM_EPS2).sqrt();
            for i in 0..feat {
                orow[i] = xrow[i] / n;
            }
        }
        self.push("l2_normalize", shape, data, Op::L2Normalize { x: x.id }, self.any_grad(&[x]))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sa != sb {
            return Err(TensorError::Shape {
                op: "cosine_similarity",
                detail: format!("{:?} vs {:?}", sa, sb),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let na = (va.data().iter().map(|v| v * v).sum::<f64>() + NORM_EPS2).sqrt();
        let nb = (vb.data().iter().map(|v| v * v).sum::<f64>() + NORM_EPS2).sqrt();
        let s = dot(va.data(), vb.data()) / (na * nb);
        self.push(
            "cosine_similarity",
            vec![],
            vec![s],
            Op::CosineSim { a: a.id, b: b.id },
            self.any_grad(&[a, b]),
        )
    }

    // ---- reductions and reshapes -------------------------------------------

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    fn reduce_axis(&self, name: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.check_axis(name, x, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let vx = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += vx.data()[base + i];
                }
            }
        }
        if mean {
            for v in out.iter_mut() {
                *v /= len as f64;
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let op = if mean {
            Op::MeanAxis { x: x.id, axis }
        } else {
            Op::SumAxis { x: x.id, axis }
        };
        self.push(name, oshape, out, op, self.any_grad(&[x]))
    }

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.data().iter().sum();
        self.push("sum_all", vec![], vec![s], Op::SumAll { x: x.id }, self.any_grad(&[x]))
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Shape {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let first = self.shape(parts[0]);
        if axis >= first.len() {
            return Err(TensorError::Shape {
                op: "concat",
                detail: format!("axis {} out of range for {:?}", axis, first),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::Shape {
                    op: "concat",
                    detail: format!("{:?} vs {:?}", s, first),
                });
            }
            total += s[axis];
        }
        let mut oshape = first.clone();
        oshape[axis] = total;
        let (outer, _, inner) = axis_split(&oshape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            let len = self.shape(p)[axis];
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                let src = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&vp.data()[src..src + len * inner]);
            }
            offset += len;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let requires = self.any_grad(parts);
        self.push("concat", oshape, out, Op::Concat { parts: ids, axis }, requires)
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.is_empty() || start + len > shape[0] {
            return Err(TensorError::Shape {
                op: "slice_rows",
                detail: format!("rows {}..{} of {:?}", start, start + len, shape),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let vx = self.value(x);
        let out = vx.data()[start * inner..(start + len) * inner].to_vec();
        let mut oshape = shape.clone();
        oshape[0] = len;
        self.push("slice_rows", oshape, out, Op::SliceRows { x: x.id, start }, self.any_grad(&[x]))
    }

    /// Row `i` of a matrix, as a rank-1 tensor.
    pub fn row(&self, x: Var, i: usize) -> Result<Var> {
        let shape = self.shape(x);
        let sliced = self.slice_rows(x, i, 1)?;
        self.reshape(sliced, shape[1..].to_vec())
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != vx.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", vx.shape(), shape),
            });
        }
        self.push("reshape", shape, vx.data().to_vec(), Op::Reshape { x: x.id }, self.any_grad(&[x]))
    }

    /// Gathers rows of `table` at `ids`; the adjoint scatter-adds into the
    /// table, so repeated ids accumulate.
    pub fn embedding_lookup(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.mat_dims("embedding_lookup", table)?;
        let vt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index {
                    op: "embedding_lookup",
                    index: id,
                    len: vocab,
                });
            }
            out.extend_from_slice(&vt.data()[id * dim..(id + 1) * dim]);
        }
        self.push(
            "embedding_lookup",
            vec![ids.len(), dim],
            out,
            Op::Embedding { table: table.id, ids: Arc::new(ids.to_vec()) },
            self.any_grad(&[table]),
        )
    }

    /// Multiplies every element of `x` by the scalar node `s`.
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if !vs.is_scalar() {
            return Err(TensorError::Shape {
                op: "scale_by",
                detail: format!("scale must be scalar, got {:?}", vs.shape()),
            });
        }
        let c = vs.item();
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * c).collect();
        self.push(
            "scale_by",
            vx.shape().to_vec(),
            data,
            Op::ScaleBy { x: x.id, s: s.id },
            self.any_grad(&[x, s]),
        )
    }

    /// Stacks rank-1 vars of equal length into a matrix, one per row.
    pub fn stack_rows(&self, rows: &[Var]) -> Result<Var> {
        let reshaped: Vec<Var> = rows
            .iter()
            .map(|&r| {
                let s = self.shape(r);
                self.reshape(r, vec![1, s.iter().product()])
            })
            .collect::<Result<_>>()?;
        self.concat(&reshaped, 0)
    }

    /// Elementwise mean of equal-shaped vars.
    pub fn mean_of(&self, vars: &[Var]) -> Result<Var> {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        self.scale(acc, 1.0 / vars.len() as f64)
    }

    // ---- backward ----------------------------------------------------------

    /// Replays adjoints from a scalar root back to every gradient-tracked
    /// node. Each call starts from fresh gradient slots, so repeated calls on
    /// the same record are deterministic.
    pub fn backward(&self, root: Var) -> Result<()> {
        {
            let inner = self.inner.borrow();
            let value = &inner.nodes[root.id].value;
            if !value.is_scalar() {
                return Err(TensorError::NonScalarRoot(value.shape().to_vec()));
            }
        }
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        let nodes = &inner.nodes;
        let grads = &mut inner.grads;
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            backprop_node(nodes, grads, id, &gout);
            // Leaves keep their accumulated gradient readable afterwards.
            if matches!(nodes[id].op, Op::Leaf) {
                grads[id] = Some(gout);
            }
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, gout: &[f64]) {
    let val = |i: usize| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, |g| axpy(g, gout, 1.0));
            accumulate(nodes, grads, *b, |g| axpy(g, gout, 1.0));
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, |g| axpy(g, gout, 1.0));
            accumulate(nodes, grads, *b, |g| axpy(g, gout, -1.0));
        }
        Op::Mul { a, b } => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * vb[i];
                }
            });
            accumulate(nodes, grads, *b, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * va[i];
                }
            });
        }
        Op::Scale { x, c } => {
            accumulate(nodes, grads, *x, |g| axpy(g, gout, *c));
        }
        Op::AddScalar { x } => {
            accumulate(nodes, grads, *x, |g| axpy(g, gout, 1.0));
        }
        Op::Exp { x } => {
            let y = nodes[id].value.data();
            accumulate(nodes, grads, *x, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * y[i];
                }
            });
        }
        Op::Relu { x } => {
            let vx = val(*x);
            accumulate(nodes, grads, *x, |g| {
                for i in 0..g.len() {
                    if vx[i] > 0.0 {
                        g[i] += gout[i];
                    }
                }
            });
        }
        Op::Gelu { x } => {
            let vx = val(*x);
            accumulate(nodes, grads, *x, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * gelu_bwd(vx[i]);
                }
            });
        }
        Op::Matmul { a, b, m, k, n } => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |g| mm_nt(gout, vb, *m, *n, *k, g));
            accumulate(nodes, grads, *b, |g| mm_tn(va, gout, *m, *k, *n, g));
        }
        Op::MatmulNt { a, b, m, k, n } => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |g| mm(gout, vb, *m, *n, *k, g));
            accumulate(nodes, grads, *b, |g| mm_tn(gout, va, *m, *n, *k, g));
        }
        Op::Linear { x, w, b, m, k, n } => {
            let (vx, vw) = (val(*x), val(*w));
            accumulate(nodes, grads, *x, |g| mm_nt(gout, vw, *m, *n, *k, g));
            accumulate(nodes, grads, *w, |g| mm_tn(vx, gout, *m, *k, *n, g));
            accumulate(nodes, grads, *b, |g| {
                for row in gout.chunks(*n) {
                    axpy(g, row, 1.0);
                }
            });
        }
        Op::Attention { q, k, v, heads, scale, tq, tk, dim, probs } => {
            let probs = probs.as_ref().expect("attention probs saved when grad needed");
            let (vq, vk, vv) = (val(*q), val(*k), val(*v));
            let dh = dim / heads;
            let mut dq = vec![0.0; vq.len()];
            let mut dk = vec![0.0; vk.len()];
            let mut dv = vec![0.0; vv.len()];
            let mut dp = vec![0.0; *tk];
            for h in 0..*heads {
                let off = h * dh;
                for i in 0..*tq {
                    let go = &gout[i * dim + off..i * dim + off + dh];
                    let prow = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                    // dV += pᵀ · dOut ; dP = dOut · Vᵀ
                    for j in 0..*tk {
                        let vrow = &vv[j * dim + off..j * dim + off + dh];
                        dp[j] = dot(go, vrow);
                        let dvrow = &mut dv[j * dim + off..j * dim + off + dh];
                        for (dst, &g) in dvrow.iter_mut().zip(go) {
                            *dst += prow[j] * g;
                        }
                    }
                    // softmax adjoint, then into dQ / dK through the scaled scores
                    let inner: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for j in 0..*tk {
                        let ds = prow[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &vk[j * dim + off..j * dim + off + dh];
                        let qrow = &vq[i * dim + off..i * dim + off + dh];
                        let dqrow = &mut dq[i * dim + off..i * dim + off + dh];
                        for (dst, &x) in dqrow.iter_mut().zip(krow) {
                            *dst += ds * x;
                        }
                        let dkrow = &mut dk[j * dim + off..j * dim + off + dh];
                        for (dst, &x) in dkrow.iter_mut().zip(qrow) {
                            *dst += ds * x;
                        }
                    }
                }
            }
            accumulate(nodes, grads, *q, |g| axpy(g, &dq, 1.0));
            accumulate(nodes, grads, *k, |g| axpy(g, &dk, 1.0));
            accumulate(nodes, grads, *v, |g| axpy(g, &dv, 1.0));
        }
        Op::Softmax { x, axis } => {
            let y = nodes[id].value.data();
            let shape = nodes[id].value.shape().to_vec();
            let mut dx = vec![0.0; y.len()];
            for_each_lane(&shape, *axis, |idx| {
                let inner: f64 = idx.iter().map(|&i| gout[i] * y[i]).sum();
                for &i in &idx {
                    dx[i] = y[i] * (gout[i] - inner);
                }
            });
            accumulate(nodes, grads, *x, |g| axpy(g, &dx, 1.0));
        }
        Op::LogSoftmax { x, axis } => {
            let y = nodes[id].value.data();
            let shape = nodes[id].value.shape().to_vec();
            let mut dx = vec![0.0; y.len()];
            for_each_lane(&shape, *axis, |idx| {
                let gsum: f64 = idx.iter().map(|&i| gout[i]).sum();
                for &i in &idx {
                    dx[i] = gout[i] - y[i].exp() * gsum;
                }
            });
            accumulate(nodes, grads, *x, |g| axpy(g, &dx, 1.0));
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (vx, vg) = (val(*x), val(*gamma));
            let feat = vg.len();
            let rows = vx.len() / feat;
            let mut dx = vec![0.0; vx.len()];
            let mut dgamma = vec![0.0; feat];
            let mut dbeta = vec![0.0; feat];
            for r in 0..rows {
                let xrow = &vx[r * feat..(r + 1) * feat];
                let grow = &gout[r * feat..(r + 1) * feat];
                let (mean, rstd) = row_stats(xrow, *eps);
                let mut m1 = 0.0; // mean of dy*gamma
                let mut m2 = 0.0; // mean of dy*gamma*xhat
                for i in 0..feat {
                    let xhat = (xrow[i] - mean) * rstd;
                    let dyg = grow[i] * vg[i];
                    m1 += dyg;
                    m2 += dyg * xhat;
                    dgamma[i] += grow[i] * xhat;
                    dbeta[i] += grow[i];
                }
                m1 /= feat as f64;
                m2 /= feat as f64;
                for i in 0..feat {
                    let xhat = (xrow[i] - mean) * rstd;
                    dx[r * feat + i] = rstd * (grow[i] * vg[i] - m1 - xhat * m2);
                }
            }
            accumulate(nodes, grads, *x, |g| axpy(g, &dx, 1.0));
            accumulate(nodes, grads, *gamma, |g| axpy(g, &dgamma, 1.0));
            accumulate(nodes, grads, *beta, |g| axpy(g, &dbeta, 1.0));
        }
        Op::L2Normalize { x } => {
            let vx = val(*x);
            let y = nodes[id].value.data();
            let shape = nodes[id].value.shape();
            let feat = *shape.last().unwrap();
            let mut dx = vec![0.0; vx.len()];
            for r in 0..vx.len() / feat {
                let xrow = &vx[r * feat..(r + 1) * feat];
                let yrow = &y[r * feat..(r + 1) * feat];
                let grow = &gout[r * feat..(r + 1) * feat];
                let n = (xrow.iter().map(|v| v * v).sum::<f64>() + NORM_EPS2).sqrt();
                let inner: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for i in 0..feat {
                    dx[r * feat + i] = (grow[i] - yrow[i] * inner) / n;
                }
            }
            accumulate(nodes, grads, *x, |g| axpy(g, &dx, 1.0));
        }
        Op::CosineSim { a, b } => {
            let (va, vb) = (val(*a), val(*b));
            let g = gout[0];
            let na = (va.iter().map(|v| v * v).sum::<f64>() + NORM_EPS2).sqrt();
            let nb = (vb.iter().map(|v| v * v).sum::<f64>() + NORM_EPS2).sqrt();
            let s = dot(va, vb) / (na * nb);
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g * (vb[i] / (na * nb) - s * va[i] / (na * na));
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g * (va[i] / (na * nb) - s * vb[i] / (nb * nb));
                }
            });
        }
        Op::MeanAxis { x, axis } | Op::SumAxis { x, axis } => {
            let shape = nodes[*x].value.shape().to_vec();
            let (outer, len, inner) = axis_split(&shape, *axis);
            let w = if matches!(nodes[id].op, Op::MeanAxis { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            accumulate(nodes, grads, *x, |g| {
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for i in 0..inner {
                            g[base + i] += gout[o * inner + i] * w;
                        }
                    }
                }
            });
        }
        Op::SumAll { x } => {
            accumulate(nodes, grads, *x, |g| {
                for v in g.iter_mut() {
                    *v += gout[0];
                }
            });
        }
        Op::Concat { parts, axis } => {
            let oshape = nodes[id].value.shape().to_vec();
            let (outer, total, inner) = axis_split(&oshape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                accumulate(nodes, grads, p, |g| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        axpy(&mut g[dst..dst + len * inner], &gout[src..src + len * inner], 1.0);
                    }
                });
                offset += len;
            }
        }
        Op::SliceRows { x, start } => {
            let inner: usize = nodes[*x].value.shape()[1..].iter().product();
            accumulate(nodes, grads, *x, |g| {
                axpy(&mut g[start * inner..start * inner + gout.len()], gout, 1.0);
            });
        }
        Op::Reshape { x } => {
            accumulate(nodes, grads, *x, |g| axpy(g, gout, 1.0));
        }
        Op::Embedding { table, ids } => {
            let dim = nodes[id].value.shape()[1];
            accumulate(nodes, grads, *table, |g| {
                for (row, &tid) in ids.iter().enumerate() {
                    axpy(&mut g[tid * dim..(tid + 1) * dim], &gout[row * dim..(row + 1) * dim], 1.0);
                }
            });
        }
        Op::ScaleBy { x, s } => {
            let c = val(*s)[0];
            let vx = val(*x);
            accumulate(nodes, grads, *x, |g| axpy(g, gout, c));
            accumulate(nodes, grads, *s, |g| {
                g[0] += gout.iter().zip(vx).map(|(a, b)| a * b).sum::<f64>();
            });
        }
    }
}

// ---- kernels ---------------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * c;
    }
}

/// `out += A[m x k] · B[k x n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av != 0.0 {
                axpy(orow, &b[t * n..(t + 1) * n], av);
            }
        }
    }
}

/// `out += A[m x k] · B[n x k]ᵀ`
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += A[m x k]ᵀ · B[m x n]` (result `k x n`)
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for r in 0..m {
        let brow = &b[r * n..(r + 1) * n];
        for i in 0..k {
            let av = a[r * k + i];
            if av != 0.0 {
                axpy(&mut out[i * n..(i + 1) * n], brow, av);
            }
        }
    }
}

fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn softmax_lane(data: &mut [f64], idx: &[usize]) {
    let max = idx.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &i in idx {
        data[i] = (data[i] - max).exp();
        sum += data[i];
    }
    for &i in idx {
        data[i] /= sum;
    }
}

/// Calls `f` with the flat indices of every lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(Vec<usize>)) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let idx: Vec<usize> = (0..len).map(|a| (o * len + a) * inner + i).collect();
            f(idx);
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
