//! Reverse-mode tape.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the nodes in reverse insertion order, which is a valid reverse
//! topological order because inputs always precede the nodes that use them.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{data_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Targets for [`Tape::cross_entropy`].
pub enum Targets<'a, T> {
    /// One class index per row.
    Labels(&'a [usize]),
    /// Probability rows with the same shape as the logits (e.g. an identity matrix).
    Dense(&'a Tensor<T>),
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    AddRow { x: Var, row: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    PrependRow { x: Var, row: Var },
    SelectRow { x: Var, index: usize },
    Reshape(Var),
    RelGather { scores: Var },
    CrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<T> },
    L2NormalizeRows { x: Var, norms: Vec<T> },
    SumAll(Var),
    MeanAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    bindings: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

struct MatMulLayout {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn matmul_layout(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatMulLayout> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != bk {
        return Err(err());
    }
    let a_lead = &a[..a.len() - 2];
    let b_lead = &b[..b.len() - 2];
    let (lead, a_batched, b_batched) = if a_lead == b_lead {
        (a_lead.to_vec(), true, true)
    } else if b_lead.is_empty() {
        (a_lead.to_vec(), true, false)
    } else if a_lead.is_empty() {
        (b_lead.to_vec(), false, true)
    } else {
        return Err(err());
    };
    let batch = lead.iter().product();
    let mut out_shape = lead;
    out_shape.extend([m, n]);
    Ok(MatMulLayout {
        batch,
        m,
        k,
        n,
        a_batched,
        b_batched,
        out_shape,
    })
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant or an input that gradients may be requested for.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a stored parameter; repeated calls return the same node so
    /// every use of a shared parameter accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        self.bindings.push((id, v));
        v
    }

    /// Parameters bound on this tape, in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.bindings.iter().map(|(id, _)| *id)
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let l = matmul_layout(av.shape(), bv.shape(), trans_b)?;
        let mut out = vec![T::zero(); l.batch * l.m * l.n];
        let (ad, bd) = (av.data(), bv.data());
        let (sa, sb, sc) = (l.m * l.k, l.k * l.n, l.m * l.n);
        if !l.b_batched && !trans_b {
            gemm_nn(l.batch * l.m, l.k, l.n, ad, bd, &mut out);
        } else {
            for i in 0..l.batch {
                let a_i = if l.a_batched { &ad[i * sa..(i + 1) * sa] } else { ad };
                let b_i = if l.b_batched { &bd[i * sb..(i + 1) * sb] } else { bd };
                let c_i = &mut out[i * sc..(i + 1) * sc];
                if trans_b {
                    gemm_nt(l.m, l.k, l.n, a_i, b_i, c_i);
                } else {
                    gemm_nn(l.m, l.k, l.n, a_i, b_i, c_i);
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(l.out_shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b }, needs)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() < 2 {
            return Err(Error::Axis { axis: 1, rank: shape.len() });
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = xv.len() / (r * c);
        let mut out = vec![T::zero(); xv.len()];
        let d = xv.data();
        for b in 0..batch {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = d[off + i * c + j];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        let needs = self.needs(x);
        self.push("transpose", Tensor::new(out_shape, out)?, Op::Transpose(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("add", value, Op::Add(a, b), needs)
    }

    /// Sum of several same-shape tensors, left to right.
    pub fn sum_of(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| data_err("sum of an empty list"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Adds a vector along the last axis of `x` (bias, embeddings).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let d = xv.last_dim();
        if rv.len() != d {
            return Err(Error::Shape {
                op: "add_row",
                lhs: xv.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let r = rv.data();
        let data = xv
            .data()
            .chunks(d)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(row);
        self.push("add_row", value, Op::AddRow { x, row }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push("scale", value, Op::Scale(x, factor), needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push("relu", value, Op::Relu(x), needs)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push("softmax", value, Op::Softmax(x), needs)
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != d || bv.len() != d {
            return Err(Error::Shape {
                op: "layernorm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let dn = T::from_usize_lossy(d);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push("layernorm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs)
    }

    /// Inverted dropout: each element is zeroed with probability `p` and
    /// survivors are scaled by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push("dropout", value, Op::Dropout { x, mask }, needs)
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| data_err("concat of an empty list"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape {
                    op: "concat_last",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_last", Tensor::new(shape, out)?, Op::ConcatLast(parts.to_vec()), needs)
    }

    /// Concatenates along the second-to-last (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| data_err("concat of an empty list"))?;
        let fs = self.shape(first).to_vec();
        if fs.len() < 2 {
            return Err(Error::Axis { axis: 1, rank: fs.len() });
        }
        let lead = fs[..fs.len() - 2].to_vec();
        let d = fs[fs.len() - 1];
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != fs.len() || s[..s.len() - 2] != lead[..] || s[s.len() - 1] != d {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: fs.clone(),
                    rhs: s.to_vec(),
                });
            }
            lens.push(s[s.len() - 2]);
        }
        let total: usize = lens.iter().sum();
        let batch: usize = lead.iter().product();
        let mut out = Vec::with_capacity(batch * total * d);
        for b in 0..batch {
            for (&p, &len) in parts.iter().zip(&lens) {
                let block = len * d;
                out.extend_from_slice(&self.value(p).data()[b * block..(b + 1) * block]);
            }
        }
        let mut shape = lead;
        shape.extend([total, d]);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", Tensor::new(shape, out)?, Op::ConcatRows(parts.to_vec()), needs)
    }

    /// Prepends the vector `row` to the sequence axis of every batch entry.
    pub fn prepend_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let rv = self.value(row);
        let d = xs[xs.len() - 1];
        if xs.len() < 2 || rv.len() != d {
            return Err(Error::Shape {
                op: "prepend_row",
                lhs: xs,
                rhs: rv.shape().to_vec(),
            });
        }
        let s = xs[xs.len() - 2];
        let batch = self.value(x).len() / (s * d);
        let mut out = Vec::with_capacity(batch * (s + 1) * d);
        for b in 0..batch {
            out.extend_from_slice(rv.data());
            out.extend_from_slice(&self.value(x).data()[b * s * d..(b + 1) * s * d]);
        }
        let mut shape = xs;
        let n = shape.len();
        shape[n - 2] = s + 1;
        let needs = self.needs(x) || self.needs(row);
        self.push("prepend_row", Tensor::new(shape, out)?, Op::PrependRow { x, row }, needs)
    }

    /// Picks sequence position `index` from every batch entry: `[..,S,d] -> [..,d]`.
    pub fn select_row(&mut self, x: Var, index: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Axis { axis: 1, rank: xs.len() });
        }
        let (s, d) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        if index >= s {
            return Err(Error::Shape {
                op: "select_row",
                lhs: xs,
                rhs: vec![index],
            });
        }
        let batch = self.value(x).len() / (s * d);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(batch * d);
        for b in 0..batch {
            let off = (b * s + index) * d;
            out.extend_from_slice(&src[off..off + d]);
        }
        let mut shape = xs[..xs.len() - 2].to_vec();
        shape.push(d);
        let needs = self.needs(x);
        self.push("select_row", Tensor::new(shape, out)?, Op::SelectRow { x, index }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        self.push("reshape", value, Op::Reshape(x), needs)
    }

    /// Turns per-offset scores `[.., S, 2R+1]` into a relative-position bias
    /// `[.., S, S]` with `out[i][j] = scores[i][(j - i) + R]`. Needs `S <= R + 1`.
    pub fn rel_gather(&mut self, scores: Var) -> Result<Var> {
        let ss = self.shape(scores).to_vec();
        let width = ss[ss.len() - 1];
        let s = ss[ss.len() - 2];
        if width % 2 == 0 || s > width / 2 + 1 {
            return Err(Error::Shape {
                op: "rel_gather",
                lhs: ss,
                rhs: vec![width],
            });
        }
        let r = width / 2;
        let batch = self.value(scores).len() / (s * width);
        let src = self.value(scores).data();
        let mut out = vec![T::zero(); batch * s * s];
        for b in 0..batch {
            for i in 0..s {
                let row = &src[(b * s + i) * width..(b * s + i + 1) * width];
                for j in 0..s {
                    out[(b * s + i) * s + j] = row[j + r - i];
                }
            }
        }
        let mut shape = ss;
        let n = shape.len();
        shape[n - 1] = s;
        let needs = self.needs(scores);
        self.push("rel_gather", Tensor::new(shape, out)?, Op::RelGather { scores }, needs)
    }

    /// Mean over rows of the negative log-softmax probability of the targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: Targets<'_, T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[1] == 0 {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        let dense = match targets {
            Targets::Labels(labels) => {
                if labels.len() != n {
                    return Err(Error::Shape {
                        op: "cross_entropy",
                        lhs: lv.shape().to_vec(),
                        rhs: vec![labels.len()],
                    });
                }
                let mut t = vec![T::zero(); n * c];
                for (i, &y) in labels.iter().enumerate() {
                    if y >= c {
                        return Err(data_err(format!("label {y} outside [0, {c})")));
                    }
                    t[i * c + y] = T::one();
                }
                t
            }
            Targets::Dense(t) => {
                same_shape("cross_entropy", lv, t)?;
                t.data().to_vec()
            }
        };
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (j, v) in row.iter_mut().enumerate() {
                let logp = *v - lse;
                loss -= dense[i * c + j] * logp;
                *v = logp.exp();
            }
        }
        let value = Tensor::scalar(loss / T::from_usize_lossy(n));
        let needs = self.needs(logits);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                probs,
                targets: dense,
            },
            needs,
        )
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let floor = T::lit(1e-12);
        let mut norms = Vec::with_capacity(xv.len() / d);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let norm = dot(row, row).sqrt().max(floor);
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push("l2_normalize", value, Op::L2NormalizeRows { x, norms }, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let needs = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::from_usize_lossy(xv.len());
        let needs = self.needs(x);
        self.push("mean", Tensor::scalar(s), Op::MeanAll(x), needs)
    }

    // ---- reverse pass -----------------------------------------------------

    /// Back-propagates from a one-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            // Only leaf gradients are kept; intermediates are dropped as soon as they are consumed.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Collects gradients of every bound parameter.
    pub fn param_grads(&self, grads: &Gradients<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::new();
        for &(id, v) in &self.bindings {
            if let Some(g) = grads.get(v) {
                out.accumulate(id, g);
            }
        }
        out
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let len_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let l = matmul_layout(self.shape(*a), self.shape(*b), *trans_b).expect("layout checked in forward");
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let (sa, sb, sc) = (l.m * l.k, l.k * l.n, l.m * l.n);
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], ad.len());
                    for i in 0..l.batch {
                        let b_i = if l.b_batched { &bd[i * sb..(i + 1) * sb] } else { bd };
                        let g_i = &g[i * sc..(i + 1) * sc];
                        let ga_i = if l.a_batched { &mut ga[i * sa..(i + 1) * sa] } else { &mut ga[..] };
                        if *trans_b {
                            gemm_nn(l.m, l.n, l.k, g_i, b_i, ga_i);
                        } else {
                            gemm_nt(l.m, l.n, l.k, g_i, b_i, ga_i);
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = accumulate(&mut grads[b.0], bd.len());
                    if !l.b_batched && !*trans_b {
                        gemm_tn(l.k, l.batch * l.m, l.n, ad, g, gb);
                    } else {
                        for i in 0..l.batch {
                            let a_i = if l.a_batched { &ad[i * sa..(i + 1) * sa] } else { ad };
                            let g_i = &g[i * sc..(i + 1) * sc];
                            let gb_i = if l.b_batched { &mut gb[i * sb..(i + 1) * sb] } else { &mut gb[..] };
                            if *trans_b {
                                gemm_tn(l.n, l.m, l.k, g_i, a_i, gb_i);
                            } else {
                                gemm_tn(l.k, l.m, l.n, a_i, g_i, gb_i);
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.needs(*x) {
                    let xs = self.shape(*x);
                    let (r, c) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                    let gx = accumulate(&mut grads[x.0], len_of(*x));
                    let batch = gx.len() / (r * c);
                    for b in 0..batch {
                        let off = b * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                gx[off + i * c + j] += g[off + j * r + i];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::AddRow { x, row } => {
                if self.needs(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                if self.needs(*row) {
                    let d = len_of(*row);
                    let gr = accumulate(&mut grads[row.0], d);
                    for chunk in g.chunks(d) {
                        gr.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((ga, &gi), &bi) in ga.iter_mut().zip(g).zip(bd) {
                        *ga += gi * bi;
                    }
                }
                if self.needs(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for ((gb, &gi), &ai) in gb.iter_mut().zip(g).zip(ad) {
                        *gb += gi * ai;
                    }
                }
            }
            Op::Scale(x, f) => {
                if self.needs(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *f);
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xd = self.value(*x).data();
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        if xi > T::zero() {
                            *a += gi;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for ((gx_r, g_r), y_r) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let s = dot(g_r, y_r);
                        for j in 0..d {
                            gx_r[j] += y_r[j] * (g_r[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = node.value.last_dim();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let gg = accumulate(&mut grads[gamma.0], d);
                    for (g_r, h_r) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += g_r[j] * h_r[j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = accumulate(&mut grads[beta.0], d);
                    for g_r in g.chunks(d) {
                        gb.iter_mut().zip(g_r).for_each(|(a, &b)| *a += b);
                    }
                }
                if self.needs(*x) {
                    let dn = T::from_usize_lossy(d);
                    let gx = accumulate(&mut grads[x.0], g.len());
                    let mut dh = vec![T::zero(); d];
                    for (r, (g_r, h_r)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = g_r[j] * gam[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / dn;
                        let mean_dh_h = dot(&dh, h_r) / dn;
                        let gx_r = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            gx_r[j] += rstd[r] * (dh[j] - mean_dh - h_r[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for ((a, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += gi * m;
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.needs(p) {
                        let gp = accumulate(&mut grads[p.0], rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let d = node.value.last_dim();
                let lens: Vec<usize> = parts
                    .iter()
                    .map(|&p| {
                        let s = self.shape(p);
                        s[s.len() - 2]
                    })
                    .collect();
                let total: usize = lens.iter().sum();
                let batch = g.len() / (total * d);
                let mut off = 0;
                for (&p, &len) in parts.iter().zip(&lens) {
                    if self.needs(p) {
                        let gp = accumulate(&mut grads[p.0], batch * len * d);
                        for b in 0..batch {
                            let src = &g[(b * total + off) * d..(b * total + off + len) * d];
                            gp[b * len * d..(b + 1) * len * d]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &v)| *a += v);
                        }
                    }
                    off += len;
                }
            }
            Op::PrependRow { x, row } => {
                let xs = self.shape(*x);
                let (s, d) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let batch = len_of(*x) / (s * d);
                if self.needs(*row) {
                    let gr = accumulate(&mut grads[row.0], d);
                    for b in 0..batch {
                        let src = &g[b * (s + 1) * d..b * (s + 1) * d + d];
                        gr.iter_mut().zip(src).for_each(|(a, &v)| *a += v);
                    }
                }
                if self.needs(*x) {
                    let gx = accumulate(&mut grads[x.0], batch * s * d);
                    for b in 0..batch {
                        let src = &g[(b * (s + 1) + 1) * d..(b + 1) * (s + 1) * d];
                        gx[b * s * d..(b + 1) * s * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &v)| *a += v);
                    }
                }
            }
            Op::SelectRow { x, index } => {
                if self.needs(*x) {
                    let xs = self.shape(*x);
                    let (s, d) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                    let gx = accumulate(&mut grads[x.0], len_of(*x));
                    for (b, src) in g.chunks(d).enumerate() {
                        let off = (b * s + index) * d;
                        gx[off..off + d].iter_mut().zip(src).for_each(|(a, &v)| *a += v);
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::RelGather { scores } => {
                if self.needs(*scores) {
                    let ss = self.shape(*scores);
                    let (s, width) = (ss[ss.len() - 2], ss[ss.len() - 1]);
                    let r = width / 2;
                    let gs = accumulate(&mut grads[scores.0], len_of(*scores));
                    let batch = gs.len() / (s * width);
                    for b in 0..batch {
                        for i in 0..s {
                            for j in 0..s {
                                gs[(b * s + i) * width + j + r - i] += g[(b * s + i) * s + j];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, probs, targets } => {
                if self.needs(*logits) {
                    let n = self.shape(*logits)[0];
                    let c = self.shape(*logits)[1];
                    let scale = g[0] / T::from_usize_lossy(n);
                    let gl = accumulate(&mut grads[logits.0], n * c);
                    for (i, row) in targets.chunks(c).enumerate() {
                        let mass = row.iter().copied().sum::<T>();
                        for j in 0..c {
                            gl[i * c + j] += scale * (probs[i * c + j] * mass - row[j]);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (r, (g_r, y_r)) in g.chunks(d).zip(y.chunks(d)).enumerate() {
                        let proj = dot(g_r, y_r);
                        for j in 0..d {
                            gx[r * d + j] += (g_r[j] - y_r[j] * proj) / norms[r];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let gx = accumulate(&mut grads[x.0], len_of(*x));
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::MeanAll(x) => {
                if self.needs(*x) {
                    let n = len_of(*x);
                    let share = g[0] / T::from_usize_lossy(n);
                    let gx = accumulate(&mut grads[x.0], n);
                    gx.iter_mut().for_each(|a| *a += share);
                }
            }
        }
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
