use std::borrow::Cow;

use super::kernels::{self, AttnDims, AttnMask};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct AttnSaved {
    q: Var,
    k: Var,
    v: Var,
    prompt: Option<(Var, Var)>,
    dims: AttnDims,
    scale: f64,
    probs: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MulRowsByCol(Var, Var),
    Gelu(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention(Box<AttnSaved>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    SumRows(Var),
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    Index(Var, usize),
    StraightThrough(Var),
    Reshape(Var),
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations recorded in topological order. Leaves may borrow
/// their values from long-lived tensors (`'a`), so building a graph over a
/// model's parameters copies nothing.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    check_finite: bool,
    relaxed: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<'a> Graph<'a> {
    /// Non-finite values are reported as errors in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            relaxed: false,
        }
    }

    /// Straight-through nodes forward their soft value instead of the hard
    /// one, making selection smooth for finite-difference checks.
    pub fn with_relaxed_selection(mut self, on: bool) -> Self {
        self.relaxed = on;
        self
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => (numel(&s[..s.len() - 1]), *s.last().unwrap()),
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.check_finite && value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf borrowing a tensor's storage. Gradients are tracked iff the
    /// tensor has `requires_grad` set.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf_borrowed(t, t.requires_grad)
    }

    /// Leaf borrowing a tensor's storage, never tracked.
    pub fn frozen(&mut self, t: &'a Tensor) -> Var {
        self.leaf_borrowed(t, false)
    }

    fn leaf_borrowed(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf.
    pub fn input(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::dim(format!(
                "leaf shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        self.push(shape.to_vec(), data, Op::Leaf, requires_grad, "input")
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        self.input(shape, data, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!(
                "matmul of {sa:?} by {sb:?}: inner dimensions differ"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(vec![m, n], out, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (m, n) = match s.as_slice() {
            [n] => (1, *n),
            [m, n] => (*m, *n),
            _ => return Err(Error::dim(format!("transpose of rank-{} tensor", s.len()))),
        };
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(vec![n, m], out, Op::Transpose(a), rg, "transpose")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg, "mul")
    }

    /// `x[.., n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.rows_cols(x);
        if numel(self.shape(bias)) != n {
            return Err(Error::dim(format!(
                "row bias {:?} does not match width of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let mut out = self.value(x).to_vec();
        kernels::add_row_bias(&mut out, self.value(bias));
        let rg = self.rg(&[x, bias]);
        self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias), rg, "add_row")
    }

    /// Adds a constant buffer; the gradient passes through unchanged.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::dim(format!(
                "constant of length {} added to {:?}",
                c.len(),
                self.shape(x)
            )));
        }
        let out = self.value(x).iter().zip(c).map(|(a, b)| a + b).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::AddConst(x), rg, "add_const")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|a| a * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg, "scale")
    }

    /// `x * s` for a single-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if numel(self.shape(s)) != 1 {
            return Err(Error::dim(format!(
                "scale_by expects a scalar, got {:?}",
                self.shape(s)
            )));
        }
        let c = self.value(s)[0];
        let out = self.value(x).iter().map(|a| a * c).collect();
        let rg = self.rg(&[x, s]);
        self.push(self.shape(x).to_vec(), out, Op::ScaleBy(x, s), rg, "scale_by")
    }

    /// `x[t,d] * w[t]` row-wise.
    pub fn mul_rows_by_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, d) = self.rows_cols(x);
        if numel(self.shape(w)) != t {
            return Err(Error::dim(format!(
                "row weights {:?} do not match rows of {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            for j in 0..d {
                out[i * d + j] = xv[i * d + j] * wv[i];
            }
        }
        let rg = self.rg(&[x, w]);
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::MulRowsByCol(x, w),
            rg,
            "mul_rows_by_col",
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&a| kernels::gelu(a)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg, "gelu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|a| a.tanh()).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x), rg, "tanh")
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim(format!("softmax axis {axis} for shape {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let len = s[axis];
        let inner = numel(&s[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for a in 0..len {
                    buf[a] = xv[(o * len + a) * inner + i];
                }
                kernels::softmax_inplace(&mut buf);
                for a in 0..len {
                    out[(o * len + a) * inner + i] = buf[a];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(s, out, Op::Softmax { x, outer, len, inner }, rg, "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if d == 0 {
            return Err(Error::dim("layer norm over an empty feature dimension"));
        }
        if numel(self.shape(gain)) != d || numel(self.shape(bias)) != d {
            return Err(Error::dim(format!(
                "layer norm gain {:?} / bias {:?} for input {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            )));
        }
        let (y, xhat, rstd) = kernels::layer_norm(self.value(x), self.value(gain), self.value(bias));
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            self.shape(x).to_vec(),
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Single-head `softmax(scale·QKᵀ)V`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        self.attention_ext(q, k, v, None, 1, scale, &AttnMask::none())
    }

    /// Multi-head attention with optional prompt key/value rows prepended to
    /// the keys. Heads split columns contiguously.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_ext(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prompt: Option<(Var, Var)>,
        heads: usize,
        scale: f64,
        mask: &AttnMask,
    ) -> Result<Var> {
        let (tq, dqk) = self.rows_cols(q);
        let (tk, dk) = self.rows_cols(k);
        let (tv, dv) = self.rows_cols(v);
        if dk != dqk {
            return Err(Error::dim(format!(
                "query width {dqk} vs key width {dk} ({:?} / {:?})",
                self.shape(q),
                self.shape(k)
            )));
        }
        if tv != tk {
            return Err(Error::dim(format!(
                "{tk} keys but {tv} values ({:?} / {:?})",
                self.shape(k),
                self.shape(v)
            )));
        }
        let tp = match prompt {
            Some((pk, pv)) => {
                let (tpk, dpk) = self.rows_cols(pk);
                let (tpv, dpv) = self.rows_cols(pv);
                if dpk != dqk || dpv != dv || tpk != tpv {
                    return Err(Error::dim(format!(
                        "prompt keys {:?} / values {:?} do not match key width {dqk} / value width {dv}",
                        self.shape(pk),
                        self.shape(pv)
                    )));
                }
                tpk
            }
            None => 0,
        };
        if tk == 0 && tp == 0 {
            return Err(Error::EmptyKeys);
        }
        if heads == 0 || dqk % heads != 0 || dv % heads != 0 {
            return Err(Error::dim(format!("{heads} heads do not divide widths {dqk}/{dv}")));
        }
        if let Some(valid) = &mask.key_valid {
            if valid.len() != tk {
                return Err(Error::dim(format!("key mask of {} for {tk} keys", valid.len())));
            }
        }
        let dims = AttnDims {
            tq,
            tk,
            tp,
            dqk,
            dv,
            heads,
        };
        let (out, probs) = kernels::attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            prompt.map(|(pk, _)| self.value(pk)),
            prompt.map(|(_, pv)| self.value(pv)),
            dims,
            scale,
            mask,
        );
        let mut deps = vec![q, k, v];
        if let Some((pk, pv)) = prompt {
            deps.extend([pk, pv]);
        }
        let rg = self.rg(&deps);
        self.push(
            vec![tq, dv],
            out,
            Op::Attention(Box::new(AttnSaved {
                q,
                k,
                v,
                prompt,
                dims,
                scale,
                probs,
            })),
            rg,
            "attention",
        )
    }

    /// Attention probabilities saved by an attention node, laid out as
    /// `[heads, tq, tp + tk]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], AttnDims)> {
        match &self.nodes[v.0].op {
            Op::Attention(s) => Some((&s.probs, s.dims)),
            _ => None,
        }
    }

    /// Mean token cross-entropy of `logits[t, V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, vocab) = self.rows_cols(logits);
        if targets.len() != t {
            return Err(Error::dim(format!("{} targets for {t} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= vocab) {
            return Err(Error::Vocabulary {
                id: bad as u32,
                size: vocab,
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            kernels::softmax_inplace(row);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        loss /= t as f64;
        let rg = self.rg(&[logits]);
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.rows_cols(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Vocabulary {
                id: bad as u32,
                size: n,
            });
        }
        if ids.is_empty() {
            return Err(Error::dim("gather of zero rows"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.rows_cols(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != d {
                return Err(Error::dim(format!(
                    "concat_rows width {c} vs {d} ({:?})",
                    self.shape(p)
                )));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        self.push(vec![rows, d], out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let t = self.rows_cols(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.rows_cols(p).1).collect();
        for &p in parts {
            if self.rows_cols(p).0 != t {
                return Err(Error::dim(format!("concat_cols rows {:?} vs {t}", self.shape(p))));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; t * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for i in 0..t {
                out[i * total + off..i * total + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        self.push(vec![t, total], out, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (t, d) = self.rows_cols(x);
        if len == 0 || start + len > t {
            return Err(Error::dim(format!(
                "row slice {start}..{} of {:?}",
                start + len,
                self.shape(x)
            )));
        }
        let out = self.value(x)[start * d..(start + len) * d].to_vec();
        let rg = self.rg(&[x]);
        self.push(vec![len, d], out, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (t, d) = self.rows_cols(x);
        if len == 0 || start + len > d {
            return Err(Error::dim(format!(
                "column slice {start}..{} of {:?}",
                start + len,
                self.shape(x)
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(t * len);
        for i in 0..t {
            out.extend_from_slice(&xv[i * d + start..i * d + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(vec![t, len], out, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg, "sum")
    }

    /// Column sums: `[t, d] -> [1, d]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (t, d) = self.rows_cols(x);
        let xv = self.value(x);
        let mut out = vec![0.0; d];
        for i in 0..t {
            out.iter_mut().zip(&xv[i * d..(i + 1) * d]).for_each(|(o, v)| *o += v);
        }
        let rg = self.rg(&[x]);
        self.push(vec![1, d], out, Op::SumRows(x), rg, "sum_rows")
    }

    /// Column maxima: `[t, d] -> [1, d]`; the gradient routes to the first
    /// maximal row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (t, d) = self.rows_cols(x);
        let xv = self.value(x);
        let mut out = vec![f64::NEG_INFINITY; d];
        let mut argmax = vec![0; d];
        for i in 0..t {
            for j in 0..d {
                if xv[i * d + j] > out[j] {
                    out[j] = xv[i * d + j];
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(vec![1, d], out, Op::MaxRows { x, argmax }, rg, "max_rows")
    }

    /// Element `i` of the flattened `x`, as a `[1]` tensor.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.value(x).len();
        if i >= n {
            return Err(Error::dim(format!("index {i} out of {n}")));
        }
        let val = self.value(x)[i];
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![val], Op::Index(x, i), rg, "index")
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Vec<f64>) -> Result<Var> {
        if hard.len() != self.value(soft).len() {
            return Err(Error::dim(format!(
                "straight-through hard value of {} for {:?}",
                hard.len(),
                self.shape(soft)
            )));
        }
        let rg = self.rg(&[soft]);
        let value = if self.relaxed { self.value(soft).to_vec() } else { hard };
        self.push(
            self.shape(soft).to_vec(),
            value,
            Op::StraightThrough(soft),
            rg,
            "straight_through",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::dim(format!("reshape {:?} into {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape.to_vec(), out, Op::Reshape(x), rg, "reshape")
    }

    /// `x·w + b` for `x[t, din]`, `w[din, dout]`, `b[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a scalar sink.
    pub fn backward(&self, sink: Var) -> Result<Gradients> {
        if self.value(sink).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar sink, got shape {:?}",
                self.shape(sink)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[sink.0] = Some(vec![1.0]);
        for idx in (0..=sink.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, &mut |buf| kernels::matmul_nt_acc(g, bv, m, n, k, buf));
                acc(*b, &mut |buf| kernels::matmul_tn_acc(av, g, m, k, n, buf));
            }
            Op::Transpose(a) => {
                let (n, m) = (node.shape[0], node.shape[1]);
                acc(*a, &mut |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    let n = buf.len();
                    for row in g.chunks(n) {
                        add_into(buf, row);
                    }
                });
            }
            Op::AddConst(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
                acc(*x, &mut |buf| add_into(buf, g));
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(b, y)| *b += c * y));
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s)[0];
                let xv = self.value(*x);
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(b, y)| *b += c * y));
                acc(*s, &mut |buf| buf[0] += kernels::dot(g, xv));
            }
            Op::MulRowsByCol(x, w) => {
                let (t, d) = (node.shape[0], node.value.len() / node.shape[0]);
                let xv = self.value(*x);
                let wv = self.value(*w);
                acc(*x, &mut |buf| {
                    for i in 0..t {
                        for j in 0..d {
                            buf[i * d + j] += g[i * d + j] * wv[i];
                        }
                    }
                });
                acc(*w, &mut |buf| {
                    for i in 0..t {
                        buf[i] += kernels::dot(&g[i * d..(i + 1) * d], &xv[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                acc(*x, &mut |buf| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let s: f64 = (0..*len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..*len {
                                buf[at(a)] += y[at(a)] * (g[at(a)] - s);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let d = gv.len();
                let rows = rstd.len();
                acc(*x, &mut |buf| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        let c = rstd[r] / d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            buf[r * d + j] += c * (d as f64 * dxh - s1 - xh[j] * s2);
                        }
                    }
                });
                acc(*gain, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*bias, &mut |buf| {
                    for row in g.chunks(d) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Attention(s) => {
                let pk = s.prompt.map(|(pk, _)| self.value(pk));
                let pv = s.prompt.map(|(_, pv)| self.value(pv));
                let ag = kernels::attention_backward(
                    self.value(s.q),
                    self.value(s.k),
                    self.value(s.v),
                    pk,
                    pv,
                    &s.probs,
                    g,
                    s.dims,
                    s.scale,
                );
                acc(s.q, &mut |buf| add_into(buf, &ag.dq));
                acc(s.k, &mut |buf| add_into(buf, &ag.dk));
                acc(s.v, &mut |buf| add_into(buf, &ag.dv));
                if let Some((pkv, pvv)) = s.prompt {
                    acc(pkv, &mut |buf| add_into(buf, &ag.dpk));
                    acc(pvv, &mut |buf| add_into(buf, &ag.dpv));
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let t = targets.len();
                let vocab = probs.len() / t;
                let c = g[0] / t as f64;
                acc(*logits, &mut |buf| {
                    for (r, &y) in targets.iter().enumerate() {
                        for j in 0..vocab {
                            let ind = if j == y { 1.0 } else { 0.0 };
                            buf[r * vocab + j] += c * (probs[r * vocab + j] - ind);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = node.shape[1];
                acc(*table, &mut |buf| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut buf[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |buf| add_into(buf, &g[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let t = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).len() / t;
                    acc(p, &mut |buf| {
                        for i in 0..t {
                            add_into(&mut buf[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let d = node.shape[1];
                acc(*x, &mut |buf| {
                    add_into(&mut buf[start * d..start * d + g.len()], g);
                });
            }
            Op::SliceCols { x, start } => {
                let (t, len) = (node.shape[0], node.shape[1]);
                let d = self.value(*x).len() / t;
                acc(*x, &mut |buf| {
                    for i in 0..t {
                        add_into(&mut buf[i * d + start..i * d + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |buf| buf.iter_mut().for_each(|b| *b += g[0]));
            }
            Op::SumRows(x) => {
                let d = g.len();
                acc(*x, &mut |buf| {
                    for row in buf.chunks_mut(d) {
                        add_into(row, g);
                    }
                });
            }
            Op::MaxRows { x, argmax } => {
                let d = g.len();
                acc(*x, &mut |buf| {
                    for (j, &i) in argmax.iter().enumerate() {
                        buf[i * d + j] += g[j];
                    }
                });
            }
            Op::Index(x, i) => {
                acc(*x, &mut |buf| buf[*i] += g[0]);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Gradient buffers produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}
