use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale * x + shift`; only the scale matters for the gradient.
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    ClampMin { x: Var, floor: f64 },
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pick",
            Op::ClampMin { .. } => "clamp_min",
            Op::Dropout { .. } => "dropout",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations.
///
/// Nodes are appended in evaluation order, so every input id is smaller than
/// the id of its consumer. `backward` walks the tape once in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// c (+)= op(a) · op(b) with op(a): [m, k], op(b): [k, n]
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index dgemm touches for these
    // strides; `c` does not alias `a` or `b`.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// For each flat index of `out`, the flat index of the broadcast input.
/// `None` when the shapes are identical.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Option<Vec<usize>> {
    if out == inp {
        return None;
    }
    let nd = out.len();
    let off = nd - inp.len();
    let mut strides = vec![0usize; nd];
    let mut s = 1;
    for d in (0..inp.len()).rev() {
        if inp[d] != 1 {
            strides[d + off] = s;
        }
        s *= inp[d];
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; nd];
    let mut cur = 0usize;
    for _ in 0..numel {
        map.push(cur);
        for d in (0..nd).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(n).zip(out.chunks_mut(n)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), data.clone()).expect("grad shape"))
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("forward {}", op.name())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `[batch, m, k] x [batch, k, n] -> [batch, m, n]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape(format!("bmm {sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.push(Tensor::new(&[bs, m, n], out)?, Op::BatchMatMul(a, b), &[a, b])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let ma = broadcast_map(&shape, ta.shape());
        let mb = broadcast_map(&shape, tb.shape());
        let numel: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let out = (0..numel)
            .map(|i| {
                let x = da[ma.as_ref().map_or(i, |m| m[i])];
                let y = db[mb.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        self.push(Tensor::new(&shape, out)?, op, &[a, b])
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`, a scalar broadcast over every entry.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::ln);
        self.push(value, Op::Log(x), &[x])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), softmax_rows(t.data(), t.last_dim()))?;
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Concatenation over the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let rows = self.value(*first).rows();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::Shape(format!("concat {:?} with {:?}", self.shape(*first), s)));
            }
            width += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Swaps the last two axes of a matrix or a `[batch, m, n]` stack.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 && s.len() != 3 {
            return Err(Error::Shape(format!("transpose of {s:?}")));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for (src, dst) in d.chunks(m * n).zip(out.chunks_mut(m * n)) {
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut shape = s.clone();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        self.push(Tensor::new(&shape, out)?, Op::Transpose(x), &[x])
    }

    /// Embedding lookup: rows `ids` of a `[n, d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_rows on {s:?}")));
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        let (n, d) = (s[0], s[1]);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(Error::Input(format!("row {i} out of range for table of {n} rows")));
            }
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        self.push(value, Op::GatherRows { table, ids: ids.to_vec() }, &[table])
    }

    /// `out[b] = x[b, idx[b]]` for a `[rows, n]` input.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || t.rows() != idx.len() {
            return Err(Error::Shape(format!("pick {} indices from {:?}", idx.len(), t.shape())));
        }
        let n = t.last_dim();
        let mut out = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::Input(format!("pick index {i} out of range {n}")));
            }
            out.push(t.row(r)[i]);
        }
        let value = Tensor::vector(out);
        self.push(value, Op::Pick { x, idx: idx.to_vec() }, &[x])
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(floor));
        self.push(value, Op::ClampMin { x, floor }, &[x])
    }

    /// Inverted dropout: zero each entry with probability `rate`, scale the
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 - rate;
        let n = self.value(x).numel();
        let mask: Vec<f64> = if rate == 0.0 {
            vec![1.0; n]
        } else {
            (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect()
        };
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape(), data)?;
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Sum over the last axis; `[.., n] -> [..]` (a vector reduces to `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        let out: Vec<f64> = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        let shape = if t.shape().len() == 1 { vec![1] } else { t.shape()[..t.shape().len() - 1].to_vec() };
        self.push(Tensor::new(&shape, out)?, Op::SumLast(x), &[x])
    }

    /// Reverse sweep from a scalar root. Gradients accumulate additively
    /// over every use of a node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(g);
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("backward {}", self.nodes[i].op.name())));
            }
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily detach the op so input buffers can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let buf = self.grad_buf(*a).unwrap();
                    gemm(m, n, k, g, false, &bv, true, buf, true);
                }
                if self.requires_grad(*b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let buf = self.grad_buf(*b).unwrap();
                    gemm(k, m, n, &av, true, g, false, buf, true);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.requires_grad(*a) {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let buf = self.grad_buf(*a).unwrap();
                    for s in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[s * m * n..(s + 1) * m * n],
                            false,
                            &bv[s * k * n..(s + 1) * k * n],
                            true,
                            &mut buf[s * m * k..(s + 1) * m * k],
                            true,
                        );
                    }
                }
                if self.requires_grad(*b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let buf = self.grad_buf(*b).unwrap();
                    for s in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av[s * m * k..(s + 1) * m * k],
                            true,
                            &g[s * m * n..(s + 1) * m * n],
                            false,
                            &mut buf[s * k * n..(s + 1) * k * n],
                            true,
                        );
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let ma = broadcast_map(&out_shape, &sa);
                let mb = broadcast_map(&out_shape, &sb);
                let at = |m: &Option<Vec<usize>>, k: usize| m.as_ref().map_or(k, |m| m[k]);
                let is_mul = matches!(op, Op::Mul(..));
                let sign_b = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.requires_grad(*a) {
                    let other = is_mul.then(|| self.nodes[b.0].value.data().to_vec());
                    let buf = self.grad_buf(*a).unwrap();
                    for (k, &gk) in g.iter().enumerate() {
                        let f = other.as_ref().map_or(1.0, |o| o[at(&mb, k)]);
                        buf[at(&ma, k)] += gk * f;
                    }
                }
                if self.requires_grad(*b) {
                    let other = is_mul.then(|| self.nodes[a.0].value.data().to_vec());
                    let buf = self.grad_buf(*b).unwrap();
                    for (k, &gk) in g.iter().enumerate() {
                        let f = other.as_ref().map_or(sign_b, |o| o[at(&ma, k)]);
                        buf[at(&mb, k)] += gk * f;
                    }
                }
            }
            Op::Affine(x, scale) => {
                let s = *scale;
                if let Some(buf) = self.grad_buf(*x) {
                    buf.iter_mut().zip(g).for_each(|(b, gk)| *b += gk * s);
                }
            }
            Op::Sigmoid(x) | Op::Tanh(x) | Op::Exp(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let d: fn(f64) -> f64 = match op {
                    Op::Sigmoid(_) => |y| y * (1.0 - y),
                    Op::Tanh(_) => |y| 1.0 - y * y,
                    _ => |y| y,
                };
                if let Some(buf) = self.grad_buf(*x) {
                    for ((b, gk), yk) in buf.iter_mut().zip(g).zip(&y) {
                        *b += gk * d(*yk);
                    }
                }
            }
            Op::Log(x) => {
                let xv = self.nodes[x.0].value.data().to_vec();
                if let Some(buf) = self.grad_buf(*x) {
                    for ((b, gk), xk) in buf.iter_mut().zip(g).zip(&xv) {
                        *b += gk / xk;
                    }
                }
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let n = self.nodes[i].value.last_dim();
                if let Some(buf) = self.grad_buf(*x) {
                    for ((br, gr), yr) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((b, gk), yk) in br.iter_mut().zip(gr).zip(yr) {
                            *b += yk * (gk - dot);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let width = self.nodes[i].value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    if let Some(buf) = self.grad_buf(p) {
                        for (br, gr) in buf.chunks_mut(w).zip(g.chunks(width)) {
                            br.iter_mut().zip(&gr[offset..offset + w]).for_each(|(b, gk)| *b += gk);
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                if let Some(buf) = self.grad_buf(*x) {
                    buf.iter_mut().zip(g).for_each(|(b, gk)| *b += gk);
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x).to_vec();
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(buf) = self.grad_buf(*x) {
                    for (br, gr) in buf.chunks_mut(m * n).zip(g.chunks(m * n)) {
                        for r in 0..m {
                            for c in 0..n {
                                br[r * n + c] += gr[c * m + r];
                            }
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let d = self.nodes[table.0].value.last_dim();
                if let Some(buf) = self.grad_buf(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut buf[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(b, gk)| *b += gk);
                    }
                }
            }
            Op::Pick { x, idx } => {
                let n = self.nodes[x.0].value.last_dim();
                if let Some(buf) = self.grad_buf(*x) {
                    for (r, &k) in idx.iter().enumerate() {
                        buf[r * n + k] += g[r];
                    }
                }
            }
            Op::ClampMin { x, floor } => {
                let xv = self.nodes[x.0].value.data().to_vec();
                let f = *floor;
                if let Some(buf) = self.grad_buf(*x) {
                    for ((b, gk), xk) in buf.iter_mut().zip(g).zip(&xv) {
                        if *xk > f {
                            *b += gk;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(buf) = self.grad_buf(*x) {
                    for ((b, gk), mk) in buf.iter_mut().zip(g).zip(mask) {
                        *b += gk * mk;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(buf) = self.grad_buf(*x) {
                    buf.iter_mut().for_each(|b| *b += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                if let Some(buf) = self.grad_buf(*x) {
                    buf.iter_mut().for_each(|b| *b += g[0] / n);
                }
            }
            Op::SumLast(x) => {
                let n = self.nodes[x.0].value.last_dim();
                if let Some(buf) = self.grad_buf(*x) {
                    for (br, gk) in buf.chunks_mut(n).zip(g) {
                        br.iter_mut().for_each(|b| *b += gk);
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}
