use super::{Graph, Node, Op, Var};
use crate::error::{EdpaError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> EdpaError {
    EdpaError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Bcast, Vec<usize>)> {
    if a.shape() == b.shape() {
        Ok((Bcast::Same, a.shape().to_vec()))
    } else if a.is_scalar() && b.is_scalar() {
        let shape = if a.rank() >= b.rank() { a.shape() } else { b.shape() };
        Ok((Bcast::Same, shape.to_vec()))
    } else if a.is_scalar() {
        Ok((Bcast::LhsScalar, b.shape().to_vec()))
    } else if b.is_scalar() {
        Ok((Bcast::RhsScalar, a.shape().to_vec()))
    } else {
        Err(mismatch(op, a, b))
    }
}

fn zip_bcast(a: &[f64], b: &[f64], mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match mode {
        Bcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::LhsScalar => b.iter().map(|&y| f(a[0], y)).collect(),
        Bcast::RhsScalar => a.iter().map(|&x| f(x, b[0])).collect(),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("map preserves shape")
}

/// `(outer, last)` split used by the last-axis reductions.
fn split_last(t: &Tensor) -> (Vec<usize>, usize) {
    match t.shape().split_last() {
        Some((&last, outer)) => (outer.to_vec(), last),
        None => (Vec::new(), 1),
    }
}

/// Row-major `c = a * b` (`m x k` times `k x n`), with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: the caller guarantees buffer sizes match the strides and dims;
    // every call site below derives them from validated tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (mode, shape) = broadcast(name, ta, tb)?;
        let data = zip_bcast(ta.data(), tb.data(), mode, f);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_op(op, value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| c * x);
        self.push_op(Op::Scale(a, c), v, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::exp);
        self.push_op(Op::Exp(a), v, &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some((index, &value)) = t.data().iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
            return Err(EdpaError::NonPositive { op: "ln", index, value });
        }
        let v = map(t, f64::ln);
        Ok(self.push_op(Op::Ln(a), v, &[a]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::abs);
        self.push_op(Op::Abs(a), v, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::tanh);
        self.push_op(Op::Tanh(a), v, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (ta.dims2(), tb.dims2()) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return Err(mismatch("matmul", ta, tb)),
        };
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(Op::MatMul(a, b), v, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let d = t.data();
        let out = (0..r * c).map(|k| d[(k % r) * c + k / r]).collect();
        let v = Tensor::new(vec![c, r], out)?;
        Ok(self.push_op(Op::Transpose(a), v, &[a]))
    }

    fn reduce_last(&mut self, a: Var, op: Op, f: impl Fn(&[f64]) -> f64) -> Result<Var> {
        let t = self.value(a);
        let (outer, last) = split_last(t);
        if last == 0 {
            return Err(EdpaError::Empty("reduction axis"));
        }
        let out = t.data().chunks_exact(last).map(f).collect();
        let v = Tensor::new(outer, out)?;
        Ok(self.push_op(op, v, &[a]))
    }

    /// Sum over the last axis (`[r, c] -> [r]`, `[n] -> []`).
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.reduce_last(a, Op::SumLast(a), |row| row.iter().sum())
    }

    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        self.reduce_last(a, Op::MeanLast(a), |row| row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Euclidean norm over the last axis.
    pub fn norm_last(&mut self, a: Var) -> Result<Var> {
        self.reduce_last(a, Op::NormLast(a), |row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        Ok(self.push_op(Op::SumAll(a), Tensor::scalar(s), &[a]))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push_op(Op::MeanAll(a), Tensor::scalar(s), &[a]))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let v = map(self.value(a), |x| x.max(lo));
        self.push_op(Op::ClampMin(a, lo), v, &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = map(self.value(a), |x| x.clamp(lo, hi));
        self.push_op(Op::Clamp(a, lo, hi), v, &[a])
    }

    /// `[r, c] + [c]`, adding the vector to every row.
    pub fn add_row_vec(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (_, c) = ta.dims2().map_err(|_| mismatch("add_row_vec", ta, tb))?;
        if tb.shape() != [c] {
            return Err(mismatch("add_row_vec", ta, tb));
        }
        let bd = tb.data();
        let out = ta.data().iter().enumerate().map(|(k, &x)| x + bd[k % c]).collect();
        let v = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push_op(Op::AddRowVec(a, b), v, &[a, b]))
    }

    /// `[r, c] / [r]`, dividing row `i` by `s[i]`.
    pub fn div_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        let (r, c) = ta.dims2().map_err(|_| mismatch("div_rows", ta, ts))?;
        if ts.shape() != [r] {
            return Err(mismatch("div_rows", ta, ts));
        }
        let sd = ts.data();
        let out = ta.data().iter().enumerate().map(|(k, &x)| x / sd[k / c]).collect();
        let v = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push_op(Op::DivRows(a, s), v, &[a, s]))
    }

    /// Row-wise `log(sum(exp(x)))` with max subtraction (`[r, c] -> [r]`).
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, c) = t.dims2()?;
        let mut soft = Vec::with_capacity(t.numel());
        let mut out = Vec::with_capacity(t.numel() / c);
        for row in t.data().chunks_exact(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = soft.len();
            soft.extend(row.iter().map(|&x| (x - m).exp()));
            let z: f64 = soft[start..].iter().sum();
            soft[start..].iter_mut().for_each(|e| *e /= z);
            out.push(m + z.ln());
        }
        let v = Tensor::vector(out)?;
        Ok(self.push_op(Op::LogSumExpRows(a, soft), v, &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (_, c) = split_last(t);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks_exact(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|&x| (x - m).exp()));
            let z: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|e| *e /= z);
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("softmax shape");
        self.push_op(Op::SoftmaxLast(a), v, &[a])
    }

    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        if r != c {
            return Err(EdpaError::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "diag needs a square matrix".into(),
            });
        }
        let out = (0..r).map(|i| t.data()[i * c + i]).collect();
        let v = Tensor::vector(out)?;
        Ok(self.push_op(Op::Diag(a), v, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(Op::Reshape(a), v, &[a]))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(EdpaError::InvalidShape {
                    shape: t.shape().to_vec(),
                    reason: "concat takes vectors".into(),
                });
            }
            out.extend_from_slice(t.data());
        }
        let v = Tensor::vector(out)?;
        Ok(self.push_op(Op::Concat(parts.to_vec()), v, parts))
    }

    pub fn select_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(EdpaError::OutOfBounds {
                what: "row index",
                inner: vec![bad],
                outer: vec![r],
            });
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![index.len(), c], out)?;
        Ok(self.push_op(Op::SelectRows(a, index.to_vec()), v, &[a]))
    }

    /// `base` with row `index[k]` replaced by row `k` of `rows`. Indices must
    /// be distinct.
    pub fn scatter_rows(&mut self, base: Var, rows: Var, index: &[usize]) -> Result<Var> {
        let (tb, tr) = (self.value(base), self.value(rows));
        let (r, c) = tb.dims2()?;
        let (k, c2) = tr.dims2()?;
        if c != c2 || k != index.len() {
            return Err(mismatch("scatter_rows", tb, tr));
        }
        let mut seen = vec![false; r];
        for &i in index {
            if i >= r || std::mem::replace(&mut seen[i], true) {
                return Err(EdpaError::Config(format!(
                    "scatter_rows index {i} out of range or repeated"
                )));
            }
        }
        let mut out = tb.data().to_vec();
        for (row, &i) in index.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(tr.row(row));
        }
        let v = Tensor::new(vec![r, c], out)?;
        Ok(self.push_op(
            Op::ScatterRows {
                base,
                rows,
                index: index.to_vec(),
            },
            v,
            &[base, rows],
        ))
    }

    /// Splits an `H x W x C` image into non-overlapping `p x p` blocks,
    /// traversed row-major; each block is flattened in `(y, x, c)` order.
    pub fn patchify(&mut self, src: Var, patch: usize) -> Result<Var> {
        let t = self.value(src);
        let (h, w, c) = image_dims(t)?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(EdpaError::NotDivisible {
                height: h,
                width: w,
                patch,
            });
        }
        let out = patchify_data(t.data(), h, w, c, patch);
        let n = (h / patch) * (w / patch);
        let v = Tensor::new(vec![n, patch * patch * c], out)?;
        Ok(self.push_op(Op::Patchify { src, patch }, v, &[src]))
    }

    /// Overwrites the `h x w` rectangle at `origin` with `patch`.
    pub fn paste(&mut self, image: Var, patch: Var, origin: (usize, usize)) -> Result<Var> {
        let (ti, tp) = (self.value(image), self.value(patch));
        let (ih, iw, ic) = image_dims(ti)?;
        let (ph, pw, pc) = image_dims(tp)?;
        if pc != ic {
            return Err(mismatch("paste", ti, tp));
        }
        if origin.0 + ph > ih || origin.1 + pw > iw {
            return Err(EdpaError::OutOfBounds {
                what: "patch rectangle",
                inner: vec![origin.0, origin.1, ph, pw],
                outer: vec![ih, iw],
            });
        }
        let mut out = ti.data().to_vec();
        let row = pw * ic;
        for y in 0..ph {
            let dst = ((origin.0 + y) * iw + origin.1) * ic;
            out[dst..dst + row].copy_from_slice(&tp.data()[y * row..(y + 1) * row]);
        }
        let v = Tensor::new(ti.shape().to_vec(), out)?;
        Ok(self.push_op(Op::Paste { image, patch, origin }, v, &[image, patch]))
    }
}

pub(crate) fn image_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(EdpaError::InvalidShape {
            shape: s.to_vec(),
            reason: "expected H x W x C".into(),
        }),
    }
}

pub(crate) fn patchify_data(src: &[f64], h: usize, w: usize, c: usize, p: usize) -> Vec<f64> {
    let (bh, bw) = (h / p, w / p);
    let mut out = Vec::with_capacity(h * w * c);
    for by in 0..bh {
        for bx in 0..bw {
            for y in 0..p {
                let start = ((by * p + y) * w + bx * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    out
}

fn grad_buf<'a>(graph: &Graph, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
    let n = graph.node(v).value.numel();
    grads[v.index()].get_or_insert_with(|| vec![0.0; n])
}

/// Adds `node`'s contribution to the gradients of its inputs.
pub(super) fn propagate(graph: &Graph, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| graph.node(v).value.data();
    let wants = |v: Var| graph.node(v).requires_grad;
    let out = node.value.data();

    macro_rules! acc {
        ($v:expr, |$buf:ident| $body:block) => {
            if wants($v) {
                let $buf = grad_buf(graph, grads, $v);
                $body
            }
        };
    }

    // Accumulates `coef(k) * g[k]` into a possibly broadcast operand.
    fn acc_elementwise(graph: &Graph, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], coef: impl Fn(usize) -> f64) {
        if !graph.node(v).requires_grad {
            return;
        }
        let buf = grad_buf(graph, grads, v);
        if buf.len() == g.len() {
            buf.iter_mut()
                .zip(g)
                .enumerate()
                .for_each(|(k, (b, &gk))| *b += gk * coef(k));
        } else {
            buf[0] += g.iter().enumerate().map(|(k, &gk)| gk * coef(k)).sum::<f64>();
        }
    }
    let at = |d: &[f64], k: usize| if d.len() == 1 { d[0] } else { d[k] };

    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_elementwise(graph, grads, *a, g, |_| 1.0);
            acc_elementwise(graph, grads, *b, g, |_| 1.0);
        }
        Op::Sub(a, b) => {
            acc_elementwise(graph, grads, *a, g, |_| 1.0);
            acc_elementwise(graph, grads, *b, g, |_| -1.0);
        }
        Op::Mul(a, b) => {
            let (da, db) = (val(*a), val(*b));
            acc_elementwise(graph, grads, *a, g, |k| at(db, k));
            acc_elementwise(graph, grads, *b, g, |k| at(da, k));
        }
        Op::Div(a, b) => {
            let (da, db) = (val(*a), val(*b));
            acc_elementwise(graph, grads, *a, g, |k| 1.0 / at(db, k));
            acc_elementwise(graph, grads, *b, g, |k| {
                let y = at(db, k);
                -at(da, k) / (y * y)
            });
        }
        Op::Scale(a, c) => acc!(*a, |buf| {
            buf.iter_mut().zip(g).for_each(|(b, &gk)| *b += c * gk);
        }),
        Op::Exp(a) => acc!(*a, |buf| {
            for k in 0..g.len() {
                buf[k] += g[k] * out[k];
            }
        }),
        Op::Ln(a) => {
            let x = val(*a);
            acc!(*a, |buf| {
                for k in 0..g.len() {
                    buf[k] += g[k] / x[k];
                }
            })
        }
        Op::Abs(a) => {
            let x = val(*a);
            acc!(*a, |buf| {
                for k in 0..g.len() {
                    // subgradient 0 at exactly 0
                    let s = if x[k] > 0.0 {
                        1.0
                    } else if x[k] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    buf[k] += g[k] * s;
                }
            })
        }
        Op::Tanh(a) => acc!(*a, |buf| {
            for k in 0..g.len() {
                buf[k] += g[k] * (1.0 - out[k] * out[k]);
            }
        }),
        Op::MatMul(a, b) => {
            let (ta, tb) = (&graph.node(*a).value, &graph.node(*b).value);
            let (m, k) = ta.dims2().expect("matmul lhs");
            let (_, n) = tb.dims2().expect("matmul rhs");
            if wants(*a) {
                // dA = dC * B^T
                let bd = tb.data();
                let buf = grad_buf(graph, grads, *a);
                gemm(m, n, k, g, (n as isize, 1), bd, (1, n as isize), 1.0, buf);
            }
            if wants(*b) {
                // dB = A^T * dC
                let ad = ta.data();
                let buf = grad_buf(graph, grads, *b);
                gemm(k, m, n, ad, (1, k as isize), g, (n as isize, 1), 1.0, buf);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = graph.node(*a).value.dims2().expect("transpose");
            acc!(*a, |buf| {
                // output is c x r; out[j, i] = in[i, j]
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            })
        }
        Op::SumLast(a) | Op::MeanLast(a) => {
            let (_, last) = split_last(&graph.node(*a).value);
            let w = if matches!(node.op, Op::MeanLast(_)) {
                1.0 / last as f64
            } else {
                1.0
            };
            acc!(*a, |buf| {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b += w * g[k / last];
                }
            })
        }
        Op::SumAll(a) | Op::MeanAll(a) => {
            let n = graph.node(*a).value.numel();
            let w = if matches!(node.op, Op::MeanAll(_)) {
                g[0] / n as f64
            } else {
                g[0]
            };
            acc!(*a, |buf| {
                buf.iter_mut().for_each(|b| *b += w);
            })
        }
        Op::NormLast(a) => {
            let x = val(*a);
            let (_, last) = split_last(&graph.node(*a).value);
            acc!(*a, |buf| {
                for (k, b) in buf.iter_mut().enumerate() {
                    let nrm = out[k / last];
                    if nrm > 0.0 {
                        *b += g[k / last] * x[k] / nrm;
                    }
                }
            })
        }
        Op::ClampMin(a, lo) => {
            let x = val(*a);
            acc!(*a, |buf| {
                for k in 0..g.len() {
                    if x[k] >= *lo {
                        buf[k] += g[k];
                    }
                }
            })
        }
        Op::Clamp(a, lo, hi) => {
            let x = val(*a);
            acc!(*a, |buf| {
                for k in 0..g.len() {
                    if x[k] >= *lo && x[k] <= *hi {
                        buf[k] += g[k];
                    }
                }
            })
        }
        Op::AddRowVec(a, b) => {
            let c = graph.node(*b).value.numel();
            acc!(*a, |buf| {
                buf.iter_mut().zip(g).for_each(|(x, &gk)| *x += gk);
            });
            acc!(*b, |buf| {
                for (k, &gk) in g.iter().enumerate() {
                    buf[k % c] += gk;
                }
            });
        }
        Op::DivRows(a, s) => {
            let (_, c) = graph.node(*a).value.dims2().expect("div_rows");
            let (xa, xs) = (val(*a), val(*s));
            acc!(*a, |buf| {
                for (k, &gk) in g.iter().enumerate() {
                    buf[k] += gk / xs[k / c];
                }
            });
            acc!(*s, |buf| {
                for (k, &gk) in g.iter().enumerate() {
                    let si = xs[k / c];
                    buf[k / c] -= gk * xa[k] / (si * si);
                }
            });
        }
        Op::LogSumExpRows(a, soft) => {
            let (_, c) = graph.node(*a).value.dims2().expect("logsumexp");
            acc!(*a, |buf| {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b += g[k / c] * soft[k];
                }
            })
        }
        Op::SoftmaxLast(a) => {
            let (_, c) = split_last(&node.value);
            acc!(*a, |buf| {
                for ((bs, gs), ss) in buf.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.chunks_exact(c)) {
                    let dot: f64 = gs.iter().zip(ss).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        bs[j] += ss[j] * (gs[j] - dot);
                    }
                }
            })
        }
        Op::Diag(a) => {
            let n = g.len();
            acc!(*a, |buf| {
                for i in 0..n {
                    buf[i * n + i] += g[i];
                }
            })
        }
        Op::Reshape(a) => acc!(*a, |buf| {
            buf.iter_mut().zip(g).for_each(|(b, &gk)| *b += gk);
        }),
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = graph.node(p).value.numel();
                acc!(p, |buf| {
                    buf.iter_mut().zip(&g[offset..offset + n]).for_each(|(b, &gk)| *b += gk);
                });
                offset += n;
            }
        }
        Op::SelectRows(a, index) => {
            let (_, c) = graph.node(*a).value.dims2().expect("select_rows");
            acc!(*a, |buf| {
                for (row, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        buf[i * c + j] += g[row * c + j];
                    }
                }
            })
        }
        Op::ScatterRows { base, rows, index } => {
            let (_, c) = node.value.dims2().expect("scatter_rows");
            acc!(*base, |buf| {
                let mut replaced = vec![false; buf.len() / c];
                index.iter().for_each(|&i| replaced[i] = true);
                for (k, b) in buf.iter_mut().enumerate() {
                    if !replaced[k / c] {
                        *b += g[k];
                    }
                }
            });
            acc!(*rows, |buf| {
                for (row, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        buf[row * c + j] += g[i * c + j];
                    }
                }
            });
        }
        Op::Patchify { src, patch } => {
            let (h, w, c) = image_dims(&graph.node(*src).value).expect("patchify");
            let p = *patch;
            acc!(*src, |buf| {
                let (bh, bw) = (h / p, w / p);
                let mut k = 0;
                for by in 0..bh {
                    for bx in 0..bw {
                        for y in 0..p {
                            let start = ((by * p + y) * w + bx * p) * c;
                            for b in &mut buf[start..start + p * c] {
                                *b += g[k];
                                k += 1;
                            }
                        }
                    }
                }
            })
        }
        Op::Paste { image, patch, origin } => {
            let (_, iw, ic) = image_dims(&node.value).expect("paste");
            let (ph, pw, _) = image_dims(&graph.node(*patch).value).expect("paste");
            let row = pw * ic;
            acc!(*image, |buf| {
                // pixels under the patch do not reach the output
                let mut covered = vec![false; buf.len()];
                for y in 0..ph {
                    let dst = ((origin.0 + y) * iw + origin.1) * ic;
                    covered[dst..dst + row].iter_mut().for_each(|c| *c = true);
                }
                for (k, b) in buf.iter_mut().enumerate() {
                    if !covered[k] {
                        *b += g[k];
                    }
                }
            });
            acc!(*patch, |buf| {
                for y in 0..ph {
                    let src = ((origin.0 + y) * iw + origin.1) * ic;
                    for x in 0..row {
                        buf[y * row + x] += g[src + x];
                    }
                }
            });
        }
    }
}
