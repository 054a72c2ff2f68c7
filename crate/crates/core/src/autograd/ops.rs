use super::kernels::{axpy, dot, matmul_at_into, matmul_bt_into, matmul_into};
use super::{Node, Op, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn two_d(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [r, c] => Some((r, c)),
        _ => None,
    }
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// Stabilised log-softmax of one row into `out`.
fn log_softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &x in row {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Row-wise softmax of a plain tensor, for callers working outside a tape.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_finite("softmax", x)?;
    let c = x.cols();
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        softmax_row(src, dst);
    }
    Ok(out)
}

pub fn log_softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_finite("log_softmax", x)?;
    let c = x.cols();
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        log_softmax_row(src, dst);
    }
    Ok(out)
}

fn check_finite<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<()> {
    if let Some(bad) = x.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op,
            detail: format!("non-finite input {bad}"),
        });
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    fn unary(&mut self, a: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.requires_grad(a);
        self.push(value, op, rg)
    }

    /// C = A·B for A[m×k], B[k×n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (Some((m, k)), Some((k2, n))) = (two_d(sa), two_d(sb)) else {
            return Err(Error::shape("matmul", sa, sb));
        };
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// C = A·Bᵀ for A[m×k], B[n×k]. Linear layers store weights as [out×in].
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (Some((m, k)), Some((n, k2))) = (two_d(sa), two_d(sb)) else {
            return Err(Error::shape("matmul_bt", sa, sb));
        };
        if k != k2 {
            return Err(Error::shape("matmul_bt", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulBt(a, b), rg))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let va = self.value(a);
        let v = Tensor::new(va.shape(), va.data().iter().map(|&x| x * c).collect()).expect("same shape");
        self.unary(a, v, Op::Scale(a, c))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        let Some((m, n)) = two_d(sa) else {
            return Err(Error::shape("transpose", sa, &[]));
        };
        let src = self.value(a).data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let v = Tensor::new(&[n, m], data)?;
        Ok(self.unary(a, v, Op::Transpose(a)))
    }

    /// Broadcast-add a length-n vector to every row of an [m×n] matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        let Some((_, n)) = two_d(sa) else {
            return Err(Error::shape("add_row", sa, sr));
        };
        if sr != [n] {
            return Err(Error::shape("add_row", sa, sr));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        let v = Tensor::new(sa, data)?;
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Tensor::new(va.shape(), va.data().iter().map(|&x| gelu(x)).collect()).expect("same shape");
        self.unary(a, v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Tensor::new(va.shape(), va.data().iter().map(|&x| x.exp()).collect()).expect("same shape");
        self.unary(a, v, Op::Exp(a))
    }

    /// Elementwise `max(x, lo)`; gradient flows only where `x > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let lo = T::of(lo);
        let va = self.value(a);
        let v = Tensor::new(va.shape(), va.data().iter().map(|&x| x.max(lo)).collect()).expect("same shape");
        self.unary(a, v, Op::ClampMin(a, lo))
    }

    /// Rows of `table[V×d]` at `ids`, giving [len(ids)×d]. Serves as embedding
    /// lookup and as row selection for masked losses.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        let Some((rows, _)) = two_d(st) else {
            return Err(Error::shape("gather_rows", st, &[ids.len()]));
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Vocab { token: bad, vocab: rows });
        }
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", st, &[0]));
        }
        let v = self.value(table).select_rows(ids);
        Ok(self.unary(
            table,
            v,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Per-row layer normalisation with learned gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let Some((m, n)) = two_d(sx) else {
            return Err(Error::shape("layernorm", sx, self.shape(gain)));
        };
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layernorm", sx, self.shape(gain)));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let inv_n = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); m * n];
        let mut stats = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rstd = T::one() / (var + T::of(LN_EPS)).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        let v = Tensor::new(&[m, n], out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, stats }, rg))
    }

    /// Multi-head scaled dot-product attention with a causal mask: position i
    /// attends to positions 0..=i only. q, k, v are [n×d] with heads
    /// occupying contiguous column blocks of width d/heads.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(Error::shape("causal_attention", &sq, self.shape(k)));
        }
        let Some((n, d)) = two_d(&sq) else {
            return Err(Error::shape("causal_attention", &sq, &[heads]));
        };
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("causal_attention", &sq, &[heads]));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        let (row, nn) = (d as isize, n as isize);
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            // Full QKᵀ then mask: the wasted upper triangle is cheaper than a scalar loop.
            T::gemm_acc(n, dh, n, &qd[off..], (row, 1), &kd[off..], (1, row), p, (nn, 1));
            for i in 0..n {
                let r = &mut p[i * n..(i + 1) * n];
                let max = r[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for x in r[..=i].iter_mut() {
                    *x = ((*x - max) * scale).exp();
                    sum += *x;
                }
                let inv = T::one() / sum;
                r[..=i].iter_mut().for_each(|x| *x *= inv);
                r[i + 1..].iter_mut().for_each(|x| *x = T::zero());
            }
            T::gemm_acc(n, n, dh, p, (nn, 1), &vd[off..], (row, 1), &mut out[off..], (row, 1));
        }
        let value = Tensor::new(&[n, d], out)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(value, Op::CausalAttention { q, k, v, heads, probs }, rg))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = softmax_rows(self.value(a))?;
        Ok(self.unary(a, v, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = log_softmax_rows(self.value(a))?;
        Ok(self.unary(a, v, Op::LogSoftmax(a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.unary(a, Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().copied().sum::<T>() / T::of(va.numel() as f64);
        self.unary(a, Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Sum over the trailing axis: [m×n] → [m].
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        let Some((m, n)) = two_d(sa) else {
            return Err(Error::shape("sum_rows", sa, &[]));
        };
        let data: Vec<T> = self.value(a).data().chunks(n).map(|r| r.iter().copied().sum()).collect();
        let v = Tensor::new(&[m], data)?;
        Ok(self.unary(a, v, Op::SumRows(a)))
    }

    /// out[i] = x[i, cols[i]].
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        let Some((m, n)) = two_d(sx) else {
            return Err(Error::shape("pick_cols", sx, &[cols.len()]));
        };
        if cols.len() != m {
            return Err(Error::shape("pick_cols", sx, &[cols.len()]));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::Vocab { token: bad, vocab: n });
        }
        let xv = self.value(x);
        let data = cols.iter().enumerate().map(|(i, &c)| xv.at(i, c)).collect();
        let v = Tensor::new(&[m], data)?;
        Ok(self.unary(x, v, Op::PickCols { x, cols: cols.to_vec() }))
    }
}

fn grad_slot<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    values: &[Tensor<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = values[v.0].numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

/// Accumulate the gradients of `op`'s inputs given the upstream gradient `g`
/// of node `idx`.
pub(super) fn backward_node<T: Real>(
    op: &Op<T>,
    g: &[T],
    idx: usize,
    values: &[Tensor<T>],
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    let out = &values[idx];
    macro_rules! slot {
        ($v:expr) => {
            grad_slot(grads, nodes, values, $v)
        };
    }
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (&values[a.0], &values[b.0]);
            let (m, k) = (va.rows(), va.cols());
            let n = vb.cols();
            if let Some(ga) = slot!(*a) {
                matmul_bt_into(g, vb.data(), m, n, k, ga);
            }
            if let Some(gb) = slot!(*b) {
                matmul_at_into(va.data(), g, m, k, n, gb);
            }
        }
        Op::MatMulBt(a, b) => {
            let (va, vb) = (&values[a.0], &values[b.0]);
            let (m, k) = (va.rows(), va.cols());
            let n = vb.rows();
            if let Some(ga) = slot!(*a) {
                matmul_into(g, vb.data(), m, n, k, ga);
            }
            if let Some(gb) = slot!(*b) {
                matmul_at_into(g, va.data(), m, n, k, gb);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot!(*v) {
                    gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot!(*a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = slot!(*b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            if let Some(ga) = slot!(a) {
                let vb = values[b.0].data();
                for i in 0..g.len() {
                    ga[i] += g[i] * vb[i];
                }
            }
            if let Some(gb) = slot!(b) {
                let va = values[a.0].data();
                for i in 0..g.len() {
                    gb[i] += g[i] * va[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot!(*a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c);
            }
        }
        Op::Transpose(a) => {
            if let Some(ga) = slot!(*a) {
                let (n, m) = (out.rows(), out.cols());
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::AddRow(a, row) => {
            if let Some(ga) = slot!(*a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gr) = slot!(*row) {
                let n = gr.len();
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::Gelu(a) => {
            if let Some(ga) = slot!(*a) {
                let va = values[a.0].data();
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_grad(va[i]);
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = slot!(*a) {
                let y = out.data();
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }
        }
        Op::ClampMin(a, lo) => {
            if let Some(ga) = slot!(*a) {
                let va = values[a.0].data();
                for i in 0..g.len() {
                    if va[i] > *lo {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::GatherRows { table, ids } => {
            if let Some(gt) = slot!(*table) {
                let d = out.cols();
                for (r, &id) in ids.iter().enumerate() {
                    axpy(T::one(), &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                }
            }
        }
        Op::LayerNorm { x, gain, bias, stats } => {
            let n = out.cols();
            let xs = values[x.0].data();
            let gain_v = values[gain.0].data();
            let inv_n = T::one() / T::of(n as f64);
            let xhat = |i: usize, j: usize| (xs[i * n + j] - stats[i].0) * stats[i].1;
            if let Some(gg) = slot!(*gain) {
                for (i, row) in g.chunks(n).enumerate() {
                    for j in 0..n {
                        gg[j] += row[j] * xhat(i, j);
                    }
                }
            }
            if let Some(gb) = slot!(*bias) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                }
            }
            if let Some(gx) = slot!(*x) {
                let mut dxhat = vec![T::zero(); n];
                for (i, row) in g.chunks(n).enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..n {
                        dxhat[j] = row[j] * gain_v[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat(i, j);
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    let rstd = stats[i].1;
                    for j in 0..n {
                        gx[i * n + j] += rstd * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
                    }
                }
            }
        }
        Op::CausalAttention { q, k, v, heads, probs } => {
            let (n, d) = (out.rows(), out.cols());
            let dh = d / heads;
            let scale = T::one() / T::of(dh as f64).sqrt();
            let (qd, kd, vd) = (values[q.0].data(), values[k.0].data(), values[v.0].data());
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            let mut ds = vec![T::zero(); n * n];
            let (row, nn) = (d as isize, n as isize);
            for h in 0..*heads {
                let off = h * dh;
                let p = &probs[h * n * n..(h + 1) * n * n];
                ds.iter_mut().for_each(|x| *x = T::zero());
                T::gemm_acc(n, dh, n, &g[off..], (row, 1), &vd[off..], (1, row), &mut ds, (nn, 1));
                for i in 0..n {
                    let (pr, sr) = (&p[i * n..i * n + i + 1], &mut ds[i * n..(i + 1) * n]);
                    let weighted = dot(pr, &sr[..=i]);
                    for (sj, &pj) in sr[..=i].iter_mut().zip(pr) {
                        *sj = pj * (*sj - weighted) * scale;
                    }
                    sr[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                }
                T::gemm_acc(n, n, dh, p, (1, nn), &g[off..], (row, 1), &mut dv[off..], (row, 1));
                T::gemm_acc(n, n, dh, &ds, (nn, 1), &kd[off..], (row, 1), &mut dq[off..], (row, 1));
                T::gemm_acc(n, n, dh, &ds, (1, nn), &qd[off..], (row, 1), &mut dk[off..], (row, 1));
            }
            for (var, local) in [(q, dq), (k, dk), (v, dv)] {
                if let Some(gs) = slot!(*var) {
                    gs.iter_mut().zip(&local).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(ga) = slot!(*a) {
                let n = out.cols();
                for ((y, gy), gx) in out.data().chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                    let inner: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        gx[j] += y[j] * (gy[j] - inner);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            if let Some(ga) = slot!(*a) {
                let n = out.cols();
                for ((y, gy), gx) in out.data().chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                    let total: T = gy.iter().copied().sum();
                    for j in 0..n {
                        gx[j] += gy[j] - y[j].exp() * total;
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = slot!(*a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::MeanAll(a) => {
            if let Some(ga) = slot!(*a) {
                let s = g[0] / T::of(ga.len() as f64);
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::SumRows(a) => {
            if let Some(ga) = slot!(*a) {
                let n = values[a.0].cols();
                for (row, &gi) in ga.chunks_mut(n).zip(g) {
                    row.iter_mut().for_each(|x| *x += gi);
                }
            }
        }
        Op::PickCols { x, cols } => {
            if let Some(gx) = slot!(*x) {
                let n = values[x.0].cols();
                for (i, &c) in cols.iter().enumerate() {
                    gx[i * n + c] += g[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_rows(&t(&[1, 4], &[0.0; 4])).unwrap();
        assert_eq!(u.data(), &[0.25; 4]);
        let p = softmax_rows(&t(&[1, 2], &[1f64.ln(), 3f64.ln()])).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![0.0, f32::NAN]).unwrap());
        assert!(matches!(tape.softmax(x), Err(Error::Numeric { .. })));
        let y = tape.constant(Tensor::new(&[1, 2], vec![f32::INFINITY, 0.0]).unwrap());
        assert!(matches!(tape.log_softmax(y), Err(Error::Numeric { .. })));
    }

    #[test]
    fn attention_first_row_copies_first_value() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t(&[2, 2], &[0.5, 0.1, 0.2, 0.3]));
        let v = tape.constant(t(&[2, 2], &[7.0, 8.0, 9.0, 10.0]));
        let o = tape.causal_attention(q, k, v, 1).unwrap();
        assert_eq!(tape.value(o).row(0), &[7.0, 8.0]);
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let table = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(tape.gather_rows(table, &[1, 4]), Err(Error::Vocab { token: 4, vocab: 4 })));
    }
}
