use crate::kernels::{broadcast_map, broadcast_shape, gemm_nn, gemm_nt, gemm_tn, reduce_broadcast, split_axis};
use crate::tensor::{BackwardCtx, Tensor};
use crate::{Result, TensorError};

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

// Elementwise building blocks.
impl Tensor {
    fn binary(&self, other: &Tensor, op: &'static str, f: fn(f64, f64) -> f64, df: fn(f64, f64, f64) -> (f64, f64)) -> Result<Tensor> {
        let shape = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| mismatch(op, self.shape(), other.shape()))?;
        let ma = (self.shape() != shape.as_slice()).then(|| broadcast_map(self.shape(), &shape));
        let mb = (other.shape() != shape.as_slice()).then(|| broadcast_map(other.shape(), &shape));
        let n: usize = shape.iter().product();
        let (ad, bd) = (self.data(), other.data());
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let x = ad[ma.as_ref().map_or(i, |m| m[i])];
                let y = bd[mb.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        let (a, b) = (self.clone(), other.clone());
        let inputs = vec![a.clone(), b.clone()];
        Ok(Tensor::from_op(
            data,
            shape,
            inputs,
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (ad, bd) = (a.data(), b.data());
                let mut ga = ctx.needs[0].then(|| vec![0.0; ad.len()]);
                let mut gb = ctx.needs[1].then(|| vec![0.0; bd.len()]);
                for (i, &g) in ctx.grad.iter().enumerate() {
                    let ia = ma.as_ref().map_or(i, |m| m[i]);
                    let ib = mb.as_ref().map_or(i, |m| m[i]);
                    let (dx, dy) = df(ad[ia], bd[ib], g);
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += dx;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += dy;
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    fn unary<F, D>(&self, f: F, df: D) -> Tensor
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let a = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let g = a
                    .data()
                    .iter()
                    .zip(ctx.out)
                    .zip(ctx.grad)
                    .map(|((&x, &y), &g)| df(x, y, g))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |x, y| x / y, |x, y, g| (g / y, -g * x / (y * y)))
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_, _, g| -g)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(move |x| c * x, move |_, _, g| c * g)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _, g| g)
    }

    /// ReLU; the subgradient at exactly zero is zero.
    pub fn relu(&self) -> Tensor {
        self.unary(|x| if x > 0.0 { x } else { 0.0 }, |x, _, g| if x > 0.0 { g } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y, g| g * y * (1.0 - y),
        )
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |_, y, g| g * 0.5 / y)
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, |x, _, g| g / x)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y, g| g * y)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _, g| 2.0 * x * g)
    }

    /// Absolute value (L1 residual); derivative taken as 0 at the origin.
    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _, g| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        })
    }

    /// Elementwise Huber penalty of a residual: `r²/2` inside `±delta`,
    /// `delta·(|r| − delta/2)` outside.
    pub fn huber(&self, delta: f64) -> Tensor {
        self.unary(
            move |r| {
                let a = r.abs();
                if a <= delta {
                    0.5 * r * r
                } else {
                    delta * (a - 0.5 * delta)
                }
            },
            move |r, _, g| g * r.clamp(-delta, delta),
        )
    }
}

// Reductions and softmax.
impl Tensor {
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum along one axis. The axis is kept with length 1 when `keepdim`.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::invalid(
                "sum_axis",
                format!("axis {axis} out of range for {:?}", self.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let src = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut g[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.copy_from_slice(&ctx.grad[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| TensorError::invalid("mean_axis", "axis out of range"))?;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len.max(1) as f64))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; ctx.out.len()];
                for ((gr, yr), dst) in ctx.grad.chunks(n).zip(ctx.out.chunks(n)).zip(g.chunks_mut(n)) {
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - s);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Numerically stable `log(softmax(x))` over the last axis.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| TensorError::invalid("log_softmax", "scalar input"))?;
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; ctx.out.len()];
                for ((gr, yr), dst) in ctx.grad.chunks(n).zip(ctx.out.chunks(n)).zip(g.chunks_mut(n)) {
                    let s: f64 = gr.iter().sum();
                    for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = gi - yi.exp() * s;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

// Shape manipulation.
impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(mismatch("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx<'_>| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Swap two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let rank = self.rank();
        if a >= rank || b >= rank {
            return Err(TensorError::invalid(
                "transpose",
                format!("axes ({a},{b}) out of range for {:?}", self.shape()),
            ));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        let src_shape = self.shape().to_vec();
        let dst_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
        // gather map: dst flat index -> src flat index
        let mut src_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
        }
        let perm_strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let total = self.numel();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut flat = 0usize;
        for _ in 0..total {
            map.push(flat);
            for d in (0..rank).rev() {
                idx[d] += 1;
                flat += perm_strides[d];
                if idx[d] < dst_shape[d] {
                    break;
                }
                flat -= perm_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        let src = self.data();
        let data = map.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_op(
            data,
            dst_shape,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; ctx.grad.len()];
                for (&gi, &i) in ctx.grad.iter().zip(&map) {
                    g[i] = gi;
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        match broadcast_shape(self.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(mismatch("broadcast_to", self.shape(), shape)),
        }
        let map = broadcast_map(self.shape(), shape);
        let src = self.data();
        let data = map.iter().map(|&i| src[i]).collect();
        let src_len = self.numel();
        Ok(Tensor::from_op(
            data,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(reduce_broadcast(ctx.grad, Some(&map), src_len))]),
        ))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(TensorError::invalid("concat", "axis out of range"));
        }
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(mismatch("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_len: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_len;
        Ok(Tensor::from_op(
            data,
            shape,
            parts.to_vec(),
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut grads: Vec<Option<Vec<f64>>> = lens
                    .iter()
                    .zip(ctx.needs)
                    .map(|(&l, &need)| need.then(|| Vec::with_capacity(outer * l * inner)))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &l) in grads.iter_mut().zip(&lens) {
                        if let Some(g) = g.as_mut() {
                            g.extend_from_slice(&ctx.grad[pos..pos + l * inner]);
                        }
                        pos += l * inner;
                    }
                }
                grads
            }),
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.rank() || start > end || end > self.shape()[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", self.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let w = end - start;
        let src = self.data();
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = w;
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    g[(o * len + start) * inner..(o * len + end) * inner].copy_from_slice(&ctx.grad[o * w * inner..(o + 1) * w * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Rows of a tensor viewed as `[n, rest...]`; indices may repeat.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let n = *self
            .shape()
            .first()
            .ok_or_else(|| TensorError::invalid("gather_rows", "scalar input"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::invalid("gather_rows", format!("row {bad} out of range {n}")));
        }
        let row: usize = self.shape()[1..].iter().product();
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; n * row];
                for (k, &i) in idx.iter().enumerate() {
                    for (d, &s) in g[i * row..(i + 1) * row].iter_mut().zip(&ctx.grad[k * row..(k + 1) * row]) {
                        *d += s;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

// Matrix products and attention.
impl Tensor {
    /// Matrix product.
    ///
    /// * `[.., m, k] × [k, n] → [.., m, n]` (right operand shared)
    /// * `[b, m, k] × [b, k, n] → [b, m, n]` (batched)
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch("matmul", sa, sb));
        }
        if sb.len() == 2 {
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let mut out = vec![0.0; rows * n];
            gemm_nn(rows, k, n, self.data(), other.data(), &mut out);
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = n;
            let (a, b) = (self.clone(), other.clone());
            return Ok(Tensor::from_op(
                out,
                shape,
                vec![a.clone(), b.clone()],
                Box::new(move |ctx: &BackwardCtx<'_>| {
                    let ga = ctx.needs[0].then(|| {
                        let mut g = vec![0.0; rows * k];
                        gemm_nt(rows, n, k, ctx.grad, b.data(), &mut g);
                        g
                    });
                    let gb = ctx.needs[1].then(|| {
                        let mut g = vec![0.0; k * n];
                        gemm_tn(k, rows, n, a.data(), ctx.grad, &mut g);
                        g
                    });
                    vec![ga, gb]
                }),
            ));
        }
        if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch("matmul", sa, sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(), other.data());
        for i in 0..batch {
            gemm_nn(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            shape,
            vec![a.clone(), b.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (ad, bd) = (a.data(), b.data());
                let mut ga = ctx.needs[0].then(|| vec![0.0; batch * m * k]);
                let mut gb = ctx.needs[1].then(|| vec![0.0; batch * k * n]);
                for i in 0..batch {
                    let g = &ctx.grad[i * m * n..(i + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        gemm_nt(m, n, k, g, &bd[i * k * n..(i + 1) * k * n], &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm_tn(k, m, n, &ad[i * m * k..(i + 1) * m * k], g, &mut gb[i * k * n..(i + 1) * k * n]);
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [b, lq, d]`, `k, v: [b, lk, d]`, `d` divisible by `heads`.
    /// Each head attends with `softmax(q_h k_hᵀ / √(d/heads)) v_h`; head
    /// outputs are written back into their column block of `[b, lq, d]`.
    pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
        let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(mismatch("attention", sq, sk));
        }
        let (b, lq, d) = (sq[0], sq[1], sq[2]);
        let lk = sk[1];
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::invalid(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; b * lq * d];
        // attention weights, [b, heads, lq, lk]
        let mut probs = vec![0.0; b * heads * lq * lk];
        let mut qh = vec![0.0; lq * dh];
        let mut kh = vec![0.0; lk * dh];
        let mut vh = vec![0.0; lk * dh];
        let mut oh = vec![0.0; lq * dh];
        for bi in 0..b {
            for h in 0..heads {
                extract_head(q.data(), bi, lq, d, h, dh, &mut qh);
                extract_head(k.data(), bi, lk, d, h, dh, &mut kh);
                extract_head(v.data(), bi, lk, d, h, dh, &mut vh);
                let p = &mut probs[((bi * heads + h) * lq) * lk..((bi * heads + h + 1) * lq) * lk];
                p.fill(0.0);
                gemm_nt(lq, dh, lk, &qh, &kh, p);
                for row in p.chunks_mut(lk) {
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                    softmax_in_place(row);
                }
                oh.fill(0.0);
                gemm_nn(lq, lk, dh, p, &vh, &mut oh);
                insert_head(&mut out, bi, lq, d, h, dh, &oh);
            }
        }
        let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
        Ok(Tensor::from_op(
            out,
            vec![b, lq, d],
            vec![q.clone(), k.clone(), v.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut gq = vec![0.0; b * lq * d];
                let mut gk = vec![0.0; b * lk * d];
                let mut gv = vec![0.0; b * lk * d];
                let mut qh = vec![0.0; lq * dh];
                let mut kh = vec![0.0; lk * dh];
                let mut vh = vec![0.0; lk * dh];
                let mut go = vec![0.0; lq * dh];
                let mut dp = vec![0.0; lq * lk];
                let mut tmp_q = vec![0.0; lq * dh];
                let mut tmp_k = vec![0.0; lk * dh];
                for bi in 0..b {
                    for h in 0..heads {
                        extract_head(qc.data(), bi, lq, d, h, dh, &mut qh);
                        extract_head(kc.data(), bi, lk, d, h, dh, &mut kh);
                        extract_head(vc.data(), bi, lk, d, h, dh, &mut vh);
                        extract_head(ctx.grad, bi, lq, d, h, dh, &mut go);
                        let p = &probs[((bi * heads + h) * lq) * lk..((bi * heads + h + 1) * lq) * lk];
                        // dV = Pᵀ dO
                        tmp_k.fill(0.0);
                        gemm_tn(lk, lq, dh, p, &go, &mut tmp_k);
                        add_head(&mut gv, bi, lk, d, h, dh, &tmp_k);
                        // dP = dO Vᵀ, then through the row softmax
                        dp.fill(0.0);
                        gemm_nt(lq, dh, lk, &go, &vh, &mut dp);
                        for (dr, pr) in dp.chunks_mut(lk).zip(p.chunks(lk)) {
                            let s: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (x, &pi) in dr.iter_mut().zip(pr) {
                                *x = pi * (*x - s) * scale;
                            }
                        }
                        tmp_q.fill(0.0);
                        gemm_nn(lq, lk, dh, &dp, &kh, &mut tmp_q);
                        add_head(&mut gq, bi, lq, d, h, dh, &tmp_q);
                        tmp_k.fill(0.0);
                        gemm_tn(lk, lq, dh, &dp, &qh, &mut tmp_k);
                        add_head(&mut gk, bi, lk, d, h, dh, &tmp_k);
                    }
                }
                vec![ctx.needs[0].then_some(gq), ctx.needs[1].then_some(gk), ctx.needs[2].then_some(gv)]
            }),
        ))
    }
}

fn extract_head(src: &[f64], b: usize, len: usize, d: usize, h: usize, dh: usize, dst: &mut [f64]) {
    for r in 0..len {
        let s = (b * len + r) * d + h * dh;
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[s..s + dh]);
    }
}

fn insert_head(dst: &mut [f64], b: usize, len: usize, d: usize, h: usize, dh: usize, src: &[f64]) {
    for r in 0..len {
        let s = (b * len + r) * d + h * dh;
        dst[s..s + dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

fn add_head(dst: &mut [f64], b: usize, len: usize, d: usize, h: usize, dh: usize, src: &[f64]) {
    for r in 0..len {
        let s = (b * len + r) * d + h * dh;
        for (x, &y) in dst[s..s + dh].iter_mut().zip(&src[r * dh..(r + 1) * dh]) {
            *x += y;
        }
    }
}
