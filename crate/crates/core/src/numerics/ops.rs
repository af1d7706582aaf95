//! Differentiable primitives. Each op computes its value eagerly and, when any
//! input requires gradient, records a pullback on the tape.

use std::sync::Arc;

use super::tensor::lit;
use super::{Element, NumericError, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericError {
    NumericError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn rows_of(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

fn expect_rank3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), NumericError> {
    match *shape {
        [b, s, d] => Ok((b, s, d)),
        _ => Err(NumericError::Rank {
            op,
            expected: 3,
            shape: shape.to_vec(),
        }),
    }
}

fn expect_rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize), NumericError> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(NumericError::Rank {
            op,
            expected: 2,
            shape: shape.to_vec(),
        }),
    }
}

fn same_tape<T: Element>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<(), NumericError> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(NumericError::ForeignVar)
    }
}

#[inline]
fn std_normal_cdf<T: Element>(x: T) -> T {
    lit::<T>(0.5) * (T::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn std_normal_pdf<T: Element>(x: T) -> T {
    (-(x * x) * lit(0.5)).exp() * lit(0.398_942_280_401_432_7)
}

impl<'t, T: Element> Var<'t, T> {
    /// `[.., k] × [k, n] → [.., n]`.
    pub fn matmul(&self, w: &Var<'t, T>) -> Result<Var<'t, T>, NumericError> {
        same_tape(self, w)?;
        let (k, n) = expect_rank2("matmul", w.shape())?;
        if self.value.last_dim() != k {
            return Err(mismatch("matmul", self.shape(), w.shape()));
        }
        let m = rows_of(self.shape());
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value.data(), false, w.value.data(), false, &mut out, T::zero());
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let (a, b) = (Arc::clone(&self.value), Arc::clone(&w.value));
        let a_shape = self.shape().to_vec();
        self.tape.record(
            "matmul",
            Tensor::new(shape, out)?,
            &[self, w],
            move |g, needs| {
                let da = needs[0].then(|| {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, b.data(), true, &mut da, T::zero());
                    Tensor::new(a_shape.clone(), da).unwrap()
                });
                let db = needs[1].then(|| {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, a.data(), true, g.data(), false, &mut db, T::zero());
                    Tensor::new(vec![k, n], db).unwrap()
                });
                vec![da, db]
            },
        )
    }

    /// Elementwise sum. `other` may also broadcast over leading axes when its
    /// shape is a suffix of `self`'s (bias rows, positional tables).
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, NumericError> {
        same_tape(self, other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            let out = self.value.zip_map(&other.value, |x, y| x + y);
            return self.tape.record("add", out, &[self, other], |g, needs| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
            });
        }
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add", sa, sb));
        }
        let inner = other.value.numel();
        let bd = other.value.data();
        let mut out = self.value.as_ref().clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (x, &y) in chunk.iter_mut().zip(bd) {
                *x += y;
            }
        }
        let b_shape = sb.to_vec();
        self.tape.record("add", out, &[self, other], move |g, needs| {
            let db = needs[1].then(|| {
                let mut acc = Tensor::zeros(&b_shape);
                for chunk in g.data().chunks(inner) {
                    for (a, &v) in acc.data_mut().iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                acc
            });
            vec![needs[0].then(|| g.clone()), db]
        })
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, NumericError> {
        same_tape(self, other)?;
        if self.shape() != other.shape() {
            return Err(mismatch("mul", self.shape(), other.shape()));
        }
        let out = self.value.zip_map(&other.value, |x, y| x * y);
        let (a, b) = (Arc::clone(&self.value), Arc::clone(&other.value));
        self.tape.record("mul", out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |x, y| x * y)),
                needs[1].then(|| g.zip_map(&a, |x, y| x * y)),
            ]
        })
    }

    pub fn scale(&self, s: T) -> Result<Var<'t, T>, NumericError> {
        let out = self.value.map(|x| x * s);
        self.tape
            .record("scale", out, &[self], move |g, _| vec![Some(g.map(|x| x * s))])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Result<Var<'t, T>, NumericError> {
        let out = self.value.map(|x| x * std_normal_cdf(x));
        let x = Arc::clone(&self.value);
        self.tape.record("gelu", out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gi, xi| {
                gi * (std_normal_cdf(xi) + xi * std_normal_pdf(xi))
            }))]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t, T>, NumericError> {
        let d = self.value.last_dim();
        let mut out = self.value.as_ref().clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        let y = Arc::new(out.clone());
        self.tape.record("softmax", out, &[self], move |g, _| {
            let mut dx = g.clone();
            for (dr, yr) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for (v, &yv) in dr.iter_mut().zip(yr) {
                    *v = yv * (*v - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    /// LayerNorm over the last axis with affine `gamma`, `beta` and epsilon 1e-5.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>) -> Result<Var<'t, T>, NumericError> {
        same_tape(self, gamma)?;
        same_tape(self, beta)?;
        let d = self.value.last_dim();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(mismatch("layer_norm", self.shape(), gamma.shape()));
        }
        let rows = rows_of(self.shape());
        let eps = lit::<T>(LAYER_NORM_EPS);
        let dn = lit::<T>(d as f64);
        let mut xhat = self.value.as_ref().clone();
        let mut rstd = Vec::with_capacity(rows);
        for row in xhat.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let (gd, bd) = (gamma.value.data(), beta.value.data());
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, &g), &b) in row.iter_mut().zip(gd).zip(bd) {
                *v = *v * g + b;
            }
        }
        let xhat = Arc::new(xhat);
        let gamma_v = Arc::clone(&gamma.value);
        self.tape
            .record("layer_norm", out, &[self, gamma, beta], move |g, needs| {
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                if needs[1] || needs[2] {
                    for (gr, xr) in g.data().chunks(d).zip(xhat.data().chunks(d)) {
                        for j in 0..d {
                            dgamma.data_mut()[j] += gr[j] * xr[j];
                            dbeta.data_mut()[j] += gr[j];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = g.clone();
                    let gd = gamma_v.data();
                    for ((dr, xr), &r) in dx
                        .data_mut()
                        .chunks_mut(d)
                        .zip(xhat.data().chunks(d))
                        .zip(&rstd)
                    {
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for j in 0..d {
                            let dxh = dr[j] * gd[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xr[j];
                        }
                        mean_dxhat = mean_dxhat / dn;
                        mean_dxhat_xhat = mean_dxhat_xhat / dn;
                        for j in 0..d {
                            let dxh = dr[j] * gd[j];
                            dr[j] = r * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                        }
                    }
                    dx
                });
                vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
            })
    }

    /// Multi-head scaled dot-product self-attention over a fused projection
    /// `qkv: [B, S, 3d]` (query, key, value blocks in that order) → `[B, S, d]`.
    pub fn attention(&self, heads: usize) -> Result<Var<'t, T>, NumericError> {
        let (b, s, d3) = expect_rank3("attention", self.shape())?;
        if d3 % 3 != 0 || (d3 / 3) % heads != 0 {
            return Err(NumericError::Heads { width: d3 / 3, heads });
        }
        let d = d3 / 3;
        let dh = d / heads;
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let src = self.value.data();
        let gather = |bi: usize, part: usize, h: usize| -> Vec<T> {
            let mut m = Vec::with_capacity(s * dh);
            for t in 0..s {
                let base = (bi * s + t) * d3 + part * d + h * dh;
                m.extend_from_slice(&src[base..base + dh]);
            }
            m
        };
        let mut out = vec![T::zero(); b * s * d];
        let mut probs = Vec::with_capacity(b * heads);
        for bi in 0..b {
            for h in 0..heads {
                let (q, k, v) = (gather(bi, 0, h), gather(bi, 1, h), gather(bi, 2, h));
                let mut p = vec![T::zero(); s * s];
                T::gemm(s, dh, s, &q, false, &k, true, &mut p, T::zero());
                for row in p.chunks_mut(s) {
                    row.iter_mut().for_each(|x| *x = *x * scale);
                    softmax_in_place(row);
                }
                let mut o = vec![T::zero(); s * dh];
                T::gemm(s, s, dh, &p, false, &v, false, &mut o, T::zero());
                for t in 0..s {
                    let dst = (bi * s + t) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&o[t * dh..(t + 1) * dh]);
                }
                probs.push(p);
            }
        }
        let qkv = Arc::clone(&self.value);
        self.tape.record(
            "attention",
            Tensor::new(vec![b, s, d], out)?,
            &[self],
            move |g, _| {
                let src = qkv.data();
                let gd = g.data();
                let mut dqkv = vec![T::zero(); b * s * d3];
                let gather = |bi: usize, part: usize, h: usize| -> Vec<T> {
                    let mut m = Vec::with_capacity(s * dh);
                    for t in 0..s {
                        let base = (bi * s + t) * d3 + part * d + h * dh;
                        m.extend_from_slice(&src[base..base + dh]);
                    }
                    m
                };
                for bi in 0..b {
                    for h in 0..heads {
                        let (q, k, v) = (gather(bi, 0, h), gather(bi, 1, h), gather(bi, 2, h));
                        let p = &probs[bi * heads + h];
                        let mut go = Vec::with_capacity(s * dh);
                        for t in 0..s {
                            let base = (bi * s + t) * d + h * dh;
                            go.extend_from_slice(&gd[base..base + dh]);
                        }
                        let mut dv = vec![T::zero(); s * dh];
                        T::gemm(s, s, dh, p, true, &go, false, &mut dv, T::zero());
                        let mut dp = vec![T::zero(); s * s];
                        T::gemm(s, dh, s, &go, false, &v, true, &mut dp, T::zero());
                        for (dr, pr) in dp.chunks_mut(s).zip(p.chunks(s)) {
                            let dot: T = dr.iter().zip(pr).map(|(&a, &c)| a * c).sum();
                            for (x, &pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot) * scale;
                            }
                        }
                        let mut dq = vec![T::zero(); s * dh];
                        T::gemm(s, s, dh, &dp, false, &k, false, &mut dq, T::zero());
                        let mut dk = vec![T::zero(); s * dh];
                        T::gemm(s, s, dh, &dp, true, &q, false, &mut dk, T::zero());
                        for t in 0..s {
                            let row = (bi * s + t) * d3 + h * dh;
                            for (part, m) in [(0, &dq), (1, &dk), (2, &dv)] {
                                let dst = row + part * d;
                                dqkv[dst..dst + dh].copy_from_slice(&m[t * dh..(t + 1) * dh]);
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(vec![b, s, d3], dqkv).unwrap())]
            },
        )
    }

    pub fn sum(&self) -> Result<Var<'t, T>, NumericError> {
        let shape = self.shape().to_vec();
        self.tape.record(
            "sum",
            Tensor::scalar(self.value.sum()),
            &[self],
            move |g, _| vec![Some(Tensor::full(&shape, g.item()))],
        )
    }

    pub fn mean(&self) -> Result<Var<'t, T>, NumericError> {
        let n = lit::<T>(self.value.numel() as f64);
        let shape = self.shape().to_vec();
        self.tape.record(
            "mean",
            Tensor::scalar(self.value.sum() / n),
            &[self],
            move |g, _| vec![Some(Tensor::full(&shape, g.item() / n))],
        )
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>, NumericError> {
        let (b, c) = expect_rank2("cross_entropy", self.shape())?;
        if labels.len() != b {
            return Err(mismatch("cross_entropy", self.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(NumericError::Label { label: bad, classes: c });
        }
        let mut probs = self.value.as_ref().clone();
        let mut loss = T::zero();
        for (row, &y) in probs.data_mut().chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[y];
            softmax_in_place(row);
        }
        let bn = lit::<T>(b as f64);
        let labels = labels.to_vec();
        self.tape.record(
            "cross_entropy",
            Tensor::scalar(loss / bn),
            &[self],
            move |g, _| {
                let scale = g.item() / bn;
                let mut dx = probs.clone();
                for (row, &y) in dx.data_mut().chunks_mut(c).zip(&labels) {
                    row[y] = row[y] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * scale);
                }
                vec![Some(dx)]
            },
        )
    }

    /// Token `idx` of every sequence: `[B, S, d] → [B, d]`.
    pub fn select_token(&self, idx: usize) -> Result<Var<'t, T>, NumericError> {
        let (b, s, d) = expect_rank3("select_token", self.shape())?;
        if idx >= s {
            return Err(NumericError::Index { op: "select_token", index: idx, len: s });
        }
        let src = self.value.data();
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let base = (bi * s + idx) * d;
            out.extend_from_slice(&src[base..base + d]);
        }
        self.tape.record(
            "select_token",
            Tensor::new(vec![b, d], out)?,
            &[self],
            move |g, _| {
                let mut dx = Tensor::zeros(&[b, s, d]);
                for bi in 0..b {
                    let base = (bi * s + idx) * d;
                    dx.data_mut()[base..base + d].copy_from_slice(&g.data()[bi * d..(bi + 1) * d]);
                }
                vec![Some(dx)]
            },
        )
    }

    /// Overwrites token `idx` of every sequence with the rows of `tok: [B, d]`.
    pub fn replace_token(&self, idx: usize, tok: &Var<'t, T>) -> Result<Var<'t, T>, NumericError> {
        same_tape(self, tok)?;
        let (b, s, d) = expect_rank3("replace_token", self.shape())?;
        if idx >= s {
            return Err(NumericError::Index { op: "replace_token", index: idx, len: s });
        }
        if tok.shape() != [b, d] {
            return Err(mismatch("replace_token", self.shape(), tok.shape()));
        }
        let mut out = self.value.as_ref().clone();
        for bi in 0..b {
            let base = (bi * s + idx) * d;
            out.data_mut()[base..base + d].copy_from_slice(&tok.value.data()[bi * d..(bi + 1) * d]);
        }
        self.tape
            .record("replace_token", out, &[self, tok], move |g, needs| {
                let dtok = needs[1].then(|| {
                    let mut t = Vec::with_capacity(b * d);
                    for bi in 0..b {
                        let base = (bi * s + idx) * d;
                        t.extend_from_slice(&g.data()[base..base + d]);
                    }
                    Tensor::new(vec![b, d], t).unwrap()
                });
                let dx = needs[0].then(|| {
                    let mut dx = g.clone();
                    for bi in 0..b {
                        let base = (bi * s + idx) * d;
                        dx.data_mut()[base..base + d].fill(T::zero());
                    }
                    dx
                });
                vec![dx, dtok]
            })
    }

    /// Concatenates along the sequence axis: `[B, S1, d] ++ [B, S2, d]`.
    pub fn concat_seq(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, NumericError> {
        same_tape(self, other)?;
        let (b, s1, d) = expect_rank3("concat_seq", self.shape())?;
        let (b2, s2, d2) = expect_rank3("concat_seq", other.shape())?;
        if b != b2 || d != d2 {
            return Err(mismatch("concat_seq", self.shape(), other.shape()));
        }
        let s = s1 + s2;
        let mut out = Vec::with_capacity(b * s * d);
        for bi in 0..b {
            out.extend_from_slice(&self.value.data()[bi * s1 * d..(bi + 1) * s1 * d]);
            out.extend_from_slice(&other.value.data()[bi * s2 * d..(bi + 1) * s2 * d]);
        }
        self.tape.record(
            "concat_seq",
            Tensor::new(vec![b, s, d], out)?,
            &[self, other],
            move |g, needs| {
                let gd = g.data();
                let part = |lo: usize, len: usize| {
                    let mut v = Vec::with_capacity(b * len * d);
                    for bi in 0..b {
                        let base = (bi * s + lo) * d;
                        v.extend_from_slice(&gd[base..base + len * d]);
                    }
                    Tensor::new(vec![b, len, d], v).unwrap()
                };
                vec![needs[0].then(|| part(0, s1)), needs[1].then(|| part(s1, s2))]
            },
        )
    }

    /// Row `i` of a `[R, d]` table.
    pub fn row(&self, i: usize) -> Result<Var<'t, T>, NumericError> {
        let (r, d) = expect_rank2("row", self.shape())?;
        if i >= r {
            return Err(NumericError::Index { op: "row", index: i, len: r });
        }
        let out = self.value.data()[i * d..(i + 1) * d].to_vec();
        self.tape
            .record("row", Tensor::new(vec![d], out)?, &[self], move |g, _| {
                let mut dx = Tensor::zeros(&[r, d]);
                dx.data_mut()[i * d..(i + 1) * d].copy_from_slice(g.data());
                vec![Some(dx)]
            })
    }

    /// Repeats a `[d]` vector into `[B, d]`.
    pub fn expand(&self, b: usize) -> Result<Var<'t, T>, NumericError> {
        if self.shape().len() != 1 {
            return Err(NumericError::Rank {
                op: "expand",
                expected: 1,
                shape: self.shape().to_vec(),
            });
        }
        let d = self.shape()[0];
        let mut out = Vec::with_capacity(b * d);
        for _ in 0..b {
            out.extend_from_slice(self.value.data());
        }
        self.tape
            .record("expand", Tensor::new(vec![b, d], out)?, &[self], move |g, _| {
                let mut acc = Tensor::zeros(&[d]);
                for chunk in g.data().chunks(d) {
                    for (a, &v) in acc.data_mut().iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                vec![Some(acc)]
            })
    }

    /// Stacks `n` tensors of shape `[B, d]` into `[B, n, d]`.
    pub fn stack_tokens(tokens: &[Var<'t, T>]) -> Result<Var<'t, T>, NumericError> {
        let first = tokens.first().ok_or(NumericError::Empty("stack_tokens"))?;
        let (b, d) = expect_rank2("stack_tokens", first.shape())?;
        for t in tokens {
            same_tape(first, t)?;
            if t.shape() != [b, d] {
                return Err(mismatch("stack_tokens", first.shape(), t.shape()));
            }
        }
        let n = tokens.len();
        let mut out = vec![T::zero(); b * n * d];
        for (j, t) in tokens.iter().enumerate() {
            for bi in 0..b {
                let dst = (bi * n + j) * d;
                out[dst..dst + d].copy_from_slice(&t.value.data()[bi * d..(bi + 1) * d]);
            }
        }
        let refs: Vec<&Var<'t, T>> = tokens.iter().collect();
        first.tape.record(
            "stack_tokens",
            Tensor::new(vec![b, n, d], out)?,
            &refs,
            move |g, needs| {
                (0..n)
                    .map(|j| {
                        needs[j].then(|| {
                            let mut v = Vec::with_capacity(b * d);
                            for bi in 0..b {
                                let src = (bi * n + j) * d;
                                v.extend_from_slice(&g.data()[src..src + d]);
                            }
                            Tensor::new(vec![b, d], v).unwrap()
                        })
                    })
                    .collect()
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>, NumericError> {
        let out = self.value.as_ref().clone().reshaped(shape)?;
        let orig = self.shape().to_vec();
        self.tape.record("reshape", out, &[self], move |g, _| {
            vec![Some(g.clone().reshaped(&orig).unwrap())]
        })
    }
}

fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
