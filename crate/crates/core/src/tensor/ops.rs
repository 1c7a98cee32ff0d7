//! Differentiable operations recorded on a [`Tape`].

use super::{ensure_finite, Rng, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

// ── raw kernels ──────────────────────────────────────────────────────────

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a[kk * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Per-group normalization statistics over `groups` slices; `index(g, i)`
/// maps the i-th member of group g to a flat offset.
struct GroupNorm {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    var: Vec<f64>,
}

fn group_stats<T: Scalar>(
    data: &[T],
    groups: usize,
    members: usize,
    eps: f64,
    index: impl Fn(usize, usize) -> usize,
) -> GroupNorm {
    let mut mean = vec![0.0; groups];
    let mut var = vec![0.0; groups];
    let mut inv_std = vec![0.0; groups];
    for g in 0..groups {
        let m = (0..members).map(|i| data[index(g, i)].as_f64()).sum::<f64>() / members as f64;
        let v = (0..members)
            .map(|i| {
                let d = data[index(g, i)].as_f64() - m;
                d * d
            })
            .sum::<f64>()
            / members as f64;
        mean[g] = m;
        var[g] = v;
        inv_std[g] = 1.0 / (v + eps).sqrt();
    }
    GroupNorm { mean, inv_std, var }
}

/// Backward of `y = gain·x̂ + bias` where `x̂` is normalized within groups.
/// Returns (dx, dgain, dbias); gain/bias are indexed by `param_of(g)`.
#[allow(clippy::too_many_arguments)]
fn group_norm_backward<T: Scalar>(
    x: &[T],
    grad: &[T],
    gain: &[T],
    stats: &GroupNorm,
    groups: usize,
    members: usize,
    param_of: impl Fn(usize, usize) -> usize,
    index: impl Fn(usize, usize) -> usize,
    nparams: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgain = vec![0.0; nparams];
    let mut dbias = vec![0.0; nparams];
    let n = members as f64;
    for g in 0..groups {
        let (m, inv) = (stats.mean[g], stats.inv_std[g]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for i in 0..members {
            let at = index(g, i);
            let p = param_of(g, i);
            let xhat = (x[at].as_f64() - m) * inv;
            let dy = grad[at].as_f64();
            dgain[p] += dy * xhat;
            dbias[p] += dy;
            let dxhat = dy * gain[p].as_f64();
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for i in 0..members {
            let at = index(g, i);
            let p = param_of(g, i);
            let xhat = (x[at].as_f64() - m) * inv;
            let dxhat = grad[at].as_f64() * gain[p].as_f64();
            dx[at] = T::from_f64(inv / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat));
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
    (dx, cast(dgain), cast(dbias))
}

/// Batch statistics produced by a training-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over the normalized axes.
    pub var: Vec<f64>,
    /// Number of scalars per channel that produced the statistics.
    pub count: usize,
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn emit(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        shape: Vec<usize>,
        data: Vec<T>,
        bw: super::BackwardFn<T>,
    ) -> Result<Var> {
        ensure_finite(op, &data)?;
        self.custom(op, inputs, Tensor::from_parts(shape, data), bw)
    }

    // ── elementwise ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.emit(
            "add",
            &[a, b],
            shape,
            data,
            Box::new(|ctx| {
                vec![ctx.needs[0].then(|| ctx.grad_out.to_vec()), ctx.needs[1].then(|| ctx.grad_out.to_vec())]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        self.emit(
            "sub",
            &[a, b],
            shape,
            data,
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad_out.to_vec()),
                    ctx.needs[1].then(|| ctx.grad_out.iter().map(|&g| -g).collect()),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.emit(
            "mul",
            &[a, b],
            shape,
            data,
            Box::new(|ctx| {
                let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                vec![
                    ctx.needs[0].then(|| ctx.grad_out.iter().zip(y).map(|(&g, &v)| g * v).collect()),
                    ctx.needs[1].then(|| ctx.grad_out.iter().zip(x).map(|(&g, &v)| g * v).collect()),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let c = T::from_f64(factor);
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.emit(
            "scale",
            &[a],
            shape,
            data,
            Box::new(move |ctx| vec![Some(ctx.grad_out.iter().map(|&g| g * c).collect())]),
        )
    }

    /// Add `bias [D]` to every slice along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_bias", format!("x {:?}, bias {:?}", self.shape(x), self.shape(bias))));
        }
        let b = self.value(bias).data().to_vec();
        let data =
            self.value(x).data().chunks_exact(d).flat_map(|row| row.iter().zip(&b).map(|(&v, &bv)| v + bv)).collect();
        let shape = self.shape(x).to_vec();
        self.emit(
            "add_bias",
            &[x, bias],
            shape,
            data,
            Box::new(move |ctx| {
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![T::zero(); d];
                    for row in ctx.grad_out.chunks_exact(d) {
                        gb.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                    }
                    gb
                });
                vec![ctx.needs[0].then(|| ctx.grad_out.to_vec()), gb]
            }),
        )
    }

    /// Add a per-channel bias `[C]` to an NCHW tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || self.shape(bias) != [shape[1]] {
            return Err(Error::shape("add_channel_bias", format!("x {shape:?}, bias {:?}", self.shape(bias))));
        }
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, plane) in data.chunks_exact_mut(hw).enumerate() {
            let bv = b[i % c];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        self.emit(
            "add_channel_bias",
            &[x, bias],
            shape,
            data,
            Box::new(move |ctx| {
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![T::zero(); c];
                    for (i, plane) in ctx.grad_out.chunks_exact(hw).enumerate() {
                        gb[i % c] += plane.iter().fold(T::zero(), |a, &g| a + g);
                    }
                    gb
                });
                vec![ctx.needs[0].then(|| ctx.grad_out.to_vec()), gb]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.emit(
            "relu",
            &[x],
            shape,
            data,
            Box::new(|ctx| {
                let x = ctx.inputs[0].data();
                vec![Some(
                    ctx.grad_out.iter().zip(x).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect(),
                )]
            }),
        )
    }

    /// GELU with the exact erf form.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        self.emit(
            "gelu",
            &[x],
            shape,
            data,
            Box::new(|ctx| {
                let x = ctx.inputs[0].data();
                vec![Some(ctx.grad_out.iter().zip(x).map(|(&g, &v)| g * gelu_grad(v)).collect())]
            }),
        )
    }

    /// Inverted dropout: zero each entry with probability `p` and scale the
    /// survivors by `1/(1−p)`. `p = 0` returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability must lie in [0,1), got {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> =
            (0..self.value(x).numel()).map(|_| if rng.uniform() < p { T::zero() } else { keep }).collect();
        let mask = self.constant(Tensor::from_parts(self.shape(x).to_vec(), mask));
        self.mul(x, mask)
    }

    // ── reductions and shape ops ─────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let n = self.value(x).numel();
        self.emit("sum", &[x], vec![1], vec![total], Box::new(move |ctx| vec![Some(vec![ctx.grad_out[0]; n])]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.custom("reshape", &[x], value, Box::new(|ctx| vec![Some(ctx.grad_out.to_vec())]))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", format!("permutation {perm:?} for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_raw(self.value(x).data(), &shape, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out_shape_c = out_shape.clone();
        self.emit(
            "permute",
            &[x],
            out_shape,
            data,
            Box::new(move |ctx| vec![Some(permute_raw(ctx.grad_out, &out_shape_c, &inverse))]),
        )
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                data.extend_from_slice(&self.value(p).data()[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        self.emit(
            "concat",
            parts,
            shape,
            data,
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<T>> = sizes.iter().map(|&sz| Vec::with_capacity(outer * sz * inner)).collect();
                let mut at = 0;
                for _ in 0..outer {
                    for (g, &sz) in grads.iter_mut().zip(&sizes) {
                        g.extend_from_slice(&ctx.grad_out[at..at + sz * inner]);
                        at += sz * inner;
                    }
                }
                grads.into_iter().zip(&ctx.needs).map(|(g, &n)| n.then_some(g)).collect()
            }),
        )
    }

    /// Mean over the spatial axes of an NCHW tensor, giving `[B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected 4-D input, got {shape:?}")));
        }
        let hw = shape[2] * shape[3];
        let inv = T::from_f64(1.0 / hw as f64);
        let data =
            self.value(x).data().chunks_exact(hw).map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv).collect();
        self.emit(
            "global_avg_pool",
            &[x],
            vec![shape[0], shape[1]],
            data,
            Box::new(move |ctx| {
                vec![Some(ctx.grad_out.iter().flat_map(|&g| std::iter::repeat_n(g * inv, hw)).collect())]
            }),
        )
    }

    // ── linear algebra ───────────────────────────────────────────────────

    /// `a [M,K] · b [K,N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.emit(
            "matmul",
            &[a, b],
            vec![m, n],
            out,
            Box::new(move |ctx| {
                let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.needs[0].then(|| {
                    let mut g = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, ctx.grad_out, bv, &mut g);
                    g
                });
                let gb = ctx.needs[1].then(|| {
                    let mut g = vec![T::zero(); k * n];
                    gemm_tn(k, m, n, av, ctx.grad_out, &mut g);
                    g
                });
                vec![ga, gb]
            }),
        )
    }

    /// `a [M,K] · b [N,K]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", format!("{sa:?} x {sb:?}ᵀ")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.emit(
            "matmul_nt",
            &[a, b],
            vec![m, n],
            out,
            Box::new(move |ctx| {
                let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.needs[0].then(|| {
                    let mut g = vec![T::zero(); m * k];
                    gemm_nn(m, n, k, ctx.grad_out, bv, &mut g);
                    g
                });
                let gb = ctx.needs[1].then(|| {
                    let mut g = vec![T::zero(); n * k];
                    gemm_tn(n, m, k, ctx.grad_out, av, &mut g);
                    g
                });
                vec![ga, gb]
            }),
        )
    }

    /// `x [R,In] · wᵀ + b` with `w [Out,In]`, `b [Out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul_nt(x, weight)?;
        self.add_bias(y, bias)
    }

    /// Batched `a [G,M,K] · b [G,K,N]`, or `b [G,N,K]ᵀ` when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (transpose_b={transpose_b})")));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); groups * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for g in 0..groups {
                let (ag, bg) = (&av[g * m * k..(g + 1) * m * k], &bv[g * k * n..(g + 1) * k * n]);
                let og = &mut out[g * m * n..(g + 1) * m * n];
                if transpose_b {
                    gemm_nt(m, k, n, ag, bg, og)
                } else {
                    gemm_nn(m, k, n, ag, bg, og)
                }
            }
        }
        self.emit(
            "bmm",
            &[a, b],
            vec![groups, m, n],
            out,
            Box::new(move |ctx| {
                let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut ga = ctx.needs[0].then(|| vec![T::zero(); groups * m * k]);
                let mut gb = ctx.needs[1].then(|| vec![T::zero(); groups * k * n]);
                for g in 0..groups {
                    let go = &ctx.grad_out[g * m * n..(g + 1) * m * n];
                    let (ag, bg) = (&av[g * m * k..(g + 1) * m * k], &bv[g * k * n..(g + 1) * k * n]);
                    if let Some(ga) = ga.as_mut() {
                        let dst = &mut ga[g * m * k..(g + 1) * m * k];
                        if transpose_b {
                            gemm_nn(m, n, k, go, bg, dst)
                        } else {
                            gemm_nt(m, n, k, go, bg, dst)
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        let dst = &mut gb[g * k * n..(g + 1) * k * n];
                        if transpose_b {
                            gemm_tn(n, m, k, go, ag, dst)
                        } else {
                            gemm_tn(k, m, n, ag, go, dst)
                        }
                    }
                }
                vec![ga, gb]
            }),
        )
    }

    // ── normalization ────────────────────────────────────────────────────

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let data = softmax_rows_raw(self.value(x).data(), d);
        self.emit(
            "softmax",
            &[x],
            shape,
            data,
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let mut g = vec![T::zero(); y.len()];
                for ((gr, yr), dr) in g.chunks_exact_mut(d).zip(y.chunks_exact(d)).zip(ctx.grad_out.chunks_exact(d)) {
                    let dot = yr.iter().zip(dr).fold(T::zero(), |a, (&yv, &dv)| a + yv * dv);
                    for ((gv, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                        *gv = yv * (dv - dot);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gain`/`bias [D]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {shape:?}, gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let rows = self.value(x).numel() / d;
        let xd = self.value(x).data();
        let stats = group_stats(xd, rows, d, eps, |g, i| g * d + i);
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(xd.len());
        for r in 0..rows {
            for i in 0..d {
                let xhat = (xd[r * d + i].as_f64() - stats.mean[r]) * stats.inv_std[r];
                out.push(T::from_f64(xhat * gv[i].as_f64() + bv[i].as_f64()));
            }
        }
        self.emit(
            "layer_norm",
            &[x, gain, bias],
            shape,
            out,
            Box::new(move |ctx| {
                let (xd, gain) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let stats = group_stats(xd, rows, d, eps, |g, i| g * d + i);
                let (dx, dg, db) =
                    group_norm_backward(xd, ctx.grad_out, gain, &stats, rows, d, |_, i| i, |g, i| g * d + i, d);
                vec![ctx.needs[0].then_some(dx), ctx.needs[1].then_some(dg), ctx.needs[2].then_some(db)]
            }),
        )
    }

    /// Training-mode 2-D batch normalization over batch and spatial axes.
    pub fn batch_norm2d(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || self.shape(gain) != [shape[1]] || self.shape(bias) != [shape[1]] {
            return Err(Error::shape("batch_norm2d", format!("x {shape:?}, gain {:?}", self.shape(gain))));
        }
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let index = move |ch: usize, i: usize| ((i / hw) * c + ch) * hw + i % hw;
        let xd = self.value(x).data();
        let stats = group_stats(xd, c, b * hw, eps, index);
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![T::zero(); xd.len()];
        for (at, o) in out.iter_mut().enumerate() {
            let ch = (at / hw) % c;
            let xhat = (xd[at].as_f64() - stats.mean[ch]) * stats.inv_std[ch];
            *o = T::from_f64(xhat * gv[ch].as_f64() + bv[ch].as_f64());
        }
        let batch = BatchStats { mean: stats.mean.clone(), var: stats.var.clone(), count: b * hw };
        let y = self.emit(
            "batch_norm2d",
            &[x, gain, bias],
            shape,
            out,
            Box::new(move |ctx| {
                let (xd, gain) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let stats = group_stats(xd, c, b * hw, eps, index);
                let (dx, dg, db) = group_norm_backward(xd, ctx.grad_out, gain, &stats, c, b * hw, |ch, _| ch, index, c);
                vec![ctx.needs[0].then_some(dx), ctx.needs[1].then_some(dg), ctx.needs[2].then_some(db)]
            }),
        )?;
        Ok((y, batch))
    }

    /// Inference-mode batch normalization using fixed running statistics.
    pub fn batch_norm2d_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = shape.get(1).copied().unwrap_or(0);
        if shape.len() != 4 || self.shape(gain) != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm2d_eval", format!("x {shape:?}")));
        }
        let hw = shape[2] * shape[3];
        let inv: Vec<f64> = running_var.iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect();
        let mean: Vec<f64> = running_mean.iter().map(|v| v.as_f64()).collect();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(at, &v)| {
                let ch = (at / hw) % c;
                T::from_f64((v.as_f64() - mean[ch]) * inv[ch] * gv[ch].as_f64() + bv[ch].as_f64())
            })
            .collect();
        self.emit(
            "batch_norm2d_eval",
            &[x, gain, bias],
            shape,
            out,
            Box::new(move |ctx| {
                let (xd, gain) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut dx = vec![T::zero(); xd.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (at, &g) in ctx.grad_out.iter().enumerate() {
                    let ch = (at / hw) % c;
                    let g = g.as_f64();
                    dx[at] = T::from_f64(g * inv[ch] * gain[ch].as_f64());
                    dg[ch] += g * (xd[at].as_f64() - mean[ch]) * inv[ch];
                    db[ch] += g;
                }
                let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
                vec![ctx.needs[0].then_some(dx), ctx.needs[1].then(|| cast(dg)), ctx.needs[2].then(|| cast(db))]
            }),
        )
    }

    // ── losses ───────────────────────────────────────────────────────────

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", format!("logits {shape:?}, {} labels", labels.len())));
        }
        let (rows, n) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {n} classes")));
        }
        let z = self.value(logits).data();
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * n..(r + 1) * n];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[label].as_f64();
        }
        let labels = labels.to_vec();
        self.emit(
            "cross_entropy",
            &[logits],
            vec![1],
            vec![T::from_f64(total / rows as f64)],
            Box::new(move |ctx| {
                let z = ctx.inputs[0].data();
                let scale = ctx.grad_out[0] / T::from_f64(rows as f64);
                let mut g = softmax_rows_raw(z, n);
                for (r, &label) in labels.iter().enumerate() {
                    g[r * n + label] -= T::one();
                }
                g.iter_mut().for_each(|v| *v *= scale);
                vec![Some(g)]
            }),
        )
    }

    /// Mean squared difference over all scalars.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel();
        let total = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum::<f64>();
        self.emit(
            "mse",
            &[a, b],
            vec![1],
            vec![T::from_f64(total / n as f64)],
            Box::new(move |ctx| {
                let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let s = ctx.grad_out[0] * T::from_f64(2.0 / n as f64);
                let diff: Vec<T> = x.iter().zip(y).map(|(&p, &q)| (p - q) * s).collect();
                let neg = ctx.needs[1].then(|| diff.iter().map(|&v| -v).collect());
                vec![ctx.needs[0].then_some(diff), neg]
            }),
        )
    }
}

pub(crate) fn softmax_rows_raw<T: Scalar>(data: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(d) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total = exps.iter().fold(T::zero(), |a, &v| a + v);
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

fn permute_raw<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0; rank];
    for _ in 0..data.len() {
        let offset: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Softmax over the last axis of a plain tensor (no tape).
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *x.shape().last().unwrap();
    let out = softmax_rows_raw(x.data(), d);
    ensure_finite("softmax", &out)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

impl<T: Scalar> Tape<T> {
    /// Scale each row (last axis) to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let xd = self.value(x).data();
        let norms: Vec<T> = xd.chunks_exact(d).map(|r| r.iter().fold(T::zero(), |a, &v| a + v * v).sqrt()).collect();
        if norms.iter().any(|&n| n == T::zero()) {
            return Err(Error::InvalidArgument("cannot normalize a zero row".into()));
        }
        let out = xd.chunks_exact(d).zip(&norms).flat_map(|(r, &n)| r.iter().map(move |&v| v / n)).collect();
        self.emit(
            "normalize_rows",
            &[x],
            shape,
            out,
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let mut g = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.chunks_exact(d).zip(ctx.grad_out.chunks_exact(d)).zip(&norms) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    g.extend(yr.iter().zip(gr).map(|(&p, &q)| (q - p * dot) / n));
                }
                vec![Some(g)]
            }),
        )
    }
}
