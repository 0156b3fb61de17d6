//! Forward and adjoint compute kernels over raw tensors.
//!
//! Each kernel assigns every output element to exactly one loop body and
//! sums in a fixed order, so results do not depend on the thread count.

use crate::error::{Error, Result};
use crate::par;

use super::{Scalar, Tensor};

/// `out[m×n] = a[m×k] · b[k×n]`, accumulated row by row.
fn gemm_row_nn<T: Scalar>(a_row: &[T], b: &[T], n: usize, out_row: &mut [T]) {
    out_row.fill(T::ZERO);
    for (p, &av) in a_row.iter().enumerate() {
        if av == T::ZERO {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// `out_row[j] = <a_row, b[j, :]>` for `b` stored `n×k`.
fn gemm_row_nt<T: Scalar>(a_row: &[T], b: &[T], k: usize, out_row: &mut [T]) {
    for (j, o) in out_row.iter_mut().enumerate() {
        let b_row = &b[j * k..(j + 1) * k];
        let mut acc = T::ZERO;
        for (&x, &y) in a_row.iter().zip(b_row) {
            acc += x * y;
        }
        *o = acc;
    }
}

/// Row `i` of `aᵀ·g` where `a` is `r×m` and `g` is `r×n`.
fn gemm_row_tn<T: Scalar>(a: &[T], m: usize, i: usize, g: &[T], n: usize, out_row: &mut [T]) {
    out_row.fill(T::ZERO);
    let rows = g.len() / n.max(1);
    for r in 0..rows {
        let av = a[r * m + i];
        if av == T::ZERO {
            continue;
        }
        let g_row = &g[r * n..(r + 1) * n];
        for (o, &gv) in out_row.iter_mut().zip(g_row) {
            *o += av * gv;
        }
    }
}

fn last2(shape: &[usize]) -> (usize, usize) {
    let n = shape.len();
    (shape[n - 2], shape[n - 1])
}

/// `a[..., m, k] · b[k, n]`, leading dimensions of `a` treated as rows.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() < 1 || b.ndim() != 2 || a.shape()[a.ndim() - 1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
        ));
    }
    let k = b.shape()[0];
    let n = b.shape()[1];
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    let rows = a.numel() / k.max(1);
    let mut out = vec![T::ZERO; rows * n];
    let (ad, bd) = (a.data(), b.data());
    par::for_each_row(&mut out, n, |i, row| {
        gemm_row_nn(&ad[i * k..(i + 1) * k], bd, n, row)
    });
    Tensor::new(&shape, out)
}

/// `g[R×n] · b[k×n]ᵀ → R×k`; the input-gradient of [`matmul`].
pub fn matmul_nt<T: Scalar>(g: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, n) = (b.shape()[0], b.shape()[1]);
    let rows = g.numel() / n.max(1);
    let mut shape = g.shape().to_vec();
    *shape.last_mut().unwrap() = k;
    let mut out = vec![T::ZERO; rows * k];
    let (gd, bd) = (g.data(), b.data());
    par::for_each_row(&mut out, k, |i, row| {
        gemm_row_nt(&gd[i * n..(i + 1) * n], bd, n, row)
    });
    Tensor::new(&shape, out).expect("matmul_nt shape")
}

/// `a[R×k]ᵀ · g[R×n] → k×n`; the weight-gradient of [`matmul`].
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let k = a.shape()[a.ndim() - 1];
    let n = g.shape()[g.ndim() - 1];
    let mut out = vec![T::ZERO; k * n];
    let (ad, gd) = (a.data(), g.data());
    par::for_each_row(&mut out, n, |i, row| gemm_row_tn(ad, k, i, gd, n, row));
    Tensor::new(&[k, n], out).expect("matmul_tn shape")
}

/// Batched product over the leading dimension: `a[B,m,k] · b[B,k,n]`, or
/// `a[B,m,k] · b[B,n,k]ᵀ` when `transpose_b` is set.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, transpose_b: bool) -> Result<Tensor<T>> {
    let ok = a.ndim() == 3 && b.ndim() == 3 && a.shape()[0] == b.shape()[0];
    let (m, k) = if ok { last2(a.shape()) } else { (0, 0) };
    let (bk, n) = if ok {
        let (r, c) = last2(b.shape());
        if transpose_b {
            (c, r)
        } else {
            (r, c)
        }
    } else {
        (1, 0)
    };
    if !ok || bk != k {
        return Err(Error::shape(
            "bmm",
            format!(
                "cannot batch-multiply {:?} by {:?} (transpose_b={transpose_b})",
                a.shape(),
                b.shape()
            ),
        ));
    }
    let batch = a.shape()[0];
    let mut out = vec![T::ZERO; batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    par::for_each_row(&mut out, m * n, |bi, mat| {
        let am = &ad[bi * m * k..(bi + 1) * m * k];
        let bm = &bd[bi * k * n..(bi + 1) * k * n];
        for (i, row) in mat.chunks_mut(n).enumerate() {
            let a_row = &am[i * k..(i + 1) * k];
            if transpose_b {
                gemm_row_nt(a_row, bm, k, row);
            } else {
                gemm_row_nn(a_row, bm, n, row);
            }
        }
    });
    Tensor::new(&[batch, m, n], out)
}

/// Adjoint of [`bmm`]: returns `(da, db)` given the output gradient.
pub fn bmm_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    transpose_b: bool,
) -> (Tensor<T>, Tensor<T>) {
    let batch = a.shape()[0];
    let (m, k) = last2(a.shape());
    let n = g.shape()[2];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    // da = g · bᵀ (or g · b when b was already transposed)
    let mut da = vec![T::ZERO; batch * m * k];
    par::for_each_row(&mut da, m * k, |bi, mat| {
        let bm = &bd[bi * k * n..(bi + 1) * k * n];
        let gm = &gd[bi * m * n..(bi + 1) * m * n];
        for (i, row) in mat.chunks_mut(k).enumerate() {
            let g_row = &gm[i * n..(i + 1) * n];
            if transpose_b {
                // b is n×k
                gemm_row_nn(g_row, bm, k, row);
            } else {
                // b is k×n
                gemm_row_nt(g_row, bm, n, row);
            }
        }
    });
    // db = aᵀ · g, or gᵀ · a when transposed
    let mut db = vec![T::ZERO; batch * k * n];
    let (rows_b, cols_b) = if transpose_b { (n, k) } else { (k, n) };
    par::for_each_row(&mut db, k * n, |bi, mat| {
        let am = &ad[bi * m * k..(bi + 1) * m * k];
        let gm = &gd[bi * m * n..(bi + 1) * m * n];
        for (i, row) in mat.chunks_mut(cols_b).enumerate() {
            if transpose_b {
                gemm_row_tn(gm, n, i, am, k, row);
            } else {
                gemm_row_tn(am, k, i, gm, n, row);
            }
        }
    });
    (
        Tensor::new(a.shape(), da).expect("bmm da"),
        Tensor::new(&[batch, rows_b, cols_b], db).expect("bmm db"),
    )
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().last().ok_or(Error::Empty("softmax input"))?;
    if n == 0 {
        return Err(Error::Empty("softmax last dimension"));
    }
    let mut out = x.data().to_vec();
    par::for_each_row(&mut out, n, |_, row| {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        let inv = T::ONE / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    });
    Tensor::new(x.shape(), out)
}

/// `dx = y ⊙ (g − Σ g⊙y)` per row.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let n = *y.shape().last().unwrap();
    let mut dx = g.data().to_vec();
    let yd = y.data();
    par::for_each_row(&mut dx, n, |i, row| {
        let yr = &yd[i * n..(i + 1) * n];
        let dot: T = row.iter().zip(yr).map(|(&a, &b)| a * b).sum();
        for (d, &yv) in row.iter_mut().zip(yr) {
            *d = yv * (*d - dot);
        }
    });
    Tensor::new(y.shape(), dx).expect("softmax grad")
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Layer normalization over the last dimension.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let n = *x.shape().last().ok_or(Error::Empty("layernorm input"))?;
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(Error::shape(
            "layernorm",
            format!(
                "gamma {:?} / beta {:?} must match last dim {n} of {:?}",
                gamma.shape(),
                beta.shape(),
                x.shape()
            ),
        ));
    }
    let rows = x.numel() / n.max(1);
    let mut xhat = x.data().to_vec();
    let mut rstd = vec![T::ZERO; rows];
    let inv_n = T::from_f64(1.0 / n as f64);
    let eps = T::from_f64(eps);
    par::for_each_row2(&mut xhat, n, &mut rstd, 1, |_, row, r| {
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let inv = T::ONE / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        r[0] = inv;
    });
    let (g, b) = (gamma.data(), beta.data());
    let mut out = xhat.clone();
    par::for_each_row(&mut out, n, |_, row| {
        for ((v, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
            *v = *v * gv + bv;
        }
    });
    let xhat = Tensor::new(x.shape(), xhat)?;
    Ok((Tensor::new(x.shape(), out)?, LayerNormCache { xhat, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = gamma.numel();
    let inv_n = T::from_f64(1.0 / n as f64);
    let xh = cache.xhat.data();
    let gd = g.data();
    let gam = gamma.data();
    let mut dx = vec![T::ZERO; g.numel()];
    par::for_each_row(&mut dx, n, |i, row| {
        let xr = &xh[i * n..(i + 1) * n];
        let gr = &gd[i * n..(i + 1) * n];
        let mut mean_d = T::ZERO;
        let mut mean_dx = T::ZERO;
        for j in 0..n {
            let d = gr[j] * gam[j];
            mean_d += d;
            mean_dx += d * xr[j];
        }
        mean_d *= inv_n;
        mean_dx *= inv_n;
        let r = cache.rstd[i];
        for j in 0..n {
            row[j] = r * (gr[j] * gam[j] - mean_d - xr[j] * mean_dx);
        }
    });
    let mut dgamma = vec![T::ZERO; n];
    let mut dbeta = vec![T::ZERO; n];
    for (xr, gr) in xh.chunks(n).zip(gd.chunks(n)) {
        for j in 0..n {
            dgamma[j] += gr[j] * xr[j];
            dbeta[j] += gr[j];
        }
    }
    (
        Tensor::new(g.shape(), dx).expect("ln dx"),
        Tensor::new(&[n], dgamma).expect("ln dgamma"),
        Tensor::new(&[n], dbeta).expect("ln dbeta"),
    )
}

fn conv_dims<T: Scalar>(weight: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match weight.shape() {
        [n, 1, l] if *l > 0 => Ok((*n, *l)),
        s => Err(Error::shape(op, format!("weight must be N×1×L, got {s:?}"))),
    }
}

/// Strided single-input-channel convolution: `x[1×T]`, `w[N×1×L]` → `N×K`
/// with `K = (T − L)/stride + 1`. Trailing samples that do not fill a whole
/// window are ignored.
pub fn conv1d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (n, l) = conv_dims(weight, "conv1d")?;
    if stride == 0 {
        return Err(Error::Contract("conv1d stride must be positive".into()));
    }
    let t = x.numel();
    if x.ndim() != 2 || x.shape()[0] != 1 {
        return Err(Error::shape(
            "conv1d",
            format!("input must be 1×T, got {:?}", x.shape()),
        ));
    }
    if t < l {
        return Err(Error::InputTooShort { len: t, min: l });
    }
    let k = (t - l) / stride + 1;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![T::ZERO; n * k];
    par::for_each_row(&mut out, k, |ch, row| {
        let w = &wd[ch * l..(ch + 1) * l];
        for (j, o) in row.iter_mut().enumerate() {
            let seg = &xd[j * stride..j * stride + l];
            *o = seg.iter().zip(w).map(|(&a, &b)| a * b).sum();
        }
    });
    Tensor::new(&[n, k], out)
}

/// Frame-wise kernel products `z[k, l] = Σ_n h[n,k]·w[n,l]`.
fn frame_products<T: Scalar>(h: &[T], w: &[T], n: usize, k: usize, l: usize) -> Vec<T> {
    let mut z = vec![T::ZERO; k * l];
    par::for_each_row(&mut z, l, |j, row| {
        for ch in 0..n {
            let hv = h[ch * k + j];
            if hv == T::ZERO {
                continue;
            }
            for (o, &wv) in row.iter_mut().zip(&w[ch * l..(ch + 1) * l]) {
                *o += hv * wv;
            }
        }
    });
    z
}

/// Transposed convolution `h[N×K]`, `w[N×1×L]` → `1×T`,
/// `T = (K − 1)·stride + L`. Adjoint of [`conv1d`] for fixed weights.
pub fn conv_transpose1d<T: Scalar>(
    h: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (n, l) = conv_dims(weight, "transposed_conv1d")?;
    if stride == 0 {
        return Err(Error::Contract(
            "transposed_conv1d stride must be positive".into(),
        ));
    }
    if h.ndim() != 2 || h.shape()[0] != n || h.shape()[1] == 0 {
        return Err(Error::shape(
            "transposed_conv1d",
            format!("input must be {n}×K with K ≥ 1, got {:?}", h.shape()),
        ));
    }
    let k = h.shape()[1];
    let t = (k - 1) * stride + l;
    let z = frame_products(h.data(), weight.data(), n, k, l);
    let mut out = vec![T::ZERO; t];
    for (j, frame) in z.chunks(l).enumerate() {
        for (o, &v) in out[j * stride..j * stride + l].iter_mut().zip(frame) {
            *o += v;
        }
    }
    Tensor::new(&[1, t], out)
}

/// Weight gradient shared by both convolution directions:
/// `dw[n,l] = Σ_k frames[n,k]·signal[k·stride + l]`.
pub fn conv_weight_grad<T: Scalar>(
    frames: &Tensor<T>,
    signal: &Tensor<T>,
    stride: usize,
    l: usize,
) -> Tensor<T> {
    let (n, k) = (frames.shape()[0], frames.shape()[1]);
    let (fd, sd) = (frames.data(), signal.data());
    let mut dw = vec![T::ZERO; n * l];
    par::for_each_row(&mut dw, l, |ch, row| {
        let fr = &fd[ch * k..(ch + 1) * k];
        for (j, &fv) in fr.iter().enumerate() {
            if fv == T::ZERO {
                continue;
            }
            for (o, &sv) in row.iter_mut().zip(&sd[j * stride..j * stride + l]) {
                *o += fv * sv;
            }
        }
    });
    Tensor::new(&[n, 1, l], dw).expect("conv weight grad")
}

/// Materialize an axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd
        || axes
            .iter()
            .any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::shape(
            "permute",
            format!("axes {axes:?} are not a permutation for {:?}", x.shape()),
        ));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    if x.numel() > 0 {
        let last = nd - 1;
        let (inner_len, inner_stride) = (out_shape[last], strides[last]);
        let mut idx = vec![0usize; nd];
        'outer: loop {
            let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            for j in 0..inner_len {
                out.push(xd[base + j * inner_stride]);
            }
            // advance the odometer over all but the innermost axis
            let mut ax = last;
            loop {
                if ax == 0 {
                    break 'outer;
                }
                ax -= 1;
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// `(outer, axis_len, inner)` factorization of a shape around `axis`.
pub fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn slice_axis<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    if axis >= x.ndim() || start + len > x.shape()[axis] {
        return Err(Error::shape(
            "slice",
            format!(
                "range {start}..{} on axis {axis} out of bounds for {:?}",
                start + len,
                x.shape()
            ),
        ));
    }
    let (outer, dim, inner) = split_at_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        out.extend_from_slice(&xd[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

/// Scatter `g` back into a zero tensor of `full_shape` at `start` along `axis`.
pub fn unslice_axis<T: Scalar>(
    g: &Tensor<T>,
    full_shape: &[usize],
    axis: usize,
    start: usize,
) -> Tensor<T> {
    let (outer, dim, inner) = split_at_axis(full_shape, axis);
    let len = g.shape()[axis];
    let mut out = vec![T::ZERO; outer * dim * inner];
    let gd = g.data();
    for o in 0..outer {
        let dst = (o * dim + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
    }
    Tensor::new(full_shape, out).expect("unslice shape")
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(Error::Empty("concat inputs"))?;
    if axis >= first.ndim() {
        return Err(Error::shape(
            "concat",
            format!("axis {axis} out of range for {:?}", first.shape()),
        ));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let compatible = p.ndim() == first.ndim()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!(
                    "{:?} incompatible with {:?} along axis {axis}",
                    p.shape(),
                    first.shape()
                ),
            ));
        }
        shape[axis] += p.shape()[axis];
    }
    let (outer, _, inner) = split_at_axis(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let w = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
        }
    }
    Tensor::new(&shape, out)
}

/// Whether `rhs` broadcasts against `lhs`: equal shapes, a single element, or
/// a trailing-suffix shape repeated over the leading axes.
pub fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    let rn: usize = rhs.iter().product();
    rn == 1 || (rhs.len() <= lhs.len() && lhs.ends_with(rhs))
}

/// `lhs ∘ rhs` elementwise with `rhs` broadcast per [`broadcast_ok`].
pub fn zip_broadcast<T: Scalar>(
    lhs: &Tensor<T>,
    rhs: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if !broadcast_ok(lhs.shape(), rhs.shape()) {
        return Err(Error::shape(
            op,
            format!(
                "{:?} does not broadcast onto {:?}",
                rhs.shape(),
                lhs.shape()
            ),
        ));
    }
    let rd = rhs.data();
    let m = rd.len();
    let data = lhs
        .data()
        .chunks(m)
        .flat_map(|chunk| chunk.iter().zip(rd).map(|(&a, &b)| f(a, b)))
        .collect();
    Tensor::new(lhs.shape(), data)
}

/// Sum a full-size gradient down to the broadcast operand's shape.
pub fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let m: usize = shape.iter().product();
    let mut out = vec![T::ZERO; m];
    for chunk in g.data().chunks(m) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(shape, out).expect("reduce shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let a = t(&[2, 2], &[1., 0., 0., 0.]);
        let b = t(&[2, 2], &[0., 1., 1., 0.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0., 1., 0., 0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f32>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("by [2, 3]"), "{msg}");
    }

    #[test]
    fn bmm_transpose_matches_explicit_permute() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::<f64>::from_fn(&[2, 5, 4], |i| (i as f64 * 0.11).cos());
        let bt = permute(&b, &[0, 2, 1]).unwrap();
        let x = bmm(&a, &b, true).unwrap();
        let y = bmm(&a, &bt, false).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let y = softmax_lastdim(&t(&[3], &[0., 0., 0.])).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_lastdim(&t(&[2], &[1000., 0.])).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
    }

    #[test]
    fn layernorm_constant_and_normalized_rows() {
        let one = Tensor::<f64>::ones(&[3]);
        let zero = Tensor::<f64>::zeros(&[3]);
        let (y, _) = layernorm(&t(&[1, 3], &[5., 5., 5.]), &one, &zero, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
        let one = Tensor::<f64>::ones(&[2]);
        let zero = Tensor::<f64>::zeros(&[2]);
        let (y, _) = layernorm(&t(&[1, 2], &[1., -1.]), &one, &zero, 1e-5).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn conv1d_window_counts() {
        let w = Tensor::<f32>::ones(&[2, 1, 16]);
        let x = Tensor::<f32>::ones(&[1, 16]);
        assert_eq!(conv1d(&x, &w, 8).unwrap().shape(), &[2, 1]);
        let x = Tensor::<f32>::zeros(&[1, 64000]);
        assert_eq!(conv1d(&x, &w, 8).unwrap().shape(), &[2, 7999]);
        let short = Tensor::<f32>::zeros(&[1, 15]);
        assert!(matches!(
            conv1d(&short, &w, 8),
            Err(Error::InputTooShort { len: 15, min: 16 })
        ));
    }

    #[test]
    fn conv1d_averaging_kernel_on_constant_signal() {
        let l = 8;
        let w = Tensor::<f64>::full(&[1, 1, l], 1.0);
        let x = Tensor::<f64>::full(&[1, 40], 0.25);
        let y = conv1d(&x, &w, 4).unwrap();
        assert!(y
            .data()
            .iter()
            .all(|&v| (v - l as f64 * 0.25).abs() < 1e-12));
    }

    #[test]
    fn transposed_conv_single_frame_length() {
        let w = Tensor::<f32>::ones(&[3, 1, 16]);
        let h = Tensor::<f32>::ones(&[3, 1]);
        assert_eq!(conv_transpose1d(&h, &w, 8).unwrap().shape(), &[1, 16]);
    }

    #[test]
    fn permute_roundtrip_and_values() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let y = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(y.at(&[3, 1, 2]), x.at(&[1, 2, 3]));
        let back = permute(&y, &inverse_axes(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn slice_concat_inverse() {
        let x = Tensor::<f64>::from_fn(&[3, 5, 2], |i| i as f64);
        let a = slice_axis(&x, 1, 0, 2).unwrap();
        let b = slice_axis(&x, 1, 2, 3).unwrap();
        assert_eq!(concat(&[&a, &b], 1).unwrap(), x);
        let g = unslice_axis(&b, x.shape(), 1, 2);
        assert_eq!(g.at(&[1, 3, 1]), x.at(&[1, 3, 1]));
        assert_eq!(g.at(&[1, 1, 1]), 0.0);
    }

    #[test]
    fn broadcast_rules() {
        assert!(broadcast_ok(&[4, 3], &[3]));
        assert!(broadcast_ok(&[4, 3], &[1]));
        assert!(broadcast_ok(&[2, 4, 3], &[4, 3]));
        assert!(!broadcast_ok(&[4, 3], &[4]));
        let r = reduce_to(&Tensor::<f64>::ones(&[4, 3]), &[3]);
        assert_eq!(r.data(), &[4., 4., 4.]);
    }
}
