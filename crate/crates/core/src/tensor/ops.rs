//! Forward kernels and backward rules for tape operations.

use rayon::prelude::*;

use super::Node;

/// Work threshold (inner-loop multiply-adds) above which kernels parallelize.
/// Each output element is still accumulated serially in a fixed order, so
/// results are bitwise identical with any thread count.
const PAR_WORK: usize = 1 << 19;

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar { x: usize },
    MulScalar { x: usize, c: f64 },
    AddRowVec { x: usize, v: usize },
    AddChan { x: usize, b: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Permute3 { x: usize, in_shape: [usize; 3], perm: [usize; 3] },
    Reshape { x: usize },
    Concat0 { a: usize, b: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    ScatterRows { x: usize, idx: Vec<usize> },
    BroadcastRows { v: usize },
    Softmax { x: usize, n: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, n: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    Gelu { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Abs { x: usize },
    Softplus { x: usize },
    Sum { x: usize },
    Mean { x: usize, n: usize },
    Conv2d {
        x: usize,
        k: usize,
        ci: usize,
        h: usize,
        w: usize,
        co: usize,
        kh: usize,
        kw: usize,
        pad: usize,
    },
    Upsample2x { x: usize, c: usize, h: usize, w: usize },
}

// ── Scalar helpers ──────────────────────────────────────────────────────────

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign_scalar(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// ── Dense kernels ───────────────────────────────────────────────────────────

/// `[m, k] × [k, n]` row-major matrix product.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row = |out_row: &mut [f64], i: usize| {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    };
    if m * k * n >= PAR_WORK {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(r, i));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(r, i);
        }
    }
    out
}

/// `a [m, n] × b^T` where `b` is `[k, n]`, giving `[m, k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    let row = |out_row: &mut [f64], i: usize| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, o) in out_row.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m * n * k >= PAR_WORK {
        out.par_chunks_mut(k).enumerate().for_each(|(i, r)| row(r, i));
    } else {
        for (i, r) in out.chunks_mut(k).enumerate() {
            row(r, i);
        }
    }
    out
}

/// `a^T × b` where `a` is `[m, k]` and `b` is `[m, n]`, giving `[k, n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    let row = |out_row: &mut [f64], p: usize| {
        for i in 0..m {
            let aip = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    };
    if m * k * n >= PAR_WORK {
        out.par_chunks_mut(n).enumerate().for_each(|(p, r)| row(r, p));
    } else {
        for (p, r) in out.chunks_mut(n).enumerate() {
            row(r, p);
        }
    }
    out
}

pub(crate) fn permute3_kernel(x: &[f64], shape: &[usize], perm: [usize; 3]) -> Vec<f64> {
    let (d0, d1, d2) = (shape[0], shape[1], shape[2]);
    let out_shape = [shape[perm[0]], shape[perm[1]], shape[perm[2]]];
    let in_strides = [d1 * d2, d2, 1];
    let mut out = vec![0.0; d0 * d1 * d2];
    let mut pos = 0;
    for o0 in 0..out_shape[0] {
        for o1 in 0..out_shape[1] {
            for o2 in 0..out_shape[2] {
                let src =
                    o0 * in_strides[perm[0]] + o1 * in_strides[perm[1]] + o2 * in_strides[perm[2]];
                out[pos] = x[src];
                pos += 1;
            }
        }
    }
    out
}

fn invert_perm(perm: [usize; 3]) -> [usize; 3] {
    let mut inv = [0; 3];
    for (a, &p) in perm.iter().enumerate() {
        inv[p] = a;
    }
    inv
}

pub(crate) fn softmax_kernel(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (orow, xrow) in out.chunks_mut(n).zip(x.chunks(n)) {
        let max = xrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Returns `(normalized output, per-row mean, per-row 1/std)`.
pub(crate) fn layer_norm_kernel(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    n: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / n;
    let mut out = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut inv_stds = Vec::with_capacity(rows);
    for (orow, xrow) in out.chunks_mut(n).zip(x.chunks(n)) {
        let mean = xrow.iter().sum::<f64>() / n as f64;
        let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (j, (o, &v)) in orow.iter_mut().zip(xrow).enumerate() {
            *o = gamma[j] * (v - mean) * inv_std + beta[j];
        }
        means.push(mean);
        inv_stds.push(inv_std);
    }
    (out, means, inv_stds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_kernel(
    x: &[f64],
    k: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let mut out = vec![0.0; co * oh * ow];
    let plane = |out_plane: &mut [f64], o: usize| {
        for c in 0..ci {
            let xplane = &x[c * h * w..(c + 1) * h * w];
            for dy in 0..kh {
                for dx in 0..kw {
                    let wv = k[((o * ci + c) * kh + dy) * kw + dx];
                    let ox_lo = pad.saturating_sub(dx);
                    let ox_hi = (w + pad).saturating_sub(dx).min(ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for y in 0..oh {
                        let iy = y + dy;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let xrow = &xplane[(iy - pad) * w..(iy - pad + 1) * w];
                        let orow = &mut out_plane[y * ow..(y + 1) * ow];
                        for ox in ox_lo..ox_hi {
                            orow[ox] += wv * xrow[ox + dx - pad];
                        }
                    }
                }
            }
        }
    };
    if co * oh * ow * ci * kh * kw >= PAR_WORK {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(o, p)| plane(p, o));
    } else {
        for (o, p) in out.chunks_mut(oh * ow).enumerate() {
            plane(p, o);
        }
    }
    out
}

pub(crate) fn upsample2x_kernel(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let xplane = &x[ch * h * w..(ch + 1) * h * w];
        let oplane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                let v = xplane[y * w + xx];
                oplane[2 * y * ow + 2 * xx] = v;
                oplane[2 * y * ow + 2 * xx + 1] = v;
                oplane[(2 * y + 1) * ow + 2 * xx] = v;
                oplane[(2 * y + 1) * ow + 2 * xx + 1] = v;
            }
        }
    }
    out
}

// ── Backward ────────────────────────────────────────────────────────────────

fn needs(parents: &[Node], id: usize) -> bool {
    parents[id].requires_grad
}

fn grad_buf(parents: &mut [Node], id: usize) -> &mut [f64] {
    let node = &mut parents[id];
    if node.grad.is_none() {
        node.grad = Some(vec![0.0; node.data.len()]);
    }
    node.grad.as_mut().expect("just filled")
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Propagate `node`'s gradient to its parents (all of which precede it on
/// the tape, hence live in `parents`).
pub(crate) fn backward_step(node: &mut Node, parents: &mut [Node]) {
    let go = node.grad.take().expect("caller ensured grad present");
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(parents, *a) {
                add_into(grad_buf(parents, *a), &go);
            }
            if needs(parents, *b) {
                add_into(grad_buf(parents, *b), &go);
            }
        }
        Op::Sub(a, b) => {
            if needs(parents, *a) {
                add_into(grad_buf(parents, *a), &go);
            }
            if needs(parents, *b) {
                add_scaled(grad_buf(parents, *b), &go, -1.0);
            }
        }
        Op::Mul(a, b) => {
            if needs(parents, *a) {
                let contrib: Vec<f64> =
                    go.iter().zip(&parents[*b].data).map(|(g, &bv)| g * bv).collect();
                add_into(grad_buf(parents, *a), &contrib);
            }
            if needs(parents, *b) {
                let contrib: Vec<f64> =
                    go.iter().zip(&parents[*a].data).map(|(g, &av)| g * av).collect();
                add_into(grad_buf(parents, *b), &contrib);
            }
        }
        Op::Div(a, b) => {
            if needs(parents, *a) {
                let contrib: Vec<f64> =
                    go.iter().zip(&parents[*b].data).map(|(g, &bv)| g / bv).collect();
                add_into(grad_buf(parents, *a), &contrib);
            }
            if needs(parents, *b) {
                let contrib: Vec<f64> = go
                    .iter()
                    .zip(node.data.iter().zip(&parents[*b].data))
                    .map(|(g, (&y, &bv))| -g * y / bv)
                    .collect();
                add_into(grad_buf(parents, *b), &contrib);
            }
        }
        Op::AddScalar { x } => {
            if needs(parents, *x) {
                add_into(grad_buf(parents, *x), &go);
            }
        }
        Op::MulScalar { x, c } => {
            if needs(parents, *x) {
                add_scaled(grad_buf(parents, *x), &go, *c);
            }
        }
        Op::AddRowVec { x, v } => {
            if needs(parents, *x) {
                add_into(grad_buf(parents, *x), &go);
            }
            if needs(parents, *v) {
                let n = parents[*v].data.len();
                let buf = grad_buf(parents, *v);
                for row in go.chunks(n) {
                    add_into(buf, row);
                }
            }
        }
        Op::AddChan { x, b } => {
            if needs(parents, *x) {
                add_into(grad_buf(parents, *x), &go);
            }
            if needs(parents, *b) {
                let c = parents[*b].data.len();
                let plane = go.len() / c;
                let buf = grad_buf(parents, *b);
                for (ch, chunk) in go.chunks(plane).enumerate() {
                    buf[ch] += chunk.iter().sum::<f64>();
                }
                debug_assert_eq!(c * plane, go.len());
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            if needs(parents, *a) {
                let da = matmul_nt(&go, &parents[*b].data, *m, *n, *k);
                add_into(grad_buf(parents, *a), &da);
            }
            if needs(parents, *b) {
                let db = matmul_tn(&parents[*a].data, &go, *m, *k, *n);
                add_into(grad_buf(parents, *b), &db);
            }
        }
        Op::BatchMatMul { a, b, batch, m, k, n } => {
            if needs(parents, *a) {
                let bdata = &parents[*b].data;
                let mut da = vec![0.0; batch * m * k];
                for bi in 0..*batch {
                    let g = &go[bi * m * n..(bi + 1) * m * n];
                    let bb = &bdata[bi * k * n..(bi + 1) * k * n];
                    da[bi * m * k..(bi + 1) * m * k].copy_from_slice(&matmul_nt(g, bb, *m, *n, *k));
                }
                add_into(grad_buf(parents, *a), &da);
            }
            if needs(parents, *b) {
                let adata = &parents[*a].data;
                let mut db = vec![0.0; batch * k * n];
                for bi in 0..*batch {
                    let aa = &adata[bi * m * k..(bi + 1) * m * k];
                    let g = &go[bi * m * n..(bi + 1) * m * n];
                    db[bi * k * n..(bi + 1) * k * n].copy_from_slice(&matmul_tn(aa, g, *m, *k, *n));
                }
                add_into(grad_buf(parents, *b), &db);
            }
        }
        Op::Permute3 { x, in_shape, perm } => {
            if needs(parents, *x) {
                let out_shape = [in_shape[perm[0]], in_shape[perm[1]], in_shape[perm[2]]];
                let dx = permute3_kernel(&go, &out_shape, invert_perm(*perm));
                add_into(grad_buf(parents, *x), &dx);
            }
        }
        Op::Reshape { x } => {
            if needs(parents, *x) {
                add_into(grad_buf(parents, *x), &go);
            }
        }
        Op::Concat0 { a, b } => {
            let na = parents[*a].data.len();
            if needs(parents, *a) {
                add_into(grad_buf(parents, *a), &go[..na]);
            }
            if needs(parents, *b) {
                add_into(grad_buf(parents, *b), &go[na..]);
            }
        }
        Op::GatherRows { x, idx } => {
            if needs(parents, *x) {
                let n = node.data.len() / idx.len().max(1);
                let buf = grad_buf(parents, *x);
                for (row, &i) in go.chunks(n).zip(idx) {
                    add_into(&mut buf[i * n..(i + 1) * n], row);
                }
            }
        }
        Op::ScatterRows { x, idx } => {
            if needs(parents, *x) {
                let n = parents[*x].data.len() / idx.len().max(1);
                let buf = grad_buf(parents, *x);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut buf[r * n..(r + 1) * n], &go[i * n..(i + 1) * n]);
                }
            }
        }
        Op::BroadcastRows { v } => {
            if needs(parents, *v) {
                let n = parents[*v].data.len();
                let buf = grad_buf(parents, *v);
                for row in go.chunks(n) {
                    add_into(buf, row);
                }
            }
        }
        Op::Softmax { x, n } => {
            if needs(parents, *x) {
                let y = &node.data;
                let mut dx = vec![0.0; y.len()];
                for ((drow, yrow), grow) in dx.chunks_mut(*n).zip(y.chunks(*n)).zip(go.chunks(*n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = yv * (gv - dot);
                    }
                }
                add_into(grad_buf(parents, *x), &dx);
            }
        }
        Op::LayerNorm { x, gamma, beta, n, mean, inv_std } => {
            let xdata = parents[*x].data.clone();
            let gdata = parents[*gamma].data.clone();
            let nf = *n as f64;
            if needs(parents, *x) {
                let mut dx = vec![0.0; xdata.len()];
                for (r, (drow, (xrow, grow))) in
                    dx.chunks_mut(*n).zip(xdata.chunks(*n).zip(go.chunks(*n))).enumerate()
                {
                    let istd = inv_std[r];
                    let mu = mean[r];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for ((&xv, &gv), &gam) in xrow.iter().zip(grow).zip(gdata.iter()) {
                        let xhat = (xv - mu) * istd;
                        let dxhat = gv * gam;
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    m1 /= nf;
                    m2 /= nf;
                    for ((d, &xv), (&gv, &gam)) in
                        drow.iter_mut().zip(xrow).zip(grow.iter().zip(gdata.iter()))
                    {
                        let xhat = (xv - mu) * istd;
                        let dxhat = gv * gam;
                        *d = istd * (dxhat - m1 - xhat * m2);
                    }
                }
                add_into(grad_buf(parents, *x), &dx);
            }
            if needs(parents, *gamma) {
                let mut dg = vec![0.0; *n];
                for (r, (xrow, grow)) in xdata.chunks(*n).zip(go.chunks(*n)).enumerate() {
                    let istd = inv_std[r];
                    let mu = mean[r];
                    for ((d, &xv), &gv) in dg.iter_mut().zip(xrow).zip(grow) {
                        *d += gv * (xv - mu) * istd;
                    }
                }
                add_into(grad_buf(parents, *gamma), &dg);
            }
            if needs(parents, *beta) {
                let buf = grad_buf(parents, *beta);
                for grow in go.chunks(*n) {
                    add_into(buf, grow);
                }
            }
        }
        Op::Gelu { x } => {
            if needs(parents, *x) {
                let contrib: Vec<f64> = go
                    .iter()
                    .zip(&parents[*x].data)
                    .map(|(g, &xv)| g * gelu_grad_scalar(xv))
                    .collect();
                add_into(grad_buf(parents, *x), &contrib);
            }
        }
        Op::Exp { x } => {
            if needs(parents, *x) {
                let contrib: Vec<f64> =
                    go.iter().zip(&node.data).map(|(g, &y)| g * y).collect();
                add_into(grad_buf(parents, *x), &contrib);
            }
        }
        Op::Log { x } => {
            if needs(parents, *x) {
                let contrib: Vec<f64> =
                    go.iter().zip(&parents[*x].data).map(|(g, &xv)| g / xv).collect();
                add_into(grad_buf(parents, *x), &contrib);
            }
        }
        Op::Abs { x } => {
            if needs(parents, *x) {
                let contrib: Vec<f64> = go
                    .iter()
                    .zip(&parents[*x].data)
                    .map(|(g, &xv)| g * sign_scalar(xv))
                    .collect();
                add_into(grad_buf(parents, *x), &contrib);
            }
        }
        Op::Softplus { x } => {
            if needs(parents, *x) {
                let contrib: Vec<f64> = go
                    .iter()
                    .zip(&parents[*x].data)
                    .map(|(g, &xv)| g * sigmoid_scalar(xv))
                    .collect();
                add_into(grad_buf(parents, *x), &contrib);
            }
        }
        Op::Sum { x } => {
            if needs(parents, *x) {
                let g = go[0];
                for d in grad_buf(parents, *x).iter_mut() {
                    *d += g;
                }
            }
        }
        Op::Mean { x, n } => {
            if needs(parents, *x) {
                let g = go[0] / *n as f64;
                for d in grad_buf(parents, *x).iter_mut() {
                    *d += g;
                }
            }
        }
        Op::Conv2d { x, k, ci, h, w, co, kh, kw, pad } => {
            let (x, k) = (*x, *k);
            let (ci, h, w, co, kh, kw, pad) = (*ci, *h, *w, *co, *kh, *kw, *pad);
            let oh = h + 2 * pad - kh + 1;
            let ow = w + 2 * pad - kw + 1;
            if needs(parents, x) {
                let kdata = &parents[k].data;
                let mut dx = vec![0.0; ci * h * w];
                let plane = |dxplane: &mut [f64], c: usize| {
                    for o in 0..co {
                        for dy in 0..kh {
                            for dxk in 0..kw {
                                let wv = kdata[((o * ci + c) * kh + dy) * kw + dxk];
                                let ox_lo = pad.saturating_sub(dxk);
                                let ox_hi = (w + pad).saturating_sub(dxk).min(ow);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                for y in 0..oh {
                                    let iy = y + dy;
                                    if iy < pad || iy >= h + pad {
                                        continue;
                                    }
                                    let grow = &go[(o * oh + y) * ow..(o * oh + y + 1) * ow];
                                    let drow = &mut dxplane[(iy - pad) * w..(iy - pad + 1) * w];
                                    for ox in ox_lo..ox_hi {
                                        drow[ox + dxk - pad] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                };
                if ci * h * w * co * kh * kw >= PAR_WORK {
                    dx.par_chunks_mut(h * w).enumerate().for_each(|(c, p)| plane(p, c));
                } else {
                    for (c, p) in dx.chunks_mut(h * w).enumerate() {
                        plane(p, c);
                    }
                }
                add_into(grad_buf(parents, x), &dx);
            }
            if needs(parents, k) {
                let xdata = &parents[x].data;
                let mut dk = vec![0.0; co * ci * kh * kw];
                let plane = |dkplane: &mut [f64], o: usize| {
                    for c in 0..ci {
                        let xplane = &xdata[c * h * w..(c + 1) * h * w];
                        for dy in 0..kh {
                            for dxk in 0..kw {
                                let ox_lo = pad.saturating_sub(dxk);
                                let ox_hi = (w + pad).saturating_sub(dxk).min(ow);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let mut acc = 0.0;
                                for y in 0..oh {
                                    let iy = y + dy;
                                    if iy < pad || iy >= h + pad {
                                        continue;
                                    }
                                    let grow = &go[(o * oh + y) * ow..(o * oh + y + 1) * ow];
                                    let xrow = &xplane[(iy - pad) * w..(iy - pad + 1) * w];
                                    for ox in ox_lo..ox_hi {
                                        acc += grow[ox] * xrow[ox + dxk - pad];
                                    }
                                }
                                dkplane[(c * kh + dy) * kw + dxk] = acc;
                            }
                        }
                    }
                };
                if co * ci * kh * kw * oh * ow >= PAR_WORK {
                    dk.par_chunks_mut(ci * kh * kw).enumerate().for_each(|(o, p)| plane(p, o));
                } else {
                    for (o, p) in dk.chunks_mut(ci * kh * kw).enumerate() {
                        plane(p, o);
                    }
                }
                add_into(grad_buf(parents, k), &dk);
            }
        }
        Op::Upsample2x { x, c, h, w } => {
            if needs(parents, *x) {
                let (c, h, w) = (*c, *h, *w);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gplane = &go[ch * oh * ow..(ch + 1) * oh * ow];
                    let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dplane[y * w + xx] = gplane[2 * y * ow + 2 * xx]
                                + gplane[2 * y * ow + 2 * xx + 1]
                                + gplane[(2 * y + 1) * ow + 2 * xx]
                                + gplane[(2 * y + 1) * ow + 2 * xx + 1];
                        }
                    }
                }
                add_into(grad_buf(parents, *x), &dx);
            }
        }
    }
    node.grad = Some(go);
}
