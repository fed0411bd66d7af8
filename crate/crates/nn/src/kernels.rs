//! Forward and backward kernels on plain slices.

use crate::Scalar;

/// Eight fixed `f64` lanes: vectorises, and the summation order never depends
/// on the input.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let x: &[T; 8] = x.try_into().expect("chunk of 8");
        let y: &[T; 8] = y.try_into().expect("chunk of 8");
        for l in 0..8 {
            acc[l] += x[l].f64() * y[l].f64();
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x.f64() * y.f64();
    }
    s
}

/// `acc += alpha * x`
#[inline]
pub(crate) fn axpy<T: Scalar>(acc: &mut [f64], alpha: f64, x: &[T]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += alpha * v.f64();
    }
}

/// `out[o] = b[o] + W[o,:] . x` with `W` stored `[out, in]`.
pub(crate) fn matvec<T: Scalar>(w: &[T], b: Option<&[T]>, x: &[T], out: &mut [T]) {
    let n_in = x.len();
    for (o, row) in w.chunks_exact(n_in).enumerate() {
        let bias = b.map_or(0.0, |b| b[o].f64());
        out[o] = T::of(bias + dot(row, x));
    }
}

/// Backward of [`matvec`]. Accumulates into `dw`, `db` and the `f64` buffer `dx`.
pub(crate) fn matvec_backward<T: Scalar>(
    w: &[T],
    x: &[T],
    dy: &[T],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    dx: Option<&mut [f64]>,
) {
    let n_in = x.len();
    if let Some(dw) = dw {
        for (o, row) in dw.chunks_exact_mut(n_in).enumerate() {
            let g = dy[o];
            if g == T::zero() {
                continue;
            }
            for (d, &xi) in row.iter_mut().zip(x) {
                *d += g * xi;
            }
        }
    }
    if let Some(db) = db {
        for (d, &g) in db.iter_mut().zip(dy) {
            *d += g;
        }
    }
    if let Some(dx) = dx {
        for (o, row) in w.chunks_exact(n_in).enumerate() {
            let g = dy[o].f64();
            if g != 0.0 {
                axpy(dx, g, row);
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub len: usize,
    pub ch_in: usize,
    pub ch_out: usize,
    pub k: usize,
}

/// Same-padded 1-d cross-correlation over `[batch, len, ch_in]` with kernels
/// `[k, ch_in, ch_out]`.
pub(crate) fn conv1d<T: Scalar>(x: &[T], kern: &[T], bias: &[T], d: &ConvDims, out: &mut [T]) {
    let pad = (d.k - 1) / 2;
    let mut acc = vec![0.0f64; d.ch_out];
    for bt in 0..d.batch {
        let xb = &x[bt * d.len * d.ch_in..(bt + 1) * d.len * d.ch_in];
        for p in 0..d.len {
            for (a, b) in acc.iter_mut().zip(bias) {
                *a = b.f64();
            }
            for j in 0..d.k {
                let q = p + j;
                if q < pad || q - pad >= d.len {
                    continue;
                }
                let q = q - pad;
                for c in 0..d.ch_in {
                    let xv = xb[q * d.ch_in + c].f64();
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &kern[(j * d.ch_in + c) * d.ch_out..(j * d.ch_in + c + 1) * d.ch_out];
                    axpy(&mut acc, xv, krow);
                }
            }
            let o = (bt * d.len + p) * d.ch_out;
            for (dst, a) in out[o..o + d.ch_out].iter_mut().zip(&acc) {
                *dst = T::of(*a);
            }
        }
    }
}

pub(crate) fn conv1d_backward<T: Scalar>(
    x: &[T],
    kern: &[T],
    dy: &[T],
    d: &ConvDims,
    dk: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
    mut dx: Option<&mut [f64]>,
) {
    let pad = (d.k - 1) / 2;
    let mut dk = dk;
    if let Some(db) = db {
        for row in dy.chunks_exact(d.ch_out) {
            axpy(db, 1.0, row);
        }
    }
    for bt in 0..d.batch {
        let base = bt * d.len;
        for p in 0..d.len {
            let g = &dy[(base + p) * d.ch_out..(base + p + 1) * d.ch_out];
            for j in 0..d.k {
                let q = p + j;
                if q < pad || q - pad >= d.len {
                    continue;
                }
                let q = q - pad;
                for c in 0..d.ch_in {
                    let xi = (base + q) * d.ch_in + c;
                    let kr = (j * d.ch_in + c) * d.ch_out;
                    if let Some(dk) = dk.as_deref_mut() {
                        let xv = x[xi].f64();
                        if xv != 0.0 {
                            axpy(&mut dk[kr..kr + d.ch_out], xv, g);
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[xi] += dot(&kern[kr..kr + d.ch_out], g);
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pool over the middle axis of `[batch, len, ch]`.
/// Returns the flat input index chosen for every output element; ties go to
/// the lowest index.
pub(crate) fn maxpool1d<T: Scalar>(
    x: &[T],
    batch: usize,
    len: usize,
    ch: usize,
    window: usize,
    out: &mut [T],
) -> Vec<usize> {
    let out_len = len / window;
    let mut arg = Vec::with_capacity(batch * out_len * ch);
    for bt in 0..batch {
        for p in 0..out_len {
            for c in 0..ch {
                let mut best = (bt * len + p * window) * ch + c;
                for w in 1..window {
                    let idx = (bt * len + p * window + w) * ch + c;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out[(bt * out_len + p) * ch + c] = x[best];
                arg.push(best);
            }
        }
    }
    arg
}

/// Per-timestep values kept for backpropagation through time.
#[derive(Debug, Clone)]
pub(crate) struct LstmCache<T> {
    /// Activated gates `[T, 4H]` in i, f, g, o order.
    pub gates: Vec<T>,
    /// Cell states `[T + 1, H]`, row 0 is the zero initial state.
    pub cells: Vec<T>,
    /// Hidden states `[T + 1, H]`.
    pub hidden: Vec<T>,
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub(crate) fn lstm<T: Scalar>(
    x: &[T],
    steps: usize,
    n_in: usize,
    hidden: usize,
    w: &[T],
    u: &[T],
    b: &[T],
) -> LstmCache<T> {
    let g4 = 4 * hidden;
    let mut gates = vec![T::zero(); steps * g4];
    let mut cells = vec![T::zero(); (steps + 1) * hidden];
    let mut hs = vec![T::zero(); (steps + 1) * hidden];
    // Input projections for all steps first, one weight row at a time.
    let mut proj = vec![0.0f64; steps * g4];
    for (r, row) in w.chunks_exact(n_in).enumerate() {
        for (t, xt) in x.chunks_exact(n_in).take(steps).enumerate() {
            proj[t * g4 + r] = b[r].f64() + dot(row, xt);
        }
    }
    let mut pre = vec![T::zero(); g4];
    for t in 0..steps {
        let h_prev = &hs[t * hidden..(t + 1) * hidden];
        for (r, p) in pre.iter_mut().enumerate() {
            let v = proj[t * g4 + r] + dot(&u[r * hidden..(r + 1) * hidden], h_prev);
            *p = T::of(v);
        }
        let gt = &mut gates[t * g4..(t + 1) * g4];
        for j in 0..hidden {
            let i = sigmoid(pre[j].f64());
            let f = sigmoid(pre[hidden + j].f64());
            let g = pre[2 * hidden + j].f64().tanh();
            let o = sigmoid(pre[3 * hidden + j].f64());
            gt[j] = T::of(i);
            gt[hidden + j] = T::of(f);
            gt[2 * hidden + j] = T::of(g);
            gt[3 * hidden + j] = T::of(o);
            let c = f * cells[t * hidden + j].f64() + i * g;
            cells[(t + 1) * hidden + j] = T::of(c);
            hs[(t + 1) * hidden + j] = T::of(o * c.tanh());
        }
    }
    LstmCache {
        gates,
        cells,
        hidden: hs,
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_backward<T: Scalar>(
    x: &[T],
    steps: usize,
    n_in: usize,
    hidden: usize,
    w: &[T],
    u: &[T],
    cache: &LstmCache<T>,
    dh_last: &[T],
    mut dw: Option<&mut [T]>,
    mut du: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
    mut dx: Option<&mut [f64]>,
) {
    let g4 = 4 * hidden;
    let mut dh: Vec<f64> = dh_last.iter().map(|v| v.f64()).collect();
    let mut dc = vec![0.0f64; hidden];
    let mut da = vec![T::zero(); g4];
    let mut dh_prev = vec![0.0f64; hidden];
    for t in (0..steps).rev() {
        let gt = &cache.gates[t * g4..(t + 1) * g4];
        for j in 0..hidden {
            let i = gt[j].f64();
            let f = gt[hidden + j].f64();
            let g = gt[2 * hidden + j].f64();
            let o = gt[3 * hidden + j].f64();
            let c = cache.cells[(t + 1) * hidden + j].f64();
            let c_prev = cache.cells[t * hidden + j].f64();
            let tc = c.tanh();
            let d_o = dh[j] * tc;
            let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
            let d_i = dcj * g;
            let d_g = dcj * i;
            let d_f = dcj * c_prev;
            dc[j] = dcj * f;
            da[j] = T::of(d_i * i * (1.0 - i));
            da[hidden + j] = T::of(d_f * f * (1.0 - f));
            da[2 * hidden + j] = T::of(d_g * (1.0 - g * g));
            da[3 * hidden + j] = T::of(d_o * o * (1.0 - o));
        }
        let xt = &x[t * n_in..(t + 1) * n_in];
        let h_prev = &cache.hidden[t * hidden..(t + 1) * hidden];
        dh_prev.iter_mut().for_each(|v| *v = 0.0);
        let dx_t = dx.as_deref_mut().map(|dx| &mut dx[t * n_in..(t + 1) * n_in]);
        matvec_backward(w, xt, &da, dw.as_deref_mut(), db.as_deref_mut(), dx_t);
        matvec_backward(u, h_prev, &da, du.as_deref_mut(), None, Some(&mut dh_prev));
        std::mem::swap(&mut dh, &mut dh_prev);
    }
}

/// Max-subtracted softmax, computed in `f64`.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
    let mut sum = 0.0f64;
    let exps: Vec<f64> = v
        .iter()
        .map(|x| {
            let e = (x.f64() - max).exp();
            sum += e;
            e
        })
        .collect();
    for (dst, e) in v.iter_mut().zip(exps) {
        *dst = T::of(e / sum);
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
