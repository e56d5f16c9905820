//! Causal decay-scan attention: the sequential recurrence, its blockwise
//! (chunked) evaluation, the bidirectional two-scan form, the right-product
//! one-scan form, and dense quadratic oracles for all of them.
//!
//! Kernels work on flat row-major slices so the benchmark harness and the
//! tape can share them.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Scalar, Tensor};

/// Dense-oracle guard: quadratic evaluation is refused above this length.
pub const ORACLE_LIMIT: usize = 4096;

/// Q, K, V (`n x d` each) plus per-step decay rates.
///
/// Decays live in `[0, 1]`; zero is accepted (full state reset each step)
/// even though generated decays are strictly positive.
#[derive(Debug, Clone)]
pub struct AttentionInputs<T: Scalar> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    lambda: Tensor<T>,
}

impl<T: Scalar> AttentionInputs<T> {
    pub fn new(q: Tensor<T>, k: Tensor<T>, v: Tensor<T>, lambda: Tensor<T>) -> Result<Self> {
        let n = q.rows();
        for (name, t) in [("q", &q), ("k", &k), ("v", &v)] {
            if t.rank() != 2 || t.shape()[0] != n || t.shape()[1] != q.shape()[1] {
                return Err(Error::InvalidArgument {
                    op: "AttentionInputs",
                    msg: format!("{name} has shape {:?}, expected [{n}, {}]", t.shape(), q.shape()[1]),
                });
            }
        }
        if lambda.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "AttentionInputs",
                lhs: vec![n],
                rhs: lambda.shape().to_vec(),
            });
        }
        if lambda.data().iter().any(|&l| !(l >= T::zero() && l <= T::one())) {
            return Err(Error::InvalidArgument {
                op: "AttentionInputs",
                msg: "decay rates must lie in [0, 1]".into(),
            });
        }
        Ok(AttentionInputs { q, k, v, lambda })
    }

    pub fn n(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn q(&self) -> &Tensor<T> {
        &self.q
    }

    pub fn k(&self) -> &Tensor<T> {
        &self.k
    }

    pub fn v(&self) -> &Tensor<T> {
        &self.v
    }

    pub fn lambda(&self) -> &Tensor<T> {
        &self.lambda
    }
}

// ── sequential kernels ──────────────────────────────────────────────────

/// kv_t = lambda_t kv_{t-1} + k_t v_t^T, o_t = kv_t^T q_t.
pub(crate) fn plain_causal_kernel<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    lam: &[T],
    n: usize,
    d: usize,
    out: &mut [T],
) {
    let mut state = vec![T::zero(); d * d];
    for t in 0..n {
        let lt = lam[t];
        let (qr, kr, vr) = (&q[t * d..(t + 1) * d], &k[t * d..(t + 1) * d], &v[t * d..(t + 1) * d]);
        for i in 0..d {
            let ki = kr[i];
            let row = &mut state[i * d..(i + 1) * d];
            for (s, &vj) in row.iter_mut().zip(vr) {
                *s = lt * *s + ki * vj;
            }
        }
        let orow = &mut out[t * d..(t + 1) * d];
        for (i, &qi) in qr.iter().enumerate() {
            let row = &state[i * d..(i + 1) * d];
            for (o, &s) in orow.iter_mut().zip(row) {
                *o += qi * s;
            }
        }
    }
}

/// Per-feature decay variant used by LightNet attention:
/// S_t = diag(decay_t) S_{t-1} + k_t v_t^T, o_t = S_t^T q_t.
pub fn decayed_kv_scan_forward<T: Scalar>(
    decay: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    q: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, dk) = (k.shape()[0], k.shape()[1]);
    let dv = v.shape()[1];
    if decay.shape() != [n, dk] || q.shape() != [n, dk] || v.shape()[0] != n {
        return Err(Error::InvalidArgument {
            op: "decayed_kv_scan",
            msg: format!(
                "decay {:?}, k {:?}, v {:?}, q {:?} are inconsistent",
                decay.shape(),
                k.shape(),
                v.shape(),
                q.shape()
            ),
        });
    }
    let mut state = vec![T::zero(); dk * dv];
    let mut out = vec![T::zero(); n * dv];
    for t in 0..n {
        for i in 0..dk {
            let de = decay.data()[t * dk + i];
            let ki = k.data()[t * dk + i];
            let row = &mut state[i * dv..(i + 1) * dv];
            let vr = &v.data()[t * dv..(t + 1) * dv];
            for (s, &vj) in row.iter_mut().zip(vr) {
                *s = de * *s + ki * vj;
            }
        }
        let orow = &mut out[t * dv..(t + 1) * dv];
        for i in 0..dk {
            let qi = q.data()[t * dk + i];
            let row = &state[i * dv..(i + 1) * dv];
            for (o, &s) in orow.iter_mut().zip(row) {
                *o += qi * s;
            }
        }
    }
    Tensor::from_vec(&[n, dv], out)
}

pub struct ScanGrads<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub decay: Vec<T>,
}

/// States S_0..S_n of the per-feature scan, flattened `(n+1) * dk * dv`.
fn decayed_scan_states<T: Scalar>(
    decay: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    dk: usize,
    dv: usize,
) -> Vec<T> {
    let sz = dk * dv;
    let mut states = vec![T::zero(); (n + 1) * sz];
    for t in 0..n {
        let (prev, cur) = states.split_at_mut((t + 1) * sz);
        let prev = &prev[t * sz..];
        let cur = &mut cur[..sz];
        for i in 0..dk {
            let de = decay[t * dk + i];
            let ki = k[t * dk + i];
            for j in 0..dv {
                cur[i * dv + j] = de * prev[i * dv + j] + ki * v[t * dv + j];
            }
        }
    }
    states
}

/// Reverse-order adjoint of [`decayed_kv_scan_forward`]; states are
/// recomputed rather than saved on the tape.
pub fn decayed_kv_scan_backward<T: Scalar>(
    decay: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    q: &Tensor<T>,
    go: &[T],
) -> ScanGrads<T> {
    let (n, dk) = (k.shape()[0], k.shape()[1]);
    let dv = v.shape()[1];
    let states = decayed_scan_states(decay.data(), k.data(), v.data(), n, dk, dv);
    let sz = dk * dv;
    let mut g = ScanGrads {
        q: vec![T::zero(); n * dk],
        k: vec![T::zero(); n * dk],
        v: vec![T::zero(); n * dv],
        decay: vec![T::zero(); n * dk],
    };
    let mut big_g = vec![T::zero(); sz];
    for t in (0..n).rev() {
        let st = &states[(t + 1) * sz..(t + 2) * sz];
        let sp = &states[t * sz..(t + 1) * sz];
        let gor = &go[t * dv..(t + 1) * dv];
        let vr = &v.data()[t * dv..(t + 1) * dv];
        for i in 0..dk {
            let qi = q.data()[t * dk + i];
            let ki = k.data()[t * dk + i];
            let de = decay.data()[t * dk + i];
            let grow = &mut big_g[i * dv..(i + 1) * dv];
            let strow = &st[i * dv..(i + 1) * dv];
            let sprow = &sp[i * dv..(i + 1) * dv];
            let mut gq = T::zero();
            let mut gk = T::zero();
            let mut gd = T::zero();
            for j in 0..dv {
                grow[j] += qi * gor[j];
                gq += strow[j] * gor[j];
                gk += grow[j] * vr[j];
                g.v[t * dv + j] += grow[j] * ki;
                gd += grow[j] * sprow[j];
                grow[j] *= de;
            }
            g.q[t * dk + i] = gq;
            g.k[t * dk + i] = gk;
            g.decay[t * dk + i] = gd;
        }
    }
    g
}

// ── prefix softmax (running normalization of exp(k)) ───────────────────

/// Returns (kbar, running maxes, rescaled running sums), all `n x d`.
/// kbar[t,i] = exp(k[t,i]) / sum_{s<=t} exp(k[s,i]), evaluated in the frame
/// of the running column max so arbitrarily large keys cannot overflow.
pub fn prefix_softmax_forward<T: Scalar>(k: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (k.shape()[0], k.shape()[1]);
    let mut out = vec![T::zero(); n * d];
    let mut maxes = vec![T::zero(); n * d];
    let mut sums = vec![T::zero(); n * d];
    let mut m = vec![T::neg_infinity(); d];
    let mut s = vec![T::zero(); d];
    for t in 0..n {
        for i in 0..d {
            let kt = k.data()[t * d + i];
            let mn = m[i].max(kt);
            // exp(-inf) = 0 covers the empty-prefix start.
            s[i] = s[i] * (m[i] - mn).exp() + (kt - mn).exp();
            m[i] = mn;
            out[t * d + i] = (kt - mn).exp() / s[i];
            maxes[t * d + i] = mn;
            sums[t * d + i] = s[i];
        }
    }
    (
        Tensor::from_vec(&[n, d], out).unwrap(),
        Tensor::from_vec(&[n, d], maxes).unwrap(),
        Tensor::from_vec(&[n, d], sums).unwrap(),
    )
}

/// Adjoint of the prefix softmax. The suffix accumulator is carried in the
/// frame of the current running max, mirroring the forward stabilization.
pub fn prefix_softmax_backward<T: Scalar>(
    k: &Tensor<T>,
    out: &Tensor<T>,
    maxes: &Tensor<T>,
    sums: &Tensor<T>,
    go: &[T],
    gk: &mut [T],
) {
    let (n, d) = (k.shape()[0], k.shape()[1]);
    // c[i] = sum_{u>=t} go_u kbar_u exp(m_t - m_u) / shat_u
    let mut c = vec![T::zero(); d];
    for t in (0..n).rev() {
        for i in 0..d {
            let idx = t * d + i;
            let kbar = out.data()[idx];
            if t + 1 < n {
                c[i] = c[i] * (maxes.data()[idx] - maxes.data()[idx + d]).exp();
            } else {
                c[i] = T::zero();
            }
            c[i] = c[i] + go[idx] * kbar / sums.data()[idx];
            gk[idx] += go[idx] * kbar - (k.data()[idx] - maxes.data()[idx]).exp() * c[i];
        }
    }
}

// ── public scan-attention operations ────────────────────────────────────

/// Sequential causal attention scan over a `d x d` state.
pub fn causal_decay_scan<T: Scalar>(inputs: &AttentionInputs<T>) -> Tensor<T> {
    let (n, d) = (inputs.n(), inputs.d());
    let mut out = vec![T::zero(); n * d];
    plain_causal_kernel(
        inputs.q.data(),
        inputs.k.data(),
        inputs.v.data(),
        inputs.lambda.data(),
        n,
        d,
        &mut out,
    );
    Tensor::from_vec(&[n, d], out).unwrap()
}

/// Dense O(n^2) reference: o_t = sum_{s<=t} (prod_{r=s+1}^t lambda_r) (q_t.k_s) v_s.
pub fn masked_attention_oracle<T: Scalar>(inputs: &AttentionInputs<T>) -> Result<Tensor<T>> {
    let (n, d) = (inputs.n(), inputs.d());
    if n > ORACLE_LIMIT {
        return Err(Error::GuardLimit { op: "masked_attention_oracle", n, limit: ORACLE_LIMIT });
    }
    let (q, k, v, lam) = (inputs.q.data(), inputs.k.data(), inputs.v.data(), inputs.lambda.data());
    let mut out = vec![T::zero(); n * d];
    for t in 0..n {
        let qr = &q[t * d..(t + 1) * d];
        let mut w = T::one();
        for s in (0..=t).rev() {
            let kr = &k[s * d..(s + 1) * d];
            let mut dot = T::zero();
            for (&a, &b) in qr.iter().zip(kr) {
                dot += a * b;
            }
            let coeff = w * dot;
            let vr = &v[s * d..(s + 1) * d];
            let orow = &mut out[t * d..(t + 1) * d];
            for (o, &x) in orow.iter_mut().zip(vr) {
                *o += coeff * x;
            }
            // weight for s-1 gains the factor lambda_s
            w *= lam[s];
        }
    }
    Tensor::from_vec(&[n, d], out)
}

/// Blockwise evaluation: dense attention inside each chunk plus a decayed
/// state carried across chunk boundaries. Numerically equals the sequential
/// scan; `chunk == 1` degenerates to it exactly.
pub fn chunked_causal_scan<T: Scalar>(
    inputs: &AttentionInputs<T>,
    chunk: usize,
) -> Result<Tensor<T>> {
    let (n, d) = (inputs.n(), inputs.d());
    if chunk == 0 || chunk > n {
        return Err(Error::InvalidArgument {
            op: "chunked_causal_scan",
            msg: format!("chunk {chunk} must satisfy 1 <= chunk <= {n}"),
        });
    }
    if chunk == 1 {
        return Ok(causal_decay_scan(inputs));
    }
    let mut out = vec![T::zero(); n * d];
    chunked_forward_kernel(
        inputs.q.data(),
        inputs.k.data(),
        inputs.v.data(),
        inputs.lambda.data(),
        n,
        d,
        chunk,
        &mut out,
        None,
    );
    Tensor::from_vec(&[n, d], out)
}

/// Forward causal scan plus a reversed causal scan; position t's own term is
/// included by both directions, exactly as the bidirectional equations are
/// written. `dedup_diagonal` subtracts the duplicated copy.
pub fn two_scan_noncausal<T: Scalar>(
    inputs: &AttentionInputs<T>,
    dedup_diagonal: bool,
) -> Tensor<T> {
    let (n, d) = (inputs.n(), inputs.d());
    let mut fwd = vec![T::zero(); n * d];
    plain_causal_kernel(
        inputs.q.data(),
        inputs.k.data(),
        inputs.v.data(),
        inputs.lambda.data(),
        n,
        d,
        &mut fwd,
    );
    let qr = reverse_rows(inputs.q.data(), n, d);
    let kr = reverse_rows(inputs.k.data(), n, d);
    let vr = reverse_rows(inputs.v.data(), n, d);
    let lr = reverse_rows(inputs.lambda.data(), n, 1);
    let mut bwd = vec![T::zero(); n * d];
    plain_causal_kernel(&qr, &kr, &vr, &lr, n, d, &mut bwd);
    let bwd = reverse_rows(&bwd, n, d);
    for (f, &b) in fwd.iter_mut().zip(&bwd) {
        *f += b;
    }
    if dedup_diagonal {
        let (q, k, v) = (inputs.q.data(), inputs.k.data(), inputs.v.data());
        for t in 0..n {
            let mut dot = T::zero();
            for i in 0..d {
                dot += q[t * d + i] * k[t * d + i];
            }
            for j in 0..d {
                fwd[t * d + j] -= dot * v[t * d + j];
            }
        }
    }
    Tensor::from_vec(&[n, d], fwd).unwrap()
}

/// Right-product form: O = Q (K^T V). Two matrix products, no recurrence.
pub fn one_scan_noncausal<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let kv = k.transpose()?.matmul(v)?;
    q.matmul(&kv)
}

/// Dense reference for the two-scan form, with both causal directions and the
/// doubled diagonal. Backward weight for s > t is prod_{r=t}^{s-1} lambda_r.
pub fn two_scan_dense_oracle<T: Scalar>(inputs: &AttentionInputs<T>) -> Result<Tensor<T>> {
    let (n, d) = (inputs.n(), inputs.d());
    if n > ORACLE_LIMIT {
        return Err(Error::GuardLimit { op: "two_scan_dense_oracle", n, limit: ORACLE_LIMIT });
    }
    let fwd = masked_attention_oracle(inputs)?;
    let (q, k, v, lam) = (inputs.q.data(), inputs.k.data(), inputs.v.data(), inputs.lambda.data());
    let mut out = fwd.data().to_vec();
    for t in 0..n {
        let qr = &q[t * d..(t + 1) * d];
        let mut w = T::one();
        for s in t..n {
            let kr = &k[s * d..(s + 1) * d];
            let mut dot = T::zero();
            for (&a, &b) in qr.iter().zip(kr) {
                dot += a * b;
            }
            let coeff = w * dot;
            for j in 0..d {
                out[t * d + j] += coeff * v[s * d + j];
            }
            // weight for s+1 gains the factor lambda_s
            w *= lam[s];
        }
    }
    Tensor::from_vec(&[n, d], out)
}

// ── tape support ────────────────────────────────────────────────────────

pub(crate) fn causal_scan_dispatch<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    lambda: &Tensor<T>,
    chunk: Option<usize>,
    reverse: bool,
) -> Result<Tensor<T>> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let (qd, kd, vd, ld);
    let (mut qs, mut ks, mut vs, mut ls) = (q.data(), k.data(), v.data(), lambda.data());
    if reverse {
        qd = reverse_rows(qs, n, d);
        kd = reverse_rows(ks, n, d);
        vd = reverse_rows(vs, n, d);
        ld = reverse_rows(ls, n, 1);
        (qs, ks, vs, ls) = (&qd, &kd, &vd, &ld);
    }
    let mut out = vec![T::zero(); n * d];
    match chunk {
        Some(c) if c > 1 => {
            if c > n {
                return Err(Error::InvalidArgument {
                    op: "causal_scan",
                    msg: format!("chunk {c} must satisfy 1 <= chunk <= {n}"),
                });
            }
            chunked_forward_kernel(qs, ks, vs, ls, n, d, c, &mut out, None);
        }
        _ => plain_causal_kernel(qs, ks, vs, ls, n, d, &mut out),
    }
    let out = if reverse { reverse_rows(&out, n, d) } else { out };
    Tensor::from_vec(&[n, d], out)
}

/// Per-step adjoint of the scalar-decay causal scan (any variant).
pub(crate) fn causal_scan_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    lambda: &Tensor<T>,
    go: &[T],
    reverse: bool,
) -> ScanGrads<T> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let (qd, kd, vd, ld, god);
    let (mut qs, mut ks, mut vs, mut ls, mut gos) =
        (q.data(), k.data(), v.data(), lambda.data(), go);
    if reverse {
        qd = reverse_rows(qs, n, d);
        kd = reverse_rows(ks, n, d);
        vd = reverse_rows(vs, n, d);
        ld = reverse_rows(ls, n, 1);
        god = reverse_rows(gos, n, d);
        (qs, ks, vs, ls, gos) = (&qd, &kd, &vd, &ld, &god);
    }

    // States S_0..S_n of the forward recurrence.
    let sz = d * d;
    let mut states = vec![T::zero(); (n + 1) * sz];
    for t in 0..n {
        let (prev, cur) = states.split_at_mut((t + 1) * sz);
        let prev = &prev[t * sz..];
        let cur = &mut cur[..sz];
        let lt = ls[t];
        for i in 0..d {
            let ki = ks[t * d + i];
            for j in 0..d {
                cur[i * d + j] = lt * prev[i * d + j] + ki * vs[t * d + j];
            }
        }
    }

    let mut g = ScanGrads {
        q: vec![T::zero(); n * d],
        k: vec![T::zero(); n * d],
        v: vec![T::zero(); n * d],
        decay: vec![T::zero(); n],
    };
    let mut big_g = vec![T::zero(); sz];
    for t in (0..n).rev() {
        let st = &states[(t + 1) * sz..(t + 2) * sz];
        let sp = &states[t * sz..(t + 1) * sz];
        let gor = &gos[t * d..(t + 1) * d];
        let vr = &vs[t * d..(t + 1) * d];
        let lt = ls[t];
        let mut glam = T::zero();
        for i in 0..d {
            let qi = qs[t * d + i];
            let ki = ks[t * d + i];
            let grow = &mut big_g[i * d..(i + 1) * d];
            let strow = &st[i * d..(i + 1) * d];
            let sprow = &sp[i * d..(i + 1) * d];
            let mut gq = T::zero();
            let mut gk = T::zero();
            for j in 0..d {
                grow[j] += qi * gor[j];
                gq += strow[j] * gor[j];
                gk += grow[j] * vr[j];
                g.v[t * d + j] += grow[j] * ki;
                glam += grow[j] * sprow[j];
                grow[j] *= lt;
            }
            g.q[t * d + i] = gq;
            g.k[t * d + i] = gk;
        }
        g.decay[t] = glam;
    }
    if reverse {
        g.q = reverse_rows(&g.q, n, d);
        g.k = reverse_rows(&g.k, n, d);
        g.v = reverse_rows(&g.v, n, d);
        g.decay = reverse_rows(&g.decay, n, 1);
    }
    g
}

// ── blockwise kernel (shared by the public op and the benchmark) ────────

pub(crate) fn reverse_rows<T: Copy>(data: &[T], n: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * d);
    for t in (0..n).rev() {
        out.extend_from_slice(&data[t * d..(t + 1) * d]);
    }
    out
}

/// Chunked causal forward. When `boundaries` is given, the inter-chunk state
/// observed at each chunk entry is appended to it (needed by the blockwise
/// backward).
#[allow(clippy::too_many_arguments)]
pub(crate) fn chunked_forward_kernel<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    lam: &[T],
    n: usize,
    d: usize,
    chunk: usize,
    out: &mut [T],
    mut boundaries: Option<&mut Vec<Vec<T>>>,
) {
    let mut state = vec![T::zero(); d * d];
    let mut w = vec![T::zero(); chunk * chunk];
    let mut alpha = vec![T::zero(); chunk];
    let mut scaled = vec![T::zero(); chunk * d];
    let mut a = 0;
    while a < n {
        let b = (a + chunk).min(n);
        let cl = b - a;
        if let Some(bs) = boundaries.as_deref_mut() {
            bs.push(state.clone());
        }
        build_chunk_weights(&lam[a..b], cl, &mut w, &mut alpha);

        // Intra-chunk: out[i] += sum_{s<=i} w[i][s] (q_i . k_s) v_s
        for i in 0..cl {
            let qr = &q[(a + i) * d..(a + i + 1) * d];
            for s in 0..=i {
                let kr = &k[(a + s) * d..(a + s + 1) * d];
                let mut dot = T::zero();
                for (&x, &y) in qr.iter().zip(kr) {
                    dot += x * y;
                }
                let coeff = w[i * cl + s] * dot;
                let vr = &v[(a + s) * d..(a + s + 1) * d];
                let orow = &mut out[(a + i) * d..(a + i + 1) * d];
                for (o, &x) in orow.iter_mut().zip(vr) {
                    *o += coeff * x;
                }
            }
        }

        // Carry: out[i] += alpha_i * (q_i^T S);  rows of Q scaled by alpha.
        for i in 0..cl {
            let ai = alpha[i];
            for j in 0..d {
                scaled[i * d + j] = ai * q[(a + i) * d + j];
            }
        }
        matmul_into(&scaled[..cl * d], &state, cl, d, d, &mut out[a * d..b * d]);

        // State update: S = alpha_last S + (w_last-scaled K)^T V.
        let alast = alpha[cl - 1];
        for s in state.iter_mut() {
            *s *= alast;
        }
        for s in 0..cl {
            let ws = w[(cl - 1) * cl + s];
            for j in 0..d {
                scaled[s * d + j] = ws * k[(a + s) * d + j];
            }
        }
        matmul_tn_into(&scaled[..cl * d], &v[a * d..b * d], cl, d, d, &mut state);
        a = b;
    }
}

/// w[i][s] = prod_{r=s+1}^{i} lam[r] (local indices, w[i][i] = 1) and
/// alpha[i] = prod_{r=0}^{i} lam[r]. Built multiplicatively, so zero decays
/// are handled without division.
fn build_chunk_weights<T: Scalar>(lam: &[T], cl: usize, w: &mut [T], alpha: &mut [T]) {
    w[0] = T::one();
    alpha[0] = lam[0];
    for i in 1..cl {
        let li = lam[i];
        for s in 0..i {
            w[i * cl + s] = li * w[(i - 1) * cl + s];
        }
        w[i * cl + i] = T::one();
        alpha[i] = li * alpha[i - 1];
    }
}

/// Blockwise backward for dQ, dK, dV. Decay rates are treated as fixed (the
/// benchmark setting); intra-chunk weights are recomputed per chunk from the
/// stored boundary states.
#[allow(clippy::too_many_arguments)]
pub(crate) fn chunked_backward_kernel<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    lam: &[T],
    n: usize,
    d: usize,
    chunk: usize,
    boundaries: &[Vec<T>],
    go: &[T],
    gq: &mut [T],
    gk: &mut [T],
    gv: &mut [T],
) {
    let num_chunks = n.div_ceil(chunk);
    debug_assert_eq!(boundaries.len(), num_chunks);
    let mut big_g = vec![T::zero(); d * d];
    let mut w = vec![T::zero(); chunk * chunk];
    let mut alpha = vec![T::zero(); chunk];
    let mut m = vec![T::zero(); chunk * chunk];
    let mut tmp = vec![T::zero(); chunk * d];
    let mut scaled = vec![T::zero(); chunk * d];

    for ci in (0..num_chunks).rev() {
        let a = ci * chunk;
        let b = (a + chunk).min(n);
        let cl = b - a;
        let s_in = &boundaries[ci];
        build_chunk_weights(&lam[a..b], cl, &mut w, &mut alpha);

        // m[s][i] = v_s . go_i (only s <= i used)
        for x in m[..cl * cl].iter_mut() {
            *x = T::zero();
        }
        matmul_nt_into(&v[a * d..b * d], &go[a * d..b * d], cl, d, cl, &mut m[..cl * cl]);

        // dq_i += sum_{s<=i} w[i][s] m[s][i] k_s ; dk_s += sum_{i>=s} w[i][s] m[s][i] q_i
        // dv_s += sum_{i>=s} w[i][s] (q_i . k_s) go_i
        for i in 0..cl {
            let qr = &q[(a + i) * d..(a + i + 1) * d];
            for s in 0..=i {
                let coeff = w[i * cl + s] * m[s * cl + i];
                let kr = &k[(a + s) * d..(a + s + 1) * d];
                let mut dot = T::zero();
                for (&x, &y) in qr.iter().zip(kr) {
                    dot += x * y;
                }
                let acoeff = w[i * cl + s] * dot;
                let gor = &go[(a + i) * d..(a + i + 1) * d];
                for j in 0..d {
                    gq[(a + i) * d + j] += coeff * kr[j];
                    gk[(a + s) * d + j] += coeff * qr[j];
                    gv[(a + s) * d + j] += acoeff * gor[j];
                }
            }
        }

        // Carry terms through the chunk-entry state.
        // dq_i += alpha_i (S_in go_i): tmp = GO S_in^T, rows scaled by alpha.
        for x in tmp[..cl * d].iter_mut() {
            *x = T::zero();
        }
        matmul_nt_into(&go[a * d..b * d], s_in, cl, d, d, &mut tmp[..cl * d]);
        for i in 0..cl {
            let ai = alpha[i];
            for j in 0..d {
                gq[(a + i) * d + j] += ai * tmp[i * d + j];
            }
        }

        // Exit-state terms: dk_s += w_last[s] (G v_s), dv_s += w_last[s] (G^T k_s).
        for x in tmp[..cl * d].iter_mut() {
            *x = T::zero();
        }
        matmul_nt_into(&v[a * d..b * d], &big_g, cl, d, d, &mut tmp[..cl * d]);
        for s in 0..cl {
            let ws = w[(cl - 1) * cl + s];
            for j in 0..d {
                gk[(a + s) * d + j] += ws * tmp[s * d + j];
            }
        }
        for x in tmp[..cl * d].iter_mut() {
            *x = T::zero();
        }
        matmul_into(&k[a * d..b * d], &big_g, cl, d, d, &mut tmp[..cl * d]);
        for s in 0..cl {
            let ws = w[(cl - 1) * cl + s];
            for j in 0..d {
                gv[(a + s) * d + j] += ws * tmp[s * d + j];
            }
        }

        // G_in = alpha_last G + (alpha-scaled Q)^T GO
        let alast = alpha[cl - 1];
        for x in big_g.iter_mut() {
            *x *= alast;
        }
        for i in 0..cl {
            let ai = alpha[i];
            for j in 0..d {
                scaled[i * d + j] = ai * q[(a + i) * d + j];
            }
        }
        matmul_tn_into(&scaled[..cl * d], &go[a * d..b * d], cl, d, d, &mut big_g);
    }
}
