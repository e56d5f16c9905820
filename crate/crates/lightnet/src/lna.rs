//! LightNet attention (LNA) and the full LightNet layer.
//!
//! The per-feature decay is a running-softmax normalization of exp(k): with
//! s_t = s_{t-1} + exp(k_t) and kbar_t = exp(k_t)/s_t, the state update is
//! kv_t = diag(1 - kbar_t) kv_{t-1} + kbar_t v_t^T. The non-causal form is
//! the right-product O = Norm[phi(Q) (Softmax(K)^T V)] ⊙ sigmoid(U). Keys
//! and decay share one projection; an optional separate decay projection is
//! the "no share" ablation toggle.

use crate::error::{Error, Result};
use crate::posenc::{GridShape, LrpeConfig};
use crate::rng::Rng;
use crate::scan;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// RMS-norm epsilon used throughout the layer.
pub const RMS_EPS: f64 = 1e-6;

/// Learnable parameters of one LNA block.
///
/// No output projection exists: the value projection is the output-side
/// matrix of the attention branch (zeroing it makes the branch vanish).
#[derive(Debug, Clone)]
pub struct LnaParams<T: Scalar> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_u1: Tensor<T>,
    pub w_u2: Tensor<T>,
    /// Per-head RMS scales, stored as one length-d vector.
    pub norm_scale: Tensor<T>,
    /// Separate decay projection — the experimental "no share" ablation.
    pub w_decay: Option<Tensor<T>>,
    pub heads: usize,
}

impl<T: Scalar> LnaParams<T> {
    /// Random initialization (scaled by 1/sqrt(d)); norm scales start at one.
    pub fn init(d: usize, heads: usize, rank: usize, rng: &mut Rng) -> Result<Self> {
        Self::check_dims(d, heads, rank)?;
        let sd = 1.0 / (d as f64).sqrt();
        Ok(LnaParams {
            w_q: rng.normal(&[d, d], 0.0, sd),
            w_k: rng.normal(&[d, d], 0.0, sd),
            w_v: rng.normal(&[d, d], 0.0, sd),
            w_u1: rng.normal(&[d, rank], 0.0, sd),
            w_u2: rng.normal(&[rank, d], 0.0, (rank as f64).powf(-0.5)),
            norm_scale: Tensor::ones(&[d]),
            w_decay: None,
            heads,
        })
    }

    /// Like [`init`](Self::init) but with the value projection zeroed so the
    /// attention branch starts as the zero map.
    pub fn init_identity(d: usize, heads: usize, rank: usize, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::init(d, heads, rank, rng)?;
        p.w_v = Tensor::zeros(&[d, d]);
        Ok(p)
    }

    fn check_dims(d: usize, heads: usize, rank: usize) -> Result<()> {
        if heads == 0 || d % heads != 0 || rank == 0 {
            return Err(Error::InvalidArgument {
                op: "LnaParams",
                msg: format!("d = {d} must be divisible by heads = {heads}; rank {rank} >= 1"),
            });
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_width(&self) -> usize {
        self.d() / self.heads
    }

    /// Switch on the unshared-decay ablation with a fresh projection.
    pub fn with_separate_decay(mut self, rng: &mut Rng) -> Self {
        let d = self.d();
        self.w_decay = Some(rng.normal(&[d, d], 0.0, 1.0 / (d as f64).sqrt()));
        self
    }

    pub fn insert(&self, tape: &mut Tape<T>) -> LnaVars {
        LnaVars {
            w_q: tape.input(self.w_q.clone()),
            w_k: tape.input(self.w_k.clone()),
            w_v: tape.input(self.w_v.clone()),
            w_u1: tape.input(self.w_u1.clone()),
            w_u2: tape.input(self.w_u2.clone()),
            norm_scale: tape.input(self.norm_scale.clone()),
            w_decay: self.w_decay.as_ref().map(|w| tape.input(w.clone())),
            heads: self.heads,
        }
    }
}

/// Tape handles for one LNA block.
#[derive(Debug, Clone)]
pub struct LnaVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_u1: Var,
    pub w_u2: Var,
    pub norm_scale: Var,
    pub w_decay: Option<Var>,
    pub heads: usize,
}

/// Optional positional rotation: the config width must equal the head width.
pub type LrpeCtx<'a> = (&'a LrpeConfig, &'a GridShape);

fn check_lrpe(ctx: Option<LrpeCtx<'_>>, head_width: usize, n: usize) -> Result<()> {
    if let Some((cfg, grid)) = ctx {
        if cfg.d() != head_width {
            return Err(Error::InvalidArgument {
                op: "lna",
                msg: format!("lrpe width {} != head width {head_width}", cfg.d()),
            });
        }
        if grid.len() != n {
            return Err(Error::InvalidArgument {
                op: "lna",
                msg: format!("grid {:?} does not flatten to sequence length {n}", grid.extents()),
            });
        }
    }
    Ok(())
}

/// Causal LNA: per head, running-softmax decay scan over the sequence, RMS
/// normalization of the attention read-out, then the sigmoid output gate.
pub fn lna_causal<T: Scalar>(
    tape: &mut Tape<T>,
    p: &LnaVars,
    x: Var,
    lrpe: Option<LrpeCtx<'_>>,
) -> Result<Var> {
    lna_forward(tape, p, x, true, lrpe)
}

/// Non-causal LNA: O = Norm[phi(Q) (Softmax(K)^T V)] ⊙ sigmoid(U), a single
/// right-product pass with softmax over the sequence axis.
pub fn lna_noncausal<T: Scalar>(
    tape: &mut Tape<T>,
    p: &LnaVars,
    x: Var,
    lrpe: Option<LrpeCtx<'_>>,
) -> Result<Var> {
    lna_forward(tape, p, x, false, lrpe)
}

fn lna_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &LnaVars,
    x: Var,
    causal: bool,
    lrpe: Option<LrpeCtx<'_>>,
) -> Result<Var> {
    let (n, d) = {
        let t = tape.value(x);
        (t.shape()[0], t.shape()[1])
    };
    let heads = p.heads;
    let hw = d / heads;
    check_lrpe(lrpe, hw, n)?;

    let q = tape.matmul(x, p.w_q)?;
    let k = tape.matmul(x, p.w_k)?;
    let v = tape.matmul(x, p.w_v)?;
    let dec = match p.w_decay {
        Some(w) => Some(tape.matmul(x, w)?),
        None => None,
    };

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * hw;
        let qh = tape.slice_cols(q, off, hw)?;
        let kh = tape.slice_cols(k, off, hw)?;
        let vh = tape.slice_cols(v, off, hw)?;
        let phi_q = tape.swish(qh);

        let attn = if causal {
            // Shared form: the write weights and the decay both come from
            // the running softmax of k. Unshared: decay from its own
            // projection's running softmax.
            let kbar = tape.prefix_softmax(kh)?;
            let decay = match dec {
                Some(dv) => {
                    let dh = tape.slice_cols(dv, off, hw)?;
                    let dbar = tape.prefix_softmax(dh)?;
                    tape.one_minus(dbar)?
                }
                None => tape.one_minus(kbar)?,
            };
            match lrpe {
                Some((cfg, grid)) => {
                    let qs = tape.lrpe_rotate(cfg, phi_q, grid)?;
                    let ks = tape.lrpe_rotate(cfg, kbar, grid)?;
                    // Each rotated half of a feature keeps that feature's decay.
                    let decay2 = tape.concat_cols(&[decay, decay])?;
                    tape.decayed_kv_scan(decay2, ks, vh, qs)?
                }
                None => tape.decayed_kv_scan(decay, kbar, vh, phi_q)?,
            }
        } else {
            let ksoft = tape.softmax_axis(kh, 0)?;
            let (qs, ks) = match lrpe {
                Some((cfg, grid)) => (
                    tape.lrpe_rotate(cfg, phi_q, grid)?,
                    tape.lrpe_rotate(cfg, ksoft, grid)?,
                ),
                None => (phi_q, ksoft),
            };
            let kt = tape.transpose(ks)?;
            let pooled = tape.matmul(kt, vh)?;
            tape.matmul(qs, pooled)?
        };

        let scale_h = tape.slice_cols(p.norm_scale, off, hw)?;
        let normed = tape.rms_norm(attn, scale_h, T::lit(RMS_EPS))?;
        head_outs.push(normed);
    }
    let merged = if heads == 1 { head_outs[0] } else { tape.concat_cols(&head_outs)? };

    let u1 = tape.matmul(x, p.w_u1)?;
    let u = tape.matmul(u1, p.w_u2)?;
    let gate = tape.sigmoid(u);
    tape.mul(merged, gate)
}

/// Final normalized state of the causal scan, kv_n = sum_s kbar-weighted
/// values: by the telescoping identity it equals Softmax(K)^T V.
pub fn causal_prefix_pool<T: Scalar>(k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, dk) = (k.shape()[0], k.shape()[1]);
    let dv = v.shape()[1];
    if v.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            op: "causal_prefix_pool",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let (kbar, _, _) = scan::prefix_softmax_forward(k);
    let mut state = vec![T::zero(); dk * dv];
    for t in 0..n {
        for i in 0..dk {
            let kb = kbar.data()[t * dk + i];
            let de = T::one() - kb;
            for j in 0..dv {
                state[i * dv + j] = de * state[i * dv + j] + kb * v.data()[t * dv + j];
            }
        }
    }
    Tensor::from_vec(&[dk, dv], state)
}

// ── GLU and the full layer ──────────────────────────────────────────────

/// GLU hidden width: the first multiple of `heads` at or above 8d/3.
pub fn glu_hidden_width(d: usize, heads: usize) -> usize {
    let f = (8 * d).div_ceil(3);
    f.div_ceil(heads) * heads
}

/// One LightNet layer: LNA and a GLU, each behind a pre-norm residual.
#[derive(Debug, Clone)]
pub struct LayerParams<T: Scalar> {
    pub lna: LnaParams<T>,
    pub w_glu_a: Tensor<T>,
    pub w_glu_b: Tensor<T>,
    pub w_glu_out: Tensor<T>,
    pub prenorm_attn: Tensor<T>,
    pub prenorm_glu: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn init(d: usize, heads: usize, rank: usize, rng: &mut Rng) -> Result<Self> {
        let f = glu_hidden_width(d, heads);
        let sd = 1.0 / (d as f64).sqrt();
        Ok(LayerParams {
            lna: LnaParams::init(d, heads, rank, rng)?,
            w_glu_a: rng.normal(&[d, f], 0.0, sd),
            w_glu_b: rng.normal(&[d, f], 0.0, sd),
            w_glu_out: rng.normal(&[f, d], 0.0, 1.0 / (f as f64).sqrt()),
            prenorm_attn: Tensor::ones(&[d]),
            prenorm_glu: Tensor::ones(&[d]),
        })
    }

    /// Identity-at-init variant: the value projection and the GLU output
    /// projection are zeroed, so the layer is the identity map.
    pub fn init_identity(d: usize, heads: usize, rank: usize, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::init(d, heads, rank, rng)?;
        p.lna.w_v = Tensor::zeros(&[d, d]);
        p.w_glu_out = Tensor::zeros(&[glu_hidden_width(d, heads), d]);
        Ok(p)
    }

    pub fn insert(&self, tape: &mut Tape<T>) -> LayerVars {
        LayerVars {
            lna: self.lna.insert(tape),
            w_glu_a: tape.input(self.w_glu_a.clone()),
            w_glu_b: tape.input(self.w_glu_b.clone()),
            w_glu_out: tape.input(self.w_glu_out.clone()),
            prenorm_attn: tape.input(self.prenorm_attn.clone()),
            prenorm_glu: tape.input(self.prenorm_glu.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub lna: LnaVars,
    pub w_glu_a: Var,
    pub w_glu_b: Var,
    pub w_glu_out: Var,
    pub prenorm_attn: Var,
    pub prenorm_glu: Var,
}

/// (swish(x W_a) ⊙ (x W_b)) W_c.
pub fn glu<T: Scalar>(tape: &mut Tape<T>, v: &LayerVars, x: Var) -> Result<Var> {
    let a = tape.matmul(x, v.w_glu_a)?;
    let b = tape.matmul(x, v.w_glu_b)?;
    let sa = tape.swish(a);
    let gated = tape.mul(sa, b)?;
    tape.matmul(gated, v.w_glu_out)
}

/// x + LNA(prenorm(x)), then + GLU(prenorm(.)).
pub fn lightnet_layer<T: Scalar>(
    tape: &mut Tape<T>,
    v: &LayerVars,
    x: Var,
    causal: bool,
    lrpe: Option<LrpeCtx<'_>>,
) -> Result<Var> {
    let pre = tape.rms_norm(x, v.prenorm_attn, T::lit(RMS_EPS))?;
    let attn = lna_forward(tape, &v.lna, pre, causal, lrpe)?;
    let mid = tape.add(x, attn)?;
    let pre2 = tape.rms_norm(mid, v.prenorm_glu, T::lit(RMS_EPS))?;
    let ff = glu(tape, v, pre2)?;
    tape.add(mid, ff)
}
