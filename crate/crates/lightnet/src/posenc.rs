//! Multi-dimensional positional encodings.
//!
//! MD-TPE: one-sided Toeplitz filters applied independently along every grid
//! axis, with filter taps t_j = sum_m gamma_m lambda_m^j realized as a bank
//! of first-order scans (cost O(N e k d)). A residual connection is included,
//! so zero mode weights give the identity.
//!
//! MD-LRPE: features are split into one contiguous group per grid dimension;
//! feature j of group s at grid position (n_1..n_k) rotates by angle
//! n_s * theta_j with theta_j = 10000^(-2j/d). The complex rotation is
//! realized over the reals as [x .* cos, x .* sin], which preserves Hermitian
//! inner products as real dot products at the cost of doubling the width.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{sigmoid, Scalar, Tensor};

/// Dense-oracle guard for the Toeplitz reference evaluation.
pub const TPE_ORACLE_LIMIT: usize = 4096;

/// Operation counter for the TPE scan, available in debug builds so tests
/// can assert linear cost scaling without timing anything.
#[cfg(debug_assertions)]
pub mod opcount {
    use std::sync::atomic::{AtomicU64, Ordering};

    static TPE_INNER_OPS: AtomicU64 = AtomicU64::new(0);

    pub fn reset() {
        TPE_INNER_OPS.store(0, Ordering::Relaxed);
    }

    pub fn get() -> u64 {
        TPE_INNER_OPS.load(Ordering::Relaxed)
    }

    pub(crate) fn add(n: u64) {
        TPE_INNER_OPS.fetch_add(n, Ordering::Relaxed);
    }
}

/// Multi-dimensional extent (N_1, ..., N_k) of a flattened token sequence.
/// Flattening is row-major: the last dimension varies fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridShape {
    extents: Vec<usize>,
}

impl GridShape {
    pub fn new(extents: &[usize]) -> Result<Self> {
        if extents.is_empty() || extents.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument {
                op: "GridShape",
                msg: format!("extents must be positive, got {extents:?}"),
            });
        }
        Ok(GridShape { extents: extents.to_vec() })
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    /// Number of dimensions k.
    pub fn k(&self) -> usize {
        self.extents.len()
    }

    /// Flattened length N.
    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multi-index of a flat position.
    pub fn coords(&self, mut flat: usize) -> Vec<usize> {
        let mut c = vec![0; self.extents.len()];
        for (i, &e) in self.extents.iter().enumerate().rev() {
            c[i] = flat % e;
            flat /= e;
        }
        c
    }
}

// ── MD-TPE ──────────────────────────────────────────────────────────────

/// Mode parameters of the Toeplitz encoding: raw decay logits and mode
/// weights, both of shape [k, d, e]. Decays are sigmoid(raw), so they always
/// lie strictly inside (0, 1).
#[derive(Debug, Clone)]
pub struct TpeParams<T: Scalar> {
    k: usize,
    d: usize,
    e: usize,
    raw: Tensor<T>,
    gamma: Tensor<T>,
}

impl<T: Scalar> TpeParams<T> {
    /// Decays spread uniformly over [0.5, 0.99]; weights start at one.
    pub fn init(k: usize, d: usize, e: usize, rng: &mut Rng) -> Self {
        let raw = Tensor::from_fn(&[k, d, e], |_| {
            let lam = rng.uniform_scalar(0.5, 0.99);
            T::lit((lam / (1.0 - lam)).ln())
        });
        TpeParams { k, d, e, raw, gamma: Tensor::ones(&[k, d, e]) }
    }

    pub fn from_parts(raw: Tensor<T>, gamma: Tensor<T>) -> Result<Self> {
        if raw.rank() != 3 || raw.shape() != gamma.shape() {
            return Err(Error::InvalidArgument {
                op: "TpeParams",
                msg: format!("raw {:?} and gamma {:?} must share a [k, d, e] shape", raw.shape(), gamma.shape()),
            });
        }
        let (k, d, e) = (raw.shape()[0], raw.shape()[1], raw.shape()[2]);
        Ok(TpeParams { k, d, e, raw, gamma })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.k, self.d, self.e)
    }

    pub fn raw(&self) -> &Tensor<T> {
        &self.raw
    }

    pub fn gamma(&self) -> &Tensor<T> {
        &self.gamma
    }

    pub fn lambda(&self) -> Tensor<T> {
        self.raw.sigmoid()
    }

    /// Mutable access to (raw, gamma) for optimizer updates.
    pub fn parts_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.raw, &mut self.gamma)
    }
}

fn tpe_check_shapes<T: Scalar>(
    x: &Tensor<T>,
    raw: &Tensor<T>,
    gamma: &Tensor<T>,
    grid: &GridShape,
) -> Result<(usize, usize, usize)> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if x.rank() != 2 || n != grid.len() {
        return Err(Error::InvalidArgument {
            op: "tpe_apply",
            msg: format!("x {:?} does not flatten grid {:?}", x.shape(), grid.extents()),
        });
    }
    if raw.rank() != 3 || raw.shape() != gamma.shape() || raw.shape()[0] != grid.k() || raw.shape()[1] != d {
        return Err(Error::InvalidArgument {
            op: "tpe_apply",
            msg: format!(
                "params {:?} incompatible with grid k={} and width {d}",
                raw.shape(),
                grid.k()
            ),
        });
    }
    Ok((n, d, raw.shape()[2]))
}

/// Walk every line of the grid along `axis`, invoking `f(base, stride, len)`.
fn for_each_line(grid: &GridShape, axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let extents = grid.extents();
    let len = extents[axis];
    let stride: usize = extents[axis + 1..].iter().product();
    let outer: usize = extents[..axis].iter().product();
    for o in 0..outer {
        for i in 0..stride {
            f(o * len * stride + i, stride, len);
        }
    }
}

/// Sum of per-axis one-sided Toeplitz filters (no residual), written into `out`.
fn tpe_conv_into<T: Scalar>(
    x: &[T],
    lam: &[T],
    gam: &[T],
    grid: &GridShape,
    d: usize,
    e: usize,
    out: &mut [T],
) {
    let mut state = vec![T::zero(); d * e];
    for axis in 0..grid.k() {
        let pbase = axis * d * e;
        for_each_line(grid, axis, |base, stride, len| {
            state.iter_mut().for_each(|s| *s = T::zero());
            for t in 0..len {
                let row = (base + t * stride) * d;
                for c in 0..d {
                    let xv = x[row + c];
                    let pidx = pbase + c * e;
                    let srow = &mut state[c * e..(c + 1) * e];
                    let mut acc = T::zero();
                    for (m, s) in srow.iter_mut().enumerate() {
                        *s = lam[pidx + m] * *s + xv;
                        acc += gam[pidx + m] * *s;
                    }
                    out[row + c] += acc;
                }
            }
            #[cfg(debug_assertions)]
            opcount::add((len * d * e) as u64);
        });
    }
}

/// Forward kernel used by both the public op and the tape: y = x + conv(x).
pub(crate) fn tpe_forward<T: Scalar>(
    x: &Tensor<T>,
    raw: &Tensor<T>,
    gamma: &Tensor<T>,
    grid: &GridShape,
) -> Result<Tensor<T>> {
    let (_, d, e) = tpe_check_shapes(x, raw, gamma, grid)?;
    let lam: Vec<T> = raw.data().iter().map(|&r| sigmoid(r)).collect();
    let mut out = x.data().to_vec();
    tpe_conv_into(x.data(), &lam, gamma.data(), grid, d, e, &mut out);
    Tensor::from_vec(x.shape(), out)
}

pub struct TpeGrads<T> {
    pub x: Vec<T>,
    pub raw: Vec<T>,
    pub gamma: Vec<T>,
}

/// Adjoint of [`tpe_forward`]; per-mode impulse responses are recomputed line
/// by line.
pub(crate) fn tpe_backward<T: Scalar>(
    x: &Tensor<T>,
    raw: &Tensor<T>,
    gamma: &Tensor<T>,
    grid: &GridShape,
    gy: &[T],
) -> TpeGrads<T> {
    let d = x.shape()[1];
    let e = raw.shape()[2];
    let lam: Vec<T> = raw.data().iter().map(|&r| sigmoid(r)).collect();
    let mut g = TpeGrads {
        x: gy.to_vec(), // residual path
        raw: vec![T::zero(); raw.numel()],
        gamma: vec![T::zero(); gamma.numel()],
    };
    let max_len = grid.extents().iter().copied().max().unwrap_or(1);
    let mut u = vec![T::zero(); max_len];
    for axis in 0..grid.k() {
        let pbase = axis * d * e;
        for_each_line(grid, axis, |base, stride, len| {
            for c in 0..d {
                for m in 0..e {
                    let pidx = pbase + c * e + m;
                    let (l, w) = (lam[pidx], gamma.data()[pidx]);
                    // forward impulse states
                    let mut s = T::zero();
                    for (t, ut) in u[..len].iter_mut().enumerate() {
                        s = l * s + x.data()[(base + t * stride) * d + c];
                        *ut = s;
                    }
                    // reverse adjoint
                    let mut a = T::zero();
                    let mut glam = T::zero();
                    let mut ggam = T::zero();
                    for t in (0..len).rev() {
                        let idx = (base + t * stride) * d + c;
                        a = w * gy[idx] + l * a;
                        g.x[idx] += a;
                        if t > 0 {
                            glam += a * u[t - 1];
                        }
                        ggam += gy[idx] * u[t];
                    }
                    g.raw[pidx] += glam * l * (T::one() - l);
                    g.gamma[pidx] += ggam;
                }
            }
        });
    }
    g
}

/// y = x + sum over grid axes of the per-axis Toeplitz filter.
pub fn tpe_apply<T: Scalar>(
    params: &TpeParams<T>,
    x: &Tensor<T>,
    grid: &GridShape,
) -> Result<Tensor<T>> {
    tpe_forward(x, &params.raw, &params.gamma, grid)
}

/// Filter part alone (no residual) — the impulse-response view.
pub fn tpe_convolution<T: Scalar>(
    params: &TpeParams<T>,
    x: &Tensor<T>,
    grid: &GridShape,
) -> Result<Tensor<T>> {
    let (_, d, e) = tpe_check_shapes(x, &params.raw, &params.gamma, grid)?;
    let lam: Vec<T> = params.raw.data().iter().map(|&r| sigmoid(r)).collect();
    let mut out = vec![T::zero(); x.numel()];
    tpe_conv_into(x.data(), &lam, params.gamma.data(), grid, d, e, &mut out);
    Tensor::from_vec(x.shape(), out)
}

/// Dense reference: materializes each axis' lower-triangular Toeplitz matrix
/// with taps t_j = sum_m gamma_m lambda_m^j and applies it along that axis.
pub fn tpe_dense_oracle<T: Scalar>(
    params: &TpeParams<T>,
    x: &Tensor<T>,
    grid: &GridShape,
) -> Result<Tensor<T>> {
    let (n, d, e) = tpe_check_shapes(x, &params.raw, &params.gamma, grid)?;
    if n > TPE_ORACLE_LIMIT {
        return Err(Error::GuardLimit { op: "tpe_dense_oracle", n, limit: TPE_ORACLE_LIMIT });
    }
    let lam: Vec<T> = params.raw.data().iter().map(|&r| sigmoid(r)).collect();
    let gam = params.gamma.data();
    let mut out = x.data().to_vec();
    for axis in 0..grid.k() {
        let len = grid.extents()[axis];
        // taps[j][c] for j in 0..len
        let mut taps = vec![T::zero(); len * d];
        for c in 0..d {
            for m in 0..e {
                let pidx = (axis * d + c) * e + m;
                let mut p = T::one();
                for j in 0..len {
                    taps[j * d + c] += gam[pidx] * p;
                    p *= lam[pidx];
                }
            }
        }
        for_each_line(grid, axis, |base, stride, llen| {
            for i in 0..llen {
                let oi = (base + i * stride) * d;
                for j in 0..=i {
                    let xj = (base + j * stride) * d;
                    let tj = (i - j) * d;
                    for c in 0..d {
                        out[oi + c] += taps[tj + c] * x.data()[xj + c];
                    }
                }
            }
        });
    }
    Tensor::from_vec(x.shape(), out)
}

// ── MD-LRPE ─────────────────────────────────────────────────────────────

/// Rotation schedule: features are split into k contiguous groups of d/k,
/// group s listens to grid coordinate n_s, and theta_j = 10000^(-2j/d) with
/// the group-local index j = 1..d/k.
#[derive(Debug, Clone)]
pub struct LrpeConfig {
    d: usize,
    k: usize,
    thetas: Vec<f64>,
}

impl LrpeConfig {
    pub fn new(d: usize, k: usize) -> Result<Self> {
        if k == 0 || d % k != 0 {
            return Err(Error::InvalidArgument {
                op: "LrpeConfig",
                msg: format!("feature width {d} is not divisible by {k} groups"),
            });
        }
        let group = d / k;
        let mut thetas = Vec::with_capacity(d);
        for _ in 0..k {
            for j in 1..=group {
                thetas.push(10000f64.powf(-2.0 * j as f64 / d as f64));
            }
        }
        Ok(LrpeConfig { d, k, thetas })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    fn group_of(&self, feature: usize) -> usize {
        feature / (self.d / self.k)
    }

    /// Rotation angles of every feature at signed grid coordinates.
    pub fn angles(&self, coords: &[i64]) -> Result<Vec<f64>> {
        if coords.len() != self.k {
            return Err(Error::InvalidArgument {
                op: "lrpe",
                msg: format!("expected {} coordinates, got {}", self.k, coords.len()),
            });
        }
        Ok((0..self.d)
            .map(|j| coords[self.group_of(j)] as f64 * self.thetas[j])
            .collect())
    }

    /// Per-row cos/sin tables for a flattened grid (both `N x d`).
    pub(crate) fn angle_tables<T: Scalar>(
        &self,
        grid: &GridShape,
        x_shape: &[usize],
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if x_shape.len() != 2 || x_shape[0] != grid.len() || x_shape[1] != self.d {
            return Err(Error::InvalidArgument {
                op: "lrpe_rotate",
                msg: format!(
                    "x {:?} incompatible with grid {:?} and width {}",
                    x_shape,
                    grid.extents(),
                    self.d
                ),
            });
        }
        if grid.k() != self.k {
            return Err(Error::InvalidArgument {
                op: "lrpe_rotate",
                msg: format!("grid has {} dims, config expects {}", grid.k(), self.k),
            });
        }
        let n = grid.len();
        let mut cos = vec![T::zero(); n * self.d];
        let mut sin = vec![T::zero(); n * self.d];
        for p in 0..n {
            let coords: Vec<i64> = grid.coords(p).iter().map(|&c| c as i64).collect();
            let angles = self.angles(&coords)?;
            for (j, &a) in angles.iter().enumerate() {
                cos[p * self.d + j] = T::lit(a.cos());
                sin[p * self.d + j] = T::lit(a.sin());
            }
        }
        Ok((
            Tensor::from_vec(&[n, self.d], cos)?,
            Tensor::from_vec(&[n, self.d], sin)?,
        ))
    }
}

pub(crate) fn rotate_with_tables<T: Scalar>(
    x: &Tensor<T>,
    cos: &Tensor<T>,
    sin: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![T::zero(); n * 2 * d];
    for r in 0..n {
        for j in 0..d {
            let xv = x.data()[r * d + j];
            out[r * 2 * d + j] = xv * cos.data()[r * d + j];
            out[r * 2 * d + d + j] = xv * sin.data()[r * d + j];
        }
    }
    Tensor::from_vec(&[n, 2 * d], out)
}

/// Rotate every row of `x` (`N x d`) by its grid position; output is `N x 2d`.
pub fn lrpe_rotate<T: Scalar>(
    cfg: &LrpeConfig,
    x: &Tensor<T>,
    grid: &GridShape,
) -> Result<Tensor<T>> {
    let (cos, sin) = cfg.angle_tables(grid, x.shape())?;
    rotate_with_tables(x, &cos, &sin)
}

/// Rotate a single vector at signed coordinates (offsets allowed).
pub fn lrpe_rotate_vec<T: Scalar>(cfg: &LrpeConfig, x: &[T], coords: &[i64]) -> Result<Vec<T>> {
    if x.len() != cfg.d {
        return Err(Error::InvalidArgument {
            op: "lrpe_rotate_vec",
            msg: format!("vector length {} != width {}", x.len(), cfg.d),
        });
    }
    let angles = cfg.angles(coords)?;
    let mut out = vec![T::zero(); 2 * cfg.d];
    for (j, (&xv, &a)) in x.iter().zip(&angles).enumerate() {
        out[j] = xv * T::lit(a.cos());
        out[cfg.d + j] = xv * T::lit(a.sin());
    }
    Ok(out)
}

/// Checks the relative-offset identity: the dot product of q rotated at n and
/// k rotated at m equals the Hermitian pairing of q with k rotated by m - n.
pub fn lrpe_relative_check<T: Scalar>(
    cfg: &LrpeConfig,
    q: &[T],
    k: &[T],
    n: &[usize],
    m: &[usize],
    tol: f64,
) -> Result<bool> {
    let nc: Vec<i64> = n.iter().map(|&c| c as i64).collect();
    let mc: Vec<i64> = m.iter().map(|&c| c as i64).collect();
    let rq = lrpe_rotate_vec(cfg, q, &nc)?;
    let rk = lrpe_rotate_vec(cfg, k, &mc)?;
    let lhs: f64 = rq
        .iter()
        .zip(&rk)
        .map(|(&a, &b)| a.to_f64c() * b.to_f64c())
        .sum();
    let offset: Vec<i64> = mc.iter().zip(&nc).map(|(&a, &b)| a - b).collect();
    let angles = cfg.angles(&offset)?;
    let rhs: f64 = q
        .iter()
        .zip(k)
        .zip(&angles)
        .map(|((&a, &b), &ang)| a.to_f64c() * b.to_f64c() * ang.cos())
        .sum();
    Ok((lhs - rhs).abs() <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    /// Raw logits that map to an exact decay under sigmoid.
    fn raw_for(lam: f64, shape: &[usize]) -> Tensor<f64> {
        Tensor::full(shape, (lam / (1.0 - lam)).ln())
    }

    #[test]
    fn tpe_1d_impulse_response() {
        let params = TpeParams::from_parts(raw_for(0.5, &[1, 1, 1]), Tensor::ones(&[1, 1, 1])).unwrap();
        let grid = GridShape::new(&[3]).unwrap();
        let x = t64(&[3, 1], &[1.0, 0.0, 0.0]);
        let y = tpe_convolution(&params, &x, &grid).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 0.5).abs() < 1e-12);
        assert!((y.data()[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn tpe_2d_impulse_is_axis_separable() {
        let params = TpeParams::from_parts(raw_for(0.5, &[2, 1, 1]), Tensor::ones(&[2, 1, 1])).unwrap();
        let grid = GridShape::new(&[2, 2]).unwrap();
        let x = t64(&[4, 1], &[1.0, 0.0, 0.0, 0.0]);
        let y = tpe_convolution(&params, &x, &grid).unwrap();
        // diagonal cell gets t_0 from both axes; axis neighbours get lambda;
        // the diagonal neighbour gets nothing.
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
        assert!((y.data()[1] - 0.5).abs() < 1e-12);
        assert!((y.data()[2] - 0.5).abs() < 1e-12);
        assert!(y.data()[3].abs() < 1e-12);
    }

    #[test]
    fn tpe_zero_gamma_is_identity() {
        let mut rng = Rng::new(1);
        let params =
            TpeParams::from_parts(rng.uniform(&[2, 3, 2], -1.0, 1.0), Tensor::zeros(&[2, 3, 2]))
                .unwrap();
        let grid = GridShape::new(&[2, 3]).unwrap();
        let x: Tensor<f64> = rng.uniform(&[6, 3], -1.0, 1.0);
        let y = tpe_apply(&params, &x, &grid).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn tpe_scan_matches_dense_oracle() {
        let mut rng = Rng::new(2);
        for (extents, d, e) in [(vec![8], 4, 3), (vec![4, 5], 3, 2), (vec![2, 3, 4], 2, 4)] {
            let grid = GridShape::new(&extents).unwrap();
            let k = grid.k();
            let params = TpeParams::from_parts(
                rng.uniform(&[k, d, e], -2.0, 2.0),
                rng.uniform(&[k, d, e], -1.0, 1.0),
            )
            .unwrap();
            let x: Tensor<f64> = rng.uniform(&[grid.len(), d], -1.0, 1.0);
            let fast = tpe_apply(&params, &x, &grid).unwrap();
            let dense = tpe_dense_oracle(&params, &x, &grid).unwrap();
            assert!(fast.max_abs_diff(&dense) < 1e-10, "grid {extents:?}");
        }
    }

    #[test]
    fn tpe_zero_decay_dense_matrix_is_diagonal() {
        // sigmoid(-40) is ~4e-18: taps beyond j=0 vanish at double precision.
        let params = TpeParams::from_parts(
            Tensor::full(&[1, 1, 1], -40.0),
            Tensor::ones(&[1, 1, 1]),
        )
        .unwrap();
        let grid = GridShape::new(&[4]).unwrap();
        let x = t64(&[4, 1], &[1.0, 2.0, 3.0, 4.0]);
        let y = tpe_convolution(&params, &x, &grid).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tpe_single_cell_grid() {
        let mut rng = Rng::new(3);
        let grid = GridShape::new(&[1, 1]).unwrap();
        let params = TpeParams::from_parts(
            rng.uniform(&[2, 3, 2], -1.0, 1.0),
            rng.uniform(&[2, 3, 2], 0.5, 1.5),
        )
        .unwrap();
        let x: Tensor<f64> = rng.uniform(&[1, 3], -1.0, 1.0);
        let y = tpe_apply(&params, &x, &grid).unwrap();
        // y = x + sum over axes of t_0 x, with t_0 = sum_m gamma_m per channel.
        for c in 0..3 {
            let mut t0 = 0.0;
            for axis in 0..2 {
                for m in 0..2 {
                    t0 += params.gamma().data()[(axis * 3 + c) * 2 + m];
                }
            }
            let expect = x.data()[c] * (1.0 + t0);
            assert!((y.data()[c] - expect).abs() < 1e-12);
        }
    }

    #[cfg(debug_assertions)]
    #[test]
    fn tpe_op_count_scales_linearly() {
        let mut rng = Rng::new(4);
        let (d, e) = (3, 2);
        let mut count_for = |n: usize| {
            let grid = GridShape::new(&[n]).unwrap();
            let params = TpeParams::init(1, d, e, &mut rng);
            let x: Tensor<f64> = rng.uniform(&[n, d], -1.0, 1.0);
            opcount::reset();
            tpe_apply(&params, &x, &grid).unwrap();
            opcount::get()
        };
        let c1 = count_for(64);
        let c2 = count_for(128);
        assert_eq!(c2, 2 * c1);
    }

    #[test]
    fn lrpe_zero_position_is_untouched() {
        let cfg = LrpeConfig::new(4, 2).unwrap();
        let grid = GridShape::new(&[1, 1]).unwrap();
        let x = t64(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let y = lrpe_rotate(&cfg, &x, &grid).unwrap();
        assert_eq!(&y.data()[..4], x.data());
        assert_eq!(&y.data()[4..], &[0.0; 4]);
    }

    #[test]
    fn lrpe_same_position_preserves_dot_product() {
        let mut rng = Rng::new(5);
        let cfg = LrpeConfig::new(6, 2).unwrap();
        let q: Vec<f64> = (0..6).map(|_| rng.uniform_scalar(-1.0, 1.0)).collect();
        let k: Vec<f64> = (0..6).map(|_| rng.uniform_scalar(-1.0, 1.0)).collect();
        let coords = [3i64, 1];
        let rq = lrpe_rotate_vec(&cfg, &q, &coords).unwrap();
        let rk = lrpe_rotate_vec(&cfg, &k, &coords).unwrap();
        let rotated: f64 = rq.iter().zip(&rk).map(|(a, b)| a * b).sum();
        let plain: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((rotated - plain).abs() < 1e-12);
    }

    #[test]
    fn lrpe_1d_single_feature_angle() {
        // One group, one feature: force theta = 1 to compare against cos(1).
        let mut cfg = LrpeConfig::new(1, 1).unwrap();
        cfg.thetas = vec![1.0];
        let rq = lrpe_rotate_vec(&cfg, &[1.0f64], &[0]).unwrap();
        let rk = lrpe_rotate_vec(&cfg, &[1.0f64], &[1]).unwrap();
        let dot: f64 = rq.iter().zip(&rk).map(|(a, b)| a * b).sum();
        assert!((dot - 1.0f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn lrpe_relative_identity_on_grids() {
        let mut rng = Rng::new(6);
        let cfg = LrpeConfig::new(8, 2).unwrap();
        let grid = GridShape::new(&[4, 4]).unwrap();
        for _ in 0..50 {
            let q: Vec<f64> = (0..8).map(|_| rng.uniform_scalar(-1.0, 1.0)).collect();
            let k: Vec<f64> = (0..8).map(|_| rng.uniform_scalar(-1.0, 1.0)).collect();
            let n = grid.coords(rng.below(16));
            let m = grid.coords(rng.below(16));
            assert!(lrpe_relative_check(&cfg, &q, &k, &n, &m, 1e-10).unwrap());
        }
    }

    #[test]
    fn lrpe_translation_invariance() {
        let mut rng = Rng::new(7);
        let cfg = LrpeConfig::new(6, 3).unwrap();
        let q: Vec<f64> = (0..6).map(|_| rng.uniform_scalar(-1.0, 1.0)).collect();
        let k: Vec<f64> = (0..6).map(|_| rng.uniform_scalar(-1.0, 1.0)).collect();
        let dot = |n: &[i64], m: &[i64]| -> f64 {
            let rq = lrpe_rotate_vec(&cfg, &q, n).unwrap();
            let rk = lrpe_rotate_vec(&cfg, &k, m).unwrap();
            rq.iter().zip(&rk).map(|(a, b)| a * b).sum()
        };
        let base = dot(&[1, 2, 0], &[3, 0, 1]);
        for delta in [[1i64, 0, 0], [0, 5, 2], [7, 7, 7]] {
            let shifted = dot(
                &[1 + delta[0], 2 + delta[1], delta[2]],
                &[3 + delta[0], delta[1], 1 + delta[2]],
            );
            assert!((base - shifted).abs() < 1e-10);
        }
    }

    #[test]
    fn lrpe_norm_preservation() {
        let mut rng = Rng::new(8);
        let cfg = LrpeConfig::new(6, 2).unwrap();
        let grid = GridShape::new(&[3, 4]).unwrap();
        let x: Tensor<f64> = rng.uniform(&[12, 6], -2.0, 2.0);
        let y = lrpe_rotate(&cfg, &x, &grid).unwrap();
        for r in 0..12 {
            let nx: f64 = x.data()[r * 6..(r + 1) * 6].iter().map(|v| v * v).sum();
            let ny: f64 = y.data()[r * 12..(r + 1) * 12].iter().map(|v| v * v).sum();
            assert!((nx - ny).abs() < 1e-12);
        }
    }

    #[test]
    fn lrpe_width_must_divide() {
        assert!(LrpeConfig::new(7, 2).is_err());
        assert!(LrpeConfig::new(8, 2).is_ok());
    }

    #[test]
    fn lrpe_matches_complex_oracle() {
        // Explicit complex arithmetic: rotate q and k by their position
        // angles, take Re(<q, k>_H) with conjugation on the q side.
        let mut rng = Rng::new(9);
        let cfg = LrpeConfig::new(6, 3).unwrap();
        let grid = GridShape::new(&[2, 3, 4]).unwrap();
        for _ in 0..30 {
            let q: Vec<f64> = (0..6).map(|_| rng.uniform_scalar(-1.0, 1.0)).collect();
            let k: Vec<f64> = (0..6).map(|_| rng.uniform_scalar(-1.0, 1.0)).collect();
            let n = grid.coords(rng.below(24));
            let m = grid.coords(rng.below(24));
            let nc: Vec<i64> = n.iter().map(|&c| c as i64).collect();
            let mc: Vec<i64> = m.iter().map(|&c| c as i64).collect();
            let aq = cfg.angles(&nc).unwrap();
            let ak = cfg.angles(&mc).unwrap();
            let mut re = 0.0;
            for j in 0..6 {
                // conj(q e^{i a_q}) * (k e^{i a_k}) = q k e^{i (a_k - a_q)}
                re += q[j] * k[j] * (ak[j] - aq[j]).cos();
            }
            let rq = lrpe_rotate_vec(&cfg, &q, &nc).unwrap();
            let rk = lrpe_rotate_vec(&cfg, &k, &mc).unwrap();
            let real: f64 = rq.iter().zip(&rk).map(|(a, b)| a * b).sum();
            assert!((re - real).abs() < 1e-10);
        }
    }
}
