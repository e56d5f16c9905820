//! 1D linear recurrences y_t = a_t y_{t-1} + x_t, their unrolled coefficient
//! form, and the representability test that characterizes which coefficient
//! matrices come from a recurrence.
//!
//! Indexing note: the math is 1-based (t = 1..n, y_0 = 0); storage is
//! 0-based, so `a[0]` holds a_1. Since y_0 = 0, a_1 never affects any output.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a recurrence was generated, when it came from a generator.
#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    /// a_t = rho_t with 0 < rho_t <= 1.
    Multiplicative(Vec<f64>),
    /// a_t = (sum_{s<t} delta_s) / (sum_{s<=t} delta_s), delta >= 0, delta_1 > 0.
    Additive(Vec<f64>),
}

/// A length-n recurrence given by its per-step coefficients, optionally
/// remembering the generator it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrenceSpec {
    a: Vec<f64>,
    generator: Option<Generator>,
}

impl RecurrenceSpec {
    pub fn from_coefficients(a: Vec<f64>) -> Result<Self> {
        if a.is_empty() || a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "RecurrenceSpec",
                msg: "coefficients must be a non-empty finite sequence".into(),
            });
        }
        Ok(RecurrenceSpec { a, generator: None })
    }

    /// Multiplicative form: a_t = rho_t.
    pub fn multiplicative(rho: Vec<f64>) -> Result<Self> {
        if rho.is_empty() || rho.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::InvalidArgument {
                op: "RecurrenceSpec::multiplicative",
                msg: "rho must be non-empty with 0 < rho_t <= 1".into(),
            });
        }
        Ok(RecurrenceSpec { a: rho.clone(), generator: Some(Generator::Multiplicative(rho)) })
    }

    /// Additive form built from importance scores; a_1 = 0 (forced by
    /// g(0) = 0) and a_t = g(t-1)/g(t) with g(t) = sum_{s<=t} delta_s.
    pub fn additive(delta: Vec<f64>) -> Result<Self> {
        if delta.is_empty() || delta.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "RecurrenceSpec::additive",
                msg: "delta must be non-empty and nonnegative".into(),
            });
        }
        if delta[0] <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "RecurrenceSpec::additive",
                msg: "delta_1 must be positive".into(),
            });
        }
        let mut a = Vec::with_capacity(delta.len());
        let mut g_prev = 0.0;
        let mut g = 0.0;
        for &d in &delta {
            g += d;
            a.push(if g_prev == 0.0 { 0.0 } else { g_prev / g });
            g_prev = g;
        }
        Ok(RecurrenceSpec { a, generator: Some(Generator::Additive(delta)) })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn generator(&self) -> Option<&Generator> {
        self.generator.as_ref()
    }
}

/// Sequential evaluation of the recurrence per feature column.
/// `x` may be `n x d` or a length-n vector.
pub fn scan(spec: &RecurrenceSpec, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = spec.n();
    let (rows, d) = match x.rank() {
        1 => (x.shape()[0], 1),
        2 => (x.shape()[0], x.shape()[1]),
        _ => {
            return Err(Error::InvalidArgument {
                op: "recurrence::scan",
                msg: format!("expected rank 1 or 2, got {:?}", x.shape()),
            })
        }
    };
    if rows != n {
        return Err(Error::ShapeMismatch {
            op: "recurrence::scan",
            lhs: vec![n],
            rhs: x.shape().to_vec(),
        });
    }
    let mut out = x.data().to_vec();
    for t in 1..n {
        let at = spec.a[t];
        for j in 0..d {
            out[t * d + j] += at * out[(t - 1) * d + j];
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Lower-triangular unrolled form of a recurrence: c_ts = prod_{r=s+1}^t a_r,
/// c_tt = 1 (1-based indices).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    n: usize,
    c: Vec<f64>, // dense n x n, upper triangle zero
}

impl CoefficientMatrix {
    pub fn from_lower_triangular(n: usize, c: Vec<f64>) -> Result<Self> {
        if c.len() != n * n || n == 0 {
            return Err(Error::InvalidArgument {
                op: "CoefficientMatrix",
                msg: format!("need a dense {n} x {n} buffer"),
            });
        }
        for t in 0..n {
            for s in t + 1..n {
                if c[t * n + s] != 0.0 {
                    return Err(Error::InvalidArgument {
                        op: "CoefficientMatrix",
                        msg: format!("entry ({t}, {s}) above the diagonal is nonzero"),
                    });
                }
            }
        }
        Ok(CoefficientMatrix { n, c })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Entry c_ts with 0-based indices; zero above the diagonal.
    pub fn get(&self, t: usize, s: usize) -> f64 {
        self.c[t * self.n + s]
    }

    fn set(&mut self, t: usize, s: usize, v: f64) {
        self.c[t * self.n + s] = v;
    }

    /// Dense application per feature column: y_t = sum_{s<=t} c_ts x_s.
    pub fn apply(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (rows, d) = match x.rank() {
            1 => (x.shape()[0], 1),
            2 => (x.shape()[0], x.shape()[1]),
            _ => {
                return Err(Error::InvalidArgument {
                    op: "CoefficientMatrix::apply",
                    msg: format!("expected rank 1 or 2, got {:?}", x.shape()),
                })
            }
        };
        if rows != self.n {
            return Err(Error::ShapeMismatch {
                op: "CoefficientMatrix::apply",
                lhs: vec![self.n],
                rhs: x.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; x.numel()];
        for t in 0..self.n {
            for s in 0..=t {
                let c = self.get(t, s);
                for j in 0..d {
                    out[t * d + j] += c * x.data()[s * d + j];
                }
            }
        }
        Tensor::from_vec(x.shape(), out)
    }
}

/// Unrolls a recurrence into its coefficient matrix. Products are built
/// directly (never via reciprocals of prefix products), so zero coefficients
/// are handled exactly.
pub fn unroll(spec: &RecurrenceSpec) -> CoefficientMatrix {
    let n = spec.n();
    let mut m = CoefficientMatrix { n, c: vec![0.0; n * n] };
    for t in 0..n {
        m.set(t, t, 1.0);
        for s in (0..t).rev() {
            let v = m.get(t, s + 1) * spec.a[s + 1];
            m.set(t, s, v);
        }
    }
    m
}

/// Outcome of the representability test.
#[derive(Debug, Clone, PartialEq)]
pub struct Representability {
    pub representable: bool,
    /// Recovered coefficients when representable; index 0 (a_1) is reported
    /// as 0 since it never affects the output.
    pub recovered_a: Option<Vec<f64>>,
    /// Largest deviation observed in the factorization test.
    pub max_deviation: f64,
}

/// A coefficient matrix is the unroll of some recurrence iff c_tt = 1 and
/// every strictly-lower entry factors through the first subdiagonal:
/// c_ts = prod_{r=s+1}^t c_{r,r-1}. This is the gauge-free equivalent of
/// the existence of g with c_ts = g(s)/g(t).
pub fn is_recurrence_representable(c: &CoefficientMatrix, tol: f64) -> Representability {
    let n = c.n();
    let mut max_dev = 0.0f64;
    for t in 0..n {
        max_dev = max_dev.max((c.get(t, t) - 1.0).abs());
    }
    for t in 1..n {
        let mut prod = 1.0;
        for s in (0..t).rev() {
            prod *= c.get(s + 1, s);
            max_dev = max_dev.max((c.get(t, s) - prod).abs());
        }
    }
    if max_dev <= tol {
        let mut a = vec![0.0; n];
        for t in 1..n {
            a[t] = c.get(t, t - 1);
        }
        Representability { representable: true, recovered_a: Some(a), max_deviation: max_dev }
    } else {
        Representability { representable: false, recovered_a: None, max_deviation: max_dev }
    }
}

/// Default tolerance for the representability test (double precision).
pub const REPRESENTABILITY_TOL: f64 = 1e-9;

/// Global additive decay a_t = (sum_{s<t} delta_s) / Delta with
/// Delta = sum of all scores — the non-causal one-scan normalization.
/// `t` is 1-based.
pub fn additive_global_decay(delta: &[f64], t: usize) -> Result<f64> {
    if delta.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
        return Err(Error::InvalidArgument {
            op: "additive_global_decay",
            msg: "delta must be nonnegative".into(),
        });
    }
    if t == 0 || t > delta.len() {
        return Err(Error::InvalidArgument {
            op: "additive_global_decay",
            msg: format!("t = {t} out of range 1..={}", delta.len()),
        });
    }
    let total: f64 = delta.iter().sum();
    if total == 0.0 {
        return Err(Error::InvalidArgument {
            op: "additive_global_decay",
            msg: "Delta (sum of scores) must be positive".into(),
        });
    }
    Ok(delta[..t - 1].iter().sum::<f64>() / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vec_tensor(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn scan_prefix_sum() {
        let spec = RecurrenceSpec::from_coefficients(vec![1.0, 1.0, 1.0]).unwrap();
        let y = scan(&spec, &vec_tensor(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 6.0]);
    }

    #[test]
    fn scan_impulse_response() {
        let spec = RecurrenceSpec::from_coefficients(vec![0.5, 0.5, 0.5]).unwrap();
        let y = scan(&spec, &vec_tensor(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn scan_additive_unit_scores() {
        // delta = [1,1,1] gives a = [0, 1/2, 2/3]; the Eq.-2 oracle has
        // c_ts = s/t, so y_t is the running mean times t... i.e. [1, 1.5, 2].
        let spec = RecurrenceSpec::additive(vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(spec.a(), &[0.0, 0.5, 2.0 / 3.0]);
        let y = scan(&spec, &vec_tensor(&[1.0, 1.0, 1.0])).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.5).abs() < 1e-15);
        assert!((y.data()[2] - 2.0).abs() < 1e-15);
        // direct check against c_ts = s/t
        let c = unroll(&spec);
        for t in 0..3 {
            for s in 0..=t {
                let expect = (s + 1) as f64 / (t + 1) as f64;
                assert!((c.get(t, s) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scan_length_mismatch() {
        let spec = RecurrenceSpec::from_coefficients(vec![1.0, 1.0]).unwrap();
        assert!(scan(&spec, &vec_tensor(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn unroll_products() {
        let spec = RecurrenceSpec::from_coefficients(vec![1.0, 0.5, 0.25]).unwrap();
        let c = unroll(&spec);
        assert_eq!(c.get(0, 0), 1.0);
        assert_eq!(c.get(1, 0), 0.5);
        assert_eq!(c.get(1, 1), 1.0);
        assert_eq!(c.get(2, 0), 0.125);
        assert_eq!(c.get(2, 1), 0.25);
        assert_eq!(c.get(2, 2), 1.0);
    }

    #[test]
    fn unroll_all_ones_is_summation_matrix() {
        let spec = RecurrenceSpec::from_coefficients(vec![1.0; 4]).unwrap();
        let c = unroll(&spec);
        for t in 0..4 {
            for s in 0..=t {
                assert_eq!(c.get(t, s), 1.0);
            }
        }
    }

    #[test]
    fn unroll_single_step() {
        let spec = RecurrenceSpec::from_coefficients(vec![0.3]).unwrap();
        let c = unroll(&spec);
        assert_eq!(c.n(), 1);
        assert_eq!(c.get(0, 0), 1.0);
    }

    #[test]
    fn representability_round_trip() {
        let spec = RecurrenceSpec::from_coefficients(vec![0.9, 0.4, 0.7, 1.0]).unwrap();
        let rep = is_recurrence_representable(&unroll(&spec), REPRESENTABILITY_TOL);
        assert!(rep.representable);
        let rec = rep.recovered_a.unwrap();
        for t in 1..4 {
            assert!((rec[t] - spec.a()[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn representability_rejects_broken_product() {
        // c21 = 0.5, c32 = 0.5, but c31 = 0.3 != 0.25.
        let mut c = vec![0.0; 9];
        c[0] = 1.0;
        c[3] = 0.5;
        c[4] = 1.0;
        c[6] = 0.3;
        c[7] = 0.5;
        c[8] = 1.0;
        let m = CoefficientMatrix::from_lower_triangular(3, c).unwrap();
        let rep = is_recurrence_representable(&m, 1e-9);
        assert!(!rep.representable);
        assert!((rep.max_deviation - 0.05).abs() < 1e-12);
    }

    #[test]
    fn identity_matrix_is_zero_decay() {
        let mut c = vec![0.0; 9];
        for t in 0..3 {
            c[t * 3 + t] = 1.0;
        }
        let m = CoefficientMatrix::from_lower_triangular(3, c).unwrap();
        let rep = is_recurrence_representable(&m, 1e-9);
        assert!(rep.representable);
        assert_eq!(rep.recovered_a.unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn global_decay_examples() {
        assert_eq!(additive_global_decay(&[1.0, 1.0, 1.0, 1.0], 3).unwrap(), 0.5);
        assert_eq!(additive_global_decay(&[1.0, 1.0, 1.0, 1.0], 1).unwrap(), 0.0);
        assert_eq!(additive_global_decay(&[0.0, 0.0, 0.0, 1.0], 4).unwrap(), 0.0);
        assert!(additive_global_decay(&[0.0, 0.0], 1).is_err());
        assert!(additive_global_decay(&[1.0], 2).is_err());
    }

    #[test]
    fn additive_validation() {
        assert!(RecurrenceSpec::additive(vec![0.0, 1.0]).is_err());
        assert!(RecurrenceSpec::additive(vec![1.0, -0.1]).is_err());
        assert!(RecurrenceSpec::multiplicative(vec![0.0, 0.5]).is_err());
        assert!(RecurrenceSpec::multiplicative(vec![1.1]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_recovers_coefficients(
            a in proptest::collection::vec(0.01f64..=1.0, 1..64)
        ) {
            let spec = RecurrenceSpec::from_coefficients(a.clone()).unwrap();
            let rep = is_recurrence_representable(&unroll(&spec), REPRESENTABILITY_TOL);
            prop_assert!(rep.representable);
            let rec = rep.recovered_a.unwrap();
            for t in 1..a.len() {
                prop_assert!((rec[t] - a[t]).abs() < 1e-12);
            }
        }

        #[test]
        fn scan_matches_unrolled_matrix(
            a in proptest::collection::vec(0.0f64..=1.0, 1..32),
            seed in 0u64..1000
        ) {
            let spec = RecurrenceSpec::from_coefficients(a.clone()).unwrap();
            let mut rng = crate::rng::Rng::new(seed);
            let x: Tensor<f64> = rng.uniform(&[a.len(), 4], -1.0, 1.0);
            let y1 = scan(&spec, &x).unwrap();
            let y2 = unroll(&spec).apply(&x).unwrap();
            prop_assert!(y1.max_abs_diff(&y2) < 1e-12);
        }

        #[test]
        fn additive_and_multiplicative_agree_on_shared_g(
            incr in proptest::collection::vec(0.01f64..=2.0, 1..48)
        ) {
            // Positive increasing g from positive increments.
            let mut g = Vec::with_capacity(incr.len());
            let mut acc = 0.0;
            for &d in &incr {
                acc += d;
                g.push(acc);
            }
            let delta = incr.clone();
            let mut rho = Vec::with_capacity(g.len());
            rho.push(1.0); // a_1 is arbitrary for multiplicative; unused downstream
            for t in 1..g.len() {
                rho.push(g[t - 1] / g[t]);
            }
            let add = RecurrenceSpec::additive(delta).unwrap();
            let mul = RecurrenceSpec::multiplicative(rho).unwrap();
            for t in 1..g.len() {
                prop_assert!((add.a()[t] - mul.a()[t]).abs() < 1e-12);
            }
        }

        #[test]
        fn generated_specs_respect_bounds(
            delta in proptest::collection::vec(0.0f64..=5.0, 1..48),
            rho in proptest::collection::vec(0.001f64..=1.0, 1..48)
        ) {
            let mut delta = delta;
            delta[0] = delta[0].max(0.5);
            let add = RecurrenceSpec::additive(delta).unwrap();
            for &a in add.a() {
                prop_assert!((0.0..=1.0).contains(&a));
            }
            let mul = RecurrenceSpec::multiplicative(rho).unwrap();
            for &a in mul.a() {
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}
