//! Timing harness for the non-causal evaluation strategies: the one-scan
//! right-product form, the two-scan form built on the chunked kernel (the
//! realistic fast implementation of a causal scan), and the causal chunked
//! scan itself.
//!
//! Single-threaded by contract. Times are medians over `reps` runs after one
//! warmup; absolute milliseconds are machine-dependent, the object of
//! interest is the two-scan / one-scan ratio and its growth with n.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scan::{chunked_backward_kernel, chunked_forward_kernel, reverse_rows};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, DType, Scalar, Tensor};

pub const MIN_REPS: usize = 5;

#[derive(Debug, Clone)]
pub struct TimingRecord {
    pub variant: &'static str,
    pub n: usize,
    pub d: usize,
    pub dtype: DType,
    pub reps: usize,
    pub forward_ms: f64,
    pub backward_ms: f64,
}

impl TimingRecord {
    pub const CSV_HEADER: &'static str = "variant,n,d,dtype,reps,forward_ms,backward_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.variant, self.n, self.d, self.dtype, self.reps, self.forward_ms, self.backward_ms
        )
    }

    pub fn total_ms(&self) -> f64 {
        self.forward_ms + self.backward_ms
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub n_list: Vec<usize>,
    pub d: usize,
    pub dtype: DType,
    pub reps: usize,
    pub chunk: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            n_list: vec![256, 1024, 4096, 16384],
            d: 64,
            dtype: DType::F32,
            reps: 7,
            chunk: 64,
            seed: 1,
        }
    }
}

/// Variants measured per sequence length, in record order.
pub const VARIANTS: [&str; 3] = ["one_scan", "two_scan", "causal_chunked"];

pub fn bench_scans(opts: &BenchOptions) -> Result<Vec<TimingRecord>> {
    if opts.reps < MIN_REPS {
        return Err(Error::InvalidArgument {
            op: "bench_scans",
            msg: format!("reps {} below the contract minimum {MIN_REPS}", opts.reps),
        });
    }
    if opts.chunk == 0 {
        return Err(Error::InvalidArgument {
            op: "bench_scans",
            msg: "chunk must be positive".into(),
        });
    }
    match opts.dtype {
        DType::F32 => bench_typed::<f32>(opts),
        DType::F64 => bench_typed::<f64>(opts),
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn time_ms(reps: usize, mut f: impl FnMut()) -> f64 {
    f(); // warmup
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f();
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    median(times)
}

fn bench_typed<T: Scalar>(opts: &BenchOptions) -> Result<Vec<TimingRecord>> {
    let mut rng = Rng::new(opts.seed);
    let d = opts.d;
    let mut records = Vec::new();
    for &n in &opts.n_list {
        let chunk = opts.chunk.min(n);
        let q: Tensor<T> = rng.uniform(&[n, d], -1.0, 1.0);
        let k: Tensor<T> = rng.uniform(&[n, d], -1.0, 1.0);
        let v: Tensor<T> = rng.uniform(&[n, d], -1.0, 1.0);
        let go: Tensor<T> = rng.uniform(&[n, d], -1.0, 1.0);
        let lam: Tensor<T> = rng.uniform(&[n], 0.9, 1.0);
        let (q, k, v, go, lam) = (q.data(), k.data(), v.data(), go.data(), lam.data());

        // one scan: KV = K^T V, O = Q KV
        let mut kv = vec![T::zero(); d * d];
        let mut out = vec![T::zero(); n * d];
        let fwd_one = time_ms(opts.reps, || {
            kv.iter_mut().for_each(|x| *x = T::zero());
            matmul_tn_into(k, v, n, d, d, &mut kv);
            out.iter_mut().for_each(|x| *x = T::zero());
            matmul_into(q, &kv, n, d, d, &mut out);
            std::hint::black_box(&out);
        });
        let mut gq = vec![T::zero(); n * d];
        let mut gk = vec![T::zero(); n * d];
        let mut gv = vec![T::zero(); n * d];
        let mut gkv = vec![T::zero(); d * d];
        let bwd_one = time_ms(opts.reps, || {
            gq.iter_mut().for_each(|x| *x = T::zero());
            matmul_nt_into(go, &kv, n, d, d, &mut gq);
            gkv.iter_mut().for_each(|x| *x = T::zero());
            matmul_tn_into(q, go, n, d, d, &mut gkv);
            gk.iter_mut().for_each(|x| *x = T::zero());
            matmul_nt_into(v, &gkv, n, d, d, &mut gk);
            gv.iter_mut().for_each(|x| *x = T::zero());
            matmul_into(k, &gkv, n, d, d, &mut gv);
            std::hint::black_box((&gq, &gk, &gv));
        });
        records.push(TimingRecord {
            variant: VARIANTS[0],
            n,
            d,
            dtype: T::DTYPE,
            reps: opts.reps,
            forward_ms: fwd_one,
            backward_ms: bwd_one,
        });

        // two scan: forward chunked pass plus a reversed chunked pass.
        let mut out_f = vec![T::zero(); n * d];
        let mut bounds_f: Vec<Vec<T>> = Vec::new();
        let mut bounds_b: Vec<Vec<T>> = Vec::new();
        let mut qr = Vec::new();
        let mut kr = Vec::new();
        let mut vr = Vec::new();
        let mut lr = Vec::new();
        let mut out_b = vec![T::zero(); n * d];
        let mut total = vec![T::zero(); n * d];
        let fwd_two = time_ms(opts.reps, || {
            out_f.iter_mut().for_each(|x| *x = T::zero());
            bounds_f.clear();
            chunked_forward_kernel(q, k, v, lam, n, d, chunk, &mut out_f, Some(&mut bounds_f));
            qr = reverse_rows(q, n, d);
            kr = reverse_rows(k, n, d);
            vr = reverse_rows(v, n, d);
            lr = reverse_rows(lam, n, 1);
            out_b.iter_mut().for_each(|x| *x = T::zero());
            bounds_b.clear();
            chunked_forward_kernel(&qr, &kr, &vr, &lr, n, d, chunk, &mut out_b, Some(&mut bounds_b));
            let rev = reverse_rows(&out_b, n, d);
            for ((t, &a), &b) in total.iter_mut().zip(&out_f).zip(&rev) {
                *t = a + b;
            }
            std::hint::black_box(&total);
        });
        let mut gq2 = vec![T::zero(); n * d];
        let mut gk2 = vec![T::zero(); n * d];
        let mut gv2 = vec![T::zero(); n * d];
        let bwd_two = time_ms(opts.reps, || {
            gq.iter_mut().for_each(|x| *x = T::zero());
            gk.iter_mut().for_each(|x| *x = T::zero());
            gv.iter_mut().for_each(|x| *x = T::zero());
            chunked_backward_kernel(q, k, v, lam, n, d, chunk, &bounds_f, go, &mut gq, &mut gk, &mut gv);
            let gor = reverse_rows(go, n, d);
            gq2.iter_mut().for_each(|x| *x = T::zero());
            gk2.iter_mut().for_each(|x| *x = T::zero());
            gv2.iter_mut().for_each(|x| *x = T::zero());
            chunked_backward_kernel(
                &qr, &kr, &vr, &lr, n, d, chunk, &bounds_b, &gor, &mut gq2, &mut gk2, &mut gv2,
            );
            let rq = reverse_rows(&gq2, n, d);
            for (a, &b) in gq.iter_mut().zip(&rq) {
                *a += b;
            }
            let rk = reverse_rows(&gk2, n, d);
            for (a, &b) in gk.iter_mut().zip(&rk) {
                *a += b;
            }
            let rv = reverse_rows(&gv2, n, d);
            for (a, &b) in gv.iter_mut().zip(&rv) {
                *a += b;
            }
            std::hint::black_box((&gq, &gk, &gv));
        });
        records.push(TimingRecord {
            variant: VARIANTS[1],
            n,
            d,
            dtype: T::DTYPE,
            reps: opts.reps,
            forward_ms: fwd_two,
            backward_ms: bwd_two,
        });

        // causal chunked scan alone.
        let mut out_c = vec![T::zero(); n * d];
        let mut bounds_c: Vec<Vec<T>> = Vec::new();
        let fwd_causal = time_ms(opts.reps, || {
            out_c.iter_mut().for_each(|x| *x = T::zero());
            bounds_c.clear();
            chunked_forward_kernel(q, k, v, lam, n, d, chunk, &mut out_c, Some(&mut bounds_c));
            std::hint::black_box(&out_c);
        });
        let bwd_causal = time_ms(opts.reps, || {
            gq.iter_mut().for_each(|x| *x = T::zero());
            gk.iter_mut().for_each(|x| *x = T::zero());
            gv.iter_mut().for_each(|x| *x = T::zero());
            chunked_backward_kernel(q, k, v, lam, n, d, chunk, &bounds_c, go, &mut gq, &mut gk, &mut gv);
            std::hint::black_box((&gq, &gk, &gv));
        });
        records.push(TimingRecord {
            variant: VARIANTS[2],
            n,
            d,
            dtype: T::DTYPE,
            reps: opts.reps,
            forward_ms: fwd_causal,
            backward_ms: bwd_causal,
        });
    }
    Ok(records)
}

pub fn to_csv(records: &[TimingRecord]) -> String {
    let mut s = String::from(TimingRecord::CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// (n, forward ratio, backward ratio, total ratio) of two-scan over one-scan.
pub fn ratio_table(records: &[TimingRecord]) -> Vec<(usize, f64, f64, f64)> {
    let mut out = Vec::new();
    for r1 in records.iter().filter(|r| r.variant == "one_scan") {
        if let Some(r2) = records
            .iter()
            .find(|r| r.variant == "two_scan" && r.n == r1.n)
        {
            out.push((
                r1.n,
                r2.forward_ms / r1.forward_ms,
                r2.backward_ms / r1.backward_ms,
                r2.total_ms() / r1.total_ms(),
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reps_below_minimum_are_rejected() {
        let opts = BenchOptions { reps: 1, n_list: vec![16], ..Default::default() };
        assert!(bench_scans(&opts).is_err());
    }

    #[test]
    fn record_count_is_three_per_length() {
        let opts = BenchOptions {
            n_list: vec![32, 64],
            d: 8,
            reps: 5,
            chunk: 16,
            ..Default::default()
        };
        let records = bench_scans(&opts).unwrap();
        assert_eq!(records.len(), 6);
        let csv = to_csv(&records);
        assert!(csv.starts_with("variant,n,d,dtype,reps,forward_ms,backward_ms\n"));
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.contains("one_scan,32,8,f32,5,"));
    }

    #[test]
    fn ratio_table_covers_all_lengths() {
        let opts = BenchOptions { n_list: vec![32, 64], d: 8, reps: 5, chunk: 16, ..Default::default() };
        let records = bench_scans(&opts).unwrap();
        let table = ratio_table(&records);
        assert_eq!(table.len(), 2);
        assert!(table.iter().all(|&(_, f, b, t)| f > 0.0 && b > 0.0 && t > 0.0));
    }
}
