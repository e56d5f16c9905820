use lightnet::bench::{bench_scans, ratio_table, BenchOptions};

fn main() {
    let opts = BenchOptions {
        n_list: vec![256, 1024, 4096, 16384],
        d: 64,
        reps: 5,
        chunk: 64,
        ..Default::default()
    };
    let records = bench_scans(&opts).unwrap();
    for r in &records {
        println!("{}", r.csv_row());
    }
    for (n, f, b, t) in ratio_table(&records) {
        println!("n={n} fwd_ratio={f:.2} bwd_ratio={b:.2} total_ratio={t:.2}");
    }
}
