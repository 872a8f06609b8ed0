use mistlab::toy2d::{
    boundary_intersection, generate, nearest_boundary_distance, run_toy_experiment,
    train_pair_with, PairConfig, ToyMethod, ToySpec,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sigma: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let c: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.8);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let spec = ToySpec { sigma, seed, ..ToySpec::default() };
    let ds = generate(&spec).unwrap();
    let pc = PairConfig { epochs: 40, learning_rate: 0.2, subsample: 0.8 };
    let (f1, f2) = train_pair_with(&ds, (seed * 2 + 1, seed * 2 + 2), &pc).unwrap();
    let apex1 = boundary_intersection(&f1).unwrap();
    let apex2 = boundary_intersection(&f2).unwrap();
    println!("apex f1 ({:.3},{:.3})  f2 ({:.3},{:.3})  shift {:.3}", apex1.0, apex1.1, apex2.0, apex2.1,
        ((apex1.0-apex2.0).powi(2)+(apex1.1-apex2.1).powi(2)).sqrt());
    let mut dists: Vec<f64> = (0..ds.len())
        .filter(|&i| ds.labels[i] == 0)
        .map(|i| nearest_boundary_distance(&f1, ds.images.sample_data(i), 0).unwrap())
        .collect();
    dists.sort_by(f64::total_cmp);
    let p99 = dists[((dists.len() - 1) as f64 * 0.99) as usize];
    let eps = c * p99;
    println!("p50 {:.3} p99 {:.3} eps {:.3}", dists[dists.len()/2], p99, eps);
    let exp = run_toy_experiment(&ds, &f1, &f2, &ToyMethod::all(), Some(eps), 10, 200, seed).unwrap();
    for run in &exp.runs {
        let mut fail_wb = 0;
        let mut fail_tr = Vec::new();
        for p in &run.trajectories {
            let last = p.steps.last().unwrap();
            if last.pred_f1 == 0 {
                fail_wb += 1;
            } else if last.pred_f2 == 0 {
                // transfer failure: record landing, f1-verdict, depth proxy
                let depth = nearest_boundary_distance(&f1, &[last.x, last.y], last.pred_f1).unwrap();
                let r = ((last.x - apex1.0).powi(2) + (last.y - apex1.1).powi(2)).sqrt();
                fail_tr.push(format!("({:.2},{:.2}) f1={} depth {:.2} r {:.2}", last.x, last.y, last.pred_f1, depth, r));
            }
        }
        println!("== {}  wb_fail {}  tr_fail {}", run.method, fail_wb, fail_tr.len());
        for f in fail_tr.iter().take(8) {
            println!("   {f}");
        }
    }
}
