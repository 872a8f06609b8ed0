use mistlab::toy2d::{
    generate, nearest_boundary_distance, run_toy_experiment, train_pair_with, PairConfig,
    ToyMethod, ToySpec,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sigma: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let c: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.15);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(40);
    let frac: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.8);
    println!("sigma={sigma} c={c} epochs={epochs} frac={frac}");
    let mut ok_b = 0;
    let mut ok_c = 0;
    let mut wb_min = 1.0f64;
    for seed in 0..5u64 {
        let spec = ToySpec { sigma, min_margin: if sigma > 0.55 { -4.0 } else { 0.05 }, seed, ..ToySpec::default() };
        let ds = generate(&spec).unwrap();
        let pc = PairConfig { epochs, learning_rate: 0.2, subsample: frac };
        let (f1, f2) = match train_pair_with(&ds, (seed * 2 + 1, seed * 2 + 2), &pc) {
            Ok(p) => p,
            Err(e) => { println!("seed {seed}: {e}"); continue; }
        };
        // eps = c * p99 of category-I distances to f1's nearest own boundary
        let mut dists: Vec<f64> = (0..ds.len())
            .filter(|&i| ds.labels[i] == 0)
            .map(|i| nearest_boundary_distance(&f1, ds.images.sample_data(i), 0).unwrap())
            .collect();
        dists.sort_by(f64::total_cmp);
        let p99 = dists[((dists.len() - 1) as f64 * 0.99) as usize];
        let eps = c * p99;
        let exp =
            run_toy_experiment(&ds, &f1, &f2, &ToyMethod::all(), Some(eps), 10, 200, seed).unwrap();
        let (mi, ad, mist) = (&exp.runs[0], &exp.runs[1], &exp.runs[2]);
        let b = mist.transfer_rate >= ad.transfer_rate
            && ad.transfer_rate >= mi.transfer_rate
            && mist.transfer_rate - mi.transfer_rate >= 0.05;
        let cc = mist.mean_dist < ad.mean_dist && ad.mean_dist < mi.mean_dist;
        ok_b += b as u32;
        ok_c += cc as u32;
        wb_min = wb_min.min(mi.whitebox_rate).min(ad.whitebox_rate).min(mist.whitebox_rate);
        println!(
            "seed {seed} eps {:.2} | wb {:.3}/{:.3}/{:.3} | tr {:.3}/{:.3}/{:.3} | d {:.2}/{:.2}/{:.2} | b={b} c={cc}",
            exp.epsilon,
            mi.whitebox_rate, ad.whitebox_rate, mist.whitebox_rate,
            mi.transfer_rate, ad.transfer_rate, mist.transfer_rate,
            mi.mean_dist, ad.mean_dist, mist.mean_dist,
        );
    }
    println!("b ok {ok_b}/5, c ok {ok_c}/5, min wb {wb_min:.3}");
}
