use mistlab::toy2d::{generate, train_pair_with, PairConfig, ToySpec};

fn boundary_angle(m: &mistlab::models::Classifier, a: usize, b: usize) -> f64 {
    let w = &m.params()[0].1;
    let wd = w.data();
    let dw = [wd[a] - wd[b], wd[3 + a] - wd[3 + b]];
    dw[1].atan2(dw[0])
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let frac: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.15);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    println!("epochs={epochs} frac={frac} lr={lr}");
    for seed in 0..5u64 {
        let ds = generate(&ToySpec { seed, ..ToySpec::default() }).unwrap();
        let pc = PairConfig { epochs, learning_rate: lr, subsample: frac };
        match train_pair_with(&ds, (seed * 2 + 1, seed * 2 + 2), &pc) {
            Ok((f1, f2)) => {
                let mut max_deg: f64 = 0.0;
                for (a, b) in [(0usize, 1usize), (0, 2), (1, 2)] {
                    let d = (boundary_angle(&f1, a, b) - boundary_angle(&f2, a, b)).abs();
                    let d = d.min(std::f64::consts::TAU - d).to_degrees();
                    max_deg = max_deg.max(d);
                }
                let acc1 = mistlab::models::accuracy(&f1, &ds).unwrap();
                let acc2 = mistlab::models::accuracy(&f2, &ds).unwrap();
                println!("seed {seed}: max boundary angle diff {max_deg:.2} deg, acc {acc1:.3}/{acc2:.3}");
            }
            Err(e) => println!("seed {seed}: {e}"),
        }
    }
}
