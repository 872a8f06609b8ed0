use mistlab::toy2d::{generate, run_toy_experiment, train_pair, ToyMethod, ToySpec};

fn main() {
    let ds = generate(&ToySpec { seed: 0, ..ToySpec::default() }).unwrap();
    let (f1, f2) = train_pair(&ds, (1, 2)).unwrap();
    let exp = run_toy_experiment(&ds, &f1, &f2, &ToyMethod::all(), None, 10, 5, 0).unwrap();
    println!("eps {:.3} alpha {:.3} triple {:?}", exp.epsilon, exp.alpha, exp.triple_point);
    for run in &exp.runs {
        println!("== {}", run.method);
        for p in run.trajectories.iter().take(3) {
            let s: Vec<String> = p
                .steps
                .iter()
                .map(|s| format!("({:.2},{:.2})f1={} f2={}", s.x, s.y, s.pred_f1, s.pred_f2))
                .collect();
            println!("  point {}: {}", p.point_id, s.join(" "));
        }
    }
}
