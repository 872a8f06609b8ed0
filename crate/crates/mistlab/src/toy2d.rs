//! The two-dimensional three-class experiment.
//!
//! Three Gaussian blobs in a triangle, two independently trained linear
//! models f1/f2, and attack trajectories for Category-I points. The
//! experiment records white-box fooling on f1, transfer to f2, and the
//! mean distance of final iterates to f1's boundary triple point, the
//! single point where all pairwise decision boundaries meet.

use rand::Rng;

use crate::attack::{run_attack, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{train, Architecture, Classifier, Model, TrainConfig};
use crate::rng;
use crate::tensor::Tensor;
use crate::transforms::EstimatorSpec;

#[derive(Clone, Debug)]
pub struct ToySpec {
    pub means: [(f64, f64); 3],
    /// Isotropic standard deviation shared by the three blobs.
    pub sigma: f64,
    pub per_class: usize,
    /// Required worst-pair separation margin; negative values permit that
    /// much overlap depth along the mean-difference direction.
    pub min_margin: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            means: [(2.0, 0.0), (-1.0, 2.0), (-1.0, -2.0)],
            sigma: 0.5,
            per_class: 200,
            min_margin: 0.05,
            seed: 0,
        }
    }
}

/// Worst-case pairwise separation: for each class pair, project both
/// classes onto the direction between their means and take the gap
/// between the extreme projections. Negative gap = overlap depth.
pub fn separation_margin(ds: &Dataset) -> f64 {
    let mut margin = f64::INFINITY;
    for a in 0..ds.num_classes {
        for b in (a + 1)..ds.num_classes {
            let pa: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels[i] == a)
                .map(|i| ds.images.sample_data(i))
                .collect();
            let pb: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels[i] == b)
                .map(|i| ds.images.sample_data(i))
                .collect();
            if pa.is_empty() || pb.is_empty() {
                continue;
            }
            let mean = |pts: &[&[f64]]| {
                let n = pts.len() as f64;
                let (sx, sy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
                (sx / n, sy / n)
            };
            let ma = mean(&pa);
            let mb = mean(&pb);
            let (dx, dy) = (mb.0 - ma.0, mb.1 - ma.1);
            let len = (dx * dx + dy * dy).sqrt();
            if len == 0.0 {
                return f64::NEG_INFINITY;
            }
            let proj = |p: &[f64]| (p[0] * dx + p[1] * dy) / len;
            let max_a = pa.iter().map(|p| proj(p)).fold(f64::NEG_INFINITY, f64::max);
            let min_b = pb.iter().map(|p| proj(p)).fold(f64::INFINITY, f64::min);
            margin = margin.min(min_b - max_a);
        }
    }
    margin
}

/// Sample the three-blob dataset, regenerating with derived seeds until
/// the separation margin is reached (at most 100 retries).
pub fn generate(spec: &ToySpec) -> Result<Dataset> {
    for (i, &(ax, ay)) in spec.means.iter().enumerate() {
        for &(bx, by) in spec.means.iter().skip(i + 1) {
            if (ax - bx).abs() < 1e-12 && (ay - by).abs() < 1e-12 {
                return Err(Error::InvalidArgument("toy class means must be pairwise distinct".into()));
            }
        }
    }
    if spec.sigma <= 0.0 || spec.per_class == 0 {
        return Err(Error::InvalidArgument("toy sigma and per-class count must be positive".into()));
    }
    const RETRIES: usize = 100;
    for attempt in 0..RETRIES {
        let mut r = rng::stream(spec.seed, &[0x702d, attempt as u64]);
        let n = 3 * spec.per_class;
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for class in 0..3 {
            let (mx, my) = spec.means[class];
            for _ in 0..spec.per_class {
                // Box-Muller
                let u1: f64 = r.gen_range(1e-12..1.0);
                let u2: f64 = r.gen_range(0.0..std::f64::consts::TAU);
                let radius = (-2.0 * u1.ln()).sqrt();
                data.push(mx + spec.sigma * radius * u2.cos());
                data.push(my + spec.sigma * radius * u2.sin());
                labels.push(class);
            }
        }
        let ds = Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 3)?;
        if separation_margin(&ds) >= spec.min_margin {
            return Ok(ds);
        }
    }
    Err(Error::SeparabilityUnreachable { retries: RETRIES })
}

/// Knobs for how the f1/f2 pair is trained.
#[derive(Clone, Copy, Debug)]
pub struct PairConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Fraction of the dataset each model trains on (seeded subsample).
    pub subsample: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig { epochs: 40, learning_rate: 0.2, subsample: 0.8 }
    }
}

/// Train two linear models on different subsamples with different seeds.
/// Both must reach held-out accuracy 0.95 and must not coincide.
pub fn train_pair(ds: &Dataset, seeds: (u64, u64)) -> Result<(Classifier, Classifier)> {
    train_pair_with(ds, seeds, &PairConfig::default())
}

pub fn train_pair_with(
    ds: &Dataset,
    seeds: (u64, u64),
    pc: &PairConfig,
) -> Result<(Classifier, Classifier)> {
    let mut models = Vec::with_capacity(2);
    for &seed in &[seeds.0, seeds.1] {
        let mut r = rng::stream(seed, &[0x7bab]);
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        for i in (1..idx.len()).rev() {
            let j = r.gen_range(0..=i);
            idx.swap(i, j);
        }
        let keep = ((ds.len() as f64) * pc.subsample) as usize;
        let sub = ds.select(&idx[..keep.max(1)]);
        let out = train(
            &sub,
            Architecture::LinearSoftmax,
            &TrainConfig {
                epochs: pc.epochs,
                learning_rate: pc.learning_rate,
                seed,
                ..TrainConfig::default()
            },
        )?;
        if out.heldout_accuracy < 0.95 {
            return Err(Error::RuntimeCheck(format!(
                "toy model (seed {seed}) reached only {:.3} held-out accuracy",
                out.heldout_accuracy
            )));
        }
        models.push(out.model);
    }
    let f2 = models.pop().expect("two models");
    let f1 = models.pop().expect("two models");
    let dist: f64 = f1
        .params()
        .iter()
        .zip(f2.params())
        .map(|((_, a), (_, b))| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        })
        .sum::<f64>()
        .sqrt();
    if dist == 0.0 {
        return Err(Error::RuntimeCheck("toy model pair collapsed to identical parameters".into()));
    }
    Ok((f1, f2))
}

fn class_columns(model: &Classifier) -> Result<([[f64; 2]; 3], [f64; 3])> {
    let w = &model.params()[0].1;
    let b = &model.params()[1].1;
    if w.shape() != [2, 3] || b.shape() != [3] {
        return Err(Error::ShapeMismatch(format!(
            "boundary analysis needs a 2-D 3-class linear model, got W {:?}",
            w.shape()
        )));
    }
    let wd = w.data();
    let mut cols = [[0.0; 2]; 3];
    for class in 0..3 {
        cols[class] = [wd[class], wd[3 + class]];
    }
    Ok((cols, [b.data()[0], b.data()[1], b.data()[2]]))
}

/// The triple point of a 3-class linear model: the solution of the
/// class-1/class-2 and class-0/class-1 boundary equations, where all
/// pairwise boundaries meet.
pub fn boundary_intersection(model: &Classifier) -> Result<(f64, f64)> {
    let (w, b) = class_columns(model)?;
    // rows: (w1 - w2) . x = b2 - b1 ; (w0 - w1) . x = b1 - b0
    let a11 = w[1][0] - w[2][0];
    let a12 = w[1][1] - w[2][1];
    let r1 = b[2] - b[1];
    let a21 = w[0][0] - w[1][0];
    let a22 = w[0][1] - w[1][1];
    let r2 = b[1] - b[0];
    let det = a11 * a22 - a12 * a21;
    if det.abs() < 1e-12 {
        return Err(Error::SingularSystem("pairwise decision boundaries are parallel".into()));
    }
    Ok(((r1 * a22 - a12 * r2) / det, (a11 * r2 - r1 * a21) / det))
}

/// Signed residuals of the two defining boundary equations at a point.
pub fn boundary_residuals(model: &Classifier, point: (f64, f64)) -> Result<(f64, f64)> {
    let (w, b) = class_columns(model)?;
    let e1 = (w[1][0] - w[2][0]) * point.0 + (w[1][1] - w[2][1]) * point.1 + (b[1] - b[2]);
    let e2 = (w[0][0] - w[1][0]) * point.0 + (w[0][1] - w[1][1]) * point.1 + (b[0] - b[1]);
    Ok((e1, e2))
}

/// Distance from a point to the nearest decision boundary of its own
/// class region, i.e. the closest line where the class logit ties with
/// another class's logit.
pub fn nearest_boundary_distance(model: &Classifier, point: &[f64], class: usize) -> Result<f64> {
    let (w, b) = class_columns(model)?;
    let mut best = f64::INFINITY;
    for c in 0..3 {
        if c == class {
            continue;
        }
        let dw = [w[class][0] - w[c][0], w[class][1] - w[c][1]];
        let db = b[class] - b[c];
        let norm = (dw[0] * dw[0] + dw[1] * dw[1]).sqrt();
        if norm > 0.0 {
            best = best.min((dw[0] * point[0] + dw[1] * point[1] + db).abs() / norm);
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyMethod {
    MiFgsm,
    Admix,
    Mist,
}

impl ToyMethod {
    pub fn all() -> [ToyMethod; 3] {
        [ToyMethod::MiFgsm, ToyMethod::Admix, ToyMethod::Mist]
    }

    pub fn name(&self) -> &'static str {
        match self {
            ToyMethod::MiFgsm => "mi-fgsm",
            ToyMethod::Admix => "admix",
            ToyMethod::Mist => "mist",
        }
    }

    /// Toy estimator configurations: the scale ladder is disregarded and
    /// both sampling attacks use five mixed points per iteration.
    fn estimator(&self) -> Vec<EstimatorSpec> {
        match self {
            ToyMethod::MiFgsm => vec![EstimatorSpec::Identity],
            ToyMethod::Admix => {
                vec![EstimatorSpec::Admix { m2: 5, eta: 0.2, with_scale: None }]
            }
            ToyMethod::Mist => vec![EstimatorSpec::Mist {
                n: 5,
                lambda_min: 0.2,
                shift_enabled: false,
                addend_enabled: false,
                fixed_lambda: None,
            }],
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub pred_f1: usize,
    pub pred_f2: usize,
}

#[derive(Clone, Debug)]
pub struct PointTrajectory {
    pub point_id: usize,
    pub steps: Vec<TrajectoryStep>,
}

#[derive(Clone, Debug)]
pub struct MethodRun {
    pub method: String,
    pub whitebox_rate: f64,
    pub transfer_rate: f64,
    pub mean_dist: f64,
    pub trajectories: Vec<PointTrajectory>,
}

#[derive(Clone, Debug)]
pub struct ToyExperiment {
    pub epsilon: f64,
    pub alpha: f64,
    pub triple_point: (f64, f64),
    pub runs: Vec<MethodRun>,
}

/// Attack `n_points` Category-I samples on f1 and evaluate against f2.
///
/// The budget defaults to 1.5x the median distance from the attacked
/// points to f1's nearest boundary. MIST attacks a joint batch that also
/// carries the Category-II/III points so its in-batch mixing partners
/// come from the other categories; summaries cover the Category-I points.
#[allow(clippy::too_many_arguments)]
pub fn run_toy_experiment(
    ds: &Dataset,
    f1: &Classifier,
    f2: &Classifier,
    methods: &[ToyMethod],
    epsilon: Option<f64>,
    iterations: usize,
    n_points: usize,
    seed: u64,
) -> Result<ToyExperiment> {
    let preds_f1 = f1.predict(&ds.images)?;
    let preds_f2 = f2.predict(&ds.images)?;
    let mut cat1: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.labels[i] == 0 && preds_f1[i] == 0 && preds_f2[i] == 0)
        .collect();
    if cat1.is_empty() {
        return Err(Error::EmptyBatch);
    }
    // seeded subset when more candidates than requested
    let mut pick_rng = rng::stream(seed, &[0x901c7]);
    for i in (1..cat1.len()).rev() {
        let j = pick_rng.gen_range(0..=i);
        cat1.swap(i, j);
    }
    cat1.truncate(n_points.max(1));
    cat1.sort_unstable();
    let attacked = ds.select(&cat1);

    let epsilon = match epsilon {
        Some(e) => e,
        None => {
            let mut dists: Vec<f64> = attacked
                .images
                .data()
                .chunks(2)
                .map(|p| nearest_boundary_distance(f1, p, 0))
                .collect::<Result<_>>()?;
            dists.sort_by(f64::total_cmp);
            let median = dists[dists.len() / 2];
            1.5 * median
        }
    };
    let alpha = epsilon / iterations as f64;
    let triple_point = boundary_intersection(f1)?;

    let others: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] != 0).collect();
    let mut runs = Vec::with_capacity(methods.len());
    for method in methods {
        let cfg = AttackConfig {
            epsilon,
            iterations,
            alpha: None,
            momentum: 1.0,
            range: (f64::NEG_INFINITY, f64::MAX),
            estimator: method.estimator(),
            seed,
            log_trajectory: true,
        };
        // plain coordinates are unbounded; widen the clamp range
        let cfg = AttackConfig { range: (-1e9, 1e9), ..cfg };
        let (batch, labels) = match method {
            ToyMethod::Mist => {
                let mut idx = cat1.clone();
                idx.extend_from_slice(&others);
                let joint = ds.select(&idx);
                (joint.images, joint.labels)
            }
            _ => (attacked.images.clone(), attacked.labels.clone()),
        };
        let partners = matches!(method, ToyMethod::Admix).then_some(ds);
        let adv = run_attack(f1, &batch, &labels, &cfg, partners, 0)?;
        let track = adv.trajectory.as_ref().expect("trajectory logging enabled");

        // per-iterate predictions for the Category-I rows
        let k = cat1.len();
        let mut per_point: Vec<PointTrajectory> = (0..k)
            .map(|p| PointTrajectory { point_id: p, steps: Vec::with_capacity(track.len()) })
            .collect();
        for (t, x_t) in track.iter().enumerate() {
            let head: Vec<usize> = (0..k).collect();
            let sub = Tensor::stack(&head.iter().map(|&i| x_t.sample(i)).collect::<Vec<_>>())?;
            let p1 = f1.predict(&sub)?;
            let p2 = f2.predict(&sub)?;
            for p in 0..k {
                let coords = sub.sample_data(p);
                per_point[p].steps.push(TrajectoryStep {
                    t,
                    x: coords[0],
                    y: coords[1],
                    pred_f1: p1[p],
                    pred_f2: p2[p],
                });
            }
        }

        let finals: Vec<&TrajectoryStep> =
            per_point.iter().map(|p| p.steps.last().expect("nonempty trajectory")).collect();
        let whitebox =
            finals.iter().filter(|s| s.pred_f1 != 0).count() as f64 / k as f64;
        let transfer =
            finals.iter().filter(|s| s.pred_f2 != 0).count() as f64 / k as f64;
        let mean_dist = finals
            .iter()
            .map(|s| ((s.x - triple_point.0).powi(2) + (s.y - triple_point.1).powi(2)).sqrt())
            .sum::<f64>()
            / k as f64;

        runs.push(MethodRun {
            method: method.name().to_string(),
            whitebox_rate: whitebox,
            transfer_rate: transfer,
            mean_dist,
            trajectories: per_point,
        });
    }

    Ok(ToyExperiment { epsilon, alpha, triple_point, runs })
}

impl ToyExperiment {
    /// `method,point_id,t,x,y,pred_f1,pred_f2` rows.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("method,point_id,t,x,y,pred_f1,pred_f2\n");
        for run in &self.runs {
            for p in &run.trajectories {
                for s in &p.steps {
                    out.push_str(&format!(
                        "{},{},{},{:.6},{:.6},{},{}\n",
                        run.method, p.point_id, s.t, s.x, s.y, s.pred_f1, s.pred_f2
                    ));
                }
            }
        }
        out
    }

    /// `method,whitebox_rate,transfer_rate,mean_dist` rows.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,whitebox_rate,transfer_rate,mean_dist\n");
        for run in &self.runs {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4}\n",
                run.method, run.whitebox_rate, run.transfer_rate, run.mean_dist
            ));
        }
        out
    }
}
