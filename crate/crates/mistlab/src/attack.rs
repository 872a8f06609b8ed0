//! The iterative momentum attack: estimator gradient, L1-normalized
//! momentum accumulation, sign step, and projection onto the epsilon
//! ball and the valid input range.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Model, PassCounter};
use crate::tensor::Tensor;
use crate::transforms::{compose, EstimateContext, Estimator, EstimatorSpec};

#[derive(Clone, Debug)]
pub struct AttackConfig {
    /// L-infinity budget in the input's native units.
    pub epsilon: f64,
    /// Iteration count T.
    pub iterations: usize,
    /// Step size; defaults to epsilon / T.
    pub alpha: Option<f64>,
    /// Momentum decay mu.
    pub momentum: f64,
    /// Valid input range (lo, hi).
    pub range: (f64, f64),
    /// Estimator composition.
    pub estimator: Vec<EstimatorSpec>,
    pub seed: u64,
    /// Record every iterate x_t, t = 0..=T.
    pub log_trajectory: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 16.0 / 255.0,
            iterations: 10,
            alpha: None,
            momentum: 1.0,
            range: (0.0, 1.0),
            estimator: vec![EstimatorSpec::Identity],
            seed: 0,
            log_trajectory: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iteration count must be >= 1".into()));
        }
        if self.momentum < 0.0 {
            return Err(Error::InvalidArgument(format!("momentum must be >= 0, got {}", self.momentum)));
        }
        if self.range.0 >= self.range.1 {
            return Err(Error::InvalidArgument(format!(
                "invalid range ({}, {})",
                self.range.0, self.range.1
            )));
        }
        if let Some(a) = self.alpha {
            if a <= 0.0 {
                return Err(Error::InvalidArgument(format!("alpha must be > 0, got {a}")));
            }
        }
        Ok(())
    }

    pub fn effective_alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / self.iterations as f64)
    }

    pub fn build_estimator(&self) -> Result<Estimator> {
        compose(&self.estimator)
    }
}

/// A finished attack: clean inputs, adversarial outputs, and the pass
/// instrumentation accumulated along the way.
#[derive(Clone, Debug)]
pub struct AdversarialBatch {
    pub clean: Tensor,
    pub adversarial: Tensor,
    pub labels: Vec<usize>,
    pub epsilon: f64,
    /// Iterates x_0 .. x_T when trajectory logging was requested.
    pub trajectory: Option<Vec<Tensor>>,
    pub counter: PassCounter,
}

/// g_{t+1} = mu * g_t + g_bar / ||g_bar||_1 with a per-sample L1 norm.
/// A zero-norm gradient contributes nothing.
pub fn momentum_step(g_t: &Tensor, g_bar: &Tensor, mu: f64) -> Tensor {
    let norms = g_bar.l1_per_sample();
    let inv: Vec<f64> = norms.iter().map(|&n| if n > 0.0 { 1.0 / n } else { 0.0 }).collect();
    let normalized = g_bar.scale_per_sample(&inv);
    g_t.scale(mu).add(&normalized).expect("momentum shapes match")
}

/// x_{t+1} = clip_range(clip_ball(x_t + alpha * sign(g))), with sign(0)=0.
pub fn apply_step(
    x_t: &Tensor,
    g: &Tensor,
    alpha: f64,
    x_clean: &Tensor,
    epsilon: f64,
    range: (f64, f64),
) -> Tensor {
    let stepped = x_t.add(&g.sign().scale(alpha)).expect("step shapes match");
    let clipped = stepped
        .zip(x_clean, |v, c| v.clamp(c - epsilon, c + epsilon))
        .expect("ball shapes match");
    clipped.clamp(range.0, range.1)
}

/// Run the full iterative attack on one batch. Deterministic given the
/// config seed and batch id; batches may run concurrently.
pub fn run_attack(
    model: &dyn Model,
    x_clean: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    partners: Option<&Dataset>,
    batch_id: u64,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    if x_clean.batch_len() == 0 {
        return Err(Error::EmptyBatch);
    }
    let estimator = cfg.build_estimator()?;
    let alpha = cfg.effective_alpha();
    let mut counter = PassCounter::default();
    let mut momentum = Tensor::zeros(x_clean.shape());
    let mut x = x_clean.clone();
    let mut trajectory = cfg.log_trajectory.then(|| vec![x.clone()]);

    for t in 0..cfg.iterations {
        let ctx = EstimateContext {
            seed: cfg.seed,
            batch_id,
            iteration: t as u64,
            partners,
        };
        let g_bar = estimator.estimate(model, &x, labels, &ctx, &mut counter)?;
        if !g_bar.all_finite() {
            return Err(Error::NonFiniteGradient { iteration: t });
        }
        momentum = momentum_step(&momentum, &g_bar, cfg.momentum);
        x = apply_step(&x, &momentum, alpha, x_clean, cfg.epsilon, cfg.range);
        if let Some(tr) = trajectory.as_mut() {
            tr.push(x.clone());
        }
    }

    Ok(AdversarialBatch {
        clean: x_clean.clone(),
        adversarial: x,
        labels: labels.to_vec(),
        epsilon: cfg.epsilon,
        trajectory,
        counter,
    })
}

impl AdversarialBatch {
    /// Largest per-sample L-infinity distance from the clean inputs.
    pub fn max_perturbation(&self) -> f64 {
        self.adversarial
            .linf_per_sample(&self.clean)
            .into_iter()
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{train, Architecture, TrainConfig};
    use crate::rng;
    use rand::Rng;

    #[test]
    fn momentum_step_examples() {
        let zero = Tensor::zeros(&[1, 2]);
        let g_bar = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
        let g = momentum_step(&zero, &g_bar, 1.0);
        assert_eq!(g.data(), &[0.75, -0.25]);

        // mu = 0 keeps only the normalized gradient
        let g_t = Tensor::new(vec![1, 2], vec![5.0, 5.0]).unwrap();
        let g = momentum_step(&g_t, &g_bar, 0.0);
        assert_eq!(g.data(), &[0.75, -0.25]);

        // zero gradient keeps mu * g_t
        let g = momentum_step(&g_t, &zero, 0.5);
        assert_eq!(g.data(), &[2.5, 2.5]);
    }

    #[test]
    fn momentum_norm_is_per_sample() {
        let g_t = Tensor::zeros(&[2, 2]);
        let g_bar = Tensor::new(vec![2, 2], vec![3.0, -1.0, 0.0, 0.0]).unwrap();
        let g = momentum_step(&g_t, &g_bar, 1.0);
        assert_eq!(g.data(), &[0.75, -0.25, 0.0, 0.0]);
    }

    #[test]
    fn apply_step_budget_and_range_clips() {
        let x_clean = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        // alpha exceeds budget: clipped to epsilon ball
        let g = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let x = apply_step(&x_clean, &g, 0.15, &x_clean, 0.1, (0.0, 1.0));
        assert!((x.data()[0] - 0.6).abs() < 1e-12);
        // zero gradient: no movement
        let x = apply_step(&x_clean, &Tensor::zeros(&[1, 1]), 0.15, &x_clean, 0.1, (0.0, 1.0));
        assert_eq!(x.data(), &[0.5]);
        // range clip
        let x_hi = Tensor::new(vec![1, 1], vec![0.95]).unwrap();
        let x = apply_step(&x_hi, &g, 0.25, &x_hi, 0.5, (0.0, 1.0));
        assert_eq!(x.data(), &[1.0]);
    }

    fn toy_model_and_data(seed: u64) -> (crate::models::Classifier, crate::data::Dataset) {
        let mut r = rng::stream(seed, &[40]);
        let centers = [(-2.0, 0.0), (2.0, 0.0), (0.0, 2.5)];
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for i in 0..150 {
            let label = i % 3;
            let (cx, cy) = centers[label];
            samples.push(
                Tensor::new(vec![2], vec![cx + r.gen_range(-0.4..0.4), cy + r.gen_range(-0.4..0.4)])
                    .unwrap(),
            );
            labels.push(label);
        }
        let ds = crate::data::Dataset::new(Tensor::stack(&samples).unwrap(), labels, 3).unwrap();
        let out = train(
            &ds,
            Architecture::LinearSoftmax,
            &TrainConfig { epochs: 15, seed, ..TrainConfig::default() },
        )
        .unwrap();
        assert!(out.heldout_accuracy >= 0.95);
        (out.model, ds)
    }

    #[test]
    fn vanishing_epsilon_leaves_inputs_unchanged() {
        let (model, ds) = toy_model_and_data(1);
        let batch = ds.select(&(0..30).collect::<Vec<_>>());
        let cfg = AttackConfig {
            epsilon: 1e-9,
            range: (-10.0, 10.0),
            seed: 3,
            ..AttackConfig::default()
        };
        let adv = run_attack(&model, &batch.images, &batch.labels, &cfg, None, 0).unwrap();
        assert!(adv.max_perturbation() <= 1e-9 + 1e-15);
        let preds_clean = model.predict(&batch.images).unwrap();
        let preds_adv = model.predict(&adv.adversarial).unwrap();
        assert_eq!(preds_clean, preds_adv);
    }

    #[test]
    fn whitebox_fooling_on_toy_linear_model() {
        let (model, ds) = toy_model_and_data(2);
        // keep only correctly classified points
        let preds = model.predict(&ds.images).unwrap();
        let idx: Vec<usize> =
            (0..ds.len()).filter(|&i| preds[i] == ds.labels[i]).collect();
        let batch = ds.select(&idx);
        let cfg = AttackConfig {
            epsilon: 3.0,
            range: (-10.0, 10.0),
            seed: 5,
            ..AttackConfig::default()
        };
        let adv = run_attack(&model, &batch.images, &batch.labels, &cfg, None, 0).unwrap();
        let preds = model.predict(&adv.adversarial).unwrap();
        let fooled = preds.iter().zip(&batch.labels).filter(|(p, y)| p != y).count();
        let rate = fooled as f64 / batch.labels.len() as f64;
        assert!(rate >= 0.99, "white-box fooling rate {rate}");
    }

    #[test]
    fn budget_invariant_holds_at_every_iterate() {
        let (model, ds) = toy_model_and_data(3);
        let batch = ds.select(&(0..20).collect::<Vec<_>>());
        let cfg = AttackConfig {
            epsilon: 0.7,
            iterations: 7,
            momentum: 1.0,
            range: (-3.0, 3.0),
            estimator: vec![EstimatorSpec::Mist {
                n: 2,
                lambda_min: 0.2,
                shift_enabled: false,
                addend_enabled: true,
                fixed_lambda: None,
            }],
            seed: 9,
            log_trajectory: true,
            ..AttackConfig::default()
        };
        let adv = run_attack(&model, &batch.images, &batch.labels, &cfg, None, 0).unwrap();
        let traj = adv.trajectory.as_ref().unwrap();
        assert_eq!(traj.len(), cfg.iterations + 1);
        for x_t in traj {
            for &d in &x_t.linf_per_sample(&batch.images) {
                assert!(d <= cfg.epsilon + 1e-9);
            }
            for &v in x_t.data() {
                assert!((-3.0..=3.0).contains(&v));
            }
        }
    }

    #[test]
    fn mist_reduction_reproduces_identity_iterates() {
        let (model, ds) = toy_model_and_data(4);
        let batch = ds.select(&(0..16).collect::<Vec<_>>());
        let base = AttackConfig {
            epsilon: 1.0,
            range: (-10.0, 10.0),
            seed: 11,
            log_trajectory: true,
            ..AttackConfig::default()
        };
        let cfg_mist = AttackConfig {
            estimator: vec![EstimatorSpec::Mist {
                n: 3,
                lambda_min: 0.2,
                shift_enabled: false,
                addend_enabled: true,
                fixed_lambda: Some(1.0),
            }],
            ..base.clone()
        };
        let a = run_attack(&model, &batch.images, &batch.labels, &base, None, 0).unwrap();
        let b = run_attack(&model, &batch.images, &batch.labels, &cfg_mist, None, 0).unwrap();
        let (ta, tb) = (a.trajectory.unwrap(), b.trajectory.unwrap());
        for (xa, xb) in ta.iter().zip(&tb) {
            for (va, vb) in xa.data().iter().zip(xb.data()) {
                assert!((va - vb).abs() < 1e-9, "iterate sequences diverged");
            }
        }
    }

    #[test]
    fn attacks_are_deterministic_per_seed() {
        let (model, ds) = toy_model_and_data(5);
        let batch = ds.select(&(0..12).collect::<Vec<_>>());
        let cfg = AttackConfig {
            epsilon: 1.0,
            range: (-10.0, 10.0),
            estimator: vec![EstimatorSpec::Mist {
                n: 2,
                lambda_min: 0.2,
                shift_enabled: false,
                addend_enabled: true,
                fixed_lambda: None,
            }],
            seed: 21,
            ..AttackConfig::default()
        };
        let a = run_attack(&model, &batch.images, &batch.labels, &cfg, None, 0).unwrap();
        let b = run_attack(&model, &batch.images, &batch.labels, &cfg, None, 0).unwrap();
        assert_eq!(a.adversarial, b.adversarial);
        let c = run_attack(
            &model,
            &batch.images,
            &batch.labels,
            &AttackConfig { seed: 22, ..cfg },
            None,
            0,
        )
        .unwrap();
        assert_ne!(a.adversarial, c.adversarial);
    }

    #[test]
    fn surrogate_loss_tends_to_increase() {
        // statistical sanity check, not a theorem: the attack should raise
        // the surrogate loss for nearly all samples
        let (model, ds) = toy_model_and_data(6);
        let preds = model.predict(&ds.images).unwrap();
        let idx: Vec<usize> =
            (0..ds.len()).filter(|&i| preds[i] == ds.labels[i]).collect();
        let batch = ds.select(&idx);
        let cfg = AttackConfig { epsilon: 1.5, range: (-10.0, 10.0), seed: 31, ..AttackConfig::default() };
        let adv = run_attack(&model, &batch.images, &batch.labels, &cfg, None, 0).unwrap();
        let mut c = PassCounter::default();
        let (clean_losses, _) =
            crate::models::loss_and_input_grad(&model, &batch.images, &batch.labels, &mut c)
                .unwrap();
        let (adv_losses, _) =
            crate::models::loss_and_input_grad(&model, &adv.adversarial, &batch.labels, &mut c)
                .unwrap();
        let increased = clean_losses
            .iter()
            .zip(&adv_losses)
            .filter(|(c, a)| a >= c)
            .count();
        assert!(increased as f64 >= 0.9 * clean_losses.len() as f64);
    }

    #[test]
    fn counter_invariant_for_mist_and_admix() {
        let (model, ds) = toy_model_and_data(7);
        let batch = ds.select(&(0..10).collect::<Vec<_>>());
        let t = 4;
        let n = 3;
        let cfg = AttackConfig {
            epsilon: 0.5,
            iterations: t,
            range: (-10.0, 10.0),
            estimator: vec![EstimatorSpec::Mist {
                n,
                lambda_min: 0.2,
                shift_enabled: false,
                addend_enabled: true,
                fixed_lambda: None,
            }],
            seed: 41,
            ..AttackConfig::default()
        };
        let adv = run_attack(&model, &batch.images, &batch.labels, &cfg, None, 0).unwrap();
        assert_eq!(adv.counter.forwards, (t * n) as u64);
        assert_eq!(adv.counter.backwards, (2 * t * n) as u64);

        let (m, m2) = (5, 3);
        let cfg = AttackConfig {
            estimator: vec![EstimatorSpec::Admix { m2, eta: 0.2, with_scale: Some(m) }],
            ..cfg
        };
        let adv = run_attack(&model, &batch.images, &batch.labels, &cfg, Some(&ds), 0).unwrap();
        assert_eq!(adv.counter.forwards, (t * m * m2) as u64);
        assert_eq!(adv.counter.backwards, (t * m * m2) as u64);
    }
}
