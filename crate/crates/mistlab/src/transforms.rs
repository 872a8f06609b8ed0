//! Gradient estimators: the input transformations applied before the
//! momentum step.
//!
//! Every estimator consumes (model, batch, labels, derived PRNG streams)
//! and produces one averaged gradient per sample. The sampling cores are
//! Identity (plain MI-FGSM), SIM (scaled copies), Admix (add a small
//! portion of another image), and MIST (mix two images evenly but route
//! each loss item's gradient back to its own image). DIM wraps each copy
//! before the forward pass; TIM filters the averaged gradient afterwards.
//!
//! Estimators are pure given (model, batch, context), so disjoint batches
//! may run concurrently with independently derived streams.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Model, PassCounter};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{conv_same, gaussian_kernel, Tensor};

const STREAM_DIM: u64 = 1;
const STREAM_PERM: u64 = 2;
const STREAM_LAMBDA: u64 = 3;
const STREAM_SHIFT: u64 = 4;
const STREAM_PARTNER: u64 = 5;

/// Configuration of one gradient-estimation strategy. Compositions are
/// expressed as a list handed to [`compose`].
#[derive(Clone, Debug, PartialEq)]
pub enum EstimatorSpec {
    Identity,
    /// Random resize-and-pad with probability `p` and resize rate `rho`.
    Dim { p: f64, rho: f64 },
    /// Gaussian smoothing of the averaged gradient.
    Tim { kernel_size: usize, sigma: f64 },
    /// Average over `m` scaled copies with scale factors 1/2^i.
    Sim { m: usize },
    /// Average over `m2` images mixed in with strength `eta`; optionally
    /// evaluated at the SIM scales as well.
    Admix { m2: usize, eta: f64, with_scale: Option<usize> },
    /// Mix pairs evenly, separate the two loss gradients, average over
    /// `n` mixed batches.
    Mist {
        n: usize,
        lambda_min: f64,
        shift_enabled: bool,
        addend_enabled: bool,
        fixed_lambda: Option<f64>,
    },
}

impl EstimatorSpec {
    pub fn dim_default() -> Self {
        EstimatorSpec::Dim { p: 0.5, rho: 1.1 }
    }

    pub fn tim_default() -> Self {
        EstimatorSpec::Tim { kernel_size: 7, sigma: 3.0 }
    }

    pub fn sim_default() -> Self {
        EstimatorSpec::Sim { m: 5 }
    }

    pub fn admix_default() -> Self {
        EstimatorSpec::Admix { m2: 3, eta: 0.2, with_scale: Some(5) }
    }

    pub fn mist_default() -> Self {
        EstimatorSpec::Mist {
            n: 30,
            lambda_min: 0.2,
            shift_enabled: true,
            addend_enabled: true,
            fixed_lambda: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        match *self {
            EstimatorSpec::Identity => Ok(()),
            EstimatorSpec::Dim { p, rho } => {
                if !(0.0..=1.0).contains(&p) {
                    return fail(format!("dim probability must be in [0,1], got {p}"));
                }
                if rho < 1.0 {
                    return fail(format!("dim resize rate must be >= 1, got {rho}"));
                }
                Ok(())
            }
            EstimatorSpec::Tim { kernel_size, sigma } => {
                if kernel_size == 0 || kernel_size % 2 == 0 {
                    return fail(format!("tim kernel size must be odd, got {kernel_size}"));
                }
                if sigma <= 0.0 {
                    return fail(format!("tim sigma must be > 0, got {sigma}"));
                }
                Ok(())
            }
            EstimatorSpec::Sim { m } => {
                if m == 0 {
                    return fail("sim copy count must be >= 1".into());
                }
                Ok(())
            }
            EstimatorSpec::Admix { m2, eta, with_scale } => {
                if m2 == 0 {
                    return fail("admix sampled-image count must be >= 1".into());
                }
                if eta < 0.0 {
                    return fail(format!("admix mix strength must be >= 0, got {eta}"));
                }
                if with_scale == Some(0) {
                    return fail("admix scale copy count must be >= 1".into());
                }
                Ok(())
            }
            EstimatorSpec::Mist { n, lambda_min, fixed_lambda, .. } => {
                if n == 0 {
                    return fail("mist mixed-image count must be >= 1".into());
                }
                if !(0.0..=0.5).contains(&lambda_min) {
                    return fail(format!("lambda_min must be in [0, 0.5], got {lambda_min}"));
                }
                if let Some(l) = fixed_lambda {
                    if !(0.0..=1.0).contains(&l) {
                        return fail(format!("fixed lambda must be in [0,1], got {l}"));
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Core {
    Identity,
    Sim { m: usize },
    Admix { m2: usize, eta: f64, scale_m: Option<usize> },
    Mist {
        n: usize,
        lambda_min: f64,
        shift_enabled: bool,
        addend_enabled: bool,
        fixed_lambda: Option<f64>,
        scale_m: Option<usize>,
    },
}

/// A compiled estimator: one sampling core plus optional DIM/TIM wrappers.
#[derive(Clone, Debug)]
pub struct Estimator {
    core: Core,
    dim: Option<(f64, f64)>,
    tim: Option<Tensor>,
    name: String,
}

/// Seed context for one estimate call; all randomness inside is derived
/// from (seed, batch_id, iteration, ...) streams.
#[derive(Clone, Copy, Debug)]
pub struct EstimateContext<'a> {
    pub seed: u64,
    pub batch_id: u64,
    pub iteration: u64,
    /// Pool Admix draws its other-category partners from.
    pub partners: Option<&'a Dataset>,
}

/// Build an estimator from a composition list. At most one of
/// {Admix, MIST} may appear; SIM may stand alone or attach its scale
/// ladder to MIST; DIM and TIM are optional wrappers.
pub fn compose(specs: &[EstimatorSpec]) -> Result<Estimator> {
    for s in specs {
        s.validate()?;
    }
    let mut dim = None;
    let mut tim = None;
    let mut sim: Option<usize> = None;
    let mut core: Option<Core> = None;
    let set_core = |c: Core, core: &mut Option<Core>| -> Result<()> {
        if core.is_some() {
            return Err(Error::Composition(
                "at most one sampling core (admix/mist) per composition".into(),
            ));
        }
        *core = Some(c);
        Ok(())
    };
    for spec in specs {
        match *spec {
            EstimatorSpec::Identity => {}
            EstimatorSpec::Dim { p, rho } => {
                if dim.replace((p, rho)).is_some() {
                    return Err(Error::Composition("dim listed twice".into()));
                }
            }
            EstimatorSpec::Tim { kernel_size, sigma } => {
                if tim.replace(gaussian_kernel(kernel_size, sigma)?).is_some() {
                    return Err(Error::Composition("tim listed twice".into()));
                }
            }
            EstimatorSpec::Sim { m } => {
                if sim.replace(m).is_some() {
                    return Err(Error::Composition("sim listed twice".into()));
                }
            }
            EstimatorSpec::Admix { m2, eta, with_scale } => {
                set_core(Core::Admix { m2, eta, scale_m: with_scale }, &mut core)?;
            }
            EstimatorSpec::Mist { n, lambda_min, shift_enabled, addend_enabled, fixed_lambda } => {
                set_core(
                    Core::Mist {
                        n,
                        lambda_min,
                        shift_enabled,
                        addend_enabled,
                        fixed_lambda,
                        scale_m: None,
                    },
                    &mut core,
                )?;
            }
        }
    }
    let core = match (core, sim) {
        (None, None) => Core::Identity,
        (None, Some(m)) => Core::Sim { m },
        (Some(c), None) => c,
        (Some(Core::Mist { n, lambda_min, shift_enabled, addend_enabled, fixed_lambda, .. }), Some(m)) => {
            Core::Mist { n, lambda_min, shift_enabled, addend_enabled, fixed_lambda, scale_m: Some(m) }
        }
        (Some(_), Some(_)) => {
            return Err(Error::Composition(
                "sim can only stand alone or attach to mist (admix carries its own scale flag)"
                    .into(),
            ))
        }
    };
    let mut parts: Vec<&str> = Vec::new();
    match &core {
        Core::Identity => parts.push("mi-fgsm"),
        Core::Sim { .. } => parts.push("sim"),
        Core::Admix { scale_m, .. } => {
            parts.push(if scale_m.is_some() { "admix" } else { "admix-noscale" })
        }
        Core::Mist { scale_m, .. } => {
            parts.push("mist");
            if scale_m.is_some() {
                parts.push("si");
            }
        }
    }
    if tim.is_some() {
        parts.push("ti");
    }
    if dim.is_some() {
        parts.push("dim");
    }
    let name = parts.join("-");
    Ok(Estimator { core, dim, tim, name })
}

impl Estimator {
    /// Canonical composition name used in reports.
    pub fn name(&self) -> &str {
        &self.name
    }

    /// The averaged input gradient for one batch at the current iterate.
    pub fn estimate(
        &self,
        model: &dyn Model,
        x: &Tensor,
        labels: &[usize],
        ctx: &EstimateContext,
        counter: &mut PassCounter,
    ) -> Result<Tensor> {
        if x.batch_len() == 0 {
            return Err(Error::EmptyBatch);
        }
        if labels.len() != x.batch_len() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples but {} labels",
                x.batch_len(),
                labels.len()
            )));
        }
        let g = match &self.core {
            Core::Identity => self.identity_gradient(model, x, labels, ctx, counter)?,
            Core::Sim { m } => self.sim_gradient(model, x, labels, *m, ctx, counter)?,
            Core::Admix { m2, eta, scale_m } => {
                self.admix_gradient(model, x, labels, *m2, *eta, *scale_m, ctx, counter)?
            }
            Core::Mist { n, lambda_min, shift_enabled, addend_enabled, fixed_lambda, scale_m } => self
                .mist_gradient(
                    model,
                    x,
                    labels,
                    MistParams {
                        n: *n,
                        lambda_min: *lambda_min,
                        shift_enabled: *shift_enabled,
                        addend_enabled: *addend_enabled,
                        fixed_lambda: *fixed_lambda,
                        scale_m: *scale_m,
                    },
                    ctx,
                    counter,
                )?,
        };
        match &self.tim {
            Some(kernel) if kernel.numel() > 1 => conv_same(&g, kernel),
            _ => Ok(g),
        }
    }

    /// One forward/backward over a transformed copy of `base`; returns the
    /// gradient of each label set's summed loss with respect to the leaf.
    fn copy_gradients(
        model: &dyn Model,
        base: &Tensor,
        transform: impl FnOnce(&mut Tape, Var) -> Result<Var>,
        label_sets: &[&[usize]],
        counter: &mut PassCounter,
    ) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(base.clone(), true);
        let transformed = transform(&mut tape, leaf)?;
        let losses = model.multi_loss_graph(&mut tape, transformed, label_sets, counter)?;
        let mut out = Vec::with_capacity(losses.len());
        for l in losses {
            let root = tape.sum_all(l);
            let grads = tape.backward(root)?;
            counter.backwards += 1;
            out.push(grads.wrt(leaf).cloned().unwrap_or_else(|| Tensor::zeros(base.shape())));
        }
        Ok(out)
    }

    fn dim_on_tape(
        &self,
        tape: &mut Tape,
        v: Var,
        ctx: &EstimateContext,
        copy_id: u64,
    ) -> Result<Var> {
        let Some((p, rho)) = self.dim else { return Ok(v) };
        let shape = tape.value(v).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "dim transform needs (B,C,H,W) inputs, got {shape:?}"
            )));
        }
        let mut r = rng::stream(ctx.seed, &[ctx.batch_id, ctx.iteration, copy_id, STREAM_DIM]);
        match draw_dim(shape[2], shape[3], p, rho, &mut r) {
            None => Ok(v),
            Some(d) => apply_dim_on_tape(tape, v, &d),
        }
    }

    fn identity_gradient(
        &self,
        model: &dyn Model,
        x: &Tensor,
        labels: &[usize],
        ctx: &EstimateContext,
        counter: &mut PassCounter,
    ) -> Result<Tensor> {
        let g = Self::copy_gradients(
            model,
            x,
            |tape, v| self.dim_on_tape(tape, v, ctx, 0),
            &[labels],
            counter,
        )?;
        Ok(g.into_iter().next().expect("one label set"))
    }

    fn sim_gradient(
        &self,
        model: &dyn Model,
        x: &Tensor,
        labels: &[usize],
        m: usize,
        ctx: &EstimateContext,
        counter: &mut PassCounter,
    ) -> Result<Tensor> {
        let mut acc = Tensor::zeros(x.shape());
        for i in 0..m {
            let gamma = 0.5f64.powi(i as i32);
            let g = Self::copy_gradients(
                model,
                x,
                |tape, v| {
                    let scaled = tape.scale(v, gamma);
                    self.dim_on_tape(tape, scaled, ctx, i as u64)
                },
                &[labels],
                counter,
            )?;
            acc.add_assign(&g[0])?;
        }
        Ok(acc.scale(1.0 / m as f64))
    }

    #[allow(clippy::too_many_arguments)]
    fn admix_gradient(
        &self,
        model: &dyn Model,
        x: &Tensor,
        labels: &[usize],
        m2: usize,
        eta: f64,
        scale_m: Option<usize>,
        ctx: &EstimateContext,
        counter: &mut PassCounter,
    ) -> Result<Tensor> {
        let m = scale_m.unwrap_or(1);
        let mut acc = Tensor::zeros(x.shape());
        let mut warned = false;
        for j in 0..m2 {
            let mut r =
                rng::stream(ctx.seed, &[ctx.batch_id, ctx.iteration, j as u64, STREAM_PARTNER]);
            let addend = draw_partner_batch(x, labels, ctx.partners, &mut r, &mut warned)?;
            let addend_scaled = addend.scale(eta);
            for i in 0..m {
                let gamma = 0.5f64.powi(i as i32);
                let copy_id = (j * m + i) as u64;
                let g = Self::copy_gradients(
                    model,
                    x,
                    |tape, v| {
                        let c = tape.constant(addend_scaled.clone());
                        let mixed = tape.add(v, c)?;
                        let scaled = if scale_m.is_some() { tape.scale(mixed, gamma) } else { mixed };
                        self.dim_on_tape(tape, scaled, ctx, copy_id)
                    },
                    &[labels],
                    counter,
                )?;
                acc.add_assign(&g[0])?;
            }
        }
        Ok(acc.scale(1.0 / (m2 * m) as f64))
    }

    fn mist_gradient(
        &self,
        model: &dyn Model,
        x: &Tensor,
        labels: &[usize],
        params: MistParams,
        ctx: &EstimateContext,
        counter: &mut PassCounter,
    ) -> Result<Tensor> {
        let batch = x.batch_len();
        let m = params.scale_m.unwrap_or(1);
        let mut acc = Tensor::zeros(x.shape());
        for round in 0..params.n {
            let round_id = round as u64;
            let mixed = MixedRound::build(x, labels, &params, ctx, round_id)?;
            let partner_labels: Vec<usize> =
                mixed.permutation.iter().map(|&p| labels[p]).collect();
            let label_sets: Vec<&[usize]> = if params.addend_enabled {
                vec![labels, &partner_labels]
            } else {
                vec![labels]
            };
            for i in 0..m {
                let gamma = 0.5f64.powi(i as i32);
                let copy_id = round_id * m as u64 + i as u64;
                let grads = Self::copy_gradients(
                    model,
                    &mixed.mixed,
                    |tape, v| {
                        let scaled = if params.scale_m.is_some() { tape.scale(v, gamma) } else { v };
                        self.dim_on_tape(tape, scaled, ctx, copy_id)
                    },
                    &label_sets,
                    counter,
                )?;
                // item I: lambda-weighted gradient goes to each sample itself
                for b in 0..batch {
                    let mut s = grads[0].sample(b);
                    s = s.scale(mixed.lambdas[b]);
                    let mut dst = acc.sample(b);
                    dst.add_assign(&s)?;
                    acc.set_sample(b, &dst);
                }
                // item II: the addend's gradient is inverse-shifted and
                // routed back to the sample that served as the addend
                if params.addend_enabled {
                    for b in 0..batch {
                        let src = mixed.permutation[b];
                        let mut s = grads[1].sample(b);
                        s = s.scale(1.0 - mixed.lambdas[b]);
                        let inv: Vec<i64> = mixed.shifts[b].iter().map(|&o| -o).collect();
                        s = s.circular_shift(&inv);
                        let mut dst = acc.sample(src);
                        dst.add_assign(&s)?;
                        acc.set_sample(src, &dst);
                    }
                }
            }
        }
        let divisor = if params.addend_enabled { 2 * params.n * m } else { params.n * m };
        Ok(acc.scale(1.0 / divisor as f64))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MistParams {
    pub n: usize,
    pub lambda_min: f64,
    pub shift_enabled: bool,
    pub addend_enabled: bool,
    pub fixed_lambda: Option<f64>,
    pub scale_m: Option<usize>,
}

/// One mixed batch: x-tilde = lambda * x + (1 - lambda) * shift(x[perm]).
#[derive(Clone, Debug)]
pub struct MixedRound {
    pub permutation: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// Per-sample circular shift offsets applied to the partner image.
    pub shifts: Vec<Vec<i64>>,
    pub mixed: Tensor,
}

impl MixedRound {
    pub fn build(
        x: &Tensor,
        labels: &[usize],
        params: &MistParams,
        ctx: &EstimateContext,
        round: u64,
    ) -> Result<MixedRound> {
        let batch = x.batch_len();
        let mut perm_rng = rng::stream(ctx.seed, &[ctx.batch_id, ctx.iteration, round, STREAM_PERM]);
        let permutation = other_label_permutation(labels, &mut perm_rng);
        let mut lambda_rng =
            rng::stream(ctx.seed, &[ctx.batch_id, ctx.iteration, round, STREAM_LAMBDA]);
        let lambdas: Vec<f64> = (0..batch)
            .map(|_| match params.fixed_lambda {
                Some(l) => l,
                None => {
                    if params.lambda_min >= 0.5 {
                        0.5
                    } else {
                        lambda_rng.gen_range(params.lambda_min..=1.0 - params.lambda_min)
                    }
                }
            })
            .collect();
        // shift applies only to genuinely spatial data (rank >= 3 samples)
        let spatial: Vec<usize> = if params.shift_enabled && x.rank() >= 4 {
            x.shape()[x.rank() - 2..].to_vec()
        } else {
            Vec::new()
        };
        let mut shift_rng =
            rng::stream(ctx.seed, &[ctx.batch_id, ctx.iteration, round, STREAM_SHIFT]);
        let shifts: Vec<Vec<i64>> = (0..batch)
            .map(|_| {
                spatial
                    .iter()
                    .map(|&e| shift_rng.gen_range(0..e.max(1) as i64))
                    .collect()
            })
            .collect();
        let mut mixed = Tensor::zeros(x.shape());
        for b in 0..batch {
            let own = x.sample(b).scale(lambdas[b]);
            let partner = x.sample(permutation[b]).circular_shift(&shifts[b]);
            let combined = own.add(&partner.scale(1.0 - lambdas[b]))?;
            mixed.set_sample(b, &combined);
        }
        Ok(MixedRound { permutation, lambdas, shifts, mixed })
    }
}

/// Uniform random permutation, repaired so no sample pairs with its own
/// label whenever the batch holds at least two labels. Repair is best
/// effort: heavily skewed batches may keep a few same-label pairs (a
/// perfect assignment does not always exist), which is logged.
pub fn other_label_permutation(labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = labels.len();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let distinct: HashSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        if n == 1 {
            log::warn!("batch of size 1: mist degenerates to self-mixing");
        } else {
            log::warn!("single-label batch: mist pairs samples of the same category");
        }
        return perm;
    }
    for _pass in 0..100 {
        let conflicts: Vec<usize> =
            (0..n).filter(|&i| labels[perm[i]] == labels[i]).collect();
        if conflicts.is_empty() {
            return perm;
        }
        for &i in &conflicts {
            let j = rng.gen_range(0..n);
            if labels[perm[j]] != labels[i] && labels[perm[i]] != labels[j] {
                perm.swap(i, j);
            }
        }
    }
    log::warn!("could not fully avoid same-label pairs in mixing permutation");
    perm
}

/// Draw one other-category partner per sample. Prefers the provided pool,
/// falls back to the batch itself, and as a last resort accepts
/// same-label partners with a warning.
fn draw_partner_batch(
    x: &Tensor,
    labels: &[usize],
    pool: Option<&Dataset>,
    rng: &mut ChaCha8Rng,
    warned: &mut bool,
) -> Result<Tensor> {
    let batch = x.batch_len();
    let mut out = Tensor::zeros(x.shape());
    for b in 0..batch {
        let sample = match pool {
            Some(ds) => {
                let candidates = ds.other_label_indices(labels[b]);
                if candidates.is_empty() {
                    if !*warned {
                        log::warn!("partner pool has no other-category samples; falling back to any sample");
                        *warned = true;
                    }
                    ds.images.sample(rng.gen_range(0..ds.len()))
                } else {
                    ds.images.sample(candidates[rng.gen_range(0..candidates.len())])
                }
            }
            None => {
                let candidates: Vec<usize> =
                    (0..batch).filter(|&i| labels[i] != labels[b]).collect();
                if candidates.is_empty() {
                    if !*warned {
                        log::warn!("no other-category samples in batch; falling back to any sample");
                        *warned = true;
                    }
                    x.sample(rng.gen_range(0..batch))
                } else {
                    x.sample(candidates[rng.gen_range(0..candidates.len())])
                }
            }
        };
        out.set_sample(b, &sample);
    }
    Ok(out)
}

// ── DIM transform ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct DimDraw {
    pub resized_h: usize,
    pub resized_w: usize,
    pub pad_left: usize,
    pub pad_top: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
}

/// Sample the random resize-and-pad parameters, or None for the identity
/// branch taken with probability 1 - p.
pub fn draw_dim(h: usize, w: usize, p: f64, rho: f64, rng: &mut ChaCha8Rng) -> Option<DimDraw> {
    if rng.gen_range(0.0..1.0) >= p {
        return None;
    }
    let canvas_h = (rho * h as f64).floor() as usize;
    let canvas_w = (rho * w as f64).floor() as usize;
    let resized_h = rng.gen_range(h..=canvas_h.max(h));
    let resized_w = rng.gen_range(w..=canvas_w.max(w));
    let pad_top = rng.gen_range(0..=canvas_h.saturating_sub(resized_h));
    let pad_left = rng.gen_range(0..=canvas_w.saturating_sub(resized_w));
    Some(DimDraw { resized_h, resized_w, pad_left, pad_top, canvas_h, canvas_w })
}

/// Resize, pad to the rho-canvas, then resize back to the native extent
/// so the model input shape is preserved. Fully differentiable.
pub fn apply_dim_on_tape(tape: &mut Tape, v: Var, d: &DimDraw) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    let resized = tape.resize_bilinear(v, d.resized_h, d.resized_w)?;
    let padded = tape.pad_zero(
        resized,
        d.pad_left,
        d.canvas_w - d.resized_w - d.pad_left,
        d.pad_top,
        d.canvas_h - d.resized_h - d.pad_top,
    )?;
    tape.resize_bilinear(padded, h, w)
}

/// The DIM transform as a pure tensor function (used by the R&P defense).
pub fn dim_transform(x: &Tensor, p: f64, rho: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "dim transform needs (B,C,H,W) inputs, got {:?}",
            x.shape()
        )));
    }
    match draw_dim(x.shape()[2], x.shape()[3], p, rho, rng) {
        None => Ok(x.clone()),
        Some(d) => {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone(), false);
            let out = apply_dim_on_tape(&mut tape, v, &d)?;
            Ok(tape.value(out).clone())
        }
    }
}

/// Smooth the averaged gradient with a normalized Gaussian kernel.
pub fn tim_filter(g: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    if kernel.numel() == 1 {
        return Ok(g.clone());
    }
    conv_same(g, kernel)
}

// ── Spec-named convenience wrappers ─────────────────────────────────

pub fn estimate_identity(
    model: &dyn Model,
    x: &Tensor,
    labels: &[usize],
    ctx: &EstimateContext,
    counter: &mut PassCounter,
) -> Result<Tensor> {
    compose(&[EstimatorSpec::Identity])?.estimate(model, x, labels, ctx, counter)
}

pub fn estimate_sim(
    model: &dyn Model,
    x: &Tensor,
    labels: &[usize],
    m: usize,
    ctx: &EstimateContext,
    counter: &mut PassCounter,
) -> Result<Tensor> {
    compose(&[EstimatorSpec::Sim { m }])?.estimate(model, x, labels, ctx, counter)
}

pub fn estimate_admix(
    model: &dyn Model,
    x: &Tensor,
    labels: &[usize],
    m2: usize,
    eta: f64,
    with_scale: Option<usize>,
    ctx: &EstimateContext,
    counter: &mut PassCounter,
) -> Result<Tensor> {
    compose(&[EstimatorSpec::Admix { m2, eta, with_scale }])?
        .estimate(model, x, labels, ctx, counter)
}

pub fn estimate_mist(
    model: &dyn Model,
    x: &Tensor,
    labels: &[usize],
    spec: &EstimatorSpec,
    ctx: &EstimateContext,
    counter: &mut PassCounter,
) -> Result<Tensor> {
    debug_assert!(matches!(spec, EstimatorSpec::Mist { .. }));
    compose(std::slice::from_ref(spec))?.estimate(model, x, labels, ctx, counter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::models::{loss_and_input_grad, train, Architecture, TrainConfig};

    fn blob_dataset(seed: u64, n: usize, classes: usize) -> Dataset {
        let mut r = rng::stream(seed, &[7]);
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        let centers = [(-2.0, 0.0), (2.0, 0.0), (0.0, 2.5)];
        for i in 0..n {
            let label = i % classes;
            let (cx, cy) = centers[label];
            samples.push(
                Tensor::new(
                    vec![2],
                    vec![cx + r.gen_range(-0.5..0.5), cy + r.gen_range(-0.5..0.5)],
                )
                .unwrap(),
            );
            labels.push(label);
        }
        Dataset::new(Tensor::stack(&samples).unwrap(), labels, classes).unwrap()
    }

    fn trained_toy(seed: u64) -> (crate::models::Classifier, Dataset) {
        let ds = blob_dataset(seed, 120, 3);
        let out = train(
            &ds,
            Architecture::LinearSoftmax,
            &TrainConfig { epochs: 8, seed, ..TrainConfig::default() },
        )
        .unwrap();
        (out.model, ds)
    }

    fn ctx(seed: u64) -> EstimateContext<'static> {
        EstimateContext { seed, batch_id: 0, iteration: 0, partners: None }
    }

    #[test]
    fn identity_matches_loss_and_input_grad() {
        let (model, ds) = trained_toy(1);
        let batch = ds.select(&[0, 1, 2, 3]);
        let mut c1 = PassCounter::default();
        let mut c2 = PassCounter::default();
        let g1 = estimate_identity(&model, &batch.images, &batch.labels, &ctx(5), &mut c1).unwrap();
        let (_, g2) = loss_and_input_grad(&model, &batch.images, &batch.labels, &mut c2).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(c1, PassCounter { forwards: 1, backwards: 1 });
    }

    #[test]
    fn sim_with_one_copy_equals_identity() {
        let (model, ds) = trained_toy(2);
        let batch = ds.select(&[0, 5, 10]);
        let mut c = PassCounter::default();
        let g_sim =
            estimate_sim(&model, &batch.images, &batch.labels, 1, &ctx(5), &mut c).unwrap();
        let g_id =
            estimate_identity(&model, &batch.images, &batch.labels, &ctx(5), &mut c).unwrap();
        assert_eq!(g_sim, g_id);
    }

    #[test]
    fn sim_counts_m_passes() {
        let (model, ds) = trained_toy(3);
        let batch = ds.select(&[0, 1]);
        let mut c = PassCounter::default();
        estimate_sim(&model, &batch.images, &batch.labels, 5, &ctx(5), &mut c).unwrap();
        assert_eq!(c, PassCounter { forwards: 5, backwards: 5 });
    }

    #[test]
    fn sim_closed_form_on_linear_softmax() {
        // On a linear model the scaled-copy gradient is the chain-rule
        // scaled softmax gradient; verify against a manual computation.
        let (model, ds) = trained_toy(4);
        let batch = ds.select(&[0, 7]);
        let m = 3;
        let mut c = PassCounter::default();
        let got = estimate_sim(&model, &batch.images, &batch.labels, m, &ctx(5), &mut c).unwrap();
        let mut expect = Tensor::zeros(batch.images.shape());
        for i in 0..m {
            let gamma = 0.5f64.powi(i as i32);
            let scaled = batch.images.scale(gamma);
            let (_, g) = loss_and_input_grad(&model, &scaled, &batch.labels, &mut c).unwrap();
            expect.add_assign(&g.scale(gamma)).unwrap();
        }
        let expect = expect.scale(1.0 / m as f64);
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn admix_with_zero_eta_no_scale_equals_identity() {
        let (model, ds) = trained_toy(5);
        let batch = ds.select(&[0, 1, 2, 3, 4, 5]);
        for m2 in [1, 3] {
            let mut c = PassCounter::default();
            let g = estimate_admix(
                &model,
                &batch.images,
                &batch.labels,
                m2,
                0.0,
                None,
                &ctx(9),
                &mut c,
            )
            .unwrap();
            let g_id =
                estimate_identity(&model, &batch.images, &batch.labels, &ctx(9), &mut c).unwrap();
            for (a, b) in g.data().iter().zip(g_id.data()) {
                assert!((a - b).abs() < 1e-12, "m2={m2}");
            }
        }
    }

    #[test]
    fn admix_with_scale_counts_m_times_m2_passes() {
        let (model, ds) = trained_toy(6);
        let batch = ds.select(&[0, 1, 2]);
        let mut c = PassCounter::default();
        estimate_admix(
            &model,
            &batch.images,
            &batch.labels,
            3,
            0.2,
            Some(5),
            &EstimateContext { partners: Some(&ds), ..ctx(9) },
            &mut c,
        )
        .unwrap();
        assert_eq!(c, PassCounter { forwards: 15, backwards: 15 });
    }

    #[test]
    fn mist_fixed_lambda_one_is_half_the_plain_gradient() {
        let (model, ds) = trained_toy(7);
        let batch = ds.select(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let spec = EstimatorSpec::Mist {
            n: 4,
            lambda_min: 0.2,
            shift_enabled: false,
            addend_enabled: true,
            fixed_lambda: Some(1.0),
        };
        let mut c = PassCounter::default();
        let g = estimate_mist(&model, &batch.images, &batch.labels, &spec, &ctx(3), &mut c).unwrap();
        let g_id = estimate_identity(&model, &batch.images, &batch.labels, &ctx(3), &mut c).unwrap();
        for (a, b) in g.data().iter().zip(g_id.data()) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn mist_counts_one_forward_two_backward_per_round() {
        let (model, ds) = trained_toy(8);
        let batch = ds.select(&[0, 1, 2, 3]);
        let spec = EstimatorSpec::mist_default();
        let mut c = PassCounter::default();
        estimate_mist(&model, &batch.images, &batch.labels, &spec, &ctx(3), &mut c).unwrap();
        assert_eq!(c, PassCounter { forwards: 30, backwards: 60 });
    }

    #[test]
    fn mixed_round_avoids_same_label_pairs_and_stays_in_range() {
        let ds = blob_dataset(11, 30, 3);
        let params = MistParams {
            n: 1,
            lambda_min: 0.2,
            shift_enabled: true,
            addend_enabled: true,
            fixed_lambda: None,
            scale_m: None,
        };
        let c = ctx(17);
        for round in 0..20 {
            let mr = MixedRound::build(&ds.images, &ds.labels, &params, &c, round).unwrap();
            // permutation property
            let mut seen = vec![false; 30];
            for &p in &mr.permutation {
                assert!(!seen[p]);
                seen[p] = true;
            }
            // other-label property (3 balanced classes: always feasible)
            for (i, &p) in mr.permutation.iter().enumerate() {
                assert_ne!(ds.labels[i], ds.labels[p], "round {round} sample {i}");
            }
            // lambda range
            for &l in &mr.lambdas {
                assert!((0.2..=0.8).contains(&l));
            }
            // convex combination stays in the data range
            let lo = ds.images.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ds.images.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in mr.mixed.data() {
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn mixed_round_is_deterministic_per_context() {
        let ds = blob_dataset(12, 12, 3);
        let params = MistParams {
            n: 1,
            lambda_min: 0.2,
            shift_enabled: true,
            addend_enabled: true,
            fixed_lambda: None,
            scale_m: None,
        };
        let a = MixedRound::build(&ds.images, &ds.labels, &params, &ctx(5), 3).unwrap();
        let b = MixedRound::build(&ds.images, &ds.labels, &params, &ctx(5), 3).unwrap();
        assert_eq!(a.permutation, b.permutation);
        assert_eq!(a.lambdas, b.lambdas);
        assert_eq!(a.mixed, b.mixed);
        let c2 = MixedRound::build(&ds.images, &ds.labels, &params, &ctx(5), 4).unwrap();
        assert_ne!(a.mixed, c2.mixed);
    }

    #[test]
    fn mixup_gradient_decomposition_identity() {
        // lambda * grad J(x,y1) + (1-lambda) * grad J(x,y2) equals the
        // gradient of the lambda-weighted mixed loss within 1e-12.
        let (model, ds) = trained_toy(13);
        let mut r = rng::stream(31, &[0]);
        for _ in 0..50 {
            let i = r.gen_range(0..ds.len());
            let x = ds.select(&[i]).images;
            let y1 = r.gen_range(0..3);
            let y2 = r.gen_range(0..3);
            let lambda: f64 = r.gen_range(0.0..1.0);
            let mut c = PassCounter::default();
            let (_, g1) = loss_and_input_grad(&model, &x, &[y1], &mut c).unwrap();
            let (_, g2) = loss_and_input_grad(&model, &x, &[y2], &mut c).unwrap();
            // mixed-label loss gradient via one tape
            let mut tape = Tape::new();
            let leaf = tape.leaf(x.clone(), true);
            let losses =
                model.multi_loss_graph(&mut tape, leaf, &[&[y1], &[y2]], &mut c).unwrap();
            let l1 = tape.sum_all(losses[0]);
            let l2 = tape.sum_all(losses[1]);
            let weighted1 = tape.scale(l1, lambda);
            let weighted2 = tape.scale(l2, 1.0 - lambda);
            let root = tape.add(weighted1, weighted2).unwrap();
            let grads = tape.backward(root).unwrap();
            let gm = grads.wrt(leaf).unwrap();
            for k in 0..gm.numel() {
                let manual = lambda * g1.data()[k] + (1.0 - lambda) * g2.data()[k];
                assert!((gm.data()[k] - manual).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compose_rules() {
        assert!(compose(&[EstimatorSpec::admix_default(), EstimatorSpec::mist_default()]).is_err());
        assert!(compose(&[EstimatorSpec::admix_default(), EstimatorSpec::sim_default()]).is_err());
        let e = compose(&[
            EstimatorSpec::mist_default(),
            EstimatorSpec::sim_default(),
            EstimatorSpec::tim_default(),
            EstimatorSpec::dim_default(),
        ])
        .unwrap();
        assert_eq!(e.name(), "mist-si-ti-dim");
        assert_eq!(compose(&[EstimatorSpec::Identity]).unwrap().name(), "mi-fgsm");
        assert_eq!(compose(&[]).unwrap().name(), "mi-fgsm");
    }

    #[test]
    fn degenerate_wrappers_reduce_to_identity() {
        let (model, ds) = trained_toy(14);
        let batch = ds.select(&[0, 1, 2]);
        let mut c = PassCounter::default();
        // sim(m=1) + tim(size=1) == identity
        let e = compose(&[
            EstimatorSpec::Sim { m: 1 },
            EstimatorSpec::Tim { kernel_size: 1, sigma: 1.0 },
        ])
        .unwrap();
        let g = e.estimate(&model, &batch.images, &batch.labels, &ctx(2), &mut c).unwrap();
        let g_id = estimate_identity(&model, &batch.images, &batch.labels, &ctx(2), &mut c).unwrap();
        assert_eq!(g, g_id);
    }

    #[test]
    fn dim_p_zero_is_identity_and_p_one_rho_one_is_identity() {
        use crate::data::synthetic_digits;
        let (pixels, labels) = synthetic_digits(3, 8);
        let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let images = Tensor::new(vec![8, 1, 28, 28], data).unwrap();
        let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let ds = Dataset::new(images, labels, 10).unwrap();
        let out = train(
            &ds,
            Architecture::LinearSoftmax,
            &TrainConfig { epochs: 1, seed: 1, heldout_fraction: 0.0, ..TrainConfig::default() },
        )
        .unwrap();
        let mut c = PassCounter::default();
        for (p, rho) in [(0.0, 1.5), (1.0, 1.0)] {
            let e = compose(&[EstimatorSpec::Dim { p, rho }]).unwrap();
            let g = e.estimate(&out.model, &ds.images, &ds.labels, &ctx(4), &mut c).unwrap();
            let g_id = estimate_identity(&out.model, &ds.images, &ds.labels, &ctx(4), &mut c).unwrap();
            for (a, b) in g.data().iter().zip(g_id.data()) {
                assert!((a - b).abs() < 1e-9, "p={p} rho={rho}");
            }
        }
    }

    #[test]
    fn tim_uniform_gradient_is_unchanged() {
        let g = Tensor::filled(&[2, 1, 8, 8], 0.25);
        let kernel = gaussian_kernel(7, 3.0).unwrap();
        let filtered = tim_filter(&g, &kernel).unwrap();
        for (a, b) in filtered.data().iter().zip(g.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn estimator_is_deterministic_given_context() {
        let (model, ds) = trained_toy(15);
        let batch = ds.select(&[0, 1, 2, 3, 4, 5]);
        let e = compose(&[EstimatorSpec::Mist {
            n: 3,
            lambda_min: 0.2,
            shift_enabled: false,
            addend_enabled: true,
            fixed_lambda: None,
        }])
        .unwrap();
        let mut c = PassCounter::default();
        let g1 = e.estimate(&model, &batch.images, &batch.labels, &ctx(6), &mut c).unwrap();
        let g2 = e.estimate(&model, &batch.images, &batch.labels, &ctx(6), &mut c).unwrap();
        assert_eq!(g1, g2);
        let g3 = e
            .estimate(
                &model,
                &batch.images,
                &batch.labels,
                &EstimateContext { iteration: 1, ..ctx(6) },
                &mut c,
            )
            .unwrap();
        assert_ne!(g1, g3);
    }
}
