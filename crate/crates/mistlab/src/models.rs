//! The model zoo: small trainable classifiers, ensembles, training, and
//! weight persistence.
//!
//! Three architectures cover three genuinely different decision families
//! at desk scale: an affine softmax model, a two-hidden-layer MLP, and a
//! small convolutional network. Trained classifiers are immutable plain
//! data, safe to share across threads.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const MLP_WIDTH: usize = 128;
const CONV1_CHANNELS: usize = 8;
const CONV2_CHANNELS: usize = 16;

/// Counts of network forward evaluations and tape backward sweeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassCounter {
    pub forwards: u64,
    pub backwards: u64,
}

impl PassCounter {
    pub fn add(&mut self, other: PassCounter) {
        self.forwards += other.forwards;
        self.backwards += other.backwards;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    LinearSoftmax,
    Mlp,
    SmallConv,
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::LinearSoftmax => "linear-softmax",
            Architecture::Mlp => "mlp",
            Architecture::SmallConv => "small-conv",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "linear-softmax" => Ok(Architecture::LinearSoftmax),
            "mlp" => Ok(Architecture::Mlp),
            "small-conv" => Ok(Architecture::SmallConv),
            other => Err(Error::InvalidArgument(format!("unknown architecture tag '{other}'"))),
        }
    }
}

/// Anything that exposes a differentiable per-sample loss: a single
/// classifier or an equal-weight ensemble.
pub trait Model: Send + Sync {
    fn input_shape(&self) -> &[usize];
    fn num_classes(&self) -> usize;

    /// Build per-sample cross-entropy loss vectors for each label set,
    /// sharing a single forward pass through the network. The forward
    /// counter is incremented once per underlying network evaluation,
    /// independent of how many label sets piggyback on it.
    fn multi_loss_graph(
        &self,
        tape: &mut Tape,
        x: Var,
        label_sets: &[&[usize]],
        counter: &mut PassCounter,
    ) -> Result<Vec<Var>>;

    /// Argmax predictions for a batch.
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>>;

    fn loss_graph(
        &self,
        tape: &mut Tape,
        x: Var,
        labels: &[usize],
        counter: &mut PassCounter,
    ) -> Result<Var> {
        Ok(self.multi_loss_graph(tape, x, &[labels], counter)?[0])
    }
}

/// A trained classifier: an architecture tag plus named parameters.
#[derive(Clone, Debug)]
pub struct Classifier {
    arch: Architecture,
    input_shape: Vec<usize>,
    num_classes: usize,
    params: Vec<(String, Tensor)>,
}

impl Classifier {
    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    /// Assemble a classifier from explicit parameters. The parameter list
    /// must match the layout produced by [`Classifier::init`].
    pub fn from_parts(
        arch: Architecture,
        input_shape: &[usize],
        num_classes: usize,
        params: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let reference = Classifier::init(arch, input_shape, num_classes, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters for {}, got {}",
                reference.params.len(),
                arch.tag(),
                params.len()
            )));
        }
        for ((en, et), (gn, gt)) in reference.params.iter().zip(&params) {
            if en != gn || et.shape() != gt.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter '{gn}' {:?} does not match expected '{en}' {:?}",
                    gt.shape(),
                    et.shape()
                )));
            }
        }
        Ok(Classifier { arch, input_shape: input_shape.to_vec(), num_classes, params })
    }

    /// Fresh parameters from uniform fan-in initialization.
    pub fn init(arch: Architecture, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let d: usize = input_shape.iter().product();
        if d == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument("empty input shape or zero classes".into()));
        }
        let mut r = rng::stream(seed, &[0x1817, arch as u64]);
        let mut uniform = |shape: Vec<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..shape.iter().product::<usize>())
                .map(|_| r.gen_range(-bound..bound))
                .collect();
            Tensor::new(shape, data).expect("shape matches data")
        };
        let params: Vec<(String, Tensor)> = match arch {
            Architecture::LinearSoftmax => vec![
                ("w".into(), uniform(vec![d, num_classes], d)),
                ("b".into(), Tensor::zeros(&[num_classes])),
            ],
            Architecture::Mlp => vec![
                ("w1".into(), uniform(vec![d, MLP_WIDTH], d)),
                ("b1".into(), Tensor::zeros(&[MLP_WIDTH])),
                ("w2".into(), uniform(vec![MLP_WIDTH, MLP_WIDTH], MLP_WIDTH)),
                ("b2".into(), Tensor::zeros(&[MLP_WIDTH])),
                ("w3".into(), uniform(vec![MLP_WIDTH, num_classes], MLP_WIDTH)),
                ("b3".into(), Tensor::zeros(&[num_classes])),
            ],
            Architecture::SmallConv => {
                if input_shape.len() != 3 {
                    return Err(Error::InvalidArgument(format!(
                        "small-conv needs a (C,H,W) input shape, got {input_shape:?}"
                    )));
                }
                let (c0, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "small-conv needs extents divisible by 4, got {h}x{w}"
                    )));
                }
                let head_in = CONV2_CHANNELS * (h / 4) * (w / 4);
                vec![
                    ("conv1_w".into(), uniform(vec![CONV1_CHANNELS, c0, 3, 3], c0 * 9)),
                    ("conv1_b".into(), Tensor::zeros(&[CONV1_CHANNELS])),
                    ("conv2_w".into(), uniform(vec![CONV2_CHANNELS, CONV1_CHANNELS, 3, 3], CONV1_CHANNELS * 9)),
                    ("conv2_b".into(), Tensor::zeros(&[CONV2_CHANNELS])),
                    ("fc_w".into(), uniform(vec![head_in, num_classes], head_in)),
                    ("fc_b".into(), Tensor::zeros(&[num_classes])),
                ]
            }
        };
        Ok(Classifier { arch, input_shape: input_shape.to_vec(), num_classes, params })
    }

    /// Build the logits graph given parameter vars (trainable or constant).
    pub fn logits_graph(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let batch = tape.value(x).batch_len();
        if tape.value(x).sample_shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "model expects samples of shape {:?}, got {:?}",
                self.input_shape,
                tape.value(x).sample_shape()
            )));
        }
        let d: usize = self.input_shape.iter().product();
        match self.arch {
            Architecture::LinearSoftmax => {
                let flat = tape.reshape(x, vec![batch, d])?;
                let z = tape.matmul(flat, params[0])?;
                tape.add_bias(z, params[1])
            }
            Architecture::Mlp => {
                let flat = tape.reshape(x, vec![batch, d])?;
                let h1 = tape.matmul(flat, params[0])?;
                let h1 = tape.add_bias(h1, params[1])?;
                let h1 = tape.relu(h1);
                let h2 = tape.matmul(h1, params[2])?;
                let h2 = tape.add_bias(h2, params[3])?;
                let h2 = tape.relu(h2);
                let z = tape.matmul(h2, params[4])?;
                tape.add_bias(z, params[5])
            }
            Architecture::SmallConv => {
                let c1 = tape.conv2d(x, params[0], 1)?;
                let c1 = tape.add_channel_bias(c1, params[1])?;
                let c1 = tape.relu(c1);
                let p1 = tape.max_pool2(c1)?;
                let c2 = tape.conv2d(p1, params[2], 1)?;
                let c2 = tape.add_channel_bias(c2, params[3])?;
                let c2 = tape.relu(c2);
                let p2 = tape.max_pool2(c2)?;
                let head_in = tape.value(p2).sample_numel();
                let flat = tape.reshape(p2, vec![batch, head_in])?;
                let z = tape.matmul(flat, params[4])?;
                tape.add_bias(z, params[5])
            }
        }
    }

    fn push_params(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.leaf(t.clone(), requires_grad)).collect()
    }

    /// Softmax class probabilities for a batch (pure forward).
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.logits(x)?;
        let (b, c) = (logits.batch_len(), self.num_classes);
        let mut data = logits.into_data();
        for row in data.chunks_mut(c) {
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - maxv).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Tensor::new(vec![b, c], data)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let params = self.push_params(&mut tape, false);
        let z = self.logits_graph(&mut tape, xv, &params)?;
        Ok(tape.value(z).clone())
    }
}

impl Model for Classifier {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn multi_loss_graph(
        &self,
        tape: &mut Tape,
        x: Var,
        label_sets: &[&[usize]],
        counter: &mut PassCounter,
    ) -> Result<Vec<Var>> {
        let params = self.push_params(tape, false);
        let logits = self.logits_graph(tape, x, &params)?;
        counter.forwards += 1;
        label_sets.iter().map(|labels| tape.cross_entropy(logits, labels)).collect()
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(argmax_rows(&logits))
    }
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = t.sample_numel();
    t.data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

/// Equal-weight ensemble; its loss is the arithmetic mean of member
/// losses, so its input gradient is the mean of member gradients.
pub struct Ensemble {
    members: Vec<Classifier>,
}

impl Ensemble {
    pub fn new(members: Vec<Classifier>) -> Result<Self> {
        let first = members.first().ok_or(Error::EmptyBatch)?;
        for m in &members[1..] {
            if m.input_shape != first.input_shape || m.num_classes != first.num_classes {
                return Err(Error::ShapeMismatch(
                    "ensemble members must share input shape and class count".into(),
                ));
            }
        }
        Ok(Ensemble { members })
    }

    pub fn members(&self) -> &[Classifier] {
        &self.members
    }
}

impl Model for Ensemble {
    fn input_shape(&self) -> &[usize] {
        self.members[0].input_shape()
    }

    fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    fn multi_loss_graph(
        &self,
        tape: &mut Tape,
        x: Var,
        label_sets: &[&[usize]],
        counter: &mut PassCounter,
    ) -> Result<Vec<Var>> {
        let mut member_logits = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let params = m.push_params(tape, false);
            member_logits.push(m.logits_graph(tape, x, &params)?);
            counter.forwards += 1;
        }
        let k = self.members.len() as f64;
        label_sets
            .iter()
            .map(|labels| {
                let mut acc: Option<Var> = None;
                for &z in &member_logits {
                    let l = tape.cross_entropy(z, labels)?;
                    acc = Some(match acc {
                        None => l,
                        Some(a) => tape.add(a, l)?,
                    });
                }
                Ok(tape.scale(acc.expect("at least one member"), 1.0 / k))
            })
            .collect()
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        // argmax of the mean of member log-probabilities
        let b = x.batch_len();
        let c = self.num_classes();
        let mut acc = vec![0.0; b * c];
        for m in &self.members {
            let p = m.probabilities(x)?;
            for (a, &v) in acc.iter_mut().zip(p.data()) {
                *a += v.max(1e-300).ln();
            }
        }
        Ok(argmax_rows(&Tensor::new(vec![b, c], acc)?))
    }
}

/// Per-sample losses and the input gradient of their sum, for a single
/// batch. The backward counter is incremented by one tape sweep.
pub fn loss_and_input_grad(
    model: &dyn Model,
    x: &Tensor,
    labels: &[usize],
    counter: &mut PassCounter,
) -> Result<(Vec<f64>, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let losses = model.loss_graph(&mut tape, xv, labels, counter)?;
    let per_sample = tape.value(losses).data().to_vec();
    let root = tape.sum_all(losses);
    let grads = tape.backward(root)?;
    counter.backwards += 1;
    let g = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((per_sample, g))
}

/// Fraction of `ds` classified correctly, evaluated in bounded chunks.
pub fn accuracy(model: &dyn Model, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0usize;
    let chunk = 512;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + chunk).min(ds.len());
        let idx: Vec<usize> = (start..end).collect();
        let part = ds.select(&idx);
        let preds = model.predict(&part.images)?;
        correct += preds.iter().zip(&part.labels).filter(|(p, y)| p == y).count();
        start = end;
    }
    Ok(correct as f64 / ds.len() as f64)
}

// ── Training ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Fraction of the dataset held out for the reported accuracy.
    pub heldout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            seed: 0,
            heldout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.momentum < 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::InvalidArgument("heldout fraction must be in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Classifier,
    pub heldout_accuracy: f64,
    pub final_loss: f64,
}

/// Mini-batch gradient descent with classical momentum. Deterministic
/// given the config seed: it fixes initialization, the holdout split,
/// and per-epoch shuffling.
pub fn train(dataset: &Dataset, arch: Architecture, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let mut model =
        Classifier::init(arch, dataset.sample_shape(), dataset.num_classes, cfg.seed)?;

    // holdout split from a seeded permutation
    let mut split_rng = rng::stream(cfg.seed, &[0x5b17, arch as u64]);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for i in (1..order.len()).rev() {
        let j = split_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let held_n = ((dataset.len() as f64) * cfg.heldout_fraction).round() as usize;
    let held_n = held_n.min(dataset.len().saturating_sub(1));
    let (train_idx, held_idx) = order.split_at(dataset.len() - held_n);
    let train_set = dataset.select(train_idx);
    let held_set = if held_idx.is_empty() { train_set.clone() } else { dataset.select(held_idx) };

    let mut velocity: Vec<Tensor> =
        model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut last_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let mut epoch_rng = rng::stream(cfg.seed, &[0xe90c, arch as u64, epoch as u64]);
        let mut idx: Vec<usize> = (0..train_set.len()).collect();
        for i in (1..idx.len()).rev() {
            let j = epoch_rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for batch_idx in idx.chunks(cfg.batch_size) {
            let batch = train_set.select(batch_idx);
            let mut tape = Tape::new();
            let x = tape.leaf(batch.images.clone(), false);
            let param_vars = model.push_params(&mut tape, true);
            let logits = model.logits_graph(&mut tape, x, &param_vars)?;
            let losses = tape.cross_entropy(logits, &batch.labels)?;
            let loss = tape.mean_all(losses);
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += loss_val * batch_idx.len() as f64;
            let grads = tape.backward(loss)?;
            for ((param, var), vel) in
                model.params.iter_mut().zip(&param_vars).zip(velocity.iter_mut())
            {
                let g = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(param.1.shape()));
                *vel = vel.scale(cfg.momentum).add(&g)?;
                param.1 = param.1.sub(&vel.scale(cfg.learning_rate))?;
            }
        }
        last_loss = epoch_loss / train_set.len() as f64;
    }

    let heldout_accuracy = accuracy(&model, &held_set)?;
    Ok(TrainOutcome { model, heldout_accuracy, final_loss: last_loss })
}

// ── Weight persistence ───────────────────────────────────────────────

const WEIGHT_MAGIC: &[u8; 4] = b"MLAB";
const WEIGHT_VERSION: u32 = 1;
const META_INPUT_SHAPE: &str = "input_shape";

/// Serialize to the weight container: "MLAB", version u32 LE, the
/// architecture tag (u32 length + UTF-8), then one record per parameter:
/// name (u32 length + UTF-8), rank u64 LE, extents u64 LE, values f64 LE.
/// The input shape rides along as an extra record.
pub fn save_weights(model: &Classifier, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(WEIGHT_MAGIC);
    bytes.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    let tag = model.arch.tag().as_bytes();
    bytes.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    bytes.extend_from_slice(tag);
    let shape_record = Tensor::new(
        vec![model.input_shape.len()],
        model.input_shape.iter().map(|&e| e as f64).collect(),
    )?;
    let records = model
        .params
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .chain(std::iter::once((META_INPUT_SHAPE, &shape_record)));
    for (name, tensor) in records {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.rank() as u64).to_le_bytes());
        for &e in tensor.shape() {
            bytes.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.offset + n {
            return Err(Error::WeightTruncated {
                path: self.path.clone(),
                offset: self.offset,
                needed: self.offset + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32_le()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Dataset(format!("invalid UTF-8 in {}", self.path)))
    }

    fn done(&self) -> bool {
        self.offset == self.bytes.len()
    }
}

pub fn load_weights(path: &Path) -> Result<Classifier> {
    let bytes = fs::read(path)?;
    let name = path.display().to_string();
    if bytes.len() < 4 || &bytes[..4] != WEIGHT_MAGIC {
        let mut found = [0u8; 4];
        for (i, b) in bytes.iter().take(4).enumerate() {
            found[i] = *b;
        }
        return Err(Error::WeightBadMagic { path: name, found });
    }
    let mut r = Reader { bytes: &bytes, offset: 4, path: name.clone() };
    let version = r.u32_le()?;
    if version != WEIGHT_VERSION {
        return Err(Error::WeightBadVersion { path: name, found: version, expected: WEIGHT_VERSION });
    }
    let arch = Architecture::from_tag(&r.string()?)?;
    let mut params = Vec::new();
    let mut input_shape: Option<Vec<usize>> = None;
    while !r.done() {
        let pname = r.string()?;
        let rank = r.u64_le()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64_le()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
        }
        if pname == META_INPUT_SHAPE {
            input_shape = Some(data.iter().map(|&v| v as usize).collect());
        } else {
            params.push((pname, Tensor::new(shape, data)?));
        }
    }
    let input_shape = input_shape
        .ok_or_else(|| Error::Dataset(format!("{name}: missing input shape record")))?;
    let num_classes = params
        .iter()
        .rev()
        .find(|(n, _)| n == "b" || n == "b3" || n == "fc_b")
        .map(|(_, t)| t.numel())
        .ok_or_else(|| Error::Dataset(format!("{name}: missing head bias record")))?;
    Ok(Classifier { arch, input_shape, num_classes, params })
}

/// Load and verify the file holds the expected architecture.
pub fn load_weights_expecting(path: &Path, arch: Architecture) -> Result<Classifier> {
    let model = load_weights(path)?;
    if model.arch != arch {
        return Err(Error::ArchitectureMismatch {
            found: model.arch.tag().to_string(),
            expected: arch.tag().to_string(),
        });
    }
    Ok(model)
}
