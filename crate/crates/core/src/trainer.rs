//! Training loop, AdamW, checkpoints and split evaluation.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataio::{self, InstanceBag, ManifestEntry};
use crate::encoder::{encode, encode_graph, init_encoder, patchify, EncoderParams, EncoderVars, ModelDims};
use crate::error::{Error, Result};
use crate::evalstat::{self, MetricsReport, ScoredVideo};
use crate::losses::{self, loss_graph, read_losses, LossBreakdown, LossConfig};
use crate::mregnet::{self, head_graph, init_head, HeadConfig, HeadMode, HeadParams, HeadVars, ModelOutput};
use crate::synthgen::{generate_sample, mix_seed, DatasetConfig, Split};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MREG1";

const ENCODER_TAG: u64 = 1;
const HEAD_TAG: u64 = 2;
const SHUFFLE_TAG: u64 = 1 << 20;
const TRAIN_ALPHA_TAG: u64 = 2 << 20;
const EVAL_ALPHA_TAG: u64 = 3 << 20;

// ---- configuration ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Select the instance with the highest MR probability; otherwise pick one at random.
    pub use_fs: bool,
    /// Apply feature amplification; otherwise beta is 0.
    pub use_amp: bool,
    /// Three gated experts; otherwise a single ungated one.
    pub use_moe: bool,
    pub use_lexpert: bool,
    pub mode: HeadMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_fs: true,
            use_amp: true,
            use_moe: true,
            use_lexpert: true,
            mode: HeadMode::Regression,
        }
    }
}

impl Ablation {
    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let flag = || {
            value
                .parse::<bool>()
                .map_err(|_| Error::Config(format!("ablation {key} expects true or false, got {value:?}")))
        };
        match key {
            "use_fs" => self.use_fs = flag()?,
            "use_amp" => self.use_amp = flag()?,
            "use_moe" => self.use_moe = flag()?,
            "use_lexpert" => self.use_lexpert = flag()?,
            "mode" => {
                self.mode = match value {
                    "regression" => HeadMode::Regression,
                    "classification" => HeadMode::Classification,
                    _ => return Err(Error::Config(format!("unknown mode {value:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown ablation flag {key:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to 0 over all optimizer steps.
    Cosine,
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine if total <= 1 => base,
            LrSchedule::Cosine => {
                let frac = step as f64 / total as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub dims: ModelDims,
    pub beta: f64,
    pub thresholds: (f64, f64),
    pub lambdas: (f64, f64),
    pub focal_gamma: f64,
    pub binary_weights: [f64; 2],
    /// Weight the grade classes by inverse training frequency in the focal terms.
    pub balance_grades: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub freeze_encoder: bool,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-5,
            lr_schedule: LrSchedule::Constant,
            batch_size: 1,
            weight_decay: 0.01,
            seed: 0,
            dims: ModelDims::default(),
            beta: 2.0,
            thresholds: (0.5, 1.5),
            lambdas: (losses::DEFAULT_LAMBDA1, losses::DEFAULT_LAMBDA2),
            focal_gamma: losses::DEFAULT_GAMMA,
            binary_weights: losses::DEFAULT_BINARY_WEIGHTS,
            balance_grades: true,
            grad_clip: 5.0,
            freeze_encoder: false,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) || !(self.focal_gamma >= 0.0) {
            return bad("weight_decay, grad_clip and focal_gamma must be non-negative".into());
        }
        if !(self.lambdas.0 >= 0.0 && self.lambdas.1 >= 0.0) {
            return bad(format!("lambdas {:?} must be non-negative", self.lambdas));
        }
        self.dims.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.head_config().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            beta: self.beta,
            thresholds: self.thresholds,
            use_fs: self.ablation.use_fs,
            use_amp: self.ablation.use_amp,
            use_moe: self.ablation.use_moe,
            mode: self.ablation.mode,
        }
    }

    pub fn loss_config(&self, train_grades: &[u8]) -> LossConfig {
        LossConfig {
            gamma: self.focal_gamma,
            binary_weights: self.binary_weights,
            grade_weights: if self.balance_grades {
                losses::inverse_frequency_weights(train_grades)
            } else {
                [1.0; 3]
            },
            lambda1: self.lambdas.0,
            lambda2: self.lambdas.1,
            use_lexpert: self.ablation.use_lexpert,
        }
    }
}

// ---- model ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

impl Model {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        Ok(Self {
            dims,
            encoder: init_encoder(&dims, mix_seed(seed, ENCODER_TAG))?,
            head: init_head(&dims, mix_seed(seed, HEAD_TAG))?,
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v: Vec<_> = self.encoder.named().into_iter().collect();
        v.extend(self.head.named());
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v: Vec<_> = self.encoder.named_mut().into_iter().collect();
        v.extend(self.head.named_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Inference on one bag.
    pub fn predict(&self, bag: &InstanceBag, config: &HeadConfig, alpha_override: Option<usize>) -> Result<ModelOutput> {
        let features = encode(bag, &self.encoder, &self.dims)?;
        mregnet::forward(&features, &self.head, config, alpha_override)
    }
}

// ---- optimizer --------------------------------------------------------------

/// Adam with decoupled weight decay: each step first shrinks the parameters
/// by `1 - lr * weight_decay`, then applies the bias-corrected Adam update.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.m.len(), "parameter group count");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.len() {
                p[i] *= 1.0 - self.lr * self.weight_decay;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm` (0 disables);
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

// ---- data -------------------------------------------------------------------

/// A manifest entry with its frames already cropped, resized and bagged.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub entry: ManifestEntry,
    pub bag: InstanceBag,
}

pub fn prepare_sample(root: &Path, entry: &ManifestEntry, dims: &ModelDims) -> Result<PreparedSample> {
    let sample = dataio::load_sample(root, entry)?;
    let bag = dataio::sample_to_bag(&sample, (dims.image, dims.image), dims.instances, dims.clip_len)?;
    Ok(PreparedSample {
        entry: entry.clone(),
        bag,
    })
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub root: PathBuf,
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

impl Dataset {
    /// Loads every split listed in `root/manifest.jsonl`.
    pub fn load(root: &Path, dims: &ModelDims) -> Result<Self> {
        Self::load_splits(root, dims, &Split::ALL)
    }

    pub fn load_splits(root: &Path, dims: &ModelDims, splits: &[Split]) -> Result<Self> {
        let entries = dataio::read_manifest(&root.join(dataio::MANIFEST_FILE))?;
        let mut ds = Dataset {
            root: root.to_path_buf(),
            ..Default::default()
        };
        for e in entries.iter().filter(|e| splits.contains(&e.split)) {
            let s = prepare_sample(root, e, dims)?;
            match e.split {
                Split::Train => ds.train.push(s),
                Split::Val => ds.val.push(s),
                Split::Test => ds.test.push(s),
            }
        }
        Ok(ds)
    }

    /// Generates a dataset in memory, identical to writing it with
    /// `gen_dataset` and loading it back.
    pub fn synthesize(config: &DatasetConfig, seed: u64, dims: &ModelDims) -> Result<Self> {
        let mut ds = Dataset::default();
        let mut index = 0;
        for split in Split::ALL {
            for (grade, &count) in config.counts.get(split).iter().enumerate() {
                for _ in 0..count {
                    let s = generate_sample(index, grade as u8, split, config, seed)?;
                    index += 1;
                    let bag = dataio::sample_to_bag(&s, (dims.image, dims.image), dims.instances, dims.clip_len)?;
                    let p = PreparedSample {
                        entry: ManifestEntry::from_sample(&s, format!("videos/{}", s.id)),
                        bag,
                    };
                    match split {
                        Split::Train => ds.train.push(p),
                        Split::Val => ds.val.push(p),
                        Split::Test => ds.test.push(p),
                    }
                }
            }
        }
        Ok(ds)
    }

    pub fn split(&self, split: Split) -> &[PreparedSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

// ---- evaluation -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub grade: u8,
    pub jet_clip_index: Option<usize>,
    pub output: ModelOutput,
}

impl Prediction {
    /// MR present when the selected instance's stage-I MR probability exceeds 0.5.
    pub fn binary_pred(&self) -> u8 {
        u8::from(self.output.mr_probability() > 0.5)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    /// MR videos with exactly one full-intensity jet clip.
    pub eligible: usize,
    /// Of those, how many selected that clip.
    pub hits: usize,
}

impl SelectionStats {
    pub fn fidelity(&self) -> f64 {
        if self.eligible == 0 {
            0.0
        } else {
            100.0 * self.hits as f64 / self.eligible as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<Prediction>,
    pub report: MetricsReport,
    /// Percent, MR present vs absent.
    pub binary_accuracy: f64,
    pub selection: SelectionStats,
    /// Mean regression value per true grade (NaN when a grade is absent).
    pub mean_regression: [f64; 3],
}

impl Evaluation {
    pub fn scored_videos(&self) -> Vec<ScoredVideo> {
        self.predictions
            .iter()
            .map(|p| ScoredVideo {
                id: p.id.clone(),
                label: p.grade,
                output: p.output.clone(),
            })
            .collect()
    }
}

fn random_alpha(seed: u64, tag: u64, index: usize, instances: usize) -> usize {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, tag + index as u64)).gen_range(0..instances)
}

/// Forward pass over `samples` in order. When instance selection is off the
/// random instance of sample `k` depends only on the seed and `k`.
pub fn evaluate(model: &Model, config: &TrainConfig, samples: &[PreparedSample]) -> Result<Evaluation> {
    let head = config.head_config();
    let mut predictions = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        let alpha = (!head.use_fs).then(|| random_alpha(config.seed, EVAL_ALPHA_TAG, k, model.dims.instances));
        let output = model.predict(&s.bag, &head, alpha).map_err(|e| match e {
            Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("{}: {m}", s.entry.id)),
            other => other,
        })?;
        predictions.push(Prediction {
            id: s.entry.id.clone(),
            grade: s.entry.grade,
            jet_clip_index: s.entry.jet_clip_index,
            output,
        });
    }
    Ok(summarize(predictions))
}

pub fn summarize(predictions: Vec<Prediction>) -> Evaluation {
    let labels: Vec<u8> = predictions.iter().map(|p| p.grade).collect();
    let preds: Vec<u8> = predictions.iter().map(|p| p.output.grade_pred).collect();
    let report = evalstat::metrics(&evalstat::confusion(&preds, &labels).expect("grades in range"));
    let bl: Vec<u8> = labels.iter().map(|&g| u8::from(g > 0)).collect();
    let bp: Vec<u8> = predictions.iter().map(Prediction::binary_pred).collect();
    let binary_accuracy = evalstat::accuracy(&bp, &bl);
    let mut selection = SelectionStats::default();
    let mut sums = [(0.0, 0usize); 3];
    for p in &predictions {
        if let (true, Some(j)) = (p.grade > 0, p.jet_clip_index) {
            selection.eligible += 1;
            selection.hits += usize::from(p.output.alpha == j);
        }
        let s = &mut sums[p.grade as usize];
        s.0 += p.output.regression_value;
        s.1 += 1;
    }
    let mean_regression = sums.map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 });
    Evaluation {
        predictions,
        report,
        binary_accuracy,
        selection,
        mean_regression,
    }
}

/// Evaluates a checkpoint on one split of a dataset.
pub fn evaluate_split(checkpoint: &Checkpoint, data: &Dataset, split: Split) -> Result<Evaluation> {
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::invalid(format!("split {} is empty", split.as_str())));
    }
    evaluate(&checkpoint.model, &checkpoint.config, samples)
}

// ---- history ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub sample_id: String,
    pub alpha: usize,
    pub l2cls: f64,
    pub l3cls: f64,
    pub lexpert: f64,
    pub lsmooth: f64,
    pub lsparsity: f64,
    pub total: f64,
    /// Gradient norm before clipping; empty on accumulation steps.
    pub grad_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_accuracy: f64,
    pub val_binary_accuracy: f64,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn write(&self, step_path: &Path, epoch_path: &Path) -> Result<()> {
        write_csv(step_path, &self.steps)?;
        write_csv(epoch_path, &self.epochs)
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let fail = |e: csv::Error| Error::format("history csv", format!("{}: {e}", path.display()));
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---- training ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub epoch: usize,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub epoch: usize,
    pub step: usize,
    pub sample_id: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Highest validation accuracy; later epochs win ties.
    pub best: Checkpoint,
    /// Parameters after the last completed (finite) step.
    pub last: Checkpoint,
    pub history: History,
    pub divergence: Option<DivergenceReport>,
}

struct StepGraph {
    graph: Graph,
    vars: Vec<Var>,
    alpha: usize,
    losses: losses::LossVars,
}

fn build_step(
    model: &Model,
    sample: &PreparedSample,
    head_cfg: &HeadConfig,
    loss_cfg: &LossConfig,
    freeze_encoder: bool,
    alpha_override: Option<usize>,
) -> Result<StepGraph> {
    let mut g = Graph::new();
    let patches = g.constant(patchify(&sample.bag, &model.dims)?);
    let ev = EncoderVars::register(&mut g, &model.encoder, !freeze_encoder);
    let hv = HeadVars::register(&mut g, &model.head, true);
    let features = encode_graph(&mut g, patches, &ev, &model.dims);
    let beta = g.constant(Tensor::scalar(head_cfg.effective_beta()));
    let out = head_graph(&mut g, &features, &hv, beta, head_cfg, alpha_override);
    let y3 = sample.entry.grade;
    let lv = loss_graph(&mut g, &out, usize::from(y3 > 0), y3, head_cfg.mode, loss_cfg);
    let mut vars: Vec<Var> = ev.all().to_vec();
    vars.extend(hv.all());
    Ok(StepGraph {
        graph: g,
        vars,
        alpha: out.alpha,
        losses: lv,
    })
}

/// Loss breakdown of one sample under the current parameters.
pub fn sample_loss(model: &Model, config: &TrainConfig, sample: &PreparedSample, train_grades: &[u8]) -> Result<LossBreakdown> {
    let head = config.head_config();
    let lc = config.loss_config(train_grades);
    let sg = build_step(model, sample, &head, &lc, config.freeze_encoder, None)?;
    read_losses(&sg.graph, &sg.losses, &lc)
}

pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and val splits"));
    }
    let dims = config.dims;
    let head_cfg = config.head_config();
    let grades: Vec<u8> = data.train.iter().map(|s| s.entry.grade).collect();
    let loss_cfg = config.loss_config(&grades);
    let mut model = Model::init(dims, config.seed)?;
    let first_trainable = if config.freeze_encoder { model.encoder.named().len() } else { 0 };
    let sizes: Vec<usize> = model.named()[first_trainable..].iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay, &sizes);

    let init_eval = evaluate(&model, config, &data.val)?;
    let checkpoint = |model: &Model, epoch: usize, val_accuracy: f64| Checkpoint {
        config: config.clone(),
        model: model.clone(),
        epoch,
        val_accuracy,
    };
    let mut best = checkpoint(&model, 0, init_eval.report.accuracy);
    let mut last_acc = init_eval.report.accuracy;
    let mut history = History::default();
    let mut accum: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut pending = 0usize;
    let mut step = 0usize;
    let n = data.train.len();
    let total_updates = config.epochs * n.div_ceil(config.batch_size);

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, SHUFFLE_TAG + epoch as u64)));
        let mut alpha_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, TRAIN_ALPHA_TAG + epoch as u64));
        let mut loss_sum = 0.0;
        for (pos, &idx) in order.iter().enumerate() {
            let sample = &data.train[idx];
            let alpha_override = (!head_cfg.use_fs).then(|| alpha_rng.gen_range(0..dims.instances));
            let sg = build_step(&model, sample, &head_cfg, &loss_cfg, config.freeze_encoder, alpha_override)?;
            let diverged = |reason: String| DivergenceReport {
                epoch,
                step,
                sample_id: sample.entry.id.clone(),
                reason,
            };
            let breakdown = match read_losses(&sg.graph, &sg.losses, &loss_cfg) {
                Ok(b) => b,
                Err(Error::NonFinite { term, value }) => {
                    let report = diverged(format!("loss term {term} became {value}"));
                    return Ok(stop(best, checkpoint(&model, epoch - 1, last_acc), history, report));
                }
                Err(e) => return Err(e),
            };
            let grads = sg.graph.backward(sg.losses.total);
            for (acc, &v) in accum.iter_mut().zip(&sg.vars[first_trainable..]) {
                if let Some(gv) = grads.get(v) {
                    acc.iter_mut().zip(gv).for_each(|(a, g)| *a += g);
                }
            }
            pending += 1;
            loss_sum += breakdown.total;
            let mut grad_norm = None;
            if pending == config.batch_size || pos + 1 == n {
                let inv = 1.0 / pending as f64;
                accum.iter_mut().flatten().for_each(|g| *g *= inv);
                let norm = clip_global_norm(&mut accum, config.grad_clip);
                if !norm.is_finite() {
                    let report = diverged(format!("gradient norm became {norm}"));
                    return Ok(stop(best, checkpoint(&model, epoch - 1, last_acc), history, report));
                }
                let before = model.clone();
                opt.lr = config.lr_schedule.rate(config.learning_rate, opt.steps() as usize, total_updates);
                {
                    let mut named = model.named_mut();
                    let mut params: Vec<&mut [f64]> =
                        named[first_trainable..].iter_mut().map(|(_, t)| t.data_mut()).collect();
                    opt.step(&mut params, &accum);
                }
                model.head.logit_scale.data_mut().iter_mut().for_each(|v| *v = v.min(mregnet::MAX_LOGIT_SCALE));
                if !model.is_finite() {
                    let report = diverged("parameters became non-finite".into());
                    return Ok(stop(best, checkpoint(&before, epoch - 1, last_acc), history, report));
                }
                accum.iter_mut().for_each(|a| a.iter_mut().for_each(|g| *g = 0.0));
                pending = 0;
                grad_norm = Some(norm);
            }
            history.steps.push(StepRecord {
                epoch,
                step,
                sample_id: sample.entry.id.clone(),
                alpha: sg.alpha,
                l2cls: breakdown.l2cls,
                l3cls: breakdown.l3cls,
                lexpert: breakdown.lexpert,
                lsmooth: breakdown.lsmooth,
                lsparsity: breakdown.lsparsity,
                total: breakdown.total,
                grad_norm,
            });
            step += 1;
        }
        let eval = evaluate(&model, config, &data.val)?;
        last_acc = eval.report.accuracy;
        history.epochs.push(EpochRecord {
            epoch,
            mean_train_loss: loss_sum / n as f64,
            val_accuracy: eval.report.accuracy,
            val_binary_accuracy: eval.binary_accuracy,
            val_macro_f1: eval.report.macro_avg.f1,
        });
        if eval.report.accuracy >= best.val_accuracy {
            best = checkpoint(&model, epoch, eval.report.accuracy);
        }
    }
    let last = checkpoint(&model, config.epochs, last_acc);
    Ok(TrainOutcome {
        best,
        last,
        history,
        divergence: None,
    })
}

fn stop(best: Checkpoint, last: Checkpoint, history: History, report: DivergenceReport) -> TrainOutcome {
    TrainOutcome {
        best,
        last,
        history,
        divergence: Some(report),
    }
}

// ---- checkpoint files -------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
    epoch: usize,
    val_accuracy: f64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.model.named();
        let header = CheckpointHeader {
            config: self.config.clone(),
            tensors: named
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            epoch: self.epoch,
            val_accuracy: self.val_accuracy,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format("checkpoint header", e.to_string()))?;
        let mut out = Vec::with_capacity(13 + json.len() + 8 * self.model.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |r: String| Error::format("checkpoint", r);
        if bytes.len() < 13 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(bad("missing MREG1 magic".into()));
        }
        let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let body = bytes.get(13..13 + len).ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        header.config.validate()?;
        let mut model = Model::init(header.config.dims, 0)?;
        let mut cursor = 13 + len;
        {
            let mut named = model.named_mut();
            if named.len() != header.tensors.len() {
                return Err(Error::shape(format!(
                    "checkpoint holds {} tensors, model has {}",
                    header.tensors.len(),
                    named.len()
                )));
            }
            for ((name, t), entry) in named.iter_mut().zip(&header.tensors) {
                if *name != entry.name || t.shape() != entry.shape.as_slice() {
                    return Err(Error::shape(format!(
                        "checkpoint tensor {} {:?} vs model {name} {:?}",
                        entry.name,
                        entry.shape,
                        t.shape()
                    )));
                }
                let n = t.len() * 8;
                let raw = bytes.get(cursor..cursor + n).ok_or_else(|| bad(format!("truncated data for {name}")))?;
                for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                    *dst = f64::from_le_bytes(chunk.try_into().unwrap());
                }
                cursor += n;
            }
        }
        if cursor != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - cursor)));
        }
        Ok(Self {
            config: header.config,
            model,
            epoch: header.epoch,
            val_accuracy: header.val_accuracy,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{SplitCounts, VideoDims};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            learning_rate: 1e-3,
            dims: ModelDims {
                d: 8,
                p: 4,
                instances: 3,
                clip_len: 4,
                image: 8,
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(cfg: &TrainConfig) -> Dataset {
        let ds_cfg = DatasetConfig {
            counts: SplitCounts {
                train: [2, 2, 2],
                val: [1, 1, 1],
                test: [1, 1, 1],
            },
            dims: VideoDims::default(),
            instances: 3,
        };
        Dataset::synthesize(&ds_cfg, 5, &cfg.dims).unwrap()
    }

    #[test]
    fn adamw_matches_hand_step_on_quadratic() {
        // f(p) = 0.5 * |p - c|^2, gradient p - c
        let c = [0.3, -1.2, 2.0];
        let mut p = vec![1.0, 0.5, -0.25];
        let g: Vec<f64> = p.iter().zip(&c).map(|(p, c)| p - c).collect();
        let (lr, wd) = (0.01, 0.1);
        let mut opt = AdamW::new(lr, wd, &[3]);
        let expected: Vec<f64> = p
            .iter()
            .zip(&g)
            .map(|(&p, &g)| {
                let decayed = p * (1.0 - lr * wd);
                let m = 0.1 * g / (1.0 - 0.9);
                let v = 0.001 * g * g / (1.0 - 0.999);
                decayed - lr * m / (v.sqrt() + 1e-8)
            })
            .collect();
        opt.step(&mut [&mut p[..]], &[g]);
        for (a, b) in p.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let n: f64 = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig { epochs: 0, ..tiny_config() };
        let data = tiny_dataset(&cfg);
        let out = train(&cfg, &data).unwrap();
        assert_eq!(out.best.model, Model::init(cfg.dims, cfg.seed).unwrap());
        assert_eq!(out.best.epoch, 0);
        assert!(out.history.steps.is_empty() && out.history.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_changes_parameters() {
        let cfg = tiny_config();
        let data = tiny_dataset(&cfg);
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.last.model, b.last.model);
        assert_eq!(a.history, b.history);
        assert_ne!(a.last.model, Model::init(cfg.dims, cfg.seed).unwrap());
        assert_eq!(a.history.steps.len(), 12);
        assert_eq!(a.history.epochs.len(), 2);
        assert!(a.divergence.is_none());
    }

    #[test]
    fn amp_flag_equals_zero_beta() {
        let data = tiny_dataset(&tiny_config());
        let mut off = tiny_config();
        off.ablation.use_amp = false;
        let zero = TrainConfig { beta: 0.0, ..tiny_config() };
        assert_eq!(train(&off, &data).unwrap().last.model, train(&zero, &data).unwrap().last.model);
    }

    #[test]
    fn frozen_encoder_keeps_encoder_weights() {
        let cfg = TrainConfig {
            freeze_encoder: true,
            ..tiny_config()
        };
        let data = tiny_dataset(&cfg);
        let out = train(&cfg, &data).unwrap();
        let init = Model::init(cfg.dims, cfg.seed).unwrap();
        assert_eq!(out.last.model.encoder, init.encoder);
        assert_ne!(out.last.model.head, init.head);
    }

    #[test]
    fn accumulation_and_ablations_run() {
        let base = tiny_config();
        let data = tiny_dataset(&base);
        let mut configs = vec![TrainConfig { batch_size: 4, ..base.clone() }];
        for (k, v) in [("use_fs", "false"), ("use_moe", "false"), ("use_lexpert", "false"), ("mode", "classification")] {
            let mut c = base.clone();
            c.ablation.set(k, v).unwrap();
            configs.push(c);
        }
        for c in configs {
            let out = train(&c, &data).unwrap();
            assert!(out.last.model.is_finite());
            let updates = out.history.steps.iter().filter(|s| s.grad_norm.is_some()).count();
            assert_eq!(updates, if c.batch_size == 4 { 4 } else { 12 });
        }
    }

    #[test]
    fn divergence_returns_last_finite_parameters() {
        let cfg = TrainConfig {
            learning_rate: 1e300,
            grad_clip: 0.0,
            weight_decay: 0.0,
            epochs: 3,
            ..tiny_config()
        };
        let data = tiny_dataset(&cfg);
        let out = train(&cfg, &data).unwrap();
        let report = out.divergence.expect("diverges");
        assert!(!report.reason.is_empty());
        assert!(out.last.model.is_finite());
        assert!(out.best.model.is_finite());
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let cfg = tiny_config();
        let data = tiny_dataset(&cfg);
        let out = train(&cfg, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.mreg");
        out.best.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, out.best);
        let a = evaluate_split(&out.best, &data, Split::Test).unwrap();
        let b = evaluate_split(&loaded, &data, Split::Test).unwrap();
        assert_eq!(a, b);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..5], b"MREG1");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(matches!(Checkpoint::from_bytes(b"NOPE0000000000"), Err(Error::Format { .. })));
    }

    #[test]
    fn checkpoint_with_other_dims_is_a_shape_error() {
        let cfg = tiny_config();
        let ck = Checkpoint {
            config: cfg.clone(),
            model: Model::init(cfg.dims, 1).unwrap(),
            epoch: 0,
            val_accuracy: 0.0,
        };
        let mut bytes = ck.to_bytes().unwrap();
        // rewrite the declared shape of the first tensor
        let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[13..13 + len].to_vec()).unwrap();
        let tampered = header.replacen("\"shape\":[48,8]", "\"shape\":[48,9]", 1);
        assert_ne!(header, tampered);
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes.split_off(13 + len));
        assert!(matches!(Checkpoint::from_bytes(&out), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn evaluation_counts_selection_hits() {
        let cfg = tiny_config();
        let data = tiny_dataset(&cfg);
        let model = Model::init(cfg.dims, 0).unwrap();
        let ev = evaluate(&model, &cfg, &data.test).unwrap();
        assert_eq!(ev.report.n, 3);
        assert_eq!(ev.selection.eligible, 2);
        let hits = ev
            .predictions
            .iter()
            .filter(|p| p.grade > 0 && p.jet_clip_index == Some(p.output.alpha))
            .count();
        assert_eq!(ev.selection.hits, hits);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "bogus": 1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "ablation": {"use_amp": false}}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert!(!c.ablation.use_amp && c.ablation.use_fs);
        let bad = TrainConfig {
            thresholds: (1.5, 0.5),
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut a = Ablation::default();
        assert!(a.set("use_fs", "maybe").is_err());
        assert!(a.set("nope", "true").is_err());
    }
}
