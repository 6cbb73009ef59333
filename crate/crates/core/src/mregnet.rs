//! The MReg head.
//!
//! Stage I scores MR presence per instance and selects the instance `alpha`
//! with the highest MR probability. Stage II amplifies the video features
//! (`N(f + beta * Conv(f / |f|))`), routes them through three gated experts
//! paired with the three class slices of the patch-level text features, and
//! mixes the per-expert per-frame scores into one regression value read at
//! `alpha`, which thresholds turn into a grade.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Graph, Var};
use crate::encoder::{scaled_uniform, FeatureSet, FeatureVars, ModelDims};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EXPERTS: usize = 3;
pub const CONV_WIDTH: usize = 3;
pub const NORM_EPS: f64 = 1e-5;
/// Stage-I logits are cosine similarities times a learned scale
/// `1 / temperature`; the temperature starts at 0.07.
pub const INIT_TEMPERATURE: f64 = 0.07;
/// Upper bound on the logit scale.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Regression,
    Classification,
}

/// Head switches; the ablation ladder toggles these.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub beta: f64,
    pub thresholds: (f64, f64),
    pub use_fs: bool,
    pub use_amp: bool,
    pub use_moe: bool,
    pub mode: HeadMode,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            thresholds: (0.5, 1.5),
            use_fs: true,
            use_amp: true,
            use_moe: true,
            mode: HeadMode::Regression,
        }
    }
}

impl HeadConfig {
    /// Amplification coefficient actually applied.
    pub fn effective_beta(&self) -> f64 {
        if self.use_amp {
            self.beta
        } else {
            0.0
        }
    }

    pub fn experts(&self) -> usize {
        if self.use_moe {
            EXPERTS
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.thresholds.0 < self.thresholds.1) {
            return Err(Error::invalid(format!("thresholds {:?} must be increasing", self.thresholds)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::invalid(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.mode == HeadMode::Classification && !self.use_moe {
            return Err(Error::invalid("classification mode needs the three experts as class logits"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `[1]`, stage-I logit scale `1 / temperature`.
    pub logit_scale: Tensor,
    /// `[D, D, k]`
    pub conv_kernel: Tensor,
    /// `[D]`
    pub conv_bias: Tensor,
    /// `[3, D, D]`
    pub expert_video: Tensor,
    /// `[3, D, D]`
    pub expert_text: Tensor,
    /// `[1]`, shared affine calibration of raw fusion scores.
    pub score_weight: Tensor,
    /// `[1]`
    pub score_bias: Tensor,
}

pub fn init_head(dims: &ModelDims, seed: u64) -> Result<HeadParams> {
    dims.validate()?;
    let d = dims.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(HeadParams {
        logit_scale: Tensor::scalar(1.0 / INIT_TEMPERATURE),
        conv_kernel: scaled_uniform(&[d, d, CONV_WIDTH], d * CONV_WIDTH, d * CONV_WIDTH, &mut rng),
        conv_bias: Tensor::zeros(&[d]),
        expert_video: scaled_uniform(&[EXPERTS, d, d], d, d, &mut rng),
        expert_text: scaled_uniform(&[EXPERTS, d, d], d, d, &mut rng),
        score_weight: Tensor::scalar(1.0),
        score_bias: Tensor::scalar(0.0),
    })
}

impl HeadParams {
    pub fn named(&self) -> [(&'static str, &Tensor); 7] {
        [
            ("head.logit_scale", &self.logit_scale),
            ("head.conv_kernel", &self.conv_kernel),
            ("head.conv_bias", &self.conv_bias),
            ("head.expert_video", &self.expert_video),
            ("head.expert_text", &self.expert_text),
            ("head.score_weight", &self.score_weight),
            ("head.score_bias", &self.score_bias),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 7] {
        [
            ("head.logit_scale", &mut self.logit_scale),
            ("head.conv_kernel", &mut self.conv_kernel),
            ("head.conv_bias", &mut self.conv_bias),
            ("head.expert_video", &mut self.expert_video),
            ("head.expert_text", &mut self.expert_text),
            ("head.score_weight", &mut self.score_weight),
            ("head.score_bias", &mut self.score_bias),
        ]
    }

    pub fn check(&self, dims: &ModelDims) -> Result<()> {
        let d = dims.d;
        let expect: [(&str, &Tensor, Vec<usize>); 7] = [
            ("logit_scale", &self.logit_scale, vec![1]),
            ("conv_kernel", &self.conv_kernel, vec![d, d, CONV_WIDTH]),
            ("conv_bias", &self.conv_bias, vec![d]),
            ("expert_video", &self.expert_video, vec![EXPERTS, d, d]),
            ("expert_text", &self.expert_text, vec![EXPERTS, d, d]),
            ("score_weight", &self.score_weight, vec![1]),
            ("score_bias", &self.score_bias, vec![1]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!("head {name} is {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn amplifier(&self, beta: f64) -> AmplifierParams {
        AmplifierParams {
            beta,
            conv_kernel: self.conv_kernel.clone(),
            conv_bias: self.conv_bias.clone(),
        }
    }

    pub fn experts(&self) -> ExpertBank {
        ExpertBank {
            video: self.expert_video.clone(),
            text: self.expert_text.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmplifierParams {
    pub beta: f64,
    /// `[D, D, k]`, `k` odd.
    pub conv_kernel: Tensor,
    /// `[D]`
    pub conv_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank {
    /// `[3, D, D]`
    pub video: Tensor,
    /// `[3, D, D]`
    pub text: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub logit_scale: Var,
    pub conv_kernel: Var,
    pub conv_bias: Var,
    pub expert_video: Var,
    pub expert_text: Var,
    pub score_weight: Var,
    pub score_bias: Var,
}

impl HeadVars {
    pub fn register(g: &mut Graph, p: &HeadParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        Self {
            logit_scale: leaf(&p.logit_scale),
            conv_kernel: leaf(&p.conv_kernel),
            conv_bias: leaf(&p.conv_bias),
            expert_video: leaf(&p.expert_video),
            expert_text: leaf(&p.expert_text),
            score_weight: leaf(&p.score_weight),
            score_bias: leaf(&p.score_bias),
        }
    }

    pub fn all(&self) -> [Var; 7] {
        [
            self.logit_scale,
            self.conv_kernel,
            self.conv_bias,
            self.expert_video,
            self.expert_text,
            self.score_weight,
            self.score_bias,
        ]
    }
}

// ---- stage I ----------------------------------------------------------------

/// Per-instance two-class probabilities `[I, 2]`: cosine similarity of the
/// time-pooled video feature with each class embedding of the instance,
/// times `scale`, then softmax.
pub fn stage1_probs_graph(g: &mut Graph, f_video: Var, f_text2: Var, scale: Var) -> Var {
    let pooled = g.mean_axis(f_video, 1);
    let v = g.l2_normalize_last(pooled);
    let t = g.l2_normalize_last(f_text2);
    let classes = g.shape(f_text2)[1];
    let cols: Vec<Var> = (0..classes)
        .map(|c| {
            let tc = g.select(t, 1, c);
            g.rowdot(v, tc)
        })
        .collect();
    let stacked = g.stack(&cols);
    let cos = g.transpose(stacked);
    let logits = g.scale(cos, scale);
    g.softmax_last(logits)
}

pub fn stage1_probs(f_video: &Tensor, f_text2: &Tensor, temperature: f64) -> Result<Tensor> {
    let (vs, ts) = (f_video.shape(), f_text2.shape());
    if vs.len() != 3 || ts.len() != 3 || vs[0] != ts[0] || vs[2] != ts[2] {
        return Err(Error::shape(format!("f_video {vs:?} vs f_text2 {ts:?}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mut g = Graph::new();
    let v = g.constant(f_video.clone());
    let t = g.constant(f_text2.clone());
    let s = g.constant(Tensor::scalar(1.0 / temperature));
    let p = stage1_probs_graph(&mut g, v, t, s);
    Ok(g.tensor(p))
}

/// Index of the instance with the highest MR probability (column 1 of
/// `probs2: [I, 2]`); ties go to the lowest index.
pub fn select_instance(probs2: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..probs2.len() / 2 {
        if probs2[2 * i + 1] > probs2[2 * best + 1] {
            best = i;
        }
    }
    best
}

// ---- stage II: amplification ------------------------------------------------

/// `N(f + beta * Conv(f / |f|))` for `f: [I, T, D]`; `N` z-scores each channel
/// over the instance and time axes.
pub fn amplify_graph(g: &mut Graph, f_video: Var, kernel: Var, bias: Var, beta: Var) -> Var {
    let unit = g.l2_normalize_last(f_video);
    let conv = g.conv1d_time(unit, kernel, bias);
    let boost = g.scale(conv, beta);
    let sum = g.add(f_video, boost);
    g.zscore_channels(sum, NORM_EPS)
}

pub fn amplify(f_video: &Tensor, params: &AmplifierParams) -> Result<Tensor> {
    let (vs, ks) = (f_video.shape(), params.conv_kernel.shape());
    if vs.len() != 3 || ks.len() != 3 || ks[0] != vs[2] || ks[1] != vs[2] || ks[2] % 2 == 0 {
        return Err(Error::shape(format!("f_video {vs:?} vs conv kernel {ks:?}")));
    }
    if params.conv_bias.shape() != [vs[2]] {
        return Err(Error::shape(format!("conv bias {:?}", params.conv_bias.shape())));
    }
    let mut g = Graph::new();
    let f = g.constant(f_video.clone());
    let k = g.constant(params.conv_kernel.clone());
    let b = g.constant(params.conv_bias.clone());
    let beta = g.constant(Tensor::scalar(params.beta));
    let out = amplify_graph(&mut g, f, k, b, beta);
    Ok(g.tensor(out))
}

/// The channel z-score alone, `N(f)`.
pub fn normalize_features(f_video: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let f = g.constant(f_video.clone());
    let out = g.zscore_channels(f, NORM_EPS);
    g.tensor(out)
}

// ---- stage II: mixture of experts -------------------------------------------

/// Softmax over experts of the Frobenius norms of `matrices: [E, D, D]`.
pub fn expert_gates_graph(g: &mut Graph, matrices: Var) -> Var {
    let norms = g.frobenius_norms(matrices);
    g.softmax_last(norms)
}

pub fn expert_gates(matrices: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let m = g.constant(matrices.clone());
    let out = expert_gates_graph(&mut g, m);
    g.tensor(out)
}

/// Per-expert video features `[E, I, T, D]`: `(f_amp W_e) * gate_e`.
pub fn expert_video_features_graph(g: &mut Graph, f_amp: Var, weights: Var, gates: Var) -> Var {
    let experts = g.shape(gates)[0];
    let parts: Vec<Var> = (0..experts)
        .map(|e| {
            let w = g.select(weights, 0, e);
            let mapped = g.matmul(f_amp, w);
            let gate = g.select(gates, 0, e);
            g.scale(mapped, gate)
        })
        .collect();
    g.stack(&parts)
}

pub fn expert_video_features(f_amp: &Tensor, bank: &ExpertBank) -> Result<Tensor> {
    check_bank(bank, *f_amp.shape().last().unwrap_or(&0))?;
    let mut g = Graph::new();
    let f = g.constant(f_amp.clone());
    let w = g.constant(bank.video.clone());
    let gates = expert_gates_graph(&mut g, w);
    let out = expert_video_features_graph(&mut g, f, w, gates);
    Ok(g.tensor(out))
}

fn check_bank(bank: &ExpertBank, d: usize) -> Result<()> {
    for (side, t) in [("video", &bank.video), ("text", &bank.text)] {
        if t.shape() != [EXPERTS, d, d] {
            return Err(Error::shape(format!("{side} experts {:?}, expected [3, {d}, {d}]", t.shape())));
        }
    }
    Ok(())
}

/// Dot-product fusion of each expert's video features with its text slice.
///
/// `video_experts: [E, I, T, D]`; `text_slices: [E]` vars of shape `[I, T, D]`
/// holding the patch-averaged text features each expert reads. Expert `e`
/// maps its slice by `W_text[e] * gate_e`, and the frame score is
/// `a * <v, t> / sqrt(D) + b`. Because the text map is linear, averaging over
/// patches before the dot product equals averaging per-patch similarities.
pub fn fuse_scores_graph(
    g: &mut Graph,
    video_experts: Var,
    text_slices: &[Var],
    text_weights: Var,
    text_gates: Var,
    score_weight: Var,
    score_bias: Var,
) -> Var {
    let d = *g.shape(video_experts).last().expect("rank 4");
    let raws: Vec<Var> = text_slices
        .iter()
        .enumerate()
        .map(|(e, &slice)| {
            let w = g.select(text_weights, 0, e);
            let mapped = g.matmul(slice, w);
            let gate = g.select(text_gates, 0, e);
            let text = g.scale(mapped, gate);
            let video = g.select(video_experts, 0, e);
            let dot = g.rowdot(video, text);
            g.mul_const(dot, 1.0 / (d as f64).sqrt())
        })
        .collect();
    let raw = g.stack(&raws);
    let scaled = g.scale(raw, score_weight);
    g.add_scalar(scaled, score_bias)
}

/// Patch-averaged class slices of `f_text3: [I, T, P, 3, D]`, one per class.
pub fn text_class_slices(g: &mut Graph, f_text3: Var) -> Vec<Var> {
    let pooled = g.mean_axis(f_text3, 2);
    (0..g.shape(pooled)[2]).map(|c| g.select(pooled, 2, c)).collect()
}

pub fn fuse_scores(
    video_experts: &Tensor,
    f_text3: &Tensor,
    bank: &ExpertBank,
    score_weight: f64,
    score_bias: f64,
) -> Result<Tensor> {
    let (vs, ts) = (video_experts.shape(), f_text3.shape());
    if vs.len() != 4 || ts.len() != 5 || vs[0] != EXPERTS || ts[3] != EXPERTS || vs[1..3] != ts[0..2] || vs[3] != ts[4] {
        return Err(Error::shape(format!("video experts {vs:?} vs f_text3 {ts:?}")));
    }
    check_bank(bank, vs[3])?;
    let mut g = Graph::new();
    let v = g.constant(video_experts.clone());
    let t3 = g.constant(f_text3.clone());
    let wt = g.constant(bank.text.clone());
    let gates = expert_gates_graph(&mut g, wt);
    let slices = text_class_slices(&mut g, t3);
    let a = g.constant(Tensor::scalar(score_weight));
    let b = g.constant(Tensor::scalar(score_bias));
    let out = fuse_scores_graph(&mut g, v, &slices, wt, gates, a, b);
    Ok(g.tensor(out))
}

#[derive(Clone, Copy, Debug)]
pub struct MixedVars {
    /// `[I, T]`
    pub frame_scores_mixed: Var,
    /// `[I]`
    pub instance_score_mixed: Var,
    /// `[E, I]`
    pub instance_scores_expert: Var,
}

/// Convex mix of expert frame scores `[E, I, T]` with `weights: [E]`, plus
/// frame-mean instance scores.
pub fn mix_experts_graph(g: &mut Graph, frame_scores_expert: Var, weights: Var) -> MixedVars {
    let shape = g.shape(frame_scores_expert).to_vec();
    let (e, i, t) = (shape[0], shape[1], shape[2]);
    let w = g.reshape(weights, &[1, e]);
    let flat = g.reshape(frame_scores_expert, &[e, i * t]);
    let mixed = g.matmul(w, flat);
    let frame_scores_mixed = g.reshape(mixed, &[i, t]);
    let instance_score_mixed = g.mean_axis(frame_scores_mixed, 1);
    let instance_scores_expert = g.mean_axis(frame_scores_expert, 2);
    MixedVars {
        frame_scores_mixed,
        instance_score_mixed,
        instance_scores_expert,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedScores {
    pub frame_scores_mixed: Tensor,
    pub instance_score_mixed: Tensor,
    pub instance_scores_expert: Tensor,
}

pub fn mix_experts(frame_scores_expert: &Tensor, weights: &[f64]) -> Result<MixedScores> {
    let s = frame_scores_expert.shape();
    if s.len() != 3 || s[0] != weights.len() {
        return Err(Error::shape(format!("scores {s:?} vs {} weights", weights.len())));
    }
    let mut g = Graph::new();
    let f = g.constant(frame_scores_expert.clone());
    let w = g.constant(Tensor::new(vec![weights.len()], weights.to_vec())?);
    let m = mix_experts_graph(&mut g, f, w);
    Ok(MixedScores {
        frame_scores_mixed: g.tensor(m.frame_scores_mixed),
        instance_score_mixed: g.tensor(m.instance_score_mixed),
        instance_scores_expert: g.tensor(m.instance_scores_expert),
    })
}

/// Maps a regression value to a grade: `< t1` is 0, `[t1, t2)` is 1, `>= t2` is 2.
pub fn discretize(r: f64, thre1: f64, thre2: f64) -> Result<u8> {
    if !(thre1 < thre2) {
        return Err(Error::invalid(format!("thresholds ({thre1}, {thre2}) must be increasing")));
    }
    Ok(if r < thre1 {
        0
    } else if r < thre2 {
        1
    } else {
        2
    })
}

// ---- full head --------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct HeadOutputVars {
    pub probs2: Var,
    pub alpha: usize,
    pub f_amp: Var,
    /// `[E, I, T]`
    pub frame_scores_expert: Var,
    pub mixed: MixedVars,
    /// Softmax over expert scores at `alpha`; classification mode only.
    pub class_probs: Option<Var>,
}

/// Builds the head on `g`. `alpha_override` replaces the stage-I argmax
/// (random-instance ablation).
pub fn head_graph(
    g: &mut Graph,
    features: &FeatureVars,
    vars: &HeadVars,
    beta: Var,
    config: &HeadConfig,
    alpha_override: Option<usize>,
) -> HeadOutputVars {
    let probs2 = stage1_probs_graph(g, features.f_video, features.f_text2, vars.logit_scale);
    let alpha = alpha_override.unwrap_or_else(|| select_instance(g.value(probs2)));
    let f_amp = amplify_graph(g, features.f_video, vars.conv_kernel, vars.conv_bias, beta);
    let slices = text_class_slices(g, features.f_text3);
    let (frame_scores_expert, mix_weights) = if config.use_moe {
        let gv = expert_gates_graph(g, vars.expert_video);
        let gt = expert_gates_graph(g, vars.expert_text);
        let video = expert_video_features_graph(g, f_amp, vars.expert_video, gv);
        let scores = fuse_scores_graph(g, video, &slices, vars.expert_text, gt, vars.score_weight, vars.score_bias);
        let joint = g.mul(gv, gt);
        (scores, g.normalize_sum(joint))
    } else {
        // one expert, unit gate, reading the class-averaged text features
        let one = g.constant(Tensor::scalar(1.0));
        let wv = g.select(vars.expert_video, 0, 0);
        let wv = g.reshape(wv, &{
            let d = g.shape(wv)[0];
            [1, d, d]
        });
        let wt = g.select(vars.expert_text, 0, 0);
        let wt = g.reshape(wt, &{
            let d = g.shape(wt)[0];
            [1, d, d]
        });
        let video = expert_video_features_graph(g, f_amp, wv, one);
        let stacked = g.stack(&slices);
        let text = g.mean_axis(stacked, 0);
        let scores = fuse_scores_graph(g, video, &[text], wt, one, vars.score_weight, vars.score_bias);
        (scores, one)
    };
    let mixed = mix_experts_graph(g, frame_scores_expert, mix_weights);
    let class_probs = (config.mode == HeadMode::Classification).then(|| {
        let logits = g.select(mixed.instance_scores_expert, 1, alpha);
        g.softmax_last(logits)
    });
    HeadOutputVars {
        probs2,
        alpha,
        f_amp,
        frame_scores_expert,
        mixed,
        class_probs,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// `[I, 2]`
    pub probs2: Tensor,
    pub alpha: usize,
    /// `[E, I, T]`
    pub frame_scores_expert: Tensor,
    /// `[I, T]`
    pub frame_scores_mixed: Tensor,
    /// `[I]`
    pub instance_score_mixed: Tensor,
    /// `[E, I]`
    pub instance_scores_expert: Tensor,
    pub regression_value: f64,
    pub grade_pred: u8,
    /// Expert with the highest instance score at `alpha`.
    pub winning_expert: usize,
}

impl ModelOutput {
    /// MR probability of the selected instance.
    pub fn mr_probability(&self) -> f64 {
        self.probs2.at(&[self.alpha, 1])
    }
}

pub fn read_output(g: &Graph, out: &HeadOutputVars, config: &HeadConfig) -> Result<ModelOutput> {
    let ise = g.tensor(out.mixed.instance_scores_expert);
    let experts = ise.shape()[0];
    let at_alpha: Vec<f64> = (0..experts).map(|e| ise.at(&[e, out.alpha])).collect();
    let winning_expert = argmax(&at_alpha);
    let (regression_value, grade_pred) = match out.class_probs {
        None => {
            let r = g.value(out.mixed.instance_score_mixed)[out.alpha];
            (r, discretize(r, config.thresholds.0, config.thresholds.1)?)
        }
        Some(cp) => {
            let p = g.value(cp);
            let expected = p.iter().enumerate().map(|(c, v)| c as f64 * v).sum();
            (expected, argmax(p) as u8)
        }
    };
    Ok(ModelOutput {
        probs2: g.tensor(out.probs2),
        alpha: out.alpha,
        frame_scores_expert: g.tensor(out.frame_scores_expert),
        frame_scores_mixed: g.tensor(out.mixed.frame_scores_mixed),
        instance_score_mixed: g.tensor(out.mixed.instance_score_mixed),
        instance_scores_expert: ise,
        regression_value,
        grade_pred,
        winning_expert,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the head on precomputed features.
pub fn forward(
    features: &FeatureSet,
    params: &HeadParams,
    config: &HeadConfig,
    alpha_override: Option<usize>,
) -> Result<ModelOutput> {
    config.validate()?;
    let fs = features.f_video.shape();
    if fs.len() != 3 {
        return Err(Error::shape(format!("f_video {fs:?}")));
    }
    let dims = ModelDims {
        d: fs[2],
        p: features.f_text3.shape().get(2).copied().unwrap_or(0),
        instances: fs[0],
        clip_len: fs[1],
        image: 0,
    };
    params.check(&dims)?;
    if features.f_text2.shape() != [fs[0], 2, fs[2]] || features.f_text3.shape() != [fs[0], fs[1], dims.p, 3, fs[2]] {
        return Err(Error::shape(format!(
            "features f_video {fs:?}, f_text2 {:?}, f_text3 {:?}",
            features.f_text2.shape(),
            features.f_text3.shape()
        )));
    }
    if let Some(a) = alpha_override {
        if a >= fs[0] {
            return Err(Error::invalid(format!("instance {a} out of range {}", fs[0])));
        }
    }
    let mut g = Graph::new();
    let fv = FeatureVars {
        f_video: g.constant(features.f_video.clone()),
        f_text2: g.constant(features.f_text2.clone()),
        f_text3: g.constant(features.f_text3.clone()),
    };
    let vars = HeadVars::register(&mut g, params, false);
    let beta = g.constant(Tensor::scalar(config.effective_beta()));
    let out = head_graph(&mut g, &fv, &vars, beta, config, alpha_override);
    read_output(&g, &out, config)
}

/// Softmax of a plain slice.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    softmax_in_place(&mut v);
    v
}
