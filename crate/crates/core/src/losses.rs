//! Training objective: stage-I focal loss, regression MSE, expert focal loss,
//! and the smoothness and sparsity regularizers on the selected instance.

use serde::{Deserialize, Serialize};

use crate::autograd::{focal_value, softmax_in_place, Graph, Var};
use crate::error::{Error, Result};
use crate::mregnet::{HeadMode, HeadOutputVars};
use crate::tensor::Tensor;

pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_BINARY_WEIGHTS: [f64; 2] = [0.25, 0.75];
pub const DEFAULT_LAMBDA1: f64 = 0.01;
pub const DEFAULT_LAMBDA2: f64 = 0.001;

/// `-w[y] (1 - p[y])^gamma ln p[y]`, with `p[y]` clamped below at 1e-12.
pub fn focal_loss(probs: &[f64], y: usize, gamma: f64, alpha_w: &[f64]) -> Result<f64> {
    if y >= probs.len() || alpha_w.len() != probs.len() {
        return Err(Error::invalid(format!(
            "target {y} with {} probabilities and {} weights",
            probs.len(),
            alpha_w.len()
        )));
    }
    Ok(focal_value(probs[y], gamma, alpha_w[y]))
}

/// Focal loss on the 2-class probabilities of instance `alpha` in `probs2: [I, 2]`.
pub fn l2cls(probs2: &Tensor, alpha: usize, y2: usize, gamma: f64, weights: &[f64; 2]) -> Result<f64> {
    check_instance(probs2.shape(), 2, alpha)?;
    focal_loss(probs2.slice(&[alpha]), y2, gamma, weights)
}

pub fn l3cls(instance_score_mixed: &[f64], alpha: usize, y3: u8) -> Result<f64> {
    let s = instance_score_mixed
        .get(alpha)
        .ok_or_else(|| Error::invalid(format!("instance {alpha} out of range")))?;
    Ok((s - y3 as f64).powi(2))
}

/// Expert scores at `alpha` (`instance_scores_expert: [3, I]`) used as class
/// logits under a focal loss.
pub fn l_expert(instance_scores_expert: &Tensor, alpha: usize, y3: u8, gamma: f64, weights: &[f64; 3]) -> Result<f64> {
    let s = instance_scores_expert.shape();
    if s.len() != 2 || s[0] != 3 || alpha >= s[1] {
        return Err(Error::shape(format!("expert scores {s:?} at instance {alpha}")));
    }
    let mut logits: Vec<f64> = (0..3).map(|e| instance_scores_expert.at(&[e, alpha])).collect();
    softmax_in_place(&mut logits);
    focal_loss(&logits, y3 as usize, gamma, weights)
}

/// Sum of squared successive differences of the scores of instance `alpha`.
pub fn l_smooth(frame_scores_mixed: &Tensor, alpha: usize) -> Result<f64> {
    check_instance(frame_scores_mixed.shape(), 0, alpha)?;
    let s = frame_scores_mixed.slice(&[alpha]);
    Ok(s.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum())
}

/// Mean absolute frame score of instance `alpha`.
pub fn l_sparsity(frame_scores_mixed: &Tensor, alpha: usize) -> Result<f64> {
    check_instance(frame_scores_mixed.shape(), 0, alpha)?;
    let s = frame_scores_mixed.slice(&[alpha]);
    Ok(s.iter().map(|x| x.abs()).sum::<f64>() / s.len() as f64)
}

fn check_instance(shape: &[usize], cols: usize, alpha: usize) -> Result<()> {
    if shape.len() != 2 || (cols > 0 && shape[1] != cols) || alpha >= shape[0] {
        return Err(Error::shape(format!("scores {shape:?} at instance {alpha}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l2cls: f64,
    pub l3cls: f64,
    pub lexpert: f64,
    pub lsmooth: f64,
    pub lsparsity: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("l2cls", self.l2cls),
            ("l3cls", self.l3cls),
            ("lexpert", self.lexpert),
            ("lsmooth", self.lsmooth),
            ("lsparsity", self.lsparsity),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2cls: f64,
    pub l3cls: f64,
    pub lexpert: f64,
    pub lsmooth: f64,
    pub lsparsity: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

pub fn total_loss(parts: &LossParts, lambda1: f64, lambda2: f64) -> Result<LossBreakdown> {
    for (term, value) in parts.named() {
        if !value.is_finite() {
            return Err(Error::NonFinite { term, value });
        }
    }
    let total = parts.l2cls + parts.l3cls + parts.lexpert + lambda1 * parts.lsmooth + lambda2 * parts.lsparsity;
    if !total.is_finite() {
        return Err(Error::NonFinite { term: "total", value: total });
    }
    Ok(LossBreakdown {
        l2cls: parts.l2cls,
        l3cls: parts.l3cls,
        lexpert: parts.lexpert,
        lsmooth: parts.lsmooth,
        lsparsity: parts.lsparsity,
        total,
        lambda1,
        lambda2,
    })
}

/// Inverse-frequency class weights `n / (3 n_c)`; absent classes get weight 1.
pub fn inverse_frequency_weights(grades: &[u8]) -> [f64; 3] {
    let mut counts = [0usize; 3];
    for &g in grades {
        counts[g as usize] += 1;
    }
    let n = grades.len() as f64;
    counts.map(|c| if c == 0 { 1.0 } else { n / (3.0 * c as f64) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    pub binary_weights: [f64; 2],
    pub grade_weights: [f64; 3],
    pub lambda1: f64,
    pub lambda2: f64,
    pub use_lexpert: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            binary_weights: DEFAULT_BINARY_WEIGHTS,
            grade_weights: [1.0; 3],
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
            use_lexpert: true,
        }
    }
}

// ---- graph versions ---------------------------------------------------------

pub fn l2cls_graph(g: &mut Graph, probs2: Var, alpha: usize, y2: usize, gamma: f64, weights: &[f64; 2]) -> Var {
    let row = g.select(probs2, 0, alpha);
    g.focal(row, y2, gamma, weights)
}

pub fn l3cls_graph(g: &mut Graph, instance_score_mixed: Var, alpha: usize, y3: u8) -> Var {
    let s = g.select(instance_score_mixed, 0, alpha);
    let s = g.reshape(s, &[1]);
    let d = g.add_const(s, -(y3 as f64));
    g.square(d)
}

pub fn l_expert_graph(g: &mut Graph, instance_scores_expert: Var, alpha: usize, y3: u8, gamma: f64, weights: &[f64; 3]) -> Var {
    let logits = g.select(instance_scores_expert, 1, alpha);
    let p = g.softmax_last(logits);
    g.focal(p, y3 as usize, gamma, weights)
}

pub fn l_smooth_graph(g: &mut Graph, frame_scores_mixed: Var, alpha: usize) -> Var {
    let row = g.select(frame_scores_mixed, 0, alpha);
    g.diff_square_sum(row)
}

pub fn l_sparsity_graph(g: &mut Graph, frame_scores_mixed: Var, alpha: usize) -> Var {
    let row = g.select(frame_scores_mixed, 0, alpha);
    let a = g.abs(row);
    g.mean_all(a)
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l2cls: Var,
    pub l3cls: Var,
    pub lexpert: Option<Var>,
    pub lsmooth: Var,
    pub lsparsity: Var,
    pub total: Var,
}

/// Builds the full objective for one video with labels `y2` (MR presence)
/// and `y3` (grade). In classification mode the grade term is a focal loss on
/// the expert class probabilities rather than the regression MSE.
pub fn loss_graph(g: &mut Graph, out: &HeadOutputVars, y2: usize, y3: u8, mode: HeadMode, cfg: &LossConfig) -> LossVars {
    let a = out.alpha;
    let l2cls = l2cls_graph(g, out.probs2, a, y2, cfg.gamma, &cfg.binary_weights);
    let l3cls = match (mode, out.class_probs) {
        (HeadMode::Classification, Some(p)) => g.focal(p, y3 as usize, cfg.gamma, &cfg.grade_weights),
        _ => l3cls_graph(g, out.mixed.instance_score_mixed, a, y3),
    };
    let experts = g.shape(out.mixed.instance_scores_expert)[0];
    let lexpert = (cfg.use_lexpert && experts == 3)
        .then(|| l_expert_graph(g, out.mixed.instance_scores_expert, a, y3, cfg.gamma, &cfg.grade_weights));
    let lsmooth = l_smooth_graph(g, out.mixed.frame_scores_mixed, a);
    let lsparsity = l_sparsity_graph(g, out.mixed.frame_scores_mixed, a);
    let mut terms = vec![(l2cls, 1.0), (l3cls, 1.0), (lsmooth, cfg.lambda1), (lsparsity, cfg.lambda2)];
    if let Some(le) = lexpert {
        terms.push((le, 1.0));
    }
    let total = g.weighted_sum(&terms);
    LossVars {
        l2cls,
        l3cls,
        lexpert,
        lsmooth,
        lsparsity,
        total,
    }
}

/// Reads the loss values off an evaluated graph and checks them.
pub fn read_losses(g: &Graph, v: &LossVars, cfg: &LossConfig) -> Result<LossBreakdown> {
    let parts = LossParts {
        l2cls: g.scalar(v.l2cls),
        l3cls: g.scalar(v.l3cls),
        lexpert: v.lexpert.map_or(0.0, |e| g.scalar(e)),
        lsmooth: g.scalar(v.lsmooth),
        lsparsity: g.scalar(v.lsparsity),
    };
    total_loss(&parts, cfg.lambda1, cfg.lambda2)
}
