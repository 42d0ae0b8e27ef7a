//! Finetuning objective: cross-entropy, logit distillation (KL), feature
//! distillation (MSE) and the token cut regularizer.

use serde::{Deserialize, Serialize};

use crate::cut_loss::{tape_layer_cut, HeadReduction};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::token_idle::TokenPartition;

/// Coefficients of the distillation and cut terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 5.0, beta: 500.0, theta: 20.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { alpha: 0.0, beta: 0.0, theta: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("theta", self.theta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("loss weight {name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn needs_teacher(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0
    }
}

/// Objective value and its unweighted terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub logit: f64,
    pub feature: f64,
    pub cut: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.cls += other.cls;
        self.logit += other.logit;
        self.feature += other.feature;
        self.cut += other.cut;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.total *= s;
        self.cls *= s;
        self.logit *= s;
        self.feature *= s;
        self.cut *= s;
        self
    }
}

/// Frozen teacher outputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput {
    pub logits: Vec<f64>,
    pub features: Tensor,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|&x| x - lse).collect()
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::contract(format!("label {label} outside {} classes", logits.len())));
    }
    Ok(-log_softmax(logits)[label])
}

/// `KL(softmax(teacher) ‖ softmax(student))`.
pub fn kl_logit_loss(student: &[f64], teacher: &[f64]) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::shape("student and teacher logits differ in length"));
    }
    let pt = softmax(teacher);
    let (lt, ls) = (log_softmax(teacher), log_softmax(student));
    Ok(pt.iter().zip(lt.iter().zip(&ls)).fold(0.0, |acc, (&p, (&a, &b))| {
        if p > 0.0 {
            acc + p * (a - b)
        } else {
            acc
        }
    }))
}

/// Mean over every entry of the squared difference.
pub fn feature_mse_loss(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    if student.dims() != teacher.dims() {
        return Err(Error::shape(format!(
            "feature extents differ: {:?} vs {:?}",
            student.dims(),
            teacher.dims()
        )));
    }
    let total = student.data().iter().zip(teacher.data()).fold(0.0, |acc, (a, b)| {
        let d = a - b;
        acc + d * d
    });
    Ok(total / student.len() as f64)
}

/// Weighted combination `cls + α·logit + β·feature + θ·cut`.
pub fn combine(cls: f64, logit: f64, feature: f64, cut: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        total: cls + w.alpha * logit + w.beta * feature + w.theta * cut,
        cls,
        logit,
        feature,
        cut,
    }
}

/// Student outputs of one sample needed by [`total_loss`].
#[derive(Clone, Debug)]
pub struct StudentOutput<'a> {
    pub logits: &'a [f64],
    pub features: &'a Tensor,
    pub label: usize,
    /// Sum over layers of inter + intra for this sample.
    pub cut: f64,
}

/// Batch-mean objective. Without a teacher the distillation terms are zero.
pub fn total_loss(
    batch: &[StudentOutput<'_>],
    teacher: Option<&[TeacherOutput]>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if let Some(t) = teacher {
        if t.len() != batch.len() {
            return Err(Error::contract("teacher outputs do not match the batch"));
        }
    }
    let mut acc = LossBreakdown::default();
    for (i, s) in batch.iter().enumerate() {
        let cls = cross_entropy(s.logits, s.label)?;
        let (logit, feature) = match teacher {
            Some(t) => (kl_logit_loss(s.logits, &t[i].logits)?, feature_mse_loss(s.features, &t[i].features)?),
            None => (0.0, 0.0),
        };
        acc.accumulate(&combine(cls, logit, feature, s.cut, weights));
    }
    Ok(acc.scaled(1.0 / batch.len() as f64))
}

/// Handles of the objective terms recorded on a tape for one sample.
pub(crate) struct TapeLoss {
    pub total: Var,
    pub cls: Var,
    pub logit: Option<Var>,
    pub feature: Option<Var>,
    pub cut: Option<Var>,
    /// Per-layer `(inter, intra)` handles; `None` for layers without idle tokens.
    pub layer_terms: Vec<Option<(Var, Var)>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_loss_on_tape(
    tape: &mut Tape<'_>,
    logits: Var,
    features: Var,
    label: usize,
    attention: &[Vec<Var>],
    partitions: &[&TokenPartition],
    teacher: Option<&TeacherOutput>,
    weights: &LossWeights,
    reduction: HeadReduction,
) -> Result<TapeLoss> {
    let classes = tape.value(logits).len();
    if label >= classes {
        return Err(Error::contract(format!("label {label} outside {classes} classes")));
    }
    let ls = tape.log_softmax(logits);
    let mut onehot = vec![0.0; classes];
    onehot[label] = 1.0;
    let onehot = tape.constant_owned(Tensor::row_vector(onehot)?);
    let picked = tape.mul(ls, onehot);
    let picked = tape.sum(picked);
    let cls = tape.scale(picked, -1.0);
    let mut total = cls;

    let (mut logit, mut feature) = (None, None);
    if let Some(t) = teacher {
        if weights.alpha > 0.0 {
            let pt = softmax(&t.logits);
            let lt = log_softmax(&t.logits);
            let entropy_term = pt.iter().zip(&lt).fold(0.0, |acc, (&p, &l)| if p > 0.0 { acc + p * l } else { acc });
            let ptv = tape.constant_owned(Tensor::row_vector(pt)?);
            let cross = tape.mul(ls, ptv);
            let cross = tape.sum(cross);
            let neg = tape.scale(cross, -1.0);
            let kl = tape.add_scalar(neg, entropy_term);
            let weighted = tape.scale(kl, weights.alpha);
            total = tape.add(total, weighted);
            logit = Some(kl);
        }
        if weights.beta > 0.0 {
            let target = tape.constant_owned(t.features.clone());
            let diff = tape.sub(features, target);
            let sq = tape.square(diff);
            let mse = tape.mean(sq);
            let weighted = tape.scale(mse, weights.beta);
            total = tape.add(total, weighted);
            feature = Some(mse);
        }
    }

    let mut layer_terms = Vec::with_capacity(partitions.len());
    let mut cut: Option<Var> = None;
    for (heads, partition) in attention.iter().zip(partitions) {
        let terms = tape_layer_cut(tape, heads, partition, reduction);
        if let Some((inter, intra)) = terms {
            let both = tape.add(inter, intra);
            cut = Some(match cut {
                Some(c) => tape.add(c, both),
                None => both,
            });
        }
        layer_terms.push(terms);
    }
    if weights.theta > 0.0 {
        if let Some(c) = cut {
            let weighted = tape.scale(c, weights.theta);
            total = tape.add(total, weighted);
        }
    }
    Ok(TapeLoss { total, cls, logit, feature, cut, layer_terms })
}
