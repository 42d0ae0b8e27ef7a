use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::dataset::{gen_synthetic_dataset, SyntheticDataset};
use super::losses::{sample_loss_on_tape, LossBreakdown, LossWeights, TeacherOutput};
use crate::cut_loss::{batch_cut_loss, cross_set_mass, CutLossTerms, HeadReduction};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::token_idle::{KeepSchedule, LayerTrace, Mode, TokenPartition};
use crate::train::losses::cross_entropy;
use crate::vit::forward::{bind_leaves, forward_on_tape};
use crate::vit::{patchify, vit_forward, ModelParams, ViTConfig};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub cls: f64,
    pub logit: f64,
    pub feature: f64,
    pub cut: f64,
    pub train_accuracy: f64,
    pub inter: Vec<f64>,
    pub intra: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.metrics {
            writeln!(out, "{}", serde_json::to_string(m).expect("serializable metrics")).unwrap();
        }
        out
    }

    /// Writes `checkpoint/` and `metrics.jsonl` under `dir`.
    pub fn write(&self, dir: &Path, config: &ViTConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save_checkpoint(&dir.join("checkpoint"), config)?;
        let path = dir.join("metrics.jsonl");
        fs::write(&path, self.metrics_jsonl()).map_err(|e| Error::io(&path, e))
    }
}

/// Outputs of the frozen full-size teacher (no schedule) for every image.
pub fn teacher_outputs(
    params: &ModelParams,
    config: &ViTConfig,
    images: &[Tensor],
) -> Result<Vec<TeacherOutput>> {
    images
        .iter()
        .map(|img| {
            let out = vit_forward(img, params, config, None, Mode::Inference)?;
            Ok(TeacherOutput { logits: out.logits, features: out.features })
        })
        .collect()
}

/// Loss terms and parameter gradients of one sample.
pub(crate) struct SampleStep {
    pub breakdown: LossBreakdown,
    pub inter: Vec<f64>,
    pub intra: Vec<f64>,
    pub correct: bool,
    /// Gradients in canonical parameter order; empty unless requested.
    pub grads: Vec<Tensor>,
    pub partitions: Vec<TokenPartition>,
}

pub(crate) struct StepInputs<'a> {
    pub config: &'a ViTConfig,
    pub schedule: Option<&'a KeepSchedule>,
    pub weights: &'a LossWeights,
    pub reduction: HeadReduction,
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Finetune-mode forward, objective and (optionally) backward for one sample.
pub(crate) fn sample_step(
    params: &ModelParams,
    image: &Tensor,
    label: usize,
    teacher: Option<&TeacherOutput>,
    inputs: &StepInputs<'_>,
    forced: Option<&[TokenPartition]>,
    with_grads: bool,
) -> Result<SampleStep> {
    let mode = Mode::Finetune;
    let patches = patchify(image, inputs.config)?;
    let mut tape = Tape::new();
    let p = tape.constant_owned(patches);
    let weights = bind_leaves(&mut tape, params);
    let run = forward_on_tape(&mut tape, &weights, p, inputs.config, inputs.schedule, mode, forced)?;
    let partitions: Vec<&TokenPartition> = run.traces.iter().map(|t| &t.partition).collect();
    let loss = sample_loss_on_tape(
        &mut tape,
        run.logits,
        run.features,
        label,
        &run.attention,
        &partitions,
        teacher,
        inputs.weights,
        inputs.reduction,
    )?;
    let total = tape.scalar(loss.total);
    if !total.is_finite() {
        return Err(Error::numeric(format!("non-finite loss {total}")));
    }
    let value = |v: Option<crate::tape::Var>| v.map_or(0.0, |v| tape.scalar(v));
    let breakdown = LossBreakdown {
        total,
        cls: tape.scalar(loss.cls),
        logit: value(loss.logit),
        feature: value(loss.feature),
        cut: value(loss.cut),
    };
    let (inter, intra) = loss
        .layer_terms
        .iter()
        .map(|t| t.map_or((0.0, 0.0), |(e, r)| (tape.scalar(e), tape.scalar(r))))
        .unzip();
    let correct = argmax(tape.value(run.logits).data()) == label;
    let grads = if with_grads {
        let g = tape.backward(loss.total)?;
        weights.named().into_iter().map(|(_, &v)| g.tensor(v)).collect()
    } else {
        Vec::new()
    };
    let partitions = run.traces.into_iter().map(|t| t.partition).collect();
    Ok(SampleStep { breakdown, inter, intra, correct, grads, partitions })
}

/// Heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
struct Momentum {
    lr: f64,
    mu: f64,
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    fn new(params: &ModelParams, lr: f64, mu: f64) -> Self {
        let velocity = params.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Momentum { lr, mu, velocity }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        for (((_, p), v), g) in params.named_mut().into_iter().zip(&mut self.velocity).zip(grads) {
            for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = self.mu * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
    }
}

fn load_matching(path: &Path, config: &ViTConfig) -> Result<ModelParams> {
    let (c, p) = ModelParams::load_checkpoint(path)?;
    if &c != config {
        return Err(Error::contract(format!(
            "checkpoint {} was built for a different architecture",
            path.display()
        )));
    }
    Ok(p)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Training data named by the config: loaded from `data_dir` or generated.
pub fn training_data(tc: &TrainConfig) -> Result<SyntheticDataset> {
    match &tc.data_dir {
        Some(dir) => SyntheticDataset::load(dir, tc.vit.num_classes),
        None => gen_synthetic_dataset(tc.seed, tc.train_samples, tc.vit.num_classes, &tc.vit),
    }
}

/// Finetunes under the config's keep schedule.
pub fn train(tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    let data = training_data(tc)?;
    let schedule = tc.schedule()?;
    train_on(tc, &data, Some(&schedule))
}

/// Training loop on explicit data. `schedule = None` trains the plain backbone.
pub fn train_on(
    tc: &TrainConfig,
    data: &SyntheticDataset,
    schedule: Option<&KeepSchedule>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let config = &tc.vit;
    let mut params = match &tc.init_checkpoint {
        Some(p) => load_matching(p, config)?,
        None => ModelParams::init(config, tc.seed)?,
    };
    let teacher = if tc.weights.needs_teacher() {
        let teacher_params = match (&tc.teacher_checkpoint, &tc.init_checkpoint) {
            (Some(p), _) => load_matching(p, config)?,
            (None, Some(_)) => params.clone(),
            (None, None) => {
                return Err(Error::contract(
                    "distillation weights are nonzero but no teacher checkpoint is configured",
                ))
            }
        };
        Some(teacher_outputs(&teacher_params, config, &data.images)?)
    } else {
        None
    };

    let inputs = StepInputs { config, schedule, weights: &tc.weights, reduction: tc.head_reduction };
    let mut optimizer = Momentum::new(&params, tc.learning_rate, tc.momentum);
    let mut metrics = Vec::with_capacity(tc.epochs);
    let n = data.len();
    let layers = config.num_layers;

    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut epoch_rng(tc.seed, epoch));
        let mut sums = LossBreakdown::default();
        let mut inter = vec![0.0; layers];
        let mut intra = vec![0.0; layers];
        let mut correct = 0usize;

        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let mut grad_sum: Option<Vec<Tensor>> = None;
            for &i in batch {
                let t = teacher.as_ref().map(|t| &t[i]);
                let step = sample_step(&params, &data.images[i], data.labels[i], t, &inputs, None, true)
                    .map_err(|e| match e {
                        Error::Numeric(msg) => {
                            Error::numeric(format!("epoch {epoch}, batch {b}, sample {i}: {msg}"))
                        }
                        other => other,
                    })?;
                sums.total += step.breakdown.total;
                sums.cls += step.breakdown.cls;
                sums.logit += step.breakdown.logit;
                sums.feature += step.breakdown.feature;
                sums.cut += step.breakdown.cut;
                for l in 0..layers {
                    inter[l] += step.inter[l];
                    intra[l] += step.intra[l];
                }
                correct += usize::from(step.correct);
                match &mut grad_sum {
                    None => grad_sum = Some(step.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&step.grads) {
                            for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = grad_sum.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            optimizer.step(&mut params, &grads);
        }

        let inv = 1.0 / n as f64;
        metrics.push(EpochMetrics {
            epoch,
            loss: sums.total * inv,
            cls: sums.cls * inv,
            logit: sums.logit * inv,
            feature: sums.feature * inv,
            cut: sums.cut * inv,
            train_accuracy: correct as f64 * inv,
            inter: inter.iter().map(|v| v * inv).collect(),
            intra: intra.iter().map(|v| v * inv).collect(),
        });
    }
    params.validate(config)?;
    Ok(TrainOutcome { params, metrics })
}

/// Accuracy and loss terms on a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub keep_ratio: f64,
    pub samples: usize,
    pub accuracy: f64,
    pub cls_loss: f64,
    /// Batch-mean cut terms; finetune mode only.
    pub cut: Option<CutLossTerms>,
    /// Mean cross-set attention mass over layers with idle tokens; finetune mode only.
    pub cross_set_mass: Option<f64>,
}

pub fn evaluate(
    params: &ModelParams,
    config: &ViTConfig,
    data: &SyntheticDataset,
    schedule: &KeepSchedule,
    mode: Mode,
    reduction: HeadReduction,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let mut correct = 0usize;
    let mut cls = 0.0;
    let mut traces: Vec<Vec<LayerTrace>> = Vec::new();
    let (mut mass, mut mass_layers) = (0.0, 0usize);
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let out = vit_forward(img, params, config, Some(schedule), mode)?;
        correct += usize::from(argmax(&out.logits) == label);
        cls += cross_entropy(&out.logits, label)?;
        if mode == Mode::Finetune {
            for t in &out.traces {
                if !t.partition.is_full() {
                    mass += cross_set_mass(t.attention.as_ref().unwrap(), &t.partition);
                    mass_layers += 1;
                }
            }
            traces.push(out.traces);
        }
    }
    let n = data.len() as f64;
    let (cut, cross) = if mode == Mode::Finetune {
        let m = if mass_layers > 0 { mass / mass_layers as f64 } else { 0.0 };
        (Some(batch_cut_loss(&traces, reduction)?), Some(m))
    } else {
        (None, None)
    };
    Ok(EvalReport {
        mode,
        keep_ratio: schedule.base_ratio(),
        samples: data.len(),
        accuracy: correct as f64 / n,
        cls_loss: cls / n,
        cut,
        cross_set_mass: cross,
    })
}
