use rand::seq::index::sample;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::dataset::gen_synthetic_dataset;
use super::trainer::{sample_step, teacher_outputs, StepInputs};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::token_idle::TokenPartition;
use crate::vit::ModelParams;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_ENTRIES_PER_PARAM: usize = 16;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
const BATCH: usize = 2;
const TEACHER_NOISE: f64 = 0.005;
/// Gradients below `REL_FLOOR·max(1, |loss|)` are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    pub step: f64,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_CHECK_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h`, restoring `x[i]` afterwards.
pub fn central_difference(
    f: &mut impl FnMut(&[f64]) -> Result<f64>,
    x: &mut [f64],
    i: usize,
    step: f64,
) -> Result<f64> {
    let orig = x[i];
    x[i] = orig + step;
    let plus = f(x)?;
    x[i] = orig - step;
    let minus = f(x)?;
    x[i] = orig;
    Ok((plus - minus) / (2.0 * step))
}

fn perturbed(params: &ModelParams, seed: u64) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, TEACHER_NOISE).expect("valid normal");
    let mut out = params.clone();
    for (_, t) in out.named_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += noise.sample(&mut rng));
    }
    Ok(out)
}

pub fn grad_check(tc: &TrainConfig, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(tc, seed, DEFAULT_STEP, DEFAULT_ENTRIES_PER_PARAM)
}

/// Compares the backward pass of the batch objective against central differences on
/// `entries` sampled scalars of every parameter tensor. The student and teacher get
/// slightly perturbed weights so every term of the objective is active; partitions are
/// frozen at those of the unperturbed model.
pub fn grad_check_with(tc: &TrainConfig, seed: u64, step: f64, entries: usize) -> Result<GradCheckReport> {
    tc.validate()?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {step}")));
    }
    let config = &tc.vit;
    let schedule = tc.schedule()?;
    let data = gen_synthetic_dataset(seed, config.num_classes.max(BATCH), config.num_classes, config)?;
    let images = &data.images[..BATCH];
    let labels = &data.labels[..BATCH];
    let student = ModelParams::init(config, seed)?;
    let teacher_params = perturbed(&student, seed.wrapping_add(1))?;
    let teacher = teacher_outputs(&teacher_params, config, images)?;
    let inputs = StepInputs { config, schedule: Some(&schedule), weights: &tc.weights, reduction: tc.head_reduction };

    let mut grads: Option<Vec<Tensor>> = None;
    let mut forced: Vec<Vec<TokenPartition>> = Vec::with_capacity(BATCH);
    let mut loss = 0.0;
    for b in 0..BATCH {
        let s = sample_step(&student, &images[b], labels[b], Some(&teacher[b]), &inputs, None, true)?;
        loss += s.breakdown.total / BATCH as f64;
        forced.push(s.partitions);
        match &mut grads {
            None => grads = Some(s.grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&s.grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x += y);
                }
            }
        }
    }
    let mut grads = grads.expect("batch is non-empty");
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|x| *x /= BATCH as f64);
    }

    let objective = |p: &ModelParams| -> Result<f64> {
        let mut total = 0.0;
        for b in 0..BATCH {
            let s = sample_step(p, &images[b], labels[b], Some(&teacher[b]), &inputs, Some(&forced[b]), false)?;
            total += s.breakdown.total;
        }
        Ok(total / BATCH as f64)
    };

    let floor = REL_FLOOR * loss.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = student.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        step,
        loss,
    };
    let names: Vec<String> = student.named().into_iter().map(|(n, _)| n).collect();
    for (p, name) in names.iter().enumerate() {
        let len = grads[p].len();
        let picks = sample(&mut rng, len, entries.min(len)).into_vec();
        for i in picks {
            let orig = probe.named()[p].1.data()[i];
            probe.named_mut()[p].1.data_mut()[i] = orig + step;
            let plus = objective(&probe)?;
            probe.named_mut()[p].1.data_mut()[i] = orig - step;
            let minus = objective(&probe)?;
            probe.named_mut()[p].1.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grads[p].data()[i], numeric, floor);
            if !err.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient comparison at {name}[{i}]")));
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ViTConfig;

    fn two_layer() -> TrainConfig {
        TrainConfig {
            vit: ViTConfig { num_layers: 2, ..ViTConfig::toy() },
            keep_ratio: 0.5,
            num_stages: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn quadratic_stand_in_is_exact() {
        let mut f = |x: &[f64]| -> Result<f64> { Ok(x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum()) };
        let mut x = vec![0.3, -1.2, 2.5];
        for i in 0..x.len() {
            let analytic = 2.0 * (i as f64 + 1.0) * x[i];
            let numeric = central_difference(&mut f, &mut x, i, 1e-3).unwrap();
            assert!(relative_error(analytic, numeric, REL_FLOOR) < 1e-10);
        }
    }

    #[test]
    fn composite_loss_gradient_matches() {
        let r = grad_check(&two_layer(), 3).unwrap();
        eprintln!("{r:?}");
        assert!(r.passed());
    }

    #[test]
    fn error_shrinks_with_step() {
        let tc = two_layer();
        let coarse = grad_check_with(&tc, 5, 1e-3, 4).unwrap();
        let fine = grad_check_with(&tc, 5, 1e-5, 4).unwrap();
        eprintln!("{coarse:?} {fine:?}");
        assert!(fine.max_rel_error < coarse.max_rel_error);
    }
}
