use tokidle_core::cut_loss::HeadReduction;
use tokidle_core::error::Error;
use tokidle_core::token_idle::{KeepSchedule, Mode};
use tokidle_core::train::losses::{feature_mse_loss, kl_logit_loss};
use tokidle_core::train::{
    evaluate, gen_synthetic_dataset, teacher_outputs, train, train_on, LossWeights, TrainConfig,
};
use tokidle_core::vit::{vit_forward, ModelParams, ViTConfig};

fn quick_config(dir: &std::path::Path) -> TrainConfig {
    let vit = ViTConfig::toy();
    let init = dir.join("init");
    ModelParams::init(&vit, 7).unwrap().save_checkpoint(&init, &vit).unwrap();
    TrainConfig {
        vit,
        keep_ratio: 0.7,
        epochs: 5,
        batch_size: 16,
        train_samples: 64,
        learning_rate: 1e-3,
        init_checkpoint: Some(init),
        ..TrainConfig::default()
    }
}

#[test]
fn loss_decreases_over_first_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let tc = quick_config(dir.path());
    let out = train(&tc).unwrap();
    let losses: Vec<f64> = out.metrics.iter().map(|m| m.loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn unit_schedule_matches_schedule_free_training() {
    let tc = TrainConfig {
        keep_ratio: 1.0,
        weights: LossWeights::zero(),
        epochs: 2,
        batch_size: 8,
        train_samples: 16,
        ..TrainConfig::default()
    };
    let data = gen_synthetic_dataset(tc.seed, tc.train_samples, tc.vit.num_classes, &tc.vit).unwrap();
    let schedule = tc.schedule().unwrap();
    let with = train_on(&tc, &data, Some(&schedule)).unwrap();
    let without = train_on(&tc, &data, None).unwrap();
    assert_eq!(with.metrics, without.metrics);
    assert_eq!(with.params, without.params);
}

#[test]
fn training_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut tc = quick_config(dir.path());
    tc.epochs = 2;
    tc.train_samples = 24;
    let a = train(&tc).unwrap();
    let b = train(&tc).unwrap();
    assert_eq!(a.metrics_jsonl(), b.metrics_jsonl());
    assert_eq!(a.params, b.params);
    let (da, db) = (dir.path().join("a"), dir.path().join("b"));
    a.write(&da, &tc.vit).unwrap();
    b.write(&db, &tc.vit).unwrap();
    for f in ["metrics.jsonl", "checkpoint/manifest.json"] {
        assert_eq!(std::fs::read(da.join(f)).unwrap(), std::fs::read(db.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn student_equal_to_teacher_has_zero_distillation() {
    let vit = ViTConfig::toy();
    let params = ModelParams::init(&vit, 11).unwrap();
    let data = gen_synthetic_dataset(4, 8, vit.num_classes, &vit).unwrap();
    let teacher = teacher_outputs(&params, &vit, &data.images).unwrap();
    let full = KeepSchedule::new(1.0, vit.num_layers, 3).unwrap();
    for (img, t) in data.images.iter().zip(&teacher) {
        for mode in [Mode::Inference, Mode::Finetune] {
            let s = vit_forward(img, &params, &vit, Some(&full), mode).unwrap();
            assert!(kl_logit_loss(&s.logits, &t.logits).unwrap().abs() < 1e-12);
            assert!(feature_mse_loss(&s.features, &t.features).unwrap() < 1e-12);
        }
    }
}

#[test]
fn epoch_loss_is_the_weighted_sum_of_its_terms() {
    let dir = tempfile::tempdir().unwrap();
    let mut tc = quick_config(dir.path());
    tc.epochs = 2;
    tc.train_samples = 16;
    tc.weights = LossWeights { alpha: 1.5, beta: 7.0, theta: 3.0 };
    let out = train(&tc).unwrap();
    let w = tc.weights;
    for m in &out.metrics {
        let sum = m.cls + w.alpha * m.logit + w.beta * m.feature + w.theta * m.cut;
        assert!((m.loss - sum).abs() <= 1e-12 * m.loss.abs().max(1.0), "{} vs {sum}", m.loss);
        let per_layer: f64 = m.inter.iter().zip(&m.intra).map(|(a, b)| a + b).sum();
        assert!((m.cut - per_layer).abs() < 1e-12);
    }
}

#[test]
fn divergence_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut tc = quick_config(dir.path());
    tc.learning_rate = 1e6;
    tc.epochs = 3;
    tc.train_samples = 16;
    tc.batch_size = 4;
    let err = train(&tc).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn distillation_without_teacher_is_rejected() {
    let tc = TrainConfig { epochs: 1, train_samples: 8, ..TrainConfig::default() };
    let err = train(&tc).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn evaluate_reports_cut_terms_only_in_finetune_mode() {
    let vit = ViTConfig::toy();
    let params = ModelParams::init(&vit, 2).unwrap();
    let data = gen_synthetic_dataset(8, 12, vit.num_classes, &vit).unwrap();
    let s = KeepSchedule::new(0.7, vit.num_layers, 3).unwrap();
    let inf = evaluate(&params, &vit, &data, &s, Mode::Inference, HeadReduction::Mean).unwrap();
    let fin = evaluate(&params, &vit, &data, &s, Mode::Finetune, HeadReduction::Mean).unwrap();
    assert_eq!(inf.samples, 12);
    assert!((0.0..=1.0).contains(&inf.accuracy));
    assert!(inf.cut.is_none() && inf.cross_set_mass.is_none());
    assert!(fin.cut.is_some());
    let cross = fin.cross_set_mass.unwrap();
    assert!((0.0..=2.0).contains(&cross), "{cross}");
}

/// Per-patch mean intensity, the crudest feature that still sees the blob.
fn patch_means(img: &tokidle_core::tensor::Tensor, vit: &ViTConfig) -> Vec<f64> {
    let (h, w, c) = (img.dims()[0], img.dims()[1], img.dims()[2]);
    let p = vit.patch_size;
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0; gh * gw];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(y / p) * gw + x / p] += img.data()[(y * w + x) * c + ch];
            }
        }
    }
    out.iter().map(|v| v / (p * p * c) as f64).collect()
}

#[test]
fn synthetic_task_is_learnable_by_nearest_centroid() {
    let vit = ViTConfig::toy();
    let train = gen_synthetic_dataset(1, 400, vit.num_classes, &vit).unwrap();
    let test = gen_synthetic_dataset(2, 200, vit.num_classes, &vit).unwrap();
    let dim = vit.num_patches();
    let mut centroids = vec![vec![0.0; dim]; vit.num_classes];
    let mut counts = vec![0usize; vit.num_classes];
    for (img, &y) in train.images.iter().zip(&train.labels) {
        for (c, v) in centroids[y].iter_mut().zip(patch_means(img, &vit)) {
            *c += v;
        }
        counts[y] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let correct = test
        .images
        .iter()
        .zip(&test.labels)
        .filter(|(img, &y)| {
            let f = patch_means(img, &vit);
            let dist = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..vit.num_classes)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == y
        })
        .count();
    assert!(correct as f64 / 200.0 > 0.9, "{correct}/200");
}
