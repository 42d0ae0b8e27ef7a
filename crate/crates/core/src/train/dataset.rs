//! Seeded synthetic classification task: one bright Gaussian blob on a noisy
//! background, with the class given by which angular sector of the image
//! holds the blob. Only a few patches carry the signal.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};
use crate::vit::ViTConfig;

const BLOB_AMPLITUDE: f64 = 1.0;
const NOISE_STD: f64 = 0.15;
/// Anchor radius, blob width and jitter as fractions of the image side.
const ANCHOR_RADIUS: f64 = 0.28;
const BLOB_SIGMA: f64 = 0.07;
const JITTER: f64 = 0.08;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

pub fn gen_synthetic_dataset(
    seed: u64,
    count: usize,
    num_classes: usize,
    config: &ViTConfig,
) -> Result<SyntheticDataset> {
    config.validate()?;
    if num_classes == 0 || count < num_classes {
        return Err(Error::contract(format!(
            "need at least one sample per class, got {count} samples for {num_classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..count).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);

    let side = config.image_size;
    let channels = config.channels_in;
    let s = side as f64;
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let sigma = BLOB_SIGMA * s;
    let images = labels
        .iter()
        .map(|&label| {
            let angle = std::f64::consts::TAU * (label as f64 + 0.5) / num_classes as f64;
            let cx = 0.5 * s + ANCHOR_RADIUS * s * angle.cos() + rng.random_range(-JITTER..JITTER) * s;
            let cy = 0.5 * s - ANCHOR_RADIUS * s * angle.sin() + rng.random_range(-JITTER..JITTER) * s;
            let mut data = Vec::with_capacity(side * side * channels);
            for y in 0..side {
                for x in 0..side {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let blob = BLOB_AMPLITUDE * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    for _ in 0..channels {
                        data.push(blob + noise.sample(&mut rng));
                    }
                }
            }
            Tensor::new(vec![side, side, channels], data).unwrap()
        })
        .collect();
    Ok(SyntheticDataset { images, labels, num_classes, seed })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Writes `images.tnsr` (count × H × W × C) and `labels.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let dims = self.images[0].dims();
        let mut all_dims = vec![self.images.len()];
        all_dims.extend_from_slice(dims);
        let data: Vec<f64> = self.images.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(all_dims, data)?.write(&dir.join("images.tnsr"), DType::F64)?;
        let mut csv = String::from("index,label\n");
        for (i, l) in self.labels.iter().enumerate() {
            writeln!(csv, "{i},{l}").unwrap();
        }
        let path = dir.join("labels.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))
    }

    /// Reads a directory written by [`SyntheticDataset::save`]. The seed is
    /// not stored on disk and comes back as 0.
    pub fn load(dir: &Path, num_classes: usize) -> Result<Self> {
        let images_path = dir.join("images.tnsr");
        let all = Tensor::read(&images_path)?;
        if all.rank() != 4 {
            return Err(Error::format(&images_path, "images must be count × H × W × C"));
        }
        let per = all.dims()[1..].to_vec();
        let count = all.dims()[0];
        let chunk: usize = per.iter().product();
        let images = all
            .data()
            .chunks_exact(chunk)
            .map(|c| Tensor::new(per.clone(), c.to_vec()))
            .collect::<Result<Vec<_>>>()?;

        let labels_path = dir.join("labels.csv");
        let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let mut labels = vec![None; count];
        for (line_no, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::format(&labels_path, format!("malformed line {}", line_no + 1));
            let (i, l) = line.split_once(',').ok_or_else(bad)?;
            let i: usize = i.trim().parse().map_err(|_| bad())?;
            let l: usize = l.trim().parse().map_err(|_| bad())?;
            if i >= count || l >= num_classes {
                return Err(bad());
            }
            labels[i] = Some(l);
        }
        let labels = labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::format(&labels_path, format!("no label for image {i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(SyntheticDataset { images, labels, num_classes, seed: 0 })
    }
}
