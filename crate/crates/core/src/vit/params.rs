//! Parameter containers and the checkpoint directory format.
//!
//! A checkpoint is a directory holding `manifest.json` plus one `TNSR` v1
//! file per parameter. The manifest records the [`ViTConfig`] and, for each
//! parameter in canonical order, its name, file and extents.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ViTConfig;
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

macro_rules! named_fields {
    ($(#[$meta:meta])* $name:ident { $($field:ident => $label:literal),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T),*
        }

        impl<T> $name<T> {
            pub fn named(&self) -> Vec<(&'static str, &T)> {
                vec![$(($label, &self.$field)),*]
            }

            pub fn named_mut(&mut self) -> Vec<(&'static str, &mut T)> {
                vec![$(($label, &mut self.$field)),*]
            }

            pub fn try_map<'s, U, E>(
                &'s self,
                mut f: impl FnMut(&'static str, &'s T) -> Result<U, E>,
            ) -> Result<$name<U>, E> {
                Ok($name { $($field: f($label, &self.$field)?),* })
            }
        }
    };
}

named_fields! {
    /// Weights of one transformer block. Linear maps are stored `in × out`
    /// and applied as `x · W + b`.
    LayerWeights {
        norm1_gamma => "norm1.gamma",
        norm1_beta => "norm1.beta",
        w_q => "attn.w_q",
        b_q => "attn.b_q",
        w_k => "attn.w_k",
        b_k => "attn.b_k",
        w_v => "attn.w_v",
        b_v => "attn.b_v",
        w_o => "attn.w_o",
        b_o => "attn.b_o",
        norm2_gamma => "norm2.gamma",
        norm2_beta => "norm2.beta",
        w_fc1 => "ffn.w1",
        b_fc1 => "ffn.b1",
        w_fc2 => "ffn.w2",
        b_fc2 => "ffn.b2",
    }
}

named_fields! {
    /// Everything outside the blocks.
    StemWeights {
        patch_w => "patch_embed.weight",
        patch_b => "patch_embed.bias",
        cls_token => "cls_token",
        pos_embed => "pos_embed",
        head_norm_gamma => "head_norm.gamma",
        head_norm_beta => "head_norm.beta",
        head_w => "head.weight",
        head_b => "head.bias",
    }
}

/// Full model weights, generic over the slot type so the same layout holds
/// tensors or tape handles.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTWeights<T> {
    pub stem: StemWeights<T>,
    pub layers: Vec<LayerWeights<T>>,
}

/// Concrete model parameters.
pub type ModelParams = ViTWeights<Tensor>;
pub type LayerParams = LayerWeights<Tensor>;

impl<T> ViTWeights<T> {
    /// Parameters with fully qualified names in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out: Vec<(String, &T)> =
            self.stem.named().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out: Vec<(String, &mut T)> =
            self.stem.named_mut().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer.named_mut().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)),
            );
        }
        out
    }

    pub fn try_map<'s, U, E>(
        &'s self,
        mut f: impl FnMut(&'s T) -> Result<U, E>,
    ) -> Result<ViTWeights<U>, E> {
        Ok(ViTWeights {
            stem: self.stem.try_map(|_, t| f(t))?,
            layers: self
                .layers
                .iter()
                .map(|l| l.try_map(|_, t| f(t)))
                .collect::<Result<_, E>>()?,
        })
    }

    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s T) -> U) -> ViTWeights<U> {
        self.try_map::<U, std::convert::Infallible>(|t| Ok(f(t))).unwrap()
    }
}

/// Expected extents of every parameter for a configuration.
pub fn expected_dims(config: &ViTConfig) -> ViTWeights<Vec<usize>> {
    let c = config.embed_dim;
    let h = config.hidden_dim();
    let layer = LayerWeights {
        norm1_gamma: vec![1, c],
        norm1_beta: vec![1, c],
        w_q: vec![c, c],
        b_q: vec![1, c],
        w_k: vec![c, c],
        b_k: vec![1, c],
        w_v: vec![c, c],
        b_v: vec![1, c],
        w_o: vec![c, c],
        b_o: vec![1, c],
        norm2_gamma: vec![1, c],
        norm2_beta: vec![1, c],
        w_fc1: vec![c, h],
        b_fc1: vec![1, h],
        w_fc2: vec![h, c],
        b_fc2: vec![1, c],
    };
    ViTWeights {
        stem: StemWeights {
            patch_w: vec![config.patch_dim(), c],
            patch_b: vec![1, c],
            cls_token: vec![1, c],
            pos_embed: vec![config.num_tokens(), c],
            head_norm_gamma: vec![1, c],
            head_norm_beta: vec![1, c],
            head_w: vec![c, config.num_classes],
            head_b: vec![1, config.num_classes],
        },
        layers: vec![layer; config.num_layers],
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ViTConfig,
    params: Vec<ManifestEntry>,
}

const SMALL_INIT: [&str; 5] = ["attn.w_o", "ffn.w2", "head.weight", "cls_token", "pos_embed"];

const CHECKPOINT_FORMAT: &str = "tokidle-checkpoint-v1";

impl ModelParams {
    /// Seeded initialization: matrices feeding a residual add (attention
    /// output, second FFN layer) and the head ~ N(0, 0.02²), as are the class
    /// token and positional embeddings; other matrices ~ N(0, 1/fan_in);
    /// biases and LayerNorm shifts zero, LayerNorm scales one.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = expected_dims(config);
        let mut sample = |dims: &Vec<usize>, std: f64| {
            let normal = Normal::new(0.0, std).unwrap();
            let n = dims.iter().product();
            Tensor::new(dims.clone(), (0..n).map(|_| normal.sample(&mut rng)).collect()).unwrap()
        };
        let mut init_named = |name: &str, d: &Vec<usize>| -> Tensor {
            if name.ends_with("gamma") {
                Tensor::filled(d, 1.0)
            } else if name.ends_with("beta") || name.contains(".b") || name.ends_with("bias") {
                Tensor::zeros(d)
            } else if SMALL_INIT.iter().any(|s| name.ends_with(s)) {
                sample(d, 0.02)
            } else {
                sample(d, 1.0 / (d[0] as f64).sqrt())
            }
        };
        let stem = dims.stem.try_map::<_, Error>(|n, d| Ok(init_named(n, d)))?;
        let layers = dims
            .layers
            .iter()
            .map(|l| l.try_map::<_, Error>(|n, d| Ok(init_named(n, d))))
            .collect::<Result<_>>()?;
        Ok(ViTWeights { stem, layers })
    }

    /// Checks every extent against `config` and that all values are finite.
    pub fn validate(&self, config: &ViTConfig) -> Result<()> {
        config.validate()?;
        if self.layers.len() != config.num_layers {
            return Err(Error::shape(format!(
                "params hold {} layers, config expects {}",
                self.layers.len(),
                config.num_layers
            )));
        }
        let expected = expected_dims(config);
        for ((name, t), (_, d)) in self.named().into_iter().zip(expected.named()) {
            if t.dims() != d.as_slice() {
                return Err(Error::shape(format!(
                    "parameter {name} has extents {:?}, expected {d:?}",
                    t.dims()
                )));
            }
            if !t.is_finite() {
                return Err(Error::numeric(format!("parameter {name} holds non-finite values")));
            }
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn save_checkpoint(&self, dir: &Path, config: &ViTConfig) -> Result<()> {
        self.validate(config)?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (name, t) in self.named() {
            let file = format!("{name}.tnsr");
            t.write(&dir.join(&file), DType::F64)?;
            entries.push(ManifestEntry { name, file, dims: t.dims().to_vec() });
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.to_string(),
            config: config.clone(),
            params: entries,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(ViTConfig, ModelParams)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::format(&path, format!("unknown format {:?}", manifest.format)));
        }
        let config = manifest.config;
        config.validate()?;
        let dims = expected_dims(&config);
        let names: Vec<String> = dims.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != manifest.params.len() {
            return Err(Error::format(
                &path,
                format!("expected {} parameters, manifest lists {}", names.len(), manifest.params.len()),
            ));
        }
        let mut loaded = Vec::with_capacity(names.len());
        for (expected, entry) in names.iter().zip(&manifest.params) {
            if &entry.name != expected {
                return Err(Error::format(
                    &path,
                    format!("parameter {:?} out of order, expected {expected:?}", entry.name),
                ));
            }
            loaded.push(Tensor::read(&dir.join(&entry.file))?);
        }
        let mut it = loaded.into_iter();
        let params = dims.map(|_| it.next().unwrap());
        params.validate(&config)?;
        Ok((config, params))
    }
}
