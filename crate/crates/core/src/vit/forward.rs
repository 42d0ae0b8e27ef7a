use super::config::ViTConfig;
use super::layers::{classify, embed, patchify, AttentionMap};
use super::params::{ModelParams, ViTWeights};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::token_idle::{
    idle_layer, keep_count, select_among, KeepSchedule, LayerTrace, Mode, ScoreCache,
    TokenPartition,
};

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    /// Last-layer feature map after the final LayerNorm.
    pub features: Tensor,
    pub traces: Vec<LayerTrace>,
}

/// Handles into a forward pass recorded on a tape.
pub(crate) struct TapeForward {
    pub logits: Var,
    pub features: Var,
    /// Per-layer head attention handles (finetune mode only).
    pub attention: Vec<Vec<Var>>,
    pub traces: Vec<LayerTrace>,
}

pub(crate) fn check_schedule(config: &ViTConfig, schedule: Option<&KeepSchedule>) -> Result<()> {
    if let Some(s) = schedule {
        if s.num_layers() != config.num_layers {
            return Err(Error::contract(format!(
                "schedule covers {} layers, model has {}",
                s.num_layers(),
                config.num_layers
            )));
        }
    }
    Ok(())
}

/// Records a full forward pass. `forced` pins the partition of every layer,
/// bypassing selection.
pub(crate) fn forward_on_tape(
    tape: &mut Tape<'_>,
    weights: &ViTWeights<Var>,
    patches: Var,
    config: &ViTConfig,
    schedule: Option<&KeepSchedule>,
    mode: Mode,
    forced: Option<&[TokenPartition]>,
) -> Result<TapeForward> {
    check_schedule(config, schedule)?;
    if let Some(f) = forced {
        if f.len() != config.num_layers {
            return Err(Error::contract("forced partitions must cover every layer"));
        }
    }
    let n = config.num_tokens();
    let n_img = config.num_patches();
    let mut x = embed(tape, patches, &weights.stem);
    let mut cache = ScoreCache::new(n_img);
    let mut alive: Vec<usize> = (0..n_img).collect();
    let mut attention = Vec::new();
    let mut traces = Vec::with_capacity(config.num_layers);

    for (layer, w) in weights.layers.iter().enumerate() {
        let partition = match (forced, schedule) {
            (Some(f), _) => f[layer].clone(),
            (None, None) => TokenPartition::full(n),
            (None, Some(s)) => {
                let ratio = s.ratio(layer)?;
                if keep_count(ratio, n_img) == n_img {
                    TokenPartition::full(n)
                } else {
                    select_among(&cache.scores()?, ratio, &alive)?
                }
            }
        };
        if partition.num_tokens() != n {
            return Err(Error::contract("partition does not match the token count"));
        }
        let (next, heads) = idle_layer(tape, x, &partition, w, config.num_heads, mode);
        x = next;

        let participants: Vec<usize> = match mode {
            Mode::Finetune => (0..n).collect(),
            Mode::Inference | Mode::HardPrune => partition.selected().to_vec(),
        };
        let head_values: Vec<Tensor> = heads.iter().map(|&h| tape.value(h).clone()).collect();
        let map = AttentionMap::new(head_values)?;
        if map.heads().iter().any(|h| !h.is_finite()) {
            return Err(Error::numeric(format!("non-finite attention at layer {layer}")));
        }
        cache.observe(&map, &participants, layer);
        if mode == Mode::HardPrune {
            alive = partition.selected_image_tokens().iter().map(|t| t - 1).collect();
        }
        let scores = cache.scores()?;
        traces.push(LayerTrace {
            layer,
            partition,
            features: tape.value(x).clone(),
            attention: (mode == Mode::Finetune).then_some(map),
            scores,
        });
        if mode == Mode::Finetune {
            attention.push(heads);
        }
    }

    let (logits, features) = classify(tape, x, &weights.stem);
    if !tape.value(logits).is_finite() {
        return Err(Error::numeric("non-finite logits"));
    }
    Ok(TapeForward { logits, features, attention, traces })
}

/// Binds every parameter as a tape constant.
pub(crate) fn bind_constants<'a>(tape: &mut Tape<'a>, params: &'a ModelParams) -> ViTWeights<Var> {
    params.map(|t| tape.constant(t))
}

/// Binds every parameter as a differentiable leaf.
pub(crate) fn bind_leaves<'a>(tape: &mut Tape<'a>, params: &'a ModelParams) -> ViTWeights<Var> {
    params.map(|t| tape.leaf(t))
}

/// Runs the network on one `H × W × C_in` image. Without a schedule every
/// token is selected in every layer.
pub fn vit_forward(
    image: &Tensor,
    params: &ModelParams,
    config: &ViTConfig,
    schedule: Option<&KeepSchedule>,
    mode: Mode,
) -> Result<ForwardOutput> {
    if params.layers.len() != config.num_layers {
        return Err(Error::shape("parameter layer count does not match config"));
    }
    let patches = patchify(image, config)?;
    let mut tape = Tape::new();
    let p = tape.constant_owned(patches);
    let weights = bind_constants(&mut tape, params);
    let run = forward_on_tape(&mut tape, &weights, p, config, schedule, mode, None)?;
    Ok(ForwardOutput {
        logits: tape.value(run.logits).data().to_vec(),
        features: tape.value(run.features).clone(),
        traces: run.traces,
    })
}
