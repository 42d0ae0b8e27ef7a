//! Dynamic token selection and idling.
//!
//! At the start of every layer the image tokens with the highest class
//! attention are selected; the class token is always selected on top of
//! those. Selected tokens run through the block; idle tokens are carried to
//! the layer output unchanged and stay candidates for later layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::layers::{self, AttentionMap};
use crate::vit::params::LayerWeights;

pub const DEFAULT_NUM_STAGES: usize = 4;

/// Execution mode of the token-idle network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Only selected tokens are computed; attention covers selected tokens.
    Inference,
    /// Full attention over every token; idle rows are reset after the block.
    Finetune,
    /// Ablation baseline: unselected tokens are dropped for good.
    HardPrune,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inference" => Ok(Mode::Inference),
            "finetune" => Ok(Mode::Finetune),
            "hard-prune" => Ok(Mode::HardPrune),
            other => Err(Error::contract(format!("unknown mode {other:?}"))),
        }
    }
}

/// Number of image tokens kept at `ratio`. The small offset absorbs
/// representation error of products that are mathematically integral.
pub fn keep_count(ratio: f64, num_image_tokens: usize) -> usize {
    ((ratio * num_image_tokens as f64) + 1e-9).floor() as usize
}

/// Geometric per-stage keep ratios: layers of stage `i` (1-based) keep
/// `k^(i-1)` of the image tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct KeepSchedule {
    base_ratio: f64,
    num_stages: usize,
    stage_of_layer: Vec<usize>,
    ratios: Vec<f64>,
}

impl KeepSchedule {
    pub fn new(base_ratio: f64, num_layers: usize, num_stages: usize) -> Result<Self> {
        if !(base_ratio > 0.0 && base_ratio <= 1.0) {
            return Err(Error::contract(format!("keep ratio must lie in (0, 1], got {base_ratio}")));
        }
        if num_layers == 0 || num_stages == 0 {
            return Err(Error::contract("schedule needs at least one layer and one stage"));
        }
        let base = num_layers / num_stages;
        let extra = num_layers % num_stages;
        let mut stage_of_layer = Vec::with_capacity(num_layers);
        for stage in 0..num_stages {
            let size = base + usize::from(stage < extra);
            stage_of_layer.extend(std::iter::repeat_n(stage + 1, size));
        }
        let ratios = stage_of_layer.iter().map(|&s| base_ratio.powi(s as i32 - 1)).collect();
        Ok(KeepSchedule { base_ratio, num_stages, stage_of_layer, ratios })
    }

    /// Four-stage schedule.
    pub fn with_default_stages(base_ratio: f64, num_layers: usize) -> Result<Self> {
        KeepSchedule::new(base_ratio, num_layers, DEFAULT_NUM_STAGES)
    }

    pub fn base_ratio(&self) -> f64 {
        self.base_ratio
    }

    pub fn num_stages(&self) -> usize {
        self.num_stages
    }

    pub fn num_layers(&self) -> usize {
        self.ratios.len()
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    /// 1-based stage of `layer`.
    pub fn stage(&self, layer: usize) -> Result<usize> {
        self.stage_of_layer.get(layer).copied().ok_or_else(|| {
            Error::contract(format!("layer {layer} outside a {}-layer schedule", self.num_layers()))
        })
    }

    pub fn ratio(&self, layer: usize) -> Result<f64> {
        self.stage(layer).map(|_| self.ratios[layer])
    }
}

/// Per-layer keep ratio for `layer` under `schedule`.
pub fn stage_keep_ratio(layer: usize, schedule: &KeepSchedule) -> Result<f64> {
    schedule.ratio(layer)
}

/// Disjoint selected / idle token index sets. Index 0 is the class token and
/// is always selected.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPartition {
    selected: Vec<usize>,
    idle: Vec<usize>,
}

impl TokenPartition {
    pub fn new(mut selected: Vec<usize>, mut idle: Vec<usize>, num_tokens: usize) -> Result<Self> {
        selected.sort_unstable();
        idle.sort_unstable();
        let mut seen = vec![false; num_tokens];
        for &t in selected.iter().chain(&idle) {
            if t >= num_tokens {
                return Err(Error::contract(format!("token {t} outside 0..{num_tokens}")));
            }
            if std::mem::replace(&mut seen[t], true) {
                return Err(Error::contract(format!("token {t} appears twice in the partition")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::contract("partition does not cover every token"));
        }
        if selected.first() != Some(&0) {
            return Err(Error::contract("class token must be selected"));
        }
        Ok(TokenPartition { selected, idle })
    }

    /// Every token selected.
    pub fn full(num_tokens: usize) -> Self {
        TokenPartition { selected: (0..num_tokens).collect(), idle: Vec::new() }
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn idle(&self) -> &[usize] {
        &self.idle
    }

    pub fn num_tokens(&self) -> usize {
        self.selected.len() + self.idle.len()
    }

    /// Selected image tokens (class token excluded).
    pub fn selected_image_tokens(&self) -> &[usize] {
        &self.selected[1..]
    }

    pub fn is_full(&self) -> bool {
        self.idle.is_empty()
    }

    pub fn is_selected(&self, token: usize) -> bool {
        self.selected.binary_search(&token).is_ok()
    }
}

/// Last observed class attention of every image token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreCache {
    scores: Vec<Option<f64>>,
    updated_at: Vec<Option<usize>>,
}

impl ScoreCache {
    pub fn new(num_image_tokens: usize) -> Self {
        ScoreCache { scores: vec![None; num_image_tokens], updated_at: vec![None; num_image_tokens] }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, image_token: usize) -> Option<f64> {
        self.scores[image_token]
    }

    pub fn last_update(&self, image_token: usize) -> Option<usize> {
        self.updated_at[image_token]
    }

    /// Records the head-mean class attention of every participating image
    /// token. `participants` are token indices (sorted, class token first)
    /// giving the meaning of each attention row/column.
    pub fn observe(&mut self, attention: &AttentionMap, participants: &[usize], layer: usize) {
        let heads = attention.heads();
        for (pos, &token) in participants.iter().enumerate().skip(1) {
            let total = heads.iter().fold(0.0, |acc, h| acc + h.get(0, pos));
            self.scores[token - 1] = Some(total / heads.len() as f64);
            self.updated_at[token - 1] = Some(layer);
        }
    }

    /// All scores, failing if some token has never been observed.
    pub fn scores(&self) -> Result<Vec<f64>> {
        self.scores
            .iter()
            .enumerate()
            .map(|(j, s)| {
                s.ok_or_else(|| {
                    Error::contract(format!("image token {j} has no class-attention score yet"))
                })
            })
            .collect()
    }
}

/// Updates `cache` from `attention` (when present) and returns the current
/// score of every image token. Tokens absent from `participants` keep their
/// cached score.
pub fn class_attention_scores(
    attention: Option<&AttentionMap>,
    participants: &[usize],
    cache: &mut ScoreCache,
    layer: usize,
) -> Result<Vec<f64>> {
    if let Some(a) = attention {
        if a.num_tokens() != participants.len() {
            return Err(Error::shape(format!(
                "attention over {} tokens, {} participants",
                a.num_tokens(),
                participants.len()
            )));
        }
        cache.observe(a, participants, layer);
    }
    cache.scores()
}

/// Top-`⌊ratio·N_img⌋` image tokens by score (ties to the lower index), plus
/// the class token.
pub fn select_tokens(scores: &[f64], ratio: f64) -> Result<TokenPartition> {
    let candidates: Vec<usize> = (0..scores.len()).collect();
    select_among(scores, ratio, &candidates)
}

/// Like [`select_tokens`] but only image tokens in `candidates` may be
/// chosen; the count is still relative to all image tokens.
pub(crate) fn select_among(scores: &[f64], ratio: f64, candidates: &[usize]) -> Result<TokenPartition> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::contract(format!("keep ratio must lie in (0, 1], got {ratio}")));
    }
    let n_img = scores.len();
    let k = keep_count(ratio, n_img);
    if k == 0 {
        return Err(Error::contract(format!(
            "keep ratio {ratio} selects no image token out of {n_img}"
        )));
    }
    if k > candidates.len() {
        return Err(Error::contract(format!(
            "cannot keep {k} tokens from {} candidates",
            candidates.len()
        )));
    }
    if let Some(j) = candidates.iter().find(|&&j| !scores[j].is_finite()) {
        return Err(Error::numeric(format!("non-finite score for image token {j}")));
    }
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = vec![false; n_img];
    for &j in &ranked[..k] {
        chosen[j] = true;
    }
    let mut selected = vec![0];
    let mut idle = Vec::with_capacity(n_img - k);
    for (j, &c) in chosen.iter().enumerate() {
        if c {
            selected.push(j + 1);
        } else {
            idle.push(j + 1);
        }
    }
    Ok(TokenPartition { selected, idle })
}

/// Scatters processed selected rows and untouched idle rows back to their
/// original positions.
pub fn idle_concat(selected_out: &Tensor, idle_in: &Tensor, partition: &TokenPartition) -> Result<Tensor> {
    let n = partition.num_tokens();
    let c = selected_out.cols();
    if selected_out.rows() != partition.selected().len() {
        return Err(Error::shape(format!(
            "{} selected rows for {} selected tokens",
            selected_out.rows(),
            partition.selected().len()
        )));
    }
    let idle_rows = if partition.idle().is_empty() { 0 } else { idle_in.rows() };
    if idle_rows != partition.idle().len() || (idle_rows > 0 && idle_in.cols() != c) {
        return Err(Error::shape(format!(
            "idle rows {:?} do not match {} idle tokens of width {c}",
            idle_in.dims(),
            partition.idle().len()
        )));
    }
    let mut out = Tensor::zeros(&[n, c]);
    for (p, &t) in partition.selected().iter().enumerate() {
        out.row_mut(t).copy_from_slice(selected_out.row(p));
    }
    for (p, &t) in partition.idle().iter().enumerate() {
        out.row_mut(t).copy_from_slice(idle_in.row(p));
    }
    Ok(out)
}

/// Gathers the rows of `x` listed in `rows`.
pub fn gather_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    if let Some(r) = rows.iter().find(|&&r| r >= x.rows()) {
        return Err(Error::shape(format!("row {r} outside {} rows", x.rows())));
    }
    Tensor::matrix(rows.len(), x.cols(), rows.iter().flat_map(|&r| x.row(r).to_vec()).collect())
}

/// One block executed under a partition. Returns the new feature map and the
/// per-head attention over the participating tokens. The participants are
/// `partition.selected()` except in [`Mode::Finetune`], where every token
/// participates.
pub(crate) fn idle_layer(
    tape: &mut Tape<'_>,
    x: Var,
    partition: &TokenPartition,
    w: &LayerWeights<Var>,
    num_heads: usize,
    mode: Mode,
) -> (Var, Vec<Var>) {
    if partition.is_full() {
        return layers::block(tape, x, w, num_heads);
    }
    match mode {
        Mode::Inference | Mode::HardPrune => {
            let xs = tape.gather_rows(x, partition.selected());
            let (ys, attn) = layers::block(tape, xs, w, num_heads);
            (tape.merge_rows(x, ys, partition.selected()), attn)
        }
        Mode::Finetune => {
            let (y, attn) = layers::block(tape, x, w, num_heads);
            let ys = tape.gather_rows(y, partition.selected());
            (tape.merge_rows(x, ys, partition.selected()), attn)
        }
    }
}

fn check_partition(x: &Tensor, partition: &TokenPartition) -> Result<()> {
    if x.rank() != 2 || x.rows() != partition.num_tokens() {
        return Err(Error::shape(format!(
            "feature map extents {:?} do not match a {}-token partition",
            x.dims(),
            partition.num_tokens()
        )));
    }
    Ok(())
}

fn run_layer(
    x: &Tensor,
    partition: &TokenPartition,
    w: &LayerWeights<Tensor>,
    num_heads: usize,
    mode: Mode,
) -> Result<(Tensor, AttentionMap)> {
    check_partition(x, partition)?;
    if x.cols() != w.w_q.rows() || !w.w_q.rows().is_multiple_of(num_heads) {
        return Err(Error::shape("layer weights do not match the feature map width"));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let wv = layers::bind_layer(&mut tape, w);
    let (out, attn) = idle_layer(&mut tape, xv, partition, &wv, num_heads, mode);
    let heads = attn.iter().map(|&a| tape.value(a).clone()).collect();
    Ok((tape.value(out).clone(), AttentionMap::new(heads)?))
}

/// Inference-mode layer: the block runs over selected rows only and idle rows
/// are copied verbatim. The attention covers selected tokens only.
pub fn layer_forward_inference(
    x: &Tensor,
    partition: &TokenPartition,
    w: &LayerWeights<Tensor>,
    num_heads: usize,
) -> Result<(Tensor, AttentionMap)> {
    run_layer(x, partition, w, num_heads, Mode::Inference)
}

/// Finetune-mode layer: full attention over every token, then idle rows are
/// reset to their inputs. Returns the full `N × N` attention.
pub fn layer_forward_finetune(
    x: &Tensor,
    partition: &TokenPartition,
    w: &LayerWeights<Tensor>,
    num_heads: usize,
) -> Result<(Tensor, AttentionMap)> {
    run_layer(x, partition, w, num_heads, Mode::Finetune)
}

/// What one layer did during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub layer: usize,
    pub partition: TokenPartition,
    /// Output feature map of the layer.
    pub features: Tensor,
    /// Full attention; present only in finetune mode.
    pub attention: Option<AttentionMap>,
    /// Class-attention score of every image token after this layer.
    pub scores: Vec<f64>,
}

/// JSON-lines record of a layer's selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub layer: usize,
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
}

impl From<&LayerTrace> for PartitionRecord {
    fn from(t: &LayerTrace) -> Self {
        PartitionRecord {
            layer: t.layer,
            selected: t.partition.selected().to_vec(),
            scores: t.scores.clone(),
        }
    }
}

/// One JSON object per layer, newline terminated.
pub fn partition_trace_jsonl(traces: &[LayerTrace]) -> String {
    let mut out = String::new();
    for t in traces {
        out.push_str(&serde_json::to_string(&PartitionRecord::from(t)).expect("serializable record"));
        out.push('\n');
    }
    out
}
