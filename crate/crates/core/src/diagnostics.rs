//! Over-smoothing and re-selection measurements, plus PGM exports of
//! attention maps and selection masks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::token_idle::{partition_trace_jsonl, KeepSchedule, LayerTrace, Mode, TokenPartition};
use crate::train::SyntheticDataset;
use crate::vit::{vit_forward, ModelParams, ViTConfig};

/// Mean pairwise cosine similarity of the rows of `x`. Pairs involving a
/// zero-norm row count as 0.
pub fn cosine_smoothness(x: &Tensor) -> Result<f64> {
    let all: Vec<usize> = (0..x.rows()).collect();
    cosine_smoothness_of(x, &all)
}

/// [`cosine_smoothness`] restricted to the listed rows.
pub fn cosine_smoothness_of(x: &Tensor, rows: &[usize]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::contract(format!("cosine smoothness needs at least 2 tokens, got {}", rows.len())));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= x.rows()) {
        return Err(Error::shape(format!("row {r} outside a {}-row feature map", x.rows())));
    }
    let norms: Vec<f64> = rows.iter().map(|&r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut total = 0.0;
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            if norms[a] > 0.0 && norms[b] > 0.0 {
                let dot: f64 = x.row(rows[a]).iter().zip(x.row(rows[b])).map(|(p, q)| p * q).sum();
                total += dot / (norms[a] * norms[b]);
            }
        }
    }
    let pairs = rows.len() * (rows.len() - 1) / 2;
    Ok(total / pairs as f64)
}

/// Image tokens whose similarity is measured for a layer trace. Hard pruning
/// physically removes dropped tokens, so only the survivors count there.
pub fn measured_tokens(trace: &LayerTrace, mode: Mode) -> Vec<usize> {
    match mode {
        Mode::HardPrune => trace.partition.selected_image_tokens().to_vec(),
        Mode::Inference | Mode::Finetune => (1..trace.partition.num_tokens()).collect(),
    }
}

/// Per-layer smoothness of one forward pass.
pub fn layer_smoothness(traces: &[LayerTrace], mode: Mode) -> Result<Vec<f64>> {
    traces.iter().map(|t| cosine_smoothness_of(&t.features, &measured_tokens(t, mode))).collect()
}

/// Selected sets of every layer for a collection of samples.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SelectionTrace {
    samples: Vec<Vec<TokenPartition>>,
}

impl SelectionTrace {
    pub fn new() -> Self {
        SelectionTrace::default()
    }

    pub fn push(&mut self, partitions: Vec<TokenPartition>) -> Result<()> {
        let first = partitions.first().ok_or_else(|| Error::contract("sample trace has no layers"))?;
        if let Some(prev) = self.samples.first() {
            if prev.len() != partitions.len() || prev[0].num_tokens() != first.num_tokens() {
                return Err(Error::contract("sample traces disagree on layer or token counts"));
            }
        }
        if partitions.iter().any(|p| p.num_tokens() != first.num_tokens()) {
            return Err(Error::contract("layers disagree on token count"));
        }
        self.samples.push(partitions);
        Ok(())
    }

    pub fn push_traces(&mut self, traces: &[LayerTrace]) -> Result<()> {
        self.push(traces.iter().map(|t| t.partition.clone()).collect())
    }

    pub fn samples(&self) -> &[Vec<TokenPartition>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReselectionStats {
    /// Fraction of image tokens idle in some layer and selected in a later one.
    #[serde(rename = "P_A")]
    pub p_a: f64,
    /// Fraction of image tokens re-selected and selected in the last layer.
    #[serde(rename = "P_R")]
    pub p_r: f64,
    /// Fraction of image tokens selected in the last layer.
    #[serde(rename = "P_L")]
    pub p_l: f64,
    #[serde(rename = "R_L")]
    pub r_l: f64,
}

/// Tokens of one sample that were idle in some layer and selected later.
pub fn reselected_tokens(partitions: &[TokenPartition]) -> Vec<usize> {
    let n = partitions.first().map_or(0, TokenPartition::num_tokens);
    (1..n)
        .filter(|&t| {
            let mut was_idle = false;
            partitions.iter().any(|p| {
                let selected = p.is_selected(t);
                let back = was_idle && selected;
                was_idle |= !selected;
                back
            })
        })
        .collect()
}

pub fn reselection_stats(trace: &SelectionTrace) -> Result<ReselectionStats> {
    if trace.is_empty() {
        return Err(Error::contract("empty selection trace"));
    }
    let (mut p_a, mut p_r, mut p_l) = (0.0, 0.0, 0.0);
    for sample in trace.samples() {
        let last = sample.last().expect("checked on push");
        let n_img = (last.num_tokens() - 1) as f64;
        let re = reselected_tokens(sample);
        p_a += re.len() as f64 / n_img;
        p_r += re.iter().filter(|&&t| last.is_selected(t)).count() as f64 / n_img;
        p_l += last.selected_image_tokens().len() as f64 / n_img;
    }
    let m = trace.len() as f64;
    let (p_a, p_r, p_l) = (p_a / m, p_r / m, p_l / m);
    let r_l = if p_l > 0.0 { p_r / p_l } else { 0.0 };
    Ok(ReselectionStats { p_a, p_r, p_l, r_l })
}

/// Binary 8-bit graymap.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Parses what [`pgm_bytes`] writes: `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::format(Path::new("<pgm>"), msg);
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("only 8-bit binary graymaps are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("invalid dimension"));
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
    if data.len() != w * h {
        return Err(bad("pixel count does not match dimensions"));
    }
    Ok((w, h, data.to_vec()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Token order of a heat map: class token, then image tokens by descending
/// score with ties to the lower index.
pub fn heatmap_order(scores: &[f64]) -> Vec<usize> {
    let mut img: Vec<usize> = (1..=scores.len()).collect();
    img.sort_by(|&a, &b| scores[b - 1].total_cmp(&scores[a - 1]).then(a.cmp(&b)));
    std::iter::once(0).chain(img).collect()
}

/// Permuted attention rendered with a min-max linear gray scale.
pub fn attention_heatmap(a: &Tensor, scores: &[f64]) -> Result<Vec<u8>> {
    let n = a.rows();
    if a.rank() != 2 || a.cols() != n || scores.len() + 1 != n {
        return Err(Error::shape(format!(
            "heat map needs an N x N attention and N-1 image scores, got {:?} and {}",
            a.dims(),
            scores.len()
        )));
    }
    let order = heatmap_order(scores);
    let (lo, hi) = a.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let mut pixels = Vec::with_capacity(n * n);
    for &r in &order {
        for &c in &order {
            let v = if span > 0.0 { (a.get(r, c) - lo) / span } else { 0.0 };
            pixels.push((v * 255.0).round() as u8);
        }
    }
    pgm_bytes(n, n, &pixels)
}

pub fn export_attention_heatmap(a: &Tensor, scores: &[f64], path: &Path) -> Result<()> {
    write_file(path, &attention_heatmap(a, scores)?)
}

/// Patch-grid graymap: selected patches white, idle black.
pub fn selection_mask(partition: &TokenPartition, config: &ViTConfig) -> Result<Vec<u8>> {
    let g = config.grid_size();
    if partition.num_tokens() != g * g + 1 {
        return Err(Error::shape(format!(
            "partition over {} tokens does not fit a {g}x{g} grid",
            partition.num_tokens()
        )));
    }
    let pixels: Vec<u8> = (1..=g * g).map(|t| if partition.is_selected(t) { 255 } else { 0 }).collect();
    pgm_bytes(g, g, &pixels)
}

/// One `mask_layer_XX.pgm` per layer; returns the written paths.
pub fn export_selection_masks(partitions: &[TokenPartition], config: &ViTConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    partitions
        .iter()
        .enumerate()
        .map(|(l, p)| {
            let path = dir.join(format!("mask_layer_{l:02}.pgm"));
            write_file(&path, &selection_mask(p, config)?)?;
            Ok(path)
        })
        .collect()
}

/// Heat maps (full attention) and selection masks (inference trace) for one image.
pub fn export_image(
    params: &ModelParams,
    config: &ViTConfig,
    image: &Tensor,
    schedule: &KeepSchedule,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let inference = vit_forward(image, params, config, Some(schedule), Mode::Inference)?;
    let partitions: Vec<TokenPartition> = inference.traces.iter().map(|t| t.partition.clone()).collect();
    let mut paths = export_selection_masks(&partitions, config, dir)?;
    let trace_path = dir.join("partitions.jsonl");
    write_file(&trace_path, partition_trace_jsonl(&inference.traces).as_bytes())?;
    paths.push(trace_path);

    let full = vit_forward(image, params, config, Some(schedule), Mode::Finetune)?;
    for t in &full.traces {
        let mean = t.attention.as_ref().expect("finetune traces carry attention").head_mean();
        let scores = mean.row(0)[1..].to_vec();
        let path = dir.join(format!("attention_layer_{:02}.pgm", t.layer));
        export_attention_heatmap(&mean, &scores, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Idle-vs-hard-prune comparison over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub keep_ratio: f64,
    pub samples: usize,
    /// Per-layer mean smoothness with idle tokens kept.
    pub idle_cosine: Vec<f64>,
    /// Per-layer mean smoothness of the hard-prune baseline.
    pub hard_prune_cosine: Vec<f64>,
    /// Final-layer smoothness per sample, idle then hard prune.
    pub final_idle: Vec<f64>,
    pub final_hard_prune: Vec<f64>,
    /// Fraction of samples whose final-layer idle smoothness is not above the baseline's.
    pub idle_not_smoother_fraction: f64,
    pub reselection: ReselectionStats,
    pub hard_prune_reselection: ReselectionStats,
}

pub fn diagnose(
    params: &ModelParams,
    config: &ViTConfig,
    data: &SyntheticDataset,
    schedule: &KeepSchedule,
) -> Result<DiagnosticReport> {
    if data.is_empty() {
        return Err(Error::contract("empty diagnostic set"));
    }
    let layers = config.num_layers;
    let mut idle_sum = vec![0.0; layers];
    let mut hard_sum = vec![0.0; layers];
    let (mut final_idle, mut final_hard) = (Vec::new(), Vec::new());
    let (mut idle_trace, mut hard_trace) = (SelectionTrace::new(), SelectionTrace::new());
    for img in &data.images {
        let idle = vit_forward(img, params, config, Some(schedule), Mode::Inference)?;
        let hard = vit_forward(img, params, config, Some(schedule), Mode::HardPrune)?;
        let ci = layer_smoothness(&idle.traces, Mode::Inference)?;
        let ch = layer_smoothness(&hard.traces, Mode::HardPrune)?;
        for l in 0..layers {
            idle_sum[l] += ci[l];
            hard_sum[l] += ch[l];
        }
        final_idle.push(ci[layers - 1]);
        final_hard.push(ch[layers - 1]);
        idle_trace.push_traces(&idle.traces)?;
        hard_trace.push_traces(&hard.traces)?;
    }
    let m = data.len() as f64;
    let wins = final_idle.iter().zip(&final_hard).filter(|(i, h)| i <= h).count();
    Ok(DiagnosticReport {
        keep_ratio: schedule.base_ratio(),
        samples: data.len(),
        idle_cosine: idle_sum.iter().map(|v| v / m).collect(),
        hard_prune_cosine: hard_sum.iter().map(|v| v / m).collect(),
        final_idle,
        final_hard_prune: final_hard,
        idle_not_smoother_fraction: wins as f64 / m,
        reselection: reselection_stats(&idle_trace)?,
        hard_prune_reselection: reselection_stats(&hard_trace)?,
    })
}

impl DiagnosticReport {
    pub fn cosine_csv(&self) -> String {
        let mut out = String::from("layer,idle,hard_prune\n");
        for (l, (i, h)) in self.idle_cosine.iter().zip(&self.hard_prune_cosine).enumerate() {
            writeln!(out, "{l},{i},{h}").unwrap();
        }
        out
    }

    /// Writes `cosine.csv`, `reselection.json` and `comparison.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("cosine.csv"), self.cosine_csv().as_bytes())?;
        let reselection = serde_json::json!({
            "idle": self.reselection,
            "hard_prune": self.hard_prune_reselection,
        });
        let text = serde_json::to_string_pretty(&reselection).expect("serializable stats");
        write_file(&dir.join("reselection.json"), text.as_bytes())?;
        let text = serde_json::to_string_pretty(self).expect("serializable report");
        write_file(&dir.join("comparison.json"), text.as_bytes())
    }
}
