//! Multiply-accumulate counts of the matrix products in a ViT forward pass.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::token_idle::{keep_count, KeepSchedule};
use crate::vit::ViTConfig;

/// Keep ratios of the reference sweep.
pub const TABLE_RATIOS: [f64; 8] = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub tokens: u64,
    pub qkv: u64,
    pub attn_logits: u64,
    pub attn_weighted_sum: u64,
    pub out_proj: u64,
    pub ffn: u64,
}

impl LayerMacs {
    pub fn total(&self) -> u64 {
        self.qkv + self.attn_logits + self.attn_weighted_sum + self.out_proj + self.ffn
    }
}

/// One transformer block over `n` participating tokens.
pub fn layer_macs(n: u64, embed_dim: u64, ffn_ratio: u64) -> Result<LayerMacs> {
    if n == 0 {
        return Err(Error::contract("a layer needs at least one token"));
    }
    let c = embed_dim;
    Ok(LayerMacs {
        tokens: n,
        qkv: 3 * n * c * c,
        attn_logits: n * n * c,
        attn_weighted_sum: n * n * c,
        out_proj: n * c * c,
        ffn: 2 * ffn_ratio * n * c * c,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacsReport {
    pub keep_ratio: f64,
    pub layer_ratios: Vec<f64>,
    pub layers: Vec<LayerMacs>,
    pub patch_embed: u64,
    pub classifier: u64,
    pub total: u64,
}

impl MacsReport {
    pub fn gmacs(&self) -> f64 {
        self.total as f64 / 1e9
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }

    /// Per-layer rows followed by the stem, head and total.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 8]> = vec![[
            "layer", "tokens", "qkv", "attn_logits", "attn_sum", "out_proj", "ffn", "total",
        ]
        .map(String::from)];
        for (i, l) in self.layers.iter().enumerate() {
            rows.push([
                i.to_string(),
                l.tokens.to_string(),
                l.qkv.to_string(),
                l.attn_logits.to_string(),
                l.attn_weighted_sum.to_string(),
                l.out_proj.to_string(),
                l.ffn.to_string(),
                l.total().to_string(),
            ]);
        }
        let mut out = align(&rows);
        writeln!(out, "patch_embed {}", self.patch_embed).unwrap();
        writeln!(out, "classifier {}", self.classifier).unwrap();
        writeln!(out, "total {} ({:.3} GMACs)", self.total, self.gmacs()).unwrap();
        out
    }
}

/// Inference-mode count: each layer runs on its kept image tokens plus the class token.
pub fn model_macs(config: &ViTConfig, schedule: &KeepSchedule) -> Result<MacsReport> {
    config.validate()?;
    if schedule.num_layers() != config.num_layers {
        return Err(Error::contract(format!(
            "schedule covers {} layers but the model has {}",
            schedule.num_layers(),
            config.num_layers
        )));
    }
    let n_img = config.num_patches();
    let c = config.embed_dim as u64;
    let layers = schedule
        .ratios()
        .iter()
        .map(|&r| layer_macs(keep_count(r, n_img) as u64 + 1, c, config.ffn_ratio as u64))
        .collect::<Result<Vec<_>>>()?;
    let patch_embed = n_img as u64 * config.patch_dim() as u64 * c;
    let classifier = c * config.num_classes as u64;
    let total = layers.iter().map(LayerMacs::total).sum::<u64>() + patch_embed + classifier;
    Ok(MacsReport {
        keep_ratio: schedule.base_ratio(),
        layer_ratios: schedule.ratios().to_vec(),
        layers,
        patch_embed,
        classifier,
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub keep_ratio: f64,
    pub total: u64,
    pub gmacs: f64,
    /// Change relative to the first row, in percent.
    pub reduction_pct: f64,
}

/// Totals over `ratios`; reductions are relative to the first entry.
pub fn macs_sweep(config: &ViTConfig, ratios: &[f64], num_stages: usize) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(ratios.len());
    let mut base = None;
    for &k in ratios {
        let report = model_macs(config, &KeepSchedule::new(k, config.num_layers, num_stages)?)?;
        let b = *base.get_or_insert(report.total);
        rows.push(SweepRow {
            keep_ratio: k,
            total: report.total,
            gmacs: report.gmacs(),
            reduction_pct: 100.0 * (report.total as f64 - b as f64) / b as f64,
        });
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut cells: Vec<[String; 4]> = vec![["keep_ratio", "macs", "gmacs", "change"].map(String::from)];
    for r in rows {
        cells.push([
            format!("{:.2}", r.keep_ratio),
            r.total.to_string(),
            format!("{:.2}", r.gmacs),
            format!("{:+.1}%", r.reduction_pct),
        ]);
    }
    align(&cells)
}

fn align<const W: usize>(rows: &[[String; W]]) -> String {
    let mut width = [0usize; W];
    for row in rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().zip(&width).map(|(c, &w)| format!("{c:>w$}")).collect();
        writeln!(out, "{}", line.join("  ")).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_layer() {
        let c = 384;
        let l = layer_macs(1, c, 4).unwrap();
        assert_eq!(l.total(), 3 * c * c + 2 * c + c * c + 8 * c * c);
    }

    #[test]
    fn deit_small_layer() {
        let l = layer_macs(197, 384, 4).unwrap();
        let direct = 12 * 197 * 384 * 384 + 2 * 197 * 197 * 384;
        assert_eq!(l.total(), direct);
        assert!((l.total() as f64 / 3.78e8 - 1.0).abs() < 0.01);
    }

    #[test]
    fn quadratic_growth() {
        let a = layer_macs(50, 64, 4).unwrap().total();
        let b = layer_macs(100, 64, 4).unwrap().total();
        assert!(b > 2 * a);
    }

    #[test]
    fn zero_tokens_rejected() {
        assert!(layer_macs(0, 64, 4).is_err());
    }

    #[test]
    fn stage_token_counts() {
        let cfg = ViTConfig::deit_small();
        let r = model_macs(&cfg, &KeepSchedule::with_default_stages(0.7, 12).unwrap()).unwrap();
        let tokens: Vec<u64> = r.layers.iter().map(|l| l.tokens).collect();
        assert_eq!(tokens, [197, 197, 197, 138, 138, 138, 97, 97, 97, 68, 68, 68]);
    }

    #[test]
    fn full_schedule_is_plain_sum() {
        let cfg = ViTConfig::deit_small();
        let r = model_macs(&cfg, &KeepSchedule::with_default_stages(1.0, 12).unwrap()).unwrap();
        let l = layer_macs(197, 384, 4).unwrap().total();
        assert_eq!(r.total, 12 * l + 196 * 768 * 384 + 384 * 1000);
        assert_eq!(r.total, r.layers.iter().map(LayerMacs::total).sum::<u64>() + r.patch_embed + r.classifier);
    }

    #[test]
    fn mismatched_schedule() {
        let cfg = ViTConfig::deit_small();
        assert!(model_macs(&cfg, &KeepSchedule::with_default_stages(1.0, 8).unwrap()).is_err());
    }

    #[test]
    fn table_is_aligned() {
        let rows = macs_sweep(&ViTConfig::deit_small(), &TABLE_RATIOS, 4).unwrap();
        let t = sweep_table(&rows);
        let widths: Vec<usize> = t.lines().map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(rows[0].reduction_pct, 0.0);
    }
}
