//! Graph-cut quantities on attention maps and the token cut regularizer.
//!
//! The attention matrix is read as a directed weighted graph over tokens.
//! With `S` the selected and `I` the idle set, and `K = |S|` counting the
//! class token:
//!
//! * inter loss: `1/K · Σ_{i∈S} (Σ_{j∈I} A_ij)² + 1/(N−K) · Σ_{i∈I} (Σ_{j∈S∖{0}} A_ij)²`
//! * intra loss: `1/K · Σ_{i∈S} (1 − Σ_{j∈S} A_ij)²`
//!
//! Any layer with an empty idle set contributes exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::token_idle::{LayerTrace, TokenPartition};
use crate::vit::AttentionMap;

/// How multi-head attention is reduced before the losses are taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadReduction {
    /// Losses of the head-averaged map.
    #[default]
    Mean,
    /// Sum of per-head losses.
    PerHeadSum,
}

/// Head-averaged attention together with the partition that splits it.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedAttention {
    attention: Tensor,
    partition: TokenPartition,
}

const ROW_SUM_TOL: f64 = 1e-9;

impl PartitionedAttention {
    pub fn new(attention: Tensor, partition: TokenPartition) -> Result<Self> {
        let n = partition.num_tokens();
        if attention.dims() != [n, n] {
            return Err(Error::shape(format!(
                "attention extents {:?} do not match {n} tokens",
                attention.dims()
            )));
        }
        for r in 0..n {
            let s: f64 = attention.row(r).iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::contract(format!("attention row {r} sums to {s}, not 1")));
            }
        }
        Ok(PartitionedAttention { attention, partition })
    }

    pub fn from_heads(map: &AttentionMap, partition: TokenPartition) -> Result<Self> {
        PartitionedAttention::new(map.head_mean(), partition)
    }

    pub fn attention(&self) -> &Tensor {
        &self.attention
    }

    pub fn partition(&self) -> &TokenPartition {
        &self.partition
    }
}

fn block_sum(a: &Tensor, rows: &[usize], cols: &[usize]) -> f64 {
    rows.iter().fold(0.0, |acc, &r| {
        let row = a.row(r);
        acc + cols.iter().fold(0.0, |s, &c| s + row[c])
    })
}

/// Per-row sums over `cols`, one entry per row in `rows`.
fn row_sums(a: &Tensor, rows: &[usize], cols: &[usize]) -> Vec<f64> {
    rows.iter().map(|&r| cols.iter().fold(0.0, |s, &c| s + a.row(r)[c])).collect()
}

/// `Σ_{i∈S, j∈I} A_ij`.
pub fn graph_cut(a: &Tensor, s: &[usize], i: &[usize]) -> Result<f64> {
    if s.iter().any(|x| i.contains(x)) {
        return Err(Error::contract("cut sets overlap"));
    }
    let n = a.rows();
    if s.iter().chain(i).any(|&t| t >= n || t >= a.cols()) {
        return Err(Error::shape("cut index outside the matrix"));
    }
    Ok(block_sum(a, s, i))
}

/// Total weight of edges leaving vertices of `s`: `Σ_{j∈S, k∈U} A_jk`.
pub fn assoc(a: &Tensor, s: &[usize]) -> f64 {
    let all: Vec<usize> = (0..a.cols()).collect();
    block_sum(a, s, &all)
}

/// Normalized cut with the class column excluded from the idle→selected cut.
/// Returns 0 when the idle set is empty.
pub fn ncut_attention(pa: &PartitionedAttention) -> f64 {
    let (a, p) = (&pa.attention, &pa.partition);
    if p.is_full() {
        return 0.0;
    }
    let (s, i) = (p.selected(), p.idle());
    let forward = block_sum(a, s, i) / assoc(a, s);
    let backward = block_sum(a, i, p.selected_image_tokens()) / assoc(a, i);
    forward + backward
}

pub fn inter_loss(pa: &PartitionedAttention) -> f64 {
    inter_of(&pa.attention, &pa.partition)
}

pub fn intra_loss(pa: &PartitionedAttention) -> f64 {
    intra_of(&pa.attention, &pa.partition)
}

fn sum_squares(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc + x * x)
}

fn inter_of(a: &Tensor, p: &TokenPartition) -> f64 {
    if p.is_full() {
        return 0.0;
    }
    let k = p.selected().len() as f64;
    let n = p.num_tokens() as f64;
    let first = sum_squares(&row_sums(a, p.selected(), p.idle())) / k;
    let second = sum_squares(&row_sums(a, p.idle(), p.selected_image_tokens())) / (n - k);
    first + second
}

fn intra_of(a: &Tensor, p: &TokenPartition) -> f64 {
    if p.is_full() {
        return 0.0;
    }
    let k = p.selected().len() as f64;
    let gaps: Vec<f64> = row_sums(a, p.selected(), p.selected()).iter().map(|s| 1.0 - s).collect();
    sum_squares(&gaps) / k
}

/// `(inter, intra)` of one layer's attention under `reduction`.
pub fn layer_cut_terms(
    map: &AttentionMap,
    partition: &TokenPartition,
    reduction: HeadReduction,
) -> Result<(f64, f64)> {
    if map.num_tokens() != partition.num_tokens() {
        return Err(Error::shape("attention and partition disagree on the token count"));
    }
    Ok(match reduction {
        HeadReduction::Mean => {
            let a = map.head_mean();
            (inter_of(&a, partition), intra_of(&a, partition))
        }
        HeadReduction::PerHeadSum => map.heads().iter().fold((0.0, 0.0), |(e, r), h| {
            (e + inter_of(h, partition), r + intra_of(h, partition))
        }),
    })
}

/// Per-layer cut terms and their sum over layers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CutLossTerms {
    pub inter: Vec<f64>,
    pub intra: Vec<f64>,
    pub total: f64,
}

impl CutLossTerms {
    fn from_layers(inter: Vec<f64>, intra: Vec<f64>) -> Self {
        let total = inter.iter().zip(&intra).fold(0.0, |acc, (e, r)| acc + e + r);
        CutLossTerms { inter, intra, total }
    }
}

/// Cut loss of one sample's finetune-mode traces.
pub fn total_cut_loss(traces: &[LayerTrace], reduction: HeadReduction) -> Result<CutLossTerms> {
    let mut inter = Vec::with_capacity(traces.len());
    let mut intra = Vec::with_capacity(traces.len());
    for t in traces {
        let map = t.attention.as_ref().ok_or_else(|| {
            Error::contract(format!("layer {} has no full attention (not a finetune trace)", t.layer))
        })?;
        let (e, r) = layer_cut_terms(map, &t.partition, reduction)?;
        inter.push(e);
        intra.push(r);
    }
    Ok(CutLossTerms::from_layers(inter, intra))
}

/// Batch mean of [`total_cut_loss`], layer by layer.
pub fn batch_cut_loss(batch: &[Vec<LayerTrace>], reduction: HeadReduction) -> Result<CutLossTerms> {
    let first = batch.first().ok_or_else(|| Error::contract("empty batch"))?;
    let layers = first.len();
    let mut inter = vec![0.0; layers];
    let mut intra = vec![0.0; layers];
    for traces in batch {
        if traces.len() != layers {
            return Err(Error::contract("batch samples disagree on the layer count"));
        }
        let terms = total_cut_loss(traces, reduction)?;
        for l in 0..layers {
            inter[l] += terms.inter[l];
            intra[l] += terms.intra[l];
        }
    }
    let m = batch.len() as f64;
    inter.iter_mut().chain(intra.iter_mut()).for_each(|v| *v /= m);
    Ok(CutLossTerms::from_layers(inter, intra))
}

/// Differentiable `(inter, intra)` for one layer's head attention handles.
/// `None` when the idle set is empty.
pub(crate) fn tape_layer_cut(
    tape: &mut Tape<'_>,
    heads: &[Var],
    partition: &TokenPartition,
    reduction: HeadReduction,
) -> Option<(Var, Var)> {
    if partition.is_full() {
        return None;
    }
    let terms = |tape: &mut Tape<'_>, a: Var| {
        let k = partition.selected().len() as f64;
        let n = partition.num_tokens() as f64;
        let s = partition.selected();
        let i = partition.idle();

        let out = tape.row_sums_over(a, s, i);
        let out = tape.square(out);
        let out = tape.sum(out);
        let first = tape.scale(out, 1.0 / k);
        let back = tape.row_sums_over(a, i, partition.selected_image_tokens());
        let back = tape.square(back);
        let back = tape.sum(back);
        let second = tape.scale(back, 1.0 / (n - k));
        let inter = tape.add(first, second);

        let within = tape.row_sums_over(a, s, s);
        let gap = tape.scale(within, -1.0);
        let gap = tape.add_scalar(gap, 1.0);
        let gap = tape.square(gap);
        let gap = tape.sum(gap);
        let intra = tape.scale(gap, 1.0 / k);
        (inter, intra)
    };
    Some(match reduction {
        HeadReduction::Mean => {
            let mut acc = heads[0];
            for &h in &heads[1..] {
                acc = tape.add(acc, h);
            }
            let mean = tape.scale(acc, 1.0 / heads.len() as f64);
            terms(tape, mean)
        }
        HeadReduction::PerHeadSum => {
            let parts: Vec<(Var, Var)> = heads.iter().map(|&h| terms(tape, h)).collect();
            let (mut inter, mut intra) = parts[0];
            for &(e, r) in &parts[1..] {
                inter = tape.add(inter, e);
                intra = tape.add(intra, r);
            }
            (inter, intra)
        }
    })
}

/// Mean cross-set attention mass of a layer: `(Cut(S,I) + Cut(I, S∖{0})) / N`
/// on the head-averaged map. Zero when nothing is idle.
pub fn cross_set_mass(map: &AttentionMap, partition: &TokenPartition) -> f64 {
    if partition.is_full() {
        return 0.0;
    }
    let a = map.head_mean();
    let out = block_sum(&a, partition.selected(), partition.idle());
    let back = block_sum(&a, partition.idle(), partition.selected_image_tokens());
    (out + back) / partition.num_tokens() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::matrix(n, n, (0..n * n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn loss_of(logits: &[Tensor], p: &TokenPartition, reduction: HeadReduction) -> (f64, Tape<'static>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = logits.iter().map(|l| tape.leaf_owned(l.clone())).collect();
        let heads: Vec<Var> = leaves.iter().map(|&l| tape.row_softmax(l, 1.0)).collect();
        let (e, r) = tape_layer_cut(&mut tape, &heads, p, reduction).unwrap();
        let total = tape.add(e, r);
        (tape.scalar(total), tape, leaves, total)
    }

    #[test]
    fn tape_terms_match_plain_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = TokenPartition::new(vec![0, 2, 3], vec![1, 4, 5], 6).unwrap();
        for reduction in [HeadReduction::Mean, HeadReduction::PerHeadSum] {
            let logits = vec![random_logits(&mut rng, 6), random_logits(&mut rng, 6)];
            let heads = logits.iter().map(|l| crate::kernels::row_softmax(l, 1.0).unwrap()).collect();
            let (e, r) = layer_cut_terms(&AttentionMap::new(heads).unwrap(), &p, reduction).unwrap();
            let (v, ..) = loss_of(&logits, &p, reduction);
            assert!((v - (e + r)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_through_softmax_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = TokenPartition::new(vec![0, 1, 4], vec![2, 3, 5, 6], 7).unwrap();
            let mut logits = vec![random_logits(&mut rng, 7), random_logits(&mut rng, 7)];
            let (_, tape, leaves, total) = loss_of(&logits, &p, HeadReduction::Mean);
            let grads = tape.backward(total).unwrap();
            for (hd, &leaf) in leaves.iter().enumerate() {
                let g = grads.tensor(leaf);
                for idx in 0..49 {
                    let orig = logits[hd].data()[idx];
                    logits[hd].data_mut()[idx] = orig + h;
                    let plus = loss_of(&logits, &p, HeadReduction::Mean).0;
                    logits[hd].data_mut()[idx] = orig - h;
                    let minus = loss_of(&logits, &p, HeadReduction::Mean).0;
                    logits[hd].data_mut()[idx] = orig;
                    let numeric = (plus - minus) / (2.0 * h);
                    let a = g.data()[idx];
                    let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    assert!(err < 1e-5, "seed {seed} head {hd} entry {idx}: {a} vs {numeric}");
                }
            }
        }
    }

    #[test]
    fn missing_attention_is_rejected() {
        let t = LayerTrace {
            layer: 0,
            partition: TokenPartition::full(3),
            features: Tensor::zeros(&[3, 2]),
            attention: None,
            scores: vec![0.5, 0.5],
        };
        assert_eq!(total_cut_loss(&[t], HeadReduction::Mean).unwrap_err().exit_code(), 2);
    }
}
