//! Budget prior: flattening level grids into sequences and a one-block masked-token transformer
//! that predicts each cell's level from every other cell and a class token.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PvqaeError, Result};
use crate::ops::{last_dim_softmax, Dense, Init, Params};

/// Cell visiting order used to flatten a level grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Traversal {
    /// Concentric clockwise rings starting at the top-left cell.
    Spiral,
    /// Row-major with every other row reversed.
    Boustrophedon,
}

impl FromStr for Traversal {
    type Err = PvqaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spiral" => Ok(Self::Spiral),
            "boustrophedon" => Ok(Self::Boustrophedon),
            other => Err(PvqaeError::Config(format!("unknown traversal {other:?}"))),
        }
    }
}

impl fmt::Display for Traversal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Spiral => "spiral",
            Self::Boustrophedon => "boustrophedon",
        })
    }
}

/// Clockwise spiral over a `g × g` grid.
pub fn spiral_order(g: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(g * g);
    let (mut top, mut left) = (0isize, 0isize);
    let (mut bottom, mut right) = (g as isize - 1, g as isize - 1);
    while top <= bottom && left <= right {
        for c in left..=right {
            out.push((top, c));
        }
        for r in top + 1..=bottom {
            out.push((r, right));
        }
        if top < bottom {
            for c in (left..right).rev() {
                out.push((bottom, c));
            }
        }
        if left < right {
            for r in (top + 1..bottom).rev() {
                out.push((r, left));
            }
        }
        top += 1;
        left += 1;
        bottom -= 1;
        right -= 1;
    }
    out.into_iter().map(|(r, c)| (r as usize, c as usize)).collect()
}

pub fn traversal_order(g: usize, traversal: Traversal) -> Vec<(usize, usize)> {
    match traversal {
        Traversal::Spiral => spiral_order(g),
        Traversal::Boustrophedon => (0..g)
            .flat_map(|r| {
                let cols: Vec<usize> = if r % 2 == 0 { (0..g).collect() } else { (0..g).rev().collect() };
                cols.into_iter().map(move |c| (r, c))
            })
            .collect(),
    }
}

/// Flattened level grid. `tokens[0]` is the class slot of the CLS token; the rest are levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetSequence {
    pub tokens: Vec<usize>,
    pub class_id: usize,
}

impl BudgetSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn levels(&self) -> &[usize] {
        &self.tokens[1..]
    }
}

pub fn flatten(levels: &Array2<usize>, class_id: usize, traversal: Traversal) -> Result<BudgetSequence> {
    let (g, g2) = levels.dim();
    if g != g2 || g == 0 {
        return Err(PvqaeError::Shape(format!("level grid must be square, got {g}x{g2}")));
    }
    let mut tokens = Vec::with_capacity(1 + g * g);
    tokens.push(class_id);
    tokens.extend(traversal_order(g, traversal).into_iter().map(|rc| levels[rc]));
    Ok(BudgetSequence { tokens, class_id })
}

pub fn flatten_clockwise(levels: &Array2<usize>, class_id: usize) -> Result<BudgetSequence> {
    flatten(levels, class_id, Traversal::Spiral)
}

/// Inverse of [`flatten`] for the level positions.
pub fn unflatten(seq: &BudgetSequence, traversal: Traversal) -> Result<Array2<usize>> {
    let cells = seq.len().saturating_sub(1);
    let g = (cells as f64).sqrt().round() as usize;
    if g * g != cells || g == 0 {
        return Err(PvqaeError::Shape(format!("sequence of {} tokens is not 1 + g²", seq.len())));
    }
    let mut grid = Array2::zeros((g, g));
    for (k, rc) in traversal_order(g, traversal).into_iter().enumerate() {
        grid[rc] = seq.tokens[1 + k];
    }
    Ok(grid)
}

/// Mean cross-entropy of `(N, L)` logits against integer targets.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (n, _) = logits.dims2()?;
    if n != targets.len() {
        return Err(PvqaeError::Shape(format!("{n} logit rows for {} targets", targets.len())));
    }
    let log_p = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx = Tensor::from_vec(targets.iter().map(|&t| t as u32).collect::<Vec<_>>(), (n, 1), logits.device())?;
    Ok(log_p.gather(&idx, 1)?.mean_all()?.neg()?)
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gain: Tensor,
    shift: Tensor,
}

impl LayerNorm {
    fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: p.get(dim, "gain", Init::Const(1.0))?,
            shift: p.get(dim, "shift", Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .broadcast_mul(&self.gain)?
            .broadcast_add(&self.shift)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Dense,
    proj: Dense,
    ln2: LayerNorm,
    fc1: Dense,
    fc2: Dense,
    heads: usize,
}

impl Block {
    fn new(p: &Params, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(PvqaeError::Config(format!("prior dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            ln1: LayerNorm::new(&p.pp("ln1"), dim)?,
            qkv: Dense::new(&p.pp("qkv"), dim, 3 * dim)?,
            proj: Dense::new(&p.pp("proj"), dim, dim)?,
            ln2: LayerNorm::new(&p.pp("ln2"), dim)?,
            fc1: Dense::new(&p.pp("fc1"), dim, 4 * dim)?,
            fc2: Dense::new(&p.pp("fc2"), 4 * dim, dim)?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, dim) = x.dims3()?;
        let hd = dim / self.heads;
        let qkv = self
            .qkv
            .forward(&self.ln1.forward(x)?)?
            .reshape((b, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let att = candle_nn::ops::softmax_last_dim(&att)?;
        let mixed = att.matmul(&v)?.transpose(1, 2)?.reshape((b, t, dim))?;
        let x = (x + self.proj.forward(&mixed)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        x + h
    }
}

/// One-block transformer over `[CLS, level tokens…]` with an output head over levels.
///
/// Vocabulary: levels `0..L`, the mask token `L`, then one CLS token per class slot.
pub struct PriorTransformer {
    params: Params,
    embed: Tensor,
    pos: Tensor,
    block: Block,
    ln_f: LayerNorm,
    head: Dense,
    levels: usize,
    class_slots: usize,
    coarse_grid: usize,
    dim: usize,
    seq_len: usize,
    traversal: Traversal,
}

/// Shape and vocabulary of a prior model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorShape {
    pub levels: usize,
    pub class_slots: usize,
    pub coarse_grid: usize,
    pub dim: usize,
    pub heads: usize,
    pub traversal: Traversal,
}

/// Per-cell prediction for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorPrediction {
    /// Predicted sequence (`B̂`), CLS slot first.
    pub sequence: BudgetSequence,
    /// `(g, g)` argmax levels.
    pub levels: Array2<usize>,
    /// `(g, g, L)` predicted distributions.
    pub dists: Array3<f64>,
}

impl PriorTransformer {
    pub fn new(seed: u64, shape: PriorShape, device: &Device) -> Result<Self> {
        let p = Params::new(seed, DType::F32, device);
        let pp = p.pp("prior");
        let vocab = shape.levels + 1 + shape.class_slots;
        let seq_len = 1 + shape.coarse_grid * shape.coarse_grid;
        let embed = pp.get((vocab, shape.dim), "embed", Init::Uniform { lo: -0.1, hi: 0.1 })?;
        let pos = pp.get((seq_len, shape.dim), "pos", Init::Uniform { lo: -0.1, hi: 0.1 })?;
        let block = Block::new(&pp.pp("block"), shape.dim, shape.heads)?;
        let ln_f = LayerNorm::new(&pp.pp("ln_f"), shape.dim)?;
        let head = Dense::new(&pp.pp("head"), shape.dim, shape.levels)?;
        Ok(Self {
            params: p,
            embed,
            pos,
            block,
            ln_f,
            head,
            levels: shape.levels,
            class_slots: shape.class_slots,
            coarse_grid: shape.coarse_grid,
            dim: shape.dim,
            seq_len,
            traversal: shape.traversal,
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn shape(&self) -> PriorShape {
        PriorShape {
            levels: self.levels,
            class_slots: self.class_slots,
            coarse_grid: self.coarse_grid,
            dim: self.dim,
            heads: self.block.heads,
            traversal: self.traversal,
        }
    }

    pub fn class_slots(&self) -> usize {
        self.class_slots
    }

    pub fn mask_token(&self) -> usize {
        self.levels
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn traversal(&self) -> Traversal {
        self.traversal
    }

    pub fn num_levels(&self) -> usize {
        self.levels
    }

    fn check(&self, seq: &BudgetSequence) -> Result<()> {
        if seq.len() != self.seq_len {
            return Err(PvqaeError::Shape(format!(
                "sequence has {} tokens, model expects {}",
                seq.len(),
                self.seq_len
            )));
        }
        if seq.tokens[0] >= self.class_slots {
            return Err(PvqaeError::Contract(format!(
                "class slot {} not registered ({} slots)",
                seq.tokens[0], self.class_slots
            )));
        }
        if let Some(&bad) = seq.levels().iter().find(|&&l| l >= self.levels) {
            return Err(PvqaeError::Contract(format!("level token {bad} out of range")));
        }
        Ok(())
    }

    /// Vocabulary ids of `seq` with `position` replaced by the mask token.
    fn masked_ids(&self, seq: &BudgetSequence, position: usize) -> Vec<u32> {
        seq.tokens
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                if k == 0 {
                    (self.levels + 1 + t) as u32
                } else if k == position {
                    self.mask_token() as u32
                } else {
                    t as u32
                }
            })
            .collect()
    }

    /// Logits `(B, T, L)` for a batch of token-id rows.
    fn forward_ids(&self, ids: Vec<u32>, batch: usize) -> Result<Tensor> {
        let ids = Tensor::from_vec(ids, batch * self.seq_len, self.embed.device())?;
        let x = self
            .embed
            .index_select(&ids, 0)?
            .reshape((batch, self.seq_len, ()))?
            .broadcast_add(&self.pos)?;
        let h = self.ln_f.forward(&self.block.forward(&x)?)?;
        Ok(self.head.forward(&h)?)
    }

    /// Logits `(B, L)` at the masked position of each `(sequence, position)` pair.
    fn masked_logits(&self, items: &[(&BudgetSequence, usize)]) -> Result<Tensor> {
        let mut ids = Vec::with_capacity(items.len() * self.seq_len);
        let mut select = vec![0f32; items.len() * self.seq_len];
        for (b, (seq, pos)) in items.iter().enumerate() {
            self.check(seq)?;
            if *pos == 0 || *pos >= self.seq_len {
                return Err(PvqaeError::Contract(format!(
                    "mask position {pos} outside 1..={}",
                    self.seq_len - 1
                )));
            }
            ids.extend(self.masked_ids(seq, *pos));
            select[b * self.seq_len + pos] = 1.0;
        }
        let logits = self.forward_ids(ids, items.len())?;
        let select = Tensor::from_vec(select, (items.len(), self.seq_len, 1), logits.device())?;
        Ok(logits.broadcast_mul(&select)?.sum(1)?)
    }

    /// Distribution over levels for the token at `position`, with that token masked.
    pub fn mask_and_predict(&self, seq: &BudgetSequence, position: usize) -> Result<Vec<f64>> {
        let logits = self.masked_logits(&[(seq, position)])?;
        let p = last_dim_softmax(&logits)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(p)
    }

    /// Masks each level position in turn (g² passes, batched) and collects the predictions.
    pub fn predict_prior(&self, seq: &BudgetSequence) -> Result<PriorPrediction> {
        self.check(seq)?;
        let n = self.seq_len - 1;
        let items: Vec<(&BudgetSequence, usize)> = (1..=n).map(|p| (seq, p)).collect();
        let probs = last_dim_softmax(&self.masked_logits(&items)?)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        let mut tokens = vec![seq.tokens[0]];
        tokens.extend(probs.iter().map(|row| crate::routing::argmax(row.iter().copied())));
        let sequence = BudgetSequence {
            tokens,
            class_id: seq.class_id,
        };
        let levels = unflatten(&sequence, self.traversal)?;
        let g = levels.nrows();
        let mut dists = Array3::zeros((g, g, self.levels));
        for (k, (r, c)) in traversal_order(g, self.traversal).into_iter().enumerate() {
            for l in 0..self.levels {
                dists[[r, c, l]] = probs[k][l];
            }
        }
        Ok(PriorPrediction {
            sequence,
            levels,
            dists,
        })
    }

    /// Masked-prediction loss over `(sequence, position)` pairs.
    pub fn loss(&self, items: &[(&BudgetSequence, usize)]) -> Result<Tensor> {
        let logits = self.masked_logits(items)?;
        let targets: Vec<usize> = items.iter().map(|(s, p)| s.tokens[*p]).collect();
        cross_entropy(&logits, &targets)
    }
}

/// Prior training schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// Per-step losses of a prior training run.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTrainReport {
    pub losses: Vec<f64>,
}

impl PriorTrainReport {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    /// Mean loss over the first and last `window` steps.
    pub fn first_last_mean(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.losses.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..]))
    }
}

/// Trains by masking one uniformly drawn position per sequence per step.
pub fn train_prior(
    model: &PriorTransformer,
    sequences: &[BudgetSequence],
    cfg: &PriorTrainConfig,
    rng: &mut impl Rng,
) -> Result<PriorTrainReport> {
    if sequences.is_empty() {
        return Err(PvqaeError::Config("prior training needs at least one sequence".into()));
    }
    for s in sequences {
        model.check(s)?;
    }
    let mut opt = AdamW::new(
        model.params.varmap().all_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch_size.max(1);
    for step in 0..cfg.steps {
        let items: Vec<(&BudgetSequence, usize)> = (0..batch)
            .map(|_| {
                let s = &sequences[rng.gen_range(0..sequences.len())];
                (s, rng.gen_range(1..model.seq_len))
            })
            .collect();
        let loss = model.loss(&items)?;
        let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(PvqaeError::Divergence {
                step,
                detail: format!("prior loss {v}"),
            });
        }
        opt.backward_step(&loss)?;
        losses.push(v);
    }
    Ok(PriorTrainReport { losses })
}
