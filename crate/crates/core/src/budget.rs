//! Context richness from Haar-wavelet entropy, and the progressive budget loss.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{PvqaeError, Result};

/// Subbands of a single-level orthonormal 2-D Haar transform, each `(p/2, p/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HaarCoefficients {
    pub ll: Array2<f64>,
    pub lh: Array2<f64>,
    pub hl: Array2<f64>,
    pub hh: Array2<f64>,
}

impl HaarCoefficients {
    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .map(|b| b.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn details(&self) -> impl Iterator<Item = f64> + '_ {
        self.lh.iter().chain(self.hl.iter()).chain(self.hh.iter()).copied()
    }
}

/// Single-level orthonormal Haar transform of an even-sized square patch.
pub fn dwt_haar(patch: &Array2<f64>) -> Result<HaarCoefficients> {
    let (h, w) = patch.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(PvqaeError::Config(format!("Haar transform needs even sides, got {h}x{w}")));
    }
    let (hh_, hw) = (h / 2, w / 2);
    let mut out = HaarCoefficients {
        ll: Array2::zeros((hh_, hw)),
        lh: Array2::zeros((hh_, hw)),
        hl: Array2::zeros((hh_, hw)),
        hh: Array2::zeros((hh_, hw)),
    };
    for i in 0..hh_ {
        for j in 0..hw {
            let a = patch[[2 * i, 2 * j]];
            let b = patch[[2 * i, 2 * j + 1]];
            let c = patch[[2 * i + 1, 2 * j]];
            let d = patch[[2 * i + 1, 2 * j + 1]];
            out.ll[[i, j]] = (a + b + c + d) / 2.0;
            out.lh[[i, j]] = (a - b + c - d) / 2.0;
            out.hl[[i, j]] = (a + b - c - d) / 2.0;
            out.hh[[i, j]] = (a - b - c + d) / 2.0;
        }
    }
    Ok(out)
}

/// Entropy of the absolute detail-coefficient mass, divided by `ln(count)` so it lies in `[0, 1]`.
pub fn detail_entropy(coeffs: &HaarCoefficients) -> f64 {
    let mags: Vec<f64> = coeffs.details().map(f64::abs).collect();
    let total: f64 = mags.iter().sum();
    if total <= 0.0 || mags.len() < 2 {
        return 0.0;
    }
    let h: f64 = mags
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| {
            let p = m / total;
            -p * p.ln()
        })
        .sum();
    (h / (mags.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Per-coarse-cell context richness of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextRichness {
    /// Entropy per cell, in `[0, 1]`.
    pub raw: Array2<f64>,
    /// `raw` divided by its sum over cells (uniform when every cell is flat).
    pub normalized: Array2<f64>,
}

impl ContextRichness {
    pub fn from_raw(raw: Array2<f64>) -> Self {
        let total: f64 = raw.sum();
        let normalized = if total > 0.0 {
            raw.mapv(|v| v / total)
        } else {
            Array2::from_elem(raw.dim(), 1.0 / raw.len() as f64)
        };
        Self { raw, normalized }
    }

    /// Per-cell base cost `1 / max(H, ε)` from either the normalized or the raw entropy.
    pub fn inverse_cost(&self, epsilon_floor: f64, normalized: bool) -> Array2<f64> {
        let src = if normalized { &self.normalized } else { &self.raw };
        src.mapv(|v| 1.0 / v.max(epsilon_floor))
    }
}

fn grayscale(image: &Array3<f32>) -> Array2<f64> {
    let (h, w, _) = image.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * image[[y, x, 0]] as f64 + 0.587 * image[[y, x, 1]] as f64 + 0.114 * image[[y, x, 2]] as f64
    })
}

/// Splits an `(H, W, 3)` image into `g × g` patches and scores each by Haar detail entropy.
pub fn context_entropy(image: &Array3<f32>, coarse_grid: usize) -> Result<ContextRichness> {
    let (h, w, _) = image.dim();
    if coarse_grid == 0 || h % coarse_grid != 0 || w % coarse_grid != 0 {
        return Err(PvqaeError::Config(format!(
            "image {h}x{w} does not split into a {coarse_grid}x{coarse_grid} grid"
        )));
    }
    let (ph, pw) = (h / coarse_grid, w / coarse_grid);
    let gray = grayscale(image);
    let mut raw = Array2::zeros((coarse_grid, coarse_grid));
    for i in 0..coarse_grid {
        for j in 0..coarse_grid {
            let patch = gray.slice(s![i * ph..(i + 1) * ph, j * pw..(j + 1) * pw]).to_owned();
            raw[[i, j]] = detail_entropy(&dwt_haar(&patch)?);
        }
    }
    Ok(ContextRichness::from_raw(raw))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetLossConfig {
    pub cost_factor: f64,
    pub lambda_max: f64,
    pub epsilon_floor: f64,
    pub normalized_entropy: bool,
}

impl BudgetLossConfig {
    pub fn for_levels(levels: usize) -> Self {
        Self {
            cost_factor: 2f64.powi(levels as i32 - 1),
            lambda_max: 1.25,
            epsilon_floor: 1e-3,
            normalized_entropy: true,
        }
    }
}

/// Budget of one image from per-cell level scores `(g, g, L)` (one-hot for hard selections).
pub fn budget_cost(scores: &Array3<f64>, richness: &ContextRichness, cfg: &BudgetLossConfig) -> Result<f64> {
    let (g, g2, levels) = scores.dim();
    if (g, g2) != richness.raw.dim() {
        return Err(PvqaeError::Shape(format!(
            "scores grid {g}x{g2} vs richness {:?}",
            richness.raw.dim()
        )));
    }
    let inv = richness.inverse_cost(cfg.epsilon_floor, cfg.normalized_entropy);
    let mut total = 0.0;
    for i in 0..g {
        for j in 0..g2 {
            let expected: f64 = (0..levels)
                .map(|l| scores[[i, j, l]] * cfg.cost_factor.powi(l as i32))
                .sum();
            total += inv[[i, j]] * expected;
        }
    }
    Ok(total)
}

/// Differentiable budget loss for a batch of soft scores `(B, g, g, L)`, averaged over the batch.
pub fn budget_loss(soft: &Tensor, richness: &[ContextRichness], cfg: &BudgetLossConfig) -> Result<Tensor> {
    let (b, g, g2, levels) = soft.dims4()?;
    if richness.len() != b {
        return Err(PvqaeError::Shape(format!("{} richness maps for batch {b}", richness.len())));
    }
    let mut inv = Vec::with_capacity(b * g * g2);
    for r in richness {
        if r.raw.dim() != (g, g2) {
            return Err(PvqaeError::Shape(format!("richness grid {:?} vs {g}x{g2}", r.raw.dim())));
        }
        inv.extend(r.inverse_cost(cfg.epsilon_floor, cfg.normalized_entropy).iter().copied());
    }
    let dev = soft.device();
    let inv = Tensor::from_vec(inv, (b, g, g2, 1), dev)?.to_dtype(soft.dtype())?;
    let mult: Vec<f64> = (0..levels).map(|l| cfg.cost_factor.powi(l as i32)).collect();
    let mult = Tensor::from_vec(mult, levels, dev)?.to_dtype(soft.dtype())?;
    let weighted = soft.broadcast_mul(&mult)?.broadcast_mul(&inv)?;
    Ok(weighted.sum_all()?.affine(1.0 / b as f64, 0.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSchedule {
    Constant,
    Cosine,
    Linear,
}

impl FromStr for LambdaSchedule {
    type Err = PvqaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(PvqaeError::Config(format!("unknown lambda schedule {other:?}"))),
        }
    }
}

impl fmt::Display for LambdaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
            Self::Linear => "linear",
        })
    }
}

/// Budget-loss weight at `step` of `total_steps`.
pub fn lambda_schedule(step: usize, total_steps: usize, lambda_max: f64, kind: LambdaSchedule) -> f64 {
    let t = if total_steps == 0 {
        1.0
    } else {
        step.min(total_steps) as f64 / total_steps as f64
    };
    match kind {
        LambdaSchedule::Constant => lambda_max,
        LambdaSchedule::Linear => {
            if step >= total_steps {
                lambda_max
            } else {
                lambda_max * t
            }
        }
        LambdaSchedule::Cosine => {
            if step >= total_steps {
                lambda_max
            } else {
                lambda_max * (1.0 - (std::f64::consts::PI * t).cos()) / 2.0
            }
        }
    }
}

/// Hard level map `(g, g)` expanded to one-hot scores `(g, g, L)`.
pub fn one_hot_levels(levels: &Array2<usize>, num_levels: usize) -> Array3<f64> {
    let (g, g2) = levels.dim();
    Array3::from_shape_fn((g, g2, num_levels), |(i, j, l)| f64::from(u8::from(levels[[i, j]] == l)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> BudgetLossConfig {
        BudgetLossConfig::for_levels(3)
    }

    fn single_cell(h_norm: f64) -> ContextRichness {
        ContextRichness {
            raw: arr2(&[[h_norm]]),
            normalized: arr2(&[[h_norm]]),
        }
    }

    #[test]
    fn constant_patch_has_no_detail() {
        let c = dwt_haar(&Array2::from_elem((8, 8), 0.3)).unwrap();
        assert!(c.details().all(|v| v == 0.0));
        assert_eq!(detail_entropy(&c), 0.0);
    }

    #[test]
    fn two_by_two_butterflies() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 5.0);
        let co = dwt_haar(&arr2(&[[a, b], [c, d]])).unwrap();
        assert_eq!(co.ll[[0, 0]], (a + b + c + d) / 2.0);
        assert_eq!(co.lh[[0, 0]], (a - b + c - d) / 2.0);
        assert_eq!(co.hl[[0, 0]], (a + b - c - d) / 2.0);
        assert_eq!(co.hh[[0, 0]], (a - b - c + d) / 2.0);
    }

    #[test]
    fn odd_patch_is_rejected() {
        assert!(dwt_haar(&Array2::zeros((3, 4))).is_err());
    }

    #[test]
    fn energy_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = Array2::from_shape_fn((16, 16), |_| rng.gen_range(-1.0..1.0));
            let e: f64 = p.iter().map(|v| v * v).sum();
            assert!((dwt_haar(&p).unwrap().energy() - e).abs() < 1e-6);
        }
    }

    fn coeffs_with_details(details: &[f64]) -> HaarCoefficients {
        // 2x2 subbands -> 12 detail coefficients
        let mut v = details.to_vec();
        v.resize(12, 0.0);
        HaarCoefficients {
            ll: Array2::zeros((2, 2)),
            lh: Array2::from_shape_vec((2, 2), v[0..4].to_vec()).unwrap(),
            hl: Array2::from_shape_vec((2, 2), v[4..8].to_vec()).unwrap(),
            hh: Array2::from_shape_vec((2, 2), v[8..12].to_vec()).unwrap(),
        }
    }

    #[test]
    fn entropy_extremes() {
        assert!((detail_entropy(&coeffs_with_details(&[0.7; 12])) - 1.0).abs() < 1e-12);
        assert_eq!(detail_entropy(&coeffs_with_details(&[2.0])), 0.0);
        // two equal magnitudes among zeros: ln 2 / ln 12
        let h = detail_entropy(&coeffs_with_details(&[0.5, -0.5]));
        assert!((h - 2f64.ln() / 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn flat_cells_are_floored_not_divided_by_zero() {
        let img = Array3::from_elem((16, 16, 3), 0.4f32);
        let r = context_entropy(&img, 2).unwrap();
        assert!(r.raw.iter().all(|&v| v == 0.0));
        assert!((r.normalized.sum() - 1.0).abs() < 1e-12);
        let inv = r.inverse_cost(1e-3, false);
        assert!(inv.iter().all(|&v| v == 1000.0));
    }

    #[test]
    fn raw_entropy_in_unit_interval_and_normalized_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Array3::from_shape_fn((32, 32, 3), |_| rng.gen_range(0.0..1.0f32));
        let r = context_entropy(&img, 4).unwrap();
        assert!(r.raw.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((r.normalized.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn budget_hand_examples() {
        let c = cfg();
        let one_hot = |l: usize| Array3::from_shape_fn((1, 1, 3), |(_, _, k)| f64::from(u8::from(k == l)));
        assert_eq!(budget_cost(&one_hot(0), &single_cell(1.0), &c).unwrap(), 1.0);
        assert_eq!(budget_cost(&one_hot(2), &single_cell(1.0), &c).unwrap(), 16.0);
        let soft = Array3::from_shape_vec((1, 1, 3), vec![0.5, 0.5, 0.0]).unwrap();
        assert_eq!(budget_cost(&soft, &single_cell(0.5), &c).unwrap(), 5.0);
    }

    #[test]
    fn tensor_loss_matches_scalar_cost_and_has_gradient() {
        let dev = Device::Cpu;
        let soft = Var::new(&[[[[0.5f64, 0.5, 0.0]]]], &dev).unwrap();
        let loss = budget_loss(soft.as_tensor(), &[single_cell(0.5)], &cfg()).unwrap();
        assert_eq!(loss.to_scalar::<f64>().unwrap(), 5.0);
        let g = loss.backward().unwrap();
        let grad = g.get(soft.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(grad, vec![2.0, 8.0, 32.0]);
    }

    #[test]
    fn budget_is_monotone_in_level_and_richness() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let raw = Array2::from_shape_fn((3, 3), |_| rng.gen_range(0.05..1.0));
            let rich = ContextRichness::from_raw(raw);
            let mut levels = Array2::from_shape_fn((3, 3), |_| rng.gen_range(0..3usize));
            let (i, j) = (rng.gen_range(0..3), rng.gen_range(0..3));
            levels[[i, j]] = 0;
            let mut prev = budget_cost(&one_hot_levels(&levels, 3), &rich, &c).unwrap();
            for l in 1..3 {
                levels[[i, j]] = l;
                let cur = budget_cost(&one_hot_levels(&levels, 3), &rich, &c).unwrap();
                assert!(cur > prev);
                prev = cur;
            }
            // more richness in one cell (others fixed) lowers the cost
            let mut richer = rich.clone();
            richer.normalized[[i, j]] *= 1.5;
            let base = budget_cost(&one_hot_levels(&levels, 3), &rich, &c).unwrap();
            assert!(budget_cost(&one_hot_levels(&levels, 3), &richer, &c).unwrap() < base);
        }
    }

    #[test]
    fn schedules_hit_endpoints() {
        use LambdaSchedule::*;
        assert_eq!(lambda_schedule(0, 100, 1.25, Linear), 0.0);
        assert_eq!(lambda_schedule(100, 100, 1.25, Linear), 1.25);
        assert_eq!(lambda_schedule(50, 100, 1.25, Linear), 0.625);
        assert_eq!(lambda_schedule(0, 100, 1.25, Cosine), 0.0);
        assert_eq!(lambda_schedule(100, 100, 1.25, Cosine), 1.25);
        assert!((lambda_schedule(50, 100, 1.0, Cosine) - 0.5).abs() < 1e-12);
        assert_eq!(lambda_schedule(37, 100, 1.0, Constant), 1.0);
        assert!(matches!("step".parse::<LambdaSchedule>(), Err(PvqaeError::Config(_))));
    }
}
