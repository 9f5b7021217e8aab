//! Dynamic routing: pool the hierarchy to the coarse grid, gate with an MLP, and score levels
//! per cell with Gumbel-Softmax.

use candle_core::{DType, Tensor, D};
use ndarray::{Array2, Array3};
use rand::Rng;

use crate::backbone::FeatureHierarchy;
use crate::error::{PvqaeError, Result};
use crate::ops::{avg_pool, last_dim_softmax, Dense, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteMode {
    /// Gumbel noise (when enabled) and temperature-scaled softmax.
    TrainSoft,
    /// Noiseless softmax; `hard` is its argmax.
    EvalHard,
}

/// Per-cell level scores of one image. Level 0 is the coarsest.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetMap {
    /// `(g, g, L)`, each cell a distribution over levels.
    pub soft: Array3<f64>,
    /// `(g, g)` argmax of `soft`, lowest level on ties.
    pub hard: Array2<usize>,
    pub mode: RouteMode,
}

impl BudgetMap {
    pub fn from_soft(soft: Array3<f64>, mode: RouteMode) -> Self {
        let (g, g2, _) = soft.dim();
        let hard = Array2::from_shape_fn((g, g2), |(i, j)| argmax(soft.slice(ndarray::s![i, j, ..]).iter().copied()));
        Self { soft, hard, mode }
    }

    pub fn grid(&self) -> usize {
        self.hard.nrows()
    }

    pub fn num_levels(&self) -> usize {
        self.soft.dim().2
    }

    /// Hard levels as CSV rows.
    pub fn hard_csv(&self) -> String {
        self.hard
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Standard Gumbel noise `−ln(−ln u)`, `u ~ U(0, 1)`.
pub fn sample_gumbel(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((logits + noise) / tau)` with max subtraction.
pub fn gumbel_softmax(logits: &[f64], tau: f64, noise: &[f64]) -> Vec<f64> {
    let shifted: Vec<f64> = logits.iter().zip(noise).map(|(g, d)| (g + d) / tau).collect();
    let m = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = shifted.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Exponential decay from `tau_start` at step 0 to `tau_end` at `total_steps`.
pub fn temperature_schedule(step: usize, total_steps: usize, tau_start: f64, tau_end: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return tau_end;
    }
    let t = step as f64 / total_steps as f64;
    tau_start * (tau_end / tau_start).powf(t)
}

/// Pools every level to the coarse grid and concatenates along channels: `(B, g, g, L·d)`.
pub fn pool_hierarchy(hierarchy: &FeatureHierarchy) -> Result<Tensor> {
    let pooled = hierarchy
        .levels
        .iter()
        .enumerate()
        .map(|(l, z)| avg_pool(z, 1 << l))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&pooled, D::Minus1)?)
}

/// Routing output for a batch.
#[derive(Debug, Clone)]
pub struct Routed {
    /// `(B, g, g, L)` gate logits.
    pub logits: Tensor,
    /// `(B, g, g, L)` level scores, differentiable w.r.t. the gate.
    pub soft: Tensor,
    pub maps: Vec<BudgetMap>,
}

impl Routed {
    /// `(B, g, g)` hard levels.
    pub fn hard_levels(&self) -> Array3<usize> {
        stack_levels(self.maps.iter().map(|m| &m.hard))
    }
}

pub(crate) fn stack_levels<'a>(maps: impl Iterator<Item = &'a Array2<usize>>) -> Array3<usize> {
    let maps: Vec<&Array2<usize>> = maps.collect();
    let g = maps.first().map_or(0, |m| m.nrows());
    Array3::from_shape_fn((maps.len(), g, g), |(b, i, j)| maps[b][[i, j]])
}

/// Single-hidden-layer gate over pooled features.
#[derive(Debug, Clone)]
pub struct Gate {
    hidden: Dense,
    out: Dense,
    levels: usize,
}

impl Gate {
    pub fn new(p: &Params, levels: usize, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            hidden: Dense::new(&p.pp("hidden"), levels * dim, hidden)?,
            out: Dense::new(&p.pp("out"), hidden, levels)?,
            levels,
        })
    }

    pub fn logits(&self, hierarchy: &FeatureHierarchy) -> Result<Tensor> {
        if hierarchy.levels.len() != self.levels {
            return Err(PvqaeError::Shape(format!(
                "gate built for {} levels, hierarchy has {}",
                self.levels,
                hierarchy.levels.len()
            )));
        }
        let pooled = pool_hierarchy(hierarchy)?;
        Ok(self.out.forward(&self.hidden.forward(&pooled)?.relu()?)?)
    }

    /// Scores every coarse cell. `rng` supplies Gumbel noise in `TrainSoft` mode; passing `None`
    /// there gives the noiseless tempered softmax.
    pub fn route<R: Rng>(
        &self,
        hierarchy: &FeatureHierarchy,
        tau: f64,
        rng: Option<&mut R>,
        mode: RouteMode,
    ) -> Result<Routed> {
        if !(tau > 0.0) {
            return Err(PvqaeError::Config(format!("temperature must be positive, got {tau}")));
        }
        let logits = self.logits(hierarchy)?;
        let perturbed = match (mode, rng) {
            (RouteMode::TrainSoft, Some(rng)) => {
                let noise = sample_gumbel(rng, logits.elem_count());
                let noise = Tensor::from_vec(noise, logits.shape(), logits.device())?.to_dtype(logits.dtype())?;
                (&logits + noise)?
            }
            _ => logits.clone(),
        };
        let soft = last_dim_softmax(&perturbed.affine(1.0 / tau, 0.0)?)?;
        let maps = budget_maps(&soft, mode)?;
        Ok(Routed { logits, soft, maps })
    }
}

/// Splits a `(B, g, g, L)` score tensor into per-image budget maps.
pub fn budget_maps(soft: &Tensor, mode: RouteMode) -> Result<Vec<BudgetMap>> {
    let (b, g, g2, l) = soft.dims4()?;
    let vals = soft.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(PvqaeError::Numeric("non-finite routing scores".into()));
    }
    Ok(vals
        .chunks_exact(g * g2 * l)
        .take(b)
        .map(|c| {
            let soft = Array3::from_shape_vec((g, g2, l), c.to_vec()).expect("chunk matches shape");
            BudgetMap::from_soft(soft, mode)
        })
        .collect())
}

/// One-hot `(B, g, g, L)` tensor of the given levels.
pub fn one_hot(levels: &Array3<usize>, num_levels: usize, like: &Tensor) -> Result<Tensor> {
    let (b, g, g2) = levels.dim();
    let mut v = vec![0f64; b * g * g2 * num_levels];
    for (k, &l) in levels.iter().enumerate() {
        if l >= num_levels {
            return Err(PvqaeError::Contract(format!("level {l} out of range for {num_levels} levels")));
        }
        v[k * num_levels + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (b, g, g2, num_levels), like.device())?.to_dtype(like.dtype())?)
}

/// Straight-through level weights: forward value is the one-hot of `hard`, gradient is that of `soft`.
pub fn straight_through_weights(soft: &Tensor, hard: &Array3<usize>) -> Result<Tensor> {
    let (_, _, _, l) = soft.dims4()?;
    let hot = one_hot(hard, l, soft)?;
    Ok((hot + (soft - soft.detach())?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::Params;
    use candle_core::{Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_logits_are_uniform() {
        for tau in [0.1, 1.0, 7.0] {
            let s = gumbel_softmax(&[0.3; 4], tau, &[0.0; 4]);
            assert!(s.iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn hand_example() {
        let s = gumbel_softmax(&[1.0, 0.0, 0.0], 1.0, &[0.0; 3]);
        let e = std::f64::consts::E;
        let want = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (a, b) in s.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((s[0] - 0.576).abs() < 1e-3 && (s[1] - 0.212).abs() < 1e-3);
    }

    #[test]
    fn low_temperature_is_one_hot() {
        let s = gumbel_softmax(&[0.2, 0.5, 0.1], 1e-4, &[0.1, -0.3, 0.05]);
        // g + d = (0.3, 0.2, 0.15)
        assert!((s[0] - 1.0).abs() < 1e-6 && s[1] < 1e-6 && s[2] < 1e-6);
    }

    #[test]
    fn temperature_endpoints() {
        assert_eq!(temperature_schedule(0, 100, 1.0, 0.1), 1.0);
        assert_eq!(temperature_schedule(100, 100, 1.0, 0.1), 0.1);
        assert!((temperature_schedule(50, 100, 1.0, 0.25) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gumbel_noise_is_finite_and_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = sample_gumbel(&mut rng, 20000);
        assert!(n.iter().all(|v| v.is_finite()));
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        // Euler-Mascheroni constant
        assert!((mean - 0.5772).abs() < 0.03);
    }

    fn hierarchy(levels: Vec<Vec<f64>>, g: usize, d: usize) -> FeatureHierarchy {
        let dev = Device::Cpu;
        FeatureHierarchy {
            levels: levels
                .into_iter()
                .enumerate()
                .map(|(l, v)| {
                    let gl = g << l;
                    Tensor::from_vec(v, (1, gl, gl, d), &dev).unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn pooling_mean_oracle() {
        // 1x1 coarse cell, 3 levels, d = 1: level 2 holds 1..16, level 1 holds {1, 2, 3, 4}
        let h = hierarchy(vec![vec![7.0], vec![1.0, 2.0, 3.0, 4.0], (1..=16).map(f64::from).collect()], 1, 1);
        let pooled = pool_hierarchy(&h).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(pooled, vec![7.0, 2.5, 8.5]);
    }

    #[test]
    fn constant_hierarchy_gives_identical_cells() {
        let p = Params::new(3, DType::F64, &Device::Cpu);
        let gate = Gate::new(&p, 3, 2, 8).unwrap();
        let h = hierarchy(vec![vec![0.3; 4 * 2], vec![0.3; 16 * 2], vec![0.3; 64 * 2]], 2, 2);
        let r = gate.route::<ChaCha8Rng>(&h, 1.0, None, RouteMode::EvalHard).unwrap();
        let s = &r.maps[0].soft;
        for i in 0..2 {
            for j in 0..2 {
                for l in 0..3 {
                    assert_eq!(s[[i, j, l]], s[[0, 0, l]]);
                }
            }
        }
        let again = gate.route::<ChaCha8Rng>(&h, 1.0, None, RouteMode::EvalHard).unwrap();
        assert_eq!(r.maps, again.maps);
        assert!(gate.route::<ChaCha8Rng>(&h, 0.0, None, RouteMode::EvalHard).is_err());
    }

    #[test]
    fn hard_is_argmax_of_soft() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Params::new(5, DType::F64, &Device::Cpu);
        let gate = Gate::new(&p, 3, 4, 16).unwrap();
        let vals = |n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let h = hierarchy(vec![vals(64, &mut rng), vals(256, &mut rng), vals(1024, &mut rng)], 4, 4);
        let r = gate.route(&h, 0.5, Some(&mut rng), RouteMode::TrainSoft).unwrap();
        let m = &r.maps[0];
        for i in 0..4 {
            for j in 0..4 {
                let row: Vec<f64> = (0..3).map(|l| m.soft[[i, j, l]]).collect();
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                assert_eq!(m.hard[[i, j]], argmax(row.into_iter()));
            }
        }
        assert_eq!(m.hard_csv().lines().count(), 4);
    }

    #[test]
    fn straight_through_forward_is_one_hot() {
        let dev = Device::Cpu;
        let soft = Var::new(&[[[[0.2f64, 0.5, 0.3]]]], &dev).unwrap();
        let hard = Array3::from_elem((1, 1, 1), 1usize);
        let w = straight_through_weights(soft.as_tensor(), &hard).unwrap();
        assert_eq!(w.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.0, 1.0, 0.0]);
        let coeffs = Tensor::new(&[1.0f64, 2.0, 3.0], &dev).unwrap();
        let g = w.broadcast_mul(&coeffs).unwrap().sum_all().unwrap().backward().unwrap();
        let grad = g.get(soft.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(grad, vec![1.0, 2.0, 3.0]);
    }
}
