//! Per-level discrete codebooks, nearest-code lookup and the VQ objective.

use candle_core::{Tensor, Var, D};
use ndarray::Array3;

use crate::error::{PvqaeError, Result};
use crate::ops::{batch_sum_mean, Init, Params};

/// One `K_l × n` code matrix per resolution level; level 0 is the coarsest.
#[derive(Debug, Clone)]
pub struct Codebook {
    levels: Vec<Var>,
    dim: usize,
}

/// Codes selected for one level of a batched grid.
#[derive(Debug, Clone)]
pub struct QuantizationResult {
    pub level: usize,
    /// `(B, g, g)` code indices.
    pub indices: Array3<u32>,
    /// `(B, g, g, n)` codebook rows, differentiable w.r.t. the codebook.
    pub codes: Tensor,
    /// `z + sg(q - z)`: forward value equals `codes`, gradient passes straight to `z`.
    pub straight_through: Tensor,
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Exhaustive nearest code among `codes` (row-major `K × n`), lowest index on ties.
pub fn nearest_code(z: &[f32], codes: &[f32], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (m, q) in codes.chunks_exact(dim).enumerate() {
        let d = squared_distance(z, q);
        if d < best_d {
            best_d = d;
            best = m;
        }
    }
    best
}

/// Batched nearest-code search.
///
/// Candidates are screened with the expanded `‖z‖² − 2z·q + ‖q‖²` form (one matmul), and every
/// code within round-off of the screened minimum is re-scored exactly, so the result matches
/// [`nearest_code`] row by row.
fn nearest_codes(rows: &Tensor, codes: &Tensor) -> Result<Vec<u32>> {
    let (_, dim) = rows.dims2()?;
    let rows = rows.to_dtype(candle_core::DType::F32)?.contiguous()?;
    let codes = codes.to_dtype(candle_core::DType::F32)?.contiguous()?;
    let cross = rows.matmul(&codes.t()?)?.to_vec2::<f32>()?;
    let row_vals = rows.flatten_all()?.to_vec1::<f32>()?;
    let code_vals = codes.flatten_all()?.to_vec1::<f32>()?;
    let code_norms: Vec<f32> = code_vals
        .chunks_exact(dim)
        .map(|q| q.iter().map(|v| v * v).sum())
        .collect();
    let max_code_norm = code_norms.iter().cloned().fold(0f32, f32::max);
    let mut out = Vec::with_capacity(cross.len());
    for (z, dots) in row_vals.chunks_exact(dim).zip(&cross) {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(PvqaeError::Numeric("non-finite embedding in lookup".into()));
        }
        let z_norm: f32 = z.iter().map(|v| v * v).sum();
        let approx: Vec<f32> = dots
            .iter()
            .zip(&code_norms)
            .map(|(dot, qn)| z_norm - 2.0 * dot + qn)
            .collect();
        let min = approx.iter().cloned().fold(f32::INFINITY, f32::min);
        let tol = 1e-4 * (z_norm + max_code_norm) + 1e-12;
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (m, &a) in approx.iter().enumerate() {
            if a <= min + tol {
                let d = squared_distance(z, &code_vals[m * dim..(m + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = m;
                }
            }
        }
        out.push(best as u32);
    }
    Ok(out)
}

impl Codebook {
    /// Fresh codebooks with entries uniform in `[-1/K, 1/K]`.
    pub fn new(p: &Params, sizes: &[usize], dim: usize) -> Result<Self> {
        let mut levels = Vec::with_capacity(sizes.len());
        for (l, &k) in sizes.iter().enumerate() {
            if k < 2 {
                return Err(PvqaeError::Config(format!("codebook level {l} needs K >= 2, got {k}")));
            }
            let bound = 1.0 / k as f64;
            levels.push(p.get_var((k, dim), &format!("level{l}"), Init::Uniform { lo: -bound, hi: bound })?);
        }
        Ok(Self { levels, dim })
    }

    /// Wraps explicit `K × n` matrices (e.g. for tests).
    pub fn from_tensors(levels: Vec<Tensor>) -> Result<Self> {
        let dim = levels
            .first()
            .ok_or_else(|| PvqaeError::Config("codebook needs at least one level".into()))?
            .dim(1)?;
        for (l, q) in levels.iter().enumerate() {
            let (k, n) = q.dims2()?;
            if n != dim || k < 2 {
                return Err(PvqaeError::Config(format!("level {l} has shape {k}x{n}")));
            }
            let vals = q.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(PvqaeError::Numeric(format!("level {l} holds non-finite codes")));
            }
        }
        let levels = levels.iter().map(Var::from_tensor).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { levels, dim })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn size(&self, level: usize) -> usize {
        self.levels[level].dim(0).unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codes(&self, level: usize) -> &Tensor {
        &self.levels[level]
    }

    /// Overwrites the codes at `slots` of `level` with `values`, `dim` entries per slot.
    pub fn reset_codes(&self, level: usize, slots: &[usize], values: &[f32]) -> Result<()> {
        self.check_level(level)?;
        if values.len() != slots.len() * self.dim {
            return Err(PvqaeError::Shape(format!(
                "{} values for {} slots of dim {}",
                values.len(),
                slots.len(),
                self.dim
            )));
        }
        let var = &self.levels[level];
        let k = self.size(level);
        let mut codes = var.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for (&slot, v) in slots.iter().zip(values.chunks(self.dim)) {
            if slot >= k {
                return Err(PvqaeError::Contract(format!("code {slot} out of range for {k} codes")));
            }
            codes[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(v);
        }
        let t = Tensor::from_vec(codes, (k, self.dim), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
        Ok(())
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level >= self.levels.len() {
            return Err(PvqaeError::Contract(format!(
                "level {level} out of range for {} levels",
                self.levels.len()
            )));
        }
        Ok(())
    }

    /// Nearest code to a single embedding: `(index, code row)`.
    pub fn lookup(&self, z: &[f32], level: usize) -> Result<(usize, Vec<f32>)> {
        self.check_level(level)?;
        if z.len() != self.dim {
            return Err(PvqaeError::Shape(format!("embedding has {} dims, codebook {}", z.len(), self.dim)));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(PvqaeError::Numeric("non-finite embedding in lookup".into()));
        }
        let codes = self.levels[level]
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let index = nearest_code(z, &codes, self.dim);
        Ok((index, codes[index * self.dim..(index + 1) * self.dim].to_vec()))
    }

    /// Quantizes a `(B, g, g, n)` grid against the codes of `level`.
    pub fn quantize_grid(&self, z: &Tensor, level: usize) -> Result<QuantizationResult> {
        self.check_level(level)?;
        let (b, h, w, n) = z.dims4()?;
        if n != self.dim || h != w {
            return Err(PvqaeError::Shape(format!(
                "grid {b}x{h}x{w}x{n} does not match code dim {}",
                self.dim
            )));
        }
        let rows = z.detach().reshape((b * h * w, n))?;
        let idx = nearest_codes(&rows, &self.levels[level])?;
        let idx_t = Tensor::from_vec(idx.clone(), b * h * w, z.device())?;
        let codes = self.levels[level].index_select(&idx_t, 0)?.reshape((b, h, w, n))?;
        let straight_through = (z + (&codes - z)?.detach())?;
        let indices = Array3::from_shape_vec((b, h, w), idx)
            .map_err(|e| PvqaeError::Shape(e.to_string()))?;
        Ok(QuantizationResult {
            level,
            indices,
            codes,
            straight_through,
        })
    }

    /// Number of distinct codes per level that appear in `results`.
    pub fn utilization(&self, results: &[&QuantizationResult]) -> Vec<usize> {
        let mut used: Vec<Vec<bool>> = (0..self.num_levels()).map(|l| vec![false; self.size(l)]).collect();
        for r in results {
            for &i in r.indices.iter() {
                used[r.level][i as usize] = true;
            }
        }
        used.iter().map(|u| u.iter().filter(|&&x| x).count()).collect()
    }
}

/// VQ objective and its three named parts; `total` is their sum.
#[derive(Debug, Clone)]
pub struct VqLoss {
    pub total: Tensor,
    pub reconstruction: Tensor,
    pub codebook: Tensor,
    pub commitment: Tensor,
}

/// Codebook and (unweighted) commitment terms, optionally restricted by a broadcastable 0/1 mask.
///
/// The codebook term only reaches the codes; the commitment term only reaches the encoder.
pub fn latent_terms(encoder_out: &Tensor, quantized: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let codebook_diff = (encoder_out.detach() - quantized)?.sqr()?;
    let commit_diff = (encoder_out - quantized.detach())?.sqr()?;
    let (codebook_diff, commit_diff) = match mask {
        Some(m) => (codebook_diff.broadcast_mul(m)?, commit_diff.broadcast_mul(m)?),
        None => (codebook_diff, commit_diff),
    };
    Ok((batch_sum_mean(&codebook_diff)?, batch_sum_mean(&commit_diff)?))
}

/// `‖x̂ − x‖² + ‖sg[E(x)] − q‖² + β‖sg[q] − E(x)‖²`, each summed per sample and averaged over the batch.
pub fn vq_loss(x: &Tensor, x_hat: &Tensor, encoder_out: &Tensor, quantized: &Tensor, beta: f64) -> Result<VqLoss> {
    if x.dims() != x_hat.dims() || encoder_out.dims() != quantized.dims() {
        return Err(PvqaeError::Shape("vq_loss operands disagree in shape".into()));
    }
    let reconstruction = batch_sum_mean(&(x_hat - x)?.sqr()?)?;
    let (codebook, commit) = latent_terms(encoder_out, quantized, None)?;
    let commitment = commit.affine(beta, 0.0)?;
    let total = (&reconstruction + &codebook)?.add(&commitment)?;
    Ok(VqLoss {
        total,
        reconstruction,
        codebook,
        commitment,
    })
}

/// Mean squared residual between embeddings and their selected codes.
pub fn mean_residual(z: &Tensor, result: &QuantizationResult) -> Result<f64> {
    let r = (z - &result.codes)?.sqr()?.sum(D::Minus1)?.mean_all()?;
    Ok(r.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn book(rows: &[[f32; 2]]) -> Codebook {
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        let t = Tensor::from_vec(flat, (rows.len(), 2), &Device::Cpu).unwrap();
        Codebook::from_tensors(vec![t]).unwrap()
    }

    #[test]
    fn reset_codes_moves_lookup() {
        let cb = book(&[[0.0, 0.0], [1.0, 1.0], [2.0, -1.0]]);
        assert_eq!(cb.lookup(&[5.0, 5.0], 0).unwrap().0, 1);
        cb.reset_codes(0, &[2], &[5.0, 4.5]).unwrap();
        assert_eq!(cb.lookup(&[5.0, 5.0], 0).unwrap(), (2, vec![5.0, 4.5]));
        assert!(matches!(cb.reset_codes(0, &[3], &[0.0, 0.0]), Err(PvqaeError::Contract(_))));
        assert!(matches!(cb.reset_codes(0, &[0], &[0.0]), Err(PvqaeError::Shape(_))));
    }

    #[test]
    fn lookup_exact_code() {
        let cb = book(&[[0.0, 0.0], [1.0, 1.0], [2.0, -1.0], [0.5, 3.0]]);
        let (i, q) = cb.lookup(&[0.5, 3.0], 0).unwrap();
        assert_eq!(i, 3);
        assert_eq!(q, vec![0.5, 3.0]);
    }

    #[test]
    fn lookup_distance_example() {
        // 0.02 < 1.62
        let cb = book(&[[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(cb.lookup(&[0.1, 0.1], 0).unwrap().0, 0);
    }

    #[test]
    fn lookup_tie_goes_to_lowest_index() {
        let cb = book(&[[5.0, 5.0], [1.0, 0.0], [-1.0, 0.0]]);
        assert_eq!(cb.lookup(&[0.0, 0.0], 0).unwrap().0, 1);
    }

    #[test]
    fn lookup_rejects_non_finite() {
        let cb = book(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(matches!(cb.lookup(&[f32::NAN, 0.0], 0), Err(PvqaeError::Numeric(_))));
        assert!(matches!(cb.lookup(&[0.0, 0.0], 3), Err(PvqaeError::Contract(_))));
    }

    #[test]
    fn quantize_grid_matches_exhaustive_oracle() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let codes: Vec<f32> = (0..8 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cb = Codebook::from_tensors(vec![Tensor::from_vec(codes.clone(), (8, 3), &dev).unwrap()]).unwrap();
        let z: Vec<f32> = (0..16 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zt = Tensor::from_vec(z.clone(), (1, 4, 4, 3), &dev).unwrap();
        let r = cb.quantize_grid(&zt, 0).unwrap();
        for (cell, emb) in z.chunks_exact(3).enumerate() {
            let oracle = (0..8)
                .map(|m| {
                    let d: f64 = (0..3).map(|k| (emb[k] as f64 - codes[m * 3 + k] as f64).powi(2)).sum();
                    (d, m)
                })
                .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
                .1;
            assert_eq!(r.indices.as_slice().unwrap()[cell] as usize, oracle);
        }
    }

    #[test]
    fn quantize_planted_map_has_zero_residual() {
        let dev = Device::Cpu;
        let codes: Vec<f32> = (0..5 * 2).map(|i| i as f32 * 0.7 - 2.0).collect();
        let cb = Codebook::from_tensors(vec![Tensor::from_vec(codes.clone(), (5, 2), &dev).unwrap()]).unwrap();
        let planted = [3u32, 0, 4, 1, 2, 2, 0, 3, 1];
        let z: Vec<f32> = planted.iter().flat_map(|&i| codes[i as usize * 2..i as usize * 2 + 2].to_vec()).collect();
        let zt = Tensor::from_vec(z, (1, 3, 3, 2), &dev).unwrap();
        let r = cb.quantize_grid(&zt, 0).unwrap();
        assert_eq!(r.indices.as_slice().unwrap(), &planted);
        assert_eq!(mean_residual(&zt, &r).unwrap(), 0.0);
        // 1x1 base case
        let one = Tensor::from_vec(vec![1.4f32, 1.4], (1, 1, 1, 2), &dev).unwrap();
        let r1 = cb.quantize_grid(&one, 0).unwrap();
        assert_eq!(r1.indices[[0, 0, 0]] as usize, cb.lookup(&[1.4, 1.4], 0).unwrap().0);
    }

    #[test]
    fn quantize_grid_rejects_bad_shape() {
        let cb = book(&[[0.0, 0.0], [1.0, 1.0]]);
        let z = Tensor::zeros((1, 2, 2, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(cb.quantize_grid(&z, 0), Err(PvqaeError::Shape(_))));
    }

    #[test]
    fn vq_loss_scalar_example() {
        let dev = Device::Cpu;
        let s = |v: f64| Tensor::new(&[[v]], &dev).unwrap();
        let l = vq_loss(&s(0.0), &s(1.0), &s(2.0), &s(3.0), 0.25).unwrap();
        assert_eq!(l.total.to_scalar::<f64>().unwrap(), 2.25);
        assert_eq!(l.reconstruction.to_scalar::<f64>().unwrap(), 1.0);
        assert_eq!(l.codebook.to_scalar::<f64>().unwrap(), 1.0);
        assert_eq!(l.commitment.to_scalar::<f64>().unwrap(), 0.25);
    }

    #[test]
    fn vq_loss_zero_and_quadratic() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[0.2f64, 0.4], [0.1, 0.9]], &dev).unwrap();
        let z = Tensor::new(&[[1.0f64, -1.0], [0.5, 0.0]], &dev).unwrap();
        let zero = vq_loss(&x, &x, &z, &z, 0.25).unwrap();
        assert_eq!(zero.total.to_scalar::<f64>().unwrap(), 0.0);

        let dx = Tensor::new(&[[0.1f64, -0.3], [0.2, 0.05]], &dev).unwrap();
        let dq = Tensor::new(&[[-0.4f64, 0.1], [0.3, 0.2]], &dev).unwrap();
        let a = vq_loss(&x, &(&x + &dx).unwrap(), &z, &(&z + &dq).unwrap(), 0.25).unwrap();
        let b = vq_loss(
            &x,
            &(&x + dx.affine(2.0, 0.0).unwrap()).unwrap(),
            &z,
            &(&z + dq.affine(2.0, 0.0).unwrap()).unwrap(),
            0.25,
        )
        .unwrap();
        for (pa, pb) in [
            (&a.reconstruction, &b.reconstruction),
            (&a.codebook, &b.codebook),
            (&a.commitment, &b.commitment),
        ] {
            let (pa, pb) = (pa.to_scalar::<f64>().unwrap(), pb.to_scalar::<f64>().unwrap());
            assert!(pa >= 0.0);
            assert!((pb - 4.0 * pa).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_gradients_route_terms_to_their_owners() {
        let dev = Device::Cpu;
        let z = Var::new(&[[0.3f64, -0.2]], &dev).unwrap();
        let q = Var::new(&[[1.0f64, 0.5]], &dev).unwrap();
        let (codebook, commit) = latent_terms(z.as_tensor(), q.as_tensor(), None).unwrap();
        let g = codebook.backward().unwrap();
        assert!(g.get(z.as_tensor()).is_none());
        assert!(g.get(q.as_tensor()).is_some());
        let g = commit.backward().unwrap();
        assert!(g.get(q.as_tensor()).is_none());
        assert!(g.get(z.as_tensor()).is_some());
    }
}
