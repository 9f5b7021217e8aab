//! Convolutional encoder/decoder, patch discriminator, and assembly of routed codes.

use candle_core::{Tensor, D};
use ndarray::{Array2, Array3};

use crate::codebook::{latent_terms, Codebook, QuantizationResult};
use crate::error::{PvqaeError, Result};
use crate::ops::{batch_sum_mean, pixel_shuffle, upsample_nearest, Conv2d, Params};

/// Encoder output, coarsest level first. Level `l` is `(B, g·2^l, g·2^l, d)`.
#[derive(Debug, Clone)]
pub struct FeatureHierarchy {
    pub levels: Vec<Tensor>,
}

impl FeatureHierarchy {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn grids(&self) -> Vec<usize> {
        self.levels.iter().map(|z| z.dim(1).unwrap_or(0)).collect()
    }

    pub fn coarse_grid(&self) -> usize {
        self.grids()[0]
    }

    pub fn detach(&self) -> Self {
        Self {
            levels: self.levels.iter().map(|z| z.detach()).collect(),
        }
    }
}

fn leaky_relu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.maximum(&x.affine(0.2, 0.0)?)
}

#[derive(Debug, Clone)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new(p: &Params, c: usize) -> Result<Self> {
        Ok(Self {
            a: Conv2d::same3(&p.pp("a"), c, c)?,
            b: Conv2d::same3(&p.pp("b"), c, c)?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.a.forward(&x.relu()?)?;
        x + self.b.forward(&h.relu()?)?
    }
}

fn log2_exact(v: usize, what: &str) -> Result<usize> {
    if v == 0 || !v.is_power_of_two() {
        return Err(PvqaeError::Config(format!("{what} ({v}) must be a power of two")));
    }
    Ok(v.trailing_zeros() as usize)
}

/// Strided convolutional encoder; the last `levels` blocks form the hierarchy.
#[derive(Debug, Clone)]
pub struct Encoder {
    down: Vec<Conv2d>,
    res: ResBlock,
    finest_proj: Conv2d,
    coarser: Vec<(Conv2d, Conv2d)>,
    image_size: usize,
    coarse_grid: usize,
}

impl Encoder {
    pub fn new(
        p: &Params,
        image_size: usize,
        coarse_grid: usize,
        levels: usize,
        channels: [usize; 2],
        dim: usize,
    ) -> Result<Self> {
        if levels == 0 {
            return Err(PvqaeError::Config("at least one level is required".into()));
        }
        let finest = coarse_grid << (levels - 1);
        if image_size % finest != 0 {
            return Err(PvqaeError::Config(format!(
                "image size {image_size} is not divisible by the finest grid {finest}"
            )));
        }
        let n_down = log2_exact(image_size / finest, "image size / finest grid")?;
        if n_down == 0 {
            return Err(PvqaeError::Config("the finest grid must be smaller than the image".into()));
        }
        let [c0, c1] = channels;
        let mut down = Vec::with_capacity(n_down);
        for s in 0..n_down {
            let (cin, cout) = match s {
                0 => (3, if n_down == 1 { c1 } else { c0 }),
                _ if s + 1 == n_down => (c0, c1),
                _ => (c0, c0),
            };
            down.push(Conv2d::new(&p.pp(&format!("down{s}")), cin, cout, 4, 2, 1)?);
        }
        let res = ResBlock::new(&p.pp("res"), c1)?;
        let finest_proj = Conv2d::new(&p.pp(&format!("proj{}", levels - 1)), c1, dim, 1, 1, 0)?;
        let coarser = (0..levels - 1)
            .rev()
            .map(|l| {
                Ok((
                    Conv2d::new(&p.pp(&format!("block{l}")), c1, c1, 4, 2, 1)?,
                    Conv2d::new(&p.pp(&format!("proj{l}")), c1, dim, 1, 1, 0)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            down,
            res,
            finest_proj,
            coarser,
            image_size,
            coarse_grid,
        })
    }

    /// `(B, H, W, 3)` image batch to its feature hierarchy.
    pub fn encode(&self, x: &Tensor) -> Result<FeatureHierarchy> {
        let (_, h, w, c) = x.dims4()?;
        if h != self.image_size || w != self.image_size || c != 3 {
            return Err(PvqaeError::Config(format!(
                "encoder expects {0}x{0}x3 input, got {h}x{w}x{c}",
                self.image_size
            )));
        }
        // centre pixels around zero
        let mut t = x.affine(2.0, -1.0)?;
        for (s, conv) in self.down.iter().enumerate() {
            t = conv.forward(&t)?;
            if s + 1 < self.down.len() {
                t = t.relu()?;
            }
        }
        let trunk = self.res.forward(&t)?.relu()?;
        let mut levels = vec![self.finest_proj.forward(&trunk)?];
        let mut cur = trunk;
        for (block, proj) in &self.coarser {
            cur = block.forward(&cur)?.relu()?;
            levels.push(proj.forward(&cur)?);
        }
        levels.reverse();
        debug_assert_eq!(levels[0].dim(1)?, self.coarse_grid);
        Ok(FeatureHierarchy { levels })
    }
}

/// Decoder from the finest-grid feature map back to a `[0, 1]` image.
#[derive(Debug, Clone)]
pub struct Decoder {
    input: Conv2d,
    res: ResBlock,
    ups: Vec<Conv2d>,
    out: Conv2d,
}

impl Decoder {
    pub fn new(p: &Params, image_size: usize, finest_grid: usize, channels: [usize; 2], dim: usize) -> Result<Self> {
        if image_size % finest_grid != 0 {
            return Err(PvqaeError::Config(format!(
                "image size {image_size} is not divisible by grid {finest_grid}"
            )));
        }
        let n_up = log2_exact(image_size / finest_grid, "image size / finest grid")?;
        if n_up == 0 {
            return Err(PvqaeError::Config("the finest grid must be smaller than the image".into()));
        }
        let [c0, c1] = channels;
        let input = Conv2d::same3(&p.pp("input"), dim, c0)?;
        let res = ResBlock::new(&p.pp("res"), c0)?;
        let ups = (0..n_up - 1)
            .map(|s| Conv2d::same3(&p.pp(&format!("up{s}")), if s == 0 { c0 } else { c1 }, c1))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let last_c = if n_up == 1 { c0 } else { c1 };
        let out = Conv2d::same3(&p.pp("out"), last_c, 12)?;
        Ok(Self { input, res, ups, out })
    }

    pub fn decode(&self, features: &Tensor) -> Result<Tensor> {
        let mut t = self.res.forward(&self.input.forward(features)?)?.relu()?;
        for up in &self.ups {
            t = up.forward(&upsample_nearest(&t, 2)?)?.relu()?;
        }
        let t = pixel_shuffle(&self.out.forward(&t)?, 2)?;
        Ok(candle_nn::ops::sigmoid(&t)?)
    }
}

/// Patch-wise real/fake classifier producing a logit map.
#[derive(Debug, Clone)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        let widths = [3, channels, channels * 2, channels * 4];
        let convs = (0..3)
            .map(|s| Conv2d::new(&p.pp(&format!("conv{s}")), widths[s], widths[s + 1], 4, 2, 1))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let head = Conv2d::same3(&p.pp("head"), widths[3], 1)?;
        Ok(Self { convs, head })
    }

    /// `(B, H, W, 3)` to `(B, H/8, W/8, 1)` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // centre pixels around zero
        let mut t = x.affine(2.0, -1.0)?;
        for c in &self.convs {
            t = leaky_relu(&c.forward(&t)?)?;
        }
        Ok(self.head.forward(&t)?)
    }
}

/// Discriminator and non-saturating generator losses from logit maps.
///
/// `loss_d = −mean[log D(x) + log(1 − D(x̂))]`, `loss_g = −mean[log D(x̂)]`, with
/// `D = clamp(sigmoid(logit), ε, 1 − ε)`.
pub fn adversarial_losses(real_logits: &Tensor, fake_logits: &Tensor) -> Result<(Tensor, Tensor)> {
    const EPS: f64 = 1e-6;
    let d_real = candle_nn::ops::sigmoid(real_logits)?.clamp(EPS, 1.0 - EPS)?;
    let d_fake = candle_nn::ops::sigmoid(fake_logits)?.clamp(EPS, 1.0 - EPS)?;
    let loss_d = (d_real.log()?.mean_all()? + d_fake.affine(-1.0, 1.0)?.log()?.mean_all()?)?.neg()?;
    let loss_g = d_fake.log()?.mean_all()?.neg()?;
    Ok((loss_d, loss_g))
}

/// Quantized features on the finest grid plus the selected-level VQ terms.
#[derive(Debug, Clone)]
pub struct AssembledFeatureMap {
    /// `(B, G, G, d)` with `G` the finest grid.
    pub grid: Tensor,
    /// One result per level over the whole level grid; only cells routed to that level count.
    pub per_level: Vec<QuantizationResult>,
    /// `(B, g, g)` selected level per coarse cell.
    pub levels: Array3<usize>,
    /// Codebook term over selected embeddings.
    pub codebook_loss: Tensor,
    /// Unweighted commitment term over selected embeddings.
    pub commitment_loss: Tensor,
}

/// One code placed in the assembled map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodeAssignment {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub index: u32,
}

impl AssembledFeatureMap {
    /// Codes used by image `b`, one per selected level-grid position.
    pub fn assignments(&self, b: usize) -> Vec<CodeAssignment> {
        let (_, g, _) = self.levels.dim();
        let mut out = Vec::new();
        for i in 0..g {
            for j in 0..g {
                let level = self.levels[[b, i, j]];
                let f = 1 << level;
                let idx = &self.per_level[level].indices;
                for r in i * f..(i + 1) * f {
                    for c in j * f..(j + 1) * f {
                        out.push(CodeAssignment {
                            level,
                            row: r,
                            col: c,
                            index: idx[[b, r, c]],
                        });
                    }
                }
            }
        }
        out
    }

    pub fn codes_used(&self, b: usize) -> usize {
        self.assignments(b).len()
    }
}

/// `Σ_cells 4^level`.
pub fn code_count(levels: &Array2<usize>) -> usize {
    levels.iter().map(|&l| 1usize << (2 * l)).sum()
}

/// Quantizes each coarse cell at its selected level and broadcasts the codes to the finest grid.
///
/// `weights` is a `(B, g, g, L)` per-cell level weighting whose forward value must be the one-hot of
/// `levels` (either that one-hot itself or the straight-through routing weights).
pub fn assemble(
    hierarchy: &FeatureHierarchy,
    codebook: &Codebook,
    levels: &Array3<usize>,
    weights: &Tensor,
) -> Result<AssembledFeatureMap> {
    let n_levels = hierarchy.num_levels();
    if codebook.num_levels() != n_levels {
        return Err(PvqaeError::Shape(format!(
            "codebook has {} levels, hierarchy {n_levels}",
            codebook.num_levels()
        )));
    }
    let (b, g, g2) = levels.dim();
    let (wb, wg, _, wl) = weights.dims4()?;
    if g != g2 || g != hierarchy.coarse_grid() || (wb, wg, wl) != (b, g, n_levels) {
        return Err(PvqaeError::Shape(format!(
            "budget grid {b}x{g}x{g2} (weights {:?}) vs coarse grid {}",
            weights.dims(),
            hierarchy.coarse_grid()
        )));
    }
    if let Some(&bad) = levels.iter().find(|&&l| l >= n_levels) {
        return Err(PvqaeError::Contract(format!("level {bad} out of range for {n_levels} levels")));
    }
    let finest_factor = 1usize << (n_levels - 1);
    let z0 = &hierarchy.levels[0];
    let mut grid: Option<Tensor> = None;
    let mut per_level = Vec::with_capacity(n_levels);
    let mut codebook_loss = Tensor::zeros((), z0.dtype(), z0.device())?;
    let mut commitment_loss = codebook_loss.clone();
    for (l, z) in hierarchy.levels.iter().enumerate() {
        let q = codebook.quantize_grid(z, l)?;
        let mask_vals: Vec<f64> = levels.iter().map(|&s| f64::from(u8::from(s == l))).collect();
        let cell_mask = Tensor::from_vec(mask_vals, (b, g, g, 1), z.device())?.to_dtype(z.dtype())?;
        let level_mask = upsample_nearest(&cell_mask, 1 << l)?;
        let (cb, cm) = latent_terms(z, &q.codes, Some(&level_mask))?;
        codebook_loss = (codebook_loss + cb)?;
        commitment_loss = (commitment_loss + cm)?;
        let w = upsample_nearest(&weights.narrow(D::Minus1, l, 1)?, finest_factor)?;
        let contrib = upsample_nearest(&q.straight_through, finest_factor >> l)?.broadcast_mul(&w)?;
        grid = Some(match grid {
            Some(acc) => (acc + contrib)?,
            None => contrib,
        });
        per_level.push(q);
    }
    Ok(AssembledFeatureMap {
        grid: grid.expect("at least one level"),
        per_level,
        levels: levels.clone(),
        codebook_loss,
        commitment_loss,
    })
}

/// Per-sample channel-summed squared error, averaged over the batch.
pub fn reconstruction_loss(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    Ok(batch_sum_mean(&(x_hat - x)?.sqr()?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::one_hot;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn encoder(size: usize, g: usize) -> Encoder {
        let p = Params::new(0, DType::F32, &Device::Cpu);
        Encoder::new(&p, size, g, 3, [8, 8], 4).unwrap()
    }

    #[test]
    fn hierarchy_grids_64() {
        let x = Tensor::rand(0f32, 1f32, (2, 64, 64, 3), &Device::Cpu).unwrap();
        let h = encoder(64, 4).encode(&x).unwrap();
        assert_eq!(h.grids(), vec![4, 8, 16]);
        assert!(h.levels.iter().all(|z| z.dim(3).unwrap() == 4 && z.dim(0).unwrap() == 2));
    }

    #[test]
    fn hierarchy_grids_256() {
        let x = Tensor::zeros((1, 256, 256, 3), DType::F32, &Device::Cpu).unwrap();
        let h = encoder(256, 16).encode(&x).unwrap();
        assert_eq!(h.grids(), vec![16, 32, 64]);
    }

    #[test]
    fn indivisible_sizes_are_config_errors() {
        let p = Params::new(0, DType::F32, &Device::Cpu);
        assert!(matches!(Encoder::new(&p, 60, 4, 3, [8, 8], 4), Err(PvqaeError::Config(_))));
        let e = encoder(64, 4);
        let x = Tensor::zeros((1, 32, 32, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(e.encode(&x), Err(PvqaeError::Config(_))));
    }

    #[test]
    fn encoding_is_deterministic() {
        let x = Tensor::rand(0f32, 1f32, (1, 64, 64, 3), &Device::Cpu).unwrap();
        let e = encoder(64, 4);
        let a = e.encode(&x).unwrap();
        let b = e.encode(&x).unwrap();
        for (za, zb) in a.levels.iter().zip(&b.levels) {
            assert_eq!(
                za.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                zb.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }

    #[test]
    fn decoder_shape_and_range() {
        let p = Params::new(1, DType::F32, &Device::Cpu);
        let d = Decoder::new(&p, 64, 16, [8, 8], 4).unwrap();
        let f = Tensor::randn(0f32, 10f32, (2, 16, 16, 4), &Device::Cpu).unwrap();
        let y = d.decode(&f).unwrap();
        assert_eq!(y.dims(), &[2, 64, 64, 3]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn discriminator_is_patchwise() {
        let p = Params::new(1, DType::F32, &Device::Cpu);
        let d = Discriminator::new(&p, 4).unwrap();
        let x = Tensor::zeros((1, 64, 64, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.forward(&x).unwrap().dims(), &[1, 8, 8, 1]);
    }

    #[test]
    fn adversarial_hand_values() {
        let dev = Device::Cpu;
        let zero = Tensor::zeros((1, 4, 4, 1), DType::F64, &dev).unwrap();
        let (ld, lg) = adversarial_losses(&zero, &zero).unwrap();
        assert!((ld.to_scalar::<f64>().unwrap() - 2.0 * 2f64.ln()).abs() < 1e-6);
        assert!((lg.to_scalar::<f64>().unwrap() - 2f64.ln()).abs() < 1e-6);
        let big = zero.affine(1.0, 50.0).unwrap();
        let small = zero.affine(1.0, -50.0).unwrap();
        let (ld, _) = adversarial_losses(&big, &small).unwrap();
        assert!(ld.to_scalar::<f64>().unwrap() < 1e-5);
        let (_, lg) = adversarial_losses(&small, &big).unwrap();
        assert!(lg.to_scalar::<f64>().unwrap() < 1e-5);
    }

    fn setup(seed: u64) -> (FeatureHierarchy, Codebook) {
        let p = Params::new(seed, DType::F32, &Device::Cpu);
        let cb = Codebook::new(&p, &[8, 8, 8], 4).unwrap();
        let dev = Device::Cpu;
        let h = FeatureHierarchy {
            levels: (0..3)
                .map(|l| Tensor::randn(0f32, 0.2, (1, 4 << l, 4 << l, 4), &dev).unwrap())
                .collect(),
        };
        (h, cb)
    }

    fn assemble_levels(levels: Array2<usize>, seed: u64) -> AssembledFeatureMap {
        let (h, cb) = setup(seed);
        let lv = levels.insert_axis(ndarray::Axis(0));
        let w = one_hot(&lv, 3, &h.levels[0]).unwrap();
        assemble(&h, &cb, &lv, &w).unwrap()
    }

    #[test]
    fn uniform_maps_count_codes() {
        let a = assemble_levels(Array2::zeros((4, 4)), 0);
        assert_eq!(a.codes_used(0), 16);
        assert_eq!(a.grid.dims(), &[1, 16, 16, 4]);
        let a = assemble_levels(Array2::from_elem((4, 4), 2), 0);
        assert_eq!(a.codes_used(0), 256);
    }

    #[test]
    fn mixed_map_counts_31_distinct_assignments() {
        let mut levels = Array2::zeros((4, 4));
        levels[[1, 2]] = 2;
        let a = assemble_levels(levels.clone(), 4);
        let set: std::collections::BTreeSet<_> = a.assignments(0).into_iter().collect();
        assert_eq!(set.len(), 31);
        assert_eq!(code_count(&levels), 31);
    }

    #[test]
    fn coarse_codes_broadcast_over_finest_block() {
        let a = assemble_levels(Array2::zeros((4, 4)), 2);
        let g = a.grid.squeeze(0).unwrap();
        let cell = g.narrow(0, 4, 4).unwrap().narrow(1, 8, 4).unwrap();
        let first = cell.narrow(0, 0, 1).unwrap().narrow(1, 0, 1).unwrap();
        let diff = cell.broadcast_sub(&first).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn random_maps_match_counting_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let levels = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0..3usize));
            let a = assemble_levels(levels.clone(), 1);
            assert_eq!(a.codes_used(0), code_count(&levels));
        }
    }

    #[test]
    fn invalid_level_is_rejected() {
        let (h, cb) = setup(0);
        let lv = Array3::from_elem((1, 4, 4), 3usize);
        let w = Tensor::zeros((1, 4, 4, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(assemble(&h, &cb, &lv, &w), Err(PvqaeError::Contract(_))));
    }
}
