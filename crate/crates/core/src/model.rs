//! The stage-1 network: encoder, routing gate, per-level codebooks, decoder and discriminator.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array3, Axis};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::backbone::{assemble, AssembledFeatureMap, Decoder, Discriminator, Encoder, FeatureHierarchy};
use crate::codebook::Codebook;
use crate::config::RunConfig;
use crate::error::{PvqaeError, Result};
use crate::ops::Params;
use crate::routing::{one_hot, Gate, RouteMode, Routed};

/// Seed offset separating the discriminator's parameter stream from the generator's.
const DISC_SEED_OFFSET: u64 = 0x5eed;

/// Generator parameters by optimizer group.
#[derive(Debug, Default)]
pub struct GeneratorVars {
    pub gate: Vec<Var>,
    pub codebook: Vec<Var>,
    /// Encoder and decoder.
    pub body: Vec<Var>,
}

pub struct Pvqae {
    generator: Params,
    critic: Params,
    pub encoder: Encoder,
    pub gate: Gate,
    pub codebook: Codebook,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
    levels: usize,
    image_size: usize,
}

impl Pvqae {
    pub fn new(cfg: &RunConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let generator = Params::new(cfg.seed, DType::F32, device);
        let critic = Params::new(cfg.seed.wrapping_add(DISC_SEED_OFFSET), DType::F32, device);
        let size = cfg.data.image_size;
        let encoder = Encoder::new(&generator.pp("encoder"), size, m.coarse_grid, m.levels, m.encoder_channels, m.code_dim)?;
        let gate = Gate::new(&generator.pp("gate"), m.levels, m.code_dim, m.gate_hidden())?;
        let sizes = vec![cfg.codebook.size; m.levels];
        let codebook = Codebook::new(&generator.pp("codebook"), &sizes, m.code_dim)?;
        let decoder = Decoder::new(&generator.pp("decoder"), size, m.finest_grid(), m.decoder_channels, m.code_dim)?;
        let discriminator = Discriminator::new(&critic.pp("discriminator"), m.disc_channels)?;
        Ok(Self {
            generator,
            critic,
            encoder,
            gate,
            codebook,
            decoder,
            discriminator,
            levels: m.levels,
            image_size: size,
        })
    }

    pub fn device(&self) -> &Device {
        self.generator.device()
    }

    pub fn num_levels(&self) -> usize {
        self.levels
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn generator_vars(&self) -> Vec<Var> {
        self.generator.varmap().all_vars()
    }

    /// Generator variables split by optimizer group, each sorted by name.
    pub fn generator_var_groups(&self) -> GeneratorVars {
        let data = self.generator.varmap().data().lock().expect("varmap poisoned");
        let mut named: Vec<(&String, &Var)> = data.iter().collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        let mut groups = GeneratorVars::default();
        for (k, v) in named {
            let group = if k.starts_with("gate.") {
                &mut groups.gate
            } else if k.starts_with("codebook.") {
                &mut groups.codebook
            } else {
                &mut groups.body
            };
            group.push(v.clone());
        }
        groups
    }

    pub fn discriminator_vars(&self) -> Vec<Var> {
        self.critic.varmap().all_vars()
    }

    /// Every parameter by name, sorted.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = self.generator.named_tensors();
        out.extend(self.critic.named_tensors());
        out
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match exactly.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let expected = self.generator.len() + self.critic.len();
        if tensors.len() != expected {
            return Err(PvqaeError::Integrity(format!(
                "checkpoint holds {} tensors, model has {expected}",
                tensors.len()
            )));
        }
        for p in [&self.generator, &self.critic] {
            p.load_named(tensors).map_err(|e| PvqaeError::Integrity(e.to_string()))?;
        }
        Ok(())
    }

    /// SHA-256 over parameter names and raw values.
    pub fn parameter_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, t) in self.named_tensors() {
            h.update(k.as_bytes());
            for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn encode(&self, x: &Tensor) -> Result<FeatureHierarchy> {
        self.encoder.encode(x)
    }

    pub fn route<R: Rng>(&self, h: &FeatureHierarchy, tau: f64, rng: Option<&mut R>, mode: RouteMode) -> Result<Routed> {
        self.gate.route(h, tau, rng, mode)
    }

    /// Decodes with codes chosen at the given per-cell levels.
    pub fn reconstruct(&self, h: &FeatureHierarchy, levels: &Array3<usize>) -> Result<(Tensor, AssembledFeatureMap)> {
        let weights = one_hot(levels, self.levels, &h.levels[0])?;
        let assembled = assemble(h, &self.codebook, levels, &weights)?;
        let x_hat = self.decoder.decode(&assembled.grid)?;
        Ok((x_hat, assembled))
    }
}

/// Stacks `(H, W, 3)` images into a `(B, H, W, 3)` tensor.
pub fn images_to_tensor(images: &[&ndarray::Array3<f32>], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| PvqaeError::Shape("empty image batch".into()))?
        .dim();
    let mut data = Vec::with_capacity(images.len() * first.0 * first.1 * first.2);
    for im in images {
        if im.dim() != first {
            return Err(PvqaeError::Shape(format!("batch mixes {:?} and {:?}", first, im.dim())));
        }
        data.extend(im.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), first.0, first.1, first.2), device)?)
}

/// Splits a `(B, H, W, 3)` tensor back into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ndarray::Array3<f32>>> {
    let (b, h, w, c) = t.dims4()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let all = ndarray::Array4::from_shape_vec((b, h, w, c), v).map_err(|e| PvqaeError::Shape(e.to_string()))?;
    Ok(all.axis_iter(Axis(0)).map(|a| a.to_owned()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use rand_chacha::ChaCha8Rng;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.code_dim = 8;
        c.model.encoder_channels = [8, 8];
        c.model.decoder_channels = [8, 8];
        c.model.disc_channels = 4;
        c.codebook.size = 16;
        c
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Pvqae::new(&small(), &Device::Cpu).unwrap();
        let b = Pvqae::new(&small(), &Device::Cpu).unwrap();
        assert_eq!(a.parameter_hash().unwrap(), b.parameter_hash().unwrap());
        let mut other = small();
        other.seed = 1;
        let c = Pvqae::new(&other, &Device::Cpu).unwrap();
        assert_ne!(a.parameter_hash().unwrap(), c.parameter_hash().unwrap());
    }

    #[test]
    fn loading_tensors_reproduces_outputs() {
        let a = Pvqae::new(&small(), &Device::Cpu).unwrap();
        let mut other = small();
        other.seed = 9;
        let b = Pvqae::new(&other, &Device::Cpu).unwrap();
        let map: std::collections::HashMap<_, _> = a.named_tensors().into_iter().collect();
        b.load_tensors(&map).unwrap();
        assert_eq!(a.parameter_hash().unwrap(), b.parameter_hash().unwrap());
        let x = Tensor::rand(0f32, 1f32, (2, 64, 64, 3), &Device::Cpu).unwrap();
        let run = |m: &Pvqae| {
            let h = m.encode(&x).unwrap();
            let r = m.route::<ChaCha8Rng>(&h, 0.1, None, RouteMode::EvalHard).unwrap();
            let (y, _) = m.reconstruct(&h, &r.hard_levels()).unwrap();
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(run(&a), run(&b));
        let mut missing = map.clone();
        missing.remove("gate.out.bias");
        assert!(matches!(b.load_tensors(&missing), Err(PvqaeError::Integrity(_))));
    }

    #[test]
    fn image_tensor_round_trip() {
        let a = ndarray::Array3::from_shape_fn((4, 4, 3), |(y, x, c)| (y * 12 + x * 3 + c) as f32);
        let b = a.mapv(|v| v + 1.0);
        let t = images_to_tensor(&[&a, &b], &Device::Cpu).unwrap();
        assert_eq!(tensor_to_images(&t).unwrap(), vec![a, b]);
    }
}
