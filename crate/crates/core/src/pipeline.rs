//! Two-stage training, scoring and inference over datasets.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{info, warn};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{adversarial_losses, assemble, reconstruction_loss};
use crate::budget::{budget_cost, budget_loss, context_entropy, lambda_schedule, one_hot_levels, BudgetLossConfig, ContextRichness};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{augment, read_image, save_gray_png, DatasetManifest, ImageSample, Label};
use crate::error::{PvqaeError, Result};
use crate::model::{images_to_tensor, tensor_to_images, Pvqae};
use crate::prior::{flatten, train_prior, BudgetSequence, PriorShape, PriorTrainConfig, PriorTrainReport, PriorTransformer};
use crate::routing::{one_hot, straight_through_weights, temperature_schedule, BudgetMap, RouteMode};
use crate::scoring::{auroc, defect_score, heatmap_bytes, s_prior, s_recon, HeatmapInfo, MetricsReport, MetricsRow, ScoreMap};

/// Images per forward pass during scoring.
const SCORE_BATCH: usize = 16;

/// Averages of one epoch of stage-1 training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Step count at the end of the epoch.
    pub step: usize,
    /// Budget weight at the first step of the epoch.
    pub lambda: f64,
    pub tau: f64,
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub budget: f64,
    pub adv_generator: f64,
    pub adv_discriminator: f64,
    /// Mean budget of the hard selections.
    pub budget_cost: f64,
    /// Fraction of coarse cells routed to each level.
    pub level_fractions: Vec<f64>,
    /// Distinct codes selected per level.
    pub code_utilization: Vec<usize>,
    /// Stale codes reseeded during the epoch.
    pub code_restarts: usize,
}

impl EpochLog {
    pub fn csv_header(levels: usize) -> String {
        let mut h = String::from(
            "epoch,step,lambda,tau,total,reconstruction,codebook,commitment,budget,adv_generator,adv_discriminator,budget_cost,code_restarts",
        );
        for l in 0..levels {
            let _ = write!(h, ",level{l}_fraction");
        }
        for l in 0..levels {
            let _ = write!(h, ",level{l}_codes");
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.lambda,
            self.tau,
            self.total,
            self.reconstruction,
            self.codebook,
            self.commitment,
            self.budget,
            self.adv_generator,
            self.adv_discriminator,
            self.budget_cost,
            self.code_restarts
        );
        for f in &self.level_fractions {
            let _ = write!(r, ",{f}");
        }
        for c in &self.code_utilization {
            let _ = write!(r, ",{c}");
        }
        r
    }
}

pub fn logs_to_csv(logs: &[EpochLog], levels: usize) -> String {
    let mut s = EpochLog::csv_header(levels);
    s.push('\n');
    for l in logs {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Default)]
struct EpochAccumulator {
    n: usize,
    total: f64,
    reconstruction: f64,
    codebook: f64,
    commitment: f64,
    budget: f64,
    adv_generator: f64,
    adv_discriminator: f64,
    budget_cost: f64,
    cells: usize,
    level_counts: Vec<usize>,
    used: Vec<BTreeSet<u32>>,
    images: usize,
    restarts: usize,
}

/// Tracks when each code was last nearest to an embedding and reseeds stale codes.
pub struct DeadCodes {
    last_used: Vec<Vec<usize>>,
    patience: usize,
}

impl DeadCodes {
    pub fn new(model: &Pvqae, patience: usize) -> Self {
        let last_used = (0..model.num_levels()).map(|l| vec![0; model.codebook.size(l)]).collect();
        Self { last_used, patience }
    }

    /// Returns the number of codes reset at `step`.
    pub fn update(
        &mut self,
        step: usize,
        model: &Pvqae,
        hierarchy: &crate::backbone::FeatureHierarchy,
        per_level: &[crate::codebook::QuantizationResult],
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        if self.patience == 0 {
            return Ok(0);
        }
        let mut reset = 0;
        for q in per_level {
            let last = &mut self.last_used[q.level];
            for &i in q.indices.iter() {
                last[i as usize] = step;
            }
            let dead: Vec<usize> = (0..last.len()).filter(|&i| step - last[i] >= self.patience).collect();
            if dead.is_empty() {
                continue;
            }
            let z = hierarchy.levels[q.level].detach().to_dtype(DType::F32)?;
            let dim = z.dim(3)?;
            let rows = z.flatten_all()?.to_vec1::<f32>()?;
            let n = rows.len() / dim;
            let mut values = Vec::with_capacity(dead.len() * dim);
            for _ in &dead {
                let r = rng.gen_range(0..n);
                values.extend(rows[r * dim..(r + 1) * dim].iter().map(|v| v + rng.gen_range(-1e-3..1e-3f32)));
            }
            model.codebook.reset_codes(q.level, &dead, &values)?;
            for &i in &dead {
                last[i] = step;
            }
            reset += dead.len();
        }
        Ok(reset)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn budget_config(cfg: &RunConfig) -> BudgetLossConfig {
    BudgetLossConfig {
        cost_factor: cfg.cost_factor(),
        lambda_max: cfg.budget.lambda_max,
        epsilon_floor: cfg.budget.epsilon_floor,
        normalized_entropy: cfg.budget.normalized_entropy,
    }
}

fn adam(vars: Vec<candle_core::Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?)
}

/// Stage 1: end-to-end training of the autoencoder, codebooks, gate and discriminator.
pub fn train_stage1(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    cfg.validate()?;
    manifest.validate()?;
    if manifest.train.is_empty() {
        return Err(PvqaeError::Config("training split is empty".into()));
    }
    if let Some(s) = manifest.train.iter().find(|s| s.label != Label::Normal) {
        return Err(PvqaeError::Integrity(format!("training sample {} is not normal", s.path)));
    }
    if manifest.image_size != cfg.data.image_size {
        return Err(PvqaeError::Config(format!(
            "dataset image size {} differs from configured {}",
            manifest.image_size, cfg.data.image_size
        )));
    }
    let device = Device::Cpu;
    let model = Pvqae::new(cfg, &device)?;
    let vars = model.generator_var_groups();
    let mut gen_opt = adam(vars.body, cfg.train.lr)?;
    let mut code_opt = adam(vars.codebook, cfg.train.lr * cfg.codebook.lr_scale)?;
    let mut gate_opt = adam(vars.gate, cfg.train.lr * cfg.routing.gate_lr_scale)?;
    let mut disc_opt = adam(model.discriminator_vars(), cfg.adversarial.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dead_codes = DeadCodes::new(&model, cfg.codebook.restart_after);
    let bcfg = budget_config(cfg);
    let steps = cfg.train.steps;
    let batch = cfg.train.batch_size.min(manifest.train.len()).max(1);
    let warmup = (cfg.adversarial.warmup_frac * steps as f64).ceil() as usize;
    let levels = cfg.model.levels;
    let g = cfg.model.coarse_grid;
    let explore_steps = (cfg.routing.explore_frac * steps as f64).round() as usize;
    let steps_per_epoch = manifest.train.len().div_ceil(batch).max(1);

    let mut order: Vec<usize> = (0..manifest.train.len()).collect();
    let mut cursor = order.len();
    let mut logs = Vec::new();
    let mut acc = EpochAccumulator::default();
    let mut epoch_lambda = lambda_schedule(0, steps, cfg.budget.lambda_max, cfg.budget.schedule);
    let mut epoch_tau = cfg.routing.tau_start;

    for step in 0..steps {
        let lambda = lambda_schedule(step, steps, cfg.budget.lambda_max, cfg.budget.schedule);
        let tau = temperature_schedule(step, steps, cfg.routing.tau_start, cfg.routing.tau_end);
        if acc.n == 0 {
            epoch_lambda = lambda;
            epoch_tau = tau;
        }
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let samples: Vec<ImageSample> = picked
            .iter()
            .map(|&i| augment(&manifest.train[i], &cfg.data.augmentation, &mut rng))
            .collect();
        let richness = samples
            .iter()
            .map(|s| context_entropy(&s.pixels, g))
            .collect::<Result<Vec<_>>>()?;
        let x = images_to_tensor(&samples.iter().map(|s| &s.pixels).collect::<Vec<_>>(), &device)?;

        let h = model.encode(&x)?;
        let noise_rng = if cfg.routing.gumbel_noise { Some(&mut rng) } else { None };
        let routed = model.route(&h.detach(), tau, noise_rng, RouteMode::TrainSoft)?;
        let exploring = step < explore_steps;
        let (hard, weights) = if exploring {
            let g = routed.soft.dim(1)?;
            let hard = Array3::from_shape_simple_fn((batch, g, g), || rng.gen_range(0..levels));
            let w = one_hot(&hard, levels, &routed.soft)?;
            (hard, w)
        } else {
            let hard = routed.hard_levels();
            let w = straight_through_weights(&routed.soft, &hard)?;
            (hard, w)
        };
        let assembled = assemble(&h, &model.codebook, &hard, &weights)?;
        let x_hat = model.decoder.decode(&assembled.grid)?;

        let recon = reconstruction_loss(&x, &x_hat)?;
        let commitment = assembled.commitment_loss.affine(cfg.codebook.beta, 0.0)?;
        let budget = budget_loss(&routed.soft, &richness, &bcfg)?;
        let mut total = ((&recon + &assembled.codebook_loss)? + &commitment)?;
        if !exploring {
            total = (total + budget.affine(lambda, 0.0)?)?;
        }
        let adversarial = cfg.adversarial.enabled && step >= warmup;
        let mut adv_g = 0.0;
        if adversarial {
            let fake = model.discriminator.forward(&x_hat)?;
            let (_, loss_g) = adversarial_losses(&fake.detach(), &fake)?;
            adv_g = scalar(&loss_g)?;
            total = (total + loss_g.affine(cfg.adversarial.weight, 0.0)?)?;
        }
        let total_v = scalar(&total)?;
        let parts = [scalar(&recon)?, scalar(&assembled.codebook_loss)?, scalar(&commitment)?, scalar(&budget)?];
        if !total_v.is_finite() || parts.iter().any(|v| !v.is_finite()) {
            return Err(PvqaeError::Divergence {
                step,
                detail: format!(
                    "total {total_v}, reconstruction {}, codebook {}, commitment {}, budget {}, lambda {lambda}, tau {tau}",
                    parts[0], parts[1], parts[2], parts[3]
                ),
            });
        }
        let grads = total.backward()?;
        gen_opt.step(&grads)?;
        code_opt.step(&grads)?;
        gate_opt.step(&grads)?;
        acc.restarts += dead_codes.update(step, &model, &h, &assembled.per_level, &mut rng)?;

        let mut adv_d = 0.0;
        if adversarial {
            let real = model.discriminator.forward(&x)?;
            let fake = model.discriminator.forward(&x_hat.detach())?;
            let (loss_d, _) = adversarial_losses(&real, &fake)?;
            adv_d = scalar(&loss_d)?;
            if !adv_d.is_finite() {
                return Err(PvqaeError::Divergence {
                    step,
                    detail: format!("discriminator loss {adv_d}"),
                });
            }
            disc_opt.backward_step(&loss_d)?;
        }

        if acc.level_counts.is_empty() {
            acc.level_counts = vec![0; levels];
            acc.used = vec![BTreeSet::new(); levels];
        }
        acc.n += 1;
        acc.total += total_v;
        acc.reconstruction += parts[0];
        acc.codebook += parts[1];
        acc.commitment += parts[2];
        acc.budget += parts[3];
        acc.adv_generator += adv_g;
        acc.adv_discriminator += adv_d;
        for (b, r) in richness.iter().enumerate() {
            let lv = hard.index_axis(ndarray::Axis(0), b).to_owned();
            acc.budget_cost += budget_cost(&one_hot_levels(&lv, levels), r, &bcfg)?;
            acc.images += 1;
            for &l in lv.iter() {
                acc.level_counts[l] += 1;
                acc.cells += 1;
            }
            for a in assembled.assignments(b) {
                acc.used[a.level].insert(a.index);
            }
        }

        if (step + 1) % steps_per_epoch == 0 || step + 1 == steps {
            let n = acc.n as f64;
            let log = EpochLog {
                epoch: logs.len(),
                step: step + 1,
                lambda: epoch_lambda,
                tau: epoch_tau,
                total: acc.total / n,
                reconstruction: acc.reconstruction / n,
                codebook: acc.codebook / n,
                commitment: acc.commitment / n,
                budget: acc.budget / n,
                adv_generator: acc.adv_generator / n,
                adv_discriminator: acc.adv_discriminator / n,
                budget_cost: acc.budget_cost / acc.images.max(1) as f64,
                level_fractions: acc.level_counts.iter().map(|&c| c as f64 / acc.cells.max(1) as f64).collect(),
                code_utilization: acc.used.iter().map(|u| u.len()).collect(),
                code_restarts: acc.restarts,
            };
            info!(
                "epoch {} step {} recon {:.3} budget {:.2} levels {:?} codes {:?} restarts {}",
                log.epoch, log.step, log.reconstruction, log.budget_cost, log.level_fractions, log.code_utilization, log.code_restarts
            );
            on_epoch(&log);
            logs.push(log);
            acc = EpochAccumulator::default();
        }
    }
    let ckpt = Checkpoint::new(model, cfg.clone(), manifest.categories.clone())?;
    Ok((ckpt, logs))
}

/// Routing of a batch of images in evaluation mode.
pub struct EvalRouting {
    pub maps: Vec<BudgetMap>,
    hierarchy: crate::backbone::FeatureHierarchy,
}

/// Noiseless routing at the final temperature.
pub fn route_eval(model: &Pvqae, cfg: &RunConfig, images: &[&Array3<f32>]) -> Result<EvalRouting> {
    let x = images_to_tensor(images, model.device())?;
    let hierarchy = model.encode(&x)?;
    let routed = model.route::<ChaCha8Rng>(&hierarchy, cfg.routing.tau_end, None, RouteMode::EvalHard)?;
    Ok(EvalRouting {
        maps: routed.maps,
        hierarchy,
    })
}

/// CLS slot for a category under the checkpoint's prior.
pub fn class_slot(ckpt: &Checkpoint, category: &str) -> Result<usize> {
    let per_class = ckpt.prior.as_ref().is_some_and(|p| p.class_slots() > 1) || ckpt.config().prior.per_class;
    if ckpt.prior.as_ref().is_some_and(|p| p.class_slots() == 1) || !per_class {
        return Ok(0);
    }
    ckpt.meta
        .categories
        .iter()
        .position(|c| c == category)
        .ok_or_else(|| PvqaeError::Config(format!("category {category:?} is not registered in the checkpoint")))
}

/// Eval-mode budget sequences of `samples`.
pub fn collect_sequences(ckpt: &Checkpoint, samples: &[ImageSample]) -> Result<Vec<BudgetSequence>> {
    let cfg = ckpt.config();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SCORE_BATCH) {
        let routing = route_eval(&ckpt.model, cfg, &chunk.iter().map(|s| &s.pixels).collect::<Vec<_>>())?;
        for (s, m) in chunk.iter().zip(&routing.maps) {
            out.push(flatten(&m.hard, class_slot(ckpt, &s.category)?, cfg.prior.traversal)?);
        }
    }
    Ok(out)
}

/// Result of the prior stage.
pub struct PriorStageOutcome {
    pub checkpoint: Checkpoint,
    pub report: PriorTrainReport,
    pub sequences: usize,
    pub hash_before: String,
    pub hash_after: String,
}

/// Stage 2: freezes stage 1, collects training budgets and fits the prior transformer.
pub fn train_prior_stage(cfg: &RunConfig, ckpt: Checkpoint, manifest: &DatasetManifest) -> Result<PriorStageOutcome> {
    if manifest.train.is_empty() {
        return Err(PvqaeError::Config("training split is empty".into()));
    }
    let hash_before = ckpt.model.parameter_hash()?;
    if hash_before != ckpt.meta.stage1_hash {
        return Err(PvqaeError::Integrity("stage-1 parameters differ from the recorded hash".into()));
    }
    let mut ckpt = ckpt;
    // the prior settings of this run decide the CLS registry
    ckpt.meta.config.prior = cfg.prior.clone();
    ckpt.prior = None;
    let class_slots = if cfg.prior.per_class { ckpt.meta.categories.len().max(1) } else { 1 };
    let shape = PriorShape {
        levels: cfg.model.levels,
        class_slots,
        coarse_grid: cfg.model.coarse_grid,
        dim: cfg.prior.dim,
        heads: cfg.prior.heads,
        traversal: cfg.prior.traversal,
    };
    let sequences = collect_sequences(&ckpt, &manifest.train)?;
    let prior = PriorTransformer::new(cfg.seed, shape, ckpt.model.device())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let report = train_prior(
        &prior,
        &sequences,
        &PriorTrainConfig {
            steps: cfg.prior.steps,
            batch_size: cfg.prior.batch_size,
            lr: cfg.prior.lr,
        },
        &mut rng,
    )?;
    let hash_after = ckpt.model.parameter_hash()?;
    if hash_after != hash_before {
        return Err(PvqaeError::Integrity("stage-1 parameters changed during prior training".into()));
    }
    let n = sequences.len();
    Ok(PriorStageOutcome {
        checkpoint: ckpt.with_prior(prior),
        report,
        sequences: n,
        hash_before,
        hash_after,
    })
}

/// Everything computed while scoring one image.
#[derive(Debug, Clone)]
pub struct ImageResult {
    pub path: String,
    pub category: String,
    pub label: Label,
    pub mask: Array2<u8>,
    pub score: ScoreMap,
    /// Noiseless routing of the image.
    pub routed: BudgetMap,
    /// Levels used to allocate codes for the reconstruction (prior prediction or routed).
    pub allocated: Array2<usize>,
    pub reconstruction: Array3<f32>,
    /// Codes used per level for this image.
    pub codes: Vec<(usize, u32)>,
}

/// Scores images; `use_prior = false` scores by reconstruction alone with routed allocation.
pub fn score_samples(ckpt: &Checkpoint, samples: &[ImageSample], use_prior: bool) -> Result<Vec<ImageResult>> {
    let cfg = ckpt.config();
    let prior = if use_prior {
        Some(
            ckpt.prior
                .as_ref()
                .ok_or_else(|| PvqaeError::Config("checkpoint has no trained prior; run train-prior first".into()))?,
        )
    } else {
        None
    };
    let sigma = cfg.smoothing_sigma();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SCORE_BATCH) {
        let images: Vec<&Array3<f32>> = chunk.iter().map(|s| &s.pixels).collect();
        let routing = route_eval(&ckpt.model, cfg, &images)?;
        let mut allocated = Vec::with_capacity(chunk.len());
        let mut prior_dists = Vec::with_capacity(chunk.len());
        for (s, m) in chunk.iter().zip(&routing.maps) {
            match prior {
                Some(p) => {
                    let seq = flatten(&m.hard, class_slot(ckpt, &s.category)?, p.traversal())?;
                    let pred = p.predict_prior(&seq)?;
                    allocated.push(pred.levels);
                    prior_dists.push(Some(pred.dists));
                }
                None => {
                    allocated.push(m.hard.clone());
                    prior_dists.push(None);
                }
            }
        }
        let levels = crate::routing::stack_levels(allocated.iter());
        let (x_hat, assembled) = ckpt.model.reconstruct(&routing.hierarchy, &levels)?;
        let recon = tensor_to_images(&x_hat)?;
        for (b, s) in chunk.iter().enumerate() {
            let m = &routing.maps[b];
            let sr = s_recon(&s.pixels, &recon[b])?;
            let cells = match &prior_dists[b] {
                Some(d) => Some(s_prior(&m.soft, d)?),
                None => None,
            };
            let score = defect_score(cells.as_ref(), &sr, sigma)?;
            out.push(ImageResult {
                path: s.path.clone(),
                category: s.category.clone(),
                label: s.label,
                mask: s.mask_or_zeros(),
                score,
                routed: m.clone(),
                allocated: allocated[b].clone(),
                reconstruction: recon[b].clone(),
                codes: assembled.assignments(b).into_iter().map(|a| (a.level, a.index)).collect(),
            });
        }
    }
    Ok(out)
}

fn metrics_row(category: &str, results: &[&ImageResult]) -> Result<MetricsRow> {
    let scores: Vec<f64> = results.iter().map(|r| r.score.image_score).collect();
    let labels: Vec<bool> = results.iter().map(|r| r.label == Label::Defect).collect();
    let image_auroc = auroc(&scores, &labels)
        .map_err(|e| PvqaeError::UndefinedMetric(format!("category {category}: {e}")))?;
    let mut px_scores = Vec::new();
    let mut px_labels = Vec::new();
    for r in results {
        px_scores.extend(r.score.s.iter().copied());
        px_labels.extend(r.mask.iter().map(|&m| m > 0));
    }
    let pixel_auroc = auroc(&px_scores, &px_labels)
        .map_err(|e| PvqaeError::UndefinedMetric(format!("category {category} (pixels): {e}")))?;
    Ok(MetricsRow {
        category: category.to_string(),
        image_auroc,
        pixel_auroc,
        n_images: results.len(),
        n_pixels: px_scores.len(),
    })
}

/// Scores the test split and reports per-category and pooled AUROC.
pub fn evaluate(ckpt: &Checkpoint, manifest: &DatasetManifest, use_prior: bool) -> Result<(MetricsReport, Vec<ImageResult>)> {
    if manifest.test.is_empty() {
        return Err(PvqaeError::Config("test split is empty".into()));
    }
    let results = score_samples(ckpt, &manifest.test, use_prior)?;
    let mut rows = Vec::with_capacity(manifest.categories.len() + 1);
    for cat in &manifest.categories {
        let subset: Vec<&ImageResult> = results.iter().filter(|r| &r.category == cat).collect();
        if subset.is_empty() {
            continue;
        }
        rows.push(metrics_row(cat, &subset)?);
    }
    rows.push(metrics_row("overall", &results.iter().collect::<Vec<_>>())?);
    let cfg = ckpt.config();
    let bcfg = budget_config(cfg);
    let mut cost = 0.0;
    for (r, s) in results.iter().zip(&manifest.test) {
        let rich = context_entropy(&s.pixels, cfg.model.coarse_grid)?;
        cost += budget_cost(&one_hot_levels(&r.routed.hard, cfg.model.levels), &rich, &bcfg)?;
    }
    let mut used = vec![BTreeSet::new(); cfg.model.levels];
    for r in &results {
        for &(l, i) in &r.codes {
            used[l].insert(i);
        }
    }
    let report = MetricsReport {
        rows,
        mean_budget_cost: cost / results.len() as f64,
        code_utilization: used.iter().map(|u| u.len()).collect(),
    };
    Ok((report, results))
}

/// Mean hard level over cells where `mask` is true, per image, averaged over images that have such cells.
pub fn mean_level(maps: &[&Array2<usize>], masks: &[&Array2<bool>], want: bool) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (m, k) in maps.iter().zip(masks) {
        let sel: Vec<f64> = m
            .iter()
            .zip(k.iter())
            .filter(|(_, &d)| d == want)
            .map(|(&l, _)| l as f64)
            .collect();
        if !sel.is_empty() {
            total += sel.iter().sum::<f64>() / sel.len() as f64;
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        total / n as f64
    }
}

/// Files written by [`infer`].
#[derive(Debug, Clone)]
pub struct InferOutput {
    pub heatmap: PathBuf,
    pub sidecar: PathBuf,
    pub mask: Option<PathBuf>,
    pub info: HeatmapInfo,
}

/// Scores one image file and writes its heatmap, sidecar JSON and optional thresholded mask.
pub fn infer(
    ckpt: &Checkpoint,
    image: &Path,
    out_dir: &Path,
    threshold: Option<f64>,
    category: Option<&str>,
) -> Result<InferOutput> {
    let size = ckpt.config().data.image_size;
    let (pixels, (w, h)) = read_image(image, size)?;
    if w as usize != size || h as usize != size {
        warn!("{} is {w}x{h}; resized to {size}x{size}", image.display());
    }
    let category = match category {
        Some(c) => c.to_string(),
        None => ckpt.meta.categories.first().cloned().unwrap_or_default(),
    };
    let sample = ImageSample {
        pixels,
        label: Label::Normal,
        mask: None,
        category,
        path: image.display().to_string(),
    };
    let use_prior = ckpt.prior.is_some() && ckpt.config().prior.enabled;
    let result = score_samples(ckpt, std::slice::from_ref(&sample), use_prior)?
        .pop()
        .expect("one result per sample");
    std::fs::create_dir_all(out_dir).map_err(|e| PvqaeError::io(out_dir, e))?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let (bytes, raw_min, raw_max) = heatmap_bytes(&result.score.s);
    let heatmap = out_dir.join(format!("{stem}_heatmap.png"));
    save_gray_png(&bytes, &heatmap)?;
    let info = HeatmapInfo {
        image_score: result.score.image_score,
        raw_min,
        raw_max,
        budget_levels: result.routed.hard.rows().into_iter().map(|r| r.to_vec()).collect(),
    };
    let sidecar = out_dir.join(format!("{stem}.json"));
    std::fs::write(&sidecar, serde_json::to_string_pretty(&info)?).map_err(|e| PvqaeError::io(&sidecar, e))?;
    let mask = match threshold {
        Some(t) => {
            let m = crate::scoring::threshold(&result.score.s, t).mapv(|v| v * 255);
            let p = out_dir.join(format!("{stem}_mask.png"));
            save_gray_png(&m, &p)?;
            Some(p)
        }
        None => None,
    };
    Ok(InferOutput {
        heatmap,
        sidecar,
        mask,
        info,
    })
}

/// Richness maps of a set of images.
pub fn richness_of(samples: &[ImageSample], coarse_grid: usize) -> Result<Vec<ContextRichness>> {
    samples.iter().map(|s| context_entropy(&s.pixels, coarse_grid)).collect()
}
