//! Two-stage training: joint pre-training with an EMA teacher, then
//! decoder-only adversarial fine-tuning over a frozen encoder. Also
//! schedules, the analytic FLOPs ledger and directory checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::data::{
    batch_indices, make_views, pad_batch, plan_batch, stack_images, AugConfig, BatchPlan, Dataset, DatasetManifest, Sample, ViewSet,
    Vocab,
};
use crate::error::{bail, Error, Result};
use crate::eval::LatentStats;
use crate::losses::{
    clip_loss, dino_loss, gan_losses, mim_loss, rec_loss, scalar, total_loss, DinoState, LossReport, LossTerms, LossWeights,
    PatchDiscriminator, PerceptualNet, RandomConvPyramid, TermCounts,
};
use crate::model::{self, prefix, tokens_to_grid, EmaTeacher, ModelConfig, TokenizerModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Pretrain,
    GanFinetune,
}

/// Which objectives participate. A disabled objective is neither computed nor
/// differentiated, whatever its weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Objectives {
    pub clip: bool,
    pub ssl: bool,
    pub rec: bool,
}

impl Default for Objectives {
    fn default() -> Self {
        Self {
            clip: true,
            ssl: true,
            rec: true,
        }
    }
}

impl Objectives {
    pub const AE: Self = Self {
        clip: false,
        ssl: false,
        rec: true,
    };
    pub const CLIP_AE: Self = Self {
        clip: true,
        ssl: false,
        rec: true,
    };
    pub const SSL_AE: Self = Self {
        clip: false,
        ssl: true,
        rec: true,
    };
    pub const ALL: Self = Self {
        clip: true,
        ssl: true,
        rec: true,
    };

    /// `ae`, `clip+ae`, `ssl+ae`, `clip+ssl+ae` (any order, `+`-separated).
    pub fn parse(s: &str) -> Result<Self> {
        let mut o = Self {
            clip: false,
            ssl: false,
            rec: false,
        };
        for part in s.split('+').map(|p| p.trim().to_ascii_lowercase()) {
            match part.as_str() {
                "clip" => o.clip = true,
                "ssl" => o.ssl = true,
                "ae" | "rec" => o.rec = true,
                _ => bail!(Config, "unknown objective {part:?} in {s:?}"),
            }
        }
        if !(o.clip || o.ssl || o.rec) {
            bail!(Config, "empty objective set");
        }
        Ok(o)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.clip {
            parts.push("clip");
        }
        if self.ssl {
            parts.push("ssl");
        }
        if self.rec {
            parts.push("ae");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub weights: LossWeights,
    pub objectives: Objectives,
    pub batch: usize,
    pub batch_ssl: usize,
    pub batch_rec: usize,
    /// Samples drawn in this stage; steps = ceil(total_samples / batch).
    pub total_samples: u64,
    pub lr: f64,
    pub warmup_frac: f64,
    pub lr_floor: f64,
    pub optimizer: AdamWConfig,
    pub ema_start: f64,
    pub ema_end: f64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    pub teacher_temp_warmup_frac: f64,
    pub student_temp: f64,
    pub center_momentum: f64,
    pub aug: AugConfig,
    pub seed: u64,
    /// Steps between evaluation snapshots; 0 disables.
    pub eval_every: u64,
    /// Weight of the generator term in the stage-2 decoder loss.
    pub gan_weight: f64,
    pub disc_channels: usize,
    pub disc_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            weights: LossWeights::default(),
            objectives: Objectives::default(),
            batch: 256,
            batch_ssl: 64,
            batch_rec: 32,
            total_samples: 256 * 2000,
            lr: 1e-3,
            warmup_frac: 0.05,
            lr_floor: 1e-5,
            optimizer: AdamWConfig::default(),
            ema_start: 0.996,
            ema_end: 1.0,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup_frac: 0.3,
            student_temp: 0.1,
            center_momentum: 0.9,
            aug: AugConfig::default(),
            seed: 0,
            eval_every: 0,
            gan_weight: 0.1,
            disc_channels: 16,
            disc_lr: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.optimizer.validate()?;
        if self.batch == 0 || self.total_samples == 0 {
            bail!(Config, "batch and total_samples must be positive");
        }
        if self.batch_ssl > self.batch || self.batch_rec > self.batch {
            bail!(Config, "sub-batches ({}, {}) exceed batch {}", self.batch_ssl, self.batch_rec, self.batch);
        }
        if self.objectives.ssl && self.batch_ssl == 0 || self.objectives.rec && self.batch_rec == 0 {
            bail!(Config, "an enabled objective has an empty sub-batch");
        }
        if !(self.objectives.clip || self.objectives.ssl || self.objectives.rec) {
            bail!(Config, "no objective enabled");
        }
        if self.stage == Stage::GanFinetune && self.batch_rec == 0 {
            bail!(Config, "stage 2 needs batch_rec > 0");
        }
        if !(self.lr > 0.0) || !(0.0..=self.lr).contains(&self.lr_floor) {
            bail!(Config, "lr must be positive and lr_floor in [0, lr]");
        }
        for (n, f) in [("warmup_frac", self.warmup_frac), ("teacher_temp_warmup_frac", self.teacher_temp_warmup_frac)] {
            if !(0.0..=1.0).contains(&f) {
                bail!(Config, "{n} must be in [0, 1]");
            }
        }
        if !(0.0..=1.0).contains(&self.ema_start) || !(self.ema_start..=1.0).contains(&self.ema_end) {
            bail!(Config, "EMA momentum must rise monotonically within [0, 1]");
        }
        if !(self.teacher_temp_start > 0.0) || self.teacher_temp_end < self.teacher_temp_start {
            bail!(Config, "teacher temperature must be positive and non-decreasing");
        }
        if self.teacher_temp_end > self.student_temp {
            bail!(Config, "teacher temperature must not exceed the student temperature");
        }
        if !(0.0..1.0).contains(&self.aug.mask_ratio) {
            bail!(Config, "mask ratio must be in [0, 1)");
        }
        if self.objectives.ssl && self.aug.mask_ratio == 0.0 {
            bail!(Config, "masked modeling needs a positive mask ratio");
        }
        if !(self.gan_weight >= 0.0) || !(self.disc_lr > 0.0) || self.disc_channels == 0 {
            bail!(Config, "invalid adversarial settings");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.total_samples.div_ceil(self.batch as u64)
    }

    pub fn uses_clip(&self) -> bool {
        self.objectives.clip && self.weights.clip > 0.0
    }

    pub fn uses_ssl(&self) -> bool {
        self.objectives.ssl && self.weights.ssl > 0.0
    }

    pub fn uses_rec(&self) -> bool {
        self.objectives.rec && self.weights.rec > 0.0
    }
}

// ---------------------------------------------------------------------------
// Schedules

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Lr,
    Ema,
    TeacherTemp,
}

/// `b + (a − b)·½(1 + cos(π·frac))`: `a` at 0, `b` at 1.
pub fn cosine(a: f64, b: f64, frac: f64) -> f64 {
    b + (a - b) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Scheduled value at `step` of `total`.
pub fn schedule(kind: ScheduleKind, step: u64, total: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > total || total == 0 {
        bail!(InvalidArgument, "schedule step {step} outside 0..={total}");
    }
    let s = step as f64;
    let t = total as f64;
    Ok(match kind {
        ScheduleKind::Lr => {
            let warm = (cfg.warmup_frac * t).round();
            if s < warm {
                cfg.lr * s / warm
            } else if t > warm {
                cosine(cfg.lr, cfg.lr_floor, (s - warm) / (t - warm))
            } else {
                cfg.lr
            }
        }
        ScheduleKind::Ema => {
            if step == total {
                cfg.ema_end
            } else {
                cosine(cfg.ema_start, cfg.ema_end, s / t)
            }
        }
        ScheduleKind::TeacherTemp => {
            let warm = (cfg.teacher_temp_warmup_frac * t).round();
            if s < warm {
                cfg.teacher_temp_start + (cfg.teacher_temp_end - cfg.teacher_temp_start) * s / warm
            } else {
                cfg.teacher_temp_end
            }
        }
    })
}

// ---------------------------------------------------------------------------
// FLOPs ledger

/// Training FLOPs of one pre-training step: 3× forward cost (forward plus
/// backward) for every student pass and 1× for teacher passes. The frozen
/// perceptual network is not counted.
pub fn pretrain_step_flops(m: &ModelConfig, t: &TrainConfig) -> u64 {
    let tokens = m.num_tokens();
    let local_side = ((m.image_size as f64 * t.aug.local_fraction).round() as usize / m.patch_size).max(1);
    let local_tokens = local_side * local_side;
    let views = t.aug.local_views;
    let (b, bs, br) = (t.batch as u64, t.batch_ssl as u64, t.batch_rec as u64);
    let mut student = 0u64;
    let mut teacher = 0u64;
    if t.uses_clip() {
        student += b * (model::encoder_flops(m, tokens) + model::text_flops(m, m.text_max_len));
    }
    if t.uses_rec() {
        if !t.uses_clip() {
            student += br * model::encoder_flops(m, tokens);
        }
        student += br * model::decoder_flops(m, tokens);
    }
    if t.uses_ssl() {
        student += bs
            * (2 * model::encoder_flops(m, tokens)
                + views as u64 * model::encoder_flops(m, local_tokens)
                + model::dino_head_flops(m, 2 + views + tokens));
        teacher += bs * (2 * model::encoder_flops(m, tokens) + model::dino_head_flops(m, 2 + tokens));
    }
    3 * student + teacher
}

/// Stage-2 FLOPs per step: frozen encoder forward, decoder forward/backward and
/// two discriminator passes over real and fake images.
pub fn gan_step_flops(m: &ModelConfig, t: &TrainConfig) -> u64 {
    let tokens = m.num_tokens();
    let br = t.batch_rec as u64;
    br * (model::encoder_flops(m, tokens) + 3 * model::decoder_flops(m, tokens))
}

// ---------------------------------------------------------------------------
// Step inputs

/// Everything one step consumes; a pure function of `(seed, step)`.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub step: u64,
    pub indices: Vec<usize>,
    pub samples: Vec<Sample>,
    pub plan: BatchPlan,
    /// Views for each entry of `plan.ssl`, in order; empty when SSL is off.
    pub views: Vec<ViewSet>,
}

pub fn assemble_batch(dataset: &Dataset, cfg: &TrainConfig, patch_size: usize, step: u64) -> Result<StepBatch> {
    if dataset.is_empty() {
        bail!(Dataset, "cannot train on an empty dataset");
    }
    let b = if cfg.stage == Stage::GanFinetune { cfg.batch_rec } else { cfg.batch };
    let indices = batch_indices(cfg.seed, step, b, dataset.len());
    let samples: Vec<Sample> = indices.iter().map(|&i| dataset.get(i)).collect();
    let plan = if cfg.stage == Stage::GanFinetune {
        BatchPlan {
            clip: Vec::new(),
            ssl: Vec::new(),
            rec: (0..b).collect(),
        }
    } else {
        plan_batch(b, cfg.batch_ssl, cfg.batch_rec, &mut stream_rng(cfg.seed, Stream::Plan, step))?
    };
    let mut views = Vec::new();
    if cfg.stage == Stage::Pretrain && cfg.uses_ssl() {
        let mut rng = stream_rng(cfg.seed, Stream::Views, step);
        for &i in &plan.ssl {
            views.push(make_views(&samples[i], &cfg.aug, patch_size, &mut rng)?);
        }
    }
    Ok(StepBatch {
        step,
        indices,
        samples,
        plan,
        views,
    })
}

/// Mutable training state besides the parameters.
#[derive(Debug, Clone)]
pub struct RunState {
    pub stage: Stage,
    pub step: u64,
    pub samples_seen: u64,
    /// Cumulative training FLOPs over both stages.
    pub flops_cum: u64,
    /// Pre-training FLOPs; frozen once stage 2 starts.
    pub pretrain_flops: u64,
    pub optimizer: AdamW,
    pub disc_optimizer: AdamW,
    pub dino: DinoState,
}

impl RunState {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            stage: cfg.stage,
            step: 0,
            samples_seen: 0,
            flops_cum: 0,
            pretrain_flops: 0,
            optimizer: AdamW::new(cfg.optimizer),
            disc_optimizer: AdamW::new(AdamWConfig {
                weight_decay: 0.0,
                ..cfg.optimizer
            }),
            dino: DinoState::new(model_cfg.dino_prototypes, cfg.teacher_temp_start, cfg.student_temp, cfg.center_momentum)?,
        })
    }
}

/// Read-only inputs shared by every step.
pub struct StepContext<'a> {
    pub cfg: &'a TrainConfig,
    pub vocab: &'a Vocab,
    pub perceptual: &'a dyn PerceptualNet,
    pub total_steps: u64,
}

fn stack_subset(samples: &[Sample], idx: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
    stack_images(&idx.iter().map(|&i| &samples[i].image).collect::<Vec<_>>(), dtype, dev)
}

fn caption_ids(samples: &[Sample], vocab: &Vocab, model: &TokenizerModel) -> Result<(Tensor, Vec<usize>)> {
    let seqs: Vec<Vec<u32>> = samples.iter().map(|s| vocab.tokenize(&s.caption)).collect();
    let max_len = model.config.text_max_len;
    let (flat, last) = pad_batch(&seqs, max_len);
    if let Some(&id) = flat.iter().find(|&&id| id as usize >= model.config.vocab_size) {
        return Err(Error::OutOfVocab {
            id,
            vocab_size: model.config.vocab_size,
        });
    }
    Ok((Tensor::from_vec(flat, (samples.len(), max_len), model.device())?, last))
}

/// Differentiable pre-training loss for `batch` plus its scalar report. The
/// DINO state (centers) is advanced as a side effect.
pub fn pretrain_losses(
    batch: &StepBatch,
    model: &TokenizerModel,
    teacher: &EmaTeacher,
    dino: &mut DinoState,
    ctx: &StepContext,
) -> Result<(Tensor, LossReport)> {
    let cfg = ctx.cfg;
    let (dtype, dev) = (model.dtype(), model.device().clone());
    let mut terms = LossTerms::default();
    let mut counts = TermCounts::default();
    let mut clip_out = None;

    if cfg.uses_clip() {
        let all: Vec<usize> = batch.plan.clip.clone();
        let imgs = stack_subset(&batch.samples, &all, dtype, &dev)?;
        let out = model.encode_batch(&imgs, None)?;
        let (ids, last) = caption_ids(&batch.samples, ctx.vocab, model)?;
        let img_emb = model.image_embedding(&out)?;
        let txt_emb = model.text_embedding(&ids, &last)?;
        terms.clip = Some(clip_loss(&img_emb, &txt_emb, &model.clip_temperature()?)?);
        counts.clip = all.len();
        clip_out = Some(out);
    }

    if cfg.uses_rec() {
        let idx = &batch.plan.rec;
        let target = stack_subset(&batch.samples, idx, dtype, &dev)?;
        let (latent, grid) = match &clip_out {
            Some(out) => {
                let sel = Tensor::new(idx.iter().map(|&i| i as u32).collect::<Vec<_>>().as_slice(), &dev)?;
                (out.latent.index_select(&sel, 0)?, out.grid)
            }
            None => {
                let out = model.encode_batch(&target, None)?;
                (out.latent, out.grid)
            }
        };
        let recon = model.decode_tokens(&latent, grid)?;
        let r = rec_loss(&target, &recon, ctx.perceptual)?;
        terms.l1 = Some(r.l1);
        terms.perceptual = Some(r.perceptual);
        counts.rec = idx.len();
    }

    if cfg.uses_ssl() {
        let bs = batch.views.len();
        if bs == 0 {
            bail!(InvalidArgument, "SSL is enabled but the batch carries no views");
        }
        let g1 = stack_images(&batch.views.iter().map(|v| &v.global_views[0]).collect::<Vec<_>>(), dtype, &dev)?;
        let g2 = stack_images(&batch.views.iter().map(|v| &v.global_views[1]).collect::<Vec<_>>(), dtype, &dev)?;
        let t = batch.views[0].mim_mask.len();
        let mask_flat: Vec<f32> = batch.views.iter().flat_map(|v| v.mim_mask.iter().map(|&m| if m { 1.0 } else { 0.0 })).collect();
        let mask = Tensor::from_vec(mask_flat, (bs, t), &dev)?.to_dtype(dtype)?;
        let tap = model.config.semantic_tap;

        let s1 = model.encode_batch(&g1, Some(&mask))?;
        let s2 = model.encode_batch(&g2, None)?;
        let mut student_views = vec![
            model.dino_head.forward(&s1.semantic(tap).mean(1)?)?,
            model.dino_head.forward(&s2.semantic(tap).mean(1)?)?,
        ];
        let locals = batch.views[0].local_views.len();
        if locals > 0 {
            let imgs: Vec<_> = (0..locals).flat_map(|j| batch.views.iter().map(move |v| &v.local_views[j])).collect();
            let lo = model.encode_batch(&stack_images(&imgs, dtype, &dev)?, None)?;
            let pooled = model.dino_head.forward(&lo.semantic(tap).mean(1)?)?;
            for j in 0..locals {
                student_views.push(pooled.narrow(0, j * bs, bs)?);
            }
        }
        let student_patch = model.dino_head.forward(s1.semantic(tap))?;

        let (t_enc, t_head) = teacher.networks()?;
        let t1 = t_enc.forward(&g1, None)?;
        let t2 = t_enc.forward(&g2, None)?;
        let teacher_views = vec![
            t_head.forward(&t1.semantic(tap).mean(1)?)?.detach(),
            t_head.forward(&t2.semantic(tap).mean(1)?)?.detach(),
        ];
        let teacher_patch = t_head.forward(t1.semantic(tap))?.detach();

        terms.dino = Some(dino_loss(&student_views, &teacher_views, dino)?);
        terms.mim = Some(mim_loss(&student_patch, &teacher_patch, &mask, dino)?);
        counts.ssl = bs;
    }

    let total = total_loss(&terms, &cfg.weights)?;
    let val = |t: &Option<Tensor>| -> Result<f64> { t.as_ref().map(scalar).transpose().map(|v| v.unwrap_or(0.0)) };
    let report = LossReport {
        step: batch.step,
        l1: val(&terms.l1)?,
        perceptual: val(&terms.perceptual)?,
        mim: val(&terms.mim)?,
        dino: val(&terms.dino)?,
        clip: val(&terms.clip)?,
        gan_g: 0.0,
        gan_d: 0.0,
        total: scalar(&total)?,
        flops_cum: 0,
        counts,
    };
    Ok((total, report))
}

fn nonfinite(step: u64, report: &LossReport) -> Error {
    Error::NonFinite {
        step,
        detail: report.to_jsonl().unwrap_or_else(|_| format!("{report:?}")),
    }
}

/// One optimizer step on the weighted total, then the EMA teacher update with
/// the scheduled momentum and the FLOPs ledger advance.
pub fn pretrain_step(
    batch: &StepBatch,
    model: &TokenizerModel,
    teacher: &mut EmaTeacher,
    state: &mut RunState,
    ctx: &StepContext,
) -> Result<LossReport> {
    if state.stage != Stage::Pretrain || ctx.cfg.stage != Stage::Pretrain {
        bail!(InvalidArgument, "pretrain_step called outside the pre-training stage");
    }
    let cfg = ctx.cfg;
    let step = state.step;
    state.dino.teacher_temp = schedule(ScheduleKind::TeacherTemp, step, ctx.total_steps, cfg)?;
    let mut dino = state.dino.clone();
    let (total, mut report) = pretrain_losses(batch, model, teacher, &mut dino, ctx)?;
    if !report.is_finite() {
        return Err(nonfinite(step, &report));
    }
    let grads = total.backward()?;
    let lr = schedule(ScheduleKind::Lr, step, ctx.total_steps, cfg)?;
    state.optimizer.step(&model.store, &grads, &[""], lr)?;
    if cfg.uses_ssl() {
        let m = schedule(ScheduleKind::Ema, step + 1, ctx.total_steps, cfg)?;
        teacher.update(&model.store, m)?;
    }
    state.dino = dino;
    state.step += 1;
    state.samples_seen += cfg.batch as u64;
    let f = pretrain_step_flops(&model.config, cfg);
    state.flops_cum += f;
    state.pretrain_flops += f;
    report.flops_cum = state.flops_cum;
    Ok(report)
}

/// Stage-2 inputs: the reconstruction targets and their detached latents.
pub fn stage2_latents(batch: &StepBatch, model: &TokenizerModel) -> Result<(Tensor, Tensor, (usize, usize))> {
    let x = stack_subset(&batch.samples, &batch.plan.rec, model.dtype(), model.device())?;
    let enc = model.encode_batch(&x, None)?;
    Ok((x, enc.latent.detach(), enc.grid))
}

/// Decoder objective `l1 + perceptual + gan_weight·gan_g` on detached latents;
/// returns the total with its `(l1, perceptual, gan_g)` parts.
pub fn stage2_generator_loss(
    x: &Tensor,
    latent: &Tensor,
    grid: (usize, usize),
    model: &TokenizerModel,
    disc: &PatchDiscriminator,
    ctx: &StepContext,
) -> Result<(Tensor, [Tensor; 3])> {
    let recon = model.decode_tokens(latent, grid)?;
    let (g_loss, _) = gan_losses(x, &recon, |t| disc.forward(t))?;
    let r = rec_loss(x, &recon, ctx.perceptual)?;
    let total = ((&r.l1 + &r.perceptual)? + (&g_loss * ctx.cfg.gan_weight)?)?;
    Ok((total, [r.l1, r.perceptual, g_loss]))
}

/// Alternating discriminator and decoder updates over detached encoder latents.
pub fn gan_finetune_step(
    batch: &StepBatch,
    model: &TokenizerModel,
    disc: &PatchDiscriminator,
    state: &mut RunState,
    ctx: &StepContext,
) -> Result<LossReport> {
    if state.stage != Stage::GanFinetune || ctx.cfg.stage != Stage::GanFinetune {
        bail!(InvalidArgument, "gan_finetune_step called outside the fine-tuning stage");
    }
    let cfg = ctx.cfg;
    let step = state.step;
    let (x, latent, grid) = stage2_latents(batch, model)?;

    let recon = model.decode_tokens(&latent, grid)?;
    let (_, d_loss) = gan_losses(&x, &recon, |t| disc.forward(t))?;
    let gan_d = scalar(&d_loss)?;
    let d_grads = d_loss.backward()?;
    let lr = schedule(ScheduleKind::Lr, step, ctx.total_steps, cfg)?;
    let disc_lr = cfg.disc_lr * lr / cfg.lr;
    state.disc_optimizer.step(&disc.store, &d_grads, &[""], disc_lr)?;

    let (total, [l1, perceptual, g_loss]) = stage2_generator_loss(&x, &latent, grid, model, disc, ctx)?;
    let mut report = LossReport {
        step,
        l1: scalar(&l1)?,
        perceptual: scalar(&perceptual)?,
        gan_g: scalar(&g_loss)?,
        gan_d,
        total: scalar(&total)?,
        counts: TermCounts {
            rec: batch.plan.rec.len(),
            ..Default::default()
        },
        ..Default::default()
    };
    if !report.is_finite() {
        return Err(nonfinite(step, &report));
    }
    let grads = total.backward()?;
    state.optimizer.step(&model.store, &grads, &[prefix::DECODER], lr)?;
    state.step += 1;
    state.samples_seen += batch.plan.rec.len() as u64;
    state.flops_cum += gan_step_flops(&model.config, cfg);
    report.flops_cum = state.flops_cum;
    Ok(report)
}

/// Largest absolute gradient over variables under `prefix` (0 when none has a
/// gradient).
pub fn max_abs_grad(store: &crate::nn::ParamStore, grads: &candle_core::backprop::GradStore, prefix: &str) -> Result<f64> {
    let mut best = 0.0f64;
    for (_, v) in store.iter_prefix(prefix) {
        if let Some(g) = grads.get(v.as_tensor()) {
            best = best.max(g.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Trainer

/// Owns the model, teacher, optional discriminator and run state.
pub struct Trainer {
    pub model: TokenizerModel,
    pub teacher: EmaTeacher,
    pub disc: Option<PatchDiscriminator>,
    pub state: RunState,
    pub cfg: TrainConfig,
    pub vocab: Vocab,
    pub dataset_manifest: DatasetManifest,
    pub dataset: Dataset,
    pub latent_stats: Option<LatentStats>,
    perceptual: RandomConvPyramid,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, manifest: DatasetManifest) -> Result<Self> {
        cfg.validate()?;
        model_cfg.validate()?;
        let dataset = manifest.open()?;
        if dataset.image_size() != model_cfg.image_size {
            bail!(Config, "dataset image size {} differs from model image size {}", dataset.image_size(), model_cfg.image_size);
        }
        let vocab = crate::data::build_vocab(dataset.corpus());
        if vocab.len() > model_cfg.vocab_size {
            bail!(Config, "vocabulary of {} words exceeds model vocab_size {}", vocab.len(), model_cfg.vocab_size);
        }
        let dev = Device::Cpu;
        let model = TokenizerModel::new(model_cfg.clone(), DType::F32, &dev, cfg.seed)?;
        let teacher = EmaTeacher::from_student(&model)?;
        let disc = if cfg.stage == Stage::GanFinetune {
            Some(PatchDiscriminator::new(cfg.disc_channels, DType::F32, &dev, cfg.seed)?)
        } else {
            None
        };
        let state = RunState::new(&model_cfg, &cfg)?;
        Ok(Self {
            model,
            teacher,
            disc,
            state,
            cfg,
            vocab,
            dataset_manifest: manifest,
            dataset,
            latent_stats: None,
            perceptual: RandomConvPyramid::new(DType::F32, &dev)?,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.total_steps()
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    pub fn perceptual(&self) -> &RandomConvPyramid {
        &self.perceptual
    }

    pub fn batch(&self, step: u64) -> Result<StepBatch> {
        assemble_batch(&self.dataset, &self.cfg, self.model.config.patch_size, step)
    }

    pub fn step(&mut self) -> Result<LossReport> {
        if self.is_done() {
            bail!(InvalidArgument, "training budget of {} steps exhausted", self.total_steps());
        }
        let batch = self.batch(self.state.step)?;
        let ctx = StepContext {
            cfg: &self.cfg,
            vocab: &self.vocab,
            perceptual: &self.perceptual,
            total_steps: self.cfg.total_steps(),
        };
        match self.cfg.stage {
            Stage::Pretrain => pretrain_step(&batch, &self.model, &mut self.teacher, &mut self.state, &ctx),
            Stage::GanFinetune => {
                let disc = self.disc.as_ref().expect("stage 2 trainer owns a discriminator");
                gan_finetune_step(&batch, &self.model, disc, &mut self.state, &ctx)
            }
        }
    }

    /// Runs until `until` steps (capped at the budget), appending each report
    /// to `metrics` as JSONL. On a non-finite loss a snapshot is written to
    /// `snapshot_dir/nonfinite-step-N` before the error is returned.
    pub fn run(&mut self, until: u64, mut metrics: Option<&mut dyn Write>, snapshot_dir: Option<&Path>) -> Result<Vec<LossReport>> {
        let until = until.min(self.total_steps());
        let mut out = Vec::new();
        while self.state.step < until {
            match self.step() {
                Ok(r) => {
                    if let Some(w) = metrics.as_deref_mut() {
                        writeln!(w, "{}", r.to_jsonl()?).map_err(|e| Error::io("<metrics>", e))?;
                    }
                    out.push(r);
                }
                Err(e @ Error::NonFinite { step, .. }) => {
                    if let Some(dir) = snapshot_dir {
                        let snap = dir.join(format!("nonfinite-step-{step}"));
                        log::error!("non-finite loss at step {step}; snapshot in {}", snap.display());
                        self.save(&snap)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    /// Switches a pre-trained run to decoder fine-tuning with `cfg`.
    pub fn into_finetune(mut self, mut cfg: TrainConfig) -> Result<Self> {
        cfg.stage = Stage::GanFinetune;
        cfg.validate()?;
        let dev = self.model.device().clone();
        self.disc = Some(PatchDiscriminator::new(cfg.disc_channels, DType::F32, &dev, cfg.seed)?);
        let mut state = RunState::new(&self.model.config, &cfg)?;
        state.flops_cum = self.state.flops_cum;
        state.pretrain_flops = self.state.pretrain_flops;
        state.dino = self.state.dino.clone();
        self.state = state;
        self.cfg = cfg;
        Ok(self)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load_checkpoint(dir)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetManifest,
    pub stage: Stage,
    pub step: u64,
    pub samples_seen: u64,
    pub flops_cum: u64,
    pub pretrain_flops: u64,
    pub optimizer_counts: BTreeMap<String, u64>,
    pub disc_optimizer_counts: BTreeMap<String, u64>,
    pub teacher_temp: f64,
    pub latent_stats: Option<LatentStats>,
    /// Archive file name → SHA-256.
    pub files: BTreeMap<String, String>,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prefixed(store_snapshot: BTreeMap<String, Tensor>, keep: &[&str]) -> BTreeMap<String, Tensor> {
    store_snapshot.into_iter().filter(|(k, _)| keep.iter().any(|p| k.starts_with(p))).collect()
}

pub fn save_checkpoint(tr: &Trainer, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let all = tr.model.store.snapshot("")?;
    let mut archives: Vec<(&str, BTreeMap<String, Tensor>)> = vec![
        ("encoder.bin", prefixed(all.clone(), &[prefix::ENCODER])),
        ("decoder.bin", prefixed(all.clone(), &[prefix::DECODER])),
        ("text.bin", prefixed(all.clone(), &[prefix::TEXT])),
        ("heads.bin", prefixed(all, &[prefix::CLIP, prefix::DINO_HEAD])),
        ("teacher.bin", tr.teacher.params.clone()),
        ("optimizer.bin", tr.state.optimizer.tensors()),
        ("disc_optimizer.bin", tr.state.disc_optimizer.tensors()),
    ];
    let dev = tr.model.device();
    let mut dino = BTreeMap::new();
    dino.insert("center".to_string(), Tensor::new(tr.state.dino.center.as_slice(), dev)?);
    dino.insert("patch_center".to_string(), Tensor::new(tr.state.dino.patch_center.as_slice(), dev)?);
    archives.push(("dino.bin", dino));
    if let Some(d) = &tr.disc {
        archives.push(("disc.bin", d.store.snapshot("")?));
    }
    let mut files = BTreeMap::new();
    for (name, tensors) in &archives {
        files.insert(name.to_string(), archive::save(&dir.join(name), tensors)?);
    }
    tr.vocab.save(&dir.join("vocab.json"))?;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        model: tr.model.config.clone(),
        train: tr.cfg.clone(),
        dataset: tr.dataset_manifest.clone(),
        stage: tr.state.stage,
        step: tr.state.step,
        samples_seen: tr.state.samples_seen,
        flops_cum: tr.state.flops_cum,
        pretrain_flops: tr.state.pretrain_flops,
        optimizer_counts: tr.state.optimizer.counts.clone(),
        disc_optimizer_counts: tr.state.disc_optimizer.counts.clone(),
        teacher_temp: tr.state.dino.teacher_temp,
        latent_stats: tr.latent_stats.clone(),
        files,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| Error::Corrupt {
        path: path.clone(),
        reason: "missing format_version".into(),
    })? as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(serde_json::from_value(raw)?)
}

fn load_archive(dir: &Path, name: &str, manifest: &CheckpointManifest, dev: &Device) -> Result<BTreeMap<String, Tensor>> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    use sha2::Digest;
    let digest = hex::encode(sha2::Sha256::digest(&bytes));
    match manifest.files.get(name) {
        Some(expected) if *expected == digest => archive::decode(&bytes, &path, dev),
        Some(_) => Err(Error::Corrupt {
            path,
            reason: "archive hash differs from manifest".into(),
        }),
        None => Err(Error::Corrupt {
            path,
            reason: "archive not listed in manifest".into(),
        }),
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<Trainer> {
    let m = read_manifest(dir)?;
    let mut tr = Trainer::new(m.model.clone(), m.train.clone(), m.dataset.clone())?;
    let dev = tr.model.device().clone();
    let mut params = BTreeMap::new();
    for name in ["encoder.bin", "decoder.bin", "text.bin", "heads.bin"] {
        params.extend(load_archive(dir, name, &m, &dev)?);
    }
    if params.len() != tr.model.store.vars().len() {
        return Err(Error::Corrupt {
            path: dir.to_path_buf(),
            reason: format!("{} parameters stored, model has {}", params.len(), tr.model.store.vars().len()),
        });
    }
    tr.model.store.load(&params)?;
    let teacher = load_archive(dir, "teacher.bin", &m, &dev)?;
    if teacher.keys().ne(tr.teacher.params.keys()) {
        return Err(Error::Corrupt {
            path: dir.to_path_buf(),
            reason: "teacher parameter names differ".into(),
        });
    }
    tr.teacher.params = teacher;
    tr.state.optimizer = AdamW::from_tensors(m.train.optimizer, load_archive(dir, "optimizer.bin", &m, &dev)?, m.optimizer_counts.clone())?;
    tr.state.disc_optimizer = AdamW::from_tensors(
        AdamWConfig {
            weight_decay: 0.0,
            ..m.train.optimizer
        },
        load_archive(dir, "disc_optimizer.bin", &m, &dev)?,
        m.disc_optimizer_counts.clone(),
    )?;
    let dino = load_archive(dir, "dino.bin", &m, &dev)?;
    let get = |k: &str| -> Result<Vec<f64>> {
        Ok(dino
            .get(k)
            .ok_or_else(|| Error::Corrupt {
                path: dir.join("dino.bin"),
                reason: format!("missing {k}"),
            })?
            .to_vec1()?)
    };
    tr.state.dino.center = get("center")?;
    tr.state.dino.patch_center = get("patch_center")?;
    tr.state.dino.teacher_temp = m.teacher_temp;
    if let Some(d) = &tr.disc {
        d.store.load(&load_archive(dir, "disc.bin", &m, &dev)?)?;
    }
    let vocab = Vocab::load(&dir.join("vocab.json"))?;
    if vocab != tr.vocab {
        return Err(Error::Corrupt {
            path: dir.join("vocab.json"),
            reason: "vocabulary differs from the dataset's".into(),
        });
    }
    tr.state.stage = m.stage;
    tr.state.step = m.step;
    tr.state.samples_seen = m.samples_seen;
    tr.state.flops_cum = m.flops_cum;
    tr.state.pretrain_flops = m.pretrain_flops;
    tr.latent_stats = m.latent_stats;
    Ok(tr)
}

/// Loads only the model (and vocabulary) from a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<(TokenizerModel, Vocab, CheckpointManifest)> {
    let tr = load_checkpoint(dir)?;
    let m = read_manifest(dir)?;
    Ok((tr.model, tr.vocab, m))
}

/// Grid latents of `samples` under `model`, `[N, d, h, w]`.
pub fn encode_grid(model: &TokenizerModel, images: &Tensor) -> Result<Tensor> {
    let out = model.encode_batch(images, None)?;
    tokens_to_grid(&out.latent, out.grid)
}

/// Path of the metrics stream inside a run directory.
pub fn metrics_path(run_dir: &Path) -> PathBuf {
    run_dir.join("metrics.jsonl")
}
