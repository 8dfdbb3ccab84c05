//! Fixed downstream generation protocol: a class-conditional diffusion
//! transformer trained with rectified flow on standardized tokenizer latents,
//! Euler sampling, and the generation Fréchet proxy.

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nalgebra::DMatrix;

use crate::data::{batch_indices, stack_images, Dataset, Sample};
use crate::error::{bail, Error, Result};
use crate::eval::{frechet, model_hash, tensor_to_matrix, FeatureExtractor, LatentStats, EVAL_CHUNK};
use crate::losses::scalar;
use crate::model::{grid_to_tokens, patchify, tokens_to_grid, unpatchify, TokenizerModel};
use crate::nn::{layer_norm_plain, Attention, BuilderRoot, Init, Linear, Mlp, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{normal_tensor, stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiTConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Patch side over the latent grid.
    pub patch: usize,
    pub latent_channels: usize,
    pub latent_grid: usize,
    pub num_classes: usize,
    /// Classifier-free guidance scale; `None` samples without guidance.
    pub cfg_scale: Option<f64>,
    pub sampler_steps: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Latents generated for the Fréchet proxy.
    pub num_samples: usize,
    /// Training images encoded for the DiT training set.
    pub train_images: usize,
    pub seed: u64,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            width: 256,
            heads: 4,
            mlp_ratio: 4,
            patch: 1,
            latent_channels: 16,
            latent_grid: 4,
            num_classes: 16,
            cfg_scale: None,
            sampler_steps: 50,
            train_steps: 4000,
            batch: 64,
            lr: 3e-4,
            warmup_steps: 100,
            num_samples: 2048,
            train_images: 8192,
            seed: 0,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            bail!(Config, "DiT width {} must be a positive multiple of heads {}", self.width, self.heads);
        }
        if self.patch == 0 || self.latent_grid % self.patch != 0 {
            bail!(Config, "latent grid {} not divisible by patch {}", self.latent_grid, self.patch);
        }
        if self.num_classes == 0 || self.sampler_steps == 0 || self.batch == 0 || self.num_samples == 0 {
            bail!(Config, "DiT class count, sampler steps, batch and sample count must be positive");
        }
        if !(self.lr > 0.0) {
            bail!(Config, "DiT lr must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the serialized configuration (seed included).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    fn tokens(&self) -> usize {
        let s = self.latent_grid / self.patch;
        s * s
    }
}

/// Class- and time-conditioned velocity predictor.
pub trait VelocityField {
    /// `x`: `[B, C, h, w]`, `t`: `[B]` in `[0, 1]`, one label per row.
    fn velocity(&self, x: &Tensor, t: &Tensor, labels: &[u32]) -> Result<Tensor>;
}

#[derive(Debug)]
struct DiTBlock {
    attn: Attention,
    mlp: Mlp,
    ada: Linear,
}

impl DiTBlock {
    fn forward(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let w = x.dim(D::Minus1)?;
        let m = self.ada.forward(&c.silu()?)?.unsqueeze(1)?; // [B, 1, 6w]
        let chunk = |i: usize| m.narrow(D::Minus1, i * w, w);
        let (sh1, sc1, g1, sh2, sc2, g2) = (chunk(0)?, chunk(1)?, chunk(2)?, chunk(3)?, chunk(4)?, chunk(5)?);
        let h = layer_norm_plain(x, 1e-6)?.broadcast_mul(&(sc1 + 1.0)?)?.broadcast_add(&sh1)?;
        let x = (x + self.attn.forward(&h, None)?.broadcast_mul(&g1)?)?;
        let h = layer_norm_plain(&x, 1e-6)?.broadcast_mul(&(sc2 + 1.0)?)?.broadcast_add(&sh2)?;
        Ok((&x + self.mlp.forward(&h)?.broadcast_mul(&g2)?)?)
    }
}

/// Diffusion transformer with adaLN-Zero conditioning on time and class.
#[derive(Debug)]
pub struct DiT {
    pub config: DiTConfig,
    pub store: ParamStore,
    embed: Linear,
    pos: Tensor,
    t_mlp: (Linear, Linear),
    class_embed: Tensor,
    blocks: Vec<DiTBlock>,
    final_ada: Linear,
    head: Linear,
}

const FREQ_DIM: usize = 64;

fn timestep_features(t: &Tensor) -> Result<Tensor> {
    let half = FREQ_DIM / 2;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    let f = Tensor::new(freqs.as_slice(), t.device())?.to_dtype(t.dtype())?.unsqueeze(0)?;
    let args = (t.unsqueeze(1)? * 1000.0)?.broadcast_mul(&f)?;
    Ok(Tensor::cat(&[args.cos()?, args.sin()?], 1)?)
}

impl DiT {
    pub fn new(config: DiTConfig, dtype: DType, dev: &Device) -> Result<Self> {
        config.validate()?;
        let store = RefCell::new(ParamStore::new(dtype, dev.clone()));
        let rng = RefCell::new(stream_rng(config.seed, Stream::Init, 2));
        let root = BuilderRoot::trainable(&store, &rng);
        let b = root.root().pp("dit");
        let w = config.width;
        let pdim = config.latent_channels * config.patch * config.patch;
        let blocks = (0..config.depth)
            .map(|i| {
                let bb = b.pp(format!("blocks.{i}"));
                Ok(DiTBlock {
                    attn: Attention::new(&bb.pp("attn"), w, config.heads, false)?,
                    mlp: Mlp::new(&bb.pp("mlp"), w, w * config.mlp_ratio)?,
                    ada: Linear::with_init(&bb.pp("ada"), w, 6 * w, Init::Zeros, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut dit = Self {
            embed: Linear::new(&b.pp("embed"), pdim, w)?,
            pos: b.get("pos", &[config.tokens(), w], Init::TruncNormal(0.02))?,
            t_mlp: (Linear::new(&b.pp("t_mlp.0"), FREQ_DIM, w)?, Linear::new(&b.pp("t_mlp.1"), w, w)?),
            class_embed: b.get("class_embed", &[config.num_classes + 1, w], Init::TruncNormal(0.02))?,
            blocks,
            final_ada: Linear::with_init(&b.pp("final_ada"), w, 2 * w, Init::Zeros, true)?,
            head: Linear::with_init(&b.pp("head"), w, pdim, Init::Zeros, true)?,
            config,
            store: ParamStore::new(dtype, dev.clone()),
        };
        drop(root);
        dit.store = store.into_inner();
        Ok(dit)
    }

    fn forward(&self, x: &Tensor, t: &Tensor, labels: &[u32]) -> Result<Tensor> {
        let (bsz, c, h, w) = x.dims4()?;
        if c != self.config.latent_channels || h != self.config.latent_grid || w != self.config.latent_grid {
            bail!(Shape, "DiT expects [{}, {g}, {g}] latents, got {:?}", self.config.latent_channels, x.dims(), g = self.config.latent_grid);
        }
        if labels.len() != bsz || t.dims() != [bsz] {
            bail!(Shape, "need one label and one time per latent");
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize > self.config.num_classes) {
            bail!(InvalidArgument, "class label {l} out of range");
        }
        let p = self.config.patch;
        let grid = (h / p, w / p);
        let tokens = self.embed.forward(&patchify(x, p)?)?.broadcast_add(&self.pos)?;
        let temb = self.t_mlp.1.forward(&self.t_mlp.0.forward(&timestep_features(t)?)?.silu()?)?;
        let ids = Tensor::new(labels, x.device())?;
        let cond = (temb + self.class_embed.index_select(&ids, 0)?)?;
        let mut hdn = tokens;
        for blk in &self.blocks {
            hdn = blk.forward(&hdn, &cond)?;
        }
        let wd = self.config.width;
        let m = self.final_ada.forward(&cond.silu()?)?.unsqueeze(1)?;
        let (shift, scale) = (m.narrow(D::Minus1, 0, wd)?, m.narrow(D::Minus1, wd, wd)?);
        let hdn = layer_norm_plain(&hdn, 1e-6)?.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?;
        unpatchify(&self.head.forward(&hdn)?, p, grid).map_err(Error::from)
    }

    /// Label used for the unconditional branch of guidance.
    pub fn null_label(&self) -> u32 {
        self.config.num_classes as u32
    }
}

impl VelocityField for DiT {
    fn velocity(&self, x: &Tensor, t: &Tensor, labels: &[u32]) -> Result<Tensor> {
        let cond = self.forward(x, t, labels)?;
        match self.config.cfg_scale {
            None => Ok(cond),
            Some(s) => {
                let null = vec![self.null_label(); labels.len()];
                let uncond = self.forward(x, t, &null)?;
                Ok((&uncond + ((cond - &uncond)? * s)?)?)
            }
        }
    }
}

/// Latents with the flag recording whether they were standardized.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub values: Tensor,
    pub labels: Vec<u32>,
    pub standardized: bool,
}

/// `x_t = (1 − t)·x0 + t·x1`, `t` broadcast per row.
pub fn interpolant(x0: &Tensor, x1: &Tensor, t: &Tensor) -> Result<Tensor> {
    let shape = [t.dim(0)?, 1, 1, 1];
    let t = t.reshape(&shape[..])?;
    Ok((x0.broadcast_mul(&(1.0 - &t)?)? + x1.broadcast_mul(&t)?)?)
}

/// Velocity regression `mean ‖v(x_t, t, y) − (x1 − x0)‖²` with `x0 ~ N(0, I)`
/// and `t ~ U[0, 1]` drawn from `rng`.
pub fn rf_loss<R: Rng>(field: &dyn VelocityField, batch: &LatentBatch, rng: &mut R) -> Result<Tensor> {
    if !batch.standardized {
        bail!(InvalidArgument, "rectified-flow training requires standardized latents");
    }
    let x1 = &batch.values;
    let dims = x1.dims().to_vec();
    let n = dims[0];
    let x0 = normal_tensor(rng, &dims, x1.dtype(), x1.device())?;
    let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let t = Tensor::from_vec(t, n, x1.device())?.to_dtype(x1.dtype())?;
    let xt = interpolant(&x0, x1, &t)?;
    let v = field.velocity(&xt, &t, &batch.labels)?;
    Ok((v - (x1 - &x0)?)?.sqr()?.mean_all()?)
}

/// Euler integration of `dx/dt = v` from Gaussian noise at `t = 0` to `t = 1`.
pub fn sample<R: Rng>(field: &dyn VelocityField, labels: &[u32], shape: (usize, usize, usize), steps: usize, rng: &mut R, dtype: DType, dev: &Device) -> Result<Tensor> {
    let x0 = normal_tensor(rng, &[labels.len(), shape.0, shape.1, shape.2], dtype, dev)?;
    integrate(field, &x0, labels, steps)
}

/// Euler integration from a given starting point.
pub fn integrate(field: &dyn VelocityField, x0: &Tensor, labels: &[u32], steps: usize) -> Result<Tensor> {
    if steps < 1 {
        bail!(InvalidArgument, "sampler needs at least one step");
    }
    let n = x0.dim(0)?;
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    for i in 0..steps {
        let t = Tensor::full(i as f64 * dt, n, x.device())?.to_dtype(x.dtype())?;
        x = (&x + (field.velocity(&x, &t, labels)? * dt)?)?.detach();
    }
    Ok(x)
}

/// Image ↔ latent-grid codec scored by the harness.
pub trait LatentCodec {
    /// `[B, 3, H, W]` → `[B, C, h, w]`.
    fn encode(&self, images: &Tensor) -> Result<Tensor>;
    /// `[B, C, h, w]` → `[B, 3, H, W]`.
    fn decode(&self, latents: &Tensor) -> Result<Tensor>;
    fn hash(&self) -> Result<String>;
}

impl LatentCodec for TokenizerModel {
    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let out = self.encode_batch(images, None)?;
        tokens_to_grid(&out.latent, out.grid)
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = latents.dims4()?;
        self.decode_tokens(&grid_to_tokens(latents)?, (h, w))
    }

    fn hash(&self) -> Result<String> {
        model_hash(self)
    }
}

/// Latent guard bounds for standardized training latents.
pub const GUARD_MEAN: f64 = 0.1;
pub const GUARD_STD: (f64, f64) = (0.8, 1.25);

pub fn check_standardized(stats: &LatentStats) -> Result<()> {
    for (c, (m, s)) in stats.mean.iter().zip(&stats.std).enumerate() {
        if m.abs() >= GUARD_MEAN || !(GUARD_STD.0..=GUARD_STD.1).contains(s) {
            bail!(InvalidArgument, "standardized latent channel {c} has mean {m:.3} / std {s:.3} outside the guard");
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRecord {
    pub frechet_gen: f64,
    pub num_samples: usize,
    pub dit_hash: String,
    pub tokenizer_hash: String,
    pub extractor_hash: String,
    /// Held-out velocity loss before and after training.
    pub rf_loss_init: f64,
    pub rf_loss_final: f64,
    pub latent_stats: LatentStats,
}

impl GenRecord {
    /// Metric name carrying the sample count.
    pub fn metric_name(&self) -> String {
        format!("frechet_gen@{}", self.num_samples)
    }
}

/// Refuses to compare records produced under different harness or extractor hashes.
pub fn ensure_comparable(records: &[&GenRecord]) -> Result<()> {
    let Some(first) = records.first() else {
        return Ok(());
    };
    for r in records {
        if r.dit_hash != first.dit_hash {
            return Err(Error::Incomparable(format!("DiT hash {} differs from {}", r.dit_hash, first.dit_hash)));
        }
        if r.extractor_hash != first.extractor_hash {
            return Err(Error::Incomparable(format!("extractor hash {} differs from {}", r.extractor_hash, first.extractor_hash)));
        }
    }
    Ok(())
}

/// Labelled images read in chunks.
pub trait ImageSource {
    fn len(&self) -> usize;
    /// Images `[len, 3, H, W]` and labels for rows `start..start + len`.
    fn chunk(&self, start: usize, len: usize) -> Result<(Tensor, Vec<u32>)>;
}

/// In-memory images with labels.
pub struct TensorSource<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [u32],
}

impl ImageSource for TensorSource<'_> {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn chunk(&self, start: usize, len: usize) -> Result<(Tensor, Vec<u32>)> {
        Ok((self.images.narrow(0, start, len)?, self.labels[start..start + len].to_vec()))
    }
}

/// The listed rows of a dataset, rendered or decoded on demand.
pub struct DatasetSource<'a> {
    pub dataset: &'a Dataset,
    pub indices: Vec<usize>,
}

impl<'a> DatasetSource<'a> {
    /// The first `n` rows.
    pub fn prefix(dataset: &'a Dataset, n: usize) -> Self {
        Self {
            dataset,
            indices: (0..n.min(dataset.len())).collect(),
        }
    }
}

impl ImageSource for DatasetSource<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn chunk(&self, start: usize, len: usize) -> Result<(Tensor, Vec<u32>)> {
        let samples: Vec<Sample> = self.indices[start..start + len].iter().map(|&i| self.dataset.get(i)).collect();
        samples_chunk(&samples)
    }
}

/// A slice of samples.
pub struct SampleSource<'a>(pub &'a [Sample]);

impl ImageSource for SampleSource<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn chunk(&self, start: usize, len: usize) -> Result<(Tensor, Vec<u32>)> {
        samples_chunk(&self.0[start..start + len])
    }
}

fn samples_chunk(samples: &[Sample]) -> Result<(Tensor, Vec<u32>)> {
    let imgs = stack_images(&samples.iter().map(|s| &s.image).collect::<Vec<_>>(), DType::F32, &Device::Cpu)?;
    Ok((imgs, samples.iter().map(|s| s.class_id as u32).collect()))
}

fn for_chunks(n: usize, size: usize, mut f: impl FnMut(usize, usize) -> Result<()>) -> Result<()> {
    let mut start = 0;
    while start < n {
        let len = size.min(n - start);
        f(start, len)?;
        start += len;
    }
    Ok(())
}

fn features_of(extractor: &dyn FeatureExtractor, source: &dyn ImageSource) -> Result<DMatrix<f64>> {
    let mut parts = Vec::new();
    for_chunks(source.len(), EVAL_CHUNK, |s, l| {
        parts.push(extractor.features(&source.chunk(s, l)?.0)?.detach());
        Ok(())
    })?;
    tensor_to_matrix(&Tensor::cat(&parts, 0)?)
}

/// Mean held-out velocity loss under a fixed noise stream.
pub fn heldout_rf_loss(field: &dyn VelocityField, batch: &LatentBatch, seed: u64) -> Result<f64> {
    let n = batch.values.dim(0)?;
    let mut rng = stream_rng(seed, Stream::Noise, u64::MAX);
    let mut total = 0.0;
    for_chunks(n, 256, |start, len| {
        let sub = LatentBatch {
            values: batch.values.narrow(0, start, len)?,
            labels: batch.labels[start..start + len].to_vec(),
            standardized: batch.standardized,
        };
        total += scalar(&rf_loss(field, &sub, &mut rng)?)? * len as f64;
        Ok(())
    })?;
    Ok(total / n as f64)
}

/// Trains the fixed DiT on standardized latents of `train` and scores decoded
/// samples against `real` with the extractor.
pub fn train_and_score(
    codec: &dyn LatentCodec,
    train: &dyn ImageSource,
    real: &dyn ImageSource,
    cfg: &DiTConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<GenRecord> {
    cfg.validate()?;
    let mut parts = Vec::new();
    let mut train_labels = Vec::with_capacity(train.len());
    for_chunks(train.len(), EVAL_CHUNK, |s, l| {
        let (imgs, labels) = train.chunk(s, l)?;
        parts.push(codec.encode(&imgs)?.detach());
        train_labels.extend(labels);
        Ok(())
    })?;
    if parts.is_empty() {
        bail!(InvalidArgument, "no training images for the generation harness");
    }
    let latents = Tensor::cat(&parts, 0)?;
    let (_, c, h, w) = latents.dims4()?;
    if c != cfg.latent_channels || h != cfg.latent_grid || w != cfg.latent_grid {
        bail!(Shape, "tokenizer latents [{c}, {h}, {w}] do not match the DiT configuration [{}, {g}, {g}]", cfg.latent_channels, g = cfg.latent_grid);
    }
    if let Some(&l) = train_labels.iter().find(|&&l| l as usize >= cfg.num_classes) {
        bail!(InvalidArgument, "label {l} exceeds DiT classes {}", cfg.num_classes);
    }
    let stats = LatentStats::from_latents(&latents)?;
    let z = stats.standardize(&latents)?;
    check_standardized(&LatentStats::from_latents(&z)?)?;

    let n = z.dim(0)?;
    let held = (n / 8).clamp(1, 512);
    let train_n = n - held;
    let heldout = LatentBatch {
        values: z.narrow(0, train_n, held)?,
        labels: train_labels[train_n..].to_vec(),
        standardized: true,
    };

    let dev = Device::Cpu;
    let dit = DiT::new(cfg.clone(), DType::F32, &dev)?;
    let rf_loss_init = heldout_rf_loss(&dit, &heldout, cfg.seed)?;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        grad_clip: Some(1.0),
        ..Default::default()
    });
    for step in 0..cfg.train_steps as u64 {
        let idx = batch_indices(cfg.seed, step, cfg.batch, train_n);
        let sel = Tensor::new(idx.iter().map(|&i| i as u32).collect::<Vec<_>>().as_slice(), &dev)?;
        let mut labels: Vec<u32> = idx.iter().map(|&i| train_labels[i]).collect();
        let mut rng = stream_rng(cfg.seed, Stream::Noise, step);
        if cfg.cfg_scale.is_some() {
            for l in labels.iter_mut() {
                if rng.random::<f64>() < 0.1 {
                    *l = dit.null_label();
                }
            }
        }
        let batch = LatentBatch {
            values: z.index_select(&sel, 0)?,
            labels,
            standardized: true,
        };
        let loss = rf_loss(&dit, &batch, &mut rng)?;
        let lr = cfg.lr * ((step + 1) as f64 / cfg.warmup_steps.max(1) as f64).min(1.0);
        opt.step(&dit.store, &loss.backward()?, &[""], lr)?;
    }
    let rf_loss_final = heldout_rf_loss(&dit, &heldout, cfg.seed)?;

    let mut fake = Vec::new();
    let mut chunk_idx = 0u64;
    for_chunks(cfg.num_samples, 256, |start, len| {
        let labels: Vec<u32> = (start..start + len).map(|i| (i % cfg.num_classes) as u32).collect();
        let mut rng = stream_rng(cfg.seed, Stream::Sample, chunk_idx);
        chunk_idx += 1;
        let zs = sample(&dit, &labels, (c, h, w), cfg.sampler_steps, &mut rng, DType::F32, &dev)?;
        let imgs = codec.decode(&stats.destandardize(&zs)?)?;
        fake.push(extractor.features(&imgs.detach())?.detach());
        Ok(())
    })?;
    let fake = tensor_to_matrix(&Tensor::cat(&fake, 0)?)?;
    let real_feats = features_of(extractor, real)?;
    Ok(GenRecord {
        frechet_gen: frechet(&real_feats, &fake)?,
        num_samples: cfg.num_samples,
        dit_hash: cfg.hash(),
        tokenizer_hash: codec.hash()?,
        extractor_hash: extractor.hash(),
        rf_loss_init,
        rf_loss_final,
        latent_stats: stats,
    })
}
