//! Reconstruction, understanding and latent-statistics metrics.
//!
//! Fréchet distances are computed in the feature space of a small pinned
//! reference classifier, so they are proxies: comparable across runs that share
//! the extractor hash, not comparable to Inception-based FID.

use std::cell::RefCell;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive;
use crate::data::{class_name, heldout_synthetic, stack_images, Dataset, ImageBuf, Sample, Vocab};
use crate::error::{bail, Error, Result};
use crate::model::{tokens_to_grid, TokenizerModel};
use crate::nn::{log_softmax_last, BuilderRoot, Init, Linear, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{stream_rng, Stream};

pub const PSNR_CAP: f64 = 99.0;

/// Mean per-image PSNR in dB of `x_rec` against `x`, both `[B, 3, H, W]` (or a
/// single `[3, H, W]`) in `[-1, 1]`, evaluated on the `[0, 1]` scale.
pub fn psnr(x: &Tensor, x_rec: &Tensor) -> Result<f64> {
    if x.dims() != x_rec.dims() {
        bail!(Shape, "psnr inputs differ: {:?} vs {:?}", x.dims(), x_rec.dims());
    }
    let x4 = if x.rank() == 3 { x.unsqueeze(0)? } else { x.clone() };
    let r4 = if x_rec.rank() == 3 { x_rec.unsqueeze(0)? } else { x_rec.clone() };
    let b = x4.dim(0)?;
    let diff = ((x4.to_dtype(DType::F64)? - r4.to_dtype(DType::F64)?)? * 0.5)?;
    let mse: Vec<f64> = diff.sqr()?.reshape((b, ()))?.mean(1)?.to_vec1()?;
    Ok(mse.iter().map(|&m| psnr_from_mse(m)).sum::<f64>() / b as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Mean and unbiased covariance of the rows of `x`.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn from_rows(x: &DMatrix<f64>) -> Result<Self> {
        let (n, d) = x.shape();
        if n < d + 1 {
            return Err(Error::TooFewSamples { needed: d + 1, got: n });
        }
        let mean = x.row_mean().transpose();
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(Self { mean, cov })
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
pub fn frechet_from_stats(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        bail!(Shape, "feature dims differ: {} vs {}", a.mean.len(), b.mean.len());
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let sa = psd_sqrt(&a.cov);
    let inner = &sa * &b.cov * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Fréchet distance between Gaussian fits of two feature sets (rows = samples).
pub fn frechet(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    frechet_from_stats(&GaussianStats::from_rows(a)?, &GaussianStats::from_rows(b)?)
}

pub fn tensor_to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (n, d) = t.dims2()?;
    let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(DMatrix::from_row_slice(n, d, &v))
}

// ---------------------------------------------------------------------------
// Linear probe

pub const PROBE_ITERS: usize = 500;
pub const PROBE_LR: f64 = 0.1;
pub const PROBE_L2: f64 = 1e-4;

fn standardize_with(x: &DMatrix<f64>, mean: &DVector<f64>, std: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        for j in 0..row.len() {
            row[j] = (row[j] - mean[j]) / std[j];
        }
    }
    out
}

fn softmax_rows(z: &mut DMatrix<f64>) {
    for mut row in z.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Multinomial logistic regression on standardized features: full batch,
/// [`PROBE_ITERS`] Adam steps at [`PROBE_LR`], L2 [`PROBE_L2`], zero init.
/// Returns top-1 accuracy on the test split.
pub fn linear_probe(
    train_x: &DMatrix<f64>,
    train_y: &[usize],
    test_x: &DMatrix<f64>,
    test_y: &[usize],
    num_classes: usize,
) -> Result<f64> {
    let (n, d) = train_x.shape();
    if n != train_y.len() || test_x.nrows() != test_y.len() || test_x.ncols() != d {
        bail!(Shape, "probe features and labels disagree");
    }
    if test_y.is_empty() {
        bail!(InvalidArgument, "empty probe test split");
    }
    if train_y.iter().chain(test_y).any(|&y| y >= num_classes) {
        bail!(InvalidArgument, "probe label out of range 0..{num_classes}");
    }
    let first = train_y.first().copied();
    if first.is_none() || train_y.iter().all(|&y| Some(y) == first) {
        bail!(InvalidArgument, "probe training split has a single class");
    }
    let mean = train_x.row_mean().transpose();
    let mut std = DVector::zeros(d);
    for j in 0..d {
        let col = train_x.column(j);
        let var = col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n as f64;
        std[j] = var.sqrt().max(1e-8);
    }
    let xs = standardize_with(train_x, &mean, &std);
    let xt = standardize_with(test_x, &mean, &std);
    let mut y = DMatrix::zeros(n, num_classes);
    for (i, &c) in train_y.iter().enumerate() {
        y[(i, c)] = 1.0;
    }
    let mut w = DMatrix::<f64>::zeros(d, num_classes);
    let mut b = DVector::<f64>::zeros(num_classes);
    let (mut mw, mut vw) = (w.clone(), w.clone());
    let (mut mb, mut vb) = (b.clone(), b.clone());
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for it in 1..=PROBE_ITERS {
        let mut z = &xs * &w;
        for mut row in z.row_iter_mut() {
            row += b.transpose();
        }
        softmax_rows(&mut z);
        let err = (z - &y) / n as f64;
        let gw = xs.transpose() * &err + &w * PROBE_L2;
        let gb = err.row_sum().transpose();
        mw = mw * b1 + &gw * (1.0 - b1);
        vw = vw * b2 + gw.component_mul(&gw) * (1.0 - b2);
        mb = mb * b1 + &gb * (1.0 - b1);
        vb = vb * b2 + gb.component_mul(&gb) * (1.0 - b2);
        let c1 = 1.0 - b1.powi(it as i32);
        let c2 = 1.0 - b2.powi(it as i32);
        w -= mw.zip_map(&vw, |m, v| PROBE_LR * (m / c1) / ((v / c2).sqrt() + eps));
        b -= mb.zip_map(&vb, |m, v| PROBE_LR * (m / c1) / ((v / c2).sqrt() + eps));
    }
    let mut z = &xt * &w;
    for mut row in z.row_iter_mut() {
        row += b.transpose();
    }
    let correct = z.row_iter().zip(test_y).filter(|(row, &y)| row.transpose().argmax().0 == y).count();
    Ok(correct as f64 / test_y.len() as f64)
}

// ---------------------------------------------------------------------------
// Zero-shot

pub const ZERO_SHOT_TEMPLATES: [&str; 4] = ["a photo of a {}", "an image of a {}", "a {}", "there is a {}"];

/// Per-class mean of the template text embeddings, re-normalized: `[C, D]`.
pub fn class_text_embeddings(model: &TokenizerModel, vocab: &Vocab, classnames: &[String], templates: &[&str]) -> Result<Tensor> {
    if templates.is_empty() {
        bail!(InvalidArgument, "zero-shot needs at least one prompt template");
    }
    let mut rows = Vec::with_capacity(classnames.len());
    for name in classnames {
        let mut embs = Vec::with_capacity(templates.len());
        for t in templates {
            let mut ids = vocab.tokenize(&t.replace("{}", name));
            ids.truncate(model.config.text_max_len);
            embs.push(model.embed_text_clip(&ids)?);
        }
        let mean = Tensor::stack(&embs, 0)?.mean(0)?;
        rows.push(crate::nn::l2_normalize(&mean, crate::model::EMBED_EPS)?);
    }
    Ok(Tensor::stack(&rows, 0)?)
}

/// Argmax predictions of `scale · images · classesᵀ`; `scale > 0` cannot change them.
pub fn zero_shot_predictions(image_emb: &Tensor, class_emb: &Tensor, scale: f64) -> Result<Vec<usize>> {
    let logits = (image_emb.to_dtype(DType::F64)?.matmul(&class_emb.to_dtype(DType::F64)?.t()?)? * scale)?;
    let preds: Vec<u32> = logits.argmax(D::Minus1)?.to_vec1()?;
    Ok(preds.into_iter().map(|p| p as usize).collect())
}

pub fn zero_shot_accuracy(image_emb: &Tensor, class_emb: &Tensor, labels: &[usize]) -> Result<f64> {
    let preds = zero_shot_predictions(image_emb, class_emb, 1.0)?;
    if preds.len() != labels.len() || labels.is_empty() {
        bail!(Shape, "{} predictions for {} labels", preds.len(), labels.len());
    }
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Template-ensemble zero-shot accuracy of the contrastive branches.
pub fn zero_shot(model: &TokenizerModel, vocab: &Vocab, classnames: &[String], templates: &[&str], samples: &[Sample]) -> Result<f64> {
    let class_emb = class_text_embeddings(model, vocab, classnames, templates)?;
    let mut embs = Vec::new();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let imgs = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>(), model.dtype(), model.device())?;
        let out = model.encode_batch(&imgs, None)?;
        embs.push(model.image_embedding(&out)?.detach());
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    zero_shot_accuracy(&Tensor::cat(&embs, 0)?, &class_emb, &labels)
}

// ---------------------------------------------------------------------------
// Latent statistics

pub const STD_FLOOR: f64 = 1e-6;
pub const MIN_LATENT_POSITIONS: usize = 1000;

/// Per-channel statistics of encoder latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at [`STD_FLOOR`].
    pub std: Vec<f64>,
    #[serde(default)]
    pub floored_channels: Vec<usize>,
    pub positions: usize,
}

impl LatentStats {
    /// Statistics over all positions of `latents` `[N, d, h, w]` (single pass).
    pub fn from_latents(latents: &Tensor) -> Result<Self> {
        let (n, d, h, w) = latents.dims4()?;
        let positions = n * h * w;
        if positions < MIN_LATENT_POSITIONS {
            return Err(Error::TooFewSamples {
                needed: MIN_LATENT_POSITIONS,
                got: positions,
            });
        }
        let data: Vec<f64> = latents.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let mut mean = vec![0.0; d];
        let mut m2 = vec![0.0; d];
        let mut count = 0.0f64;
        let hw = h * w;
        for i in 0..n {
            for p in 0..hw {
                count += 1.0;
                for c in 0..d {
                    let v = data[(i * d + c) * hw + p];
                    let delta = v - mean[c];
                    mean[c] += delta / count;
                    m2[c] += delta * (v - mean[c]);
                }
            }
        }
        let mut std = Vec::with_capacity(d);
        let mut floored = Vec::new();
        for (c, m) in m2.iter().enumerate() {
            let s = (m / count).sqrt();
            if !(s >= STD_FLOOR) {
                log::warn!("latent channel {c} has std {s:e}; flooring at {STD_FLOOR:e}");
                floored.push(c);
                std.push(STD_FLOOR);
            } else {
                std.push(s);
            }
        }
        Ok(Self {
            mean,
            std,
            floored_channels: floored,
            positions,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn broadcast(&self, v: &[f64], like: &Tensor) -> Result<Tensor> {
        Ok(Tensor::new(v, like.device())?.to_dtype(like.dtype())?.reshape((1, v.len(), 1, 1))?)
    }

    /// `(z − μ) / σ` for `[N, d, h, w]`.
    pub fn standardize(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        Ok(z.broadcast_sub(&self.broadcast(&self.mean, z)?)?.broadcast_div(&self.broadcast(&self.std, z)?)?)
    }

    pub fn destandardize(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        Ok(z.broadcast_mul(&self.broadcast(&self.std, z)?)?.broadcast_add(&self.broadcast(&self.mean, z)?)?)
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        if z.rank() != 4 || z.dim(1)? != self.channels() {
            bail!(Shape, "latents {:?} do not have {} channels", z.dims(), self.channels());
        }
        Ok(())
    }
}

pub const EVAL_CHUNK: usize = 64;

/// Encodes `samples` into latent grids `[N, d, h, w]`.
pub fn encode_samples(model: &TokenizerModel, samples: &[Sample]) -> Result<Tensor> {
    let mut out = Vec::new();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let imgs = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>(), model.dtype(), model.device())?;
        let enc = model.encode_batch(&imgs, None)?;
        out.push(tokens_to_grid(&enc.latent, enc.grid)?.detach());
    }
    Ok(Tensor::cat(&out, 0)?)
}

pub fn latent_stats(model: &TokenizerModel, samples: &[Sample]) -> Result<LatentStats> {
    LatentStats::from_latents(&encode_samples(model, samples)?)
}

// ---------------------------------------------------------------------------
// Feature extractor

/// Image → feature map used by the Fréchet proxies.
pub trait FeatureExtractor {
    /// `[B, 3, H, W]` → `[B, F]`.
    fn features(&self, images: &Tensor) -> Result<Tensor>;
    /// Content hash identifying the extractor.
    fn hash(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub channels: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 48],
            steps: 300,
            batch: 64,
            lr: 3e-3,
            seed: 7,
        }
    }
}

/// Strided conv classifier trained once on labelled images; features are the
/// globally pooled activations of every conv level, concatenated.
#[derive(Debug)]
pub struct ReferenceExtractor {
    pub config: ExtractorConfig,
    convs: Vec<(Tensor, Tensor)>,
    head: Linear,
    store: ParamStore,
    hash: String,
}

impl ReferenceExtractor {
    fn build(config: &ExtractorConfig, num_classes: usize, dev: &Device) -> Result<Self> {
        let store = RefCell::new(ParamStore::new(DType::F32, dev.clone()));
        let rng = RefCell::new(stream_rng(config.seed, Stream::Extractor, 0));
        let root = BuilderRoot::trainable(&store, &rng);
        let b = root.root().pp("extractor");
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            let lb = b.pp(format!("conv{i}"));
            convs.push((lb.get("weight", &[c, cin, 3, 3], Init::FanIn(2f64.sqrt()))?, lb.get("bias", &[1, c, 1, 1], Init::Zeros)?));
            cin = c;
        }
        let feat: usize = config.channels.iter().sum();
        let head = Linear::with_init(&b.pp("head"), feat, num_classes, Init::FanIn(1.0), true)?;
        drop(root);
        Ok(Self {
            config: config.clone(),
            convs,
            head,
            store: store.into_inner(),
            hash: String::new(),
        })
    }

    fn forward_features(&self, images: &Tensor) -> Result<Tensor> {
        let mut h = images.to_dtype(DType::F32)?;
        let mut pooled = Vec::new();
        for (w, b) in &self.convs {
            h = h.conv2d(w, 1, 2, 1, 1)?.broadcast_add(b)?.relu()?;
            pooled.push(h.mean(D::Minus1)?.mean(D::Minus1)?);
        }
        Ok(Tensor::cat(&pooled, 1)?)
    }

    /// Trains the classifier on `dataset` for `config.steps` Adam steps.
    pub fn train(config: &ExtractorConfig, dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() || config.channels.is_empty() {
            bail!(InvalidArgument, "extractor needs data and at least one conv level");
        }
        let dev = Device::Cpu;
        let mut ex = Self::build(config, dataset.num_classes(), &dev)?;
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            grad_clip: None,
            ..Default::default()
        });
        for step in 0..config.steps as u64 {
            let idx = crate::data::batch_indices(config.seed, step, config.batch, dataset.len());
            let samples: Vec<Sample> = idx.iter().map(|&i| dataset.get(i)).collect();
            let imgs = stack_images(&samples.iter().map(|s| &s.image).collect::<Vec<_>>(), DType::F32, &dev)?;
            let labels: Vec<u32> = samples.iter().map(|s| s.class_id as u32).collect();
            let logits = ex.head.forward(&ex.forward_features(&imgs)?)?;
            let onehot = Tensor::new(labels.as_slice(), &dev)?.to_dtype(DType::F32)?;
            let k = dataset.num_classes();
            let eye = Tensor::eye(k, DType::F32, &dev)?;
            let targets = eye.index_select(&onehot.to_dtype(DType::U32)?, 0)?;
            let loss = (log_softmax_last(&logits)? * targets)?.sum(1)?.neg()?.mean_all()?;
            let grads = loss.backward()?;
            opt.step(&ex.store, &grads, &[""], config.lr)?;
        }
        ex.hash = ex.compute_hash()?;
        Ok(ex)
    }

    fn compute_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config)?);
        h.update(archive::encode(&self.store.snapshot("")?)?);
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut t = self.store.snapshot("")?;
        t.insert("__classes".into(), Tensor::new(&[self.head.out_dim() as u32], &Device::Cpu)?);
        archive::save(path, &t)?;
        Ok(())
    }

    pub fn load(path: &Path, config: &ExtractorConfig) -> Result<Self> {
        let mut t = archive::load(path, &Device::Cpu)?;
        let classes = t
            .remove("__classes")
            .ok_or_else(|| Error::Corrupt {
                path: path.to_path_buf(),
                reason: "missing class count".into(),
            })?
            .to_vec1::<u32>()?[0] as usize;
        let ex = Self::build(config, classes, &Device::Cpu)?;
        ex.store.load(&t)?;
        let mut ex = ex;
        ex.hash = ex.compute_hash()?;
        Ok(ex)
    }

    /// Loads the cached extractor for (`config`, dataset `key`) from `cache_dir`,
    /// training and caching it on a miss.
    pub fn load_or_train(cache_dir: &Path, config: &ExtractorConfig, key: &str, dataset: &Dataset) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(config)?);
        h.update(key.as_bytes());
        let name = format!("extractor-{}.bin", &hex::encode(h.finalize())[..16]);
        let path = cache_dir.join(name);
        if path.exists() {
            return Self::load(&path, config);
        }
        std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
        let ex = Self::train(config, dataset)?;
        ex.save(&path)?;
        Ok(ex)
    }

    /// Top-1 accuracy of the classifier head.
    pub fn accuracy(&self, samples: &[Sample]) -> Result<f64> {
        let mut correct = 0;
        for chunk in samples.chunks(EVAL_CHUNK) {
            let imgs = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>(), DType::F32, &Device::Cpu)?;
            let preds: Vec<u32> = self.head.forward(&self.forward_features(&imgs)?)?.argmax(D::Minus1)?.to_vec1()?;
            correct += preds.iter().zip(chunk).filter(|(p, s)| **p as usize == s.class_id).count();
        }
        Ok(correct as f64 / samples.len().max(1) as f64)
    }
}

impl FeatureExtractor for ReferenceExtractor {
    fn features(&self, images: &Tensor) -> Result<Tensor> {
        self.forward_features(images)
    }

    fn hash(&self) -> String {
        self.hash.clone()
    }
}

/// Feature matrix of `images` in chunks.
pub fn extract_features(ex: &dyn FeatureExtractor, images: &[&ImageBuf]) -> Result<DMatrix<f64>> {
    let mut parts = Vec::new();
    for chunk in images.chunks(EVAL_CHUNK) {
        parts.push(ex.features(&stack_images(chunk, DType::F32, &Device::Cpu)?)?.detach());
    }
    tensor_to_matrix(&Tensor::cat(&parts, 0)?)
}

// ---------------------------------------------------------------------------
// Metrics record

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub psnr_mean: f64,
    #[serde(rename = "frechet_rec_proxy")]
    pub frechet_rec: f64,
    pub linprobe_acc: f64,
    pub zeroshot_acc: f64,
    #[serde(rename = "frechet_gen_proxy")]
    pub frechet_gen: Option<f64>,
    pub frechet_gen_samples: Option<usize>,
    pub latent_mean: Vec<f64>,
    pub latent_std: Vec<f64>,
    pub extractor_hash: String,
    pub dit_hash: Option<String>,
    pub tokenizer_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out images for PSNR and the reconstruction Fréchet proxy.
    pub n_eval: usize,
    pub n_probe_train: usize,
    pub n_probe_test: usize,
    /// Training images used for latent statistics.
    pub n_stats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_eval: 512,
            n_probe_train: 1024,
            n_probe_test: 512,
            n_stats: 256,
        }
    }
}

/// Held-out evaluation splits: `(eval, probe_train, probe_test)`.
pub fn eval_splits(dataset: &Dataset, cfg: &EvalConfig) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    match dataset {
        Dataset::Synthetic(d) => {
            let total = cfg.n_eval + cfg.n_probe_train + cfg.n_probe_test;
            let held = heldout_synthetic(d, total);
            let all: Vec<Sample> = held.iter().collect();
            let (eval, rest) = all.split_at(cfg.n_eval);
            let (train, test) = rest.split_at(cfg.n_probe_train);
            Ok((eval.to_vec(), train.to_vec(), test.to_vec()))
        }
        Dataset::InMemory { samples, .. } => {
            // last fifth is held out; the probe trains on the rest
            let cut = samples.len() - samples.len() / 5;
            let (train, test) = samples.split_at(cut);
            Ok((test.to_vec(), train.to_vec(), test.to_vec()))
        }
    }
}

pub fn classnames(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(class_name).collect()
}

/// Mean-pooled bottleneck latents `[N, d]`.
pub fn pooled_latents(model: &TokenizerModel, samples: &[Sample]) -> Result<DMatrix<f64>> {
    let mut parts = Vec::new();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let imgs = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>(), model.dtype(), model.device())?;
        parts.push(model.encode_batch(&imgs, None)?.latent.mean(1)?.detach());
    }
    tensor_to_matrix(&Tensor::cat(&parts, 0)?)
}

/// Content hash of every trainable tensor of the model.
pub fn model_hash(model: &TokenizerModel) -> Result<String> {
    archive::content_hash(&model.store.snapshot("")?)
}

/// Reconstruction and understanding metrics on held-out data. The generation
/// proxy is left empty for the harness to fill.
pub fn evaluate(
    model: &TokenizerModel,
    vocab: &Vocab,
    dataset: &Dataset,
    extractor: &dyn FeatureExtractor,
    cfg: &EvalConfig,
) -> Result<MetricsRecord> {
    let before = model_hash(model)?;
    let (eval_set, probe_train, probe_test) = eval_splits(dataset, cfg)?;

    let mut recs: Vec<ImageBuf> = Vec::with_capacity(eval_set.len());
    let mut psnr_sum = 0.0;
    for chunk in eval_set.chunks(EVAL_CHUNK) {
        let imgs = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>(), model.dtype(), model.device())?;
        let enc = model.encode_batch(&imgs, None)?;
        let out = model.decode_tokens(&enc.latent, enc.grid)?;
        psnr_sum += psnr(&imgs, &out)? * chunk.len() as f64;
        for i in 0..chunk.len() {
            recs.push(ImageBuf::from_tensor(&out.get(i)?)?);
        }
    }
    let psnr_mean = psnr_sum / eval_set.len().max(1) as f64;
    let real = extract_features(extractor, &eval_set.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let fake = extract_features(extractor, &recs.iter().collect::<Vec<_>>())?;
    let frechet_rec = frechet(&real, &fake)?;

    let ytr: Vec<usize> = probe_train.iter().map(|s| s.class_id).collect();
    let yte: Vec<usize> = probe_test.iter().map(|s| s.class_id).collect();
    let linprobe_acc = linear_probe(
        &pooled_latents(model, &probe_train)?,
        &ytr,
        &pooled_latents(model, &probe_test)?,
        &yte,
        dataset.num_classes(),
    )?;
    let zeroshot_acc = zero_shot(model, vocab, &classnames(dataset.num_classes()), &ZERO_SHOT_TEMPLATES, &probe_test)?;

    let stats_samples: Vec<Sample> = (0..cfg.n_stats.min(dataset.len())).map(|i| dataset.get(i)).collect();
    let stats = latent_stats(model, &stats_samples)?;
    if model_hash(model)? != before {
        bail!(InvalidArgument, "evaluation mutated model parameters");
    }
    Ok(MetricsRecord {
        schema_version: METRICS_SCHEMA_VERSION,
        psnr_mean,
        frechet_rec,
        linprobe_acc,
        zeroshot_acc,
        frechet_gen: None,
        frechet_gen_samples: None,
        latent_mean: stats.mean,
        latent_std: stats.std,
        extractor_hash: extractor.hash(),
        dit_hash: None,
        tokenizer_hash: before,
    })
}

/// Chance-level tolerance helper: `3·sqrt(p(1−p)/n)`.
pub fn three_sigma(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

/// Identity feature map over flattened pixels; useful for toy comparisons.
pub struct FlattenExtractor;

impl FeatureExtractor for FlattenExtractor {
    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.dim(0)?;
        Ok(images.reshape((b, ()))?.to_dtype(DType::F32)?)
    }

    fn hash(&self) -> String {
        "flatten".into()
    }
}
