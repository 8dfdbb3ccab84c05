//! Captioned image data: a procedural shapes dataset, folder ingestion,
//! multi-crop views, block masks for masked modeling, per-objective batch
//! plans and a word-level caption tokenizer.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, Rgb32FImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::model::{BOS_ID, EOS_ID, PAD_ID, UNK_ID};
use crate::rng::{stream_rng, Stream};

/// CHW image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn filled(h: usize, w: usize, v: f32) -> Self {
        Self {
            h,
            w,
            data: vec![v; 3 * h * w],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn to_tensor(&self, dtype: DType, dev: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (3, self.h, self.w), dev)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            bail!(Shape, "expected 3 channels, got {c}");
        }
        Ok(Self {
            h,
            w,
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
        })
    }

    fn to_rgb32f(&self) -> Rgb32FImage {
        ImageBuffer::from_fn(self.w as u32, self.h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([0, 1, 2].map(|c| (self.at(c, y, x) + 1.0) * 0.5))
        })
    }

    fn from_rgb32f(img: &Rgb32FImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::filled(h, w, 0.0);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, (p.0[c] * 2.0 - 1.0).clamp(-1.0, 1.0));
            }
        }
        out
    }

    /// Crops `(x, y, w, h)` in pixels and resizes to `out_h × out_w` (bilinear).
    pub fn crop_resize(&self, crop: (usize, usize, usize, usize), out_h: usize, out_w: usize) -> Self {
        let (x, y, w, h) = crop;
        if (x, y, w, h) == (0, 0, self.w, self.h) && (out_h, out_w) == (self.h, self.w) {
            return self.clone();
        }
        let img = self.to_rgb32f();
        let cropped = image::imageops::crop_imm(&img, x as u32, y as u32, w as u32, h as u32).to_image();
        let resized = image::imageops::resize(&cropped, out_w as u32, out_h as u32, FilterType::Triangle);
        Self::from_rgb32f(&resized)
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Self {
        self.crop_resize((0, 0, self.w, self.h), out_h, out_w)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.set(c, y, x, self.at(c, y, self.w - 1 - x));
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_fn(self.w as u32, self.h as u32, |x, y| {
            Rgb([0, 1, 2].map(|c| (((self.at(c, y as usize, x as usize) + 1.0) * 127.5).round().clamp(0.0, 255.0)) as u8))
        });
        img.save(path)?;
        Ok(())
    }
}

/// Stacks images of identical size into `[B, 3, H, W]`.
pub fn stack_images(images: &[&ImageBuf], dtype: DType, dev: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        bail!(InvalidArgument, "cannot stack an empty image list");
    };
    let (h, w) = (first.h, first.w);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.h, img.w) != (h, w) {
            bail!(Shape, "cannot stack {}x{} with {h}x{w}", img.h, img.w);
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), dev)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageBuf,
    pub caption: String,
    pub class_id: usize,
}

// ---------------------------------------------------------------------------
// Synthetic shapes

pub const GRAMMAR_VERSION: u32 = 1;
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "orange", "cyan", "pink"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const BACKGROUNDS: [&str; 2] = ["dark", "light"];
pub const MAX_CLASSES: usize = SHAPES.len() * COLORS.len();

const RGB: [[f32; 3]; 8] = [
    [0.95, 0.12, 0.12],
    [0.12, 0.80, 0.22],
    [0.15, 0.30, 0.98],
    [0.97, 0.88, 0.12],
    [0.58, 0.20, 0.80],
    [0.98, 0.55, 0.08],
    [0.12, 0.85, 0.88],
    [0.98, 0.48, 0.72],
];

const TEMPLATES: [&str; 5] = [
    "a {size} {color} {shape} on a {bg} background",
    "a photo of a {size} {color} {shape}",
    "a {color} {shape} , {bg} background",
    "there is a {size} {color} {shape} on {bg}",
    "an image of a {color} {shape}",
];

/// Class id ↔ (shape, color): `class = color · |SHAPES| + shape`.
pub fn class_attributes(class_id: usize) -> (usize, usize) {
    (class_id % SHAPES.len(), class_id / SHAPES.len())
}

pub fn class_name(class_id: usize) -> String {
    let (s, c) = class_attributes(class_id);
    format!("{} {}", COLORS[c], SHAPES[s])
}

/// Recovers the class from a caption by reading its color and shape words.
pub fn class_from_caption(caption: &str) -> Option<usize> {
    let words: Vec<String> = split_words(caption);
    let shape = SHAPES.iter().position(|s| words.iter().any(|w| w == s))?;
    let color = COLORS.iter().position(|c| words.iter().any(|w| w == c))?;
    Some(color * SHAPES.len() + shape)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub seed: u64,
    pub n: usize,
    pub num_classes: usize,
    pub image_size: usize,
}

pub fn synth_dataset(seed: u64, n: usize, num_classes: usize, image_size: usize) -> Result<SynthDataset> {
    if num_classes == 0 || num_classes > MAX_CLASSES {
        bail!(Dataset, "num_classes must be in 1..={MAX_CLASSES}, got {num_classes}");
    }
    if n < num_classes {
        bail!(Dataset, "need n >= num_classes ({n} < {num_classes})");
    }
    if image_size < 8 {
        bail!(Dataset, "image_size {image_size} too small to render shapes");
    }
    Ok(SynthDataset {
        seed,
        n,
        num_classes,
        image_size,
    })
}

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.82 * r && dy.abs() <= 0.82 * r,
        2 => {
            // upward triangle with apex at -r and base at +0.7r
            let top = -r;
            let base = 0.7 * r;
            if dy < top || dy > base {
                return false;
            }
            let half = (dy - top) / (base - top) * r;
            dx.abs() <= half
        }
        _ => {
            let arm = 0.32 * r;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Class of sample `index`: each consecutive run of `num_classes` indices
    /// holds a seeded permutation of all classes.
    pub fn class_of(&self, index: usize) -> usize {
        let block = (index / self.num_classes) as u64;
        let mut perm: Vec<usize> = (0..self.num_classes).collect();
        perm.shuffle(&mut stream_rng(self.seed ^ 0x5EED_C1A5, Stream::Data, block));
        perm[index % self.num_classes]
    }

    /// Renders sample `index`; a pure function of `(seed, index)`.
    pub fn get(&self, index: usize) -> Sample {
        let class_id = self.class_of(index);
        let mut rng = stream_rng(self.seed, Stream::Data, index as u64);
        let (shape, color) = class_attributes(class_id);
        let size = rng.random_range(0..SIZES.len());
        let bg = rng.random_range(0..BACKGROUNDS.len());
        let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];

        let s = self.image_size as f32;
        let r = if size == 0 { 0.17 * s } else { 0.30 * s };
        let margin = r + 1.0;
        let cx = rng.random_range(margin..(s - margin).max(margin + 0.5));
        let cy = rng.random_range(margin..(s - margin).max(margin + 0.5));
        let base = if bg == 0 { 0.12f32 } else { 0.78 };
        let tint: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(-0.06..0.06));
        let grad: (f32, f32) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));

        let n = self.image_size;
        let mut img = ImageBuf::filled(n, n, 0.0);
        let col = RGB[color];
        for y in 0..n {
            for x in 0..n {
                let mut cover = 0.0f32;
                for sy in [0.25f32, 0.75] {
                    for sx in [0.25f32, 0.75] {
                        if inside(shape, x as f32 + sx - cx, y as f32 + sy - cy, r) {
                            cover += 0.25;
                        }
                    }
                }
                let ramp = grad.0 * (x as f32 / s - 0.5) + grad.1 * (y as f32 / s - 0.5);
                for c in 0..3 {
                    let texture: f32 = rng.random_range(-0.05..0.05);
                    let bgv = base + tint[c] + ramp + texture;
                    let fg = col[c] + 0.5 * texture;
                    let v = cover * fg + (1.0 - cover) * bgv;
                    img.set(c, y, x, (v.clamp(0.0, 1.0)) * 2.0 - 1.0);
                }
            }
        }
        let caption = template
            .replace("{size}", SIZES[size])
            .replace("{color}", COLORS[color])
            .replace("{shape}", SHAPES[shape])
            .replace("{bg}", BACKGROUNDS[bg]);
        Sample {
            image: img,
            caption,
            class_id,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Sample> + '_ {
        (0..self.n).map(|i| self.get(i))
    }

    /// Every caption the grammar can produce.
    pub fn grammar_corpus() -> Vec<String> {
        let mut out = Vec::new();
        for t in TEMPLATES {
            for size in SIZES {
                for color in COLORS {
                    for shape in SHAPES {
                        for bg in BACKGROUNDS {
                            out.push(
                                t.replace("{size}", size)
                                    .replace("{color}", color)
                                    .replace("{shape}", shape)
                                    .replace("{bg}", bg),
                            );
                        }
                    }
                }
            }
        }
        out
    }
}

/// Where a dataset comes from; serialized as the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetManifest {
    Synthetic {
        seed: u64,
        n: usize,
        num_classes: usize,
        image_size: usize,
        #[serde(default = "grammar_version")]
        grammar_version: u32,
    },
    Folder {
        path: PathBuf,
        image_size: usize,
        #[serde(default)]
        num_classes: usize,
    },
}

fn grammar_version() -> u32 {
    GRAMMAR_VERSION
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest::Synthetic {
            seed: 0,
            n: 8192,
            num_classes: 16,
            image_size: 64,
            grammar_version: GRAMMAR_VERSION,
        }
    }
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn open(&self) -> Result<Dataset> {
        match self {
            DatasetManifest::Synthetic {
                seed,
                n,
                num_classes,
                image_size,
                grammar_version,
            } => {
                if *grammar_version != GRAMMAR_VERSION {
                    bail!(Dataset, "grammar version {grammar_version} unsupported (have {GRAMMAR_VERSION})");
                }
                Ok(Dataset::Synthetic(synth_dataset(*seed, *n, *num_classes, *image_size)?))
            }
            DatasetManifest::Folder {
                path,
                image_size,
                num_classes,
            } => {
                let samples = load_folder(path, *image_size)?;
                let classes = (*num_classes).max(samples.iter().map(|s| s.class_id + 1).max().unwrap_or(1));
                Ok(Dataset::InMemory { samples, num_classes: classes })
            }
        }
    }

    pub fn with_size(&self, new_n: usize) -> Result<Self> {
        match self {
            DatasetManifest::Synthetic { .. } => {
                let mut m = self.clone();
                if let DatasetManifest::Synthetic { n, .. } = &mut m {
                    *n = new_n;
                }
                Ok(m)
            }
            DatasetManifest::Folder { .. } => Err(Error::Dataset("folder datasets cannot be resized".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Dataset {
    Synthetic(SynthDataset),
    InMemory { samples: Vec<Sample>, num_classes: usize },
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Synthetic(d) => d.n,
            Dataset::InMemory { samples, .. } => samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Dataset::Synthetic(d) => d.num_classes,
            Dataset::InMemory { num_classes, .. } => *num_classes,
        }
    }

    pub fn get(&self, index: usize) -> Sample {
        match self {
            Dataset::Synthetic(d) => d.get(index),
            Dataset::InMemory { samples, .. } => samples[index].clone(),
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            Dataset::Synthetic(d) => d.image_size,
            Dataset::InMemory { samples, .. } => samples.first().map(|s| s.image.h).unwrap_or(0),
        }
    }

    /// Captions to build a vocabulary from.
    pub fn corpus(&self) -> Vec<String> {
        match self {
            Dataset::Synthetic(_) => SynthDataset::grammar_corpus(),
            Dataset::InMemory { samples, .. } => samples.iter().map(|s| s.caption.clone()).collect(),
        }
    }
}

/// Held-out synthetic samples: same generator, disjoint seed stream.
pub fn heldout_synthetic(d: &SynthDataset, n: usize) -> SynthDataset {
    SynthDataset {
        seed: d.seed ^ 0xA5A5_5A5A_0F0F_F0F0,
        n,
        ..*d
    }
}

/// Dataset indices for training step `step`: epoch-wise shuffled order, a pure
/// function of `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut cache: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    (0..batch)
        .map(|i| {
            let pos = step * batch as u64 + i as u64;
            let epoch = pos / n as u64;
            let offset = (pos % n as u64) as usize;
            let perm = cache.entry(epoch).or_insert_with(|| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut stream_rng(seed, Stream::Epoch, epoch));
                p
            });
            perm[offset]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Views and masks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskingKind {
    #[default]
    Block,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub enabled: bool,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub local_views: usize,
    /// Local crop side as a fraction of the global resolution.
    pub local_fraction: f64,
    pub flip_prob: f64,
    pub jitter: f64,
    pub mask_ratio: f64,
    pub masking: MaskingKind,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            global_scale: (0.4, 1.0),
            local_scale: (0.1, 0.4),
            local_views: 4,
            local_fraction: 0.5,
            flip_prob: 0.5,
            jitter: 0.2,
            mask_ratio: 0.3,
            masking: MaskingKind::Block,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub global_views: Vec<ImageBuf>,
    pub local_views: Vec<ImageBuf>,
    /// Row-major mask over the token grid of global view 1.
    pub mim_mask: Vec<bool>,
    pub mask_grid: (usize, usize),
    pub mask_ratio: f64,
}

/// Number of masked cells for `ratio` over `tokens` cells, rounding half up;
/// at least one when `ratio > 0`.
pub fn mask_count(ratio: f64, tokens: usize) -> usize {
    let n = ((ratio * tokens as f64) + 0.5 + 1e-9).floor() as usize;
    if ratio > 0.0 && tokens > 1 {
        n.clamp(1, tokens - 1)
    } else {
        n
    }
}

fn random_crop<R: Rng>(rng: &mut R, h: usize, w: usize, scale: (f64, f64)) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let log_ratio = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
        let ar = log_ratio.exp();
        let cw = (target * ar).sqrt().round() as usize;
        let ch = (target / ar).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            return (x, y, cw, ch);
        }
    }
    let side = ((area * scale.1).sqrt().round() as usize).clamp(1, h.min(w));
    ((w - side) / 2, (h - side) / 2, side, side)
}

fn jitter<R: Rng>(img: &mut ImageBuf, rng: &mut R, strength: f64) {
    if strength <= 0.0 {
        return;
    }
    let s = strength as f32;
    let brightness: f32 = rng.random_range(-s..=s);
    let contrast: f32 = 1.0 + rng.random_range(-s..=s);
    for v in img.data.iter_mut() {
        *v = (*v * contrast + brightness).clamp(-1.0, 1.0);
    }
}

fn augment<R: Rng>(img: &ImageBuf, aug: &AugConfig, rng: &mut R, scale: (f64, f64), out: usize) -> ImageBuf {
    let crop = random_crop(rng, img.h, img.w, scale);
    let mut v = img.crop_resize(crop, out, out);
    if rng.random::<f64>() < aug.flip_prob {
        v = v.flip_horizontal();
    }
    jitter(&mut v, rng, aug.jitter);
    v
}

/// Two global crops at full resolution, `local_views` smaller crops, and a
/// mask over the token grid of the first global view.
pub fn make_views<R: Rng>(sample: &Sample, aug: &AugConfig, patch_size: usize, rng: &mut R) -> Result<ViewSet> {
    let res = sample.image.h;
    if sample.image.w != res || res % patch_size != 0 {
        bail!(Shape, "view generation expects a square image divisible by {patch_size}, got {}x{}", res, sample.image.w);
    }
    let local_res = ((res as f64 * aug.local_fraction).round() as usize / patch_size).max(1) * patch_size;
    let (global_views, local_views) = if aug.enabled {
        let g = (0..2).map(|_| augment(&sample.image, aug, rng, aug.global_scale, res)).collect();
        let l = (0..aug.local_views)
            .map(|_| augment(&sample.image, aug, rng, aug.local_scale, local_res))
            .collect();
        (g, l)
    } else {
        let g = vec![sample.image.clone(), sample.image.clone()];
        let l = (0..aug.local_views).map(|_| sample.image.resize(local_res, local_res)).collect();
        (g, l)
    };
    let grid = (res / patch_size, res / patch_size);
    let mim_mask = match aug.masking {
        MaskingKind::Block => block_mask(grid, aug.mask_ratio, rng)?,
        MaskingKind::Random => random_mask(grid, aug.mask_ratio, rng)?,
    };
    Ok(ViewSet {
        global_views,
        local_views,
        mim_mask,
        mask_grid: grid,
        mask_ratio: aug.mask_ratio,
    })
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        bail!(InvalidArgument, "mask ratio {ratio} outside [0, 1)");
    }
    Ok(())
}

pub const MAX_MASK_BLOCKS: usize = 4;

/// Block-wise mask with exactly `round(ratio·T)` cells: up to
/// [`MAX_MASK_BLOCKS`] random rectangles, then growth along the mask boundary.
pub fn block_mask<R: Rng>(grid: (usize, usize), ratio: f64, rng: &mut R) -> Result<Vec<bool>> {
    check_ratio(ratio)?;
    let (gh, gw) = grid;
    let total = gh * gw;
    let target = mask_count(ratio, total);
    let mut mask = vec![false; total];
    let mut count = 0;
    let mut blocks = 0;
    let mut attempts = 0;
    while count < target && blocks < MAX_MASK_BLOCKS && attempts < 40 {
        attempts += 1;
        let remaining = target - count;
        let min_area = remaining.min(4).max(1);
        let area = rng.random_range(min_area..=remaining) as f64;
        let ar = rng.random_range((0.3f64).ln()..=(1.0f64 / 0.3).ln()).exp();
        let bh = ((area * ar).sqrt().round() as usize).clamp(1, gh);
        let bw = ((area / ar).sqrt().round() as usize).clamp(1, gw);
        let top = rng.random_range(0..=gh - bh);
        let left = rng.random_range(0..=gw - bw);
        let mut added = 0;
        for y in top..top + bh {
            for x in left..left + bw {
                let i = y * gw + x;
                if count < target && !mask[i] {
                    mask[i] = true;
                    count += 1;
                    added += 1;
                }
            }
        }
        if added > 0 {
            blocks += 1;
        }
    }
    while count < target {
        let frontier: Vec<usize> = (0..total)
            .filter(|&i| !mask[i])
            .filter(|&i| {
                let (y, x) = (i / gw, i % gw);
                (y > 0 && mask[i - gw]) || (y + 1 < gh && mask[i + gw]) || (x > 0 && mask[i - 1]) || (x + 1 < gw && mask[i + 1])
            })
            .collect();
        let pick = if frontier.is_empty() {
            (0..total).find(|&i| !mask[i]).expect("ratio < 1 leaves an unmasked cell")
        } else {
            frontier[rng.random_range(0..frontier.len())]
        };
        mask[pick] = true;
        count += 1;
    }
    Ok(mask)
}

/// Uniformly random mask with exactly `round(ratio·T)` cells.
pub fn random_mask<R: Rng>(grid: (usize, usize), ratio: f64, rng: &mut R) -> Result<Vec<bool>> {
    check_ratio(ratio)?;
    let total = grid.0 * grid.1;
    let target = mask_count(ratio, total);
    let mut mask = vec![false; total];
    for i in rand::seq::index::sample(rng, total, target) {
        mask[i] = true;
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Batch planning

/// Sample indices assigned to each objective within one batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub clip: Vec<usize>,
    pub ssl: Vec<usize>,
    pub rec: Vec<usize>,
}

/// Contrastive uses the full batch; the self-supervised and reconstruction
/// subsets are independent uniform draws without replacement.
pub fn plan_batch<R: Rng>(b: usize, b_ssl: usize, b_rec: usize, rng: &mut R) -> Result<BatchPlan> {
    if b_ssl > b || b_rec > b {
        bail!(InvalidArgument, "sub-batch sizes ({b_ssl}, {b_rec}) exceed batch {b}");
    }
    let draw = |rng: &mut R, k: usize| {
        let mut v = rand::seq::index::sample(rng, b, k).into_vec();
        v.sort_unstable();
        v
    };
    let ssl = draw(rng, b_ssl);
    let rec = draw(rng, b_rec);
    Ok(BatchPlan {
        clip: (0..b).collect(),
        ssl,
        rec,
    })
}

// ---------------------------------------------------------------------------
// Tokenizer

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Lowercased words and punctuation joined by single spaces.
pub fn normalize_caption(caption: &str) -> String {
    split_words(caption).join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `[BOS, words…, EOS]`.
    pub fn tokenize(&self, caption: &str) -> Vec<u32> {
        let mut ids = vec![BOS_ID];
        ids.extend(split_words(caption).iter().map(|w| self.id(w)));
        ids.push(EOS_ID);
        ids
    }

    /// Inverse of [`Vocab::tokenize`] up to normalization; special ids are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id >= UNK_ID)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.tokens)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = serde_json::from_str(&text)?;
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            bail!(Dataset, "vocabulary file {} lacks the reserved tokens", path.display());
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Reserved tokens followed by the sorted distinct words of `corpus`.
pub fn build_vocab<S: AsRef<str>>(corpus: impl IntoIterator<Item = S>) -> Vocab {
    let mut words: Vec<String> = corpus.into_iter().flat_map(|c| split_words(c.as_ref())).collect();
    words.sort();
    words.dedup();
    words.retain(|w| !RESERVED.contains(&w.as_str()));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(words);
    Vocab::from_tokens(tokens)
}

/// Pads (or truncates, keeping a final EOS) to `max_len`. Returns the flat
/// `[B·max_len]` ids and the final-token position of each row.
pub fn pad_batch(seqs: &[Vec<u32>], max_len: usize) -> (Vec<u32>, Vec<usize>) {
    let mut flat = Vec::with_capacity(seqs.len() * max_len);
    let mut last = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut row: Vec<u32> = if s.len() > max_len {
            let mut r = s[..max_len].to_vec();
            r[max_len - 1] = EOS_ID;
            r
        } else {
            s.clone()
        };
        if row.is_empty() {
            row.push(BOS_ID);
        }
        last.push(row.len() - 1);
        row.resize(max_len, PAD_ID);
        flat.extend(row);
    }
    (flat, last)
}

// ---------------------------------------------------------------------------
// Folder ingestion

pub const CAPTIONS_FILE: &str = "captions.tsv";

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp" | "gif" | "webp")
    )
}

/// Reads `dir/captions.tsv` (`filename<TAB>caption[<TAB>class]`) and the images it
/// names, resized on the short side and center-cropped to `image_size`, in
/// lexicographic filename order. Rows without a class get class 0.
pub fn load_folder(dir: &Path, image_size: usize) -> Result<Vec<Sample>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut images: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_file() && is_image(&p) {
            images.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    let tsv = dir.join(CAPTIONS_FILE);
    if images.is_empty() && !tsv.exists() {
        return Ok(Vec::new());
    }
    let mut rows: BTreeMap<String, (String, usize)> = BTreeMap::new();
    if tsv.exists() {
        let text = std::fs::read_to_string(&tsv).map_err(|e| Error::io(&tsv, e))?;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 2 || cols[1].trim().is_empty() {
                bail!(Dataset, "{}:{}: expected filename<TAB>caption", tsv.display(), lineno + 1);
            }
            let class = match cols.get(2) {
                Some(c) if !c.trim().is_empty() => c
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Dataset(format!("{}:{}: bad class {c:?}", tsv.display(), lineno + 1)))?,
                _ => 0,
            };
            let name = cols[0].trim().to_string();
            if !dir.join(&name).is_file() {
                bail!(Dataset, "{}:{}: row {name:?} has no matching image file", tsv.display(), lineno + 1);
            }
            rows.insert(name, (cols[1].trim().to_string(), class));
        }
    }
    images.sort();
    let mut out = Vec::with_capacity(images.len());
    for name in images {
        let Some((caption, class_id)) = rows.get(&name).cloned() else {
            bail!(Dataset, "missing caption row for {name}");
        };
        let path = dir.join(&name);
        let img = image::open(&path).map_err(|e| Error::Dataset(format!("unreadable image {}: {e}", path.display())))?;
        let img = img.to_rgb32f();
        let (w, h) = (img.width() as f64, img.height() as f64);
        let scale = image_size as f64 / w.min(h);
        let (nw, nh) = (((w * scale).round() as u32).max(image_size as u32), ((h * scale).round() as u32).max(image_size as u32));
        let resized = image::imageops::resize(&img, nw, nh, FilterType::Triangle);
        let x = (nw - image_size as u32) / 2;
        let y = (nh - image_size as u32) / 2;
        let crop = image::imageops::crop_imm(&resized, x, y, image_size as u32, image_size as u32).to_image();
        out.push(Sample {
            image: ImageBuf::from_rgb32f(&crop),
            caption,
            class_id,
        });
    }
    Ok(out)
}
