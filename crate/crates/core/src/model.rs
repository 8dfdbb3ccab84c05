//! Tokenizer architecture: ViT encoder with a per-token latent bottleneck, a
//! ViT pixel decoder ending in pixel shuffle, a causal text encoder, the
//! contrastive projections and the self-distillation head. Also holds the EMA
//! teacher and the analytic parameter/FLOP model.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::nn::{self, Block, Builder, BuilderRoot, Init, LayerNorm, Linear, ParamStore};
use crate::rng::{stream_rng, Stream};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

/// Which encoder features feed the contrastive and self-distillation branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SemanticTap {
    /// Tokens after the latent bottleneck (`d` channels).
    #[default]
    PostBottleneck,
    /// Encoder tokens before the bottleneck (`encoder_width` channels).
    PreBottleneck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub latent_dim: usize,
    pub encoder_depth: usize,
    pub encoder_width: usize,
    pub encoder_heads: usize,
    pub decoder_blocks: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub text_depth: usize,
    pub text_width: usize,
    pub text_heads: usize,
    pub text_max_len: usize,
    pub vocab_size: usize,
    pub dino_prototypes: usize,
    pub dino_hidden: usize,
    pub clip_embed_dim: usize,
    pub mlp_ratio: usize,
    pub use_qknorm: bool,
    pub semantic_tap: SemanticTap,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let (encoder_width, encoder_depth, encoder_heads) = EncoderTier::B.dims();
        Self {
            image_size: 64,
            patch_size: 16,
            latent_dim: 16,
            encoder_depth,
            encoder_width,
            encoder_heads,
            decoder_blocks: 4,
            decoder_width: 256,
            decoder_heads: 4,
            text_depth: 4,
            text_width: 128,
            text_heads: 4,
            text_max_len: 16,
            vocab_size: 512,
            dino_prototypes: 1024,
            dino_hidden: 256,
            clip_embed_dim: 128,
            mlp_ratio: 4,
            use_qknorm: true,
            semantic_tap: SemanticTap::PostBottleneck,
        }
    }
}

/// Scaled-down encoder sizes used for the encoder-scaling axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderTier {
    S,
    B,
    L,
}

impl EncoderTier {
    /// `(width, depth, heads)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            EncoderTier::S => (128, 4, 4),
            EncoderTier::B => (256, 6, 4),
            EncoderTier::L => (512, 8, 8),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S" => Ok(EncoderTier::S),
            "B" => Ok(EncoderTier::B),
            "L" => Ok(EncoderTier::L),
            other => Err(Error::Config(format!("unknown encoder tier {other:?}"))),
        }
    }
}

impl ModelConfig {
    /// Symmetric ViT-B autoencoder at 256px, patch 16, 64 latent channels.
    pub fn vit_b_f16d64() -> Self {
        Self::symmetric(768, 12, 12)
    }

    /// Symmetric ViT-L autoencoder at 256px, patch 16, 64 latent channels.
    pub fn vit_l_f16d64() -> Self {
        Self::symmetric(1024, 24, 16)
    }

    fn symmetric(width: usize, depth: usize, heads: usize) -> Self {
        Self {
            image_size: 256,
            patch_size: 16,
            latent_dim: 64,
            encoder_depth: depth,
            encoder_width: width,
            encoder_heads: heads,
            decoder_blocks: depth,
            decoder_width: width,
            decoder_heads: heads,
            use_qknorm: false,
            ..Self::default()
        }
    }

    pub fn with_encoder_tier(mut self, tier: EncoderTier) -> Self {
        let (w, d, h) = tier.dims();
        self.encoder_width = w;
        self.encoder_depth = d;
        self.encoder_heads = h;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            bail!(Config, "image_size {} must be a positive multiple of patch_size {}", self.image_size, self.patch_size);
        }
        if self.latent_dim == 0 {
            bail!(Config, "latent_dim must be positive");
        }
        for (name, w, h) in [
            ("encoder", self.encoder_width, self.encoder_heads),
            ("decoder", self.decoder_width, self.decoder_heads),
            ("text", self.text_width, self.text_heads),
        ] {
            if w == 0 || h == 0 || w % h != 0 {
                bail!(Config, "{name} width {w} must be divisible by {h} heads");
            }
        }
        if self.vocab_size <= UNK_ID as usize {
            bail!(Config, "vocab_size must exceed the reserved ids");
        }
        if self.text_max_len < 2 {
            bail!(Config, "text_max_len must hold at least BOS and EOS");
        }
        if self.dino_prototypes == 0 || self.clip_embed_dim == 0 || self.mlp_ratio == 0 {
            bail!(Config, "dino_prototypes, clip_embed_dim and mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Channel count of the features the semantic branches consume.
    pub fn semantic_dim(&self) -> usize {
        match self.semantic_tap {
            SemanticTap::PostBottleneck => self.latent_dim,
            SemanticTap::PreBottleneck => self.encoder_width,
        }
    }

    /// Token grid for an `h × w` image.
    pub fn grid_for(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.patch_size;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            bail!(Shape, "image {h}x{w} is not divisible by patch size {f}");
        }
        Ok((h / f, w / f))
    }
}

/// A single image's latent: `[d, H/f, W/f]`.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    pub values: Tensor,
    pub source_resolution: (usize, usize),
}

impl LatentGrid {
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        Ok(self.values.dims3()?)
    }
}

/// `[B, 3, H, W]` → `[B, T, 3·f·f]`.
pub fn patchify(images: &Tensor, f: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    let (gh, gw) = (h / f, w / f);
    Ok(images
        .reshape(vec![b, c, gh, f, gw, f])?
        .permute(vec![0, 2, 4, 1, 3, 5])?
        .reshape((b, gh * gw, c * f * f))?)
}

/// Pixel shuffle: `[B, T, 3·f·f]` → `[B, 3, gh·f, gw·f]`.
pub fn unpatchify(tokens: &Tensor, f: usize, grid: (usize, usize)) -> Result<Tensor> {
    let (b, t, cff) = tokens.dims3()?;
    let (gh, gw) = grid;
    if t != gh * gw || cff % (f * f) != 0 {
        bail!(Shape, "cannot unpatchify {:?} onto grid {grid:?} with patch {f}", tokens.dims());
    }
    let c = cff / (f * f);
    Ok(tokens
        .reshape(vec![b, gh, gw, c, f, f])?
        .permute(vec![0, 3, 1, 4, 2, 5])?
        .reshape((b, c, gh * f, gw * f))?)
}

/// `[B, T, d]` → `[B, d, gh, gw]`.
pub fn tokens_to_grid(tokens: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (b, t, d) = tokens.dims3()?;
    if t != grid.0 * grid.1 {
        bail!(Shape, "{t} tokens do not fill grid {grid:?}");
    }
    Ok(tokens.transpose(1, 2)?.reshape((b, d, grid.0, grid.1))?)
}

/// `[B, d, gh, gw]` → `[B, T, d]`.
pub fn grid_to_tokens(grid: &Tensor) -> Result<Tensor> {
    let (b, d, gh, gw) = grid.dims4()?;
    Ok(grid.reshape((b, d, gh * gw))?.transpose(1, 2)?.contiguous()?)
}

/// Learned positional table over a `side × side` grid, average-pooled onto
/// smaller grids that divide it.
fn positions_for(pos: &Tensor, side: usize, grid: (usize, usize)) -> Result<Tensor> {
    if grid == (side, side) {
        return Ok(pos.clone());
    }
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || side % gh != 0 || side % gw != 0 {
        bail!(Shape, "token grid {grid:?} does not divide the positional grid {side}x{side}");
    }
    let width = pos.dim(1)?;
    let img = pos.t()?.reshape((1, width, side, side))?;
    let pooled = img.avg_pool2d((side / gh, side / gw))?;
    Ok(pooled.reshape((width, gh * gw))?.t()?.contiguous()?)
}

/// Encoder activations for a batch.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Final-norm encoder tokens `[B, T, width]`.
    pub pre: Tensor,
    /// Bottleneck latents `[B, T, d]`.
    pub latent: Tensor,
    pub grid: (usize, usize),
}

impl EncoderOutput {
    pub fn semantic(&self, tap: SemanticTap) -> &Tensor {
        match tap {
            SemanticTap::PostBottleneck => &self.latent,
            SemanticTap::PreBottleneck => &self.pre,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub patch_embed: Linear,
    pub pos_embed: Tensor,
    pub mask_token: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub bottleneck: Linear,
    patch_size: usize,
    side: usize,
}

impl VisionEncoder {
    pub fn new(b: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.encoder_width;
        let blocks = (0..cfg.encoder_depth)
            .map(|i| Block::new(&b.pp(format!("blocks.{i}")), w, cfg.encoder_heads, cfg.mlp_ratio, cfg.use_qknorm))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_embed: Linear::with_init(&b.pp("patch_embed"), cfg.patch_dim(), w, Init::FanIn(1.0), true)?,
            pos_embed: b.get("pos_embed", &[cfg.num_tokens(), w], Init::TruncNormal(0.02))?,
            mask_token: b.get("mask_token", &[w], Init::TruncNormal(0.02))?,
            blocks,
            norm: LayerNorm::new(&b.pp("norm"), w)?,
            bottleneck: Linear::new(&b.pp("bottleneck"), w, cfg.latent_dim)?,
            patch_size: cfg.patch_size,
            side: cfg.grid_side(),
        })
    }

    /// `images`: `[B, 3, H, W]`. `mask`: optional `[B, T]` with 1 where the
    /// token is replaced by the learned mask embedding.
    pub fn forward(&self, images: &Tensor, mask: Option<&Tensor>) -> Result<EncoderOutput> {
        let (_, c, h, w) = images.dims4()?;
        let f = self.patch_size;
        if c != 3 {
            bail!(Shape, "expected 3 channels, got {c}");
        }
        if h % f != 0 || w % f != 0 {
            bail!(Shape, "image {h}x{w} is not divisible by patch size {f}");
        }
        let grid = (h / f, w / f);
        let mut x = self.patch_embed.forward(&patchify(images, f)?)?;
        if let Some(m) = mask {
            if m.dims() != &x.dims()[..2] {
                bail!(Shape, "mask {:?} does not match tokens {:?}", m.dims(), x.dims());
            }
            let m = m.to_dtype(x.dtype())?.unsqueeze(2)?;
            let keep = (1.0 - &m)?;
            x = (x.broadcast_mul(&keep)? + m.broadcast_mul(&self.mask_token)?)?;
        }
        x = x.broadcast_add(&positions_for(&self.pos_embed, self.side, grid)?)?;
        for blk in &self.blocks {
            x = blk.forward(&x, None)?;
        }
        let pre = self.norm.forward(&x)?;
        let latent = self.bottleneck.forward(&pre)?;
        Ok(EncoderOutput { pre, latent, grid })
    }
}

#[derive(Debug, Clone)]
pub struct PixelDecoder {
    pub lift: Linear,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
    patch_size: usize,
    side: usize,
    latent_dim: usize,
}

impl PixelDecoder {
    pub fn new(b: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.decoder_width;
        let blocks = (0..cfg.decoder_blocks)
            .map(|i| Block::new(&b.pp(format!("blocks.{i}")), w, cfg.decoder_heads, cfg.mlp_ratio, cfg.use_qknorm))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lift: Linear::new(&b.pp("lift"), cfg.latent_dim, w)?,
            pos_embed: b.get("pos_embed", &[cfg.num_tokens(), w], Init::TruncNormal(0.02))?,
            blocks,
            norm: LayerNorm::new(&b.pp("norm"), w)?,
            head: Linear::new(&b.pp("head"), w, cfg.patch_dim())?,
            patch_size: cfg.patch_size,
            side: cfg.grid_side(),
            latent_dim: cfg.latent_dim,
        })
    }

    /// `latent`: `[B, T, d]` tokens over `grid`. Returns `[B, 3, H, W]` in `[-1, 1]`.
    pub fn forward(&self, latent: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let d = latent.dim(D::Minus1)?;
        if d != self.latent_dim {
            bail!(Shape, "latent has {d} channels, decoder expects {}", self.latent_dim);
        }
        let mut x = self.lift.forward(latent)?;
        x = x.broadcast_add(&positions_for(&self.pos_embed, self.side, grid)?)?;
        for blk in &self.blocks {
            x = blk.forward(&x, None)?;
        }
        let px = self.head.forward(&self.norm.forward(&x)?)?;
        Ok(unpatchify(&px, self.patch_size, grid)?.tanh()?)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    max_len: usize,
}

impl TextEncoder {
    pub fn new(b: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.text_width;
        let blocks = (0..cfg.text_depth)
            .map(|i| Block::new(&b.pp(format!("blocks.{i}")), w, cfg.text_heads, cfg.mlp_ratio, cfg.use_qknorm))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tok_embed: b.get("tok_embed", &[cfg.vocab_size, w], Init::TruncNormal(0.02))?,
            pos_embed: b.get("pos_embed", &[cfg.text_max_len, w], Init::TruncNormal(0.01))?,
            blocks,
            norm: LayerNorm::new(&b.pp("norm"), w)?,
            max_len: cfg.text_max_len,
        })
    }

    /// `ids`: `[B, L]` u32, `last`: index of the final (EOS) token per row.
    /// Returns the final-token features `[B, width]`. Attention is causal, so
    /// padding after the final token has no influence.
    pub fn forward(&self, ids: &Tensor, last: &[usize]) -> Result<Tensor> {
        let (bsz, len) = ids.dims2()?;
        if len > self.max_len {
            bail!(Shape, "sequence length {len} exceeds max {}", self.max_len);
        }
        if last.len() != bsz || last.iter().any(|&p| p >= len) {
            bail!(Shape, "final-token positions {last:?} invalid for {bsz}x{len}");
        }
        let w = self.tok_embed.dim(1)?;
        let x = self.tok_embed.index_select(&ids.flatten_all()?, 0)?.reshape((bsz, len, w))?;
        let mut x = x.broadcast_add(&self.pos_embed.i(..len)?)?;
        let mask = nn::causal_mask(len, x.dtype(), x.device())?;
        for blk in &self.blocks {
            x = blk.forward(&x, Some(&mask))?;
        }
        let x = self.norm.forward(&x)?.reshape((bsz * len, w))?;
        let rows: Vec<u32> = last.iter().enumerate().map(|(i, &p)| (i * len + p) as u32).collect();
        let rows = Tensor::new(rows.as_slice(), x.device())?;
        Ok(x.index_select(&rows, 0)?)
    }
}

/// Prototype head shared by student and teacher features.
#[derive(Debug, Clone)]
pub struct DinoHead {
    pub layers: Vec<Linear>,
}

impl DinoHead {
    pub fn new(b: &Builder, in_dim: usize, hidden: usize, prototypes: usize) -> Result<Self> {
        Ok(Self {
            layers: vec![
                Linear::new(&b.pp("fc1"), in_dim, hidden)?,
                Linear::new(&b.pp("fc2"), hidden, prototypes)?,
            ],
        })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Self {
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn prototypes(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    /// Unnormalized prototype logits `[.., K]` for features `[.., in_dim]`.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let d = features.dim(D::Minus1)?;
        if d != self.in_dim() {
            bail!(Shape, "dino head expects {} features, got {d}", self.in_dim());
        }
        let mut x = features.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = x.gelu_erf()?;
            }
            x = layer.forward(&x)?;
        }
        Ok(x)
    }
}

/// Same as [`DinoHead::forward`]; named for the operation it implements.
pub fn dino_logits(features: &Tensor, head: &DinoHead) -> Result<Tensor> {
    head.forward(features)
}

pub const CLIP_INIT_LOGIT_SCALE: f64 = 2.659_260_036_932_778; // ln(1 / 0.07)
pub const CLIP_MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092; // ln(100)
pub const EMBED_EPS: f64 = 1e-8;

pub mod prefix {
    pub const ENCODER: &str = "encoder.";
    pub const DECODER: &str = "decoder.";
    pub const TEXT: &str = "text.";
    pub const CLIP: &str = "clip.";
    pub const DINO_HEAD: &str = "dino_head.";
}

/// The trainable networks of the tokenizer and their parameter store.
#[derive(Debug)]
pub struct TokenizerModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: VisionEncoder,
    pub decoder: PixelDecoder,
    pub text: TextEncoder,
    pub clip_image_proj: Linear,
    pub clip_text_proj: Linear,
    pub logit_scale: Tensor,
    pub dino_head: DinoHead,
}

impl TokenizerModel {
    pub fn new(config: ModelConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = RefCell::new(ParamStore::new(dtype, device.clone()));
        let rng = RefCell::new(stream_rng(seed, Stream::Init, 0));
        let root = BuilderRoot::trainable(&store, &rng);
        let b = root.root();
        let sem = config.semantic_dim();
        let encoder = VisionEncoder::new(&b.pp("encoder"), &config)?;
        let decoder = PixelDecoder::new(&b.pp("decoder"), &config)?;
        let text = TextEncoder::new(&b.pp("text"), &config)?;
        let clip = b.pp("clip");
        let clip_image_proj = Linear::with_init(&clip.pp("image_proj"), sem, config.clip_embed_dim, Init::FanIn(1.0), false)?;
        let clip_text_proj =
            Linear::with_init(&clip.pp("text_proj"), config.text_width, config.clip_embed_dim, Init::FanIn(1.0), false)?;
        let logit_scale = clip.get("logit_scale", &[1], Init::Const(CLIP_INIT_LOGIT_SCALE))?;
        let dino_head = DinoHead::new(&b.pp("dino_head"), sem, config.dino_hidden, config.dino_prototypes)?;
        drop(root);
        Ok(Self {
            config,
            store: store.into_inner(),
            encoder,
            decoder,
            text,
            clip_image_proj,
            clip_text_proj,
            logit_scale,
            dino_head,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Deterministic single-image encode: `[3, H, W]` → `[d, H/f, W/f]`.
    pub fn encode(&self, image: &Tensor) -> Result<LatentGrid> {
        let (c, h, w) = image.dims3()?;
        if c != 3 {
            bail!(Shape, "expected a 3-channel image, got {:?}", image.dims());
        }
        let grid = self.config.grid_for(h, w)?;
        let out = self.encoder.forward(&image.unsqueeze(0)?, None)?;
        let values = tokens_to_grid(&out.latent, grid)?.squeeze(0)?;
        Ok(LatentGrid {
            values,
            source_resolution: (h, w),
        })
    }

    /// `[d, h, w]` → `[3, h·f, w·f]`.
    pub fn decode(&self, latent: &LatentGrid) -> Result<Tensor> {
        let (d, gh, gw) = latent.dims()?;
        if d != self.config.latent_dim {
            bail!(Shape, "latent has {d} channels, model expects {}", self.config.latent_dim);
        }
        let tokens = grid_to_tokens(&latent.values.unsqueeze(0)?)?;
        Ok(self.decoder.forward(&tokens, (gh, gw))?.squeeze(0)?)
    }

    pub fn encode_batch(&self, images: &Tensor, mask: Option<&Tensor>) -> Result<EncoderOutput> {
        self.encoder.forward(images, mask)
    }

    pub fn decode_tokens(&self, latent: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        self.decoder.forward(latent, grid)
    }

    /// Mean-pooled semantic tokens, projected and L2-normalized: `[B, clip_dim]`.
    pub fn image_embedding(&self, out: &EncoderOutput) -> Result<Tensor> {
        let pooled = out.semantic(self.config.semantic_tap).mean(1)?;
        nn::l2_normalize(&self.clip_image_proj.forward(&pooled)?, EMBED_EPS)
    }

    pub fn embed_image_clip(&self, image: &Tensor) -> Result<Tensor> {
        let out = self.encoder.forward(&image.unsqueeze(0)?, None)?;
        Ok(self.image_embedding(&out)?.squeeze(0)?)
    }

    /// Batched text embedding from padded ids `[B, L]` and final-token positions.
    pub fn text_embedding(&self, ids: &Tensor, last: &[usize]) -> Result<Tensor> {
        let feats = self.text.forward(ids, last)?;
        nn::l2_normalize(&self.clip_text_proj.forward(&feats)?, EMBED_EPS)
    }

    /// Embeds one token sequence. An empty sequence is treated as a lone BOS.
    pub fn embed_text_clip(&self, ids: &[u32]) -> Result<Tensor> {
        let ids: Vec<u32> = if ids.is_empty() { vec![BOS_ID] } else { ids.to_vec() };
        self.check_ids(&ids)?;
        let t = Tensor::new(ids.as_slice(), self.device())?.unsqueeze(0)?;
        Ok(self.text_embedding(&t, &[ids.len() - 1])?.squeeze(0)?)
    }

    pub fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.text_max_len {
            bail!(Shape, "token sequence of length {} exceeds max {}", ids.len(), self.config.text_max_len);
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::OutOfVocab {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Contrastive temperature `τ = 1 / exp(logit_scale)` with the scale capped.
    pub fn clip_temperature(&self) -> Result<Tensor> {
        Ok(self.logit_scale.clamp(f64::NEG_INFINITY, CLIP_MAX_LOGIT_SCALE)?.neg()?.exp()?)
    }

    pub fn param_count(&self) -> usize {
        self.store.num_elements()
    }

    pub fn autoencoder_param_count(&self) -> usize {
        self.store.num_elements_prefix(prefix::ENCODER) + self.store.num_elements_prefix(prefix::DECODER)
    }
}

/// Momentum copy of the vision encoder (with bottleneck) and the prototype head.
#[derive(Debug, Clone)]
pub struct EmaTeacher {
    pub params: BTreeMap<String, Tensor>,
    config: ModelConfig,
}

impl EmaTeacher {
    pub fn from_student(model: &TokenizerModel) -> Result<Self> {
        let mut params = model.store.snapshot(prefix::ENCODER)?;
        params.extend(model.store.snapshot(prefix::DINO_HEAD)?);
        Ok(Self {
            params,
            config: model.config.clone(),
        })
    }

    /// Frozen teacher networks built over the shadow tensors.
    pub fn networks(&self) -> Result<(VisionEncoder, DinoHead)> {
        let Some(any) = self.params.values().next() else {
            bail!(Shape, "teacher holds no parameters");
        };
        let root = BuilderRoot::frozen(&self.params, any.dtype(), any.device().clone());
        let b = root.root();
        let enc = VisionEncoder::new(&b.pp("encoder"), &self.config)?;
        let head = DinoHead::new(&b.pp("dino_head"), self.config.semantic_dim(), self.config.dino_hidden, self.config.dino_prototypes)?;
        Ok((enc, head))
    }

    pub fn update(&mut self, student: &ParamStore, momentum: f64) -> Result<()> {
        let mut current = BTreeMap::new();
        for name in self.params.keys() {
            let Some(v) = student.get(name) else {
                bail!(Shape, "student has no parameter {name}");
            };
            current.insert(name.clone(), v.as_tensor().detach());
        }
        ema_update(&mut self.params, &current, momentum)
    }
}

/// `teacher := m·teacher + (1 − m)·student` for every entry.
pub fn ema_update(teacher: &mut BTreeMap<String, Tensor>, student: &BTreeMap<String, Tensor>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) || m.is_nan() {
        bail!(InvalidArgument, "EMA momentum {m} outside [0, 1]");
    }
    if teacher.len() != student.len() {
        bail!(Shape, "teacher has {} tensors, student {}", teacher.len(), student.len());
    }
    for (name, t) in teacher.iter_mut() {
        let Some(s) = student.get(name) else {
            bail!(Shape, "student has no parameter {name}");
        };
        if s.dims() != t.dims() {
            bail!(Shape, "{name}: teacher {:?} vs student {:?}", t.dims(), s.dims());
        }
        let s = s.detach().to_dtype(t.dtype())?;
        *t = ((&*t * m)? + (s * (1.0 - m))?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Analytic cost model

fn encoder_params(cfg: &ModelConfig) -> u64 {
    let w = cfg.encoder_width;
    let p = cfg.patch_dim() * w + w
        + cfg.num_tokens() * w
        + w
        + cfg.encoder_depth * nn::block_param_count(w, cfg.mlp_ratio, cfg.use_qknorm)
        + 2 * w
        + w * cfg.latent_dim
        + cfg.latent_dim;
    p as u64
}

fn decoder_params(cfg: &ModelConfig) -> u64 {
    let w = cfg.decoder_width;
    let p = cfg.latent_dim * w + w
        + cfg.num_tokens() * w
        + cfg.decoder_blocks * nn::block_param_count(w, cfg.mlp_ratio, cfg.use_qknorm)
        + 2 * w
        + w * cfg.patch_dim()
        + cfg.patch_dim();
    p as u64
}

fn text_params(cfg: &ModelConfig) -> u64 {
    let w = cfg.text_width;
    let p = cfg.vocab_size * w + cfg.text_max_len * w + cfg.text_depth * nn::block_param_count(w, cfg.mlp_ratio, cfg.use_qknorm) + 2 * w;
    p as u64
}

fn head_params(cfg: &ModelConfig) -> u64 {
    let s = cfg.semantic_dim();
    let h = cfg.dino_hidden;
    let p = s * cfg.clip_embed_dim + cfg.text_width * cfg.clip_embed_dim + 1 + s * h + h + h * cfg.dino_prototypes + cfg.dino_prototypes;
    p as u64
}

/// Parameters of every network the tokenizer instantiates.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    encoder_params(cfg) + decoder_params(cfg) + text_params(cfg) + head_params(cfg)
}

/// Encoder (with bottleneck) plus pixel decoder only.
pub fn count_autoencoder_params(cfg: &ModelConfig) -> u64 {
    encoder_params(cfg) + decoder_params(cfg)
}

/// Forward FLOPs (2 × MACs) of the vision encoder on `tokens` tokens.
pub fn encoder_flops(cfg: &ModelConfig, tokens: usize) -> u64 {
    let w = cfg.encoder_width as u64;
    let t = tokens as u64;
    let macs = t * cfg.patch_dim() as u64 * w
        + cfg.encoder_depth as u64 * nn::block_macs(cfg.encoder_width, tokens, cfg.mlp_ratio)
        + t * w * cfg.latent_dim as u64;
    2 * macs
}

pub fn decoder_flops(cfg: &ModelConfig, tokens: usize) -> u64 {
    let w = cfg.decoder_width as u64;
    let t = tokens as u64;
    let macs = t * cfg.latent_dim as u64 * w
        + cfg.decoder_blocks as u64 * nn::block_macs(cfg.decoder_width, tokens, cfg.mlp_ratio)
        + t * w * cfg.patch_dim() as u64;
    2 * macs
}

pub fn text_flops(cfg: &ModelConfig, len: usize) -> u64 {
    2 * (cfg.text_depth as u64 * nn::block_macs(cfg.text_width, len, cfg.mlp_ratio) + cfg.text_width as u64 * cfg.clip_embed_dim as u64)
}

/// Prototype head over `rows` feature vectors.
pub fn dino_head_flops(cfg: &ModelConfig, rows: usize) -> u64 {
    2 * rows as u64 * (cfg.semantic_dim() as u64 * cfg.dino_hidden as u64 + cfg.dino_hidden as u64 * cfg.dino_prototypes as u64)
}

/// Forward FLOPs of encode + decode for one square image of side `image_size`.
pub fn count_flops(cfg: &ModelConfig, image_size: usize) -> u64 {
    let side = image_size / cfg.patch_size;
    let t = side * side;
    encoder_flops(cfg, t) + decoder_flops(cfg, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            latent_dim: 4,
            encoder_depth: 1,
            encoder_width: 8,
            encoder_heads: 2,
            decoder_blocks: 1,
            decoder_width: 8,
            decoder_heads: 2,
            text_depth: 1,
            text_width: 8,
            text_heads: 2,
            text_max_len: 6,
            vocab_size: 12,
            dino_prototypes: 6,
            dino_hidden: 8,
            clip_embed_dim: 4,
            mlp_ratio: 2,
            use_qknorm: true,
            semantic_tap: SemanticTap::PostBottleneck,
        }
    }

    fn model(cfg: ModelConfig) -> TokenizerModel {
        TokenizerModel::new(cfg, DType::F64, &Device::Cpu, 7).unwrap()
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        crate::rng::uniform_tensor(&mut stream_rng(seed, Stream::Noise, 0), &[3, h, w], DType::F64, &Device::Cpu)
            .unwrap()
            .affine(2.0, -1.0)
            .unwrap()
    }

    #[test]
    fn encode_shapes() {
        let m = model(tiny());
        let z = m.encode(&image(16, 16, 0)).unwrap();
        assert_eq!(z.values.dims(), &[4, 4, 4]);
        let z = m.encode(&image(16, 8, 0)).unwrap();
        assert_eq!(z.values.dims(), &[4, 4, 2]);
        assert!(matches!(m.encode(&image(14, 16, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn encode_64px_f16_d16() {
        let cfg = ModelConfig {
            image_size: 64,
            patch_size: 16,
            latent_dim: 16,
            ..tiny()
        };
        let m = model(cfg);
        assert_eq!(m.encode(&image(64, 64, 1)).unwrap().values.dims(), &[16, 4, 4]);
        assert!(m.encode(&image(60, 64, 1)).is_err());
    }

    #[test]
    fn decode_rejects_wrong_latent_dim() {
        let m = model(tiny());
        let bad = LatentGrid {
            values: Tensor::zeros((8, 4, 4), DType::F64, &Device::Cpu).unwrap(),
            source_resolution: (16, 16),
        };
        assert!(matches!(m.decode(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn pixel_shuffle_inverts_patchify() {
        let x = image(8, 12, 3).unsqueeze(0).unwrap();
        let p = patchify(&x, 4).unwrap();
        assert_eq!(p.dims(), &[1, 6, 48]);
        let back = unpatchify(&p, 4, (2, 3)).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let m = model(tiny());
        let img = image(16, 16, 4);
        let a = m.embed_image_clip(&img).unwrap();
        let b = m.embed_image_clip(&img).unwrap();
        let n = a.sqr().unwrap().sum_all().unwrap().sqrt().unwrap().to_scalar::<f64>().unwrap();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(a.to_vec1::<f64>().unwrap(), b.to_vec1::<f64>().unwrap());

        for ids in [vec![BOS_ID, 5, 6, EOS_ID], vec![]] {
            let t = m.embed_text_clip(&ids).unwrap();
            let n = t.sqr().unwrap().sum_all().unwrap().sqrt().unwrap().to_scalar::<f64>().unwrap();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(matches!(m.embed_text_clip(&[BOS_ID, 99]), Err(Error::OutOfVocab { id: 99, .. })));
    }

    #[test]
    fn zero_projection_hits_epsilon_floor() {
        let m = model(tiny());
        let zero = m.clip_image_proj.weight.zeros_like().unwrap();
        m.store.get("clip.image_proj.weight").unwrap().set(&zero).unwrap();
        let e = m.embed_image_clip(&image(16, 16, 5)).unwrap();
        let v = e.to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.is_finite() && *x == 0.0));
    }

    #[test]
    fn ema_arithmetic() {
        let dev = Device::Cpu;
        let mk = |v: f64| BTreeMap::from([("w".to_string(), Tensor::full(v, (2, 2), &dev).unwrap())]);
        let student = mk(2.0);
        let mut t = mk(0.0);
        ema_update(&mut t, &student, 0.5).unwrap();
        assert_eq!(t["w"].flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0; 4]);
        let mut t = mk(0.3);
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t["w"].flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.3; 4]);
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t["w"].flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![2.0; 4]);
        assert!(ema_update(&mut t, &student, 1.5).is_err());
        let bad = BTreeMap::from([("w".to_string(), Tensor::zeros((3,), DType::F64, &dev).unwrap())]);
        assert!(matches!(ema_update(&mut t, &bad, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn teacher_mirrors_student_shapes() {
        let m = model(tiny());
        let teacher = EmaTeacher::from_student(&m).unwrap();
        for (k, t) in &teacher.params {
            assert_eq!(m.store.get(k).unwrap().dims(), t.dims());
        }
        let (enc, head) = teacher.networks().unwrap();
        assert!(!enc.pos_embed.is_variable());
        assert_eq!(head.prototypes(), 6);
    }

    #[test]
    fn dino_logits_identity_and_zero() {
        let dev = Device::Cpu;
        let eye = Tensor::eye(5, DType::F64, &dev).unwrap();
        let head = DinoHead::from_layers(vec![Linear {
            weight: eye,
            bias: Some(Tensor::zeros(5, DType::F64, &dev).unwrap()),
        }]);
        let feats = Tensor::new(&[[0.5f64, -1.0, 2.0, 0.0, 3.0]], &dev).unwrap();
        let out = dino_logits(&feats, &head).unwrap();
        assert_eq!(out.to_vec2::<f64>().unwrap(), feats.to_vec2::<f64>().unwrap());

        let m = model(tiny());
        let z = Tensor::zeros((2, 4), DType::F64, &dev).unwrap();
        let lin = DinoHead::from_layers(vec![Linear {
            weight: m.dino_head.layers[0].weight.clone(),
            bias: Some(Tensor::zeros(8, DType::F64, &dev).unwrap()),
        }]);
        let out = dino_logits(&z, &lin).unwrap();
        assert!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
        assert!(dino_logits(&Tensor::zeros((1, 3), DType::F64, &dev).unwrap(), &m.dino_head).is_err());

        let again = model(tiny());
        let f = image(16, 16, 9).flatten_all().unwrap().narrow(0, 0, 8).unwrap().reshape((2, 4)).unwrap();
        let a = dino_logits(&f, &m.dino_head).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = dino_logits(&f, &again.dino_head).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn count_params_matches_instantiation() {
        for tap in [SemanticTap::PostBottleneck, SemanticTap::PreBottleneck] {
            for qk in [false, true] {
                let cfg = ModelConfig {
                    semantic_tap: tap,
                    use_qknorm: qk,
                    ..tiny()
                };
                let m = model(cfg.clone());
                assert_eq!(m.param_count() as u64, count_params(&cfg));
                assert_eq!(m.autoencoder_param_count() as u64, count_autoencoder_params(&cfg));
            }
        }
    }

    #[test]
    fn deeper_means_more_params() {
        let a = ModelConfig::vit_b_f16d64();
        let b = ModelConfig {
            encoder_depth: 24,
            decoder_blocks: 24,
            ..a.clone()
        };
        assert!(count_params(&b) > count_params(&a));
        assert!(count_flops(&b, 256) > count_flops(&a, 256));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ModelConfig { image_size: 30, ..tiny() }.validate().is_err());
        assert!(ModelConfig { latent_dim: 0, ..tiny() }.validate().is_err());
        assert!(ModelConfig { encoder_heads: 3, ..tiny() }.validate().is_err());
    }
}
