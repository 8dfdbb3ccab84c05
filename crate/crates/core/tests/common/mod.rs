//! Small shared fixtures for the integration tests.
#![allow(dead_code)]

use vtp_core::data::{DatasetManifest, GRAMMAR_VERSION};
use vtp_core::eval::{EvalConfig, ExtractorConfig};
use vtp_core::genharness::DiTConfig;
use vtp_core::model::{ModelConfig, SemanticTap};
use vtp_core::eval::MetricsRecord;
use vtp_core::sweep::{Axis, HarnessSpec, RunRecord, RunStatus, RECORD_SCHEMA_VERSION};
use vtp_core::trainer::{Objectives, TrainConfig};

/// 32px, patch 8, 8 latent channels; about a quarter-million parameters.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_size: 8,
        latent_dim: 8,
        encoder_depth: 2,
        encoder_width: 64,
        encoder_heads: 4,
        decoder_blocks: 2,
        decoder_width: 64,
        decoder_heads: 4,
        text_depth: 1,
        text_width: 32,
        text_heads: 2,
        text_max_len: 12,
        vocab_size: 64,
        dino_prototypes: 64,
        dino_hidden: 64,
        clip_embed_dim: 32,
        mlp_ratio: 4,
        use_qknorm: true,
        semantic_tap: SemanticTap::PostBottleneck,
    }
}

/// A few thousand parameters at 16px for mechanics tests.
pub fn micro_model() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 8,
        latent_dim: 4,
        encoder_depth: 1,
        encoder_width: 16,
        encoder_heads: 2,
        decoder_blocks: 1,
        decoder_width: 16,
        decoder_heads: 2,
        text_depth: 1,
        text_width: 16,
        text_heads: 2,
        text_max_len: 12,
        vocab_size: 40,
        dino_prototypes: 16,
        dino_hidden: 16,
        clip_embed_dim: 8,
        mlp_ratio: 2,
        use_qknorm: true,
        semantic_tap: SemanticTap::PostBottleneck,
    }
}

pub fn synthetic(n: usize, classes: usize, size: usize) -> DatasetManifest {
    DatasetManifest::Synthetic {
        seed: 0,
        n,
        num_classes: classes,
        image_size: size,
        grammar_version: GRAMMAR_VERSION,
    }
}

pub fn train(objectives: Objectives, steps: u64, batch: usize) -> TrainConfig {
    TrainConfig {
        objectives,
        batch,
        batch_ssl: (batch / 4).max(1),
        batch_rec: (batch / 8).max(1),
        total_samples: steps * batch as u64,
        ..Default::default()
    }
}

/// Fixed generation harness for 32px / f8 / d8 tokenizers.
pub fn desk_harness(classes: usize) -> HarnessSpec {
    HarnessSpec {
        dit: DiTConfig {
            depth: 3,
            width: 32,
            heads: 4,
            mlp_ratio: 4,
            patch: 1,
            latent_channels: 8,
            latent_grid: 4,
            num_classes: classes,
            cfg_scale: None,
            sampler_steps: 25,
            train_steps: 2000,
            batch: 32,
            lr: 1e-3,
            warmup_steps: 25,
            num_samples: 512,
            train_images: 2048,
            seed: 0,
        },
        extractor: ExtractorConfig::default(),
        eval: EvalConfig {
            n_eval: 512,
            n_probe_train: 1024,
            n_probe_test: 512,
            n_stats: 256,
        },
        dataset: synthetic(8192, classes, 32),
    }
}

/// Completed run record with synthetic metrics derived from `value`.
pub fn record(id: &str, axis: Axis, value: f64, seed: u64, fgen: f64, dit_hash: &str) -> RunRecord {
    RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        point_id: id.into(),
        sweep: "fixture".into(),
        axis,
        axis_value: format!("{value}"),
        axis_position: 0,
        seed,
        objectives: "ae".into(),
        model: micro_model(),
        train: Default::default(),
        dataset: Default::default(),
        dit: Default::default(),
        dit_hash: dit_hash.into(),
        extractor_hash: "ex".into(),
        tokenizer_hash: Some("tok".into()),
        flops: value as u64,
        params: 1,
        status: RunStatus::Ok,
        metrics: Some(MetricsRecord {
            schema_version: 1,
            psnr_mean: 20.0 + value.ln(),
            frechet_rec: 1.0 / value,
            linprobe_acc: 0.5,
            zeroshot_acc: 0.25,
            frechet_gen: Some(fgen),
            frechet_gen_samples: Some(64),
            latent_mean: vec![0.0],
            latent_std: vec![1.0],
            extractor_hash: "ex".into(),
            dit_hash: Some(dit_hash.into()),
            tokenizer_hash: "tok".into(),
        }),
        rf_loss_init: Some(1.0),
        rf_loss_final: Some(0.5),
        wall_clock_s: 1.0,
    }
}
