//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL
//! line each; exits non-zero if a gating criterion fails. Pass criterion
//! numbers as arguments to run a subset, e.g. `cargo test --test acceptance -- 1 3 9`.

mod common;

use std::collections::BTreeMap;
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use vtp_core::data::{class_from_caption, pad_batch, plan_batch, stack_images, synth_dataset};
use vtp_core::eval::{frechet, psnr};
use vtp_core::genharness::{rf_loss, DiT, DiTConfig, LatentBatch};
use vtp_core::losses::{clip_loss_f64, dino_loss, hinge_g_loss, mim_loss, rec_loss, scalar, DinoState, PatchDiscriminator, RandomConvPyramid};
use vtp_core::model::{count_autoencoder_params, count_flops, count_params, ema_update, prefix, ModelConfig, SemanticTap, TokenizerModel};
use vtp_core::nn::ParamStore;
use vtp_core::rng::{normal_tensor, stream_rng, uniform_tensor, Stream};
use vtp_core::sweep::{check_hashes, median, run_sweep_with, spearman, Axis, AxisValue, Harness, Registry, RunRecord, SweepOptions, SweepSpec};
use vtp_core::trainer::{max_abs_grad, pretrain_step_flops, stage2_generator_loss, stage2_latents, Objectives, StepContext, TrainConfig, Trainer};
use vtp_core::Error;

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T>(r: vtp_core::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// 1. Analytic cost model

fn within(got: f64, want: f64, tol: f64) -> bool {
    ((got - want) / want).abs() <= tol
}

fn cost_model() -> Outcome {
    let mut lines = Vec::new();
    for (name, cfg, params, flops) in [
        ("ViT-B", ModelConfig::vit_b_f16d64(), 171.2e6, 87.7e9),
        ("ViT-L", ModelConfig::vit_l_f16d64(), 607.2e6, 311.1e9),
    ] {
        let p = count_autoencoder_params(&cfg) as f64;
        let f = count_flops(&cfg, 256) as f64;
        let line = format!("{name}: {:.1}M params (want {:.1}M), {:.1}G FLOPs (want {:.1}G)", p / 1e6, params / 1e6, f / 1e9, flops / 1e9);
        ensure!(within(p, params, 0.02) && within(f, flops, 0.20), "{line}");
        lines.push(line);
    }
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------------------
// 2. Finite-difference gradients

/// Under 5k parameters at 8px.
fn nano_model() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        latent_dim: 2,
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

/// Replaces all-zero tensors (zero-initialized projections, biases) with
/// small noise so their gradients do not vanish identically.
fn randomize_zeros(store: &ParamStore, seed: u64) -> vtp_core::Result<()> {
    let mut rng = stream_rng(seed, Stream::Probe, 7);
    for var in store.vars().values() {
        let t = var.as_tensor();
        let zero = t.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? == 0.0;
        if zero {
            let noise = (normal_tensor(&mut rng, t.dims(), t.dtype(), t.device())? * 0.3)?;
            var.set(&noise)?;
        }
    }
    Ok(())
}

/// Worst norm-relative error between backprop and central differences over
/// `per_tensor` random coordinates of every parameter in `stores`.
fn fd_check(stores: &[&ParamStore], per_tensor: usize, loss: &dyn Fn() -> vtp_core::Result<Tensor>) -> vtp_core::Result<(f64, usize)> {
    const H: f64 = 1e-5;
    let grads = loss()?.backward()?;
    let mut rng = stream_rng(11, Stream::Probe, 8);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for store in stores {
        for var in store.vars().values() {
            let t = var.as_tensor().clone();
            let base: Vec<f64> = t.flatten_all()?.to_vec1()?;
            let g: Vec<f64> = match grads.get(&t) {
                Some(g) => g.flatten_all()?.to_vec1()?,
                None => vec![0.0; base.len()],
            };
            for _ in 0..per_tensor.min(base.len()) {
                let k = rng.random_range(0..base.len());
                let probe = |delta: f64| -> vtp_core::Result<f64> {
                    let mut v = base.clone();
                    v[k] += delta;
                    var.set(&Tensor::from_vec(v, t.dims(), t.device())?)?;
                    scalar(&loss()?)
                };
                let (lp, lm) = (probe(H)?, probe(-H)?);
                var.set(&Tensor::from_vec(base.clone(), t.dims(), t.device())?)?;
                analytic.push(g[k]);
                numeric.push((lp - lm) / (2.0 * H));
            }
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    if scale == 0.0 {
        return Err(Error::InvalidArgument("gradient vanished on every probed coordinate".into()));
    }
    Ok((norm(&diff) / scale, analytic.len()))
}

fn gradient_suite() -> Outcome {
    let dev = Device::Cpu;
    let cfg = nano_model();
    ensure!(count_params(&cfg) <= 5000, "nano model has {} parameters", count_params(&cfg));
    let model = ok(TokenizerModel::new(cfg.clone(), DType::F64, &dev, 3))?;
    ok(randomize_zeros(&model.store, 1))?;
    let x = ok(uniform_tensor(&mut stream_rng(5, Stream::Data, 0), &[3, 3, 8, 8], DType::F64, &dev).and_then(|u| Ok((u * 2.0)?.affine(1.0, -1.0)?)))?;
    let perceptual = ok(RandomConvPyramid::new(DType::F64, &dev))?;
    let disc = ok(PatchDiscriminator::new(2, DType::F64, &dev, 4))?;
    ok(randomize_zeros(&disc.store, 2))?;
    let state = ok(DinoState::new(cfg.dino_prototypes, 0.07, 0.1, 0.9))?;
    let tap = cfg.semantic_tap;
    let mask = ok(Tensor::from_vec(vec![1.0f64, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0], (3, 4), &dev).map_err(Error::from))?;
    let teacher = {
        let mut r = stream_rng(9, Stream::Noise, 0);
        let pooled = ok(normal_tensor(&mut r, &[3, cfg.dino_prototypes], DType::F64, &dev))?;
        let pooled2 = ok(normal_tensor(&mut r, &[3, cfg.dino_prototypes], DType::F64, &dev))?;
        let patch = ok(normal_tensor(&mut r, &[3, 4, cfg.dino_prototypes], DType::F64, &dev))?;
        (vec![pooled, pooled2], patch)
    };
    let seqs = vec![vec![1, 4, 5, 2], vec![1, 6, 7, 8, 2], vec![1, 9, 2]];
    let (flat, last) = pad_batch(&seqs, cfg.text_max_len);
    let ids = ok(Tensor::from_vec(flat, (3, cfg.text_max_len), &dev).map_err(Error::from))?;

    let dit_cfg = DiTConfig {
        depth: 1,
        width: 8,
        heads: 2,
        mlp_ratio: 2,
        latent_channels: 2,
        latent_grid: 2,
        num_classes: 3,
        ..Default::default()
    };
    let dit = ok(DiT::new(dit_cfg, DType::F64, &dev))?;
    ok(randomize_zeros(&dit.store, 3))?;
    let latents = LatentBatch {
        values: ok(normal_tensor(&mut stream_rng(6, Stream::Data, 1), &[3, 2, 2, 2], DType::F64, &dev))?,
        labels: vec![0, 1, 2],
        standardized: true,
    };
    ensure!(dit.store.num_elements() <= 5000, "DiT has {} parameters", dit.store.num_elements());

    let recon = || -> vtp_core::Result<Tensor> {
        let out = model.encode_batch(&x, None)?;
        model.decode_tokens(&out.latent, out.grid)
    };
    type Check<'a> = (&'a str, Vec<&'a ParamStore>, Box<dyn Fn() -> vtp_core::Result<Tensor> + 'a>);
    let checks: Vec<Check> = vec![
        (
            "rec",
            vec![&model.store],
            Box::new(|| {
                let r = rec_loss(&x, &recon()?, &perceptual)?;
                Ok((r.l1 + r.perceptual)?)
            }),
        ),
        (
            "mim",
            vec![&model.store],
            Box::new(|| {
                let s = model.encode_batch(&x, Some(&mask))?;
                let logits = model.dino_head.forward(s.semantic(tap))?;
                mim_loss(&logits, &teacher.1, &mask, &mut state.clone())
            }),
        ),
        (
            "dino",
            vec![&model.store],
            Box::new(|| {
                let a = model.encode_batch(&x, Some(&mask))?;
                let b = model.encode_batch(&x.flip(&[3])?, None)?;
                let student = vec![
                    model.dino_head.forward(&a.semantic(tap).mean(1)?)?,
                    model.dino_head.forward(&b.semantic(tap).mean(1)?)?,
                ];
                dino_loss(&student, &teacher.0, &mut state.clone())
            }),
        ),
        (
            "clip",
            vec![&model.store],
            Box::new(|| {
                let img = model.image_embedding(&model.encode_batch(&x, None)?)?;
                let txt = model.text_embedding(&ids, &last)?;
                vtp_core::losses::clip_loss(&img, &txt, &model.clip_temperature()?)
            }),
        ),
        ("gan_g", vec![&model.store, &disc.store], Box::new(|| hinge_g_loss(&disc.forward(&recon()?)?))),
        ("rf", vec![&dit.store], Box::new(|| rf_loss(&dit, &latents, &mut stream_rng(12, Stream::Noise, 3)))),
    ];
    let mut report = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, stores, loss) in &checks {
        let (err, n) = ok(fd_check(stores, 4, loss.as_ref()))?;
        report.push(format!("{name} {err:.1e} ({n} coords)"));
        worst = worst.max(err);
        ensure!(err < 1e-4, "{name}: relative error {err:.3e}; {}", report.join(", "));
    }
    Ok(format!("max relative error {worst:.1e}: {}", report.join(", ")))
}

// ---------------------------------------------------------------------------
// 3. Loss identities

fn loss_identities() -> Outcome {
    let dev = Device::Cpu;
    let mut out = Vec::new();
    for n in [2usize, 8, 64] {
        let e = ok(Tensor::ones((n, 16), DType::F64, &dev).map_err(Error::from).and_then(|t| Ok((t / 4.0)?)))?;
        let l = ok(clip_loss_f64(&e, &e, 0.07).and_then(|t| scalar(&t)))?;
        ensure!((l - (n as f64).ln()).abs() <= 1e-6, "clip N={n}: {l} vs ln N {}", (n as f64).ln());
    }
    out.push("clip = ln N".to_string());

    let k = 16usize;
    let mut onehot = vec![0.0f64; 4 * k];
    for r in 0..4 {
        onehot[r * k + (r * 5) % k] = 1e4;
    }
    let teacher = ok(Tensor::from_vec(onehot, (4, k), &dev).map_err(Error::from))?;
    let uniform = ok(Tensor::zeros((4, k), DType::F64, &dev).map_err(Error::from))?;
    let state = ok(DinoState::new(k, 0.04, 0.1, 0.9))?;
    let d = ok(dino_loss(&[uniform.clone(), uniform.clone()], &[teacher.clone(), teacher.clone()], &mut state.clone()).and_then(|t| scalar(&t)))?;
    ensure!((d - (k as f64).ln()).abs() <= 1e-6, "dino: {d} vs ln K");
    let t3 = ok(teacher.reshape((2, 2, k)).map_err(Error::from))?;
    let u3 = ok(uniform.reshape((2, 2, k)).map_err(Error::from))?;
    let mask = ok(Tensor::from_vec(vec![1.0f64, 0.0, 1.0, 1.0], (2, 2), &dev).map_err(Error::from))?;
    let m = ok(mim_loss(&u3, &t3, &mask, &mut state.clone()).and_then(|t| scalar(&t)))?;
    ensure!((m - (k as f64).ln()).abs() <= 1e-6, "mim: {m} vs ln K");
    out.push("dino = mim = ln K".into());

    let x = ok(uniform_tensor(&mut stream_rng(0, Stream::Data, 9), &[2, 3, 32, 32], DType::F64, &dev))?;
    let net = ok(RandomConvPyramid::new(DType::F64, &dev))?;
    let r = ok(rec_loss(&x, &x, &net))?;
    let (l1, p) = (ok(scalar(&r.l1))?, ok(scalar(&r.perceptual))?);
    ensure!(l1 == 0.0 && p == 0.0, "rec_loss(x, x) = {l1} + {p}");
    out.push("rec(x, x) = 0".into());

    let mut rng = stream_rng(0, Stream::Probe, 9);
    let a = DMatrix::from_fn(200, 6, |_, _| rng.random_range(-1.0..1.0));
    let faa = ok(frechet(&a, &a))?;
    ensure!(faa < 1e-6, "frechet(A, A) = {faa}");
    let delta = [0.5, -1.0, 0.25, 2.0, 0.0, -0.75];
    let mut b = a.clone();
    for mut row in b.row_iter_mut() {
        for (c, d) in delta.iter().enumerate() {
            row[c] += d;
        }
    }
    let shift = ok(frechet(&a, &b))?;
    let want: f64 = delta.iter().map(|d| d * d).sum();
    ensure!((shift - want).abs() <= 1e-6, "mean shift: {shift} vs {want}");
    out.push(format!("frechet(A, A) = {faa:.1e}, shift = ‖δ‖²"));
    Ok(out.join(", "))
}

// ---------------------------------------------------------------------------
// 4. Training mechanics

fn snapshot_bytes(store: &ParamStore, p: &str) -> vtp_core::Result<Vec<u8>> {
    vtp_core::archive::encode(&store.snapshot(p)?)
}

fn training_mechanics() -> Outcome {
    let micro = common::micro_model();
    let mk = |steps: u64| Trainer::new(micro.clone(), common::train(Objectives::ALL, steps, 8), common::synthetic(64, 8, 16));

    // Stage 2: encoder gradients exactly zero for 100 steps.
    let mut tr = ok(mk(2))?;
    ok(tr.run(2, None, None))?;
    let mut ft = ok(tr.into_finetune(common::train(Objectives::AE, 100, 8)))?;
    let enc0 = ok(snapshot_bytes(&ft.model.store, prefix::ENCODER))?;
    for step in 0..100 {
        let batch = ok(ft.batch(step))?;
        let ctx = StepContext {
            cfg: &ft.cfg,
            vocab: &ft.vocab,
            perceptual: ft.perceptual(),
            total_steps: ft.total_steps(),
        };
        let (x, latent, grid) = ok(stage2_latents(&batch, &ft.model))?;
        let (loss, _) = ok(stage2_generator_loss(&x, &latent, grid, &ft.model, ft.disc.as_ref().expect("stage 2"), &ctx))?;
        let grads = ok(loss.backward().map_err(Error::from))?;
        let g = ok(max_abs_grad(&ft.model.store, &grads, prefix::ENCODER))?;
        ensure!(g == 0.0, "encoder gradient {g} at stage-2 step {step}");
        ok(ft.step())?;
    }
    ensure!(ok(snapshot_bytes(&ft.model.store, prefix::ENCODER))? == enc0, "encoder changed during stage 2");

    // EMA endpoints and midpoint.
    let dev = Device::Cpu;
    let mut rng = stream_rng(4, Stream::Probe, 4);
    let t = ok(normal_tensor(&mut rng, &[64], DType::F32, &dev))?;
    let s = ok(normal_tensor(&mut rng, &[64], DType::F32, &dev))?;
    let tv: Vec<f32> = ok(t.to_vec1().map_err(Error::from))?;
    let sv: Vec<f32> = ok(s.to_vec1().map_err(Error::from))?;
    for (m, want) in [
        (0.0, sv.clone()),
        (1.0, tv.clone()),
        (0.5, tv.iter().zip(&sv).map(|(a, b)| 0.5 * a + 0.5 * b).collect()),
    ] {
        let mut teacher = BTreeMap::from([("w".to_string(), t.clone())]);
        ok(ema_update(&mut teacher, &BTreeMap::from([("w".to_string(), s.clone())]), m))?;
        let got: Vec<f32> = ok(teacher["w"].to_vec1().map_err(Error::from))?;
        ensure!(got == want, "EMA m={m} is not exact");
    }

    // Checkpoint round trip and resume.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut full = ok(mk(8))?;
    let full_stream = ok(full.run(8, None, None))?;
    let mut part = ok(mk(8))?;
    let mut stream = ok(part.run(4, None, None))?;
    ok(part.save(dir.path()))?;
    let back = ok(Trainer::load(dir.path()))?;
    ensure!(ok(snapshot_bytes(&back.model.store, ""))? == ok(snapshot_bytes(&part.model.store, ""))?, "checkpoint changed parameters");
    ensure!(back.state.dino == part.state.dino && back.state.step == 4, "checkpoint changed run state");
    let mut resumed = back;
    stream.extend(ok(resumed.run(8, None, None))?);
    ensure!(stream == full_stream, "resumed loss stream differs");
    ensure!(ok(snapshot_bytes(&resumed.model.store, ""))? == ok(snapshot_bytes(&full.model.store, ""))?, "resumed parameters differ");
    Ok("stage-2 encoder grads 0 over 100 steps; EMA exact at m∈{0, 0.5, 1}; checkpoint and resume bitwise".into())
}

// ---------------------------------------------------------------------------
// 5. Overfit smoke

fn overfit_smoke() -> Outcome {
    let cfg = TrainConfig {
        batch_rec: 8,
        ..common::train(Objectives::AE, 3000, 8)
    };
    let mut tr = ok(Trainer::new(common::desk_model(), cfg, common::synthetic(8, 8, 32)))?;
    let samples: Vec<_> = (0..8).map(|i| tr.dataset.get(i)).collect();
    let x = ok(stack_images(&samples.iter().map(|s| &s.image).collect::<Vec<_>>(), DType::F32, &Device::Cpu))?;
    let measure = |tr: &Trainer| -> vtp_core::Result<f64> {
        let out = tr.model.encode_batch(&x, None)?;
        psnr(&x, &tr.model.decode_tokens(&out.latent, out.grid)?)
    };
    let mut best = 0.0f64;
    while !tr.is_done() {
        let next = tr.state.step + 100;
        ok(tr.run(next, None, None))?;
        let p = ok(measure(&tr))?;
        best = best.max(p);
        if p > 30.0 {
            return Ok(format!("{p:.2} dB after {} steps", tr.state.step));
        }
    }
    Err(format!("best {best:.2} dB after {} steps", tr.state.step))
}

// ---------------------------------------------------------------------------
// 9. Guards

fn guards() -> Outcome {
    let base = common::record("base", Axis::Compute, 1.0, 0, 1.0, "aaaa");
    let other = common::record("other", Axis::Compute, 2.0, 0, 1.0, "bbbb");
    match check_hashes(&[base.clone(), other]) {
        Err(Error::Incomparable(msg)) => ensure!(msg.contains("aaaa") && msg.contains("bbbb"), "refusal lacks the hashes: {msg}"),
        r => return Err(format!("mixed DiT hashes accepted: {r:?}")),
    }
    let mut ex = base.clone();
    ex.point_id = "ex".into();
    ex.extractor_hash = "zzzz".into();
    ensure!(matches!(check_hashes(&[base.clone(), ex]), Err(Error::Incomparable(_))), "mixed extractor hashes accepted");

    // Every index is equally likely to be drawn into each sub-batch.
    let (b, b_ssl, b_rec, draws) = (32usize, 8usize, 4usize, 1000usize);
    let mut rng = stream_rng(0, Stream::Plan, 0);
    let (mut ssl, mut rec) = (vec![0f64; b], vec![0f64; b]);
    for _ in 0..draws {
        let plan = ok(plan_batch(b, b_ssl, b_rec, &mut rng))?;
        plan.ssl.iter().for_each(|&i| ssl[i] += 1.0);
        plan.rec.iter().for_each(|&i| rec[i] += 1.0);
    }
    let chi = ChiSquared::new((b - 1) as f64).map_err(|e| e.to_string())?;
    let mut ps = Vec::new();
    for (name, counts, k) in [("ssl", &ssl, b_ssl), ("rec", &rec, b_rec)] {
        let expected = (draws * k) as f64 / b as f64;
        let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let p = 1.0 - chi.cdf(stat);
        ensure!(p > 0.01, "{name} sub-batch frequencies: χ²={stat:.1}, p={p:.4}");
        ps.push(format!("{name} p={p:.3}"));
    }

    let ds = ok(synth_dataset(0, 4096, 32, 32))?;
    let wrong = ds.iter().filter(|s| class_from_caption(&s.caption) != Some(s.class_id)).count();
    ensure!(wrong == 0, "{wrong} of 4096 captions decode to the wrong class");
    Ok(format!("mixed hashes refused; plan χ² {}; caption oracle 4096/4096", ps.join(", ")))
}

// ---------------------------------------------------------------------------
// Shared sweep scaffolding for 6, 7 and 8

const SEEDS: [u64; 3] = [0, 1, 2];
const CLASSES: usize = 16;
const BATCH: usize = 32;

/// One harness for every sweep, so all generation scores share a DiT and extractor.
fn harness() -> &'static Harness {
    static HARNESS: OnceLock<Harness> = OnceLock::new();
    HARNESS.get_or_init(|| {
        let cache = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cache");
        Harness::prepare(&common::desk_harness(CLASSES), &cache).expect("reference extractor")
    })
}

fn step_flops(objectives: Objectives) -> u64 {
    pretrain_step_flops(&common::desk_model(), &common::train(objectives, 1, BATCH))
}

/// Runs every point × seed into a scratch registry and insists all succeed.
fn sweep(name: &str, axis: Axis, values: Vec<AxisValue>, objectives: Objectives, steps: u64, n: usize, budget: Option<u64>) -> std::result::Result<Vec<RunRecord>, String> {
    let spec = SweepSpec {
        name: name.into(),
        axis,
        values,
        model: common::desk_model(),
        train: common::train(objectives, steps, BATCH),
        dataset: common::synthetic(n, CLASSES, 32),
        harness: common::desk_harness(CLASSES),
        seeds: SEEDS.to_vec(),
        flops_budget: budget,
        ..Default::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let records = ok(run_sweep_with(&spec, &Registry::at(dir.path()), &SweepOptions::default(), harness()))?;
    for r in &records {
        ensure!(r.is_ok(), "{name} point {}={} seed {} failed: {:?}", axis.name(), r.axis_value, r.seed, r.status);
        eprintln!(
            "  {name} {}={} seed {}: steps {} frechet_rec {:.2} frechet_gen {:.2} linprobe {:.3} [{:.0}s]",
            axis.name(),
            r.axis_value,
            r.seed,
            r.train.total_steps(),
            r.metrics.as_ref().map_or(f64::NAN, |m| m.frechet_rec),
            gen(r),
            r.metrics.as_ref().map_or(f64::NAN, |m| m.linprobe_acc),
            r.wall_clock_s
        );
    }
    ok(check_hashes(&records))?;
    Ok(records)
}

fn gen(r: &RunRecord) -> f64 {
    r.metrics.as_ref().and_then(|m| m.frechet_gen).unwrap_or(f64::NAN)
}

/// Median of `metric` over seeds at each axis position, in axis order.
fn medians(records: &[RunRecord], metric: fn(&RunRecord) -> f64) -> Vec<f64> {
    let positions = records.iter().map(|r| r.axis_position).max().map_or(0, |p| p + 1);
    (0..positions)
        .map(|p| {
            let v: Vec<f64> = records.iter().filter(|r| r.axis_position == p).map(metric).collect();
            median(&v).unwrap_or(f64::NAN)
        })
        .collect()
}

fn rel_gain(before: f64, after: f64) -> f64 {
    (before - after) / before
}

// ---------------------------------------------------------------------------
// 6. Reconstruction–generation paradox

const REC_BASE_STEPS: u64 = 1000;

fn rec_gen_paradox() -> Outcome {
    let base = REC_BASE_STEPS * step_flops(Objectives::AE);
    let values = vec![AxisValue::Number(base as f64), AxisValue::Number((4 * base) as f64)];
    let records = sweep("rec-extension", Axis::Compute, values, Objectives::AE, REC_BASE_STEPS, 8192, None)?;
    let rec = medians(&records, |r| r.metrics.as_ref().map_or(f64::NAN, |m| m.frechet_rec));
    let g = medians(&records, gen);
    let (rec_gain, gen_gain) = (rel_gain(rec[0], rec[1]), rel_gain(g[0], g[1]));
    let line = format!(
        "frechet_rec {:.2} → {:.2} ({:+.1}%), frechet_gen {:.2} → {:.2} ({:+.1}%)",
        rec[0],
        rec[1],
        100.0 * rec_gain,
        g[0],
        g[1],
        100.0 * gen_gain
    );
    ensure!(rec_gain >= 0.20 && gen_gain < 0.05, "{line}");
    Ok(line)
}

// ---------------------------------------------------------------------------
// 7. Objective ablation at matched compute

const MATCHED_VTP_STEPS: u64 = 1000;

fn objective_ablation() -> Outcome {
    let labels = ["ae", "clip+ae", "ssl+ae", "clip+ssl+ae"];
    let budget = MATCHED_VTP_STEPS * step_flops(Objectives::ALL);
    let values = labels.iter().map(|s| AxisValue::Text(s.to_string())).collect();
    let records = sweep("objectives", Axis::Objective, values, Objectives::AE, 1, 8192, Some(budget))?;
    let g = medians(&records, gen);
    let lp = medians(&records, |r| r.metrics.as_ref().map_or(f64::NAN, |m| m.linprobe_acc));
    let (ae, clip, ssl, all) = (0, 1, 2, 3);
    let xs: Vec<f64> = records.iter().map(|r| r.metrics.as_ref().map_or(f64::NAN, |m| m.linprobe_acc)).collect();
    let ys: Vec<f64> = records.iter().map(|r| -gen(r)).collect();
    let rho = spearman(&xs, &ys).unwrap_or(f64::NAN);
    let table: Vec<String> = labels.iter().enumerate().map(|(i, l)| format!("{l} gen {:.2} lp {:.3}", g[i], lp[i])).collect();
    let line = format!("{}; spearman(linprobe, -frechet_gen) {rho:.3} over {} points", table.join(", "), records.len());
    let gen_order = g[all] <= g[clip].min(g[ssl]) && g[clip].min(g[ssl]) < g[ae];
    let lp_order = lp[all] >= lp[clip].max(lp[ssl]) && lp[clip].max(lp[ssl]) > lp[ae];
    ensure!(gen_order, "frechet_gen ordering violated: {line}");
    ensure!(lp_order, "linprobe ordering violated: {line}");
    ensure!(rho >= 0.6, "rank correlation too weak: {line}");
    Ok(line)
}

// ---------------------------------------------------------------------------
// 8. Data scaling

const DATA_STEPS: u64 = 2000;

fn data_scaling() -> Outcome {
    let sizes = [1000usize, 8000, 64000];
    let values = || sizes.iter().map(|&n| AxisValue::Number(n as f64)).collect::<Vec<_>>();
    let vtp = medians(&sweep("data-vtp", Axis::Data, values(), Objectives::ALL, DATA_STEPS, sizes[0], None)?, gen);
    let ae = medians(&sweep("data-ae", Axis::Data, values(), Objectives::AE, DATA_STEPS, sizes[0], None)?, gen);
    let (vtp_gain, ae_gain) = (rel_gain(vtp[0], vtp[2]), rel_gain(ae[0], ae[2]));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" → ");
    let line = format!(
        "vtp frechet_gen {} ({:+.1}%), ae {} ({:+.1}%)",
        fmt(&vtp),
        100.0 * vtp_gain,
        fmt(&ae),
        100.0 * ae_gain
    );
    ensure!(vtp[0] > vtp[1] && vtp[1] > vtp[2], "vtp does not improve strictly with data: {line}");
    ensure!(2.0 * ae_gain <= vtp_gain, "ae gains too much relative to vtp: {line}");
    Ok(line)
}

// ---------------------------------------------------------------------------

/// Directional claims that do not reproduce at one-core scale. They still run
/// and print PASS or FAIL, but a FAIL does not set the exit status.
const NON_GATING: [u32; 3] = [6, 7, 8];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "cost model", cost_model),
        (2, "gradient suite", gradient_suite),
        (3, "loss identities", loss_identities),
        (4, "training mechanics", training_mechanics),
        (5, "overfit smoke", overfit_smoke),
        (6, "rec/gen paradox", rec_gen_paradox),
        (7, "objective ablation", objective_ablation),
        (8, "data scaling", data_scaling),
        (9, "guards", guards),
    ];
    let (mut passed, mut failed, mut gating) = (0, 0, 0);
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                passed += 1;
                println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}");
            }
            Err(detail) => {
                failed += 1;
                let note = if NON_GATING.contains(&n) {
                    " (non-gating)"
                } else {
                    gating += 1;
                    ""
                };
                println!("criterion {n} ({name}): FAIL{note} [{secs:.1}s] {detail}");
            }
        }
    }
    println!("acceptance: {passed} passed, {failed} failed ({} non-gating)", failed - gating);
    if gating > 0 {
        std::process::exit(1);
    }
}
