mod common;

use std::path::Path;

use candle_core::Tensor;
use vtp_core::eval::{EvalConfig, FeatureExtractor};
use vtp_core::genharness::DiTConfig;
use vtp_core::sweep::{
    plan_sweep, report, run_sweep_with, Axis, AxisValue, Correlation, Harness, HarnessSpec, Registry, RunStatus, SweepOptions, SweepSpec, FAILED_DIR,
    RECORDS_DIR,
};
use vtp_core::trainer::Objectives;
use vtp_core::Error;

/// 2×2 average-pooled pixels: 12 features.
struct PoolExtractor;

impl FeatureExtractor for PoolExtractor {
    fn features(&self, images: &Tensor) -> vtp_core::Result<Tensor> {
        let (b, _, h, _) = images.dims4()?;
        Ok(images.avg_pool2d(h / 2)?.reshape((b, ()))?)
    }

    fn hash(&self) -> String {
        "pool2x2".into()
    }
}

fn tiny_spec() -> SweepSpec {
    let dit = DiTConfig {
        depth: 1,
        width: 16,
        heads: 2,
        latent_channels: 4,
        latent_grid: 2,
        num_classes: 4,
        sampler_steps: 4,
        train_steps: 4,
        batch: 16,
        warmup_steps: 1,
        num_samples: 32,
        train_images: 256,
        ..Default::default()
    };
    SweepSpec {
        name: "tiny".into(),
        axis: Axis::Objective,
        values: vec![AxisValue::Text("ae".into()), AxisValue::Text("clip+ae".into())],
        model: common::micro_model(),
        train: common::train(Objectives::AE, 2, 8),
        dataset: common::synthetic(256, 4, 16),
        harness: HarnessSpec {
            dit,
            eval: EvalConfig {
                n_eval: 32,
                n_probe_train: 32,
                n_probe_test: 16,
                n_stats: 256,
            },
            dataset: common::synthetic(512, 4, 16),
            ..Default::default()
        },
        seeds: vec![0],
        ..Default::default()
    }
}

#[test]
fn registry_never_overwrites() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::at(dir.path());
    assert!(!dir.path().join(RECORDS_DIR).exists());
    let mut a = common::record("p1", Axis::Compute, 1.0, 0, 5.0, "d");
    let path = reg.insert(&mut a, false).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut again = common::record("p1", Axis::Compute, 1.0, 0, 9.0, "d");
    assert!(matches!(reg.insert(&mut again, false), Err(Error::Registry(_))));
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    let repaired = reg.insert(&mut again, true).unwrap();
    assert_eq!(again.point_id, "p1-r1");
    assert_ne!(repaired, path);
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    let mut failed = common::record("p2", Axis::Compute, 2.0, 0, 1.0, "d");
    failed.status = RunStatus::Failed { error: "boom".into() };
    failed.metrics = None;
    reg.insert(&mut failed, false).unwrap();
    assert!(dir.path().join(FAILED_DIR).join("p2.json").exists());
    assert!(!reg.contains("p2"));

    let ids: Vec<String> = reg.records().unwrap().into_iter().map(|r| r.point_id).collect();
    assert_eq!(ids, ["p1", "p1-r1"]);
    assert!(!dir.path().join("registry.lock").exists());
}

#[test]
fn rerunning_a_finished_sweep_schedules_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::at(dir.path());
    let spec = tiny_spec();
    let harness = Harness::with_extractor(&spec.harness, Box::new(PoolExtractor)).unwrap();
    let first = run_sweep_with(&spec, &reg, &SweepOptions::default(), &harness).unwrap();
    assert_eq!(first.len(), 2);
    for r in &first {
        assert!(r.is_ok(), "{:?}", r.status);
        let m = r.metrics.as_ref().unwrap();
        assert!(m.frechet_gen.unwrap().is_finite());
        assert_eq!(m.dit_hash.as_deref(), Some(spec.harness.dit.hash().as_str()));
    }
    assert!(plan_sweep(&spec, &reg).unwrap().iter().all(|j| j.done));
    let second = run_sweep_with(&spec, &reg, &SweepOptions::default(), &harness).unwrap();
    assert!(second.is_empty());
    assert_eq!(reg.records().unwrap().len(), 2);
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn report_refuses_mixed_harnesses() {
    let out = tempfile::tempdir().unwrap();
    let records = vec![
        common::record("a", Axis::Compute, 1.0, 0, 3.0, "dit-one"),
        common::record("b", Axis::Compute, 2.0, 0, 2.0, "dit-one"),
        common::record("c", Axis::Compute, 4.0, 0, 1.0, "dit-two"),
    ];
    let Err(Error::Incomparable(msg)) = report(&records, Axis::Compute, out.path()) else {
        panic!("mixed hashes were accepted");
    };
    assert!(msg.contains("dit-one ← [a, b]") && msg.contains("dit-two ← [c]"), "{msg}");
    assert!(files_in(out.path()).is_empty());
}

#[test]
fn two_points_have_no_trend() {
    let out = tempfile::tempdir().unwrap();
    let records = vec![common::record("a", Axis::Compute, 1.0, 0, 3.0, "d"), common::record("b", Axis::Compute, 2.0, 0, 2.0, "d")];
    let summary = report(&records, Axis::Compute, out.path()).unwrap();
    assert_eq!(summary.lines.len(), 1);
    for c in summary.lines[0].spearman.values() {
        assert!(matches!(c, Correlation::NotApplicable("n/a")));
    }
    assert_eq!(
        files_in(out.path()),
        ["compute-frechet_gen.svg", "compute-linprobe.svg", "compute-psnr.svg", "compute-summary.json", "compute.csv"]
    );
    let csv = std::fs::read_to_string(out.path().join("compute.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "# dit_hash=d extractor_hash=ex");
    assert!(lines.next().unwrap().starts_with("point_id,axis_value,objectives,flops"));
    assert_eq!(lines.count(), 2);

    assert!(matches!(report(&records[..1], Axis::Compute, out.path()), Err(Error::InvalidArgument(_))));
}

#[test]
fn monotone_sweep_reports_perfect_rank_correlation() {
    let out = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for (i, x) in [1.0, 2.0, 4.0, 8.0, 16.0].into_iter().enumerate() {
        for seed in 0..3u64 {
            // Seed 2 is an outlier that the median must ignore.
            let noise = if seed == 2 { 100.0 } else { seed as f64 * 0.01 };
            records.push(common::record(&format!("p{i}s{seed}"), Axis::Compute, x, seed, 10.0 / x + noise, "d"));
        }
    }
    let summary = report(&records, Axis::Compute, out.path()).unwrap();
    let line = &summary.lines[0];
    assert_eq!(line.points.len(), 5);
    assert!(line.points.iter().all(|p| p.seeds == 3));
    assert!((line.points[0].values["frechet_gen"] - 10.01).abs() < 1e-12);
    assert!(matches!(line.spearman["frechet_gen"], Correlation::Value(v) if v == -1.0));
    assert!(matches!(line.spearman["psnr"], Correlation::Value(v) if v == 1.0));
}
