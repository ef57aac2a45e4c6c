use candle_core::{DType, Device, Tensor};

use condlane::backbone::Variant;
use condlane::data::{generate_scene, SceneConfig};
use condlane::geometry::ImageSpec;
use condlane::pipeline::{
    load_checkpoint, prepare_samples, save_checkpoint, ModelConfig, PreparedSample, TrainConfig, Trainer,
};

fn image() -> ImageSpec {
    ImageSpec::new(64, 160).unwrap()
}

fn samples(cfg: &ModelConfig, n: u64, fork: f64) -> Vec<PreparedSample> {
    let scene = SceneConfig {
        image: cfg.image,
        lane_count: [2, 3],
        fork_probability: fork,
        line_thickness: 2.0,
        ..SceneConfig::default()
    };
    let raw: Vec<_> = (0..n).map(|i| generate_scene(&scene, i).unwrap()).collect();
    prepare_samples(&raw, cfg, DType::F32, &Device::Cpu).unwrap()
}

fn trainer(cfg: &ModelConfig, lr: f64) -> Trainer {
    let tc = TrainConfig {
        learning_rate: lr,
        batch_size: 2,
        ..TrainConfig::default()
    };
    Trainer::new(cfg, &tc, DType::F32, &Device::Cpu).unwrap()
}

fn batch(s: &[PreparedSample]) -> Tensor {
    Tensor::stack(&s.iter().map(|p| p.image.clone()).collect::<Vec<_>>(), 0).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut cfg = ModelConfig::compact(Variant::Small, image());
    cfg.rim.enabled = true;
    let data = samples(&cfg, 2, 1.0);
    let mut tr = trainer(&cfg, 1e-3);
    let refs: Vec<&PreparedSample> = data.iter().collect();
    tr.train_step(&refs).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = save_checkpoint(dir.path(), "ckpt", &cfg, &tr.varmap, tr.step, tr.epoch).unwrap();
    let loaded = load_checkpoint(&path, &Device::Cpu).unwrap();
    assert_eq!(loaded.manifest.step, 1);
    assert_eq!(&loaded.manifest.model, &cfg);

    let x = batch(&data);
    let a = tr.model.forward(&x).unwrap();
    let b = loaded.model.forward(&x).unwrap();
    let same = |p: &Tensor, q: &Tensor| {
        let p: Vec<f32> = p.flatten_all().unwrap().to_vec1().unwrap();
        let q: Vec<f32> = q.flatten_all().unwrap().to_vec1().unwrap();
        p.iter().zip(&q).all(|(u, v)| u.to_bits() == v.to_bits())
    };
    assert!(same(&a.shared, &b.shared));
    assert!(same(&a.proposal.param_map, &b.proposal.param_map));
    assert_eq!(tr.model.detect(&x, 0.05).unwrap(), loaded.model.detect(&x, 0.05).unwrap());
}

#[test]
fn tampered_weights_are_rejected() {
    let cfg = ModelConfig::compact(Variant::Small, image());
    let tr = trainer(&cfg, 1e-3);
    let dir = tempfile::tempdir().unwrap();
    let path = save_checkpoint(dir.path(), "c", &cfg, &tr.varmap, 0, 0).unwrap();
    let w = dir.path().join("c.safetensors");
    let mut bytes = std::fs::read(&w).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&w, bytes).unwrap();
    assert!(load_checkpoint(&path, &Device::Cpu).is_err());
}

#[test]
fn threshold_above_every_score_gives_nothing() {
    let cfg = ModelConfig::compact(Variant::Small, image());
    let tr = trainer(&cfg, 1e-3);
    let det = tr.model.detect(&batch(&samples(&cfg, 2, 0.0)), 1.01).unwrap();
    assert!(det.iter().all(|d| d.peaks.is_empty() && d.lanes.is_empty() && d.steps.is_empty()));
}

#[test]
fn recurrent_steps_bound_the_instances() {
    let mut cfg = ModelConfig::compact(Variant::Small, image());
    cfg.rim.enabled = true;
    let tr = trainer(&cfg, 1e-3);
    // low threshold so an untrained heatmap still yields peaks
    for d in tr.model.detect(&batch(&samples(&cfg, 2, 1.0)), 0.0).unwrap() {
        assert!(!d.peaks.is_empty());
        assert_eq!(d.steps.len(), d.peaks.len());
        assert!(d.steps.iter().all(|&s| (1..=cfg.rim.max_steps).contains(&s)));
        assert!(d.lanes.len() <= d.steps.iter().sum::<usize>());
        for l in &d.lanes {
            let k = d.peaks.iter().position(|p| (p.x, p.y) == l.cell).unwrap();
            assert!(l.step < d.steps[k]);
        }
    }
}

#[test]
fn fixed_batch_loss_goes_down_and_totals_add_up() {
    let mut cfg = ModelConfig::compact(Variant::Small, image());
    cfg.rim.enabled = true;
    let data = samples(&cfg, 2, 1.0);
    let refs: Vec<&PreparedSample> = data.iter().collect();
    let mut tr = trainer(&cfg, 1e-3);
    let w = tr.train.weights;
    let totals: Vec<f64> = (0..50)
        .map(|_| {
            let r = tr.train_step(&refs).unwrap();
            let c = r.components;
            let sum = c.point + 1.0 * c.row + 1.0 * c.range + 0.4 * c.offset + 1.0 * c.state;
            assert!((r.total - sum).abs() <= 1e-6);
            assert!((r.total - c.total(&w)).abs() <= 1e-6);
            assert!(c.state > 0.0 && c.offset > 0.0);
            r.total
        })
        .collect();
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let ma: Vec<f64> = totals.windows(10).map(avg).collect();
    assert!(ma.last().unwrap() < ma.first().unwrap(), "{ma:?}");
}

#[test]
fn disabled_offset_reports_zero() {
    let mut cfg = ModelConfig::compact(Variant::Small, image());
    cfg.offset_enabled = false;
    let data = samples(&cfg, 2, 0.0);
    let refs: Vec<&PreparedSample> = data.iter().collect();
    let mut tr = trainer(&cfg, 1e-3);
    let r = tr.train_step(&refs).unwrap();
    assert_eq!(r.components.offset, 0.0);
    assert_eq!(r.components.state, 0.0);
    let c = r.components;
    assert!((r.total - (c.point + c.row + c.range)).abs() <= 1e-6);
}
