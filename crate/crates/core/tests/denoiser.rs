use embdiff::decoding::top_lengths;
use embdiff::denoiser::{train, DenoiserParameters, Model, ModelShape, Task, TrainConfig};
use embdiff::schedules::{build_schedule, ScheduleKind};
use ndarray::{s, Array2};

fn shape(self_conditioning: bool) -> ModelShape {
    ModelShape { vocab: 16, dim: 4, d_model: 8, n_max: 6, self_conditioning }
}

fn latent(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin())
}

#[test]
fn zero_output_projection_predicts_zero() {
    let mut p = DenoiserParameters::init(shape(false), 1.0, 2).unwrap();
    p.out_w.fill(0.0);
    p.out_b.fill(0.0);
    let m = Model::new(p, build_schedule(ScheduleKind::Cosine, 30).unwrap());
    let out = m.denoise(latent(5).view(), 12, &[4, 5, 6], None).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn output_shape_follows_input() {
    let m = Model::new(
        DenoiserParameters::init(shape(false), 1.0, 2).unwrap(),
        build_schedule(ScheduleKind::Sqrt, 30).unwrap(),
    );
    for n in 1..=6 {
        let z = latent(n);
        let a = m.denoise(z.view(), 30, &[7, 8], None).unwrap();
        assert_eq!(a.dim(), (n, 4));
        assert_eq!(a, m.denoise(z.view(), 30, &[7, 8], None).unwrap());
    }
    assert!(m.denoise(latent(7).view(), 3, &[7], None).is_err());
    assert!(m.denoise(latent(2).view(), 0, &[7], None).is_err());
    assert!(m.denoise(latent(2).view(), 3, &[], None).is_err());
    assert!(m.denoise(latent(2).view(), 3, &[16], None).is_err());
}

#[test]
fn batched_denoising_matches_single_items() {
    let m = Model::new(
        DenoiserParameters::init(shape(true), 1.0, 2).unwrap(),
        build_schedule(ScheduleKind::Sqrt, 30).unwrap(),
    );
    let (za, zb) = (latent(3), latent(5));
    let prev = latent(5).mapv(f64::cos);
    let items = [
        embdiff::denoiser::DenoiseItem { source: &[4, 5], z_t: za.view(), t: 3, prev: None },
        embdiff::denoiser::DenoiseItem { source: &[9, 9, 10], z_t: zb.view(), t: 29, prev: Some(prev.view()) },
    ];
    let many = m.denoise_many(&items).unwrap();
    let a = m.denoise(za.view(), 3, &[4, 5], None).unwrap();
    let b = m.denoise(zb.view(), 29, &[9, 9, 10], Some(prev.view())).unwrap();
    for (x, y) in many[0].iter().zip(a.iter()).chain(many[1].iter().zip(b.iter())) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn self_conditioning_without_estimate_matches_plain_network() {
    let with = DenoiserParameters::init(shape(true), 1.0, 8).unwrap();
    let mut plain = DenoiserParameters::init(shape(false), 1.0, 8).unwrap();
    assert_eq!(with.dec_in_w.slice(s![..4, ..]), plain.dec_in_w);
    assert!(with.dec_in_w.slice(s![4.., ..]).iter().all(|&v| v == 0.0));
    plain.dec_in_w.assign(&with.dec_in_w.slice(s![..4, ..]));
    let schedule = build_schedule(ScheduleKind::Sqrt, 30).unwrap();
    let a = Model::new(with, schedule.clone()).denoise(latent(4).view(), 9, &[5, 6, 7], None).unwrap();
    let b = Model::new(plain, schedule).denoise(latent(4).view(), 9, &[5, 6, 7], None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_length_head_gives_uniform_logits() {
    let mut p = DenoiserParameters::init(shape(false), 1.0, 1).unwrap();
    p.length_w.fill(0.0);
    p.length_b.fill(0.0);
    let m = Model::new(p, build_schedule(ScheduleKind::Sqrt, 30).unwrap());
    let logits = m.predict_length(&[4, 5, 6]).unwrap();
    assert_eq!(logits.len(), 6);
    assert!(logits.iter().all(|&v| v == 0.0));
    let nll = embdiff::diffusion::length_nll(logits.view(), 3, 0.0).unwrap();
    assert!((nll - 6f64.ln()).abs() < 1e-12);
    assert!(m.predict_length(&[]).is_err());
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        vocab: 16,
        dim: 4,
        d_model: 8,
        min_len: 2,
        max_len: 4,
        n_max: 6,
        diffusion_steps: 20,
        batch_size: 4,
        steps: 6,
        warmup: 2,
        log_interval: 2,
        val_size: 4,
        val_k: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_return_the_initialization() {
    let cfg = TrainConfig { steps: 0, ..tiny_config() };
    let out = train(&cfg).unwrap();
    assert_eq!(out.model.params, DenoiserParameters::init(cfg.shape(), cfg.sigma_e, cfg.seed).unwrap());
    assert!(out.metrics.is_empty());
}

#[test]
fn zero_learning_rate_leaves_the_model_unchanged() {
    let cfg = TrainConfig { lr: 0.0, ..tiny_config() };
    let out = train(&cfg).unwrap();
    assert_eq!(out.model.params, DenoiserParameters::init(cfg.shape(), cfg.sigma_e, cfg.seed).unwrap());
    assert_eq!(out.metrics.len(), 3);
    for row in &out.metrics[1..] {
        assert_eq!(row.ani, out.metrics[0].ani);
        assert_eq!(row.val_acc, out.metrics[0].val_acc);
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig { self_conditioning: true, ..tiny_config() };
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.metrics, b.metrics);
}

// Pinned from the seeded default run: 0.058, 0.965, 0.997.
#[test]
fn cipher_accuracy_rises_over_the_first_intervals() {
    let cfg = TrainConfig { steps: 1500, ..TrainConfig::default() };
    let out = train(&cfg).unwrap();
    let acc: Vec<f64> = out.metrics.iter().map(|r| r.val_acc).collect();
    assert_eq!(acc.len(), 3);
    assert!(acc[0] < acc[1] && acc[1] < acc[2], "{acc:?}");
}

#[test]
fn copy_model_learns_the_length() {
    let cfg = TrainConfig { task: Task::Copy, steps: 3000, log_interval: 3000, ..TrainConfig::default() };
    let out = train(&cfg).unwrap();
    let pairs = cfg.sampler().unwrap().validation(64, 99);
    let hits = pairs.iter().filter(|p| top_lengths(&out.model, &p.source, 1).unwrap()[0] == p.source.len()).count();
    assert!(hits as f64 >= 0.9 * pairs.len() as f64, "{hits}/{}", pairs.len());
}
