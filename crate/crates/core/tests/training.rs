use rsds::datagen::gen_cosine_toy;
use rsds::flow::FlowStack;
use rsds::model::Model;
use rsds::rmsm::{RmsmArch, RmsmParams};
use rsds::rng::Sampler;
use rsds::trainer::{fit, TrainConfig, Trainer};

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr_flow: 1e-3,
        lr_rmsm: 3e-3,
        threads: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn training_improves_the_likelihood() {
    let (data, _) = gen_cosine_toy(0.1, 30, 48, 0.05, 1).unwrap();
    let arch = RmsmArch { regimes: 3, latent_dim: 1, transition_hidden: vec![8], ..RmsmArch::default() };
    let rmsm = RmsmParams::random(&arch, &mut Sampler::new(2, 1)).unwrap();
    let model = Model::new(FlowStack::identity(1, 1).unwrap(), rmsm).unwrap();
    let (_, report) = fit(&data.x, &small_config(12), model).unwrap();
    let first = report.epochs.first().unwrap().loglik_per_step;
    let last = report.epochs.last().unwrap().loglik_per_step;
    assert!(last > first + 0.1, "loglik {first} -> {last}");
    assert!(report.epochs.iter().all(|e| e.loglik_per_step.is_finite() && e.rejected_steps == 0));
}

#[test]
fn generating_model_is_near_stationary() {
    let (data, truth) = gen_cosine_toy(0.1, 40, 64, 0.05, 3).unwrap();
    let model = Model::new(FlowStack::identity(1, 1).unwrap(), truth).unwrap();
    let mut cfg = small_config(3);
    cfg.pca_init = false;
    cfg.pca_align_weight = 0.0;
    cfg.lr_rmsm = 1e-4;
    let before: f64 = data.x.iter().map(|x| model.loglik(x, cfg.sigma_eps).unwrap()).sum();
    let (trained, _) = fit(&data.x, &cfg, model).unwrap();
    let after: f64 = data.x.iter().map(|x| trained.loglik(x, cfg.sigma_eps).unwrap()).sum();
    let steps = (data.len() * data.seq_len()) as f64;
    // Training from the optimum may only move within sampling noise.
    assert!(((after - before) / steps).abs() < 0.05, "{before} -> {after}");
}

#[test]
fn split_training_matches_single_run() {
    let (data, _) = gen_cosine_toy(0.1, 20, 24, 0.05, 5).unwrap();
    let arch = RmsmArch { regimes: 3, latent_dim: 1, transition_hidden: vec![6], ..RmsmArch::default() };
    let rmsm = RmsmParams::random(&arch, &mut Sampler::new(6, 1)).unwrap();
    let model = Model::new(FlowStack::identity(1, 1).unwrap(), rmsm).unwrap();

    let (straight, _) = fit(&data.x, &small_config(4), model.clone()).unwrap();

    let mut first = Trainer::new(model, small_config(4), &data.x).unwrap();
    for _ in 0..2 {
        first.run_epoch(&data.x).unwrap();
    }
    let (step, epoch, adam) = (first.step(), first.epoch(), first.adam().clone());
    let mut second = Trainer::resume(first.into_model(), small_config(4), &data.x, adam, step, epoch).unwrap();
    for _ in 0..2 {
        second.run_epoch(&data.x).unwrap();
    }
    assert_eq!(second.model(), &straight);
}
