use dbf_base::envs::trajectory::generate;
use dbf_base::envs::{BouncePatchConfig, EnvConfig};
use dbf_base::gauss::PairMap;
use dbf_base::GaussianBelief;
use dbf_core::elbo::normalized_cross_correlation;
use dbf_core::model::{DbfConfig, DbfModel, DynamicsSpec, EmissionFamily, EmissionSpec};
use dbf_core::train::{train_linear, TrainOptions};
use dbf_core::{BouncePatchObs, DbfError};
use dbf_nn::{LinearBlockSpec, NetworkSpec, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn lb(input: usize, hidden: usize, output: usize, blocks: usize) -> NetworkSpec {
    NetworkSpec::LinearBlock(LinearBlockSpec { input, hidden, output, blocks })
}

fn model_with(families: Vec<EmissionFamily>, decoder_blocks: usize, seed: u64) -> DbfModel {
    let dz = families.len();
    let cfg = DbfConfig {
        latent_dim: 4,
        obs_dim: 3,
        encoder: lb(3, 8, 4, 2),
        dynamics: DynamicsSpec::Learned { log_q: -6.0 },
        emission: Some(EmissionSpec {
            decoder: lb(4, 8, dz, decoder_blocks),
            families,
            log_sigma_init: 0.0,
            log_kappa_init: 5.0,
        }),
        vprior_variance: 1e8,
        init_variance: 100.0,
        samples: 1,
    };
    DbfModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn set(model: &mut DbfModel, name: &str, t: Tensor) {
    let id = model.params.find(name).unwrap();
    *model.params.get_mut(id) = t;
}

fn random_belief(rng: &mut ChaCha8Rng) -> GaussianBelief {
    let a = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-0.5..0.5));
    GaussianBelief::dense(DVector::from_fn(4, |_, _| rng.sample(StandardNormal)), &a * a.transpose() + DMatrix::identity(4, 4) * 0.1).unwrap()
}

#[test]
fn sharp_identity_emission_returns_the_mean() {
    let mut model = model_with(vec![EmissionFamily::Gaussian; 4], 1, 1);
    set(&mut model, "phi.block0.fc.w", Tensor::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 }));
    set(&mut model, "phi.block0.fc.b", Tensor::zeros(1, 4));
    set(&mut model, "emission.log_scale", Tensor::full(1, 4, -20.0));
    let mu = DVector::from_vec(vec![0.3, -1.2, 2.0, 0.1]);
    let belief = GaussianBelief::isotropic(mu.clone(), 1e-14).unwrap();
    let s = model.emission_sample(&belief, 200, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for i in 0..200 {
        assert!((s.row(i).transpose() - &mu).amax() < 1e-5);
    }
}

#[test]
fn emission_sample_mean_matches_monte_carlo_decoder_mean() {
    let model = model_with(vec![EmissionFamily::Gaussian; 2], 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let belief = random_belief(&mut rng);
    let n = 100_000;
    let z = model.emission_sample(&belief, n, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    // independent draws of φ(h)
    let h = belief.sample(n, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let rows: Vec<DVector<f64>> = (0..n).map(|i| h.row(i).transpose()).collect();
    let phi = model.decode(&rows);
    for j in 0..2 {
        let zs: Vec<f64> = (0..n).map(|i| z[(i, j)]).collect();
        let ps: Vec<f64> = phi.iter().map(|v| v[j]).collect();
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / n as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
            (m, var / n as f64)
        };
        let (mz, vz) = stats(&zs);
        let (mp, vp) = stats(&ps);
        assert!((mz - mp).abs() < 4.0 * (vz + vp).sqrt(), "dim {j}: {mz} vs {mp}");
    }
}

#[test]
fn emission_sample_is_reproducible_and_wraps_angles() {
    let model = model_with(vec![EmissionFamily::VonMises, EmissionFamily::Gaussian], 2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let belief = random_belief(&mut rng);
    let a = model.emission_sample(&belief, 500, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = model.emission_sample(&belief, 500, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert!(a.column(0).iter().all(|v| *v > -std::f64::consts::PI && *v <= std::f64::consts::PI));
    assert!(matches!(model.emission_sample(&belief, 0, &mut rng), Err(DbfError::Base(_))));
}

#[test]
fn checkpoint_round_trip_reproduces_estimates() {
    let model = model_with(vec![EmissionFamily::VonMises, EmissionFamily::Gaussian], 3, 10);
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path(), "m", serde_json::json!({ "note": 1 })).unwrap();
    let (back, extra) = DbfModel::load(dir.path(), "m").unwrap();
    assert_eq!(extra["note"], 1);
    assert_eq!(back.params, model.params);
    assert_eq!(back.config, model.config);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let obs: Vec<DVector<f64>> = (0..6).map(|_| DVector::from_fn(3, |_, _| rng.sample(StandardNormal))).collect();
    assert_eq!(back.estimate(&obs).unwrap(), model.estimate(&obs).unwrap());
}

#[test]
fn odd_latent_dimension_is_a_config_error() {
    let mut cfg = model_with(vec![EmissionFamily::Gaussian], 2, 1).config;
    cfg.latent_dim = 3;
    assert!(matches!(DbfModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)), Err(DbfError::Config(_))));
}

#[test]
fn tape_update_reports_a_dominating_virtual_prior() {
    let mut model = model_with(vec![EmissionFamily::Gaussian], 2, 12);
    model.config.vprior_variance = 1e-3;
    let tape = dbf_nn::Tape::new();
    let p = model.params.bind(&tape);
    let obs = tape.constant(Tensor::zeros(2, 3));
    let err = model.filter_tape(&p, &tape, obs, 1, 2).unwrap_err();
    assert!(err.is_numerical(), "{err}");
}

#[test]
fn bouncing_patch_texture_is_learned_from_frames_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let env_cfg = BouncePatchConfig::desk(&mut rng);
    let train = generate(&EnvConfig::BouncePatch(env_cfg.clone()), 20, 2000, 2).unwrap();
    let q = env_cfg.log_q.exp();
    let cfg = DbfConfig {
        latent_dim: 4,
        obs_dim: env_cfg.obs_dim(),
        encoder: lb(env_cfg.obs_dim(), 64, 4, 3),
        dynamics: DynamicsSpec::Fixed {
            pairs: vec![PairMap { a11: 1.0, a12: env_cfg.dt, a21: 0.0, a22: 1.0 }; 2],
            noise: vec![q; 4],
        },
        emission: None,
        vprior_variance: 1e8,
        init_variance: 100.0,
        samples: 1,
    };
    let mut model = DbfModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let init = vec![(0..env_cfg.patch * env_cfg.patch).map(|_| rng.gen_range(0.0..1.0)).collect()];
    let obs = BouncePatchObs::new(&mut model.params, env_cfg.frame, env_cfg.patch, 1, env_cfg.sigma, init).unwrap();
    let before = normalized_cross_correlation(&obs.current_patches(&model.params)[0], &env_cfg.patches[0]);
    let mut opts = TrainOptions::new(3e-3, 32, 6, 10);
    opts.freeze_g_epochs = 1;
    let report = train_linear(&mut model, &obs, &train, false, &opts).unwrap();
    assert!(report.aborted.is_none());
    let after = normalized_cross_correlation(&obs.current_patches(&model.params)[0], &env_cfg.patches[0]);
    assert!(after > 0.9, "cross-correlation {before:.3} → {after:.3}");

    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path(), "bounce", serde_json::Value::Null).unwrap();
    let (back, _) = DbfModel::load(dir.path(), "bounce").unwrap();
    assert_eq!(back.params, model.params);
}
