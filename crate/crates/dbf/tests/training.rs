use dbf_base::envs::trajectory::generate;
use dbf_base::envs::{EnvConfig, LgssmConfig};
use dbf_base::filters::kf_filter;
use dbf_base::gauss::PairMap;
use dbf_base::{GaussianBelief, LinearGaussianMap};
use dbf_core::model::{DbfConfig, DbfModel, DynamicsSpec, EmissionFamily, EmissionSpec};
use dbf_core::train::{train_joint, train_linear, DataSource, TrainOptions};
use dbf_core::{LinearGaussianObs, Minibatch, Result};
use dbf_nn::{LinearBlockSpec, NetworkSpec, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lb(input: usize, hidden: usize, output: usize, blocks: usize) -> NetworkSpec {
    NetworkSpec::LinearBlock(LinearBlockSpec { input, hidden, output, blocks })
}

fn scalar_model(seed: u64) -> DbfModel {
    let cfg = DbfConfig {
        latent_dim: 2,
        obs_dim: 1,
        encoder: lb(1, 16, 2, 3),
        dynamics: DynamicsSpec::Learned { log_q: (0.05f64).ln() },
        emission: Some(EmissionSpec {
            decoder: lb(2, 16, 1, 3),
            families: vec![EmissionFamily::Gaussian],
            log_sigma_init: 0.0,
            log_kappa_init: 5.0,
        }),
        vprior_variance: 1e8,
        init_variance: 100.0,
        samples: 1,
    };
    DbfModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn scalar_env() -> EnvConfig {
    EnvConfig::Lgssm(LgssmConfig::scalar(0.9, 0.1, 1.0, 1.0))
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let data = generate(&scalar_env(), 10, 8, 1).unwrap();
    let mut model = scalar_model(2);
    let before = model.params.clone();
    let mut opts = TrainOptions::new(1e-3, 4, 3, 0);
    opts.max_steps = Some(0);
    let report = train_joint(&mut model, &data, &opts).unwrap();
    assert_eq!(report.steps, 0);
    assert_eq!(model.params, before);
}

#[test]
fn scalar_lgssm_training_approaches_the_kalman_filter() {
    let env = scalar_env();
    let train = generate(&env, 20, 4000, 10).unwrap();
    let test = generate(&env, 20, 50, 11).unwrap();
    let mut model = scalar_model(3);
    // a constant rate, then a tenth of it to settle the single-sample noise
    for (lr, epochs, seed) in [(3e-3, 8, 4), (3e-4, 4, 5)] {
        let mut opts = TrainOptions::new(lr, 32, epochs, seed);
        opts.chunk = 16;
        let report = train_joint(&mut model, &train, &opts).unwrap();
        assert!(report.aborted.is_none(), "{:?}", report.aborted);
    }

    let dyn_map = LinearGaussianMap::new(DMatrix::from_element(1, 1, 0.9), DMatrix::from_element(1, 1, 0.1)).unwrap();
    let obs = LinearGaussianMap::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
    let init = GaussianBelief::dense(DVector::zeros(1), DMatrix::from_element(1, 1, 100.0)).unwrap();
    let (mut gap, mut n) = (0.0, 0);
    for i in 0..test.count() {
        let o = test.obs_sequence(i);
        let kf = kf_filter(&init, &dyn_map, &obs, &o).unwrap();
        let est = model.estimate(&o).unwrap();
        // skip the first steps where both are dominated by the initial belief
        for t in 5..o.len() {
            gap += (est[t][0] - kf[t].mean()[0]).powi(2);
            n += 1;
        }
    }
    let msg = gap / n as f64;
    assert!(msg < 0.1, "mean-square gap to KF means {msg}");
}

/// Serves NaN observations from the given step on.
struct Poisoned<'a> {
    inner: &'a dbf_base::envs::TrajectoryBatch,
    calls: std::sync::atomic::AtomicUsize,
    from: usize,
}

impl DataSource for Poisoned<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn steps(&self) -> usize {
        DataSource::steps(self.inner)
    }

    fn minibatch(&self, indices: &[usize]) -> Result<Minibatch> {
        let k = self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        let mut mb = self.inner.minibatch(indices)?;
        if k >= self.from {
            mb.obs.data.iter_mut().for_each(|v| *v = f64::NAN);
        }
        Ok(mb)
    }
}

#[test]
fn divergence_aborts_with_the_last_good_checkpoint() {
    let data = generate(&scalar_env(), 8, 64, 21).unwrap();
    let poisoned = Poisoned {
        inner: &data,
        calls: Default::default(),
        from: 3,
    };
    let dir = tempfile::tempdir().unwrap();
    let mut model = scalar_model(5);
    let mut opts = TrainOptions::new(1e-3, 8, 2, 6);
    opts.checkpoint_dir = Some(dir.path().to_path_buf());
    let report = train_joint(&mut model, &poisoned, &opts).unwrap();
    assert_eq!(report.steps, 3);
    assert!(report.aborted.is_some());
    assert!(model.params.values().iter().all(|t| t.is_finite()));

    // the same three clean steps without poison give the same parameters
    let mut clean = scalar_model(5);
    opts.checkpoint_dir = None;
    opts.max_steps = Some(3);
    train_joint(&mut clean, &data, &opts).unwrap();
    assert_eq!(clean.params, model.params);

    let (loaded, _) = DbfModel::load(dir.path(), "last_good").unwrap();
    assert_eq!(loaded.params, model.params);
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let data = generate(&scalar_env(), 8, 48, 31).unwrap();
    let mut opts = TrainOptions::new(1e-3, 16, 1, 7);
    opts.chunk = 4;
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut model = scalar_model(8);
            let report = train_joint(&mut model, &data, &opts).unwrap();
            (model.params, report.losses)
        })
    };
    let (p1, l1) = run(1);
    let (p3, l3) = run(3);
    assert_eq!(p1, p3);
    assert_eq!(l1, l3);
}

#[test]
fn g_network_is_frozen_during_the_first_epoch() {
    let env = EnvConfig::Lgssm(LgssmConfig::random(4, &mut ChaCha8Rng::seed_from_u64(40)));
    let data = generate(&env, 6, 32, 41).unwrap();
    let (_, _, h, r) = match &env {
        EnvConfig::Lgssm(c) => c.matrices(),
        _ => unreachable!(),
    };
    let obs = LinearGaussianObs::new(h, r.diagonal().iter().copied().collect()).unwrap();
    let cfg = DbfConfig {
        latent_dim: 4,
        obs_dim: 4,
        encoder: lb(4, 8, 4, 2),
        dynamics: DynamicsSpec::Fixed {
            pairs: vec![PairMap { a11: 0.9, a12: 0.0, a21: 0.0, a22: 0.9 }; 2],
            noise: vec![0.1; 4],
        },
        emission: None,
        vprior_variance: 1e8,
        init_variance: 100.0,
        samples: 1,
    };
    let g_values = |m: &DbfModel| -> Vec<Tensor> { m.params.ids_with_prefix("g.").map(|id| m.params.get(id).clone()).collect() };
    let f_values = |m: &DbfModel| -> Vec<Tensor> { m.params.ids_with_prefix("f.").map(|id| m.params.get(id).clone()).collect() };

    let mut model = DbfModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let (g0, f0) = (g_values(&model), f_values(&model));
    let mut opts = TrainOptions::new(1e-2, 8, 1, 43);
    opts.freeze_g_epochs = 1;
    let report = train_linear(&mut model, &obs, &data, true, &opts).unwrap();
    assert_eq!(report.epochs_completed, 1);
    assert_eq!(g_values(&model), g0);
    assert_ne!(f_values(&model), f0);

    let mut model = DbfModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    opts.epochs = 2;
    train_linear(&mut model, &obs, &data, true, &opts).unwrap();
    assert_ne!(g_values(&model), g0);
}

#[test]
fn moving_average_window() {
    let report = dbf_core::TrainReport {
        losses: vec![4.0, 2.0, 6.0, 0.0],
        ..Default::default()
    };
    assert_eq!(report.moving_average(2), vec![4.0, 3.0, 4.0, 3.0]);
}
