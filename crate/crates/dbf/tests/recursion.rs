use dbf_base::envs::LgssmConfig;
use dbf_base::filters::kf_step_gain;
use dbf_base::gauss::SymBlock;
use dbf_base::{BlockDynamics, DiagonalNoise, GaussianBelief, LinearGaussianMap};
use dbf_core::recursion::{dbf_filter, dbf_predict, dbf_update, linear_ioo, IooOutput, Transition, VirtualPrior};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn random_vec(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

#[test]
fn analytic_ioo_reproduces_kalman_filter() {
    for (seed, d) in [(1u64, 2usize), (2, 3), (3, 4), (4, 6)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = LgssmConfig::random(d, &mut rng);
        let (a, q, h, r) = cfg.matrices();
        let dyn_map = LinearGaussianMap::new(a.clone(), q.clone()).unwrap();
        let obs = LinearGaussianMap::new(h.clone(), r.clone()).unwrap();
        let init = GaussianBelief::dense(DVector::zeros(d), DMatrix::identity(d, d) * 100.0).unwrap();
        let vp = VirtualPrior::flat(d);

        let mut z = random_vec(d, &mut rng);
        let mut observations = Vec::new();
        for _ in 0..100 {
            z = &a * z + random_vec(d, &mut rng) * 0.3;
            observations.push(&h * &z + random_vec(d, &mut rng) * 0.4);
        }
        let ioo: Vec<IooOutput> = observations.iter().map(|o| linear_ioo(&h, &r, o, &vp).unwrap()).collect();
        let out = dbf_filter(&init, &Transition::Dense { map: dyn_map.clone() }, &ioo, &vp).unwrap();

        // gain-form Kalman recursion as the oracle; t = 1 is a pure update
        let no_motion = LinearGaussianMap::noiseless(DMatrix::identity(d, d));
        let mut kf = kf_step_gain(&init, &no_motion, &obs, &observations[0]).unwrap();
        for t in 0..observations.len() {
            if t > 0 {
                kf = kf_step_gain(&kf, &dyn_map, &obs, &observations[t]).unwrap();
            }
            let b = &out.filtered[t];
            let dm = (b.mean() - kf.mean()).amax();
            let dc = max_abs(&(b.dense_cov() - kf.dense_cov()));
            assert!(dm < 1e-8 && dc < 1e-8, "d={d} t={t}: mean gap {dm:e}, cov gap {dc:e}");
        }
    }
}

fn random_block_setup(seed: u64, n: usize, t: usize) -> (BlockDynamics, DiagonalNoise, Vec<IooOutput>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 2 * n;
    let dynamics = BlockDynamics::random(d, &mut rng).unwrap();
    let noise = DiagonalNoise {
        log_variance: (0..d).map(|_| rng.gen_range(-6.0..0.0)).collect(),
    };
    let ioo = (0..t)
        .map(|_| {
            let g: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..3.0)).collect();
            IooOutput::diagonal(random_vec(d, &mut rng), &g).unwrap()
        })
        .collect();
    (dynamics, noise, ioo)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn block_and_dense_filters_agree(seed in 0u64..10_000, n in 1usize..5, t in 1usize..30) {
        let (dynamics, noise, ioo) = random_block_setup(seed, n, t);
        let d = 2 * n;
        let vp = VirtualPrior::standard(d);
        let block_init = GaussianBelief::isotropic(DVector::zeros(d), 100.0).unwrap();
        prop_assert!(block_init.is_block());
        let dense_init = block_init.to_dense();
        let blocks = dbf_filter(&block_init, &Transition::Blocks { dynamics: dynamics.clone(), noise: noise.clone() }, &ioo, &vp).unwrap();
        let dense = dbf_filter(&dense_init, &Transition::Dense { map: dynamics.to_map(&noise).unwrap() }, &ioo, &vp).unwrap();
        for (b, e) in blocks.filtered.iter().zip(&dense.filtered) {
            prop_assert!(b.is_block());
            prop_assert!((b.mean() - e.mean()).amax() < 1e-10);
            prop_assert!(max_abs(&(b.dense_cov() - e.dense_cov())) < 1e-10);
        }
        for (b, e) in blocks.predictive.iter().zip(&dense.predictive) {
            prop_assert!(max_abs(&(b.dense_cov() - e.dense_cov())) < 1e-10);
        }
    }

    #[test]
    fn block_predict_matches_dense(seed in 0u64..10_000, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * n;
        let dynamics = BlockDynamics::random(d, &mut rng).unwrap();
        let noise = DiagonalNoise { log_variance: (0..d).map(|_| rng.gen_range(-8.0..1.0)).collect() };
        let blocks: Vec<SymBlock> = (0..n)
            .map(|_| {
                let (x, y): (f64, f64) = (rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0));
                let c = rng.gen_range(-0.9..0.9) * (x * y).sqrt();
                SymBlock { xx: x, xy: c, yy: y }
            })
            .collect();
        let belief = GaussianBelief::blocks(random_vec(d, &mut rng), blocks).unwrap();
        let p_block = dbf_predict(&belief, &dynamics, &noise).unwrap();
        let p_dense = belief.to_dense().pushforward(&dynamics.to_map(&noise).unwrap()).unwrap();
        prop_assert!(p_block.is_block());
        prop_assert!((p_block.mean() - p_dense.mean()).amax() < 1e-12);
        prop_assert!(max_abs(&(p_block.dense_cov() - p_dense.dense_cov())) < 1e-12);
    }

    /// With G⁻¹ − V⁻¹ ⪰ 0 the update can only shrink the covariance.
    #[test]
    fn update_never_inflates_covariance(seed in 0u64..10_000, n in 1usize..5) {
        let (dynamics, noise, ioo) = random_block_setup(seed, n, 6);
        let d = 2 * n;
        let vp = VirtualPrior::standard(d);
        let init = GaussianBelief::isotropic(DVector::zeros(d), 100.0).unwrap();
        let out = dbf_filter(&init, &Transition::Blocks { dynamics, noise }, &ioo, &vp).unwrap();
        for (post, pred) in out.filtered.iter().zip(&out.predictive) {
            let diff = pred.dense_cov() - post.dense_cov();
            let min_eig = diff.symmetric_eigen().eigenvalues.min();
            prop_assert!(min_eig > -1e-10, "min eigenvalue {min_eig}");
        }
    }
}

#[test]
fn recursion_depends_on_observation_order() {
    let (dynamics, noise, mut ioo) = random_block_setup(7, 2, 8);
    let vp = VirtualPrior::standard(4);
    let init = GaussianBelief::isotropic(DVector::zeros(4), 100.0).unwrap();
    let tr = Transition::Blocks { dynamics, noise };
    let a = dbf_filter(&init, &tr, &ioo, &vp).unwrap();
    ioo.swap(0, 5);
    ioo.swap(2, 7);
    let b = dbf_filter(&init, &tr, &ioo, &vp).unwrap();
    assert!((a.filtered[7].mean() - b.filtered[7].mean()).amax() > 1e-6);
}

#[test]
fn update_of_unit_gaussian_by_unit_ioo_halves() {
    let pred = GaussianBelief::dense(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
    let ioo = IooOutput::dense(DVector::from_vec(vec![1.0]), DMatrix::identity(1, 1)).unwrap();
    let post = dbf_update(&pred, &ioo, &VirtualPrior::standard(1)).unwrap();
    assert!((post.mean()[0] - 0.5).abs() < 1e-7);
    assert!((post.variances()[0] - 0.5).abs() < 1e-7);
}
