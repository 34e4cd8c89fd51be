use dbf_base::BlockDynamics;
use dbf_core::koopman::{koopman_pretrain, KoopmanOptions};
use dbf_nn::{LinearBlockSpec, NetworkSpec};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rollouts(truth: &BlockDynamics, count: usize, steps: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut z = DVector::from_fn(truth.dim(), |_, _| rng.gen_range(-2.0..2.0));
            (0..steps)
                .map(|_| {
                    let row = z.iter().copied().collect();
                    z = truth.apply(&z).unwrap();
                    row
                })
                .collect()
        })
        .collect()
}

#[test]
fn identity_maps_recover_the_spectrum() {
    let truth = BlockDynamics::new(vec![0.95f64.ln(), 0.99f64.ln()], vec![0.3, 1.1]).unwrap();
    let data = rollouts(&truth, 40, 30, 1);
    let opts = KoopmanOptions::identity(4, 8, 3000, 2);
    let out = koopman_pretrain(&data, &opts).unwrap();
    let mut learned = out.dynamics.eig_magnitudes();
    let mut want = truth.eig_magnitudes();
    learned.sort_by(f64::total_cmp);
    want.sort_by(f64::total_cmp);
    for (l, w) in learned.iter().zip(&want) {
        assert!((l - w).abs() < 1e-3, "learned {learned:?} want {want:?}");
    }
    assert!(out.losses.last().unwrap() < &out.losses[0]);
}

#[test]
fn one_step_rotation_is_learned() {
    let truth = BlockDynamics::new(vec![0.0], vec![0.7]).unwrap();
    let data = rollouts(&truth, 20, 20, 3);
    let opts = KoopmanOptions::identity(2, 1, 3000, 4);
    let out = koopman_pretrain(&data, &opts).unwrap();
    let mut worst: f64 = 0.0;
    for traj in &data {
        for w in traj.windows(2) {
            let pred = out.dynamics.apply(&DVector::from_row_slice(&w[0])).unwrap();
            worst = worst.max((pred - DVector::from_row_slice(&w[1])).amax());
        }
    }
    assert!(worst < 1e-3, "one-step error {worst}");
}

#[test]
fn zero_steps_return_the_random_initialisation() {
    let truth = BlockDynamics::new(vec![0.0], vec![0.7]).unwrap();
    let data = rollouts(&truth, 2, 5, 5);
    let opts = KoopmanOptions::identity(2, 1, 0, 6);
    let out = koopman_pretrain(&data, &opts).unwrap();
    let expected = BlockDynamics::random(2, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(out.dynamics, expected);
    assert!(out.losses.is_empty());
}

#[test]
fn learned_encoder_reduces_the_loss() {
    let truth = BlockDynamics::new(vec![-0.02], vec![0.4]).unwrap();
    let data = rollouts(&truth, 20, 20, 7);
    let spec = |i, o| Some(NetworkSpec::LinearBlock(LinearBlockSpec { input: i, hidden: 16, output: o, blocks: 2 }));
    let opts = KoopmanOptions {
        encoder: spec(2, 4),
        decoder: spec(4, 2),
        lr: 3e-3,
        ..KoopmanOptions::identity(4, 4, 400, 8)
    };
    let out = koopman_pretrain(&data, &opts).unwrap();
    let head: f64 = out.losses[..20].iter().sum();
    let tail: f64 = out.losses[out.losses.len() - 20..].iter().sum();
    assert!(tail < 0.5 * head, "loss {head} → {tail}");
    assert_eq!(out.encode(&dbf_nn::Tensor::zeros(3, 2)).shape(), [3, 4]);
}
