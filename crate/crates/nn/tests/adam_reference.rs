use dbf_nn::{Adam, ParamSet, Tensor};

/// Plain scalar Adam, written out from the update equations.
struct ReferenceAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ReferenceAdam {
    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        for i in 0..x.len() {
            self.m[i] = 0.9 * self.m[i] + 0.1 * g[i];
            self.v[i] = 0.999 * self.v[i] + 0.001 * g[i] * g[i];
            let mhat = self.m[i] / (1.0 - 0.9f64.powi(self.t));
            let vhat = self.v[i] / (1.0 - 0.999f64.powi(self.t));
            x[i] -= lr * mhat / (vhat.sqrt() + 1e-8);
        }
    }
}

#[test]
fn hundred_steps_on_quadratic_match_reference() {
    // f(x) = ½ Σ c_i (x_i − a_i)²
    let c = [0.5, 2.0, 10.0, 0.1, 3.0];
    let a = [1.0, -2.0, 0.3, 4.0, -0.7];
    let grad = |x: &[f64]| -> Vec<f64> { x.iter().enumerate().map(|(i, xi)| c[i] * (xi - a[i])).collect() };

    let mut ps = ParamSet::new();
    ps.add("x", Tensor::row(vec![0.0, 0.0, 0.0, 0.0, 0.0]));
    let mut adam = Adam::new(0.05, &ps);
    let mut reference = ReferenceAdam { m: vec![0.0; 5], v: vec![0.0; 5], t: 0 };
    let mut x_ref = vec![0.0; 5];

    let mut max_diff: f64 = 0.0;
    for _ in 0..100 {
        let g = grad(&ps.values()[0].data);
        adam.update(&mut ps, &[Tensor::row(g)], None).unwrap();
        let g_ref = grad(&x_ref);
        reference.step(&mut x_ref, &g_ref, 0.05);
        for (p, r) in ps.values()[0].data.iter().zip(&x_ref) {
            max_diff = max_diff.max((p - r).abs());
        }
    }
    assert!(max_diff < 1e-10, "max parameter diff {max_diff:e}");
    assert_eq!(adam.step, 100);
}
