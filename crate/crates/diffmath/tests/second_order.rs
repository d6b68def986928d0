use diffmath::{GradMode, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

#[test]
fn square_penalty_second_derivative() {
    let tape = Tape::<f64>::with_mode(GradMode::BuildGradGraph);
    let x = tape.leaf(Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
    let d_out = x.square().unwrap().sum().unwrap();
    let g = tape.input_gradient(&d_out, &x).unwrap();
    assert_eq!(g.value().data(), &[2.0, -4.0, 1.0]);
    let penalty = g.square().unwrap().sum().unwrap();
    let grads = tape.backward(&penalty).unwrap();
    assert_eq!(grads.get(&x).unwrap().data(), &[8.0, -16.0, 4.0]);
}

#[test]
fn linear_map_has_constant_penalty() {
    for x0 in [[0.0, 1.0], [5.0, -3.0]] {
        let tape = Tape::<f64>::with_mode(GradMode::BuildGradGraph);
        let x = tape.leaf(Tensor::from_f64(vec![2], &x0).unwrap());
        let c = tape.constant(Tensor::from_f64(vec![2], &[3.0, -1.5]).unwrap());
        let d_out = x.mul(&c).unwrap().sum().unwrap();
        let g = tape.input_gradient(&d_out, &x).unwrap();
        let penalty = g.square().unwrap().sum().unwrap();
        assert_eq!(penalty.item().unwrap(), 11.25);
        let grads = tape.backward(&penalty).unwrap();
        assert_eq!(grads.get_or_zeros(&x).data(), &[0.0, 0.0]);
    }
}

struct TinyDisc {
    k1: Tensor<f64>,
    b1: Tensor<f64>,
    k2: Tensor<f64>,
    w: Tensor<f64>,
}

impl TinyDisc {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            k1: random(&mut rng, &[4, 2, 3, 3], 0.6),
            b1: random(&mut rng, &[1, 4, 1, 1], 0.3),
            k2: random(&mut rng, &[3, 4, 3, 3], 0.4),
            w: random(&mut rng, &[1, 12], 0.5),
        }
    }

    fn params(&self) -> [&Tensor<f64>; 4] {
        [&self.k1, &self.b1, &self.k2, &self.w]
    }

    fn with_param(&self, i: usize, t: Tensor<f64>) -> Self {
        let mut p = [self.k1.clone(), self.b1.clone(), self.k2.clone(), self.w.clone()];
        p[i] = t;
        let [k1, b1, k2, w] = p;
        Self { k1, b1, k2, w }
    }
}

/// conv -> leaky -> pool -> conv -> leaky -> linear, summed over the batch.
fn disc<'t>(p: [Var<'t, f64>; 4], x: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let [k1, b1, k2, w] = p;
    let h = x.conv2d(&k1, 1, 1)?.add(&b1)?.leaky_relu(0.2)?.avg_pool2d(2)?;
    let h = h.conv2d(&k2, 1, 1)?.leaky_relu(0.2)?;
    let n = x.shape()[0];
    let flat = h.reshape(&[n, 12])?;
    flat.matmul_t(&w)?.sum()
}

fn penalty_first_order(d: &TinyDisc, x: &Tensor<f64>) -> f64 {
    let tape = Tape::new();
    let p = d.params().map(|t| tape.constant(t.clone()));
    let xv = tape.leaf(x.clone());
    let out = disc(p, xv).unwrap();
    let g = tape.backward(&out).unwrap().get_or_zeros(&xv);
    g.data().iter().map(|v| v * v).sum()
}

#[test]
fn r1_double_backprop_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let d = TinyDisc::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random(&mut rng, &[2, 2, 4, 4], 1.0);

        let tape = Tape::with_mode(GradMode::BuildGradGraph);
        let p = d.params().map(|t| tape.leaf(t.clone()));
        let xv = tape.leaf(x.clone());
        let out = disc(p, xv).unwrap();
        let gx = tape.input_gradient(&out, &xv).unwrap();
        let penalty = gx.square().unwrap().sum().unwrap();
        let pv = penalty.item().unwrap();
        assert!((pv - penalty_first_order(&d, &x)).abs() < 1e-12 * pv.max(1.0));
        let grads = tape.backward(&penalty).unwrap();

        let h = 1e-5;
        for (i, param) in d.params().iter().enumerate() {
            let analytic = grads.get_or_zeros(&p[i]);
            for j in 0..param.numel() {
                let bump = |delta: f64| {
                    let mut v = param.to_vec();
                    v[j] += delta;
                    penalty_first_order(&d.with_param(i, Tensor::new(param.shape().to_vec(), v).unwrap()), &x)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                worst = worst.max((analytic.data()[j] - fd).abs() / fd.abs().max(1.0));
            }
        }
    }
    assert!(worst <= 1e-3, "worst relative error {worst:e}");
}
