use crwn::nets::{cross_entropy_batch, predict, Model, ModelSpec};
use crwn::neuromod::TaskContext;
use crwn::rngcore::RngStream;
use ndarray::Array2;
use proptest::prelude::*;

fn random_input(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = RngStream::new(seed, 99);
    Array2::from_shape_fn((rows, cols), |_| rng.next_f64() * 2.0 - 0.5)
}

fn perturbed_context(model: &Model<f64>, seed: u64) -> TaskContext<f64> {
    let mut ctx = model.new_context(0, 0.9, 1.0).unwrap();
    let mut rng = RngStream::new(seed, 7);
    for v in &mut ctx.vs {
        v.mapv_inplace(|x| x + 0.3 * (rng.next_f64() - 0.5));
    }
    ctx
}

fn loss(model: &Model<f64>, ctx: &TaskContext<f64>, x: &Array2<f64>, labels: &[usize]) -> f64 {
    let logits = model.logits(x.view(), ctx).unwrap();
    cross_entropy_batch(logits.view(), labels).unwrap().0
}

fn check(spec: ModelSpec, batch: usize) {
    let h = 1e-6;
    let mut model = Model::<f64>::build(spec).unwrap();
    let d_in = model.spec().d_in();
    let d_out = model.spec().d_out;
    let x = random_input(batch, d_in, 3);
    let labels: Vec<usize> = (0..batch).map(|i| (i * 3) % d_out).collect();
    let ctx = perturbed_context(&model, 5);
    let (logits, trace) = model.forward(x.view(), &ctx).unwrap();
    let (_, delta) = cross_entropy_batch(logits.view(), &labels).unwrap();
    let grads = model.backward(&trace, delta.view(), true).unwrap();

    let close = |fd: f64, an: f64, what: &str| {
        assert!(
            (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
            "{what}: numeric {fd} analytic {an}"
        );
    };

    let mut c = ctx.clone();
    c.alpha += h;
    let up = loss(&model, &c, &x, &labels);
    c.alpha -= 2.0 * h;
    let dn = loss(&model, &c, &x, &labels);
    close((up - dn) / (2.0 * h), grads.alpha, "alpha");

    for l in 0..ctx.vs.len() {
        let n = ctx.vs[l].len();
        for j in (0..n).step_by((n / 6).max(1)) {
            let mut c = ctx.clone();
            c.vs[l][j] += h;
            let up = loss(&model, &c, &x, &labels);
            c.vs[l][j] -= 2.0 * h;
            let dn = loss(&model, &c, &x, &labels);
            close((up - dn) / (2.0 * h), grads.vs[l][j], &format!("v[{l}][{j}]"));
        }
    }

    let bases = grads.bases.unwrap();
    let original = model.basis_values();
    for l in 0..original.len() {
        let (rows, cols) = original[l].dim();
        for (i, j) in [(0, 0), (rows - 1, cols - 1), (rows / 2, cols / 3)] {
            let mut b = original.clone();
            b[l][[i, j]] += h;
            model.load_bases(&b).unwrap();
            let up = loss(&model, &ctx, &x, &labels);
            b[l][[i, j]] -= 2.0 * h;
            model.load_bases(&b).unwrap();
            let dn = loss(&model, &ctx, &x, &labels);
            close((up - dn) / (2.0 * h), bases[l][[i, j]], &format!("R[{l}][{i},{j}]"));
        }
        model.load_bases(&original).unwrap();
    }
}

#[test]
fn flynet_gradients_match_differences() {
    check(ModelSpec::flynet(3, [1, 4, 5], 4, 11), 5);
}

#[test]
fn mlp_gradients_match_differences() {
    check(ModelSpec::mlp(vec![12, 9], [1, 3, 4], 5, 2), 4);
}

#[test]
fn cnn_gradients_match_differences() {
    check(ModelSpec::cnn(1, [2, 8, 8], 3, 4), 3);
}

#[test]
fn rebuilding_from_spec_is_bit_identical() {
    for spec in [
        ModelSpec::flynet(2, [1, 6, 6], 10, 8),
        ModelSpec::mlp(vec![16], [1, 6, 6], 10, 8),
        ModelSpec::cnn(1, [3, 8, 8], 10, 8),
    ] {
        let a = Model::<f32>::build(spec.clone()).unwrap();
        let b = Model::<f32>::build(spec).unwrap();
        assert_eq!(a.basis_values(), b.basis_values());
        assert_eq!(a.gates(), b.gates());
        assert_eq!(a.fingerprint(), b.fingerprint());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn positive_gain_scaling_keeps_predictions(seed in 0u64..1000, c in 0.1f64..10.0) {
        // ReLU networks without biases are positively homogeneous in the
        // shared gain: one factor per modulated layer.
        let model = Model::<f64>::build(ModelSpec::mlp(vec![10], [1, 2, 4], 6, seed)).unwrap();
        let x = random_input(4, 8, seed);
        let ctx = perturbed_context(&model, seed);
        let mut scaled = ctx.clone();
        scaled.alpha *= c;
        let a = model.logits(x.view(), &ctx).unwrap();
        let b = model.logits(x.view(), &scaled).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p * c * c - q).abs() <= 1e-9 * (1.0 + q.abs()));
        }
        prop_assert_eq!(predict(a.view()), predict(b.view()));
    }

    #[test]
    fn flynet_logits_are_linear_in_gain(seed in 0u64..1000, c in 0.1f64..10.0) {
        let model = Model::<f64>::build(ModelSpec::flynet(2, [1, 3, 3], 4, seed)).unwrap();
        let x = random_input(3, 9, seed);
        let ctx = perturbed_context(&model, seed);
        let mut scaled = ctx.clone();
        scaled.alpha *= c;
        let a = model.logits(x.view(), &ctx).unwrap();
        let b = model.logits(x.view(), &scaled).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p * c - q).abs() <= 1e-9 * (1.0 + q.abs()));
        }
    }
}
