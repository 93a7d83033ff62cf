use fbsjnn::autodiff::{Activation, Tape};
use fbsjnn::jumpsim::{simulate_forward, TimeGrid};
use fbsjnn::nn::{Layer, MlpArchitecture, MlpParams};
use fbsjnn::problems::{bsb_jumps, highdim_pide, pure_jump_1d, ProblemSpec};
use fbsjnn::scheme::{
    evaluate_scheme, integral_term, loss_and_grad, loss_value, loss_with_model, JumpEvents, OracleModel, SolutionModel,
};
use fbsjnn::tensor::Tensor;

/// `N(t, x) = <w, x> + w_t t + b` through one identity-slope hidden layer.
fn linear_network(w: &[f64], w_t: f64, b: f64) -> MlpParams {
    let d = w.len();
    let arch = MlpArchitecture::new(d, vec![d + 1], Activation::LeakyRelu { slope: 1.0 }).unwrap();
    let mut p = MlpParams::init(&arch, 0).unwrap();
    let mut eye = vec![0.0; (d + 1) * (d + 1)];
    for i in 0..=d {
        eye[i * (d + 1) + i] = 1.0;
    }
    p.layers[0] = Layer { weight: Tensor::matrix(d + 1, d + 1, eye).unwrap(), bias: Tensor::vector(vec![0.0; d + 1]) };
    let out: Vec<f64> = std::iter::once(w_t).chain(w.iter().copied()).collect();
    p.layers[1] = Layer { weight: Tensor::matrix(d + 1, 1, out).unwrap(), bias: Tensor::vector(vec![b]) };
    p
}

#[test]
fn loss_is_invariant_under_path_permutation() {
    let p = bsb_jumps(3, 0.8, 0.05, 0.4, 0.1, 0.2).unwrap();
    let batch = simulate_forward(&p, TimeGrid::new(1.0, 5).unwrap(), 40, 17).unwrap();
    let params = MlpParams::init(&MlpArchitecture::new(3, vec![12, 12], Activation::Tanh).unwrap(), 4).unwrap();
    let order: Vec<usize> = (0..40).map(|k| (k * 17 + 5) % 40).collect();
    let shuffled = batch.permuted(&order).unwrap();
    assert_ne!(batch, shuffled);
    let a = loss_value(&params, &batch, &p).unwrap().total;
    let b = loss_value(&params, &shuffled, &p).unwrap().total;
    assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    assert!(batch.permuted(&[0, 0]).is_err());
}

#[test]
fn integral_term_is_exact_for_linear_networks() {
    let w = [0.7, -1.3, 0.4];
    let params = linear_network(&w, 0.2, 0.1);
    let p = highdim_pide(3, 2.0, 0.1, 0.25, 0.3, 0.5).unwrap();
    let batch = simulate_forward(&p, TimeGrid::new(1.0, 4).unwrap(), 25, 9).unwrap();
    let events = JumpEvents::from_batch(&batch);
    assert!(events.len() > 10, "need jumps for a meaningful check");

    let steps = batch.grid().steps();
    let dt = batch.grid().dt();
    let (t, x) = batch.node_major(0..steps);
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let (y, g) = vars.value_and_grad(&mut tape, &t, &x).unwrap();
    let i = integral_term(&vars, &mut tape, &t, &x, y, g, &events, &p, dt).unwrap();

    // Exact compensated jump integral of a linear function on the same marks.
    let c = 2.0 * 0.3;
    let mut expected = vec![-c * w.iter().sum::<f64>(); t.len()];
    for (k, &r) in events.rows.iter().enumerate() {
        let mark = &events.marks[k * 3..(k + 1) * 3];
        expected[r] += w.iter().zip(mark).map(|(a, b)| a * b).sum::<f64>() / dt;
    }
    for (got, want) in tape.value(i).data().iter().zip(&expected) {
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn diffusion_term_is_sigma_transpose_gradient() {
    let tau = 0.4;
    let p = bsb_jumps(2, 0.3, 0.05, tau, 0.02, 0.01).unwrap();
    let batch = simulate_forward(&p, TimeGrid::new(1.0, 3).unwrap(), 6, 2).unwrap();
    let params = MlpParams::init(&MlpArchitecture::new(2, vec![8], Activation::Tanh).unwrap(), 1).unwrap();
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let (ev, _, _) = evaluate_scheme(&vars, &mut tape, &batch, &p).unwrap();
    let (_, x) = batch.node_major(0..3);
    let grad = tape.value(ev.grad_x).data().to_vec();
    let z = tape.value(ev.diffusion_terms).data();
    for (k, (zk, gk)) in z.iter().zip(&grad).enumerate() {
        assert_eq!(*zk, tau * x.data()[k] * gk);
    }
}

#[test]
fn toy_loss_gradient_matches_finite_differences() {
    let p = pure_jump_1d(3.0, 0.4, 0.25).unwrap();
    let batch = simulate_forward(&p, TimeGrid::new(1.0, 2).unwrap(), 4, 5).unwrap();
    let params = MlpParams::init(&MlpArchitecture::new(1, vec![6, 6], Activation::Tanh).unwrap(), 8).unwrap();
    let (_, grads) = loss_and_grad(&params, &batch, &p).unwrap();
    let h = 1e-5;
    for (k, g) in grads.iter().enumerate() {
        for i in 0..g.numel() {
            let mut plus = params.clone();
            plus.tensors_mut()[k].data_mut()[i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[k].data_mut()[i] -= h;
            let fd = (loss_value(&plus, &batch, &p).unwrap().total - loss_value(&minus, &batch, &p).unwrap().total) / (2.0 * h);
            let a = g.data()[i];
            assert!((a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-3), "param {k}/{i}: {a} vs {fd}");
        }
    }
}

/// The pure-jump oracle residual vanishes identically; the quadratic
/// solution of the high-dimensional problem leaves an `O(dt^2)` per-step
/// residual from `|dX|^2`, so its loss must shrink with the step.
#[test]
fn quadratic_oracle_residual_decreases_with_step() {
    let d = 2;
    let p = highdim_pide(d, 0.3, 0.1, 0.25, 0.01, 0.1).unwrap();
    let oracle = OracleModel {
        dim: d,
        value: |_t: f64, x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() / 2.0,
        grad: |_t: f64, x: &[f64], g: &mut [f64]| {
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = *xi;
            }
        },
    };
    let mut dts = Vec::new();
    let mut losses = Vec::new();
    for steps in [4usize, 8, 16, 32] {
        let batch = simulate_forward(&p, TimeGrid::new(1.0, steps).unwrap(), 10_000, 3).unwrap();
        let mut tape = Tape::new();
        let (_, b) = loss_with_model(&oracle, &mut tape, &batch, &p).unwrap();
        assert!(b.terminal.abs() < 1e-28);
        dts.push(1.0 / steps as f64);
        losses.push(b.total);
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    let slope = (losses[0] / losses[3]).ln() / (dts[0] / dts[3]).ln();
    assert!(slope > 1.5, "slope {slope}, losses {losses:?}");
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let p = highdim_pide(3, 0.3, 0.1, 0.25, 0.01, 0.1).unwrap();
    let batch = simulate_forward(&p, TimeGrid::new(1.0, 2).unwrap(), 3, 1).unwrap();
    let params = MlpParams::init(&MlpArchitecture::new(2, vec![4], Activation::Tanh).unwrap(), 1).unwrap();
    assert!(loss_value(&params, &batch, &p).is_err());
}

#[test]
fn pure_jump_oracle_terminal_term_is_exactly_zero() {
    let p = pure_jump_1d(0.3, 0.4, 0.25).unwrap();
    let batch = simulate_forward(&p, TimeGrid::new(1.0, 8).unwrap(), 500, 1).unwrap();
    let oracle = OracleModel { dim: 1, value: |_t: f64, x: &[f64]| x[0], grad: |_t: f64, _x: &[f64], g: &mut [f64]| g[0] = 1.0 };
    let mut tape = Tape::new();
    let (_, b) = loss_with_model(&oracle, &mut tape, &batch, &p).unwrap();
    assert_eq!(b.terminal, 0.0);
    assert!(b.total < 1e-28);
    assert_eq!(p.dim(), 1);
}
