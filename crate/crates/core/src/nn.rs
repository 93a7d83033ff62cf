//! Scalar-output multilayer perceptron `N(t, x; theta)` on inputs `(t, x)`.
//!
//! Besides the value, the network can emit its spatial gradient `d N / d x`
//! as an ordinary tape expression. The gradient is backpropagation through
//! the layers written out with matmuls and activation-derivative primitives,
//! so a single reverse pass over the weights differentiates through it.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    /// `1 + d`: time followed by the spatial coordinates.
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl MlpArchitecture {
    pub fn new(state_dim: usize, hidden: Vec<usize>, activation: Activation) -> Result<Self> {
        let arch = Self { input_dim: state_dim + 1, hidden, activation };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "input dimension must be at least 2 (time plus one state coordinate), got {}",
                self.input_dim
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "need at least one hidden layer with positive widths, got {:?}",
                self.hidden
            )));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.input_dim - 1
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden);
        widths.push(1);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub architecture: MlpArchitecture,
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(arch: &MlpArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
                Layer {
                    weight: Tensor::matrix(fan_in, fan_out, w).expect("layer shape"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self { architecture: arch.clone(), layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    /// Parameter tensors in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Check that the stored shapes chain from the input through the hidden
    /// widths to a single output.
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        let dims = self.architecture.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!("expected {} layers, found {}", dims.len(), self.layers.len())));
        }
        for (l, ((fan_in, fan_out), layer)) in dims.iter().zip(&self.layers).enumerate() {
            if layer.weight.shape() != [*fan_in, *fan_out] || layer.bias.shape() != [*fan_out] {
                return Err(Error::InvalidArgument(format!(
                    "layer {l}: weight {:?} / bias {:?} do not match {fan_in}x{fan_out}",
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
        }
        Ok(())
    }

    /// Put every parameter on `tape` as a differentiable leaf.
    pub fn record(&self, tape: &mut Tape) -> MlpVars {
        let layers = self.layers.iter().map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone()))).collect();
        MlpVars { layers, activation: self.architecture.activation, state_dim: self.architecture.state_dim() }
    }

    /// Tape-free batch evaluation; same arithmetic as [`MlpVars::forward`].
    pub fn evaluate_batch(&self, t: &[f64], x: &Tensor) -> Result<Vec<f64>> {
        let mut h = network_input(t, x, self.architecture.state_dim())?;
        let act = self.architecture.activation;
        let (last, hidden) = self.layers.split_last().expect("validated architecture");
        for layer in hidden {
            h = tensor::affine_forward(&h, &layer.weight, &layer.bias).map(|z| act.apply(z));
        }
        Ok(tensor::affine_forward(&h, &last.weight, &last.bias).into_data())
    }

    pub fn evaluate(&self, t: f64, x: &[f64]) -> Result<f64> {
        let xt = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.evaluate_batch(&[t], &xt)?[0])
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = Checkpoint { format: CHECKPOINT_FORMAT.to_string(), params: self.clone() };
        fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: Checkpoint = serde_json::from_str(&text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown checkpoint format `{}`", file.format)));
        }
        file.params.validate()?;
        Ok(file.params)
    }
}

const CHECKPOINT_FORMAT: &str = "fbsjnn-mlp-v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    #[serde(flatten)]
    params: MlpParams,
}

/// `[rows, 1 + d]` matrix with time in column 0.
pub fn network_input(t: &[f64], x: &Tensor, state_dim: usize) -> Result<Tensor> {
    if x.rank() != 2 || x.cols() != state_dim || x.rows() != t.len() {
        return Err(Error::Shape { op: "network input", lhs: vec![t.len(), state_dim], rhs: x.shape().to_vec() });
    }
    let mut data = Vec::with_capacity(t.len() * (state_dim + 1));
    for (ti, row) in t.iter().zip(x.data().chunks_exact(state_dim)) {
        data.push(*ti);
        data.extend_from_slice(row);
    }
    Tensor::matrix(t.len(), state_dim + 1, data)
}

/// Network parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
    pub activation: Activation,
    pub state_dim: usize,
}

impl MlpVars {
    /// Weight and bias variables in the same order as [`MlpParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, tape: &mut Tape, t: &[f64], x: &Tensor) -> Result<Var> {
        let input = tape.constant(network_input(t, x, self.state_dim)?);
        self.forward_input(tape, input)
    }

    /// Forward pass from an already assembled `[rows, 1 + d]` input.
    pub fn forward_input(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        Ok(self.hidden_pass(tape, input)?.0)
    }

    /// Value `[rows, 1]` and spatial gradient `[rows, d]`.
    pub fn forward_with_input_grad(&self, tape: &mut Tape, t: &[f64], x: &Tensor) -> Result<(Var, Var)> {
        let input = tape.constant(network_input(t, x, self.state_dim)?);
        let (value, pre) = self.hidden_pass(tape, input)?;

        let rows = tape.shape(input)[0];
        let ones = tape.constant(Tensor::full(&[rows, 1], 1.0));
        let (w_out, _) = *self.layers.last().expect("output layer");
        // d out / d a_L, broadcast over rows.
        let mut delta = tape.matmul_t(ones, false, w_out, true)?;
        for (&(w, _), &z) in self.layers.iter().rev().skip(1).zip(pre.iter().rev()) {
            let slope = tape.activation_derivative(z, self.activation);
            let g = tape.mul(delta, slope)?;
            delta = tape.matmul_t(g, false, w, true)?;
        }
        let grad_x = tape.slice_cols(delta, 1, 1 + self.state_dim)?;
        Ok((value, grad_x))
    }

    /// Returns the output and the hidden pre-activations.
    fn hidden_pass(&self, tape: &mut Tape, input: Var) -> Result<(Var, Vec<Var>)> {
        let (last, hidden) = self.layers.split_last().expect("output layer");
        let mut h = input;
        let mut pre = Vec::with_capacity(hidden.len());
        for &(w, b) in hidden {
            let z = tape.affine(h, w, b)?;
            pre.push(z);
            h = tape.activation(z, self.activation);
        }
        let out = tape.affine(h, last.0, last.1)?;
        Ok((out, pre))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(d: usize, hidden: &[usize], act: Activation) -> MlpArchitecture {
        MlpArchitecture::new(d, hidden.to_vec(), act).unwrap()
    }

    #[test]
    fn architecture_validation() {
        assert!(MlpArchitecture::new(1, vec![], Activation::Tanh).is_err());
        assert!(MlpArchitecture::new(1, vec![4, 0], Activation::Tanh).is_err());
        assert!(MlpArchitecture::new(0, vec![4], Activation::Tanh).is_err());
        let a = arch(3, &[5, 7], Activation::Relu);
        assert_eq!(a.layer_dims(), vec![(4, 5), (5, 7), (7, 1)]);
        assert_eq!(a.param_count(), 5 * 5 + 6 * 7 + 8);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = arch(1, &[3], Activation::Tanh);
        let p1 = MlpParams::init(&a, 7).unwrap();
        let p2 = MlpParams::init(&a, 7).unwrap();
        assert_eq!(p1, p2);
        assert!(p1.layers.iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
        assert_eq!(p1.param_count(), a.param_count());
        assert_ne!(p1, MlpParams::init(&a, 8).unwrap());
    }

    #[test]
    fn init_respects_glorot_bounds() {
        let a = arch(2, &[16, 16], Activation::Tanh);
        let p = MlpParams::init(&a, 3).unwrap();
        for (layer, (i, o)) in p.layers.iter().zip(a.layer_dims()) {
            let limit = (6.0 / (i + o) as f64).sqrt();
            assert!(layer.weight.data().iter().all(|w| w.abs() <= limit));
        }
    }

    #[test]
    fn glorot_sample_mean_is_centered() {
        // 400 x 250 = 1e5 draws; uniform(-l, l) has sd l / sqrt(3).
        let a = arch(399, &[250], Activation::Tanh);
        let p = MlpParams::init(&a, 11).unwrap();
        let w = p.layers[0].weight.data();
        assert_eq!(w.len(), 100_000);
        let limit = (6.0f64 / 650.0).sqrt();
        let sd = limit / 3f64.sqrt();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() <= 3.0 * sd / (w.len() as f64).sqrt(), "{mean}");
    }

    fn zero_params(a: &MlpArchitecture) -> MlpParams {
        let mut p = MlpParams::init(a, 0).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        p
    }

    #[test]
    fn constant_network_outputs_last_bias() {
        let a = arch(2, &[4, 3], Activation::Tanh);
        let mut p = zero_params(&a);
        p.layers.last_mut().unwrap().bias.data_mut()[0] = 0.625;
        let x = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 0.25, 9.0, 3.0]).unwrap();
        let out = p.evaluate_batch(&[0.0, 0.3, 1.0], &x).unwrap();
        assert_eq!(out, vec![0.625; 3]);
    }

    /// `N(t, x) = w . (t, x) + c`: a leaky ReLU with slope 1 is the identity.
    fn linear_network(w: &[f64], c: f64) -> MlpParams {
        let d = w.len() - 1;
        let a = arch(d, &[1], Activation::LeakyRelu { slope: 1.0 });
        let mut p = zero_params(&a);
        p.layers[0].weight.data_mut().copy_from_slice(w);
        p.layers[1].weight.data_mut()[0] = 1.0;
        p.layers[1].bias.data_mut()[0] = c;
        p
    }

    #[test]
    fn single_linear_path_affine_arithmetic() {
        let p = linear_network(&[1.0, 1.0], 0.0);
        assert_eq!(p.evaluate(0.5, &[0.25]).unwrap(), 0.75);
    }

    #[test]
    fn batch_of_identical_inputs_gives_identical_outputs() {
        let a = arch(3, &[8, 8], Activation::Tanh);
        let p = MlpParams::init(&a, 5).unwrap();
        let row = [0.3, -1.0, 2.0];
        let x = Tensor::matrix(6, 3, row.repeat(6)).unwrap();
        let out = p.evaluate_batch(&[0.4; 6], &x).unwrap();
        assert!(out.iter().all(|&v| v == out[0]));
    }

    #[test]
    fn linear_network_input_gradient() {
        let p = linear_network(&[0.7, 2.0, -3.0], 0.1);
        let mut tape = Tape::new();
        let vars = p.record(&mut tape);
        let x = Tensor::matrix(2, 2, vec![0.1, 0.2, -5.0, 7.0]).unwrap();
        let (_, g) = vars.forward_with_input_grad(&mut tape, &[0.0, 1.0], &x).unwrap();
        assert_eq!(tape.value(g).data(), &[2.0, -3.0, 2.0, -3.0]);
    }

    #[test]
    fn value_channel_matches_forward_and_plain_evaluation() {
        let a = arch(3, &[6, 5], Activation::LeakyRelu { slope: 0.1 });
        let p = MlpParams::init(&a, 9).unwrap();
        let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
        let t = [0.0, 0.25, 0.5, 1.0];
        let mut tape = Tape::new();
        let vars = p.record(&mut tape);
        let v1 = vars.forward(&mut tape, &t, &x).unwrap();
        let (v2, _) = vars.forward_with_input_grad(&mut tape, &t, &x).unwrap();
        assert_eq!(tape.value(v1), tape.value(v2));
        assert_eq!(tape.value(v1).data(), p.evaluate_batch(&t, &x).unwrap().as_slice());
        for r in 0..4 {
            let single = p.evaluate(t[r], &x.data()[r * 3..r * 3 + 3]).unwrap();
            assert_eq!(single, tape.value(v1).data()[r]);
        }
    }

    #[test]
    fn tanh_gradient_is_even_under_odd_symmetric_weights() {
        // Zero biases make the network odd in (t, x); its gradient is even.
        let a = arch(2, &[5, 4], Activation::Tanh);
        let p = MlpParams::init(&a, 21).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.3, -0.8, -0.3, 0.8]).unwrap();
        let mut tape = Tape::new();
        let vars = p.record(&mut tape);
        let (_, g) = vars.forward_with_input_grad(&mut tape, &[0.6, -0.6], &x).unwrap();
        let g = tape.value(g).data();
        assert!((g[0] - g[2]).abs() < 1e-15 && (g[1] - g[3]).abs() < 1e-15, "{g:?}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let a = arch(2, &[3], Activation::Tanh);
        let p = MlpParams::init(&a, 1).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(p.evaluate_batch(&[0.0], &x), Err(Error::Shape { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let a = arch(3, &[7, 5], Activation::LeakyRelu { slope: 0.01 });
        let p = MlpParams::init(&a, 1234).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        p.save_json(&path).unwrap();
        let q = MlpParams::load_json(&path).unwrap();
        assert_eq!(p, q);
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn checkpoint_rejects_bad_shapes() {
        let a = arch(1, &[2], Activation::Tanh);
        let mut p = MlpParams::init(&a, 1).unwrap();
        p.layers[1].bias = Tensor::zeros(&[2]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        p.save_json(&path).unwrap();
        assert!(MlpParams::load_json(&path).is_err());
    }
}
