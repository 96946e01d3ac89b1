//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Batches are row-major `batch x dim` matrices. Weights are stored
//! `out x in`, so a layer computes `x W^T + b` followed by its activation.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"LRPM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the activation's output.
    fn backprop(self, output: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => Zip::from(grad).and(output).for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Tanh => Zip::from(grad).and(output).for_each(|g, &y| *g *= 1.0 - y * y),
            Activation::Identity => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Values cached by [`Mlp::forward`] for the matching backward pass.
///
/// `activations[k]` is the input to layer `k`; the final entry is the network
/// output. Hidden derivatives are recovered from post-activation values.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    activations: Vec<Array2<f64>>,
}

impl ForwardTape {
    pub fn layer_count(&self) -> usize {
        self.activations.len() - 1
    }

    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("tape holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameter gradients shaped exactly like an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<DenseGrad>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().chain(l.bias.iter()).map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|&v| v == 0.0))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| {
            [
                l.weight.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
    }

    fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
    }
}

impl Mlp {
    /// Builds a network with `hidden` activations and an identity output layer.
    ///
    /// Weights are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases start at zero.
    pub fn new(sizes: &[usize], hidden: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "mlp needs at least an input and an output size, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!("mlp layer sizes must be positive, got {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..bound));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation: if k + 1 == n { Activation::Identity } else { hidden },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::InvalidConfig("mlp needs at least one layer".into()));
        };
        if last.activation != Activation::Identity {
            return Err(Error::InvalidConfig("final mlp layer must use the identity activation".into()));
        }
        for l in &layers {
            check_dim("layer bias", l.output_dim(), l.bias.len())?;
            if l.input_dim() == 0 || l.output_dim() == 0 {
                return Err(Error::InvalidConfig("mlp layers must be non-empty".into()));
            }
        }
        for w in layers.windows(2) {
            check_dim("layer chaining", w[0].output_dim(), w[1].input_dim())?;
        }
        Ok(Self {
            layers: layers
                .into_iter()
                .map(|l| Dense {
                    weight: l.weight.as_standard_layout().into_owned(),
                    bias: l.bias.as_standard_layout().into_owned(),
                    activation: l.activation,
                })
                .collect(),
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        check_dim("flat parameters", self.param_count(), values.len())?;
        let mut it = values.iter().copied();
        for slice in self.slices_mut() {
            for (dst, src) in slice.iter_mut().zip(&mut it) {
                *dst = src;
            }
        }
        Ok(())
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| {
            [
                l.weight.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
    }

    fn layer_forward(layer: &Dense, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&layer.weight.t());
        z += &layer.bias;
        layer.activation.apply(&mut z);
        z
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("mlp input", self.input_dim(), input.ncols())?;
        let mut x = Self::layer_forward(&self.layers[0], &input);
        for layer in &self.layers[1..] {
            x = Self::layer_forward(layer, &x.view());
        }
        Ok(x)
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardTape)> {
        check_dim("mlp input", self.input_dim(), input.ncols())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_owned());
        for layer in &self.layers {
            let next = Self::layer_forward(layer, &activations[activations.len() - 1].view());
            activations.push(next);
        }
        let tape = ForwardTape { activations };
        Ok((tape.output().clone(), tape))
    }

    /// Gradients of `sum(output_grad .* output)` with respect to the input and all parameters.
    pub fn backward(&self, tape: &ForwardTape, output_grad: ArrayView2<f64>) -> Result<(Array2<f64>, MlpGrads)> {
        let mut grads = MlpGrads::zeros_like(self);
        let input_grad = self.backward_accumulate(tape, output_grad, &mut grads, true)?;
        Ok((input_grad.expect("input gradient requested"), grads))
    }

    /// Like [`Mlp::backward`] but adds parameter gradients into `grads`.
    ///
    /// The input gradient is only computed when `want_input_grad` is set.
    pub fn backward_accumulate(
        &self,
        tape: &ForwardTape,
        output_grad: ArrayView2<f64>,
        grads: &mut MlpGrads,
        want_input_grad: bool,
    ) -> Result<Option<Array2<f64>>> {
        check_dim("tape layers", self.layers.len(), tape.layer_count())?;
        check_dim("gradient layers", self.layers.len(), grads.layers.len())?;
        let out = tape.output();
        check_dim("output grad rows", out.nrows(), output_grad.nrows())?;
        check_dim("output grad cols", out.ncols(), output_grad.ncols())?;

        let mut g = output_grad.to_owned();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            layer.activation.backprop(&tape.activations[k + 1], &mut g);
            let x = &tape.activations[k];
            let gl = &mut grads.layers[k];
            ndarray::linalg::general_mat_mul(1.0, &g.t(), x, 1.0, &mut gl.weight);
            gl.bias += &g.sum_axis(Axis(0));
            if k > 0 || want_input_grad {
                g = g.dot(&layer.weight);
            }
        }
        Ok(want_input_grad.then_some(g))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 9 * self.layers.len() + 8 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.input_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(l.output_dim() as u32).to_le_bytes());
            out.push(l.activation.tag());
        }
        for v in self.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader::new(bytes, "network checkpoint");
        let mlp = Self::read_from(&mut reader)?;
        reader.finish()?;
        Ok(mlp)
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>) -> Result<Self> {
        let magic = r.take(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.corrupt_at(r.pos - CHECKPOINT_MAGIC.len(), "bad magic"));
        }
        let n_layers = r.u32()? as usize;
        if n_layers == 0 {
            return Err(r.corrupt("zero layers"));
        }
        let mut shapes = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let inp = r.u32()? as usize;
            let out = r.u32()? as usize;
            let tag_at = r.pos;
            let act = Activation::from_tag(r.u8()?).ok_or_else(|| r.corrupt_at(tag_at, "unknown activation tag"))?;
            shapes.push((inp, out, act));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (inp, out, act) in shapes {
            let weight = Array2::from_shape_vec((out, inp), r.f64s(inp * out)?).expect("shape matches length");
            let bias = Array1::from(r.f64s(out)?);
            layers.push(Dense {
                weight,
                bias,
                activation: act,
            });
        }
        let at = r.pos;
        Self::from_layers(layers).map_err(|e| r.corrupt_at(at, &e.to_string()))
    }
}

/// Bounds-checked little-endian reader that reports byte offsets on failure.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn corrupt_at(&self, offset: usize, reason: &str) -> Error {
        Error::Corrupt {
            what: self.what,
            offset,
            reason: reason.to_string(),
        }
    }

    pub(crate) fn corrupt(&self, reason: &str) -> Error {
        self.corrupt_at(self.pos, reason)
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(&format!(
                "truncated: needed {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(self.corrupt("trailing bytes"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for an ordered group of networks updated together.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<MlpGrads>,
    second_moment: Vec<MlpGrads>,
    step_count: u64,
}

impl AdamState {
    pub fn new(nets: &[&Mlp], config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: nets.iter().map(|n| MlpGrads::zeros_like(n)).collect(),
            second_moment: nets.iter().map(|n| MlpGrads::zeros_like(n)).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update of every network in `nets`.
    pub fn step(&mut self, nets: &mut [&mut Mlp], grads: &[&MlpGrads]) -> Result<()> {
        check_dim("adam networks", self.first_moment.len(), nets.len())?;
        check_dim("adam gradients", nets.len(), grads.len())?;
        for ((net, g), m) in nets.iter().zip(grads).zip(&self.first_moment) {
            check_dim("adam layers", m.layers.len(), net.layers.len())?;
            check_dim("adam gradient layers", m.layers.len(), g.layers.len())?;
            for ((nl, gl), ml) in net.layers.iter().zip(&g.layers).zip(&m.layers) {
                check_dim("adam weight shape", ml.weight.len(), nl.weight.len())?;
                check_dim("adam gradient shape", ml.weight.len(), gl.weight.len())?;
                check_dim("adam bias shape", ml.bias.len(), gl.bias.len())?;
            }
        }

        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        for (((net, g), m), v) in nets
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((p, g), m), v) in net.slices_mut().zip(g.slices()).zip(m.slices_mut()).zip(v.slices_mut()) {
                for i in 0..p.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        Ok(())
    }
}

/// Rescales a gradient group so its joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut MlpGrads], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(f);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn parameter_count_closed_form() {
        let mlp = Mlp::new(&[3, 128, 128, 3], Activation::Relu, 0).unwrap();
        assert_eq!(mlp.param_count(), 17411);
        assert_eq!(mlp.layers().last().unwrap().activation, Activation::Identity);
        assert_eq!(mlp.layers()[0].activation, Activation::Relu);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Mlp::new(&[4, 16, 2], Activation::Tanh, 7).unwrap();
        assert_eq!(a, Mlp::new(&[4, 16, 2], Activation::Tanh, 7).unwrap());
        assert_ne!(a, Mlp::new(&[4, 16, 2], Activation::Tanh, 8).unwrap());
        assert!(a.layers()[0].weight.iter().all(|w| w.abs() <= 0.5));
        assert!(a.layers()[1].weight.iter().all(|w| w.abs() <= 0.25));
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn degenerate_sizes_rejected() {
        assert!(Mlp::new(&[1], Activation::Relu, 0).is_err());
        assert!(Mlp::new(&[], Activation::Relu, 0).is_err());
        assert!(Mlp::new(&[3, 0, 1], Activation::Relu, 0).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut mlp = Mlp::new(&[3, 8, 2], Activation::Tanh, 1).unwrap();
        mlp.set_flat(&vec![0.0; mlp.param_count()]).unwrap();
        let out = mlp.predict(array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]].view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_is_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_matrix(2, 3, &mut rng);
        let b = array![0.25, -1.5];
        let mlp = Mlp::from_layers(vec![Dense {
            weight: w.clone(),
            bias: b.clone(),
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = random_matrix(4, 3, &mut rng);
        let out = mlp.predict(x.view()).unwrap();
        for r in 0..4 {
            for o in 0..2 {
                let mut acc = b[o];
                for i in 0..3 {
                    acc += w[[o, i]] * x[[r, i]];
                }
                assert!((out[[r, o]] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn relu_clamps_negative_preactivations() {
        let mlp = Mlp::from_layers(vec![
            Dense {
                weight: array![[-1.0, 0.0], [0.0, -1.0]],
                bias: array![0.0, 0.0],
                activation: Activation::Relu,
            },
            Dense {
                weight: array![[1.0, 1.0]],
                bias: array![0.0],
                activation: Activation::Identity,
            },
        ])
        .unwrap();
        let (_, tape) = mlp.forward(array![[2.0, 3.0]].view()).unwrap();
        assert!(tape.activations[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mlp = Mlp::new(&[3, 4, 1], Activation::Relu, 0).unwrap();
        assert!(mlp.predict(Array2::zeros((2, 2)).view()).is_err());
        let (_, tape) = mlp.forward(Array2::zeros((2, 3)).view()).unwrap();
        assert!(mlp.backward(&tape, Array2::zeros((3, 1)).view()).is_err());
        assert!(mlp.backward(&tape, Array2::zeros((2, 2)).view()).is_err());
    }

    #[test]
    fn single_identity_layer_weight_grad_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::from_layers(vec![Dense {
            weight: random_matrix(3, 2, &mut rng),
            bias: Array1::zeros(3),
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = array![[0.5, -2.0]];
        let g = array![[1.0, 2.0, -1.0]];
        let (_, tape) = mlp.forward(x.view()).unwrap();
        let (gin, grads) = mlp.backward(&tape, g.view()).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                assert_eq!(grads.layers[0].weight[[o, i]], g[[0, o]] * x[[0, i]]);
            }
            assert_eq!(grads.layers[0].bias[o], g[[0, o]]);
        }
        let expect_in = g.dot(&mlp.layers()[0].weight);
        assert_eq!(gin, expect_in);
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mlp = Mlp::new(&[3, 5, 5, 2], Activation::Tanh, 2).unwrap();
        let (_, tape) = mlp.forward(array![[0.1, 0.2, 0.3]].view()).unwrap();
        let (gin, grads) = mlp.backward(&tape, Array2::zeros((1, 2)).view()).unwrap();
        assert!(grads.is_zero());
        assert!(gin.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_network_collapses_to_single_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mlp = Mlp::new(&[4, 6, 5, 3], Activation::Identity, 5).unwrap();
        let mut total_w = Array2::<f64>::eye(4);
        let mut total_b = Array1::<f64>::zeros(4);
        for l in mlp.layers() {
            total_b = l.weight.dot(&total_b) + &l.bias;
            total_w = l.weight.dot(&total_w);
        }
        let x = random_matrix(7, 4, &mut rng);
        let expect = x.dot(&total_w.t()) + &total_b;
        let out = mlp.predict(x.view()).unwrap();
        assert!(out.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    /// Central finite differences of `sum(weights .* mlp(x))`.
    fn fd_check(activation: Activation, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=16)];
        for _ in 0..n_layers {
            sizes.push(rng.random_range(1..=16));
        }
        let mut mlp = Mlp::new(&sizes, activation, seed).unwrap();
        let mut flat = mlp.flatten();
        for v in &mut flat {
            *v += rng.random_range(-0.3..0.3);
        }
        mlp.set_flat(&flat).unwrap();
        let batch = rng.random_range(1..=4);
        let x = random_matrix(batch, sizes[0], &mut rng);
        let w = random_matrix(batch, *sizes.last().unwrap(), &mut rng);
        let objective = |m: &Mlp, x: &Array2<f64>| (m.predict(x.view()).unwrap() * &w).sum();

        let (_, tape) = mlp.forward(x.view()).unwrap();
        let (gin, grads) = mlp.backward(&tape, w.view()).unwrap();
        let analytic_params = grads.flatten();
        let h = 1e-5;
        let close = |a: f64, n: f64| (a - n).abs() <= 1e-4 * a.abs().max(n.abs()) || (a - n).abs() < 1e-8;

        for _ in 0..100 {
            if rng.random_bool(0.8) {
                let i = rng.random_range(0..flat.len());
                let mut plus = flat.clone();
                plus[i] += h;
                let mut minus = flat.clone();
                minus[i] -= h;
                let mut mp = mlp.clone();
                mp.set_flat(&plus).unwrap();
                let mut mm = mlp.clone();
                mm.set_flat(&minus).unwrap();
                let numeric = (objective(&mp, &x) - objective(&mm, &x)) / (2.0 * h);
                assert!(close(analytic_params[i], numeric), "{activation:?} param {i}: {} vs {numeric}", analytic_params[i]);
            } else {
                let r = rng.random_range(0..batch);
                let c = rng.random_range(0..sizes[0]);
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let numeric = (objective(&mlp, &xp) - objective(&mlp, &xm)) / (2.0 * h);
                assert!(close(gin[[r, c]], numeric), "{activation:?} input: {} vs {numeric}", gin[[r, c]]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for act in [Activation::Relu, Activation::Tanh, Activation::Identity] {
            for seed in 0..10 {
                fd_check(act, seed);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut mlp = Mlp::new(&[2, 3, 1], Activation::Relu, 0).unwrap();
        let before = mlp.clone();
        let mut adam = AdamState::new(&[&mlp], AdamConfig::default());
        let g = MlpGrads::zeros_like(&mlp);
        adam.step(&mut [&mut mlp], &[&g]).unwrap();
        assert_eq!(mlp, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_first_step_matches_hand_evaluation() {
        let mut mlp = Mlp::new(&[2, 1], Activation::Identity, 0).unwrap();
        let before = mlp.flatten();
        let mut g = MlpGrads::zeros_like(&mlp);
        g.layers[0].weight[[0, 0]] = 0.5;
        g.layers[0].weight[[0, 1]] = -3.0;
        g.layers[0].bias[0] = 1e-3;
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(&[&mlp], cfg);
        adam.step(&mut [&mut mlp], &[&g]).unwrap();
        let after = mlp.flatten();
        for (i, gi) in g.flatten().into_iter().enumerate() {
            // m_hat = g, v_hat = g^2 after bias correction
            let m = (1.0 - cfg.beta1) * gi / (1.0 - cfg.beta1);
            let v = (1.0 - cfg.beta2) * gi * gi / (1.0 - cfg.beta2);
            let expect = before[i] - cfg.learning_rate * m / (v.sqrt() + cfg.epsilon);
            assert!((after[i] - expect).abs() < 1e-15);
            assert!((before[i] - after[i] - cfg.learning_rate * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_shape_mismatch_is_an_error() {
        let mut a = Mlp::new(&[2, 3, 1], Activation::Relu, 0).unwrap();
        let b = Mlp::new(&[2, 4, 1], Activation::Relu, 0).unwrap();
        let mut adam = AdamState::new(&[&a], AdamConfig::default());
        let g = MlpGrads::zeros_like(&b);
        assert!(adam.step(&mut [&mut a], &[&g]).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut mlp = Mlp::new(&[3, 4, 2], Activation::Tanh, 11).unwrap();
            let mut adam = AdamState::new(&[&mlp], AdamConfig::default());
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            for _ in 0..20 {
                let mut g = MlpGrads::zeros_like(&mlp);
                for l in &mut g.layers {
                    l.weight.mapv_inplace(|_| rng.random_range(-1.0..1.0));
                }
                adam.step(&mut [&mut mlp], &[&g]).unwrap();
            }
            mlp
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_descends_convex_quadratic() {
        let mut mlp = Mlp::new(&[5, 4, 3], Activation::Relu, 3).unwrap();
        let p0 = mlp.flatten();
        let target: Vec<f64> = p0.iter().enumerate().map(|(i, p)| p + 1.0 + 0.01 * i as f64).collect();
        let curv: Vec<f64> = (0..p0.len()).map(|i| 0.5 + (i % 7) as f64 * 0.25).collect();
        let objective = |p: &[f64]| -> f64 {
            p.iter().zip(&target).zip(&curv).map(|((p, t), c)| 0.5 * c * (p - t) * (p - t)).sum()
        };
        let mut adam = AdamState::new(&[&mlp], AdamConfig::default());
        let mut prev = f64::INFINITY;
        for step in 0..500 {
            let p = mlp.flatten();
            let f = objective(&p);
            if step >= 10 {
                assert!(f < prev, "objective rose at step {step}: {prev} -> {f}");
            }
            prev = f;
            let grad: Vec<f64> = p.iter().zip(&target).zip(&curv).map(|((p, t), c)| c * (p - t)).collect();
            let mut g = MlpGrads::zeros_like(&mlp);
            let mut it = grad.into_iter();
            for l in &mut g.layers {
                l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = it.next().unwrap());
            }
            adam.step(&mut [&mut mlp], &[&g]).unwrap();
        }
        assert!(prev < objective(&p0));
    }

    #[test]
    fn clipping_bounds_joint_norm() {
        let mlp = Mlp::new(&[2, 2], Activation::Identity, 0).unwrap();
        let mut a = MlpGrads::zeros_like(&mlp);
        let mut b = MlpGrads::zeros_like(&mlp);
        a.layers[0].weight.fill(3.0);
        b.layers[0].bias.fill(4.0);
        let before = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert!((before - (4.0 * 9.0 + 2.0 * 16.0f64).sqrt()).abs() < 1e-12);
        let after = (a.sq_norm() + b.sq_norm()).sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_replay() {
        let mlp = Mlp::new(&[6, 9, 9, 2], Activation::Tanh, 21).unwrap();
        let bytes = mlp.to_bytes();
        assert_eq!(&bytes[..5], CHECKPOINT_MAGIC);
        let back = Mlp::from_bytes(&bytes).unwrap();
        assert_eq!(back, mlp);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(10, 6, &mut rng);
        let a = mlp.predict(x.view()).unwrap();
        let b = back.predict(x.view()).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn truncated_or_corrupt_checkpoint_fails_with_offset() {
        let bytes = Mlp::new(&[2, 3, 1], Activation::Relu, 0).unwrap().to_bytes();
        for cut in [0, 3, 8, 12, bytes.len() - 1] {
            match Mlp::from_bytes(&bytes[..cut]) {
                Err(Error::Corrupt { offset, .. }) => assert!(offset <= cut),
                other => panic!("expected corrupt error, got {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Mlp::from_bytes(&bad), Err(Error::Corrupt { offset: 0, .. })));
        let mut bad_tag = bytes.clone();
        bad_tag[17] = 9;
        assert!(matches!(Mlp::from_bytes(&bad_tag), Err(Error::Corrupt { offset: 17, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(Mlp::from_bytes(&long).is_err());
    }
}
