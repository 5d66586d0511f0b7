//! Nonlinear features for the lifting `g(x) = [x; g̃(x)]`.
//!
//! The learned variant is a small fully-connected feed-forward network with
//! exact reverse-mode gradients; the activation is applied after the final
//! affine layer as well (a flag disables that). Fixed closed-form
//! dictionaries cover the one-dimensional guiding example, and an identity
//! variant gives the pure-linear (no-feature) lifting.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::matjson;

/// A lifted vector `α·[x; g̃(x)]` together with the split index `n`
/// separating the state block from the feature block.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedState {
    pub values: DVector<f64>,
    pub split: usize,
}

impl LiftedState {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Anything that can lift a state into `R^{n+N}` and decode it back.
pub trait Lifting {
    /// State dimension `n`.
    fn state_dim(&self) -> usize;

    /// Feature dimension `N` (0 for the identity lifting).
    fn feature_dim(&self) -> usize;

    /// Output scale `α` multiplying the whole lifted vector.
    fn scale(&self) -> f64;

    /// Unscaled feature vector `g̃₁(x)` of length `N`.
    fn features(&self, x: &[f64]) -> Result<DVector<f64>>;

    fn lifted_dim(&self) -> usize {
        self.state_dim() + self.feature_dim()
    }

    /// `α·[x; g̃₁(x)]`: the scale multiplies every lifted coordinate.
    fn lift(&self, x: &[f64]) -> Result<LiftedState> {
        let n = self.state_dim();
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                context: "lift input",
                expected: n,
                found: x.len(),
            });
        }
        let alpha = self.scale();
        let feats = self.features(x)?;
        let mut values = DVector::zeros(n + feats.len());
        for i in 0..n {
            values[i] = alpha * x[i];
        }
        for i in 0..feats.len() {
            values[n + i] = alpha * feats[i];
        }
        Ok(LiftedState { values, split: n })
    }

    /// Recovers the state: `(1/α)` times the first `n` lifted entries,
    /// i.e. the analytic decoder `W = [I 0]` when `α = 1`.
    fn decode(&self, lifted: &LiftedState) -> Vec<f64> {
        let n = self.state_dim();
        let alpha = self.scale();
        (0..n).map(|i| lifted.values[i] / alpha).collect()
    }
}

/// Activation functions; all of them are continuous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Swish,
}

impl Activation {
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Swish => z * sigmoid(z),
        }
    }

    /// Exact derivative: for swish, `σ(z) + z·σ(z)(1−σ(z))`.
    pub fn grad(self, z: f64) -> f64 {
        match self {
            Activation::Swish => {
                let s = sigmoid(z);
                s + z * s * (1.0 - s)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Swish => "swish",
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn swish(z: f64) -> f64 {
    Activation::Swish.eval(z)
}

pub fn swish_grad(z: f64) -> f64 {
    Activation::Swish.grad(z)
}

/// One affine layer of the feature network.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kernel: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// The learned features `g̃: R^n -> R^N` as a feed-forward network
/// `σ(Θ_l σ(… σ(Θ_1 x + b_1) …) + b_l)`, with an output scale `α`
/// multiplying the whole lifted vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObservableMapJson", into = "ObservableMapJson")]
pub struct ObservableMap {
    layers: Vec<Layer>,
    activation: Activation,
    input_dim: usize,
    output_dim: usize,
    scale: f64,
    final_activation: bool,
}

/// Gradients of `upstreamᵀ · (α · NN(x))` with respect to every kernel,
/// every bias, and the input.
#[derive(Debug, Clone)]
pub struct NetGradients {
    pub kernels: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub input: DVector<f64>,
}

struct ForwardCache {
    /// Layer inputs: `a[0] = x`, `a[i]` the activation after layer i.
    activations: Vec<DVector<f64>>,
    /// Pre-activations `z[i] = Θ_i a[i-1] + b_i`.
    pre_activations: Vec<DVector<f64>>,
    /// Unscaled network output (equals the last activation, or the last
    /// pre-activation when the final activation is disabled).
    output: DVector<f64>,
}

impl ObservableMap {
    pub fn new(layers: Vec<Layer>, activation: Activation, final_activation: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "observable network needs at least one layer".to_string(),
            ));
        }
        let input_dim = layers[0].kernel.ncols();
        let output_dim = layers.last().unwrap().kernel.nrows();
        let mut prev = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.kernel.ncols() != prev {
                return Err(Error::DimensionMismatch {
                    context: "layer kernel columns",
                    expected: prev,
                    found: layer.kernel.ncols(),
                });
            }
            if layer.bias.len() != layer.kernel.nrows() {
                return Err(Error::DimensionMismatch {
                    context: "layer bias length",
                    expected: layer.kernel.nrows(),
                    found: layer.bias.len(),
                });
            }
            prev = layer.kernel.nrows();
            let _ = i;
        }
        Ok(Self {
            layers,
            activation,
            input_dim,
            output_dim,
            scale: 1.0,
            final_activation,
        })
    }

    /// Seeded scaled-uniform initialization: entries of layer i drawn from
    /// `U[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`.
    pub fn random(
        input_dim: usize,
        output_dim: usize,
        hidden: &[usize],
        final_activation: bool,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidArgument(
                "observable network dimensions must be positive".to_string(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let kernel =
                DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-s..s));
            let bias = DVector::zeros(fan_out);
            layers.push(Layer { kernel, bias });
        }
        Self::new(layers, Activation::Swish, final_activation)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn final_activation(&self) -> bool {
        self.final_activation
    }

    pub fn set_scale(&mut self, alpha: f64) -> Result<()> {
        if alpha == 0.0 || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "observable scale must be finite and nonzero, got {alpha}"
            )));
        }
        self.scale = alpha;
        Ok(())
    }

    fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim,
                found: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(DVector::from_row_slice(x));
        for (i, layer) in self.layers.iter().enumerate() {
            let z = &layer.kernel * activations.last().unwrap() + &layer.bias;
            let a = if i < last || self.final_activation {
                z.map(|v| self.activation.eval(v))
            } else {
                z.clone()
            };
            pre_activations.push(z);
            activations.push(a);
        }
        let output = activations.last().unwrap().clone();
        Ok(ForwardCache {
            activations,
            pre_activations,
            output,
        })
    }

    /// Scaled network output `α·NN(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.forward_cached(x)?.output * self.scale)
    }

    /// Exact reverse-mode gradients of `upstreamᵀ · (α·NN(x))`.
    pub fn backward(&self, x: &[f64], upstream: &DVector<f64>) -> Result<NetGradients> {
        if upstream.len() != self.output_dim {
            return Err(Error::DimensionMismatch {
                context: "backward upstream",
                expected: self.output_dim,
                found: upstream.len(),
            });
        }
        let cache = self.forward_cached(x)?;
        let last = self.layers.len() - 1;

        let mut kernels: Vec<DMatrix<f64>> = self
            .layers
            .iter()
            .map(|l| DMatrix::zeros(l.kernel.nrows(), l.kernel.ncols()))
            .collect();
        let mut biases: Vec<DVector<f64>> = self
            .layers
            .iter()
            .map(|l| DVector::zeros(l.bias.len()))
            .collect();

        // delta holds dJ/dz_i while walking layers backwards.
        let mut delta = if self.final_activation {
            let z = &cache.pre_activations[last];
            DVector::from_fn(upstream.len(), |i, _| {
                self.scale * upstream[i] * self.activation.grad(z[i])
            })
        } else {
            upstream * self.scale
        };

        for i in (0..self.layers.len()).rev() {
            kernels[i] = &delta * cache.activations[i].transpose();
            biases[i] = delta.clone();
            let back = self.layers[i].kernel.transpose() * &delta;
            if i > 0 {
                let z = &cache.pre_activations[i - 1];
                delta = DVector::from_fn(back.len(), |j, _| back[j] * self.activation.grad(z[j]));
            } else {
                delta = back;
            }
        }

        Ok(NetGradients {
            kernels,
            biases,
            input: delta,
        })
    }
}

impl Lifting for ObservableMap {
    fn state_dim(&self) -> usize {
        self.input_dim
    }

    fn feature_dim(&self) -> usize {
        self.output_dim
    }

    fn scale(&self) -> f64 {
        self.scale
    }

    fn features(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.forward_cached(x)?.output)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    rows: usize,
    cols: usize,
    /// Row-major kernel entries.
    kernel: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ObservableMapJson {
    layers: Vec<LayerJson>,
    activation: Activation,
    input_dim: usize,
    output_dim: usize,
    scale: f64,
    final_activation: bool,
}

impl From<ObservableMap> for ObservableMapJson {
    fn from(map: ObservableMap) -> Self {
        let layers = map
            .layers
            .iter()
            .map(|l| {
                let m = matjson::Mat::from(&l.kernel);
                LayerJson {
                    rows: m.rows,
                    cols: m.cols,
                    kernel: m.data,
                    bias: matjson::dvector_to_vec(&l.bias),
                }
            })
            .collect();
        ObservableMapJson {
            layers,
            activation: map.activation,
            input_dim: map.input_dim,
            output_dim: map.output_dim,
            scale: map.scale,
            final_activation: map.final_activation,
        }
    }
}

impl TryFrom<ObservableMapJson> for ObservableMap {
    type Error = String;

    fn try_from(json: ObservableMapJson) -> std::result::Result<Self, String> {
        let mut layers = Vec::with_capacity(json.layers.len());
        for l in json.layers {
            let kernel = DMatrix::try_from(matjson::Mat {
                rows: l.rows,
                cols: l.cols,
                data: l.kernel,
            })?;
            if l.bias.len() != kernel.nrows() {
                return Err("layer bias length does not match kernel rows".to_string());
            }
            layers.push(Layer {
                kernel,
                bias: matjson::vec_to_dvector(l.bias),
            });
        }
        let mut map = ObservableMap::new(layers, json.activation, json.final_activation)
            .map_err(|e| e.to_string())?;
        if map.input_dim != json.input_dim || map.output_dim != json.output_dim {
            return Err("stored dims do not match layer shapes".to_string());
        }
        map.set_scale(json.scale).map_err(|e| e.to_string())?;
        Ok(map)
    }
}

/// Closed-form dictionaries for the one-dimensional guiding example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DictionaryKind {
    /// `g̃(x) = x²e^{−x}` (one feature).
    Model1,
    /// `g̃(x) = [x²e^{−x}; x²]` (two features).
    Model2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedDictionary {
    pub kind: DictionaryKind,
    pub scale: f64,
}

pub const DICTIONARY_NAMES: [&str; 2] = ["model1", "model2"];

/// Looks up a closed-form dictionary by name (`model1` or `model2`).
pub fn fixed_dictionary(name: &str) -> Result<FixedDictionary> {
    let kind = match name {
        "model1" => DictionaryKind::Model1,
        "model2" => DictionaryKind::Model2,
        _ => {
            return Err(Error::UnknownName {
                name: name.to_string(),
                valid: DICTIONARY_NAMES.to_vec(),
            })
        }
    };
    Ok(FixedDictionary { kind, scale: 1.0 })
}

impl Lifting for FixedDictionary {
    fn state_dim(&self) -> usize {
        1
    }

    fn feature_dim(&self) -> usize {
        match self.kind {
            DictionaryKind::Model1 => 1,
            DictionaryKind::Model2 => 2,
        }
    }

    fn scale(&self) -> f64 {
        self.scale
    }

    fn features(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != 1 {
            return Err(Error::DimensionMismatch {
                context: "dictionary input",
                expected: 1,
                found: x.len(),
            });
        }
        let v = x[0];
        let e = v * v * (-v).exp();
        Ok(match self.kind {
            DictionaryKind::Model1 => DVector::from_vec(vec![e]),
            DictionaryKind::Model2 => DVector::from_vec(vec![e, v * v]),
        })
    }
}

/// The observable part of a model: a learned network, a fixed dictionary,
/// or the identity (no features, pure linear lifting).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ObservableFn {
    Network(ObservableMap),
    Dictionary(FixedDictionary),
    Identity { state_dim: usize, scale: f64 },
}

impl ObservableFn {
    pub fn identity(state_dim: usize) -> Self {
        ObservableFn::Identity {
            state_dim,
            scale: 1.0,
        }
    }

    /// Returns a copy with the output scale set to `alpha`.
    pub fn with_scale(&self, alpha: f64) -> Result<Self> {
        if alpha == 0.0 || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "observable scale must be finite and nonzero, got {alpha}"
            )));
        }
        let mut out = self.clone();
        match &mut out {
            ObservableFn::Network(map) => map.set_scale(alpha)?,
            ObservableFn::Dictionary(dict) => dict.scale = alpha,
            ObservableFn::Identity { scale, .. } => *scale = alpha,
        }
        Ok(out)
    }

    pub fn as_network(&self) -> Option<&ObservableMap> {
        match self {
            ObservableFn::Network(map) => Some(map),
            _ => None,
        }
    }
}

impl Lifting for ObservableFn {
    fn state_dim(&self) -> usize {
        match self {
            ObservableFn::Network(map) => map.state_dim(),
            ObservableFn::Dictionary(dict) => dict.state_dim(),
            ObservableFn::Identity { state_dim, .. } => *state_dim,
        }
    }

    fn feature_dim(&self) -> usize {
        match self {
            ObservableFn::Network(map) => map.feature_dim(),
            ObservableFn::Dictionary(dict) => dict.feature_dim(),
            ObservableFn::Identity { .. } => 0,
        }
    }

    fn scale(&self) -> f64 {
        match self {
            ObservableFn::Network(map) => map.scale(),
            ObservableFn::Dictionary(dict) => dict.scale,
            ObservableFn::Identity { scale, .. } => *scale,
        }
    }

    fn features(&self, x: &[f64]) -> Result<DVector<f64>> {
        match self {
            ObservableFn::Network(map) => map.features(x),
            ObservableFn::Dictionary(dict) => dict.features(x),
            ObservableFn::Identity { state_dim, .. } => {
                if x.len() != *state_dim {
                    return Err(Error::DimensionMismatch {
                        context: "identity lift input",
                        expected: *state_dim,
                        found: x.len(),
                    });
                }
                Ok(DVector::zeros(0))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn single_unit_map() -> ObservableMap {
        ObservableMap::new(
            vec![Layer {
                kernel: DMatrix::from_element(1, 1, 1.0),
                bias: DVector::zeros(1),
            }],
            Activation::Swish,
            true,
        )
        .unwrap()
    }

    #[test]
    fn swish_values() {
        assert_eq!(swish(0.0), 0.0);
        assert_abs_diff_eq!(swish(20.0), 20.0, epsilon = 1e-7);
        assert_abs_diff_eq!(swish(1.0), 0.731_058_578_630_004_9, epsilon = 1e-12);
    }

    #[test]
    fn swish_grad_matches_finite_difference() {
        let h = 1e-6;
        for z in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let fd = (swish(z + h) - swish(z - h)) / (2.0 * h);
            assert_abs_diff_eq!(swish_grad(z), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn forward_zero_weights_is_zero() {
        let map = ObservableMap::new(
            vec![Layer {
                kernel: DMatrix::zeros(3, 2),
                bias: DVector::zeros(3),
            }],
            Activation::Swish,
            true,
        )
        .unwrap();
        let out = map.forward(&[1.0, -2.0]).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_single_layer_value_and_scaling() {
        let mut map = single_unit_map();
        let out = map.forward(&[1.0]).unwrap();
        assert_abs_diff_eq!(out[0], 0.731_058_578_630_004_9, epsilon = 1e-9);
        map.set_scale(2.0).unwrap();
        let scaled = map.forward(&[1.0]).unwrap();
        assert_abs_diff_eq!(scaled[0], 2.0 * out[0], epsilon = 1e-15);
    }

    #[test]
    fn lift_structure_and_decode() {
        let map = ObservableMap::random(2, 3, &[5], true, 7).unwrap();
        let x = [0.3, -1.2];
        let lifted = map.lift(&x).unwrap();
        assert_eq!(lifted.dim(), 5);
        assert_eq!(lifted.split, 2);
        assert_eq!(&lifted.values.as_slice()[..2], &x[..]);
        let decoded = map.decode(&lifted);
        assert_eq!(decoded, x.to_vec());
    }

    #[test]
    fn scaled_lift_and_decode_roundtrip() {
        let mut map = ObservableMap::random(2, 3, &[4], true, 3).unwrap();
        map.set_scale(50.0).unwrap();
        let x = [0.7, 0.1];
        let lifted = map.lift(&x).unwrap();
        assert_abs_diff_eq!(lifted.values[0], 50.0 * x[0], epsilon = 1e-12);
        let decoded = map.decode(&lifted);
        for i in 0..2 {
            assert_abs_diff_eq!(decoded[i], x[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn decode_divides_arbitrary_vector() {
        let dict = FixedDictionary {
            kind: DictionaryKind::Model1,
            scale: 10.0,
        };
        let lifted = LiftedState {
            values: DVector::from_vec(vec![-10.0, 3.0]),
            split: 1,
        };
        assert_eq!(dict.decode(&lifted), vec![-1.0]);
    }

    #[test]
    fn backward_zero_upstream() {
        let map = ObservableMap::random(2, 2, &[4], true, 1).unwrap();
        let grads = map.backward(&[0.4, 0.6], &DVector::zeros(2)).unwrap();
        assert!(grads.kernels.iter().all(|k| k.iter().all(|v| *v == 0.0)));
        assert!(grads.biases.iter().all(|b| b.iter().all(|v| *v == 0.0)));
        assert!(grads.input.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_single_layer_matches_chain_rule() {
        let map = single_unit_map();
        let x = 0.8;
        let grads = map.backward(&[x], &DVector::from_vec(vec![1.0])).unwrap();
        // d/dΘ swish(Θx + b) = swish'(z)·x, d/db = swish'(z), d/dx = swish'(z)·Θ
        let g = swish_grad(x);
        assert_abs_diff_eq!(grads.kernels[0][(0, 0)], g * x, epsilon = 1e-12);
        assert_abs_diff_eq!(grads.biases[0][0], g, epsilon = 1e-12);
        assert_abs_diff_eq!(grads.input[0], g, epsilon = 1e-12);
    }

    /// Central finite differences over every parameter of random small nets.
    #[test]
    fn backward_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..20 {
            let map = ObservableMap::random(2, 3, &[10], true, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let upstream = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let grads = map.backward(&x, &upstream).unwrap();

            let eval = |m: &ObservableMap| upstream.dot(&m.forward(&x).unwrap());

            for li in 0..map.layers().len() {
                let (rows, cols) = (
                    map.layers()[li].kernel.nrows(),
                    map.layers()[li].kernel.ncols(),
                );
                for r in 0..rows {
                    for c in 0..cols {
                        let mut plus = map.clone();
                        plus.layers_mut()[li].kernel[(r, c)] += h;
                        let mut minus = map.clone();
                        minus.layers_mut()[li].kernel[(r, c)] -= h;
                        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                        let an = grads.kernels[li][(r, c)];
                        let denom = an.abs().max(fd.abs()).max(1e-2);
                        assert!(
                            ((an - fd) / denom).abs() < 1e-5,
                            "kernel[{li}][({r},{c})]: analytic {an}, fd {fd}"
                        );
                    }
                }
                for r in 0..rows {
                    let mut plus = map.clone();
                    plus.layers_mut()[li].bias[r] += h;
                    let mut minus = map.clone();
                    minus.layers_mut()[li].bias[r] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let an = grads.biases[li][r];
                    let denom = an.abs().max(fd.abs()).max(1e-2);
                    assert!(
                        ((an - fd) / denom).abs() < 1e-5,
                        "bias[{li}][{r}]: analytic {an}, fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn fixed_dictionaries() {
        let m1 = fixed_dictionary("model1").unwrap();
        assert_eq!(m1.features(&[0.0]).unwrap().as_slice(), &[0.0]);
        assert_eq!(m1.lift(&[0.5]).unwrap().dim(), 2);

        let m2 = fixed_dictionary("model2").unwrap();
        let f = m2.features(&[1.0]).unwrap();
        assert_abs_diff_eq!(f[0], (-1.0_f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], 1.0);
        assert_eq!(m2.lift(&[1.0]).unwrap().dim(), 3);

        assert!(fixed_dictionary("model3").is_err());
    }

    #[test]
    fn identity_lifting() {
        let id = ObservableFn::identity(3);
        let lifted = id.lift(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(lifted.dim(), 3);
        assert_eq!(id.decode(&lifted), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn weights_json_roundtrip_is_exact() {
        let mut map = ObservableMap::random(2, 3, &[7], true, 42).unwrap();
        map.set_scale(0.1 + 0.2).unwrap();
        let json = serde_json::to_string(&map).unwrap();
        let back: ObservableMap = serde_json::from_str(&json).unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn forward_lipschitz_ratio_stays_finite() {
        let map = ObservableMap::random(2, 4, &[10], true, 5).unwrap();
        let x = [0.4, -0.9];
        let fx = map.forward(&x).unwrap();
        for k in 1..=12 {
            let eps = 10f64.powi(-k);
            let xp = [x[0] + eps, x[1]];
            let ratio = (map.forward(&xp).unwrap() - &fx).norm() / eps;
            assert!(ratio.is_finite());
            assert!(ratio < 1e3);
        }
    }

    proptest! {
        /// lift/decode round trip is exact (within 1e-12) for any α ≠ 0.
        #[test]
        fn lift_decode_roundtrip(
            x0 in -5.0f64..5.0,
            x1 in -5.0f64..5.0,
            alpha in prop::sample::select(vec![-50.0, -1.0, 0.25, 1.0, 10.0, 50.0]),
        ) {
            let mut map = ObservableMap::random(2, 2, &[4], true, 11).unwrap();
            map.set_scale(alpha).unwrap();
            let x = [x0, x1];
            let decoded = map.decode(&map.lift(&x).unwrap());
            for i in 0..2 {
                prop_assert!((decoded[i] - x[i]).abs() < 1e-12);
            }
        }
    }
}
