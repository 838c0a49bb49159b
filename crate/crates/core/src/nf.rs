//! Coordinate networks (neural fields) built as graph expressions.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use thiserror::Error;

use crate::graph::{self, Array, GraphError, NodeId, Tape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NfError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite coordinate at row {row}")]
    NonFiniteInput { row: usize },
    #[error("coordinates have {got} columns, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, NfError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// `sin(ω₀ (x W + b))` on every hidden layer.
    Sine { omega0: f64 },
    /// Random Fourier feature encoding of the input followed by ReLU layers.
    ReluFourier { sigma: f64, features: usize, seed: u64 },
    Identity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Head {
    #[default]
    Linear,
    Sigmoid,
}

/// Architecture of a coordinate MLP with `depth` affine layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub activation: Activation,
    pub head: Head,
}

impl ModelSpec {
    /// SIREN with the given widths and `ω₀ = 30`.
    pub fn siren(input_dim: usize, output_dim: usize, hidden_dim: usize, depth: usize) -> Self {
        ModelSpec {
            input_dim,
            output_dim,
            hidden_dim,
            depth,
            activation: Activation::Sine { omega0: 30.0 },
            head: Head::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dim == 0 {
            return Err(NfError::InvalidSpec("dimensions must be positive".into()));
        }
        if self.depth < 2 {
            return Err(NfError::InvalidSpec(format!(
                "depth must be at least 2, got {}",
                self.depth
            )));
        }
        match self.activation {
            Activation::Sine { omega0 } if !(omega0 > 0.0 && omega0.is_finite()) => {
                Err(NfError::InvalidSpec(format!("omega0 must be positive, got {omega0}")))
            }
            Activation::ReluFourier { sigma, features, .. } if features == 0 || !(sigma > 0.0) => {
                Err(NfError::InvalidSpec("fourier features need n >= 1 and sigma > 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Width of the first affine layer's input after encoding.
    fn encoded_dim(&self) -> usize {
        match self.activation {
            Activation::ReluFourier { features, .. } => 2 * features,
            _ => self.input_dim,
        }
    }

    /// `(fan_in, fan_out)` of every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|i| {
                let fan_in = if i == 0 { self.encoded_dim() } else { self.hidden_dim };
                let fan_out = if i + 1 == self.depth { self.output_dim } else { self.hidden_dim };
                (fan_in, fan_out)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Weight `[fan_in, fan_out]` (applied as `x W`) and optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Layer {
    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered network parameters with a flat view.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub layers: Vec<Layer>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The final `(W, b)` pair.
    pub fn last_layer(&self) -> &Layer {
        self.layers.last().expect("a network has at least one layer")
    }

    /// Row-major weights then bias, layer by layer.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for layer in &self.layers {
            out.extend(layer.weight.iter().copied());
            if let Some(b) = &layer.bias {
                out.extend(b.iter().copied());
            }
        }
        out
    }

    /// Rebuilds a vector with the same layout as `self` from flat values.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ParamVector> {
        if flat.len() != self.len() {
            return Err(NfError::Layout(format!(
                "expected {} values, got {}",
                self.len(),
                flat.len()
            )));
        }
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = &flat[pos..pos + n];
            pos += n;
            s.to_vec()
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = Array2::from_shape_vec(l.weight.raw_dim(), take(l.weight.len()))
                    .expect("layout shape");
                let b = l.bias.as_ref().map(|b| Array1::from(take(b.len())));
                Layer { weight: w, bias: b }
            })
            .collect();
        Ok(ParamVector { layers })
    }

    /// Layout as `(fan_in, fan_out, has_bias)` triples.
    pub fn layout(&self) -> Vec<(usize, usize, bool)> {
        self.layers
            .iter()
            .map(|l| (l.weight.nrows(), l.weight.ncols(), l.bias.is_some()))
            .collect()
    }

    /// Zero parameters with the given layout.
    pub fn zeros(layout: &[(usize, usize, bool)]) -> ParamVector {
        let layers = layout
            .iter()
            .map(|&(i, o, b)| Layer {
                weight: Array2::zeros((i, o)),
                bias: b.then(|| Array1::zeros(o)),
            })
            .collect();
        ParamVector { layers }
    }

    /// Places every tensor on `tape` as a parameter leaf.
    pub fn to_parameters(&self, tape: &mut Tape) -> ParamNodes {
        self.place(tape, true)
    }

    /// Places every tensor on `tape` as a constant.
    pub fn to_constants(&self, tape: &mut Tape) -> ParamNodes {
        self.place(tape, false)
    }

    fn place(&self, tape: &mut Tape, trainable: bool) -> ParamNodes {
        let mut leaf = |a: Array| {
            if trainable {
                tape.parameter(a)
            } else {
                tape.constant(a)
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| LayerNodes {
                weight: leaf(l.weight.clone().into_dyn()),
                bias: l.bias.as_ref().map(|b| leaf(b.clone().into_dyn())),
            })
            .collect();
        ParamNodes { layers }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNodes {
    pub weight: NodeId,
    pub bias: Option<NodeId>,
}

/// Graph handles for a [`ParamVector`], one node per tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamNodes {
    pub layers: Vec<LayerNodes>,
}

impl ParamNodes {
    /// Nodes in flat order (weight then bias per layer).
    pub fn ids(&self) -> Vec<NodeId> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
            .collect()
    }

    /// Inverse of [`ParamNodes::ids`] for a list in the same order.
    pub fn from_ids(&self, ids: &[NodeId]) -> ParamNodes {
        let mut it = ids.iter().copied();
        let layers = self
            .layers
            .iter()
            .map(|l| LayerNodes {
                weight: it.next().expect("one id per tensor"),
                bias: l.bias.map(|_| it.next().expect("one id per tensor")),
            })
            .collect();
        ParamNodes { layers }
    }

    /// Evaluates every node into a [`ParamVector`].
    pub fn values(&self, tape: &mut Tape) -> Result<ParamVector> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = tape.evaluate(l.weight)?.clone();
            let weight = w
                .into_dimensionality()
                .map_err(|e| NfError::Layout(e.to_string()))?;
            let bias = match l.bias {
                Some(b) => Some(
                    tape.evaluate(b)?
                        .clone()
                        .into_dimensionality()
                        .map_err(|e| NfError::Layout(e.to_string()))?,
                ),
                None => None,
            };
            layers.push(Layer { weight, bias });
        }
        Ok(ParamVector { layers })
    }
}

/// Graph nodes produced by building a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FieldNodes {
    pub output: NodeId,
    /// Penultimate feature φ, the input to the last affine layer.
    pub penult: NodeId,
    /// Last-layer pre-activation `φ W + b`.
    pub pre: NodeId,
}

/// Values of a forward pass, one row per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub output: Array2<f64>,
    pub penult: Array2<f64>,
    pub pre: Array2<f64>,
}

/// A coordinate network whose last layer is affine (optionally followed by
/// an elementwise head nonlinearity).
pub trait NeuralField: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn head(&self) -> Head;

    /// Fixed, non-trainable transform applied to raw coordinates.
    fn encode(&self, coords: ArrayView2<'_, f64>) -> Array2<f64> {
        coords.to_owned()
    }

    /// Hidden activation applied after each non-final affine layer.
    fn hidden(&self, tape: &mut Tape, z: NodeId) -> graph::Result<NodeId>;

    fn init_params(&self, seed: u64) -> ParamVector;

    /// Builds the forward pass on encoded inputs already placed on `tape`.
    fn build(&self, tape: &mut Tape, params: &ParamNodes, input: NodeId) -> graph::Result<FieldNodes> {
        let rows = tape.shape(input)?[0];
        let mut h = input;
        let mut penult = input;
        let mut pre = input;
        let n = params.layers.len();
        for (i, layer) in params.layers.iter().enumerate() {
            let mut z = tape.matmul(h, layer.weight)?;
            if let Some(b) = layer.bias {
                let bb = tape.broadcast(b, rows)?;
                z = tape.add(z, bb)?;
            }
            if i + 1 < n {
                h = self.hidden(tape, z)?;
            } else {
                penult = h;
                pre = z;
            }
        }
        let output = match self.head() {
            Head::Linear => pre,
            Head::Sigmoid => tape.sigmoid(pre)?,
        };
        Ok(FieldNodes { output, penult, pre })
    }

    /// Eager forward pass on raw coordinates.
    fn forward(&self, params: &ParamVector, coords: ArrayView2<'_, f64>) -> Result<Forward> {
        check_coords(coords, self.input_dim())?;
        let mut tape = Tape::new();
        let p = params.to_constants(&mut tape);
        let x = tape.constant(self.encode(coords).into_dyn());
        let nodes = self.build(&mut tape, &p, x)?;
        let mat = |tape: &mut Tape, id| -> Result<Array2<f64>> {
            tape.evaluate(id)?
                .clone()
                .into_dimensionality()
                .map_err(|e| NfError::Layout(e.to_string()))
        };
        Ok(Forward {
            output: mat(&mut tape, nodes.output)?,
            penult: mat(&mut tape, nodes.penult)?,
            pre: mat(&mut tape, nodes.pre)?,
        })
    }
}

pub(crate) fn check_coords(coords: ArrayView2<'_, f64>, expected: usize) -> Result<()> {
    if coords.ncols() != expected {
        return Err(NfError::InputDim {
            expected,
            got: coords.ncols(),
        });
    }
    for (row, r) in coords.axis_iter(Axis(0)).enumerate() {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(NfError::NonFiniteInput { row });
        }
    }
    Ok(())
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-bound, bound);
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

fn uniform_vector(rng: &mut ChaCha8Rng, len: usize, bound: f64) -> Array1<f64> {
    let dist = Uniform::new_inclusive(-bound, bound);
    Array1::from_shape_simple_fn(len, || dist.sample(rng))
}

impl NeuralField for ModelSpec {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn head(&self) -> Head {
        self.head
    }

    fn encode(&self, coords: ArrayView2<'_, f64>) -> Array2<f64> {
        match self.activation {
            Activation::ReluFourier { sigma, features, seed } => {
                fourier_features(coords, sigma, features, seed)
            }
            _ => coords.to_owned(),
        }
    }

    fn hidden(&self, tape: &mut Tape, z: NodeId) -> graph::Result<NodeId> {
        match self.activation {
            Activation::Sine { omega0 } => {
                let s = tape.scale(z, omega0)?;
                tape.sine(s)
            }
            Activation::ReluFourier { .. } => tape.relu(z),
            Activation::Identity => Ok(z),
        }
    }

    /// SIREN layers: first-layer weights `U(-1/n, 1/n)`, later weights
    /// `U(-√(6/n)/ω₀, √(6/n)/ω₀)` with `n = fan_in`. Other activations use
    /// `U(-1/√n, 1/√n)`. Biases are `U(-1/√n, 1/√n)` throughout.
    fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(i, (fan_in, fan_out))| {
                let n = fan_in as f64;
                let bound = match self.activation {
                    Activation::Sine { omega0 } => {
                        if i == 0 {
                            1.0 / n
                        } else {
                            (6.0 / n).sqrt() / omega0
                        }
                    }
                    _ => 1.0 / n.sqrt(),
                };
                let weight = uniform_matrix(&mut rng, fan_in, fan_out, bound);
                let bias = uniform_vector(&mut rng, fan_out, 1.0 / n.sqrt());
                Layer {
                    weight,
                    bias: Some(bias),
                }
            })
            .collect();
        ParamVector { layers }
    }
}

/// Single affine layer `f(x) = x W (+ b)` whose penultimate feature is the
/// input itself. Used for small closed-form problems.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearField {
    pub input_dim: usize,
    pub output_dim: usize,
    pub bias: bool,
    pub head: Head,
}

impl LinearField {
    pub fn scalar() -> Self {
        LinearField {
            input_dim: 1,
            output_dim: 1,
            bias: false,
            head: Head::Linear,
        }
    }

    pub fn params(&self, weight: Array2<f64>, bias: Option<Array1<f64>>) -> ParamVector {
        ParamVector {
            layers: vec![Layer { weight, bias }],
        }
    }
}

impl NeuralField for LinearField {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn head(&self) -> Head {
        self.head
    }

    fn hidden(&self, _tape: &mut Tape, z: NodeId) -> graph::Result<NodeId> {
        Ok(z)
    }

    fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (self.input_dim as f64).sqrt();
        let weight = uniform_matrix(&mut rng, self.input_dim, self.output_dim, bound);
        let bias = self
            .bias
            .then(|| uniform_vector(&mut rng, self.output_dim, bound));
        self.params(weight, bias)
    }
}

/// `[sin(2π x Bᵀ), cos(2π x Bᵀ)]` with `B ~ N(0, σ²)` of shape `[n, C]`
/// drawn from `seed`.
pub fn fourier_features(coords: ArrayView2<'_, f64>, sigma: f64, n: usize, seed: u64) -> Array2<f64> {
    let b = fourier_matrix(coords.ncols(), sigma, n, seed);
    let proj = coords.dot(&b.t()) * (2.0 * std::f64::consts::PI);
    let mut out = Array2::zeros((coords.nrows(), 2 * n));
    out.slice_mut(ndarray::s![.., ..n]).assign(&proj.mapv(f64::sin));
    out.slice_mut(ndarray::s![.., n..]).assign(&proj.mapv(f64::cos));
    out
}

pub fn fourier_matrix(input_dim: usize, sigma: f64, n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated positive");
    Array2::from_shape_simple_fn((n, input_dim), || normal.sample(&mut rng))
}
