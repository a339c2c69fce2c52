use serde::{Deserialize, Serialize};

use super::matrix::{shape_str, Matrix};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Default negative slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Identity,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu { slope: LEAKY_SLOPE }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } if x <= 0.0 => slope * x,
            _ => x,
        }
    }
}

/// Affine layer `a(W x + b)` with `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    /// `1 × out` row.
    pub bias: Matrix,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        let mlp = Self { layers };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Contract("MLP without layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.bias.shape() != (1, layer.out_dim()) {
                return Err(Error::dim("MlpParams bias", shape_str(&layer.weight), shape_str(&layer.bias)));
            }
            if let Activation::LeakyRelu { slope } = layer.activation {
                if !(slope > 0.0 && slope <= 1.0) {
                    return Err(Error::Contract(format!("leaky slope {slope} outside (0, 1]")));
                }
            }
            if i > 0 && self.layers[i - 1].out_dim() != layer.in_dim() {
                return Err(Error::dim("MlpParams chain", self.layers[i - 1].out_dim(), layer.in_dim()));
            }
        }
        Ok(())
    }

    /// Symmetric uniform fan-in initialization, bound `1/√fan_in`.
    /// Hidden layers use `hidden`, the last layer uses `last`.
    pub fn init(sizes: &[usize], hidden: Activation, last: Activation, rng: &mut RngStream) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Matrix::from_fn(fan_out, fan_in, |_, _| rng.uniform(-bound, bound));
                let bias = Matrix::from_fn(1, fan_out, |_, _| rng.uniform(-bound, bound));
                Dense {
                    weight,
                    bias,
                    activation: if l + 1 == n { last } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Plain evaluation of `g_L ∘ … ∘ g_1 (x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("mlp_forward", self.input_dim(), x.len()));
        }
        let mut h = x.to_vec();
        for layer in &self.layers {
            let mut out = layer.weight.matvec(&h)?;
            for (o, b) in out.iter_mut().zip(layer.bias.data()) {
                *o = layer.activation.apply(*o + b);
            }
            h = out;
        }
        Ok(h)
    }

    /// Row-wise evaluation over an `n × in` input block.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim("mlp_forward", self.input_dim(), x.cols()));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let mut out = h.matmul_t(&layer.weight)?;
            let b = layer.bias.data();
            for i in 0..out.rows() {
                for (o, bv) in out.row_mut(i).iter_mut().zip(b) {
                    *o = layer.activation.apply(*o + bv);
                }
            }
            h = out;
        }
        Ok(h)
    }

    /// Register weights and biases on the tape (weight, bias per layer, in order).
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(&l.weight), tape.param(&l.bias), l.activation))
                .collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn n_params(&self) -> usize {
        self.tensors().map(Matrix::len).sum()
    }
}

/// Tape handles of an [`MlpParams`].
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var, Activation)>,
}

impl BoundMlp {
    /// Differentiable forward pass over an `n × in` block.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, b, act) in &self.layers {
            let lin = tape.matmul_t(h, w)?;
            h = tape.add_row(lin, b)?;
            if let Activation::LeakyRelu { slope } = act {
                h = tape.leaky_relu(h, slope);
            }
        }
        Ok(h)
    }

    pub fn weight_vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().map(|l| l.0)
    }
}
