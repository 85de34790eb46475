use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

use super::TrainingConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    /// Row-wise softmax; only valid on the final layer.
    Softmax,
}

impl Activation {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
            Activation::Softmax => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            2 => Activation::Identity,
            3 => Activation::Softmax,
            _ => return None,
        })
    }

    fn apply(self, z: &mut Matrix) {
        match self {
            Activation::Relu => z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Tanh => z.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Identity => {}
            Activation::Softmax => softmax_in_place(z),
        }
    }

    /// Gradient w.r.t. the pre-activation given the activation output `y`
    /// and the upstream gradient `g` w.r.t. `y`.
    fn backprop(self, y: &Matrix, g: &Matrix) -> Matrix {
        match self {
            Activation::Relu => y
                .zip_with(g, |y, g| if y > 0.0 { g } else { 0.0 })
                .expect("cached shapes agree"),
            Activation::Tanh => y
                .zip_with(g, |y, g| g * (1.0 - y * y))
                .expect("cached shapes agree"),
            Activation::Identity => g.clone(),
            Activation::Softmax => {
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (a, b)) in out.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = a * (b - inner);
                    }
                }
                out
            }
        }
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(z: &mut Matrix) {
    for r in 0..z.rows() {
        let row = z.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

/// One fully connected layer, `y = act(x·W + b)` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::shape(format!(
                "bias length {} vs layer width {}",
                bias.len(),
                weights.cols()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut z = x.matmul(&self.weights).expect("dims checked by DenseNet");
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        self.activation.apply(&mut z);
        z
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter gradients, one entry per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weights.data_mut().iter_mut().for_each(|v| *v *= factor);
            g.bias.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weights.data().iter().chain(&g.bias).all(|&v| v == 0.0))
    }
}

#[derive(Clone, Debug)]
struct Cache {
    /// `activations[0]` is the input; `activations[i + 1]` is layer `i`'s output.
    activations: Vec<Matrix>,
}

/// Feedforward network of dense layers.
///
/// `forward` caches every activation so that `backward` can run the chain
/// rule; `predict` is the cache-free read-only path for evaluation.
#[derive(Clone, Debug)]
pub struct DenseNet {
    layers: Vec<Layer>,
    cache: Option<Cache>,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::arg("a network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        let last = layers.len() - 1;
        if let Some(i) = layers[..last]
            .iter()
            .position(|l| l.activation == Activation::Softmax)
        {
            return Err(Error::arg(format!(
                "softmax is only allowed on the final layer (found on layer {i})"
            )));
        }
        Ok(Self {
            layers,
            cache: None,
        })
    }

    /// Glorot-uniform weights, zero biases. `dims` lists every width from
    /// input to output; hidden layers use `hidden`, the last uses `output`.
    pub fn init(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::arg("need at least input and output widths"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Matrix::from_fn(fan_in, fan_out, |_, _| rng.uniform_range(-limit, limit));
                let act = if i + 2 == dims.len() { output } else { hidden };
                Layer::new(weights, vec![0.0; fan_out], act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    /// The identity map on `dim` features, as a single linear layer.
    pub fn identity(dim: usize) -> Self {
        Self::new(vec![Layer::new(Matrix::identity(dim), vec![0.0; dim], Activation::Identity)
            .expect("square")])
        .expect("single layer")
    }

    /// Composition `second ∘ first` as one network.
    pub fn stack(first: &DenseNet, second: &DenseNet) -> Result<Self> {
        let mut layers = first.layers.clone();
        layers.extend(second.layers.iter().cloned());
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.cache = None;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass that caches activations for [`DenseNet::backward`].
    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(activations.last().expect("non-empty"));
            activations.push(next);
        }
        let out = activations.last().expect("non-empty").clone();
        self.cache = Some(Cache { activations });
        Ok(out)
    }

    /// Output of the last cached forward pass.
    pub fn cached_output(&self) -> Option<&Matrix> {
        self.cache.as_ref().and_then(|c| c.activations.last())
    }

    /// Forward pass without caching.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            h = layer.forward(&h);
        }
        Ok(h)
    }

    /// Backpropagates `upstream` (d loss / d output of the last forward) and
    /// returns the parameter gradients together with d loss / d input.
    pub fn backward(&self, upstream: &Matrix) -> Result<(Gradients, Matrix)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let out = cache.activations.last().expect("non-empty");
        if upstream.shape() != out.shape() {
            return Err(Error::shape(format!(
                "upstream gradient {:?} vs output {:?}",
                upstream.shape(),
                out.shape()
            )));
        }
        let mut grad = upstream.clone();
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let y = &cache.activations[i + 1];
            let x = &cache.activations[i];
            let dz = layer.activation.backprop(y, &grad);
            let dw = x.t_matmul(&dz)?;
            let mut db = vec![0.0; layer.output_dim()];
            for r in dz.row_iter() {
                for (b, v) in db.iter_mut().zip(r) {
                    *b += v;
                }
            }
            grad = dz.matmul_t(&layer.weights)?;
            layer_grads.push(LayerGrad {
                weights: dw,
                bias: db,
            });
        }
        layer_grads.reverse();
        Ok((
            Gradients {
                layers: layer_grads,
            },
            grad,
        ))
    }

    /// Plain SGD with decoupled-in-the-gradient weight decay:
    /// `θ ← θ − lr·(∇θ + λθ)` for every weight and bias.
    pub fn sgd_step(&mut self, grads: &Gradients, config: &TrainingConfig) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "{} gradient layers for a {}-layer network",
                grads.layers.len(),
                self.layers.len()
            )));
        }
        for (l, g) in self.layers.iter().zip(&grads.layers) {
            if l.weights.shape() != g.weights.shape() || l.bias.len() != g.bias.len() {
                return Err(Error::shape("gradient shapes do not match network"));
            }
        }
        let (lr, decay) = (config.learning_rate, config.weight_decay);
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in l.weights.data_mut().iter_mut().zip(g.weights.data()) {
                *w -= lr * (gw + decay * *w);
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * (gb + decay * *b);
            }
        }
        self.cache = None;
        Ok(())
    }
}
