//! Feed-forward networks with per-layer activation taps and manual backprop.

mod aux;
mod checkpoint;
mod optim;

pub use aux::{train_aux, AuxHead, AuxTrainSettings};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use optim::{OptimizerState, Parameterized};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `out_dim × in_dim`
    pub weight: Matrix,
    pub bias: Vector,
}

/// Dense network; the last layer emits `num_classes` logits with identity
/// activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Input plus the post-activation output of every layer for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    input: Vector,
    outputs: Vec<Vector>,
}

impl ActivationTrace {
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn layer_outputs(&self) -> &[Vector] {
        &self.outputs
    }

    pub fn depth(&self) -> usize {
        self.outputs.len()
    }
}

/// Parameter gradients, shaped like the network they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

impl MlpGradients {
    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.as_mut_slice().iter_mut().for_each(|g| *g *= factor);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights
            .iter()
            .all(|w| w.as_slice().iter().all(|&g| g == 0.0))
            && self.biases.iter().all(|b| b.iter().all(|&g| g == 0.0))
    }
}

impl Mlp {
    /// Network with the given hidden widths, fan-in-scaled uniform weights
    /// (`±sqrt(6/fan_in)` for relu, `±sqrt(3/fan_in)` otherwise) and zero biases.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        activation: Activation,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut specs = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &h in hidden {
            specs.push(LayerSpec {
                in_dim: prev,
                out_dim: h,
                activation,
            });
            prev = h;
        }
        specs.push(LayerSpec {
            in_dim: prev,
            out_dim: num_classes,
            activation: Activation::Identity,
        });
        Self::initialized(specs, rng)
    }

    pub fn initialized(specs: Vec<LayerSpec>, rng: &mut RngStream) -> Result<Self> {
        validate_specs(&specs)?;
        let layers = specs
            .into_iter()
            .map(|spec| {
                let gain = if spec.activation == Activation::Relu { 6.0 } else { 3.0 };
                let bound = (gain / spec.in_dim as f64).sqrt();
                let data = (0..spec.in_dim * spec.out_dim)
                    .map(|_| rng.uniform_range(-bound, bound))
                    .collect();
                Layer {
                    spec,
                    weight: Matrix::from_vec(spec.out_dim, spec.in_dim, data)
                        .expect("sized from spec"),
                    bias: vec![0.0; spec.out_dim],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Builds a network from explicit layers, checking shapes chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        validate_specs(&specs)?;
        for (i, l) in layers.iter().enumerate() {
            if l.weight.rows() != l.spec.out_dim
                || l.weight.cols() != l.spec.in_dim
                || l.bias.len() != l.spec.out_dim
            {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: weight {}x{}, bias {} for spec {}->{}",
                    l.weight.rows(),
                    l.weight.cols(),
                    l.bias.len(),
                    l.spec.in_dim,
                    l.spec.out_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    /// Output width of layer `d` (1-based).
    pub fn layer_width(&self, d: usize) -> Result<usize> {
        check_depth(d, self.depth())?;
        Ok(self.layers[d - 1].spec.out_dim)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vector, ActivationTrace)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                actual: x.len(),
                context: "network input",
            });
        }
        let mut outputs: Vec<Vector> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = outputs.last().map_or(x, |v| v.as_slice());
            let mut z = layer.weight.matvec(input)?;
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi = layer.spec.activation.apply(*zi + bi);
            }
            outputs.push(z);
        }
        let logits = outputs.last().cloned().unwrap_or_default();
        Ok((
            logits,
            ActivationTrace {
                input: x.to_vec(),
                outputs,
            },
        ))
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vector> {
        Ok(self.forward(x)?.0)
    }

    pub fn zero_gradients(&self) -> MlpGradients {
        MlpGradients {
            weights: self
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.spec.out_dim, l.spec.in_dim))
                .collect(),
            biases: self.layers.iter().map(|l| vec![0.0; l.spec.out_dim]).collect(),
        }
    }

    /// Reverse-mode gradients of a scalar loss given `dLoss/dLogits`.
    pub fn backward(&self, trace: &ActivationTrace, d_logits: &[f64]) -> Result<MlpGradients> {
        let mut grads = self.zero_gradients();
        self.accumulate_backward(trace, d_logits, &mut grads)?;
        Ok(grads)
    }

    /// Adds the gradients for one example into `grads`.
    pub fn accumulate_backward(
        &self,
        trace: &ActivationTrace,
        d_logits: &[f64],
        grads: &mut MlpGradients,
    ) -> Result<()> {
        if trace.outputs.len() != self.layers.len() || trace.input.len() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.layers.len(),
                actual: trace.outputs.len(),
                context: "trace depth",
            });
        }
        if d_logits.len() != self.num_classes() {
            return Err(Error::DimMismatch {
                expected: self.num_classes(),
                actual: d_logits.len(),
                context: "dLoss/dLogits",
            });
        }
        let mut delta: Vector = d_logits.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = &trace.outputs[i];
            if out.len() != layer.spec.out_dim {
                return Err(Error::DimMismatch {
                    expected: layer.spec.out_dim,
                    actual: out.len(),
                    context: "trace layer width",
                });
            }
            // Through the activation.
            for (d, &y) in delta.iter_mut().zip(out) {
                *d *= layer.spec.activation.derivative_from_output(y);
            }
            let input = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
            let gw = &mut grads.weights[i];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (g, &a) in gw.row_mut(r).iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            for (g, &d) in grads.biases[i].iter_mut().zip(&delta) {
                *g += d;
            }
            if i > 0 {
                delta = layer.weight.transpose_matvec(&delta)?;
            }
        }
        Ok(())
    }

    /// The first `d` layers as a standalone network (no output head).
    pub fn truncated(&self, d: usize) -> Result<Mlp> {
        check_depth(d, self.depth())?;
        Ok(Mlp {
            layers: self.layers[..d].to_vec(),
        })
    }
}

impl Parameterized for Mlp {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

impl Parameterized for MlpGradients {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }
}

/// Post-activation output of layer `d` (1-based): the early-exit features.
pub fn early_features(trace: &ActivationTrace, d: usize) -> Result<&[f64]> {
    check_depth(d, trace.depth())?;
    Ok(&trace.outputs[d - 1])
}

fn check_depth(d: usize, max: usize) -> Result<()> {
    if d == 0 || d > max {
        return Err(Error::DepthOutOfRange { depth: d, max });
    }
    Ok(())
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::ShapeMismatch("network needs at least one layer".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::ShapeMismatch(format!("layer {i} has a zero dimension")));
        }
        if i > 0 && specs[i - 1].out_dim != s.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "layer {} outputs {} but layer {i} expects {}",
                i - 1,
                specs[i - 1].out_dim,
                s.in_dim
            )));
        }
    }
    if specs[specs.len() - 1].activation != Activation::Identity {
        return Err(Error::ShapeMismatch(
            "final layer must use identity activation".into(),
        ));
    }
    Ok(())
}
