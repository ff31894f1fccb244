use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tape::{NodeId, Tape};
use super::tensor::Tensor2D;
use crate::error::{Error, Result};

/// Stack of fully-connected layers with ReLU between consecutive layers and
/// no activation after the last one, e.g. `widths = [64, 16]` is
/// `[FC64, ReLU, FC16]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(input_dim: usize, widths: Vec<usize>) -> Self {
        Self { input_dim, widths }
    }

    pub fn output_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.input_dim)
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut fan_in = self.input_dim;
        self.widths
            .iter()
            .map(|&w| {
                let shape = (fan_in, w);
                fan_in = w;
                shape
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// An MLP whose weights live in a shared [`ParamSet`] starting at `first_param`
/// (weight then bias for each layer).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub name: String,
    pub spec: MlpSpec,
    pub first_param: usize,
}

impl Mlp {
    /// Appends freshly initialized layers to `params`. Weights and biases are
    /// drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(name: &str, spec: MlpSpec, params: &mut ParamSet, rng: &mut impl Rng) -> Self {
        let first_param = params.len();
        for (l, (fan_in, fan_out)) in spec.layer_shapes().into_iter().enumerate() {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let w = Tensor2D::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound));
            let b = Tensor2D::from_fn(1, fan_out, |_, _| rng.random_range(-bound..bound));
            params.push(format!("{name}.{l}.weight"), w);
            params.push(format!("{name}.{l}.bias"), b);
        }
        Self {
            name: name.to_string(),
            spec,
            first_param,
        }
    }

    pub fn param_indices(&self) -> std::ops::Range<usize> {
        self.first_param..self.first_param + 2 * self.spec.widths.len()
    }

    /// Checks that the parameter tensors backing this MLP have the shapes its
    /// spec promises.
    pub fn validate(&self, params: &ParamSet) -> Result<()> {
        for (l, (fan_in, fan_out)) in self.spec.layer_shapes().into_iter().enumerate() {
            let wi = self.first_param + 2 * l;
            if wi + 1 >= params.len() {
                return Err(Error::dim(
                    format!("{} layer {l}", self.name),
                    "weight and bias present",
                    format!("{} parameters", params.len()),
                ));
            }
            let (w, b) = (params.get(wi), params.get(wi + 1));
            if w.shape() != (fan_in, fan_out) || b.shape() != (1, fan_out) {
                return Err(Error::dim(
                    format!("{} layer {l}", self.name),
                    format!("{fan_in}x{fan_out} weight, 1x{fan_out} bias"),
                    format!("{:?} weight, {:?} bias", w.shape(), b.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Records the forward pass of `mlp` on `tape` and returns the output node.
pub fn mlp_forward(mlp: &Mlp, params: &ParamSet, input: NodeId, tape: &mut Tape) -> Result<NodeId> {
    let mut h = input;
    let n_layers = mlp.spec.widths.len();
    for (l, (fan_in, _)) in mlp.spec.layer_shapes().into_iter().enumerate() {
        let cols = tape.value(h).cols();
        if cols != fan_in {
            return Err(Error::dim(format!("{} layer {l} input", mlp.name), fan_in, cols));
        }
        let wi = mlp.first_param + 2 * l;
        if wi + 1 >= params.len() {
            return Err(Error::dim(
                format!("{} layer {l}", mlp.name),
                format!("parameters {wi} and {}", wi + 1),
                format!("{} parameters", params.len()),
            ));
        }
        let w = tape.param(params, wi);
        let b = tape.param(params, wi + 1);
        h = tape
            .affine(h, w, b)
            .map_err(|e| Error::Dimension {
                context: format!("{} layer {l}", mlp.name),
                expected: "matching weight/bias shapes".into(),
                actual: e.to_string(),
            })?;
        if l + 1 < n_layers {
            h = tape.relu(h);
        }
    }
    Ok(h)
}
