//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Hidden layers share one activation; the output layer is always identity.
//! Shape mismatches are programmer errors and panic via `assert!`.

use serde::{Deserialize, Serialize};

use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative expressed through the activated value `a = f(z)`.
    #[inline]
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Per-layer inputs retained by [`mlp_forward_cached`] for the backward pass.
/// `layer_inputs[l]` is the activated input feeding layer `l`;
/// `layer_inputs[num_layers]` is the network output.
pub struct ForwardCache {
    layer_inputs: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.layer_inputs.last().unwrap()
    }
}

pub fn mlp_forward(params: &ParamVector, input: &[f64], act: Activation) -> Vec<f64> {
    mlp_forward_cached(params, input, act).output().to_vec()
}

pub fn mlp_forward_cached(params: &ParamVector, input: &[f64], act: Activation) -> ForwardCache {
    let shape = params.shape();
    assert_eq!(
        input.len(),
        shape.input_dim(),
        "input length {} does not match first layer fan-in {}",
        input.len(),
        shape.input_dim()
    );
    let n_layers = shape.num_layers();
    let mut layer_inputs = Vec::with_capacity(n_layers + 1);
    layer_inputs.push(input.to_vec());
    for l in 0..n_layers {
        let (fan_in, fan_out) = shape.layers()[l];
        let (w, b) = params.layer(l);
        let x = layer_inputs.last().unwrap();
        let mut out = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let mut z = b[o];
            for i in 0..fan_in {
                z += row[i] * x[i];
            }
            out.push(if l + 1 == n_layers { z } else { act.apply(z) });
        }
        layer_inputs.push(out);
    }
    ForwardCache { layer_inputs }
}

/// Gradients of `output · upstream` with respect to parameters and input.
pub fn mlp_backward(
    params: &ParamVector,
    input: &[f64],
    upstream: &[f64],
    act: Activation,
) -> (ParamVector, Vec<f64>) {
    let cache = mlp_forward_cached(params, input, act);
    let mut grads = params.zeros_like();
    let input_grad = mlp_backward_into(params, &cache, upstream, act, &mut grads, 1.0);
    (grads, input_grad)
}

/// Backward pass from a cached forward; accumulates `scale ·` parameter
/// gradients into `grad_acc` and returns the input gradient (also scaled).
pub fn mlp_backward_into(
    params: &ParamVector,
    cache: &ForwardCache,
    upstream: &[f64],
    act: Activation,
    grad_acc: &mut ParamVector,
    scale: f64,
) -> Vec<f64> {
    let shape = params.shape();
    assert_eq!(
        upstream.len(),
        shape.output_dim(),
        "upstream length {} does not match output dim {}",
        upstream.len(),
        shape.output_dim()
    );
    assert_eq!(grad_acc.len(), params.len(), "gradient buffer length mismatch");

    let n_layers = shape.num_layers();
    // delta = d(output·upstream)/d(activated output of current layer)
    let mut delta: Vec<f64> = upstream.iter().map(|u| u * scale).collect();
    for l in (0..n_layers).rev() {
        let (fan_in, fan_out) = shape.layers()[l];
        let (w, _) = params.layer(l);
        let x = &cache.layer_inputs[l];
        let a = &cache.layer_inputs[l + 1];

        // Through the activation (output layer is identity).
        let dz: Vec<f64> = if l + 1 == n_layers {
            delta
        } else {
            delta
                .iter()
                .zip(a.iter())
                .map(|(d, &av)| d * act.deriv_from_output(av))
                .collect()
        };

        let off = shape.layer_offset(l);
        let gvals = grad_acc.values_mut();
        for o in 0..fan_out {
            let g = dz[o];
            let row = &mut gvals[off + o * fan_in..off + (o + 1) * fan_in];
            for i in 0..fan_in {
                row[i] += g * x[i];
            }
            gvals[off + fan_in * fan_out + o] += g;
        }

        let mut prev = vec![0.0; fan_in];
        for o in 0..fan_out {
            let g = dz[o];
            let row = &w[o * fan_in..(o + 1) * fan_in];
            for i in 0..fan_in {
                prev[i] += g * row[i];
            }
        }
        delta = prev;
    }
    delta
}
