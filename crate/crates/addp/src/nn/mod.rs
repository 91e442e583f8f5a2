//! Hand-rolled f64 neural-network layers with analytic backprop.
//!
//! Every layer caches what its backward pass needs during forward; backward
//! returns the input gradient and accumulates parameter gradients in place.
//! All layers are exercised by central finite-difference gradient checks.

pub mod adam;
pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod tensor;

use serde::{Deserialize, Serialize};
use tensor::Tensor;

/// Which part of the network a parameter belongs to. After the initial task
/// only `Adapter` and `Head` remain trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Adapter,
    Head,
}

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            group,
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// A non-learnable persistent tensor (e.g. normalization running stats).
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Per-pass layer context.
#[derive(Clone, Copy, Debug)]
pub struct LayerCtx {
    /// Training-mode forward (vs. evaluation).
    pub train: bool,
    /// Normalization statistics are frozen (incremental stage): batch norm
    /// uses running statistics even in training mode and never updates them.
    pub stats_frozen: bool,
}

impl LayerCtx {
    pub fn eval() -> Self {
        LayerCtx {
            train: false,
            stats_frozen: false,
        }
    }

    pub fn train(stats_frozen: bool) -> Self {
        LayerCtx {
            train: true,
            stats_frozen,
        }
    }
}

/// GELU (tanh approximation) applied elementwise.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    let g = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = g.tanh();
    let dg = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dg
}

/// Elementwise GELU layer with cached input.
#[derive(Clone, Debug, Default)]
pub struct Gelu {
    cache: Option<Tensor>,
}

impl Gelu {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&self, dy: &Tensor) -> Tensor {
        let x = self.cache.as_ref().expect("gelu backward before forward");
        let mut dx = dy.clone();
        for (g, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
            *g *= gelu_grad(xv);
        }
        dx
    }
}
