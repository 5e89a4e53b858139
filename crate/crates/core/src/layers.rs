//! Parameterized building blocks shared by the model components.

use crate::error::Result;
use crate::substrate::{Graph, Initializer, Matrix, ParamId, ParamStore, Real, Var};

/// Affine map `x · W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.linear(fan_in, fan_out));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.weight).fill_zero();
        if let Some(b) = self.bias {
            store.value_mut(b).fill_zero();
        }
    }
}

/// Two affine layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        dims: (usize, usize, usize),
    ) -> Self {
        let (input, hidden, output) = dims;
        Self {
            first: Linear::new(store, init, &format!("{name}.0"), input, hidden, true),
            second: Linear::new(store, init, &format!("{name}.1"), hidden, output, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.gelu(h);
        self.second.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, eps: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, width, T::one())),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, width)),
            eps,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, T::from_f64_lossy(self.eps))
    }
}
