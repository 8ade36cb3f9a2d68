//! Small parameterised building blocks shared by the modules.

use crate::error::Result;
use crate::params::{Init, ParamBuilder, ParamId};
use crate::tensor::{Graph, Scalar, Var};

/// `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn register<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = b.add(format!("{name}.w"), &[input, output], Init::Xavier)?;
        let bias = if bias {
            Some(b.add(format!("{name}.b"), &[output], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

/// Linear → ReLU → Linear.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn register<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Result<Self> {
        Ok(Mlp {
            first: Linear::register(b, &format!("{name}.0"), input, hidden, true)?,
            second: Linear::register(b, &format!("{name}.1"), hidden, output, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.relu(h)?;
        self.second.forward(g, h)
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn register<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: b.add(format!("{name}.gain"), &[width], Init::Ones)?,
            bias: b.add(format!("{name}.bias"), &[width], Init::Zeros)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}
