use rand::Rng;

use crate::error::Result;
use crate::numeric::{Graph, Init, ParamId, ParamStore, Var};
use crate::scalar::Scalar;

/// Affine map `x·W + b` with `W` stored as `[in × out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), vec![input, output], Init::TruncNormal(std), true, rng)?;
        let b = store.add(&format!("{name}.b"), vec![output], Init::Const(0.0), false, rng)?;
        Ok(Linear { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Layer norm followed by a learned per-column gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut R) -> Result<Self> {
        let gain = store.add(&format!("{name}.g"), vec![width], Init::Const(1.0), false, rng)?;
        let bias = store.add(&format!("{name}.b"), vec![width], Init::Const(0.0), false, rng)?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain)?;
        let bias = g.param(store, self.bias)?;
        let n = g.layer_norm(x)?;
        let s = g.mul_row(n, gain)?;
        g.add_row(s, bias)
    }
}
