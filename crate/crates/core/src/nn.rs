//! Small parameterized layers shared by the model stages.

use rand::Rng;

use crate::tensor::{Binding, Init, ParamId, ParamStore, Result, Tape, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), &[din, dout], Init::KaimingUniform, rng);
        let b = store.add(format!("{name}.b"), &[1, dout], Init::Zeros, rng);
        Linear {
            w,
            b: Some(b),
            din,
            dout,
        }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), &[din, dout], Init::KaimingUniform, rng);
        Linear {
            w,
            b: None,
            din,
            dout,
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let y = t.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => t.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.g"), &[1, d], Init::Ones, rng),
            bias: store.add(format!("{name}.b"), &[1, d], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        t.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}

/// Position-wise feedforward with a residual to the block input:
/// `LN(residual + ReLU(x W1 + b1) W2 + b2)`, inner width `4 d`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
    ln: LayerNorm,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            l1: Linear::new(store, &format!("{name}.ff1"), d, 4 * d, rng),
            l2: Linear::new(store, &format!("{name}.ff2"), 4 * d, d, rng),
            ln: LayerNorm::new(store, &format!("{name}.ff_ln"), d, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, residual: Var, x: Var) -> Result<Var> {
        let h = self.l1.forward(t, p, x)?;
        let h = t.relu(h);
        let h = self.l2.forward(t, p, h)?;
        let s = t.add(residual, h)?;
        self.ln.forward(t, p, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_param_gradients, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feedforward_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ff = FeedForward::new(&mut store, "ff", 6, &mut rng);
        let x = Tensor::from_fn(3, 6, |r, c| ((r * 7 + c) as f64 * 0.37).sin());
        let y = Tensor::from_fn(3, 6, |r, c| ((r + 2 * c) as f64 * 0.21).cos());
        let rep = check_param_gradients(
            &store,
            |t, p| {
                let xv = t.constant(x.clone());
                let out = ff.forward(t, p, xv, xv)?;
                let w = t.constant(y.clone());
                let m = t.mul(out, w)?;
                Ok(t.sum(m))
            },
            1e-5,
            100,
            3,
        )
        .unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");
    }
}
