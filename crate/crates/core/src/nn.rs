//! Layers built from tape primitives. Layers hold only [`ParamId`]s.

use rand::Rng;

use crate::autograd::{AttentionCapture, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{constant, trunc_normal, ParamId, ParamStore};
use crate::tensor::Scalar;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::with_std(store, rng, name, input, output, bias, INIT_STD)
    }

    pub fn with_std<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), trunc_normal(rng, &[input, output], std))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), constant(&[output], 0.0))?)
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

    /// `x · W + b` for `x` of shape `[rows, input]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization with learnable gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), constant(&[dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), constant(&[dim], 0.0))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        let y = tape.mul_row(n, g)?;
        tape.add_bias(y, b)
    }
}

/// Two linear layers with a gelu in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), input, hidden, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, output, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, h)
    }
}

/// Pre-norm transformer block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
///
/// The query/key/value projection has no bias. A key bias shifts every score
/// in a row by the same amount, so softmax makes its gradient identically
/// zero; leaving it out keeps every parameter identifiable.
#[derive(Clone, Debug)]
pub struct Block {
    pub dim: usize,
    pub heads: usize,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(
                "block",
                format!("hidden size {dim} is not divisible by {heads} heads"),
            ));
        }
        Ok(Block {
            dim,
            heads,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim, false)?,
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim, true)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        collect: bool,
    ) -> Result<(Var, Option<AttentionCapture<T>>)> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::shape("block", s, &[self.dim]));
        }
        let h = self.norm1.forward(tape, x)?;
        let qkv = self.qkv.forward(tape, h)?;
        let (a, capture) = tape.attention(qkv, self.heads, collect)?;
        let a = self.proj.forward(tape, a)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, x)?;
        let h = self.mlp.forward(tape, h)?;
        Ok((tape.add(x, h)?, capture))
    }
}

/// Token-mean pooling: `[n, d] -> [1, d]`.
pub fn mean_pool<T: Scalar>(tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
    tape.mean_rows(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeroed_output_projections_make_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let block = Block::new(&mut store, &mut rng, "b", 8, 2, 4).unwrap();
        for id in [block.proj.weight, block.mlp.fc2.weight] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new(&store);
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(Tensor::new([3, 8], data.clone()).unwrap());
        let (y, cap) = block.forward(&mut tape, x, true).unwrap();
        assert_eq!(tape.value(y), &data[..]);
        let cap = cap.unwrap();
        for row in cap.probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn block_rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        assert!(Block::new(&mut store, &mut rng, "b", 10, 3, 4).is_err());
    }
}
