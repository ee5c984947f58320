//! Shared ViT encoder: linear patch embedding, learnable absolute positional
//! embedding, pre-norm blocks and a final norm, with per-layer capture.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionCapture, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear, INIT_STD};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("encoder_config", "depth must be at least 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(
                "encoder_config",
                format!("hidden size {} is not divisible by {} heads", self.dim, self.heads),
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::invalid("encoder_config", "mlp ratio must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub tokens: usize,
    pub patch_len: usize,
    pub embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

/// Per-layer outputs of one encoder pass.
#[derive(Debug)]
pub struct Encoded<T> {
    /// Token features after each block, `[n, d]`.
    pub layers: Vec<Var>,
    /// Final-normed output of the last block.
    pub output: Var,
    /// One record per block when capture was requested.
    pub attention: Vec<AttentionCapture<T>>,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        config: EncoderConfig,
        tokens: usize,
        patch_len: usize,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let embed = Linear::new(store, rng, &format!("{name}.embed"), patch_len, d, true)?;
        let pos = store.add(format!("{name}.pos"), trunc_normal(rng, &[tokens, d], INIT_STD))?;
        let blocks = (0..config.depth)
            .map(|i| Block::new(store, rng, &format!("{name}.block{i}"), d, config.heads, config.mlp_ratio))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d)?;
        Ok(Encoder {
            config,
            tokens,
            patch_len,
            embed,
            pos,
            blocks,
            norm,
        })
    }

    /// Projects patch rows `[n, p³]` to `[n, d]` and adds the positional
    /// embedding of each row's original grid position.
    pub fn embed_patches<T: Scalar>(&self, tape: &mut Tape<'_, T>, patches: Var, positions: &[usize]) -> Result<Var> {
        let s = tape.shape(patches);
        if s.len() != 2 || s[1] != self.patch_len {
            return Err(Error::shape("embed_patches", s, &[self.patch_len]));
        }
        if s[0] != positions.len() {
            return Err(Error::invalid(
                "embed_patches",
                format!("{} patches but {} positions", s[0], positions.len()),
            ));
        }
        let x = self.embed.forward(tape, patches)?;
        let pos = tape.param(self.pos);
        let pos = tape.gather_rows(pos, positions)?;
        tape.add(x, pos)
    }

    /// Runs every block over `tokens` (`[n, d]`, `n <= N + 1`).
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var, collect: bool) -> Result<Encoded<T>> {
        let s = tape.shape(tokens);
        if s.len() != 2 || s[1] != self.config.dim || s[0] > self.tokens + 1 {
            return Err(Error::shape("encode", s, &[self.tokens + 1, self.config.dim]));
        }
        let mut x = tokens;
        let mut layers = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::new();
        for block in &self.blocks {
            let (y, cap) = block.forward(tape, x, collect)?;
            attention.extend(cap);
            layers.push(y);
            x = y;
        }
        let output = self.norm.forward(tape, x)?;
        Ok(Encoded {
            layers,
            output,
            attention,
        })
    }

    /// `encode(embed_patches(..))`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        patches: Var,
        positions: &[usize],
        collect: bool,
    ) -> Result<Encoded<T>> {
        let x = self.embed_patches(tape, patches, positions)?;
        self.encode(tape, x, collect)
    }
}
