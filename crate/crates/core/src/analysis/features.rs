//! Frozen-encoder feature extraction.

use rayon::prelude::*;

use crate::autograd::Tape;
use crate::encoder::Encoder;
use crate::error::Result;
use crate::params::ParamStore;
use crate::synth::Phantom;
use crate::tensor::Tensor;
use crate::volume::{patchify, PatchGrid};

/// Per-layer features: every block's output averaged over all patch tokens.
/// Indexed `[layer][sample][dim]`.
pub fn layer_features(
    encoder: &Encoder,
    store: &ParamStore<f32>,
    grid: &PatchGrid,
    phantoms: &[Phantom],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = grid.tokens();
    extract(encoder, store, grid, phantoms, |v| {
        let d = v.len() / n;
        (0..d).map(|j| (0..n).map(|i| v[i * d + j] as f64).sum::<f64>() / n as f64).collect()
    })
}

/// Per-layer features: every block's full token map flattened to `n * d`,
/// keeping where in the volume each response sits. Indexed like
/// [`layer_features`].
pub fn layer_token_features(
    encoder: &Encoder,
    store: &ParamStore<f32>,
    grid: &PatchGrid,
    phantoms: &[Phantom],
) -> Result<Vec<Vec<Vec<f64>>>> {
    extract(encoder, store, grid, phantoms, |v| v.iter().map(|&x| x as f64).collect())
}

fn extract(
    encoder: &Encoder,
    store: &ParamStore<f32>,
    grid: &PatchGrid,
    phantoms: &[Phantom],
    pool: impl Fn(&[f32]) -> Vec<f64> + Sync,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = grid.tokens();
    let positions: Vec<usize> = (0..n).collect();
    let per_sample: Vec<Vec<Vec<f64>>> = phantoms
        .par_iter()
        .map(|p| {
            let patches = patchify(&p.volume, grid)?;
            let mut tape = Tape::new(store);
            let x = tape.constant(Tensor::new([n, grid.patch_len()], patches)?);
            let enc = encoder.forward(&mut tape, x, &positions, false)?;
            Ok(enc.layers.iter().map(|&l| pool(tape.value(l))).collect())
        })
        .collect::<Result<_>>()?;
    let layers = encoder.blocks.len();
    Ok((0..layers)
        .map(|l| per_sample.iter().map(|s| s[l].clone()).collect())
        .collect())
}
