//! Collaborative pretraining: masked reconstruction through two projection
//! heads (branch A), restoration of intensity-distorted visible patches
//! (branch B), age regression, and an adversarial critic on the assembled
//! restoration.
//!
//! Each training step first updates the discriminator against detached
//! restorations, then updates the generator (encoder, heads and decoders)
//! against the freshly updated discriminator. The generator tape is kept
//! across the discriminator update; the adversarial gradient with respect to
//! the restored patches is computed on a separate tape and folded back in as
//! a linear term `sum(restored * g)`, which has exactly that gradient.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear, Mlp, INIT_STD};
use crate::optim::{cosine_warmup_lr, scaled_base_lr, AdamW, AdamWConfig};
use crate::params::{trunc_normal, ParamGrads, ParamId, ParamStore};
use crate::rng::{stream, Rng as StdRng};
use crate::synth::Phantom;
use crate::tensor::{Scalar, Tensor};
use crate::volume::{gather_patches, patchify, sample_mask, BezierCurve, MaskPlan, PatchGrid};

/// Clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub sd: f64,
    pub pixel: f64,
    pub age: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sd: 0.005,
            pixel: 0.79,
            age: 0.1,
            adv: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("sd", self.sd), ("pixel", self.pixel), ("age", self.age), ("adv", self.adv)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::invalid("loss_weights", format!("weight `{name}` = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Which proxy tasks are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMode {
    pub res_a: bool,
    pub age: bool,
    pub res_b: bool,
    pub adv: bool,
}

impl AblationMode {
    /// Modes 0..=4 add, in order, masked reconstruction, age regression,
    /// visible restoration and the adversarial critic.
    pub fn from_index(mode: u8) -> Result<Self> {
        if mode > 4 {
            return Err(Error::invalid("ablation_mode", format!("mode {mode} is not in 0..=4")));
        }
        Ok(AblationMode {
            res_a: mode >= 1,
            age: mode >= 2,
            res_b: mode >= 3,
            adv: mode >= 4,
        })
    }

    pub fn index(&self) -> Option<u8> {
        (0..=4).find(|&m| AblationMode::from_index(m).ok() == Some(*self))
    }

    pub fn restores(&self) -> bool {
        self.res_a || self.res_b
    }

    pub fn validate(&self) -> Result<()> {
        if self.adv && !self.restores() {
            return Err(Error::invalid(
                "ablation_mode",
                "the adversarial task needs a restoration branch to produce fakes",
            ));
        }
        Ok(())
    }
}

/// Scalar values of each loss component. Inactive components are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub sd: f64,
    pub pixel: f64,
    pub age: f64,
    /// Discriminator loss.
    pub adv_d: f64,
    /// Generator-side adversarial loss.
    pub adv_g: f64,
}

/// Weights of the active components, or an error when none can move.
pub fn active_weights(weights: &LossWeights, mode: AblationMode) -> Result<[f64; 4]> {
    weights.validate()?;
    mode.validate()?;
    let w = [
        if mode.res_a { weights.sd } else { 0.0 },
        if mode.restores() { weights.pixel } else { 0.0 },
        if mode.age { weights.age } else { 0.0 },
        if mode.adv { weights.adv } else { 0.0 },
    ];
    if w.iter().all(|&v| v == 0.0) {
        return Err(Error::NothingToOptimize(format!(
            "mode {:?} with weights {:?} has no active weighted task",
            mode.index(),
            weights
        )));
    }
    Ok(w)
}

/// `λ_sd·L_sd + λ_pixel·L_pixel + λ_age·L_age + λ_adv·L_adv` over active tasks,
/// with the generator-side adversarial term as `L_adv`.
pub fn total_pretrain_loss(c: &LossComponents, weights: &LossWeights, mode: AblationMode) -> Result<f64> {
    weights.validate()?;
    let on = |flag: bool, w: f64, v: f64| if flag { w * v } else { 0.0 };
    Ok(on(mode.res_a, weights.sd, c.sd)
        + on(mode.restores(), weights.pixel, c.pixel)
        + on(mode.age, weights.age, c.age)
        + on(mode.adv, weights.adv, c.adv_g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mode: u8,
    pub weights: LossWeights,
    pub mask_ratio: f64,
    /// Probability that a sample's visible patches are Bézier-distorted.
    pub nonlinear_rate: f64,
    /// Drop Gram-matrix diagonals from the semantic diversity loss.
    pub exclude_diagonal: bool,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub disc_dim: usize,
    pub disc_depth: usize,
    pub disc_heads: usize,
    /// Critic learning rate as a multiple of the generator's.
    pub disc_lr_scale: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Defaults to `1.5e-4 * batch_size / 4`.
    pub base_lr: Option<f64>,
    pub adamw: AdamWConfig,
    /// Random masks averaged over when predicting age at evaluation time.
    pub eval_masks: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mode: 4,
            weights: LossWeights::default(),
            mask_ratio: 0.76,
            nonlinear_rate: 0.9,
            exclude_diagonal: false,
            decoder_dim: 32,
            decoder_heads: 4,
            disc_dim: 16,
            disc_depth: 2,
            disc_heads: 2,
            disc_lr_scale: 0.1,
            epochs: 500,
            warmup_epochs: 20,
            batch_size: 16,
            base_lr: None,
            adamw: AdamWConfig::default(),
            eval_masks: 4,
        }
    }
}

impl PretrainConfig {
    pub fn ablation(&self) -> Result<AblationMode> {
        AblationMode::from_index(self.mode)
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr.unwrap_or_else(|| scaled_base_lr(self.batch_size))
    }

    pub fn validate(&self) -> Result<()> {
        let mode = self.ablation()?;
        // Mode 0 is the untrained baseline; downstream stages accept it.
        if self.mode == 0 {
            self.weights.validate()?;
        } else {
            active_weights(&self.weights, mode)?;
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::invalid("pretrain", "mask_ratio must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.nonlinear_rate) {
            return Err(Error::invalid("pretrain", "nonlinear_rate must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("pretrain", "batch_size and epochs must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::invalid("pretrain", "warmup_epochs must be below epochs"));
        }
        for (dim, heads, what) in [
            (self.decoder_dim, self.decoder_heads, "decoder"),
            (self.disc_dim, self.disc_heads, "discriminator"),
        ] {
            if heads == 0 || dim % heads != 0 {
                return Err(Error::invalid("pretrain", format!("{what} dim {dim} not divisible by {heads} heads")));
            }
        }
        if !(self.disc_lr_scale > 0.0 && self.disc_lr_scale.is_finite()) {
            return Err(Error::invalid("pretrain", "disc_lr_scale must be positive"));
        }
        if self.disc_depth == 0 {
            return Err(Error::invalid("pretrain", "discriminator needs at least one block"));
        }
        Ok(())
    }
}

/// One transformer block decoder ending in a per-token pixel head.
#[derive(Clone, Debug)]
pub struct PixelDecoder {
    pub embed: Linear,
    pub pos: ParamId,
    pub block: Block,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl PixelDecoder {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        dim: usize,
        heads: usize,
        tokens: usize,
        patch_len: usize,
    ) -> Result<Self> {
        Ok(PixelDecoder {
            embed: Linear::new(store, rng, &format!("{name}.embed"), input, dim, true)?,
            pos: store.add(format!("{name}.pos"), trunc_normal(rng, &[tokens, dim], INIT_STD))?,
            block: Block::new(store, rng, &format!("{name}.block"), dim, heads, 4)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            head: Linear::new(store, rng, &format!("{name}.head"), dim, patch_len, true)?,
        })
    }

    /// Decodes tokens sitting at grid `positions` and returns pixel rows for
    /// the token rows listed in `out_rows`.
    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        tokens: Var,
        positions: &[usize],
        out_rows: Option<&[usize]>,
    ) -> Result<Var> {
        let x = self.embed.forward(tape, tokens)?;
        let pos = tape.param(self.pos);
        let pos = tape.gather_rows(pos, positions)?;
        let x = tape.add(x, pos)?;
        let (x, _) = self.block.forward(tape, x, false)?;
        let x = match out_rows {
            Some(rows) => tape.gather_rows(x, rows)?,
            None => x,
        };
        let x = self.norm.forward(tape, x)?;
        self.head.forward(tape, x)
    }
}

/// Single-block decoder, token-mean pooling, scalar head.
#[derive(Clone, Debug)]
pub struct AgeDecoder {
    pub embed: Linear,
    pub block: Block,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl AgeDecoder {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, y: Var) -> Result<Var> {
        let x = self.embed.forward(tape, y)?;
        let (x, _) = self.block.forward(tape, x, false)?;
        let x = self.norm.forward(tape, x)?;
        let x = tape.mean_rows(x)?;
        self.head.forward(tape, x)
    }
}

/// Encoder plus every pretraining head; all parameters live in one store.
#[derive(Clone, Debug)]
pub struct Generator {
    pub grid: PatchGrid,
    pub encoder: Encoder,
    pub head_a1: Mlp,
    pub head_a2: Mlp,
    pub head_b: Mlp,
    pub dec_a: PixelDecoder,
    pub dec_b: PixelDecoder,
    pub dec_age: AgeDecoder,
    pub mask_token: ParamId,
}

/// Parameter-name prefixes of parts used only by the given task.
fn task_prefixes(mode: AblationMode) -> Vec<&'static str> {
    let mut off = Vec::new();
    if !mode.res_a {
        off.extend(["head_a1.", "head_a2.", "dec_a.", "mask_token"]);
    }
    if !mode.res_b {
        off.extend(["head_b.", "dec_b."]);
    }
    if !mode.age {
        off.push("dec_age.");
    }
    off
}

impl Generator {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        grid: PatchGrid,
        encoder: EncoderConfig,
        cfg: &PretrainConfig,
    ) -> Result<Self> {
        let (n, pl) = (grid.tokens(), grid.patch_len());
        let d = encoder.dim;
        let (dd, dh) = (cfg.decoder_dim, cfg.decoder_heads);
        let encoder = Encoder::new(store, rng, "encoder", encoder, n, pl)?;
        let head_a1 = Mlp::new(store, rng, "head_a1", d, d, d)?;
        let head_a2 = Mlp::new(store, rng, "head_a2", d, d, d)?;
        let head_b = Mlp::new(store, rng, "head_b", d, d, d)?;
        let dec_a = PixelDecoder::new(store, rng, "dec_a", d, dd, dh, n, pl)?;
        let dec_b = PixelDecoder::new(store, rng, "dec_b", d, dd, dh, n, pl)?;
        let dec_age = AgeDecoder {
            embed: Linear::new(store, rng, "dec_age.embed", d, dd, true)?,
            block: Block::new(store, rng, "dec_age.block", dd, dh, 4)?,
            norm: LayerNorm::new(store, "dec_age.norm", dd)?,
            head: Linear::new(store, rng, "dec_age.head", dd, 1, true)?,
        };
        let mask_token = store.add("mask_token", trunc_normal(rng, &[1, d], INIT_STD))?;
        Ok(Generator {
            grid,
            encoder,
            head_a1,
            head_a2,
            head_b,
            dec_a,
            dec_b,
            dec_age,
            mask_token,
        })
    }

    /// Marks parameters of inactive tasks as frozen.
    pub fn freeze_inactive<T: Scalar>(store: &mut ParamStore<T>, mode: AblationMode) {
        for p in store.iter_mut() {
            p.requires_grad = true;
        }
        for prefix in task_prefixes(mode) {
            store.set_requires_grad_prefix(prefix, false);
        }
    }

    pub fn project_dual<T: Scalar>(&self, tape: &mut Tape<'_, T>, y: Var) -> Result<(Var, Var)> {
        Ok((self.head_a1.forward(tape, y)?, self.head_a2.forward(tape, y)?))
    }

    /// Masked-patch predictions `D_A(z1 ⊕ m) − D_A(z2 ⊕ m)`, `[|masked|, p³]`.
    pub fn decode_masked<T: Scalar>(&self, tape: &mut Tape<'_, T>, z1: Var, z2: Var, plan: &MaskPlan) -> Result<Var> {
        let n = self.grid.tokens();
        if plan.tokens() != n || tape.shape(z1)[0] != plan.visible.len() {
            return Err(Error::invalid(
                "decode_masked",
                format!("plan covers {} tokens with {} visible; grid has {n}", plan.tokens(), plan.visible.len()),
            ));
        }
        let m = tape.param(self.mask_token);
        let m = tape.gather_rows(m, &vec![0; plan.masked.len()])?;
        let m = tape.scatter_rows(m, &plan.masked, n)?;
        let positions: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(2);
        for z in [z1, z2] {
            let v = tape.scatter_rows(z, &plan.visible, n)?;
            let full = tape.add(v, m)?;
            out.push(self.dec_a.forward(tape, full, &positions, Some(&plan.masked))?);
        }
        tape.sub(out[0], out[1])
    }

    /// Restored visible patches from distorted ones, `[|visible|, p³]`.
    pub fn restore_visible<T: Scalar>(&self, tape: &mut Tape<'_, T>, distorted: Var, plan: &MaskPlan) -> Result<Var> {
        let enc = self.encoder.forward(tape, distorted, &plan.visible, false)?;
        let z = self.head_b.forward(tape, enc.output)?;
        self.dec_b.forward(tape, z, &plan.visible, None)
    }

    /// Normalized age prediction, `[1, 1]`.
    pub fn predict_age<T: Scalar>(&self, tape: &mut Tape<'_, T>, y: Var) -> Result<Var> {
        self.dec_age.forward(tape, y)
    }
}

/// Mean over Gram entries of `−ln σ(z1 z1ᵀ) − ln(1 − σ(z2 z2ᵀ))`, with both
/// sigmoids clamped to `[1e-7, 1 − 1e-7]`.
pub fn semantic_diversity_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    z1: Var,
    z2: Var,
    exclude_diagonal: bool,
) -> Result<Var> {
    if tape.shape(z1) != tape.shape(z2) || tape.shape(z1).len() != 2 {
        return Err(Error::shape("semantic_diversity_loss", tape.shape(z1), tape.shape(z2)));
    }
    let n = tape.shape(z1)[0];
    let mut terms = Vec::with_capacity(2);
    for (z, positive) in [(z1, true), (z2, false)] {
        let g = tape.matmul_t(z, z, false, true)?;
        let g = if exclude_diagonal {
            if n < 2 {
                return Err(Error::invalid("semantic_diversity_loss", "need two tokens to drop the diagonal"));
            }
            let flat = tape.reshape(g, &[n * n, 1])?;
            let off: Vec<usize> = (0..n * n).filter(|i| i / n != i % n).collect();
            tape.gather_rows(flat, &off)?
        } else {
            g
        };
        let s = tape.sigmoid(g)?;
        let s = tape.clamp(s, PROB_EPS, 1.0 - PROB_EPS);
        let s = if positive {
            s
        } else {
            let neg = tape.neg(s);
            tape.add_scalar(neg, 1.0)
        };
        let l = tape.ln(s)?;
        terms.push(tape.mean(l));
    }
    let sum = tape.add(terms[0], terms[1])?;
    Ok(tape.neg(sum))
}

/// Patch-token transformer critic producing a clamped probability of "real".
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Discriminator {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        grid: PatchGrid,
        cfg: &PretrainConfig,
    ) -> Result<Self> {
        let d = cfg.disc_dim;
        Ok(Discriminator {
            embed: Linear::new(store, rng, "disc.embed", grid.patch_len(), d, true)?,
            pos: store.add("disc.pos", trunc_normal(rng, &[grid.tokens(), d], INIT_STD))?,
            blocks: (0..cfg.disc_depth)
                .map(|i| Block::new(store, rng, &format!("disc.block{i}"), d, cfg.disc_heads, 4))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(store, "disc.norm", d)?,
            head: Linear::new(store, rng, "disc.head", d, 1, true)?,
        })
    }

    /// Probability in `[1e-7, 1 − 1e-7]` for patches `[N, p³]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, patches: Var) -> Result<Var> {
        let x = self.embed.forward(tape, patches)?;
        let pos = tape.param(self.pos);
        let mut x = tape.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(tape, x, false)?.0;
        }
        let x = self.norm.forward(tape, x)?;
        let x = tape.mean_rows(x)?;
        let logit = self.head.forward(tape, x)?;
        let p = tape.sigmoid(logit)?;
        Ok(tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS))
    }
}

/// `(−[ln D(real) + ln(1 − D(fake))], −ln D(fake))` from critic outputs.
pub fn adversarial_losses<T: Scalar>(tape: &mut Tape<'_, T>, d_real: Var, d_fake: Var) -> Result<(Var, Var)> {
    let lr = tape.ln(d_real)?;
    let nf = tape.neg(d_fake);
    let one_minus = tape.add_scalar(nf, 1.0);
    let lf = tape.ln(one_minus)?;
    let s = tape.add(lr, lf)?;
    let loss_d = tape.neg(s);
    let lg = tape.ln(d_fake)?;
    let loss_g = tape.neg(lg);
    Ok((loss_d, loss_g))
}

/// Everything needed to run the generator on one sample.
#[derive(Clone, Debug)]
pub struct SampleInput {
    /// Patches `[N, p³]`.
    pub patches: Vec<f32>,
    pub plan: MaskPlan,
    /// Distorted visible patches `[|visible|, p³]`.
    pub distorted: Vec<f32>,
    /// Age after training-set standardization.
    pub age_target: f64,
}

impl SampleInput {
    /// Draws the mask, curve and application coin for `phantom` from `rng`.
    pub fn prepare(
        phantom: &Phantom,
        grid: &PatchGrid,
        cfg: &PretrainConfig,
        age_norm: (f64, f64),
        rng: &mut StdRng,
    ) -> Result<Self> {
        let patches = patchify(&phantom.volume, grid)?;
        let plan = sample_mask(grid.tokens(), cfg.mask_ratio, rng)?;
        let visible = gather_patches(&patches, grid.patch_len(), &plan.visible);
        let curve = BezierCurve::random(rng);
        let (distorted, _) = crate::volume::bezier_transform(&visible, &curve, cfg.nonlinear_rate, rng)?;
        Ok(SampleInput {
            patches,
            plan,
            distorted,
            age_target: (phantom.age - age_norm.0) / age_norm.1,
        })
    }
}

/// Tape handles of one generator forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorPass {
    pub sd: Option<Var>,
    pub pixel: Option<Var>,
    pub age: Option<Var>,
    pub age_pred: Option<Var>,
    /// Assembled restoration `[N, p³]`.
    pub restored: Option<Var>,
    /// Weighted sum of the non-adversarial terms.
    pub total: Option<Var>,
}

fn f32_tensor<T: Scalar>(shape: [usize; 2], data: &[f32]) -> Result<Tensor<T>> {
    Tensor::new(shape, data.iter().map(|&v| T::of(v as f64)).collect())
}

fn weighted_sum<T: Scalar>(tape: &mut Tape<'_, T>, terms: &[(f64, Option<Var>)]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let Some(v) = v else { continue };
        let t = tape.scale(v, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, t)?,
            None => t,
        });
    }
    Ok(acc)
}

impl Generator {
    /// Runs every active task on one sample. Inactive restoration branches
    /// contribute ground-truth patches to the assembled volume.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        input: &SampleInput,
        cfg: &PretrainConfig,
        mode: AblationMode,
    ) -> Result<GeneratorPass> {
        let (n, pl) = (self.grid.tokens(), self.grid.patch_len());
        let plan = &input.plan;
        let x_all = tape.constant(f32_tensor([n, pl], &input.patches)?);
        let mut pass = GeneratorPass {
            sd: None,
            pixel: None,
            age: None,
            age_pred: None,
            restored: None,
            total: None,
        };

        let y = if mode.res_a || mode.age {
            let x_vis = tape.gather_rows(x_all, &plan.visible)?;
            Some(self.encoder.forward(tape, x_vis, &plan.visible, false)?.output)
        } else {
            None
        };

        let masked = match (mode.res_a, y) {
            (true, Some(y)) => {
                let (z1, z2) = self.project_dual(tape, y)?;
                pass.sd = Some(semantic_diversity_loss(tape, z1, z2, cfg.exclude_diagonal)?);
                self.decode_masked(tape, z1, z2, plan)?
            }
            _ => tape.gather_rows(x_all, &plan.masked)?,
        };
        let visible = if mode.res_b {
            let d = tape.constant(f32_tensor([plan.visible.len(), pl], &input.distorted)?);
            self.restore_visible(tape, d, plan)?
        } else {
            tape.gather_rows(x_all, &plan.visible)?
        };
        if mode.restores() {
            let a = tape.scatter_rows(masked, &plan.masked, n)?;
            let b = tape.scatter_rows(visible, &plan.visible, n)?;
            let restored = tape.add(a, b)?;
            pass.pixel = Some(tape.mse_loss(restored, x_all)?);
            pass.restored = Some(restored);
        }
        if let (true, Some(y)) = (mode.age, y) {
            let pred = self.predict_age(tape, y)?;
            let target = tape.constant(Tensor::new([1, 1], vec![T::of(input.age_target)])?);
            pass.age = Some(tape.mse_loss(pred, target)?);
            pass.age_pred = Some(pred);
        }
        let w = &cfg.weights;
        pass.total = weighted_sum(tape, &[(w.sd, pass.sd), (w.pixel, pass.pixel), (w.age, pass.age)])?;
        Ok(pass)
    }

    /// The full weighted objective on one tape, with the critic bound as a
    /// frozen store. Used for gradient verification; training splits the
    /// adversarial term out (see the module docs).
    pub fn composite_loss<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        disc: &Discriminator,
        input: &SampleInput,
        cfg: &PretrainConfig,
    ) -> Result<Var> {
        let mode = cfg.ablation()?;
        active_weights(&cfg.weights, mode)?;
        let pass = self.forward(tape, input, cfg, mode)?;
        let adv = match (mode.adv, pass.restored) {
            (true, Some(r)) => {
                let d = disc.forward(tape, r)?;
                let lg = tape.ln(d)?;
                let lg = tape.reshape(lg, &[1])?;
                Some(tape.neg(lg))
            }
            _ => None,
        };
        let extra = weighted_sum(tape, &[(cfg.weights.adv, adv)])?;
        match (pass.total, extra) {
            (Some(a), Some(b)) => tape.add(a, b),
            (Some(a), None) | (None, Some(a)) => Ok(a),
            (None, None) => Err(Error::NothingToOptimize("no active loss term".into())),
        }
    }
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub sd: f64,
    pub pixel: f64,
    pub age: f64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub total: f64,
    pub lr: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,L_sd,L_pixel,L_age,L_adv_D,L_adv_G,total,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.sd, self.pixel, self.age, self.adv_d, self.adv_g, self.total, self.lr
        )
    }
}

/// Training state: both stores, both optimizers and the augmentation stream.
pub struct Pretrainer {
    pub cfg: PretrainConfig,
    pub mode: AblationMode,
    pub generator: Generator,
    pub disc: Discriminator,
    pub gen_store: ParamStore<f32>,
    pub disc_store: ParamStore<f32>,
    opt_g: AdamW<f32>,
    opt_d: AdamW<f32>,
    pub step: usize,
    pub age_norm: (f64, f64),
    mask_rng: StdRng,
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: format!("pretraining loss component {name} ({v})"),
        })
    }
}

/// Mean and standard deviation of training ages.
pub fn age_normalization(phantoms: &[Phantom]) -> (f64, f64) {
    let n = phantoms.len().max(1) as f64;
    let mean = phantoms.iter().map(|p| p.age).sum::<f64>() / n;
    let var = phantoms.iter().map(|p| (p.age - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-6))
}

impl Pretrainer {
    pub fn new(
        grid: PatchGrid,
        encoder: EncoderConfig,
        cfg: PretrainConfig,
        init_seed: u64,
        mask_seed: u64,
        age_norm: (f64, f64),
    ) -> Result<Self> {
        cfg.validate()?;
        active_weights(&cfg.weights, cfg.ablation()?)?;
        let mode = cfg.ablation()?;
        let mut rng = stream(init_seed, 10);
        let mut gen_store = ParamStore::new();
        let generator = Generator::new(&mut gen_store, &mut rng, grid, encoder, &cfg)?;
        Generator::freeze_inactive(&mut gen_store, mode);
        let mut disc_store = ParamStore::new();
        let disc = Discriminator::new(&mut disc_store, &mut stream(init_seed, 11), grid, &cfg)?;
        let opt_g = AdamW::new(&gen_store, cfg.adamw);
        let opt_d = AdamW::new(&disc_store, cfg.adamw);
        Ok(Pretrainer {
            mode,
            generator,
            disc,
            gen_store,
            disc_store,
            opt_g,
            opt_d,
            step: 0,
            age_norm,
            mask_rng: stream(mask_seed, 20),
            cfg,
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, batch: &[SampleInput], lr: f64, epoch: usize) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(Error::invalid("pretrain_step", "empty batch"));
        }
        let weights = active_weights(&self.cfg.weights, self.mode)?;
        let inv_b = 1.0 / batch.len() as f64;
        let (cfg, mode) = (&self.cfg, self.mode);
        let generator = &self.generator;
        let gen_store = &self.gen_store;

        let mut tapes: Vec<(Tape<'_, f32>, GeneratorPass)> = batch
            .par_iter()
            .map(|input| {
                let mut tape = Tape::new(gen_store);
                let pass = generator.forward(&mut tape, input, cfg, mode)?;
                Ok((tape, pass))
            })
            .collect::<Result<_>>()?;

        let mut rec = LossRecord {
            step: self.step,
            epoch,
            sd: 0.0,
            pixel: 0.0,
            age: 0.0,
            adv_d: 0.0,
            adv_g: 0.0,
            total: 0.0,
            lr,
        };
        for (tape, pass) in &tapes {
            let val = |v: Option<Var>| v.map_or(0.0, |v| tape.item(v) as f64);
            rec.sd += val(pass.sd) * inv_b;
            rec.pixel += val(pass.pixel) * inv_b;
            rec.age += val(pass.age) * inv_b;
        }
        check_finite("L_sd", rec.sd)?;
        check_finite("L_pixel", rec.pixel)?;
        check_finite("L_age", rec.age)?;

        let mut adv_grads: Vec<Option<Vec<f32>>> = vec![None; batch.len()];
        if mode.adv {
            let fakes: Vec<Vec<f32>> = tapes
                .iter()
                .map(|(t, p)| t.value(p.restored.expect("adversarial mode restores")).to_vec())
                .collect();
            let shape = [generator.grid.tokens(), generator.grid.patch_len()];

            let disc = &self.disc;
            let disc_store = &self.disc_store;
            let d_results: Vec<(f64, ParamGrads<f32>)> = batch
                .par_iter()
                .zip(&fakes)
                .map(|(input, fake)| {
                    let mut tape = Tape::new(disc_store);
                    let real = tape.constant(Tensor::new(shape, input.patches.clone())?);
                    let fake = tape.constant(Tensor::new(shape, fake.clone())?);
                    let dr = disc.forward(&mut tape, real)?;
                    let df = disc.forward(&mut tape, fake)?;
                    let (loss_d, _) = adversarial_losses(&mut tape, dr, df)?;
                    let g = tape.backward(loss_d)?;
                    Ok((tape.item(loss_d) as f64, tape.param_grads(&g)?))
                })
                .collect::<Result<_>>()?;
            let mut dg = ParamGrads::zeros_like(&self.disc_store);
            for (l, g) in &d_results {
                rec.adv_d += l * inv_b;
                dg.add_assign(g);
            }
            check_finite("L_adv_D", rec.adv_d)?;
            dg.scale(inv_b as f32);
            self.opt_d.step(&mut self.disc_store, &dg, lr * self.cfg.disc_lr_scale)?;

            let disc_store = &self.disc_store;
            let g_results: Vec<(f64, Vec<f32>)> = fakes
                .par_iter()
                .map(|fake| {
                    let mut tape = Tape::new(disc_store);
                    let x = tape.leaf(Tensor::new(shape, fake.clone())?);
                    let d = disc.forward(&mut tape, x)?;
                    let lg = tape.ln(d)?;
                    let lg = tape.neg(lg);
                    let g = tape.backward(lg)?;
                    let scale = weights[3] as f32;
                    let gx = g.get(x).map(|g| g.iter().map(|v| v * scale).collect()).unwrap_or_default();
                    Ok((tape.item(lg) as f64, gx))
                })
                .collect::<Result<_>>()?;
            for (i, (l, gx)) in g_results.into_iter().enumerate() {
                rec.adv_g += l * inv_b;
                adv_grads[i] = Some(gx);
            }
            check_finite("L_adv_G", rec.adv_g)?;
        }
        let comps = LossComponents {
            sd: rec.sd,
            pixel: rec.pixel,
            age: rec.age,
            adv_d: rec.adv_d,
            adv_g: rec.adv_g,
        };
        rec.total = total_pretrain_loss(&comps, &self.cfg.weights, mode)?;
        check_finite("total", rec.total)?;

        let grads: Vec<ParamGrads<f32>> = tapes
            .par_iter_mut()
            .zip(adv_grads.into_par_iter())
            .map(|((tape, pass), adv)| {
                let mut loss = pass.total;
                if let (Some(gx), Some(r)) = (adv, pass.restored) {
                    let c = tape.constant(Tensor::new(tape.shape(r).to_vec(), gx)?);
                    let lin = tape.mul(r, c)?;
                    let lin = tape.sum(lin);
                    loss = Some(match loss {
                        Some(l) => tape.add(l, lin)?,
                        None => lin,
                    });
                }
                let loss = loss.ok_or_else(|| Error::NothingToOptimize("no generator loss".into()))?;
                let g = tape.backward(loss)?;
                tape.param_grads(&g)
            })
            .collect::<Result<_>>()?;
        drop(tapes);
        let mut total = ParamGrads::zeros_like(&self.gen_store);
        for g in &grads {
            total.add_assign(g);
        }
        total.scale(inv_b as f32);
        self.opt_g.step(&mut self.gen_store, &total, lr)?;
        self.step += 1;
        Ok(rec)
    }

    /// Shuffles, batches and trains for `cfg.epochs`, calling `on_step` with
    /// every record.
    pub fn fit(&mut self, phantoms: &[Phantom], mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        if phantoms.is_empty() {
            return Err(Error::invalid("pretrain", "empty training set"));
        }
        let per_epoch = self.steps_per_epoch(phantoms.len());
        let total_steps = per_epoch * self.cfg.epochs;
        let warmup = per_epoch * self.cfg.warmup_epochs;
        let base_lr = self.cfg.base_lr();
        let mut order: Vec<usize> = (0..phantoms.len()).collect();
        let mut records = Vec::with_capacity(total_steps);
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut self.mask_rng);
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch = chunk
                    .iter()
                    .map(|&i| {
                        SampleInput::prepare(
                            &phantoms[i],
                            &self.generator.grid,
                            &self.cfg,
                            self.age_norm,
                            &mut self.mask_rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let lr = cosine_warmup_lr(self.step, warmup, total_steps, base_lr);
                let rec = self.step(&batch, lr, epoch)?;
                on_step(&rec);
                records.push(rec);
            }
        }
        Ok(records)
    }

    /// Age prediction in years, averaged over `cfg.eval_masks` random masks
    /// drawn from `seed`.
    pub fn predict_age_years(&self, phantom: &Phantom, seed: u64) -> Result<f64> {
        let grid = &self.generator.grid;
        let patches = patchify(&phantom.volume, grid)?;
        let mut rng = stream(seed, 30);
        let k = self.cfg.eval_masks.max(1);
        let mut acc = 0.0;
        for _ in 0..k {
            let plan = sample_mask(grid.tokens(), self.cfg.mask_ratio, &mut rng)?;
            let mut tape = Tape::new(&self.gen_store);
            let x = tape.constant(f32_tensor([grid.tokens(), grid.patch_len()], &patches)?);
            let x_vis = tape.gather_rows(x, &plan.visible)?;
            let y = self.generator.encoder.forward(&mut tape, x_vis, &plan.visible, false)?.output;
            let p = self.generator.predict_age(&mut tape, y)?;
            acc += tape.item(p) as f64;
        }
        Ok(acc / k as f64 * self.age_norm.1 + self.age_norm.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights_sum() {
        let c = LossComponents {
            sd: 1.0,
            pixel: 1.0,
            age: 1.0,
            adv_d: 1.0,
            adv_g: 1.0,
        };
        let mode = AblationMode::from_index(4).unwrap();
        let t = total_pretrain_loss(&c, &LossWeights::default(), mode).unwrap();
        assert!((t - 0.995).abs() < 1e-12);
        let zero = LossWeights {
            sd: 0.0,
            pixel: 0.0,
            age: 0.0,
            adv: 0.0,
        };
        assert_eq!(total_pretrain_loss(&c, &zero, mode).unwrap(), 0.0);
        assert!(matches!(active_weights(&zero, mode), Err(Error::NothingToOptimize(_))));
        let neg = LossWeights {
            age: -0.1,
            ..LossWeights::default()
        };
        assert!(total_pretrain_loss(&c, &neg, mode).is_err());
    }

    #[test]
    fn modes_match_incremental_table() {
        let rows = [
            (false, false, false, false),
            (true, false, false, false),
            (true, true, false, false),
            (true, true, true, false),
            (true, true, true, true),
        ];
        for (i, r) in rows.iter().enumerate() {
            let m = AblationMode::from_index(i as u8).unwrap();
            assert_eq!((m.res_a, m.age, m.res_b, m.adv), *r);
            assert_eq!(m.index(), Some(i as u8));
        }
        assert!(AblationMode::from_index(5).is_err());
        assert!(matches!(
            active_weights(&LossWeights::default(), AblationMode::from_index(0).unwrap()),
            Err(Error::NothingToOptimize(_))
        ));
    }

    #[test]
    fn zero_embeddings_give_two_ln_two() {
        let mut tape = Tape::<f64>::detached();
        let z = tape.constant(Tensor::zeros([3, 4]));
        let l = semantic_diversity_loss(&mut tape, z, z, false).unwrap();
        assert!((tape.item(l) - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uninformative_critic_losses() {
        let mut tape = Tape::<f64>::detached();
        let half = tape.constant(Tensor::new([1, 1], vec![0.5]).unwrap());
        let (d, g) = adversarial_losses(&mut tape, half, half).unwrap();
        assert!((tape.item(d) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((tape.item(g) - 2f64.ln()).abs() < 1e-12);
    }
}
