//! Central-difference verification of tape gradients.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pretrain::{
    adversarial_losses, semantic_diversity_loss, AblationMode, Discriminator, Generator, GeneratorPass,
    PretrainConfig, SampleInput,
};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::volume::{MaskPlan, PatchGrid};

pub const DEFAULT_EPS: f64 = 1e-3;

/// Gradients smaller than this are compared absolutely: below it the
/// difference quotient is dominated by rounding in the loss value.
pub const ZERO_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    /// Analytic and finite-difference values at the worst element.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

fn evaluate<F>(store: &ParamStore<f64>, frozen: &[&ParamStore<f64>], f: &F) -> Result<f64>
where
    F: for<'p> Fn(&mut Tape<'p, f64>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    for s in frozen {
        tape.attach_frozen(s)?;
    }
    let loss = f(&mut tape)?;
    Ok(tape.item(loss))
}

/// Compares the tape gradient of `f` against fourth-order central differences
/// with step `eps` for every trainable element of `store`. `frozen` stores are
/// bound read-only.
///
/// Relative error is `|analytic - fd| / max(|analytic|, |fd|, ZERO_FLOOR)`.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    frozen: &[&ParamStore<f64>],
    f: F,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Tape<'p, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        for s in frozen {
            tape.attach_frozen(s)?;
        }
        let loss = f(&mut tape)?;
        let first = tape.item(loss);
        let second = evaluate(store, frozen, &f)?;
        if first.to_bits() != second.to_bits() {
            return Err(Error::NonDeterministic { first, second });
        }
        let grads = tape.backward(loss)?;
        tape.param_grads(&grads)?
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for (pi, param) in store.iter().enumerate() {
        if !param.requires_grad {
            continue;
        }
        let id = store.id(&param.name).expect("parameter exists");
        for j in 0..param.tensor.numel() {
            let orig = param.tensor.data()[j];
            let mut at = |offset: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[j] = orig + offset;
                evaluate(&probe, frozen, &f)
            };
            let near = at(eps)? - at(-eps)?;
            let far = at(2.0 * eps)? - at(-2.0 * eps)?;
            probe.get_mut(id).data_mut()[j] = orig;

            let fd = (8.0 * near - far) / (12.0 * eps);
            let a = analytic.by_index(pi)[j];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(ZERO_FLOOR);
            if !err.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient check of `{}`", param.name),
                });
            }
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((param.name.clone(), j));
                report.worst_values = (a, fd);
            }
        }
    }
    Ok(report)
}

/// Names of the checks run by [`pretrain_loss_suite`].
pub const SUITE_LOSSES: [&str; 7] = [
    "semantic_diversity",
    "pixel_masked",
    "pixel_visible",
    "age",
    "adversarial_critic",
    "adversarial_generator",
    "composite",
];

/// Generator, critic and one masked sample on a 4³ volume in 2³ patches
/// (8 tokens), hidden size 16, with parameters jittered away from init so no
/// gradient is trivially small.
pub struct TinySetup {
    pub grid: PatchGrid,
    pub cfg: PretrainConfig,
    pub gen: Generator,
    pub gen_store: ParamStore<f64>,
    pub disc: Discriminator,
    pub disc_store: ParamStore<f64>,
    pub input: SampleInput,
}

fn jitter(store: &mut ParamStore<f64>, rng: &mut crate::rng::Rng) {
    let noise = Normal::new(0.0, 0.15).expect("valid normal");
    for p in store.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += noise.sample(rng);
        }
    }
}

impl TinySetup {
    pub fn new(seed: u64, mode: u8) -> Result<Self> {
        let grid = PatchGrid::new([4, 4, 4], 2)?;
        let enc = EncoderConfig {
            dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        };
        let cfg = PretrainConfig {
            mode,
            mask_ratio: 0.5,
            decoder_dim: 8,
            decoder_heads: 2,
            disc_dim: 8,
            disc_depth: 1,
            disc_heads: 2,
            ..PretrainConfig::default()
        };
        let mut gen_store = ParamStore::new();
        let gen = Generator::new(&mut gen_store, &mut stream(seed, 1), grid, enc, &cfg)?;
        let mut disc_store = ParamStore::new();
        let disc = Discriminator::new(&mut disc_store, &mut stream(seed, 2), grid, &cfg)?;
        let mut rng = stream(seed, 3);
        jitter(&mut gen_store, &mut rng);
        jitter(&mut disc_store, &mut rng);
        let patches: Vec<f32> = (0..grid.voxels()).map(|_| rng.random_range(0.0..1.0)).collect();
        let plan = MaskPlan::new(grid.tokens(), vec![1, 2, 5, 6])?;
        let distorted = (0..plan.visible.len() * grid.patch_len())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        Ok(TinySetup {
            grid,
            cfg,
            gen,
            gen_store,
            disc,
            disc_store,
            input: SampleInput {
                patches,
                plan,
                distorted,
                age_target: 0.7,
            },
        })
    }

    fn patches(&self, tape: &mut Tape<'_, f64>) -> Result<Var> {
        let data = self.input.patches.iter().map(|&v| v as f64).collect();
        Ok(tape.constant(Tensor::new([self.grid.tokens(), self.grid.patch_len()], data)?))
    }

    fn pass(&self, tape: &mut Tape<'_, f64>, mode: AblationMode) -> Result<GeneratorPass> {
        self.gen.forward(tape, &self.input, &self.cfg, mode)
    }

    /// Runs the named check from [`SUITE_LOSSES`]. Everything except the
    /// critic loss differentiates the generator with the critic frozen.
    pub fn check(&self, loss: &str) -> Result<GradCheckReport> {
        let only = |res_a, age, res_b| AblationMode {
            res_a,
            age,
            res_b,
            adv: false,
        };
        let frozen = [&self.disc_store];
        let gen = |f: &dyn for<'p> Fn(&mut Tape<'p, f64>) -> Result<Var>| {
            grad_check(&self.gen_store, &frozen, f, DEFAULT_EPS)
        };
        match loss {
            "semantic_diversity" => gen(&|tape| {
                let x = self.patches(tape)?;
                let vis = &self.input.plan.visible;
                let x = tape.gather_rows(x, vis)?;
                let y = self.gen.encoder.forward(tape, x, vis, false)?.output;
                let (z1, z2) = self.gen.project_dual(tape, y)?;
                semantic_diversity_loss(tape, z1, z2, self.cfg.exclude_diagonal)
            }),
            "pixel_masked" => gen(&|tape| Ok(self.pass(tape, only(true, false, false))?.pixel.expect("active"))),
            "pixel_visible" => gen(&|tape| Ok(self.pass(tape, only(false, false, true))?.pixel.expect("active"))),
            "age" => gen(&|tape| Ok(self.pass(tape, only(false, true, false))?.age.expect("active"))),
            "adversarial_critic" => {
                let mut rng = stream(0, 4);
                let fake: Vec<f64> = (0..self.grid.voxels()).map(|_| rng.random_range(0.0..1.0)).collect();
                grad_check(
                    &self.disc_store,
                    &[],
                    |tape| {
                        let real = self.patches(tape)?;
                        let shape = [self.grid.tokens(), self.grid.patch_len()];
                        let fake = tape.constant(Tensor::new(shape, fake.clone())?);
                        let d_real = self.disc.forward(tape, real)?;
                        let d_fake = self.disc.forward(tape, fake)?;
                        Ok(adversarial_losses(tape, d_real, d_fake)?.0)
                    },
                    DEFAULT_EPS,
                )
            }
            "adversarial_generator" => gen(&|tape| {
                let full = AblationMode::from_index(4)?;
                let fake = self.pass(tape, full)?.restored.expect("restoring");
                let d_fake = self.disc.forward(tape, fake)?;
                let real = self.patches(tape)?;
                let d_real = self.disc.forward(tape, real)?;
                Ok(adversarial_losses(tape, d_real, d_fake)?.1)
            }),
            "composite" => {
                let mut store = self.gen_store.clone();
                Generator::freeze_inactive(&mut store, self.cfg.ablation()?);
                grad_check(
                    &store,
                    &frozen,
                    |tape| self.gen.composite_loss(tape, &self.disc, &self.input, &self.cfg),
                    DEFAULT_EPS,
                )
            }
            other => Err(Error::invalid("gradient check", format!("unknown loss `{other}`"))),
        }
    }
}

/// Every check of [`SUITE_LOSSES`] on a mode-4 tiny setup.
pub fn pretrain_loss_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let setup = TinySetup::new(seed, 4)?;
    SUITE_LOSSES.iter().map(|&l| Ok((l, setup.check(l)?))).collect()
}
