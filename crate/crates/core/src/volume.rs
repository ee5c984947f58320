//! Cubic patching, random masking, Bézier intensity distortion and assembly
//! of a restored volume from two sets of patch predictions.
//!
//! Volumes are row-major over axes `(z, y, x)` with `z` outermost. Patches are
//! numbered in the same z-major raster order over the patch grid, and the
//! voxels inside a patch are again z-major.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch: usize,
    pub dims: [usize; 3],
    pub grid: [usize; 3],
}

impl PatchGrid {
    pub fn new(dims: [usize; 3], patch: usize) -> Result<Self> {
        if patch == 0 || dims.iter().any(|&d| d == 0 || d % patch != 0) {
            return Err(Error::invalid(
                "patch_grid",
                format!("volume {dims:?} is not divisible into {patch}^3 patches"),
            ));
        }
        Ok(PatchGrid {
            patch,
            dims,
            grid: dims.map(|d| d / patch),
        })
    }

    /// Number of patches.
    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }

    /// Voxels per patch.
    pub fn patch_len(&self) -> usize {
        self.patch.pow(3)
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Patch index and within-patch offset of voxel `(z, y, x)`.
    pub fn locate(&self, z: usize, y: usize, x: usize) -> (usize, usize) {
        let p = self.patch;
        let [_, gy, gx] = self.grid;
        let token = ((z / p) * gy + y / p) * gx + x / p;
        let offset = ((z % p) * p + y % p) * p + x % p;
        (token, offset)
    }

    fn for_each_voxel(&self, mut f: impl FnMut(usize, usize)) {
        let [nz, ny, nx] = self.dims;
        let pl = self.patch_len();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let (t, o) = self.locate(z, y, x);
                    f((z * ny + y) * nx + x, t * pl + o);
                }
            }
        }
    }
}

/// Splits a volume into `N` patch rows of `p³` voxels, flattened `[N, p³]`.
pub fn patchify<T: Copy + Default>(volume: &[T], grid: &PatchGrid) -> Result<Vec<T>> {
    if volume.len() != grid.voxels() {
        return Err(Error::invalid(
            "patchify",
            format!("volume has {} voxels, grid {:?} needs {}", volume.len(), grid.dims, grid.voxels()),
        ));
    }
    let mut out = vec![T::default(); volume.len()];
    grid.for_each_voxel(|v, p| out[p] = volume[v]);
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Copy + Default>(patches: &[T], grid: &PatchGrid) -> Result<Vec<T>> {
    if patches.len() != grid.voxels() {
        return Err(Error::invalid(
            "unpatchify",
            format!(
                "expected {} patches of {} voxels, got {} values",
                grid.tokens(),
                grid.patch_len(),
                patches.len()
            ),
        ));
    }
    let mut out = vec![T::default(); patches.len()];
    grid.for_each_voxel(|v, p| out[v] = patches[p]);
    Ok(out)
}

/// Partition of patch indices into visible and masked sets, each ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskPlan {
    pub fn new(tokens: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= tokens) {
            return Err(Error::invalid("mask_plan", "masked index out of range"));
        }
        let mut is_masked = vec![false; tokens];
        masked.iter().for_each(|&m| is_masked[m] = true);
        let visible = (0..tokens).filter(|&i| !is_masked[i]).collect();
        Ok(MaskPlan { visible, masked })
    }

    pub fn tokens(&self) -> usize {
        self.visible.len() + self.masked.len()
    }
}

/// Number of masked patches for `ratio`, rounded to nearest.
pub fn mask_count(tokens: usize, ratio: f64) -> usize {
    (ratio * tokens as f64).round() as usize
}

pub fn sample_mask<R: Rng + ?Sized>(tokens: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("sample_mask", format!("ratio {ratio} outside (0, 1)")));
    }
    let m = mask_count(tokens, ratio);
    if m == 0 || m >= tokens {
        return Err(Error::invalid(
            "sample_mask",
            format!("ratio {ratio} masks {m} of {tokens} patches"),
        ));
    }
    MaskPlan::new(tokens, sample(rng, tokens, m).into_vec())
}

const LUT_SIZE: usize = 1024;

/// Cubic Bézier intensity curve through `(0,0)` and `(1,1)`, inverted in `x`
/// through a dense lookup table.
#[derive(Clone, Debug, PartialEq)]
pub struct BezierCurve {
    pub p1: [f64; 2],
    pub p2: [f64; 2],
    /// Maps `v` to `1 - B(v)` instead of `B(v)`.
    pub decreasing: bool,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

fn bernstein(t: f64, a: f64, b: f64) -> f64 {
    let s = 1.0 - t;
    3.0 * s * s * t * a + 3.0 * s * t * t * b + t * t * t
}

impl BezierCurve {
    pub fn new(p1: [f64; 2], p2: [f64; 2], decreasing: bool) -> Result<Self> {
        if p1.iter().chain(&p2).any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("bezier", "control points must lie in [0, 1]^2"));
        }
        // With control abscissae in [0,1] both coordinates are monotone in t.
        let (xs, ys) = (0..LUT_SIZE)
            .map(|i| {
                let t = i as f64 / (LUT_SIZE - 1) as f64;
                (bernstein(t, p1[0], p2[0]), bernstein(t, p1[1], p2[1]))
            })
            .unzip();
        Ok(BezierCurve {
            p1,
            p2,
            decreasing,
            xs,
            ys,
        })
    }

    /// Control points uniform in the unit square; decreasing with probability 1/2.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let p1 = [rng.random(), rng.random()];
        let p2 = [rng.random(), rng.random()];
        let decreasing = rng.random_bool(0.5);
        Self::new(p1, p2, decreasing).expect("unit-square control points")
    }

    pub fn identity() -> Self {
        Self::new([1.0 / 3.0, 1.0 / 3.0], [2.0 / 3.0, 2.0 / 3.0], false).expect("valid")
    }

    /// Lookup table samples `(x(t), y(t))`.
    pub fn table(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xs.iter().copied().zip(self.ys.iter().copied())
    }

    /// `B(t)` at the `t` where `x(t) = v`.
    pub fn map(&self, v: f64) -> f64 {
        let hi = self.xs.partition_point(|&x| x < v).clamp(1, LUT_SIZE - 1);
        let lo = hi - 1;
        let (x0, x1) = (self.xs[lo], self.xs[hi]);
        let w = if x1 > x0 { ((v - x0) / (x1 - x0)).clamp(0.0, 1.0) } else { 0.0 };
        let y = (self.ys[lo] + w * (self.ys[hi] - self.ys[lo])).clamp(0.0, 1.0);
        if self.decreasing {
            1.0 - y
        } else {
            y
        }
    }
}

/// Remaps every voxel through `curve` with probability `apply_prob` (one draw
/// per call); returns the output and whether the curve was applied.
pub fn bezier_transform<R: Rng + ?Sized>(
    patches: &[f32],
    curve: &BezierCurve,
    apply_prob: f64,
    rng: &mut R,
) -> Result<(Vec<f32>, bool)> {
    if let Some(v) = patches.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid("bezier_transform", format!("voxel value {v} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&apply_prob) {
        return Err(Error::invalid("bezier_transform", "probability outside [0, 1]"));
    }
    if !rng.random_bool(apply_prob) {
        return Ok((patches.to_vec(), false));
    }
    Ok((patches.iter().map(|&v| curve.map(v as f64) as f32).collect(), true))
}

/// Fills masked patch rows from `masked_preds` and visible rows from
/// `visible_preds` (both in plan order) and returns the assembled volume.
pub fn assemble_restoration<T: Copy + Default>(
    masked_preds: &[T],
    visible_preds: &[T],
    plan: &MaskPlan,
    grid: &PatchGrid,
) -> Result<Vec<T>> {
    let pl = grid.patch_len();
    if plan.tokens() != grid.tokens()
        || masked_preds.len() != plan.masked.len() * pl
        || visible_preds.len() != plan.visible.len() * pl
    {
        return Err(Error::invalid(
            "assemble_restoration",
            format!(
                "plan {}+{} patches, got {} masked and {} visible values of length {pl}",
                plan.masked.len(),
                plan.visible.len(),
                masked_preds.len(),
                visible_preds.len()
            ),
        ));
    }
    let mut patches = vec![T::default(); grid.voxels()];
    for (src, idx) in [(masked_preds, &plan.masked), (visible_preds, &plan.visible)] {
        for (r, &t) in idx.iter().enumerate() {
            patches[t * pl..(t + 1) * pl].copy_from_slice(&src[r * pl..(r + 1) * pl]);
        }
    }
    unpatchify(&patches, grid)
}

/// Rows `idx` of a flattened `[N, len]` matrix.
pub fn gather_patches<T: Copy>(patches: &[T], len: usize, idx: &[usize]) -> Vec<T> {
    idx.iter()
        .flat_map(|&i| patches[i * len..(i + 1) * len].iter().copied())
        .collect()
}
