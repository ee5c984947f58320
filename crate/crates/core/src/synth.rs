//! Procedural phantom volumes with planted age, class, and behavior factors.
//!
//! A phantom is a bright ellipsoidal "brain" with an inner white-matter
//! ellipsoid that shrinks with age, paired ventricles that grow with age, a
//! ring of small blobs whose intensity follows a contrast latent, and, for
//! class 1, a faint bump at a fixed location. Volumes are stored row-major
//! with the first axis outermost and clamped to `[0, 1]`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub patch: usize,
    pub blobs: usize,
    pub age_range: [f64; 2],
    /// Peak intensity of the class-1 bump.
    pub class_effect: f64,
    /// Radius of the class-1 bump in voxels.
    pub class_radius: f64,
    /// Centre of the class-1 bump, as fractions of each axis.
    pub class_center: [f64; 3],
    /// Intensity swing of the blobs per unit of the contrast latent.
    pub blob_contrast: f64,
    pub noise_sigma: f64,
    pub behavior_names: Vec<String>,
    /// One row per score; columns weight (standardized age, contrast).
    pub behavior_weights: Vec<[f64; 2]>,
    pub behavior_noise: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [30, 36, 30],
            patch: 6,
            blobs: 6,
            age_range: [20.0, 80.0],
            class_effect: 0.3,
            class_radius: 5.0,
            class_center: [0.5, 0.3, 0.65],
            blob_contrast: 0.12,
            noise_sigma: 0.02,
            behavior_names: vec!["age_driven".into(), "contrast_driven".into()],
            behavior_weights: vec![[1.0, 0.0], [0.0, 1.0]],
            behavior_noise: 0.3,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.shape.iter().any(|&s| s == 0 || s % self.patch != 0) {
            return Err(Error::invalid(
                "phantom_spec",
                format!("volume shape {:?} is not divisible by patch size {}", self.shape, self.patch),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.behavior_noise >= 0.0) {
            return Err(Error::invalid("phantom_spec", "noise sigma must be >= 0"));
        }
        if !(self.age_range[0] < self.age_range[1]) {
            return Err(Error::invalid("phantom_spec", "age range must be increasing"));
        }
        if self.behavior_names.len() != self.behavior_weights.len() {
            return Err(Error::invalid(
                "phantom_spec",
                "behavior names and weights must have equal length",
            ));
        }
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    /// Age rescaled so a uniform draw over the range has unit variance.
    pub fn standardized_age(&self, age: f64) -> f64 {
        let [lo, hi] = self.age_range;
        (age - (lo + hi) / 2.0) / ((hi - lo) / 12f64.sqrt())
    }

    /// Whether voxel `(i, j, k)` lies inside the class-1 bump's support.
    pub fn in_class_region(&self, i: usize, j: usize, k: usize) -> bool {
        let c = self.class_centre_voxels();
        let d2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
        d2 < self.class_radius * self.class_radius
    }

    fn class_centre_voxels(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.class_center[a] * (self.shape[a] as f64 - 1.0))
    }
}

/// Latent factors of one phantom.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    pub age: f64,
    pub label: u8,
    /// Drives blob intensity and the contrast behavior score.
    pub contrast: f64,
    /// Nuisance factor scaling the brain outline.
    pub size: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Vec<f32>,
    pub age: f64,
    pub label: u8,
    pub behavior: Vec<f64>,
    pub latents: Latents,
    pub seed: u64,
}

fn draw_latents(spec: &PhantomSpec, rng: &mut Rng) -> Latents {
    let [lo, hi] = spec.age_range;
    Latents {
        age: rng.random_range(lo..hi),
        label: rng.random_range(0..2u8),
        contrast: StandardNormal.sample(rng),
        size: StandardNormal.sample(rng),
    }
}

pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    let latents = draw_latents(spec, &mut stream(seed, 0));
    generate_phantom_with_latents(spec, latents, seed)
}

/// Renders a phantom for explicit latents. `seed` drives only the voxel and
/// behavior noise, so phantoms that share latents and seed differ nowhere
/// except where their latents act.
pub fn generate_phantom_with_latents(spec: &PhantomSpec, latents: Latents, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    if latents.label > 1 {
        return Err(Error::invalid("generate_phantom", "label must be 0 or 1"));
    }
    let [lo, hi] = spec.age_range;
    let a = ((latents.age - lo) / (hi - lo)).clamp(0.0, 1.0);
    let [nx, ny, nz] = spec.shape;
    let mut volume = vec![0f32; spec.voxels()];

    let brain_r = 0.82 * (1.0 + 0.04 * latents.size.clamp(-2.5, 2.5));
    let wm_r = [0.58, 0.62, 0.55].map(|r| r * (1.0 - 0.3 * a));
    let vent_r = [0.10, 0.16, 0.08].map(|r| r * (0.7 + 1.3 * a));
    let vent_centres = [[-0.16, 0.0, 0.05], [0.16, 0.0, 0.05]];
    let blob_r = 0.2 * (1.0 - 0.25 * a);
    let blob_level = 0.45 + spec.blob_contrast * latents.contrast.clamp(-3.0, 3.0);
    let blobs: Vec<[f64; 3]> = (0..spec.blobs)
        .map(|b| {
            let phi = 2.0 * std::f64::consts::PI * b as f64 / spec.blobs.max(1) as f64;
            [0.55 * phi.cos(), 0.55 * phi.sin(), -0.3 + 0.6 * (b % 2) as f64]
        })
        .collect();
    let class_c = spec.class_centre_voxels();
    let class_amp = spec.class_effect * latents.label as f64;

    let coord = |i: usize, n: usize| 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
    let mut noise_rng = stream(seed, 1);
    for i in 0..nx {
        let x = coord(i, nx);
        for j in 0..ny {
            let y = coord(j, ny);
            for k in 0..nz {
                let z = coord(k, nz);
                let r2 = |c: [f64; 3], r: [f64; 3]| {
                    ((x - c[0]) / r[0]).powi(2) + ((y - c[1]) / r[1]).powi(2) + ((z - c[2]) / r[2]).powi(2)
                };
                let mut v = 0.0;
                if r2([0.0; 3], [brain_r; 3]) < 1.0 {
                    v = 0.55;
                    if r2([0.0; 3], wm_r) < 1.0 {
                        v = 0.85;
                    }
                    for c in &vent_centres {
                        if r2(*c, vent_r) < 1.0 {
                            v = 0.15;
                        }
                    }
                    for c in &blobs {
                        if r2(*c, [blob_r; 3]) < 1.0 {
                            v = blob_level;
                        }
                    }
                }
                if class_amp != 0.0 {
                    let d2 = (i as f64 - class_c[0]).powi(2)
                        + (j as f64 - class_c[1]).powi(2)
                        + (k as f64 - class_c[2]).powi(2);
                    let u = d2 / (spec.class_radius * spec.class_radius);
                    if u < 1.0 {
                        v += class_amp * (1.0 - u).powi(2);
                    }
                }
                if spec.noise_sigma > 0.0 {
                    let e: f64 = StandardNormal.sample(&mut noise_rng);
                    v += spec.noise_sigma * e;
                }
                volume[(i * ny + j) * nz + k] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }

    let age_z = spec.standardized_age(latents.age);
    let mut behavior_rng = stream(seed, 2);
    let behavior = spec
        .behavior_weights
        .iter()
        .map(|w| {
            let e: f64 = StandardNormal.sample(&mut behavior_rng);
            w[0] * age_z + w[1] * latents.contrast + spec.behavior_noise * e
        })
        .collect();

    Ok(Phantom {
        volume,
        age: latents.age,
        label: latents.label,
        behavior,
        latents,
        seed,
    })
}

/// `n` phantoms with labels alternating over a shuffled order (counts differ
/// by at most one) and ages stratified across the range.
pub fn build_dataset(spec: &PhantomSpec, n: usize, seed: u64) -> Result<Vec<Phantom>> {
    if n < 2 {
        return Err(Error::invalid("build_dataset", format!("need at least 2 phantoms, got {n}")));
    }
    spec.validate()?;
    let mut rng = stream(seed, 0);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut rng);
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(&mut rng);
    let [lo, hi] = spec.age_range;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let sample_seed: u64 = rng.random();
        let mut latents = draw_latents(spec, &mut stream(sample_seed, 0));
        let u: f64 = rng.random();
        latents.age = lo + (hi - lo) * (strata[i] as f64 + u) / n as f64;
        latents.label = labels[i];
        out.push(generate_phantom_with_latents(spec, latents, sample_seed)?);
    }
    Ok(out)
}

/// Splits `0..n` into `k` disjoint shuffled test folds whose sizes differ by at
/// most one; the first `n % k` folds get the extra element.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::invalid("kfold_split", format!("need 2 <= k <= n, got k={k}, n={n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, 7));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = idx[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct IndexEntry {
    pub id: usize,
    pub file: String,
    pub age: f64,
    pub label: u8,
    pub behavior: Vec<f64>,
    pub seed: u64,
    pub latents: Latents,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetIndex {
    pub shape: [usize; 3],
    pub patch: usize,
    pub behavior_names: Vec<String>,
    pub phantoms: Vec<IndexEntry>,
}

/// Writes one little-endian f32 blob per phantom plus `index.json`.
pub fn save_dataset(dir: &Path, spec: &PhantomSpec, phantoms: &[Phantom]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(phantoms.len());
    for (id, p) in phantoms.iter().enumerate() {
        let file = format!("phantom_{id:05}.bin");
        let path = dir.join(&file);
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        for v in &p.volume {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        entries.push(IndexEntry {
            id,
            file,
            age: p.age,
            label: p.label,
            behavior: p.behavior.clone(),
            seed: p.seed,
            latents: p.latents,
        });
    }
    let index = DatasetIndex {
        shape: spec.shape,
        patch: spec.patch,
        behavior_names: spec.behavior_names.clone(),
        phantoms: entries,
    };
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<Phantom>)> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    let voxels: usize = index.shape.iter().product();
    let mut phantoms = Vec::with_capacity(index.phantoms.len());
    for e in &index.phantoms {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        if bytes.len() != voxels * 4 {
            return Err(Error::invalid(
                "load_dataset",
                format!("{}: expected {} bytes, found {}", e.file, voxels * 4, bytes.len()),
            ));
        }
        let volume = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        phantoms.push(Phantom {
            volume,
            age: e.age,
            label: e.label,
            behavior: e.behavior.clone(),
            latents: e.latents,
            seed: e.seed,
        });
    }
    Ok((index, phantoms))
}
