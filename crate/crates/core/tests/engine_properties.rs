//! Property tests for tensor ops, autograd, patching, masking and folds.

use proptest::prelude::*;
use rand::Rng as _;
use voxformer_core::gradcheck::{grad_check, DEFAULT_EPS};
use voxformer_core::rng::stream;
use voxformer_core::synth::kfold_split;
use voxformer_core::volume::{mask_count, patchify, sample_mask, unpatchify, BezierCurve, PatchGrid};
use voxformer_core::{ParamStore, Tape, Tensor};

fn random_tensor(seed: u64, shape: &[usize], scale: f64) -> Tensor<f64> {
    let mut rng = stream(seed, 0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_ignores_row_shifts(seed in 0u64..1000, c in -50.0f64..50.0) {
        let x = random_tensor(seed, &[3, 5], 4.0);
        let shifted = Tensor::new([3, 5], x.data().iter().map(|v| v + c).collect()).unwrap();
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(x);
        let b = tape.constant(shifted);
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        for (u, v) in tape.value(sa).iter().zip(tape.value(sb)) {
            prop_assert!((u - v).abs() < 1e-12);
        }
        for row in tape.value(sa).chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_gather_picks_source_rows(seed in 0u64..1000, ra in 1usize..5, rb in 1usize..5) {
        let a = random_tensor(seed, &[ra, 3], 1.0);
        let b = random_tensor(seed + 1, &[rb, 3], 1.0);
        let all: Vec<&[f64]> = a.data().chunks(3).chain(b.data().chunks(3)).collect();
        let mut rng = stream(seed, 5);
        let idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..ra + rb)).collect();
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let cat = tape.concat(&[va, vb]).unwrap();
        prop_assert_eq!(tape.shape(cat), &[ra + rb, 3]);
        let g = tape.gather_rows(cat, &idx).unwrap();
        for (row, &i) in tape.value(g).chunks(3).zip(&idx) {
            prop_assert_eq!(row, all[i]);
        }
    }

    /// Matmul, bias, GELU, layer norm, attention, sigmoid, log and MSE in one
    /// chain, checked against finite differences.
    #[test]
    fn primitive_chain_gradients(seed in 0u64..10_000) {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", random_tensor(seed, &[4, 6], 0.8)).unwrap();
        let b = store.add("b", random_tensor(seed + 1, &[6], 0.5)).unwrap();
        let g = store.add("g", random_tensor(seed + 2, &[6], 1.0)).unwrap();
        let q = store.add("q", random_tensor(seed + 3, &[6, 18], 0.6)).unwrap();
        let x = random_tensor(seed + 4, &[5, 4], 1.0);
        let target = random_tensor(seed + 5, &[2, 5], 1.0);
        let r = grad_check(&store, &[], |tape| {
            let x = tape.constant(x.clone());
            let w = tape.param(w);
            let h = tape.matmul(x, w)?;
            let bias = tape.param(b);
            let h = tape.add_bias(h, bias)?;
            let h = tape.gelu(h)?;
            let h = tape.layer_norm(h)?;
            let gain = tape.param(g);
            let h = tape.mul_row(h, gain)?;
            let q = tape.param(q);
            let qkv = tape.matmul(h, q)?;
            let (att, _) = tape.attention(qkv, 2, false)?;
            let both = tape.concat(&[att, h])?;
            let both = tape.reshape(both, &[5, 12])?;
            let s = tape.sigmoid(both)?;
            let s = tape.add_scalar(s, 0.1);
            let l = tape.ln(s)?;
            let l = tape.transpose(l)?;
            let l = tape.gather_rows(l, &[11, 0])?;
            let t = tape.constant(target.clone());
            tape.mse_loss(l, t)
        }, DEFAULT_EPS).unwrap();
        // Gradients near 1e-7 meet the ~1e-13 roundoff of the differences,
        // which is ~1e-6 relative; the loss checks use the same 1e-5 bar.
        prop_assert!(r.max_rel_err < 1e-5, "{:?}", r);
    }

    #[test]
    fn patchify_round_trips(seed in 0u64..1000, p in 1usize..4, nz in 1usize..3, ny in 1usize..3, nx in 1usize..3) {
        let grid = PatchGrid::new([nz * p, ny * p, nx * p], p).unwrap();
        let mut rng = stream(seed, 1);
        let vol: Vec<f32> = (0..grid.voxels()).map(|_| rng.random()).collect();
        let patches = patchify(&vol, &grid).unwrap();
        prop_assert_eq!(patches.len(), grid.tokens() * grid.patch_len());
        prop_assert_eq!(unpatchify(&patches, &grid).unwrap(), vol);
    }

    #[test]
    fn kfold_partitions(n in 2usize..200, k in 2usize..12, seed in 0u64..1000) {
        prop_assume!(k <= n);
        let folds = kfold_split(n, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn bezier_curves_are_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, c in 0.0f64..=1.0, d in 0.0f64..=1.0, dec: bool) {
        let curve = BezierCurve::new([a, b], [c, d], dec).unwrap();
        let ys: Vec<f64> = (0..=200).map(|i| curve.map(i as f64 / 200.0)).collect();
        for w in ys.windows(2) {
            if dec {
                prop_assert!(w[1] <= w[0] + 1e-12);
            } else {
                prop_assert!(w[1] >= w[0] - 1e-12);
            }
        }
        let (lo, hi) = if dec { (1.0, 0.0) } else { (0.0, 1.0) };
        prop_assert!((ys[0] - lo).abs() < 1e-9 && (ys[200] - hi).abs() < 1e-9);
    }
}

#[test]
fn masks_partition_tokens_for_a_thousand_seeds() {
    let n = 150;
    let expected = mask_count(n, 0.76);
    assert_eq!(expected, 114);
    let mut hits = vec![0usize; n];
    for seed in 0..1000 {
        let plan = sample_mask(n, 0.76, &mut stream(seed, 2)).unwrap();
        assert_eq!(plan.masked.len(), expected);
        assert_eq!(plan.visible.len(), n - expected);
        let mut all: Vec<usize> = plan.masked.iter().chain(&plan.visible).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        plan.masked.iter().for_each(|&m| hits[m] += 1);
    }
    // Each token is masked with probability 0.76; 1000 draws give a standard
    // deviation of about 0.0135, so 0.06 is over four sigma.
    for (i, &h) in hits.iter().enumerate() {
        let f = h as f64 / 1000.0;
        assert!((f - 0.76).abs() < 0.06, "token {i} masked {f}");
    }
}

#[test]
fn default_grid_has_150_tokens() {
    let grid = PatchGrid::new([30, 36, 30], 6).unwrap();
    assert_eq!(grid.tokens(), 150);
    assert_eq!(grid.patch_len(), 216);
}
