//! Acceptance suite: every criterion runs in order, prints one PASS/FAIL
//! line, and the test fails if any criterion does.
//!
//! Set `VOXFORMER_ACCEPTANCE_DIR` to keep the run's artifacts; otherwise
//! they go to a temporary directory.

mod common;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use voxformer_cli::{commands, Context};
use voxformer_core::analysis::{
    age_decorrelate_features, auc_score, behavior_columns, classification_metrics, fdr_bh, layer_features, plsr_regress,
    run_association, AssociationRow, MetricsReport,
};
use voxformer_core::gradcheck::pretrain_loss_suite;
use voxformer_core::mats::{mutual_attention_scores, top_k};
use voxformer_core::pretrain::{total_pretrain_loss, AblationMode, LossComponents, LossWeights};
use voxformer_core::rng::stream;
use voxformer_core::volume::sample_mask;
use voxformer_core::ExperimentConfig;

/// Prints past the test harness's output capture.
fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn run(id: u8, name: &str, f: impl FnOnce() -> Result<Verdict>) -> bool {
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, format!("error: {e:#}")),
    };
    say(&format!(
        "criterion {id} {} {name} ({:.1}s): {detail}",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    ));
    pass
}

fn context(root: &Path, sets: &[&str]) -> Result<Context> {
    let mut overrides: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    overrides.push(format!("output={}", serde_json::to_string(&root.to_string_lossy())?));
    Ok(Context::new(ExperimentConfig::load(None, &overrides)?))
}

fn gradient_fidelity() -> Result<Verdict> {
    let start = Instant::now();
    let reports = pretrain_loss_suite(1)?;
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let parts: Vec<String> = reports.iter().map(|(n, r)| format!("{n}={:.1e}", r.max_rel_err)).collect();
    verdict(
        worst < 1e-5 && elapsed < Duration::from_secs(120),
        format!("max rel err {worst:.2e} < 1e-5 [{}]", parts.join(" ")),
    )
}

fn structural_constants() -> Result<Verdict> {
    let cfg = ExperimentConfig::default();
    let tokens = cfg.grid()?.tokens();
    let plan = sample_mask(tokens, cfg.pretrain.mask_ratio, &mut stream(0, 0))?;
    let w = LossWeights::default();
    let defaults_ok = [(w.sd, 0.005), (w.pixel, 0.79), (w.age, 0.1), (w.adv, 0.1)]
        .iter()
        .all(|(a, b)| (a - b).abs() < 1e-9);
    let mode = AblationMode::from_index(4)?;
    let mut rng = stream(2, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = LossComponents {
            sd: rng.random_range(0.0..3.0),
            pixel: rng.random_range(0.0..3.0),
            age: rng.random_range(0.0..3.0),
            adv_d: rng.random_range(0.0..3.0),
            adv_g: rng.random_range(0.0..3.0),
        };
        let base = total_pretrain_loss(&c, &w, mode)?;
        let terms = [(w.sd, c.sd), (w.pixel, c.pixel), (w.age, c.age), (w.adv, c.adv_g)];
        for (k, (lambda, value)) in terms.into_iter().enumerate() {
            let mut doubled = w;
            match k {
                0 => doubled.sd *= 2.0,
                1 => doubled.pixel *= 2.0,
                2 => doubled.age *= 2.0,
                _ => doubled.adv *= 2.0,
            }
            let diff = total_pretrain_loss(&c, &doubled, mode)? - base;
            worst = worst.max((diff - lambda * value).abs());
        }
    }
    let unit = LossComponents {
        sd: 1.0,
        pixel: 1.0,
        age: 1.0,
        adv_d: 1.0,
        adv_g: 1.0,
    };
    let sum = total_pretrain_loss(&unit, &w, mode)?;
    verdict(
        tokens == 150
            && plan.masked.len() == 114
            && plan.visible.len() == 36
            && defaults_ok
            && worst < 1e-9
            && (sum - 0.995).abs() < 1e-9,
        format!(
            "tokens {tokens}, masked {} / visible {}, default weights {}, linearity err {worst:.1e}, unit total {sum}",
            plan.masked.len(),
            plan.visible.len(),
            if defaults_ok { "ok" } else { "wrong" }
        ),
    )
}

fn pretraining_learns(ctx: &Context) -> Result<Verdict> {
    let start = Instant::now();
    commands::generate(ctx)?;
    let s = commands::pretrain(ctx)?;
    let elapsed = start.elapsed();
    let ratio = s.last_epoch_pixel / s.first_epoch_pixel;
    let r = s.age_r.unwrap_or(f64::NAN);
    verdict(
        ratio < 0.5 && r > 0.8 && elapsed < Duration::from_secs(30 * 60),
        format!(
            "L_pixel {:.5} -> {:.5} (ratio {ratio:.3} < 0.5), held-out age r {r:.4} > 0.8, {:.1} min",
            s.first_epoch_pixel,
            s.last_epoch_pixel,
            elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn token_selection() -> Result<Verdict> {
    let mut rng = stream(4, 0);
    let mut worst_shift: f64 = 0.0;
    let mut guider_picked = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..20usize);
        let m = n + 1;
        let a: Vec<f64> = (0..m * m).map(|_| rng.random_range(-6.0..6.0)).collect();
        let c = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = a.iter().map(|v| v + c).collect();
        let s = mutual_attention_scores(&a, m)?;
        let t = mutual_attention_scores(&shifted, m)?;
        for (u, v) in s.iter().zip(&t) {
            worst_shift = worst_shift.max((u - v).abs());
        }
        // Scores cover patch tokens only; selection index i means row i + 1.
        let k = rng.random_range(1..=n);
        if s.len() != n || top_k(&s, k, true)?.iter().any(|&i| i >= n) {
            guider_picked += 1;
        }
    }
    // Guider row [0, 1, 0], column [0, 2, 0]: softmax over (0, 1, 0) and
    // (0, 2, 0) read at tokens 1 and 2.
    let e = std::f64::consts::E;
    let expected = [
        (e / (2.0 + e)) * (e * e / (2.0 + e * e)),
        (1.0 / (2.0 + e)) * (1.0 / (2.0 + e * e)),
    ];
    let got = mutual_attention_scores(&[0.0, 1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0], 3)?;
    let hand_err = got.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        worst_shift < 1e-9 && guider_picked == 0 && hand_err < 1e-12,
        format!("shift err {worst_shift:.1e}, guider selections {guider_picked}, 3x3 err {hand_err:.1e}"),
    )
}

fn metrics_row(label: &str, m: &MetricsReport) -> String {
    format!("{label} [{}]", m.csv_row())
}

fn finetune_and_probe(root: &Path) -> Result<Verdict> {
    let split = ["data.train=64", "data.test=32"];
    let ft4 = commands::finetune(&context(root, &split)?)?;
    let ft0 = commands::finetune(&context(root, &[split[0], split[1], "pretrain.mode=0"])?)?;
    let probe4 = commands::probe(&context(root, &split)?)?;
    let probe0 = commands::probe(&context(root, &[split[0], split[1], "pretrain.mode=0"])?)?;
    say(&format!("  {}", MetricsReport::CSV_HEADER));
    say(&format!("  {}", metrics_row("finetune mode4", &ft4.metrics)));
    say(&format!("  {}", metrics_row("finetune mode0", &ft0.metrics)));
    for (l, (a, b)) in probe4.iter().zip(&probe0).enumerate() {
        say(&format!("  {}", metrics_row(&format!("probe layer{l} mode4"), a)));
        say(&format!("  {}", metrics_row(&format!("probe layer{l} mode0"), b)));
    }
    let acc = ft4.metrics.acc.unwrap_or(0.0);
    let last4 = probe4.last().and_then(|m| m.acc).unwrap_or(0.0);
    let last0 = probe0.last().and_then(|m| m.acc).unwrap_or(0.0);
    verdict(
        acc >= 0.90 && last4 >= last0,
        format!("fine-tune ACC {acc:.4} >= 0.90; last-layer probe ACC mode4 {last4:.4} >= mode0 {last0:.4}"),
    )
}

fn last_layer<'a>(rows: &'a [AssociationRow], metric: &str) -> Result<&'a AssociationRow> {
    rows.iter()
        .filter(|r| r.metric == metric)
        .max_by_key(|r| r.layer)
        .ok_or_else(|| anyhow::anyhow!("no row for {metric}"))
}

fn association(root: &Path) -> Result<Verdict> {
    let ctx = context(root, &[])?;
    let out = commands::associate(&ctx)?;
    let mut ok = true;
    let mut notes = Vec::new();
    for metric in ["age_driven", "contrast_driven"] {
        let r = last_layer(&out.plain, metric)?;
        ok &= r.mean_r > 0.5 && r.fdr_significant;
        notes.push(format!("{metric} r {:.3} p {:.1e} sig {}", r.mean_r, r.p, r.fdr_significant));
    }

    // Pure-noise scores on the same features, one experiment per seed.
    let (index, phantoms) = commands::load_data(&ctx)?;
    let (enc, store) = commands::load_encoder(&ctx)?;
    let features = layer_features(&enc, &store, &ctx.cfg.grid()?, &phantoms)?;
    let mut clean = 0;
    for seed in 0..20u64 {
        let mut rng = stream(1000 + seed, 0);
        let noise: Vec<f64> = (0..phantoms.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let rows = run_association(&features, &[("noise".into(), noise)], None, &ctx.cfg.association, seed)?;
        if rows.iter().all(|r| !r.fdr_significant) {
            clean += 1;
        }
    }
    ok &= clean >= 18;
    notes.push(format!("noise clean in {clean}/20 seeds"));

    // Encoder features under age control, reported for reference: the age
    // head spreads age over nearly every deep feature, so the screen leaves
    // the last layer almost empty.
    let ages: Vec<f64> = phantoms.iter().map(|p| p.age).collect();
    let last = features.last().expect("at least one layer");
    let d = last[0].len();
    let columns: Vec<Vec<f64>> = (0..d).map(|j| last.iter().map(|r| r[j]).collect()).collect();
    let removed = d - age_decorrelate_features(&columns, &ages, ctx.cfg.association.age_alpha)?.len();
    let (plain, ctrl) = (last_layer(&out.plain, "age_driven")?, last_layer(&out.age_control, "age_driven")?);
    let (c_plain, c_ctrl) = (
        last_layer(&out.plain, "contrast_driven")?,
        last_layer(&out.age_control, "contrast_driven")?,
    );
    say(&format!(
        "  encoder last layer under age control: {removed}/{d} features removed, age_driven r {:.3} -> {:.3}, contrast_driven r {:.3} -> {:.3} sig {}",
        plain.mean_r, ctrl.mean_r, c_plain.mean_r, c_ctrl.mean_r, c_ctrl.fdr_significant
    ));

    // Age control on a planted table over the same phantoms: 8 age proxies,
    // then 8 contrast carriers and 16 noise columns made exactly orthogonal
    // to age in-sample, so only the proxies carry age.
    let mut rng = stream(6, 0);
    let mut gauss = move || -> f64 { StandardNormal.sample(&mut rng) };
    let mu = ages.iter().sum::<f64>() / ages.len() as f64;
    let centred: Vec<f64> = ages.iter().map(|a| a - mu).collect();
    let saa: f64 = centred.iter().map(|a| a * a).sum();
    let sd = (saa / ages.len() as f64).sqrt();
    let mut planted: Vec<Vec<f64>> = phantoms
        .iter()
        .zip(&centred)
        .map(|(p, a)| {
            let mut row: Vec<f64> = (0..8).map(|_| a / sd + 0.5 * gauss()).collect();
            row.extend((0..8).map(|_| p.latents.contrast + 0.5 * gauss()));
            row.extend((0..16).map(|_| gauss()));
            row
        })
        .collect();
    for j in 8..32 {
        let beta = planted.iter().zip(&centred).map(|(r, a)| r[j] * a).sum::<f64>() / saa;
        for (r, a) in planted.iter_mut().zip(&centred) {
            r[j] -= beta * a;
        }
    }
    let columns: Vec<Vec<f64>> = (0..32).map(|j| planted.iter().map(|r| r[j]).collect()).collect();
    let kept = age_decorrelate_features(&columns, &ages, ctx.cfg.association.age_alpha)?;
    let proxies_removed = (0..8).all(|j| !kept.contains(&j));
    let others_kept = kept.iter().filter(|&&j| j >= 8).count();
    let metrics = behavior_columns(&phantoms, &index.behavior_names, &[])?;
    let layers = vec![planted];
    let p_plain = run_association(&layers, &metrics, None, &ctx.cfg.association, 0)?;
    let p_ctrl = run_association(&layers, &metrics, Some(&ages), &ctx.cfg.association, 0)?;
    let row = |rows: &[AssociationRow], m: &str| rows.iter().find(|r| r.metric == m).cloned();
    let (ap, ac) = (row(&p_plain, "age_driven").unwrap(), row(&p_ctrl, "age_driven").unwrap());
    let (cp, cc) = (row(&p_plain, "contrast_driven").unwrap(), row(&p_ctrl, "contrast_driven").unwrap());
    ok &= proxies_removed
        && others_kept == 24
        && ap.fdr_significant
        && !ac.fdr_significant
        && cp.fdr_significant
        && cc.fdr_significant;
    notes.push(format!(
        "planted age control: proxies removed {proxies_removed}, {others_kept}/24 others kept, age_driven r {:.3} sig {} -> r {:.3} sig {}, contrast_driven r {:.3} sig {} -> r {:.3} sig {}",
        ap.mean_r, ap.fdr_significant, ac.mean_r, ac.fdr_significant, cp.mean_r, cp.fdr_significant, cc.mean_r, cc.fdr_significant
    ));
    verdict(ok, notes.join("; "))
}

fn ols_predict(train: &[Vec<f64>], y: &[f64], test: &[Vec<f64>]) -> Vec<f64> {
    let (n, p) = (train.len(), train[0].len());
    let x = DMatrix::from_fn(n, p + 1, |i, j| if j == p { 1.0 } else { train[i][j] });
    let beta = x.svd(true, true).solve(&DVector::from_column_slice(y), 1e-14).expect("solvable");
    test.iter()
        .map(|r| r.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>() + beta[p])
        .collect()
}

fn statistical_oracles() -> Result<Verdict> {
    let mut rng = stream(7, 0);
    let mut normal = |n: usize, p: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..p).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    };
    let mut plsr_err: f64 = 0.0;
    for p in 1..=6 {
        let train = normal(40, p);
        let test = normal(10, p);
        let y: Vec<f64> = train
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().sum::<f64>() * 0.7 + (i as f64 * 0.37).sin())
            .collect();
        let refs = |rows: &[Vec<f64>]| rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        let (tr, te) = (refs(&train), refs(&test));
        let a: Vec<&[f64]> = tr.iter().map(Vec::as_slice).collect();
        let b: Vec<&[f64]> = te.iter().map(Vec::as_slice).collect();
        let pls = plsr_regress(&a, &y, &b, p)?;
        for (u, v) in pls.iter().zip(ols_predict(&train, &y, &test)) {
            plsr_err = plsr_err.max((u - v).abs());
        }
    }

    let bh_examples = fdr_bh(&[0.01, 0.02, 0.03, 0.04], 0.05) == vec![true; 4]
        && fdr_bh(&[1.0; 6], 0.05) == vec![false; 6];
    let mut rng = stream(7, 1);
    let mut bh_monotone = true;
    let mut auc_err: f64 = 0.0;
    for _ in 0..200 {
        let p: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0f64).powi(4)).collect();
        let rej = fdr_bh(&p, 0.05);
        let mut lower = p.clone();
        let i = rng.random_range(0..p.len());
        lower[i] /= 3.0;
        let rej2 = fdr_bh(&lower, 0.05);
        bh_monotone &= rej.iter().zip(&rej2).all(|(a, b)| !a || *b);
        bh_monotone &= (0..20).all(|i| (0..20).all(|j| !(rej[i] && !rej[j]) || p[i] <= p[j]));

        let mut labels: Vec<u8> = (0..30).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-3.0 * s).exp()) + 5.0).collect();
        let a = auc_score(&scores, &labels)?.unwrap_or(f64::NAN);
        let b = auc_score(&mapped, &labels)?.unwrap_or(f64::NAN);
        auc_err = auc_err.max((a - b).abs());
    }

    // 77 positives (47 found), 94 negatives (80 rejected).
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (label, pred, count) in [(1u8, 1u8, 47), (1, 0, 30), (0, 0, 80), (0, 1, 14)] {
        preds.extend(std::iter::repeat_n(pred, count));
        labels.extend(std::iter::repeat_n(label, count));
    }
    let m = classification_metrics(&preds, &labels)?;
    let pct = |v: Option<f64>| (v.unwrap_or(f64::NAN) * 10_000.0).round() / 100.0;
    let table = (pct(m.acc), pct(m.sen), pct(m.spe));
    verdict(
        plsr_err < 1e-6 && bh_examples && bh_monotone && auc_err < 1e-12 && table == (74.27, 61.04, 85.11),
        format!(
            "PLSR vs OLS {plsr_err:.1e}, BH examples {bh_examples}, BH monotone {bh_monotone}, AUC transform err {auc_err:.1e}, back-solve {:.2}/{:.2}/{:.2}",
            table.0, table.1, table.2
        ),
    )
}

fn determinism(root: &Path) -> Result<Verdict> {
    std::fs::create_dir_all(root)?;
    let cfg = common::write_config(root, &common::tiny_config());
    let out = root.join("run");
    let (cfg, out_s) = (cfg.to_string_lossy().into_owned(), out.to_string_lossy().into_owned());
    let mut snaps = Vec::new();
    for _ in 0..2 {
        if out.exists() {
            std::fs::remove_dir_all(&out)?;
        }
        for cmd in ["generate", "pretrain", "finetune"] {
            let o = common::voxformer(&[cmd, "--config", &cfg, "--out", &out_s]);
            ensure!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
        }
        snaps.push((common::snapshot(&out.join("pretrain")), common::snapshot(&out.join("finetune"))));
    }
    let files = snaps[0].0.len() + snaps[0].1.len();
    let same = snaps[0] == snaps[1];
    verdict(same && files > 0, format!("{files} files compared, identical: {same}"))
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let root: PathBuf = std::env::var_os("VOXFORMER_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&root).unwrap();
    let full = root.join("full");

    // `VOXFORMER_ACCEPTANCE_ONLY=5,6` reruns a subset; 5 and 6 then reuse the
    // training run already in `VOXFORMER_ACCEPTANCE_DIR`.
    let only: Option<Vec<u8>> = std::env::var("VOXFORMER_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u8| only.as_ref().is_none_or(|o| o.contains(&id));

    type Check<'a> = Box<dyn FnOnce() -> Result<Verdict> + 'a>;
    let checks: Vec<(u8, &str, Check)> = vec![
        (1, "gradient fidelity", Box::new(gradient_fidelity)),
        (2, "structural constants", Box::new(structural_constants)),
        (4, "token selection", Box::new(token_selection)),
        (7, "statistical oracles", Box::new(statistical_oracles)),
        (8, "determinism", Box::new(|| determinism(&root.join("determinism")))),
        (3, "pretraining learns", Box::new(|| pretraining_learns(&context(&full, &[])?))),
        (5, "fine-tuning and probes", Box::new(|| finetune_and_probe(&full))),
        (6, "association", Box::new(|| association(&full))),
    ];
    let results: Vec<bool> = checks
        .into_iter()
        .filter(|(id, _, _)| wanted(*id))
        .map(|(id, name, f)| run(id, name, f))
        .collect();
    let passed = results.iter().filter(|&&p| p).count();
    say(&format!("acceptance: {passed}/{} criteria passed", results.len()));
    assert_eq!(passed, results.len(), "some acceptance criteria failed; see the lines above");
}
