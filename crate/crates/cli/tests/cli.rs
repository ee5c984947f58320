//! End-to-end behaviour of the `voxformer` binary on a tiny config.

mod common;

use std::path::Path;

use common::{snapshot, tiny_config, voxformer, write_config};
use voxformer_cli::{commands, Context};
use voxformer_core::ExperimentConfig;

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = voxformer(&["generate", "--config", path_str(&cfg), "--out", path_str(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert!(!sa.is_empty());
    assert_eq!(sa, sb);

    let c = tmp.path().join("c");
    let o = voxformer(&["generate", "--config", path_str(&cfg), "--out", path_str(&c), "--seed", "3"]);
    assert!(o.status.success());
    assert_ne!(snapshot(&c), sa);
}

#[test]
fn unknown_config_key_exits_1_with_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg["pretrain"]["mask_ratoi"] = 0.5.into();
    let path = write_config(tmp.path(), &cfg);
    let o = voxformer(&["generate", "--config", path_str(&path)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("pretrain.mask_ratoi"), "{}", stderr(&o));

    let o = voxformer(&["generate", "--set", "encoder.heads=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("encoder"), "{}", stderr(&o));
}

#[test]
fn zero_loss_weights_are_refused() {
    let o = voxformer(&[
        "pretrain",
        "--set",
        "pretrain.weights.sd=0",
        "--set",
        "pretrain.weights.pixel=0",
        "--set",
        "pretrain.weights.age=0",
        "--set",
        "pretrain.weights.adv=0",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nothing to optimize"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("run");
    let o = voxformer(&["pretrain", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("generate"), "{}", stderr(&o));

    let o = voxformer(&["generate", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(o.status.success());
    let o = voxformer(&["finetune", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(voxformer(&["--help"]).status.code(), Some(0));
    assert_eq!(voxformer(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(voxformer(&[]).status.code(), Some(1));
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn every_stage_runs_and_writes_parseable_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg: ExperimentConfig = serde_json::from_value(tiny_config()).unwrap();
    cfg.output = tmp.path().to_string_lossy().into_owned();
    cfg.validate().unwrap();
    let ctx = Context::new(cfg);
    commands::generate(&ctx).unwrap();
    let pre = commands::pretrain(&ctx).unwrap();
    assert_eq!(pre.mode, 4);
    let ft = commands::finetune(&ctx).unwrap();
    assert_eq!(ft.epochs.len(), 2);
    let probes = commands::probe(&ctx).unwrap();
    assert_eq!(probes.len(), 2);
    let assoc = commands::associate(&ctx).unwrap();
    assert_eq!(assoc.plain.len(), 2 * 2);
    let hist = commands::select_stats(&ctx).unwrap();
    assert_eq!(hist.len(), 2);
    commands::report(&ctx).unwrap();

    let out = tmp.path();
    let (h, rows) = read_csv(&out.join("pretrain/mode4/epochs.csv"));
    assert!(h.iter().any(|c| c == "L_pixel"), "{h:?}");
    assert_eq!(rows.len(), 2);
    let (h, rows) = read_csv(&out.join("finetune/mode4/metrics.csv"));
    assert_eq!(h, ["variant", "mode", "acc", "sen", "spe", "auc", "tp", "tn", "fp", "fn"]);
    assert_eq!(rows.len(), 1);
    let counts: usize = rows[0][6..].iter().map(|v| v.parse::<usize>().unwrap()).sum();
    assert_eq!(counts, 10);
    let (h, rows) = read_csv(&out.join("associate/mode4/association.csv"));
    assert_eq!(h, ["layer", "metric", "mean_r", "std_r", "p", "fdr_significant"]);
    for r in &rows {
        let p: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!(r[5] == "true" || r[5] == "false");
    }
    let (_, rows) = read_csv(&out.join("select_stats/mode4/frequency.csv"));
    assert_eq!(rows.len(), 2 * 27);
    assert!(out.join("report/summary.csv").exists());
    assert!(out.join("report/loss_curves.svg").exists());
}
