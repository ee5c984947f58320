//! One function per subcommand. Each reads its inputs from, and writes its
//! outputs under, the context's output directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use serde_json::json;
use voxformer_core::analysis::{
    behavior_columns, evaluate_scores, layer_features, layer_token_features, linear_probe, pearson_r, run_association, AssociationRow,
    MetricsReport, Pca,
};
use voxformer_core::checkpoint::{manifest_path, Checkpoint};
use voxformer_core::encoder::Encoder;
use voxformer_core::mats::{selection_histogram, selection_lines, EpochRecord, FineTuner, SelectionLine, SelectionResult, LayerSelection};
use voxformer_core::pretrain::{age_normalization, LossRecord, Pretrainer};
use voxformer_core::rng::stream;
use voxformer_core::synth::{build_dataset, load_dataset, save_dataset, DatasetIndex, Phantom};
use voxformer_core::ParamStore;

use crate::svg;
use crate::{Context, UserError};

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn data_dir(ctx: &Context) -> PathBuf {
    ctx.path("data")
}

pub fn pretrain_dir(ctx: &Context, mode: u8) -> PathBuf {
    ctx.path(format!("pretrain/mode{mode}"))
}

/// Directory name of the configured fine-tuning variant.
pub fn finetune_variant(ctx: &Context) -> String {
    let f = &ctx.cfg.finetune;
    let mut name = format!("mode{}", ctx.cfg.pretrain.mode);
    if !f.select_tokens {
        name.push_str("_noiat");
    }
    if f.freeze_encoder {
        name.push_str("_frozen");
    }
    name
}

/// The dataset written by `generate`, checked against the config.
pub fn load_data(ctx: &Context) -> Result<(DatasetIndex, Vec<Phantom>)> {
    let dir = data_dir(ctx);
    if !dir.join("index.json").exists() {
        return Err(UserError(format!(
            "no dataset in {}; run `voxformer generate` first",
            dir.display()
        ))
        .into());
    }
    let (index, phantoms) = load_dataset(&dir)?;
    let spec = &ctx.cfg.data.phantom;
    if index.shape != spec.shape || index.patch != spec.patch {
        return Err(UserError(format!(
            "dataset in {} has shape {:?}/patch {} but the config expects {:?}/patch {}",
            dir.display(),
            index.shape,
            index.patch,
            spec.shape,
            spec.patch
        ))
        .into());
    }
    let need = ctx.cfg.data.train + ctx.cfg.data.test;
    if phantoms.len() < need {
        return Err(UserError(format!(
            "dataset has {} phantoms but train + test needs {need}",
            phantoms.len()
        ))
        .into());
    }
    Ok((index, phantoms))
}

fn split(ctx: &Context, phantoms: &[Phantom]) -> (Vec<Phantom>, Vec<Phantom>) {
    let d = &ctx.cfg.data;
    (phantoms[..d.train].to_vec(), phantoms[d.train..d.train + d.test].to_vec())
}

pub fn generate(ctx: &Context) -> Result<Vec<Phantom>> {
    let d = &ctx.cfg.data;
    let phantoms = build_dataset(&d.phantom, d.count, ctx.cfg.seeds.data)?;
    let dir = data_dir(ctx);
    save_dataset(&dir, &d.phantom, &phantoms)?;
    log::info!("wrote {} phantoms to {}", phantoms.len(), dir.display());
    Ok(phantoms)
}

/// Per-epoch means of the step records.
pub fn epoch_means(records: &[LossRecord]) -> Vec<LossRecord> {
    let mut out: Vec<(LossRecord, usize)> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some((acc, n)) if acc.epoch == r.epoch => {
                acc.sd += r.sd;
                acc.pixel += r.pixel;
                acc.age += r.age;
                acc.adv_d += r.adv_d;
                acc.adv_g += r.adv_g;
                acc.total += r.total;
                acc.step = r.step;
                acc.lr = r.lr;
                *n += 1;
            }
            _ => out.push((*r, 1)),
        }
    }
    out.into_iter()
        .map(|(mut r, n)| {
            let k = n as f64;
            r.sd /= k;
            r.pixel /= k;
            r.age /= k;
            r.adv_d /= k;
            r.adv_g /= k;
            r.total /= k;
            r
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub mode: u8,
    pub steps: usize,
    pub first_epoch_pixel: f64,
    pub last_epoch_pixel: f64,
    /// Correlation of predicted and true age on the test split, when the age
    /// task is active.
    pub age_r: Option<f64>,
    pub age_p: Option<f64>,
    pub dir: PathBuf,
}

pub fn pretrain(ctx: &Context) -> Result<PretrainSummary> {
    let cfg = &ctx.cfg;
    let (_, phantoms) = load_data(ctx)?;
    let (train, test) = split(ctx, &phantoms);
    let grid = cfg.grid()?;
    let mode = cfg.pretrain.ablation()?;
    let mut trainer = Pretrainer::new(
        grid,
        cfg.encoder,
        cfg.pretrain.clone(),
        cfg.seeds.init,
        cfg.seeds.mask,
        age_normalization(&train),
    )?;
    let per_epoch = trainer.steps_per_epoch(train.len());
    let records = trainer.fit(&train, |r| {
        if (r.step + 1) % per_epoch == 0 {
            log::info!(
                "epoch {} step {} L_pixel {:.5} L_age {:.4} L_sd {:.4} D {:.4} G {:.4}",
                r.epoch,
                r.step,
                r.pixel,
                r.age,
                r.sd,
                r.adv_d,
                r.adv_g
            );
        }
    })?;
    let epochs = epoch_means(&records);

    let dir = pretrain_dir(ctx, cfg.pretrain.mode);
    write_csv(&dir.join("losses.csv"), LossRecord::CSV_HEADER, records.iter().map(|r| r.csv_row()))?;
    write_csv(
        &dir.join("epochs.csv"),
        "epoch,L_sd,L_pixel,L_age,L_adv_D,L_adv_G,total,lr",
        epochs.iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.sd, r.pixel, r.age, r.adv_d, r.adv_g, r.total, r.lr
            )
        }),
    )?;

    let (mut age_r, mut age_p) = (None, None);
    if mode.age {
        let preds = test
            .iter()
            .enumerate()
            .map(|(i, p)| trainer.predict_age_years(p, cfg.seeds.mask.wrapping_add(i as u64)))
            .collect::<voxformer_core::Result<Vec<f64>>>()?;
        let truth: Vec<f64> = test.iter().map(|p| p.age).collect();
        if let Ok((r, p)) = pearson_r(&preds, &truth) {
            age_r = Some(r);
            age_p = Some(p);
        }
        write_csv(
            &dir.join("age_eval.csv"),
            "sample,age,predicted",
            truth
                .iter()
                .zip(&preds)
                .enumerate()
                .map(|(i, (t, p))| format!("{},{t},{p}", cfg.data.train + i)),
        )?;
    }

    let summary = PretrainSummary {
        mode: cfg.pretrain.mode,
        steps: trainer.step,
        first_epoch_pixel: epochs.first().map_or(f64::NAN, |e| e.pixel),
        last_epoch_pixel: epochs.last().map_or(f64::NAN, |e| e.pixel),
        age_r,
        age_p,
        dir: dir.clone(),
    };
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".into(), |v| v.to_string());
    write_csv(
        &dir.join("summary.csv"),
        "key,value",
        [
            format!("mode,{}", summary.mode),
            format!("steps,{}", summary.steps),
            format!("first_epoch_L_pixel,{}", summary.first_epoch_pixel),
            format!("last_epoch_L_pixel,{}", summary.last_epoch_pixel),
            format!("age_r,{}", opt(age_r)),
            format!("age_p,{}", opt(age_p)),
        ],
    )?;
    let meta = json!({
        "kind": "pretrain",
        "mode": cfg.pretrain.mode,
        "age_mean": trainer.age_norm.0,
        "age_std": trainer.age_norm.1,
    });
    Checkpoint::from_stores(
        &[&trainer.gen_store, &trainer.disc_store],
        &cfg.model_hash(),
        trainer.step as u64,
        meta,
    )?
    .save(&dir)?;
    log::info!("pretraining artifacts in {}", dir.display());
    Ok(summary)
}

/// The pretrained checkpoint for the configured mode, or `None` for mode 0,
/// which has no pretraining.
fn pretrained_checkpoint(ctx: &Context) -> Result<Option<Checkpoint>> {
    let mode = ctx.cfg.pretrain.mode;
    if mode == 0 {
        return Ok(None);
    }
    let dir = pretrain_dir(ctx, mode);
    if !manifest_path(&dir).exists() {
        return Err(UserError(format!(
            "missing checkpoint {}; run `voxformer pretrain` with pretrain.mode={mode} first",
            dir.display()
        ))
        .into());
    }
    let ck = Checkpoint::load(&dir)?;
    ck.check_config_hash(&ctx.cfg.model_hash());
    Ok(Some(ck))
}

/// The encoder for the configured mode: pretrained weights, or the shared
/// random initialization for mode 0.
pub fn load_encoder(ctx: &Context) -> Result<(Encoder, ParamStore<f32>)> {
    let cfg = &ctx.cfg;
    let grid = cfg.grid()?;
    let mut store = ParamStore::new();
    let enc = Encoder::new(
        &mut store,
        &mut stream(cfg.seeds.init, 10),
        "encoder",
        cfg.encoder,
        grid.tokens(),
        grid.patch_len(),
    )?;
    if let Some(ck) = pretrained_checkpoint(ctx)? {
        ck.restore(&mut store, true)?;
    }
    Ok((enc, store))
}

#[derive(Clone, Debug)]
pub struct FinetuneSummary {
    pub variant: String,
    pub metrics: MetricsReport,
    pub epochs: Vec<EpochRecord>,
    pub dir: PathBuf,
}

pub fn finetune(ctx: &Context) -> Result<FinetuneSummary> {
    let cfg = &ctx.cfg;
    let (_, phantoms) = load_data(ctx)?;
    let (train, test) = split(ctx, &phantoms);
    let pretrained = pretrained_checkpoint(ctx)?.map(|c| c.to_store()).transpose()?;
    let mut tuner = FineTuner::new(
        cfg.grid()?,
        cfg.encoder,
        cfg.finetune.clone(),
        cfg.seeds.init,
        cfg.seeds.mask,
        pretrained.as_ref(),
    )?;
    let epochs = tuner.fit(&train, |r| {
        log::info!("epoch {} loss {:.4} train acc {:.3}", r.epoch, r.loss, r.train_acc);
    })?;
    let preds = tuner.predict(&test)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.probs[1]).collect();
    let labels: Vec<u8> = test.iter().map(|p| p.label).collect();
    let metrics = evaluate_scores(&scores, &labels)?;

    let variant = finetune_variant(ctx);
    let dir = ctx.path(format!("finetune/{variant}"));
    write_csv(&dir.join("epochs.csv"), EpochRecord::CSV_HEADER, epochs.iter().map(|r| r.csv_row()))?;
    write_csv(
        &dir.join("metrics.csv"),
        &format!("variant,mode,{}", MetricsReport::CSV_HEADER),
        [format!("{variant},{},{}", cfg.pretrain.mode, metrics.csv_row())],
    )?;
    write_csv(
        &dir.join("predictions.csv"),
        "sample,label,prob1,predicted",
        preds
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (p, l))| format!("{},{l},{},{}", cfg.data.train + i, p.probs[1], p.predicted)),
    )?;
    let selections: Vec<SelectionResult> = preds.iter().filter_map(|p| p.selection.clone()).collect();
    let mut jsonl = String::new();
    for mut line in selection_lines(&selections) {
        line.sample += cfg.data.train;
        jsonl.push_str(&serde_json::to_string(&line)?);
        jsonl.push('\n');
    }
    write_text(&dir.join("selections.jsonl"), &jsonl)?;
    let meta = json!({"kind": "finetune", "mode": cfg.pretrain.mode, "variant": variant});
    Checkpoint::from_stores(&[&tuner.store], &cfg.hash(), tuner.step as u64, meta)?.save(&dir)?;
    log::info!(
        "{variant}: test ACC {:?} SEN {:?} SPE {:?} AUC {:?}",
        metrics.acc,
        metrics.sen,
        metrics.spe,
        metrics.auc
    );
    Ok(FinetuneSummary {
        variant,
        metrics,
        epochs,
        dir,
    })
}

/// Per-layer probe metrics on the test split.
pub fn probe(ctx: &Context) -> Result<Vec<MetricsReport>> {
    let cfg = &ctx.cfg;
    let (_, phantoms) = load_data(ctx)?;
    let (train, test) = split(ctx, &phantoms);
    let (enc, store) = load_encoder(ctx)?;
    let grid = cfg.grid()?;
    let ftr = layer_token_features(&enc, &store, &grid, &train)?;
    let fte = layer_token_features(&enc, &store, &grid, &test)?;
    let ytr: Vec<u8> = train.iter().map(|p| p.label).collect();
    let yte: Vec<u8> = test.iter().map(|p| p.label).collect();
    let mut reports = Vec::with_capacity(ftr.len());
    for (a, b) in ftr.iter().zip(&fte) {
        let a: Vec<&[f64]> = a.iter().map(|r| &r[..]).collect();
        let b: Vec<&[f64]> = b.iter().map(|r| &r[..]).collect();
        reports.push(linear_probe(&a, &ytr, &b, &yte, &cfg.probe)?);
    }
    let dir = ctx.path(format!("probe/mode{}", cfg.pretrain.mode));
    write_csv(
        &dir.join("probe.csv"),
        &format!("layer,{}", MetricsReport::CSV_HEADER),
        reports.iter().enumerate().map(|(l, r)| format!("{l},{}", r.csv_row())),
    )?;
    Ok(reports)
}

#[derive(Clone, Debug)]
pub struct AssociationOutput {
    pub plain: Vec<AssociationRow>,
    pub age_control: Vec<AssociationRow>,
}

pub fn associate(ctx: &Context) -> Result<AssociationOutput> {
    let cfg = &ctx.cfg;
    let (index, phantoms) = load_data(ctx)?;
    let metrics = behavior_columns(&phantoms, &index.behavior_names, &cfg.association.metrics)?;
    let (enc, store) = load_encoder(ctx)?;
    let features = layer_features(&enc, &store, &cfg.grid()?, &phantoms)?;
    let ages: Vec<f64> = phantoms.iter().map(|p| p.age).collect();
    let plain = run_association(&features, &metrics, None, &cfg.association, cfg.seeds.folds)?;
    let age_control = run_association(&features, &metrics, Some(&ages), &cfg.association, cfg.seeds.folds)?;
    let dir = ctx.path(format!("associate/mode{}", cfg.pretrain.mode));
    for (name, rows) in [("association.csv", &plain), ("association_age_control.csv", &age_control)] {
        write_csv(&dir.join(name), AssociationRow::CSV_HEADER, rows.iter().map(|r| r.csv_row()))?;
    }
    Ok(AssociationOutput { plain, age_control })
}

/// Reads a selection dump back into per-sample results.
pub fn read_selections(path: &Path) -> Result<Vec<SelectionResult>> {
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            anyhow::Error::new(UserError(format!(
                "no selection dump at {}; run `voxformer finetune` first",
                path.display()
            )))
        } else {
            anyhow::Error::new(e)
        }
    })?;
    let mut out: Vec<(usize, SelectionResult)> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: SelectionLine =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        let layer = LayerSelection {
            scores: l.scores,
            selected: l.indices,
        };
        match out.last_mut() {
            Some((s, r)) if *s == l.sample => r.layers.push(layer),
            _ => out.push((l.sample, SelectionResult { layers: vec![layer] })),
        }
    }
    Ok(out.into_iter().map(|(_, r)| r).collect())
}

/// Selection counts per layer and token; writes a CSV and one bar chart per
/// layer.
pub fn select_stats(ctx: &Context) -> Result<Vec<Vec<usize>>> {
    let cfg = &ctx.cfg;
    let variant = finetune_variant(ctx);
    if !cfg.finetune.select_tokens {
        return Err(UserError(format!("variant {variant} does not select tokens")).into());
    }
    let selections = read_selections(&ctx.path(format!("finetune/{variant}/selections.jsonl")))?;
    let grid = cfg.grid()?;
    let hist = selection_histogram(&selections, grid.tokens())?;
    let [_, gy, gx] = grid.grid;
    let p = grid.patch;
    let spec = &cfg.data.phantom;
    let samples = selections.len().max(1) as f64;
    let dir = ctx.path(format!("select_stats/{variant}"));
    let mut rows = Vec::new();
    for (l, counts) in hist.iter().enumerate() {
        for (t, &c) in counts.iter().enumerate() {
            let (z, y, x) = (t / (gy * gx), (t / gx) % gy, t % gx);
            let in_class = (0..p * p * p).any(|o| {
                spec.in_class_region(z * p + o / (p * p), y * p + (o / p) % p, x * p + o % p)
            });
            rows.push(format!("{l},{t},{z},{y},{x},{in_class},{c},{}", c as f64 / samples));
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / samples).collect();
        write_text(
            &dir.join(format!("frequency_layer{l}.svg")),
            &svg::bar_chart(
                &format!("Selection frequency, layer {l}"),
                "patch token",
                "fraction of samples",
                &freq,
            ),
        )?;
    }
    write_csv(
        &dir.join("frequency.csv"),
        "layer,token,gz,gy,gx,class_region,count,frequency",
        rows,
    )?;
    Ok(hist)
}

fn read_rows(path: &Path) -> Result<Option<(Vec<String>, Vec<Vec<String>>)>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(None);
    };
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok(Some((header, rows)))
}

fn sorted_subdirs(dir: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map(|it| it.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect())
        .unwrap_or_default();
    dirs.sort();
    dirs
}

fn name_of(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Collects every stage's results into `report/summary.csv` and draws the
/// loss curves and a PCA scatter of last-layer features.
pub fn report(ctx: &Context) -> Result<()> {
    let dir = ctx.path("report");
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for d in sorted_subdirs(&ctx.path("pretrain")) {
        let name = name_of(&d);
        if let Some((_, r)) = read_rows(&d.join("summary.csv"))? {
            rows.extend(r.iter().map(|kv| format!("pretrain/{name},{},{}", kv[0], kv[1])));
        }
        if let Some((h, r)) = read_rows(&d.join("epochs.csv"))? {
            let col = h.iter().position(|c| c == "L_pixel");
            if let Some(c) = col {
                let pts = r
                    .iter()
                    .filter_map(|row| Some((row[0].parse().ok()?, row[c].parse().ok()?)))
                    .collect();
                curves.push((name.clone(), pts));
            }
        }
    }
    for d in sorted_subdirs(&ctx.path("finetune")) {
        let name = name_of(&d);
        if let Some((h, r)) = read_rows(&d.join("metrics.csv"))? {
            for row in &r {
                for (k, v) in h.iter().zip(row).skip(2) {
                    rows.push(format!("finetune/{name},{k},{v}"));
                }
            }
        }
    }
    for d in sorted_subdirs(&ctx.path("probe")) {
        let name = name_of(&d);
        if let Some((h, r)) = read_rows(&d.join("probe.csv"))? {
            for row in &r {
                for (k, v) in h.iter().zip(row).skip(1).take(4) {
                    rows.push(format!("probe/{name},layer{}_{k},{v}", row[0]));
                }
            }
        }
    }
    for d in sorted_subdirs(&ctx.path("associate")) {
        let name = name_of(&d);
        for (file, tag) in [("association.csv", "plain"), ("association_age_control.csv", "age_control")] {
            if let Some((_, r)) = read_rows(&d.join(file))? {
                for row in &r {
                    rows.push(format!("associate/{name}/{tag},layer{}_{}_mean_r,{}", row[0], row[1], row[2]));
                    rows.push(format!("associate/{name}/{tag},layer{}_{}_significant,{}", row[0], row[1], row[5]));
                }
            }
        }
    }
    write_csv(&dir.join("summary.csv"), "source,key,value", rows)?;
    if !curves.is_empty() {
        write_text(
            &dir.join("loss_curves.svg"),
            &svg::line_plot("Restoration loss per epoch", "epoch", "L_pixel", &curves),
        )?;
    }

    // PCA of the configured encoder's last-layer features, when a dataset exists.
    if data_dir(ctx).join("index.json").exists() {
        let (_, phantoms) = load_data(ctx)?;
        let (train, test) = split(ctx, &phantoms);
        let all: Vec<Phantom> = train.into_iter().chain(test).collect();
        let (enc, store) = load_encoder(ctx)?;
        let feats = layer_features(&enc, &store, &ctx.cfg.grid()?, &all)?;
        let last = feats.last().context("encoder has no layers")?;
        let rows_ref: Vec<&[f64]> = last.iter().map(|r| &r[..]).collect();
        let pca = Pca::fit(&rows_ref, 2)?;
        let proj = pca.transform(&rows_ref)?;
        write_csv(
            &dir.join("pca.csv"),
            "sample,label,pc1,pc2",
            proj.iter()
                .zip(&all)
                .enumerate()
                .map(|(i, (z, p))| format!("{i},{},{},{}", p.label, z[0], z[1])),
        )?;
        let pts: Vec<(f64, f64, usize)> = proj.iter().zip(&all).map(|(z, p)| (z[0], z[1], p.label as usize)).collect();
        write_text(
            &dir.join("pca.svg"),
            &svg::scatter_plot(
                &format!("Last-layer features, mode {}", ctx.cfg.pretrain.mode),
                &format!("PC1 ({:.1}%)", 100.0 * pca.explained_ratio[0]),
                &format!("PC2 ({:.1}%)", 100.0 * pca.explained_ratio[1]),
                &pts,
                &["class 0", "class 1"],
            ),
        )?;
    }
    let mut f = fs::File::create(dir.join("README.txt"))?;
    writeln!(
        f,
        "summary.csv: one row per reported value (source, key, value).\nloss_curves.svg: L_pixel per epoch for each pretraining mode.\npca.csv / pca.svg: last-layer features projected on two principal components."
    )?;
    log::info!("report written to {}", dir.display());
    Ok(())
}
