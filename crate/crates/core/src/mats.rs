//! Individual-adaptive token fine-tuning.
//!
//! A learnable guider token is prepended to the patch tokens. For every block
//! the head-averaged score matrix yields a mutual attention score per patch
//! token: the guider's row softmax times the guider's column softmax, read at
//! that token. The top-`k` tokens of every layer are gathered, concatenated
//! and classified by one linear layer. Selection is recomputed on every
//! forward pass and carries no gradient.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionCapture, Tape, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::optim::{cosine_warmup_lr, scaled_base_lr, AdamW, AdamWConfig};
use crate::params::{trunc_normal, ParamGrads, ParamId, ParamStore};
use crate::rng::{stream, Rng};
use crate::synth::Phantom;
use crate::tensor::{Scalar, Tensor};
use crate::volume::{patchify, PatchGrid};

/// Which attention map feeds the mutual attention score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Scaled dot products before softmax, averaged over heads.
    #[default]
    PreSoftmax,
    /// Softmax probabilities, averaged over heads.
    PostSoftmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Tokens selected per layer.
    pub k: usize,
    pub score_source: ScoreSource,
    /// Off: classify the mean-pooled final output without a guider.
    pub select_tokens: bool,
    /// Re-sort the selected tokens by index; off keeps score order.
    pub order_by_index: bool,
    /// Train only the classifier (and guider) on a frozen encoder.
    pub freeze_encoder: bool,
    pub classes: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: Option<f64>,
    pub adamw: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            k: 3,
            score_source: ScoreSource::PreSoftmax,
            select_tokens: true,
            order_by_index: true,
            freeze_encoder: false,
            classes: 2,
            epochs: 50,
            warmup_epochs: 5,
            batch_size: 16,
            base_lr: None,
            adamw: AdamWConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn base_lr(&self) -> f64 {
        self.base_lr.unwrap_or_else(|| scaled_base_lr(self.batch_size))
    }

    pub fn validate(&self, tokens: usize) -> Result<()> {
        if self.select_tokens && (self.k == 0 || self.k > tokens) {
            return Err(Error::invalid(
                "finetune_config",
                format!("k = {} must lie in 1..={tokens}", self.k),
            ));
        }
        if self.classes < 2 {
            return Err(Error::invalid("finetune_config", "at least two classes are required"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("finetune_config", "batch size must be at least 1"));
        }
        if self.base_lr.is_some_and(|lr| !(lr > 0.0)) {
            return Err(Error::invalid("finetune_config", "base learning rate must be positive"));
        }
        Ok(())
    }
}

/// Mutual attention scores for the `N` patch tokens of an `(N+1) x (N+1)`
/// score matrix whose row and column 0 belong to the guider.
///
/// Both softmaxes run over all `N + 1` entries, guider included; the result
/// is read at indices `1..=N`.
pub fn mutual_attention_scores(a: &[f64], n_plus_1: usize) -> Result<Vec<f64>> {
    if n_plus_1 < 2 || a.len() != n_plus_1 * n_plus_1 {
        return Err(Error::shape("mutual_attention_scores", &[a.len()], &[n_plus_1, n_plus_1]));
    }
    let row = softmax(&a[..n_plus_1]);
    let col: Vec<f64> = (0..n_plus_1).map(|j| a[j * n_plus_1]).collect();
    let col = softmax(&col);
    Ok((1..n_plus_1).map(|i| row[i] * col[i]).collect())
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Indices of the `k` largest scores; ties go to the lower index. With
/// `order_by_index` the result is ascending, otherwise by descending score.
pub fn top_k(scores: &[f64], k: usize, order_by_index: bool) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(
            "select_tokens",
            format!("k = {k} must lie in 1..={}", scores.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            what: "mutual attention scores".into(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    if order_by_index {
        idx.sort_unstable();
    }
    Ok(idx)
}

/// Scores and chosen patch tokens for one layer. Indices count patch tokens
/// from 0, so the guider can never appear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
}

/// One sample's selection across all layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub layers: Vec<LayerSelection>,
}

/// Head-averaged score matrix of one attention capture.
pub fn score_matrix<T: Scalar>(cap: &AttentionCapture<T>, source: ScoreSource) -> Vec<f64> {
    let nn = cap.tokens * cap.tokens;
    match source {
        ScoreSource::PreSoftmax => cap.raw_mean.iter().map(|v| v.as_f64()).collect(),
        ScoreSource::PostSoftmax => {
            let mut m = vec![0.0; nn];
            for h in 0..cap.heads {
                for (acc, v) in m.iter_mut().zip(&cap.probs[h * nn..(h + 1) * nn]) {
                    *acc += v.as_f64() / cap.heads as f64;
                }
            }
            m
        }
    }
}

/// Per-layer top-`k` selection from attention captures that include the
/// guider at token 0.
pub fn select_tokens<T: Scalar>(
    captures: &[AttentionCapture<T>],
    k: usize,
    source: ScoreSource,
    order_by_index: bool,
) -> Result<SelectionResult> {
    let layers = captures
        .iter()
        .map(|cap| {
            let scores = mutual_attention_scores(&score_matrix(cap, source), cap.tokens)?;
            let selected = top_k(&scores, k, order_by_index)?;
            Ok(LayerSelection { scores, selected })
        })
        .collect::<Result<_>>()?;
    Ok(SelectionResult { layers })
}

/// Gathers the selected rows of every layer snapshot (`[N + 1, d]`, guider at
/// row 0), concatenates them in (layer, index) order, flattens to
/// `[1, L·k·d]` and applies `head`.
pub fn classify_selected<T: Scalar>(
    tape: &mut Tape<'_, T>,
    layers: &[Var],
    selection: &SelectionResult,
    head: &Linear,
) -> Result<Var> {
    if layers.len() != selection.layers.len() || layers.is_empty() {
        return Err(Error::invalid(
            "classify_selected",
            format!("{} layer snapshots but {} selections", layers.len(), selection.layers.len()),
        ));
    }
    let mut parts = Vec::with_capacity(layers.len());
    for (&x, sel) in layers.iter().zip(&selection.layers) {
        let rows = tape.shape(x)[0];
        let idx: Vec<usize> = sel.selected.iter().map(|&i| i + 1).collect();
        if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
            return Err(Error::invalid(
                "classify_selected",
                format!("token index {} out of range for {} patch tokens", bad - 1, rows - 1),
            ));
        }
        parts.push(tape.gather_rows(x, &idx)?);
    }
    let cat = tape.concat(&parts)?;
    let numel: usize = tape.shape(cat).iter().product();
    if numel != head.input {
        return Err(Error::shape("classify_selected", &[1, numel], &[1, head.input]));
    }
    let flat = tape.reshape(cat, &[1, numel])?;
    head.forward(tape, flat)
}

/// Encoder plus guider and linear classifier.
#[derive(Clone, Debug)]
pub struct MatsModel {
    pub grid: PatchGrid,
    pub encoder: Encoder,
    pub guider: Option<ParamId>,
    pub head: Linear,
    pub k: usize,
    pub score_source: ScoreSource,
    pub order_by_index: bool,
}

/// Logits and, with token selection, the choice that produced them.
pub struct Prediction {
    pub logits: Var,
    pub selection: Option<SelectionResult>,
}

impl MatsModel {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        grid: PatchGrid,
        encoder: EncoderConfig,
        cfg: &FinetuneConfig,
    ) -> Result<Self> {
        cfg.validate(grid.tokens())?;
        let encoder = Encoder::new(store, rng, "encoder", encoder, grid.tokens(), grid.patch_len())?;
        let d = encoder.config.dim;
        let (guider, head_in) = if cfg.select_tokens {
            let g = store.add("guider", trunc_normal(rng, &[1, d], crate::nn::INIT_STD))?;
            (Some(g), encoder.config.depth * cfg.k * d)
        } else {
            (None, d)
        };
        let head = Linear::new(store, rng, "classifier", head_in, cfg.classes, true)?;
        Ok(MatsModel {
            grid,
            encoder,
            guider,
            head,
            k: cfg.k,
            score_source: cfg.score_source,
            order_by_index: cfg.order_by_index,
        })
    }

    /// Classifies one volume given as `[N, p³]` patch rows.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, patches: &[f32]) -> Result<Prediction> {
        let n = self.grid.tokens();
        let x = tape.constant(Tensor::new(
            [n, self.grid.patch_len()],
            patches.iter().map(|&v| T::of(v as f64)).collect(),
        )?);
        let positions: Vec<usize> = (0..n).collect();
        let tokens = self.encoder.embed_patches(tape, x, &positions)?;
        match self.guider {
            Some(g) => {
                let g = tape.param(g);
                let tokens = tape.concat(&[g, tokens])?;
                let enc = self.encoder.encode(tape, tokens, true)?;
                let selection = select_tokens(&enc.attention, self.k, self.score_source, self.order_by_index)?;
                let logits = classify_selected(tape, &enc.layers, &selection, &self.head)?;
                Ok(Prediction {
                    logits,
                    selection: Some(selection),
                })
            }
            None => {
                let enc = self.encoder.encode(tape, tokens, false)?;
                let pooled = tape.mean_rows(enc.output)?;
                let logits = self.head.forward(tape, pooled)?;
                Ok(Prediction { logits, selection: None })
            }
        }
    }
}

/// Mean loss and accuracy of one fine-tuning epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub lr: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,loss,train_acc,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.loss, self.train_acc, self.lr)
    }
}

/// Class probabilities and selection for one evaluated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePrediction {
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub selection: Option<SelectionResult>,
}

pub struct FineTuner {
    pub cfg: FinetuneConfig,
    pub model: MatsModel,
    pub store: ParamStore<f32>,
    opt: AdamW<f32>,
    pub step: usize,
    pub epoch: usize,
    shuffle_rng: Rng,
}

fn check_label(label: u8, classes: usize) -> Result<usize> {
    if (label as usize) < classes {
        Ok(label as usize)
    } else {
        Err(Error::invalid(
            "finetune",
            format!("label {label} outside the {classes} classes"),
        ))
    }
}

impl FineTuner {
    /// Builds the model, copies `encoder.*` weights from `pretrained` when
    /// given, and freezes the encoder in probe mode.
    pub fn new(
        grid: PatchGrid,
        encoder: EncoderConfig,
        cfg: FinetuneConfig,
        init_seed: u64,
        shuffle_seed: u64,
        pretrained: Option<&ParamStore<f32>>,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = MatsModel::new(&mut store, &mut stream(init_seed, 40), grid, encoder, &cfg)?;
        if let Some(src) = pretrained {
            let copied = store.copy_matching(src, "encoder.")?;
            let expected = store.iter().filter(|p| p.name.starts_with("encoder.")).count();
            if copied != expected {
                return Err(Error::invalid(
                    "finetune",
                    format!("checkpoint provides {copied} of {expected} encoder parameters"),
                ));
            }
        }
        if cfg.freeze_encoder {
            store.set_requires_grad_prefix("encoder.", false);
        }
        let opt = AdamW::new(&store, cfg.adamw);
        Ok(FineTuner {
            model,
            store,
            opt,
            step: 0,
            epoch: 0,
            shuffle_rng: stream(shuffle_seed, 41),
            cfg,
        })
    }

    fn patches(&self, phantoms: &[Phantom]) -> Result<Vec<Vec<f32>>> {
        phantoms.iter().map(|p| patchify(&p.volume, &self.model.grid)).collect()
    }

    /// One pass over `phantoms` in a freshly shuffled order.
    pub fn train_epoch(&mut self, phantoms: &[Phantom]) -> Result<EpochRecord> {
        if phantoms.is_empty() {
            return Err(Error::invalid("finetune", "empty training set"));
        }
        let labels = phantoms
            .iter()
            .map(|p| check_label(p.label, self.cfg.classes))
            .collect::<Result<Vec<_>>>()?;
        let patches = self.patches(phantoms)?;
        let per_epoch = phantoms.len().div_ceil(self.cfg.batch_size);
        let total = per_epoch * self.cfg.epochs.max(1);
        let warmup = per_epoch * self.cfg.warmup_epochs;
        let base = self.cfg.base_lr();

        let mut order: Vec<usize> = (0..phantoms.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            lr = cosine_warmup_lr(self.step, warmup, total, base);
            let model = &self.model;
            let store = &self.store;
            let results: Vec<(f64, bool, ParamGrads<f32>)> = chunk
                .par_iter()
                .map(|&i| {
                    let mut tape = Tape::new(store);
                    let pred = model.forward(&mut tape, &patches[i])?;
                    let loss = tape.cross_entropy(pred.logits, &[labels[i]])?;
                    let hit = argmax(tape.value(pred.logits)) == labels[i];
                    let g = tape.backward(loss)?;
                    Ok((tape.item(loss) as f64, hit, tape.param_grads(&g)?))
                })
                .collect::<Result<_>>()?;
            let mut grads = ParamGrads::zeros_like(&self.store);
            for (l, hit, g) in &results {
                loss_sum += l;
                correct += *hit as usize;
                grads.add_assign(g);
            }
            grads.scale(1.0 / chunk.len() as f32);
            if !loss_sum.is_finite() {
                return Err(Error::NonFinite {
                    what: "fine-tuning loss".into(),
                });
            }
            self.opt.step(&mut self.store, &grads, lr)?;
            self.step += 1;
        }
        let rec = EpochRecord {
            epoch: self.epoch,
            loss: loss_sum / phantoms.len() as f64,
            train_acc: correct as f64 / phantoms.len() as f64,
            lr,
        };
        self.epoch += 1;
        Ok(rec)
    }

    /// Runs the remaining epochs of `cfg.epochs`.
    pub fn fit(&mut self, phantoms: &[Phantom], mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Vec<EpochRecord>> {
        let mut out = Vec::new();
        while self.epoch < self.cfg.epochs {
            let rec = self.train_epoch(phantoms)?;
            on_epoch(&rec);
            out.push(rec);
        }
        Ok(out)
    }

    pub fn predict(&self, phantoms: &[Phantom]) -> Result<Vec<SamplePrediction>> {
        let patches = self.patches(phantoms)?;
        patches
            .par_iter()
            .map(|p| {
                let mut tape = Tape::new(&self.store);
                let pred = self.model.forward(&mut tape, p)?;
                let logits: Vec<f64> = tape.value(pred.logits).iter().map(|&v| v as f64).collect();
                Ok(SamplePrediction {
                    predicted: argmax(&logits),
                    probs: softmax(&logits),
                    selection: pred.selection,
                })
            })
            .collect()
    }
}

fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Selection counts per layer and patch token, `[L][N]`. Every layer's row
/// sums to `samples · k`.
pub fn selection_histogram(selections: &[SelectionResult], tokens: usize) -> Result<Vec<Vec<usize>>> {
    let layers = selections.first().map_or(0, |s| s.layers.len());
    let mut hist = vec![vec![0usize; tokens]; layers];
    for s in selections {
        if s.layers.len() != layers {
            return Err(Error::invalid("selection_histogram", "samples disagree on layer count"));
        }
        for (h, l) in hist.iter_mut().zip(&s.layers) {
            for &i in &l.selected {
                *h.get_mut(i).ok_or_else(|| Error::invalid("selection_histogram", "token index out of range"))? += 1;
            }
        }
    }
    Ok(hist)
}

/// One JSON line of a selection dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionLine {
    pub sample: usize,
    pub layer: usize,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

pub fn selection_lines(selections: &[SelectionResult]) -> Vec<SelectionLine> {
    selections
        .iter()
        .enumerate()
        .flat_map(|(sample, s)| {
            s.layers.iter().enumerate().map(move |(layer, l)| SelectionLine {
                sample,
                layer,
                indices: l.selected.clone(),
                scores: l.scores.clone(),
            })
        })
        .collect()
}
