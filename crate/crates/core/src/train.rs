//! Training configuration, AdamW with polynomial decay, the epoch loop,
//! evaluation over dataset splits, and the ablation harness.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::DecoderWiring;
use crate::error::{Error, Result};
use crate::fusion::{BlockSpec, FusionKind, Variant};
use crate::metrics::{metrics, MetricReport, SegmentationRecord, PRE_THRESHOLDS};
use crate::model::{Cprn, ModelConfig};
use crate::nn::{Ctx, Dropout};
use crate::params::ParameterStore;
use crate::synth::{augment, load_dataset, write_pgm, Sample, Split};
use crate::tape::GradMap;
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub fusion: FusionKind,
    pub ffn: bool,
    pub ape: bool,
    pub stages: usize,
    pub channels: usize,
    /// Self-attention layers over the word embeddings.
    pub text_layers: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub wiring: DecoderWiring,
    pub renormalize_roho: bool,
    pub dropout: f64,
    /// Random flips and shifts of training samples.
    pub augment: bool,
    /// Directory holding `train/` and `val/`.
    pub dataset: PathBuf,
    pub output: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::ParallelGuided,
            fusion: FusionKind::Eq5,
            ffn: true,
            ape: true,
            stages: 4,
            channels: 32,
            text_layers: 0,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            wiring: DecoderWiring::ConsumeFinest,
            renormalize_roho: false,
            dropout: 0.1,
            augment: false,
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs/default"),
        }
    }
}

pub const CONFIG_KEYS: [&str; 18] = [
    "variant",
    "fusion",
    "ffn",
    "ape",
    "stages",
    "channels",
    "text_layers",
    "lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "seed",
    "wiring",
    "renormalize_roho",
    "dropout",
    "augment",
    "dataset",
    "output",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("lr must be finite and non-negative"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if self.stages == 0 || self.stages > 6 {
            return Err(Error::config("stages must lie in 1..=6"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels must be positive"));
        }
        Ok(())
    }

    pub fn block(&self) -> BlockSpec {
        BlockSpec {
            variant: self.variant,
            ffn: self.ffn,
            ape: self.ape,
            fusion: self.fusion,
            renormalize_roho: self.renormalize_roho,
            dropout: self.dropout,
        }
    }

    pub fn model_config(&self, image: (usize, usize)) -> ModelConfig {
        ModelConfig {
            image,
            stages: self.stages,
            channels: self.channels,
            word_dim: self.channels,
            text_layers: self.text_layers,
            ffn_hidden: 2 * self.channels,
            block: self.block(),
            wiring: self.wiring,
            ..ModelConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = value.parse()?,
            "fusion" => self.fusion = value.parse()?,
            "ffn" => self.ffn = parse(key, value)?,
            "ape" => self.ape = parse(key, value)?,
            "stages" => self.stages = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "text_layers" => self.text_layers = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "wiring" => self.wiring = value.parse()?,
            "renormalize_roho" => self.renormalize_roho = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "dataset" => self.dataset = PathBuf::from(value),
            "output" => self.output = PathBuf::from(value),
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "variant" => self.variant.to_string(),
            "fusion" => self.fusion.to_string(),
            "ffn" => self.ffn.to_string(),
            "ape" => self.ape.to_string(),
            "stages" => self.stages.to_string(),
            "channels" => self.channels.to_string(),
            "text_layers" => self.text_layers.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "wiring" => self.wiring.to_string(),
            "renormalize_roho" => self.renormalize_roho.to_string(),
            "dropout" => self.dropout.to_string(),
            "augment" => self.augment.to_string(),
            "dataset" => self.dataset.display().to_string(),
            "output" => self.output.display().to_string(),
            _ => return None,
        })
    }

    /// `key=value` lines in [`CONFIG_KEYS`] order.
    pub fn to_kv(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).unwrap()))
            .collect()
    }

    /// Applies `key=value` lines onto `self`. Blank lines and `#` comments
    /// are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// `p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)`; parameters absent from `grads`
    /// see a zero gradient.
    pub fn update(&mut self, store: &mut ParameterStore, grads: &GradMap, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let zero;
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.shape());
                    &zero
                }
            };
            if g.shape() != p.shape() {
                return Err(Error::dimension(format!(
                    "gradient for `{name}` is {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * wd * *pi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn moment_shapes_match(&self, store: &ParameterStore) -> bool {
        self.first
            .iter()
            .chain(&self.second)
            .all(|(n, t)| store.get(n).is_some_and(|p| p.shape() == t.shape()))
    }
}

/// `base · (1 − step/total)^power`.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step.min(total) as f64 / total as f64).powf(power)
}

pub const LR_POWER: f64 = 0.9;

/// SplitMix64 over the three inputs; gives independent dropout streams per
/// step and sample.
/// Separates the augmentation streams from the dropout streams.
const AUGMENT_SALT: u64 = 0x5DEE_CE66_D1CE_4E5B;

fn derive_seed(seed: u64, step: u64, sample: u64) -> u64 {
    let mut z = seed
        .wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(sample.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val: Option<MetricReport>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub history: Vec<EpochLog>,
    /// Mean batch loss after every optimizer step.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best: ParameterStore,
    pub optimizer: AdamW,
}

impl FitResult {
    pub fn best_val(&self) -> Option<&MetricReport> {
        self.history.get(self.best_epoch)?.val.as_ref()
    }

    /// `epoch,train_loss,lr,val_overall_iou,val_mean_iou` rows.
    pub fn loss_curve_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,lr,val_overall_iou,val_mean_iou\n");
        for e in &self.history {
            let (o, m) = e
                .val
                .as_ref()
                .map_or((String::new(), String::new()), |v| (v.overall_iou.to_string(), v.mean_iou.to_string()));
            writeln!(s, "{},{},{},{},{}", e.epoch, e.train_loss, e.lr, o, m).unwrap();
        }
        s
    }
}

/// Trains `store` in place. The returned `best` holds the parameters of the
/// epoch with the highest validation overall IoU (the last epoch when `val`
/// is empty).
pub fn fit(
    model: &Cprn,
    store: &mut ParameterStore,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            lr = poly_lr(cfg.lr, step, total_steps, LR_POWER);
            let mut sum: Option<GradMap> = None;
            let mut batch_loss = 0.0;
            for (k, &i) in idx.iter().enumerate() {
                let augmented;
                let s = if cfg.augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ AUGMENT_SALT, step as u64, k as u64));
                    augmented = augment(&train[i], &mut rng);
                    &augmented
                } else {
                    &train[i]
                };
                let dropout = Dropout::new(cfg.dropout, derive_seed(cfg.seed, step as u64, k as u64));
                let mut cx = Ctx::train(store, dropout);
                let (loss, _) = model.loss(&mut cx, &s.scene.image, &s.tokens, &s.mask)?;
                let value = cx.tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch,
                        samples: idx.iter().map(|&j| train[j].id).collect(),
                    });
                }
                batch_loss += value;
                cx.tape.backward(loss)?;
                let grads = cx.tape.param_grads();
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            acc.get_mut(&name).expect("every sample touches the same parameters").add_assign(&g);
                        }
                    }
                }
            }
            let scale = 1.0 / idx.len() as f64;
            let mut grads = sum.expect("batches are non-empty");
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            opt.update(store, &grads, lr)?;
            step += 1;
            step_losses.push(batch_loss * scale);
            epoch_loss += batch_loss;
        }

        let val_report = if val.is_empty() {
            None
        } else {
            Some(metrics(&evaluate(model, store, val)?, &PRE_THRESHOLDS)?)
        };
        let log = EpochLog {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            lr,
            val: val_report,
        };
        on_epoch(&log);
        let score = log.val.as_ref().map_or(f64::NEG_INFINITY, |v| v.overall_iou);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => score > *b || log.val.is_none(),
        };
        if improved {
            best = Some((score, epoch, store.clone()));
        }
        history.push(log);
    }

    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(FitResult {
        history,
        step_losses,
        best_epoch,
        best,
        optimizer: opt,
    })
}

/// Eval-mode predictions for every sample, in input order.
pub fn evaluate(model: &Cprn, store: &ParameterStore, samples: &[Sample]) -> Result<Vec<SegmentationRecord>> {
    samples
        .iter()
        .map(|s| {
            let scores = model.predict(store, &s.scene.image, &s.tokens)?;
            SegmentationRecord::new(s.id, scores, s.mask.clone())
        })
        .collect()
}

/// Metrics per split; splits with no samples are omitted.
pub fn split_reports(
    records: &[SegmentationRecord],
    samples: &[Sample],
    splits: &[Split],
) -> Result<BTreeMap<Split, MetricReport>> {
    if records.len() != samples.len() {
        return Err(Error::dimension("one record per sample expected"));
    }
    let mut out = BTreeMap::new();
    for &split in splits {
        let subset: Vec<SegmentationRecord> = records
            .iter()
            .zip(samples)
            .filter(|(_, s)| split.contains(s))
            .map(|(r, _)| r.clone())
            .collect();
        if !subset.is_empty() {
            out.insert(split, metrics(&subset, &PRE_THRESHOLDS)?);
        }
    }
    Ok(out)
}

pub fn reports_to_kv(reports: &BTreeMap<Split, MetricReport>) -> String {
    let mut s = String::new();
    for (split, r) in reports {
        for line in r.to_kv().lines() {
            writeln!(s, "{}.{line}", split.name()).unwrap();
        }
    }
    s
}

pub fn reports_to_json(reports: &BTreeMap<Split, MetricReport>) -> Result<String> {
    let named: BTreeMap<&str, &MetricReport> = reports.iter().map(|(k, v)| (k.name(), v)).collect();
    Ok(serde_json::to_string_pretty(&named)?)
}

/// Predicted masks as `<dir>/<id>.pgm`.
pub fn export_masks(records: &[SegmentationRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in records {
        write_pgm(&dir.join(format!("{:06}.pgm", r.sample_id)), &r.prediction)?;
    }
    Ok(())
}

fn image_extents(samples: &[Sample]) -> Result<(usize, usize)> {
    let first = samples.first().ok_or_else(|| Error::config("dataset is empty"))?;
    Ok((first.scene.height(), first.scene.width()))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub fit: FitResult,
    pub val: BTreeMap<Split, MetricReport>,
}

/// Full on-disk run: reads `dataset/{train,val}`, writes the best checkpoint,
/// the verbatim config, the loss curve and validation reports to `output`.
pub fn run_train(cfg: &TrainConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainSummary> {
    cfg.validate()?;
    let train = load_dataset(&cfg.dataset.join("train"))?;
    let val = load_dataset(&cfg.dataset.join("val"))?;
    let (model, mut store) = Cprn::build(cfg.model_config(image_extents(&train)?), cfg.seed)?;
    let fit = fit(&model, &mut store, &train, &val, cfg, on_epoch)?;
    fs::create_dir_all(&cfg.output)?;
    fit.best.save(&cfg.output.join(CHECKPOINT_FILE))?;
    fs::write(cfg.output.join(CONFIG_FILE), cfg.to_kv())?;
    fs::write(cfg.output.join(LOSS_CURVE_FILE), fit.loss_curve_csv())?;
    let records = evaluate(&model, &fit.best, &val)?;
    let reports = split_reports(&records, &val, &Split::ALL)?;
    fs::write(cfg.output.join("val_metrics.txt"), reports_to_kv(&reports))?;
    fs::write(cfg.output.join("val_metrics.json"), reports_to_json(&reports)?)?;
    Ok(TrainSummary { fit, val: reports })
}

/// Rebuilds the network recorded in `run_dir` for images of `image` extents
/// and loads its best checkpoint.
pub fn load_run(run_dir: &Path, image: (usize, usize)) -> Result<(TrainConfig, Cprn, ParameterStore)> {
    let cfg = TrainConfig::from_kv(&fs::read_to_string(run_dir.join(CONFIG_FILE))?)?;
    let (model, mut store) = Cprn::build(cfg.model_config(image), cfg.seed)?;
    let saved = ParameterStore::load(&run_dir.join(CHECKPOINT_FILE))?;
    store.load_values_from(&saved)?;
    Ok((cfg, model, store))
}

/// Evaluates the run in `run_dir` on the dataset at `data_dir`, optionally
/// writing predicted masks.
pub fn run_evaluate(
    run_dir: &Path,
    data_dir: &Path,
    splits: &[Split],
    masks_dir: Option<&Path>,
) -> Result<BTreeMap<Split, MetricReport>> {
    let samples = load_dataset(data_dir)?;
    let (_, model, store) = load_run(run_dir, image_extents(&samples)?)?;
    let records = evaluate(&model, &store, &samples)?;
    if let Some(dir) = masks_dir {
        export_masks(&records, dir)?;
    }
    split_reports(&records, &samples, splits)
}

/// One row of an ablation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub label: String,
    pub variant: Variant,
    pub fusion: FusionKind,
}

impl Arm {
    pub fn variant(variant: Variant) -> Self {
        Self {
            label: variant.to_string(),
            variant,
            fusion: FusionKind::Eq5,
        }
    }

    pub fn fusion(fusion: FusionKind) -> Self {
        Self {
            label: fusion.to_string(),
            variant: Variant::ParallelGuided,
            fusion,
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    /// A variant name or a fusion kind.
    fn from_str(s: &str) -> Result<Self> {
        if let Ok(v) = s.parse::<Variant>() {
            return Ok(Self::variant(v));
        }
        s.parse::<FusionKind>().map(Self::fusion).map_err(|_| {
            Error::config(format!("`{s}` is neither a block variant nor a fusion kind"))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub label: String,
    pub seed: u64,
    pub reports: BTreeMap<Split, MetricReport>,
    pub final_train_loss: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub labels: Vec<String>,
    pub seeds: Vec<u64>,
    pub runs: Vec<ArmRun>,
}

/// Seed-averaged metrics of one arm on one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub overall_iou: f64,
    pub mean_iou: f64,
    pub pre_50: f64,
    pub pre_70: f64,
    pub pre_90: f64,
}

impl AblationReport {
    pub fn run(&self, label: &str, seed: u64) -> Option<&ArmRun> {
        self.runs.iter().find(|r| r.label == label && r.seed == seed)
    }

    pub fn summary(&self, label: &str, split: Split) -> Option<ArmSummary> {
        let rs: Vec<&MetricReport> = self
            .runs
            .iter()
            .filter(|r| r.label == label)
            .filter_map(|r| r.reports.get(&split))
            .collect();
        if rs.is_empty() {
            return None;
        }
        let n = rs.len() as f64;
        let avg = |f: &dyn Fn(&MetricReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
        Some(ArmSummary {
            overall_iou: avg(&|r| r.overall_iou),
            mean_iou: avg(&|r| r.mean_iou),
            pre_50: avg(&|r| r.pre(0.5).unwrap_or(0.0)),
            pre_70: avg(&|r| r.pre(0.7).unwrap_or(0.0)),
            pre_90: avg(&|r| r.pre(0.9).unwrap_or(0.0)),
        })
    }

    /// Per-seed `(seed, a − b)` differences of `metric` on `split`.
    pub fn deltas(
        &self,
        a: &str,
        b: &str,
        split: Split,
        metric: fn(&MetricReport) -> f64,
    ) -> Vec<(u64, f64)> {
        self.seeds
            .iter()
            .filter_map(|&s| {
                let ra = self.run(a, s)?.reports.get(&split)?;
                let rb = self.run(b, s)?.reports.get(&split)?;
                Some((s, metric(ra) - metric(rb)))
            })
            .collect()
    }

    /// Markdown table with columns Method, P@0.5, P@0.7, P@0.9, Overall IoU,
    /// Mean IoU (percentages, seed means).
    pub fn table(&self, split: Split) -> String {
        let mut s = String::from("| Method | P@0.5 | P@0.7 | P@0.9 | Overall IoU | Mean IoU |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for label in &self.labels {
            if let Some(m) = self.summary(label, split) {
                writeln!(
                    s,
                    "| {label} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
                    100.0 * m.pre_50,
                    100.0 * m.pre_70,
                    100.0 * m.pre_90,
                    100.0 * m.overall_iou,
                    100.0 * m.mean_iou
                )
                .unwrap();
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-seed deltas of every arm against the first arm.
    pub fn delta_lines(&self, split: Split) -> String {
        let mut s = String::new();
        let Some(base) = self.labels.first() else { return s };
        for label in self.labels.iter().skip(1) {
            let d = self.deltas(label, base, split, |r| r.overall_iou);
            let mean = d.iter().map(|x| x.1).sum::<f64>() / d.len().max(1) as f64;
            write!(s, "{label} - {base} [{}] overall_iou: mean {mean:+.4};", split.name()).unwrap();
            for (seed, x) in d {
                write!(s, " seed {seed}: {x:+.4}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for split in Split::ALL {
            writeln!(f, "[{}]", split.name())?;
            f.write_str(&self.table(split))?;
            f.write_str(&self.delta_lines(split))?;
        }
        Ok(())
    }
}

/// Trains every arm under every seed on shared data. `base` supplies the
/// remaining hyperparameters; each run uses its seed for initialization,
/// shuffling and dropout.
pub fn ablate(
    base: &TrainConfig,
    arms: &[Arm],
    seeds: &[u64],
    train: &[Sample],
    val: &[Sample],
    mut on_run: impl FnMut(&ArmRun),
) -> Result<AblationReport> {
    if arms.len() < 2 {
        return Err(Error::config("an ablation needs at least two arms"));
    }
    if seeds.is_empty() {
        return Err(Error::config("an ablation needs at least one seed"));
    }
    let image = image_extents(train)?;
    let mut runs = Vec::new();
    for &seed in seeds {
        for arm in arms {
            let cfg = TrainConfig {
                variant: arm.variant,
                fusion: arm.fusion,
                seed,
                ..base.clone()
            };
            let (model, mut store) = Cprn::build(cfg.model_config(image), seed)?;
            let (reports, final_train_loss, diverged) = match fit(&model, &mut store, train, &[], &cfg, |_| {}) {
                Ok(res) => {
                    let records = evaluate(&model, &store, val)?;
                    let loss = res.history.last().map_or(f64::NAN, |e| e.train_loss);
                    (split_reports(&records, val, &Split::ALL)?, loss, false)
                }
                Err(Error::NonFiniteLoss { .. }) => (BTreeMap::new(), f64::NAN, true),
                Err(e) => return Err(e),
            };
            let run = ArmRun {
                label: arm.label.clone(),
                seed,
                reports,
                final_train_loss,
                diverged,
            };
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(AblationReport {
        labels: arms.iter().map(|a| a.label.clone()).collect(),
        seeds: seeds.to_vec(),
        runs,
    })
}
