use std::borrow::Cow;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lr_at, AdamW, TrainConfig, TrainError};
use crate::data::{normalize_sample, DatasetIndex, Pose};
use crate::metrics::MetricsReport;
use crate::model::{save_checkpoint, Network};
use crate::scalar::{lit, to_f64, Scalar};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Samples above this many input scalars are streamed from disk instead of
/// held in memory.
const IN_MEMORY_LIMIT: usize = 1 << 27;

/// A normalized input and its millimeter target.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub z: Vec<T>,
    pub target_mm: Vec<f64>,
}

/// Training or evaluation samples, either loaded up front or read lazily.
pub enum SampleSet<'a, T> {
    Memory(Vec<Prepared<T>>),
    Lazy(&'a DatasetIndex),
}

fn prepare<T: Scalar>(index: &DatasetIndex, i: usize) -> Result<Prepared<T>, TrainError> {
    let s = index.load(i)?;
    let z: Vec<T> = s.z.iter().map(|&v| lit(v as f64)).collect();
    Ok(Prepared {
        z: normalize_sample(&z),
        target_mm: s.pose.to_flat(),
    })
}

/// Loads and normalizes every sample of `index`, streaming when large.
pub fn load_samples<T: Scalar>(index: &DatasetIndex) -> Result<SampleSet<'_, T>, TrainError> {
    if index.len() * index.manifest().window_len() > IN_MEMORY_LIMIT {
        return Ok(SampleSet::Lazy(index));
    }
    Ok(SampleSet::Memory(
        (0..index.len()).map(|i| prepare(index, i)).collect::<Result<_, _>>()?,
    ))
}

impl<T: Scalar> SampleSet<'_, T> {
    pub fn len(&self) -> usize {
        match self {
            SampleSet::Memory(v) => v.len(),
            SampleSet::Lazy(ix) => ix.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Result<Cow<'_, Prepared<T>>, TrainError> {
        match self {
            SampleSet::Memory(v) => Ok(Cow::Borrowed(&v[i])),
            SampleSet::Lazy(ix) => Ok(Cow::Owned(prepare(ix, i)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeRecord {
    pub optimizer: String,
    pub schedule: String,
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub model_digest: String,
    pub run_digest: Option<String>,
    pub param_count: usize,
    /// Validation metrics of the untrained initialization.
    pub init_val: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample MSE in squared network units.
    pub train_loss: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub steps: usize,
    pub val: Option<MetricsReport>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum HistoryRecord {
    Recipe(RecipeRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn recipe(&self) -> Option<&RecipeRecord> {
        self.records.iter().find_map(|r| match r {
            HistoryRecord::Recipe(x) => Some(x),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            HistoryRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs().map(|e| e.train_loss).collect()
    }

    pub fn last_val(&self) -> Option<&MetricsReport> {
        self.epochs().filter_map(|e| e.val.as_ref()).last()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| TrainError::Io(format!("{}:{}: {e}", path.display(), n + 1)))?,
            );
        }
        Ok(Self { records })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory receiving `history.jsonl`, `best.ckpt` and `last.ckpt`.
    pub run_dir: Option<PathBuf>,
    pub run_digest: Option<String>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

pub struct TrainOutcome<T> {
    pub last: Network<T>,
    /// Best by validation MPJPE; equals `last` without a validation set.
    pub best: Network<T>,
    pub best_epoch: Option<usize>,
    pub history: TrainHistory,
}

struct HistoryWriter(Option<BufWriter<File>>);

impl HistoryWriter {
    fn push(&mut self, history: &mut TrainHistory, r: HistoryRecord) -> Result<(), TrainError> {
        if let Some(w) = &mut self.0 {
            let line = serde_json::to_string(&r).expect("record serializes");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| TrainError::Io(e.to_string()))?;
        }
        history.records.push(r);
        Ok(())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io(format!("{}: {e}", path.display()))
}

/// Mini-batch AdamW over `train` with a per-step cosine schedule. Batch
/// order is drawn from `cfg.seed`.
pub fn train<T: Scalar>(
    mut net: Network<T>,
    train: &DatasetIndex,
    val: Option<&DatasetIndex>,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let train_set = load_samples::<T>(train)?;
    let val_set = match val {
        Some(v) if !v.is_empty() => Some(load_samples::<T>(v)?),
        _ => None,
    };
    let n = train_set.len();
    if cfg.mean_pose_offset {
        net.set_output_offset_mm(mean_target(&train_set)?)?;
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut writer = HistoryWriter(None);
    if let Some(dir) = &opts.run_dir {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let p = dir.join(HISTORY_FILE);
        writer = HistoryWriter(Some(BufWriter::new(File::create(&p).map_err(|e| io_err(&p, e))?)));
    }
    let mut history = TrainHistory::default();
    let init_val = match &val_set {
        Some(v) => Some(evaluate_set(&net, v)?.0),
        None => None,
    };
    let mut best_mpjpe = init_val.as_ref().map_or(f64::INFINITY, |r| r.mpjpe_mm);
    writer.push(
        &mut history,
        HistoryRecord::Recipe(RecipeRecord {
            optimizer: "AdamW".into(),
            schedule: "cosine".into(),
            lr0: cfg.lr0,
            weight_decay: cfg.weight_decay,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            seed: cfg.seed,
            steps_per_epoch,
            total_steps,
            n_train: n,
            n_val: val_set.as_ref().map_or(0, |v| v.len()),
            model_digest: net.digest(),
            run_digest: opts.run_digest.clone(),
            param_count: net.param_count(),
            init_val,
        }),
    )?;

    let mut best = net.clone();
    let mut best_epoch = None;
    let mut opt = AdamW::new(net.params(), cfg);
    let mut grads = net.params().zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr_start = lr_at(step, total_steps, cfg);
        let mut lr = lr_start;
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let s = train_set.get(i)?;
                let l = to_f64(net.loss_and_grad(&s.z, &s.target_mm, &mut grads)?);
                batch_loss += l;
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    loss: batch_loss / batch.len() as f64,
                });
            }
            loss_sum += batch_loss;
            grads.scale(lit(1.0 / batch.len() as f64));
            lr = lr_at(step, total_steps, cfg);
            opt.step(net.params_mut(), &grads, lr);
            step += 1;
        }
        let last_epoch = epoch == cfg.epochs;
        let due = cfg.eval_every > 0 && epoch % cfg.eval_every == 0;
        let val_report = match &val_set {
            Some(v) if due || last_epoch => Some(evaluate_set(&net, v)?.0),
            _ => None,
        };
        if let Some(r) = &val_report {
            if r.mpjpe_mm < best_mpjpe {
                best_mpjpe = r.mpjpe_mm;
                best = net.clone();
                best_epoch = Some(epoch);
                if let Some(dir) = &opts.run_dir {
                    save_checkpoint(&best, dir.join(BEST_CHECKPOINT))?;
                }
            }
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            lr_start,
            lr_end: lr,
            steps: step,
            val: val_report,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            let v = record
                .val
                .as_ref()
                .map_or(String::new(), |r| format!(" val_mpjpe={:.1}mm", r.mpjpe_mm));
            eprintln!(
                "epoch {epoch}/{} loss={:.6} lr={:.2e}{v} ({:.0}s)",
                cfg.epochs, record.train_loss, lr, record.elapsed_s
            );
        }
        writer.push(&mut history, HistoryRecord::Epoch(record))?;
    }
    if val_set.is_none() {
        best = net.clone();
    }
    if let Some(dir) = &opts.run_dir {
        save_checkpoint(&net, dir.join(LAST_CHECKPOINT))?;
        if best_epoch.is_none() {
            save_checkpoint(&best, dir.join(BEST_CHECKPOINT))?;
        }
    }
    Ok(TrainOutcome {
        last: net,
        best,
        best_epoch,
        history,
    })
}

fn mean_target<T: Scalar>(set: &SampleSet<'_, T>) -> Result<Vec<f64>, TrainError> {
    let mut mean: Vec<f64> = Vec::new();
    for i in 0..set.len() {
        let s = set.get(i)?;
        if mean.is_empty() {
            mean = vec![0.0; s.target_mm.len()];
        }
        for (m, v) in mean.iter_mut().zip(&s.target_mm) {
            *m += v;
        }
    }
    let n = set.len().max(1) as f64;
    Ok(mean.into_iter().map(|m| m / n).collect())
}

fn evaluate_set<T: Scalar>(net: &Network<T>, set: &SampleSet<'_, T>) -> Result<(MetricsReport, Vec<Pose>, Vec<Pose>), TrainError> {
    let mut preds = Vec::with_capacity(set.len());
    let mut gts = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let s = set.get(i)?;
        preds.push(Pose::from_flat(&net.predict_mm(&s.z)?));
        gts.push(Pose::from_flat(&s.target_mm));
    }
    let report = MetricsReport::from_batch(&preds, &gts)?;
    Ok((report, preds, gts))
}

/// Metrics of `net` over every sample of `index`.
pub fn evaluate<T: Scalar>(net: &Network<T>, index: &DatasetIndex) -> Result<MetricsReport, TrainError> {
    Ok(evaluate_with_predictions(net, index)?.0)
}

/// Like [`evaluate`], also returning predictions and ground truth.
pub fn evaluate_with_predictions<T: Scalar>(
    net: &Network<T>,
    index: &DatasetIndex,
) -> Result<(MetricsReport, Vec<Pose>, Vec<Pose>), TrainError> {
    if index.is_empty() {
        return Err(TrainError::Config("evaluation set is empty".into()));
    }
    evaluate_set(net, &load_samples::<T>(index)?)
}
