//! Run-level orchestration shared by the command-line driver and the
//! acceptance suite: split, train, evaluate, write artifacts, and the
//! aggregator/head ablation grid.
//!
//! A run directory holds:
//!
//! ```text
//! config.json     {"config_digest", "config"}
//! history.jsonl   recipe record, then one record per epoch
//! best.ckpt       best validation MPJPE
//! last.ckpt       final parameters
//! metrics.json    {"config_digest", "model_digest", "checkpoint", "split", "metrics"}
//! table1.csv      TABLE1_COLUMNS header + one row
//! per_joint.csv   Joint,MPJPE rows + Average
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{make_split, DataError, DatasetIndex, SplitStrategy};
use crate::metrics::MetricsReport;
use crate::model::{Aggregator, HeadKind, ModelError, Network};
use crate::training::{evaluate, train, TrainError, TrainHistory, TrainOptions};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const TABLE1_FILE: &str = "table1.csv";
pub const PER_JOINT_FILE: &str = "per_joint.csv";
pub const TABLE3_FILE: &str = "table3.csv";
pub const TABLE4_FILE: &str = "table4.csv";
pub const ABLATION_FILE: &str = "ablation.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// Bad configuration or input data: the caller's fault.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Io(String),
}

impl From<ConfigError> for ExperimentError {
    fn from(e: ConfigError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<DataError> for ExperimentError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => Self::Io(e.to_string()),
            other => Self::Usage(other.to_string()),
        }
    }
}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(s) => Self::Io(s),
            other => Self::Usage(other.to_string()),
        }
    }
}

impl ExperimentError {
    pub fn is_usage(&self) -> bool {
        match self {
            Self::Usage(_) => true,
            Self::Train(TrainError::Config(_) | TrainError::Data(_) | TrainError::Model(_)) => true,
            _ => false,
        }
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    fs::write(path, text).map_err(|e| ExperimentError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub config_digest: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config_digest: String,
    pub model_digest: String,
    pub checkpoint: String,
    pub split: SplitStrategy,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub config_digest: String,
    pub model_digest: String,
    pub param_count: usize,
    pub head_param_count: usize,
    /// Held-out metrics of the untrained network.
    pub init: MetricsReport,
    /// Held-out metrics of the final parameters.
    pub metrics: MetricsReport,
    pub history: TrainHistory,
    pub n_train: usize,
    pub n_test: usize,
}

/// Checks that the corpus shape matches the model.
pub fn check_compatible(cfg: &RunConfig, index: &DatasetIndex) -> Result<(), ExperimentError> {
    let m = index.manifest();
    let c = &cfg.model;
    if (m.antennas, m.subcarriers, m.frames, m.joints) != (c.antennas, c.subcarriers, c.frames, c.joints) {
        return Err(ExperimentError::Usage(format!(
            "corpus is (A={}, S={}, T={}, J={}) but the model expects (A={}, S={}, T={}, J={})",
            m.antennas, m.subcarriers, m.frames, m.joints, c.antennas, c.subcarriers, c.frames, c.joints
        )));
    }
    Ok(())
}

/// Splits `index` per `cfg.data.split`, trains, evaluates the final
/// parameters on the held-out side and, with `out_dir`, writes every run
/// artifact there.
pub fn run_experiment(
    cfg: &RunConfig,
    index: &DatasetIndex,
    out_dir: Option<&Path>,
    verbose: bool,
) -> Result<RunSummary, ExperimentError> {
    cfg.validate()?;
    check_compatible(cfg, index)?;
    let (train_ix, test_ix) = make_split(index, &cfg.data.split)?;
    if train_ix.is_empty() || test_ix.is_empty() {
        return Err(ExperimentError::Usage(format!(
            "split {} leaves {} training and {} test samples",
            cfg.data.split.strategy,
            train_ix.len(),
            test_ix.len()
        )));
    }
    let digest = cfg.digest();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| ExperimentError::Io(format!("{}: {e}", dir.display())))?;
        let rec = ConfigRecord {
            config_digest: digest.clone(),
            config: cfg.clone(),
        };
        write(&dir.join(CONFIG_FILE), serde_json::to_string_pretty(&rec).expect("serializes"))?;
    }
    let net = Network::<f32>::new(cfg.model.clone(), cfg.skeleton_graph()?, cfg.training.seed)?;
    let (param_count, head_param_count, model_digest) = (net.param_count(), net.head_param_count(), net.digest());
    let opts = TrainOptions {
        run_dir: out_dir.map(Path::to_path_buf),
        run_digest: Some(digest.clone()),
        verbose,
    };
    let outcome = train(net, &train_ix, Some(&test_ix), &cfg.training, &opts)?;
    let init = outcome
        .history
        .recipe()
        .and_then(|r| r.init_val.clone())
        .expect("validation set is non-empty");
    let metrics = match outcome.history.last_val() {
        Some(r) if cfg.training.epochs > 0 => r.clone(),
        _ => evaluate(&outcome.last, &test_ix)?,
    };
    if let Some(dir) = out_dir {
        write_metrics(dir, &digest, &model_digest, "last.ckpt", cfg.data.split.strategy, &metrics)?;
    }
    Ok(RunSummary {
        config_digest: digest,
        model_digest,
        param_count,
        head_param_count,
        init,
        metrics,
        history: outcome.history,
        n_train: train_ix.len(),
        n_test: test_ix.len(),
    })
}

/// `metrics.json`, `table1.csv` and `per_joint.csv`.
pub fn write_metrics(
    dir: &Path,
    config_digest: &str,
    model_digest: &str,
    checkpoint: &str,
    split: SplitStrategy,
    metrics: &MetricsReport,
) -> Result<(), ExperimentError> {
    let rec = MetricsRecord {
        config_digest: config_digest.to_string(),
        model_digest: model_digest.to_string(),
        checkpoint: checkpoint.to_string(),
        split,
        metrics: metrics.clone(),
    };
    write(&dir.join(METRICS_FILE), serde_json::to_string_pretty(&rec).expect("serializes"))?;
    let method = format!("graphpose ({split})");
    write(
        &dir.join(TABLE1_FILE),
        format!("{}\n{}\n", MetricsReport::table1_header(), metrics.table1_row(&method)),
    )?;
    write(&dir.join(PER_JOINT_FILE), metrics.per_joint_csv())
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    /// Subdirectory name.
    pub key: String,
    pub aggregator: Aggregator,
    pub head: HeadKind,
    pub blocks: usize,
    /// Row label in the aggregator table, if the variant appears there.
    pub table3: Option<String>,
    /// Row label in the head table, if the variant appears there.
    pub table4: Option<String>,
}

impl AblationVariant {
    fn new(key: &str, aggregator: Aggregator, head: HeadKind, blocks: usize, t3: Option<&str>, t4: Option<&str>) -> Self {
        Self {
            key: key.into(),
            aggregator,
            head,
            blocks,
            table3: t3.map(Into::into),
            table4: t4.map(Into::into),
        }
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.model.aggregator = self.aggregator;
        cfg.model.head = self.head;
        cfg.model.blocks = self.blocks;
        cfg
    }
}

pub const TABLE3_ROWS: [&str; 3] = ["GAP", "PJ-MHSA", "LTSA (ours)"];
pub const TABLE4_ROWS: [&str; 4] = [
    "MLP regression head",
    "Graph-based regression head (N = 2)",
    "Graph-based regression head (N = 4)",
    "Graph-based regression head (N = 6)",
];

/// Aggregators under the N = 4 graph head, and heads under LTSA. The
/// LTSA/N = 4 cell is shared, so there are six unique runs.
pub fn ablation_grid() -> Vec<AblationVariant> {
    use Aggregator::*;
    use HeadKind::*;
    vec![
        AblationVariant::new("gap_graph4", Gap, Graph, 4, Some(TABLE3_ROWS[0]), None),
        AblationVariant::new("pjmhsa_graph4", PjMhsa, Graph, 4, Some(TABLE3_ROWS[1]), None),
        AblationVariant::new("ltsa_graph4", Ltsa, Graph, 4, Some(TABLE3_ROWS[2]), Some(TABLE4_ROWS[2])),
        // the MLP head is sized against the N = 4 graph head
        AblationVariant::new("ltsa_mlp", Ltsa, Mlp, 4, None, Some(TABLE4_ROWS[0])),
        AblationVariant::new("ltsa_graph2", Ltsa, Graph, 2, None, Some(TABLE4_ROWS[1])),
        AblationVariant::new("ltsa_graph6", Ltsa, Graph, 6, None, Some(TABLE4_ROWS[3])),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub config_digest: String,
    pub model_digest: String,
    pub param_count: usize,
    pub head_param_count: usize,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub init_mpjpe_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub base_config_digest: String,
    pub rows: Vec<AblationRow>,
}

impl AblationOutcome {
    fn table(&self, rows: &[&str], pick: impl Fn(&AblationVariant) -> Option<&String>) -> String {
        let mut out = String::from("Method,MPJPE,PA-MPJPE\n");
        for label in rows {
            if let Some(r) = self.rows.iter().find(|r| pick(&r.variant).is_some_and(|l| l == label)) {
                out.push_str(&format!("{label},{:.1},{:.1}\n", r.mpjpe_mm, r.pa_mpjpe_mm));
            }
        }
        out
    }

    /// Aggregator comparison, rows in [`TABLE3_ROWS`] order.
    pub fn table3_csv(&self) -> String {
        self.table(&TABLE3_ROWS, |v| v.table3.as_ref())
    }

    /// Head comparison, rows in [`TABLE4_ROWS`] order.
    pub fn table4_csv(&self) -> String {
        self.table(&TABLE4_ROWS, |v| v.table4.as_ref())
    }
}

/// Trains every grid cell on `index`, each into `out_dir/<key>`, with up to
/// `parallel` runs at once. Tables go to `out_dir`.
pub fn run_ablation(
    base: &RunConfig,
    index: &DatasetIndex,
    out_dir: &Path,
    parallel: usize,
    verbose: bool,
) -> Result<AblationOutcome, ExperimentError> {
    base.validate()?;
    check_compatible(base, index)?;
    let grid = ablation_grid();
    let results: Mutex<Vec<Option<Result<AblationRow, ExperimentError>>>> =
        Mutex::new((0..grid.len()).map(|_| None).collect());
    let next = Mutex::new(0usize);
    let run_one = |v: &AblationVariant| -> Result<AblationRow, ExperimentError> {
        let cfg = v.apply(base);
        let dir: PathBuf = out_dir.join(&v.key);
        if verbose {
            eprintln!("ablation: {} ({})", v.key, cfg.digest());
        }
        let s = run_experiment(&cfg, index, Some(&dir), verbose)?;
        Ok(AblationRow {
            variant: v.clone(),
            config_digest: s.config_digest,
            model_digest: s.model_digest,
            param_count: s.param_count,
            head_param_count: s.head_param_count,
            mpjpe_mm: s.metrics.mpjpe_mm,
            pa_mpjpe_mm: s.metrics.pa_mpjpe_mm,
            init_mpjpe_mm: s.init.mpjpe_mm,
        })
    };
    let worker = || loop {
        let i = {
            let mut n = next.lock().expect("queue lock");
            let i = *n;
            *n += 1;
            i
        };
        if i >= grid.len() {
            break;
        }
        let r = run_one(&grid[i]);
        let failed = r.is_err();
        results.lock().expect("results lock")[i] = Some(r);
        if failed {
            // let the other workers drain without starting new runs
            *next.lock().expect("queue lock") = grid.len();
        }
    };
    let threads = parallel.clamp(1, grid.len());
    if threads == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(worker);
            }
        });
    }
    let mut rows = Vec::with_capacity(grid.len());
    for r in results.into_inner().expect("results lock") {
        match r {
            Some(Ok(row)) => rows.push(row),
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    let outcome = AblationOutcome {
        base_config_digest: base.digest(),
        rows,
    };
    write(&out_dir.join(TABLE3_FILE), outcome.table3_csv())?;
    write(&out_dir.join(TABLE4_FILE), outcome.table4_csv())?;
    write(
        &out_dir.join(ABLATION_FILE),
        serde_json::to_string_pretty(&outcome).expect("serializes"),
    )?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn grid_has_six_unique_cells() {
        let grid = ablation_grid();
        assert_eq!(grid.len(), 6);
        let t3 = grid.iter().filter(|v| v.table3.is_some()).count();
        let t4 = grid.iter().filter(|v| v.table4.is_some()).count();
        assert_eq!((t3, t4), (3, 4));
        let base = RunConfig::desk();
        let digests: BTreeSet<String> = grid.iter().map(|v| v.apply(&base).digest()).collect();
        assert_eq!(digests.len(), 6);
    }
}
