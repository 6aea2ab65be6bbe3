use std::fs;
use std::path::Path;

use anyhow::Context;
use graphpose_core::config::RunConfig;
use graphpose_core::data::{
    ingest_canonical, ingest_raw, load_mmfi, make_split, synth_dataset, SplitStrategy, MANIFEST_FILE,
};
use graphpose_core::experiment::{
    run_ablation, run_experiment, write_metrics, ConfigRecord, CONFIG_FILE,
};
use graphpose_core::model::{load_checkpoint, ModelConfig};
use graphpose_core::training::{evaluate, grad_check_network};

use crate::{CliError, CliResult, ConfigArgs};

pub const SEED_ENV: &str = "GPFI_SEED";
pub const SYNTH_CONFIG_FILE: &str = "synth_config.json";

fn internal(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Internal(e.into())
}

/// File or preset, then `GPFI_SEED`, then flags.
pub fn resolve_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::usage(e.to_string()))?,
        None if args.preset == "desk" => RunConfig::desk(),
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        let seed = v
            .trim()
            .parse::<u64>()
            .map_err(|_| CliError::usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        cfg.training.seed = seed;
    }
    if let Some(s) = args.seed {
        cfg.training.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.training.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.training.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.training.lr0 = lr;
    }
    if let Some(s) = args.split {
        cfg.data.split.strategy = s;
    }
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(cfg)
}

fn is_empty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_none()).unwrap_or(false)
}

/// Refuses a non-empty `out` unless `force`.
pub fn guard_output(out: &Path, force: bool) -> CliResult {
    if out.exists() && !out.is_dir() {
        return Err(CliError::usage(format!("{} exists and is not a directory", out.display())));
    }
    if out.is_dir() && !is_empty_dir(out) && !force {
        return Err(CliError::usage(format!(
            "{} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(internal)
}

/// Corpus output: with `force`, a previous corpus is removed first so stale
/// sample files cannot leak into the new index. Other content is left alone.
fn guard_corpus_output(out: &Path, force: bool) -> CliResult {
    if force && out.is_dir() && !is_empty_dir(out) {
        if !out.join(MANIFEST_FILE).is_file() {
            return Err(CliError::usage(format!(
                "{} is not empty and holds no corpus manifest; refusing to replace it",
                out.display()
            )));
        }
        fs::remove_dir_all(out)
            .with_context(|| format!("removing {}", out.display()))
            .map_err(internal)?;
    }
    guard_output(out, force)
}

pub fn synth(args: &ConfigArgs, out: &Path, n_samples: Option<usize>, sigma: Option<f64>, force: bool) -> CliResult {
    let mut cfg = resolve_config(args)?;
    if let Some(n) = n_samples {
        cfg.data.synth.n_samples = n;
    }
    if let Some(s) = sigma {
        cfg.data.synth.noise_sigma = s;
    }
    if let Some(seed) = args.seed.or_else(|| std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok())) {
        cfg.data.synth.seed = seed;
    }
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    guard_corpus_output(out, force)?;
    let index = synth_dataset(&cfg.data.synth, out).map_err(CliError::from)?;
    let rec = serde_json::json!({ "config_digest": cfg.digest(), "synth": cfg.data.synth });
    fs::write(out.join(SYNTH_CONFIG_FILE), serde_json::to_string_pretty(&rec).expect("serializes"))
        .map_err(internal)?;
    println!("{} samples written to {}", index.len(), out.display());
    Ok(())
}

pub fn ingest(src: &Path, out: &Path, raw: bool, force: bool) -> CliResult {
    if !src.is_dir() {
        return Err(CliError::usage(format!("{} is not a directory", src.display())));
    }
    guard_corpus_output(out, force)?;
    let result = if raw { ingest_raw(src, out) } else { ingest_canonical(src, out) };
    let index = result.map_err(CliError::from)?;
    println!(
        "{} samples, {} subjects, {} environments written to {}",
        index.len(),
        index.counts_by_subject().len(),
        index.counts_by_environment().len(),
        out.display()
    );
    Ok(())
}

fn data_root(cfg: &mut RunConfig, data: Option<&Path>) -> CliResult<std::path::PathBuf> {
    if let Some(d) = data {
        cfg.data.root = Some(d.to_path_buf());
    }
    cfg.data
        .root
        .clone()
        .ok_or_else(|| CliError::usage("no corpus given: pass --data or set data.root"))
}

fn open_corpus(root: &Path) -> CliResult<graphpose_core::data::DatasetIndex> {
    load_mmfi(root).map_err(CliError::from)
}

pub fn train(args: &ConfigArgs, data: Option<&Path>, out: &Path, force: bool, verbose: bool) -> CliResult {
    let mut cfg = resolve_config(args)?;
    let root = data_root(&mut cfg, data)?;
    let index = open_corpus(&root)?;
    // fail on an impossible split before touching the output directory
    make_split(&index, &cfg.data.split).map_err(|e| CliError::usage(e.to_string()))?;
    guard_output(out, force)?;
    let s = run_experiment(&cfg, &index, Some(out), verbose)?;
    println!(
        "split {}: {} train / {} test, {} parameters",
        cfg.data.split.strategy, s.n_train, s.n_test, s.param_count
    );
    println!(
        "MPJPE {:.1} mm (untrained {:.1} mm), PA-MPJPE {:.1} mm, PCK@50 {:.1}%",
        s.metrics.mpjpe_mm,
        s.init.mpjpe_mm,
        s.metrics.pa_mpjpe_mm,
        s.metrics.pck.get(&50).copied().unwrap_or(f64::NAN)
    );
    println!("config digest {}", s.config_digest);
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &Path, split: Option<SplitStrategy>, out: Option<&Path>, force: bool) -> CliResult {
    if !checkpoint.is_file() {
        return Err(CliError::usage(format!("checkpoint {} not found", checkpoint.display())));
    }
    let net = load_checkpoint::<f32>(checkpoint, None, force).map_err(|e| CliError::usage(e.to_string()))?;
    // split and digest come from the run that produced the checkpoint
    let run_cfg = checkpoint
        .parent()
        .map(|d| d.join(CONFIG_FILE))
        .filter(|p| p.is_file())
        .map(|p| -> CliResult<ConfigRecord> {
            let text = fs::read_to_string(&p).map_err(internal)?;
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))
        })
        .transpose()?;
    let mut spec = run_cfg.as_ref().map(|r| r.config.data.split.clone()).unwrap_or_default();
    if let Some(s) = split {
        spec.strategy = s;
    }
    let digest = run_cfg.as_ref().map_or_else(|| "unknown".to_string(), |r| r.config_digest.clone());
    let index = open_corpus(data)?;
    let probe = RunConfig {
        model: net.config().clone(),
        ..RunConfig::default()
    };
    graphpose_core::experiment::check_compatible(&probe, &index)?;
    let (_, test) = make_split(&index, &spec).map_err(|e| CliError::usage(e.to_string()))?;
    let report = evaluate(&net, &test).map_err(CliError::from)?;
    let ckpt_name = checkpoint.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    if let Some(dir) = out {
        guard_output(dir, force)?;
        write_metrics(dir, &digest, &net.digest(), &ckpt_name, spec.strategy, &report)?;
    }
    let rec = graphpose_core::experiment::MetricsRecord {
        config_digest: digest,
        model_digest: net.digest(),
        checkpoint: ckpt_name,
        split: spec.strategy,
        metrics: report,
    };
    println!("{}", serde_json::to_string_pretty(&rec).expect("serializes"));
    Ok(())
}

pub fn ablate(args: &ConfigArgs, data: Option<&Path>, out: &Path, parallel: usize, force: bool, verbose: bool) -> CliResult {
    let mut cfg = resolve_config(args)?;
    let root = data_root(&mut cfg, data)?;
    let index = open_corpus(&root)?;
    make_split(&index, &cfg.data.split).map_err(|e| CliError::usage(e.to_string()))?;
    if parallel == 0 {
        return Err(CliError::usage("--parallel must be at least 1"));
    }
    guard_output(out, force)?;
    let outcome = run_ablation(&cfg, &index, out, parallel, verbose)?;
    println!("Table 3 (aggregator, graph head N = 4)");
    print!("{}", outcome.table3_csv());
    println!("Table 4 (head, LTSA aggregator)");
    print!("{}", outcome.table4_csv());
    println!("{} runs in {}", outcome.rows.len(), out.display());
    Ok(())
}

pub fn gradcheck(seed: u64, h: f64, tolerance: f64) -> CliResult {
    if !(h > 0.0 && h.is_finite()) {
        return Err(CliError::usage("--h must be positive"));
    }
    let r = grad_check_network(ModelConfig::tiny(), seed, h).map_err(internal)?;
    for (name, err) in &r.per_tensor {
        println!("{name:<40} {err:.3e}");
    }
    let worst = r.worst.as_ref().map_or(String::new(), |(n, k)| format!(" at {n}[{k}]"));
    println!(
        "max relative error {:.3e}{worst} over {} entries",
        r.max_rel_error, r.entries_checked
    );
    if r.max_rel_error < tolerance {
        Ok(())
    } else {
        Err(CliError::Internal(anyhow::anyhow!(
            "gradient audit failed: {:.3e} >= {tolerance:.0e}",
            r.max_rel_error
        )))
    }
}
