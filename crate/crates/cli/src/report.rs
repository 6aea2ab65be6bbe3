//! Static SVG plots and a plain-text summary of one run directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use graphpose_core::experiment::{ConfigRecord, MetricsRecord, CONFIG_FILE, METRICS_FILE};
use graphpose_core::metrics::MetricsReport;
use graphpose_core::training::{TrainHistory, HISTORY_FILE};

use crate::commands::guard_output;
use crate::{CliError, CliResult};

pub const REPORT_DIR: &str = "report";
pub const PLOT_FILES: [&str; 4] = ["loss.svg", "lr.svg", "per_joint.svg", "pck.svg"];
pub const SUMMARY_FILE: &str = "summary.txt";

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 56.0;

struct Series<'a> {
    name: &'a str,
    points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n{body}</svg>\n",
        W / 2.0,
        esc(title)
    )
}

fn no_data(title: &str, why: &str) -> String {
    frame(
        title,
        &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"#888\">no data: {}</text>\n",
            W / 2.0,
            H / 2.0,
            esc(why)
        ),
    )
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let d = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - d, hi + d);
    }
    (lo, hi)
}

fn axes(x: (f64, f64), y: (f64, f64), xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let (x0, x1, y0, y1) = (PAD, W - PAD / 2.0, H - PAD, PAD / 1.5);
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let ty = y0 + (y1 - y0) * f;
        let tx = x0 + (x1 - x0) * f;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3e}</text>",
            x0 - 4.0,
            ty + 4.0,
            y.0 + (y.1 - y.0) * f
        );
        let _ = writeln!(
            s,
            "<text x=\"{tx}\" y=\"{}\" text-anchor=\"middle\">{:.4}</text>",
            y0 + 14.0,
            x.0 + (x.1 - x.0) * f
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", (x0 + x1) / 2.0, H - 12.0, esc(xlabel));
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">{}</text>",
        H / 2.0,
        H / 2.0,
        esc(ylabel)
    );
    s
}

fn project(v: f64, (lo, hi): (f64, f64), a: f64, b: f64) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let xr = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yr = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut body = axes(xr, yr, xlabel, ylabel);
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| {
                format!(
                    "{:.2},{:.2}",
                    project(x, xr, PAD, W - PAD / 2.0),
                    project(y, yr, H - PAD, PAD / 1.5)
                )
            })
            .collect();
        let _ = writeln!(
            body,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        for p in &pts {
            let (cx, cy) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(body, "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"2\" fill=\"{color}\"/>");
        }
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            W - PAD * 2.5,
            PAD / 1.5 + 14.0 * (k as f64 + 1.0),
            esc(s.name)
        );
    }
    frame(title, &body)
}

fn bar_chart(title: &str, ylabel: &str, bars: &[(String, f64)]) -> String {
    let yr = (0.0, range(bars.iter().map(|b| b.1)).1.max(1e-9));
    let (x0, x1, y0, y1) = (PAD, W - PAD / 2.0, H - PAD - 30.0, PAD / 1.5);
    let mut body = String::new();
    let _ = writeln!(body, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
    let _ = writeln!(body, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.1}</text>",
            x0 - 4.0,
            y0 + (y1 - y0) * f + 4.0,
            yr.1 * f
        );
    }
    let slot = (x1 - x0) / bars.len().max(1) as f64;
    for (i, (name, v)) in bars.iter().enumerate() {
        let top = project(*v, yr, y0, y1);
        let x = x0 + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            body,
            "<rect x=\"{x:.2}\" y=\"{top:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
            slot * 0.7,
            (y0 - top).max(0.0),
            COLORS[0]
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(
            body,
            "<text x=\"{cx:.2}\" y=\"{}\" transform=\"rotate(-45 {cx:.2} {})\" text-anchor=\"end\">{}</text>",
            y0 + 12.0,
            y0 + 12.0,
            esc(name)
        );
    }
    let _ = writeln!(
        body,
        "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">{}</text>",
        H / 2.0,
        H / 2.0,
        esc(ylabel)
    );
    frame(title, &body)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Option<T>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::Internal(e.into()))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// Renders `run/report/`. Refuses run directories whose artifacts carry
/// different config digests.
pub fn report(run: &Path, force: bool) -> CliResult {
    if !run.is_dir() {
        return Err(CliError::usage(format!("{} is not a directory", run.display())));
    }
    let config: Option<ConfigRecord> = read_json(&run.join(CONFIG_FILE))?;
    let metrics_rec: Option<MetricsRecord> = read_json(&run.join(METRICS_FILE))?;
    let history_path = run.join(HISTORY_FILE);
    let history = if history_path.is_file() {
        Some(TrainHistory::read_jsonl(&history_path).map_err(|e| CliError::usage(e.to_string()))?)
    } else {
        None
    };
    if config.is_none() && metrics_rec.is_none() && history.is_none() {
        return Err(CliError::usage(format!(
            "{} holds no {CONFIG_FILE}, {HISTORY_FILE} or {METRICS_FILE}",
            run.display()
        )));
    }

    let mut digests = BTreeSet::new();
    if let Some(c) = &config {
        digests.insert(("config", c.config_digest.clone()));
    }
    if let Some(d) = history.as_ref().and_then(|h| h.recipe()).and_then(|r| r.run_digest.clone()) {
        digests.insert(("history", d));
    }
    if let Some(m) = &metrics_rec {
        digests.insert(("metrics", m.config_digest.clone()));
    }
    let distinct: BTreeSet<&String> = digests.iter().map(|(_, d)| d).collect();
    if distinct.len() > 1 {
        let list: Vec<String> = digests.iter().map(|(w, d)| format!("{w}={}", &d[..d.len().min(12)])).collect();
        return Err(CliError::usage(format!("mixed config digests in {}: {}", run.display(), list.join(", "))));
    }

    let mut warnings = Vec::new();
    let out = run.join(REPORT_DIR);
    guard_output(&out, force)?;

    let epochs: Vec<_> = history.as_ref().map(|h| h.epochs().cloned().collect()).unwrap_or_default();
    if history.is_none() {
        warnings.push(format!("{HISTORY_FILE} missing: loss and learning-rate plots are empty"));
    } else if epochs.is_empty() {
        warnings.push("history has no epoch records".to_string());
    }
    let loss = if epochs.is_empty() {
        no_data("Training loss", "no epochs recorded")
    } else {
        let mut series = vec![Series {
            name: "train MSE (m^2)",
            points: epochs.iter().map(|e| (e.epoch as f64, e.train_loss)).collect(),
        }];
        // validation MPJPE is drawn on the same axes in metres so both fit
        let val: Vec<(f64, f64)> = epochs
            .iter()
            .filter_map(|e| e.val.as_ref().map(|v| (e.epoch as f64, (v.mpjpe_mm / 1000.0).powi(2))))
            .collect();
        if !val.is_empty() {
            series.push(Series {
                name: "val MPJPE^2 (m^2)",
                points: val,
            });
        }
        line_chart("Training loss", "epoch", "loss", &series)
    };
    let lr = if epochs.is_empty() {
        no_data("Learning rate", "no epochs recorded")
    } else {
        let mut pts: Vec<(f64, f64)> = epochs.iter().map(|e| ((e.epoch - 1) as f64, e.lr_start)).collect();
        let last = epochs.last().expect("non-empty");
        pts.push((last.epoch as f64, last.lr_end));
        line_chart("Learning rate", "epoch", "lr", &[Series { name: "lr", points: pts }])
    };

    let final_metrics: Option<MetricsReport> = match &metrics_rec {
        Some(m) => Some(m.metrics.clone()),
        None => {
            let v = history.as_ref().and_then(|h| h.last_val().cloned());
            warnings.push(match v {
                Some(_) => format!("{METRICS_FILE} missing: using the last validation snapshot in {HISTORY_FILE}"),
                None => format!("{METRICS_FILE} missing and no validation snapshot: per-joint and PCK plots are empty"),
            });
            v
        }
    };
    let (per_joint, pck) = match &final_metrics {
        Some(m) => (
            bar_chart(
                "Per-joint MPJPE",
                "MPJPE (mm)",
                &m.joint_names.iter().cloned().zip(m.per_joint_mpjpe_mm.iter().copied()).collect::<Vec<_>>(),
            ),
            line_chart(
                "PCK vs threshold",
                "k (% of torso length)",
                "PCK (%)",
                &[Series {
                    name: "PCK",
                    points: m.pck.iter().map(|(&k, &v)| (k as f64, v)).collect(),
                }],
            ),
        ),
        None => (
            no_data("Per-joint MPJPE", "no evaluation"),
            no_data("PCK vs threshold", "no evaluation"),
        ),
    };
    for (name, svg) in PLOT_FILES.iter().zip([loss, lr, per_joint, pck]) {
        fs::write(out.join(name), svg).map_err(|e| CliError::Internal(e.into()))?;
    }

    let mut s = String::new();
    let digest = distinct.iter().next().map_or("unknown", |d| d.as_str());
    let _ = writeln!(s, "run: {}", run.display());
    let _ = writeln!(s, "config_digest: {digest}");
    if let Some(r) = history.as_ref().and_then(|h| h.recipe()) {
        let _ = writeln!(s, "model_digest: {}", r.model_digest);
        let _ = writeln!(
            s,
            "recipe: {} lr0={} weight_decay={} epochs={} batch_size={} schedule={}",
            r.optimizer, r.lr0, r.weight_decay, r.epochs, r.batch_size, r.schedule
        );
        let _ = writeln!(s, "params: {}", r.param_count);
        if let Some(v) = &r.init_val {
            let _ = writeln!(s, "init_mpjpe_mm: {}", v.mpjpe_mm);
        }
    }
    let _ = writeln!(s, "epochs_recorded: {}", epochs.len());
    if let Some(e) = epochs.last() {
        let _ = writeln!(s, "final_train_loss: {}", e.train_loss);
        let _ = writeln!(s, "final_lr: {}", e.lr_end);
    }
    if let Some(m) = &final_metrics {
        let _ = writeln!(s, "mpjpe_mm: {}", m.mpjpe_mm);
        let _ = writeln!(s, "pa_mpjpe_mm: {}", m.pa_mpjpe_mm);
        for (k, v) in &m.pck {
            let _ = writeln!(s, "pck@{k}: {v}");
        }
        for (name, v) in m.joint_names.iter().zip(&m.per_joint_mpjpe_mm) {
            let _ = writeln!(s, "joint {name}: {v}");
        }
    }
    for w in &warnings {
        let _ = writeln!(s, "warning: {w}");
        eprintln!("warning: {w}");
    }
    fs::write(out.join(SUMMARY_FILE), &s).map_err(|e| CliError::Internal(e.into()))?;
    print!("{s}");
    Ok(())
}
