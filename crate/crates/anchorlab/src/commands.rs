//! The five subcommands as plain functions. Each returns an [`Outcome`]
//! holding the exit code, a JSON report and a human-readable rendering.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anchorlab_core::analysis::{self, CalibrationReport, NormStats};
use anchorlab_core::datasets::LabeledDataset;
use anchorlab_core::losses::LossSpec;
use anchorlab_core::prototypes::{self, ProtoGenConfig};
use anchorlab_core::theory::{self, VerifyConfig, VerifyReport};
use anchorlab_core::trainer::{self, EpochMetrics, GroupedAccuracy, TrainState};
use anchorlab_core::Matrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{self, AnalysisToggles, RunConfig, SynthRecipe};
use crate::error::{Result, EXIT_OK, EXIT_VERIFY};
use crate::{formats, parallel};

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit: i32,
    pub report: Value,
    pub text: String,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtoMode {
    ClosedForm,
    Optimized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtogenArgs {
    pub k: usize,
    pub d: usize,
    pub mode: ProtoMode,
    pub seed: u64,
    pub out: PathBuf,
    pub stem: String,
    pub epochs: Option<u64>,
    pub tolerance: Option<f64>,
}

pub fn cmd_protogen(a: &ProtogenArgs) -> Result<Outcome> {
    let (set, tol, mode) = match a.mode {
        ProtoMode::ClosedForm => (
            prototypes::generate_closed_form(a.k, a.d)?,
            theory::CLOSED_FORM_TOL,
            "closed_form",
        ),
        ProtoMode::Optimized => {
            let mut cfg = ProtoGenConfig {
                seed: a.seed,
                ..ProtoGenConfig::default()
            };
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(t) = a.tolerance {
                cfg.tolerance = t;
            }
            let tol = cfg.tolerance;
            (prototypes::generate_optimized(a.k, a.d, &cfg)?, tol, "optimized")
        }
    };
    let rep = prototypes::verify_equiangular(&set, tol);
    let (json_path, bin_path) = formats::write_prototypes(&a.out, &a.stem, &set)?;
    let file_name = |p: &Path| p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let report = json!({
        "kind": "protogen_report",
        "mode": mode,
        "files": [file_name(&json_path), file_name(&bin_path)],
        "verification": to_value(&rep),
    });
    let text = format!(
        "{} k={} d={} mode={mode}\n  max_gram_dev  {:e}\n  max_norm_dev  {:e}\n  min_angle_deg {}\n  tolerance     {:e}\n  wrote {}\n",
        if rep.pass { "PASS" } else { "FAIL" },
        a.k,
        a.d,
        rep.max_gram_dev,
        rep.max_norm_dev,
        rep.min_angle_deg,
        tol,
        json_path.display()
    );
    Ok(Outcome {
        exit: if rep.pass { EXIT_OK } else { EXIT_VERIFY },
        report,
        text,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthArgs {
    pub recipe: SynthRecipe,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes `train/` and `eval/` bundles plus the resolved `recipe.json`.
pub fn cmd_synth(a: &SynthArgs) -> Result<Outcome> {
    let recipe = a.recipe.resolve(a.seed);
    let (train, eval) = recipe.build()?;
    formats::write_bundle(&a.out.join("train"), &train)?;
    formats::write_bundle(&a.out.join("eval"), &eval)?;
    formats::write_json(&a.out.join("recipe.json"), &recipe)?;
    let report = json!({
        "kind": "synth_report",
        "recipe": to_value(&recipe),
        "train": { "n": train.len(), "class_counts": train.class_counts(), "clean_class_counts": train.clean_class_counts() },
        "eval": { "n": eval.len(), "class_counts": eval.class_counts() },
    });
    let text = format!(
        "train n={} counts={:?}\neval  n={} counts={:?}\nwrote {}\n",
        train.len(),
        train.class_counts(),
        eval.len(),
        eval.class_counts(),
        a.out.display()
    );
    Ok(Outcome {
        exit: EXIT_OK,
        report,
        text,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginSummary {
    pub min_margin: f64,
    pub mean_margin: f64,
    pub per_class: Vec<Option<f64>>,
    /// `s k/(k-1)`, the largest margin unit features can reach against a
    /// simplex frame.
    pub ceiling: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub kind: &'static str,
    pub n: usize,
    pub accuracy: f64,
    pub min_prototype_angle_deg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margins: Option<MarginSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norms: Option<NormStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grouped: Option<GroupedAccuracy>,
}

/// Analysis of `state` on `data`. Margins use the observed labels, accuracy
/// and calibration the clean ones.
pub fn analyze_state(
    state: &TrainState,
    loss: &LossSpec,
    data: &LabeledDataset,
    train_counts: Option<&[usize]>,
    toggles: &AnalysisToggles,
) -> Result<(AnalysisReport, Vec<f64>)> {
    let w = state.classifier();
    let z = trainer::extract_features(state, data.features())?;
    let pred = trainer::predict(state, data.features(), loss)?;
    let truth = data.true_labels();
    let hits = pred.classes.iter().zip(truth).filter(|(p, t)| p == t).count();
    let k = w.rows() as f64;
    let mut per_sample = Vec::new();
    let margins = if toggles.margins {
        let zm = if loss.feature_normalize { unit_rows(&z)? } else { z.clone() };
        let rep = analysis::sample_margins(&zm, data.labels(), w, loss.scale)?;
        let mean = rep.per_sample.iter().sum::<f64>() / rep.per_sample.len() as f64;
        per_sample = rep.per_sample;
        Some(MarginSummary {
            min_margin: rep.min_margin,
            mean_margin: mean,
            per_class: rep.per_class,
            ceiling: loss.scale * k / (k - 1.0),
        })
    } else {
        None
    };
    let calibration = if toggles.calibration {
        Some(analysis::ece(&pred.probabilities, truth, toggles.ece_bins)?)
    } else {
        None
    };
    let norms = toggles.norms.then(|| analysis::norm_stats(w, &z, toggles.norm_bins, None));
    let grouped = match (toggles.grouped, train_counts) {
        (true, Some(counts)) => Some(trainer::evaluate_grouped(state, data, loss, counts, toggles.thresholds)?),
        _ => None,
    };
    let report = AnalysisReport {
        kind: "analysis_report",
        n: data.len(),
        accuracy: hits as f64 / data.len().max(1) as f64,
        min_prototype_angle_deg: analysis::min_prototype_angle(w)?,
        margins,
        calibration,
        norms,
        grouped,
    };
    Ok((report, per_sample))
}

fn unit_rows(z: &Matrix) -> Result<Matrix> {
    let mut out = z.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = anchorlab_core::matrix::norm(row);
        if n == 0.0 {
            return Err(anchorlab_core::Error::Normalization { row: r }.into());
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Writes `analysis.json` and the tidy CSV tables beside it.
pub fn write_analysis(dir: &Path, report: &AnalysisReport, margins: &[f64], labels: &[usize]) -> Result<()> {
    formats::write_json(&dir.join("analysis.json"), report)?;
    if let Some(cal) = &report.calibration {
        let rows = cal.bins.iter().enumerate().map(|(i, b)| {
            [
                i.to_string(),
                b.lower.to_string(),
                b.upper.to_string(),
                b.count.to_string(),
                formats::opt_cell(b.confidence_mean),
                formats::opt_cell(b.accuracy),
            ]
        });
        let csv = formats::tidy_csv(["bin", "lower", "upper", "count", "confidence_mean", "accuracy"], rows);
        formats::write_bytes(&dir.join("calibration_bins.csv"), &csv)?;
    }
    if let Some(norms) = &report.norms {
        let h = &norms.feature_norm_histogram;
        let rows = h
            .counts
            .iter()
            .enumerate()
            .map(|(i, c)| [i.to_string(), h.edges[i].to_string(), h.edges[i + 1].to_string(), c.to_string()]);
        let csv = formats::tidy_csv(["bin", "lower", "upper", "count"], rows);
        formats::write_bytes(&dir.join("feature_norm_histogram.csv"), &csv)?;
    }
    if !margins.is_empty() {
        let rows = margins
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (m, y))| [i.to_string(), y.to_string(), m.to_string()]);
        formats::write_bytes(&dir.join("margins.csv"), &formats::tidy_csv(["sample", "label", "margin"], rows))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArgs {
    pub config: RunConfig,
    /// Directory relative dataset and prototype paths are resolved against.
    pub base: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub kind: &'static str,
    pub name: String,
    pub epochs: u64,
    pub architecture: String,
    pub train_class_counts: Vec<usize>,
    pub final_metrics: Option<EpochMetrics>,
    pub peak_eval_acc: Option<f64>,
    pub analysis: AnalysisReport,
}

/// Trains from a run config and writes `resolved_config.json`,
/// `metrics.csv`, the checkpoint, `summary.json` and the analysis tables on
/// the evaluation set. Anchored runs also write `prototypes.proto.*`.
pub fn cmd_train(a: &TrainArgs) -> Result<Outcome> {
    let prep = config::prepare(&a.config, a.base.as_deref())?;
    let state = trainer::init_model(&prep.model, prep.init_seed)?;
    let (state, history) = trainer::train(state, &prep.train, &prep.loss, &prep.optim, &prep.eval)?;
    let out = &a.out;
    formats::write_json(&out.join("resolved_config.json"), &prep.resolved)?;
    formats::write_bytes(&out.join("metrics.csv"), &formats::metrics_csv(prep.train.k(), &history))?;
    let counts = prep.train.class_counts();
    formats::write_checkpoint(out, &state, &prep.loss, prep.init_seed, &counts)?;
    if let Some(p) = &prep.prototypes {
        formats::write_prototypes(out, "prototypes", p)?;
    }
    let toggles = &prep.resolved.analysis;
    let (analysis, margins) = analyze_state(&state, &prep.loss, &prep.eval, Some(&counts), toggles)?;
    write_analysis(out, &analysis, &margins, prep.eval.labels())?;
    let summary = TrainSummary {
        kind: "train_summary",
        name: prep.resolved.name.clone(),
        epochs: history.len() as u64,
        architecture: architecture(&prep.model),
        train_class_counts: counts,
        final_metrics: history.last().cloned(),
        peak_eval_acc: history.iter().map(|m| m.eval_acc).reduce(f64::max),
        analysis,
    };
    formats::write_json(&out.join("summary.json"), &summary)?;
    let mut text = format!("{}: {} epochs, {}\n", summary.name, summary.epochs, summary.architecture);
    if let Some(m) = &summary.final_metrics {
        let _ = writeln!(
            text,
            "  train_loss {:.6}  train_acc {:.4}  eval_acc {:.4}  min_margin {:.6}",
            m.train_loss, m.train_acc, m.eval_acc, m.min_sample_margin
        );
    }
    let _ = writeln!(text, "  wrote {}", out.display());
    Ok(Outcome {
        exit: EXIT_OK,
        report: to_value(&summary),
        text,
    })
}

fn architecture(m: &trainer::ModelConfig) -> String {
    let mut widths = vec![m.input_dim.to_string()];
    widths.extend(m.hidden_dims.iter().map(|h| h.to_string()));
    widths.push(m.feature_dim.to_string());
    let head = if m.is_anchored() { "anchored" } else { "learnable" };
    format!("MLP {} ({:?}), {head} classifier", widths.join("-"), m.activation)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub toggles: AnalysisToggles,
    pub out: PathBuf,
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<Outcome> {
    let (state, header) = formats::read_checkpoint(&a.checkpoint)?;
    let data = formats::read_bundle(&a.data)?;
    if data.k() != state.config().k() || data.input_dim() != state.config().input_dim {
        return Err(anchorlab_core::Error::DimMismatch("dataset does not match the checkpoint model".into()).into());
    }
    let counts = (header.train_class_counts.len() == data.k()).then_some(header.train_class_counts.as_slice());
    let (report, margins) = analyze_state(&state, &header.loss, &data, counts, &a.toggles)?;
    write_analysis(&a.out, &report, &margins, data.labels())?;
    let mut text = format!("n={} accuracy {:.4}  min prototype angle {:.4} deg\n", report.n, report.accuracy, report.min_prototype_angle_deg);
    if let Some(m) = &report.margins {
        let _ = writeln!(text, "  min margin {:.6} (ceiling {:.6})", m.min_margin, m.ceiling);
    }
    if let Some(c) = &report.calibration {
        let _ = writeln!(text, "  ECE {:.6} over {} bins", c.ece, c.bin_count);
    }
    if let Some(n) = &report.norms {
        let _ = writeln!(text, "  mean feature norm {:.6}, mean prototype norm {:.6}", n.mean_feature_norm, n.mean_prototype_norm);
    }
    if let Some(g) = &report.grouped {
        let _ = writeln!(
            text,
            "  many {}  medium {}  few {}  (thresholds {} / {})",
            fmt_opt(g.many_acc),
            fmt_opt(g.medium_acc),
            fmt_opt(g.few_acc),
            g.thresholds.many_min,
            g.thresholds.few_max
        );
    }
    Ok(Outcome {
        exit: EXIT_OK,
        report: to_value(&report),
        text,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyArgs {
    pub config: VerifyConfig,
    pub prototypes: Vec<PathBuf>,
    pub threads: usize,
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<Outcome> {
    let extra = a
        .prototypes
        .iter()
        .map(|p| formats::read_prototypes(p))
        .collect::<Result<Vec<_>>>()?;
    let threads = a.threads;
    let estimator =
        move |spec: &LossSpec, w: &Matrix, b: f64, n: usize, seed: u64| parallel::empirical_lipschitz(spec, w, b, n, seed, threads);
    let rep = theory::run_suite_with(&a.config, &extra, &estimator);
    Ok(Outcome {
        exit: if rep.pass { EXIT_OK } else { EXIT_VERIFY },
        text: render_verify(&rep),
        report: json!({ "kind": "verify_report", "pass": rep.pass, "checks": to_value(&rep.checks) }),
    })
}

pub fn render_verify(rep: &VerifyReport) -> String {
    let mut s = String::new();
    let width = rep.checks.iter().map(|c| c.group.len()).max().unwrap_or(0);
    for c in &rep.checks {
        let _ = writeln!(
            s,
            "{}  {:<width$}  {}  (value {:e}, tolerance {:e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.group,
            c.name,
            c.value,
            c.tolerance
        );
    }
    let failed = rep.checks.iter().filter(|c| !c.pass).count();
    let _ = writeln!(s, "{} checks, {failed} failed", rep.checks.len());
    s
}

/// Loads a run config and remembers its directory for relative paths.
pub fn load_run_config(path: &Path) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::from_file(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}
