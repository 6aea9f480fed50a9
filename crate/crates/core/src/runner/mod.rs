//! Experiment orchestration: dataset generation, training, evaluation,
//! ablation matrices and diagnostics. Every artifact carries the config hash.

mod config;

pub use config::{RunConfig, DATA_KEYS};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::decode::{decode_detections, decode_peaks, extract_peaks, perfect_outputs, write_detections, Detection};
use crate::error::{Error, Result};
use crate::metrics::{csv_opt, iou_mse_by_quality, center_mrpe, EvalAccumulator, EvalReport};
use crate::model::{train_run, Checkpoint, EpochLog, HeadParams, Region, TrainOutcome};
use crate::scene::{generate_frames, load_frames, rasterize_features, save_frames, Frame};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const DATASET_META_FILE: &str = "dataset.json";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EVAL_CSV_FILE: &str = "eval.csv";
pub const EVAL_JSON_FILE: &str = "eval.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const DIAG_MRPE_FILE: &str = "diag_mrpe.csv";
pub const DIAG_MSE_FILE: &str = "diag_mse.csv";

/// Thresholds of the quality-split MSE sweep.
pub const MSE_SWEEP: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Sidecar describing a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config_hash: String,
    pub data_seed: u64,
    pub train_frames: usize,
    pub eval_frames: usize,
}

/// Execution options that do not affect results.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExecOptions {
    /// Disable all thread parallelism.
    pub serial: bool,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Train and eval frames of a configuration. Eval frame ids follow the
/// train ids, so the two sets never share a scene.
pub fn generate_dataset(cfg: &RunConfig) -> Result<(Vec<Frame>, Vec<Frame>)> {
    let scene = cfg.scene();
    scene.validate()?;
    let train = generate_frames(&scene, cfg.data_seed, 0, cfg.train_frames);
    let eval = generate_frames(&scene, cfg.data_seed, cfg.train_frames as u64, cfg.eval_frames);
    Ok((train, eval))
}

pub fn train_model(cfg: &RunConfig, frames: &[Frame], opts: ExecOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes = cfg.scene().num_classes();
    for f in frames {
        f.validate(classes)?;
    }
    train_run(frames, &cfg.grid, &cfg.feature_spec(), &cfg.train_config(!opts.serial), None)
}

/// Detections and the report of `params` on `frames`.
pub fn evaluate_model(
    cfg: &RunConfig,
    params: &HeadParams,
    frames: &[Frame],
    opts: ExecOptions,
) -> Result<(EvalReport, Vec<Vec<Detection>>)> {
    if params.shape != cfg.head_shape() {
        return Err(Error::shape(
            "checkpoint head",
            format!("{:?}", cfg.head_shape()),
            format!("{:?}", params.shape),
        ));
    }
    let grid = cfg.grid;
    let spec = cfg.feature_spec();
    let dcfg = cfg.decode_config();
    let run = |f: &Frame| -> Result<(Vec<Detection>, crate::tensor::Tensor3)> {
        let (x, _) = rasterize_features(f, &grid, &spec)?;
        let dense = params.forward_dense(&x)?;
        let conf = dense.conf.clone();
        let peaks = extract_peaks(&conf, dcfg.min_conf);
        let region = Region::sparse(peaks.iter().map(|p| grid.flat(p.pixel)).collect());
        let (out, _) = params.forward_sparse(&x, dense, &region);
        Ok((decode_peaks(&out, &peaks, &grid, &dcfg), conf))
    };
    let results: Vec<Result<(Vec<Detection>, crate::tensor::Tensor3)>> = if opts.serial {
        frames.iter().map(run).collect()
    } else {
        frames.par_iter().map(run).collect()
    };
    let mut acc = EvalAccumulator::new();
    for (f, r) in frames.iter().zip(results) {
        let (dets, conf) = r?;
        acc.push(f.clone(), dets, &conf, &grid);
    }
    let report = acc.finish(&grid, &cfg.class_names(), &cfg.metrics_config(), &cfg.hash());
    Ok((report, acc.dets))
}

/// Outputs that reproduce the ground truth, decoded and evaluated.
pub fn evaluate_oracle(cfg: &RunConfig, frames: &[Frame]) -> (EvalReport, Vec<Vec<Detection>>) {
    let grid = cfg.grid;
    let classes = cfg.scene().num_classes();
    let mut acc = EvalAccumulator::new();
    for f in frames {
        let out = perfect_outputs(f, &grid, classes);
        let dets = decode_detections(&out, &grid, &cfg.decode_config());
        acc.push(f.clone(), dets, &out.conf, &grid);
    }
    let report = acc.finish(&grid, &cfg.class_names(), &cfg.metrics_config(), &cfg.hash());
    (report, acc.dets)
}

pub fn train_log_csv(logs: &[EpochLog], config_hash: &str) -> String {
    let mut s = String::from(
        "config_hash,epoch,phase,loss_total,loss_hm,loss_reg,loss_obj,loss_iou,ema_center_iou\n",
    );
    for l in logs {
        let _ = writeln!(
            s,
            "{config_hash},{},{},{},{},{},{},{},{}",
            l.epoch, l.phase, l.loss_total, l.loss_hm, l.loss_reg, l.loss_obj, l.loss_iou, l.ema_center_iou
        );
    }
    s
}

/// Writes `train.jsonl`, `eval.jsonl` and `dataset.json` into `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    ensure_dir(out)?;
    let (train, eval) = generate_dataset(cfg)?;
    save_frames(&train, out.join(TRAIN_FILE))?;
    save_frames(&eval, out.join(EVAL_FILE))?;
    let meta = DatasetMeta {
        config_hash: cfg.hash(),
        data_seed: cfg.data_seed,
        train_frames: train.len(),
        eval_frames: eval.len(),
    };
    write_file(
        &out.join(DATASET_META_FILE),
        &(serde_json::to_string_pretty(&meta).expect("meta serialises") + "\n"),
    )
}

/// Trains on `data/train.jsonl`; writes the checkpoint and training log.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, opts: ExecOptions) -> Result<PathBuf> {
    cfg.validate()?;
    let frames = load_frames(data.join(TRAIN_FILE))?;
    ensure_dir(out)?;
    let outcome = train_model(cfg, &frames, opts)?;
    let hash = cfg.hash();
    let ck_path = out.join(CHECKPOINT_FILE);
    Checkpoint::from_params(&outcome.params, &hash, &cfg.to_text()).save(&ck_path)?;
    write_file(&out.join(TRAIN_LOG_FILE), &train_log_csv(&outcome.logs, &hash))?;
    Ok(ck_path)
}

fn write_report(out: &Path, report: &EvalReport, frames: &[Frame], dets: &[Vec<Detection>]) -> Result<()> {
    write_file(&out.join(EVAL_CSV_FILE), &report.to_csv())?;
    write_file(&out.join(EVAL_JSON_FILE), &(report.to_json() + "\n"))?;
    let path = out.join(DETECTIONS_FILE);
    let mut buf = Vec::new();
    for (f, d) in frames.iter().zip(dets) {
        write_detections(&mut buf, f.frame_id, d, &report.config_hash).map_err(|e| Error::io(&path, e))?;
    }
    fs::File::create(&path)
        .and_then(|mut file| file.write_all(&buf))
        .map_err(|e| Error::io(&path, e))
}

/// Evaluates a checkpoint on `data/eval.jsonl`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path, opts: ExecOptions) -> Result<EvalReport> {
    cfg.validate()?;
    let params = Checkpoint::load(checkpoint)?.to_params()?;
    let frames = load_frames(data.join(EVAL_FILE))?;
    ensure_dir(out)?;
    let (report, dets) = evaluate_model(cfg, &params, &frames, opts)?;
    write_report(out, &report, &frames, &dets)?;
    Ok(report)
}

/// One (cell, seed) result of an ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub cell: String,
    pub seed: u64,
    pub config_hash: String,
    pub outcome: std::result::Result<EvalReport, String>,
}

const ABLATION_METRICS: [&str; 5] = ["map", "mrpe", "mse_low", "mse_high", "offcenter_rate"];

fn report_metrics(r: &EvalReport) -> Vec<Option<f64>> {
    let mut v = vec![r.map, r.mrpe, r.mse_low, r.mse_high, r.offcenter_rate];
    v.extend(r.ap.iter().copied());
    v
}

/// Mean and sample standard deviation of the present values.
pub fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    } else {
        None
    };
    (Some(mean), sd)
}

/// Per-seed rows followed by `mean` and `sd` rows per cell.
pub fn ablation_csv(runs: &[AblationRun], cells: &[String], class_names: &[String]) -> String {
    let mut s = String::from("cell,seed,status,config_hash");
    for m in ABLATION_METRICS {
        let _ = write!(s, ",{m}");
    }
    for n in class_names {
        let _ = write!(s, ",ap_{n}");
    }
    s.push('\n');
    let width = ABLATION_METRICS.len() + class_names.len();
    for r in runs {
        match &r.outcome {
            Ok(rep) => {
                let vals: Vec<String> = report_metrics(rep).into_iter().map(csv_opt).collect();
                let _ = writeln!(s, "{},{},ok,{},{}", r.cell, r.seed, r.config_hash, vals.join(","));
            }
            Err(msg) => {
                let msg = msg.replace([',', '\n'], ";");
                let _ = writeln!(
                    s,
                    "{},{},error: {msg},{}{}",
                    r.cell,
                    r.seed,
                    r.config_hash,
                    ",".repeat(width)
                );
            }
        }
    }
    for cell in cells {
        let ok: Vec<Vec<Option<f64>>> = runs
            .iter()
            .filter(|r| &r.cell == cell)
            .filter_map(|r| r.outcome.as_ref().ok().map(report_metrics))
            .collect();
        let hash = runs.iter().find(|r| &r.cell == cell).map_or("", |r| r.config_hash.as_str());
        let stats: Vec<(Option<f64>, Option<f64>)> = (0..width)
            .map(|k| mean_sd(&ok.iter().filter_map(|v| v[k]).collect::<Vec<_>>()))
            .collect();
        let means: Vec<String> = stats.iter().map(|p| csv_opt(p.0)).collect();
        let sds: Vec<String> = stats.iter().map(|p| csv_opt(p.1)).collect();
        let _ = writeln!(s, "{cell},mean,ok,{hash},{}", means.join(","));
        let _ = writeln!(s, "{cell},sd,ok,{hash},{}", sds.join(","));
    }
    s
}

/// Runs every cell over every seed on one shared dataset.
pub fn run_ablation(cfg: &RunConfig, opts: ExecOptions) -> Result<Vec<AblationRun>> {
    cfg.validate()?;
    if cfg.cells.is_empty() {
        return Err(Error::config("cell.*", "the ablation matrix has no cells"));
    }
    let (train, eval) = generate_dataset(cfg)?;
    let mut runs = Vec::new();
    for (name, overrides) in &cfg.cells {
        for &seed in &cfg.seeds {
            let cell_cfg = cfg.cell_config(overrides, seed)?;
            let hash = cell_cfg.hash();
            let outcome = train_model(&cell_cfg, &train, opts)
                .and_then(|t| evaluate_model(&cell_cfg, &t.params, &eval, opts))
                .map(|(r, _)| r)
                .map_err(|e| e.to_string());
            runs.push(AblationRun {
                cell: name.clone(),
                seed,
                config_hash: hash,
                outcome,
            });
        }
    }
    Ok(runs)
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path, opts: ExecOptions) -> Result<Vec<AblationRun>> {
    let runs = run_ablation(cfg, opts)?;
    ensure_dir(out)?;
    let cells: Vec<String> = cfg.cells.iter().map(|c| c.0.clone()).collect();
    write_file(&out.join(ABLATION_FILE), &ablation_csv(&runs, &cells, &cfg.class_names()))?;
    Ok(runs)
}

/// A model to diagnose: a label and its detections on the eval frames.
pub struct DiagModel {
    pub label: String,
    pub dets: Vec<Vec<Detection>>,
}

/// MRPE per class (plus `all`) and the MSE sweep, as two CSV tables.
pub fn diag_tables(cfg: &RunConfig, frames: &[Frame], models: &[DiagModel]) -> (String, String) {
    let hash = cfg.hash();
    let names = cfg.class_names();
    let kind = cfg.iou_kind;
    let mut mrpe = String::from("config_hash,model,class,mrpe\n");
    let mut mse = String::from("config_hash,model,split,mse_low,mse_high\n");
    for m in models {
        for (k, n) in names.iter().enumerate() {
            let v = center_mrpe(frames, &m.dets, &cfg.grid, Some(k), cfg.mrpe_match_iou, kind);
            let _ = writeln!(mrpe, "{hash},{},{n},{}", m.label, csv_opt(v));
        }
        let v = center_mrpe(frames, &m.dets, &cfg.grid, None, cfg.mrpe_match_iou, kind);
        let _ = writeln!(mrpe, "{hash},{},all,{}", m.label, csv_opt(v));
        for split in MSE_SWEEP {
            let (lo, hi) = iou_mse_by_quality(frames, &m.dets, split, kind);
            let _ = writeln!(mse, "{hash},{},{split},{},{}", m.label, csv_opt(lo), csv_opt(hi));
        }
    }
    (mrpe, mse)
}

/// Diagnoses labelled checkpoints (and optionally the ground-truth oracle)
/// on `data/eval.jsonl`.
pub fn cmd_diag(
    cfg: &RunConfig,
    checkpoints: &[(String, PathBuf)],
    oracle: bool,
    data: &Path,
    out: &Path,
    opts: ExecOptions,
) -> Result<()> {
    cfg.validate()?;
    let frames = load_frames(data.join(EVAL_FILE))?;
    ensure_dir(out)?;
    let mut models = Vec::new();
    if oracle {
        models.push(DiagModel {
            label: "oracle".into(),
            dets: evaluate_oracle(cfg, &frames).1,
        });
    }
    for (label, path) in checkpoints {
        let ck = Checkpoint::load(path)?;
        let mut model_cfg = RunConfig::parse_text(&ck.config)?;
        model_cfg.grid = cfg.grid;
        let params = ck.to_params()?;
        let (_, dets) = evaluate_model(&model_cfg, &params, &frames, opts)?;
        models.push(DiagModel {
            label: label.clone(),
            dets,
        });
    }
    let (mrpe, mse) = diag_tables(cfg, &frames, &models);
    write_file(&out.join(DIAG_MRPE_FILE), &mrpe)?;
    write_file(&out.join(DIAG_MSE_FILE), &mse)
}
