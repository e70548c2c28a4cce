//! Command-line interface: `synth`, `train`, `eval`, `attack`, `cam`.
//!
//! Every command writes exactly one `manifest.json` into its output
//! directory recording the effective configuration, seed, and produced
//! artifacts. Exit codes: 0 success, 2 usage error, 3 data error,
//! 4 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backbone::ModelVariant;
use crate::config::{apply_config_file, apply_key, config_snapshot};
use crate::dataset::{
    load_dataset, sequences_to_samples, synth_splits, write_sequences, DatasetSpec, Split,
    SynthParams,
};
use crate::error::{MpsnError, Result};
use crate::eval::{
    ap50, count_heads, counting_metrics, load_detections_jsonl, write_detections_jsonl,
    DetectionRecord, EvalReport, FrameDetail,
};
use crate::head::DetectionSet;
use crate::manifest::RunManifest;
use crate::motion::{FlowProvider, FrameSample, PrecomputedFlow};
use crate::network::{detect, detector_features, DetectConfig};
use crate::robustness::{cam_heatmap, robustness_sweep, AttackConfig, CamHeatmap};
use crate::train::{load_checkpoint, save_checkpoint, train, write_metrics_csv, TrainConfig};

/// Environment variable pointing at precomputed flow records.
pub const FLOW_CACHE_ENV: &str = "MPSN_CACHE_DIR";

#[derive(Parser)]
#[command(
    name = "mpsn",
    version,
    about = "Motion-aware head detection: synthetic data, training, evaluation, counting, and robustness analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for independent stages (attack sweep legs).
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args)]
pub struct DataArgs {
    /// Dataset root directory.
    #[arg(long)]
    data: PathBuf,
    /// Dataset format: idl | jsonl | synthetic.
    #[arg(long, default_value = "jsonl")]
    format: String,
    /// Split to read: train | val | test.
    #[arg(long, default_value = "test")]
    split: String,
}

impl DataArgs {
    fn spec(&self, split_override: Option<Split>) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            format: self.format.parse()?,
            root: self.data.clone(),
            split: match split_override {
                Some(s) => s,
                None => self.split.parse()?,
            },
        })
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic moving-heads dataset (images + jsonl splits).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        sequences: usize,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 4)]
        distractors: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 112)]
        size: usize,
    },
    /// Train a detector and save the best-validation checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Flat key=value config file; flags override file values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra config overrides as KEY=VALUE (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Precomputed flow directory (flow variant).
        #[arg(long)]
        flow_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or a detection dump: AP50 plus counting
    /// metrics.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate an existing detection dump instead of a checkpoint.
        #[arg(long)]
        dets: Option<PathBuf>,
        /// Score threshold for occupancy counting.
        #[arg(long, default_value_t = 0.5)]
        count_thresh: f64,
        /// Score threshold when collecting detections for AP.
        #[arg(long, default_value_t = 0.05)]
        eval_thresh: f64,
        #[arg(long)]
        flow_dir: Option<PathBuf>,
    },
    /// FGSM robustness sweep comparing a dual-stream model against a
    /// baseline.
    Attack {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        /// Perturbation magnitudes (repeatable); sorted ascending.
        #[arg(long = "eps", value_name = "EPS")]
        eps: Vec<f64>,
        /// Skip clamping adversarial images to [0, 1].
        #[arg(long, default_value_t = false)]
        no_clamp: bool,
        #[arg(long, default_value_t = 0.05)]
        eval_thresh: f64,
        #[arg(long)]
        flow_dir: Option<PathBuf>,
    },
    /// Dump per-frame CAM heatmaps as grayscale images.
    Cam {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        flow_dir: Option<PathBuf>,
    },
}

/// Parse argv and run; the caller maps errors to exit codes.
pub fn run() -> Result<()> {
    let cli = Cli::parse();
    dispatch(cli)
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            sequences,
            frames,
            heads,
            distractors,
            size,
        } => cmd_synth(&out, seed, sequences, frames, heads, distractors, size),
        Command::Train {
            data,
            out,
            config,
            variant,
            arch,
            epochs,
            seed,
            set,
            flow_dir,
        } => cmd_train(
            &data, &out, config, variant, arch, epochs, seed, &set, flow_dir,
        ),
        Command::Eval {
            data,
            out,
            checkpoint,
            dets,
            count_thresh,
            eval_thresh,
            flow_dir,
        } => cmd_eval(
            &data,
            &out,
            checkpoint,
            dets,
            count_thresh,
            eval_thresh,
            flow_dir,
        ),
        Command::Attack {
            data,
            out,
            checkpoint,
            baseline,
            eps,
            no_clamp,
            eval_thresh,
            flow_dir,
        } => cmd_attack(
            &data,
            &out,
            &checkpoint,
            &baseline,
            eps,
            no_clamp,
            eval_thresh,
            flow_dir,
            cli.workers,
        ),
        Command::Cam {
            data,
            out,
            checkpoint,
            flow_dir,
        } => cmd_cam(&data, &out, &checkpoint, flow_dir),
    }
}

fn flow_provider(flow_dir: Option<PathBuf>) -> Option<PrecomputedFlow> {
    flow_dir
        .or_else(|| std::env::var_os(FLOW_CACHE_ENV).map(PathBuf::from))
        .map(PrecomputedFlow::new)
}

fn as_dyn(p: &Option<PrecomputedFlow>) -> Option<&dyn FlowProvider> {
    p.as_ref().map(|p| p as &dyn FlowProvider)
}

fn cmd_synth(
    out: &Path,
    seed: u64,
    sequences: usize,
    frames: usize,
    heads: usize,
    distractors: usize,
    size: usize,
) -> Result<()> {
    let params = SynthParams {
        seed,
        n_sequences: sequences,
        frames_per_seq: frames,
        n_heads: heads,
        n_distractors: distractors,
        height: size,
        width: size,
    };
    std::fs::create_dir_all(out)?;
    let (train_seqs, val_seqs, test_seqs) = synth_splits(&params)?;
    let mut manifest = RunManifest::start("synth", seed);
    manifest.config = BTreeMap::from([
        ("sequences".into(), sequences.to_string()),
        ("frames".into(), frames.to_string()),
        ("heads".into(), heads.to_string()),
        ("distractors".into(), distractors.to_string()),
        ("size".into(), size.to_string()),
    ]);
    for (split, seqs) in [
        (Split::Train, &train_seqs),
        (Split::Val, &val_seqs),
        (Split::Test, &test_seqs),
    ] {
        for path in write_sequences(out, split, seqs)? {
            manifest.add_output(&path);
        }
    }
    manifest.write(out)?;
    println!(
        "synth: {} sequences ({} train / {} val / {} test) at {}",
        sequences,
        train_seqs.len(),
        val_seqs.len(),
        test_seqs.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &DataArgs,
    out: &Path,
    config_file: Option<PathBuf>,
    variant: Option<String>,
    arch: Option<String>,
    epochs: Option<usize>,
    seed: Option<u64>,
    set: &[String],
    flow_dir: Option<PathBuf>,
) -> Result<()> {
    // Precedence: defaults, then file, then flags.
    let mut cfg = TrainConfig::default();
    if let Some(path) = &config_file {
        apply_config_file(&mut cfg, path)?;
    }
    if let Some(v) = &variant {
        apply_key(&mut cfg, "variant", v)?;
    }
    if let Some(a) = &arch {
        apply_key(&mut cfg, "arch", a)?;
    }
    if let Some(e) = epochs {
        apply_key(&mut cfg, "epochs", &e.to_string())?;
    }
    if let Some(s) = seed {
        apply_key(&mut cfg, "seed", &s.to_string())?;
    }
    for pair in set {
        let (k, v) = pair.split_once('=').ok_or_else(|| {
            MpsnError::Config(format!("--set expects KEY=VALUE, got '{pair}'"))
        })?;
        apply_key(&mut cfg, k.trim(), v.trim())?;
    }
    cfg.validate()?;

    let train_seqs = load_dataset(&data.spec(Some(Split::Train))?)?;
    let val_seqs = load_dataset(&data.spec(Some(Split::Val))?).unwrap_or_default();
    let train_samples = sequences_to_samples(&train_seqs, cfg.stride)?;
    let val_samples = sequences_to_samples(&val_seqs, cfg.stride)?;
    let provider = flow_provider(flow_dir);
    if cfg.variant == ModelVariant::Flow && provider.is_none() {
        return Err(MpsnError::Config(format!(
            "flow variant needs --flow-dir or {FLOW_CACHE_ENV}"
        )));
    }

    std::fs::create_dir_all(out)?;
    let result = train(&cfg, &train_samples, &val_samples, as_dyn(&provider))?;

    let ckpt_path = out.join("model.ckpt");
    save_checkpoint(&ckpt_path, &result.bundle)?;
    let csv_path = out.join("metrics.csv");
    write_metrics_csv(&csv_path, &result.metrics)?;

    let mut manifest = RunManifest::start("train", cfg.seed);
    manifest.config = config_snapshot(&cfg);
    manifest.checkpoint = Some(ckpt_path.display().to_string());
    manifest.add_output(&ckpt_path);
    manifest.add_output(&csv_path);
    manifest.write(out)?;

    let last = result.metrics.last().unwrap();
    println!(
        "train: {} epochs, final loss {:.6}, best epoch {}{}",
        result.metrics.len(),
        last.train_loss,
        result.best_epoch,
        last.val_ap50
            .map(|v| format!(", final val AP50 {v:.4}"))
            .unwrap_or_default()
    );
    Ok(())
}

/// Detections per (source_id, frame_index), aligned to the samples' order.
fn detections_for_samples(
    records: &[DetectionRecord],
    samples: &[FrameSample],
) -> Vec<DetectionSet> {
    let index: std::collections::HashMap<(&str, usize), &DetectionRecord> = records
        .iter()
        .map(|r| ((r.source_id.as_str(), r.frame_index), r))
        .collect();
    samples
        .iter()
        .map(|s| {
            index
                .get(&(s.source_id.as_str(), s.current.index))
                .map(|r| r.to_detections())
                .unwrap_or_default()
        })
        .collect()
}

fn cmd_eval(
    data: &DataArgs,
    out: &Path,
    checkpoint: Option<PathBuf>,
    dets_path: Option<PathBuf>,
    count_thresh: f64,
    eval_thresh: f64,
    flow_dir: Option<PathBuf>,
) -> Result<()> {
    let sequences = load_dataset(&data.spec(None)?)?;
    let samples = sequences_to_samples(&sequences, 1)?;
    if samples.is_empty() {
        return Err(MpsnError::Contract("no samples in the selected split".into()));
    }

    let mut manifest;
    let per_sample: Vec<DetectionSet>;
    match (&checkpoint, &dets_path) {
        (Some(ckpt), None) => {
            let bundle = load_checkpoint(ckpt)?;
            let provider = flow_provider(flow_dir);
            let det_cfg = DetectConfig {
                score_thresh: eval_thresh,
                ..DetectConfig::default()
            };
            per_sample = samples
                .iter()
                .map(|s| detect(&bundle, s, as_dyn(&provider), &det_cfg))
                .collect::<Result<_>>()?;
            manifest = RunManifest::start("eval", 0);
            manifest.checkpoint = Some(ckpt.display().to_string());
        }
        (None, Some(path)) => {
            let records = load_detections_jsonl(path)?;
            per_sample = detections_for_samples(&records, &samples);
            manifest = RunManifest::start("eval", 0);
        }
        _ => {
            return Err(MpsnError::Config(
                "eval needs exactly one of --checkpoint or --dets".into(),
            ))
        }
    }

    let frames: Vec<(DetectionSet, Vec<crate::head::BBox>)> = per_sample
        .iter()
        .cloned()
        .zip(samples.iter().map(|s| s.boxes.clone()))
        .collect();
    let ap = ap50(&frames)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.boxes.len()).collect();
    let pred: Vec<usize> = per_sample
        .iter()
        .map(|d| count_heads(d, count_thresh))
        .collect();
    let counting = counting_metrics(&truth, &pred)?;

    let report = EvalReport {
        ap50: ap,
        nmae: counting.nmae,
        score: counting.score,
        avg_head_count: counting.avg_head_count,
        per_frame: samples
            .iter()
            .zip(&counting.per_frame)
            .map(|(s, &(t, p))| FrameDetail {
                source_id: s.source_id.clone(),
                frame_index: s.current.index,
                n_true: t,
                n_pred: p,
            })
            .collect(),
    };

    std::fs::create_dir_all(out)?;
    let report_path = out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    manifest.add_output(&report_path);
    if checkpoint.is_some() {
        let dump_path = out.join("detections.jsonl");
        let records: Vec<DetectionRecord> = samples
            .iter()
            .zip(&per_sample)
            .map(|(s, d)| DetectionRecord::from_detections(&s.source_id, s.current.index, d))
            .collect();
        write_detections_jsonl(&dump_path, &records)?;
        manifest.add_output(&dump_path);
    }
    manifest.config = BTreeMap::from([
        ("count_thresh".into(), count_thresh.to_string()),
        ("eval_thresh".into(), eval_thresh.to_string()),
        ("split".into(), data.split.clone()),
    ]);
    manifest.write(out)?;
    println!(
        "eval: ap50 {:.4}, nmae {:.4}, score {:.4}, avg heads {:.3}",
        report.ap50, report.nmae, report.score, report.avg_head_count
    );
    Ok(())
}

fn save_heatmap_png(path: &Path, cam: &CamHeatmap) -> Result<()> {
    let (h, w) = (cam.values.shape()[0], cam.values.shape()[1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (cam.values[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_attack(
    data: &DataArgs,
    out: &Path,
    checkpoint: &Path,
    baseline: &Path,
    eps: Vec<f64>,
    no_clamp: bool,
    eval_thresh: f64,
    flow_dir: Option<PathBuf>,
    workers: usize,
) -> Result<()> {
    let bundle = load_checkpoint(checkpoint)?;
    let base = load_checkpoint(baseline)?;
    let sequences = load_dataset(&data.spec(None)?)?;
    let samples = sequences_to_samples(&sequences, 1)?;
    let provider = flow_provider(flow_dir);

    let attack_cfg = AttackConfig {
        epsilons: if eps.is_empty() {
            AttackConfig::default().epsilons
        } else {
            eps
        },
        clamp: !no_clamp,
    }
    .sorted();
    attack_cfg.validate()?;
    let loss_cfg = crate::head::HeadLossConfig::default();
    let det_cfg = DetectConfig {
        score_thresh: eval_thresh,
        ..DetectConfig::default()
    };

    let report = robustness_sweep(
        &bundle,
        &base,
        &samples,
        &attack_cfg,
        &loss_cfg,
        &det_cfg,
        as_dyn(&provider),
        workers,
    )?;

    std::fs::create_dir_all(out)?;
    let csv_path = out.join("sweep.csv");
    std::fs::write(&csv_path, report.to_csv())?;
    let json_path = out.join("report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;

    let mut manifest = RunManifest::start("attack", 0);
    manifest.checkpoint = Some(checkpoint.display().to_string());
    manifest.config = BTreeMap::from([
        (
            "eps".into(),
            attack_cfg
                .epsilons
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("clamp".into(), attack_cfg.clamp.to_string()),
        ("eval_thresh".into(), eval_thresh.to_string()),
    ]);
    manifest.add_output(&csv_path);
    manifest.add_output(&json_path);

    // Heatmap dumps for the dual-stream model: clean and per-epsilon
    // adversarial CAMs.
    let heat_dir = out.join("heatmaps");
    std::fs::create_dir_all(&heat_dir)?;
    for s in &samples {
        let cam = cam_heatmap(&detector_features(&bundle, s, as_dyn(&provider), &det_cfg)?);
        let path = heat_dir.join(format!("clean_{}_{:05}.png", s.source_id, s.current.index));
        save_heatmap_png(&path, &cam)?;
        manifest.add_output(&path);
    }
    for &e in &attack_cfg.epsilons {
        for s in &samples {
            let adv = crate::robustness::fgsm_perturb(
                &bundle,
                s,
                &loss_cfg,
                &det_cfg,
                as_dyn(&provider),
                e,
                attack_cfg.clamp,
            )?;
            let cam = cam_heatmap(&detector_features(
                &bundle,
                &adv.sample,
                as_dyn(&provider),
                &det_cfg,
            )?);
            let path = heat_dir.join(format!(
                "eps{:.3}_{}_{:05}.png",
                e, s.source_id, s.current.index
            ));
            save_heatmap_png(&path, &cam)?;
            manifest.add_output(&path);
        }
    }
    manifest.write(out)?;

    for row in &report.rows {
        println!(
            "attack: eps {:.3} ap50 {:.4}/{:.4} ni {:.4}/{:.4}",
            row.eps, row.ap50_mpsn, row.ap50_base, row.ni_mpsn, row.ni_base
        );
    }
    Ok(())
}

fn cmd_cam(
    data: &DataArgs,
    out: &Path,
    checkpoint: &Path,
    flow_dir: Option<PathBuf>,
) -> Result<()> {
    let bundle = load_checkpoint(checkpoint)?;
    let sequences = load_dataset(&data.spec(None)?)?;
    let samples = sequences_to_samples(&sequences, 1)?;
    let provider = flow_provider(flow_dir);
    let det_cfg = DetectConfig::default();

    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::start("cam", 0);
    manifest.checkpoint = Some(checkpoint.display().to_string());
    for s in &samples {
        let cam = cam_heatmap(&detector_features(&bundle, s, as_dyn(&provider), &det_cfg)?);
        let path = out.join(format!("{}_{:05}.png", s.source_id, s.current.index));
        save_heatmap_png(&path, &cam)?;
        manifest.add_output(&path);
    }
    manifest.write(out)?;
    println!("cam: wrote {} heatmaps to {}", samples.len(), out.display());
    Ok(())
}
