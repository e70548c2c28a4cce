//! End-to-end training: SGD with a step learning-rate schedule, per-epoch
//! validation AP, best-model selection, metrics CSV, and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationParams;
use crate::backbone::{
    build_bundle, Arch, BackboneSplitSpec, InitPolicy, ModelBundle, ModelVariant,
};
use crate::error::{MpsnError, Result};
use crate::eval::ap50;
use crate::head::HeadLossConfig;
use crate::motion::{FlowProvider, FrameSample};
use crate::network::{detect, loss_and_grads, prepare_input, DetectConfig};
use crate::nn::{NormKind, Sgd};

/// Checkpoint format tag.
pub const CKPT_TAG: &[u8] = b"mpsn-ckpt-v1\n";

/// Training configuration. Every field has a default; the flat key/value
/// config file and CLI flags override them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub arch: Arch,
    pub norm: NormKind,
    pub epochs: usize,
    /// `(first_epoch, lr)` pairs; each rate applies from its epoch until
    /// the next entry.
    pub lr_schedule: Vec<(usize, f64)>,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables.
    pub clip_norm: Option<f64>,
    pub loss: HeadLossConfig,
    pub agg: AggregationParams,
    /// Temporal stride when pairing frames.
    pub stride: usize,
    /// Score threshold used for validation AP (low, so the PR curve is
    /// explored).
    pub eval_score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: ModelVariant::DiffAbs,
            arch: Arch::Tiny,
            norm: NormKind::Batch,
            epochs: 50,
            lr_schedule: vec![(0, 1e-2), (15, 1e-3), (35, 1e-4), (42, 1e-5)],
            batch_size: 1,
            seed: 0,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: Some(10.0),
            loss: HeadLossConfig::default(),
            agg: AggregationParams::default(),
            stride: 1,
            eval_score_thresh: 0.05,
            nms_iou: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MpsnError::Config("batch_size must be >= 1".into()));
        }
        if self.lr_schedule.is_empty() {
            return Err(MpsnError::Config("lr_schedule must not be empty".into()));
        }
        for pair in self.lr_schedule.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(MpsnError::Config(
                    "lr_schedule epochs must be strictly increasing".into(),
                ));
            }
        }
        if self.stride == 0 {
            return Err(MpsnError::Config("stride must be >= 1".into()));
        }
        self.loss.validate()
    }

    pub fn detect_config(&self) -> DetectConfig {
        DetectConfig {
            nms_iou: self.nms_iou,
            score_thresh: self.eval_score_thresh,
            ..DetectConfig::default()
        }
    }
}

/// Learning rate in force at an epoch: the last schedule entry at or
/// before it.
pub fn lr_for_epoch(schedule: &[(usize, f64)], epoch: usize) -> f64 {
    let mut lr = schedule.first().map(|&(_, v)| v).unwrap_or(0.0);
    for &(start, v) in schedule {
        if epoch >= start {
            lr = v;
        }
    }
    lr
}

/// One row of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_ap50: Option<f64>,
}

/// Training result: the selected model plus the per-epoch log.
pub struct TrainOutput {
    /// Best model by validation AP (final model when there is no val set).
    pub bundle: ModelBundle,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// Validation AP50 of a bundle over samples.
pub fn validation_ap(
    bundle: &ModelBundle,
    samples: &[FrameSample],
    flow: Option<&dyn FlowProvider>,
    cfg: &DetectConfig,
) -> Result<f64> {
    let mut frames = Vec::with_capacity(samples.len());
    for s in samples {
        let dets = detect(bundle, s, flow, cfg)?;
        frames.push((dets, s.boxes.clone()));
    }
    ap50(&frames)
}

/// Train a model from scratch on frame-pair samples.
pub fn train(
    config: &TrainConfig,
    train_samples: &[FrameSample],
    val_samples: &[FrameSample],
    flow: Option<&dyn FlowProvider>,
) -> Result<TrainOutput> {
    config.validate()?;
    if train_samples.is_empty() {
        return Err(MpsnError::Contract("training set is empty".into()));
    }
    let spec = BackboneSplitSpec::for_arch(config.arch).with_norm(config.norm);
    let mut bundle = build_bundle(
        &spec,
        &InitPolicy::Random { seed: config.seed },
        config.variant,
    )?;
    bundle.agg = config.agg;

    let det_cfg = config.detect_config();
    let mut optimizer = Sgd::new(config.momentum, config.weight_decay, config.clip_norm);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelBundle)> = None;

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    for epoch in 0..config.epochs {
        let lr = lr_for_epoch(&config.lr_schedule, epoch);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64 + 1));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Option<Vec<ArrayD<f64>>> = None;
            for (step_in_batch, &idx) in batch.iter().enumerate() {
                let sample = &train_samples[idx];
                let input = prepare_input(&bundle, sample, flow, &det_cfg)?;
                let step =
                    loss_and_grads(&bundle, &input, &sample.boxes, &config.loss).map_err(|e| {
                        match e {
                            MpsnError::Numeric { context, detail } => MpsnError::Numeric {
                                context,
                                detail: format!(
                                    "{detail} (epoch {epoch}, lr {lr}, sample {idx}, batch step {step_in_batch})"
                                ),
                            },
                            other => other,
                        }
                    })?;
                epoch_loss += step.loss;
                let tensors = step.grads.tensors();
                match &mut acc {
                    None => acc = Some(tensors.into_iter().cloned().collect()),
                    Some(buf) => {
                        for (a, t) in buf.iter_mut().zip(tensors) {
                            *a += t;
                        }
                    }
                }
            }
            let mut grads = acc.unwrap();
            if batch.len() > 1 {
                let inv = 1.0 / batch.len() as f64;
                for g in grads.iter_mut() {
                    *g *= inv;
                }
            }
            let grad_refs: Vec<&ArrayD<f64>> = grads.iter().collect();
            optimizer.step(lr, bundle.params_mut(), grad_refs);
        }
        let train_loss = epoch_loss / train_samples.len() as f64;
        if !train_loss.is_finite() {
            return Err(MpsnError::Numeric {
                context: "epoch loss".into(),
                detail: format!("epoch {epoch}"),
            });
        }

        let val = if val_samples.is_empty() {
            None
        } else {
            Some(validation_ap(&bundle, val_samples, flow, &det_cfg)?)
        };
        if let Some(v) = val {
            let better = best.as_ref().map(|(b, _, _)| v >= *b).unwrap_or(true);
            if better {
                best = Some((v, epoch, bundle.clone()));
            }
        }
        metrics.push(EpochMetrics {
            epoch,
            lr,
            train_loss,
            val_ap50: val,
        });
    }

    let (bundle, best_epoch) = match best {
        Some((_, epoch, b)) => (b, epoch),
        None => {
            let last = config.epochs.saturating_sub(1);
            (bundle, last)
        }
    };
    Ok(TrainOutput {
        bundle,
        metrics,
        best_epoch,
    })
}

/// Write the metrics log as CSV: `epoch,lr,train_loss,val_ap50`.
pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "epoch,lr,train_loss,val_ap50")?;
    for m in metrics {
        let val = m.val_ap50.map(|v| format!("{v}")).unwrap_or_default();
        writeln!(f, "{},{},{},{}", m.epoch, m.lr, m.train_loss, val)?;
    }
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    spec: BackboneSplitSpec,
    variant: ModelVariant,
    agg: AggregationParams,
    shapes: Vec<Vec<usize>>,
}

/// Serialize a bundle: format tag, JSON header, then every parameter
/// tensor as little-endian f64 in traversal order.
pub fn save_checkpoint(path: &Path, bundle: &ModelBundle) -> Result<()> {
    let mut shapes = Vec::new();
    bundle.visit(&mut |a| shapes.push(a.shape().to_vec()));
    let header = CkptHeader {
        spec: bundle.spec.clone(),
        variant: bundle.variant,
        agg: bundle.agg,
        shapes,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_TAG)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let mut io_err: Option<std::io::Error> = None;
    bundle.visit(&mut |a| {
        if io_err.is_some() {
            return;
        }
        for &v in a.iter() {
            if let Err(e) = w.write_all(&v.to_le_bytes()) {
                io_err = Some(e);
                return;
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let mut r = BufReader::new(File::open(path)?);
    let mut tag = vec![0u8; CKPT_TAG.len()];
    r.read_exact(&mut tag)?;
    if tag != CKPT_TAG {
        return Err(MpsnError::Format(format!(
            "{}: not an mpsn-ckpt-v1 checkpoint",
            path.display()
        )));
    }
    let mut len_buf = [0u8; 8];
    r.read_exact(&mut len_buf)?;
    let header_len = u64::from_le_bytes(len_buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: CkptHeader = serde_json::from_slice(&header_bytes)?;

    let mut bundle = build_bundle(&header.spec, &InitPolicy::Random { seed: 0 }, header.variant)?;
    bundle.agg = header.agg;

    let mut params = bundle.params_mut();
    if params.len() != header.shapes.len() {
        return Err(MpsnError::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            header.shapes.len(),
            params.len()
        )));
    }
    let mut buf = [0u8; 8];
    for (p, shape) in params.iter_mut().zip(&header.shapes) {
        if p.shape() != shape.as_slice() {
            return Err(MpsnError::Format(format!(
                "checkpoint tensor shape {:?} does not match model {:?}",
                shape,
                p.shape()
            )));
        }
        let mut data = ArrayD::<f64>::zeros(IxDyn(shape));
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        **p = data;
    }
    Ok(bundle)
}
