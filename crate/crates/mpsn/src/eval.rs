//! Detection scoring (AP at IoU 0.5) and occupancy-counting metrics.

use serde::{Deserialize, Serialize};

use crate::error::{MpsnError, Result};
use crate::head::{BBox, DetectionSet};

/// Per-frame counting detail and the aggregate NMAE / SCORE values.
///
/// NMAE averages `|n - n_pred| / (n + n_pred)` over frames, with an
/// empty-room frame that is predicted empty contributing zero. SCORE is
/// the exact-count hit rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountingReport {
    pub nmae: f64,
    pub score: f64,
    pub avg_head_count: f64,
    pub per_frame: Vec<(usize, usize)>,
}

/// All-point-interpolated average precision at IoU 0.5.
///
/// Detections are ranked by score across all frames and matched greedily
/// to at-most-one unmatched ground-truth box of their frame. Errors when
/// no frame has any ground truth, where AP is undefined.
pub fn ap50(per_frame: &[(DetectionSet, Vec<BBox>)]) -> Result<f64> {
    ap_at_iou(per_frame, 0.5)
}

pub fn ap_at_iou(per_frame: &[(DetectionSet, Vec<BBox>)], iou_thresh: f64) -> Result<f64> {
    let n_gt: usize = per_frame.iter().map(|(_, g)| g.len()).sum();
    if n_gt == 0 {
        return Err(MpsnError::NoGroundTruth);
    }

    // (score, frame, det index), ranked by descending score; ties keep
    // frame-then-index order.
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (fi, (dets, _)) in per_frame.iter().enumerate() {
        for (di, &s) in dets.scores.iter().enumerate() {
            ranked.push((s, fi, di));
        }
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let mut gt_used: Vec<Vec<bool>> = per_frame.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for &(_, fi, di) in &ranked {
        let (dets, gts) = &per_frame[fi];
        let b = &dets.boxes[di];
        let mut best_iou = 0.0;
        let mut best_gi = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_used[fi][gi] {
                continue;
            }
            let iou = b.iou(g);
            if iou > best_iou {
                best_iou = iou;
                best_gi = Some(gi);
            }
        }
        if best_iou >= iou_thresh {
            gt_used[fi][best_gi.unwrap()] = true;
            tp_flags.push(true);
        } else {
            tp_flags.push(false);
        }
    }

    // Precision/recall at each rank, then area under the monotonized curve.
    let n = ranked.len();
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    let mut pmax = precisions.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        pmax[k] = pmax[k].max(pmax[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        if tp_flags[k] {
            ap += (recalls[k] - prev_recall) * pmax[k];
            prev_recall = recalls[k];
        }
    }
    Ok(ap)
}

/// Number of detections at or above the score threshold.
pub fn count_heads(dets: &DetectionSet, score_thresh: f64) -> usize {
    dets.scores.iter().filter(|&&s| s >= score_thresh).count()
}

/// NMAE and SCORE over aligned true/predicted per-frame counts.
pub fn counting_metrics(truth: &[usize], pred: &[usize]) -> Result<CountingReport> {
    if truth.len() != pred.len() {
        return Err(MpsnError::Contract(format!(
            "counting_metrics: {} true counts vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(MpsnError::Contract(
            "counting_metrics requires at least one frame".into(),
        ));
    }
    let n = truth.len() as f64;
    let mut nmae = 0.0;
    let mut score = 0.0;
    for (&t, &p) in truth.iter().zip(pred) {
        let denom = (t + p) as f64;
        if denom > 0.0 {
            nmae += (t as f64 - p as f64).abs() / denom;
        }
        if t == p {
            score += 1.0;
        }
    }
    Ok(CountingReport {
        nmae: nmae / n,
        score: score / n,
        avg_head_count: truth.iter().sum::<usize>() as f64 / n,
        per_frame: truth.iter().copied().zip(pred.iter().copied()).collect(),
    })
}

/// Evaluation report serialized by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub nmae: f64,
    pub score: f64,
    pub avg_head_count: f64,
    pub per_frame: Vec<FrameDetail>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameDetail {
    pub source_id: String,
    pub frame_index: usize,
    pub n_true: usize,
    pub n_pred: usize,
}

/// One line of a detection dump: scored boxes for one frame.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectionRecord {
    pub source_id: String,
    pub frame_index: usize,
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
}

impl DetectionRecord {
    pub fn from_detections(source_id: &str, frame_index: usize, dets: &DetectionSet) -> Self {
        DetectionRecord {
            source_id: source_id.to_string(),
            frame_index,
            boxes: dets.boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect(),
            scores: dets.scores.clone(),
        }
    }

    pub fn to_detections(&self) -> DetectionSet {
        DetectionSet {
            boxes: self
                .boxes
                .iter()
                .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
                .collect(),
            scores: self.scores.clone(),
        }
    }
}

pub fn write_detections_jsonl(path: &std::path::Path, records: &[DetectionRecord]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    for rec in records {
        serde_json::to_writer(&mut f, rec)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_detections_jsonl(path: &std::path::Path) -> Result<Vec<DetectionRecord>> {
    use std::io::BufRead;
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| MpsnError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
