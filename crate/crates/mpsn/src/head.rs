//! Anchor-based detection head: APC layer, per-anchor classification and
//! box regression, target assignment, focal and smooth-L1 losses, box
//! decoding and NMS.
//!
//! Three square anchor sizes (16, 32, 64) tile the stride-16 grid, one per
//! (cell, size). Classification is binary, head vs background. Anchor order
//! everywhere is `(row * width + col) * 3 + size_index`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, DEEP_STRIDE};
use crate::error::{MpsnError, Result};
use crate::nn::{Block, Conv2d, Feat, Layer, Shortcut};

/// Square anchor side lengths in pixels.
pub const ANCHOR_SIZES: [f64; 3] = [16.0, 32.0, 64.0];

/// Anchors per feature cell.
pub const ANCHORS_PER_CELL: usize = 3;

/// Axis-aligned box in pixel coordinates, corners (x1, y1) to (x2, y2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, w: f64, h: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }
}

/// Anchors tiled over a feature grid.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub anchors: Vec<BBox>,
    pub stride: usize,
    pub sizes: [f64; 3],
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Tile square anchors with centers at `((col + 0.5) * stride,
/// (row + 0.5) * stride)`.
pub fn generate_anchors(grid_h: usize, grid_w: usize, stride: usize, sizes: [f64; 3]) -> AnchorSet {
    let mut anchors = Vec::with_capacity(grid_h * grid_w * ANCHORS_PER_CELL);
    for row in 0..grid_h {
        for col in 0..grid_w {
            let cx = (col as f64 + 0.5) * stride as f64;
            let cy = (row as f64 + 0.5) * stride as f64;
            for size in sizes {
                let half = size / 2.0;
                anchors.push(BBox::new(cx - half, cy - half, cx + half, cy + half));
            }
        }
    }
    AnchorSet {
        anchors,
        stride,
        sizes,
        grid_h,
        grid_w,
    }
}

/// Scored boxes; parallel lists, sorted by descending score after NMS.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Loss and assignment configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HeadLossConfig {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub reg_weight: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Rescale the classification term by scored/positive anchor counts
    /// during training, so the handful of positive anchors is not washed
    /// out by the anchor-mean normalization. Off by default; the
    /// [`focal_loss`] value itself is always the plain anchor mean.
    pub cls_pos_norm: bool,
}

impl Default for HeadLossConfig {
    fn default() -> Self {
        HeadLossConfig {
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            reg_weight: 1.0,
            pos_iou: 0.7,
            neg_iou: 0.3,
            cls_pos_norm: false,
        }
    }
}

impl HeadLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(MpsnError::Config(format!(
                "focal_alpha must be in [0,1], got {}",
                self.focal_alpha
            )));
        }
        if !(0.0 <= self.neg_iou && self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0) {
            return Err(MpsnError::Config(format!(
                "need 0 <= neg_iou <= pos_iou <= 1, got {} / {}",
                self.neg_iou, self.pos_iou
            )));
        }
        Ok(())
    }
}

/// Detection-head parameters: the additive penultimate conv stage, a
/// shared 3x3 stage, and the two 1x1 prediction branches.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    /// Channel-preserving 3x3 residual stage: `x + relu(conv(x))`.
    pub apc: Block,
    /// Shared 3x3 conv (+ ReLU) feeding both branches.
    pub rpn_conv: Conv2d,
    /// 1x1 conv to one logit per anchor size.
    pub cls: Conv2d,
    /// 1x1 conv to four offsets per anchor size.
    pub reg: Conv2d,
}

impl DetectionHead {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let apc = Block {
            body: vec![
                Layer::Conv(Conv2d::new(channels, channels, 3, 1, rng)),
                Layer::Relu,
            ],
            shortcut: Shortcut::Identity,
        };
        let rpn_conv = Conv2d::new(channels, channels, 3, 1, rng);
        let cls = Conv2d::new(channels, ANCHORS_PER_CELL, 1, 1, rng);
        let reg = Conv2d::new(channels, 4 * ANCHORS_PER_CELL, 1, 1, rng);
        let mut head = DetectionHead {
            apc,
            rpn_conv,
            cls,
            reg,
        };
        // Bias the objectness prior low so early training is not swamped
        // by foreground predictions on every anchor.
        head.cls.bias.fill(-2.0);
        head
    }

    /// Zero-weight head (tests of degenerate behavior).
    pub fn zeroed(channels: usize) -> Self {
        DetectionHead {
            apc: Block {
                body: vec![
                    Layer::Conv(Conv2d::zeroed(channels, channels, 3, 1)),
                    Layer::Relu,
                ],
                shortcut: Shortcut::Identity,
            },
            rpn_conv: Conv2d::zeroed(channels, channels, 3, 1),
            cls: Conv2d::zeroed(channels, ANCHORS_PER_CELL, 1, 1),
            reg: Conv2d::zeroed(channels, 4 * ANCHORS_PER_CELL, 1, 1),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&ndarray::ArrayD<f64>)) {
        for layer in &self.apc.body {
            if let Layer::Conv(c) = layer {
                f(&c.weight);
                f(&c.bias);
            }
        }
        f(&self.rpn_conv.weight);
        f(&self.rpn_conv.bias);
        f(&self.cls.weight);
        f(&self.cls.bias);
        f(&self.reg.weight);
        f(&self.reg.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut ndarray::ArrayD<f64>)) {
        for layer in &mut self.apc.body {
            if let Layer::Conv(c) = layer {
                f(&mut c.weight);
                f(&mut c.bias);
            }
        }
        f(&mut self.rpn_conv.weight);
        f(&mut self.rpn_conv.bias);
        f(&mut self.cls.weight);
        f(&mut self.cls.bias);
        f(&mut self.reg.weight);
        f(&mut self.reg.bias);
    }

    pub fn params_mut(&mut self) -> Vec<&mut ndarray::ArrayD<f64>> {
        let mut out = self.apc.params_mut();
        out.push(&mut self.rpn_conv.weight);
        out.push(&mut self.rpn_conv.bias);
        out.push(&mut self.cls.weight);
        out.push(&mut self.cls.bias);
        out.push(&mut self.reg.weight);
        out.push(&mut self.reg.bias);
        out
    }
}

/// Additive penultimate stage on the aggregated stride-16 features.
pub fn apc_forward(feat: &FeatureMap, head: &DetectionHead) -> Result<FeatureMap> {
    if feat.stride != DEEP_STRIDE {
        return Err(MpsnError::Contract(format!(
            "apc_forward expects stride-{DEEP_STRIDE} features, got {}",
            feat.stride
        )));
    }
    Ok(FeatureMap::new(head.apc.forward(&feat.values), feat.stride))
}

/// Raw classification and regression maps, `(3, H', W')` and `(12, H', W')`.
pub(crate) fn rpn_forward_maps(feat: &Feat, head: &DetectionHead) -> (Feat, Feat) {
    let t = head.rpn_conv.forward(feat).mapv(|v| v.max(0.0));
    (head.cls.forward(&t), head.reg.forward(&t))
}

/// Like [`rpn_forward_maps`], also returning the pre-activation of the
/// shared stage for the backward pass.
pub(crate) fn rpn_forward_maps_train(feat: &Feat, head: &DetectionHead) -> (Feat, Feat, Feat, Feat) {
    let pre = head.rpn_conv.forward(feat);
    let t = pre.mapv(|v| v.max(0.0));
    let cls = head.cls.forward(&t);
    let reg = head.reg.forward(&t);
    (cls, reg, pre, t)
}

/// Per-anchor pre-sigmoid logits and delta 4-vectors in anchor order.
pub fn rpn_forward(feat: &FeatureMap, head: &DetectionHead) -> Result<(Vec<f64>, Vec<[f64; 4]>)> {
    if feat.stride != DEEP_STRIDE {
        return Err(MpsnError::Contract(format!(
            "rpn_forward expects stride-{DEEP_STRIDE} features, got {}",
            feat.stride
        )));
    }
    let (cls_map, reg_map) = rpn_forward_maps(&feat.values, head);
    Ok((flatten_cls(&cls_map), flatten_reg(&reg_map)))
}

pub(crate) fn flatten_cls(map: &Feat) -> Vec<f64> {
    let (a, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut out = Vec::with_capacity(a * h * w);
    for row in 0..h {
        for col in 0..w {
            for ai in 0..a {
                out.push(map[[ai, row, col]]);
            }
        }
    }
    out
}

pub(crate) fn flatten_reg(map: &Feat) -> Vec<[f64; 4]> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let a = c / 4;
    let mut out = Vec::with_capacity(a * h * w);
    for row in 0..h {
        for col in 0..w {
            for ai in 0..a {
                out.push([
                    map[[ai * 4, row, col]],
                    map[[ai * 4 + 1, row, col]],
                    map[[ai * 4 + 2, row, col]],
                    map[[ai * 4 + 3, row, col]],
                ]);
            }
        }
    }
    out
}

/// Scatter per-anchor logit gradients back to map layout.
pub(crate) fn scatter_cls_grad(grads: &[f64], h: usize, w: usize) -> Feat {
    let mut out = Feat::zeros((ANCHORS_PER_CELL, h, w));
    let mut i = 0;
    for row in 0..h {
        for col in 0..w {
            for ai in 0..ANCHORS_PER_CELL {
                out[[ai, row, col]] = grads[i];
                i += 1;
            }
        }
    }
    out
}

pub(crate) fn scatter_reg_grad(grads: &[[f64; 4]], h: usize, w: usize) -> Feat {
    let mut out = Feat::zeros((4 * ANCHORS_PER_CELL, h, w));
    let mut i = 0;
    for row in 0..h {
        for col in 0..w {
            for ai in 0..ANCHORS_PER_CELL {
                for d in 0..4 {
                    out[[ai * 4 + d, row, col]] = grads[i][d];
                }
                i += 1;
            }
        }
    }
    out
}

/// Result of decoding deltas against anchors.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub boxes: Vec<BBox>,
    /// Anchor index each kept box came from.
    pub indices: Vec<usize>,
    /// Count of boxes rejected for non-finite deltas.
    pub dropped: usize,
}

/// Decode center/size offsets against anchors and clip to image bounds.
///
/// `cx = ax + aw * tx`, `cy = ay + ah * ty`, `w = aw * exp(tw)`,
/// `h = ah * exp(th)`.
pub fn decode_boxes(
    anchors: &AnchorSet,
    deltas: &[[f64; 4]],
    img_w: f64,
    img_h: f64,
) -> Result<DecodeResult> {
    if anchors.anchors.len() != deltas.len() {
        return Err(MpsnError::Contract(format!(
            "decode_boxes: {} anchors vs {} deltas",
            anchors.anchors.len(),
            deltas.len()
        )));
    }
    let mut boxes = Vec::with_capacity(deltas.len());
    let mut indices = Vec::with_capacity(deltas.len());
    let mut dropped = 0;
    for (i, (anchor, d)) in anchors.anchors.iter().zip(deltas).enumerate() {
        if d.iter().any(|v| !v.is_finite()) {
            dropped += 1;
            continue;
        }
        let (acx, acy) = anchor.center();
        let (aw, ah) = (anchor.width(), anchor.height());
        let cx = acx + aw * d[0];
        let cy = acy + ah * d[1];
        let w = aw * d[2].exp();
        let h = ah * d[3].exp();
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            dropped += 1;
            continue;
        }
        let b = BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
            .clip(img_w, img_h);
        boxes.push(b);
        indices.push(i);
    }
    Ok(DecodeResult {
        boxes,
        indices,
        dropped,
    })
}

/// Inverse of [`decode_boxes`] for one anchor/target pair.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Greedy non-maximum suppression. Boxes below `score_thresh` are dropped
/// first; survivors are emitted in descending score order, ties broken by
/// lower input index.
pub fn nms(dets: &DetectionSet, iou_thresh: f64, score_thresh: f64) -> DetectionSet {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets.scores[i] >= score_thresh)
        .collect();
    order.sort_by(|&a, &b| {
        dets.scores[b]
            .partial_cmp(&dets.scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|&k| dets.boxes[k].iou(&dets.boxes[i]) > iou_thresh);
        if !suppressed {
            kept.push(i);
        }
    }
    DetectionSet {
        boxes: kept.iter().map(|&i| dets.boxes[i]).collect(),
        scores: kept.iter().map(|&i| dets.scores[i]).collect(),
    }
}

/// Anchor label: positive, negative, or excluded from the loss.
pub const LABEL_POS: i8 = 1;
pub const LABEL_NEG: i8 = 0;
pub const LABEL_IGNORE: i8 = -1;

/// Assignment of anchors to ground truth.
#[derive(Debug, Clone)]
pub struct TargetAssignment {
    pub labels: Vec<i8>,
    /// Encoded regression target per anchor; meaningful only where the
    /// label is positive.
    pub reg_targets: Vec<[f64; 4]>,
}

/// Label anchors against ground truth: positive at IoU >= `pos_iou` or as
/// the best anchor of a ground-truth box, negative below `neg_iou`,
/// ignored in between.
pub fn assign_targets(
    anchors: &AnchorSet,
    gt: &[BBox],
    cfg: &HeadLossConfig,
) -> TargetAssignment {
    let n = anchors.anchors.len();
    let mut labels = vec![LABEL_NEG; n];
    let mut reg_targets = vec![[0.0; 4]; n];
    if gt.is_empty() {
        return TargetAssignment {
            labels,
            reg_targets,
        };
    }

    let mut matched_gt = vec![0usize; n];
    let mut max_iou = vec![0.0f64; n];
    for (ai, anchor) in anchors.anchors.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            let iou = anchor.iou(g);
            if iou > max_iou[ai] {
                max_iou[ai] = iou;
                matched_gt[ai] = gi;
            }
        }
    }
    for ai in 0..n {
        if max_iou[ai] >= cfg.pos_iou {
            labels[ai] = LABEL_POS;
        } else if max_iou[ai] < cfg.neg_iou {
            labels[ai] = LABEL_NEG;
        } else {
            labels[ai] = LABEL_IGNORE;
        }
    }
    // Force the best anchor(s) of each ground-truth box positive so every
    // target has at least one learner.
    for (gi, g) in gt.iter().enumerate() {
        let mut best = 0.0;
        for anchor in &anchors.anchors {
            best = f64::max(best, anchor.iou(g));
        }
        if best > 0.0 {
            for (ai, anchor) in anchors.anchors.iter().enumerate() {
                if anchor.iou(g) >= best - 1e-9 {
                    labels[ai] = LABEL_POS;
                    matched_gt[ai] = gi;
                    max_iou[ai] = best;
                }
            }
        }
    }
    for ai in 0..n {
        if labels[ai] == LABEL_POS {
            reg_targets[ai] = encode_box(&anchors.anchors[ai], &gt[matched_gt[ai]]);
        }
    }
    TargetAssignment {
        labels,
        reg_targets,
    }
}

fn softplus(t: f64) -> f64 {
    if t > 30.0 {
        t
    } else {
        t.exp().ln_1p()
    }
}

/// Focal loss value plus the count of scored (non-ignored) anchors; the
/// count is zero when every anchor was ignored, in which case the loss is
/// zero and the caller may warn.
#[derive(Debug, Clone, Copy)]
pub struct FocalLossOutput {
    pub loss: f64,
    pub n_scored: usize,
}

/// Mean focal loss over non-ignored anchors:
/// `-alpha_t * (1 - p_t)^gamma * log(p_t)` with `p = sigmoid(logit)`.
pub fn focal_loss(logits: &[f64], labels: &[i8], cfg: &HeadLossConfig) -> FocalLossOutput {
    focal_loss_with_grad(logits, labels, cfg, None)
}

/// Shared forward/backward path. When `grad_out` is supplied it is filled
/// with `d loss / d logit` per anchor (zero for ignored anchors).
pub(crate) fn focal_loss_with_grad(
    logits: &[f64],
    labels: &[i8],
    cfg: &HeadLossConfig,
    mut grad_out: Option<&mut Vec<f64>>,
) -> FocalLossOutput {
    assert_eq!(logits.len(), labels.len(), "logits/labels length");
    if let Some(g) = grad_out.as_deref_mut() {
        g.clear();
        g.resize(logits.len(), 0.0);
    }
    let (gamma, alpha) = (cfg.focal_gamma, cfg.focal_alpha);
    let mut total = 0.0;
    let mut n_scored = 0usize;
    let mut raw_grads: Vec<(usize, f64)> = Vec::new();
    for (i, (&z, &label)) in logits.iter().zip(labels).enumerate() {
        let p = crate::nn::sigmoid(z);
        let (loss, dz) = match label {
            LABEL_POS => {
                let log_p = -softplus(-z);
                let l = -alpha * (1.0 - p).powf(gamma) * log_p;
                let d = alpha * (1.0 - p).powf(gamma) * (gamma * p * log_p - (1.0 - p));
                (l, d)
            }
            LABEL_NEG => {
                let log_1p = -softplus(z);
                let l = -(1.0 - alpha) * p.powf(gamma) * log_1p;
                let d = (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_1p);
                (l, d)
            }
            _ => continue,
        };
        total += loss;
        n_scored += 1;
        if grad_out.is_some() {
            raw_grads.push((i, dz));
        }
    }
    if n_scored == 0 {
        return FocalLossOutput {
            loss: 0.0,
            n_scored: 0,
        };
    }
    if let Some(g) = grad_out {
        for (i, dz) in raw_grads {
            g[i] = dz / n_scored as f64;
        }
    }
    FocalLossOutput {
        loss: total / n_scored as f64,
        n_scored,
    }
}

fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Mean smooth-L1 over the coordinates of positive anchors; zero when no
/// anchor is positive.
pub fn regression_loss(deltas: &[[f64; 4]], targets: &[[f64; 4]], labels: &[i8]) -> f64 {
    regression_loss_with_grad(deltas, targets, labels, None)
}

pub(crate) fn regression_loss_with_grad(
    deltas: &[[f64; 4]],
    targets: &[[f64; 4]],
    labels: &[i8],
    mut grad_out: Option<&mut Vec<[f64; 4]>>,
) -> f64 {
    assert_eq!(deltas.len(), targets.len());
    assert_eq!(deltas.len(), labels.len());
    if let Some(g) = grad_out.as_deref_mut() {
        g.clear();
        g.resize(deltas.len(), [0.0; 4]);
    }
    let n_pos = labels.iter().filter(|&&l| l == LABEL_POS).count();
    if n_pos == 0 {
        return 0.0;
    }
    let denom = (4 * n_pos) as f64;
    let mut total = 0.0;
    for i in 0..deltas.len() {
        if labels[i] != LABEL_POS {
            continue;
        }
        for d in 0..4 {
            let diff = deltas[i][d] - targets[i][d];
            total += smooth_l1(diff);
            if let Some(g) = grad_out.as_deref_mut() {
                g[i][d] = smooth_l1_grad(diff) / denom;
            }
        }
    }
    total / denom
}

// Full-pipeline inference lives in `network`; re-exported here so detection
// callers have one import site.
pub use crate::network::{detect, DetectConfig};
