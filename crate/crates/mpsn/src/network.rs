//! End-to-end model pipeline: input preparation, training forward/backward,
//! and inference.
//!
//! Dataflow for the dual-stream variants:
//!
//! ```text
//! frame  -> FN  -> h_fn  --+--> (sfa) -> BN  -> h_bn  --+
//! motion -> FDN -> h_fdn --+---------->  BDN -> h_bdn --+-> (dfa) -> APC -> cls/reg
//! ```
//!
//! The shallow sum feeds BN while the untouched motion feature feeds BDN.
//! Backward returns parameter gradients plus gradients w.r.t. both input
//! images, which the adversarial harness consumes.

use ndarray::Array3;

use crate::aggregation::AggregationParams;
use crate::backbone::{FeatureMap, ModelBundle, ModelVariant, DEEP_STRIDE, MIN_INPUT_SIDE};
use crate::error::{MpsnError, Result};
use crate::head::{
    assign_targets, decode_boxes, flatten_cls, flatten_reg, focal_loss_with_grad,
    generate_anchors, nms, regression_loss_with_grad, rpn_forward_maps,
    rpn_forward_maps_train, scatter_cls_grad, scatter_reg_grad, BBox, DetectionSet,
    HeadLossConfig, ANCHOR_SIZES,
};
use crate::motion::{frame_difference, flow_motion, FlowProvider, FrameSample};
use crate::nn::{sigmoid, BlockCache, BlockGrad, ConvGrad, Feat, SubNetCache, SubNetGrad};

/// Inference-time thresholds.
#[derive(Debug, Clone, Copy)]
pub struct DetectConfig {
    pub nms_iou: f64,
    pub score_thresh: f64,
    /// Displacement normalization for flow encoding.
    pub max_disp: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            nms_iou: 0.3,
            score_thresh: 0.5,
            max_disp: crate::motion::DEFAULT_MAX_DISP,
        }
    }
}

/// Zero-pad bottom/right to the next multiple of `m`. Annotations are not
/// shifted: padding never moves the origin.
pub fn pad_to_multiple(x: &Feat, m: usize) -> Feat {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    if ph == h && pw == w {
        return x.clone();
    }
    let mut out = Array3::<f64>::zeros((c, ph, pw));
    out.slice_mut(ndarray::s![.., ..h, ..w]).assign(x);
    out
}

fn crop(x: &Feat, h: usize, w: usize) -> Feat {
    x.slice(ndarray::s![.., ..h, ..w]).to_owned()
}

/// Model inputs after motion computation and padding.
#[derive(Debug, Clone)]
pub struct NetworkInput {
    /// Padded current frame.
    pub frame: Feat,
    /// Padded motion-stream image (absent for the single-frame baseline).
    pub motion: Option<Feat>,
    /// Original (unpadded) frame height and width.
    pub orig_h: usize,
    pub orig_w: usize,
}

impl NetworkInput {
    pub fn padded_h(&self) -> usize {
        self.frame.shape()[1]
    }

    pub fn padded_w(&self) -> usize {
        self.frame.shape()[2]
    }
}

/// Build the network input for a sample according to the bundle's variant.
/// The flow variant requires a provider.
pub fn prepare_input(
    bundle: &ModelBundle,
    sample: &FrameSample,
    flow: Option<&dyn FlowProvider>,
    cfg: &DetectConfig,
) -> Result<NetworkInput> {
    let (h, w) = (sample.current.height(), sample.current.width());
    if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
        return Err(MpsnError::InputTooSmall {
            height: h,
            width: w,
            min: MIN_INPUT_SIDE,
        });
    }
    let motion = match bundle.variant {
        ModelVariant::SingleFrame => None,
        ModelVariant::TwoFrames => Some(sample.previous.pixels.clone()),
        ModelVariant::DiffAbs => Some(frame_difference(&sample.current, &sample.previous)?.pixels),
        ModelVariant::Flow => {
            let provider = flow.ok_or_else(|| {
                MpsnError::Contract("flow variant requires a flow provider".into())
            })?;
            Some(
                flow_motion(
                    &sample.current,
                    &sample.previous,
                    provider,
                    &sample.source_id,
                    cfg.max_disp,
                )?
                .pixels,
            )
        }
    };
    Ok(NetworkInput {
        frame: pad_to_multiple(&sample.current.pixels, DEEP_STRIDE),
        motion: motion.map(|m| pad_to_multiple(&m, DEEP_STRIDE)),
        orig_h: h,
        orig_w: w,
    })
}

/// Everything the backward pass needs from a training forward pass.
pub(crate) struct ForwardTrace {
    fn_cache: SubNetCache,
    bn_cache: SubNetCache,
    fdn_cache: Option<SubNetCache>,
    bdn_cache: Option<SubNetCache>,
    apc_cache: BlockCache,
    /// sigmoid(h_bdn), cached for the aggregation backward.
    mask: Option<Feat>,
    h_bn: Feat,
    /// APC output: the last conv-stage features, also the CAM source.
    pub h_det: Feat,
    /// Shared RPN stage pre-activation and activation.
    rpn_pre: Feat,
    rpn_act: Feat,
    pub cls_map: Feat,
    pub reg_map: Feat,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Training-mode forward pass with caches.
pub(crate) fn forward_train(bundle: &ModelBundle, input: &NetworkInput) -> Result<ForwardTrace> {
    let (h_fn, fn_cache) = bundle.fn_net.forward_train(input.frame.clone());

    let (h_agg, fdn_cache, bdn_cache, bn_cache, mask, h_bn);
    match (&bundle.motion, &input.motion) {
        (Some(streams), Some(motion_img)) => {
            let (h_fdn, fdn_c) = streams.fdn.forward_train(motion_img.clone());
            if h_fdn.shape() != h_fn.shape() {
                return Err(MpsnError::dim(
                    "shallow stream outputs",
                    format!("{:?}", h_fn.shape()),
                    format!("{:?}", h_fdn.shape()),
                ));
            }
            let sfa_out = &h_fn + &h_fdn;
            let (bn_out, bn_c) = bundle.bn_net.forward_train(sfa_out);
            let (h_bdn, bdn_c) = streams.bdn.forward_train(h_fdn);
            match bundle.variant {
                ModelVariant::TwoFrames => {
                    h_agg = &bn_out + &h_bdn;
                    mask = None;
                }
                _ => {
                    let m = h_bdn.mapv(sigmoid);
                    let p = bundle.agg;
                    let mut agg = Feat::zeros(bn_out.raw_dim());
                    ndarray::Zip::from(&mut agg)
                        .and(&bn_out)
                        .and(&m)
                        .and(&h_bdn)
                        .for_each(|o, &b, &s, &d| *o = p.alpha * b * s + p.beta * d);
                    h_agg = agg;
                    mask = Some(m);
                }
            }
            h_bn = bn_out;
            fdn_cache = Some(fdn_c);
            bdn_cache = Some(bdn_c);
            bn_cache = bn_c;
        }
        (None, None) => {
            let (bn_out, bn_c) = bundle.bn_net.forward_train(h_fn.clone());
            h_agg = bn_out.clone();
            h_bn = bn_out;
            bn_cache = bn_c;
            fdn_cache = None;
            bdn_cache = None;
            mask = None;
        }
        _ => {
            return Err(MpsnError::Contract(
                "bundle variant and prepared input disagree about the motion stream".into(),
            ))
        }
    }

    let (h_det, apc_cache) = bundle.head.apc.forward_train(h_agg);
    let (cls_map, reg_map, rpn_pre, rpn_act) = rpn_forward_maps_train(&h_det, &bundle.head);
    let grid_h = h_det.shape()[1];
    let grid_w = h_det.shape()[2];
    Ok(ForwardTrace {
        fn_cache,
        bn_cache,
        fdn_cache,
        bdn_cache,
        apc_cache,
        mask,
        h_bn,
        h_det,
        rpn_pre,
        rpn_act,
        cls_map,
        reg_map,
        grid_h,
        grid_w,
    })
}

/// Gradients for every parameter tensor of a bundle, same traversal order
/// as [`ModelBundle::params_mut`].
pub struct BundleGrads {
    pub fn_g: SubNetGrad,
    pub bn_g: SubNetGrad,
    pub fdn_g: Option<SubNetGrad>,
    pub bdn_g: Option<SubNetGrad>,
    pub apc_g: BlockGrad,
    pub rpn_g: ConvGrad,
    pub cls_g: ConvGrad,
    pub reg_g: ConvGrad,
}

impl BundleGrads {
    pub fn tensors(&self) -> Vec<&ndarray::ArrayD<f64>> {
        let mut out = self.fn_g.tensors();
        out.extend(self.bn_g.tensors());
        if let Some(g) = &self.fdn_g {
            out.extend(g.tensors());
        }
        if let Some(g) = &self.bdn_g {
            out.extend(g.tensors());
        }
        out.extend(self.apc_g.tensors());
        out.push(&self.rpn_g.dw);
        out.push(&self.rpn_g.db);
        out.push(&self.cls_g.dw);
        out.push(&self.cls_g.db);
        out.push(&self.reg_g.dw);
        out.push(&self.reg_g.db);
        out
    }
}

/// One training step's losses and gradients.
pub struct StepOutput {
    pub loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub n_pos: usize,
    pub grads: BundleGrads,
    /// Gradient w.r.t. the padded current frame input.
    pub d_frame: Feat,
    /// Gradient w.r.t. the padded motion-stream input.
    pub d_motion: Option<Feat>,
}

/// Full forward + loss + backward for one sample.
pub fn loss_and_grads(
    bundle: &ModelBundle,
    input: &NetworkInput,
    gt: &[BBox],
    cfg: &HeadLossConfig,
) -> Result<StepOutput> {
    let trace = forward_train(bundle, input)?;
    let anchors = generate_anchors(trace.grid_h, trace.grid_w, DEEP_STRIDE, ANCHOR_SIZES);
    let assignment = assign_targets(&anchors, gt, cfg);

    let logits = flatten_cls(&trace.cls_map);
    let deltas = flatten_reg(&trace.reg_map);

    let mut dlogits = Vec::new();
    let focal = focal_loss_with_grad(&logits, &assignment.labels, cfg, Some(&mut dlogits));
    let mut ddeltas = Vec::new();
    let reg = regression_loss_with_grad(
        &deltas,
        &assignment.reg_targets,
        &assignment.labels,
        Some(&mut ddeltas),
    );
    let n_pos = assignment
        .labels
        .iter()
        .filter(|&&l| l == crate::head::LABEL_POS)
        .count();
    // Optional per-positive renormalization of the classification term.
    let cls_scale = if cfg.cls_pos_norm && n_pos > 0 {
        focal.n_scored as f64 / n_pos as f64
    } else {
        1.0
    };
    if cls_scale != 1.0 {
        for g in dlogits.iter_mut() {
            *g *= cls_scale;
        }
    }
    let cls_loss = focal.loss * cls_scale;
    let loss = cls_loss + cfg.reg_weight * reg;
    if !loss.is_finite() {
        return Err(MpsnError::Numeric {
            context: "loss".into(),
            detail: format!("cls={cls_loss} reg={reg}"),
        });
    }

    // Head backward.
    let dcls_map = scatter_cls_grad(&dlogits, trace.grid_h, trace.grid_w);
    for g in ddeltas.iter_mut() {
        for v in g.iter_mut() {
            *v *= cfg.reg_weight;
        }
    }
    let dreg_map = scatter_reg_grad(&ddeltas, trace.grid_h, trace.grid_w);
    let (cls_g, d_det_cls) = bundle.head.cls.backward(&trace.h_det, &dcls_map);
    let (reg_g, d_det_reg) = bundle.head.reg.backward(&trace.h_det, &dreg_map);
    let d_det = d_det_cls + d_det_reg;
    let (apc_g, d_agg) = bundle.head.apc.backward(&trace.apc_cache, &d_det);

    // Aggregation backward, then the four sub-networks.
    let (fn_g, bn_g, fdn_g, bdn_g, d_frame, d_motion);
    match (&bundle.motion, &trace.fdn_cache, &trace.bdn_cache) {
        (Some(streams), Some(fdn_cache), Some(bdn_cache)) => {
            let (d_hbn, d_hbdn) = match bundle.variant {
                ModelVariant::TwoFrames => (d_agg.clone(), d_agg),
                _ => {
                    let mask = trace.mask.as_ref().unwrap();
                    let p: AggregationParams = bundle.agg;
                    let mut d_hbn = Feat::zeros(d_agg.raw_dim());
                    let mut d_hbdn = Feat::zeros(d_agg.raw_dim());
                    ndarray::Zip::from(&mut d_hbn)
                        .and(&mut d_hbdn)
                        .and(&d_agg)
                        .and(mask)
                        .and(&trace.h_bn)
                        .for_each(|dbn, dbdn, &du, &s, &bn| {
                            *dbn = p.alpha * du * s;
                            *dbdn = du * (p.alpha * bn * s * (1.0 - s) + p.beta);
                        });
                    (d_hbn, d_hbdn)
                }
            };
            let (bn_grads, d_sfa) = bundle.bn_net.backward(&trace.bn_cache, &d_hbn);
            let (bdn_grads, d_hfdn_deep) = streams.bdn.backward(bdn_cache, &d_hbdn);
            // SFA fan-out: h_fdn feeds both the sum into BN and BDN itself.
            let d_hfn = d_sfa.clone();
            let d_hfdn = d_hfdn_deep + &d_sfa;
            let (fn_grads, d_f) = bundle.fn_net.backward(&trace.fn_cache, &d_hfn);
            let (fdn_grads, d_m) = streams.fdn.backward(fdn_cache, &d_hfdn);
            fn_g = fn_grads;
            bn_g = bn_grads;
            fdn_g = Some(fdn_grads);
            bdn_g = Some(bdn_grads);
            d_frame = d_f;
            d_motion = Some(d_m);
        }
        _ => {
            let (bn_grads, d_hfn) = bundle.bn_net.backward(&trace.bn_cache, &d_agg);
            let (fn_grads, d_f) = bundle.fn_net.backward(&trace.fn_cache, &d_hfn);
            fn_g = fn_grads;
            bn_g = bn_grads;
            fdn_g = None;
            bdn_g = None;
            d_frame = d_f;
            d_motion = None;
        }
    }

    Ok(StepOutput {
        loss,
        cls_loss,
        reg_loss: reg,
        n_pos,
        grads: BundleGrads {
            fn_g,
            bn_g,
            fdn_g,
            bdn_g,
            apc_g,
            cls_g,
            reg_g,
        },
        d_frame,
        d_motion,
    })
}

/// Gradients of the detection loss w.r.t. the two original (unpadded)
/// input frames, with the motion operator chained through.
pub struct InputGradients {
    pub d_current: Feat,
    pub d_previous: Feat,
    pub loss: f64,
}

pub fn input_gradients(
    bundle: &ModelBundle,
    sample: &FrameSample,
    flow: Option<&dyn FlowProvider>,
    loss_cfg: &HeadLossConfig,
    det_cfg: &DetectConfig,
) -> Result<InputGradients> {
    let input = prepare_input(bundle, sample, flow, det_cfg)?;
    let step = loss_and_grads(bundle, &input, &sample.boxes, loss_cfg)?;
    let (h, w) = (input.orig_h, input.orig_w);
    let mut d_current = crop(&step.d_frame, h, w);
    let mut d_previous = Feat::zeros(d_current.raw_dim());
    match bundle.variant {
        ModelVariant::SingleFrame => {}
        ModelVariant::TwoFrames => {
            d_previous = crop(step.d_motion.as_ref().unwrap(), h, w);
        }
        ModelVariant::DiffAbs => {
            // The motion image is |current - previous|: route its gradient
            // through the per-pixel sign (zero where the frames agree).
            let d_m = crop(step.d_motion.as_ref().unwrap(), h, w);
            ndarray::Zip::from(&mut d_current)
                .and(&mut d_previous)
                .and(&d_m)
                .and(&sample.current.pixels)
                .and(&sample.previous.pixels)
                .for_each(|dc, dp, &dm, &c, &p| {
                    let s = (c - p).signum() * f64::from(c != p);
                    *dc += dm * s;
                    *dp = -dm * s;
                });
        }
        ModelVariant::Flow => {
            // External flow providers are not differentiable; the frame
            // gradient is the direct path only.
        }
    }
    Ok(InputGradients {
        d_current,
        d_previous,
        loss: step.loss,
    })
}

/// Inference-only forward to the APC output (the CAM source layer).
pub fn detector_features(
    bundle: &ModelBundle,
    sample: &FrameSample,
    flow: Option<&dyn FlowProvider>,
    cfg: &DetectConfig,
) -> Result<FeatureMap> {
    let input = prepare_input(bundle, sample, flow, cfg)?;
    let h_agg = forward_features(bundle, &input)?;
    Ok(FeatureMap::new(
        bundle.head.apc.forward(&h_agg),
        DEEP_STRIDE,
    ))
}

/// Cache-free forward to the aggregated deep features.
fn forward_features(bundle: &ModelBundle, input: &NetworkInput) -> Result<Feat> {
    let h_fn = bundle.fn_net.forward(&input.frame);
    match (&bundle.motion, &input.motion) {
        (Some(streams), Some(motion_img)) => {
            let h_fdn = streams.fdn.forward(motion_img);
            if h_fdn.shape() != h_fn.shape() {
                return Err(MpsnError::dim(
                    "shallow stream outputs",
                    format!("{:?}", h_fn.shape()),
                    format!("{:?}", h_fdn.shape()),
                ));
            }
            let sfa_out = &h_fn + &h_fdn;
            let h_bn = bundle.bn_net.forward(&sfa_out);
            let h_bdn = streams.bdn.forward(&h_fdn);
            match bundle.variant {
                ModelVariant::TwoFrames => Ok(&h_bn + &h_bdn),
                _ => {
                    let p = bundle.agg;
                    let mut agg = Feat::zeros(h_bn.raw_dim());
                    ndarray::Zip::from(&mut agg)
                        .and(&h_bn)
                        .and(&h_bdn)
                        .for_each(|o, &b, &d| *o = p.alpha * b * sigmoid(d) + p.beta * d);
                    Ok(agg)
                }
            }
        }
        (None, None) => Ok(bundle.bn_net.forward(&h_fn)),
        _ => Err(MpsnError::Contract(
            "bundle variant and prepared input disagree about the motion stream".into(),
        )),
    }
}

/// Full inference: motion, streams, aggregation, APC, per-anchor scoring,
/// decode, NMS. Boxes stay within the padded image bounds.
pub fn detect(
    bundle: &ModelBundle,
    sample: &FrameSample,
    flow: Option<&dyn FlowProvider>,
    cfg: &DetectConfig,
) -> Result<DetectionSet> {
    let input = prepare_input(bundle, sample, flow, cfg)?;
    let h_agg = forward_features(bundle, &input)?;
    let h_det = bundle.head.apc.forward(&h_agg);
    let (cls_map, reg_map) = rpn_forward_maps(&h_det, &bundle.head);
    let logits = flatten_cls(&cls_map);
    let deltas = flatten_reg(&reg_map);
    let (grid_h, grid_w) = (h_det.shape()[1], h_det.shape()[2]);
    let anchors = generate_anchors(grid_h, grid_w, DEEP_STRIDE, ANCHOR_SIZES);
    let decoded = decode_boxes(
        &anchors,
        &deltas,
        input.padded_w() as f64,
        input.padded_h() as f64,
    )?;
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for (b, &ai) in decoded.boxes.iter().zip(&decoded.indices) {
        if b.is_valid() {
            boxes.push(*b);
            scores.push(sigmoid(logits[ai]));
        }
    }
    Ok(nms(&DetectionSet { boxes, scores }, cfg.nms_iou, cfg.score_thresh))
}
