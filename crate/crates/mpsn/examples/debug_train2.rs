use mpsn::backbone::{build_bundle, BackboneSplitSpec, InitPolicy, ModelVariant};
use mpsn::dataset::{sequences_to_samples, synth_generate, SynthParams};
use mpsn::head::{
    assign_targets, decode_boxes, generate_anchors, rpn_forward, HeadLossConfig, ANCHOR_SIZES,
};
use mpsn::network::{detector_features, loss_and_grads, prepare_input, DetectConfig};
use mpsn::nn::Sgd;
use mpsn::train::validation_ap;
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let pn = args.get(2).map(|s| s == "pn").unwrap_or(false);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let reg_weight: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let alpha: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let pos_iou: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.7);
    let neg_iou: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.3);

    let params = SynthParams::default();
    let seqs = synth_generate(&params).unwrap();
    let train_samples = sequences_to_samples(&seqs[..5], 1).unwrap();
    let val_samples = sequences_to_samples(&seqs[5..6], 1).unwrap();

    let spec = BackboneSplitSpec::for_arch(mpsn::backbone::Arch::Tiny);
    let mut bundle = build_bundle(&spec, &InitPolicy::Random { seed: 0 }, ModelVariant::DiffAbs)
        .unwrap();
    let loss_cfg = HeadLossConfig {
        cls_pos_norm: pn,
        reg_weight,
        focal_alpha: alpha,
        pos_iou,
        neg_iou,
        ..Default::default()
    };
    let det_cfg = DetectConfig {
        score_thresh: 0.05,
        ..Default::default()
    };
    let mut opt = Sgd::new(0.9, 5e-4, Some(10.0));
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let (mut cls_sum, mut reg_sum) = (0.0, 0.0);
        for &i in &order {
            let s = &train_samples[i];
            let input = prepare_input(&bundle, s, None, &det_cfg).unwrap();
            let step = loss_and_grads(&bundle, &input, &s.boxes, &loss_cfg).unwrap();
            cls_sum += step.cls_loss;
            reg_sum += step.reg_loss;
            let grads: Vec<ArrayD<f64>> =
                step.grads.tensors().into_iter().cloned().collect();
            let refs: Vec<&ArrayD<f64>> = grads.iter().collect();
            opt.step(lr, bundle.params_mut(), refs);
        }
        let n = train_samples.len() as f64;
        // Positive-anchor box quality through the inference path, train set.
        let mut train_iou = Vec::new();
        for s in &train_samples {
            let feat = detector_features(&bundle, s, None, &det_cfg).unwrap();
            let (_, deltas) = rpn_forward(&feat, &bundle.head).unwrap();
            let anchors = generate_anchors(feat.height(), feat.width(), 16, ANCHOR_SIZES);
            let a = assign_targets(&anchors, &s.boxes, &loss_cfg);
            let dec = decode_boxes(&anchors, &deltas, 112.0, 112.0).unwrap();
            for (k, &ai) in dec.indices.iter().enumerate() {
                if a.labels[ai] == 1 {
                    let best = s
                        .boxes
                        .iter()
                        .map(|g| dec.boxes[k].iou(g))
                        .fold(0.0, f64::max);
                    train_iou.push(best);
                }
            }
        }
        let train_mean_iou = train_iou.iter().sum::<f64>() / train_iou.len().max(1) as f64;
        // Positive-anchor box quality on the val set.
        let mut pos_iou = Vec::new();
        for s in &val_samples {
            let feat = detector_features(&bundle, s, None, &det_cfg).unwrap();
            let (_, deltas) = rpn_forward(&feat, &bundle.head).unwrap();
            let anchors = generate_anchors(feat.height(), feat.width(), 16, ANCHOR_SIZES);
            let a = assign_targets(&anchors, &s.boxes, &loss_cfg);
            let dec = decode_boxes(&anchors, &deltas, 112.0, 112.0).unwrap();
            for (k, &ai) in dec.indices.iter().enumerate() {
                if a.labels[ai] == 1 {
                    let best = s
                        .boxes
                        .iter()
                        .map(|g| dec.boxes[k].iou(g))
                        .fold(0.0, f64::max);
                    pos_iou.push(best);
                }
            }
        }
        let mean_iou = pos_iou.iter().sum::<f64>() / pos_iou.len().max(1) as f64;
        let frac_ok = pos_iou.iter().filter(|&&v| v >= 0.5).count() as f64
            / pos_iou.len().max(1) as f64;
        let val_ap = validation_ap(&bundle, &val_samples, None, &det_cfg).unwrap();
        println!(
            "epoch {epoch}: cls {:.5} reg {:.5} | train pos-IoU {:.3} | val pos-IoU mean {:.3} (>=0.5: {:.2}) val AP {:.4}",
            cls_sum / n,
            reg_sum / n,
            train_mean_iou,
            mean_iou,
            frac_ok,
            val_ap
        );
        if epoch + 1 == epochs {
            for (si, s) in val_samples.iter().enumerate().take(6) {
                let dets = mpsn::network::detect(&bundle, s, None, &det_cfg).unwrap();
                let mut line = format!("frame {si}:");
                for i in 0..dets.len().min(4) {
                    let best = s
                        .boxes
                        .iter()
                        .map(|g| dets.boxes[i].iou(g))
                        .fold(0.0, f64::max);
                    line.push_str(&format!(
                        " [s={:.2} iou={:.2} w={:.0}]",
                        dets.scores[i],
                        best,
                        dets.boxes[i].width()
                    ));
                }
                println!("{line}");
            }
        }
    }
}
