use mpsn::dataset::{sequences_to_samples, synth_generate, SynthParams};
use mpsn::head::{
    assign_targets, generate_anchors, rpn_forward, HeadLossConfig, ANCHOR_SIZES,
};
use mpsn::network::{detector_features, DetectConfig};
use mpsn::nn::sigmoid;
use mpsn::train::{train, validation_ap, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let cls_pos_norm = args.get(2).map(|s| s == "pn").unwrap_or(false);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);

    let params = SynthParams::default();
    let seqs = synth_generate(&params).unwrap();
    let train_samples = sequences_to_samples(&seqs[..5], 1).unwrap();
    let val_samples = sequences_to_samples(&seqs[5..6], 1).unwrap();

    let clip: Option<f64> = match args.get(4).map(|s| s.as_str()) {
        Some("none") => None,
        Some(v) => Some(v.parse().unwrap()),
        None => Some(10.0),
    };
    let momentum: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.9);

    let batch_size: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1);

    let mut cfg = TrainConfig {
        epochs: 1,
        lr_schedule: vec![(0, lr)],
        seed: 0,
        clip_norm: clip,
        momentum,
        batch_size,
        ..Default::default()
    };
    cfg.loss.cls_pos_norm = cls_pos_norm;

    // Train epoch by epoch, re-seeding identically, to watch evolution.
    let det_cfg = DetectConfig {
        score_thresh: 0.05,
        ..Default::default()
    };
    let loss_cfg = HeadLossConfig {
        cls_pos_norm,
        ..Default::default()
    };

    let mut full_cfg = cfg.clone();
    full_cfg.epochs = epochs;
    let out = train(&full_cfg, &train_samples, &val_samples, None).unwrap();
    for m in &out.metrics {
        println!(
            "epoch {} lr {} loss {:.5} val_ap {:.4}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.val_ap50.unwrap_or(-1.0)
        );
    }

    // Probability stats of the final model on train + val samples.
    for (tag, samples) in [("train", &train_samples), ("val", &val_samples)] {
        let mut pos_p = Vec::new();
        let mut neg_p_max: Vec<f64> = Vec::new();
        for s in samples.iter() {
            let feat = detector_features(&out.bundle, s, None, &det_cfg).unwrap();
            let (logits, _) = rpn_forward(&feat, &out.bundle.head).unwrap();
            let anchors = generate_anchors(feat.height(), feat.width(), 16, ANCHOR_SIZES);
            let a = assign_targets(&anchors, &s.boxes, &loss_cfg);
            let mut frame_neg_max: f64 = 0.0;
            for (i, &l) in a.labels.iter().enumerate() {
                let p = sigmoid(logits[i]);
                if l == 1 {
                    pos_p.push(p);
                } else if l == 0 {
                    frame_neg_max = frame_neg_max.max(p);
                }
            }
            neg_p_max.push(frame_neg_max);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        pos_p.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "{tag}: mean pos p {:.3} (min {:.3}), mean per-frame max neg p {:.3}",
            mean(&pos_p),
            pos_p.first().unwrap(),
            mean(&neg_p_max)
        );
        let ap = validation_ap(&out.bundle, samples, None, &det_cfg).unwrap();
        println!("{tag}: AP50 {:.4}", ap);
    }
}
