use mpsn::dataset::{sequences_to_samples, synth_generate, SynthParams};
use mpsn::head::{
    assign_targets, generate_anchors, rpn_forward, HeadLossConfig, ANCHOR_SIZES,
};
use mpsn::network::{detect, detector_features, DetectConfig};
use mpsn::nn::sigmoid;
use mpsn::train::load_checkpoint;

fn main() {
    let params = SynthParams::default();
    let seqs = synth_generate(&params).unwrap();
    let samples = sequences_to_samples(&seqs[..1], 1).unwrap();
    let bundle = load_checkpoint(std::path::Path::new("/tmp/expK/model.ckpt")).unwrap();
    let det_cfg = DetectConfig {
        score_thresh: 0.05,
        ..Default::default()
    };

    let s = &samples[0];
    println!("gt boxes: {:?}", s.boxes);

    // Scores at the assigned positive anchors.
    let feat = detector_features(&bundle, s, None, &det_cfg).unwrap();
    let (logits, deltas) = rpn_forward(&feat, &bundle.head).unwrap();
    let anchors = generate_anchors(feat.height(), feat.width(), 16, ANCHOR_SIZES);
    let assignment = assign_targets(&anchors, &s.boxes, &HeadLossConfig::default());
    for (ai, &label) in assignment.labels.iter().enumerate() {
        if label == 1 {
            println!(
                "positive anchor {ai} {:?} -> p={:.3} deltas={:?} target={:?}",
                anchors.anchors[ai],
                sigmoid(logits[ai]),
                deltas[ai],
                assignment.reg_targets[ai],
            );
        }
    }
    let mut ps: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    ps.sort_by(|a, b| b.partial_cmp(a).unwrap());
    println!("top-8 anchor probs: {:?}", &ps[..8]);

    let dets = detect(&bundle, s, None, &det_cfg).unwrap();
    for i in 0..dets.len().min(6) {
        println!("det {:?} score {:.3}", dets.boxes[i], dets.scores[i]);
    }
}
