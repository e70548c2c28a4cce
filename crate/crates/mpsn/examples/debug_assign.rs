use mpsn::dataset::{sequences_to_samples, synth_generate, SynthParams};
use mpsn::head::{assign_targets, generate_anchors, HeadLossConfig, ANCHOR_SIZES};

fn main() {
    let params = SynthParams::default();
    let seqs = synth_generate(&params).unwrap();
    let samples = sequences_to_samples(&seqs[..5], 1).unwrap();
    let anchors = generate_anchors(6, 6, 16, ANCHOR_SIZES);
    for pos in [0.7, 0.5] {
        let cfg = HeadLossConfig {
            pos_iou: pos,
            ..Default::default()
        };
        let mut n_pos = 0;
        let mut n_ign = 0;
        let mut max_best: f64 = 0.0;
        for s in &samples {
            let a = assign_targets(&anchors, &s.boxes, &cfg);
            n_pos += a.labels.iter().filter(|&&l| l == 1).count();
            n_ign += a.labels.iter().filter(|&&l| l == -1).count();
            for g in &s.boxes {
                let best = anchors
                    .anchors
                    .iter()
                    .map(|an| an.iou(g))
                    .fold(0.0, f64::max);
                max_best = max_best.max(best);
            }
        }
        println!(
            "pos_iou {pos}: positives {n_pos}, ignored {n_ign} over {} samples (best anchor IoU seen {max_best:.3})",
            samples.len()
        );
    }
}
