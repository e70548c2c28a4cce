//! Adversarial robustness harness: FGSM perturbations, CAM heatmaps, the
//! NI feature-shift index, the motion-image perturbation bound, and the
//! small-perturbation threshold analysis.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, ModelBundle};
use crate::error::{MpsnError, Result};
use crate::eval::ap50;
use crate::head::HeadLossConfig;
use crate::motion::{frame_difference, FlowProvider, Frame, FrameSample};
use crate::network::{detect, detector_features, input_gradients, DetectConfig};
use crate::nn::Feat;

/// Attack sweep configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Perturbation magnitudes, ascending, each in [0, 1].
    pub epsilons: Vec<f64>,
    /// Clamp adversarial images back into [0, 1]. On for AP measurement
    /// (valid images); off when verifying the unclamped bound.
    pub clamp: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilons: vec![0.0, 0.02, 0.05, 0.1, 0.2],
            clamp: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        for pair in self.epsilons.windows(2) {
            if pair[1] < pair[0] {
                return Err(MpsnError::Config("epsilons must be ascending".into()));
            }
        }
        if self.epsilons.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(MpsnError::Config("epsilons must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn sorted(mut self) -> Self {
        self.epsilons
            .sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        self
    }
}

/// FGSM output: the adversarial sample plus the raw input gradients and a
/// flag set when the gradient vanished everywhere (sample returned
/// unchanged).
pub struct FgsmResult {
    pub sample: FrameSample,
    pub grad_current: Feat,
    pub grad_previous: Feat,
    pub zero_gradient: bool,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One-step gradient-sign attack on both frames of a sample. Each frame
/// moves by `eps` along the sign of the loss gradient w.r.t. itself.
pub fn fgsm_perturb(
    bundle: &ModelBundle,
    sample: &FrameSample,
    loss_cfg: &HeadLossConfig,
    det_cfg: &DetectConfig,
    flow: Option<&dyn FlowProvider>,
    eps: f64,
    clamp: bool,
) -> Result<FgsmResult> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(MpsnError::Config(format!("eps must be in [0,1], got {eps}")));
    }
    let grads = input_gradients(bundle, sample, flow, loss_cfg, det_cfg)?;
    let zero_gradient = grads.d_current.iter().all(|&v| v == 0.0)
        && grads.d_previous.iter().all(|&v| v == 0.0);

    let perturb = |pixels: &Feat, grad: &Feat| -> Feat {
        let mut out = pixels.clone();
        ndarray::Zip::from(&mut out).and(grad).for_each(|p, &g| {
            *p += eps * sign(g);
            if clamp {
                *p = p.clamp(0.0, 1.0);
            }
        });
        out
    };
    let adv_current = perturb(&sample.current.pixels, &grads.d_current);
    let adv_previous = perturb(&sample.previous.pixels, &grads.d_previous);
    let sample_out = FrameSample {
        current: Frame {
            pixels: adv_current,
            index: sample.current.index,
        },
        previous: Frame {
            pixels: adv_previous,
            index: sample.previous.index,
        },
        boxes: sample.boxes.clone(),
        source_id: sample.source_id.clone(),
    };
    Ok(FgsmResult {
        sample: sample_out,
        grad_current: grads.d_current,
        grad_previous: grads.d_previous,
        zero_gradient,
    })
}

/// Channel-aggregated heatmap of a feature map, min-max normalized to
/// [0, 1]; constant maps normalize to all 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct CamHeatmap {
    pub values: Array2<f64>,
    pub source_layer: String,
}

pub fn cam_heatmap(feat: &FeatureMap) -> CamHeatmap {
    let (c, h, w) = (feat.channels(), feat.height(), feat.width());
    let mut mean = Array2::<f64>::zeros((h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                mean[[y, x]] += feat.values[[ci, y, x]];
            }
        }
    }
    mean /= c as f64;
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo {
        mean.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array2::from_elem((h, w), 0.5)
    };
    CamHeatmap {
        values,
        source_layer: "apc".into(),
    }
}

/// Feature-shift index between clean and adversarial heatmap sets:
/// the 2-norm over cells of (mean difference / pooled population std),
/// where the std pools both sets and zero-std cells contribute nothing.
pub fn ni(cams_clean: &[CamHeatmap], cams_adv: &[CamHeatmap]) -> Result<f64> {
    if cams_clean.is_empty() || cams_adv.is_empty() {
        return Err(MpsnError::Contract("ni requires non-empty heatmap sets".into()));
    }
    let shape = cams_clean[0].values.raw_dim();
    for cam in cams_clean.iter().chain(cams_adv) {
        if cam.values.raw_dim() != shape {
            return Err(MpsnError::dim(
                "ni heatmaps",
                format!("{:?}", shape),
                format!("{:?}", cam.values.shape()),
            ));
        }
    }
    let n_cells = shape[0] * shape[1];
    let mut sum_sq = 0.0;
    for cell in 0..n_cells {
        let clean: Vec<f64> = cams_clean
            .iter()
            .map(|c| c.values.as_slice().unwrap()[cell])
            .collect();
        let adv: Vec<f64> = cams_adv
            .iter()
            .map(|c| c.values.as_slice().unwrap()[cell])
            .collect();
        let mean_clean = clean.iter().sum::<f64>() / clean.len() as f64;
        let mean_adv = adv.iter().sum::<f64>() / adv.len() as f64;
        let union_n = (clean.len() + adv.len()) as f64;
        let union_mean = (clean.iter().sum::<f64>() + adv.iter().sum::<f64>()) / union_n;
        let var = clean
            .iter()
            .chain(adv.iter())
            .map(|&v| (v - union_mean) * (v - union_mean))
            .sum::<f64>()
            / union_n;
        let std = var.sqrt();
        if std > 0.0 {
            let z = (mean_adv - mean_clean) / std;
            sum_sq += z * z;
        }
    }
    Ok(sum_sq.sqrt())
}

/// Verify the per-pixel motion-image perturbation bound
/// `|diff_adv - diff| <= eps * t` with `t = |sign(g_cur) - sign(g_prev)|`.
/// Requires the attack to have run unclamped. Returns whether the bound
/// holds and the maximum violation (negative when it holds with margin).
pub fn diff_bound_check(
    sample: &FrameSample,
    adv_sample: &FrameSample,
    eps: f64,
    grad_current: &Feat,
    grad_previous: &Feat,
) -> Result<(bool, f64)> {
    let diff = frame_difference(&sample.current, &sample.previous)?;
    // Adversarial frames may leave [0,1]; compute the difference directly.
    let mut max_violation = f64::NEG_INFINITY;
    ndarray::Zip::from(&adv_sample.current.pixels)
        .and(&adv_sample.previous.pixels)
        .and(&diff.pixels)
        .and(grad_current)
        .and(grad_previous)
        .for_each(|&ac, &ap, &d, &gc, &gp| {
            let adv_diff = (ac - ap).abs();
            let t = (sign(gc) - sign(gp)).abs();
            let violation = (adv_diff - d).abs() - eps * t;
            if violation > max_violation {
                max_violation = violation;
            }
        });
    Ok((max_violation <= 1e-9, max_violation))
}

/// Closed sub-intervals of [0, 1] on which `|j + eps*k| <= |l + eps*m|`,
/// from exact case analysis of the quadratic
/// `(l + eps*m)^2 - (j + eps*k)^2 >= 0`.
pub fn epsilon_threshold(j: f64, k: f64, l: f64, m: f64) -> Vec<(f64, f64)> {
    let a = m * m - k * k;
    let b = 2.0 * (l * m - j * k);
    let c = l * l - j * j;

    let clip = |lo: f64, hi: f64| -> Option<(f64, f64)> {
        let lo = lo.max(0.0);
        let hi = hi.min(1.0);
        if lo <= hi {
            Some((lo, hi))
        } else {
            None
        }
    };

    let mut intervals = Vec::new();
    if a == 0.0 {
        if b == 0.0 {
            if c >= 0.0 {
                intervals.push((0.0, 1.0));
            }
        } else {
            let r = -c / b;
            if b > 0.0 {
                intervals.extend(clip(r, 1.0));
            } else {
                intervals.extend(clip(0.0, r));
            }
        }
        return intervals;
    }

    let disc = b * b - 4.0 * a * c;
    if a > 0.0 {
        if disc <= 0.0 {
            intervals.push((0.0, 1.0));
        } else {
            let sq = disc.sqrt();
            let r1 = (-b - sq) / (2.0 * a);
            let r2 = (-b + sq) / (2.0 * a);
            intervals.extend(clip(f64::NEG_INFINITY, r1));
            intervals.extend(clip(r2, f64::INFINITY));
        }
    } else {
        // a < 0: the parabola opens downward; non-negative between roots.
        if disc >= 0.0 {
            let sq = disc.sqrt();
            let r1 = (-b + sq) / (2.0 * a);
            let r2 = (-b - sq) / (2.0 * a);
            intervals.extend(clip(r1.min(r2), r1.max(r2)));
        }
    }
    intervals
}

/// Least-squares fit of `y ~ a*eps + b*eps^2` through the origin.
pub fn fit_quadratic_through_origin(eps: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    if eps.len() != y.len() || eps.len() < 2 {
        return None;
    }
    // Normal equations for the design matrix [eps, eps^2].
    let (mut s2, mut s3, mut s4, mut sy1, mut sy2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&e, &v) in eps.iter().zip(y) {
        s2 += e * e;
        s3 += e * e * e;
        s4 += e * e * e * e;
        sy1 += e * v;
        sy2 += e * e * v;
    }
    let det = s2 * s4 - s3 * s3;
    if det.abs() < 1e-18 {
        return None;
    }
    let a = (sy1 * s4 - sy2 * s3) / det;
    let b = (s2 * sy2 - s3 * sy1) / det;
    Some((a, b))
}

/// Per-epsilon sweep results for two models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub ap50_mpsn: f64,
    pub ap50_base: f64,
    pub ni_mpsn: f64,
    pub ni_base: f64,
}

/// Fitted small-perturbation coefficients and the epsilon range on which
/// the dual-stream model's feature shift stays at or below the baseline's.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdAnalysis {
    pub j: f64,
    pub k: f64,
    pub l: f64,
    pub m: f64,
    pub intervals: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<SweepRow>,
    pub threshold: Option<ThresholdAnalysis>,
}

impl RobustnessReport {
    /// CSV with columns `eps,ap50_mpsn,ap50_base,ni_mpsn,ni_base`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps,ap50_mpsn,ap50_base,ni_mpsn,ni_base\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.eps, r.ap50_mpsn, r.ap50_base, r.ni_mpsn, r.ni_base
            ));
        }
        out
    }
}

fn sweep_one_model(
    bundle: &ModelBundle,
    samples: &[FrameSample],
    eps: f64,
    clamp: bool,
    loss_cfg: &HeadLossConfig,
    det_cfg: &DetectConfig,
    flow: Option<&dyn FlowProvider>,
    clean_cams: &[CamHeatmap],
) -> Result<(f64, f64)> {
    let mut frames = Vec::with_capacity(samples.len());
    let mut adv_cams = Vec::with_capacity(samples.len());
    for s in samples {
        let attack = fgsm_perturb(bundle, s, loss_cfg, det_cfg, flow, eps, clamp)?;
        let dets = detect(bundle, &attack.sample, flow, det_cfg)?;
        frames.push((dets, s.boxes.clone()));
        adv_cams.push(cam_heatmap(&detector_features(
            bundle,
            &attack.sample,
            flow,
            det_cfg,
        )?));
    }
    let ap = ap50(&frames)?;
    let ni_val = ni(clean_cams, &adv_cams)?;
    Ok((ap, ni_val))
}

/// Attack both models over the epsilon grid; report AP50 and NI per model
/// per epsilon, plus the fitted small-perturbation threshold analysis.
/// Epsilon legs are independent; `workers > 1` runs them on that many
/// threads with identical results.
pub fn robustness_sweep(
    bundle_mpsn: &ModelBundle,
    bundle_base: &ModelBundle,
    samples: &[FrameSample],
    cfg: &AttackConfig,
    loss_cfg: &HeadLossConfig,
    det_cfg: &DetectConfig,
    flow: Option<&dyn FlowProvider>,
    workers: usize,
) -> Result<RobustnessReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(MpsnError::Contract("robustness sweep needs samples".into()));
    }
    let clean_cams_mpsn: Vec<CamHeatmap> = samples
        .iter()
        .map(|s| Ok(cam_heatmap(&detector_features(bundle_mpsn, s, flow, det_cfg)?)))
        .collect::<Result<_>>()?;
    let clean_cams_base: Vec<CamHeatmap> = samples
        .iter()
        .map(|s| Ok(cam_heatmap(&detector_features(bundle_base, s, flow, det_cfg)?)))
        .collect::<Result<_>>()?;

    let run_leg = |eps: f64| -> Result<SweepRow> {
        let (ap_m, ni_m) = sweep_one_model(
            bundle_mpsn,
            samples,
            eps,
            cfg.clamp,
            loss_cfg,
            det_cfg,
            flow,
            &clean_cams_mpsn,
        )?;
        let (ap_b, ni_b) = sweep_one_model(
            bundle_base,
            samples,
            eps,
            cfg.clamp,
            loss_cfg,
            det_cfg,
            flow,
            &clean_cams_base,
        )?;
        Ok(SweepRow {
            eps,
            ap50_mpsn: ap_m,
            ap50_base: ap_b,
            ni_mpsn: ni_m,
            ni_base: ni_b,
        })
    };

    let rows: Vec<SweepRow> = if workers <= 1 || cfg.epsilons.len() <= 1 {
        cfg.epsilons
            .iter()
            .map(|&eps| run_leg(eps))
            .collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<SweepRow>>> =
            (0..cfg.epsilons.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (chunk_idx, chunk) in slots
                .chunks_mut(cfg.epsilons.len().div_ceil(workers))
                .enumerate()
            {
                let offset = chunk_idx * cfg.epsilons.len().div_ceil(workers);
                let eps_list = &cfg.epsilons;
                let run = &run_leg;
                handles.push(scope.spawn(move || {
                    for (i, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run(eps_list[offset + i]));
                    }
                }));
            }
            for h in handles {
                h.join().expect("sweep worker panicked");
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("sweep leg not run"))
            .collect::<Result<_>>()?
    };

    // Fit NI(eps) ~ eps*coef1 + eps^2*coef2 per model over the sweep and
    // derive the epsilon range where the dual-stream model shifts less.
    let eps_list: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let ni_m: Vec<f64> = rows.iter().map(|r| r.ni_mpsn).collect();
    let ni_b: Vec<f64> = rows.iter().map(|r| r.ni_base).collect();
    let threshold = match (
        fit_quadratic_through_origin(&eps_list, &ni_m),
        fit_quadratic_through_origin(&eps_list, &ni_b),
    ) {
        (Some((j, k)), Some((l, m))) => Some(ThresholdAnalysis {
            j,
            k,
            l,
            m,
            intervals: epsilon_threshold(j, k, l, m),
        }),
        _ => None,
    };
    Ok(RobustnessReport { rows, threshold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_bundle, Arch, BackboneSplitSpec, InitPolicy, ModelVariant};
    use crate::head::BBox;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_bundle(seed: u64) -> ModelBundle {
        let spec = BackboneSplitSpec::for_arch(Arch::Tiny);
        build_bundle(&spec, &InitPolicy::Random { seed }, ModelVariant::DiffAbs).unwrap()
    }

    fn sample(seed: u64) -> FrameSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = |idx: usize| {
            let mut px = Array3::<f64>::zeros((3, 32, 32));
            px.mapv_inplace(|_| rng.gen_range(0.05..0.95));
            Frame::new(px, idx).unwrap()
        };
        let previous = mk(0);
        let current = mk(1);
        FrameSample::new(current, previous, vec![BBox::new(8.0, 8.0, 24.0, 24.0)], "r").unwrap()
    }

    #[test]
    fn eps_zero_leaves_sample_unchanged() {
        let bundle = tiny_bundle(71);
        let s = sample(1);
        let out = fgsm_perturb(
            &bundle,
            &s,
            &HeadLossConfig::default(),
            &DetectConfig::default(),
            None,
            0.0,
            true,
        )
        .unwrap();
        assert_eq!(out.sample.current.pixels, s.current.pixels);
        assert_eq!(out.sample.previous.pixels, s.previous.pixels);
    }

    #[test]
    fn unclamped_attack_moves_every_nonzero_gradient_pixel_by_eps() {
        let bundle = tiny_bundle(72);
        let s = sample(2);
        let eps = 0.03;
        let out = fgsm_perturb(
            &bundle,
            &s,
            &HeadLossConfig::default(),
            &DetectConfig::default(),
            None,
            eps,
            false,
        )
        .unwrap();
        assert!(!out.zero_gradient);
        for (frame_adv, (frame_orig, grad)) in [
            (&out.sample.current, (&s.current, &out.grad_current)),
            (&out.sample.previous, (&s.previous, &out.grad_previous)),
        ] {
            let mut max_abs: f64 = 0.0;
            for ((&a, &o), &g) in frame_adv
                .pixels
                .iter()
                .zip(frame_orig.pixels.iter())
                .zip(grad.iter())
            {
                let delta = (a - o).abs();
                max_abs = max_abs.max(delta);
                if g != 0.0 {
                    assert!((delta - eps).abs() < 1e-12, "delta {delta} vs eps {eps}");
                } else {
                    assert_eq!(delta, 0.0);
                }
            }
            assert!((max_abs - eps).abs() < 1e-12);
        }
    }

    #[test]
    fn attack_increases_loss_in_most_seeded_trials() {
        use crate::network::input_gradients;
        let bundle = tiny_bundle(73);
        let loss_cfg = HeadLossConfig::default();
        let det_cfg = DetectConfig::default();
        let mut ascents = 0;
        let trials = 100;
        for t in 0..trials {
            let s = sample(100 + t as u64);
            let before = input_gradients(&bundle, &s, None, &loss_cfg, &det_cfg)
                .unwrap()
                .loss;
            let out =
                fgsm_perturb(&bundle, &s, &loss_cfg, &det_cfg, None, 0.05, false).unwrap();
            let after = input_gradients(&bundle, &out.sample, None, &loss_cfg, &det_cfg)
                .unwrap()
                .loss;
            if after >= before {
                ascents += 1;
            }
        }
        assert!(ascents >= 90, "loss rose in only {ascents}/{trials} trials");
    }

    #[test]
    fn cam_single_channel_constant_and_oracle_cases() {
        // Single channel: normalized copy.
        let mut v = Feat::zeros((1, 2, 2));
        v[[0, 0, 0]] = 1.0;
        v[[0, 0, 1]] = 3.0;
        v[[0, 1, 0]] = 2.0;
        v[[0, 1, 1]] = 5.0;
        let cam = cam_heatmap(&FeatureMap::new(v, 16));
        assert_eq!(cam.values[[0, 0]], 0.0);
        assert_eq!(cam.values[[1, 1]], 1.0);
        assert!((cam.values[[1, 0]] - 0.25).abs() < 1e-12);

        // Constant map: all 0.5.
        let cam = cam_heatmap(&FeatureMap::new(Feat::from_elem((4, 3, 3), 2.5), 16));
        assert!(cam.values.iter().all(|&v| v == 0.5));

        // Random map equals the per-cell channel-mean oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let mut v = Feat::zeros((4, 2, 2));
        v.mapv_inplace(|_| rng.gen_range(-2.0..2.0));
        let cam = cam_heatmap(&FeatureMap::new(v.clone(), 16));
        let mut means = Array2::<f64>::zeros((2, 2));
        for y in 0..2 {
            for x in 0..2 {
                means[[y, x]] = (0..4).map(|c| v[[c, y, x]]).sum::<f64>() / 4.0;
            }
        }
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (got, want) in cam.values.iter().zip(means.iter()) {
            assert!((got - (want - lo) / (hi - lo)).abs() < 1e-12);
        }
    }

    fn cam_of(vals: Vec<f64>, h: usize, w: usize) -> CamHeatmap {
        CamHeatmap {
            values: Array2::from_shape_vec((h, w), vals).unwrap(),
            source_layer: "apc".into(),
        }
    }

    #[test]
    fn ni_zero_when_identical_and_singleton_hand_case() {
        let a = vec![cam_of(vec![0.1, 0.9], 1, 2), cam_of(vec![0.4, 0.2], 1, 2)];
        assert_eq!(ni(&a, &a).unwrap(), 0.0);

        // Singletons {0.0} vs {1.0}: mean diff 1, population std over the
        // union 0.5, so the index is 2.
        let clean = vec![cam_of(vec![0.0], 1, 1)];
        let adv = vec![cam_of(vec![1.0], 1, 1)];
        assert!((ni(&clean, &adv).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ni_matches_flat_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        for _ in 0..50 {
            let (h, w) = (2, 3);
            let n1 = rng.gen_range(1..5);
            let n2 = rng.gen_range(1..5);
            let mk = |rng: &mut ChaCha8Rng| {
                cam_of((0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(), h, w)
            };
            let clean: Vec<CamHeatmap> = (0..n1).map(|_| mk(&mut rng)).collect();
            let adv: Vec<CamHeatmap> = (0..n2).map(|_| mk(&mut rng)).collect();
            let got = ni(&clean, &adv).unwrap();

            // Flat loop oracle.
            let mut acc = 0.0;
            for cell in 0..h * w {
                let cv: Vec<f64> = clean.iter().map(|c| c.values.as_slice().unwrap()[cell]).collect();
                let av: Vec<f64> = adv.iter().map(|c| c.values.as_slice().unwrap()[cell]).collect();
                let mc = cv.iter().sum::<f64>() / cv.len() as f64;
                let ma = av.iter().sum::<f64>() / av.len() as f64;
                let all: Vec<f64> = cv.iter().chain(av.iter()).copied().collect();
                let mu = all.iter().sum::<f64>() / all.len() as f64;
                let sd = (all.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / all.len() as f64)
                    .sqrt();
                if sd > 0.0 {
                    acc += ((ma - mc) / sd).powi(2);
                }
            }
            assert!((got - acc.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn ni_shape_mismatch_is_an_error() {
        let a = vec![cam_of(vec![0.0, 1.0], 1, 2)];
        let b = vec![cam_of(vec![0.0], 1, 1)];
        assert!(ni(&a, &b).is_err());
    }

    #[test]
    fn diff_bound_holds_on_seeded_fgsm_samples() {
        let bundle = tiny_bundle(76);
        let loss_cfg = HeadLossConfig::default();
        let det_cfg = DetectConfig::default();
        for t in 0..100 {
            let s = sample(500 + t as u64);
            let eps = [0.01, 0.05, 0.1][t % 3];
            let out = fgsm_perturb(&bundle, &s, &loss_cfg, &det_cfg, None, eps, false).unwrap();
            let (holds, violation) = diff_bound_check(
                &s,
                &out.sample,
                eps,
                &out.grad_current,
                &out.grad_previous,
            )
            .unwrap();
            assert!(holds, "trial {t}: violation {violation}");
        }
    }

    #[test]
    fn diff_bound_scalar_cases() {
        // Pixels with equal gradient signs leave the motion image unchanged.
        let mk = |v: f64, idx: usize| {
            Frame::new(Array3::from_elem((1, 1, 1), v), idx).unwrap()
        };
        let s = FrameSample::new(mk(0.7, 1), mk(0.4, 0), vec![], "b").unwrap();
        let eps = 0.1;
        // Equal signs: both move together.
        let adv_same = FrameSample::new(mk(0.8, 1), mk(0.5, 0), vec![], "b").unwrap();
        let g_pos = Array3::from_elem((1, 1, 1), 1.0);
        let (holds, violation) =
            diff_bound_check(&s, &adv_same, eps, &g_pos, &g_pos).unwrap();
        assert!(holds);
        // t = 0 and the difference is unchanged, so the slack is exactly 0.
        assert!(violation.abs() < 1e-12);

        // Opposite signs: t = 2, bound 2*eps, attained when the difference
        // keeps its sign.
        let adv_opp = FrameSample::new(mk(0.8, 1), mk(0.3, 0), vec![], "b").unwrap();
        let g_neg = Array3::from_elem((1, 1, 1), -1.0);
        let (holds, violation) =
            diff_bound_check(&s, &adv_opp, eps, &g_pos, &g_neg).unwrap();
        assert!(holds);
        assert!(violation.abs() < 1e-12, "bound attained exactly: {violation}");
    }

    #[test]
    fn epsilon_threshold_hand_cases() {
        // |1| <= |2| everywhere.
        assert_eq!(epsilon_threshold(1.0, 0.0, 2.0, 0.0), vec![(0.0, 1.0)]);
        // |2 - eps| <= 1 iff eps in [1, 3]; clipped to the point {1}.
        let got = epsilon_threshold(2.0, -1.0, 1.0, 0.0);
        assert_eq!(got.len(), 1);
        assert!((got[0].0 - 1.0).abs() < 1e-12 && (got[0].1 - 1.0).abs() < 1e-12);
        // Nothing holds: |2| <= |1| is false and slopes are zero.
        assert!(epsilon_threshold(2.0, 0.0, 1.0, 0.0).is_empty());
    }

    #[test]
    fn epsilon_threshold_agrees_with_dense_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..300 {
            let j = rng.gen_range(-3.0..3.0);
            let k = rng.gen_range(-3.0..3.0);
            let l = rng.gen_range(-3.0..3.0);
            let m = rng.gen_range(-3.0..3.0);
            let intervals = epsilon_threshold(j, k, l, m);
            for step in 0..=10_000 {
                let e = step as f64 / 10_000.0;
                let truth = (j + e * k).abs() <= (l + e * m).abs();
                let near_endpoint = intervals
                    .iter()
                    .any(|&(lo, hi)| (e - lo).abs() <= 1e-4 || (e - hi).abs() <= 1e-4);
                if near_endpoint {
                    continue;
                }
                let predicted = intervals.iter().any(|&(lo, hi)| e >= lo && e <= hi);
                assert_eq!(
                    predicted, truth,
                    "j={j} k={k} l={l} m={m} eps={e}: intervals {intervals:?}"
                );
            }
        }
    }

    #[test]
    fn quadratic_fit_recovers_exact_coefficients() {
        let eps = [0.0, 0.05, 0.1, 0.2, 0.4];
        let y: Vec<f64> = eps.iter().map(|&e| 1.5 * e + 0.7 * e * e).collect();
        let (a, b) = fit_quadratic_through_origin(&eps, &y).unwrap();
        assert!((a - 1.5).abs() < 1e-9);
        assert!((b - 0.7).abs() < 1e-9);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn ni_is_exchange_invariant(seed in 0u64..200) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mk = |rng: &mut ChaCha8Rng| cam_of(
                    (0..6).map(|_| rng.gen_range(0.0..1.0)).collect(), 2, 3,
                );
                let a: Vec<CamHeatmap> = (0..3).map(|_| mk(&mut rng)).collect();
                let b: Vec<CamHeatmap> = (0..3).map(|_| mk(&mut rng)).collect();
                let x = ni(&a, &b).unwrap();
                let y = ni(&b, &a).unwrap();
                prop_assert!((x - y).abs() < 1e-12);
            }

            #[test]
            fn ni_is_invariant_under_common_cell_permutation(seed in 0u64..200) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n_cells = 6usize;
                let mk = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                    (0..n_cells).map(|_| rng.gen_range(0.0..1.0)).collect()
                };
                let a: Vec<Vec<f64>> = (0..2).map(|_| mk(&mut rng)).collect();
                let b: Vec<Vec<f64>> = (0..4).map(|_| mk(&mut rng)).collect();
                let mut perm: Vec<usize> = (0..n_cells).collect();
                use rand::seq::SliceRandom;
                perm.shuffle(&mut rng);
                let apply = |v: &Vec<f64>| -> Vec<f64> { perm.iter().map(|&i| v[i]).collect() };
                let cams = |vs: &[Vec<f64>]| -> Vec<CamHeatmap> {
                    vs.iter().map(|v| cam_of(v.clone(), 2, 3)).collect()
                };
                let permuted_a: Vec<Vec<f64>> = a.iter().map(apply).collect();
                let permuted_b: Vec<Vec<f64>> = b.iter().map(apply).collect();
                let x = ni(&cams(&a), &cams(&b)).unwrap();
                let y = ni(&cams(&permuted_a), &cams(&permuted_b)).unwrap();
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
