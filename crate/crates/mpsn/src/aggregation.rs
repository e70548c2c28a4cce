//! Shallow and deep feature aggregation of the frame and motion streams.
//!
//! SFA adds the stride-4 features element-wise. DFA gates the deep frame
//! features with a sigmoid of the deep motion features and compensates with
//! an additive motion term:
//!
//! ```text
//! h_agg = alpha * h_bn (*) sigmoid(h_bdn) + beta * h_bdn
//! ```
//!
//! The analytic gradients of DFA live here as standalone functions. They
//! are a verification path: the training code differentiates the layer
//! itself, and tests cross-check both against central finite differences.

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{MpsnError, Result};
use crate::nn::{sigmoid, Feat};

/// Coefficients of the deep aggregation. Fixed hyperparameters, not learned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for AggregationParams {
    fn default() -> Self {
        AggregationParams {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

fn check_shapes(context: &str, a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.values.shape() != b.values.shape() || a.stride != b.stride {
        return Err(MpsnError::dim(context, a.shape_string(), b.shape_string()));
    }
    Ok(())
}

/// Shallow feature aggregation: element-wise sum of the two stride-4 maps.
/// The result replaces the frame-stream shallow feature; the motion-stream
/// feature continues unchanged into its deep half.
pub fn sfa(h_fn: &FeatureMap, h_fdn: &FeatureMap) -> Result<FeatureMap> {
    check_shapes("sfa", h_fn, h_fdn)?;
    Ok(FeatureMap::new(&h_fn.values + &h_fdn.values, h_fn.stride))
}

/// Deep aggregation with an arbitrary mask function; `dfa` instantiates it
/// with the sigmoid, tests with a constant-one mask.
pub(crate) fn dfa_with_mask(
    h_bn: &FeatureMap,
    h_bdn: &FeatureMap,
    p: AggregationParams,
    mask: impl Fn(f64) -> f64,
) -> Result<FeatureMap> {
    check_shapes("dfa", h_bn, h_bdn)?;
    let mut out = Feat::zeros(h_bn.values.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(&h_bn.values)
        .and(&h_bdn.values)
        .for_each(|o, &b, &d| {
            *o = p.alpha * b * mask(d) + p.beta * d;
        });
    Ok(FeatureMap::new(out, h_bn.stride))
}

/// Deep feature aggregation on the stride-16 score maps.
pub fn dfa(h_bn: &FeatureMap, h_bdn: &FeatureMap, p: AggregationParams) -> Result<FeatureMap> {
    if h_bn.stride != crate::backbone::DEEP_STRIDE {
        return Err(MpsnError::Contract(format!(
            "dfa operates on stride-16 maps, got stride {}",
            h_bn.stride
        )));
    }
    dfa_with_mask(h_bn, h_bdn, p, sigmoid)
}

/// Degenerate deep aggregation used by the two-frames ablation: plain sum.
pub fn dfa_two_frames_degenerate(h_bn: &FeatureMap, h_bdn: &FeatureMap) -> Result<FeatureMap> {
    check_shapes("dfa_two_frames_degenerate", h_bn, h_bdn)?;
    Ok(FeatureMap::new(&h_bn.values + &h_bdn.values, h_bn.stride))
}

/// Analytic gradient of the deep aggregation w.r.t. the motion feature:
///
/// ```text
/// d h_agg / d h_bdn = alpha * h_bn * sigmoid'(h_bdn) + beta
/// ```
///
/// The sigmoid derivative applies only to the masked term; the additive
/// compensation path passes the upstream gradient through unscaled.
pub fn dfa_grad_hbdn(
    upstream: &FeatureMap,
    h_bn: &FeatureMap,
    h_bdn: &FeatureMap,
    p: AggregationParams,
) -> Result<FeatureMap> {
    check_shapes("dfa_grad_hbdn", upstream, h_bn)?;
    check_shapes("dfa_grad_hbdn", h_bn, h_bdn)?;
    let mut out = Feat::zeros(upstream.values.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(&upstream.values)
        .and(&h_bn.values)
        .and(&h_bdn.values)
        .for_each(|o, &u, &b, &d| {
            let s = sigmoid(d);
            *o = u * (p.alpha * b * s * (1.0 - s) + p.beta);
        });
    Ok(FeatureMap::new(out, upstream.stride))
}

/// Analytic gradient of the deep aggregation w.r.t. the frame feature:
/// `alpha * upstream * sigmoid(h_bdn)`.
pub fn dfa_grad_hbn(
    upstream: &FeatureMap,
    h_bdn: &FeatureMap,
    p: AggregationParams,
) -> Result<FeatureMap> {
    check_shapes("dfa_grad_hbn", upstream, h_bdn)?;
    let mut out = Feat::zeros(upstream.values.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(&upstream.values)
        .and(&h_bdn.values)
        .for_each(|o, &u, &d| {
            *o = p.alpha * u * sigmoid(d);
        });
    Ok(FeatureMap::new(out, upstream.stride))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::DEEP_STRIDE;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fm(values: Feat) -> FeatureMap {
        FeatureMap::new(values, DEEP_STRIDE)
    }

    fn random_fm(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: f64) -> FeatureMap {
        let mut v = Array3::<f64>::zeros((c, h, w));
        v.mapv_inplace(|_| rng.gen_range(-scale..scale));
        fm(v)
    }

    #[test]
    fn sfa_identity_and_analytic_cases() {
        let a = fm(ndarray::arr3(&[[[1.0, 2.0]]]));
        let zero = fm(Array3::zeros((1, 1, 2)));
        assert_eq!(sfa(&a, &zero).unwrap().values, a.values);
        let b = fm(ndarray::arr3(&[[[3.0, 4.0]]]));
        assert_eq!(sfa(&a, &b).unwrap().values, ndarray::arr3(&[[[4.0, 6.0]]]));
    }

    #[test]
    fn sfa_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_fm(&mut rng, 8, 4, 4, 2.0);
        let b = random_fm(&mut rng, 8, 4, 4, 2.0);
        let s = sfa(&a, &b).unwrap();
        for c in 0..8 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(
                        s.values[[c, y, x]],
                        a.values[[c, y, x]] + b.values[[c, y, x]]
                    );
                }
            }
        }
    }

    #[test]
    fn sfa_shape_mismatch_is_dimension_error() {
        let a = fm(Array3::zeros((1, 2, 2)));
        let b = fm(Array3::zeros((1, 2, 3)));
        assert!(matches!(
            sfa(&a, &b),
            Err(MpsnError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dfa_sigma_zero_cases() {
        // h_bdn = 0 so the mask is exactly 0.5 everywhere.
        let h_bn = fm(ndarray::arr3(&[[[2.0, -4.0]]]));
        let zero = fm(Array3::zeros((1, 1, 2)));
        let p = AggregationParams {
            alpha: 1.0,
            beta: 0.0,
        };
        let out = dfa(&h_bn, &zero, p).unwrap();
        assert_eq!(out.values, ndarray::arr3(&[[[1.0, -2.0]]]));

        let p11 = AggregationParams {
            alpha: 1.0,
            beta: 1.0,
        };
        let one = dfa(
            &fm(ndarray::arr3(&[[[2.0]]])),
            &fm(ndarray::arr3(&[[[0.0]]])),
            p11,
        )
        .unwrap();
        assert!((one.values[[0, 0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dfa_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = random_fm(&mut rng, 8, 4, 4, 3.0);
        let b = random_fm(&mut rng, 8, 4, 4, 3.0);
        let p = AggregationParams {
            alpha: 0.7,
            beta: 0.3,
        };
        let out = dfa(&a, &b, p).unwrap();
        for ((c, y, x), &v) in out.values.indexed_iter() {
            let bn = a.values[[c, y, x]];
            let bd = b.values[[c, y, x]];
            let expect = 0.7 * bn / (1.0 + (-bd).exp()) + 0.3 * bd;
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_dfa_is_plain_sum() {
        let a = fm(ndarray::arr3(&[[[1.0]]]));
        let b = fm(ndarray::arr3(&[[[2.0]]]));
        assert_eq!(
            dfa_two_frames_degenerate(&a, &b).unwrap().values,
            ndarray::arr3(&[[[3.0]]])
        );
        let z = fm(Array3::zeros((1, 1, 1)));
        let x = fm(ndarray::arr3(&[[[-0.25]]]));
        assert_eq!(dfa_two_frames_degenerate(&z, &x).unwrap().values, x.values);
    }

    #[test]
    fn unit_mask_dfa_equals_degenerate_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let a = random_fm(&mut rng, 3, 4, 4, 5.0);
            let b = random_fm(&mut rng, 3, 4, 4, 5.0);
            let p = AggregationParams {
                alpha: 1.0,
                beta: 1.0,
            };
            let masked = dfa_with_mask(&a, &b, p, |_| 1.0).unwrap();
            let degenerate = dfa_two_frames_degenerate(&a, &b).unwrap();
            assert_eq!(masked.values, degenerate.values);
        }
    }

    #[test]
    fn grad_hbdn_trivial_values() {
        let one = fm(ndarray::arr3(&[[[1.0]]]));
        let two = fm(ndarray::arr3(&[[[2.0]]]));
        let zero = fm(ndarray::arr3(&[[[0.0]]]));
        // alpha=1, beta=0: 2 * sigma'(0) = 2 * 0.25
        let g = dfa_grad_hbdn(
            &one,
            &two,
            &zero,
            AggregationParams {
                alpha: 1.0,
                beta: 0.0,
            },
        )
        .unwrap();
        assert!((g.values[[0, 0, 0]] - 0.5).abs() < 1e-15);
        // Pure additive path.
        let g2 = dfa_grad_hbdn(
            &one,
            &two,
            &fm(ndarray::arr3(&[[[13.7]]])),
            AggregationParams {
                alpha: 0.0,
                beta: 1.0,
            },
        )
        .unwrap();
        assert!((g2.values[[0, 0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grad_hbn_trivial_values() {
        let one = fm(ndarray::arr3(&[[[1.0]]]));
        let zero = fm(ndarray::arr3(&[[[0.0]]]));
        let g = dfa_grad_hbn(
            &one,
            &zero,
            AggregationParams {
                alpha: 1.0,
                beta: 1.0,
            },
        )
        .unwrap();
        assert!((g.values[[0, 0, 0]] - 0.5).abs() < 1e-15);
        let g0 = dfa_grad_hbn(
            &one,
            &zero,
            AggregationParams {
                alpha: 0.0,
                beta: 1.0,
            },
        )
        .unwrap();
        assert_eq!(g0.values[[0, 0, 0]], 0.0);
    }

    /// Central finite difference of a scalar probe `sum(dfa(...) * probe)`
    /// w.r.t. one input map, element by element.
    fn fd_grad(
        wrt_bdn: bool,
        h_bn: &FeatureMap,
        h_bdn: &FeatureMap,
        p: AggregationParams,
        probe: &Feat,
        step: f64,
    ) -> Feat {
        let loss = |bn: &FeatureMap, bdn: &FeatureMap| -> f64 {
            (&dfa(bn, bdn, p).unwrap().values * probe).sum()
        };
        let base = if wrt_bdn { &h_bdn.values } else { &h_bn.values };
        let mut grad = Feat::zeros(base.raw_dim());
        for idx in 0..base.len() {
            let mut plus = base.clone();
            plus.as_slice_mut().unwrap()[idx] += step;
            let mut minus = base.clone();
            minus.as_slice_mut().unwrap()[idx] -= step;
            let (lp, lm) = if wrt_bdn {
                (loss(h_bn, &fm(plus)), loss(h_bn, &fm(minus)))
            } else {
                (loss(&fm(plus), h_bdn), loss(&fm(minus), h_bdn))
            };
            grad.as_slice_mut().unwrap()[idx] = (lp - lm) / (2.0 * step);
        }
        grad
    }

    #[test]
    fn analytic_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for trial in 0..20 {
            let h_bn = random_fm(&mut rng, 2, 3, 3, 2.0);
            let h_bdn = random_fm(&mut rng, 2, 3, 3, 2.0);
            let p = AggregationParams {
                alpha: rng.gen_range(0.1..2.0),
                beta: rng.gen_range(0.1..2.0),
            };
            let mut probe = Feat::zeros(h_bn.values.raw_dim());
            probe.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
            let upstream = fm(probe.clone());

            let fd_bdn = fd_grad(true, &h_bn, &h_bdn, p, &probe, 1e-5);
            let an_bdn = dfa_grad_hbdn(&upstream, &h_bn, &h_bdn, p).unwrap();
            for (f, a) in fd_bdn.iter().zip(an_bdn.values.iter()) {
                let rel = (f - a).abs() / f.abs().max(a.abs()).max(1e-6);
                assert!(rel <= 1e-4, "trial {trial} bdn: fd={f} analytic={a}");
            }

            let fd_bn = fd_grad(false, &h_bn, &h_bdn, p, &probe, 1e-5);
            let an_bn = dfa_grad_hbn(&upstream, &h_bdn, p).unwrap();
            for (f, a) in fd_bn.iter().zip(an_bn.values.iter()) {
                let rel = (f - a).abs() / f.abs().max(a.abs()).max(1e-6);
                assert!(rel <= 1e-4, "trial {trial} bn: fd={f} analytic={a}");
            }
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-5.0f64..5.0, n)
        }

        proptest! {
            #[test]
            fn dfa_output_is_bounded(
                bn in vals(12),
                bdn in vals(12),
                alpha in 0.0f64..2.0,
                beta in 0.0f64..2.0,
            ) {
                let a = fm(Array3::from_shape_vec((3, 2, 2), bn).unwrap());
                let b = fm(Array3::from_shape_vec((3, 2, 2), bdn).unwrap());
                let p = AggregationParams { alpha, beta };
                let out = dfa(&a, &b, p).unwrap();
                for ((c, y, x), &v) in out.values.indexed_iter() {
                    let bound = alpha * a.values[[c, y, x]].abs() + beta * b.values[[c, y, x]].abs();
                    prop_assert!(v.abs() <= bound + 1e-12);
                }
            }

            #[test]
            fn dfa_monotone_in_motion_feature(
                bn in vals(4),
                bdn in vals(4),
                bump in 0.0f64..3.0,
                alpha in 0.0f64..2.0,
                beta in 0.0f64..2.0,
            ) {
                // Monotonicity requires non-negative frame features.
                let bn: Vec<f64> = bn.into_iter().map(f64::abs).collect();
                let a = fm(Array3::from_shape_vec((1, 2, 2), bn).unwrap());
                let b1 = fm(Array3::from_shape_vec((1, 2, 2), bdn.clone()).unwrap());
                let bumped: Vec<f64> = bdn.iter().map(|v| v + bump).collect();
                let b2 = fm(Array3::from_shape_vec((1, 2, 2), bumped).unwrap());
                let p = AggregationParams { alpha, beta };
                let o1 = dfa(&a, &b1, p).unwrap();
                let o2 = dfa(&a, &b2, p).unwrap();
                for (x, y) in o1.values.iter().zip(o2.values.iter()) {
                    prop_assert!(y + 1e-12 >= *x);
                }
            }

            #[test]
            fn degenerate_equals_unit_mask_everywhere(bn in vals(8), bdn in vals(8)) {
                let a = fm(Array3::from_shape_vec((2, 2, 2), bn).unwrap());
                let b = fm(Array3::from_shape_vec((2, 2, 2), bdn).unwrap());
                let p = AggregationParams { alpha: 1.0, beta: 1.0 };
                let masked = dfa_with_mask(&a, &b, p, |_| 1.0).unwrap();
                let deg = dfa_two_frames_degenerate(&a, &b).unwrap();
                prop_assert_eq!(masked.values, deg.values);
            }
        }
    }
}
