//! The training objective and its diagnostics.
//!
//! One sample contributes `recon - (lambda/n) * sum_i sep_i`, where `recon`
//! is the mean-squared error of the mask-composed reconstruction and `sep_i`
//! is the adversary's error on slot `i` weighted by `1 - m_i`. The min player
//! descends the total; the max player ascends the separation term. Mask
//! entropy is reported alongside as the nonnegative per-pixel Shannon entropy
//! (smaller entropy means a more certain mask).

use crate::error::{DivaError, Result};
use crate::model::types::{FlowRgb, MaskSet};
use crate::tensor::{canonical_sum, Real, SLOT_CAP};
use ndarray::{Array2, Array3};
use serde::Serialize;

/// Per-step loss terms; `total = reconstruction - lambda * separation`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown<F> {
    pub reconstruction: F,
    pub separation: F,
    pub total: F,
    pub lambda: F,
    pub n: usize,
}

impl<F: Real> LossBreakdown<F> {
    pub fn is_finite(&self) -> bool {
        self.reconstruction.is_finite() && self.separation.is_finite() && self.total.is_finite()
    }
}

/// Mean over pixels and channels of the (optionally weighted) squared
/// difference. The denominator is always `H * W * C`; the weight scales each
/// pixel's contribution.
pub fn mse<F: Real>(a: &Array3<F>, b: &Array3<F>, weight: Option<&Array2<F>>) -> Result<F> {
    if a.dim() != b.dim() {
        return Err(DivaError::shape("mse", format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    let (h, w, c) = a.dim();
    let denom = F::from_f64((h * w * c) as f64);
    match weight {
        None => {
            let mut acc = F::zero();
            for (&x, &y) in a.iter().zip(b.iter()) {
                let d = x - y;
                acc = acc + d * d;
            }
            Ok(acc / denom)
        }
        Some(wm) => {
            if wm.dim() != (h, w) {
                return Err(DivaError::shape("mse weight", format!("{h}x{w}"), format!("{:?}", wm.dim())));
            }
            if wm.iter().any(|&v| v < -F::from_f64(1e-6) || v > F::one() + F::from_f64(1e-6)) {
                return Err(DivaError::InvalidArgument("mse: weight outside [0,1]".into()));
            }
            let mut acc = F::zero();
            for y in 0..h {
                for x in 0..w {
                    let wt = wm[[y, x]];
                    for ch in 0..c {
                        let d = a[[y, x, ch]] - b[[y, x, ch]];
                        acc = acc + wt * d * d;
                    }
                }
            }
            Ok(acc / denom)
        }
    }
}

/// Evaluate the full objective from already-decoded pieces:
/// per-slot reconstructions, the adversary's whole-flow attempts, and the
/// simplex masks.
pub fn diva_loss<F: Real>(
    u: &FlowRgb<F>,
    per_slot_flows: &[Array3<F>],
    adv_flows: &[Array3<F>],
    masks: &MaskSet<F>,
    lambda: F,
) -> Result<LossBreakdown<F>> {
    if lambda < F::zero() {
        return Err(DivaError::InvalidArgument("diva_loss: lambda must be nonnegative".into()));
    }
    let n = masks.n();
    if per_slot_flows.len() != n || adv_flows.len() != n {
        return Err(DivaError::shape(
            "diva_loss",
            format!("{n} slots"),
            format!("{} flows / {} adversarial flows", per_slot_flows.len(), adv_flows.len()),
        ));
    }
    if n > SLOT_CAP {
        return Err(DivaError::InvalidArgument(format!("diva_loss: more than {SLOT_CAP} slots")));
    }
    let (h, w, c) = u.data().dim();
    for f in per_slot_flows.iter().chain(adv_flows.iter()) {
        if f.dim() != (h, w, c) {
            return Err(DivaError::shape("diva_loss", format!("{h}x{w}x{c}"), format!("{:?}", f.dim())));
        }
    }

    // composite in the same canonical order as the forward graph
    let mut composite = Array3::<F>::zeros((h, w, c));
    let mut buf = [F::zero(); SLOT_CAP];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                for i in 0..n {
                    buf[i] = per_slot_flows[i][[y, x, ch]] * masks.masks[[i, y, x]];
                }
                composite[[y, x, ch]] = canonical_sum(&mut buf[..n]);
            }
        }
    }
    let reconstruction = mse(u.data(), &composite, None)?;

    let mut sep_sum = F::zero();
    for i in 0..n {
        let weight = Array2::from_shape_fn((h, w), |(y, x)| F::one() - masks.masks[[i, y, x]]);
        sep_sum = sep_sum + mse(u.data(), &adv_flows[i], Some(&weight))?;
    }
    let separation = sep_sum / F::from_f64(n as f64);
    let total = reconstruction - lambda * separation;
    Ok(LossBreakdown { reconstruction, separation, total, lambda, n })
}

/// Nonnegative per-pixel Shannon entropy of the masks, averaged over pixels,
/// with `0 * log 0 = 0`. Zero for one-hot masks, `log n` for uniform ones.
pub fn mask_entropy<F: Real>(masks: &MaskSet<F>) -> Result<F> {
    masks
        .check_simplex(F::from_f64(crate::model::config::consts::SIMPLEX_TOL))
        .map_err(|_| DivaError::InvariantViolation("mask_entropy: input is not a simplex".into()))?;
    let (n, h, w) = masks.masks.dim();
    let mut acc = F::zero();
    for y in 0..h {
        for x in 0..w {
            for i in 0..n {
                let m = masks.masks[[i, y, x]];
                if m > F::zero() {
                    acc = acc - m * m.ln();
                }
            }
        }
    }
    Ok(acc / F::from_f64((h * w) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn flow_rgb(data: Array3<f64>) -> FlowRgb<f64> {
        FlowRgb::from_raw(data)
    }

    #[test]
    fn mse_identity_and_constant_fields() {
        let a = Array3::<f64>::from_elem((4, 4, 3), 1.0);
        let b = Array3::<f64>::zeros((4, 4, 3));
        assert_eq!(mse(&a, &a, None).unwrap(), 0.0);
        assert_eq!(mse(&a, &b, None).unwrap(), 1.0);
    }

    #[test]
    fn weighted_mse_matches_brute_force_enumeration() {
        // 2x2x3 grids, weight masking 2 of 4 pixels
        let a = Array3::from_shape_vec((2, 2, 3), vec![0.1, 0.9, 0.4, 0.3, 0.7, 0.2, 0.8, 0.5, 0.6, 0.0, 1.0, 0.25]).unwrap();
        let b = Array3::from_shape_vec((2, 2, 3), vec![0.2, 0.4, 0.4, 0.1, 0.9, 0.2, 0.3, 0.5, 0.1, 0.4, 0.2, 0.75]).unwrap();
        let w = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        // brute force: walk every element
        let mut expect = 0.0;
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    let d: f64 = a[[y, x, c]] - b[[y, x, c]];
                    expect += w[[y, x]] * d * d;
                }
            }
        }
        expect /= 12.0;
        let got = mse(&a, &b, Some(&w)).unwrap();
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_reduces_total_to_reconstruction() {
        let u = flow_rgb(Array3::from_elem((2, 2, 3), 0.5));
        let flows = vec![Array3::from_elem((2, 2, 3), 0.25); 2];
        let adv = vec![Array3::from_elem((2, 2, 3), 0.9); 2];
        let masks = MaskSet { masks: Array3::from_elem((2, 2, 2), 0.5) };
        let lb = diva_loss(&u, &flows, &adv, &masks, 0.0).unwrap();
        assert_eq!(lb.total, lb.reconstruction);
        assert!(lb.separation > 0.0);
    }

    #[test]
    fn perfect_reconstruction_zeroes_first_term() {
        // every slot reconstructs u exactly; any simplex masks compose to u
        let u = flow_rgb(Array3::from_shape_fn((2, 2, 3), |(y, x, c)| 0.1 * (y + x + c) as f64));
        let flows = vec![u.data().clone(), u.data().clone()];
        let adv = vec![Array3::zeros((2, 2, 3)); 2];
        let masks = MaskSet { masks: Array3::from_elem((2, 2, 2), 0.5) };
        let lb = diva_loss(&u, &flows, &adv, &masks, 0.1).unwrap();
        assert!(lb.reconstruction.abs() < 1e-12);
    }

    #[test]
    fn two_slot_toy_matches_scalar_enumeration() {
        // hand-chosen 2x2 case evaluated by direct enumeration of the formula
        let u = flow_rgb(Array3::from_shape_fn((2, 2, 3), |(y, x, c)| {
            [[0.2, 0.8], [0.5, 0.1]][y][x] + 0.05 * c as f64
        }));
        let f0 = Array3::from_shape_fn((2, 2, 3), |(y, x, _)| [[0.25, 0.7], [0.5, 0.3]][y][x]);
        let f1 = Array3::from_shape_fn((2, 2, 3), |(y, x, _)| [[0.1, 0.9], [0.45, 0.2]][y][x]);
        let a0 = Array3::from_shape_fn((2, 2, 3), |(y, x, _)| [[0.3, 0.6], [0.4, 0.15]][y][x]);
        let a1 = Array3::from_shape_fn((2, 2, 3), |(y, x, _)| [[0.2, 0.75], [0.55, 0.05]][y][x]);
        let m0 = [[0.9, 0.2], [0.6, 0.3]];
        let mut masks = Array3::zeros((2, 2, 2));
        for y in 0..2 {
            for x in 0..2 {
                masks[[0, y, x]] = m0[y][x];
                masks[[1, y, x]] = 1.0 - m0[y][x];
            }
        }
        let lambda = 0.37;

        // independent brute-force evaluation
        let mut recon = 0.0;
        let mut sep = [0.0, 0.0];
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    let uh = f0[[y, x, c]] * masks[[0, y, x]] + f1[[y, x, c]] * masks[[1, y, x]];
                    let d = u.data()[[y, x, c]] - uh;
                    recon += d * d;
                    let d0: f64 = u.data()[[y, x, c]] - a0[[y, x, c]];
                    let d1: f64 = u.data()[[y, x, c]] - a1[[y, x, c]];
                    sep[0] += (1.0 - masks[[0, y, x]]) * d0 * d0;
                    sep[1] += (1.0 - masks[[1, y, x]]) * d1 * d1;
                }
            }
        }
        recon /= 12.0;
        let separation = (sep[0] / 12.0 + sep[1] / 12.0) / 2.0;
        let expect_total = recon - lambda * separation;

        let lb = diva_loss(
            &u,
            &[f0, f1],
            &[a0, a1],
            &MaskSet { masks },
            lambda,
        )
        .unwrap();
        assert!((lb.reconstruction - recon).abs() < 1e-12);
        assert!((lb.separation - separation).abs() < 1e-12);
        assert!((lb.total - expect_total).abs() < 1e-12);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let u = flow_rgb(Array3::zeros((2, 2, 3)));
        let masks = MaskSet { masks: Array3::from_elem((1, 2, 2), 1.0) };
        let err = diva_loss(&u, &[Array3::zeros((2, 2, 3))], &[Array3::zeros((2, 2, 3))], &masks, -0.1);
        assert!(err.is_err());
    }

    #[test]
    fn entropy_of_one_hot_uniform_and_mixed_masks() {
        // one-hot: zero
        let mut onehot = Array3::zeros((4, 2, 2));
        for y in 0..2 {
            for x in 0..2 {
                onehot[[0, y, x]] = 1.0;
            }
        }
        assert!(mask_entropy(&MaskSet { masks: onehot }).unwrap().abs() < 1e-12);

        // uniform over 4: log 4
        let uniform = MaskSet { masks: Array3::from_elem((4, 2, 2), 0.25) };
        let e = mask_entropy(&uniform).unwrap();
        assert!((e - 4.0f64.ln()).abs() < 1e-12);

        // half one-hot, half uniform: average of 0 and log 4
        let mut mixed = Array3::zeros((4, 2, 2));
        for y in 0..2 {
            mixed[[0, y, 0]] = 1.0;
            for i in 0..4 {
                mixed[[i, y, 1]] = 0.25;
            }
        }
        let e = mask_entropy(&MaskSet { masks: mixed }).unwrap();
        assert!((e - 4.0f64.ln() / 2.0).abs() < 1e-12);
        assert!((e - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn entropy_requires_a_simplex() {
        let bad = MaskSet { masks: Array3::from_elem((2, 2, 2), 0.7) };
        assert!(matches!(mask_entropy(&bad), Err(DivaError::InvariantViolation(_))));
    }

    #[test]
    fn entropy_is_permutation_invariant() {
        let mut masks = Array3::zeros((3, 2, 2));
        let vals = [[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.4, 0.4, 0.2]];
        for (p, v) in vals.iter().enumerate() {
            for i in 0..3 {
                masks[[i, p / 2, p % 2]] = v[i];
            }
        }
        let e1 = mask_entropy(&MaskSet { masks: masks.clone() }).unwrap();
        let permuted = Array3::from_shape_fn((3, 2, 2), |(i, y, x)| masks[[(i + 1) % 3, y, x]]);
        let e2 = mask_entropy(&MaskSet { masks: permuted }).unwrap();
        assert!((e1 - e2).abs() < 1e-12);
    }

    #[test]
    fn increasing_adversary_error_outside_mask_decreases_total() {
        // monotone adversarial coupling, checked by perturbation
        let u = flow_rgb(Array3::from_elem((2, 2, 3), 0.5));
        let flows = vec![Array3::from_elem((2, 2, 3), 0.5); 2];
        let masks = MaskSet {
            masks: Array3::from_shape_fn((2, 2, 2), |(i, y, _)| if (y == 0) == (i == 0) { 0.9 } else { 0.1 }),
        };
        let adv_near = vec![Array3::from_elem((2, 2, 3), 0.52); 2];
        let adv_far = vec![Array3::from_elem((2, 2, 3), 0.6); 2];
        let near = diva_loss(&u, &flows, &adv_near, &masks, 0.5).unwrap();
        let far = diva_loss(&u, &flows, &adv_far, &masks, 0.5).unwrap();
        assert!(far.total < near.total);
    }
}
