//! Color-wheel codec between 2-channel flow vectors and the 3-channel RGB
//! rendering the network consumes.
//!
//! Hue encodes direction (`atan2(v, u)`), saturation encodes magnitude
//! relative to `max_norm` (clipped at 1), value is held at 1: zero motion is
//! an achromatic pixel. The decoder inverts the mapping up to clipping.

use crate::error::{DivaError, Result};
use crate::model::types::{FlowField, FlowRgb};
use crate::tensor::Real;
use ndarray::Array3;

fn hsv_to_rgb<F: Real>(h_deg: F, s: F, v: F) -> [F; 3] {
    let c = v * s;
    let sector = h_deg / F::from_f64(60.0);
    let two = F::from_f64(2.0);
    let xm = c * (F::one() - ((sector % two) - F::one()).abs());
    let m = v - c;
    let z = F::zero();
    let (r, g, b) = if sector < F::one() {
        (c, xm, z)
    } else if sector < two {
        (xm, c, z)
    } else if sector < F::from_f64(3.0) {
        (z, c, xm)
    } else if sector < F::from_f64(4.0) {
        (z, xm, c)
    } else if sector < F::from_f64(5.0) {
        (xm, z, c)
    } else {
        (c, z, xm)
    };
    [r + m, g + m, b + m]
}

fn rgb_to_hsv<F: Real>(r: F, g: F, b: F) -> (F, F, F) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > F::zero() { delta / max } else { F::zero() };
    if delta == F::zero() {
        return (F::zero(), s, v);
    }
    let sixty = F::from_f64(60.0);
    let h = if max == r {
        sixty * (((g - b) / delta) % F::from_f64(6.0))
    } else if max == g {
        sixty * ((b - r) / delta + F::from_f64(2.0))
    } else {
        sixty * ((r - g) / delta + F::from_f64(4.0))
    };
    let h = if h < F::zero() { h + F::from_f64(360.0) } else { h };
    (h, s, v)
}

/// Render a flow field through the color wheel.
pub fn flow_to_rgb<F: Real>(flow: &FlowField<F>) -> FlowRgb<F> {
    let (h, w) = flow.dims();
    let max_norm = flow.max_norm();
    let data = flow.data();
    let mut out = Array3::<F>::zeros((h, w, 3));
    let two_pi = F::from_f64(std::f64::consts::TAU);
    for y in 0..h {
        for x in 0..w {
            let u = data[[y, x, 0]];
            let v = data[[y, x, 1]];
            let mag = (u * u + v * v).sqrt();
            let sat = (mag / max_norm).min(F::one());
            let mut angle = v.atan2(u);
            if angle < F::zero() {
                angle = angle + two_pi;
            }
            let hue = angle / two_pi * F::from_f64(360.0);
            let hue = hue.min(F::from_f64(359.999_94));
            let rgb = hsv_to_rgb(hue, sat, F::one());
            for (c, val) in rgb.iter().enumerate() {
                out[[y, x, c]] = (*val).max(F::zero()).min(F::one());
            }
        }
    }
    FlowRgb::from_raw(out)
}

/// Invert the color wheel; exact up to the magnitude clip at `max_norm`.
pub fn rgb_to_flow<F: Real>(rgb: &FlowRgb<F>, max_norm: F) -> Result<FlowField<F>> {
    if max_norm <= F::zero() {
        return Err(DivaError::InvalidArgument("rgb_to_flow: max_norm must be positive".into()));
    }
    let (h, w) = rgb.dims();
    let data = rgb.data();
    let mut out = Array3::<F>::zeros((h, w, 2));
    let two_pi = F::from_f64(std::f64::consts::TAU);
    for y in 0..h {
        for x in 0..w {
            let (hue, sat, _v) = rgb_to_hsv(data[[y, x, 0]], data[[y, x, 1]], data[[y, x, 2]]);
            let mag = sat * max_norm;
            let angle = hue / F::from_f64(360.0) * two_pi;
            out[[y, x, 0]] = mag * angle.cos();
            out[[y, x, 1]] = mag * angle.sin();
        }
    }
    // decoded magnitudes are bounded by max_norm, so this cannot fail
    FlowField::new(out, max_norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(vectors: &[(f64, f64)], max_norm: f64) -> FlowField<f64> {
        let n = vectors.len();
        let data = Array3::from_shape_fn((1, n, 2), |(_, i, c)| if c == 0 { vectors[i].0 } else { vectors[i].1 });
        FlowField::new(data, max_norm).unwrap()
    }

    #[test]
    fn zero_flow_is_achromatic() {
        let f = field_of(&[(0.0, 0.0)], 5.0);
        let rgb = flow_to_rgb(&f);
        let (r, g, b) = (rgb.data()[[0, 0, 0]], rgb.data()[[0, 0, 1]], rgb.data()[[0, 0, 2]]);
        assert_eq!(r, g);
        assert_eq!(g, b);
    }

    #[test]
    fn opposite_vectors_land_in_opposite_hue_sectors() {
        let f = field_of(&[(3.0, 0.0), (-3.0, 0.0)], 5.0);
        let rgb = flow_to_rgb(&f);
        let h0 = super::rgb_to_hsv(rgb.data()[[0, 0, 0]], rgb.data()[[0, 0, 1]], rgb.data()[[0, 0, 2]]).0;
        let h1 = super::rgb_to_hsv(rgb.data()[[0, 1, 0]], rgb.data()[[0, 1, 1]], rgb.data()[[0, 1, 2]]).0;
        let diff = (h0 - h1).abs();
        assert!((diff - 180.0).abs() < 1e-6, "hue difference {diff}");
    }

    #[test]
    fn roundtrip_error_is_under_one_percent_of_max_norm() {
        let max_norm = 8.0f64;
        let mut worst = 0.0f64;
        for iu in -10..=10 {
            for iv in -10..=10 {
                let (u, v) = (iu as f64 * 0.75, iv as f64 * 0.75);
                if (u * u + v * v).sqrt() > max_norm {
                    continue;
                }
                let f = field_of(&[(u, v)], max_norm);
                let rgb = flow_to_rgb(&f);
                let back = rgb_to_flow(&rgb, max_norm).unwrap();
                let du = back.data()[[0, 0, 0]] - u;
                let dv = back.data()[[0, 0, 1]] - v;
                worst = worst.max((du * du + dv * dv).sqrt());
            }
        }
        assert!(worst <= 0.01 * max_norm, "worst endpoint error {worst}");
    }
}
