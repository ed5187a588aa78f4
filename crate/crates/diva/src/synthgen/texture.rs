//! Procedural assets: textured backgrounds and wiggly blob masks. These keep
//! the generator self-contained when no external mask/background libraries
//! are supplied.

use crate::tensor::Real;
use ndarray::{Array2, Array3};
use rand::Rng;

/// A colored texture built from a few oriented sinusoid gratings over a random
/// base color, plus low-amplitude noise. Values stay inside (0, 1).
pub fn texture<F: Real, R: Rng>(rng: &mut R, h: usize, w: usize) -> Array3<F> {
    let mut base = [0.0f64; 3];
    for b in base.iter_mut() {
        *b = rng.gen_range(0.15..0.85);
    }
    struct Grating {
        kx: f64,
        ky: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let n_gratings = rng.gen_range(2..=3);
    let mut gratings = Vec::with_capacity(n_gratings);
    for _ in 0..n_gratings {
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let freq = rng.gen_range(1.5..5.0) * std::f64::consts::TAU;
        let mut amp = [0.0f64; 3];
        for a in amp.iter_mut() {
            *a = rng.gen_range(0.06..0.22);
        }
        gratings.push(Grating {
            kx: freq * theta.cos(),
            ky: freq * theta.sin(),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp,
        });
    }
    let noise_amp = 0.02;
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let fx = x as f64 / w as f64;
        let fy = y as f64 / h as f64;
        let mut v = base[c];
        for g in &gratings {
            v += g.amp[c] * (g.kx * fx + g.ky * fy + g.phase).sin();
        }
        v += rng.gen_range(-noise_amp..noise_amp);
        F::from_f64(v.clamp(0.02, 0.98))
    })
}

/// A star-convex blob: a wiggly radius function around a random center.
/// Returns the boolean mask; the caller checks area constraints.
pub fn blob_mask<R: Rng>(rng: &mut R, h: usize, w: usize) -> Array2<bool> {
    let side = h.min(w) as f64;
    let r_base = rng.gen_range(0.14..0.30) * side;
    let margin = r_base * 1.45;
    let cy = rng.gen_range(margin..(h as f64 - margin).max(margin + 1.0));
    let cx = rng.gen_range(margin..(w as f64 - margin).max(margin + 1.0));
    let mut harmonics = [(0.0f64, 0.0f64); 4];
    for (j, hm) in harmonics.iter_mut().enumerate() {
        hm.0 = rng.gen_range(0.0..0.35 / (j + 1) as f64);
        hm.1 = rng.gen_range(0.0..std::f64::consts::TAU);
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let rho = (dx * dx + dy * dy).sqrt();
        let phi = dy.atan2(dx);
        let mut r = 1.0;
        for (j, (a, p)) in harmonics.iter().enumerate() {
            r += a * ((j + 1) as f64 * phi + p).cos();
        }
        rho <= r_base * r
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn textures_stay_in_range_and_are_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let t1 = texture::<f32, _>(&mut a, 16, 16);
        let t2 = texture::<f32, _>(&mut b, 16, 16);
        assert_eq!(t1, t2);
        assert!(t1.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn blobs_are_nonempty_and_within_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let m = blob_mask(&mut rng, 32, 32);
            let area = m.iter().filter(|&&b| b).count();
            assert!(area > 8, "blob too small: {area}");
            assert!(area < 32 * 32 / 2, "blob too large: {area}");
        }
    }
}
