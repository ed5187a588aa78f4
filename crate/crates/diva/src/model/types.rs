//! Domain types: images, flow fields, their color-wheel renderings, slots and
//! masks. Constructors validate the lattice invariants (finite values, legal
//! ranges, sizes at least 32 and divisible by 4); internal code that has
//! already validated works on raw arrays.

use crate::error::{DivaError, Result};
use crate::tensor::Real;
use ndarray::{Array2, Array3};

fn check_lattice(h: usize, w: usize, context: &'static str) -> Result<()> {
    if h < 32 || w < 32 || h % 4 != 0 || w % 4 != 0 {
        return Err(DivaError::InvalidArgument(format!(
            "{context}: lattice {h}x{w} must be at least 32x32 with sides divisible by 4"
        )));
    }
    Ok(())
}

fn check_finite<F: Real>(data: &Array3<F>, context: &'static str) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(DivaError::InvariantViolation(format!("{context}: non-finite value")));
    }
    Ok(())
}

/// An RGB image on the `[0, 1]` scale.
#[derive(Debug, Clone)]
pub struct Image<F: Real> {
    data: Array3<F>,
}

impl<F: Real> Image<F> {
    pub fn new(data: Array3<F>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(DivaError::shape("Image", "HxWx3", format!("{h}x{w}x{c}")));
        }
        check_lattice(h, w, "Image")?;
        check_finite(&data, "Image")?;
        if data.iter().any(|v| *v < F::zero() || *v > F::one()) {
            return Err(DivaError::InvariantViolation("Image: value outside [0,1]".into()));
        }
        Ok(Image { data })
    }

    pub fn data(&self) -> &Array3<F> {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dim();
        (h, w)
    }
}

/// A dense 2-channel motion field in pixels/frame, with the magnitude bound
/// used by the color codec.
#[derive(Debug, Clone)]
pub struct FlowField<F: Real> {
    data: Array3<F>,
    max_norm: F,
}

impl<F: Real> FlowField<F> {
    pub fn new(data: Array3<F>, max_norm: F) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 2 {
            return Err(DivaError::shape("FlowField", "HxWx2", format!("{h}x{w}x{c}")));
        }
        check_finite(&data, "FlowField")?;
        if max_norm <= F::zero() || !max_norm.is_finite() {
            return Err(DivaError::InvalidArgument("FlowField: max_norm must be positive".into()));
        }
        let limit = max_norm * F::from_f64(1.0 + 1e-6);
        for px in data.rows() {
            let mag = (px[0] * px[0] + px[1] * px[1]).sqrt();
            if mag > limit {
                return Err(DivaError::InvariantViolation(format!(
                    "FlowField: magnitude {} exceeds max_norm {}",
                    mag.to_f64(),
                    max_norm.to_f64()
                )));
            }
        }
        Ok(FlowField { data, max_norm })
    }

    pub fn data(&self) -> &Array3<F> {
        &self.data
    }

    pub fn max_norm(&self) -> F {
        self.max_norm
    }

    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dim();
        (h, w)
    }
}

/// Color-wheel rendering of a flow field; this is what the network ingests
/// and reconstructs.
#[derive(Debug, Clone)]
pub struct FlowRgb<F: Real> {
    data: Array3<F>,
}

impl<F: Real> FlowRgb<F> {
    pub fn new(data: Array3<F>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(DivaError::shape("FlowRgb", "HxWx3", format!("{h}x{w}x{c}")));
        }
        check_finite(&data, "FlowRgb")?;
        if data.iter().any(|v| *v < F::zero() || *v > F::one()) {
            return Err(DivaError::InvariantViolation("FlowRgb: value outside [0,1]".into()));
        }
        Ok(FlowRgb { data })
    }

    /// For internal producers whose output is in range by construction.
    pub(crate) fn from_raw(data: Array3<F>) -> Self {
        FlowRgb { data }
    }

    pub fn data(&self) -> &Array3<F> {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dim();
        (h, w)
    }
}

/// A set of `n` slot vectors of width K. Rows are exchangeable: no slot
/// carries identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSet<F: Real> {
    pub slots: Array2<F>,
}

impl<F: Real> SlotSet<F> {
    pub fn new(slots: Array2<F>) -> Result<Self> {
        if slots.nrows() == 0 {
            return Err(DivaError::InvalidArgument("SlotSet: need at least one slot".into()));
        }
        if slots.iter().any(|v| !v.is_finite()) {
            return Err(DivaError::InvariantViolation("SlotSet: non-finite value".into()));
        }
        Ok(SlotSet { slots })
    }

    pub fn len(&self) -> usize {
        self.slots.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.nrows() == 0
    }

    pub fn permuted(&self, perm: &[usize]) -> SlotSet<F> {
        let mut out = Array2::zeros(self.slots.raw_dim());
        for (dst, &src) in perm.iter().enumerate() {
            out.row_mut(dst).assign(&self.slots.row(src));
        }
        SlotSet { slots: out }
    }
}

/// Per-slot soft masks forming a per-pixel simplex.
#[derive(Debug, Clone)]
pub struct MaskSet<F: Real> {
    /// `[n, H, W]`
    pub masks: ndarray::Array3<F>,
}

impl<F: Real> MaskSet<F> {
    /// Verify the per-pixel simplex within `tol`.
    pub fn check_simplex(&self, tol: F) -> Result<()> {
        let (n, h, w) = self.masks.dim();
        for y in 0..h {
            for x in 0..w {
                let mut s = F::zero();
                for i in 0..n {
                    let m = self.masks[[i, y, x]];
                    if m < -tol || m > F::one() + tol {
                        return Err(DivaError::InvariantViolation("MaskSet: value outside [0,1]".into()));
                    }
                    s = s + m;
                }
                if (s - F::one()).abs() > tol {
                    return Err(DivaError::InvariantViolation(format!(
                        "MaskSet: pixel ({y},{x}) sums to {}",
                        s.to_f64()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.masks.dim().0
    }

    /// Hard assignment by per-pixel argmax (ties to the lowest index).
    pub fn argmax_labels(&self) -> Array2<usize> {
        let (n, h, w) = self.masks.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = 0usize;
            let mut bv = self.masks[[0, y, x]];
            for i in 1..n {
                let v = self.masks[[i, y, x]];
                if v > bv {
                    bv = v;
                    best = i;
                }
            }
            best
        })
    }
}

/// Joint output of decoding one slot: a 3-channel flow reconstruction and the
/// pre-softmax mask score.
#[derive(Debug, Clone)]
pub struct SlotDecode<F: Real> {
    /// `[H, W, 3]`
    pub flow_rgb: Array3<F>,
    /// `[H, W, 1]`
    pub mask_logit: Array3<F>,
}
