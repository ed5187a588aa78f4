//! Image-conditioned slot decoding.
//!
//! The condition encoder turns the RGB image into a full-resolution pyramid
//! of low-capacity feature maps. The slot decoder broadcasts one slot over
//! the lattice, adds its own positional embedding, and runs a conv stack that
//! concatenates one pyramid level per layer; the head emits 3 flow channels
//! (through a sigmoid, since flow renderings live in `[0, 1]`) plus one mask
//! logit. The adversarial decoder is the same stack with a 3-channel head.

use super::encoder::position_embedding;
use super::params::{CondEncoderParams, DecoderParams};
use crate::error::{DivaError, Result};
use crate::tensor::kernels::softmax_slots;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{canonical_sum, Real, SLOT_CAP};
use ndarray::{Array3, ArrayView3};

/// Run the condition encoder; returns one `[H, W, cond_channels]` level per
/// conv layer, shallowest first.
pub fn encode_condition<F: Real>(tape: &mut Tape<F>, image: Var, cond: &CondEncoderParams<Var>) -> Vec<Var> {
    let mut levels = Vec::with_capacity(cond.convs.len());
    let mut x = image;
    for conv in &cond.convs {
        x = tape.conv2d_same(x, conv.weight, conv.bias);
        x = tape.relu(x);
        levels.push(x);
    }
    levels
}

/// Decode one slot. `pyramid` must hold at least as many levels as the
/// decoder has concatenating layers; pass `&[]` for an unconditional decoder.
/// Returns the raw `[H, W, head_out]` field before any splitting.
fn decode_stack<F: Real>(
    tape: &mut Tape<F>,
    slot: Var, // [1, K]
    pyramid: &[Var],
    dec: &DecoderParams<Var>,
    h: usize,
    w: usize,
    conditional: bool,
) -> Var {
    let broad = tape.broadcast_spatial(slot, h, w);
    let pe = position_embedding(tape, &dec.pos, h, w);
    let mut x = tape.add(broad, pe);
    for (i, conv) in dec.convs.iter().enumerate() {
        let input = if conditional {
            tape.concat_c(x, pyramid[i])
        } else {
            x
        };
        x = tape.conv2d_same(input, conv.weight, conv.bias);
        x = tape.relu(x);
    }
    tape.conv2d_same(x, dec.head.weight, dec.head.bias)
}

/// Conditional decode of one slot: sigmoid flow reconstruction and raw mask
/// logit.
pub fn decode_slot_graph<F: Real>(
    tape: &mut Tape<F>,
    slot: Var,
    pyramid: &[Var],
    dec: &DecoderParams<Var>,
    h: usize,
    w: usize,
    conditional: bool,
) -> (Var, Var) {
    let out = decode_stack(tape, slot, pyramid, dec, h, w, conditional);
    let flow = tape.slice_c(out, 0, 3);
    let flow = tape.sigmoid(flow);
    let logit = tape.slice_c(out, 3, 4);
    (flow, logit)
}

/// Adversarial decode of one slot: whole-flow reconstruction, no mask.
pub fn adversarial_decode_graph<F: Real>(
    tape: &mut Tape<F>,
    slot: Var,
    pyramid: &[Var],
    dec: &DecoderParams<Var>,
    h: usize,
    w: usize,
    conditional: bool,
) -> Var {
    let out = decode_stack(tape, slot, pyramid, dec, h, w, conditional);
    tape.sigmoid(out)
}

/// Normalize per-slot mask logits into a per-pixel simplex and compose the
/// flow reconstruction `sum_i flow_i * mask_i`. Returns per-slot masks and
/// the composite.
pub fn compose_graph<F: Real>(tape: &mut Tape<F>, flows: &[Var], logits: &[Var]) -> (Vec<Var>, Var) {
    assert_eq!(flows.len(), logits.len());
    let shape = tape.value(logits[0]).shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let stacked = tape.stack_cols(logits);
    let masks2 = tape.softmax_slots(stacked);
    let masks: Vec<Var> = (0..logits.len()).map(|i| tape.col_to_3d(masks2, i, h, w)).collect();
    let composite = tape.weighted_sum_slots(flows, &masks);
    (masks, composite)
}

/// Tape-free composition over plain arrays, for callers that already hold
/// decoded slots. Same canonical arithmetic as the graph path.
pub fn compose_arrays<F: Real>(
    flows: &[ArrayView3<F>],
    logits: &[ArrayView3<F>],
) -> Result<(Array3<F>, Array3<F>)> {
    if flows.is_empty() {
        return Err(DivaError::InvalidArgument("compose: need at least one slot decode".into()));
    }
    if flows.len() > SLOT_CAP {
        return Err(DivaError::InvalidArgument(format!("compose: more than {SLOT_CAP} slots")));
    }
    let (h, w, _) = flows[0].dim();
    for (f, l) in flows.iter().zip(logits.iter()) {
        if f.dim() != (h, w, 3) || l.dim() != (h, w, 1) {
            return Err(DivaError::shape("compose", format!("{h}x{w}"), format!("{:?}", f.dim())));
        }
    }
    let n = flows.len();
    let mut stacked = ndarray::Array2::<F>::zeros((h * w, n));
    for (j, l) in logits.iter().enumerate() {
        for (i, &v) in l.iter().enumerate() {
            stacked[[i, j]] = v;
        }
    }
    let soft = softmax_slots(stacked.view());
    let mut masks = Array3::<F>::zeros((n, h, w));
    for j in 0..n {
        for y in 0..h {
            for x in 0..w {
                masks[[j, y, x]] = soft[[y * w + x, j]];
            }
        }
    }
    let mut composite = Array3::<F>::zeros((h, w, 3));
    let mut buf = [F::zero(); SLOT_CAP];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                for j in 0..n {
                    buf[j] = flows[j][[y, x, c]] * masks[[j, y, x]];
                }
                composite[[y, x, c]] = canonical_sum(&mut buf[..n]);
            }
        }
    }
    Ok((masks, composite))
}
