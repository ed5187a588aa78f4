//! Flow feature encoder: a stride-1 conv stack plus a learned positional
//! embedding (a linear map of the normalized coordinate grid, so it exists at
//! any resolution).

use super::params::{EncoderParams, PosEmbed};
use crate::tensor::kernels::position_grid;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Real;

/// Materialize a positional embedding as an `[H, W, K]` tape value.
pub fn position_embedding<F: Real>(tape: &mut Tape<F>, pos: &PosEmbed<Var>, h: usize, w: usize) -> Var {
    let grid = tape.constant(position_grid::<F>(h, w).into_dyn());
    let e = tape.matmul(grid, pos.weight);
    let e = tape.add_row_bcast(e, pos.bias);
    let k = tape.value(e).shape()[1];
    tape.reshape(e, &[h, w, k])
}

/// Conv stack with ReLU after every layer, then the positional embedding.
/// Input `[H, W, 3]`, output `[H, W, enc_channels]`.
pub fn encode_features<F: Real>(tape: &mut Tape<F>, flow_rgb: Var, enc: &EncoderParams<Var>) -> Var {
    let shape = tape.value(flow_rgb).shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let mut x = flow_rgb;
    for conv in &enc.convs {
        x = tape.conv2d_same(x, conv.weight, conv.bias);
        x = tape.relu(x);
    }
    let pe = position_embedding(tape, &enc.pos, h, w);
    tape.add(x, pe)
}
