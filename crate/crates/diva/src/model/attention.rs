//! Iterative slot binding: random Gaussian initialization, dot-product
//! attention normalized across slots, per-slot weighted mean of values, and a
//! gated recurrent update with a residual perceptron. All weights are shared
//! across slots, which is what makes the procedure permutation equivariant.

use super::config::consts;
use super::params::{AttentionParams, GruParams, MlpParams, SlotInitParams};
use crate::error::{DivaError, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Real;
use ndarray::{Array2, ArrayD};
use rand::Rng;

/// Draw `n` slots i.i.d. from `mu + sigma * eps`, `eps ~ N(0, I)`.
/// Deterministic given the generator state.
pub fn init_slots<F: Real, R: Rng>(init: &SlotInitParams<ArrayD<F>>, n: usize, rng: &mut R) -> Result<Array2<F>> {
    if n == 0 {
        return Err(DivaError::InvalidArgument("init_slots: n must be at least 1".into()));
    }
    let k = init.mu.len();
    let mut slots = Array2::<F>::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            let eps = F::standard_normal(rng);
            let sigma = init.log_sigma[[j]].exp();
            slots[[i, j]] = init.mu[[j]] + sigma * eps;
        }
    }
    Ok(slots)
}

/// Keys and values projected once per binding run; they do not change across
/// iterations.
pub struct BoundFeatures {
    pub k: Var,
    pub v: Var,
    pub pixels: usize,
}

/// Normalize the feature grid and project it to keys and values.
/// `features` is `[H, W, C]`.
pub fn prepare_features<F: Real>(tape: &mut Tape<F>, features: Var, attn: &AttentionParams<Var>) -> BoundFeatures {
    let shape = tape.value(features).shape().to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(features, &[h * w, c]);
    let eps = F::from_f64(consts::LN_EPS);
    let normed = tape.layer_norm_rows(flat, attn.norm_in.gamma, attn.norm_in.beta, eps);
    let k = tape.matmul(normed, attn.wk);
    let v = tape.matmul(normed, attn.wv);
    BoundFeatures { k, v, pixels: h * w }
}

fn gru_cell<F: Real>(tape: &mut Tape<F>, x: Var, h: Var, p: &GruParams<Var>) -> Var {
    let xr = tape.matmul(x, p.w_ir);
    let hr = tape.matmul(h, p.w_hr);
    let r = tape.add(xr, hr);
    let r = tape.add_row_bcast(r, p.b_r);
    let r = tape.sigmoid(r);

    let xz = tape.matmul(x, p.w_iz);
    let hz = tape.matmul(h, p.w_hz);
    let z = tape.add(xz, hz);
    let z = tape.add_row_bcast(z, p.b_z);
    let z = tape.sigmoid(z);

    let hn = tape.matmul(h, p.w_hn);
    let hn = tape.add_row_bcast(hn, p.b_hn);
    let gated = tape.mul(r, hn);
    let xn = tape.matmul(x, p.w_in);
    let xn = tape.add_row_bcast(xn, p.b_in);
    let g = tape.add(xn, gated);
    let g = tape.tanh(g);

    // h' = z * h + (1 - z) * g
    let zh = tape.mul(z, h);
    let one_minus_z = tape.affine(z, -F::one(), F::one());
    let zg = tape.mul(one_minus_z, g);
    tape.add(zh, zg)
}

fn mlp<F: Real>(tape: &mut Tape<F>, x: Var, p: &MlpParams<Var>) -> Var {
    let h = tape.matmul(x, p.w1);
    let h = tape.add_row_bcast(h, p.b1);
    let h = tape.relu(h);
    let y = tape.matmul(h, p.w2);
    tape.add_row_bcast(y, p.b2)
}

/// One binding iteration. Attention logits are `k q^T / sqrt(K)`, softmaxed
/// across the slot axis per pixel; each slot then takes the attention-weighted
/// mean of the values and updates through the recurrent unit plus a residual
/// perceptron.
pub fn attention_step<F: Real>(
    tape: &mut Tape<F>,
    slots: Var,
    feats: &BoundFeatures,
    attn: &AttentionParams<Var>,
) -> Var {
    let k_dim = tape.value(slots).shape()[1];
    let eps = F::from_f64(consts::LN_EPS);
    let normed = tape.layer_norm_rows(slots, attn.norm_slot.gamma, attn.norm_slot.beta, eps);
    let q = tape.matmul(normed, attn.wq);
    let logits = tape.matmul_nt(feats.k, q);
    let scale = F::from_f64(1.0 / (k_dim as f64).sqrt());
    let logits = tape.affine(logits, scale, F::zero());
    let attn_w = tape.softmax_slots(logits);
    let sums = tape.col_sums(attn_w);
    let upd = tape.matmul_ta(attn_w, feats.v);
    let upd = tape.scale_rows_by_inv(upd, sums, F::from_f64(consts::ATTN_EPS));

    let next = gru_cell(tape, upd, slots, &attn.gru);
    let eps2 = F::from_f64(consts::LN_EPS);
    let normed_next = tape.layer_norm_rows(next, attn.norm_mlp.gamma, attn.norm_mlp.beta, eps2);
    let residual = mlp(tape, normed_next, &attn.mlp);
    tape.add(next, residual)
}

/// Run `iters` binding iterations from `initial`. With `barrier` set, the
/// history of all but the last iteration is cut, so gradients only flow
/// through the final refinement (first-order implicit differentiation).
pub fn bind_iterations<F: Real>(
    tape: &mut Tape<F>,
    initial: Var,
    feats: &BoundFeatures,
    attn: &AttentionParams<Var>,
    iters: usize,
    barrier: bool,
) -> Var {
    assert!(iters >= 1, "bind requires at least one iteration");
    let mut slots = initial;
    for _ in 0..iters - 1 {
        slots = attention_step(tape, slots, feats, attn);
    }
    if barrier {
        slots = tape.detach(slots);
    }
    attention_step(tape, slots, feats, attn)
}
