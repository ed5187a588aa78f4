//! Parameter trees for the model and the adversary.
//!
//! Every struct is generic over its leaf type `T`: storage uses `ArrayD<F>`,
//! and a forward pass maps the same tree onto tape [`Var`]s, either as
//! trainable leaves or as frozen constants. `walk`/`walk_mut` iterate leaves
//! in a fixed order with stable names, which the optimizer and the checkpoint
//! format rely on.

use super::config::ModelConfig;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Real;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub weight: T, // [kh, kw, cin, cout]
    pub bias: T,   // [cout]
}

#[derive(Debug, Clone)]
pub struct PosEmbed<T> {
    pub weight: T, // [4, K]
    pub bias: T,   // [K]
}

#[derive(Debug, Clone)]
pub struct LayerNormP<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Debug, Clone)]
pub struct GruParams<T> {
    pub w_ir: T,
    pub w_iz: T,
    pub w_in: T,
    pub w_hr: T,
    pub w_hz: T,
    pub w_hn: T,
    pub b_r: T,
    pub b_z: T,
    pub b_in: T,
    pub b_hn: T,
}

#[derive(Debug, Clone)]
pub struct MlpParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub norm_in: LayerNormP<T>,
    pub norm_slot: LayerNormP<T>,
    pub norm_mlp: LayerNormP<T>,
    pub wq: T, // [K, K]
    pub wk: T,
    pub wv: T,
    pub gru: GruParams<T>,
    pub mlp: MlpParams<T>,
}

#[derive(Debug, Clone)]
pub struct SlotInitParams<T> {
    pub mu: T,        // [K]
    pub log_sigma: T, // [K]
}

#[derive(Debug, Clone)]
pub struct EncoderParams<T> {
    pub convs: Vec<Conv<T>>,
    pub pos: PosEmbed<T>,
}

#[derive(Debug, Clone)]
pub struct CondEncoderParams<T> {
    pub convs: Vec<Conv<T>>,
}

#[derive(Debug, Clone)]
pub struct DecoderParams<T> {
    pub pos: PosEmbed<T>,
    pub convs: Vec<Conv<T>>,
    pub head: Conv<T>,
}

/// All weights of the min player: flow encoder, slot machinery, condition
/// encoder and the conditional slot decoder.
#[derive(Debug, Clone)]
pub struct ModelParamsG<T> {
    pub encoder: EncoderParams<T>,
    pub slot_init: SlotInitParams<T>,
    pub attention: AttentionParams<T>,
    pub cond: Option<CondEncoderParams<T>>,
    pub decoder: DecoderParams<T>,
}

/// The max player: a decoder stack of identical layout whose head emits
/// 3 channels. Storage is fully disjoint from [`ModelParamsG`].
#[derive(Debug, Clone)]
pub struct AdversaryParamsG<T> {
    pub decoder: DecoderParams<T>,
}

pub type ModelParams<F> = ModelParamsG<ArrayD<F>>;
pub type AdversaryParams<F> = AdversaryParamsG<ArrayD<F>>;

// ---------------------------------------------------------------------------
// tree traversal

/// A container of parameter leaves; implemented for every param struct plus
/// `Vec` and `Option` of them.
pub trait SubTree<T> {
    type Mapped<U>;
    fn map_t<U>(&self, f: &mut impl FnMut(&T) -> U) -> Self::Mapped<U>;
    fn walk_t(&self, prefix: &str, f: &mut impl FnMut(String, &T));
    fn walk_mut_t(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T));
}

macro_rules! impl_tree {
    ($ty:ident, leaves [$($lf:ident),* $(,)?], subs [$($nf:ident),* $(,)?]) => {
        impl<T> $ty<T> {
            pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> $ty<U> {
                $ty {
                    $($lf: f(&self.$lf),)*
                    $($nf: SubTree::map_t(&self.$nf, f),)*
                }
            }
            pub fn walk(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
                $(f(format!("{prefix}.{}", stringify!($lf)), &self.$lf);)*
                $(SubTree::walk_t(&self.$nf, &format!("{prefix}.{}", stringify!($nf)), f);)*
            }
            pub fn walk_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
                $(f(format!("{prefix}.{}", stringify!($lf)), &mut self.$lf);)*
                $(SubTree::walk_mut_t(&mut self.$nf, &format!("{prefix}.{}", stringify!($nf)), f);)*
            }
        }
        impl<T> SubTree<T> for $ty<T> {
            type Mapped<U> = $ty<U>;
            fn map_t<U>(&self, f: &mut impl FnMut(&T) -> U) -> $ty<U> {
                self.map(f)
            }
            fn walk_t(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
                self.walk(prefix, f)
            }
            fn walk_mut_t(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
                self.walk_mut(prefix, f)
            }
        }
    };
}

impl<T, N: SubTree<T>> SubTree<T> for Vec<N> {
    type Mapped<U> = Vec<N::Mapped<U>>;
    fn map_t<U>(&self, f: &mut impl FnMut(&T) -> U) -> Vec<N::Mapped<U>> {
        self.iter().map(|n| n.map_t(f)).collect()
    }
    fn walk_t(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        for (i, n) in self.iter().enumerate() {
            n.walk_t(&format!("{prefix}{i}"), f);
        }
    }
    fn walk_mut_t(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        for (i, n) in self.iter_mut().enumerate() {
            n.walk_mut_t(&format!("{prefix}{i}"), f);
        }
    }
}

impl<T, N: SubTree<T>> SubTree<T> for Option<N> {
    type Mapped<U> = Option<N::Mapped<U>>;
    fn map_t<U>(&self, f: &mut impl FnMut(&T) -> U) -> Option<N::Mapped<U>> {
        self.as_ref().map(|n| n.map_t(f))
    }
    fn walk_t(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        if let Some(n) = self {
            n.walk_t(prefix, f);
        }
    }
    fn walk_mut_t(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        if let Some(n) = self {
            n.walk_mut_t(prefix, f);
        }
    }
}

impl_tree!(Conv, leaves [weight, bias], subs []);
impl_tree!(PosEmbed, leaves [weight, bias], subs []);
impl_tree!(LayerNormP, leaves [gamma, beta], subs []);
impl_tree!(GruParams, leaves [w_ir, w_iz, w_in, w_hr, w_hz, w_hn, b_r, b_z, b_in, b_hn], subs []);
impl_tree!(MlpParams, leaves [w1, b1, w2, b2], subs []);
impl_tree!(AttentionParams, leaves [wq, wk, wv], subs [norm_in, norm_slot, norm_mlp, gru, mlp]);
impl_tree!(SlotInitParams, leaves [mu, log_sigma], subs []);
impl_tree!(EncoderParams, leaves [], subs [convs, pos]);
impl_tree!(CondEncoderParams, leaves [], subs [convs]);
impl_tree!(DecoderParams, leaves [], subs [pos, convs, head]);
impl_tree!(ModelParamsG, leaves [], subs [encoder, slot_init, attention, cond, decoder]);
impl_tree!(AdversaryParamsG, leaves [], subs [decoder]);

// ---------------------------------------------------------------------------
// initialization

fn he_conv<F: Real, R: Rng>(rng: &mut R, kh: usize, kw: usize, cin: usize, cout: usize) -> Conv<ArrayD<F>> {
    let std = (2.0 / (kh * kw * cin) as f64).sqrt();
    let weight = ArrayD::from_shape_fn(IxDyn(&[kh, kw, cin, cout]), |_| {
        F::standard_normal(rng) * F::from_f64(std)
    });
    let bias = ArrayD::zeros(IxDyn(&[cout]));
    Conv { weight, bias }
}

fn xavier<F: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> ArrayD<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| {
        F::uniform(rng, F::from_f64(-limit), F::from_f64(limit))
    })
}

fn pos_embed<F: Real, R: Rng>(rng: &mut R, k: usize) -> PosEmbed<ArrayD<F>> {
    PosEmbed { weight: xavier(rng, 4, k), bias: ArrayD::zeros(IxDyn(&[k])) }
}

fn layer_norm_p<F: Real>(k: usize) -> LayerNormP<ArrayD<F>> {
    LayerNormP { gamma: ArrayD::from_elem(IxDyn(&[k]), F::one()), beta: ArrayD::zeros(IxDyn(&[k])) }
}

fn decoder_params<F: Real, R: Rng>(rng: &mut R, cfg: &ModelConfig, head_out: usize) -> DecoderParams<ArrayD<F>> {
    let extra = if cfg.conditional { cfg.cond_channels } else { 0 };
    let mut convs = Vec::new();
    for (i, &k) in cfg.dec_kernels.iter().enumerate() {
        let cin = if i == 0 { cfg.slot_dim } else { cfg.dec_channels } + extra;
        convs.push(he_conv(rng, k, k, cin, cfg.dec_channels));
    }
    let head = he_conv(rng, cfg.head_kernel, cfg.head_kernel, cfg.dec_channels, head_out);
    DecoderParams { pos: pos_embed(rng, cfg.slot_dim), convs, head }
}

impl<F: Real> ModelParams<F> {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let k = cfg.slot_dim;
        let mut enc_convs = Vec::new();
        for (i, &ks) in cfg.enc_kernels.iter().enumerate() {
            let cin = if i == 0 { 3 } else { cfg.enc_channels };
            enc_convs.push(he_conv(rng, ks, ks, cin, cfg.enc_channels));
        }
        let encoder = EncoderParams { convs: enc_convs, pos: pos_embed(rng, cfg.enc_channels) };

        let slot_init = SlotInitParams {
            mu: ArrayD::zeros(IxDyn(&[k])),
            log_sigma: ArrayD::zeros(IxDyn(&[k])),
        };

        let attention = AttentionParams {
            norm_in: layer_norm_p(cfg.enc_channels),
            norm_slot: layer_norm_p(k),
            norm_mlp: layer_norm_p(k),
            wq: xavier(rng, k, k),
            wk: xavier(rng, cfg.enc_channels, k),
            wv: xavier(rng, cfg.enc_channels, k),
            gru: GruParams {
                w_ir: xavier(rng, k, k),
                w_iz: xavier(rng, k, k),
                w_in: xavier(rng, k, k),
                w_hr: xavier(rng, k, k),
                w_hz: xavier(rng, k, k),
                w_hn: xavier(rng, k, k),
                b_r: ArrayD::zeros(IxDyn(&[k])),
                b_z: ArrayD::zeros(IxDyn(&[k])),
                b_in: ArrayD::zeros(IxDyn(&[k])),
                b_hn: ArrayD::zeros(IxDyn(&[k])),
            },
            mlp: MlpParams {
                w1: xavier(rng, k, cfg.mlp_hidden),
                b1: ArrayD::zeros(IxDyn(&[cfg.mlp_hidden])),
                w2: xavier(rng, cfg.mlp_hidden, k),
                b2: ArrayD::zeros(IxDyn(&[k])),
            },
        };

        let cond = cfg.conditional.then(|| {
            let mut convs = Vec::new();
            for (i, &ks) in cfg.cond_kernels.iter().enumerate() {
                let cin = if i == 0 { 3 } else { cfg.cond_channels };
                convs.push(he_conv(rng, ks, ks, cin, cfg.cond_channels));
            }
            CondEncoderParams { convs }
        });

        let decoder = decoder_params(rng, cfg, 4);
        ModelParamsG { encoder, slot_init, attention, cond, decoder }
    }
}

impl<F: Real> AdversaryParams<F> {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        AdversaryParamsG { decoder: decoder_params(rng, cfg, 3) }
    }
}

// helpers shared by trainer and checkpoint code

pub fn num_scalars<F: Real>(p: &ModelParams<F>) -> usize {
    let mut n = 0;
    p.walk("w", &mut |_, a| n += a.len());
    n
}

/// Bind a parameter tree onto a tape as trainable leaves.
pub fn bind_trainable<F: Real>(tape: &mut Tape<F>, p: &ModelParams<F>) -> ModelParamsG<Var> {
    p.map(&mut |a| tape.param(a))
}

/// Bind a parameter tree onto a tape as frozen constants.
pub fn bind_frozen<F: Real>(tape: &mut Tape<F>, p: &ModelParams<F>) -> ModelParamsG<Var> {
    p.map(&mut |a| tape.constant(a.clone()))
}

pub fn bind_adversary_trainable<F: Real>(tape: &mut Tape<F>, p: &AdversaryParams<F>) -> AdversaryParamsG<Var> {
    p.map(&mut |a| tape.param(a))
}

pub fn bind_adversary_frozen<F: Real>(tape: &mut Tape<F>, p: &AdversaryParams<F>) -> AdversaryParamsG<Var> {
    p.map(&mut |a| tape.constant(a.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn walk_order_is_stable_and_named() {
        let cfg = ModelConfig::tiny(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::<f32>::init(&cfg, &mut rng);
        let mut names1 = Vec::new();
        p.walk("w", &mut |n, _| names1.push(n));
        let mut names2 = Vec::new();
        p.walk("w", &mut |n, _| names2.push(n));
        assert_eq!(names1, names2);
        assert!(names1.iter().any(|n| n == "w.encoder.convs0.weight"));
        assert!(names1.iter().any(|n| n == "w.attention.gru.w_hn"));
        assert!(names1.iter().any(|n| n == "w.decoder.head.bias"));
        // no duplicate names
        let mut sorted = names1.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names1.len());
    }

    #[test]
    fn unconditional_config_drops_condition_encoder() {
        let mut cfg = ModelConfig::tiny(8);
        cfg.conditional = false;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ModelParams::<f32>::init(&cfg, &mut rng);
        assert!(p.cond.is_none());
        // first decoder layer consumes only the broadcast slot
        assert_eq!(p.decoder.convs[0].weight.shape()[2], cfg.slot_dim);
    }
}
