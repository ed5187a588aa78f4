//! The segmentation network: flow feature encoder, iterative slot binding,
//! image-conditioned per-slot decoding, and the adversarial whole-flow
//! decoder.
//!
//! The forward pass is pure given (parameters, inputs, seed): the same seed
//! and inputs produce bit-identical outputs, and permuting the initial slots
//! permutes every per-slot output while leaving the composite bit-identical.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod params;
pub mod types;

use crate::error::{DivaError, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Real;
use attention::BoundFeatures;
use config::ModelConfig;
use ndarray::{Array2, Array3, ArrayView1, Ix2, Ix3};
use params::{AdversaryParams, AdversaryParamsG, ModelParams, ModelParamsG};
use rand::Rng;
use types::{FlowRgb, Image, MaskSet, SlotDecode, SlotSet};

/// Model facade: configuration plus the min player's parameters.
#[derive(Debug, Clone)]
pub struct DivaModel<F: Real> {
    pub config: ModelConfig,
    pub params: ModelParams<F>,
}

/// Handles into a forward graph, for loss construction.
pub struct GraphForward {
    pub features: Var,
    pub slots: Var,
    pub pyramid: Vec<Var>,
    pub flows: Vec<Var>,
    pub logits: Vec<Var>,
    /// `[H, W, 1]` per slot, simplex-normalized.
    pub masks: Vec<Var>,
    pub composite: Var,
}

/// Plain-array outputs extracted from a no-grad forward.
#[derive(Debug, Clone)]
pub struct ForwardOutputs<F: Real> {
    pub slots: SlotSet<F>,
    pub per_slot_flow: Vec<Array3<F>>,
    pub masks: MaskSet<F>,
    pub composite: Array3<F>,
}

/// Build the full conditional forward graph from already-bound parameter
/// vars. `initial_slots` supplies the binding start state; with `barrier`
/// set, gradients flow only through the final binding iteration.
pub fn forward_graph<F: Real>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    mp: &ModelParamsG<Var>,
    flow_rgb: Var,
    image: Option<Var>,
    initial_slots: &Array2<F>,
    iters: usize,
    barrier: bool,
) -> GraphForward {
    let shape = tape.value(flow_rgb).shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let n = initial_slots.nrows();

    let features = encoder::encode_features(tape, flow_rgb, &mp.encoder);
    let bound: BoundFeatures = attention::prepare_features(tape, features, &mp.attention);
    let init = tape.constant(initial_slots.clone().into_dyn());
    let slots = attention::bind_iterations(tape, init, &bound, &mp.attention, iters, barrier);

    let pyramid = match (cfg.conditional, image, &mp.cond) {
        (true, Some(img), Some(cond)) => decoder::encode_condition(tape, img, cond),
        (false, _, _) => Vec::new(),
        _ => panic!("conditional model requires an image and condition weights"),
    };

    let mut flows = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        let slot = tape.row(slots, i);
        let (flow, logit) =
            decoder::decode_slot_graph(tape, slot, &pyramid, &mp.decoder, h, w, cfg.conditional);
        flows.push(flow);
        logits.push(logit);
    }
    let (masks, composite) = decoder::compose_graph(tape, &flows, &logits);

    GraphForward { features, slots, pyramid, flows, logits, masks, composite }
}

/// Decode every slot with the adversary. `slots` is a `[n, K]` var (typically
/// detached); the pyramid vars are shared with the main decoder.
pub fn adversary_graph<F: Real>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    ap: &AdversaryParamsG<Var>,
    slots: Var,
    pyramid: &[Var],
    h: usize,
    w: usize,
) -> Vec<Var> {
    let n = tape.value(slots).shape()[0];
    (0..n)
        .map(|i| {
            let slot = tape.row(slots, i);
            decoder::adversarial_decode_graph(tape, slot, pyramid, &ap.decoder, h, w, cfg.conditional)
        })
        .collect()
}

fn extract_outputs<F: Real>(tape: &Tape<F>, fwd: &GraphForward) -> Result<ForwardOutputs<F>> {
    let slots2 = tape.value(fwd.slots).view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let per_slot_flow: Vec<Array3<F>> = fwd
        .flows
        .iter()
        .map(|&v| tape.value(v).view().into_dimensionality::<Ix3>().unwrap().to_owned())
        .collect();
    let n = fwd.masks.len();
    let (h, w, _) = per_slot_flow[0].dim();
    let mut masks = Array3::<F>::zeros((n, h, w));
    for (i, &mv) in fwd.masks.iter().enumerate() {
        let m = tape.value(mv);
        for y in 0..h {
            for x in 0..w {
                masks[[i, y, x]] = m[[y, x, 0]];
            }
        }
    }
    let composite = tape.value(fwd.composite).view().into_dimensionality::<Ix3>().unwrap().to_owned();
    if composite.iter().any(|v| !v.is_finite()) {
        return Err(DivaError::Numerical("forward produced non-finite output".into()));
    }
    Ok(ForwardOutputs {
        slots: SlotSet::new(slots2)?,
        per_slot_flow,
        masks: MaskSet { masks },
        composite,
    })
}

impl<F: Real> DivaModel<F> {
    /// Fresh model with randomly initialized weights.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        Ok(DivaModel { config, params })
    }

    fn check_flow_dims(&self, flow: &FlowRgb<F>, image: Option<&Image<F>>) -> Result<()> {
        if let Some(img) = image {
            if img.dims() != flow.dims() {
                return Err(DivaError::shape(
                    "forward",
                    format!("image on the flow lattice {:?}", flow.dims()),
                    format!("{:?}", img.dims()),
                ));
            }
        }
        if self.config.conditional && image.is_none() {
            return Err(DivaError::InvalidArgument(
                "conditional model requires an image".into(),
            ));
        }
        Ok(())
    }

    /// Flow feature grid `[H, W, enc_channels]`: conv stack plus positional
    /// embedding. Fully convolutional; any lattice size works.
    pub fn encode_features(&self, flow: &FlowRgb<F>) -> Result<Array3<F>> {
        let mut tape = Tape::new(false);
        let mp = params::bind_frozen(&mut tape, &self.params);
        let fv = tape.constant(flow.data().clone().into_dyn());
        let feats = encoder::encode_features(&mut tape, fv, &mp.encoder);
        Ok(tape.value(feats).view().into_dimensionality::<Ix3>().unwrap().to_owned())
    }

    /// Sample `n` initial slots.
    pub fn init_slots(&self, n: usize, rng: &mut impl Rng) -> Result<SlotSet<F>> {
        SlotSet::new(attention::init_slots(&self.params.slot_init, n, rng)?)
    }

    /// One binding iteration over an explicit feature grid.
    pub fn attention_step(&self, slots: &SlotSet<F>, features: &Array3<F>) -> Result<SlotSet<F>> {
        if features.dim().2 != self.config.enc_channels {
            return Err(DivaError::shape(
                "attention_step",
                format!("{} feature channels", self.config.enc_channels),
                format!("{}", features.dim().2),
            ));
        }
        let mut tape = Tape::new(false);
        let mp = params::bind_frozen(&mut tape, &self.params);
        let fv = tape.constant(features.clone().into_dyn());
        let bound = attention::prepare_features(&mut tape, fv, &mp.attention);
        let sv = tape.constant(slots.slots.clone().into_dyn());
        let out = attention::attention_step(&mut tape, sv, &bound, &mp.attention);
        SlotSet::new(tape.value(out).view().into_dimensionality::<Ix2>().unwrap().to_owned())
    }

    /// Encode, then run `iters` binding iterations from freshly drawn slots.
    pub fn bind(&self, flow: &FlowRgb<F>, n: usize, iters: usize, rng: &mut impl Rng) -> Result<SlotSet<F>> {
        let initial = self.init_slots(n, rng)?;
        self.bind_from(flow, &initial, iters)
    }

    /// Binding from externally supplied initial slots (recursive video mode
    /// runs this with `iters = 1`).
    pub fn bind_from(&self, flow: &FlowRgb<F>, initial: &SlotSet<F>, iters: usize) -> Result<SlotSet<F>> {
        if iters == 0 {
            return Err(DivaError::InvalidArgument("bind: iters must be at least 1".into()));
        }
        let mut tape = Tape::new(false);
        let mp = params::bind_frozen(&mut tape, &self.params);
        let fv = tape.constant(flow.data().clone().into_dyn());
        let feats = encoder::encode_features(&mut tape, fv, &mp.encoder);
        let bound = attention::prepare_features(&mut tape, feats, &mp.attention);
        let init = tape.constant(initial.slots.clone().into_dyn());
        let out = attention::bind_iterations(&mut tape, init, &bound, &mp.attention, iters, false);
        SlotSet::new(tape.value(out).view().into_dimensionality::<Ix2>().unwrap().to_owned())
    }

    /// The 5-level condition pyramid, each level `[H, W, cond_channels]`.
    pub fn encode_condition(&self, image: &Image<F>) -> Result<Vec<Array3<F>>> {
        let cond = self.params.cond.as_ref().ok_or_else(|| {
            DivaError::InvalidArgument("encode_condition on an unconditional model".into())
        })?;
        let mut tape = Tape::new(false);
        let cv = cond.map(&mut |a| tape.constant(a.clone()));
        let iv = tape.constant(image.data().clone().into_dyn());
        let levels = decoder::encode_condition(&mut tape, iv, &cv);
        Ok(levels
            .into_iter()
            .map(|v| tape.value(v).view().into_dimensionality::<Ix3>().unwrap().to_owned())
            .collect())
    }

    /// Decode a single slot against a condition pyramid.
    pub fn decode_slot(&self, slot: ArrayView1<F>, pyramid: &[Array3<F>]) -> Result<SlotDecode<F>> {
        if slot.len() != self.config.slot_dim {
            return Err(DivaError::shape(
                "decode_slot",
                format!("slot width {}", self.config.slot_dim),
                format!("{}", slot.len()),
            ));
        }
        if self.config.conditional && pyramid.len() < self.config.dec_kernels.len() {
            return Err(DivaError::shape(
                "decode_slot",
                format!("{} pyramid levels", self.config.dec_kernels.len()),
                format!("{}", pyramid.len()),
            ));
        }
        let (h, w) = if self.config.conditional {
            let d = pyramid[0].dim();
            (d.0, d.1)
        } else {
            return Err(DivaError::InvalidArgument(
                "decode_slot on an unconditional model needs a target size; use forward".into(),
            ));
        };
        let mut tape = Tape::new(false);
        let dv = self.params.decoder.map(&mut |a| tape.constant(a.clone()));
        let pv: Vec<Var> = pyramid.iter().map(|p| tape.constant(p.clone().into_dyn())).collect();
        let sv = tape.constant(slot.to_owned().insert_axis(ndarray::Axis(0)).into_dyn());
        let (flow, logit) = decoder::decode_slot_graph(&mut tape, sv, &pv, &dv, h, w, true);
        Ok(SlotDecode {
            flow_rgb: tape.value(flow).view().into_dimensionality::<Ix3>().unwrap().to_owned(),
            mask_logit: tape.value(logit).view().into_dimensionality::<Ix3>().unwrap().to_owned(),
        })
    }

    /// Whole-flow reconstruction of one slot by the adversary.
    pub fn adversarial_decode(
        &self,
        adversary: &AdversaryParams<F>,
        slot: ArrayView1<F>,
        pyramid: &[Array3<F>],
    ) -> Result<Array3<F>> {
        if self.config.conditional && pyramid.len() < self.config.dec_kernels.len() {
            return Err(DivaError::shape(
                "adversarial_decode",
                format!("{} pyramid levels", self.config.dec_kernels.len()),
                format!("{}", pyramid.len()),
            ));
        }
        let d = pyramid[0].dim();
        let mut tape = Tape::new(false);
        let dv = adversary.decoder.map(&mut |a| tape.constant(a.clone()));
        let pv: Vec<Var> = pyramid.iter().map(|p| tape.constant(p.clone().into_dyn())).collect();
        let sv = tape.constant(slot.to_owned().insert_axis(ndarray::Axis(0)).into_dyn());
        let out =
            decoder::adversarial_decode_graph(&mut tape, sv, &pv, &dv, d.0, d.1, self.config.conditional);
        Ok(tape.value(out).view().into_dimensionality::<Ix3>().unwrap().to_owned())
    }

    /// Full no-grad forward from freshly drawn slots.
    pub fn forward(
        &self,
        flow: &FlowRgb<F>,
        image: Option<&Image<F>>,
        n: usize,
        iters: usize,
        rng: &mut impl Rng,
    ) -> Result<ForwardOutputs<F>> {
        let initial = self.init_slots(n, rng)?;
        self.forward_from_slots(flow, image, &initial, iters)
    }

    /// Full no-grad forward from explicit initial slots.
    pub fn forward_from_slots(
        &self,
        flow: &FlowRgb<F>,
        image: Option<&Image<F>>,
        initial: &SlotSet<F>,
        iters: usize,
    ) -> Result<ForwardOutputs<F>> {
        self.check_flow_dims(flow, image)?;
        if iters == 0 {
            return Err(DivaError::InvalidArgument("forward: iters must be at least 1".into()));
        }
        let mut tape = Tape::new(false);
        let mp = params::bind_frozen(&mut tape, &self.params);
        let fv = tape.constant(flow.data().clone().into_dyn());
        let iv = image.map(|img| tape.constant(img.data().clone().into_dyn()));
        let fwd = forward_graph(&mut tape, &self.config, &mp, fv, iv, &initial.slots, iters, false);
        extract_outputs(&tape, &fwd)
    }
}

/// Compose a list of per-slot decodes: per-pixel softmax over mask logits and
/// the mask-weighted flow sum. Returns (masks, composite, per-slot flows).
pub fn compose<F: Real>(decodes: &[SlotDecode<F>]) -> Result<(MaskSet<F>, FlowRgb<F>, Vec<Array3<F>>)> {
    let flows: Vec<_> = decodes.iter().map(|d| d.flow_rgb.view()).collect();
    let logits: Vec<_> = decodes.iter().map(|d| d.mask_logit.view()).collect();
    let (masks, composite) = decoder::compose_arrays(&flows, &logits)?;
    Ok((
        MaskSet { masks },
        FlowRgb::from_raw(composite),
        decodes.iter().map(|d| d.flow_rgb.clone()).collect(),
    ))
}
