//! Warp-and-synthesize decoding: a shared encoder extracts 4-scale feature
//! pyramids from the upsampled LR frame and the HR reference, the reference
//! image and its pyramid are warped by the refined flow, and a U-Net style
//! decoder fuses everything into a residual on top of the bicubic upsample.

use ndarray::{s, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::flow_estimator::{pad_to_16, FlowEstimatorParams};
use crate::flow_refiner::FlowRefinerParams;
use crate::imaging::{backward_warp, bicubic_resample, FlowField, Frame};
use crate::kernels;
use crate::nn::{lrelu, to_f32, to_f64, Conv, ConvT, Init, Loaded, ParamStore};

/// Feature channels per pyramid level s = 1..4.
pub const PYRAMID_CHANNELS: [usize; 4] = [16, 32, 64, 96];

/// Per-scale feature maps; level s has spatial size (H/2^(s-1), W/2^(s-1))
/// and PYRAMID_CHANNELS[s-1] channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Array3<f64>>,
}

impl FeaturePyramid {
    pub(crate) fn from_levels(levels: Vec<Array3<f64>>) -> Self {
        debug_assert_eq!(levels.len(), 4);
        FeaturePyramid { levels }
    }

    /// Level s in 1..=4.
    pub fn level(&self, s: usize) -> &Array3<f64> {
        assert!((1..=4).contains(&s), "pyramid level must be in 1..=4");
        &self.levels[s - 1]
    }

    pub fn levels(&self) -> &[Array3<f64>] {
        &self.levels
    }
}

/// Encoder (shared between the LR and reference branches) plus decoder
/// weights for the synthesis network.
pub struct SynthesisParams {
    pub(crate) enc_store: ParamStore,
    pub(crate) dec_store: ParamStore,
    channels: usize,
    enc: [Conv; 4],
    dec_fuse: [Conv; 4],
    dec_up: [ConvT; 3],
    head: Conv,
}

/// Decoder fusion widths at scales 4..1.
const DEC_FUSE_WIDTHS: [usize; 4] = [96, 48, 24, 16];
/// Decoder upsample widths entering scales 3..1.
const DEC_UP_WIDTHS: [usize; 3] = [48, 24, 12];

impl SynthesisParams {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut enc_store = ParamStore::new();
        let c = PYRAMID_CHANNELS;
        let enc = [
            Conv::new(&mut enc_store, "enc1", 3, channels, c[0], 1, Init::He, rng),
            Conv::new(&mut enc_store, "enc2", 3, c[0], c[1], 2, Init::He, rng),
            Conv::new(&mut enc_store, "enc3", 3, c[1], c[2], 2, Init::He, rng),
            Conv::new(&mut enc_store, "enc4", 3, c[2], c[3], 2, Init::He, rng),
        ];
        let mut dec_store = ParamStore::new();
        let dec_fuse = [
            Conv::new(&mut dec_store, "fuse4", 3, 2 * c[3], DEC_FUSE_WIDTHS[0], 1, Init::He, rng),
            Conv::new(
                &mut dec_store,
                "fuse3",
                3,
                DEC_UP_WIDTHS[0] + 2 * c[2],
                DEC_FUSE_WIDTHS[1],
                1,
                Init::He,
                rng,
            ),
            Conv::new(
                &mut dec_store,
                "fuse2",
                3,
                DEC_UP_WIDTHS[1] + 2 * c[1],
                DEC_FUSE_WIDTHS[2],
                1,
                Init::He,
                rng,
            ),
            Conv::new(
                &mut dec_store,
                "fuse1",
                3,
                DEC_UP_WIDTHS[2] + 2 * c[0] + 2 * channels,
                DEC_FUSE_WIDTHS[3],
                1,
                Init::He,
                rng,
            ),
        ];
        let dec_up = [
            ConvT::new(&mut dec_store, "up4", DEC_FUSE_WIDTHS[0], DEC_UP_WIDTHS[0], rng),
            ConvT::new(&mut dec_store, "up3", DEC_FUSE_WIDTHS[1], DEC_UP_WIDTHS[1], rng),
            ConvT::new(&mut dec_store, "up2", DEC_FUSE_WIDTHS[2], DEC_UP_WIDTHS[2], rng),
        ];
        let head = Conv::new(&mut dec_store, "head", 3, DEC_FUSE_WIDTHS[3], channels, 1, Init::Zero, rng);
        SynthesisParams {
            enc_store,
            dec_store,
            channels,
            enc,
            dec_fuse,
            dec_up,
            head,
        }
    }

    pub fn init(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(channels, &mut rng)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub(crate) fn encode_on_tape(
        &self,
        t: &mut Tape<f32>,
        lp: &Loaded,
        img: NodeId,
    ) -> [NodeId; 4] {
        let x = t.shift(img, -0.5);
        let c1 = self.enc[0].apply(t, lp, x);
        let f1 = lrelu(t, c1);
        let c2 = self.enc[1].apply(t, lp, f1);
        let f2 = lrelu(t, c2);
        let c3 = self.enc[2].apply(t, lp, f2);
        let f3 = lrelu(t, c3);
        let c4 = self.enc[3].apply(t, lp, f3);
        let f4 = lrelu(t, c4);
        [f1, f2, f3, f4]
    }

    /// Residual emitted on top of the upsampled LR frame.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn decode_on_tape(
        &self,
        t: &mut Tape<f32>,
        lp: &Loaded,
        lr_up: NodeId,
        warped_ref: NodeId,
        lr_pyr: &[NodeId; 4],
        warped_ref_pyr: &[NodeId; 4],
    ) -> NodeId {
        let x4 = t.concat_c(&[lr_pyr[3], warped_ref_pyr[3]]);
        let f4 = self.dec_fuse[0].apply(t, lp, x4);
        let f4 = lrelu(t, f4);
        let u3 = self.dec_up[0].apply(t, lp, f4);
        let u3 = lrelu(t, u3);

        let x3 = t.concat_c(&[u3, lr_pyr[2], warped_ref_pyr[2]]);
        let f3 = self.dec_fuse[1].apply(t, lp, x3);
        let f3 = lrelu(t, f3);
        let u2 = self.dec_up[1].apply(t, lp, f3);
        let u2 = lrelu(t, u2);

        let x2 = t.concat_c(&[u2, lr_pyr[1], warped_ref_pyr[1]]);
        let f2 = self.dec_fuse[2].apply(t, lp, x2);
        let f2 = lrelu(t, f2);
        let u1 = self.dec_up[2].apply(t, lp, f2);
        let u1 = lrelu(t, u1);

        let lc = t.shift(lr_up, -0.5);
        let wc = t.shift(warped_ref, -0.5);
        let x1 = t.concat_c(&[u1, lr_pyr[0], warped_ref_pyr[0], lc, wc]);
        let f1 = self.dec_fuse[3].apply(t, lp, x1);
        let f1 = lrelu(t, f1);
        self.head.apply(t, lp, f1)
    }
}

/// Extract the 4-level feature pyramid of a frame (dims divisible by 8).
pub fn encode(frame: &Frame, params: &SynthesisParams) -> Result<FeaturePyramid> {
    let (h, w, c) = frame.data().dim();
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "encode: dims {h}x{w} must be divisible by 8"
        )));
    }
    if c != params.channels {
        return Err(Error::DimensionMismatch(format!(
            "encode: frame has {c} channels, encoder expects {}",
            params.channels
        )));
    }
    let mut t = Tape::<f32>::new();
    let lp = params.enc_store.load(&mut t);
    let img = t.leaf3(to_f32(frame.data()));
    let levels = params.encode_on_tape(&mut t, &lp, img);
    Ok(FeaturePyramid::from_levels(
        levels.iter().map(|id| to_f64(&t.value3(*id))).collect(),
    ))
}

/// Bring a full-resolution flow to pyramid level s: average-pool by
/// 2^(s-1) and divide displacements by 2^(s-1). Level 1 is the identity.
pub fn scale_flow(flow: &FlowField, level: usize) -> Result<FlowField> {
    if !(1..=4).contains(&level) {
        return Err(Error::InvalidArgument(format!(
            "pyramid level must be in 1..=4, got {level}"
        )));
    }
    let div = 1usize << (level - 1);
    let (h, w) = (flow.height(), flow.width());
    if h % div != 0 || w % div != 0 {
        return Err(Error::InvalidArgument(format!(
            "flow dims {h}x{w} not divisible by {div} for level {level}"
        )));
    }
    let mut data = flow.data().clone();
    for _ in 1..level {
        data = kernels::avgpool2_fwd(&data.view());
        data.mapv_inplace(|v| v * 0.5);
    }
    FlowField::new(data)
}

/// Warp the reference image and its feature pyramid by the refined flow.
pub fn warp_reference(
    ref_hr: &Frame,
    ref_pyramid: &FeaturePyramid,
    refined_flow: &FlowField,
) -> Result<(Frame, FeaturePyramid)> {
    let (h, w, _) = ref_hr.data().dim();
    if refined_flow.height() != h || refined_flow.width() != w {
        return Err(Error::DimensionMismatch(format!(
            "flow {}x{} vs reference {h}x{w}",
            refined_flow.height(),
            refined_flow.width()
        )));
    }
    for (i, lvl) in ref_pyramid.levels().iter().enumerate() {
        let div = 1usize << i;
        if lvl.dim().0 != h / div || lvl.dim().1 != w / div {
            return Err(Error::DimensionMismatch(format!(
                "pyramid level {} is {:?}, expected ({}, {}, _)",
                i + 1,
                lvl.dim(),
                h / div,
                w / div
            )));
        }
    }
    let warped_img = Frame::new(backward_warp(ref_hr.view(), refined_flow)?)?;
    let mut warped_levels = Vec::with_capacity(4);
    for (i, lvl) in ref_pyramid.levels().iter().enumerate() {
        let fl = scale_flow(refined_flow, i + 1)?;
        warped_levels.push(backward_warp(lvl.view(), &fl)?);
    }
    Ok((warped_img, FeaturePyramid::from_levels(warped_levels)))
}

/// Decode the super-resolved frame from the two images and two pyramids.
/// The decoder emits a residual added to `lr_up`; no clamping is applied.
pub fn decode(
    lr_up: &Frame,
    warped_ref: &Frame,
    lr_pyramid: &FeaturePyramid,
    warped_ref_pyramid: &FeaturePyramid,
    params: &SynthesisParams,
) -> Result<Frame> {
    if lr_up.data().dim() != warped_ref.data().dim() {
        return Err(Error::DimensionMismatch(format!(
            "lr_up {:?} vs warped reference {:?}",
            lr_up.data().dim(),
            warped_ref.data().dim()
        )));
    }
    let (h, w, c) = lr_up.data().dim();
    if c != params.channels {
        return Err(Error::DimensionMismatch(format!(
            "decode: {c} channels, decoder expects {}",
            params.channels
        )));
    }
    for (name, pyr) in [("lr", lr_pyramid), ("warped ref", warped_ref_pyramid)] {
        for (i, lvl) in pyr.levels().iter().enumerate() {
            let div = 1usize << i;
            let want = (h / div, w / div, PYRAMID_CHANNELS[i]);
            if lvl.dim() != want {
                return Err(Error::DimensionMismatch(format!(
                    "{name} pyramid level {}: {:?}, expected {want:?}",
                    i + 1,
                    lvl.dim()
                )));
            }
        }
    }
    let mut t = Tape::<f32>::new();
    let lp = params.dec_store.load(&mut t);
    let lu = t.leaf3(to_f32(lr_up.data()));
    let wr = t.leaf3(to_f32(warped_ref.data()));
    let lpyr: Vec<NodeId> = lr_pyramid
        .levels()
        .iter()
        .map(|l| t.leaf3(l.mapv(|v| v as f32)))
        .collect();
    let wpyr: Vec<NodeId> = warped_ref_pyramid
        .levels()
        .iter()
        .map(|l| t.leaf3(l.mapv(|v| v as f32)))
        .collect();
    let residual = params.decode_on_tape(
        &mut t,
        &lp,
        lu,
        wr,
        &[lpyr[0], lpyr[1], lpyr[2], lpyr[3]],
        &[wpyr[0], wpyr[1], wpyr[2], wpyr[3]],
    );
    // residual added in f64 so a zero-initialized head is an exact identity
    let res = to_f64(&t.value3(residual));
    Frame::new(lr_up.data() + &res)
}

/// Model configuration shared by construction, training, and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub n: usize,
    pub residual_refiner: bool,
}

/// The four parameter groups of the full pipeline.
pub struct ModelParams {
    pub flow: FlowEstimatorParams,
    pub refiner: FlowRefinerParams,
    pub synthesis: SynthesisParams,
}

pub(crate) struct LoadedModel {
    pub flow: Loaded,
    pub refiner: Loaded,
    pub enc: Loaded,
    pub dec: Loaded,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flow = FlowEstimatorParams::new(cfg.channels, &mut rng);
        let refiner = FlowRefinerParams::new(cfg.n, cfg.residual_refiner, &mut rng);
        let synthesis = SynthesisParams::new(cfg.channels, &mut rng);
        ModelParams {
            flow,
            refiner,
            synthesis,
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.flow.channels(),
            n: self.refiner.n(),
            residual_refiner: self.refiner.residual(),
        }
    }

    pub(crate) fn load(&self, t: &mut Tape<f32>) -> LoadedModel {
        LoadedModel {
            flow: self.flow.store.load(t),
            refiner: self.refiner.store.load(t),
            enc: self.synthesis.enc_store.load(t),
            dec: self.synthesis.dec_store.load(t),
        }
    }

    /// Visit every parameter tensor in a fixed order with a stable name.
    pub fn visit(&self, f: &mut impl FnMut(&str, &ndarray::ArrayD<f32>)) {
        self.flow.store.visit("flow", f);
        self.refiner.store.visit("refiner", f);
        self.synthesis.enc_store.visit("encoder", f);
        self.synthesis.dec_store.visit("decoder", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut ndarray::ArrayD<f32>)) {
        self.flow.store.visit_mut("flow", f);
        self.refiner.store.visit_mut("refiner", f);
        self.synthesis.enc_store.visit_mut("encoder", f);
        self.synthesis.dec_store.visit_mut("decoder", f);
    }

    pub fn tensor_count(&self) -> usize {
        self.flow.store.tensor_count()
            + self.refiner.store.tensor_count()
            + self.synthesis.enc_store.tensor_count()
            + self.synthesis.dec_store.tensor_count()
    }
}

/// Node handles of one full forward pass.
pub(crate) struct PipelineGraph {
    pub flows: Vec<NodeId>,
    pub refined: NodeId,
    pub residual: NodeId,
    pub pred: NodeId,
}

/// Build the whole forward graph on a tape. Inputs must already be padded
/// to multiples of 16.
pub(crate) fn forward_pipeline(
    t: &mut Tape<f32>,
    m: &ModelParams,
    lm: &LoadedModel,
    ref_id: NodeId,
    lrup_ids: &[NodeId],
) -> PipelineGraph {
    let flows: Vec<NodeId> = lrup_ids
        .iter()
        .map(|l| m.flow.forward(t, &lm.flow, ref_id, *l))
        .collect();
    let refined = m.refiner.forward(t, &lm.refiner, &flows);
    let last_up = *lrup_ids.last().unwrap();
    let lr_pyr = m.synthesis.encode_on_tape(t, &lm.enc, last_up);
    let ref_pyr = m.synthesis.encode_on_tape(t, &lm.enc, ref_id);
    let warped_ref = t.warp(ref_id, refined);
    let mut warped_pyr = Vec::with_capacity(4);
    for (i, lvl) in ref_pyr.iter().enumerate() {
        let mut fl = refined;
        for _ in 0..i {
            let pooled = t.avg_pool2(fl);
            fl = t.scale(pooled, 0.5);
        }
        warped_pyr.push(t.warp(*lvl, fl));
    }
    let residual = m.synthesis.decode_on_tape(
        t,
        &lm.dec,
        last_up,
        warped_ref,
        &lr_pyr,
        &[warped_pyr[0], warped_pyr[1], warped_pyr[2], warped_pyr[3]],
    );
    let pred = t.add(last_up, residual);
    PipelineGraph {
        flows,
        refined,
        residual,
        pred,
    }
}

/// Validate clip geometry against the model and return (lr_h, lr_w).
pub(crate) fn check_clip_geometry(
    ref_hr: &Frame,
    lr_sequence: &[Frame],
    m: &ModelParams,
) -> Result<(usize, usize)> {
    if lr_sequence.is_empty() {
        return Err(Error::InvalidArgument("empty LR sequence".into()));
    }
    if lr_sequence.len() != m.refiner.n() {
        return Err(Error::InvalidArgument(format!(
            "clip has {} LR frames, model was built for n = {}",
            lr_sequence.len(),
            m.refiner.n()
        )));
    }
    let (lh, lw) = (lr_sequence[0].height(), lr_sequence[0].width());
    for (i, f) in lr_sequence.iter().enumerate() {
        if f.height() != lh || f.width() != lw || f.channels() != m.synthesis.channels() {
            return Err(Error::DimensionMismatch(format!(
                "LR frame {i}: {}x{}x{}",
                f.height(),
                f.width(),
                f.channels()
            )));
        }
    }
    if ref_hr.height() != 4 * lh || ref_hr.width() != 4 * lw {
        return Err(Error::DimensionMismatch(format!(
            "reference {}x{} is not 4x the LR {lh}x{lw}",
            ref_hr.height(),
            ref_hr.width()
        )));
    }
    if ref_hr.channels() != m.synthesis.channels() {
        return Err(Error::DimensionMismatch(format!(
            "reference has {} channels, model expects {}",
            ref_hr.channels(),
            m.synthesis.channels()
        )));
    }
    Ok((lh, lw))
}

/// Full super-resolution forward pass: estimate per-frame flows, refine the
/// furthest one, warp the reference, and decode. Output has the reference's
/// resolution (4x the LR dims); values are not clamped (PNG export clamps).
pub fn super_resolve(ref_hr: &Frame, lr_sequence: &[Frame], params: &ModelParams) -> Result<Frame> {
    check_clip_geometry(ref_hr, lr_sequence, params)?;
    let lr_ups: Vec<Frame> = lr_sequence
        .iter()
        .map(|lr| bicubic_resample(lr, 4.0))
        .collect::<Result<_>>()?;
    let (h, w) = (ref_hr.height(), ref_hr.width());
    let (ref_p, _, _) = pad_to_16(ref_hr)?;
    let mut t = Tape::<f32>::new();
    let lm = params.load(&mut t);
    let ref_id = t.leaf3(to_f32(ref_p.data()));
    let lrup_ids: Vec<NodeId> = lr_ups
        .iter()
        .map(|u| {
            let (p, _, _) = pad_to_16(u)?;
            Ok(t.leaf3(to_f32(p.data())))
        })
        .collect::<Result<_>>()?;
    let graph = forward_pipeline(&mut t, params, &lm, ref_id, &lrup_ids);
    // re-apply the decoder residual to the f64 bicubic upsample so the
    // untrained model (zero-initialized heads) is bit-exact bicubic
    let residual = to_f64(&t.value3(graph.residual));
    let residual = residual.slice(s![..h, ..w, ..]).to_owned();
    Frame::new(lr_ups.last().unwrap().data() + &residual)
}
