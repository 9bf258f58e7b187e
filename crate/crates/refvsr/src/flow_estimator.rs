//! Shared cross-scale flow network: given the HR reference and a bicubicly
//! upsampled LR frame, produce a dense flow aligning the reference onto that
//! frame's grid. The same weights serve every time step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::imaging::{bicubic_resample, reflect_pad_frame, FlowField, Frame};
use crate::nn::{lrelu, to_f32, to_f64, Conv, ConvT, Init, Loaded, ParamStore};

/// Encoder widths of the compact 4-level estimator.
const ENC_WIDTHS: [usize; 4] = [16, 32, 64, 96];
/// Decoder widths (post-upsample, pre-skip-concat).
const DEC_WIDTHS: [usize; 4] = [48, 24, 16, 12];

/// Weights of the flow estimator. Input is the channelwise concatenation of
/// the reference and the upsampled LR frame (both mapped to [-0.5, 0.5]),
/// output is a 2-channel flow. The final conv is zero-initialized so a fresh
/// network predicts the zero flow.
pub struct FlowEstimatorParams {
    pub(crate) store: ParamStore,
    channels: usize,
    enc: [Conv; 4],
    dec: [ConvT; 4],
    head: Conv,
}

impl FlowEstimatorParams {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let cin = 2 * channels;
        let enc = [
            Conv::new(&mut store, "enc1", 3, cin, ENC_WIDTHS[0], 2, Init::He, rng),
            Conv::new(&mut store, "enc2", 3, ENC_WIDTHS[0], ENC_WIDTHS[1], 2, Init::He, rng),
            Conv::new(&mut store, "enc3", 3, ENC_WIDTHS[1], ENC_WIDTHS[2], 2, Init::He, rng),
            Conv::new(&mut store, "enc4", 3, ENC_WIDTHS[2], ENC_WIDTHS[3], 2, Init::He, rng),
        ];
        let dec = [
            ConvT::new(&mut store, "dec4", ENC_WIDTHS[3], DEC_WIDTHS[0], rng),
            ConvT::new(&mut store, "dec3", DEC_WIDTHS[0] + ENC_WIDTHS[2], DEC_WIDTHS[1], rng),
            ConvT::new(&mut store, "dec2", DEC_WIDTHS[1] + ENC_WIDTHS[1], DEC_WIDTHS[2], rng),
            ConvT::new(&mut store, "dec1", DEC_WIDTHS[2] + ENC_WIDTHS[0], DEC_WIDTHS[3], rng),
        ];
        let head = Conv::new(&mut store, "head", 3, DEC_WIDTHS[3], 2, 1, Init::Zero, rng);
        FlowEstimatorParams {
            store,
            channels,
            enc,
            dec,
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

    /// Flow graph for one (reference, upsampled LR) pair. Inputs are raw
    /// [0, 1] intensity nodes with spatial dims divisible by 16.
    pub(crate) fn forward(
        &self,
        t: &mut Tape<f32>,
        lp: &Loaded,
        ref_in: NodeId,
        lrup_in: NodeId,
    ) -> NodeId {
        let r = t.shift(ref_in, -0.5);
        let l = t.shift(lrup_in, -0.5);
        let x = t.concat_c(&[r, l]);
        let c1 = self.enc[0].apply(t, lp, x);
        let e1 = lrelu(t, c1);
        let c2 = self.enc[1].apply(t, lp, e1);
        let e2 = lrelu(t, c2);
        let c3 = self.enc[2].apply(t, lp, e2);
        let e3 = lrelu(t, c3);
        let c4 = self.enc[3].apply(t, lp, e3);
        let e4 = lrelu(t, c4);

        let u4 = self.dec[0].apply(t, lp, e4);
        let d4 = lrelu(t, u4);
        let s3 = t.concat_c(&[d4, e3]);
        let u3 = self.dec[1].apply(t, lp, s3);
        let d3 = lrelu(t, u3);
        let s2 = t.concat_c(&[d3, e2]);
        let u2 = self.dec[2].apply(t, lp, s2);
        let d2 = lrelu(t, u2);
        let s1 = t.concat_c(&[d2, e1]);
        let u1 = self.dec[3].apply(t, lp, s1);
        let d1 = lrelu(t, u1);
        self.head.apply(t, lp, d1)
    }
}

/// Pad frame dims up to multiples of 16 (reflect-101, bottom/right).
pub(crate) fn pad_to_16(frame: &Frame) -> Result<(Frame, usize, usize)> {
    let (h, w) = (frame.height(), frame.width());
    let pb = (16 - h % 16) % 16;
    let pr = (16 - w % 16) % 16;
    if pb >= h || pr >= w {
        return Err(Error::InvalidArgument(format!(
            "frame {h}x{w} too small to pad to a multiple of 16"
        )));
    }
    let padded = if pb == 0 && pr == 0 {
        frame.clone()
    } else {
        reflect_pad_frame(frame, [0, pb, 0, pr])?
    };
    Ok((padded, h, w))
}

/// Estimate the cross-scale flow aligning `ref_hr` onto `lr_upsampled`'s
/// grid. Both inputs must share spatial dims and channel count (the LR frame
/// has already been upsampled 4x).
pub fn estimate_flow(
    ref_hr: &Frame,
    lr_upsampled: &Frame,
    params: &FlowEstimatorParams,
) -> Result<FlowField> {
    if ref_hr.height() != lr_upsampled.height() || ref_hr.width() != lr_upsampled.width() {
        return Err(Error::DimensionMismatch(format!(
            "reference {}x{} vs upsampled LR {}x{}",
            ref_hr.height(),
            ref_hr.width(),
            lr_upsampled.height(),
            lr_upsampled.width()
        )));
    }
    if ref_hr.channels() != lr_upsampled.channels() || ref_hr.channels() != params.channels {
        return Err(Error::DimensionMismatch(format!(
            "channels: reference {}, LR {}, estimator expects {}",
            ref_hr.channels(),
            lr_upsampled.channels(),
            params.channels
        )));
    }
    let (ref_p, h, w) = pad_to_16(ref_hr)?;
    let (lr_p, _, _) = pad_to_16(lr_upsampled)?;
    let mut t = Tape::<f32>::new();
    let lp = params.store.load(&mut t);
    let r = t.leaf3(to_f32(ref_p.data()));
    let l = t.leaf3(to_f32(lr_p.data()));
    let flow = params.forward(&mut t, &lp, r, l);
    let full = to_f64(&t.value3(flow));
    let cropped = full.slice(ndarray::s![..h, ..w, ..]).to_owned();
    FlowField::new(cropped)
}

/// Apply the shared estimator to every LR frame: upsample each by 4x and run
/// [`estimate_flow`] with the same parameters. Output order follows input
/// order.
pub fn estimate_flows_sequence(
    ref_hr: &Frame,
    lr_sequence: &[Frame],
    params: &FlowEstimatorParams,
) -> Result<Vec<FlowField>> {
    if lr_sequence.is_empty() {
        return Err(Error::InvalidArgument("empty LR sequence".into()));
    }
    let (lh, lw) = (lr_sequence[0].height(), lr_sequence[0].width());
    for (i, f) in lr_sequence.iter().enumerate() {
        if f.height() != lh || f.width() != lw {
            return Err(Error::DimensionMismatch(format!(
                "LR frame {i} is {}x{}, expected {lh}x{lw}",
                f.height(),
                f.width()
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
    lr_sequence
        .iter()
        .map(|lr| {
            let up = bicubic_resample(lr, 4.0)?;
            estimate_flow(ref_hr, &up, params)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses;

    fn toy_frame(h: usize, w: usize, seed: u64) -> Frame {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::from_fn(h, w, 3, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn output_shape_and_finiteness_under_random_params() {
        let params = FlowEstimatorParams::init(3, 0);
        let a = toy_frame(32, 48, 1);
        let b = toy_frame(32, 48, 2);
        let flow = estimate_flow(&a, &b, &params).unwrap();
        assert_eq!(flow.height(), 32);
        assert_eq!(flow.width(), 48);
        assert!(flow.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fresh_params_predict_zero_flow() {
        let params = FlowEstimatorParams::init(3, 3);
        let a = toy_frame(32, 32, 3);
        let b = toy_frame(32, 32, 4);
        let flow = estimate_flow(&a, &b, &params).unwrap();
        assert!(flow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn determinism_two_calls_identical() {
        let params = FlowEstimatorParams::init(3, 5);
        let mut noisy = FlowEstimatorParams::init(3, 5);
        noisy.store.perturb(&mut ChaCha8Rng::seed_from_u64(9), 0.05);
        let a = toy_frame(32, 32, 6);
        let b = toy_frame(32, 32, 7);
        let f1 = estimate_flow(&a, &b, &noisy).unwrap();
        let f2 = estimate_flow(&a, &b, &noisy).unwrap();
        assert_eq!(f1, f2);
        drop(params);
    }

    #[test]
    fn sequence_applies_shared_weights() {
        let mut params = FlowEstimatorParams::init(3, 8);
        params.store.perturb(&mut ChaCha8Rng::seed_from_u64(10), 0.05);
        let reference = toy_frame(64, 64, 11);
        let lr_a = toy_frame(16, 16, 12);
        let lr_b = toy_frame(16, 16, 13);
        // duplicated frame at positions 0 and 2 must give identical flows
        let flows =
            estimate_flows_sequence(&reference, &[lr_a.clone(), lr_b, lr_a.clone()], &params)
                .unwrap();
        assert_eq!(flows.len(), 3);
        assert_eq!(flows[0], flows[2]);
        for f in &flows {
            assert_eq!(f.height(), 64);
            assert_eq!(f.width(), 64);
        }
        // singleton sequence equals a direct estimate_flow call
        let single = estimate_flows_sequence(&reference, &[lr_a.clone()], &params).unwrap();
        let up = bicubic_resample(&lr_a, 4.0).unwrap();
        let direct = estimate_flow(&reference, &up, &params).unwrap();
        assert_eq!(single[0], direct);
    }

    #[test]
    fn sequence_validates_inputs() {
        let params = FlowEstimatorParams::init(3, 14);
        let reference = toy_frame(64, 64, 15);
        assert!(matches!(
            estimate_flows_sequence(&reference, &[], &params),
            Err(Error::InvalidArgument(_))
        ));
        let lr_a = toy_frame(16, 16, 16);
        let lr_bad = toy_frame(16, 20, 17);
        assert!(matches!(
            estimate_flows_sequence(&reference, &[lr_a.clone(), lr_bad], &params),
            Err(Error::DimensionMismatch(_))
        ));
        let wrong_ref = toy_frame(60, 64, 18);
        assert!(estimate_flows_sequence(&wrong_ref, &[lr_a], &params).is_err());
    }

    #[test]
    fn perturbing_params_changes_every_step_flow() {
        let mut params = FlowEstimatorParams::init(3, 19);
        params.store.perturb(&mut ChaCha8Rng::seed_from_u64(20), 0.05);
        let reference = toy_frame(64, 64, 21);
        let lrs: Vec<Frame> = (0..3).map(|i| toy_frame(16, 16, 22 + i)).collect();
        let before = estimate_flows_sequence(&reference, &lrs, &params).unwrap();
        params.store.perturb(&mut ChaCha8Rng::seed_from_u64(23), 0.05);
        let after = estimate_flows_sequence(&reference, &lrs, &params).unwrap();
        for (b, a) in before.iter().zip(after.iter()) {
            assert_ne!(b, a, "shared weights must affect every step");
        }
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut params = FlowEstimatorParams::init(3, 24);
        params.store.perturb(&mut ChaCha8Rng::seed_from_u64(25), 0.05);
        let a = toy_frame(32, 32, 26);
        let b = toy_frame(32, 32, 27);
        let gt = toy_frame(32, 32, 28);
        let mut t = Tape::<f32>::new();
        let lp = params.store.load(&mut t);
        let r = t.leaf3(to_f32(a.data()));
        let l = t.leaf3(to_f32(b.data()));
        let g = t.leaf3(to_f32(gt.data()));
        let flow = params.forward(&mut t, &lp, r, l);
        let loss = losses::loss_flow_refined_node(&mut t, r, flow, g, 2);
        t.backward(loss);
        for (i, id) in lp.all().iter().enumerate() {
            let grad = t.grad(*id).expect("missing grad");
            assert!(grad.iter().all(|v| v.is_finite()), "param {i} grad not finite");
            assert!(
                grad.iter().any(|&v| v != 0.0),
                "param {i} grad identically zero"
            );
        }
    }
}
