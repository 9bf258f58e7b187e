//! Flow refinement module: consumes the channelwise concatenation of all n
//! estimated flows and emits a refined flow for the temporally furthest
//! frame. U-Net with 4 strided convolutions down and 4 transposed
//! convolutions up, skip connections, and a residual output: the refined
//! flow is the furthest input flow plus a zero-initialized correction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::imaging::FlowField;
use crate::nn::{lrelu, to_f64, Conv, ConvT, Init, Loaded, ParamStore};

/// Encoder widths down the refiner.
const ENC_WIDTHS: [usize; 4] = [32, 64, 96, 128];
/// Decoder widths (post-upsample, pre-skip-concat).
const DEC_WIDTHS: [usize; 4] = [64, 32, 24, 16];

pub struct FlowRefinerParams {
    pub(crate) store: ParamStore,
    n: usize,
    residual: bool,
    enc: [Conv; 4],
    dec: [ConvT; 4],
    head: Conv,
}

impl FlowRefinerParams {
    pub fn new(n: usize, residual: bool, rng: &mut ChaCha8Rng) -> Self {
        assert!(n >= 1, "sequence length must be >= 1");
        let mut store = ParamStore::new();
        let cin = 2 * n;
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
        FlowRefinerParams {
            store,
            n,
            residual,
            enc,
            dec,
            head,
        }
    }

    pub fn init(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(n, true, &mut rng)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    /// The network's correction term for the furthest flow (pre-residual).
    pub(crate) fn forward_delta(
        &self,
        t: &mut Tape<f32>,
        lp: &Loaded,
        flows: &[NodeId],
    ) -> NodeId {
        let x = t.concat_c(flows);
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

    /// Refined flow node: furthest flow plus correction (or the bare
    /// correction when the residual toggle is off).
    pub(crate) fn forward(&self, t: &mut Tape<f32>, lp: &Loaded, flows: &[NodeId]) -> NodeId {
        let delta = self.forward_delta(t, lp, flows);
        if self.residual {
            t.add(flows[flows.len() - 1], delta)
        } else {
            delta
        }
    }
}

/// Refine the temporally furthest flow from the full flow sequence.
/// `flows.len()` must equal the refiner's declared n, all flows must share
/// spatial dims, and those dims must be divisible by 16.
pub fn refine_flows(flows: &[FlowField], params: &FlowRefinerParams) -> Result<FlowField> {
    if flows.len() != params.n {
        return Err(Error::InvalidArgument(format!(
            "got {} flows, refiner was built for n = {}",
            flows.len(),
            params.n
        )));
    }
    let (h, w) = (flows[0].height(), flows[0].width());
    for (i, f) in flows.iter().enumerate() {
        if f.height() != h || f.width() != w {
            return Err(Error::DimensionMismatch(format!(
                "flow {i} is {}x{}, expected {h}x{w}",
                f.height(),
                f.width()
            )));
        }
    }
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::InvalidArgument(format!(
            "flow dims {h}x{w} must be divisible by 16"
        )));
    }
    let mut t = Tape::<f32>::new();
    let lp = params.store.load(&mut t);
    let ids: Vec<NodeId> = flows
        .iter()
        .map(|f| t.leaf3(f.data().mapv(|v| v as f32)))
        .collect();
    let delta_id = params.forward_delta(&mut t, &lp, &ids);
    let delta = to_f64(&t.value3(delta_id));
    if params.residual {
        // residual combination in f64 keeps the untrained refiner an exact
        // identity on the furthest input flow
        FlowField::new(flows[params.n - 1].data() + &delta)
    } else {
        FlowField::new(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses;
    use crate::nn::to_f32;
    use rand::Rng;

    fn smooth_flow(h: usize, w: usize, seed: u64) -> FlowField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ax, ay) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
        FlowField::from_fn(h, w, |y, x| {
            (
                ax * (x as f64 / 13.0).sin(),
                ay * (y as f64 / 11.0).cos(),
            )
        })
        .unwrap()
    }

    #[test]
    fn fresh_refiner_is_identity_on_furthest_flow() {
        let params = FlowRefinerParams::init(4, 0);
        let flows: Vec<FlowField> = (0..4).map(|i| smooth_flow(32, 32, i)).collect();
        let refined = refine_flows(&flows, &params).unwrap();
        assert_eq!(refined, flows[3]);
    }

    #[test]
    fn degenerate_single_flow_is_identity_at_init() {
        let params = FlowRefinerParams::init(1, 1);
        let flows = vec![smooth_flow(16, 16, 5)];
        let refined = refine_flows(&flows, &params).unwrap();
        assert_eq!(refined, flows[0]);
    }

    #[test]
    fn validates_count_dims_and_divisibility() {
        let params = FlowRefinerParams::init(3, 2);
        let flows: Vec<FlowField> = (0..2).map(|i| smooth_flow(32, 32, i)).collect();
        assert!(matches!(
            refine_flows(&flows, &params),
            Err(Error::InvalidArgument(_))
        ));
        let mut three: Vec<FlowField> = (0..3).map(|i| smooth_flow(32, 32, i)).collect();
        three[2] = smooth_flow(32, 48, 9);
        assert!(matches!(
            refine_flows(&three, &params),
            Err(Error::DimensionMismatch(_))
        ));
        let odd: Vec<FlowField> = (0..3).map(|i| smooth_flow(24, 24, i)).collect();
        assert!(matches!(
            refine_flows(&odd, &params),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn output_shape_matches_input_for_perturbed_params() {
        let mut params = FlowRefinerParams::init(3, 3);
        params.store.perturb(&mut ChaCha8Rng::seed_from_u64(7), 0.05);
        let flows: Vec<FlowField> = (0..3).map(|i| smooth_flow(48, 32, 10 + i)).collect();
        let refined = refine_flows(&flows, &params).unwrap();
        assert_eq!(refined.height(), 48);
        assert_eq!(refined.width(), 32);
        assert!(refined.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn refiner_is_order_sensitive_with_nontrivial_weights() {
        let mut params = FlowRefinerParams::init(3, 4);
        params.store.perturb(&mut ChaCha8Rng::seed_from_u64(8), 0.05);
        let flows: Vec<FlowField> = (0..3).map(|i| smooth_flow(32, 32, 20 + i)).collect();
        let refined = refine_flows(&flows, &params).unwrap();
        let permuted = vec![flows[1].clone(), flows[0].clone(), flows[2].clone()];
        let refined_p = refine_flows(&permuted, &params).unwrap();
        assert_ne!(refined, refined_p);
    }

    #[test]
    fn non_residual_toggle_changes_init_behavior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = FlowRefinerParams::new(2, false, &mut rng);
        let flows: Vec<FlowField> = (0..2).map(|i| smooth_flow(16, 16, 30 + i)).collect();
        let refined = refine_flows(&flows, &params).unwrap();
        // zero-init head without residual: output is the zero flow
        assert!(refined.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_reach_every_refiner_parameter() {
        let mut params = FlowRefinerParams::init(2, 6);
        params.store.perturb(&mut ChaCha8Rng::seed_from_u64(11), 0.05);
        let flows: Vec<FlowField> = (0..2).map(|i| smooth_flow(32, 32, 40 + i)).collect();
        let reference = {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            crate::imaging::Frame::from_fn(32, 32, 1, |_, _, _| rng.random_range(0.0..1.0))
                .unwrap()
        };
        let gt = {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            crate::imaging::Frame::from_fn(32, 32, 1, |_, _, _| rng.random_range(0.0..1.0))
                .unwrap()
        };
        let mut t = Tape::<f32>::new();
        let lp = params.store.load(&mut t);
        let ids: Vec<NodeId> = flows
            .iter()
            .map(|f| t.leaf3(f.data().mapv(|v| v as f32)))
            .collect();
        let refined = params.forward(&mut t, &lp, &ids);
        let r = t.leaf3(to_f32(reference.data()));
        let g = t.leaf3(to_f32(gt.data()));
        let loss = losses::loss_flow_refined_node(&mut t, r, refined, g, 2);
        t.backward(loss);
        for (i, id) in lp.all().iter().enumerate() {
            let grad = t.grad(*id).expect("missing grad");
            assert!(grad.iter().all(|v| v.is_finite()), "param {i} not finite");
            assert!(grad.iter().any(|&v| v != 0.0), "param {i} grad zero");
        }
    }
}
