//! Training objective: Charbonnier reconstruction loss plus per-step and
//! refined warping losses, combined under configurable weights.
//!
//! All three losses are per-sample sums over spatial locations and channels
//! (batch averaging happens in the training loop). The warping losses can
//! exclude a border margin where border-clamp warping is uninformative;
//! the default margin is 4 pixels, configurable per call.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Scalar, Tape};
use crate::error::{Error, Result};
use crate::imaging::{FlowField, Frame, CHARBONNIER_EPS};

/// Boundary margin (pixels) excluded from the warping losses by default.
pub const DEFAULT_BOUNDARY_MARGIN: usize = 4;

/// Combination weights for the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_sr: f64,
    pub lambda_flow_steps: f64,
    pub lambda_flow_refined: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sr: 1.0,
            lambda_flow_steps: 0.1,
            lambda_flow_refined: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_sr", self.lambda_sr),
            ("lambda_flow_steps", self.lambda_flow_steps),
            ("lambda_flow_refined", self.lambda_flow_refined),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Values of the three loss components for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub sr: f64,
    pub flow_steps: f64,
    pub flow_refined: f64,
}

// ---------------------------------------------------------------------------
// Tape-level builders (single source of truth for the loss math).
// ---------------------------------------------------------------------------

/// Charbonnier reconstruction loss: sum of rho(pred - gt) over all elements.
pub(crate) fn loss_sr_node<T: Scalar>(t: &mut Tape<T>, pred: NodeId, gt: NodeId) -> NodeId {
    let d = t.sub(pred, gt);
    t.charb_sum(d, T::from_f64(CHARBONNIER_EPS).unwrap())
}

/// Per-step warping loss: 0.5 * sum_i ||warp(ref, f_i) - gt_i||^2 over the
/// spatial interior (margin-pixel border excluded) and channels.
pub(crate) fn loss_flow_steps_node<T: Scalar>(
    t: &mut Tape<T>,
    ref_id: NodeId,
    flows: &[NodeId],
    gts: &[NodeId],
    margin: usize,
) -> NodeId {
    let half = T::from_f64(0.5).unwrap();
    let mut terms = Vec::with_capacity(flows.len());
    for (f, g) in flows.iter().zip(gts.iter()) {
        let w = t.warp(ref_id, *f);
        let d = t.sub(w, *g);
        let s = t.sq_sum_margin(d, margin);
        terms.push((s, half));
    }
    t.weighted_sum(&terms)
}

/// Refined-flow warping loss: ||warp(ref, refined) - gt_last||^2 over the
/// interior, without the 1/2 factor.
pub(crate) fn loss_flow_refined_node<T: Scalar>(
    t: &mut Tape<T>,
    ref_id: NodeId,
    refined: NodeId,
    gt_last: NodeId,
    margin: usize,
) -> NodeId {
    let w = t.warp(ref_id, refined);
    let d = t.sub(w, gt_last);
    t.sq_sum_margin(d, margin)
}

// ---------------------------------------------------------------------------
// Frame-level API (single sample, f64).
// ---------------------------------------------------------------------------

fn check_same_shape(a: &Frame, b: &Frame, what: &str) -> Result<()> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    Ok(())
}

fn check_margin(h: usize, w: usize, margin: usize) -> Result<()> {
    if h <= 2 * margin || w <= 2 * margin {
        return Err(Error::InvalidArgument(format!(
            "margin {margin} leaves no interior in a {h}x{w} frame"
        )));
    }
    Ok(())
}

/// Charbonnier reconstruction loss between a prediction and ground truth.
pub fn loss_sr(pred: &Frame, gt: &Frame) -> Result<f64> {
    check_same_shape(pred, gt, "loss_sr")?;
    let mut t = Tape::<f64>::new();
    let p = t.leaf3(pred.data().clone());
    let g = t.leaf3(gt.data().clone());
    let l = loss_sr_node(&mut t, p, g);
    Ok(t.scalar_value(l))
}

/// Per-step warping loss with the default boundary margin.
pub fn loss_flow_steps(ref_hr: &Frame, flows: &[FlowField], gt_hr_seq: &[Frame]) -> Result<f64> {
    loss_flow_steps_masked(ref_hr, flows, gt_hr_seq, DEFAULT_BOUNDARY_MARGIN)
}

/// Per-step warping loss; `margin = 0` disables boundary masking.
pub fn loss_flow_steps_masked(
    ref_hr: &Frame,
    flows: &[FlowField],
    gt_hr_seq: &[Frame],
    margin: usize,
) -> Result<f64> {
    if flows.is_empty() || flows.len() != gt_hr_seq.len() {
        return Err(Error::InvalidArgument(format!(
            "need equal non-zero counts, got {} flows and {} GT frames",
            flows.len(),
            gt_hr_seq.len()
        )));
    }
    let (h, w, _) = ref_hr.data().dim();
    check_margin(h, w, margin)?;
    for (i, (f, g)) in flows.iter().zip(gt_hr_seq.iter()).enumerate() {
        if f.height() != h || f.width() != w {
            return Err(Error::DimensionMismatch(format!(
                "flow {i} is {}x{}, reference is {h}x{w}",
                f.height(),
                f.width()
            )));
        }
        check_same_shape(ref_hr, g, "loss_flow_steps GT")?;
    }
    let mut t = Tape::<f64>::new();
    let r = t.leaf3(ref_hr.data().clone());
    let fids: Vec<NodeId> = flows.iter().map(|f| t.leaf3(f.data().clone())).collect();
    let gids: Vec<NodeId> = gt_hr_seq
        .iter()
        .map(|g| t.leaf3(g.data().clone()))
        .collect();
    let l = loss_flow_steps_node(&mut t, r, &fids, &gids, margin);
    Ok(t.scalar_value(l))
}

/// Refined-flow warping loss with the default boundary margin.
pub fn loss_flow_refined(ref_hr: &Frame, refined: &FlowField, gt_hr_last: &Frame) -> Result<f64> {
    loss_flow_refined_masked(ref_hr, refined, gt_hr_last, DEFAULT_BOUNDARY_MARGIN)
}

/// Refined-flow warping loss; `margin = 0` disables boundary masking.
pub fn loss_flow_refined_masked(
    ref_hr: &Frame,
    refined: &FlowField,
    gt_hr_last: &Frame,
    margin: usize,
) -> Result<f64> {
    check_same_shape(ref_hr, gt_hr_last, "loss_flow_refined")?;
    let (h, w, _) = ref_hr.data().dim();
    check_margin(h, w, margin)?;
    if refined.height() != h || refined.width() != w {
        return Err(Error::DimensionMismatch(format!(
            "refined flow is {}x{}, reference is {h}x{w}",
            refined.height(),
            refined.width()
        )));
    }
    let mut t = Tape::<f64>::new();
    let r = t.leaf3(ref_hr.data().clone());
    let f = t.leaf3(refined.data().clone());
    let g = t.leaf3(gt_hr_last.data().clone());
    let l = loss_flow_refined_node(&mut t, r, f, g, margin);
    Ok(t.scalar_value(l))
}

/// Weighted combination of the three components.
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    for (name, v) in [
        ("sr", components.sr),
        ("flow_steps", components.flow_steps),
        ("flow_refined", components.flow_refined),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss component {name} is {v}")));
        }
    }
    Ok(weights.lambda_sr * components.sr
        + weights.lambda_flow_steps * components.flow_steps
        + weights.lambda_flow_refined * components.flow_refined)
}
