//! Clip ingestion and the synthetic clip generator.
//!
//! Disk layout: `root/<clip_id>/frame_00.png .. frame_0n.png`, frame_00
//! being the reference. Either frame_00 is at 4x the resolution of the rest
//! (pre-downsampled clips), or all frames share HR dims and the LR inputs
//! are derived by bicubic 1/4 downsampling. Optional analytic flows live
//! next to the frames as `flow_01.flo1 .. flow_0n.flo1` (reference -> frame
//! i on the HR grid).
//!
//! Synthetic clips render a band-limited random texture (a random Fourier
//! series, evaluable at any real coordinate) under cumulative translation or
//! affine motion, so ground-truth flows are exact.

use std::f64::consts::PI;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{bicubic_resample, load_flo1, load_png, FlowField, Frame};

/// A 2-D affine position map q = M p + t (pixel coordinates, origin at the
/// image center handled by the caller).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl AffineMap {
    pub fn identity() -> Self {
        AffineMap {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.t[0],
            self.m[1][0] * x + self.m[1][1] * y + self.t[1],
        )
    }

    /// self o other: apply `other` first.
    pub fn compose(&self, other: &AffineMap) -> AffineMap {
        let m = [
            [
                self.m[0][0] * other.m[0][0] + self.m[0][1] * other.m[1][0],
                self.m[0][0] * other.m[0][1] + self.m[0][1] * other.m[1][1],
            ],
            [
                self.m[1][0] * other.m[0][0] + self.m[1][1] * other.m[1][0],
                self.m[1][0] * other.m[0][1] + self.m[1][1] * other.m[1][1],
            ],
        ];
        let t = [
            self.m[0][0] * other.t[0] + self.m[0][1] * other.t[1] + self.t[0],
            self.m[1][0] * other.t[0] + self.m[1][1] * other.t[1] + self.t[1],
        ];
        AffineMap { m, t }
    }

    pub fn inverse(&self) -> AffineMap {
        let det = self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0];
        let inv = [
            [self.m[1][1] / det, -self.m[0][1] / det],
            [-self.m[1][0] / det, self.m[0][0] / det],
        ];
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        AffineMap { m: inv, t }
    }
}

/// Analytic motion of a synthetic clip: cumulative maps A_i taking frame-i
/// pixel coordinates to reference coordinates (A_0 = identity, i = 0 is the
/// reference itself).
#[derive(Debug, Clone, PartialEq)]
pub enum MotionModel {
    Translation { cumulative: Vec<(f64, f64)> },
    Affine { cumulative: Vec<AffineMap> },
}

impl MotionModel {
    pub fn n(&self) -> usize {
        match self {
            MotionModel::Translation { cumulative } => cumulative.len(),
            MotionModel::Affine { cumulative } => cumulative.len(),
        }
    }

    fn cumulative_map(&self, i: usize) -> AffineMap {
        if i == 0 {
            return AffineMap::identity();
        }
        match self {
            MotionModel::Translation { cumulative } => {
                let (dx, dy) = cumulative[i - 1];
                AffineMap {
                    m: [[1.0, 0.0], [0.0, 1.0]],
                    t: [dx, dy],
                }
            }
            MotionModel::Affine { cumulative } => cumulative[i - 1],
        }
    }

    /// Exact flow on frame `to`'s grid sampling from frame `from`
    /// (0 = reference): d(p) = A_from^{-1}(A_to(p)) - p.
    pub fn pair_flow(&self, from: usize, to: usize, h: usize, w: usize) -> FlowField {
        let a_to = self.cumulative_map(to);
        let a_from_inv = self.cumulative_map(from).inverse();
        let map = a_from_inv.compose(&a_to);
        FlowField::from_fn(h, w, |y, x| {
            let (qx, qy) = map.apply(x as f64, y as f64);
            (qx - x as f64, qy - y as f64)
        })
        .expect("analytic flow is finite")
    }
}

/// One training/evaluation sample: an HR reference, n LR frames, and
/// (when available) HR ground truth, analytic flows and the motion model.
#[derive(Debug, Clone)]
pub struct ClipSample {
    pub id: String,
    pub reference_hr: Frame,
    pub lr_frames: Vec<Frame>,
    pub gt_hr_frames: Option<Vec<Frame>>,
    pub gt_flows: Option<Vec<FlowField>>,
    pub motion: Option<MotionModel>,
}

impl ClipSample {
    pub fn n(&self) -> usize {
        self.lr_frames.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Translation,
    Affine,
}

/// How per-step displacement magnitudes are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMagnitude {
    /// Uniform in [max_step_px / 2, max_step_px].
    Uniform,
    /// Exactly max_step_px (random direction).
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClipConfig {
    pub hr_height: usize,
    pub hr_width: usize,
    pub n: usize,
    pub motion: MotionKind,
    pub max_step_px: f64,
    pub step_magnitude: StepMagnitude,
    pub texture_seed: u64,
    pub noise_sigma: f64,
    pub channels: usize,
}

impl Default for SynthClipConfig {
    fn default() -> Self {
        SynthClipConfig {
            hr_height: 128,
            hr_width: 128,
            n: 4,
            motion: MotionKind::Translation,
            max_step_px: 0.75,
            step_magnitude: StepMagnitude::Uniform,
            texture_seed: 0,
            noise_sigma: 0.0,
            channels: 3,
        }
    }
}

/// Band-limited random texture: a sum of sinusoids with wavelengths in
/// [8, 48] px (below quarter-Nyquist), exactly evaluable at any coordinate.
struct Texture {
    // (freq_x, freq_y, phase, amplitude) with |freq| = 2*pi/wavelength
    waves: Vec<(f64, f64, f64, f64)>,
    channel_phase: Vec<f64>,
}

const TEXTURE_WAVES: usize = 24;
const TEXTURE_CONTRAST: f64 = 0.42;

impl Texture {
    fn sample(rng: &mut ChaCha8Rng, channels: usize) -> Texture {
        let mut waves = Vec::with_capacity(TEXTURE_WAVES);
        let mut raw: Vec<f64> = Vec::with_capacity(TEXTURE_WAVES);
        for _ in 0..TEXTURE_WAVES {
            let lambda = 8.0 * (48.0f64 / 8.0).powf(rng.random_range(0.0..1.0));
            let theta = rng.random_range(0.0..2.0 * PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let k = 2.0 * PI / lambda;
            waves.push((k * theta.cos(), k * theta.sin(), phase, 0.0));
            // flat amplitude across wavelengths: the short-wave third of the
            // band is what 4x downsampling destroys and SR must recover
            raw.push(1.0);
        }
        let total: f64 = raw.iter().sum();
        for (w, r) in waves.iter_mut().zip(raw.iter()) {
            w.3 = TEXTURE_CONTRAST * r / total;
        }
        let channel_phase = (0..channels).map(|_| rng.random_range(0.0..1.5)).collect();
        Texture {
            waves,
            channel_phase,
        }
    }

    fn value(&self, x: f64, y: f64, c: usize) -> f64 {
        let mut v = 0.5;
        for (fx, fy, p, a) in &self.waves {
            v += a * (fx * x + fy * y + p + self.channel_phase[c]).sin();
        }
        v
    }
}

/// Split an HR clip into a training sample: frame 0 stays as the HR
/// reference, the rest become LR inputs via bicubic 1/scale downsampling,
/// with the originals kept as ground truth.
pub fn make_training_sample(hr_clip: &[Frame], scale: usize) -> Result<ClipSample> {
    if hr_clip.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 frames, got {}",
            hr_clip.len()
        )));
    }
    let (h, w, c) = hr_clip[0].data().dim();
    for (i, f) in hr_clip.iter().enumerate() {
        if f.data().dim() != (h, w, c) {
            return Err(Error::DimensionMismatch(format!(
                "frame {i} is {:?}, expected {:?}",
                f.data().dim(),
                (h, w, c)
            )));
        }
    }
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::InvalidArgument(format!(
            "dims {h}x{w} not divisible by scale {scale}"
        )));
    }
    let factor = 1.0 / scale as f64;
    let lr_frames = hr_clip[1..]
        .iter()
        .map(|f| bicubic_resample(f, factor))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClipSample {
        id: "sample".into(),
        reference_hr: hr_clip[0].clone(),
        lr_frames,
        gt_hr_frames: Some(hr_clip[1..].to_vec()),
        gt_flows: None,
        motion: None,
    })
}

/// Generate one synthetic clip with exact analytic ground-truth flows.
/// Fully deterministic given the texture seed.
pub fn generate_synth_clip(cfg: &SynthClipConfig) -> Result<ClipSample> {
    if cfg.n < 1 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    if cfg.channels != 1 && cfg.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "channels must be 1 or 3, got {}",
            cfg.channels
        )));
    }
    let (h, w) = (cfg.hr_height, cfg.hr_width);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "HR dims {h}x{w} must be divisible by 4"
        )));
    }
    if !(cfg.max_step_px.is_finite() && cfg.max_step_px >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "max_step_px {}",
            cfg.max_step_px
        )));
    }
    let margin = (h.min(w) as f64) / 4.0;
    if cfg.max_step_px * cfg.n as f64 > margin {
        return Err(Error::InvalidArgument(format!(
            "cumulative displacement {} exceeds the {margin:.1} px margin",
            cfg.max_step_px * cfg.n as f64
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.texture_seed);
    let texture = Texture::sample(&mut rng, cfg.channels);

    let motion = match cfg.motion {
        MotionKind::Translation => {
            let mut cumulative = Vec::with_capacity(cfg.n);
            let (mut cx, mut cy) = (0.0, 0.0);
            for _ in 0..cfg.n {
                let mag = match cfg.step_magnitude {
                    StepMagnitude::Uniform => rng.random_range(0.5..=1.0) * cfg.max_step_px,
                    StepMagnitude::Fixed => cfg.max_step_px,
                };
                let theta = rng.random_range(0.0..2.0 * PI);
                cx += mag * theta.cos();
                cy += mag * theta.sin();
                cumulative.push((cx, cy));
            }
            MotionModel::Translation { cumulative }
        }
        MotionKind::Affine => {
            let ctr_x = (w as f64 - 1.0) / 2.0;
            let ctr_y = (h as f64 - 1.0) / 2.0;
            let r_max = (ctr_x * ctr_x + ctr_y * ctr_y).sqrt();
            let mut cumulative: Vec<AffineMap> = Vec::with_capacity(cfg.n);
            let mut current = AffineMap::identity();
            for _ in 0..cfg.n {
                // budget: half the step for translation, half for rotation+scale
                let alpha = rng.random_range(-0.25..0.25) * cfg.max_step_px / r_max;
                let s = 1.0 + rng.random_range(-0.25..0.25) * cfg.max_step_px / r_max;
                let mag = match cfg.step_magnitude {
                    StepMagnitude::Uniform => rng.random_range(0.25..=0.5) * cfg.max_step_px,
                    StepMagnitude::Fixed => 0.5 * cfg.max_step_px,
                };
                let theta = rng.random_range(0.0..2.0 * PI);
                let (ca, sa) = (alpha.cos() * s, alpha.sin() * s);
                // step map about the image center
                let m = [[ca, -sa], [sa, ca]];
                let t = [
                    mag * theta.cos() + ctr_x - (m[0][0] * ctr_x + m[0][1] * ctr_y),
                    mag * theta.sin() + ctr_y - (m[1][0] * ctr_x + m[1][1] * ctr_y),
                ];
                let step = AffineMap { m, t };
                current = current.compose(&step);
                cumulative.push(current);
            }
            MotionModel::Affine { cumulative }
        }
    };

    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).map_err(|e| {
            Error::InvalidArgument(format!("noise sigma {}: {e}", cfg.noise_sigma))
        })?)
    } else {
        None
    };
    let mut render = |map: AffineMap, rng: &mut ChaCha8Rng| -> Frame {
        Frame::from_fn(h, w, cfg.channels, |y, x, c| {
            let (qx, qy) = map.apply(x as f64, y as f64);
            let mut v = texture.value(qx, qy, c);
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            v.clamp(0.0, 1.0)
        })
        .expect("rendered frame is finite")
    };

    let reference = render(AffineMap::identity(), &mut rng);
    let mut hr_clip = vec![reference];
    for i in 1..=cfg.n {
        hr_clip.push(render(motion.cumulative_map(i), &mut rng));
    }
    let gt_flows: Vec<FlowField> = (1..=cfg.n).map(|i| motion.pair_flow(0, i, h, w)).collect();

    let mut sample = make_training_sample(&hr_clip, 4)?;
    sample.id = format!("synth_{:08}", cfg.texture_seed);
    sample.gt_flows = Some(gt_flows);
    sample.motion = Some(motion);
    Ok(sample)
}

/// Load every clip under `root` in lexicographic order. Malformed clips are
/// skipped with a logged warning; a missing root is an error.
pub fn load_clip_dataset(root: &Path) -> Result<Vec<ClipSample>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {root:?} is not a directory")));
    }
    let mut clip_dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    clip_dirs.sort();
    let mut clips = Vec::new();
    for dir in clip_dirs {
        match load_one_clip(&dir) {
            Ok(clip) => clips.push(clip),
            Err(e) => log::warn!("skipping clip {dir:?}: {e}"),
        }
    }
    Ok(clips)
}

fn load_one_clip(dir: &Path) -> Result<ClipSample> {
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".into());
    let mut frame_paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("frame_") && n.ends_with(".png"))
                .unwrap_or(false)
        })
        .collect();
    frame_paths.sort();
    if frame_paths.len() < 2 {
        return Err(Error::Data(format!(
            "clip has {} frames, need at least 2",
            frame_paths.len()
        )));
    }
    let frames: Vec<Frame> = frame_paths
        .iter()
        .map(|p| load_png(p))
        .collect::<Result<_>>()?;
    let n = frames.len() - 1;

    let (h0, w0) = (frames[0].height(), frames[0].width());
    let (h1, w1) = (frames[1].height(), frames[1].width());
    for (i, f) in frames.iter().enumerate().skip(1) {
        if f.height() != h1 || f.width() != w1 {
            return Err(Error::Data(format!(
                "frame {i} is {}x{}, expected {h1}x{w1}",
                f.height(),
                f.width()
            )));
        }
    }

    let mut sample = if h0 == 4 * h1 && w0 == 4 * w1 {
        // pre-downsampled layout: LR inputs as stored, no ground truth
        ClipSample {
            id: id.clone(),
            reference_hr: frames[0].clone(),
            lr_frames: frames[1..].to_vec(),
            gt_hr_frames: None,
            gt_flows: None,
            motion: None,
        }
    } else if (h0, w0) == (h1, w1) {
        let mut s = make_training_sample(&frames, 4)?;
        s.id = id.clone();
        s
    } else {
        return Err(Error::Data(format!(
            "reference {h0}x{w0} is neither 4x nor equal to frame size {h1}x{w1}"
        )));
    };

    // optional analytic flows
    let flow_paths: Vec<_> = (1..=n)
        .map(|i| dir.join(format!("flow_{i:02}.flo1")))
        .collect();
    if flow_paths.iter().all(|p| p.is_file()) {
        let flows: Result<Vec<FlowField>> = flow_paths.iter().map(|p| load_flo1(p)).collect();
        match flows {
            Ok(flows) => {
                let (rh, rw) = (sample.reference_hr.height(), sample.reference_hr.width());
                if flows.iter().all(|f| f.height() == rh && f.width() == rw) {
                    sample.gt_flows = Some(flows);
                } else {
                    log::warn!("clip {id}: flow dims do not match the HR grid, ignoring flows");
                }
            }
            Err(e) => log::warn!("clip {id}: unreadable flows ({e}), ignoring"),
        }
    } else if flow_paths.iter().any(|p| p.is_file()) {
        log::warn!("clip {id}: incomplete flow set, ignoring flows");
    }
    Ok(sample)
}
