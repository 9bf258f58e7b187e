//! Resolution-aware image and flow primitives: frames, dense flow fields,
//! Keys bicubic resampling, differentiable backward warping, flow
//! composition, the Charbonnier penalty, and PNG / FLO1 serialization.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array3, ArrayView3, Dimension};

use crate::error::{Error, Result};
use crate::kernels;

/// Charbonnier epsilon: rho(x) = sqrt(x^2 + CHARBONNIER_EPS^2).
pub const CHARBONNIER_EPS: f64 = 1e-3;

/// An `(H, W, C)` image tensor with intensities in `[0, 1]`, `C` in {1, 3}.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    data: Array3<f64>,
}

impl Frame {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h < 1 || w < 1 {
            return Err(Error::InvalidArgument(format!(
                "frame dims must be >= 1, got {h}x{w}"
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::InvalidArgument(format!(
                "frame channels must be 1 or 3, got {c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "frame contains non-finite values".into(),
            ));
        }
        Ok(Frame { data })
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        Frame::new(Array3::from_shape_fn((h, w, c), |(y, x, ch)| f(y, x, ch)))
    }

    pub fn constant(h: usize, w: usize, c: usize, value: f64) -> Result<Self> {
        Frame::new(Array3::from_elem((h, w, c), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y, x, c)]
    }

    /// Backward-warp this frame by `flow` (bilinear, border clamp).
    pub fn warp_by(&self, flow: &FlowField) -> Result<Frame> {
        let warped = backward_warp(self.view(), flow)?;
        Ok(Frame { data: warped })
    }
}

/// An `(H, W, 2)` per-pixel displacement field in pixel units. Entry
/// `(y, x)` holds `(dx, dy)`; a warp samples the source at
/// `(x + dx, y + dy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    data: Array3<f64>,
}

impl FlowField {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h < 1 || w < 1 {
            return Err(Error::InvalidArgument(format!(
                "flow dims must be >= 1, got {h}x{w}"
            )));
        }
        if c != 2 {
            return Err(Error::InvalidArgument(format!(
                "flow must have 2 channels, got {c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "flow contains non-finite values".into(),
            ));
        }
        Ok(FlowField { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            data: Array3::zeros((h, w, 2)),
        }
    }

    pub fn constant(h: usize, w: usize, dx: f64, dy: f64) -> Result<Self> {
        FlowField::new(Array3::from_shape_fn((h, w, 2), |(_, _, c)| {
            if c == 0 {
                dx
            } else {
                dy
            }
        }))
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Result<Self> {
        FlowField::new(Array3::from_shape_fn((h, w, 2), |(y, x, c)| {
            let (dx, dy) = f(y, x);
            if c == 0 {
                dx
            } else {
                dy
            }
        }))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn dx(&self, y: usize, x: usize) -> f64 {
        self.data[(y, x, 0)]
    }

    pub fn dy(&self, y: usize, x: usize) -> f64 {
        self.data[(y, x, 1)]
    }
}

/// Keys cubic kernel, a = -0.5.
fn keys(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Per-output-index tap table for one axis: (first source index, weights).
/// Weights are normalized to sum 1; source indices are clamped at the border.
fn bicubic_taps(in_len: usize, out_len: usize, factor: f64) -> Vec<(isize, Vec<f64>)> {
    let filter_scale = factor.min(1.0);
    let support = 2.0 / filter_scale;
    let mut taps = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let center = (o as f64 + 0.5) / factor - 0.5;
        let lo = (center - support).ceil() as isize;
        let hi = (center + support).floor() as isize;
        let mut ws = Vec::with_capacity((hi - lo + 1) as usize);
        let mut sum = 0.0;
        for i in lo..=hi {
            let w = keys((center - i as f64) * filter_scale);
            sum += w;
            ws.push(w);
        }
        debug_assert!(sum > 0.0, "empty bicubic support at {o} (in={in_len})");
        for w in ws.iter_mut() {
            *w /= sum;
        }
        taps.push((lo, ws));
    }
    taps
}

/// Resample one axis (0 = rows, 1 = cols) of an `(H, W, C)` tensor.
fn resample_axis(x: &Array3<f64>, axis: usize, out_len: usize, factor: f64) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let in_len = if axis == 0 { h } else { w };
    let taps = bicubic_taps(in_len, out_len, factor);
    let out_dim = if axis == 0 {
        (out_len, w, c)
    } else {
        (h, out_len, c)
    };
    let mut out = Array3::<f64>::zeros(out_dim);
    for (o, (lo, ws)) in taps.iter().enumerate() {
        for (j, wgt) in ws.iter().enumerate() {
            let i = (lo + j as isize).clamp(0, in_len as isize - 1) as usize;
            if axis == 0 {
                let src = x.index_axis(ndarray::Axis(0), i);
                let mut dst = out.index_axis_mut(ndarray::Axis(0), o);
                dst.scaled_add(*wgt, &src);
            } else {
                let src = x.index_axis(ndarray::Axis(1), i);
                let mut dst = out.index_axis_mut(ndarray::Axis(1), o);
                dst.scaled_add(*wgt, &src);
            }
        }
    }
    out
}

/// Bicubic resampling (Keys a = -0.5). Downsampling widens the kernel by
/// `1/factor` (anti-aliased). Output dims are `round(dim * factor)`; output
/// values are clamped to `[0, 1]`. `factor == 1` returns the input unchanged.
pub fn bicubic_resample(frame: &Frame, factor: f64) -> Result<Frame> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "resample factor must be positive, got {factor}"
        )));
    }
    if factor == 1.0 {
        return Ok(frame.clone());
    }
    let (h, w, _) = frame.data.dim();
    let oh = (h as f64 * factor).round() as usize;
    let ow = (w as f64 * factor).round() as usize;
    if oh < 1 || ow < 1 {
        return Err(Error::InvalidArgument(format!(
            "resampled dims {oh}x{ow} < 1 (input {h}x{w}, factor {factor})"
        )));
    }
    let tmp = resample_axis(&frame.data, 1, ow, factor);
    let mut out = resample_axis(&tmp, 0, oh, factor);
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(Frame { data: out })
}

/// Backward warping of an image or feature map (any channel count).
/// Output spatial dims follow the flow; sampling is bilinear with
/// border-clamped coordinates.
pub fn backward_warp(source: ArrayView3<'_, f64>, flow: &FlowField) -> Result<Array3<f64>> {
    if source.dim().0 < 1 || source.dim().1 < 1 {
        return Err(Error::InvalidArgument("empty warp source".into()));
    }
    let src = source.as_standard_layout();
    Ok(kernels::warp_fwd(&src.view(), &flow.view()))
}

/// Compose two flows: `composed(p) = f_far(p) + f_near(p + f_far(p))`,
/// i.e. first follow `f_far`, then `f_near` sampled at the displaced
/// location (bilinear, border clamp).
pub fn compose_flows(f_near: &FlowField, f_far: &FlowField) -> Result<FlowField> {
    if f_near.data.dim() != f_far.data.dim() {
        return Err(Error::DimensionMismatch(format!(
            "compose_flows: {:?} vs {:?}",
            f_near.data.dim(),
            f_far.data.dim()
        )));
    }
    let moved = kernels::warp_fwd(&f_near.view(), &f_far.view());
    FlowField::new(moved + &f_far.data)
}

/// Elementwise Charbonnier penalty rho(x) = sqrt(x^2 + 0.001^2).
pub fn charbonnier<D: Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(charbonnier_scalar)
}

pub fn charbonnier_scalar(x: f64) -> f64 {
    (x * x + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt()
}

/// Bilinear 4x upscaling of a flow estimated on an LR grid: coordinates map
/// through the pixel-center convention and displacement magnitudes scale by 4.
pub fn upsample_flow_4x(flow: &FlowField) -> FlowField {
    let (h, w, _) = flow.data.dim();
    let (oh, ow) = (h * 4, w * 4);
    let data = Array3::from_shape_fn((oh, ow, 2), |(y, x, c)| {
        let sx = ((x as f64 + 0.5) / 4.0 - 0.5).clamp(0.0, w as f64 - 1.0);
        let sy = ((y as f64 + 0.5) / 4.0 - 0.5).clamp(0.0, h as f64 - 1.0);
        let x0 = sx.floor() as usize;
        let y0 = sy.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = sx - x0 as f64;
        let fy = sy - y0 as f64;
        let v = (1.0 - fx) * (1.0 - fy) * flow.data[(y0, x0, c)]
            + fx * (1.0 - fy) * flow.data[(y0, x1, c)]
            + (1.0 - fx) * fy * flow.data[(y1, x0, c)]
            + fx * fy * flow.data[(y1, x1, c)];
        4.0 * v
    });
    FlowField { data }
}

/// Reflect-101 padding of a frame (pipeline-level sizing helper).
/// Reflect-101 needs pad <= dim - 1 on each side.
pub fn reflect_pad_frame(frame: &Frame, pad: [usize; 4]) -> Result<Frame> {
    let (h, w, _) = frame.data.dim();
    if pad[0] >= h || pad[1] >= h || pad[2] >= w || pad[3] >= w {
        return Err(Error::InvalidArgument(format!(
            "reflect pad {pad:?} too large for {h}x{w} frame"
        )));
    }
    Ok(Frame {
        data: kernels::reflect_pad_fwd(&frame.view(), pad),
    })
}

// ---------------------------------------------------------------------------
// PNG serialization: 8-bit, [0,1] <-> [0,255] linear, round half up.
// ---------------------------------------------------------------------------

pub fn save_png(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w, c) = frame.data.dim();
    let mut bytes = Vec::with_capacity(h * w * c);
    for v in frame.data.iter() {
        bytes.push((v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8);
    }
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => unreachable!("frame invariant"),
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        w as u32,
        h as u32,
        color,
        image::ImageFormat::Png,
    )?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Frame> {
    let img = image::ImageReader::open(path)?.decode()?;
    let frame = match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Frame::from_fn(h as usize, w as usize, 1, |y, x, _| {
                g.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
            })?
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Frame::from_fn(h as usize, w as usize, 3, |y, x, c| {
                rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
            })?
        }
    };
    Ok(frame)
}

// ---------------------------------------------------------------------------
// FLO1 flow files: magic "FLO1", u16 H, u16 W (little endian), then
// row-major (dx, dy) pairs as little-endian f32.
// ---------------------------------------------------------------------------

const FLO1_MAGIC: &[u8; 4] = b"FLO1";

pub fn save_flo1(flow: &FlowField, path: &Path) -> Result<()> {
    let (h, w, _) = flow.data.dim();
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "flow {h}x{w} exceeds FLO1 u16 dims"
        )));
    }
    let mut buf = Vec::with_capacity(8 + h * w * 8);
    buf.extend_from_slice(FLO1_MAGIC);
    buf.extend_from_slice(&(h as u16).to_le_bytes());
    buf.extend_from_slice(&(w as u16).to_le_bytes());
    for v in flow.data.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_flo1(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path)?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 || &bytes[0..4] != FLO1_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let h = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let w = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if h == 0 || w == 0 {
        return Err(corrupt("zero dims"));
    }
    if bytes.len() != 8 + h * w * 8 {
        return Err(corrupt("truncated body"));
    }
    let mut data = Array3::<f64>::zeros((h, w, 2));
    {
        let ds = data.as_slice_mut().unwrap();
        for (i, chunk) in bytes[8..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(corrupt("non-finite flow value"));
            }
            ds[i] = v as f64;
        }
    }
    FlowField::new(data)
}
