//! Dense flow fields, Middlebury `.flo` IO, resampling and warping.
//!
//! Convention used throughout the crate: a flow field lives on the *target*
//! grid and stores, for each target pixel `p`, the displacement to the
//! corresponding *source* position, so the source is sampled at `p + flow(p)`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{sample_bilinear, Image};

pub const FLO_MAGIC: f32 = 202021.25;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            u: vec![u; n],
            v: vec![v; n],
            valid: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn mean_magnitude(&self) -> f32 {
        let (mut acc, mut n) = (0.0f64, 0usize);
        for i in 0..self.len() {
            if self.valid[i] {
                acc += (self.u[i] as f64).hypot(self.v[i] as f64);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            (acc / n as f64) as f32
        }
    }

    pub fn scaled(&self, sx: f32, sy: f32) -> FlowField {
        FlowField {
            u: self.u.iter().map(|u| u * sx).collect(),
            v: self.v.iter().map(|v| v * sy).collect(),
            ..self.clone()
        }
    }

    pub fn check_same_shape(&self, other: &FlowField) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Dimension(format!(
                "flow {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn write_flo(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + self.len() * 8);
        buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        buf.extend_from_slice(&(self.width as i32).to_le_bytes());
        buf.extend_from_slice(&(self.height as i32).to_le_bytes());
        for i in 0..self.len() {
            buf.extend_from_slice(&self.u[i].to_le_bytes());
            buf.extend_from_slice(&self.v[i].to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    /// Reads a `.flo` file. The format carries no mask; every pixel with
    /// finite components below 1e9 in magnitude is marked valid.
    pub fn read_flo(path: &Path) -> Result<FlowField> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode_flo(&bytes)
    }

    pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
        if bytes.len() < 12 {
            return Err(Error::FlowFile("header truncated".into()));
        }
        let word = |i: usize| <[u8; 4]>::try_from(&bytes[i..i + 4]).unwrap();
        let magic = f32::from_le_bytes(word(0));
        if magic != FLO_MAGIC {
            return Err(Error::FlowFile(format!("bad magic {magic}")));
        }
        let width = i32::from_le_bytes(word(4));
        let height = i32::from_le_bytes(word(8));
        if width <= 0 || height <= 0 {
            return Err(Error::FlowFile(format!("bad dimensions {width}x{height}")));
        }
        let (width, height) = (width as usize, height as usize);
        let n = width * height;
        if bytes.len() != 12 + n * 8 {
            return Err(Error::FlowFile(format!(
                "payload has {} bytes, expected {}",
                bytes.len() - 12,
                n * 8
            )));
        }
        let mut flow = FlowField::zeros(width, height);
        for i in 0..n {
            let u = f32::from_le_bytes(word(12 + 8 * i));
            let v = f32::from_le_bytes(word(16 + 8 * i));
            flow.u[i] = u;
            flow.v[i] = v;
            flow.valid[i] = u.is_finite() && v.is_finite() && u.abs() < 1e9 && v.abs() < 1e9;
        }
        Ok(flow)
    }
}

/// Bilinear resize of a scalar field with half-pixel alignment and border clamp.
pub fn resize_field(src: &[f32], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    let sx = w as f32 / out_w as f32;
    let sy = h as f32 / out_h as f32;
    let mut out = Vec::with_capacity(out_w * out_h);
    let mut v = [0.0f32];
    for y in 0..out_h {
        let fy = (y as f32 + 0.5) * sy - 0.5;
        for x in 0..out_w {
            let fx = (x as f32 + 0.5) * sx - 0.5;
            sample_bilinear(src, w, h, 1, fx, fy, &mut v);
            out.push(v[0]);
        }
    }
    out
}

/// Resamples a flow field to a larger grid. Displacements are bilinearly
/// interpolated and rescaled by the per-axis size ratio so that they are
/// expressed in output pixels; validity is taken from the nearest input cell.
pub fn upsample_flow(flow: &FlowField, out_w: usize, out_h: usize) -> Result<FlowField> {
    if out_w < flow.width || out_h < flow.height {
        return Err(Error::Dimension(format!(
            "upsample target {out_w}x{out_h} smaller than {}x{}",
            flow.width, flow.height
        )));
    }
    if out_w == flow.width && out_h == flow.height {
        return Ok(flow.clone());
    }
    let rx = out_w as f32 / flow.width as f32;
    let ry = out_h as f32 / flow.height as f32;
    let u = resize_field(&flow.u, flow.width, flow.height, out_w, out_h);
    let v = resize_field(&flow.v, flow.width, flow.height, out_w, out_h);
    let mut valid = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let sy = ((y as f32 + 0.5) / ry) as usize;
        for x in 0..out_w {
            let sx = ((x as f32 + 0.5) / rx) as usize;
            valid.push(flow.valid[sy.min(flow.height - 1) * flow.width + sx.min(flow.width - 1)]);
        }
    }
    Ok(FlowField {
        width: out_w,
        height: out_h,
        u: u.into_iter().map(|a| a * rx).collect(),
        v: v.into_iter().map(|a| a * ry).collect(),
        valid,
    })
}

/// Warps an interleaved `channels`-wide grid: `out(p) = src(p + flow(p))`.
/// Positions outside `[0, w-1] x [0, h-1]` produce zeros and an invalid mask
/// entry, as do pixels whose flow is already invalid.
pub fn warp_channels(
    src: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    flow: &FlowField,
) -> Result<(Vec<f32>, Vec<bool>)> {
    if flow.width != width || flow.height != height {
        return Err(Error::Dimension(format!(
            "flow {}x{} does not match source {}x{}",
            flow.width, flow.height, width, height
        )));
    }
    let mut out = vec![0.0f32; width * height * channels];
    let mut valid = vec![false; width * height];
    let max_x = (width - 1) as f32;
    let max_y = (height - 1) as f32;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !flow.valid[i] {
                continue;
            }
            let sx = x as f32 + flow.u[i];
            let sy = y as f32 + flow.v[i];
            if !(0.0..=max_x).contains(&sx) || !(0.0..=max_y).contains(&sy) {
                continue;
            }
            sample_bilinear(src, width, height, channels, sx, sy, &mut out[i * channels..(i + 1) * channels]);
            valid[i] = true;
        }
    }
    Ok((out, valid))
}

/// Warps an image by a target-to-source flow; see [`warp_channels`].
pub fn warp_image(source: &Image, flow: &FlowField) -> Result<(Image, Vec<bool>)> {
    let (data, valid) = warp_channels(source.data(), source.width(), source.height(), 3, flow)?;
    Ok((Image::from_vec(source.width(), source.height(), data)?, valid))
}

/// Middlebury-style color wheel rendering; saturation grows with magnitude
/// normalized by `max_mag` (the field's own maximum when `None`).
pub fn flow_to_color(flow: &FlowField, max_mag: Option<f32>) -> Image {
    let max_mag = max_mag
        .unwrap_or_else(|| {
            (0..flow.len())
                .filter(|&i| flow.valid[i])
                .map(|i| flow.u[i].hypot(flow.v[i]))
                .fold(0.0, f32::max)
        })
        .max(1e-6);
    let mut img = Image::new(flow.width, flow.height);
    for y in 0..flow.height {
        for x in 0..flow.width {
            let i = y * flow.width + x;
            if !flow.valid[i] {
                continue;
            }
            let (u, v) = (flow.u[i], flow.v[i]);
            let mag = (u.hypot(v) / max_mag).min(1.0);
            let hue = (v.atan2(u) / std::f32::consts::PI + 1.0) * 180.0;
            img.set(x, y, hsv_to_rgb(hue, mag, 1.0));
        }
    }
    img
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}
