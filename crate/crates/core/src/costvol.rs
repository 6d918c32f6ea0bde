//! Matching costs from encoder features, decoder features and
//! cross-attention, and the zero-shot flow pipeline built on them.

use std::fmt;
use std::str::FromStr;

use candle_core::DType;

use crate::error::{Error, Result};
use crate::flow::{upsample_flow, warp_channels, FlowField};
use crate::image::{sample_bilinear, Image};
use crate::model::{capture_record, pair_forward_batch, AttentionRecord, ModelParams, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceKind {
    EncoderCorr,
    DecoderCorr,
    CrossAttention,
}

impl SourceKind {
    pub const ALL: [SourceKind; 3] = [SourceKind::EncoderCorr, SourceKind::DecoderCorr, SourceKind::CrossAttention];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pairing {
    QK,
    QQ,
    KK,
    VV,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Normalize {
    None,
    L2,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSelect {
    All,
    Layers(Vec<usize>),
}

macro_rules! str_enum {
    ($t:ty, $($v:path => $s:literal),+ $(,)?) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::Config(format!("unknown {} {s:?}", stringify!($t)))),
                }
            }
        }
    };
}

str_enum!(SourceKind, SourceKind::EncoderCorr => "encoder_corr", SourceKind::DecoderCorr => "decoder_corr", SourceKind::CrossAttention => "cross_attention");
str_enum!(Pairing, Pairing::QK => "QK", Pairing::QQ => "QQ", Pairing::KK => "KK", Pairing::VV => "VV");
str_enum!(Normalize, Normalize::None => "none", Normalize::L2 => "l2", Normalize::Softmax => "softmax");

impl fmt::Display for LayerSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelect::All => f.write_str("all"),
            LayerSelect::Layers(l) => {
                let s: Vec<String> = l.iter().map(usize::to_string).collect();
                f.write_str(&s.join(","))
            }
        }
    }
}

impl FromStr for LayerSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(LayerSelect::All);
        }
        let layers = crate::config::parse_list("layer_select", s)?;
        if layers.is_empty() {
            return Err(Error::Config("layer_select must name at least one layer".into()));
        }
        Ok(LayerSelect::Layers(layers))
    }
}

impl LayerSelect {
    pub fn resolve(&self, count: usize) -> Result<Vec<usize>> {
        match self {
            LayerSelect::All => Ok((0..count).collect()),
            LayerSelect::Layers(l) => {
                if let Some(bad) = l.iter().find(|&&i| i >= count) {
                    return Err(Error::Range(format!("layer {bad} out of range 0..{count}")));
                }
                Ok(l.clone())
            }
        }
    }
}

/// Dense zoom-in windows, in target pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoomOptions {
    pub window: usize,
    pub stride: usize,
    /// Source crop side relative to the target window.
    pub margin: f64,
}

impl Default for ZoomOptions {
    fn default() -> Self {
        Self { window: 32, stride: 16, margin: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostOptions {
    pub source_kind: SourceKind,
    pub layer_select: LayerSelect,
    pub pairing: Pairing,
    /// Normalization of attention costs, per layer, before averaging.
    pub normalize: Normalize,
    /// Normalization of encoder/decoder features before correlation.
    pub feature_normalize: Normalize,
    pub reciprocity: bool,
    pub suppress_register: bool,
    pub temperature: f64,
    pub dense_zoom_in: bool,
    pub zoom: ZoomOptions,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            source_kind: SourceKind::CrossAttention,
            layer_select: LayerSelect::All,
            pairing: Pairing::QK,
            normalize: Normalize::None,
            feature_normalize: Normalize::L2,
            reciprocity: true,
            suppress_register: true,
            temperature: 1e-4,
            dense_zoom_in: false,
            zoom: ZoomOptions::default(),
        }
    }
}

impl CostOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.zoom.window == 0 || self.zoom.stride == 0 || !(self.zoom.margin > 0.0) {
            return Err(Error::Config("zoom window, stride and margin must be positive".into()));
        }
        Ok(())
    }

    pub fn with_source(&self, kind: SourceKind) -> Self {
        Self { source_kind: kind, ..self.clone() }
    }

    /// Stable textual summary, used as a report fingerprint.
    pub fn fingerprint(&self) -> String {
        format!(
            "source={};layers={};pairing={};normalize={};feature_normalize={};reciprocity={};suppress_register={};tau={:e};zoom={};window={};stride={};margin={}",
            self.source_kind,
            self.layer_select,
            self.pairing,
            self.normalize,
            self.feature_normalize,
            self.reciprocity,
            self.suppress_register,
            self.temperature,
            self.dense_zoom_in,
            self.zoom.window,
            self.zoom.stride,
            self.zoom.margin
        )
    }

    pub fn apply_kv(&mut self, kv: &indexmap::IndexMap<String, String>) -> Result<()> {
        use crate::config::parse_value as pv;
        for (k, v) in kv {
            match k.as_str() {
                "source_kind" => self.source_kind = v.parse()?,
                "layer_select" => self.layer_select = v.parse()?,
                "pairing" => self.pairing = v.parse()?,
                "normalize" => self.normalize = v.parse()?,
                "feature_normalize" => self.feature_normalize = v.parse()?,
                "reciprocity" => self.reciprocity = pv(k, v)?,
                "suppress_register" => self.suppress_register = pv(k, v)?,
                "temperature" => self.temperature = pv(k, v)?,
                "dense_zoom_in" => self.dense_zoom_in = pv(k, v)?,
                "zoom_window" => self.zoom.window = pv(k, v)?,
                "zoom_stride" => self.zoom.stride = pv(k, v)?,
                "zoom_margin" => self.zoom.margin = pv(k, v)?,
                _ => {}
            }
        }
        self.validate()
    }
}

/// Row `i` is a target token, column `j` a source token (plus an optional
/// register column at `register_col`).
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub scores: Vec<f32>,
    pub rows: usize,
    pub cols: usize,
    /// Target grid `(h, w)`, giving the row layout.
    pub grid: (usize, usize),
    /// Source grid `(h, w)`, giving the column layout.
    pub source_grid: (usize, usize),
    pub register_col: Option<usize>,
    pub normalized: Normalize,
    pub source_kind: SourceKind,
}

impl CostVolume {
    pub fn new(scores: Vec<f32>, grid: (usize, usize), source_grid: (usize, usize), kind: SourceKind) -> Result<Self> {
        let rows = grid.0 * grid.1;
        let cols = source_grid.0 * source_grid.1;
        if scores.len() != rows * cols {
            return Err(Error::Dimension(format!("{} scores for a {rows}x{cols} volume", scores.len())));
        }
        Ok(Self { scores, rows, cols, grid, source_grid, register_col: None, normalized: Normalize::None, source_kind: kind })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.scores[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.scores[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Result<CostVolume> {
        if self.register_col.is_some() {
            return Err(Error::Contract("cannot transpose a volume with a register column".into()));
        }
        let mut t = vec![0.0; self.scores.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[j * self.rows + i] = self.scores[i * self.cols + j];
            }
        }
        Ok(CostVolume {
            scores: t,
            rows: self.cols,
            cols: self.rows,
            grid: self.source_grid,
            source_grid: self.grid,
            register_col: None,
            normalized: self.normalized,
            source_kind: self.source_kind,
        })
    }

    /// First index of each row's maximum.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.scores.iter().all(|v| v.is_finite())
    }
}

fn l2_rows(data: &[f32], dim: usize) -> Vec<f32> {
    let mut out = data.to_vec();
    for row in out.chunks_exact_mut(dim) {
        let n = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if n > 0.0 {
            for v in row {
                *v = (*v as f64 / n) as f32;
            }
        }
    }
    out
}

fn softmax_rows_inplace(data: &mut [f32], dim: usize) {
    for row in data.chunks_exact_mut(dim) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            let e = ((*v - max) as f64).exp();
            sum += e;
            *v = e as f32;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
}

/// Dot products `a_i . b_j` of two row-major feature matrices.
fn gram(a: &[f32], b: &[f32], dim: usize, scale: f64) -> Vec<f32> {
    let (na, nb) = (a.len() / dim, b.len() / dim);
    let mut out = Vec::with_capacity(na * nb);
    for ra in a.chunks_exact(dim) {
        for rb in b.chunks_exact(dim) {
            let d: f64 = ra.iter().zip(rb).map(|(&x, &y)| x as f64 * y as f64).sum();
            out.push((d * scale) as f32);
        }
    }
    out
}

/// `scores(i, j) = D_t(i) . D_s(j)`; `L2` normalizes each vector first
/// (cosine similarity), `Softmax` normalizes each row of raw dot products.
pub fn feature_correlation(dt: &TokenGrid, ds: &TokenGrid, normalize: Normalize) -> Result<CostVolume> {
    if dt.grid != ds.grid || dt.dim() != ds.dim() {
        return Err(Error::Dimension(format!(
            "feature grids {:?}x{} and {:?}x{} differ",
            dt.grid,
            dt.dim(),
            ds.grid,
            ds.dim()
        )));
    }
    let dim = dt.dim();
    let flat = |g: &TokenGrid| -> Result<Vec<f32>> {
        let t = g.tokens.narrow(0, 0, g.num_grid_tokens())?;
        Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    };
    let (mut a, mut b) = (flat(dt)?, flat(ds)?);
    if normalize == Normalize::L2 {
        a = l2_rows(&a, dim);
        b = l2_rows(&b, dim);
    }
    let mut scores = gram(&a, &b, dim, 1.0);
    let n = ds.num_grid_tokens();
    if normalize == Normalize::Softmax {
        softmax_rows_inplace(&mut scores, n);
    }
    let mut c = CostVolume::new(scores, dt.grid, ds.grid, SourceKind::EncoderCorr)?;
    c.normalized = normalize;
    Ok(c)
}

fn square_grid(n: usize) -> Result<(usize, usize)> {
    let s = (n as f64).sqrt().round() as usize;
    if s * s != n {
        return Err(Error::Dimension(format!("{n} tokens do not form a square grid")));
    }
    Ok((s, s))
}

/// Per-layer cost volumes from recorded cross-attention.
///
/// `QK` averages the pre-softmax logits over heads and keeps the register
/// column. The other pairings are plain dot products of the recorded
/// projections of the two views, which needs the records of the swapped
/// pass in `partner` (source queries only exist there); their volumes
/// carry no register.
pub fn attention_cost(
    records: &[AttentionRecord],
    partner: Option<&[AttentionRecord]>,
    layer_select: &LayerSelect,
    pairing: Pairing,
) -> Result<Vec<CostVolume>> {
    if records.is_empty() {
        return Err(Error::Contract("no attention records".into()));
    }
    let layers = layer_select.resolve(records.len())?;
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        let r = &records[l];
        let grid = square_grid(r.n_query)?;
        let reg = usize::from(r.has_register);
        let n_src = r.n_key - reg;
        let src_grid = square_grid(n_src)?;
        let cost = if pairing == Pairing::QK {
            let inv = 1.0 / r.n_heads as f64;
            let mut scores = vec![0.0f32; r.n_query * r.n_key];
            for (i, s) in scores.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for h in 0..r.n_heads {
                    acc += r.logits[h * r.n_query * r.n_key + i] as f64;
                }
                *s = (acc * inv) as f32;
            }
            CostVolume {
                scores,
                rows: r.n_query,
                cols: r.n_key,
                grid,
                source_grid: src_grid,
                register_col: r.has_register.then_some(n_src),
                normalized: Normalize::None,
                source_kind: SourceKind::CrossAttention,
            }
        } else {
            let p = partner
                .and_then(|p| p.get(l))
                .ok_or_else(|| Error::Contract(format!("pairing {pairing} needs swapped-pass records for layer {l}")))?;
            let d = r.dim;
            let preg = usize::from(p.has_register);
            let (a, b): (&[f32], &[f32]) = match pairing {
                Pairing::QQ => (&r.query, &p.query),
                Pairing::KK => (&p.key[..(p.n_key - preg) * d], &r.key[..n_src * d]),
                Pairing::VV => (&p.value[..(p.n_key - preg) * d], &r.value[..n_src * d]),
                Pairing::QK => unreachable!(),
            };
            CostVolume::new(gram(a, b, d, 1.0), grid, square_grid(b.len() / d)?, SourceKind::CrossAttention)?
        };
        out.push(cost);
    }
    Ok(out)
}

/// Overwrites each row's register entry with that row's minimum (taken
/// before the overwrite). The register column is kept.
pub fn replace_register(cost: &CostVolume, register_col: usize) -> Result<CostVolume> {
    if register_col >= cost.cols {
        return Err(Error::Range(format!("register column {register_col} outside 0..{}", cost.cols)));
    }
    let mut out = cost.clone();
    for i in 0..cost.rows {
        let row = &mut out.scores[i * cost.cols..(i + 1) * cost.cols];
        let min = row.iter().fold(f32::INFINITY, |m, &v| m.min(v));
        row[register_col] = min;
    }
    Ok(out)
}

/// [`replace_register`] followed by dropping the register column.
pub fn suppress_register(cost: &CostVolume, register_col: usize) -> Result<CostVolume> {
    let replaced = replace_register(cost, register_col)?;
    let cols = cost.cols - 1;
    let mut scores = Vec::with_capacity(cost.rows * cols);
    for i in 0..cost.rows {
        let row = replaced.row(i);
        scores.extend_from_slice(&row[..register_col]);
        scores.extend_from_slice(&row[register_col + 1..]);
    }
    Ok(CostVolume { scores, cols, register_col: None, ..replaced })
}

/// Drops the register column without touching other entries.
fn drop_register(cost: &CostVolume) -> CostVolume {
    match cost.register_col {
        None => cost.clone(),
        Some(r) => {
            let cols = cost.cols - 1;
            let mut scores = Vec::with_capacity(cost.rows * cols);
            for i in 0..cost.rows {
                let row = cost.row(i);
                scores.extend_from_slice(&row[..r]);
                scores.extend_from_slice(&row[r + 1..]);
            }
            CostVolume { scores, cols, register_col: None, ..cost.clone() }
        }
    }
}

/// Row-wise L2 or softmax normalization of a cost volume.
pub fn normalize_cost(cost: &CostVolume, normalize: Normalize) -> CostVolume {
    let mut out = cost.clone();
    match normalize {
        Normalize::None => {}
        Normalize::L2 => out.scores = l2_rows(&cost.scores, cost.cols),
        Normalize::Softmax => softmax_rows_inplace(&mut out.scores, cost.cols),
    }
    out.normalized = normalize;
    out
}

fn mean_volume(layers: &[CostVolume]) -> Result<CostVolume> {
    let first = layers.first().ok_or_else(|| Error::Contract("empty layer list".into()))?;
    for c in layers {
        if (c.rows, c.cols) != (first.rows, first.cols) {
            return Err(Error::Dimension("cost volumes differ in shape".into()));
        }
        if c.normalized != first.normalized {
            return Err(Error::Contract("mixed normalization tags".into()));
        }
        if c.register_col.is_some() {
            return Err(Error::Contract("register column must be removed before fusion".into()));
        }
    }
    let inv = 1.0 / layers.len() as f64;
    let mut scores = vec![0.0f32; first.scores.len()];
    for (k, s) in scores.iter_mut().enumerate() {
        let acc: f64 = layers.iter().map(|c| c.scores[k] as f64).sum();
        *s = (acc * inv) as f32;
    }
    Ok(CostVolume { scores, ..first.clone() })
}

/// `C' = mean_l C^l + (mean_l C^l_swap)^T`.
pub fn fuse_reciprocal(c_layers: &[CostVolume], c_swap_layers: &[CostVolume]) -> Result<CostVolume> {
    if c_layers.len() != c_swap_layers.len() {
        return Err(Error::Dimension(format!("{} layers vs {} swapped layers", c_layers.len(), c_swap_layers.len())));
    }
    let a = mean_volume(c_layers)?;
    let b = mean_volume(c_swap_layers)?;
    if a.normalized != b.normalized {
        return Err(Error::Contract("mixed normalization tags".into()));
    }
    if (a.rows, a.cols) != (b.cols, b.rows) {
        return Err(Error::Dimension("swapped volumes must be transposed in shape".into()));
    }
    let mut scores = vec![0.0f32; a.scores.len()];
    for i in 0..a.rows {
        for j in 0..a.cols {
            scores[i * a.cols + j] = a.scores[i * a.cols + j] + b.scores[j * b.cols + i];
        }
    }
    Ok(CostVolume { scores, ..a })
}

/// Layer average without the reciprocal term.
pub fn fuse_forward(c_layers: &[CostVolume]) -> Result<CostVolume> {
    mean_volume(c_layers)
}

/// Matched source coordinate of every row under a temperature softmax, in
/// source-grid units `(x, y)`.
pub fn soft_argmax_coords(cost: &CostVolume, temperature: f64) -> Result<Vec<(f64, f64)>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if cost.register_col.is_some() {
        return Err(Error::Contract("register column present in soft-argmax input".into()));
    }
    let sw = cost.source_grid.1;
    let mut out = Vec::with_capacity(cost.rows);
    let mut w = vec![0.0f64; cost.cols];
    for i in 0..cost.rows {
        let row = cost.row(i);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            w[j] = ((v as f64 - max) / temperature).exp();
            sum += w[j];
        }
        let (mut x, mut y) = (0.0, 0.0);
        for (j, &wj) in w.iter().enumerate() {
            x += wj * (j % sw) as f64;
            y += wj * (j / sw) as f64;
        }
        out.push((x / sum, y / sum));
    }
    Ok(out)
}

/// Soft-argmax flow in units of the target grid. When the grids match
/// these are token units.
pub fn soft_argmax_flow(cost: &CostVolume, temperature: f64) -> Result<FlowField> {
    let coords = soft_argmax_coords(cost, temperature)?;
    let (h, w) = cost.grid;
    let (sh, sw) = cost.source_grid;
    let (rx, ry) = (sw as f64 / w as f64, sh as f64 / h as f64);
    let mut flow = FlowField::zeros(w, h);
    for (i, &(x, y)) in coords.iter().enumerate() {
        let (qx, qy) = ((i % w) as f64, (i / w) as f64);
        flow.u[i] = ((x + 0.5) / rx - 0.5 - qx) as f32;
        flow.v[i] = ((y + 0.5) / ry - 0.5 - qy) as f32;
    }
    Ok(flow)
}

/// Warps token features by a token-unit flow on the same grid.
pub fn warp_tokens(source: &TokenGrid, flow: &FlowField) -> Result<(Vec<f32>, Vec<bool>)> {
    let (h, w) = source.grid;
    let t = source.tokens.narrow(0, 0, source.num_grid_tokens())?;
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    warp_channels(&data, w, h, source.dim(), flow)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhotometricKind {
    Charbonnier,
    Ssim,
}

pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Charbonnier penalty `sqrt(d^2 + eps^2)` or `(1 - SSIM) / 2` over a 3x3
/// window, averaged over valid pixels and channels.
pub fn photometric_score(warped: &Image, target: &Image, valid: &[bool], kind: PhotometricKind) -> Result<f64> {
    let (w, h) = (target.width(), target.height());
    if (warped.width(), warped.height()) != (w, h) || valid.len() != w * h {
        return Err(Error::Dimension("photometric inputs differ in size".into()));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::Metric("empty valid mask".into()));
    }
    let (a, b) = (warped.data(), target.data());
    let total: f64 = match kind {
        PhotometricKind::Charbonnier => (0..w * h)
            .filter(|&i| valid[i])
            .map(|i| {
                (0..3)
                    .map(|c| {
                        let d = a[i * 3 + c] as f64 - b[i * 3 + c] as f64;
                        (d * d + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt()
                    })
                    .sum::<f64>()
            })
            .sum(),
        PhotometricKind::Ssim => {
            const C1: f64 = 0.01 * 0.01;
            const C2: f64 = 0.03 * 0.03;
            let px = |d: &[f32], x: isize, y: isize, c: usize| {
                let xc = x.clamp(0, w as isize - 1) as usize;
                let yc = y.clamp(0, h as isize - 1) as usize;
                d[(yc * w + xc) * 3 + c] as f64
            };
            let mut acc = 0.0;
            for i in (0..w * h).filter(|&i| valid[i]) {
                let (x, y) = ((i % w) as isize, (i / w) as isize);
                for c in 0..3 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (va, vb) = (px(a, x + dx, y + dy, c), px(b, x + dx, y + dy, c));
                            ma += va;
                            mb += vb;
                            saa += va * va;
                            sbb += vb * vb;
                            sab += va * vb;
                        }
                    }
                    let n = 9.0;
                    let (ma, mb) = (ma / n, mb / n);
                    let va = saa / n - ma * ma;
                    let vb = sbb / n - mb * mb;
                    let cov = sab / n - ma * mb;
                    let ssim = ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                    acc += ((1.0 - ssim) / 2.0).clamp(0.0, 1.0);
                }
            }
            acc
        }
    };
    Ok(total / (3 * count) as f64)
}

/// Everything the cost builders read from one (source, target) pair.
#[derive(Debug, Clone)]
pub struct PairFeatures {
    pub enc_target: TokenGrid,
    pub enc_source: TokenGrid,
    /// Decoder output with target queries attending to the source.
    pub dec_target: TokenGrid,
    /// Decoder output of the swapped pass.
    pub dec_source: TokenGrid,
    pub forward: Vec<AttentionRecord>,
    pub swapped: Vec<AttentionRecord>,
    /// Raw target encoder block outputs requested through `enc_keep`.
    pub enc_guides: Vec<TokenGrid>,
}

const FEATURE_BATCH: usize = 8;

/// Runs the unmasked two-direction forward on model-resolution images,
/// keeping the target encoder blocks listed in `enc_keep`.
pub fn extract_features(params: &ModelParams, pairs: &[(&Image, &Image)], enc_keep: &[usize]) -> Result<Vec<PairFeatures>> {
    params.check_finite()?;
    let size = params.config.image_size;
    let grid = params.config.grid();
    let reg = params.config.use_register_token;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(FEATURE_BATCH) {
        let src: Vec<Image> = chunk.iter().map(|(s, _)| s.resize(size, size)).collect();
        let tgt: Vec<Image> = chunk.iter().map(|(_, t)| t.resize(size, size)).collect();
        let sr: Vec<&Image> = src.iter().collect();
        let tr: Vec<&Image> = tgt.iter().collect();
        let pf = pair_forward_batch(params, &sr, &tr, enc_keep, true)?;
        for b in 0..chunk.len() {
            let grid_of = |t: &candle_core::Tensor| -> Result<TokenGrid> { TokenGrid::new(t.get(b)?.detach(), grid, false) };
            let fwd = pf.forward.iter().enumerate().map(|(l, c)| capture_record(c, b, l, reg)).collect::<Result<Vec<_>>>()?;
            let swp = pf.swapped.iter().enumerate().map(|(l, c)| capture_record(c, b, l, reg)).collect::<Result<Vec<_>>>()?;
            let f = PairFeatures {
                enc_target: grid_of(&pf.enc_target)?,
                enc_source: grid_of(&pf.enc_source)?,
                dec_target: grid_of(&pf.dec_forward)?,
                dec_source: grid_of(&pf.dec_swapped)?,
                forward: fwd,
                swapped: swp,
                enc_guides: pf.enc_kept_target.iter().map(grid_of).collect::<Result<_>>()?,
            };
            if f.forward.iter().any(|r| r.logits.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric("non-finite attention logits".into()));
            }
            out.push(f);
        }
    }
    Ok(out)
}

fn prepare_attention(records: &[AttentionRecord], partner: &[AttentionRecord], options: &CostOptions) -> Result<Vec<CostVolume>> {
    let layers = attention_cost(records, Some(partner), &options.layer_select, options.pairing)?;
    layers
        .iter()
        .map(|c| {
            let c = match c.register_col {
                Some(r) if options.suppress_register => suppress_register(c, r)?,
                _ => c.clone(),
            };
            Ok(drop_register(&normalize_cost(&c, options.normalize)))
        })
        .collect()
}

/// Per-direction cost stacks `(forward, swapped)` of one pair, ready for
/// fusion.
pub fn direction_costs(features: &PairFeatures, options: &CostOptions) -> Result<(Vec<CostVolume>, Vec<CostVolume>)> {
    options.validate()?;
    Ok(match options.source_kind {
        SourceKind::EncoderCorr => (
            vec![feature_correlation(&features.enc_target, &features.enc_source, options.feature_normalize)?],
            vec![feature_correlation(&features.enc_source, &features.enc_target, options.feature_normalize)?],
        ),
        SourceKind::DecoderCorr => (
            vec![feature_correlation(&features.dec_target, &features.dec_source, options.feature_normalize)?],
            vec![feature_correlation(&features.dec_source, &features.dec_target, options.feature_normalize)?],
        ),
        SourceKind::CrossAttention => (
            prepare_attention(&features.forward, &features.swapped, options)?,
            prepare_attention(&features.swapped, &features.forward, options)?,
        ),
    })
}

/// Final (fused) matching cost of one pair for the configured source.
pub fn matching_cost(features: &PairFeatures, options: &CostOptions) -> Result<CostVolume> {
    let (fwd, swp) = direction_costs(features, options)?;
    let mut cost = if options.reciprocity { fuse_reciprocal(&fwd, &swp)? } else { fuse_forward(&fwd)? };
    cost.source_kind = options.source_kind;
    Ok(cost)
}

/// Token-unit flow of one pair.
pub fn token_flow(features: &PairFeatures, options: &CostOptions) -> Result<FlowField> {
    soft_argmax_flow(&matching_cost(features, options)?, options.temperature)
}

/// Zero-shot flow at the target's own resolution, for several pairs at once.
pub fn zero_shot_match_many(params: &ModelParams, pairs: &[(&Image, &Image)], options: &CostOptions) -> Result<Vec<FlowField>> {
    options.validate()?;
    let feats = extract_features(params, pairs, &[])?;
    let mut out = Vec::with_capacity(pairs.len());
    for ((src, tgt), f) in pairs.iter().zip(&feats) {
        let coarse = upsample_flow(&token_flow(f, options)?, tgt.width(), tgt.height())?;
        out.push(if options.dense_zoom_in {
            dense_zoom_in(params, src, tgt, &coarse, options)?
        } else {
            coarse
        });
    }
    Ok(out)
}

/// Full zero-shot pipeline: both decoder directions, per-layer costs,
/// register suppression, reciprocal fusion, soft-argmax, upsampling and
/// optional dense zoom-in.
pub fn zero_shot_match(params: &ModelParams, source: &Image, target: &Image, options: &CostOptions) -> Result<FlowField> {
    Ok(zero_shot_match_many(params, &[(source, target)], options)?.remove(0))
}

/// Window origins covering `[0, extent)` with the given stride.
fn window_starts(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=extent - window).step_by(stride).collect();
    if *v.last().expect("non-empty") != extent - window {
        v.push(extent - window);
    }
    v
}

fn hann(i: usize, n: usize) -> f64 {
    let s = (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).sin();
    s * s
}

/// Refines a coarse flow by re-matching overlapping target windows against
/// source crops placed by the coarse flow, then Hann-blending the windows.
///
/// Each source crop is `margin` times the window side, centered on the
/// window center displaced by the mean valid coarse flow and clamped into
/// the source frame. Pixels no window resolves keep the coarse flow.
pub fn dense_zoom_in(params: &ModelParams, source: &Image, target: &Image, coarse: &FlowField, options: &CostOptions) -> Result<FlowField> {
    let z = options.zoom;
    let (tw, th) = (target.width(), target.height());
    if z.window > tw || z.window > th {
        return Err(Error::Config(format!("zoom window {} larger than image {tw}x{th}", z.window)));
    }
    if (coarse.width, coarse.height) != (tw, th) {
        return Err(Error::Dimension("coarse flow must be at target resolution".into()));
    }
    let (sw, sh) = (source.width(), source.height());
    let s = z.window;
    let size = params.config.image_size;
    let side = ((s as f64) * z.margin).min(sw.min(sh) as f64);
    let mut crops = Vec::new();
    for &y0 in &window_starts(th, s, z.stride) {
        for &x0 in &window_starts(tw, s, z.stride) {
            let (mut su, mut sv, mut n) = (0.0f64, 0.0f64, 0usize);
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    let i = y * tw + x;
                    if coarse.valid[i] {
                        su += coarse.u[i] as f64;
                        sv += coarse.v[i] as f64;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                continue;
            }
            let cx = x0 as f64 + s as f64 / 2.0 + su / n as f64;
            let cy = y0 as f64 + s as f64 / 2.0 + sv / n as f64;
            let sx0 = (cx - side / 2.0).clamp(0.0, sw as f64 - side);
            let sy0 = (cy - side / 2.0).clamp(0.0, sh as f64 - side);
            let tcrop = target.crop_resized(x0 as f32, y0 as f32, s as f32, s as f32, size, size);
            let scrop = source.crop_resized(sx0 as f32, sy0 as f32, side as f32, side as f32, size, size);
            crops.push((x0, y0, sx0, sy0, scrop, tcrop));
        }
    }
    let pairs: Vec<(&Image, &Image)> = crops.iter().map(|c| (&c.4, &c.5)).collect();
    let feats = extract_features(params, &pairs, &[])?;
    let scale = side / s as f64;
    let mut acc_u = vec![0.0f64; tw * th];
    let mut acc_v = vec![0.0f64; tw * th];
    let mut acc_w = vec![0.0f64; tw * th];
    for ((x0, y0, sx0, sy0, _, _), f) in crops.iter().zip(&feats) {
        let local = upsample_flow(&token_flow(f, options)?, s, s)?;
        for ly in 0..s {
            for lx in 0..s {
                let li = ly * s + lx;
                let (gx, gy) = (x0 + lx, y0 + ly);
                // matched position in source-crop pixels at window scale, then global
                let mx = sx0 + (lx as f64 + local.u[li] as f64 + 0.5) * scale - 0.5;
                let my = sy0 + (ly as f64 + local.v[li] as f64 + 0.5) * scale - 0.5;
                if !(0.0..=(sw - 1) as f64).contains(&mx) || !(0.0..=(sh - 1) as f64).contains(&my) {
                    continue;
                }
                let wgt = hann(lx, s) * hann(ly, s);
                let gi = gy * tw + gx;
                acc_u[gi] += wgt * (mx - gx as f64);
                acc_v[gi] += wgt * (my - gy as f64);
                acc_w[gi] += wgt;
            }
        }
    }
    let mut out = coarse.clone();
    for i in 0..tw * th {
        if acc_w[i] > 0.0 {
            out.u[i] = (acc_u[i] / acc_w[i]) as f32;
            out.v[i] = (acc_v[i] / acc_w[i]) as f32;
        }
    }
    Ok(out)
}

/// Bilinear lookup of a pixel flow at fractional coordinates.
pub fn sample_flow(flow: &FlowField, x: f32, y: f32) -> (f32, f32) {
    let mut u = [0.0f32];
    let mut v = [0.0f32];
    sample_bilinear(&flow.u, flow.width, flow.height, 1, x, y, &mut u);
    sample_bilinear(&flow.v, flow.width, flow.height, 1, x, y, &mut v);
    (u[0], v[0])
}
