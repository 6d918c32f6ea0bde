//! Learned matching on top of the frozen backbone: a cost-aggregation
//! transformer over the target axis, a guided target-axis upsampler, the
//! supervised training loop, and end-to-end fine-tuning of the
//! cross-attention cost.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, D};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Container;
use crate::config::{parse_kv, parse_list, parse_value};
use crate::costvol::{direction_costs, extract_features, fuse_forward, soft_argmax_flow, CostOptions, CostVolume, PairFeatures, SourceKind};
use crate::datagen::SyntheticPair;
use crate::error::{Error, Result};
use crate::flow::{upsample_flow, FlowField};
use crate::image::Image;
use crate::model::{attend, pair_forward_batch, Initializer, ModelConfig, ModelParams, ParamStore, TokenGrid};
use crate::ops;
use crate::optim::{AdamW, AdamWConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionLoss {
    Epe,
    L1,
}

impl fmt::Display for RegressionLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegressionLoss::Epe => "epe",
            RegressionLoss::L1 => "l1",
        })
    }
}

impl FromStr for RegressionLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epe" => Ok(RegressionLoss::Epe),
            "l1" => Ok(RegressionLoss::L1),
            _ => Err(Error::Config(format!("unknown regression loss {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub n_agg_blocks: usize,
    pub agg_dim: usize,
    pub agg_heads: usize,
    pub compressed_dim: usize,
    pub window_size: usize,
    pub upsample_stages: usize,
    /// Target encoder blocks guiding each upsampling stage, deepest first.
    pub guide_layers: Vec<usize>,
    pub loss_kind: RegressionLoss,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Stage-one rate; stage two runs at half of it.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            n_agg_blocks: 2,
            agg_dim: 16,
            agg_heads: 2,
            compressed_dim: 128,
            window_size: 4,
            upsample_stages: 2,
            guide_layers: vec![3, 1],
            loss_kind: RegressionLoss::Epe,
            stage1_epochs: 30,
            stage2_epochs: 10,
            learning_rate: 1e-3,
            batch_size: 8,
            temperature: 0.02,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let (gh, gw) = model.grid();
        if self.n_agg_blocks == 0 {
            return err("n_agg_blocks must be at least 1".into());
        }
        if self.compressed_dim == 0 || self.compressed_dim > model.dec_dim {
            return err(format!("compressed_dim {} must lie in 1..={}", self.compressed_dim, model.dec_dim));
        }
        if self.agg_dim == 0 || self.agg_heads == 0 || !self.agg_dim.is_multiple_of(self.agg_heads) {
            return err(format!("agg_dim {} must be a positive multiple of agg_heads {}", self.agg_dim, self.agg_heads));
        }
        if self.window_size == 0 || gh % self.window_size != 0 || gw % self.window_size != 0 {
            return err(format!("window_size {} does not divide the {gh}x{gw} grid", self.window_size));
        }
        if !(1..=2).contains(&self.upsample_stages) {
            return err(format!("upsample_stages must be 1 or 2, got {}", self.upsample_stages));
        }
        if self.guide_layers.len() < self.upsample_stages {
            return err(format!("{} guide layers for {} stages", self.guide_layers.len(), self.upsample_stages));
        }
        if let Some(l) = self.guide_layers.iter().find(|&&l| l >= model.enc_layers) {
            return err(format!("guide layer {l} out of range 0..{}", model.enc_layers));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.temperature > 0.0) || !(self.learning_rate >= 0.0) {
            return err("temperature must be positive and learning_rate non-negative".into());
        }
        Ok(())
    }

    pub fn guides(&self) -> &[usize] {
        &self.guide_layers[..self.upsample_stages]
    }

    pub fn to_kv(&self) -> String {
        let guides: Vec<String> = self.guide_layers.iter().map(usize::to_string).collect();
        format!(
            "n_agg_blocks={}\nagg_dim={}\nagg_heads={}\ncompressed_dim={}\nwindow_size={}\nupsample_stages={}\nguide_layers={}\nloss_kind={}\nstage1_epochs={}\nstage2_epochs={}\nlearning_rate={}\nbatch_size={}\ntemperature={}\nseed={}\n",
            self.n_agg_blocks,
            self.agg_dim,
            self.agg_heads,
            self.compressed_dim,
            self.window_size,
            self.upsample_stages,
            guides.join(","),
            self.loss_kind,
            self.stage1_epochs,
            self.stage2_epochs,
            self.learning_rate,
            self.batch_size,
            self.temperature,
            self.seed
        )
    }

    pub fn apply_kv(&mut self, kv: &IndexMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            match k.as_str() {
                "n_agg_blocks" => self.n_agg_blocks = parse_value(k, v)?,
                "agg_dim" => self.agg_dim = parse_value(k, v)?,
                "agg_heads" => self.agg_heads = parse_value(k, v)?,
                "compressed_dim" => self.compressed_dim = parse_value(k, v)?,
                "window_size" => self.window_size = parse_value(k, v)?,
                "upsample_stages" => self.upsample_stages = parse_value(k, v)?,
                "guide_layers" => self.guide_layers = parse_list(k, v)?,
                "loss_kind" => self.loss_kind = v.parse()?,
                "stage1_epochs" => self.stage1_epochs = parse_value(k, v)?,
                "stage2_epochs" => self.stage2_epochs = parse_value(k, v)?,
                "learning_rate" => self.learning_rate = parse_value(k, v)?,
                "batch_size" => self.batch_size = parse_value(k, v)?,
                "temperature" => self.temperature = parse_value(k, v)?,
                "seed" => self.seed = parse_value(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }
}

/// Cost with its target axis upsampled `stage` times.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedCost {
    pub cost: CostVolume,
    pub stage: usize,
}

/// Learnable aggregation and upsampling head.
#[derive(Debug)]
pub struct FlowHead {
    pub model: ModelConfig,
    pub config: HeadConfig,
    pub store: ParamStore,
}

/// Kernel taps of a stride-2, size-4, padding-1 transposed convolution:
/// for output parity `r`, the `(parent offset, kernel index)` pairs.
const TAPS: [[(i64, usize); 2]; 2] = [[(0, 1), (-1, 3)], [(0, 2), (1, 0)]];

fn nearest_kernel() -> Vec<f32> {
    let mut k = vec![0.0f32; 16];
    for ky in 1..=2 {
        for kx in 1..=2 {
            k[ky * 4 + kx] = 1.0;
        }
    }
    k
}

/// Index of each child cell's parent after `times` nearest 2x upsamplings.
fn parent_index(grid: (usize, usize), times: u32) -> Vec<u32> {
    let f = 1usize << times;
    let (h, w) = (grid.0 * f, grid.1 * f);
    (0..h * w).map(|i| ((i / w / f) * grid.1 + (i % w) / f) as u32).collect()
}

/// `(out, in)` matrix of the bilinear resampling used by [`upsample_flow`].
fn interp_matrix(n_in: usize, n_out: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; n_out * n_in];
    let s = n_in as f32 / n_out as f32;
    for o in 0..n_out {
        let f = ((o as f32 + 0.5) * s - 0.5).clamp(0.0, (n_in - 1) as f32);
        let x0 = f.floor() as usize;
        let x1 = (x0 + 1).min(n_in - 1);
        let a = f - x0 as f32;
        m[o * n_in + x0] += 1.0 - a;
        m[o * n_in + x1] += a;
    }
    m
}

/// Soft-argmax of a `(B, T, S)` cost over its source axis, as a pixel flow
/// `(B, 2, H, W)` at output size `(W, H)`. Matches [`soft_argmax_flow`]
/// followed by [`upsample_flow`].
pub fn pixel_flow(
    cost: &Tensor,
    grid: (usize, usize),
    source_grid: (usize, usize),
    temperature: f64,
    out: (usize, usize),
) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let (b, t, s) = cost.dims3()?;
    let (gh, gw) = grid;
    let (sh, sw) = source_grid;
    let (ow, oh) = out;
    if t != gh * gw || s != sh * sw {
        return Err(Error::Dimension(format!("cost {:?} does not match grids {grid:?} x {source_grid:?}", cost.dims())));
    }
    if ow < gw || oh < gh {
        return Err(Error::Dimension(format!("output {ow}x{oh} smaller than grid {gw}x{gh}")));
    }
    let dtype = cost.dtype();
    let dev = Device::Cpu;
    let p = ops::softmax(&(cost / temperature)?)?;
    let coords: Vec<f32> = (0..s).flat_map(|j| [(j % sw) as f32, (j / sw) as f32]).collect();
    let coords = Tensor::from_vec(coords, (s, 2), &dev)?.to_dtype(dtype)?;
    let m = p.reshape((b * t, s))?.matmul(&coords)?.reshape((b, t, 2))?;
    let (rx, ry) = (sw as f64 / gw as f64, sh as f64 / gh as f64);
    let inv = Tensor::from_vec(vec![(1.0 / rx) as f32, (1.0 / ry) as f32], (1, 1, 2), &dev)?.to_dtype(dtype)?;
    let offset: Vec<f32> = (0..t)
        .flat_map(|i| {
            let (qx, qy) = ((i % gw) as f64, (i / gw) as f64);
            [(0.5 / rx - 0.5 - qx) as f32, (0.5 / ry - 0.5 - qy) as f32]
        })
        .collect();
    let offset = Tensor::from_vec(offset, (1, t, 2), &dev)?.to_dtype(dtype)?;
    let cells = m.broadcast_mul(&inv)?.broadcast_add(&offset)?;
    let f = cells.transpose(1, 2)?.contiguous()?.reshape((b * 2 * gh, gw))?;
    let rx_t = Tensor::from_vec(interp_matrix(gw, ow), (ow, gw), &dev)?.to_dtype(dtype)?.t()?;
    let ry_t = Tensor::from_vec(interp_matrix(gh, oh), (oh, gh), &dev)?.to_dtype(dtype)?.t()?;
    let f = f.matmul(&rx_t)?.reshape((b * 2, gh, ow))?.transpose(1, 2)?.contiguous()?;
    let f = f.reshape((b * 2 * ow, gh))?.matmul(&ry_t)?.reshape((b * 2, ow, oh))?.transpose(1, 2)?;
    let scale = Tensor::from_vec(vec![(ow as f64 / gw as f64) as f32, (oh as f64 / gh as f64) as f32], (1, 2, 1, 1), &dev)?
        .to_dtype(dtype)?;
    Ok(f.reshape((b, 2, oh, ow))?.broadcast_mul(&scale)?)
}

const EPE_EPS: f64 = 1e-12;

/// Regression loss of a `(B, 2, H, W)` flow against ground truth with a
/// `(B, H, W)` 0/1 validity tensor.
pub fn regression_loss_tensor(pred: &Tensor, gt: &Tensor, valid: &Tensor, kind: RegressionLoss) -> Result<Tensor> {
    let count: f64 = valid.to_dtype(DType::F64)?.sum_all()?.to_scalar()?;
    if count == 0.0 {
        return Err(Error::Metric("empty valid mask".into()));
    }
    let d = (pred - gt)?;
    let du = d.narrow(1, 0, 1)?.squeeze(1)?;
    let dv = d.narrow(1, 1, 1)?.squeeze(1)?;
    let per = match kind {
        RegressionLoss::Epe => ((du.sqr()? + dv.sqr()?)? + EPE_EPS)?.sqrt()?,
        RegressionLoss::L1 => (du.abs()? + dv.abs()?)?,
    };
    Ok(((per * valid)?.sum_all()? / count)?)
}

/// Mean end-point error (or L1 distance) over valid pixels.
pub fn regression_loss(pred: &FlowField, gt: &FlowField, valid: &[bool], kind: RegressionLoss) -> Result<f64> {
    pred.check_same_shape(gt)?;
    if valid.len() != gt.len() {
        return Err(Error::Dimension(format!("{} validity entries for {} pixels", valid.len(), gt.len())));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for i in (0..gt.len()).filter(|&i| valid[i]) {
        let du = pred.u[i] as f64 - gt.u[i] as f64;
        let dv = pred.v[i] as f64 - gt.v[i] as f64;
        sum += match kind {
            RegressionLoss::Epe => (du * du + dv * dv).sqrt(),
            RegressionLoss::L1 => du.abs() + dv.abs(),
        };
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metric("empty valid mask".into()));
    }
    Ok(sum / n as f64)
}

/// Per-pair head inputs computed once from the frozen backbone.
#[derive(Debug, Clone)]
pub struct HeadSample {
    pub c_fwd: Vec<f32>,
    pub c_swp: Vec<f32>,
    pub d_t: Vec<f32>,
    pub d_s: Vec<f32>,
    pub guides: Vec<Vec<f32>>,
    pub gt: Option<FlowField>,
    /// Output size `(W, H)`.
    pub out: (usize, usize),
}

fn grid_values(g: &TokenGrid) -> Result<Vec<f32>> {
    let t = g.tokens.narrow(0, 0, g.num_grid_tokens())?;
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

impl HeadSample {
    /// Layer-averaged, register-suppressed cross-attention costs of both
    /// directions plus decoder and guide features.
    pub fn from_features(f: &PairFeatures, options: &CostOptions, gt: Option<FlowField>, out: (usize, usize)) -> Result<Self> {
        let opts = options.with_source(SourceKind::CrossAttention);
        let (fwd, swp) = direction_costs(f, &opts)?;
        Ok(Self {
            c_fwd: fuse_forward(&fwd)?.scores,
            c_swp: fuse_forward(&swp)?.scores,
            d_t: grid_values(&f.dec_target)?,
            d_s: grid_values(&f.dec_source)?,
            guides: f.enc_guides.iter().map(grid_values).collect::<Result<_>>()?,
            gt,
            out,
        })
    }
}

/// A stacked batch of [`HeadSample`]s.
pub struct HeadBatch {
    pub c_fwd: Tensor,
    pub c_swp: Tensor,
    pub d_t: Tensor,
    pub d_s: Tensor,
    pub guides: Vec<Tensor>,
    pub gt: Option<(Tensor, Tensor)>,
    pub out: (usize, usize),
}

impl HeadBatch {
    pub fn new(samples: &[&HeadSample], model: &ModelConfig, dtype: DType) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Contract("empty head batch".into()))?;
        if samples.iter().any(|s| s.out != first.out || s.guides.len() != first.guides.len()) {
            return Err(Error::Contract("head batch mixes output sizes or guide counts".into()));
        }
        let b = samples.len();
        let t = model.num_tokens();
        let dev = Device::Cpu;
        let stack = |f: &dyn Fn(&HeadSample) -> &[f32], cols: usize| -> Result<Tensor> {
            let mut v = Vec::with_capacity(b * t * cols);
            for s in samples {
                let d = f(s);
                if d.len() != t * cols {
                    return Err(Error::Dimension(format!("head input of {} values, expected {}", d.len(), t * cols)));
                }
                v.extend_from_slice(d);
            }
            Ok(Tensor::from_vec(v, (b, t, cols), &dev)?.to_dtype(dtype)?)
        };
        let guides = (0..first.guides.len())
            .map(|g| stack(&|s| &s.guides[g], model.enc_dim))
            .collect::<Result<Vec<_>>>()?;
        let gt = if samples.iter().all(|s| s.gt.is_some()) {
            let (w, h) = first.out;
            let mut flow = Vec::with_capacity(b * 2 * w * h);
            let mut valid = Vec::with_capacity(b * w * h);
            for s in samples {
                let g = s.gt.as_ref().expect("checked");
                if (g.width, g.height) != (w, h) {
                    return Err(Error::Dimension("ground truth differs from output size".into()));
                }
                flow.extend_from_slice(&g.u);
                flow.extend_from_slice(&g.v);
                valid.extend(g.valid.iter().map(|&v| if v { 1.0f32 } else { 0.0 }));
            }
            Some((
                Tensor::from_vec(flow, (b, 2, h, w), &dev)?.to_dtype(dtype)?,
                Tensor::from_vec(valid, (b, h, w), &dev)?.to_dtype(dtype)?,
            ))
        } else {
            None
        };
        Ok(Self {
            c_fwd: stack(&|s| &s.c_fwd, t)?,
            c_swp: stack(&|s| &s.c_swp, t)?,
            d_t: stack(&|s| &s.d_t, model.dec_dim)?,
            d_s: stack(&|s| &s.d_s, model.dec_dim)?,
            guides,
            gt,
            out: first.out,
        })
    }
}

impl FlowHead {
    /// Fresh head whose output equals the zero-shot flow: identity decoder
    /// compression (when widths agree), zero aggregation read-out, nearest
    /// upsampling kernels and zero guide gates.
    pub fn new(model: &ModelConfig, config: HeadConfig) -> Result<Self> {
        config.validate(model)?;
        let mut init = Initializer::new(config.seed ^ 0x4ead);
        let (d, dp, a, c) = (model.dec_dim, config.compressed_dim, config.agg_dim, model.enc_dim);
        if d == dp {
            let mut eye = vec![0.0f32; d * d];
            for i in 0..d {
                eye[i * d + i] = 1.0;
            }
            init.store.insert("compress.w", Tensor::from_vec(eye, (d, d), &Device::Cpu)?)?;
            init.constant("compress.b", &[d], 0.0)?;
        } else {
            init.linear("compress", d, dp)?;
        }
        init.linear("agg.cost", 1, a)?;
        init.linear("agg.feat", dp, a)?;
        for k in 0..config.n_agg_blocks {
            for part in ["win", "glob"] {
                init.layer_norm(&format!("agg.{k}.{part}_ln"), a)?;
                init.linear(&format!("agg.{k}.{part}.qkv"), a, 3 * a)?;
                init.linear(&format!("agg.{k}.{part}.proj"), a, a)?;
            }
            init.layer_norm(&format!("agg.{k}.mlp_ln"), a)?;
            init.linear(&format!("agg.{k}.mlp.fc1"), a, 4 * a)?;
            init.linear(&format!("agg.{k}.mlp.fc2"), 4 * a, a)?;
        }
        init.layer_norm("agg.out_ln", a)?;
        init.constant("agg.out.w", &[a, 1], 0.0)?;
        init.constant("agg.out.b", &[1], 0.0)?;
        for s in 0..config.upsample_stages {
            init.store.insert(&format!("up.{s}.kernel"), Tensor::from_vec(nearest_kernel(), (4, 4), &Device::Cpu)?)?;
            init.layer_norm(&format!("up.{s}.guide_ln"), c)?;
            init.constant(&format!("up.{s}.gate.w"), &[c, 4], 0.0)?;
            init.constant(&format!("up.{s}.gate.b"), &[4], 0.0)?;
        }
        Ok(Self { model: model.clone(), config, store: init.store })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<FlowHead> {
        Ok(FlowHead { model: self.model.clone(), config: self.config.clone(), store: self.store.to_dtype(dtype)? })
    }

    fn lin(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        Ok(ops::linear(x, self.store.get(&format!("{name}.w"))?, Some(self.store.get(&format!("{name}.b"))?))?)
    }

    fn ln(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        Ok(ops::layer_norm(x, self.store.get(&format!("{name}.w"))?, self.store.get(&format!("{name}.b"))?)?)
    }

    fn attention(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let a = x.dim(2)?;
        let qkv = self.lin(x, &format!("{name}.qkv"))?;
        let (out, _, _) = attend(&qkv.narrow(2, 0, a)?, &qkv.narrow(2, a, a)?, &qkv.narrow(2, 2 * a, a)?, self.config.agg_heads)?;
        self.lin(&out, &format!("{name}.proj"))
    }

    /// `(B, T, d) -> (B, T, d')`.
    pub fn compress(&self, x: &Tensor) -> Result<Tensor> {
        self.lin(x, "compress")
    }

    fn windows(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, a) = x.dims3()?;
        let (gh, gw) = self.model.grid();
        let ws = self.config.window_size;
        Ok(x
            .reshape(vec![n, gh / ws, ws, gw / ws, ws, a])?
            .permute(vec![0, 1, 3, 2, 4, 5])?
            .contiguous()?
            .reshape((n * (gh / ws) * (gw / ws), ws * ws, a))?)
    }

    fn unwindows(&self, x: &Tensor, n: usize) -> Result<Tensor> {
        let (gh, gw) = self.model.grid();
        let ws = self.config.window_size;
        let a = x.dim(2)?;
        Ok(x
            .reshape(vec![n, gh / ws, gw / ws, ws, ws, a])?
            .permute(vec![0, 1, 3, 2, 4, 5])?
            .contiguous()?
            .reshape((n, gh * gw, a))?)
    }

    /// Aggregation transformer on a `(B, T, S)` cost with compressed target
    /// features `(B, T, d')`. Every source column is refined independently by
    /// attention over the target axis (window-partitioned, then global) and
    /// added back to the input cost.
    pub fn aggregate_tensor(&self, cost: &Tensor, feats: &Tensor) -> Result<Tensor> {
        let (b, t, s) = cost.dims3()?;
        if feats.dims3()?.0 != b || feats.dim(1)? != t || t != self.model.num_tokens() {
            return Err(Error::Dimension(format!("cost {:?} and features {:?} disagree", cost.dims(), feats.dims())));
        }
        let a = self.config.agg_dim;
        let cols = cost.transpose(1, 2)?.contiguous()?.unsqueeze(3)?;
        let h = self.lin(&cols, "agg.cost")?;
        let f = self.lin(feats, "agg.feat")?.unsqueeze(1)?;
        let mut h = h.broadcast_add(&f)?.reshape((b * s, t, a))?;
        for k in 0..self.config.n_agg_blocks {
            let w = self.attention(&self.windows(&self.ln(&h, &format!("agg.{k}.win_ln"))?)?, &format!("agg.{k}.win"))?;
            h = (&h + self.unwindows(&w, b * s)?)?;
            h = (&h + self.attention(&self.ln(&h, &format!("agg.{k}.glob_ln"))?, &format!("agg.{k}.glob"))?)?;
            let m = self.ln(&h, &format!("agg.{k}.mlp_ln"))?;
            let m = self.lin(&ops::gelu(&self.lin(&m, &format!("agg.{k}.mlp.fc1"))?)?, &format!("agg.{k}.mlp.fc2"))?;
            h = (&h + m)?;
        }
        let delta = self.lin(&self.ln(&h, "agg.out_ln")?, "agg.out")?.reshape((b, s, t))?.transpose(1, 2)?;
        Ok((cost + delta)?)
    }

    /// `T(C, D_t') + T(C_swap, D_s')^T` with shared parameters.
    pub fn reciprocal_tensor(&self, c: &Tensor, c_swap: &Tensor, dt: &Tensor, ds: &Tensor) -> Result<Tensor> {
        if c.dims() != c_swap.dims() {
            return Err(Error::Dimension(format!("costs {:?} and {:?} differ", c.dims(), c_swap.dims())));
        }
        let a = self.aggregate_tensor(c, dt)?;
        let b = self.aggregate_tensor(c_swap, ds)?.transpose(1, 2)?;
        Ok((a + b)?)
    }

    /// One 2x target-axis upsampling of a `(B, T, S)` cost on `grid`, gated
    /// per child cell by the guide feature `(B, T, c)` of its parent.
    pub fn upsample_tensor(&self, cost: &Tensor, grid: (usize, usize), guide: &Tensor, stage: usize) -> Result<Tensor> {
        if stage >= self.config.upsample_stages {
            return Err(Error::Range(format!("upsampling stage {stage} out of range")));
        }
        let (b, t, s) = cost.dims3()?;
        let (h, w) = grid;
        if t != h * w {
            return Err(Error::Dimension(format!("cost target axis {t} does not match grid {grid:?}")));
        }
        if guide.dims3()?.0 != b || guide.dim(1)? != t {
            return Err(Error::Dimension(format!("guide {:?} does not match grid {grid:?}", guide.dims())));
        }
        let m = cost.transpose(1, 2)?.contiguous()?.reshape((b, s, h, w))?;
        let padded = m.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let kernel = self.store.get(&format!("up.{stage}.kernel"))?;
        let gate = self.lin(&self.ln(guide, &format!("up.{stage}.guide_ln"))?, &format!("up.{stage}.gate"))?;
        let gate = (gate.transpose(1, 2)?.contiguous()?.reshape((b, 4, 1, h, w))? + 1.0)?;
        let mut rows = Vec::with_capacity(2);
        for (ry, ty) in TAPS.iter().enumerate() {
            let mut cols = Vec::with_capacity(2);
            for (rx, tx) in TAPS.iter().enumerate() {
                let mut acc: Option<Tensor> = None;
                for &(dy, ky) in ty {
                    for &(dx, kx) in tx {
                        let shifted = padded.narrow(2, (1 + dy) as usize, h)?.narrow(3, (1 + dx) as usize, w)?;
                        let k = kernel.narrow(0, ky, 1)?.narrow(1, kx, 1)?.reshape((1, 1, 1, 1))?;
                        let term = shifted.broadcast_mul(&k)?;
                        acc = Some(match acc {
                            None => term,
                            Some(a) => (a + term)?,
                        });
                    }
                }
                let g = gate.narrow(1, 2 * ry + rx, 1)?.squeeze(1)?;
                cols.push(acc.expect("four taps").broadcast_mul(&g)?);
            }
            rows.push(Tensor::stack(&cols, 4)?);
        }
        let up = Tensor::stack(&rows, 3)?.reshape((b, s, 4 * t))?;
        Ok(up.transpose(1, 2)?.contiguous()?)
    }

    /// Flow `(B, 2, H, W)` of a batch at temperature `temperature`.
    ///
    /// The read-out is the soft-argmax flow of the aggregated cost plus the
    /// difference between the flows of the upsampled cost and of its
    /// nearest-neighbor upsampling, so an untrained head reproduces the
    /// zero-shot flow exactly.
    pub fn forward(&self, batch: &HeadBatch, temperature: f64) -> Result<Tensor> {
        let grid = self.model.grid();
        let dt = self.compress(&batch.d_t)?;
        let ds = self.compress(&batch.d_s)?;
        let c1 = self.reciprocal_tensor(&batch.c_fwd, &batch.c_swp, &dt, &ds)?;
        let base = pixel_flow(&c1, grid, grid, temperature, batch.out)?;
        if batch.guides.len() < self.config.upsample_stages {
            return Err(Error::Contract(format!("{} guides for {} stages", batch.guides.len(), self.config.upsample_stages)));
        }
        let (mut cur, mut near, mut g) = (c1.clone(), c1, grid);
        for st in 0..self.config.upsample_stages {
            let idx = Tensor::from_vec(parent_index(grid, st as u32), g.0 * g.1, &Device::Cpu)?;
            let guide = batch.guides[st].index_select(&idx, 1)?;
            cur = self.upsample_tensor(&cur, g, &guide, st)?;
            let step = Tensor::from_vec(parent_index(g, 1), 4 * g.0 * g.1, &Device::Cpu)?;
            near = near.index_select(&step, 1)?;
            g = (2 * g.0, 2 * g.1);
        }
        let fine = pixel_flow(&cur, g, grid, temperature, batch.out)?;
        let anchor = pixel_flow(&near, g, grid, temperature, batch.out)?;
        Ok((base + (fine - anchor)?)?)
    }

    /// Flows of several pairs at the targets' resolutions.
    pub fn predict_many(
        &self,
        backbone: &ModelParams,
        pairs: &[(&Image, &Image)],
        options: &CostOptions,
    ) -> Result<Vec<FlowField>> {
        let feats = extract_features(backbone, pairs, self.config.guides())?;
        let mut out = Vec::with_capacity(pairs.len());
        for ((_, tgt), f) in pairs.iter().zip(&feats) {
            let sample = HeadSample::from_features(f, options, None, (tgt.width(), tgt.height()))?;
            let batch = HeadBatch::new(&[&sample], &self.model, self.dtype())?;
            let flow = self.forward(&batch, self.config.temperature)?;
            out.push(flow_from_tensor(&flow, 0)?);
        }
        Ok(out)
    }

    pub fn predict(&self, backbone: &ModelParams, source: &Image, target: &Image, options: &CostOptions) -> Result<FlowField> {
        Ok(self.predict_many(backbone, &[(source, target)], options)?.remove(0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::default();
        c.meta.insert("kind".into(), "head".into());
        for (k, v) in parse_kv(&self.model.to_kv())? {
            c.meta.insert(format!("model.{k}"), v);
        }
        for (k, v) in parse_kv(&self.config.to_kv())? {
            c.meta.insert(format!("head.{k}"), v);
        }
        c.insert_store("head.", &self.store)?;
        c.save(path)
    }

    /// Loads a head; with `expected` set, a head built for another backbone
    /// config is rejected.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<FlowHead> {
        let c = Container::load(path)?;
        if c.meta.get("kind").map(String::as_str) != Some("head") {
            return Err(Error::Checkpoint { offset: 0, msg: "not a head checkpoint".into() });
        }
        let sub = |prefix: &str| -> IndexMap<String, String> {
            c.meta.iter().filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone()))).collect()
        };
        let mut model = ModelConfig::default();
        model.apply_kv(&sub("model."))?;
        if let Some(exp) = expected {
            if exp != &model {
                return Err(Error::ConfigMismatch("head was trained for a different backbone config".into()));
            }
        }
        let mut config = HeadConfig::default();
        config.apply_kv(&sub("head."))?;
        let reference = FlowHead::new(&model, config.clone())?;
        let store = c.extract_store("head.", Some(&reference.store))?;
        if store.len() != reference.store.len() {
            return Err(Error::ConfigMismatch(format!("head has {} entries, config implies {}", store.len(), reference.store.len())));
        }
        Ok(FlowHead { model, config, store })
    }
}

/// Extracts pair `b` of a `(B, 2, H, W)` flow tensor.
pub fn flow_from_tensor(flow: &Tensor, b: usize) -> Result<FlowField> {
    let (_, _, h, w) = flow.dims4()?;
    let f = flow.get(b)?.to_dtype(DType::F32)?;
    let u: Vec<f32> = f.get(0)?.flatten_all()?.to_vec1()?;
    let v: Vec<f32> = f.get(1)?.flatten_all()?.to_vec1()?;
    Ok(FlowField { width: w, height: h, u, v, valid: vec![true; w * h] })
}

fn grid_tensor(g: &TokenGrid, dtype: DType) -> Result<Tensor> {
    Ok(g.tokens.narrow(0, 0, g.num_grid_tokens())?.to_dtype(dtype)?.unsqueeze(0)?)
}

fn cost_tensor(c: &CostVolume, dtype: DType) -> Result<Tensor> {
    if c.register_col.is_some() {
        return Err(Error::Contract("register column present in head input".into()));
    }
    Ok(Tensor::from_slice(&c.scores, (1, c.rows, c.cols), &Device::Cpu)?.to_dtype(dtype)?)
}

fn volume_from_tensor(t: &Tensor, grid: (usize, usize), source_grid: (usize, usize)) -> Result<CostVolume> {
    let scores: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    CostVolume::new(scores, grid, source_grid, SourceKind::CrossAttention)
}

/// Linear compression `d -> d'` of decoder features.
pub fn compress_decoder_feature(d: &TokenGrid, head: &FlowHead) -> Result<TokenGrid> {
    let x = head.compress(&grid_tensor(d, head.dtype())?)?;
    TokenGrid::new(x.squeeze(0)?, d.grid, false)
}

/// Aggregation transformer applied to one direction.
pub fn aggregate(cost: &CostVolume, compressed: &TokenGrid, head: &FlowHead) -> Result<CostVolume> {
    let out = head.aggregate_tensor(&cost_tensor(cost, head.dtype())?, &grid_tensor(compressed, head.dtype())?)?;
    volume_from_tensor(&out, cost.grid, cost.source_grid)
}

/// `T(C, D_t') + T(C_swap, D_s')^T`.
pub fn reciprocal_aggregate(
    cost: &CostVolume,
    cost_swap: &CostVolume,
    dt: &TokenGrid,
    ds: &TokenGrid,
    head: &FlowHead,
) -> Result<CostVolume> {
    if (cost.rows, cost.cols) != (cost_swap.cols, cost_swap.rows) {
        return Err(Error::Dimension("swapped cost must have transposed shape".into()));
    }
    let dtype = head.dtype();
    let out = head.reciprocal_tensor(
        &cost_tensor(cost, dtype)?,
        &cost_tensor(cost_swap, dtype)?,
        &grid_tensor(dt, dtype)?,
        &grid_tensor(ds, dtype)?,
    )?;
    volume_from_tensor(&out, cost.grid, cost.source_grid)
}

/// One guided 2x upsampling along the target axis.
pub fn upsample_stage(cost: &AggregatedCost, guide: &TokenGrid, head: &FlowHead, stage: usize) -> Result<AggregatedCost> {
    if guide.grid != cost.cost.grid {
        return Err(Error::Dimension(format!("guide grid {:?} does not match cost grid {:?}", guide.grid, cost.cost.grid)));
    }
    let dtype = head.dtype();
    let out = head.upsample_tensor(&cost_tensor(&cost.cost, dtype)?, cost.cost.grid, &grid_tensor(guide, dtype)?, stage)?;
    let grid = (2 * cost.cost.grid.0, 2 * cost.cost.grid.1);
    Ok(AggregatedCost { cost: volume_from_tensor(&out, grid, cost.cost.source_grid)?, stage: cost.stage + 1 })
}

/// Soft-argmax over the source axis, converted to pixels and bilinearly
/// upsampled to `out_w x out_h`.
pub fn head_flow(cost: &AggregatedCost, temperature: f64, out_w: usize, out_h: usize) -> Result<FlowField> {
    upsample_flow(&soft_argmax_flow(&cost.cost, temperature)?, out_w, out_h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub stage: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

const FEATURE_CHUNK: usize = 16;

/// Head inputs with ground truth for a set of model-resolution pairs.
pub fn head_samples(backbone: &ModelParams, pairs: &[SyntheticPair], head: &HeadConfig, options: &CostOptions) -> Result<Vec<HeadSample>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(FEATURE_CHUNK) {
        let refs: Vec<(&Image, &Image)> = chunk.iter().map(|p| (&p.source, &p.target)).collect();
        let feats = extract_features(backbone, &refs, head.guides())?;
        for (p, f) in chunk.iter().zip(&feats) {
            let size = (p.target.width(), p.target.height());
            out.push(HeadSample::from_features(f, options, Some(p.gt_flow.clone()), size)?);
        }
    }
    Ok(out)
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Two-stage supervised training of the head on cached samples. Only head
/// parameters are updated; the backbone is checked for drift afterwards.
pub fn train_head(
    backbone: &ModelParams,
    head: &mut FlowHead,
    samples: &[HeadSample],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    if samples.is_empty() {
        return Err(Error::Contract("no training samples".into()));
    }
    let snapshot = backbone.store.deep_clone()?;
    let cfg = head.config.clone();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf10e);
    let mut history = Vec::new();
    let stages = [(1usize, cfg.stage1_epochs, cfg.learning_rate), (2, cfg.stage2_epochs, cfg.learning_rate / 2.0)];
    for (stage, epochs, lr) in stages {
        for epoch in 0..epochs {
            let start = Instant::now();
            let order = shuffled(samples.len(), &mut rng);
            let (mut sum, mut n) = (0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                let refs: Vec<&HeadSample> = chunk.iter().map(|&i| &samples[i]).collect();
                let batch = HeadBatch::new(&refs, &head.model, head.dtype())?;
                let (gt, valid) = batch.gt.as_ref().ok_or_else(|| Error::Contract("training samples need ground truth".into()))?;
                let pred = head.forward(&batch, cfg.temperature)?;
                let loss = regression_loss_tensor(&pred, gt, valid, cfg.loss_kind)?;
                let value: f64 = loss.to_dtype(DType::F64)?.to_scalar()?;
                if !value.is_finite() {
                    return Err(Error::Training(format!("non-finite head loss in stage {stage} epoch {epoch}")));
                }
                let grads = loss.backward()?;
                if backbone.store.iter().any(|(_, v)| grads.get(v.as_tensor()).is_some()) {
                    return Err(Error::Contract("backbone received gradients during head training".into()));
                }
                opt.step(&head.store, &grads, lr, &|_| true)?;
                sum += value * chunk.len() as f64;
                n += chunk.len();
            }
            let m = EpochMetrics { stage, epoch, loss: sum / n as f64, lr, wall_ms: start.elapsed().as_secs_f64() * 1e3 };
            on_epoch(&m);
            history.push(m);
        }
    }
    if !backbone.store.bit_equal(&snapshot)? {
        return Err(Error::Contract("backbone weights changed during head training".into()));
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub loss_kind: RegressionLoss,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 5, learning_rate: 5e-5, batch_size: 8, temperature: 0.02, loss_kind: RegressionLoss::Epe, seed: 0 }
    }
}

impl FinetuneConfig {
    pub fn apply_kv(&mut self, kv: &IndexMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            match k.as_str() {
                "epochs" => self.epochs = parse_value(k, v)?,
                "learning_rate" => self.learning_rate = parse_value(k, v)?,
                "batch_size" => self.batch_size = parse_value(k, v)?,
                "temperature" => self.temperature = parse_value(k, v)?,
                "loss_kind" => self.loss_kind = v.parse()?,
                "seed" => self.seed = parse_value(k, v)?,
                _ => {}
            }
        }
        if self.batch_size == 0 || !(self.temperature > 0.0) {
            return Err(Error::Config("finetune batch_size and temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Head-averaged logits of every layer without the register column,
/// averaged over layers: `(B, T, S)`.
fn layer_mean_cost(captures: &[crate::model::LayerCapture], n_source: usize) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for cap in captures {
        let c = cap.logits.mean(1)?.narrow(D::Minus1, 0, n_source)?;
        acc = Some(match acc {
            None => c,
            Some(a) => (a + c)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::Contract("no attention captures".into()))?;
    Ok((acc / captures.len() as f64)?)
}

/// Differentiable zero-shot flow of model-resolution pairs: reciprocal
/// fusion of layer-averaged cross-attention, soft-argmax and upsampling to
/// `out`.
pub fn finetune_flow(params: &ModelParams, sources: &[&Image], targets: &[&Image], temperature: f64, out: (usize, usize)) -> Result<Tensor> {
    let pf = pair_forward_batch(params, sources, targets, &[], true)?;
    let n = params.config.num_tokens();
    let fwd = layer_mean_cost(&pf.forward, n)?;
    let swp = layer_mean_cost(&pf.swapped, n)?;
    let fused = (fwd + swp.transpose(1, 2)?)?;
    let grid = params.config.grid();
    pixel_flow(&fused, grid, grid, temperature, out)
}

/// Regression loss of the differentiable zero-shot flow on a batch.
pub fn finetune_loss(params: &ModelParams, batch: &[&SyntheticPair], config: &FinetuneConfig) -> Result<Tensor> {
    let size = params.config.image_size;
    if batch.iter().any(|p| p.source.width() != size || p.target.width() != size || p.gt_flow.width != size) {
        return Err(Error::Dimension(format!("fine-tuning pairs must be rendered at {size}x{size}")));
    }
    let sources: Vec<&Image> = batch.iter().map(|p| &p.source).collect();
    let targets: Vec<&Image> = batch.iter().map(|p| &p.target).collect();
    let pred = finetune_flow(params, &sources, &targets, config.temperature, (size, size))?;
    let sample: Vec<HeadSample> = batch
        .iter()
        .map(|p| HeadSample { c_fwd: vec![], c_swp: vec![], d_t: vec![], d_s: vec![], guides: vec![], gt: Some(p.gt_flow.clone()), out: (size, size) })
        .collect();
    let (gt, valid) = gt_tensors(&sample.iter().collect::<Vec<_>>(), params.dtype())?;
    regression_loss_tensor(&pred, &gt, &valid, config.loss_kind)
}

fn gt_tensors(samples: &[&HeadSample], dtype: DType) -> Result<(Tensor, Tensor)> {
    let b = samples.len();
    let (w, h) = samples[0].out;
    let mut flow = Vec::with_capacity(b * 2 * w * h);
    let mut valid = Vec::with_capacity(b * w * h);
    for s in samples {
        let g = s.gt.as_ref().ok_or_else(|| Error::Contract("missing ground truth".into()))?;
        flow.extend_from_slice(&g.u);
        flow.extend_from_slice(&g.v);
        valid.extend(g.valid.iter().map(|&v| if v { 1.0f32 } else { 0.0 }));
    }
    Ok((
        Tensor::from_vec(flow, (b, 2, h, w), &Device::Cpu)?.to_dtype(dtype)?,
        Tensor::from_vec(valid, (b, h, w), &Device::Cpu)?.to_dtype(dtype)?,
    ))
}

/// End-to-end fine-tuning of every backbone weight on the flow regression
/// loss of the differentiable zero-shot pipeline.
pub fn finetune_mode(
    params: &mut ModelParams,
    pairs: &[SyntheticPair],
    config: &FinetuneConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    if pairs.is_empty() {
        return Err(Error::Contract("no training pairs".into()));
    }
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xf1e7);
    let mut history = Vec::new();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in shuffled(pairs.len(), &mut rng).chunks(config.batch_size) {
            let batch: Vec<&SyntheticPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let loss = finetune_loss(params, &batch, config)?;
            let value: f64 = loss.to_dtype(DType::F64)?.to_scalar()?;
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite fine-tuning loss in epoch {epoch}")));
            }
            let grads = loss.backward()?;
            opt.step(&params.store, &grads, config.learning_rate, &|_| true)?;
            params.step += 1;
            sum += value * chunk.len() as f64;
            n += chunk.len();
        }
        let m = EpochMetrics { stage: 0, epoch, loss: sum / n as f64, lr: config.learning_rate, wall_ms: start.elapsed().as_secs_f64() * 1e3 };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costvol::{fuse_reciprocal, zero_shot_match};
    use crate::datagen::{generate_pair, PairSpec};
    use crate::model::init_params;
    use rand::Rng;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            enc_layers: 2,
            dec_layers: 2,
            enc_dim: 16,
            dec_dim: 16,
            n_heads: 2,
            ..ModelConfig::default()
        }
    }

    fn tiny_head() -> HeadConfig {
        HeadConfig {
            n_agg_blocks: 1,
            agg_dim: 8,
            agg_heads: 2,
            compressed_dim: 16,
            window_size: 2,
            guide_layers: vec![1, 0],
            batch_size: 2,
            stage1_epochs: 2,
            stage2_epochs: 1,
            ..HeadConfig::default()
        }
    }

    fn randomize(head: &FlowHead, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, _) in head.store.iter() {
            let vals: Vec<f32> = head.store.values(name).unwrap().iter().map(|&v| v + rng.random_range(-0.3f32..0.3)).collect();
            head.store.set_values(name, &vals).unwrap();
        }
    }

    fn random_cost(rng: &mut ChaCha8Rng, g: (usize, usize)) -> CostVolume {
        let n = g.0 * g.1;
        CostVolume::new((0..n * n).map(|_| rng.random_range(-2.0f32..2.0)).collect(), g, g, SourceKind::CrossAttention).unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, g: (usize, usize), d: usize) -> TokenGrid {
        let v: Vec<f32> = (0..g.0 * g.1 * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        TokenGrid::new(Tensor::from_vec(v, (g.0 * g.1, d), &Device::Cpu).unwrap(), g, false).unwrap()
    }

    #[test]
    fn compression_examples() {
        let m = tiny_model();
        let head = FlowHead::new(&m, tiny_head()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_grid(&mut rng, m.grid(), 16);
        let out = compress_decoder_feature(&d, &head).unwrap();
        assert_eq!(out.grid_rows().unwrap(), d.grid_rows().unwrap());
        let narrow = FlowHead::new(&m, HeadConfig { compressed_dim: 8, ..tiny_head() }).unwrap();
        assert_eq!(compress_decoder_feature(&d, &narrow).unwrap().dim(), 8);
        for name in ["compress.w", "compress.b"] {
            let n = narrow.store.values(name).unwrap().len();
            narrow.store.set_values(name, &vec![0.0; n]).unwrap();
        }
        let z = compress_decoder_feature(&d, &narrow).unwrap();
        assert!(z.grid_rows().unwrap().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregation_is_identity_at_init() {
        let m = tiny_model();
        let head = FlowHead::new(&m, tiny_head()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_cost(&mut rng, m.grid());
        let d = random_grid(&mut rng, m.grid(), 16);
        let out = aggregate(&c, &d, &head).unwrap();
        assert_eq!((out.rows, out.cols), (16, 16));
        assert_eq!(out.scores, c.scores);
        let cs = random_cost(&mut rng, m.grid());
        let ds = random_grid(&mut rng, m.grid(), 16);
        let r = reciprocal_aggregate(&c, &cs, &d, &ds, &head).unwrap();
        assert_eq!(r.scores, fuse_reciprocal(&[c], &[cs]).unwrap().scores);
    }

    #[test]
    fn aggregation_commutes_with_source_permutation() {
        let m = tiny_model();
        let head = FlowHead::new(&m, tiny_head()).unwrap();
        randomize(&head, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_cost(&mut rng, m.grid());
        let d = random_grid(&mut rng, m.grid(), 16);
        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut rng);
        let mut pc = c.clone();
        for i in 0..16 {
            for (j, &pj) in perm.iter().enumerate() {
                pc.scores[i * 16 + j] = c.at(i, pj);
            }
        }
        let a = aggregate(&c, &d, &head).unwrap();
        let b = aggregate(&pc, &d, &head).unwrap();
        assert!(a.scores != c.scores);
        for i in 0..16 {
            for (j, &pj) in perm.iter().enumerate() {
                assert!((b.at(i, j) - a.at(i, pj)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn window_must_divide_grid() {
        let err = FlowHead::new(&tiny_model(), HeadConfig { window_size: 3, ..tiny_head() }).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn reciprocal_aggregate_swap_exchange() {
        let m = tiny_model();
        let head = FlowHead::new(&m, tiny_head()).unwrap();
        randomize(&head, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b) = (random_cost(&mut rng, m.grid()), random_cost(&mut rng, m.grid()));
        let (da, db) = (random_grid(&mut rng, m.grid(), 16), random_grid(&mut rng, m.grid(), 16));
        let ab = reciprocal_aggregate(&a, &b, &da, &db, &head).unwrap();
        let ba = reciprocal_aggregate(&b, &a, &db, &da, &head).unwrap().transpose().unwrap();
        assert_eq!(ab.scores, ba.scores);
    }

    #[test]
    fn both_directions_receive_gradient() {
        let m = tiny_model();
        let head = FlowHead::new(&m, tiny_head()).unwrap();
        randomize(&head, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mk = |rng: &mut ChaCha8Rng| {
            let v: Vec<f32> = (0..256).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            candle_core::Var::from_vec(v, (1, 16, 16), &Device::Cpu).unwrap()
        };
        let (c, cs) = (mk(&mut rng), mk(&mut rng));
        let d = grid_tensor(&random_grid(&mut rng, m.grid(), 16), DType::F32).unwrap();
        let out = head.reciprocal_tensor(c.as_tensor(), cs.as_tensor(), &d, &d).unwrap();
        let w = Tensor::from_vec((0..256).map(|i| (i % 7) as f32).collect::<Vec<_>>(), (1, 16, 16), &Device::Cpu).unwrap();
        let grads = (out * w).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&c, &cs] {
            let g: f32 = grads.get(v.as_tensor()).unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
            assert!(g > 0.0);
        }
        let gw: f32 = grads.get(head.store.get("agg.out.w").unwrap()).unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!(gw > 0.0);
    }

    #[test]
    fn upsampling_shapes_and_nearest_init() {
        let m = ModelConfig { image_size: 64, enc_layers: 4, ..tiny_model() };
        let head = FlowHead::new(&m, HeadConfig { window_size: 4, guide_layers: vec![3, 1], ..tiny_head() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = AggregatedCost { cost: random_cost(&mut rng, (8, 8)), stage: 0 };
        let g1 = random_grid(&mut rng, (8, 8), 16);
        let up1 = upsample_stage(&c, &g1, &head, 0).unwrap();
        assert_eq!((up1.cost.rows, up1.cost.cols, up1.stage), (256, 64, 1));
        let g2 = random_grid(&mut rng, (16, 16), 16);
        let up2 = upsample_stage(&up1, &g2, &head, 1).unwrap();
        assert_eq!((up2.cost.rows, up2.cost.cols), (1024, 64));
        assert!(matches!(upsample_stage(&up1, &g1, &head, 1), Err(Error::Dimension(_))));
        let parent = crate::costvol::soft_argmax_coords(&c.cost, 1e-4).unwrap();
        let child = crate::costvol::soft_argmax_coords(&up1.cost, 1e-4).unwrap();
        for (i, ch) in child.iter().enumerate() {
            let p = parent[(i / 16 / 2) * 8 + (i % 16) / 2];
            assert_eq!(*ch, p);
        }
    }

    #[test]
    fn upsampling_never_mixes_source_columns() {
        let m = tiny_model();
        let head = FlowHead::new(&m, tiny_head()).unwrap();
        randomize(&head, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let guide = random_grid(&mut rng, m.grid(), 16);
        for j in 0..16 {
            let mut c = random_cost(&mut rng, m.grid());
            for i in 0..16 {
                c.scores[i * 16 + j] = 0.0;
            }
            let up = upsample_stage(&AggregatedCost { cost: c, stage: 0 }, &guide, &head, 0).unwrap();
            assert!((0..up.cost.rows).all(|i| up.cost.at(i, j) == 0.0));
            assert!((0..up.cost.rows).any(|i| up.cost.at(i, (j + 1) % 16) != 0.0));
        }
    }

    fn one_hot(grid: (usize, usize), src: (usize, usize), peaks: &[(usize, usize, usize)]) -> AggregatedCost {
        let (t, s) = (grid.0 * grid.1, src.0 * src.1);
        let mut scores = vec![0.0f32; t * s];
        for &(i, j, _) in peaks {
            scores[i * s + j] = 1.0;
        }
        AggregatedCost { cost: CostVolume::new(scores, grid, src, SourceKind::CrossAttention).unwrap(), stage: 2 }
    }

    #[test]
    fn head_flow_examples() {
        // target grid 8x8 over a 2x2 source grid: cell (0,0) peaked at source (row 1, col 0)
        let c = one_hot((8, 8), (2, 2), &[(0, 2, 0)]);
        let f = head_flow(&c, 1e-4, 8, 8).unwrap();
        // source token (0,1) centre sits at cell ((0+0.5)*4-0.5, (1+0.5)*4-0.5) = (1.5, 5.5)
        let (u, v) = f.at(0, 0);
        assert!((u - 1.5).abs() < 1e-5 && (v - 5.5).abs() < 1e-5);
        let uniform = AggregatedCost { cost: CostVolume::new(vec![0.5; 64 * 4], (8, 8), (2, 2), SourceKind::CrossAttention).unwrap(), stage: 2 };
        let f = head_flow(&uniform, 1e-4, 8, 8).unwrap();
        // centroid of the four source centres is the cell-grid centre (3.5, 3.5)
        let (u, v) = f.at(3, 3);
        assert!((u - 0.5).abs() < 1e-5 && (v - 0.5).abs() < 1e-5);
        let mut two = one_hot((8, 8), (2, 2), &[(0, 0, 0), (0, 1, 0)]);
        two.cost.scores[0] = 1.0;
        let f = head_flow(&two, 1e-4, 8, 8).unwrap();
        let (u, v) = f.at(0, 0);
        assert!((u - 3.5).abs() < 1e-5 && (v - 1.5).abs() < 1e-5);
    }

    #[test]
    fn pixel_flow_matches_cpu_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = random_cost(&mut rng, (4, 4));
        let t = cost_tensor(&c, DType::F32).unwrap();
        for (tau, out) in [(0.3, (32usize, 32usize)), (1e-4, (20, 12))] {
            let a = flow_from_tensor(&pixel_flow(&t, (4, 4), (4, 4), tau, out).unwrap(), 0).unwrap();
            let b = upsample_flow(&soft_argmax_flow(&c, tau).unwrap(), out.0, out.1).unwrap();
            for i in 0..a.len() {
                assert!((a.u[i] - b.u[i]).abs() < 1e-4 && (a.v[i] - b.v[i]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn regression_loss_examples() {
        let gt = FlowField::zeros(4, 2);
        let valid = vec![true; 8];
        assert_eq!(regression_loss(&gt, &gt, &valid, RegressionLoss::Epe).unwrap(), 0.0);
        let off = FlowField::constant(4, 2, 3.0, 4.0);
        assert_eq!(regression_loss(&off, &gt, &valid, RegressionLoss::Epe).unwrap(), 5.0);
        assert_eq!(regression_loss(&off, &gt, &valid, RegressionLoss::L1).unwrap(), 7.0);
        let mut half = gt.clone();
        for i in 0..4 {
            half.u[i] = 1.0;
        }
        assert_eq!(regression_loss(&half, &gt, &valid, RegressionLoss::Epe).unwrap(), 0.5);
        assert!(matches!(regression_loss(&gt, &gt, &[false; 8], RegressionLoss::Epe), Err(Error::Metric(_))));
    }

    fn pairs(m: &ModelConfig, n: usize) -> Vec<SyntheticPair> {
        let spec = PairSpec::training(m.image_size);
        (0..n as u64).map(|i| generate_pair(77, i, &spec).unwrap()).collect()
    }

    #[test]
    fn untrained_head_equals_zero_shot() {
        let m = tiny_model();
        let backbone = init_params(&m, 3).unwrap();
        let head = FlowHead::new(&m, tiny_head()).unwrap();
        let opts = CostOptions { temperature: head.config.temperature, ..CostOptions::default() };
        for p in pairs(&m, 3) {
            let a = head.predict(&backbone, &p.source, &p.target, &opts).unwrap();
            let b = zero_shot_match(&backbone, &p.source, &p.target, &opts).unwrap();
            let d = regression_loss(&a, &b, &vec![true; a.len()], RegressionLoss::Epe).unwrap();
            assert!(d < 1e-4, "{d}");
        }
    }

    #[test]
    fn zero_rate_keeps_head_and_backbone() {
        let m = tiny_model();
        let backbone = init_params(&m, 3).unwrap();
        let mut head = FlowHead::new(&m, HeadConfig { learning_rate: 0.0, ..tiny_head() }).unwrap();
        let before = head.store.deep_clone().unwrap();
        let samples = head_samples(&backbone, &pairs(&m, 3), &head.config, &CostOptions::default()).unwrap();
        let hist = train_head(&backbone, &mut head, &samples, |_| {}).unwrap();
        assert_eq!(hist.len(), 3);
        assert!(head.store.bit_equal(&before).unwrap());
    }

    #[test]
    fn head_training_reduces_loss() {
        let m = tiny_model();
        let backbone = init_params(&m, 3).unwrap();
        let mut head = FlowHead::new(&m, HeadConfig { stage1_epochs: 15, stage2_epochs: 5, learning_rate: 3e-3, ..tiny_head() }).unwrap();
        let samples = head_samples(&backbone, &pairs(&m, 4), &head.config, &CostOptions::default()).unwrap();
        let hist = train_head(&backbone, &mut head, &samples, |_| {}).unwrap();
        assert!(hist.last().unwrap().loss < hist[0].loss);
    }

    #[test]
    fn head_checkpoint_round_trip() {
        let m = tiny_model();
        let head = FlowHead::new(&m, tiny_head()).unwrap();
        randomize(&head, 13);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.ckpt");
        head.save(&path).unwrap();
        let back = FlowHead::load(&path, Some(&m)).unwrap();
        assert_eq!(back.config, head.config);
        assert!(back.store.bit_equal(&head.store).unwrap());
        let other = ModelConfig { dec_dim: 32, ..m };
        assert!(matches!(FlowHead::load(&path, Some(&other)), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn finetune_starts_at_zero_shot_and_skips_pixel_head() {
        let m = tiny_model();
        let params = init_params(&m, 4).unwrap();
        let cfg = FinetuneConfig::default();
        let ps = pairs(&m, 2);
        let opts = CostOptions { temperature: cfg.temperature, ..CostOptions::default() };
        let flow = finetune_flow(&params, &[&ps[0].source], &[&ps[0].target], cfg.temperature, (32, 32)).unwrap();
        let a = flow_from_tensor(&flow, 0).unwrap();
        let b = zero_shot_match(&params, &ps[0].source, &ps[0].target, &opts).unwrap();
        assert!(regression_loss(&a, &b, &vec![true; a.len()], RegressionLoss::Epe).unwrap() < 1e-4);
        let loss = finetune_loss(&params, &ps.iter().collect::<Vec<_>>(), &cfg).unwrap();
        let grads = loss.backward().unwrap();
        let norm = |name: &str| -> Option<f32> {
            grads.get(params.store.get(name).unwrap()).map(|g| g.abs().unwrap().sum_all().unwrap().to_scalar().unwrap())
        };
        assert!(norm("dec.0.cross.q.w").unwrap() > 0.0);
        assert!(norm("dec.0.cross.kv.w").unwrap() > 0.0);
        assert!(norm("head.w").unwrap_or(0.0) == 0.0);
    }
}
