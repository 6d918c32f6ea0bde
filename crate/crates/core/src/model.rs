//! Miniature cross-view completion encoder-decoder.
//!
//! A ViT encoder embeds each view; a decoder of self-attention,
//! cross-attention and MLP blocks lets target tokens attend to source tokens,
//! and a linear head maps decoder tokens back to pixel patches. Every
//! cross-attention layer can be recorded, pre- and post-softmax, together
//! with its query/key/value projections.

use candle_core::{DType, Device, Tensor, Var};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::ops;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub enc_dim: usize,
    pub dec_dim: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub use_register_token: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            enc_layers: 6,
            dec_layers: 6,
            enc_dim: 192,
            dec_dim: 128,
            n_heads: 4,
            mlp_ratio: 4.0,
            use_register_token: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 {
            return err("n_heads must be positive".into());
        }
        if self.enc_dim == 0 || !self.enc_dim.is_multiple_of(self.n_heads) {
            return err(format!("enc_dim {} not divisible by n_heads {}", self.enc_dim, self.n_heads));
        }
        if self.dec_dim == 0 || !self.dec_dim.is_multiple_of(self.n_heads) {
            return err(format!("dec_dim {} not divisible by n_heads {}", self.dec_dim, self.n_heads));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return err("encoder and decoder need at least one layer".into());
        }
        if !(self.mlp_ratio > 0.0) {
            return err("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Token grid `(h, w)`.
    pub fn grid(&self) -> (usize, usize) {
        let n = self.image_size / self.patch_size;
        (n, n)
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Values per patch: `patch_size^2 * 3`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn register_count(&self) -> usize {
        usize::from(self.use_register_token)
    }

    fn hidden(&self, dim: usize) -> usize {
        ((dim as f64) * self.mlp_ratio).round() as usize
    }

    /// Flat `key=value` lines, the same syntax as the config files.
    pub fn to_kv(&self) -> String {
        format!(
            "image_size={}\npatch_size={}\nenc_layers={}\ndec_layers={}\nenc_dim={}\ndec_dim={}\nn_heads={}\nmlp_ratio={}\nuse_register_token={}\nseed={}\n",
            self.image_size,
            self.patch_size,
            self.enc_layers,
            self.dec_layers,
            self.enc_dim,
            self.dec_dim,
            self.n_heads,
            self.mlp_ratio,
            self.use_register_token,
            self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        cfg.apply_kv(&crate::config::parse_kv(text)?)?;
        Ok(cfg)
    }

    /// Overrides fields from parsed key/value pairs; unknown keys are ignored
    /// so a single file can hold several sections.
    pub fn apply_kv(&mut self, kv: &IndexMap<String, String>) -> Result<()> {
        use crate::config::parse_value as pv;
        for (k, v) in kv {
            match k.as_str() {
                "image_size" => self.image_size = pv(k, v)?,
                "patch_size" => self.patch_size = pv(k, v)?,
                "enc_layers" => self.enc_layers = pv(k, v)?,
                "dec_layers" => self.dec_layers = pv(k, v)?,
                "enc_dim" => self.enc_dim = pv(k, v)?,
                "dec_dim" => self.dec_dim = pv(k, v)?,
                "n_heads" => self.n_heads = pv(k, v)?,
                "mlp_ratio" => self.mlp_ratio = pv(k, v)?,
                "use_register_token" => self.use_register_token = pv(k, v)?,
                "seed" => self.seed = pv(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }
}

/// Token features of one view on its `(h, w)` grid, row-major, optionally
/// followed by a register token row.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub grid: (usize, usize),
    pub has_register: bool,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, grid: (usize, usize), has_register: bool) -> Result<Self> {
        let rows = tokens.dim(0)?;
        let expected = grid.0 * grid.1 + usize::from(has_register);
        if tokens.rank() != 2 || rows != expected {
            return Err(Error::Dimension(format!(
                "token grid {:?} expects {} rows, got shape {:?}",
                grid,
                expected,
                tokens.dims()
            )));
        }
        Ok(Self { tokens, grid, has_register })
    }

    pub fn dim(&self) -> usize {
        self.tokens.dim(1).unwrap_or(0)
    }

    pub fn num_grid_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Grid tokens only (register row removed), as `f32` rows.
    pub fn grid_rows(&self) -> Result<Vec<Vec<f32>>> {
        let t = self.tokens.narrow(0, 0, self.num_grid_tokens())?;
        Ok(t.to_dtype(DType::F32)?.to_vec2()?)
    }
}

/// One decoder layer's cross-attention for a single query/source pair.
///
/// `logits` and `probs` are `n_heads x n_query x n_key`, flattened. The key
/// axis includes the register token (last column) when the model has one.
/// `query`, `key` and `value` hold the head-merged projections
/// (`n_query x dim`, `n_key x dim`).
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    pub n_heads: usize,
    pub n_query: usize,
    pub n_key: usize,
    pub dim: usize,
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
    pub query: Vec<f32>,
    pub key: Vec<f32>,
    pub value: Vec<f32>,
    pub has_register: bool,
}

impl AttentionRecord {
    #[inline]
    pub fn logit(&self, head: usize, i: usize, j: usize) -> f32 {
        self.logits[(head * self.n_query + i) * self.n_key + j]
    }

    #[inline]
    pub fn prob(&self, head: usize, i: usize, j: usize) -> f32 {
        self.probs[(head * self.n_query + i) * self.n_key + j]
    }
}

/// Ordered collection of named trainable arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name.to_string(), Var::from_tensor(&value)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy with freshly allocated variables of the given dtype.
    pub fn to_dtype(&self, dtype: DType) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (k, v) in &self.entries {
            out.insert(k, v.as_tensor().to_dtype(dtype)?.copy()?)?;
        }
        Ok(out)
    }

    pub fn deep_clone(&self) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (k, v) in &self.entries {
            out.insert(k, v.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    pub fn dtype(&self) -> DType {
        self.entries.values().next().map(|v| v.dtype()).unwrap_or(DType::F32)
    }

    /// Flattened `f32` copy of one entry.
    pub fn values(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self.get(name)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?)
    }

    /// Overwrites an entry in place, keeping its shape.
    pub fn set_values(&self, name: &str, values: &[f32]) -> Result<()> {
        let var = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        let t = Tensor::from_slice(values, var.shape(), &Device::Cpu)?.to_dtype(var.dtype())?;
        var.set(&t)?;
        Ok(())
    }

    /// True when every entry matches `other` bit for bit.
    pub fn bit_equal(&self, other: &ParamStore) -> Result<bool> {
        if self.entries.len() != other.entries.len() {
            return Ok(false);
        }
        for (k, v) in &self.entries {
            let Some(o) = other.entries.get(k) else {
                return Ok(false);
            };
            if v.shape() != o.shape() {
                return Ok(false);
            }
            let a: Vec<f32> = v.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            let b: Vec<f32> = o.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Serializable state of the ChaCha stream driving data generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn from_seed(seed: u64) -> Self {
        Self::capture(&ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Backbone weights plus the state needed to resume training.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub step: u64,
    pub rng: RngState,
}

impl ModelParams {
    pub fn to_dtype(&self, dtype: DType) -> Result<ModelParams> {
        Ok(ModelParams {
            config: self.config.clone(),
            store: self.store.to_dtype(dtype)?,
            step: self.step,
            rng: self.rng.clone(),
        })
    }

    pub fn deep_clone(&self) -> Result<ModelParams> {
        Ok(ModelParams {
            config: self.config.clone(),
            store: self.store.deep_clone()?,
            step: self.step,
            rng: self.rng.clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Fails with a numeric error when any weight is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        for (name, var) in self.store.iter() {
            let bad: f32 = var.as_tensor().to_dtype(DType::F32)?.abs()?.max_all()?.to_scalar()?;
            if !bad.is_finite() {
                return Err(Error::Numeric(format!("parameter {name} is not finite")));
            }
        }
        Ok(())
    }
}

pub(crate) const INIT_STD: f64 = 0.02;

/// Truncated normal (cut at two standard deviations).
pub(crate) fn trunc_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break (z * std) as f32;
            }
        })
        .collect()
}

pub(crate) struct Initializer {
    rng: ChaCha8Rng,
    pub store: ParamStore,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::new(),
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let n = shape.iter().product();
        let data = trunc_normal(&mut self.rng, n, INIT_STD);
        self.store.insert(name, Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    /// 2D sine-cosine table over a `(rows, cols)` grid: the first half of
    /// the channels encodes the row, the second half the column.
    pub fn sincos(&mut self, name: &str, grid: (usize, usize), dim: usize) -> Result<()> {
        self.store.insert(name, Tensor::from_vec(sincos_2d(grid, dim), &[grid.0 * grid.1, dim], &Device::Cpu)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<()> {
        let n = shape.iter().product();
        self.store.insert(name, Tensor::from_vec(vec![value; n], shape, &Device::Cpu)?)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.fused_linear(name, fan_in, fan_out, 1)
    }

    /// Xavier-uniform weights and zero bias for `parts` projections stored
    /// side by side; the bound uses the width of one part.
    pub fn fused_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, parts: usize) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out / parts) as f64).sqrt() as f32;
        let data: Vec<f32> = (0..fan_in * fan_out).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.insert(&format!("{name}.w"), Tensor::from_vec(data, &[fan_in, fan_out], &Device::Cpu)?)?;
        self.constant(&format!("{name}.b"), &[fan_out], 0.0)
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<()> {
        self.constant(&format!("{name}.w"), &[dim], 1.0)?;
        self.constant(&format!("{name}.b"), &[dim], 0.0)
    }
}

pub(crate) fn sincos_2d(grid: (usize, usize), dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let quarter = half / 2;
    let mut out = vec![0.0f32; grid.0 * grid.1 * dim];
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let row = &mut out[(r * grid.1 + c) * dim..][..dim];
            for (offset, coord) in [(0, r), (half, c)] {
                for k in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(k as f64 / quarter.max(1) as f64);
                    let a = coord as f64 * omega;
                    row[offset + k] = a.sin() as f32;
                    row[offset + quarter + k] = a.cos() as f32;
                }
            }
        }
    }
    out
}

/// Draws a fresh parameter set: truncated-normal(0.02) projections and
/// tokens, sine-cosine initialized (learned) positional tables, zero
/// biases, unit layer-norm scales.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut init = Initializer::new(seed);
    let (c, d, p) = (config.enc_dim, config.dec_dim, config.patch_dim());
    init.linear("enc.patch", p, c)?;
    init.sincos("enc.pos", config.grid(), c)?;
    for l in 0..config.enc_layers {
        let b = format!("enc.{l}");
        init.layer_norm(&format!("{b}.ln1"), c)?;
        init.fused_linear(&format!("{b}.attn.qkv"), c, 3 * c, 3)?;
        init.linear(&format!("{b}.attn.proj"), c, c)?;
        init.layer_norm(&format!("{b}.ln2"), c)?;
        init.linear(&format!("{b}.mlp.fc1"), c, config.hidden(c))?;
        init.linear(&format!("{b}.mlp.fc2"), config.hidden(c), c)?;
    }
    init.layer_norm("enc.ln", c)?;
    init.linear("bridge", c, d)?;
    init.sincos("dec.pos", config.grid(), d)?;
    init.normal("dec.mask_token", &[d])?;
    if config.use_register_token {
        init.normal("dec.register", &[d])?;
    }
    for l in 0..config.dec_layers {
        let b = format!("dec.{l}");
        init.layer_norm(&format!("{b}.ln1"), d)?;
        init.fused_linear(&format!("{b}.self.qkv"), d, 3 * d, 3)?;
        init.linear(&format!("{b}.self.proj"), d, d)?;
        init.layer_norm(&format!("{b}.ln_q"), d)?;
        init.layer_norm(&format!("{b}.ln_kv"), d)?;
        init.linear(&format!("{b}.cross.q"), d, d)?;
        init.fused_linear(&format!("{b}.cross.kv"), d, 2 * d, 2)?;
        init.linear(&format!("{b}.cross.proj"), d, d)?;
        init.layer_norm(&format!("{b}.ln3"), d)?;
        init.linear(&format!("{b}.mlp.fc1"), d, config.hidden(d))?;
        init.linear(&format!("{b}.mlp.fc2"), config.hidden(d), d)?;
    }
    init.layer_norm("dec.ln", d)?;
    init.normal("head.w", &[d, p])?;
    init.constant("head.b", &[p], 0.0)?;
    Ok(ModelParams {
        config: config.clone(),
        store: init.store,
        step: 0,
        rng: RngState::from_seed(seed),
    })
}

const PIXEL_MEAN: f32 = 0.5;
const PIXEL_SCALE: f32 = 4.0;

/// Raw patch vectors `(hw, p*p*3)` in row-major grid order; each patch is
/// flattened as (row, column, channel).
pub fn patch_values(image: &Image, config: &ModelConfig) -> Result<Vec<f32>> {
    if image.width() != config.image_size || image.height() != config.image_size {
        return Err(Error::Dimension(format!(
            "image is {}x{}, model expects {}x{}",
            image.width(),
            image.height(),
            config.image_size,
            config.image_size
        )));
    }
    let p = config.patch_size;
    let (gh, gw) = config.grid();
    let mut out = Vec::with_capacity(config.num_tokens() * config.patch_dim());
    for ty in 0..gh {
        for tx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    out.extend_from_slice(&image.get(tx * p + px, ty * p + py));
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patch_values`].
pub fn unpatchify(values: &[f32], config: &ModelConfig) -> Result<Image> {
    let (p, size) = (config.patch_size, config.image_size);
    if values.len() != config.num_tokens() * config.patch_dim() {
        return Err(Error::Dimension(format!(
            "{} patch values for a {}-token grid",
            values.len(),
            config.num_tokens()
        )));
    }
    let (_, gw) = config.grid();
    let mut img = Image::new(size, size);
    for (t, patch) in values.chunks_exact(config.patch_dim()).enumerate() {
        let (ty, tx) = (t / gw, t % gw);
        for py in 0..p {
            for px in 0..p {
                let k = (py * p + px) * 3;
                img.set(tx * p + px, ty * p + py, [patch[k], patch[k + 1], patch[k + 2]]);
            }
        }
    }
    Ok(img)
}

/// Batched patch tensor `(B, hw, p*p*3)` with the model's input normalization.
pub fn patch_batch(images: &[&Image], config: &ModelConfig, dtype: DType) -> Result<Tensor> {
    let mut all = Vec::with_capacity(images.len() * config.num_tokens() * config.patch_dim());
    for img in images {
        all.extend(patch_values(img, config)?.into_iter().map(|v| (v - PIXEL_MEAN) * PIXEL_SCALE));
    }
    Ok(Tensor::from_vec(all, (images.len(), config.num_tokens(), config.patch_dim()), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits `(B, N, D)` into `(B, H, N, D/H)`.
fn split_heads(t: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    let (b, n, d) = t.dims3()?;
    t.reshape((b, n, heads, d / heads))?.transpose(1, 2)?.contiguous()
}

fn merge_heads(t: &Tensor) -> candle_core::Result<Tensor> {
    let (b, h, n, dh) = t.dims4()?;
    t.transpose(1, 2)?.reshape((b, n, h * dh))
}

/// Multi-head scaled dot-product attention on already-projected features.
///
/// Inputs are `(B, N, D)`. Returns the head-merged output `(B, Nq, D)`, the
/// pre-softmax logits `q·k/sqrt(D/H)` and the row-softmax probabilities,
/// both `(B, H, Nq, Nk)`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let d = q.dim(2)?;
    if d % heads != 0 || k.dim(2)? != d || v.dim(2)? != d || k.dim(1)? != v.dim(1)? {
        return Err(Error::Dimension(format!(
            "attention shapes q{:?} k{:?} v{:?} with {heads} heads",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let (qh, kh, vh) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let logits = (qh.matmul(&kh.t()?)? * scale)?;
    let probs = ops::softmax(&logits)?;
    let out = merge_heads(&probs.matmul(&vh)?)?;
    Ok((out, logits, probs))
}

/// Tensors captured from one cross-attention layer of a batched forward.
#[derive(Debug, Clone)]
pub struct LayerCapture {
    pub logits: Tensor,
    pub probs: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// Decoder outputs of a batched forward.
pub struct DecoderOut {
    pub kept: Vec<Tensor>,
    pub last: Tensor,
    pub captures: Vec<LayerCapture>,
}

/// Batched forward machinery over a parameter store.
pub struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub p: &'a ParamStore,
}

impl<'a> Net<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Self {
            cfg: &params.config,
            p: &params.store,
        }
    }

    fn lin(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let w = self.p.get(&format!("{name}.w"))?;
        let b = self.p.get(&format!("{name}.b"))?;
        Ok(ops::linear(x, w, Some(b))?)
    }

    fn ln(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let w = self.p.get(&format!("{name}.w"))?;
        let b = self.p.get(&format!("{name}.b"))?;
        Ok(ops::layer_norm(x, w, b)?)
    }

    fn mlp(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let h = ops::gelu(&self.lin(x, &format!("{name}.fc1"))?)?;
        self.lin(&h, &format!("{name}.fc2"))
    }

    fn self_attention(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let d = x.dim(2)?;
        let qkv = self.lin(x, &format!("{name}.qkv"))?;
        let (out, _, _) = attend(
            &qkv.narrow(2, 0, d)?,
            &qkv.narrow(2, d, d)?,
            &qkv.narrow(2, 2 * d, d)?,
            self.cfg.n_heads,
        )?;
        self.lin(&out, &format!("{name}.proj"))
    }

    /// Patch embedding plus positional embedding, `(B, hw, P) -> (B, hw, c)`.
    pub fn embed(&self, patches: &Tensor) -> Result<Tensor> {
        let x = self.lin(patches, "enc.patch")?;
        Ok(x.broadcast_add(self.p.get("enc.pos")?)?)
    }

    /// Embeds a subset of token positions; `positions` holds `B * k` flat
    /// indices into the `(hw)` grid, sample-major.
    pub fn embed_subset(&self, patches: &Tensor, positions: &[u32]) -> Result<Tensor> {
        let (b, n, pdim) = patches.dims3()?;
        let k = positions.len() / b;
        let flat_idx: Vec<u32> = positions
            .iter()
            .enumerate()
            .map(|(i, &pos)| (i / k * n) as u32 + pos)
            .collect();
        let idx = Tensor::from_vec(flat_idx, b * k, &Device::Cpu)?;
        let sel = patches.reshape((b * n, pdim))?.index_select(&idx, 0)?.reshape((b, k, pdim))?;
        let pos_idx = Tensor::from_vec(positions.to_vec(), b * k, &Device::Cpu)?;
        let pos = self.p.get("enc.pos")?.index_select(&pos_idx, 0)?;
        let c = pos.dim(1)?;
        Ok(self.lin(&sel, "enc.patch")?.add(&pos.reshape((b, k, c))?)?)
    }

    /// Runs the encoder blocks. Returns the raw outputs of the requested
    /// blocks and the layer-normed output of the final block.
    pub fn encoder(&self, mut x: Tensor, keep: &[usize]) -> Result<(Vec<Tensor>, Tensor)> {
        check_layers(keep, self.cfg.enc_layers, "encoder")?;
        let mut kept = Vec::with_capacity(keep.len());
        let mut outputs: Vec<Option<Tensor>> = vec![None; self.cfg.enc_layers];
        for l in 0..self.cfg.enc_layers {
            let b = format!("enc.{l}");
            x = (&x + self.self_attention(&self.ln(&x, &format!("{b}.ln1"))?, &format!("{b}.attn"))?)?;
            x = (&x + self.mlp(&self.ln(&x, &format!("{b}.ln2"))?, &format!("{b}.mlp"))?)?;
            if keep.contains(&l) {
                outputs[l] = Some(x.clone());
            }
        }
        for &l in keep {
            kept.push(outputs[l].clone().expect("kept layer recorded"));
        }
        let last = self.ln(&x, "enc.ln")?;
        Ok((kept, last))
    }

    /// Source stream for cross-attention: bridged encoder features plus
    /// decoder positions, with the register token appended.
    pub fn source_stream(&self, enc: &Tensor) -> Result<Tensor> {
        let x = self.lin(enc, "bridge")?.broadcast_add(self.p.get("dec.pos")?)?;
        if self.cfg.use_register_token {
            let (b, _, d) = x.dims3()?;
            let reg = self.p.get("dec.register")?.reshape((1, 1, d))?.broadcast_as((b, 1, d))?;
            Ok(Tensor::cat(&[&x, &reg], 1)?)
        } else {
            Ok(x)
        }
    }

    /// Query stream for an unmasked view.
    pub fn query_stream(&self, enc: &Tensor) -> Result<Tensor> {
        Ok(self.lin(enc, "bridge")?.broadcast_add(self.p.get("dec.pos")?)?)
    }

    /// Query stream for a masked view: visible tokens (encoded, `(B, k, c)`,
    /// at `visible` flat positions) are scattered into a grid of mask tokens.
    pub fn masked_query_stream(&self, enc_visible: &Tensor, visible: &[u32], masked: &[bool]) -> Result<Tensor> {
        let (b, k, _) = enc_visible.dims3()?;
        let n = self.cfg.num_tokens();
        let d = self.cfg.dec_dim;
        let dtype = enc_visible.dtype();
        let proj = self.lin(enc_visible, "bridge")?.reshape((b * k, d))?;
        let flat_idx: Vec<u32> = visible
            .iter()
            .enumerate()
            .map(|(i, &pos)| (i / k * n) as u32 + pos)
            .collect();
        let idx = Tensor::from_vec(flat_idx, b * k, &Device::Cpu)?;
        let scattered = Tensor::zeros((b * n, d), dtype, &Device::Cpu)?.index_add(&idx, &proj, 0)?;
        let indicator: Vec<f32> = masked.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let indicator = Tensor::from_vec(indicator, (b * n, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let mask_tok = self.p.get("dec.mask_token")?.reshape((1, d))?;
        let x = (scattered + indicator.broadcast_mul(&mask_tok)?)?.reshape((b, n, d))?;
        Ok(x.broadcast_add(self.p.get("dec.pos")?)?)
    }

    /// Encodes the visible tokens of each sample and builds the masked
    /// decoder query stream. Every mask must hide the same number of tokens.
    pub fn masked_target(&self, patches: &Tensor, masks: &[&[bool]]) -> Result<Tensor> {
        let n = self.cfg.num_tokens();
        let b = masks.len();
        if masks.iter().any(|m| m.len() != n) {
            return Err(Error::Dimension(format!("masks must have {n} entries")));
        }
        let hidden = masks[0].iter().filter(|&&m| m).count();
        if masks.iter().any(|m| m.iter().filter(|&&v| v).count() != hidden) {
            return Err(Error::Contract("masks in a batch must hide equally many tokens".into()));
        }
        let flat: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
        if hidden == n {
            let d = self.cfg.dec_dim;
            let tok = self.p.get("dec.mask_token")?.reshape((1, 1, d))?.broadcast_as((b, n, d))?;
            return Ok(tok.broadcast_add(self.p.get("dec.pos")?)?);
        }
        let visible: Vec<u32> = masks
            .iter()
            .flat_map(|m| (0..n as u32).filter(move |&i| !m[i as usize]))
            .collect();
        let (_, enc) = self.encoder(self.embed_subset(patches, &visible)?, &[])?;
        self.masked_query_stream(&enc, &visible, &flat)
    }

    fn cross_attention(&self, x: &Tensor, y: &Tensor, name: &str) -> Result<(Tensor, LayerCapture)> {
        let d = x.dim(2)?;
        let q = self.lin(x, &format!("{name}.q"))?;
        let kv = self.lin(y, &format!("{name}.kv"))?;
        let k = kv.narrow(2, 0, d)?;
        let v = kv.narrow(2, d, d)?;
        let (out, logits, probs) = attend(&q, &k, &v, self.cfg.n_heads)?;
        let out = self.lin(&out, &format!("{name}.proj"))?;
        Ok((out, LayerCapture { logits, probs, q, k, v }))
    }

    /// Decoder blocks: self-attention, cross-attention to `y`, MLP.
    pub fn decoder(&self, mut x: Tensor, y: &Tensor, keep: &[usize], capture: bool) -> Result<DecoderOut> {
        check_layers(keep, self.cfg.dec_layers, "decoder")?;
        if x.dim(2)? != self.cfg.dec_dim || y.dim(2)? != self.cfg.dec_dim {
            return Err(Error::Dimension(format!(
                "decoder streams {:?}/{:?} need width {}",
                x.dims(),
                y.dims(),
                self.cfg.dec_dim
            )));
        }
        let mut outputs: Vec<Option<Tensor>> = vec![None; self.cfg.dec_layers];
        let mut captures = Vec::new();
        for l in 0..self.cfg.dec_layers {
            let b = format!("dec.{l}");
            x = (&x + self.self_attention(&self.ln(&x, &format!("{b}.ln1"))?, &format!("{b}.self"))?)?;
            let yn = self.ln(y, &format!("{b}.ln_kv"))?;
            let (ca, cap) = self.cross_attention(&self.ln(&x, &format!("{b}.ln_q"))?, &yn, &format!("{b}.cross"))?;
            x = (&x + ca)?;
            x = (&x + self.mlp(&self.ln(&x, &format!("{b}.ln3"))?, &format!("{b}.mlp"))?)?;
            if keep.contains(&l) {
                outputs[l] = Some(x.clone());
            }
            if capture {
                captures.push(cap);
            }
        }
        let kept = keep.iter().map(|&l| outputs[l].clone().expect("kept layer")).collect();
        let last = self.ln(&x, "dec.ln")?;
        Ok(DecoderOut { kept, last, captures })
    }

    /// Linear pixel head, `(B, hw, d) -> (B, hw, p*p*3)`, in input-normalized units.
    pub fn predict(&self, last: &Tensor) -> Result<Tensor> {
        self.lin(last, "head")
    }
}

fn check_layers(keep: &[usize], count: usize, what: &str) -> Result<()> {
    match keep.iter().find(|&&l| l >= count) {
        Some(l) => Err(Error::Range(format!("{what} layer {l} out of range 0..{count}"))),
        None => Ok(()),
    }
}

fn single(t: &Tensor) -> Result<Tensor> {
    Ok(t.unsqueeze(0)?)
}

/// Patch-embeds an image into a token grid of width `enc_dim`.
pub fn patchify(image: &Image, params: &ModelParams) -> Result<TokenGrid> {
    let net = Net::new(params);
    let patches = patch_batch(&[image], &params.config, params.dtype())?;
    let x = net.embed(&patches)?.squeeze(0)?;
    TokenGrid::new(x, params.config.grid(), false)
}

/// Runs the encoder on an embedded token grid, returning one grid per
/// requested block (raw block outputs, width `enc_dim`).
pub fn encode(tokens: &TokenGrid, params: &ModelParams, keep_layers: &[usize]) -> Result<Vec<TokenGrid>> {
    let net = Net::new(params);
    let (kept, _) = net.encoder(single(&tokens.tokens)?, keep_layers)?;
    kept.into_iter()
        .map(|t| TokenGrid::new(t.squeeze(0)?, tokens.grid, false))
        .collect()
}

/// Final (layer-normed) encoder features of an image.
pub fn encode_image(image: &Image, params: &ModelParams) -> Result<TokenGrid> {
    let net = Net::new(params);
    let patches = patch_batch(&[image], &params.config, params.dtype())?;
    let (_, last) = net.encoder(net.embed(&patches)?, &[])?;
    TokenGrid::new(last.squeeze(0)?, params.config.grid(), false)
}

/// Weights of one cross-attention layer, all `(in, out)` matrices.
pub struct CrossAttentionWeights<'a> {
    pub q: (&'a Tensor, &'a Tensor),
    pub kv: (&'a Tensor, &'a Tensor),
    pub proj: (&'a Tensor, &'a Tensor),
    pub n_heads: usize,
}

impl<'a> CrossAttentionWeights<'a> {
    pub fn from_layer(params: &'a ModelParams, layer: usize) -> Result<Self> {
        if layer >= params.config.dec_layers {
            return Err(Error::Range(format!("decoder layer {layer} out of range")));
        }
        let g = |s: &str| params.store.get(&format!("dec.{layer}.cross.{s}"));
        Ok(Self {
            q: (g("q.w")?, g("q.b")?),
            kv: (g("kv.w")?, g("kv.b")?),
            proj: (g("proj.w")?, g("proj.b")?),
            n_heads: params.config.n_heads,
        })
    }
}

/// Single cross-attention: queries from `query_feats`, keys/values from
/// `source_feats`. Returns the projected output and the attention record.
pub fn cross_attention(
    query_feats: &TokenGrid,
    source_feats: &TokenGrid,
    weights: &CrossAttentionWeights<'_>,
    layer: usize,
) -> Result<(TokenGrid, AttentionRecord)> {
    check_finite_tensor(&query_feats.tokens, "query features")?;
    check_finite_tensor(&source_feats.tokens, "source features")?;
    let d = query_feats.dim();
    let q = ops::linear(&single(&query_feats.tokens)?, weights.q.0, Some(weights.q.1))?;
    let kv = ops::linear(&single(&source_feats.tokens)?, weights.kv.0, Some(weights.kv.1))?;
    let k = kv.narrow(2, 0, d)?;
    let v = kv.narrow(2, d, d)?;
    let (out, logits, probs) = attend(&q, &k, &v, weights.n_heads)?;
    let out = ops::linear(&out, weights.proj.0, Some(weights.proj.1))?;
    let record = capture_record(
        &LayerCapture { logits, probs, q, k, v },
        0,
        layer,
        source_feats.has_register,
    )?;
    TokenGrid::new(out.squeeze(0)?, query_feats.grid, false).map(|g| (g, record))
}

fn check_finite_tensor(t: &Tensor, what: &str) -> Result<()> {
    let m: f64 = t.to_dtype(DType::F64)?.abs()?.max_all()?.to_scalar()?;
    if !m.is_finite() {
        return Err(Error::Numeric(format!("{what} contain NaN or infinity")));
    }
    Ok(())
}

pub(crate) fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?)
}

/// Converts batch element `index` of a layer capture into a record.
pub fn capture_record(cap: &LayerCapture, index: usize, layer: usize, has_register: bool) -> Result<AttentionRecord> {
    let (_, heads, nq, nk) = cap.logits.dims4()?;
    Ok(AttentionRecord {
        layer,
        n_heads: heads,
        n_query: nq,
        n_key: nk,
        dim: cap.q.dim(2)?,
        logits: to_f32_vec(&cap.logits.get(index)?)?,
        probs: to_f32_vec(&cap.probs.get(index)?)?,
        query: to_f32_vec(&cap.q.get(index)?)?,
        key: to_f32_vec(&cap.k.get(index)?)?,
        value: to_f32_vec(&cap.v.get(index)?)?,
        has_register,
    })
}

/// Runs the decoder with `target` as the query stream and `source_feats`
/// (encoder width) as the key/value stream.
///
/// `target` must already be in decoder width (use [`decoder_query`] or
/// [`masked_decoder_query`]). Returns the raw outputs of the requested
/// blocks and, when `record_attention` is set, one record per block.
pub fn decode(
    target: &TokenGrid,
    source_feats: &TokenGrid,
    params: &ModelParams,
    keep_layers: &[usize],
    record_attention: bool,
) -> Result<(Vec<TokenGrid>, Vec<AttentionRecord>)> {
    let net = Net::new(params);
    if source_feats.dim() != params.config.enc_dim {
        return Err(Error::Dimension(format!(
            "source features have width {}, expected encoder width {}",
            source_feats.dim(),
            params.config.enc_dim
        )));
    }
    let y = net.source_stream(&single(&source_feats.tokens)?)?;
    let out = net.decoder(single(&target.tokens)?, &y, keep_layers, record_attention)?;
    let grids = out
        .kept
        .into_iter()
        .map(|t| TokenGrid::new(t.squeeze(0)?, target.grid, false))
        .collect::<Result<Vec<_>>>()?;
    let records = out
        .captures
        .iter()
        .enumerate()
        .map(|(l, c)| capture_record(c, 0, l, params.config.use_register_token))
        .collect::<Result<Vec<_>>>()?;
    Ok((grids, records))
}

/// Decoder query stream of an unmasked view from its final encoder features.
pub fn decoder_query(enc: &TokenGrid, params: &ModelParams) -> Result<TokenGrid> {
    let net = Net::new(params);
    TokenGrid::new(net.query_stream(&single(&enc.tokens)?)?.squeeze(0)?, enc.grid, false)
}

/// Decoder query stream of a masked view: `mask[i]` true replaces token `i`
/// by the learned mask token. Only visible tokens go through the encoder.
pub fn masked_decoder_query(image: &Image, mask: &[bool], params: &ModelParams) -> Result<TokenGrid> {
    let net = Net::new(params);
    let patches = patch_batch(&[image], &params.config, params.dtype())?;
    let x = net.masked_target(&patches, &[mask])?;
    TokenGrid::new(x.squeeze(0)?, params.config.grid(), false)
}

/// Maps final decoder tokens to an image of head outputs. Values are in the
/// units the loss was trained in (pixels for plain MSE, per-patch
/// standardized values for the normalized loss) and are not clamped.
pub fn reconstruct_head(decoder_out: &TokenGrid, params: &ModelParams) -> Result<Image> {
    let net = Net::new(params);
    let last = net.ln(&single(&decoder_out.tokens)?, "dec.ln")?;
    unpatchify(&to_f32_vec(&net.predict(&last)?)?, &params.config)
}

/// Everything the correspondence pipeline needs from one image pair:
/// final encoder features of both views, final decoder features of the
/// forward (target queries source) and swapped passes, and their
/// cross-attention captures.
pub struct PairForward {
    pub enc_source: Tensor,
    pub enc_target: Tensor,
    pub dec_forward: Tensor,
    pub dec_swapped: Tensor,
    pub forward: Vec<LayerCapture>,
    pub swapped: Vec<LayerCapture>,
    pub enc_kept_target: Vec<Tensor>,
}

/// Batched unmasked forward of both directions; `capture` records every
/// cross-attention layer.
pub fn pair_forward_batch(
    params: &ModelParams,
    sources: &[&Image],
    targets: &[&Image],
    enc_keep: &[usize],
    capture: bool,
) -> Result<PairForward> {
    let net = Net::new(params);
    let dtype = params.dtype();
    let ps = patch_batch(sources, &params.config, dtype)?;
    let pt = patch_batch(targets, &params.config, dtype)?;
    let (_, enc_s) = net.encoder(net.embed(&ps)?, &[])?;
    let (enc_kept_target, enc_t) = net.encoder(net.embed(&pt)?, enc_keep)?;
    let fwd = net.decoder(net.query_stream(&enc_t)?, &net.source_stream(&enc_s)?, &[], capture)?;
    let swp = net.decoder(net.query_stream(&enc_s)?, &net.source_stream(&enc_t)?, &[], capture)?;
    Ok(PairForward {
        enc_source: enc_s,
        enc_target: enc_t,
        dec_forward: fwd.last,
        dec_swapped: swp.last,
        forward: fwd.captures,
        swapped: swp.captures,
        enc_kept_target,
    })
}

/// Unmasked two-direction forward of a single pair.
pub fn pair_forward(params: &ModelParams, source: &Image, target: &Image, enc_keep: &[usize]) -> Result<PairForward> {
    pair_forward_batch(params, &[source], &[target], enc_keep, true)
}
