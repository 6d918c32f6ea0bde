//! Cross-view completion pretraining.
//!
//! Each step hides most target tokens, encodes the visible ones and the full
//! source view, and trains the decoder to reconstruct the hidden patches.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{get_adam, get_rng, put_adam, put_rng, Container};
use crate::config::{parse_kv, parse_value};
use crate::datagen::{generate_pair, BaseKind, JitterSpec, PairSpec, PerturbRanges, SyntheticPair};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{init_params, patch_batch, patch_values, ModelConfig, ModelParams, Net, RngState};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub mask: Vec<bool>,
    pub ratio: f64,
}

impl MaskSpec {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Hides exactly `round(ratio * hw)` tokens, drawn without replacement.
pub fn sample_mask(hw: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<MaskSpec> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let k = (ratio * hw as f64).round() as usize;
    let mut mask = vec![false; hw];
    for i in sample(rng, hw, k) {
        mask[i] = true;
    }
    Ok(MaskSpec { mask, ratio })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// MSE against targets standardized per patch.
    NormalizedMse,
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized_mse" => Ok(LossKind::NormalizedMse),
            "mse" => Ok(LossKind::Mse),
            _ => Err(Error::Config(format!("unknown loss_kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::NormalizedMse => "normalized_mse",
            LossKind::Mse => "mse",
        })
    }
}

/// Standardizes each patch vector to zero mean and unit variance.
pub fn normalize_patches(values: &mut [f32], patch_dim: usize) {
    for p in values.chunks_exact_mut(patch_dim) {
        let n = p.len() as f64;
        let mean = p.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for v in p {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// Set when the mask hid nothing and the loss is defined as zero.
    pub empty_mask: bool,
}

/// Mean squared error over masked patches. `pred` holds head outputs laid
/// out as an image (see [`crate::model::reconstruct_head`]).
pub fn reconstruction_loss(pred: &Image, target: &Image, mask: &MaskSpec, config: &ModelConfig, kind: LossKind) -> Result<LossValue> {
    let pd = config.patch_dim();
    let p = patch_values(pred, config)?;
    let mut t = patch_values(target, config)?;
    if mask.mask.len() != config.num_tokens() {
        return Err(Error::Dimension(format!("mask has {} entries for {} tokens", mask.mask.len(), config.num_tokens())));
    }
    if kind == LossKind::NormalizedMse {
        normalize_patches(&mut t, pd);
    }
    let masked: Vec<usize> = (0..mask.mask.len()).filter(|&i| mask.mask[i]).collect();
    if masked.is_empty() {
        log::warn!("reconstruction loss on an empty mask");
        return Ok(LossValue { loss: 0.0, empty_mask: true });
    }
    let mut acc = 0.0f64;
    for &i in &masked {
        let e: f64 = (0..pd).map(|k| (p[i * pd + k] as f64 - t[i * pd + k] as f64).powi(2)).sum();
        acc += e / pd as f64;
    }
    Ok(LossValue { loss: acc / masked.len() as f64, empty_mask: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub warmup_frac: f64,
    pub loss_kind: LossKind,
    pub max_perturb: f64,
    pub jitter: f32,
    pub base_dir: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 2e-3,
            weight_decay: 0.05,
            mask_ratio: 0.9,
            seed: 0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: 1.0,
            warmup_frac: 0.1,
            loss_kind: LossKind::NormalizedMse,
            max_perturb: 0.25,
            jitter: 0.1,
            base_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("learning_rate must be >= 0 and warmup_frac in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &IndexMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            match k.as_str() {
                "steps" => self.steps = parse_value(k, v)?,
                "batch_size" => self.batch_size = parse_value(k, v)?,
                "learning_rate" => self.learning_rate = parse_value(k, v)?,
                "weight_decay" => self.weight_decay = parse_value(k, v)?,
                "mask_ratio" => self.mask_ratio = parse_value(k, v)?,
                "seed" => self.seed = parse_value(k, v)?,
                "beta1" => self.beta1 = parse_value(k, v)?,
                "beta2" => self.beta2 = parse_value(k, v)?,
                "eps" => self.eps = parse_value(k, v)?,
                "grad_clip" => self.grad_clip = parse_value(k, v)?,
                "warmup_frac" => self.warmup_frac = parse_value(k, v)?,
                "loss_kind" => self.loss_kind = v.parse()?,
                "max_perturb" => self.max_perturb = parse_value(k, v)?,
                "jitter" => self.jitter = parse_value(k, v)?,
                "base_dir" => self.base_dir = (!v.is_empty()).then(|| v.clone()),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "steps={}\nbatch_size={}\nlearning_rate={}\nweight_decay={}\nmask_ratio={}\nseed={}\nbeta1={}\nbeta2={}\neps={}\ngrad_clip={}\nwarmup_frac={}\nloss_kind={}\nmax_perturb={}\njitter={}\nbase_dir={}\n",
            self.steps,
            self.batch_size,
            self.learning_rate,
            self.weight_decay,
            self.mask_ratio,
            self.seed,
            self.beta1,
            self.beta2,
            self.eps,
            self.grad_clip,
            self.warmup_frac,
            self.loss_kind,
            self.max_perturb,
            self.jitter,
            self.base_dir.as_deref().unwrap_or("")
        )
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }

    pub fn pair_spec(&self, size: usize) -> PairSpec {
        let j = self.jitter;
        PairSpec {
            size,
            ranges: PerturbRanges::uniform(self.max_perturb),
            jitter: JitterSpec { brightness: j, contrast: j, gamma: j, source: j > 0.0, target: j > 0.0 },
            base: self.base_dir.as_ref().map_or(BaseKind::Procedural, |d| BaseKind::Files(d.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Per-pair reconstruction targets for the masked tokens, `(M, patch_dim)`.
fn masked_targets(batch: &[SyntheticPair], masks: &[MaskSpec], config: &ModelConfig, kind: LossKind, dtype: DType) -> Result<(Tensor, Tensor)> {
    let pd = config.patch_dim();
    let n = config.num_tokens();
    let mut values = Vec::new();
    let mut index = Vec::new();
    for (b, (pair, mask)) in batch.iter().zip(masks).enumerate() {
        let mut t = patch_values(&pair.target, config)?;
        if kind == LossKind::NormalizedMse {
            normalize_patches(&mut t, pd);
        }
        for i in (0..n).filter(|&i| mask.mask[i]) {
            values.extend_from_slice(&t[i * pd..(i + 1) * pd]);
            index.push((b * n + i) as u32);
        }
    }
    let m = index.len();
    let values = Tensor::from_vec(values, (m, pd), &Device::Cpu)?.to_dtype(dtype)?;
    Ok((values, Tensor::from_vec(index, m, &Device::Cpu)?))
}

/// Differentiable batch loss: mean over all masked patches of the batch.
pub fn batch_loss(params: &ModelParams, batch: &[SyntheticPair], masks: &[MaskSpec], kind: LossKind) -> Result<Tensor> {
    let cfg = &params.config;
    if batch.is_empty() || batch.len() != masks.len() {
        return Err(Error::Contract(format!("{} pairs with {} masks", batch.len(), masks.len())));
    }
    let dtype = params.dtype();
    let net = Net::new(params);
    let sources: Vec<&Image> = batch.iter().map(|p| &p.source).collect();
    let targets: Vec<&Image> = batch.iter().map(|p| &p.target).collect();
    let ps = patch_batch(&sources, cfg, dtype)?;
    let pt = patch_batch(&targets, cfg, dtype)?;
    let mask_refs: Vec<&[bool]> = masks.iter().map(|m| m.mask.as_slice()).collect();
    let x = net.masked_target(&pt, &mask_refs)?;
    let (_, enc_s) = net.encoder(net.embed(&ps)?, &[])?;
    let y = net.source_stream(&enc_s)?;
    let dec = net.decoder(x, &y, &[], false)?;
    let pred = net.predict(&dec.last)?;
    let (targets, index) = masked_targets(batch, masks, cfg, kind, dtype)?;
    if index.dim(0)? == 0 {
        return Ok(Tensor::zeros((), dtype, &Device::Cpu)?);
    }
    let (b, n, pd) = pred.dims3()?;
    let sel = pred.reshape((b * n, pd))?.index_select(&index, 0)?;
    Ok((sel - targets)?.sqr()?.mean_all()?)
}

/// One optimizer step on a fixed batch and masks.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamW,
    batch: &[SyntheticPair],
    masks: &[MaskSpec],
    config: &TrainConfig,
    lr: f64,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let loss = batch_loss(params, batch, masks, config.loss_kind)?;
    let value: f64 = loss.to_dtype(DType::F64)?.to_scalar()?;
    if !value.is_finite() {
        return Err(Error::Training(format!("non-finite loss {value} at step {}", params.step)));
    }
    let grads = loss.backward()?;
    let grad_norm = opt.step(&params.store, &grads, lr, &|_| true)?;
    let metrics = StepMetrics {
        step: params.step,
        loss: value,
        grad_norm,
        lr,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    params.step += 1;
    Ok(metrics)
}

/// Stateful pretraining loop with resumable data and mask streams.
pub struct Trainer {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub opt: AdamW,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: &ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(model, config.seed)?;
        let rng = RngState::from_seed(config.seed ^ 0x5eed_da7a).restore();
        let opt = AdamW::new(config.adamw());
        Ok(Self { params, config, opt, rng })
    }

    pub fn from_params(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = params.rng.restore();
        let opt = AdamW::new(config.adamw());
        Ok(Self { params, config, opt, rng })
    }

    /// Draws the next batch and masks from the trainer's stream.
    pub fn next_batch(&mut self) -> Result<(Vec<SyntheticPair>, Vec<MaskSpec>)> {
        let spec = self.config.pair_spec(self.params.config.image_size);
        let mut batch = Vec::with_capacity(self.config.batch_size);
        let mut masks = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let seed: u64 = self.rng.random();
            batch.push(generate_pair(seed, 0, &spec)?);
            masks.push(sample_mask(self.params.config.num_tokens(), self.config.mask_ratio, &mut self.rng)?);
        }
        Ok((batch, masks))
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let (batch, masks) = self.next_batch()?;
        let lr = cosine_lr(self.config.learning_rate, self.params.step, self.config.steps, self.config.warmup_frac);
        let m = train_step(&mut self.params, &mut self.opt, &batch, &masks, &self.config, lr)?;
        self.params.rng = RngState::capture(&self.rng);
        Ok(m)
    }

    /// Runs until `params.step` reaches `until` (capped at `config.steps`).
    pub fn run(&mut self, until: u64, mut on_step: impl FnMut(&StepMetrics) -> Result<()>) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::new();
        while self.params.step < until.min(self.config.steps) {
            let m = self.step()?;
            on_step(&m)?;
            out.push(m);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::default();
        c.meta.insert("kind".into(), "backbone".into());
        c.meta.extend(parse_kv(&self.params.config.to_kv())?);
        c.meta.insert("step".into(), self.params.step.to_string());
        put_rng(&mut c.meta, "", &self.params.rng);
        for (k, v) in parse_kv(&self.config.to_kv())? {
            c.meta.insert(format!("train.{k}"), v);
        }
        c.insert_store("model.", &self.params.store)?;
        put_adam(&mut c, &self.opt.state);
        c.save(path)
    }

    /// Resumes from a checkpoint written by [`Trainer::save`]. The stored
    /// training config is used unless `config` overrides it.
    pub fn resume(path: &Path, config: Option<TrainConfig>) -> Result<Self> {
        let c = Container::load(path)?;
        let (params, _) = crate::checkpoint::backbone_from_container(&c, None)?;
        let config = match config {
            Some(cfg) => cfg,
            None => {
                let mut cfg = TrainConfig::default();
                let kv: IndexMap<String, String> = c
                    .meta
                    .iter()
                    .filter_map(|(k, v)| k.strip_prefix("train.").map(|s| (s.to_string(), v.clone())))
                    .collect();
                cfg.apply_kv(&kv)?;
                cfg
            }
        };
        let mut t = Trainer::from_params(params, config)?;
        t.rng = get_rng(&c, "")?.restore();
        if let Some(state) = get_adam(&c)? {
            t.opt.state = state;
        }
        Ok(t)
    }
}

/// Append-only `step,loss,grad_norm,wall_ms` log.
pub struct MetricsCsv {
    file: std::fs::File,
}

impl MetricsCsv {
    pub fn open(path: &Path) -> Result<Self> {
        let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if !exists {
            writeln!(file, "step,loss,grad_norm,wall_ms")?;
        }
        Ok(Self { file })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.file, "{},{:.6e},{:.6e},{:.3}", m.step, m.loss, m.grad_norm, m.wall_ms)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::stream_rng;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            enc_layers: 2,
            dec_layers: 2,
            enc_dim: 16,
            dec_dim: 12,
            n_heads: 2,
            mlp_ratio: 2.0,
            use_register_token: true,
            seed: 0,
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig { steps: 20, batch_size: 2, learning_rate: 1e-3, ..TrainConfig::default() }
    }

    #[test]
    fn mask_counts() {
        let mut rng = stream_rng(0, 0);
        assert_eq!(sample_mask(196, 0.9, &mut rng).unwrap().masked_count(), 176);
        assert_eq!(sample_mask(64, 0.5, &mut rng).unwrap().masked_count(), 32);
        let a = sample_mask(64, 0.75, &mut stream_rng(1, 1)).unwrap();
        let b = sample_mask(64, 0.75, &mut stream_rng(1, 1)).unwrap();
        assert_eq!(a, b);
        for r in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(sample_mask(64, r, &mut rng), Err(Error::Config(_))));
        }
    }

    #[test]
    fn loss_examples() {
        let cfg = ModelConfig { image_size: 4, patch_size: 2, ..tiny() };
        let target = Image::filled(4, 4, [0.2, 0.4, 0.6]);
        let none = MaskSpec { mask: vec![false; 4], ratio: 0.5 };
        let mut one = none.clone();
        one.mask[1] = true;
        assert_eq!(reconstruction_loss(&target, &target, &one, &cfg, LossKind::Mse).unwrap().loss, 0.0);
        let mut pred = target.clone();
        for y in 0..2 {
            for x in 2..4 {
                let p = pred.get(x, y);
                pred.set(x, y, p.map(|v| v + 0.5));
            }
        }
        let l = reconstruction_loss(&pred, &target, &one, &cfg, LossKind::Mse).unwrap().loss;
        assert!((l - 0.25).abs() < 1e-6, "{l}");
        let mut two = one.clone();
        two.mask[2] = true;
        let mut pred2 = pred.clone();
        for y in 2..4 {
            for x in 0..2 {
                let p = pred2.get(x, y);
                pred2.set(x, y, p.map(|v| v + 0.3));
            }
        }
        let l = reconstruction_loss(&pred2, &target, &two, &cfg, LossKind::Mse).unwrap().loss;
        assert!((l - 0.17).abs() < 1e-6, "{l}");
        let empty = reconstruction_loss(&pred, &target, &none, &cfg, LossKind::Mse).unwrap();
        assert!(empty.empty_mask && empty.loss == 0.0);
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = TrainConfig { steps: 7, loss_kind: LossKind::Mse, base_dir: Some("x".into()), ..TrainConfig::default() };
        let mut back = TrainConfig::default();
        back.apply_kv(&parse_kv(&cfg.to_kv()).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { mask_ratio: 1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut t = Trainer::new(&tiny(), TrainConfig { learning_rate: 0.0, ..tiny_train() }).unwrap();
        let before = t.params.store.deep_clone().unwrap();
        t.step().unwrap();
        assert!(t.params.store.bit_equal(&before).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut t = Trainer::new(&tiny(), tiny_train()).unwrap();
            t.run(5, |_| Ok(())).unwrap().iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batch_order_does_not_change_loss() {
        let mut t = Trainer::new(&tiny(), TrainConfig { batch_size: 3, ..tiny_train() }).unwrap();
        let (batch, masks) = t.next_batch().unwrap();
        let l1: f64 = batch_loss(&t.params, &batch, &masks, LossKind::NormalizedMse).unwrap().to_scalar::<f32>().unwrap() as f64;
        let rb: Vec<_> = batch.iter().rev().cloned().collect();
        let rm: Vec<_> = masks.iter().rev().cloned().collect();
        let l2: f64 = batch_loss(&t.params, &rb, &rm, LossKind::NormalizedMse).unwrap().to_scalar::<f32>().unwrap() as f64;
        assert!((l1 - l2).abs() <= 1e-6 * l1.abs(), "{l1} vs {l2}");
    }

    #[test]
    fn masked_pixels_do_not_leak() {
        let t = Trainer::new(&tiny(), tiny_train()).unwrap();
        let p = &t.params;
        let mut rng = stream_rng(3, 3);
        let pair = generate_pair(5, 0, &tiny_train().pair_spec(16)).unwrap();
        let mask = sample_mask(16, 0.75, &mut rng).unwrap();
        let mut noisy = pair.target.clone();
        for i in (0..16).filter(|&i| mask.mask[i]) {
            let (tx, ty) = (i % 4, i / 4);
            for y in 0..4 {
                for x in 0..4 {
                    noisy.set(tx * 4 + x, ty * 4 + y, [rng.random(), rng.random(), rng.random()]);
                }
            }
        }
        let src = crate::model::encode_image(&pair.source, p).unwrap();
        let a = crate::model::masked_decoder_query(&pair.target, &mask.mask, p).unwrap();
        let b = crate::model::masked_decoder_query(&noisy, &mask.mask, p).unwrap();
        let (da, _) = crate::model::decode(&a, &src, p, &[1], false).unwrap();
        let (db, _) = crate::model::decode(&b, &src, p, &[1], false).unwrap();
        let ra = crate::model::reconstruct_head(&da[0], p).unwrap();
        let rb = crate::model::reconstruct_head(&db[0], p).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { steps: 12, ..tiny_train() };
        let mut full = Trainer::new(&tiny(), cfg.clone()).unwrap();
        let all: Vec<u64> = full.run(12, |_| Ok(())).unwrap().iter().map(|m| m.loss.to_bits()).collect();
        let mut part = Trainer::new(&tiny(), cfg).unwrap();
        part.run(5, |_| Ok(())).unwrap();
        let path = dir.path().join("t.ckpt");
        part.save(&path).unwrap();
        drop(part);
        let mut resumed = Trainer::resume(&path, None).unwrap();
        let rest: Vec<u64> = resumed.run(12, |_| Ok(())).unwrap().iter().map(|m| m.loss.to_bits()).collect();
        assert_eq!(&all[5..], rest.as_slice());
    }

    #[test]
    fn metrics_csv_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = StepMetrics { step: 0, loss: 1.5, grad_norm: 0.25, lr: 1e-3, wall_ms: 12.0 };
        MetricsCsv::open(&path).unwrap().write(&m).unwrap();
        MetricsCsv::open(&path).unwrap().write(&StepMetrics { step: 1, ..m }).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("step,loss,grad_norm,wall_ms\n0,"));
    }
}
