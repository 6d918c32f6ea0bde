use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use log::info;

use xview::checkpoint::{load_checkpoint, save_checkpoint};
use xview::config::{load_kv, parse_kv, parse_list};
use xview::costvol::{CostOptions, SourceKind};
use xview::datagen::{generate_pair, write_dataset, BaseKind, JitterSpec, Manifest, PairSpec, SyntheticPair, TIERS};
use xview::eval::{ablation_csv, compare_sources, run_ablation, visualize};
use xview::flowhead::{finetune_mode, head_samples, train_head, FinetuneConfig, FlowHead, HeadConfig};
use xview::pretrain::{MetricsCsv, TrainConfig, Trainer};
use xview::{Error, FlowField, Image, ModelConfig, ModelParams, Result};

/// Overrides the directory relative output paths resolve against.
const OUT_DIR_ENV: &str = "XVIEW_OUT_DIR";

#[derive(Parser)]
#[command(name = "xview", version, about = "Cross-view completion pretraining and dense matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Settings {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single key=value override, applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a tiered synthetic dataset with a manifest
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        n_per_tier: usize,
        #[arg(long, default_value = "1,2,3,4,5")]
        tiers: String,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        no_jitter: bool,
        /// Directory of base images instead of procedural textures
        #[arg(long)]
        base_dir: Option<PathBuf>,
    },
    /// Cross-view completion pretraining
    Pretrain {
        #[arg(long)]
        ckpt: PathBuf,
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this step is reached
        #[arg(long)]
        until: Option<u64>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Zero-shot (or head) flow between two images
    Match {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained flow head to use instead of the zero-shot pipeline
        #[arg(long)]
        head: Option<PathBuf>,
        /// Also write a color-coded PNG of the flow
        #[arg(long)]
        png: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// AEPE per source and tier over a dataset manifest
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// "all" or a comma list of encoder_corr, decoder_corr, cross_attention
        #[arg(long, default_value = "all")]
        sources: String,
        #[arg(long, default_value = "report.csv")]
        report: PathBuf,
        /// Add the random-uniform-flow reference rows
        #[arg(long)]
        baseline: bool,
        /// Record wall-clock times instead of zeros
        #[arg(long)]
        timing: bool,
        /// Also run the seven-configuration cost ablation into this CSV
        #[arg(long)]
        ablation: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Train the aggregation and upsampling head on a frozen backbone
    TrainFlow {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training pairs; generated on the fly when absent
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        pairs: usize,
        #[arg(long, default_value_t = 11)]
        data_seed: u64,
        #[command(flatten)]
        settings: Settings,
    },
    /// End-to-end fine-tuning of the backbone's cross-attention matching
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        pairs: usize,
        #[arg(long, default_value_t = 11)]
        data_seed: u64,
        #[command(flatten)]
        settings: Settings,
    },
    /// Attention overlays, flow colors and the warped source for one query
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Target pixel as x,y
        #[arg(long)]
        query: String,
        #[arg(long, default_value = "viz")]
        out_dir: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
}

fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if p.is_relative() => Path::new(&dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn keys_of(kv_text: &str) -> Vec<String> {
    parse_kv(kv_text).map(|m| m.into_keys().collect()).unwrap_or_default()
}

/// File settings followed by `--set` overrides; unknown keys are rejected.
fn gather(settings: &Settings, known: &[String]) -> Result<IndexMap<String, String>> {
    let mut kv = match &settings.config {
        Some(p) => load_kv(p)?,
        None => IndexMap::new(),
    };
    for s in &settings.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    if let Some(k) = kv.keys().find(|k| !known.contains(k)) {
        return Err(Error::Config(format!("unknown setting {k:?}")));
    }
    Ok(kv)
}

fn cost_keys() -> Vec<String> {
    [
        "source_kind",
        "layer_select",
        "pairing",
        "normalize",
        "feature_normalize",
        "reciprocity",
        "suppress_register",
        "temperature",
        "dense_zoom_in",
        "zoom_window",
        "zoom_stride",
        "zoom_margin",
    ]
    .map(String::from)
    .to_vec()
}

fn cost_options(settings: &Settings) -> Result<CostOptions> {
    let kv = gather(settings, &cost_keys())?;
    let mut o = CostOptions::default();
    o.apply_kv(&kv)?;
    o.validate()?;
    Ok(o)
}

fn backbone(path: &Path) -> Result<ModelParams> {
    Ok(load_checkpoint(path, None)?.0)
}

fn load_pairs(manifest: Option<&Path>, n: usize, seed: u64, size: usize) -> Result<Vec<SyntheticPair>> {
    match manifest {
        Some(m) => {
            let m = Manifest::load(m)?;
            m.records.iter().map(|r| m.load_pair(r)).collect()
        }
        None => {
            let spec = PairSpec::training(size);
            (0..n as u64).map(|i| generate_pair(seed, i, &spec)).collect()
        }
    }
}

fn parse_sources(s: &str) -> Result<Vec<SourceKind>> {
    if s == "all" {
        return Ok(SourceKind::ALL.to_vec());
    }
    s.split(',').map(|k| k.trim().parse()).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, seed, n_per_tier, tiers, size, no_jitter, base_dir } => {
            let tiers: Vec<usize> = parse_list("tiers", &tiers)?;
            if let Some(t) = tiers.iter().find(|&&t| !(1..=TIERS).contains(&t)) {
                return Err(Error::Range(format!("tier {t} outside 1..={TIERS}")));
            }
            let base = base_dir.map_or(BaseKind::Procedural, BaseKind::Files);
            let jitter = if no_jitter { JitterSpec::none() } else { JitterSpec::default() };
            let path = write_dataset(&out_path(&out), seed, n_per_tier, &tiers, size, &base, &jitter)?;
            println!("{}", path.display());
        }
        Command::Pretrain { ckpt, resume, until, metrics, settings } => {
            let known: Vec<String> = keys_of(&ModelConfig::default().to_kv()).into_iter().chain(keys_of(&TrainConfig::default().to_kv())).collect();
            let kv = gather(&settings, &known)?;
            let mut trainer = match resume {
                Some(from) => {
                    let mut t = Trainer::resume(&from, None)?;
                    if !kv.is_empty() {
                        let mut cfg = t.config.clone();
                        cfg.apply_kv(&kv)?;
                        t = Trainer::resume(&from, Some(cfg))?;
                    }
                    t
                }
                None => {
                    let mut model = ModelConfig::default();
                    model.apply_kv(&kv)?;
                    let mut cfg = TrainConfig::default();
                    cfg.apply_kv(&kv)?;
                    Trainer::new(&model, cfg)?
                }
            };
            let mut log = metrics.map(|m| MetricsCsv::open(&out_path(&m))).transpose()?;
            let until = until.unwrap_or(trainer.config.steps);
            let every = (trainer.config.steps / 20).max(1);
            trainer.run(until, |m| {
                if let Some(l) = log.as_mut() {
                    l.write(m)?;
                }
                if (m.step + 1) % every == 0 {
                    info!("step {} loss {:.4} lr {:.2e}", m.step + 1, m.loss, m.lr);
                }
                Ok(())
            })?;
            trainer.save(&out_path(&ckpt))?;
            println!("step {}", trainer.params.step);
        }
        Command::Match { source, target, ckpt, out, head, png, settings } => {
            let opts = cost_options(&settings)?;
            let params = backbone(&ckpt)?;
            let (src, tgt) = (Image::load(&source)?, Image::load(&target)?);
            let flow: FlowField = match head {
                Some(h) => FlowHead::load(&h, Some(&params.config))?.predict(&params, &src, &tgt, &opts)?,
                None => xview::costvol::zero_shot_match(&params, &src, &tgt, &opts)?,
            };
            flow.write_flo(&out_path(&out))?;
            if let Some(p) = png {
                xview::flow::flow_to_color(&flow, None).save_png(&out_path(&p))?;
            }
        }
        Command::Eval { manifest, ckpt, sources, report, baseline, timing, ablation, settings } => {
            let opts = cost_options(&settings)?;
            let sources = parse_sources(&sources)?;
            let params = backbone(&ckpt)?;
            let r = compare_sources(&params, &manifest, &opts, &sources, baseline)?;
            let path = out_path(&report);
            std::fs::write(&path, r.to_csv(timing))?;
            info!("options {} checkpoint {} in {:.0} ms", r.options_fingerprint, r.checkpoint_hash, r.wall_ms);
            if let Some(a) = ablation {
                let m = Manifest::load(&manifest)?;
                let pairs = m.records.iter().map(|r| m.load_pair(r)).collect::<Result<Vec<_>>>()?;
                std::fs::write(out_path(&a), ablation_csv(&run_ablation(&params, &pairs, &opts)?))?;
            }
            println!("{}", path.display());
        }
        Command::TrainFlow { ckpt, out, manifest, pairs, data_seed, settings } => {
            let mut known = keys_of(&HeadConfig::default().to_kv());
            known.extend(cost_keys());
            let kv = gather(&settings, &known)?;
            let mut cfg = HeadConfig::default();
            cfg.apply_kv(&kv)?;
            let mut opts = CostOptions::default();
            opts.apply_kv(&kv)?;
            let params = backbone(&ckpt)?;
            let mut head = FlowHead::new(&params.config, cfg)?;
            let data = load_pairs(manifest.as_deref(), pairs, data_seed, params.config.image_size)?;
            let samples = head_samples(&params, &data, &head.config, &opts)?;
            train_head(&params, &mut head, &samples, |m| info!("stage {} epoch {} loss {:.4}", m.stage, m.epoch, m.loss))?;
            head.save(&out_path(&out))?;
        }
        Command::Finetune { ckpt, out, manifest, pairs, data_seed, settings } => {
            let kv = gather(&settings, &["epochs", "learning_rate", "batch_size", "temperature", "loss_kind", "seed"].map(String::from))?;
            let mut cfg = FinetuneConfig::default();
            cfg.apply_kv(&kv)?;
            let mut params = backbone(&ckpt)?;
            let data = load_pairs(manifest.as_deref(), pairs, data_seed, params.config.image_size)?;
            finetune_mode(&mut params, &data, &cfg, |m| info!("epoch {} loss {:.4}", m.epoch, m.loss))?;
            save_checkpoint(&params, None, &out_path(&out))?;
        }
        Command::Visualize { ckpt, source, target, query, out_dir, settings } => {
            let opts = cost_options(&settings)?;
            let q: Vec<f32> = parse_list("query", &query)?;
            if q.len() != 2 {
                return Err(Error::Config(format!("query {query:?} must be x,y")));
            }
            let params = backbone(&ckpt)?;
            let v = visualize(&params, &Image::load(&source)?, &Image::load(&target)?, (q[0], q[1]), &opts, &out_path(&out_dir))?;
            for (kind, path, (ax, ay)) in &v.heatmaps {
                println!("{kind} {} argmax {ax:.1},{ay:.1}", path.display());
            }
            println!("{}\n{}", v.flow.display(), v.warp.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(1)
        }
    }
}
