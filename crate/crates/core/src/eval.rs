//! AEPE evaluation across matching sources and difficulty tiers, the
//! cost-volume ablation grid, and PNG visualizations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use crate::checkpoint::params_hash;
use crate::costvol::{dense_zoom_in, extract_features, matching_cost, token_flow, CostOptions, Normalize, SourceKind};
use crate::datagen::{stream_rng, Manifest, SyntheticPair};
use crate::error::{Error, Result};
use crate::flow::{flow_to_color, upsample_flow, warp_image, FlowField};
use crate::image::Image;
use crate::model::ModelParams;

/// Per-pixel end-point errors over valid pixels.
pub fn epe_values(pred: &FlowField, gt: &FlowField, valid: &[bool]) -> Result<Vec<f64>> {
    pred.check_same_shape(gt)?;
    if valid.len() != gt.len() {
        return Err(Error::Dimension(format!("{} validity entries for {} pixels", valid.len(), gt.len())));
    }
    let out: Vec<f64> = (0..gt.len())
        .filter(|&i| valid[i])
        .map(|i| {
            let du = pred.u[i] as f64 - gt.u[i] as f64;
            let dv = pred.v[i] as f64 - gt.v[i] as f64;
            (du * du + dv * dv).sqrt()
        })
        .collect();
    if out.is_empty() {
        return Err(Error::Metric("no valid pixels".into()));
    }
    Ok(out)
}

/// Average end-point error over valid pixels.
pub fn aepe(pred: &FlowField, gt: &FlowField, valid: &[bool]) -> Result<f64> {
    let e = epe_values(pred, gt, valid)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Flow sending every target pixel to an independent uniformly random
/// source location.
pub fn random_uniform_flow(width: usize, height: usize, seed: u64, index: u64) -> FlowField {
    let mut rng = stream_rng(seed ^ 0x7a2d, index);
    let mut f = FlowField::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            f.u[i] = rng.random_range(0.0..width as f32) - x as f32;
            f.v[i] = rng.random_range(0.0..height as f32) - y as f32;
        }
    }
    f
}

/// Label of the random-flow reference row.
pub const RANDOM_BASELINE: &str = "random_uniform";

/// Flows of every requested source for each pair, at the targets'
/// resolutions. The backbone runs once per pair.
pub fn source_flows(params: &ModelParams, pairs: &[&SyntheticPair], options: &CostOptions, sources: &[SourceKind]) -> Result<Vec<Vec<FlowField>>> {
    options.validate()?;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(16) {
        let refs: Vec<(&Image, &Image)> = chunk.iter().map(|p| (&p.source, &p.target)).collect();
        let feats = extract_features(params, &refs, &[])?;
        for (p, f) in chunk.iter().zip(&feats) {
            let (w, h) = (p.target.width(), p.target.height());
            let flows = sources
                .iter()
                .map(|&kind| {
                    let opts = options.with_source(kind);
                    let coarse = upsample_flow(&token_flow(f, &opts)?, w, h)?;
                    if opts.dense_zoom_in {
                        dense_zoom_in(params, &p.source, &p.target, &coarse, &opts)
                    } else {
                        Ok(coarse)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(flows);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub source_kind: String,
    pub tier: usize,
    pub n_pairs: usize,
    /// Mean over pairs of the per-pair AEPE.
    pub aepe_mean: f64,
    /// Median over all valid pixels of the cell.
    pub epe_median: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub options_fingerprint: String,
    pub checkpoint_hash: String,
    pub wall_ms: f64,
}

pub const CSV_HEADER: &str = "source_kind,tier,n_pairs,aepe_mean,epe_median,wall_ms";

/// Fixed-point rendering with six significant digits.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0.00000".into();
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.starts_with("-0") && s.trim_start_matches(['-', '0', '.']).is_empty() {
        s[1..].to_string()
    } else {
        s
    }
}

impl EvalReport {
    /// Report CSV. With `timing` off the wall-clock column is written as 0,
    /// so reruns on identical inputs produce identical bytes.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let wall = if timing { sig6(r.wall_ms) } else { "0".into() };
            writeln!(s, "{},{},{},{},{},{}", r.source_kind, r.tier, r.n_pairs, sig6(r.aepe_mean), sig6(r.epe_median), wall).expect("string write");
        }
        s
    }

    /// Mean AEPE over all pairs of one source, weighting tiers by pair count.
    pub fn mean_aepe(&self, source_kind: &str) -> Option<f64> {
        let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.source_kind == source_kind).collect();
        let n: usize = rows.iter().map(|r| r.n_pairs).sum();
        (n > 0).then(|| rows.iter().map(|r| r.aepe_mean * r.n_pairs as f64).sum::<f64>() / n as f64)
    }
}

/// AEPE of each source on in-memory pairs, one row per (source, tier), plus
/// the random-flow baseline when `baseline` is set.
pub fn evaluate_pairs(
    params: &ModelParams,
    pairs: &[SyntheticPair],
    options: &CostOptions,
    sources: &[SourceKind],
    baseline: bool,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("no pairs to evaluate".into()));
    }
    let start = Instant::now();
    let mut tiers: Vec<usize> = pairs.iter().map(|p| p.tier).collect();
    tiers.sort_unstable();
    tiers.dedup();
    let mut rows = Vec::new();
    let mut per_source: Vec<Vec<(f64, Vec<f64>, usize)>> = vec![Vec::new(); sources.len() + baseline as usize];
    let mut tier_ms = vec![0.0; tiers.len()];
    for (ti, &tier) in tiers.iter().enumerate() {
        let t0 = Instant::now();
        let cell: Vec<&SyntheticPair> = pairs.iter().filter(|p| p.tier == tier).collect();
        let flows = source_flows(params, &cell, options, sources)?;
        for (p, fl) in cell.iter().zip(&flows) {
            for (k, f) in fl.iter().enumerate() {
                let e = epe_values(f, &p.gt_flow, &p.gt_flow.valid)?;
                per_source[k].push((e.iter().sum::<f64>() / e.len() as f64, e, tier));
            }
        }
        if baseline {
            for (n, p) in cell.iter().enumerate() {
                let r = random_uniform_flow(p.target.width(), p.target.height(), tier as u64, n as u64);
                let e = epe_values(&r, &p.gt_flow, &p.gt_flow.valid)?;
                per_source[sources.len()].push((e.iter().sum::<f64>() / e.len() as f64, e, tier));
            }
        }
        tier_ms[ti] = t0.elapsed().as_secs_f64() * 1e3;
    }
    let labels: Vec<String> = sources.iter().map(|s| s.to_string()).chain(baseline.then(|| RANDOM_BASELINE.to_string())).collect();
    for (k, label) in labels.iter().enumerate() {
        for (ti, &tier) in tiers.iter().enumerate() {
            let cell: Vec<&(f64, Vec<f64>, usize)> = per_source[k].iter().filter(|c| c.2 == tier).collect();
            let mut pixels: Vec<f64> = cell.iter().flat_map(|c| c.1.iter().copied()).collect();
            rows.push(ReportRow {
                source_kind: label.clone(),
                tier,
                n_pairs: cell.len(),
                aepe_mean: cell.iter().map(|c| c.0).sum::<f64>() / cell.len() as f64,
                epe_median: median(&mut pixels),
                wall_ms: tier_ms[ti] / labels.len() as f64,
            });
        }
    }
    Ok(EvalReport {
        rows,
        options_fingerprint: options.fingerprint(),
        checkpoint_hash: params_hash(params)?,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// [`evaluate_pairs`] over the pairs of a dataset manifest. Missing files are
/// reported together.
pub fn compare_sources(params: &ModelParams, manifest: &Path, options: &CostOptions, sources: &[SourceKind], baseline: bool) -> Result<EvalReport> {
    let m = Manifest::load(manifest)?;
    if m.records.is_empty() {
        return Err(Error::Ingestion(format!("manifest {} lists no pairs", manifest.display())));
    }
    let missing: Vec<String> = m
        .records
        .iter()
        .flat_map(|r| [&r.source, &r.target, &r.flow, &r.valid])
        .map(|p| m.root.join(p))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Ingestion(format!("missing files: {}", missing.join(", "))));
    }
    let pairs = m.records.iter().map(|r| m.load_pair(r)).collect::<Result<Vec<_>>>()?;
    evaluate_pairs(params, &pairs, options, sources, baseline)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    pub normalize: Normalize,
    pub reciprocity: bool,
    pub dense_zoom_in: bool,
    pub aepe_mean: f64,
}

/// The seven cross-attention cost configurations I to VII: normalization
/// and reciprocity combinations, then reciprocity with dense zoom-in.
pub fn ablation_configs(base: &CostOptions) -> Vec<(&'static str, CostOptions)> {
    let rows: [(&str, Normalize, bool, bool); 7] = [
        ("I", Normalize::None, false, false),
        ("II", Normalize::None, true, false),
        ("III", Normalize::L2, false, false),
        ("IV", Normalize::Softmax, false, false),
        ("V", Normalize::L2, true, false),
        ("VI", Normalize::Softmax, true, false),
        ("VII", Normalize::None, true, true),
    ];
    rows.iter()
        .map(|&(label, normalize, reciprocity, zoom)| {
            let mut o = base.with_source(SourceKind::CrossAttention);
            o.normalize = normalize;
            o.reciprocity = reciprocity;
            o.dense_zoom_in = zoom;
            (label, o)
        })
        .collect()
}

/// Mean AEPE of every ablation configuration. Features are computed once
/// per pair; only row VII re-runs the backbone on zoomed crops.
pub fn run_ablation(params: &ModelParams, pairs: &[SyntheticPair], base: &CostOptions) -> Result<Vec<AblationRow>> {
    if pairs.is_empty() {
        return Err(Error::Contract("no pairs for the ablation".into()));
    }
    let configs = ablation_configs(base);
    let mut sums = vec![0.0f64; configs.len()];
    for chunk in pairs.chunks(16) {
        let refs: Vec<(&Image, &Image)> = chunk.iter().map(|p| (&p.source, &p.target)).collect();
        let feats = extract_features(params, &refs, &[])?;
        for (p, f) in chunk.iter().zip(&feats) {
            let (w, h) = (p.target.width(), p.target.height());
            for (k, (_, opts)) in configs.iter().enumerate() {
                opts.validate()?;
                let coarse = upsample_flow(&token_flow(f, opts)?, w, h)?;
                let flow = if opts.dense_zoom_in { dense_zoom_in(params, &p.source, &p.target, &coarse, opts)? } else { coarse };
                sums[k] += aepe(&flow, &p.gt_flow, &p.gt_flow.valid)?;
            }
        }
    }
    Ok(configs
        .into_iter()
        .zip(sums)
        .map(|((label, o), s)| AblationRow {
            label,
            normalize: o.normalize,
            reciprocity: o.reciprocity,
            dense_zoom_in: o.dense_zoom_in,
            aepe_mean: s / pairs.len() as f64,
        })
        .collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("config,normalize,reciprocity,dense_zoom_in,aepe_mean\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.label, r.normalize, r.reciprocity, r.dense_zoom_in, sig6(r.aepe_mean)).expect("string write");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Visualization {
    /// Attended-region overlay per source, with the source-frame argmax.
    pub heatmaps: Vec<(SourceKind, PathBuf, (f32, f32))>,
    pub flow: PathBuf,
    pub warp: PathBuf,
}

fn dot(img: &mut Image, cx: f32, cy: f32, rgb: [f32; 3]) {
    let r = (img.width().min(img.height()) as f32 / 40.0).max(1.5);
    let (w, h) = (img.width() as i64, img.height() as i64);
    for y in (cy - r).floor() as i64..=(cy + r).ceil() as i64 {
        for x in (cx - r).floor() as i64..=(cx + r).ceil() as i64 {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            if (0..w).contains(&x) && (0..h).contains(&y) && dx * dx + dy * dy <= r * r {
                img.set(x as usize, y as usize, rgb);
            }
        }
    }
}

/// Cost row of one target query rescaled to `[0, 1]`.
pub fn display_row(row: &[f32]) -> Vec<f32> {
    let lo = row.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    row.iter().map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect()
}

/// Writes, for a target query pixel, one attended-region overlay per source
/// (heat over the source view, query in blue, argmax in red), the color
/// coded zero-shot flow, and the warped source next to the target.
pub fn visualize(
    params: &ModelParams,
    source: &Image,
    target: &Image,
    query: (f32, f32),
    options: &CostOptions,
    out_dir: &Path,
) -> Result<Visualization> {
    let (w, h) = (target.width(), target.height());
    let (qx, qy) = query;
    if !(qx >= 0.0 && qy >= 0.0 && qx < w as f32 && qy < h as f32) {
        return Err(Error::Range(format!("query ({qx}, {qy}) outside the {w}x{h} target")));
    }
    options.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let feats = extract_features(params, &[(source, target)], &[])?.remove(0);
    let (gh, gw) = params.config.grid();
    let qi = ((qy * gh as f32 / h as f32) as usize).min(gh - 1) * gw + ((qx * gw as f32 / w as f32) as usize).min(gw - 1);
    let src = source.resize(w, h);
    let mut heatmaps = Vec::new();
    for kind in SourceKind::ALL {
        let cost = matching_cost(&feats, &options.with_source(kind))?;
        let (sh, sw) = cost.source_grid;
        let heat = display_row(cost.row(qi));
        let best = cost.argmax_rows()[qi];
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let j = ((y * sh) / h) * sw + (x * sw) / w;
                let s = src.get(x, y);
                let a = heat[j];
                img.set(x, y, [0.4 * s[0] + 0.6 * a, 0.4 * s[1] + 0.3 * a, 0.4 * s[2]]);
            }
        }
        let ax = ((best % sw) as f32 + 0.5) * w as f32 / sw as f32;
        let ay = ((best / sw) as f32 + 0.5) * h as f32 / sh as f32;
        dot(&mut img, qx, qy, [0.0, 0.0, 1.0]);
        dot(&mut img, ax, ay, [1.0, 0.0, 0.0]);
        let path = out_dir.join(format!("attention_{kind}.png"));
        img.save_png(&path)?;
        heatmaps.push((kind, path, (ax, ay)));
    }
    let coarse = upsample_flow(&token_flow(&feats, options)?, w, h)?;
    let flow = if options.dense_zoom_in { dense_zoom_in(params, source, target, &coarse, options)? } else { coarse };
    let flow_path = out_dir.join("flow.png");
    flow_to_color(&flow, None).save_png(&flow_path)?;
    let (warped, _) = warp_image(&src, &flow)?;
    let warp_path = out_dir.join("warp.png");
    warped.hconcat(target)?.save_png(&warp_path)?;
    Ok(Visualization { heatmaps, flow: flow_path, warp: warp_path })
}
