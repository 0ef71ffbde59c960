//! Experiment orchestration: configuration, leave-one-group-out runs over
//! seeds, fraction sweeps and report aggregation.
//!
//! Output layout of one run:
//!
//! ```text
//! {output_dir}/{dataset}_{method}_t{target}_f{fraction}_{digest12}/
//!     record.json
//!     seed{n}/history.jsonl
//!     seed{n}/model.ckpt
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationConfig;
use crate::checkpoint;
use crate::data::DomainDataset;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::HeadsConfig;
use crate::ingest::{self, DatasetManifest, SynthSpec};
use crate::meta::{self, EpochRecord, MetaConfig, TrainConfig, TrainOutcome};
use crate::model::{self, ModelConfig, ModelState};
use crate::rng::RngHandle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Taco,
    Erm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Taco => "taco",
            Method::Erm => "erm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "taco" => Some(Method::Taco),
            "erm" => Some(Method::Erm),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Canonical dataset directory; the synthetic generator is used when unset.
    pub dataset_path: Option<PathBuf>,
    pub synth: SynthSpec,
    /// Subject group sizes; one group per subject when unset.
    pub group_sizes: Option<Vec<usize>>,
    pub grouping_seed: u64,
    pub target_group: usize,
    pub train_fraction: f64,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    /// Augmented views per sample for the ERM baseline.
    pub erm_views_per_sample: usize,
    pub augment: AugmentationConfig,
    /// `window_len` and `channels` are taken from the dataset.
    pub encoder: EncoderConfig,
    pub heads: HeadsConfig,
    pub meta: MetaConfig,
    pub output_dir: PathBuf,
    pub save_checkpoints: bool,
    /// Also checkpoint every `k` epochs during training.
    pub checkpoint_every: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_path: None,
            synth: SynthSpec::default(),
            group_sizes: None,
            grouping_seed: 0,
            target_group: 0,
            train_fraction: 1.0,
            method: Method::Taco,
            seeds: vec![1, 2, 3],
            precision: Precision::F32,
            erm_views_per_sample: 0,
            augment: AugmentationConfig::default(),
            encoder: EncoderConfig::default(),
            heads: HeadsConfig::default(),
            meta: MetaConfig::default(),
            output_dir: PathBuf::from("runs"),
            save_checkpoints: true,
            checkpoint_every: None,
        }
    }
}

impl RunConfig {
    /// Small network and schedule for the synthetic benchmark.
    pub fn desk_synth() -> Self {
        Self {
            encoder: EncoderConfig {
                window_len: 32,
                channels: 6,
                patch_len: 8,
                stride: 4,
                n_layers: 1,
                n_heads: 2,
                latent_dim: 16,
                ff_dim: 32,
                dropout: 0.1,
                conv_kernel: 8,
                conv_out_channels: 16,
                ..EncoderConfig::default()
            },
            heads: HeadsConfig {
                proj_width: 32,
                cls_widths: vec![32, 32],
                ..HeadsConfig::default()
            },
            meta: MetaConfig {
                batch_size: 60,
                max_epochs: 40,
                outer_lr: 0.01,
                ..MetaConfig::default()
            },
            ..Self::default()
        }
    }

    /// Hex SHA-256 of the canonical JSON form (object keys sorted).
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config(format!("train_fraction must lie in (0, 1], got {}", self.train_fraction)));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if let Some(p) = &self.dataset_path {
            if !p.is_dir() {
                return Err(Error::config(format!("dataset_path {} is not a directory", p.display())));
            }
        } else {
            self.synth.validate()?;
        }
        self.heads.validate()?;
        Ok(())
    }
}

/// Dataset, grouped into domains, with the model shape it implies.
pub struct PreparedData {
    pub manifest: DatasetManifest,
    pub domains: Vec<DomainDataset>,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (manifest, subjects) = match &cfg.dataset_path {
        Some(p) => ingest::load_dataset(p)?,
        None => ingest::synth_domains(&cfg.synth)?,
    };
    let ids: Vec<String> = subjects.iter().map(|d| d.domain.as_str().to_string()).collect();
    let plan = match &cfg.group_sizes {
        Some(sizes) => ingest::build_groups(&ids, sizes, &mut RngHandle::stream(cfg.grouping_seed, 0x6e0))?,
        None => ingest::singleton_groups(&ids),
    };
    ingest::lodo_splits(&plan)?;
    Ok(PreparedData {
        domains: ingest::group_domains(&subjects, &plan)?,
        manifest,
    })
}

/// Model, optimiser and augmentation settings for `cfg` on `manifest`.
pub fn train_config(cfg: &RunConfig, manifest: &DatasetManifest, seed: u64) -> Result<TrainConfig> {
    let mut encoder = cfg.encoder.clone();
    encoder.window_len = manifest.window_length;
    encoder.channels = manifest.num_channels;
    let mut augment = cfg.augment.clone();
    if augment.triad_channel_groups.is_empty() {
        augment.triad_channel_groups = manifest.triad_channel_groups.clone();
    }
    augment.validate(manifest.window_length, manifest.num_channels)?;
    let mut meta = cfg.meta.clone();
    meta.seed = seed;
    if cfg.method == Method::Erm {
        meta.beta = 0.0;
        meta.views_per_sample = cfg.erm_views_per_sample;
    }
    let tc = TrainConfig {
        model: ModelConfig {
            encoder,
            heads: cfg.heads.clone(),
            num_classes: manifest.num_classes,
        },
        meta,
        augment,
    };
    tc.model.validate()?;
    Ok(tc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
    pub epochs: usize,
    /// Paths relative to the run directory.
    pub history: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_digest: String,
    pub dataset: String,
    pub method: Method,
    pub train_fraction: f64,
    pub target_group: usize,
    pub seeds: Vec<SeedResult>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// True when at least one seed failed.
    pub partial: bool,
    pub wallclock_s: f64,
    pub config: RunConfig,
}

impl ExperimentRecord {
    pub fn accuracies(&self) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| s.accuracy).collect()
    }
}

/// Mean and sample (`n − 1`) standard deviation; the deviation of a single
/// value is 0.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

pub fn run_dir_name(cfg: &RunConfig, dataset: &str) -> String {
    format!(
        "{dataset}_{}_t{}_f{:.2}_{}",
        cfg.method.name(),
        cfg.target_group,
        cfg.train_fraction,
        &cfg.digest()[..12]
    )
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

struct History {
    file: fs::File,
    path: PathBuf,
}

impl History {
    fn create(path: PathBuf) -> Result<Self> {
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { file, path })
    }

    fn append(&mut self, rec: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

fn run_seed(
    cfg: &RunConfig,
    data: &PreparedData,
    seed: u64,
    seed_dir: &Path,
    digest: &str,
) -> Result<(f64, TrainOutcome)> {
    let tc = train_config(cfg, &data.manifest, seed)?;
    let sources: Vec<DomainDataset> = data
        .domains
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != cfg.target_group)
        .map(|(_, d)| d.clone())
        .collect();
    let target = &data.domains[cfg.target_group];
    let sources = ingest::subsample(&sources, cfg.train_fraction, data.manifest.num_classes, seed)?;
    fs::create_dir_all(seed_dir).map_err(|e| Error::io(seed_dir, e))?;
    let mut history = History::create(seed_dir.join("history.jsonl"))?;
    let mut observer = |rec: &EpochRecord, state: &ModelState<f64>| -> Result<()> {
        history.append(rec)?;
        if let Some(k) = cfg.checkpoint_every.filter(|&k| k > 0) {
            if (rec.epoch + 1) % k == 0 {
                let p = seed_dir.join(format!("epoch{:04}.ckpt", rec.epoch + 1));
                checkpoint::save(&p, state, digest, Some(&tc.model), Some(rec.epoch + 1))?;
            }
        }
        Ok(())
    };
    let outcome = match (cfg.method, cfg.precision) {
        (Method::Taco, Precision::F32) => meta::train::<f32>(&sources, &tc, &mut observer)?,
        (Method::Taco, Precision::F64) => meta::train::<f64>(&sources, &tc, &mut observer)?,
        (Method::Erm, p) => {
            let pooled = meta::pool(&sources, "pooled");
            match p {
                Precision::F32 => meta::train_erm::<f32>(&pooled, &tc, &mut observer)?,
                Precision::F64 => meta::train_erm::<f64>(&pooled, &tc, &mut observer)?,
            }
        }
    };
    let acc = model::accuracy(&outcome.state, &tc.model, &target.samples)?;
    if cfg.save_checkpoints {
        checkpoint::save(&seed_dir.join("model.ckpt"), &outcome.state, digest, Some(&tc.model), Some(outcome.history.len()))?;
    }
    Ok((acc, outcome))
}

/// Trains and evaluates one configuration for every seed, writing the run
/// directory and returning its record. Seed failures are recorded rather
/// than propagated; configuration and data errors abort the run.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentRecord> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    if cfg.target_group >= data.domains.len() {
        return Err(Error::config(format!(
            "target_group {} out of range for {} groups",
            cfg.target_group,
            data.domains.len()
        )));
    }
    train_config(cfg, &data.manifest, 0)?;
    let digest = cfg.digest();
    let run_dir = cfg.output_dir.join(run_dir_name(cfg, &data.manifest.name));
    let start = Instant::now();
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let t0 = Instant::now();
        let rel = PathBuf::from(format!("seed{seed}"));
        let result = run_seed(cfg, &data, seed, &run_dir.join(&rel), &digest);
        let wallclock_s = t0.elapsed().as_secs_f64();
        seeds.push(match result {
            Ok((acc, outcome)) => {
                log::info!("seed {seed}: target accuracy {acc:.4}");
                SeedResult {
                    seed,
                    accuracy: Some(acc),
                    error: None,
                    epochs: outcome.history.len(),
                    history: Some(rel.join("history.jsonl")),
                    checkpoint: cfg.save_checkpoints.then(|| rel.join("model.ckpt")),
                    wallclock_s,
                }
            }
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                SeedResult {
                    seed,
                    accuracy: None,
                    error: Some(e.to_string()),
                    epochs: 0,
                    history: None,
                    checkpoint: None,
                    wallclock_s,
                }
            }
        });
    }
    let accs: Vec<f64> = seeds.iter().filter_map(|s| s.accuracy).collect();
    let ms = mean_std(&accs);
    let record = ExperimentRecord {
        config_digest: digest,
        dataset: data.manifest.name.clone(),
        method: cfg.method,
        train_fraction: cfg.train_fraction,
        target_group: cfg.target_group,
        partial: accs.len() < seeds.len(),
        seeds,
        mean: ms.map(|m| m.0),
        std: ms.map(|m| m.1),
        wallclock_s: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    write_json(&run_dir.join("record.json"), &record)?;
    Ok(record)
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx)?;
    let (my, _) = mean_std(&ry)?;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: Method,
    pub fraction: f64,
    pub target_group: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub error: Option<String>,
    pub partial: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub fractions: Vec<f64>,
    pub targets: Vec<usize>,
    pub methods: Vec<Method>,
    pub cells: Vec<SweepCell>,
    /// Per method, mean over targets of each fraction's accuracy.
    pub curves: BTreeMap<Method, Vec<Option<f64>>>,
    /// Per method, rank correlation of fraction and accuracy.
    pub spearman: BTreeMap<Method, Option<f64>>,
}

/// Runs every (method, fraction, target) combination of `base` and writes
/// `sweep.csv`, `sweep.json` and `accuracy_vs_fraction.svg` into
/// `{output_dir}/sweep`.
pub fn sweep(base: &RunConfig, fractions: &[f64], targets: &[usize], methods: &[Method]) -> Result<SweepReport> {
    if fractions.is_empty() || targets.is_empty() || methods.is_empty() {
        return Err(Error::config("sweep needs at least one fraction, target and method"));
    }
    let mut cells = Vec::new();
    for &method in methods {
        for &fraction in fractions {
            for &target in targets {
                let cfg = RunConfig {
                    method,
                    train_fraction: fraction,
                    target_group: target,
                    ..base.clone()
                };
                let cell = match run_experiment(&cfg) {
                    Ok(r) => SweepCell {
                        method,
                        fraction,
                        target_group: target,
                        mean: r.mean,
                        std: r.std,
                        error: None,
                        partial: r.partial,
                    },
                    Err(e @ Error::Config(_)) => return Err(e),
                    Err(e) => SweepCell {
                        method,
                        fraction,
                        target_group: target,
                        mean: None,
                        std: None,
                        error: Some(e.to_string()),
                        partial: true,
                    },
                };
                cells.push(cell);
            }
        }
    }
    let mut curves = BTreeMap::new();
    let mut rho = BTreeMap::new();
    for &m in methods {
        let curve: Vec<Option<f64>> = fractions
            .iter()
            .map(|&f| {
                let v: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.method == m && c.fraction == f)
                    .filter_map(|c| c.mean)
                    .collect();
                mean_std(&v).map(|s| s.0)
            })
            .collect();
        let (xs, ys): (Vec<f64>, Vec<f64>) = fractions
            .iter()
            .zip(&curve)
            .filter_map(|(f, a)| a.map(|a| (*f, a)))
            .unzip();
        rho.insert(m, spearman(&xs, &ys));
        curves.insert(m, curve);
    }
    let report = SweepReport {
        fractions: fractions.to_vec(),
        targets: targets.to_vec(),
        methods: methods.to_vec(),
        cells,
        curves,
        spearman: rho,
    };
    let dir = base.output_dir.join("sweep");
    write_json(&dir.join("sweep.json"), &report)?;
    let mut csv = String::from("fraction");
    for m in methods {
        write!(csv, ",{}", m.name()).expect("string write");
    }
    csv.push('\n');
    for (i, f) in fractions.iter().enumerate() {
        write!(csv, "{f}").expect("string write");
        for m in methods {
            match report.curves[m][i] {
                Some(a) => write!(csv, ",{a:.6}"),
                None => write!(csv, ",NA"),
            }
            .expect("string write");
        }
        csv.push('\n');
    }
    let p = dir.join("sweep.csv");
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    let series: Vec<(String, Vec<(f64, f64)>)> = methods
        .iter()
        .map(|m| {
            let pts = fractions
                .iter()
                .zip(&report.curves[m])
                .filter_map(|(f, a)| a.map(|a| (*f, a)))
                .collect();
            (m.name().to_string(), pts)
        })
        .collect();
    let p = dir.join("accuracy_vs_fraction.svg");
    fs::write(&p, line_plot_svg("Target accuracy vs. training fraction", &series)).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Accuracy-vs-fraction line chart; x and y both span `[0, 1]`.
pub fn line_plot_svg(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, left, right, top, bottom) = (560.0, 380.0, 60.0, 130.0, 40.0, 50.0);
    let px = |x: f64| left + x * (w - left - right);
    let py = |y: f64| h - bottom - y * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(s, r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#ddd"/>"##, px(0.0), py(v), px(1.0), py(v));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, px(0.0) - 6.0, py(v) + 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v:.1}</text>"#, px(v), py(0.0) + 18.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">training fraction</text>"#, px(0.5), h - 8.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">accuracy</text>"#, py(0.5), py(0.5));
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.1},{:.1}", px(*x), py(*y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for (x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(*x), py(*y));
        }
        let ly = top + 20.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - right + 15.0, w - right + 35.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{name}</text>"#, w - right + 40.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub method: Method,
    pub train_fraction: f64,
    pub target_group: usize,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub skipped: Vec<String>,
}

impl Report {
    pub fn table(&self) -> String {
        let mut s = format!("{:<14} {:<6} {:>8} {:>6} {:>3} {:>9} {:>8}\n", "dataset", "method", "fraction", "target", "n", "mean", "std");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:<6} {:>8.2} {:>6} {:>3} {:>9.4} {:>8.4}",
                r.dataset,
                r.method.name(),
                r.train_fraction,
                r.target_group,
                r.n,
                r.mean,
                r.std
            );
        }
        s
    }
}

/// Aggregates every `record.json` below `dir` by (dataset, method,
/// fraction, target), pooling per-seed accuracies, and writes
/// `results.csv`, `results.json` and `accuracy_vs_fraction.svg` into `dir`.
pub fn report(dir: &Path) -> Result<Report> {
    if !dir.is_dir() {
        return Err(Error::config(format!("{} is not a directory", dir.display())));
    }
    type Key = (String, Method, u64, usize);
    let mut groups: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                skipped.push(e.to_string());
                continue;
            }
        };
        if entry.file_name() != "record.json" {
            continue;
        }
        let parsed = fs::read_to_string(entry.path())
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<ExperimentRecord>(&t).map_err(|e| e.to_string()));
        match parsed {
            Ok(r) => groups
                .entry((r.dataset.clone(), r.method, r.train_fraction.to_bits(), r.target_group))
                .or_default()
                .extend(r.accuracies()),
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.path().display());
                skipped.push(entry.path().display().to_string());
            }
        }
    }
    let rows: Vec<ReportRow> = groups
        .into_iter()
        .filter_map(|((dataset, method, f, target_group), accs)| {
            mean_std(&accs).map(|(mean, std)| ReportRow {
                dataset,
                method,
                train_fraction: f64::from_bits(f),
                target_group,
                n: accs.len(),
                mean,
                std,
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Empty(format!("no readable experiment records under {}", dir.display())));
    }
    let report = Report { rows, skipped };
    write_json(&dir.join("results.json"), &report)?;
    let mut csv = String::from("dataset,method,fraction,target,n,mean,std\n");
    for r in &report.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{:.6},{:.6}",
            r.dataset,
            r.method.name(),
            r.train_fraction,
            r.target_group,
            r.n,
            r.mean,
            r.std
        );
    }
    let p = dir.join("results.csv");
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    let mut series: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in &report.rows {
        series
            .entry(format!("{} {}", r.dataset, r.method.name()))
            .or_default()
            .entry(r.train_fraction.to_bits())
            .or_default()
            .push(r.mean);
    }
    let series: Vec<(String, Vec<(f64, f64)>)> = series
        .into_iter()
        .map(|(name, pts)| {
            let pts = pts
                .into_iter()
                .map(|(f, v)| (f64::from_bits(f), v.iter().sum::<f64>() / v.len() as f64))
                .collect();
            (name, pts)
        })
        .collect();
    let p = dir.join("accuracy_vs_fraction.svg");
    fs::write(&p, line_plot_svg("Target accuracy vs. training fraction", &series)).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}
