//! Canonical dataset layout, subject grouping, leave-one-group-out splits,
//! low-resource subsampling and a synthetic multi-domain generator.
//!
//! A dataset directory holds `manifest.json` plus one header-free CSV per
//! window (`L` rows × `M` comma-separated reals) named
//! `{subject}_{index}_{label}.csv`. Manifest keys:
//!
//! | key                    | type                               |
//! |------------------------|------------------------------------|
//! | `name`                 | string                             |
//! | `sample_rate_hz`       | number                             |
//! | `window_length`        | integer `L`                        |
//! | `num_channels`         | integer `M`                        |
//! | `num_classes`          | integer `C`                        |
//! | `channel_names`        | `M` strings (may be empty)         |
//! | `triad_channel_groups` | list of `[a, b, c]` channel indices |
//! | `subjects`             | list of `{subject_id, files}`      |
//! | `activity_names`       | `C` strings (may be empty)         |

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{random_rotation, rotate_with, Rotation};
use crate::data::{validate_dataset, DomainDataset, DomainId, LabeledSample, ShapeSpec, TimeSeriesWindow};
use crate::error::{Error, Result};
use crate::rng::RngHandle;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub sample_rate_hz: f64,
    pub window_length: usize,
    pub num_channels: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub channel_names: Vec<String>,
    #[serde(default)]
    pub triad_channel_groups: Vec<[usize; 3]>,
    pub subjects: Vec<SubjectEntry>,
    #[serde(default)]
    pub activity_names: Vec<String>,
}

impl DatasetManifest {
    pub fn shape(&self) -> ShapeSpec {
        ShapeSpec {
            window_len: self.window_length,
            channels: self.num_channels,
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(format!("manifest: {m}")));
        if self.window_length == 0 || self.num_channels == 0 || self.num_classes == 0 {
            return bad("window_length, num_channels and num_classes must be positive".into());
        }
        if !(self.sample_rate_hz > 0.0) {
            return bad(format!("sample_rate_hz must be positive, got {}", self.sample_rate_hz));
        }
        if !self.channel_names.is_empty() && self.channel_names.len() != self.num_channels {
            return bad(format!("{} channel names for {} channels", self.channel_names.len(), self.num_channels));
        }
        if !self.activity_names.is_empty() && self.activity_names.len() != self.num_classes {
            return bad(format!("{} activity names for {} classes", self.activity_names.len(), self.num_classes));
        }
        let mut seen = vec![false; self.num_channels];
        for t in &self.triad_channel_groups {
            for &c in t {
                if c >= self.num_channels || seen[c] {
                    return bad(format!("triad {t:?} has an invalid or repeated channel"));
                }
                seen[c] = true;
            }
        }
        let mut ids: Vec<&str> = self.subjects.iter().map(|s| s.subject_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate subject_id".into());
        }
        if ids.iter().any(|id| id.is_empty() || id.contains(['/', '\\'])) {
            return bad("subject ids must be non-empty and contain no path separators".into());
        }
        Ok(())
    }
}

/// `(subject, index, label)` from `{subject}_{index}_{label}.csv`.
pub fn parse_file_name(name: &str) -> Option<(String, usize, usize)> {
    let stem = name.strip_suffix(".csv")?;
    let mut parts = stem.rsplitn(3, '_');
    let label = parts.next()?.parse().ok()?;
    let index = parts.next()?.parse().ok()?;
    let subject = parts.next()?;
    (!subject.is_empty()).then(|| (subject.to_string(), index, label))
}

pub fn file_name(subject: &str, index: usize, label: usize) -> String {
    format!("{subject}_{index}_{label}.csv")
}

fn data_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Reads one window; `line` in errors is 1-based.
pub fn read_window(path: &Path, len: usize, channels: usize, rate: f64) -> Result<TimeSeriesWindow> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(path, 0, e.to_string()))?;
    let mut values = Vec::with_capacity(len * channels);
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            data_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(rows + 1, |p| p.line() as usize);
        if rec.len() != channels {
            return Err(data_err(path, line, format!("expected {channels} columns, found {}", rec.len())));
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| data_err(path, line, format!("not a number: {field:?}")))?;
            values.push(v);
        }
        rows += 1;
    }
    if rows != len {
        return Err(data_err(path, rows, format!("expected {len} rows, found {rows}")));
    }
    TimeSeriesWindow::new(len, channels, values, rate)
}

/// Loads and validates a dataset; one domain per subject, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<DomainDataset>)> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| data_err(&mpath, e.line(), e.to_string()))?;
    manifest.validate()?;
    let mut domains = Vec::with_capacity(manifest.subjects.len());
    for subj in &manifest.subjects {
        let id = DomainId::new(subj.subject_id.clone());
        let mut samples = Vec::with_capacity(subj.files.len());
        for f in &subj.files {
            let path = dir.join(f);
            let (s, _, label) = parse_file_name(f)
                .ok_or_else(|| data_err(&path, 0, "file name does not follow {subject}_{index}_{label}.csv"))?;
            if s != subj.subject_id {
                return Err(data_err(&path, 0, format!("file belongs to subject {s}, listed under {}", subj.subject_id)));
            }
            if label >= manifest.num_classes {
                return Err(data_err(&path, 0, format!("label {label} out of range for {} classes", manifest.num_classes)));
            }
            let w = read_window(&path, manifest.window_length, manifest.num_channels, manifest.sample_rate_hz)?;
            let pos = samples.len();
            samples.push(LabeledSample::original(w, label, id.clone(), s, pos));
        }
        let d = DomainDataset::new(id, samples);
        if let Some(v) = validate_dataset(&d, &manifest.shape()).first() {
            return Err(Error::Dataset(format!("subject {}: {v}", d.domain)));
        }
        domains.push(d);
    }
    Ok((manifest, domains))
}

/// Every problem found in a dataset directory, without stopping at the first.
pub fn check_dataset(dir: &Path) -> Result<Vec<String>> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| data_err(&mpath, e.line(), e.to_string()))?;
    let mut problems = Vec::new();
    if let Err(e) = manifest.validate() {
        problems.push(e.to_string());
        return Ok(problems);
    }
    for subj in &manifest.subjects {
        for f in &subj.files {
            let path = dir.join(f);
            match parse_file_name(f) {
                None => problems.push(format!("{}: bad file name", path.display())),
                Some((s, _, label)) => {
                    if s != subj.subject_id {
                        problems.push(format!("{}: listed under subject {}", path.display(), subj.subject_id));
                    }
                    if label >= manifest.num_classes {
                        problems.push(format!("{}: label {label} out of range", path.display()));
                    }
                    match read_window(&path, manifest.window_length, manifest.num_channels, manifest.sample_rate_hz) {
                        Ok(w) if !w.all_finite() => problems.push(format!("{}: non-finite value", path.display())),
                        Ok(_) => {}
                        Err(e) => problems.push(e.to_string()),
                    }
                }
            }
        }
        if subj.files.is_empty() {
            problems.push(format!("subject {} has no files", subj.subject_id));
        }
    }
    Ok(problems)
}

/// Writes `domains` (one subject each) under `dir`, filling `subjects` in
/// the returned manifest.
pub fn write_dataset(dir: &Path, base: &DatasetManifest, domains: &[DomainDataset]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = base.clone();
    manifest.subjects.clear();
    for d in domains {
        let mut files = Vec::with_capacity(d.len());
        for (i, s) in d.samples.iter().enumerate() {
            let name = file_name(d.domain.as_str(), i, s.label);
            let path = dir.join(&name);
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(&path)
                .map_err(|e| data_err(&path, 0, e.to_string()))?;
            for t in 0..s.window.len() {
                w.write_record(s.window.row(t).iter().map(|v| format!("{v:?}")))
                    .map_err(|e| data_err(&path, t + 1, e.to_string()))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            files.push(name);
        }
        manifest.subjects.push(SubjectEntry {
            subject_id: d.domain.as_str().to_string(),
            files,
        });
    }
    manifest.validate()?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingPlan {
    pub groups: Vec<Vec<String>>,
}

/// Random partition of `subjects` into groups of the given sizes.
pub fn build_groups(subjects: &[String], sizes: &[usize], rng: &mut RngHandle) -> Result<GroupingPlan> {
    let total: usize = sizes.iter().sum();
    if total != subjects.len() {
        return Err(Error::config(format!(
            "group sizes {sizes:?} sum to {total}, but there are {} subjects",
            subjects.len()
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::config("group sizes must be positive"));
    }
    let mut order: Vec<String> = subjects.to_vec();
    rng.shuffle(&mut order);
    let mut groups = Vec::with_capacity(sizes.len());
    let mut it = order.into_iter();
    for &n in sizes {
        groups.push(it.by_ref().take(n).collect());
    }
    Ok(GroupingPlan { groups })
}

/// One group per subject, in the given order.
pub fn singleton_groups(subjects: &[String]) -> GroupingPlan {
    GroupingPlan {
        groups: subjects.iter().map(|s| vec![s.clone()]).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LodoSplit {
    pub target: usize,
    pub sources: Vec<usize>,
}

/// One split per group: that group is the target, the others the sources.
pub fn lodo_splits(plan: &GroupingPlan) -> Result<Vec<LodoSplit>> {
    let n = plan.groups.len();
    if n < 2 {
        return Err(Error::config(format!("leave-one-group-out needs at least 2 groups, got {n}")));
    }
    Ok((0..n)
        .map(|t| LodoSplit {
            target: t,
            sources: (0..n).filter(|&g| g != t).collect(),
        })
        .collect())
}

/// Merges per-subject datasets into one domain per group (`group{i}`).
pub fn group_domains(subjects: &[DomainDataset], plan: &GroupingPlan) -> Result<Vec<DomainDataset>> {
    plan.groups
        .iter()
        .enumerate()
        .map(|(gi, members)| {
            let id = DomainId::new(format!("group{gi}"));
            let mut samples = Vec::new();
            for m in members {
                let d = subjects
                    .iter()
                    .find(|d| d.domain.as_str() == m)
                    .ok_or_else(|| Error::config(format!("unknown subject {m}")))?;
                for s in &d.samples {
                    let mut s = s.clone();
                    s.domain = id.clone();
                    s.origin_index = samples.len();
                    samples.push(s);
                }
            }
            Ok(DomainDataset::new(id, samples))
        })
        .collect()
}

pub const STANDARD_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// Keeps `round(fraction · n)` samples (at least one) of every non-empty
/// class of every domain. Each (domain, class) pair has its own seeded
/// permutation and the kept samples are a prefix of it, so smaller
/// fractions select subsets of larger ones.
pub fn subsample(sources: &[DomainDataset], fraction: f64, num_classes: usize, seed: u64) -> Result<Vec<DomainDataset>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    if !STANDARD_FRACTIONS.iter().any(|f| (f - fraction).abs() < 1e-12) {
        log::warn!("non-standard training fraction {fraction}");
    }
    Ok(sources
        .iter()
        .enumerate()
        .map(|(di, d)| {
            let mut keep = Vec::new();
            for (c, members) in d.indices_by_class(num_classes).into_iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                let mut rng = RngHandle::stream(seed, ((di as u64) << 32) | c as u64);
                let mut order = members.clone();
                rng.shuffle(&mut order);
                let k = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
                keep.extend_from_slice(&order[..k]);
            }
            keep.sort_unstable();
            let samples = keep
                .iter()
                .enumerate()
                .map(|(pos, &i)| {
                    let mut s = d.samples[i].clone();
                    s.origin_index = pos;
                    s
                })
                .collect();
            DomainDataset::new(d.domain.clone(), samples)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_domains: usize,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub window_len: usize,
    pub channels: usize,
    /// 0 gives identically distributed domains; 1 allows rotations up to π
    /// and amplitude factors of roughly `e^{±0.5}`.
    pub shift_strength: f64,
    pub noise_std: f64,
    pub sample_rate_hz: f64,
    /// Seed of the class prototypes and domain transforms.
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_domains: 4,
            n_classes: 5,
            samples_per_class: 20,
            window_len: 32,
            channels: 6,
            shift_strength: 1.0,
            noise_std: 0.3,
            sample_rate_hz: 25.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 3 != 0 {
            return Err(Error::config(format!("channels must be a positive multiple of 3, got {}", self.channels)));
        }
        if self.n_domains == 0 || self.n_classes == 0 || self.samples_per_class == 0 || self.window_len < 2 {
            return Err(Error::config("synthetic spec sizes must be positive (window_len >= 2)"));
        }
        if !(self.shift_strength >= 0.0) || !(self.noise_std >= 0.0) || !(self.sample_rate_hz > 0.0) {
            return Err(Error::config("shift_strength and noise_std must be >= 0, sample_rate_hz > 0"));
        }
        Ok(())
    }

    pub fn triads(&self) -> Vec<[usize; 3]> {
        (0..self.channels / 3).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect()
    }
}

struct Component {
    amp: f64,
    cycles: f64,
    phase: f64,
}

/// Synthetic domains with rotation and amplitude shift between them.
///
/// Class `k` has a prototype per channel made of two sinusoids with
/// class-specific frequencies. Domain `d` rotates every channel triad by its
/// own random rotation (angle up to `π · shift_strength`) and scales every
/// channel by `exp(0.5 · shift_strength · N(0, 1))`. Each sample adds a
/// random time shift of up to an eighth of the window, a per-sample gain in
/// `[0.8, 1.2]` and white noise of `noise_std`.
pub fn synth_domains(spec: &SynthSpec) -> Result<(DatasetManifest, Vec<DomainDataset>)> {
    spec.validate()?;
    let (l, m, c) = (spec.window_len, spec.channels, spec.n_classes);
    let mut rng = RngHandle::stream(spec.seed, 0x5e7);
    let prototypes: Vec<Vec<Vec<Component>>> = (0..c)
        .map(|_| {
            (0..m)
                .map(|_| {
                    (0..2)
                        .map(|_| Component {
                            amp: 0.5 + rng.uniform(),
                            cycles: 1.0 + rng.below(6) as f64,
                            phase: 2.0 * PI * rng.uniform(),
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let triads = spec.triads();
    let mut domains = Vec::with_capacity(spec.n_domains);
    for d in 0..spec.n_domains {
        let id = DomainId::new(format!("domain{d}"));
        let rots: Vec<Rotation> = triads
            .iter()
            .map(|_| random_rotation(PI * spec.shift_strength, &mut rng))
            .collect();
        let gains: Vec<f64> = (0..m).map(|_| (0.5 * spec.shift_strength * rng.standard_normal()).exp()).collect();
        let mut samples = Vec::with_capacity(c * spec.samples_per_class);
        for k in 0..c {
            for _ in 0..spec.samples_per_class {
                let shift = rng.uniform() * l as f64 / 8.0;
                let gain = 0.8 + 0.4 * rng.uniform();
                let mut values = vec![0.0; l * m];
                for t in 0..l {
                    let x = (t as f64 + shift) / l as f64;
                    for ch in 0..m {
                        let s: f64 = prototypes[k][ch]
                            .iter()
                            .map(|p| p.amp * (2.0 * PI * p.cycles * x + p.phase).sin())
                            .sum();
                        values[t * m + ch] = gain * s;
                    }
                }
                let w = TimeSeriesWindow::new(l, m, values, spec.sample_rate_hz)?;
                let mut w = rotate_with(&w, &triads, &rots)?;
                for (i, v) in w.values_mut().iter_mut().enumerate() {
                    *v = *v * gains[i % m] + rng.normal(0.0, spec.noise_std);
                }
                let pos = samples.len();
                samples.push(LabeledSample::original(w, k, id.clone(), id.as_str(), pos));
            }
        }
        domains.push(DomainDataset::new(id, samples));
    }
    let manifest = DatasetManifest {
        name: "synthetic".into(),
        sample_rate_hz: spec.sample_rate_hz,
        window_length: l,
        num_channels: m,
        num_classes: c,
        channel_names: (0..m).map(|i| format!("ch{i}")).collect(),
        triad_channel_groups: triads,
        subjects: domains
            .iter()
            .map(|d| SubjectEntry {
                subject_id: d.domain.as_str().to_string(),
                files: (0..d.len()).map(|i| file_name(d.domain.as_str(), i, d.samples[i].label)).collect(),
            })
            .collect(),
        activity_names: (0..c).map(|k| format!("class{k}")).collect(),
    };
    Ok((manifest, domains))
}
