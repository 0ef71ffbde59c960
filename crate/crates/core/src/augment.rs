//! Sensor-window augmentations and per-batch view generation.
//!
//! All transforms are shape-preserving and pure given their random stream.
//! Each one reduces to the exact identity at its null parameter
//! (sigma = 0, one segment, zero rotation angle).
//!
//! Rotation convention: an active right-handed rotation applied to each
//! triad's column vector, `v' = R v`. A +90° turn about the third axis maps
//! `(x, y, z)` to `(-y, x, z)`; -90° maps it to `(y, -x, z)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledSample, TimeSeriesWindow};
use crate::error::{Error, Result};
use crate::rng::RngHandle;
use crate::spline::CubicSpline;

pub type Rotation = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    Rotation,
    Permutation,
    Scaling,
    TimeWarp,
    MagnitudeWarp,
    Jitter,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 6] = [
        AugmentationKind::Rotation,
        AugmentationKind::Permutation,
        AugmentationKind::Scaling,
        AugmentationKind::TimeWarp,
        AugmentationKind::MagnitudeWarp,
        AugmentationKind::Jitter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentationKind::Rotation => "rotation",
            AugmentationKind::Permutation => "permutation",
            AugmentationKind::Scaling => "scaling",
            AugmentationKind::TimeWarp => "time_warp",
            AugmentationKind::MagnitudeWarp => "magnitude_warp",
            AugmentationKind::Jitter => "jitter",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub rotation_max_angle_rad: f64,
    pub permutation_segments: usize,
    pub scaling_sigma: f64,
    pub timewarp_knots: usize,
    pub timewarp_sigma: f64,
    pub magwarp_knots: usize,
    pub magwarp_sigma: f64,
    pub jitter_sigma: f64,
    /// Channel triples (e.g. accelerometer x/y/z) rotated together.
    pub triad_channel_groups: Vec<[usize; 3]>,
    /// Augmentations `make_views` picks from.
    pub enabled: Vec<AugmentationKind>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation_max_angle_rad: PI,
            permutation_segments: 4,
            scaling_sigma: 0.1,
            timewarp_knots: 4,
            timewarp_sigma: 0.2,
            magwarp_knots: 4,
            magwarp_sigma: 0.2,
            jitter_sigma: 0.05,
            triad_channel_groups: Vec::new(),
            enabled: AugmentationKind::ALL.to_vec(),
        }
    }
}

impl AugmentationConfig {
    /// Every transform at its null parameter.
    pub fn identity() -> Self {
        Self {
            rotation_max_angle_rad: 0.0,
            permutation_segments: 1,
            scaling_sigma: 0.0,
            timewarp_sigma: 0.0,
            magwarp_sigma: 0.0,
            jitter_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, window_len: usize, channels: usize) -> Result<()> {
        for (name, s) in [
            ("scaling_sigma", self.scaling_sigma),
            ("timewarp_sigma", self.timewarp_sigma),
            ("magwarp_sigma", self.magwarp_sigma),
            ("jitter_sigma", self.jitter_sigma),
            ("rotation_max_angle_rad", self.rotation_max_angle_rad),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {s}")));
            }
        }
        if self.permutation_segments == 0 || self.permutation_segments > window_len {
            return Err(Error::config(format!(
                "permutation_segments must be in 1..={window_len}, got {}",
                self.permutation_segments
            )));
        }
        if self.timewarp_knots < 2 || self.magwarp_knots < 2 {
            return Err(Error::config("spline knot counts must be >= 2"));
        }
        check_triads(&self.triad_channel_groups, channels)
    }
}

fn check_triads(triads: &[[usize; 3]], channels: usize) -> Result<()> {
    let mut seen = vec![false; channels];
    for t in triads {
        for &c in t {
            if c >= channels {
                return Err(Error::config(format!("triad channel {c} out of range for {channels} channels")));
            }
            if seen[c] {
                return Err(Error::config(format!("channel {c} appears in more than one triad slot")));
            }
            seen[c] = true;
        }
    }
    Ok(())
}

/// Rodrigues rotation about `axis` (normalised internally) by `angle`.
pub fn rotation_matrix(axis: [f64; 3], angle: f64) -> Rotation {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

pub(crate) fn random_rotation(max_angle: f64, rng: &mut RngHandle) -> Rotation {
    let axis = loop {
        let a = [rng.standard_normal(), rng.standard_normal(), rng.standard_normal()];
        if a.iter().map(|v| v * v).sum::<f64>() > 1e-12 {
            break a;
        }
    };
    let angle = rng.uniform() * max_angle;
    rotation_matrix(axis, angle)
}

/// Applies `rotations[i]` to every time step of `triads[i]`.
pub fn rotate_with(w: &TimeSeriesWindow, triads: &[[usize; 3]], rotations: &[Rotation]) -> Result<TimeSeriesWindow> {
    check_triads(triads, w.channels())?;
    if triads.len() != rotations.len() {
        return Err(Error::config("one rotation per triad required"));
    }
    let mut out = w.clone();
    for (tri, r) in triads.iter().zip(rotations) {
        for t in 0..w.len() {
            let v = [w.get(t, tri[0]), w.get(t, tri[1]), w.get(t, tri[2])];
            for (row, &c) in r.iter().zip(tri) {
                out.set(t, c, row[0] * v[0] + row[1] * v[1] + row[2] * v[2]);
            }
        }
    }
    Ok(out)
}

/// One random rotation (uniform axis, angle in `[0, max]`) per triad.
pub fn rotate(w: &TimeSeriesWindow, cfg: &AugmentationConfig, rng: &mut RngHandle) -> Result<TimeSeriesWindow> {
    if cfg.triad_channel_groups.is_empty() {
        return Err(Error::config("rotation needs at least one channel triad"));
    }
    check_triads(&cfg.triad_channel_groups, w.channels())?;
    let rots: Vec<Rotation> = cfg
        .triad_channel_groups
        .iter()
        .map(|_| random_rotation(cfg.rotation_max_angle_rad, rng))
        .collect();
    rotate_with(w, &cfg.triad_channel_groups, &rots)
}

/// `[start, end)` of `k` contiguous segments; the first `len % k` segments
/// are one step longer.
pub fn segment_bounds(len: usize, k: usize) -> Vec<(usize, usize)> {
    let base = len / k;
    let extra = len % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let l = base + usize::from(i < extra);
        out.push((start, start + l));
        start += l;
    }
    out
}

/// Reassembles the `k` segments in `order` (0-based segment indices).
pub fn permute_with(w: &TimeSeriesWindow, k: usize, order: &[usize]) -> Result<TimeSeriesWindow> {
    if k == 0 || k > w.len() {
        return Err(Error::config(format!("segment count {k} invalid for length {}", w.len())));
    }
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..k).collect::<Vec<_>>() {
        return Err(Error::config("order must be a permutation of the segments"));
    }
    let bounds = segment_bounds(w.len(), k);
    let m = w.channels();
    let mut values = Vec::with_capacity(w.values().len());
    for &s in order {
        let (a, b) = bounds[s];
        values.extend_from_slice(&w.values()[a * m..b * m]);
    }
    TimeSeriesWindow::new(w.len(), m, values, w.sample_rate_hz())
}

pub fn permute(w: &TimeSeriesWindow, cfg: &AugmentationConfig, rng: &mut RngHandle) -> Result<TimeSeriesWindow> {
    let k = cfg.permutation_segments;
    let mut order: Vec<usize> = (0..k).collect();
    rng.shuffle(&mut order);
    permute_with(w, k, &order)
}

/// Multiplies channel `c` by `factors[c]`.
pub fn scale_with(w: &TimeSeriesWindow, factors: &[f64]) -> Result<TimeSeriesWindow> {
    if factors.len() != w.channels() {
        return Err(Error::shape(format!("{} factors for {} channels", factors.len(), w.channels())));
    }
    let mut out = w.clone();
    let m = w.channels();
    for (i, v) in out.values_mut().iter_mut().enumerate() {
        *v *= factors[i % m];
    }
    Ok(out)
}

pub fn scale(w: &TimeSeriesWindow, cfg: &AugmentationConfig, rng: &mut RngHandle) -> TimeSeriesWindow {
    let factors: Vec<f64> = (0..w.channels())
        .map(|_| rng.normal(1.0, cfg.scaling_sigma).clamp(0.1, 10.0))
        .collect();
    scale_with(w, &factors).expect("one factor per channel")
}

/// Resamples every channel at positions `tau` (length `len`) by linear
/// interpolation.
pub fn warp_with(w: &TimeSeriesWindow, tau: &[f64]) -> Result<TimeSeriesWindow> {
    let l = w.len();
    if tau.len() != l {
        return Err(Error::shape(format!("time map has {} points for length {l}", tau.len())));
    }
    let m = w.channels();
    let mut out = w.clone();
    for (t, &p) in tau.iter().enumerate() {
        let p = p.clamp(0.0, (l - 1) as f64);
        let i0 = (p.floor() as usize).min(l - 1);
        let i1 = (i0 + 1).min(l - 1);
        let f = p - i0 as f64;
        for c in 0..m {
            let v = if f == 0.0 {
                w.get(i0, c)
            } else {
                w.get(i0, c) * (1.0 - f) + w.get(i1, c) * f
            };
            out.set(t, c, v);
        }
    }
    Ok(out)
}

const MAX_WARP_ATTEMPTS: usize = 100;

/// Draws a strictly increasing time map with `tau[0] = 0` and
/// `tau[len-1] = len - 1`, or `None` if every attempt was rejected.
fn draw_time_map(len: usize, knots: usize, sigma: f64, rng: &mut RngHandle) -> Option<Vec<f64>> {
    let last = (len - 1) as f64;
    let xs: Vec<f64> = (0..knots).map(|i| last * i as f64 / (knots - 1) as f64).collect();
    for _ in 0..MAX_WARP_ATTEMPTS {
        let steps: Vec<f64> = (1..knots).map(|_| rng.normal(1.0, sigma)).collect();
        if steps.iter().any(|&s| s <= 0.0) {
            continue;
        }
        let total: f64 = steps.iter().sum();
        let mut ys = Vec::with_capacity(knots);
        ys.push(0.0);
        let mut acc = 0.0;
        for s in &steps {
            acc += s;
            ys.push(last * acc / total);
        }
        ys[knots - 1] = last;
        let spline = CubicSpline::natural(&xs, &ys);
        let mut tau: Vec<f64> = (0..len).map(|t| spline.eval(t as f64)).collect();
        tau[0] = 0.0;
        tau[len - 1] = last;
        if tau.windows(2).all(|p| p[1] > p[0]) {
            return Some(tau);
        }
    }
    None
}

/// Smooth monotone time distortion. Falls back to the identity map if no
/// monotone remap is found within 100 draws.
pub fn time_warp(w: &TimeSeriesWindow, cfg: &AugmentationConfig, rng: &mut RngHandle) -> Result<TimeSeriesWindow> {
    if cfg.timewarp_knots < 2 {
        return Err(Error::config("timewarp_knots must be >= 2"));
    }
    if cfg.timewarp_sigma == 0.0 || w.len() < 2 {
        return Ok(w.clone());
    }
    match draw_time_map(w.len(), cfg.timewarp_knots, cfg.timewarp_sigma, rng) {
        Some(tau) => warp_with(w, &tau),
        None => Ok(w.clone()),
    }
}

/// Smooth positive envelope of length `len` through `knots` random values.
fn draw_envelope(len: usize, knots: usize, sigma: f64, rng: &mut RngHandle) -> Vec<f64> {
    let ys: Vec<f64> = (0..knots).map(|_| rng.normal(1.0, sigma).clamp(0.1, 10.0)).collect();
    if len < 2 {
        return vec![ys[0]; len];
    }
    let last = (len - 1) as f64;
    let xs: Vec<f64> = (0..knots).map(|i| last * i as f64 / (knots - 1) as f64).collect();
    let spline = CubicSpline::natural(&xs, &ys);
    (0..len).map(|t| spline.eval(t as f64).clamp(0.1, 10.0)).collect()
}

/// Multiplies each channel pointwise by its own smooth positive envelope.
pub fn magnitude_warp(w: &TimeSeriesWindow, cfg: &AugmentationConfig, rng: &mut RngHandle) -> Result<TimeSeriesWindow> {
    if cfg.magwarp_knots < 2 {
        return Err(Error::config("magwarp_knots must be >= 2"));
    }
    if cfg.magwarp_sigma == 0.0 {
        return Ok(w.clone());
    }
    let mut out = w.clone();
    for c in 0..w.channels() {
        let env = draw_envelope(w.len(), cfg.magwarp_knots, cfg.magwarp_sigma, rng);
        for (t, e) in env.into_iter().enumerate() {
            out.set(t, c, w.get(t, c) * e);
        }
    }
    Ok(out)
}

/// Adds i.i.d. Gaussian noise, drawn in row-major order.
pub fn jitter(w: &TimeSeriesWindow, cfg: &AugmentationConfig, rng: &mut RngHandle) -> TimeSeriesWindow {
    let mut out = w.clone();
    for v in out.values_mut() {
        *v += rng.normal(0.0, cfg.jitter_sigma);
    }
    out
}

pub fn apply(kind: AugmentationKind, w: &TimeSeriesWindow, cfg: &AugmentationConfig, rng: &mut RngHandle) -> Result<TimeSeriesWindow> {
    match kind {
        AugmentationKind::Rotation => rotate(w, cfg, rng),
        AugmentationKind::Permutation => permute(w, cfg, rng),
        AugmentationKind::Scaling => Ok(scale(w, cfg, rng)),
        AugmentationKind::TimeWarp => time_warp(w, cfg, rng),
        AugmentationKind::MagnitudeWarp => magnitude_warp(w, cfg, rng),
        AugmentationKind::Jitter => Ok(jitter(w, cfg, rng)),
    }
}

/// Emits each sample followed by `views_per_sample` augmented copies.
///
/// Every copy uses one augmentation drawn uniformly from `cfg.enabled`
/// (rotation is skipped when no triads are declared). `origin_index` of
/// both originals and copies refers to the original's position in the
/// returned list.
pub fn make_views(
    batch: &[LabeledSample],
    cfg: &AugmentationConfig,
    rng: &mut RngHandle,
    views_per_sample: usize,
) -> Result<Vec<LabeledSample>> {
    if views_per_sample == 0 {
        return Err(Error::config("views_per_sample must be >= 1"));
    }
    let kinds: Vec<AugmentationKind> = cfg
        .enabled
        .iter()
        .copied()
        .filter(|k| *k != AugmentationKind::Rotation || !cfg.triad_channel_groups.is_empty())
        .collect();
    if kinds.is_empty() {
        return Err(Error::config("no augmentation enabled"));
    }
    let mut out = Vec::with_capacity(batch.len() * (1 + views_per_sample));
    for s in batch {
        let origin = out.len();
        let mut orig = s.clone();
        orig.is_augmented = false;
        orig.origin_index = origin;
        out.push(orig);
        for _ in 0..views_per_sample {
            let kind = kinds[rng.below(kinds.len())];
            let window = apply(kind, &s.window, cfg, rng)?;
            out.push(LabeledSample {
                window,
                label: s.label,
                domain: s.domain.clone(),
                subject: s.subject.clone(),
                is_augmented: true,
                origin_index: origin,
            });
        }
    }
    Ok(out)
}
