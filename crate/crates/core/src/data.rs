//! Domain types shared across the pipeline.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// One fixed-length multichannel window, stored row-major as
/// `len` time steps × `channels` sensor channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesWindow {
    values: Vec<f64>,
    len: usize,
    channels: usize,
    sample_rate_hz: f64,
}

impl TimeSeriesWindow {
    /// Builds a window from row-major values. Finiteness is not checked here;
    /// [`validate_dataset`] reports it.
    pub fn new(len: usize, channels: usize, values: Vec<f64>, sample_rate_hz: f64) -> Result<Self> {
        if len == 0 || channels == 0 {
            return Err(Error::shape(format!("window must be non-empty, got {len}x{channels}")));
        }
        if values.len() != len * channels {
            return Err(Error::shape(format!(
                "window {len}x{channels} needs {} values, got {}",
                len * channels,
                values.len()
            )));
        }
        Ok(Self {
            values,
            len,
            channels,
            sample_rate_hz,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], sample_rate_hz: f64) -> Result<Self> {
        let channels = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != channels) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), channels, rows.concat(), sample_rate_hz)
    }

    pub fn zeros(len: usize, channels: usize, sample_rate_hz: f64) -> Self {
        Self {
            values: vec![0.0; len * channels],
            len,
            channels,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, t: usize, c: usize, v: f64) {
        self.values[t * self.channels + c] = v;
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    /// The univariate series of one channel.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.get(t, c)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Identifier of one domain (a subject group).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainId(pub String);

impl DomainId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DomainId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub window: TimeSeriesWindow,
    pub label: usize,
    pub domain: DomainId,
    pub subject: String,
    pub is_augmented: bool,
    /// Index of the original sample this one derives from (its own index for
    /// originals).
    pub origin_index: usize,
}

impl LabeledSample {
    pub fn original(window: TimeSeriesWindow, label: usize, domain: DomainId, subject: impl Into<String>, index: usize) -> Self {
        Self {
            window,
            label,
            domain,
            subject: subject.into(),
            is_augmented: false,
            origin_index: index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain: DomainId,
    pub samples: Vec<LabeledSample>,
}

impl DomainDataset {
    pub fn new(domain: DomainId, samples: Vec<LabeledSample>) -> Self {
        Self { domain, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices per class, for classes `0..num_classes`.
    pub fn indices_by_class(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            if s.label < num_classes {
                by[s.label].push(i);
            }
        }
        by
    }
}

/// Expected window geometry and class count of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub window_len: usize,
    pub channels: usize,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    NonEmpty,
    WindowLength,
    ChannelCount,
    Finite,
    LabelRange,
    SampleRate,
    DomainTag,
    Origin,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::NonEmpty => "non-empty",
            Rule::WindowLength => "window length",
            Rule::ChannelCount => "channel count",
            Rule::Finite => "finite",
            Rule::LabelRange => "label range",
            Rule::SampleRate => "sample rate",
            Rule::DomainTag => "domain tag",
            Rule::Origin => "origin",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Offending sample, `None` for dataset-level rules.
    pub index: Option<usize>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "sample {i}: {} ({})", self.rule.name(), self.detail),
            None => write!(f, "dataset: {} ({})", self.rule.name(), self.detail),
        }
    }
}

/// Checks every dataset invariant; an empty result means the dataset is valid.
pub fn validate_dataset(d: &DomainDataset, expected: &ShapeSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    if d.samples.is_empty() {
        out.push(Violation {
            index: None,
            rule: Rule::NonEmpty,
            detail: format!("domain {} has no samples", d.domain),
        });
        return out;
    }
    let mut push = |index: usize, rule: Rule, detail: String| {
        out.push(Violation {
            index: Some(index),
            rule,
            detail,
        })
    };
    for (i, s) in d.samples.iter().enumerate() {
        let w = &s.window;
        if w.len() != expected.window_len {
            push(i, Rule::WindowLength, format!("{} != {}", w.len(), expected.window_len));
        }
        if w.channels() != expected.channels {
            push(i, Rule::ChannelCount, format!("{} != {}", w.channels(), expected.channels));
        }
        if let Some(pos) = w.values().iter().position(|v| !v.is_finite()) {
            push(
                i,
                Rule::Finite,
                format!("non-finite value at ({}, {})", pos / w.channels(), pos % w.channels()),
            );
        }
        if s.label >= expected.num_classes {
            push(i, Rule::LabelRange, format!("label {} >= {}", s.label, expected.num_classes));
        }
        if !(w.sample_rate_hz() > 0.0 && w.sample_rate_hz().is_finite()) {
            push(i, Rule::SampleRate, format!("{}", w.sample_rate_hz()));
        }
        if s.domain != d.domain {
            push(i, Rule::DomainTag, format!("tagged {} inside {}", s.domain, d.domain));
        }
        if s.is_augmented {
            let ok = d.samples.get(s.origin_index).is_some_and(|o| !o.is_augmented);
            if !ok {
                push(i, Rule::Origin, format!("origin {} is missing or augmented", s.origin_index));
            }
        }
    }
    out
}

/// Named collection of trainable arrays. Names are unique and iteration
/// order is the sorted name order, which fixes the flattening layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet<T = f64> {
    params: BTreeMap<String, Tensor<T>>,
}

/// Gradients share the layout of the parameters they belong to.
pub type GradientMap<T> = ParameterSet<T>;

impl<T: Real> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Parameter {
                name,
                reason: "duplicate name".into(),
            });
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars over all arrays.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> ParameterSet<U> {
        ParameterSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.map(&f))).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        self.map(|v| U::from_f64(v.to_f64()))
    }

    /// Errors unless `other` has exactly the same names and shapes.
    pub fn check_layout<U: Real>(&self, other: &ParameterSet<U>) -> Result<()> {
        for (k, v) in &self.params {
            match other.params.get(k) {
                None => {
                    return Err(Error::Parameter {
                        name: k.clone(),
                        reason: "missing from gradient map".into(),
                    })
                }
                Some(g) if g.shape() != v.shape() => {
                    return Err(Error::Parameter {
                        name: k.clone(),
                        reason: format!("shape {:?} does not match {:?}", g.shape(), v.shape()),
                    })
                }
                _ => {}
            }
        }
        if let Some(k) = other.params.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::Parameter {
                name: k.clone(),
                reason: "unknown parameter in gradient map".into(),
            });
        }
        Ok(())
    }

    /// `self + scale * other`, elementwise over matching layouts.
    pub fn add_scaled(&self, other: &Self, scale: T) -> Result<Self> {
        self.check_layout(other)?;
        let params = self
            .params
            .iter()
            .map(|(k, v)| {
                let g = &other.params[k];
                let data = v.data().iter().zip(g.data()).map(|(&a, &b)| a + scale * b).collect();
                (k.clone(), Tensor::new(v.shape().to_vec(), data))
            })
            .collect();
        Ok(Self { params })
    }

    /// All scalars concatenated in name order.
    pub fn flatten(&self) -> Vec<T> {
        self.params.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten) against this set's layout.
    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape(format!("{} scalars for a layout of {}", flat.len(), self.num_scalars())));
        }
        let mut off = 0;
        let params = self
            .params
            .iter()
            .map(|(k, v)| {
                let n = v.len();
                let t = Tensor::new(v.shape().to_vec(), flat[off..off + n].to_vec());
                off += n;
                (k.clone(), t)
            })
            .collect();
        Ok(Self { params })
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}

/// Functional gradient step `p - alpha * g`; `p` is left untouched.
pub fn param_step<T: Real>(p: &ParameterSet<T>, g: &GradientMap<T>, alpha: T) -> Result<ParameterSet<T>> {
    if !alpha.is_finite() {
        return Err(Error::config("step size must be finite"));
    }
    p.add_scaled(g, -alpha)
}
