//! Projection head, classification head and the losses built on them.
//!
//! Both heads read the encoder feature. The projection head is one affine
//! layer with ReLU, optionally scaled to unit norm; its output feeds the
//! supervised contrastive loss. The classifier is two affine+ReLU layers and
//! a linear map to `C` logits.
//!
//! The supervised contrastive loss of a batch is
//!
//! ```text
//! Σ_{i ∈ I, P(i) ≠ ∅}  −1/|P(i)| Σ_{p ∈ P(i)} log( exp(z_i·z_p/τ) / Σ_{a ≠ i} exp(z_i·z_a/τ) )
//! ```
//!
//! with `P(i)` the other samples sharing `i`'s label. Anchors without
//! positives contribute nothing. [`SupconReduction::Mean`] divides by the
//! number of contributing anchors instead.

use serde::{Deserialize, Serialize};

use crate::data::ParameterSet;
use crate::encoder::{linear_weight, ParamVars};
use crate::error::{Error, Result};
use crate::rng::RngHandle;
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Norm offset used when normalising projections.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupconReduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadsConfig {
    pub proj_width: usize,
    pub cls_widths: Vec<usize>,
    pub tau: f64,
    pub eta: f64,
    pub normalize_projections: bool,
    pub supcon_reduction: SupconReduction,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            proj_width: 256,
            cls_widths: vec![256, 256],
            tau: 0.07,
            eta: 0.2,
            normalize_projections: true,
            supcon_reduction: SupconReduction::Sum,
        }
    }
}

impl HeadsConfig {
    pub fn tiny() -> Self {
        Self {
            proj_width: 4,
            cls_widths: vec![5, 5],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.proj_width == 0 || self.cls_widths.contains(&0) {
            return Err(Error::config("head widths must be positive"));
        }
        Ok(())
    }
}

pub fn init_params(
    cfg: &HeadsConfig,
    feature_dim: usize,
    num_classes: usize,
    rng: &mut RngHandle,
    into: &mut ParameterSet<f64>,
) -> Result<()> {
    cfg.validate()?;
    into.insert("proj.w", linear_weight(feature_dim, cfg.proj_width, rng))?;
    into.insert("proj.b", Tensor::zeros(vec![cfg.proj_width]))?;
    let mut fan_in = feature_dim;
    for (i, &w) in cfg.cls_widths.iter().enumerate() {
        into.insert(format!("cls.{i}.w"), linear_weight(fan_in, w, rng))?;
        into.insert(format!("cls.{i}.b"), Tensor::zeros(vec![w]))?;
        fan_in = w;
    }
    into.insert("cls.out.w", linear_weight(fan_in, num_classes, rng))?;
    into.insert("cls.out.b", Tensor::zeros(vec![num_classes]))?;
    Ok(())
}

fn affine<'t, T: Real>(tape: &'t Tape<T>, x: Var<'t, T>, pv: &ParamVars<'t, T>, name: &str) -> Result<Var<'t, T>> {
    let w = pv.get(&format!("{name}.w"))?;
    let (xs, ws) = (x.shape(), w.shape());
    if xs.last() != ws.first() {
        return Err(Error::shape(format!("{name}: input {xs:?} does not match weight {ws:?}")));
    }
    Ok(tape.add_bias(tape.matmul(x, w, false, false), pv.get(&format!("{name}.b"))?))
}

/// Embeddings `[B, P]` from features `[B, F]`.
pub fn project<'t, T: Real>(
    tape: &'t Tape<T>,
    features: Var<'t, T>,
    pv: &ParamVars<'t, T>,
    cfg: &HeadsConfig,
) -> Result<Var<'t, T>> {
    let z = tape.relu(affine(tape, features, pv, "proj")?);
    Ok(if cfg.normalize_projections {
        tape.l2_normalize(z, NORM_EPS)
    } else {
        z
    })
}

/// Logits `[B, C]` from features `[B, F]`.
pub fn classify<'t, T: Real>(
    tape: &'t Tape<T>,
    features: Var<'t, T>,
    pv: &ParamVars<'t, T>,
    cfg: &HeadsConfig,
) -> Result<Var<'t, T>> {
    let mut h = features;
    for i in 0..cfg.cls_widths.len() {
        h = tape.relu(affine(tape, h, pv, &format!("cls.{i}"))?);
    }
    affine(tape, h, pv, "cls.out")
}

/// Per-anchor supervised contrastive terms.
///
/// Samples only interact with samples of the same `group`; pass all zeros
/// for a single pool. Returns the `[B]` vector of anchor terms (zero where
/// the anchor has no positive) and the positive-presence mask.
pub fn supcon_terms<'t, T: Real>(
    tape: &'t Tape<T>,
    z: Var<'t, T>,
    labels: &[usize],
    groups: &[usize],
    tau: f64,
) -> Result<(Var<'t, T>, Vec<bool>)> {
    let b = labels.len();
    let zs = z.shape();
    if zs.len() != 2 || zs[0] != b || groups.len() != b {
        return Err(Error::shape(format!("embeddings {zs:?} vs {b} labels and {} groups", groups.len())));
    }
    if b < 2 {
        return Err(Error::shape("contrastive loss needs at least two samples"));
    }
    let sim = tape.scale(tape.matmul(z, z, false, true), T::from_f64(1.0 / tau));
    let mut mask = vec![false; b * b];
    let mut weights = vec![T::zero(); b * b];
    let mut has_pos = vec![false; b];
    for i in 0..b {
        let pos: Vec<usize> = (0..b)
            .filter(|&p| p != i && groups[p] == groups[i] && labels[p] == labels[i])
            .collect();
        for a in 0..b {
            mask[i * b + a] = a != i && groups[a] == groups[i];
        }
        if !pos.is_empty() {
            has_pos[i] = true;
            let w = T::from_f64(-1.0 / pos.len() as f64);
            for p in pos {
                weights[i * b + p] = w;
            }
        }
    }
    // An anchor alone in its group has an empty denominator; it also has no
    // positives, so its row is ignored after weighting.
    for i in 0..b {
        if !(0..b).any(|a| mask[i * b + a]) {
            mask[i * b + i] = true;
        }
    }
    let logp = tape.masked_log_softmax(sim, mask);
    Ok((tape.sum_last(tape.mul_const(logp, weights)), has_pos))
}

fn rows_tensor(rows: &[Vec<f64>], what: &str) -> Result<Tensor<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::shape(format!("ragged {what}")));
    }
    Ok(Tensor::new(vec![rows.len(), width], rows.concat()))
}

/// Supervised contrastive loss (anchor sum) of one batch of embeddings.
pub fn supcon_loss(z: &[Vec<f64>], labels: &[usize], tau: f64) -> Result<f64> {
    Ok(supcon_breakdown(z, labels, tau)?.total)
}

/// Anchor-level view of [`supcon_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct SupconBreakdown {
    pub total: f64,
    pub per_anchor: Vec<f64>,
    /// Gradient of `total` with respect to each embedding.
    pub grad: Vec<Vec<f64>>,
}

pub fn supcon_breakdown(z: &[Vec<f64>], labels: &[usize], tau: f64) -> Result<SupconBreakdown> {
    if z.len() != labels.len() {
        return Err(Error::shape(format!("{} embeddings but {} labels", z.len(), labels.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("tau must be > 0, got {tau}")));
    }
    let tape = Tape::new();
    let zv = tape.param(rows_tensor(z, "embeddings")?);
    let (terms, _) = supcon_terms(&tape, zv, labels, &vec![0; labels.len()], tau)?;
    let total = tape.sum(terms);
    let per_anchor = terms.value().data().to_vec();
    let grads = tape.backward(total);
    let width = z[0].len();
    let grad = grads.get_or_zeros(zv).chunks(width).map(<[f64]>::to_vec).collect();
    let total = total.value().data()[0];
    Ok(SupconBreakdown { total, per_anchor, grad })
}

fn check_labels(labels: &[usize], c: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= c) {
        Some(y) => Err(Error::shape(format!("label {y} out of range for {c} classes"))),
        None => Ok(()),
    }
}

/// Mean cross-entropy of a batch of logits.
pub fn cls_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::shape(format!("{} logit rows but {} labels", logits.len(), labels.len())));
    }
    let t = rows_tensor(logits, "logits")?;
    check_labels(labels, t.shape()[1])?;
    let tape = Tape::new();
    let ce = tape.cross_entropy(tape.constant(t), labels);
    let r = tape.mean(ce).value().data()[0];
    Ok(r)
}

/// `η · cls + (1 − η) · supcon`.
pub fn mix(eta: f64, cls: f64, supcon: f64) -> f64 {
    eta * cls + (1.0 - eta) * supcon
}

/// Per-sample coefficients turning cross-entropy and anchor terms into the
/// mean over groups of each group's meta-loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: Vec<f64>,
    pub supcon: Vec<f64>,
}

impl LossWeights {
    pub fn new(groups: &[usize], has_pos: &[bool], cfg: &HeadsConfig) -> Result<Self> {
        let n_groups = groups.iter().max().map_or(0, |g| g + 1);
        let mut size = vec![0usize; n_groups];
        let mut anchors = vec![0usize; n_groups];
        for (i, &g) in groups.iter().enumerate() {
            size[g] += 1;
            anchors[g] += has_pos[i] as usize;
        }
        if let Some(g) = size.iter().position(|&n| n == 0) {
            return Err(Error::Dataset(format!("domain batch {g} is empty")));
        }
        let gw = 1.0 / n_groups as f64;
        let ce = groups.iter().map(|&g| cfg.eta * gw / size[g] as f64).collect();
        let supcon = groups
            .iter()
            .zip(has_pos)
            .map(|(&g, &p)| {
                if !p {
                    return 0.0;
                }
                let scale = match cfg.supcon_reduction {
                    SupconReduction::Sum => 1.0,
                    SupconReduction::Mean => 1.0 / anchors[g] as f64,
                };
                (1.0 - cfg.eta) * gw * scale
            })
            .collect();
        Ok(Self { ce, supcon })
    }
}

/// Scalar meta-loss on the tape from features `[B, F]`.
pub fn meta_loss_on_tape<'t, T: Real>(
    tape: &'t Tape<T>,
    features: Var<'t, T>,
    pv: &ParamVars<'t, T>,
    cfg: &HeadsConfig,
    labels: &[usize],
    groups: &[usize],
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let logits = classify(tape, features, pv, cfg)?;
    check_labels(labels, logits.shape()[1])?;
    let ce = tape.cross_entropy(logits, labels);
    let (sc, has_pos) = if cfg.eta < 1.0 {
        let z = project(tape, features, pv, cfg)?;
        supcon_terms(tape, z, labels, groups, cfg.tau)?
    } else {
        (ce, vec![false; labels.len()])
    };
    let w = LossWeights::new(groups, &has_pos, cfg)?;
    let mut loss = tape.weighted_sum(ce, w.ce.iter().map(|&v| T::from_f64(v)).collect());
    if has_pos.iter().any(|&p| p) {
        let s = tape.weighted_sum(sc, w.supcon.iter().map(|&v| T::from_f64(v)).collect());
        loss = tape.add(loss, s);
    }
    Ok((loss, logits))
}
