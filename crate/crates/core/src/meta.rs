//! Bi-level meta-optimisation over source domains.
//!
//! Every step splits the source domains into meta-train domains and virtual
//! target domains, then minimises
//!
//! ```text
//! L(Θ) = L_train(Θ) + β · L_test(Θ − α ∇L_train(Θ))
//! ```
//!
//! where `L_train` is the mean over meta-train domains of each domain's
//! meta-loss and `L_test` the same quantity on the virtual targets.
//!
//! The outer gradient is `g + β (I − α H) v` with `g = ∇L_train(Θ)`,
//! `v = ∇L_test(Θ′)` and `H` the Hessian of `L_train` at `Θ`. `H v` is
//! obtained exactly by re-running the reverse pass of `L_train` over dual
//! numbers seeded with tangent `v`. First-order mode drops the `α H v` term.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentationConfig};
use crate::data::{param_step, DomainDataset, DomainId, LabeledSample, ParameterSet};
use crate::encoder::{Buffers, ForwardCtx, Mode};
use crate::error::{Error, Result};
use crate::model::{self, Evaluation, ModelConfig, ModelState};
use crate::rng::RngHandle;
use crate::scalar::{Dual, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub virtual_domains: usize,
    pub second_order: bool,
    pub outer_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Augmented views generated per sample; 0 trains on originals only.
    pub views_per_sample: usize,
    /// Optimiser steps per epoch; defaults to one pass over the sources.
    pub steps_per_epoch: Option<usize>,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0005,
            beta: 1.0,
            virtual_domains: 1,
            second_order: true,
            outer_lr: 0.0005,
            batch_size: 256,
            max_epochs: 500,
            seed: 1,
            views_per_sample: 1,
            steps_per_epoch: None,
            patience: 20,
            min_delta: 1e-4,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self, n_sources: usize) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.outer_lr > 0.0) {
            return bad(format!("outer_lr must be > 0, got {}", self.outer_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.beta > 0.0 && (self.virtual_domains == 0 || self.virtual_domains >= n_sources) {
            return bad(format!(
                "need 1 <= virtual_domains < {n_sources} source domains, got {}",
                self.virtual_domains
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaSplit {
    pub meta_train: Vec<DomainId>,
    pub virtual_target: Vec<DomainId>,
}

/// Uniformly random `v`-subset of `sources` as virtual targets.
pub fn draw_meta_split(sources: &[DomainId], v: usize, rng: &mut RngHandle) -> Result<MetaSplit> {
    if v == 0 || v >= sources.len() {
        return Err(Error::config(format!(
            "virtual target count {v} must be in 1..{}",
            sources.len()
        )));
    }
    let picked = rng.subset(sources.len(), v);
    let mut split = MetaSplit {
        meta_train: Vec::new(),
        virtual_target: Vec::new(),
    };
    for (i, d) in sources.iter().enumerate() {
        if picked.binary_search(&i).is_ok() {
            split.virtual_target.push(d.clone());
        } else {
            split.meta_train.push(d.clone());
        }
    }
    Ok(split)
}

/// Loss and gradient of a set of domain batches; each batch is one group
/// of the per-domain average.
pub trait Objective {
    fn evaluate<T: Real>(
        &self,
        params: &ParameterSet<T>,
        batches: &[Vec<LabeledSample>],
        dropout_seed: u64,
    ) -> Result<Evaluation<T>>;
}

/// The network meta-loss in train mode with fixed running statistics.
pub struct ModelObjective<'a> {
    pub cfg: &'a ModelConfig,
    pub buffers: &'a Buffers,
}

impl Objective for ModelObjective<'_> {
    fn evaluate<T: Real>(
        &self,
        params: &ParameterSet<T>,
        batches: &[Vec<LabeledSample>],
        dropout_seed: u64,
    ) -> Result<Evaluation<T>> {
        if batches.is_empty() {
            return Err(Error::Dataset("no domain batches".into()));
        }
        if let Some(i) = batches.iter().position(Vec::is_empty) {
            return Err(Error::Dataset(format!("domain batch {i} is empty")));
        }
        let mut samples = Vec::new();
        let mut groups = Vec::new();
        for (g, b) in batches.iter().enumerate() {
            samples.extend(b.iter());
            groups.extend(std::iter::repeat(g).take(b.len()));
        }
        model::loss_and_grad(
            params,
            self.buffers,
            self.cfg,
            &samples,
            &groups,
            ForwardCtx::new(Mode::Train, dropout_seed),
        )
    }
}

/// Mean over meta-train domains of each domain's meta-loss.
pub fn meta_train_loss<O: Objective>(
    obj: &O,
    params: &ParameterSet<f64>,
    batches: &[Vec<LabeledSample>],
    dropout_seed: u64,
) -> Result<f64> {
    Ok(obj.evaluate(params, batches, dropout_seed)?.loss)
}

#[derive(Clone, Debug)]
pub struct MetaStepOutput<T: Real> {
    pub grad: ParameterSet<T>,
    pub l_train: f64,
    /// `None` when the meta-test term is disabled.
    pub l_test: Option<f64>,
    pub vt_correct: usize,
    pub vt_total: usize,
    /// BatchNorm statistics of the meta-train pass.
    pub bn_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

fn test_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

fn check_finite<T: Real>(what: &str, e: &Evaluation<T>) -> Result<()> {
    if !e.loss.is_finite() || !e.grad.all_finite() {
        return Err(Error::Training(format!("non-finite {what} loss or gradient")));
    }
    Ok(())
}

/// Outer gradient of the meta objective at `params`. `params` is not
/// modified; the adapted parameters are a separate value.
pub fn meta_step<O: Objective, T: Real>(
    obj: &O,
    params: &ParameterSet<T>,
    train: &[Vec<LabeledSample>],
    test: &[Vec<LabeledSample>],
    cfg: &MetaConfig,
    dropout_seed: u64,
) -> Result<MetaStepOutput<T>> {
    let a = obj.evaluate(params, train, dropout_seed)?;
    check_finite("meta-train", &a)?;
    let mut out = MetaStepOutput {
        grad: a.grad,
        l_train: a.loss.to_f64(),
        l_test: None,
        vt_correct: 0,
        vt_total: 0,
        bn_stats: a.bn_stats,
    };
    if cfg.beta == 0.0 || test.is_empty() {
        return Ok(out);
    }
    let adapted = param_step(params, &out.grad, T::from_f64(cfg.alpha))?;
    let b = obj.evaluate(&adapted, test, test_seed(dropout_seed))?;
    check_finite("meta-test", &b)?;
    out.l_test = Some(b.loss.to_f64());
    out.vt_correct = b.correct;
    out.vt_total = b.total;
    let beta = T::from_f64(cfg.beta);
    let mut total = out.grad.add_scaled(&b.grad, beta)?;
    if cfg.second_order && cfg.alpha != 0.0 {
        let hv = hessian_vector(obj, params, &b.grad, train, dropout_seed)?;
        total = total.add_scaled(&hv, -beta * T::from_f64(cfg.alpha))?;
    }
    out.grad = total;
    Ok(out)
}

/// `H v` for the Hessian of the objective on `batches` at `params`.
pub fn hessian_vector<O: Objective, T: Real>(
    obj: &O,
    params: &ParameterSet<T>,
    v: &ParameterSet<T>,
    batches: &[Vec<LabeledSample>],
    dropout_seed: u64,
) -> Result<ParameterSet<T>> {
    params.check_layout(v)?;
    let seeded: Vec<Dual<T>> = params
        .flatten()
        .into_iter()
        .zip(v.flatten())
        .map(|(re, du)| Dual::new(re, du))
        .collect();
    let dual = params.map(Dual::constant).unflatten(&seeded)?;
    let e = obj.evaluate(&dual, batches, dropout_seed)?;
    let hv = e.grad.map(|d| d.du);
    if !hv.all_finite() {
        return Err(Error::Training("non-finite Hessian-vector product".into()));
    }
    Ok(hv)
}

/// Value of the full meta objective, used by gradient checks.
pub fn meta_objective<O: Objective>(
    obj: &O,
    params: &ParameterSet<f64>,
    train: &[Vec<LabeledSample>],
    test: &[Vec<LabeledSample>],
    cfg: &MetaConfig,
    dropout_seed: u64,
) -> Result<f64> {
    let a = obj.evaluate(params, train, dropout_seed)?;
    if cfg.beta == 0.0 || test.is_empty() {
        return Ok(a.loss);
    }
    let adapted = param_step(params, &a.grad, cfg.alpha)?;
    let b = obj.evaluate(&adapted, test, test_seed(dropout_seed))?;
    Ok(a.loss + cfg.beta * b.loss)
}

/// Adam with the usual moment coefficients.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet<T>, grad: &ParameterSet<T>) -> Result<()> {
        params.check_layout(grad)?;
        let mut p = params.flatten();
        let g = grad.flatten();
        if p.len() != self.m.len() {
            return Err(Error::shape(format!("optimiser sized for {} scalars, got {}", self.m.len(), p.len())));
        }
        self.t += 1;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (c1, c2) = (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t));
        let step = T::from_f64(self.lr / c1);
        let inv_c2 = T::from_f64(1.0 / c2);
        let eps = T::from_f64(self.eps);
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g[i] * g[i];
            p[i] -= step * self.m[i] / ((self.v[i] * inv_c2).sqrt() + eps);
        }
        *params = params.unflatten(&p)?;
        Ok(())
    }
}

/// Draws one batch per domain: `batch_size` split evenly over domains (the
/// first `batch_size % n` domains take one extra), each domain's share split
/// evenly over its classes. Shortfalls in small classes are filled from the
/// rest of the domain; a domain smaller than its share is used whole.
pub fn sample_domain_batches(
    domains: &[&DomainDataset],
    batch_size: usize,
    num_classes: usize,
    rng: &mut RngHandle,
) -> Result<Vec<Vec<LabeledSample>>> {
    if domains.is_empty() {
        return Err(Error::Dataset("no domains to sample from".into()));
    }
    let n = domains.len();
    let mut out = Vec::with_capacity(n);
    for (d, dom) in domains.iter().enumerate() {
        if dom.is_empty() {
            return Err(Error::Dataset(format!("domain {} has no samples", dom.domain)));
        }
        let quota = batch_size / n + usize::from(d < batch_size % n);
        let classes: Vec<Vec<usize>> = dom
            .indices_by_class(num_classes)
            .into_iter()
            .filter(|c| !c.is_empty())
            .collect();
        let k = classes.len();
        let mut taken = vec![false; dom.len()];
        let mut chosen = Vec::with_capacity(quota);
        for (ci, members) in classes.iter().enumerate() {
            let share = quota / k + usize::from(ci < quota % k);
            for j in rng.subset(members.len(), share) {
                taken[members[j]] = true;
                chosen.push(members[j]);
            }
        }
        if chosen.len() < quota {
            let rest: Vec<usize> = (0..dom.len()).filter(|&i| !taken[i]).collect();
            for j in rng.subset(rest.len(), quota - chosen.len()) {
                chosen.push(rest[j]);
            }
        }
        out.push(chosen.into_iter().map(|i| dom.samples[i].clone()).collect());
    }
    Ok(out)
}

fn with_views(
    batches: Vec<Vec<LabeledSample>>,
    aug: &AugmentationConfig,
    views: usize,
    rng: &mut RngHandle,
) -> Result<Vec<Vec<LabeledSample>>> {
    if views == 0 {
        return Ok(batches);
    }
    batches.iter().map(|b| make_views(b, aug, rng, views)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub augment: AugmentationConfig,
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_train")]
    pub l_train: f64,
    #[serde(rename = "L_test")]
    pub l_test: Option<f64>,
    pub vt_accuracy: Option<f64>,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState<f64>,
    pub history: Vec<EpochRecord>,
    /// Meta-train loss of every optimiser step, in order.
    pub step_losses: Vec<f64>,
    pub stopped_early: bool,
}

/// Called after every epoch; an error aborts training.
pub type Observer<'a> = &'a mut dyn FnMut(&EpochRecord, &ModelState<f64>) -> Result<()>;

struct EarlyStop {
    best: f64,
    stale: usize,
}

impl EarlyStop {
    fn new() -> Self {
        Self {
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Returns true when training should stop.
    fn update(&mut self, loss: f64, cfg: &MetaConfig) -> bool {
        if loss < self.best - cfg.min_delta {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        cfg.patience > 0 && self.stale >= cfg.patience
    }
}

fn check_sources(sources: &[DomainDataset], cfg: &TrainConfig) -> Result<usize> {
    cfg.model.validate()?;
    let spec = crate::data::ShapeSpec {
        window_len: cfg.model.encoder.window_len,
        channels: cfg.model.encoder.channels,
        num_classes: cfg.model.num_classes,
    };
    for d in sources {
        let v = crate::data::validate_dataset(d, &spec);
        if let Some(first) = v.first() {
            return Err(Error::Dataset(format!(
                "domain {}: {} violation(s), first: {} {}",
                d.domain,
                v.len(),
                first.rule.name(),
                first.detail
            )));
        }
    }
    let total: usize = sources.iter().map(DomainDataset::len).sum();
    Ok(cfg.meta.steps_per_epoch.unwrap_or(total.div_ceil(cfg.meta.batch_size).max(1)))
}

/// Meta-learning over `sources`, each one domain.
pub fn train<T: Real>(sources: &[DomainDataset], cfg: &TrainConfig, observer: Observer<'_>) -> Result<TrainOutcome> {
    let meta = &cfg.meta;
    if meta.beta > 0.0 && sources.len() < 2 {
        return Err(Error::config("meta-learning needs at least two source domains"));
    }
    meta.validate(sources.len())?;
    let steps = check_sources(sources, cfg)?;
    let init = model::init_model(&cfg.model, meta.seed)?;
    let mut params: ParameterSet<T> = init.params.cast();
    let mut buffers = init.buffers;
    let mut adam = Adam::new(meta.outer_lr, params.num_scalars());
    let mut rng = RngHandle::stream(meta.seed, 0x7ac0);
    let ids: Vec<DomainId> = sources.iter().map(|d| d.domain.clone()).collect();
    let start = Instant::now();
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut stop = EarlyStop::new();
    let mut stopped_early = false;
    for epoch in 0..meta.max_epochs {
        let (mut sum_train, mut sum_test, mut n_test) = (0.0, 0.0, 0usize);
        let (mut vt_correct, mut vt_total) = (0usize, 0usize);
        for _ in 0..steps {
            let (train_ids, test_ids) = if meta.beta > 0.0 {
                let s = draw_meta_split(&ids, meta.virtual_domains, &mut rng)?;
                (s.meta_train, s.virtual_target)
            } else {
                (ids.clone(), Vec::new())
            };
            let pick = |want: &[DomainId]| -> Vec<&DomainDataset> {
                want.iter()
                    .map(|id| sources.iter().find(|d| &d.domain == id).expect("known domain"))
                    .collect()
            };
            let order: Vec<&DomainDataset> = pick(&train_ids).into_iter().chain(pick(&test_ids)).collect();
            let mut batches = sample_domain_batches(&order, meta.batch_size, cfg.model.num_classes, &mut rng)?;
            batches = with_views(batches, &cfg.augment, meta.views_per_sample, &mut rng)?;
            let test_batches = batches.split_off(train_ids.len());
            let seed = rng.next_u64();
            let obj = ModelObjective {
                cfg: &cfg.model,
                buffers: &buffers,
            };
            let out = meta_step(&obj, &params, &batches, &test_batches, meta, seed)?;
            model::update_buffers(&mut buffers, &out.bn_stats, cfg.model.encoder.bn_momentum);
            adam.step(&mut params, &out.grad)?;
            if !params.all_finite() {
                return Err(Error::Training(format!("parameters diverged in epoch {epoch}")));
            }
            step_losses.push(out.l_train);
            sum_train += out.l_train;
            if let Some(t) = out.l_test {
                sum_test += t;
                n_test += 1;
            }
            vt_correct += out.vt_correct;
            vt_total += out.vt_total;
        }
        let rec = EpochRecord {
            epoch,
            l_train: sum_train / steps as f64,
            l_test: (n_test > 0).then(|| sum_test / n_test as f64),
            vt_accuracy: (vt_total > 0).then(|| vt_correct as f64 / vt_total as f64),
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        let state = ModelState {
            params: params.cast(),
            buffers: buffers.clone(),
        };
        observer(&rec, &state)?;
        log::debug!("epoch {epoch}: L_train {:.4}", rec.l_train);
        let halt = stop.update(rec.l_train, meta);
        history.push(rec);
        if halt {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        state: ModelState {
            params: params.cast(),
            buffers,
        },
        history,
        step_losses,
        stopped_early,
    })
}

/// Plain empirical risk minimisation of the meta-loss on one pooled domain.
pub fn train_erm<T: Real>(pooled: &DomainDataset, cfg: &TrainConfig, observer: Observer<'_>) -> Result<TrainOutcome> {
    let meta = &cfg.meta;
    let steps = check_sources(std::slice::from_ref(pooled), cfg)?;
    let init = model::init_model(&cfg.model, meta.seed)?;
    let mut params: ParameterSet<T> = init.params.cast();
    let mut buffers = init.buffers;
    let mut adam = Adam::new(meta.outer_lr, params.num_scalars());
    let mut rng = RngHandle::stream(meta.seed, 0x7ac0);
    let start = Instant::now();
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut stop = EarlyStop::new();
    let mut stopped_early = false;
    for epoch in 0..meta.max_epochs {
        let mut sum = 0.0;
        for _ in 0..steps {
            let batch = sample_domain_batches(&[pooled], meta.batch_size, cfg.model.num_classes, &mut rng)?;
            let batch = with_views(batch, &cfg.augment, meta.views_per_sample, &mut rng)?;
            let seed = rng.next_u64();
            let samples: Vec<&LabeledSample> = batch[0].iter().collect();
            let e = model::loss_and_grad(
                &params,
                &buffers,
                &cfg.model,
                &samples,
                &vec![0; samples.len()],
                ForwardCtx::new(Mode::Train, seed),
            )?;
            check_finite("training", &e)?;
            model::update_buffers(&mut buffers, &e.bn_stats, cfg.model.encoder.bn_momentum);
            adam.step(&mut params, &e.grad)?;
            let l = e.loss.to_f64();
            step_losses.push(l);
            sum += l;
        }
        let rec = EpochRecord {
            epoch,
            l_train: sum / steps as f64,
            l_test: None,
            vt_accuracy: None,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        let state = ModelState {
            params: params.cast(),
            buffers: buffers.clone(),
        };
        observer(&rec, &state)?;
        let halt = stop.update(rec.l_train, meta);
        history.push(rec);
        if halt {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        state: ModelState {
            params: params.cast(),
            buffers,
        },
        history,
        step_losses,
        stopped_early,
    })
}

/// Union of several domains under one id.
pub fn pool(domains: &[DomainDataset], id: &str) -> DomainDataset {
    let samples = domains
        .iter()
        .flat_map(|d| d.samples.iter().cloned())
        .map(|mut s| {
            s.domain = DomainId::new(id);
            s
        })
        .collect();
    DomainDataset::new(DomainId::new(id), samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy_batch;
    use crate::tensor::Tensor;

    /// `L(θ) = c · θ²` on every batch, whatever the samples.
    struct Quadratic(f64);

    impl Objective for Quadratic {
        fn evaluate<T: Real>(&self, params: &ParameterSet<T>, _: &[Vec<LabeledSample>], _: u64) -> Result<Evaluation<T>> {
            let th = params.get("theta").unwrap().data()[0];
            let c = T::from_f64(self.0);
            let mut grad = ParameterSet::new();
            grad.insert("theta", Tensor::new(vec![1], vec![T::from_f64(2.0) * c * th]))?;
            Ok(Evaluation {
                loss: c * th * th,
                grad,
                correct: 0,
                total: 0,
                bn_stats: Vec::new(),
            })
        }
    }

    fn theta(v: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.insert("theta", Tensor::new(vec![1], vec![v])).unwrap();
        p
    }

    fn dummy() -> Vec<Vec<LabeledSample>> {
        vec![Vec::new()]
    }

    #[test]
    fn analytic_probe() {
        let cfg = MetaConfig::default();
        let out = meta_step(&Quadratic(1.0), &theta(1.0), &dummy(), &dummy(), &cfg, 0).unwrap();
        let g = out.grad.get("theta").unwrap().data()[0];
        assert!((g - 3.996002).abs() < 1e-9, "{g}");
        let fo = MetaConfig {
            second_order: false,
            ..cfg
        };
        let g1 = meta_step(&Quadratic(1.0), &theta(1.0), &dummy(), &dummy(), &fo, 0).unwrap();
        assert!((g1.grad.get("theta").unwrap().data()[0] - (2.0 + 2.0 * 0.999)).abs() < 1e-12);
    }

    #[test]
    fn zero_beta_returns_train_gradient() {
        let cfg = MetaConfig {
            beta: 0.0,
            ..MetaConfig::default()
        };
        let out = meta_step(&Quadratic(1.5), &theta(0.7), &dummy(), &dummy(), &cfg, 0).unwrap();
        assert_eq!(out.grad.get("theta").unwrap().data()[0], 2.0 * 1.5 * 0.7);
        assert!(out.l_test.is_none());
    }

    #[test]
    fn split_sizes_and_errors() {
        let ids: Vec<DomainId> = ["a", "b"].iter().map(|s| DomainId::new(*s)).collect();
        let mut rng = RngHandle::new(0);
        let s = draw_meta_split(&ids, 1, &mut rng).unwrap();
        assert_eq!((s.meta_train.len(), s.virtual_target.len()), (1, 1));
        assert_ne!(s.meta_train, s.virtual_target);
        assert!(draw_meta_split(&ids, 2, &mut rng).is_err());
        assert!(draw_meta_split(&ids, 0, &mut rng).is_err());
    }

    #[test]
    fn split_frequencies_are_uniform() {
        let ids: Vec<DomainId> = ["a", "b", "c"].iter().map(|s| DomainId::new(*s)).collect();
        let mut rng = RngHandle::new(123);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let s = draw_meta_split(&ids, 1, &mut rng).unwrap();
            let i = ids.iter().position(|d| *d == s.virtual_target[0]).unwrap();
            counts[i] += 1;
            assert_eq!(s.meta_train.len() + s.virtual_target.len(), 3);
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = theta(1.0);
        let mut adam = Adam::new(0.01, 1);
        adam.step(&mut p, &theta(-3.0)).unwrap();
        assert!((p.get("theta").unwrap().data()[0] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn sampler_splits_budget_and_stratifies() {
        let cfg = ModelConfig::tiny();
        let a = DomainDataset::new(DomainId::new("a"), toy_batch(30, &cfg, 1));
        let b = DomainDataset::new(DomainId::new("b"), toy_batch(4, &cfg, 2));
        let mut rng = RngHandle::new(0);
        let out = sample_domain_batches(&[&a, &b, &a], 20, 3, &mut rng).unwrap();
        assert_eq!(out[0].len(), 7);
        assert_eq!(out[1].len(), 4);
        assert_eq!(out[2].len(), 6);
        let mut per_class = [0usize; 3];
        for s in &out[0] {
            per_class[s.label] += 1;
        }
        assert_eq!(per_class, [3, 2, 2]);
        let mut idx: Vec<usize> = out[0].iter().map(|s| s.origin_index).collect();
        idx.dedup();
        assert_eq!(idx.len(), 7);
    }

    fn tiny_setup() -> (ModelConfig, ModelState<f64>, Vec<Vec<LabeledSample>>, Vec<Vec<LabeledSample>>) {
        let cfg = ModelConfig::tiny();
        let state = model::init_model(&cfg, 11).unwrap();
        let train = vec![toy_batch(6, &cfg, 1), toy_batch(4, &cfg, 2)];
        let test = vec![toy_batch(5, &cfg, 3)];
        (cfg, state, train, test)
    }

    #[test]
    fn second_order_gradient_matches_finite_differences() {
        let (cfg, state, train, test) = tiny_setup();
        let obj = ModelObjective {
            cfg: &cfg,
            buffers: &state.buffers,
        };
        // A larger inner rate makes the curvature term visible.
        let meta = MetaConfig {
            alpha: 0.1,
            ..MetaConfig::default()
        };
        let out = meta_step(&obj, &state.params, &train, &test, &meta, 7).unwrap();
        let g = out.grad.flatten();
        let flat = state.params.flatten();
        let f = |x: &[f64]| meta_objective(&obj, &state.params.unflatten(x).unwrap(), &train, &test, &meta, 7).unwrap();
        let h = 1e-5;
        let mut rng = RngHandle::new(1);
        let mut worst: f64 = 0.0;
        for _ in 0..60 {
            let i = rng.below(flat.len());
            let (mut up, mut dn) = (flat.clone(), flat.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6));
        }
        assert!(worst < 1e-3, "max rel err {worst}");
    }

    #[test]
    fn inner_step_does_not_touch_params() {
        let (cfg, state, train, test) = tiny_setup();
        let obj = ModelObjective {
            cfg: &cfg,
            buffers: &state.buffers,
        };
        let before = state.params.clone();
        meta_step(&obj, &state.params, &train, &test, &MetaConfig::default(), 0).unwrap();
        assert_eq!(before, state.params);
    }

    #[test]
    fn duplicating_every_domain_leaves_loss_unchanged() {
        let (mut cfg, state, train, _) = tiny_setup();
        cfg.heads.eta = 1.0;
        cfg.encoder.dropout = 0.0;
        let obj = ModelObjective {
            cfg: &cfg,
            buffers: &state.buffers,
        };
        let base = meta_train_loss(&obj, &state.params, &train, 0).unwrap();
        let doubled: Vec<Vec<LabeledSample>> = train.iter().map(|b| [b.clone(), b.clone()].concat()).collect();
        let l = meta_train_loss(&obj, &state.params, &doubled, 0).unwrap();
        assert!((base - l).abs() < 1e-9, "{base} vs {l}");
    }

    #[test]
    fn empty_domain_batch_is_an_error() {
        let (cfg, state, mut train, _) = tiny_setup();
        train.push(Vec::new());
        let obj = ModelObjective {
            cfg: &cfg,
            buffers: &state.buffers,
        };
        assert!(meta_train_loss(&obj, &state.params, &train, 0).is_err());
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig::tiny(),
            meta: MetaConfig {
                batch_size: 12,
                max_epochs: 2,
                outer_lr: 0.01,
                ..MetaConfig::default()
            },
            augment: AugmentationConfig::default(),
        }
    }

    fn tiny_sources(cfg: &ModelConfig) -> Vec<DomainDataset> {
        (0..3)
            .map(|d| {
                let id = DomainId::new(format!("d{d}"));
                let samples = toy_batch(12, cfg, d)
                    .into_iter()
                    .map(|mut s| {
                        s.domain = id.clone();
                        s
                    })
                    .collect();
                DomainDataset::new(id, samples)
            })
            .collect()
    }

    #[test]
    fn training_is_seeded_and_zero_epochs_is_init() {
        let cfg = tiny_train_cfg();
        let src = tiny_sources(&cfg.model);
        let a = train::<f64>(&src, &cfg, &mut |_, _| Ok(())).unwrap();
        let b = train::<f64>(&src, &cfg, &mut |_, _| Ok(())).unwrap();
        assert_eq!(a.history.len(), 2);
        assert!((a.history[0].l_train - b.history[0].l_train).abs() < 1e-9);
        assert!(a.history[0].l_test.is_some() && a.history[0].vt_accuracy.is_some());
        let zero = TrainConfig {
            meta: MetaConfig {
                max_epochs: 0,
                ..cfg.meta.clone()
            },
            ..cfg.clone()
        };
        let z = train::<f64>(&src, &zero, &mut |_, _| Ok(())).unwrap();
        assert!(z.history.is_empty());
        assert_eq!(z.state, model::init_model(&cfg.model, cfg.meta.seed).unwrap());
    }

    #[test]
    fn zero_beta_pooled_matches_erm() {
        let cfg = tiny_train_cfg();
        let cfg = TrainConfig {
            meta: MetaConfig {
                beta: 0.0,
                ..cfg.meta
            },
            ..cfg
        };
        let pooled = pool(&tiny_sources(&cfg.model), "pool");
        let taco = train::<f64>(std::slice::from_ref(&pooled), &cfg, &mut |_, _| Ok(())).unwrap();
        let erm = train_erm::<f64>(&pooled, &cfg, &mut |_, _| Ok(())).unwrap();
        assert_eq!(taco.step_losses.len(), erm.step_losses.len());
        for (a, b) in taco.step_losses.iter().zip(&erm.step_losses) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn early_stop_after_patience() {
        let cfg = MetaConfig {
            patience: 3,
            ..MetaConfig::default()
        };
        let mut s = EarlyStop::new();
        assert!(!s.update(1.0, &cfg));
        assert!(!s.update(0.99995, &cfg));
        assert!(!s.update(0.99995, &cfg));
        assert!(s.update(1.0, &cfg));
    }
}
