//! Full network: encoder, projection head and classifier, with loss and
//! gradient evaluation on labelled batches.

use serde::{Deserialize, Serialize};

use crate::data::{LabeledSample, ParameterSet, TimeSeriesWindow};
use crate::encoder::{self, Buffers, EncoderConfig, ForwardCtx, Mode, ParamVars};
use crate::error::{Error, Result};
use crate::heads::{self, HeadsConfig};
use crate::rng::RngHandle;
use crate::scalar::Real;
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadsConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig::tiny(),
            heads: HeadsConfig::tiny(),
            num_classes: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.heads.validate()?;
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Real = f64> {
    pub params: ParameterSet<T>,
    pub buffers: Buffers,
}

pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelState<f64>> {
    cfg.validate()?;
    let mut rng = RngHandle::stream(seed, 0x1417);
    let mut params = ParameterSet::new();
    encoder::init_params(&cfg.encoder, &mut rng, &mut params)?;
    heads::init_params(&cfg.heads, cfg.encoder.feature_dim(), cfg.num_classes, &mut rng, &mut params)?;
    Ok(ModelState {
        params,
        buffers: encoder::init_buffers(&cfg.encoder),
    })
}

/// Loss, gradient and bookkeeping of one forward/backward pass.
#[derive(Clone, Debug)]
pub struct Evaluation<T: Real> {
    pub loss: T,
    pub grad: ParameterSet<T>,
    /// Correct predictions among non-augmented samples.
    pub correct: usize,
    pub total: usize,
    pub bn_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if v.gt(row[best]) {
            best = i;
        }
    }
    best
}

/// Meta-loss of `samples` (each tagged with a group index, see
/// [`heads::LossWeights`]) and its gradient with respect to every parameter.
pub fn loss_and_grad<T: Real>(
    params: &ParameterSet<T>,
    buffers: &Buffers,
    cfg: &ModelConfig,
    samples: &[&LabeledSample],
    groups: &[usize],
    mut ctx: ForwardCtx,
) -> Result<Evaluation<T>> {
    if samples.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    if groups.len() != samples.len() {
        return Err(Error::shape(format!("{} samples but {} group tags", samples.len(), groups.len())));
    }
    let tape = Tape::new();
    let pv = ParamVars::register(&tape, params);
    let windows: Vec<&TimeSeriesWindow> = samples.iter().map(|s| &s.window).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let features = encoder::encode(&tape, &windows, &pv, &cfg.encoder, buffers, &mut ctx)?;
    let (loss, logits) = heads::meta_loss_on_tape(&tape, features, &pv, &cfg.heads, &labels, groups)?;
    let loss_value = loss.value().data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Training(format!("non-finite loss {:?}", loss_value.to_f64())));
    }
    let (mut correct, mut total) = (0, 0);
    {
        let lv = logits.value();
        for (row, s) in lv.data().chunks(cfg.num_classes).zip(samples) {
            if !s.is_augmented {
                total += 1;
                correct += (argmax(row) == s.label) as usize;
            }
        }
    }
    let grads = tape.backward(loss);
    Ok(Evaluation {
        loss: loss_value,
        grad: pv.gradients(&grads),
        correct,
        total,
        bn_stats: ctx.bn_stats,
    })
}

/// Exponential moving average of BatchNorm statistics.
pub fn update_buffers(buffers: &mut Buffers, stats: &[(String, Vec<f64>, Vec<f64>)], momentum: f64) {
    for (name, mean, var) in stats {
        if let Some((rm, rv)) = buffers.get_mut(name) {
            for (r, m) in rm.iter_mut().zip(mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            for (r, v) in rv.iter_mut().zip(var) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
        }
    }
}

const EVAL_CHUNK: usize = 64;

/// Class logits in eval mode.
pub fn logits<T: Real>(state: &ModelState<T>, cfg: &ModelConfig, windows: &[&TimeSeriesWindow]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_CHUNK) {
        let tape = Tape::new();
        let pv = ParamVars::register(&tape, &state.params);
        let mut ctx = ForwardCtx::new(Mode::Eval, 0);
        let f = encoder::encode(&tape, chunk, &pv, &cfg.encoder, &state.buffers, &mut ctx)?;
        let l = heads::classify(&tape, f, &pv, &cfg.heads)?;
        let lv = l.value();
        out.extend(lv.data().chunks(cfg.num_classes).map(|r| r.iter().map(|v| v.to_f64()).collect()));
    }
    Ok(out)
}

pub fn predict<T: Real>(state: &ModelState<T>, cfg: &ModelConfig, windows: &[&TimeSeriesWindow]) -> Result<Vec<usize>> {
    Ok(logits(state, cfg, windows)?.iter().map(|r| argmax(r)).collect())
}

/// Fraction of samples classified correctly in eval mode.
pub fn accuracy<T: Real>(state: &ModelState<T>, cfg: &ModelConfig, samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty domain".into()));
    }
    let windows: Vec<&TimeSeriesWindow> = samples.iter().map(|s| &s.window).collect();
    let pred = predict(state, cfg, &windows)?;
    let hits = pred.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(hits as f64 / samples.len() as f64)
}
