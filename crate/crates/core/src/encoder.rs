//! Channel-independent patch transformer encoder with 1D-convolutional fusion.
//!
//! Each sensor channel is split into patches, projected to the latent space
//! with a learnable positional table, and passed through shared transformer
//! blocks (multi-head attention, residual, BatchNorm, feed-forward, residual,
//! BatchNorm). The per-channel outputs are flattened patch-major
//! (`n * D + d`), stacked as `M` convolution channels, convolved with a valid
//! 1D kernel, passed through ReLU and averaged over positions.
//!
//! Head merge: head `h` produces `softmax(Q_h K_hᵀ / √d_k) (X W_h^V)` of width
//! `D`; heads are combined as `Σ_h O_h W_h^O + b^O`.
//!
//! Parameter layout (`x · W` convention, so `W_p` is stored as `L' × D`):
//!
//! | name                      | shape        |
//! |---------------------------|--------------|
//! | `enc.patch_proj`          | `L' × D`     |
//! | `enc.pos`                 | `N × D`      |
//! | `enc.l{i}.h{h}.wq`/`.wk`  | `D × d_k`    |
//! | `enc.l{i}.h{h}.wv`/`.wo`  | `D × D`      |
//! | `enc.l{i}.attn_bias`      | `D`          |
//! | `enc.l{i}.bn{1,2}.gamma`/`.beta` | `D`   |
//! | `enc.l{i}.ff1.w`/`.b`     | `D × F`, `F` |
//! | `enc.l{i}.ff2.w`/`.b`     | `F × D`, `D` |
//! | `enc.conv.w`/`.b`         | `(M·K) × C_out`, `C_out` |

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{ParameterSet, TimeSeriesWindow};
use crate::error::{Error, Result};
use crate::rng::RngHandle;
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub window_len: usize,
    pub channels: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub latent_dim: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub conv_kernel: usize,
    pub conv_out_channels: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::dsads()
    }
}

impl EncoderConfig {
    /// 45 channels, 125-step windows, 16-step patches with stride 4.
    pub fn dsads() -> Self {
        Self {
            window_len: 125,
            channels: 45,
            patch_len: 16,
            stride: 4,
            n_layers: 3,
            n_heads: 4,
            latent_dim: 32,
            ff_dim: 64,
            dropout: 0.2,
            conv_kernel: 8,
            conv_out_channels: 128,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn pamap2() -> Self {
        Self {
            window_len: 512,
            channels: 27,
            patch_len: 64,
            stride: 8,
            ..Self::dsads()
        }
    }

    pub fn usc_had() -> Self {
        Self {
            window_len: 500,
            channels: 6,
            patch_len: 64,
            stride: 8,
            ..Self::dsads()
        }
    }

    /// Few-hundred-scalar configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            window_len: 16,
            channels: 2,
            patch_len: 4,
            stride: 4,
            n_layers: 1,
            n_heads: 2,
            latent_dim: 8,
            ff_dim: 16,
            dropout: 0.0,
            conv_kernel: 8,
            conv_out_channels: 4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn num_patches(&self) -> usize {
        num_patches(self.window_len, self.patch_len, self.stride)
    }

    pub fn key_dim(&self) -> usize {
        self.latent_dim / self.n_heads
    }

    /// Length of the flattened per-channel representation, `D · N`.
    pub fn flat_len(&self) -> usize {
        self.latent_dim * self.num_patches()
    }

    pub fn feature_dim(&self) -> usize {
        self.conv_out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.window_len == 0 || self.channels == 0 {
            return bad("window_len and channels must be positive".into());
        }
        if self.patch_len == 0 || self.patch_len > self.window_len {
            return bad(format!("patch_len {} must be in 1..={}", self.patch_len, self.window_len));
        }
        if self.stride == 0 {
            return bad("stride must be >= 1".into());
        }
        if self.n_heads == 0 || self.latent_dim % self.n_heads != 0 {
            return bad(format!("latent_dim {} not divisible by n_heads {}", self.latent_dim, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.conv_kernel == 0 || self.conv_kernel > self.flat_len() {
            return bad(format!("conv_kernel {} exceeds flattened length {}", self.conv_kernel, self.flat_len()));
        }
        if self.ff_dim == 0 || self.conv_out_channels == 0 || self.n_layers == 0 {
            return bad("ff_dim, conv_out_channels and n_layers must be positive".into());
        }
        Ok(())
    }
}

pub fn num_patches(len: usize, patch_len: usize, stride: usize) -> usize {
    (len - patch_len) / stride + 1
}

/// Patches of one univariate series; row `j` is the slice `[jS, jS + L')`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub patch_len: usize,
    pub num_patches: usize,
    data: Vec<f64>,
}

impl PatchSequence {
    pub fn patch(&self, j: usize) -> &[f64] {
        &self.data[j * self.patch_len..(j + 1) * self.patch_len]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Splits a series into stride-`S` patches; trailing steps that do not fill
/// a whole patch are dropped.
pub fn make_patches(x: &[f64], patch_len: usize, stride: usize) -> Result<PatchSequence> {
    if patch_len == 0 || stride == 0 {
        return Err(Error::config("patch_len and stride must be positive"));
    }
    if x.len() < patch_len {
        return Err(Error::shape(format!("series length {} shorter than patch length {patch_len}", x.len())));
    }
    let n = num_patches(x.len(), patch_len, stride);
    let mut data = Vec::with_capacity(n * patch_len);
    for j in 0..n {
        data.extend_from_slice(&x[j * stride..j * stride + patch_len]);
    }
    Ok(PatchSequence {
        patch_len,
        num_patches: n,
        data,
    })
}

/// `Softmax(Q Kᵀ / √d_k) V` on plain matrices (`Q: n × d`, `K: m × d`, `V: m × e`).
pub fn attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, d_k: usize) -> Result<Tensor<f64>> {
    let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
        return Err(Error::shape("attention expects matrices"));
    }
    if sq[1] != sk[1] {
        return Err(Error::shape(format!("query width {} != key width {}", sq[1], sk[1])));
    }
    if sk[0] != sv[0] {
        return Err(Error::shape(format!("{} keys but {} values", sk[0], sv[0])));
    }
    if d_k == 0 {
        return Err(Error::shape("d_k must be positive"));
    }
    let tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let (out, _) = scaled_dot_attention(&tape, qv, kv, vv, d_k);
    let r = out.value().clone();
    Ok(r)
}

/// Returns the attention output and the probability matrix.
pub fn scaled_dot_attention<'t, T: Real>(
    tape: &'t Tape<T>,
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    d_k: usize,
) -> (Var<'t, T>, Var<'t, T>) {
    let scores = tape.matmul(q, k, false, true);
    let scores = tape.scale(scores, T::from_f64(1.0 / (d_k as f64).sqrt()));
    let probs = tape.softmax(scores);
    (tape.matmul(probs, v, false, false), probs)
}

/// Per-forward mutable state: dropout stream, observed batch statistics and
/// optional attention capture.
pub struct ForwardCtx {
    pub mode: Mode,
    dropout_rng: RngHandle,
    /// `(buffer prefix, mean, var)` of every train-mode BatchNorm call.
    pub bn_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
    pub capture_attention: bool,
    /// `[layer][head]` probability tensors `[B·M, N, N]` when captured.
    pub attention: Vec<Vec<Tensor<f64>>>,
}

impl ForwardCtx {
    pub fn new(mode: Mode, dropout_seed: u64) -> Self {
        Self {
            mode,
            dropout_rng: RngHandle::stream(dropout_seed, 0xd1),
            bn_stats: Vec::new(),
            capture_attention: false,
            attention: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }
}

/// Running BatchNorm statistics keyed by `enc.l{i}.bn{j}`.
pub type Buffers = BTreeMap<String, (Vec<f64>, Vec<f64>)>;

pub fn init_buffers(cfg: &EncoderConfig) -> Buffers {
    let d = cfg.latent_dim;
    let mut b = Buffers::new();
    for l in 0..cfg.n_layers {
        for j in [1, 2] {
            b.insert(format!("enc.l{l}.bn{j}"), (vec![0.0; d], vec![1.0; d]));
        }
    }
    b
}

fn uniform(shape: Vec<usize>, bound: f64, rng: &mut RngHandle) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect();
    Tensor::new(shape, data)
}

/// Linear weight with the usual `U(-1/√fan_in, 1/√fan_in)` initialisation.
pub(crate) fn linear_weight(fan_in: usize, fan_out: usize, rng: &mut RngHandle) -> Tensor<f64> {
    uniform(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

pub fn init_params(cfg: &EncoderConfig, rng: &mut RngHandle, into: &mut ParameterSet<f64>) -> Result<()> {
    cfg.validate()?;
    let (d, dk, f, n) = (cfg.latent_dim, cfg.key_dim(), cfg.ff_dim, cfg.num_patches());
    into.insert("enc.patch_proj", linear_weight(cfg.patch_len, d, rng))?;
    into.insert("enc.pos", uniform(vec![n, d], 0.02, rng))?;
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            into.insert(format!("enc.l{l}.h{h}.wq"), linear_weight(d, dk, rng))?;
            into.insert(format!("enc.l{l}.h{h}.wk"), linear_weight(d, dk, rng))?;
            into.insert(format!("enc.l{l}.h{h}.wv"), linear_weight(d, d, rng))?;
            into.insert(format!("enc.l{l}.h{h}.wo"), linear_weight(d, d, rng))?;
        }
        into.insert(format!("enc.l{l}.attn_bias"), Tensor::zeros(vec![d]))?;
        for j in [1, 2] {
            into.insert(format!("enc.l{l}.bn{j}.gamma"), Tensor::from_f64(vec![d], &vec![1.0; d]))?;
            into.insert(format!("enc.l{l}.bn{j}.beta"), Tensor::zeros(vec![d]))?;
        }
        into.insert(format!("enc.l{l}.ff1.w"), linear_weight(d, f, rng))?;
        into.insert(format!("enc.l{l}.ff1.b"), Tensor::zeros(vec![f]))?;
        into.insert(format!("enc.l{l}.ff2.w"), linear_weight(f, d, rng))?;
        into.insert(format!("enc.l{l}.ff2.b"), Tensor::zeros(vec![d]))?;
    }
    into.insert(
        "enc.conv.w",
        linear_weight(cfg.channels * cfg.conv_kernel, cfg.conv_out_channels, rng),
    )?;
    into.insert("enc.conv.b", Tensor::zeros(vec![cfg.conv_out_channels]))?;
    Ok(())
}

/// Parameters registered on a tape, by name.
pub struct ParamVars<'t, T: Real> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Real> ParamVars<'t, T> {
    pub fn register(tape: &'t Tape<T>, params: &ParameterSet<T>) -> Self {
        Self {
            vars: params.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars.get(name).copied().ok_or_else(|| Error::Parameter {
            name: name.to_string(),
            reason: "missing".into(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, T>)> {
        self.vars.iter()
    }

    /// Collects the gradient of every registered parameter.
    pub fn gradients(&self, grads: &crate::tape::Gradients<T>) -> ParameterSet<T> {
        let mut out = ParameterSet::new();
        for (k, v) in &self.vars {
            let g = grads.get_or_zeros(*v);
            out.insert(k.clone(), Tensor::new(v.shape(), g)).expect("unique names");
        }
        out
    }
}

/// Patches of every channel of every window as a `[B·M, N, L']` tensor.
pub fn patch_tensor<T: Real>(windows: &[&TimeSeriesWindow], cfg: &EncoderConfig) -> Result<Tensor<T>> {
    let (l, m, p, s) = (cfg.window_len, cfg.channels, cfg.patch_len, cfg.stride);
    let n = cfg.num_patches();
    let mut data = Vec::with_capacity(windows.len() * m * n * p);
    for w in windows {
        if w.len() != l || w.channels() != m {
            return Err(Error::shape(format!(
                "window {}x{} does not match encoder {l}x{m}",
                w.len(),
                w.channels()
            )));
        }
        for c in 0..m {
            for j in 0..n {
                for i in 0..p {
                    data.push(T::from_f64(w.get(j * s + i, c)));
                }
            }
        }
    }
    Ok(Tensor::new(vec![windows.len() * m, n, p], data))
}

fn dropout<'t, T: Real>(tape: &'t Tape<T>, x: Var<'t, T>, p: f64, ctx: &mut ForwardCtx) -> Var<'t, T> {
    if ctx.mode == Mode::Eval || p == 0.0 {
        return x;
    }
    let n = x.value().len();
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mask = (0..n)
        .map(|_| if ctx.dropout_rng.uniform() < p { T::zero() } else { keep })
        .collect();
    tape.mul_const(x, mask)
}

fn batch_norm<'t, T: Real>(
    tape: &'t Tape<T>,
    x: Var<'t, T>,
    pv: &ParamVars<'t, T>,
    prefix: &str,
    cfg: &EncoderConfig,
    buffers: &Buffers,
    ctx: &mut ForwardCtx,
) -> Result<Var<'t, T>> {
    let gamma = pv.get(&format!("{prefix}.gamma"))?;
    let beta = pv.get(&format!("{prefix}.beta"))?;
    match ctx.mode {
        Mode::Train => {
            let (y, stats) = tape.batch_norm(x, gamma, beta, cfg.bn_eps);
            ctx.bn_stats.push((
                prefix.to_string(),
                stats.mean.iter().map(|v| v.to_f64()).collect(),
                stats.var.iter().map(|v| v.to_f64()).collect(),
            ));
            Ok(y)
        }
        Mode::Eval => {
            let (mean, var) = buffers.get(prefix).ok_or_else(|| Error::Parameter {
                name: prefix.to_string(),
                reason: "missing running statistics".into(),
            })?;
            let mean: Vec<T> = mean.iter().map(|&v| T::from_f64(v)).collect();
            let var: Vec<T> = var.iter().map(|&v| T::from_f64(v)).collect();
            Ok(tape.batch_norm_eval(x, gamma, beta, &mean, &var, cfg.bn_eps))
        }
    }
}

/// Transformer stack applied to patch tensors `[R, N, L']`, one row per
/// univariate series. Returns `z` of shape `[R, N, D]`.
pub fn encode_channels<'t, T: Real>(
    tape: &'t Tape<T>,
    patches: Var<'t, T>,
    pv: &ParamVars<'t, T>,
    cfg: &EncoderConfig,
    buffers: &Buffers,
    ctx: &mut ForwardCtx,
) -> Result<Var<'t, T>> {
    let shape = patches.shape();
    if shape.len() != 3 || shape[1] != cfg.num_patches() || shape[2] != cfg.patch_len {
        return Err(Error::shape(format!("patch tensor {shape:?} does not match encoder config")));
    }
    let mut x = tape.add_bias(tape.matmul(patches, pv.get("enc.patch_proj")?, false, false), pv.get("enc.pos")?);
    let dk = cfg.key_dim();
    for l in 0..cfg.n_layers {
        let mut merged: Option<Var<'t, T>> = None;
        let mut captured = Vec::new();
        for h in 0..cfg.n_heads {
            let q = tape.matmul(x, pv.get(&format!("enc.l{l}.h{h}.wq"))?, false, false);
            let k = tape.matmul(x, pv.get(&format!("enc.l{l}.h{h}.wk"))?, false, false);
            let v = tape.matmul(x, pv.get(&format!("enc.l{l}.h{h}.wv"))?, false, false);
            let (o, probs) = scaled_dot_attention(tape, q, k, v, dk);
            if ctx.capture_attention {
                captured.push(probs.value().to_f64());
            }
            let wo = pv.get(&format!("enc.l{l}.h{h}.wo"))?;
            let o = tape.matmul(o, wo, false, false);
            merged = Some(match merged {
                Some(acc) => tape.add(acc, o),
                None => o,
            });
        }
        if ctx.capture_attention {
            ctx.attention.push(captured);
        }
        let attn = tape.add_bias(merged.expect("at least one head"), pv.get(&format!("enc.l{l}.attn_bias"))?);
        let attn = dropout(tape, attn, cfg.dropout, ctx);
        x = batch_norm(tape, tape.add(x, attn), pv, &format!("enc.l{l}.bn1"), cfg, buffers, ctx)?;
        let hdn = tape.add_bias(tape.matmul(x, pv.get(&format!("enc.l{l}.ff1.w"))?, false, false), pv.get(&format!("enc.l{l}.ff1.b"))?);
        let hdn = tape.relu(hdn);
        let ff = tape.add_bias(tape.matmul(hdn, pv.get(&format!("enc.l{l}.ff2.w"))?, false, false), pv.get(&format!("enc.l{l}.ff2.b"))?);
        let ff = dropout(tape, ff, cfg.dropout, ctx);
        x = batch_norm(tape, tape.add(x, ff), pv, &format!("enc.l{l}.bn2"), cfg, buffers, ctx)?;
    }
    Ok(x)
}

/// Full encoder: `[B]` windows to `[B, C_out]` features.
pub fn encode<'t, T: Real>(
    tape: &'t Tape<T>,
    windows: &[&TimeSeriesWindow],
    pv: &ParamVars<'t, T>,
    cfg: &EncoderConfig,
    buffers: &Buffers,
    ctx: &mut ForwardCtx,
) -> Result<Var<'t, T>> {
    let b = windows.len();
    if b == 0 {
        return Err(Error::shape("empty batch"));
    }
    let patches = tape.constant(patch_tensor(windows, cfg)?);
    let z = encode_channels(tape, patches, pv, cfg, buffers, ctx)?;
    let z = tape.reshape(z, vec![b, cfg.channels, cfg.flat_len()]);
    let cols = tape.unfold1d(z, cfg.conv_kernel);
    let conv = tape.add_bias(tape.matmul(cols, pv.get("enc.conv.w")?, false, false), pv.get("enc.conv.b")?);
    Ok(tape.mean_middle(tape.relu(conv)))
}

/// Encodes one univariate series to its `N × D` representation (stored
/// row-per-patch).
pub fn encode_channel(
    x: &[f64],
    params: &ParameterSet<f64>,
    cfg: &EncoderConfig,
    buffers: &Buffers,
    ctx: &mut ForwardCtx,
) -> Result<Tensor<f64>> {
    cfg.validate()?;
    if x.len() != cfg.window_len {
        return Err(Error::shape(format!("series length {} != {}", x.len(), cfg.window_len)));
    }
    let p = make_patches(x, cfg.patch_len, cfg.stride)?;
    let tape = Tape::new();
    let pv = ParamVars::register(&tape, params);
    let patches = tape.constant(Tensor::from_f64(vec![1, p.num_patches, p.patch_len], p.data()));
    let z = encode_channels(&tape, patches, &pv, cfg, buffers, ctx)?;
    let r = z.value().clone().reshaped(vec![p.num_patches, cfg.latent_dim]);
    Ok(r)
}

/// Feature vector of one window.
pub fn encode_window(
    w: &TimeSeriesWindow,
    params: &ParameterSet<f64>,
    cfg: &EncoderConfig,
    buffers: &Buffers,
    ctx: &mut ForwardCtx,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let tape = Tape::new();
    let pv = ParamVars::register(&tape, params);
    let f = encode(&tape, &[w], &pv, cfg, buffers, ctx)?;
    let r = f.value().data().to_vec();
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut RngHandle) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect())
    }

    #[test]
    fn patch_counts_match_enumeration() {
        for (l, p, s) in [(125, 16, 4), (512, 64, 8), (16, 16, 4), (500, 64, 8)] {
            let starts = (0..).map(|j| j * s).take_while(|&st| st + p <= l).count();
            let x: Vec<f64> = (0..l).map(|i| i as f64).collect();
            assert_eq!(make_patches(&x, p, s).unwrap().num_patches, starts);
        }
        assert_eq!(num_patches(125, 16, 4), 28);
        assert_eq!(num_patches(512, 64, 8), 57);
    }

    #[test]
    fn single_full_patch_equals_input() {
        let x: Vec<f64> = (0..16).map(|i| (i as f64).sqrt()).collect();
        let p = make_patches(&x, 16, 4).unwrap();
        assert_eq!(p.num_patches, 1);
        assert_eq!(p.patch(0), &x[..]);
    }

    #[test]
    fn short_series_is_an_error() {
        assert!(make_patches(&[1.0; 10], 16, 4).is_err());
    }

    #[test]
    fn non_overlapping_patches_reassemble() {
        let x: Vec<f64> = (0..27).map(|i| i as f64 * 0.5).collect();
        let p = make_patches(&x, 4, 4).unwrap();
        assert_eq!(p.num_patches, 6);
        assert_eq!(p.data(), &x[..24]);
    }

    #[test]
    fn attention_constant_scores_average_values() {
        let q = Tensor::from_f64(vec![2, 2], &[0.0; 4]);
        let k = Tensor::from_f64(vec![3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = Tensor::from_f64(vec![3, 2], &[1.0, 10.0, 2.0, 20.0, 6.0, 60.0]);
        let out = attention(&q, &k, &v, 2).unwrap();
        for r in 0..2 {
            assert!((out.data()[r * 2] - 3.0).abs() < 1e-12);
            assert!((out.data()[r * 2 + 1] - 30.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut rng = RngHandle::new(3);
        let q = rand_matrix(4, 3, &mut rng);
        let k = rand_matrix(1, 3, &mut rng);
        let v = Tensor::from_f64(vec![1, 2], &[7.0, -2.0]);
        let out = attention(&q, &k, &v, 3).unwrap();
        for r in 0..4 {
            assert!((out.data()[r * 2] - 7.0).abs() < 1e-12);
            assert!((out.data()[r * 2 + 1] + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut rng = RngHandle::new(11);
        let (q, k, v) = (rand_matrix(3, 4, &mut rng), rand_matrix(5, 4, &mut rng), rand_matrix(5, 2, &mut rng));
        let out = attention(&q, &k, &v, 4).unwrap();
        for i in 0..3 {
            let mut scores = [0.0f64; 5];
            for j in 0..5 {
                let mut s = 0.0;
                for c in 0..4 {
                    s += q.data()[i * 4 + c] * k.data()[j * 4 + c];
                }
                scores[j] = s / 2.0;
            }
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for e in 0..2 {
                let mut acc = 0.0;
                for j in 0..5 {
                    acc += (scores[j] - mx).exp() / z * v.data()[j * 2 + e];
                }
                assert!((out.data()[i * 2 + e] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_dimension_errors() {
        let a = Tensor::from_f64(vec![2, 3], &[0.0; 6]);
        let b = Tensor::from_f64(vec![2, 4], &[0.0; 8]);
        assert!(attention(&a, &b, &a, 3).is_err());
        let c = Tensor::from_f64(vec![3, 3], &[0.0; 9]);
        assert!(attention(&a, &a, &c, 3).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_in_forward_pass() {
        let cfg = EncoderConfig::tiny();
        let mut params = ParameterSet::new();
        init_params(&cfg, &mut RngHandle::new(1), &mut params).unwrap();
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let mut ctx = ForwardCtx::eval();
        ctx.capture_attention = true;
        encode_channel(&x, &params, &cfg, &init_buffers(&cfg), &mut ctx).unwrap();
        for layer in &ctx.attention {
            for probs in layer {
                let n = probs.shape()[2];
                for row in probs.data().chunks(n) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn dsads_shapes() {
        let cfg = EncoderConfig::dsads();
        let mut params = ParameterSet::new();
        init_params(&cfg, &mut RngHandle::new(0), &mut params).unwrap();
        let buffers = init_buffers(&cfg);
        let x: Vec<f64> = (0..125).map(|i| (i as f64 * 0.1).cos()).collect();
        let z = encode_channel(&x, &params, &cfg, &buffers, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(z.shape(), &[28, 32]);
        let w = TimeSeriesWindow::new(125, 45, (0..125 * 45).map(|i| (i as f64 * 0.013).sin()).collect(), 25.0).unwrap();
        let f1 = encode_window(&w, &params, &cfg, &buffers, &mut ForwardCtx::eval()).unwrap();
        let f2 = encode_window(&w, &params, &cfg, &buffers, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(f1.len(), 128);
        assert_eq!(f1, f2);
    }

    #[test]
    fn degenerate_zero_input_is_finite() {
        let cfg = EncoderConfig::tiny();
        let mut params = ParameterSet::new();
        init_params(&cfg, &mut RngHandle::new(2), &mut params).unwrap();
        let pos = params.get_mut("enc.pos").unwrap();
        pos.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for beta in ["enc.l0.bn1.beta", "enc.l0.bn2.beta"] {
            params.get_mut(beta).unwrap().data_mut().fill(0.25);
        }
        let z = encode_channel(&[0.0; 16], &params, &cfg, &init_buffers(&cfg), &mut ForwardCtx::new(Mode::Train, 0)).unwrap();
        // All-zero input collapses every row to the BatchNorm shift.
        for v in z.data() {
            assert!(v.is_finite());
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn channel_permutation_permutes_representations() {
        let cfg = EncoderConfig {
            channels: 3,
            ..EncoderConfig::tiny()
        };
        let mut params = ParameterSet::new();
        init_params(&cfg, &mut RngHandle::new(4), &mut params).unwrap();
        let buffers = init_buffers(&cfg);
        let mut rng = RngHandle::new(9);
        let w = TimeSeriesWindow::new(16, 3, (0..48).map(|_| rng.normal(0.0, 1.0)).collect(), 1.0).unwrap();
        let perm = [2usize, 0, 1];
        let mut wp = w.clone();
        for t in 0..16 {
            for (dst, &src) in perm.iter().enumerate() {
                wp.set(t, dst, w.get(t, src));
            }
        }
        let run = |win: &TimeSeriesWindow| {
            let tape = Tape::<f64>::new();
            let pv = ParamVars::register(&tape, &params);
            let patches = tape.constant(patch_tensor(&[win], &cfg).unwrap());
            let z = encode_channels(&tape, patches, &pv, &cfg, &buffers, &mut ForwardCtx::eval()).unwrap();
            let r = z.value().clone();
            r
        };
        let (z, zp) = (run(&w), run(&wp));
        let per = cfg.flat_len();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(&zp.data()[dst * per..(dst + 1) * per], &z.data()[src * per..(src + 1) * per]);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = EncoderConfig::tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::tiny();
        c.patch_len = 20;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }
}
