//! WebAssembly bindings for the browser demo.
//!
//! Every export takes plain numbers or strings and returns a JSON string, so
//! the same functions are exercised by native tests.

use serde::Serialize;
use taco_core::augment::{self, AugmentationConfig, AugmentationKind};
use taco_core::data::{ParameterSet, TimeSeriesWindow};
use taco_core::encoder::{self, EncoderConfig, ForwardCtx};
use taco_core::heads;
use taco_core::ingest::{self, SynthSpec};
use taco_core::rng::RngHandle;
use wasm_bindgen::prelude::*;

const PREVIEW_LEN: usize = 128;

fn json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("demo output serialises")
}

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn channels(w: &TimeSeriesWindow) -> Vec<Vec<f64>> {
    (0..w.channels()).map(|c| w.channel(c)).collect()
}

#[derive(Serialize)]
pub struct Preview {
    pub kind: String,
    pub original: Vec<Vec<f64>>,
    pub augmented: Vec<Vec<f64>>,
}

/// Names accepted by [`augment_preview`].
#[wasm_bindgen]
pub fn augmentation_kinds() -> String {
    json(&AugmentationKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>())
}

pub fn preview(kind: &str, strength: f64, seed: u64) -> taco_core::Result<Preview> {
    let k = AugmentationKind::parse(kind).ok_or_else(|| taco_core::Error::config(format!("unknown augmentation `{kind}`")))?;
    let spec = SynthSpec {
        n_domains: 1,
        n_classes: 1,
        samples_per_class: 1,
        window_len: PREVIEW_LEN,
        channels: 3,
        noise_std: 0.05,
        seed,
        ..SynthSpec::default()
    };
    let (_, domains) = ingest::synth_domains(&spec)?;
    let w = &domains[0].samples[0].window;
    let s = strength.clamp(0.0, 2.0);
    let base = AugmentationConfig::default();
    let cfg = AugmentationConfig {
        rotation_max_angle_rad: (base.rotation_max_angle_rad * s).min(std::f64::consts::PI),
        scaling_sigma: base.scaling_sigma * s,
        timewarp_sigma: base.timewarp_sigma * s,
        magwarp_sigma: base.magwarp_sigma * s,
        jitter_sigma: base.jitter_sigma * s,
        triad_channel_groups: vec![[0, 1, 2]],
        ..base
    };
    let aug = augment::apply(k, w, &cfg, &mut RngHandle::new(seed.wrapping_add(1)))?;
    Ok(Preview {
        kind: k.name().to_string(),
        original: channels(w),
        augmented: channels(&aug),
    })
}

/// Synthetic 3-axis window before and after one augmentation; `strength`
/// in `[0, 2]` scales the default magnitudes.
#[wasm_bindgen]
pub fn augment_preview(kind: &str, strength: f64, seed: u32) -> Result<String, JsError> {
    preview(kind, strength, seed as u64).map(|p| json(&p)).map_err(err)
}

#[derive(Serialize)]
pub struct AttentionMap {
    pub signal: Vec<f64>,
    pub num_patches: usize,
    pub patch_len: usize,
    pub stride: usize,
    /// `[head][query][key]` probabilities of the first layer.
    pub heads: Vec<Vec<Vec<f64>>>,
}

pub fn demo_encoder() -> EncoderConfig {
    EncoderConfig {
        window_len: 64,
        channels: 1,
        patch_len: 8,
        stride: 4,
        n_layers: 1,
        n_heads: 2,
        latent_dim: 16,
        ff_dim: 32,
        dropout: 0.0,
        conv_kernel: 3,
        conv_out_channels: 4,
        ..EncoderConfig::default()
    }
}

pub fn attention(freq: f64, burst_at: f64, seed: u64) -> taco_core::Result<AttentionMap> {
    let cfg = demo_encoder();
    let mut params = ParameterSet::new();
    encoder::init_params(&cfg, &mut RngHandle::new(seed), &mut params)?;
    let l = cfg.window_len;
    let centre = burst_at.clamp(0.0, 1.0) * (l - 1) as f64;
    let signal: Vec<f64> = (0..l)
        .map(|t| {
            let t = t as f64;
            let burst = 2.0 * (-((t - centre) / 3.0).powi(2)).exp();
            (2.0 * std::f64::consts::PI * freq * t / l as f64).sin() + burst
        })
        .collect();
    let mut ctx = ForwardCtx::eval();
    ctx.capture_attention = true;
    encoder::encode_channel(&signal, &params, &cfg, &encoder::init_buffers(&cfg), &mut ctx)?;
    let n = cfg.num_patches();
    let heads = ctx.attention[0]
        .iter()
        .map(|p| p.data().chunks(n).take(n).map(<[f64]>::to_vec).collect())
        .collect();
    Ok(AttentionMap {
        signal,
        num_patches: n,
        patch_len: cfg.patch_len,
        stride: cfg.stride,
        heads,
    })
}

/// First-layer attention of a randomly initialised encoder on a sine
/// (`freq` cycles per window) with a bump at relative position `burst_at`.
#[wasm_bindgen]
pub fn attention_map(freq: f64, burst_at: f64, seed: u32) -> Result<String, JsError> {
    attention(freq, burst_at, seed as u64).map(|a| json(&a)).map_err(err)
}

#[derive(Serialize)]
pub struct SupconView {
    pub total: f64,
    pub per_anchor: Vec<f64>,
    /// Unit-normalised points the loss was computed on.
    pub points: Vec<[f64; 2]>,
    /// Negative gradient at each point, i.e. the descent direction.
    pub pull: Vec<[f64; 2]>,
}

pub fn supcon_view(xy: &[f64], labels: &[usize], tau: f64) -> taco_core::Result<SupconView> {
    if xy.len() != 2 * labels.len() {
        return Err(taco_core::Error::shape(format!("{} coordinates for {} labels", xy.len(), labels.len())));
    }
    let points: Vec<[f64; 2]> = xy
        .chunks(2)
        .map(|p| {
            let n = p[0].hypot(p[1]).max(heads::NORM_EPS);
            [p[0] / n, p[1] / n]
        })
        .collect();
    let z: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
    let b = heads::supcon_breakdown(&z, labels, tau)?;
    Ok(SupconView {
        total: b.total,
        per_anchor: b.per_anchor,
        pull: b.grad.iter().map(|g| [-g[0], -g[1]]).collect(),
        points,
    })
}

/// Supervised contrastive loss of 2-D points (flattened `x0, y0, x1, ...`)
/// projected onto the unit circle.
#[wasm_bindgen]
pub fn supcon_explore(xy: &[f64], labels: &[u32], tau: f64) -> Result<String, JsError> {
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    supcon_view(xy, &labels, tau).map(|v| json(&v)).map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_strength_is_identity_for_scaling() {
        let p = preview("scaling", 0.0, 3).unwrap();
        assert_eq!(p.original, p.augmented);
        assert_eq!(p.original.len(), 3);
        assert_eq!(p.original[0].len(), PREVIEW_LEN);
    }

    #[test]
    fn rotation_preserves_triad_norms() {
        let p = preview("rotation", 1.0, 5).unwrap();
        for t in 0..PREVIEW_LEN {
            let n = |s: &Vec<Vec<f64>>| (0..3).map(|c| s[c][t].powi(2)).sum::<f64>().sqrt();
            assert!((n(&p.original) - n(&p.augmented)).abs() < 1e-9);
        }
    }

    #[test]
    fn unknown_kind_is_an_error() {
        assert!(preview("shear", 1.0, 0).is_err());
        let kinds: Vec<String> = serde_json::from_str(&augmentation_kinds()).unwrap();
        assert_eq!(kinds.len(), 6);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let a = attention(3.0, 0.5, 1).unwrap();
        assert_eq!(a.heads.len(), 2);
        assert_eq!(a.num_patches, 15);
        for head in &a.heads {
            assert_eq!(head.len(), 15);
            for row in head {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn supcon_view_matches_core_loss() {
        let xy = [1.0, 0.0, 2.0, 0.2, 0.0, -3.0, 0.1, -1.0];
        let labels = [0, 0, 1, 1];
        let v = supcon_view(&xy, &labels, 0.5).unwrap();
        let z: Vec<Vec<f64>> = v.points.iter().map(|p| p.to_vec()).collect();
        assert!((v.total - heads::supcon_loss(&z, &labels, 0.5).unwrap()).abs() < 1e-12);
        assert!(supcon_view(&xy[..3], &labels, 0.5).is_err());
    }
}
