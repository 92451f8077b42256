//! Analytic per-sample training FLOPs for language and vision transformers.
//!
//! Each layer is charged for the QKV projection, the score and reduction
//! matmuls, the softmax, the output projection and a two-matmul feed-forward.
//! Training is charged at 3x the forward pass (backward = 2x forward).
//!
//! `n_ctx` is taken as given. In practice it approximates the per-batch
//! maximum caption length, so a global maximum overestimates short captions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};

pub const CLIP_VOCAB: u64 = 49408;
pub const SHORT_CTX: u64 = 77;
pub const LONG_CTX: u64 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LangCostConfig {
    pub n_ctx: u64,
    pub n_vocab: u64,
    pub d_model: u64,
    pub n_heads: u64,
    pub d_key: u64,
    pub d_ff: u64,
    pub n_layers: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionCostConfig {
    pub n_patch: u64,
    pub d_patch: u64,
    pub n_channels: u64,
    pub d_model: u64,
    pub n_heads: u64,
    pub d_key: u64,
    pub d_ff: u64,
    pub n_layers: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub embedding_flops: u64,
    pub per_layer_attention_flops: u64,
    pub per_layer_ff_flops: u64,
    pub forward_total: u64,
    pub train_total: u64,
}

/// FLOPs as GFLOPs with one decimal.
pub struct Giga(pub u64);

impl fmt::Display for Giga {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}", self.0 as f64 / 1e9)
    }
}

fn require_positive(fields: &[(&str, u64)]) -> Result<()> {
    for (name, v) in fields {
        if *v == 0 {
            return Err(LiftError::Config(format!("{name} must be positive")));
        }
    }
    Ok(())
}

fn overflow() -> LiftError {
    LiftError::Numeric("FLOPs count overflows u64".into())
}

fn product(xs: &[u64]) -> Result<u64> {
    xs.iter()
        .try_fold(1u64, |acc, &x| acc.checked_mul(x))
        .ok_or_else(overflow)
}

fn sum(xs: &[u64]) -> Result<u64> {
    xs.iter()
        .try_fold(0u64, |acc, &x| acc.checked_add(x))
        .ok_or_else(overflow)
}

/// Shared transformer-stack accounting over `n` tokens.
fn stack(
    n: u64,
    emb: u64,
    d_model: u64,
    n_heads: u64,
    d_key: u64,
    d_ff: u64,
    n_layers: u64,
) -> Result<CostReport> {
    let inner = product(&[d_key, n_heads])?;
    let qkv = product(&[2, n, 3, d_model, inner])?;
    let qk = product(&[2, n, n, inner])?;
    let soft = product(&[3, n_heads, n, n])?;
    let red = product(&[2, n, n, inner])?;
    let proj = product(&[2, n, inner, d_model])?;
    let attn = sum(&[qkv, qk, soft, red, proj])?;
    let ff = product(&[4, n, d_model, d_ff])?;
    let forward = sum(&[emb, product(&[n_layers, sum(&[attn, ff])?])?])?;
    Ok(CostReport {
        embedding_flops: emb,
        per_layer_attention_flops: attn,
        per_layer_ff_flops: ff,
        forward_total: forward,
        train_total: product(&[3, forward])?,
    })
}

/// `n_layers = 0` is accepted and leaves only the embedding term.
pub fn language_flops(cfg: &LangCostConfig) -> Result<CostReport> {
    require_positive(&[
        ("n_ctx", cfg.n_ctx),
        ("n_vocab", cfg.n_vocab),
        ("d_model", cfg.d_model),
        ("n_heads", cfg.n_heads),
        ("d_key", cfg.d_key),
        ("d_ff", cfg.d_ff),
    ])?;
    let emb = product(&[2, cfg.n_ctx, cfg.n_vocab, cfg.d_model])?;
    stack(
        cfg.n_ctx,
        emb,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_key,
        cfg.d_ff,
        cfg.n_layers,
    )
}

/// `n_layers = 0` is accepted and leaves only the embedding term.
pub fn vision_flops(cfg: &VisionCostConfig) -> Result<CostReport> {
    require_positive(&[
        ("n_patch", cfg.n_patch),
        ("d_patch", cfg.d_patch),
        ("n_channels", cfg.n_channels),
        ("d_model", cfg.d_model),
        ("n_heads", cfg.n_heads),
        ("d_key", cfg.d_key),
        ("d_ff", cfg.d_ff),
    ])?;
    let emb = product(&[
        2,
        cfg.n_patch,
        cfg.d_patch,
        cfg.d_patch,
        cfg.n_channels,
        cfg.d_model,
    ])?;
    stack(
        cfg.n_patch,
        emb,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_key,
        cfg.d_ff,
        cfg.n_layers,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub vision: CostReport,
    pub text: CostReport,
    pub clip_total: u64,
    pub lift_total: u64,
    pub reduction: f64,
}

/// Joint training charges both towers; the frozen-text setup only the image side.
pub fn compare_reports(vision: CostReport, text: CostReport) -> Result<Comparison> {
    let clip_total = sum(&[vision.train_total, text.train_total])?;
    let lift_total = vision.train_total;
    let reduction = if clip_total == 0 {
        0.0
    } else {
        1.0 - lift_total as f64 / clip_total as f64
    };
    Ok(Comparison {
        vision,
        text,
        clip_total,
        lift_total,
        reduction,
    })
}

pub fn compare_clip_lift(vision: &VisionCostConfig, text: &LangCostConfig) -> Result<Comparison> {
    compare_reports(vision_flops(vision)?, language_flops(text)?)
}

impl VisionCostConfig {
    /// Standard ViT shape with `d_key = 64`, `d_ff = 4 d`, 3 channels.
    pub fn vit(
        image_size: u64,
        patch: u64,
        d_model: u64,
        n_layers: u64,
        class_token: bool,
    ) -> Self {
        let grid = image_size / patch;
        Self {
            n_patch: grid * grid + u64::from(class_token),
            d_patch: patch,
            n_channels: 3,
            d_model,
            n_heads: d_model / 64,
            d_key: 64,
            d_ff: 4 * d_model,
            n_layers,
        }
    }
}

impl LangCostConfig {
    /// 12-layer text tower with `d_key = 64`, `d_ff = 4 d` and the CLIP vocabulary.
    pub fn clip_text(d_model: u64, n_ctx: u64) -> Self {
        Self {
            n_ctx,
            n_vocab: CLIP_VOCAB,
            d_model,
            n_heads: d_model / 64,
            d_key: 64,
            d_ff: 4 * d_model,
            n_layers: 12,
        }
    }
}

/// An image tower paired with the text tower it would be trained alongside.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub vision: VisionCostConfig,
    pub text_width: u64,
}

/// ViT-S/B/L at 224 px with patch 16, each with its matching text tower.
/// Tokens are the 196 patches; the class token is not counted.
pub fn standard_presets() -> Vec<Preset> {
    [
        ("ViT-S/16", 384, 12, 384),
        ("ViT-B/16", 768, 12, 512),
        ("ViT-L/16", 1024, 24, 768),
    ]
    .into_iter()
    .map(|(name, d, layers, text_width)| Preset {
        name,
        vision: VisionCostConfig::vit(224, 16, d, layers, false),
        text_width,
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub n_ctx: u64,
    pub clip_forward: u64,
    pub clip_train: u64,
    pub lift_forward: u64,
    pub lift_train: u64,
    pub reduction: f64,
}

pub fn comparison_table(presets: &[Preset], contexts: &[u64]) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    for p in presets {
        for &n_ctx in contexts {
            let c = compare_clip_lift(&p.vision, &LangCostConfig::clip_text(p.text_width, n_ctx))?;
            rows.push(TableRow {
                model: p.name.to_string(),
                n_ctx,
                clip_forward: c.vision.forward_total + c.text.forward_total,
                clip_train: c.clip_total,
                lift_forward: c.vision.forward_total,
                lift_train: c.lift_total,
                reduction: c.reduction,
            });
        }
    }
    Ok(rows)
}

/// Mean reduction over the rows with the given context length.
pub fn mean_reduction(rows: &[TableRow], n_ctx: u64) -> Option<f64> {
    let picked: Vec<f64> = rows
        .iter()
        .filter(|r| r.n_ctx == n_ctx)
        .map(|r| r.reduction)
        .collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

pub const TABLE_CSV_HEADER: &str =
    "model,n_ctx,clip_forward_flops,clip_train_flops,lift_forward_flops,lift_train_flops,reduction";

impl TableRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6}",
            self.model,
            self.n_ctx,
            self.clip_forward,
            self.clip_train,
            self.lift_forward,
            self.lift_train,
            self.reduction
        )
    }
}

pub fn render_table(rows: &[TableRow]) -> String {
    let mut out = format!(
        "{:<10} {:>6} {:>14} {:>12} {:>14} {:>12} {:>10}\n",
        "model", "n_ctx", "clip fwd GF", "clip train", "lift fwd GF", "lift train", "reduction"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:>6} {:>14} {:>12} {:>14} {:>12} {:>9.1}%\n",
            r.model,
            r.n_ctx,
            Giga(r.clip_forward).to_string(),
            Giga(r.clip_train).to_string(),
            Giga(r.lift_forward).to_string(),
            Giga(r.lift_train).to_string(),
            r.reduction * 100.0
        ));
    }
    out
}
