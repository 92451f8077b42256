//! Alignment objectives between cached text embeddings and image embeddings.
//!
//! Both losses re-normalize their inputs, compute in `f64`, and return
//! gradients for the image side only: the text embeddings are fixed targets
//! and no operation here produces a gradient for them.
//!
//! Scalar reductions sum their terms in sorted order, so permuting the
//! batch consistently leaves the loss bit-identical.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{LiftError, Result};

/// Matched text/image embeddings for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedBatch {
    pub text_embeds: Array2<f64>,
    pub image_embeds: Array2<f64>,
    pub ids: Vec<u64>,
}

impl AlignedBatch {
    pub fn new(text_embeds: Array2<f64>, image_embeds: Array2<f64>, ids: Vec<u64>) -> Result<Self> {
        let batch = Self {
            text_embeds,
            image_embeds,
            ids,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.text_embeds.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_embeds.nrows() == 0 {
            return Err(LiftError::EmptyBatch);
        }
        if self.text_embeds.dim() != self.image_embeds.dim() {
            return Err(LiftError::shape(
                "aligned batch",
                format!("{:?}", self.text_embeds.dim()),
                format!("{:?}", self.image_embeds.dim()),
            ));
        }
        if self.ids.len() != self.text_embeds.nrows() {
            return Err(LiftError::shape(
                "batch ids",
                self.text_embeds.nrows(),
                self.ids.len(),
            ));
        }
        if !self
            .text_embeds
            .iter()
            .chain(self.image_embeds.iter())
            .all(|x| x.is_finite())
        {
            return Err(LiftError::Numeric("non-finite embedding in batch".into()));
        }
        Ok(())
    }
}

/// Softmax temperature, stored as a log logit-scale: `tau = 1 / exp(log_scale)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Temperature {
    pub log_scale: f64,
    pub learnable: bool,
    pub clamp_max: f64,
}

pub const DEFAULT_INIT_TAU: f64 = 0.07;
pub const SCALE_CLAMP_MAX: f64 = 100.0;

impl Temperature {
    pub fn learnable(init_tau: f64) -> Self {
        Self::with_tau(init_tau, true)
    }

    pub fn fixed(tau: f64) -> Self {
        Self::with_tau(tau, false)
    }

    fn with_tau(tau: f64, learnable: bool) -> Self {
        let mut t = Self {
            log_scale: (1.0 / tau).ln(),
            learnable,
            clamp_max: SCALE_CLAMP_MAX,
        };
        t.clamp();
        t
    }

    /// Keeps `exp(log_scale) <= clamp_max`.
    pub fn clamp(&mut self) {
        let max = self.clamp_max.ln();
        if self.log_scale > max {
            self.log_scale = max;
        }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp().min(self.clamp_max)
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.scale()
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::learnable(DEFAULT_INIT_TAU)
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient with respect to the raw (un-normalized) image embeddings.
    pub image_grad: Array2<f64>,
    /// Present only for a learnable temperature.
    pub log_scale_grad: Option<f64>,
    /// Number of text-image dot products evaluated.
    pub similarity_evals: u64,
}

fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.into_iter().sum()
}

fn logsumexp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + sorted_sum(v.into_iter().map(|x| (x - max).exp()).collect()).ln()
}

fn normalize_rows(m: &Array2<f64>, what: &str) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut out = m.clone();
    let mut norms = Array1::zeros(m.nrows());
    for (i, (mut row, n)) in out.rows_mut().into_iter().zip(norms.iter_mut()).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(LiftError::Degenerate(format!(
                "{what} row {i} has norm {norm}"
            )));
        }
        row /= norm;
        *n = norm;
    }
    Ok((out, norms))
}

/// Pulls a gradient taken with respect to unit rows back to the raw rows.
fn normalize_backward(unit: &Array2<f64>, norms: &Array1<f64>, dunit: &Array2<f64>) -> Array2<f64> {
    let mut dx = dunit.clone();
    for ((mut row, u), &n) in dx.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        let along = row.dot(&u);
        row.scaled_add(-along, &u);
        row /= n;
    }
    dx
}

/// Scales each row to unit L2 norm.
pub fn l2_normalize_rows(m: &Array2<f64>) -> Result<Array2<f64>> {
    normalize_rows(m, "matrix").map(|(u, _)| u)
}

fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarities `text_i . image_j` of the normalized rows.
pub fn similarity_matrix(batch: &AlignedBatch) -> Result<Array2<f64>> {
    batch.validate()?;
    let (t, _) = normalize_rows(&batch.text_embeds, "text")?;
    let (im, _) = normalize_rows(&batch.image_embeds, "image")?;
    Ok(t.dot(&im.t()))
}

/// Symmetric InfoNCE over the in-batch similarity matrix.
pub fn contrastive_loss(batch: &AlignedBatch, temp: &Temperature) -> Result<LossOutput> {
    batch.validate()?;
    let b = batch.len();
    let (text, _) = normalize_rows(&batch.text_embeds, "text")?;
    let (image, image_norms) = normalize_rows(&batch.image_embeds, "image")?;
    let scale = temp.scale();

    let mut cos = Array2::<f64>::zeros((b, b));
    let mut evals = 0u64;
    for i in 0..b {
        for j in 0..b {
            cos[[i, j]] = dot(text.row(i), image.row(j));
            evals += 1;
        }
    }
    let logits = &cos * scale;
    if !logits.iter().all(|x| x.is_finite()) {
        return Err(LiftError::Numeric("non-finite similarity logits".into()));
    }

    let row_lse: Vec<f64> = (0..b)
        .map(|i| logsumexp(logits.row(i).iter().copied()))
        .collect();
    let col_lse: Vec<f64> = (0..b)
        .map(|j| logsumexp(logits.column(j).iter().copied()))
        .collect();
    let mut terms = Vec::with_capacity(2 * b);
    for i in 0..b {
        terms.push(row_lse[i] - logits[[i, i]]);
        terms.push(col_lse[i] - logits[[i, i]]);
    }
    let loss = sorted_sum(terms) / (2 * b) as f64;
    if !loss.is_finite() {
        return Err(LiftError::Numeric(format!("contrastive loss is {loss}")));
    }

    // dL/dlogits = (softmax_row + softmax_col - 2 I) / 2B
    let inv = 1.0 / (2 * b) as f64;
    let mut dlogits = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            let p_row = (logits[[i, j]] - row_lse[i]).exp();
            let p_col = (logits[[i, j]] - col_lse[j]).exp();
            let diag = if i == j { 2.0 } else { 0.0 };
            dlogits[[i, j]] = (p_row + p_col - diag) * inv;
        }
    }
    let dimage_unit = dlogits.t().dot(&text) * scale;
    let image_grad = normalize_backward(&image, &image_norms, &dimage_unit);
    let log_scale_grad = temp.learnable.then(|| (&dlogits * &logits).sum());

    Ok(LossOutput {
        loss,
        image_grad,
        log_scale_grad,
        similarity_evals: evals,
    })
}

/// Mean of `1 - cos(text_i, image_i)` over positive pairs only.
pub fn cosine_loss(batch: &AlignedBatch) -> Result<LossOutput> {
    batch.validate()?;
    let b = batch.len();
    let (text, _) = normalize_rows(&batch.text_embeds, "text")?;
    let (image, image_norms) = normalize_rows(&batch.image_embeds, "image")?;

    let mut terms = Vec::with_capacity(b);
    let mut evals = 0u64;
    for i in 0..b {
        let c = dot(text.row(i), image.row(i));
        evals += 1;
        if !c.is_finite() {
            return Err(LiftError::Numeric(format!(
                "non-finite similarity in row {i}"
            )));
        }
        terms.push(1.0 - c);
    }
    let loss = sorted_sum(terms) / b as f64;
    let dimage_unit = &text * (-1.0 / b as f64);
    let image_grad = normalize_backward(&image, &image_norms, &dimage_unit);
    Ok(LossOutput {
        loss,
        image_grad,
        log_scale_grad: None,
        similarity_evals: evals,
    })
}

/// Per-dimension variance across rows of the normalized embeddings, averaged
/// over dimensions. Zero when every row points the same way.
pub fn row_variance(m: &Array2<f64>) -> Result<f64> {
    let unit = l2_normalize_rows(m)?;
    Ok(unit.var_axis(Axis(0), 0.0).mean().unwrap_or(0.0))
}
