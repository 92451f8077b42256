//! Zero-shot evaluation: prompt-anchor classification, top-1 cross-modal
//! retrieval, two-way caption picking and the pairwise similarity probe.
//!
//! All scores are cosine similarities. Ties go to the lowest index.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::cache::EmbeddingCache;
use crate::data::DatasetManifest;
use crate::error::{LiftError, Result};
use crate::loss::l2_normalize_rows;
use crate::vit::{forward, EncoderParams};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "It is a photo of {label}";
pub const PROBE_BINS: usize = 20;

fn unit(v: ArrayView1<f64>, what: &str) -> Result<Vec<f64>> {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(LiftError::Degenerate(format!("{what} has norm {norm}")));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn dot(a: &[f64], b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest value; the first one wins on ties.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Class anchors: one embedded prompt per label, stored normalized.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub labels: Vec<String>,
    anchors: Array2<f64>,
    pub prompt_template: String,
}

impl AnchorSet {
    pub fn new(
        labels: Vec<String>,
        anchor_embeds: Array2<f64>,
        prompt_template: impl Into<String>,
    ) -> Result<Self> {
        if anchor_embeds.nrows() < 2 {
            return Err(LiftError::InsufficientData(format!(
                "need at least 2 anchors, got {}",
                anchor_embeds.nrows()
            )));
        }
        if labels.len() != anchor_embeds.nrows() {
            return Err(LiftError::shape(
                "anchor labels",
                anchor_embeds.nrows(),
                labels.len(),
            ));
        }
        Ok(Self {
            labels,
            anchors: l2_normalize_rows(&anchor_embeds)?,
            prompt_template: prompt_template.into(),
        })
    }

    pub fn prompt(&self, index: usize) -> String {
        self.prompt_template.replace("{label}", &self.labels[index])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.anchors.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: usize,
    pub scores: Vec<f64>,
}

pub fn classify(anchors: &AnchorSet, image_embed: ArrayView1<f64>) -> Result<Classification> {
    if image_embed.len() != anchors.dim() {
        return Err(LiftError::shape(
            "image embedding",
            anchors.dim(),
            image_embed.len(),
        ));
    }
    let q = unit(image_embed, "image embedding")?;
    let scores: Vec<f64> = anchors
        .anchors
        .rows()
        .into_iter()
        .map(|a| dot(&q, a))
        .collect();
    Ok(Classification {
        label: argmax(&scores),
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "i2t")]
    ImageToText,
    #[serde(rename = "t2i")]
    TextToImage,
}

/// Paired embeddings; row `i` of each matrix belongs to the same sample.
#[derive(Debug, Clone)]
pub struct RetrievalPool {
    pub image_embeds: Array2<f64>,
    pub text_embeds: Array2<f64>,
    pub ids: Vec<u64>,
}

impl RetrievalPool {
    pub fn new(image_embeds: Array2<f64>, text_embeds: Array2<f64>, ids: Vec<u64>) -> Result<Self> {
        if image_embeds.dim() != text_embeds.dim() {
            return Err(LiftError::shape(
                "retrieval pool",
                format!("{:?}", image_embeds.dim()),
                format!("{:?}", text_embeds.dim()),
            ));
        }
        if ids.len() != image_embeds.nrows() {
            return Err(LiftError::shape(
                "retrieval ids",
                image_embeds.nrows(),
                ids.len(),
            ));
        }
        Ok(Self {
            image_embeds,
            text_embeds,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.image_embeds.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rank of each query's true partner among all candidates (0 = retrieved
/// first). Candidates scoring equal to the partner count ahead of it only
/// when they have a lower index.
pub fn retrieval_ranks(pool: &RetrievalPool, direction: Direction) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(LiftError::InsufficientData(
            "retrieval pool is empty".into(),
        ));
    }
    let images = l2_normalize_rows(&pool.image_embeds)?;
    let texts = l2_normalize_rows(&pool.text_embeds)?;
    let (queries, candidates) = match direction {
        Direction::ImageToText => (&images, &texts),
        Direction::TextToImage => (&texts, &images),
    };
    let sims = queries.dot(&candidates.t());
    Ok(sims
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let own = row[i];
            row.iter()
                .enumerate()
                .filter(|&(j, &s)| s > own || (s == own && j < i))
                .count()
        })
        .collect())
}

/// Fraction of queries whose partner is retrieved first.
pub fn retrieve_top1(pool: &RetrievalPool, direction: Direction) -> Result<f64> {
    let ranks = retrieval_ranks(pool, direction)?;
    Ok(ranks.iter().filter(|&&r| r == 0).count() as f64 / ranks.len() as f64)
}

/// Encodes the images of the given manifest rows, `chunk` at a time.
pub fn embed_images(
    params: &EncoderParams<f32>,
    manifest: &DatasetManifest,
    indices: &[usize],
    chunk: usize,
) -> Result<Array2<f64>> {
    let cfg = &params.config;
    let mut out = Array2::zeros((indices.len(), cfg.embed_dim));
    for (k, part) in indices.chunks(chunk.max(1)).enumerate() {
        let images = manifest.load_images(part, cfg.channels, cfg.image_size)?;
        let emb = forward(params, &images)?;
        let start = k * chunk.max(1);
        out.slice_mut(ndarray::s![start..start + part.len(), ..])
            .assign(&emb.mapv(f64::from));
    }
    Ok(out)
}

/// Pool over the given manifest rows, pairing each image with its cached caption.
pub fn manifest_pool(
    params: &EncoderParams<f32>,
    manifest: &DatasetManifest,
    cache: &EmbeddingCache,
    indices: &[usize],
) -> Result<RetrievalPool> {
    let ids = manifest.caption_ids(indices);
    let text = cache.batch_gather(&ids)?.mapv(f64::from);
    let images = embed_images(params, manifest, indices, 64)?;
    RetrievalPool::new(images, text, ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaptionChoice {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PickResult {
    pub choice: CaptionChoice,
    /// Set when both captions score exactly the same; `choice` is then `A`.
    pub tie: bool,
    pub score_a: f64,
    pub score_b: f64,
}

pub fn pick_caption(
    image: ArrayView1<f64>,
    caption_a: ArrayView1<f64>,
    caption_b: ArrayView1<f64>,
) -> Result<PickResult> {
    if caption_a.len() != image.len() || caption_b.len() != image.len() {
        return Err(LiftError::shape(
            "caption embeddings",
            image.len(),
            format!("{} and {}", caption_a.len(), caption_b.len()),
        ));
    }
    let q = unit(image, "image embedding")?;
    let a = unit(caption_a, "caption A")?;
    let b = unit(caption_b, "caption B")?;
    let score_a: f64 = q.iter().zip(&a).map(|(x, y)| x * y).sum();
    let score_b: f64 = q.iter().zip(&b).map(|(x, y)| x * y).sum();
    let (choice, tie) = if score_b > score_a {
        (CaptionChoice::B, false)
    } else {
        (CaptionChoice::A, score_a == score_b)
    };
    Ok(PickResult {
        choice,
        tie,
        score_a,
        score_b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub mean: f64,
    pub pairs: u64,
    /// Counts over 20 equal-width bins spanning [-1, 1].
    pub histogram: Vec<u64>,
}

/// Mean cosine similarity over all unordered pairs of distinct rows.
pub fn pairwise_similarity_probe(embeds: &Array2<f64>) -> Result<ProbeResult> {
    let m = embeds.nrows();
    if m < 2 {
        return Err(LiftError::InsufficientData(format!(
            "probe needs at least 2 rows, got {m}"
        )));
    }
    let unit = l2_normalize_rows(embeds)?;
    let gram = unit.dot(&unit.t());
    let mut histogram = vec![0u64; PROBE_BINS];
    let mut sum = 0.0;
    let mut pairs = 0u64;
    for i in 0..m {
        for j in i + 1..m {
            let c = gram[[i, j]].clamp(-1.0, 1.0);
            sum += c;
            pairs += 1;
            let bin = (((c + 1.0) / 2.0) * PROBE_BINS as f64).floor() as usize;
            histogram[bin.min(PROBE_BINS - 1)] += 1;
        }
    }
    Ok(ProbeResult {
        mean: sum / pairs as f64,
        pairs,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Axis};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn classify_orthonormal() {
        let anchors = AnchorSet::new(labels(3), Array2::eye(3), DEFAULT_PROMPT_TEMPLATE).unwrap();
        let out = classify(&anchors, array![0.0, 1.0, 0.0].view()).unwrap();
        assert_eq!(out.label, 1);
        assert_eq!(out.scores[1], 1.0);
        assert_eq!(anchors.prompt(2), "It is a photo of c2");
    }

    #[test]
    fn classify_tie_goes_low() {
        let anchors = AnchorSet::new(labels(3), Array2::eye(3), DEFAULT_PROMPT_TEMPLATE).unwrap();
        let out = classify(&anchors, array![0.0, 1.0, 1.0].view()).unwrap();
        assert_eq!(out.label, 1);
        assert!(classify(&anchors, array![1.0, 0.0].view()).is_err());
    }

    #[test]
    fn classify_matches_loop_oracle() {
        let a = random(5, 8, 1);
        let anchors = AnchorSet::new(labels(5), a.clone(), DEFAULT_PROMPT_TEMPLATE).unwrap();
        for seed in 0..20 {
            let q = random(1, 8, 100 + seed).row(0).to_owned();
            let got = classify(&anchors, q.view()).unwrap();
            let mut best = (0usize, f64::NEG_INFINITY);
            for k in 0..5 {
                let row = a.row(k);
                let c = row.dot(&q) / (row.dot(&row).sqrt() * q.dot(&q).sqrt());
                if c > best.1 {
                    best = (k, c);
                }
            }
            assert_eq!(got.label, best.0);
            assert!((got.scores[best.0] - best.1).abs() < 1e-12);
        }
    }

    #[test]
    fn anchors_need_two() {
        assert!(AnchorSet::new(labels(1), Array2::eye(1), "").is_err());
    }

    #[test]
    fn retrieval_cases() {
        let e = Array2::<f64>::eye(3);
        let pool = RetrievalPool::new(e.clone(), e.clone(), vec![0, 1, 2]).unwrap();
        assert_eq!(retrieve_top1(&pool, Direction::ImageToText).unwrap(), 1.0);
        assert_eq!(retrieve_top1(&pool, Direction::TextToImage).unwrap(), 1.0);

        // text rows reversed, pairing kept: only the middle row matches
        let reversed = e.select(Axis(0), &[2, 1, 0]);
        let pool = RetrievalPool::new(e.clone(), reversed, vec![0, 1, 2]).unwrap();
        assert!((retrieve_top1(&pool, Direction::ImageToText).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((retrieve_top1(&pool, Direction::TextToImage).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let one = RetrievalPool::new(array![[0.3, 0.1]], array![[-1.0, 2.0]], vec![9]).unwrap();
        assert_eq!(retrieve_top1(&one, Direction::ImageToText).unwrap(), 1.0);

        let empty =
            RetrievalPool::new(Array2::zeros((0, 2)), Array2::zeros((0, 2)), vec![]).unwrap();
        assert!(matches!(
            retrieve_top1(&empty, Direction::ImageToText),
            Err(LiftError::InsufficientData(_))
        ));
    }

    #[test]
    fn retrieval_ties_count_against_later_rows() {
        // all texts identical: only query 0 gets its partner first
        let texts = Array2::from_elem((3, 2), 1.0);
        let images = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let pool = RetrievalPool::new(images, texts, vec![0, 1, 2]).unwrap();
        assert_eq!(
            retrieval_ranks(&pool, Direction::ImageToText).unwrap(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn pick_caption_cases() {
        let e1 = array![1.0, 0.0];
        let e2 = array![0.0, 1.0];
        let r = pick_caption(e1.view(), e1.view(), e2.view()).unwrap();
        assert_eq!((r.choice, r.tie), (CaptionChoice::A, false));
        let mid = array![1.0, 1.0] / 2f64.sqrt();
        let r = pick_caption(mid.view(), e1.view(), e2.view()).unwrap();
        assert_eq!((r.choice, r.tie), (CaptionChoice::A, true));
        let zero = array![0.0, 0.0];
        assert!(matches!(
            pick_caption(zero.view(), e1.view(), e2.view()),
            Err(LiftError::Degenerate(_))
        ));
    }

    #[test]
    fn pick_caption_matches_two_dot_oracle() {
        for seed in 0..50 {
            let m = random(3, 6, seed);
            let r = pick_caption(m.row(0), m.row(1), m.row(2)).unwrap();
            let cos = |a: ArrayView1<f64>, b: ArrayView1<f64>| {
                a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
            };
            let want_b = cos(m.row(0), m.row(2)) > cos(m.row(0), m.row(1));
            assert_eq!(r.choice == CaptionChoice::B, want_b);
        }
    }

    #[test]
    fn probe_cases() {
        let same = Array2::from_elem((5, 3), 0.7);
        let p = pairwise_similarity_probe(&same).unwrap();
        assert!((p.mean - 1.0).abs() < 1e-12);
        assert_eq!(p.pairs, 10);
        assert_eq!(p.histogram[PROBE_BINS - 1], 10);

        let p = pairwise_similarity_probe(&Array2::eye(4)).unwrap();
        assert_eq!(p.mean, 0.0);
        assert_eq!(p.histogram[10], 6);

        let m = random(4, 5, 3);
        let p = pairwise_similarity_probe(&m).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for i in 0..4 {
            for j in i + 1..4 {
                let (a, b) = (m.row(i), m.row(j));
                sum += a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
                n += 1;
            }
        }
        assert!((p.mean - sum / n as f64).abs() < 1e-6);

        assert!(matches!(
            pairwise_similarity_probe(&random(1, 5, 0)),
            Err(LiftError::InsufficientData(_))
        ));
    }

    proptest! {
        #[test]
        fn decisions_are_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let a = random(4, 6, seed);
            let anchors = AnchorSet::new(labels(4), a, DEFAULT_PROMPT_TEMPLATE).unwrap();
            let q: Array1<f64> = random(1, 6, seed + 1).row(0).to_owned();
            let base = classify(&anchors, q.view()).unwrap().label;
            prop_assert_eq!(classify(&anchors, (&q * scale).view()).unwrap().label, base);

            let imgs = random(5, 6, seed + 2);
            let txts = random(5, 6, seed + 3);
            let pool = RetrievalPool::new(imgs.clone(), txts.clone(), (0..5).collect()).unwrap();
            let scaled = RetrievalPool::new(&imgs * scale, txts, (0..5).collect()).unwrap();
            prop_assert_eq!(
                retrieve_top1(&pool, Direction::TextToImage).unwrap(),
                retrieve_top1(&scaled, Direction::TextToImage).unwrap()
            );
        }

        #[test]
        fn pick_is_antisymmetric(seed in 0u64..1000) {
            let m = random(3, 4, seed);
            let ab = pick_caption(m.row(0), m.row(1), m.row(2)).unwrap();
            let ba = pick_caption(m.row(0), m.row(2), m.row(1)).unwrap();
            if !ab.tie {
                prop_assert_ne!(ab.choice, ba.choice);
            }
        }

        #[test]
        fn probe_bounds(seed in 0u64..1000, m in 2usize..12) {
            let p = pairwise_similarity_probe(&random(m, 5, seed)).unwrap();
            prop_assert!((-1.0..=1.0).contains(&p.mean));
            prop_assert_eq!(p.histogram.iter().sum::<u64>(), (m * (m - 1) / 2) as u64);
        }

        #[test]
        fn identical_pool_retrieves_everything(seed in 0u64..1000, n in 1usize..10) {
            let m = random(n, 8, seed);
            let pool = RetrievalPool::new(m.clone(), m, (0..n as u64).collect()).unwrap();
            prop_assert_eq!(retrieve_top1(&pool, Direction::ImageToText).unwrap(), 1.0);
            prop_assert_eq!(retrieve_top1(&pool, Direction::TextToImage).unwrap(), 1.0);
        }
    }
}
