#![allow(dead_code)]

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use lift_core::cache::{build_cache, BuildOptions, EmbeddingCache};
use lift_core::cli::toy_model;
use lift_core::data::{DatasetManifest, SynthSpec};
use lift_core::loss::{contrastive_loss, cosine_loss, AlignedBatch, Temperature};
use lift_core::train::{LossKind, TrainConfig};
use lift_core::vit::{
    backward, forward, forward_tape, init_params, EncoderParams, ImageTensor, ViTConfig,
};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor so that near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

pub fn random_batch(b: usize, d: usize, seed: u64) -> AlignedBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = gaussian(b, d, &mut rng);
    let image = gaussian(b, d, &mut rng);
    AlignedBatch::new(text, image, (0..b as u64).collect()).unwrap()
}

fn loss_value(batch: &AlignedBatch, kind: LossKind, temp: &Temperature) -> f64 {
    match kind {
        LossKind::Contrastive => contrastive_loss(batch, temp).unwrap().loss,
        LossKind::Cosine => cosine_loss(batch).unwrap().loss,
    }
}

/// Worst relative error between the analytic loss gradient (image embeddings
/// and, for the contrastive loss, the log-scale) and central differences.
pub fn loss_fd_worst(seed: u64, b: usize, d: usize, kind: LossKind) -> f64 {
    let batch = random_batch(b, d, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let temp = Temperature::learnable(rng.gen_range(0.05..1.0));
    let out = match kind {
        LossKind::Contrastive => contrastive_loss(&batch, &temp).unwrap(),
        LossKind::Cosine => cosine_loss(&batch).unwrap(),
    };
    let h = FD_STEP;
    let mut worst = 0.0f64;
    for i in 0..b {
        for j in 0..d {
            let mut plus = batch.clone();
            let mut minus = batch.clone();
            plus.image_embeds[[i, j]] += h;
            minus.image_embeds[[i, j]] -= h;
            let fd = (loss_value(&plus, kind, &temp) - loss_value(&minus, kind, &temp)) / (2.0 * h);
            worst = worst.max(rel_err(out.image_grad[[i, j]], fd));
        }
    }
    if kind == LossKind::Contrastive {
        let mut tp = temp;
        let mut tm = temp;
        tp.log_scale += h;
        tm.log_scale -= h;
        let fd = (loss_value(&batch, kind, &tp) - loss_value(&batch, kind, &tm)) / (2.0 * h);
        worst = worst.max(rel_err(out.log_scale_grad.unwrap(), fd));
    }
    worst
}

/// Small encoder for exhaustive gradient checks (about 3.5k parameters).
pub fn tiny_encoder_config() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        width: 12,
        depth: 2,
        heads: 2,
        head_dim: 6,
        ff_width: 24,
        embed_dim: 8,
        head_hidden: Some(12),
    }
}

pub fn random_images(cfg: &ViTConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<ImageTensor> {
    (0..n)
        .map(|_| {
            let data =
                Array3::from_shape_fn((cfg.channels, cfg.image_size, cfg.image_size), |_| {
                    rng.gen_range(-1.0f32..1.0)
                });
            ImageTensor::new(data).unwrap()
        })
        .collect()
}

fn flat_add(p: &mut EncoderParams<f64>, mut i: usize, delta: f64) {
    for (_, data) in p.tensors_mut() {
        if i < data.len() {
            data[i] += delta;
            return;
        }
        i -= data.len();
    }
    panic!("flat index out of range");
}

/// Worst entry of an encoder gradient check.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdWorst {
    pub rel: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub index: usize,
}

/// Checks every encoder parameter for the composition
/// images -> encoder -> head -> loss against fixed caption embeddings.
///
/// Uses the five-point central stencil, whose O(h^4) truncation error stays
/// far below the tolerance even where the loss is strongly curved (the
/// normalization of small initial embeddings).
pub fn encoder_fd_check(seed: u64, kind: LossKind, h: f64, floor: f64) -> FdWorst {
    let cfg = tiny_encoder_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params::<f64>(&cfg, seed).unwrap();
    let b = 4;
    let images = random_images(&cfg, b, &mut rng);
    let text = gaussian(b, cfg.embed_dim, &mut rng);
    let temp = Temperature::learnable(0.07);
    let objective = |p: &EncoderParams<f64>| {
        let emb = forward(p, &images).unwrap();
        let batch = AlignedBatch::new(text.clone(), emb, (0..b as u64).collect()).unwrap();
        loss_value(&batch, kind, &temp)
    };

    let (emb, tape) = forward_tape(&params, &images).unwrap();
    let batch = AlignedBatch::new(text.clone(), emb, (0..b as u64).collect()).unwrap();
    let upstream = match kind {
        LossKind::Contrastive => contrastive_loss(&batch, &temp).unwrap().image_grad,
        LossKind::Cosine => cosine_loss(&batch).unwrap().image_grad,
    };
    let analytic = backward(&params, &tape, &upstream).unwrap().flatten();

    let at = |i: usize, delta: f64| {
        let mut q = params.clone();
        flat_add(&mut q, i, delta);
        objective(&q)
    };
    let mut worst = FdWorst::default();
    for (i, &a) in analytic.iter().enumerate() {
        let fd = (8.0 * (at(i, h) - at(i, -h)) - (at(i, 2.0 * h) - at(i, -2.0 * h))) / (12.0 * h);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
        if rel > worst.rel {
            worst = FdWorst {
                rel,
                analytic: a,
                numeric: fd,
                index: i,
            };
        }
    }
    worst
}

/// Denominator floor for the encoder check: below it, differences are
/// judged absolutely, since roundoff in the loss (~1e-10 after dividing by
/// h) swamps gradients that small.
pub const ENCODER_REL_FLOOR: f64 = 1e-4;

pub fn encoder_fd_worst(seed: u64, kind: LossKind) -> f64 {
    encoder_fd_check(seed, kind, FD_STEP, ENCODER_REL_FLOOR).rel
}

pub struct Toy {
    pub dir: tempfile::TempDir,
    pub spec: SynthSpec,
    pub manifest: DatasetManifest,
    pub cache: EmbeddingCache,
    pub model: ViTConfig,
    pub train: TrainConfig,
}

/// The synthetic setup: 256 pairs over 16 classes, 32x32 images, patch 4,
/// width 64, depth 2, 4 heads, 32-d unit caption embeddings, batch 64,
/// 300 steps, peak lr 1e-3 with 30 warmup steps.
pub fn toy(loss: LossKind) -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::toy(1);
    let cache = build_cache(
        dir.path().join("captions.lftc"),
        spec.caption_records(),
        BuildOptions::new(spec.dim).normalize(true),
    )
    .unwrap();
    let manifest = spec.manifest(3);
    let model = toy_model(spec.image_size, spec.channels, spec.dim);
    let train = TrainConfig {
        total_steps: 300,
        warmup_steps: 30,
        peak_lr: 1e-3,
        batch_size: 64,
        loss,
        seed: 0,
        record_wall_time: false,
        ..TrainConfig::default()
    };
    Toy {
        dir,
        spec,
        manifest,
        cache,
        model,
        train,
    }
}

/// Deterministic test vector for cache stress tests.
pub fn stress_vector(id: u64, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(id);
    (0..dim).map(|_| rng.gen_range(-4.0f32..4.0)).collect()
}

/// Maps record index to a scattered id so that input order is not sorted.
pub fn stress_id(i: u64) -> u64 {
    i.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 8
}

pub struct RawHeader {
    pub version: u32,
    pub count: u64,
    pub dim: u32,
    pub dtype: u8,
    pub normalized: u8,
}

/// Independent sequential reader of the cache layout. Calls `visit` with
/// each id and its raw vector bytes in file order.
pub fn brute_force_scan(path: &Path, mut visit: impl FnMut(u64, &[u8])) -> RawHeader {
    let mut r = BufReader::with_capacity(1 << 22, File::open(path).unwrap());
    let mut head = [0u8; 32];
    r.read_exact(&mut head).unwrap();
    assert_eq!(&head[0..4], b"LFTC");
    let h = RawHeader {
        version: u32::from_le_bytes(head[4..8].try_into().unwrap()),
        count: u64::from_le_bytes(head[8..16].try_into().unwrap()),
        dim: u32::from_le_bytes(head[16..20].try_into().unwrap()),
        dtype: head[20],
        normalized: head[21],
    };
    assert!(head[22..32].iter().all(|&b| b == 0));
    let width = h.dim as usize * if h.dtype == 0 { 4 } else { 2 };
    let mut table = vec![0u8; h.count as usize * 16];
    r.read_exact(&mut table).unwrap();
    let payload_start = 32 + table.len() as u64;
    let mut ids = Vec::with_capacity(h.count as usize);
    for (k, entry) in table.chunks_exact(16).enumerate() {
        let id = u64::from_le_bytes(entry[0..8].try_into().unwrap());
        let offset = u64::from_le_bytes(entry[8..16].try_into().unwrap());
        assert_eq!(offset, payload_start + (k * width) as u64);
        ids.push(id);
    }
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    let mut buf = vec![0u8; width];
    for id in ids {
        r.read_exact(&mut buf).unwrap();
        visit(id, &buf);
    }
    assert_eq!(r.read(&mut [0u8; 1]).unwrap(), 0, "trailing bytes");
    h
}
