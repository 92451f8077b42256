use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{patchify, EncoderParams, ImageTensor, ViTConfig};
use crate::error::{LiftError, Result};
use crate::real::Real;

const LN_EPS: f64 = 1e-6;

#[inline]
fn gelu<S: Real>(x: S) -> S {
    let v = x.to_f64_lossy();
    S::from_f64_lossy(0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)))
}

#[inline]
fn gelu_grad<S: Real>(x: S) -> S {
    let v = x.to_f64_lossy();
    let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
    S::from_f64_lossy(cdf + v * pdf)
}

struct NormCache<S> {
    xhat: Array2<S>,
    rstd: Array1<S>,
}

fn layer_norm<S: Real>(x: &Array2<S>, g: &Array1<S>, b: &Array1<S>) -> (Array2<S>, NormCache<S>) {
    let (n, d) = x.dim();
    let inv_d = S::from_usize(d).unwrap().recip();
    let eps = S::from_f64_lossy(LN_EPS);
    let mut xhat = Array2::<S>::zeros((n, d));
    let mut rstd = Array1::<S>::zeros(n);
    for ((row, mut out), r) in x
        .rows()
        .into_iter()
        .zip(xhat.rows_mut())
        .zip(rstd.iter_mut())
    {
        let mean = row.sum() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        *r = (var + eps).sqrt().recip();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * *r;
        }
    }
    let y = &xhat * g + b;
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward<S: Real>(
    dy: &Array2<S>,
    cache: &NormCache<S>,
    g: &Array1<S>,
    dg: &mut Array1<S>,
    db: &mut Array1<S>,
) -> Array2<S> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = dy.ncols();
    let inv_d = S::from_usize(d).unwrap().recip();
    let dxhat = dy * g;
    let mut dx = Array2::<S>::zeros(dy.dim());
    for (((gr, xh), mut out), &r) in dxhat
        .rows()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(dx.rows_mut())
        .zip(cache.rstd.iter())
    {
        let mean_g = gr.sum() * inv_d;
        let mean_gx = gr.iter().zip(xh).map(|(&a, &b)| a * b).sum::<S>() * inv_d;
        for ((o, &a), &b) in out.iter_mut().zip(gr).zip(xh) {
            *o = r * (a - mean_g - b * mean_gx);
        }
    }
    dx
}

fn softmax_rows<S: Real>(m: &mut Array2<S>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = sum.recip();
        row.mapv_inplace(|v| v * inv);
    }
}

struct BlockCache<S> {
    ln1: NormCache<S>,
    a: Array2<S>,
    qkv: Array2<S>,
    /// Attention probabilities, indexed `image * heads + head`.
    probs: Vec<Array2<S>>,
    attn: Array2<S>,
    ln2: NormCache<S>,
    c: Array2<S>,
    u: Array2<S>,
    gact: Array2<S>,
}

struct ForwardCache<S> {
    batch: usize,
    patches: Array2<S>,
    blocks: Vec<BlockCache<S>>,
    ln_f: NormCache<S>,
    pooled: Array2<S>,
    head_u: Array2<S>,
    head_g: Array2<S>,
}

/// Image embeddings together with the parameter gradients of one backward pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput<S> {
    pub embeddings: Array2<S>,
    pub grads: EncoderParams<S>,
}

fn check_images(config: &ViTConfig, images: &[ImageTensor]) -> Result<()> {
    let want = (config.channels, config.image_size, config.image_size);
    for (i, img) in images.iter().enumerate() {
        if img.shape() != want {
            return Err(LiftError::shape(
                &format!("image {i}"),
                format!("{want:?}"),
                format!("{:?}", img.shape()),
            ));
        }
    }
    Ok(())
}

fn stack_patches<S: Real>(config: &ViTConfig, images: &[ImageTensor]) -> Result<Array2<S>> {
    let n = config.num_patches();
    let mut out = Array2::<S>::zeros((images.len() * n, config.patch_dim()));
    for (b, img) in images.iter().enumerate() {
        let p = patchify(img, config.patch_size)?;
        out.slice_mut(s![b * n..(b + 1) * n, ..])
            .zip_mut_with(&p, |o, &v| *o = S::from_f32_lossy(v));
    }
    Ok(out)
}

fn attention_forward<S: Real>(
    config: &ViTConfig,
    batch: usize,
    qkv: &Array2<S>,
) -> (Array2<S>, Vec<Array2<S>>) {
    let t = config.num_tokens();
    let d = config.width;
    let k = config.head_dim;
    let scale = S::from_usize(k).unwrap().sqrt().recip();
    let mut attn = Array2::<S>::zeros((batch * t, d));
    let mut probs = Vec::with_capacity(batch * config.heads);
    for b in 0..batch {
        let rows = b * t..(b + 1) * t;
        for h in 0..config.heads {
            let q = qkv.slice(s![rows.clone(), h * k..(h + 1) * k]);
            let kk = qkv.slice(s![rows.clone(), d + h * k..d + (h + 1) * k]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * k..2 * d + (h + 1) * k]);
            let mut scores = q.dot(&kk.t()) * scale;
            softmax_rows(&mut scores);
            attn.slice_mut(s![rows.clone(), h * k..(h + 1) * k])
                .assign(&scores.dot(&v));
            probs.push(scores);
        }
    }
    (attn, probs)
}

fn run_forward<S: Real>(
    params: &EncoderParams<S>,
    images: &[ImageTensor],
) -> Result<(Array2<S>, ForwardCache<S>)> {
    let config = &params.config;
    check_images(config, images)?;
    let batch = images.len();
    let t = config.num_tokens();
    let n = config.num_patches();
    let d = config.width;

    let patches = stack_patches::<S>(config, images)?;
    let embedded = patches.dot(&params.patch_w) + &params.patch_b;
    let mut x = Array2::<S>::zeros((batch * t, d));
    for b in 0..batch {
        let mut tokens = x.slice_mut(s![b * t..(b + 1) * t, ..]);
        tokens.row_mut(0).assign(&params.cls_token);
        tokens
            .slice_mut(s![1.., ..])
            .assign(&embedded.slice(s![b * n..(b + 1) * n, ..]));
        tokens += &params.pos_embed;
    }

    let mut caches = Vec::with_capacity(params.blocks.len());
    for blk in &params.blocks {
        let (a, ln1) = layer_norm(&x, &blk.ln1_g, &blk.ln1_b);
        let qkv = a.dot(&blk.qkv_w) + &blk.qkv_b;
        let (attn, probs) = attention_forward(config, batch, &qkv);
        x = x + attn.dot(&blk.proj_w) + &blk.proj_b;
        let (c, ln2) = layer_norm(&x, &blk.ln2_g, &blk.ln2_b);
        let u = c.dot(&blk.fc1_w) + &blk.fc1_b;
        let gact = u.mapv(gelu);
        x = x + gact.dot(&blk.fc2_w) + &blk.fc2_b;
        caches.push(BlockCache {
            ln1,
            a,
            qkv,
            probs,
            attn,
            ln2,
            c,
            u,
            gact,
        });
    }

    let cls_rows = x.select(Axis(0), &(0..batch).map(|b| b * t).collect::<Vec<_>>());
    let (pooled, ln_f) = layer_norm(&cls_rows, &params.ln_f_g, &params.ln_f_b);
    let head_u = pooled.dot(&params.head_w1) + &params.head_b1;
    let head_g = head_u.mapv(gelu);
    let out = head_g.dot(&params.head_w2) + &params.head_b2;
    Ok((
        out,
        ForwardCache {
            batch,
            patches,
            blocks: caches,
            ln_f,
            pooled,
            head_u,
            head_g,
        },
    ))
}

fn accumulate_linear<S: Real>(
    input: &Array2<S>,
    dout: &Array2<S>,
    w: &Array2<S>,
    dw: &mut Array2<S>,
    db: &mut Array1<S>,
) -> Array2<S> {
    *dw += &input.t().dot(dout);
    *db += &dout.sum_axis(Axis(0));
    dout.dot(&w.t())
}

fn attention_backward<S: Real>(
    config: &ViTConfig,
    batch: usize,
    qkv: &Array2<S>,
    probs: &[Array2<S>],
    dattn: &Array2<S>,
) -> Array2<S> {
    let t = config.num_tokens();
    let d = config.width;
    let k = config.head_dim;
    let scale = S::from_usize(k).unwrap().sqrt().recip();
    let mut dqkv = Array2::<S>::zeros(qkv.dim());
    for b in 0..batch {
        let rows = b * t..(b + 1) * t;
        for h in 0..config.heads {
            let p = &probs[b * config.heads + h];
            let q = qkv.slice(s![rows.clone(), h * k..(h + 1) * k]);
            let kk = qkv.slice(s![rows.clone(), d + h * k..d + (h + 1) * k]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * k..2 * d + (h + 1) * k]);
            let dout: ArrayView2<S> = dattn.slice(s![rows.clone(), h * k..(h + 1) * k]);
            let dp = dout.dot(&v.t());
            let dv = p.t().dot(&dout);
            let mut ds = dp;
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<S>();
                for (x, &pv) in drow.iter_mut().zip(prow) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            let dq = ds.dot(&kk);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![rows.clone(), h * k..(h + 1) * k])
                .assign(&dq);
            dqkv.slice_mut(s![rows.clone(), d + h * k..d + (h + 1) * k])
                .assign(&dk);
            dqkv.slice_mut(s![rows.clone(), 2 * d + h * k..2 * d + (h + 1) * k])
                .assign(&dv);
        }
    }
    dqkv
}

fn run_backward<S: Real>(
    params: &EncoderParams<S>,
    cache: &ForwardCache<S>,
    upstream: &Array2<S>,
) -> EncoderParams<S> {
    let config = &params.config;
    let batch = cache.batch;
    let t = config.num_tokens();
    let n = config.num_patches();
    let mut g = params.zeros_like();

    // projection head
    let dhead_g = accumulate_linear(
        &cache.head_g,
        upstream,
        &params.head_w2,
        &mut g.head_w2,
        &mut g.head_b2,
    );
    let dhead_u = dhead_g * &cache.head_u.mapv(gelu_grad);
    let dpooled = accumulate_linear(
        &cache.pooled,
        &dhead_u,
        &params.head_w1,
        &mut g.head_w1,
        &mut g.head_b1,
    );
    let dcls = layer_norm_backward(
        &dpooled,
        &cache.ln_f,
        &params.ln_f_g,
        &mut g.ln_f_g,
        &mut g.ln_f_b,
    );

    let mut dx = Array2::<S>::zeros((batch * t, config.width));
    for b in 0..batch {
        dx.row_mut(b * t).assign(&dcls.row(b));
    }

    for ((blk, bc), gb) in params
        .blocks
        .iter()
        .zip(&cache.blocks)
        .zip(g.blocks.iter_mut())
        .rev()
    {
        // x_out = x_mid + gelu(ln2(x_mid) W1 + b1) W2 + b2
        let dgact = accumulate_linear(&bc.gact, &dx, &blk.fc2_w, &mut gb.fc2_w, &mut gb.fc2_b);
        let du = dgact * &bc.u.mapv(gelu_grad);
        let dc = accumulate_linear(&bc.c, &du, &blk.fc1_w, &mut gb.fc1_w, &mut gb.fc1_b);
        dx += &layer_norm_backward(&dc, &bc.ln2, &blk.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);

        // x_mid = x_in + attn(ln1(x_in)) Wp + bp
        let dattn = accumulate_linear(&bc.attn, &dx, &blk.proj_w, &mut gb.proj_w, &mut gb.proj_b);
        let dqkv = attention_backward(config, batch, &bc.qkv, &bc.probs, &dattn);
        let da = accumulate_linear(&bc.a, &dqkv, &blk.qkv_w, &mut gb.qkv_w, &mut gb.qkv_b);
        dx += &layer_norm_backward(&da, &bc.ln1, &blk.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);
    }

    let mut dembedded = Array2::<S>::zeros((batch * n, config.width));
    for b in 0..batch {
        let tokens = dx.slice(s![b * t..(b + 1) * t, ..]);
        g.pos_embed += &tokens;
        g.cls_token += &tokens.row(0);
        dembedded
            .slice_mut(s![b * n..(b + 1) * n, ..])
            .assign(&tokens.slice(s![1.., ..]));
    }
    g.patch_w += &cache.patches.t().dot(&dembedded);
    g.patch_b += &dembedded.sum_axis(Axis(0));
    g
}

/// Activations saved by [`forward_tape`] for a later [`backward`] call.
pub struct ForwardTape<S> {
    cache: ForwardCache<S>,
}

/// Un-normalized image embeddings, one row per image.
pub fn forward<S: Real>(params: &EncoderParams<S>, images: &[ImageTensor]) -> Result<Array2<S>> {
    run_forward(params, images).map(|(out, _)| out)
}

/// Forward pass that keeps the activations needed for backpropagation.
pub fn forward_tape<S: Real>(
    params: &EncoderParams<S>,
    images: &[ImageTensor],
) -> Result<(Array2<S>, ForwardTape<S>)> {
    run_forward(params, images).map(|(out, cache)| (out, ForwardTape { cache }))
}

/// Gradient of `<upstream, embeddings>` with respect to every parameter.
pub fn backward<S: Real>(
    params: &EncoderParams<S>,
    tape: &ForwardTape<S>,
    upstream: &Array2<S>,
) -> Result<EncoderParams<S>> {
    let want = (tape.cache.batch, params.config.embed_dim);
    if upstream.dim() != want {
        return Err(LiftError::shape(
            "upstream gradient",
            format!("{want:?}"),
            format!("{:?}", upstream.dim()),
        ));
    }
    Ok(run_backward(params, &tape.cache, upstream))
}

/// Forward pass followed by [`backward`] with the given upstream gradient.
pub fn forward_backward<S: Real>(
    params: &EncoderParams<S>,
    images: &[ImageTensor],
    upstream: &Array2<S>,
) -> Result<EncoderOutput<S>> {
    let want = (images.len(), params.config.embed_dim);
    if upstream.dim() != want {
        return Err(LiftError::shape(
            "upstream gradient",
            format!("{want:?}"),
            format!("{:?}", upstream.dim()),
        ));
    }
    let (embeddings, tape) = forward_tape(params, images)?;
    let grads = backward(params, &tape, upstream)?;
    Ok(EncoderOutput { embeddings, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::init_params;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 2,
            width: 8,
            depth: 2,
            heads: 2,
            head_dim: 4,
            ff_width: 12,
            embed_dim: 6,
            head_hidden: Some(7),
        }
    }

    fn random_images(cfg: &ViTConfig, count: usize, seed: u64) -> Vec<ImageTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                ImageTensor::new(Array3::from_shape_fn(
                    (cfg.channels, cfg.image_size, cfg.image_size),
                    |_| rng.gen_range(-1.0..1.0),
                ))
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn output_shape_and_identical_rows() {
        let cfg = crate::vit::tests::toy_config();
        let p = init_params::<f32>(&cfg, 1).unwrap();
        let imgs = random_images(&cfg, 4, 2);
        let out = forward(&p, &imgs).unwrap();
        assert_eq!(out.dim(), (4, 32));
        assert!(out.iter().all(|x| x.is_finite()));

        let same = vec![imgs[0].clone(), imgs[0].clone()];
        let out = forward(&p, &same).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn zero_params_give_final_bias() {
        let cfg = tiny_config();
        let mut p = EncoderParams::<f64>::zeros(&cfg).unwrap();
        p.head_b2 = Array1::from_vec(vec![0.5, -1.0, 2.0, 0.0, 3.25, -0.125]);
        let out = forward(&p, &random_images(&cfg, 3, 9)).unwrap();
        for row in out.rows() {
            assert_eq!(row, p.head_b2);
        }
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let cfg = tiny_config();
        let p = init_params::<f64>(&cfg, 0).unwrap();
        let bad = ImageTensor::new(Array3::zeros((3, 8, 8))).unwrap();
        assert!(matches!(forward(&p, &[bad]), Err(LiftError::Shape { .. })));
        let imgs = random_images(&cfg, 2, 0);
        let up = Array2::<f64>::zeros((3, 6));
        assert!(matches!(
            forward_backward(&p, &imgs, &up),
            Err(LiftError::Shape { .. })
        ));
    }

    #[test]
    fn zero_upstream_zero_grads_and_linearity() {
        let cfg = tiny_config();
        let p = init_params::<f64>(&cfg, 4).unwrap();
        let imgs = random_images(&cfg, 3, 5);
        let zero = forward_backward(&p, &imgs, &Array2::zeros((3, 6))).unwrap();
        assert!(zero.grads.flatten().iter().all(|&x| x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let up = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0));
        let g1 = forward_backward(&p, &imgs, &up).unwrap().grads.flatten();
        let g2 = forward_backward(&p, &imgs, &(&up * 2.0))
            .unwrap()
            .grads
            .flatten();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn batch_permutation_equivariance() {
        let cfg = tiny_config();
        let p = init_params::<f64>(&cfg, 7).unwrap();
        let imgs = random_images(&cfg, 3, 8);
        let out = forward(&p, &imgs).unwrap();
        let perm = [2usize, 0, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| imgs[i].clone()).collect();
        let out_p = forward(&p, &permuted).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            assert_eq!(out_p.row(r), out.row(i));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny_config();
        let mut p = init_params::<f64>(&cfg, 21).unwrap();
        // larger weights exercise the nonlinearities
        for (_, data) in p.tensors_mut() {
            data.iter_mut().for_each(|x| *x *= 2.0);
        }
        let imgs = random_images(&cfg, 2, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let up = Array2::from_shape_fn((2, 6), |_| rng.gen_range(-1.0..1.0));
        let analytic = forward_backward(&p, &imgs, &up).unwrap().grads.flatten();

        let objective = |q: &EncoderParams<f64>| (forward(q, &imgs).unwrap() * &up).sum();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for i in 0..p.num_params() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            set_flat(&mut plus, i, h);
            set_flat(&mut minus, i, -h);
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    fn set_flat(p: &mut EncoderParams<f64>, mut i: usize, delta: f64) {
        for (_, data) in p.tensors_mut() {
            if i < data.len() {
                data[i] += delta;
                return;
            }
            i -= data.len();
        }
        panic!("index out of range");
    }
}
