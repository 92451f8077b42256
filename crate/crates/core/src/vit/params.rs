use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ViTConfig;
use crate::error::Result;
use crate::real::Real;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<S> {
    pub ln1_g: Array1<S>,
    pub ln1_b: Array1<S>,
    /// `width x 3*width`, columns ordered q | k | v, heads contiguous inside each.
    pub qkv_w: Array2<S>,
    pub qkv_b: Array1<S>,
    pub proj_w: Array2<S>,
    pub proj_b: Array1<S>,
    pub ln2_g: Array1<S>,
    pub ln2_b: Array1<S>,
    pub fc1_w: Array2<S>,
    pub fc1_b: Array1<S>,
    pub fc2_w: Array2<S>,
    pub fc2_b: Array1<S>,
}

/// Backbone and projection-head parameters. Also used, zero-filled, as the
/// gradient and optimizer-moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<S> {
    pub config: ViTConfig,
    pub patch_w: Array2<S>,
    pub patch_b: Array1<S>,
    pub cls_token: Array1<S>,
    pub pos_embed: Array2<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub ln_f_g: Array1<S>,
    pub ln_f_b: Array1<S>,
    pub head_w1: Array2<S>,
    pub head_b1: Array1<S>,
    pub head_w2: Array2<S>,
    pub head_b2: Array1<S>,
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamInfo {
    /// Biases, norm parameters and the class token are excluded from weight decay.
    pub fn decays(&self) -> bool {
        self.shape.len() == 2 && !self.name.contains(".bias") && !self.name.contains("ln")
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

macro_rules! for_each_tensor {
    ($p:expr, $f:ident, $blocks:expr, $($get:tt)*) => {{
        $f("patch_embed.weight".to_string(), $p.patch_w.$($get)*);
        $f("patch_embed.bias".to_string(), $p.patch_b.$($get)*);
        $f("cls_token".to_string(), $p.cls_token.$($get)*);
        $f("pos_embed".to_string(), $p.pos_embed.$($get)*);
        for (i, b) in $blocks.enumerate() {
            $f(format!("blocks.{i}.ln1.weight"), b.ln1_g.$($get)*);
            $f(format!("blocks.{i}.ln1.bias"), b.ln1_b.$($get)*);
            $f(format!("blocks.{i}.attn.qkv.weight"), b.qkv_w.$($get)*);
            $f(format!("blocks.{i}.attn.qkv.bias"), b.qkv_b.$($get)*);
            $f(format!("blocks.{i}.attn.proj.weight"), b.proj_w.$($get)*);
            $f(format!("blocks.{i}.attn.proj.bias"), b.proj_b.$($get)*);
            $f(format!("blocks.{i}.ln2.weight"), b.ln2_g.$($get)*);
            $f(format!("blocks.{i}.ln2.bias"), b.ln2_b.$($get)*);
            $f(format!("blocks.{i}.mlp.fc1.weight"), b.fc1_w.$($get)*);
            $f(format!("blocks.{i}.mlp.fc1.bias"), b.fc1_b.$($get)*);
            $f(format!("blocks.{i}.mlp.fc2.weight"), b.fc2_w.$($get)*);
            $f(format!("blocks.{i}.mlp.fc2.bias"), b.fc2_b.$($get)*);
        }
        $f("ln_final.weight".to_string(), $p.ln_f_g.$($get)*);
        $f("ln_final.bias".to_string(), $p.ln_f_b.$($get)*);
        $f("head.fc1.weight".to_string(), $p.head_w1.$($get)*);
        $f("head.fc1.bias".to_string(), $p.head_b1.$($get)*);
        $f("head.fc2.weight".to_string(), $p.head_w2.$($get)*);
        $f("head.fc2.bias".to_string(), $p.head_b2.$($get)*);
    }};
}

impl<S: Real> EncoderParams<S> {
    /// All-zero parameters of the right shapes.
    pub fn zeros(config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let f = config.ff_width;
        let hh = config.head_hidden();
        let block = || BlockParams {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            qkv_w: Array2::zeros((d, 3 * d)),
            qkv_b: Array1::zeros(3 * d),
            proj_w: Array2::zeros((d, d)),
            proj_b: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            fc1_w: Array2::zeros((d, f)),
            fc1_b: Array1::zeros(f),
            fc2_w: Array2::zeros((f, d)),
            fc2_b: Array1::zeros(d),
        };
        Ok(Self {
            config: config.clone(),
            patch_w: Array2::zeros((config.patch_dim(), d)),
            patch_b: Array1::zeros(d),
            cls_token: Array1::zeros(d),
            pos_embed: Array2::zeros((config.num_tokens(), d)),
            blocks: (0..config.depth).map(|_| block()).collect(),
            ln_f_g: Array1::zeros(d),
            ln_f_b: Array1::zeros(d),
            head_w1: Array2::zeros((d, hh)),
            head_b1: Array1::zeros(hh),
            head_w2: Array2::zeros((hh, config.embed_dim)),
            head_b2: Array1::zeros(config.embed_dim),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config validated at construction")
    }

    /// Tensors in canonical order with their names and shapes.
    pub fn tensors<'a>(&'a self) -> Vec<(ParamInfo, &'a [S])> {
        let mut out = Vec::new();
        let mut push = |name: String, (shape, data): (Vec<usize>, &'a [S])| {
            out.push((ParamInfo { name, shape }, data));
        };
        let p = self;
        for_each_tensor!(p, push, p.blocks.iter(), view_parts());
        out
    }

    pub fn tensors_mut<'a>(&'a mut self) -> Vec<(ParamInfo, &'a mut [S])> {
        let mut out = Vec::new();
        let mut push = |name: String, (shape, data): (Vec<usize>, &'a mut [S])| {
            out.push((ParamInfo { name, shape }, data));
        };
        let p = self;
        for_each_tensor!(p, push, p.blocks.iter_mut(), view_parts_mut());
        out
    }

    pub fn infos(&self) -> Vec<ParamInfo> {
        self.tensors().into_iter().map(|(i, _)| i).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, d)| d.len()).sum()
    }

    /// Parameters outside the projection head.
    pub fn num_backbone_params(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(i, _)| !i.name.starts_with("head."))
            .map(|(_, d)| d.len())
            .sum()
    }

    /// Flattened copy of every parameter in canonical order.
    pub fn flatten(&self) -> Vec<S> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, d)| d.iter().copied())
            .collect()
    }

    pub fn cast<T: Real>(&self) -> EncoderParams<T> {
        let mut out = EncoderParams::<T>::zeros(&self.config).expect("valid config");
        for ((_, src), (_, dst)) in self.tensors().into_iter().zip(out.tensors_mut()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = T::from_f64_lossy(s.to_f64_lossy());
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, d)| d.iter().all(|x| x.is_finite()))
    }
}

trait ViewParts<S> {
    fn view_parts(&self) -> (Vec<usize>, &[S]);
    fn view_parts_mut(&mut self) -> (Vec<usize>, &mut [S]);
}

impl<S, D: ndarray::Dimension> ViewParts<S> for ndarray::Array<S, D> {
    fn view_parts(&self) -> (Vec<usize>, &[S]) {
        (
            self.shape().to_vec(),
            self.as_slice().expect("standard layout"),
        )
    }
    fn view_parts_mut(&mut self) -> (Vec<usize>, &mut [S]) {
        (
            self.shape().to_vec(),
            self.as_slice_mut().expect("standard layout"),
        )
    }
}

/// Deterministic initialization: weights, class token and positional
/// embeddings from a normal(0, 0.02) truncated at two standard deviations;
/// biases zero; norm scales one.
pub fn init_params<S: Real>(config: &ViTConfig, seed: u64) -> Result<EncoderParams<S>> {
    let mut params = EncoderParams::<S>::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    for (info, data) in params.tensors_mut() {
        let is_norm = info.name.contains("ln");
        let is_bias = info.name.ends_with(".bias");
        if is_norm && !is_bias {
            data.iter_mut().for_each(|x| *x = S::one());
        } else if !is_bias {
            for x in data.iter_mut() {
                let v = loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break v;
                    }
                };
                *x = S::from_f64_lossy(v);
            }
        }
    }
    Ok(params)
}
