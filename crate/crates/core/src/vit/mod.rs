//! Vision transformer image encoder with a two-layer MLP projection head.
//!
//! Pre-norm blocks, learned positional embeddings and class-token readout.
//! The forward pass is written over a stacked `(batch * tokens) x width`
//! activation matrix so every linear layer is a single matrix product; the
//! backward pass is hand-derived and mirrors it op for op.

mod model;
mod params;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};

pub use model::{backward, forward, forward_backward, forward_tape, EncoderOutput, ForwardTape};
pub use params::{init_params, BlockParams, EncoderParams, ParamInfo};

fn default_channels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_width: usize,
    pub embed_dim: usize,
    /// Hidden width of the projection head; defaults to `width`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_hidden: Option<usize>,
}

impl ViTConfig {
    /// ViT-B/16 at 224 pixels with a 768-d head output.
    pub fn vit_b16() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            width: 768,
            depth: 12,
            heads: 12,
            head_dim: 64,
            ff_width: 3072,
            embed_dim: 768,
            head_hidden: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("width", self.width),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ff_width", self.ff_width),
            ("embed_dim", self.embed_dim),
            ("head_hidden", self.head_hidden()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(LiftError::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(LiftError::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width != self.heads * self.head_dim {
            return Err(LiftError::Config(format!(
                "width {} != heads {} x head_dim {}",
                self.width, self.heads, self.head_dim
            )));
        }
        Ok(())
    }

    pub fn head_hidden(&self) -> usize {
        self.head_hidden.unwrap_or(self.width)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// One preprocessed image, `channels x height x width`, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Array3<f32>);

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|x| !x.is_finite() || x.abs() > 1.0) {
            return Err(LiftError::Range(format!(
                "pixel value {bad} outside [-1, 1]"
            )));
        }
        Ok(Self(data))
    }

    /// Maps 8-bit pixel values to `[-1, 1]`.
    pub fn from_u8(
        channels: usize,
        height: usize,
        width: usize,
        pixels_chw: &[u8],
    ) -> Result<Self> {
        let data = Array3::from_shape_vec(
            (channels, height, width),
            pixels_chw.iter().map(|&p| p as f32 / 127.5 - 1.0).collect(),
        )
        .map_err(|e| LiftError::shape("image", channels * height * width, e))?;
        Self::new(data)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.dim()
    }
}

/// Splits an image into flattened square patches.
///
/// Row `k` is the patch at grid position `(k / cols, k % cols)`; within a
/// row the layout is channel-major, then patch row, then patch column.
pub fn patchify(image: &ImageTensor, patch_size: usize) -> Result<Array2<f32>> {
    let (c, h, w) = image.shape();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(LiftError::shape(
            "patchify",
            format!("sides divisible by {patch_size}"),
            format!("{h}x{w}"),
        ));
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let p2 = patch_size * patch_size;
    let data = image.data();
    let mut out = Array2::<f32>::zeros((rows * cols, p2 * c));
    for py in 0..rows {
        for px in 0..cols {
            let mut row = out.row_mut(py * cols + px);
            for ch in 0..c {
                for dy in 0..patch_size {
                    for dx in 0..patch_size {
                        row[ch * p2 + dy * patch_size + dx] =
                            data[[ch, py * patch_size + dy, px * patch_size + dx]];
                    }
                }
            }
        }
    }
    Ok(out)
}
