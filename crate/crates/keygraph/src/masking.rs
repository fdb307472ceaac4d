//! Grid masking: zero out a fixed fraction of square patches of an image so
//! the decoder cannot copy appearance and must rely on the edge map for
//! structure.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

/// A sampled mask over the patch grid of one image. The grid has
/// `(image_size / patch_px)^2` cells in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMask {
    pub image_size: usize,
    pub patch_px: usize,
    /// true = cell is masked (zeroed).
    pub masked: Vec<bool>,
}

impl GridMask {
    pub fn cells_per_side(&self) -> usize {
        self.image_size / self.patch_px
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Sample a mask covering exactly `floor(ratio * cells)` cells, chosen
/// uniformly without replacement from the caller's RNG.
pub fn make_mask(
    image_size: usize,
    patch_px: usize,
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<GridMask> {
    if patch_px == 0 || image_size == 0 {
        return Err(Error::Config(format!(
            "mask needs positive image size and patch size, got {image_size} and {patch_px}"
        )));
    }
    if image_size % patch_px != 0 {
        return Err(Error::Config(format!(
            "patch size {patch_px} does not divide image size {image_size}"
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} must lie in [0, 1]")));
    }
    let side = image_size / patch_px;
    let cells = side * side;
    let want = (ratio * cells as f64).floor() as usize;
    let mut masked = vec![false; cells];
    for idx in rand::seq::index::sample(rng, cells, want) {
        masked[idx] = true;
    }
    Ok(GridMask { image_size, patch_px, masked })
}

/// Zero the masked patches of a `[c, h, w]` image. Pure, and idempotent:
/// applying the same mask twice equals applying it once.
pub fn apply_mask<T: Scalar>(image: &Tensor<T>, mask: &GridMask) -> Result<Tensor<T>> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("apply_mask: image must be [c, h, w], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h != mask.image_size || w != mask.image_size {
        return Err(Error::Shape(format!(
            "apply_mask: image is {h}x{w} but mask was built for {0}x{0}",
            mask.image_size
        )));
    }
    let side = mask.cells_per_side();
    let p = mask.patch_px;
    let mut out = image.clone();
    let data = out.data_mut();
    for (cell, &m) in mask.masked.iter().enumerate() {
        if !m {
            continue;
        }
        let (cy, cx) = (cell / side, cell % side);
        for ch in 0..c {
            for y in cy * p..(cy + 1) * p {
                let row = &mut data[(ch * h + y) * w + cx * p..(ch * h + y) * w + (cx + 1) * p];
                row.fill(T::zero());
            }
        }
    }
    Ok(out)
}
