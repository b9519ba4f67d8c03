use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Shape of a stack of images and the square patch size used to cut them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl ImageGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::validation(format!("empty image geometry {self:?}")));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::validation(format!(
                "images must have 1 or 3 channels, got {}",
                self.channels
            )));
        }
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::validation(format!(
                "{}x{} images are not divisible into {}-pixel patches",
                self.height, self.width, self.patch
            )));
        }
        Ok(())
    }

    pub fn patches_per_image(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Q = J·H·W / P².
    pub fn patch_count(&self) -> usize {
        self.count * self.patches_per_image()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.count * self.height * self.width * self.channels
    }

    /// Token index of the patch at `(image, patch_row, patch_col)`.
    pub fn patch_index(&self, image: usize, patch_row: usize, patch_col: usize) -> usize {
        let per_row = self.width / self.patch;
        image * self.patches_per_image() + patch_row * per_row + patch_col
    }
}

/// Stack of images, `J x H x W x C`, pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualInput {
    geometry: ImageGeometry,
    pixels: Vec<f32>,
}

impl VisualInput {
    pub fn new(geometry: ImageGeometry, pixels: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if pixels.len() != geometry.pixel_count() {
            return Err(Error::validation(format!(
                "expected {} pixel values for {geometry:?}, got {}",
                geometry.pixel_count(),
                pixels.len()
            )));
        }
        Ok(VisualInput { geometry, pixels })
    }

    pub fn geometry(&self) -> ImageGeometry {
        self.geometry
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }
}

fn pixel_offset(g: &ImageGeometry, image: usize, y: usize, x: usize) -> usize {
    ((image * g.height + y) * g.width + x) * g.channels
}

/// Cuts every image into non-overlapping `P x P x C` patches, row-major
/// within each image, images in order. Each row of the result is one patch
/// flattened as `(y, x, channel)`.
pub fn split_image_patches<T: Real>(input: &VisualInput) -> Tensor<T> {
    let g = input.geometry;
    let (p, c) = (g.patch, g.channels);
    let mut out = Vec::with_capacity(g.pixel_count());
    for image in 0..g.count {
        for py in 0..g.height / p {
            for px in 0..g.width / p {
                for dy in 0..p {
                    let start = pixel_offset(&g, image, py * p + dy, px * p);
                    out.extend(input.pixels[start..start + p * c].iter().map(|&v| T::of(v as f64)));
                }
            }
        }
    }
    Tensor::new([g.patch_count(), g.patch_dim()], out).expect("patch count")
}

/// Inverse of [`split_image_patches`].
pub fn assemble_image_patches<T: Real>(patches: &Tensor<T>, geometry: ImageGeometry) -> Result<VisualInput> {
    geometry.validate()?;
    if patches.shape() != [geometry.patch_count(), geometry.patch_dim()] {
        return Err(Error::Dimension {
            op: "assemble_image_patches",
            lhs: patches.shape().to_vec(),
            rhs: vec![geometry.patch_count(), geometry.patch_dim()],
        });
    }
    let g = geometry;
    let (p, c) = (g.patch, g.channels);
    let mut pixels = vec![0f32; g.pixel_count()];
    let mut rows = patches.data().chunks(g.patch_dim());
    for image in 0..g.count {
        for py in 0..g.height / p {
            for px in 0..g.width / p {
                let patch = rows.next().expect("patch count");
                for dy in 0..p {
                    let start = pixel_offset(&g, image, py * p + dy, px * p);
                    for (dst, src) in pixels[start..start + p * c]
                        .iter_mut()
                        .zip(&patch[dy * p * c..(dy + 1) * p * c])
                    {
                        *dst = src.to_f32().unwrap_or(f32::NAN);
                    }
                }
            }
        }
    }
    VisualInput::new(g, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(count: usize, side: usize, channels: usize, patch: usize) -> ImageGeometry {
        ImageGeometry {
            count,
            height: side,
            width: side,
            channels,
            patch,
        }
    }

    #[test]
    fn visual_token_budget_of_576() {
        assert_eq!(geometry(9, 128, 3, 16).patch_count(), 576);
        assert_eq!(geometry(64, 48, 3, 16).patch_count(), 576);
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let g = geometry(1, 16, 1, 16);
        let pixels: Vec<f32> = (0..256).map(|i| i as f32 / 256.0).collect();
        let input = VisualInput::new(g, pixels.clone()).unwrap();
        let patches = split_image_patches::<f64>(&input);
        assert_eq!(patches.shape(), &[1, 256]);
        let back: Vec<f32> = patches.data().iter().map(|&v| v as f32).collect();
        assert_eq!(back, pixels);
    }

    #[test]
    fn indivisible_geometry_is_rejected() {
        let g = ImageGeometry {
            count: 1,
            height: 30,
            width: 32,
            channels: 3,
            patch: 16,
        };
        assert!(matches!(g.validate(), Err(Error::Validation(_))));
        assert!(geometry(1, 32, 2, 16).validate().is_err());
    }

    #[test]
    fn patch_order_is_row_major() {
        let g = geometry(2, 4, 1, 2);
        let pixels: Vec<f32> = (0..32).map(|i| i as f32).collect();
        let patches = split_image_patches::<f32>(&VisualInput::new(g, pixels).unwrap());
        // image 0, patch (0,1) covers columns 2..4 of rows 0..2
        assert_eq!(patches.row(1), &[2.0, 3.0, 6.0, 7.0]);
        // image 1, patch (1,0)
        assert_eq!(g.patch_index(1, 1, 0), 6);
        assert_eq!(patches.row(6), &[24.0, 25.0, 28.0, 29.0]);
    }
}
