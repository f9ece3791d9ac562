//! Horizontal quantization of the staff image into classification buckets
//! and the soft-target construction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `num_buckets` contiguous horizontal slices of an image; bucket centers at
/// (b + 0.5) * width / B.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BucketGrid {
    pub num_buckets: usize,
    pub image_width: f32,
}

impl BucketGrid {
    pub fn new(num_buckets: usize, image_width: f32) -> Result<Self> {
        if num_buckets < 2 || image_width <= 0.0 {
            return Err(Error::invalid(format!(
                "bucket grid needs >= 2 buckets and positive width, got {num_buckets} x {image_width}"
            )));
        }
        Ok(BucketGrid { num_buckets, image_width })
    }

    /// Default grid of the artifact: 40 buckets over 390 px.
    pub fn default_grid() -> Self {
        BucketGrid { num_buckets: 40, image_width: crate::score::IMAGE_WIDTH as f32 }
    }

    pub fn bucket_width(&self) -> f32 {
        self.image_width / self.num_buckets as f32
    }

    pub fn center(&self, bucket: usize) -> f32 {
        (bucket as f32 + 0.5) * self.bucket_width()
    }

    /// Bucket covering pixel x.
    pub fn bucket_of(&self, x: f32) -> usize {
        ((x / self.bucket_width()) as usize).min(self.num_buckets - 1)
    }

    /// Soft target vector: probability mass shared between the two bucket
    /// centers bracketing x, linearly by pixel distance (normalized to sum
    /// one). Left of the first center or right of the last, the nearest
    /// bucket takes all mass.
    pub fn soft_target(&self, x: f32) -> Result<Tensor<f32>> {
        if !(0.0..self.image_width).contains(&x) {
            return Err(Error::invalid(format!(
                "soft_target: x = {x} outside [0, {})",
                self.image_width
            )));
        }
        let b = self.num_buckets;
        let mut t = Tensor::zeros(&[b]);
        let w = self.bucket_width();
        let first = self.center(0);
        let last = self.center(b - 1);
        if x <= first {
            t.data_mut()[0] = 1.0;
        } else if x >= last {
            t.data_mut()[b - 1] = 1.0;
        } else {
            let a = ((x - first) / w).floor() as usize;
            let a = a.min(b - 2);
            let (ca, cb) = (self.center(a), self.center(a + 1));
            t.data_mut()[a] = (cb - x) / (cb - ca);
            t.data_mut()[a + 1] = (x - ca) / (cb - ca);
        }
        Ok(t)
    }
}
