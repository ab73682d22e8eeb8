use rand::Rng as _;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

/// One Gaussian blob per class, centred on a ring around the image centre,
/// with per-sample jitter of position, width and intensity.
pub fn synth_blobs(n_classes: usize, n_per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if n_classes == 0 || n_per_class == 0 || image_size == 0 {
        return Err(Error::invalid("synth_blobs needs positive counts"));
    }
    let mut rng = rng_from_seed(seed);
    let s = image_size as f64;
    let radius = 0.3 * s;
    let n = n_classes * n_per_class;
    let mut data = Vec::with_capacity(n * image_size * image_size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % n_classes;
        let angle = std::f64::consts::TAU * class as f64 / n_classes as f64;
        let jitter = 0.04 * s;
        let cx = (s - 1.0) / 2.0 + radius * angle.cos() + jitter * rng.sample::<f64, _>(StandardNormal);
        let cy = (s - 1.0) / 2.0 + radius * angle.sin() + jitter * rng.sample::<f64, _>(StandardNormal);
        let width = 0.12 * s * (1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal)).max(0.5);
        let amp = rng.gen_range(0.8..1.0);
        for y in 0..image_size {
            for x in 0..image_size {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = amp * (-d2 / (2.0 * width * width)).exp();
                data.push((2.0 * v - 1.0).clamp(-1.0, 1.0));
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![n, 1, image_size, image_size], data)?;
    Dataset::new(images, labels)
}
