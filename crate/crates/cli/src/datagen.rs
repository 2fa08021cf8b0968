//! Synthetic images of Gaussian blobs with additive noise, and the binary
//! masks of the blobs.

use std::fs;
use std::path::{Path, PathBuf};

use dilattn_core::io::write_tensor;
use dilattn_core::{DType, Error, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const CHANNELS: usize = 3;
pub const DEFAULT_PATCH: usize = 4;
pub const NOISE_STD: f64 = 0.05;
pub const MASK_THRESHOLD: f64 = 0.5;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub count: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
    pub dtype: DType,
    pub images: Vec<String>,
    pub masks: Vec<String>,
}

/// One `H × W × 3` image in `[0, 1]` and its `H × W` mask.
pub fn sample<T: Scalar, R: Rng>(image_size: usize, rng: &mut R) -> (Tensor<T>, Tensor<T>) {
    let s = image_size as f64;
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..rng.random_range(1..=3))
        .map(|_| {
            let center = [rng.random_range(0.0..s), rng.random_range(0.0..s)];
            let sigma = rng.random_range(0.08..0.25) * s;
            let color = [rng.random_range(0.3..1.0), rng.random_range(0.3..1.0), rng.random_range(0.3..1.0)];
            (center, sigma, color)
        })
        .collect();
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut image = Vec::with_capacity(image_size * image_size * CHANNELS);
    let mut mask = Vec::with_capacity(image_size * image_size);
    for y in 0..image_size {
        for x in 0..image_size {
            let mut px = [0.0; CHANNELS];
            let mut strongest = 0.0f64;
            for (c, sigma, color) in &blobs {
                let d2 = (y as f64 - c[0]).powi(2) + (x as f64 - c[1]).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                strongest = strongest.max(g);
                for ch in 0..CHANNELS {
                    px[ch] += g * color[ch];
                }
            }
            for v in px {
                image.push(T::from_f64_lossy((v + noise.sample(rng)).clamp(0.0, 1.0)));
            }
            mask.push(if strongest > MASK_THRESHOLD { T::one() } else { T::zero() });
        }
    }
    (
        Tensor::new(vec![image_size, image_size, CHANNELS], image).expect("shape"),
        Tensor::new(vec![image_size, image_size], mask).expect("shape"),
    )
}

/// `count` image/mask pairs from one seeded stream.
pub fn generate<T: Scalar>(count: usize, image_size: usize, seed: u64) -> Vec<(Tensor<T>, Tensor<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample(image_size, &mut rng)).collect()
}

/// Writes `images/`, `masks/`, and `manifest.json` under `dir`. Returns a
/// warning when the size does not tile into default patches.
pub fn write_dataset<T: Scalar>(dir: &Path, count: usize, image_size: usize, seed: u64) -> Result<Option<String>, Error> {
    if count == 0 || image_size == 0 {
        return Err(Error::Config("count and image size must be positive".into()));
    }
    let warning = (image_size % DEFAULT_PATCH != 0).then(|| {
        format!("image size {image_size} is not divisible by the default patch size {DEFAULT_PATCH}")
    });
    let mkdir = |p: PathBuf| fs::create_dir_all(&p).map_err(|e| Error::Io { path: p, source: e });
    mkdir(dir.join("images"))?;
    mkdir(dir.join("masks"))?;
    let mut manifest = DataManifest {
        count,
        image_size,
        channels: CHANNELS,
        seed,
        dtype: T::DTYPE,
        images: Vec::with_capacity(count),
        masks: Vec::with_capacity(count),
    };
    for (i, (image, mask)) in generate::<T>(count, image_size, seed).iter().enumerate() {
        let img = format!("images/img_{i:04}.dtnsr");
        let msk = format!("masks/mask_{i:04}.dtnsr");
        write_tensor(dir.join(&img), image)?;
        write_tensor(dir.join(&msk), mask)?;
        manifest.images.push(img);
        manifest.masks.push(msk);
    }
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::Io { path, source: e })?;
    Ok(warning)
}

/// Loads the images listed in a dataset manifest.
pub fn load_images<T: Scalar>(dir: &Path) -> Result<Vec<Tensor<T>>, Error> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let manifest: DataManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    manifest
        .images
        .iter()
        .map(|f| dilattn_core::io::read_tensor(dir.join(f)).map(|t| t.into_tensor()))
        .collect()
}
