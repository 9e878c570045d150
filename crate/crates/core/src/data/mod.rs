//! Datasets, augmentation, and per-step view batches.

mod augment;
mod cifar;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use augment::{augment_view, multicrop_extra, sample_patches_independent, AugmentConfig, Image, MulticropMode};
pub use cifar::{load_cifar, load_cifar_split, serialize as serialize_cifar, write_cifar, RECORD_BYTES};
pub use synth::{synth_dataset, SHAPE_NAMES};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
pub const NUM_CLASSES: usize = 10;

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
pub const SYNTH_MEAN: [f32; 3] = [0.5; 3];
pub const SYNTH_STD: [f32; 3] = [0.25; 3];

/// One labelled 32x32 RGB image, planar R, G, B bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    label: u8,
    pixels: Vec<u8>,
}

impl ImageRecord {
    pub fn new(label: u8, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::Invalid(format!("record needs {PIXELS} pixel bytes, got {}", pixels.len())));
        }
        if label as usize >= NUM_CLASSES {
            return Err(Error::Invalid(format!("label {label} >= {NUM_CLASSES}")));
        }
        Ok(Self { label, pixels })
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Pixels mapped to `[0, 1]`.
    pub fn to_image(&self) -> Image {
        Image::new(
            CHANNELS,
            IMAGE_SIZE,
            IMAGE_SIZE,
            self.pixels.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
        .expect("record size is fixed")
    }
}

/// Per-channel normalisation applied after augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const CIFAR: Self = Self { mean: CIFAR_MEAN, std: CIFAR_STD };
    pub const SYNTH: Self = Self { mean: SYNTH_MEAN, std: SYNTH_STD };

    pub fn apply(&self, img: &Image, out: &mut Vec<f32>) {
        let plane = img.height() * img.width();
        for (c, chunk) in img.data().chunks(plane).enumerate() {
            out.extend(chunk.iter().map(|&v| (v - self.mean[c]) / self.std[c]));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label as usize).collect()
    }

    /// Stacks images `idx` (un-augmented) into a normalised NCHW tensor.
    pub fn tensor<T: Scalar>(&self, idx: &[usize], norm: &Normalization) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(idx.len() * PIXELS);
        for &i in idx {
            norm.apply(&self.records[i].to_image(), &mut data);
        }
        images_to_tensor(&[idx.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)
    }
}

fn images_to_tensor<T: Scalar>(shape: &[usize], data: Vec<f32>) -> Result<Tensor<T>> {
    Tensor::new(shape, data.into_iter().map(|v| T::lit(f64::from(v))).collect())
}

/// Purpose of an rng substream; part of the substream id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    ViewA,
    ViewB,
    Extra,
    Patch(u8),
}

impl Stream {
    fn code(self) -> u64 {
        match self {
            Stream::ViewA => 0,
            Stream::ViewB => 1,
            Stream::Extra => 2,
            Stream::Patch(k) => 16 + u64::from(k),
        }
    }
}

/// Substream id for `(epoch, image, purpose)`. Injective for epochs below
/// 2^23 and image indices below 2^32.
pub fn stream_id(epoch: u64, image: u64, purpose: Stream) -> u64 {
    (epoch << 40) | (image << 8) | purpose.code()
}

/// Independent generator for one image's draws in one epoch.
pub fn substream(seed: u64, epoch: u64, image: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(epoch, image, purpose));
    rng
}

/// Deterministic per-epoch shuffle of `0..len`.
pub fn epoch_permutation(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_E90C);
    rng.set_stream(epoch | (1 << 63));
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Which extra online samples a pipeline needs per image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ViewNeeds {
    /// Independently sampled patches per image, and their side length.
    pub patches: Option<(usize, usize)>,
    pub extra_crop: bool,
}

/// Augmented views for one mini-batch.
#[derive(Clone, Debug)]
pub struct ViewBatch<T> {
    pub view_a: Tensor<T>,
    pub view_b: Tensor<T>,
    pub extra: Option<Tensor<T>>,
    /// `N * count` patches, image-major.
    pub patches: Option<Tensor<T>>,
    pub indices: Vec<usize>,
    pub epoch: u64,
}

impl<T: Scalar> ViewBatch<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

struct ImageViews {
    a: Vec<f32>,
    b: Vec<f32>,
    extra: Vec<f32>,
    patches: Vec<f32>,
}

/// Builds the views for `indices`. Each image draws from its own
/// substreams, so the batch does not depend on how work is scheduled.
pub fn build_views<T: Scalar>(
    data: &Dataset,
    indices: &[usize],
    seed: u64,
    epoch: u64,
    aug: &AugmentConfig,
    norm: &Normalization,
    needs: ViewNeeds,
) -> Result<ViewBatch<T>> {
    if let Some((_, size)) = needs.patches {
        if size > IMAGE_SIZE || size == 0 {
            return Err(Error::Invalid(format!("patch size {size} exceeds view size {IMAGE_SIZE}")));
        }
    }
    let one = |&i: &usize| -> ImageViews {
        let img = data.records[i].to_image();
        let (a_img, b_img) = (
            augment_view(&img, IMAGE_SIZE, aug, &mut substream(seed, epoch, i as u64, Stream::ViewA)),
            augment_view(&img, IMAGE_SIZE, aug, &mut substream(seed, epoch, i as u64, Stream::ViewB)),
        );
        let mut v = ImageViews {
            a: Vec::with_capacity(PIXELS),
            b: Vec::with_capacity(PIXELS),
            extra: Vec::new(),
            patches: Vec::new(),
        };
        norm.apply(&a_img, &mut v.a);
        norm.apply(&b_img, &mut v.b);
        if needs.extra_crop {
            let mut rng = substream(seed, epoch, i as u64, Stream::Extra);
            if let Some(e) = multicrop_extra(&img, aug, MulticropMode::ExtraFullCrop, &mut rng) {
                norm.apply(&e, &mut v.extra);
            }
        }
        if let Some((count, size)) = needs.patches {
            for k in 0..count {
                let mut rng = substream(seed, epoch, i as u64, Stream::Patch(k as u8));
                norm.apply(&augment_view(&img, size, aug, &mut rng), &mut v.patches);
            }
        }
        v
    };
    #[cfg(feature = "parallel")]
    let per_image: Vec<ImageViews> = indices.par_iter().map(one).collect();
    #[cfg(not(feature = "parallel"))]
    let per_image: Vec<ImageViews> = indices.iter().map(one).collect();

    let n = indices.len();
    let full = [n, CHANNELS, IMAGE_SIZE, IMAGE_SIZE];
    let cat = |f: fn(&ImageViews) -> &Vec<f32>| per_image.iter().flat_map(|v| f(v).iter().copied()).collect::<Vec<f32>>();
    Ok(ViewBatch {
        view_a: images_to_tensor(&full, cat(|v| &v.a))?,
        view_b: images_to_tensor(&full, cat(|v| &v.b))?,
        extra: if needs.extra_crop { Some(images_to_tensor(&full, cat(|v| &v.extra))?) } else { None },
        patches: match needs.patches {
            Some((count, size)) => Some(images_to_tensor(&[n * count, CHANNELS, size, size], cat(|v| &v.patches))?),
            None => None,
        },
        indices: indices.to_vec(),
        epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_invariants() {
        assert!(ImageRecord::new(3, vec![0; PIXELS]).is_ok());
        assert!(ImageRecord::new(10, vec![0; PIXELS]).is_err());
        assert!(ImageRecord::new(0, vec![0; PIXELS - 1]).is_err());
        let r = ImageRecord::new(1, vec![255; PIXELS]).unwrap();
        assert!(r.to_image().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn stream_ids_are_distinct_per_purpose() {
        let mut ids = std::collections::HashSet::new();
        for epoch in 0..3 {
            for img in 0..50 {
                for s in [Stream::ViewA, Stream::ViewB, Stream::Extra, Stream::Patch(0), Stream::Patch(7)] {
                    assert!(ids.insert(stream_id(epoch, img, s)));
                }
            }
        }
    }

    #[test]
    fn epoch_permutations() {
        let p0 = epoch_permutation(7, 0, 100);
        assert_eq!(p0, epoch_permutation(7, 0, 100));
        assert_ne!(p0, epoch_permutation(7, 1, 100));
        let mut sorted = p0.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn view_batch_shapes_and_determinism() {
        let ds = synth_dataset(6, 3, true);
        let needs = ViewNeeds { patches: Some((8, 16)), extra_crop: true };
        let aug = AugmentConfig::default();
        let b1 = build_views::<f32>(&ds, &[0, 2, 5], 11, 4, &aug, &Normalization::SYNTH, needs).unwrap();
        let b2 = build_views::<f32>(&ds, &[0, 2, 5], 11, 4, &aug, &Normalization::SYNTH, needs).unwrap();
        assert_eq!(b1.view_a, b2.view_a);
        assert_eq!(b1.patches, b2.patches);
        assert_eq!(b1.patches.as_ref().unwrap().shape(), &[24, 3, 16, 16]);
        assert_eq!(b1.extra.as_ref().unwrap().shape(), &[3, 3, 32, 32]);
        assert_ne!(b1.view_a, b1.view_b);
        // an image's views do not depend on its batch mates
        let solo = build_views::<f32>(&ds, &[2], 11, 4, &aug, &Normalization::SYNTH, needs).unwrap();
        assert_eq!(solo.view_a.row(0), b1.view_a.row(1));
        let big = ViewNeeds { patches: Some((1, 40)), extra_crop: false };
        assert!(build_views::<f32>(&ds, &[0], 1, 0, &aug, &Normalization::SYNTH, big).is_err());
    }
}
