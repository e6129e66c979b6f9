//! In-memory samples and the pure parts of the input pipeline:
//! normalization, crop/flip augmentation, class-stratified subsets and
//! epoch-seeded batching. Parsing the on-disk formats lives in `lsskd`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::{rng, Error, Result};

/// Zero padding applied on each side before the random crop.
pub const CROP_PADDING: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// Normalized `C×H×W` values.
    pub pixels: Vec<f32>,
    pub shape: [usize; 3],
    pub label: usize,
    /// Record index within the source file.
    pub sample_id: u32,
}

/// Per-channel mean/std applied after scaling bytes to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Normalization {
    pub fn new(means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.len() != stds.len() {
            return Err(Error::invalid("normalization", "means and stds must be non-empty and equally long"));
        }
        if stds.iter().any(|&s| !(s > 0.0)) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("normalization", "stds must be positive and means finite"));
        }
        Ok(Normalization { means, stds })
    }

    pub fn cifar10() -> Self {
        Normalization { means: vec![0.4914, 0.4822, 0.4465], stds: vec![0.2470, 0.2435, 0.2616] }
    }

    pub fn cifar100() -> Self {
        Normalization { means: vec![0.5071, 0.4865, 0.4409], stds: vec![0.2673, 0.2564, 0.2762] }
    }

    pub fn mnist() -> Self {
        Normalization { means: vec![0.1307], stds: vec![0.3081] }
    }

    pub fn channels(&self) -> usize {
        self.means.len()
    }

    /// Normalize planar `C×H×W` bytes.
    pub fn apply(&self, planar: &[u8], channels: usize) -> Result<Vec<f32>> {
        if channels != self.channels() || !planar.len().is_multiple_of(channels) {
            return Err(Error::invalid(
                "normalization",
                format!("{} channel constants for a {channels}-channel image", self.channels()),
            ));
        }
        let plane = planar.len() / channels;
        Ok(planar
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let c = i / plane;
                ((b as f64 / 255.0 - self.means[c]) / self.stds[c]) as f32
            })
            .collect())
    }

    /// Inverse of [`Normalization::apply`], rounding back to bytes.
    pub fn to_bytes(&self, pixels: &[f32], channels: usize) -> Vec<u8> {
        let plane = pixels.len() / channels.max(1);
        pixels
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                let x = (v as f64 * self.stds[c] + self.means[c]) * 255.0;
                libm::round(x).clamp(0.0, 255.0) as u8
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub classes: usize,
    pub image_shape: [usize; 3],
    pub normalization: Normalization,
    pub train_count: usize,
    pub test_count: usize,
}

impl DatasetMeta {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("dataset", format!("{} classes; need at least 2", self.classes)));
        }
        if self.normalization.channels() != self.image_shape[0] {
            return Err(Error::invalid("dataset", "normalization channels differ from image channels"));
        }
        Ok(())
    }
}

/// Applies an explicit crop offset into the zero-padded frame (each in
/// `0..=2·CROP_PADDING`) and optional horizontal flip.
pub fn crop_and_flip(sample: &ImageSample, offset: (usize, usize), flip: bool) -> ImageSample {
    let [c, h, w] = sample.shape;
    let (dy, dx) = offset;
    let mut out = vec![0.0f32; sample.pixels.len()];
    for ch in 0..c {
        let src = &sample.pixels[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            // row r of the crop is padded row r + dy, i.e. source row r + dy − P
            let sr = (r + dy) as isize - CROP_PADDING as isize;
            if sr < 0 || sr >= h as isize {
                continue;
            }
            for col in 0..w {
                let cc = if flip { w - 1 - col } else { col };
                let sc = (cc + dx) as isize - CROP_PADDING as isize;
                if sc >= 0 && sc < w as isize {
                    dst[r * w + col] = src[sr as usize * w + sc as usize];
                }
            }
        }
    }
    ImageSample { pixels: out, ..sample.clone() }
}

/// Random crop from the 4-pixel zero-padded frame and a coin-flip
/// horizontal mirror. Label and shape are unchanged.
pub fn augment<R: Rng>(sample: &ImageSample, rng: &mut R) -> ImageSample {
    let dy = rng.random_range(0..=2 * CROP_PADDING);
    let dx = rng.random_range(0..=2 * CROP_PADDING);
    let flip = rng.random_bool(0.5);
    crop_and_flip(sample, (dy, dx), flip)
}

pub fn class_counts(samples: &[ImageSample], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in samples {
        if s.label < classes {
            counts[s.label] += 1;
        }
    }
    counts
}

/// Half-up rounding of `fraction · count`.
pub fn stratified_count(fraction: f64, count: usize) -> usize {
    libm::floor(fraction * count as f64 + 0.5) as usize
}

/// Indices of a class-balanced subset: per class, a seeded shuffle then the
/// first `round(fraction · count)` members. Indices are returned in source
/// order.
pub fn stratified_subset_indices(samples: &[ImageSample], classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("stratified_subset", format!("fraction {fraction} outside (0, 1]")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in samples.iter().enumerate() {
        if s.label >= classes {
            return Err(Error::invalid("stratified_subset", format!("label {} >= {classes}", s.label)));
        }
        by_class[s.label].push(i);
    }
    if let Some(c) = by_class.iter().position(|members| members.is_empty()) {
        return Err(Error::invalid("stratified_subset", format!("class {c} has no samples")));
    }
    let mut rng = rng::stream(seed);
    let mut keep = Vec::new();
    for mut members in by_class {
        let take = stratified_count(fraction, members.len());
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..take]);
    }
    keep.sort_unstable();
    Ok(keep)
}

pub fn stratified_subset(samples: &[ImageSample], classes: usize, fraction: f64, seed: u64) -> Result<Vec<ImageSample>> {
    let keep = stratified_subset_indices(samples, classes, fraction, seed)?;
    Ok(keep.into_iter().map(|i| samples[i].clone()).collect())
}

/// Shuffled mini-batches of `0..len` for one epoch, seeded by
/// `seed ⊕ epoch`. The final partial batch is kept.
pub fn batch_iter(len: usize, batch_size: usize, seed: u64, epoch: u32) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_iter", "batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(seed ^ epoch as u64));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(id: u32, label: usize, shape: [usize; 3]) -> ImageSample {
        let n = shape.iter().product::<usize>();
        let pixels = (0..n).map(|i| (i as f32 * 0.37 + id as f32).sin()).collect();
        ImageSample { pixels, shape, label, sample_id: id }
    }

    fn balanced(classes: usize, per_class: usize) -> Vec<ImageSample> {
        (0..classes * per_class).map(|i| sample(i as u32, i % classes, [1, 2, 2])).collect()
    }

    #[test]
    fn normalization_examples() {
        let n = Normalization::new(vec![0.5], vec![0.5]).unwrap();
        assert_eq!(n.apply(&[255], 1).unwrap(), vec![1.0]);
        let v = Normalization::mnist().apply(&[0; 4], 1).unwrap();
        for x in v {
            assert!((x as f64 + 0.1307 / 0.3081).abs() < 1e-6);
        }
        assert!(Normalization::new(vec![0.5], vec![0.0]).is_err());
        let bytes: Vec<u8> = (0..=255).collect();
        let c = Normalization::cifar10();
        let mut planar = bytes.clone();
        planar.extend(&bytes);
        planar.extend(&bytes);
        let px = c.apply(&planar, 3).unwrap();
        assert_eq!(c.to_bytes(&px, 3), planar);
    }

    #[test]
    fn centre_crop_without_flip_is_identity() {
        let s = sample(3, 1, [2, 5, 5]);
        assert_eq!(crop_and_flip(&s, (4, 4), false), s);
    }

    #[test]
    fn flip_is_an_involution() {
        let s = sample(3, 1, [2, 6, 6]);
        let once = crop_and_flip(&s, (4, 4), true);
        assert_ne!(once, s);
        assert_eq!(crop_and_flip(&once, (4, 4), true), s);
        // same off-centre crop, flipped twice over the cropped image
        let crop = crop_and_flip(&s, (1, 6), false);
        let twice = crop_and_flip(&crop_and_flip(&crop, (4, 4), true), (4, 4), true);
        assert_eq!(twice, crop);
    }

    #[test]
    fn crop_shift_moves_content_and_pads_with_zero() {
        let s = ImageSample { pixels: vec![1.0, 2.0, 3.0, 4.0], shape: [1, 2, 2], label: 0, sample_id: 0 };
        // offset (5,4): one row down into the padded frame
        let out = crop_and_flip(&s, (5, 4), false);
        assert_eq!(out.pixels, vec![3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let s = sample(9, 2, [3, 8, 8]);
        let a = augment(&s, &mut rng::sample_stream(11, 3, 9));
        let b = augment(&s, &mut rng::sample_stream(11, 3, 9));
        let bits = |x: &ImageSample| x.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn stratified_examples() {
        let all = balanced(10, 100);
        let sub = stratified_subset(&all, 10, 0.25, 1).unwrap();
        assert_eq!(sub.len(), 250);
        assert!(class_counts(&sub, 10).iter().all(|&c| c == 25));
        assert_eq!(stratified_subset(&all, 10, 1.0, 1).unwrap(), all);
        let a = stratified_subset_indices(&all, 10, 0.5, 42).unwrap();
        let b = stratified_subset_indices(&all, 10, 0.5, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, stratified_subset_indices(&all, 10, 0.5, 43).unwrap());
    }

    #[test]
    fn stratified_rejects_empty_class_and_rounds_half_up() {
        let all = balanced(3, 10);
        assert!(stratified_subset(&all, 4, 0.5, 0).is_err());
        assert_eq!(stratified_count(0.25, 10), 3);
        assert_eq!(stratified_count(0.75, 10), 8);
        assert_eq!(stratified_count(0.5, 5), 3);
    }

    #[test]
    fn batching_examples() {
        let sizes: Vec<usize> = batch_iter(130, 64, 7, 1).unwrap().iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![64, 64, 2]);
        assert_eq!(batch_iter(100, 10, 7, 2).unwrap(), batch_iter(100, 10, 7, 2).unwrap());
        assert_ne!(batch_iter(100, 100, 7, 1).unwrap(), batch_iter(100, 100, 7, 2).unwrap());
        assert!(batch_iter(10, 0, 0, 1).is_err());
        let mut all: Vec<usize> = batch_iter(130, 64, 7, 1).unwrap().concat();
        all.sort_unstable();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn stratified_counts_within_one(per in proptest::collection::vec(1usize..40, 2..6), fi in 0usize..4, seed in any::<u64>()) {
            let fraction = [0.25, 0.5, 0.75, 1.0][fi];
            let classes = per.len();
            let mut all = Vec::new();
            for (c, &n) in per.iter().enumerate() {
                for _ in 0..n {
                    all.push(sample(all.len() as u32, c, [1, 1, 1]));
                }
            }
            let sub = stratified_subset(&all, classes, fraction, seed).unwrap();
            for (c, &n) in class_counts(&sub, classes).iter().enumerate() {
                prop_assert!((n as f64 - fraction * per[c] as f64).abs() < 1.0);
            }
        }

        #[test]
        fn augmentation_preserves_shape_and_label(seed in any::<u64>(), label in 0usize..10) {
            let s = sample(1, label, [3, 6, 6]);
            let a = augment(&s, &mut rng::stream(seed));
            prop_assert_eq!(a.shape, s.shape);
            prop_assert_eq!(a.label, label);
            prop_assert_eq!(a.pixels.len(), s.pixels.len());
        }
    }
}
