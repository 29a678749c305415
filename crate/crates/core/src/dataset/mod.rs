//! Image/mask pairs on disk, preprocessing, group splits, statistics and the
//! synthetic scene generator.

mod netpbm;
mod stats;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::upsample_bilinear;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

pub use netpbm::{GrayImage, RgbImage};
pub use stats::{chi_squared, compute_stats, DatasetStats, AREA_BINS, COLOUR_BINS};
pub use synth::{generate_synthetic, SynthConfig};

/// Mask values at or above this are mirror.
pub const MASK_THRESHOLD: u8 = 128;

const IMAGE_EXT: &str = ".ppm";
const MASK_SUFFIX: &str = "_mask.pgm";
const GROUP_EXT: &str = ".group";

/// One decoded image with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub stem: String,
    pub image_path: Option<PathBuf>,
    pub mask_path: Option<PathBuf>,
    /// Mirror identity; splits never separate a group.
    pub group: String,
    pub image: RgbImage,
    /// Values are 0 or 255.
    pub mask: GrayImage,
}

impl SampleRecord {
    /// Builds an in-memory record, binarizing the mask.
    pub fn new(stem: impl Into<String>, group: impl Into<String>, image: RgbImage, mask: GrayImage) -> Result<Self> {
        let stem = stem.into();
        if image.width != mask.width || image.height != mask.height {
            return Err(Error::Data(format!(
                "{stem}: image is {}x{} but mask is {}x{}",
                image.width, image.height, mask.width, mask.height
            )));
        }
        Ok(SampleRecord {
            stem,
            image_path: None,
            mask_path: None,
            group: group.into(),
            image,
            mask: binarize(mask),
        })
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn is_mirror(&self, y: usize, x: usize) -> bool {
        self.mask.at(y, x) >= MASK_THRESHOLD
    }

    /// Writes `<stem>.ppm`, `<stem>_mask.pgm` and, when the group is not the
    /// stem prefix, `<stem>.group`.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        let image_path = dir.join(format!("{}{IMAGE_EXT}", self.stem));
        let mask_path = dir.join(format!("{}{MASK_SUFFIX}", self.stem));
        self.image.write(&image_path)?;
        self.mask.write(&mask_path)?;
        if default_group(&self.stem) != self.group {
            std::fs::write(dir.join(format!("{}{GROUP_EXT}", self.stem)), format!("{}\n", self.group))?;
        }
        self.image_path = Some(image_path);
        self.mask_path = Some(mask_path);
        Ok(())
    }
}

fn binarize(mut mask: GrayImage) -> GrayImage {
    for v in &mut mask.data {
        *v = if *v >= MASK_THRESHOLD { 255 } else { 0 };
    }
    mask
}

fn default_group(stem: &str) -> &str {
    stem.split('_').next().unwrap_or(stem)
}

/// Loads every `<stem>.ppm` / `<stem>_mask.pgm` pair in `dir`, sorted by
/// stem. Other files are ignored.
pub fn load_pairs(dir: &Path) -> Result<Vec<SampleRecord>> {
    let mut images = BTreeSet::new();
    let mut masks = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(MASK_SUFFIX) {
            masks.insert(stem.to_string());
        } else if let Some(stem) = name.strip_suffix(IMAGE_EXT) {
            images.insert(stem.to_string());
        }
    }
    if let Some(stem) = images.symmetric_difference(&masks).next() {
        let missing = if images.contains(stem) { "mask" } else { "image" };
        return Err(Error::Data(format!("{stem}: {missing} is missing for this pair")));
    }
    images
        .into_iter()
        .map(|stem| {
            let image_path = dir.join(format!("{stem}{IMAGE_EXT}"));
            let mask_path = dir.join(format!("{stem}{MASK_SUFFIX}"));
            let group_path = dir.join(format!("{stem}{GROUP_EXT}"));
            let group = if group_path.exists() {
                std::fs::read_to_string(&group_path)?.trim().to_string()
            } else {
                default_group(&stem).to_string()
            };
            if group.is_empty() {
                return Err(Error::Data(format!("{stem}: group file is empty")));
            }
            let mut record = SampleRecord::new(
                stem,
                group,
                RgbImage::read(&image_path)?,
                GrayImage::read(&mask_path)?,
            )?;
            record.image_path = Some(image_path);
            record.mask_path = Some(mask_path);
            Ok(record)
        })
        .collect()
}

/// `(1, 3, H, W)` in `[0, 1]`.
pub fn image_tensor<T: Real>(image: &RgbImage) -> Tensor<T> {
    Tensor::from_fn(Shape::new(1, 3, image.height, image.width), |_, c, y, x| {
        T::of(image.pixel(y, x)[c] as f64 / 255.0)
    })
}

/// Network input for `image`: bilinear resize to `resolution` square.
pub fn prepare_image<T: Real>(image: &RgbImage, resolution: usize) -> Result<Tensor<T>> {
    if resolution == 0 {
        return Err(Error::Argument("resolution must be positive".into()));
    }
    upsample_bilinear(&image_tensor(image), resolution, resolution)
}

/// `(1, 1, H, W)` in `{0, 1}`.
pub fn mask_tensor<T: Real>(record: &SampleRecord) -> Tensor<T> {
    Tensor::from_fn(Shape::new(1, 1, record.height(), record.width()), |_, _, y, x| {
        if record.is_mirror(y, x) {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Image as `(1, 3, H, W)` in `[0, 1]` and mask as `(1, 1, H, W)` in `{0, 1}`.
pub fn to_tensors<T: Real>(record: &SampleRecord) -> (Tensor<T>, Tensor<T>) {
    (image_tensor(&record.image), mask_tensor(record))
}

/// Nearest-neighbour resize with half-pixel centres.
pub fn resize_nearest<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = input.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, out_h, out_w), |n, c, y, x| {
        let sy = ((y * 2 + 1) * s.h / (2 * out_h)).min(s.h - 1);
        let sx = ((x * 2 + 1) * s.w / (2 * out_w)).min(s.w - 1);
        input.at(n, c, sy, sx)
    })
}

pub fn flip_horizontal<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    Tensor::from_fn(s, |n, c, y, x| input.at(n, c, y, s.w - 1 - x))
}

/// Resizes to `resolution` square (bilinear image, nearest mask) and, when
/// `augment` is set, flips both horizontally with probability one half.
pub fn preprocess<T: Real, R: Rng + ?Sized>(
    record: &SampleRecord,
    resolution: usize,
    augment: bool,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut image = prepare_image(&record.image, resolution)?;
    let mut mask = resize_nearest(&mask_tensor::<T>(record), resolution, resolution);
    if augment && rng.random_bool(0.5) {
        image = flip_horizontal(&image);
        mask = flip_horizontal(&mask);
    }
    Ok((image, mask))
}

/// Stacks per-sample tensors along the batch axis.
pub fn stack<T: Real>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::Argument("cannot stack an empty batch".into()))?
        .shape();
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        let s = t.shape();
        if s.c != first.c || s.h != first.h || s.w != first.w {
            return Err(crate::error::shape_err!("batch members differ: {first} vs {s}"));
        }
        data.extend_from_slice(t.data());
    }
    let n = data.len() / (first.c * first.h * first.w);
    Tensor::from_vec(Shape::new(n, first.c, first.h, first.w), data)
}

/// Assigns whole groups to the test side until its size is as close as
/// possible to `test_fraction` of the records. Returns `(train, test)`
/// indices, each in input order.
pub fn split_indices_by_group<R: Rng + ?Sized>(
    groups: &[&str],
    test_fraction: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!("test fraction must be in (0, 1), got {test_fraction}")));
    }
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::Data(format!(
            "a group split needs at least 2 groups, found {}",
            members.len()
        )));
    }
    let mut order: Vec<&str> = members.keys().copied().collect();
    order.shuffle(rng);
    let target = (test_fraction * groups.len() as f64).round() as usize;
    let mut test_groups = BTreeSet::new();
    let mut test_size = 0usize;
    for g in &order {
        let size = members[g].len();
        if (test_size + size).abs_diff(target) < test_size.abs_diff(target) {
            test_groups.insert(*g);
            test_size += size;
        }
    }
    // both sides must be populated
    if test_groups.is_empty() {
        test_groups.insert(order[0]);
    } else if test_groups.len() == order.len() {
        test_groups.remove(order[order.len() - 1]);
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..groups.len()).partition(|&i| test_groups.contains(groups[i]));
    Ok((train, test))
}

pub fn split_by_group<R: Rng + ?Sized>(
    records: &[SampleRecord],
    test_fraction: f64,
    rng: &mut R,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    let groups: Vec<&str> = records.iter().map(|r| r.group.as_str()).collect();
    let (train, test) = split_indices_by_group(&groups, test_fraction, rng)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| records[i].clone()).collect();
    Ok((pick(train), pick(test)))
}

/// [`split_by_group`] driven by a generator seeded from `seed`.
pub fn split_by_group_seeded(
    records: &[SampleRecord],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    split_by_group(records, test_fraction, &mut ChaCha8Rng::seed_from_u64(seed))
}
