//! Dataset statistics: mirror area ratios, location map and colour contrast.

use std::fmt::Write as _;

use super::{resize_nearest, to_tensors, RgbImage, SampleRecord};
use crate::error::{Error, Result};

pub const AREA_BINS: usize = 10;
/// Histogram bins per colour channel.
pub const COLOUR_BINS: usize = 8;
const CHI_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    /// Mirror pixels over total pixels, per image.
    pub area_ratios: Vec<f64>,
    /// Counts over `[0, 1]` in equal bins; a ratio of exactly 1 lands in the
    /// last bin.
    pub area_histogram: [usize; AREA_BINS],
    pub map_size: usize,
    /// Row-major `map_size x map_size` mean mask.
    pub location: Vec<f64>,
    /// `(stem, chi-squared)` for images with both mirror and non-mirror pixels.
    pub contrast: Vec<(String, f64)>,
    /// Images whose mask is all empty or all full.
    pub skipped: usize,
}

fn histogram(image: &RgbImage, keep: impl Fn(usize, usize) -> bool) -> Option<Vec<f64>> {
    let mut h = vec![0.0; COLOUR_BINS.pow(3)];
    let mut n = 0usize;
    let shift = 8 - COLOUR_BINS.trailing_zeros();
    for y in 0..image.height {
        for x in 0..image.width {
            if keep(y, x) {
                let [r, g, b] = image.pixel(y, x).map(|v| (v >> shift) as usize);
                h[(r * COLOUR_BINS + g) * COLOUR_BINS + b] += 1.0;
                n += 1;
            }
        }
    }
    if n == 0 {
        return None;
    }
    h.iter_mut().for_each(|v| *v /= n as f64);
    Some(h)
}

/// Chi-squared distance between the normalized joint RGB histograms inside
/// and outside the mask. `None` when either side has no pixels.
///
/// The epsilon floors the denominator instead of being added to it; it only
/// matters for bins empty on both sides, and disjoint supports give exactly 1.
pub fn chi_squared(record: &SampleRecord) -> Option<f64> {
    let inside = histogram(&record.image, |y, x| record.is_mirror(y, x))?;
    let outside = histogram(&record.image, |y, x| !record.is_mirror(y, x))?;
    let sum: f64 = inside
        .iter()
        .zip(&outside)
        .map(|(a, b)| (a - b).powi(2) / (a + b).max(CHI_EPS))
        .sum();
    Some(0.5 * sum)
}

/// Statistics over `records`; masks are resized (nearest) to `map_size`
/// square for the location map.
pub fn compute_stats(records: &[SampleRecord], map_size: usize) -> Result<DatasetStats> {
    if records.is_empty() {
        return Err(Error::Data("statistics need at least one record".into()));
    }
    if map_size == 0 {
        return Err(Error::Argument("map size must be positive".into()));
    }
    let mut stats = DatasetStats {
        area_ratios: Vec::with_capacity(records.len()),
        area_histogram: [0; AREA_BINS],
        map_size,
        location: vec![0.0; map_size * map_size],
        contrast: Vec::new(),
        skipped: 0,
    };
    for r in records {
        let mirror = r.mask.data.iter().filter(|&&v| v >= super::MASK_THRESHOLD).count();
        let ratio = mirror as f64 / r.mask.data.len() as f64;
        stats.area_ratios.push(ratio);
        stats.area_histogram[((ratio * AREA_BINS as f64) as usize).min(AREA_BINS - 1)] += 1;

        let (_, mask) = to_tensors::<f64>(r);
        let resized = resize_nearest(&mask, map_size, map_size);
        for (acc, v) in stats.location.iter_mut().zip(resized.data()) {
            *acc += v;
        }

        match chi_squared(r) {
            Some(c) => stats.contrast.push((r.stem.clone(), c)),
            None => stats.skipped += 1,
        }
    }
    let n = records.len() as f64;
    stats.location.iter_mut().for_each(|v| *v /= n);
    Ok(stats)
}

impl DatasetStats {
    /// Line-oriented dump: summary, histogram, per-image contrast and the
    /// location map, one row per line.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        let mean_contrast = if self.contrast.is_empty() {
            f64::NAN
        } else {
            self.contrast.iter().map(|(_, c)| c).sum::<f64>() / self.contrast.len() as f64
        };
        let _ = writeln!(
            out,
            "summary n_images={} chi2_skipped={} chi2_mean={mean_contrast:.6}",
            self.area_ratios.len(),
            self.skipped
        );
        for (i, count) in self.area_histogram.iter().enumerate() {
            let _ = writeln!(
                out,
                "area_bin lo={:.1} hi={:.1} count={count}",
                i as f64 / AREA_BINS as f64,
                (i + 1) as f64 / AREA_BINS as f64
            );
        }
        for (stem, c) in &self.contrast {
            let _ = writeln!(out, "chi2 stem={stem} value={c:.6}");
        }
        for (y, row) in self.location.chunks(self.map_size).enumerate() {
            let values: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(out, "location row={y} values={}", values.join(","));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GrayImage;

    fn record(image: RgbImage, mask: impl Fn(usize, usize) -> bool) -> SampleRecord {
        let mut m = GrayImage::new(image.width, image.height);
        for y in 0..image.height {
            for x in 0..image.width {
                m.data[y * image.width + x] = if mask(y, x) { 255 } else { 0 };
            }
        }
        SampleRecord::new("s", "g", image, m).unwrap()
    }

    fn checker(w: usize, h: usize) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = if (x + y) % 2 == 0 { 20 } else { 220 };
                img.set_pixel(y, x, [v, 255 - v, v / 2]);
            }
        }
        img
    }

    #[test]
    fn full_mask_gives_unit_map_and_no_contrast() {
        let r = record(checker(4, 4), |_, _| true);
        let s = compute_stats(&[r], 4).unwrap();
        assert!(s.location.iter().all(|&v| v == 1.0));
        assert_eq!(s.area_ratios, vec![1.0]);
        assert_eq!(s.area_histogram[AREA_BINS - 1], 1);
        assert_eq!(s.skipped, 1);
        assert!(s.contrast.is_empty());
    }

    #[test]
    fn identical_colour_distributions_have_zero_contrast() {
        // left and right halves hold the same checker colours
        let r = record(checker(4, 4), |_, x| x < 2);
        assert_eq!(chi_squared(&r), Some(0.0));
    }

    #[test]
    fn disjoint_colours_have_unit_contrast() {
        let mut img = RgbImage::new(4, 2);
        for x in 0..4 {
            img.set_pixel(0, x, [250, 10, 10]);
            img.set_pixel(1, x, if x % 2 == 0 { [10, 10, 250] } else { [10, 250, 10] });
        }
        let r = record(img, |y, _| y == 0);
        assert_eq!(chi_squared(&r), Some(1.0));
    }

    #[test]
    fn repeated_masks_reproduce_the_single_map() {
        let r = record(checker(5, 3), |y, x| (x * y) % 3 == 1);
        let single = compute_stats(std::slice::from_ref(&r), 6).unwrap();
        let many = compute_stats(&vec![r; 7], 6).unwrap();
        assert_eq!(single.location, many.location);
        assert_eq!(many.area_histogram.iter().sum::<usize>(), 7);
        assert!(many.location.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(compute_stats(&[], 4).is_err());
    }

    #[test]
    fn dump_is_line_oriented() {
        let r = record(checker(4, 4), |y, _| y < 1);
        let text = compute_stats(&[r], 2).unwrap().to_lines();
        assert!(text.starts_with("summary n_images=1 chi2_skipped=0"));
        assert_eq!(text.lines().filter(|l| l.starts_with("area_bin")).count(), AREA_BINS);
        assert_eq!(text.lines().filter(|l| l.starts_with("location")).count(), 2);
        assert!(text.contains("area_bin lo=0.2 hi=0.3 count=1"));
    }
}
