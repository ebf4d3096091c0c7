//! Spatial point-set construction: normalized pixel intensities are treated
//! as a density over the image grid and point coordinates are sampled from
//! it, dequantized with uniform noise.

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, IdxImages, LabelKind, SetLabel, SetRecord};
use crate::error::{Error, Result};
use crate::par::try_indexed_map;
use crate::rng::{domains, stream_rng};
use crate::tensor::Tensor;

pub const DEFAULT_SPATIAL_POINTS: usize = 50;

/// The affine map standardizing raw pixel coordinates to roughly zero mean
/// and unit scale: `standardized = (raw − center) / half`. Stored alongside
/// generated corpora so samples can be mapped back for plotting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub center: [f64; 2],
    pub half: [f64; 2],
}

impl Affine {
    /// Grid-derived map for rows×cols images: [0, cols)×[0, rows) → ≈[−1, 1)².
    pub fn for_grid(rows: usize, cols: usize) -> Affine {
        Affine {
            center: [cols as f64 / 2.0, rows as f64 / 2.0],
            half: [cols as f64 / 2.0, rows as f64 / 2.0],
        }
    }

    pub fn standardize(&self, xy: [f64; 2]) -> [f64; 2] {
        [
            (xy[0] - self.center[0]) / self.half[0],
            (xy[1] - self.center[1]) / self.half[1],
        ]
    }

    pub fn destandardize(&self, xy: [f64; 2]) -> [f64; 2] {
        [
            xy[0] * self.half[0] + self.center[0],
            xy[1] * self.half[1] + self.center[1],
        ]
    }
}

/// One image turned into a set of (x, y) points in raw pixel coordinates:
/// x ∈ [0, cols), y ∈ [0, rows).
#[derive(Clone, Debug)]
pub struct SpatialSet {
    pub points: Tensor,
    pub digit: u8,
}

/// Samples `n_points` coordinates from `image` (row-major rows×cols
/// intensities) with replacement, proportionally to intensity; each pixel
/// index (r, c) becomes (x, y) = (c + u₁, r + u₂) with u ~ U[0,1).
pub fn spatial_from_image(
    image: &[u8],
    rows: usize,
    cols: usize,
    n_points: usize,
    rng: &mut impl Rng,
) -> Result<SpatialSet> {
    if n_points == 0 {
        return Err(Error::InvalidArgument("n_points must be positive".into()));
    }
    if image.len() != rows * cols {
        return Err(Error::ShapeMismatch {
            op: "spatial_from_image",
            lhs: vec![rows, cols],
            rhs: vec![image.len()],
        });
    }
    let weights: Vec<u32> = image.iter().map(|&v| v as u32).collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|_| Error::InvalidArgument("image has no positive intensity".into()))?;
    let mut data = Vec::with_capacity(n_points * 2);
    for _ in 0..n_points {
        let idx = dist.sample(rng);
        let (r, c) = (idx / cols, idx % cols);
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        data.push(c as f64 + u1);
        data.push(r as f64 + u2);
    }
    Ok(SpatialSet {
        points: Tensor::new(vec![n_points, 2], data)?,
        digit: 0,
    })
}

/// Builds a standardized 2-feature corpus from an image stack: one set per
/// image, per-set RNG streams derived from `(seed, image index)`. Returns
/// the corpus together with the affine map it was standardized by.
pub fn spatial_corpus(
    images: &IdxImages,
    labels: Option<&[u8]>,
    n_points: usize,
    seed: u64,
    max_sets: Option<usize>,
) -> Result<(Corpus, Affine)> {
    let n_sets = max_sets.map_or(images.count, |m| m.min(images.count));
    if n_sets == 0 {
        return Err(Error::EmptyDataset);
    }
    if let Some(l) = labels {
        if l.len() < n_sets {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} images",
                l.len(),
                n_sets
            )));
        }
    }
    let affine = Affine::for_grid(images.rows, images.cols);
    let sets = try_indexed_map(n_sets, |i| {
        let mut rng = stream_rng(seed, domains::SPATIAL_DATA, i as u64);
        let raw = spatial_from_image(images.image(i), images.rows, images.cols, n_points, &mut rng)?;
        let mut data = Vec::with_capacity(n_points * 2);
        for p in 0..n_points {
            let xy = affine.standardize([raw.points.data()[2 * p], raw.points.data()[2 * p + 1]]);
            data.extend_from_slice(&xy);
        }
        Ok(SetRecord {
            id: i as u32,
            values: Tensor::new(vec![n_points, 2], data)?,
            label: labels.map(|l| SetLabel {
                class_id: l[i] as u32,
                mean: 0.0,
                variance: 0.0,
            }),
        })
    })?;
    Ok((
        Corpus {
            sample_size: n_points,
            n_features: 2,
            label_kind: if labels.is_some() {
                LabelKind::ClassId
            } else {
                LabelKind::None
            },
            sets,
        },
        affine,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bright_pixel_confines_all_points() {
        let mut image = vec![0u8; 8 * 10]; // 8 rows, 10 cols
        image[3 * 10 + 7] = 255; // row 3, col 7
        let mut rng = stream_rng(1, 0, 0);
        let set = spatial_from_image(&image, 8, 10, 500, &mut rng).unwrap();
        for p in 0..500 {
            let x = set.points.data()[2 * p];
            let y = set.points.data()[2 * p + 1];
            assert!((7.0..8.0).contains(&x), "x {x}");
            assert!((3.0..4.0).contains(&y), "y {y}");
        }
    }

    #[test]
    fn uniform_image_frequencies_within_multinomial_bounds() {
        // 4x4 uniform image, 1e6 points: every pixel count within 3σ of N/16.
        let image = vec![10u8; 16];
        let mut rng = stream_rng(2, 0, 0);
        let n = 1_000_000;
        let set = spatial_from_image(&image, 4, 4, n, &mut rng).unwrap();
        let mut counts = [0usize; 16];
        for p in 0..n {
            let x = set.points.data()[2 * p] as usize;
            let y = set.points.data()[2 * p + 1] as usize;
            counts[y * 4 + x] += 1;
        }
        let expect = n as f64 / 16.0;
        let sigma = (n as f64 * (1.0 / 16.0) * (15.0 / 16.0)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() < 3.0 * sigma,
                "pixel {i}: {c} vs {expect} ± {sigma}"
            );
        }
    }

    #[test]
    fn coordinates_stay_inside_the_dequantized_grid() {
        let image: Vec<u8> = (0..28 * 28).map(|i| (i % 17) as u8).collect();
        let mut rng = stream_rng(3, 0, 0);
        let set = spatial_from_image(&image, 28, 28, 2000, &mut rng).unwrap();
        for p in 0..2000 {
            let x = set.points.data()[2 * p];
            let y = set.points.data()[2 * p + 1];
            assert!((0.0..28.0).contains(&x));
            assert!((0.0..28.0).contains(&y));
        }
    }

    #[test]
    fn all_zero_image_is_rejected() {
        let image = vec![0u8; 16];
        let mut rng = stream_rng(4, 0, 0);
        assert!(spatial_from_image(&image, 4, 4, 10, &mut rng).is_err());
    }

    #[test]
    fn corpus_is_standardized_and_deterministic() {
        let images = IdxImages {
            count: 3,
            rows: 4,
            cols: 4,
            data: (0..48).map(|i| (i % 7 + 1) as u8).collect(),
        };
        let (corpus, affine) = spatial_corpus(&images, Some(&[5, 2, 9]), 12, 7, None).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.n_features, 2);
        assert_eq!(affine, Affine::for_grid(4, 4));
        for set in &corpus.sets {
            for &v in set.values.data() {
                assert!((-1.0..1.0).contains(&v));
            }
        }
        assert_eq!(corpus.sets[1].label.unwrap().class_id, 2);
        let (again, _) = spatial_corpus(&images, Some(&[5, 2, 9]), 12, 7, None).unwrap();
        for (a, b) in corpus.sets.iter().zip(&again.sets) {
            assert_eq!(a.values.data(), b.values.data());
        }
    }

    #[test]
    fn affine_round_trips() {
        let affine = Affine::for_grid(28, 28);
        let p = [3.25, 27.9];
        let s = affine.standardize(p);
        let back = affine.destandardize(s);
        assert!((back[0] - p[0]).abs() < 1e-12);
        assert!((back[1] - p[1]).abs() < 1e-12);
    }
}
