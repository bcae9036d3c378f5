//! CutMix: paste a rectangular patch of one image onto another and mix the
//! labels by exact pixel provenance.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Axis-aligned box, half-open: rows y0..y1, columns x0..x1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxCoords {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BoxCoords {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

/// One mixed training sample.
///
/// Invariants: pixels inside `box_` come from image A, everything else from
/// image B, and `soft_label = lambda*y_A + (1-lambda)*y_B` where `lambda`
/// is the exact fraction of A-sourced pixels.
#[derive(Debug, Clone)]
pub struct MixedSample {
    pub image: Tensor,
    pub soft_label: Vec<f64>,
    pub lambda: f64,
    pub box_: BoxCoords,
}

/// Sample a box of area fraction `lambda`.
///
/// The box is round(sqrt(lambda)*H) by round(sqrt(lambda)*W) and its position
/// is uniform among placements that keep it entirely inside the image, so
/// clipping never distorts the area.
fn sample_cutmix_box(lambda: f64, h: usize, w: usize, rng: &mut Rng) -> Result<BoxCoords> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument {
            op: "sample_cutmix_mask",
            detail: format!("lambda must lie in [0, 1], got {lambda}"),
        });
    }
    let bh = (lambda.sqrt() * h as f64).round() as usize;
    let bw = (lambda.sqrt() * w as f64).round() as usize;
    let y0 = rng.below(h - bh + 1);
    let x0 = rng.below(w - bw + 1);
    Ok(BoxCoords {
        y0,
        x0,
        y1: y0 + bh,
        x1: x0 + bw,
    })
}

/// Sample the binary mask for a requested area fraction `lambda`; the mask
/// is 1 inside the box.
pub fn sample_cutmix_mask(
    lambda: f64,
    h: usize,
    w: usize,
    rng: &mut Rng,
) -> Result<(Vec<bool>, BoxCoords)> {
    let box_ = sample_cutmix_box(lambda, h, w, rng)?;
    let mut mask = vec![false; h * w];
    for y in box_.y0..box_.y1 {
        for x in box_.x0..box_.x1 {
            mask[y * w + x] = true;
        }
    }
    Ok((mask, box_))
}

/// Mix two samples with an explicit `lambda`. The soft label uses the
/// realized pixel fraction (box area / image area), which equals `lambda`
/// up to integer quantization of the box sides.
pub fn cutmix_with_lambda(
    image_a: &Tensor,
    label_a: &[f64],
    image_b: &Tensor,
    label_b: &[f64],
    lambda: f64,
    rng: &mut Rng,
) -> Result<MixedSample> {
    image_a.check_same_shape("cutmix", image_b)?;
    if label_a.len() != label_b.len() {
        return Err(Error::ShapeMismatch {
            op: "cutmix",
            detail: format!("label lengths {} vs {}", label_a.len(), label_b.len()),
        });
    }
    let [_, c, h, w] = image_a.shape();
    let box_ = sample_cutmix_box(lambda, h, w, rng)?;
    let realized = box_.area() as f64 / (h * w) as f64;

    let mut image = image_b.clone();
    for ci in 0..c {
        for y in box_.y0..box_.y1 {
            for x in box_.x0..box_.x1 {
                *image.at_mut(0, ci, y, x) = image_a.at(0, ci, y, x);
            }
        }
    }
    let soft_label = label_a
        .iter()
        .zip(label_b)
        .map(|(a, b)| realized * a + (1.0 - realized) * b)
        .collect();
    Ok(MixedSample {
        image,
        soft_label,
        lambda: realized,
        box_,
    })
}

/// Mix two samples with lambda drawn from U(0, 1).
pub fn cutmix(
    image_a: &Tensor,
    label_a: &[f64],
    image_b: &Tensor,
    label_b: &[f64],
    rng: &mut Rng,
) -> Result<MixedSample> {
    let lambda = rng.next_f64();
    cutmix_with_lambda(image_a, label_a, image_b, label_b, lambda, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn distinct_images(h: usize, w: usize) -> (Tensor, Tensor) {
        let a = Tensor::from_fn([1, 1, h, w], {
            let mut i = 0.0;
            move || {
                i += 1.0;
                i
            }
        });
        let b = a.map(|v| -v);
        (a, b)
    }

    #[test]
    fn lambda_one_covers_full_image() {
        let mut rng = Rng::seed_from_u64(60);
        let (mask, box_) = sample_cutmix_mask(1.0, 8, 8, &mut rng).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert_eq!(box_.area(), 64);
    }

    #[test]
    fn lambda_zero_is_empty() {
        let mut rng = Rng::seed_from_u64(61);
        let (mask, box_) = sample_cutmix_mask(0.0, 8, 8, &mut rng).unwrap();
        assert!(mask.iter().all(|&m| !m));
        assert_eq!(box_.area(), 0);
    }

    #[test]
    fn quarter_lambda_on_32x32_covers_256_pixels() {
        let mut rng = Rng::seed_from_u64(62);
        let (mask, box_) = sample_cutmix_mask(0.25, 32, 32, &mut rng).unwrap();
        assert_eq!(box_.y1 - box_.y0, 16);
        assert_eq!(box_.x1 - box_.x0, 16);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 256);
    }

    #[test]
    fn identical_inputs_are_a_fixed_point() {
        let mut rng = Rng::seed_from_u64(63);
        let image = Tensor::from_fn([1, 3, 8, 8], || rng.uniform(0.0, 1.0));
        let label = vec![0.0, 1.0, 0.0];
        for _ in 0..10 {
            let mixed = cutmix(&image, &label, &image, &label, &mut rng).unwrap();
            assert_eq!(mixed.image.data(), image.data());
            assert_eq!(mixed.soft_label, label);
        }
    }

    #[test]
    fn lambda_one_returns_sample_a_exactly() {
        let mut rng = Rng::seed_from_u64(64);
        let (a, b) = distinct_images(8, 8);
        let mixed =
            cutmix_with_lambda(&a, &[1.0, 0.0], &b, &[0.0, 1.0], 1.0, &mut rng).unwrap();
        assert_eq!(mixed.image.data(), a.data());
        assert_eq!(mixed.soft_label, vec![1.0, 0.0]);
        assert_eq!(mixed.lambda, 1.0);
    }

    #[test]
    fn lambda_zero_returns_sample_b_exactly() {
        let mut rng = Rng::seed_from_u64(65);
        let (a, b) = distinct_images(8, 8);
        let mixed =
            cutmix_with_lambda(&a, &[1.0, 0.0], &b, &[0.0, 1.0], 0.0, &mut rng).unwrap();
        assert_eq!(mixed.image.data(), b.data());
        assert_eq!(mixed.soft_label, vec![0.0, 1.0]);
    }

    #[test]
    fn pixel_provenance_fraction_equals_label_weight() {
        let mut rng = Rng::seed_from_u64(66);
        let (h, w) = (16, 16);
        let (a, b) = distinct_images(h, w);
        for _ in 0..200 {
            let mixed = cutmix(&a, &[1.0, 0.0], &b, &[0.0, 1.0], &mut rng).unwrap();
            let from_a = mixed
                .image
                .data()
                .iter()
                .filter(|v| **v > 0.0) // a is positive, b negative
                .count();
            let fraction = from_a as f64 / (h * w) as f64;
            let weight_a = mixed.soft_label[0];
            assert!(
                (fraction - weight_a).abs() <= 1.0 / (h * w) as f64,
                "fraction {fraction} vs weight {weight_a}"
            );
            // with the realized-area convention the match is in fact exact
            assert_eq!(fraction, weight_a);
        }
    }

    #[test]
    fn same_seed_reproduces_identical_mixes() {
        let (a, b) = distinct_images(12, 12);
        let mix1 = cutmix(&a, &[1.0, 0.0], &b, &[0.0, 1.0], &mut Rng::seed_from_u64(7)).unwrap();
        let mix2 = cutmix(&a, &[1.0, 0.0], &b, &[0.0, 1.0], &mut Rng::seed_from_u64(7)).unwrap();
        assert_eq!(mix1.image.data(), mix2.image.data());
        assert_eq!(mix1.soft_label, mix2.soft_label);
        assert_eq!(mix1.box_, mix2.box_);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = Rng::seed_from_u64(67);
        let a = Tensor::zeros([1, 1, 8, 8]);
        let b = Tensor::zeros([1, 1, 8, 9]);
        assert!(cutmix(&a, &[1.0], &b, &[1.0], &mut rng).is_err());
    }

    #[test]
    fn out_of_range_lambda_is_an_error() {
        let mut rng = Rng::seed_from_u64(68);
        assert!(sample_cutmix_mask(1.5, 8, 8, &mut rng).is_err());
        assert!(sample_cutmix_mask(-0.1, 8, 8, &mut rng).is_err());
    }
}
