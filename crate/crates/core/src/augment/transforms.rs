//! Deterministic geometric and photometric primitives.
//!
//! Geometric kinds resample bilinearly with clamp-to-edge padding and
//! preserve the image shape. Magnitude 0 is the exact identity for every
//! kind. Documented magnitude ranges:
//!
//! | kind          | magnitude                                  |
//! |---------------|--------------------------------------------|
//! | translate_x/y | pixels, |m| <= image side                  |
//! | rotate        | degrees, |m| <= 360                        |
//! | shear_x/y     | shear factor, |m| <= 1                     |
//! | posterize     | bits removed, m in [0, 4] (0 = identity)   |
//! | solarize      | inversion band, m in [0, 1]                |
//! | autocontrast  | blend toward full contrast, m in [0, 1]    |
//! | equalize      | blend toward equalized, m in [0, 1]        |

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    TranslateX,
    TranslateY,
    Rotate,
    ShearX,
    ShearY,
    Posterize,
    Solarize,
    Autocontrast,
    Equalize,
}

impl TransformKind {
    pub const ALL: [TransformKind; 9] = [
        TransformKind::TranslateX,
        TransformKind::TranslateY,
        TransformKind::Rotate,
        TransformKind::ShearX,
        TransformKind::ShearY,
        TransformKind::Posterize,
        TransformKind::Solarize,
        TransformKind::Autocontrast,
        TransformKind::Equalize,
    ];

    pub fn parse(name: &str) -> Result<TransformKind> {
        Ok(match name {
            "translate_x" => TransformKind::TranslateX,
            "translate_y" => TransformKind::TranslateY,
            "rotate" => TransformKind::Rotate,
            "shear_x" => TransformKind::ShearX,
            "shear_y" => TransformKind::ShearY,
            "posterize" => TransformKind::Posterize,
            "solarize" => TransformKind::Solarize,
            "autocontrast" => TransformKind::Autocontrast,
            "equalize" => TransformKind::Equalize,
            other => {
                return Err(Error::InvalidArgument {
                    op: "primitive_transform",
                    detail: format!("unknown transform kind '{other}'"),
                })
            }
        })
    }

    /// True for kinds whose magnitude is signed.
    pub fn signed(self) -> bool {
        matches!(
            self,
            TransformKind::TranslateX
                | TransformKind::TranslateY
                | TransformKind::Rotate
                | TransformKind::ShearX
                | TransformKind::ShearY
        )
    }
}

fn check_magnitude(kind: TransformKind, magnitude: f64, h: usize, w: usize) -> Result<()> {
    let ok = match kind {
        TransformKind::TranslateX | TransformKind::TranslateY => {
            magnitude.abs() <= h.max(w) as f64
        }
        TransformKind::Rotate => magnitude.abs() <= 360.0,
        TransformKind::ShearX | TransformKind::ShearY => magnitude.abs() <= 1.0,
        TransformKind::Posterize => (0.0..=4.0).contains(&magnitude),
        TransformKind::Solarize | TransformKind::Autocontrast | TransformKind::Equalize => {
            (0.0..=1.0).contains(&magnitude)
        }
    };
    if !ok || !magnitude.is_finite() {
        return Err(Error::InvalidArgument {
            op: "primitive_transform",
            detail: format!("magnitude {magnitude} outside documented range for {kind:?}"),
        });
    }
    Ok(())
}

/// Bilinear sample with clamp-to-edge padding.
fn sample_bilinear(plane: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    let clamp_y = |v: isize| v.clamp(0, h as isize - 1) as usize;
    let clamp_x = |v: isize| v.clamp(0, w as isize - 1) as usize;
    let (y0i, x0i) = (y0 as isize, x0 as isize);
    let p00 = plane[clamp_y(y0i) * w + clamp_x(x0i)];
    let p01 = plane[clamp_y(y0i) * w + clamp_x(x0i + 1)];
    let p10 = plane[clamp_y(y0i + 1) * w + clamp_x(x0i)];
    let p11 = plane[clamp_y(y0i + 1) * w + clamp_x(x0i + 1)];
    p00 * (1.0 - fy) * (1.0 - fx) + p01 * (1.0 - fy) * fx + p10 * fy * (1.0 - fx) + p11 * fy * fx
}

/// Apply an inverse coordinate map per channel with bilinear resampling.
fn warp(image: &Tensor, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let [_, c, h, w] = image.shape();
    let mut out = Tensor::zeros(image.shape());
    for ci in 0..c {
        let src = image.plane(0, ci).to_vec();
        let dst = out.plane_mut(0, ci);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = inverse(y as f64, x as f64);
                dst[y * w + x] = sample_bilinear(&src, h, w, sy, sx);
            }
        }
    }
    out
}

fn per_channel(image: &Tensor, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
    let [_, c, _, _] = image.shape();
    let mut out = image.clone();
    for ci in 0..c {
        let mapped = f(image.plane(0, ci));
        out.plane_mut(0, ci).copy_from_slice(&mapped);
    }
    out
}

fn autocontrast_full(plane: &[f64]) -> Vec<f64> {
    let min = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min < 1e-12 {
        return plane.to_vec();
    }
    plane.iter().map(|v| (v - min) / (max - min)).collect()
}

fn equalize_full(plane: &[f64]) -> Vec<f64> {
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    for &v in plane {
        let b = ((v.clamp(0.0, 1.0) * (BINS - 1) as f64).round()) as usize;
        hist[b] += 1;
    }
    let mut cdf = [0.0f64; BINS];
    let mut acc = 0usize;
    for (i, &h) in hist.iter().enumerate() {
        acc += h;
        cdf[i] = acc as f64 / plane.len() as f64;
    }
    plane
        .iter()
        .map(|&v| {
            let b = ((v.clamp(0.0, 1.0) * (BINS - 1) as f64).round()) as usize;
            cdf[b]
        })
        .collect()
}

/// Apply one primitive at the given magnitude. Pixel domain is [0, 1];
/// geometric kinds preserve it by construction, photometric kinds clamp.
pub fn primitive_transform(image: &Tensor, kind: TransformKind, magnitude: f64) -> Result<Tensor> {
    let [n, _, h, w] = image.shape();
    if n != 1 {
        return Err(Error::ShapeMismatch {
            op: "primitive_transform",
            detail: format!("expected a single-image tensor, got batch {n}"),
        });
    }
    check_magnitude(kind, magnitude, h, w)?;
    if magnitude == 0.0 {
        return Ok(image.clone());
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let out = match kind {
        TransformKind::TranslateX => warp(image, |y, x| (y, x - magnitude)),
        TransformKind::TranslateY => warp(image, |y, x| (y - magnitude, x)),
        TransformKind::Rotate => {
            let theta = magnitude.to_radians();
            let (s, c) = theta.sin_cos();
            warp(image, move |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                // inverse rotation
                (cy + dy * c - dx * s, cx + dy * s + dx * c)
            })
        }
        TransformKind::ShearX => warp(image, move |y, x| (y, x - magnitude * (y - cy))),
        TransformKind::ShearY => warp(image, move |y, x| (y - magnitude * (x - cx), x)),
        TransformKind::Posterize => {
            let levels = ((256.0 / 2f64.powf(magnitude)).round() as usize).max(2);
            let q = (levels - 1) as f64;
            image.map(|v| ((v.clamp(0.0, 1.0) * q).round() / q).clamp(0.0, 1.0))
        }
        TransformKind::Solarize => {
            let threshold = 1.0 - magnitude;
            image.map(|v| if v > threshold { 1.0 - v } else { v })
        }
        TransformKind::Autocontrast => per_channel(image, |p| {
            let full = autocontrast_full(p);
            p.iter()
                .zip(full)
                .map(|(v, f)| ((1.0 - magnitude) * v + magnitude * f).clamp(0.0, 1.0))
                .collect()
        }),
        TransformKind::Equalize => per_channel(image, |p| {
            let full = equalize_full(p);
            p.iter()
                .zip(full)
                .map(|(v, f)| ((1.0 - magnitude) * v + magnitude * f).clamp(0.0, 1.0))
                .collect()
        }),
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_image(rng: &mut Rng) -> Tensor {
        Tensor::from_fn([1, 3, 12, 12], || rng.uniform(0.0, 1.0))
    }

    #[test]
    fn magnitude_zero_is_identity_for_every_kind() {
        let mut rng = Rng::seed_from_u64(70);
        let image = random_image(&mut rng);
        for kind in TransformKind::ALL {
            let out = primitive_transform(&image, kind, 0.0).unwrap();
            assert_eq!(out.data(), image.data(), "{kind:?}");
        }
    }

    #[test]
    fn integer_translate_round_trip_restores_interior() {
        let mut rng = Rng::seed_from_u64(71);
        let k = 3.0;
        // constant margin wide enough that edge replication is invisible
        let mut image = Tensor::filled([1, 1, 16, 16], 0.5);
        for y in 6..10 {
            for x in 6..10 {
                *image.at_mut(0, 0, y, x) = rng.uniform(0.0, 1.0);
            }
        }
        let shifted = primitive_transform(&image, TransformKind::TranslateX, k).unwrap();
        let back = primitive_transform(&shifted, TransformKind::TranslateX, -k).unwrap();
        for (a, b) in image.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let shifted = primitive_transform(&image, TransformKind::TranslateY, k).unwrap();
        let back = primitive_transform(&shifted, TransformKind::TranslateY, -k).unwrap();
        for (a, b) in image.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn full_turn_rotation_is_identity_within_resampling_tolerance() {
        let mut rng = Rng::seed_from_u64(72);
        let image = random_image(&mut rng);
        let full = primitive_transform(&image, TransformKind::Rotate, 360.0).unwrap();
        for (a, b) in image.data().iter().zip(full.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // and as two half turns
        let half = primitive_transform(&image, TransformKind::Rotate, 180.0).unwrap();
        let back = primitive_transform(&half, TransformKind::Rotate, 180.0).unwrap();
        for (a, b) in image.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn integer_translate_moves_content_exactly() {
        let mut image = Tensor::zeros([1, 1, 8, 8]);
        *image.at_mut(0, 0, 4, 2) = 1.0;
        let out = primitive_transform(&image, TransformKind::TranslateX, 3.0).unwrap();
        assert_eq!(out.at(0, 0, 4, 5), 1.0);
        assert_eq!(out.at(0, 0, 4, 2), 0.0);
    }

    #[test]
    fn solarize_inverts_only_above_threshold() {
        let image = Tensor::from_vec([1, 1, 1, 3], vec![0.2, 0.6, 0.95]).unwrap();
        let out = primitive_transform(&image, TransformKind::Solarize, 0.3).unwrap();
        assert_eq!(out.data()[0], 0.2);
        assert_eq!(out.data()[1], 0.6);
        assert!((out.data()[2] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn posterize_quantizes_to_expected_levels() {
        let image = Tensor::from_vec([1, 1, 1, 4], vec![0.0, 0.26, 0.74, 1.0]).unwrap();
        // magnitude 4 leaves 16 levels
        let out = primitive_transform(&image, TransformKind::Posterize, 4.0).unwrap();
        for v in out.data() {
            let scaled = v * 15.0;
            assert!((scaled - scaled.round()).abs() < 1e-9, "{v} not on lattice");
        }
    }

    #[test]
    fn autocontrast_full_stretches_to_unit_range() {
        let image = Tensor::from_vec([1, 1, 1, 3], vec![0.4, 0.5, 0.6]).unwrap();
        let out = primitive_transform(&image, TransformKind::Autocontrast, 1.0).unwrap();
        assert!((out.data()[0] - 0.0).abs() < 1e-12);
        assert!((out.data()[1] - 0.5).abs() < 1e-12);
        assert!((out.data()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equalize_flattens_a_skewed_histogram() {
        // three-quarters dark pixels: equalization spreads them upward
        let mut vals = vec![0.1; 48];
        vals.extend(vec![0.9; 16]);
        let image = Tensor::from_vec([1, 1, 8, 8], vals).unwrap();
        let out = primitive_transform(&image, TransformKind::Equalize, 1.0).unwrap();
        assert!((out.data()[0] - 0.75).abs() < 1e-9);
        assert!((out.data()[63] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_kind_name_is_an_error() {
        assert!(TransformKind::parse("rotate").is_ok());
        assert!(TransformKind::parse("wobble").is_err());
    }

    #[test]
    fn out_of_range_magnitude_is_an_error() {
        let image = Tensor::zeros([1, 1, 4, 4]);
        assert!(primitive_transform(&image, TransformKind::Rotate, 361.0).is_err());
        assert!(primitive_transform(&image, TransformKind::Posterize, 5.0).is_err());
        assert!(primitive_transform(&image, TransformKind::Solarize, -0.1).is_err());
    }

    #[test]
    fn geometric_ops_preserve_shape() {
        let mut rng = Rng::seed_from_u64(73);
        let image = random_image(&mut rng);
        for kind in [
            TransformKind::TranslateX,
            TransformKind::Rotate,
            TransformKind::ShearX,
            TransformKind::ShearY,
        ] {
            let out = primitive_transform(&image, kind, 0.25).unwrap();
            assert_eq!(out.shape(), image.shape());
        }
    }
}
