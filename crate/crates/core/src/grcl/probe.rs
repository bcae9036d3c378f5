//! Receptive-field probe.
//!
//! Marks the input pixels with nonzero gradient of one chosen output
//! activation. To make "nonzero" mean "connected" rather than "didn't
//! happen to cancel", the probe runs on a surrogate with all-positive
//! weights and linearized activations: convolutions use a uniform positive
//! kernel, batch norm is dropped, ReLU becomes the identity, and the gate
//! squash becomes the affine map 0.5 + 0.25*g (its tangent at 0). Every
//! intermediate quantity is then a sum of positive terms, so gradient
//! support equals connectivity support exactly.

use crate::error::{Error, Result};

/// What to probe: a single convolution (control) or a gated recurrent block
/// with the given recursion depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeTarget {
    SingleConv { kernel: (usize, usize) },
    Grcl { kernel: (usize, usize), t_steps: usize },
}

/// Binary support map over the input grid.
#[derive(Debug, Clone)]
pub struct SupportMap {
    pub h: usize,
    pub w: usize,
    pub mask: Vec<bool>,
}

impl SupportMap {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.w + x]
    }

    /// Bounding box (height, width) of the supported region; (0, 0) when
    /// the support is empty.
    pub fn extent(&self) -> (usize, usize) {
        let mut ymin = usize::MAX;
        let mut ymax = 0usize;
        let mut xmin = usize::MAX;
        let mut xmax = 0usize;
        let mut any = false;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.mask[y * self.w + x] {
                    any = true;
                    ymin = ymin.min(y);
                    ymax = ymax.max(y);
                    xmin = xmin.min(x);
                    xmax = xmax.max(x);
                }
            }
        }
        if !any {
            return (0, 0);
        }
        (ymax - ymin + 1, xmax - xmin + 1)
    }

    /// Largest Chebyshev distance from `center` to a supported pixel.
    pub fn radius_chebyshev(&self, center: (usize, usize)) -> usize {
        let mut r = 0usize;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.mask[y * self.w + x] {
                    let dy = y.abs_diff(center.0);
                    let dx = x.abs_diff(center.1);
                    r = r.max(dy.max(dx));
                }
            }
        }
        r
    }

    /// True if support(self) is a superset of support(other).
    pub fn covers(&self, other: &SupportMap) -> bool {
        self.h == other.h
            && self.w == other.w
            && self
                .mask
                .iter()
                .zip(&other.mask)
                .all(|(a, b)| *a || !*b)
    }
}

/// Plain 2-D grid used by the surrogate forward/backward.
#[derive(Clone)]
struct Grid {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Grid {
    fn filled(h: usize, w: usize, v: f64) -> Grid {
        Grid {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    fn zeros(h: usize, w: usize) -> Grid {
        Grid::filled(h, w, 0.0)
    }
}

/// Same-shape correlation with a uniform positive kernel (weight 1/(kh*kw)),
/// stride 1, zero padding kernel/2. The kernel is symmetric, so this map is
/// its own adjoint and serves both forward and backward.
fn conv_uniform(x: &Grid, kernel: (usize, usize)) -> Grid {
    let (kh, kw) = kernel;
    let (ph, pw) = (kh / 2, kw / 2);
    let wgt = 1.0 / (kh * kw) as f64;
    let mut out = Grid::zeros(x.h, x.w);
    for y in 0..x.h {
        for xx in 0..x.w {
            let mut acc = 0.0;
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = y as isize + ky as isize - ph as isize;
                    let ix = xx as isize + kx as isize - pw as isize;
                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                        continue;
                    }
                    acc += x.data[iy as usize * x.w + ix as usize];
                }
            }
            out.data[y * x.w + xx] = wgt * acc;
        }
    }
    out
}

fn mul(a: &Grid, b: &Grid) -> Grid {
    Grid {
        h: a.h,
        w: a.w,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
}

fn add(a: &Grid, b: &Grid) -> Grid {
    Grid {
        h: a.h,
        w: a.w,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

fn add_into(acc: &mut Grid, b: &Grid) {
    for (x, y) in acc.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}

fn affine_gate(g: &Grid) -> Grid {
    Grid {
        h: g.h,
        w: g.w,
        data: g.data.iter().map(|v| 0.5 + 0.25 * v).collect(),
    }
}

/// Gradient support of output activation `output_coord` with respect to the
/// input, under the all-positive surrogate.
pub fn receptive_field_probe(
    target: ProbeTarget,
    input_shape: (usize, usize),
    output_coord: (usize, usize),
) -> Result<SupportMap> {
    let (h, w) = input_shape;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument {
            op: "receptive_field_probe",
            detail: "input must be non-empty".into(),
        });
    }
    // every surrogate op here preserves spatial shape
    if output_coord.0 >= h || output_coord.1 >= w {
        return Err(Error::InvalidArgument {
            op: "receptive_field_probe",
            detail: format!(
                "output coordinate {:?} outside output extent {}x{}",
                output_coord, h, w
            ),
        });
    }

    let mut seed = Grid::zeros(h, w);
    seed.data[output_coord.0 * w + output_coord.1] = 1.0;

    let d_u = match target {
        ProbeTarget::SingleConv { kernel } => conv_uniform(&seed, kernel),
        ProbeTarget::Grcl { kernel, t_steps } => {
            let u = Grid::filled(h, w, 1.0);
            // forward, recording the values backward needs
            let x0 = conv_uniform(&u, kernel);
            let c = conv_uniform(&u, kernel);
            let mut x = x0;
            let mut steps: Vec<(Grid, Grid, Grid)> = Vec::new(); // (x_prev, a, m)
            for _ in 0..t_steps {
                let a = conv_uniform(&x, kernel);
                let b = conv_uniform(&x, kernel);
                let g = add(&b, &c);
                let m = affine_gate(&g);
                let x_next = add(&x, &mul(&m, &a));
                steps.push((x.clone(), a, m));
                x = x_next;
            }
            // backward
            let mut d_x = seed;
            let mut d_c = Grid::zeros(h, w);
            for (_x_prev, a, m) in steps.iter().rev() {
                // x_next = x + m*a; g = b + c; m = 0.5 + 0.25 g
                let d_a = mul(&d_x, m);
                let d_m = mul(&d_x, a);
                let d_g = Grid {
                    h,
                    w,
                    data: d_m.data.iter().map(|v| 0.25 * v).collect(),
                };
                add_into(&mut d_c, &d_g);
                let d_from_b = conv_uniform(&d_g, kernel); // adjoint of B
                let d_from_a = conv_uniform(&d_a, kernel); // adjoint of A_t
                let mut d_prev = d_x;
                add_into(&mut d_prev, &d_from_a);
                add_into(&mut d_prev, &d_from_b);
                d_x = d_prev;
            }
            // x_0 = A0(u), c = C(u)
            let mut d_u = conv_uniform(&d_x, kernel);
            let d_u_c = conv_uniform(&d_c, kernel);
            add_into(&mut d_u, &d_u_c);
            d_u
        }
    };

    Ok(SupportMap {
        h,
        w,
        mask: d_u.data.iter().map(|&v| v != 0.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_3x3_conv_supports_its_kernel_footprint() {
        let map = receptive_field_probe(
            ProbeTarget::SingleConv { kernel: (3, 3) },
            (9, 9),
            (4, 4),
        )
        .unwrap();
        assert_eq!(map.count(), 9);
        assert_eq!(map.radius_chebyshev((4, 4)), 1);
        for y in 3..=5 {
            for x in 3..=5 {
                assert!(map.contains(y, x));
            }
        }
    }

    #[test]
    fn support_radius_grows_one_pixel_per_step() {
        let mut prev: Option<SupportMap> = None;
        for t in 0..=3 {
            let map = receptive_field_probe(
                ProbeTarget::Grcl {
                    kernel: (3, 3),
                    t_steps: t,
                },
                (33, 33),
                (16, 16),
            )
            .unwrap();
            let radius = map.radius_chebyshev((16, 16));
            assert_eq!(radius, t + 1, "T = {t}");
            if let Some(p) = &prev {
                assert!(map.covers(p), "support(T) must contain support(T-1)");
                assert!(map.count() > p.count(), "strict growth at T = {t}");
            }
            prev = Some(map);
        }
    }

    #[test]
    fn support_saturates_at_image_extent() {
        let map = receptive_field_probe(
            ProbeTarget::Grcl {
                kernel: (3, 3),
                t_steps: 20,
            },
            (9, 9),
            (4, 4),
        )
        .unwrap();
        assert_eq!(map.count(), 81);
        assert_eq!(map.radius_chebyshev((4, 4)), 4);
    }

    #[test]
    fn invalid_coordinate_is_an_error() {
        let err = receptive_field_probe(
            ProbeTarget::SingleConv { kernel: (3, 3) },
            (8, 8),
            (8, 0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument { .. }));
    }

    #[test]
    fn off_center_coordinate_clips_at_boundary() {
        let map = receptive_field_probe(
            ProbeTarget::Grcl {
                kernel: (3, 3),
                t_steps: 2,
            },
            (9, 9),
            (0, 0),
        )
        .unwrap();
        // radius 3 region clipped to the corner: 4x4 pixels
        assert_eq!(map.count(), 16);
    }
}
