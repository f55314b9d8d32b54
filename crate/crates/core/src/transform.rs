//! Transformation groups with a sampling law, and the two actions every
//! sampled element must support: forward application `G(x)` and the
//! Jacobian-transpose product `v ↦ J_G(x)ᵀ v`.
//!
//! All kinds here are affine in `x`, so the Jacobian never depends on `x`.
//! For the permutation kinds (rot90, flip, circular translation) `J_Gᵀ` is the
//! inverse permutation. For subpixel rotation it is the transpose of the
//! bilinear-interpolation matrix, which is *not* the inverse rotation.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Shape};

/// Finite groups up to this size are averaged exactly instead of sampled.
pub const ENUMERATION_LIMIT: usize = 8;

const WEIGHT_TOL: f64 = 1e-12;

fn default_max_shift() -> usize {
    8
}

fn default_max_angle() -> f64 {
    PI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    Identity,
    /// Quarter-turn rotations {0, 1, 2, 3} × π/2, uniform.
    Rot90,
    /// {id, horizontal, vertical, both}, uniform.
    Flip,
    /// Periodic integer shifts, uniform on `[-max_shift, max_shift]²`.
    CircularTranslation {
        #[serde(default = "default_max_shift")]
        max_shift: usize,
    },
    /// Bilinear rotation about the image center, angle uniform on
    /// `[-max_angle, max_angle]`, periodic boundary.
    SubpixelRotation {
        #[serde(default = "default_max_angle")]
        max_angle: f64,
    },
    /// `x ↦ x + σ z`, `z ~ N(0, I)`. With `sigma: None` the scale follows the
    /// denoiser noise level passed at sampling time.
    GaussianNoising {
        #[serde(default)]
        sigma: Option<f64>,
    },
    /// Two-stage draw: pick a component by weight, then sample it. Missing
    /// weights mean uniform.
    Mixture {
        components: Vec<TransformSpec>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransformInstance {
    Identity,
    /// `k` counter-clockwise quarter turns.
    Rot90 { k: u8 },
    Flip { horizontal: bool, vertical: bool },
    Translate { dy: i64, dx: i64 },
    SubpixelRotation { theta: f64 },
    Noise { sigma: f64, z: Image },
}

impl TransformSpec {
    pub fn mixture(components: Vec<TransformSpec>, weights: Option<Vec<f64>>) -> Result<Self> {
        let spec = TransformSpec::Mixture {
            components,
            weights,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TransformSpec::SubpixelRotation { max_angle } => {
                if !(max_angle.is_finite() && *max_angle >= 0.0) {
                    return Err(Error::Config(format!("invalid max_angle {max_angle}")));
                }
            }
            TransformSpec::GaussianNoising { sigma: Some(s) } => {
                if !(s.is_finite() && *s > 0.0) {
                    return Err(Error::Config(format!("noising sigma must be > 0, got {s}")));
                }
            }
            TransformSpec::Mixture {
                components,
                weights,
            } => {
                if components.is_empty() {
                    return Err(Error::Config("mixture needs at least one component".into()));
                }
                if let Some(w) = weights {
                    if w.len() != components.len() {
                        return Err(Error::Config(format!(
                            "mixture has {} components but {} weights",
                            components.len(),
                            w.len()
                        )));
                    }
                    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                        return Err(Error::Config("mixture weights must be nonnegative".into()));
                    }
                    let total: f64 = w.iter().sum();
                    if (total - 1.0).abs() > WEIGHT_TOL {
                        return Err(Error::Config(format!(
                            "mixture weights sum to {total}, expected 1"
                        )));
                    }
                }
                for c in components {
                    c.validate()?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn mixture_weights(&self) -> Option<Vec<f64>> {
        match self {
            TransformSpec::Mixture {
                components,
                weights,
            } => Some(
                weights
                    .clone()
                    .unwrap_or_else(|| vec![1.0 / components.len() as f64; components.len()]),
            ),
            _ => None,
        }
    }

    /// Number of distinct elements for finite groups, `None` otherwise.
    pub fn support_size(&self) -> Option<usize> {
        match self {
            TransformSpec::Identity => Some(1),
            TransformSpec::Rot90 | TransformSpec::Flip => Some(4),
            TransformSpec::CircularTranslation { max_shift } => {
                Some((2 * max_shift + 1) * (2 * max_shift + 1))
            }
            TransformSpec::SubpixelRotation { .. } | TransformSpec::GaussianNoising { .. } => None,
            TransformSpec::Mixture { components, .. } => {
                components.iter().map(|c| c.support_size()).sum()
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.support_size().is_some()
    }

    /// All elements with their probabilities, for finite groups.
    pub fn enumerate(&self) -> Option<Vec<(f64, TransformInstance)>> {
        match self {
            TransformSpec::Identity => Some(vec![(1.0, TransformInstance::Identity)]),
            TransformSpec::Rot90 => Some(
                (0..4)
                    .map(|k| (0.25, TransformInstance::Rot90 { k }))
                    .collect(),
            ),
            TransformSpec::Flip => Some(
                [(false, false), (true, false), (false, true), (true, true)]
                    .into_iter()
                    .map(|(horizontal, vertical)| {
                        (
                            0.25,
                            TransformInstance::Flip {
                                horizontal,
                                vertical,
                            },
                        )
                    })
                    .collect(),
            ),
            TransformSpec::CircularTranslation { max_shift } => {
                let m = *max_shift as i64;
                let p = 1.0 / ((2 * m + 1) * (2 * m + 1)) as f64;
                Some(
                    (-m..=m)
                        .flat_map(|dy| (-m..=m).map(move |dx| (p, TransformInstance::Translate { dy, dx })))
                        .collect(),
                )
            }
            TransformSpec::SubpixelRotation { .. } | TransformSpec::GaussianNoising { .. } => None,
            TransformSpec::Mixture { components, .. } => {
                let weights = self.mixture_weights().expect("mixture");
                let mut out = Vec::new();
                for (c, w) in components.iter().zip(weights) {
                    for (p, inst) in c.enumerate()? {
                        out.push((w * p, inst));
                    }
                }
                Some(out)
            }
        }
    }

    /// Enumeration if the group is finite and no larger than
    /// [`ENUMERATION_LIMIT`].
    pub fn small_enumeration(&self) -> Option<Vec<(f64, TransformInstance)>> {
        match self.support_size() {
            Some(n) if n <= ENUMERATION_LIMIT => self.enumerate(),
            _ => None,
        }
    }

    pub fn requires_square(&self) -> bool {
        match self {
            TransformSpec::Rot90 | TransformSpec::SubpixelRotation { .. } => true,
            TransformSpec::Mixture { components, .. } => components.iter().any(|c| c.requires_square()),
            _ => false,
        }
    }

    pub fn check_shape(&self, shape: Shape) -> Result<()> {
        if self.requires_square() && !shape.is_square() {
            return Err(Error::Shape(format!(
                "rotation transforms need a square image, got {shape}"
            )));
        }
        Ok(())
    }

    /// Draws `G ~ π`. `sigma` is the denoiser noise level, used by
    /// `gaussian_noising` when its own scale is unset.
    pub fn sample<R: Rng + ?Sized>(&self, shape: Shape, sigma: f64, rng: &mut R) -> TransformInstance {
        match self {
            TransformSpec::Identity => TransformInstance::Identity,
            TransformSpec::Rot90 => TransformInstance::Rot90 {
                k: rng.random_range(0..4u8),
            },
            TransformSpec::Flip => TransformInstance::Flip {
                horizontal: rng.random(),
                vertical: rng.random(),
            },
            TransformSpec::CircularTranslation { max_shift } => {
                let m = *max_shift as i64;
                TransformInstance::Translate {
                    dy: rng.random_range(-m..=m),
                    dx: rng.random_range(-m..=m),
                }
            }
            TransformSpec::SubpixelRotation { max_angle } => TransformInstance::SubpixelRotation {
                theta: if *max_angle > 0.0 {
                    rng.random_range(-max_angle..=*max_angle)
                } else {
                    0.0
                },
            },
            TransformSpec::GaussianNoising { sigma: own } => {
                let z: Vec<f64> = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
                TransformInstance::Noise {
                    sigma: own.unwrap_or(sigma),
                    z: Image::from_raw(shape, z),
                }
            }
            TransformSpec::Mixture { components, .. } => {
                let weights = self.mixture_weights().expect("mixture");
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = components.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                components[pick].sample(shape, sigma, rng)
            }
        }
    }
}

/// Source pixel for output `(r, c)` of a permutation instance.
fn permutation_source(t: &TransformInstance, h: usize, w: usize, r: usize, c: usize) -> (usize, usize) {
    match *t {
        TransformInstance::Identity => (r, c),
        TransformInstance::Rot90 { k } => match k % 4 {
            0 => (r, c),
            1 => (c, w - 1 - r),
            2 => (h - 1 - r, w - 1 - c),
            _ => (h - 1 - c, r),
        },
        TransformInstance::Flip {
            horizontal,
            vertical,
        } => (
            if vertical { h - 1 - r } else { r },
            if horizontal { w - 1 - c } else { c },
        ),
        TransformInstance::Translate { dy, dx } => (
            (r as i64 - dy).rem_euclid(h as i64) as usize,
            (c as i64 - dx).rem_euclid(w as i64) as usize,
        ),
        _ => unreachable!("not a permutation"),
    }
}

fn permute(t: &TransformInstance, x: &Image) -> Image {
    let s = x.shape();
    let mut out = Image::zeros(s);
    for r in 0..s.height {
        for c in 0..s.width {
            let (sr, sc) = permutation_source(t, s.height, s.width, r, c);
            for ch in 0..s.channels {
                out.set(r, c, ch, x.get(sr, sc, ch));
            }
        }
    }
    out
}

/// Bilinear taps `(flat pixel index, weight)` for each output pixel of a
/// rotation by `theta` about the center, with periodic wrap.
fn bilinear_taps(h: usize, w: usize, theta: f64) -> Vec<[(usize, f64); 4]> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let mut taps = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (u, v) = (r as f64 - cy, c as f64 - cx);
            // inverse rotation of the output coordinate gives the source point
            let sy = cy + cos * u - sin * v;
            let sx = cx + sin * u + cos * v;
            let (fy, fx) = (sy.floor(), sx.floor());
            let (ty, tx) = (sy - fy, sx - fx);
            let r0 = (fy as i64).rem_euclid(h as i64) as usize;
            let c0 = (fx as i64).rem_euclid(w as i64) as usize;
            let r1 = (r0 + 1) % h;
            let c1 = (c0 + 1) % w;
            taps.push([
                (r0 * w + c0, (1.0 - ty) * (1.0 - tx)),
                (r0 * w + c1, (1.0 - ty) * tx),
                (r1 * w + c0, ty * (1.0 - tx)),
                (r1 * w + c1, ty * tx),
            ]);
        }
    }
    taps
}

impl TransformInstance {
    pub fn label(&self) -> String {
        match self {
            TransformInstance::Identity => "identity".into(),
            TransformInstance::Rot90 { k } => format!("rot90:{k}"),
            TransformInstance::Flip {
                horizontal,
                vertical,
            } => format!("flip:{}{}", u8::from(*horizontal), u8::from(*vertical)),
            TransformInstance::Translate { dy, dx } => format!("translate:{dy},{dx}"),
            TransformInstance::SubpixelRotation { theta } => format!("subpixel:{theta:.6}"),
            TransformInstance::Noise { sigma, .. } => format!("noise:{sigma:.6}"),
        }
    }

    pub fn is_permutation(&self) -> bool {
        matches!(
            self,
            TransformInstance::Identity
                | TransformInstance::Rot90 { .. }
                | TransformInstance::Flip { .. }
                | TransformInstance::Translate { .. }
        )
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, TransformInstance::Noise { .. })
    }

    /// Inverse element for permutation kinds.
    pub fn inverse(&self) -> Option<TransformInstance> {
        match *self {
            TransformInstance::Identity => Some(TransformInstance::Identity),
            TransformInstance::Rot90 { k } => Some(TransformInstance::Rot90 { k: (4 - k % 4) % 4 }),
            TransformInstance::Flip { .. } => Some(self.clone()),
            TransformInstance::Translate { dy, dx } => Some(TransformInstance::Translate { dy: -dy, dx: -dx }),
            _ => None,
        }
    }

    /// `self ∘ other` (apply `other` first) for elements of the same finite
    /// group kind.
    pub fn compose(&self, other: &TransformInstance) -> Option<TransformInstance> {
        use TransformInstance::*;
        match (self, other) {
            (Identity, o) => Some(o.clone()),
            (s, Identity) => Some(s.clone()),
            (Rot90 { k: a }, Rot90 { k: b }) => Some(Rot90 { k: (a + b) % 4 }),
            (
                Flip {
                    horizontal: h1,
                    vertical: v1,
                },
                Flip {
                    horizontal: h2,
                    vertical: v2,
                },
            ) => Some(Flip {
                horizontal: h1 ^ h2,
                vertical: v1 ^ v2,
            }),
            (Translate { dy: a, dx: b }, Translate { dy: c, dx: d }) => Some(Translate { dy: a + c, dx: b + d }),
            _ => None,
        }
    }

    fn check(&self, shape: Shape) -> Result<()> {
        match self {
            TransformInstance::Rot90 { .. } | TransformInstance::SubpixelRotation { .. } if !shape.is_square() => {
                Err(Error::Shape(format!(
                    "rotation transforms need a square image, got {shape}"
                )))
            }
            TransformInstance::Noise { z, .. } if z.shape() != shape => Err(Error::Shape(format!(
                "noise draw has shape {}, image has {shape}",
                z.shape()
            ))),
            _ => Ok(()),
        }
    }

    /// `G(x)`.
    pub fn apply(&self, x: &Image) -> Result<Image> {
        self.check(x.shape())?;
        Ok(match self {
            TransformInstance::Identity => x.clone(),
            TransformInstance::Rot90 { .. } | TransformInstance::Flip { .. } | TransformInstance::Translate { .. } => {
                permute(self, x)
            }
            TransformInstance::SubpixelRotation { theta } => {
                let s = x.shape();
                let taps = bilinear_taps(s.height, s.width, *theta);
                let ch = s.channels;
                let mut out = vec![0.0; s.len()];
                for (p, tap) in taps.iter().enumerate() {
                    for k in 0..ch {
                        out[p * ch + k] = tap.iter().map(|&(q, wt)| wt * x.data()[q * ch + k]).sum();
                    }
                }
                Image::from_raw(s, out)
            }
            TransformInstance::Noise { sigma, z } => {
                let mut out = x.clone();
                out.axpy(*sigma, z);
                out
            }
        })
    }

    /// `J_G(x)ᵀ v`. The Jacobian of every kind here is independent of `x`,
    /// so only the shape of `x` matters.
    pub fn jtvp(&self, x: &Image, v: &Image) -> Result<Image> {
        x.ensure_same_shape(v)?;
        self.check(v.shape())?;
        Ok(match self {
            TransformInstance::Identity | TransformInstance::Noise { .. } => v.clone(),
            TransformInstance::Rot90 { .. } | TransformInstance::Flip { .. } | TransformInstance::Translate { .. } => {
                permute(&self.inverse().expect("permutation"), v)
            }
            TransformInstance::SubpixelRotation { theta } => {
                let s = v.shape();
                let taps = bilinear_taps(s.height, s.width, *theta);
                let ch = s.channels;
                let mut out = vec![0.0; s.len()];
                for (p, tap) in taps.iter().enumerate() {
                    for &(q, wt) in tap {
                        for k in 0..ch {
                            out[q * ch + k] += wt * v.data()[p * ch + k];
                        }
                    }
                }
                Image::from_raw(s, out)
            }
        })
    }

    /// `J_G(x)ᵀ G(x)`.
    pub fn jtg(&self, x: &Image) -> Result<Image> {
        let gx = self.apply(x)?;
        self.jtvp(x, &gx)
    }

    /// Operator norm of `J_G` (1 for permutations and noising; for bilinear
    /// rotation it is estimated by power iteration on `JᵀJ`).
    pub fn jacobian_norm(&self, shape: Shape) -> Result<f64> {
        if !matches!(self, TransformInstance::SubpixelRotation { .. }) {
            return Ok(1.0);
        }
        let mut v = Image::from_fn(shape, |r, c, ch| 1.0 + 0.01 * ((r * 31 + c * 17 + ch * 7) % 13) as f64)?;
        let mut lambda = 0.0;
        for _ in 0..200 {
            let n = v.norm();
            v = v.scale(1.0 / n);
            let w = self.jtg(&v)?;
            lambda = v.dot(&w);
            v = w;
        }
        Ok(lambda.max(0.0).sqrt())
    }
}

/// `E_π[J_Gᵀ(x) G(x)]`: exact when `enumerate` is set and the group is small
/// and finite, otherwise an `n_mc`-sample average.
pub fn mean_jtg<R: Rng + ?Sized>(
    spec: &TransformSpec,
    x: &Image,
    n_mc: usize,
    sigma: f64,
    enumerate: bool,
    rng: &mut R,
) -> Result<Image> {
    spec.check_shape(x.shape())?;
    if enumerate {
        if let Some(elements) = spec.small_enumeration() {
            let mut acc = x.zeros_like();
            for (p, g) in &elements {
                acc.axpy(*p, &g.jtg(x)?);
            }
            return Ok(acc);
        }
    }
    let n = n_mc.max(1);
    let mut acc = x.zeros_like();
    for _ in 0..n {
        let g = spec.sample(x.shape(), sigma, rng);
        acc.axpy(1.0 / n as f64, &g.jtg(x)?);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(shape: Shape, rng: &mut ChaCha8Rng) -> Image {
        Image::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn grid2x2(a: [f64; 4]) -> Image {
        Image::new(2, 2, 1, a.to_vec()).unwrap()
    }

    #[test]
    fn flip_and_rot90_examples() {
        let x = grid2x2([1.0, 2.0, 3.0, 4.0]);
        let h = TransformInstance::Flip {
            horizontal: true,
            vertical: false,
        };
        assert_eq!(h.apply(&x).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
        let v = TransformInstance::Flip {
            horizontal: false,
            vertical: true,
        };
        assert_eq!(v.apply(&x).unwrap().data(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(TransformInstance::Rot90 { k: 0 }.apply(&x).unwrap(), x);
        // counter-clockwise quarter turn
        assert_eq!(
            TransformInstance::Rot90 { k: 1 }.apply(&x).unwrap().data(),
            &[2.0, 4.0, 1.0, 3.0]
        );
        assert_eq!(h.jtvp(&x, &x).unwrap(), h.apply(&x).unwrap());
    }

    #[test]
    fn rotations_reject_non_square() {
        let x = Image::zeros(Shape::new(3, 4, 1));
        assert!(TransformInstance::Rot90 { k: 1 }.apply(&x).is_err());
        assert!(TransformInstance::SubpixelRotation { theta: 0.3 }.apply(&x).is_err());
        assert!(TransformSpec::Rot90.check_shape(x.shape()).is_err());
        assert!(TransformSpec::Flip.check_shape(x.shape()).is_ok());
    }

    #[test]
    fn jtvp_rejects_shape_mismatch() {
        let x = Image::zeros(Shape::new(3, 3, 1));
        let v = Image::zeros(Shape::new(3, 4, 1));
        assert!(TransformInstance::Identity.jtvp(&x, &v).is_err());
    }

    #[test]
    fn noising_jacobian_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = Shape::new(4, 5, 1);
        let g = TransformSpec::GaussianNoising { sigma: Some(0.3) }.sample(shape, 1.0, &mut rng);
        let x = random_image(shape, &mut rng);
        let v = random_image(shape, &mut rng);
        assert_eq!(g.jtvp(&x, &v).unwrap(), v);
        if let TransformInstance::Noise { sigma, z } = &g {
            assert_eq!(*sigma, 0.3);
            let gx = g.apply(&x).unwrap();
            let expect = x.zip_map(z, |a, b| a + 0.3 * b);
            assert!(gx.max_abs_diff(&expect) == 0.0);
        } else {
            panic!("expected noise instance");
        }
        // unset scale follows the denoiser sigma
        let g = TransformSpec::GaussianNoising { sigma: None }.sample(shape, 0.07, &mut rng);
        assert!(matches!(g, TransformInstance::Noise { sigma, .. } if sigma == 0.07));
    }

    #[test]
    fn adjoint_dot_product_all_linear_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let specs = [
            TransformSpec::Rot90,
            TransformSpec::Flip,
            TransformSpec::CircularTranslation { max_shift: 3 },
            TransformSpec::SubpixelRotation { max_angle: PI },
        ];
        for spec in &specs {
            for ch in [1, 3] {
                let shape = Shape::new(9, 9, ch);
                for _ in 0..100 {
                    let g = spec.sample(shape, 0.1, &mut rng);
                    let u = random_image(shape, &mut rng);
                    let v = random_image(shape, &mut rng);
                    let lhs = g.apply(&u).unwrap().dot(&v);
                    let rhs = u.dot(&g.jtvp(&u, &v).unwrap());
                    assert!((lhs - rhs).abs() < 1e-10, "{spec:?}: {lhs} vs {rhs}");
                }
            }
        }
    }

    #[test]
    fn subpixel_adjoint_is_not_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = Shape::new(8, 8, 1);
        let g = TransformInstance::SubpixelRotation { theta: 0.4 };
        let x = random_image(shape, &mut rng);
        let adj = g.jtvp(&x, &x).unwrap();
        let inv = TransformInstance::SubpixelRotation { theta: -0.4 }.apply(&x).unwrap();
        assert!(adj.max_abs_diff(&inv) > 1e-3);
    }

    #[test]
    fn isometries_preserve_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape::new(7, 7, 3);
        for spec in [TransformSpec::Rot90, TransformSpec::Flip, TransformSpec::CircularTranslation { max_shift: 8 }] {
            for _ in 0..20 {
                let g = spec.sample(shape, 0.0, &mut rng);
                let x = random_image(shape, &mut rng);
                assert!((g.apply(&x).unwrap().norm() - x.norm()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn subpixel_round_trip_on_smooth_blob() {
        let n = 128;
        let c = (n as f64 - 1.0) / 2.0;
        let x = Image::from_fn(Shape::new(n, n, 1), |r, col, _| {
            let (dy, dx) = (r as f64 - c - 2.0, col as f64 - c + 1.5);
            (-(dy * dy + dx * dx) / (2.0 * 100.0)).exp()
        })
        .unwrap();
        for theta in [0.3, -1.1, 2.5] {
            let fwd = TransformInstance::SubpixelRotation { theta }.apply(&x).unwrap();
            let back = TransformInstance::SubpixelRotation { theta: -theta }.apply(&fwd).unwrap();
            assert!(back.max_abs_diff(&x) <= 1e-2, "theta {theta}: {}", back.max_abs_diff(&x));
        }
        let zero = TransformInstance::SubpixelRotation { theta: 0.0 }.apply(&x).unwrap();
        assert!(zero.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn rot90_sampling_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 4000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            match TransformSpec::Rot90.sample(Shape::new(2, 2, 1), 0.0, &mut rng) {
                TransformInstance::Rot90 { k } => counts[k as usize] += 1,
                other => panic!("unexpected {other:?}"),
            }
        }
        // binomial(n, 1/4): mean n/4, std sqrt(n * 1/4 * 3/4)
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 4.0).abs() < 5.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn degenerate_samplers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = Shape::new(3, 3, 1);
        for _ in 0..50 {
            assert_eq!(TransformSpec::Identity.sample(shape, 0.1, &mut rng), TransformInstance::Identity);
        }
        let m = TransformSpec::mixture(vec![TransformSpec::Flip], Some(vec![1.0])).unwrap();
        for _ in 0..50 {
            assert!(matches!(m.sample(shape, 0.1, &mut rng), TransformInstance::Flip { .. }));
        }
    }

    #[test]
    fn mixture_validation() {
        assert!(TransformSpec::mixture(vec![], None).is_err());
        assert!(TransformSpec::mixture(vec![TransformSpec::Flip, TransformSpec::Rot90], Some(vec![0.5])).is_err());
        assert!(TransformSpec::mixture(vec![TransformSpec::Flip, TransformSpec::Rot90], Some(vec![0.7, 0.4])).is_err());
        assert!(TransformSpec::mixture(vec![TransformSpec::Flip, TransformSpec::Rot90], Some(vec![1.2, -0.2])).is_err());
        assert!(TransformSpec::mixture(vec![TransformSpec::Flip, TransformSpec::Rot90], Some(vec![0.25, 0.75])).is_ok());
        let m: TransformSpec =
            serde_json::from_str(r#"{"kind":"mixture","components":[{"kind":"flip"},{"kind":"rot90"}]}"#).unwrap();
        assert_eq!(m.mixture_weights().unwrap(), vec![0.5, 0.5]);
        let t: TransformSpec = serde_json::from_str(r#"{"kind":"circular_translation"}"#).unwrap();
        assert_eq!(t, TransformSpec::CircularTranslation { max_shift: 8 });
    }

    #[test]
    fn group_closure_and_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = Shape::new(5, 5, 1);
        for spec in [TransformSpec::Rot90, TransformSpec::Flip] {
            let elems = spec.enumerate().unwrap();
            assert_eq!(elems.len(), 4);
            assert!((elems.iter().map(|e| e.0).sum::<f64>() - 1.0).abs() < 1e-15);
            let x = random_image(shape, &mut rng);
            for (_, a) in &elems {
                for (_, b) in &elems {
                    let ab = a.compose(b).unwrap();
                    assert!(elems.iter().any(|(_, e)| *e == ab));
                    let direct = a.apply(&b.apply(&x).unwrap()).unwrap();
                    assert_eq!(ab.apply(&x).unwrap(), direct);
                }
            }
        }
    }

    #[test]
    fn haar_right_invariance_by_enumeration() {
        // For G uniform and any fixed G', the law of G∘G' is uniform again.
        for spec in [TransformSpec::Rot90, TransformSpec::Flip] {
            let elems = spec.enumerate().unwrap();
            for (_, fixed) in &elems {
                let mut hits = vec![0usize; elems.len()];
                for (_, g) in &elems {
                    let gg = g.compose(fixed).unwrap();
                    let idx = elems.iter().position(|(_, e)| *e == gg).unwrap();
                    hits[idx] += 1;
                }
                assert!(hits.iter().all(|&h| h == 1), "{spec:?}: {hits:?}");
            }
        }
    }

    #[test]
    fn mean_jtg_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = Shape::new(6, 6, 1);
        let x = random_image(shape, &mut rng);
        let id = mean_jtg(&TransformSpec::Identity, &x, 3, 0.1, true, &mut rng).unwrap();
        assert_eq!(id, x);
        let fl = mean_jtg(&TransformSpec::Flip, &x, 1, 0.1, true, &mut rng).unwrap();
        assert!(fl.max_abs_diff(&x) < 1e-15);

        let sigma = 0.5;
        let n_mc = 2000;
        let noisy = mean_jtg(&TransformSpec::GaussianNoising { sigma: None }, &x, n_mc, sigma, true, &mut rng).unwrap();
        let bound = 4.0 * sigma / (n_mc as f64).sqrt();
        for (a, b) in noisy.data().iter().zip(x.data()) {
            assert!((a - b).abs() < bound, "{a} vs {b}");
        }
    }

    #[test]
    fn enumeration_limits() {
        assert_eq!(TransformSpec::CircularTranslation { max_shift: 1 }.support_size(), Some(9));
        assert!(TransformSpec::CircularTranslation { max_shift: 1 }.small_enumeration().is_none());
        let m = TransformSpec::mixture(vec![TransformSpec::Flip, TransformSpec::Rot90], None).unwrap();
        let e = m.small_enumeration().unwrap();
        assert_eq!(e.len(), 8);
        assert!((e.iter().map(|p| p.0).sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(TransformSpec::SubpixelRotation { max_angle: 1.0 }.enumerate().is_none());
    }
}
