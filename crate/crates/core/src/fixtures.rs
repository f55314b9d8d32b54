//! Deterministic fixtures shared by the CLI, the checks and the tests.

use crate::error::{Error, Result};
use crate::imaging::{Image, Shape};
use crate::prior::GmmPrior;
use crate::transform::{TransformInstance, TransformSpec};

/// Grayscale test card: smooth shading, a disk, a soft ring, bars and a
/// sinusoidal texture patch, all inside `[0.05, 0.95]`.
pub fn smoke_image(size: usize) -> Image {
    let n = size as f64;
    Image::from_fn(Shape::new(size, size, 1), |r, c, _| {
        let (y, x) = ((r as f64 + 0.5) / n, (c as f64 + 0.5) / n);
        let mut v = 0.25 + 0.3 * x + 0.15 * y;
        let (dy, dx) = (y - 0.35, x - 0.3);
        if dy * dy + dx * dx < 0.02 {
            v = 0.85;
        }
        let ring = ((y - 0.7).powi(2) + (x - 0.7).powi(2)).sqrt();
        v += 0.3 * (-((ring - 0.15) / 0.03).powi(2)).exp();
        if (0.1..0.45).contains(&y) && x > 0.65 && ((x * 20.0) as usize) % 2 == 0 {
            v = 0.1;
        }
        if y > 0.75 && x < 0.4 {
            v += 0.15 * (x * 60.0).sin() * (y * 45.0).cos();
        }
        v.clamp(0.05, 0.95)
    })
    .expect("valid shape")
}

/// The prior mixed over the orbit of every component mean under the finite
/// group `spec`, with means read as `shape` images. The result is invariant
/// under each group element.
pub fn group_symmetric_prior(base: &GmmPrior, spec: &TransformSpec, shape: Shape) -> Result<GmmPrior> {
    if shape.len() != base.dim() {
        return Err(Error::Shape(format!(
            "prior dimension {} does not match {shape}",
            base.dim()
        )));
    }
    let elements: Vec<TransformInstance> = spec
        .enumerate()
        .ok_or_else(|| Error::InvalidArgument("symmetrizing needs a finite group".into()))?
        .into_iter()
        .map(|(_, g)| g)
        .collect();
    let maps: Vec<Box<dyn Fn(&[f64]) -> Vec<f64>>> = elements
        .into_iter()
        .map(|g| {
            Box::new(move |m: &[f64]| {
                let img = Image::from_raw(shape, m.to_vec());
                g.apply(&img).expect("shape checked").into_data()
            }) as Box<dyn Fn(&[f64]) -> Vec<f64>>
        })
        .collect();
    let refs: Vec<&dyn Fn(&[f64]) -> Vec<f64>> = maps.iter().map(|b| b.as_ref()).collect();
    base.symmetrized(&refs)
}

/// Flip-invariant mixture on 2×2 images built from one asymmetric mean.
pub fn flip_symmetric_gmm_2x2(tau: f64) -> GmmPrior {
    let base = GmmPrior::single(vec![1.0, 0.2, -0.3, 0.5], tau).expect("valid prior");
    group_symmetric_prior(&base, &TransformSpec::Flip, Shape::new(2, 2, 1)).expect("flip group is finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_image_is_deterministic_and_in_range() {
        let a = smoke_image(64);
        let b = smoke_image(64);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.05..=0.95).contains(v)));
        // not flat
        let m = a.mean();
        assert!(a.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / a.len() as f64 > 1e-2);
    }

    #[test]
    fn symmetric_prior_is_invariant() {
        let shape = Shape::new(2, 2, 1);
        let p = flip_symmetric_gmm_2x2(0.5);
        assert_eq!(p.components().len(), 4);
        let x = Image::from_shape(shape, vec![0.3, -0.7, 1.1, 0.05]).unwrap();
        let base = p.log_density(0.5, x.data()).unwrap();
        for (_, g) in TransformSpec::Flip.enumerate().unwrap() {
            let gx = g.apply(&x).unwrap();
            assert!((p.log_density(0.5, gx.data()).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetrizing_needs_finite_group() {
        let base = GmmPrior::single(vec![0.0; 4], 1.0).unwrap();
        let spec = TransformSpec::SubpixelRotation { max_angle: 1.0 };
        assert!(group_symmetric_prior(&base, &spec, Shape::new(2, 2, 1)).is_err());
        assert!(group_symmetric_prior(&base, &TransformSpec::Flip, Shape::new(3, 3, 1)).is_err());
    }
}
