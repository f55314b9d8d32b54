//! Isotropic Gaussian-mixture prior with closed-form Gaussian smoothing.
//!
//! Convolving component `j` with `N(0, σ² I)` only changes its variance to
//! `v_j = τ_j² + σ²`, so `log p_σ`, its gradient and the MMSE denoiser are all
//! exact. Everything works on flat vectors; an image is just its data slice.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPrior", into = "RawPrior")]
pub struct GmmPrior {
    components: Vec<GmmComponent>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrior {
    components: Vec<GmmComponent>,
}

impl TryFrom<RawPrior> for GmmPrior {
    type Error = Error;
    fn try_from(raw: RawPrior) -> Result<Self> {
        GmmPrior::new(raw.components)
    }
}

impl From<GmmPrior> for RawPrior {
    fn from(p: GmmPrior) -> Self {
        RawPrior {
            components: p.components,
        }
    }
}

impl GmmPrior {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Config("prior needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::Config("prior dimension must be positive".into()));
        }
        let mut total = 0.0;
        for (j, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::Config(format!(
                    "component {j} has dimension {}, expected {dim}",
                    c.mean.len()
                )));
            }
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(Error::Config(format!("component {j} has weight {}", c.weight)));
            }
            if !(c.tau.is_finite() && c.tau > 0.0) {
                return Err(Error::Config(format!("component {j} has tau {}", c.tau)));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Config(format!("component {j} has a non-finite mean")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Config(format!("prior weights sum to {total}, expected 1")));
        }
        Ok(GmmPrior { components, dim })
    }

    pub fn single(mean: Vec<f64>, tau: f64) -> Result<Self> {
        GmmPrior::new(vec![GmmComponent {
            weight: 1.0,
            mean,
            tau,
        }])
    }

    /// Equal-weight, equal-τ mixture over the given means.
    pub fn uniform(means: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        GmmPrior::new(
            means
                .into_iter()
                .map(|mean| GmmComponent {
                    weight: w,
                    mean,
                    tau,
                })
                .collect(),
        )
    }

    /// Random prior for property tests: means in `[-2, 2]^d`, τ in
    /// `[0.2, 1.2]`, Dirichlet(1) weights.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize, n_components: usize) -> Result<Self> {
        let raw: Vec<f64> = (0..n_components)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let mut comps: Vec<GmmComponent> = raw
            .iter()
            .map(|w| GmmComponent {
                weight: w / total,
                mean: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                tau: rng.random_range(0.2..1.2),
            })
            .collect();
        // push the rounding residue into the last weight
        let head: f64 = comps[..n_components - 1].iter().map(|c| c.weight).sum();
        comps[n_components - 1].weight = 1.0 - head;
        GmmPrior::new(comps)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    /// Same weights and τ, means replaced by `f(mean)`.
    pub fn map_means(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<GmmPrior> {
        GmmPrior::new(
            self.components
                .iter()
                .map(|c| GmmComponent {
                    weight: c.weight,
                    mean: f(&c.mean),
                    tau: c.tau,
                })
                .collect(),
        )
    }

    /// Mixture over the orbit `{g(μ_j)}` with each component's weight split
    /// evenly across the supplied maps. Invariant under any group the maps
    /// enumerate.
    pub fn symmetrized(&self, maps: &[&dyn Fn(&[f64]) -> Vec<f64>]) -> Result<GmmPrior> {
        let n = maps.len() as f64;
        let mut comps = Vec::with_capacity(self.components.len() * maps.len());
        for c in &self.components {
            for g in maps {
                comps.push(GmmComponent {
                    weight: c.weight / n,
                    mean: g(&c.mean),
                    tau: c.tau,
                });
            }
        }
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        for c in &mut comps {
            c.weight /= total;
        }
        GmmPrior::new(comps)
    }

    fn check(&self, sigma: f64, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "prior has dimension {}, point has {}",
                self.dim,
                x.len()
            )));
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(())
    }

    /// Per-component log terms `log w_j + log N(x; μ_j, v_j I)` and variances.
    fn log_terms(&self, sigma: f64, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim as f64;
        let mut terms = Vec::with_capacity(self.components.len());
        let mut vars = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let v = c.tau * c.tau + sigma * sigma;
            let dist2: f64 = x.iter().zip(&c.mean).map(|(a, m)| (a - m) * (a - m)).sum();
            let t = if c.weight > 0.0 {
                c.weight.ln() - 0.5 * d * (2.0 * PI * v).ln() - dist2 / (2.0 * v)
            } else {
                f64::NEG_INFINITY
            };
            terms.push(t);
            vars.push(v);
        }
        (terms, vars)
    }

    fn logsumexp(terms: &[f64]) -> f64 {
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    /// `log p_σ(x)`.
    pub fn log_density(&self, sigma: f64, x: &[f64]) -> Result<f64> {
        self.check(sigma, x)?;
        let (terms, _) = self.log_terms(sigma, x);
        Ok(Self::logsumexp(&terms))
    }

    /// Posterior component probabilities `γ_j(x)` under `p_σ`.
    pub fn responsibilities(&self, sigma: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check(sigma, x)?;
        let (terms, _) = self.log_terms(sigma, x);
        let lse = Self::logsumexp(&terms);
        Ok(terms.iter().map(|t| (t - lse).exp()).collect())
    }

    /// `∇ log p_σ(x) = Σ_j γ_j (μ_j − x) / v_j`.
    pub fn score(&self, sigma: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check(sigma, x)?;
        let (terms, vars) = self.log_terms(sigma, x);
        let lse = Self::logsumexp(&terms);
        let mut out = vec![0.0; self.dim];
        for ((c, t), v) in self.components.iter().zip(&terms).zip(&vars) {
            let g = (t - lse).exp();
            if g == 0.0 {
                continue;
            }
            for ((o, m), xi) in out.iter_mut().zip(&c.mean).zip(x) {
                *o += g * (m - xi) / v;
            }
        }
        Ok(out)
    }

    /// MMSE denoiser `E[x₀ | x₀ + σε = x]`, computed as the posterior mean
    /// `Σ_j γ_j (τ_j² x + σ² μ_j) / v_j`. Algebraically equal to
    /// `x + σ² ∇log p_σ(x)`, but evaluated without going through the score.
    pub fn mmse_denoise(&self, sigma: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.check(sigma, x)?;
        if sigma <= 0.0 {
            return Err(Error::InvalidArgument(
                "MMSE denoiser needs sigma > 0".into(),
            ));
        }
        let (terms, vars) = self.log_terms(sigma, x);
        let lse = Self::logsumexp(&terms);
        let s2 = sigma * sigma;
        let mut out = vec![0.0; self.dim];
        for ((c, t), v) in self.components.iter().zip(&terms).zip(&vars) {
            let g = (t - lse).exp();
            if g == 0.0 {
                continue;
            }
            let t2 = c.tau * c.tau;
            for ((o, m), xi) in out.iter_mut().zip(&c.mean).zip(x) {
                *o += g * (t2 * xi + s2 * m) / v;
            }
        }
        Ok(out)
    }

    /// Draws `n` samples from `p_σ`.
    pub fn sample<R: Rng + ?Sized>(&self, sigma: f64, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = self.components.len() - 1;
                for (j, c) in self.components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                let c = &self.components[pick];
                let sd = (c.tau * c.tau + sigma * sigma).sqrt();
                c.mean
                    .iter()
                    .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_grad(p: &GmmPrior, sigma: f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (p.log_density(sigma, &a).unwrap() - p.log_density(sigma, &b).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn log_density_examples() {
        let p = GmmPrior::single(vec![0.0], 1.0).unwrap();
        let v = p.log_density(0.0, &[0.0]).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((v + 0.9189).abs() < 1e-4);

        // smoothing adds variance
        let tau: f64 = 0.7;
        let sigma: f64 = 0.4;
        let a = GmmPrior::single(vec![0.3, -1.0], tau).unwrap();
        let b = GmmPrior::single(vec![0.3, -1.0], (tau * tau + sigma * sigma).sqrt()).unwrap();
        for x in [[0.0, 0.0], [1.5, -2.0], [-0.3, 4.0]] {
            let lhs = a.log_density(sigma, &x).unwrap();
            let rhs = b.log_density(0.0, &x).unwrap();
            assert!((lhs - rhs).abs() < 1e-13);
        }

        // symmetric pair at the midpoint: both terms equal the single-Gaussian value
        let mu = 1.3;
        let pair = GmmPrior::uniform(vec![vec![mu], vec![-mu]], 1.0).unwrap();
        let expect = -0.5 * (2.0 * PI).ln() - mu * mu / 2.0;
        assert!((pair.log_density(0.0, &[0.0]).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn score_and_denoiser_examples() {
        let p = GmmPrior::single(vec![0.0, 0.0], 1.0).unwrap();
        let s = p.score(1.0, &[2.0, 0.0]).unwrap();
        assert!((s[0] + 1.0).abs() < 1e-15 && s[1].abs() < 1e-15);
        let d = p.mmse_denoise(1.0, &[2.0, 0.0]).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-15 && d[1].abs() < 1e-15);
        assert!(matches!(p.mmse_denoise(0.0, &[2.0, 0.0]), Err(Error::InvalidArgument(_))));
        assert!(p.score(1.0, &[1.0]).is_err());

        // symmetric mixture evaluated at its center of symmetry
        let q = GmmPrior::uniform(vec![vec![1.0, 0.5], vec![-1.0, 0.5]], 0.6).unwrap();
        let s = q.score(0.2, &[0.0, 0.5]).unwrap();
        assert!(s[0].abs() < 1e-15 && s[1].abs() < 1e-15);
    }

    #[test]
    fn mmse_small_sigma_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = GmmPrior::random(&mut rng, 3, 3).unwrap();
        let x = [0.4, -0.2, 1.1];
        for sigma in [1e-1, 1e-2, 1e-3] {
            let d = p.mmse_denoise(sigma, &x).unwrap();
            let s = p.score(sigma, &x).unwrap();
            let gap: f64 = d.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let sn: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(gap <= sigma * sigma * sn * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn mmse_matches_quadrature_posterior_mean() {
        // 1-D two-component prior; posterior mean by composite Simpson on a wide grid
        let p = GmmPrior::new(vec![
            GmmComponent { weight: 0.3, mean: vec![-1.0], tau: 0.4 },
            GmmComponent { weight: 0.7, mean: vec![1.5], tau: 0.6 },
        ])
        .unwrap();
        let sigma = 0.5;
        for x in [-2.0, -0.3, 0.4, 2.2] {
            let n = 20000;
            let (lo, hi) = (-10.0, 10.0);
            let h = (hi - lo) / n as f64;
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..=n {
                let t = lo + i as f64 * h;
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                let prior = p.log_density(0.0, &[t]).unwrap().exp();
                let lik = (-(x - t) * (x - t) / (2.0 * sigma * sigma)).exp();
                num += w * t * prior * lik;
                den += w * prior * lik;
            }
            let quad = num / den;
            let d = p.mmse_denoise(sigma, &[x]).unwrap()[0];
            assert!((d - quad).abs() < 1e-6, "x={x}: {d} vs {quad}");
        }
    }

    #[test]
    fn construction_errors() {
        assert!(GmmPrior::new(vec![]).is_err());
        assert!(GmmPrior::single(vec![0.0], 0.0).is_err());
        assert!(GmmPrior::single(vec![f64::NAN], 1.0).is_err());
        assert!(GmmPrior::new(vec![
            GmmComponent { weight: 0.5, mean: vec![0.0], tau: 1.0 },
            GmmComponent { weight: 0.4, mean: vec![1.0], tau: 1.0 },
        ])
        .is_err());
        assert!(GmmPrior::new(vec![
            GmmComponent { weight: 0.5, mean: vec![0.0], tau: 1.0 },
            GmmComponent { weight: 0.5, mean: vec![1.0, 2.0], tau: 1.0 },
        ])
        .is_err());
        let json = r#"{"components":[{"weight":1.0,"mean":[0.0,1.0],"tau":0.5}]}"#;
        let p: GmmPrior = serde_json::from_str(json).unwrap();
        assert_eq!(p.dim(), 2);
        assert_eq!(serde_json::to_string(&p).unwrap(), json);
        assert!(serde_json::from_str::<GmmPrior>(r#"{"components":[{"weight":0.9,"mean":[0.0],"tau":0.5}]}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn tweedie_identity(seed in any::<u64>(), d in 1usize..=8, k in 1usize..=5, si in 0usize..3) {
            let sigma = [0.05, 0.3, 1.0][si];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = GmmPrior::random(&mut rng, d, k).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let den = p.mmse_denoise(sigma, &x).unwrap();
            let score = p.score(sigma, &x).unwrap();
            let lhs: Vec<f64> = x.iter().zip(&den).map(|(a, b)| (a - b) / (sigma * sigma)).collect();
            let err: f64 = lhs.iter().zip(&score).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = score.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            prop_assert!(err / scale < 1e-10, "rel err {}", err / scale);
        }

        #[test]
        fn responsibilities_sum_to_one(seed in any::<u64>(), d in 1usize..=6, k in 1usize..=5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = GmmPrior::random(&mut rng, d, k).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
            let g = p.responsibilities(0.3, &x).unwrap();
            prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn score_matches_finite_differences(seed in any::<u64>(), d in 1usize..=4, k in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = GmmPrior::random(&mut rng, d, k).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.5..2.5)).collect();
            let s = p.score(0.3, &x).unwrap();
            let fd = fd_grad(&p, 0.3, &x, 1e-5);
            for (a, b) in s.iter().zip(&fd) {
                prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
            }
        }
    }
}
