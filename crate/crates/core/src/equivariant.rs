//! Equivariant denoiser `D̃_σ(x) = E_π[J_Gᵀ(x) D_σ(G x)]`, the matching
//! score estimate, the single-sample direction of the stochastic loop, and
//! oracle (exact-prior) versions of the regularizer and its gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoise;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::prior::GmmPrior;
use crate::quadrature::for_each_tensor_node;
use crate::transform::{TransformInstance, TransformSpec};

/// Gauss–Hermite order per dimension for noising-group oracle expectations.
pub const HERMITE_NODES: usize = 32;
/// Largest dimension for which the tensor Gauss–Hermite rule is used.
pub const HERMITE_MAX_DIM: usize = 4;

fn default_n_mc() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivariantConfig {
    pub transform: TransformSpec,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default = "default_true")]
    pub enumerate_finite: bool,
    pub sigma: f64,
    pub lambda: f64,
}

impl EquivariantConfig {
    pub fn new(transform: TransformSpec, sigma: f64, lambda: f64) -> Self {
        EquivariantConfig {
            transform,
            n_mc: 1,
            enumerate_finite: true,
            sigma,
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transform.validate()?;
        if self.n_mc == 0 {
            return Err(Error::Config("n_mc must be >= 1".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// The weighted transform set used for one expectation: the whole group
    /// when enumeration applies, otherwise `n_mc` fresh draws.
    pub fn draws<R: Rng + ?Sized>(&self, x: &Image, rng: &mut R) -> Vec<(f64, TransformInstance)> {
        if self.enumerate_finite {
            if let Some(all) = self.transform.small_enumeration() {
                return all;
            }
        }
        let w = 1.0 / self.n_mc as f64;
        (0..self.n_mc)
            .map(|_| (w, self.transform.sample(x.shape(), self.sigma, rng)))
            .collect()
    }
}

/// `D̃_σ(x)`.
pub fn equivariant_denoise<R: Rng + ?Sized>(
    denoiser: &dyn Denoise,
    cfg: &EquivariantConfig,
    x: &Image,
    rng: &mut R,
) -> Result<Image> {
    cfg.validate()?;
    cfg.transform.check_shape(x.shape())?;
    let mut acc = x.zeros_like();
    for (w, g) in cfg.draws(x, rng) {
        let gx = g.apply(x)?;
        let d = denoiser.denoise(&gx, cfg.sigma)?;
        acc.axpy(w, &g.jtvp(x, &d)?);
    }
    Ok(acc)
}

/// `(1/σ²)(E[J_Gᵀ G x] − D̃_σ(x))`, both terms over the same transforms. For
/// pure Gaussian noising the first term is `x` exactly.
pub fn equivariant_score_estimate<R: Rng + ?Sized>(
    denoiser: &dyn Denoise,
    cfg: &EquivariantConfig,
    x: &Image,
    rng: &mut R,
) -> Result<Image> {
    cfg.validate()?;
    cfg.transform.check_shape(x.shape())?;
    let closed_form_mean = matches!(cfg.transform, TransformSpec::GaussianNoising { .. });
    let mut acc = if closed_form_mean { x.clone() } else { x.zeros_like() };
    for (w, g) in cfg.draws(x, rng) {
        let gx = g.apply(x)?;
        let d = denoiser.denoise(&gx, cfg.sigma)?;
        let r = if closed_form_mean { d.scale(-1.0) } else { gx.sub(&d) };
        acc.axpy(w, &g.jtvp(x, &r)?);
    }
    Ok(acc.scale(1.0 / (cfg.sigma * cfg.sigma)))
}

/// One draw `G ~ π` and `(λ/σ²) J_Gᵀ(x)(G x − D_σ(G x))`.
pub fn single_sample_direction<R: Rng + ?Sized>(
    denoiser: &dyn Denoise,
    cfg: &EquivariantConfig,
    x: &Image,
    rng: &mut R,
) -> Result<(Image, TransformInstance)> {
    cfg.validate()?;
    cfg.transform.check_shape(x.shape())?;
    let g = cfg.transform.sample(x.shape(), cfg.sigma, rng);
    let gx = g.apply(x)?;
    let d = denoiser.denoise(&gx, cfg.sigma)?;
    let dir = g.jtvp(x, &gx.sub(&d))?;
    Ok((dir.scale(cfg.lambda / (cfg.sigma * cfg.sigma)), g))
}

/// An oracle expectation and the half-width of its 95% confidence interval
/// in ℓ2 norm (zero when computed by enumeration or quadrature).
#[derive(Debug, Clone)]
pub struct OracleEstimate {
    pub value: Vec<f64>,
    pub ci95: f64,
    pub exact: bool,
}

/// `E_π[h(G)]` for a vector-valued `h`: full enumeration for finite groups,
/// tensor Gauss–Hermite for Gaussian noising in `d ≤ 4`, otherwise `n_mc`
/// Monte-Carlo draws.
pub fn oracle_expectation<R: Rng + ?Sized>(
    spec: &TransformSpec,
    sigma: f64,
    x: &Image,
    n_mc: usize,
    rng: &mut R,
    mut h: impl FnMut(&TransformInstance) -> Result<Vec<f64>>,
) -> Result<OracleEstimate> {
    spec.check_shape(x.shape())?;
    if let Some(all) = spec.enumerate() {
        let mut acc: Vec<f64> = Vec::new();
        for (w, g) in &all {
            let v = h(g)?;
            if acc.is_empty() {
                acc = vec![0.0; v.len()];
            }
            acc.iter_mut().zip(&v).for_each(|(a, b)| *a += w * b);
        }
        return Ok(OracleEstimate {
            value: acc,
            ci95: 0.0,
            exact: true,
        });
    }
    if let TransformSpec::GaussianNoising { sigma: own } = spec {
        if x.len() <= HERMITE_MAX_DIM {
            let scale = own.unwrap_or(sigma);
            let mut acc: Vec<f64> = Vec::new();
            let mut err = None;
            for_each_tensor_node(x.len(), HERMITE_NODES, |z, w| {
                if err.is_some() {
                    return;
                }
                let g = TransformInstance::Noise {
                    sigma: scale,
                    z: Image::from_raw(x.shape(), z.to_vec()),
                };
                match h(&g) {
                    Ok(v) => {
                        if acc.is_empty() {
                            acc = vec![0.0; v.len()];
                        }
                        acc.iter_mut().zip(&v).for_each(|(a, b)| *a += w * b);
                    }
                    Err(e) => err = Some(e),
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            return Ok(OracleEstimate {
                value: acc,
                ci95: 0.0,
                exact: true,
            });
        }
    }
    let n = n_mc.max(2);
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    for i in 0..n {
        let g = spec.sample(x.shape(), sigma, rng);
        let v = h(&g)?;
        if mean.is_empty() {
            mean = vec![0.0; v.len()];
            m2 = vec![0.0; v.len()];
        }
        // Welford update
        let k = (i + 1) as f64;
        for ((m, s), b) in mean.iter_mut().zip(m2.iter_mut()).zip(&v) {
            let delta = b - *m;
            *m += delta / k;
            *s += delta * (b - *m);
        }
    }
    let var_of_mean: f64 = m2.iter().map(|s| s / ((n - 1) as f64 * n as f64)).sum();
    Ok(OracleEstimate {
        value: mean,
        ci95: 1.96 * var_of_mean.sqrt(),
        exact: false,
    })
}

/// Exact equivariant score `s_σ^π(x) = −E_π[J_Gᵀ ∇log p_σ(G x)]`, the
/// gradient of `r_σ^π(x) = −E_π[log p_σ(G x)]`.
pub fn oracle_score<R: Rng + ?Sized>(
    prior: &GmmPrior,
    spec: &TransformSpec,
    sigma: f64,
    x: &Image,
    n_mc: usize,
    rng: &mut R,
) -> Result<OracleEstimate> {
    let mut est = oracle_expectation(spec, sigma, x, n_mc, rng, |g| {
        let gx = g.apply(x)?;
        let s = Image::from_raw(gx.shape(), prior.score(sigma, gx.data())?);
        Ok(g.jtvp(x, &s)?.into_data())
    })?;
    est.value.iter_mut().for_each(|v| *v = -*v);
    Ok(est)
}

/// Oracle regularizer `r_σ^π(x) = −E_π[log p_σ(G x)]`.
pub fn oracle_regularizer<R: Rng + ?Sized>(
    prior: &GmmPrior,
    spec: &TransformSpec,
    sigma: f64,
    x: &Image,
    n_mc: usize,
    rng: &mut R,
) -> Result<OracleEstimate> {
    let mut est = oracle_expectation(spec, sigma, x, n_mc, rng, |g| {
        let gx = g.apply(x)?;
        Ok(vec![prior.log_density(sigma, gx.data())?])
    })?;
    est.value[0] = -est.value[0];
    Ok(est)
}
