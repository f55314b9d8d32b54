//! The stochastic restoration loop
//!
//! ```text
//! x_{k+1} = x_k − δ_k ∇f(x_k) − δ_k (λ/σ_k²) J_Gᵀ(x_k) (G(x_k) − D_σk(G(x_k))),   G ~ π
//! ```
//!
//! with step and noise-level schedules, and a trace of the quantities the
//! convergence results are stated in. When the denoiser carries an exact
//! prior, each logged iterate also gets the true gradient norm
//! `‖∇f + λ s_σ^π‖` and the noise term `ξ_k = direction − λ s_σ^π(x_k)`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoise, Denoiser, DenoiserSpec};
use crate::equivariant::{
    equivariant_score_estimate, oracle_regularizer, oracle_score, single_sample_direction, EquivariantConfig,
};
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, ForwardModelSpec, POSITIVITY_FLOOR};
use crate::imaging::{load_image, Image};
use crate::prior::GmmPrior;
use crate::transform::TransformSpec;

/// Salt mixed into the seed of the diagnostics stream so that turning oracle
/// diagnostics on or off never changes the trajectory.
const DIAGNOSTICS_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    Constant { delta0: f64 },
    /// `δ_k = δ₀ / (k+1)^α`
    Polynomial { delta0: f64, alpha: f64 },
}

impl StepSchedule {
    pub fn step_size(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant { delta0 } => delta0,
            StepSchedule::Polynomial { delta0, alpha } => delta0 / ((k + 1) as f64).powf(alpha),
        }
    }

    /// `Σ δ_k = ∞` and `Σ δ_k² < ∞`.
    pub fn is_square_summable(&self) -> bool {
        matches!(*self, StepSchedule::Polynomial { alpha, .. } if alpha > 0.5 && alpha <= 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, a) = match *self {
            StepSchedule::Constant { delta0 } => (delta0, 0.0),
            StepSchedule::Polynomial { delta0, alpha } => (delta0, alpha),
        };
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::Config(format!("delta0 must be > 0, got {d}")));
        }
        if !a.is_finite() {
            return Err(Error::Config(format!("alpha must be finite, got {a}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaSchedule {
    Constant {
        sigma: f64,
    },
    /// Log-linear from `sigma0` to `sigma_final` over the first
    /// `anneal_fraction · N` iterations, then held.
    Annealed {
        sigma0: f64,
        sigma_final: f64,
        anneal_fraction: f64,
    },
}

impl SigmaSchedule {
    pub fn sigma_at(&self, k: usize, iterations: usize) -> f64 {
        match *self {
            SigmaSchedule::Constant { sigma } => sigma,
            SigmaSchedule::Annealed {
                sigma0,
                sigma_final,
                anneal_fraction,
            } => {
                let m = (anneal_fraction * iterations as f64).round() as usize;
                if m <= 1 || k + 1 >= m {
                    return sigma_final;
                }
                let t = k as f64 / (m - 1) as f64;
                sigma0 * (sigma_final / sigma0).powf(t)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SigmaSchedule::Constant { sigma } => {
                if !(sigma.is_finite() && sigma > 0.0) {
                    return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
                }
            }
            SigmaSchedule::Annealed {
                sigma0,
                sigma_final,
                anneal_fraction,
            } => {
                if !(sigma_final.is_finite() && sigma_final > 0.0 && sigma0.is_finite() && sigma_final <= sigma0) {
                    return Err(Error::Config(format!(
                        "annealing needs 0 < sigma_final <= sigma0, got {sigma_final} and {sigma0}"
                    )));
                }
                if !(0.0..=1.0).contains(&anneal_fraction) {
                    return Err(Error::Config(format!("anneal_fraction must be in [0, 1], got {anneal_fraction}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitPolicy {
    /// `Aᵀy` for deblurring and super-resolution, `y` otherwise.
    #[default]
    Auto,
    Observation,
    Adjoint,
    Constant {
        value: f64,
    },
    Explicit {
        path: PathBuf,
    },
}

fn default_identity() -> TransformSpec {
    TransformSpec::Identity
}
fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_oracle_mc() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EredRunConfig {
    pub lambda: f64,
    pub step: StepSchedule,
    pub sigma: SigmaSchedule,
    pub iterations: usize,
    #[serde(default = "default_identity")]
    pub transform: TransformSpec,
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub seed: u64,
    /// RNG stream index; independent jobs sharing a seed use distinct streams.
    #[serde(default)]
    pub stream: u64,
    #[serde(default)]
    pub init: InitPolicy,
    #[serde(default = "default_one")]
    pub trace_stride: usize,
    #[serde(default)]
    pub positivity_floor: bool,
    /// Transforms per iteration. 1 is the single-sample scheme; larger values
    /// (or `enumerate_finite`) average the direction and are flagged in the
    /// trace.
    #[serde(default = "default_one")]
    pub n_mc: usize,
    #[serde(default)]
    pub enumerate_finite: bool,
    /// Keep a copy of `x_k` every this many iterations.
    #[serde(default)]
    pub snapshot_stride: Option<usize>,
    /// Compute oracle diagnostics when the denoiser has an exact prior.
    #[serde(default = "default_true")]
    pub diagnostics: bool,
    /// Monte-Carlo size for oracle expectations without a closed form.
    #[serde(default = "default_oracle_mc")]
    pub oracle_mc: usize,
}

impl EredRunConfig {
    pub fn new(lambda: f64, step: StepSchedule, sigma: SigmaSchedule, iterations: usize, denoiser: DenoiserSpec) -> Self {
        EredRunConfig {
            lambda,
            step,
            sigma,
            iterations,
            transform: TransformSpec::Identity,
            denoiser,
            seed: 0,
            stream: 0,
            init: InitPolicy::Auto,
            trace_stride: 1,
            positivity_floor: false,
            n_mc: 1,
            enumerate_finite: false,
            snapshot_stride: None,
            diagnostics: true,
            oracle_mc: default_oracle_mc(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        self.step.validate()?;
        self.sigma.validate()?;
        self.transform.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.trace_stride == 0 || self.n_mc == 0 || self.snapshot_stride == Some(0) {
            return Err(Error::Config("trace_stride, n_mc and snapshot_stride must be >= 1".into()));
        }
        Ok(())
    }

    fn averaged(&self) -> bool {
        self.n_mc > 1 || (self.enumerate_finite && self.transform.small_enumeration().is_some())
    }

    pub fn equivariant(&self, sigma: f64) -> EquivariantConfig {
        EquivariantConfig {
            transform: self.transform.clone(),
            n_mc: self.n_mc,
            enumerate_finite: self.enumerate_finite,
            sigma,
            lambda: self.lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub k: usize,
    pub sigma_k: f64,
    pub delta_k: f64,
    pub fidelity: f64,
    /// `f + λ r_σ^π` with the oracle regularizer.
    pub objective: Option<f64>,
    pub grad_norm: Option<f64>,
    pub direction_norm: f64,
    pub xi_sq: Option<f64>,
    /// Norm of the running mean of `ξ` over logged iterations.
    pub xi_mean_norm: Option<f64>,
    /// Running mean of `‖ξ‖²` over logged iterations.
    pub xi_second_moment: Option<f64>,
    pub x_norm: f64,
    pub transform: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub seed: u64,
    pub stream: u64,
    pub iterations: usize,
    pub completed: usize,
    /// Whether the step schedule satisfies `Σδ = ∞, Σδ² < ∞`.
    pub square_summable_steps: bool,
    pub averaged_direction: bool,
    pub n_mc: usize,
    pub max_norm: f64,
    pub final_fidelity: Option<f64>,
    pub final_grad_norm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    pub entries: Vec<TraceEntry>,
    pub snapshots: Vec<(usize, Image)>,
    pub final_image: Image,
    pub meta: TraceMeta,
    pub wall_time_s: f64,
}

fn opt_bits(v: Option<f64>) -> Option<u64> {
    v.map(f64::to_bits)
}

impl RunTrace {
    /// Equality of everything except wall time, comparing floats by bits.
    pub fn bit_identical(&self, other: &RunTrace) -> bool {
        let entry_eq = |a: &TraceEntry, b: &TraceEntry| {
            a.k == b.k
                && a.sigma_k.to_bits() == b.sigma_k.to_bits()
                && a.delta_k.to_bits() == b.delta_k.to_bits()
                && a.fidelity.to_bits() == b.fidelity.to_bits()
                && opt_bits(a.objective) == opt_bits(b.objective)
                && opt_bits(a.grad_norm) == opt_bits(b.grad_norm)
                && a.direction_norm.to_bits() == b.direction_norm.to_bits()
                && opt_bits(a.xi_sq) == opt_bits(b.xi_sq)
                && opt_bits(a.xi_mean_norm) == opt_bits(b.xi_mean_norm)
                && opt_bits(a.xi_second_moment) == opt_bits(b.xi_second_moment)
                && a.x_norm.to_bits() == b.x_norm.to_bits()
                && a.transform == b.transform
        };
        let img_eq = |a: &Image, b: &Image| {
            a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        };
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| entry_eq(a, b))
            && self.snapshots.len() == other.snapshots.len()
            && self
                .snapshots
                .iter()
                .zip(&other.snapshots)
                .all(|(a, b)| a.0 == b.0 && img_eq(&a.1, &b.1))
            && img_eq(&self.final_image, &other.final_image)
            && self.meta == other.meta
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let csv_err = |e: csv::Error| Error::Parse(format!("{}: {e}", path.display()));
        w.write_record([
            "k",
            "f",
            "objective",
            "grad_norm",
            "direction_norm",
            "xi_sq",
            "xi_mean_norm",
            "xi_second_moment",
            "sigma_k",
            "delta_k",
            "x_norm",
            "transform",
        ])
        .map_err(csv_err)?;
        for e in &self.entries {
            w.write_record([
                e.k.to_string(),
                format!("{:e}", e.fidelity),
                opt(e.objective),
                opt(e.grad_norm),
                format!("{:e}", e.direction_norm),
                opt(e.xi_sq),
                opt(e.xi_mean_norm),
                opt(e.xi_second_moment),
                format!("{:e}", e.sigma_k),
                format!("{:e}", e.delta_k),
                format!("{:e}", e.x_norm),
                e.transform.clone(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `‖∇f(x) + λ s_σ^π(x)‖` with the exact equivariant score of `prior`.
pub fn grad_norm_oracle(
    prior: &GmmPrior,
    cfg: &EquivariantConfig,
    model: &ForwardModel,
    y: &Image,
    x: &Image,
    n_mc: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let s = oracle_score(prior, &cfg.transform, cfg.sigma, x, n_mc, rng)?;
    let mut g = model.fidelity_grad(x, y)?;
    g.axpy(cfg.lambda, &Image::from_raw(x.shape(), s.value));
    Ok(g.norm())
}

fn initial_point(cfg: &EredRunConfig, model: &ForwardModel, y: &Image) -> Result<Image> {
    let obs = || {
        if y.shape() != model.signal_shape() {
            return Err(Error::Config(format!(
                "observation init needs a {} observation, got {}",
                model.signal_shape(),
                y.shape()
            )));
        }
        Ok(y.clone())
    };
    let x0 = match &cfg.init {
        InitPolicy::Auto => match model.spec() {
            ForwardModelSpec::Deblur { .. } | ForwardModelSpec::SuperResolution { .. } => model.adjoint(y)?,
            _ => obs()?,
        },
        InitPolicy::Observation => obs()?,
        InitPolicy::Adjoint => model.adjoint(y)?,
        InitPolicy::Constant { value } => {
            if !value.is_finite() {
                return Err(Error::Config("constant init must be finite".into()));
            }
            Image::filled(model.signal_shape(), *value)
        }
        InitPolicy::Explicit { path } => load_image(path)?,
    };
    if x0.shape() != model.signal_shape() {
        return Err(Error::Shape(format!(
            "initial point is {}, model expects {}",
            x0.shape(),
            model.signal_shape()
        )));
    }
    Ok(x0)
}

/// Smallest representable value strictly above the positivity floor, so a
/// clamped iterate is still inside the fidelity's domain.
fn floor_value() -> f64 {
    f64::from_bits(POSITIVITY_FLOOR.to_bits() + 1)
}

fn apply_floor(x: &mut Image) {
    let lo = floor_value();
    x.data_mut().iter_mut().for_each(|v| {
        if *v < lo {
            *v = lo;
        }
    });
}

/// Runs the loop with the denoiser described by `cfg.denoiser`.
pub fn ered_run(cfg: &EredRunConfig, model: &ForwardModel, y: &Image) -> Result<RunTrace> {
    let denoiser = Denoiser::from_spec(&cfg.denoiser)?;
    ered_run_with(cfg, &denoiser, model, y, None)
}

/// Plain RED: the same loop with the transform forced to the identity.
pub fn red_run(cfg: &EredRunConfig, model: &ForwardModel, y: &Image) -> Result<RunTrace> {
    let cfg = EredRunConfig {
        transform: TransformSpec::Identity,
        ..cfg.clone()
    };
    ered_run(&cfg, model, y)
}

struct XiStats {
    sum: Vec<f64>,
    sum_sq: f64,
    count: usize,
}

/// Runs the loop with a caller-supplied denoiser and optional explicit
/// starting point (overriding `cfg.init`).
pub fn ered_run_with(
    cfg: &EredRunConfig,
    denoiser: &dyn Denoise,
    model: &ForwardModel,
    y: &Image,
    x0: Option<Image>,
) -> Result<RunTrace> {
    let started = Instant::now();
    cfg.validate()?;
    if model.is_despeckle() && !cfg.positivity_floor {
        return Err(Error::Config("despeckling needs positivity_floor = true".into()));
    }
    if y.shape() != model.observation_shape() {
        return Err(Error::Shape(format!(
            "observation is {}, model expects {}",
            y.shape(),
            model.observation_shape()
        )));
    }
    let mut x = match x0 {
        Some(x) => {
            if x.shape() != model.signal_shape() {
                return Err(Error::Shape(format!("initial point is {}, model expects {}", x.shape(), model.signal_shape())));
            }
            x
        }
        None => initial_point(cfg, model, y)?,
    };
    cfg.transform.check_shape(x.shape())?;
    if cfg.positivity_floor {
        apply_floor(&mut x);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stream);
    let mut diag_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DIAGNOSTICS_SALT);
    diag_rng.set_stream(cfg.stream);
    let oracle = if cfg.diagnostics { denoiser.oracle_prior() } else { None };
    if let Some(p) = oracle {
        if p.dim() != x.len() {
            return Err(Error::Shape(format!("prior has dimension {}, image has {} values", p.dim(), x.len())));
        }
    }
    let averaged = cfg.averaged();
    let n = cfg.iterations;

    let mut entries = Vec::with_capacity(n / cfg.trace_stride + 1);
    let mut snapshots = Vec::new();
    let mut max_norm = x.norm();
    let mut xi = XiStats {
        sum: vec![0.0; x.len()],
        sum_sq: 0.0,
        count: 0,
    };
    let mut last_sigma = cfg.sigma.sigma_at(0, n);

    let mut meta = TraceMeta {
        seed: cfg.seed,
        stream: cfg.stream,
        iterations: n,
        completed: 0,
        square_summable_steps: cfg.step.is_square_summable(),
        averaged_direction: averaged,
        n_mc: cfg.n_mc,
        max_norm,
        final_fidelity: None,
        final_grad_norm: None,
    };

    for k in 0..n {
        let sigma = cfg.sigma.sigma_at(k, n);
        last_sigma = sigma;
        let delta = cfg.step.step_size(k);
        let ecfg = cfg.equivariant(sigma);
        if let Some(every) = cfg.snapshot_stride {
            if k % every == 0 {
                snapshots.push((k, x.clone()));
            }
        }

        let grad_f = model.fidelity_grad(&x, y)?;
        let (direction, label) = if averaged {
            let s = equivariant_score_estimate(denoiser, &ecfg, &x, &mut rng)?;
            (s.scale(cfg.lambda), format!("avg:{}", cfg.n_mc))
        } else {
            let (d, g) = single_sample_direction(denoiser, &ecfg, &x, &mut rng)?;
            (d, g.label())
        };

        if !(grad_f.norm().is_finite() && direction.norm().is_finite() && x.norm().is_finite()) {
            meta.max_norm = max_norm;
            let reason = format!(
                "non-finite update (|grad f| = {:e}, |direction| = {:e})",
                grad_f.norm(),
                direction.norm()
            );
            return Err(diverged(k, reason, entries, snapshots, &x, meta, started));
        }

        let logged = k % cfg.trace_stride == 0 || k + 1 == n;
        if logged {
            let mut entry = TraceEntry {
                k,
                sigma_k: sigma,
                delta_k: delta,
                fidelity: model.fidelity(&x, y)?,
                objective: None,
                grad_norm: None,
                direction_norm: direction.norm(),
                xi_sq: None,
                xi_mean_norm: None,
                xi_second_moment: None,
                x_norm: x.norm(),
                transform: label,
            };
            if let Some(prior) = oracle {
                let s = oracle_score(prior, &cfg.transform, sigma, &x, cfg.oracle_mc, &mut diag_rng)?;
                let s = Image::from_raw(x.shape(), s.value);
                let mut g = grad_f.clone();
                g.axpy(cfg.lambda, &s);
                entry.grad_norm = Some(g.norm());
                let r = oracle_regularizer(prior, &cfg.transform, sigma, &x, cfg.oracle_mc, &mut diag_rng)?;
                entry.objective = Some(entry.fidelity + cfg.lambda * r.value[0]);

                let mut noise = direction.clone();
                noise.axpy(-cfg.lambda, &s);
                let sq = noise.norm_sq();
                xi.count += 1;
                xi.sum_sq += sq;
                xi.sum.iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
                let c = xi.count as f64;
                entry.xi_sq = Some(sq);
                entry.xi_second_moment = Some(xi.sum_sq / c);
                entry.xi_mean_norm = Some(xi.sum.iter().map(|v| (v / c) * (v / c)).sum::<f64>().sqrt());
            }
            entries.push(entry);
        }

        let grad_f_norm = grad_f.norm();
        let mut step = grad_f;
        step.axpy(1.0, &direction);
        x.axpy(-delta, &step);
        if cfg.positivity_floor {
            apply_floor(&mut x);
        }
        meta.completed = k + 1;
        if let Some(index) = x.data().iter().position(|v| !v.is_finite()) {
            meta.max_norm = max_norm;
            let reason = format!(
                "non-finite iterate at index {index} (|grad f| = {grad_f_norm:e}, |direction| = {:e})",
                direction.norm()
            );
            return Err(diverged(k, reason, entries, snapshots, &x, meta, started));
        }
        max_norm = max_norm.max(x.norm());
    }

    meta.max_norm = max_norm;
    meta.final_fidelity = model.fidelity(&x, y).ok();
    if let Some(prior) = oracle {
        let ecfg = cfg.equivariant(last_sigma);
        meta.final_grad_norm = Some(grad_norm_oracle(prior, &ecfg, model, y, &x, cfg.oracle_mc, &mut diag_rng)?);
    }
    Ok(RunTrace {
        entries,
        snapshots,
        final_image: x,
        meta,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

fn diverged(
    iteration: usize,
    reason: String,
    entries: Vec<TraceEntry>,
    snapshots: Vec<(usize, Image)>,
    x: &Image,
    meta: TraceMeta,
    started: Instant,
) -> Error {
    let final_image = Image::from_raw(
        x.shape(),
        x.data().iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect(),
    );
    let trace = RunTrace {
        entries,
        snapshots,
        final_image,
        meta,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Error::Divergence {
        iteration,
        reason,
        trace: Box::new(trace),
    }
}
