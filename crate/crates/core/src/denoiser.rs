//! Denoisers `D_σ`: the exact GMM oracle, a perturbed oracle with a known
//! sup-norm error, a linear shrink with a known Lipschitz constant, a sliding
//! DCT hard-threshold denoiser, and an external process speaking EDNZ.

use std::io::{BufReader, BufWriter};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ednz::{self, Frame};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::prior::GmmPrior;

pub trait Denoise: Send + Sync {
    fn denoise(&self, x: &Image, sigma: f64) -> Result<Image>;

    /// The exact prior behind this denoiser, when there is one. Used for
    /// oracle diagnostics (true gradient norm, noise statistics).
    fn oracle_prior(&self) -> Option<&GmmPrior> {
        None
    }
}

fn default_seed() -> u64 {
    0
}
fn default_block() -> usize {
    8
}
fn default_threshold() -> f64 {
    3.0
}
fn default_timeout() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserSpec {
    GmmOracle {
        prior: GmmPrior,
    },
    PerturbedOracle {
        prior: GmmPrior,
        eps: f64,
        #[serde(default = "default_seed")]
        seed: u64,
    },
    LinearShrink {
        c: f64,
    },
    DctThreshold {
        #[serde(default = "default_block")]
        block: usize,
        /// Threshold in units of σ.
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
    },
}

/// A constructed denoiser. External children are spawned at construction and
/// killed on drop.
pub enum Denoiser {
    GmmOracle(GmmOracle),
    Perturbed(PerturbedOracle),
    LinearShrink(LinearShrink),
    Dct(DctThreshold),
    External(ExternalDenoiser),
}

impl Denoiser {
    pub fn from_spec(spec: &DenoiserSpec) -> Result<Denoiser> {
        Ok(match spec {
            DenoiserSpec::GmmOracle { prior } => Denoiser::GmmOracle(GmmOracle::new(prior.clone())),
            DenoiserSpec::PerturbedOracle { prior, eps, seed } => {
                Denoiser::Perturbed(PerturbedOracle::new(prior.clone(), *eps, *seed)?)
            }
            DenoiserSpec::LinearShrink { c } => Denoiser::LinearShrink(LinearShrink::new(*c)?),
            DenoiserSpec::DctThreshold { block, threshold } => {
                Denoiser::Dct(DctThreshold::new(*block, *threshold)?)
            }
            DenoiserSpec::External { command, timeout_s } => {
                Denoiser::External(ExternalDenoiser::spawn(command, *timeout_s)?)
            }
        })
    }

    fn inner(&self) -> &dyn Denoise {
        match self {
            Denoiser::GmmOracle(d) => d,
            Denoiser::Perturbed(d) => d,
            Denoiser::LinearShrink(d) => d,
            Denoiser::Dct(d) => d,
            Denoiser::External(d) => d,
        }
    }
}

impl Denoise for Denoiser {
    fn denoise(&self, x: &Image, sigma: f64) -> Result<Image> {
        self.inner().denoise(x, sigma)
    }
    fn oracle_prior(&self) -> Option<&GmmPrior> {
        self.inner().oracle_prior()
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    Ok(())
}

pub struct GmmOracle {
    prior: GmmPrior,
}

impl GmmOracle {
    pub fn new(prior: GmmPrior) -> Self {
        GmmOracle { prior }
    }
}

impl Denoise for GmmOracle {
    fn denoise(&self, x: &Image, sigma: f64) -> Result<Image> {
        let d = self.prior.mmse_denoise(sigma, x.data())?;
        Image::from_shape(x.shape(), d)
    }
    fn oracle_prior(&self) -> Option<&GmmPrior> {
        Some(&self.prior)
    }
}

/// `D*_σ(x) + eps · u(x)` with `u_i(x) = sin(⟨a_i, x⟩ + b_i)`. The field is
/// fixed by `seed`, smooth, and has sup-norm 1, so the denoiser error is
/// exactly `eps` in sup-norm.
pub struct PerturbedOracle {
    prior: GmmPrior,
    eps: f64,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl PerturbedOracle {
    pub fn new(prior: GmmPrior, eps: f64, seed: u64) -> Result<Self> {
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::Config(format!("eps must be >= 0, got {eps}")));
        }
        let d = prior.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let a = (0..d)
            .map(|_| (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let b = (0..d).map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)).collect();
        Ok(PerturbedOracle { prior, eps, a, b })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn field(&self, x: &[f64]) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(ai, bi)| (ai.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() + bi).sin())
            .collect()
    }
}

impl Denoise for PerturbedOracle {
    fn denoise(&self, x: &Image, sigma: f64) -> Result<Image> {
        let mut d = self.prior.mmse_denoise(sigma, x.data())?;
        if self.eps > 0.0 {
            for (v, u) in d.iter_mut().zip(self.field(x.data())) {
                *v += self.eps * u;
            }
        }
        Image::from_shape(x.shape(), d)
    }
    fn oracle_prior(&self) -> Option<&GmmPrior> {
        Some(&self.prior)
    }
}

/// `x ↦ c·x`, Lipschitz with constant exactly `c`.
pub struct LinearShrink {
    c: f64,
}

impl LinearShrink {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::Config(format!("shrink factor must be in (0, 1], got {c}")));
        }
        Ok(LinearShrink { c })
    }

    pub fn factor(&self) -> f64 {
        self.c
    }
}

impl Denoise for LinearShrink {
    fn denoise(&self, x: &Image, _sigma: f64) -> Result<Image> {
        Ok(x.scale(self.c))
    }
}

/// Sliding-window DCT hard thresholding: every `block × block` window (stride
/// 1, fully inside the image) is transformed with the orthonormal DCT-II,
/// non-DC coefficients below `threshold · σ` are zeroed, and the inverse
/// transforms are averaged per pixel with uniform weights.
pub struct DctThreshold {
    block: usize,
    threshold: f64,
    basis: Vec<f64>,
}

impl DctThreshold {
    pub fn new(block: usize, threshold: f64) -> Result<Self> {
        if block < 2 {
            return Err(Error::Config(format!("DCT block must be >= 2, got {block}")));
        }
        if !(threshold.is_finite() && threshold >= 0.0) {
            return Err(Error::Config(format!("DCT threshold must be >= 0, got {threshold}")));
        }
        let n = block;
        let mut basis = vec![0.0; n * n];
        for k in 0..n {
            let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for i in 0..n {
                basis[k * n + i] =
                    s * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
            }
        }
        Ok(DctThreshold {
            block,
            threshold,
            basis,
        })
    }

    fn denoise_plane(&self, plane: &[f64], h: usize, w: usize, cut: f64) -> Vec<f64> {
        let n = self.block;
        let m = &self.basis;
        let mut acc = vec![0.0; h * w];
        let mut count = vec![0u32; h * w];
        let mut patch = vec![0.0; n * n];
        let mut tmp = vec![0.0; n * n];
        for r0 in 0..=h - n {
            for c0 in 0..=w - n {
                for i in 0..n {
                    patch[i * n..(i + 1) * n].copy_from_slice(&plane[(r0 + i) * w + c0..(r0 + i) * w + c0 + n]);
                }
                // coefficients C = M P Mᵀ
                for k in 0..n {
                    for j in 0..n {
                        tmp[k * n + j] = (0..n).map(|i| m[k * n + i] * patch[i * n + j]).sum();
                    }
                }
                for k in 0..n {
                    for l in 0..n {
                        patch[k * n + l] = (0..n).map(|j| tmp[k * n + j] * m[l * n + j]).sum();
                    }
                }
                // index 0 is DC and always kept
                for c in patch.iter_mut().skip(1) {
                    if c.abs() < cut {
                        *c = 0.0;
                    }
                }
                // inverse P = Mᵀ C M
                for i in 0..n {
                    for l in 0..n {
                        tmp[i * n + l] = (0..n).map(|k| m[k * n + i] * patch[k * n + l]).sum();
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let v: f64 = (0..n).map(|l| tmp[i * n + l] * m[l * n + j]).sum();
                        let o = (r0 + i) * w + c0 + j;
                        acc[o] += v;
                        count[o] += 1;
                    }
                }
            }
        }
        acc.iter().zip(&count).map(|(a, &c)| a / f64::from(c)).collect()
    }
}

impl Denoise for DctThreshold {
    fn denoise(&self, x: &Image, sigma: f64) -> Result<Image> {
        check_sigma(sigma)?;
        let (h, w) = (x.height(), x.width());
        if h < self.block || w < self.block {
            return Err(Error::Shape(format!(
                "DCT denoiser needs at least {0}x{0} pixels, got {h}x{w}",
                self.block
            )));
        }
        let cut = self.threshold * sigma;
        let planes: Vec<Vec<f64>> = (0..x.channels())
            .map(|ch| self.denoise_plane(&x.plane(ch), h, w, cut))
            .collect();
        Ok(Image::from_planes(h, w, &planes))
    }
}

struct ChildIo {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    responses: Receiver<Result<Frame>>,
}

/// A child process that reads EDNZ request frames on stdin and answers each
/// with one EDNZ frame on stdout. Requests are serialized through a mutex.
pub struct ExternalDenoiser {
    io: Mutex<ChildIo>,
    timeout: Duration,
    command: Vec<String>,
}

impl ExternalDenoiser {
    pub fn spawn(command: &[String], timeout_s: f64) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("external denoiser command is empty".into()))?;
        if !(timeout_s.is_finite() && timeout_s > 0.0) {
            return Err(Error::Config(format!("timeout must be > 0, got {timeout_s}")));
        }
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let frame = ednz::read_frame(&mut reader);
                let failed = frame.is_err();
                if tx.send(frame).is_err() || failed {
                    break;
                }
            }
        });
        Ok(ExternalDenoiser {
            io: Mutex::new(ChildIo {
                child,
                stdin,
                responses: rx,
            }),
            timeout: Duration::from_secs_f64(timeout_s),
            command: command.to_vec(),
        })
    }
}

impl Denoise for ExternalDenoiser {
    fn denoise(&self, x: &Image, sigma: f64) -> Result<Image> {
        let mut io = self
            .io
            .lock()
            .map_err(|_| Error::Protocol("external denoiser state poisoned".into()))?;
        let request = Frame::from_image(x, sigma);
        ednz::write_frame(&mut io.stdin, &request)?;
        let response = match io.responses.recv_timeout(self.timeout) {
            Ok(r) => r?,
            Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout(self.timeout.as_secs_f64())),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Protocol(format!("{:?} closed its output", self.command)))
            }
        };
        if response.shape != request.shape {
            return Err(Error::Protocol(format!(
                "response frame has dims {} (sigma {}), request had {}",
                response.shape, response.sigma, request.shape
            )));
        }
        response.to_image()
    }
}

impl Drop for ExternalDenoiser {
    fn drop(&mut self) {
        if let Ok(io) = self.io.get_mut() {
            let _ = io.child.kill();
            let _ = io.child.wait();
        }
    }
}
