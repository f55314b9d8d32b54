//! Degradation operators `A`, observation simulators and data-fidelity terms.
//!
//! All convolutions are circular, so `A` is diagonalized by the 2-D FFT and
//! `Aᵀ` is the correlation with the same kernel (conjugate spectrum).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Shape};

/// Despeckle iterates and fidelity evaluations must stay above this.
pub const POSITIVITY_FLOOR: f64 = 1e-6;

const KERNEL_SUM_TOL: f64 = 1e-12;
const KERNEL_WARN_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    File { path: PathBuf },
    /// Isotropic Gaussian on a `size × size` grid.
    Gaussian { size: usize, std: f64 },
    Box { size: usize },
    Delta,
    /// Linear motion blur: a segment of `length` pixels at `angle_deg`,
    /// rasterized with bilinear splatting on a `size × size` grid.
    Motion { size: usize, length: f64, angle_deg: f64 },
}

impl KernelSpec {
    pub fn build(&self) -> Result<Image> {
        match self {
            KernelSpec::File { path } => load_kernel(path),
            KernelSpec::Gaussian { size, std } => {
                if *size == 0 || !(std.is_finite() && *std > 0.0) {
                    return Err(Error::Config(format!("invalid gaussian kernel size {size} std {std}")));
                }
                let c = (*size as f64 - 1.0) / 2.0;
                let k = Image::from_fn(Shape::new(*size, *size, 1), |r, col, _| {
                    let d2 = (r as f64 - c).powi(2) + (col as f64 - c).powi(2);
                    (-d2 / (2.0 * std * std)).exp()
                })?;
                normalize_kernel(k)
            }
            KernelSpec::Box { size } => {
                if *size == 0 {
                    return Err(Error::Config("box kernel size must be positive".into()));
                }
                normalize_kernel(Image::filled(Shape::new(*size, *size, 1), 1.0))
            }
            KernelSpec::Delta => Ok(Image::filled(Shape::new(1, 1, 1), 1.0)),
            KernelSpec::Motion { size, length, angle_deg } => {
                if *size == 0 || !(length.is_finite() && *length >= 0.0) || !angle_deg.is_finite() {
                    return Err(Error::Config("invalid motion kernel".into()));
                }
                let mut k = Image::zeros(Shape::new(*size, *size, 1));
                let c = (*size as f64 - 1.0) / 2.0;
                let (s, co) = angle_deg.to_radians().sin_cos();
                let steps = (4.0 * length).ceil().max(1.0) as usize;
                for i in 0..=steps {
                    let t = if steps == 0 { 0.0 } else { (i as f64 / steps as f64 - 0.5) * length };
                    let (y, x) = (c - t * s, c + t * co);
                    let (fy, fx) = (y.floor(), x.floor());
                    let (ty, tx) = (y - fy, x - fx);
                    for (dy, wy) in [(0.0, 1.0 - ty), (1.0, ty)] {
                        for (dx, wx) in [(0.0, 1.0 - tx), (1.0, tx)] {
                            let (r, cc) = (fy + dy, fx + dx);
                            if r >= 0.0 && cc >= 0.0 && (r as usize) < *size && (cc as usize) < *size {
                                let o = k.offset(r as usize, cc as usize, 0);
                                k.data_mut()[o] += wy * wx;
                            }
                        }
                    }
                }
                normalize_kernel(k)
            }
        }
    }
}

fn normalize_kernel(k: Image) -> Result<Image> {
    let s: f64 = k.data().iter().sum();
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::Config(format!("kernel sums to {s}")));
    }
    Ok(k.scale(1.0 / s))
}

/// Parses the plain-text kernel format: a `h w` line, then `h` rows of `w`
/// numbers. Kernels whose sum is off from 1 by more than 1e-6 are renormalized
/// with a warning.
pub fn parse_kernel(text: &str) -> Result<Image> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty kernel file".into()))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(Error::Parse(format!("kernel header {header:?} must be \"h w\"")));
    }
    let parse_dim = |s: &str| {
        s.parse::<i64>()
            .map_err(|_| Error::Parse(format!("bad kernel dimension {s:?}")))
    };
    let (h, w) = (parse_dim(dims[0])?, parse_dim(dims[1])?);
    if h <= 0 || w <= 0 {
        return Err(Error::Parse(format!("kernel dimensions must be positive, got {h}x{w}")));
    }
    let (h, w) = (h as usize, w as usize);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("kernel has {r} rows, expected {h}")))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("row {r}: bad value {t:?}"))))
            .collect::<Result<_>>()?;
        if row.len() != w {
            return Err(Error::Parse(format!("row {r} has {} values, expected {w}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("row {r} has a non-finite value")));
        }
        data.extend(row);
    }
    if lines.next().is_some() {
        return Err(Error::Parse(format!("kernel has more than {h} rows")));
    }
    let k = Image::new(h, w, 1, data)?;
    let s: f64 = k.data().iter().sum();
    if (s - 1.0).abs() > KERNEL_WARN_TOL {
        log::warn!("kernel sums to {s}, renormalizing");
    }
    normalize_kernel(k)
}

pub fn load_kernel(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kernel(&text)
}

fn default_looks() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForwardModelSpec {
    /// `f ≡ 0`: the loop runs on the regularizer alone.
    None,
    Denoise {
        sigma_y: f64,
    },
    Deblur {
        kernel: KernelSpec,
        sigma_y: f64,
    },
    SuperResolution {
        kernel: KernelSpec,
        factor: usize,
        sigma_y: f64,
    },
    Despeckle {
        #[serde(default = "default_looks")]
        looks: f64,
    },
}

impl ForwardModelSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ForwardModelSpec::None => "none",
            ForwardModelSpec::Denoise { .. } => "denoise",
            ForwardModelSpec::Deblur { .. } => "deblur",
            ForwardModelSpec::SuperResolution { .. } => "super_resolution",
            ForwardModelSpec::Despeckle { .. } => "despeckle",
        }
    }

    /// Shape of the unknown `x` given an observation shape.
    pub fn signal_shape(&self, observation: Shape) -> Shape {
        match self {
            ForwardModelSpec::SuperResolution { factor, .. } => {
                Shape::new(observation.height * factor, observation.width * factor, observation.channels)
            }
            _ => observation,
        }
    }
}

/// Circular 2-D convolution with a fixed kernel at a fixed image size.
#[derive(Clone)]
pub struct CircularConv {
    height: usize,
    width: usize,
    kernel: Image,
    spectrum: Vec<Complex64>,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CircularConv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CircularConv")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("kernel", &self.kernel.shape())
            .finish()
    }
}

/// Kernel tap `(i, j)` lands at offset `(i − kh/2, j − kw/2)` modulo the image.
fn kernel_offset(i: usize, kh: usize, n: usize) -> usize {
    (i as i64 - (kh / 2) as i64).rem_euclid(n as i64) as usize
}

impl CircularConv {
    pub fn new(kernel: Image, height: usize, width: usize) -> Result<Self> {
        if kernel.channels() != 1 {
            return Err(Error::Shape("kernel must be single-channel".into()));
        }
        if kernel.height() > height || kernel.width() > width {
            return Err(Error::Shape(format!(
                "kernel {}x{} larger than image {height}x{width}",
                kernel.height(),
                kernel.width()
            )));
        }
        let mut planner = FftPlanner::new();
        let row_fwd = planner.plan_fft_forward(width);
        let row_inv = planner.plan_fft_inverse(width);
        let col_fwd = planner.plan_fft_forward(height);
        let col_inv = planner.plan_fft_inverse(height);
        let mut padded = vec![Complex64::new(0.0, 0.0); height * width];
        for i in 0..kernel.height() {
            for j in 0..kernel.width() {
                let r = kernel_offset(i, kernel.height(), height);
                let c = kernel_offset(j, kernel.width(), width);
                padded[r * width + c].re += kernel.get(i, j, 0);
            }
        }
        let mut conv = CircularConv {
            height,
            width,
            kernel,
            spectrum: Vec::new(),
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
        };
        conv.fft2(&mut padded, false);
        conv.spectrum = padded;
        Ok(conv)
    }

    pub fn kernel(&self) -> &Image {
        &self.kernel
    }

    fn fft2(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for r in 0..h {
            row.process(&mut buf[r * w..(r + 1) * w]);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = buf[r * w + c];
            }
            col.process(&mut column);
            for r in 0..h {
                buf[r * w + c] = column[r];
            }
        }
        if inverse {
            let s = 1.0 / (h * w) as f64;
            buf.iter_mut().for_each(|v| *v *= s);
        }
    }

    fn filter(&self, x: &Image, adjoint: bool) -> Result<Image> {
        if x.height() != self.height || x.width() != self.width {
            return Err(Error::Shape(format!(
                "operator built for {}x{}, got {}",
                self.height,
                self.width,
                x.shape()
            )));
        }
        let planes: Vec<Vec<f64>> = (0..x.channels())
            .map(|ch| {
                let mut buf: Vec<Complex64> = x.plane(ch).iter().map(|&v| Complex64::new(v, 0.0)).collect();
                self.fft2(&mut buf, false);
                for (b, k) in buf.iter_mut().zip(&self.spectrum) {
                    *b *= if adjoint { k.conj() } else { *k };
                }
                self.fft2(&mut buf, true);
                buf.iter().map(|v| v.re).collect()
            })
            .collect();
        Ok(Image::from_planes(self.height, self.width, &planes))
    }

    pub fn apply(&self, x: &Image) -> Result<Image> {
        self.filter(x, false)
    }

    /// Correlation with the kernel, the exact adjoint of [`apply`](Self::apply).
    pub fn adjoint(&self, x: &Image) -> Result<Image> {
        self.filter(x, true)
    }
}

/// Spatial-domain circular convolution, `O(HW·kh·kw)`. Reference for the FFT
/// path.
pub fn circular_convolve_direct(x: &Image, kernel: &Image) -> Image {
    let (h, w, ch) = (x.height(), x.width(), x.channels());
    let (kh, kw) = (kernel.height(), kernel.width());
    let mut out = x.zeros_like();
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut s = 0.0;
                for i in 0..kh {
                    for j in 0..kw {
                        let sr = (r as i64 - i as i64 + (kh / 2) as i64).rem_euclid(h as i64) as usize;
                        let sc = (c as i64 - j as i64 + (kw / 2) as i64).rem_euclid(w as i64) as usize;
                        s += kernel.get(i, j, 0) * x.get(sr, sc, k);
                    }
                }
                out.set(r, c, k, s);
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
enum Operator {
    Identity,
    Blur(CircularConv),
    BlurDecimate(CircularConv, usize),
}

/// A forward model instantiated for one signal shape.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    spec: ForwardModelSpec,
    signal: Shape,
    op: Operator,
}

impl ForwardModel {
    /// Builds the model for unknowns of shape `signal`.
    pub fn new(spec: &ForwardModelSpec, signal: Shape) -> Result<Self> {
        let check_sigma = |s: f64| {
            if !(s.is_finite() && s >= 0.0) {
                Err(Error::Config(format!("sigma_y must be >= 0, got {s}")))
            } else {
                Ok(())
            }
        };
        let op = match spec {
            ForwardModelSpec::None => Operator::Identity,
            ForwardModelSpec::Denoise { sigma_y } => {
                check_sigma(*sigma_y)?;
                Operator::Identity
            }
            ForwardModelSpec::Deblur { kernel, sigma_y } => {
                check_sigma(*sigma_y)?;
                let k = kernel.build()?;
                check_kernel_sum(&k)?;
                Operator::Blur(CircularConv::new(k, signal.height, signal.width)?)
            }
            ForwardModelSpec::SuperResolution { kernel, factor, sigma_y } => {
                check_sigma(*sigma_y)?;
                if *factor == 0 {
                    return Err(Error::Config("super-resolution factor must be >= 1".into()));
                }
                if signal.height % factor != 0 || signal.width % factor != 0 {
                    return Err(Error::Shape(format!(
                        "factor {factor} does not divide image {signal}"
                    )));
                }
                let k = kernel.build()?;
                check_kernel_sum(&k)?;
                Operator::BlurDecimate(CircularConv::new(k, signal.height, signal.width)?, *factor)
            }
            ForwardModelSpec::Despeckle { looks } => {
                if !(looks.is_finite() && *looks >= 1.0) {
                    return Err(Error::Config(format!("looks must be >= 1, got {looks}")));
                }
                Operator::Identity
            }
        };
        Ok(ForwardModel {
            spec: spec.clone(),
            signal,
            op,
        })
    }

    pub fn spec(&self) -> &ForwardModelSpec {
        &self.spec
    }

    pub fn signal_shape(&self) -> Shape {
        self.signal
    }

    pub fn observation_shape(&self) -> Shape {
        match &self.op {
            Operator::BlurDecimate(_, s) => {
                Shape::new(self.signal.height / s, self.signal.width / s, self.signal.channels)
            }
            _ => self.signal,
        }
    }

    pub fn sigma_y(&self) -> Option<f64> {
        match self.spec {
            ForwardModelSpec::Denoise { sigma_y }
            | ForwardModelSpec::Deblur { sigma_y, .. }
            | ForwardModelSpec::SuperResolution { sigma_y, .. } => Some(sigma_y),
            _ => None,
        }
    }

    pub fn is_despeckle(&self) -> bool {
        matches!(self.spec, ForwardModelSpec::Despeckle { .. })
    }

    fn check_signal(&self, x: &Image) -> Result<()> {
        if x.shape() != self.signal {
            return Err(Error::Shape(format!("model built for {}, got {}", self.signal, x.shape())));
        }
        Ok(())
    }

    fn check_observation(&self, y: &Image) -> Result<()> {
        if y.shape() != self.observation_shape() {
            return Err(Error::Shape(format!(
                "observation should be {}, got {}",
                self.observation_shape(),
                y.shape()
            )));
        }
        Ok(())
    }

    /// `A x` (the identity for denoise, despeckle and none).
    pub fn apply(&self, x: &Image) -> Result<Image> {
        self.check_signal(x)?;
        match &self.op {
            Operator::Identity => Ok(x.clone()),
            Operator::Blur(conv) => conv.apply(x),
            Operator::BlurDecimate(conv, s) => Ok(decimate(&conv.apply(x)?, *s)),
        }
    }

    /// `Aᵀ y`.
    pub fn adjoint(&self, y: &Image) -> Result<Image> {
        self.check_observation(y)?;
        match &self.op {
            Operator::Identity => Ok(y.clone()),
            Operator::Blur(conv) => conv.adjoint(y),
            Operator::BlurDecimate(conv, s) => conv.adjoint(&zero_fill_upsample(y, *s)),
        }
    }

    /// Simulates an observation of `x`.
    pub fn degrade<R: Rng + ?Sized>(&self, x: &Image, rng: &mut R) -> Result<Image> {
        let mut y = self.apply(x)?;
        match self.spec {
            ForwardModelSpec::Despeckle { looks } => {
                if x.data().iter().any(|&v| v < 0.0) {
                    return Err(Error::Domain("despeckle needs a nonnegative image".into()));
                }
                let gamma = Gamma::new(looks, 1.0 / looks)
                    .map_err(|e| Error::Config(format!("speckle law: {e}")))?;
                y.data_mut().iter_mut().for_each(|v| *v *= gamma.sample(rng));
            }
            _ => {
                let s = self.sigma_y().unwrap_or(0.0);
                if s > 0.0 {
                    y.data_mut()
                        .iter_mut()
                        .for_each(|v| *v += s * rng.sample::<f64, _>(StandardNormal));
                }
            }
        }
        Ok(y)
    }

    fn gaussian_scale(&self) -> Result<f64> {
        let s = self.sigma_y().expect("gaussian model");
        if s <= 0.0 {
            return Err(Error::Config(
                "the Gaussian data term needs sigma_y > 0".into(),
            ));
        }
        Ok(1.0 / (s * s))
    }

    fn check_positive(x: &Image) -> Result<()> {
        if let Some(i) = x.data().iter().position(|&v| v <= POSITIVITY_FLOOR) {
            return Err(Error::Domain(format!(
                "despeckle fidelity needs x > {POSITIVITY_FLOOR}, got {} at index {i}",
                x.data()[i]
            )));
        }
        Ok(())
    }

    /// `f(x)`: `‖Ax − y‖² / (2σ_y²)` for Gaussian models, the Gamma negative
    /// log-likelihood `L Σ (log x_i + y_i / x_i)` for despeckling, 0 for none.
    pub fn fidelity(&self, x: &Image, y: &Image) -> Result<f64> {
        self.check_signal(x)?;
        self.check_observation(y)?;
        match self.spec {
            ForwardModelSpec::None => Ok(0.0),
            ForwardModelSpec::Despeckle { looks } => {
                Self::check_positive(x)?;
                Ok(looks
                    * x.data()
                        .iter()
                        .zip(y.data())
                        .map(|(a, b)| a.ln() + b / a)
                        .sum::<f64>())
            }
            _ => {
                let k = self.gaussian_scale()?;
                Ok(0.5 * k * self.apply(x)?.sub(y).norm_sq())
            }
        }
    }

    /// `∇f(x)`.
    pub fn fidelity_grad(&self, x: &Image, y: &Image) -> Result<Image> {
        self.check_signal(x)?;
        self.check_observation(y)?;
        match self.spec {
            ForwardModelSpec::None => Ok(x.zeros_like()),
            ForwardModelSpec::Despeckle { looks } => {
                Self::check_positive(x)?;
                Ok(x.zip_map(y, |a, b| looks * (1.0 / a - b / (a * a))))
            }
            _ => {
                let k = self.gaussian_scale()?;
                Ok(self.adjoint(&self.apply(x)?.sub(y))?.scale(k))
            }
        }
    }

    /// `‖A‖²` by power iteration on `AᵀA`.
    pub fn operator_norm_sq(&self, iterations: usize) -> Result<f64> {
        let mut v = Image::from_fn(self.signal, |r, c, ch| {
            1.0 + 0.1 * (((r * 7 + c * 13 + ch * 5) % 11) as f64)
        })?;
        let mut est = 0.0;
        for _ in 0..iterations.max(1) {
            v = v.scale(1.0 / v.norm());
            let w = self.adjoint(&self.apply(&v)?)?;
            est = v.dot(&w);
            v = w;
        }
        Ok(est)
    }

    /// Lipschitz constant of `∇f` for Gaussian models, `‖A‖²/σ_y²`.
    pub fn gradient_lipschitz(&self) -> Result<Option<f64>> {
        match self.spec {
            ForwardModelSpec::None => Ok(Some(0.0)),
            ForwardModelSpec::Despeckle { .. } => Ok(None),
            _ => Ok(Some(self.operator_norm_sq(100)? * self.gaussian_scale()?)),
        }
    }
}

fn check_kernel_sum(k: &Image) -> Result<()> {
    let s: f64 = k.data().iter().sum();
    if (s - 1.0).abs() > KERNEL_SUM_TOL {
        return Err(Error::Config(format!("kernel sums to {s}, expected 1")));
    }
    Ok(())
}

fn decimate(x: &Image, s: usize) -> Image {
    let shape = Shape::new(x.height() / s, x.width() / s, x.channels());
    let mut out = Image::zeros(shape);
    for r in 0..shape.height {
        for c in 0..shape.width {
            for ch in 0..shape.channels {
                out.set(r, c, ch, x.get(r * s, c * s, ch));
            }
        }
    }
    out
}

fn zero_fill_upsample(y: &Image, s: usize) -> Image {
    let mut out = Image::zeros(Shape::new(y.height() * s, y.width() * s, y.channels()));
    for r in 0..y.height() {
        for c in 0..y.width() {
            for ch in 0..y.channels() {
                out.set(r * s, c * s, ch, y.get(r, c, ch));
            }
        }
    }
    out
}
