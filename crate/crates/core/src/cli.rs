//! The `ered` command: degrade, restore, bench, verify and denoise.
//!
//! Exit codes: 0 success, 1 check or runtime failure, 2 configuration or
//! input error, 3 divergence.

use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserSpec};
use crate::ednz;
use crate::equivariant::{equivariant_denoise, EquivariantConfig};
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, ForwardModelSpec, KernelSpec};
use crate::imaging::{load_image, mse, psnr, save_image, ssim, BitDepth, Image, Metrics};
use crate::optimizer::{ered_run, EredRunConfig, RunTrace, SigmaSchedule};
use crate::transform::TransformSpec;
use crate::verification::run_suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Caps the worker pool for `bench` and `verify`.
pub const THREADS_ENV: &str = "ERED_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ered", version, about = "Equivariant regularization by denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate an observation y from a clean image.
    Degrade {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the restoration loop on an observation.
    Restore {
        #[arg(long, required_unless_present = "manifest")]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        observation: Option<PathBuf>,
        /// Re-run exactly what a previous manifest describes.
        #[arg(long, conflicts_with_all = ["config", "observation"])]
        manifest: Option<PathBuf>,
        /// Ground truth for reporting PSNR/SSIM.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Degrade and restore every corpus image with every kernel and method.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a verification suite and print one JSON report per check.
    Verify {
        /// Suite name, or `all`.
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply a (possibly group-averaged) denoiser to an image.
    Denoise {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the built-in grayscale test card.
    Testcard {
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// EDNZ echo server on stdin/stdout, for protocol tests.
    #[command(name = "ednz-echo", hide = true)]
    EdnzEcho {
        /// Answer with a frame one row taller than the request.
        #[arg(long)]
        corrupt_dims: bool,
    },
}

/// A bench method: a name plus overrides of the run template.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchMethod {
    pub name: String,
    #[serde(default)]
    pub transform: Option<TransformSpec>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub sigma: Option<SigmaSchedule>,
    #[serde(default)]
    pub denoiser: Option<DenoiserSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    /// Replaces the model's kernel per job; empty keeps the model as is.
    #[serde(default)]
    pub kernels: Vec<KernelSpec>,
    pub methods: Vec<BenchMethod>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseSpec {
    pub denoiser: DenoiserSpec,
    pub sigma: f64,
    #[serde(default = "identity")]
    pub transform: TransformSpec,
    #[serde(default = "one")]
    pub n_mc: usize,
}

fn identity() -> TransformSpec {
    TransformSpec::Identity
}
fn one() -> usize {
    1
}

/// The single JSON configuration file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub model: Option<ForwardModelSpec>,
    #[serde(default)]
    pub run: Option<EredRunConfig>,
    #[serde(default)]
    pub bench: Option<BenchSpec>,
    #[serde(default)]
    pub denoise: Option<DenoiseSpec>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn model(&self) -> Result<&ForwardModelSpec> {
        self.model.as_ref().ok_or_else(|| Error::Config("config has no \"model\" section".into()))
    }

    fn run(&self) -> Result<&EredRunConfig> {
        self.run.as_ref().ok_or_else(|| Error::Config("config has no \"run\" section".into()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationSidecar {
    pub version: String,
    pub input: PathBuf,
    pub model: ForwardModelSpec,
    pub seed: u64,
    pub signal_shape: String,
    pub observation_shape: String,
    pub observation_png: PathBuf,
    pub observation_ednz: PathBuf,
    /// PSNR of `y` against the input when both have the same shape.
    pub psnr_db: Option<f64>,
}

/// Everything needed to repeat a restoration bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_path: Option<PathBuf>,
    pub model: ForwardModelSpec,
    pub run: EredRunConfig,
    pub transform: TransformSpec,
    pub observation: PathBuf,
    pub reference: Option<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub wall_time_s: f64,
    pub iterations_completed: usize,
    pub metrics: Option<Metrics>,
    pub observation_metrics: Option<Metrics>,
    pub divergence: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub image: String,
    pub kernel: usize,
    pub method: String,
    pub psnr_observation: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchAggregate {
    pub method: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub n: usize,
    pub jobs: usize,
}

fn version() -> String {
    format!("ered {}", env!("CARGO_PKG_VERSION"))
}

/// PSNR and MSE always; SSIM when the image is at least one window large.
fn metrics(x: &Image, reference: &Image) -> Result<Metrics> {
    Ok(Metrics {
        psnr: psnr(x, reference, 1.0)?,
        ssim: ssim(x, reference).unwrap_or(f64::NAN),
        mse: mse(x, reference)?,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Protocol(_) | Error::Timeout(_) | Error::Domain(_) | Error::NonFinite { .. } => EXIT_FAILURE,
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Degrade { config, input, seed, out } => cmd_degrade(&config, &input, seed, &out).map(|_| EXIT_OK),
        Command::Restore {
            config,
            observation,
            manifest,
            reference,
            seed,
            out,
        } => cmd_restore(config.as_deref(), observation.as_deref(), manifest.as_deref(), reference.as_deref(), seed, &out),
        Command::Bench { config, corpus, seed, out } => cmd_bench(&config, &corpus, seed, &out).map(|_| EXIT_OK),
        Command::Verify { suite, seed, out } => cmd_verify(&suite, seed, out.as_deref()),
        Command::Denoise {
            config,
            input,
            sigma,
            seed,
            out,
        } => cmd_denoise(&config, &input, sigma, seed, &out).map(|_| EXIT_OK),
        Command::Testcard { size, out } => {
            if size < 8 {
                return Err(Error::Config(format!("test card size must be >= 8, got {size}")));
            }
            save_image(&crate::fixtures::smoke_image(size), &out, BitDepth::Sixteen).map(|_| EXIT_OK)
        }
        Command::EdnzEcho { corrupt_dims } => {
            ednz_echo(corrupt_dims);
            Ok(EXIT_OK)
        }
    }
}

pub fn cmd_degrade(config: &Path, input: &Path, seed: u64, out: &Path) -> Result<ObservationSidecar> {
    let cfg = ConfigFile::load(config)?;
    let spec = cfg.model()?.clone();
    let x = load_image(input)?;
    let model = ForwardModel::new(&spec, x.shape())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = model.degrade(&x, &mut rng)?;
    create_dir(out)?;
    let png = out.join("observation.png");
    let raw = out.join("observation.ednz");
    save_image(&y, &png, BitDepth::Sixteen)?;
    save_image(&y, &raw, BitDepth::Sixteen)?;
    let sidecar = ObservationSidecar {
        version: version(),
        input: input.to_path_buf(),
        model: spec,
        seed,
        signal_shape: x.shape().to_string(),
        observation_shape: y.shape().to_string(),
        observation_png: png,
        observation_ednz: raw,
        psnr_db: if y.shape() == x.shape() { Some(psnr(&y, &x, 1.0)?) } else { None },
    };
    write_json(&out.join("observation.json"), &sidecar)?;
    Ok(sidecar)
}

fn run_job(run: &EredRunConfig, spec: &ForwardModelSpec, y: &Image) -> Result<RunTrace> {
    let model = ForwardModel::new(spec, spec.signal_shape(y.shape()))?;
    ered_run(run, &model, y)
}

pub fn cmd_restore(
    config: Option<&Path>,
    observation: Option<&Path>,
    manifest: Option<&Path>,
    reference: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<i32> {
    let (config_path, spec, mut run, obs_path, reference) = match manifest {
        Some(m) => {
            let text = fs::read_to_string(m).map_err(|e| Error::io(m, e))?;
            let man: RunManifest =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", m.display())))?;
            let reference = reference.map(Path::to_path_buf).or(man.reference);
            (man.config_path, man.model, man.run, man.observation, reference)
        }
        None => {
            let config = config.ok_or_else(|| Error::Config("--config is required".into()))?;
            let obs = observation.ok_or_else(|| Error::Config("--observation is required".into()))?;
            let cfg = ConfigFile::load(config)?;
            (
                Some(config.to_path_buf()),
                cfg.model()?.clone(),
                cfg.run()?.clone(),
                obs.to_path_buf(),
                reference.map(Path::to_path_buf),
            )
        }
    };
    if let Some(s) = seed {
        run.seed = s;
    }
    let y = load_image(&obs_path)?;
    let truth = reference.as_deref().map(load_image).transpose()?;
    create_dir(out)?;
    let restored_png = out.join("restored.png");
    let restored_raw = out.join("restored.ednz");
    let trace_csv = out.join("trace.csv");
    let manifest_path = out.join("manifest.json");

    let started = Instant::now();
    let (trace, divergence, code) = match run_job(&run, &spec, &y) {
        Ok(t) => (t, None, EXIT_OK),
        Err(Error::Divergence { iteration, reason, trace }) => {
            eprintln!("error: diverged at iteration {iteration}: {reason}");
            (*trace, Some(format!("iteration {iteration}: {reason}")), EXIT_DIVERGENCE)
        }
        Err(e) => return Err(e),
    };
    let wall = started.elapsed().as_secs_f64();
    trace.write_csv(&trace_csv)?;
    let mut outputs = vec![trace_csv];
    if divergence.is_none() {
        save_image(&trace.final_image, &restored_png, BitDepth::Sixteen)?;
        save_image(&trace.final_image, &restored_raw, BitDepth::Sixteen)?;
        outputs.extend([restored_png, restored_raw]);
    }
    let (metrics_out, obs_metrics) = match &truth {
        Some(t) if divergence.is_none() => (
            Some(metrics(&trace.final_image, t)?),
            if y.shape() == t.shape() { Some(metrics(&y, t)?) } else { None },
        ),
        _ => (None, None),
    };
    outputs.push(manifest_path.clone());
    let manifest = RunManifest {
        version: version(),
        config_path,
        model: spec,
        transform: run.transform.clone(),
        seed: run.seed,
        run,
        observation: obs_path,
        reference,
        outputs,
        wall_time_s: wall,
        iterations_completed: trace.meta.completed,
        metrics: metrics_out,
        observation_metrics: obs_metrics,
        divergence,
    };
    write_json(&manifest_path, &manifest)?;
    if let Some(m) = &manifest.metrics {
        println!("psnr {:.4} dB  ssim {:.4}", m.psnr, m.ssim);
    }
    Ok(code)
}

fn corpus_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "pgm" | "ppm")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no images in {}", dir.display())));
    }
    Ok(files)
}

fn with_kernel(spec: &ForwardModelSpec, kernel: &KernelSpec) -> Result<ForwardModelSpec> {
    Ok(match spec {
        ForwardModelSpec::Deblur { sigma_y, .. } => ForwardModelSpec::Deblur {
            kernel: kernel.clone(),
            sigma_y: *sigma_y,
        },
        ForwardModelSpec::SuperResolution { factor, sigma_y, .. } => ForwardModelSpec::SuperResolution {
            kernel: kernel.clone(),
            factor: *factor,
            sigma_y: *sigma_y,
        },
        other => {
            return Err(Error::Config(format!(
                "bench kernels need a deblur or super_resolution model, got {}",
                other.kind_name()
            )))
        }
    })
}

/// Mean PSNR/SSIM per method, in the order methods first appear.
pub fn aggregate(rows: &[BenchRow]) -> Vec<BenchAggregate> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
    }
    order
        .into_iter()
        .map(|m| {
            let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.method == m).collect();
            let n = sel.len() as f64;
            BenchAggregate {
                mean_psnr: sel.iter().map(|r| r.psnr).sum::<f64>() / n,
                mean_ssim: sel.iter().map(|r| r.ssim).sum::<f64>() / n,
                n: sel.iter().map(|r| r.iterations).max().unwrap_or(0),
                jobs: sel.len(),
                method: m,
            }
        })
        .collect()
}

pub fn render_table(agg: &[BenchAggregate]) -> String {
    let width = agg.iter().map(|a| a.method.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<width$}  {:>8}  {:>7}  {:>6}  {:>4}\n", "method", "PSNR", "SSIM", "N", "jobs");
    for a in agg {
        s.push_str(&format!(
            "{:<width$}  {:>8.2}  {:>7.4}  {:>6}  {:>4}\n",
            a.method, a.mean_psnr, a.mean_ssim, a.n, a.jobs
        ));
    }
    s
}

pub fn cmd_bench(config: &Path, corpus: &Path, seed: u64, out: &Path) -> Result<Vec<BenchRow>> {
    let cfg = ConfigFile::load(config)?;
    let model = cfg.model()?.clone();
    let template = cfg.run()?.clone();
    let bench = cfg
        .bench
        .clone()
        .ok_or_else(|| Error::Config("config has no \"bench\" section".into()))?;
    if bench.methods.is_empty() {
        return Err(Error::Config("bench needs at least one method".into()));
    }
    let images = corpus_images(corpus)?;
    let models: Vec<ForwardModelSpec> = if bench.kernels.is_empty() {
        vec![model]
    } else {
        bench.kernels.iter().map(|k| with_kernel(&model, k)).collect::<Result<_>>()?
    };
    let mut jobs = Vec::new();
    for (i, img) in images.iter().enumerate() {
        for (k, spec) in models.iter().enumerate() {
            for method in &bench.methods {
                jobs.push((i, img.clone(), k, spec.clone(), method.clone()));
            }
        }
    }
    create_dir(out)?;
    let pool = thread_pool()?;
    let nk = models.len() as u64;
    let rows: Vec<BenchRow> = pool.install(|| {
        jobs.par_iter()
            .enumerate()
            .map(|(job, (i, img, k, spec, method))| -> Result<BenchRow> {
                let truth = load_image(img)?;
                let model = ForwardModel::new(spec, truth.shape())?;
                // the observation depends only on (image, kernel), so all
                // methods restore the same y
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(*i as u64 * nk + *k as u64);
                let y = model.degrade(&truth, &mut rng)?;
                let mut run = template.clone();
                run.seed = seed;
                run.stream = job as u64;
                if let Some(t) = &method.transform {
                    run.transform = t.clone();
                }
                if let Some(l) = method.lambda {
                    run.lambda = l;
                }
                if let Some(s) = method.sigma {
                    run.sigma = s;
                }
                if let Some(d) = &method.denoiser {
                    run.denoiser = d.clone();
                }
                let started = Instant::now();
                let (x, iterations, diverged) = match ered_run(&run, &model, &y) {
                    Ok(t) => (t.final_image, t.meta.completed, false),
                    Err(Error::Divergence { trace, .. }) => (trace.final_image, trace.meta.completed, true),
                    Err(e) => return Err(e),
                };
                let m = metrics(&x, &truth)?;
                Ok(BenchRow {
                    image: img.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                    kernel: *k,
                    method: method.name.clone(),
                    psnr_observation: if y.shape() == truth.shape() { Some(psnr(&y, &truth, 1.0)?) } else { None },
                    psnr: m.psnr,
                    ssim: m.ssim,
                    iterations,
                    wall_time_s: started.elapsed().as_secs_f64(),
                    diverged,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows_path = out.join("rows.csv");
    let mut w = csv::Writer::from_path(&rows_path).map_err(|e| Error::Parse(format!("{}: {e}", rows_path.display())))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Parse(format!("{}: {e}", rows_path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&rows_path, e))?;
    let agg = aggregate(&rows);
    let agg_path = out.join("aggregate.csv");
    let mut w = csv::Writer::from_path(&agg_path).map_err(|e| Error::Parse(format!("{}: {e}", agg_path.display())))?;
    for a in &agg {
        w.serialize(a).map_err(|e| Error::Parse(format!("{}: {e}", agg_path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&agg_path, e))?;
    let table = render_table(&agg);
    fs::write(out.join("table.txt"), &table).map_err(|e| Error::io(out.join("table.txt"), e))?;
    print!("{table}");
    Ok(rows)
}

pub fn cmd_verify(suite: &str, seed: u64, out: Option<&Path>) -> Result<i32> {
    let pool = thread_pool()?;
    let reports = pool.install(|| run_suite(suite, seed))?;
    let mut lines = String::new();
    for r in &reports {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    print!("{lines}");
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("reports.jsonl");
        fs::write(&path, &lines).map_err(|e| Error::io(&path, e))?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.ok()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        eprintln!("{} checks passed", reports.len());
        Ok(EXIT_OK)
    } else {
        eprintln!("{} of {} checks failed: {}", failed.len(), reports.len(), failed.join(", "));
        Ok(EXIT_FAILURE)
    }
}

pub fn cmd_denoise(config: &Path, input: &Path, sigma: Option<f64>, seed: u64, out: &Path) -> Result<()> {
    let cfg = ConfigFile::load(config)?;
    let spec = cfg
        .denoise
        .clone()
        .ok_or_else(|| Error::Config("config has no \"denoise\" section".into()))?;
    let x = load_image(input)?;
    let den = Denoiser::from_spec(&spec.denoiser)?;
    let mut ecfg = EquivariantConfig::new(spec.transform.clone(), sigma.unwrap_or(spec.sigma), 1.0);
    ecfg.n_mc = spec.n_mc;
    ecfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = equivariant_denoise(&den, &ecfg, &x, &mut rng)?;
    create_dir(out)?;
    save_image(&d, out.join("denoised.png"), BitDepth::Sixteen)?;
    save_image(&d, out.join("denoised.ednz"), BitDepth::Sixteen)
}

fn ednz_echo(corrupt_dims: bool) {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut r = BufReader::new(stdin.lock());
    let mut w = BufWriter::new(stdout.lock());
    // any read error, including end of input, ends the session
    while let Ok(mut frame) = ednz::read_frame(&mut r) {
        if corrupt_dims {
            frame.shape.height += 1;
            frame.payload.extend(std::iter::repeat_n(0.0, frame.shape.width * frame.shape.channels));
        }
        if ednz::write_frame(&mut w, &frame).is_err() {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, psnr: f64, ssim: f64) -> BenchRow {
        BenchRow {
            image: "a.png".into(),
            kernel: 0,
            method: method.into(),
            psnr_observation: None,
            psnr,
            ssim,
            iterations: 400,
            wall_time_s: 0.0,
            diverged: false,
        }
    }

    #[test]
    fn aggregate_is_mean_of_rows() {
        let rows = vec![row("RED", 30.0, 0.8), row("ERED", 31.0, 0.9), row("RED", 32.0, 0.7)];
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].method, "RED");
        assert!((agg[0].mean_psnr - 31.0).abs() < 1e-12 && (agg[0].mean_ssim - 0.75).abs() < 1e-12);
        assert_eq!(agg[0].jobs, 2);
        assert_eq!(agg[1].n, 400);
        let table = render_table(&agg);
        assert_eq!(table.lines().count(), 3);
        assert!(table.contains("31.00"));
    }

    #[test]
    fn config_rejects_unknown_sections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"modle": {"kind": "denoise", "sigma_y": 0.1}}"#).unwrap();
        assert!(matches!(ConfigFile::load(&p), Err(Error::Config(_))));
        fs::write(&p, r#"{"model": {"kind": "denoise", "sigma_y": 0.1}}"#).unwrap();
        let c = ConfigFile::load(&p).unwrap();
        assert!(c.run().is_err());
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Timeout(1.0)), EXIT_FAILURE);
        assert_eq!(run(["ered", "verify", "no-such-suite"]), EXIT_CONFIG);
        assert_eq!(run(["ered", "frobnicate"]), EXIT_CONFIG);
    }

    #[test]
    fn kernel_override_needs_blur_model() {
        let k = KernelSpec::Box { size: 3 };
        assert!(with_kernel(&ForwardModelSpec::Denoise { sigma_y: 0.1 }, &k).is_err());
        let m = with_kernel(&ForwardModelSpec::Deblur { kernel: KernelSpec::Delta, sigma_y: 0.1 }, &k).unwrap();
        assert!(matches!(m, ForwardModelSpec::Deblur { kernel: KernelSpec::Box { size: 3 }, .. }));
    }
}
