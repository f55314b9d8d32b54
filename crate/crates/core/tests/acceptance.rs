//! Acceptance gate: one PASS/FAIL line per criterion. Runs without the libtest
//! harness so the lines always reach the console; exits non-zero on failure.

use std::time::Instant;

use ered_core::denoiser::DenoiserSpec;
use ered_core::fixtures::smoke_image;
use ered_core::forward::{ForwardModel, ForwardModelSpec, KernelSpec};
use ered_core::imaging::{psnr, Image};
use ered_core::optimizer::{ered_run, red_run, EredRunConfig, InitPolicy, RunTrace, SigmaSchedule, StepSchedule};
use ered_core::transform::TransformSpec;
use ered_core::verification::{
    check_biased_convergence, check_noise_moments, check_unbiased_convergence, run_suite, CheckReport,
    ConvergenceSetup, BIAS_EPS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn scalars(v: &Value) -> String {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            Value::Number(n) => out.push(format!("{prefix}={:.3e}", n.as_f64().unwrap_or(f64::NAN))),
            Value::Bool(b) => out.push(format!("{prefix}={b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk("", v, &mut out);
    out.join(" ")
}

fn from_reports(id: usize, name: &'static str, reports: &[CheckReport], max_runtime: Option<f64>) -> Line {
    let runtime: f64 = reports.iter().map(|r| r.runtime_s).sum();
    let within = max_runtime.is_none_or(|m| runtime < m);
    let detail = reports
        .iter()
        .map(|r| format!("[{}: {}]", r.name, scalars(&r.measured)))
        .chain(std::iter::once(match max_runtime {
            Some(m) => format!("runtime {runtime:.2}s (limit {m}s)"),
            None => format!("runtime {runtime:.2}s"),
        }))
        .collect::<Vec<_>>()
        .join(" ");
    Line {
        id,
        name,
        passed: within && !reports.is_empty() && reports.iter().all(CheckReport::ok),
        detail,
    }
}

fn suite(id: usize, name: &'static str, suite: &str, max_runtime: Option<f64>) -> Line {
    match run_suite(suite, 0) {
        Ok(r) => from_reports(id, name, &r, max_runtime),
        Err(e) => Line { id, name, passed: false, detail: format!("error: {e}") },
    }
}

struct Smoke {
    observation_psnr: f64,
    red: RunTrace,
    ered: RunTrace,
    truth: Image,
}

fn smoke_run() -> ered_core::Result<Smoke> {
    let truth = smoke_image(64);
    let sigma_y = 5.0 / 255.0;
    let spec = ForwardModelSpec::Deblur {
        kernel: KernelSpec::Gaussian { size: 9, std: 1.6 },
        sigma_y,
    };
    let model = ForwardModel::new(&spec, truth.shape())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = model.degrade(&truth, &mut rng)?;
    let (lambda, sigma) = (0.5, 10.0 / 255.0);
    let lipschitz = 1.0 / (sigma_y * sigma_y) + lambda / (sigma * sigma);
    let mut cfg = EredRunConfig::new(
        lambda,
        StepSchedule::Constant { delta0: 1.0 / lipschitz },
        SigmaSchedule::Constant { sigma },
        400,
        DenoiserSpec::DctThreshold { block: 8, threshold: 2.7 },
    );
    cfg.init = InitPolicy::Observation;
    cfg.seed = 11;
    let red = red_run(&cfg, &model, &y)?;
    cfg.transform = TransformSpec::Flip;
    let ered = ered_run(&cfg, &model, &y)?;
    Ok(Smoke {
        observation_psnr: psnr(&y, &truth, 1.0)?,
        red,
        ered,
        truth,
    })
}

fn main() {
    let mut lines = vec![
        suite(1, "tweedie_identity", "tweedie", Some(5.0)),
        suite(2, "score_composition", "score_composition", Some(30.0)),
        suite(3, "haar_invariance", "haar", None),
    ];

    let setup = ConvergenceSetup::default();
    let unbiased = check_unbiased_convergence(&setup);
    let biased = check_biased_convergence(&setup, &BIAS_EPS);
    match &unbiased {
        Ok((r, _)) => lines.push(from_reports(4, "unbiased_convergence", std::slice::from_ref(r), Some(60.0))),
        Err(e) => lines.push(Line { id: 4, name: "unbiased_convergence", passed: false, detail: format!("error: {e}") }),
    }
    match &biased {
        Ok((r, _)) => lines.push(from_reports(5, "biased_convergence", std::slice::from_ref(r), None)),
        Err(e) => lines.push(Line { id: 5, name: "biased_convergence", passed: false, detail: format!("error: {e}") }),
    }

    lines.push(suite(6, "score_convergence", "score_convergence", None));
    lines.push(suite(7, "critical_point_convergence", "critical_points", None));
    lines.push(suite(8, "lipschitz_preservation", "lipschitz", None));
    lines.push(suite(9, "operator_correctness", "operators", None));

    match (&unbiased, &biased) {
        (Ok((_, ut)), Ok((_, bt))) => {
            let labels: Vec<String> = BIAS_EPS.iter().map(|e| format!("eps_{e:e}")).collect();
            let mut runs: Vec<(&str, &RunTrace)> = vec![("unbiased", ut)];
            runs.extend(labels.iter().map(String::as_str).zip(bt.iter()));
            let r = check_noise_moments(&runs);
            let mut line = from_reports(10, "noise_moment_boundedness", std::slice::from_ref(&r), None);
            line.detail = format!("{} runs tested, {}", runs.len(), line.detail);
            lines.push(line);
        }
        _ => lines.push(Line {
            id: 10,
            name: "noise_moment_boundedness",
            passed: false,
            detail: "convergence runs failed".into(),
        }),
    }

    let started = Instant::now();
    let smoke = smoke_run();
    let smoke_time = started.elapsed().as_secs_f64();
    match &smoke {
        Ok(s) => {
            let red = psnr(&s.red.final_image, &s.truth, 1.0).unwrap_or(f64::NAN);
            let ered = psnr(&s.ered.final_image, &s.truth, 1.0).unwrap_or(f64::NAN);
            let gain = ered - s.observation_psnr;
            let gap = (ered - red).abs();
            lines.push(Line {
                id: 11,
                name: "image_smoke_test",
                passed: gain >= 1.0 && gap <= 0.5,
                detail: format!(
                    "observation {:.2} dB, RED {red:.2} dB, ERED-flip {ered:.2} dB, gain {gain:.2} dB (>= 1), |ERED-RED| {gap:.3} dB (<= 0.5), N={}, {smoke_time:.1}s",
                    s.observation_psnr, s.ered.meta.completed
                ),
            });
        }
        Err(e) => lines.push(Line { id: 11, name: "image_smoke_test", passed: false, detail: format!("error: {e}") }),
    }

    let repeat_unbiased = check_unbiased_convergence(&setup);
    let repeat_smoke = smoke_run();
    let same_unbiased = matches!((&unbiased, &repeat_unbiased), (Ok((_, a)), Ok((_, b))) if a.bit_identical(b));
    let same_smoke = matches!((&smoke, &repeat_smoke), (Ok(a), Ok(b)) if a.red.bit_identical(&b.red) && a.ered.bit_identical(&b.ered));
    lines.push(Line {
        id: 12,
        name: "determinism",
        passed: same_unbiased && same_smoke,
        detail: format!("criterion-4 run bit-identical: {same_unbiased}, criterion-11 runs bit-identical: {same_smoke}"),
    });

    lines.sort_by_key(|l| l.id);
    for l in &lines {
        println!("{} {:>2} {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.id, l.name, l.detail);
    }
    let failed: Vec<String> = lines.iter().filter(|l| !l.passed).map(|l| format!("{} {}", l.id, l.name)).collect();
    assert_eq!(lines.len(), 12);
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", lines.len());
    } else {
        println!("acceptance: failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
