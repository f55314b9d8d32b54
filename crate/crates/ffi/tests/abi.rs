use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use ered_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ered_last_error()) }.to_string_lossy().into_owned()
}

fn image(h: usize, w: usize, data: &[f64]) -> *mut EredImage {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ered_image_new(h, w, 1, data.as_ptr(), &mut out) }, EredStatus::Ok);
    out
}

fn read(img: *const EredImage) -> (usize, usize, Vec<f64>) {
    let (mut h, mut w, mut c) = (0, 0, 0);
    unsafe {
        assert_eq!(ered_image_shape(img, &mut h, &mut w, &mut c), EredStatus::Ok);
        let mut buf = vec![0.0; h * w * c];
        assert_eq!(ered_image_read(img, buf.as_mut_ptr(), buf.len()), EredStatus::Ok);
        (h, w, buf)
    }
}

#[test]
fn image_roundtrip_and_errors() {
    let data: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
    let img = image(3, 4, &data);
    let (h, w, back) = read(img);
    assert_eq!((h, w), (3, 4));
    assert_eq!(back, data);

    let mut small = [0.0; 5];
    assert_eq!(unsafe { ered_image_read(img, small.as_mut_ptr(), 5) }, EredStatus::Shape);
    assert!(last_error().contains("buffer holds 5"));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("a.ednz").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ered_image_save(img, path.as_ptr()) }, EredStatus::Ok);
    assert!(last_error().is_empty());
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { ered_image_load(path.as_ptr(), &mut loaded) }, EredStatus::Ok);
    let (_, _, again) = read(loaded);
    assert!(again.iter().zip(&data).all(|(a, b)| (a - b).abs() < 1e-6));

    let missing = CString::new("/nonexistent/x.png").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ered_image_load(missing.as_ptr(), &mut out) }, EredStatus::Io);
    assert!(out.is_null());
    assert_eq!(unsafe { ered_image_new(2, 2, 1, ptr::null(), &mut out) }, EredStatus::NullPointer);

    unsafe {
        ered_image_free(img);
        ered_image_free(loaded);
        ered_image_free(ptr::null_mut());
    }
}

#[test]
fn prior_evaluation_satisfies_tweedie() {
    let json = CString::new(
        r#"{"components": [{"weight": 0.3, "mean": [1.0, -1.0], "tau": 0.5}, {"weight": 0.7, "mean": [-0.5, 0.2], "tau": 0.8}]}"#,
    )
    .unwrap();
    let mut prior = ptr::null_mut();
    unsafe {
        assert_eq!(ered_prior_from_json(json.as_ptr(), &mut prior), EredStatus::Ok);
        let mut dim = 0;
        assert_eq!(ered_prior_dim(prior, &mut dim), EredStatus::Ok);
        assert_eq!(dim, 2);
        let x = [0.3, 0.4];
        let sigma = 0.4;
        let (mut score, mut mmse, mut logp) = ([0.0; 2], [0.0; 2], 0.0);
        assert_eq!(ered_prior_score(prior, sigma, x.as_ptr(), 2, score.as_mut_ptr()), EredStatus::Ok);
        assert_eq!(ered_prior_mmse(prior, sigma, x.as_ptr(), 2, mmse.as_mut_ptr()), EredStatus::Ok);
        assert_eq!(ered_prior_log_density(prior, sigma, x.as_ptr(), 2, &mut logp), EredStatus::Ok);
        assert!(logp.is_finite());
        for i in 0..2 {
            assert!(((mmse[i] - x[i]) / (sigma * sigma) - score[i]).abs() < 1e-12);
        }
        assert_eq!(ered_prior_mmse(prior, 0.0, x.as_ptr(), 2, mmse.as_mut_ptr()), EredStatus::InvalidArgument);
        assert_eq!(ered_prior_score(prior, sigma, x.as_ptr(), 3, score.as_mut_ptr()), EredStatus::Shape);
        ered_prior_free(prior);
    }

    let bad = CString::new(r#"{"components": []}"#).unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { ered_prior_from_json(bad.as_ptr(), &mut p) }, EredStatus::Config);
    assert!(!last_error().is_empty());
}

#[test]
fn degrade_then_restore_improves_psnr() {
    let n = 16;
    let truth: Vec<f64> = (0..n * n)
        .map(|i| {
            let (r, c) = ((i / n) as f64, (i % n) as f64);
            0.5 + 0.3 * (r / 3.0).sin() * (c / 4.0).cos()
        })
        .collect();
    let x = image(n, n, &truth);
    let model = CString::new(r#"{"kind": "denoise", "sigma_y": 0.1}"#).unwrap();
    let mut y = ptr::null_mut();
    assert_eq!(unsafe { ered_degrade(model.as_ptr(), x, 9, &mut y) }, EredStatus::Ok);

    let config = CString::new(
        r#"{
        "model": {"kind": "denoise", "sigma_y": 0.1},
        "run": {"lambda": 1.0, "step": {"kind": "constant", "delta0": 0.005},
                "sigma": {"kind": "constant", "sigma": 0.1}, "iterations": 100,
                "transform": {"kind": "flip"}, "denoiser": {"kind": "dct_threshold", "block": 4},
                "init": {"kind": "observation"}}
    }"#,
    )
    .unwrap();
    let mut restored = ptr::null_mut();
    let mut iterations = 0;
    assert_eq!(
        unsafe { ered_restore(config.as_ptr(), y, &mut restored, &mut iterations) },
        EredStatus::Ok,
        "{}",
        last_error()
    );
    assert_eq!(iterations, 100);
    let (mut p_obs, mut p_rest) = (0.0, 0.0);
    unsafe {
        assert_eq!(ered_psnr(y, x, 1.0, &mut p_obs), EredStatus::Ok);
        assert_eq!(ered_psnr(restored, x, 1.0, &mut p_rest), EredStatus::Ok);
    }
    assert!(p_rest > p_obs + 1.0, "{p_rest} vs {p_obs}");

    let diverging = CString::new(
        r#"{
        "model": {"kind": "denoise", "sigma_y": 0.1},
        "run": {"lambda": 1.0, "step": {"kind": "constant", "delta0": 100.0},
                "sigma": {"kind": "constant", "sigma": 0.1}, "iterations": 500,
                "denoiser": {"kind": "linear_shrink", "c": 0.5}}
    }"#,
    )
    .unwrap();
    let mut partial = ptr::null_mut();
    let status = unsafe { ered_restore(diverging.as_ptr(), y, &mut partial, &mut iterations) };
    assert_eq!(status, EredStatus::Divergence);
    assert!(!partial.is_null() && iterations < 500);
    assert!(last_error().contains("diverged"));

    let typo = CString::new(r#"{"modle": {}}"#).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ered_restore(typo.as_ptr(), y, &mut out, ptr::null_mut()) }, EredStatus::Config);

    unsafe {
        for h in [x, y, restored, partial] {
            ered_image_free(h);
        }
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(ered_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ered.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "ered_last_error",
        "ered_image_new",
        "ered_image_free",
        "ered_prior_score",
        "ered_restore",
        "ered_degrade",
        "ered_psnr",
        "ERED_STATUS_DIVERGENCE",
        "typedef struct EredImage EredImage",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match Command::new(&cc).args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).status() {
        Ok(status) => assert!(status.success(), "{cc} rejected the header"),
        Err(e) => eprintln!("no C compiler ({cc}: {e}); syntax check not run"),
    }
}
