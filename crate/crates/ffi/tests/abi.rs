use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use periface_ffi::*;

fn last_error() -> String {
    let p = pf_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn gray(h: usize, w: usize, v: f64) -> *mut PfImage {
    let data = vec![v; 3 * h * w];
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { pf_image_new(h, w, data.as_ptr(), data.len(), &mut out) },
        PF_OK
    );
    out
}

#[test]
fn image_round_trip_and_errors() {
    unsafe {
        let img = gray(2, 3, 0.25);
        assert_eq!((pf_image_height(img), pf_image_width(img)), (2, 3));
        let mut buf = vec![0.0; 18];
        assert_eq!(pf_image_copy_data(img, buf.as_mut_ptr(), buf.len()), PF_OK);
        assert!(buf.iter().all(|&v| v == 0.25));
        assert_eq!(pf_image_copy_data(img, buf.as_mut_ptr(), 5), PF_ERR_BUFFER_TOO_SMALL);
        assert!(last_error().contains("5"));

        let dir = tempfile::tempdir().unwrap();
        let file = CString::new(dir.path().join("g.png").to_str().unwrap()).unwrap();
        assert_eq!(pf_image_save_png(img, file.as_ptr()), PF_OK);
        let mut back = ptr::null_mut();
        assert_eq!(pf_image_load_png(file.as_ptr(), &mut back), PF_OK);
        assert_eq!(pf_image_width(back), 3);

        let missing = CString::new(dir.path().join("nope.png").to_str().unwrap()).unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(pf_image_load_png(missing.as_ptr(), &mut none), PF_ERR_IO);
        assert!(none.is_null());
        assert_eq!(pf_image_new(2, 2, buf.as_ptr(), 5, &mut none), PF_ERR_DIMENSION);
        assert_eq!(pf_image_new(2, 2, ptr::null(), 12, &mut none), PF_ERR_NULL_POINTER);
        assert_eq!(pf_image_height(ptr::null()), 0);

        pf_image_free(img);
        pf_image_free(back);
        pf_image_free(ptr::null_mut());
    }
}

#[test]
fn last_error_is_per_thread() {
    pf_clear_last_error();
    assert!(pf_last_error_message().is_null());
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { pf_generator_toy(ptr::null_mut()) }, PF_ERR_NULL_POINTER);
    assert!(last_error().contains("out"));
    std::thread::spawn(|| assert!(pf_last_error_message().is_null()))
        .join()
        .unwrap();
    assert_eq!(unsafe { pf_generator_toy(&mut out) }, PF_OK);
    unsafe { pf_generator_free(out) };
    let bad = CString::new("stylegan2").unwrap();
    assert_eq!(unsafe { pf_generator_load(bad.as_ptr(), &mut out) }, PF_ERR_CONFIG);
}

#[test]
fn render_inpaint_and_metrics() {
    unsafe {
        let mut gen = ptr::null_mut();
        assert_eq!(pf_generator_toy(&mut gen), PF_OK);
        let dim = pf_generator_latent_dim(gen);
        assert_eq!(dim, 512);
        let w = vec![0.1; dim];
        let mut face = ptr::null_mut();
        assert_eq!(pf_generator_render(gen, w.as_ptr(), dim, &mut face), PF_OK);
        assert_eq!(pf_generator_render(gen, w.as_ptr(), 7, &mut face), PF_ERR_DIMENSION);

        let mut inp = ptr::null_mut();
        assert_eq!(pf_inpainter_toy(&mut inp), PF_OK);
        let mut p = pf_inversion_params_default();
        assert_eq!(p.max_iters, 25);
        p.max_iters = 0;
        let mut res = ptr::null_mut();
        assert_eq!(pf_inpaint(inp, face, &p, &mut res), PF_OK);
        assert_eq!(pf_result_trace_len(res), 1);
        let (mut pre, mut post) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(pf_result_image(res, PfResultImage::Pre, &mut pre), PF_OK);
        assert_eq!(pf_result_image(res, PfResultImage::Post, &mut post), PF_OK);
        let mut l1 = f64::NAN;
        assert_eq!(pf_metric(PfMetric::L1, pre, post, &mut l1), PF_OK);
        assert_eq!(l1, 0.0);
        pf_result_free(res);

        p.max_iters = 3;
        assert_eq!(pf_inpaint(inp, face, &p, &mut res), PF_OK);
        let n = pf_result_trace_len(res);
        let mut trace = vec![0.0; n];
        assert_eq!(pf_result_copy_trace(res, trace.as_mut_ptr(), n), PF_OK);
        let best = pf_result_best_loss(res);
        assert!(trace.iter().all(|&t| t >= best) && trace.contains(&best));
        let mut w_star = vec![0.0; dim];
        assert_eq!(pf_result_copy_w(res, w_star.as_mut_ptr(), dim), PF_OK);
        assert!(w_star.iter().all(|v| v.is_finite()));

        let mut tv = f64::NAN;
        assert_eq!(pf_metric(PfMetric::Tv, ptr::null(), face, &mut tv), PF_OK);
        assert!(tv > 0.0);
        let small = gray(4, 4, 0.5);
        assert_eq!(pf_metric(PfMetric::Ssim, small, small, &mut tv), PF_ERR_DIMENSION);
        assert_eq!(
            pf_metric(PfMetric::Psnr, ptr::null(), small, &mut tv),
            PF_ERR_NULL_POINTER
        );

        for h in [small, pre, post, face] {
            pf_image_free(h);
        }
        pf_result_free(res);
        pf_inpainter_free(inp);
        pf_generator_free(gen);
    }
}

#[test]
fn losses_and_equal_error_rate() {
    let ones = PfLossComponents {
        perc: 1.0,
        style: 1.0,
        id: 1.0,
        lnd: 1.0,
        rec: 1.0,
    };
    let mut total = 0.0;
    assert_eq!(unsafe { pf_loss_total(&ones, &mut total) }, PF_OK);
    assert_eq!(total, 2.111);
    let nan = PfLossComponents { rec: f64::NAN, ..ones };
    assert_eq!(unsafe { pf_loss_total(&nan, &mut total) }, PF_ERR_NUMERIC);
    assert!((pf_loss_opt(2.0, 3.0) - 0.32).abs() < 1e-15);

    let (g, i) = ([0.9, 0.6, 0.3], [0.5, 0.1, -0.2]);
    let (mut eer, mut t) = (0.0, 0.0);
    let rc = unsafe { pf_equal_error_rate(g.as_ptr(), 3, i.as_ptr(), 3, 1001, &mut eer, &mut t) };
    assert_eq!(rc, PF_OK);
    assert!((eer - 1.0 / 3.0).abs() < 1e-12);
    let rc = unsafe { pf_equal_error_rate(g.as_ptr(), 3, ptr::null(), 0, 11, &mut eer, &mut t) };
    assert_eq!(rc, PF_ERR_DEGENERATE);
    assert!(last_error().contains("impostor"));
}

fn target_dir() -> PathBuf {
    // target/<profile>/deps/abi-<hash>
    std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf()
}

#[test]
fn header_declares_the_exports() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/periface.h")).unwrap();
    for name in [
        "pf_last_error_message",
        "pf_image_new",
        "pf_generator_render",
        "pf_inpaint(",
        "pf_metric(",
        "pf_equal_error_rate",
        "typedef struct PfImage PfImage",
        "#define PF_ERR_PANIC 99",
    ] {
        assert!(header.contains(name), "{name}");
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    let lib = target_dir().join("libperiface_ffi.a");
    assert!(lib.is_file(), "{} missing", lib.display());
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(root.join("include"))
        .arg(root.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.starts_with("64x64 trace=3"), "{stdout}");
    assert!(stdout.contains("bad=3"), "{stdout}");
}
