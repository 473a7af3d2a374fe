use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use trilora_ffi::*;

fn spec(m: usize, n: usize, r: usize, mode: TriloraMode, init: TriloraInit) -> TriloraSpec {
    TriloraSpec {
        m,
        n,
        r1: r,
        r2: r,
        mode,
        init,
        seed: 11,
        scale: 1.0,
    }
}

struct Owned(*mut TriloraAdapter);

impl Drop for Owned {
    fn drop(&mut self) {
        unsafe { trilora_adapter_free(self.0) }
    }
}

fn new_adapter(s: TriloraSpec) -> Owned {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { trilora_adapter_new(&s, &mut p) }, TriloraStatus::Ok);
    assert!(!p.is_null());
    Owned(p)
}

fn factors(ad: &Owned) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut s = spec(0, 0, 0, TriloraMode::Abc, TriloraInit::LecunAll);
    assert_eq!(unsafe { trilora_adapter_spec(ad.0, &mut s) }, TriloraStatus::Ok);
    let (mut a, mut b, mut c) = (vec![0.0; s.r2 * s.n], vec![0.0; s.r1 * s.r2], vec![0.0; s.m * s.r1]);
    let out = TriloraGradsOut {
        a: a.as_mut_ptr(),
        a_len: a.len(),
        b: b.as_mut_ptr(),
        b_len: b.len(),
        c: c.as_mut_ptr(),
        c_len: c.len(),
    };
    assert_eq!(unsafe { trilora_adapter_factors(ad.0, out) }, TriloraStatus::Ok);
    (a, b, c)
}

fn grads_in<'a>(a: &'a [f64], b: &'a [f64], c: &'a [f64]) -> TriloraGrads {
    TriloraGrads {
        a: a.as_ptr(),
        a_len: a.len(),
        b: b.as_ptr(),
        b_len: b.len(),
        c: c.as_ptr(),
        c_len: c.len(),
    }
}

fn last_error() -> String {
    let p = trilora_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Row-major naive product used as an oracle.
fn mm(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = (0..inner).map(|k| a[i * inner + k] * b[k * cols + j]).sum();
        }
    }
    out
}

#[test]
fn forward_matches_explicit_triple_product() {
    let (m, n, r, batch) = (5, 4, 3, 2);
    let ad = new_adapter(spec(m, n, r, TriloraMode::Abc, TriloraInit::LecunAll));
    let (a, b, c) = factors(&ad);
    let x: Vec<f64> = (0..n * batch).map(|i| i as f64 * 0.25 - 1.0).collect();
    let mut y = vec![0.0; m * batch];
    let st = unsafe { trilora_adapter_forward(ad.0, x.as_ptr(), x.len(), batch, y.as_mut_ptr(), y.len()) };
    assert_eq!(st, TriloraStatus::Ok);
    let want = mm(&c, &mm(&b, &mm(&a, &x, r, n, batch), r, r, batch), m, r, batch);
    for (g, w) in y.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()), "{y:?} vs {want:?}");
    }
}

#[test]
fn fresh_adapter_is_inert() {
    let ad = new_adapter(spec(6, 4, 2, TriloraMode::Abc, TriloraInit::OutputPreserving));
    let x = [1.0; 4 * 3];
    let mut y = vec![1.0; 6 * 3];
    let st = unsafe { trilora_adapter_forward(ad.0, x.as_ptr(), x.len(), 3, y.as_mut_ptr(), y.len()) };
    assert_eq!(st, TriloraStatus::Ok);
    assert!(y.iter().all(|v| *v == 0.0));
}

#[test]
fn grads_match_closed_form_for_linear_loss() {
    // L = <U, CBAX>; G_B = Cᵀ U Xᵀ Aᵀ
    let (m, n, r, batch) = (3, 4, 2, 3);
    let ad = new_adapter(spec(m, n, r, TriloraMode::Abc, TriloraInit::LecunAll));
    let (a, _, c) = factors(&ad);
    let x: Vec<f64> = (0..n * batch).map(|i| (i as f64).sin()).collect();
    let u: Vec<f64> = (0..m * batch).map(|i| (i as f64).cos()).collect();
    let (mut ga, mut gb, mut gc) = (vec![0.0; r * n], vec![0.0; r * r], vec![0.0; m * r]);
    let out = TriloraGradsOut {
        a: ga.as_mut_ptr(),
        a_len: ga.len(),
        b: gb.as_mut_ptr(),
        b_len: gb.len(),
        c: gc.as_mut_ptr(),
        c_len: gc.len(),
    };
    let st = unsafe { trilora_adapter_grads(ad.0, x.as_ptr(), x.len(), u.as_ptr(), u.len(), batch, out) };
    assert_eq!(st, TriloraStatus::Ok);
    let t = |v: &[f64], rows: usize, cols: usize| {
        let mut o = vec![0.0; v.len()];
        for i in 0..rows {
            for j in 0..cols {
                o[j * rows + i] = v[i * cols + j];
            }
        }
        o
    };
    let ct_u = mm(&t(&c, m, r), &u, r, m, batch);
    let xt_at = mm(&t(&x, n, batch), &t(&a, r, n), batch, n, r);
    let want = mm(&ct_u, &xt_at, r, batch, r);
    for (g, w) in gb.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
    }
    assert!(ga.iter().any(|v| *v != 0.0) && gc.iter().any(|v| *v != 0.0));
}

#[test]
fn lr_ratios_follow_closed_forms() {
    let mut r = TriloraRates::default();
    assert_eq!(
        unsafe { trilora_lr_ratios(TriloraRatioMode::Eq8, 0.5, 4.0, 16, 16, &mut r) },
        TriloraStatus::Ok
    );
    assert_eq!((r.a, r.b, r.c), (0.5, 4.0, 1.0));
    assert_eq!(
        unsafe { trilora_lr_ratios(TriloraRatioMode::Eq7, 1.0, 1.0, 8, 4, &mut r) },
        TriloraStatus::Ok
    );
    assert_eq!((r.a, r.b, r.c), (1.0, 8.0, 1.0));
    assert_eq!(
        unsafe { trilora_lr_ratios(TriloraRatioMode::Uniform, -1.0, 1.0, 8, 4, &mut r) },
        TriloraStatus::InvalidArgument
    );
    assert!(last_error().contains("base_lr"));
}

#[test]
fn signsgd_moves_only_trainable_factors() {
    let ad = new_adapter(spec(4, 4, 2, TriloraMode::BOnly, TriloraInit::LecunAll));
    let (a0, b0, c0) = factors(&ad);
    let (ga, gb, gc) = (vec![1.0; 8], vec![-2.0, 3.0, 0.0, 1.0], vec![1.0; 8]);
    let rates = TriloraRates { a: 0.1, b: 0.5, c: 0.1 };
    assert_eq!(
        unsafe { trilora_signsgd_step(ad.0, grads_in(&ga, &gb, &gc), rates) },
        TriloraStatus::Ok
    );
    let (a1, b1, c1) = factors(&ad);
    assert_eq!(a0, a1);
    assert_eq!(c0, c1);
    let signs = [-1.0, 1.0, 0.0, 1.0];
    for i in 0..4 {
        assert_eq!(b1[i], b0[i] - 0.5 * signs[i]);
    }
}

#[test]
fn adamw_first_step_is_a_sign_step_when_eps_is_tiny() {
    let ad = new_adapter(spec(3, 3, 2, TriloraMode::Abc, TriloraInit::LecunAll));
    let twin = new_adapter(spec(3, 3, 2, TriloraMode::Abc, TriloraInit::LecunAll));
    let (ga, gb, gc) = (vec![0.3; 6], vec![-0.7, 0.2, 1.5, -0.1], vec![2.0; 6]);
    let rates = TriloraRates {
        a: 0.01,
        b: 0.02,
        c: 0.03,
    };
    let mut st = ptr::null_mut();
    assert_eq!(unsafe { trilora_adam_state_new(ad.0, &mut st) }, TriloraStatus::Ok);
    let cfg = TriloraAdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-12,
        weight_decay: 0.0,
    };
    let g = grads_in(&ga, &gb, &gc);
    assert_eq!(
        unsafe { trilora_adamw_step(ad.0, st, g, &cfg, rates) },
        TriloraStatus::Ok
    );
    assert_eq!(unsafe { trilora_adam_state_step(st) }, 1);
    assert_eq!(unsafe { trilora_signsgd_step(twin.0, g, rates) }, TriloraStatus::Ok);
    let (x, y) = (factors(&ad), factors(&twin));
    for (p, q) in [(x.0, y.0), (x.1, y.1), (x.2, y.2)] {
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-9);
        }
    }
    unsafe { trilora_adam_state_free(st) };
}

#[test]
fn checkpoint_round_trip_is_bit_exact_for_both_encodings() {
    let ad = new_adapter(spec(5, 3, 2, TriloraMode::Cb, TriloraInit::LecunAll));
    for enc in [TriloraEncoding::Base64, TriloraEncoding::Array] {
        let mut s = ptr::null_mut();
        assert_eq!(
            unsafe { trilora_checkpoint_to_json(ad.0, enc, &mut s) },
            TriloraStatus::Ok
        );
        let mut back = ptr::null_mut();
        assert_eq!(unsafe { trilora_checkpoint_from_json(s, &mut back) }, TriloraStatus::Ok);
        let back = Owned(back);
        let (p, q) = (factors(&ad), factors(&back));
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(
            (bits(&p.0), bits(&p.1), bits(&p.2)),
            (bits(&q.0), bits(&q.1), bits(&q.2))
        );
        unsafe { trilora_string_free(s) };
    }
}

#[test]
fn errors_are_reported_with_codes_and_messages() {
    let mut p = ptr::null_mut();
    let bad = spec(4, 4, 5, TriloraMode::Abc, TriloraInit::LecunAll);
    assert_eq!(
        unsafe { trilora_adapter_new(&bad, &mut p) },
        TriloraStatus::RankTooLarge
    );
    assert!(p.is_null());
    assert!(last_error().contains("rank 5"));

    assert_eq!(
        unsafe { trilora_adapter_new(ptr::null(), &mut p) },
        TriloraStatus::NullPointer
    );

    let ad = new_adapter(spec(4, 4, 2, TriloraMode::Abc, TriloraInit::LecunAll));
    assert!(trilora_last_error().is_null());
    let x = [0.0; 7];
    let mut y = vec![0.0; 8];
    let st = unsafe { trilora_adapter_forward(ad.0, x.as_ptr(), x.len(), 2, y.as_mut_ptr(), y.len()) };
    assert_eq!(st, TriloraStatus::ShapeMismatch);
    assert!(last_error().contains("x"));

    let nan = vec![f64::NAN; 4];
    let ok = vec![0.0; 8];
    let st = unsafe { trilora_signsgd_step(ad.0, grads_in(&ok, &nan, &ok), TriloraRates { a: 1.0, b: 1.0, c: 1.0 }) };
    assert_eq!(st, TriloraStatus::NonFinite);

    let junk = CString::new("{not json").unwrap();
    assert_eq!(
        unsafe { trilora_checkpoint_from_json(junk.as_ptr(), &mut p) },
        TriloraStatus::Parse
    );

    unsafe {
        trilora_adapter_free(ptr::null_mut());
        trilora_adam_state_free(ptr::null_mut());
        trilora_string_free(ptr::null_mut());
    }
}

#[test]
fn mcc_matches_definition() {
    assert_eq!(trilora_mcc(5, 5, 0, 0), 1.0);
    assert_eq!(trilora_mcc(0, 0, 5, 5), -1.0);
    assert_eq!(trilora_mcc(0, 0, 0, 0), 0.0);
    let want = (6.0 * 3.0 - 1.0 * 2.0) / ((7.0f64) * 8.0 * 4.0 * 5.0).sqrt();
    assert!((trilora_mcc(6, 3, 1, 2) - want).abs() < 1e-15);
}

/// Static library built alongside this test binary in `target/<profile>/deps`.
fn static_lib() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().join("libtrilora_ffi.a")
}

#[test]
fn c_program_links_against_generated_header() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib = static_lib();
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let out = tempfile::tempdir().unwrap();
    let exe = out.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg("-std=c11")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .expect("a C compiler is required for this test");
    assert!(status.success(), "compiling the C smoke test failed");
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
