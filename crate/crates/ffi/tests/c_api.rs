use std::ffi::{c_char, CString};
use std::path::Path;
use std::ptr;

use wcomp_ffi::*;

fn arctan(a: f64, b: f64) -> WcReparam {
    WcReparam {
        kind: WcKind::Arctan,
        a,
        b,
        alpha: 1.0,
    }
}

fn last_error() -> String {
    let mut buf = vec![0u8; 256];
    let n = unsafe { wc_last_error(buf.as_mut_ptr() as *mut c_char, buf.len()) };
    String::from_utf8_lossy(&buf[..n.min(255)]).into_owned()
}

#[test]
fn scalar_functions() {
    let r = arctan(1.0, 1.0);
    let mut out = f64::NAN;
    unsafe {
        assert_eq!(wc_psi(&r, 1.0, &mut out), WcStatus::Ok);
        assert_eq!(out, std::f64::consts::FRAC_PI_4);
        assert_eq!(wc_psi_prime(&r, 0.0, &mut out), WcStatus::Ok);
        assert_eq!(out, 1.0);
        assert_eq!(wc_psi_inverse(&r, 0.5, &mut out), WcStatus::Ok);
        assert!((out - 0.5f64.tan()).abs() < 1e-15);
        let (mut ga, mut gb) = (0.0, 0.0);
        assert_eq!(wc_psi_grad_ab(&r, 1.0, &mut ga, &mut gb), WcStatus::Ok);
        assert_eq!(ga, std::f64::consts::FRAC_PI_4);
        assert!((gb + 0.5).abs() < 1e-15);
    }
}

#[test]
fn errors_are_reported() {
    let r = arctan(1.0, 1.0);
    let mut out = 0.0;
    unsafe {
        assert_eq!(wc_psi_inverse(&r, 2.0, &mut out), WcStatus::Domain);
        assert!(!last_error().is_empty());
        assert_eq!(wc_psi(ptr::null(), 1.0, &mut out), WcStatus::NullPointer);
        assert_eq!(wc_psi(&r, f64::NAN, &mut out), WcStatus::InvalidInput);
        let bad = arctan(-1.0, 1.0);
        assert_ne!(wc_psi(&bad, 1.0, &mut out), WcStatus::Ok);
        let mut t: *mut WcTrainer = ptr::null_mut();
        let junk = CString::new("{not json").unwrap();
        assert_eq!(
            wc_trainer_new(junk.as_ptr(), ptr::null(), 0, &mut t),
            WcStatus::Config
        );
        assert!(t.is_null());
    }
}

const CONFIG: &str = r#"{
  "model": {"type": "mlp", "sizes": [2, 8, 2]},
  "dataset": {"type": "synthetic", "classes": 2, "per_class": 60, "dim": 2, "separation": 6.0},
  "seeds": [0],
  "epochs": 3,
  "batch_size": 16,
  "optimizer": {"type": "sgd", "lr": 0.1, "momentum": 0.9},
  "lambda": 0.0005,
  "reparam": {"kind": "arctan", "a": 1.2, "b": 1.0}
}"#;

#[test]
fn train_save_resume_bake() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CString::new(CONFIG).unwrap();
    let ck_path = CString::new(dir.path().join("t.wck").to_str().unwrap()).unwrap();
    let net_path = CString::new(dir.path().join("n.wck").to_str().unwrap()).unwrap();
    unsafe {
        let mut t: *mut WcTrainer = ptr::null_mut();
        assert_eq!(wc_trainer_new(cfg.as_ptr(), ptr::null(), 7, &mut t), WcStatus::Ok, "{}", last_error());
        let mut running = 1u8;
        for _ in 0..5 {
            assert_eq!(wc_trainer_step(t, &mut running), WcStatus::Ok);
        }
        assert_eq!(wc_trainer_save(t, ck_path.as_ptr()), WcStatus::Ok);
        let mut u: *mut WcTrainer = ptr::null_mut();
        assert_eq!(wc_trainer_load(ck_path.as_ptr(), &mut u), WcStatus::Ok, "{}", last_error());
        assert_eq!(wc_trainer_run(t), WcStatus::Ok);
        assert_eq!(wc_trainer_run(u), WcStatus::Ok);
        let mut epoch = 0usize;
        assert_eq!(wc_trainer_epoch(u, &mut epoch), WcStatus::Ok);
        assert_eq!(epoch, 3);

        let json = |tr: *const WcTrainer| {
            let mut len = 0usize;
            assert_eq!(
                wc_trainer_result_json(tr, ptr::null_mut(), 0, &mut len),
                WcStatus::BufferTooSmall
            );
            let mut buf = vec![0u8; len + 1];
            assert_eq!(
                wc_trainer_result_json(tr, buf.as_mut_ptr() as *mut c_char, buf.len(), &mut len),
                WcStatus::Ok
            );
            let v: serde_json::Value = serde_json::from_slice(&buf[..len]).unwrap();
            v
        };
        let (a, b) = (json(t), json(u));
        assert_eq!(a["curves"], b["curves"]);
        assert_eq!(a["test_acc"], b["test_acc"]);

        let mut n: *mut WcNetwork = ptr::null_mut();
        assert_eq!(wc_trainer_bake(t, &mut n), WcStatus::Ok);
        assert_eq!(wc_network_save(n, net_path.as_ptr()), WcStatus::Ok);
        let mut m: *mut WcNetwork = ptr::null_mut();
        assert_eq!(wc_network_load(net_path.as_ptr(), &mut m), WcStatus::Ok);
        let (mut d, mut c) = (0usize, 0usize);
        assert_eq!(wc_network_dims(m, &mut d, &mut c), WcStatus::Ok);
        assert_eq!((d, c), (2, 2));
        let x = [0.5, -1.0, 3.0, 2.0];
        let (mut y1, mut y2) = ([0.0; 4], [0.0; 4]);
        assert_eq!(wc_network_logits(n, x.as_ptr(), 2, y1.as_mut_ptr(), 4), WcStatus::Ok);
        assert_eq!(wc_network_logits(m, x.as_ptr(), 2, y2.as_mut_ptr(), 4), WcStatus::Ok);
        assert_eq!(y1, y2);
        assert_eq!(
            wc_network_logits(m, x.as_ptr(), 2, y2.as_mut_ptr(), 3),
            WcStatus::BufferTooSmall
        );
        // A training checkpoint is not a plain network.
        let mut bad: *mut WcNetwork = ptr::null_mut();
        assert_eq!(wc_network_load(ck_path.as_ptr(), &mut bad), WcStatus::Checkpoint);

        wc_network_free(n);
        wc_network_free(m);
        wc_trainer_free(t);
        wc_trainer_free(u);
        wc_trainer_free(ptr::null_mut());
    }
}

#[test]
fn header_is_generated_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/wcomp.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["wc_psi", "wc_trainer_new", "wc_network_logits", "wc_last_error", "WC_STATUS_DOMAIN"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", "-std=c99"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler, skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
