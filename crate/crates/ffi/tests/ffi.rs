use std::ffi::CString;
use std::ptr;

use fisherlora_ffi::*;

fn matrix(rows: usize, cols: usize, data: &[f64]) -> *mut FlMatrix {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { fl_matrix_new(rows, cols, data.as_ptr(), &mut m) }, FlStatus::Ok);
    m
}

fn contents(m: *const FlMatrix) -> (usize, usize, Vec<f64>) {
    let (mut r, mut c) = (0, 0);
    unsafe {
        assert_eq!(fl_matrix_shape(m, &mut r, &mut c), FlStatus::Ok);
        let mut buf = vec![0.0; r * c];
        assert_eq!(fl_matrix_copy(m, buf.as_mut_ptr(), buf.len()), FlStatus::Ok);
        (r, c, buf)
    }
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { fl_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn matrix_round_trip_and_errors() {
    let m = matrix(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(contents(m), (2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let mut small = [0.0; 2];
    assert_eq!(unsafe { fl_matrix_copy(m, small.as_mut_ptr(), 2) }, FlStatus::BufferTooSmall);
    assert!(last_error().contains("buffer"));
    unsafe { fl_matrix_free(m) };

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { fl_matrix_new(0, 3, [0.0].as_ptr(), &mut out) }, FlStatus::ShapeMismatch);
    assert_eq!(unsafe { fl_matrix_new(1, 1, ptr::null(), &mut out) }, FlStatus::NullPointer);
    assert_eq!(unsafe { fl_matrix_new(1, 1, [f64::NAN].as_ptr(), &mut out) }, FlStatus::NonFinite);
    assert!(out.is_null());
    unsafe { fl_matrix_free(ptr::null_mut()) };
}

#[test]
fn factors_match_hand_outer_products() {
    let mut f = ptr::null_mut();
    assert_eq!(unsafe { fl_factors_new(0, 2, 1, &mut f) }, FlStatus::Ok);
    let x1 = matrix(2, 1, &[1.0, 0.0]);
    let x2 = matrix(2, 1, &[0.0, 1.0]);
    let g = matrix(1, 1, &[2.0]);
    let (mut sx, mut sy) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(fl_factors_finalize(f, &mut sx, &mut sy), FlStatus::InvalidArgument);
        assert_eq!(fl_factors_accumulate(f, x1, g), FlStatus::Ok);
        assert_eq!(fl_factors_accumulate(f, x2, g), FlStatus::Ok);
        assert_eq!(fl_factors_accumulate(f, g, g), FlStatus::ShapeMismatch);
        assert_eq!(fl_factors_finalize(f, &mut sx, &mut sy), FlStatus::Ok);
    }
    assert_eq!(contents(sx).2, vec![0.5, 0.0, 0.0, 0.5]);
    assert_eq!(contents(sy).2, vec![4.0]);
    let mut e = 0.0;
    let (u, v) = ([1.0], [0.0, 1.0]);
    assert_eq!(unsafe { fl_fisher_energy(sx, sy, u.as_ptr(), 1, v.as_ptr(), 2, &mut e) }, FlStatus::Ok);
    assert_eq!(e, 2.0);
    let bad = [0.5, 0.5];
    assert_eq!(unsafe { fl_fisher_energy(sx, sy, u.as_ptr(), 1, bad.as_ptr(), 2, &mut e) }, FlStatus::InvalidArgument);
    unsafe {
        for m in [x1, x2, g, sx, sy] {
            fl_matrix_free(m);
        }
        fl_factors_free(f);
    }
}

#[test]
fn init_reconstructs_and_persists() {
    let w0 = matrix(3, 4, &[0.3, -1.0, 0.2, 0.5, 1.5, 0.1, -0.7, 0.0, 0.4, 0.9, 0.3, -0.2]);
    let sx = matrix(4, 4, &[2.0, 0.1, 0.0, 0.0, 0.1, 1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.2, 0.0, 0.0, 0.2, 3.0]);
    let sy = matrix(3, 3, &[1.0, 0.0, 0.3, 0.0, 2.0, 0.0, 0.3, 0.0, 0.7]);
    let mut init = ptr::null_mut();
    unsafe {
        assert_eq!(fl_lora_init(w0, sx, sy, 0, 5, 8.0, FlCriterion::Min, 0, &mut init), FlStatus::RankTooLarge);
        assert!(last_error().contains("live"));
        assert_eq!(fl_lora_init(w0, sx, sy, 0, 2, 8.0, FlCriterion::Min, 0, &mut init), FlStatus::Ok);
        assert_eq!(fl_lora_rank(init), 2);
        assert_eq!(fl_lora_scale(init), 4.0);
    }
    let get = |which| {
        let mut m = ptr::null_mut();
        assert_eq!(unsafe { fl_lora_factor(init, which, &mut m) }, FlStatus::Ok);
        let c = contents(m);
        unsafe { fl_matrix_free(m) };
        c
    };
    let (_, _, a) = get(FlFactor::A);
    let (_, _, b) = get(FlFactor::B);
    let (_, _, w_res) = get(FlFactor::WRes);
    let (_, _, w) = contents(w0);
    for i in 0..3 {
        for j in 0..4 {
            let ba: f64 = (0..2).map(|k| b[i * 2 + k] * a[k * 4 + j]).sum();
            assert!((w_res[i * 4 + j] + 4.0 * ba - w[i * 4 + j]).abs() <= 1e-12);
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("init.filt").to_str().unwrap()).unwrap();
    let mut back = ptr::null_mut();
    let mut idx = [0usize; 2];
    let mut idx_back = [0usize; 2];
    unsafe {
        assert_eq!(fl_lora_save(init, path.as_ptr()), FlStatus::Ok);
        assert_eq!(fl_lora_load(path.as_ptr(), &mut back), FlStatus::Ok);
        assert_eq!(fl_lora_indices(init, idx.as_mut_ptr(), 2), FlStatus::Ok);
        assert_eq!(fl_lora_indices(back, idx_back.as_mut_ptr(), 2), FlStatus::Ok);
        assert_eq!(fl_lora_indices(back, idx_back.as_mut_ptr(), 1), FlStatus::BufferTooSmall);
        let missing = CString::new(dir.path().join("none.filt").to_str().unwrap()).unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(fl_lora_load(missing.as_ptr(), &mut none), FlStatus::Io);
    }
    assert_eq!(idx, idx_back);
    unsafe {
        fl_lora_free(init);
        fl_lora_free(back);
        for m in [w0, sx, sy] {
            fl_matrix_free(m);
        }
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/fisherlora.h")).unwrap();
    for name in [
        "fl_last_error_message",
        "fl_version",
        "fl_matrix_new",
        "fl_matrix_free",
        "fl_matrix_shape",
        "fl_matrix_copy",
        "fl_factors_new",
        "fl_factors_free",
        "fl_factors_accumulate",
        "fl_factors_finalize",
        "fl_fisher_energy",
        "fl_lora_init",
        "fl_lora_free",
        "fl_lora_rank",
        "fl_lora_scale",
        "fl_lora_factor",
        "fl_lora_indices",
        "fl_lora_save",
        "fl_lora_load",
        "typedef struct FlMatrix FlMatrix",
        "FL_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let v = unsafe { std::ffi::CStr::from_ptr(fl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
