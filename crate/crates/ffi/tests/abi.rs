use std::ffi::{CStr, CString};
use std::ptr;

use shades_ffi::*;

fn last_error() -> String {
    let p = shades_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Two blocks of annotators who disagree on every item.
fn two_block_labels() -> *mut ShadesLabels {
    let (mut a, mut it, mut l) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..24u32 {
        for j in 0..30u32 {
            if (i + j) % 3 == 0 {
                continue;
            }
            a.push(i);
            it.push(j);
            l.push(u8::from((i < 12) == (j % 2 == 0)));
        }
    }
    let mut out = ptr::null_mut();
    let st = unsafe { shades_labels_from_triples(24, 30, a.as_ptr(), it.as_ptr(), l.as_ptr(), a.len(), &mut out) };
    assert_eq!(st, ShadesStatus::Ok);
    out
}

#[test]
fn fit_impute_cluster_roundtrip() {
    let labels = two_block_labels();
    let (mut m, mut n, mut count) = (0, 0, 0);
    assert_eq!(unsafe { shades_labels_dims(labels, &mut m, &mut n, &mut count) }, ShadesStatus::Ok);
    assert_eq!((m, n), (24, 30));
    assert!(count > 0);

    let mut model = ptr::null_mut();
    assert_eq!(unsafe { shades_fit_bayesian(labels, 3, 40, 10, 0.0, 5, &mut model) }, ShadesStatus::Ok);
    let mut score = -1.0;
    assert_eq!(unsafe { shades_impute(model, 0, 0, &mut score) }, ShadesStatus::Ok);
    assert!((0.0..=1.0).contains(&score));
    // annotator 0 is in the first block and item 0 is even: label 1
    assert!(score > 0.5, "score {score}");

    let mut assignment = ptr::null_mut();
    assert_eq!(unsafe { shades_select_k(model, 2, 4, 1, 0, 1, &mut assignment) }, ShadesStatus::Ok);
    let mut k = 0;
    assert_eq!(unsafe { shades_assignment_dims(assignment, &mut k, ptr::null_mut()) }, ShadesStatus::Ok);
    assert_eq!(k, 2);
    let shade = |i| {
        let mut s = 0i64;
        assert_eq!(unsafe { shades_assignment_get(assignment, i, &mut s) }, ShadesStatus::Ok);
        s
    };
    assert!((0..12).all(|i| shade(i) == shade(0)));
    assert!((12..24).all(|i| shade(i) == shade(12)));
    assert_ne!(shade(0), shade(12));
    let mut s = 0i64;
    assert_eq!(unsafe { shades_assignment_get(assignment, 99, &mut s) }, ShadesStatus::InvalidArgument);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { shades_model_save(model, path.as_ptr()) }, ShadesStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { shades_model_load(path.as_ptr(), &mut back) }, ShadesStatus::Ok);
    let mut again = -1.0;
    assert_eq!(unsafe { shades_impute(back, 0, 0, &mut again) }, ShadesStatus::Ok);
    assert_eq!(score, again);
    let mut dim = 0;
    assert_eq!(unsafe { shades_model_dims(back, &mut dim, ptr::null_mut(), ptr::null_mut()) }, ShadesStatus::Ok);
    assert_eq!(dim, 3);

    unsafe {
        shades_assignment_free(assignment);
        shades_model_free(back);
        shades_model_free(model);
        shades_labels_free(labels);
    }
}

#[test]
fn map_fit_through_abi() {
    let labels = two_block_labels();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { shades_fit_map(labels, 2, 1.0, 500, 3, &mut model) }, ShadesStatus::Ok);
    let mut score = 0.0;
    assert_eq!(unsafe { shades_impute(model, 13, 0, &mut score) }, ShadesStatus::Ok);
    assert!(score < 0.5);
    unsafe {
        shades_model_free(model);
        shades_labels_free(labels);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { shades_labels_load(ptr::null(), ptr::null(), &mut out) }, ShadesStatus::InvalidArgument);
    assert!(last_error().contains("path"));

    let missing = CString::new("/nonexistent/labels.csv").unwrap();
    assert_eq!(unsafe { shades_labels_load(missing.as_ptr(), ptr::null(), &mut out) }, ShadesStatus::Config);
    assert!(last_error().contains("nonexistent"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "annotator_id,item_id,attribute_id,label\na,x,attr,2\n").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { shades_labels_load(bad.as_ptr(), ptr::null(), &mut out) }, ShadesStatus::Data);
    assert!(out.is_null());

    let (a, it, l) = ([0u32, 0], [0u32, 0], [1u8, 0]);
    let st = unsafe { shades_labels_from_triples(1, 1, a.as_ptr(), it.as_ptr(), l.as_ptr(), 2, &mut out) };
    assert_eq!(st, ShadesStatus::Data);
    assert!(last_error().contains("duplicate observation"));

    let labels = two_block_labels();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { shades_fit_bayesian(labels, 0, 10, 0, 0.0, 1, &mut model) }, ShadesStatus::InvalidArgument);
    assert_eq!(unsafe { shades_fit_bayesian(labels, 2, 10, 0, 0.0, 1, ptr::null_mut()) }, ShadesStatus::InvalidArgument);
    unsafe { shades_labels_free(labels) };
}

#[test]
fn free_accepts_null_and_version_is_set() {
    unsafe {
        shades_labels_free(ptr::null_mut());
        shades_model_free(ptr::null_mut());
        shades_assignment_free(ptr::null_mut());
        shades_classifiers_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(shades_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/shades.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .filter_map(|rest| rest.split('(').next())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("SHADES_STATUS_NUMERICAL = 4"));
}
