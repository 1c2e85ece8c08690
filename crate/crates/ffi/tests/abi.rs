use std::ffi::{CStr, CString};
use std::ptr;

use msda_core::alignment::{euclidean_align, SubjectDataset, Trial};
use msda_core::divergence::cs_divergence;
use msda_core::kernels::KernelConfig;
use msda_core::model::{prepare_inputs, Backbone, BackboneConfig};
use msda_core::{io, Mat};
use msda_ffi::*;

fn last_error() -> String {
    let p = msda_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn wave(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * 0.37 + phase).sin() * (1.0 + (i % 5) as f64 * 0.3)).collect()
}

#[test]
fn cs_divergence_matches_core() {
    let a = wave(40, 0.0);
    let b = wave(40, 1.3);
    let mut out = f64::NAN;
    let status = unsafe { msda_cs_divergence(a.as_ptr(), 20, b.as_ptr(), 20, 2, MsdaKernelKind::Fixed, 1.0, &mut out) };
    assert_eq!(status, MsdaStatus::Ok);
    assert!(msda_last_error().is_null());
    let expected = cs_divergence(
        &Mat::new(20, 2, a).unwrap(),
        &Mat::new(20, 2, b).unwrap(),
        &KernelConfig::fixed(1.0),
    )
    .unwrap()
    .value;
    assert_eq!(out, expected);
}

#[test]
fn ccs_hand_case_is_two() {
    let z = [0.0; 4];
    let ya = [1.0, 0.0, 1.0, 0.0];
    let yb = [0.0, 1.0, 0.0, 1.0];
    let mut out = 0.0;
    let status = unsafe {
        msda_ccs_divergence(
            z.as_ptr(),
            ya.as_ptr(),
            2,
            z.as_ptr(),
            yb.as_ptr(),
            2,
            2,
            2,
            MsdaKernelKind::Fixed,
            1.0,
            1.0,
            &mut out,
        )
    };
    assert_eq!(status, MsdaStatus::Ok);
    assert!((out - 2.0).abs() < 1e-9);
}

#[test]
fn null_and_shape_errors_are_reported() {
    let mut out = 0.0;
    let status = unsafe { msda_cs_divergence(ptr::null(), 3, ptr::null(), 3, 1, MsdaKernelKind::Median, 0.0, &mut out) };
    assert_eq!(status, MsdaStatus::NullPointer);
    assert!(last_error().contains("source"));

    let a = [0.0, 1.0];
    let status = unsafe { msda_cs_divergence(a.as_ptr(), 1, a.as_ptr(), 2, 1, MsdaKernelKind::Median, 0.0, &mut out) };
    assert_eq!(status, MsdaStatus::SampleSize);
    assert!(!last_error().is_empty());

    let status = unsafe { msda_cs_divergence(a.as_ptr(), 2, a.as_ptr(), 2, 1, MsdaKernelKind::Fixed, -1.0, &mut out) };
    assert_eq!(status, MsdaStatus::Parameter);
}

#[test]
fn schedule_midpoint_and_bad_input() {
    let (mut a, mut b) = (0.0, 0.0);
    assert_eq!(unsafe { msda_schedule(100.0, 0.7, 1.4, 100.0, &mut a, &mut b) }, MsdaStatus::Ok);
    assert_eq!((a, b), (0.35, 0.7));
    assert_eq!(unsafe { msda_schedule(f64::NAN, 0.7, 1.4, 100.0, &mut a, &mut b) }, MsdaStatus::Parameter);
    assert_eq!(unsafe { msda_schedule(1.0, 0.7, 1.4, 100.0, ptr::null_mut(), &mut b) }, MsdaStatus::NullPointer);
}

#[test]
fn percentile_selection_and_capacity() {
    let d = [1.0, 2.0, 3.0, 4.0];
    let mut idx = [usize::MAX; 4];
    let (mut n, mut thr, mut fb) = (0usize, 0.0, -1i32);
    let status = unsafe { msda_select_by_percentile(d.as_ptr(), 4, 100.0, idx.as_mut_ptr(), 4, &mut n, &mut thr, &mut fb) };
    assert_eq!(status, MsdaStatus::Ok);
    assert_eq!((n, thr, fb), (3, 4.0, 0));
    assert_eq!(&idx[..3], &[0, 1, 2]);

    let status = unsafe { msda_select_by_percentile(d.as_ptr(), 4, 100.0, idx.as_mut_ptr(), 2, &mut n, &mut thr, &mut fb) };
    assert_eq!(status, MsdaStatus::BufferTooSmall);
    assert_eq!(n, 3);

    let same = [2.0; 3];
    let status =
        unsafe { msda_select_by_percentile(same.as_ptr(), 3, 50.0, idx.as_mut_ptr(), 4, &mut n, &mut thr, ptr::null_mut()) };
    assert_eq!(status, MsdaStatus::Ok);
    assert_eq!((n, idx[0]), (1, 0));
}

fn trials(n: usize, channels: usize, samples: usize) -> Vec<f64> {
    (0..n).flat_map(|i| wave(channels * samples, i as f64 * 0.7)).collect()
}

fn core_dataset(flat: &[f64], n: usize, channels: usize, samples: usize) -> SubjectDataset {
    let per = channels * samples;
    let trials = (0..n)
        .map(|i| Trial::new(Mat::new(channels, samples, flat[i * per..(i + 1) * per].to_vec()).unwrap(), None))
        .collect();
    SubjectDataset::new("x", trials, 2).unwrap()
}

#[test]
fn euclidean_align_matches_core() {
    let (n, c, t) = (12, 3, 40);
    let flat = trials(n, c, t);
    let mut out = vec![0.0; flat.len()];
    assert_eq!(unsafe { msda_euclidean_align(flat.as_ptr(), n, c, t, out.as_mut_ptr()) }, MsdaStatus::Ok);
    let expected = euclidean_align(&core_dataset(&flat, n, c, t)).unwrap();
    let expected: Vec<f64> = expected.trials.iter().flat_map(|tr| tr.signal.data().to_vec()).collect();
    assert_eq!(out, expected);
}

#[test]
fn model_round_trip_predicts_like_core() {
    let (c, t) = (3, 40);
    let mut cfg = BackboneConfig::new(c, t, 2);
    cfg.seed = 11;
    cfg.pool = 4;
    let backbone = Backbone::init(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    io::save_checkpoint(&path, &backbone).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut model: *mut MsdaModel = ptr::null_mut();
    assert_eq!(unsafe { msda_model_load(cpath.as_ptr(), &mut model) }, MsdaStatus::Ok);
    assert!(!model.is_null());

    let (mut mc, mut mt, mut mk) = (0, 0, 0);
    assert_eq!(unsafe { msda_model_shape(model, &mut mc, &mut mt, &mut mk) }, MsdaStatus::Ok);
    assert_eq!((mc, mt, mk), (c, t, 2));

    let n = 10;
    let flat = trials(n, c, t);
    for align in [0, 1] {
        let mut labels = vec![usize::MAX; n];
        let status = unsafe { msda_model_predict(model, flat.as_ptr(), n, c, t, align, labels.as_mut_ptr()) };
        assert_eq!(status, MsdaStatus::Ok);
        let mut ds = core_dataset(&flat, n, c, t);
        if align == 1 {
            ds = euclidean_align(&ds).unwrap();
        }
        let expected = backbone.predict(&prepare_inputs(&ds, 4).unwrap()).unwrap();
        assert_eq!(labels, expected);
    }

    let mut labels = vec![0usize; n];
    let status = unsafe { msda_model_predict(model, flat.as_ptr(), n, c + 1, t, 0, labels.as_mut_ptr()) };
    assert_eq!(status, MsdaStatus::Shape);
    assert!(last_error().contains("model expects"));

    unsafe { msda_model_free(model) };
    unsafe { msda_model_free(ptr::null_mut()) };
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let cpath = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut model: *mut MsdaModel = ptr::null_mut();
    assert_eq!(unsafe { msda_model_load(cpath.as_ptr(), &mut model) }, MsdaStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("nonexistent"));
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/msda.h")).unwrap();
    for name in [
        "msda_last_error",
        "msda_cs_divergence",
        "msda_ccs_divergence",
        "msda_euclidean_align",
        "msda_schedule",
        "msda_select_by_percentile",
        "msda_model_load",
        "msda_model_shape",
        "msda_model_predict",
        "msda_model_free",
        "typedef struct MsdaModel MsdaModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
