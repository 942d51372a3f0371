use std::ffi::{c_char, CStr, CString};
use std::ptr;

use blockfed::config::{DataSource, ExperimentConfig};
use blockfed_ffi::*;

fn small_json(rounds: usize) -> CString {
    let mut c = ExperimentConfig::desk_default();
    c.plan.rounds = rounds;
    c.fl.epochs = 1;
    if let DataSource::Synthetic(s) = &mut c.dataset.source {
        s.samples_per_class = 40;
    }
    CString::new(c.to_json()).unwrap()
}

fn last_error() -> String {
    let p = bf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Copies and frees a library-owned string.
fn take(s: *mut c_char) -> String {
    assert!(!s.is_null());
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_owned();
    unsafe { bf_string_free(s) };
    out
}

fn new_sim(json: &CString) -> *mut BfSimulation {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(bf_config_from_json(json.as_ptr(), &mut cfg), BfStatus::Ok);
        let mut sim = ptr::null_mut();
        assert_eq!(bf_simulation_new(cfg, 1, &mut sim), BfStatus::Ok);
        bf_config_free(cfg);
        sim
    }
}

#[test]
fn stepping_matches_the_library() {
    let json = small_json(3);
    let sim = new_sim(&json);
    let cfg = ExperimentConfig::from_json(json.to_str().unwrap()).unwrap();
    let mut direct = blockfed::sim::Simulation::new(&cfg, 1).unwrap();
    unsafe {
        assert_eq!(bf_simulation_rounds(sim), 3);
        for r in 1..=3 {
            let mut out = ptr::null_mut();
            assert_eq!(bf_simulation_step(sim, &mut out), BfStatus::Ok);
            let got: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
            let want = serde_json::to_value(direct.step().unwrap()).unwrap();
            assert_eq!(got, want);
            assert_eq!(bf_simulation_round(sim), r);
        }
        let mut out = ptr::null_mut();
        assert_eq!(bf_simulation_step(sim, &mut out), BfStatus::Finished);
        assert!(out.is_null());
        assert!(last_error().contains("3 rounds"));
        bf_simulation_free(sim);
    }
}

#[test]
fn run_returns_every_round() {
    let sim = new_sim(&small_json(4));
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(bf_simulation_run(sim, &mut out), BfStatus::Ok);
        let all: Vec<serde_json::Value> = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(all[3]["round"], 4);

        let mut w = ptr::null_mut();
        assert_eq!(bf_simulation_take_warnings(sim, &mut w), BfStatus::Ok);
        assert!(serde_json::from_str::<serde_json::Value>(&take(w)).unwrap().is_array());
        bf_simulation_free(sim);
    }
}

#[test]
fn mem_report_has_one_entry_per_stage() {
    let sim = new_sim(&small_json(1));
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(bf_simulation_mem_report(sim, &mut out), BfStatus::Ok);
        let r: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(r["stages"].as_array().unwrap().len(), 4);
        assert!(r["full"]["total_bytes"].as_u64().unwrap() > 0);
        bf_simulation_free(sim);
    }
}

#[test]
fn bad_config_reports_a_config_status() {
    unsafe {
        let mut cfg = ptr::null_mut();
        let json = CString::new("{\"schema_version\": 1}").unwrap();
        assert_eq!(bf_config_from_json(json.as_ptr(), &mut cfg), BfStatus::Config);
        assert!(cfg.is_null());
        assert!(!last_error().is_empty());

        let mut c = ExperimentConfig::desk_default();
        c.fl.fraction = 2.0;
        let json = CString::new(c.to_json()).unwrap();
        assert_eq!(bf_config_from_json(json.as_ptr(), &mut cfg), BfStatus::Config);
        assert!(last_error().contains("fraction"));
    }
}

#[test]
fn null_arguments_are_rejected() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(bf_config_from_json(ptr::null(), &mut out), BfStatus::NullArgument);
        assert!(last_error().contains("json"));
        assert_eq!(
            bf_simulation_step(ptr::null_mut(), ptr::null_mut()),
            BfStatus::NullArgument
        );
        assert_eq!(bf_simulation_round(ptr::null()), 0);
        bf_config_free(ptr::null_mut());
        bf_simulation_free(ptr::null_mut());
        bf_string_free(ptr::null_mut());
    }
}

#[test]
fn invalid_utf8_is_rejected() {
    let bytes = CString::new(vec![b'{', 0xff, b'}']).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { bf_config_from_json(bytes.as_ptr(), &mut out) },
        BfStatus::InvalidUtf8
    );
}

#[test]
fn config_round_trips_through_json() {
    unsafe {
        let cfg = bf_config_default();
        assert_eq!(bf_config_set_seed(cfg, 42), BfStatus::Ok);
        let mut out = ptr::null_mut();
        assert_eq!(bf_config_to_json(cfg, &mut out), BfStatus::Ok);
        let parsed = ExperimentConfig::from_json(&take(out)).unwrap();
        let mut want = ExperimentConfig::desk_default();
        want.seed = 42;
        assert_eq!(parsed, want);
        bf_config_free(cfg);
    }
}

#[test]
fn nhsic_matches_the_library() {
    let x = [0.3, -1.2, 0.8, 2.0, -0.5, 0.1, 1.7, -0.9];
    let y = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
    let mut v = f64::NAN;
    let status = unsafe {
        bf_nhsic(
            x.as_ptr(),
            y.as_ptr(),
            4,
            2,
            2,
            BfKernel::GaussianMedian as u32,
            BfKernel::Linear as u32,
            &mut v,
        )
    };
    assert_eq!(status, BfStatus::Ok);
    let (want, _) = blockfed::kernel::nhsic_value(
        &blockfed::Tensor::new(vec![4, 2], x.to_vec()).unwrap(),
        &blockfed::kernel::KernelConfig::gaussian_median(),
        &blockfed::Tensor::new(vec![4, 2], y.to_vec()).unwrap(),
        &blockfed::kernel::KernelConfig::linear(),
    )
    .unwrap();
    assert_eq!(v.to_bits(), want.to_bits());
}

#[test]
fn nhsic_rejects_bad_input() {
    let x = [1.0, 2.0];
    let mut v = 0.0;
    unsafe {
        assert_eq!(
            bf_nhsic(x.as_ptr(), x.as_ptr(), 2, 1, 1, 9, 0, &mut v),
            BfStatus::InvalidInput
        );
        assert!(last_error().contains("kernel 9"));
        assert_eq!(
            bf_nhsic(ptr::null(), x.as_ptr(), 2, 1, 1, 0, 0, &mut v),
            BfStatus::NullArgument
        );
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(bf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
