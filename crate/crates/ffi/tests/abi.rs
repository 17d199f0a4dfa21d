use std::ffi::CString;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use simwave_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { simwave_last_error_message(buf.as_mut_ptr().cast(), buf.len()) };
    String::from_utf8_lossy(&buf[..n.min(511)]).into_owned()
}

const SMALL: &str = "[scenario]\nelements_total = 8\nnum_users = 2\nnum_subbands = 2\neval_points = 4\n[optimizer]\nmax_outer_iters = 3\nmax_p2_steps = 20\n";

#[test]
fn scenario_round_trip() {
    let toml = CString::new(SMALL).unwrap();
    let mut sc = ptr::null_mut();
    assert_eq!(unsafe { simwave_scenario_from_toml(toml.as_ptr(), &mut sc) }, SimwaveStatus::Ok);
    let mut res = ptr::null_mut();
    assert_eq!(unsafe { simwave_optimize(sc, 7, &mut res) }, SimwaveStatus::Ok);
    let se = unsafe { simwave_result_spectral_efficiency(res) };
    let gp = unsafe { simwave_result_goodput(res) };
    assert!(se > 0.0 && gp > 0.0 && gp < se);
    assert!(unsafe { simwave_result_outer_iterations(res) } >= 1);

    let mut len = 0usize;
    let st = unsafe { simwave_result_phases(res, ptr::null_mut(), &mut len) };
    assert_eq!((st, len), (SimwaveStatus::BufferTooSmall, 8));
    let mut phases = vec![0.0; len];
    assert_eq!(unsafe { simwave_result_phases(res, phases.as_mut_ptr(), &mut len) }, SimwaveStatus::Ok);
    assert!(phases.iter().all(|p| (0.0..std::f64::consts::TAU).contains(p)));

    // Same seed, same answer.
    let mut again = ptr::null_mut();
    assert_eq!(unsafe { simwave_optimize(sc, 7, &mut again) }, SimwaveStatus::Ok);
    assert_eq!(unsafe { simwave_result_spectral_efficiency(again) }, se);
    unsafe {
        simwave_result_free(again);
        simwave_result_free(res);
        simwave_scenario_free(sc);
    }
}

#[test]
fn errors_are_reported() {
    let bad = CString::new("[scenario]\nunknown = 3\n").unwrap();
    let mut sc = ptr::null_mut();
    assert_eq!(unsafe { simwave_scenario_from_toml(bad.as_ptr(), &mut sc) }, SimwaveStatus::Config);
    assert!(sc.is_null());
    assert!(last_error().contains("unknown"));
    assert_eq!(
        unsafe { simwave_scenario_from_toml(ptr::null(), &mut sc) },
        SimwaveStatus::NullPointer
    );
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { simwave_optimize(ptr::null(), 1, &mut out) }, SimwaveStatus::NullPointer);
    let (mut re, mut im) = (0.0, 0.0);
    assert_eq!(unsafe { simwave_self_impedance(-1.0, 0.0027, 50.0, &mut re, &mut im) }, SimwaveStatus::Config);
    unsafe {
        simwave_scenario_free(ptr::null_mut());
        simwave_result_free(ptr::null_mut());
    }
}

#[test]
fn scalar_helpers() {
    let (mut re, mut im) = (0.0, 0.0);
    assert_eq!(unsafe { simwave_self_impedance(27e9, 0.0027, 50.0, &mut re, &mut im) }, SimwaveStatus::Ok);
    assert!(re > 0.0 && re < 50.0 && im < 0.0);

    let gains = [1.0, 0.5, 0.01];
    let mut p = [0.0; 3];
    let mut mu = 0.0;
    assert_eq!(unsafe { simwave_water_fill(gains.as_ptr(), 3, 2.0, p.as_mut_ptr(), &mut mu) }, SimwaveStatus::Ok);
    assert!((p.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    assert_eq!(p[2], 0.0);
    assert!((p[0] + 1.0 - mu).abs() < 1e-12);

    assert_eq!(simwave_goodput(10.0, 700, 2, 2.0, 700), 0.0);
    assert!((simwave_goodput(10.0, 100, 2, 2.0, 700) - 60.0 / 7.0).abs() < 1e-12);
    assert!(simwave_goodput(10.0, 1, 2, 0.0, 700).is_nan());
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("simwave.h")
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "simwave_scenario_from_toml",
        "simwave_scenario_free",
        "simwave_optimize",
        "simwave_result_free",
        "simwave_result_phases",
        "simwave_self_impedance",
        "simwave_water_fill",
        "simwave_goodput",
        "simwave_last_error_message",
        "SIMWAVE_STATUS_BUFFER_TOO_SMALL",
        "typedef struct SimwaveScenario SimwaveScenario",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

fn static_lib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let deps = exe.parent()?;
    [deps.parent()?.join("libsimwave_ffi.a")]
        .into_iter()
        .chain(std::fs::read_dir(deps).ok()?.filter_map(|e| e.ok()).map(|e| e.path()))
        .find(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("libsimwave_ffi") && n.ends_with(".a"))
                && p.exists()
        })
}

#[test]
fn c_program_links_against_header() {
    let (Some(lib), true) = (static_lib(), Command::new("cc").arg("--version").output().is_ok()) else {
        eprintln!("skipping: no C compiler or static library");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "simwave.h"
int main(void) {
    double re, im;
    if (simwave_self_impedance(27e9, 0.0027, 50.0, &re, &im) != SIMWAVE_STATUS_OK) return 1;
    SimwaveScenario *sc = NULL;
    if (simwave_scenario_from_toml("[scenario]\nbogus = 1\n", &sc) != SIMWAVE_STATUS_CONFIG) return 2;
    char buf[256];
    if (simwave_last_error_message(buf, sizeof buf) == 0) return 3;
    printf("%.6f %.6f\n", re, im);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    let re: f64 = text.split_whitespace().next().unwrap().parse().unwrap();
    assert!(re > 0.0);
}
