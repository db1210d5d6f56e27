use std::ffi::{c_char, CStr, CString};
use std::ptr;

use rlp_ffi::*;

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    let n = unsafe { rlp_last_error(buf.as_mut_ptr(), buf.len()) };
    let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned();
    assert_eq!(s.len(), n.min(255));
    s
}

fn all_correct(eta1: f64, eta2: f64) -> RlpProtocol {
    RlpProtocol {
        kind: RlpProtocolKind::AllCorrect,
        eta1,
        eta2,
        n: 0,
        beta: 0.0,
        t0: 0,
        r_sub: 0.0,
    }
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(rlp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn flow_at_origin() {
    let (mut dr, mut dq) = (0.0, 0.0);
    let p = all_correct(1.0, 0.0);
    let st = unsafe { rlp_flow(0.0, 1.0, 1, &p, &mut dr, &mut dq) };
    assert_eq!(st, RlpStatus::Ok);
    assert!((dr - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
    assert!(dq > 0.0);
}

#[test]
fn flow_reports_invalid_threshold() {
    let mut p = all_correct(1.0, 0.0);
    p.kind = RlpProtocolKind::NOrMore;
    p.n = 9;
    let (mut dr, mut dq) = (0.0, 0.0);
    let st = unsafe { rlp_flow(0.0, 1.0, 4, &p, &mut dr, &mut dq) };
    assert_eq!(st, RlpStatus::Validation);
    assert!(last_error().contains("protocol.n"));
}

#[test]
fn null_arguments_are_rejected() {
    let p = all_correct(1.0, 0.0);
    let mut dq = 0.0;
    let st = unsafe { rlp_flow(0.0, 1.0, 3, &p, ptr::null_mut(), &mut dq) };
    assert_eq!(st, RlpStatus::NullArgument);
    assert!(last_error().contains("dr"));
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { rlp_ode_integrate(ptr::null(), &mut out) }, RlpStatus::NullArgument);
    assert_eq!(unsafe { rlp_trajectory_len(ptr::null()) }, 0);
    unsafe { rlp_trajectory_free(ptr::null_mut()) };
}

#[test]
fn ode_round_trip() {
    let cfg = CString::new(
        "alpha_max = 50.0\nspec = { T = 4 }\nprotocol = { kind = \"all_correct\", eta1 = 1.0 }\ngrid = { points = 20 }\n",
    )
    .unwrap();
    let mut traj = ptr::null_mut();
    assert_eq!(unsafe { rlp_ode_integrate(cfg.as_ptr(), &mut traj) }, RlpStatus::Ok);
    let n = unsafe { rlp_trajectory_len(traj) };
    assert!(n >= 20);
    let mut first = RlpRow::default();
    let mut last = RlpRow::default();
    unsafe {
        assert_eq!(rlp_trajectory_row(traj, 0, &mut first), RlpStatus::Ok);
        assert_eq!(rlp_trajectory_row(traj, n - 1, &mut last), RlpStatus::Ok);
        assert_eq!(rlp_trajectory_row(traj, n, &mut last), RlpStatus::OutOfRange);
        rlp_trajectory_free(traj);
    }
    assert_eq!(first.alpha, 0.0);
    assert_eq!(last.alpha, 50.0);
    assert!(last.rho > first.rho);
    assert!(first.empirical_reward.is_nan());
}

#[test]
fn simulate_is_seeded() {
    let cfg = CString::new(
        r#"{"D": 50, "n_episodes": 500, "spec": {"T": 2}, "protocol": {"kind": "all_correct", "eta1": 1.0}}"#,
    )
    .unwrap();
    let run = |seed| {
        let mut traj = ptr::null_mut();
        assert_eq!(unsafe { rlp_simulate(cfg.as_ptr(), seed, &mut traj) }, RlpStatus::Ok);
        let mut row = RlpRow::default();
        let n = unsafe { rlp_trajectory_len(traj) };
        unsafe {
            rlp_trajectory_row(traj, n - 1, &mut row);
            rlp_trajectory_free(traj);
        }
        (row.r, row.q, row.empirical_reward)
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
    assert!(run(3).2.is_finite());
}

#[test]
fn bad_config_text_is_a_parse_error() {
    let cfg = CString::new("alpha_max = ").unwrap();
    let mut traj = ptr::null_mut();
    assert_eq!(unsafe { rlp_ode_integrate(cfg.as_ptr(), &mut traj) }, RlpStatus::Parse);
    assert!(traj.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn hybrid_hard_fixed_points() {
    let mut set = ptr::null_mut();
    assert_eq!(unsafe { rlp_fixed_points(13, 1.0, 0.5, 1.0, &mut set) }, RlpStatus::Ok);
    assert_eq!(unsafe { rlp_fixed_points_len(set) }, 3);
    let mut pts = [RlpFixedPoint::default(); 3];
    for (i, p) in pts.iter_mut().enumerate() {
        assert_eq!(unsafe { rlp_fixed_points_get(set, i, p) }, RlpStatus::Ok);
    }
    unsafe { rlp_fixed_points_free(set) };
    assert!(pts[0].rho < pts[1].rho && pts[1].rho < pts[2].rho);
    assert_eq!([pts[0].stable, pts[1].stable, pts[2].stable], [true, false, true]);
}

#[test]
fn critical_penalty_value() {
    let mut eta = 0.0;
    assert_eq!(unsafe { rlp_critical_penalty(13, 1.0, 1.0, 1e-10, &mut eta) }, RlpStatus::Ok);
    assert!((eta - 0.2477574).abs() < 1e-6, "{eta}");
}

#[test]
fn runs_experiment_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("phase.toml");
    std::fs::write(
        &cfg_path,
        "[experiment]\nkind = \"phase\"\n[experiment.phase]\nT = 8\neta1 = [1.0]\neta2 = [0.0, 0.2]\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let c_cfg = CString::new(cfg_path.to_str().unwrap()).unwrap();
    let c_out = CString::new(out.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { rlp_run_experiment(c_cfg.as_ptr(), c_out.as_ptr(), 0) }, RlpStatus::Ok);
    assert!(out.join("manifest.json").exists());
    assert!(out.join("phase_map.csv").exists());
}

#[test]
fn header_declares_every_entry_point() {
    let header = include_str!("../include/rlp.h");
    for f in [
        "rlp_version",
        "rlp_last_error",
        "rlp_flow",
        "rlp_ode_integrate",
        "rlp_simulate",
        "rlp_trajectory_len",
        "rlp_trajectory_row",
        "rlp_trajectory_free",
        "rlp_fixed_points",
        "rlp_fixed_points_len",
        "rlp_fixed_points_get",
        "rlp_fixed_points_free",
        "rlp_critical_penalty",
        "rlp_run_experiment",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
}
