use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use subgoal_ds::data::save_demonstration;
use subgoal_ds::policy::{save_model, train_segment, PolicyKind, TrainingConfig};
use subgoal_ds::segment::segment_by_gripper;
use subgoal_ds::sim::{make_synthetic_task, SyntheticKind};
use subgoal_ds_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sds_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

/// Writes the pick-place demo and one briefly trained model per segment.
fn fixture(dir: &Path, kind: PolicyKind) -> (Vec<CString>, Vec<Vec<f64>>) {
    let demo = make_synthetic_task(SyntheticKind::PickPlace, 0);
    save_demonstration(&demo, dir.join("demo.json")).unwrap();
    let seg = segment_by_gripper(&demo);
    let cfg = TrainingConfig {
        epochs: 20,
        hidden: 8,
        ..Default::default()
    };
    let mut paths = vec![];
    for (k, s) in seg.segments.iter().enumerate() {
        let m = train_segment(s, &seg.subgoals[k], &cfg, kind).unwrap();
        let p = dir.join(format!("segment_{k}.json"));
        save_model(&m, &p).unwrap();
        paths.push(cpath(&p));
    }
    (paths, seg.subgoals)
}

#[test]
fn version_is_nonempty() {
    let v = unsafe { CStr::from_ptr(sds_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_load_and_query() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, goals) = fixture(dir.path(), PolicyKind::Stable);
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(sds_model_load(paths[0].as_ptr(), &mut m), SdsStatus::Ok);
        assert_eq!(last_error(), "");
        assert_eq!(sds_model_dim(m), 3);

        let mut v = [f64::NAN; 3];
        assert_eq!(sds_model_velocity(m, goals[0].as_ptr(), 3, v.as_mut_ptr()), SdsStatus::Ok);
        assert_eq!(v, [0.0; 3], "the goal is an equilibrium");

        let mut lyap = f64::NAN;
        assert_eq!(sds_model_lyapunov(m, goals[0].as_ptr(), 3, &mut lyap), SdsStatus::Ok);
        assert!(lyap.abs() < 1e-12);
        let off = [goals[0][0] + 0.05, goals[0][1], goals[0][2]];
        assert_eq!(sds_model_lyapunov(m, off.as_ptr(), 3, &mut lyap), SdsStatus::Ok);
        assert!(lyap > 0.0);

        assert_eq!(
            sds_model_velocity(m, off.as_ptr(), 2, v.as_mut_ptr()),
            SdsStatus::InvalidArgument
        );
        assert!(last_error().contains("dim 2"));
        sds_model_free(m);
    }
}

#[test]
fn bc_models_have_no_lyapunov_value() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, goals) = fixture(dir.path(), PolicyKind::Bc);
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(sds_model_load(paths[0].as_ptr(), &mut m), SdsStatus::Ok);
        let mut lyap = 0.0;
        assert_eq!(
            sds_model_lyapunov(m, goals[0].as_ptr(), 3, &mut lyap),
            SdsStatus::Unsupported
        );
        sds_model_free(m);
    }
}

#[test]
fn load_errors_map_to_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = cpath(&dir.path().join("missing.json"));
    let garbage = dir.path().join("garbage.json");
    std::fs::write(&garbage, "{ not json").unwrap();
    let garbage = cpath(&garbage);
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(sds_model_load(missing.as_ptr(), &mut m), SdsStatus::Io);
        assert!(m.is_null());
        assert!(last_error().contains("missing.json"));
        assert_eq!(sds_model_load(garbage.as_ptr(), &mut m), SdsStatus::Parse);
        assert_eq!(sds_model_load(ptr::null(), &mut m), SdsStatus::NullPointer);
        assert_eq!(sds_model_load(missing.as_ptr(), ptr::null_mut()), SdsStatus::NullPointer);

        let mut d = ptr::null_mut();
        assert_eq!(sds_demo_load(garbage.as_ptr(), &mut d), SdsStatus::Parse);
        assert!(d.is_null());
    }
}

#[test]
fn null_handles_are_tolerated() {
    unsafe {
        sds_model_free(ptr::null_mut());
        sds_controller_free(ptr::null_mut());
        sds_demo_free(ptr::null_mut());
        sds_controller_reset(ptr::null_mut());
        assert_eq!(sds_model_dim(ptr::null()), 0);
        assert_eq!(sds_demo_len(ptr::null()), 0);
        assert_eq!(sds_controller_active(ptr::null()), usize::MAX);
        let x = [0.0; 3];
        let mut v = [0.0; 3];
        assert_eq!(
            sds_model_velocity(ptr::null(), x.as_ptr(), 3, v.as_mut_ptr()),
            SdsStatus::NullPointer
        );
        assert_eq!(
            sds_controller_step(ptr::null_mut(), x.as_ptr(), 3, 0.0, v.as_mut_ptr(), ptr::null_mut()),
            SdsStatus::NullPointer
        );
    }
}

#[test]
fn demo_segmentation() {
    let dir = tempfile::tempdir().unwrap();
    let (_, goals) = fixture(dir.path(), PolicyKind::Bc);
    let path = cpath(&dir.path().join("demo.json"));
    unsafe {
        let mut d = ptr::null_mut();
        assert_eq!(sds_demo_load(path.as_ptr(), &mut d), SdsStatus::Ok);
        assert_eq!(sds_demo_len(d), 151);
        assert_eq!(sds_demo_dim(d), 3);
        let mut count = 0;
        assert_eq!(sds_demo_segment(d, ptr::null_mut(), 0, &mut count), SdsStatus::Ok);
        assert_eq!(count, 3);
        let mut flat = vec![0.0; 9];
        assert_eq!(sds_demo_segment(d, flat.as_mut_ptr(), 3, &mut count), SdsStatus::Ok);
        assert_eq!(flat, goals.concat());
        sds_demo_free(d);
    }
}

#[test]
fn controller_switches_at_subgoals() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, goals) = fixture(dir.path(), PolicyKind::Stable);
    unsafe {
        let mut models = vec![];
        for p in &paths {
            let mut m = ptr::null_mut();
            assert_eq!(sds_model_load(p.as_ptr(), &mut m), SdsStatus::Ok);
            models.push(m as *const SdsModel);
        }
        let flat = goals.concat();
        let grippers = [1u8, 0, 0];
        let mut c = ptr::null_mut();
        assert_eq!(
            sds_controller_new(models.as_ptr(), 3, flat.as_ptr(), 3, grippers.as_ptr(), 0.0, &mut c),
            SdsStatus::Ok
        );
        // the controller holds copies, so the handles can go
        for m in models {
            sds_model_free(m as *mut SdsModel);
        }

        assert_eq!(sds_controller_set_period(ptr::null_mut(), 0.01), SdsStatus::NullPointer);
        assert_eq!(sds_controller_set_period(c, -0.01), SdsStatus::InvalidArgument);
        assert_eq!(sds_controller_set_period(c, f64::NAN), SdsStatus::InvalidArgument);
        assert_eq!(sds_controller_set_period(c, 0.01), SdsStatus::Ok);

        let mut v = [0.0; 3];
        let mut info = SdsStepInfo::default();
        let far = [goals[0][0] + 0.1, goals[0][1], goals[0][2]];
        assert_eq!(sds_controller_step(c, far.as_ptr(), 3, 0.0, v.as_mut_ptr(), &mut info), SdsStatus::Ok);
        assert!(v.iter().all(|c| c.is_finite()));
        assert_eq!(info.gripper_command, -1);
        assert_eq!(info.active_segment, 0);
        assert_eq!(info.segment_completed, 0);

        assert_eq!(
            sds_controller_step(c, goals[0].as_ptr(), 3, 1.0, v.as_mut_ptr(), &mut info),
            SdsStatus::Ok
        );
        assert_eq!(info.gripper_command, 1);
        assert_eq!(info.segment_completed, 1);
        assert_eq!(info.active_segment, 1);
        assert_eq!(sds_controller_active(c), 1);

        sds_controller_reset(c);
        assert_eq!(sds_controller_active(c), 0);
        sds_controller_free(c);
    }
}

#[test]
fn controller_rejects_bad_gripper_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, goals) = fixture(dir.path(), PolicyKind::Bc);
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(sds_model_load(paths[0].as_ptr(), &mut m), SdsStatus::Ok);
        let models = [m as *const SdsModel];
        let mut c = ptr::null_mut();
        assert_eq!(
            sds_controller_new(models.as_ptr(), 1, goals[0].as_ptr(), 3, [7u8].as_ptr(), 0.0, &mut c),
            SdsStatus::Validation
        );
        assert!(c.is_null());
        sds_model_free(m);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("include/subgoal_ds.h"),
    )
    .unwrap();
    for name in [
        "sds_last_error",
        "sds_model_load",
        "sds_model_velocity",
        "sds_controller_new",
        "sds_controller_step",
        "sds_controller_set_period",
        "sds_demo_segment",
        "typedef struct SdsModel SdsModel",
        "SDS_STATUS_NULL_POINTER",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/subgoal_ds.h");
    let status = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
        .expect("a C compiler is installed");
    assert!(status.success());
}
