use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use toremi::{IntervalAccumulator, ReweighterConfig, TopicLabel, TopicWeightTable};
use toremi_ffi::*;

struct Handle(*mut ToremiReweighter);

impl Handle {
    fn new(config: &ToremiConfig) -> Self {
        let mut raw = ptr::null_mut();
        assert_eq!(unsafe { toremi_reweighter_new(config, &mut raw) }, ToremiStatus::Ok);
        Handle(raw)
    }

    fn record(&self, id: &str, labels: &[&str], loss: f64) -> ToremiStatus {
        let id = CString::new(id).unwrap();
        let owned: Vec<CString> = labels.iter().map(|l| CString::new(*l).unwrap()).collect();
        let ptrs: Vec<*const c_char> = owned.iter().map(|c| c.as_ptr()).collect();
        unsafe { toremi_record_sample(self.0, id.as_ptr(), ptrs.as_ptr(), ptrs.len(), loss) }
    }

    fn weight(&self, label: &str) -> f64 {
        let label = CString::new(label).unwrap();
        let mut w = f64::NAN;
        assert_eq!(unsafe { toremi_weight(self.0, label.as_ptr(), &mut w) }, ToremiStatus::Ok);
        w
    }

    fn multiplier(&self, labels: &[&str]) -> f64 {
        let owned: Vec<CString> = labels.iter().map(|l| CString::new(*l).unwrap()).collect();
        let ptrs: Vec<*const c_char> = owned.iter().map(|c| c.as_ptr()).collect();
        let mut m = f64::NAN;
        assert_eq!(unsafe { toremi_multiplier(self.0, ptrs.as_ptr(), ptrs.len(), &mut m) }, ToremiStatus::Ok);
        m
    }
}

impl Drop for Handle {
    fn drop(&mut self) {
        unsafe { toremi_reweighter_free(self.0) };
    }
}

fn small_config() -> ToremiConfig {
    ToremiConfig {
        interval_steps: 2,
        transition_step: 4,
        ..toremi_config_default()
    }
}

fn last_error() -> String {
    let p = toremi_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn matches_core_table_over_both_stages() {
    let handle = Handle::new(&small_config());
    let core_cfg = ReweighterConfig {
        interval_steps: 2,
        transition_step: 4,
        ..Default::default()
    };
    let mut table = TopicWeightTable::new();
    let mut acc = IntervalAccumulator::new();
    let l = |s: &str| TopicLabel::new(s).unwrap();

    let losses = [[3.0, 1.0, 2.0], [2.5, 0.5, 4.0], [1.0, 2.0, 0.2], [3.3, 3.3, 0.1]];
    let mut stages = Vec::new();
    for (interval, row) in losses.iter().enumerate() {
        for step in 0..2 {
            let samples = [("a", vec!["A"]), ("b", vec!["B"]), ("ab", vec!["A", "B"])];
            for ((id, labels), &loss) in samples.iter().zip(row) {
                let loss = loss + step as f64 * 0.25;
                assert_eq!(handle.record(id, labels, loss), ToremiStatus::Ok);
                let core_labels: Vec<TopicLabel> = labels.iter().map(|s| l(s)).collect();
                acc.record_sample(id, &core_labels, loss).unwrap();
                table.observe(&core_labels);
            }
            assert_eq!(unsafe { toremi_end_step(handle.0) }, ToremiStatus::Ok);
            acc.end_step();
        }
        let mut stage = ToremiStage::Stage1;
        assert_eq!(unsafe { toremi_finalize(handle.0, &mut stage) }, ToremiStatus::Ok);
        stages.push(stage);
        table.finalize_next(&mut acc, &core_cfg).unwrap();
        for name in ["A", "B"] {
            assert_eq!(handle.weight(name).to_bits(), table.weight(name).to_bits(), "interval {interval} {name}");
        }
        assert_eq!(
            handle.multiplier(&["A", "B"]).to_bits(),
            table.multiplier(&[l("A"), l("B")], &core_cfg).to_bits()
        );
    }
    assert_eq!(stages, [ToremiStage::Stage1, ToremiStage::Stage2, ToremiStage::Stage2, ToremiStage::Stage2]);
    let mut n = 0;
    assert_eq!(unsafe { toremi_finalized_intervals(handle.0, &mut n) }, ToremiStatus::Ok);
    assert_eq!(n, 4);
}

#[test]
fn unseen_labels_have_unit_multiplier() {
    let handle = Handle::new(&small_config());
    assert_eq!(handle.multiplier(&["never-seen"]), 1.0);
    assert_eq!(handle.multiplier(&[]), 1.0);
}

#[test]
fn errors_carry_codes_and_messages() {
    let handle = Handle::new(&small_config());
    assert_eq!(handle.record("s1", &[], 1.0), ToremiStatus::InvalidArgument);
    assert!(last_error().contains("s1"));
    assert_eq!(handle.record("s2", &["A"], f64::NAN), ToremiStatus::NonFiniteLoss);
    assert_eq!(handle.record("s3", &["  "], 1.0), ToremiStatus::InvalidArgument);
    assert_eq!(unsafe { toremi_finalize(handle.0, ptr::null_mut()) }, ToremiStatus::EmptyInterval);
    assert_eq!(unsafe { toremi_end_step(ptr::null_mut()) }, ToremiStatus::NullPointer);
    assert!(last_error().contains("handle"));

    let bad = [0xffu8, 0];
    let ptrs = [bad.as_ptr() as *const c_char];
    let id = CString::new("x").unwrap();
    let status = unsafe { toremi_record_sample(handle.0, id.as_ptr(), ptrs.as_ptr(), 1, 1.0) };
    assert_eq!(status, ToremiStatus::InvalidUtf8);

    assert_eq!(handle.record("ok", &["A"], 1.0), ToremiStatus::Ok);
    assert!(toremi_last_error_message().is_null());
}

#[test]
fn stage_schedule_through_c_api() {
    let config = toremi_config_default();
    let mut stage = ToremiStage::Stage2;
    assert_eq!(unsafe { toremi_stage_for_step(&config, 3900, &mut stage) }, ToremiStatus::Ok);
    assert_eq!(stage, ToremiStage::Stage1);
    assert_eq!(unsafe { toremi_stage_for_step(&config, 4000, &mut stage) }, ToremiStatus::Ok);
    assert_eq!(stage, ToremiStage::Stage2);
}

#[test]
fn free_accepts_null() {
    unsafe { toremi_reweighter_free(ptr::null_mut()) };
}

fn header_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("toremi.h")
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(header_path()).unwrap();
    for symbol in [
        "typedef struct ToremiReweighter ToremiReweighter;",
        "toremi_config_default",
        "toremi_reweighter_new",
        "toremi_reweighter_free",
        "toremi_record_sample",
        "toremi_end_step",
        "toremi_finalize",
        "toremi_multiplier",
        "toremi_weight",
        "toremi_finalized_intervals",
        "toremi_stage_for_step",
        "toremi_last_error_message",
        "TOREMI_STATUS_OK = 0",
        "TOREMI_STATUS_NULL_POINTER",
        "TOREMI_STAGE_STAGE2 = 2",
    ] {
        assert!(header.contains(symbol), "header lacks {symbol}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(output) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(header_path())
        .output()
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
}
