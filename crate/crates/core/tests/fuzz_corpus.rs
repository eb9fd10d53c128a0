//! Replays the checked-in fuzz seeds through the same roundtrip checks the
//! fuzz targets run, so regressions show up under plain `cargo test`.

use std::fs;
use std::path::PathBuf;

use evtrack::config::{parse_ini, RunConfig};
use evtrack::eval::parse_results;
use evtrack::event_io::{groundtruth_to_string, meta_to_string, parse_events_str, parse_groundtruth, parse_meta, SensorSize};
use evtrack::fusion::FusionPlan;
use evtrack::nn::Checkpoint;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Seeds other than `empty` are valid inputs and must parse.
fn expect_ok<T, E: std::fmt::Debug>(name: &str, r: Result<T, E>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) if name == "empty" => {
            let _ = e;
            None
        }
        Err(e) => panic!("seed {name} rejected: {e:?}"),
    }
}

#[test]
fn event_seeds_roundtrip() {
    for (name, data) in seeds("parse_events") {
        let (&flag, rest) = data.split_first().expect("flag byte");
        let text = std::str::from_utf8(rest).unwrap();
        let sensor = SensorSize::new(16 + (flag as u32 & 0x3f), 16 + (flag as u32 >> 2));
        let duration = (flag & 1 == 1).then_some(1_000u64);
        if let Some(stream) = expect_ok(&name, parse_events_str(text, sensor, duration)) {
            stream.validate().unwrap();
            let again = parse_events_str(&stream.to_csv(), sensor, Some(stream.duration)).unwrap();
            assert_eq!(again, stream, "{name}");
        }
    }
}

#[test]
fn groundtruth_seeds_roundtrip() {
    for (name, data) in seeds("parse_groundtruth") {
        let text = String::from_utf8(data).unwrap();
        let boxes = expect_ok(&name, parse_groundtruth(&text)).unwrap();
        assert_eq!(parse_groundtruth(&groundtruth_to_string(&boxes)).unwrap(), boxes, "{name}");
    }
}

#[test]
fn meta_seeds_roundtrip() {
    for (name, data) in seeds("parse_meta") {
        let text = String::from_utf8(data).unwrap();
        let meta = expect_ok(&name, parse_meta(&text)).unwrap();
        assert_eq!(parse_meta(&meta_to_string(&meta)).unwrap(), meta, "{name}");
    }
}

#[test]
fn config_seeds_roundtrip() {
    for (name, data) in seeds("parse_config") {
        let text = String::from_utf8(data).unwrap();
        parse_ini(&text).unwrap();
        let cfg = expect_ok(&name, RunConfig::parse(&text, &[], 0)).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_ini(), &[], 0).unwrap(), cfg, "{name}");
    }
}

#[test]
fn checkpoint_seeds_roundtrip() {
    for (name, data) in seeds("parse_checkpoint") {
        if let Some(ck) = expect_ok(&name, Checkpoint::parse(&data)) {
            let bytes = ck.to_bytes().unwrap();
            assert_eq!(Checkpoint::parse(&bytes).unwrap(), ck, "{name}");
        }
    }
}

#[test]
fn results_seeds_parse() {
    for (name, data) in seeds("parse_results") {
        let text = String::from_utf8(data).unwrap();
        let rows = expect_ok(&name, parse_results(&text)).unwrap();
        assert!(!rows.is_empty(), "{name}");
    }
}

#[test]
fn fusion_plan_seeds_roundtrip() {
    for (name, data) in seeds("parse_fusion_plan") {
        let text = String::from_utf8(data).unwrap();
        let plan = expect_ok(&name, FusionPlan::parse(&text)).unwrap();
        assert_eq!(FusionPlan::parse(&plan.to_string()).unwrap(), plan, "{name}");
    }
}
