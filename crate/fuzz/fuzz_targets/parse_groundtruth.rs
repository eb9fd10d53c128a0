#![no_main]
use evtrack::event_io::{groundtruth_to_string, parse_groundtruth};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(boxes) = parse_groundtruth(text) {
        assert_eq!(parse_groundtruth(&groundtruth_to_string(&boxes)).unwrap(), boxes);
    }
});
