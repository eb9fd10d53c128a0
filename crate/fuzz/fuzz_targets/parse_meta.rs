#![no_main]
use evtrack::event_io::{meta_to_string, parse_meta};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(meta) = parse_meta(text) {
        assert_eq!(parse_meta(&meta_to_string(&meta)).unwrap(), meta);
    }
});
