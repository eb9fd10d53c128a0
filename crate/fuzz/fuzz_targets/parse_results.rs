#![no_main]
use evtrack::eval::parse_results;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = parse_results(text);
});
