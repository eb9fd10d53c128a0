#![no_main]
use evtrack::config::{parse_ini, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = parse_ini(text);
    if let Ok(cfg) = RunConfig::parse(text, &[], 0) {
        assert_eq!(RunConfig::parse(&cfg.to_ini(), &[], 0).unwrap(), cfg);
    }
});
