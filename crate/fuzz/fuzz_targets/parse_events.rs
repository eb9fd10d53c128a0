#![no_main]
use evtrack::event_io::{parse_events_str, SensorSize};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&flag, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let sensor = SensorSize::new(16 + (flag as u32 & 0x3f), 16 + (flag as u32 >> 2));
    let duration = (flag & 1 == 1).then_some(1_000u64);
    if let Ok(stream) = parse_events_str(text, sensor, duration) {
        stream.validate().expect("parsed streams validate");
        let again = parse_events_str(&stream.to_csv(), sensor, Some(stream.duration)).expect("csv roundtrip");
        assert_eq!(again, stream);
    }
});
