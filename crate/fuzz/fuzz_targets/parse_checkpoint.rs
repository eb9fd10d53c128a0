#![no_main]
use evtrack::nn::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::parse(data) {
        let bytes = ck.to_bytes().expect("parsed checkpoints serialize");
        assert_eq!(Checkpoint::parse(&bytes).unwrap(), ck);
    }
});
