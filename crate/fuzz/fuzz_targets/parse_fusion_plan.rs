#![no_main]
use evtrack::fusion::FusionPlan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(plan) = FusionPlan::parse(text) {
        assert_eq!(FusionPlan::parse(&plan.to_string()).unwrap(), plan);
        let _ = plan.check(12);
    }
});
