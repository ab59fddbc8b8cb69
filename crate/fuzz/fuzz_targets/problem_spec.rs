#![no_main]

use bilevel_adapt::problems::ProblemSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(spec) = ProblemSpec::from_json_str(text) {
        let _ = spec.dim_x();
        let _ = spec.default_x0();
        // Generated P3 constants come from a long scan; skip it to keep runs fast.
        if spec.id != "p3" || spec.constants.is_some() {
            let _ = spec.instantiate();
        }
    }
});
