#![no_main]

use bilevel_adapt_cli::manifest::RunManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = RunManifest::from_json_str(text);
    }
});
