#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = mdvit::train::parse_manifest(text) {
            let again = mdvit::train::manifest_to_string(&rows).expect("rows serialize");
            assert_eq!(mdvit::train::parse_manifest(&again).expect("re-parses").len(), rows.len());
        }
    }
});
