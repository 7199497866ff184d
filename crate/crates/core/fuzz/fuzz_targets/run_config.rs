#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = mdvit_cli::config::resolve(Some(text), &[]) {
            let echoed = cfg.effective_text().expect("effective config prints");
            let again = mdvit_cli::config::resolve(Some(&echoed), &[]).expect("echo re-parses");
            assert_eq!(again.effective_text().expect("prints"), echoed);
        }
    }
});
