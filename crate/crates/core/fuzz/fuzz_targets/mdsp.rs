#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = mdvit::formats::decode_mdsp(data) {
        assert_eq!(img.gray.len(), img.height * img.width);
        assert!(img.gray.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
