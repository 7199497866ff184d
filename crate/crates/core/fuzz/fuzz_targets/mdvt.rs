#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = mdvit::vit::decode_checkpoint(data) {
        ck.params.check_shapes(&ck.config).expect("decoded shapes match config");
    }
});
