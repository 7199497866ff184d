#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(iq) = mdvit::formats::decode_mdiq(data) {
        let again = mdvit::formats::encode_mdiq(&iq).expect("decoded record re-encodes");
        assert_eq!(mdvit::formats::decode_mdiq(&again).expect("re-decodes").samples, iq.samples);
    }
});
