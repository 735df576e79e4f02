#![no_main]

use libfuzzer_sys::fuzz_target;
use xmod::dataset::decode_gray_png;

fuzz_target!(|data: &[u8]| {
    if let Ok((raw, depth)) = decode_gray_png(data) {
        assert!(depth == 8 || depth == 16);
        assert_eq!(raw.data.len(), raw.width as usize * raw.height as usize);
    }
});
