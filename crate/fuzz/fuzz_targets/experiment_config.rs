#![no_main]

use libfuzzer_sys::fuzz_target;
use xmod::config::parse_config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config(text) {
        let snap = cfg.snapshot();
        let again = parse_config(&snap).expect("snapshot reparses");
        assert_eq!(again.snapshot(), snap);
    }
});
