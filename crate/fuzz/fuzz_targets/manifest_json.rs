#![no_main]

use libfuzzer_sys::fuzz_target;
use xmod::dataset::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = DatasetManifest::from_json(text, "/nonexistent") {
        // anything accepted must survive its own serialization
        let again = DatasetManifest::from_json(&m.to_json(), "/nonexistent").expect("round trip");
        assert_eq!(again.entries.len(), m.entries.len());
    }
});
