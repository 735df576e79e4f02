#![no_main]
use libfuzzer_sys::fuzz_target;
use xmod::training::CheckpointManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = CheckpointManifest::from_json(text) {
        CheckpointManifest::from_json(&m.to_json()).expect("round trip");
    }
});
