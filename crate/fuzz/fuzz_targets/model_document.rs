#![no_main]

use bllim::io::ModelDocument;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(doc) = ModelDocument::from_json(text) {
        let theta = doc.to_params().expect("from_json validated the parameters");
        let json = doc.to_json().expect("document serializes");
        let back = ModelDocument::from_json(&json).expect("serialized document parses");
        assert_eq!(back.to_json().unwrap(), json);
        let _ = bllim::forward_from_inverse(&theta);
    }
});
