#![no_main]

use aerosense::model::ModelParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((params, training)) = ModelParams::from_json(text) {
        let back = ModelParams::from_json(&params.to_json(training.as_ref()).unwrap()).unwrap();
        assert_eq!(back.0.parameters(), params.parameters());
    }
});
