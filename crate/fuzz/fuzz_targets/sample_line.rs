#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = aerosense::io::read_ndjson_with(text.as_bytes(), aerosense::io::parse_sample_line);
    }
});
