#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(n) = aerosense::io::parse_norm_stats(text) {
            assert!(n.std.iter().all(|s| *s > 0.0));
        }
    }
});
