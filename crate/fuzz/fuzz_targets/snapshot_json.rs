#![no_main]

use aerosense::geometry::AirspaceConfig;
use aerosense::snapshot::count_labels;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(snap) = aerosense::io::parse_snapshot(text) {
        // Accepted snapshots must survive labeling without panicking.
        let (ap, ar) = count_labels(&snap, &AirspaceConfig::terminal_default());
        assert!(ap as usize <= snap.len() && ar as usize <= snap.len());
    }
});
