#![no_main]

use libfuzzer_sys::fuzz_target;
use mcfpinn::cli::parse_point;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(x) = parse_point(text) {
        assert!(!x.is_empty());
        assert!(x.iter().all(|c| c.is_finite()));
        assert!(x.iter().map(|c| c * c).sum::<f64>().is_finite());
    }
});
