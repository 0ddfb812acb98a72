#![no_main]

use libfuzzer_sys::fuzz_target;
use mcfpinn::config::{parse_config, RawConfig};
use mcfpinn::error::Error;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Split off a trailing override line so overrides get exercised too.
    let (body, over) = match text.rsplit_once("\n!") {
        Some((b, o)) => (b, vec![o.to_string()]),
        None => (text, Vec::new()),
    };
    let _ = RawConfig::parse(body);
    match parse_config(body, &over) {
        Ok(cfg) => {
            assert!(cfg.train.epochs >= 1);
            assert!(cfg.train.estimator.alpha > 0.0 && cfg.train.estimator.alpha < 2.0);
        }
        Err(Error::Config { line, .. }) => assert!(line <= body.lines().count()),
        Err(e) => panic!("unexpected error kind: {e}"),
    }
});
