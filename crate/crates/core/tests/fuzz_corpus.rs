//! Replays the checked-in fuzz corpus through the same invariants the fuzz
//! targets assert, so regressions show up without a fuzzing toolchain.

use std::fs;
use std::path::PathBuf;

use mcfpinn::checkpoint::{decode, encode};
use mcfpinn::cli::parse_point;
use mcfpinn::config::parse_config;
use mcfpinn::error::Error;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn config_seeds() {
    let mut accepted = 0;
    for (name, data) in seeds("config_parse") {
        let text = String::from_utf8(data).unwrap();
        let (body, over) = match text.rsplit_once("\n!") {
            Some((b, o)) => (b.to_string(), vec![o.to_string()]),
            None => (text.clone(), Vec::new()),
        };
        match parse_config(&body, &over) {
            Ok(_) => accepted += 1,
            Err(Error::Config { line, .. }) => assert!(line <= body.lines().count(), "{name}"),
            Err(e) => panic!("{name}: unexpected error {e}"),
        }
    }
    assert!(accepted >= 2);
}

#[test]
fn checkpoint_seeds() {
    let mut accepted = 0;
    for (name, data) in seeds("checkpoint_decode") {
        match decode(&data) {
            Ok(ck) => {
                assert_eq!(encode(&ck.params, ck.adam.as_ref()), data, "{name}");
                accepted += 1;
            }
            Err(Error::Checkpoint { offset, .. }) => assert!(offset <= data.len(), "{name}"),
            Err(e) => panic!("{name}: unexpected error {e}"),
        }
    }
    assert_eq!(accepted, 2);
}

#[test]
fn point_seeds() {
    for (name, data) in seeds("point_parse") {
        let text = String::from_utf8(data).unwrap();
        if let Ok(x) = parse_point(&text) {
            assert!(x.iter().all(|c| c.is_finite()), "{name}");
        }
    }
    assert_eq!(parse_point("0,0").unwrap(), vec![0.0, 0.0]);
}
