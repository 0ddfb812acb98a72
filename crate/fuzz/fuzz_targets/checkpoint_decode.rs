#![no_main]

use libfuzzer_sys::fuzz_target;
use mcfpinn::checkpoint::{decode, encode};
use mcfpinn::error::Error;

fuzz_target!(|data: &[u8]| {
    match decode(data) {
        // Anything that decodes must re-encode to the same bytes.
        Ok(ck) => assert_eq!(encode(&ck.params, ck.adam.as_ref()), data),
        Err(Error::Checkpoint { offset, .. }) => assert!(offset <= data.len()),
        Err(e) => panic!("unexpected error kind: {e}"),
    }
});
