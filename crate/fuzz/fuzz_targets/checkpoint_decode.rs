#![no_main]

use dualvae::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        // Accepted input is canonical: it re-encodes to the same bytes.
        assert_eq!(ckpt.encode(), data);
        let _ = ckpt.config();
    }
});
