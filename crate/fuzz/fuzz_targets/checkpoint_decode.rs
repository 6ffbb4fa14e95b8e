#![no_main]

use cotrain::trainer::checkpoint::checkpoint_identity;
use cotrain::trainer::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode().expect("decoded checkpoints re-encode");
        assert_eq!(Checkpoint::decode(&bytes).as_ref(), Ok(&ck));
        let _ = checkpoint_identity(data);
    }
});
