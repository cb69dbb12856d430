#![no_main]

use libfuzzer_sys::fuzz_target;
use unfold::datagen::Dataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = Dataset::decode(data) {
        // anything accepted must survive a second trip unchanged
        let again = Dataset::decode(&ds.encode().unwrap()).unwrap();
        assert_eq!(again, ds);
    }
});
