#![no_main]

use conmh::retrieval::CodeDatabase;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(db) = CodeDatabase::from_bytes(data) {
        assert_eq!(CodeDatabase::from_bytes(&db.to_bytes()).unwrap(), db);
        for i in 0..db.len().min(4) {
            assert_eq!(db.code(i).len(), db.code_length());
        }
    }
});
